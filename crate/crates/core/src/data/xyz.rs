//! XYZ text import/export and ASCII PLY export.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{io_err, DataError, Result};
use crate::geometry::{Point, PointCloud};

/// Parses whitespace-separated `x y z` lines; blank lines and `#` comments
/// are skipped. `source` names the input in error messages.
pub fn parse_xyz(text: &str, source: &str) -> Result<PointCloud> {
    let err = |line: usize, msg: String| DataError::Parse {
        path: source.to_owned(),
        line,
        msg,
    };
    let mut points = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(err(i + 1, format!("expected 3 fields, found {}", fields.len())));
        }
        let mut p: Point = [0.0; 3];
        for (slot, f) in p.iter_mut().zip(&fields) {
            *slot = f
                .parse()
                .map_err(|_| err(i + 1, format!("not a number: {f:?}")))?;
            if !slot.is_finite() {
                return Err(err(i + 1, format!("non-finite coordinate {f:?}")));
            }
        }
        points.push(p);
    }
    if points.is_empty() {
        return Err(err(0, "no points".into()));
    }
    Ok(PointCloud::new(points)?)
}

pub fn read_xyz(path: &Path) -> Result<PointCloud> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    parse_xyz(&text, &path.display().to_string())
}

/// Shortest round-trip decimal representation, one point per line.
pub fn xyz_string(cloud: &PointCloud) -> String {
    let mut out = String::with_capacity(cloud.len() * 64);
    for p in cloud.points() {
        let _ = writeln!(out, "{:?} {:?} {:?}", p[0], p[1], p[2]);
    }
    out
}

pub fn write_xyz(cloud: &PointCloud, path: &Path) -> Result<()> {
    fs::write(path, xyz_string(cloud)).map_err(io_err(path))
}

const PRED_COLOR: [u8; 3] = [220, 50, 47];
const GT_COLOR: [u8; 3] = [38, 139, 210];

fn ply_text(parts: &[(&[Point], Option<[u8; 3]>)]) -> String {
    let count: usize = parts.iter().map(|(p, _)| p.len()).sum();
    let colored = parts.iter().any(|(_, c)| c.is_some());
    let mut out = String::new();
    out.push_str("ply\nformat ascii 1.0\n");
    let _ = writeln!(out, "element vertex {count}");
    for axis in ["x", "y", "z"] {
        let _ = writeln!(out, "property double {axis}");
    }
    if colored {
        for c in ["red", "green", "blue"] {
            let _ = writeln!(out, "property uchar {c}");
        }
    }
    out.push_str("end_header\n");
    for (points, color) in parts {
        for p in *points {
            let _ = write!(out, "{:?} {:?} {:?}", p[0], p[1], p[2]);
            if let Some([r, g, b]) = color {
                let _ = write!(out, " {r} {g} {b}");
            }
            out.push('\n');
        }
    }
    out
}

pub fn write_ply(cloud: &PointCloud, path: &Path) -> Result<()> {
    fs::write(path, ply_text(&[(cloud.points(), None)])).map_err(io_err(path))
}

/// Prediction (red) and ground truth (blue) in one colored vertex list.
pub fn write_ply_pair(pred: &[Point], gt: &[Point], path: &Path) -> Result<()> {
    let text = ply_text(&[(pred, Some(PRED_COLOR)), (gt, Some(GT_COLOR))]);
    fs::write(path, text).map_err(io_err(path))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_simple_text() {
        let c = parse_xyz("0 0 0\n1 2 3", "t").unwrap();
        assert_eq!(c.points(), &[[0.0; 3], [1.0, 2.0, 3.0]]);
        let c = parse_xyz("# header\n\n 1\t2 3 # trailing\n", "t").unwrap();
        assert_eq!(c.len(), 1);
    }

    #[test]
    fn errors_name_the_line() {
        let e = parse_xyz("a b c", "f.xyz").unwrap_err();
        assert!(matches!(e, DataError::Parse { line: 1, .. }), "{e}");
        assert!(e.to_string().starts_with("f.xyz:1:"));
        let e = parse_xyz("0 0 0\n1 2", "f").unwrap_err();
        assert!(matches!(e, DataError::Parse { line: 2, .. }));
        for bad in ["nan 0 0", "0 inf 0", "0 0 -inf"] {
            let e = parse_xyz(bad, "f").unwrap_err();
            assert!(e.to_string().contains("non-finite"), "{e}");
        }
        assert!(parse_xyz("# only a comment\n", "f").is_err());
    }

    #[test]
    fn text_round_trip_is_bit_exact() {
        let pts = vec![
            [0.1, -2.5e-300, 1.0 / 3.0],
            [f64::MAX, f64::MIN_POSITIVE, -0.0],
            [123_456_789.123_456_79, 5e-324, std::f64::consts::PI],
        ];
        let c = PointCloud::new(pts.clone()).unwrap();
        let back = parse_xyz(&xyz_string(&c), "t").unwrap();
        for (a, b) in back.points().iter().zip(&pts) {
            for i in 0..3 {
                assert_eq!(a[i].to_bits(), b[i].to_bits());
            }
        }
    }

    #[test]
    fn ply_headers() {
        let dir = tempfile::tempdir().unwrap();
        let single = dir.path().join("one.ply");
        write_ply(&PointCloud::new(vec![[1.0, 2.0, 3.0]]).unwrap(), &single).unwrap();
        let text = fs::read_to_string(&single).unwrap();
        assert!(text.contains("element vertex 1\n"));
        assert!(!text.contains("red"));

        let pair = dir.path().join("pair.ply");
        write_ply_pair(&[[0.0; 3]; 8], &[[1.0; 3]; 8], &pair).unwrap();
        let text = fs::read_to_string(&pair).unwrap();
        assert!(text.contains("element vertex 16\n"));
        let body: Vec<&str> = text.split("end_header\n").nth(1).unwrap().lines().collect();
        assert_eq!(body.len(), 16);
        assert!(body[0].ends_with("220 50 47"));
        assert!(body[15].ends_with("38 139 210"));
    }
}

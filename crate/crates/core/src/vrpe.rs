//! View-relative positional embedding.
//!
//! Each target patch is described by six numbers: its center in the target
//! view's frame followed by the displacement between the two crop centroids.
//! The sinusoidal embedding maps every one of those channels to `D/6`
//! interleaved sin/cos features with geometric frequencies
//! `ω_j = 10000^(-j/(D/12))`, `j = 0..D/12`.

use crate::geometry::Point;
use crate::tensor::Tensor;

/// Frequency base shared with the MAE-style sinusoid.
pub const FREQ_BASE: f64 = 10000.0;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum VrpeError {
    #[error("embedding width {width} is not divisible by {divisor}")]
    Width { width: usize, divisor: usize },
    #[error("relative positions need at least one row")]
    Empty,
}

/// Patch-wise relative positions, one `[center, displacement]` row per
/// target patch.
#[derive(Debug, Clone, PartialEq)]
pub struct RelPos {
    pub rows: Vec<[f64; 6]>,
}

/// Rows `concat(target_centers[i], rl)`. To reconstruct view 2 from view 1
/// pass view 2's centers with `RL₁→₂`.
pub fn build_relpos(target_centers: &[Point], rl: Point) -> Result<RelPos, VrpeError> {
    if target_centers.is_empty() {
        return Err(VrpeError::Empty);
    }
    Ok(RelPos {
        rows: target_centers
            .iter()
            .map(|c| [c[0], c[1], c[2], rl[0], rl[1], rl[2]])
            .collect(),
    })
}

/// Sinusoidal embedding of an `n×c` table of scalars into `n×width`.
///
/// Each channel occupies a contiguous block of `width/c` columns laid out as
/// `[sin(ω₀x), cos(ω₀x), sin(ω₁x), cos(ω₁x), …]`.
pub fn sincos_channels(values: &[f64], channels: usize, width: usize) -> Result<Tensor, VrpeError> {
    let divisor = 2 * channels;
    if width == 0 || !width.is_multiple_of(divisor) {
        return Err(VrpeError::Width { width, divisor });
    }
    if values.is_empty() {
        return Err(VrpeError::Empty);
    }
    let freqs = width / divisor;
    let omegas: Vec<f64> = (0..freqs)
        .map(|j| 1.0 / FREQ_BASE.powf(j as f64 / freqs as f64))
        .collect();
    let n = values.len() / channels;
    let mut out = Vec::with_capacity(n * width);
    for row in values.chunks(channels) {
        for &x in row {
            for &w in &omegas {
                let (s, c) = (w * x).sin_cos();
                out.push(s);
                out.push(c);
            }
        }
    }
    Ok(Tensor::new(&[n, width], out).expect("consistent shape"))
}

/// Fixed `n×width` query embedding of relative positions; `width` must be a
/// multiple of 12.
pub fn sincos_embed(rp: &RelPos, width: usize) -> Result<Tensor, VrpeError> {
    if rp.rows.is_empty() {
        return Err(VrpeError::Empty);
    }
    let flat: Vec<f64> = rp.rows.iter().flat_map(|r| r.iter().copied()).collect();
    sincos_channels(&flat, 6, width)
}

/// Absolute sinusoidal embedding of raw 3D centers (no displacement);
/// `width` must be a multiple of 6.
pub fn absolute_embed(centers: &[Point], width: usize) -> Result<Tensor, VrpeError> {
    let flat: Vec<f64> = centers.iter().flat_map(|r| r.iter().copied()).collect();
    sincos_channels(&flat, 3, width)
}

//! Runtime verification suites: finite-difference gradient checks and
//! brute-force oracles for the geometric kernels, losses and embeddings.
//! Each suite returns an [`Outcome`]; [`selftest`] runs all of them.

mod grad;
mod oracles;

use std::fmt;

pub use grad::{gradcheck_model, gradcheck_ops, rel_err, GRAD_FLOOR, MODEL_TOL, OP_TOL};
pub use oracles::{
    chamfer_oracle, checkpoint_round_trip, fps_oracle, geometry_trials, knn_oracle, reference_chamfer, reference_fps,
    reference_knn, run_determinism, vrpe_identities,
};

/// Result of one suite.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub name: String,
    /// Number of individual comparisons made.
    pub checks: usize,
    /// Largest observed error (meaning depends on the suite; 0 for exact).
    pub worst: f64,
    pub tolerance: f64,
    /// First few failure descriptions.
    pub failures: Vec<String>,
}

const MAX_FAILURES: usize = 5;

impl Outcome {
    fn new(name: impl Into<String>, tolerance: f64) -> Self {
        Self {
            name: name.into(),
            checks: 0,
            worst: 0.0,
            tolerance,
            failures: Vec::new(),
        }
    }

    pub fn passed(&self) -> bool {
        self.failures.is_empty() && self.checks > 0
    }

    /// Records a measured error against the tolerance.
    fn measure(&mut self, err: f64, what: impl FnOnce() -> String) {
        self.checks += 1;
        if err.is_nan() || err > self.worst {
            self.worst = if err.is_nan() { f64::INFINITY } else { err };
        }
        if err.is_nan() || err >= self.tolerance {
            self.fail(format!("{} (error {err:.3e})", what()));
        }
    }

    /// Records a yes/no check.
    fn expect(&mut self, ok: bool, what: impl FnOnce() -> String) {
        self.checks += 1;
        if !ok {
            self.worst = f64::INFINITY;
            self.fail(what());
        }
    }

    fn fail(&mut self, msg: String) {
        if self.failures.len() < MAX_FAILURES {
            self.failures.push(msg);
        } else if self.failures.len() == MAX_FAILURES {
            self.failures.push("...".into());
        }
    }
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let status = if self.passed() { "PASS" } else { "FAIL" };
        write!(
            f,
            "{status} {:<25} checks={:<6} worst={:.3e} tol={:.0e}",
            self.name, self.checks, self.worst, self.tolerance
        )?;
        for m in &self.failures {
            write!(f, "\n    {m}")?;
        }
        Ok(())
    }
}

/// Seeds `base, base+1, ..` used by the gradient suites.
pub fn seeds(base: u64, count: usize) -> Vec<u64> {
    (0..count as u64).map(|i| base.wrapping_add(i)).collect()
}

/// Every suite at its default size.
pub fn selftest(seed: u64) -> Vec<Outcome> {
    let s = seeds(seed, 10);
    let mut out = gradcheck_ops(&s);
    out.push(gradcheck_model(&s));
    out.push(fps_oracle(200, seed));
    out.push(knn_oracle(200, seed));
    out.push(chamfer_oracle(200, seed));
    out.push(geometry_trials(1000, seed));
    out.push(vrpe_identities(1000, seed));
    out.push(checkpoint_round_trip(seed));
    out.push(run_determinism(seed));
    out
}

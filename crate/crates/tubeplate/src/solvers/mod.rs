//! Energy minimization for the scaled three-dimensional problems, the
//! reduced limit problems, the rigidity diagnostic and the Γ-convergence study.

use nalgebra::DMatrix;
use nalgebra_sparse::factorization::CscCholesky;
use nalgebra_sparse::{CooMatrix, CscMatrix};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::LbfgsOptions;

mod eps;
mod limit;
mod rigidity;
mod study;

pub use eps::{divergence_vectors, eps_energy, eps_energy_parts, solve_eps, EpsEnergyParts, EpsProblem, EpsSolution};
pub use limit::{
    limit_energy, limit_energy_lplus, solve_limit, solve_string, Envelopes, LimitSolution, StringSolution,
};
pub use rigidity::{bent_rod_state, rigidity_check, RigidityReport, Side};
pub use study::{gamma_study, run_gamma_study, GammaReport, GammaRow, GammaStudy, LimitRow};
pub(crate) use study::csv_err as csv_error;

/// Solver controls shared by the ε-level and the limit solvers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolveOptions {
    /// Quasi-Newton iterations per descent run.
    pub max_iter: usize,
    /// Relative energy-decrease tolerance.
    pub tol: f64,
    /// Consecutive small decreases before a run stops.
    pub patience: usize,
    /// Stored correction pairs of the limited-memory update.
    pub memory: usize,
    /// Random restarts of ε-solves with nonconvex densities.
    pub restarts: usize,
    pub restart_amplitude: f64,
    /// Starts of every pointwise envelope search.
    pub multistart: usize,
    pub lamination_points: usize,
    /// Grid size of the periodic cell competitor.
    pub cell_n: usize,
    /// Sweeps of the alternating limit minimization.
    pub outer_iter: usize,
    /// Slack `ρ(ε)` above which a Γ-study row is flagged.
    pub slack_threshold: f64,
    /// Midpoint points per direction for reduced loads.
    pub quad: usize,
    pub seed: u64,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            max_iter: 3000,
            tol: 1e-8,
            patience: 3,
            memory: 12,
            restarts: 4,
            restart_amplitude: 0.05,
            multistart: 8,
            lamination_points: 6,
            cell_n: 2,
            outer_iter: 30,
            slack_threshold: 1e-6,
            quad: 8,
            seed: 0,
        }
    }
}

impl SolveOptions {
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if !(self.tol > 0.0 && self.tol.is_finite()) {
            bad.push(format!("solver.tol must be > 0, got {}", self.tol));
        }
        if self.max_iter == 0 || self.outer_iter == 0 {
            bad.push("solver.max_iter and solver.outer_iter must be positive".to_string());
        }
        if self.memory == 0 || self.patience == 0 {
            bad.push("solver.memory and solver.patience must be positive".to_string());
        }
        if self.multistart == 0 || self.lamination_points < 2 || self.cell_n < 2 || self.quad == 0 {
            bad.push("solver.multistart ≥ 1, lamination_points ≥ 2, cell_n ≥ 2 and quad ≥ 1 are required".to_string());
        }
        if !(self.restart_amplitude >= 0.0) || !(self.slack_threshold >= 0.0) {
            bad.push("solver.restart_amplitude and solver.slack_threshold must be ≥ 0".to_string());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad.join("; ")))
        }
    }

    pub(crate) fn lbfgs(&self) -> LbfgsOptions {
        LbfgsOptions {
            max_iter: self.max_iter,
            memory: self.memory,
            rel_tol: self.tol,
            patience: self.patience,
            grad_tol: 1e-13,
        }
    }
}

/// Sparse Cholesky factor of a scalar stiffness matrix, applied to each of
/// the three components of a node-major vector.
pub(crate) struct ScalarPrecond {
    chol: CscCholesky<f64>,
    n: usize,
}

impl ScalarPrecond {
    /// Assembles from `(i, j, value)` triplets; duplicates are summed.
    pub(crate) fn build(n: usize, triplets: &[(usize, usize, f64)]) -> Result<Self> {
        let mut diag = vec![0.0f64; n];
        for &(i, j, v) in triplets {
            if i == j {
                diag[i] += v;
            }
        }
        let scale = diag.iter().cloned().fold(0.0, f64::max).max(1e-300);
        let mut coo = CooMatrix::new(n, n);
        for &(i, j, v) in triplets {
            coo.push(i, j, v);
        }
        for (i, d) in diag.iter().enumerate() {
            // keeps rows without stiffness invertible
            coo.push(i, i, 1e-10 * scale + if *d <= 0.0 { scale } else { 0.0 });
        }
        let csc = CscMatrix::from(&coo);
        let chol = CscCholesky::factor(&csc).map_err(|e| Error::Mesh(format!("preconditioner factorization failed: {e:?}")))?;
        Ok(Self { chol, n })
    }

    pub(crate) fn apply(&self, v: &[f64], out: &mut [f64]) {
        let rhs = DMatrix::from_row_slice(self.n, 3, v);
        let sol = self.chol.solve(&rhs);
        for i in 0..self.n {
            for c in 0..3 {
                out[3 * i + c] = sol[(i, c)];
            }
        }
    }
}

/// Scatters the symmetric local matrix `k` of nodes mapped to slot stencils.
pub(crate) fn scatter_local(triplets: &mut Vec<(usize, usize, f64)>, maps: &[&[(usize, f64)]], k: &[Vec<f64>]) {
    for (l, ml) in maps.iter().enumerate() {
        for (m, mm) in maps.iter().enumerate() {
            let v = k[l][m];
            if v == 0.0 {
                continue;
            }
            for &(a, wa) in ml.iter() {
                for &(b, wb) in mm.iter() {
                    triplets.push((a, b, v * wa * wb));
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn precond_solves_tridiagonal() {
        let n = 5;
        let mut t = Vec::new();
        for i in 0..n {
            t.push((i, i, 2.0));
            if i + 1 < n {
                t.push((i, i + 1, -1.0));
                t.push((i + 1, i, -1.0));
            }
        }
        let p = ScalarPrecond::build(n, &t).unwrap();
        let v: Vec<f64> = (0..3 * n).map(|k| k as f64).collect();
        let mut out = vec![0.0; 3 * n];
        p.apply(&v, &mut out);
        for c in 0..3 {
            for i in 0..n {
                let mut kx = 2.0 * out[3 * i + c];
                if i > 0 {
                    kx -= out[3 * (i - 1) + c];
                }
                if i + 1 < n {
                    kx -= out[3 * (i + 1) + c];
                }
                assert!((kx - v[3 * i + c]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn default_options_are_valid() {
        SolveOptions::default().validate().unwrap();
        let bad = SolveOptions { tol: 0.0, ..Default::default() };
        assert!(bad.validate().is_err());
    }
}

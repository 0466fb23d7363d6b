//! Hamiltonian and the second-order maximum-principle condition.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adjoint::AdjointBundle;
use crate::bsde::BsdeSolution;
use crate::error::{invalid, Result};
use crate::forward::PathEnsemble;
use crate::problem::{Control, ControlProblem};

/// `ℋ = ⟨p, a(v)⟩ + ⟨q, b(v)⟩ + k(t, x, y, z + (b(t, x, v) − b(t, x̄, ū))ᵀ p, v)`.
#[allow(clippy::too_many_arguments)]
pub fn hamiltonian(
    problem: &dyn ControlProblem,
    t: f64,
    x: &DVector<f64>,
    y: f64,
    z: &DVector<f64>,
    v: &Control,
    p: &DVector<f64>,
    q: &DMatrix<f64>,
    x_ref: &DVector<f64>,
    u_ref: &Control,
) -> f64 {
    let a = problem.drift(t, x, v);
    let b = problem.diffusion(t, x, v);
    let b_ref = problem.diffusion(t, x_ref, u_ref);
    let shift = (&b - b_ref).transpose() * p;
    p.dot(&a) + q.dot(&b) + problem.generator(t, x, y, &(z + shift), v)
}

/// Outcome of the maximum-principle check over a finite control lattice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MpReport {
    pub n_cells: usize,
    pub lattice_size: usize,
    pub min_residual: f64,
    /// Largest `|residual(ū)|`; zero by construction.
    pub residual_at_optimal: f64,
    /// Fraction of `(path, step)` cells whose lattice minimum is below `−tol`.
    pub fraction_violating: f64,
    pub tol: f64,
    pub pass: bool,
    /// Minimum over paths and lattice of the residual at each step.
    pub min_per_step: Vec<f64>,
    /// Lattice index attaining the overall minimum.
    pub argmin: usize,
    /// `residual(v)` per `(path, step, v)`, path-major.
    #[serde(skip)]
    pub residuals: Vec<f64>,
}

/// `ℋ(v) − ℋ(ū) + ½ Σ_j Δb_jᵀ P Δb_j` at every cell and lattice point.
/// `tol = None` selects `3 × pooled adjoint SE + 1e-8`.
pub fn mp_residual(
    problem: &dyn ControlProblem,
    ens: &PathEnsemble,
    bsde: &BsdeSolution,
    adj: &AdjointBundle,
    lattice: &[Control],
    tol: Option<f64>,
) -> Result<MpReport> {
    if lattice.is_empty() {
        return invalid("control lattice is empty");
    }
    let du = problem.control_dim();
    if lattice.iter().any(|v| v.len() != du) {
        return invalid(format!("lattice points must have dimension {du}"));
    }
    let (n_paths, steps) = (ens.n_paths(), ens.grid().steps());
    if bsde.n_paths() != n_paths || adj.first.n_paths() != n_paths || adj.first.steps() != steps {
        return invalid("BSDE or adjoint solution does not match the ensemble");
    }
    let tol = tol.unwrap_or(3.0 * adj.pooled_se() + 1e-8);
    if !(tol >= 0.0) {
        return invalid("tolerance must be nonnegative");
    }
    let k = lattice.len();
    let cells: Vec<(Vec<f64>, f64)> = (0..n_paths * steps)
        .into_par_iter()
        .map(|c| {
            let (path, i) = (c / steps, c % steps);
            let t = ens.grid().time(i);
            let x = ens.state_vec(path, i);
            let u = ens.control(path, i);
            let (y, z) = (bsde.y(path, i), bsde.z_vec(path, i));
            let (p, q, big_p) = (adj.p(path, i), adj.q(path, i), adj.big_p(path, i));
            let h_ref = hamiltonian(problem, t, &x, y, &z, &u, &p, &q, &x, &u);
            let b_ref = problem.diffusion(t, &x, &u);
            let at_opt = (hamiltonian(problem, t, &x, y, &z, &u, &p, &q, &x, &u) - h_ref).abs();
            let res = lattice
                .iter()
                .map(|v| {
                    let db = problem.diffusion(t, &x, v) - &b_ref;
                    let quad: f64 = (0..db.ncols())
                        .map(|j| (&big_p * db.column(j)).dot(&db.column(j)))
                        .sum();
                    hamiltonian(problem, t, &x, y, &z, v, &p, &q, &x, &u) - h_ref + 0.5 * quad
                })
                .collect();
            (res, at_opt)
        })
        .collect();
    let mut residuals = Vec::with_capacity(n_paths * steps * k);
    let mut min_per_step = vec![f64::INFINITY; steps];
    let mut min_residual = f64::INFINITY;
    let mut argmin = 0;
    let mut violating = 0usize;
    let mut residual_at_optimal: f64 = 0.0;
    for (c, (res, at_opt)) in cells.into_iter().enumerate() {
        let i = c % steps;
        residual_at_optimal = residual_at_optimal.max(at_opt);
        let mut cell_min = f64::INFINITY;
        for (j, r) in res.iter().enumerate() {
            if *r < cell_min {
                cell_min = *r;
            }
            if *r < min_residual {
                min_residual = *r;
                argmin = j;
            }
        }
        if cell_min < -tol || cell_min.is_nan() {
            violating += 1;
        }
        min_per_step[i] = min_per_step[i].min(cell_min);
        residuals.extend(res);
    }
    let n_cells = n_paths * steps;
    let fraction_violating = violating as f64 / n_cells.max(1) as f64;
    // ū belongs to U, so the infimum over U never exceeds residual(ū) = 0
    let pass = min_residual >= -tol && residual_at_optimal <= tol;
    Ok(MpReport {
        n_cells,
        lattice_size: k,
        min_residual,
        residual_at_optimal,
        fraction_violating,
        tol,
        pass,
        min_per_step,
        argmin,
        residuals,
    })
}

/// Check `f(z̄ + ⟨a, b(u) − b(ū)⟩) − f(z̄) ≥ 0` for every lattice point and
/// every `z̄` in `z_grid` (the single point `0` when empty).
pub fn example2_sufficiency_check(
    f: &dyn Fn(&DVector<f64>) -> f64,
    a: &DVector<f64>,
    diffusion: &dyn Fn(&Control) -> DMatrix<f64>,
    lattice: &[Control],
    base: &Control,
    z_grid: &[DVector<f64>],
) -> bool {
    let b0 = diffusion(base);
    let zero = [DVector::zeros(b0.ncols())];
    let grid = if z_grid.is_empty() { &zero[..] } else { z_grid };
    lattice.iter().all(|u| {
        let shift = (diffusion(u) - &b0).transpose() * a;
        grid.iter().all(|z| f(&(z + &shift)) - f(z) >= 0.0)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::FnProblem;

    #[test]
    fn hamiltonian_vanishes_for_zero_data() {
        let pr = FnProblem::zero(2, 1, 1);
        let x = DVector::from_vec(vec![1.0, -2.0]);
        let h = hamiltonian(
            &pr,
            0.3,
            &x,
            0.5,
            &DVector::zeros(1),
            &DVector::from_element(1, 3.0),
            &DVector::zeros(2),
            &DMatrix::zeros(2, 1),
            &x,
            &DVector::zeros(1),
        );
        assert_eq!(h, 0.0);
    }

    #[test]
    fn sufficiency_square_and_linear() {
        let a = DVector::from_vec(vec![1.0, 2.0]);
        let diff = |u: &Control| DMatrix::from_column_slice(2, 1, &[u[0], 0.5 * u[0]]);
        let lattice = vec![
            DVector::zeros(1),
            DVector::from_element(1, 1.0),
            DVector::from_element(1, -1.0),
        ];
        let base = DVector::zeros(1);
        assert!(example2_sufficiency_check(
            &|z| z.norm_squared(),
            &a,
            &diff,
            &lattice,
            &base,
            &[]
        ));
        assert!(!example2_sufficiency_check(
            &|z| z[0],
            &a,
            &diff,
            &lattice,
            &base,
            &[]
        ));
        assert!(example2_sufficiency_check(
            &|z| z[0],
            &a,
            &diff,
            &lattice[..1],
            &base,
            &[]
        ));
    }
}

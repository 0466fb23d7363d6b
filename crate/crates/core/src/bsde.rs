//! Regression Monte Carlo for the recursive-utility BSDE
//! `dY = −k(t, X, Y, Z, u) dt + Z dW`, `Y(T) = ξ`.

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::forward::{simulate_forward, PathEnsemble};
use crate::galerkin::{GalerkinSpace, OperatorFamily};
use crate::grid::TimeGrid;
use crate::problem::{ControlProblem, Policy};
use crate::regression::{mean_se, RegressionBasis, Regressor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BsdeOptions {
    pub picard_max: usize,
    pub tol: f64,
}

impl Default for BsdeOptions {
    fn default() -> Self {
        Self {
            picard_max: 8,
            tol: 1e-10,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BsdeSolution {
    n_paths: usize,
    steps: usize,
    m: usize,
    y: Vec<f64>,
    z: Vec<f64>,
    /// Largest number of inner fixed-point sweeps used at any step.
    pub picard_iters: usize,
    /// Largest final fixed-point change over all steps.
    pub residual: f64,
    /// Mean of `Y` at the first knot.
    pub y0: f64,
    /// Monte Carlo standard error of `y0`.
    pub y0_se: f64,
}

impl BsdeSolution {
    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn y(&self, path: usize, step: usize) -> f64 {
        self.y[path * (self.steps + 1) + step]
    }

    /// `Y` of every path at `step`.
    pub fn y_at(&self, step: usize) -> Vec<f64> {
        (0..self.n_paths).map(|p| self.y(p, step)).collect()
    }

    pub fn z(&self, path: usize, step: usize) -> &[f64] {
        let off = (path * self.steps + step) * self.m;
        &self.z[off..off + self.m]
    }

    pub fn z_vec(&self, path: usize, step: usize) -> DVector<f64> {
        DVector::from_column_slice(self.z(path, step))
    }

    pub fn z_all(&self) -> &[f64] {
        &self.z
    }
}

/// Solve the BSDE backward along `ens` with terminal values `terminal`.
///
/// Each step regresses on polynomial features of `X(t_i)`:
/// `Z_i = E_i[(Y_{i+1} − E_i Y_{i+1}) ΔW_i] / Δt` and
/// `Y_i = E_i[Y_{i+1} + Δt k(t_i, X_{i+1}, Y_i, Z_i, u_i)]`, the latter
/// resolved by fixed-point sweeps in `Y_i`.
pub fn solve_bsde(
    problem: &dyn ControlProblem,
    ens: &PathEnsemble,
    terminal: &[f64],
    basis: &RegressionBasis,
    opts: &BsdeOptions,
) -> Result<BsdeSolution> {
    let n_paths = ens.n_paths();
    let grid = ens.grid();
    let (steps, n, m) = (grid.steps(), ens.state_dim(), ens.noise_dim());
    if terminal.len() != n_paths {
        return invalid(format!(
            "terminal has {} values for {n_paths} paths",
            terminal.len()
        ));
    }
    if terminal.iter().any(|v| !v.is_finite()) {
        return invalid("terminal values must be finite");
    }
    if opts.picard_max == 0 {
        return invalid("need at least one fixed-point sweep");
    }
    let mut y = vec![0.0; n_paths * (steps + 1)];
    let mut z = vec![0.0; n_paths * steps * m];
    for (p, v) in terminal.iter().enumerate() {
        y[p * (steps + 1) + steps] = *v;
    }
    let mut next: Vec<f64> = terminal.to_vec();
    let mut max_iters = 0;
    let mut max_res: f64 = 0.0;
    // per-path driver contributions Δt·k_i, kept for the error estimate
    let mut drift_sum = vec![0.0; n_paths];
    let mut mart_sum = vec![0.0; n_paths];

    for i in (0..steps).rev() {
        let t = grid.time(i);
        let dt = grid.dt(i);
        let reg = Regressor::fit(basis, &ens.states_at(i), n)?;
        let cond = reg.project(&next);
        let zt: Vec<f64> = (0..n_paths)
            .flat_map(|p| {
                let d = next[p] - cond[p];
                ens.dw(p, i)
                    .iter()
                    .map(move |w| d * w / dt)
                    .collect::<Vec<_>>()
            })
            .collect();
        let zi = reg.project_many(&zt, m);

        let xs_next: Vec<DVector<f64>> = (0..n_paths).map(|p| ens.state_vec(p, i + 1)).collect();
        let us: Vec<_> = (0..n_paths).map(|p| ens.control(p, i)).collect();
        let zv: Vec<DVector<f64>> = zi.chunks(m).map(DVector::from_column_slice).collect();

        let mut yi = cond.clone();
        let mut iters = 0;
        let mut change = f64::INFINITY;
        let mut kvals = vec![0.0; n_paths];
        while iters < opts.picard_max {
            kvals = (0..n_paths)
                .into_par_iter()
                .map(|p| problem.generator(t, &xs_next[p], yi[p], &zv[p], &us[p]))
                .collect();
            let target: Vec<f64> = next.iter().zip(&kvals).map(|(a, k)| a + dt * k).collect();
            let new = reg.project(&target);
            let scale = 1.0 + new.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            change = new
                .iter()
                .zip(&yi)
                .fold(0.0f64, |a, (u, v)| a.max((u - v).abs()));
            yi = new;
            iters += 1;
            if !change.is_finite() {
                return Err(Error::Divergence {
                    path: 0,
                    step: i,
                    detail: "non-finite BSDE value".into(),
                });
            }
            if change <= opts.tol * scale {
                break;
            }
        }
        let scale = 1.0 + yi.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        if change > opts.tol * scale {
            return Err(Error::Convergence {
                iterations: iters,
                residual: change,
                trajectory: vec![change],
            });
        }
        max_iters = max_iters.max(iters);
        max_res = max_res.max(change);
        for p in 0..n_paths {
            y[p * (steps + 1) + i] = yi[p];
            z[(p * steps + i) * m..(p * steps + i + 1) * m]
                .copy_from_slice(&zi[p * m..(p + 1) * m]);
            drift_sum[p] += dt * kvals[p];
            mart_sum[p] += zi[p * m..(p + 1) * m]
                .iter()
                .zip(ens.dw(p, i))
                .map(|(a, b)| a * b)
                .sum::<f64>();
        }
        next = yi;
    }
    let zeta: Vec<f64> = (0..n_paths)
        .map(|p| terminal[p] + drift_sum[p] - mart_sum[p])
        .collect();
    let (_, se) = mean_se(&zeta);
    let y0 = next.iter().sum::<f64>() / n_paths as f64;
    Ok(BsdeSolution {
        n_paths,
        steps,
        m,
        y,
        z,
        picard_iters: max_iters,
        residual: max_res,
        y0,
        y0_se: se,
    })
}

/// Value of the backward semigroup `G_{t, t+δ}[η]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SemigroupValue {
    pub value: f64,
    pub se: f64,
    /// Per-path `Y(t)`.
    pub per_path: Vec<f64>,
}

/// Solve on knots `from..=to` of `ens` with terminal `eta` at `to`.
/// An empty interval returns `eta` itself.
pub fn backward_semigroup(
    problem: &dyn ControlProblem,
    ens: &PathEnsemble,
    from: usize,
    to: usize,
    eta: &[f64],
    basis: &RegressionBasis,
    opts: &BsdeOptions,
) -> Result<SemigroupValue> {
    if from > to || to > ens.grid().steps() {
        return invalid(format!("interval {from}..{to} outside the grid"));
    }
    if eta.len() != ens.n_paths() {
        return invalid("eta must have one value per path");
    }
    if from == to {
        let (value, se) = mean_se(eta);
        return Ok(SemigroupValue {
            value,
            se,
            per_path: eta.to_vec(),
        });
    }
    let sub = ens.restrict(from, to)?;
    let sol = solve_bsde(problem, &sub, eta, basis, opts)?;
    Ok(SemigroupValue {
        value: sol.y0,
        se: sol.y0_se,
        per_path: sol.y_at(0),
    })
}

/// Cost `J = Y(t0)` estimate with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostEstimate {
    pub value: f64,
    pub se: f64,
}

/// Simulate under `policy` from `x0`, then solve the BSDE with terminal `h(X(T))`.
#[allow(clippy::too_many_arguments)]
pub fn cost_functional(
    space: &GalerkinSpace,
    fam: &OperatorFamily,
    problem: &dyn ControlProblem,
    x0: &DVector<f64>,
    policy: &dyn Policy,
    grid: &TimeGrid,
    n_paths: usize,
    seed: u64,
    basis: &RegressionBasis,
    opts: &BsdeOptions,
) -> Result<CostEstimate> {
    let ens = simulate_forward(space, fam, problem, policy, x0, grid, n_paths, seed)?;
    cost_on_ensemble(problem, &ens, basis, opts)
}

/// Cost of an already simulated ensemble.
pub fn cost_on_ensemble(
    problem: &dyn ControlProblem,
    ens: &PathEnsemble,
    basis: &RegressionBasis,
    opts: &BsdeOptions,
) -> Result<CostEstimate> {
    let sol = solve_bsde(problem, ens, &terminal_values(problem, ens), basis, opts)?;
    Ok(CostEstimate {
        value: sol.y0,
        se: sol.y0_se,
    })
}

/// `h(X(T))` along every path.
pub fn terminal_values(problem: &dyn ControlProblem, ens: &PathEnsemble) -> Vec<f64> {
    let last = ens.grid().steps();
    (0..ens.n_paths())
        .map(|p| problem.terminal(&ens.state_vec(p, last)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::{ConstantPolicy, FnProblem, GeneratorGradient};
    use nalgebra::DMatrix;

    fn setup(n: usize) -> (GalerkinSpace, OperatorFamily) {
        let space = GalerkinSpace::euclidean(n, 1).unwrap();
        let fam =
            OperatorFamily::constant(DMatrix::zeros(n, n), vec![DMatrix::zeros(n, n)], 1.0, 1.0)
                .unwrap();
        (space, fam)
    }

    #[test]
    fn linear_generator_matches_exponential() {
        let (space, fam) = setup(1);
        let c = 1.0;
        let problem = FnProblem::zero(1, 1, 1)
            .with_generator(
                move |_, _, y, _, _| c * y,
                move |_, _, _, _, _| GeneratorGradient {
                    x: DVector::zeros(1),
                    y: c,
                    z: DVector::zeros(1),
                },
                |_, _, _, _, _| DMatrix::zeros(3, 3),
            )
            .with_terminal(|_| 1.0, |_| DVector::zeros(1), |_| DMatrix::zeros(1, 1));
        let grid = TimeGrid::uniform(0.0, 1.0, 256).unwrap();
        let basis = RegressionBasis::default_for(1);
        let j = cost_functional(
            &space,
            &fam,
            &problem,
            &DVector::zeros(1),
            &ConstantPolicy(DVector::zeros(1)),
            &grid,
            50,
            1,
            &basis,
            &BsdeOptions::default(),
        )
        .unwrap();
        assert!((j.value - std::f64::consts::E).abs() <= 2e-2);
    }

    #[test]
    fn unit_generator_integrates_horizon() {
        let (space, fam) = setup(1);
        let problem = FnProblem::zero(1, 1, 1).with_generator(
            |_, _, _, _, _| 1.0,
            |_, _, _, _, _| GeneratorGradient::zeros(1, 1),
            |_, _, _, _, _| DMatrix::zeros(3, 3),
        );
        let grid = TimeGrid::uniform(0.25, 1.0, 32).unwrap();
        let basis = RegressionBasis::default_for(1);
        let x0 = DVector::zeros(1);
        let pol = ConstantPolicy(DVector::zeros(1));
        let opts = BsdeOptions::default();
        let j = cost_functional(
            &space, &fam, &problem, &x0, &pol, &grid, 10, 1, &basis, &opts,
        )
        .unwrap();
        assert!((j.value - 0.75).abs() <= 1e-10);
    }

    #[test]
    fn zero_data_gives_zero_solution() {
        let (space, fam) = setup(2);
        let problem =
            FnProblem::zero(2, 1, 1).with_constant_diffusion(DMatrix::from_element(2, 1, 1.0));
        let grid = TimeGrid::uniform(0.0, 1.0, 16).unwrap();
        let ens = simulate_forward(
            &space,
            &fam,
            &problem,
            &ConstantPolicy(DVector::zeros(1)),
            &DVector::zeros(2),
            &grid,
            64,
            4,
        )
        .unwrap();
        let sol = solve_bsde(
            &problem,
            &ens,
            &vec![0.0; 64],
            &RegressionBasis::default_for(2),
            &BsdeOptions::default(),
        )
        .unwrap();
        assert!(sol.y.iter().all(|v| *v == 0.0));
        assert!(sol.z_all().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn empty_semigroup_interval_returns_eta() {
        let (space, fam) = setup(1);
        let problem = FnProblem::zero(1, 1, 1);
        let grid = TimeGrid::uniform(0.0, 1.0, 4).unwrap();
        let ens = simulate_forward(
            &space,
            &fam,
            &problem,
            &ConstantPolicy(DVector::zeros(1)),
            &DVector::zeros(1),
            &grid,
            3,
            4,
        )
        .unwrap();
        let eta = vec![1.0, 2.0, 3.0];
        let g = backward_semigroup(
            &problem,
            &ens,
            2,
            2,
            &eta,
            &RegressionBasis::default_for(1),
            &BsdeOptions::default(),
        )
        .unwrap();
        assert_eq!(g.per_path, eta);
        assert_eq!(g.value, 2.0);
    }
}

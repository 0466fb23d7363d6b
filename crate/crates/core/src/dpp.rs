//! Value function over control lattices, the dynamic programming identity,
//! and probes of the value function's differential structure.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use log::warn;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::adjoint::AdjointBundle;
use crate::bsde::{backward_semigroup, cost_on_ensemble, BsdeOptions, BsdeSolution, CostEstimate};
use crate::error::{invalid, Error, Result};
use crate::forward::{simulate_forward_with, BrownianIncrements, PathEnsemble, Scheme};
use crate::galerkin::{GalerkinSpace, OperatorFamily};
use crate::grid::TimeGrid;
use crate::mp::hamiltonian;
use crate::problem::{Control, ControlProblem, PiecewiseConstantPolicy};
use crate::regression::RegressionBasis;
use crate::rng::path_rng;
use crate::stats::{linear_fit, rms};

pub type ScalarField = Arc<dyn Fn(f64, &DVector<f64>) -> f64 + Send + Sync>;

/// A candidate value function with its derivatives.
#[derive(Clone)]
pub struct SmoothValue {
    pub v: ScalarField,
    pub v_t: ScalarField,
    pub v_x: Arc<dyn Fn(f64, &DVector<f64>) -> DVector<f64> + Send + Sync>,
    pub v_xx: Arc<dyn Fn(f64, &DVector<f64>) -> DMatrix<f64> + Send + Sync>,
}

/// A function of the state with a standard error.
pub trait ValueFn: Sync {
    fn eval(&self, x: &DVector<f64>) -> Result<(f64, f64)>;
}

/// `x ↦ V(t, x)` of a smooth candidate, with zero standard error.
pub struct SmoothSlice<'a> {
    pub value: &'a SmoothValue,
    pub t: f64,
}

impl ValueFn for SmoothSlice<'_> {
    fn eval(&self, x: &DVector<f64>) -> Result<(f64, f64)> {
        Ok(((self.value.v)(self.t, x), 0.0))
    }
}

impl<F> ValueFn for F
where
    F: Fn(&DVector<f64>) -> f64 + Sync,
{
    fn eval(&self, x: &DVector<f64>) -> Result<(f64, f64)> {
        Ok((self(x), 0.0))
    }
}

/// Piecewise-constant policies: every assignment of `u_points` to `intervals`
/// equal sub-intervals of the window, or a seeded subsample of at most
/// `family_cap` of them that always keeps the constant policies.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlLattice {
    pub u_points: Vec<Control>,
    pub intervals: usize,
    assignments: Vec<Vec<usize>>,
}

impl ControlLattice {
    pub fn new(
        u_points: Vec<Control>,
        intervals: usize,
        family_cap: usize,
        seed: u64,
    ) -> Result<Self> {
        if u_points.is_empty() || intervals == 0 {
            return invalid("lattice needs at least one control point and one interval");
        }
        if family_cap == 0 {
            return invalid("family cap must be positive");
        }
        let k = u_points.len();
        let total = (k as f64).powi(intervals as i32);
        let mut assignments: Vec<Vec<usize>> = (0..k).map(|u| vec![u; intervals]).collect();
        if total <= family_cap as f64 {
            let mut idx = vec![0usize; intervals];
            loop {
                if idx.iter().any(|v| *v != idx[0]) {
                    assignments.push(idx.clone());
                }
                let mut pos = intervals;
                loop {
                    if pos == 0 {
                        break;
                    }
                    pos -= 1;
                    idx[pos] += 1;
                    if idx[pos] < k {
                        break;
                    }
                    idx[pos] = 0;
                    if pos == 0 {
                        pos = usize::MAX;
                        break;
                    }
                }
                if pos == usize::MAX {
                    break;
                }
            }
        } else {
            let mut rng = path_rng(seed, 0);
            let mut tries = 0;
            while assignments.len() < family_cap && tries < 100 * family_cap {
                tries += 1;
                let a: Vec<usize> = (0..intervals).map(|_| rng.random_range(0..k)).collect();
                if !assignments.contains(&a) {
                    assignments.push(a);
                }
            }
        }
        assignments.truncate(family_cap);
        Ok(Self {
            u_points,
            intervals,
            assignments,
        })
    }

    pub fn len(&self) -> usize {
        self.assignments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignments.is_empty()
    }

    pub fn assignment(&self, i: usize) -> &[usize] {
        &self.assignments[i]
    }

    /// Policy `i` on the window `[start, end]`.
    pub fn policy(&self, i: usize, start: f64, end: f64) -> PiecewiseConstantPolicy {
        let values = self.assignments[i]
            .iter()
            .map(|u| self.u_points[*u].clone())
            .collect();
        PiecewiseConstantPolicy::new(values, start, end)
    }

    /// Index of the constant policy at control point `u`.
    pub fn constant_index(&self, u: usize) -> usize {
        u
    }
}

/// `V(t, x)` with the standard error of the minimising policy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValueEstimate {
    pub value: f64,
    pub se: f64,
    pub argmin: usize,
}

type CacheKey = (usize, Vec<u64>);

/// Lattice-infimum value estimates with common random numbers: every
/// evaluation on the window starting at knot `k` uses the increments
/// `k..M` of one ensemble generated from `seed`.
pub struct ValueEstimator<'a> {
    pub space: &'a GalerkinSpace,
    pub fam: &'a OperatorFamily,
    pub problem: &'a dyn ControlProblem,
    pub lattice: ControlLattice,
    pub basis: RegressionBasis,
    pub opts: BsdeOptions,
    increments: BrownianIncrements,
    cache: Mutex<HashMap<CacheKey, Vec<Option<CostEstimate>>>>,
}

impl<'a> ValueEstimator<'a> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        space: &'a GalerkinSpace,
        fam: &'a OperatorFamily,
        problem: &'a dyn ControlProblem,
        lattice: ControlLattice,
        grid: &TimeGrid,
        n_paths: usize,
        seed: u64,
        basis: RegressionBasis,
        opts: BsdeOptions,
    ) -> Result<Self> {
        if lattice.is_empty() {
            return invalid("control lattice is empty");
        }
        if lattice
            .u_points
            .iter()
            .any(|u| u.len() != problem.control_dim())
        {
            return invalid("lattice controls have the wrong dimension");
        }
        let increments = BrownianIncrements::generate(grid, n_paths, space.noise_dim(), seed)?;
        Ok(Self {
            space,
            fam,
            problem,
            lattice,
            basis,
            opts,
            increments,
            cache: Mutex::new(HashMap::new()),
        })
    }

    pub fn grid(&self) -> &TimeGrid {
        self.increments.grid()
    }

    pub fn n_paths(&self) -> usize {
        self.increments.n_paths()
    }

    pub fn increments(&self) -> &BrownianIncrements {
        &self.increments
    }

    pub fn step_of(&self, t: f64) -> Result<usize> {
        self.grid()
            .index_of(t)
            .ok_or_else(|| Error::InvalidArgument(format!("t = {t} is not a grid knot")))
    }

    /// Ensemble of lattice policy `i` from `x` on knots `from..=to`.
    pub fn simulate(
        &self,
        i: usize,
        from: usize,
        to: usize,
        x: &DVector<f64>,
    ) -> Result<PathEnsemble> {
        let grid = self.grid();
        let policy = self.lattice.policy(i, grid.time(from), grid.time(to));
        let inc = self.increments.restrict(from, to)?;
        simulate_forward_with(
            self.space,
            self.fam,
            self.problem,
            &policy,
            x.as_slice(),
            &inc,
            Scheme::SemiImplicit,
        )
    }

    /// Cost of every lattice policy on `[t_step, T]` from `x`; failed
    /// policies are `None`.
    pub fn costs(&self, step: usize, x: &DVector<f64>) -> Result<Vec<Option<CostEstimate>>> {
        let steps = self.grid().steps();
        if step > steps {
            return invalid(format!("step {step} beyond the horizon"));
        }
        if x.len() != self.space.state_dim() {
            return invalid("state has the wrong dimension");
        }
        let key = (step, x.iter().map(|v| v.to_bits()).collect());
        if let Some(c) = self.cache.lock().expect("cache lock").get(&key) {
            return Ok(c.clone());
        }
        let out: Vec<Option<CostEstimate>> = if step == steps {
            vec![
                Some(CostEstimate {
                    value: self.problem.terminal(x),
                    se: 0.0,
                });
                self.lattice.len()
            ]
        } else {
            (0..self.lattice.len())
                .map(|i| {
                    let r = self.simulate(i, step, steps, x).and_then(|ens| {
                        cost_on_ensemble(self.problem, &ens, &self.basis, &self.opts)
                    });
                    match r {
                        Ok(c) => Some(c),
                        Err(e) => {
                            warn!("policy {i} skipped at step {step}: {e}");
                            None
                        }
                    }
                })
                .collect()
        };
        self.cache
            .lock()
            .expect("cache lock")
            .insert(key, out.clone());
        Ok(out)
    }

    /// `V(t_step, x)` as the minimum over the lattice.
    pub fn estimate(&self, step: usize, x: &DVector<f64>) -> Result<ValueEstimate> {
        let costs = self.costs(step, x)?;
        best_of(&costs).ok_or_else(|| {
            Error::NumericalFailure(format!("every lattice policy failed at step {step}"))
        })
    }

    pub fn estimate_at(&self, t: f64, x: &DVector<f64>) -> Result<ValueEstimate> {
        self.estimate(self.step_of(t)?, x)
    }

    /// `x ↦ V(t_step, x)` as a [`ValueFn`].
    pub fn slice(&self, step: usize) -> EstimatorSlice<'_, 'a> {
        EstimatorSlice { est: self, step }
    }
}

fn best_of(costs: &[Option<CostEstimate>]) -> Option<ValueEstimate> {
    let mut best: Option<ValueEstimate> = None;
    for (i, c) in costs.iter().enumerate() {
        if let Some(c) = c {
            if best.is_none_or(|b| c.value < b.value) {
                best = Some(ValueEstimate {
                    value: c.value,
                    se: c.se,
                    argmin: i,
                });
            }
        }
    }
    best
}

pub struct EstimatorSlice<'e, 'a> {
    est: &'e ValueEstimator<'a>,
    step: usize,
}

impl ValueFn for EstimatorSlice<'_, '_> {
    fn eval(&self, x: &DVector<f64>) -> Result<(f64, f64)> {
        let v = self.est.estimate(self.step, x)?;
        Ok((v.value, v.se))
    }
}

/// Quadratic interpolant of a value slice on the `(n+1)(n+2)/2` points
/// `c`, `c ± r e_k`, `c + r(e_k + e_l)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PolySurrogate {
    center: DVector<f64>,
    radius: f64,
    coef: DVector<f64>,
    /// Largest standard error of the interpolated values.
    pub se: f64,
}

impl PolySurrogate {
    pub fn fit(value: &dyn ValueFn, center: &DVector<f64>, radius: f64) -> Result<Self> {
        if !(radius > 0.0 && radius.is_finite()) {
            return invalid("surrogate radius must be positive");
        }
        let n = center.len();
        let mut pts = vec![DVector::zeros(n)];
        for k in 0..n {
            let mut e = DVector::zeros(n);
            e[k] = 1.0;
            pts.push(e.clone());
            pts.push(-e);
        }
        for k in 0..n {
            for l in k + 1..n {
                let mut e = DVector::zeros(n);
                e[k] = 1.0;
                e[l] = 1.0;
                pts.push(e);
            }
        }
        let dim = pts.len();
        let mut phi = DMatrix::zeros(dim, dim);
        let mut vals = DVector::zeros(dim);
        let mut se: f64 = 0.0;
        for (r, s) in pts.iter().enumerate() {
            phi.set_row(r, &quad_features(s).transpose());
            let (v, e) = value.eval(&(center + s * radius))?;
            vals[r] = v;
            se = se.max(e);
        }
        let coef = phi
            .lu()
            .solve(&vals)
            .ok_or_else(|| Error::NumericalFailure("surrogate design is singular".into()))?;
        Ok(Self {
            center: center.clone(),
            radius,
            coef,
            se,
        })
    }

    pub fn value(&self, x: &DVector<f64>) -> f64 {
        quad_features(&((x - &self.center) / self.radius)).dot(&self.coef)
    }
}

impl ValueFn for PolySurrogate {
    fn eval(&self, x: &DVector<f64>) -> Result<(f64, f64)> {
        Ok((self.value(x), self.se))
    }
}

fn quad_features(s: &DVector<f64>) -> DVector<f64> {
    let n = s.len();
    let mut f = Vec::with_capacity(1 + n + n * (n + 1) / 2);
    f.push(1.0);
    f.extend(s.iter());
    for k in 0..n {
        for l in k..n {
            f.push(s[k] * s[l]);
        }
    }
    DVector::from_vec(f)
}

/// Surrogate of `V(t_step, ·)` around a cloud of states: centred at their
/// mean with radius `max(0.25, 2 × RMS spread)`.
pub fn surrogate_around(
    est: &ValueEstimator<'_>,
    step: usize,
    states: &[DVector<f64>],
) -> Result<PolySurrogate> {
    if states.is_empty() {
        return invalid("need at least one state");
    }
    let n = states[0].len();
    let mut center = DVector::zeros(n);
    for s in states {
        center += s;
    }
    center /= states.len() as f64;
    let spread: Vec<f64> = states.iter().map(|s| (s - &center).norm()).collect();
    let radius = (2.0 * rms(&spread)).max(0.25);
    PolySurrogate::fit(&est.slice(step), &center, radius)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DppReport {
    pub t: f64,
    pub delta: f64,
    pub lhs: f64,
    pub lhs_se: f64,
    pub rhs: f64,
    pub rhs_se: f64,
    pub gap: f64,
    pub gap_se: f64,
    pub argmin: usize,
}

/// `|V(t, x) − min_u G_{t,t+δ}[V̂(t+δ, X(t+δ))]|` with the inner policies
/// drawn from the lattice on `[t, t+δ]` and `V̂` a quadratic surrogate.
pub fn check_dpp(
    est: &ValueEstimator<'_>,
    t: f64,
    x: &DVector<f64>,
    delta: f64,
) -> Result<DppReport> {
    let grid = est.grid().clone();
    let horizon = grid.t_end() - t;
    if !(delta >= 0.0) || delta > horizon + 1e-12 {
        return invalid(format!("delta = {delta} outside [0, {horizon}]"));
    }
    let from = est.step_of(t)?;
    let to = est.step_of(t + delta)?;
    let lhs = est.estimate(from, x)?;
    let report = |rhs: f64, rhs_se: f64, argmin: usize| DppReport {
        t,
        delta,
        lhs: lhs.value,
        lhs_se: lhs.se,
        rhs,
        rhs_se,
        gap: (lhs.value - rhs).abs(),
        gap_se: (lhs.se.powi(2) + rhs_se.powi(2)).sqrt(),
        argmin,
    };
    if from == to {
        let mut r = report(lhs.value, lhs.se, lhs.argmin);
        r.gap_se = lhs.se;
        return Ok(r);
    }
    if to == grid.steps() {
        let mut r = report(lhs.value, lhs.se, lhs.argmin);
        r.gap_se = lhs.se;
        return Ok(r);
    }
    let mut ensembles = Vec::new();
    let mut cloud = Vec::new();
    for i in 0..est.lattice.len() {
        match est.simulate(i, from, to, x) {
            Ok(ens) => {
                for p in 0..ens.n_paths() {
                    cloud.push(ens.state_vec(p, ens.grid().steps()));
                }
                ensembles.push(Some(ens));
            }
            Err(e) => {
                warn!("policy {i} skipped in the DPP composition: {e}");
                ensembles.push(None);
            }
        }
    }
    let sur = surrogate_around(est, to, &cloud)?;
    let mut costs = Vec::new();
    for ens in &ensembles {
        let c = match ens {
            Some(ens) => {
                let last = ens.grid().steps();
                let eta: Vec<f64> = (0..ens.n_paths())
                    .map(|p| sur.value(&ens.state_vec(p, last)))
                    .collect();
                backward_semigroup(est.problem, ens, 0, last, &eta, &est.basis, &est.opts)
                    .map(|s| CostEstimate {
                        value: s.value,
                        se: s.se,
                    })
                    .map_err(|e| warn!("DPP semigroup failed: {e}"))
                    .ok()
            }
            None => None,
        };
        costs.push(c);
    }
    let best =
        best_of(&costs).ok_or_else(|| Error::NumericalFailure("every DPP policy failed".into()))?;
    let mut r = report(best.value, best.se, best.argmin);
    r.gap_se = (lhs.se.powi(2) + best.se.powi(2)).sqrt() + sur.se;
    Ok(r)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlongOptimalReport {
    pub deltas: Vec<f64>,
    /// RMS over paths of `V̂(t+δ, X̄(t+δ)) − Ȳ(t+δ)`.
    pub rms_diff: Vec<f64>,
    pub se: Vec<f64>,
    pub allowance: f64,
    pub pass: bool,
}

/// Compare the value surrogate with `Ȳ` along the optimal paths at
/// `t_0 + δ`. `allowance` absorbs the lattice optimality gap.
pub fn check_value_along_optimal(
    est: &ValueEstimator<'_>,
    ens: &PathEnsemble,
    bsde: &BsdeSolution,
    delta_list: &[f64],
    allowance: f64,
) -> Result<AlongOptimalReport> {
    let grid = ens.grid();
    let mut rms_diff = Vec::new();
    let mut ses = Vec::new();
    let mut pass = true;
    for &d in delta_list {
        let t = grid.t0() + d;
        let step = grid
            .index_of(t)
            .ok_or_else(|| Error::InvalidArgument(format!("t0 + {d} is not a knot")))?;
        let est_step = est.step_of(t)?;
        let states: Vec<DVector<f64>> =
            (0..ens.n_paths()).map(|p| ens.state_vec(p, step)).collect();
        let (diffs, se): (Vec<f64>, f64) = if step == grid.steps() {
            (
                states
                    .iter()
                    .enumerate()
                    .map(|(p, x)| est.problem.terminal(x) - bsde.y(p, step))
                    .collect(),
                0.0,
            )
        } else {
            let sur = surrogate_around(est, est_step, &states)?;
            (
                states
                    .iter()
                    .enumerate()
                    .map(|(p, x)| sur.value(x) - bsde.y(p, step))
                    .collect(),
                sur.se + bsde.y0_se,
            )
        };
        let r = rms(&diffs);
        pass &= r <= 3.0 * se + allowance;
        rms_diff.push(r);
        ses.push(se);
    }
    Ok(AlongOptimalReport {
        deltas: delta_list.to_vec(),
        rms_diff,
        se: ses,
        allowance,
        pass,
    })
}

/// State, first and second adjoint at one cell of the optimal ensemble.
#[derive(Debug, Clone, PartialEq)]
pub struct InclusionPoint {
    pub x: DVector<f64>,
    pub p: DVector<f64>,
    pub big_p: DMatrix<f64>,
}

/// Cells of the first `max_paths` paths at `step`.
pub fn inclusion_points(
    ens: &PathEnsemble,
    adj: &AdjointBundle,
    step: usize,
    max_paths: usize,
) -> Vec<InclusionPoint> {
    (0..ens.n_paths().min(max_paths))
        .map(|p| InclusionPoint {
            x: ens.state_vec(p, step),
            p: adj.p(p, step),
            big_p: adj.big_p(p, step),
        })
        .collect()
}

/// Default probe sizes `{0.2, 0.1, 0.05, 0.025} (‖x‖ + 1)`.
pub fn default_probe_sizes(x: &DVector<f64>) -> Vec<f64> {
    let s = x.norm() + 1.0;
    [0.2, 0.1, 0.05, 0.025].iter().map(|h| h * s).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InclusionReport {
    pub h: Vec<f64>,
    /// Largest `defect(h)/h²` over points and directions, per `h`.
    pub max_normalized_defect: Vec<f64>,
    /// Fitted `h → 0` intercept of the worst normalized defect.
    pub intercept: f64,
    /// Largest `|central difference − ⟨p, d⟩|`.
    pub p_mismatch: f64,
    /// Largest `second difference − ⟨P d, d⟩`.
    pub hessian_excess: f64,
    pub tol: f64,
    pub pass: bool,
}

/// Probe `V(x + h d) − V(x) ≤ h⟨p, d⟩ + ½h²⟨P d, d⟩ + o(h²)` and the
/// subdifferential side (`p̂ = p`, `P̂ ≤ P`) with differences at the
/// smallest `h`. `adjoint_se` is the standard error of `(p, P)`.
pub fn superdiff_inclusion_check(
    value: &dyn ValueFn,
    points: &[InclusionPoint],
    directions: &[DVector<f64>],
    h_list: &[f64],
    adjoint_se: f64,
) -> Result<InclusionReport> {
    if h_list.is_empty() || h_list.iter().any(|h| !(*h > 0.0)) {
        return invalid("probe sizes must be positive");
    }
    let mut h = h_list.to_vec();
    h.sort_by(|a, b| b.total_cmp(a));
    let h_min = *h.last().unwrap();
    let mut worst = vec![f64::NEG_INFINITY; h.len()];
    let mut p_mismatch: f64 = 0.0;
    let mut hess_excess = f64::NEG_INFINITY;
    let mut v_se: f64 = 0.0;
    let mut d_max: f64 = 0.0;
    for pt in points {
        let (v0, s0) = value.eval(&pt.x)?;
        v_se = v_se.max(s0);
        for d in directions {
            d_max = d_max.max(d.norm());
            let lin = pt.p.dot(d);
            let quad = (&pt.big_p * d).dot(d);
            for (k, hk) in h.iter().enumerate() {
                let (v1, s1) = value.eval(&(&pt.x + d * *hk))?;
                v_se = v_se.max(s1);
                let defect = v1 - v0 - hk * lin - 0.5 * hk * hk * quad;
                worst[k] = worst[k].max(defect / (hk * hk));
            }
            let (vp, _) = value.eval(&(&pt.x + d * h_min))?;
            let (vm, sm) = value.eval(&(&pt.x - d * h_min))?;
            v_se = v_se.max(sm);
            p_mismatch = p_mismatch.max(((vp - vm) / (2.0 * h_min) - lin).abs());
            hess_excess = hess_excess.max((vp - 2.0 * v0 + vm) / (h_min * h_min) - quad);
        }
    }
    if points.is_empty() || directions.is_empty() {
        worst.iter_mut().for_each(|w| *w = 0.0);
        hess_excess = 0.0;
    }
    let pts: Vec<(f64, f64)> = h.iter().zip(&worst).map(|(a, b)| (*a, *b)).collect();
    let intercept = linear_fit(&pts)
        .map(|(_, c)| c)
        .unwrap_or(worst[worst.len() - 1]);
    let tol = 3.0
        * (2f64.sqrt() * v_se / (h_min * h_min) + adjoint_se * (d_max / h_min + d_max * d_max))
        + 1e-8;
    let v_tol = 3.0 * (2f64.sqrt() * v_se / h_min + adjoint_se * d_max) + 1e-6;
    let pass = intercept <= tol
        && hess_excess <= tol
        && p_mismatch <= v_tol + 0.5 * h_min * hess_excess.abs().max(0.0);
    Ok(InclusionReport {
        h,
        max_normalized_defect: worst,
        intercept,
        p_mismatch,
        hessian_excess: hess_excess,
        tol,
        pass,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeDiffReport {
    pub t: f64,
    pub taus: Vec<f64>,
    /// Largest difference quotient over probe paths, per `τ`.
    pub quotient: Vec<f64>,
    /// Smallest displayed rate over probe paths.
    pub rate: f64,
    pub tol: f64,
    pub degenerate: bool,
    pub pass: bool,
}

/// One-sided time quotient `[V(τ, X̄(t)) − V(t, X̄(t))]/(τ − t)` against
/// `−⟨p, A X̄⟩ − ⟨q, B X̄⟩ + ℋ₁`, where
/// `ℋ₁ = −ℋ(ū) + ⟨P(B X̄ + b̄), B X̄ + b̄⟩`, on the first `max_paths` paths.
#[allow(clippy::too_many_arguments)]
pub fn time_diff_check(
    est: &ValueEstimator<'_>,
    ens: &PathEnsemble,
    bsde: &BsdeSolution,
    adj: &AdjointBundle,
    step: usize,
    tau_steps: &[usize],
    max_paths: usize,
) -> Result<TimeDiffReport> {
    let grid = ens.grid();
    if step >= grid.steps() {
        return invalid("time-difference check needs t < T");
    }
    let t = grid.time(step);
    let est_step = est.step_of(t)?;
    let taus: Vec<usize> = tau_steps.iter().copied().filter(|k| *k > 0).collect();
    if taus.iter().any(|k| step + k > grid.steps()) {
        return invalid("tau beyond the horizon");
    }
    let problem = est.problem;
    let a_t = est.fam.drift(t);
    let b_t = est.fam.noise_absorbed(t, est.space);
    let n_probe = ens.n_paths().min(max_paths).max(1);
    let mut quotient = vec![f64::NEG_INFINITY; taus.len()];
    let mut rate = f64::INFINITY;
    let mut v_se: f64 = 0.0;
    for path in 0..n_probe {
        let x = ens.state_vec(path, step);
        let u = ens.control(path, step);
        let (p, q, big_p) = (adj.p(path, step), adj.q(path, step), adj.big_p(path, step));
        let z = bsde.z_vec(path, step);
        let h = hamiltonian(problem, t, &x, bsde.y(path, step), &z, &u, &p, &q, &x, &u);
        let mut full = problem.diffusion(t, &x, &u);
        for (j, bj) in b_t.iter().enumerate() {
            let mut c = full.column_mut(j);
            c += bj * &x;
        }
        let bx: f64 = (0..full.ncols())
            .map(|j| q.column(j).dot(&(&b_t[j] * &x)))
            .sum();
        let quad: f64 = (0..full.ncols())
            .map(|j| (&big_p * full.column(j)).dot(&full.column(j)))
            .sum();
        let r = -p.dot(&(&a_t * &x)) - bx - h + quad;
        rate = rate.min(r);
        let v0 = est.estimate(est_step, &x)?;
        v_se = v_se.max(v0.se);
        for (k, tk) in taus.iter().enumerate() {
            let tau = grid.time(step + tk);
            let v1 = est.estimate_at(tau, &x)?;
            v_se = v_se.max(v1.se);
            quotient[k] = quotient[k].max((v1.value - v0.value) / (tau - t));
        }
    }
    let degenerate = taus.is_empty();
    let dt_min = taus
        .iter()
        .map(|k| grid.time(step + k) - t)
        .fold(f64::INFINITY, f64::min);
    let tol = if degenerate {
        0.0
    } else {
        3.0 * (2f64.sqrt() * v_se / dt_min + adj.pooled_se()) + 1e-8
    };
    let pass = quotient.iter().all(|qv| *qv <= rate + tol);
    Ok(TimeDiffReport {
        t,
        taus: taus.iter().map(|k| grid.time(step + k)).collect(),
        quotient,
        rate,
        tol,
        degenerate,
        pass,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemiconcavityReport {
    /// Smallest `C` with excess `≤ C λ(1−λ)‖x₁ − x₀‖²` on every probe.
    pub c_fit: f64,
    pub se: f64,
    pub n_probes: usize,
}

fn midpoint_excess(
    value: &dyn ValueFn,
    x0: &DVector<f64>,
    x1: &DVector<f64>,
    lambda: f64,
) -> Result<(f64, f64)> {
    let (v0, s0) = value.eval(x0)?;
    let (v1, s1) = value.eval(x1)?;
    let (vl, sl) = value.eval(&(x1 * lambda + x0 * (1.0 - lambda)))?;
    let excess = lambda * v1 + (1.0 - lambda) * v0 - vl;
    let se = lambda.abs() * s1 + (1.0 - lambda).abs() * s0 + sl;
    Ok((excess, se))
}

/// Fit the semiconcavity constant of `value` over pairs and interior `λ`.
pub fn semiconcavity_probe(
    value: &dyn ValueFn,
    pairs: &[(DVector<f64>, DVector<f64>)],
    lambda_grid: &[f64],
) -> Result<SemiconcavityReport> {
    let mut c_fit = f64::NEG_INFINITY;
    let mut se: f64 = 0.0;
    let mut n_probes = 0;
    for (x0, x1) in pairs {
        let d2 = (x1 - x0).norm_squared();
        for &l in lambda_grid {
            if l <= 0.0 || l >= 1.0 || d2 == 0.0 {
                continue;
            }
            let (e, s) = midpoint_excess(value, x0, x1, l)?;
            let w = l * (1.0 - l) * d2;
            c_fit = c_fit.max(e / w);
            se = se.max(s / w);
            n_probes += 1;
        }
    }
    if n_probes == 0 {
        c_fit = 0.0;
    }
    Ok(SemiconcavityReport {
        c_fit,
        se,
        n_probes,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvexityReport {
    /// Largest `V(x_λ) − λV(x₁) − (1−λ)V(x₀)`.
    pub max_violation: f64,
    pub se: f64,
    pub pass: bool,
}

pub fn convexity_probe(
    value: &dyn ValueFn,
    pairs: &[(DVector<f64>, DVector<f64>)],
    lambda_grid: &[f64],
) -> Result<ConvexityReport> {
    let mut worst = f64::NEG_INFINITY;
    let mut se: f64 = 0.0;
    for (x0, x1) in pairs {
        for &l in lambda_grid {
            let (e, s) = midpoint_excess(value, x0, x1, l)?;
            worst = worst.max(-e);
            se = se.max(s);
        }
    }
    if worst == f64::NEG_INFINITY {
        worst = 0.0;
    }
    Ok(ConvexityReport {
        max_violation: worst,
        se,
        pass: worst <= 3.0 * se + 1e-12,
    })
}

/// `V_t + ⟨A*V_x, x⟩ + min_v [½ Σ_j ⟨V_xx β_j, β_j⟩ + ⟨V_x, a⟩ + k(t, x, V, βᵀV_x, v)]`
/// with `β = B x + b(t, x, v)`, minimised over `lattice`.
pub fn hjb_residual(
    value: &SmoothValue,
    space: &GalerkinSpace,
    fam: &OperatorFamily,
    problem: &dyn ControlProblem,
    t: f64,
    x: &DVector<f64>,
    lattice: &[Control],
) -> Result<f64> {
    if lattice.is_empty() {
        return invalid("control lattice is empty");
    }
    let v = (value.v)(t, x);
    let vx = (value.v_x)(t, x);
    let vxx = (value.v_xx)(t, x);
    let a_op = fam.drift(t);
    let b_ops = fam.noise_absorbed(t, space);
    let inf = lattice
        .iter()
        .map(|u| {
            let mut beta = problem.diffusion(t, x, u);
            for (j, bj) in b_ops.iter().enumerate() {
                let mut c = beta.column_mut(j);
                c += bj * x;
            }
            let second: f64 = (0..beta.ncols())
                .map(|j| (&vxx * beta.column(j)).dot(&beta.column(j)))
                .sum();
            let z = beta.transpose() * &vx;
            0.5 * second + vx.dot(&problem.drift(t, x, u)) + problem.generator(t, x, v, &z, u)
        })
        .fold(f64::INFINITY, f64::min);
    Ok((value.v_t)(t, x) + vx.dot(&(a_op * x)) + inf)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmoothRelationReport {
    /// RMS of `p − V_x(t, X̄)`.
    pub p_rms: f64,
    /// RMS of `q − V_xx (B X̄ + b(t, X̄, ū))`.
    pub q_rms: f64,
    /// RMS of `V_x(t, X̄)`.
    pub p_scale: f64,
    /// RMS of `V_xx (B X̄ + b)`.
    pub q_scale: f64,
}

impl SmoothRelationReport {
    pub fn p_relative(&self) -> f64 {
        if self.p_scale > 0.0 {
            self.p_rms / self.p_scale
        } else {
            self.p_rms
        }
    }

    pub fn q_relative(&self) -> f64 {
        if self.q_scale > 0.0 {
            self.q_rms / self.q_scale
        } else {
            self.q_rms
        }
    }
}

/// `p = V_x(t, X̄)` and `q = V_xx (B X̄ + b(t, X̄, ū))` over all paths and
/// steps before `T`.
pub fn smooth_relation_check(
    value: &SmoothValue,
    space: &GalerkinSpace,
    fam: &OperatorFamily,
    problem: &dyn ControlProblem,
    ens: &PathEnsemble,
    adj: &AdjointBundle,
) -> Result<SmoothRelationReport> {
    let grid = ens.grid();
    let (mut pd, mut ps, mut qd, mut qs) = (0.0, 0.0, 0.0, 0.0);
    let cells = (ens.n_paths() * grid.steps()).max(1) as f64;
    for i in 0..grid.steps() {
        let t = grid.time(i);
        let b_ops = fam.noise_absorbed(t, space);
        for path in 0..ens.n_paths() {
            let x = ens.state_vec(path, i);
            let u = ens.control(path, i);
            let vx = (value.v_x)(t, &x);
            let vxx = (value.v_xx)(t, &x);
            let mut full = problem.diffusion(t, &x, &u);
            for (j, bj) in b_ops.iter().enumerate() {
                let mut c = full.column_mut(j);
                c += bj * &x;
            }
            let q_ref = vxx * full;
            pd += (adj.p(path, i) - &vx).norm_squared();
            ps += vx.norm_squared();
            qd += (adj.q(path, i) - &q_ref).norm_squared();
            qs += q_ref.norm_squared();
        }
    }
    Ok(SmoothRelationReport {
        p_rms: (pd / cells).sqrt(),
        q_rms: (qd / cells).sqrt(),
        p_scale: (ps / cells).sqrt(),
        q_scale: (qs / cells).sqrt(),
    })
}

/// Ratios `|V(x + s d) − V(x)| / (s ‖d‖)` over `scales`.
pub fn lipschitz_probe(
    value: &dyn ValueFn,
    x: &DVector<f64>,
    direction: &DVector<f64>,
    scales: &[f64],
) -> Result<Vec<f64>> {
    let dn = direction.norm();
    if dn == 0.0 {
        return invalid("direction must be nonzero");
    }
    let (v0, _) = value.eval(x)?;
    scales
        .iter()
        .map(|s| {
            let (v1, _) = value.eval(&(x + direction * *s))?;
            Ok((v1 - v0).abs() / (s * dn))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lattice_enumerates_all_assignments() {
        let u: Vec<Control> = (0..3).map(|i| DVector::from_element(1, i as f64)).collect();
        let lat = ControlLattice::new(u.clone(), 2, 100, 1).unwrap();
        assert_eq!(lat.len(), 9);
        assert_eq!(lat.assignment(1), &[1, 1]);
        let capped = ControlLattice::new(u, 3, 5, 1).unwrap();
        assert_eq!(capped.len(), 5);
        assert_eq!(capped.assignment(2), &[2, 2, 2]);
    }

    #[test]
    fn surrogate_reproduces_quadratics() {
        let q = |x: &DVector<f64>| 1.0 + 2.0 * x[0] - x[1] + x[0] * x[1] + 0.5 * x[1] * x[1];
        let s = PolySurrogate::fit(&q, &DVector::from_vec(vec![0.3, -0.2]), 0.7).unwrap();
        let y = DVector::from_vec(vec![1.1, 2.0]);
        assert!((s.value(&y) - q(&y)).abs() < 1e-10);
    }

    #[test]
    fn probes_on_quadratics() {
        let pairs = vec![
            (
                DVector::from_vec(vec![0.0, 0.0]),
                DVector::from_vec(vec![1.0, 2.0]),
            ),
            (
                DVector::from_vec(vec![-1.0, 0.5]),
                DVector::from_vec(vec![0.3, 0.3]),
            ),
        ];
        let lam = [0.0, 0.25, 0.5, 0.75, 1.0];
        let convex = |x: &DVector<f64>| x.norm_squared();
        let concave = |x: &DVector<f64>| -x.norm_squared();
        let sc = semiconcavity_probe(&convex, &pairs, &lam).unwrap();
        assert!((sc.c_fit - 1.0).abs() < 1e-12);
        let sc = semiconcavity_probe(&concave, &pairs, &lam).unwrap();
        assert!((sc.c_fit + 1.0).abs() < 1e-12);
        assert!(
            convexity_probe(&convex, &pairs, &lam)
                .unwrap()
                .max_violation
                <= 1e-15
        );
        let cv = convexity_probe(&concave, &pairs, &lam).unwrap();
        assert!(!cv.pass);
        assert!((cv.max_violation - 0.25 * 5.0).abs() < 1e-12);
    }

    #[test]
    fn inclusion_exact_for_quadratic_value() {
        let qm = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let qm1 = qm.clone();
        let v = move |x: &DVector<f64>| (&qm1 * x).dot(x);
        let x = DVector::from_vec(vec![0.4, -0.3]);
        let pt = InclusionPoint {
            p: &qm * &x * 2.0,
            big_p: &qm * 2.0,
            x: x.clone(),
        };
        let dirs = vec![
            DVector::from_vec(vec![1.0, 0.0]),
            DVector::from_vec(vec![0.6, 0.8]),
            DVector::zeros(2),
        ];
        let r = superdiff_inclusion_check(&v, &[pt], &dirs, &default_probe_sizes(&x), 0.0).unwrap();
        assert!(r.pass, "{r:?}");
        assert!(r.intercept.abs() < 1e-8);
    }
}

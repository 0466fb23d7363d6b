//! Forward simulation of the controlled equation, homogeneous propagators,
//! perturbation (variational) studies and moment estimates.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::galerkin::{GalerkinSpace, OperatorFamily};
use crate::grid::TimeGrid;
use crate::problem::{Control, ControlProblem, Policy};
use crate::rng::{fill_increments, path_rng};
use crate::stats::{gauss_legendre_unit, loglog_slope};

/// Time-stepping scheme for the forward equation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    /// Drift-implicit Euler: `A` implicit, everything else explicit.
    #[default]
    SemiImplicit,
    Explicit,
}

/// Brownian increments for `N` paths on a grid, stored path-major.
#[derive(Debug, Clone)]
pub struct BrownianIncrements {
    grid: TimeGrid,
    n_paths: usize,
    m: usize,
    seed: u64,
    data: Vec<f64>,
}

impl BrownianIncrements {
    /// Path `p` draws from its own stream, step after step.
    pub fn generate(grid: &TimeGrid, n_paths: usize, m: usize, seed: u64) -> Result<Self> {
        if n_paths == 0 || m == 0 {
            return invalid("need at least one path and one noise component");
        }
        let steps = grid.steps();
        let mut data = vec![0.0; n_paths * steps * m];
        data.par_chunks_mut(steps * m)
            .enumerate()
            .for_each(|(p, chunk)| {
                let mut rng = path_rng(seed, p);
                for (i, row) in chunk.chunks_mut(m).enumerate() {
                    fill_increments(&mut rng, grid.dt(i), row);
                }
            });
        Ok(Self {
            grid: grid.clone(),
            n_paths,
            m,
            seed,
            data,
        })
    }

    /// Wrap explicit increments (`n_paths × steps × m`, path-major).
    pub fn from_raw(grid: &TimeGrid, n_paths: usize, m: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n_paths * grid.steps() * m || n_paths == 0 || m == 0 {
            return invalid("increment buffer has the wrong length");
        }
        Ok(Self {
            grid: grid.clone(),
            n_paths,
            m,
            seed: 0,
            data,
        })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    pub fn noise_dim(&self) -> usize {
        self.m
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn get(&self, path: usize, step: usize) -> &[f64] {
        let s = self.grid.steps();
        let off = (path * s + step) * self.m;
        &self.data[off..off + self.m]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Increments over knots `from..=to`.
    pub fn restrict(&self, from: usize, to: usize) -> Result<Self> {
        let grid = self.grid.slice(from, to)?;
        let s = self.grid.steps();
        let mut data = Vec::with_capacity(self.n_paths * (to - from) * self.m);
        for p in 0..self.n_paths {
            data.extend_from_slice(&self.data[(p * s + from) * self.m..(p * s + to) * self.m]);
        }
        Ok(Self {
            grid,
            n_paths: self.n_paths,
            m: self.m,
            seed: self.seed,
            data,
        })
    }

    /// Keep only the first `n_paths` paths.
    pub fn truncate_paths(&self, n_paths: usize) -> Result<Self> {
        if n_paths == 0 || n_paths > self.n_paths {
            return invalid("path count out of range");
        }
        let mut out = self.clone();
        out.n_paths = n_paths;
        out.data.truncate(n_paths * self.grid.steps() * self.m);
        Ok(out)
    }
}

/// Simulated paths: increments, states and the controls actually applied.
#[derive(Debug, Clone)]
pub struct PathEnsemble {
    dw: BrownianIncrements,
    n: usize,
    du: usize,
    scheme: Scheme,
    states: Vec<f64>,
    controls: Vec<f64>,
}

impl PathEnsemble {
    pub fn grid(&self) -> &TimeGrid {
        &self.dw.grid
    }

    pub fn n_paths(&self) -> usize {
        self.dw.n_paths
    }

    pub fn state_dim(&self) -> usize {
        self.n
    }

    pub fn noise_dim(&self) -> usize {
        self.dw.m
    }

    pub fn control_dim(&self) -> usize {
        self.du
    }

    pub fn seed(&self) -> u64 {
        self.dw.seed
    }

    pub fn scheme(&self) -> Scheme {
        self.scheme
    }

    pub fn increments(&self) -> &BrownianIncrements {
        &self.dw
    }

    pub fn dw(&self, path: usize, step: usize) -> &[f64] {
        self.dw.get(path, step)
    }

    pub fn state(&self, path: usize, step: usize) -> &[f64] {
        let off = (path * (self.grid().steps() + 1) + step) * self.n;
        &self.states[off..off + self.n]
    }

    pub fn state_vec(&self, path: usize, step: usize) -> DVector<f64> {
        DVector::from_column_slice(self.state(path, step))
    }

    /// States of all paths at `step`, `N × n` row-major.
    pub fn states_at(&self, step: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_paths() * self.n);
        for p in 0..self.n_paths() {
            out.extend_from_slice(self.state(p, step));
        }
        out
    }

    pub fn control(&self, path: usize, step: usize) -> Control {
        let off = (path * self.grid().steps() + step) * self.du;
        DVector::from_column_slice(&self.controls[off..off + self.du])
    }

    /// Sub-ensemble on knots `from..=to`.
    pub fn restrict(&self, from: usize, to: usize) -> Result<Self> {
        let dw = self.dw.restrict(from, to)?;
        let s = self.grid().steps();
        let (n, du) = (self.n, self.du);
        let mut states = Vec::with_capacity(self.n_paths() * (to - from + 1) * n);
        let mut controls = Vec::with_capacity(self.n_paths() * (to - from) * du);
        for p in 0..self.n_paths() {
            let base = p * (s + 1);
            states.extend_from_slice(&self.states[(base + from) * n..(base + to + 1) * n]);
            controls.extend_from_slice(&self.controls[(p * s + from) * du..(p * s + to) * du]);
        }
        Ok(Self {
            dw,
            n,
            du,
            scheme: self.scheme,
            states,
            controls,
        })
    }

    /// Columnar dump: `path,step,t,x0,...,x{n-1}`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        write!(w, "path,step,t")?;
        for k in 0..self.n {
            write!(w, ",x{k}")?;
        }
        writeln!(w)?;
        for p in 0..self.n_paths() {
            for i in 0..=self.grid().steps() {
                write!(w, "{p},{i},{}", self.grid().time(i))?;
                for v in self.state(p, i) {
                    write!(w, ",{v}")?;
                }
                writeln!(w)?;
            }
        }
        Ok(())
    }
}

/// Replays the controls recorded in an ensemble, starting at step `offset`.
#[derive(Debug, Clone)]
pub struct ReplayPolicy {
    controls: Vec<f64>,
    steps: usize,
    du: usize,
    offset: usize,
}

impl ReplayPolicy {
    pub fn from_ensemble(ens: &PathEnsemble, offset: usize) -> Self {
        Self {
            controls: ens.controls.clone(),
            steps: ens.grid().steps(),
            du: ens.du,
            offset,
        }
    }
}

impl Policy for ReplayPolicy {
    fn control(&self, step: usize, _: f64, _: &DVector<f64>, path: usize) -> Control {
        let i = (step + self.offset).min(self.steps - 1);
        let off = (path * self.steps + i) * self.du;
        DVector::from_column_slice(&self.controls[off..off + self.du])
    }
}

/// Per-step operator data, shared across steps when the family is constant
/// on a uniform grid.
struct StepOps {
    implicit: Vec<DMatrix<f64>>,
    drift_now: Vec<DMatrix<f64>>,
    drift_next: Vec<DMatrix<f64>>,
    noise: Vec<Vec<DMatrix<f64>>>,
    shared: bool,
}

impl StepOps {
    fn build(space: &GalerkinSpace, fam: &OperatorFamily, grid: &TimeGrid) -> Result<Self> {
        let shared = fam.is_constant() && grid.is_uniform();
        let count = if shared { 1 } else { grid.steps() };
        let n = fam.state_dim();
        let mut ops = Self {
            implicit: Vec::with_capacity(count),
            drift_now: Vec::with_capacity(count),
            drift_next: Vec::with_capacity(count),
            noise: Vec::with_capacity(count),
            shared,
        };
        for i in 0..count {
            let dt = grid.dt(i);
            let a_next = fam.drift(grid.time(i + 1));
            let m = DMatrix::identity(n, n) - &a_next * dt;
            let inv = m.try_inverse().ok_or_else(|| {
                Error::NumericalFailure(format!("implicit matrix I - dt*A is singular at step {i}"))
            })?;
            ops.implicit.push(inv);
            ops.drift_now.push(fam.drift(grid.time(i)));
            ops.drift_next.push(a_next);
            ops.noise.push(fam.noise_absorbed(grid.time(i), space));
        }
        Ok(ops)
    }

    fn idx(&self, i: usize) -> usize {
        if self.shared {
            0
        } else {
            i
        }
    }
}

fn check_model(
    space: &GalerkinSpace,
    fam: &OperatorFamily,
    problem: &dyn ControlProblem,
) -> Result<()> {
    let (n, m) = (space.state_dim(), space.noise_dim());
    if fam.state_dim() != n || problem.state_dim() != n {
        return invalid("state dimensions of space, operators and problem differ");
    }
    if fam.noise_dim() != m || problem.noise_dim() != m {
        return invalid("noise dimensions of space, operators and problem differ");
    }
    if problem.control_dim() == 0 {
        return invalid("control dimension must be at least one");
    }
    Ok(())
}

/// Simulate `N` paths from `x0` with fresh increments and the semi-implicit scheme.
#[allow(clippy::too_many_arguments)]
pub fn simulate_forward(
    space: &GalerkinSpace,
    fam: &OperatorFamily,
    problem: &dyn ControlProblem,
    policy: &dyn Policy,
    x0: &DVector<f64>,
    grid: &TimeGrid,
    n_paths: usize,
    seed: u64,
) -> Result<PathEnsemble> {
    let dw = BrownianIncrements::generate(grid, n_paths, space.noise_dim(), seed)?;
    simulate_forward_with(
        space,
        fam,
        problem,
        policy,
        x0.as_slice(),
        &dw,
        Scheme::SemiImplicit,
    )
}

/// Simulate on given increments. `x0` holds either one initial state
/// (length `n`) shared by all paths or one per path (length `N·n`).
pub fn simulate_forward_with(
    space: &GalerkinSpace,
    fam: &OperatorFamily,
    problem: &dyn ControlProblem,
    policy: &dyn Policy,
    x0: &[f64],
    dw: &BrownianIncrements,
    scheme: Scheme,
) -> Result<PathEnsemble> {
    check_model(space, fam, problem)?;
    let (n, m, du) = (space.state_dim(), space.noise_dim(), problem.control_dim());
    if dw.noise_dim() != m {
        return invalid("increments and model have different noise dimensions");
    }
    let n_paths = dw.n_paths();
    if x0.len() != n && x0.len() != n * n_paths {
        return invalid(format!(
            "initial state has length {}, expected {n} or {}",
            x0.len(),
            n * n_paths
        ));
    }
    if x0.iter().any(|v| !v.is_finite()) {
        return invalid("initial state must be finite");
    }
    let grid = dw.grid();
    let steps = grid.steps();
    let ops = StepOps::build(space, fam, grid)?;
    let mut states = vec![0.0; n_paths * (steps + 1) * n];
    let mut controls = vec![0.0; n_paths * steps * du];

    let outcomes: Vec<Result<()>> = states
        .par_chunks_mut((steps + 1) * n)
        .zip(controls.par_chunks_mut(steps * du))
        .enumerate()
        .map(|(p, (xs, us))| {
            let start = if x0.len() == n {
                x0
            } else {
                &x0[p * n..(p + 1) * n]
            };
            xs[..n].copy_from_slice(start);
            let mut x = DVector::from_column_slice(start);
            for i in 0..steps {
                let t = grid.time(i);
                let dt = grid.dt(i);
                let k = ops.idx(i);
                let u = policy.control(i, t, &x, p);
                if u.len() != du {
                    return invalid(format!(
                        "policy returned a control of length {}, expected {du}",
                        u.len()
                    ));
                }
                let a = problem.drift(t, &x, &u);
                let b = problem.diffusion(t, &x, &u);
                let inc = dw.get(p, i);
                let mut rhs = &x + a * dt;
                for (j, dwj) in inc.iter().enumerate() {
                    rhs += (&ops.noise[k][j] * &x + b.column(j)) * *dwj;
                }
                let next = match scheme {
                    Scheme::SemiImplicit => &ops.implicit[k] * rhs,
                    Scheme::Explicit => rhs + &ops.drift_now[k] * &x * dt,
                };
                if next.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Divergence {
                        path: p,
                        step: i,
                        detail: "non-finite state".into(),
                    });
                }
                us[i * du..(i + 1) * du].copy_from_slice(u.as_slice());
                xs[(i + 1) * n..(i + 2) * n].copy_from_slice(next.as_slice());
                x = next;
            }
            Ok(())
        })
        .collect();
    for o in outcomes {
        o?;
    }
    Ok(PathEnsemble {
        dw: dw.clone(),
        n,
        du,
        scheme,
        states,
        controls,
    })
}

/// Linear coefficients `(Â, B̂)` of a homogeneous equation along paths.
///
/// `drift(path, i)` is the matrix treated implicitly over step `i`;
/// `noise(path, i)` are the `m` matrices multiplying `dW` over step `i`.
pub trait LinearGenerator: Sync {
    fn state_dim(&self) -> usize;
    fn noise_dim(&self) -> usize;
    fn grid(&self) -> &TimeGrid;
    /// Whether the coefficients vary from path to path.
    fn path_dependent(&self) -> bool;
    fn drift(&self, path: usize, i: usize) -> DMatrix<f64>;
    fn noise(&self, path: usize, i: usize) -> Vec<DMatrix<f64>>;
}

/// `Ā = A + a_x(X̄, ū)`, `B̄_j = B_j + ∂_x b_j(X̄, ū)`; without a
/// linearisation the plain operator family.
pub struct PlainGenerator<'a> {
    grid: TimeGrid,
    ops: StepOps,
    n: usize,
    m: usize,
    lin: Option<(&'a dyn ControlProblem, &'a PathEnsemble)>,
}

impl<'a> PlainGenerator<'a> {
    pub fn new(space: &GalerkinSpace, fam: &OperatorFamily, grid: &TimeGrid) -> Result<Self> {
        if fam.state_dim() != space.state_dim() || fam.noise_dim() != space.noise_dim() {
            return invalid("operator family and space dimensions differ");
        }
        Ok(Self {
            grid: grid.clone(),
            ops: StepOps::build(space, fam, grid)?,
            n: space.state_dim(),
            m: space.noise_dim(),
            lin: None,
        })
    }

    /// Linearise the controlled equation along the paths of `ens`.
    pub fn linearized(
        space: &GalerkinSpace,
        fam: &OperatorFamily,
        problem: &'a dyn ControlProblem,
        ens: &'a PathEnsemble,
    ) -> Result<Self> {
        check_model(space, fam, problem)?;
        let mut g = Self::new(space, fam, ens.grid())?;
        g.lin = Some((problem, ens));
        Ok(g)
    }
}

impl LinearGenerator for PlainGenerator<'_> {
    fn state_dim(&self) -> usize {
        self.n
    }

    fn noise_dim(&self) -> usize {
        self.m
    }

    fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    fn path_dependent(&self) -> bool {
        self.lin.is_some()
    }

    fn drift(&self, path: usize, i: usize) -> DMatrix<f64> {
        let a = self.ops.drift_next[self.ops.idx(i)].clone();
        match self.lin {
            Some((problem, ens)) => {
                let t = self.grid.time(i);
                a + problem.drift_x(t, &ens.state_vec(path, i), &ens.control(path, i))
            }
            None => a,
        }
    }

    fn noise(&self, path: usize, i: usize) -> Vec<DMatrix<f64>> {
        let b = self.ops.noise[self.ops.idx(i)].clone();
        match self.lin {
            Some((problem, ens)) => {
                let t = self.grid.time(i);
                let bx = problem.diffusion_x(t, &ens.state_vec(path, i), &ens.control(path, i));
                b.into_iter().zip(bx).map(|(bj, dj)| bj + dj).collect()
            }
            None => b,
        }
    }
}

/// Girsanov tilt of a generator by `β` (`N × M × m`, path-major):
/// `Ã = Â + Σ_j (β_j/2) B̂_j − (|β|²/8) I`, `B̃_j = B̂_j + (β_j/2) I`.
pub struct TiltedGenerator<'a> {
    inner: &'a dyn LinearGenerator,
    beta: &'a [f64],
}

impl<'a> TiltedGenerator<'a> {
    pub fn new(inner: &'a dyn LinearGenerator, beta: &'a [f64], n_paths: usize) -> Result<Self> {
        if beta.len() != n_paths * inner.grid().steps() * inner.noise_dim() {
            return invalid("tilt coefficients have the wrong length");
        }
        Ok(Self { inner, beta })
    }

    fn beta_at(&self, path: usize, i: usize) -> &[f64] {
        let m = self.inner.noise_dim();
        let off = (path * self.inner.grid().steps() + i) * m;
        &self.beta[off..off + m]
    }
}

impl LinearGenerator for TiltedGenerator<'_> {
    fn state_dim(&self) -> usize {
        self.inner.state_dim()
    }

    fn noise_dim(&self) -> usize {
        self.inner.noise_dim()
    }

    fn grid(&self) -> &TimeGrid {
        self.inner.grid()
    }

    fn path_dependent(&self) -> bool {
        self.inner.path_dependent() || self.beta.iter().any(|b| *b != 0.0)
    }

    fn drift(&self, path: usize, i: usize) -> DMatrix<f64> {
        let beta = self.beta_at(path, i);
        let mut a = self.inner.drift(path, i);
        if beta.iter().all(|b| *b == 0.0) {
            return a;
        }
        for (bj, beta_j) in self.inner.noise(path, i).iter().zip(beta) {
            a += bj * (0.5 * beta_j);
        }
        let b2: f64 = beta.iter().map(|b| b * b).sum();
        for k in 0..a.nrows() {
            a[(k, k)] -= b2 / 8.0;
        }
        a
    }

    fn noise(&self, path: usize, i: usize) -> Vec<DMatrix<f64>> {
        let beta = self.beta_at(path, i);
        let mut b = self.inner.noise(path, i);
        for (bj, beta_j) in b.iter_mut().zip(beta) {
            for k in 0..bj.nrows() {
                bj[(k, k)] += 0.5 * beta_j;
            }
        }
        b
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Flavor {
    Plain,
    Tilted,
}

/// One-step factors `E_i = (I − Δt Â_i)⁻¹ (I + Σ_j B̂_{ij} ΔW_{ij})` per path.
#[derive(Debug, Clone)]
pub struct Propagator {
    grid: TimeGrid,
    n: usize,
    n_paths: usize,
    flavor: Flavor,
    factors: Vec<f64>,
    beta: Option<Vec<f64>>,
}

impl Propagator {
    /// Build factors from a generator coupled to the increments `dw`.
    pub fn build(
        gen: &dyn LinearGenerator,
        dw: &BrownianIncrements,
        flavor: Flavor,
        beta: Option<&[f64]>,
    ) -> Result<Self> {
        let grid = gen.grid();
        if dw.grid() != grid || dw.noise_dim() != gen.noise_dim() {
            return invalid("increments do not match the generator grid or noise dimension");
        }
        let (n, steps, n_paths) = (gen.state_dim(), grid.steps(), dw.n_paths());
        let shared: Option<Vec<(DMatrix<f64>, Vec<DMatrix<f64>>)>> = if gen.path_dependent() {
            None
        } else {
            let mut v = Vec::with_capacity(steps);
            for i in 0..steps {
                v.push((
                    implicit_inverse(&gen.drift(0, i), grid.dt(i), i)?,
                    gen.noise(0, i),
                ));
            }
            Some(v)
        };
        let mut factors = vec![0.0; n_paths * steps * n * n];
        let outcomes: Vec<Result<()>> = factors
            .par_chunks_mut(steps * n * n)
            .enumerate()
            .map(|(p, chunk)| {
                for i in 0..steps {
                    let inc = dw.get(p, i);
                    let (inv, noise) = match &shared {
                        Some(v) => (v[i].0.clone(), v[i].1.clone()),
                        None => (
                            implicit_inverse(&gen.drift(p, i), grid.dt(i), i)?,
                            gen.noise(p, i),
                        ),
                    };
                    let mut rhs = DMatrix::identity(n, n);
                    for (bj, dwj) in noise.iter().zip(inc) {
                        if *dwj != 0.0 {
                            rhs += bj * *dwj;
                        }
                    }
                    let e = inv * rhs;
                    chunk[i * n * n..(i + 1) * n * n].copy_from_slice(e.as_slice());
                }
                Ok(())
            })
            .collect();
        for o in outcomes {
            o?;
        }
        Ok(Self {
            grid: grid.clone(),
            n,
            n_paths,
            flavor,
            factors,
            beta: beta.map(|b| b.to_vec()),
        })
    }

    /// Plain propagator of an operator family, coupled to `dw`.
    pub fn plain(
        space: &GalerkinSpace,
        fam: &OperatorFamily,
        dw: &BrownianIncrements,
    ) -> Result<Self> {
        let gen = PlainGenerator::new(space, fam, dw.grid())?;
        Self::build(&gen, dw, Flavor::Plain, None)
    }

    /// Tilted propagator of `inner` with per-path, per-step `β`.
    pub fn tilted(
        inner: &dyn LinearGenerator,
        beta: &[f64],
        dw: &BrownianIncrements,
    ) -> Result<Self> {
        let gen = TiltedGenerator::new(inner, beta, dw.n_paths())?;
        Self::build(&gen, dw, Flavor::Tilted, Some(beta))
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn state_dim(&self) -> usize {
        self.n
    }

    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    pub fn flavor(&self) -> Flavor {
        self.flavor
    }

    pub fn beta(&self) -> Option<&[f64]> {
        self.beta.as_deref()
    }

    pub fn factor_slice(&self, path: usize, i: usize) -> &[f64] {
        let nn = self.n * self.n;
        let off = (path * self.grid.steps() + i) * nn;
        &self.factors[off..off + nn]
    }

    pub fn factor(&self, path: usize, i: usize) -> DMatrix<f64> {
        DMatrix::from_column_slice(self.n, self.n, self.factor_slice(path, i))
    }

    /// `Φ(t_i, t_j) = E_{j−1} ⋯ E_i`; identity for `i == j`.
    pub fn compose(&self, path: usize, i: usize, j: usize) -> DMatrix<f64> {
        assert!(i <= j && j <= self.grid.steps());
        let mut phi = DMatrix::identity(self.n, self.n);
        for k in i..j {
            phi = self.factor(path, k) * phi;
        }
        phi
    }
}

fn implicit_inverse(a: &DMatrix<f64>, dt: f64, step: usize) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    (DMatrix::identity(n, n) - a * dt)
        .try_inverse()
        .ok_or_else(|| {
            Error::NumericalFailure(format!(
                "implicit propagator matrix singular at step {step}"
            ))
        })
}

/// Moments of one run in the a priori estimate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AprioriReport {
    pub alpha: f64,
    pub scales: Vec<f64>,
    /// `E[sup_s ‖z(s)‖_H^{2α}]` per scale.
    pub sup_moments: Vec<f64>,
    /// `E[(∫ ‖z‖_V² ds)^α]` per scale.
    pub energy_moments: Vec<f64>,
    pub sup_slope: Option<f64>,
    pub energy_slope: Option<f64>,
    pub pass: bool,
}

/// Fit the homogeneity of the a priori moments in the input scale.
///
/// `runs` pairs each input scale `c` with the ensemble simulated from inputs
/// scaled by `c`.
pub fn check_apriori_moment(
    runs: &[(f64, &PathEnsemble)],
    space: &GalerkinSpace,
    alpha: f64,
) -> Result<AprioriReport> {
    if runs.len() < 3 {
        return invalid("need at least three input scales");
    }
    if alpha < 1.0 {
        return invalid("alpha must be >= 1");
    }
    let mut sup_m = Vec::new();
    let mut en_m = Vec::new();
    for (_, ens) in runs {
        let grid = ens.grid();
        let (mut s_acc, mut e_acc) = (0.0, 0.0);
        for p in 0..ens.n_paths() {
            let mut sup: f64 = 0.0;
            let mut energy = 0.0;
            for i in 0..=grid.steps() {
                let x = ens.state(p, i);
                sup = sup.max(space.norm_h_sq(x));
                if i < grid.steps() {
                    energy += grid.dt(i) * space.norm_v_sq(x);
                }
            }
            s_acc += sup.powf(alpha);
            e_acc += energy.powf(alpha);
        }
        sup_m.push(s_acc / ens.n_paths() as f64);
        en_m.push(e_acc / ens.n_paths() as f64);
    }
    let scales: Vec<f64> = runs.iter().map(|r| r.0).collect();
    let sup_slope = loglog_slope(&scales, &sup_m);
    let energy_slope = loglog_slope(&scales, &en_m);
    let all_zero = sup_m.iter().chain(&en_m).all(|v| *v == 0.0);
    let near = |s: Option<f64>| s.is_some_and(|s| (s - 2.0 * alpha).abs() <= 0.2);
    Ok(AprioriReport {
        alpha,
        scales,
        sup_moments: sup_m,
        energy_moments: en_m,
        sup_slope,
        energy_slope,
        pass: all_zero || (near(sup_slope) && near(energy_slope)),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContinuityReport {
    pub alpha: f64,
    pub rhos: Vec<f64>,
    /// `E[sup_{t≤s≤t+ρ} ‖z(s) − z0‖_H^{2α}]` per ρ.
    pub moments: Vec<f64>,
    pub moment_se: Vec<f64>,
    /// `moment / ((1 + ‖z0‖_V^{2α}) ρ^α)`, `None` at ρ = 0.
    pub constants: Vec<Option<f64>>,
    pub slope: Option<f64>,
    pub pass: bool,
}

/// Estimate the continuity moments of the solution started from `z0` at
/// the first knot of `grid`.
#[allow(clippy::too_many_arguments)]
pub fn check_continuity_estimate(
    space: &GalerkinSpace,
    fam: &OperatorFamily,
    problem: &dyn ControlProblem,
    policy: &dyn Policy,
    z0: &DVector<f64>,
    grid: &TimeGrid,
    n_paths: usize,
    seed: u64,
    rho_list: &[f64],
    alpha: f64,
) -> Result<ContinuityReport> {
    let horizon = grid.t_end() - grid.t0();
    for &rho in rho_list {
        if !(rho >= 0.0) || rho > horizon * (1.0 + 1e-12) {
            return invalid(format!("rho = {rho} outside [0, {horizon}]"));
        }
    }
    let ens = simulate_forward(space, fam, problem, policy, z0, grid, n_paths, seed)?;
    let z0s = z0.as_slice();
    let mut moments = Vec::new();
    let mut ses = Vec::new();
    let mut constants = Vec::new();
    let base = 1.0 + space.norm_v(z0s).powf(2.0 * alpha);
    for &rho in rho_list {
        let last = grid
            .knots()
            .iter()
            .rposition(|t| *t <= grid.t0() + rho + 1e-12 * horizon)
            .unwrap_or(0);
        let vals: Vec<f64> = (0..ens.n_paths())
            .map(|p| {
                (0..=last)
                    .map(|i| {
                        let d: Vec<f64> = ens
                            .state(p, i)
                            .iter()
                            .zip(z0s)
                            .map(|(a, b)| a - b)
                            .collect();
                        space.norm_h_sq(&d)
                    })
                    .fold(0.0, f64::max)
                    .powf(alpha)
            })
            .collect();
        let (mean, se) = crate::regression::mean_se(&vals);
        moments.push(mean);
        ses.push(se);
        constants.push((rho > 0.0).then(|| mean / (base * rho.powf(alpha))));
    }
    let slope = loglog_slope(rho_list, &moments);
    let pass = match slope {
        Some(s) => s >= alpha - 0.25,
        None => moments.iter().all(|m| *m == 0.0),
    };
    Ok(ContinuityReport {
        alpha,
        rhos: rho_list.to_vec(),
        moments,
        moment_se: ses,
        constants,
        slope,
        pass,
    })
}

/// Moment series of one remainder term.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemainderSeries {
    pub name: String,
    /// `E[∫ ‖ε‖^α dr]` per perturbation size.
    pub moments: Vec<f64>,
    pub slope: Option<f64>,
    /// The term is identically zero for every size.
    pub vanishing: bool,
    pub required_slope: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemainderDiagnostics {
    /// Perturbation sizes, strictly decreasing.
    pub h: Vec<f64>,
    pub alpha: f64,
    pub terms: Vec<RemainderSeries>,
}

impl RemainderDiagnostics {
    pub fn term(&self, name: &str) -> Option<&RemainderSeries> {
        self.terms.iter().find(|t| t.name == name)
    }

    pub fn pass(&self) -> bool {
        self.terms.iter().all(|t| t.pass)
    }
}

/// Perturb the base paths at knot `start` by `h·direction`, re-simulate with
/// the same increments and controls, and measure the four remainders of the
/// first- and second-order expansions of the state.
#[allow(clippy::too_many_arguments)]
pub fn variational_expansion(
    space: &GalerkinSpace,
    fam: &OperatorFamily,
    problem: &dyn ControlProblem,
    base: &PathEnsemble,
    start: usize,
    direction: &DVector<f64>,
    h_list: &[f64],
    alpha: f64,
) -> Result<RemainderDiagnostics> {
    if h_list.iter().any(|h| !(*h > 0.0)) {
        return invalid("perturbation sizes must be positive");
    }
    if start >= base.grid().steps() {
        return invalid("perturbation time must precede the horizon");
    }
    let mut h = h_list.to_vec();
    h.sort_by(|a, b| b.total_cmp(a));
    h.dedup();
    if h.len() != h_list.len() {
        return invalid("perturbation sizes must be distinct");
    }
    let (n, m) = (base.state_dim(), base.noise_dim());
    if direction.len() != n {
        return invalid("direction has the wrong dimension");
    }
    let tail = base.restrict(start, base.grid().steps())?;
    let policy = ReplayPolicy::from_ensemble(&tail, 0);
    let quad = gauss_legendre_unit();
    let grid = tail.grid().clone();
    let n_paths = tail.n_paths();

    let mut moments = vec![Vec::new(); 4];
    for &hk in &h {
        let mut x1 = Vec::with_capacity(n_paths * n);
        for p in 0..n_paths {
            x1.extend(
                tail.state(p, 0)
                    .iter()
                    .zip(direction.iter())
                    .map(|(x, d)| x + hk * d),
            );
        }
        let pert = simulate_forward_with(
            space,
            fam,
            problem,
            &policy,
            &x1,
            tail.increments(),
            tail.scheme(),
        )?;
        let per_path: Vec<Result<[f64; 4]>> = (0..n_paths)
            .into_par_iter()
            .map(|p| {
                let mut acc = [0.0; 4];
                for i in 0..grid.steps() {
                    let t = grid.time(i);
                    let dt = grid.dt(i);
                    let xb = tail.state_vec(p, i);
                    let xh = pert.state_vec(p, i) - &xb;
                    let u = tail.control(p, i);
                    let ax_bar = problem.drift_x(t, &xb, &u);
                    let bx_bar = problem.diffusion_x(t, &xb, &u);
                    let axx_bar = problem.drift_xx(t, &xb, &u).ok_or_else(|| {
                        Error::UnsupportedProblem("drift Hessian not supplied".into())
                    })?;
                    let bxx_bar = problem.diffusion_xx(t, &xb, &u).ok_or_else(|| {
                        Error::UnsupportedProblem("diffusion Hessian not supplied".into())
                    })?;
                    let mut e1 = DVector::<f64>::zeros(n);
                    let mut e2 = DMatrix::<f64>::zeros(n, m);
                    let mut e3 = DVector::<f64>::zeros(n);
                    let mut e4 = DMatrix::<f64>::zeros(n, m);
                    for &(mu, w) in &quad {
                        let xm = &xb + &xh * mu;
                        e1 += (problem.drift_x(t, &xm, &u) - &ax_bar) * &xh * w;
                        for (j, (bxj, bxj_bar)) in problem
                            .diffusion_x(t, &xm, &u)
                            .iter()
                            .zip(&bx_bar)
                            .enumerate()
                        {
                            let col = (bxj - bxj_bar) * &xh * w;
                            let mut c = e2.column_mut(j);
                            c += col;
                        }
                        let axx = problem
                            .drift_xx(t, &xm, &u)
                            .unwrap_or_else(|| axx_bar.clone());
                        for k in 0..n {
                            e3[k] += w
                                * (1.0 - mu)
                                * (&axx[k] - &axx_bar[k]).dot(&(&xh * xh.transpose()));
                        }
                        let bxx = problem
                            .diffusion_xx(t, &xm, &u)
                            .unwrap_or_else(|| bxx_bar.clone());
                        for j in 0..m {
                            for k in 0..n {
                                e4[(k, j)] += w
                                    * (1.0 - mu)
                                    * (&bxx[j][k] - &bxx_bar[j][k]).dot(&(&xh * xh.transpose()));
                            }
                        }
                    }
                    acc[0] += dt * e1.norm().powf(alpha);
                    acc[1] += dt * e2.norm().powf(alpha);
                    acc[2] += dt * e3.norm().powf(alpha);
                    acc[3] += dt * e4.norm().powf(alpha);
                }
                Ok(acc)
            })
            .collect();
        let mut sums = [0.0; 4];
        for r in per_path {
            let r = r?;
            for k in 0..4 {
                sums[k] += r[k];
            }
        }
        for k in 0..4 {
            moments[k].push(sums[k] / n_paths as f64);
        }
    }
    let names = ["eps1", "eps2", "eps3", "eps4"];
    let terms = names
        .iter()
        .zip(moments)
        .enumerate()
        .map(|(k, (name, mom))| {
            let vanishing = mom.iter().all(|v| *v == 0.0);
            let slope = loglog_slope(&h, &mom);
            let required = if k < 2 { alpha } else { 2.0 * alpha - 0.3 };
            let pass = vanishing
                || slope.is_some_and(|s| if k < 2 { s > required } else { s >= required });
            RemainderSeries {
                name: name.to_string(),
                moments: mom,
                slope,
                vanishing,
                required_slope: required,
                pass,
            }
        })
        .collect();
    Ok(RemainderDiagnostics { h, alpha, terms })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::{ConstantPolicy, FnProblem};

    fn scalar(a: f64, w: f64) -> (GalerkinSpace, OperatorFamily) {
        let space = GalerkinSpace::new(vec![w], vec![1.0]).unwrap();
        let fam = OperatorFamily::constant(
            DMatrix::from_element(1, 1, a),
            vec![DMatrix::zeros(1, 1)],
            1.0,
            1.0,
        )
        .unwrap();
        (space, fam)
    }

    fn zero_control() -> ConstantPolicy {
        ConstantPolicy(DVector::zeros(1))
    }

    #[test]
    fn decaying_ode_matches_exponential() {
        let (space, fam) = scalar(-1.0, 1.0);
        let problem = FnProblem::zero(1, 1, 1);
        let grid = TimeGrid::uniform(0.0, 1.0, 512).unwrap();
        let ens = simulate_forward(
            &space,
            &fam,
            &problem,
            &zero_control(),
            &DVector::from_element(1, 1.0),
            &grid,
            3,
            1,
        )
        .unwrap();
        assert!((ens.state(2, 512)[0] - (-1.0f64).exp()).abs() <= 5e-3);
    }

    #[test]
    fn zero_data_stays_zero() {
        let (space, fam) = scalar(-1.0, 1.0);
        let problem = FnProblem::zero(1, 1, 1).with_diffusion(
            |_, _, u| DMatrix::from_element(1, 1, u[0]),
            |_, _, _| vec![DMatrix::zeros(1, 1)],
            |_, _, _| vec![vec![DMatrix::zeros(1, 1)]],
        );
        let grid = TimeGrid::uniform(0.0, 1.0, 16).unwrap();
        let ens = simulate_forward(
            &space,
            &fam,
            &problem,
            &zero_control(),
            &DVector::zeros(1),
            &grid,
            20,
            3,
        )
        .unwrap();
        assert!(ens.states_at(16).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn propagator_scalar_exponential_and_cocycle() {
        let (space, fam) = scalar(-1.0, 1.0);
        let grid = TimeGrid::uniform(0.0, 1.0, 512).unwrap();
        let dw = BrownianIncrements::generate(&grid, 2, 1, 5).unwrap();
        let prop = Propagator::plain(&space, &fam, &dw).unwrap();
        let phi = prop.compose(0, 0, 512)[(0, 0)];
        assert!((phi / (-1.0f64).exp() - 1.0).abs() <= 1e-2);
        assert_eq!(prop.compose(1, 7, 7), DMatrix::identity(1, 1));
        let a = prop.compose(1, 3, 40);
        let b = prop.compose(1, 40, 100) * prop.compose(1, 3, 40);
        assert!((prop.compose(1, 3, 100) - b).norm() <= 1e-14 * a.norm().max(1.0));
    }

    #[test]
    fn zero_beta_tilt_is_plain() {
        let (space, fam) = make_two();
        let grid = TimeGrid::uniform(0.0, 1.0, 8).unwrap();
        let dw = BrownianIncrements::generate(&grid, 3, 1, 5).unwrap();
        let plain = Propagator::plain(&space, &fam, &dw).unwrap();
        let gen = PlainGenerator::new(&space, &fam, &grid).unwrap();
        let beta = vec![0.0; 3 * 8];
        let tilted = Propagator::tilted(&gen, &beta, &dw).unwrap();
        for p in 0..3 {
            for i in 0..8 {
                assert_eq!(plain.factor(p, i), tilted.factor(p, i));
            }
        }
    }

    fn make_two() -> (GalerkinSpace, OperatorFamily) {
        let space = GalerkinSpace::new(vec![2.0, 5.0], vec![1.0]).unwrap();
        let b = DMatrix::from_row_slice(2, 2, &[0.0, 0.3, -0.3, 0.0]);
        let fam = OperatorFamily::constant(
            DMatrix::from_diagonal(&DVector::from_vec(vec![-1.0, -4.0])),
            vec![b],
            1.0,
            1.0,
        )
        .unwrap();
        (space, fam)
    }

    #[test]
    fn remainders_vanish_for_linear_coefficients() {
        let (space, fam) = make_two();
        let problem = FnProblem::zero(2, 1, 1);
        let grid = TimeGrid::uniform(0.0, 0.5, 16).unwrap();
        let x0 = DVector::from_vec(vec![1.0, -0.5]);
        let base =
            simulate_forward(&space, &fam, &problem, &zero_control(), &x0, &grid, 8, 2).unwrap();
        let d = DVector::from_vec(vec![1.0, 1.0]);
        let r =
            variational_expansion(&space, &fam, &problem, &base, 0, &d, &[0.1, 0.01], 2.0).unwrap();
        for name in ["eps3", "eps4"] {
            assert!(r.term(name).unwrap().vanishing);
        }
        assert!(
            variational_expansion(&space, &fam, &problem, &base, 0, &d, &[0.1, 0.0], 2.0).is_err()
        );
    }

    #[test]
    fn continuity_rejects_long_rho() {
        let (space, fam) = scalar(-1.0, 1.0);
        let problem = FnProblem::zero(1, 1, 1);
        let grid = TimeGrid::uniform(0.0, 1.0, 8).unwrap();
        let r = check_continuity_estimate(
            &space,
            &fam,
            &problem,
            &zero_control(),
            &DVector::from_element(1, 1.0),
            &grid,
            4,
            1,
            &[2.0],
            1.0,
        );
        assert!(matches!(r, Err(Error::InvalidArgument(_))));
    }
}

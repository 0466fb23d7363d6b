//! First- and second-order adjoint equations along a candidate optimal
//! ensemble, and the Itô-formula check for the operator-valued equation.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bsde::BsdeSolution;
use crate::error::{invalid, Error, Result};
use crate::forward::{
    BrownianIncrements, LinearGenerator, PathEnsemble, PlainGenerator, Propagator,
};
use crate::galerkin::{GalerkinSpace, OperatorFamily};
use crate::problem::{ControlProblem, GeneratorGradient};
use crate::regression::{residual_se, RegressionBasis, Regressor};
use crate::stats::rms;

/// `(p, q)` along every path. `q` at a step is an `n × m` matrix whose
/// column `j` pairs with `dW_j`.
#[derive(Debug, Clone)]
pub struct FirstAdjoint {
    n_paths: usize,
    steps: usize,
    n: usize,
    m: usize,
    p: Vec<f64>,
    q: Vec<f64>,
    /// Largest regression standard error of the `p` targets.
    pub p_se: f64,
    /// Largest regression standard error of the `q` targets.
    pub q_se: f64,
}

impl FirstAdjoint {
    pub fn p(&self, path: usize, step: usize) -> &[f64] {
        let off = (path * (self.steps + 1) + step) * self.n;
        &self.p[off..off + self.n]
    }

    pub fn p_vec(&self, path: usize, step: usize) -> DVector<f64> {
        DVector::from_column_slice(self.p(path, step))
    }

    pub fn q(&self, path: usize, step: usize) -> DMatrix<f64> {
        let nm = self.n * self.m;
        let off = (path * self.steps + step) * nm;
        DMatrix::from_column_slice(self.n, self.m, &self.q[off..off + nm])
    }

    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    pub fn steps(&self) -> usize {
        self.steps
    }
}

/// Generator derivatives at `(t_i, X̄_i, Ȳ_i, Z̄_i, ū_i)`, path-major.
pub fn generator_gradients(
    problem: &dyn ControlProblem,
    ens: &PathEnsemble,
    bsde: &BsdeSolution,
) -> Vec<GeneratorGradient> {
    let steps = ens.grid().steps();
    (0..ens.n_paths() * steps)
        .into_par_iter()
        .map(|c| {
            let (p, i) = (c / steps, c % steps);
            problem.generator_grad(
                ens.grid().time(i),
                &ens.state_vec(p, i),
                bsde.y(p, i),
                &bsde.z_vec(p, i),
                &ens.control(p, i),
            )
        })
        .collect()
}

fn check_inputs(
    space: &GalerkinSpace,
    problem: &dyn ControlProblem,
    ens: &PathEnsemble,
    bsde: &BsdeSolution,
) -> Result<()> {
    if bsde.n_paths() != ens.n_paths() || bsde.steps() != ens.grid().steps() {
        return invalid("BSDE solution does not match the ensemble");
    }
    if problem.state_dim() != space.state_dim() || ens.state_dim() != space.state_dim() {
        return invalid("state dimensions differ");
    }
    Ok(())
}

/// Backward sweep for the first-order adjoint
/// `−dp = [Ā*p + k_y p + Σ_j k_{z_j} B̄_j* p + Σ_j (B̄_j* q_j + k_{z_j} q_j) + k_x] dt − q dW`,
/// `p(T) = h_x(X̄(T))`, with `Ā*` implicit.
pub fn solve_first_adjoint(
    space: &GalerkinSpace,
    fam: &OperatorFamily,
    problem: &dyn ControlProblem,
    ens: &PathEnsemble,
    bsde: &BsdeSolution,
    basis: &RegressionBasis,
) -> Result<FirstAdjoint> {
    check_inputs(space, problem, ens, bsde)?;
    let grads = generator_gradients(problem, ens, bsde);
    solve_first_adjoint_with(space, fam, problem, ens, &grads, basis)
}

pub(crate) fn solve_first_adjoint_with(
    space: &GalerkinSpace,
    fam: &OperatorFamily,
    problem: &dyn ControlProblem,
    ens: &PathEnsemble,
    grads: &[GeneratorGradient],
    basis: &RegressionBasis,
) -> Result<FirstAdjoint> {
    let grid = ens.grid();
    let (n_paths, steps, n, m) = (
        ens.n_paths(),
        grid.steps(),
        ens.state_dim(),
        ens.noise_dim(),
    );
    let nm = n * m;
    let mut p_all = vec![0.0; n_paths * (steps + 1) * n];
    let mut q_all = vec![0.0; n_paths * steps * nm];
    let mut next: Vec<f64> = Vec::with_capacity(n_paths * n);
    for p in 0..n_paths {
        next.extend_from_slice(problem.terminal_grad(&ens.state_vec(p, steps)).as_slice());
    }
    for p in 0..n_paths {
        let off = (p * (steps + 1) + steps) * n;
        p_all[off..off + n].copy_from_slice(&next[p * n..(p + 1) * n]);
    }
    let (mut p_se, mut q_se) = (0.0f64, 0.0f64);

    for i in (0..steps).rev() {
        let t = grid.time(i);
        let dt = grid.dt(i);
        let reg = Regressor::fit(basis, &ens.states_at(i), n)?;
        let cond = reg.project_many(&next, n);
        let mut qt = vec![0.0; n_paths * nm];
        for p in 0..n_paths {
            let dw = ens.dw(p, i);
            for j in 0..m {
                for k in 0..n {
                    qt[p * nm + j * n + k] = (next[p * n + k] - cond[p * n + k]) * dw[j] / dt;
                }
            }
        }
        let qi = reg.project_many(&qt, nm);
        q_se = q_se.max(column_se(&qt, &qi, nm));

        let a_t = fam.drift(t);
        let b_t = fam.noise_absorbed(t, space);
        let shared_inv = implicit_adjoint(&a_t, dt)?;
        let rows: Vec<Result<(Vec<f64>, Option<DMatrix<f64>>)>> = (0..n_paths)
            .into_par_iter()
            .map(|p| {
                let x = ens.state_vec(p, i);
                let u = ens.control(p, i);
                let g = &grads[p * steps + i];
                let ax = problem.drift_x(t, &x, &u);
                let bx = problem.diffusion_x(t, &x, &u);
                let pn = DVector::from_column_slice(&next[p * n..(p + 1) * n]);
                let q = DMatrix::from_column_slice(n, m, &qi[p * nm..(p + 1) * nm]);
                let mut rhs = &pn * g.y + &g.x;
                for j in 0..m {
                    let bbar = &b_t[j] + &bx[j];
                    let qj = q.column(j);
                    rhs += bbar.transpose() * (&pn * g.z[j] + qj) + qj * g.z[j];
                }
                let target: Vec<f64> = (pn + rhs * dt).iter().copied().collect();
                let own_inv = if ax.iter().any(|v| *v != 0.0) {
                    Some(implicit_adjoint(&(&a_t + ax), dt)?)
                } else {
                    None
                };
                Ok((target, own_inv))
            })
            .collect();
        let mut target = Vec::with_capacity(n_paths * n);
        let mut invs = Vec::with_capacity(n_paths);
        for r in rows {
            let (tv, inv) = r?;
            target.extend(tv);
            invs.push(inv);
        }
        let fitted = reg.project_many(&target, n);
        p_se = p_se.max(column_se(&target, &fitted, n));
        for p in 0..n_paths {
            let f = DVector::from_column_slice(&fitted[p * n..(p + 1) * n]);
            let pi = match &invs[p] {
                Some(inv) => inv * f,
                None => &shared_inv * f,
            };
            if pi.iter().any(|v| !v.is_finite()) {
                return Err(Error::Divergence {
                    path: p,
                    step: i,
                    detail: "non-finite first adjoint".into(),
                });
            }
            let off = (p * (steps + 1) + i) * n;
            p_all[off..off + n].copy_from_slice(pi.as_slice());
            next[p * n..(p + 1) * n].copy_from_slice(pi.as_slice());
            let qo = (p * steps + i) * nm;
            q_all[qo..qo + nm].copy_from_slice(&qi[p * nm..(p + 1) * nm]);
        }
    }
    Ok(FirstAdjoint {
        n_paths,
        steps,
        n,
        m,
        p: p_all,
        q: q_all,
        p_se,
        q_se,
    })
}

fn implicit_adjoint(a: &DMatrix<f64>, dt: f64) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    (DMatrix::identity(n, n) - a.transpose() * dt)
        .try_inverse()
        .ok_or_else(|| Error::NumericalFailure("implicit adjoint matrix is singular".into()))
}

/// Largest per-column residual standard error of a `N × k` regression.
fn column_se(target: &[f64], fitted: &[f64], k: usize) -> f64 {
    let mut worst: f64 = 0.0;
    for c in 0..k {
        let a: Vec<f64> = target.iter().skip(c).step_by(k).copied().collect();
        let b: Vec<f64> = fitted.iter().skip(c).step_by(k).copied().collect();
        worst = worst.max(residual_se(&a, &b));
    }
    worst
}

/// Matrix of the bilinear form `G(t)` at every `(path, step)`, column-major
/// `n × n` blocks:
/// `G = Mᵀ D²k M + Σ_k p_k a_xx^k + Σ_j k_{z_j} Σ_k p_k b_xx^{jk} + Σ_{j,k} q_{kj} b_xx^{jk}`
/// with `M = [I; pᵀ; (B̄_jᵀ p + q_j)ᵀ]`.
#[allow(non_snake_case)]
pub fn build_G(
    space: &GalerkinSpace,
    fam: &OperatorFamily,
    problem: &dyn ControlProblem,
    ens: &PathEnsemble,
    bsde: &BsdeSolution,
    first: &FirstAdjoint,
) -> Result<Vec<f64>> {
    check_inputs(space, problem, ens, bsde)?;
    let grads = generator_gradients(problem, ens, bsde);
    build_g_with(space, fam, problem, ens, bsde, first, &grads)
}

fn build_g_with(
    space: &GalerkinSpace,
    fam: &OperatorFamily,
    problem: &dyn ControlProblem,
    ens: &PathEnsemble,
    bsde: &BsdeSolution,
    first: &FirstAdjoint,
    grads: &[GeneratorGradient],
) -> Result<Vec<f64>> {
    let grid = ens.grid();
    let (n_paths, steps, n, m) = (
        ens.n_paths(),
        grid.steps(),
        ens.state_dim(),
        ens.noise_dim(),
    );
    let b_ops: Vec<Vec<DMatrix<f64>>> = (0..steps)
        .map(|i| fam.noise_absorbed(grid.time(i), space))
        .collect();
    let blocks: Vec<Result<Vec<f64>>> = (0..n_paths * steps)
        .into_par_iter()
        .map(|c| {
            let (p, i) = (c / steps, c % steps);
            let t = grid.time(i);
            let x = ens.state_vec(p, i);
            let u = ens.control(p, i);
            let z = bsde.z_vec(p, i);
            let missing = |what: &str| Error::UnsupportedProblem(format!("{what} not supplied"));
            let d2k = problem
                .generator_hessian(t, &x, bsde.y(p, i), &z, &u)
                .ok_or_else(|| missing("generator Hessian"))?;
            let axx = problem
                .drift_xx(t, &x, &u)
                .ok_or_else(|| missing("drift Hessian"))?;
            let bxx = problem
                .diffusion_xx(t, &x, &u)
                .ok_or_else(|| missing("diffusion Hessian"))?;
            let bx = problem.diffusion_x(t, &x, &u);
            let pv = first.p_vec(p, i);
            let q = first.q(p, i);
            let kz = &grads[p * steps + i].z;
            let mut mm = DMatrix::zeros(n + 1 + m, n);
            for k in 0..n {
                mm[(k, k)] = 1.0;
            }
            mm.row_mut(n).copy_from(&pv.transpose());
            for j in 0..m {
                let bbar = &b_ops[i][j] + &bx[j];
                let v = bbar.transpose() * &pv + q.column(j);
                mm.row_mut(n + 1 + j).copy_from(&v.transpose());
            }
            let mut g = mm.transpose() * d2k * &mm;
            for k in 0..n {
                g += &axx[k] * pv[k];
            }
            for j in 0..m {
                for k in 0..n {
                    g += &bxx[j][k] * (kz[j] * pv[k] + q[(k, j)]);
                }
            }
            Ok(g.as_slice().to_vec())
        })
        .collect();
    let mut out = Vec::with_capacity(n_paths * steps * n * n);
    for b in blocks {
        out.extend(b?);
    }
    Ok(out)
}

/// Solution of the operator-valued backward equation.
#[derive(Debug, Clone)]
pub struct BsieSolution {
    n_paths: usize,
    steps: usize,
    n: usize,
    big_p: Vec<f64>,
    pub picard_iters: usize,
    /// Last sup-entry change between Picard iterates.
    pub sup_change: f64,
    pub trajectory: Vec<f64>,
    /// Changes shrink by a factor ≤ 0.9 from the third iterate on.
    pub geometric: bool,
    /// Largest regression standard error over entries and steps.
    pub p_se: f64,
}

impl BsieSolution {
    pub fn at(&self, path: usize, step: usize) -> DMatrix<f64> {
        DMatrix::from_column_slice(self.n, self.n, self.slice(path, step))
    }

    pub fn slice(&self, path: usize, step: usize) -> &[f64] {
        let nn = self.n * self.n;
        let off = (path * (self.steps + 1) + step) * nn;
        &self.big_p[off..off + nn]
    }

    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.big_p
    }
}

/// Picard iteration for
/// `P(t) = E[Φ*(t,T) ξ Φ(t,T) + ∫ Φ*(t,s)(k_y P + G)(s) Φ(t,s) ds | F_t]`
/// on the factors of `prop`. Each sweep accumulates
/// `R_i = E_iᵀ R_{i+1} E_i + Δt (k_y P_i + G_i)` path-wise and regresses
/// `R_i` on the features of `features` at step `i`.
#[allow(clippy::too_many_arguments)]
pub fn solve_bsie(
    prop: &Propagator,
    terminal: &[f64],
    k_y: &[f64],
    g: &[f64],
    features: &PathEnsemble,
    basis: &RegressionBasis,
    picard_max: usize,
    tol: f64,
) -> Result<BsieSolution> {
    let (n_paths, steps, n) = (prop.n_paths(), prop.grid().steps(), prop.state_dim());
    let nn = n * n;
    if terminal.len() != n_paths * nn
        || k_y.len() != n_paths * steps
        || g.len() != n_paths * steps * nn
    {
        return invalid("BSIE data have inconsistent shapes");
    }
    if features.n_paths() != n_paths || features.grid().steps() != steps {
        return invalid("feature ensemble does not match the propagator");
    }
    if picard_max == 0 {
        return invalid("need at least one Picard iteration");
    }
    let nf = features.state_dim();
    let upper: Vec<(usize, usize)> = (0..n).flat_map(|c| (0..=c).map(move |r| (r, c))).collect();
    let nu = upper.len();
    let regs: Vec<Regressor> = (0..steps)
        .map(|i| Regressor::fit(basis, &features.states_at(i), nf))
        .collect::<Result<_>>()?;

    let mut current = vec![0.0; n_paths * (steps + 1) * nn];
    for p in 0..n_paths {
        let off = (p * (steps + 1) + steps) * nn;
        let xi = DMatrix::from_column_slice(n, n, &terminal[p * nn..(p + 1) * nn]);
        let sym = (&xi + xi.transpose()) * 0.5;
        current[off..off + nn].copy_from_slice(sym.as_slice());
    }
    let mut trajectory = Vec::new();
    let mut p_se: f64 = 0.0;
    let mut iters = 0;
    let mut change = f64::INFINITY;
    while iters < picard_max {
        let mut next = current.clone();
        let mut r: Vec<f64> = terminal.to_vec();
        let mut se_iter: f64 = 0.0;
        for i in (0..steps).rev() {
            let dt = prop.grid().dt(i);
            r.par_chunks_mut(nn).enumerate().for_each(|(p, rp)| {
                let e = DMatrix::from_column_slice(n, n, prop.factor_slice(p, i));
                let rm = DMatrix::from_column_slice(n, n, rp);
                let off = (p * (steps + 1) + i) * nn;
                let pk = DMatrix::from_column_slice(n, n, &current[off..off + nn]);
                let gi = DMatrix::from_column_slice(
                    n,
                    n,
                    &g[(p * steps + i) * nn..(p * steps + i + 1) * nn],
                );
                let new = e.transpose() * rm * &e + (pk * k_y[p * steps + i] + gi) * dt;
                rp.copy_from_slice(new.as_slice());
            });
            let mut tgt = vec![0.0; n_paths * nu];
            for p in 0..n_paths {
                for (k, (a, b)) in upper.iter().enumerate() {
                    tgt[p * nu + k] = 0.5 * (r[p * nn + a + b * n] + r[p * nn + b + a * n]);
                }
            }
            let fit = regs[i].project_many(&tgt, nu);
            se_iter = se_iter.max(column_se(&tgt, &fit, nu));
            for p in 0..n_paths {
                let off = (p * (steps + 1) + i) * nn;
                for (k, (a, b)) in upper.iter().enumerate() {
                    let v = fit[p * nu + k];
                    next[off + a + b * n] = v;
                    next[off + b + a * n] = v;
                }
            }
        }
        change = next
            .iter()
            .zip(&current)
            .fold(0.0f64, |acc, (a, b)| acc.max((a - b).abs()));
        if !change.is_finite() {
            return Err(Error::Convergence {
                iterations: iters + 1,
                residual: change,
                trajectory,
            });
        }
        trajectory.push(change);
        current = next;
        p_se = se_iter;
        iters += 1;
        if change <= tol {
            break;
        }
    }
    if change > tol {
        return Err(Error::Convergence {
            iterations: iters,
            residual: change,
            trajectory,
        });
    }
    let geometric = trajectory
        .windows(2)
        .skip(1)
        .all(|w| w[1] <= 0.9 * w[0] || w[1] <= tol);
    Ok(BsieSolution {
        n_paths,
        steps,
        n,
        big_p: current,
        picard_iters: iters,
        sup_change: change,
        trajectory,
        geometric,
        p_se,
    })
}

/// Adjoint processes along a candidate optimal ensemble.
#[derive(Debug, Clone)]
pub struct AdjointBundle {
    pub first: FirstAdjoint,
    pub second: BsieSolution,
    /// `G(t)` blocks, path-major, column-major `n × n`.
    pub g_path: Vec<f64>,
    /// `k_y` along paths.
    pub k_y: Vec<f64>,
    /// Tilt `β = k_z` along paths, `N × M × m`.
    pub beta: Vec<f64>,
}

impl AdjointBundle {
    pub fn p(&self, path: usize, step: usize) -> DVector<f64> {
        self.first.p_vec(path, step)
    }

    pub fn q(&self, path: usize, step: usize) -> DMatrix<f64> {
        self.first.q(path, step)
    }

    pub fn big_p(&self, path: usize, step: usize) -> DMatrix<f64> {
        self.second.at(path, step)
    }

    /// Pooled standard error of `(p, q, P)` used for default tolerances.
    pub fn pooled_se(&self) -> f64 {
        self.first.p_se + self.first.q_se + self.second.p_se
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SecondAdjointOptions {
    pub picard_max: usize,
    /// `None` selects `1e-8 (1 + max ‖h_xx‖)`.
    pub tol: Option<f64>,
}

impl Default for SecondAdjointOptions {
    fn default() -> Self {
        Self {
            picard_max: 12,
            tol: None,
        }
    }
}

/// Solve both adjoint equations. The second-order one runs on the
/// propagator of `(Ā, B̄)` tilted by `β = k_z` along the paths.
#[allow(clippy::too_many_arguments)]
pub fn solve_adjoints(
    space: &GalerkinSpace,
    fam: &OperatorFamily,
    problem: &dyn ControlProblem,
    ens: &PathEnsemble,
    bsde: &BsdeSolution,
    basis: &RegressionBasis,
    opts: &SecondAdjointOptions,
) -> Result<AdjointBundle> {
    check_inputs(space, problem, ens, bsde)?;
    let grads = generator_gradients(problem, ens, bsde);
    let first = solve_first_adjoint_with(space, fam, problem, ens, &grads, basis)?;
    let g_path = build_g_with(space, fam, problem, ens, bsde, &first, &grads)?;
    let k_y: Vec<f64> = grads.iter().map(|g| g.y).collect();
    let beta: Vec<f64> = grads
        .iter()
        .flat_map(|g| g.z.iter().copied().collect::<Vec<_>>())
        .collect();
    let second = solve_second_adjoint(space, fam, problem, ens, &k_y, &g_path, &beta, basis, opts)?;
    Ok(AdjointBundle {
        first,
        second,
        g_path,
        k_y,
        beta,
    })
}

/// Second-order adjoint with terminal `h_xx(X̄(T))`.
#[allow(clippy::too_many_arguments)]
pub fn solve_second_adjoint(
    space: &GalerkinSpace,
    fam: &OperatorFamily,
    problem: &dyn ControlProblem,
    ens: &PathEnsemble,
    k_y: &[f64],
    g_path: &[f64],
    beta: &[f64],
    basis: &RegressionBasis,
    opts: &SecondAdjointOptions,
) -> Result<BsieSolution> {
    let steps = ens.grid().steps();
    let mut terminal = Vec::new();
    let mut h_norm: f64 = 0.0;
    for p in 0..ens.n_paths() {
        let h = problem
            .terminal_hessian(&ens.state_vec(p, steps))
            .ok_or_else(|| Error::UnsupportedProblem("terminal Hessian not supplied".into()))?;
        h_norm = h_norm.max(h.norm());
        terminal.extend_from_slice(h.as_slice());
    }
    let gen = PlainGenerator::linearized(space, fam, problem, ens)?;
    let prop = Propagator::tilted(&gen, beta, ens.increments())?;
    let tol = opts.tol.unwrap_or(1e-8 * (1.0 + h_norm));
    solve_bsie(
        &prop,
        &terminal,
        k_y,
        g_path,
        ens,
        basis,
        opts.picard_max,
        tol,
    )
}

/// Outcome of the Itô-formula check for `⟨P x, x⟩`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItoCheckResult {
    /// RMS over paths and steps of the discrete identity
    /// `Θ_i − E_i Θ_{i+1} − Δt(⟨f x, x⟩ + β·𝒵)`.
    pub residual_rms: f64,
    /// RMS of `Θ`, the natural size of the identity.
    pub scale: f64,
    /// RMS of `σ` over paths and steps.
    pub sigma_rms: f64,
    /// Path-mean of `σ` per step.
    pub sigma_path: Vec<f64>,
    /// Path-mean of `𝒵` (summed over noise components) per step.
    pub zcal_path: Vec<f64>,
    /// Path-mean of `|β|` per step.
    pub beta_used: Vec<f64>,
}

/// Forcing `(γ₁, γ₂)` of the inhomogeneous equation at `(path, step, x)`.
pub type Forcing<'a> =
    dyn Fn(usize, usize, &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) + Sync + 'a;
/// Driver `f(t_i, P)` of the operator equation at `(path, step, P)`.
pub type OperatorDriver<'a> = dyn Fn(usize, usize, &DMatrix<f64>) -> DMatrix<f64> + Sync + 'a;

/// Check `⟨P x, x⟩ + σ = ⟨ξ x(T), x(T)⟩ + ∫ [⟨f(P) x, x⟩ + β 𝒵] ds − ∫ 𝒵 dW`.
///
/// `gen` holds the untilted `(A, B)`; `big_p` must come from the tilted
/// equation with the same `beta` and increments `dw`. `x` is simulated with
/// the same increments; `Θ(s) = ⟨P x, x⟩ + σ` is the regression of the
/// weighted representation `ζ_i = ρ_i ζ_{i+1} + Δt ⟨f_i x_i, x_i⟩`, with
/// `ρ_i = exp(−|β_i|² Δt / 2 + β_i·ΔW_i)`, on features of `x(s)`, or of
/// `(x(s), X̄(s))` when a `context` ensemble is given (then `basis` must
/// cover `2n` coordinates).
#[allow(clippy::too_many_arguments)]
pub fn verify_ito_formula(
    gen: &dyn LinearGenerator,
    beta: &[f64],
    dw: &BrownianIncrements,
    big_p: &BsieSolution,
    forcing: Option<&Forcing<'_>>,
    x0: &DVector<f64>,
    f: &OperatorDriver<'_>,
    xi: &[f64],
    basis: &RegressionBasis,
    context: Option<&PathEnsemble>,
) -> Result<ItoCheckResult> {
    let grid = gen.grid();
    let (n, m) = (gen.state_dim(), gen.noise_dim());
    let (n_paths, steps) = (dw.n_paths(), grid.steps());
    if dw.grid() != grid || dw.noise_dim() != m {
        return invalid("increments do not match the generator");
    }
    if beta.len() != n_paths * steps * m || xi.len() != n_paths * n * n || x0.len() != n {
        return invalid("tilt, terminal or initial data have the wrong shape");
    }
    if big_p.n_paths() != n_paths || big_p.steps() != steps {
        return invalid("P does not match the increments");
    }
    if let Some(c) = context {
        if c.n_paths() != n_paths || c.grid() != grid {
            return invalid("context ensemble does not match the increments");
        }
    }
    // states x, path-major
    let paths: Vec<Result<Vec<f64>>> = (0..n_paths)
        .into_par_iter()
        .map(|p| {
            let mut xs = Vec::with_capacity((steps + 1) * n);
            let mut x = x0.clone();
            xs.extend_from_slice(x.as_slice());
            for i in 0..steps {
                let dt = grid.dt(i);
                let a = gen.drift(p, i);
                let b = gen.noise(p, i);
                let inc = dw.get(p, i);
                let mut rhs = x.clone();
                let (g1, g2) = match forcing {
                    Some(fc) => fc(p, i, &x),
                    None => (DVector::zeros(n), DMatrix::zeros(n, m)),
                };
                rhs += g1 * dt;
                for j in 0..m {
                    rhs += (&b[j] * &x + g2.column(j)) * inc[j];
                }
                let inv = (DMatrix::identity(n, n) - a * dt)
                    .try_inverse()
                    .ok_or_else(|| Error::NumericalFailure("singular implicit matrix".into()))?;
                x = inv * rhs;
                xs.extend_from_slice(x.as_slice());
            }
            Ok(xs)
        })
        .collect();
    let mut states = Vec::with_capacity(n_paths * (steps + 1) * n);
    for r in paths {
        states.extend(r?);
    }
    let x_at = |p: usize, i: usize| {
        DVector::from_column_slice(
            &states[(p * (steps + 1) + i) * n..(p * (steps + 1) + i + 1) * n],
        )
    };
    let stride = if context.is_some() { 2 * n } else { n };
    let states_at = |i: usize| -> Vec<f64> {
        let mut out = Vec::with_capacity(n_paths * stride);
        for p in 0..n_paths {
            out.extend(x_at(p, i).iter());
            if let Some(c) = context {
                out.extend_from_slice(c.state(p, i));
            }
        }
        out
    };
    let beta_at = |p: usize, i: usize| &beta[(p * steps + i) * m..(p * steps + i + 1) * m];

    // driver values ⟨f_i x_i, x_i⟩
    let fx: Vec<f64> = (0..n_paths * steps)
        .into_par_iter()
        .map(|c| {
            let (p, i) = (c / steps, c % steps);
            let x = x_at(p, i);
            let fm = f(p, i, &big_p.at(p, i));
            (&fm * &x).dot(&x)
        })
        .collect();

    let mut zeta: Vec<f64> = (0..n_paths)
        .map(|p| {
            let x = x_at(p, steps);
            let xim = DMatrix::from_column_slice(n, n, &xi[p * n * n..(p + 1) * n * n]);
            (&xim * &x).dot(&x)
        })
        .collect();
    let mut theta_next = zeta.clone();
    let mut sigma_sq = 0.0;
    let mut resid_sq = 0.0;
    let mut theta_sq: f64 = theta_next.iter().map(|v| v * v).sum();
    let mut sigma_path = vec![0.0; steps + 1];
    let mut zcal_path = vec![0.0; steps];
    let mut beta_used = vec![0.0; steps];
    // σ at T is ⟨ξ x, x⟩ − ⟨P(T) x, x⟩
    for p in 0..n_paths {
        let x = x_at(p, steps);
        let s = theta_next[p] - (big_p.at(p, steps) * &x).dot(&x);
        sigma_sq += s * s;
        sigma_path[steps] += s / n_paths as f64;
    }
    for i in (0..steps).rev() {
        let dt = grid.dt(i);
        for p in 0..n_paths {
            let b = beta_at(p, i);
            let inc = dw.get(p, i);
            let b2: f64 = b.iter().map(|v| v * v).sum();
            let bw: f64 = b.iter().zip(inc).map(|(u, v)| u * v).sum();
            zeta[p] = (-0.5 * b2 * dt + bw).exp() * zeta[p] + dt * fx[p * steps + i];
        }
        let reg = Regressor::fit(basis, &states_at(i), stride)?;
        let theta = reg.project(&zeta);
        let cond = reg.project(&theta_next);
        let zt: Vec<f64> = (0..n_paths)
            .flat_map(|p| {
                let d = theta_next[p] - cond[p];
                dw.get(p, i)
                    .iter()
                    .map(move |w| d * w / dt)
                    .collect::<Vec<_>>()
            })
            .collect();
        let zc = reg.project_many(&zt, m);
        for p in 0..n_paths {
            let b = beta_at(p, i);
            let zp = &zc[p * m..(p + 1) * m];
            let bz: f64 = b.iter().zip(zp).map(|(u, v)| u * v).sum();
            let r = theta[p] - cond[p] - dt * (fx[p * steps + i] + bz);
            resid_sq += r * r;
            let x = x_at(p, i);
            let s = theta[p] - (big_p.at(p, i) * &x).dot(&x);
            sigma_sq += s * s;
            sigma_path[i] += s / n_paths as f64;
            zcal_path[i] += zp.iter().sum::<f64>() / n_paths as f64;
            beta_used[i] += b.iter().map(|v| v * v).sum::<f64>().sqrt() / n_paths as f64;
        }
        theta_sq += theta.iter().map(|v| v * v).sum::<f64>();
        theta_next = theta;
    }
    let cells_r = (n_paths * steps) as f64;
    let cells = (n_paths * (steps + 1)) as f64;
    Ok(ItoCheckResult {
        residual_rms: (resid_sq / cells_r).sqrt(),
        scale: (theta_sq / cells).sqrt(),
        sigma_rms: (sigma_sq / cells).sqrt(),
        sigma_path,
        zcal_path,
        beta_used,
    })
}

/// Mean over steps of the path-RMS of `‖P(t_{i+1}) − P(t_i)‖`.
pub fn mean_time_increment(big_p: &BsieSolution) -> f64 {
    let vals: Vec<f64> = (0..big_p.steps())
        .map(|i| {
            let d: Vec<f64> = (0..big_p.n_paths())
                .map(|p| (big_p.at(p, i + 1) - big_p.at(p, i)).norm())
                .collect();
            rms(&d)
        })
        .collect();
    vals.iter().sum::<f64>() / vals.len().max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::TimeGrid;

    #[test]
    fn identity_propagator_keeps_terminal() {
        let space = GalerkinSpace::euclidean(2, 1).unwrap();
        let fam =
            OperatorFamily::constant(DMatrix::zeros(2, 2), vec![DMatrix::zeros(2, 2)], 1.0, 1.0)
                .unwrap();
        let grid = TimeGrid::uniform(0.0, 1.0, 8).unwrap();
        let dw = BrownianIncrements::generate(&grid, 16, 1, 3).unwrap();
        let prop = Propagator::plain(&space, &fam, &dw).unwrap();
        let problem = crate::problem::FnProblem::zero(2, 1, 1);
        let ens = crate::forward::simulate_forward_with(
            &space,
            &fam,
            &problem,
            &crate::problem::ConstantPolicy(DVector::zeros(1)),
            &[0.0, 0.0],
            &dw,
            Default::default(),
        )
        .unwrap();
        let eye: Vec<f64> = (0..16)
            .flat_map(|_| DMatrix::<f64>::identity(2, 2).as_slice().to_vec())
            .collect();
        let sol = solve_bsie(
            &prop,
            &eye,
            &vec![0.0; 16 * 8],
            &vec![0.0; 16 * 8 * 4],
            &ens,
            &RegressionBasis::default_for(2),
            12,
            1e-8,
        )
        .unwrap();
        for i in 0..=8 {
            assert!((sol.at(5, i) - DMatrix::<f64>::identity(2, 2)).norm() < 1e-10);
        }
    }

    #[test]
    fn zero_data_converges_in_one_sweep() {
        let space = GalerkinSpace::euclidean(1, 1).unwrap();
        let fam = OperatorFamily::constant(
            DMatrix::from_element(1, 1, -1.0),
            vec![DMatrix::zeros(1, 1)],
            1.0,
            1.0,
        )
        .unwrap();
        let grid = TimeGrid::uniform(0.0, 1.0, 4).unwrap();
        let dw = BrownianIncrements::generate(&grid, 4, 1, 3).unwrap();
        let prop = Propagator::plain(&space, &fam, &dw).unwrap();
        let problem = crate::problem::FnProblem::zero(1, 1, 1);
        let ens = crate::forward::simulate_forward_with(
            &space,
            &fam,
            &problem,
            &crate::problem::ConstantPolicy(DVector::zeros(1)),
            &[0.0],
            &dw,
            Default::default(),
        )
        .unwrap();
        let sol = solve_bsie(
            &prop,
            &[0.0; 4],
            &[3.0; 16],
            &[0.0; 16],
            &ens,
            &RegressionBasis::default_for(1),
            12,
            1e-8,
        )
        .unwrap();
        assert_eq!(sol.picard_iters, 1);
        assert!(sol.as_slice().iter().all(|v| *v == 0.0));
    }
}

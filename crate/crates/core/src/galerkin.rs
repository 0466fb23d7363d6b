//! Finite truncation of the Gelfand triple `V ⊂ H ⊂ V*` and the operator
//! families `A(t)`, `B(t)` acting on it.
//!
//! Coordinates are taken in a spectral basis, so the triple is diagonal: the
//! dual pairing is the Euclidean inner product and `V`, `V*` differ from `H`
//! only through the weights `w_i`. Noise-facing quantities are stored with
//! `Q^{1/2}` folded in, which turns every `L₂⁰` norm into a Frobenius norm.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::rng::path_rng;

/// Retained modes of the state space and of the noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GalerkinSpace {
    n: usize,
    m: usize,
    v_weights: Vec<f64>,
    q_sqrt: Vec<f64>,
}

impl GalerkinSpace {
    pub fn new(v_weights: Vec<f64>, q_sqrt: Vec<f64>) -> Result<Self> {
        if v_weights.is_empty() || q_sqrt.is_empty() {
            return invalid("state and noise dimensions must be at least 1");
        }
        if v_weights.iter().any(|w| !(w.is_finite() && *w >= 1.0)) {
            return invalid("V-weights must be finite and >= 1");
        }
        if q_sqrt.iter().any(|q| !(q.is_finite() && *q >= 0.0)) {
            return invalid("covariance square-root entries must be finite and >= 0");
        }
        Ok(Self {
            n: v_weights.len(),
            m: q_sqrt.len(),
            v_weights,
            q_sqrt,
        })
    }

    /// `H = V = R^n` with unit weights and identity covariance.
    pub fn euclidean(n: usize, m: usize) -> Result<Self> {
        Self::new(vec![1.0; n], vec![1.0; m])
    }

    pub fn state_dim(&self) -> usize {
        self.n
    }

    pub fn noise_dim(&self) -> usize {
        self.m
    }

    pub fn v_weights(&self) -> &[f64] {
        &self.v_weights
    }

    pub fn q_sqrt(&self) -> &[f64] {
        &self.q_sqrt
    }

    pub fn norm_h_sq(&self, u: &[f64]) -> f64 {
        u.iter().map(|x| x * x).sum()
    }

    pub fn norm_v_sq(&self, u: &[f64]) -> f64 {
        u.iter().zip(&self.v_weights).map(|(x, w)| w * x * x).sum()
    }

    pub fn norm_vstar_sq(&self, u: &[f64]) -> f64 {
        u.iter().zip(&self.v_weights).map(|(x, w)| x * x / w).sum()
    }

    pub fn norm_h(&self, u: &[f64]) -> f64 {
        self.norm_h_sq(u).sqrt()
    }

    pub fn norm_v(&self, u: &[f64]) -> f64 {
        self.norm_v_sq(u).sqrt()
    }

    pub fn norm_vstar(&self, u: &[f64]) -> f64 {
        self.norm_vstar_sq(u).sqrt()
    }
}

type DriftFn = dyn Fn(f64) -> DMatrix<f64> + Send + Sync;
type NoiseFn = dyn Fn(f64) -> Vec<DMatrix<f64>> + Send + Sync;

/// Time-dependent `A(t)` (read against the dual pairing) and
/// `B(t) = (B_1(t), ..., B_m(t))`, where column `j` of `B(t)u` is `B_j(t)u`.
///
/// `B_j` are stored in raw noise coordinates; [`OperatorFamily::noise_absorbed`]
/// returns `q_j · B_j`.
#[derive(Clone)]
pub struct OperatorFamily {
    n: usize,
    m: usize,
    drift: Arc<DriftFn>,
    noise: Arc<NoiseFn>,
    constant: bool,
    /// Coercivity margin δ.
    pub delta: f64,
    /// Constant K of the coercivity and quasi-skew-symmetry inequalities.
    pub k_bound: f64,
    /// Constant in `‖A(t)u‖_{V*} ≤ c ‖u‖_V`.
    pub dual_bound: f64,
    pub deterministic: bool,
}

impl fmt::Debug for OperatorFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("OperatorFamily")
            .field("n", &self.n)
            .field("m", &self.m)
            .field("constant", &self.constant)
            .field("delta", &self.delta)
            .field("k_bound", &self.k_bound)
            .field("dual_bound", &self.dual_bound)
            .finish()
    }
}

impl OperatorFamily {
    pub fn constant(
        a: DMatrix<f64>,
        b: Vec<DMatrix<f64>>,
        delta: f64,
        k_bound: f64,
    ) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n || n == 0 {
            return invalid("A must be a nonempty square matrix");
        }
        if b.is_empty() {
            return invalid("B needs at least one noise component");
        }
        if b.iter().any(|bj| bj.nrows() != n || bj.ncols() != n) {
            return invalid("each B_j must be n x n");
        }
        if a.iter()
            .chain(b.iter().flat_map(|bj| bj.iter()))
            .any(|v| !v.is_finite())
        {
            return invalid("operator entries must be finite");
        }
        Self::check_constants(delta, k_bound)?;
        let m = b.len();
        Ok(Self {
            n,
            m,
            drift: Arc::new(move |_| a.clone()),
            noise: Arc::new(move |_| b.clone()),
            constant: true,
            delta,
            k_bound,
            dual_bound: k_bound,
            deterministic: true,
        })
    }

    pub fn time_dependent(
        n: usize,
        m: usize,
        drift: impl Fn(f64) -> DMatrix<f64> + Send + Sync + 'static,
        noise: impl Fn(f64) -> Vec<DMatrix<f64>> + Send + Sync + 'static,
        delta: f64,
        k_bound: f64,
    ) -> Result<Self> {
        if n == 0 || m == 0 {
            return invalid("operator family dimensions must be positive");
        }
        Self::check_constants(delta, k_bound)?;
        Ok(Self {
            n,
            m,
            drift: Arc::new(drift),
            noise: Arc::new(noise),
            constant: false,
            delta,
            k_bound,
            dual_bound: k_bound,
            deterministic: true,
        })
    }

    fn check_constants(delta: f64, k_bound: f64) -> Result<()> {
        if !(delta > 0.0 && delta.is_finite()) {
            return invalid(format!("coercivity margin must be positive, got {delta}"));
        }
        if !(k_bound >= 0.0 && k_bound.is_finite()) {
            return invalid(format!("K must be nonnegative, got {k_bound}"));
        }
        Ok(())
    }

    pub fn with_dual_bound(mut self, c: f64) -> Self {
        self.dual_bound = c;
        self
    }

    pub fn state_dim(&self) -> usize {
        self.n
    }

    pub fn noise_dim(&self) -> usize {
        self.m
    }

    pub fn is_constant(&self) -> bool {
        self.constant
    }

    pub fn drift(&self, t: f64) -> DMatrix<f64> {
        (self.drift)(t)
    }

    pub fn noise(&self, t: f64) -> Vec<DMatrix<f64>> {
        (self.noise)(t)
    }

    /// `q_j · B_j(t)`.
    pub fn noise_absorbed(&self, t: f64, space: &GalerkinSpace) -> Vec<DMatrix<f64>> {
        self.noise(t)
            .into_iter()
            .zip(space.q_sqrt())
            .map(|(bj, q)| bj * *q)
            .collect()
    }

    /// Same family with `B` replaced.
    pub fn with_noise(&self, b: Vec<DMatrix<f64>>) -> Result<Self> {
        if b.len() != self.m
            || b.iter()
                .any(|bj| bj.nrows() != self.n || bj.ncols() != self.n)
        {
            return invalid("replacement B has the wrong shape");
        }
        let mut out = self.clone();
        out.noise = Arc::new(move |_| b.clone());
        Ok(out)
    }
}

/// Outcome of sampling the coercivity and quasi-skew inequalities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoercivityReport {
    pub n_samples: usize,
    pub worst_coercivity_slack: Option<f64>,
    pub worst_dualnorm_slack: Option<f64>,
    pub worst_skew_slack: Option<f64>,
    pub violations: usize,
    pub tolerance: f64,
    pub pass: bool,
}

impl CoercivityReport {
    fn finish(mut self) -> Self {
        let tol = self.tolerance;
        self.pass = [
            self.worst_coercivity_slack,
            self.worst_dualnorm_slack,
            self.worst_skew_slack,
        ]
        .iter()
        .flatten()
        .all(|s| *s >= -tol);
        self
    }

    /// Combine a coercivity report with a quasi-skew report.
    pub fn merge(&self, other: &CoercivityReport) -> CoercivityReport {
        CoercivityReport {
            n_samples: self.n_samples.max(other.n_samples),
            worst_coercivity_slack: self.worst_coercivity_slack.or(other.worst_coercivity_slack),
            worst_dualnorm_slack: self.worst_dualnorm_slack.or(other.worst_dualnorm_slack),
            worst_skew_slack: self.worst_skew_slack.or(other.worst_skew_slack),
            violations: self.violations + other.violations,
            tolerance: self.tolerance.max(other.tolerance),
            pass: false,
        }
        .finish()
    }
}

/// Default tolerance on sampled slacks.
pub const SLACK_TOLERANCE: f64 = 1e-10;

/// Sine eigenbasis of the Dirichlet Laplacian on `(0, L)`.
///
/// `A = diag(-(iπ/L)²)`, `w_i = 1 + (iπ/L)²`, `B ≡ 0`,
/// `q_j = (1 + j)^(-q_decay)` for zero-based `j`.
pub fn make_laplacian_space(
    n: usize,
    m: usize,
    domain_length: f64,
    q_decay: f64,
) -> Result<(GalerkinSpace, OperatorFamily)> {
    if n == 0 || m == 0 {
        return invalid("need n >= 1 and m >= 1");
    }
    if !(domain_length > 0.0 && domain_length.is_finite()) {
        return invalid(format!(
            "domain length must be positive, got {domain_length}"
        ));
    }
    if !(q_decay >= 0.0 && q_decay.is_finite()) {
        return invalid(format!("noise decay must be nonnegative, got {q_decay}"));
    }
    let eig: Vec<f64> = (1..=n)
        .map(|i| (i as f64 * PI / domain_length).powi(2))
        .collect();
    let weights: Vec<f64> = eig.iter().map(|l| 1.0 + l).collect();
    let q_sqrt: Vec<f64> = (0..m).map(|j| (1.0 + j as f64).powf(-q_decay)).collect();
    let space = GalerkinSpace::new(weights, q_sqrt)?;

    // 2<Au,u> = -2 Σ λ_i u_i², and -δ‖u‖_V² + K‖u‖² = Σ (K - 1 - λ_i) u_i² at δ = 1,
    // so K = max(0, 1 - λ_1) suffices; ‖Au‖_{V*}² = Σ λ_i²/(1+λ_i) u_i² ≤ ‖u‖_V².
    let k_bound = (1.0 - eig[0]).max(0.0);
    let a = DMatrix::from_diagonal(&DVector::from_iterator(n, eig.iter().map(|l| -l)));
    let b = vec![DMatrix::zeros(n, n); m];
    let fam = OperatorFamily::constant(a, b, 1.0, k_bound)?.with_dual_bound(1.0);
    Ok((space, fam))
}

/// Galerkin matrix of `∂_ζ` in the normalised sine basis of `(0, L)`.
/// Skew-symmetric; entry `(j, i)` is `(2ij/L)(1 - (-1)^{i+j})/(j² - i²)`.
pub fn first_order_operator(n: usize, domain_length: f64) -> DMatrix<f64> {
    DMatrix::from_fn(n, n, |r, c| {
        let (j, i) = ((r + 1) as f64, (c + 1) as f64);
        if (r + c) % 2 == 0 {
            0.0
        } else {
            2.0 * i * j / domain_length * 2.0 / (j * j - i * i)
        }
    })
}

fn unit_samples(n: usize, n_samples: usize, seed: u64) -> Vec<Vec<f64>> {
    (0..n_samples)
        .map(|s| {
            let mut rng = path_rng(seed, s);
            loop {
                let u: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
                let norm = u.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm > 1e-12 {
                    return u.into_iter().map(|x| x / norm).collect();
                }
            }
        })
        .collect()
}

fn check_shapes(
    fam: &OperatorFamily,
    space: &GalerkinSpace,
    t_grid: &[f64],
    n_samples: usize,
) -> Result<()> {
    if t_grid.is_empty() {
        return invalid("time grid for the coercivity check is empty");
    }
    if n_samples == 0 {
        return invalid("need at least one sample");
    }
    if fam.state_dim() != space.state_dim() || fam.noise_dim() != space.noise_dim() {
        return invalid("operator family and space dimensions differ");
    }
    Ok(())
}

/// Sample the coercivity inequality and the dual-norm bound on random unit
/// vectors at every time in `t_grid`.
pub fn check_coercivity(
    fam: &OperatorFamily,
    space: &GalerkinSpace,
    t_grid: &[f64],
    n_samples: usize,
    seed: u64,
) -> Result<CoercivityReport> {
    check_shapes(fam, space, t_grid, n_samples)?;
    let samples = unit_samples(space.state_dim(), n_samples, seed);
    let mut worst1 = f64::INFINITY;
    let mut worst2 = f64::INFINITY;
    let mut violations = 0;
    for &t in t_grid {
        let a = fam.drift(t);
        let b = fam.noise_absorbed(t, space);
        for u in &samples {
            let uv = DVector::from_column_slice(u);
            let au = &a * &uv;
            let b_sq: f64 = b.iter().map(|bj| (bj * &uv).norm_squared()).sum();
            let lhs = 2.0 * au.dot(&uv) + b_sq;
            let rhs = -fam.delta * space.norm_v_sq(u) + fam.k_bound * space.norm_h_sq(u);
            let s1 = rhs - lhs;
            let s2 = fam.dual_bound * space.norm_v(u) - space.norm_vstar(au.as_slice());
            if s1 < -SLACK_TOLERANCE || s2 < -SLACK_TOLERANCE {
                violations += 1;
            }
            worst1 = worst1.min(s1);
            worst2 = worst2.min(s2);
        }
    }
    Ok(CoercivityReport {
        n_samples,
        worst_coercivity_slack: Some(worst1),
        worst_dualnorm_slack: Some(worst2),
        worst_skew_slack: None,
        violations,
        tolerance: SLACK_TOLERANCE,
        pass: false,
    }
    .finish())
}

/// Sample the quasi-skew-symmetry inequality
/// `‖(q_j ⟨B_j u, u⟩)_j‖ ≤ K ‖u‖_H²`.
pub fn check_quasi_skew(
    fam: &OperatorFamily,
    space: &GalerkinSpace,
    t_grid: &[f64],
    n_samples: usize,
    seed: u64,
) -> Result<CoercivityReport> {
    check_shapes(fam, space, t_grid, n_samples)?;
    let samples = unit_samples(space.state_dim(), n_samples, seed);
    let mut worst = f64::INFINITY;
    let mut violations = 0;
    for &t in t_grid {
        let b = fam.noise_absorbed(t, space);
        for u in &samples {
            let uv = DVector::from_column_slice(u);
            let pairing: f64 = b
                .iter()
                .map(|bj| (bj * &uv).dot(&uv).powi(2))
                .sum::<f64>()
                .sqrt();
            let s = fam.k_bound * space.norm_h_sq(u) - pairing;
            if s < -SLACK_TOLERANCE {
                violations += 1;
            }
            worst = worst.min(s);
        }
    }
    Ok(CoercivityReport {
        n_samples,
        worst_coercivity_slack: None,
        worst_dualnorm_slack: None,
        worst_skew_slack: Some(worst),
        violations,
        tolerance: SLACK_TOLERANCE,
        pass: false,
    }
    .finish())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn laplacian_single_mode() {
        let (space, fam) = make_laplacian_space(1, 1, 1.0, 0.0).unwrap();
        assert!((space.v_weights()[0] - (1.0 + PI * PI)).abs() < 1e-12);
        assert!((space.v_weights()[0] - 10.8696).abs() < 1e-4);
        assert!((fam.drift(0.0)[(0, 0)] + PI * PI).abs() < 1e-12);
    }

    #[test]
    fn basis_vector_coercivity_slack() {
        let (space, fam) = make_laplacian_space(2, 1, 1.0, 0.0).unwrap();
        assert_eq!(fam.delta, 1.0);
        assert_eq!(fam.k_bound, 0.0);
        let u = DVector::from_vec(vec![1.0, 0.0]);
        let lhs = 2.0 * (fam.drift(0.0) * &u).dot(&u);
        assert!((lhs + 2.0 * PI * PI).abs() < 1e-12);
        let rhs = -space.norm_v_sq(u.as_slice());
        assert!((rhs + 1.0 + PI * PI).abs() < 1e-12);
        assert!(rhs - lhs >= 0.0);
    }

    #[test]
    fn decay_free_covariance_is_identity() {
        let (space, _) = make_laplacian_space(3, 4, 2.0, 0.0).unwrap();
        assert_eq!(space.q_sqrt(), &[1.0; 4]);
        let (space, _) = make_laplacian_space(3, 3, 2.0, 1.0).unwrap();
        assert_eq!(space.q_sqrt(), &[1.0, 0.5, 1.0 / 3.0]);
    }

    #[test]
    fn rejects_bad_dimensions() {
        assert!(make_laplacian_space(0, 1, 1.0, 0.0).is_err());
        assert!(make_laplacian_space(1, 0, 1.0, 0.0).is_err());
        assert!(make_laplacian_space(1, 1, 0.0, 0.0).is_err());
        assert!(make_laplacian_space(1, 1, -1.0, 0.0).is_err());
    }

    #[test]
    fn heat_family_passes() {
        let (space, fam) = make_laplacian_space(6, 2, 1.0, 1.0).unwrap();
        let r = check_coercivity(&fam, &space, &[0.0, 0.5, 1.0], 500, 3).unwrap();
        assert!(r.pass, "{r:?}");
        assert_eq!(r.violations, 0);
        let s = check_quasi_skew(&fam, &space, &[0.0], 500, 3).unwrap();
        assert!(s.pass);
        assert!(r.merge(&s).pass);
    }

    #[test]
    fn zero_operator_fails_coercivity() {
        let space = GalerkinSpace::euclidean(3, 1).unwrap();
        let fam =
            OperatorFamily::constant(DMatrix::zeros(3, 3), vec![DMatrix::zeros(3, 3)], 1.0, 0.0)
                .unwrap();
        let r = check_coercivity(&fam, &space, &[0.0], 50, 1).unwrap();
        assert!(!r.pass);
        assert!(r.worst_coercivity_slack.unwrap() < 0.0);
    }

    #[test]
    fn tiny_delta_with_unit_k_passes() {
        let (space, _) = make_laplacian_space(4, 1, 1.0, 0.0).unwrap();
        let fam =
            OperatorFamily::constant(DMatrix::zeros(4, 4), vec![DMatrix::zeros(4, 4)], 1e-12, 1.0)
                .unwrap();
        let r = check_coercivity(&fam, &space, &[0.0], 200, 1).unwrap();
        assert!(r.pass, "{r:?}");
    }

    #[test]
    fn empty_time_grid_rejected() {
        let (space, fam) = make_laplacian_space(2, 1, 1.0, 0.0).unwrap();
        assert!(check_coercivity(&fam, &space, &[], 10, 0).is_err());
        assert!(check_quasi_skew(&fam, &space, &[], 10, 0).is_err());
    }

    #[test]
    fn skew_noise_passes_quasi_skew_with_zero_k() {
        let space = GalerkinSpace::euclidean(4, 1).unwrap();
        let d = first_order_operator(4, 1.0);
        assert!((&d + d.transpose()).norm() < 1e-12);
        let fam = OperatorFamily::constant(DMatrix::zeros(4, 4), vec![d], 1.0, 0.0).unwrap();
        assert!(check_quasi_skew(&fam, &space, &[0.0], 200, 2).unwrap().pass);
    }

    #[test]
    fn identity_noise_fails_quasi_skew() {
        let space = GalerkinSpace::euclidean(2, 1).unwrap();
        let fam = OperatorFamily::constant(
            DMatrix::zeros(2, 2),
            vec![DMatrix::identity(2, 2)],
            1.0,
            0.5,
        )
        .unwrap();
        let r = check_quasi_skew(&fam, &space, &[0.0], 20, 2).unwrap();
        assert!(!r.pass);
        assert!((r.worst_skew_slack.unwrap() + 0.5).abs() < 1e-12);
    }

    #[test]
    fn zero_noise_skew_slack_is_k() {
        let (space, fam) = make_laplacian_space(3, 2, 1.0, 0.0).unwrap();
        let fam = OperatorFamily::constant(fam.drift(0.0), fam.noise(0.0), 1.0, 0.3).unwrap();
        let r = check_quasi_skew(&fam, &space, &[0.0], 20, 2).unwrap();
        assert!((r.worst_skew_slack.unwrap() - 0.3).abs() < 1e-12);
    }
}

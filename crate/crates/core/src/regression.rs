//! Least-squares conditional expectations.
//!
//! `E[Y | F_{t_i}]` is approximated by projecting path-wise targets onto
//! polynomial features of the state at `t_i`. Features are centred and
//! standardised, and the intercept is not penalised, so constant targets are
//! reproduced exactly and degenerate (identical) states yield the sample mean.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Polynomials of total degree `<= degree` in the first `n_feat` coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionBasis {
    n_feat: usize,
    degree: usize,
    ridge: f64,
    /// Exponent vectors of the non-constant monomials.
    monomials: Vec<Vec<u32>>,
}

impl RegressionBasis {
    pub fn new(n_feat: usize, degree: usize, ridge: f64) -> Result<Self> {
        if !(ridge >= 0.0 && ridge.is_finite()) {
            return invalid(format!("ridge must be >= 0, got {ridge}"));
        }
        let mut monomials = Vec::new();
        for d in 1..=degree {
            let mut exps = vec![0u32; n_feat];
            enumerate_degree(n_feat, d as u32, 0, &mut exps, &mut monomials);
        }
        Ok(Self {
            n_feat,
            degree,
            ridge,
            monomials,
        })
    }

    /// Degree-2 polynomials over all `n` coordinates with ridge `1e-8`.
    pub fn default_for(n: usize) -> Self {
        Self::new(n, 2, 1e-8).expect("valid default basis")
    }

    pub fn n_feat(&self) -> usize {
        self.n_feat
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn ridge(&self) -> f64 {
        self.ridge
    }

    /// Number of features including the constant.
    pub fn feature_count(&self) -> usize {
        self.monomials.len() + 1
    }

    /// Non-constant features of `x`.
    pub fn features_into(&self, x: &[f64], out: &mut [f64]) {
        debug_assert!(x.len() >= self.n_feat);
        for (o, e) in out.iter_mut().zip(&self.monomials) {
            *o = e
                .iter()
                .zip(x)
                .filter(|(p, _)| **p > 0)
                .map(|(p, v)| v.powi(*p as i32))
                .product();
        }
    }

    pub fn features(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.feature_count()];
        out[0] = 1.0;
        self.features_into(x, &mut out[1..]);
        out
    }
}

fn enumerate_degree(n: usize, left: u32, pos: usize, exps: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
    if pos + 1 == n || n == 0 {
        if n > 0 {
            exps[pos] = left;
            out.push(exps.clone());
            exps[pos] = 0;
        }
        return;
    }
    for e in (0..=left).rev() {
        exps[pos] = e;
        enumerate_degree(n, left - e, pos + 1, exps, out);
    }
    exps[pos] = 0;
}

/// Factorised design at one time step.
#[derive(Debug, Clone)]
pub struct Regressor {
    n_paths: usize,
    p: usize,
    /// Standardised non-constant features, row-major `n_paths × p`.
    design: Vec<f64>,
    chol: Option<Cholesky<f64, Dyn>>,
}

impl Regressor {
    /// Build from `n_paths` state rows of length `stride` stored contiguously.
    pub fn fit(basis: &RegressionBasis, states: &[f64], stride: usize) -> Result<Self> {
        if stride < basis.n_feat() {
            return invalid("state dimension smaller than the basis feature dimension");
        }
        let n_paths = states.len() / stride;
        if n_paths == 0 {
            return invalid("regression needs at least one path");
        }
        let p = basis.feature_count() - 1;
        let mut design = vec![0.0; n_paths * p];
        for (row, x) in design.chunks_mut(p.max(1)).zip(states.chunks(stride)) {
            if p > 0 {
                basis.features_into(x, row);
            }
        }
        if p == 0 {
            return Ok(Self {
                n_paths,
                p,
                design,
                chol: None,
            });
        }
        let inv_n = 1.0 / n_paths as f64;
        let mut mean = vec![0.0; p];
        for row in design.chunks(p) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m *= inv_n);
        let mut var = vec![0.0; p];
        for row in design.chunks_mut(p) {
            for ((v, m), s) in row.iter_mut().zip(&mean).zip(var.iter_mut()) {
                *v -= m;
                *s += *v * *v;
            }
        }
        let scale: Vec<f64> = var
            .iter()
            .map(|s| {
                let sd = (s * inv_n).sqrt();
                if sd > 1e-300 {
                    1.0 / sd
                } else {
                    0.0
                }
            })
            .collect();
        for row in design.chunks_mut(p) {
            for (v, s) in row.iter_mut().zip(&scale) {
                *v *= s;
            }
        }
        let mut gram = DMatrix::<f64>::zeros(p, p);
        for row in design.chunks(p) {
            for a in 0..p {
                let ra = row[a];
                if ra == 0.0 {
                    continue;
                }
                for b in a..p {
                    gram[(a, b)] += ra * row[b];
                }
            }
        }
        for a in 0..p {
            for b in a..p {
                let v = gram[(a, b)] * inv_n;
                gram[(a, b)] = v;
                gram[(b, a)] = v;
            }
        }
        let ridge = basis.ridge();
        if ridge == 0.0 {
            // standardised columns have unit diagonal unless degenerate
            let pivots_ok = gram.diagonal().iter().all(|d| *d > 0.5);
            let chol = Cholesky::new(gram.clone());
            let well_posed = pivots_ok
                && chol
                    .as_ref()
                    .map(|c| c.l().diagonal().iter().all(|l| l * l > 1e-12))
                    .unwrap_or(false);
            if !well_posed {
                return Err(Error::NumericalFailure(
                    "rank-deficient normal equations; use a ridge weight > 0".into(),
                ));
            }
            return Ok(Self {
                n_paths,
                p,
                design,
                chol,
            });
        }
        for a in 0..p {
            gram[(a, a)] += ridge;
        }
        let chol = Cholesky::new(gram).ok_or_else(|| {
            Error::NumericalFailure("regularised normal equations are not positive definite".into())
        })?;
        Ok(Self {
            n_paths,
            p,
            design,
            chol: Some(chol),
        })
    }

    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    /// Fitted values of one target (length `n_paths`).
    pub fn project(&self, target: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n_paths];
        self.project_into(target, &mut out);
        out
    }

    pub fn project_into(&self, target: &[f64], out: &mut [f64]) {
        assert_eq!(target.len(), self.n_paths);
        let mean = target.iter().sum::<f64>() / self.n_paths as f64;
        let Some(chol) = &self.chol else {
            out.iter_mut().for_each(|o| *o = mean);
            return;
        };
        let p = self.p;
        let mut rhs = DVector::<f64>::zeros(p);
        for (row, y) in self.design.chunks(p).zip(target) {
            let yc = y - mean;
            for (r, v) in rhs.iter_mut().zip(row) {
                *r += v * yc;
            }
        }
        rhs /= self.n_paths as f64;
        let beta = chol.solve(&rhs);
        for (o, row) in out.iter_mut().zip(self.design.chunks(p)) {
            *o = mean + row.iter().zip(beta.iter()).map(|(a, b)| a * b).sum::<f64>();
        }
    }

    /// Project `k` interleaved targets stored as `n_paths × k` row-major.
    pub fn project_many(&self, targets: &[f64], k: usize) -> Vec<f64> {
        assert_eq!(targets.len(), self.n_paths * k);
        let mut out = vec![0.0; targets.len()];
        let mut col = vec![0.0; self.n_paths];
        let mut fit = vec![0.0; self.n_paths];
        for c in 0..k {
            for (dst, row) in col.iter_mut().zip(targets.chunks(k)) {
                *dst = row[c];
            }
            self.project_into(&col, &mut fit);
            for (row, v) in out.chunks_mut(k).zip(&fit) {
                row[c] = *v;
            }
        }
        out
    }
}

/// Standard error of a fitted conditional mean: residual RMS over `sqrt(N)`.
pub fn residual_se(target: &[f64], fitted: &[f64]) -> f64 {
    let n = target.len().max(1) as f64;
    let ss: f64 = target
        .iter()
        .zip(fitted)
        .map(|(a, b)| (a - b).powi(2))
        .sum();
    (ss / n).sqrt() / n.sqrt()
}

/// Mean and standard error of a sample.
pub fn mean_se(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;

    fn binom(n: usize, k: usize) -> usize {
        (0..k).fold(1, |acc, i| acc * (n - i) / (i + 1))
    }

    #[test]
    fn feature_count_matches_binomial() {
        for n in 1..5 {
            for d in 0..4 {
                let b = RegressionBasis::new(n, d, 0.0).unwrap();
                assert_eq!(b.feature_count(), binom(n + d, d), "n={n} d={d}");
            }
        }
    }

    #[test]
    fn reproduces_polynomial_targets_exactly() {
        let basis = RegressionBasis::new(2, 2, 0.0).unwrap();
        let states: Vec<f64> = (0..200)
            .flat_map(|i| {
                let a = (i as f64 * 0.37).sin();
                let b = (i as f64 * 0.11).cos();
                [a, b]
            })
            .collect();
        let target: Vec<f64> = states
            .chunks(2)
            .map(|x| 1.5 - 2.0 * x[0] + 0.5 * x[1] * x[0] + 3.0 * x[1] * x[1])
            .collect();
        let r = Regressor::fit(&basis, &states, 2).unwrap();
        let fit = r.project(&target);
        for (a, b) in fit.iter().zip(&target) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn matches_svd_least_squares() {
        // oracle: plain least squares on the raw design via SVD
        let basis = RegressionBasis::new(1, 3, 0.0).unwrap();
        let xs: Vec<f64> = (0..50).map(|i| -1.0 + 0.04 * i as f64).collect();
        let ys: Vec<f64> = xs.iter().map(|x| (3.0 * x).sin()).collect();
        let design = DMatrix::from_fn(xs.len(), 4, |r, c| xs[r].powi(c as i32));
        let svd = design.clone().svd(true, true);
        let beta = svd.solve(&DVector::from_vec(ys.clone()), 1e-14).unwrap();
        let oracle = &design * beta;
        let fit = Regressor::fit(&basis, &xs, 1).unwrap().project(&ys);
        for (a, b) in fit.iter().zip(oracle.iter()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn constant_target_and_degenerate_states() {
        let basis = RegressionBasis::default_for(2);
        let states = vec![0.3, -0.7].repeat(100);
        let r = Regressor::fit(&basis, &states, 2).unwrap();
        let target: Vec<f64> = (0..100).map(|i| i as f64).collect();
        let fit = r.project(&target);
        assert!(fit.iter().all(|v| (v - 49.5).abs() < 1e-12));
        let c = r.project(&vec![2.5; 100]);
        assert!(c.iter().all(|v| *v == 2.5));
    }

    #[test]
    fn rank_deficient_without_ridge_fails() {
        let basis = RegressionBasis::new(2, 1, 0.0).unwrap();
        let states = vec![0.3, -0.7].repeat(10);
        match Regressor::fit(&basis, &states, 2) {
            Err(Error::NumericalFailure(msg)) => assert!(msg.contains("ridge")),
            other => panic!("expected numerical failure, got {other:?}"),
        }
    }

    #[test]
    fn project_many_matches_single() {
        let basis = RegressionBasis::default_for(1);
        let xs: Vec<f64> = (0..40).map(|i| i as f64 / 40.0).collect();
        let t: Vec<f64> = xs.iter().flat_map(|x| [x * x, 1.0 - x]).collect();
        let r = Regressor::fit(&basis, &xs, 1).unwrap();
        let many = r.project_many(&t, 2);
        let first = r.project(&t.iter().step_by(2).copied().collect::<Vec<_>>());
        for (i, v) in first.iter().enumerate() {
            assert!((many[2 * i] - v).abs() < 1e-12);
        }
    }
}

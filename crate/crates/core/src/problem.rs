//! Control problems and control policies.
//!
//! A problem supplies the nonlinear coefficients `a`, `b`, the generator `k`
//! of the recursive utility and the terminal cost `h`, together with their
//! derivatives in the state (and in `(x, y, z)` for `k`). Diffusion values and
//! their derivatives are given in `Q^{1/2}`-absorbed noise coordinates.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

/// A point of the control set.
pub type Control = DVector<f64>;

/// Gradient of the generator with respect to `(x, y, z)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorGradient {
    pub x: DVector<f64>,
    pub y: f64,
    pub z: DVector<f64>,
}

impl GeneratorGradient {
    pub fn zeros(n: usize, m: usize) -> Self {
        Self {
            x: DVector::zeros(n),
            y: 0.0,
            z: DVector::zeros(m),
        }
    }
}

pub trait ControlProblem: Send + Sync {
    fn state_dim(&self) -> usize;
    fn noise_dim(&self) -> usize;
    fn control_dim(&self) -> usize;

    /// `a(t, x, u)`, an `n`-vector.
    fn drift(&self, t: f64, x: &DVector<f64>, u: &Control) -> DVector<f64>;
    /// `b(t, x, u)`, an `n × m` matrix.
    fn diffusion(&self, t: f64, x: &DVector<f64>, u: &Control) -> DMatrix<f64>;
    /// `k(t, x, y, z, u)` with `z` an `m`-vector.
    fn generator(&self, t: f64, x: &DVector<f64>, y: f64, z: &DVector<f64>, u: &Control) -> f64;
    fn terminal(&self, x: &DVector<f64>) -> f64;

    /// `a_x`, `n × n`.
    fn drift_x(&self, t: f64, x: &DVector<f64>, u: &Control) -> DMatrix<f64>;
    /// `∂_x` of column `j` of `b`, one `n × n` matrix per noise component.
    fn diffusion_x(&self, t: f64, x: &DVector<f64>, u: &Control) -> Vec<DMatrix<f64>>;
    fn generator_grad(
        &self,
        t: f64,
        x: &DVector<f64>,
        y: f64,
        z: &DVector<f64>,
        u: &Control,
    ) -> GeneratorGradient;
    fn terminal_grad(&self, x: &DVector<f64>) -> DVector<f64>;

    /// Hessian of each drift component: `result[k]` is `∂²a_k/∂x²`.
    fn drift_xx(&self, _t: f64, _x: &DVector<f64>, _u: &Control) -> Option<Vec<DMatrix<f64>>> {
        None
    }
    /// `result[j][k]` is the Hessian of entry `(k, j)` of `b`.
    fn diffusion_xx(
        &self,
        _t: f64,
        _x: &DVector<f64>,
        _u: &Control,
    ) -> Option<Vec<Vec<DMatrix<f64>>>> {
        None
    }
    /// Hessian of `k` in `(x, y, z)`, ordered `x_1..x_n, y, z_1..z_m`.
    fn generator_hessian(
        &self,
        _t: f64,
        _x: &DVector<f64>,
        _y: f64,
        _z: &DVector<f64>,
        _u: &Control,
    ) -> Option<DMatrix<f64>> {
        None
    }
    fn terminal_hessian(&self, _x: &DVector<f64>) -> Option<DMatrix<f64>> {
        None
    }
}

/// Maps `(step, t, state, path)` to a control value.
pub trait Policy: Send + Sync {
    fn control(&self, step: usize, t: f64, x: &DVector<f64>, path: usize) -> Control;
}

/// The same control everywhere.
#[derive(Debug, Clone)]
pub struct ConstantPolicy(pub Control);

impl Policy for ConstantPolicy {
    fn control(&self, _: usize, _: f64, _: &DVector<f64>, _: usize) -> Control {
        self.0.clone()
    }
}

/// Piecewise-constant open-loop control on `S` equal intervals of `[start, end]`.
#[derive(Debug, Clone)]
pub struct PiecewiseConstantPolicy {
    values: Vec<Control>,
    start: f64,
    end: f64,
}

impl PiecewiseConstantPolicy {
    pub fn new(values: Vec<Control>, start: f64, end: f64) -> Self {
        assert!(!values.is_empty() && end > start);
        Self { values, start, end }
    }

    pub fn values(&self) -> &[Control] {
        &self.values
    }
}

impl Policy for PiecewiseConstantPolicy {
    fn control(&self, _: usize, t: f64, _: &DVector<f64>, _: usize) -> Control {
        let s = self.values.len();
        let frac = ((t - self.start) / (self.end - self.start)).clamp(0.0, 1.0);
        // intervals are closed on the left
        let idx = ((frac * s as f64 + 1e-9).floor() as usize).min(s - 1);
        self.values[idx].clone()
    }
}

/// State-feedback policy backed by a closure.
#[derive(Clone)]
pub struct FeedbackPolicy {
    f: Arc<dyn Fn(f64, &DVector<f64>) -> Control + Send + Sync>,
}

impl FeedbackPolicy {
    pub fn new(f: impl Fn(f64, &DVector<f64>) -> Control + Send + Sync + 'static) -> Self {
        Self { f: Arc::new(f) }
    }
}

impl Policy for FeedbackPolicy {
    fn control(&self, _: usize, t: f64, x: &DVector<f64>, _: usize) -> Control {
        (self.f)(t, x)
    }
}

type Scalar3 = dyn Fn(f64, &DVector<f64>, &Control) -> DVector<f64> + Send + Sync;
type Matrix3 = dyn Fn(f64, &DVector<f64>, &Control) -> DMatrix<f64> + Send + Sync;
type MatrixList3 = dyn Fn(f64, &DVector<f64>, &Control) -> Vec<DMatrix<f64>> + Send + Sync;
type MatrixGrid3 = dyn Fn(f64, &DVector<f64>, &Control) -> Vec<Vec<DMatrix<f64>>> + Send + Sync;
type GenFn = dyn Fn(f64, &DVector<f64>, f64, &DVector<f64>, &Control) -> f64 + Send + Sync;
type GenGradFn =
    dyn Fn(f64, &DVector<f64>, f64, &DVector<f64>, &Control) -> GeneratorGradient + Send + Sync;
type GenHessFn =
    dyn Fn(f64, &DVector<f64>, f64, &DVector<f64>, &Control) -> DMatrix<f64> + Send + Sync;

/// Problem assembled from closures. Every coefficient defaults to zero
/// (with zero derivatives), so only the nonzero parts need to be supplied.
#[derive(Clone)]
pub struct FnProblem {
    n: usize,
    m: usize,
    du: usize,
    drift: Arc<Scalar3>,
    drift_x: Arc<Matrix3>,
    drift_xx: Arc<MatrixList3>,
    diffusion: Arc<Matrix3>,
    diffusion_x: Arc<MatrixList3>,
    diffusion_xx: Arc<MatrixGrid3>,
    generator: Arc<GenFn>,
    generator_grad: Arc<GenGradFn>,
    generator_hess: Arc<GenHessFn>,
    terminal: Arc<dyn Fn(&DVector<f64>) -> f64 + Send + Sync>,
    terminal_grad: Arc<dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync>,
    terminal_hess: Arc<dyn Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync>,
}

impl FnProblem {
    pub fn zero(n: usize, m: usize, du: usize) -> Self {
        Self {
            n,
            m,
            du,
            drift: Arc::new(move |_, _, _| DVector::zeros(n)),
            drift_x: Arc::new(move |_, _, _| DMatrix::zeros(n, n)),
            drift_xx: Arc::new(move |_, _, _| vec![DMatrix::zeros(n, n); n]),
            diffusion: Arc::new(move |_, _, _| DMatrix::zeros(n, m)),
            diffusion_x: Arc::new(move |_, _, _| vec![DMatrix::zeros(n, n); m]),
            diffusion_xx: Arc::new(move |_, _, _| vec![vec![DMatrix::zeros(n, n); n]; m]),
            generator: Arc::new(|_, _, _, _, _| 0.0),
            generator_grad: Arc::new(move |_, _, _, _, _| GeneratorGradient::zeros(n, m)),
            generator_hess: Arc::new(move |_, _, _, _, _| DMatrix::zeros(n + 1 + m, n + 1 + m)),
            terminal: Arc::new(|_| 0.0),
            terminal_grad: Arc::new(move |_| DVector::zeros(n)),
            terminal_hess: Arc::new(move |_| DMatrix::zeros(n, n)),
        }
    }

    pub fn with_drift(
        mut self,
        a: impl Fn(f64, &DVector<f64>, &Control) -> DVector<f64> + Send + Sync + 'static,
        a_x: impl Fn(f64, &DVector<f64>, &Control) -> DMatrix<f64> + Send + Sync + 'static,
        a_xx: impl Fn(f64, &DVector<f64>, &Control) -> Vec<DMatrix<f64>> + Send + Sync + 'static,
    ) -> Self {
        self.drift = Arc::new(a);
        self.drift_x = Arc::new(a_x);
        self.drift_xx = Arc::new(a_xx);
        self
    }

    pub fn with_diffusion(
        mut self,
        b: impl Fn(f64, &DVector<f64>, &Control) -> DMatrix<f64> + Send + Sync + 'static,
        b_x: impl Fn(f64, &DVector<f64>, &Control) -> Vec<DMatrix<f64>> + Send + Sync + 'static,
        b_xx: impl Fn(f64, &DVector<f64>, &Control) -> Vec<Vec<DMatrix<f64>>> + Send + Sync + 'static,
    ) -> Self {
        self.diffusion = Arc::new(b);
        self.diffusion_x = Arc::new(b_x);
        self.diffusion_xx = Arc::new(b_xx);
        self
    }

    /// Constant (state-independent) diffusion `b(t, x, u) = b0`.
    pub fn with_constant_diffusion(self, b0: DMatrix<f64>) -> Self {
        let (n, m) = (self.n, self.m);
        assert_eq!((b0.nrows(), b0.ncols()), (n, m));
        self.with_diffusion(
            move |_, _, _| b0.clone(),
            move |_, _, _| vec![DMatrix::zeros(n, n); m],
            move |_, _, _| vec![vec![DMatrix::zeros(n, n); n]; m],
        )
    }

    /// Constant drift `a(t, x, u) = a0`.
    pub fn with_constant_drift(self, a0: DVector<f64>) -> Self {
        let n = self.n;
        assert_eq!(a0.len(), n);
        self.with_drift(
            move |_, _, _| a0.clone(),
            move |_, _, _| DMatrix::zeros(n, n),
            move |_, _, _| vec![DMatrix::zeros(n, n); n],
        )
    }

    pub fn with_generator(
        mut self,
        k: impl Fn(f64, &DVector<f64>, f64, &DVector<f64>, &Control) -> f64 + Send + Sync + 'static,
        grad: impl Fn(f64, &DVector<f64>, f64, &DVector<f64>, &Control) -> GeneratorGradient
            + Send
            + Sync
            + 'static,
        hess: impl Fn(f64, &DVector<f64>, f64, &DVector<f64>, &Control) -> DMatrix<f64>
            + Send
            + Sync
            + 'static,
    ) -> Self {
        self.generator = Arc::new(k);
        self.generator_grad = Arc::new(grad);
        self.generator_hess = Arc::new(hess);
        self
    }

    pub fn with_terminal(
        mut self,
        h: impl Fn(&DVector<f64>) -> f64 + Send + Sync + 'static,
        h_x: impl Fn(&DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
        h_xx: impl Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync + 'static,
    ) -> Self {
        self.terminal = Arc::new(h);
        self.terminal_grad = Arc::new(h_x);
        self.terminal_hess = Arc::new(h_xx);
        self
    }

    /// Linear terminal cost `h(x) = ⟨c, x⟩`.
    pub fn with_linear_terminal(self, c: DVector<f64>) -> Self {
        let n = self.n;
        let c1 = c.clone();
        self.with_terminal(
            move |x| c1.dot(x),
            move |_| c.clone(),
            move |_| DMatrix::zeros(n, n),
        )
    }
}

impl ControlProblem for FnProblem {
    fn state_dim(&self) -> usize {
        self.n
    }
    fn noise_dim(&self) -> usize {
        self.m
    }
    fn control_dim(&self) -> usize {
        self.du
    }
    fn drift(&self, t: f64, x: &DVector<f64>, u: &Control) -> DVector<f64> {
        (self.drift)(t, x, u)
    }
    fn diffusion(&self, t: f64, x: &DVector<f64>, u: &Control) -> DMatrix<f64> {
        (self.diffusion)(t, x, u)
    }
    fn generator(&self, t: f64, x: &DVector<f64>, y: f64, z: &DVector<f64>, u: &Control) -> f64 {
        (self.generator)(t, x, y, z, u)
    }
    fn terminal(&self, x: &DVector<f64>) -> f64 {
        (self.terminal)(x)
    }
    fn drift_x(&self, t: f64, x: &DVector<f64>, u: &Control) -> DMatrix<f64> {
        (self.drift_x)(t, x, u)
    }
    fn diffusion_x(&self, t: f64, x: &DVector<f64>, u: &Control) -> Vec<DMatrix<f64>> {
        (self.diffusion_x)(t, x, u)
    }
    fn generator_grad(
        &self,
        t: f64,
        x: &DVector<f64>,
        y: f64,
        z: &DVector<f64>,
        u: &Control,
    ) -> GeneratorGradient {
        (self.generator_grad)(t, x, y, z, u)
    }
    fn terminal_grad(&self, x: &DVector<f64>) -> DVector<f64> {
        (self.terminal_grad)(x)
    }
    fn drift_xx(&self, t: f64, x: &DVector<f64>, u: &Control) -> Option<Vec<DMatrix<f64>>> {
        Some((self.drift_xx)(t, x, u))
    }
    fn diffusion_xx(
        &self,
        t: f64,
        x: &DVector<f64>,
        u: &Control,
    ) -> Option<Vec<Vec<DMatrix<f64>>>> {
        Some((self.diffusion_xx)(t, x, u))
    }
    fn generator_hessian(
        &self,
        t: f64,
        x: &DVector<f64>,
        y: f64,
        z: &DVector<f64>,
        u: &Control,
    ) -> Option<DMatrix<f64>> {
        Some((self.generator_hess)(t, x, y, z, u))
    }
    fn terminal_hessian(&self, x: &DVector<f64>) -> Option<DMatrix<f64>> {
        Some((self.terminal_hess)(x))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn piecewise_policy_switches_on_interval_boundaries() {
        let v: Vec<Control> = (0..4).map(|i| DVector::from_element(1, i as f64)).collect();
        let p = PiecewiseConstantPolicy::new(v, 0.0, 1.0);
        let x = DVector::zeros(1);
        assert_eq!(p.control(0, 0.0, &x, 0)[0], 0.0);
        assert_eq!(p.control(0, 0.2499, &x, 0)[0], 0.0);
        assert_eq!(p.control(0, 0.25, &x, 0)[0], 1.0);
        assert_eq!(p.control(0, 0.99, &x, 0)[0], 3.0);
        assert_eq!(p.control(0, 1.0, &x, 0)[0], 3.0);
    }

    #[test]
    fn zero_problem_has_zero_coefficients() {
        let p = FnProblem::zero(2, 1, 1);
        let x = DVector::from_vec(vec![1.0, 2.0]);
        let u = DVector::zeros(1);
        assert_eq!(p.drift(0.0, &x, &u).norm(), 0.0);
        assert_eq!(p.diffusion(0.0, &x, &u).norm(), 0.0);
        assert_eq!(p.generator(0.0, &x, 1.0, &DVector::zeros(1), &u), 0.0);
        assert_eq!(
            p.generator_hessian(0.0, &x, 0.0, &DVector::zeros(1), &u)
                .unwrap()
                .shape(),
            (4, 4)
        );
    }
}

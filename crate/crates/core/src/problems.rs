//! Built-in problem instances: the linear example with closed-form value,
//! a stochastic heat equation with bounded nonlinearities, a scalar
//! linear-quadratic problem, and small synthetic models for property tests.

use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::dpp::SmoothValue;
use crate::error::{invalid, Error, Result};
use crate::galerkin::{
    check_coercivity, check_quasi_skew, first_order_operator, make_laplacian_space, GalerkinSpace,
    OperatorFamily,
};
use crate::problem::{
    ConstantPolicy, Control, ControlProblem, FeedbackPolicy, FnProblem, GeneratorGradient, Policy,
};

pub type VecField = Arc<dyn Fn(f64, &DVector<f64>) -> DVector<f64> + Send + Sync>;
pub type MatField = Arc<dyn Fn(f64, &DVector<f64>) -> DMatrix<f64> + Send + Sync>;

/// Closed-form adjoints and value along the optimal state.
#[derive(Clone)]
pub struct Oracle {
    pub value: SmoothValue,
    pub p: VecField,
    pub q: MatField,
    pub big_p: MatField,
}

/// A fully specified model together with its control set and candidate
/// optimal policy.
#[derive(Clone)]
pub struct Model {
    pub name: String,
    pub space: GalerkinSpace,
    pub fam: OperatorFamily,
    pub problem: Arc<dyn ControlProblem>,
    pub x0: DVector<f64>,
    pub t_end: f64,
    pub u_points: Vec<Control>,
    /// Index in `u_points` of the candidate optimal constant control.
    pub base_index: usize,
    pub optimal: Arc<dyn Policy>,
    pub oracle: Option<Oracle>,
    /// The candidate optimal control is a constant from `u_points`.
    pub constant_optimal: bool,
}

impl Model {
    pub fn base(&self) -> &Control {
        &self.u_points[self.base_index]
    }

    pub fn state_dim(&self) -> usize {
        self.space.state_dim()
    }

    pub fn noise_dim(&self) -> usize {
        self.space.noise_dim()
    }
}

/// A scalar function of `z ∈ R^m` with gradient and Hessian.
#[derive(Clone)]
pub struct ZFunction {
    pub name: String,
    pub value: Arc<dyn Fn(&DVector<f64>) -> f64 + Send + Sync>,
    pub grad: Arc<dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync>,
    pub hess: Arc<dyn Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync>,
}

impl ZFunction {
    /// `f(z) = |z|²`.
    pub fn square() -> Self {
        Self {
            name: "square".into(),
            value: Arc::new(|z| z.norm_squared()),
            grad: Arc::new(|z| z * 2.0),
            hess: Arc::new(|z| DMatrix::identity(z.len(), z.len()) * 2.0),
        }
    }

    /// `f(z) = ⟨c, z⟩`.
    pub fn linear(c: DVector<f64>) -> Self {
        let c1 = c.clone();
        Self {
            name: "linear".into(),
            value: Arc::new(move |z| c1.dot(z)),
            grad: Arc::new(move |_| c.clone()),
            hess: Arc::new(|z| DMatrix::zeros(z.len(), z.len())),
        }
    }

    pub fn eval(&self, z: &DVector<f64>) -> f64 {
        (self.value)(z)
    }
}

/// Parameters of the linear example `dX = AX dt + b u dW`,
/// `k = f(Z) − ⟨A*a, X⟩`, `h = ⟨a, X(T)⟩`.
#[derive(Clone)]
pub struct LinearExampleParams {
    pub n: usize,
    pub m: usize,
    pub a_vec: DVector<f64>,
    /// `b_j`, one `n × du` matrix per noise mode; column `j` of `b(u)` is `b_j u`.
    pub b: Vec<DMatrix<f64>>,
    pub f: ZFunction,
    pub u_points: Vec<Control>,
    pub base_index: usize,
    pub domain_length: f64,
    pub t_end: f64,
}

impl LinearExampleParams {
    /// `n = 2`, `m = 1`, `a = (1, 0.5)`, `b = (1, 0.5)ᵀ`, `f(z) = z²`, `U = {0, 1}`.
    pub fn default_for(n: usize, m: usize) -> Self {
        let a_vec = DVector::from_fn(n, |i, _| 1.0 / (1 << i.min(30)) as f64);
        let b = (0..m)
            .map(|j| DMatrix::from_fn(n, 1, |i, _| if j == 0 { a_vec[i] } else { 0.0 }))
            .collect();
        Self {
            n,
            m,
            a_vec,
            b,
            f: ZFunction::square(),
            u_points: vec![DVector::zeros(1), DVector::from_element(1, 1.0)],
            base_index: 0,
            domain_length: 1.0,
            t_end: 1.0,
        }
    }

    /// `(b(u) − b(ū))ᵀ a`.
    fn contraction(&self, u: &Control) -> DVector<f64> {
        let base = &self.u_points[self.base_index];
        DVector::from_fn(self.m, |j, _| (&self.b[j] * (u - base)).dot(&self.a_vec))
    }
}

fn diffusion_of(b: &[DMatrix<f64>], n: usize, u: &Control) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(n, b.len());
    for (j, bj) in b.iter().enumerate() {
        out.set_column(j, &(bj * u));
    }
    out
}

/// The linear example with oracle `p ≡ a`, `q ≡ 0`, `P ≡ 0`,
/// `V(t, x) = ⟨a, x⟩`. Rejects parameters for which the base point is not
/// optimal.
pub fn make_linear_example(params: LinearExampleParams) -> Result<Model> {
    let LinearExampleParams { n, m, .. } = params;
    if n == 0 || m == 0 {
        return Err(Error::Configuration("need n >= 1 and m >= 1".into()));
    }
    if params.a_vec.len() != n || params.b.len() != m {
        return Err(Error::Configuration(
            "a must have n entries and b one matrix per noise mode".into(),
        ));
    }
    if params.u_points.is_empty() || params.base_index >= params.u_points.len() {
        return Err(Error::Configuration(
            "control set must contain the base point".into(),
        ));
    }
    let du = params.u_points[0].len();
    if params
        .b
        .iter()
        .any(|bj| bj.nrows() != n || bj.ncols() != du)
        || params.u_points.iter().any(|u| u.len() != du)
    {
        return Err(Error::Configuration(format!(
            "b_j must be {n} x {du} and controls of dimension {du}"
        )));
    }
    let base_val = params
        .f
        .eval(&params.contraction(&params.u_points[params.base_index]));
    if base_val != 0.0 {
        return Err(Error::Configuration(format!(
            "f at the base point is {base_val}, not 0"
        )));
    }
    for (i, u) in params.u_points.iter().enumerate() {
        let v = params.f.eval(&params.contraction(u));
        if !(v >= 0.0) {
            return Err(Error::Configuration(format!(
                "f(<a, b u>) = {v} < 0 at control point {i}; the base point is not optimal"
            )));
        }
    }
    let (space, fam) = make_laplacian_space(n, m, params.domain_length, 0.0)?;
    let a_op = fam.drift(0.0);
    let ata = a_op.transpose() * &params.a_vec;
    let b = params.b.clone();
    let f = params.f.clone();
    let (fv, fg, fh) = (f.value.clone(), f.grad.clone(), f.hess.clone());
    let a_vec = params.a_vec.clone();
    let (ata1, ata2) = (ata.clone(), ata.clone());
    let problem = FnProblem::zero(n, m, du)
        .with_diffusion(
            move |_, _, u| diffusion_of(&b, n, u),
            move |_, _, _| vec![DMatrix::zeros(n, n); m],
            move |_, _, _| vec![vec![DMatrix::zeros(n, n); n]; m],
        )
        .with_generator(
            move |_, x, _, z, _| fv(z) - ata1.dot(x),
            move |_, _, _, z, _| GeneratorGradient {
                x: -ata2.clone(),
                y: 0.0,
                z: fg(z),
            },
            move |_, _, _, z, _| {
                let mut h = DMatrix::zeros(n + 1 + m, n + 1 + m);
                h.view_mut((n + 1, n + 1), (m, m)).copy_from(&fh(z));
                h
            },
        )
        .with_linear_terminal(a_vec.clone());
    let (av1, av2, av3) = (a_vec.clone(), a_vec.clone(), a_vec.clone());
    let oracle = Oracle {
        value: SmoothValue {
            v: Arc::new(move |_, x| av1.dot(x)),
            v_t: Arc::new(|_, _| 0.0),
            v_x: Arc::new(move |_, _| av2.clone()),
            v_xx: Arc::new(move |_, x| DMatrix::zeros(x.len(), x.len())),
        },
        p: Arc::new(move |_, _| av3.clone()),
        q: Arc::new(move |_, _| DMatrix::zeros(n, m)),
        big_p: Arc::new(move |_, _| DMatrix::zeros(n, n)),
    };
    let base = params.u_points[params.base_index].clone();
    Ok(Model {
        name: "linear-example2".into(),
        space,
        fam,
        problem: Arc::new(problem),
        x0: DVector::from_fn(n, |k, _| 1.0 / (k + 1) as f64),
        t_end: params.t_end,
        u_points: params.u_points,
        base_index: params.base_index,
        optimal: Arc::new(ConstantPolicy(base)),
        oracle: Some(oracle),
        constant_optimal: true,
    })
}

/// Stochastic heat equation on `(0, L)` in `n` sine modes with `m` noise
/// modes, `B_0 = beta_strength · ∂_ζ`, `a = 0.5 tanh(x) + 0.5 u g`,
/// `g_k = 1/k`, state-dependent diagonal noise, and a smooth generator.
/// Controls are `control_points` equispaced values in `[−1, 1]`.
pub fn make_heat_control_problem(
    n: usize,
    m: usize,
    domain_length: f64,
    beta_strength: f64,
    control_points: usize,
) -> Result<Model> {
    if control_points == 0 {
        return Err(Error::Configuration(
            "need at least one control point".into(),
        ));
    }
    if !beta_strength.is_finite() {
        return Err(Error::Configuration("beta_strength must be finite".into()));
    }
    let (lap_space, lap) = make_laplacian_space(n, m, domain_length, 1.0)?;
    let space = lap_space;
    let lambda1 = (PI / domain_length).powi(2);
    let delta = 0.5;
    let k_bound = (0.5 - 1.5 * lambda1).max(0.0);
    let mut b_ops = vec![DMatrix::zeros(n, n); m];
    b_ops[0] = first_order_operator(n, domain_length) * beta_strength;
    let fam = OperatorFamily::constant(lap.drift(0.0), b_ops, delta, k_bound)?.with_dual_bound(1.0);
    let coer = check_coercivity(&fam, &space, &[0.0], 10_000, 17)?;
    let skew = check_quasi_skew(&fam, &space, &[0.0], 10_000, 18)?;
    let report = coer.merge(&skew);
    if !report.pass {
        return Err(Error::Configuration(format!(
            "coercivity fails for beta_strength = {beta_strength}: worst coercivity slack {:?}, dual-norm slack {:?}, skew slack {:?}",
            report.worst_coercivity_slack, report.worst_dualnorm_slack, report.worst_skew_slack
        )));
    }
    let g = DVector::from_fn(n, |k, _| 1.0 / (k + 1) as f64);
    let g1 = g.clone();
    let diag = n.min(m);
    let problem = FnProblem::zero(n, m, 1)
        .with_drift(
            move |_, x, u| x.map(|v| 0.5 * v.tanh()) + &g1 * (0.5 * u[0]),
            move |_, x, _| DMatrix::from_diagonal(&x.map(|v| 0.5 / v.cosh().powi(2))),
            move |_, x, _| {
                (0..n)
                    .map(|k| {
                        let mut h = DMatrix::zeros(n, n);
                        let th = x[k].tanh();
                        h[(k, k)] = -th * (1.0 - th * th);
                        h
                    })
                    .collect()
            },
        )
        .with_diffusion(
            move |_, x, u| {
                let mut b = DMatrix::zeros(n, m);
                for j in 0..diag {
                    b[(j, j)] = 0.1 * (1.0 + 0.5 * x[j].sin()) + 0.05 * u[0];
                }
                b
            },
            move |_, x, _| {
                (0..m)
                    .map(|j| {
                        let mut d = DMatrix::zeros(n, n);
                        if j < diag {
                            d[(j, j)] = 0.05 * x[j].cos();
                        }
                        d
                    })
                    .collect()
            },
            move |_, x, _| {
                (0..m)
                    .map(|j| {
                        (0..n)
                            .map(|k| {
                                let mut h = DMatrix::zeros(n, n);
                                if k == j && j < diag {
                                    h[(j, j)] = -0.05 * x[j].sin();
                                }
                                h
                            })
                            .collect()
                    })
                    .collect()
            },
        )
        .with_generator(
            |_, x, y, z, u| {
                0.5 * x.iter().map(|v| v.cosh().ln()).sum::<f64>()
                    + 0.1 * y.sin()
                    + 0.2 * z.iter().map(|v| v.cosh().ln()).sum::<f64>()
                    + u.norm_squared()
            },
            |_, x, y, z, _| GeneratorGradient {
                x: x.map(|v| 0.5 * v.tanh()),
                y: 0.1 * y.cos(),
                z: z.map(|v| 0.2 * v.tanh()),
            },
            move |_, x, y, z, _| {
                let mut h = DMatrix::zeros(n + 1 + m, n + 1 + m);
                for k in 0..n {
                    h[(k, k)] = 0.5 / x[k].cosh().powi(2);
                }
                h[(n, n)] = -0.1 * y.sin();
                for j in 0..m {
                    h[(n + 1 + j, n + 1 + j)] = 0.2 / z[j].cosh().powi(2);
                }
                h
            },
        )
        .with_terminal(
            |x| 0.5 * x.iter().map(|v| v.cosh().ln()).sum::<f64>(),
            |x| x.map(|v| 0.5 * v.tanh()),
            |x| DMatrix::from_diagonal(&x.map(|v| 0.5 / v.cosh().powi(2))),
        );
    let u_points: Vec<Control> = if control_points == 1 {
        vec![DVector::zeros(1)]
    } else {
        (0..control_points)
            .map(|i| DVector::from_element(1, -1.0 + 2.0 * i as f64 / (control_points - 1) as f64))
            .collect()
    };
    let base_index = u_points
        .iter()
        .enumerate()
        .min_by(|a, b| a.1[0].abs().total_cmp(&b.1[0].abs()))
        .map(|(i, _)| i)
        .unwrap_or(0);
    let x0 = DVector::from_fn(n, |k, _| 0.5 / (k + 1) as f64);
    Ok(Model {
        name: "heat-example1".into(),
        space,
        fam,
        problem: Arc::new(problem),
        x0,
        t_end: 1.0,
        optimal: Arc::new(ConstantPolicy(u_points[base_index].clone())),
        u_points,
        base_index,
        oracle: None,
        constant_optimal: true,
    })
}

/// Scalar linear-quadratic data: `dX = (λX + u) dt + σ dW`,
/// `k = ½(x² + r u²)`, `h = ½ g x²`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LqParams {
    pub lambda: f64,
    pub sigma: f64,
    pub r: f64,
    pub g: f64,
    pub t_end: f64,
    pub x0: f64,
}

impl Default for LqParams {
    fn default() -> Self {
        Self {
            lambda: 0.2,
            sigma: 0.3,
            r: 1.0,
            g: 1.0,
            t_end: 1.0,
            x0: 1.0,
        }
    }
}

/// Fine-grid solution of the backward ODEs of the scalar LQ problem:
/// `S' = −2λS + S²/r − 1`, `S(T) = g`; `φ' = −½σ²S`, `φ(T) = 0`;
/// `P' = −2λP − 1`, `P(T) = g`.
#[derive(Debug, Clone)]
pub struct RiccatiTable {
    t_end: f64,
    dt: f64,
    s: Vec<f64>,
    phi: Vec<f64>,
    big_p: Vec<f64>,
}

impl RiccatiTable {
    pub fn solve(params: &LqParams, steps: usize) -> Result<Self> {
        if steps == 0 || !(params.t_end > 0.0) || !(params.r > 0.0) {
            return invalid("Riccati table needs steps >= 1, T > 0 and r > 0");
        }
        let LqParams {
            lambda,
            sigma,
            r,
            g,
            t_end,
            ..
        } = *params;
        let dt = t_end / steps as f64;
        // state (S, φ, P) integrated backward in time with RK4
        let rhs = |y: [f64; 3]| -> [f64; 3] {
            [
                -2.0 * lambda * y[0] + y[0] * y[0] / r - 1.0,
                -0.5 * sigma * sigma * y[0],
                -2.0 * lambda * y[2] - 1.0,
            ]
        };
        let mut y = [g, 0.0, g];
        let mut s = vec![0.0; steps + 1];
        let mut phi = vec![0.0; steps + 1];
        let mut big_p = vec![0.0; steps + 1];
        s[steps] = y[0];
        phi[steps] = y[1];
        big_p[steps] = y[2];
        let h = -dt;
        let add =
            |a: [f64; 3], b: [f64; 3], c: f64| [a[0] + c * b[0], a[1] + c * b[1], a[2] + c * b[2]];
        for i in (0..steps).rev() {
            let k1 = rhs(y);
            let k2 = rhs(add(y, k1, 0.5 * h));
            let k3 = rhs(add(y, k2, 0.5 * h));
            let k4 = rhs(add(y, k3, h));
            for c in 0..3 {
                y[c] += h / 6.0 * (k1[c] + 2.0 * k2[c] + 2.0 * k3[c] + k4[c]);
            }
            if y.iter().any(|v| !v.is_finite()) {
                return Err(Error::NumericalFailure("Riccati solution blew up".into()));
            }
            s[i] = y[0];
            phi[i] = y[1];
            big_p[i] = y[2];
        }
        Ok(Self {
            t_end,
            dt,
            s,
            phi,
            big_p,
        })
    }

    fn interp(&self, table: &[f64], t: f64) -> f64 {
        let x = (t / self.dt).clamp(0.0, (table.len() - 1) as f64);
        let i = (x.floor() as usize).min(table.len() - 2);
        let w = x - i as f64;
        table[i] * (1.0 - w) + table[i + 1] * w
    }

    pub fn s(&self, t: f64) -> f64 {
        self.interp(&self.s, t)
    }

    pub fn phi(&self, t: f64) -> f64 {
        self.interp(&self.phi, t)
    }

    pub fn big_p(&self, t: f64) -> f64 {
        self.interp(&self.big_p, t)
    }

    pub fn t_end(&self) -> f64 {
        self.t_end
    }
}

/// Scalar LQ problem with Riccati oracle `V = ½S x² + φ`, `p = S x`,
/// `q = S σ`, optimal feedback `u = −S x / r`.
pub fn make_lq_problem(params: LqParams, u_points: Vec<Control>) -> Result<Model> {
    let table = Arc::new(RiccatiTable::solve(&params, 200_000)?);
    let LqParams {
        lambda,
        sigma,
        r,
        g,
        ..
    } = params;
    let space = GalerkinSpace::euclidean(1, 1)?;
    let fam = OperatorFamily::constant(
        DMatrix::from_element(1, 1, lambda),
        vec![DMatrix::zeros(1, 1)],
        1.0,
        (2.0 * lambda + 1.0).max(0.0),
    )?
    .with_dual_bound(lambda.abs());
    let problem = FnProblem::zero(1, 1, 1)
        .with_drift(
            |_, _, u| DVector::from_element(1, u[0]),
            |_, _, _| DMatrix::zeros(1, 1),
            |_, _, _| vec![DMatrix::zeros(1, 1)],
        )
        .with_constant_diffusion(DMatrix::from_element(1, 1, sigma))
        .with_generator(
            move |_, x, _, _, u| 0.5 * (x[0] * x[0] + r * u[0] * u[0]),
            |_, x, _, _, _| GeneratorGradient {
                x: DVector::from_element(1, x[0]),
                y: 0.0,
                z: DVector::zeros(1),
            },
            |_, _, _, _, _| {
                let mut h = DMatrix::zeros(3, 3);
                h[(0, 0)] = 1.0;
                h
            },
        )
        .with_terminal(
            move |x| 0.5 * g * x[0] * x[0],
            move |x| DVector::from_element(1, g * x[0]),
            move |_| DMatrix::from_element(1, 1, g),
        );
    let (t1, t2, t3, t4, t5, t6, t7, t8) = (
        table.clone(),
        table.clone(),
        table.clone(),
        table.clone(),
        table.clone(),
        table.clone(),
        table.clone(),
        table.clone(),
    );
    let value = SmoothValue {
        v: Arc::new(move |t, x| 0.5 * t1.s(t) * x[0] * x[0] + t1.phi(t)),
        v_t: Arc::new(move |t, x| {
            let s = t2.s(t);
            0.5 * (-2.0 * lambda * s + s * s / r - 1.0) * x[0] * x[0] - 0.5 * sigma * sigma * s
        }),
        v_x: Arc::new(move |t, x| DVector::from_element(1, t3.s(t) * x[0])),
        v_xx: Arc::new(move |t, _| DMatrix::from_element(1, 1, t4.s(t))),
    };
    let oracle = Oracle {
        value,
        p: Arc::new(move |t, x| DVector::from_element(1, t5.s(t) * x[0])),
        q: Arc::new(move |t, _| DMatrix::from_element(1, 1, t6.s(t) * sigma)),
        big_p: Arc::new(move |t, _| DMatrix::from_element(1, 1, t7.big_p(t))),
    };
    let optimal = FeedbackPolicy::new(move |t, x| DVector::from_element(1, -t8.s(t) * x[0] / r));
    let u_points = if u_points.is_empty() {
        (0..9)
            .map(|i| DVector::from_element(1, -2.0 + 0.5 * i as f64))
            .collect()
    } else {
        u_points
    };
    let base_index = u_points
        .iter()
        .enumerate()
        .min_by(|a, b| a.1[0].abs().total_cmp(&b.1[0].abs()))
        .map(|(i, _)| i)
        .unwrap_or(0);
    Ok(Model {
        name: "lq-oracle".into(),
        space,
        fam,
        problem: Arc::new(problem),
        x0: DVector::from_element(1, params.x0),
        t_end: params.t_end,
        u_points,
        base_index,
        optimal: Arc::new(optimal),
        oracle: Some(oracle),
        constant_optimal: false,
    })
}

/// Laplacian modes with drift `c · x∘x` and constant diagonal noise.
/// Its drift Hessian is constant.
pub fn make_quadratic_drift_model(n: usize, c: f64) -> Result<Model> {
    drift_model(
        n,
        "quadratic-drift",
        move |v| c * v * v,
        move |v| 2.0 * c * v,
        move |_| 2.0 * c,
    )
}

/// Laplacian modes with drift `sin(x)` and constant diagonal noise.
pub fn make_sine_drift_model(n: usize) -> Result<Model> {
    drift_model(n, "sine-drift", f64::sin, f64::cos, |v| -v.sin())
}

fn drift_model(
    n: usize,
    name: &str,
    f: impl Fn(f64) -> f64 + Send + Sync + Copy + 'static,
    df: impl Fn(f64) -> f64 + Send + Sync + Copy + 'static,
    d2f: impl Fn(f64) -> f64 + Send + Sync + Copy + 'static,
) -> Result<Model> {
    let (space, fam) = make_laplacian_space(n, 1, 1.0, 0.0)?;
    let problem = FnProblem::zero(n, 1, 1)
        .with_drift(
            move |_, x, _| x.map(f),
            move |_, x, _| DMatrix::from_diagonal(&x.map(df)),
            move |_, x, _| {
                (0..n)
                    .map(|k| {
                        let mut h = DMatrix::zeros(n, n);
                        h[(k, k)] = d2f(x[k]);
                        h
                    })
                    .collect()
            },
        )
        .with_constant_diffusion(DMatrix::from_element(n, 1, 0.2))
        .with_terminal(
            |x| 0.5 * x.norm_squared(),
            |x| x.clone(),
            |x| DMatrix::identity(x.len(), x.len()),
        );
    Ok(Model {
        name: name.into(),
        space,
        fam,
        problem: Arc::new(problem),
        x0: DVector::from_fn(n, |k, _| 0.5 / (k + 1) as f64),
        t_end: 1.0,
        u_points: vec![DVector::zeros(1)],
        base_index: 0,
        optimal: Arc::new(ConstantPolicy(DVector::zeros(1))),
        oracle: None,
        constant_optimal: true,
    })
}

/// `n = 1`, no dynamics, `k = u²`, `U = {0, 1}` with the non-optimal
/// candidate `ū ≡ 1`.
pub fn make_suboptimal_model() -> Result<Model> {
    let space = GalerkinSpace::euclidean(1, 1)?;
    let fam = OperatorFamily::constant(DMatrix::zeros(1, 1), vec![DMatrix::zeros(1, 1)], 1.0, 1.0)?;
    let problem = FnProblem::zero(1, 1, 1).with_generator(
        |_, _, _, _, u| u[0] * u[0],
        |_, _, _, _, _| GeneratorGradient::zeros(1, 1),
        |_, _, _, _, _| DMatrix::zeros(3, 3),
    );
    let u_points = vec![DVector::zeros(1), DVector::from_element(1, 1.0)];
    Ok(Model {
        name: "suboptimal".into(),
        space,
        fam,
        problem: Arc::new(problem),
        x0: DVector::zeros(1),
        t_end: 1.0,
        optimal: Arc::new(ConstantPolicy(u_points[1].clone())),
        u_points,
        base_index: 1,
        oracle: None,
        constant_optimal: true,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_example_rejects_negative_linear_f() {
        let mut p = LinearExampleParams::default_for(2, 1);
        p.f = ZFunction::linear(DVector::from_element(1, 1.0));
        p.u_points = vec![DVector::zeros(1), DVector::from_element(1, -1.0)];
        assert!(matches!(
            make_linear_example(p),
            Err(Error::Configuration(_))
        ));
    }

    #[test]
    fn heat_coercivity_validated() {
        assert!(make_heat_control_problem(4, 1, 1.0, 1.0, 3).is_ok());
        assert!(matches!(
            make_heat_control_problem(4, 1, 1.0, 10.0, 3),
            Err(Error::Configuration(_))
        ));
    }

    #[test]
    fn riccati_constant_solution() {
        // S ≡ s* solves −2λs + s²/r − 1 = 0 when g = s*
        let lambda: f64 = 0.2;
        let s_star = lambda + (lambda * lambda + 1.0).sqrt();
        let params = LqParams {
            lambda,
            g: s_star,
            ..Default::default()
        };
        let tab = RiccatiTable::solve(&params, 1000).unwrap();
        assert!((tab.s(0.0) - s_star).abs() < 1e-10);
        assert!((tab.phi(0.0) - 0.5 * 0.09 * s_star).abs() < 1e-10);
    }
}

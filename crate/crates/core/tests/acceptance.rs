//! Acceptance suite. Prints one `criterion N: PASS|FAIL` line per criterion
//! and exits nonzero if any fails. Tolerances are pinned below.

use std::sync::{Arc, Mutex, OnceLock};

use nalgebra::{DMatrix, DVector};
use serde_json::Value;

use seelab::adjoint::{solve_bsie, verify_ito_formula};
use seelab::bsde::{solve_bsde, BsdeOptions};
use seelab::cli::report_json;
use seelab::dpp::{
    convexity_probe, hjb_residual, semiconcavity_probe, ControlLattice, SmoothValue, ValueEstimator,
};
use seelab::experiments::{
    run_experiment, run_model, CheckKind, ExperimentConfig, ExperimentReport,
};
use seelab::forward::{
    simulate_forward, simulate_forward_with, variational_expansion, BrownianIncrements,
    PlainGenerator, Propagator,
};
use seelab::galerkin::{check_coercivity, check_quasi_skew, make_laplacian_space};
use seelab::problem::{ConstantPolicy, FnProblem, GeneratorGradient};
use seelab::problems::{
    make_heat_control_problem, make_quadratic_drift_model, make_sine_drift_model,
    make_suboptimal_model,
};
use seelab::regression::{mean_se, RegressionBasis};
use seelab::{GalerkinSpace, OperatorFamily, TimeGrid};

const REL_P_TOL: f64 = 5e-2;
const SE_MULT: f64 = 3.0;
/// Absolute floor added to every `k·SE` bound; closed-form cases have SE = 0.
const ROUNDOFF: f64 = 1e-10;
const ITO_TOL: f64 = 5e-2;
const EXP_TOL: f64 = 2e-2;
const REMAINDER_SLOPE: f64 = 4.0 - 0.3;
const FRACTION_SUBOPT: f64 = 0.05;

static VERDICT: Mutex<Option<bool>> = Mutex::new(None);

fn verdict(n: usize, pass: bool, detail: String) {
    println!(
        "criterion {n}: {} {detail}",
        if pass { "PASS" } else { "FAIL" }
    );
    *VERDICT.lock().unwrap() = Some(pass);
}

fn f(v: &Value, path: &[&str]) -> f64 {
    let mut cur = v;
    for k in path {
        cur = match k.parse::<usize>() {
            Ok(i) => &cur[i],
            Err(_) => &cur[*k],
        };
    }
    cur.as_f64()
        .unwrap_or_else(|| panic!("missing number at {path:?}"))
}

fn example2_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::builtin("linear-example2").unwrap();
    cfg.grid.paths = 20_000;
    cfg.grid.steps = 128;
    cfg.grid.seed = 7;
    cfg
}

/// Full Example 2 run, shared by several criteria.
fn example2_report() -> &'static ExperimentReport {
    static REPORT: OnceLock<ExperimentReport> = OnceLock::new();
    REPORT.get_or_init(|| run_experiment(&example2_config()).expect("example 2 runs"))
}

fn summary(report: &ExperimentReport, kind: CheckKind) -> &Value {
    &report
        .check(kind)
        .unwrap_or_else(|| panic!("{kind:?} missing"))
        .summary
}

fn criterion_01_example2_oracle() {
    let rep = example2_report();
    let adj = summary(rep, CheckKind::Adjoint);
    let p_rel = f(adj, &["oracle", "p_relative_rms"]);
    let big_p = f(adj, &["oracle", "P_max_operator_norm_error"]);
    let big_p_se = f(adj, &["P_se"]);
    let mut ok = p_rel <= REL_P_TOL && big_p <= SE_MULT * big_p_se + ROUNDOFF;

    let cfg = example2_config();
    let model = cfg.build_model().unwrap();
    let grid = TimeGrid::uniform(0.0, model.t_end, 128).unwrap();
    let lattice = ControlLattice::new(model.u_points.clone(), 2, 16, 11).unwrap();
    let est = ValueEstimator::new(
        &model.space,
        &model.fam,
        model.problem.as_ref(),
        lattice,
        &grid,
        4000,
        12,
        RegressionBasis::default_for(2),
        BsdeOptions::default(),
    )
    .unwrap();
    let a = DVector::from_vec(vec![1.0, 0.5]);
    let probes = [[0.0, 0.0], [1.0, 0.5], [-1.0, 2.0], [0.3, -0.7], [2.0, 1.0]];
    let mut worst: f64 = 0.0;
    for x in probes {
        let x = DVector::from_row_slice(&x);
        let v = est.estimate(0, &x).unwrap();
        let err = (v.value - a.dot(&x)).abs();
        worst = worst.max(err - SE_MULT * v.se);
        ok &= err <= SE_MULT * v.se + ROUNDOFF * (1.0 + a.dot(&x).abs());
    }
    verdict(
        1,
        ok,
        format!("p_rel={p_rel:.3e} P_err={big_p:.3e} (se {big_p_se:.1e}) value excess over 3SE={worst:.3e}"),
    );
}

fn criterion_02_mp_condition() {
    let rep = example2_report();
    let mp = summary(rep, CheckKind::Mp);
    let (min_res, tol, frac) = (
        f(mp, &["min_residual"]),
        f(mp, &["tol"]),
        f(mp, &["fraction_violating"]),
    );
    let ok_example = min_res >= -tol && frac == 0.0;

    let model = make_suboptimal_model().unwrap();
    let mut cfg = ExperimentConfig::builtin("linear-example2").unwrap();
    cfg.grid.paths = 2000;
    cfg.grid.steps = 32;
    cfg.checks = Some(vec![CheckKind::Mp]);
    let sub = run_model(&cfg, &model).unwrap();
    let sub_frac = f(summary(&sub, CheckKind::Mp), &["fraction_violating"]);
    verdict(
        2,
        ok_example && sub_frac > FRACTION_SUBOPT,
        format!(
            "example2 min={min_res:.3e} tol={tol:.3e} frac={frac}; suboptimal frac={sub_frac:.3}"
        ),
    );
}

fn criterion_03_dpp_identity() {
    let rep = example2_report();
    let dpp = summary(rep, CheckKind::Dpp);
    let mut cfg = example2_config();
    cfg.grid.steps = 64;
    cfg.checks = Some(vec![CheckKind::Dpp]);
    let coarse = run_experiment(&cfg).unwrap();
    let cdpp = summary(&coarse, CheckKind::Dpp);
    let mut ok = true;
    let mut detail = String::new();
    for k in 0..3 {
        let gap = f(dpp, &["dpp", &k.to_string(), "report", "gap"]);
        let se = f(dpp, &["dpp", &k.to_string(), "report", "gap_se"]);
        let delta = f(dpp, &["dpp", &k.to_string(), "report", "delta"]);
        let cgap = f(cdpp, &["dpp", &k.to_string(), "report", "gap"]);
        let cse = f(cdpp, &["dpp", &k.to_string(), "report", "gap_se"]);
        ok &= gap <= SE_MULT * se + 2.0 / 128.0;
        ok &= gap <= cgap + SE_MULT * (se + cse) + ROUNDOFF;
        detail += &format!("delta={delta} gap={gap:.2e} (M=64: {cgap:.2e}); ");
    }
    verdict(3, ok, detail);
}

fn criterion_04_value_along_optimal() {
    let rep = example2_report();
    let along = &summary(rep, CheckKind::Dpp)["value_along_optimal"];
    let deltas = along["deltas"].as_array().unwrap();
    let k = deltas
        .iter()
        .position(|d| (d.as_f64().unwrap() - 0.25).abs() < 1e-12)
        .unwrap();
    let rms = f(along, &["rms_diff", &k.to_string()]);
    let se = f(along, &["se", &k.to_string()]);
    verdict(
        4,
        rms <= SE_MULT * se + ROUNDOFF,
        format!("rms={rms:.3e} se={se:.3e} at delta=T/4"),
    );
}

fn criterion_05_ito_formula() {
    // scalar closed form: A = λ, B = 0, β = 0, f = 0, ξ = 1
    let lambda = 0.5;
    let (n_paths, steps) = (2000, 256);
    let space = GalerkinSpace::euclidean(1, 1).unwrap();
    let fam = OperatorFamily::constant(
        DMatrix::from_element(1, 1, lambda),
        vec![DMatrix::zeros(1, 1)],
        1.0,
        lambda + 1.0,
    )
    .unwrap();
    let grid = TimeGrid::uniform(0.0, 1.0, steps).unwrap();
    let dw = BrownianIncrements::generate(&grid, n_paths, 1, 21).unwrap();
    let gen = PlainGenerator::new(&space, &fam, &grid).unwrap();
    let beta = vec![0.0; n_paths * steps];
    let prop = Propagator::tilted(&gen, &beta, &dw).unwrap();
    let zero = FnProblem::zero(1, 1, 1);
    let ens = simulate_forward_with(
        &space,
        &fam,
        &zero,
        &ConstantPolicy(DVector::zeros(1)),
        &[1.0],
        &dw,
        Default::default(),
    )
    .unwrap();
    let xi = vec![1.0; n_paths];
    let basis = RegressionBasis::default_for(1);
    let big_p = solve_bsie(
        &prop,
        &xi,
        &vec![0.0; n_paths * steps],
        &vec![0.0; n_paths * steps],
        &ens,
        &basis,
        12,
        1e-8,
    )
    .unwrap();
    let p0_err = (big_p.at(0, 0)[(0, 0)] / (2.0 * lambda).exp() - 1.0).abs();
    let zero_f = |_: usize, _: usize, p: &DMatrix<f64>| p * 0.0;
    let x0 = DVector::from_element(1, 1.0);
    let scalar = verify_ito_formula(
        &gen, &beta, &dw, &big_p, None, &x0, &zero_f, &xi, &basis, None,
    )
    .unwrap();

    // homogeneous flow with a skew noise operator
    let space2 = GalerkinSpace::new(vec![2.0, 5.0], vec![1.0]).unwrap();
    let b = DMatrix::from_row_slice(2, 2, &[0.0, 0.3, -0.3, 0.0]);
    let a = DMatrix::from_diagonal(&DVector::from_vec(vec![-1.0, -4.0]));
    let fam2 = OperatorFamily::constant(a, vec![b], 1.0, 1.0).unwrap();
    let grid2 = TimeGrid::uniform(0.0, 1.0, 128).unwrap();
    let dw2 = BrownianIncrements::generate(&grid2, n_paths, 1, 22).unwrap();
    let gen2 = PlainGenerator::new(&space2, &fam2, &grid2).unwrap();
    let beta2 = vec![0.0; n_paths * 128];
    let prop2 = Propagator::tilted(&gen2, &beta2, &dw2).unwrap();
    let x0_2 = DVector::from_vec(vec![1.0, 0.5]);
    let ens2 = simulate_forward_with(
        &space2,
        &fam2,
        &FnProblem::zero(2, 1, 1),
        &ConstantPolicy(DVector::zeros(1)),
        x0_2.as_slice(),
        &dw2,
        Default::default(),
    )
    .unwrap();
    let eye: Vec<f64> = (0..n_paths)
        .flat_map(|_| DMatrix::<f64>::identity(2, 2).as_slice().to_vec())
        .collect();
    let basis2 = RegressionBasis::default_for(2);
    let big_p2 = solve_bsie(
        &prop2,
        &eye,
        &vec![0.0; n_paths * 128],
        &vec![0.0; n_paths * 128 * 4],
        &ens2,
        &basis2,
        12,
        1e-8,
    )
    .unwrap();
    let homog = verify_ito_formula(
        &gen2, &beta2, &dw2, &big_p2, None, &x0_2, &zero_f, &eye, &basis2, None,
    )
    .unwrap();

    let ok = scalar.residual_rms <= ITO_TOL
        && homog.sigma_rms <= ITO_TOL * homog.scale
        && homog.residual_rms <= ITO_TOL * homog.scale;
    verdict(
        5,
        ok,
        format!(
            "scalar residual={:.3e} (P(0) rel err {p0_err:.2e}); homogeneous sigma={:.3e} residual={:.3e} scale={:.3e}",
            scalar.residual_rms, homog.sigma_rms, homog.residual_rms, homog.scale
        ),
    );
}

fn criterion_06_bsde_oracles() {
    let (n_paths, steps, c) = (20_000, 256, 0.5);
    let space = GalerkinSpace::euclidean(1, 1).unwrap();
    let fam = OperatorFamily::constant(
        DMatrix::from_element(1, 1, -1.0),
        vec![DMatrix::zeros(1, 1)],
        1.0,
        0.0,
    )
    .unwrap();
    let grid = TimeGrid::uniform(0.0, 1.0, steps).unwrap();
    let zero = FnProblem::zero(1, 1, 1);
    let ens = simulate_forward(
        &space,
        &fam,
        &zero,
        &ConstantPolicy(DVector::zeros(1)),
        &DVector::from_element(1, 1.0),
        &grid,
        n_paths,
        5,
    )
    .unwrap();
    let basis = RegressionBasis::default_for(1);
    let opts = BsdeOptions::default();
    let lin = FnProblem::zero(1, 1, 1).with_generator(
        move |_, _, y, _, _| c * y,
        move |_, _, _, _, _| GeneratorGradient {
            x: DVector::zeros(1),
            y: c,
            z: DVector::zeros(1),
        },
        |_, _, _, _, _| DMatrix::zeros(3, 3),
    );
    let sol = solve_bsde(&lin, &ens, &vec![1.0; n_paths], &basis, &opts).unwrap();
    let exp_err = (sol.y0 - c.exp()).abs();
    let w_t: Vec<f64> = (0..n_paths)
        .map(|p| (0..steps).map(|i| ens.dw(p, i)[0]).sum())
        .collect();
    let mart = solve_bsde(&zero, &ens, &w_t, &basis, &opts).unwrap();
    let (_, se) = mean_se(&w_t);
    verdict(
        6,
        exp_err <= EXP_TOL && mart.y0.abs() <= SE_MULT * se,
        format!(
            "exp error={exp_err:.3e}; martingale Y0={:.3e} se={se:.3e}",
            mart.y0
        ),
    );
}

fn criterion_07_coercivity() {
    let times = [0.0, 0.5, 1.0];
    let (space, fam) = make_laplacian_space(4, 2, 1.0, 1.0).unwrap();
    let c = check_coercivity(&fam, &space, &times, 10_000, 17).unwrap();
    let s = check_quasi_skew(&fam, &space, &times, 10_000, 18).unwrap();
    let heat_ok = fam.delta == 1.0
        && fam.k_bound == 0.0
        && c.violations == 0
        && s.violations == 0
        && c.pass
        && s.pass;

    let model = make_heat_control_problem(4, 2, 1.0, 0.5, 3).unwrap();
    let mc = check_coercivity(&model.fam, &model.space, &times, 10_000, 17).unwrap();
    let ms = check_quasi_skew(&model.fam, &model.space, &times, 10_000, 18).unwrap();
    let model_ok = mc.violations == 0 && ms.violations == 0;

    let zero = OperatorFamily::constant(
        DMatrix::zeros(4, 4),
        vec![DMatrix::zeros(4, 4); 2],
        1.0,
        0.0,
    )
    .unwrap();
    let z = check_coercivity(&zero, &space, &times, 10_000, 17).unwrap();
    let zero_fails = !z.pass && z.violations > 0;
    verdict(
        7,
        heat_ok && model_ok && zero_fails,
        format!(
            "heat delta=1 K=0 violations={}+{}; heat example (beta 0.5) violations={}+{}; zero family violations={}",
            c.violations, s.violations, mc.violations, ms.violations, z.violations
        ),
    );
}

fn criterion_08_remainder_order() {
    let h = [1e-1, 1e-2, 1e-3];
    let run = |model: seelab::problems::Model| {
        let grid = TimeGrid::uniform(0.0, model.t_end, 64).unwrap();
        let base = simulate_forward(
            &model.space,
            &model.fam,
            model.problem.as_ref(),
            model.optimal.as_ref(),
            &model.x0,
            &grid,
            500,
            9,
        )
        .unwrap();
        let dir = DVector::from_element(model.state_dim(), 1.0).normalize();
        variational_expansion(
            &model.space,
            &model.fam,
            model.problem.as_ref(),
            &base,
            16,
            &dir,
            &h,
            2.0,
        )
        .unwrap()
    };
    let quad = run(make_quadratic_drift_model(1, 1.0).unwrap());
    let sine = run(make_sine_drift_model(2).unwrap());
    let order_ok = |t: &seelab::forward::RemainderSeries| {
        t.vanishing || t.slope.is_some_and(|s| s >= REMAINDER_SLOPE)
    };
    let q3 = quad.term("eps3").unwrap();
    let q1 = quad.term("eps1").unwrap();
    let s3 = sine.term("eps3").unwrap();
    verdict(
        8,
        order_ok(q3) && order_ok(q1) && order_ok(s3),
        format!(
            "quadratic eps3 vanishing={} slope={:?}, eps1 slope={:?}; sine eps3 slope={:?}",
            q3.vanishing, q3.slope, q1.slope, s3.slope
        ),
    );
}

fn criterion_09_semiconcavity_convexity() {
    let rep = example2_report();
    let semi = summary(rep, CheckKind::Semiconcavity);
    let (c_fit, c_se) = (
        f(semi, &["estimate", "c_fit"]),
        f(semi, &["estimate", "se"]),
    );
    let conv = summary(rep, CheckKind::Convexity);
    let (viol, v_se) = (f(conv, &["max_violation"]), f(conv, &["se"]));
    let example_ok = c_fit <= SE_MULT * c_se + ROUNDOFF && viol <= SE_MULT * v_se + ROUNDOFF;

    let pairs = vec![
        (
            DVector::from_vec(vec![0.0, 0.0]),
            DVector::from_vec(vec![1.0, 0.5]),
        ),
        (
            DVector::from_vec(vec![-1.0, 2.0]),
            DVector::from_vec(vec![0.5, -0.5]),
        ),
    ];
    let lam = [0.25, 0.5, 0.75];
    let concave = |x: &DVector<f64>| -x.norm_squared();
    let convex = |x: &DVector<f64>| x.norm_squared();
    let cx = convexity_probe(&concave, &pairs, &lam).unwrap();
    let sc_concave = semiconcavity_probe(&concave, &pairs, &lam).unwrap();
    let sc_convex = semiconcavity_probe(&convex, &pairs, &lam).unwrap();
    let counter_ok = !cx.pass
        && cx.max_violation > 0.0
        && (sc_convex.c_fit - 1.0).abs() <= 0.1
        && (sc_concave.c_fit + 1.0).abs() <= 0.1;
    verdict(
        9,
        example_ok && counter_ok,
        format!(
            "example2 C={c_fit:.2e} (se {c_se:.1e}) convexity violation={viol:.2e}; -|x|^2 violation={:.3} C(|x|^2)={:.3} C(-|x|^2)={:.3}",
            cx.max_violation, sc_convex.c_fit, sc_concave.c_fit
        ),
    );
}

fn criterion_10_smooth_case() {
    let rep = example2_report();
    let hjb = summary(rep, CheckKind::Hjb);
    let worst = f(hjb, &["max_relative_residual"]);
    let smooth = summary(rep, CheckKind::SmoothRelation);
    let p_rel = f(smooth, &["p_relative"]);
    let mut ok = worst <= ROUNDOFF
        && p_rel <= REL_P_TOL
        && rep.check(CheckKind::SmoothRelation).unwrap().pass;

    // wrong candidate 2<a, x>
    let model = example2_config().build_model().unwrap();
    let a = DVector::from_vec(vec![1.0, 0.5]);
    let (a1, a2) = (a.clone(), a.clone());
    let wrong = SmoothValue {
        v: Arc::new(move |_, x| 2.0 * a1.dot(x)),
        v_t: Arc::new(|_, _| 0.0),
        v_x: Arc::new(move |_, _| 2.0 * &a2),
        v_xx: Arc::new(move |_, x| DMatrix::zeros(x.len(), x.len())),
    };
    let x = DVector::from_vec(vec![1.0, 0.5]);
    let r_wrong = hjb_residual(
        &wrong,
        &model.space,
        &model.fam,
        model.problem.as_ref(),
        0.0,
        &x,
        &model.u_points,
    )
    .unwrap();
    ok &= r_wrong.abs() > 1e-6;

    let mut lq = ExperimentConfig::builtin("lq-oracle").unwrap();
    lq.grid.paths = 20_000;
    lq.checks = Some(vec![
        CheckKind::Adjoint,
        CheckKind::SmoothRelation,
        CheckKind::Hjb,
    ]);
    let lrep = run_experiment(&lq).unwrap();
    let ls = summary(&lrep, CheckKind::SmoothRelation);
    let (lp, lq_rel) = (f(ls, &["p_relative"]), f(ls, &["q_relative"]));
    let lhjb = f(summary(&lrep, CheckKind::Hjb), &["max_relative_residual"]);
    ok &= lrep.pass && lp <= REL_P_TOL && lq_rel <= REL_P_TOL;
    verdict(
        10,
        ok,
        format!(
            "example2 hjb={worst:.2e} p_rel={p_rel:.2e}; wrong candidate residual={r_wrong:.3}; LQ p_rel={lp:.3e} q_rel={lq_rel:.3e} hjb={lhjb:.2e}"
        ),
    );
}

fn criterion_11_determinism() {
    let mut outputs = Vec::new();
    for name in ["linear-example2", "lq-oracle"] {
        let mut cfg = ExperimentConfig::builtin(name).unwrap();
        cfg.grid.paths = 1000;
        cfg.grid.steps = 32;
        let mut texts = Vec::new();
        for workers in [1, 4, 8] {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(workers)
                .build()
                .unwrap();
            let rep = pool.install(|| run_experiment(&cfg)).unwrap();
            texts.push(report_json(&rep));
        }
        outputs.push((name, texts.iter().all(|t| *t == texts[0])));
    }
    verdict(
        11,
        outputs.iter().all(|(_, same)| *same),
        format!("{outputs:?} identical under 1/4/8 workers"),
    );
}

fn main() {
    let criteria: [(usize, fn()); 11] = [
        (1, criterion_01_example2_oracle),
        (2, criterion_02_mp_condition),
        (3, criterion_03_dpp_identity),
        (4, criterion_04_value_along_optimal),
        (5, criterion_05_ito_formula),
        (6, criterion_06_bsde_oracles),
        (7, criterion_07_coercivity),
        (8, criterion_08_remainder_order),
        (9, criterion_09_semiconcavity_convexity),
        (10, criterion_10_smooth_case),
        (11, criterion_11_determinism),
    ];
    std::panic::set_hook(Box::new(|info| eprintln!("{info}")));
    let mut failed = Vec::new();
    for (n, run) in criteria {
        *VERDICT.lock().unwrap() = None;
        let finished = std::panic::catch_unwind(run).is_ok();
        let pass = *VERDICT.lock().unwrap_or_else(|e| e.into_inner());
        match (finished, pass) {
            (true, Some(true)) => {}
            (true, Some(false)) => failed.push(n),
            _ => {
                println!("criterion {n}: FAIL (aborted before a verdict)");
                failed.push(n);
            }
        }
    }
    if failed.is_empty() {
        println!("acceptance: all {} criteria PASS", criteria.len());
    } else {
        println!("acceptance: FAILED criteria {failed:?}");
        std::process::exit(1);
    }
}

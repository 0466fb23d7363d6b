use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

use seelab::adjoint::solve_bsie;
use seelab::bsde::BsdeOptions;
use seelab::dpp::{ControlLattice, ValueEstimator};
use seelab::forward::{simulate_forward_with, BrownianIncrements, Propagator};
use seelab::mp::hamiltonian;
use seelab::problem::{ConstantPolicy, FnProblem, GeneratorGradient};
use seelab::regression::RegressionBasis;
use seelab::{GalerkinSpace, OperatorFamily, TimeGrid};

fn quadratic_problem(shift: f64) -> FnProblem {
    FnProblem::zero(2, 1, 1)
        .with_diffusion(
            |_, x, u| DMatrix::from_column_slice(2, 1, &[0.2 + 0.1 * u[0], 0.1 * x[0]]),
            |_, _, _| vec![DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.1, 0.0])],
            |_, _, _| vec![vec![DMatrix::zeros(2, 2); 2]],
        )
        .with_generator(
            move |_, x, y, z, u| {
                0.5 * x.norm_squared() + 0.1 * y + z[0] * z[0] + u[0] * u[0] + shift
            },
            |_, x, _, z, _| GeneratorGradient {
                x: x.clone(),
                y: 0.1,
                z: DVector::from_element(1, 2.0 * z[0]),
            },
            |_, _, _, _, _| {
                let mut h = DMatrix::zeros(4, 4);
                h[(0, 0)] = 1.0;
                h[(1, 1)] = 1.0;
                h[(3, 3)] = 2.0;
                h
            },
        )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    /// A constant added to the generator cancels in every MP residual difference.
    #[test]
    fn hamiltonian_difference_is_shift_invariant(
        x in prop::collection::vec(-2.0..2.0f64, 2),
        p in prop::collection::vec(-2.0..2.0f64, 2),
        v in -1.0..1.0f64,
        u in -1.0..1.0f64,
        c in -5.0..5.0f64,
    ) {
        let (x, p) = (DVector::from_vec(x), DVector::from_vec(p));
        let q = DMatrix::from_column_slice(2, 1, &[0.3, -0.2]);
        let z = DVector::from_element(1, 0.4);
        let (v, u) = (DVector::from_element(1, v), DVector::from_element(1, u));
        let diff = |pr: &FnProblem| {
            hamiltonian(pr, 0.1, &x, 0.2, &z, &v, &p, &q, &x, &u) - hamiltonian(pr, 0.1, &x, 0.2, &z, &u, &p, &q, &x, &u)
        };
        let base = diff(&quadratic_problem(0.0));
        let shifted = diff(&quadratic_problem(c));
        prop_assert!((base - shifted).abs() <= 1e-12 * (1.0 + base.abs() + c.abs()));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    /// With common random numbers, adding a control point never raises the value.
    #[test]
    fn enlarging_lattice_never_raises_value(extra in -1.5..1.5f64, x0 in -1.0..1.0f64, seed in 0u64..1000) {
        let space = GalerkinSpace::euclidean(2, 1).unwrap();
        let fam = OperatorFamily::constant(
            DMatrix::from_diagonal(&DVector::from_vec(vec![-1.0, -2.0])),
            vec![DMatrix::zeros(2, 2)],
            1.0,
            0.0,
        )
        .unwrap();
        let problem = quadratic_problem(0.0);
        let grid = TimeGrid::uniform(0.0, 1.0, 8).unwrap();
        let x = DVector::from_vec(vec![x0, 0.5]);
        let small = vec![DVector::from_element(1, 0.0), DVector::from_element(1, 1.0)];
        let mut large = small.clone();
        large.push(DVector::from_element(1, extra));
        let value = |pts: Vec<DVector<f64>>| {
            let lattice = ControlLattice::new(pts, 1, 16, 1).unwrap();
            let est = ValueEstimator::new(
                &space, &fam, &problem, lattice, &grid, 200, seed,
                RegressionBasis::default_for(2), BsdeOptions::default(),
            )
            .unwrap();
            est.estimate(0, &x).unwrap().value
        };
        prop_assert!(value(large) <= value(small));
    }

    /// Every stored second-adjoint matrix is symmetric.
    #[test]
    fn bsie_solution_is_symmetric(b01 in -0.5..0.5f64, xi01 in -1.0..1.0f64, seed in 0u64..1000) {
        let space = GalerkinSpace::euclidean(2, 1).unwrap();
        let b = DMatrix::from_row_slice(2, 2, &[0.1, b01, 0.0, -0.2]);
        let fam = OperatorFamily::constant(
            DMatrix::from_row_slice(2, 2, &[-1.0, 0.3, 0.0, -2.0]),
            vec![b],
            1.0,
            1.0,
        )
        .unwrap();
        let grid = TimeGrid::uniform(0.0, 1.0, 8).unwrap();
        let n_paths = 64;
        let dw = BrownianIncrements::generate(&grid, n_paths, 1, seed).unwrap();
        let prop = Propagator::plain(&space, &fam, &dw).unwrap();
        let ens = simulate_forward_with(
            &space, &fam, &FnProblem::zero(2, 1, 1), &ConstantPolicy(DVector::zeros(1)),
            &[1.0, -0.5], &dw, Default::default(),
        )
        .unwrap();
        let xi = DMatrix::from_row_slice(2, 2, &[1.0, xi01, xi01, 2.0]);
        let terminal: Vec<f64> = (0..n_paths).flat_map(|_| xi.as_slice().to_vec()).collect();
        let g: Vec<f64> = (0..n_paths * 8).flat_map(|_| [0.5, 0.1, 0.1, 0.2]).collect();
        let sol = solve_bsie(
            &prop, &terminal, &vec![0.3; n_paths * 8], &g, &ens,
            &RegressionBasis::default_for(2), 12, 1e-10,
        )
        .unwrap();
        for p in 0..n_paths {
            for i in 0..=8 {
                let m = sol.at(p, i);
                prop_assert!((&m - m.transpose()).amax() <= 1e-10);
            }
        }
    }
}

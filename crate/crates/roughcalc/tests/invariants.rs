use proptest::prelude::*;
use roughcalc::controlled::ControlledPath;
use roughcalc::diagnostics::convergence_rate;
use roughcalc::functions::ScalarFn;
use roughcalc::grid_paths::{holder_seminorm, increment, second_delta};
use roughcalc::integration::{rough_integral, rough_integral_path, rough_stochastic_integral};
use roughcalc::rde_flows::{rde_solve, solve_flow, VectorFieldSpec};
use roughcalc::rough_lift::{
    bracket, chen_defect, ibp_integral, ibp_integral_xm, ito_lift, joint_lift, sample_brownian, stratonovich_lift,
};
use roughcalc::{MartingaleSample, Tensor, TimeGrid, TwoParamGrid};

fn grid(n: usize) -> TimeGrid {
    TimeGrid::unit(1.0, n).unwrap()
}

fn close(a: &Tensor, b: &Tensor, tol: f64) -> bool {
    let scale = 1.0f64.max(a.max_abs()).max(b.max_abs());
    (a - b).max_abs() <= tol * scale
}

fn triple(n: usize) -> impl Strategy<Value = (usize, usize, usize)> {
    (0..=n, 0..=n, 0..=n).prop_map(|(a, b, c)| {
        let mut v = [a, b, c];
        v.sort_unstable();
        (v[0], v[1], v[2])
    })
}

fn strict_triple(n: usize) -> impl Strategy<Value = (usize, usize, usize)> {
    (0..n - 1).prop_flat_map(move |i| (Just(i), i + 1..n)).prop_flat_map(move |(i, k)| (Just(i), Just(k), k + 1..=n))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn increments_are_additive(seed in any::<u64>(), (i, k, j) in strict_triple(64)) {
        let p = sample_brownian(grid(64), 2, seed).unwrap();
        let split = &increment(&p, i, k).unwrap() + &increment(&p, k, j).unwrap();
        prop_assert!(close(&split, &increment(&p, i, j).unwrap(), 1e-12));
    }

    #[test]
    fn second_delta_of_additive_process_vanishes(seed in any::<u64>(), (i, k, j) in strict_triple(32)) {
        let p = sample_brownian(grid(32), 3, seed).unwrap();
        let a = TwoParamGrid::additive_from_path(&p);
        prop_assert!(second_delta(&a, i, k, j).unwrap().max_abs() <= 1e-12);
    }

    #[test]
    fn holder_seminorm_monotone_and_homogeneous(seed in any::<u64>(), gap in 1usize..8, c in -4.0f64..4.0, alpha in 0.2f64..0.6) {
        let p = sample_brownian(grid(64), 1, seed).unwrap();
        let h1 = holder_seminorm(&p, alpha, gap).unwrap();
        let h2 = holder_seminorm(&p, alpha, gap + 1).unwrap();
        prop_assert!(h2 <= h1);
        let hc = holder_seminorm(&p.scale(c), alpha, gap).unwrap();
        prop_assert!((hc - c.abs() * h1).abs() <= 1e-12 * (1.0 + hc));
    }

    #[test]
    fn ibp_identity_and_joint_bracket_blocks(seed in any::<u64>(), i in 0usize..16, len in 1usize..16, refine in 1usize..4) {
        let g = grid(32);
        let j = (i + len).min(32);
        let x = sample_brownian(g, 2, seed).unwrap();
        let m = sample_brownian(g, 1, seed ^ 0x9e37).unwrap();
        let pmx = ibp_integral(&m, &x).unwrap();
        let pxm = ibp_integral_xm(&x, &m).unwrap();
        let lhs = &pmx.value(i, j).unwrap() + &pxm.value(i, j).unwrap().transpose_last2();
        let rhs = increment(&m, i, j).unwrap().outer(&increment(&x, i, j).unwrap());
        prop_assert!(close(&lhs, &rhs, 1e-12));

        let rx = ito_lift(&x, refine, seed).unwrap();
        let ms = MartingaleSample::realized(m.clone()).unwrap();
        let joint = bracket(&joint_lift(&rx, &ms).unwrap());
        let (bx, bm) = (bracket(&rx), ms.bracket());
        for k in 0..=32 {
            let b = joint.path().value(k);
            prop_assert_eq!(b.at(&[0, 2]), 0.0);
            prop_assert_eq!(b.at(&[1, 2]), 0.0);
            prop_assert_eq!(b.at(&[2, 0]), 0.0);
            prop_assert!((b.at(&[2, 2]) - bm.path().value(k).at(&[0, 0])).abs() <= 1e-12);
            for (r, c) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                prop_assert!((b.at(&[r, c]) - bx.path().value(k).at(&[r, c])).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn ito_and_stratonovich_differ_by_half_dt_in_one_dimension(seed in any::<u64>()) {
        let g = grid(32);
        let w = sample_brownian(g, 1, seed).unwrap();
        let (ito, strat) = (ito_lift(&w, 1, 0).unwrap(), stratonovich_lift(&w, 1, 0).unwrap());
        for k in 0..32 {
            let diff = strat.area_step(k).item() - ito.area_step(k).item();
            prop_assert!((diff - 0.5 * w.step(k).item().powi(2)).abs() <= 1e-15);
        }
        prop_assert!(chen_defect(&strat, 17).unwrap() <= 1e-12);
        prop_assert_eq!(stratonovich_lift(&w, 4, seed).unwrap(), stratonovich_lift(&w, 4, seed).unwrap());
    }

    #[test]
    fn rough_integral_is_additive_and_linear((i, k, j) in strict_triple(32), seed in any::<u64>(), e in -6i32..6) {
        let g = grid(32);
        let w = sample_brownian(g, 2, seed).unwrap();
        let rx = stratonovich_lift(&w, 2, seed).unwrap();
        let y = w.map(|_, v| Tensor::vector(vec![v.data()[0].sin(), v.data()[1].cos()])).unwrap();
        let yp = w.map(|_, v| Tensor::matrix(2, 2, vec![v.data()[0].cos(), 0.0, 0.0, -v.data()[1].sin()])).unwrap();
        let cp = ControlledPath::new(y.clone(), yp.clone()).unwrap();
        let split = &rough_integral(&cp, &rx, i, k).unwrap() + &rough_integral(&cp, &rx, k, j).unwrap();
        prop_assert!(close(&split, &rough_integral(&cp, &rx, i, j).unwrap(), 1e-12));
        let c = 2f64.powi(e);
        let scaled = ControlledPath::new(y.scale(c), yp.scale(c)).unwrap();
        prop_assert_eq!(rough_integral(&scaled, &rx, i, j).unwrap(), rough_integral(&cp, &rx, i, j).unwrap().scale(c));

        let zero = MartingaleSample::zero(g, 2);
        let rsi = rough_stochastic_integral(&y, &yp, &zero, &rx).unwrap();
        prop_assert_eq!(rsi, rough_integral_path(&cp, &rx).unwrap());
    }

    #[test]
    fn flows_compose_exactly_at_grid_nodes(seed in any::<u64>(), (s, t, u) in triple(32), x0 in -1.5f64..1.5) {
        let vf = VectorFieldSpec::Componentwise {
            drift: vec![ScalarFn::Sin { amp: -0.5, freq: 1.0, phase: 0.0, offset: 0.0 }],
            diffusion: vec![vec![ScalarFn::Sin { amp: 0.3, freq: 1.0, phase: 0.0, offset: 0.8 }]],
        }
        .build()
        .unwrap();
        let rz = stratonovich_lift(&sample_brownian(grid(32), 1, seed).unwrap(), 1, 0).unwrap();
        let x = Tensor::vector(vec![x0]);
        let direct = solve_flow(&vf, &rz, s, u, &x, 0).unwrap();
        let mid = solve_flow(&vf, &rz, s, t, &x, 0).unwrap();
        let two = solve_flow(&vf, &rz, t, u, mid.state(t), 0).unwrap();
        prop_assert_eq!(direct.state(u), two.state(u));
    }

    #[test]
    fn linear_flow_jacobian_is_the_state_ratio(seed in any::<u64>(), a in -1.0f64..1.0, b in -1.0f64..1.0, x0 in 0.2f64..2.0) {
        let vf = VectorFieldSpec::Componentwise { drift: vec![ScalarFn::linear(a, 0.0)], diffusion: vec![vec![ScalarFn::linear(b, 0.0)]] }
            .build()
            .unwrap();
        let rz = stratonovich_lift(&sample_brownian(grid(32), 1, seed).unwrap(), 1, 0).unwrap();
        let fp = solve_flow(&vf, &rz, 0, 32, &Tensor::vector(vec![x0]), 2).unwrap();
        let path = rde_solve(&vf, &rz, 0, &Tensor::vector(vec![x0])).unwrap();
        for k in 0..=32 {
            prop_assert!((fp.jacobian(k).item() - path.value(k).item() / x0).abs() <= 1e-12 * (1.0 + fp.jacobian(k).item().abs()));
            prop_assert_eq!(fp.hessian(k).max_abs(), 0.0);
        }
    }

    #[test]
    fn convergence_rate_recovers_exact_power_laws(p in 0.2f64..3.0, c in 0.01f64..100.0, levels in 3usize..8) {
        let table: Vec<(f64, f64)> = (0..levels).map(|l| 0.5f64.powi(l as i32 + 2)).map(|h| (h, c * h.powf(p))).collect();
        let fit = convergence_rate(&table).unwrap();
        prop_assert!((fit.slope - p).abs() <= 1e-10);
        prop_assert!((fit.intercept - c.ln()).abs() <= 1e-9);
    }
}

#[test]
fn sampling_is_bit_identical_under_a_fixed_seed() {
    let g = grid(128);
    assert_eq!(sample_brownian(g, 3, 42).unwrap(), sample_brownian(g, 3, 42).unwrap());
    assert_ne!(sample_brownian(g, 3, 42).unwrap(), sample_brownian(g, 3, 43).unwrap());
    let w = sample_brownian(g, 2, 1).unwrap();
    assert_eq!(ito_lift(&w, 8, 5).unwrap(), ito_lift(&w, 8, 5).unwrap());
}

mod common;

use common::{grid1, grid2};
use mfg_lab::ensemble::{generate_ensemble, EnsembleSpec};
use mfg_lab::grid::{build_grid, diff, Deriv, Face, GridFn, GridSpec, Side};
use mfg_lab::norm::{norm, norm_squared, NormKind};
use mfg_lab::weight::{build_eta, eval_weight_bundle, weighted_integral, WeightParams};
use mfg_lab::Error;
use proptest::prelude::*;

fn max_err(a: &GridFn, f: impl Fn([f64; 2], f64) -> f64) -> f64 {
    let g = a.grid().clone();
    let exact = GridFn::sample(&g, f);
    a.values().iter().zip(exact.values()).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

#[test]
fn grid_examples() {
    let bad = GridSpec::one_d(1.0, 65, 1.0, 64, vec![Face::new(0, Side::High)]);
    match build_grid(&bad) {
        Err(Error::InvalidGrid(m)) => assert!(m.contains("nt"), "{m}"),
        other => panic!("{other:?}"),
    }
    assert!(build_grid(&GridSpec::one_d(1.0, 65, 1.0, 65, vec![])).is_err());

    let g = grid1(65, 65);
    assert_eq!(g.h()[0], 1.0 / 64.0);
    assert_eq!(g.tau(), 1.0 / 64.0);
    assert_eq!(g.k0(), 32);

    let g = build_grid(&GridSpec {
        lengths: vec![1.0, 2.0],
        t_final: 1.0,
        nx: vec![33, 33],
        nt: 33,
        gamma: vec![Face::new(0, Side::High)],
    })
    .unwrap();
    assert_eq!(g.h(), &[1.0 / 32.0, 2.0 / 32.0]);
}

#[test]
fn boundary_norm_of_cosine_is_root_t() {
    let g = grid1(65, 33);
    let f = GridFn::sample(&g, |x, _| (std::f64::consts::PI * x[0]).cos());
    let d = norm(&f, NormKind::DGamma).unwrap();
    assert!((d - 1.0).abs() < 1e-3, "{d}");
}

#[test]
fn every_norm_of_zero_is_zero() {
    let g = grid1(9, 9);
    let z = GridFn::zeros(g.clone(), mfg_lab::grid::FnKind::SpaceTime);
    for k in [NormKind::L2Q, NormKind::H21Q, NormKind::H21Interior { epsilon: 0.2 }, NormKind::DGamma] {
        assert_eq!(norm(&z, k).unwrap(), 0.0);
    }
    assert_eq!(norm(&z.at_t0().unwrap(), NormKind::H2Slice).unwrap(), 0.0);
}

#[test]
fn derivative_order_on_sine() {
    let errs: Vec<f64> = [17, 33, 65]
        .iter()
        .map(|&n| {
            let g = grid1(n, 9);
            let f = GridFn::sample(&g, |x, _| (std::f64::consts::PI * x[0]).sin());
            let d = diff(&f, Deriv::Dx(0)).unwrap();
            max_err(&d, |x, _| std::f64::consts::PI * (std::f64::consts::PI * x[0]).cos())
        })
        .collect();
    for w in errs.windows(2) {
        let order = (w[0] / w[1]).log2();
        assert!((1.7..=2.3).contains(&order), "order {order}");
    }
}

#[test]
fn mixed_derivative_out_of_range_is_rejected() {
    let g = grid1(9, 9);
    let f = GridFn::sample(&g, |x, t| x[0] * t);
    assert!(diff(&f, Deriv::Dxx(0, 1)).is_err());
}

#[test]
fn plain_weighted_integral_at_s_zero() {
    let g = grid1(33, 33);
    let f = GridFn::sample(&g, |x, t| 1.0 + x[0] * t);
    let eta = build_eta(&g, None).unwrap();
    let b = eval_weight_bundle(&eta, WeightParams::new(1.5, 0.0).unwrap(), &g).unwrap();
    let l2 = norm_squared(&f, NormKind::L2Q).unwrap();
    let w = weighted_integral(&f, &b, 0, 2).unwrap();
    assert!((w - 1.5f64.powi(2) * l2).abs() < 1e-12 * w);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn stencils_exact_on_quadratics(c in prop::array::uniform6(-3.0f64..3.0), n in 5usize..20) {
        let n = 2 * (n / 2) + 1;
        let g = grid1(n, n);
        let p = |x: [f64; 2], t: f64| c[0] + c[1] * x[0] + c[2] * x[0] * x[0] + c[3] * t + c[4] * t * t + c[5] * x[0] * t;
        let f = GridFn::sample(&g, p);
        let tol = 1e-9;
        prop_assert!(max_err(&diff(&f, Deriv::Dx(0)).unwrap(), |x, t| c[1] + 2.0 * c[2] * x[0] + c[5] * t) < tol);
        prop_assert!(max_err(&diff(&f, Deriv::Dxx(0, 0)).unwrap(), |_, _| 2.0 * c[2]) < tol * n as f64);
        prop_assert!(max_err(&diff(&f, Deriv::Dt).unwrap(), |x, t| c[3] + 2.0 * c[4] * t + c[5] * x[0]) < tol);
        prop_assert!(max_err(&diff(&f, Deriv::Dtt).unwrap(), |_, _| 2.0 * c[4]) < tol * n as f64);
        prop_assert!(max_err(&diff(&f, Deriv::DtDx(0)).unwrap(), |_, _| c[5]) < tol * n as f64);
    }

    #[test]
    fn mixed_stencil_exact_on_bilinear(a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let g = grid2(9, 5);
        let f = GridFn::sample(&g, |x, _| a * x[0] * x[1] + b * x[1] * x[1]);
        prop_assert!(max_err(&diff(&f, Deriv::Dxx(0, 1)).unwrap(), |_, _| a) < 1e-9);
        prop_assert!(max_err(&diff(&f, Deriv::Dxx(1, 1)).unwrap(), |_, _| 2.0 * b) < 1e-8);
    }

    #[test]
    fn quadrature_exact_on_constants(c in -5.0f64..5.0, l in 0.5f64..3.0, t in 0.5f64..2.0) {
        let g = build_grid(&GridSpec::one_d(l, 11, t, 9, vec![Face::new(0, Side::Low)])).unwrap();
        let f = GridFn::sample(&g, |_, _| c);
        let n = norm(&f, NormKind::L2Q).unwrap();
        prop_assert!((n - c.abs() * (l * t).sqrt()).abs() <= 1e-12 * (1.0 + n));
    }

    #[test]
    fn space_time_norm_reassembles_from_parts(seed in any::<u64>(), dim in 1usize..=2) {
        let g = if dim == 1 { grid1(17, 9) } else { grid2(9, 9) };
        let ens = generate_ensemble(seed, &EnsembleSpec { members: 1, ..EnsembleSpec::default() }, &g).unwrap();
        let u = &ens.members[0].u;
        let l2 = |f: &GridFn| norm_squared(f, NormKind::L2Q).unwrap();
        let mut parts = l2(u) + l2(&diff(u, Deriv::Dt).unwrap());
        for i in 0..dim {
            parts += l2(&diff(u, Deriv::Dx(i)).unwrap());
            for j in 0..dim {
                parts += l2(&diff(u, Deriv::Dxx(i, j)).unwrap());
            }
        }
        let whole = norm_squared(u, NormKind::H21Q).unwrap();
        prop_assert!((whole - parts).abs() <= 1e-12 * whole);
    }

    #[test]
    fn interior_norm_shrinks_with_margin(seed in any::<u64>(), e1 in 0.02f64..0.45, e2 in 0.02f64..0.45) {
        let g = grid1(17, 33);
        let ens = generate_ensemble(seed, &EnsembleSpec { members: 1, ..EnsembleSpec::default() }, &g).unwrap();
        let u = &ens.members[0].u;
        let (lo, hi) = if e1 <= e2 { (e1, e2) } else { (e2, e1) };
        let a = norm(u, NormKind::H21Interior { epsilon: lo });
        let b = norm(u, NormKind::H21Interior { epsilon: hi });
        if let (Ok(a), Ok(b)) = (a, b) {
            prop_assert!(a >= b);
        }
    }

    #[test]
    fn derivatives_are_linear(s1 in any::<u64>(), s2 in any::<u64>(), a in -2.0f64..2.0, b in -2.0f64..2.0) {
        let g = grid2(9, 9);
        let spec = EnsembleSpec { members: 1, ..EnsembleSpec::default() };
        let f = generate_ensemble(s1, &spec, &g).unwrap().members.remove(0).u;
        let h = generate_ensemble(s2, &spec, &g).unwrap().members.remove(0).v;
        let comb = f.scale(a).add(&h.scale(b)).unwrap();
        for d in [Deriv::Dt, Deriv::Dx(1), Deriv::Dxx(0, 1), Deriv::DtDxx(1, 1)] {
            let lhs = diff(&comb, d).unwrap();
            let rhs = diff(&f, d).unwrap().scale(a).add(&diff(&h, d).unwrap().scale(b)).unwrap();
            let scale = 1.0 + lhs.max_abs();
            prop_assert!(lhs.sub(&rhs).unwrap().max_abs() <= 1e-12 * scale * 100.0);
        }
    }
}

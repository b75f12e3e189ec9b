mod common;

use common::{e, grid1, grid2, rich_coeffs, sample};
use mfg_lab::coefficients::{
    apply_operator, check_ellipticity, coefficient_bound, conormal, CoeffSet, CoeffSpec, OpKind, OperatorSpec,
};
use mfg_lab::ensemble::{generate_ensemble, EnsembleSpec};
use mfg_lab::estimate::{evaluate_estimate, EstimateInput, EstimateKind};
use mfg_lab::grid::GridFn;
use mfg_lab::weight::{build_eta, eval_weight_bundle, WeightParams};
use proptest::prelude::*;

fn diag2(a11: &str, a22: &str) -> CoeffSpec {
    let op = OperatorSpec {
        principal: Some(vec![vec![e(a11), e("0")], vec![e("0"), e(a22)]]),
        ..OperatorSpec::default()
    };
    CoeffSpec { a: op.clone(), b: op, ..CoeffSpec::default() }
}

#[test]
fn ellipticity_examples() {
    let g = grid2(9, 5);
    let id = sample(&CoeffSpec::default(), &g);
    assert_eq!(check_ellipticity(&id).chi_min, 1.0);
    assert_eq!(coefficient_bound(&id).unwrap(), 4.0);
    let spec = CoeffSpec { chi: 0.1, ..diag2("1", "-1") };
    let bad = spec.resolved(2).unwrap().sample(&g);
    assert!(bad.is_err() || !check_ellipticity(&bad.unwrap()).passes);

    let g1 = grid1(65, 5);
    let c: CoeffSet = sample(
        &toml::from_str("[a]\nprincipal = [[\"2 + sin(pi*x)\"]]\n[b]\nprincipal = [[\"2 + sin(pi*x)\"]]\n").unwrap(),
        &g1,
    );
    // sin(pi x) >= 0 on [0, 1]: the minimum sits at the endpoints.
    assert!((check_ellipticity(&c).chi_min - 2.0).abs() < 1e-12);
    assert!((coefficient_bound(&c).unwrap() - 2.0 * (3.0 + std::f64::consts::PI)).abs() < 0.01);
}

#[test]
fn ellipticity_is_invariant_under_axis_relabeling() {
    let g = grid2(9, 5);
    let a = sample(&diag2("1 + x1", "2 + 0.5*x2"), &g);
    let b = sample(&diag2("2 + 0.5*x2", "1 + x1"), &g);
    assert_eq!(check_ellipticity(&a).chi_min, check_ellipticity(&b).chi_min);
}

#[test]
fn operator_examples() {
    let g = grid1(17, 9);
    let c = sample(&CoeffSpec::default(), &g);
    let x2 = GridFn::sample(&g, |x, _| x[0] * x[0]);
    let lap = apply_operator(OpKind::A, &x2, &c).unwrap();
    assert!(lap.values().iter().all(|v| (v - 2.0).abs() < 1e-9));
    let ones = GridFn::sample(&g, |_, _| 1.0);
    assert!(apply_operator(OpKind::A, &ones, &c).unwrap().max_abs() < 1e-12);
    let id: CoeffSet = sample(&toml::from_str("coupling = { \"0\" = \"1\" }").unwrap(), &g);
    let a0 = apply_operator(OpKind::A0, &x2, &id).unwrap();
    assert_eq!(a0.values(), x2.values());

    let lin = GridFn::sample(&g, |x, _| x[0]);
    let cn = conormal(&lin, &c, OpKind::A).unwrap();
    let nt = g.nt();
    // Faces are ordered low then high, each over all times.
    assert!(cn.values()[..nt].iter().all(|v| (v + 1.0).abs() < 1e-12));
    assert!(cn.values()[nt..].iter().all(|v| (v - 1.0).abs() < 1e-12));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn operators_are_linear(s1 in any::<u64>(), s2 in any::<u64>(), a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let g = grid1(17, 9);
        let c = sample(&rich_coeffs(), &g);
        let spec = EnsembleSpec { members: 1, ..EnsembleSpec::default() };
        let f = generate_ensemble(s1, &spec, &g).unwrap().members.remove(0).u;
        let h = generate_ensemble(s2, &spec, &g).unwrap().members.remove(0).v;
        let comb = f.scale(a).add(&h.scale(b)).unwrap();
        for kind in [OpKind::A, OpKind::B, OpKind::A0] {
            let lhs = apply_operator(kind, &comb, &c).unwrap();
            let rhs = apply_operator(kind, &f, &c).unwrap().scale(a)
                .add(&apply_operator(kind, &h, &c).unwrap().scale(b)).unwrap();
            prop_assert!(lhs.sub(&rhs).unwrap().max_abs() <= 1e-12 * (1.0 + lhs.max_abs()) * 100.0);
        }
    }

    #[test]
    fn cosine_ensembles_have_zero_conormal(seed in any::<u64>(), dim in 1usize..=2) {
        let (g, spec) = if dim == 1 {
            (grid1(33, 9), rich_coeffs())
        } else {
            (grid2(17, 9), diag2("1 + 0.3*x1*x2", "2 - t"))
        };
        let c = sample(&spec, &g);
        let ens = generate_ensemble(seed, &EnsembleSpec { members: 3, ..EnsembleSpec::default() }, &g).unwrap();
        for m in &ens.members {
            prop_assert!(conormal(&m.u, &c, OpKind::A).unwrap().max_abs() <= 1e-10);
            prop_assert!(conormal(&m.v, &c, OpKind::B).unwrap().max_abs() <= 1e-10);
        }
    }

    #[test]
    fn weight_is_symmetric_and_bounded(lambda in 0.2f64..3.0, s in 0.0f64..80.0) {
        let g = grid1(17, 17);
        let eta = build_eta(&g, None).unwrap();
        let b = eval_weight_bundle(&eta, WeightParams::new(lambda, s).unwrap(), &g).unwrap();
        let ns = g.n_space();
        let nt = g.nt();
        for k in 1..nt - 1 {
            for j in 0..ns {
                let x = g.point(j);
                prop_assert_eq!(b.alpha_at(x, g.t(k)), b.alpha_at(x, g.t_final() - g.t(k)));
                prop_assert!(b.alpha_at(x, g.t(k)) < 0.0);
                let w = b.weight()[k * ns + j];
                prop_assert!((0.0..=1.0).contains(&w));
                prop_assert_eq!(w, b.weight()[(nt - 1 - k) * ns + j]);
            }
        }
        if s > 0.0 {
            prop_assert!(b.weight()[..ns].iter().all(|w| *w == 0.0));
        }
    }

    #[test]
    fn estimate_ratios_are_scale_free(seed in any::<u64>(), c in prop_oneof![-10.0f64..-0.1, 0.1f64..10.0]) {
        let g = grid1(17, 17);
        let coeffs = sample(&rich_coeffs(), &g);
        let eta = build_eta(&g, Some(&coeffs)).unwrap();
        let bundle = eval_weight_bundle(&eta, WeightParams::new(1.0, 4.0).unwrap(), &g).unwrap();
        let m = generate_ensemble(seed, &EnsembleSpec { members: 1, ..EnsembleSpec::default() }, &g)
            .unwrap().members.remove(0);
        let (u2, v2) = (m.u.scale(c), m.v.scale(c));
        for kind in [EstimateKind::Forward, EstimateKind::Backward, EstimateKind::Coupled, EstimateKind::CoupledDt] {
            let base = EstimateInput { u: &m.u, v: &m.v, coeffs: &coeffs, forcing: None, sources: None };
            let scaled = EstimateInput { u: &u2, v: &v2, ..base };
            let r1 = evaluate_estimate(kind, &base, &bundle).unwrap().ratio.unwrap();
            let r2 = evaluate_estimate(kind, &scaled, &bundle).unwrap().ratio.unwrap();
            prop_assert!((r1 - r2).abs() <= 1e-12 * r1, "{kind}: {r1} vs {r2}");
        }
    }

    #[test]
    fn normalization_offset_cancels(seed in any::<u64>(), offset in -5.0f64..5.0) {
        let g = grid1(17, 17);
        let coeffs = sample(&rich_coeffs(), &g);
        let eta = build_eta(&g, Some(&coeffs)).unwrap();
        let bundle = eval_weight_bundle(&eta, WeightParams::new(1.0, 2.0).unwrap(), &g).unwrap();
        let shifted = bundle.with_reference_offset(offset);
        let m = generate_ensemble(seed, &EnsembleSpec { members: 1, ..EnsembleSpec::default() }, &g)
            .unwrap().members.remove(0);
        let input = EstimateInput { u: &m.u, v: &m.v, coeffs: &coeffs, forcing: None, sources: None };
        let r1 = evaluate_estimate(EstimateKind::Coupled, &input, &bundle).unwrap().ratio.unwrap();
        let r2 = evaluate_estimate(EstimateKind::Coupled, &input, &shifted).unwrap().ratio.unwrap();
        prop_assert!((r1 - r2).abs() <= 1e-12 * r1);
    }
}

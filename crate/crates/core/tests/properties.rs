use moe_lab::adversarial::{construct_gn_polynomial, ratio_curve, Construction};
use moe_lab::estimate::{gauge_fix, GaugeRule};
use moe_lab::identify::{build_family, draw_params, verdict, Domain, FamilyMode};
use moe_lab::seed::derive_seed;
use moe_lab::{
    l2_distance, loss_d1, loss_d2, loss_d3, voronoi_assign, Activation, Atom, ExpertSpec, InputDistribution,
    MixingMeasure, VoronoiLoss,
};
use proptest::prelude::*;
use proptest::strategy::ValueTree;
use std::collections::HashSet;

const FAMILIES: [ExpertSpec; 4] = [
    ExpertSpec::Linear,
    ExpertSpec::Polynomial(3),
    ExpertSpec::Ridge(Activation::Sigmoid),
    ExpertSpec::NormalizedRidge(Activation::Tanh),
];

fn measure(spec: ExpertSpec, d: usize, k: usize, raw: &[f64]) -> MixingMeasure {
    let stride = 2 * d + 2;
    MixingMeasure::from_flat(spec, d, &raw[..k * stride]).unwrap()
}

prop_compose! {
    fn arb_case()(spec in 0usize..4, d in 1usize..=2, k in 1usize..=3,
                  raw in prop::collection::vec(-2.0f64..2.0, 18),
                  x in prop::collection::vec(-1.0f64..1.0, 2))
        -> (MixingMeasure, Vec<f64>) {
        (measure(FAMILIES[spec], d, k, &raw), x[..d].to_vec())
    }
}

prop_compose! {
    /// Fitted and true measures sharing family and dimension.
    fn arb_pair()(spec in 0usize..4, d in 1usize..=2, kg in 1usize..=3, kt in 1usize..=3,
                  raw in prop::collection::vec(-2.0f64..2.0, 36))
        -> (MixingMeasure, MixingMeasure) {
        (measure(FAMILIES[spec], d, kg, &raw[..18]), measure(FAMILIES[spec], d, kt, &raw[18..]))
    }
}

/// Fourth-order central difference of f_G in flat coordinate `j`.
fn fd(g: &MixingMeasure, x: &[f64], j: usize) -> f64 {
    let h = 1e-3;
    let at = |s: f64| {
        let mut p = g.to_flat();
        p[j] += s;
        MixingMeasure::from_flat(g.expert(), g.dim(), &p).unwrap().eval(x).unwrap()
    };
    (8.0 * (at(h) - at(-h)) - (at(2.0 * h) - at(-2.0 * h))) / (12.0 * h)
}

fn flat_grad(g: &MixingMeasure, x: &[f64]) -> Vec<f64> {
    g.grad(x)
        .unwrap()
        .into_iter()
        .flat_map(|a| std::iter::once(a.beta0).chain(a.beta1).chain(a.eta))
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn gate_is_a_probability_vector((g, x) in arb_case()) {
        let w = g.gate_weights(&x).unwrap();
        prop_assert!(w.iter().all(|&v| v > 0.0 && v <= 1.0));
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn gate_is_translation_invariant((g, x) in arb_case(), c0 in -3.0f64..3.0, v in prop::collection::vec(-3.0f64..3.0, 2)) {
        let t = g.translated(c0, &v[..g.dim()]);
        for (a, b) in g.gate_weights(&x).unwrap().iter().zip(t.gate_weights(&x).unwrap()) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn regression_lies_between_experts((g, x) in arb_case()) {
        let h = g.expert_values(&x).unwrap();
        let f = g.eval(&x).unwrap();
        let lo = h.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = h.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let slack = 1e-12 * (1.0 + lo.abs().max(hi.abs()));
        prop_assert!(f >= lo - slack && f <= hi + slack, "{lo} <= {f} <= {hi}");
    }

    #[test]
    fn gradient_matches_finite_differences((g, x) in arb_case()) {
        for (j, a) in flat_grad(&g, &x).into_iter().enumerate() {
            let n = fd(&g, &x, j);
            let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-6);
            prop_assert!(rel <= 1e-6, "coordinate {j}: analytic {a}, numeric {n}");
        }
    }

    #[test]
    fn linear_equals_first_degree_polynomial(raw in prop::collection::vec(-2.0f64..2.0, 18), d in 1usize..=2, k in 1usize..=3, x in prop::collection::vec(-1.0f64..1.0, 2)) {
        let lin = measure(ExpertSpec::Linear, d, k, &raw);
        let poly = measure(ExpertSpec::Polynomial(1), d, k, &raw);
        let x = &x[..d];
        prop_assert!((lin.eval(x).unwrap() - poly.eval(x).unwrap()).abs() <= 1e-15);
        for (a, b) in flat_grad(&lin, x).iter().zip(flat_grad(&poly, x)) {
            prop_assert!((a - b).abs() <= 1e-15);
        }
    }

    #[test]
    fn gauge_fix_preserves_the_regression_function((g, x) in arb_case(), pin in any::<bool>()) {
        let truth = MixingMeasure::from_flat(g.expert(), g.dim(), &g.to_flat()[..2 * g.dim() + 2]).unwrap();
        let rule = if pin { GaugeRule::PinLast } else { GaugeRule::PostHocTranslate };
        let fixed = gauge_fix(&g, &truth, rule).unwrap();
        let scale = 1.0 + g.eval(&x).unwrap().abs();
        prop_assert!((fixed.eval(&x).unwrap() - g.eval(&x).unwrap()).abs() <= 1e-12 * scale);
    }

    #[test]
    fn losses_are_nonnegative_and_vanish_at_truth((g, t) in arb_pair()) {
        let mut losses = vec![VoronoiLoss::D1];
        if g.expert().has_affine_layout() {
            losses.extend([VoronoiLoss::D2, VoronoiLoss::D3 { r: 1.0 }, VoronoiLoss::D3 { r: 2.5 }]);
        }
        for loss in losses {
            prop_assert!(loss.evaluate(&g, &t).unwrap().total >= 0.0);
            prop_assert!(loss.evaluate(&t, &t).unwrap().total <= 1e-12);
        }
    }

    #[test]
    fn voronoi_cells_ignore_fitted_order((g, t) in arb_pair(), seed in any::<u64>()) {
        let k = g.num_atoms();
        let mut perm: Vec<usize> = (0..k).collect();
        perm.sort_by_key(|&i| derive_seed(seed, &[i as u64]));
        let shuffled = MixingMeasure::new(g.expert(), perm.iter().map(|&i| g.atoms()[i].clone()).collect()).unwrap();
        let a = voronoi_assign(&g, &t).unwrap();
        let b = voronoi_assign(&shuffled, &t).unwrap();
        for (ca, cb) in a.cells.iter().zip(&b.cells) {
            let sa: HashSet<usize> = ca.iter().copied().collect();
            let sb: HashSet<usize> = cb.iter().map(|&i| perm[i]).collect();
            prop_assert_eq!(sa, sb);
        }
    }

    #[test]
    fn d3_is_continuous_in_r((g, t) in arb_pair(), r in 1.0f64..4.0) {
        prop_assume!(g.expert().has_affine_layout());
        let base = loss_d3(&g, &t, r).unwrap().total;
        let mut last = f64::INFINITY;
        for e in [1e-2, 1e-4, 1e-6] {
            let gap = (loss_d3(&g, &t, r + e).unwrap().total - base).abs();
            prop_assert!(gap <= last + 1e-12);
            last = gap;
        }
        prop_assert!(last <= 1e-4 * (1.0 + base));
    }

    #[test]
    fn l2_distance_obeys_the_triangle_inequality(raw in prop::collection::vec(-2.0f64..2.0, 36), spec in 0usize..4) {
        let spec = FAMILIES[spec];
        let a = measure(spec, 1, 2, &raw[..8]);
        let b = measure(spec, 1, 2, &raw[8..16]);
        let c = measure(spec, 1, 3, &raw[16..28]);
        let mu = InputDistribution::Uniform { dim: 1 };
        let d = |p: &MixingMeasure, q: &MixingMeasure| l2_distance(p, q, &mu, 256).unwrap();
        prop_assert!(d(&a, &c) <= d(&a, &b) + d(&b, &c) + 1e-9);
    }

    #[test]
    fn small_perturbations_give_positive_loss((t, _x) in arb_case(), j in 0usize..18, sign in any::<bool>()) {
        let mut p = t.to_flat();
        let j = j % p.len();
        p[j] += if sign { 1e-3 } else { -1e-3 };
        let g = MixingMeasure::from_flat(t.expert(), t.dim(), &p).unwrap();
        prop_assert!(loss_d1(&g, &t).unwrap().total > 0.0);
        if t.expert().has_affine_layout() {
            prop_assert!(loss_d2(&g, &t).unwrap().total > 0.0);
            prop_assert!(loss_d3(&g, &t, 2.0).unwrap().total > 0.0);
        }
    }

    #[test]
    fn duplicated_column_is_detected(spec in 0usize..4, seed in any::<u64>(), k in 1usize..=2, col in 0usize..64) {
        let spec = FAMILIES[spec];
        let domain = Domain::default_for(spec);
        let params = draw_params(k, 1, domain, seed);
        let m = build_family(spec, &params, FamilyMode::Identifiability, domain, seed).unwrap();
        let dup = m.with_duplicate(col % m.cols());
        prop_assert!(verdict(&dup, 1e-6).unwrap().min_singular_ratio <= 1e-12);
    }

    #[test]
    fn linear_witness_curve_decreases(r in 1.0f64..3.0, b in -1.0f64..3.0, w in -1.0f64..1.0) {
        let base = MixingMeasure::reference_truth(ExpertSpec::Linear).unwrap();
        let mut atoms = base.atoms().to_vec();
        atoms[0] = Atom::affine(w, atoms[0].beta1.clone(), atoms[0].a().to_vec(), b);
        let truth = MixingMeasure::new(ExpertSpec::Linear, atoms).unwrap();
        let curve = ratio_curve(&truth, r, &[10, 100, 1000], &InputDistribution::Uniform { dim: 1 }, Construction::Polynomial).unwrap();
        prop_assert!(curve.strictly_decreasing(), "{:?}", curve.ratios);
        prop_assert!(curve.losses.iter().all(|&l| l > 0.0));
    }
}

#[test]
fn gradients_over_a_thousand_draws_per_family() {
    let mut runner = proptest::test_runner::TestRunner::deterministic();
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let (g, x) = arb_case().new_tree(&mut runner).unwrap().current();
        for (j, a) in flat_grad(&g, &x).into_iter().enumerate() {
            let n = fd(&g, &x, j);
            worst = worst.max((a - n).abs() / a.abs().max(n.abs()).max(1e-6));
        }
    }
    assert!(worst <= 1e-6, "worst relative error {worst}");
}

#[test]
fn merged_witness_gate_matches_the_shifted_truth() {
    let truth = MixingMeasure::reference_truth(ExpertSpec::Linear).unwrap();
    for r in [1.0, 2.0, 3.0] {
        for n in [10u64, 100, 1000] {
            let g = construct_gn_polynomial(&truth, n, r).unwrap();
            let split = &g.atoms()[..2];
            let merged_weight: f64 = split.iter().map(Atom::weight).sum();
            let mut merged = vec![Atom::affine(merged_weight.ln(), split[0].beta1.clone(), vec![0.0], 0.0)];
            merged.extend(g.atoms()[2..].iter().cloned());
            // the split adds 1/n^{r+1} of mass, so compare against a truth with
            // exp(β*01) raised by the same amount
            let mut shifted = truth.atoms().to_vec();
            shifted[0].beta0 = (shifted[0].weight() + (n as f64).powf(-(r + 1.0))).ln();
            let merged = MixingMeasure::new(ExpertSpec::Linear, merged).unwrap();
            let shifted = MixingMeasure::new(ExpertSpec::Linear, shifted).unwrap();
            for i in 0..=64 {
                let x = [i as f64 / 64.0 * 2.0 - 1.0];
                for (a, b) in merged.gate_weights(&x).unwrap().iter().zip(shifted.gate_weights(&x).unwrap()) {
                    assert!((a - b).abs() <= 1e-14, "n={n} r={r} x={x:?}: {a} vs {b}");
                }
            }
        }
    }
}

#[test]
fn per_replication_seeds_are_distinct_on_the_grid() {
    let mut seen = HashSet::new();
    let sizes: std::collections::BTreeSet<usize> =
        moe_lab::harness::full_grid().into_iter().chain(moe_lab::harness::quick_grid()).collect();
    for master in [0u64, 1, 42] {
        for &n in &sizes {
            for rep in 0..20u64 {
                assert!(seen.insert((master, derive_seed(master, &[n as u64, rep]))));
            }
        }
    }
    let distinct: HashSet<u64> = seen.iter().map(|&(_, s)| s).collect();
    assert_eq!(distinct.len(), seen.len());
}

#[test]
fn scaling_parameter_gaps_scales_loss_branches() {
    // atom 1 gets a singleton cell, atom 2's cell holds two fitted atoms
    let truth = MixingMeasure::reference_truth(ExpertSpec::Ridge(Activation::Sigmoid)).unwrap();
    let at = |t: f64| {
        let s = &truth.atoms();
        let half = (0.5 * s[1].weight()).ln();
        MixingMeasure::new(
            truth.expert(),
            vec![
                Atom::affine(s[0].beta0, vec![1.0 + 0.3 * t], vec![-1.0 - 0.2 * t], 2.0 + 0.1 * t),
                Atom::affine(half, vec![0.2 * t], vec![1.0 + 0.1 * t], 2.0 - 0.3 * t),
                Atom::affine(half, vec![-0.1 * t], vec![1.0 - 0.2 * t], 2.0 + 0.2 * t),
            ],
        )
        .unwrap()
    };
    for loss in [loss_d1, loss_d2] {
        let one = loss(&at(1.0), &truth).unwrap();
        for t in [0.5, 0.25, 0.1] {
            let l = loss(&at(t), &truth).unwrap();
            assert!((l.per_cell_terms[0] - t * one.per_cell_terms[0]).abs() <= 1e-12);
            assert!((l.per_cell_terms[1] - t * t * one.per_cell_terms[1]).abs() <= 1e-12);
        }
    }
}

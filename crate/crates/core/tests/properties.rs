use std::path::Path;

use proptest::prelude::*;

use curveseg::basis::PolynomialBasis;
use curveseg::curves::{
    parse_curves_csv, render_curves_csv, split_by_class, Curve, CurveSet, LabeledCurveSet, TimeGrid,
};
use curveseg::fmda::{classify, train, Method, TrainSpec};
use curveseg::logistic::{regime_probabilities, LogisticWeights};
use curveseg::mixrhlp::{
    e_step, fit, mixture_log_density, FitConfig, MixRhlpParams, MixRhlpSpec, RegimeParams, RhlpParams,
};
use curveseg::numeric::log_sum_exp;

fn grid(m: usize) -> TimeGrid {
    TimeGrid::regular(0.0, 1.0, m).unwrap()
}

fn curve_values(m: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-50.0..50.0f64, m)
}

fn labeled_set() -> impl Strategy<Value = LabeledCurveSet> {
    (2usize..8, 1usize..4).prop_flat_map(|(m, g)| {
        prop::collection::vec((curve_values(m), 0..g), g..12).prop_map(move |rows| {
            let mut labels: Vec<usize> = rows.iter().map(|r| r.1).collect();
            // Every class present keeps the set well formed.
            for (c, y) in labels.iter_mut().take(g).enumerate() {
                *y = c;
            }
            LabeledCurveSet::new(
                grid(m),
                rows.into_iter().map(|r| Curve::new(r.0).unwrap()).collect(),
                labels,
                g,
            )
            .unwrap()
        })
    })
}

fn logistic_rows(l: usize) -> impl Strategy<Value = Vec<[f64; 2]>> {
    prop::collection::vec(prop::array::uniform2(-8.0..8.0f64), l)
}

fn rhlp(l: usize, p: usize) -> impl Strategy<Value = RhlpParams> {
    (
        logistic_rows(l),
        prop::collection::vec((prop::collection::vec(-5.0..5.0f64, p + 1), 0.05..4.0f64), l),
    )
        .prop_map(|(rows, regimes)| {
            RhlpParams::new(
                LogisticWeights::canonical(rows).unwrap(),
                regimes
                    .into_iter()
                    .map(|(beta, sigma2)| RegimeParams { beta, sigma2 })
                    .collect(),
            )
            .unwrap()
        })
}

fn mixture() -> impl Strategy<Value = MixRhlpParams> {
    (1usize..4, 1usize..4, 0usize..3).prop_flat_map(|(k, l, p)| {
        (
            prop::collection::vec(0.05..1.0f64, k),
            prop::collection::vec(rhlp(l, p), k),
        )
            .prop_map(move |(w, comps)| {
                let s: f64 = w.iter().sum();
                let mut alphas: Vec<f64> = w.iter().map(|v| v / s).collect();
                let rest: f64 = alphas[1..].iter().sum();
                alphas[0] = 1.0 - rest;
                MixRhlpParams::new(alphas, comps, PolynomialBasis::new(p)).unwrap()
            })
    })
}

fn curves_for(m: usize, n: usize) -> impl Strategy<Value = CurveSet> {
    prop::collection::vec(prop::collection::vec(-6.0..6.0f64, m), n).prop_map(move |rows| {
        CurveSet::new(grid(m), rows.into_iter().map(|v| Curve::new(v).unwrap()).collect()).unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn csv_round_trip(set in labeled_set()) {
        let mut buf = Vec::new();
        render_curves_csv(&set, &mut buf).unwrap();
        let back = parse_curves_csv(buf.as_slice(), Path::new("memory"), true).unwrap();
        prop_assert_eq!(back.grid(), set.grid());
        prop_assert_eq!(back.curves(), set.curves());
        prop_assert_eq!(back.labels(), set.labels());
    }

    #[test]
    fn split_then_merge_restores_every_curve(set in labeled_set()) {
        let parts = split_by_class(&set);
        prop_assert_eq!(parts.len(), set.num_classes());
        prop_assert_eq!(parts.iter().map(|p| p.1.len()).sum::<usize>(), set.len());
        for (g, part) in &parts {
            let expected: Vec<&Curve> = set.curves().iter().zip(set.labels()).filter(|(_, &y)| y == *g).map(|(c, _)| c).collect();
            prop_assert_eq!(part.curves().iter().collect::<Vec<_>>(), expected);
        }
    }

    #[test]
    fn regime_probabilities_ignore_common_shift(
        rows in (1usize..6).prop_flat_map(logistic_rows),
        shift in prop::array::uniform2(-20.0..20.0f64),
        t in 0.0..1.0f64,
    ) {
        let base = regime_probabilities(&LogisticWeights::canonical(rows.clone()).unwrap(), t);
        let moved: Vec<[f64; 2]> = rows.iter().map(|r| [r[0] + shift[0], r[1] + shift[1]]).collect();
        let other = regime_probabilities(&LogisticWeights::canonical(moved).unwrap(), t);
        prop_assert!((base.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for (a, b) in base.iter().zip(&other) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn posteriors_are_normalized(params in mixture(), curves in (2usize..9).prop_flat_map(|m| curves_for(m, 4))) {
        let (post, _) = e_step(&params, &curves).unwrap();
        for i in 0..curves.len() {
            prop_assert!((post.gamma_row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for k in 0..params.num_clusters() {
                for j in 0..curves.m() {
                    prop_assert!((post.tau_fiber(i, k, j).iter().sum::<f64>() - 1.0).abs() < 1e-12);
                }
            }
        }
        for c in &params.components {
            for &t in &curves.grid().normalized() {
                prop_assert!((regime_probabilities(&c.logistic, t).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cluster_order_does_not_change_the_density(params in mixture(), curve in curve_values(6)) {
        let curve = Curve::new(curve.iter().map(|v| v / 10.0).collect()).unwrap();
        let g = grid(6);
        let mut alphas = params.alphas.clone();
        let mut comps = params.components.clone();
        alphas.reverse();
        comps.reverse();
        let reversed = MixRhlpParams::new(alphas, comps, params.basis).unwrap();
        let a = mixture_log_density(&params, &curve, &g).unwrap();
        let b = mixture_log_density(&reversed, &curve, &g).unwrap();
        prop_assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0));
    }

    #[test]
    fn curve_order_does_not_change_the_likelihood(params in mixture(), curves in curves_for(5, 6)) {
        let (_, ll) = e_step(&params, &curves).unwrap();
        let order: Vec<usize> = (0..curves.len()).rev().collect();
        let (post, ll_rev) = e_step(&params, &curves.subset(&order)).unwrap();
        let (orig, _) = e_step(&params, &curves).unwrap();
        prop_assert!((ll - ll_rev).abs() <= 1e-9 * ll.abs().max(1.0));
        for (new_i, &old_i) in order.iter().enumerate() {
            for k in 0..params.num_clusters() {
                prop_assert!((post.gamma(new_i, k) - orig.gamma(old_i, k)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn log_sum_exp_is_shift_equivariant(xs in prop::collection::vec(-700.0..700.0f64, 1..10), c in -300.0..300.0f64) {
        let shifted: Vec<f64> = xs.iter().map(|x| x + c).collect();
        let a = log_sum_exp(&xs) + c;
        let b = log_sum_exp(&shifted);
        prop_assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0));
    }

    #[test]
    fn classification_posteriors_sum_to_one(
        set in labeled_set(),
        k in 1usize..3,
        l in 1usize..3,
        probe in curve_values(8),
    ) {
        let m = set.m();
        let spec = TrainSpec::new(Method::FmdaMixRhlp, &[k.min(set.class_counts().into_iter().min().unwrap())], &[l], 0, set.num_classes()).unwrap();
        let config = FitConfig { restarts: 1, max_iter: 15, ..FitConfig::default() };
        let model = train(&set, &spec, &config).unwrap();
        let prediction = classify(&model, &Curve::new(probe[..m].to_vec()).unwrap()).unwrap();
        prop_assert!((prediction.posterior.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(prediction.label < set.num_classes());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(60))]

    #[test]
    fn em_never_decreases_the_likelihood(
        (k, l, p) in (1usize..4, 1usize..4, 0usize..3),
        curves in (8usize..20).prop_flat_map(|m| curves_for(m, 9)),
        seed in any::<u64>(),
    ) {
        let config = FitConfig { seed, restarts: 2, max_iter: 60, ..FitConfig::default() };
        let fitted = fit(&curves, &MixRhlpSpec::uniform(k, l, p), &config).unwrap();
        prop_assert!(fitted.report.max_loglik_decrease() <= 1e-8, "decrease {}", fitted.report.max_loglik_decrease());
    }
}

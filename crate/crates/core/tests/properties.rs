mod common;

use acts::attention::attend;
use acts::autodiff::Tape;
use acts::dataset::IncidenceKind;
use acts::detrend::{holt_filter, HoltParams};
use acts::embedding::{cum_minmax_normalize, inverse_normalize, normalize_continuation, segment_embed, ConvEncoder};
use acts::evaluator::wape;
use acts::model::{ActsModel, Context};
use proptest::prelude::*;

fn window(len: std::ops::Range<usize>) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-50.0f64..50.0, len)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn normalized_endpoints_and_round_trip(x in window(2..30), after in window(7..22), horizon in 1usize..8) {
        let (c, scale) = cum_minmax_normalize(&x).unwrap();
        prop_assert_eq!(c[0], 0.0);
        prop_assert_eq!(*c.last().unwrap(), 1.0);
        let horizon = horizon.min(after.len());
        let cont = normalize_continuation(&after, &scale, horizon).unwrap();
        if !scale.is_degenerate() && horizon == after.len() {
            let back = inverse_normalize(&cont, &scale);
            for (b, a) in back.iter().zip(&after) {
                prop_assert!((b - a).abs() < 1e-9 * scale.range.abs().max(1.0), "{} vs {}", b, a);
            }
        }
    }

    #[test]
    fn normalization_removes_scale(x in window(3..20), gamma in 0.01f64..100.0) {
        let (c, s) = cum_minmax_normalize(&x).unwrap();
        prop_assume!(s.range.abs() > 1e-3);
        let scaled: Vec<f64> = x.iter().map(|v| v * gamma).collect();
        let (cg, _) = cum_minmax_normalize(&scaled).unwrap();
        for (a, b) in c.iter().zip(&cg) {
            prop_assert!((a - b).abs() < 1e-12 * a.abs().max(1.0), "{} vs {}", a, b);
        }
    }

    #[test]
    fn holt_residuals_are_series_minus_level(
        x in prop::collection::vec(0.0f64..1000.0, 1..60),
        a0 in -10.0f64..10.0, b0 in -5.0f64..5.0, alpha in 0.01f64..0.99, beta in 0.01f64..0.99,
    ) {
        let tr = holt_filter(&x, &HoltParams::with_coefficients(a0, b0, alpha, beta)).unwrap();
        for (t, v) in x.iter().enumerate() {
            prop_assert_eq!(tr.residuals[t], v - tr.levels[t]);
        }
    }

    #[test]
    fn attention_is_a_convex_combination(
        q in prop::collection::vec(-3.0f64..3.0, 4),
        keys in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 4), 1..25),
        seed in any::<u64>(),
    ) {
        let values: Vec<Vec<f64>> = keys.iter().map(|k| k.iter().map(|v| v * 2.0 + 1.0).collect()).collect();
        let a = attend(&q, &keys, &values).unwrap();
        prop_assert!(a.weights.iter().all(|w| *w >= 0.0));
        prop_assert!((a.weights.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        let mut order: Vec<usize> = (0..keys.len()).collect();
        let mut s = seed;
        for i in (1..order.len()).rev() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            order.swap(i, (s >> 33) as usize % (i + 1));
        }
        let pk: Vec<Vec<f64>> = order.iter().map(|&i| keys[i].clone()).collect();
        let pv: Vec<Vec<f64>> = order.iter().map(|&i| values[i].clone()).collect();
        let b = attend(&q, &pk, &pv).unwrap();
        for (x, y) in a.value.iter().zip(&b.value) {
            prop_assert!((x - y).abs() < 1e-12);
        }
        for (j, &i) in order.iter().enumerate() {
            prop_assert!((b.weights[j] - a.weights[i]).abs() < 1e-15);
        }
    }

    #[test]
    fn wape_scale_invariant(
        pairs in prop::collection::vec((0.0f64..100.0, 0.1f64..100.0), 1..30),
        gamma in 0.001f64..1000.0,
    ) {
        let (f, x): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let fs: Vec<f64> = f.iter().map(|v| v * gamma).collect();
        let xs: Vec<f64> = x.iter().map(|v| v * gamma).collect();
        prop_assert!((wape(&f, &x).unwrap() - wape(&fs, &xs).unwrap()).abs() < 1e-12);
    }
}

#[test]
fn segment_embedding_ignores_residual_scale() {
    let enc = ConvEncoder::new((0..12).map(|i| (i as f64 * 0.37).sin()).collect(), 2, 3, 2).unwrap();
    let x = [1.0, -2.0, 3.5, 0.25, 4.0, -1.0];
    let feats: Vec<Vec<f64>> = (0..6).map(|t| vec![t as f64 * 0.1]).collect();
    let (c, _) = cum_minmax_normalize(&x).unwrap();
    let scaled: Vec<f64> = x.iter().map(|v| v * 123.0).collect();
    let (cs, _) = cum_minmax_normalize(&scaled).unwrap();
    let p = segment_embed(&c, Some(&feats), &enc).unwrap();
    let ps = segment_embed(&cs, Some(&feats), &enc).unwrap();
    for (a, b) in p.iter().zip(&ps) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn model_attention_rows_are_distributions_and_forecasts_non_negative() {
    let ds = common::with_features(common::toy_dataset(4, 50, IncidenceKind::Hospitalizations, 2), 3);
    for k in 1..=2 {
        let shape = common::toy_shape(&ds, k);
        let model = ActsModel::init(shape.clone(), &ds, &mut common::rng(k as u64)).unwrap();
        let ctx = Context::new(&ds, &shape).unwrap();
        let targets: Vec<(usize, usize)> = (0..4).map(|i| (i, ds.len())).collect();
        let mut tape = Tape::new();
        let fwd = model.forward(&mut tape, &model.params, &ctx, &targets).unwrap();
        let cols = fwd.refs.len();
        for (r, row) in tape.value(fwd.weights).chunks_exact(cols).enumerate() {
            assert!(row.iter().all(|w| *w >= 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9, "row {r}");
            for (w, &(_, t)) in row.iter().zip(&fwd.refs) {
                if t + shape.lead() > ds.len() {
                    assert_eq!(*w, 0.0, "window ending {t} overlaps the forecast");
                }
            }
        }
        assert!(tape.value(fwd.forecast).iter().all(|v| *v >= 0.0));
    }
}

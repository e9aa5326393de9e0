use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xbound::network::{ForwardOutput, ScaleKeyMap};
use xbound::objectives::{bce, build_label_pyramid, dice_loss, map_loss, total_loss};
use xbound::{BinaryMask, KeyPointMap, LabelPyramid, LossWeights};

fn square() -> BinaryMask {
    BinaryMask::from_fn(64, 64, |r, c| (22..42).contains(&r) && (22..42).contains(&c))
}

fn output(logits: Vec<Array2<f64>>, maps: Vec<(usize, Array2<f64>)>) -> ForwardOutput {
    ForwardOutput {
        seg_logits: logits,
        key_maps: maps
            .into_iter()
            .map(|(scale, m)| ScaleKeyMap {
                scale,
                block: 0,
                map: KeyPointMap::from_array(m),
            })
            .collect(),
        embeddings: Vec::new(),
        learned: Vec::new(),
        fused: Vec::new(),
        encoded: Vec::new(),
    }
}

/// Logits of +-40 reproducing every scale of the pyramid.
fn perfect_output(labels: &LabelPyramid) -> ForwardOutput {
    let logits = labels
        .seg
        .iter()
        .map(|s| s.to_f64().mapv(|v| if v > 0.5 { 40.0 } else { -40.0 }))
        .collect();
    let maps = labels
        .keypoints
        .iter()
        .enumerate()
        .map(|(l, m)| (l + 1, m.values().clone()))
        .collect();
    output(logits, maps)
}

#[test]
fn square_key_points_pool_to_corner_cells() {
    let labels = build_label_pyramid(&square(), 2, 5).unwrap();
    let mut cells = labels.keypoints[0].positions();
    cells.sort();
    assert_eq!(cells, vec![(5, 5), (5, 10), (10, 5), (10, 10)]);
}

#[test]
fn perfect_predictions_cost_nothing() {
    let labels = build_label_pyramid(&square(), 2, 5).unwrap();
    let loss = total_loss(&perfect_output(&labels), &labels, LossWeights::default()).unwrap();
    assert!(loss.total < 1e-3, "{loss:?}");
}

#[test]
fn lambda_zero_ignores_map_term() {
    let labels = build_label_pyramid(&square(), 2, 5).unwrap();
    let mut out = perfect_output(&labels);
    for km in &mut out.key_maps {
        km.map = KeyPointMap::from_array(Array2::from_elem(km.map.dims(), 0.5));
    }
    let loss = total_loss(&out, &labels, LossWeights::new(0.0).unwrap()).unwrap();
    assert_eq!(loss.total, loss.seg);
    assert!((loss.map - 2f64.ln()).abs() < 1e-12);
}

#[test]
fn map_loss_matches_direct_evaluation() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let labels = build_label_pyramid(&square(), 2, 5).unwrap();
    let preds: Vec<KeyPointMap> = [16, 8]
        .iter()
        .map(|&s| KeyPointMap::from_array(Array2::from_shape_fn((s, s), |_| rng.random_range(0.01..0.99))))
        .collect();
    let pairs = vec![(1, &preds[0]), (2, &preds[1])];
    let direct: f64 = preds
        .iter()
        .zip(&labels.keypoints)
        .map(|(p, t)| {
            let terms: Vec<f64> = p
                .values()
                .iter()
                .zip(t.values().iter())
                .map(|(&q, &m)| -(m * q.ln() + (1.0 - m) * (1.0 - q).ln()))
                .collect();
            terms.iter().sum::<f64>() / terms.len() as f64
        })
        .sum::<f64>()
        / 2.0;
    assert!((map_loss(&pairs, &labels).unwrap() - direct).abs() < 1e-10);
    assert!(LossWeights::new(-1.0).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn total_grows_with_lambda(seed in any::<u64>(), a in 0.0f64..3.0, b in 0.0f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let labels = build_label_pyramid(&square(), 2, 5).unwrap();
        let logits = labels.seg.iter().map(|s| Array2::from_shape_fn(s.dims(), |_| rng.random_range(-3.0..3.0))).collect();
        let maps = (1..=4).map(|l| (l, Array2::from_shape_fn(labels.keypoints[l - 1].dims(), |_| rng.random_range(0.05..0.95)))).collect();
        let out = output(logits, maps);
        let (lo, hi) = (a.min(b), a.max(b));
        let l_lo = total_loss(&out, &labels, LossWeights::new(lo).unwrap()).unwrap();
        let l_hi = total_loss(&out, &labels, LossWeights::new(hi).unwrap()).unwrap();
        prop_assert!(l_lo.map > 0.0);
        prop_assert!(l_hi.total >= l_lo.total);
    }

    #[test]
    fn dice_loss_is_bounded_and_symmetric(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut coin = || BinaryMask::from_array(Array2::from_shape_fn((8, 8), |_| rng.random_bool(0.4) as u8)).unwrap();
        let (a, b) = (coin(), coin());
        let ab = dice_loss(&a.to_f64(), &b).unwrap();
        prop_assert!((0.0..1.0).contains(&ab));
        prop_assert_eq!(ab, dice_loss(&b.to_f64(), &a).unwrap());
        let p = Array2::from_shape_fn((8, 8), |_| rng.random_range(0.0..1.0));
        prop_assert!(bce(&p, &a.to_f64()).unwrap() >= 0.0);
    }
}

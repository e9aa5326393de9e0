mod oracle;

use oracle::Grid;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xbound::metrics::{assd, dice_score, evaluate, extract_boundary, hd95, iou_score};
use xbound::BinaryMask;

fn grid(mask: &BinaryMask) -> Grid {
    mask.as_array().outer_iter().map(|row| row.to_vec()).collect()
}

/// Union of a few random discs, never empty.
pub fn random_blob(rng: &mut ChaCha8Rng, size: usize) -> BinaryMask {
    let discs: Vec<(f64, f64, f64)> = (0..rng.random_range(1..4))
        .map(|_| {
            let s = size as f64;
            (
                rng.random_range(0.2 * s..0.8 * s),
                rng.random_range(0.2 * s..0.8 * s),
                rng.random_range(0.08 * s..0.25 * s),
            )
        })
        .collect();
    BinaryMask::from_fn(size, size, |r, c| {
        discs
            .iter()
            .any(|&(y, x, rad)| (r as f64 - y).powi(2) + (c as f64 - x).powi(2) <= rad * rad)
    })
}

#[test]
fn distances_match_all_pairs_oracle_on_twenty_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..20 {
        let (a, b) = (random_blob(&mut rng, 32), random_blob(&mut rng, 32));
        let (ga, gb) = (grid(&a), grid(&b));
        let d = assd(&a, &b).unwrap();
        let h = hd95(&a, &b).unwrap();
        assert!(!d.undefined && !h.undefined);
        assert!((d.value - oracle::assd(&ga, &gb)).abs() < 1e-9);
        assert!((h.value - oracle::hd95(&ga, &gb)).abs() < 1e-9);
    }
}

#[test]
fn hand_counted_overlaps() {
    let a = BinaryMask::from_fn(8, 8, |r, c| (2..4).contains(&r) && (2..4).contains(&c));
    let b = BinaryMask::from_fn(8, 8, |r, c| (2..4).contains(&r) && (3..5).contains(&c));
    assert_eq!(dice_score(&a, &b).unwrap(), 0.5);
    assert_eq!(iou_score(&a, &b).unwrap(), 1.0 / 3.0);
    assert_eq!(dice_score(&a, &a).unwrap(), 1.0);
    let far = BinaryMask::from_fn(8, 8, |r, c| r > 5 && c > 5);
    assert_eq!(dice_score(&a, &far).unwrap(), 0.0);
    assert_eq!(iou_score(&a, &far).unwrap(), 0.0);
}

#[test]
fn interior_square_boundary_has_twelve_points() {
    let sq = BinaryMask::from_fn(10, 10, |r, c| (3..7).contains(&r) && (3..7).contains(&c));
    let set = extract_boundary(&sq);
    assert_eq!(set.len(), 12);
    let mut expected = oracle::boundary(&grid(&sq));
    expected.sort();
    let mut got = set.points.clone();
    got.sort();
    assert_eq!(got, expected);
}

#[test]
fn empty_prediction_is_flagged() {
    let gt = BinaryMask::from_fn(30, 40, |r, c| r < 5 && c < 5);
    let m = evaluate("e", &BinaryMask::zeros(30, 40), &gt).unwrap();
    assert!(m.undefined);
    assert_eq!(m.assd, 50.0);
    assert_eq!(m.hd95, 50.0);
}

fn translate(mask: &BinaryMask, dr: usize, dc: usize) -> BinaryMask {
    let (h, w) = mask.dims();
    BinaryMask::from_fn(h, w, |r, c| r >= dr && c >= dc && mask.get(r - dr, c - dc))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn distances_are_symmetric(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (a, b) = (random_blob(&mut rng, 32), random_blob(&mut rng, 32));
        prop_assert_eq!(assd(&a, &b).unwrap().value, assd(&b, &a).unwrap().value);
        prop_assert_eq!(hd95(&a, &b).unwrap().value, hd95(&b, &a).unwrap().value);
    }

    #[test]
    fn distance_bounds(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (a, b) = (random_blob(&mut rng, 32), random_blob(&mut rng, 32));
        let (ga, gb) = (grid(&a), grid(&b));
        let hausdorff = oracle::hausdorff(&ga, &gb);
        prop_assert!(hd95(&a, &b).unwrap().value <= hausdorff + 1e-12);
        prop_assert!(assd(&a, &b).unwrap().value <= hausdorff + 1e-12);
    }

    #[test]
    fn translation_leaves_metrics_unchanged(seed in any::<u64>(), dr in 0usize..6, dc in 0usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Blobs stay clear of the lower and right borders so the shift keeps them whole.
        let a = random_blob(&mut rng, 24);
        let b = random_blob(&mut rng, 24);
        let pad = |m: &BinaryMask| BinaryMask::from_fn(32, 32, |r, c| r < 24 && c < 24 && m.get(r, c));
        let (a, b) = (pad(&a), pad(&b));
        let (ta, tb) = (translate(&a, dr + 1, dc + 1), translate(&b, dr + 1, dc + 1));
        let (a, b) = (translate(&a, 1, 1), translate(&b, 1, 1));
        let before = evaluate("x", &a, &b).unwrap();
        let after = evaluate("x", &ta, &tb).unwrap();
        prop_assert_eq!(before.dice, after.dice);
        prop_assert_eq!(before.iou, after.iou);
        prop_assert!((before.assd - after.assd).abs() < 1e-12);
        prop_assert!((before.hd95 - after.hd95).abs() < 1e-12);
    }

    #[test]
    fn binary_dice_is_symmetric(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (a, b) = (random_blob(&mut rng, 32), random_blob(&mut rng, 32));
        prop_assert_eq!(dice_score(&a, &b).unwrap(), dice_score(&b, &a).unwrap());
        let d = dice_score(&a, &b).unwrap();
        let j = iou_score(&a, &b).unwrap();
        prop_assert!((d - 2.0 * j / (1.0 + j)).abs() < 1e-12);
    }
}

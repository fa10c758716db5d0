use fasterx::assignment::{simota_assign, AssignConfig, GroundTruth, Location};
use fasterx::geometry::BBox;
use fasterx::losses::{
    alignment, detection_loss, distill_total, finalize, focal_loss, image_loss, LossBundle, LossConfig, RawPredictions,
};
use fasterx::postprocess::candidates;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_image(rng: &mut ChaCha8Rng, n: usize, nc: usize, num_gt: usize) -> (RawPredictions, Vec<GroundTruth>) {
    let locations: Vec<Location> = (0..n * n)
        .map(|c| Location {
            level: 0,
            i: c / n,
            j: c % n,
            stride: 8,
        })
        .collect();
    let extent = (n * 8) as f64;
    let gts = (0..num_gt)
        .map(|_| {
            let (w, h) = (rng.random_range(4.0..20.0), rng.random_range(4.0..20.0));
            let (x, y) = (rng.random_range(0.0..extent - w), rng.random_range(0.0..extent - h));
            GroundTruth {
                bbox: BBox::new(x, y, x + w, y + h).unwrap(),
                class: rng.random_range(0..nc),
            }
        })
        .collect();
    let preds = RawPredictions {
        cls: (0..n * n * nc).map(|_| rng.random_range(-3.0..3.0)).collect(),
        reg: (0..n * n * 4).map(|_| rng.random_range(-0.8..0.8)).collect(),
        obj: (0..n * n).map(|_| rng.random_range(-3.0..3.0)).collect(),
        locations,
        num_classes: nc,
    };
    (preds, gts)
}

#[test]
fn loss_is_invariant_to_gt_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let cfg = LossConfig::default();
    for _ in 0..100 {
        let (preds, gts) = random_image(&mut rng, 6, 4, 4);
        let cands = candidates(&preds);
        let a = simota_assign(&cands, &gts, &AssignConfig::default()).unwrap();
        let (base, _) = detection_loss(&preds, &a, &gts, &cfg).unwrap();
        let mut shuffled = gts.clone();
        shuffled.shuffle(&mut rng);
        let b = simota_assign(&cands, &shuffled, &AssignConfig::default()).unwrap();
        let (perm, _) = detection_loss(&preds, &b, &shuffled, &cfg).unwrap();
        assert_eq!(a.fg_mask, b.fg_mask);
        assert!((base.total - perm.total).abs() < 1e-12, "{} vs {}", base.total, perm.total);
        assert_eq!(base.num_fg, perm.num_fg);
    }
}

#[test]
fn focal_decreases_in_confidence_for_positives() {
    for (gamma, alpha) in [(2.0, 0.25), (0.0, 0.5), (1.0, 0.75)] {
        let mut last = f64::INFINITY;
        for k in 1..1000 {
            let p = k as f64 / 1000.0;
            let l = focal_loss(p, 1.0, gamma, alpha);
            assert!(l >= 0.0);
            assert!(l < last, "not decreasing at p={}", p);
            last = l;
            assert!(focal_loss(p, 0.0, gamma, alpha) >= 0.0);
        }
    }
}

#[test]
fn batch_normalisation_uses_total_foreground() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let cfg = LossConfig::default();
    let mut per_image = Vec::new();
    let mut raw_total = 0.0;
    let mut fg = 0;
    for num_gt in [1, 3] {
        let (preds, gts) = random_image(&mut rng, 5, 3, num_gt);
        let a = simota_assign(&candidates(&preds), &gts, &AssignConfig::default()).unwrap();
        let l = image_loss(&preds, &a, &gts, &cfg).unwrap();
        raw_total += l.cls + cfg.reg_weight * l.reg + l.obj;
        fg += l.num_fg;
        per_image.push(l);
    }
    let b = finalize(&mut per_image, &cfg);
    assert_eq!(b.num_fg, fg);
    assert!((b.total - raw_total / fg as f64).abs() < 1e-12);
}

#[test]
fn background_only_image_has_objectness_loss_only() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let (preds, _) = random_image(&mut rng, 4, 2, 0);
    let a = simota_assign(&candidates(&preds), &[], &AssignConfig::default()).unwrap();
    let (b, g) = detection_loss(&preds, &a, &[], &LossConfig::default()).unwrap();
    assert_eq!((b.cls, b.reg, b.num_fg), (0.0, 0.0, 0));
    assert!(b.obj > 0.0);
    assert!(g.d_cls.iter().chain(&g.d_reg).all(|&d| d == 0.0));
}

proptest! {
    #[test]
    fn distill_total_bounds_sum(
        fs in proptest::collection::vec(-5.0..5.0f64, 1..40),
        shift in -3.0..3.0f64,
        lambda in 0.0..10.0f64,
        parts in proptest::array::uniform4(0.0..5.0f64),
    ) {
        let cfg = LossConfig::default();
        let s = LossBundle::from_parts(parts[0], parts[1], parts[2], 3, &cfg);
        let a = LossBundle::from_parts(parts[3], parts[1], parts[0], 5, &cfg);
        let fa: Vec<f64> = fs.iter().map(|v| v * 0.5 + shift).collect();
        let t = distill_total(&s, &a, &fs, &fa, lambda).unwrap();
        prop_assert!(t >= s.total + a.total);
        let (m, gs, ga) = alignment(&fs, &fa).unwrap();
        prop_assert!(m >= 0.0);
        for (x, y) in gs.iter().zip(&ga) {
            prop_assert_eq!(*x, -*y);
        }
    }
}

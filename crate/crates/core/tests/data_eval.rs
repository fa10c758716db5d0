use fasterx::assignment::GroundTruth;
use fasterx::data::{
    letterbox_sample, load_dataset, mosaic, mosaic_layout, mosaic_with, parse_annotations, save_dataset, synth_dataset,
    synth_sample, write_annotations, Letterbox, Sample, SynthSpec,
};
use fasterx::eval::{evaluate, nms, tag_ground_truth, Detection, SizeBucket};
use fasterx::geometry::{iou_unchecked, BBox};
use image::{Rgb, Rgb32FImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
    BBox::new(x1, y1, x2, y2).unwrap()
}

fn det(image: usize, class: usize, score: f64, bbox: BBox) -> Detection {
    Detection {
        image,
        class,
        score,
        bbox,
    }
}

const FIXTURE: &str = "\
684,8,273,116,1,4,0,0
406,119,265,70,1,4,0,0
255,22,119,128,1,4,0,0
1,3,9,9,1,1,1,2
15,20,0,12,1,2,0,0
30,30,10,10,0,1,0,0
40,40,10,10,1,0,0,0
50,50,10,10,1,11,0,0
";

#[test]
fn annotation_round_trip_is_field_identical() {
    let parsed = parse_annotations(FIXTURE, 10).unwrap();
    assert_eq!(parsed.records.len(), 4);
    assert_eq!(parsed.dropped_zero_area, 1);
    assert_eq!(parsed.dropped_ignored, 2);
    assert_eq!(parsed.dropped_out_of_range, 1);
    let written = write_annotations(&parsed.records);
    let kept: String = FIXTURE.lines().take(4).map(|l| format!("{}\n", l)).collect();
    assert_eq!(written, kept);
    assert_eq!(parse_annotations(&written, 10).unwrap().records, parsed.records);
}

#[test]
fn malformed_annotation_reports_line() {
    let err = parse_annotations("1,2,3,4,1,1,0,0\n1,2,x,4,1,1,0,0\n", 10).unwrap_err();
    assert!(matches!(err, fasterx::Error::Parse { line: 2, .. }));
    assert!(parse_annotations("1,2,3\n", 10).is_err());
}

#[test]
fn synthetic_data_is_deterministic() {
    let spec = SynthSpec {
        num_images: 12,
        seed: 5,
        ..SynthSpec::default()
    };
    let a = synth_dataset(&spec);
    let b = synth_dataset(&spec);
    assert_eq!(a, b);
    assert_eq!(synth_sample(&spec, 7), a[7]);
    let other = synth_dataset(&SynthSpec { seed: 6, ..spec });
    assert_ne!(a, other);
}

#[test]
fn synthetic_statistics() {
    let spec = SynthSpec::default();
    let data = synth_dataset(&SynthSpec {
        num_images: 200,
        ..spec.clone()
    });
    let boxes: Vec<&GroundTruth> = data.iter().flat_map(|s| &s.gts).collect();
    assert!(boxes.len() > 200);
    let small = boxes.iter().filter(|g| SizeBucket::of(g.bbox.area()) == SizeBucket::Small).count();
    assert!(small as f64 >= 0.6 * boxes.len() as f64, "{} of {}", small, boxes.len());
    let s = spec.image_size as f64;
    for g in boxes {
        let (w, h) = (g.bbox.width(), g.bbox.height());
        assert!(w > 0.0 && h > 0.0);
        let aspect = w.max(h) / w.min(h);
        assert!((1.0..=5.0).contains(&aspect), "aspect {}", aspect);
        assert!(g.bbox.x1 >= 0.0 && g.bbox.y1 >= 0.0 && g.bbox.x2 <= s && g.bbox.y2 <= s);
        assert!(g.class < spec.num_classes);
    }
}

#[test]
fn dataset_save_load_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth_dataset(&SynthSpec {
        num_images: 3,
        ..SynthSpec::default()
    });
    let manifest = save_dataset(dir.path(), &data).unwrap();
    let back = load_dataset(&manifest, 10).unwrap();
    assert_eq!(back.len(), 3);
    for (a, b) in data.iter().zip(&back) {
        assert_eq!(a.gts, b.gts);
        assert_eq!(a.image.dimensions(), b.image.dimensions());
        let worst = a
            .image
            .pixels()
            .zip(b.image.pixels())
            .flat_map(|(p, q)| p.0.iter().zip(q.0).map(|(x, y)| (x - y).abs()))
            .fold(0.0f32, f32::max);
        assert!(worst <= 0.5 / 255.0 + 1e-6);
    }
}

#[test]
fn letterbox_inverse_within_half_pixel() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    for (w, h) in [(800, 400), (128, 128), (300, 517), (97, 61)] {
        let lb = Letterbox::for_size(w, h, 640);
        if w == h {
            assert_eq!((lb.pad_x, lb.pad_y), (0.0, 0.0));
        }
        for _ in 0..50 {
            let x1 = rng.random_range(0.0..w as f64 - 2.0);
            let y1 = rng.random_range(0.0..h as f64 - 2.0);
            let b = bx(x1, y1, rng.random_range(x1 + 1.0..w as f64), rng.random_range(y1 + 1.0..h as f64));
            let back = lb.inverse(&lb.forward(&b));
            for (p, q) in [(b.x1, back.x1), (b.y1, back.y1), (b.x2, back.x2), (b.y2, back.y2)] {
                assert!((p - q).abs() <= 0.5);
            }
        }
    }
    let s = Sample {
        image: Rgb32FImage::from_pixel(800, 400, Rgb([0.2, 0.3, 0.4])),
        gts: vec![GroundTruth {
            bbox: bx(0.0, 0.0, 800.0, 400.0),
            class: 0,
        }],
    };
    let (out, meta) = letterbox_sample(&s, 640);
    assert_eq!(out.image.dimensions(), (640, 640));
    assert_eq!(out.gts[0].bbox, bx(0.0, meta.pad_y, 640.0, meta.pad_y + 320.0));
}

fn single_object(class: usize, bbox: BBox, size: u32) -> Sample {
    Sample {
        image: Rgb32FImage::from_pixel(size, size, Rgb([0.5; 3])),
        gts: vec![GroundTruth { bbox, class }],
    }
}

#[test]
fn mosaic_places_boxes_by_affine_map() {
    let samples: Vec<Sample> = (0..4).map(|k| single_object(k, bx(10.0, 12.0, 30.0, 40.0), 64)).collect();
    let refs = [&samples[0], &samples[1], &samples[2], &samples[3]];
    let (xc, yc, scale) = (70.0, 60.0, 0.75);
    let out = mosaic_with(refs, 128, xc, yc, scale);
    let layout = mosaic_layout([(64, 64); 4], 128, xc, yc, scale);
    assert_eq!(out.gts.len(), 4);
    for (k, g) in out.gts.iter().enumerate() {
        assert_eq!(g.class, k);
        let t = &layout[k];
        let expect = |v: f64, off: f64, lo: f64, hi: f64| (v * scale + off).clamp(lo, hi);
        let e = bx(
            expect(10.0, t.dx, t.region[0], t.region[2]),
            expect(12.0, t.dy, t.region[1], t.region[3]),
            expect(30.0, t.dx, t.region[0], t.region[2]),
            expect(40.0, t.dy, t.region[1], t.region[3]),
        );
        assert_eq!(g.bbox, e);
        // inside its own quadrant
        let (cx, cy) = g.bbox.center();
        assert_eq!((cx >= xc, cy >= yc), (k % 2 == 1, k >= 2));
    }
    let tl = &layout[0];
    assert_eq!((tl.dx, tl.dy), (xc - 48.0, yc - 48.0));
}

#[test]
fn mosaic_only_removes_and_keeps_labels() {
    let spec = SynthSpec {
        num_images: 40,
        seed: 9,
        ..SynthSpec::default()
    };
    let data = synth_dataset(&spec);
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for chunk in data.chunks(4) {
        let refs = [&chunk[0], &chunk[1], &chunk[2], &chunk[3]];
        let out = mosaic(refs, 128, (0.5, 1.5), &mut rng);
        let total: usize = chunk.iter().map(|s| s.gts.len()).sum();
        assert!(out.gts.len() <= total);
        let mut inputs: Vec<usize> = chunk.iter().flat_map(|s| s.gts.iter().map(|g| g.class)).collect();
        for g in &out.gts {
            let pos = inputs.iter().position(|&c| c == g.class).expect("label from an input");
            inputs.swap_remove(pos);
            assert!(g.bbox.width() >= 2.0 && g.bbox.height() >= 2.0);
        }
    }
}

#[test]
fn single_gt_iou_point_six() {
    // 10×10 GT and a shifted 10×10 box: intersection 75, union 125
    let gts = tag_ground_truth(&[vec![GroundTruth {
        bbox: bx(0.0, 0.0, 10.0, 10.0),
        class: 0,
    }]]);
    let d = det(0, 0, 0.9, bx(0.0, 2.5, 10.0, 12.5));
    assert!((iou_unchecked(&d.bbox, &gts[0].gt.bbox) - 0.6).abs() < 1e-12);
    let m = evaluate(&[d], &gts);
    assert_eq!(m.ap50, 1.0);
    assert!((m.map - 0.3).abs() < 1e-12);
    assert_eq!(m.ap_s, Some(m.map));
    assert_eq!((m.ap_m, m.ap_l), (None, None));
}

#[test]
fn perfect_and_empty_detections() {
    let per_image = vec![
        vec![GroundTruth {
            bbox: bx(0.0, 0.0, 50.0, 50.0),
            class: 1,
        }],
        vec![GroundTruth {
            bbox: bx(10.0, 10.0, 150.0, 130.0),
            class: 0,
        }],
    ];
    let gts = tag_ground_truth(&per_image);
    let perfect: Vec<Detection> = gts.iter().map(|g| det(g.image, g.gt.class, 0.8, g.gt.bbox)).collect();
    let m = evaluate(&perfect, &gts);
    assert_eq!((m.map, m.ap50), (1.0, 1.0));
    let e = evaluate(&[], &gts);
    assert_eq!((e.map, e.ap50), (0.0, 0.0));
}

fn random_eval_instance(rng: &mut ChaCha8Rng) -> (Vec<Detection>, Vec<fasterx::eval::ImageGt>) {
    let per_image: Vec<Vec<GroundTruth>> = (0..4)
        .map(|_| {
            (0..rng.random_range(1..5))
                .map(|_| {
                    let (x, y) = (rng.random_range(0.0..100.0), rng.random_range(0.0..100.0));
                    let s = rng.random_range(4.0..60.0);
                    GroundTruth {
                        bbox: bx(x, y, x + s, y + s * rng.random_range(0.5..2.0)),
                        class: rng.random_range(0..3),
                    }
                })
                .collect()
        })
        .collect();
    let gts = tag_ground_truth(&per_image);
    let mut dets = Vec::new();
    for g in &gts {
        if rng.random_bool(0.8) {
            let j = |rng: &mut ChaCha8Rng| rng.random_range(-3.0..3.0);
            let b = g.gt.bbox;
            let (a, c) = (j(rng), j(rng));
            dets.push(det(
                g.image,
                g.gt.class,
                rng.random_range(0.0..1.0),
                bx(b.x1 + a, b.y1 + c, b.x2 + a, b.y2 + c),
            ));
        }
    }
    for _ in 0..rng.random_range(0..6) {
        let (x, y) = (rng.random_range(0.0..100.0), rng.random_range(0.0..100.0));
        dets.push(det(
            rng.random_range(0..4),
            rng.random_range(0..3),
            rng.random_range(0.0..1.0),
            bx(x, y, x + 10.0, y + 10.0),
        ));
    }
    (dets, gts)
}

#[test]
fn evaluator_order_invariant_and_bounded() {
    let mut rng = ChaCha8Rng::seed_from_u64(43);
    for _ in 0..100 {
        let (mut dets, gts) = random_eval_instance(&mut rng);
        let m = evaluate(&dets, &gts);
        for v in [Some(m.map), Some(m.ap50), m.ap_s, m.ap_m, m.ap_l].into_iter().flatten() {
            assert!((0.0..=1.0).contains(&v));
        }
        assert!(m.map <= m.ap50);
        dets.shuffle(&mut rng);
        assert_eq!(evaluate(&dets, &gts), m);
    }
}

#[test]
fn duplicate_lower_scored_detection_never_helps() {
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    for _ in 0..100 {
        let (mut dets, gts) = random_eval_instance(&mut rng);
        if dets.is_empty() {
            continue;
        }
        let before = evaluate(&dets, &gts);
        let k = rng.random_range(0..dets.len());
        let mut dup = dets[k];
        dup.score *= rng.random_range(0.0..1.0);
        dets.push(dup);
        let after = evaluate(&dets, &gts);
        assert!(after.ap50 <= before.ap50 + 1e-12);
        assert!(after.map <= before.map + 1e-12);
    }
}

#[test]
fn small_only_dataset_buckets() {
    let mut rng = ChaCha8Rng::seed_from_u64(45);
    let per_image: Vec<Vec<GroundTruth>> = (0..3)
        .map(|_| {
            (0..3)
                .map(|_| {
                    let (x, y) = (rng.random_range(0.0..200.0), rng.random_range(0.0..200.0));
                    GroundTruth {
                        bbox: bx(x, y, x + rng.random_range(4.0..30.0), y + rng.random_range(4.0..30.0)),
                        class: rng.random_range(0..2),
                    }
                })
                .collect()
        })
        .collect();
    let gts = tag_ground_truth(&per_image);
    let dets: Vec<Detection> = gts
        .iter()
        .map(|g| {
            let b = g.gt.bbox;
            det(g.image, g.gt.class, rng.random_range(0.1..1.0), bx(b.x1 + 1.0, b.y1, b.x2 + 1.0, b.y2))
        })
        .collect();
    let m = evaluate(&dets, &gts);
    assert_eq!(m.ap_s, Some(m.map));
    assert_eq!((m.ap_m, m.ap_l), (None, None));
}

#[test]
fn detection_lines_round_trip() {
    let d = det(3, 2, 0.5, bx(1.25, 2.5, 30.0, 40.75));
    assert_eq!(Detection::parse_line(&d.to_line(), 1).unwrap(), d);
    assert!(Detection::parse_line("1 2 0.5 1 2 3", 7).is_err());
}

/// Greedy class-wise suppression computed by brute force: a box survives
/// iff no higher-ranked survivor of its class overlaps it above the
/// threshold.
fn nms_oracle(dets: &[Detection], thr: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    let mut keep: Vec<usize> = Vec::new();
    for &i in &order {
        let suppressed = keep.iter().any(|&k| {
            dets[k].image == dets[i].image
                && dets[k].class == dets[i].class
                && iou_unchecked(&dets[k].bbox, &dets[i].bbox) > thr
        });
        if !suppressed {
            keep.push(i);
        }
    }
    keep
}

#[test]
fn nms_matches_exhaustive_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(46);
    for _ in 0..500 {
        let dets: Vec<Detection> = (0..5)
            .map(|_| {
                let (x, y) = (rng.random_range(0.0..20.0), rng.random_range(0.0..20.0));
                det(
                    0,
                    rng.random_range(0..2),
                    rng.random_range(0.0..1.0),
                    bx(x, y, x + rng.random_range(5.0..15.0), y + rng.random_range(5.0..15.0)),
                )
            })
            .collect();
        let mut got = nms(&dets, 0.5);
        let mut want = nms_oracle(&dets, 0.5);
        got.sort();
        want.sort();
        assert_eq!(got, want);
    }
    let same = det(0, 0, 0.9, bx(0.0, 0.0, 10.0, 10.0));
    assert_eq!(nms(&[same, Detection { score: 0.8, ..same }], 0.65).len(), 1);
}

//! COCO-style average precision with 101-point interpolation and
//! small / medium / large breakdowns.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::assignment::GroundTruth;
use crate::error::{Error, Result};
use crate::geometry::{iou_unchecked, BBox};

/// Upper area bound of small objects (exclusive).
pub const SMALL_AREA: f64 = 32.0 * 32.0;
/// Upper area bound of medium objects (inclusive).
pub const MEDIUM_AREA: f64 = 96.0 * 96.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SizeBucket {
    Small,
    Medium,
    Large,
}

impl SizeBucket {
    pub fn of(area: f64) -> Self {
        if area < SMALL_AREA {
            SizeBucket::Small
        } else if area <= MEDIUM_AREA {
            SizeBucket::Medium
        } else {
            SizeBucket::Large
        }
    }
}

/// A scored prediction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub image: usize,
    pub class: usize,
    pub score: f64,
    pub bbox: BBox,
}

impl Detection {
    /// `image_id class score x1 y1 x2 y2`.
    pub fn to_line(&self) -> String {
        format!(
            "{} {} {:.6} {:.2} {:.2} {:.2} {:.2}",
            self.image, self.class, self.score, self.bbox.x1, self.bbox.y1, self.bbox.x2, self.bbox.y2
        )
    }

    pub fn parse_line(line: &str, lineno: usize) -> Result<Self> {
        let f: Vec<&str> = line.split_whitespace().collect();
        let bad = |msg: String| Error::Parse { line: lineno, msg };
        if f.len() != 7 {
            return Err(bad(format!("expected 7 fields, found {}", f.len())));
        }
        let num = |k: usize| f[k].parse::<f64>().map_err(|_| bad(format!("bad number '{}'", f[k])));
        Ok(Detection {
            image: f[0].parse().map_err(|_| bad(format!("bad image id '{}'", f[0])))?,
            class: f[1].parse().map_err(|_| bad(format!("bad class '{}'", f[1])))?,
            score: num(2)?,
            bbox: BBox::new(num(3)?, num(4)?, num(5)?, num(6)?).map_err(|e| bad(e.to_string()))?,
        })
    }
}

/// Ground truth tagged with its image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImageGt {
    pub image: usize,
    pub gt: GroundTruth,
}

pub fn tag_ground_truth(per_image: &[Vec<GroundTruth>]) -> Vec<ImageGt> {
    per_image
        .iter()
        .enumerate()
        .flat_map(|(image, gts)| gts.iter().map(move |&gt| ImageGt { image, gt }))
        .collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// AP averaged over IoU thresholds 0.50:0.05:0.95.
    #[serde(rename = "mAP")]
    pub map: f64,
    #[serde(rename = "AP50")]
    pub ap50: f64,
    /// `None` when no ground truth falls in the bucket.
    #[serde(rename = "AP_S")]
    pub ap_s: Option<f64>,
    #[serde(rename = "AP_M")]
    pub ap_m: Option<f64>,
    #[serde(rename = "AP_L")]
    pub ap_l: Option<f64>,
}

impl Metrics {
    pub fn summary(&self) -> String {
        let f = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |v| format!("{:.4}", v));
        format!(
            "mAP={:.4} AP50={:.4} AP_S={} AP_M={} AP_L={}",
            self.map,
            self.ap50,
            f(self.ap_s),
            f(self.ap_m),
            f(self.ap_l)
        )
    }
}

pub fn iou_thresholds() -> [f64; 10] {
    std::array::from_fn(|k| (50 + 5 * k) as f64 / 100.0)
}

/// 101-point interpolated AP from a ranked list of true/false positives.
pub fn interpolated_ap(tp: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut recall = Vec::with_capacity(tp.len());
    let mut precision = Vec::with_capacity(tp.len());
    let (mut t, mut f) = (0usize, 0usize);
    for &hit in tp {
        if hit {
            t += 1
        } else {
            f += 1
        }
        recall.push(t as f64 / num_gt as f64);
        precision.push(t as f64 / (t + f) as f64);
    }
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let mut sum = 0.0;
    for r in 0..=100 {
        let target = r as f64 / 100.0;
        let idx = recall.partition_point(|&x| x < target - 1e-12);
        if idx < precision.len() {
            sum += precision[idx];
        }
    }
    sum / 101.0
}

/// AP of one class at one threshold; `None` when the class has no GT in
/// the bucket. GTs outside the bucket are ignored: a detection whose best
/// match is such a GT is dropped from the ranking.
fn class_ap(dets: &[&Detection], gts: &[&ImageGt], thr: f64, bucket: Option<SizeBucket>) -> Option<f64> {
    let counted = |g: &ImageGt| bucket.is_none_or(|b| SizeBucket::of(g.gt.bbox.area()) == b);
    let num_gt = gts.iter().filter(|g| counted(g)).count();
    if num_gt == 0 {
        return None;
    }
    let mut used = vec![false; gts.len()];
    let mut tp = Vec::with_capacity(dets.len());
    for d in dets {
        // prefer counted GTs, then ignored ones, each by best IoU
        let mut best: Option<(bool, f64, usize)> = None;
        for (k, g) in gts.iter().enumerate() {
            if used[k] || g.image != d.image {
                continue;
            }
            let iou = iou_unchecked(&d.bbox, &g.gt.bbox);
            if iou < thr {
                continue;
            }
            let key = (counted(g), iou, k);
            let better = match best {
                None => true,
                Some((bc, bi, _)) => (key.0 && !bc) || (key.0 == bc && iou > bi),
            };
            if better {
                best = Some(key);
            }
        }
        match best {
            Some((true, _, k)) => {
                used[k] = true;
                tp.push(true);
            }
            Some((false, _, k)) => used[k] = true,
            None => tp.push(false),
        }
    }
    Some(interpolated_ap(&tp, num_gt))
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Average precision over classes and thresholds. Detections are ranked by
/// score (ties by input-independent keys), so the input order is irrelevant.
pub fn evaluate(dets: &[Detection], gts: &[ImageGt]) -> Metrics {
    let mut sorted: Vec<&Detection> = dets.iter().collect();
    sorted.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.image.cmp(&b.image))
            .then(a.bbox.x1.total_cmp(&b.bbox.x1))
            .then(a.bbox.y1.total_cmp(&b.bbox.y1))
            .then(a.bbox.x2.total_cmp(&b.bbox.x2))
            .then(a.bbox.y2.total_cmp(&b.bbox.y2))
    });
    let classes: BTreeSet<usize> = gts.iter().map(|g| g.gt.class).collect();
    let thresholds = iou_thresholds();
    let ap_at = |bucket: Option<SizeBucket>, thrs: &[f64]| -> Option<f64> {
        let mut per_class = Vec::new();
        for &c in &classes {
            let d: Vec<&Detection> = sorted.iter().copied().filter(|d| d.class == c).collect();
            let g: Vec<&ImageGt> = gts.iter().filter(|g| g.gt.class == c).collect();
            let aps: Vec<f64> = thrs.iter().filter_map(|&t| class_ap(&d, &g, t, bucket)).collect();
            if let Some(m) = mean(&aps) {
                per_class.push(m);
            }
        }
        mean(&per_class)
    };
    Metrics {
        map: ap_at(None, &thresholds).unwrap_or(0.0),
        ap50: ap_at(None, &thresholds[..1]).unwrap_or(0.0),
        ap_s: ap_at(Some(SizeBucket::Small), &thresholds),
        ap_m: ap_at(Some(SizeBucket::Medium), &thresholds),
        ap_l: ap_at(Some(SizeBucket::Large), &thresholds),
    }
}

/// Greedy per-class non-maximum suppression. Returns kept indices in
/// descending score order.
pub fn nms(dets: &[Detection], iou_thr: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    let mut keep: Vec<usize> = Vec::new();
    for &i in &order {
        let suppressed = keep.iter().any(|&k| {
            dets[k].class == dets[i].class
                && dets[k].image == dets[i].image
                && iou_unchecked(&dets[k].bbox, &dets[i].bbox) > iou_thr
        });
        if !suppressed {
            keep.push(i);
        }
    }
    keep
}

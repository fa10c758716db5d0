//! Flattening of per-level head maps and detection decoding.

use crate::assignment::{CandidateSet, Location};
use crate::error::Result;
use crate::eval::{nms, Detection};
use crate::losses::{sigmoid, RawPredictions};
use crate::model::{LevelOutput, Model};
use crate::tensor::{Float, Tensor};

/// Locations of all levels, level-major then row-major.
pub fn locations(levels: &[LevelOutput<impl Float>]) -> Vec<Location> {
    let mut out = Vec::new();
    for (l, lv) in levels.iter().enumerate() {
        for i in 0..lv.grid.grid_h {
            for j in 0..lv.grid.grid_w {
                out.push(Location {
                    level: l,
                    i,
                    j,
                    stride: lv.grid.stride,
                });
            }
        }
    }
    out
}

/// Raw outputs of image `n` flattened over levels.
pub fn raw_predictions<T: Float>(levels: &[LevelOutput<T>], n: usize) -> RawPredictions {
    let nc = levels.first().map_or(0, |l| l.cls.shape()[1]);
    let locs = locations(levels);
    let total = locs.len();
    let mut cls = Vec::with_capacity(total * nc);
    let mut reg = Vec::with_capacity(total * 4);
    let mut obj = Vec::with_capacity(total);
    for lv in levels {
        let hw = lv.grid.cells();
        let (c, r, o) = (lv.cls.data(), lv.reg.data(), lv.obj.data());
        for p in 0..hw {
            for k in 0..nc {
                cls.push(c[(n * nc + k) * hw + p].as_f64());
            }
            for k in 0..4 {
                reg.push(r[(n * 4 + k) * hw + p].as_f64());
            }
            obj.push(o[n * hw + p].as_f64());
        }
    }
    RawPredictions {
        locations: locs,
        cls,
        reg,
        obj,
        num_classes: nc,
    }
}

/// Scatter flat per-image gradients back into per-level `[N, C, H, W]`
/// tensors. `grads[n]` holds `(d_cls, d_reg, d_obj)` for image `n`.
pub fn scatter_gradients<T: Float>(
    levels: &[LevelOutput<T>],
    grads: &[(&[f64], &[f64], &[f64])],
) -> Vec<[Tensor<T>; 3]> {
    let batch = grads.len();
    let nc = levels.first().map_or(0, |l| l.cls.shape()[1]);
    let mut out = Vec::with_capacity(levels.len());
    let mut offset = 0;
    for lv in levels {
        let hw = lv.grid.cells();
        let mut dc = Tensor::zeros(lv.cls.shape());
        let mut dr = Tensor::zeros(lv.reg.shape());
        let mut d_o = Tensor::zeros(lv.obj.shape());
        for (n, (gc, gr, go)) in grads.iter().enumerate().take(batch) {
            for p in 0..hw {
                let c = offset + p;
                for k in 0..nc {
                    dc.data_mut()[(n * nc + k) * hw + p] = T::from_f64_lossy(gc[c * nc + k]);
                }
                for k in 0..4 {
                    dr.data_mut()[(n * 4 + k) * hw + p] = T::from_f64_lossy(gr[c * 4 + k]);
                }
                d_o.data_mut()[n * hw + p] = T::from_f64_lossy(go[c]);
            }
        }
        offset += hw;
        out.push([dc, dr, d_o]);
    }
    out
}

/// Detached candidate view of raw predictions for label assignment.
pub fn candidates(p: &RawPredictions) -> CandidateSet {
    CandidateSet {
        locations: p.locations.clone(),
        boxes: (0..p.len()).map(|c| p.decoded(c)).collect(),
        cls_probs: p.cls.iter().map(|&z| sigmoid(z)).collect(),
        obj_probs: p.obj.iter().map(|&z| sigmoid(z)).collect(),
        num_classes: p.num_classes,
    }
}

/// Score every location by `obj · max cls`, keep those at or above
/// `score_thr`, run class-wise NMS and cap the result at `max_dets`.
pub fn detections(p: &RawPredictions, image: usize, score_thr: f64, nms_thr: f64, max_dets: usize) -> Vec<Detection> {
    let nc = p.num_classes;
    let mut dets = Vec::new();
    for c in 0..p.len() {
        let obj = sigmoid(p.obj[c]);
        if obj < score_thr {
            continue;
        }
        let (class, z) = p.cls[c * nc..(c + 1) * nc]
            .iter()
            .copied()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |a, (k, z)| if z > a.1 { (k, z) } else { a });
        let score = obj * sigmoid(z);
        if score < score_thr {
            continue;
        }
        let bbox = p.decoded(c);
        if !bbox.x1.is_finite() || !bbox.x2.is_finite() || !bbox.y1.is_finite() || !bbox.y2.is_finite() {
            continue;
        }
        dets.push(Detection {
            image,
            class,
            score,
            bbox,
        });
    }
    let keep = nms(&dets, nms_thr);
    keep.into_iter().take(max_dets).map(|k| dets[k]).collect()
}

impl<T: Float> Model<T> {
    /// Eval-mode detection on a batch; detection `image` ids are batch
    /// positions.
    pub fn predict(&self, images: &Tensor<T>, score_thr: f64, nms_thr: f64, max_dets: usize) -> Result<Vec<Vec<Detection>>> {
        let levels = self.forward(images)?;
        let n = images.shape()[0];
        Ok((0..n)
            .map(|i| detections(&raw_predictions(&levels, i), i, score_thr, nms_thr, max_dets))
            .collect())
    }
}

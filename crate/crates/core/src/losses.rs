//! Focal, CIoU and objectness losses over an assignment, and the
//! distillation total. Losses are evaluated outside the autodiff graph and
//! return gradients with respect to the raw head outputs.

use serde::{Deserialize, Serialize};

use crate::assignment::{AssignmentResult, GroundTruth, Location};
use crate::error::{Error, Result};
use crate::geometry::{ciou_loss_grad, corners_to_center_grad, decode_cell, decode_cell_backward, BBox};

/// Probability clamp for the probability-space forms.
pub const PROB_EPS: f64 = 1e-7;

fn clamp_p(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Binary cross-entropy of probability `p` against target `y`.
pub fn bce(p: f64, y: f64) -> f64 {
    let p = clamp_p(p);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

/// `-α_t (1 - p_t)^γ ln p_t` with `p_t = p` for `y = 1`, else `1 - p`.
pub fn focal_loss(p: f64, y: f64, gamma: f64, alpha: f64) -> f64 {
    let p = clamp_p(p);
    let pos = alpha * (1.0 - p).powf(gamma) * -p.ln();
    let neg = (1.0 - alpha) * p.powf(gamma) * -(1.0 - p).ln();
    y * pos + (1.0 - y) * neg
}

/// Derivative of [`focal_loss`] with respect to `p` (inside the clamp).
pub fn focal_loss_grad(p: f64, y: f64, gamma: f64, alpha: f64) -> f64 {
    let p = clamp_p(p);
    let q = 1.0 - p;
    let dpos = -alpha * (-gamma * q.powf(gamma - 1.0) * p.ln() + q.powf(gamma) / p);
    let dneg = -(1.0 - alpha) * (gamma * p.powf(gamma - 1.0) * q.ln() - p.powf(gamma) / q);
    y * dpos + (1.0 - y) * dneg
}

/// Focal loss of `sigmoid(z)` and its derivative in `z`, stable for any
/// logit.
pub fn focal_logit(z: f64, y: f64, gamma: f64, alpha: f64) -> (f64, f64) {
    let p = sigmoid(z);
    let q = 1.0 - p;
    let (sp_neg, sp_pos) = (softplus(-z), softplus(z));
    let pos = alpha * q.powf(gamma) * sp_neg;
    let dpos = -alpha * q.powf(gamma) * (gamma * p * sp_neg + q);
    let neg = (1.0 - alpha) * p.powf(gamma) * sp_pos;
    let dneg = (1.0 - alpha) * p.powf(gamma) * (gamma * q * sp_pos + p);
    (y * pos + (1.0 - y) * neg, y * dpos + (1.0 - y) * dneg)
}

/// Binary cross-entropy of `sigmoid(z)` and its derivative in `z`.
pub fn bce_logit(z: f64, y: f64) -> (f64, f64) {
    (softplus(z) - y * z, sigmoid(z) - y)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub focal_gamma: f64,
    pub focal_alpha: f64,
    pub reg_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            focal_gamma: 2.0,
            focal_alpha: 0.25,
            reg_weight: 5.0,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub cls: f64,
    pub reg: f64,
    pub obj: f64,
    pub total: f64,
    pub num_fg: usize,
}

impl LossBundle {
    pub fn from_parts(cls: f64, reg: f64, obj: f64, num_fg: usize, cfg: &LossConfig) -> Self {
        LossBundle {
            cls,
            reg,
            obj,
            total: cls + cfg.reg_weight * reg + obj,
            num_fg,
        }
    }
}

/// Raw head outputs of one image, flattened over levels and cells.
#[derive(Debug, Clone, PartialEq)]
pub struct RawPredictions {
    pub locations: Vec<Location>,
    /// `[len × num_classes]` logits.
    pub cls: Vec<f64>,
    /// `[len × 4]` raw offsets.
    pub reg: Vec<f64>,
    pub obj: Vec<f64>,
    pub num_classes: usize,
}

impl RawPredictions {
    pub fn len(&self) -> usize {
        self.locations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.locations.is_empty()
    }

    pub fn raw_box(&self, c: usize) -> [f64; 4] {
        [0, 1, 2, 3].map(|k| self.reg[c * 4 + k])
    }

    pub fn decoded(&self, c: usize) -> BBox {
        let l = &self.locations[c];
        decode_cell(self.raw_box(c), l.i, l.j, l.stride).to_corners()
    }
}

/// Unnormalised loss sums of one image and the matching gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageLoss {
    pub cls: f64,
    pub reg: f64,
    pub obj: f64,
    pub num_fg: usize,
    pub d_cls: Vec<f64>,
    pub d_reg: Vec<f64>,
    pub d_obj: Vec<f64>,
}

impl ImageLoss {
    fn zeros(p: &RawPredictions) -> Self {
        ImageLoss {
            cls: 0.0,
            reg: 0.0,
            obj: 0.0,
            num_fg: 0,
            d_cls: vec![0.0; p.cls.len()],
            d_reg: vec![0.0; p.reg.len()],
            d_obj: vec![0.0; p.obj.len()],
        }
    }

    /// Multiply values and gradients by `s`.
    pub fn scale(&mut self, s: f64) {
        self.cls *= s;
        self.reg *= s;
        self.obj *= s;
        for v in self.d_cls.iter_mut().chain(&mut self.d_reg).chain(&mut self.d_obj) {
            *v *= s;
        }
    }
}

/// Loss sums for one image: focal classification and CIoU regression over
/// the foreground, objectness BCE over every location. Gradients are taken
/// with respect to the raw outputs and already include `reg_weight`.
pub fn image_loss(
    preds: &RawPredictions,
    assignment: &AssignmentResult,
    gts: &[GroundTruth],
    cfg: &LossConfig,
) -> Result<ImageLoss> {
    if assignment.matched_gt.len() != preds.len() {
        return Err(Error::Shape(format!(
            "assignment covers {} locations, predictions {}",
            assignment.matched_gt.len(),
            preds.len()
        )));
    }
    let nc = preds.num_classes;
    let mut out = ImageLoss::zeros(preds);
    for (c, m) in assignment.matched_gt.iter().enumerate() {
        let (l, d) = bce_logit(preds.obj[c], if m.is_some() { 1.0 } else { 0.0 });
        out.obj += l;
        out.d_obj[c] = d;
        let Some(g) = *m else { continue };
        let gt = gts
            .get(g)
            .ok_or_else(|| Error::InvalidArgument(format!("assignment references missing GT {}", g)))?;
        if gt.class >= nc {
            return Err(Error::InvalidArgument(format!("GT class {} out of range", gt.class)));
        }
        out.num_fg += 1;
        for k in 0..nc {
            let y = if k == gt.class { 1.0 } else { 0.0 };
            let (l, d) = focal_logit(preds.cls[c * nc + k], y, cfg.focal_gamma, cfg.focal_alpha);
            out.cls += l;
            out.d_cls[c * nc + k] = d;
        }
        let raw = preds.raw_box(c);
        let loc = &preds.locations[c];
        let pred = decode_cell(raw, loc.i, loc.j, loc.stride).to_corners();
        let (l, d_corners) = ciou_loss_grad(&pred, &gt.bbox);
        out.reg += l;
        let d_raw = decode_cell_backward(raw, loc.stride, corners_to_center_grad(d_corners));
        for (d, v) in out.d_reg[c * 4..c * 4 + 4].iter_mut().zip(d_raw) {
            *d = cfg.reg_weight * v;
        }
    }
    Ok(out)
}

/// Batch loss: sums over images normalised by the total foreground count
/// (at least 1). Gradients in `losses` are scaled in place to match.
pub fn finalize(losses: &mut [ImageLoss], cfg: &LossConfig) -> LossBundle {
    let num_fg: usize = losses.iter().map(|l| l.num_fg).sum();
    let norm = 1.0 / num_fg.max(1) as f64;
    let (mut cls, mut reg, mut obj) = (0.0, 0.0, 0.0);
    for l in losses.iter_mut() {
        l.scale(norm);
        cls += l.cls;
        reg += l.reg;
        obj += l.obj;
    }
    LossBundle::from_parts(cls, reg, obj, num_fg, cfg)
}

/// Single-image convenience: the normalised bundle and gradients.
pub fn detection_loss(
    preds: &RawPredictions,
    assignment: &AssignmentResult,
    gts: &[GroundTruth],
    cfg: &LossConfig,
) -> Result<(LossBundle, ImageLoss)> {
    let mut l = [image_loss(preds, assignment, gts, cfg)?];
    let b = finalize(&mut l, cfg);
    let [l] = l;
    Ok((b, l))
}

/// Mean squared difference and its gradient with respect to both inputs.
pub fn alignment(f_student: &[f64], f_aux: &[f64]) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    if f_student.len() != f_aux.len() || f_student.is_empty() {
        return Err(Error::Shape(format!(
            "feature sizes differ: {} vs {}",
            f_student.len(),
            f_aux.len()
        )));
    }
    let n = f_student.len() as f64;
    let mut v = 0.0;
    let mut gs = Vec::with_capacity(f_student.len());
    for (a, b) in f_student.iter().zip(f_aux) {
        let d = a - b;
        v += d * d;
        gs.push(2.0 * d / n);
    }
    let ga = gs.iter().map(|g| -g).collect();
    Ok((v / n, gs, ga))
}

/// `Loss_student + Loss_aux + λ · mean((F_student − F_aux)²)`.
pub fn distill_total(student: &LossBundle, aux: &LossBundle, f_student: &[f64], f_aux: &[f64], lambda: f64) -> Result<f64> {
    let (a, _, _) = alignment(f_student, f_aux)?;
    Ok(student.total + aux.total + lambda * a)
}

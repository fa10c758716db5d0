//! Boxes, IoU / CIoU and the per-cell grid decode.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

/// Guard added to every denominator.
pub const EPS: f64 = 1e-9;

/// Axis-aligned box in image pixels, corner form.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

/// Center form: center point plus extent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CenterBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let b = BBox { x1, y1, x2, y2 };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if [self.x1, self.y1, self.x2, self.y2].iter().any(|v| v.is_nan()) {
            return Err(Error::InvalidArgument(format!("NaN coordinate in {:?}", self)));
        }
        if self.x2 < self.x1 || self.y2 < self.y1 {
            return Err(Error::InvalidArgument(format!("inverted box {:?}", self)));
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) * 0.5, (self.y1 + self.y2) * 0.5)
    }

    pub fn to_center(&self) -> CenterBox {
        let (cx, cy) = self.center();
        CenterBox {
            cx,
            cy,
            w: self.width(),
            h: self.height(),
        }
    }

    pub fn translate(&self, dx: f64, dy: f64) -> BBox {
        BBox {
            x1: self.x1 + dx,
            y1: self.y1 + dy,
            x2: self.x2 + dx,
            y2: self.y2 + dy,
        }
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x > self.x1 && x < self.x2 && y > self.y1 && y < self.y2
    }
}

impl CenterBox {
    pub fn to_corners(&self) -> BBox {
        BBox {
            x1: self.cx - self.w * 0.5,
            y1: self.cy - self.h * 0.5,
            x2: self.cx + self.w * 0.5,
            y2: self.cy + self.h * 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoxMode {
    Xyxy,
    Cxcywh,
}

/// Reinterpret four numbers given in `from` mode as the other mode.
pub fn box_convert(v: [f64; 4], from: BoxMode) -> [f64; 4] {
    match from {
        BoxMode::Xyxy => {
            let c = BBox {
                x1: v[0],
                y1: v[1],
                x2: v[2],
                y2: v[3],
            }
            .to_center();
            [c.cx, c.cy, c.w, c.h]
        }
        BoxMode::Cxcywh => {
            let b = CenterBox {
                cx: v[0],
                cy: v[1],
                w: v[2],
                h: v[3],
            }
            .to_corners();
            [b.x1, b.y1, b.x2, b.y2]
        }
    }
}

/// Overlap area of two boxes.
pub fn intersection(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    iw * ih
}

/// Intersection over union, 0 when the union is empty.
pub fn iou(a: &BBox, b: &BBox) -> Result<f64> {
    a.validate()?;
    b.validate()?;
    Ok(iou_unchecked(a, b))
}

/// [`iou`] without validation, for hot loops over already-valid boxes.
pub fn iou_unchecked(a: &BBox, b: &BBox) -> f64 {
    let inter = intersection(a, b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// The three CIoU penalty components.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CiouTerms {
    pub iou: f64,
    /// Squared center distance over squared enclosing diagonal.
    pub distance: f64,
    /// Aspect-ratio consistency `v`.
    pub aspect: f64,
    /// Trade-off weight on `v`.
    pub alpha: f64,
}

impl CiouTerms {
    pub fn loss(&self) -> f64 {
        1.0 - self.iou + self.distance + self.alpha * self.aspect
    }
}

fn aspect_angle(w: f64, h: f64) -> f64 {
    (w / (h + EPS)).atan()
}

pub fn ciou_terms(pred: &BBox, gt: &BBox) -> CiouTerms {
    let inter = intersection(pred, gt);
    let union = pred.area() + gt.area() - inter + EPS;
    let iou = inter / union;
    let (pcx, pcy) = pred.center();
    let (gcx, gcy) = gt.center();
    let d2 = (pcx - gcx).powi(2) + (pcy - gcy).powi(2);
    let cw = pred.x2.max(gt.x2) - pred.x1.min(gt.x1);
    let ch = pred.y2.max(gt.y2) - pred.y1.min(gt.y1);
    let c2 = cw * cw + ch * ch + EPS;
    let dv = aspect_angle(gt.width(), gt.height()) - aspect_angle(pred.width(), pred.height());
    let aspect = 4.0 / (PI * PI) * dv * dv;
    let alpha = aspect / ((1.0 - iou) + aspect + EPS);
    CiouTerms {
        iou,
        distance: d2 / c2,
        aspect,
        alpha,
    }
}

/// `1 − IoU + d²/c² + α·v`.
pub fn ciou_loss(pred: &BBox, gt: &BBox) -> f64 {
    ciou_terms(pred, gt).loss()
}

/// Corner gradients of the CIoU components.
struct CiouParts {
    terms: CiouTerms,
    d_iou: [f64; 4],
    d_distance: [f64; 4],
    d_aspect: [f64; 4],
}

fn ciou_parts(pred: &BBox, gt: &BBox) -> CiouParts {
    let terms = ciou_terms(pred, gt);
    let (w, h) = (pred.width(), pred.height());

    // intersection over union
    let ix1 = pred.x1.max(gt.x1);
    let ix2 = pred.x2.min(gt.x2);
    let iy1 = pred.y1.max(gt.y1);
    let iy2 = pred.y2.min(gt.y2);
    let iw = ix2 - ix1;
    let ih = iy2 - iy1;
    let mut d_inter = [0.0; 4];
    if iw > 0.0 && ih > 0.0 {
        if pred.x1 >= gt.x1 {
            d_inter[0] = -ih;
        }
        if pred.x2 <= gt.x2 {
            d_inter[2] = ih;
        }
        if pred.y1 >= gt.y1 {
            d_inter[1] = -iw;
        }
        if pred.y2 <= gt.y2 {
            d_inter[3] = iw;
        }
    }
    let inter = iw.max(0.0) * ih.max(0.0);
    let union = pred.area() + gt.area() - inter + EPS;
    let d_area = [-h, -w, h, w];
    let d_iou: [f64; 4] = std::array::from_fn(|k| {
        let du = d_area[k] - d_inter[k];
        (d_inter[k] * union - inter * du) / (union * union)
    });

    // center distance over enclosing diagonal
    let (pcx, pcy) = pred.center();
    let (gcx, gcy) = gt.center();
    let d2 = (pcx - gcx).powi(2) + (pcy - gcy).powi(2);
    let cw = pred.x2.max(gt.x2) - pred.x1.min(gt.x1);
    let ch = pred.y2.max(gt.y2) - pred.y1.min(gt.y1);
    let c2 = cw * cw + ch * ch + EPS;
    let dd2 = [pcx - gcx, pcy - gcy, pcx - gcx, pcy - gcy];
    let dc2 = [
        if pred.x1 <= gt.x1 { -2.0 * cw } else { 0.0 },
        if pred.y1 <= gt.y1 { -2.0 * ch } else { 0.0 },
        if pred.x2 >= gt.x2 { 2.0 * cw } else { 0.0 },
        if pred.y2 >= gt.y2 { 2.0 * ch } else { 0.0 },
    ];
    let d_distance: [f64; 4] = std::array::from_fn(|k| (dd2[k] * c2 - d2 * dc2[k]) / (c2 * c2));

    // aspect consistency
    let hp = h + EPS;
    let dv = aspect_angle(gt.width(), gt.height()) - aspect_angle(w, h);
    let denom = hp * hp + w * w;
    let dv_dw = -8.0 / (PI * PI) * dv * hp / denom;
    let dv_dh = 8.0 / (PI * PI) * dv * w / denom;
    CiouParts {
        terms,
        d_iou,
        d_distance,
        d_aspect: [-dv_dw, -dv_dh, dv_dw, dv_dh],
    }
}

/// CIoU loss and its gradient with respect to the predicted corners
/// `(x1, y1, x2, y2)`, including the dependence of α on the prediction.
pub fn ciou_loss_grad(pred: &BBox, gt: &BBox) -> (f64, [f64; 4]) {
    let p = ciou_parts(pred, gt);
    let (a, v) = (p.terms.alpha, p.terms.aspect);
    let den = (1.0 - p.terms.iou) + v + EPS;
    let grad = std::array::from_fn(|k| {
        let d_alpha = (p.d_aspect[k] * den - v * (p.d_aspect[k] - p.d_iou[k])) / (den * den);
        -p.d_iou[k] + p.d_distance[k] + a * p.d_aspect[k] + v * d_alpha
    });
    (p.terms.loss(), grad)
}

/// Pixels-per-cell and extent of one prediction level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridSpec {
    pub stride: usize,
    pub grid_h: usize,
    pub grid_w: usize,
}

impl GridSpec {
    pub fn new(stride: usize, grid_h: usize, grid_w: usize) -> Result<Self> {
        if stride == 0 || grid_h == 0 || grid_w == 0 {
            return Err(Error::InvalidArgument(format!(
                "grid needs positive stride and extent, got {}/{}x{}",
                stride, grid_h, grid_w
            )));
        }
        Ok(GridSpec { stride, grid_h, grid_w })
    }

    pub fn for_input(input_size: usize, stride: usize) -> Result<Self> {
        if !input_size.is_multiple_of(stride) {
            return Err(Error::InvalidArgument(format!(
                "input {} not divisible by stride {}",
                input_size, stride
            )));
        }
        Self::new(stride, input_size / stride, input_size / stride)
    }

    pub fn cells(&self) -> usize {
        self.grid_h * self.grid_w
    }

    /// Upper-left pixel of cell `(i, j)`.
    pub fn cell_origin(&self, i: usize, j: usize) -> (f64, f64) {
        ((j * self.stride) as f64, (i * self.stride) as f64)
    }

    /// Pixel center of cell `(i, j)`.
    pub fn cell_center(&self, i: usize, j: usize) -> (f64, f64) {
        let s = self.stride as f64;
        ((j as f64 + 0.5) * s, (i as f64 + 0.5) * s)
    }
}

/// Decode one cell's raw `(dx, dy, dw, dh)`.
pub fn decode_cell(raw: [f64; 4], i: usize, j: usize, stride: usize) -> CenterBox {
    let s = stride as f64;
    CenterBox {
        cx: (raw[0] + j as f64) * s,
        cy: (raw[1] + i as f64) * s,
        w: raw[2].exp() * s,
        h: raw[3].exp() * s,
    }
}

/// Inverse of [`decode_cell`].
pub fn encode_cell(b: &CenterBox, i: usize, j: usize, stride: usize) -> [f64; 4] {
    let s = stride as f64;
    [b.cx / s - j as f64, b.cy / s - i as f64, (b.w / s).ln(), (b.h / s).ln()]
}

/// Chain a gradient on the decoded `(cx, cy, w, h)` back to raw outputs.
pub fn decode_cell_backward(raw: [f64; 4], stride: usize, d_box: [f64; 4]) -> [f64; 4] {
    let s = stride as f64;
    [
        d_box[0] * s,
        d_box[1] * s,
        d_box[2] * raw[2].exp() * s,
        d_box[3] * raw[3].exp() * s,
    ]
}

/// Chain a gradient on corners `(x1, y1, x2, y2)` to center form.
pub fn corners_to_center_grad(d: [f64; 4]) -> [f64; 4] {
    [d[0] + d[2], d[1] + d[3], 0.5 * (d[2] - d[0]), 0.5 * (d[3] - d[1])]
}

/// Decode a `[grid_h, grid_w, 4]` raw map into `[grid_h, grid_w, 4]`
/// center-form boxes `(cx, cy, w, h)`.
pub fn decode<T: Float>(raw: &Tensor<T>, grid: &GridSpec) -> Result<Tensor<T>> {
    if raw.shape() != [grid.grid_h, grid.grid_w, 4] {
        return Err(Error::Shape(format!(
            "raw map {:?} does not match grid {}x{}",
            raw.shape(),
            grid.grid_h,
            grid.grid_w
        )));
    }
    let mut out = Vec::with_capacity(raw.len());
    for i in 0..grid.grid_h {
        for j in 0..grid.grid_w {
            let o = (i * grid.grid_w + j) * 4;
            let r = [0, 1, 2, 3].map(|k| raw.data()[o + k].as_f64());
            let b = decode_cell(r, i, j, grid.stride);
            out.extend([b.cx, b.cy, b.w, b.h].map(T::from_f64_lossy));
        }
    }
    Tensor::from_vec(raw.shape(), out)
}

/// Inverse of [`decode`].
pub fn encode<T: Float>(boxes: &Tensor<T>, grid: &GridSpec) -> Result<Tensor<T>> {
    if boxes.shape() != [grid.grid_h, grid.grid_w, 4] {
        return Err(Error::Shape(format!("box map {:?} does not match grid", boxes.shape())));
    }
    let mut out = Vec::with_capacity(boxes.len());
    for i in 0..grid.grid_h {
        for j in 0..grid.grid_w {
            let o = (i * grid.grid_w + j) * 4;
            let d = |k: usize| boxes.data()[o + k].as_f64();
            let b = CenterBox {
                cx: d(0),
                cy: d(1),
                w: d(2),
                h: d(3),
            };
            out.extend(encode_cell(&b, i, j, grid.stride).map(T::from_f64_lossy));
        }
    }
    Tensor::from_vec(boxes.shape(), out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    #[test]
    fn iou_examples() {
        assert_eq!(iou(&bx(0., 0., 2., 2.), &bx(0., 0., 2., 2.)).unwrap(), 1.0);
        assert_abs_diff_eq!(iou(&bx(0., 0., 2., 2.), &bx(1., 1., 3., 3.)).unwrap(), 1.0 / 7.0, epsilon = 1e-12);
        assert_eq!(iou(&bx(0., 0., 1., 1.), &bx(5., 5., 6., 6.)).unwrap(), 0.0);
        assert_eq!(iou(&bx(1., 1., 1., 1.), &bx(1., 1., 1., 1.)).unwrap(), 0.0);
    }

    #[test]
    fn iou_rejects_nan() {
        let bad = BBox {
            x1: f64::NAN,
            y1: 0.,
            x2: 1.,
            y2: 1.,
        };
        assert!(iou(&bad, &bx(0., 0., 1., 1.)).is_err());
        assert!(BBox::new(2., 0., 1., 1.).is_err());
    }

    #[test]
    fn ciou_examples() {
        assert_abs_diff_eq!(ciou_loss(&bx(0., 0., 2., 2.), &bx(0., 0., 2., 2.)), 0.0, epsilon = 1e-8);
        let l = ciou_loss(&bx(0., 0., 2., 2.), &bx(1., 1., 3., 3.));
        assert_abs_diff_eq!(l, 1.0 - 1.0 / 7.0 + 2.0 / 18.0, epsilon = 1e-8);
        assert_abs_diff_eq!(l, 0.968254, epsilon = 1e-6);
        // 2x2 vs 4x1 centered at the origin
        let t = ciou_terms(&bx(-1., -1., 1., 1.), &bx(-2., -0.5, 2., 0.5));
        let v = 4.0 / (PI * PI) * (4f64.atan() - 1f64.atan()).powi(2);
        // closed form evaluates to 0.1183647183...
        assert_abs_diff_eq!(v, 0.118_364_718_342_904_45, epsilon = 1e-12);
        assert_abs_diff_eq!(v, 0.118366, epsilon = 2e-6);
        assert_abs_diff_eq!(t.aspect, v, epsilon = 1e-8);
        assert_abs_diff_eq!(t.alpha, v / ((1.0 - t.iou) + v), epsilon = 1e-8);
    }

    #[test]
    fn ciou_degenerate_pred_is_finite() {
        let l = ciou_loss(&bx(1., 1., 1., 3.), &bx(0., 0., 2., 2.));
        assert!(l.is_finite());
        let (l2, g) = ciou_loss_grad(&bx(1., 1., 3., 1.), &bx(0., 0., 2., 2.));
        assert!(l2.is_finite() && g.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn convert_examples() {
        assert_eq!(box_convert([0., 0., 2., 2.], BoxMode::Xyxy), [1., 1., 2., 2.]);
        assert_eq!(box_convert([5., 5., 5., 9.], BoxMode::Xyxy), [5., 7., 0., 4.]);
    }

    #[test]
    fn decode_examples() {
        let g = GridSpec::new(8, 6, 6).unwrap();
        let b = decode_cell([0., 0., 0., 0.], 0, 0, 8);
        assert_eq!((b.cx, b.cy, b.w, b.h), (0., 0., 8., 8.));
        let b = decode_cell([0.5, 0.5, 0., 0.], 4, 3, 8);
        assert_eq!((b.cx, b.cy, b.w, b.h), (28., 36., 8., 8.));
        let mut last = 0.0;
        for k in -20..20 {
            let w = decode_cell([0., 0., k as f64 * 0.25, 0.], 1, 1, 8).w;
            assert!(w > last);
            last = w;
        }
        assert!(decode(&Tensor::<f64>::zeros(&[5, 6, 4]), &g).is_err());
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (-50.0..50.0f64, -50.0..50.0f64, 0.0..40.0f64, 0.0..40.0f64)
            .prop_map(|(x, y, w, h)| BBox { x1: x, y1: y, x2: x + w, y2: y + h })
    }

    proptest! {
        #[test]
        fn iou_symmetric_bounded(a in arb_box(), b in arb_box()) {
            let ab = iou(&a, &b).unwrap();
            let ba = iou(&b, &a).unwrap();
            prop_assert!((ab - ba).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&ab));
            if a.area() > 0.0 {
                prop_assert!((iou(&a, &a).unwrap() - 1.0).abs() < 1e-12);
            }
        }

        #[test]
        fn ciou_bounds_and_translation(a in arb_box(), b in arb_box(), dx in -100.0..100.0f64, dy in -100.0..100.0f64) {
            prop_assume!(b.area() > 1e-3);
            let l = ciou_loss(&a, &b);
            prop_assert!((-1e-12..3.0).contains(&l));
            // self-loss is EPS / area from the union guard
            prop_assert!(ciou_loss(&b, &b).abs() <= 2.0 * EPS / b.area());
            let shifted = ciou_loss(&a.translate(dx, dy), &b.translate(dx, dy));
            prop_assert!((l - shifted).abs() < 1e-6);
        }

        #[test]
        fn convert_round_trip(a in arb_box()) {
            let c = box_convert([a.x1, a.y1, a.x2, a.y2], BoxMode::Xyxy);
            let back = box_convert(c, BoxMode::Cxcywh);
            for (u, v) in back.iter().zip([a.x1, a.y1, a.x2, a.y2]) {
                prop_assert!((u - v).abs() <= 2.0 * f64::EPSILON * v.abs().max(1.0) * 64.0);
            }
        }

        #[test]
        fn decode_encode_round_trip(raw in proptest::collection::vec(-3.0..3.0f64, 3 * 4 * 4)) {
            let g = GridSpec::new(16, 3, 4).unwrap();
            let t = Tensor::from_vec(&[3, 4, 4], raw).unwrap();
            let back = encode(&decode(&t, &g).unwrap(), &g).unwrap();
            prop_assert!(back.max_abs_diff(&t) < 1e-9);
        }
    }
}

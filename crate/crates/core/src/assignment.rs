//! SimOTA dynamic label assignment with a Focal + CIoU cost, the legacy
//! CE + IoU cost, and an exhaustive reference implementation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{ciou_loss, iou_unchecked, BBox};
use crate::losses::{bce, focal_loss};

/// One prediction location on a pyramid level.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Location {
    pub level: usize,
    pub i: usize,
    pub j: usize,
    pub stride: usize,
}

impl Location {
    /// Pixel center of the cell.
    pub fn center(&self) -> (f64, f64) {
        let s = self.stride as f64;
        ((self.j as f64 + 0.5) * s, (self.i as f64 + 0.5) * s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub bbox: BBox,
    pub class: usize,
}

/// Detached predictions for every location of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateSet {
    pub locations: Vec<Location>,
    pub boxes: Vec<BBox>,
    /// Row-major `[len × num_classes]` class probabilities.
    pub cls_probs: Vec<f64>,
    pub obj_probs: Vec<f64>,
    pub num_classes: usize,
}

impl CandidateSet {
    pub fn len(&self) -> usize {
        self.locations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.locations.is_empty()
    }

    pub fn cls(&self, c: usize) -> &[f64] {
        &self.cls_probs[c * self.num_classes..(c + 1) * self.num_classes]
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        if self.boxes.len() != n || self.obj_probs.len() != n || self.cls_probs.len() != n * self.num_classes {
            return Err(Error::Shape("candidate set sequences disagree in length".into()));
        }
        let ok = |p: &f64| (0.0..=1.0).contains(p);
        if !self.cls_probs.iter().all(ok) || !self.obj_probs.iter().all(ok) {
            return Err(Error::InvalidArgument("candidate probabilities must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CostMode {
    /// Focal classification cost plus CIoU regression cost.
    Improved,
    /// Cross-entropy classification cost plus `-ln IoU`.
    Legacy,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AssignConfig {
    /// Number of top IoUs summed for dynamic k.
    pub q: usize,
    /// Center-prior radius in strides.
    pub radius: f64,
    /// Weight of the regression cost.
    pub alpha: f64,
    pub focal_gamma: f64,
    pub focal_alpha: f64,
    pub mode: CostMode,
}

impl Default for AssignConfig {
    fn default() -> Self {
        AssignConfig {
            q: 10,
            radius: 2.5,
            alpha: 3.0,
            focal_gamma: 2.0,
            focal_alpha: 0.25,
            mode: CostMode::Improved,
        }
    }
}

/// Dense `[num_gt × num_candidates]` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<T> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

impl<T: Copy> Matrix<T> {
    pub fn filled(rows: usize, cols: usize, v: T) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![v; rows * cols],
        }
    }

    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }
}

/// `+∞` marks pairs excluded by the center prior.
pub type CostMatrix = Matrix<f64>;

/// A pair is admissible when the location center is strictly inside the GT
/// box or within `radius · stride` of the GT center along both axes.
pub fn center_prior(locations: &[Location], gts: &[GroundTruth], radius: f64) -> Matrix<bool> {
    let mut m = Matrix::filled(gts.len(), locations.len(), false);
    for (g, gt) in gts.iter().enumerate() {
        let (gx, gy) = gt.bbox.center();
        for (c, loc) in locations.iter().enumerate() {
            let (x, y) = loc.center();
            let r = radius * loc.stride as f64;
            let near = (x - gx).abs() < r && (y - gy).abs() < r;
            m.set(g, c, gt.bbox.contains(x, y) || near);
        }
    }
    m
}

/// IoU of every admissible pair; zero elsewhere.
pub fn iou_matrix(cands: &CandidateSet, gts: &[GroundTruth], prior: &Matrix<bool>) -> Matrix<f64> {
    let mut m = Matrix::filled(gts.len(), cands.len(), 0.0);
    for (g, gt) in gts.iter().enumerate() {
        for c in 0..cands.len() {
            if prior.get(g, c) {
                m.set(g, c, iou_unchecked(&cands.boxes[c], &gt.bbox));
            }
        }
    }
    m
}

/// Classification cost of assigning candidate `c` to a GT of class `class`:
/// the per-class loss of the joint probability `cls · obj` against the
/// one-hot target, summed over classes.
pub fn classification_cost(cands: &CandidateSet, c: usize, class: usize, cfg: &AssignConfig) -> f64 {
    let obj = cands.obj_probs[c];
    cands
        .cls(c)
        .iter()
        .enumerate()
        .map(|(k, &p)| {
            let y = if k == class { 1.0 } else { 0.0 };
            let joint = p * obj;
            match cfg.mode {
                CostMode::Improved => focal_loss(joint, y, cfg.focal_gamma, cfg.focal_alpha),
                CostMode::Legacy => bce(joint, y),
            }
        })
        .sum()
}

/// Regression cost of a single pair.
pub fn regression_cost(pred: &BBox, gt: &BBox, mode: CostMode) -> f64 {
    match mode {
        CostMode::Improved => ciou_loss(pred, gt),
        CostMode::Legacy => -(iou_unchecked(pred, gt) + 1e-8).ln(),
    }
}

pub fn build_cost(
    cands: &CandidateSet,
    gts: &[GroundTruth],
    prior: &Matrix<bool>,
    cfg: &AssignConfig,
) -> Result<CostMatrix> {
    cands.validate()?;
    for gt in gts {
        if gt.class >= cands.num_classes {
            return Err(Error::InvalidArgument(format!(
                "GT class {} out of range for {} classes",
                gt.class, cands.num_classes
            )));
        }
    }
    let mut m = Matrix::filled(gts.len(), cands.len(), f64::INFINITY);
    for (g, gt) in gts.iter().enumerate() {
        for c in 0..cands.len() {
            if prior.get(g, c) {
                let cls = classification_cost(cands, c, gt.class, cfg);
                let reg = regression_cost(&cands.boxes[c], &gt.bbox, cfg.mode);
                m.set(g, c, cls + cfg.alpha * reg);
            }
        }
    }
    Ok(m)
}

/// `max(1, floor(sum of the top-min(q, n) IoUs))`.
pub fn dynamic_k(ious: &[f64], q: usize) -> usize {
    let mut v = ious.to_vec();
    v.sort_by(|a, b| b.total_cmp(a));
    let s: f64 = v.iter().take(q).sum();
    (s.floor() as usize).max(1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssignmentResult {
    pub fg_mask: Vec<bool>,
    /// GT index for each foreground candidate, `None` for background.
    pub matched_gt: Vec<Option<usize>>,
    /// Budget per GT; 0 for GTs without any admissible candidate.
    pub dynamic_k: Vec<usize>,
    pub num_fg: usize,
    /// GTs that had no admissible candidate.
    pub dropped_gts: usize,
}

impl AssignmentResult {
    pub fn background(num_candidates: usize, num_gts: usize) -> Self {
        AssignmentResult {
            fg_mask: vec![false; num_candidates],
            matched_gt: vec![None; num_candidates],
            dynamic_k: vec![0; num_gts],
            num_fg: 0,
            dropped_gts: num_gts,
        }
    }

    /// Foreground candidate indices in ascending order.
    pub fn foreground(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.matched_gt
            .iter()
            .enumerate()
            .filter_map(|(c, g)| g.map(|g| (c, g)))
    }
}

/// Per-GT record for inspection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssignmentRecord {
    pub image: usize,
    pub gt: usize,
    pub k: usize,
    pub candidates: Vec<usize>,
    pub costs: Vec<f64>,
}

/// Everything `simota_assign` computed, for debugging and tests.
#[derive(Debug, Clone)]
pub struct AssignmentTrace {
    pub result: AssignmentResult,
    pub prior: Matrix<bool>,
    pub ious: Matrix<f64>,
    pub costs: CostMatrix,
}

impl AssignmentTrace {
    pub fn records(&self, image: usize) -> Vec<AssignmentRecord> {
        (0..self.costs.rows)
            .map(|g| {
                let candidates: Vec<usize> = self.result.foreground().filter(|&(_, m)| m == g).map(|(c, _)| c).collect();
                AssignmentRecord {
                    image,
                    gt: g,
                    k: self.result.dynamic_k[g],
                    costs: candidates.iter().map(|&c| self.costs.get(g, c)).collect(),
                    candidates,
                }
            })
            .collect()
    }

    /// Line-delimited JSON, one record per GT.
    pub fn dump(&self, image: usize) -> String {
        self.records(image)
            .iter()
            .map(|r| serde_json::to_string(r).expect("record serialises") + "\n")
            .collect()
    }
}

fn by_cost(costs: &[f64]) -> impl Fn(&usize, &usize) -> std::cmp::Ordering + '_ {
    move |&a, &b| costs[a].total_cmp(&costs[b]).then(a.cmp(&b))
}

/// Resolve an assignment from a precomputed cost matrix, IoUs and prior.
///
/// Each GT takes its `k` cheapest admissible candidates (lower index wins
/// ties). A candidate claimed by several GTs keeps the cheapest one (lower
/// GT index wins ties). A GT left with no candidate then takes its cheapest
/// admissible candidate that is still background, if any.
pub fn resolve(costs: &CostMatrix, ious: &Matrix<f64>, prior: &Matrix<bool>, q: usize) -> AssignmentResult {
    let (ng, nc) = (costs.rows, costs.cols);
    let mut res = AssignmentResult::background(nc, ng);
    res.dropped_gts = 0;
    let mut claims: Vec<Vec<usize>> = vec![Vec::new(); nc];
    for g in 0..ng {
        let admissible: Vec<usize> = (0..nc).filter(|&c| prior.get(g, c)).collect();
        if admissible.is_empty() {
            res.dropped_gts += 1;
            continue;
        }
        let k = dynamic_k(ious.row(g), q).min(admissible.len());
        res.dynamic_k[g] = k;
        let mut order = admissible;
        order.sort_by(by_cost(costs.row(g)));
        for &c in &order[..k] {
            claims[c].push(g);
        }
    }
    for (c, gs) in claims.iter().enumerate() {
        if let Some(&g) = gs
            .iter()
            .min_by(|&&a, &&b| costs.get(a, c).total_cmp(&costs.get(b, c)).then(a.cmp(&b)))
        {
            res.matched_gt[c] = Some(g);
        }
    }
    for g in 0..ng {
        if res.dynamic_k[g] == 0 || res.matched_gt.contains(&Some(g)) {
            continue;
        }
        let best = (0..nc)
            .filter(|&c| prior.get(g, c) && res.matched_gt[c].is_none())
            .min_by(by_cost(costs.row(g)));
        if let Some(c) = best {
            res.matched_gt[c] = Some(g);
        }
    }
    for (c, m) in res.matched_gt.iter().enumerate() {
        res.fg_mask[c] = m.is_some();
    }
    res.num_fg = res.fg_mask.iter().filter(|&&f| f).count();
    res
}

pub fn simota_trace(cands: &CandidateSet, gts: &[GroundTruth], cfg: &AssignConfig) -> Result<AssignmentTrace> {
    let prior = center_prior(&cands.locations, gts, cfg.radius);
    let ious = iou_matrix(cands, gts, &prior);
    let costs = build_cost(cands, gts, &prior, cfg)?;
    let result = resolve(&costs, &ious, &prior, cfg.q);
    Ok(AssignmentTrace {
        result,
        prior,
        ious,
        costs,
    })
}

pub fn simota_assign(cands: &CandidateSet, gts: &[GroundTruth], cfg: &AssignConfig) -> Result<AssignmentResult> {
    Ok(simota_trace(cands, gts, cfg)?.result)
}

/// Exhaustive reference for [`resolve`]: enumerates every size-`k` subset
/// of each GT's admissible candidates, keeps the minimum-total-cost subset
/// (lexicographically smallest on ties), then applies the same conflict and
/// starvation rules by direct scans. Exponential; for small instances only.
pub fn resolve_oracle(costs: &CostMatrix, ious: &Matrix<f64>, prior: &Matrix<bool>, q: usize) -> AssignmentResult {
    let (ng, nc) = (costs.rows, costs.cols);
    let mut fg = vec![None; nc];
    let mut ks = vec![0; ng];
    let mut dropped = 0;
    let mut chosen: Vec<Vec<usize>> = vec![Vec::new(); ng];
    for g in 0..ng {
        let adm: Vec<usize> = (0..nc).filter(|&c| prior.get(g, c)).collect();
        if adm.is_empty() {
            dropped += 1;
            continue;
        }
        // dynamic k from a full descending scan
        let mut sum = 0.0;
        let mut taken = vec![false; nc];
        for _ in 0..q.min(nc) {
            let mut best: Option<usize> = None;
            for (c, _) in taken.iter().enumerate().filter(|(_, t)| !**t) {
                if best.is_none_or(|b| ious.get(g, c) > ious.get(g, b)) {
                    best = Some(c);
                }
            }
            if let Some(b) = best {
                taken[b] = true;
                sum += ious.get(g, b);
            }
        }
        let k = ((sum.floor() as usize).max(1)).min(adm.len());
        ks[g] = k;
        let mut best: Option<(Vec<f64>, Vec<usize>)> = None;
        for mask in 0u64..(1u64 << adm.len()) {
            if mask.count_ones() as usize != k {
                continue;
            }
            let set: Vec<usize> = (0..adm.len()).filter(|&b| mask & (1 << b) != 0).map(|b| adm[b]).collect();
            // compare sorted cost multisets so equal totals compare equal exactly
            let mut key: Vec<f64> = set.iter().map(|&c| costs.get(g, c)).collect();
            key.sort_by(f64::total_cmp);
            let better = match &best {
                None => true,
                Some((bk, bs)) => {
                    let ts: f64 = key.iter().sum();
                    let bt: f64 = bk.iter().sum();
                    if key == *bk {
                        set < *bs
                    } else {
                        ts < bt || (ts == bt && set < *bs)
                    }
                }
            };
            if better {
                best = Some((key, set));
            }
        }
        chosen[g] = best.map(|b| b.1).unwrap_or_default();
    }
    for (c, slot) in fg.iter_mut().enumerate() {
        let mut owner: Option<usize> = None;
        for (g, set) in chosen.iter().enumerate() {
            if set.contains(&c) {
                owner = match owner {
                    Some(o) if costs.get(o, c) <= costs.get(g, c) => Some(o),
                    _ => Some(g),
                };
            }
        }
        *slot = owner;
    }
    for (g, &k) in ks.iter().enumerate() {
        if k == 0 || fg.contains(&Some(g)) {
            continue;
        }
        let mut best: Option<usize> = None;
        for (c, slot) in fg.iter().enumerate() {
            if prior.get(g, c) && slot.is_none() && best.is_none_or(|b| costs.get(g, c) < costs.get(g, b)) {
                best = Some(c);
            }
        }
        if let Some(c) = best {
            fg[c] = Some(g);
        }
    }
    let fg_mask: Vec<bool> = fg.iter().map(Option::is_some).collect();
    AssignmentResult {
        num_fg: fg_mask.iter().filter(|&&f| f).count(),
        fg_mask,
        matched_gt: fg,
        dynamic_k: ks,
        dropped_gts: dropped,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn loc(i: usize, j: usize, stride: usize) -> Location {
        Location { level: 0, i, j, stride }
    }

    #[test]
    fn dynamic_k_examples() {
        assert_eq!(dynamic_k(&[0.9, 0.8, 0.05, 0.0], 10), 1);
        assert_eq!(dynamic_k(&[0.9, 0.85, 0.8], 10), 2);
        assert_eq!(dynamic_k(&[0.0; 5], 10), 1);
        assert_eq!(dynamic_k(&[0.9; 5], 2), 1);
    }

    #[test]
    fn center_prior_examples() {
        let gt = GroundTruth {
            bbox: BBox::new(8.0, 8.0, 16.0, 16.0).unwrap(),
            class: 0,
        };
        let locs = [loc(1, 1, 8), loc(100, 100, 8)];
        let m = center_prior(&locs, &[gt], 2.5);
        assert!(m.get(0, 0));
        assert!(!m.get(0, 1));
    }

    #[test]
    fn single_candidate_assigned() {
        let costs = Matrix {
            rows: 1,
            cols: 3,
            data: vec![f64::INFINITY, 0.7, f64::INFINITY],
        };
        let prior = Matrix {
            rows: 1,
            cols: 3,
            data: vec![false, true, false],
        };
        let ious = Matrix::filled(1, 3, 0.0);
        let r = resolve(&costs, &ious, &prior, 10);
        assert_eq!(r.num_fg, 1);
        assert_eq!(r.matched_gt[1], Some(0));
    }
}

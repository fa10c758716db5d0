//! Analytic parameter and multiply-accumulate accounting, plus a wall-clock
//! timing harness.
//!
//! Counting runs the real model code on [`CostTracer`], a backend that only
//! propagates shapes. Whatever the inference forward touches is counted, and
//! nothing else: auxiliary heads never enter the inference graph, so they add
//! no cost.
//!
//! Units: one multiply-accumulate is one `flop_unit`. Batch norm, activations,
//! elementwise arithmetic and pooling cost one unit per element; pure
//! rearrangements (concat, upsample, space/depth shuffles) are free.
//! Reported GFLOPs follow the detector-literature convention of two
//! floating-point operations per multiply-accumulate.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::backend::{Backend, BufferId, ParamId, ParamStore, PoolKind};
use crate::error::{Error, Result};
use crate::kernels::conv_out_hw;
use crate::tensor::Float;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shape(usize);

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cost {
    pub params: u64,
    pub flop_units: u64,
}

/// Parameter and compute totals with a per-scope breakdown.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub params: u64,
    pub flop_units: u64,
    pub input_size: usize,
    pub breakdown: BTreeMap<String, Cost>,
}

impl CostReport {
    pub fn gflops(&self) -> f64 {
        2.0 * self.flop_units as f64 / 1e9
    }

    pub fn params_m(&self) -> f64 {
        self.params as f64 / 1e6
    }

    /// Merge breakdown entries to at most `depth` dotted path components.
    pub fn aggregate(&self, depth: usize) -> BTreeMap<String, Cost> {
        let mut out: BTreeMap<String, Cost> = BTreeMap::new();
        for (path, c) in &self.breakdown {
            let key: Vec<&str> = path.split('.').take(depth).collect();
            let e = out.entry(key.join(".")).or_default();
            e.params += c.params;
            e.flop_units += c.flop_units;
        }
        out
    }

    /// Human-readable table followed by totals.
    pub fn to_table(&self, depth: usize) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<40} {:>12} {:>16}", "module", "params", "flop_units");
        for (k, c) in self.aggregate(depth) {
            let _ = writeln!(s, "{:<40} {:>12} {:>16}", k, c.params, c.flop_units);
        }
        let _ = writeln!(
            s,
            "total @{}: params {} ({:.2}M)  flop_units {}  ({:.2} GFLOPs)",
            self.input_size,
            self.params,
            self.params_m(),
            self.flop_units,
            self.gflops()
        );
        s
    }

    /// One `key=value` record per line, stable for regression diffs.
    pub fn to_lines(&self) -> String {
        let mut s = String::new();
        for (k, c) in &self.breakdown {
            let _ = writeln!(s, "module={} params={} flop_units={}", k, c.params, c.flop_units);
        }
        let _ = writeln!(
            s,
            "total input_size={} params={} flop_units={} gflops={:.4}",
            self.input_size,
            self.params,
            self.flop_units,
            self.gflops()
        );
        s
    }
}

/// Shape-only backend that meters parameters and multiply-accumulates.
pub struct CostTracer {
    shapes: Vec<Vec<usize>>,
    scope: Vec<String>,
    seen: HashSet<ParamId>,
    report: CostReport,
}

impl CostTracer {
    pub fn new(input_size: usize) -> Self {
        CostTracer {
            shapes: Vec::new(),
            scope: Vec::new(),
            seen: HashSet::new(),
            report: CostReport {
                input_size,
                ..Default::default()
            },
        }
    }

    pub fn input(&mut self, shape: &[usize]) -> Shape {
        self.push(shape.to_vec())
    }

    pub fn finish(self) -> CostReport {
        self.report
    }

    /// Totals accumulated so far.
    pub fn report(&self) -> &CostReport {
        &self.report
    }

    fn push(&mut self, s: Vec<usize>) -> Shape {
        self.shapes.push(s);
        Shape(self.shapes.len() - 1)
    }

    fn dims(&self, v: Shape) -> Result<[usize; 4]> {
        match self.shapes[v.0][..] {
            [n, c, h, w] => Ok([n, c, h, w]),
            ref s => Err(Error::Shape(format!("expected 4-d shape, got {:?}", s))),
        }
    }

    fn numel(&self, v: Shape) -> u64 {
        self.shapes[v.0].iter().product::<usize>() as u64
    }

    fn charge(&mut self, params: u64, flops: u64) {
        let key = if self.scope.is_empty() {
            "root".to_string()
        } else {
            self.scope.join(".")
        };
        let e = self.report.breakdown.entry(key).or_default();
        e.params += params;
        e.flop_units += flops;
        self.report.params += params;
        self.report.flop_units += flops;
    }
}

impl<T: Float> Backend<T> for CostTracer {
    type Var = Shape;

    fn training(&self) -> bool {
        false
    }

    fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Shape {
        let shape = store.get(id).shape().to_vec();
        if self.seen.insert(id) {
            let n: usize = shape.iter().product();
            self.charge(n as u64, 0);
        }
        self.push(shape)
    }

    fn shape(&self, v: Shape) -> Vec<usize> {
        self.shapes[v.0].clone()
    }

    fn conv2d(&mut self, x: Shape, w: Shape, b: Option<Shape>, stride: usize, pad: usize, groups: usize) -> Result<Shape> {
        let [n, cin, h, wd] = self.dims(x)?;
        let [cout, cin_g, k, _] = self.dims(w)?;
        if cin_g * groups != cin {
            return Err(Error::Shape(format!("conv expects {} input channels, got {}", cin_g * groups, cin)));
        }
        let (ho, wo) = conv_out_hw(h, wd, k, stride, pad);
        let out_elems = (n * cout * ho * wo) as u64;
        let macs = (k * k * cin_g) as u64 * out_elems;
        self.charge(0, macs + if b.is_some() { out_elems } else { 0 });
        Ok(self.push(vec![n, cout, ho, wo]))
    }

    fn batch_norm(&mut self, x: Shape, _g: Shape, _b: Shape, _store: &ParamStore<T>, _buf: BufferId) -> Result<Shape> {
        let e = self.numel(x);
        self.charge(0, e);
        Ok(x)
    }

    fn silu(&mut self, x: Shape) -> Shape {
        let e = self.numel(x);
        self.charge(0, e);
        x
    }

    fn sigmoid(&mut self, x: Shape) -> Shape {
        let e = self.numel(x);
        self.charge(0, e);
        x
    }

    fn add(&mut self, a: Shape, b: Shape) -> Result<Shape> {
        if self.shapes[a.0] != self.shapes[b.0] {
            return Err(Error::Shape("add shape mismatch".into()));
        }
        let e = self.numel(a);
        self.charge(0, e);
        Ok(a)
    }

    fn mul_gate(&mut self, x: Shape, _gate: Shape) -> Result<Shape> {
        let e = self.numel(x);
        self.charge(0, e);
        Ok(x)
    }

    fn concat(&mut self, xs: &[Shape]) -> Result<Shape> {
        let [n, _, h, w] = self.dims(xs[0])?;
        let mut c = 0;
        for x in xs {
            let d = self.dims(*x)?;
            if (d[0], d[2], d[3]) != (n, h, w) {
                return Err(Error::Shape("concat spatial mismatch".into()));
            }
            c += d[1];
        }
        Ok(self.push(vec![n, c, h, w]))
    }

    fn upsample_nearest(&mut self, x: Shape, factor: usize) -> Shape {
        let [n, c, h, w] = self.dims(x).expect("4-d");
        self.push(vec![n, c, h * factor, w * factor])
    }

    fn max_pool(&mut self, x: Shape, kernel: usize) -> Shape {
        let e = self.numel(x) * (kernel * kernel) as u64;
        self.charge(0, e);
        x
    }

    fn global_pool(&mut self, x: Shape, _kind: PoolKind) -> Shape {
        let [n, c, _, _] = self.dims(x).expect("4-d");
        let e = self.numel(x);
        self.charge(0, e);
        self.push(vec![n, c, 1, 1])
    }

    fn channel_pool(&mut self, x: Shape, _kind: PoolKind) -> Shape {
        let [n, _, h, w] = self.dims(x).expect("4-d");
        let e = self.numel(x);
        self.charge(0, e);
        self.push(vec![n, 1, h, w])
    }

    fn space_to_depth(&mut self, x: Shape, r: usize) -> Result<Shape> {
        let [n, c, h, w] = self.dims(x)?;
        if h % r != 0 || w % r != 0 {
            return Err(Error::Shape(format!("{}x{} not divisible by {}", h, w, r)));
        }
        Ok(self.push(vec![n, c * r * r, h / r, w / r]))
    }

    fn depth_to_space(&mut self, x: Shape, r: usize) -> Result<Shape> {
        let [n, c, h, w] = self.dims(x)?;
        if c % (r * r) != 0 {
            return Err(Error::Shape(format!("{} channels not divisible by {}", c, r * r)));
        }
        Ok(self.push(vec![n, c / (r * r), h * r, w * r]))
    }

    fn enter(&mut self, name: &str) {
        self.scope.push(name.to_string());
    }

    fn exit(&mut self) {
        self.scope.pop();
    }
}

/// Latency summary in milliseconds per image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Latency {
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p95_ms: f64,
    pub reps: usize,
}

/// Time `reps` calls of `f` after `warmup` discarded calls. `f` processes
/// `batch` images per call; statistics are per image.
pub fn time_runs(reps: usize, warmup: usize, batch: usize, mut f: impl FnMut()) -> Latency {
    for _ in 0..warmup {
        f();
    }
    let mut samples: Vec<f64> = (0..reps.max(1))
        .map(|_| {
            let t = Instant::now();
            f();
            t.elapsed().as_secs_f64() * 1e3 / batch.max(1) as f64
        })
        .collect();
    samples.sort_by(|a, b| a.total_cmp(b));
    let mean = samples.iter().sum::<f64>() / samples.len() as f64;
    Latency {
        mean_ms: mean,
        p50_ms: percentile(&samples, 0.50),
        p95_ms: percentile(&samples, 0.95),
        reps: samples.len(),
    }
}

/// Nearest-rank percentile of sorted samples.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn pointwise_conv_units() {
        let mut store = ParamStore::<f32>::new();
        let w = store.add("w", Tensor::zeros(&[32, 16, 1, 1]));
        let mut t = CostTracer::new(10);
        let x = t.input(&[1, 16, 10, 10]);
        let wv = Backend::<f32>::param(&mut t, &store, w);
        Backend::<f32>::conv2d(&mut t, x, wv, None, 1, 0, 1).unwrap();
        let r = t.finish();
        assert_eq!(r.flop_units, 51_200);
        assert_eq!(r.params, 512);
    }

    #[test]
    fn shared_param_counted_once() {
        let mut store = ParamStore::<f32>::new();
        let w = store.add("w", Tensor::zeros(&[4, 4, 3, 3]));
        let mut t = CostTracer::new(8);
        let x = t.input(&[1, 4, 8, 8]);
        for _ in 0..3 {
            let wv = Backend::<f32>::param(&mut t, &store, w);
            Backend::<f32>::conv2d(&mut t, x, wv, None, 1, 1, 1).unwrap();
        }
        assert_eq!(t.finish().params, 144);
    }

    #[test]
    fn latency_statistics_on_constant_stub() {
        let lat = time_runs(10, 2, 1, || std::thread::sleep(std::time::Duration::from_millis(2)));
        assert_eq!(lat.reps, 10);
        assert!(lat.p50_ms >= 1.5);
        assert!(lat.p95_ms >= lat.p50_ms);
        // mean is within jitter of the median for a constant-time body
        assert!(lat.mean_ms >= lat.p50_ms * 0.5 && lat.mean_ms <= lat.p95_ms * 1.5 + 1.0);
    }
}

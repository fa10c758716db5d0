//! Tape-based reverse-mode autodiff over NCHW tensors.

use std::collections::HashMap;

use crate::backend::{Backend, BufferId, ParamId, ParamStore, PoolKind};
use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::tensor::{Float, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.03;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Input,
    Param,
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    Norm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    Silu(Var),
    Sigmoid(Var),
    Add(Var, Var),
    MulGate {
        x: Var,
        gate: Var,
    },
    Concat(Vec<Var>),
    Upsample {
        x: Var,
        factor: usize,
    },
    /// Pooling that routes gradient through recorded source indices.
    Gather {
        x: Var,
        index: Vec<u32>,
    },
    GlobalAvg(Var),
    ChannelAvg(Var),
    SpaceToDepth {
        x: Var,
        r: usize,
    },
    DepthToSpace {
        x: Var,
        r: usize,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Running-stat update produced by a training-mode batch norm.
#[derive(Debug, Clone)]
pub struct NormUpdate<T> {
    pub buffer: BufferId,
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    training: bool,
    params: HashMap<ParamId, Var>,
    norm_updates: Vec<NormUpdate<T>>,
}

/// Gradients of leaves (inputs and parameters) after a backward pass.
pub struct Gradients<T> {
    leaves: HashMap<usize, Tensor<T>>,
    params: HashMap<ParamId, usize>,
}

impl<T: Float> Gradients<T> {
    pub fn of(&self, v: Var) -> Option<&Tensor<T>> {
        self.leaves.get(&v.0)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.get(&id).and_then(|n| self.leaves.get(n))
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.params
            .iter()
            .filter_map(|(id, n)| self.leaves.get(n).map(|t| (*id, t)))
    }
}

impl<T: Float> Graph<T> {
    pub fn new(training: bool) -> Self {
        Graph {
            nodes: Vec::new(),
            training,
            params: HashMap::new(),
            norm_updates: Vec::new(),
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Input)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn norm_updates(&self) -> &[NormUpdate<T>] {
        &self.norm_updates
    }

    pub fn param_vars(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.params.iter().map(|(k, v)| (*k, *v))
    }

    /// Fold the recorded batch statistics into the store's running buffers.
    pub fn apply_norm_updates(&self, store: &mut ParamStore<T>) {
        let m = T::from_f64_lossy(BN_MOMENTUM);
        for u in &self.norm_updates {
            let b = store.buffer_mut(u.buffer);
            for (r, &v) in b.mean.iter_mut().zip(&u.mean) {
                *r = (T::one() - m) * *r + m * v;
            }
            for (r, &v) in b.var.iter_mut().zip(&u.var) {
                *r = (T::one() - m) * *r + m * v;
            }
        }
    }

    fn dims(&self, v: Var) -> Result<[usize; 4]> {
        self.nodes[v.0].value.dims4()
    }

    /// Backpropagate from seed gradients and return leaf gradients.
    pub fn backward(&self, seeds: &[(Var, Tensor<T>)]) -> Result<Gradients<T>> {
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        for (v, g) in seeds {
            if g.shape() != self.nodes[v.0].value.shape() {
                return Err(Error::Shape(format!(
                    "seed gradient {:?} does not match value {:?}",
                    g.shape(),
                    self.nodes[v.0].value.shape()
                )));
            }
            accumulate(&mut grads[v.0], g.clone());
        }
        let mut leaves = HashMap::new();
        for i in (0..self.nodes.len()).rev() {
            let Some(gy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Input | Op::Param => {
                    leaves.insert(i, gy);
                }
                Op::Conv { x, w, b, geom } => {
                    let xv = &self.nodes[x.0].value;
                    let wv = &self.nodes[w.0].value;
                    let (dx, dw, db) =
                        kernels::conv2d_backward(geom, xv.data(), wv.data(), gy.data(), true, b.is_some());
                    accumulate(&mut grads[x.0], Tensor::from_vec(xv.shape(), dx)?);
                    accumulate(&mut grads[w.0], Tensor::from_vec(wv.shape(), dw)?);
                    if let (Some(b), Some(db)) = (b, db) {
                        accumulate(&mut grads[b.0], Tensor::from_vec(&[db.len()], db)?);
                    }
                }
                Op::Norm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                    batch_stats,
                } => {
                    let [n, c, h, w] = self.dims(*x)?;
                    let hw = h * w;
                    let g = self.nodes[gamma.0].value.data();
                    let dy = gy.data();
                    let mut dgamma = vec![T::zero(); c];
                    let mut dbeta = vec![T::zero(); c];
                    for ni in 0..n {
                        for ci in 0..c {
                            let r = (ni * c + ci) * hw..(ni * c + ci + 1) * hw;
                            for (&d, &xh) in dy[r.clone()].iter().zip(&xhat[r]) {
                                dgamma[ci] += d * xh;
                                dbeta[ci] += d;
                            }
                        }
                    }
                    let mut dx = vec![T::zero(); dy.len()];
                    let m = T::from_usize(n * hw).unwrap();
                    for ni in 0..n {
                        for ci in 0..c {
                            let r = (ni * c + ci) * hw..(ni * c + ci + 1) * hw;
                            let scale = g[ci] * inv_std[ci];
                            if *batch_stats {
                                let mean_dy = dbeta[ci] / m;
                                let mean_dyx = dgamma[ci] / m;
                                for ((o, &d), &xh) in dx[r.clone()].iter_mut().zip(&dy[r.clone()]).zip(&xhat[r]) {
                                    *o = scale * (d - mean_dy - xh * mean_dyx);
                                }
                            } else {
                                for (o, &d) in dx[r.clone()].iter_mut().zip(&dy[r]) {
                                    *o = scale * d;
                                }
                            }
                        }
                    }
                    accumulate(&mut grads[x.0], Tensor::from_vec(gy.shape(), dx)?);
                    accumulate(&mut grads[gamma.0], Tensor::from_vec(&[c], dgamma)?);
                    accumulate(&mut grads[beta.0], Tensor::from_vec(&[c], dbeta)?);
                }
                Op::Silu(x) => {
                    let xv = &self.nodes[x.0].value;
                    let d: Vec<T> = xv
                        .data()
                        .iter()
                        .zip(gy.data())
                        .map(|(&x, &g)| {
                            let s = kernels::sigmoid(x);
                            g * s * (T::one() + x * (T::one() - s))
                        })
                        .collect();
                    accumulate(&mut grads[x.0], Tensor::from_vec(xv.shape(), d)?);
                }
                Op::Sigmoid(x) => {
                    let y = &node.value;
                    let d: Vec<T> = y
                        .data()
                        .iter()
                        .zip(gy.data())
                        .map(|(&s, &g)| g * s * (T::one() - s))
                        .collect();
                    accumulate(&mut grads[x.0], Tensor::from_vec(y.shape(), d)?);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads[a.0], gy.clone());
                    accumulate(&mut grads[b.0], gy);
                }
                Op::MulGate { x, gate } => {
                    let xv = &self.nodes[x.0].value;
                    let gv = &self.nodes[gate.0].value;
                    let (dx, dg) = mul_gate_backward(xv, gv, &gy)?;
                    accumulate(&mut grads[x.0], dx);
                    accumulate(&mut grads[gate.0], dg);
                }
                Op::Concat(xs) => {
                    let [n, c, h, w] = gy.dims4()?;
                    let hw = h * w;
                    let mut off = 0;
                    for x in xs {
                        let [_, cx, _, _] = self.dims(*x)?;
                        let mut d = Vec::with_capacity(n * cx * hw);
                        for ni in 0..n {
                            d.extend_from_slice(&gy.data()[(ni * c + off) * hw..(ni * c + off + cx) * hw]);
                        }
                        accumulate(&mut grads[x.0], Tensor::from_vec(&[n, cx, h, w], d)?);
                        off += cx;
                    }
                }
                Op::Upsample { x, factor } => {
                    let [n, c, h, w] = self.dims(*x)?;
                    let f = *factor;
                    let mut d = vec![T::zero(); n * c * h * w];
                    let wo = w * f;
                    for p in 0..n * c {
                        let src = &gy.data()[p * h * f * wo..(p + 1) * h * f * wo];
                        for oy in 0..h * f {
                            for ox in 0..wo {
                                d[p * h * w + (oy / f) * w + ox / f] += src[oy * wo + ox];
                            }
                        }
                    }
                    accumulate(&mut grads[x.0], Tensor::from_vec(&[n, c, h, w], d)?);
                }
                Op::Gather { x, index } => {
                    let xv = &self.nodes[x.0].value;
                    let mut d = vec![T::zero(); xv.len()];
                    for (&i, &g) in index.iter().zip(gy.data()) {
                        d[i as usize] += g;
                    }
                    accumulate(&mut grads[x.0], Tensor::from_vec(xv.shape(), d)?);
                }
                Op::GlobalAvg(x) => {
                    let [n, c, h, w] = self.dims(*x)?;
                    let hw = h * w;
                    let inv = T::one() / T::from_usize(hw).unwrap();
                    let mut d = vec![T::zero(); n * c * hw];
                    for p in 0..n * c {
                        let g = gy.data()[p] * inv;
                        d[p * hw..(p + 1) * hw].fill(g);
                    }
                    accumulate(&mut grads[x.0], Tensor::from_vec(&[n, c, h, w], d)?);
                }
                Op::ChannelAvg(x) => {
                    let [n, c, h, w] = self.dims(*x)?;
                    let hw = h * w;
                    let inv = T::one() / T::from_usize(c).unwrap();
                    let mut d = vec![T::zero(); n * c * hw];
                    for ni in 0..n {
                        let g = &gy.data()[ni * hw..(ni + 1) * hw];
                        for ci in 0..c {
                            for (o, &gv) in d[(ni * c + ci) * hw..(ni * c + ci + 1) * hw].iter_mut().zip(g) {
                                *o = gv * inv;
                            }
                        }
                    }
                    accumulate(&mut grads[x.0], Tensor::from_vec(&[n, c, h, w], d)?);
                }
                Op::SpaceToDepth { x, r } => {
                    let [n, c, h, w] = self.dims(*x)?;
                    let d = kernels::depth_to_space(gy.data(), n, c, h / r, w / r, *r);
                    accumulate(&mut grads[x.0], Tensor::from_vec(&[n, c, h, w], d)?);
                }
                Op::DepthToSpace { x, r } => {
                    let [n, c, h, w] = self.dims(*x)?;
                    let d = kernels::space_to_depth(gy.data(), n, c / (r * r), h * r, w * r, *r);
                    accumulate(&mut grads[x.0], Tensor::from_vec(&[n, c, h, w], d)?);
                }
            }
        }
        let params = self.params.iter().map(|(id, v)| (*id, v.0)).collect();
        Ok(Gradients { leaves, params })
    }
}

fn accumulate<T: Float>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        Some(t) => t.add_assign(&g),
        None => *slot = Some(g),
    }
}

/// Broadcast strides of `gate` against `x` (both NCHW). A unit gate dim repeats.
fn gate_index(xd: [usize; 4], gd: [usize; 4]) -> Result<impl Fn(usize, usize, usize, usize) -> usize> {
    for i in 0..4 {
        if gd[i] != xd[i] && gd[i] != 1 {
            return Err(Error::Shape(format!("gate {:?} cannot broadcast to {:?}", gd, xd)));
        }
    }
    let keep = [gd[0] != 1, gd[1] != 1, gd[2] != 1, gd[3] != 1];
    Ok(move |n: usize, c: usize, y: usize, x: usize| {
        let n = if keep[0] { n } else { 0 };
        let c = if keep[1] { c } else { 0 };
        let y = if keep[2] { y } else { 0 };
        let x = if keep[3] { x } else { 0 };
        ((n * gd[1] + c) * gd[2] + y) * gd[3] + x
    })
}

fn mul_gate_forward<T: Float>(x: &Tensor<T>, g: &Tensor<T>) -> Result<Tensor<T>> {
    let xd = x.dims4()?;
    let gd = g.dims4()?;
    let idx = gate_index(xd, gd)?;
    let [n, c, h, w] = xd;
    let mut out = Vec::with_capacity(x.len());
    let xs = x.data();
    let gs = g.data();
    for ni in 0..n {
        for ci in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    out.push(xs[((ni * c + ci) * h + y) * w + xx] * gs[idx(ni, ci, y, xx)]);
                }
            }
        }
    }
    Tensor::from_vec(&xd, out)
}

fn mul_gate_backward<T: Float>(x: &Tensor<T>, g: &Tensor<T>, gy: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let xd = x.dims4()?;
    let gd = g.dims4()?;
    let idx = gate_index(xd, gd)?;
    let [n, c, h, w] = xd;
    let mut dx = vec![T::zero(); x.len()];
    let mut dg = vec![T::zero(); g.len()];
    let (xs, gs, dys) = (x.data(), g.data(), gy.data());
    for ni in 0..n {
        for ci in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    let i = ((ni * c + ci) * h + y) * w + xx;
                    let j = idx(ni, ci, y, xx);
                    dx[i] = dys[i] * gs[j];
                    dg[j] += dys[i] * xs[i];
                }
            }
        }
    }
    Ok((Tensor::from_vec(&xd, dx)?, Tensor::from_vec(&gd, dg)?))
}

impl<T: Float> Backend<T> for Graph<T> {
    type Var = Var;

    fn training(&self) -> bool {
        self.training
    }

    fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(v) = self.params.get(&id) {
            return *v;
        }
        let v = self.push(store.get(id).clone(), Op::Param);
        self.params.insert(id, v);
        v
    }

    fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes[v.0].value.shape().to_vec()
    }

    fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize, groups: usize) -> Result<Var> {
        let [n, cin, h, wd] = self.dims(x)?;
        let wshape = self.nodes[w.0].value.shape().to_vec();
        let [cout, cin_g, k, k2] = wshape[..] else {
            return Err(Error::Shape(format!("conv weight must be 4-d, got {:?}", wshape)));
        };
        if k != k2 || groups == 0 || cin % groups != 0 || cout % groups != 0 || cin_g * groups != cin {
            return Err(Error::Shape(format!(
                "conv weight {:?} incompatible with input channels {} and groups {}",
                wshape, cin, groups
            )));
        }
        if h + 2 * pad < k || wd + 2 * pad < k || stride == 0 {
            return Err(Error::Shape(format!("input {}x{} too small for kernel {}", h, wd, k)));
        }
        let geom = ConvGeom { n, cin, h, w: wd, cout, k, stride, pad, groups };
        let bias = b.map(|b| self.nodes[b.0].value.data());
        let out = kernels::conv2d_forward(&geom, self.nodes[x.0].value.data(), self.nodes[w.0].value.data(), bias);
        let (ho, wo) = geom.out_hw();
        let t = Tensor::from_vec(&[n, cout, ho, wo], out)?;
        Ok(self.push(t, Op::Conv { x, w, b, geom }))
    }

    fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, store: &ParamStore<T>, buffer: BufferId) -> Result<Var> {
        let [n, c, h, w] = self.dims(x)?;
        let hw = h * w;
        let eps = T::from_f64_lossy(BN_EPS);
        let xs = self.nodes[x.0].value.data();
        let (mean, inv_std) = if self.training {
            let (mean, var) = kernels::channel_stats(xs, n, c, hw);
            let m = n * hw;
            let unbiased: Vec<T> = if m > 1 {
                let f = T::from_usize(m).unwrap() / T::from_usize(m - 1).unwrap();
                var.iter().map(|&v| v * f).collect()
            } else {
                var.clone()
            };
            let inv: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
            self.norm_updates.push(NormUpdate {
                buffer,
                mean: mean.clone(),
                var: unbiased,
            });
            (mean, inv)
        } else {
            let b = store.buffer(buffer);
            if b.mean.len() != c {
                return Err(Error::Shape(format!("norm buffer has {} channels, input {}", b.mean.len(), c)));
            }
            (b.mean.clone(), b.var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect())
        };
        let g = self.nodes[gamma.0].value.data();
        let bt = self.nodes[beta.0].value.data();
        if g.len() != c || bt.len() != c {
            return Err(Error::Shape(format!("norm affine has {} channels, input {}", g.len(), c)));
        }
        let mut xhat = vec![T::zero(); xs.len()];
        let mut out = vec![T::zero(); xs.len()];
        for ni in 0..n {
            for ci in 0..c {
                let r = (ni * c + ci) * hw..(ni * c + ci + 1) * hw;
                for ((o, xh), &xv) in out[r.clone()].iter_mut().zip(&mut xhat[r.clone()]).zip(&xs[r]) {
                    *xh = (xv - mean[ci]) * inv_std[ci];
                    *o = *xh * g[ci] + bt[ci];
                }
            }
        }
        let t = Tensor::from_vec(&[n, c, h, w], out)?;
        let batch_stats = self.training;
        Ok(self.push(
            t,
            Op::Norm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
        ))
    }

    fn silu(&mut self, x: Var) -> Var {
        let t = self.nodes[x.0].value.map(|v| v * kernels::sigmoid(v));
        self.push(t, Op::Silu(x))
    }

    fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.nodes[x.0].value.map(kernels::sigmoid);
        self.push(t, Op::Sigmoid(x))
    }

    fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        if av.shape() != bv.shape() {
            return Err(Error::Shape(format!("add {:?} vs {:?}", av.shape(), bv.shape())));
        }
        let mut t = av.clone();
        t.add_assign(bv);
        Ok(self.push(t, Op::Add(a, b)))
    }

    fn mul_gate(&mut self, x: Var, gate: Var) -> Result<Var> {
        let t = mul_gate_forward(&self.nodes[x.0].value, &self.nodes[gate.0].value)?;
        Ok(self.push(t, Op::MulGate { x, gate }))
    }

    fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        let [n, _, h, w] = self.dims(xs[0])?;
        let mut total = 0;
        for x in xs {
            let [n2, c, h2, w2] = self.dims(*x)?;
            if (n2, h2, w2) != (n, h, w) {
                return Err(Error::Shape(format!(
                    "concat spatial mismatch: {:?} vs {:?}",
                    [n, h, w],
                    [n2, h2, w2]
                )));
            }
            total += c;
        }
        let hw = h * w;
        let mut out = Vec::with_capacity(n * total * hw);
        for ni in 0..n {
            for x in xs {
                let v = &self.nodes[x.0].value;
                let c = v.shape()[1];
                out.extend_from_slice(&v.data()[ni * c * hw..(ni + 1) * c * hw]);
            }
        }
        let t = Tensor::from_vec(&[n, total, h, w], out)?;
        Ok(self.push(t, Op::Concat(xs.to_vec())))
    }

    fn upsample_nearest(&mut self, x: Var, factor: usize) -> Var {
        let [n, c, h, w] = self.dims(x).expect("4-d input");
        let (ho, wo) = (h * factor, w * factor);
        let src = self.nodes[x.0].value.data();
        let mut out = Vec::with_capacity(n * c * ho * wo);
        for p in 0..n * c {
            let plane = &src[p * h * w..(p + 1) * h * w];
            for oy in 0..ho {
                let row = &plane[(oy / factor) * w..(oy / factor + 1) * w];
                for ox in 0..wo {
                    out.push(row[ox / factor]);
                }
            }
        }
        let t = Tensor::from_vec(&[n, c, ho, wo], out).expect("consistent shape");
        self.push(t, Op::Upsample { x, factor })
    }

    fn max_pool(&mut self, x: Var, kernel: usize) -> Var {
        let [n, c, h, w] = self.dims(x).expect("4-d input");
        let pad = kernel / 2;
        let src = self.nodes[x.0].value.data();
        let mut out = Vec::with_capacity(src.len());
        let mut index = Vec::with_capacity(src.len());
        for p in 0..n * c {
            let base = p * h * w;
            for y in 0..h {
                let y0 = y.saturating_sub(pad);
                let y1 = (y + pad + 1).min(h);
                for xx in 0..w {
                    let x0 = xx.saturating_sub(pad);
                    let x1 = (xx + pad + 1).min(w);
                    let mut best = base + y0 * w + x0;
                    for yy in y0..y1 {
                        for xi in x0..x1 {
                            let i = base + yy * w + xi;
                            if src[i] > src[best] {
                                best = i;
                            }
                        }
                    }
                    out.push(src[best]);
                    index.push(best as u32);
                }
            }
        }
        let t = Tensor::from_vec(&[n, c, h, w], out).expect("consistent shape");
        self.push(t, Op::Gather { x, index })
    }

    fn global_pool(&mut self, x: Var, kind: PoolKind) -> Var {
        let [n, c, h, w] = self.dims(x).expect("4-d input");
        let hw = h * w;
        let src = self.nodes[x.0].value.data();
        match kind {
            PoolKind::Avg => {
                let inv = T::one() / T::from_usize(hw).unwrap();
                let out: Vec<T> = (0..n * c)
                    .map(|p| src[p * hw..(p + 1) * hw].iter().copied().sum::<T>() * inv)
                    .collect();
                let t = Tensor::from_vec(&[n, c, 1, 1], out).expect("consistent shape");
                self.push(t, Op::GlobalAvg(x))
            }
            PoolKind::Max => {
                let mut out = Vec::with_capacity(n * c);
                let mut index = Vec::with_capacity(n * c);
                for p in 0..n * c {
                    let mut best = p * hw;
                    for i in p * hw..(p + 1) * hw {
                        if src[i] > src[best] {
                            best = i;
                        }
                    }
                    out.push(src[best]);
                    index.push(best as u32);
                }
                let t = Tensor::from_vec(&[n, c, 1, 1], out).expect("consistent shape");
                self.push(t, Op::Gather { x, index })
            }
        }
    }

    fn channel_pool(&mut self, x: Var, kind: PoolKind) -> Var {
        let [n, c, h, w] = self.dims(x).expect("4-d input");
        let hw = h * w;
        let src = self.nodes[x.0].value.data();
        match kind {
            PoolKind::Avg => {
                let inv = T::one() / T::from_usize(c).unwrap();
                let mut out = vec![T::zero(); n * hw];
                for ni in 0..n {
                    for ci in 0..c {
                        for (o, &v) in out[ni * hw..(ni + 1) * hw]
                            .iter_mut()
                            .zip(&src[(ni * c + ci) * hw..(ni * c + ci + 1) * hw])
                        {
                            *o += v;
                        }
                    }
                }
                for o in &mut out {
                    *o *= inv;
                }
                let t = Tensor::from_vec(&[n, 1, h, w], out).expect("consistent shape");
                self.push(t, Op::ChannelAvg(x))
            }
            PoolKind::Max => {
                let mut out = Vec::with_capacity(n * hw);
                let mut index = Vec::with_capacity(n * hw);
                for ni in 0..n {
                    for p in 0..hw {
                        let mut best = ni * c * hw + p;
                        for ci in 1..c {
                            let i = (ni * c + ci) * hw + p;
                            if src[i] > src[best] {
                                best = i;
                            }
                        }
                        out.push(src[best]);
                        index.push(best as u32);
                    }
                }
                let t = Tensor::from_vec(&[n, 1, h, w], out).expect("consistent shape");
                self.push(t, Op::Gather { x, index })
            }
        }
    }

    fn space_to_depth(&mut self, x: Var, r: usize) -> Result<Var> {
        let [n, c, h, w] = self.dims(x)?;
        if r == 0 || h % r != 0 || w % r != 0 {
            return Err(Error::Shape(format!("spatial size {}x{} not divisible by {}", h, w, r)));
        }
        let out = kernels::space_to_depth(self.nodes[x.0].value.data(), n, c, h, w, r);
        let t = Tensor::from_vec(&[n, c * r * r, h / r, w / r], out)?;
        Ok(self.push(t, Op::SpaceToDepth { x, r }))
    }

    fn depth_to_space(&mut self, x: Var, r: usize) -> Result<Var> {
        let [n, c, h, w] = self.dims(x)?;
        if r == 0 || c % (r * r) != 0 {
            return Err(Error::Shape(format!("channel count {} not divisible by {}", c, r * r)));
        }
        let out = kernels::depth_to_space(self.nodes[x.0].value.data(), n, c / (r * r), h, w, r);
        let t = Tensor::from_vec(&[n, c / (r * r), h * r, w * r], out)?;
        Ok(self.push(t, Op::DepthToSpace { x, r }))
    }
}

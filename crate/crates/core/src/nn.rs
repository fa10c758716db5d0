//! Differentiable building blocks: convolutions, the Ghost module, CBAM,
//! CSP stages and the Focus / PixelShuffle rearrangements.
//!
//! Blocks hold only [`ParamId`]s; the scalar type enters at `forward`.

use crate::backend::{Backend, BufferId, Builder, ParamId, ParamStore, PoolKind};
use crate::error::{Error, Result};
use crate::kernels;
use crate::tensor::{Float, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Silu,
}

/// Declarative description of a single convolution layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
    pub bias: bool,
    pub norm: bool,
    pub activation: Activation,
}

impl ConvSpec {
    /// Conv → BN → SiLU with "same" padding, the detector's default layer.
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize, stride: usize) -> Self {
        ConvSpec {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding: (kernel - 1) / 2,
            groups: 1,
            bias: false,
            norm: true,
            activation: Activation::Silu,
        }
    }

    pub fn plain(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        ConvSpec {
            bias: true,
            norm: false,
            activation: Activation::Identity,
            ..Self::new(in_channels, out_channels, kernel, 1)
        }
    }

    pub fn groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn bias(mut self, bias: bool) -> Self {
        self.bias = bias;
        self
    }

    pub fn norm(mut self, norm: bool) -> Self {
        self.norm = norm;
        self
    }

    pub fn activation(mut self, activation: Activation) -> Self {
        self.activation = activation;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 || self.kernel == 0 || self.stride == 0 || self.groups == 0 {
            return Err(Error::InvalidArgument(format!("degenerate conv spec {:?}", self)));
        }
        if !self.in_channels.is_multiple_of(self.groups) || !self.out_channels.is_multiple_of(self.groups) {
            return Err(Error::InvalidArgument(format!(
                "channels {}→{} not divisible by groups {}",
                self.in_channels, self.out_channels, self.groups
            )));
        }
        Ok(())
    }

    /// Closed-form trainable scalar count.
    pub fn param_count(&self) -> usize {
        let w = self.kernel * self.kernel * self.in_channels / self.groups * self.out_channels;
        w + if self.bias { self.out_channels } else { 0 } + if self.norm { 2 * self.out_channels } else { 0 }
    }
}

#[derive(Debug, Clone)]
struct Norm {
    gamma: ParamId,
    beta: ParamId,
    buffer: BufferId,
}

/// Convolution, optional batch norm, activation.
#[derive(Debug, Clone)]
pub struct ConvBlock {
    spec: ConvSpec,
    weight: ParamId,
    bias: Option<ParamId>,
    norm: Option<Norm>,
}

impl ConvBlock {
    pub fn new<T: Float>(b: &mut Builder<'_, T>, spec: ConvSpec) -> Result<Self> {
        spec.validate()?;
        let cin_g = spec.in_channels / spec.groups;
        let fan_in = cin_g * spec.kernel * spec.kernel;
        let weight = b.kaiming_uniform(
            "weight",
            &[spec.out_channels, cin_g, spec.kernel, spec.kernel],
            fan_in,
        );
        let bias = spec
            .bias
            .then(|| b.kaiming_uniform("bias", &[spec.out_channels], fan_in));
        let norm = spec.norm.then(|| Norm {
            gamma: b.constant("bn.weight", &[spec.out_channels], 1.0),
            beta: b.constant("bn.bias", &[spec.out_channels], 0.0),
            buffer: b.norm_buffer("bn.running", spec.out_channels),
        });
        Ok(ConvBlock { spec, weight, bias, norm })
    }

    pub fn spec(&self) -> &ConvSpec {
        &self.spec
    }

    pub fn weight(&self) -> ParamId {
        self.weight
    }

    pub fn bias_id(&self) -> Option<ParamId> {
        self.bias
    }

    pub fn forward<T: Float, B: Backend<T>>(&self, b: &mut B, store: &ParamStore<T>, x: B::Var) -> Result<B::Var> {
        let c = b.shape(x);
        if c.len() != 4 || c[1] != self.spec.in_channels {
            return Err(Error::Shape(format!(
                "conv expects {} input channels, got shape {:?}",
                self.spec.in_channels, c
            )));
        }
        let w = b.param(store, self.weight);
        let bias = self.bias.map(|id| b.param(store, id));
        let mut y = b.conv2d(x, w, bias, self.spec.stride, self.spec.padding, self.spec.groups)?;
        if let Some(n) = &self.norm {
            let g = b.param(store, n.gamma);
            let bt = b.param(store, n.beta);
            y = b.batch_norm(y, g, bt, store, n.buffer)?;
        }
        Ok(match self.spec.activation {
            Activation::Identity => y,
            Activation::Silu => b.silu(y),
        })
    }
}

/// Depthwise k×k (groups = Cin) followed by pointwise 1×1.
#[derive(Debug, Clone)]
pub struct DsConv {
    depthwise: ConvBlock,
    pointwise: ConvBlock,
}

impl DsConv {
    /// Norm, bias and activation settings of `spec` apply to both halves.
    pub fn new<T: Float>(b: &mut Builder<'_, T>, spec: ConvSpec) -> Result<Self> {
        spec.validate()?;
        let dw = ConvSpec {
            out_channels: spec.in_channels,
            groups: spec.in_channels,
            ..spec
        };
        let pw = ConvSpec {
            kernel: 1,
            stride: 1,
            padding: 0,
            groups: 1,
            ..spec
        };
        Ok(DsConv {
            depthwise: ConvBlock::new(&mut b.sub("dconv"), dw)?,
            pointwise: ConvBlock::new(&mut b.sub("pconv"), pw)?,
        })
    }

    pub fn param_count(spec: &ConvSpec) -> usize {
        let dw = ConvSpec {
            out_channels: spec.in_channels,
            groups: spec.in_channels,
            ..*spec
        };
        let pw = ConvSpec {
            kernel: 1,
            groups: 1,
            ..*spec
        };
        dw.param_count() + pw.param_count()
    }

    pub fn forward<T: Float, B: Backend<T>>(&self, b: &mut B, store: &ParamStore<T>, x: B::Var) -> Result<B::Var> {
        let y = self.depthwise.forward(b, store, x)?;
        self.pointwise.forward(b, store, y)
    }
}

/// Either a dense convolution or its depthwise-separable replacement.
#[derive(Debug, Clone)]
pub enum Conv {
    Dense(ConvBlock),
    Separable(DsConv),
}

impl Conv {
    pub fn new<T: Float>(b: &mut Builder<'_, T>, spec: ConvSpec, separable: bool) -> Result<Self> {
        Ok(if separable {
            Conv::Separable(DsConv::new(b, spec)?)
        } else {
            Conv::Dense(ConvBlock::new(b, spec)?)
        })
    }

    pub fn forward<T: Float, B: Backend<T>>(&self, b: &mut B, store: &ParamStore<T>, x: B::Var) -> Result<B::Var> {
        match self {
            Conv::Dense(c) => c.forward(b, store, x),
            Conv::Separable(c) => c.forward(b, store, x),
        }
    }
}

pub const GHOST_RATIO: usize = 2;

/// Ghost module: a 1×1 conv produces `out/ratio` intrinsic maps, a cheap
/// depthwise 3×3 derives the remaining ghost maps from them.
#[derive(Debug, Clone)]
pub struct GhostModule {
    primary: ConvBlock,
    cheap: ConvBlock,
    out_channels: usize,
}

impl GhostModule {
    pub fn new<T: Float>(b: &mut Builder<'_, T>, in_channels: usize, out_channels: usize, ratio: usize) -> Result<Self> {
        if ratio < 2 || !out_channels.is_multiple_of(ratio) {
            return Err(Error::InvalidArgument(format!(
                "ghost output {} not divisible by ratio {}",
                out_channels, ratio
            )));
        }
        let intrinsic = out_channels / ratio;
        let primary = ConvBlock::new(&mut b.sub("primary"), ConvSpec::new(in_channels, intrinsic, 1, 1))?;
        let cheap = ConvBlock::new(
            &mut b.sub("cheap"),
            ConvSpec::new(intrinsic, intrinsic * (ratio - 1), 3, 1).groups(intrinsic),
        )?;
        Ok(GhostModule {
            primary,
            cheap,
            out_channels,
        })
    }

    pub fn intrinsic_channels(&self) -> usize {
        self.primary.spec().out_channels
    }

    pub fn ghost_channels(&self) -> usize {
        self.cheap.spec().out_channels
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn forward<T: Float, B: Backend<T>>(&self, b: &mut B, store: &ParamStore<T>, x: B::Var) -> Result<B::Var> {
        let p = self.primary.forward(b, store, x)?;
        let g = self.cheap.forward(b, store, p)?;
        b.concat(&[p, g])
    }
}

pub const CBAM_REDUCTION: usize = 16;
pub const CBAM_SPATIAL_KERNEL: usize = 7;

/// Channel attention then spatial attention, each a sigmoid gate.
#[derive(Debug, Clone)]
pub struct Cbam {
    fc1: ConvBlock,
    fc2: ConvBlock,
    spatial: ConvBlock,
    channels: usize,
}

/// Gate tensors exposed for inspection.
pub struct CbamGates<V> {
    pub output: V,
    pub channel_gate: V,
    pub spatial_gate: V,
}

impl Cbam {
    pub fn new<T: Float>(b: &mut Builder<'_, T>, channels: usize, reduction: usize) -> Result<Self> {
        if reduction == 0 || channels < reduction {
            return Err(Error::InvalidArgument(format!(
                "CBAM needs at least {} channels, got {}",
                reduction, channels
            )));
        }
        let hidden = channels / reduction;
        let mlp = |cin, cout| ConvSpec::new(cin, cout, 1, 1).norm(false);
        Ok(Cbam {
            fc1: ConvBlock::new(&mut b.sub("fc1"), mlp(channels, hidden))?,
            fc2: ConvBlock::new(&mut b.sub("fc2"), mlp(hidden, channels).activation(Activation::Identity))?,
            spatial: ConvBlock::new(
                &mut b.sub("spatial"),
                ConvSpec::new(2, 1, CBAM_SPATIAL_KERNEL, 1).activation(Activation::Identity),
            )?,
            channels,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn forward<T: Float, B: Backend<T>>(&self, b: &mut B, store: &ParamStore<T>, x: B::Var) -> Result<B::Var> {
        Ok(self.forward_gates(b, store, x)?.output)
    }

    pub fn forward_gates<T: Float, B: Backend<T>>(
        &self,
        b: &mut B,
        store: &ParamStore<T>,
        x: B::Var,
    ) -> Result<CbamGates<B::Var>> {
        let avg = b.global_pool(x, PoolKind::Avg);
        let max = b.global_pool(x, PoolKind::Max);
        let a = self.fc1.forward(b, store, avg)?;
        let a = self.fc2.forward(b, store, a)?;
        let m = self.fc1.forward(b, store, max)?;
        let m = self.fc2.forward(b, store, m)?;
        let logits = b.add(a, m)?;
        let channel_gate = b.sigmoid(logits);
        let x1 = b.mul_gate(x, channel_gate)?;
        let s_avg = b.channel_pool(x1, PoolKind::Avg);
        let s_max = b.channel_pool(x1, PoolKind::Max);
        let s = b.concat(&[s_avg, s_max])?;
        let s = self.spatial.forward(b, store, s)?;
        let spatial_gate = b.sigmoid(s);
        let output = b.mul_gate(x1, spatial_gate)?;
        Ok(CbamGates {
            output,
            channel_gate,
            spatial_gate,
        })
    }
}

/// Residual 1×1 → 3×3 bottleneck.
#[derive(Debug, Clone)]
pub struct Bottleneck {
    conv1: ConvBlock,
    conv2: Conv,
    shortcut: bool,
}

impl Bottleneck {
    pub fn new<T: Float>(
        b: &mut Builder<'_, T>,
        cin: usize,
        cout: usize,
        shortcut: bool,
        separable: bool,
    ) -> Result<Self> {
        Ok(Bottleneck {
            conv1: ConvBlock::new(&mut b.sub("conv1"), ConvSpec::new(cin, cout, 1, 1))?,
            conv2: Conv::new(&mut b.sub("conv2"), ConvSpec::new(cout, cout, 3, 1), separable)?,
            shortcut: shortcut && cin == cout,
        })
    }

    pub fn forward<T: Float, B: Backend<T>>(&self, b: &mut B, store: &ParamStore<T>, x: B::Var) -> Result<B::Var> {
        let y = self.conv1.forward(b, store, x)?;
        let y = self.conv2.forward(b, store, y)?;
        if self.shortcut {
            b.add(y, x)
        } else {
            Ok(y)
        }
    }
}

/// Cross-stage-partial block: two 1×1 branches, one through `n`
/// bottlenecks, concatenated and fused by a 1×1.
#[derive(Debug, Clone)]
pub struct CspLayer {
    conv1: Pointwise,
    conv2: Pointwise,
    conv3: Pointwise,
    blocks: Vec<Bottleneck>,
}

/// A 1×1 projection, either a plain conv block or a Ghost module.
#[derive(Debug, Clone)]
enum Pointwise {
    Conv(ConvBlock),
    Ghost(GhostModule),
}

impl Pointwise {
    fn new<T: Float>(b: &mut Builder<'_, T>, cin: usize, cout: usize, ghost: bool) -> Result<Self> {
        Ok(if ghost {
            Pointwise::Ghost(GhostModule::new(b, cin, cout, GHOST_RATIO)?)
        } else {
            Pointwise::Conv(ConvBlock::new(b, ConvSpec::new(cin, cout, 1, 1))?)
        })
    }

    fn forward<T: Float, B: Backend<T>>(&self, b: &mut B, store: &ParamStore<T>, x: B::Var) -> Result<B::Var> {
        match self {
            Pointwise::Conv(c) => c.forward(b, store, x),
            Pointwise::Ghost(g) => g.forward(b, store, x),
        }
    }
}

impl CspLayer {
    pub fn new<T: Float>(
        b: &mut Builder<'_, T>,
        cin: usize,
        cout: usize,
        depth: usize,
        shortcut: bool,
        separable: bool,
    ) -> Result<Self> {
        Self::build(b, cin, cout, depth, shortcut, separable, false)
    }

    /// Variant whose three 1×1 projections are Ghost modules.
    pub fn ghost<T: Float>(
        b: &mut Builder<'_, T>,
        cin: usize,
        cout: usize,
        depth: usize,
        shortcut: bool,
        separable: bool,
    ) -> Result<Self> {
        Self::build(b, cin, cout, depth, shortcut, separable, true)
    }

    fn build<T: Float>(
        b: &mut Builder<'_, T>,
        cin: usize,
        cout: usize,
        depth: usize,
        shortcut: bool,
        separable: bool,
        ghost: bool,
    ) -> Result<Self> {
        let hidden = cout / 2;
        let conv1 = Pointwise::new(&mut b.sub("conv1"), cin, hidden, ghost)?;
        let conv2 = Pointwise::new(&mut b.sub("conv2"), cin, hidden, ghost)?;
        let conv3 = Pointwise::new(&mut b.sub("conv3"), 2 * hidden, cout, ghost)?;
        let blocks = (0..depth)
            .map(|i| Bottleneck::new(&mut b.sub(&format!("m{}", i)), hidden, hidden, shortcut, separable))
            .collect::<Result<_>>()?;
        Ok(CspLayer {
            conv1,
            conv2,
            conv3,
            blocks,
        })
    }

    pub fn forward<T: Float, B: Backend<T>>(&self, b: &mut B, store: &ParamStore<T>, x: B::Var) -> Result<B::Var> {
        let mut y1 = self.conv1.forward(b, store, x)?;
        let y2 = self.conv2.forward(b, store, x)?;
        for m in &self.blocks {
            y1 = m.forward(b, store, y1)?;
        }
        let y = b.concat(&[y1, y2])?;
        self.conv3.forward(b, store, y)
    }
}

/// Spatial pyramid pooling with max-pool kernels 5, 9, 13.
#[derive(Debug, Clone)]
pub struct Spp {
    conv1: ConvBlock,
    conv2: ConvBlock,
}

pub const SPP_KERNELS: [usize; 3] = [5, 9, 13];

impl Spp {
    pub fn new<T: Float>(b: &mut Builder<'_, T>, cin: usize, cout: usize) -> Result<Self> {
        let hidden = cin / 2;
        Ok(Spp {
            conv1: ConvBlock::new(&mut b.sub("conv1"), ConvSpec::new(cin, hidden, 1, 1))?,
            conv2: ConvBlock::new(
                &mut b.sub("conv2"),
                ConvSpec::new(hidden * (SPP_KERNELS.len() + 1), cout, 1, 1),
            )?,
        })
    }

    pub fn forward<T: Float, B: Backend<T>>(&self, b: &mut B, store: &ParamStore<T>, x: B::Var) -> Result<B::Var> {
        let y = self.conv1.forward(b, store, x)?;
        let mut parts = vec![y];
        for k in SPP_KERNELS {
            parts.push(b.max_pool(y, k));
        }
        let y = b.concat(&parts)?;
        self.conv2.forward(b, store, y)
    }
}

fn as_nchw<T: Float>(x: &Tensor<T>) -> Result<(bool, [usize; 4])> {
    match x.shape() {
        &[c, h, w] => Ok((true, [1, c, h, w])),
        &[n, c, h, w] => Ok((false, [n, c, h, w])),
        s => Err(Error::Shape(format!("expected [C,H,W] or [N,C,H,W], got {:?}", s))),
    }
}

/// Space-to-depth: `out[c·r² + i·r + j, h, w] = x[c, h·r + i, w·r + j]`.
/// Accepts `[C,H,W]` or `[N,C,H,W]`.
pub fn focus<T: Float>(x: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let (three, [n, c, h, w]) = as_nchw(x)?;
    if r == 0 || h % r != 0 || w % r != 0 {
        return Err(Error::Shape(format!("H={} and W={} must be divisible by r={}", h, w, r)));
    }
    let data = kernels::space_to_depth(x.data(), n, c, h, w, r);
    let shape = [n, c * r * r, h / r, w / r];
    Tensor::from_vec(if three { &shape[1..] } else { &shape[..] }, data)
}

/// Depth-to-space, the exact inverse of [`focus`].
pub fn pixel_shuffle<T: Float>(x: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let (three, [n, c, h, w]) = as_nchw(x)?;
    if r == 0 || c % (r * r) != 0 {
        return Err(Error::Shape(format!("channel count {} not divisible by r²={}", c, r * r)));
    }
    let data = kernels::depth_to_space(x.data(), n, c / (r * r), h, w, r);
    let shape = [n, c / (r * r), h * r, w * r];
    Tensor::from_vec(if three { &shape[1..] } else { &shape[..] }, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Graph;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn builder_parts() -> (ParamStore<f64>, ChaCha8Rng) {
        (ParamStore::new(), ChaCha8Rng::seed_from_u64(7))
    }

    #[test]
    fn focus_small_example() {
        let x = Tensor::from_vec(&[1, 2, 2], vec![1.0f64, 2.0, 3.0, 4.0]).unwrap();
        let f = focus(&x, 2).unwrap();
        assert_eq!(f.shape(), &[4, 1, 1]);
        assert_eq!(f.data(), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(pixel_shuffle(&f, 2).unwrap(), x);
        assert_eq!(focus(&Tensor::<f32>::zeros(&[3, 8, 8]), 2).unwrap().shape(), &[12, 4, 4]);
    }

    #[test]
    fn focus_rejects_indivisible() {
        assert!(focus(&Tensor::<f32>::zeros(&[1, 3, 4]), 2).is_err());
        assert!(pixel_shuffle(&Tensor::<f32>::zeros(&[3, 2, 2]), 2).is_err());
    }

    #[test]
    fn pixel_shuffle_constant_preserved() {
        let x = Tensor::full(&[8, 3, 3], 2.5f32);
        let y = pixel_shuffle(&x, 2).unwrap();
        assert_eq!(y.shape(), &[2, 6, 6]);
        assert!(y.data().iter().all(|&v| v == 2.5));
    }

    #[test]
    fn conv_param_counts() {
        let spec = ConvSpec::new(16, 32, 3, 1).norm(false);
        assert_eq!(spec.param_count(), 4608);
        assert_eq!(ConvSpec::new(16, 32, 3, 1).param_count(), 4608 + 64);
        assert_eq!(DsConv::param_count(&spec), 656);

        let (mut store, mut rng) = builder_parts();
        let mut b = Builder::new(&mut store, &mut rng);
        DsConv::new(&mut b.sub("ds"), spec).unwrap();
        assert_eq!(store.num_scalars(), 656);
    }

    #[test]
    fn ghost_split_and_count() {
        let (mut store, mut rng) = builder_parts();
        let mut b = Builder::new(&mut store, &mut rng);
        let g = GhostModule::new(&mut b.sub("g"), 64, 32, 2).unwrap();
        assert_eq!((g.intrinsic_channels(), g.ghost_channels()), (16, 16));
        assert!(GhostModule::new(&mut b.sub("bad"), 64, 33, 2).is_err());

        let (mut s2, mut r2) = builder_parts();
        let mut b2 = Builder::new(&mut s2, &mut r2);
        GhostModule::new(&mut b2.sub("g"), 64, 64, 2).unwrap();
        // primary 64·32 + 2·32 norm, cheap 9·32 + 2·32 norm
        assert_eq!(s2.num_scalars(), 64 * 32 + 64 + 9 * 32 + 64);
        assert!(s2.num_scalars() < ConvSpec::new(64, 64, 1, 1).param_count());
    }

    #[test]
    fn cbam_requires_enough_channels() {
        let (mut store, mut rng) = builder_parts();
        let mut b = Builder::new(&mut store, &mut rng);
        assert!(Cbam::new(&mut b, 8, CBAM_REDUCTION).is_err());
        assert!(Cbam::new(&mut b, 16, CBAM_REDUCTION).is_ok());
    }

    #[test]
    fn dirac_conv_is_identity() {
        let (mut store, mut rng) = builder_parts();
        let mut b = Builder::new(&mut store, &mut rng);
        let spec = ConvSpec::new(3, 3, 3, 1).norm(false).activation(Activation::Identity);
        let conv = ConvBlock::new(&mut b, spec).unwrap();
        let w = store.get_mut(conv.weight());
        w.data_mut().fill(0.0);
        for c in 0..3 {
            w.data_mut()[((c * 3 + c) * 3 + 1) * 3 + 1] = 1.0;
        }
        let x = Tensor::from_fn(&[1, 3, 5, 5], |i| (i as f64 * 0.37).sin());
        let mut g = Graph::new(false);
        let xv = g.input(x.clone());
        let y = conv.forward(&mut g, &store, xv).unwrap();
        assert_eq!(g.value(y), &x);
    }

    #[test]
    fn conv_block_rejects_channel_mismatch() {
        let (mut store, mut rng) = builder_parts();
        let mut b = Builder::new(&mut store, &mut rng);
        let conv = ConvBlock::new(&mut b, ConvSpec::new(4, 8, 1, 1)).unwrap();
        let mut g = Graph::new(false);
        let x = g.input(Tensor::zeros(&[1, 3, 4, 4]));
        assert!(conv.forward(&mut g, &store, x).is_err());
    }

    #[test]
    fn conv_shape_arithmetic() {
        let (mut store, mut rng) = builder_parts();
        let mut b = Builder::new(&mut store, &mut rng);
        let pw = ConvBlock::new(&mut b.sub("a"), ConvSpec::new(4, 6, 1, 1)).unwrap();
        let ds = DsConv::new(&mut b.sub("b"), ConvSpec::new(4, 6, 3, 2)).unwrap();
        let dense = ConvBlock::new(&mut b.sub("c"), ConvSpec::new(4, 6, 3, 2)).unwrap();
        let mut g = Graph::new(true);
        let x = g.input(Tensor::full(&[2, 4, 9, 9], 0.5));
        let y = pw.forward(&mut g, &store, x).unwrap();
        assert_eq!(g.shape(y), vec![2, 6, 9, 9]);
        let y1 = ds.forward(&mut g, &store, x).unwrap();
        let y2 = dense.forward(&mut g, &store, x).unwrap();
        assert_eq!(g.shape(y1), g.shape(y2));
        assert_eq!(g.shape(y1), vec![2, 6, 5, 5]);
    }
}

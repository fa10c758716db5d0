//! CSP-Darknet backbone emitting four pyramid levels at strides 32/16/8/4.

use crate::backend::{Backend, Builder, ParamStore};
use crate::error::Result;
use crate::nn::{Conv, ConvBlock, ConvSpec, CspLayer, Spp};
use crate::tensor::Float;

/// Output channels of the four levels, coarse to fine (strides 32, 16, 8, 4).
pub fn level_channels(base: usize) -> [usize; 4] {
    [16 * base, 8 * base, 4 * base, 2 * base]
}

#[derive(Debug, Clone)]
struct Stage {
    down: Conv,
    spp: Option<Spp>,
    csp: CspLayer,
}

#[derive(Debug, Clone)]
pub struct Backbone {
    stem: ConvBlock,
    stages: Vec<Stage>,
    base: usize,
}

impl Backbone {
    /// `base` is the stem width (64 × width multiplier); `depth` the
    /// bottleneck count of the shallowest stage.
    pub fn new<T: Float>(b: &mut Builder<'_, T>, base: usize, depth: usize, separable: bool) -> Result<Self> {
        let stem = ConvBlock::new(&mut b.sub("stem"), ConvSpec::new(12, base, 3, 1))?;
        let mut stages = Vec::new();
        let plan = [
            (base, 2 * base, depth, false),
            (2 * base, 4 * base, 3 * depth, false),
            (4 * base, 8 * base, 3 * depth, false),
            (8 * base, 16 * base, depth, true),
        ];
        for (i, (cin, cout, n, last)) in plan.into_iter().enumerate() {
            let mut s = b.sub(&format!("dark{}", i + 2));
            let down = Conv::new(&mut s.sub("down"), ConvSpec::new(cin, cout, 3, 2), separable)?;
            let spp = if last {
                Some(Spp::new(&mut s.sub("spp"), cout, cout)?)
            } else {
                None
            };
            let csp = CspLayer::new(&mut s.sub("csp"), cout, cout, n, !last, separable)?;
            stages.push(Stage { down, spp, csp });
        }
        Ok(Backbone { stem, stages, base })
    }

    pub fn out_channels(&self) -> [usize; 4] {
        level_channels(self.base)
    }

    /// Returns features coarse to fine: strides 32, 16, 8, 4.
    pub fn forward<T: Float, B: Backend<T>>(&self, b: &mut B, store: &ParamStore<T>, x: B::Var) -> Result<[B::Var; 4]> {
        b.enter("backbone");
        b.enter("stem");
        let x = b.space_to_depth(x, 2)?;
        let mut x = self.stem.forward(b, store, x)?;
        b.exit();
        let mut outs = Vec::with_capacity(4);
        for (i, s) in self.stages.iter().enumerate() {
            b.enter(&format!("dark{}", i + 2));
            x = s.down.forward(b, store, x)?;
            if let Some(spp) = &s.spp {
                x = spp.forward(b, store, x)?;
            }
            x = s.csp.forward(b, store, x)?;
            outs.push(x);
            b.exit();
        }
        b.exit();
        Ok([outs[3], outs[2], outs[1], outs[0]])
    }
}

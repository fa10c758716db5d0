//! Feature necks: the channel-unified top-down SlimFPN and the PAFPN
//! baseline. Levels are ordered coarse to fine (strides 32, 16, 8, 4).

use crate::backend::{Backend, Builder, ParamStore};
use crate::error::{Error, Result};
use crate::nn::{Conv, ConvBlock, ConvSpec, CspLayer, GhostModule, GHOST_RATIO};
use crate::tensor::Float;

fn check_levels<T: Float, B: Backend<T>>(b: &B, xs: &[B::Var], channels: &[usize]) -> Result<()> {
    if xs.len() != channels.len() {
        return Err(Error::Shape(format!(
            "neck built for {} levels, got {}",
            channels.len(),
            xs.len()
        )));
    }
    for (l, (&x, &c)) in xs.iter().zip(channels).enumerate() {
        let s = b.shape(x);
        if s.len() != 4 || s[1] != c {
            return Err(Error::Shape(format!("level {} expects {} channels, got {:?}", l, c, s)));
        }
        if l > 0 {
            let prev = b.shape(xs[l - 1]);
            if s[2] != 2 * prev[2] || s[3] != 2 * prev[3] {
                return Err(Error::Shape(format!(
                    "level {} spatial size {:?} is not twice level {} ({:?})",
                    l,
                    &s[2..],
                    l - 1,
                    &prev[2..]
                )));
            }
        }
    }
    Ok(())
}

/// Ghost-unified lateral maps followed by a top-down FPN pass.
#[derive(Debug, Clone)]
pub struct SlimFpn {
    in_channels: Vec<usize>,
    unified: usize,
    lateral: Vec<GhostModule>,
    fuse: Vec<CspLayer>,
}

impl SlimFpn {
    pub fn new<T: Float>(
        b: &mut Builder<'_, T>,
        in_channels: &[usize],
        unified: usize,
        depth: usize,
        separable: bool,
    ) -> Result<Self> {
        let lateral = in_channels
            .iter()
            .enumerate()
            .map(|(l, &c)| GhostModule::new(&mut b.sub(&format!("lateral{}", l)), c, unified, GHOST_RATIO))
            .collect::<Result<_>>()?;
        let fuse = (1..in_channels.len())
            .map(|l| CspLayer::ghost(&mut b.sub(&format!("fuse{}", l)), 2 * unified, unified, depth, false, separable))
            .collect::<Result<_>>()?;
        Ok(SlimFpn {
            in_channels: in_channels.to_vec(),
            unified,
            lateral,
            fuse,
        })
    }

    pub fn out_channels(&self) -> Vec<usize> {
        vec![self.unified; self.in_channels.len()]
    }

    pub fn forward<T: Float, B: Backend<T>>(
        &self,
        b: &mut B,
        store: &ParamStore<T>,
        xs: &[B::Var],
    ) -> Result<Vec<B::Var>> {
        check_levels(b, xs, &self.in_channels)?;
        b.enter("neck");
        let mut outs = Vec::with_capacity(xs.len());
        for (l, (&x, g)) in xs.iter().zip(&self.lateral).enumerate() {
            b.enter(&format!("lateral{}", l));
            let y = g.forward(b, store, x)?;
            b.exit();
            let y = if l == 0 {
                y
            } else {
                b.enter(&format!("fuse{}", l));
                let up = b.upsample_nearest(outs[l - 1], 2);
                let cat = b.concat(&[up, y])?;
                let f = self.fuse[l - 1].forward(b, store, cat)?;
                b.exit();
                f
            };
            outs.push(y);
        }
        b.exit();
        Ok(outs)
    }
}

/// Top-down FPN then a PANet bottom-up path. Output channels equal input
/// channels level by level.
#[derive(Debug, Clone)]
pub struct PaFpn {
    in_channels: Vec<usize>,
    reduce: Vec<ConvBlock>,
    td: Vec<CspLayer>,
    down: Vec<Conv>,
    bu: Vec<CspLayer>,
}

impl PaFpn {
    pub fn new<T: Float>(
        b: &mut Builder<'_, T>,
        in_channels: &[usize],
        depth: usize,
        separable: bool,
    ) -> Result<Self> {
        let n = in_channels.len();
        if n < 2 {
            return Err(Error::Config("PAFPN needs at least two levels".into()));
        }
        let ch = in_channels;
        let mut reduce = Vec::new();
        let mut td = Vec::new();
        let mut down = Vec::new();
        let mut bu = Vec::new();
        for l in 0..n - 1 {
            reduce.push(ConvBlock::new(
                &mut b.sub(&format!("reduce{}", l)),
                ConvSpec::new(ch[l], ch[l + 1], 1, 1),
            )?);
            td.push(CspLayer::new(
                &mut b.sub(&format!("td{}", l + 1)),
                2 * ch[l + 1],
                ch[l + 1],
                depth,
                false,
                separable,
            )?);
        }
        for l in 0..n - 1 {
            down.push(Conv::new(
                &mut b.sub(&format!("down{}", l)),
                ConvSpec::new(ch[l + 1], ch[l + 1], 3, 2),
                separable,
            )?);
            bu.push(CspLayer::new(
                &mut b.sub(&format!("bu{}", l)),
                2 * ch[l + 1],
                ch[l],
                depth,
                false,
                separable,
            )?);
        }
        Ok(PaFpn {
            in_channels: ch.to_vec(),
            reduce,
            td,
            down,
            bu,
        })
    }

    pub fn out_channels(&self) -> Vec<usize> {
        self.in_channels.clone()
    }

    pub fn forward<T: Float, B: Backend<T>>(
        &self,
        b: &mut B,
        store: &ParamStore<T>,
        xs: &[B::Var],
    ) -> Result<Vec<B::Var>> {
        check_levels(b, xs, &self.in_channels)?;
        let n = xs.len();
        b.enter("neck");
        b.enter("top_down");
        // laterals[l] has ch[l+1] channels at level l's resolution
        let mut laterals = Vec::with_capacity(n - 1);
        let mut cur = xs[0];
        let mut finest = xs[0];
        for l in 0..n - 1 {
            let lat = self.reduce[l].forward(b, store, cur)?;
            laterals.push(lat);
            let up = b.upsample_nearest(lat, 2);
            let cat = b.concat(&[up, xs[l + 1]])?;
            cur = self.td[l].forward(b, store, cat)?;
            finest = cur;
        }
        b.exit();
        b.enter("bottom_up");
        let mut outs = vec![finest; n];
        for l in (0..n - 1).rev() {
            let d = self.down[l].forward(b, store, outs[l + 1])?;
            let cat = b.concat(&[d, laterals[l]])?;
            outs[l] = self.bu[l].forward(b, store, cat)?;
        }
        b.exit();
        b.exit();
        Ok(outs)
    }
}

/// The neck variant chosen by configuration.
#[derive(Debug, Clone)]
pub enum Neck {
    Slim(SlimFpn),
    Pa(PaFpn),
}

impl Neck {
    pub fn out_channels(&self) -> Vec<usize> {
        match self {
            Neck::Slim(n) => n.out_channels(),
            Neck::Pa(n) => n.out_channels(),
        }
    }

    pub fn forward<T: Float, B: Backend<T>>(
        &self,
        b: &mut B,
        store: &ParamStore<T>,
        xs: &[B::Var],
    ) -> Result<Vec<B::Var>> {
        match self {
            Neck::Slim(n) => n.forward(b, store, xs),
            Neck::Pa(n) => n.forward(b, store, xs),
        }
    }
}

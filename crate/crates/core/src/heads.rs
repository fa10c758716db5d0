//! Detection heads: the plain decoupled head, the PixSF encode-decode head
//! and the projection used to align student features with an auxiliary head.

use serde::{Deserialize, Serialize};

use crate::backend::{Backend, Builder, ParamStore};
use crate::error::{Error, Result};
use crate::nn::{Cbam, Conv, ConvBlock, ConvSpec, CBAM_REDUCTION};
use crate::tensor::Float;

/// Prior probability used to initialise classification and objectness biases.
pub const PRIOR_PROB: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadMode {
    Plain,
    Ds,
    #[serde(rename = "pixsf")]
    PixSf,
    #[serde(rename = "ds+pixsf")]
    DsPixSf,
}

impl HeadMode {
    pub fn separable(self) -> bool {
        matches!(self, HeadMode::Ds | HeadMode::DsPixSf)
    }

    pub fn pixel_shuffle(self) -> bool {
        matches!(self, HeadMode::PixSf | HeadMode::DsPixSf)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            HeadMode::Plain => "plain",
            HeadMode::Ds => "ds",
            HeadMode::PixSf => "pixsf",
            HeadMode::DsPixSf => "ds+pixsf",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "plain" | "conv" => HeadMode::Plain,
            "ds" => HeadMode::Ds,
            "pixsf" => HeadMode::PixSf,
            "ds+pixsf" | "ds-pixsf" => HeadMode::DsPixSf,
            other => return Err(Error::Config(format!("unknown head mode '{}'", other))),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeadConfig {
    pub mode: HeadMode,
    pub attention: bool,
    pub hidden_channels: usize,
    /// Shuffle factor of the PixSF encoder/decoder.
    pub r: usize,
    pub num_classes: usize,
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_channels == 0 || self.num_classes == 0 {
            return Err(Error::Config(format!("degenerate head config {:?}", self)));
        }
        if self.mode.pixel_shuffle() && self.r < 2 {
            return Err(Error::Config(format!("shuffle factor must be at least 2, got {}", self.r)));
        }
        if self.attention && self.hidden_channels < CBAM_REDUCTION {
            return Err(Error::Config(format!(
                "attention needs at least {} hidden channels",
                CBAM_REDUCTION
            )));
        }
        Ok(())
    }

    /// Rearrangement factor between the stream resolution and the grid.
    pub fn scale(&self) -> usize {
        if self.mode.pixel_shuffle() {
            self.r
        } else {
            1
        }
    }
}

/// Per-level head outputs as backend variables.
#[derive(Debug, Clone, Copy)]
pub struct HeadVars<V> {
    /// `[N, num_classes, H, W]` logits.
    pub cls: V,
    /// `[N, 4, H, W]` raw offsets (dx, dy, dw, dh).
    pub reg: V,
    /// `[N, 1, H, W]` logits.
    pub obj: V,
    /// Last shared feature before the streams split.
    pub feature: V,
}

/// A decoupled head for one pyramid level.
#[derive(Debug, Clone)]
pub struct Head {
    cfg: HeadConfig,
    in_channels: usize,
    encoder: ConvBlock,
    attention: Option<Cbam>,
    cls_convs: Vec<Conv>,
    reg_convs: Vec<Conv>,
    cls_pred: ConvBlock,
    reg_pred: ConvBlock,
    obj_pred: ConvBlock,
}

impl Head {
    pub fn new<T: Float>(b: &mut Builder<'_, T>, in_channels: usize, cfg: HeadConfig) -> Result<Self> {
        cfg.validate()?;
        let s2 = cfg.scale() * cfg.scale();
        let hid = cfg.hidden_channels;
        let encoder = ConvBlock::new(&mut b.sub("encoder"), ConvSpec::new(s2 * in_channels, hid, 1, 1))?;
        let attention = if cfg.attention {
            Some(Cbam::new(&mut b.sub("cbam"), hid, CBAM_REDUCTION)?)
        } else {
            None
        };
        let stream = |b: &mut Builder<'_, T>, name: &str| -> Result<Vec<Conv>> {
            (0..2)
                .map(|i| {
                    Conv::new(
                        &mut b.sub(&format!("{}.{}", name, i)),
                        ConvSpec::new(hid, hid, 3, 1),
                        cfg.mode.separable(),
                    )
                })
                .collect()
        };
        let cls_convs = stream(b, "cls_convs")?;
        let reg_convs = stream(b, "reg_convs")?;
        let bias_init = -((1.0 - PRIOR_PROB) / PRIOR_PROB).ln();
        let cls_pred = ConvBlock::new(&mut b.sub("cls_pred"), ConvSpec::plain(hid, s2 * cfg.num_classes, 1))?;
        let reg_pred = ConvBlock::new(&mut b.sub("reg_pred"), ConvSpec::plain(hid, s2 * 4, 1))?;
        let obj_pred = ConvBlock::new(&mut b.sub("obj_pred"), ConvSpec::plain(hid, s2, 1))?;
        for p in [&cls_pred, &obj_pred] {
            if let Some(id) = p.bias_id() {
                b.fill(id, bias_init);
            }
        }
        Ok(Head {
            cfg,
            in_channels,
            encoder,
            attention,
            cls_convs,
            reg_convs,
            cls_pred,
            reg_pred,
            obj_pred,
        })
    }

    pub fn config(&self) -> &HeadConfig {
        &self.cfg
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn forward<T: Float, B: Backend<T>>(
        &self,
        b: &mut B,
        store: &ParamStore<T>,
        x: B::Var,
    ) -> Result<HeadVars<B::Var>> {
        let s = b.shape(x);
        if s.len() != 4 || s[1] != self.in_channels {
            return Err(Error::Shape(format!(
                "head expects {} input channels, got {:?}",
                self.in_channels, s
            )));
        }
        let r = self.cfg.scale();
        let x = if r > 1 { b.space_to_depth(x, r)? } else { x };
        b.enter("encoder");
        let mut f = self.encoder.forward(b, store, x)?;
        b.exit();
        if let Some(att) = &self.attention {
            b.enter("cbam");
            f = att.forward(b, store, f)?;
            b.exit();
        }
        b.enter("cls");
        let mut c = f;
        for conv in &self.cls_convs {
            c = conv.forward(b, store, c)?;
        }
        let cls = self.cls_pred.forward(b, store, c)?;
        b.exit();
        b.enter("reg");
        let mut g = f;
        for conv in &self.reg_convs {
            g = conv.forward(b, store, g)?;
        }
        let reg = self.reg_pred.forward(b, store, g)?;
        let obj = self.obj_pred.forward(b, store, g)?;
        b.exit();
        let (cls, reg, obj) = if r > 1 {
            b.enter("decoder");
            let out = (b.depth_to_space(cls, r)?, b.depth_to_space(reg, r)?, b.depth_to_space(obj, r)?);
            b.exit();
            out
        } else {
            (cls, reg, obj)
        };
        Ok(HeadVars {
            cls,
            reg,
            obj,
            feature: f,
        })
    }
}

/// Maps a student head feature onto the shape of an auxiliary head feature:
/// a 1×1 conv to `scale²·C_aux` channels followed by depth-to-space.
#[derive(Debug, Clone)]
pub struct FeatureProjection {
    conv: ConvBlock,
    scale: usize,
}

impl FeatureProjection {
    pub fn new<T: Float>(b: &mut Builder<'_, T>, student: &HeadConfig, aux_channels: usize) -> Result<Self> {
        let scale = student.scale();
        let conv = ConvBlock::new(
            &mut b.sub("proj"),
            ConvSpec::plain(student.hidden_channels, scale * scale * aux_channels, 1),
        )?;
        Ok(FeatureProjection { conv, scale })
    }

    pub fn forward<T: Float, B: Backend<T>>(&self, b: &mut B, store: &ParamStore<T>, x: B::Var) -> Result<B::Var> {
        let y = self.conv.forward(b, store, x)?;
        if self.scale > 1 {
            b.depth_to_space(y, self.scale)
        } else {
            Ok(y)
        }
    }
}

//! Detector assembly: profiles, configuration, forward pass and the
//! auxiliary training branch.

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::backbone::{level_channels, Backbone};
use crate::backend::{Backend, Builder, ParamStore};
use crate::error::{Error, Result};
use crate::geometry::GridSpec;
use crate::heads::{FeatureProjection, Head, HeadConfig, HeadMode, HeadVars};
use crate::neck::{Neck, PaFpn, SlimFpn};
use crate::profiler::{time_runs, CostReport, CostTracer, Latency};
use crate::tensor::{Float, Tensor};

/// Strides of the four pyramid levels, coarse to fine.
pub const STRIDES: [usize; 4] = [32, 16, 8, 4];

/// Width and depth scaling of a model family member.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    S,
    Tiny,
    Nano,
}

impl Profile {
    pub const ALL: [Profile; 3] = [Profile::S, Profile::Tiny, Profile::Nano];

    pub fn width(self) -> f64 {
        match self {
            Profile::S => 0.5,
            Profile::Tiny => 0.375,
            Profile::Nano => 0.25,
        }
    }

    pub fn depth(self) -> f64 {
        0.33
    }

    /// Nano replaces dense 3×3 convs with depthwise-separable ones in the
    /// backbone and neck.
    pub fn separable(self) -> bool {
        self == Profile::Nano
    }

    pub fn default_input_size(self) -> usize {
        match self {
            Profile::S => 640,
            Profile::Tiny | Profile::Nano => 448,
        }
    }

    /// Stem width of the backbone.
    pub fn base_channels(self) -> usize {
        scaled(64, self.width())
    }

    /// Bottleneck count of the shallowest CSP stage.
    pub fn base_depth(self) -> usize {
        ((3.0 * self.depth()).round() as usize).max(1)
    }

    pub fn head_hidden(self) -> usize {
        scaled(256, self.width())
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Profile::S => "s",
            Profile::Tiny => "tiny",
            Profile::Nano => "nano",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "s" => Profile::S,
            "tiny" => Profile::Tiny,
            "nano" => Profile::Nano,
            other => return Err(Error::Config(format!("unknown profile '{}'", other))),
        })
    }
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

fn scaled(channels: usize, mult: f64) -> usize {
    (channels as f64 * mult).round() as usize
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NeckKind {
    SlimFpn,
    PaFpn,
}

impl NeckKind {
    pub fn as_str(self) -> &'static str {
        match self {
            NeckKind::SlimFpn => "slimfpn",
            NeckKind::PaFpn => "pafpn",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "slimfpn" | "slim" => NeckKind::SlimFpn,
            "pafpn" | "panet" | "pa" => NeckKind::PaFpn,
            other => return Err(Error::Config(format!("unknown neck '{}'", other))),
        })
    }
}

/// Online distillation through auxiliary heads.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    pub enabled: bool,
    /// Epochs during which student and auxiliary heads assign labels
    /// independently before the auxiliary assignment takes over.
    pub warmup_epochs: usize,
    pub lambda: f64,
    /// Width multiplier of the auxiliary heads (1.25 is the X profile).
    pub aux_width: f64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            enabled: false,
            warmup_epochs: 50,
            lambda: 1.0,
            aux_width: 1.25,
        }
    }
}

impl DistillConfig {
    pub fn aux_hidden(&self) -> usize {
        scaled(256, self.aux_width)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub profile: Profile,
    pub input_size: usize,
    pub neck: NeckKind,
    pub head: HeadMode,
    /// 3 (strides 32/16/8) or 4 (adds stride 4).
    pub heads: usize,
    pub attention: bool,
    pub distill: DistillConfig,
    pub num_classes: usize,
    /// SlimFPN channel width; defaults to the stride-8 backbone width.
    pub unified_channels: Option<usize>,
    pub shuffle_factor: usize,
}

impl ModelConfig {
    /// The YOLOX baseline: PAFPN, three plain heads (separable for Nano).
    pub fn yolox(profile: Profile) -> Self {
        ModelConfig {
            profile,
            input_size: profile.default_input_size(),
            neck: NeckKind::PaFpn,
            head: if profile.separable() { HeadMode::Ds } else { HeadMode::Plain },
            heads: 3,
            attention: false,
            distill: DistillConfig::default(),
            num_classes: 10,
            unified_channels: None,
            shuffle_factor: 2,
        }
    }

    /// YOLOX with the extra stride-4 head.
    pub fn yolox_p4(profile: Profile) -> Self {
        ModelConfig {
            heads: 4,
            ..Self::yolox(profile)
        }
    }

    /// FasterX: SlimFPN, four DS+PixSF heads with attention.
    pub fn fasterx(profile: Profile) -> Self {
        ModelConfig {
            neck: NeckKind::SlimFpn,
            head: HeadMode::DsPixSf,
            heads: 4,
            attention: true,
            ..Self::yolox(profile)
        }
    }

    /// Named presets accepted by the command line.
    pub fn preset(name: &str) -> Result<Self> {
        let (family, profile) = name
            .rsplit_once('-')
            .ok_or_else(|| Error::Config(format!("preset '{}' is not <family>-<profile>", name)))?;
        let profile = Profile::parse(profile)?;
        Ok(match family.to_ascii_lowercase().as_str() {
            "yolox" => Self::yolox(profile),
            "yolox-p4" | "yoloxp4" => Self::yolox_p4(profile),
            "fasterx" => Self::fasterx(profile),
            other => return Err(Error::Config(format!("unknown model family '{}'", other))),
        })
    }

    pub fn with_input_size(mut self, input_size: usize) -> Self {
        self.input_size = input_size;
        self
    }

    pub fn strides(&self) -> &'static [usize] {
        &STRIDES[..self.heads]
    }

    pub fn unified(&self) -> usize {
        self.unified_channels
            .unwrap_or_else(|| level_channels(self.profile.base_channels())[2])
    }

    pub fn head_config(&self) -> HeadConfig {
        HeadConfig {
            mode: self.head,
            attention: self.attention,
            hidden_channels: self.profile.head_hidden(),
            r: self.shuffle_factor,
            num_classes: self.num_classes,
        }
    }

    pub fn aux_head_config(&self) -> HeadConfig {
        HeadConfig {
            mode: HeadMode::Plain,
            attention: false,
            hidden_channels: self.distill.aux_hidden(),
            r: self.shuffle_factor,
            num_classes: self.num_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads != 3 && self.heads != 4 {
            return Err(Error::Config(format!("heads must be 3 or 4, got {}", self.heads)));
        }
        if self.input_size == 0 || !self.input_size.is_multiple_of(64) {
            return Err(Error::Config(format!(
                "input size {} must be a positive multiple of 64",
                self.input_size
            )));
        }
        if self.num_classes == 0 {
            return Err(Error::Config("num_classes must be positive".into()));
        }
        if self.distill.lambda < 0.0 || !self.distill.lambda.is_finite() {
            return Err(Error::Config(format!("distill lambda {} must be >= 0", self.distill.lambda)));
        }
        if self.distill.aux_width <= 0.0 {
            return Err(Error::Config("aux width must be positive".into()));
        }
        if let Some(u) = self.unified_channels {
            if u == 0 || u % 2 != 0 {
                return Err(Error::Config(format!("unified channels {} must be even and positive", u)));
            }
        }
        self.head_config().validate()?;
        if self.distill.enabled {
            self.aux_head_config().validate()?;
        }
        Ok(())
    }

    /// Canonical `key=value` lines, sorted by key.
    pub fn to_kv(&self) -> Vec<(String, String)> {
        let mut kv = vec![
            ("model.profile".into(), self.profile.to_string()),
            ("model.input_size".into(), self.input_size.to_string()),
            ("model.neck".into(), self.neck.as_str().into()),
            ("model.head".into(), self.head.as_str().into()),
            ("model.heads".into(), self.heads.to_string()),
            ("model.attention".into(), self.attention.to_string()),
            ("model.num_classes".into(), self.num_classes.to_string()),
            (
                "model.unified_channels".into(),
                self.unified_channels.map_or_else(|| "auto".into(), |u| u.to_string()),
            ),
            ("model.shuffle_factor".into(), self.shuffle_factor.to_string()),
            ("distill.enabled".into(), self.distill.enabled.to_string()),
            ("distill.warmup_epochs".into(), self.distill.warmup_epochs.to_string()),
            ("distill.lambda".into(), format!("{:?}", self.distill.lambda)),
            ("distill.aux_width".into(), format!("{:?}", self.distill.aux_width)),
        ];
        kv.sort();
        kv
    }

    pub fn canonical_text(&self) -> String {
        self.to_kv().into_iter().map(|(k, v)| format!("{}={}\n", k, v)).collect()
    }

    /// Apply one dotted `key=value` setting. Returns `false` when the key is
    /// not a model or distillation key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        let bad = |e: &dyn fmt::Display| Error::Config(format!("{}: invalid value '{}': {}", key, value, e));
        match key {
            "model.preset" => {
                let d = self.distill;
                let n = self.num_classes;
                *self = Self::preset(value)?;
                self.distill = d;
                self.num_classes = n;
            }
            "model.profile" => {
                self.profile = Profile::parse(value)?;
            }
            "model.input_size" => self.input_size = value.parse().map_err(|e| bad(&e))?,
            "model.neck" => self.neck = NeckKind::parse(value)?,
            "model.head" => self.head = HeadMode::parse(value)?,
            "model.heads" => self.heads = value.parse().map_err(|e| bad(&e))?,
            "model.attention" => self.attention = value.parse().map_err(|e| bad(&e))?,
            "model.num_classes" => self.num_classes = value.parse().map_err(|e| bad(&e))?,
            "model.unified_channels" => {
                self.unified_channels = if value == "auto" {
                    None
                } else {
                    Some(value.parse().map_err(|e| bad(&e))?)
                }
            }
            "model.shuffle_factor" => self.shuffle_factor = value.parse().map_err(|e| bad(&e))?,
            "distill.enabled" => self.distill.enabled = value.parse().map_err(|e| bad(&e))?,
            "distill.warmup_epochs" => self.distill.warmup_epochs = value.parse().map_err(|e| bad(&e))?,
            "distill.lambda" => self.distill.lambda = value.parse().map_err(|e| bad(&e))?,
            "distill.aux_width" => self.distill.aux_width = value.parse().map_err(|e| bad(&e))?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

/// Head outputs of one level after a forward pass.
#[derive(Debug, Clone)]
pub struct LevelOutput<T> {
    pub grid: GridSpec,
    pub cls: Tensor<T>,
    pub reg: Tensor<T>,
    pub obj: Tensor<T>,
}

/// Graph variables of a student forward pass.
#[derive(Debug, Clone)]
pub struct StudentVars<V> {
    pub neck: Vec<V>,
    pub heads: Vec<HeadVars<V>>,
}

/// Graph variables of the auxiliary branch for one level.
#[derive(Debug, Clone, Copy)]
pub struct AuxVars<V> {
    pub head: HeadVars<V>,
    /// Student feature mapped onto the auxiliary feature's shape.
    pub projected: V,
}

#[derive(Debug, Clone)]
struct AuxBranch {
    heads: Vec<Head>,
    projections: Vec<FeatureProjection>,
}

/// A detector together with its parameters.
#[derive(Debug, Clone)]
pub struct Model<T = f32> {
    config: ModelConfig,
    store: ParamStore<T>,
    backbone: Backbone,
    neck: Neck,
    heads: Vec<Head>,
    aux: Option<AuxBranch>,
    student_params: usize,
    student_buffers: usize,
}

impl<T: Float> Model<T> {
    /// Build with deterministic initialisation from `seed`. Auxiliary
    /// parameters are registered after every student parameter.
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let p = config.profile;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder::new(&mut store, &mut rng);
        let base = p.base_channels();
        let depth = p.base_depth();
        let backbone = Backbone::new(&mut b.sub("backbone"), base, depth, p.separable())?;
        let in_ch = &backbone.out_channels()[..config.heads];
        let neck = match config.neck {
            NeckKind::SlimFpn => Neck::Slim(SlimFpn::new(
                &mut b.sub("neck"),
                in_ch,
                config.unified(),
                depth,
                p.separable(),
            )?),
            NeckKind::PaFpn => Neck::Pa(PaFpn::new(&mut b.sub("neck"), in_ch, depth, p.separable())?),
        };
        let hc = config.head_config();
        let heads = neck
            .out_channels()
            .iter()
            .enumerate()
            .map(|(l, &c)| Head::new(&mut b.sub(&format!("head{}", l)), c, hc))
            .collect::<Result<Vec<_>>>()?;
        drop(b);
        let student_params = store.len();
        let student_buffers = store.buffers().len();
        let aux = if config.distill.enabled {
            let mut b = Builder::new(&mut store, &mut rng);
            let ac = config.aux_head_config();
            let mut aux_heads = Vec::new();
            let mut projections = Vec::new();
            for (l, &c) in neck.out_channels().iter().enumerate() {
                aux_heads.push(Head::new(&mut b.sub(&format!("aux.head{}", l)), c, ac)?);
                projections.push(FeatureProjection::new(
                    &mut b.sub(&format!("aux.proj{}", l)),
                    &hc,
                    ac.hidden_channels,
                )?);
            }
            Some(AuxBranch {
                heads: aux_heads,
                projections,
            })
        } else {
            None
        };
        Ok(Model {
            config: config.clone(),
            store,
            backbone,
            neck,
            heads,
            aux,
            student_params,
            student_buffers,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn has_aux(&self) -> bool {
        self.aux.is_some()
    }

    /// Number of parameter tensors that belong to the inference model.
    pub fn student_param_tensors(&self) -> usize {
        self.student_params
    }

    pub fn grids(&self) -> Vec<GridSpec> {
        self.config
            .strides()
            .iter()
            .map(|&s| GridSpec::for_input(self.config.input_size, s).expect("validated input size"))
            .collect()
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let s = self.config.input_size;
        if shape.len() != 4 || shape[1] != 3 || shape[2] != s || shape[3] != s {
            return Err(Error::Shape(format!(
                "model expects [N, 3, {}, {}] images, got {:?}",
                s, s, shape
            )));
        }
        Ok(())
    }

    /// Student forward on any backend.
    pub fn forward_student<B: Backend<T>>(&self, b: &mut B, x: B::Var) -> Result<StudentVars<B::Var>> {
        self.check_input(&b.shape(x))?;
        let feats = self.backbone.forward(b, &self.store, x)?;
        let neck = self.neck.forward(b, &self.store, &feats[..self.config.heads])?;
        let mut heads = Vec::with_capacity(neck.len());
        for (l, (h, &f)) in self.heads.iter().zip(&neck).enumerate() {
            b.enter(&format!("head{}", l));
            heads.push(h.forward(b, &self.store, f)?);
            b.exit();
        }
        Ok(StudentVars { neck, heads })
    }

    /// Auxiliary heads on the student's neck outputs plus projected student
    /// features.
    pub fn forward_aux<B: Backend<T>>(&self, b: &mut B, student: &StudentVars<B::Var>) -> Result<Vec<AuxVars<B::Var>>> {
        let aux = self.aux.as_ref().ok_or(Error::MissingAux)?;
        let mut out = Vec::with_capacity(aux.heads.len());
        for (l, ((h, p), (&f, sv))) in aux
            .heads
            .iter()
            .zip(&aux.projections)
            .zip(student.neck.iter().zip(&student.heads))
            .enumerate()
        {
            b.enter(&format!("aux{}", l));
            let head = h.forward(b, &self.store, f)?;
            let projected = p.forward(b, &self.store, sv.feature)?;
            b.exit();
            out.push(AuxVars { head, projected });
        }
        Ok(out)
    }

    /// Eval-mode forward returning per-level outputs.
    pub fn forward(&self, images: &Tensor<T>) -> Result<Vec<LevelOutput<T>>> {
        let mut g = Graph::new(false);
        let x = g.input(images.clone());
        let sv = self.forward_student(&mut g, x)?;
        Ok(self.collect(&g, &sv.heads))
    }

    /// Eval-mode forward of the auxiliary heads.
    pub fn forward_aux_eval(&self, images: &Tensor<T>) -> Result<Vec<LevelOutput<T>>> {
        let mut g = Graph::new(false);
        let x = g.input(images.clone());
        let sv = self.forward_student(&mut g, x)?;
        let av = self.forward_aux(&mut g, &sv)?;
        let heads: Vec<_> = av.iter().map(|a| a.head).collect();
        Ok(self.collect(&g, &heads))
    }

    pub fn collect(&self, g: &Graph<T>, heads: &[HeadVars<Var>]) -> Vec<LevelOutput<T>> {
        self.grids()
            .into_iter()
            .zip(heads)
            .map(|(grid, h)| LevelOutput {
                grid,
                cls: g.value(h.cls).clone(),
                reg: g.value(h.reg).clone(),
                obj: g.value(h.obj).clone(),
            })
            .collect()
    }

    /// Inference-cost report of the student network at the configured input.
    pub fn cost(&self) -> Result<CostReport> {
        let mut t = CostTracer::new(self.config.input_size);
        let s = self.config.input_size;
        let x = t.input(&[1, 3, s, s]);
        self.forward_student(&mut t, x)?;
        Ok(t.finish())
    }

    /// Cost of the auxiliary branch alone (training-time only).
    pub fn aux_cost(&self) -> Result<CostReport> {
        let mut t = CostTracer::new(self.config.input_size);
        let s = self.config.input_size;
        let x = t.input(&[1, 3, s, s]);
        let sv = self.forward_student(&mut t, x)?;
        let student = t.report().clone();
        self.forward_aux(&mut t, &sv)?;
        let mut aux = t.finish();
        aux.params -= student.params;
        aux.flop_units -= student.flop_units;
        aux.breakdown.retain(|k, _| !student.breakdown.contains_key(k));
        Ok(aux)
    }

    /// Wall-clock latency of the eval-mode forward on a zero image.
    pub fn time_forward(&self, reps: usize, warmup: usize) -> Result<Latency> {
        let s = self.config.input_size;
        let x = Tensor::zeros(&[1, 3, s, s]);
        self.forward(&x)?;
        Ok(time_runs(reps, warmup, 1, || {
            self.forward(&x).expect("validated forward");
        }))
    }

    /// The inference model: auxiliary heads and projections removed.
    pub fn strip_aux(&self) -> Model<T> {
        let mut m = self.clone();
        m.store.truncate(self.student_params, self.student_buffers);
        m.aux = None;
        m.config.distill.enabled = false;
        m
    }

    /// Convert parameters to another scalar type.
    pub fn cast<U: Float>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            store: self.store.cast(),
            backbone: self.backbone.clone(),
            neck: self.neck.clone(),
            heads: self.heads.clone(),
            aux: self.aux.clone(),
            student_params: self.student_params,
            student_buffers: self.student_buffers,
        }
    }
}

//! Training loop with optional auxiliary-head distillation.
//!
//! Without distillation each image is assigned once from the student's own
//! predictions. With distillation, during the first `warmup_epochs` epochs
//! student and auxiliary heads assign independently (joint phase); after
//! that a single assignment computed on the auxiliary predictions
//! supervises both heads (guided phase). The feature alignment term is
//! added in both phases.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::assignment::{simota_assign, AssignConfig, AssignmentResult, GroundTruth};
use crate::autograd::{Graph, Var};
use crate::backend::ParamId;
use crate::data::{images_to_tensor, letterbox_sample, mosaic, Sample};
use crate::error::{Error, Result};
use crate::eval::{evaluate, tag_ground_truth, Detection, Metrics};
use crate::losses::{alignment, finalize, image_loss, ImageLoss, LossBundle, LossConfig};
use crate::model::{LevelOutput, Model};
use crate::postprocess::{candidates, raw_predictions, scatter_gradients};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Epochs of linear learning-rate warmup before the cosine decay.
    pub warmup_epochs: usize,
    /// Final learning rate as a fraction of `lr`.
    pub min_lr_ratio: f64,
    pub seed: u64,
    /// Probability that a training sample is a mosaic of four images.
    pub mosaic: f64,
    pub mosaic_scale: (f64, f64),
    /// Evaluate every this many epochs (0 disables periodic evaluation;
    /// the final epoch is always evaluated when a validation set exists).
    pub eval_every: usize,
    pub score_thr: f64,
    pub nms_thr: f64,
    pub max_dets: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 16,
            lr: 0.02,
            momentum: 0.9,
            weight_decay: 5e-4,
            warmup_epochs: 2,
            min_lr_ratio: 0.05,
            seed: 0,
            mosaic: 0.5,
            mosaic_scale: (0.8, 1.2),
            eval_every: 10,
            score_thr: 0.01,
            nms_thr: 0.65,
            max_dets: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.batch_size == 0 {
            return bad("train.batch_size must be positive");
        }
        if !self.lr.is_finite() || self.lr <= 0.0 {
            return bad("train.lr must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("train.momentum must lie in [0, 1)");
        }
        if self.weight_decay < 0.0 {
            return bad("train.weight_decay must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.mosaic) {
            return bad("train.mosaic must be a probability");
        }
        if !(self.mosaic_scale.0 > 0.0 && self.mosaic_scale.0 <= self.mosaic_scale.1) {
            return bad("train.mosaic_scale must be an increasing positive range");
        }
        if !(0.0..=1.0).contains(&self.min_lr_ratio) {
            return bad("train.min_lr_ratio must lie in [0, 1]");
        }
        Ok(())
    }

    pub fn to_kv(&self) -> Vec<(String, String)> {
        vec![
            ("train.epochs".into(), self.epochs.to_string()),
            ("train.batch_size".into(), self.batch_size.to_string()),
            ("train.lr".into(), self.lr.to_string()),
            ("train.momentum".into(), self.momentum.to_string()),
            ("train.weight_decay".into(), self.weight_decay.to_string()),
            ("train.warmup_epochs".into(), self.warmup_epochs.to_string()),
            ("train.min_lr_ratio".into(), self.min_lr_ratio.to_string()),
            ("train.seed".into(), self.seed.to_string()),
            ("train.mosaic".into(), self.mosaic.to_string()),
            (
                "train.mosaic_scale".into(),
                format!("{},{}", self.mosaic_scale.0, self.mosaic_scale.1),
            ),
            ("train.eval_every".into(), self.eval_every.to_string()),
            ("train.score_thr".into(), self.score_thr.to_string()),
            ("train.nms_thr".into(), self.nms_thr.to_string()),
            ("train.max_dets".into(), self.max_dets.to_string()),
        ]
    }

    /// Apply one `train.*` key; returns `false` for keys of other sections.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        let Some(field) = key.strip_prefix("train.") else {
            return Ok(false);
        };
        let v = value.trim();
        let bad = || Error::Config(format!("invalid value '{}' for {}", value, key));
        let f = || v.parse::<f64>().map_err(|_| bad());
        let u = || v.parse::<usize>().map_err(|_| bad());
        match field {
            "epochs" => self.epochs = u()?,
            "batch_size" => self.batch_size = u()?,
            "lr" => self.lr = f()?,
            "momentum" => self.momentum = f()?,
            "weight_decay" => self.weight_decay = f()?,
            "warmup_epochs" => self.warmup_epochs = u()?,
            "min_lr_ratio" => self.min_lr_ratio = f()?,
            "seed" => self.seed = v.parse().map_err(|_| bad())?,
            "mosaic" => self.mosaic = f()?,
            "mosaic_scale" => {
                let (a, b) = v.split_once(',').ok_or_else(bad)?;
                self.mosaic_scale = (
                    a.trim().parse().map_err(|_| bad())?,
                    b.trim().parse().map_err(|_| bad())?,
                );
            }
            "eval_every" => self.eval_every = u()?,
            "score_thr" => self.score_thr = f()?,
            "nms_thr" => self.nms_thr = f()?,
            "max_dets" => self.max_dets = u()?,
            _ => return Err(Error::Config(format!("unknown key {}", key))),
        }
        Ok(true)
    }

    /// Learning rate at fractional epoch `t`.
    pub fn lr_at(&self, t: f64) -> f64 {
        let w = self.warmup_epochs as f64;
        if t < w {
            return self.lr * (t + 1.0 / 16.0).min(w) / w;
        }
        let span = (self.epochs as f64 - w).max(1e-9);
        let progress = ((t - w) / span).clamp(0.0, 1.0);
        let min = self.lr * self.min_lr_ratio;
        min + 0.5 * (self.lr - min) * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    /// No distillation.
    Plain,
    /// Student and auxiliary heads assign independently.
    Joint,
    /// One auxiliary-guided assignment supervises both heads.
    Guided,
}

impl Phase {
    pub fn of(model: &Model<f32>, epoch: usize) -> Self {
        let d = model.config().distill;
        if !d.enabled {
            Phase::Plain
        } else if epoch < d.warmup_epochs {
            Phase::Joint
        } else {
            Phase::Guided
        }
    }
}

/// Which predictions a label assignment was computed on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AssignSource {
    Student,
    Aux,
}

/// One label-assignment invocation during a step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AssignCall {
    /// Position of the image in its batch.
    pub image: usize,
    pub source: AssignSource,
    /// Number of losses supervised by this assignment.
    pub consumers: usize,
}

#[derive(Debug, Clone)]
pub struct StepOutput {
    pub phase: Phase,
    pub student: LossBundle,
    pub aux: Option<LossBundle>,
    /// Mean squared student/aux feature difference (before λ).
    pub align: Option<f64>,
    /// Value handed to the optimizer.
    pub total: f64,
    pub assignments: Vec<AssignCall>,
}

/// Batch of letterboxed training images.
#[derive(Debug, Clone)]
pub struct Batch {
    pub images: Tensor<f32>,
    pub gts: Vec<Vec<GroundTruth>>,
}

impl Batch {
    pub fn from_samples(samples: &[Sample]) -> Result<Self> {
        let imgs: Vec<_> = samples.iter().map(|s| &s.image).collect();
        Ok(Batch {
            images: images_to_tensor(&imgs)?,
            gts: samples.iter().map(|s| s.gts.clone()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.gts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gts.is_empty()
    }
}

fn flat(t: &Tensor<f32>) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}

fn level_seeds(
    levels: &[LevelOutput<f32>],
    vars: &[crate::heads::HeadVars<Var>],
    losses: &[ImageLoss],
    seeds: &mut Vec<(Var, Tensor<f32>)>,
) {
    let grads: Vec<_> = losses
        .iter()
        .map(|l| (l.d_cls.as_slice(), l.d_reg.as_slice(), l.d_obj.as_slice()))
        .collect();
    for (g, v) in scatter_gradients(levels, &grads).into_iter().zip(vars) {
        let [dc, dr, d_o] = g;
        seeds.push((v.cls, dc));
        seeds.push((v.reg, dr));
        seeds.push((v.obj, d_o));
    }
}

/// Forward, assign, compute losses and backpropagate one batch. Returns the
/// step summary and the graph holding gradients and norm statistics.
pub fn training_step(
    model: &Model<f32>,
    batch: &Batch,
    epoch: usize,
    assign: &AssignConfig,
    loss: &LossConfig,
) -> Result<(StepOutput, crate::autograd::Gradients<f32>, Graph<f32>)> {
    let phase = Phase::of(model, epoch);
    if phase != Phase::Plain && !model.has_aux() {
        return Err(Error::MissingAux);
    }
    let mut g = Graph::new(true);
    let x = g.input(batch.images.clone());
    let sv = model.forward_student(&mut g, x)?;
    let av = if phase == Phase::Plain {
        None
    } else {
        Some(model.forward_aux(&mut g, &sv)?)
    };
    let student_levels = model.collect(&g, &sv.heads);
    let aux_heads: Option<Vec<_>> = av.as_ref().map(|a| a.iter().map(|a| a.head).collect());
    let aux_levels = aux_heads.as_ref().map(|h| model.collect(&g, h));

    let mut calls = Vec::new();
    let mut student_losses = Vec::with_capacity(batch.len());
    let mut aux_losses = Vec::with_capacity(batch.len());
    for (n, gts) in batch.gts.iter().enumerate() {
        let sp = raw_predictions(&student_levels, n);
        let ap = aux_levels.as_ref().map(|l| raw_predictions(l, n));
        let mut run = |source, cands: &crate::losses::RawPredictions, consumers| -> Result<AssignmentResult> {
            calls.push(AssignCall {
                image: n,
                source,
                consumers,
            });
            simota_assign(&candidates(cands), gts, assign)
        };
        match (phase, &ap) {
            (Phase::Plain, _) => {
                let a = run(AssignSource::Student, &sp, 1)?;
                student_losses.push(image_loss(&sp, &a, gts, loss)?);
            }
            (Phase::Joint, Some(ap)) => {
                let a_s = run(AssignSource::Student, &sp, 1)?;
                let a_a = run(AssignSource::Aux, ap, 1)?;
                student_losses.push(image_loss(&sp, &a_s, gts, loss)?);
                aux_losses.push(image_loss(ap, &a_a, gts, loss)?);
            }
            (Phase::Guided, Some(ap)) => {
                let shared = run(AssignSource::Aux, ap, 2)?;
                student_losses.push(image_loss(&sp, &shared, gts, loss)?);
                aux_losses.push(image_loss(ap, &shared, gts, loss)?);
            }
            _ => return Err(Error::MissingAux),
        }
    }
    let student = finalize(&mut student_losses, loss);
    let mut seeds = Vec::new();
    level_seeds(&student_levels, &sv.heads, &student_losses, &mut seeds);
    let mut total = student.total;
    let (mut aux_bundle, mut align) = (None, None);
    if let (Some(av), Some(aux_levels), Some(aux_heads)) = (&av, &aux_levels, &aux_heads) {
        let bundle = finalize(&mut aux_losses, loss);
        level_seeds(aux_levels, aux_heads, &aux_losses, &mut seeds);
        let mut fs = Vec::new();
        let mut fa = Vec::new();
        for a in av {
            fs.extend(flat(g.value(a.projected)));
            fa.extend(flat(g.value(a.head.feature)));
        }
        let (value, gs, ga) = alignment(&fs, &fa)?;
        let lambda = model.config().distill.lambda;
        let mut off = 0;
        for a in av {
            let shape = g.value(a.projected).shape().to_vec();
            let len: usize = shape.iter().product();
            let ts = Tensor::from_fn(&shape, |k| (lambda * gs[off + k]) as f32);
            let ta = Tensor::from_fn(&shape, |k| (lambda * ga[off + k]) as f32);
            seeds.push((a.projected, ts));
            seeds.push((a.head.feature, ta));
            off += len;
        }
        total = student.total + bundle.total + lambda * value;
        aux_bundle = Some(bundle);
        align = Some(value);
    }
    if !total.is_finite() {
        return Err(Error::Numeric(format!("non-finite training loss at epoch {}", epoch)));
    }
    let grads = g.backward(&seeds)?;
    Ok((
        StepOutput {
            phase,
            student,
            aux: aux_bundle,
            align,
            total,
            assignments: calls,
        },
        grads,
        g,
    ))
}

/// Per-epoch record of the structured training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run: Option<String>,
    pub epoch: usize,
    pub phase: Phase,
    pub lr: f64,
    pub loss: f64,
    pub cls: f64,
    pub reg: f64,
    pub obj: f64,
    pub num_fg: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aux_loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub align: Option<f64>,
    pub images: usize,
    /// Label-assignment invocations during the epoch.
    pub assignments: usize,
    /// Invocations whose result supervised both heads.
    pub shared_assignments: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metrics: Option<Metrics>,
    pub seconds: f64,
}

impl EpochLog {
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("log records serialise")
    }

    pub fn parse_line(line: &str) -> Result<Self> {
        serde_json::from_str(line).map_err(|e| Error::Parse {
            line: 0,
            msg: e.to_string(),
        })
    }
}

/// Parse a JSON-lines training log, skipping blank lines.
pub fn parse_log(text: &str) -> Result<Vec<EpochLog>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(k, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                line: k + 1,
                msg: e.to_string(),
            })
        })
        .collect()
}

/// SGD with momentum and decoupled-from-bias weight decay (conv and linear
/// weights only), plus the model being trained.
pub struct Trainer {
    model: Model<f32>,
    cfg: TrainConfig,
    pub assign: AssignConfig,
    pub loss: LossConfig,
    velocity: Vec<Option<Tensor<f32>>>,
    iteration: usize,
}

impl Trainer {
    pub fn new(model: Model<f32>, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let velocity = vec![None; model.store().len()];
        Ok(Trainer {
            model,
            cfg,
            assign: AssignConfig::default(),
            loss: LossConfig::default(),
            velocity,
            iteration: 0,
        })
    }

    pub fn model(&self) -> &Model<f32> {
        &self.model
    }

    pub fn into_model(self) -> Model<f32> {
        self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    /// One optimisation step at learning rate `lr`.
    pub fn step(&mut self, batch: &Batch, epoch: usize, lr: f64) -> Result<StepOutput> {
        let (out, grads, graph) = training_step(&self.model, batch, epoch, &self.assign, &self.loss)?;
        let (m, wd) = (self.cfg.momentum as f32, self.cfg.weight_decay as f32);
        let lr = lr as f32;
        let store = self.model.store_mut();
        for id in 0..store.len() {
            let Some(grad) = grads.param(ParamId(id)) else {
                continue;
            };
            let w = &mut store.params_mut()[id].value;
            let decay = if w.shape().len() >= 2 { wd } else { 0.0 };
            let v = self.velocity[id].get_or_insert_with(|| Tensor::zeros(w.shape()));
            for ((vi, wi), &gi) in v.data_mut().iter_mut().zip(w.data_mut().iter_mut()).zip(grad.data()) {
                *vi = m * *vi + gi + decay * *wi;
                *wi -= lr * *vi;
            }
        }
        graph.apply_norm_updates(store);
        self.iteration += 1;
        Ok(out)
    }

    /// Build the training batches of one epoch: a seeded shuffle, optional
    /// mosaics and letterboxing to the network input.
    pub fn epoch_batches(&self, data: &[Sample], epoch: usize) -> Result<Vec<Batch>> {
        if data.is_empty() {
            return Err(Error::InvalidArgument("empty training set".into()));
        }
        let size = self.model.config().input_size as u32;
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(1_000_003 + epoch as u64);
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng);
        let mut batches = Vec::new();
        for chunk in order.chunks(self.cfg.batch_size) {
            let mut samples = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let s = if self.cfg.mosaic > 0.0 && rng.random_bool(self.cfg.mosaic) {
                    let pick = [
                        i,
                        rng.random_range(0..data.len()),
                        rng.random_range(0..data.len()),
                        rng.random_range(0..data.len()),
                    ];
                    mosaic(pick.map(|k| &data[k]), size, self.cfg.mosaic_scale, &mut rng)
                } else {
                    letterbox_sample(&data[i], size).0
                };
                samples.push(s);
            }
            batches.push(Batch::from_samples(&samples)?);
        }
        Ok(batches)
    }

    /// Train one epoch and return its log record (without metrics).
    pub fn run_epoch(&mut self, data: &[Sample], epoch: usize) -> Result<EpochLog> {
        let start = Instant::now();
        let batches = self.epoch_batches(data, epoch)?;
        let nb = batches.len() as f64;
        let mut log = EpochLog {
            run: None,
            epoch,
            phase: Phase::of(&self.model, epoch),
            lr: self.cfg.lr_at(epoch as f64),
            loss: 0.0,
            cls: 0.0,
            reg: 0.0,
            obj: 0.0,
            num_fg: 0,
            aux_loss: None,
            align: None,
            images: 0,
            assignments: 0,
            shared_assignments: 0,
            metrics: None,
            seconds: 0.0,
        };
        for (k, batch) in batches.iter().enumerate() {
            let lr = self.cfg.lr_at(epoch as f64 + k as f64 / nb);
            let out = self.step(batch, epoch, lr)?;
            log.loss += out.total / nb;
            log.cls += out.student.cls / nb;
            log.reg += out.student.reg / nb;
            log.obj += out.student.obj / nb;
            log.num_fg += out.student.num_fg;
            if let Some(a) = out.aux {
                *log.aux_loss.get_or_insert(0.0) += a.total / nb;
            }
            if let Some(a) = out.align {
                *log.align.get_or_insert(0.0) += a / nb;
            }
            log.images += batch.len();
            log.assignments += out.assignments.len();
            log.shared_assignments += out.assignments.iter().filter(|c| c.consumers > 1).count();
        }
        log.seconds = start.elapsed().as_secs_f64();
        Ok(log)
    }

    /// Run all configured epochs, evaluating on `val` at the configured
    /// cadence and after the final epoch. `on_epoch` sees every record and
    /// the model after that epoch.
    pub fn fit(
        &mut self,
        train: &[Sample],
        val: &[Sample],
        mut on_epoch: impl FnMut(&EpochLog, &Model<f32>) -> Result<()>,
    ) -> Result<Vec<EpochLog>> {
        let mut logs = Vec::with_capacity(self.cfg.epochs);
        for epoch in 0..self.cfg.epochs {
            let mut log = self.run_epoch(train, epoch)?;
            let last = epoch + 1 == self.cfg.epochs;
            let periodic = self.cfg.eval_every > 0 && (epoch + 1) % self.cfg.eval_every == 0;
            if !val.is_empty() && (last || periodic) {
                log.metrics = Some(evaluate_model(&self.model, val, &self.cfg)?);
            }
            on_epoch(&log, &self.model)?;
            logs.push(log);
        }
        Ok(logs)
    }
}

/// Detections for each sample in source-image coordinates; detection
/// `image` ids are positions in `samples`.
pub fn detect(model: &Model<f32>, samples: &[Sample], cfg: &TrainConfig) -> Result<Vec<Detection>> {
    let size = model.config().input_size as u32;
    let mut out = Vec::new();
    for (c, chunk) in samples.chunks(cfg.batch_size.max(1)).enumerate() {
        let boxed: Vec<_> = chunk.iter().map(|s| letterbox_sample(s, size)).collect();
        let imgs: Vec<_> = boxed.iter().map(|(s, _)| &s.image).collect();
        let images = images_to_tensor(&imgs)?;
        let dets = model.predict(&images, cfg.score_thr, cfg.nms_thr, cfg.max_dets)?;
        for (k, (per_image, (_, meta))) in dets.into_iter().zip(&boxed).enumerate() {
            for mut d in per_image {
                d.image = c * cfg.batch_size.max(1) + k;
                d.bbox = meta.inverse(&d.bbox);
                out.push(d);
            }
        }
    }
    Ok(out)
}

/// Detect on `samples` and score against their annotations.
pub fn evaluate_model(model: &Model<f32>, samples: &[Sample], cfg: &TrainConfig) -> Result<Metrics> {
    let dets = detect(model, samples, cfg)?;
    let gts: Vec<_> = samples.iter().map(|s| s.gts.clone()).collect();
    Ok(evaluate(&dets, &tag_ground_truth(&gts)))
}

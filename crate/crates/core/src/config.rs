//! Layered run configuration: defaults, then a `key=value` file, then
//! command-line overrides. Keys are dotted paths such as `model.profile`,
//! `train.lr` or `distill.enabled`; a file may also group keys under
//! `[section]` headers.

use std::fs;
use std::path::{Path, PathBuf};

use crate::data::SynthSpec;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Profile};
use crate::train::TrainConfig;

/// Where training and evaluation data come from.
#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    /// Manifest of training pairs; synthetic data is generated when absent.
    pub train_manifest: Option<PathBuf>,
    pub val_manifest: Option<PathBuf>,
    pub synth: SynthSpec,
    /// Number of synthetic validation images (generated with `synth.seed + 1`).
    pub synth_val_images: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            train_manifest: None,
            val_manifest: None,
            synth: SynthSpec::default(),
            synth_val_images: 100,
        }
    }
}

impl DataConfig {
    pub fn val_spec(&self) -> SynthSpec {
        SynthSpec {
            num_images: self.synth_val_images,
            seed: self.synth.seed.wrapping_add(1),
            ..self.synth.clone()
        }
    }

    fn to_kv(&self) -> Vec<(String, String)> {
        let path = |p: &Option<PathBuf>| p.as_ref().map_or_else(|| "none".to_string(), |p| p.display().to_string());
        let s = &self.synth;
        vec![
            ("data.train_manifest".into(), path(&self.train_manifest)),
            ("data.val_manifest".into(), path(&self.val_manifest)),
            ("data.synth_images".into(), s.num_images.to_string()),
            ("data.synth_val_images".into(), self.synth_val_images.to_string()),
            ("data.image_size".into(), s.image_size.to_string()),
            ("data.min_objects".into(), s.min_objects.to_string()),
            ("data.max_objects".into(), s.max_objects.to_string()),
            ("data.small_fraction".into(), s.small_fraction.to_string()),
            ("data.max_aspect".into(), s.max_aspect.to_string()),
            ("data.seed".into(), s.seed.to_string()),
        ]
    }

    fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        let Some(field) = key.strip_prefix("data.") else {
            return Ok(false);
        };
        let bad = || Error::Config(format!("invalid value '{}' for {}", value, key));
        let path = || (value != "none").then(|| PathBuf::from(value));
        let s = &mut self.synth;
        match field {
            "train_manifest" => self.train_manifest = path(),
            "val_manifest" => self.val_manifest = path(),
            "synth_images" => s.num_images = value.parse().map_err(|_| bad())?,
            "synth_val_images" => self.synth_val_images = value.parse().map_err(|_| bad())?,
            "image_size" => s.image_size = value.parse().map_err(|_| bad())?,
            "min_objects" => s.min_objects = value.parse().map_err(|_| bad())?,
            "max_objects" => s.max_objects = value.parse().map_err(|_| bad())?,
            "small_fraction" => s.small_fraction = value.parse().map_err(|_| bad())?,
            "max_aspect" => s.max_aspect = value.parse().map_err(|_| bad())?,
            "seed" => s.seed = value.parse().map_err(|_| bad())?,
            _ => return Err(Error::Config(format!("unknown key {}", key))),
        }
        Ok(true)
    }
}

/// Everything a command needs, fully resolved.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub run_name: String,
}

impl Default for RunConfig {
    /// Desk-scale defaults: FasterX-Nano at 128² on synthetic data.
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::fasterx(Profile::Nano).with_input_size(128),
            train: TrainConfig::default(),
            data: DataConfig::default(),
            run_name: "run".into(),
        }
    }
}

impl RunConfig {
    /// Full-scale settings (input 640 for S,
    /// 448 otherwise; 300 epochs with distillation warmup 50). Not intended
    /// for CPU runs.
    pub fn full_scale(profile: Profile) -> Self {
        let mut model = ModelConfig::fasterx(profile);
        model.distill.enabled = true;
        RunConfig {
            model,
            train: TrainConfig {
                epochs: 300,
                batch_size: 64,
                lr: 0.01,
                warmup_epochs: 5,
                mosaic: 1.0,
                mosaic_scale: (0.5, 1.5),
                eval_every: 50,
                ..TrainConfig::default()
            },
            data: DataConfig::default(),
            run_name: "full-scale".into(),
        }
    }

    /// Apply one dotted key. Unknown keys are errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let (key, value) = (key.trim(), value.trim());
        if key == "run.name" {
            self.run_name = value.to_string();
            return Ok(());
        }
        if self.model.set(key, value)? || self.train.set(key, value)? || self.data.set(key, value)? {
            return Ok(());
        }
        Err(Error::Config(format!("unknown configuration key '{}'", key)))
    }

    /// Apply `key=value` text; `#` starts a comment, `[section]` prefixes
    /// subsequent bare keys.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut section = String::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(s) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = s.trim().to_string();
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: n + 1,
                msg: format!("expected key=value, found '{}'", line),
            })?;
            let k = k.trim();
            let key = if section.is_empty() || k.contains('.') {
                k.to_string()
            } else {
                format!("{}.{}", section, k)
            };
            self.set(&key, v).map_err(|e| Error::Parse {
                line: n + 1,
                msg: e.to_string(),
            })?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        self.apply_text(&fs::read_to_string(path)?)
    }

    /// Apply command-line overrides of the form `key=value`.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override '{}' is not key=value", o)))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    /// Defaults, then the optional file, then overrides.
    pub fn resolve<S: AsRef<str>>(file: Option<&Path>, overrides: &[S]) -> Result<Self> {
        let mut cfg = RunConfig::default();
        if let Some(f) = file {
            cfg.apply_file(f)?;
        }
        cfg.apply_overrides(overrides)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        let s = &self.data.synth;
        if s.min_objects > s.max_objects || s.max_aspect < 1.0 || !(0.0..=1.0).contains(&s.small_fraction) {
            return Err(Error::Config("inconsistent synthetic data settings".into()));
        }
        Ok(())
    }

    /// Sorted `key=value` dump that [`RunConfig::apply_text`] reads back to
    /// an equal configuration.
    pub fn to_text(&self) -> String {
        let mut kv = self.model.to_kv();
        kv.extend(self.train.to_kv());
        kv.extend(self.data.to_kv());
        kv.push(("run.name".into(), self.run_name.clone()));
        kv.sort();
        kv.into_iter().map(|(k, v)| format!("{}={}\n", k, v)).collect()
    }

    /// Write the resolved configuration as `config.txt` inside `dir`.
    pub fn write_resolved(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir)?;
        let path = dir.join("config.txt");
        fs::write(&path, self.to_text())?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layering_order() {
        let mut cfg = RunConfig::default();
        cfg.apply_text("[train]\nepochs = 7\nlr=0.5 # comment\nmodel.heads=3\n").unwrap();
        cfg.apply_overrides(&["train.epochs=9"]).unwrap();
        assert_eq!(cfg.train.epochs, 9);
        assert_eq!(cfg.train.lr, 0.5);
        assert_eq!(cfg.model.heads, 3);
    }

    #[test]
    fn dump_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.apply_overrides(&["distill.enabled=true", "train.mosaic_scale=0.5,1.5", "data.seed=3"])
            .unwrap();
        let mut back = RunConfig::default();
        back.apply_text(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_keys_rejected() {
        let mut cfg = RunConfig::default();
        assert!(cfg.set("train.nope", "1").is_err());
        assert!(cfg.set("bogus", "1").is_err());
        assert!(matches!(cfg.apply_text("x\n"), Err(Error::Parse { line: 1, .. })));
    }
}

//! Single-file model checkpoints.
//!
//! Layout: a UTF-8 header terminated by an `end` line, then raw
//! little-endian `f32` data for every parameter tensor followed by every
//! batch-norm buffer (mean then variance), in declaration order.
//!
//! ```text
//! fasterx-checkpoint
//! version 1
//! config-digest <sha256 of the canonical config text>
//! payload-digest <sha256 of the binary payload>
//! epoch <n>                      (optional)
//! config <line count>
//! <canonical key=value lines>
//! param <name> <d0>x<d1>x...
//! buffer <name> <channels>
//! end
//! ```

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::backend::ParamStore;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::tensor::Tensor;

pub const MAGIC: &str = "fasterx-checkpoint";
pub const FORMAT_VERSION: u32 = 1;

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{:02x}", b)).collect()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

/// Digest of a configuration's canonical text.
pub fn config_digest(cfg: &ModelConfig) -> String {
    sha256_hex(cfg.canonical_text().as_bytes())
}

/// Canonical lines that fix the inference architecture. Two configs with
/// equal architecture text accept each other's student weights.
pub fn architecture_text(cfg: &ModelConfig) -> String {
    cfg.canonical_text()
        .lines()
        .filter(|l| l.starts_with("model.") && !l.starts_with("model.input_size="))
        .map(|l| format!("{}\n", l))
        .collect()
}

/// Parse canonical `key=value` text into a configuration.
pub fn config_from_text(text: &str) -> Result<ModelConfig> {
    let mut cfg = ModelConfig::fasterx(crate::model::Profile::S);
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Checkpoint(format!("bad config line '{}'", line)))?;
        if !cfg.set(k.trim(), v.trim())? {
            return Err(Error::Checkpoint(format!("unknown config key '{}'", k)));
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

/// A decoded checkpoint.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub version: u32,
    pub config: ModelConfig,
    pub epoch: Option<usize>,
    pub params: Vec<(String, Tensor<f32>)>,
    /// `(name, mean, var)` per batch-norm layer.
    pub buffers: Vec<(String, Vec<f32>, Vec<f32>)>,
}

impl Checkpoint {
    pub fn from_model(model: &Model<f32>, epoch: Option<usize>) -> Self {
        let store = model.store();
        Checkpoint {
            version: FORMAT_VERSION,
            config: model.config().clone(),
            epoch,
            params: store
                .params()
                .iter()
                .map(|p| (p.name.clone(), p.value.clone()))
                .collect(),
            buffers: store
                .buffers()
                .iter()
                .map(|b| (b.name.clone(), b.mean.clone(), b.var.clone()))
                .collect(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut payload = Vec::new();
        for (_, t) in &self.params {
            for v in t.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        for (_, mean, var) in &self.buffers {
            for v in mean.iter().chain(var) {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        let text = self.config.canonical_text();
        let mut h = String::new();
        h.push_str(&format!("{}\nversion {}\n", MAGIC, self.version));
        h.push_str(&format!("config-digest {}\n", sha256_hex(text.as_bytes())));
        h.push_str(&format!("payload-digest {}\n", sha256_hex(&payload)));
        if let Some(e) = self.epoch {
            h.push_str(&format!("epoch {}\n", e));
        }
        h.push_str(&format!("config {}\n{}", text.lines().count(), text));
        for (name, t) in &self.params {
            let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
            h.push_str(&format!("param {} {}\n", name, dims.join("x")));
        }
        for (name, mean, _) in &self.buffers {
            h.push_str(&format!("buffer {} {}\n", name, mean.len()));
        }
        h.push_str("end\n");
        let mut out = h.into_bytes();
        out.extend_from_slice(&payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |m: String| Error::Checkpoint(m);
        let mut pos = 0;
        let mut next_line = || -> Result<&str> {
            let rest = &bytes[pos..];
            let nl = rest
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| corrupt("truncated header".into()))?;
            pos += nl + 1;
            std::str::from_utf8(&rest[..nl]).map_err(|_| corrupt("header is not UTF-8".into()))
        };
        if next_line()? != MAGIC {
            return Err(corrupt("not a fasterx checkpoint".into()));
        }
        let version: u32 = next_line()?
            .strip_prefix("version ")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| corrupt("missing version".into()))?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {} (expected {})",
                version, FORMAT_VERSION
            )));
        }
        let config_digest = next_line()?
            .strip_prefix("config-digest ")
            .ok_or_else(|| corrupt("missing config digest".into()))?
            .to_string();
        let payload_digest = next_line()?
            .strip_prefix("payload-digest ")
            .ok_or_else(|| corrupt("missing payload digest".into()))?
            .to_string();
        let mut line = next_line()?;
        let mut epoch = None;
        if let Some(e) = line.strip_prefix("epoch ") {
            epoch = Some(e.parse().map_err(|_| corrupt(format!("bad epoch '{}'", e)))?);
            line = next_line()?;
        }
        let n: usize = line
            .strip_prefix("config ")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| corrupt("missing config block".into()))?;
        let mut text = String::new();
        for _ in 0..n {
            text.push_str(next_line()?);
            text.push('\n');
        }
        if sha256_hex(text.as_bytes()) != config_digest {
            return Err(corrupt("config digest mismatch".into()));
        }
        let config = config_from_text(&text)?;
        let mut shapes = Vec::new();
        let mut buffer_specs = Vec::new();
        loop {
            let line = next_line()?;
            if line == "end" {
                break;
            }
            let mut f = line.split(' ');
            match (f.next(), f.next(), f.next(), f.next()) {
                (Some("param"), Some(name), Some(dims), None) => {
                    let shape = dims
                        .split('x')
                        .map(|d| d.parse::<usize>())
                        .collect::<std::result::Result<Vec<_>, _>>()
                        .map_err(|_| corrupt(format!("bad shape '{}'", dims)))?;
                    shapes.push((name.to_string(), shape));
                }
                (Some("buffer"), Some(name), Some(c), None) => {
                    let c: usize = c.parse().map_err(|_| corrupt(format!("bad channel count '{}'", c)))?;
                    buffer_specs.push((name.to_string(), c));
                }
                _ => return Err(corrupt(format!("bad header line '{}'", line))),
            }
        }
        let payload = &bytes[pos..];
        let expected: usize = shapes.iter().map(|(_, s)| s.iter().product::<usize>()).sum::<usize>()
            + buffer_specs.iter().map(|(_, c)| 2 * c).sum::<usize>();
        if payload.len() != expected * 4 {
            return Err(corrupt(format!(
                "payload holds {} bytes, header describes {}",
                payload.len(),
                expected * 4
            )));
        }
        if sha256_hex(payload) != payload_digest {
            return Err(corrupt("payload digest mismatch".into()));
        }
        let mut values = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]));
        let mut take = |n: usize| -> Vec<f32> { values.by_ref().take(n).collect() };
        let mut params = Vec::with_capacity(shapes.len());
        for (name, shape) in shapes {
            let data = take(shape.iter().product());
            params.push((name, Tensor::from_vec(&shape, data)?));
        }
        let buffers = buffer_specs
            .into_iter()
            .map(|(name, c)| {
                let mean = take(c);
                let var = take(c);
                (name, mean, var)
            })
            .collect();
        Ok(Checkpoint {
            version,
            config,
            epoch,
            params,
            buffers,
        })
    }

    /// Instantiate the stored model.
    pub fn into_model(self) -> Result<Model<f32>> {
        let cfg = self.config.clone();
        self.into_model_with(&cfg)
    }

    /// Instantiate under `cfg`, which must describe the same inference
    /// architecture. Auxiliary weights are dropped when `cfg` disables
    /// distillation; a checkpoint without them cannot serve a distillation
    /// config.
    pub fn into_model_with(self, cfg: &ModelConfig) -> Result<Model<f32>> {
        if architecture_text(cfg) != architecture_text(&self.config) {
            return Err(Error::ConfigMismatch(format!(
                "checkpoint holds a {} {}-head {} model, config asks for a {} {}-head {} model",
                self.config.profile,
                self.config.heads,
                self.config.head.as_str(),
                cfg.profile,
                cfg.heads,
                cfg.head.as_str()
            )));
        }
        let mut model = Model::<f32>::build(cfg, 0)?;
        let store: &mut ParamStore<f32> = model.store_mut();
        if self.params.len() < store.len() || self.buffers.len() < store.buffers().len() {
            return Err(Error::ConfigMismatch(
                "checkpoint lacks tensors the config needs (auxiliary heads?)".into(),
            ));
        }
        if cfg.distill.enabled && self.config.distill != cfg.distill {
            return Err(Error::ConfigMismatch("distillation settings differ".into()));
        }
        for (p, (name, t)) in store.params_mut().iter_mut().zip(self.params) {
            if p.name != name || p.value.shape() != t.shape() {
                return Err(Error::ConfigMismatch(format!(
                    "tensor {} {:?} does not match checkpoint {} {:?}",
                    p.name,
                    p.value.shape(),
                    name,
                    t.shape()
                )));
            }
            p.value = t;
        }
        for (b, (name, mean, var)) in store.buffers_mut().iter_mut().zip(self.buffers) {
            if b.name != name || b.mean.len() != mean.len() {
                return Err(Error::ConfigMismatch(format!("buffer {} does not match checkpoint {}", b.name, name)));
            }
            b.mean = mean;
            b.var = var;
        }
        Ok(model)
    }
}

pub fn save(model: &Model<f32>, path: &Path) -> Result<()> {
    save_with_epoch(model, None, path)
}

pub fn save_with_epoch(model: &Model<f32>, epoch: Option<usize>, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, Checkpoint::from_model(model, epoch).to_bytes())?;
    Ok(())
}

pub fn read(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&fs::read(path)?)
}

pub fn load(path: &Path) -> Result<Model<f32>> {
    read(path)?.into_model()
}

/// Load into an explicit configuration (see [`Checkpoint::into_model_with`]).
pub fn load_into(path: &Path, cfg: &ModelConfig) -> Result<Model<f32>> {
    read(path)?.into_model_with(cfg)
}

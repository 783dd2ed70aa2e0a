//! Trained-model bundle and its on-disk layout.
//!
//! A bundle directory holds `config.json` (model config, parameter layout and
//! the SHA-256 of the weights), `normalizer.json`, `weights.bin` (little-endian
//! f32 in parameter order) and `train_log.csv` (`phase,epoch,metric,value`).

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attributes::{AttributeVector, Normalizer, Space};
use crate::nn::{ParamStore, Tensor};
use crate::phantoms::Volume3D;

use super::gan::GanNet;
use super::glm::GlmNet;
use super::hagan::HaGanNet;
use super::hvae::HvaeNet;
use super::vae::VaeNet;
use super::{tensor_volume, volume_tensor, CounterfactualModel, LatentPayload, LatentState, ModelConfig, ModelError, ModelFamily};

pub const CONFIG_FILE: &str = "config.json";
pub const NORMALIZER_FILE: &str = "normalizer.json";
pub const WEIGHTS_FILE: &str = "weights.bin";
pub const LOG_FILE: &str = "train_log.csv";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRow {
    pub phase: String,
    pub epoch: usize,
    pub metric: String,
    pub value: f64,
}

/// Per-epoch loss means, in the order they were produced.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub rows: Vec<TrainLogRow>,
}

impl TrainLog {
    pub fn push(&mut self, phase: &str, epoch: usize, metric: &str, value: f64) {
        self.rows.push(TrainLogRow { phase: phase.into(), epoch, metric: metric.into(), value });
    }

    /// Values of one metric in epoch order.
    pub fn series(&self, phase: &str, metric: &str) -> Vec<f64> {
        self.rows.iter().filter(|r| r.phase == phase && r.metric == metric).map(|r| r.value).collect()
    }

    pub fn first(&self, phase: &str, metric: &str) -> Option<f64> {
        self.series(phase, metric).first().copied()
    }

    pub fn last(&self, phase: &str, metric: &str) -> Option<f64> {
        self.series(phase, metric).last().copied()
    }

    /// Last value of every `(phase, metric)` pair.
    pub fn final_losses(&self) -> Vec<(String, String, f64)> {
        let mut out: Vec<(String, String, f64)> = Vec::new();
        for r in &self.rows {
            match out.iter_mut().find(|(p, m, _)| *p == r.phase && *m == r.metric) {
                Some(slot) => slot.2 = r.value,
                None => out.push((r.phase.clone(), r.metric.clone(), r.value)),
            }
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("phase,epoch,metric,value\n");
        for r in &self.rows {
            s.push_str(&format!("{},{},{},{:e}\n", r.phase, r.epoch, r.metric, r.value));
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self, String> {
        let mut log = TrainLog::default();
        for (n, line) in text.lines().enumerate().skip(1) {
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 4 {
                return Err(format!("line {}: expected 4 fields", n + 1));
            }
            let epoch = f[1].parse().map_err(|e| format!("line {}: {e}", n + 1))?;
            let value = f[3].parse().map_err(|e| format!("line {}: {e}", n + 1))?;
            log.push(f[0], epoch, f[2], value);
        }
        Ok(log)
    }
}

/// Family-specific network layout; parameters live in the checkpoint's store.
#[derive(Clone, Debug)]
pub enum Network {
    Vae(VaeNet),
    Hvae(HvaeNet),
    Glm(GlmNet),
    Gan(GanNet),
    HaGan(HaGanNet),
}

impl Network {
    /// Registers all parameters in a fresh store, initialized from `config.seed`.
    pub fn build(config: &ModelConfig) -> (Network, ParamStore) {
        let mut store = ParamStore::default();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let net = match config.family {
            ModelFamily::Vae => Network::Vae(VaeNet::build(config, &mut store, &mut rng)),
            ModelFamily::Hvae => Network::Hvae(HvaeNet::build(config, &mut store, &mut rng)),
            ModelFamily::VaeGlm => Network::Glm(GlmNet::build(config, &mut store, &mut rng)),
            ModelFamily::Gan | ModelFamily::GanFt => Network::Gan(GanNet::build(config, &mut store, &mut rng)),
            ModelFamily::HaGan => Network::HaGan(HaGanNet::build(config, &mut store, &mut rng)),
        };
        (net, store)
    }
}

#[derive(Serialize, Deserialize)]
struct ConfigFile {
    model: ModelConfig,
    weights_sha256: String,
    params: Vec<(String, Vec<usize>)>,
    final_losses: Vec<(String, String, f64)>,
}

/// A self-describing trained (or freshly initialized) model.
#[derive(Clone, Debug)]
pub struct ModelCheckpoint {
    pub config: ModelConfig,
    pub normalizer: Normalizer,
    pub params: ParamStore,
    pub log: TrainLog,
    pub(crate) net: Network,
    weights_hash: String,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> ModelError {
    ModelError::Io(format!("{}: {e}", path.display()))
}

impl ModelCheckpoint {
    /// Same architecture and initialization a training run would start from.
    pub fn untrained(config: ModelConfig, normalizer: Normalizer) -> Result<Self, ModelError> {
        config.validate()?;
        let (net, params) = Network::build(&config);
        let mut ckpt = ModelCheckpoint { config, normalizer, params, log: TrainLog::default(), net, weights_hash: String::new() };
        ckpt.refresh_hash();
        Ok(ckpt)
    }

    pub fn family(&self) -> ModelFamily {
        self.config.family
    }

    pub fn weights_hash(&self) -> &str {
        &self.weights_hash
    }

    pub(crate) fn refresh_hash(&mut self) {
        self.weights_hash = sha256_hex(&self.params.to_bytes());
    }

    /// SHA-256 over the parameters whose names start with `prefix` (e.g. `"gen."`).
    pub fn group_hash(&self, prefix: &str) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.params.names.iter().zip(&self.params.tensors) {
            if name.starts_with(prefix) {
                h.update(name.as_bytes());
                for v in &t.data {
                    h.update(v.to_le_bytes());
                }
            }
        }
        hex::encode(h.finalize())
    }

    /// Relabels a finetuned GAN checkpoint.
    pub(crate) fn set_family(&mut self, family: ModelFamily) {
        self.config.family = family;
    }

    pub fn save(&self, dir: &Path) -> Result<(), ModelError> {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        let cfg = ConfigFile {
            model: self.config.clone(),
            weights_sha256: self.weights_hash.clone(),
            params: self.params.names.iter().cloned().zip(self.params.tensors.iter().map(|t| t.shape.clone())).collect(),
            final_losses: self.log.final_losses(),
        };
        let write = |name: &str, bytes: &[u8]| {
            let p = dir.join(name);
            fs::write(&p, bytes).map_err(|e| io_err(&p, e))
        };
        write(WEIGHTS_FILE, &self.params.to_bytes())?;
        write(NORMALIZER_FILE, serde_json::to_string_pretty(&self.normalizer).expect("serializable").as_bytes())?;
        write(LOG_FILE, self.log.to_csv().as_bytes())?;
        write(CONFIG_FILE, serde_json::to_string_pretty(&cfg).expect("serializable").as_bytes())
    }

    pub fn load(dir: &Path) -> Result<Self, ModelError> {
        let read = |name: &str| {
            let p = dir.join(name);
            fs::read(&p).map_err(|e| io_err(&p, e))
        };
        let cfg: ConfigFile = serde_json::from_slice(&read(CONFIG_FILE)?).map_err(|e| io_err(&dir.join(CONFIG_FILE), e))?;
        let normalizer: Normalizer =
            serde_json::from_slice(&read(NORMALIZER_FILE)?).map_err(|e| io_err(&dir.join(NORMALIZER_FILE), e))?;
        let log_text = String::from_utf8(read(LOG_FILE)?).map_err(|e| io_err(&dir.join(LOG_FILE), e))?;
        let log = TrainLog::from_csv(&log_text).map_err(|e| io_err(&dir.join(LOG_FILE), e))?;
        let weights = read(WEIGHTS_FILE)?;
        let hash = sha256_hex(&weights);
        if hash != cfg.weights_sha256 {
            return Err(io_err(&dir.join(WEIGHTS_FILE), "hash does not match config.json"));
        }
        let mut ckpt = ModelCheckpoint::untrained(cfg.model, normalizer)?;
        let layout: Vec<(String, Vec<usize>)> =
            ckpt.params.names.iter().cloned().zip(ckpt.params.tensors.iter().map(|t| t.shape.clone())).collect();
        if layout != cfg.params {
            return Err(io_err(&dir.join(CONFIG_FILE), "parameter layout does not match the model config"));
        }
        ckpt.params.load_bytes(&weights).map_err(|e| io_err(&dir.join(WEIGHTS_FILE), e))?;
        ckpt.log = log;
        ckpt.refresh_hash();
        Ok(ckpt)
    }

    fn check_latent(&self, z: &LatentState) -> Result<(), ModelError> {
        let mismatch = || ModelError::FamilyMismatch { expected: self.name(), got: z.source.clone() };
        if z.source != self.name() {
            return Err(mismatch());
        }
        let ok = match (&self.net, &z.payload) {
            (Network::Vae(n), LatentPayload::Vector(v)) => v.len() == n.latent_len(),
            (Network::Glm(n), LatentPayload::Vector(v)) => v.len() == n.latent_len(),
            (Network::Gan(n), LatentPayload::Vector(v)) => v.len() == n.latent_len(),
            (Network::HaGan(n), LatentPayload::Vector(v)) => v.len() == n.latent_len(),
            (Network::Hvae(n), LatentPayload::Levels(ls)) => {
                let shapes = n.level_shapes();
                ls.len() == 2 && ls.iter().zip(shapes.iter()).all(|(t, s)| &t.shape == s)
            }
            _ => false,
        };
        if ok {
            Ok(())
        } else {
            Err(mismatch())
        }
    }
}

impl CounterfactualModel for ModelCheckpoint {
    fn name(&self) -> String {
        self.config.family.name().to_string()
    }

    fn dims(&self) -> [usize; 3] {
        self.config.dims()
    }

    fn encode(&self, vol: &Volume3D, attrs: &AttributeVector) -> Result<LatentState, ModelError> {
        self.check_dims(vol)?;
        attrs.expect(Space::Normalized)?;
        let x = volume_tensor(vol);
        let p = &self.params;
        let payload = match &self.net {
            Network::Vae(n) => n.encode(p, &x, attrs)?,
            Network::Hvae(n) => n.encode(p, &x, attrs)?,
            Network::Glm(n) => n.encode(p, &x, attrs)?,
            Network::Gan(n) => n.encode(p, &x, attrs)?,
            Network::HaGan(n) => n.encode(p, &x, attrs)?,
        };
        Ok(LatentState { source: self.name(), payload, attrs: *attrs })
    }

    fn decode(&self, z: &LatentState, attrs: &AttributeVector) -> Result<Volume3D, ModelError> {
        self.check_latent(z)?;
        attrs.expect(Space::Normalized)?;
        let p = &self.params;
        let y: Tensor = match (&self.net, &z.payload) {
            (Network::Vae(n), LatentPayload::Vector(v)) => n.decode(p, v, attrs)?,
            (Network::Glm(n), LatentPayload::Vector(v)) => n.decode(p, v, attrs)?,
            (Network::Gan(n), LatentPayload::Vector(v)) => n.decode(p, v, attrs)?,
            (Network::HaGan(n), LatentPayload::Vector(v)) => n.decode(p, v, attrs)?,
            (Network::Hvae(n), LatentPayload::Levels(ls)) => n.decode(p, ls, attrs)?,
            _ => unreachable!("checked by check_latent"),
        };
        Ok(tensor_volume(&y))
    }
}

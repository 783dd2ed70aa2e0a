//! Conditional generative model families behind one abduction/prediction interface.
//!
//! Every family exposes the same pair of operations through
//! [`CounterfactualModel`]: `encode` infers a deterministic latent state from
//! an image and its normalized attributes, `decode` renders an image from a
//! latent state under (possibly intervened) attributes. The engine and the
//! metrics never look past this trait.

mod checkpoint;
mod gan;
mod glm;
mod hagan;
mod hvae;
mod identity;
pub mod nets;
pub mod train;
mod vae;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attributes::{AttributeError, AttributeVector};
use crate::nn::Tensor;
use crate::phantoms::Volume3D;

pub use checkpoint::{ModelCheckpoint, TrainLog, TrainLogRow};
pub use identity::IdentityModel;
pub use train::{finetune_encoder_cyclic, train, TrainSample};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ModelFamily {
    #[serde(rename = "VAE")]
    Vae,
    #[serde(rename = "HVAE")]
    Hvae,
    #[serde(rename = "VAE_GLM")]
    VaeGlm,
    #[serde(rename = "GAN")]
    Gan,
    #[serde(rename = "GAN_FT")]
    GanFt,
    #[serde(rename = "HA_GAN")]
    HaGan,
}

impl ModelFamily {
    pub const ALL: [ModelFamily; 6] = [
        ModelFamily::Vae,
        ModelFamily::Hvae,
        ModelFamily::VaeGlm,
        ModelFamily::Gan,
        ModelFamily::GanFt,
        ModelFamily::HaGan,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelFamily::Vae => "VAE",
            ModelFamily::Hvae => "HVAE",
            ModelFamily::VaeGlm => "VAE_GLM",
            ModelFamily::Gan => "GAN",
            ModelFamily::GanFt => "GAN_FT",
            ModelFamily::HaGan => "HA_GAN",
        }
    }

    /// Label used in report tables.
    pub fn display_name(self) -> &'static str {
        match self {
            ModelFamily::Vae => "VAE",
            ModelFamily::Hvae => "HVAE",
            ModelFamily::VaeGlm => "VAE-GLM",
            ModelFamily::Gan => "GAN",
            ModelFamily::GanFt => "GAN-Finetuned",
            ModelFamily::HaGan => "HA-GAN",
        }
    }

    pub fn default_conditioning(self) -> Conditioning {
        match self {
            ModelFamily::VaeGlm => Conditioning::Glm,
            _ => Conditioning::ConcatEmbedding,
        }
    }
}

impl std::fmt::Display for ModelFamily {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for ModelFamily {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let key = s.to_ascii_uppercase().replace('-', "_");
        ModelFamily::ALL
            .into_iter()
            .find(|f| f.name() == key || (key == "GAN_FINETUNED" && *f == ModelFamily::GanFt))
            .ok_or_else(|| format!("unknown model family `{s}`"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Conditioning {
    /// Fourier embedding concatenated to the decoder input.
    ConcatEmbedding,
    /// Additive linear attribute term in latent space.
    Glm,
}

/// Optimisation settings. Epoch counts are per training phase.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f32,
    pub epochs: usize,
    pub batch: usize,
    /// KL weight for the VAE families.
    pub kl_weight: f32,
    /// Weight of the attribute-regression term for the GAN families.
    pub attr_weight: f32,
    /// Weight of the adversarial term in the generator loss (GAN families).
    pub adv_weight: f32,
    /// Weight of the reconstruction term through which the encoder trains
    /// jointly with the generator (GAN families); 0 leaves the generator
    /// purely adversarial.
    pub recon_weight: f32,
    /// Epochs of post-hoc encoder training for the GAN families.
    pub encoder_epochs: usize,
    /// Epochs of cyclic encoder finetuning (GAN_FT only).
    pub finetune_epochs: usize,
    /// Epochs of the stage-2 upsampler (HA_GAN only).
    pub upsampler_epochs: usize,
    /// Each phase's step size decays on a cosine to `lr · final_lr_frac`.
    pub final_lr_frac: f32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            epochs: 20,
            batch: 8,
            kl_weight: 1e-4,
            attr_weight: 1.0,
            adv_weight: 0.05,
            recon_weight: 1.0,
            encoder_epochs: 10,
            finetune_epochs: 5,
            upsampler_epochs: 10,
            final_lr_frac: 0.05,
        }
    }
}

impl TrainConfig {
    /// Defaults sized so the six-family suite at 32³ on 200 subjects (three
    /// scans each) trains within an hour on one CPU core.
    pub fn for_family(family: ModelFamily) -> Self {
        let gan = TrainConfig {
            lr: 1e-3,
            epochs: 5,
            batch: 1,
            recon_weight: 5.0,
            encoder_epochs: 2,
            finetune_epochs: 2,
            upsampler_epochs: 5,
            ..TrainConfig::default()
        };
        match family {
            ModelFamily::Vae | ModelFamily::VaeGlm | ModelFamily::Hvae => {
                TrainConfig { lr: 2e-3, epochs: 8, batch: 1, ..TrainConfig::default() }
            }
            ModelFamily::Gan | ModelFamily::GanFt => gan,
            ModelFamily::HaGan => TrainConfig { epochs: 10, ..gan },
        }
    }
}

/// Missing fields take the family's defaults from [`ModelConfig::for_family`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PartialModelConfig")]
pub struct ModelConfig {
    pub family: ModelFamily,
    /// Cubic input edge length; a multiple of 8, at least 16.
    pub resolution: usize,
    /// One entry for single-latent families; per level (coarse to fine) for HVAE.
    pub latent_dims: Vec<usize>,
    /// Encoder widths for the three stride-2 stages.
    pub enc_channels: Vec<usize>,
    /// Decoder widths from the coarsest grid to half resolution; the head
    /// reaches full resolution by a sub-voxel shuffle.
    pub dec_channels: Vec<usize>,
    pub bands: usize,
    pub conditioning: Conditioning,
    /// Stage-1 edge length for HA_GAN.
    pub low_res: usize,
    pub train: TrainConfig,
    pub seed: u64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PartialModelConfig {
    family: ModelFamily,
    resolution: Option<usize>,
    latent_dims: Option<Vec<usize>>,
    enc_channels: Option<Vec<usize>>,
    dec_channels: Option<Vec<usize>>,
    bands: Option<usize>,
    conditioning: Option<Conditioning>,
    low_res: Option<usize>,
    /// Keys given here override the family's training defaults one by one.
    train: Option<serde_json::Map<String, serde_json::Value>>,
    seed: Option<u64>,
}

impl TryFrom<PartialModelConfig> for ModelConfig {
    type Error = String;

    fn try_from(p: PartialModelConfig) -> Result<Self, String> {
        let d = ModelConfig::for_family(p.family, p.resolution.unwrap_or(crate::phantoms::DEFAULT_RES));
        let train = match p.train {
            None => d.train.clone(),
            Some(over) => {
                let serde_json::Value::Object(mut base) = serde_json::to_value(&d.train).map_err(|e| e.to_string())?
                else {
                    unreachable!("TrainConfig serializes to an object")
                };
                base.extend(over);
                serde_json::from_value(serde_json::Value::Object(base)).map_err(|e| format!("train: {e}"))?
            }
        };
        Ok(ModelConfig {
            latent_dims: p.latent_dims.unwrap_or(d.latent_dims.clone()),
            enc_channels: p.enc_channels.unwrap_or(d.enc_channels.clone()),
            dec_channels: p.dec_channels.unwrap_or(d.dec_channels.clone()),
            bands: p.bands.unwrap_or(d.bands),
            conditioning: p.conditioning.unwrap_or(d.conditioning),
            low_res: p.low_res.unwrap_or(d.low_res),
            train,
            seed: p.seed.unwrap_or(d.seed),
            ..d
        })
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::for_family(ModelFamily::Vae, 32)
    }
}

impl ModelConfig {
    pub fn for_family(family: ModelFamily, resolution: usize) -> Self {
        let latent_dims = match family {
            ModelFamily::Hvae => vec![2, 1],
            _ => vec![16],
        };
        ModelConfig {
            family,
            resolution,
            latent_dims,
            enc_channels: vec![8, 16, 32],
            dec_channels: vec![32, 16, 16],
            bands: crate::attributes::DEFAULT_BANDS,
            conditioning: family.default_conditioning(),
            low_res: resolution / 2,
            train: TrainConfig::for_family(family),
            seed: 0,
        }
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.resolution; 3]
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dims[0]
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if self.resolution < 16 || self.resolution % 8 != 0 {
            return bad(format!("resolution {} must be a multiple of 8 and at least 16", self.resolution));
        }
        if self.latent_dims.is_empty() || self.latent_dims.contains(&0) {
            return bad("latent_dims must be non-empty and positive".into());
        }
        if self.enc_channels.len() != 3 || self.enc_channels.contains(&0) {
            return bad("enc_channels needs three positive widths".into());
        }
        if !(2..=4).contains(&self.dec_channels.len()) || self.dec_channels.contains(&0) {
            return bad("dec_channels needs two to four positive widths".into());
        }
        let out_res = if self.family == ModelFamily::HaGan { self.low_res } else { self.resolution };
        if out_res % (1 << self.dec_channels.len()) != 0 {
            return bad(format!("decoder output {out_res} is not divisible by 2^{}", self.dec_channels.len()));
        }
        if self.bands == 0 {
            return bad("bands must be at least 1".into());
        }
        if self.train.batch == 0 || !(self.train.lr > 0.0) {
            return bad("batch and lr must be positive".into());
        }
        let t = &self.train;
        if [t.kl_weight, t.attr_weight, t.adv_weight, t.recon_weight].iter().any(|w| !(*w >= 0.0)) {
            return bad("loss weights must be non-negative".into());
        }
        if !(self.train.final_lr_frac > 0.0 && self.train.final_lr_frac <= 1.0) {
            return bad("final_lr_frac must lie in (0, 1]".into());
        }
        match self.family {
            ModelFamily::Hvae if self.latent_dims.len() < 2 => {
                return bad("HVAE needs at least two latent levels".into());
            }
            ModelFamily::Hvae if self.latent_dims.len() > 2 => {
                return bad("HVAE supports exactly two latent levels at this scale".into());
            }
            ModelFamily::HaGan if !(self.low_res < self.resolution) => {
                return bad(format!("HA_GAN low_res {} must be below resolution {}", self.low_res, self.resolution));
            }
            ModelFamily::HaGan if self.low_res * 2 != self.resolution => {
                return bad("HA_GAN stage 1 runs at exactly half resolution".into());
            }
            _ => {}
        }
        let expected = self.family.default_conditioning();
        if self.conditioning != expected {
            return bad(format!("{} uses {:?} conditioning", self.family, expected));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("volume dims {got:?} do not match model resolution {expected:?}")]
    ShapeMismatch { expected: [usize; 3], got: [usize; 3] },
    #[error("latent state from {got} cannot be decoded by {expected}")]
    FamilyMismatch { expected: String, got: String },
    #[error("training diverged: non-finite loss in {phase} epoch {epoch}")]
    Divergence { phase: String, epoch: usize },
    #[error("training dataset is empty")]
    EmptyDataset,
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Attribute(#[from] AttributeError),
    #[error("checkpoint io: {0}")]
    Io(String),
}

/// Family-specific latent payload.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum LatentPayload {
    Vector(Vec<f32>),
    /// One `[C, D, H, W]` grid per level, coarse to fine.
    Levels(Vec<Tensor>),
    /// Used by the identity double: the image itself.
    Image(Vec<f32>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentState {
    /// Name of the model that produced this state.
    pub source: String,
    pub payload: LatentPayload,
    /// Factual attributes used at abduction.
    pub attrs: AttributeVector,
}

impl LatentState {
    pub fn is_finite(&self) -> bool {
        match &self.payload {
            LatentPayload::Vector(v) | LatentPayload::Image(v) => v.iter().all(|x| x.is_finite()),
            LatentPayload::Levels(ls) => ls.iter().all(Tensor::is_finite),
        }
    }

    /// Flattened payload, for similarity checks.
    pub fn flat(&self) -> Vec<f32> {
        match &self.payload {
            LatentPayload::Vector(v) | LatentPayload::Image(v) => v.clone(),
            LatentPayload::Levels(ls) => ls.iter().flat_map(|t| t.data.iter().copied()).collect(),
        }
    }
}

/// Abduction (`encode`) and prediction (`decode`) for one trained model.
pub trait CounterfactualModel: Sync {
    fn name(&self) -> String;

    fn dims(&self) -> [usize; 3];

    fn encode(&self, vol: &Volume3D, attrs: &AttributeVector) -> Result<LatentState, ModelError>;

    fn decode(&self, z: &LatentState, attrs: &AttributeVector) -> Result<Volume3D, ModelError>;

    fn check_dims(&self, vol: &Volume3D) -> Result<(), ModelError> {
        if vol.dims() == self.dims() {
            Ok(())
        } else {
            Err(ModelError::ShapeMismatch { expected: self.dims(), got: vol.dims() })
        }
    }
}

/// `[1, D, H, W]` tensor view of a volume.
pub fn volume_tensor(vol: &Volume3D) -> Tensor {
    let [d, h, w] = vol.dims();
    Tensor::new(vec![1, d, h, w], vol.data().to_vec())
}

/// Clamps a `[1, D, H, W]` tensor into a volume.
pub fn tensor_volume(t: &Tensor) -> Volume3D {
    let dims = [t.shape[1], t.shape[2], t.shape[3]];
    Volume3D::from_vec(dims, t.data.clone()).expect("tensor shape matches dims")
}

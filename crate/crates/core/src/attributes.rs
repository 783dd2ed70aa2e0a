//! Parent attributes of the image node: region volumes, their normalization,
//! do-interventions and Fourier embeddings used for conditioning.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::phantoms::RawVolumes;
use crate::region::{RegionId, RegionMap};

/// Normalized values are clamped to `±CLAMP_LIMIT`.
pub const CLAMP_LIMIT: f64 = 1.5;
pub const DEFAULT_BANDS: usize = 4;

#[derive(Debug, Error, PartialEq)]
pub enum AttributeError {
    #[error("region {0} has a degenerate range (min = max) in the training data")]
    DegenerateRange(RegionId),
    #[error("expected attributes in {expected:?} space, got {got:?}")]
    WrongSpace { expected: Space, got: Space },
    #[error("fourier embedding needs at least one band")]
    NoBands,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Space {
    /// Voxel counts.
    Raw,
    /// Min-max mapped onto `[-1, 1]` by a fitted [`Normalizer`].
    Normalized,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributeVector {
    pub values: RegionMap<f64>,
    pub space: Space,
}

impl AttributeVector {
    pub fn raw(volumes: &RawVolumes) -> Self {
        AttributeVector { values: volumes.map(|_, &v| v as f64), space: Space::Raw }
    }

    pub fn normalized(values: RegionMap<f64>) -> Self {
        AttributeVector { values, space: Space::Normalized }
    }

    pub fn zeros() -> Self {
        AttributeVector::normalized(RegionMap([0.0; 7]))
    }

    pub fn get(&self, r: RegionId) -> f64 {
        self.values[r]
    }

    pub fn as_f32(&self) -> [f32; 7] {
        self.values.0.map(|v| v as f32)
    }

    pub fn expect(&self, space: Space) -> Result<(), AttributeError> {
        if self.space == space {
            Ok(())
        } else {
            Err(AttributeError::WrongSpace { expected: space, got: self.space })
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Range {
    pub min: f64,
    pub max: f64,
}

/// Per-region affine map sending the training `[min, max]` onto `[-1, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Normalizer {
    pub ranges: RegionMap<Range>,
}

/// Fits the per-region min/max over training subjects.
pub fn fit_normalizer(train_volumes: &[RawVolumes]) -> Result<Normalizer, AttributeError> {
    let mut ranges = RegionMap([Range { min: f64::INFINITY, max: f64::NEG_INFINITY }; 7]);
    for v in train_volumes {
        for (r, &count) in v.iter() {
            let range = &mut ranges[r];
            range.min = range.min.min(count as f64);
            range.max = range.max.max(count as f64);
        }
    }
    for (r, range) in ranges.iter() {
        if !(range.max > range.min) {
            return Err(AttributeError::DegenerateRange(r));
        }
    }
    Ok(Normalizer { ranges })
}

impl Normalizer {
    pub fn normalize_value(&self, r: RegionId, raw: f64) -> (f64, bool) {
        let Range { min, max } = self.ranges[r];
        let v = 2.0 * (raw - min) / (max - min) - 1.0;
        if v.abs() > CLAMP_LIMIT {
            (v.clamp(-CLAMP_LIMIT, CLAMP_LIMIT), true)
        } else {
            (v, false)
        }
    }

    pub fn denormalize_value(&self, r: RegionId, v: f64) -> f64 {
        let Range { min, max } = self.ranges[r];
        (v + 1.0) * (max - min) / 2.0 + min
    }

    /// Maps raw attributes to normalized space. The flag is set when any
    /// region was clamped.
    pub fn normalize(&self, attrs: &AttributeVector) -> Result<(AttributeVector, bool), AttributeError> {
        attrs.expect(Space::Raw)?;
        let mut clamped = false;
        let values = attrs.values.map(|r, &raw| {
            let (v, c) = self.normalize_value(r, raw);
            clamped |= c;
            v
        });
        Ok((AttributeVector::normalized(values), clamped))
    }

    /// Shorthand for normalizing measured voxel counts; ignores the clamp flag.
    pub fn normalize_volumes(&self, volumes: &RawVolumes) -> AttributeVector {
        self.normalize(&AttributeVector::raw(volumes)).expect("raw space").0
    }

    pub fn denormalize(&self, attrs: &AttributeVector) -> Result<AttributeVector, AttributeError> {
        attrs.expect(Space::Normalized)?;
        Ok(AttributeVector { values: attrs.values.map(|r, &v| self.denormalize_value(r, v)), space: Space::Raw })
    }
}

/// Single-attribute do-intervention in normalized space.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intervention {
    pub target: RegionId,
    pub value: f64,
}

impl Intervention {
    pub fn new(target: RegionId, value: f64) -> Self {
        Intervention { target, value }
    }
}

/// Returns a copy of `attrs` with the target overwritten.
pub fn apply_do(attrs: &AttributeVector, iv: &Intervention) -> AttributeVector {
    let mut out = *attrs;
    out.values[iv.target] = iv.value;
    out
}

/// Draws the intervention value uniformly from `[-1, 1]`.
pub fn sample_intervention<R: Rng + ?Sized>(_attrs: &AttributeVector, target: RegionId, rng: &mut R) -> Intervention {
    Intervention { target, value: rng.random_range(-1.0..=1.0) }
}

/// Fixed-length Fourier embedding of the normalized attributes.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingVector(pub Vec<f64>);

impl EmbeddingVector {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.0.iter().map(|&v| v as f32).collect()
    }
}

pub fn embedding_len(bands: usize) -> usize {
    2 * bands * RegionId::COUNT
}

/// `(sin(2^k π v_r), cos(2^k π v_r))` for each region `r` and band `k < bands`.
pub fn fourier_embed(attrs: &AttributeVector, bands: usize) -> Result<EmbeddingVector, AttributeError> {
    attrs.expect(Space::Normalized)?;
    if bands == 0 {
        return Err(AttributeError::NoBands);
    }
    let mut out = Vec::with_capacity(embedding_len(bands));
    for &v in attrs.values.values() {
        for k in 0..bands {
            let arg = (1u64 << k) as f64 * std::f64::consts::PI * v;
            out.push(arg.sin());
            out.push(arg.cos());
        }
    }
    Ok(EmbeddingVector(out))
}

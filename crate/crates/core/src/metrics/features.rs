//! Frozen random-weight 3D convolutional embedding used for realism scores.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::MetricError;
use crate::models::volume_tensor;
use crate::nn::layers::conv_act;
use crate::nn::{Conv3d, Graph, ParamStore};
use crate::phantoms::Volume3D;

pub const DEFAULT_FEATURE_DIM: usize = 64;
pub const DEFAULT_FEATURE_SEED: u64 = 0x00F1_D5EE;

/// Four stride-2 conv blocks followed by global average pooling.
#[derive(Clone, Debug)]
pub struct FeatureExtractor {
    store: ParamStore,
    convs: Vec<Conv3d>,
    dims: [usize; 3],
    dim: usize,
}

impl FeatureExtractor {
    pub fn new(dims: [usize; 3], dim: usize, seed: u64) -> Result<Self, MetricError> {
        if dims.iter().any(|&d| d < 16 || d % 16 != 0) || dim == 0 {
            return Err(MetricError::InvalidParams(format!("feature extractor needs dims divisible by 16, got {dims:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::default();
        let widths = [8, 16, 32, dim];
        let mut cin = 1;
        let convs = widths
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let conv = Conv3d::new(&mut store, &format!("fx.conv{i}"), cin, c, 2, &mut rng);
                cin = c;
                conv
            })
            .collect();
        Ok(FeatureExtractor { store, convs, dims, dim })
    }

    pub fn with_defaults(dims: [usize; 3]) -> Result<Self, MetricError> {
        Self::new(dims, DEFAULT_FEATURE_DIM, DEFAULT_FEATURE_SEED)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn extract(&self, vol: &Volume3D) -> Result<Vec<f64>, MetricError> {
        if vol.dims() != self.dims {
            return Err(MetricError::ShapeMismatch { a: vol.dims(), b: self.dims });
        }
        let mut g = Graph::new(&self.store);
        let mut h = g.input(volume_tensor(vol));
        for c in &self.convs {
            h = conv_act(&mut g, c, h);
        }
        let t = g.value(h);
        let per = t.len() / self.dim;
        Ok(t.data.chunks(per).map(|c| c.iter().map(|&v| v as f64).sum::<f64>() / per as f64).collect())
    }
}

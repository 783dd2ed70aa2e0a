//! Test double whose latent state is the image itself.

use crate::attributes::AttributeVector;
use crate::phantoms::Volume3D;

use super::{CounterfactualModel, LatentPayload, LatentState, ModelError};

pub const IDENTITY_NAME: &str = "identity";

/// `decode(encode(x, a), a') == x` for every `a'`: a perfect but inert model.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct IdentityModel {
    dims: [usize; 3],
}

impl IdentityModel {
    pub fn new(dims: [usize; 3]) -> Self {
        IdentityModel { dims }
    }
}

impl CounterfactualModel for IdentityModel {
    fn name(&self) -> String {
        IDENTITY_NAME.to_string()
    }

    fn dims(&self) -> [usize; 3] {
        self.dims
    }

    fn encode(&self, vol: &Volume3D, attrs: &AttributeVector) -> Result<LatentState, ModelError> {
        self.check_dims(vol)?;
        Ok(LatentState { source: self.name(), payload: LatentPayload::Image(vol.data().to_vec()), attrs: *attrs })
    }

    fn decode(&self, z: &LatentState, _attrs: &AttributeVector) -> Result<Volume3D, ModelError> {
        match &z.payload {
            LatentPayload::Image(data) => Volume3D::from_vec(self.dims, data.clone())
                .ok_or(ModelError::ShapeMismatch { expected: self.dims, got: [data.len(), 1, 1] }),
            _ => Err(ModelError::FamilyMismatch { expected: self.name(), got: z.source.clone() }),
        }
    }
}

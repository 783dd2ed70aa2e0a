//! Abduction, action and prediction.
//!
//! Every pass re-encodes the image it is given, so repeated passes expose
//! drift instead of replaying a cached latent.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attributes::{apply_do, sample_intervention, AttributeVector, Intervention, Normalizer};
use crate::models::{CounterfactualModel, ModelError};
use crate::phantoms::oracle::{oracle_segment, region_volumes};
use crate::phantoms::store::{read_volume, write_volume, StoreError};
use crate::phantoms::Volume3D;
use crate::region::RegionId;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("a chain needs at least one pass")]
    NoPasses,
    #[error("trace io: {0}")]
    Store(#[from] StoreError),
    #[error("trace meta: {0}")]
    Meta(String),
}

/// One counterfactual query; `intervention: None` is the null intervention.
#[derive(Clone, Copy)]
pub struct CounterfactualRequest<'a> {
    pub model: &'a dyn CounterfactualModel,
    pub volume: &'a Volume3D,
    pub attrs: &'a AttributeVector,
    pub intervention: Option<Intervention>,
}

/// `decode(encode(x, a), do(a))`.
pub fn counterfactual(req: &CounterfactualRequest) -> Result<Volume3D, ModelError> {
    let z = req.model.encode(req.volume, req.attrs)?;
    let target = match &req.intervention {
        Some(iv) => apply_do(req.attrs, iv),
        None => *req.attrs,
    };
    req.model.decode(&z, &target)
}

/// `k` successive null passes; entry `i` is the image after `i + 1` passes.
pub fn null_pass_chain(
    model: &dyn CounterfactualModel,
    vol: &Volume3D,
    attrs: &AttributeVector,
    k: usize,
) -> Result<Vec<Volume3D>, EngineError> {
    if k == 0 {
        return Err(EngineError::NoPasses);
    }
    let mut out: Vec<Volume3D> = Vec::with_capacity(k);
    for _ in 0..k {
        let current = out.last().unwrap_or(vol);
        let next = counterfactual(&CounterfactualRequest { model, volume: current, attrs, intervention: None })?;
        out.push(next);
    }
    Ok(out)
}

/// How the non-target attributes are set for passes after the first.
#[derive(Clone, Debug, Default)]
pub enum NonTargetPolicy {
    /// Keep the factual values.
    #[default]
    HeldFactual,
    /// Re-measure them from the current image with the oracle segmenter.
    Remeasured(Normalizer),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CycleStep {
    pub intervention: Intervention,
    /// Attributes the image was decoded under.
    pub attrs: AttributeVector,
    #[serde(skip)]
    pub volume: Option<Volume3D>,
}

/// Forward/reverse passes of a reversibility run, two steps per cycle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CycleTrace {
    pub target: RegionId,
    pub seed: u64,
    pub dims: [usize; 3],
    pub factual_attrs: AttributeVector,
    pub steps: Vec<CycleStep>,
}

impl CycleTrace {
    pub fn cycles(&self) -> usize {
        self.steps.len() / 2
    }

    /// Image after `c` complete cycles (1-based).
    pub fn after_cycle(&self, c: usize) -> &Volume3D {
        self.steps[2 * c - 1].volume.as_ref().expect("trace volumes loaded")
    }

    pub fn final_volume(&self) -> &Volume3D {
        self.after_cycle(self.cycles())
    }

    pub fn final_attrs(&self) -> &AttributeVector {
        &self.steps.last().expect("non-empty trace").attrs
    }

    /// `trace.json` plus one `step_XX.f32` per pass.
    pub fn save(&self, dir: &Path) -> Result<(), EngineError> {
        std::fs::create_dir_all(dir).map_err(|e| EngineError::Meta(e.to_string()))?;
        for (i, s) in self.steps.iter().enumerate() {
            if let Some(v) = &s.volume {
                write_volume(&dir.join(format!("step_{i:02}.f32")), v)?;
            }
        }
        let json = serde_json::to_string_pretty(self).map_err(|e| EngineError::Meta(e.to_string()))?;
        std::fs::write(dir.join("trace.json"), json).map_err(|e| EngineError::Meta(e.to_string()))
    }

    pub fn load(dir: &Path) -> Result<Self, EngineError> {
        let text = std::fs::read_to_string(dir.join("trace.json")).map_err(|e| EngineError::Meta(e.to_string()))?;
        let mut t: CycleTrace = serde_json::from_str(&text).map_err(|e| EngineError::Meta(e.to_string()))?;
        for (i, s) in t.steps.iter_mut().enumerate() {
            s.volume = Some(read_volume(&dir.join(format!("step_{i:02}.f32")), t.dims)?);
        }
        Ok(t)
    }
}

/// Each cycle sets `target` to a value drawn uniformly from `[-1, 1]`, then
/// back to its factual value; the image is re-encoded before every pass.
pub fn reversibility_chain(
    model: &dyn CounterfactualModel,
    vol: &Volume3D,
    attrs: &AttributeVector,
    target: RegionId,
    cycles: usize,
    seed: u64,
    policy: &NonTargetPolicy,
) -> Result<CycleTrace, EngineError> {
    if cycles == 0 {
        return Err(EngineError::NoPasses);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let original = Intervention::new(target, attrs.get(target));
    let mut steps: Vec<CycleStep> = Vec::with_capacity(2 * cycles);
    let mut current = vol.clone();
    let mut current_attrs = *attrs;
    for _ in 0..cycles {
        let forward = sample_intervention(&current_attrs, target, &mut rng);
        for iv in [forward, original] {
            let base = match policy {
                NonTargetPolicy::HeldFactual => *attrs,
                NonTargetPolicy::Remeasured(norm) if !steps.is_empty() => {
                    norm.normalize_volumes(&region_volumes(&oracle_segment(&current)))
                }
                NonTargetPolicy::Remeasured(_) => *attrs,
            };
            let next_attrs = apply_do(&base, &iv);
            let z = model.encode(&current, &current_attrs)?;
            let next = model.decode(&z, &next_attrs)?;
            steps.push(CycleStep { intervention: iv, attrs: next_attrs, volume: Some(next.clone()) });
            current = next;
            current_attrs = next_attrs;
        }
    }
    Ok(CycleTrace { target, seed, dims: vol.dims(), factual_attrs: *attrs, steps })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::IdentityModel;
    use crate::phantoms::{render_phantom, sample_subject, CohortId, RenderConfig};

    fn phantom() -> Volume3D {
        render_phantom(&sample_subject(CohortId::A, 3), [16; 3], &RenderConfig::default()).unwrap().0
    }

    #[test]
    fn identity_null_chain_is_exact() {
        let m = IdentityModel::new([16; 3]);
        let x = phantom();
        let a = AttributeVector::zeros();
        let chain = null_pass_chain(&m, &x, &a, 10).unwrap();
        assert_eq!(chain.len(), 10);
        assert!(chain.iter().all(|v| v == &x));
        assert!(matches!(null_pass_chain(&m, &x, &a, 0), Err(EngineError::NoPasses)));
    }

    #[test]
    fn reversibility_structure_and_final_attrs() {
        let m = IdentityModel::new([16; 3]);
        let x = phantom();
        let mut a = AttributeVector::zeros();
        a.values[RegionId::Ven] = 0.37;
        a.values[RegionId::Fro] = -0.2;
        for cycles in [1, 3] {
            let t = reversibility_chain(&m, &x, &a, RegionId::Ven, cycles, 9, &NonTargetPolicy::HeldFactual).unwrap();
            assert_eq!(t.steps.len(), 2 * cycles);
            assert_eq!(t.final_attrs(), &a);
            assert_eq!(t.final_volume(), &x);
            for pair in t.steps.chunks(2) {
                assert_eq!(pair[1].intervention.value, 0.37);
                assert!((-1.0..=1.0).contains(&pair[0].intervention.value));
            }
        }
        let t1 = reversibility_chain(&m, &x, &a, RegionId::Ven, 3, 9, &NonTargetPolicy::HeldFactual).unwrap();
        let t2 = reversibility_chain(&m, &x, &a, RegionId::Ven, 3, 9, &NonTargetPolicy::HeldFactual).unwrap();
        assert_eq!(t1, t2);
    }

    #[test]
    fn do_to_current_value_equals_null() {
        let m = IdentityModel::new([16; 3]);
        let x = phantom();
        let a = AttributeVector::zeros();
        let null = counterfactual(&CounterfactualRequest { model: &m, volume: &x, attrs: &a, intervention: None }).unwrap();
        let same = counterfactual(&CounterfactualRequest {
            model: &m,
            volume: &x,
            attrs: &a,
            intervention: Some(Intervention::new(RegionId::Ven, a.get(RegionId::Ven))),
        })
        .unwrap();
        assert_eq!(null, same);
    }

    #[test]
    fn trace_round_trips_through_disk() {
        let m = IdentityModel::new([16; 3]);
        let x = phantom();
        let a = AttributeVector::zeros();
        let t = reversibility_chain(&m, &x, &a, RegionId::Occ, 1, 2, &NonTargetPolicy::HeldFactual).unwrap();
        let dir = tempfile::tempdir().unwrap();
        t.save(dir.path()).unwrap();
        assert_eq!(CycleTrace::load(dir.path()).unwrap(), t);
    }
}

//! The six evaluation axes and the distance machinery under them.
//!
//! Dataset-level scores fan out per subject and reduce in `subject_id`
//! order. Random intervention values are seeded from the subject id and the
//! target region, so scores do not depend on item order or worker count.

pub mod features;
pub mod frechet;
pub mod ssim;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attributes::{apply_do, sample_intervention, AttributeVector, Normalizer};
use crate::engine::{null_pass_chain, reversibility_chain, EngineError, NonTargetPolicy};
use crate::exec::Exec;
use crate::models::train::mix;
use crate::models::{CounterfactualModel, ModelError};
use crate::phantoms::oracle::{oracle_segment, region_volumes};
use crate::phantoms::Volume3D;
use crate::region::{RegionId, RegionMap};

pub use features::FeatureExtractor;
pub use frechet::{frechet_distance, sqrtm_psd};
pub use ssim::{l1_distance, ssim3d, SsimParams};

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("volume dims differ: {a:?} vs {b:?}")]
    ShapeMismatch { a: [usize; 3], b: [usize; 3] },
    #[error("volume {dims:?} smaller than the {window}-voxel SSIM window")]
    TooSmall { dims: [usize; 3], window: usize },
    #[error("need at least 2 samples for a covariance, got {0}")]
    InsufficientSamples(usize),
    #[error("matrix square root: eigenvalue {0} is too negative to clip")]
    NegativeEigenvalue(f64),
    #[error("invalid metric parameters: {0}")]
    InvalidParams(String),
    #[error("empty evaluation set")]
    EmptySet,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Engine(#[from] EngineError),
}

/// One evaluation scan.
#[derive(Clone, Debug)]
pub struct EvalItem {
    pub subject_id: String,
    pub volume: Volume3D,
    /// Ground-truth attributes, normalized with the training normalizer.
    pub attrs: AttributeVector,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    Composition,
    Reversibility,
    Realism,
    Effectiveness,
    Minimality,
    Generalizability,
}

impl Axis {
    pub const ALL: [Axis; 6] =
        [Axis::Composition, Axis::Reversibility, Axis::Realism, Axis::Effectiveness, Axis::Minimality, Axis::Generalizability];

    pub fn name(self) -> &'static str {
        match self {
            Axis::Composition => "composition",
            Axis::Reversibility => "reversibility",
            Axis::Realism => "realism",
            Axis::Effectiveness => "effectiveness",
            Axis::Minimality => "minimality",
            Axis::Generalizability => "generalizability",
        }
    }
}

impl std::str::FromStr for Axis {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Axis::ALL.into_iter().find(|a| a.name() == s.to_ascii_lowercase()).ok_or_else(|| format!("unknown axis `{s}`"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PassScore {
    pub passes: usize,
    pub l1: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CycleScore {
    pub cycles: usize,
    pub l1: f64,
}

/// Target region → measured region → MAE; `None` on the diagonal.
pub type MinimalityMatrix = RegionMap<RegionMap<Option<f64>>>;

/// All axes for one model; an axis is `None` until evaluated.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelReport {
    pub family: String,
    pub composition: Option<Vec<PassScore>>,
    pub reversibility: Option<Vec<CycleScore>>,
    pub realism_fid: Option<f64>,
    pub effectiveness: Option<RegionMap<f64>>,
    pub minimality: Option<MinimalityMatrix>,
    pub generalizability: Option<RegionMap<f64>>,
}

impl ModelReport {
    pub fn new(family: impl Into<String>) -> Self {
        ModelReport { family: family.into(), ..Default::default() }
    }

    pub fn composition_at(&self, passes: usize) -> Option<&PassScore> {
        self.composition.as_ref()?.iter().find(|p| p.passes == passes)
    }

    pub fn reversibility_at(&self, cycles: usize) -> Option<f64> {
        self.reversibility.as_ref()?.iter().find(|c| c.cycles == cycles).map(|c| c.l1)
    }

    /// Mean of the off-diagonal minimality entries.
    pub fn mean_minimality(&self) -> Option<f64> {
        let m = self.minimality.as_ref()?;
        let vals: Vec<f64> = m.values().flat_map(|row| row.values().flatten().copied()).collect();
        Some(vals.iter().sum::<f64>() / vals.len() as f64)
    }

    pub fn mean_effectiveness(&self) -> Option<f64> {
        self.effectiveness.as_ref().map(|e| e.values().sum::<f64>() / RegionId::COUNT as f64)
    }

    /// Every populated entry is finite and within its range.
    pub fn is_valid(&self) -> bool {
        let fin = |v: f64| v.is_finite();
        let comp = self.composition.iter().flatten().all(|p| fin(p.l1) && p.l1 >= 0.0 && (-1.0..=1.0 + 1e-9).contains(&p.ssim));
        let rev = self.reversibility.iter().flatten().all(|c| fin(c.l1) && c.l1 >= 0.0);
        let fid = self.realism_fid.is_none_or(|f| fin(f) && f >= -1e-6);
        let mae = |m: &Option<RegionMap<f64>>| m.iter().all(|m| m.values().all(|&v| fin(v) && v >= 0.0));
        let mini = self.minimality.iter().all(|m| m.values().all(|r| r.values().flatten().all(|&v| fin(v) && v >= 0.0)));
        comp && rev && fid && mae(&self.effectiveness) && mae(&self.generalizability) && mini
    }
}

fn sorted(items: &[EvalItem]) -> Result<Vec<&EvalItem>, MetricError> {
    if items.is_empty() {
        return Err(MetricError::EmptySet);
    }
    let mut v: Vec<&EvalItem> = items.iter().collect();
    v.sort_by(|a, b| a.subject_id.cmp(&b.subject_id));
    Ok(v)
}

/// Stable per-(subject, stream) seed.
pub fn item_seed(seed: u64, subject_id: &str, stream: u64) -> u64 {
    let h = subject_id.bytes().fold(mix(seed, 0x1D), |acc, b| mix(acc, b as u64));
    mix(h, stream)
}

fn mean(v: impl IntoIterator<Item = f64>) -> f64 {
    let (s, n) = v.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

/// l1 and SSIM between each factual image and its null-pass chain, at each
/// requested pass count (one chain per subject, read at every count).
pub fn composition_score(
    model: &dyn CounterfactualModel,
    items: &[EvalItem],
    passes: &[usize],
    params: &SsimParams,
    exec: Exec,
) -> Result<Vec<PassScore>, MetricError> {
    let items = sorted(items)?;
    let k = passes.iter().copied().max().ok_or_else(|| MetricError::InvalidParams("no pass counts".into()))?;
    let per: Vec<Result<Vec<(f64, f64)>, MetricError>> = exec.map(&items, |it| {
        let chain = null_pass_chain(model, &it.volume, &it.attrs, k)?;
        passes
            .iter()
            .map(|&p| Ok((l1_distance(&it.volume, &chain[p - 1])?, ssim3d(&it.volume, &chain[p - 1], params)?)))
            .collect()
    });
    let per = per.into_iter().collect::<Result<Vec<_>, _>>()?;
    Ok(passes
        .iter()
        .enumerate()
        .map(|(j, &p)| PassScore { passes: p, l1: mean(per.iter().map(|r| r[j].0)), ssim: mean(per.iter().map(|r| r[j].1)) })
        .collect())
}

/// l1 between factual and chain output after each requested cycle count,
/// averaged over subjects and all seven target regions.
pub fn reversibility_score(
    model: &dyn CounterfactualModel,
    items: &[EvalItem],
    cycles: &[usize],
    seed: u64,
    policy: &NonTargetPolicy,
    exec: Exec,
) -> Result<Vec<CycleScore>, MetricError> {
    let items = sorted(items)?;
    let k = cycles.iter().copied().max().ok_or_else(|| MetricError::InvalidParams("no cycle counts".into()))?;
    let jobs: Vec<(&EvalItem, RegionId)> = items.iter().flat_map(|&it| RegionId::ALL.map(|r| (it, r))).collect();
    let per: Vec<Result<Vec<f64>, MetricError>> = exec.map(&jobs, |(it, r)| {
        let s = item_seed(seed, &it.subject_id, r.index() as u64);
        let trace = reversibility_chain(model, &it.volume, &it.attrs, *r, k, s, policy)?;
        cycles.iter().map(|&c| Ok(l1_distance(&it.volume, trace.after_cycle(c))?)).collect()
    });
    let per = per.into_iter().collect::<Result<Vec<_>, _>>()?;
    Ok(cycles.iter().enumerate().map(|(j, &c)| CycleScore { cycles: c, l1: mean(per.iter().map(|r| r[j])) }).collect())
}

/// Fréchet distance between features of the factual images and of their
/// null-intervention counterfactuals.
pub fn realism_score(
    model: &dyn CounterfactualModel,
    items: &[EvalItem],
    fx: &FeatureExtractor,
    exec: Exec,
) -> Result<f64, MetricError> {
    let items = sorted(items)?;
    let pairs: Vec<Result<(Vec<f64>, Vec<f64>), MetricError>> = exec.map(&items, |it| {
        let cf = null_pass_chain(model, &it.volume, &it.attrs, 1)?.remove(0);
        Ok((fx.extract(&it.volume)?, fx.extract(&cf)?))
    });
    let pairs = pairs.into_iter().collect::<Result<Vec<_>, _>>()?;
    let (real, fake): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
    frechet_distance(&real, &fake)
}

/// Effectiveness and minimality from one intervention per subject and target.
#[derive(Clone, Debug, PartialEq)]
pub struct InterventionScores {
    pub effectiveness: RegionMap<f64>,
    pub minimality: MinimalityMatrix,
}

/// For each subject and target region: draw a value from `[-1, 1]`, decode
/// the counterfactual, segment it with the oracle and normalize the measured
/// volumes. Effectiveness is the MAE on the target, minimality the MAE on every
/// other region against the factual value. All in normalized space.
pub fn intervention_scores(
    model: &dyn CounterfactualModel,
    items: &[EvalItem],
    normalizer: &Normalizer,
    seed: u64,
    exec: Exec,
) -> Result<InterventionScores, MetricError> {
    let items = sorted(items)?;
    // [subject][target] → errors on all 7 measured regions.
    let per: Vec<Result<Vec<[f64; 7]>, MetricError>> = exec.map(&items, |it| {
        let z = model.encode(&it.volume, &it.attrs)?;
        RegionId::ALL
            .iter()
            .map(|&t| {
                let mut rng = ChaCha8Rng::seed_from_u64(item_seed(seed, &it.subject_id, t.index() as u64));
                let iv = sample_intervention(&it.attrs, t, &mut rng);
                let commanded = apply_do(&it.attrs, &iv);
                let out = model.decode(&z, &commanded)?;
                let measured = normalizer.normalize_volumes(&region_volumes(&oracle_segment(&out)));
                Ok(RegionId::ALL.map(|r| (measured.get(r) - commanded.get(r)).abs()))
            })
            .collect()
    });
    let per = per.into_iter().collect::<Result<Vec<_>, _>>()?;
    let effectiveness = RegionMap::from_fn(|t| mean(per.iter().map(|s| s[t.index()][t.index()])));
    let minimality = RegionMap::from_fn(|t| {
        RegionMap::from_fn(|r| (r != t).then(|| mean(per.iter().map(|s| s[t.index()][r.index()]))))
    });
    Ok(InterventionScores { effectiveness, minimality })
}

/// Effectiveness on a given target only.
pub fn effectiveness_score(
    model: &dyn CounterfactualModel,
    items: &[EvalItem],
    normalizer: &Normalizer,
    target: RegionId,
    seed: u64,
    exec: Exec,
) -> Result<f64, MetricError> {
    Ok(intervention_scores(model, items, normalizer, seed, exec)?.effectiveness[target])
}

/// Effectiveness protocol on a shifted cohort, with the training normalizer.
pub fn generalizability_score(
    model: &dyn CounterfactualModel,
    cohort_b: &[EvalItem],
    normalizer: &Normalizer,
    seed: u64,
    exec: Exec,
) -> Result<RegionMap<f64>, MetricError> {
    Ok(intervention_scores(model, cohort_b, normalizer, seed, exec)?.effectiveness)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attributes::fit_normalizer;
    use crate::models::IdentityModel;
    use crate::phantoms::{render_phantom, sample_subject, CohortId, RenderConfig};

    fn items(n: u64) -> (Vec<EvalItem>, Normalizer) {
        let raw: Vec<_> = (0..n)
            .map(|s| {
                let (v, l) = render_phantom(&sample_subject(CohortId::A, s), [16; 3], &RenderConfig::default()).unwrap();
                (format!("A-{s:06}"), v, region_volumes(&l))
            })
            .collect();
        let norm = fit_normalizer(&raw.iter().map(|r| r.2).collect::<Vec<_>>()).unwrap();
        let items = raw
            .into_iter()
            .map(|(id, v, r)| EvalItem { subject_id: id, volume: v, attrs: norm.normalize_volumes(&r) })
            .collect();
        (items, norm)
    }

    #[test]
    fn identity_double_hits_the_ideals() {
        let (its, _) = items(6);
        let m = IdentityModel::new([16; 3]);
        let p = SsimParams::default();
        for s in composition_score(&m, &its, &[1, 10], &p, Exec::auto()).unwrap() {
            assert_eq!(s.l1, 0.0);
            assert!((s.ssim - 1.0).abs() < 1e-12);
        }
        let rev = reversibility_score(&m, &its, &[1, 3], 4, &NonTargetPolicy::HeldFactual, Exec::auto()).unwrap();
        assert!(rev.iter().all(|c| c.l1 == 0.0));
        let fx = FeatureExtractor::with_defaults([16; 3]).unwrap();
        assert!(realism_score(&m, &its, &fx, Exec::auto()).unwrap() <= 1e-6);
    }

    #[test]
    fn scores_ignore_item_order_and_workers() {
        let (its, norm) = items(5);
        let m = IdentityModel::new([16; 3]);
        let a = intervention_scores(&m, &its, &norm, 11, Exec::Parallel).unwrap();
        let mut rev = its.clone();
        rev.reverse();
        let b = intervention_scores(&m, &rev, &norm, 11, Exec::Sequential).unwrap();
        assert_eq!(a, b);
        assert!(a.minimality.iter().all(|(t, row)| row[t].is_none() && row.values().flatten().count() == 6));
    }

    #[test]
    fn empty_set_rejected() {
        let m = IdentityModel::new([16; 3]);
        assert!(matches!(
            composition_score(&m, &[], &[1], &SsimParams::default(), Exec::Sequential),
            Err(MetricError::EmptySet)
        ));
    }
}

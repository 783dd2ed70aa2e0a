//! End-to-end orchestration: dataset materialization, subject-level split,
//! training, evaluation and report emission.
//!
//! Every stage writes into a directory named after a hash of the config
//! sections it depends on and drops a completion marker last, so an
//! interrupted run resumes by skipping finished stages.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::attributes::{fit_normalizer, AttributeVector, Normalizer};
use crate::engine::NonTargetPolicy;
use crate::exec::Exec;
use crate::metrics::{
    composition_score, intervention_scores, realism_score, reversibility_score, Axis, EvalItem, FeatureExtractor,
    MetricError, ModelReport, SsimParams,
};
use crate::models::train::mix;
use crate::models::{finetune_encoder_cyclic, train, ModelCheckpoint, ModelConfig, ModelError, ModelFamily, TrainSample};
use crate::phantoms::oracle::region_volumes;
use crate::phantoms::store::{read_scan, write_scan, ScanMeta, StoreError};
use crate::phantoms::{render_phantom, sample_subject, CohortId, PhantomError, RawVolumes, RenderConfig, Volume3D};
use crate::region::RegionId;

pub const REPORT_JSON: &str = "report.json";
pub const TABLE1_CSV: &str = "table1_composition_reversibility_realism.csv";
pub const TABLE2_CSV: &str = "table2_effectiveness_generalizability.csv";
pub const TABLE3_CSV: &str = "table3_minimality.csv";
pub const SUMMARY_MD: &str = "report.md";
const DONE: &str = "DONE";

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("need at least 10 subjects to split, got {0}")]
    TooFewSubjects(usize),
    #[error("io error on {path}: {msg}")]
    Io { path: String, msg: String },
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Phantom(#[from] PhantomError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("stage `{0}` has not been run")]
    MissingStage(String),
}

fn io<E: std::fmt::Display>(path: &Path) -> impl FnOnce(E) -> HarnessError + '_ {
    move |e| HarnessError::Io { path: path.display().to_string(), msg: e.to_string() }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub subjects_a: usize,
    pub subjects_b: usize,
    pub scans_per_subject_a: usize,
    pub scans_per_subject_b: usize,
    /// Relative volume jitter between scans of one subject.
    pub scan_jitter: f64,
    pub resolution: usize,
    pub noise_sigma: f64,
    pub split_ratio: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            subjects_a: 200,
            subjects_b: 50,
            scans_per_subject_a: 3,
            scans_per_subject_b: 1,
            scan_jitter: 0.03,
            resolution: 32,
            noise_sigma: 0.02,
            split_ratio: 0.9,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricConfig {
    pub passes: Vec<usize>,
    pub cycles: Vec<usize>,
    pub ssim: SsimParams,
    pub feature_dim: usize,
    /// Re-measure non-target attributes between reversibility passes.
    pub remeasure_non_targets: bool,
}

impl Default for MetricConfig {
    fn default() -> Self {
        MetricConfig {
            passes: vec![1, 10],
            cycles: vec![1, 3],
            ssim: SsimParams::default(),
            feature_dim: crate::metrics::features::DEFAULT_FEATURE_DIM,
            remeasure_non_targets: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub data: DataConfig,
    pub models: Vec<ModelConfig>,
    pub metrics: MetricConfig,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        let data = DataConfig::default();
        BenchmarkConfig {
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            models: ModelFamily::ALL.iter().map(|&f| ModelConfig::for_family(f, data.resolution)).collect(),
            data,
            metrics: MetricConfig::default(),
        }
    }
}

impl BenchmarkConfig {
    /// Parses a JSON document, applies `key.path=value` overrides, validates.
    pub fn from_json(text: &str, overrides: &[String]) -> Result<Self, HarnessError> {
        let mut doc: serde_json::Value =
            serde_json::from_str(text).map_err(|e| HarnessError::Config(format!("parse: {e}")))?;
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let cfg: BenchmarkConfig = serde_json::from_value(doc).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self, HarnessError> {
        let text = fs::read_to_string(path).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text, overrides)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Config(m));
        let d = &self.data;
        if !(d.split_ratio > 0.0 && d.split_ratio < 1.0) {
            return bad(format!("split_ratio must lie in (0, 1), got {}", d.split_ratio));
        }
        if d.subjects_a < 10 {
            return bad(format!("need at least 10 cohort-A subjects, got {}", d.subjects_a));
        }
        if d.scans_per_subject_a == 0 {
            return bad("scans_per_subject_a must be positive".into());
        }
        if d.subjects_b > 0 && d.scans_per_subject_b == 0 {
            return bad("scans_per_subject_b must be positive".into());
        }
        if !(0.0..0.5).contains(&d.scan_jitter) || !(d.noise_sigma >= 0.0 && d.noise_sigma.is_finite()) {
            return bad("scan_jitter must lie in [0, 0.5) and noise_sigma must be non-negative".into());
        }
        if d.resolution % 16 != 0 {
            return bad(format!("resolution must be a multiple of 16, got {}", d.resolution));
        }
        let mut seen = BTreeSet::new();
        for m in &self.models {
            if m.resolution != d.resolution {
                return bad(format!("{} resolution {} differs from data resolution {}", m.family, m.resolution, d.resolution));
            }
            if !seen.insert(m.family) {
                return bad(format!("family {} listed twice", m.family));
            }
            m.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        }
        let mc = &self.metrics;
        if mc.passes.is_empty() || mc.passes.contains(&0) || mc.cycles.is_empty() || mc.cycles.contains(&0) {
            return bad("pass and cycle counts must be non-empty and positive".into());
        }
        mc.ssim.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        if mc.feature_dim == 0 {
            return bad("feature_dim must be positive".into());
        }
        Ok(())
    }

    pub fn model(&self, family: ModelFamily) -> Result<&ModelConfig, HarnessError> {
        self.models
            .iter()
            .find(|m| m.family == family)
            .ok_or_else(|| HarnessError::Config(format!("family {family} is not configured")))
    }

    /// Hash of everything but `output_dir`, embedded in reports.
    pub fn hash(&self) -> String {
        content_hash(&BenchmarkConfig { output_dir: PathBuf::new(), ..self.clone() })
    }

    fn data_dir(&self) -> PathBuf {
        self.output_dir.join("data").join(short(&content_hash(&(self.seed, &self.data))))
    }

    fn model_dir(&self, m: &ModelConfig) -> PathBuf {
        let key = content_hash(&(content_hash(&(self.seed, &self.data)), m));
        self.output_dir.join("models").join(format!("{}-{}", m.family.name(), short(&key)))
    }

    fn eval_dir(&self, m: &ModelConfig) -> PathBuf {
        let key = content_hash(&(content_hash(&(self.seed, &self.data)), m, &self.metrics));
        self.output_dir.join("eval").join(format!("{}-{}", m.family.name(), short(&key)))
    }

    pub fn report_dir(&self) -> PathBuf {
        self.output_dir.join("report")
    }
}

/// Sets `a.b.c` in a JSON document; the value is parsed as JSON and falls
/// back to a string.
pub fn apply_override(doc: &mut serde_json::Value, spec: &str) -> Result<(), HarnessError> {
    let (path, raw) =
        spec.split_once('=').ok_or_else(|| HarnessError::Config(format!("override `{spec}` is not key=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
    let mut node = doc;
    let keys: Vec<&str> = path.split('.').collect();
    for (i, k) in keys.iter().enumerate() {
        let last = i + 1 == keys.len();
        node = match node {
            serde_json::Value::Object(map) => {
                if last {
                    map.insert(k.to_string(), value);
                    return Ok(());
                }
                map.entry(k.to_string()).or_insert_with(|| serde_json::Value::Object(Default::default()))
            }
            serde_json::Value::Array(arr) => {
                let idx: usize = k.parse().map_err(|_| HarnessError::Config(format!("`{k}` in `{path}` is not an index")))?;
                let len = arr.len();
                let slot = arr
                    .get_mut(idx)
                    .ok_or_else(|| HarnessError::Config(format!("index {idx} out of range ({len}) in `{path}`")))?;
                if last {
                    *slot = value;
                    return Ok(());
                }
                slot
            }
            _ => return Err(HarnessError::Config(format!("`{path}` walks into a scalar"))),
        };
    }
    Err(HarnessError::Config("empty override path".into()))
}

/// SHA-256 of the canonical JSON encoding.
pub fn content_hash<T: Serialize>(v: &T) -> String {
    let json = serde_json::to_vec(v).expect("config types serialize");
    hex::encode(Sha256::digest(json))
}

fn short(h: &str) -> &str {
    &h[..16]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScanRecord {
    pub subject_id: String,
    pub scan_id: String,
    pub cohort: CohortId,
    /// Scan directory relative to the data stage directory.
    pub path: String,
    pub raw_volumes: RawVolumes,
    /// Filled after the normalizer is fitted.
    pub attrs: Option<AttributeVector>,
}

/// All scans of both cohorts plus the split and the normalizer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub scans: Vec<ScanRecord>,
    pub train_subjects: Vec<String>,
    pub test_subjects: Vec<String>,
    pub normalizer: Normalizer,
}

impl Dataset {
    fn cohort(&self, c: CohortId) -> impl Iterator<Item = &ScanRecord> {
        self.scans.iter().filter(move |s| s.cohort == c)
    }

    pub fn train_scans(&self) -> Vec<&ScanRecord> {
        let set: BTreeSet<&str> = self.train_subjects.iter().map(String::as_str).collect();
        self.cohort(CohortId::A).filter(|s| set.contains(s.subject_id.as_str())).collect()
    }

    pub fn test_scans(&self) -> Vec<&ScanRecord> {
        let set: BTreeSet<&str> = self.test_subjects.iter().map(String::as_str).collect();
        self.cohort(CohortId::A).filter(|s| set.contains(s.subject_id.as_str())).collect()
    }

    pub fn cohort_b_scans(&self) -> Vec<&ScanRecord> {
        self.cohort(CohortId::B).collect()
    }
}

/// Subject-level split: whole subjects go to one side. The test side gets
/// `round(n · (1 − ratio))` subjects, at least one.
pub fn split_dataset(
    scans: &[ScanRecord],
    ratio: f64,
    seed: u64,
) -> Result<(Vec<ScanRecord>, Vec<ScanRecord>), HarnessError> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(HarnessError::Config(format!("split ratio must lie in (0, 1), got {ratio}")));
    }
    let subjects: Vec<&str> =
        scans.iter().map(|s| s.subject_id.as_str()).collect::<BTreeSet<_>>().into_iter().collect();
    let n = subjects.len();
    if n < 10 {
        return Err(HarnessError::TooFewSubjects(n));
    }
    let mut order = subjects;
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(seed, 0x5911_7)));
    let n_test = ((n as f64 * (1.0 - ratio)).round() as usize).clamp(1, n - 1);
    let test: BTreeSet<&str> = order[..n_test].iter().copied().collect();
    let (te, tr): (Vec<ScanRecord>, Vec<ScanRecord>) =
        scans.iter().cloned().partition(|s| test.contains(s.subject_id.as_str()));
    Ok((tr, te))
}

/// Renders every scan of both cohorts. Scans of one subject share geometry
/// up to a per-region volume jitter and have independent noise.
fn render_scans(cfg: &BenchmarkConfig, dir: &Path, exec: Exec) -> Result<Vec<ScanRecord>, HarnessError> {
    let d = &cfg.data;
    let mut jobs = Vec::new();
    for (cohort, n, k, stream) in [
        (CohortId::A, d.subjects_a, d.scans_per_subject_a, 0xA),
        (CohortId::B, d.subjects_b, d.scans_per_subject_b, 0xB),
    ] {
        for i in 0..n {
            for j in 0..k {
                jobs.push((cohort, mix(mix(cfg.seed, stream), i as u64), j));
            }
        }
    }
    let dims = [d.resolution; 3];
    let render = RenderConfig { noise_sigma: d.noise_sigma };
    let results = exec.map(&jobs, |&(cohort, subject_seed, j)| -> Result<ScanRecord, HarnessError> {
        let mut spec = sample_subject(cohort, subject_seed);
        let mut rng = ChaCha8Rng::seed_from_u64(mix(subject_seed, j as u64 + 1));
        if j > 0 {
            for r in RegionId::ALL {
                let v: f64 = rng.random_range(1.0 - d.scan_jitter..=1.0 + d.scan_jitter);
                spec = spec.scaled_region(r, v.cbrt());
            }
            spec.noise_seed = rng.random();
        }
        let (vol, labels) = render_phantom(&spec, dims, &render)?;
        let scan_id = format!("{}-s{j}", spec.subject_id);
        let raw_volumes = region_volumes(&labels);
        let meta = ScanMeta {
            dims,
            cohort,
            subject_id: spec.subject_id.clone(),
            scan_id: scan_id.clone(),
            seed: spec.noise_seed,
            raw_volumes,
        };
        write_scan(&dir.join("scans").join(&scan_id), &meta, &vol, &labels)?;
        Ok(ScanRecord {
            subject_id: spec.subject_id,
            scan_id: scan_id.clone(),
            cohort,
            path: format!("scans/{scan_id}"),
            raw_volumes,
            attrs: None,
        })
    });
    let scans = results.into_iter().collect::<Result<Vec<_>, _>>()?;
    let ids: BTreeSet<&str> = scans.iter().map(|s| s.scan_id.as_str()).collect();
    if ids.len() != scans.len() {
        return Err(HarnessError::Config("subject seeds collide; scan ids are not unique".into()));
    }
    Ok(scans)
}

/// Normalizer fitted on train scans only; attributes of all scans
/// (including cohort B) are then expressed with it.
pub fn fit_on_train(train: &[ScanRecord]) -> Result<Normalizer, HarnessError> {
    let vols: Vec<RawVolumes> = train.iter().map(|s| s.raw_volumes).collect();
    fit_normalizer(&vols).map_err(|e| HarnessError::Model(e.into()))
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<(), HarnessError> {
    let text = serde_json::to_string_pretty(v).expect("serializable");
    fs::write(path, text).map_err(io(path))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, HarnessError> {
    let text = fs::read_to_string(path).map_err(io(path))?;
    serde_json::from_str(&text).map_err(io(path))
}

fn done(dir: &Path) -> bool {
    dir.join(DONE).is_file()
}

/// Builds a stage into a temporary sibling and renames it into place, so a
/// killed run never leaves a half-written stage behind.
fn build_stage(dir: &Path, f: impl FnOnce(&Path) -> Result<(), HarnessError>) -> Result<(), HarnessError> {
    let tmp = dir.with_extension("partial");
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(io(&tmp))?;
    }
    fs::create_dir_all(&tmp).map_err(io(&tmp))?;
    f(&tmp)?;
    fs::write(tmp.join(DONE), b"").map_err(io(&tmp))?;
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(io(dir))?;
    }
    fs::rename(&tmp, dir).map_err(io(dir))
}

/// Stage 1: render both cohorts, split cohort A by subject, fit the
/// normalizer on the train split. Cached.
pub fn make_data(cfg: &BenchmarkConfig, exec: Exec) -> Result<Dataset, HarnessError> {
    let dir = cfg.data_dir();
    if !done(&dir) {
        log::info!("make-data -> {}", dir.display());
        build_stage(&dir, |tmp| {
            let mut scans = render_scans(cfg, tmp, exec)?;
            let a: Vec<ScanRecord> = scans.iter().filter(|s| s.cohort == CohortId::A).cloned().collect();
            let (train, test) = split_dataset(&a, cfg.data.split_ratio, cfg.seed)?;
            let normalizer = fit_on_train(&train)?;
            for s in &mut scans {
                s.attrs = Some(normalizer.normalize_volumes(&s.raw_volumes));
            }
            let ids = |v: &[ScanRecord]| v.iter().map(|s| s.subject_id.clone()).collect::<BTreeSet<_>>().into_iter().collect();
            let ds = Dataset { scans, train_subjects: ids(&train), test_subjects: ids(&test), normalizer };
            write_json(&tmp.join("dataset.json"), &ds)
        })?;
    }
    load_data(cfg)
}

pub fn load_data(cfg: &BenchmarkConfig) -> Result<Dataset, HarnessError> {
    let dir = cfg.data_dir();
    if !done(&dir) {
        return Err(HarnessError::MissingStage("make-data".into()));
    }
    read_json(&dir.join("dataset.json"))
}

fn load_scan(cfg: &BenchmarkConfig, s: &ScanRecord) -> Result<Volume3D, HarnessError> {
    Ok(read_scan(&cfg.data_dir().join(&s.path))?.1)
}

fn attrs_of(s: &ScanRecord) -> Result<AttributeVector, HarnessError> {
    s.attrs.ok_or_else(|| HarnessError::Config(format!("scan {} has no normalized attributes", s.scan_id)))
}

/// Loads scans as evaluation items with their normalized attributes.
pub fn eval_items(cfg: &BenchmarkConfig, scans: &[&ScanRecord]) -> Result<Vec<EvalItem>, HarnessError> {
    scans
        .iter()
        .map(|s| Ok(EvalItem { subject_id: s.scan_id.clone(), volume: load_scan(cfg, s)?, attrs: attrs_of(s)? }))
        .collect()
}

/// Stage 2: train one family on the train split. GAN_FT finetunes the GAN
/// stage's checkpoint, training that first if needed. Cached.
pub fn train_family(cfg: &BenchmarkConfig, family: ModelFamily) -> Result<ModelCheckpoint, HarnessError> {
    let mcfg = cfg.model(family)?.clone();
    let dir = cfg.model_dir(&mcfg);
    if !done(&dir) {
        let ds = load_data(cfg)?;
        let ckpt = if family == ModelFamily::GanFt {
            let mut gan_cfg = mcfg.clone();
            gan_cfg.family = ModelFamily::Gan;
            gan_cfg.conditioning = ModelFamily::Gan.default_conditioning();
            let gan = train_cached(cfg, &gan_cfg, &ds)?;
            let data = train_samples(cfg, &ds)?;
            log::info!("finetune GAN_FT from {}", gan.weights_hash());
            finetune_encoder_cyclic(&gan, &data, mcfg.train.finetune_epochs)?
        } else {
            train_cached(cfg, &mcfg, &ds)?
        };
        if family == ModelFamily::GanFt {
            build_stage(&dir, |tmp| Ok(ckpt.save(tmp)?))?;
        }
    }
    ModelCheckpoint::load(&dir).map_err(Into::into)
}

fn train_samples(cfg: &BenchmarkConfig, ds: &Dataset) -> Result<Vec<TrainSample>, HarnessError> {
    ds.train_scans().iter().map(|s| Ok(TrainSample { volume: load_scan(cfg, s)?, attrs: attrs_of(s)? })).collect()
}

fn train_cached(cfg: &BenchmarkConfig, mcfg: &ModelConfig, ds: &Dataset) -> Result<ModelCheckpoint, HarnessError> {
    let dir = cfg.model_dir(mcfg);
    if !done(&dir) {
        log::info!("train {} -> {}", mcfg.family, dir.display());
        let data = train_samples(cfg, ds)?;
        let ckpt = train(mcfg, &data, &ds.normalizer)?;
        build_stage(&dir, |tmp| Ok(ckpt.save(tmp)?))?;
    }
    ModelCheckpoint::load(&dir).map_err(Into::into)
}

/// Per-axis result files, one JSON document per axis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
enum AxisResult {
    Passes(Vec<crate::metrics::PassScore>),
    Cycles(Vec<crate::metrics::CycleScore>),
    Scalar(f64),
    Regions(crate::region::RegionMap<f64>),
    Matrix(crate::metrics::MinimalityMatrix),
}

/// Seed of one metric axis, recorded in the report provenance.
pub fn metric_seed(cfg: &BenchmarkConfig, axis: Axis) -> u64 {
    mix(mix(cfg.seed, 0xE7A1), axis as u64)
}

/// Stage 3: one metric axis for one trained family. Cached per axis.
pub fn evaluate_axis(
    cfg: &BenchmarkConfig,
    family: ModelFamily,
    axis: Axis,
    exec: Exec,
) -> Result<(), HarnessError> {
    let mcfg = cfg.model(family)?.clone();
    let dir = cfg.eval_dir(&mcfg);
    let file = dir.join(format!("{}.json", axis.name()));
    if file.is_file() {
        return Ok(());
    }
    let model_dir = cfg.model_dir(&mcfg);
    if !done(&model_dir) {
        return Err(HarnessError::MissingStage(format!("train {family}")));
    }
    let ckpt = ModelCheckpoint::load(&model_dir)?;
    let ds = load_data(cfg)?;
    let mc = &cfg.metrics;
    log::info!("eval {family} {}", axis.name());
    let test = || eval_items(cfg, &ds.test_scans());
    let seed = metric_seed(cfg, axis);
    let result = match axis {
        Axis::Composition => AxisResult::Passes(composition_score(&ckpt, &test()?, &mc.passes, &mc.ssim, exec)?),
        Axis::Reversibility => {
            let policy = if mc.remeasure_non_targets {
                NonTargetPolicy::Remeasured(ds.normalizer.clone())
            } else {
                NonTargetPolicy::HeldFactual
            };
            AxisResult::Cycles(reversibility_score(&ckpt, &test()?, &mc.cycles, seed, &policy, exec)?)
        }
        Axis::Realism => {
            let fx = FeatureExtractor::new([cfg.data.resolution; 3], mc.feature_dim, crate::metrics::features::DEFAULT_FEATURE_SEED)?;
            AxisResult::Scalar(realism_score(&ckpt, &test()?, &fx, exec)?)
        }
        Axis::Effectiveness => {
            AxisResult::Regions(intervention_scores(&ckpt, &test()?, &ds.normalizer, seed, exec)?.effectiveness)
        }
        Axis::Minimality => {
            // Same seed as effectiveness: both read the same counterfactuals.
            let s = metric_seed(cfg, Axis::Effectiveness);
            AxisResult::Matrix(intervention_scores(&ckpt, &test()?, &ds.normalizer, s, exec)?.minimality)
        }
        Axis::Generalizability => {
            let b = eval_items(cfg, &ds.cohort_b_scans())?;
            AxisResult::Regions(intervention_scores(&ckpt, &b, &ds.normalizer, seed, exec)?.effectiveness)
        }
    };
    fs::create_dir_all(&dir).map_err(io(&dir))?;
    let tmp = file.with_extension("partial");
    write_json(&tmp, &result)?;
    fs::rename(&tmp, &file).map_err(io(&file))
}

fn read_axes(cfg: &BenchmarkConfig, mcfg: &ModelConfig) -> Result<ModelReport, HarnessError> {
    let dir = cfg.eval_dir(mcfg);
    let mut r = ModelReport::new(mcfg.family.name());
    for axis in Axis::ALL {
        let file = dir.join(format!("{}.json", axis.name()));
        if !file.is_file() {
            continue;
        }
        let v: serde_json::Value = read_json(&file)?;
        let de = |e: serde_json::Error| HarnessError::Io { path: file.display().to_string(), msg: e.to_string() };
        match axis {
            Axis::Composition => r.composition = Some(serde_json::from_value(v).map_err(de)?),
            Axis::Reversibility => r.reversibility = Some(serde_json::from_value(v).map_err(de)?),
            Axis::Realism => r.realism_fid = Some(serde_json::from_value(v).map_err(de)?),
            Axis::Effectiveness => r.effectiveness = Some(serde_json::from_value(v).map_err(de)?),
            Axis::Minimality => r.minimality = Some(serde_json::from_value(v).map_err(de)?),
            Axis::Generalizability => r.generalizability = Some(serde_json::from_value(v).map_err(de)?),
        }
    }
    Ok(r)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageFailure {
    pub stage: String,
    pub message: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub seed: u64,
    pub data_stage: String,
    /// Family name → weights hash of the evaluated checkpoint.
    pub weights: BTreeMap<String, String>,
    pub metric_seeds: BTreeMap<String, u64>,
}

/// Everything `report.json` holds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub provenance: Provenance,
    pub models: Vec<ModelReport>,
    pub failures: Vec<StageFailure>,
}

impl BenchmarkReport {
    pub fn succeeded(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Collects whatever stages have finished into a report.
pub fn collect_report(cfg: &BenchmarkConfig, failures: Vec<StageFailure>) -> Result<BenchmarkReport, HarnessError> {
    let mut weights = BTreeMap::new();
    let mut models = Vec::new();
    for m in &cfg.models {
        let dir = cfg.model_dir(m);
        if done(&dir) {
            weights.insert(m.family.name().to_string(), ModelCheckpoint::load(&dir)?.weights_hash().to_string());
        }
        models.push(read_axes(cfg, m)?);
    }
    let data_dir = cfg.data_dir();
    Ok(BenchmarkReport {
        provenance: Provenance {
            config_hash: cfg.hash(),
            seed: cfg.seed,
            data_stage: data_dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
            weights,
            metric_seeds: Axis::ALL.iter().map(|&a| (a.name().to_string(), metric_seed(cfg, a))).collect(),
        },
        models,
        failures,
    })
}

/// make-data → train every family → every axis → report. Failures of a
/// train or eval stage are recorded and the remaining work still runs.
pub fn run_benchmark(cfg: &BenchmarkConfig, exec: Exec) -> Result<BenchmarkReport, HarnessError> {
    cfg.validate()?;
    make_data(cfg, exec)?;
    let mut failures = Vec::new();
    for m in &cfg.models {
        if let Err(e) = train_family(cfg, m.family) {
            log::error!("train {} failed: {e}", m.family);
            failures.push(StageFailure { stage: format!("train/{}", m.family.name()), message: e.to_string() });
            continue;
        }
        for axis in Axis::ALL {
            if let Err(e) = evaluate_axis(cfg, m.family, axis, exec) {
                log::error!("eval {} {} failed: {e}", m.family, axis.name());
                failures.push(StageFailure {
                    stage: format!("eval/{}/{}", m.family.name(), axis.name()),
                    message: e.to_string(),
                });
            }
        }
    }
    let report = collect_report(cfg, failures)?;
    emit_report(&report, &cfg.report_dir())?;
    Ok(report)
}

fn fmt_num(v: Option<f64>) -> String {
    v.map(|v| format!("{v}")).unwrap_or_default()
}

fn pass_counts(report: &BenchmarkReport) -> (Vec<usize>, Vec<usize>) {
    let mut passes = BTreeSet::new();
    let mut cycles = BTreeSet::new();
    for m in &report.models {
        passes.extend(m.composition.iter().flatten().map(|p| p.passes));
        cycles.extend(m.reversibility.iter().flatten().map(|c| c.cycles));
    }
    (passes.into_iter().collect(), cycles.into_iter().collect())
}

#[derive(Clone, Copy, PartialEq)]
enum Better {
    Lower,
    Higher,
}

struct Table {
    header: Vec<String>,
    better: Vec<Better>,
    rows: Vec<(String, Vec<Option<f64>>)>,
}

impl Table {
    fn csv(&self) -> String {
        let mut out = format!("family,{}\n", self.header.join(","));
        for (name, vals) in &self.rows {
            let cells: Vec<String> = vals.iter().map(|v| fmt_num(*v)).collect();
            let _ = writeln!(out, "{name},{}", cells.join(","));
        }
        out
    }

    /// Markdown at 3 decimals; every entry tied with the column best at that
    /// precision is bolded.
    fn markdown(&self) -> String {
        let shown = |v: f64| format!("{v:.3}");
        let mut best: Vec<Option<String>> = vec![None; self.header.len()];
        for (j, b) in self.better.iter().enumerate() {
            let col: Vec<f64> = self.rows.iter().filter_map(|r| r.1[j]).filter(|v| v.is_finite()).collect();
            let pick = match b {
                Better::Lower => col.iter().copied().reduce(f64::min),
                Better::Higher => col.iter().copied().reduce(f64::max),
            };
            best[j] = pick.map(shown);
        }
        let mut out = format!("| Model | {} |\n", self.header.join(" | "));
        let _ = writeln!(out, "|---|{}", "---|".repeat(self.header.len()));
        for (name, vals) in &self.rows {
            let cells: Vec<String> = vals
                .iter()
                .enumerate()
                .map(|(j, v)| match v {
                    Some(v) if best[j].as_deref() == Some(shown(*v).as_str()) => format!("**{}**", shown(*v)),
                    Some(v) => shown(*v),
                    None => "–".into(),
                })
                .collect();
            let _ = writeln!(out, "| {name} | {} |", cells.join(" | "));
        }
        out
    }
}

fn display_name(family: &str) -> String {
    family.parse::<ModelFamily>().map(|f| f.display_name().to_string()).unwrap_or_else(|_| family.to_string())
}

fn table1(report: &BenchmarkReport) -> Table {
    let (passes, cycles) = pass_counts(report);
    let mut header = Vec::new();
    let mut better = Vec::new();
    for p in &passes {
        header.extend([format!("composition_l1_{p}"), format!("composition_ssim_{p}")]);
        better.extend([Better::Lower, Better::Higher]);
    }
    for c in &cycles {
        header.push(format!("reversibility_l1_{c}"));
        better.push(Better::Lower);
    }
    header.push("realism_fid".into());
    better.push(Better::Lower);
    let rows = report
        .models
        .iter()
        .map(|m| {
            let mut v = Vec::new();
            for &p in &passes {
                let s = m.composition_at(p);
                v.extend([s.map(|s| s.l1), s.map(|s| s.ssim)]);
            }
            v.extend(cycles.iter().map(|&c| m.reversibility_at(c)));
            v.push(m.realism_fid);
            (m.family.clone(), v)
        })
        .collect();
    Table { header, better, rows }
}

fn table2(report: &BenchmarkReport) -> Table {
    let mut header: Vec<String> = RegionId::ALL.iter().map(|r| format!("effectiveness_{r}")).collect();
    header.extend(RegionId::ALL.iter().map(|r| format!("generalizability_{r}")));
    let rows = report
        .models
        .iter()
        .map(|m| {
            let mut v: Vec<Option<f64>> = RegionId::ALL.iter().map(|&r| m.effectiveness.as_ref().map(|e| e[r])).collect();
            v.extend(RegionId::ALL.iter().map(|&r| m.generalizability.as_ref().map(|e| e[r])));
            (m.family.clone(), v)
        })
        .collect();
    Table { better: vec![Better::Lower; header.len()], header, rows }
}

/// One row per model; one column per (target, measured) pair off the diagonal.
fn table3(report: &BenchmarkReport) -> Table {
    let pairs: Vec<(RegionId, RegionId)> =
        RegionId::ALL.iter().flat_map(|&t| RegionId::ALL.into_iter().filter(move |&r| r != t).map(move |r| (t, r))).collect();
    let header = pairs.iter().map(|(t, r)| format!("do_{t}_{r}")).collect::<Vec<_>>();
    let rows = report
        .models
        .iter()
        .map(|m| (m.family.clone(), pairs.iter().map(|&(t, r)| m.minimality.as_ref().and_then(|x| x[t][r])).collect()))
        .collect();
    Table { better: vec![Better::Lower; header.len()], header, rows }
}

fn minimality_markdown(report: &BenchmarkReport) -> String {
    let mut out = String::new();
    for m in &report.models {
        let Some(mat) = &m.minimality else { continue };
        let _ = writeln!(out, "#### {}\n", display_name(&m.family));
        let names: Vec<&str> = RegionId::ALL.iter().map(|r| r.name()).collect();
        let _ = writeln!(out, "| do(·) | {} |", names.join(" | "));
        let _ = writeln!(out, "|---|{}", "---|".repeat(7));
        for t in RegionId::ALL {
            let cells: Vec<String> =
                RegionId::ALL.iter().map(|&r| mat[t][r].map(|v| format!("{v:.3}")).unwrap_or_else(|| "–".into())).collect();
            let _ = writeln!(out, "| {t} | {} |", cells.join(" | "));
        }
        out.push('\n');
    }
    out
}

fn markdown(report: &BenchmarkReport) -> String {
    let rename = |t: Table| Table {
        rows: t.rows.into_iter().map(|(n, v)| (display_name(&n), v)).collect(),
        ..t
    };
    let p = &report.provenance;
    let mut out = String::from("# Counterfactual benchmark report\n\n");
    let _ = writeln!(out, "config `{}`, seed {}, data stage `{}`\n", p.config_hash, p.seed, p.data_stage);
    out.push_str("## Composition, reversibility, realism\n\n");
    out.push_str(&rename(table1(report)).markdown());
    out.push_str("\n## Effectiveness and generalizability (MAE, normalized volumes)\n\n");
    out.push_str(&rename(table2(report)).markdown());
    out.push_str("\n## Minimality (MAE, normalized volumes; row = intervened region)\n\n");
    out.push_str(&minimality_markdown(report));
    if !report.failures.is_empty() {
        out.push_str("## Failed stages\n\n");
        for f in &report.failures {
            let _ = writeln!(out, "- `{}`: {}", f.stage, f.message);
        }
    }
    out
}

/// Writes `report.json`, the three CSV tables and the markdown summary.
pub fn emit_report(report: &BenchmarkReport, outdir: &Path) -> Result<(), HarnessError> {
    fs::create_dir_all(outdir).map_err(io(outdir))?;
    write_json(&outdir.join(REPORT_JSON), report)?;
    for (name, text) in [
        (TABLE1_CSV, table1(report).csv()),
        (TABLE2_CSV, table2(report).csv()),
        (TABLE3_CSV, table3(report).csv()),
        (SUMMARY_MD, markdown(report)),
    ] {
        let path = outdir.join(name);
        fs::write(&path, text).map_err(io(&path))?;
    }
    Ok(())
}

pub fn read_report(path: &Path) -> Result<BenchmarkReport, HarnessError> {
    read_json(path)
}

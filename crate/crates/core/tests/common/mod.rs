//! Independent reference implementations and fixtures shared by the
//! integration and acceptance tests.

#![allow(dead_code)]

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use cfbench_core::attributes::{fit_normalizer, AttributeVector, Normalizer};
use cfbench_core::metrics::{EvalItem, SsimParams};
use cfbench_core::models::{LatentPayload, LatentState, ModelError};
use cfbench_core::phantoms::oracle::region_volumes;
use cfbench_core::phantoms::{render_phantom, sample_subject, RenderConfig};
use cfbench_core::{BenchmarkConfig, CohortId, CounterfactualModel, RegionId, SubjectSpec, Volume3D};

pub fn random_volume(dims: [usize; 3], seed: u64) -> Volume3D {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = dims.iter().product();
    Volume3D::from_vec(dims, (0..n).map(|_| rng.random::<f32>()).collect()).unwrap()
}

/// `Σ|aᵢ − bᵢ| / N`, summed in index order.
pub fn naive_l1(a: &Volume3D, b: &Volume3D) -> f64 {
    let mut s = 0.0f64;
    for i in 0..a.len() {
        s += (a.data()[i] as f64 - b.data()[i] as f64).abs();
    }
    s / a.len() as f64
}

/// SSIM straight from the definition: at every voxel whose window fits, build
/// the full 3-D Gaussian weight cube, normalize it, and evaluate the weighted
/// means, variances and covariance with centred sums.
pub fn naive_ssim(a: &Volume3D, b: &Volume3D, p: &SsimParams) -> f64 {
    let [dx, dy, dz] = a.dims();
    let r = p.radius as i64;
    let mut w = Vec::new();
    for i in -r..=r {
        for j in -r..=r {
            for k in -r..=r {
                let d2 = (i * i + j * j + k * k) as f64;
                w.push(((i, j, k), (-d2 / (2.0 * p.sigma * p.sigma)).exp()));
            }
        }
    }
    let total: f64 = w.iter().map(|x| x.1).sum();
    let c1 = (p.k1 * p.range).powi(2);
    let c2 = (p.k2 * p.range).powi(2);
    let at = |v: &Volume3D, x: i64, y: i64, z: i64| v.get(x as usize, y as usize, z as usize) as f64;
    let (mut sum, mut count) = (0.0, 0usize);
    for x in r..dx as i64 - r {
        for y in r..dy as i64 - r {
            for z in r..dz as i64 - r {
                let (mut mx, mut my) = (0.0, 0.0);
                for &((i, j, k), wt) in &w {
                    mx += wt / total * at(a, x + i, y + j, z + k);
                    my += wt / total * at(b, x + i, y + j, z + k);
                }
                let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
                for &((i, j, k), wt) in &w {
                    let u = at(a, x + i, y + j, z + k) - mx;
                    let v = at(b, x + i, y + j, z + k) - my;
                    vx += wt / total * u * u;
                    vy += wt / total * v * v;
                    cxy += wt / total * u * v;
                }
                sum += (2.0 * mx * my + c1) * (2.0 * cxy + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                count += 1;
            }
        }
    }
    sum / count as f64
}

pub fn gaussian_samples(n: usize, means: &[f64], stds: &[f64], seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dists: Vec<Normal<f64>> = means.iter().zip(stds).map(|(&m, &s)| Normal::new(m, s).unwrap()).collect();
    (0..n).map(|_| dists.iter().map(|d| d.sample(&mut rng)).collect()).collect()
}

/// `A Aᵀ + εI` with Gaussian `A`.
pub fn random_spd(d: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = Normal::new(0.0, 1.0).unwrap();
    let a = DMatrix::from_fn(d, d, |_, _| n.sample(&mut rng));
    &a * a.transpose() + DMatrix::identity(d, d) * 1e-3
}

/// Cohort phantoms as evaluation items, normalized with `norm` or with a
/// normalizer fitted on cohort-A subjects `0..32` at the same resolution.
pub fn phantom_items(
    cohort: CohortId,
    seeds: std::ops::Range<u64>,
    res: usize,
    norm: Option<&Normalizer>,
) -> (Vec<EvalItem>, Normalizer) {
    let raw: Vec<_> = seeds
        .map(|s| {
            let spec = sample_subject(cohort, s);
            let (v, l) = render_phantom(&spec, [res; 3], &RenderConfig::default()).unwrap();
            (spec.subject_id, v, region_volumes(&l))
        })
        .collect();
    let norm = match norm {
        Some(n) => n.clone(),
        None => reference_normalizer(res),
    };
    let items = raw
        .into_iter()
        .map(|(id, volume, r)| EvalItem { subject_id: id, volume, attrs: norm.normalize_volumes(&r) })
        .collect();
    (items, norm)
}

pub fn reference_normalizer(res: usize) -> Normalizer {
    let vols: Vec<_> = (0..32)
        .map(|s| {
            let (_, l) = render_phantom(&sample_subject(CohortId::A, s), [res; 3], &RenderConfig::default()).unwrap();
            region_volumes(&l)
        })
        .collect();
    fit_normalizer(&vols).unwrap()
}

/// Counterfactual oracle: abduction picks the known subject whose render is
/// closest in l1, prediction re-renders the phantom with every region rescaled so
/// its voxel count hits the commanded volume.
pub struct RerenderModel {
    pub specs: Vec<SubjectSpec>,
    pub renders: Vec<Volume3D>,
    pub norm: Normalizer,
    pub res: usize,
    pub render: RenderConfig,
}

impl RerenderModel {
    pub fn new(specs: Vec<SubjectSpec>, norm: Normalizer, res: usize, render: RenderConfig) -> Self {
        let renders = specs.iter().map(|s| render_phantom(s, [res; 3], &render).unwrap().0).collect();
        RerenderModel { specs, renders, norm, res, render }
    }

    fn rescaled(&self, spec: &SubjectSpec, attrs: &AttributeVector) -> SubjectSpec {
        let (_, labels) = render_phantom(spec, [self.res; 3], &RenderConfig::noiseless()).unwrap();
        let now = region_volumes(&labels);
        let mut out = spec.clone();
        for r in RegionId::ALL {
            let want = self.norm.denormalize_value(r, attrs.get(r)).max(1.0);
            let f = (want / now[r].max(1) as f64).cbrt();
            out = out.scaled_region(r, f);
        }
        out
    }
}

impl CounterfactualModel for RerenderModel {
    fn name(&self) -> String {
        "rerender".into()
    }

    fn dims(&self) -> [usize; 3] {
        [self.res; 3]
    }

    fn encode(&self, vol: &Volume3D, attrs: &AttributeVector) -> Result<LatentState, ModelError> {
        self.check_dims(vol)?;
        let idx = (0..self.renders.len())
            .min_by(|&i, &j| naive_l1(&self.renders[i], vol).total_cmp(&naive_l1(&self.renders[j], vol)))
            .ok_or(ModelError::EmptyDataset)?;
        Ok(LatentState { source: self.name(), payload: LatentPayload::Vector(vec![idx as f32]), attrs: *attrs })
    }

    fn decode(&self, z: &LatentState, attrs: &AttributeVector) -> Result<Volume3D, ModelError> {
        let LatentPayload::Vector(v) = &z.payload else {
            return Err(ModelError::FamilyMismatch { expected: self.name(), got: z.source.clone() });
        };
        let spec = self.rescaled(&self.specs[v[0] as usize], attrs);
        Ok(render_phantom(&spec, [self.res; 3], &self.render).unwrap().0)
    }
}

/// Two quick families on 16³ phantoms.
pub fn smoke_config(out: &std::path::Path) -> BenchmarkConfig {
    let json = serde_json::json!({
        "seed": 7,
        "output_dir": out,
        "data": { "subjects_a": 12, "subjects_b": 4, "scans_per_subject_a": 2, "resolution": 16, "split_ratio": 0.75 },
        "models": [
            { "family": "VAE", "resolution": 16, "train": { "epochs": 1, "batch": 4 } },
            { "family": "GAN", "resolution": 16, "train": { "epochs": 1, "batch": 4, "encoder_epochs": 1 } }
        ],
        "metrics": { "passes": [1, 3], "cycles": [1, 2], "feature_dim": 16 }
    });
    BenchmarkConfig::from_json(&json.to_string(), &[]).unwrap()
}

//! Labeled synthetic brain phantoms.
//!
//! A phantom is a brain ellipsoid filled with tissue, with seven region
//! sub-ellipsoids painted at fixed canonical positions. Each region and the
//! tissue carry a distinct intensity prototype, so the exact label map is
//! recoverable from a noiseless image (see [`oracle`]).
//!
//! Coordinates: axis 0 is left/right, axis 1 posterior/anterior, axis 2
//! inferior/superior. Normalized coordinates map the grid onto `[-1, 1]` per
//! axis. Region semi-axes are stored in voxels of the 32³ reference grid and
//! scale linearly with the render resolution.

pub mod oracle;
pub mod store;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::region::{RegionId, RegionMap, BACKGROUND, NUM_LABELS, TISSUE};

pub use oracle::{dice, oracle_segment, region_volumes, RawVolumes};

/// Grid size on which region semi-axes are expressed.
pub const REFERENCE_RES: usize = 32;
pub const DEFAULT_RES: usize = 32;
pub const DEFAULT_NOISE_SIGMA: f64 = 0.02;
pub const MIN_RENDER_DIM: usize = 16;

/// Intensity prototype per label code (0 background, 1..=7 regions, 8 tissue).
pub const PROTOTYPES: [f32; NUM_LABELS] = [0.00, 0.55, 0.62, 0.69, 0.76, 0.83, 0.90, 0.10, 0.45];

pub fn prototype(label: u8) -> f32 {
    PROTOTYPES[label as usize]
}

#[derive(Debug, Error, PartialEq)]
pub enum PhantomError {
    #[error("region {region} exits the brain mask at voxel {voxel:?}")]
    RegionOverflow { region: RegionId, voxel: [usize; 3] },
    #[error("render dims {0:?} below the minimum of {MIN_RENDER_DIM} per axis")]
    DimsTooSmall([usize; 3]),
    #[error("invalid subject geometry: {0}")]
    InvalidGeometry(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CohortId {
    /// Older cohort with enlarged ventricles; used for training and evaluation.
    A,
    /// Younger cohort with small ventricles and larger cortex; used for generalizability.
    B,
}

impl std::fmt::Display for CohortId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            CohortId::A => "A",
            CohortId::B => "B",
        })
    }
}

/// Dense scalar grid, C order (last axis fastest), values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume3D {
    dims: [usize; 3],
    data: Vec<f32>,
}

impl Volume3D {
    pub fn filled(dims: [usize; 3], value: f32) -> Self {
        Volume3D { dims, data: vec![value; dims[0] * dims[1] * dims[2]] }
    }

    /// Builds a volume, clamping into `[0, 1]`. Non-finite values become 0.
    pub fn from_vec(dims: [usize; 3], mut data: Vec<f32>) -> Option<Self> {
        if data.len() != dims[0] * dims[1] * dims[2] {
            return None;
        }
        for v in &mut data {
            *v = if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 };
        }
        Some(Volume3D { dims, data })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (x * self.dims[1] + y) * self.dims[2] + z
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[self.index(x, y, z)]
    }
}

/// Integer label grid paired with a [`Volume3D`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    dims: [usize; 3],
    data: Vec<u8>,
}

impl LabelMap {
    pub fn filled(dims: [usize; 3], label: u8) -> Self {
        LabelMap { dims, data: vec![label; dims[0] * dims[1] * dims[2]] }
    }

    pub fn from_vec(dims: [usize; 3], data: Vec<u8>) -> Option<Self> {
        if data.len() != dims[0] * dims[1] * dims[2] || data.iter().any(|&l| l as usize >= NUM_LABELS) {
            return None;
        }
        Some(LabelMap { dims, data })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (x * self.dims[1] + y) * self.dims[2] + z
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> u8 {
        self.data[self.index(x, y, z)]
    }

    pub fn set(&mut self, x: usize, y: usize, z: usize, label: u8) {
        let i = self.index(x, y, z);
        self.data[i] = label;
    }
}

/// Per-region geometry of one subject.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionParams {
    /// Offset from the canonical center, normalized coordinates.
    pub offset: [f64; 3],
    /// Semi-axes in reference-grid voxels.
    pub semi_axes: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectSpec {
    pub subject_id: String,
    pub cohort: CohortId,
    /// Brain ellipsoid semi-axes, normalized coordinates.
    pub brain_semi_axes: [f64; 3],
    pub region_params: RegionMap<RegionParams>,
    pub noise_seed: u64,
}

struct Canonical {
    center: [f64; 3],
    semi_axes: [f64; 3],
    bilateral: bool,
}

const BRAIN_SEMI_AXES: [f64; 3] = [0.80, 0.90, 0.76];

fn canonical(region: RegionId) -> Canonical {
    let (center, semi_axes, bilateral) = match region {
        RegionId::Fro => ([0.0, 0.50, 0.10], [6.0, 3.4, 4.2], false),
        RegionId::Par => ([0.0, -0.28, 0.38], [6.0, 3.6, 2.4], false),
        RegionId::Tem => ([0.44, 0.02, -0.27], [2.4, 4.6, 2.4], true),
        RegionId::Occ => ([0.0, -0.60, -0.06], [5.0, 2.4, 3.8], false),
        RegionId::Cin => ([0.0, 0.14, 0.36], [2.2, 5.0, 2.0], false),
        RegionId::Ins => ([0.46, 0.24, 0.04], [1.6, 3.2, 2.6], true),
        RegionId::Ven => ([0.0, -0.04, 0.0], [2.6, 4.4, 2.4], false),
    };
    Canonical { center, semi_axes, bilateral }
}

/// Uniform range of the isotropic region scale for a cohort.
fn scale_range(cohort: CohortId, region: RegionId) -> (f64, f64) {
    match (cohort, region) {
        (CohortId::A, RegionId::Ven) => (0.95, 1.45),
        (CohortId::B, RegionId::Ven) => (0.55, 1.00),
        (CohortId::A, _) => (0.70, 1.30),
        (CohortId::B, _) => (0.80, 1.32),
    }
}

const ASPECT_JITTER: f64 = 0.06;
const OFFSET_JITTER: f64 = 0.03;
const BRAIN_JITTER: f64 = 0.03;

/// Draws a subject's anatomy from the cohort's fixed parameter distributions.
pub fn sample_subject(cohort: CohortId, rng_seed: u64) -> SubjectSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed ^ cohort_salt(cohort));
    let brain_scale = rng.random_range(1.0 - BRAIN_JITTER..=1.0 + BRAIN_JITTER);
    let brain_semi_axes = BRAIN_SEMI_AXES.map(|a| a * brain_scale);
    let region_params = RegionMap::from_fn(|r| {
        let c = canonical(r);
        let (lo, hi) = scale_range(cohort, r);
        let s = rng.random_range(lo..=hi);
        let mut semi_axes = c.semi_axes;
        for a in &mut semi_axes {
            *a *= s * rng.random_range(1.0 - ASPECT_JITTER..=1.0 + ASPECT_JITTER);
        }
        let offset = std::array::from_fn(|_| rng.random_range(-OFFSET_JITTER..=OFFSET_JITTER));
        RegionParams { offset, semi_axes }
    });
    let noise_seed = rng.random();
    SubjectSpec {
        subject_id: format!("{cohort}-{rng_seed:06}"),
        cohort,
        brain_semi_axes,
        region_params,
        noise_seed,
    }
}

fn cohort_salt(cohort: CohortId) -> u64 {
    match cohort {
        CohortId::A => 0x41_4144_4e49,
        CohortId::B => 0x42_4e43_414e,
    }
}

impl SubjectSpec {
    /// Returns a copy with one region's semi-axes multiplied by `factor`.
    pub fn scaled_region(&self, region: RegionId, factor: f64) -> SubjectSpec {
        let mut out = self.clone();
        for a in &mut out.region_params[region].semi_axes {
            *a *= factor;
        }
        out
    }

    pub fn validate(&self) -> Result<(), PhantomError> {
        if self.brain_semi_axes.iter().any(|&a| !(a > 0.0 && a <= 1.0)) {
            return Err(PhantomError::InvalidGeometry("brain semi-axes must lie in (0, 1]".into()));
        }
        for (r, p) in self.region_params.iter() {
            if p.semi_axes.iter().any(|&a| !(a > 0.0) || !a.is_finite()) {
                return Err(PhantomError::InvalidGeometry(format!("{r} semi-axes must be positive")));
            }
        }
        Ok(())
    }
}

/// Rendering options. `noise_sigma = 0` gives the exact prototype image.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderConfig {
    pub noise_sigma: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig { noise_sigma: DEFAULT_NOISE_SIGMA }
    }
}

impl RenderConfig {
    pub fn noiseless() -> Self {
        RenderConfig { noise_sigma: 0.0 }
    }
}

/// Voxel-space ellipsoid on a concrete grid.
#[derive(Clone, Copy, Debug)]
pub struct Ellipsoid {
    pub center: [f64; 3],
    pub semi_axes: [f64; 3],
}

impl Ellipsoid {
    #[inline]
    pub fn contains(&self, p: [f64; 3]) -> bool {
        let mut s = 0.0;
        for k in 0..3 {
            let d = (p[k] - self.center[k]) / self.semi_axes[k];
            s += d * d;
        }
        s <= 1.0
    }

    /// Index range per axis of voxels whose centers may fall inside.
    pub fn bounds(&self, dims: [usize; 3]) -> [(usize, usize); 3] {
        std::array::from_fn(|k| {
            let lo = (self.center[k] - self.semi_axes[k] - 0.5).floor().max(0.0) as usize;
            let hi = ((self.center[k] + self.semi_axes[k] + 0.5).ceil() as usize).min(dims[k]);
            (lo.min(dims[k]), hi)
        })
    }

    /// Analytic volume in voxels.
    pub fn volume(&self) -> f64 {
        4.0 / 3.0 * std::f64::consts::PI * self.semi_axes.iter().product::<f64>()
    }

    /// Number of voxel centers inside the ellipsoid.
    pub fn voxel_count(&self, dims: [usize; 3]) -> usize {
        let b = self.bounds(dims);
        let mut n = 0;
        for x in b[0].0..b[0].1 {
            for y in b[1].0..b[1].1 {
                for z in b[2].0..b[2].1 {
                    if self.contains(voxel_center(x, y, z)) {
                        n += 1;
                    }
                }
            }
        }
        n
    }
}

#[inline]
fn voxel_center(x: usize, y: usize, z: usize) -> [f64; 3] {
    [x as f64 + 0.5, y as f64 + 0.5, z as f64 + 0.5]
}

fn normalized_to_voxel(u: f64, d: usize) -> f64 {
    (u + 1.0) * d as f64 / 2.0
}

/// The voxel-space ellipsoids (one, or two mirrored lobes) of a region.
pub fn region_ellipsoids(spec: &SubjectSpec, region: RegionId, dims: [usize; 3]) -> Vec<Ellipsoid> {
    let c = canonical(region);
    let p = spec.region_params[region];
    let semi_axes: [f64; 3] = std::array::from_fn(|k| p.semi_axes[k] * dims[k] as f64 / REFERENCE_RES as f64);
    let lobe = |sign: f64| {
        let center = std::array::from_fn(|k| {
            let u = if k == 0 { sign * c.center[0] + p.offset[0] } else { c.center[k] + p.offset[k] };
            normalized_to_voxel(u, dims[k])
        });
        Ellipsoid { center, semi_axes }
    };
    if c.bilateral {
        vec![lobe(1.0), lobe(-1.0)]
    } else {
        vec![lobe(1.0)]
    }
}

pub fn brain_ellipsoid(spec: &SubjectSpec, dims: [usize; 3]) -> Ellipsoid {
    Ellipsoid {
        center: std::array::from_fn(|k| dims[k] as f64 / 2.0),
        semi_axes: std::array::from_fn(|k| spec.brain_semi_axes[k] * dims[k] as f64 / 2.0),
    }
}

/// Paints the exact label map of a subject.
pub fn paint_labels(spec: &SubjectSpec, dims: [usize; 3]) -> Result<LabelMap, PhantomError> {
    if dims.iter().any(|&d| d < MIN_RENDER_DIM) {
        return Err(PhantomError::DimsTooSmall(dims));
    }
    spec.validate()?;
    let brain = brain_ellipsoid(spec, dims);
    let mut labels = LabelMap::filled(dims, BACKGROUND);
    for x in 0..dims[0] {
        for y in 0..dims[1] {
            for z in 0..dims[2] {
                if brain.contains(voxel_center(x, y, z)) {
                    labels.set(x, y, z, TISSUE);
                }
            }
        }
    }
    // Paint order is label order; later regions overwrite earlier ones.
    for region in RegionId::ALL {
        for e in region_ellipsoids(spec, region, dims) {
            let b = e.bounds(dims);
            for x in b[0].0..b[0].1 {
                for y in b[1].0..b[1].1 {
                    for z in b[2].0..b[2].1 {
                        let p = voxel_center(x, y, z);
                        if !e.contains(p) {
                            continue;
                        }
                        if !brain.contains(p) {
                            return Err(PhantomError::RegionOverflow { region, voxel: [x, y, z] });
                        }
                        labels.set(x, y, z, region.label());
                    }
                }
            }
            // A lobe clipped by the grid edge is also outside the brain.
            for k in 0..3 {
                if e.center[k] - e.semi_axes[k] < 0.0 || e.center[k] + e.semi_axes[k] > dims[k] as f64 {
                    return Err(PhantomError::RegionOverflow { region, voxel: [0, 0, 0] });
                }
            }
        }
    }
    Ok(labels)
}

/// Paints intensities from a label map, then adds clamped Gaussian noise.
pub fn intensities(labels: &LabelMap, noise_sigma: f64, noise_seed: u64) -> Volume3D {
    let mut data: Vec<f32> = labels.data().iter().map(|&l| prototype(l)).collect();
    if noise_sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
        let normal = Normal::new(0.0, noise_sigma).expect("finite sigma");
        for v in &mut data {
            let n: f64 = normal.sample(&mut rng);
            *v = (*v as f64 + n).clamp(0.0, 1.0) as f32;
        }
    }
    Volume3D { dims: labels.dims(), data }
}

/// Renders the image and its exact (pre-noise) label map.
pub fn render_phantom(
    spec: &SubjectSpec,
    dims: [usize; 3],
    cfg: &RenderConfig,
) -> Result<(Volume3D, LabelMap), PhantomError> {
    let labels = paint_labels(spec, dims)?;
    let vol = intensities(&labels, cfg.noise_sigma, spec.noise_seed);
    Ok((vol, labels))
}

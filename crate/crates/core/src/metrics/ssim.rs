//! Distance and structural similarity between volumes.

use serde::{Deserialize, Serialize};

use super::MetricError;
use crate::phantoms::Volume3D;

fn same_dims(a: &Volume3D, b: &Volume3D) -> Result<(), MetricError> {
    if a.dims() == b.dims() {
        Ok(())
    } else {
        Err(MetricError::ShapeMismatch { a: a.dims(), b: b.dims() })
    }
}

/// Mean absolute voxel difference.
pub fn l1_distance(a: &Volume3D, b: &Volume3D) -> Result<f64, MetricError> {
    same_dims(a, b)?;
    let s: f64 = a.data().iter().zip(b.data()).map(|(&p, &q)| (p as f64 - q as f64).abs()).sum();
    Ok(s / a.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SsimParams {
    pub sigma: f64,
    pub radius: usize,
    pub k1: f64,
    pub k2: f64,
    /// Dynamic range of the intensities.
    pub range: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        SsimParams { sigma: 1.5, radius: 3, k1: 0.01, k2: 0.03, range: 1.0 }
    }
}

impl SsimParams {
    pub fn validate(&self) -> Result<(), MetricError> {
        if self.sigma > 0.0 && self.k1 > 0.0 && self.k2 > 0.0 && self.range > 0.0 {
            Ok(())
        } else {
            Err(MetricError::InvalidParams("SSIM sigma, K1, K2 and L must be positive".into()))
        }
    }

    pub fn window(&self) -> usize {
        2 * self.radius + 1
    }

    /// Normalized 1-D Gaussian taps.
    pub fn kernel(&self) -> Vec<f64> {
        let r = self.radius as i64;
        let w: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * self.sigma * self.sigma)).exp()).collect();
        let s: f64 = w.iter().sum();
        w.into_iter().map(|v| v / s).collect()
    }
}

/// Valid-mode separable filtering along one axis of a C-order volume.
fn filter_axis(data: &[f64], dims: [usize; 3], axis: usize, k: &[f64]) -> (Vec<f64>, [usize; 3]) {
    let n = k.len();
    let mut od = dims;
    od[axis] = dims[axis] + 1 - n;
    let stride = match axis {
        0 => dims[1] * dims[2],
        1 => dims[2],
        _ => 1,
    };
    let mut out = vec![0.0f64; od[0] * od[1] * od[2]];
    let mut o = 0;
    for x in 0..od[0] {
        for y in 0..od[1] {
            for z in 0..od[2] {
                let base = (x * dims[1] + y) * dims[2] + z;
                out[o] = k.iter().enumerate().map(|(t, w)| w * data[base + t * stride]).sum();
                o += 1;
            }
        }
    }
    (out, od)
}

fn gaussian_filter(data: &[f64], dims: [usize; 3], k: &[f64]) -> Vec<f64> {
    let (a, d) = filter_axis(data, dims, 0, k);
    let (b, d) = filter_axis(&a, d, 1, k);
    filter_axis(&b, d, 2, k).0
}

/// Mean local SSIM over every voxel whose full window lies inside the volume,
/// with Gaussian-weighted moments and the usual `C1 = (K1 L)^2`,
/// `C2 = (K2 L)^2` stabilizers. Computed in f64.
pub fn ssim3d(a: &Volume3D, b: &Volume3D, p: &SsimParams) -> Result<f64, MetricError> {
    same_dims(a, b)?;
    p.validate()?;
    let dims = a.dims();
    if dims.iter().any(|&d| d < p.window()) {
        return Err(MetricError::TooSmall { dims, window: p.window() });
    }
    let k = p.kernel();
    let x: Vec<f64> = a.data().iter().map(|&v| v as f64).collect();
    let y: Vec<f64> = b.data().iter().map(|&v| v as f64).collect();
    let prod = |f: &dyn Fn(f64, f64) -> f64| -> Vec<f64> { x.iter().zip(&y).map(|(&p, &q)| f(p, q)).collect() };
    let mx = gaussian_filter(&x, dims, &k);
    let my = gaussian_filter(&y, dims, &k);
    let mxx = gaussian_filter(&prod(&|p, _| p * p), dims, &k);
    let myy = gaussian_filter(&prod(&|_, q| q * q), dims, &k);
    let mxy = gaussian_filter(&prod(&|p, q| p * q), dims, &k);
    let c1 = (p.k1 * p.range).powi(2);
    let c2 = (p.k2 * p.range).powi(2);
    let mut sum = 0.0;
    for i in 0..mx.len() {
        let (ux, uy) = (mx[i], my[i]);
        let vx = mxx[i] - ux * ux;
        let vy = myy[i] - uy * uy;
        let cxy = mxy[i] - ux * uy;
        sum += ((2.0 * ux * uy + c1) * (2.0 * cxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
    }
    Ok(sum / mx.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(dims: [usize; 3], seed: u64) -> Volume3D {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Volume3D::from_vec(dims, (0..dims.iter().product()).map(|_| rng.random::<f32>()).collect()).unwrap()
    }

    #[test]
    fn l1_basics() {
        let a = random([8; 3], 1);
        assert_eq!(l1_distance(&a, &a).unwrap(), 0.0);
        let z = Volume3D::filled([4; 3], 0.0);
        let o = Volume3D::filled([4; 3], 1.0);
        assert_eq!(l1_distance(&z, &o).unwrap(), 1.0);
        assert!(l1_distance(&z, &a).is_err());
    }

    #[test]
    fn ssim_identity_and_symmetry() {
        let p = SsimParams::default();
        let a = random([10; 3], 2);
        let b = random([10; 3], 3);
        assert!((ssim3d(&a, &a, &p).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(ssim3d(&a, &b, &p).unwrap(), ssim3d(&b, &a, &p).unwrap());
        assert!(ssim3d(&a, &b, &p).unwrap() < 0.5);
        assert!(matches!(ssim3d(&random([6; 3], 0), &random([6; 3], 1), &p), Err(MetricError::TooSmall { .. })));
    }

    #[test]
    fn kernel_is_normalized_and_symmetric() {
        let k = SsimParams::default().kernel();
        assert_eq!(k.len(), 7);
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert_eq!(k[0], k[6]);
    }
}

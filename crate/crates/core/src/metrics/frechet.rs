//! Fréchet distance between Gaussian fits of two feature sets.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use super::MetricError;

/// Eigenvalues in `[-NEG_EIG_TOL * max(1, λ_max), 0)` are treated as zero.
pub const NEG_EIG_TOL: f64 = 1e-10;

/// Square root of a symmetric positive semi-definite matrix by eigendecomposition.
/// The input is symmetrized first; clearly negative eigenvalues are an error.
pub fn sqrtm_psd(m: &DMatrix<f64>) -> Result<DMatrix<f64>, MetricError> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let scale = eig.eigenvalues.iter().fold(1.0f64, |a, &v| a.max(v.abs()));
    let mut roots = DVector::zeros(eig.eigenvalues.len());
    for (i, &l) in eig.eigenvalues.iter().enumerate() {
        if l < -NEG_EIG_TOL * scale {
            return Err(MetricError::NegativeEigenvalue(l));
        }
        roots[i] = l.max(0.0).sqrt();
    }
    let q = &eig.eigenvectors;
    Ok(q * DMatrix::from_diagonal(&roots) * q.transpose())
}

/// Sample mean and unbiased covariance of row vectors.
pub fn mean_cov(feats: &[Vec<f64>]) -> Result<(DVector<f64>, DMatrix<f64>), MetricError> {
    let n = feats.len();
    if n < 2 {
        return Err(MetricError::InsufficientSamples(n));
    }
    let d = feats[0].len();
    if feats.iter().any(|f| f.len() != d) {
        return Err(MetricError::InvalidParams("feature vectors differ in length".into()));
    }
    let x = DMatrix::from_fn(n, d, |i, j| feats[i][j]);
    let mean = DVector::from_fn(d, |j, _| x.column(j).sum() / n as f64);
    let centered = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mean[j]);
    let cov = centered.transpose() * &centered / (n - 1) as f64;
    Ok((mean, cov))
}

/// `|μa − μb|² + Tr(Σa + Σb − 2 (Σa^½ Σb Σa^½)^½)`, floored at zero.
pub fn frechet_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64, MetricError> {
    let (ma, ca) = mean_cov(a)?;
    let (mb, cb) = mean_cov(b)?;
    if ma.len() != mb.len() {
        return Err(MetricError::InvalidParams("feature sets differ in dimension".into()));
    }
    let sa = sqrtm_psd(&ca)?;
    let inner = &sa * &cb * &sa;
    let cross = sqrtm_psd(&inner)?.trace();
    let d = (&ma - &mb).norm_squared() + ca.trace() + cb.trace() - 2.0 * cross;
    Ok(d.max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn gaussian(n: usize, mean: &[f64], sd: &[f64], seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = Normal::new(0.0, 1.0).unwrap();
        (0..n).map(|_| mean.iter().zip(sd).map(|(m, s)| m + s * z.sample(&mut rng)).collect()).collect()
    }

    #[test]
    fn identical_sets_give_zero() {
        let a = gaussian(200, &[0.0, 1.0, 2.0], &[1.0, 2.0, 0.5], 1);
        assert!(frechet_distance(&a, &a).unwrap() < 1e-6);
    }

    #[test]
    fn diagonal_closed_form() {
        let a = gaussian(20_000, &[0.0, 0.0], &[1.0, 2.0], 2);
        let b = gaussian(20_000, &[0.0, 0.0], &[2.0, 1.0], 3);
        let d = frechet_distance(&a, &b).unwrap();
        assert!((d - 2.0).abs() < 0.2, "{d}");
    }

    #[test]
    fn symmetric_and_permutation_invariant() {
        let a = gaussian(300, &[0.0, 0.5], &[1.0, 1.5], 4);
        let b = gaussian(300, &[1.0, 0.0], &[0.7, 1.0], 5);
        let ab = frechet_distance(&a, &b).unwrap();
        assert!((ab - frechet_distance(&b, &a).unwrap()).abs() < 1e-6);
        let mut ar = a.clone();
        ar.reverse();
        let mut br = b.clone();
        br.rotate_left(7);
        assert!((ab - frechet_distance(&ar, &br).unwrap()).abs() < 1e-6);
    }

    #[test]
    fn too_few_samples() {
        assert!(matches!(frechet_distance(&[vec![1.0]], &[vec![1.0], vec![2.0]]), Err(MetricError::InsufficientSamples(1))));
    }

    #[test]
    fn negative_matrix_rejected() {
        let m = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, -0.5]));
        assert!(matches!(sqrtm_psd(&m), Err(MetricError::NegativeEigenvalue(_))));
        let tiny = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, -1e-14]));
        assert!(sqrtm_psd(&tiny).is_ok());
    }
}

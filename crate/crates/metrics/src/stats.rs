use nalgebra::{DMatrix, DVector, SymmetricEigen};
use streetscape_core::{Error, Result};

/// Eigenvalues below `-PSD_TOLERANCE · max(1, λ_max)` mean the matrix is not
/// a covariance; smaller negative values are round-off and clamp to 0.
pub const PSD_TOLERANCE: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStats {
    pub count: usize,
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl FeatureStats {
    pub fn new(count: usize, mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        if cov.shape() != (d, d) {
            return Err(Error::contract(format!("covariance is {:?}, mean has {d} entries", cov.shape())));
        }
        if count < 2 {
            return Err(Error::contract("feature statistics need at least 2 samples"));
        }
        let scale = cov.amax().max(1.0);
        if (&cov - cov.transpose()).amax() > 1e-12 * scale {
            return Err(Error::contract("covariance is not symmetric"));
        }
        Ok(Self { count, mean, cov })
    }

    /// Sample mean and unbiased covariance.
    pub fn from_features(features: &[Vec<f64>]) -> Result<Self> {
        let n = features.len();
        if n < 2 {
            return Err(Error::contract(format!("feature statistics need at least 2 samples, got {n}")));
        }
        let d = features[0].len();
        if features.iter().any(|f| f.len() != d) {
            return Err(Error::contract("feature vectors differ in length"));
        }
        let x = DMatrix::from_fn(n, d, |i, j| features[i][j]);
        let mean = DVector::from_fn(d, |j, _| x.column(j).sum() / n as f64);
        let centered = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mean[j]);
        let mut cov = centered.transpose() * &centered / (n - 1) as f64;
        // Exact symmetry regardless of summation order.
        cov = (&cov + cov.transpose()) * 0.5;
        Ok(Self { count: n, mean, cov })
    }
}

/// Eigenvalues within this factor of the largest one are round-off; they are
/// zeroed before taking square roots, where `√ε` would amplify them.
const ROUNDOFF: f64 = 1e-12;

fn psd_eigen(m: &DMatrix<f64>, what: &str) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    let sym = (m + m.transpose()) * 0.5;
    let mut eig = SymmetricEigen::new(sym);
    let top = eig.eigenvalues.amax();
    let min = eig.eigenvalues.min();
    if min < -PSD_TOLERANCE * top.max(1.0) {
        return Err(Error::Numerical(format!(
            "{what} is not positive semi-definite: smallest eigenvalue {min:e} (largest {top:e})"
        )));
    }
    eig.eigenvalues.apply(|l| {
        if *l <= ROUNDOFF * top {
            *l = 0.0;
        }
    });
    Ok(eig)
}

/// Square root of a symmetric positive semi-definite matrix.
fn psd_sqrt(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let eig = psd_eigen(m, what)?;
    let roots = eig.eigenvalues.map(f64::sqrt);
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose())
}

/// `tr (Σa Σb)^½` evaluated as `tr (Σa^½ Σb Σa^½)^½`.
fn trace_sqrt_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64> {
    let sa = psd_sqrt(a, "covariance")?;
    let eig = psd_eigen(&(&sa * b * &sa), "covariance product")?;
    Ok(eig.eigenvalues.iter().map(|l| l.sqrt()).sum())
}

/// Fréchet distance between Gaussians fitted to two feature sets:
/// `|μa − μb|² + tr(Σa + Σb − 2 (Σa Σb)^½)`.
///
/// The cross term is averaged over both argument orders, which makes the
/// function exactly symmetric in floating point.
pub fn frechet_distance(a: &FeatureStats, b: &FeatureStats) -> Result<f64> {
    if a.mean.len() != b.mean.len() {
        return Err(Error::contract("frechet_distance: feature dimensions differ"));
    }
    let cross = trace_sqrt_product(&a.cov, &b.cov)? + trace_sqrt_product(&b.cov, &a.cov)?;
    let dm = (&a.mean - &b.mean).norm_squared();
    Ok(dm + (a.cov.trace() + b.cov.trace()) - cross)
}

/// Mean and half-width of a normal-approximation 95 % confidence interval.
pub fn mean_ci(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, f64::NAN);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, 1.96 * (var / n).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use streetscape_core::NoiseRng;

    fn gaussian_1d(mean: f64, var: f64) -> FeatureStats {
        FeatureStats::new(100, DVector::from_element(1, mean), DMatrix::from_element(1, 1, var)).unwrap()
    }

    #[test]
    fn one_dimensional_closed_form() {
        let d = frechet_distance(&gaussian_1d(0.0, 1.0), &gaussian_1d(1.0, 1.0)).unwrap();
        assert!((d - 1.0).abs() < 1e-12);
        // (σa − σb)² for variances 1 and 4.
        let d = frechet_distance(&gaussian_1d(0.0, 1.0), &gaussian_1d(0.0, 4.0)).unwrap();
        assert!((d - 1.0).abs() < 1e-12);
    }

    #[test]
    fn identity_and_symmetry() {
        let mut rng = NoiseRng::new(2);
        let fa: Vec<Vec<f64>> = (0..40).map(|_| (0..8).map(|_| rng.normal()).collect()).collect();
        let fb: Vec<Vec<f64>> = (0..30).map(|_| (0..8).map(|_| rng.normal() * 1.5 + 0.2).collect()).collect();
        let (a, b) = (FeatureStats::from_features(&fa).unwrap(), FeatureStats::from_features(&fb).unwrap());
        assert!(frechet_distance(&a, &a).unwrap().abs() <= 1e-6);
        let (ab, ba) = (frechet_distance(&a, &b).unwrap(), frechet_distance(&b, &a).unwrap());
        assert!((ab - ba).abs() <= 1e-9, "{ab} {ba}");
        assert!(ab > 0.0);
    }

    #[test]
    fn rank_deficient_covariances_are_fine() {
        // 3 samples in 8 dimensions: rank-2 covariance.
        let f: Vec<Vec<f64>> = (0..3).map(|i| (0..8).map(|j| ((i * 8 + j) as f64).sin()).collect()).collect();
        let s = FeatureStats::from_features(&f).unwrap();
        assert!(frechet_distance(&s, &s).unwrap().abs() <= 1e-6);
    }

    #[test]
    fn indefinite_matrix_is_a_numerical_error() {
        let bad =
            FeatureStats::new(10, DVector::zeros(2), DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0])).unwrap();
        let ok = gaussian_1d(0.0, 1.0);
        let ok2 = FeatureStats::new(10, DVector::zeros(2), DMatrix::identity(2, 2)).unwrap();
        assert!(matches!(frechet_distance(&bad, &ok2), Err(Error::Numerical(_))));
        assert!(frechet_distance(&ok, &ok2).is_err());
    }

    #[test]
    fn confidence_interval() {
        let (m, h) = mean_ci(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((h - 1.96 * (5.0f64 / 3.0 / 4.0).sqrt()).abs() < 1e-12);
    }
}

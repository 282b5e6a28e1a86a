use streetscape_core::{Error, ImageTensor, Result};

use crate::extractor::{Extractor, FeatureMap};

const NORM_EPS: f64 = 1e-10;

/// Mean over positions of the squared distance between unit-normalized
/// channel vectors.
fn normalized_distance(a: &FeatureMap, b: &FeatureMap) -> f64 {
    let hw = a.height * a.width;
    let mut total = 0.0;
    for p in 0..hw {
        let norm = |m: &FeatureMap| (0..m.channels).map(|c| m.data[c * hw + p].powi(2)).sum::<f64>().sqrt() + NORM_EPS;
        let (na, nb) = (norm(a), norm(b));
        total += (0..a.channels).map(|c| (a.data[c * hw + p] / na - b.data[c * hw + p] / nb).powi(2)).sum::<f64>();
    }
    total / hw as f64
}

impl Extractor {
    /// Perceptual-style distance: mean over the pixel layer (squared error
    /// scaled to the `[-1, 1]` range) and every feature layer (channel-normalized
    /// squared error).
    pub fn patch_distance(&self, a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
        if a.shape() != b.shape() {
            return Err(Error::contract(format!(
                "patch_similarity: shapes {:?} and {:?} differ",
                a.shape(),
                b.shape()
            )));
        }
        let (ma, mb) = (self.maps(a)?, self.maps(b)?);
        let pixels = &ma[0];
        let n = pixels.data.len() as f64;
        let mut layers =
            vec![pixels.data.iter().zip(&mb[0].data).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / (4.0 * n)];
        layers.extend(ma[1..].iter().zip(&mb[1..]).map(|(x, y)| normalized_distance(x, y)));
        Ok(layers.iter().sum::<f64>() / layers.len() as f64)
    }
}

/// Lower is more similar; 0 exactly for identical images.
pub fn patch_similarity(a: &ImageTensor, b: &ImageTensor, extractor_seed: u64) -> Result<f64> {
    Extractor::new(extractor_seed).patch_distance(a, b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use streetscape_core::NoiseRng;

    #[test]
    fn pseudo_metric_basics() {
        let mut rng = NoiseRng::new(1);
        let a = rng.normal_tensor(3, 16, 16).clamp_photo();
        let b = rng.normal_tensor(3, 16, 16).clamp_photo();
        assert_eq!(patch_similarity(&a, &a, 0).unwrap(), 0.0);
        let (ab, ba) = (patch_similarity(&a, &b, 0).unwrap(), patch_similarity(&b, &a, 0).unwrap());
        assert!(ab > 0.0);
        assert!((ab - ba).abs() <= 1e-9);
        assert!(patch_similarity(&a, &ImageTensor::zeros(3, 8, 8), 0).is_err());
    }
}

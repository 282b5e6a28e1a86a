use streetscape_core::{Error, ImageTensor, NoiseRng, Result};

pub const FEATURE_DIM: usize = 64;
const WIDTHS: [usize; 3] = [16, 32, FEATURE_DIM];
const LEAK: f64 = 0.1;

/// Channel-major activation map.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }
}

struct Conv {
    cin: usize,
    cout: usize,
    weight: Vec<f64>,
    bias: Vec<f64>,
}

impl Conv {
    fn forward(&self, input: &FeatureMap) -> FeatureMap {
        let (h, w) = (input.height, input.width);
        let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
        let mut data = vec![0.0; self.cout * oh * ow];
        for o in 0..self.cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = self.bias[o];
                    for c in 0..self.cin {
                        let base = (o * self.cin + c) * 9;
                        for ky in 0..3 {
                            let y = (2 * oy + ky) as isize - 1;
                            if y < 0 || y >= h as isize {
                                continue;
                            }
                            for kx in 0..3 {
                                let x = (2 * ox + kx) as isize - 1;
                                if x < 0 || x >= w as isize {
                                    continue;
                                }
                                acc += self.weight[base + ky * 3 + kx] * input.at(c, y as usize, x as usize);
                            }
                        }
                    }
                    data[(o * oh + oy) * ow + ox] = if acc > 0.0 { acc } else { LEAK * acc };
                }
            }
        }
        FeatureMap { channels: self.cout, height: oh, width: ow, data }
    }
}

/// Three stride-2 3×3 convolutions with He-scaled Gaussian weights drawn
/// from `seed`, leaky ReLU after each, global average pooling at the end.
pub struct Extractor {
    seed: u64,
    layers: Vec<Conv>,
}

impl Extractor {
    pub fn new(seed: u64) -> Self {
        let mut cin = 3;
        let layers = WIDTHS
            .iter()
            .enumerate()
            .map(|(i, &cout)| {
                let mut rng = NoiseRng::derived(seed, &[i as u64]);
                let std = (2.0 / (9 * cin) as f64).sqrt();
                let weight = (0..cout * cin * 9).map(|_| rng.normal() * std).collect();
                let bias = (0..cout).map(|_| rng.normal() * 0.1).collect();
                let layer = Conv { cin, cout, weight, bias };
                cin = cout;
                layer
            })
            .collect();
        Self { seed, layers }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Input image followed by each layer's activations.
    pub fn maps(&self, image: &ImageTensor) -> Result<Vec<FeatureMap>> {
        let (c, h, w) = image.shape();
        if c != 3 || h == 0 || w == 0 {
            return Err(Error::contract(format!("feature extractor needs 3-channel images, got {:?}", image.shape())));
        }
        let mut maps = vec![FeatureMap {
            channels: c,
            height: h,
            width: w,
            data: image.data().iter().map(|&v| v as f64).collect(),
        }];
        for layer in &self.layers {
            let next = layer.forward(maps.last().unwrap());
            maps.push(next);
        }
        Ok(maps)
    }

    /// Globally pooled last-layer activations.
    pub fn features(&self, image: &ImageTensor) -> Result<Vec<f64>> {
        let maps = self.maps(image)?;
        let last = maps.last().unwrap();
        let n = (last.height * last.width) as f64;
        Ok(last.data.chunks(last.height * last.width).map(|c| c.iter().sum::<f64>() / n).collect())
    }
}

/// One [`FEATURE_DIM`]-vector per image.
pub fn extract_features(images: &[ImageTensor], extractor_seed: u64) -> Result<Vec<Vec<f64>>> {
    if images.is_empty() {
        return Err(Error::contract("extract_features: empty image set"));
    }
    let ex = Extractor::new(extractor_seed);
    images.iter().map(|i| ex.features(i)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shapes_and_determinism() {
        let img = NoiseRng::new(1).normal_tensor(3, 16, 12).clamp_photo();
        let maps = Extractor::new(3).maps(&img).unwrap();
        let dims: Vec<_> = maps.iter().map(|m| (m.channels, m.height, m.width)).collect();
        assert_eq!(dims, vec![(3, 16, 12), (16, 8, 6), (32, 4, 3), (64, 2, 2)]);
        let a = extract_features(std::slice::from_ref(&img), 3).unwrap();
        assert_eq!(a, extract_features(std::slice::from_ref(&img), 3).unwrap());
        assert_eq!(a[0].len(), FEATURE_DIM);
        assert_ne!(a, extract_features(&[img], 4).unwrap());
    }

    #[test]
    fn constant_batch_has_no_feature_variance() {
        let imgs = vec![ImageTensor::filled(3, 16, 16, 0.3); 5];
        let f = extract_features(&imgs, 0).unwrap();
        assert!(f.iter().all(|v| v == &f[0]));
    }

    #[test]
    fn rejects_empty_and_wrong_channels() {
        assert!(matches!(extract_features(&[], 0), Err(Error::Contract(_))));
        assert!(extract_features(&[ImageTensor::zeros(6, 8, 8)], 0).is_err());
    }
}

use streetscape_core::{Error, Result};

pub const MIN_KID_SAMPLES: usize = 16;
/// Samples per block; sets are split into `⌊n / BLOCK⌋` paired blocks.
pub const BLOCK: usize = 100;

fn kernel(x: &[f64], y: &[f64]) -> f64 {
    let dot: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    (dot / x.len() as f64 + 1.0).powi(3)
}

/// Unbiased MMD² of one block of paired samples (the U-statistic over
/// `i ≠ j` of `k(xi,xj) + k(yi,yj) − k(xi,yj) − k(xj,yi)`).
fn block_mmd(x: &[Vec<f64>], y: &[Vec<f64>]) -> f64 {
    let m = x.len();
    let mut sum = 0.0;
    for i in 0..m {
        for j in 0..m {
            if i != j {
                sum += kernel(&x[i], &x[j]) + kernel(&y[i], &y[j]) - kernel(&x[i], &y[j]) - kernel(&x[j], &y[i]);
            }
        }
    }
    sum / (m * (m - 1)) as f64
}

/// Kernel distance with the cubic polynomial kernel `(x·y/d + 1)³`,
/// averaged over equally sized contiguous blocks of both sets.
pub fn kid_mmd(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    let n = a.len().min(b.len());
    if n < MIN_KID_SAMPLES {
        return Err(Error::contract(format!(
            "kid_mmd needs at least {MIN_KID_SAMPLES} samples per set, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let d = a[0].len();
    if d == 0 || a.iter().chain(b).any(|f| f.len() != d) {
        return Err(Error::contract("kid_mmd: feature vectors differ in length"));
    }
    let blocks = (n / BLOCK).max(1);
    let size = n / blocks;
    let total: f64 = (0..blocks).map(|k| block_mmd(&a[k * size..(k + 1) * size], &b[k * size..(k + 1) * size])).sum();
    Ok(total / blocks as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use streetscape_core::NoiseRng;

    #[test]
    fn constant_sets_match_hand_kernel() {
        let d = 4;
        let zeros = vec![vec![0.0; d]; 20];
        let ones = vec![vec![1.0; d]; 20];
        // k(0,0) = 1, k(1,1) = (1 + 1)³ = 8, k(0,1) = 1.
        let v = kid_mmd(&zeros, &ones).unwrap();
        assert!((v - (1.0 + 8.0 - 2.0)).abs() < 1e-12);
        assert_eq!(v, kid_mmd(&ones, &zeros).unwrap());
    }

    #[test]
    fn same_set_is_near_zero() {
        let mut rng = NoiseRng::new(1);
        let f: Vec<Vec<f64>> = (0..256).map(|_| (0..64).map(|_| rng.normal()).collect()).collect();
        assert!(kid_mmd(&f, &f).unwrap().abs() <= 1e-3);
    }

    #[test]
    fn different_distributions_are_positive() {
        let mut rng = NoiseRng::new(2);
        let a: Vec<Vec<f64>> = (0..200).map(|_| (0..8).map(|_| rng.normal()).collect()).collect();
        let b: Vec<Vec<f64>> = (0..200).map(|_| (0..8).map(|_| rng.normal() + 1.0).collect()).collect();
        let v = kid_mmd(&a, &b).unwrap();
        assert!(v > 0.1, "{v}");
        assert!((v - kid_mmd(&b, &a).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn too_few_samples() {
        let f = vec![vec![0.0; 3]; 15];
        assert!(matches!(kid_mmd(&f, &f), Err(Error::Contract(_))));
    }
}

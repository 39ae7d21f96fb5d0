use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::seed::{self, Stream};

use super::DatasetShard;

/// Gaussian blobs: class centers drawn uniformly from `[-1, 1]^d`, samples at
/// `center + spread * N(0, I)`. Labels cycle through the classes so every
/// class is (near-)equally represented.
pub fn synth_blobs(n: usize, d: usize, classes: usize, spread: f32, seed: u64) -> Result<DatasetShard> {
    if classes < 2 {
        return Err(Error::Invalid(format!("synth_blobs needs at least 2 classes, got {classes}")));
    }
    if n == 0 || d == 0 {
        return Err(Error::Invalid("synth_blobs needs n > 0 and d > 0".into()));
    }
    let mut rng = seed::rng(seed, Stream::Synth, &[]);
    let centers: Vec<f32> = (0..classes * d).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    let mut features = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % classes;
        for j in 0..d {
            let z: f32 = StandardNormal.sample(&mut rng);
            features.push(centers[c * d + j] + spread * z);
        }
        labels.push(c);
    }
    DatasetShard::from_flat(vec![d], features, labels, classes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn centers(s: &DatasetShard) -> Vec<Vec<f32>> {
        (0..s.class_count()).map(|c| s.sample(c).to_vec()).collect()
    }

    #[test]
    fn zero_spread_puts_samples_on_centers() {
        let s = synth_blobs(40, 3, 4, 0.0, 5).unwrap();
        let c = centers(&s);
        for i in 0..s.len() {
            assert_eq!(s.sample(i), c[s.labels()[i]].as_slice());
        }
    }

    #[test]
    fn deterministic() {
        assert_eq!(synth_blobs(30, 2, 3, 0.4, 9).unwrap(), synth_blobs(30, 2, 3, 0.4, 9).unwrap());
        assert_ne!(synth_blobs(30, 2, 3, 0.4, 9).unwrap(), synth_blobs(30, 2, 3, 0.4, 10).unwrap());
    }

    #[test]
    fn nearest_center_classifies_tight_blobs_perfectly() {
        for seed in 0..5 {
            let d = 4;
            let c = centers(&synth_blobs(4, d, 4, 0.0, seed).unwrap());
            let dist = |a: &[f32], b: &[f32]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f32>().sqrt();
            let mut min_d = f32::INFINITY;
            for i in 0..4 {
                for j in i + 1..4 {
                    min_d = min_d.min(dist(&c[i], &c[j]));
                }
            }
            let s = synth_blobs(800, d, 4, 0.1 * min_d, seed).unwrap();
            for i in 0..s.len() {
                let x = s.sample(i);
                let pred = (0..4)
                    .min_by(|&a, &b| dist(x, &c[a]).total_cmp(&dist(x, &c[b])))
                    .unwrap();
                assert_eq!(pred, s.labels()[i]);
            }
        }
    }
}

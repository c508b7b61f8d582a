//! Synthetic datasets the teacher is trained on.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::array::DenseArray;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Token noise added to every sinusoid sample.
pub const SINUSOID_NOISE: f64 = 0.05;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToyData {
    /// Each sequence traces a noisy sinusoid: token `i` of a sample is
    /// `A·(sin(ωi + φ), cos(ωi + φ))` with random amplitude, speed and
    /// phase. Extra state dimensions repeat the pattern at higher harmonics.
    #[default]
    Sinusoid,
    /// Every token drawn independently from a two-component Gaussian
    /// mixture; see [`GaussianMixture::two_blobs`].
    Mixture,
}

impl ToyData {
    /// A batch `[batch, seq_len, d_state]`.
    pub fn sample<T: Scalar, R: Rng + ?Sized>(self, batch: usize, seq_len: usize, d_state: usize, rng: &mut R) -> Result<DenseArray<T>> {
        if batch == 0 || seq_len == 0 || d_state == 0 {
            return Err(Error::InvalidArgument("empty data batch".into()));
        }
        let mut out = Vec::with_capacity(batch * seq_len * d_state);
        match self {
            ToyData::Sinusoid => {
                for _ in 0..batch {
                    let amp = rng.random_range(0.5..1.5);
                    let speed = rng.random_range(0.2..0.6);
                    let phase = rng.random_range(0.0..2.0 * PI);
                    for i in 0..seq_len {
                        for k in 0..d_state {
                            let harmonic = (k / 2 + 1) as f64;
                            let a = harmonic * (speed * i as f64 + phase);
                            let clean = if k % 2 == 0 { a.sin() } else { a.cos() } * amp / harmonic;
                            let z: f64 = StandardNormal.sample(rng);
                            out.push(T::of(clean + SINUSOID_NOISE * z));
                        }
                    }
                }
            }
            ToyData::Mixture => {
                let gm = GaussianMixture::two_blobs(d_state);
                for _ in 0..batch * seq_len {
                    out.extend(gm.sample_point(rng).into_iter().map(T::of));
                }
            }
        }
        DenseArray::new(&[batch, seq_len, d_state], out)
    }
}

/// Isotropic Gaussian mixture in `R^d`.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianMixture {
    pub means: Vec<Vec<f64>>,
    pub std: f64,
    pub weights: Vec<f64>,
}

impl GaussianMixture {
    /// Equal-weight components at `±1.5·e₀` with standard deviation 0.4.
    pub fn two_blobs(d: usize) -> Self {
        let mut a = vec![0.0; d];
        let mut b = vec![0.0; d];
        a[0] = -1.5;
        b[0] = 1.5;
        Self {
            means: vec![a, b],
            std: 0.4,
            weights: vec![0.5, 0.5],
        }
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn sample_point<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut idx = self.weights.len() - 1;
        for (i, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                idx = i;
                break;
            }
        }
        self.means[idx]
            .iter()
            .map(|m| {
                let z: f64 = StandardNormal.sample(rng);
                m + self.std * z
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sinusoid_shape_and_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x: DenseArray<f64> = ToyData::Sinusoid.sample(8, 16, 2, &mut rng).unwrap();
        assert_eq!(x.shape(), &[8, 16, 2]);
        assert!(x.all_finite());
        assert!(x.max_abs() < 2.0);
    }

    #[test]
    fn mixture_mean_near_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x: DenseArray<f64> = ToyData::Mixture.sample(4000, 1, 2, &mut rng).unwrap();
        assert!(x.mean().abs() < 0.05);
        assert!(ToyData::Mixture.sample::<f64, _>(0, 1, 2, &mut rng).is_err());
    }
}

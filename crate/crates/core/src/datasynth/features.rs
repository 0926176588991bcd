//! Stand-in acoustic features: a fixed prototype per phoneme, repeated for a
//! few frames, plus Gaussian noise. Features depend on the pronunciation
//! only, never on the spelling.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSynth {
    /// (phonemes + 1)×D; the extra last row is inter-word silence.
    prototypes: Tensor,
    frames_per_phoneme: usize,
    sigma: f64,
}

impl FeatureSynth {
    pub fn new(
        phonemes: usize,
        feat_dim: usize,
        frames_per_phoneme: usize,
        sigma: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let normal = Normal::new(0.0, 1.0).unwrap();
        let mut data: Vec<f64> = (0..(phonemes + 1) * feat_dim)
            .map(|_| normal.sample(rng))
            .collect();
        // Silence is a quiet, fixed frame.
        data[phonemes * feat_dim..]
            .iter_mut()
            .for_each(|x| *x *= 0.1);
        FeatureSynth {
            prototypes: Tensor::new(vec![phonemes + 1, feat_dim], data).unwrap(),
            frames_per_phoneme,
            sigma,
        }
    }

    pub fn silence(&self) -> usize {
        self.prototypes.rows() - 1
    }

    pub fn prototype(&self, id: usize) -> &[f64] {
        self.prototypes.row(id)
    }

    pub fn frames_per_phoneme(&self) -> usize {
        self.frames_per_phoneme
    }

    /// T×D features for `phones` (silence allowed), T = k·len. Values are
    /// rounded through `f32` so that they survive the on-disk format exactly.
    pub fn render(&self, phones: &[usize], rng: &mut impl Rng) -> Result<Tensor> {
        if phones.is_empty() {
            return Err(Error::pre("synth_features", "empty pronunciation"));
        }
        let d = self.prototypes.cols();
        let k = self.frames_per_phoneme;
        let noise = Normal::new(0.0, self.sigma.max(f64::MIN_POSITIVE)).unwrap();
        let mut data = Vec::with_capacity(phones.len() * k * d);
        for &p in phones {
            if p >= self.prototypes.rows() {
                return Err(Error::Index {
                    what: "phoneme id",
                    index: p,
                    size: self.prototypes.rows(),
                });
            }
            let proto = self.prototypes.row(p);
            for _ in 0..k {
                for &v in proto {
                    let x = if self.sigma > 0.0 {
                        v + noise.sample(rng)
                    } else {
                        v
                    };
                    data.push(x as f32 as f64);
                }
            }
        }
        Tensor::new(vec![phones.len() * k, d], data)
    }
}

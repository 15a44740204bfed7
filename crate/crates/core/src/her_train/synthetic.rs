//! Seeded synthetic triplets with a known learnable structure.
//!
//! Each vector is `M · [signal; nuisance]` for a hidden random mixing matrix M.
//! A query and its positive share the signal code, the negative carries its
//! negation, and every vector draws fresh nuisance. With the nuisance scaled up,
//! raw cosine ranks poorly; a head that inverts M and discards the nuisance
//! coordinates ranks almost perfectly.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::EmbeddedTriplet;
use crate::embedder::EmbeddingVector;

#[derive(Debug, Clone, Copy)]
pub struct SyntheticSpec {
    pub dim: usize,
    pub signal_rank: usize,
    pub count: usize,
    /// Nuisance scale relative to the unit-variance signal.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            dim: 16,
            signal_rank: 4,
            count: 500,
            noise: 2.0,
            seed: 20240917,
        }
    }
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

pub fn generate(spec: &SyntheticSpec) -> Vec<EmbeddedTriplet> {
    assert!(spec.signal_rank <= spec.dim);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (d, r) = (spec.dim, spec.signal_rank);
    let scale = 1.0 / (d as f64).sqrt();
    let mixing: Vec<f64> = (0..d * d).map(|_| gauss(&mut rng) * scale).collect();
    let embed = |code: &[f64], sign: f64, rng: &mut ChaCha8Rng| {
        let latent: Vec<f64> = (0..d)
            .map(|i| if i < r { sign * code[i] } else { spec.noise * gauss(rng) })
            .collect();
        let v = mixing
            .chunks_exact(d)
            .map(|row| row.iter().zip(&latent).map(|(m, z)| m * z).sum())
            .collect();
        EmbeddingVector::new(v).expect("finite")
    };
    (0..spec.count)
        .map(|_| {
            let code: Vec<f64> = (0..r).map(|_| gauss(&mut rng)).collect();
            EmbeddedTriplet {
                query: embed(&code, 1.0, &mut rng),
                positive: embed(&code, 1.0, &mut rng),
                negative: embed(&code, -1.0, &mut rng),
            }
        })
        .collect()
}

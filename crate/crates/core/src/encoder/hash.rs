//! Parameter-free baseline encoder: each token id maps to a fixed
//! pseudorandom unit vector, independent of position and context.
//!
//! Useful as a fast control: matching quality with this backend reflects
//! pure lexical overlap between the instance and the choice descriptions.

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::seeds;

#[derive(Debug, Clone)]
pub struct HashEncoder {
    d_model: usize,
    seed: u64,
}

impl HashEncoder {
    pub fn new(d_model: usize, seed: u64) -> Self {
        Self { d_model, seed }
    }

    /// The fixed unit vector for one token id.
    pub fn token_vector(&self, id: u32) -> Array1<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seeds::mix(self.seed, "hash-token", id as u64));
        let mut v: Array1<f64> = Array1::from_shape_fn(self.d_model, |_| rng.gen_range(-1.0..1.0));
        let norm = v.dot(&v).sqrt();
        if norm < 1e-9 {
            v[0] = 1.0;
            return v;
        }
        v / norm
    }

    /// Row t is the vector for ids[t]; no position or context enters.
    pub fn encode(&self, ids: &[u32]) -> Array2<f64> {
        let mut out = Array2::zeros((ids.len(), self.d_model));
        for (t, &id) in ids.iter().enumerate() {
            out.row_mut(t).assign(&self.token_vector(id));
        }
        out
    }
}

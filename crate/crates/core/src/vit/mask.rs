use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which patches of one image are replaced by the mask token. Indices refer
/// to patches (0-based, excluding the class token), so the class token is
/// never masked.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskSpec {
    pub mask_ratio: f32,
    pub seed: u64,
    pub masked_indices: Vec<usize>,
}

impl MaskSpec {
    /// Uniformly random mask of exactly `round(ratio·N)` patches.
    pub fn random(num_patches: usize, mask_ratio: f32, seed: u64) -> Result<Self> {
        if !(0.0..1.0).contains(&mask_ratio) {
            return Err(Error::config("$.mask_ratio", "must lie in [0, 1)"));
        }
        let count = (mask_ratio as f64 * num_patches as f64).round() as usize;
        let mut order: Vec<usize> = (0..num_patches).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let mut masked_indices = order[..count].to_vec();
        masked_indices.sort_unstable();
        Ok(MaskSpec {
            mask_ratio,
            seed,
            masked_indices,
        })
    }

    pub fn none() -> Self {
        MaskSpec {
            mask_ratio: 0.0,
            seed: 0,
            masked_indices: Vec::new(),
        }
    }

    /// Per-patch indicator, 1.0 where masked.
    pub fn indicator(&self, num_patches: usize) -> Vec<f32> {
        let mut v = vec![0.0; num_patches];
        for &i in &self.masked_indices {
            v[i] = 1.0;
        }
        v
    }
}

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::AugmentError;
use crate::volio::Grid3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Fill {
    Zero,
    Noise,
}

/// Patch-aligned mask over a view's patch grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskDescriptor {
    pub grid: [usize; 3],
    /// Masked patch indices (x-fastest over `grid`), in sampling order, unique.
    pub indices: Vec<usize>,
    /// Fill mode of `indices[i]`.
    pub fills: Vec<Fill>,
    pub noise_seed: u64,
}

impl MaskDescriptor {
    pub fn patch_count(&self) -> usize {
        self.grid.iter().product()
    }

    /// Per-patch flag, indexed like the token sequence.
    pub fn token_mask(&self) -> Vec<bool> {
        let mut m = vec![false; self.patch_count()];
        for &i in &self.indices {
            m[i] = true;
        }
        m
    }
}

/// Choose `floor(ratio * count)` distinct patches uniformly, each filled with
/// zeros or noise with probability one half.
pub fn sample_mask(grid: [usize; 3], ratio: f64, seed: u64) -> Result<MaskDescriptor, AugmentError> {
    let count: usize = grid.iter().product();
    if count == 0 {
        return Err(AugmentError::EmptyPatchGrid(grid));
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(AugmentError::Config(format!("mask ratio {ratio} must lie in (0, 1)")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = (ratio * count as f64).floor() as usize;
    let indices = sample(&mut rng, count, n).into_vec();
    let fills = indices.iter().map(|_| if rng.random_bool(0.5) { Fill::Noise } else { Fill::Zero }).collect();
    Ok(MaskDescriptor { grid, indices, fills, noise_seed: rng.random() })
}

/// Replace each masked patch wholly; returns the masked view and the voxel mask.
///
/// Noise is unit Gaussian clamped to [0, 1], drawn patch by patch in
/// descriptor order and x-fastest within a patch.
pub fn apply_mask(view: &Grid3, m: &MaskDescriptor, patch: usize) -> Result<(Grid3, Vec<bool>), AugmentError> {
    let expected = m.grid.map(|g| g * patch);
    if view.extent != expected {
        return Err(AugmentError::GridMismatch { view: view.extent, grid: m.grid, patch });
    }
    let mut out = view.clone();
    let mut voxel_mask = vec![false; view.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(m.noise_seed);
    for (&index, &fill) in m.indices.iter().zip(&m.fills) {
        let [gx, gy] = [m.grid[0], m.grid[1]];
        let origin = [index % gx * patch, index / gx % gy * patch, index / (gx * gy) * patch];
        for z in origin[2]..origin[2] + patch {
            for y in origin[1]..origin[1] + patch {
                for x in origin[0]..origin[0] + patch {
                    let i = view.index(x, y, z);
                    out.data[i] = match fill {
                        Fill::Zero => 0.0,
                        Fill::Noise => {
                            let g: f64 = StandardNormal.sample(&mut rng);
                            g.clamp(0.0, 1.0)
                        }
                    };
                    voxel_mask[i] = true;
                }
            }
        }
    }
    Ok((out, voxel_mask))
}

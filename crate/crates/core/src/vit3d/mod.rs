//! Volumetric vision transformer: linear 3-D patch embedding, pre-norm
//! encoder blocks, a per-token reconstruction decoder, and a CLS-style
//! summariser feeding a weight-normalised projection head.

mod checkpoint;
mod forward;
mod params;

use serde::{Deserialize, Serialize};

use crate::numcore::{NdArray, NumError, Real};
use crate::volio::Grid3;

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use forward::{
    cls_embedding, decode, encode, forward, patchify_embed, summarise, EncoderOutput, Projections, LN_EPS,
};
pub use params::{Block, Model, ModelParams, ModelVars};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("view extent {extent:?} is not divisible by patch edge {patch}")]
    Indivisible { extent: [usize; 3], patch: usize },
    #[error("parameter {name}: expected shape {expected:?}, found {found:?}")]
    ParamShape { name: String, expected: Vec<usize>, found: Vec<usize> },
    #[error("missing parameter {0}")]
    MissingParam(String),
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Num(#[from] NumError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Cubic patch edge in voxels.
    pub patch: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Projection output dimension K.
    pub out_dim: usize,
    pub summariser_heads: usize,
    /// Patch grid of the learned positional table; other grids interpolate it.
    pub pos_grid: [usize; 3],
    /// Standard deviation of the Gaussian weight initialisation.
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    /// Small CPU-trainable preset.
    pub fn desk() -> Self {
        Self {
            patch: 4,
            dim: 64,
            depth: 4,
            heads: 4,
            mlp_ratio: 2,
            out_dim: 256,
            summariser_heads: 8,
            pos_grid: [4, 4, 4],
            init_std: 0.02,
        }
    }

    /// ViT-Base-sized preset for 96-voxel volumes.
    pub fn paper() -> Self {
        Self {
            patch: 16,
            dim: 768,
            depth: 12,
            heads: 12,
            mlp_ratio: 4,
            out_dim: 65536,
            summariser_heads: 8,
            pos_grid: [6, 6, 6],
            init_std: 0.02,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.patch == 0 || self.dim == 0 || self.mlp_ratio == 0 {
            return bad("patch, dim and mlp_ratio must be positive".into());
        }
        for (name, h) in [("heads", self.heads), ("summariser_heads", self.summariser_heads)] {
            if h == 0 || !self.dim.is_multiple_of(h) {
                return bad(format!("dim {} is not divisible by {name} = {h}", self.dim));
            }
        }
        if self.out_dim < 2 {
            return bad(format!("out_dim {} must be at least 2", self.out_dim));
        }
        if self.pos_grid.contains(&0) {
            return bad(format!("pos_grid {:?} has a zero axis", self.pos_grid));
        }
        if !(self.init_std > 0.0 && self.init_std.is_finite()) {
            return bad(format!("init_std {} must be positive", self.init_std));
        }
        Ok(())
    }

    pub fn patch_volume(&self) -> usize {
        self.patch.pow(3)
    }

    pub fn grid_for(&self, extent: [usize; 3]) -> Result<[usize; 3], ModelError> {
        if extent.iter().any(|&n| n == 0 || n % self.patch != 0) {
            return Err(ModelError::Indivisible { extent, patch: self.patch });
        }
        Ok(extent.map(|n| n / self.patch))
    }
}

/// Rows are patches in x-fastest grid order; columns are the patch voxels,
/// also x fastest.
pub fn patchify(view: &Grid3, patch: usize) -> Result<NdArray, ModelError> {
    if view.extent.iter().any(|&n| n == 0 || n % patch != 0) {
        return Err(ModelError::Indivisible { extent: view.extent, patch });
    }
    let grid = view.extent.map(|n| n / patch);
    let pv = patch.pow(3);
    let n_tokens: usize = grid.iter().product();
    let mut data = Vec::with_capacity(n_tokens * pv);
    for gz in 0..grid[2] {
        for gy in 0..grid[1] {
            for gx in 0..grid[0] {
                for z in 0..patch {
                    for y in 0..patch {
                        for x in 0..patch {
                            data.push(view.get(gx * patch + x, gy * patch + y, gz * patch + z) as Real);
                        }
                    }
                }
            }
        }
    }
    Ok(NdArray::from_vec(&[n_tokens, pv], data)?)
}

/// Inverse of [`patchify`].
pub fn unpatchify(rows: &NdArray, grid: [usize; 3], patch: usize) -> Result<Grid3, ModelError> {
    let pv = patch.pow(3);
    let n_tokens: usize = grid.iter().product();
    if rows.shape() != [n_tokens, pv] {
        return Err(ModelError::ParamShape {
            name: "reconstruction".into(),
            expected: vec![n_tokens, pv],
            found: rows.shape().to_vec(),
        });
    }
    let extent = grid.map(|g| g * patch);
    let mut out = Grid3::filled(extent, 0.0);
    let mut it = rows.data().iter();
    for gz in 0..grid[2] {
        for gy in 0..grid[1] {
            for gx in 0..grid[0] {
                for z in 0..patch {
                    for y in 0..patch {
                        for x in 0..patch {
                            let i = out.index(gx * patch + x, gy * patch + y, gz * patch + z);
                            out.data[i] = *it.next().unwrap() as f64;
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Flatten a voxel mask into the [`patchify`] layout.
pub fn patchify_mask(mask: &[bool], extent: [usize; 3], patch: usize) -> Result<Vec<bool>, ModelError> {
    let g = Grid3::new(extent, mask.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect())
        .map_err(|e| ModelError::Config(e.to_string()))?;
    Ok(patchify(&g, patch)?.data().iter().map(|&v| v != 0.0).collect())
}

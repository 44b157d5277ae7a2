use std::rc::Rc;

use super::params::{Block, ModelVars};
use super::{patchify, ModelConfig, ModelError};
use crate::numcore::{Real, SparseMap, Tape, Var};
use crate::volio::Grid3;

pub const LN_EPS: Real = 1e-6;

/// Outputs of the projection branch.
#[derive(Clone, Copy, Debug)]
pub struct Projections {
    /// `1 x K` logits from the CLS-style token.
    pub global: Var,
    /// `N x K` logits, one row per patch token.
    pub patches: Var,
    /// `(N + 1) x D` unit-norm features entering the final layer; row 0 is the CLS token.
    pub features: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct EncoderOutput {
    /// `N x D` encoder output.
    pub tokens: Var,
    pub grid: [usize; 3],
    pub global: Var,
    pub patches: Var,
}

/// Linear embedding of flattened patches plus (interpolated) positional embedding.
pub fn patchify_embed(tape: &mut Tape, vars: &ModelVars, cfg: &ModelConfig, view: &Grid3) -> Result<Var, ModelError> {
    let grid = cfg.grid_for(view.extent)?;
    let x = tape.constant(patchify(view, cfg.patch)?);
    let t = tape.matmul(x, vars.embed_weight)?;
    let t = tape.add_row(t, vars.embed_bias)?;
    let pos = if grid == cfg.pos_grid {
        vars.pos_embed
    } else {
        tape.resample(vars.pos_embed, Rc::new(SparseMap::trilinear(cfg.pos_grid, grid)))?
    };
    Ok(tape.add(t, pos)?)
}

fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var, ModelError> {
    let y = tape.matmul(x, w)?;
    Ok(tape.add_row(y, b)?)
}

fn attention(tape: &mut Tape, b: &Block<Var>, x: Var, heads: usize) -> Result<Var, ModelError> {
    let qkv = linear(tape, x, b.qkv_weight, b.qkv_bias)?;
    let merged = tape.attention(qkv, heads)?;
    linear(tape, merged, b.proj_weight, b.proj_bias)
}

/// `x + MHSA(LN(x))`, then `x + MLP(LN(x))`.
fn block(tape: &mut Tape, b: &Block<Var>, x: Var, heads: usize) -> Result<Var, ModelError> {
    let h = tape.layernorm(x, b.ln1_gain, b.ln1_bias, LN_EPS)?;
    let a = attention(tape, b, h, heads)?;
    let x = tape.add(x, a)?;
    let h = tape.layernorm(x, b.ln2_gain, b.ln2_bias, LN_EPS)?;
    let h = linear(tape, h, b.fc1_weight, b.fc1_bias)?;
    let h = tape.gelu(h);
    let h = linear(tape, h, b.fc2_weight, b.fc2_bias)?;
    Ok(tape.add(x, h)?)
}

/// Encoder blocks over `N x D` tokens.
pub fn encode(tape: &mut Tape, vars: &ModelVars, cfg: &ModelConfig, tokens: Var) -> Result<Var, ModelError> {
    let mut x = tokens;
    for b in &vars.blocks {
        x = block(tape, b, x, cfg.heads)?;
    }
    Ok(x)
}

/// `(N + 1) x D`: the learned summary token prepended to `tokens`, after one attention block.
fn aggregate(tape: &mut Tape, vars: &ModelVars, cfg: &ModelConfig, tokens: Var) -> Result<Var, ModelError> {
    let seq = tape.concat_rows(&[vars.cls_token, tokens])?;
    block(tape, &vars.summariser, seq, cfg.summariser_heads)
}

/// `1 x D` summary embedding of the token sequence, before the projection branch.
pub fn cls_embedding(tape: &mut Tape, vars: &ModelVars, cfg: &ModelConfig, tokens: Var) -> Result<Var, ModelError> {
    let y = aggregate(tape, vars, cfg, tokens)?;
    Ok(tape.slice_rows(y, 0, 1)?)
}

/// CLS-style aggregation followed by the shared projection branch.
pub fn summarise(tape: &mut Tape, vars: &ModelVars, cfg: &ModelConfig, tokens: Var) -> Result<Projections, ModelError> {
    let n = tape.value(tokens).shape()[0];
    let y = aggregate(tape, vars, cfg, tokens)?;
    let h = linear(tape, y, vars.head_fc1_weight, vars.head_fc1_bias)?;
    let h = tape.gelu(h);
    let h = linear(tape, h, vars.head_fc2_weight, vars.head_fc2_bias)?;
    let features = tape.l2_normalize_rows(h);
    let directions = tape.l2_normalize_rows(vars.head_last_direction);
    let logits = tape.matmul_bt(features, directions)?;
    Ok(Projections { global: tape.slice_rows(logits, 0, 1)?, patches: tape.slice_rows(logits, 1, n)?, features })
}

/// Per-token linear map back to patch voxels, `N x patch^3` in patchify layout.
pub fn decode(tape: &mut Tape, vars: &ModelVars, tokens: Var) -> Result<Var, ModelError> {
    linear(tape, tokens, vars.decoder_weight, vars.decoder_bias)
}

/// Embed, encode and summarise one view.
pub fn forward(
    tape: &mut Tape,
    vars: &ModelVars,
    cfg: &ModelConfig,
    view: &Grid3,
) -> Result<EncoderOutput, ModelError> {
    let grid = cfg.grid_for(view.extent)?;
    let embedded = patchify_embed(tape, vars, cfg, view)?;
    let tokens = encode(tape, vars, cfg, embedded)?;
    let p = summarise(tape, vars, cfg, tokens)?;
    Ok(EncoderOutput { tokens, grid, global: p.global, patches: p.patches })
}

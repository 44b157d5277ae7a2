use std::rc::Rc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{dice, hd95, kfold_split, train_indices, DownstreamError, Freeze, SegConfig, SegFoldMetrics, SegReport};
use crate::numcore::{NdArray, Real, SparseMap, Tape, Var};
use crate::train::AdamW;
use crate::vit3d::{encode, patchify_embed, ModelConfig, ModelParams, ModelVars};
use crate::volio::{Grid3, LabelGrid, Volume};

/// Output channels: background plus the two structures.
pub const SEG_CHANNELS: usize = 3;
/// Foreground labels; background is excluded from the Dice loss and from evaluation.
pub const SEG_CLASSES: [u8; 2] = [1, 2];

/// Per-token linear map `D -> C`.
#[derive(Clone, Debug, PartialEq)]
pub struct SegHead {
    pub weight: NdArray,
    pub bias: NdArray,
}

impl SegHead {
    pub fn zeros(dim: usize, channels: usize) -> Self {
        Self { weight: NdArray::zeros(&[dim, channels]), bias: NdArray::zeros(&[channels]) }
    }

    pub fn channels(&self) -> usize {
        self.bias.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegModel {
    pub config: ModelConfig,
    pub encoder: ModelParams,
    pub head: SegHead,
}

/// `voxels x C` logits for one window: token logits upsampled trilinearly
/// to voxel resolution.
fn window_logits(
    tape: &mut Tape,
    cfg: &ModelConfig,
    encoder: &ModelVars,
    weight: Var,
    bias: Var,
    view: &Grid3,
) -> Result<Var, DownstreamError> {
    let grid = cfg.grid_for(view.extent)?;
    let t = patchify_embed(tape, encoder, cfg, view)?;
    let t = encode(tape, encoder, cfg, t)?;
    let l = tape.matmul(t, weight)?;
    let l = tape.add_row(l, bias)?;
    Ok(tape.resample(l, Rc::new(SparseMap::upsample(grid, cfg.patch)))?)
}

impl SegModel {
    /// Extent the positional embedding was built for; training crops and
    /// inference windows use it.
    pub fn window(&self) -> [usize; 3] {
        self.config.pos_grid.map(|g| g * self.config.patch)
    }

    /// Logits for a single window-compatible view.
    pub fn window_logits(&self, view: &Grid3) -> Result<NdArray, DownstreamError> {
        let mut tape = Tape::new();
        let enc = self.encoder.to_tape(&mut tape, false);
        let w = tape.constant(self.head.weight.clone());
        let b = tape.constant(self.head.bias.clone());
        let l = window_logits(&mut tape, &self.config, &enc, w, b, view)?;
        Ok(tape.value(l).clone())
    }

    /// Overlap-averaged logits over the whole volume.
    pub fn logits(&self, volume: &Grid3) -> Result<NdArray, DownstreamError> {
        sliding_window(volume, self.window(), self.head.channels(), |w| self.window_logits(w))
    }

    pub fn predict(&self, volume: &Grid3) -> Result<LabelGrid, DownstreamError> {
        Ok(argmax_labels(&self.logits(volume)?, volume.extent))
    }
}

/// Per-voxel argmax of `voxels x C` logits (lowest channel on ties).
pub fn argmax_labels(logits: &NdArray, extent: [usize; 3]) -> LabelGrid {
    let c = logits.shape()[1];
    let data = logits
        .data()
        .chunks(c)
        .map(|row| {
            let mut best = 0;
            for (k, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = k;
                }
            }
            best as u8
        })
        .collect();
    Grid3 { extent, data }
}

/// Window origins along one axis: stride `w / 2`, with the last window
/// flush against the far edge.
pub fn window_starts(n: usize, w: usize) -> Vec<usize> {
    let stride = (w / 2).max(1);
    let mut s: Vec<usize> = (0..=n - w).step_by(stride).collect();
    if *s.last().unwrap() != n - w {
        s.push(n - w);
    }
    s
}

/// Tile `volume` with half-overlapping windows, run `predict` on each
/// (`window voxels x channels`, x-fastest) and average overlapping logits.
pub fn sliding_window<F>(
    volume: &Grid3,
    window: [usize; 3],
    channels: usize,
    mut predict: F,
) -> Result<NdArray, DownstreamError>
where
    F: FnMut(&Grid3) -> Result<NdArray, DownstreamError>,
{
    let extent = volume.extent;
    if (0..3).any(|a| extent[a] < window[a] || window[a] == 0) {
        return Err(DownstreamError::Window { extent, window });
    }
    let n = volume.len();
    let mut sum = vec![0.0 as Real; n * channels];
    let mut count = vec![0u32; n];
    let starts = [0, 1, 2].map(|a| window_starts(extent[a], window[a]));
    for &z0 in &starts[2] {
        for &y0 in &starts[1] {
            for &x0 in &starts[0] {
                let crop = volume.crop([x0, y0, z0], window).map_err(|_| DownstreamError::Window { extent, window })?;
                let out = predict(&crop)?;
                let expected = [crop.len(), channels];
                if out.shape() != expected {
                    return Err(DownstreamError::Length {
                        what: "window logits",
                        expected: crop.len() * channels,
                        found: out.len(),
                    });
                }
                for z in 0..window[2] {
                    for y in 0..window[1] {
                        for x in 0..window[0] {
                            let src = crop.index(x, y, z);
                            let dst = volume.index(x0 + x, y0 + y, z0 + z);
                            count[dst] += 1;
                            for c in 0..channels {
                                sum[dst * channels + c] += out.data()[src * channels + c];
                            }
                        }
                    }
                }
            }
        }
    }
    for (v, &k) in count.iter().enumerate() {
        for c in 0..channels {
            sum[v * channels + c] /= k as Real;
        }
    }
    Ok(NdArray::from_vec(&[n, channels], sum)?)
}

fn one_hot(labels: &LabelGrid, channels: usize) -> Result<NdArray, DownstreamError> {
    if let Some(&bad) = labels.data.iter().find(|&&l| l as usize >= channels) {
        return Err(DownstreamError::Config(format!("segmentation label {bad} outside 0..{channels}")));
    }
    Ok(NdArray::from_fn(&[labels.len(), channels], |e| {
        (labels.data[e / channels] as usize == e % channels) as u8 as Real
    }))
}

fn random_crop(rng: &mut ChaCha8Rng, extent: [usize; 3], window: [usize; 3]) -> [usize; 3] {
    [0, 1, 2].map(|a| rng.random_range(0..=extent[a] - window[a]))
}

/// Soft Dice over the foreground channels plus voxel cross-entropy.
fn seg_loss(tape: &mut Tape, logits: Var, target: &NdArray, smooth: Real) -> Result<Var, DownstreamError> {
    let probs = tape.softmax(logits)?;
    let channels: Vec<usize> = SEG_CLASSES.iter().map(|&c| c as usize).collect();
    let d = tape.soft_dice_loss(probs, target, &channels, smooth)?;
    let ce = tape.cross_entropy(target, logits, None)?;
    Ok(tape.add(d, ce)?)
}

/// Fine-tune on `train` for `cfg.epochs`, evaluating on `test` every
/// `cfg.eval_every` epochs; returns the model and metrics of the epoch with
/// the best mean held-out Dice.
#[allow(clippy::too_many_arguments)]
pub fn train_segmentation(
    volumes: &[Volume],
    labels: &[LabelGrid],
    encoder: &ModelParams,
    model: &ModelConfig,
    train: &[usize],
    test: &[usize],
    cfg: &SegConfig,
    seed: u64,
) -> Result<(SegModel, SegFoldMetrics), DownstreamError> {
    let mut m =
        SegModel { config: model.clone(), encoder: encoder.clone(), head: SegHead::zeros(model.dim, SEG_CHANNELS) };
    let window = m.window();
    let full = cfg.freeze == Freeze::Full;
    let mut names: Vec<String> = if full { m.encoder.names() } else { Vec::new() };
    names.extend(["seg.weight".into(), "seg.bias".into()]);
    let mut opt = {
        let mut p: Vec<&NdArray> = if full { m.encoder.values() } else { Vec::new() };
        p.extend([&m.head.weight, &m.head.bias]);
        AdamW::new(p, 0.0)
    };
    let targets = labels.iter().map(|l| one_hot(l, SEG_CHANNELS)).collect::<Result<Vec<_>, _>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order = train.to_vec();
    let mut best: Option<(SegModel, SegFoldMetrics)> = None;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        for &i in &order {
            let v = &volumes[i].grid;
            let origin = random_crop(&mut rng, v.extent, window);
            let (view, target) = if v.extent == window {
                (v.clone(), targets[i].clone())
            } else {
                let crop =
                    labels[i].crop(origin, window).map_err(|_| DownstreamError::Window { extent: v.extent, window })?;
                (
                    v.crop(origin, window).map_err(|_| DownstreamError::Window { extent: v.extent, window })?,
                    one_hot(&crop, SEG_CHANNELS)?,
                )
            };
            let mut tape = Tape::new();
            let enc = m.encoder.to_tape(&mut tape, full);
            let w = tape.param(m.head.weight.clone());
            let b = tape.param(m.head.bias.clone());
            let logits = window_logits(&mut tape, model, &enc, w, b, &view)?;
            let loss = seg_loss(&mut tape, logits, &target, cfg.dice_smooth as Real)?;
            if !tape.value(loss).item().is_finite() {
                return Err(DownstreamError::NonFinite("segmentation loss"));
            }
            let mut grads = tape.backward(loss)?;
            let mut g = Vec::new();
            if full {
                for (&v, p) in enc.values().into_iter().zip(m.encoder.values()) {
                    g.push(grads.take(v).unwrap_or_else(|| NdArray::zeros(p.shape())));
                }
            }
            g.push(grads.take(w).expect("head weight is on the loss path"));
            g.push(grads.take(b).expect("head bias is on the loss path"));
            let mut params: Vec<&mut NdArray> = if full { m.encoder.values_mut() } else { Vec::new() };
            params.push(&mut m.head.weight);
            params.push(&mut m.head.bias);
            opt.update(&names, &mut params, &g, cfg.lr as Real)?;
        }
        if epoch % cfg.eval_every == 0 || epoch == cfg.epochs {
            let metrics = evaluate(&m, volumes, labels, test, epoch)?;
            let score = |f: &SegFoldMetrics| f.dice.iter().sum::<f64>();
            if best.as_ref().is_none_or(|(_, b)| score(&metrics) > score(b)) {
                best = Some((m.clone(), metrics));
            }
        }
    }
    Ok(best.expect("at least one evaluation"))
}

/// Per-class mean Dice and HD95 of `model` over the `test` volumes.
pub fn evaluate(
    model: &SegModel,
    volumes: &[Volume],
    labels: &[LabelGrid],
    test: &[usize],
    epoch: usize,
) -> Result<SegFoldMetrics, DownstreamError> {
    let k = SEG_CLASSES.len();
    let mut dice_sum = vec![0.0; k];
    let mut hd_sum = vec![0.0; k];
    let mut hd_n = vec![0usize; k];
    let mut undefined = vec![0usize; k];
    for &i in test {
        let pred = model.predict(&volumes[i].grid)?;
        for (c, &class) in SEG_CLASSES.iter().enumerate() {
            dice_sum[c] += dice(&pred.data, &labels[i].data, class)?;
            match hd95(&pred, &labels[i], class, volumes[i].spacing) {
                Ok(h) => {
                    hd_sum[c] += h;
                    hd_n[c] += 1;
                }
                Err(DownstreamError::EmptyMask { .. }) => undefined[c] += 1,
                Err(e) => return Err(e),
            }
        }
    }
    let n = test.len() as f64;
    Ok(SegFoldMetrics {
        fold: 0,
        best_epoch: epoch,
        dice: dice_sum.iter().map(|d| d / n).collect(),
        hd95: (0..k).map(|c| (hd_n[c] > 0).then(|| hd_sum[c] / hd_n[c] as f64)).collect(),
        hd95_undefined: undefined,
    })
}

/// K-fold segmentation fine-tuning with per-fold best-epoch metrics.
pub fn run_segmentation(
    volumes: &[Volume],
    labels: &[LabelGrid],
    encoder: &ModelParams,
    model: &ModelConfig,
    cfg: &SegConfig,
) -> Result<SegReport, DownstreamError> {
    cfg.validate()?;
    if volumes.len() != labels.len() {
        return Err(DownstreamError::Length { what: "label maps", expected: volumes.len(), found: labels.len() });
    }
    for (v, l) in volumes.iter().zip(labels) {
        if v.extent() != l.extent {
            return Err(DownstreamError::Length { what: "label voxels", expected: v.grid.len(), found: l.len() });
        }
    }
    let folds = kfold_split(&vec![0; volumes.len()], cfg.folds, cfg.seed)?;
    let mut rows = Vec::with_capacity(folds.len());
    for (fold, test) in folds.iter().enumerate() {
        let seed = cfg.seed.wrapping_mul(1000).wrapping_add(fold as u64);
        let (_, mut metrics) =
            train_segmentation(volumes, labels, encoder, model, &train_indices(&folds, fold), test, cfg, seed)?;
        metrics.fold = fold;
        rows.push(metrics);
    }
    Ok(SegReport::from_folds(SEG_CLASSES.to_vec(), rows))
}

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{
    auroc, kfold_split, subsample, threshold_metrics, train_indices, youden, DownstreamError, FoldMetrics, Freeze,
    ProbeConfig, ProbeReport,
};
use crate::numcore::{NdArray, Real, Tape, Var};
use crate::train::AdamW;
use crate::vit3d::{cls_embedding, encode, patchify_embed, ModelConfig, ModelParams, ModelVars};
use crate::volio::Volume;

fn embed(tape: &mut Tape, vars: &ModelVars, cfg: &ModelConfig, v: &Volume) -> Result<Var, DownstreamError> {
    let t = patchify_embed(tape, vars, cfg, &v.grid)?;
    let t = encode(tape, vars, cfg, t)?;
    Ok(cls_embedding(tape, vars, cfg, t)?)
}

/// Summary embedding of every volume with fixed encoder weights.
pub fn extract_features(
    encoder: &ModelParams,
    cfg: &ModelConfig,
    volumes: &[Volume],
) -> Result<Vec<Vec<Real>>, DownstreamError> {
    volumes
        .iter()
        .map(|v| {
            let mut tape = Tape::new();
            let vars = encoder.to_tape(&mut tape, false);
            let f = embed(&mut tape, &vars, cfg, v)?;
            Ok(tape.value(f).data().to_vec())
        })
        .collect()
}

/// Two-way linear classifier on (optionally standardised) summary embeddings.
#[derive(Clone, Debug)]
pub struct LinearProbe {
    /// `D x 2`.
    pub weight: NdArray,
    pub bias: NdArray,
    pub mean: Vec<Real>,
    pub scale: Vec<Real>,
    /// Fine-tuned encoder; `None` when the encoder was frozen.
    pub encoder: Option<ModelParams>,
}

impl LinearProbe {
    /// Probability of class 1.
    pub fn score(&self, feature: &[Real]) -> f64 {
        let d = feature.len();
        let mut logit = [self.bias.data()[0], self.bias.data()[1]];
        for (i, &f) in feature.iter().enumerate() {
            let x = (f - self.mean[i]) / self.scale[i];
            logit[0] += x * self.weight.data()[i * 2];
            logit[1] += x * self.weight.data()[i * 2 + 1];
        }
        debug_assert_eq!(d, self.mean.len());
        1.0 / (1.0 + (logit[0] - logit[1]).exp()) as f64
    }
}

fn column_stats(rows: &[&[Real]]) -> (Vec<Real>, Vec<Real>) {
    let d = rows[0].len();
    let n = rows.len() as Real;
    let mut mean = vec![0.0; d];
    for r in rows {
        for (m, v) in mean.iter_mut().zip(*r) {
            *m += v / n;
        }
    }
    let mut scale = vec![0.0; d];
    for r in rows {
        for ((s, v), m) in scale.iter_mut().zip(*r).zip(&mean) {
            *s += (v - m) * (v - m) / n;
        }
    }
    (mean, scale.into_iter().map(|s| s.sqrt().max(1e-8)).collect())
}

/// Train a probe on `train` with cross-entropy, optionally class-balanced
/// (`n / (2 n_c)`). Frozen mode uses `features`; full mode fine-tunes a copy
/// of `encoder` end to end.
#[allow(clippy::too_many_arguments)]
pub fn train_linear_probe(
    encoder: &ModelParams,
    model: &ModelConfig,
    volumes: &[Volume],
    features: &[Vec<Real>],
    labels: &[u8],
    train: &[usize],
    cfg: &ProbeConfig,
    seed: u64,
) -> Result<LinearProbe, DownstreamError> {
    let d = model.dim;
    let n = train.len() as Real;
    let n1 = train.iter().filter(|&&i| labels[i] == 1).count() as Real;
    let class_weight = |c: u8| {
        if !cfg.class_balanced {
            1.0
        } else if c == 1 {
            n / (2.0 * n1)
        } else {
            n / (2.0 * (n - n1))
        }
    };
    let frozen = cfg.freeze == Freeze::Frozen;
    let (mean, scale) = if frozen && cfg.standardize {
        column_stats(&train.iter().map(|&i| features[i].as_slice()).collect::<Vec<_>>())
    } else {
        (vec![0.0; d], vec![1.0; d])
    };

    let mut enc = if frozen { None } else { Some(encoder.clone()) };
    let mut weight = NdArray::zeros(&[d, 2]);
    let mut bias = NdArray::zeros(&[2]);
    let mut names: Vec<String> = enc.as_ref().map(|e| e.names()).unwrap_or_default();
    names.extend(["probe.weight".into(), "probe.bias".into()]);
    let mut opt = {
        let mut shapes: Vec<&NdArray> = enc.as_ref().map(|e| e.values()).unwrap_or_default();
        shapes.extend([&weight, &bias]);
        AdamW::new(shapes, 0.0)
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order = train.to_vec();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let mut tape = Tape::new();
            let enc_vars = enc.as_ref().map(|e| e.to_tape(&mut tape, true));
            let x = match &enc_vars {
                None => {
                    let rows: Vec<Real> = batch
                        .iter()
                        .flat_map(|&i| features[i].iter().zip(&mean).zip(&scale).map(|((v, m), s)| (v - m) / s))
                        .collect();
                    tape.constant(NdArray::from_vec(&[batch.len(), d], rows)?)
                }
                Some(vars) => {
                    let rows = batch
                        .iter()
                        .map(|&i| embed(&mut tape, vars, model, &volumes[i]))
                        .collect::<Result<Vec<_>, _>>()?;
                    tape.concat_rows(&rows)?
                }
            };
            let wv = tape.param(weight.clone());
            let bv = tape.param(bias.clone());
            let logits = tape.matmul(x, wv)?;
            let logits = tape.add_row(logits, bv)?;
            let target =
                NdArray::from_fn(&[batch.len(), 2], |e| (labels[batch[e / 2]] as usize == e % 2) as u8 as Real);
            let w: Vec<Real> = batch.iter().map(|&i| class_weight(labels[i])).collect();
            let ce = tape.cross_entropy(&target, logits, Some(&w))?;
            let loss = tape.scale(ce, w.iter().sum::<Real>() / batch.len() as Real);
            let mut grads = tape.backward(loss)?;
            let mut g: Vec<NdArray> = Vec::new();
            if let (Some(vars), Some(e)) = (&enc_vars, &enc) {
                for (&v, p) in vars.values().into_iter().zip(e.values()) {
                    g.push(grads.take(v).unwrap_or_else(|| NdArray::zeros(p.shape())));
                }
            }
            g.push(grads.take(wv).expect("probe weight is on the loss path"));
            g.push(grads.take(bv).expect("probe bias is on the loss path"));
            let mut params: Vec<&mut NdArray> = enc.as_mut().map(|e| e.values_mut()).unwrap_or_default();
            params.push(&mut weight);
            params.push(&mut bias);
            opt.update(&names, &mut params, &g, cfg.lr as Real)?;
        }
    }
    Ok(LinearProbe { weight, bias, mean, scale, encoder: enc })
}

/// Stratified k-fold linear probing, repeated for every training fraction.
pub fn run_probe(
    volumes: &[Volume],
    labels: &[u8],
    encoder: &ModelParams,
    model: &ModelConfig,
    cfg: &ProbeConfig,
) -> Result<ProbeReport, DownstreamError> {
    cfg.validate()?;
    if volumes.len() != labels.len() {
        return Err(DownstreamError::Length { what: "labels", expected: volumes.len(), found: labels.len() });
    }
    if let Some(&bad) = labels.iter().find(|&&l| l > 1) {
        return Err(DownstreamError::Config(format!("classification labels must be 0 or 1, found {bad}")));
    }
    let folds = kfold_split(labels, cfg.folds, cfg.seed)?;
    let features = if cfg.freeze == Freeze::Frozen { extract_features(encoder, model, volumes)? } else { Vec::new() };
    let mut rows = Vec::new();
    for &fraction in &cfg.fractions {
        for (fold, test) in folds.iter().enumerate() {
            let seed = cfg.seed.wrapping_mul(1000).wrapping_add(fold as u64);
            let train = subsample(&train_indices(&folds, fold), labels, fraction, seed)?;
            let probe = train_linear_probe(encoder, model, volumes, &features, labels, &train, cfg, seed)?;
            let test_features = match &probe.encoder {
                None => test.iter().map(|&i| features[i].clone()).collect(),
                Some(e) => extract_features(e, model, &test.iter().map(|&i| volumes[i].clone()).collect::<Vec<_>>())?,
            };
            let scores: Vec<f64> = test_features.iter().map(|f| probe.score(f)).collect();
            let truth: Vec<bool> = test.iter().map(|&i| labels[i] == 1).collect();
            rows.push(FoldMetrics {
                fraction,
                fold,
                train_size: train.len(),
                test_size: test.len(),
                auroc: auroc(&scores, &truth)?,
                fixed: threshold_metrics(&scores, &truth, 0.5)?,
                youden: youden(&scores, &truth)?,
            });
        }
    }
    Ok(ProbeReport::from_folds(rows, &cfg.fractions))
}

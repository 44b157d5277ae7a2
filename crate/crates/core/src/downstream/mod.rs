//! Transfer evaluation: a linear probe on the summary embedding, a
//! per-token segmentation head, cross-validation and metrics.

mod cv;
mod metrics;
mod probe;
mod seg;

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::numcore::NumError;
use crate::train::TrainError;
use crate::vit3d::ModelError;

pub use cv::{kfold_split, subsample, train_indices};
pub use metrics::{
    auroc, boundary, dice, hd95, midranks, percentile, squared_distance_transform, threshold_metrics, youden,
    ThresholdMetrics,
};
pub use probe::{extract_features, run_probe, train_linear_probe, LinearProbe};
pub use seg::{
    argmax_labels, evaluate as evaluate_segmentation, run_segmentation, sliding_window, train_segmentation,
    window_starts, SegHead, SegModel, SEG_CHANNELS, SEG_CLASSES,
};

#[derive(Debug, thiserror::Error)]
pub enum DownstreamError {
    #[error("need both classes, got {positives} positive and {negatives} negative")]
    SingleClass { positives: usize, negatives: usize },
    #[error("{what}: expected length {expected}, found {found}")]
    Length { what: &'static str, expected: usize, found: usize },
    #[error("non-finite {0}")]
    NonFinite(&'static str),
    #[error("class {class} has an empty {} mask", if *prediction_empty { "predicted" } else { "reference" })]
    EmptyMask { class: u8, prediction_empty: bool },
    #[error("cannot split {n} samples into {k} folds")]
    Folds { k: usize, n: usize },
    #[error("class {class} has {members} members, fewer than {k} folds")]
    SmallClass { class: u8, members: usize, k: usize },
    #[error("fraction {0} outside (0, 1]")]
    Fraction(f64),
    #[error("volume extent {extent:?} is smaller than window {window:?}")]
    Window { extent: [usize; 3], window: [usize; 3] },
    #[error("invalid probe config: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Num(#[from] NumError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Freeze {
    /// Encoder weights fixed; only the head trains.
    Frozen,
    /// Encoder and head train together.
    Full,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub freeze: Freeze,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Weight each class by `n / (2 n_c)` in the loss.
    pub class_balanced: bool,
    /// Standardise frozen features with training-fold statistics.
    pub standardize: bool,
    pub folds: usize,
    pub fractions: Vec<f64>,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            freeze: Freeze::Frozen,
            epochs: 20,
            lr: 1e-4,
            batch_size: 8,
            class_balanced: false,
            standardize: true,
            folds: 5,
            fractions: vec![0.2, 0.4, 0.6, 0.8, 1.0],
            seed: 0,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<(), DownstreamError> {
        let bad = |m: String| Err(DownstreamError::Config(m));
        if self.folds < 2 {
            return bad(format!("folds {} must be at least 2", self.folds));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr {} must be positive", self.lr));
        }
        if self.fractions.is_empty() {
            return bad("fractions is empty".into());
        }
        if let Some(f) = self.fractions.iter().find(|f| !(**f > 0.0 && **f <= 1.0)) {
            return Err(DownstreamError::Fraction(*f));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegConfig {
    pub freeze: Freeze,
    pub epochs: usize,
    pub lr: f64,
    pub folds: usize,
    /// Evaluate on the held-out fold every this many epochs; the best is kept.
    pub eval_every: usize,
    pub dice_smooth: f64,
    pub seed: u64,
}

impl Default for SegConfig {
    fn default() -> Self {
        Self { freeze: Freeze::Full, epochs: 50, lr: 1e-4, folds: 5, eval_every: 1, dice_smooth: 1e-5, seed: 0 }
    }
}

impl SegConfig {
    pub fn validate(&self) -> Result<(), DownstreamError> {
        if self.folds < 2 || self.epochs == 0 || self.eval_every == 0 {
            return Err(DownstreamError::Config("folds >= 2, epochs > 0 and eval_every > 0 required".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(DownstreamError::Config(format!("lr {} must be positive", self.lr)));
        }
        Ok(())
    }
}

/// Mean and sample standard deviation (`n - 1` denominator; 0 for one value).
pub fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldMetrics {
    pub fraction: f64,
    pub fold: usize,
    pub train_size: usize,
    pub test_size: usize,
    pub auroc: f64,
    /// At the fixed 0.5 probability threshold.
    pub fixed: ThresholdMetrics,
    /// At the held-out fold's Youden-optimal threshold.
    pub youden: ThresholdMetrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FractionSummary {
    pub fraction: f64,
    pub auroc_mean: f64,
    pub auroc_sd: f64,
    pub sensitivity_mean: f64,
    pub sensitivity_sd: f64,
    pub specificity_mean: f64,
    pub specificity_sd: f64,
    pub youden_sensitivity_mean: f64,
    pub youden_specificity_mean: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub folds: Vec<FoldMetrics>,
    pub summary: Vec<FractionSummary>,
}

impl ProbeReport {
    pub(crate) fn from_folds(folds: Vec<FoldMetrics>, fractions: &[f64]) -> Self {
        let summary = fractions
            .iter()
            .map(|&f| {
                let rows: Vec<&FoldMetrics> = folds.iter().filter(|r| r.fraction == f).collect();
                let col = |g: &dyn Fn(&FoldMetrics) -> f64| mean_sd(&rows.iter().map(|r| g(r)).collect::<Vec<_>>());
                let (auroc_mean, auroc_sd) = col(&|r| r.auroc);
                let (sensitivity_mean, sensitivity_sd) = col(&|r| r.fixed.sensitivity);
                let (specificity_mean, specificity_sd) = col(&|r| r.fixed.specificity);
                FractionSummary {
                    fraction: f,
                    auroc_mean,
                    auroc_sd,
                    sensitivity_mean,
                    sensitivity_sd,
                    specificity_mean,
                    specificity_sd,
                    youden_sensitivity_mean: col(&|r| r.youden.sensitivity).0,
                    youden_specificity_mean: col(&|r| r.youden.specificity).0,
                }
            })
            .collect();
        Self { folds, summary }
    }

    /// Per-fold rows followed by a mean ± SD footer per fraction.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:>8} {:>4} {:>5} {:>6} {:>7} {:>6} {:>6} {:>9} {:>6} {:>6}",
            "fraction", "fold", "train", "auroc", "thresh", "sens", "spec", "youden_t", "y_sens", "y_spec"
        );
        for r in &self.folds {
            let _ = writeln!(
                s,
                "{:>8.2} {:>4} {:>5} {:>6.3} {:>7.3} {:>6.3} {:>6.3} {:>9.4} {:>6.3} {:>6.3}",
                r.fraction,
                r.fold,
                r.train_size,
                r.auroc,
                r.fixed.threshold,
                r.fixed.sensitivity,
                r.fixed.specificity,
                r.youden.threshold,
                r.youden.sensitivity,
                r.youden.specificity
            );
        }
        let _ = writeln!(s);
        for m in &self.summary {
            let _ = writeln!(
                s,
                "fraction {:.2}: AUROC {:.3} ± {:.3}, sensitivity {:.3} ± {:.3}, specificity {:.3} ± {:.3}",
                m.fraction,
                m.auroc_mean,
                m.auroc_sd,
                m.sensitivity_mean,
                m.sensitivity_sd,
                m.specificity_mean,
                m.specificity_sd
            );
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegFoldMetrics {
    pub fold: usize,
    pub best_epoch: usize,
    /// Mean Dice over held-out volumes, per foreground class.
    pub dice: Vec<f64>,
    /// Mean HD95 over held-out volumes where both masks are non-empty; `None`
    /// when no volume qualifies.
    pub hd95: Vec<Option<f64>>,
    /// Held-out volumes whose HD95 was undefined, per class.
    pub hd95_undefined: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegReport {
    pub classes: Vec<u8>,
    pub folds: Vec<SegFoldMetrics>,
    pub dice_mean: Vec<f64>,
    pub dice_sd: Vec<f64>,
    pub hd95_mean: Vec<f64>,
    pub hd95_sd: Vec<f64>,
}

impl SegReport {
    pub(crate) fn from_folds(classes: Vec<u8>, folds: Vec<SegFoldMetrics>) -> Self {
        let mut r = Self { classes, folds, dice_mean: vec![], dice_sd: vec![], hd95_mean: vec![], hd95_sd: vec![] };
        for c in 0..r.classes.len() {
            let (m, s) = mean_sd(&r.folds.iter().map(|f| f.dice[c]).collect::<Vec<_>>());
            r.dice_mean.push(m);
            r.dice_sd.push(s);
            let (m, s) = mean_sd(&r.folds.iter().filter_map(|f| f.hd95[c]).collect::<Vec<_>>());
            r.hd95_mean.push(m);
            r.hd95_sd.push(s);
        }
        r
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = write!(s, "{:>4} {:>10}", "fold", "best_epoch");
        for c in &self.classes {
            let _ = write!(s, " {:>7} {:>7}", format!("dice_{c}"), format!("hd95_{c}"));
        }
        let _ = writeln!(s);
        for f in &self.folds {
            let _ = write!(s, "{:>4} {:>10}", f.fold, f.best_epoch);
            for c in 0..self.classes.len() {
                let hd = f.hd95[c].map_or("n/a".to_string(), |v| format!("{v:.3}"));
                let _ = write!(s, " {:>7.3} {:>7}", f.dice[c], hd);
            }
            let _ = writeln!(s);
        }
        let _ = writeln!(s);
        for (c, class) in self.classes.iter().enumerate() {
            let hd = if self.hd95_mean[c].is_finite() {
                format!("{:.3} ± {:.3} mm", self.hd95_mean[c], self.hd95_sd[c])
            } else {
                "undefined".to_string()
            };
            let _ = writeln!(s, "class {class}: Dice {:.3} ± {:.3}, HD95 {hd}", self.dice_mean[c], self.dice_sd[c]);
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sample_standard_deviation() {
        let (m, s) = mean_sd(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((s - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert_eq!(mean_sd(&[2.0]), (2.0, 0.0));
    }
}

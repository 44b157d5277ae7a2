//! Self-distillation objective: centred and sharpened teacher targets,
//! image-level and token-level cross-entropy, masked reconstruction, and
//! the EMA teacher.

mod objective;

use serde::{Deserialize, Serialize};

use crate::numcore::{NdArray, NumError, Real, Tape, Var};
use crate::vit3d::{ModelError, ModelParams};

pub use objective::{evaluate_views, StepOutputs};

#[derive(Debug, thiserror::Error)]
pub enum SslError {
    #[error("invalid objective config: {0}")]
    Config(String),
    #[error("{what}: expected {expected}, found {found}")]
    Mismatch { what: &'static str, expected: usize, found: usize },
    #[error("need at least 2 views, got {0}")]
    TooFewViews(usize),
    #[error("reconstruction mask selects no voxels")]
    EmptyMask,
    #[error("parameter {name}: teacher shape {teacher:?} differs from student shape {student:?}")]
    ParamShape { name: String, teacher: Vec<usize>, student: Vec<usize> },
    #[error(transparent)]
    Num(#[from] NumError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TemperatureConfig {
    pub student: Real,
    pub teacher_start: Real,
    pub teacher_end: Real,
    /// Epochs of linear teacher warmup; constant afterwards.
    pub warmup_epochs: usize,
}

impl Default for TemperatureConfig {
    fn default() -> Self {
        Self { student: 0.1, teacher_start: 0.04, teacher_end: 0.07, warmup_epochs: 10 }
    }
}

impl TemperatureConfig {
    pub fn validate(&self) -> Result<(), SslError> {
        let temps = [self.student, self.teacher_start, self.teacher_end];
        if temps.iter().any(|t| !(t.is_finite() && *t > 0.0)) {
            return Err(SslError::Config(format!("temperatures must be positive, got {temps:?}")));
        }
        if self.teacher_start > self.student || self.teacher_end > self.student {
            return Err(SslError::Config(format!(
                "teacher temperature ({}, {}) exceeds student temperature {}",
                self.teacher_start, self.teacher_end, self.student
            )));
        }
        Ok(())
    }

    /// Teacher temperature at `epoch`, which may be fractional.
    pub fn teacher_at(&self, epoch: f64) -> Real {
        if self.warmup_epochs == 0 {
            return self.teacher_end;
        }
        let t = (epoch / self.warmup_epochs as f64).clamp(0.0, 1.0) as Real;
        self.teacher_start + (self.teacher_end - self.teacher_start) * t
    }
}

/// Running means of raw teacher logits; one vector per head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CenterState {
    pub global: Vec<Real>,
    pub patch: Vec<Real>,
    pub momentum: Real,
}

impl CenterState {
    pub fn new(k: usize, momentum: Real) -> Result<Self, SslError> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(SslError::Config(format!("center momentum {momentum} outside [0, 1)")));
        }
        Ok(Self { global: vec![0.0; k], patch: vec![0.0; k], momentum })
    }

    /// Fold in one mini-batch of teacher logits.
    pub fn update(&mut self, global: &NdArray, patch: &NdArray) -> Result<(), SslError> {
        self.global = update_center(&self.global, global, self.momentum)?;
        self.patch = update_center(&self.patch, patch, self.momentum)?;
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.global.iter().chain(&self.patch).all(|v| v.is_finite())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub rec: Real,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { rec: 100.0 }
    }
}

/// Scalar summary of one objective evaluation.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub global: Real,
    pub patch: Real,
    pub rec: Real,
    pub total: Real,
    /// Mean entropy of the teacher's image-level distributions, in nats.
    pub teacher_entropy: Real,
    pub mask_ratio: Real,
    pub pairs: usize,
}

/// Loss terms on a tape together with the bookkeeping needed for a report.
#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub global: Var,
    pub patch: Var,
    pub rec: Var,
    pub teacher_entropy: Real,
    pub mask_ratio: Real,
    pub pairs: usize,
}

fn check_center(center: &[Real], cols: usize) -> Result<(), SslError> {
    if center.len() != cols {
        return Err(SslError::Mismatch { what: "center length", expected: cols, found: center.len() });
    }
    Ok(())
}

/// Row-wise `softmax((logits - center) / tau)`. Plain arrays, so nothing
/// downstream can differentiate through the teacher.
pub fn teacher_distribution(logits: &NdArray, center: &[Real], tau: Real) -> Result<NdArray, SslError> {
    if !(tau > 0.0) {
        return Err(SslError::Config(format!("teacher temperature {tau} must be positive")));
    }
    let (rows, cols) = logits.matrix_dims();
    check_center(center, cols)?;
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        let z: Vec<Real> = logits.row(r).iter().zip(center).map(|(l, c)| (l - c) / tau).collect();
        let max = z.iter().copied().fold(Real::NEG_INFINITY, Real::max);
        let e: Vec<Real> = z.iter().map(|v| (v - max).exp()).collect();
        let s: Real = e.iter().sum();
        out.extend(e.iter().map(|v| v / s));
    }
    Ok(NdArray::from_vec(logits.shape(), out)?)
}

/// Mean Shannon entropy of the rows of `probs`.
pub fn mean_entropy(probs: &NdArray) -> Real {
    let (rows, _) = probs.matrix_dims();
    let total: Real =
        (0..rows).map(|r| -probs.row(r).iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<Real>()).sum();
    total / rows.max(1) as Real
}

/// Mean over the `2(V-1)` pairs `(i, j), j != i` of `H(t_i, softmax(s_j / tau_s))`.
///
/// `students[i]` for `i < 2` is the student view of the same crop as
/// `teachers[i]`; later entries are the local crops.
pub fn global_loss(tape: &mut Tape, teachers: [&NdArray; 2], students: &[Var], tau_s: Real) -> Result<Var, SslError> {
    let v = students.len();
    if v < 2 {
        return Err(SslError::TooFewViews(v));
    }
    let k = teachers[0].len();
    for t in teachers {
        if t.len() != k {
            return Err(SslError::Mismatch { what: "teacher logits", expected: k, found: t.len() });
        }
    }
    let s = tape.concat_rows(students)?;
    let found = tape.value(s).matrix_dims();
    if found != (v, k) {
        return Err(SslError::Mismatch { what: "student logit width", expected: k, found: found.1 });
    }
    let s = tape.scale(s, 1.0 / tau_s);
    let mut terms = Vec::with_capacity(2);
    for (i, t) in teachers.iter().enumerate() {
        let target = NdArray::from_fn(&[v, k], |e| t.data()[e % k]);
        let weights: Vec<Real> = (0..v).map(|j| if j == i { 0.0 } else { 1.0 }).collect();
        terms.push(tape.cross_entropy(&target, s, Some(&weights))?);
    }
    let sum = tape.add(terms[0], terms[1])?;
    Ok(tape.scale(sum, 0.5))
}

/// Token-wise `H(t, softmax(s / tau_s))` averaged over every token of both
/// global views; `teachers[i]` and `students[i]` share a crop.
pub fn patch_loss(tape: &mut Tape, teachers: [&NdArray; 2], students: [Var; 2], tau_s: Real) -> Result<Var, SslError> {
    for (t, &s) in teachers.iter().zip(&students) {
        let (nt, kt) = t.matrix_dims();
        let (ns, ks) = tape.value(s).matrix_dims();
        if nt != ns {
            return Err(SslError::Mismatch { what: "patch token count", expected: nt, found: ns });
        }
        if kt != ks {
            return Err(SslError::Mismatch { what: "patch logit width", expected: kt, found: ks });
        }
    }
    let k = teachers[0].matrix_dims().1;
    let mut target = teachers[0].data().to_vec();
    target.extend_from_slice(teachers[1].data());
    let target = NdArray::from_vec(&[target.len() / k.max(1), k], target)?;
    let s = tape.concat_rows(&students)?;
    let s = tape.scale(s, 1.0 / tau_s);
    Ok(tape.cross_entropy(&target, s, None)?)
}

/// Mean squared error over the masked positions; the target is a constant.
pub fn reconstruction_loss(tape: &mut Tape, target: &NdArray, recon: Var, mask: &[bool]) -> Result<Var, SslError> {
    if !mask.contains(&true) {
        return Err(SslError::EmptyMask);
    }
    let t = tape.constant(target.clone());
    Ok(tape.l2_loss(recon, t, Some(mask))?)
}

/// `L_global + L_patch + rec * L_rec`.
pub fn total_loss(tape: &mut Tape, parts: &LossParts, weights: &LossWeights) -> Result<(Var, LossReport), SslError> {
    let distill = tape.add(parts.global, parts.patch)?;
    let rec = tape.scale(parts.rec, weights.rec);
    let total = tape.add(distill, rec)?;
    let report = LossReport {
        global: tape.value(parts.global).item(),
        patch: tape.value(parts.patch).item(),
        rec: tape.value(parts.rec).item(),
        total: tape.value(total).item(),
        teacher_entropy: parts.teacher_entropy,
        mask_ratio: parts.mask_ratio,
        pairs: parts.pairs,
    };
    Ok((total, report))
}

/// `rho * center + (1 - rho) * mean over rows of logits`.
pub fn update_center(center: &[Real], logits: &NdArray, rho: Real) -> Result<Vec<Real>, SslError> {
    let (rows, cols) = logits.matrix_dims();
    check_center(center, cols)?;
    let mut mean = vec![0.0; cols];
    for r in 0..rows {
        for (m, v) in mean.iter_mut().zip(logits.row(r)) {
            *m += v;
        }
    }
    let n = rows.max(1) as Real;
    Ok(center.iter().zip(&mean).map(|(c, m)| rho * c + (1.0 - rho) * m / n).collect())
}

/// `teacher <- m * teacher + (1 - m) * student`, elementwise.
pub fn ema_update(teacher: &mut ModelParams, student: &ModelParams, m: Real) -> Result<(), SslError> {
    if !(0.0..=1.0).contains(&m) {
        return Err(SslError::Config(format!("EMA momentum {m} outside [0, 1]")));
    }
    let names = teacher.names();
    if teacher.len() != student.len() {
        return Err(SslError::Mismatch { what: "parameter count", expected: teacher.len(), found: student.len() });
    }
    for ((name, t), s) in names.into_iter().zip(teacher.values_mut()).zip(student.values()) {
        if t.shape() != s.shape() {
            return Err(SslError::ParamShape { name, teacher: t.shape().to_vec(), student: s.shape().to_vec() });
        }
        for (a, b) in t.data_mut().iter_mut().zip(s.data()) {
            *a = m * *a + (1.0 - m) * b;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warmup_is_linear_then_flat() {
        let t = TemperatureConfig::default();
        assert_eq!(t.teacher_at(0.0), 0.04);
        assert!((t.teacher_at(5.0) - 0.055).abs() < 1e-15);
        assert_eq!(t.teacher_at(10.0), 0.07);
        assert_eq!(t.teacher_at(50.0), 0.07);
        t.validate().unwrap();
        assert!(TemperatureConfig { teacher_end: 0.2, ..t }.validate().is_err());
    }

    #[test]
    fn center_momentum_range() {
        assert!(CenterState::new(4, 1.0).is_err());
        assert!(CenterState::new(4, 0.9).is_ok());
    }
}

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{NdArray, NumError, Real, Tape, Var};

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub step: Real,
    /// Largest acceptable relative error.
    pub tolerance: Real,
    /// Relative errors are taken against `max(|analytic|, |numeric|, abs_floor)`.
    pub abs_floor: Real,
    /// Check at most this many (parameter, element) pairs, sampled uniformly.
    pub max_samples: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self { step: 1e-5, tolerance: 1e-4, abs_floor: 1e-8, max_samples: None, seed: 0 }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: Real,
    pub max_abs_err: Real,
    /// `(parameter index, element index)` of the largest relative error.
    pub worst: Option<(usize, usize)>,
    pub passed: bool,
}

/// Compare tape gradients of a scalar function against central differences.
///
/// `f` is re-run from scratch on a fresh tape for every perturbation, with
/// `params` registered as trainable leaves in order.
pub fn grad_check<E, F>(f: F, params: &[NdArray], cfg: &GradCheckConfig) -> Result<GradCheckReport, E>
where
    E: From<NumError>,
    F: Fn(&mut Tape, &[Var]) -> Result<Var, E>,
{
    let eval = |values: &[NdArray]| -> Result<(Tape, Vec<Var>, Var), E> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|p| tape.param(p.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok((tape, vars, out))
    };

    let (tape, vars, out) = eval(params)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<NdArray> = vars
        .iter()
        .zip(params)
        .map(|(v, p)| grads.get(*v).cloned().unwrap_or_else(|| NdArray::zeros(p.shape())))
        .collect();
    drop(tape);

    let mut pairs = Vec::new();
    for (pi, p) in params.iter().enumerate() {
        pairs.extend((0..p.len()).map(|e| (pi, e)));
    }
    let chosen: Vec<(usize, usize)> = match cfg.max_samples {
        Some(n) if n < pairs.len() => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            sample(&mut rng, pairs.len(), n).into_iter().map(|i| pairs[i]).collect()
        }
        _ => pairs,
    };

    let mut report = GradCheckReport { checked: 0, max_rel_err: 0.0, max_abs_err: 0.0, worst: None, passed: true };
    let mut work = params.to_vec();
    for (pi, ei) in chosen {
        let original = work[pi].data()[ei];
        work[pi].data_mut()[ei] = original + cfg.step;
        let plus = {
            let (t, _, o) = eval(&work)?;
            t.value(o).item()
        };
        work[pi].data_mut()[ei] = original - cfg.step;
        let minus = {
            let (t, _, o) = eval(&work)?;
            t.value(o).item()
        };
        work[pi].data_mut()[ei] = original;

        let numeric = (plus - minus) / (2.0 * cfg.step);
        let a = analytic[pi].data()[ei];
        let abs = (a - numeric).abs();
        let rel = abs / a.abs().max(numeric.abs()).max(cfg.abs_floor);
        report.checked += 1;
        report.max_abs_err = report.max_abs_err.max(abs);
        if rel > report.max_rel_err || report.worst.is_none() {
            report.max_rel_err = rel;
            report.worst = Some((pi, ei));
        }
    }
    report.passed = report.max_rel_err <= cfg.tolerance;
    Ok(report)
}

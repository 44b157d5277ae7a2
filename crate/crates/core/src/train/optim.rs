use super::TrainError;
use crate::numcore::{NdArray, Real};

/// Adam with decoupled weight decay and bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: Real,
    pub beta2: Real,
    pub eps: Real,
    pub weight_decay: Real,
    /// Completed updates; bias correction uses `step` after increment.
    pub step: u64,
    pub first: Vec<NdArray>,
    pub second: Vec<NdArray>,
}

impl AdamW {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a NdArray>, weight_decay: Real) -> Self {
        let first: Vec<NdArray> = params.into_iter().map(|p| NdArray::zeros(p.shape())).collect();
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, step: 0, second: first.clone(), first }
    }

    /// One update at learning rate `lr`. Gradients are checked before any
    /// parameter is touched, so an error leaves the state unchanged.
    pub fn update(
        &mut self,
        names: &[String],
        params: &mut [&mut NdArray],
        grads: &[NdArray],
        lr: Real,
    ) -> Result<(), TrainError> {
        if params.len() != self.first.len() || grads.len() != self.first.len() {
            return Err(TrainError::Config(format!(
                "optimizer tracks {} arrays, got {} parameters and {} gradients",
                self.first.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            let name = names.get(i).cloned().unwrap_or_else(|| format!("#{i}"));
            if p.shape() != g.shape() || p.shape() != self.first[i].shape() {
                return Err(TrainError::Config(format!(
                    "parameter {name}: shape {:?}, gradient {:?}",
                    p.shape(),
                    g.shape()
                )));
            }
            if !g.is_finite() {
                return Err(TrainError::NonFiniteGradient(name));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let decay = 1.0 - lr * self.weight_decay;
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            for (((p, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let update = (*m / c1) / ((*v / c2).sqrt() + self.eps);
                *p = *p * decay - lr * update;
            }
        }
        Ok(())
    }
}

//! Adam with linear learning-rate warmup.

use crate::error::NnError;
use crate::tensor::{ArrD, Gradients, ParamStore};

#[derive(Debug, Clone)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Steps over which the effective lr ramps linearly from 0 to `lr`,
    /// after which it stays constant. 0 disables warmup.
    pub warmup_steps: u64,
}

impl AdamConfig {
    pub fn new(lr: f64, warmup_steps: u64) -> Self {
        AdamConfig { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, warmup_steps }
    }

    /// Effective learning rate at 1-indexed step `t`.
    pub fn lr_at(&self, t: u64) -> f64 {
        if self.warmup_steps == 0 {
            self.lr
        } else {
            self.lr * (t as f64 / self.warmup_steps as f64).min(1.0)
        }
    }
}

/// First/second moment estimates, slot-aligned with a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct AdamState {
    t: u64,
    m: Vec<ArrD>,
    v: Vec<ArrD>,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros = |t: &crate::tensor::Tensor| ArrD::zeros(t.data().raw_dim());
        AdamState {
            t: 0,
            m: params.iter().map(|(_, t)| zeros(t)).collect(),
            v: params.iter().map(|(_, t)| zeros(t)).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }
}

/// One Adam update. Missing gradient slots are treated as zero gradients
/// (moments decay, bias correction still advances).
pub fn adam_step(
    params: &mut ParamStore,
    grads: &Gradients,
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<(), NnError> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(NnError::shape(
            "adam_step",
            format!(
                "{} params vs {} grad slots vs {} state slots",
                params.len(),
                grads.len(),
                state.m.len()
            ),
        ));
    }
    state.t += 1;
    let lr_t = cfg.lr_at(state.t);
    let bc1 = 1.0 - cfg.beta1.powi(state.t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.t as i32);

    for slot in 0..params.len() {
        let g = grads.get(slot);
        if let Some(g) = g {
            if g.shape() != params.by_slot(slot).shape() {
                return Err(NnError::shape(
                    "adam_step",
                    format!(
                        "grad {:?} vs param {:?} ({})",
                        g.shape(),
                        params.by_slot(slot).shape(),
                        params.name(slot)
                    ),
                ));
            }
        }
        let m = &mut state.m[slot];
        let v = &mut state.v[slot];
        match g {
            Some(g) => {
                m.zip_mut_with(g, |m, &g| *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g);
                v.zip_mut_with(g, |v, &g| *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g);
            }
            None => {
                m.mapv_inplace(|m| cfg.beta1 * m);
                v.mapv_inplace(|v| cfg.beta2 * v);
            }
        }
        let p = params.by_slot_mut(slot);
        let data = p.data_mut();
        ndarray::Zip::from(&mut *data)
            .and(&*m)
            .and(&*v)
            .for_each(|p, &m, &v| {
                let mhat = m / bc1;
                let vhat = v / bc2;
                *p -= lr_t * mhat / (vhat.sqrt() + cfg.eps);
            });
    }
    Ok(())
}

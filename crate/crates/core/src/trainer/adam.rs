//! Bias-corrected Adam with global-norm gradient clipping.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::model::{ModelState, ParameterPartition};
use crate::tensor::Tensor;

/// Optimizer hyperparameters. Defaults are the full-scale reference values;
/// desk-scale runs shorten the warmup through the run configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub lr_stage1: f64,
    pub warmup_steps: usize,
    pub lr_stage2: f64,
    /// Global-norm clip threshold; 0 disables clipping.
    pub clip_norm: f64,
    /// Decoupled weight decay; documented knob, default 0.
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
            lr_stage1: 5e-4,
            warmup_steps: 4000,
            lr_stage2: 1e-4,
            clip_norm: 1.0,
            weight_decay: 0.0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{} must be in (0, 1), got {}", name, b)));
            }
        }
        if !(self.lr_stage1 > 0.0 && self.lr_stage2 > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.eps <= 0.0 {
            return Err(Error::Config("eps must be positive".into()));
        }
        Ok(())
    }
}

/// First/second moments for every parameter. Frozen parameters keep zero
/// moments throughout.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

impl AdamState {
    pub fn new(state: &ModelState) -> Self {
        let zero = |t: &Tensor| Tensor::zeros(t.dims());
        AdamState {
            m: state.params().iter().map(|(n, t)| (n.clone(), zero(t))).collect(),
            v: state.params().iter().map(|(n, t)| (n.clone(), zero(t))).collect(),
        }
    }
}

/// Scale gradients so their global norm is at most `max_norm`. Returns the
/// pre-clip norm and whether clipping fired.
pub fn clip_gradients(grads: &mut BTreeMap<String, Tensor>, max_norm: f64) -> (f64, bool) {
    let mut sq = 0.0;
    for g in grads.values() {
        for &v in g.data() {
            sq += v * v;
        }
    }
    let norm = sq.sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let scale = max_norm / norm;
        for g in grads.values_mut() {
            for v in g.data_mut() {
                *v *= scale;
            }
        }
        (norm, true)
    } else {
        (norm, false)
    }
}

/// One Adam update over the trainable names. `step` is 1-based for bias
/// correction. Frozen parameters are untouched bit-for-bit.
pub fn adam_step(
    state: &mut ModelState,
    moments: &mut AdamState,
    grads: &BTreeMap<String, Tensor>,
    partition: &ParameterPartition,
    step: usize,
    lr: f64,
    cfg: &OptimizerConfig,
) -> Result<()> {
    if step == 0 {
        return Err(Error::InvalidArgument("adam step must be >= 1".into()));
    }
    let bc1 = 1.0 - cfg.beta1.powi(step as i32);
    let bc2 = 1.0 - cfg.beta2.powi(step as i32);
    for name in &partition.trainable {
        let Some(grad) = grads.get(name) else { continue };
        grad.check_finite(&format!("gradient for {}", name))?;
        let param = state.get_mut(name)?;
        if param.dims() != grad.dims() {
            return Err(Error::Shape(format!(
                "gradient dims {:?} do not match parameter {} {:?}",
                grad.dims(),
                name,
                param.dims()
            )));
        }
        let m = moments
            .m
            .get_mut(name)
            .ok_or_else(|| Error::InvalidArgument(format!("no moment slot for {}", name)))?;
        let v = moments
            .v
            .get_mut(name)
            .ok_or_else(|| Error::InvalidArgument(format!("no moment slot for {}", name)))?;
        let pd = param.data_mut();
        let md = m.data_mut();
        let vd = v.data_mut();
        for i in 0..pd.len() {
            let g = grad.data()[i];
            md[i] = cfg.beta1 * md[i] + (1.0 - cfg.beta1) * g;
            vd[i] = cfg.beta2 * vd[i] + (1.0 - cfg.beta2) * g * g;
            let m_hat = md[i] / bc1;
            let v_hat = vd[i] / bc2;
            let mut update = lr * m_hat / (v_hat.sqrt() + cfg.eps);
            if cfg.weight_decay > 0.0 {
                update += lr * cfg.weight_decay * pd[i];
            }
            pd[i] -= update;
        }
    }
    Ok(())
}

//! Adam with bias correction and the cosine learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ConvParams, Real, Tensor4};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = |b: f64| (0.0..1.0).contains(&b);
        if !ok(self.beta1) || !ok(self.beta2) || !(self.eps > 0.0) {
            return Err(Error::invalid(format!("bad Adam hyper-parameters {self:?}")));
        }
        Ok(())
    }
}

/// First and second moments per parameter slot, kept in f64.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

/// In-place Adam update of one flat slot. `step` is the already incremented
/// step counter.
pub fn adam_update<T: Real>(
    param: &mut [T],
    grad: &[T],
    m: &mut [f64],
    v: &mut [f64],
    step: u64,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    if param.len() != grad.len() || param.len() != m.len() || param.len() != v.len() {
        return Err(Error::shape(format!(
            "Adam slot sizes differ: param {}, grad {}, moments {}/{}",
            param.len(),
            grad.len(),
            m.len(),
            v.len()
        )));
    }
    if step == 0 {
        return Err(Error::invalid("Adam step counter starts at 1"));
    }
    let c1 = 1.0 - cfg.beta1.powi(step as i32);
    let c2 = 1.0 - cfg.beta2.powi(step as i32);
    for i in 0..param.len() {
        let g = grad[i].as_f64();
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
        let delta = lr * (m[i] / c1) / ((v[i] / c2).sqrt() + cfg.eps);
        param[i] = T::cast(param[i].as_f64() - delta);
    }
    Ok(())
}

/// Gradient of one conv layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvGrad<T> {
    pub weight: Tensor4<T>,
    pub bias: Vec<T>,
}

/// One Adam step over a list of conv layers. Layers with `trainable == false`
/// are skipped entirely, so their bits never change. The state is sized on
/// the first call and must match afterwards.
pub fn adam_step<T: Real>(
    params: &mut [&mut ConvParams<T>],
    grads: &[ConvGrad<T>],
    state: &mut AdamState,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::shape(format!(
            "{} layers but {} gradients",
            params.len(),
            grads.len()
        )));
    }
    if state.m.is_empty() && state.step == 0 {
        for p in params.iter() {
            state.m.push(vec![0.0; p.weight.len()]);
            state.m.push(vec![0.0; p.bias.len()]);
        }
        state.v = state.m.clone();
    }
    if state.m.len() != 2 * params.len() {
        return Err(Error::shape("optimizer state does not match the parameters"));
    }
    state.step += 1;
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        if !p.trainable {
            continue;
        }
        if g.weight.dims() != p.weight.dims() {
            return Err(Error::shape(format!(
                "gradient {:?} for weight {:?}",
                g.weight.dims(),
                p.weight.dims()
            )));
        }
        let (ms, vs) = (&mut state.m, &mut state.v);
        adam_update(
            p.weight.data_mut(),
            g.weight.data(),
            &mut ms[2 * i],
            &mut vs[2 * i],
            state.step,
            lr,
            cfg,
        )?;
        adam_update(
            &mut p.bias,
            &g.bias,
            &mut ms[2 * i + 1],
            &mut vs[2 * i + 1],
            state.step,
            lr,
            cfg,
        )?;
    }
    Ok(())
}

/// `eta_min + (lr0 - eta_min) * (1 + cos(pi * s / total)) / 2`.
pub fn cosine_anneal(lr0: f64, step: usize, total: usize, eta_min: f64) -> Result<f64> {
    if total == 0 || step > total {
        return Err(Error::invalid(format!("schedule step {step} outside 0..={total}")));
    }
    let phase = std::f64::consts::PI * step as f64 / total as f64;
    Ok(eta_min + 0.5 * (lr0 - eta_min) * (1.0 + phase.cos()))
}

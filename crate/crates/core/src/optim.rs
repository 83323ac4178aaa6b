//! AdamW with decoupled weight decay, and the warmup + cosine learning-rate schedule.

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 1e-3,
        }
    }
}

struct Moments {
    m: Tensor,
    v: Tensor,
    step: u64,
}

/// Optimizer state for every parameter in a [`ParamStore`]. Parameters that
/// receive no gradient in a step are left untouched, moments included.
pub struct AdamW {
    cfg: AdamWConfig,
    state: BTreeMap<String, Moments>,
}

/// Host copy of the optimizer moments: name -> (m, v, step).
pub type MomentTable = BTreeMap<String, (Vec<f32>, Vec<f32>, u64)>;

impl AdamW {
    pub fn new(ps: &ParamStore, cfg: AdamWConfig) -> Result<Self> {
        let state = ps
            .vars()
            .iter()
            .map(|(k, v)| {
                let z = v.as_tensor().zeros_like()?;
                Ok((
                    k.clone(),
                    Moments {
                        m: z.clone(),
                        v: z,
                        step: 0,
                    },
                ))
            })
            .collect::<Result<_>>()?;
        Ok(Self { cfg, state })
    }

    pub fn config(&self) -> &AdamWConfig {
        &self.cfg
    }

    pub fn step(&mut self, ps: &ParamStore, grads: &GradStore, lr: f64) -> Result<()> {
        let c = self.cfg;
        for (name, var) in ps.vars() {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            let st = self
                .state
                .get_mut(name)
                .ok_or_else(|| Error::validation(format!("no optimizer state for {name}")))?;
            // Variable gradients can still carry the graph of their inputs.
            let g = &g.detach();
            st.step += 1;
            st.m = ((&st.m * c.beta1)? + (g * (1.0 - c.beta1))?)?;
            st.v = ((&st.v * c.beta2)? + (g.sqr()? * (1.0 - c.beta2))?)?;
            let m_hat = (&st.m / (1.0 - c.beta1.powi(st.step as i32)))?;
            let v_hat = (&st.v / (1.0 - c.beta2.powi(st.step as i32)))?;
            let update = (m_hat / (v_hat.sqrt()? + c.eps)?)?;
            let theta = var.as_tensor();
            let next = ((theta * (1.0 - lr * c.weight_decay))? - (update * lr)?)?;
            var.set(&next)?;
        }
        Ok(())
    }

    pub fn export(&self) -> Result<MomentTable> {
        self.state
            .iter()
            .map(|(k, s)| {
                let flat = |t: &Tensor| -> Result<Vec<f32>> {
                    Ok(t.flatten_all()?.to_dtype(DType::F32)?.to_vec1()?)
                };
                Ok((k.clone(), (flat(&s.m)?, flat(&s.v)?, s.step)))
            })
            .collect()
    }

    pub fn import(&mut self, table: &MomentTable) -> Result<()> {
        for (name, st) in self.state.iter_mut() {
            let (m, v, step) = table
                .get(name)
                .ok_or_else(|| Error::validation(format!("missing optimizer state for {name}")))?;
            if m.len() != st.m.elem_count() || v.len() != st.v.elem_count() {
                return Err(Error::validation(format!("optimizer state for {name} has wrong size")));
            }
            let load = |data: &[f32], like: &Tensor| -> Result<Tensor> {
                Ok(Tensor::from_slice(data, like.dims(), like.device())?.to_dtype(like.dtype())?)
            };
            st.m = load(m, &st.m)?;
            st.v = load(v, &st.v)?;
            st.step = *step;
        }
        Ok(())
    }
}

/// Linear warmup from `base / 10` to `base` over `warmup` iterations, then
/// cosine decay back to `base / 10` at the final iteration.
pub fn learning_rate(iteration: usize, iterations: usize, warmup: usize, base: f64) -> f64 {
    let floor = base / 10.0;
    if iteration < warmup {
        return floor + (base - floor) * iteration as f64 / warmup as f64;
    }
    let span = iterations.saturating_sub(warmup + 1);
    if span == 0 {
        return base;
    }
    let p = ((iteration - warmup) as f64 / span as f64).min(1.0);
    floor + (base - floor) * 0.5 * (1.0 + (std::f64::consts::PI * p).cos())
}

use serde::{Deserialize, Serialize};

use super::ParamStore;
use crate::error::{Error, Result};

/// Clamp every gradient component into `[lo, hi]`.
pub fn clip_gradients(params: &mut ParamStore, lo: f64, hi: f64) -> Result<()> {
    if lo > hi || lo.is_nan() || hi.is_nan() {
        return Err(Error::invalid(format!("clip range [{lo}, {hi}] is empty")));
    }
    for p in params.iter_mut() {
        for g in p.grad_mut() {
            *g = g.clamp(lo, hi);
        }
    }
    Ok(())
}

/// First and second moment estimates plus the step counter.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub state: AdamState,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            state: AdamState::default(),
        }
    }

    /// One bias-corrected Adam update from the gradients held in `params`.
    ///
    /// If any gradient is non-finite nothing is touched and the offending
    /// parameter is reported.
    pub fn step(&mut self, params: &mut ParamStore) -> Result<()> {
        if let Some(bad) = params
            .iter()
            .find(|p| p.grad().iter().any(|g| !g.is_finite()))
        {
            return Err(Error::NonFiniteGradient(bad.name().to_string()));
        }
        let st = &mut self.state;
        if st.m.len() != params.len() {
            st.m = params.iter().map(|p| vec![0.0; p.grad().len()]).collect();
            st.v = st.m.clone();
        }
        st.step += 1;
        let t = st.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (i, p) in params.iter_mut().enumerate() {
            let (m, v) = (&mut st.m[i], &mut st.v[i]);
            let grad = p.grad().to_vec();
            let w = p.value_mut().data_mut();
            for j in 0..w.len() {
                let g = grad[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                w[j] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

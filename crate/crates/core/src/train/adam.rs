use crate::error::{Error, Result};
use crate::model::Param;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-7,
        }
    }
}

/// First and second moments for every parameter tensor plus the step count.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub hyper: AdamHyper,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(hyper: AdamHyper, params: &[Param]) -> Self {
        let zeros = |p: &Param| vec![0.0; p.value.numel()];
        Self {
            hyper,
            step: 0,
            m: params.iter().map(zeros).collect(),
            v: params.iter().map(zeros).collect(),
        }
    }
}

/// One bias-corrected Adam update using each parameter's gradient slot.
pub fn adam_step(params: &mut [Param], state: &mut AdamState) -> Result<()> {
    if params.len() != state.m.len() {
        return Err(Error::dim("adam_step", &[params.len()], &[state.m.len()]));
    }
    for (p, m) in params.iter().zip(&state.m) {
        let g = p
            .value
            .grad()
            .ok_or_else(|| Error::Contract(format!("no gradient for {}", p.name)))?;
        if g.len() != m.len() {
            return Err(Error::dim("adam_step", p.value.shape(), &[m.len()]));
        }
    }

    state.step += 1;
    let AdamHyper {
        learning_rate: lr,
        beta1: b1,
        beta2: b2,
        epsilon: eps,
    } = state.hyper;
    let t = state.step as i32;
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);

    for ((p, m), v) in params.iter_mut().zip(&mut state.m).zip(&mut state.v) {
        let g = p.value.grad().unwrap().to_vec();
        let theta = p.value.data_mut();
        for i in 0..theta.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            theta[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

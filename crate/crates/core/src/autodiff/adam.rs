use serde::{Deserialize, Serialize};

use super::{AutodiffError, Parameterized, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment estimates per parameter, in the parameter tree's visiting order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }
}

/// One bias-corrected Adam update. `grads` follows the visiting order of
/// `params`.
pub fn adam_step<T: Parameterized<Tensor>>(
    params: &mut T,
    grads: &[Tensor],
    state: &mut AdamState,
) -> Result<(), AutodiffError> {
    let mut shapes = Vec::new();
    params.visit("", &mut |_, t, _| shapes.push((t.rows(), t.cols())));
    if shapes.len() != grads.len() {
        return Err(AutodiffError::ShapeMismatch {
            op: "adam_step",
            lhs: vec![shapes.len()],
            rhs: vec![grads.len()],
        });
    }
    for (&(r, c), g) in shapes.iter().zip(grads) {
        if (g.rows(), g.cols()) != (r, c) {
            return Err(AutodiffError::ShapeMismatch {
                op: "adam_step",
                lhs: vec![r, c],
                rhs: g.shape().to_vec(),
            });
        }
    }
    if state.m.is_empty() {
        state.m = shapes.iter().map(|&(r, c)| Tensor::zeros(r, c)).collect();
        state.v = state.m.clone();
    }

    state.step += 1;
    let AdamConfig { lr, beta1, beta2, eps } = state.config;
    let t = state.step as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);

    let (ms, vs) = (&mut state.m, &mut state.v);
    let mut i = 0;
    params.visit_mut("", &mut |_, p, _| {
        let g = grads[i].data();
        let m = ms[i].data_mut();
        let v = vs[i].data_mut();
        for (((w, &gj), mj), vj) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mj = beta1 * *mj + (1.0 - beta1) * gj;
            *vj = beta2 * *vj + (1.0 - beta2) * gj * gj;
            let m_hat = *mj / c1;
            let v_hat = *vj / c2;
            *w -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        i += 1;
    });
    Ok(())
}

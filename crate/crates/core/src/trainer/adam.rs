use crate::adapter::MlpParams;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First/second moment accumulators shaped like the adapter parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: MlpParams,
    v: MlpParams,
    t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(like: &MlpParams) -> Self {
        Self { m: like.zeros_like(), v: like.zeros_like(), t: 0, beta1: ADAM_BETA1, beta2: ADAM_BETA2, eps: ADAM_EPS }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn first_moment(&self) -> &MlpParams {
        &self.m
    }

    pub fn second_moment(&self) -> &MlpParams {
        &self.v
    }
}

/// One bias-corrected Adam update of `params` in place.
pub fn adam_step(state: &mut AdamState, params: &mut MlpParams, grads: &MlpParams, lr: f64) {
    assert_eq!(params.dim(), grads.dim(), "gradient shape does not match parameters");
    state.t += 1;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let bc1 = 1.0 - b1.powi(state.t as i32);
    let bc2 = 1.0 - b2.powi(state.t as i32);
    let tensors = params.tensors_mut();
    let ms = state.m.tensors_mut();
    let vs = state.v.tensors_mut();
    for (((p, m), v), g) in tensors.into_iter().zip(ms).zip(vs).zip(grads.tensors()) {
        for i in 0..p.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
}

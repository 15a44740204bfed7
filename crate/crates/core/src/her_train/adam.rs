use super::{TrainConfig, TrainError};

/// First/second moment estimates and the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }
}

/// One bias-corrected Adam update. Returns the new weights and state; the inputs are untouched.
pub fn adam_step(
    state: &AdamState,
    weights: &[f64],
    grad: &[f64],
    config: &TrainConfig,
) -> Result<(Vec<f64>, AdamState), TrainError> {
    if weights.len() != grad.len() || state.m.len() != weights.len() || state.v.len() != weights.len() {
        return Err(TrainError::Shape {
            weights: weights.len(),
            grad: grad.len(),
            moments: state.m.len(),
        });
    }
    let t = state.t + 1;
    if let Some((index, &value)) = grad.iter().enumerate().find(|(_, g)| !g.is_finite()) {
        return Err(TrainError::NonFiniteGradient { index, value, step: t });
    }
    let (b1, b2) = (config.adam_beta1, config.adam_beta2);
    let bc1 = 1.0 - b1.powi(t as i32);
    let bc2 = 1.0 - b2.powi(t as i32);
    let mut m = Vec::with_capacity(grad.len());
    let mut v = Vec::with_capacity(grad.len());
    let mut out = Vec::with_capacity(grad.len());
    for i in 0..grad.len() {
        let g = grad[i];
        let mi = b1 * state.m[i] + (1.0 - b1) * g;
        let vi = b2 * state.v[i] + (1.0 - b2) * g * g;
        let m_hat = mi / bc1;
        let v_hat = vi / bc2;
        out.push(weights[i] - config.learning_rate * m_hat / (v_hat.sqrt() + config.adam_eps));
        m.push(mi);
        v.push(vi);
    }
    Ok((out, AdamState { m, v, t }))
}

//! Adaptive-moment optimizer with bias correction.

use super::{EncoderError, ModelParams};

pub struct OptState {
    pub step: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    first_moment: ModelParams,
    second_moment: ModelParams,
}

impl OptState {
    pub fn new(params: &ModelParams, learning_rate: f64) -> Self {
        OptState {
            step: 0,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            first_moment: params.zeros_like(),
            second_moment: params.zeros_like(),
        }
    }
}

/// One update step: moments decay toward the gradient, bias-corrected
/// estimates drive the parameter delta, and the step counter advances.
pub fn adam_step(
    params: &mut ModelParams,
    grads: &ModelParams,
    opt: &mut OptState,
) -> Result<(), EncoderError> {
    for (name, g) in grads.tensors() {
        if !g.is_finite() {
            return Err(EncoderError::NonFiniteGrad(name));
        }
    }

    opt.step += 1;
    let t = opt.step as i32;
    let bias1 = 1.0 - opt.beta1.powi(t);
    let bias2 = 1.0 - opt.beta2.powi(t);

    let grad_tensors = grads.tensors();
    let m_tensors = opt.first_moment.tensors_mut();
    let v_tensors = opt.second_moment.tensors_mut();
    for ((((name, p), (_, g)), (_, m)), (_, v)) in params
        .tensors_mut()
        .into_iter()
        .zip(grad_tensors)
        .zip(m_tensors)
        .zip(v_tensors)
    {
        debug_assert!(p.same_shape(g), "gradient shape mismatch for {name}");
        for i in 0..p.data.len() {
            let gi = g.data[i];
            m.data[i] = opt.beta1 * m.data[i] + (1.0 - opt.beta1) * gi;
            v.data[i] = opt.beta2 * v.data[i] + (1.0 - opt.beta2) * gi * gi;
            let m_hat = m.data[i] / bias1;
            let v_hat = v.data[i] / bias2;
            p.data[i] -= opt.learning_rate * m_hat / (v_hat.sqrt() + opt.epsilon);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{init_params, EncoderConfig};

    fn cfg() -> EncoderConfig {
        EncoderConfig {
            num_layers: 1,
            hidden_dim: 8,
            num_heads: 2,
            ffn_dim: 16,
            max_len: 8,
            vocab_size: 16,
            num_classes: 2,
            dropout_rate: 0.0,
            seed: 1,
        }
    }

    #[test]
    fn zero_grads_leave_params_unchanged() {
        let mut params = init_params(&cfg()).unwrap();
        let before = params.clone();
        let grads = params.zeros_like();
        let mut opt = OptState::new(&params, 0.1);
        adam_step(&mut params, &grads, &mut opt).unwrap();
        assert_eq!(opt.step, 1);
        assert_eq!(params, before);
    }

    #[test]
    fn first_update_magnitude_is_learning_rate() {
        // Single coordinate, g = 1, lr = 0.1: bias correction cancels and the
        // first delta is lr / (1 + eps) up to epsilon.
        let mut params = init_params(&cfg()).unwrap();
        let start = params.token_emb.data[0];
        let mut grads = params.zeros_like();
        grads.token_emb.data[0] = 1.0;
        let mut opt = OptState::new(&params, 0.1);
        adam_step(&mut params, &grads, &mut opt).unwrap();
        let delta = params.token_emb.data[0] - start;
        assert!((delta + 0.1).abs() < 1e-6, "delta was {delta}");
    }

    #[test]
    fn trajectories_are_deterministic() {
        let c = cfg();
        let mut p1 = init_params(&c).unwrap();
        let mut p2 = init_params(&c).unwrap();
        let mut o1 = OptState::new(&p1, 0.01);
        let mut o2 = OptState::new(&p2, 0.01);
        for step in 0..5 {
            let mut g = p1.zeros_like();
            g.token_emb.data[step] = 0.5;
            g.cls_weight.data[0] = -0.25;
            adam_step(&mut p1, &g, &mut o1).unwrap();
            adam_step(&mut p2, &g, &mut o2).unwrap();
        }
        assert_eq!(p1, p2);
    }

    #[test]
    fn non_finite_grads_are_rejected() {
        let mut params = init_params(&cfg()).unwrap();
        let mut grads = params.zeros_like();
        grads.layers[0].ffn_w1.data[3] = f64::NAN;
        let mut opt = OptState::new(&params, 0.1);
        let err = adam_step(&mut params, &grads, &mut opt).unwrap_err();
        assert!(matches!(err, EncoderError::NonFiniteGrad(_)));
        assert_eq!(opt.step, 0);
    }
}

//! Adaptive-moment optimizer with bias correction.

use crate::error::{Error, Result};
use crate::model::{Model, ModelGrads, TRAINABLE_TENSORS};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First/second moment accumulators for every trainable tensor, in canonical
/// order, plus the step counter.
#[derive(Clone, Debug)]
pub struct AdamState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
}

impl AdamState {
    pub fn for_model(model: &Model) -> AdamState {
        let zeros: Vec<Tensor> = TRAINABLE_TENSORS
            .iter()
            .map(|name| {
                let t = model.params.tensor(name).expect("trainable tensor exists");
                Tensor::zeros(t.shape().clone())
            })
            .collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected update over every trainable tensor. Fails without
/// touching the model if any gradient is non-finite.
pub fn adam_step(
    model: &mut Model,
    grads: &ModelGrads,
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    for name in TRAINABLE_TENSORS {
        let g = grads
            .tensor(name)
            .ok_or_else(|| Error::State {
                reason: format!("gradient record is missing tensor {name}"),
            })?;
        if !g.all_finite() {
            return Err(Error::NanGradient {
                param: (*name).to_string(),
            });
        }
    }

    state.step += 1;
    let t = state.step;
    for (idx, name) in TRAINABLE_TENSORS.iter().enumerate() {
        let grad = grads.tensor(name).expect("checked above");
        let param = model
            .params
            .tensor_mut(name)
            .expect("trainable tensor exists");
        update_tensor(param, grad, &mut state.m[idx], &mut state.v[idx], t, cfg);
    }
    Ok(())
}

fn update_tensor(
    param: &mut Tensor,
    grad: &Tensor,
    m: &mut Tensor,
    v: &mut Tensor,
    step: u64,
    cfg: &AdamConfig,
) {
    let bias1 = 1.0 - cfg.beta1.powi(step as i32);
    let bias2 = 1.0 - cfg.beta2.powi(step as i32);
    let (pd, gd, md, vd) = (
        param.data_mut(),
        grad.data(),
        m.data_mut(),
        v.data_mut(),
    );
    for i in 0..pd.len() {
        md[i] = cfg.beta1 * md[i] + (1.0 - cfg.beta1) * gd[i];
        vd[i] = cfg.beta2 * vd[i] + (1.0 - cfg.beta2) * gd[i] * gd[i];
        let m_hat = md[i] / bias1;
        let v_hat = vd[i] / bias2;
        pd[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
    }
    // keep parameters on the f32 grid the checkpoint format encodes
    param.snap_to_f32();
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    fn tensor(values: &[f64]) -> Tensor {
        Tensor::from_values(Shape::new([values.len()]).unwrap(), values.to_vec()).unwrap()
    }

    #[test]
    fn zero_gradients_leave_params_unchanged_from_fresh_state() {
        let mut p = tensor(&[0.5, -0.25, 1.0]);
        let before = p.clone();
        let mut m = Tensor::zeros(p.shape().clone());
        let mut v = Tensor::zeros(p.shape().clone());
        let g = Tensor::zeros(p.shape().clone());
        update_tensor(&mut p, &g, &mut m, &mut v, 1, &AdamConfig::default());
        assert_eq!(p, before);
        assert!(m.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn moments_decay_under_zero_gradient() {
        let cfg = AdamConfig::default();
        let mut p = tensor(&[1.0]);
        let mut m = tensor(&[0.4]);
        let mut v = tensor(&[0.2]);
        let g = Tensor::zeros(p.shape().clone());
        update_tensor(&mut p, &g, &mut m, &mut v, 2, &cfg);
        assert!((m.data()[0] - 0.9 * 0.4).abs() < 1e-15);
        assert!((v.data()[0] - 0.999 * 0.2).abs() < 1e-15);
    }

    #[test]
    fn first_step_matches_closed_form() {
        // for constant gradient g, bias correction yields
        // update = lr * g / (|g| + eps), roughly lr * sign(g)
        let cfg = AdamConfig {
            learning_rate: 1e-3,
            ..AdamConfig::default()
        };
        for &g_val in &[0.3, -0.7, 2.0, -1e-3] {
            let mut p = tensor(&[1.0]);
            let mut m = Tensor::zeros(p.shape().clone());
            let mut v = Tensor::zeros(p.shape().clone());
            let g = tensor(&[g_val]);
            update_tensor(&mut p, &g, &mut m, &mut v, 1, &cfg);
            let want = (1.0 - cfg.learning_rate * g_val / (g_val.abs() + cfg.epsilon)) as f32 as f64;
            assert!(
                (p.data()[0] - want).abs() < 1e-12,
                "g={g_val}: got {}, want {want}",
                p.data()[0]
            );
            assert!((p.data()[0] - (1.0 - cfg.learning_rate * g_val.signum())).abs() < 1e-5);
        }
    }

    #[test]
    fn nan_gradient_aborts_naming_the_parameter_without_updating() {
        use crate::data::synthetic::separable_set;
        use crate::layers::Mode;
        use crate::model::{ArchitectureDescriptor, Model};
        use crate::rng::stream;
        use crate::train::{bce_loss, MemorySource};

        let mut model = Model::build(&ArchitectureDescriptor::tiny(), 3).unwrap();
        model.set_mode(Mode::Train);
        let source = MemorySource(separable_set(2, 16, 16, 5));
        let (x, label) = (source.0[0].0.clone(), source.0[0].1);
        let batch = x
            .reshape(crate::tensor::Shape::new([1, 16, 16, 1]).unwrap())
            .unwrap();
        let mut rng = stream(4, "adam.nan");
        let artifacts = model.forward_train(&batch, &mut rng).unwrap();
        let (_, dloss) = bce_loss(&artifacts.output, &[label]).unwrap();
        let mut grads = model.backward(artifacts.caches, &dloss).unwrap();
        grads.dense.bias.data_mut()[0] = f64::NAN;

        let before = model.params.clone();
        let mut state = AdamState::for_model(&model);
        match adam_step(&mut model, &grads, &mut state, &AdamConfig::default()) {
            Err(crate::error::Error::NanGradient { param }) => {
                assert_eq!(param, "dense.bias")
            }
            other => panic!("expected NanGradient, got {other:?}"),
        }
        assert_eq!(model.params, before, "a failed step must not touch params");
        assert_eq!(state.step_count(), 0);
    }

    #[test]
    fn updates_stay_on_the_f32_grid() {
        let cfg = AdamConfig::default();
        let mut p = tensor(&[0.123456789]);
        p.snap_to_f32();
        let mut m = Tensor::zeros(p.shape().clone());
        let mut v = Tensor::zeros(p.shape().clone());
        let g = tensor(&[0.37]);
        update_tensor(&mut p, &g, &mut m, &mut v, 1, &cfg);
        let val = p.data()[0];
        assert_eq!(val, val as f32 as f64);
    }
}

use crate::error::{Error, Result};
use crate::numerics::tensor::Tensor;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment buffers, one pair per parameter tensor.
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub step: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor<T>>) -> Self {
        let (m, v) = params
            .into_iter()
            .map(|p| (Tensor::zeros(p.shape()), Tensor::zeros(p.shape())))
            .unzip();
        Self { m, v, step: 0 }
    }
}

/// One bias-corrected Adam update with learning rate `lr`.
pub fn adam_step<T: Scalar>(
    params: &mut [&mut Tensor<T>],
    grads: &[&Tensor<T>],
    state: &mut AdamState<T>,
    cfg: &AdamConfig,
    lr: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::shape(
            "adam_step",
            &[state.m.len()],
            &[params.len(), grads.len()],
        ));
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&state.m) {
        if p.shape() != g.shape() || p.shape() != m.shape() {
            return Err(Error::shape("adam_step", p.shape(), g.shape()));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
    let (one_b1, one_b2) = (T::of(1.0 - cfg.beta1), T::of(1.0 - cfg.beta2));
    let step_size = T::of(lr / bc1);
    let bc2_sqrt = T::of(bc2.sqrt());
    let eps = T::of(cfg.eps);
    for (i, p) in params.iter_mut().enumerate() {
        let g = grads[i].data();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (j, w) in p.data_mut().iter_mut().enumerate() {
            m[j] = b1 * m[j] + one_b1 * g[j];
            v[j] = b2 * v[j] + one_b2 * g[j] * g[j];
            *w -= step_size * m[j] / (v[j].sqrt() / bc2_sqrt + eps);
        }
    }
    Ok(())
}

/// Half-period cosine decay from `lr0` at step 0 to zero at `total`.
pub fn cosine_lr(lr0: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return lr0;
    }
    let t = (step.min(total)) as f64 / total as f64;
    lr0 * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params_and_decays_moments() {
        let mut p = Tensor::<f64>::from_fn(&[3], |i| i as f64);
        let before = p.clone();
        let mut st = AdamState::new([&p]);
        st.m[0] = Tensor::full(&[3], 0.5);
        st.v[0] = Tensor::full(&[3], 0.25);
        let g = Tensor::zeros(&[3]);
        let cfg = AdamConfig::default();
        adam_step(&mut [&mut p], &[&g], &mut st, &cfg, cfg.lr).unwrap();
        // m decays to 0.45 so the update is non-zero but tiny; with fresh
        // moments the parameters stay put exactly.
        assert!(st.m[0].data().iter().all(|&m| (m - 0.45).abs() < 1e-12));
        assert!(st.v[0].data().iter().all(|&v| v < 0.25));
        let mut q = before.clone();
        let mut fresh = AdamState::new([&q]);
        adam_step(&mut [&mut q], &[&g], &mut fresh, &cfg, cfg.lr).unwrap();
        assert_eq!(q, before);
        assert_eq!(fresh.step, 1);
    }

    #[test]
    fn first_step_with_unit_gradient_is_lr_over_one_plus_eps() {
        let mut p = Tensor::<f64>::zeros(&[4]);
        let g = Tensor::full(&[4], 1.0);
        let mut st = AdamState::new([&p]);
        let cfg = AdamConfig::default();
        adam_step(&mut [&mut p], &[&g], &mut st, &cfg, 1e-3).unwrap();
        let expected = -1e-3 / (1.0 + 1e-8);
        for &w in p.data() {
            assert!((w - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(1e-3, 0, 100), 1e-3);
        assert!(cosine_lr(1e-3, 100, 100).abs() < 1e-18);
        assert!((cosine_lr(1e-3, 50, 100) - 5e-4).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut p = Tensor::<f32>::zeros(&[2]);
        let g = Tensor::zeros(&[3]);
        let mut st = AdamState::new([&p]);
        let cfg = AdamConfig::default();
        assert!(adam_step(&mut [&mut p], &[&g], &mut st, &cfg, 1e-3).is_err());
    }
}

use crate::autodiff::{ParamStore, Real, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
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

/// First and second moment estimates plus the step count.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub step: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let zeros = || {
            store
                .tensors()
                .iter()
                .map(|t| Tensor::zeros(t.shape.clone()))
                .collect()
        };
        AdamState {
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }
}

/// One bias-corrected adaptive-moment update of every parameter tensor.
pub fn adam_step<T: Real>(
    store: &mut ParamStore<T>,
    grads: &[Vec<T>],
    state: &mut AdamState<T>,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    if grads.len() != store.len() || state.m.len() != store.len() {
        return Err(Error::Shape(format!(
            "{} gradients and {} moments for {} parameters",
            grads.len(),
            state.m.len(),
            store.len()
        )));
    }
    for (i, g) in grads.iter().enumerate() {
        if g.len() != store.tensors()[i].len() {
            return Err(Error::Shape(format!("gradient {i} has {} values", g.len())));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
    let c1 = T::one() - T::of(cfg.beta1.powi(t));
    let c2 = T::one() - T::of(cfg.beta2.powi(t));
    let (lr, eps) = (T::of(lr), T::of(cfg.eps));
    for (i, g) in grads.iter().enumerate() {
        let p = &mut store.tensors_mut()[i].data;
        let m = &mut state.m[i].data;
        let v = &mut state.v[i].data;
        for j in 0..g.len() {
            m[j] = b1 * m[j] + (T::one() - b1) * g[j];
            v[j] = b2 * v[j] + (T::one() - b2) * g[j] * g[j];
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            p[j] = p[j] - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(x: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add("x", Tensor::scalar(x));
        s
    }

    #[test]
    fn zero_gradient_and_zero_lr_leave_params() {
        let mut s = scalar_store(1.5);
        let mut st = AdamState::new(&s);
        adam_step(&mut s, &[vec![0.0]], &mut st, 0.01, &AdamConfig::default()).unwrap();
        assert_eq!(s.tensors()[0].data, vec![1.5]);
        adam_step(&mut s, &[vec![3.0]], &mut st, 0.0, &AdamConfig::default()).unwrap();
        assert_eq!(s.tensors()[0].data, vec![1.5]);
    }

    #[test]
    fn constant_gradient_matches_scalar_reference() {
        let cfg = AdamConfig::default();
        let (g, lr) = (0.7, 0.01);
        let mut s = scalar_store(2.0);
        let mut st = AdamState::new(&s);
        let (mut x, mut m, mut v) = (2.0f64, 0.0f64, 0.0f64);
        for t in 1..=25 {
            adam_step(&mut s, &[vec![g]], &mut st, lr, &cfg).unwrap();
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            x -= lr * mh / (vh.sqrt() + 1e-8);
            assert!((s.tensors()[0].data[0] - x).abs() < 1e-12);
        }
        // With a constant gradient every bias-corrected step has size ~lr.
        assert!((2.0 - x - 25.0 * lr).abs() < 1e-6);
    }

    #[test]
    fn shape_mismatch() {
        let mut s = scalar_store(0.0);
        let mut st = AdamState::new(&s);
        assert!(adam_step(&mut s, &[vec![0.0, 1.0]], &mut st, 0.1, &AdamConfig::default()).is_err());
        assert!(adam_step(&mut s, &[], &mut st, 0.1, &AdamConfig::default()).is_err());
    }
}

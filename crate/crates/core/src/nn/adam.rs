use super::{ParamSet, Real, Result};

/// Learning-rate independent Adam settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.0,
            beta2: 0.9,
            eps: 1e-8,
        }
    }
}

/// First and second moments per parameter plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T = f32> {
    pub m: ParamSet<T>,
    pub v: ParamSet<T>,
    pub t: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &ParamSet<T>) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }
}

/// Bias-corrected Adam update of every tensor in `params`.
pub fn adam_step<T: Real>(
    params: &mut ParamSet<T>,
    grads: &ParamSet<T>,
    state: &mut AdamState<T>,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) -> Result<()> {
    params.check_compatible(grads)?;
    params.check_compatible(&state.m)?;
    state.t += 1;
    let bc1 = 1.0 - beta1.powi(state.t.min(i32::MAX as u64) as i32);
    let bc2 = 1.0 - beta2.powi(state.t.min(i32::MAX as u64) as i32);
    let (b1, b2) = (T::of(beta1), T::of(beta2));
    let (one_b1, one_b2) = (T::of(1.0 - beta1), T::of(1.0 - beta2));
    let (inv_bc1, inv_bc2) = (T::of(1.0 / bc1), T::of(1.0 / bc2));
    let (lr, eps) = (T::of(lr), T::of(eps));

    let moments = state.m.iter_mut().zip(state.v.iter_mut());
    for (((_, p), (_, g)), ((_, m), (_, v))) in params.iter_mut().zip(grads.iter()).zip(moments) {
        let it = p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()));
        for ((p, &g), (m, v)) in it {
            *m = b1 * *m + one_b1 * g;
            *v = b2 * *v + one_b2 * g * g;
            let m_hat = *m * inv_bc1;
            let v_hat = *v * inv_bc2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Tensor;

    fn scalar(x: f64) -> ParamSet<f64> {
        let mut p = ParamSet::new();
        p.insert("x", Tensor::new(vec![1], vec![x]).unwrap());
        p
    }

    #[test]
    fn zero_grad_fresh_state_is_noop() {
        let mut p = scalar(1.5);
        let mut s = AdamState::new(&p);
        adam_step(&mut p, &scalar(0.0), &mut s, 0.1, 0.0, 0.9, 1e-8).unwrap();
        assert_eq!(p.get("x").unwrap().data(), &[1.5]);
        assert_eq!(s.t, 1);
    }

    #[test]
    fn first_step_hand_value() {
        // m = 2, v̂ = 0.4/0.1 = 4  →  1 − 0.1·2/(2 + 1e-8)
        let mut p = scalar(1.0);
        let mut s = AdamState::new(&p);
        adam_step(&mut p, &scalar(2.0), &mut s, 0.1, 0.0, 0.9, 1e-8).unwrap();
        let expected = 1.0 - 0.1 * 2.0 / (2.0 + 1e-8);
        assert!((p.get("x").unwrap().data()[0] - expected).abs() < 1e-12);
        assert!((p.get("x").unwrap().data()[0] - 0.9).abs() < 1e-6);
    }

    #[test]
    fn zero_lr_keeps_params_and_advances_t() {
        let mut p = scalar(-3.25);
        let mut s = AdamState::new(&p);
        for _ in 0..3 {
            adam_step(&mut p, &scalar(7.0), &mut s, 0.0, 0.0, 0.9, 1e-8).unwrap();
        }
        assert_eq!(p.get("x").unwrap().data(), &[-3.25]);
        assert_eq!(s.t, 3);
    }

    #[test]
    fn mismatched_grads_error() {
        let mut p = scalar(1.0);
        let mut s = AdamState::new(&p);
        let mut g = ParamSet::new();
        g.insert("y", Tensor::new(vec![1], vec![1.0]).unwrap());
        assert!(adam_step(&mut p, &g, &mut s, 0.1, 0.0, 0.9, 1e-8).is_err());
    }
}

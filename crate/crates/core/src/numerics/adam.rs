use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Hyperparameters for [`adam_step`].
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
            lr: 1e-2,
            beta1: 0.0,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid("adam_step", format!("lr must be positive, got {}", self.lr)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::invalid("adam_step", format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::invalid("adam_step", format!("eps must be positive, got {}", self.eps)));
        }
        Ok(())
    }
}

/// Moment estimates for one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub first_moment: Tensor,
    pub second_moment: Tensor,
    pub step_count: u64,
}

impl AdamState {
    pub fn new(shape: &[usize]) -> Result<Self> {
        Ok(Self {
            first_moment: Tensor::zeros(shape)?,
            second_moment: Tensor::zeros(shape)?,
            step_count: 0,
        })
    }
}

/// One bias-corrected Adam update. Returns the new parameter and state.
pub fn adam_step(
    param: &Tensor,
    grad: &Tensor,
    state: &AdamState,
    cfg: &AdamConfig,
) -> Result<(Tensor, AdamState)> {
    cfg.validate()?;
    param.ensure_same_shape(grad, "adam_step")?;
    param.ensure_same_shape(&state.first_moment, "adam_step")?;
    param.ensure_same_shape(&state.second_moment, "adam_step")?;
    grad.ensure_finite("adam_step")?;

    let t = state.step_count + 1;
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    let n = param.len();
    let mut m = Vec::with_capacity(n);
    let mut v = Vec::with_capacity(n);
    let mut p = Vec::with_capacity(n);
    for i in 0..n {
        let g = grad.data()[i];
        let mi = cfg.beta1 * state.first_moment.data()[i] + (1.0 - cfg.beta1) * g;
        let vi = cfg.beta2 * state.second_moment.data()[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = mi / bc1;
        let v_hat = vi / bc2;
        p.push(param.data()[i] - cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps));
        m.push(mi);
        v.push(vi);
    }
    let shape = param.shape().to_vec();
    let next = Tensor::from_raw(shape.clone(), p);
    next.ensure_finite("adam_step")?;
    Ok((
        next,
        AdamState {
            first_moment: Tensor::from_raw(shape.clone(), m),
            second_moment: Tensor::from_raw(shape, v),
            step_count: t,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_param() {
        let p = Tensor::vector(vec![0.3, -1.2, 4.0]).unwrap();
        let g = Tensor::zeros(&[3]).unwrap();
        let s = AdamState::new(&[3]).unwrap();
        let (next, state) = adam_step(&p, &g, &s, &AdamConfig::default()).unwrap();
        assert_eq!(next, p);
        assert_eq!(state.step_count, 1);
    }

    #[test]
    fn first_step_hand_value() {
        // m = 1, v = 0.001; bias-corrected v_hat = 1, so the step is lr / (1 + eps).
        let cfg = AdamConfig { lr: 0.1, beta1: 0.0, beta2: 0.999, eps: 1e-8 };
        let p = Tensor::scalar(1.0).unwrap();
        let g = Tensor::scalar(1.0).unwrap();
        let (next, _) = adam_step(&p, &g, &AdamState::new(&[1]).unwrap(), &cfg).unwrap();
        let expected = 1.0 - 0.1 / (1.0 + 1e-8);
        assert!((next.data()[0] - expected).abs() < 1e-12);
        assert!((next.data()[0] - 0.9).abs() < 1e-6);
    }

    #[test]
    fn beta1_zero_first_moment_is_raw_gradient() {
        let p = Tensor::vector(vec![1.0, 2.0]).unwrap();
        let g = Tensor::vector(vec![0.5, -3.0]).unwrap();
        let (_, s1) = adam_step(&p, &g, &AdamState::new(&[2]).unwrap(), &AdamConfig::default()).unwrap();
        let g2 = Tensor::vector(vec![-0.25, 7.0]).unwrap();
        let (_, s2) = adam_step(&p, &g2, &s1, &AdamConfig::default()).unwrap();
        assert_eq!(s1.first_moment, g);
        assert_eq!(s2.first_moment, g2);
        assert!(s2.second_moment.data().iter().all(|&v| v >= 0.0));
        assert_eq!(s2.step_count, 2);
    }

    #[test]
    fn deterministic() {
        let p = Tensor::vector(vec![0.1, 0.2]).unwrap();
        let g = Tensor::vector(vec![0.3, -0.4]).unwrap();
        let s = AdamState::new(&[2]).unwrap();
        let a = adam_step(&p, &g, &s, &AdamConfig::default()).unwrap();
        let b = adam_step(&p, &g, &s, &AdamConfig::default()).unwrap();
        assert_eq!(a, b);
        let a2 = adam_step(&a.0, &g, &a.1, &AdamConfig::default()).unwrap();
        let b2 = adam_step(&b.0, &g, &b.1, &AdamConfig::default()).unwrap();
        assert_eq!(a2, b2);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let p = Tensor::zeros(&[2]).unwrap();
        let g = Tensor::zeros(&[3]).unwrap();
        assert!(adam_step(&p, &g, &AdamState::new(&[2]).unwrap(), &AdamConfig::default()).is_err());
    }
}

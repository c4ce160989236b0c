//! Adam with bias correction, the step learning-rate schedule and global
//! gradient-norm clipping.

use crate::error::{Error, Result};
use crate::params::Parameters;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;
pub const LR_DECAY: f64 = 0.5;
pub const LR_STEP_EPOCHS: usize = 20;

/// `base_lr · 0.5^⌊epoch / 20⌋`.
pub fn lr_at(epoch: usize, base_lr: f64) -> f64 {
    lr_at_with(epoch, base_lr, LR_DECAY, LR_STEP_EPOCHS)
}

pub fn lr_at_with(epoch: usize, base_lr: f64, decay: f64, every: usize) -> f64 {
    base_lr * decay.powi((epoch / every.max(1)) as i32)
}

/// First and second moments per parameter, in [`Parameters::named`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    step: u64,
}

impl AdamState {
    pub fn new<P: Parameters + ?Sized>(params: &P) -> Self {
        let shapes: Vec<usize> = params.named().iter().map(|(_, t)| t.len()).collect();
        Self {
            first: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            second: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected update from the parameters' accumulated gradients.
    /// Gradients are left in place; callers zero them.
    pub fn step<P: Parameters + ?Sized>(&mut self, params: &mut P, lr: f64) -> Result<()> {
        let mut named = params.named_mut();
        if named.len() != self.first.len()
            || named.iter().zip(&self.first).any(|((_, t), m)| t.len() != m.len())
        {
            return Err(Error::Shape("Adam state does not match parameter shapes".into()));
        }
        if let Some((name, _)) = named
            .iter()
            .find(|(_, t)| t.grad().iter().any(|g| !g.is_finite()))
        {
            return Err(Error::NonFinite(format!("gradient of parameter {name}")));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - BETA1.powi(t);
        let c2 = 1.0 - BETA2.powi(t);
        for (((_, p), m), v) in named.iter_mut().zip(&mut self.first).zip(&mut self.second) {
            let grads = p.grad().to_vec();
            for (i, (w, g)) in p.values_mut().iter_mut().zip(&grads).enumerate() {
                m[i] = BETA1 * m[i] + (1.0 - BETA1) * g;
                v[i] = BETA2 * v[i] + (1.0 - BETA2) * g * g;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                *w -= lr * m_hat / (v_hat.sqrt() + EPSILON);
            }
        }
        Ok(())
    }
}

/// Global L2 norm of all accumulated gradients.
pub fn grad_norm<P: Parameters + ?Sized>(params: &P) -> f64 {
    params
        .named()
        .iter()
        .flat_map(|(_, t)| t.grad().iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt()
}

/// Rescales gradients so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<P: Parameters + ?Sized>(params: &mut P, max_norm: f64) -> f64 {
    let norm = grad_norm(params);
    if norm > max_norm && norm.is_finite() {
        let k = max_norm / norm;
        for (_, t) in params.named_mut() {
            t.grad_mut().iter_mut().for_each(|g| *g *= k);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    struct Scalar(Tensor);
    impl Parameters for Scalar {
        fn named(&self) -> Vec<(&'static str, &Tensor)> {
            vec![("theta", &self.0)]
        }
        fn named_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
            vec![("theta", &mut self.0)]
        }
    }

    #[test]
    fn schedule_points() {
        assert_eq!(lr_at(0, 2e-4), 2e-4);
        assert_eq!(lr_at(19, 2e-4), 2e-4);
        assert_eq!(lr_at(20, 2e-4), 1e-4);
        assert!((lr_at(40, 2e-4) - 5e-5).abs() < 1e-20);
        for e in 1..200 {
            let jumped = lr_at(e, 1.0) != lr_at(e - 1, 1.0);
            assert_eq!(jumped, e % 20 == 0, "epoch {e}");
        }
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = Scalar(Tensor::row(vec![1.5, -2.0]));
        let mut s = AdamState::new(&p);
        s.step(&mut p, 0.1).unwrap();
        assert_eq!(p.0.values(), &[1.5, -2.0]);
        assert_eq!(s.step_count(), 1);
    }

    #[test]
    fn first_step_is_sign_of_gradient() {
        let mut p = Scalar(Tensor::row(vec![0.0, 0.0, 0.0]));
        p.0.grad_mut().copy_from_slice(&[3.0, -0.5, 100.0]);
        let mut s = AdamState::new(&p);
        s.step(&mut p, 1e-3).unwrap();
        for (w, sign) in p.0.values().iter().zip([-1.0, 1.0, -1.0]) {
            assert!((w - sign * 1e-3).abs() < 1e-10);
        }
    }

    #[test]
    fn two_steps_on_square() {
        // f(θ) = θ², θ0 = 1, lr = 0.1; trace computed at 40 digits.
        let mut p = Scalar(Tensor::scalar(1.0));
        let mut s = AdamState::new(&p);
        let expect = [0.900_000_000_499_999_997_5, 0.800_412_228_691_792_1];
        for e in expect {
            let th = p.0.item();
            p.0.grad_mut()[0] = 2.0 * th;
            s.step(&mut p, 0.1).unwrap();
            p.0.zero_grad();
            assert!((p.0.item() - e).abs() < 1e-14, "{} vs {e}", p.0.item());
        }
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut p = Scalar(Tensor::scalar(1.0));
        p.0.grad_mut()[0] = f64::NAN;
        let err = AdamState::new(&p).step(&mut p, 0.1).unwrap_err();
        assert!(err.to_string().contains("theta"));
    }

    #[test]
    fn clipping_bounds_norm() {
        let mut p = Scalar(Tensor::row(vec![0.0, 0.0]));
        p.0.grad_mut().copy_from_slice(&[30.0, 40.0]);
        assert_eq!(clip_grad_norm(&mut p, 5.0), 50.0);
        assert!((grad_norm(&p) - 5.0).abs() < 1e-12);
        clip_grad_norm(&mut p, 10.0);
        assert!((grad_norm(&p) - 5.0).abs() < 1e-12);
    }
}

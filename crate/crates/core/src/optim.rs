//! Adam optimizer over the flat policy parameter vector.
//!
//! Standard Adam with bias correction, implemented as minimization: the
//! trainer maximizes expected reward by stepping on the *negated* policy
//! gradient estimate. Moment vectors are part of checkpoint state so a
//! resumed run continues bit-identically.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{Gradient, PolicyParams};

/// Adam state: hyperparameters plus first/second moment estimates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    /// Step size.
    pub lr: f64,
    /// First-moment decay (default 0.9).
    pub beta1: f64,
    /// Second-moment decay (default 0.999).
    pub beta2: f64,
    /// Denominator stabilizer (default 1e-8).
    pub eps: f64,
    /// First-moment estimate.
    pub m: Vec<f64>,
    /// Second-moment estimate.
    pub v: Vec<f64>,
    /// Completed step count.
    pub t: u64,
}

impl Adam {
    /// Fresh optimizer state for `param_count` parameters.
    pub fn new(lr: f64, param_count: usize) -> Result<Adam> {
        if !lr.is_finite() || lr <= 0.0 {
            return Err(Error::Config(format!("learning rate must be > 0, got {lr}")));
        }
        Ok(Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; param_count],
            v: vec![0.0; param_count],
            t: 0,
        })
    }

    /// One minimization step: `θ ← θ − lr · m̂ / (√v̂ + ε)` with
    /// bias-corrected moments. `grad` is the gradient of the loss (for
    /// reward ascent, pass the negated reward gradient).
    pub fn step(&mut self, params: &mut PolicyParams, grad: &Gradient) -> Result<()> {
        if grad.theta.len() != params.theta.len() || self.m.len() != params.theta.len() {
            return Err(Error::Input(format!(
                "optimizer/gradient/parameter sizes disagree: {} / {} / {}",
                self.m.len(),
                grad.theta.len(),
                params.theta.len()
            )));
        }
        if !grad.is_finite() {
            return Err(Error::Numerical {
                episode: None,
                msg: "optimizer received a non-finite gradient".into(),
            });
        }
        self.t += 1;
        let t = self.t as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for i in 0..params.theta.len() {
            let g = grad.theta[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params.theta[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }

    /// Rounds the moment vectors to f32, matching the checkpoint
    /// representation (see `PolicyParams::quantize_to_f32`).
    pub fn quantize_to_f32(&mut self) {
        for x in self.m.iter_mut().chain(self.v.iter_mut()) {
            *x = *x as f32 as f64;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::init_policy;

    fn tiny_params(v: &[f64]) -> PolicyParams {
        PolicyParams {
            feature_dim: 1,
            hidden: 1,
            theta: v.to_vec(),
        }
    }

    #[test]
    fn rejects_bad_learning_rates() {
        assert!(matches!(Adam::new(0.0, 3), Err(Error::Config(_))));
        assert!(matches!(Adam::new(-1.0, 3), Err(Error::Config(_))));
        assert!(matches!(Adam::new(f64::NAN, 3), Err(Error::Config(_))));
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut p = tiny_params(&[0.5, -0.25, 1.0]);
        let before = p.clone();
        let mut opt = Adam::new(1e-2, 3).unwrap();
        opt.step(&mut p, &Gradient { theta: vec![0.0; 3] }).unwrap();
        assert_eq!(p, before);
        assert_eq!(opt.t, 1);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        // With zero moments, one Adam step is θ − lr·g/(|g| + ε·√bc2/bc1-ish);
        // for |g| ≫ ε the move is lr·sign(g) to within eps/|g| relative error.
        let mut p = tiny_params(&[0.0, 0.0, 0.0]);
        let g = Gradient {
            theta: vec![3.0, -0.7, 0.0],
        };
        let lr = 1e-4;
        let mut opt = Adam::new(lr, 3).unwrap();
        opt.step(&mut p, &g).unwrap();
        assert!((p.theta[0] - (-lr)).abs() < lr * 1e-6);
        assert!((p.theta[1] - lr).abs() < lr * 1e-6);
        assert_eq!(p.theta[2], 0.0);
    }

    #[test]
    fn moments_accumulate_with_bias_correction() {
        // Two steps with constant gradient g: hand-computed Adam update.
        let g = 2.0;
        let (b1, b2, eps, lr) = (0.9, 0.999, 1e-8, 0.05);
        let mut p = tiny_params(&[1.0]);
        let mut opt = Adam::new(lr, 1).unwrap();
        let grad = Gradient { theta: vec![g] };

        let mut m = 0.0f64;
        let mut v = 0.0f64;
        let mut x = 1.0f64;
        for t in 1..=2 {
            opt.step(&mut p, &grad).unwrap();
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let m_hat = m / (1.0 - b1.powi(t));
            let v_hat = v / (1.0 - b2.powi(t));
            x -= lr * m_hat / (v_hat.sqrt() + eps);
            assert!((p.theta[0] - x).abs() < 1e-15, "step {t}");
        }
    }

    #[test]
    fn size_mismatch_is_an_input_error() {
        let mut p = tiny_params(&[0.0, 0.0]);
        let mut opt = Adam::new(1e-3, 3).unwrap();
        assert!(matches!(
            opt.step(&mut p, &Gradient { theta: vec![0.0; 2] }),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn non_finite_gradient_is_a_numerical_error() {
        let mut p = tiny_params(&[0.0]);
        let mut opt = Adam::new(1e-3, 1).unwrap();
        let res = opt.step(
            &mut p,
            &Gradient {
                theta: vec![f64::NAN],
            },
        );
        assert!(matches!(res, Err(Error::Numerical { .. })));
        // Failed step must not advance the counter or corrupt moments.
        assert_eq!(opt.t, 0);
        assert_eq!(opt.m, vec![0.0]);
    }

    #[test]
    fn descends_a_quadratic() {
        // Minimize (θ − 3)² with exact gradients; Adam should approach 3.
        let mut p = init_policy(1, 1, 0).unwrap();
        let n = p.len();
        let mut opt = Adam::new(0.05, n).unwrap();
        for _ in 0..2000 {
            let g: Vec<f64> = p.theta.iter().map(|&x| 2.0 * (x - 3.0)).collect();
            opt.step(&mut p, &Gradient { theta: g }).unwrap();
        }
        for &x in &p.theta {
            assert!((x - 3.0).abs() < 0.05, "ended at {x}");
        }
    }

    #[test]
    fn quantize_rounds_moments_to_f32() {
        let mut opt = Adam::new(1e-3, 2).unwrap();
        opt.m = vec![0.1 + 1e-12, -0.2];
        opt.v = vec![0.3, 0.4 + 1e-13];
        opt.quantize_to_f32();
        assert_eq!(opt.m[0], (0.1 + 1e-12) as f32 as f64);
        assert_eq!(opt.v[1], (0.4 + 1e-13) as f32 as f64);
    }
}

//! AdamW with decoupled weight decay, a cosine learning-rate schedule, and the
//! central-difference gradient checker used throughout the test suites.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamWState {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub hyper: AdamWConfig,
}

impl AdamWState {
    pub fn new(n_params: usize, hyper: AdamWConfig) -> Self {
        Self {
            step: 0,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            hyper,
        }
    }
}

/// One AdamW update. A gradient containing NaN/Inf is refused and leaves both
/// `params` and `state` untouched.
pub fn adamw_step(params: &mut [f64], grads: &[f64], state: &mut AdamWState, lr: f64) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::DimensionMismatch {
            expected: params.len(),
            got: grads.len(),
        });
    }
    if !(lr >= 0.0) {
        return Err(Error::invalid("learning rate must be non-negative"));
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::Numerical("non-finite gradient, step refused".into()));
    }
    let AdamWConfig {
        beta1,
        beta2,
        eps,
        weight_decay,
    } = state.hyper;
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        *m = beta1 * *m + (1.0 - beta1) * g;
        *v = beta2 * *v + (1.0 - beta2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= lr * (m_hat / (v_hat.sqrt() + eps) + weight_decay * *p);
    }
    Ok(())
}

/// Scales `grads` in place so their L2 norm is at most `max_norm`.
pub fn clip_grad_norm(grads: &mut [f64], max_norm: f64) -> f64 {
    let n = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
    if n > max_norm && n > 0.0 {
        let s = max_norm / n;
        grads.iter_mut().for_each(|g| *g *= s);
    }
    n
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CosineSchedule {
    pub lr0: f64,
    pub lr_min: f64,
    pub total_steps: u64,
}

impl CosineSchedule {
    pub fn new(lr0: f64, lr_min: f64, total_steps: u64) -> Result<Self> {
        if !(0.0 <= lr_min && lr_min <= lr0) {
            return Err(Error::invalid(format!("need 0 <= lr_min ({lr_min}) <= lr0 ({lr0})")));
        }
        if total_steps == 0 {
            return Err(Error::invalid("cosine schedule needs at least one step"));
        }
        Ok(Self {
            lr0,
            lr_min,
            total_steps,
        })
    }

    /// Steps past `total_steps` stay at `lr_min`.
    pub fn lr(&self, step: u64) -> f64 {
        if step >= self.total_steps {
            return self.lr_min;
        }
        let frac = step as f64 / self.total_steps as f64;
        self.lr_min + 0.5 * (self.lr0 - self.lr_min) * (1.0 + (std::f64::consts::PI * frac).cos())
    }
}

pub fn cosine_lr(sched: &CosineSchedule, step: u64) -> f64 {
    sched.lr(step)
}

/// Central-difference gradient of `loss_fn` at `params`.
pub fn numeric_grad<F>(mut loss_fn: F, params: &[f64], eps: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(eps > 0.0) {
        return Err(Error::invalid("finite-difference step must be positive"));
    }
    let mut theta = params.to_vec();
    let mut out = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        let orig = theta[i];
        theta[i] = orig + eps;
        let up = loss_fn(&theta);
        theta[i] = orig - eps;
        let down = loss_fn(&theta);
        theta[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::Numerical(format!("non-finite loss probing coordinate {i}")));
        }
        out.push((up - down) / (2.0 * eps));
    }
    Ok(out)
}

/// Max relative error between `analytic` and central differences, with the
/// denominator `max(|a|, |f|, 1e-12)` per coordinate.
pub fn finite_diff_check<F>(loss_fn: F, params: &[f64], analytic: &[f64], eps: f64) -> Result<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    if analytic.len() != params.len() {
        return Err(Error::DimensionMismatch {
            expected: params.len(),
            got: analytic.len(),
        });
    }
    let numeric = numeric_grad(loss_fn, params, eps)?;
    Ok(numeric
        .iter()
        .zip(analytic)
        .map(|(f, a)| (a - f).abs() / a.abs().max(f.abs()).max(1e-12))
        .fold(0.0, f64::max))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_endpoints_and_midpoint() {
        let s = CosineSchedule::new(1e-3, 1e-5, 100).unwrap();
        assert_eq!(s.lr(0), 1e-3);
        assert_eq!(s.lr(100), 1e-5);
        assert_eq!(s.lr(500), 1e-5);
        assert!((cosine_lr(&s, 50) - (1e-3 + 1e-5) / 2.0).abs() < 1e-15);
        assert!(CosineSchedule::new(1e-3, 1e-2, 10).is_err());
        assert!(CosineSchedule::new(1e-3, 0.0, 0).is_err());
    }

    #[test]
    fn cosine_is_monotone_and_bounded() {
        let s = CosineSchedule::new(0.1, 0.01, 37).unwrap();
        let mut prev = f64::INFINITY;
        for t in 0..=40 {
            let lr = s.lr(t);
            assert!(lr <= prev && (0.01..=0.1).contains(&lr));
            prev = lr;
        }
    }

    #[test]
    fn zero_grad_zero_decay_is_identity() {
        let hyper = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut st = AdamWState::new(3, hyper);
        let mut p = vec![1.0, -2.0, 3.5];
        for _ in 0..5 {
            adamw_step(&mut p, &[0.0; 3], &mut st, 0.1).unwrap();
        }
        assert_eq!(p, vec![1.0, -2.0, 3.5]);
    }

    #[test]
    fn first_step_hand_value() {
        let hyper = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut st = AdamWState::new(1, hyper);
        let mut p = vec![1.0];
        adamw_step(&mut p, &[1.0], &mut st, 0.1).unwrap();
        // m̂ = v̂ = 1 after bias correction
        assert!((p[0] - (1.0 - 0.1 / (1.0 + 1e-8))).abs() < 1e-15);
        assert!((p[0] - 0.9).abs() < 1e-8);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn decoupled_decay_hand_value() {
        let hyper = AdamWConfig {
            weight_decay: 0.1,
            ..Default::default()
        };
        let mut st = AdamWState::new(1, hyper);
        let mut p = vec![1.0];
        adamw_step(&mut p, &[0.0], &mut st, 0.1).unwrap();
        assert!((p[0] - 0.99).abs() < 1e-15);
    }

    #[test]
    fn nan_gradient_refused() {
        let mut st = AdamWState::new(2, AdamWConfig::default());
        let before = st.clone();
        let mut p = vec![1.0, 2.0];
        assert!(adamw_step(&mut p, &[0.5, f64::NAN], &mut st, 0.1).is_err());
        assert_eq!(p, vec![1.0, 2.0]);
        assert_eq!(st, before);
    }

    #[test]
    fn convex_quadratic_descends_after_warmup() {
        // L = Σ c_i θ_i², lr small relative to the scale of θ
        let c = [1.0, 3.0, 0.5];
        let loss = |p: &[f64]| p.iter().zip(&c).map(|(x, ci)| ci * x * x).sum::<f64>();
        let mut p = vec![2.0, -1.5, 3.0];
        let mut st = AdamWState::new(3, AdamWConfig::default());
        let mut prev = loss(&p);
        for t in 0..200 {
            let g: Vec<f64> = p.iter().zip(&c).map(|(x, ci)| 2.0 * ci * x).collect();
            adamw_step(&mut p, &g, &mut st, 1e-3).unwrap();
            let l = loss(&p);
            if t >= 10 {
                assert!(l < prev, "step {t}: {l} >= {prev}");
            }
            prev = l;
        }
    }

    #[test]
    fn fd_check_quadratic_and_constant() {
        let err = finite_diff_check(|p| p[0] * p[0], &[3.0], &[6.0], 1e-5).unwrap();
        assert!(err <= 1e-9, "{err}");
        let err = finite_diff_check(|_| 4.2, &[1.0, 2.0], &[0.0, 0.0], 1e-5).unwrap();
        assert_eq!(err, 0.0);
        assert!(finite_diff_check(|_| f64::NAN, &[1.0], &[0.0], 1e-5).is_err());
    }

    #[test]
    fn clipping() {
        let mut g = vec![3.0, 4.0];
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((g[0] - 0.6).abs() < 1e-15 && (g[1] - 0.8).abs() < 1e-15);
    }
}

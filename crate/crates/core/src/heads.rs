//! Task decoders on the selected layer's encoded features: a one-hidden-layer
//! authenticity classifier and a shared-trunk three-score quality regressor.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{add_outer, dot, matvec, matvec_t, Matrix};

pub const PROB_CLAMP: f64 = 1e-7;

fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn init_params<R: Rng>(sizes: &[(usize, f64)], rng: &mut R) -> Vec<f64> {
    let mut params = Vec::with_capacity(sizes.iter().map(|s| s.0).sum());
    for &(n, std) in sizes {
        if std == 0.0 {
            params.extend(std::iter::repeat_n(0.0, n));
        } else {
            let dist = Normal::new(0.0, std).expect("finite std");
            params.extend((0..n).map(|_| dist.sample(rng)));
        }
    }
    params
}

/// Hidden trunk `relu(W1 x + b1)` shared by both decoders' layouts.
fn trunk(w1: &[f64], b1: &[f64], x: &[f64]) -> Vec<f64> {
    let mut pre = vec![0.0; b1.len()];
    matvec(w1, x, &mut pre);
    pre.iter_mut().zip(b1).for_each(|(p, b)| *p = (*p + b).max(0.0));
    pre
}

/// Back-propagates `g_hidden` (already masked by the ReLU) into `W1`, `b1`.
fn trunk_backward(x: &[f64], g_hidden: &[f64], weight: f64, g_w1: &mut [f64], g_b1: &mut [f64]) {
    add_outer(g_w1, weight, g_hidden, x);
    for (g, h) in g_b1.iter_mut().zip(g_hidden) {
        *g += weight * h;
    }
}

/// Authenticity classifier: `logistic(w2 · relu(W1 h + b1) + b2)`.
///
/// Parameter layout: `W1` (hidden × in), `b1` (hidden), `w2` (hidden), `b2`.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionHead {
    in_dim: usize,
    hidden: usize,
    params: Vec<f64>,
}

impl DetectionHead {
    /// He-normal trunk; output weights and all biases zero, so a fresh head
    /// outputs exactly 0.5.
    pub fn init<R: Rng>(in_dim: usize, hidden: usize, rng: &mut R) -> Self {
        let params = init_params(
            &[
                (hidden * in_dim, (2.0 / in_dim as f64).sqrt()),
                (hidden, 0.0),
                (hidden, 0.0),
                (1, 0.0),
            ],
            rng,
        );
        Self { in_dim, hidden, params }
    }

    pub fn zeros(in_dim: usize, hidden: usize) -> Self {
        Self {
            in_dim,
            hidden,
            params: vec![0.0; Self::param_count(in_dim, hidden)],
        }
    }

    pub fn from_params(in_dim: usize, hidden: usize, params: Vec<f64>) -> Result<Self> {
        let expected = Self::param_count(in_dim, hidden);
        if params.len() != expected {
            return Err(Error::DimensionMismatch {
                expected,
                got: params.len(),
            });
        }
        Ok(Self { in_dim, hidden, params })
    }

    pub fn param_count(in_dim: usize, hidden: usize) -> usize {
        hidden * in_dim + 2 * hidden + 1
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn split(&self) -> (&[f64], &[f64], &[f64], f64) {
        let (w1, rest) = self.params.split_at(self.hidden * self.in_dim);
        let (b1, rest) = rest.split_at(self.hidden);
        let (w2, b2) = rest.split_at(self.hidden);
        (w1, b1, w2, b2[0])
    }

    pub fn logit(&self, h: &[f64]) -> Result<f64> {
        check_dim(self.in_dim, h)?;
        let (w1, b1, w2, b2) = self.split();
        Ok(dot(w2, &trunk(w1, b1, h)) + b2)
    }
}

fn check_dim(expected: usize, h: &[f64]) -> Result<()> {
    if h.len() != expected {
        return Err(Error::DimensionMismatch {
            expected,
            got: h.len(),
        });
    }
    Ok(())
}

/// Probability that `h` is edited.
pub fn detect(head: &DetectionHead, h: &[f64]) -> Result<f64> {
    Ok(logistic(head.logit(h)?))
}

/// Binary cross-entropy with `p` clamped to `[1e-7, 1 − 1e-7]`.
pub fn bce_loss(p: f64, y: u8) -> f64 {
    let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    if y == 1 {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

/// `dL/dp = (p − y) / (p (1 − p))` inside the clamp range.
pub fn bce_grad_p(p: f64, y: u8) -> f64 {
    if !(PROB_CLAMP..=1.0 - PROB_CLAMP).contains(&p) {
        return 0.0;
    }
    (p - f64::from(y)) / (p * (1.0 - p))
}

/// Mean BCE over rows of `x` and its gradient with respect to the head parameters.
pub fn detection_grad(head: &DetectionHead, x: &Matrix, y: &[u8]) -> Result<(f64, Vec<f64>)> {
    if x.rows() != y.len() || x.rows() == 0 {
        return Err(Error::invalid("detection batch is empty or labels misaligned"));
    }
    check_dim(head.in_dim, x.row(0))?;
    let (w1, b1, w2, b2) = head.split();
    let (hidden, in_dim) = (head.hidden, head.in_dim);
    let mut grad = vec![0.0; head.params.len()];
    let weight = 1.0 / x.rows() as f64;
    let mut total = 0.0;
    let mut g_hidden = vec![0.0; hidden];
    for (row, &label) in x.iter_rows().zip(y) {
        let a = trunk(w1, b1, row);
        let p = logistic(dot(w2, &a) + b2);
        total += bce_loss(p, label);
        // d loss / d logit through the clamp
        let dz = bce_grad_p(p, label) * p * (1.0 - p);
        if dz == 0.0 {
            continue;
        }
        let (g_w1, rest) = grad.split_at_mut(hidden * in_dim);
        let (g_b1, rest) = rest.split_at_mut(hidden);
        let (g_w2, g_b2) = rest.split_at_mut(hidden);
        for j in 0..hidden {
            g_w2[j] += weight * dz * a[j];
            g_hidden[j] = if a[j] > 0.0 { dz * w2[j] } else { 0.0 };
        }
        g_b2[0] += weight * dz;
        trunk_backward(row, &g_hidden, weight, g_w1, g_b1);
    }
    Ok((total * weight, grad))
}

/// `[s_q, s_e, s_p]`: perceptual quality, editing alignment, attribute preservation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QualityVector {
    pub s_q: f64,
    pub s_e: f64,
    pub s_p: f64,
}

impl QualityVector {
    pub const DIMENSIONS: [&'static str; 3] = ["quality", "alignment", "preservation"];

    pub fn from_array(a: [f64; 3]) -> Self {
        Self {
            s_q: a[0],
            s_e: a[1],
            s_p: a[2],
        }
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.s_q, self.s_e, self.s_p]
    }

    /// Clamped to the annotation scale for reporting.
    pub fn clamped(self) -> Self {
        let c = |v: f64| v.clamp(1.0, 5.0);
        Self {
            s_q: c(self.s_q),
            s_e: c(self.s_e),
            s_p: c(self.s_p),
        }
    }
}

/// Three-output regressor on a shared trunk.
///
/// Parameter layout: `W1` (hidden × in), `b1` (hidden), `W_out` (3 × hidden),
/// `b_out` (3); row `k` of `W_out` is the head for dimension `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct QualityHead {
    in_dim: usize,
    hidden: usize,
    params: Vec<f64>,
}

impl QualityHead {
    /// He-normal trunk; output weights and all biases zero, so a fresh head
    /// predicts exactly zero and starts from a constant function.
    pub fn init<R: Rng>(in_dim: usize, hidden: usize, rng: &mut R) -> Self {
        let params = init_params(
            &[
                (hidden * in_dim, (2.0 / in_dim as f64).sqrt()),
                (hidden, 0.0),
                (3 * hidden, 0.0),
                (3, 0.0),
            ],
            rng,
        );
        Self { in_dim, hidden, params }
    }

    pub fn zeros(in_dim: usize, hidden: usize) -> Self {
        Self {
            in_dim,
            hidden,
            params: vec![0.0; Self::param_count(in_dim, hidden)],
        }
    }

    pub fn from_params(in_dim: usize, hidden: usize, params: Vec<f64>) -> Result<Self> {
        let expected = Self::param_count(in_dim, hidden);
        if params.len() != expected {
            return Err(Error::DimensionMismatch {
                expected,
                got: params.len(),
            });
        }
        Ok(Self { in_dim, hidden, params })
    }

    pub fn param_count(in_dim: usize, hidden: usize) -> usize {
        hidden * in_dim + hidden + 3 * hidden + 3
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn split(&self) -> (&[f64], &[f64], &[f64], &[f64]) {
        let (w1, rest) = self.params.split_at(self.hidden * self.in_dim);
        let (b1, rest) = rest.split_at(self.hidden);
        let (w_out, b_out) = rest.split_at(3 * self.hidden);
        (w1, b1, w_out, b_out)
    }

    fn forward_array(&self, h: &[f64]) -> ([f64; 3], Vec<f64>) {
        let (w1, b1, w_out, b_out) = self.split();
        let a = trunk(w1, b1, h);
        let mut out = [0.0; 3];
        matvec(w_out, &a, &mut out);
        for (o, b) in out.iter_mut().zip(b_out) {
            *o += b;
        }
        (out, a)
    }
}

pub fn predict_quality(head: &QualityHead, h: &[f64]) -> Result<QualityVector> {
    check_dim(head.in_dim, h)?;
    Ok(QualityVector::from_array(head.forward_array(h).0))
}

/// `(1/N) Σ_i ‖ŷ_i − y_i‖²`.
pub fn quality_loss(preds: &[QualityVector], targets: &[QualityVector]) -> Result<f64> {
    if preds.len() != targets.len() {
        return Err(Error::DimensionMismatch {
            expected: targets.len(),
            got: preds.len(),
        });
    }
    if preds.is_empty() {
        return Err(Error::invalid("quality loss of an empty batch"));
    }
    let total: f64 = preds
        .iter()
        .zip(targets)
        .map(|(p, t)| {
            let (p, t) = (p.to_array(), t.to_array());
            (0..3).map(|k| (p[k] - t[k]).powi(2)).sum::<f64>()
        })
        .sum();
    Ok(total / preds.len() as f64)
}

/// Mean squared error over rows of `x` and its gradient with respect to the head parameters.
pub fn quality_grad(head: &QualityHead, x: &Matrix, targets: &[[f64; 3]]) -> Result<(f64, Vec<f64>)> {
    if x.rows() != targets.len() || x.rows() == 0 {
        return Err(Error::invalid("quality batch is empty or targets misaligned"));
    }
    check_dim(head.in_dim, x.row(0))?;
    let (_, _, w_out, _) = head.split();
    let (hidden, in_dim) = (head.hidden, head.in_dim);
    let mut grad = vec![0.0; head.params.len()];
    let weight = 1.0 / x.rows() as f64;
    let mut total = 0.0;
    let mut g_hidden = vec![0.0; hidden];
    for (row, target) in x.iter_rows().zip(targets) {
        let (out, a) = head.forward_array(row);
        let mut g_out = [0.0; 3];
        for k in 0..3 {
            let r = out[k] - target[k];
            total += r * r;
            g_out[k] = 2.0 * r;
        }
        let (g_w1, rest) = grad.split_at_mut(hidden * in_dim);
        let (g_b1, rest) = rest.split_at_mut(hidden);
        let (g_wout, g_bout) = rest.split_at_mut(3 * hidden);
        add_outer(g_wout, weight, &g_out, &a);
        for k in 0..3 {
            g_bout[k] += weight * g_out[k];
        }
        matvec_t(w_out, &g_out, &mut g_hidden);
        for (g, &act) in g_hidden.iter_mut().zip(&a) {
            if act <= 0.0 {
                *g = 0.0;
            }
        }
        trunk_backward(row, &g_hidden, weight, g_w1, g_b1);
    }
    Ok((total * weight, grad))
}

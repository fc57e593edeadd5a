//! Layer sensitivity analysis.
//!
//! Every layer is scored by three statistics of its real and edited feature
//! populations: a histogram KL divergence (distributional shift), the local
//! discriminant ratio (class separability) and the Shannon entropy of
//! activations with both classes pooled, averaged over dimensions
//! (information richness). Each statistic is min-max normalized
//! across layers and the optimal layer maximizes their sum.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::FeatureStack;
use crate::matrix::Matrix;

/// Equal-width histogram with additive smoothing.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub mass: Vec<f64>,
    pub smoothing: f64,
}

impl Histogram {
    pub fn n_bins(&self) -> usize {
        self.mass.len()
    }
}

/// Values outside `[lo, hi]` fall into the boundary bins.
/// `mass_b = (count_b + alpha) / (N + alpha * n_bins)`.
pub fn estimate_histogram(
    values: &[f64],
    n_bins: usize,
    range: (f64, f64),
    alpha: f64,
) -> Result<Histogram> {
    let (lo, hi) = range;
    if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
        return Err(Error::invalid(format!("histogram range [{lo}, {hi}] is empty")));
    }
    if n_bins < 2 {
        return Err(Error::invalid("histogram needs at least 2 bins"));
    }
    if !(alpha >= 0.0) {
        return Err(Error::invalid("smoothing constant must be >= 0"));
    }
    if values.is_empty() && alpha == 0.0 {
        return Err(Error::invalid("empty input with zero smoothing"));
    }
    let counts = bin_counts(values, n_bins, lo, hi);
    let denom = values.len() as f64 + alpha * n_bins as f64;
    let mass = counts.iter().map(|&c| (c as f64 + alpha) / denom).collect();
    let width = (hi - lo) / n_bins as f64;
    let mut edges: Vec<f64> = (0..n_bins).map(|b| lo + width * b as f64).collect();
    edges.push(hi);
    Ok(Histogram {
        edges,
        mass,
        smoothing: alpha,
    })
}

fn bin_counts(values: &[f64], n_bins: usize, lo: f64, hi: f64) -> Vec<u64> {
    let mut counts = vec![0u64; n_bins];
    let scale = n_bins as f64 / (hi - lo);
    for &v in values {
        let pos = ((v - lo) * scale).floor();
        let b = if pos < 0.0 {
            0
        } else {
            (pos as usize).min(n_bins - 1)
        };
        counts[b] += 1;
    }
    counts
}

/// `Σ_b p_b ln(p_b / q_b)` in nats.
pub fn kl_divergence(p: &Histogram, q: &Histogram) -> Result<f64> {
    if p.edges != q.edges {
        return Err(Error::invalid("histograms have mismatched edges"));
    }
    let mut kl = 0.0;
    for (b, (&pb, &qb)) in p.mass.iter().zip(&q.mass).enumerate() {
        if pb == 0.0 {
            continue;
        }
        if qb == 0.0 {
            return Err(Error::invalid(format!("zero-mass q bin {b}")));
        }
        kl += pb * (pb / qb).ln();
    }
    // rounding can leave a tiny negative value for p == q up to ulps
    Ok(kl.max(0.0))
}

fn min_max(values: impl IntoIterator<Item = f64>) -> Option<(f64, f64)> {
    values.into_iter().fold(None, |acc, v| match acc {
        None => Some((v, v)),
        Some((lo, hi)) => Some((lo.min(v), hi.max(v))),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct KlEstimate {
    /// Mean per-dimension KL(real ‖ edit).
    pub value: f64,
    /// Dimensions with a constant pooled value; they contribute 0.
    pub degenerate_dims: Vec<usize>,
}

/// Per-dimension KL between real and edited features, averaged over dimensions.
/// Both histograms of a dimension share edges spanning the pooled min/max.
pub fn layer_kl(real: &Matrix, edit: &Matrix, n_bins: usize, alpha: f64) -> Result<KlEstimate> {
    check_pair(real, edit)?;
    let dim = real.cols();
    let mut total = 0.0;
    let mut degenerate_dims = Vec::new();
    for d in 0..dim {
        let r = real.column(d);
        let e = edit.column(d);
        let (lo, hi) = min_max(r.iter().chain(&e).copied()).expect("non-empty");
        if lo == hi {
            degenerate_dims.push(d);
            continue;
        }
        let p = estimate_histogram(&r, n_bins, (lo, hi), alpha)?;
        let q = estimate_histogram(&e, n_bins, (lo, hi), alpha)?;
        total += kl_divergence(&p, &q)?;
    }
    Ok(KlEstimate {
        value: total / dim as f64,
        degenerate_dims,
    })
}

fn check_pair(real: &Matrix, edit: &Matrix) -> Result<()> {
    if real.cols() != edit.cols() {
        return Err(Error::DimensionMismatch {
            expected: real.cols(),
            got: edit.cols(),
        });
    }
    if real.cols() == 0 {
        return Err(Error::invalid("feature dimension is zero"));
    }
    if real.rows() == 0 || edit.rows() == 0 {
        return Err(Error::invalid("empty class"));
    }
    Ok(())
}

/// Population mean and variance of every column.
fn column_moments(m: &Matrix) -> (Vec<f64>, Vec<f64>) {
    let n = m.rows() as f64;
    let mut mean = vec![0.0; m.cols()];
    for row in m.iter_rows() {
        for (acc, v) in mean.iter_mut().zip(row) {
            *acc += v;
        }
    }
    mean.iter_mut().for_each(|v| *v /= n);
    let mut var = vec![0.0; m.cols()];
    for row in m.iter_rows() {
        for ((acc, v), mu) in var.iter_mut().zip(row).zip(&mean) {
            *acc += (v - mu) * (v - mu);
        }
    }
    var.iter_mut().for_each(|v| *v /= n);
    (mean, var)
}

/// `(1/D) Σ_d (μ_real,d − μ_edit,d)² / (σ²_real,d + σ²_edit,d + ε)` with
/// population variances.
pub fn local_discriminant_ratio(real: &Matrix, edit: &Matrix, eps: f64) -> Result<f64> {
    check_pair(real, edit)?;
    if real.rows() < 2 || edit.rows() < 2 {
        return Err(Error::invalid("each class needs at least 2 samples"));
    }
    if eps < 0.0 {
        return Err(Error::invalid("eps must be non-negative"));
    }
    let (mr, vr) = column_moments(real);
    let (me, ve) = column_moments(edit);
    let mut total = 0.0;
    for d in 0..real.cols() {
        let gap = mr[d] - me[d];
        let denom = vr[d] + ve[d] + eps;
        if denom > 0.0 {
            total += gap * gap / denom;
        } else if gap != 0.0 {
            return Err(Error::Numerical(format!(
                "dimension {d} has zero variance and a class gap with eps = 0"
            )));
        }
    }
    Ok(total / real.cols() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EntropyEstimate {
    /// Shannon entropy in nats.
    pub value: f64,
    /// Every activation was identical.
    pub degenerate: bool,
}

/// Entropy of one histogram pooling every activation in `feats`.
pub fn feature_entropy(feats: &[&Matrix], n_bins: usize) -> Result<EntropyEstimate> {
    if n_bins < 2 {
        return Err(Error::invalid("entropy needs at least 2 bins"));
    }
    let values: Vec<f64> = feats.iter().flat_map(|m| m.as_slice().iter().copied()).collect();
    let (lo, hi) = min_max(values.iter().copied())
        .ok_or_else(|| Error::invalid("entropy of an empty matrix"))?;
    if lo == hi {
        return Ok(EntropyEstimate {
            value: 0.0,
            degenerate: true,
        });
    }
    let counts = bin_counts(&values, n_bins, lo, hi);
    let n = values.len() as f64;
    let mut h = 0.0;
    for &c in &counts {
        if c == 0 {
            continue;
        }
        let p = c as f64 / n;
        h -= p * p.ln();
    }
    Ok(EntropyEstimate {
        value: h,
        degenerate: false,
    })
}

/// `(v − min) / (max − min)`; all zeros when the range is empty.
/// Per-dimension entropy of both classes' activations, averaged over dimensions.
/// Each dimension is binned over its own range, so a dimension whose classes
/// drift apart spreads its mass instead of stretching a shared range.
/// Constant dimensions contribute 0 and are listed.
pub fn layer_entropy(real: &Matrix, edit: &Matrix, n_bins: usize) -> Result<LayerEntropy> {
    check_pair(real, edit)?;
    let mut total = 0.0;
    let mut degenerate_dims = Vec::new();
    for d in 0..real.cols() {
        let col = Matrix::from_vec(
            real.rows() + edit.rows(),
            1,
            real.column(d).into_iter().chain(edit.column(d)).collect(),
        );
        let h = feature_entropy(&[&col], n_bins)?;
        if h.degenerate {
            degenerate_dims.push(d);
        }
        total += h.value;
    }
    Ok(LayerEntropy {
        value: total / real.cols() as f64,
        degenerate_dims,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerEntropy {
    pub value: f64,
    pub degenerate_dims: Vec<usize>,
}

pub fn minmax_normalize(values: &[f64]) -> Vec<f64> {
    let Some((lo, hi)) = min_max(values.iter().copied()) else {
        return Vec::new();
    };
    if hi == lo {
        return vec![0.0; values.len()];
    }
    values.iter().map(|v| (v - lo) / (hi - lo)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LsaConfig {
    pub n_bins: usize,
    pub alpha: f64,
    pub eps: f64,
}

impl Default for LsaConfig {
    fn default() -> Self {
        Self {
            n_bins: 64,
            alpha: 1e-6,
            eps: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerProfile {
    pub layer: usize,
    pub d_kl: f64,
    pub ldr: f64,
    pub entropy: f64,
    pub d_kl_hat: f64,
    pub ldr_hat: f64,
    pub entropy_hat: f64,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LsaReport {
    pub profiles: Vec<LayerProfile>,
    pub warnings: Vec<String>,
}

impl LsaReport {
    pub fn selected_layer(&self) -> usize {
        select_layer(&self.profiles).expect("report has at least one profile")
    }
}

/// Profiles every layer of a real and an edited stack.
pub fn profile_layers(real: &FeatureStack, edit: &FeatureStack, cfg: &LsaConfig) -> Result<LsaReport> {
    if real.n_layers() != edit.n_layers() {
        return Err(Error::invalid(format!(
            "stacks disagree on layer count: {} vs {}",
            real.n_layers(),
            edit.n_layers()
        )));
    }
    if real.dim() != edit.dim() {
        return Err(Error::DimensionMismatch {
            expected: real.dim(),
            got: edit.dim(),
        });
    }
    let real_layers: Vec<Matrix> = (0..real.n_layers()).map(|l| real.layer_matrix(l)).collect();
    let edit_layers: Vec<Matrix> = (0..edit.n_layers()).map(|l| edit.layer_matrix(l)).collect();
    profile_layer_matrices(&real_layers, &edit_layers, cfg)
}

/// Same as [`profile_layers`] over per-layer matrices (`layers[l]` is samples × dim).
pub fn profile_layer_matrices(
    real_layers: &[Matrix],
    edit_layers: &[Matrix],
    cfg: &LsaConfig,
) -> Result<LsaReport> {
    if real_layers.len() != edit_layers.len() || real_layers.is_empty() {
        return Err(Error::invalid("need the same non-zero number of layers for both classes"));
    }
    let mut warnings = Vec::new();
    let mut raw = Vec::with_capacity(real_layers.len());
    for (l, (r, e)) in real_layers.iter().zip(edit_layers).enumerate() {
        let kl = layer_kl(r, e, cfg.n_bins, cfg.alpha)?;
        if !kl.degenerate_dims.is_empty() {
            warnings.push(format!(
                "layer {l}: {} constant dimension(s) contribute 0 to KL",
                kl.degenerate_dims.len()
            ));
        }
        let ldr = local_discriminant_ratio(r, e, cfg.eps)?;
        let ent = layer_entropy(r, e, cfg.n_bins)?;
        if !ent.degenerate_dims.is_empty() && kl.degenerate_dims.is_empty() {
            warnings.push(format!(
                "layer {l}: {} constant dimension(s) contribute 0 to entropy",
                ent.degenerate_dims.len()
            ));
        }
        raw.push((kl.value, ldr, ent.value));
    }
    if raw.len() == 1 {
        warnings.push("single layer: min-max normalization is degenerate, all scores are 0".into());
    }
    let kl_hat = minmax_normalize(&raw.iter().map(|r| r.0).collect::<Vec<_>>());
    let ldr_hat = minmax_normalize(&raw.iter().map(|r| r.1).collect::<Vec<_>>());
    let ent_hat = minmax_normalize(&raw.iter().map(|r| r.2).collect::<Vec<_>>());
    let profiles = raw
        .iter()
        .enumerate()
        .map(|(l, &(d_kl, ldr, entropy))| LayerProfile {
            layer: l,
            d_kl,
            ldr,
            entropy,
            d_kl_hat: kl_hat[l],
            ldr_hat: ldr_hat[l],
            entropy_hat: ent_hat[l],
            score: kl_hat[l] + ldr_hat[l] + ent_hat[l],
        })
        .collect();
    for w in &warnings {
        log::warn!("{w}");
    }
    Ok(LsaReport { profiles, warnings })
}

/// Index of the maximum score; ties go to the deeper layer.
pub fn select_layer(profiles: &[LayerProfile]) -> Result<usize> {
    let mut best: Option<&LayerProfile> = None;
    for p in profiles {
        if best.is_none_or(|b| p.score >= b.score) {
            best = Some(p);
        }
    }
    best.map(|p| p.layer)
        .ok_or_else(|| Error::invalid("no layer profiles to select from"))
}

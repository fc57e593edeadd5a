//! Low-rank adapted projection encoder and its supervised contrastive objective.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{add_outer, dot, matvec, matvec_t, norm, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub in_dim: usize,
    pub out_dim: usize,
    pub rank: usize,
    pub alpha_lora: f64,
    /// Contrastive temperature.
    pub tau: f64,
    pub init_seed: u64,
}

impl EncoderConfig {
    pub fn new(in_dim: usize) -> Self {
        Self {
            in_dim,
            out_dim: 256,
            rank: 8,
            alpha_lora: 16.0,
            tau: 0.07,
            init_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_dim == 0 || self.out_dim == 0 || self.rank == 0 {
            return Err(Error::invalid("encoder dimensions and rank must be positive"));
        }
        if self.rank > self.in_dim.min(self.out_dim) {
            return Err(Error::invalid(format!(
                "rank {} exceeds min(in_dim, out_dim) = {}",
                self.rank,
                self.in_dim.min(self.out_dim)
            )));
        }
        if !(self.tau > 0.0) {
            return Err(Error::invalid("tau must be positive"));
        }
        Ok(())
    }
}

/// Frozen affine map plus a trainable rank-`r` update: `W x + b + scale · B (A x)`.
///
/// The trainable parameters live in one flat buffer, `A` (rank × in_dim) followed
/// by `B` (out_dim × rank), so optimizers and gradient checks see a single vector.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraLinear {
    in_dim: usize,
    out_dim: usize,
    rank: usize,
    scale: f64,
    base: Vec<f64>,
    bias: Vec<f64>,
    lora: Vec<f64>,
}

impl LoraLinear {
    /// Base `W ~ N(0, 1/in_dim)`, zero bias, `A ~ N(0, 0.02²)`, `B = 0`.
    pub fn init(cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.init_seed);
        let base_dist = Normal::new(0.0, (1.0 / cfg.in_dim as f64).sqrt()).expect("finite std");
        let base = (0..cfg.out_dim * cfg.in_dim).map(|_| base_dist.sample(&mut rng)).collect();
        let a_dist = Normal::new(0.0, 0.02).expect("finite std");
        let mut lora: Vec<f64> = (0..cfg.rank * cfg.in_dim).map(|_| a_dist.sample(&mut rng)).collect();
        lora.resize(cfg.rank * cfg.in_dim + cfg.out_dim * cfg.rank, 0.0);
        Ok(Self {
            in_dim: cfg.in_dim,
            out_dim: cfg.out_dim,
            rank: cfg.rank,
            scale: cfg.alpha_lora / cfg.rank as f64,
            base,
            bias: vec![0.0; cfg.out_dim],
            lora,
        })
    }

    /// Builds a layer from explicit parts; `lora` is `A` then `B`.
    pub fn from_parts(
        in_dim: usize,
        out_dim: usize,
        rank: usize,
        scale: f64,
        base: Vec<f64>,
        bias: Vec<f64>,
        lora: Vec<f64>,
    ) -> Result<Self> {
        let checks = [
            (base.len(), out_dim * in_dim),
            (bias.len(), out_dim),
            (lora.len(), rank * in_dim + out_dim * rank),
        ];
        for (got, expected) in checks {
            if got != expected {
                return Err(Error::DimensionMismatch { expected, got });
            }
        }
        Ok(Self {
            in_dim,
            out_dim,
            rank,
            scale,
            base,
            bias,
            lora,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn base(&self) -> &[f64] {
        &self.base
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn a(&self) -> &[f64] {
        &self.lora[..self.rank * self.in_dim]
    }

    pub fn b(&self) -> &[f64] {
        &self.lora[self.rank * self.in_dim..]
    }

    /// Trainable parameters, `A` then `B`.
    pub fn lora_params(&self) -> &[f64] {
        &self.lora
    }

    pub fn lora_params_mut(&mut self) -> &mut [f64] {
        &mut self.lora
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.in_dim {
            return Err(Error::DimensionMismatch {
                expected: self.in_dim,
                got: x.len(),
            });
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        Ok(self.forward_cached(x).1)
    }

    /// Returns `(A x, output)`.
    fn forward_cached(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut out = vec![0.0; self.out_dim];
        matvec(&self.base, x, &mut out);
        for (o, b) in out.iter_mut().zip(&self.bias) {
            *o += b;
        }
        let mut ax = vec![0.0; self.rank];
        matvec(self.a(), x, &mut ax);
        let mut bax = vec![0.0; self.out_dim];
        matvec(self.b(), &ax, &mut bax);
        for (o, v) in out.iter_mut().zip(&bax) {
            *o += self.scale * v;
        }
        (ax, out)
    }

    /// Encodes every row of `x`.
    pub fn encode(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.in_dim {
            return Err(Error::DimensionMismatch {
                expected: self.in_dim,
                got: x.cols(),
            });
        }
        let mut data = Vec::with_capacity(x.rows() * self.out_dim);
        for row in x.iter_rows() {
            data.extend(self.forward_cached(row).1);
        }
        Ok(Matrix::from_vec(x.rows(), self.out_dim, data))
    }

    /// Accumulates `dL/d(A,B)` for one input `x` given upstream `g = dL/d output`.
    fn accumulate_grad(&self, x: &[f64], ax: &[f64], g: &[f64], weight: f64, grad: &mut [f64]) {
        let (ga, gb) = grad.split_at_mut(self.rank * self.in_dim);
        add_outer(gb, weight * self.scale, g, ax);
        let mut btg = vec![0.0; self.rank];
        matvec_t(self.b(), g, &mut btg);
        add_outer(ga, weight * self.scale, &btg, x);
    }
}

/// `lora_forward(layer, x) = base(x) + scale · B(A(x))`.
pub fn lora_forward(layer: &LoraLinear, x: &[f64]) -> Result<Vec<f64>> {
    layer.forward(x)
}

pub fn cosine_sim(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::DimensionMismatch {
            expected: u.len(),
            got: v.len(),
        });
    }
    let (nu, nv) = (norm(u), norm(v));
    if nu == 0.0 || nv == 0.0 || !nu.is_finite() || !nv.is_finite() {
        return Err(Error::DegenerateEmbedding(format!("vector norms {nu} and {nv}")));
    }
    Ok((dot(u, v) / (nu * nv)).clamp(-1.0, 1.0))
}

/// `-ln softmax_0(sims / tau)` where `sims = [sim_pos, sim_negs...]`.
pub fn contrastive_loss_from_sims(sim_pos: f64, sim_negs: &[f64], tau: f64) -> Result<f64> {
    if !(tau > 0.0) {
        return Err(Error::invalid("tau must be positive"));
    }
    if !sim_pos.is_finite() || sim_negs.iter().any(|s| !s.is_finite()) {
        return Err(Error::Numerical("non-finite similarity".into()));
    }
    let z0 = sim_pos / tau;
    let zmax = sim_negs.iter().fold(z0, |m, s| m.max(s / tau));
    let sum: f64 = std::iter::once(z0)
        .chain(sim_negs.iter().map(|s| s / tau))
        .map(|z| (z - zmax).exp())
        .sum();
    Ok(zmax + sum.ln() - z0)
}

/// Loss of one encoded triplet with a single negative.
pub fn contrastive_loss(anchor: &[f64], positive: &[f64], negative: &[f64], tau: f64) -> Result<f64> {
    let sp = cosine_sim(anchor, positive)?;
    let sn = cosine_sim(anchor, negative)?;
    contrastive_loss_from_sims(sp, &[sn], tau)
}

/// Raw features of one contrastive triplet.
#[derive(Debug, Clone, PartialEq)]
pub struct Triplet {
    pub f_src: Vec<f64>,
    pub f_pos: Vec<f64>,
    pub f_edit: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveGrad {
    /// Mean loss over the triplets that were used.
    pub loss: f64,
    /// Mean gradient, laid out like [`LoraLinear::lora_params`].
    pub grad: Vec<f64>,
    pub skipped: usize,
}

/// `∂cos(u, v)/∂u`, scaled by `c` and added to `out`.
fn add_cos_grad_u(u: &[f64], v: &[f64], nu: f64, nv: f64, cos: f64, c: f64, out: &mut [f64]) {
    let a = c / (nu * nv);
    let b = c * cos / (nu * nu);
    for ((o, ui), vi) in out.iter_mut().zip(u).zip(v) {
        *o += a * vi - b * ui;
    }
}

struct Encoded {
    ax: Vec<f64>,
    out: Vec<f64>,
    norm: f64,
}

impl Encoded {
    fn new(model: &LoraLinear, x: &[f64]) -> Self {
        let (ax, out) = model.forward_cached(x);
        let norm = norm(&out);
        Self { ax, out, norm }
    }

    fn degenerate(&self) -> bool {
        !(self.norm > 0.0 && self.norm.is_finite())
    }
}

/// Mean loss and analytic gradient with respect to the adapter parameters.
///
/// With `in_batch_negatives` every triplet's negative set is the edited member of
/// all triplets in the batch; otherwise each triplet uses only its own.
/// Triplets with a zero-norm embedding are skipped.
pub fn contrastive_grad(
    model: &LoraLinear,
    batch: &[Triplet],
    tau: f64,
    in_batch_negatives: bool,
) -> Result<ContrastiveGrad> {
    if batch.is_empty() {
        return Err(Error::invalid("empty triplet batch"));
    }
    if !(tau > 0.0) {
        return Err(Error::invalid("tau must be positive"));
    }
    for t in batch {
        for x in [&t.f_src, &t.f_pos, &t.f_edit] {
            model.check_input(x)?;
        }
    }
    let enc_edit: Vec<Encoded> = batch.iter().map(|t| Encoded::new(model, &t.f_edit)).collect();
    let mut edit_up: Vec<Vec<f64>> = vec![vec![0.0; model.out_dim]; batch.len()];
    let mut edit_used = vec![0usize; batch.len()];
    let mut grad = vec![0.0; model.lora.len()];
    let mut total = 0.0;
    let mut used = 0usize;
    let mut skipped = 0usize;

    // First pass collects which triplets are usable so the mean weight is known.
    let mut plans = Vec::with_capacity(batch.len());
    for (i, t) in batch.iter().enumerate() {
        let src = Encoded::new(model, &t.f_src);
        let pos = Encoded::new(model, &t.f_pos);
        let negs: Vec<usize> = if in_batch_negatives {
            (0..batch.len()).filter(|&k| !enc_edit[k].degenerate()).collect()
        } else {
            vec![i]
        };
        if src.degenerate() || pos.degenerate() || negs.is_empty() || enc_edit[i].degenerate() {
            log::warn!("triplet {i}: degenerate embedding, skipped");
            skipped += 1;
            continue;
        }
        plans.push((i, src, pos, negs));
    }
    if plans.is_empty() {
        return Err(Error::DegenerateEmbedding("every triplet in the batch is degenerate".into()));
    }
    let weight = 1.0 / plans.len() as f64;

    for (i, src, pos, negs) in &plans {
        let sp = dot(&src.out, &pos.out) / (src.norm * pos.norm);
        let sns: Vec<f64> = negs
            .iter()
            .map(|&k| dot(&src.out, &enc_edit[k].out) / (src.norm * enc_edit[k].norm))
            .collect();
        let loss = contrastive_loss_from_sims(sp, &sns, tau)?;
        if !loss.is_finite() {
            return Err(Error::Numerical(format!("non-finite contrastive loss at triplet {i}")));
        }
        total += loss;
        used += 1;

        // softmax weights over [pos, negs...]
        let zmax = sns.iter().fold(sp / tau, |m, s| m.max(s / tau));
        let mut w: Vec<f64> = std::iter::once(sp)
            .chain(sns.iter().copied())
            .map(|s| (s / tau - zmax).exp())
            .collect();
        let z: f64 = w.iter().sum();
        w.iter_mut().for_each(|v| *v /= z);

        let c_pos = (w[0] - 1.0) / tau;
        let mut g_src = vec![0.0; model.out_dim];
        let mut g_pos = vec![0.0; model.out_dim];
        add_cos_grad_u(&src.out, &pos.out, src.norm, pos.norm, sp, c_pos, &mut g_src);
        add_cos_grad_u(&pos.out, &src.out, pos.norm, src.norm, sp, c_pos, &mut g_pos);
        for (j, &k) in negs.iter().enumerate() {
            let c = w[j + 1] / tau;
            let e = &enc_edit[k];
            add_cos_grad_u(&src.out, &e.out, src.norm, e.norm, sns[j], c, &mut g_src);
            add_cos_grad_u(&e.out, &src.out, e.norm, src.norm, sns[j], c, &mut edit_up[k]);
            edit_used[k] += 1;
        }
        let t = &batch[*i];
        model.accumulate_grad(&t.f_src, &src.ax, &g_src, weight, &mut grad);
        model.accumulate_grad(&t.f_pos, &pos.ax, &g_pos, weight, &mut grad);
    }
    for (k, t) in batch.iter().enumerate() {
        if edit_used[k] > 0 {
            model.accumulate_grad(&t.f_edit, &enc_edit[k].ax, &edit_up[k], weight, &mut grad);
        }
    }
    Ok(ContrastiveGrad {
        loss: total / used as f64,
        grad,
        skipped,
    })
}

/// Mean contrastive loss of a batch, no gradient.
pub fn contrastive_batch_loss(
    model: &LoraLinear,
    batch: &[Triplet],
    tau: f64,
    in_batch_negatives: bool,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::invalid("empty triplet batch"));
    }
    let edits: Vec<Vec<f64>> = batch.iter().map(|t| model.forward(&t.f_edit)).collect::<Result<_>>()?;
    let mut total = 0.0;
    let mut used = 0usize;
    for (i, t) in batch.iter().enumerate() {
        let src = model.forward(&t.f_src)?;
        let pos = model.forward(&t.f_pos)?;
        let sp = match cosine_sim(&src, &pos) {
            Ok(s) => s,
            Err(Error::DegenerateEmbedding(_)) => continue,
            Err(e) => return Err(e),
        };
        let idx: Vec<usize> = if in_batch_negatives { (0..batch.len()).collect() } else { vec![i] };
        let sns: Vec<f64> = idx
            .iter()
            .filter_map(|&k| cosine_sim(&src, &edits[k]).ok())
            .collect();
        if sns.is_empty() {
            continue;
        }
        total += contrastive_loss_from_sims(sp, &sns, tau)?;
        used += 1;
    }
    if used == 0 {
        return Err(Error::DegenerateEmbedding("every triplet in the batch is degenerate".into()));
    }
    Ok(total / used as f64)
}

/// Mean `sim(anchor, pos) − sim(anchor, edit)` after encoding.
pub fn mean_similarity_margin(model: &LoraLinear, batch: &[Triplet]) -> Result<f64> {
    let mut total = 0.0;
    for t in batch {
        let src = model.forward(&t.f_src)?;
        let sp = cosine_sim(&src, &model.forward(&t.f_pos)?)?;
        let sn = cosine_sim(&src, &model.forward(&t.f_edit)?)?;
        total += sp - sn;
    }
    Ok(total / batch.len().max(1) as f64)
}

/// Triplets whose anchors are the given real rows, in order. Positives are a
/// different real row drawn uniformly, negatives a uniformly drawn edited row.
pub fn triplets_for_anchors<R: Rng>(
    real: &Matrix,
    edited: &Matrix,
    anchors: &[usize],
    rng: &mut R,
) -> Result<Vec<Triplet>> {
    if real.rows() < 2 || edited.rows() < 1 {
        return Err(Error::invalid(format!(
            "insufficient class counts: {} real (need 2), {} edited (need 1)",
            real.rows(),
            edited.rows()
        )));
    }
    let mut out = Vec::with_capacity(anchors.len());
    for &a in anchors {
        let mut p = rng.random_range(0..real.rows() - 1);
        if p >= a {
            p += 1;
        }
        let n = rng.random_range(0..edited.rows());
        out.push(Triplet {
            f_src: real.row(a).to_vec(),
            f_pos: real.row(p).to_vec(),
            f_edit: edited.row(n).to_vec(),
        });
    }
    Ok(out)
}

/// Draws `batch` triplets with anchors sampled without replacement from `real`.
pub fn sample_triplets(real: &Matrix, edited: &Matrix, batch: usize, seed: u64) -> Result<Vec<Triplet>> {
    if batch > real.rows() {
        return Err(Error::invalid(format!(
            "batch of {batch} anchors exceeds {} real samples",
            real.rows()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let anchors = rand::seq::index::sample(&mut rng, real.rows(), batch).into_vec();
    triplets_for_anchors(real, edited, &anchors, &mut rng)
}

//! Independent oracles and fixtures shared by the integration tests.
#![allow(dead_code)]

use std::path::Path;
use std::process::{Command, Output};

use layersel::adapter::{LoraLinear, Triplet};
use layersel::heads::{DetectionHead, QualityHead};
use layersel::io::FeatureStack;
use layersel::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gauss<R: Rng>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

pub fn gauss_vec<R: Rng>(rng: &mut R, n: usize, std: f64) -> Vec<f64> {
    (0..n).map(|_| std * gauss(rng)).collect()
}

pub fn normal_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize, mean: f64, std: f64) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| mean + std * gauss(rng)).collect())
}

pub fn random_stack<R: Rng>(rng: &mut R, n: usize, layers: usize, dim: usize) -> FeatureStack {
    let data = (0..n * layers * dim).map(|_| gauss(rng) as f32 * 3.0).collect();
    let ids = (0..n).map(|i| format!("s{i}-{}", rng.random::<u16>())).collect();
    FeatureStack::new(layers, dim, data, ids).unwrap()
}

/// Kendall tau-b by counting every pair.
pub fn krcc_brute(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len();
    let (mut conc, mut disc, mut tx, mut ty) = (0i64, 0i64, 0i64, 0i64);
    for i in 0..n {
        for j in i + 1..n {
            let dx = x[i] - x[j];
            let dy = y[i] - y[j];
            if dx == 0.0 && dy == 0.0 {
                continue;
            } else if dx == 0.0 {
                tx += 1;
            } else if dy == 0.0 {
                ty += 1;
            } else if (dx > 0.0) == (dy > 0.0) {
                conc += 1;
            } else {
                disc += 1;
            }
        }
    }
    let d = (((conc + disc + tx) * (conc + disc + ty)) as f64).sqrt();
    (d > 0.0).then(|| (conc - disc) as f64 / d)
}

/// Mid-ranks by counting: 1 + #smaller + (#ties − 1) / 2.
pub fn ranks_by_counting(x: &[f64]) -> Vec<f64> {
    x.iter()
        .map(|&v| {
            let less = x.iter().filter(|&&u| u < v).count() as f64;
            let eq = x.iter().filter(|&&u| u == v).count() as f64;
            1.0 + less + (eq - 1.0) / 2.0
        })
        .collect()
}

pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    (sxx > 0.0 && syy > 0.0).then(|| sxy / (sxx * syy).sqrt())
}

pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    pearson(&ranks_by_counting(x), &ranks_by_counting(y))
}

/// Central differences of `f` at `theta`, step `h`.
pub fn central_diff(mut f: impl FnMut(&[f64]) -> f64, theta: &[f64], h: f64) -> Vec<f64> {
    let mut t = theta.to_vec();
    (0..t.len())
        .map(|i| {
            let orig = t[i];
            t[i] = orig + h;
            let up = f(&t);
            t[i] = orig - h;
            let down = f(&t);
            t[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Largest per-coordinate relative error, denominator `max(|a|, |n|, 1e-12)`.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-12))
        .fold(0.0, f64::max)
}

/// Small adapter with every parameter random, so no gradient block is trivially zero.
pub fn random_adapter<R: Rng>(rng: &mut R, in_dim: usize, out_dim: usize, rank: usize) -> LoraLinear {
    LoraLinear::from_parts(
        in_dim,
        out_dim,
        rank,
        0.5 + rng.random::<f64>() * 2.0,
        gauss_vec(rng, out_dim * in_dim, 1.0 / (in_dim as f64).sqrt()),
        gauss_vec(rng, out_dim, 0.1),
        gauss_vec(rng, rank * in_dim + out_dim * rank, 0.3),
    )
    .unwrap()
}

pub fn random_triplets<R: Rng>(rng: &mut R, n: usize, dim: usize) -> Vec<Triplet> {
    (0..n)
        .map(|_| Triplet {
            f_src: gauss_vec(rng, dim, 1.0),
            f_pos: gauss_vec(rng, dim, 1.0),
            f_edit: gauss_vec(rng, dim, 1.0),
        })
        .collect()
}

pub fn random_detection_head<R: Rng>(rng: &mut R, in_dim: usize, hidden: usize) -> DetectionHead {
    let n = DetectionHead::param_count(in_dim, hidden);
    DetectionHead::from_params(in_dim, hidden, gauss_vec(rng, n, 0.5)).unwrap()
}

pub fn random_quality_head<R: Rng>(rng: &mut R, in_dim: usize, hidden: usize) -> QualityHead {
    let n = QualityHead::param_count(in_dim, hidden);
    QualityHead::from_params(in_dim, hidden, gauss_vec(rng, n, 0.5)).unwrap()
}

pub fn run_cli(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_layersel"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

/// Reference per-editor mean scores on the 0-100 scale for 17 editors, human
/// then model, for perceptual quality, editing alignment and attribute
/// preservation, followed by the two overall rank columns.
pub struct ReferenceRanking {
    pub human: [[f64; 17]; 3],
    pub model: [[f64; 17]; 3],
    pub human_rank: [f64; 17],
    pub model_rank: [f64; 17],
}

pub fn reference_ranking() -> ReferenceRanking {
    ReferenceRanking {
        human: [
            [
                62.09, 61.80, 59.15, 64.15, 56.43, 51.47, 56.71, 54.31, 52.50, 49.67, 53.40, 49.43, 44.80, 45.84, 43.90,
                41.56, 32.68,
            ],
            [
                59.65, 55.77, 52.87, 34.50, 42.22, 40.15, 36.00, 44.93, 37.69, 39.09, 34.79, 40.57, 41.90, 43.87, 37.96,
                39.85, 34.16,
            ],
            [
                57.57, 50.71, 48.26, 67.23, 51.18, 56.22, 57.41, 44.36, 57.13, 55.61, 59.23, 51.18, 48.44, 39.77, 48.37,
                47.14, 44.64,
            ],
        ],
        model: [
            [
                61.25, 61.58, 59.29, 63.83, 58.75, 53.38, 55.54, 62.00, 56.71, 53.54, 58.83, 55.96, 47.65, 52.13, 47.00,
                42.58, 34.02,
            ],
            [
                51.42, 52.13, 55.63, 37.04, 49.38, 41.96, 40.63, 53.00, 39.00, 41.13, 36.42, 41.71, 43.46, 49.96, 39.92,
                41.92, 37.54,
            ],
            [
                51.67, 46.67, 41.67, 60.00, 48.33, 53.33, 50.00, 41.67, 55.00, 53.33, 56.67, 45.00, 43.33, 36.67, 46.67,
                46.67, 43.33,
            ],
        ],
        human_rank: std::array::from_fn(|i| (i + 1) as f64),
        model_rank: [1., 2., 3., 6., 4., 7., 11., 5., 8., 9., 10., 12., 14., 13., 15., 16., 17.],
    }
}

//! Synthetic benchmark with planted ground truth.
//!
//! Every layer draws features from a per-layer diagonal Gaussian shared by both
//! classes, except the informative layer: there, edited samples are shifted by
//! `shift` standard deviations on a random quarter of the dimensions, offset by
//! a per-editor bias along the same dimensions, and have their spread inflated
//! slightly. Quality scores are affine in the edited sample's standardized
//! informative-layer deviation plus Gaussian noise, clipped to `[1, 5]`.

use rand::seq::index::sample as sample_indices;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::manifest::fnv1a;
use crate::io::{DatasetManifest, FeatureStack, SampleRecord};

const PROMPTS: [&str; 6] = [
    "raise the left arm above the head",
    "make the person sit down",
    "turn the body to face left",
    "cross both arms over the chest",
    "put both hands on the hips",
    "make the person kneel on one knee",
];

/// Score intercept: the middle of the 1-5 scale.
const SCORE_INTERCEPT: f64 = 3.0;
/// Gain of each score on its unit-norm feature direction.
const SCORE_GAIN: f64 = 0.6;
/// Editor biases span `[-EDITOR_SPREAD, EDITOR_SPREAD]`.
const EDITOR_SPREAD: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_editors: usize,
    pub samples_per_editor: usize,
    pub n_layers: usize,
    pub dim: usize,
    pub informative_layer: usize,
    /// Class-mean separation in standard deviations.
    pub shift: f64,
    /// Standard deviation of the score noise.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_editors: 17,
            samples_per_editor: 100,
            n_layers: 12,
            dim: 64,
            informative_layer: 7,
            shift: 2.0,
            noise: 0.2,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_editors == 0 || self.samples_per_editor == 0 || self.n_layers == 0 || self.dim == 0 {
            return Err(Error::invalid("synthetic sizes must be positive"));
        }
        if self.informative_layer >= self.n_layers {
            return Err(Error::invalid(format!(
                "informative layer {} out of range for {} layers",
                self.informative_layer, self.n_layers
            )));
        }
        if !(self.shift >= 0.0) || !(self.noise >= 0.0) {
            return Err(Error::invalid("shift and noise must be non-negative"));
        }
        Ok(())
    }

    pub fn n_shifted(&self) -> usize {
        ((self.dim as f64) * 0.25).round().max(1.0) as usize
    }

    pub fn variance_inflation(&self) -> f64 {
        1.0 + 0.05 * self.shift
    }

    pub fn editor_name(j: usize) -> String {
        format!("editor-{j:02}")
    }
}

/// Everything a test needs to check recovery of the planted structure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedTruth {
    pub informative_layer: usize,
    pub shift: f64,
    /// Standard-deviation multiplier of edited samples on shifted dimensions.
    pub variance_inflation: f64,
    pub shifted_dims: Vec<usize>,
    /// Informative-layer mean and scale on `shifted_dims`, aligned with it.
    pub informative_mean: Vec<f64>,
    pub informative_scale: Vec<f64>,
    /// `s_k = intercept_k + coefficients_k · z + noise`, with
    /// `z_d = (x_d − mean_d) / scale_d − shift` over `shifted_dims`.
    pub score_intercepts: [f64; 3],
    pub score_coefficients: [Vec<f64>; 3],
    pub noise: f64,
    /// Per-editor bias along the shifted dimensions, in editor order.
    pub editor_biases: Vec<(String, f64)>,
}

impl PlantedTruth {
    /// Editors ordered from highest to lowest expected score.
    pub fn editor_order(&self) -> Vec<String> {
        let mut v = self.editor_biases.clone();
        v.sort_by(|a, b| b.1.total_cmp(&a.1));
        v.into_iter().map(|(e, _)| e).collect()
    }
}

#[derive(Debug, Clone)]
pub struct SynthBenchmark {
    pub real: FeatureStack,
    pub edited: FeatureStack,
    /// Unsplit manifest; each real record is the source of exactly one edit.
    pub manifest: DatasetManifest,
    pub truth: PlantedTruth,
}

struct Globals {
    layer_mean: Vec<Vec<f64>>,
    layer_scale: Vec<Vec<f64>>,
    truth: PlantedTruth,
}

fn globals(cfg: &SynthConfig) -> Result<Globals> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut layer_mean = Vec::with_capacity(cfg.n_layers);
    let mut layer_scale = Vec::with_capacity(cfg.n_layers);
    for _ in 0..cfg.n_layers {
        layer_mean.push((0..cfg.dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect::<Vec<_>>());
        layer_scale.push((0..cfg.dim).map(|_| rng.random_range(0.5..1.5)).collect::<Vec<_>>());
    }
    let mut shifted_dims = sample_indices(&mut rng, cfg.dim, cfg.n_shifted()).into_vec();
    shifted_dims.sort_unstable();
    let n_s = shifted_dims.len();

    let score_coefficients: [Vec<f64>; 3] = std::array::from_fn(|_| {
        let w: Vec<f64> = (0..n_s).map(|_| rng.sample::<f64, _>(StandardNormal).abs()).collect();
        let norm = w.iter().map(|v| v * v).sum::<f64>().sqrt();
        w.iter().map(|v| SCORE_GAIN * v / norm).collect()
    });

    let mut biases: Vec<f64> = (0..cfg.n_editors)
        .map(|j| {
            if cfg.n_editors == 1 {
                0.0
            } else {
                -EDITOR_SPREAD + 2.0 * EDITOR_SPREAD * j as f64 / (cfg.n_editors - 1) as f64
            }
        })
        .collect();
    biases.shuffle(&mut rng);
    let editor_biases = biases
        .into_iter()
        .enumerate()
        .map(|(j, b)| (SynthConfig::editor_name(j), b))
        .collect();

    let l = cfg.informative_layer;
    let truth = PlantedTruth {
        informative_layer: l,
        shift: cfg.shift,
        variance_inflation: cfg.variance_inflation(),
        informative_mean: shifted_dims.iter().map(|&d| layer_mean[l][d]).collect(),
        informative_scale: shifted_dims.iter().map(|&d| layer_scale[l][d]).collect(),
        shifted_dims,
        score_intercepts: [SCORE_INTERCEPT; 3],
        score_coefficients,
        noise: cfg.noise,
        editor_biases,
    };
    Ok(Globals {
        layer_mean,
        layer_scale,
        truth,
    })
}

/// Planted parameters for `cfg` without generating any samples.
pub fn describe_planted_truth(cfg: &SynthConfig) -> Result<PlantedTruth> {
    Ok(globals(cfg)?.truth)
}

fn draw_layer<R: Rng>(mean: &[f64], scale: &[f64], rng: &mut R, out: &mut Vec<f32>) {
    for (m, s) in mean.iter().zip(scale) {
        let e: f64 = rng.sample(StandardNormal);
        out.push((m + s * e) as f32);
    }
}

pub fn generate_benchmark(cfg: &SynthConfig) -> Result<SynthBenchmark> {
    let g = globals(cfg)?;
    let truth = &g.truth;
    let n_s = truth.shifted_dims.len();
    let unit = 1.0 / (n_s as f64).sqrt();
    let noise = Normal::new(0.0, cfg.noise).expect("finite noise");

    let n_total = cfg.n_editors * cfg.samples_per_editor;
    let per = cfg.n_layers * cfg.dim;
    let mut real_data = Vec::with_capacity(n_total * per);
    let mut edit_data = Vec::with_capacity(n_total * per);
    let mut real_ids = Vec::with_capacity(n_total);
    let mut edit_ids = Vec::with_capacity(n_total);
    let mut records = Vec::with_capacity(2 * n_total);

    for (j, (editor, bias)) in truth.editor_biases.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ fnv1a(editor.as_bytes()));
        for i in 0..cfg.samples_per_editor {
            let src_id = format!("src-{j:02}-{i:03}");
            let edit_id = format!("{editor}-{i:03}");

            for l in 0..cfg.n_layers {
                draw_layer(&g.layer_mean[l], &g.layer_scale[l], &mut rng, &mut real_data);
            }

            let mut z = vec![0.0; n_s];
            for l in 0..cfg.n_layers {
                let start = edit_data.len();
                draw_layer(&g.layer_mean[l], &g.layer_scale[l], &mut rng, &mut edit_data);
                if l != cfg.informative_layer {
                    continue;
                }
                for (k, &d) in truth.shifted_dims.iter().enumerate() {
                    let e: f64 = rng.sample(StandardNormal);
                    z[k] = 0.5 * cfg.shift * bias * unit + truth.variance_inflation * e;
                    let v = g.layer_mean[l][d] + g.layer_scale[l][d] * (cfg.shift + z[k]);
                    edit_data[start + d] = v as f32;
                }
            }

            let mut scores = [0.0; 3];
            for (k, s) in scores.iter_mut().enumerate() {
                let lin: f64 = truth.score_coefficients[k].iter().zip(&z).map(|(c, v)| c * v).sum();
                *s = (truth.score_intercepts[k] + lin + noise.sample(&mut rng)).clamp(1.0, 5.0);
            }
            let prompt = PROMPTS[rng.random_range(0..PROMPTS.len())].to_string();

            records.push(SampleRecord {
                sample_id: src_id.clone(),
                src_id: src_id.clone(),
                edit_id: String::new(),
                prompt: prompt.clone(),
                y_auth: 0,
                s_q: None,
                s_e: None,
                s_p: None,
                editor: String::new(),
                split: None,
            });
            records.push(SampleRecord {
                sample_id: edit_id.clone(),
                src_id: src_id.clone(),
                edit_id: edit_id.clone(),
                prompt,
                y_auth: 1,
                s_q: Some(scores[0]),
                s_e: Some(scores[1]),
                s_p: Some(scores[2]),
                editor: editor.clone(),
                split: None,
            });
            real_ids.push(src_id);
            edit_ids.push(edit_id);
        }
    }

    Ok(SynthBenchmark {
        real: FeatureStack::new(cfg.n_layers, cfg.dim, real_data, real_ids)?,
        edited: FeatureStack::new(cfg.n_layers, cfg.dim, edit_data, edit_ids)?,
        manifest: DatasetManifest::new(records)?,
        truth: g.truth,
    })
}

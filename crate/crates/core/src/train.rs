//! Two-stage training: the contrastive adapter first, then both decoders on the
//! frozen encoder's output. Each stage keeps the parameters with the best
//! validation objective seen at an epoch boundary (including initialization).

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapter::{contrastive_batch_loss, contrastive_grad, triplets_for_anchors, EncoderConfig, LoraLinear, Triplet};
use crate::data::SplitData;
use crate::error::{Error, Result};
use crate::heads::{detection_grad, quality_grad, DetectionHead, QualityHead};
use crate::io::Checkpoint;
use crate::matrix::Matrix;
use crate::optim::{adamw_step, clip_grad_norm, AdamWConfig, AdamWState, CosineSchedule};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Contrastive,
    Detection,
    Quality,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub step: u64,
    pub stage: Stage,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub layer: usize,
    pub out_dim: usize,
    pub rank: usize,
    pub alpha_lora: f64,
    pub tau: f64,
    pub hidden: usize,
    pub epochs: usize,
    pub batch: usize,
    pub lr_adapter: f64,
    pub lr_heads: f64,
    pub lr_min: f64,
    pub adamw: AdamWConfig,
    pub seed: u64,
    pub in_batch_negatives: bool,
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            layer: 0,
            out_dim: 256,
            rank: 8,
            alpha_lora: 16.0,
            tau: 0.07,
            hidden: 256,
            epochs: 30,
            batch: 4,
            lr_adapter: 1e-4,
            lr_heads: 5e-5,
            lr_min: 0.0,
            adamw: AdamWConfig::default(),
            seed: 0,
            in_batch_negatives: false,
            grad_clip: None,
        }
    }
}

impl TrainConfig {
    pub fn encoder_config(&self, in_dim: usize) -> EncoderConfig {
        EncoderConfig {
            in_dim,
            out_dim: self.out_dim,
            rank: self.rank,
            alpha_lora: self.alpha_lora,
            tau: self.tau,
            init_seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub trace: Vec<TraceRecord>,
    pub best_val: BestValidation,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BestValidation {
    pub contrastive: f64,
    pub contrastive_epoch: usize,
    pub detection: f64,
    pub detection_epoch: usize,
    pub quality: f64,
    pub quality_epoch: usize,
}

/// Initial parameters for `cfg`, exactly what zero epochs of training returns.
pub fn initial_checkpoint(cfg: &TrainConfig, in_dim: usize) -> Result<Checkpoint> {
    let enc_cfg = cfg.encoder_config(in_dim);
    let encoder = LoraLinear::init(&enc_cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let detection = DetectionHead::init(cfg.out_dim, cfg.hidden, &mut rng);
    let quality = QualityHead::init(cfg.out_dim, cfg.hidden, &mut rng);
    Checkpoint {
        layer: cfg.layer,
        tau: cfg.tau,
        encoder,
        detection,
        quality,
    }
    .quantized()
}

fn check_finite(loss: f64, stage: Stage, step: u64, trace: &[TraceRecord]) -> Result<()> {
    if loss.is_finite() {
        return Ok(());
    }
    Err(Error::Numerical(format!(
        "{stage:?} loss diverged at step {step} after {} trace records",
        trace.len()
    )))
}

fn steps_per_epoch(n: usize, batch: usize) -> usize {
    n.div_ceil(batch)
}

fn apply_update(
    params: &mut [f64],
    mut grad: Vec<f64>,
    state: &mut AdamWState,
    lr: f64,
    clip: Option<f64>,
) -> Result<()> {
    if let Some(max) = clip {
        clip_grad_norm(&mut grad, max);
    }
    adamw_step(params, &grad, state, lr)
}

/// Runs both stages on `train`, selecting on `val`.
pub fn train(cfg: &TrainConfig, train: &SplitData, val: &SplitData) -> Result<TrainOutcome> {
    if cfg.batch == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    if train.layer != cfg.layer || val.layer != cfg.layer {
        return Err(Error::invalid("split data was built for a different layer"));
    }
    let in_dim = train.real.cols();
    let mut ckpt = initial_checkpoint(cfg, in_dim)?;
    let mut trace = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(2));

    // Stage 1: contrastive adapter.
    let val_triplets = validation_triplets(val, cfg.seed.wrapping_add(3))?;
    let tau = cfg.tau;
    let val_con = |enc: &LoraLinear| -> Result<f64> {
        contrastive_batch_loss(enc, &val_triplets, tau, cfg.in_batch_negatives)
    };
    let mut best_con = (val_con(&ckpt.encoder)?, 0usize, ckpt.encoder.clone());
    if cfg.epochs > 0 {
        let n_real = train.real.rows();
        let spe = steps_per_epoch(n_real, cfg.batch);
        let sched = CosineSchedule::new(cfg.lr_adapter, cfg.lr_min.min(cfg.lr_adapter), (spe * cfg.epochs) as u64)?;
        let mut state = AdamWState::new(ckpt.encoder.lora_params().len(), cfg.adamw);
        let mut enc = ckpt.encoder.clone();
        let mut step = 0u64;
        let mut order: Vec<usize> = (0..n_real).collect();
        for epoch in 1..=cfg.epochs {
            order.shuffle(&mut rng);
            for anchors in order.chunks(cfg.batch) {
                let batch = triplets_for_anchors(&train.real, &train.edited, anchors, &mut rng)?;
                let g = contrastive_grad(&enc, &batch, tau, cfg.in_batch_negatives)?;
                check_finite(g.loss, Stage::Contrastive, step, &trace)?;
                let lr = sched.lr(step);
                apply_update(enc.lora_params_mut(), g.grad, &mut state, lr, cfg.grad_clip)?;
                trace.push(TraceRecord {
                    step,
                    stage: Stage::Contrastive,
                    lr,
                    loss: g.loss,
                });
                step += 1;
            }
            let v = val_con(&enc)?;
            check_finite(v, Stage::Contrastive, step, &trace)?;
            if v < best_con.0 {
                best_con = (v, epoch, enc.clone());
            }
        }
    }
    ckpt.encoder = best_con.2;
    ckpt = ckpt.quantized()?;

    // Stage 2: decoders on frozen encodings.
    let enc_train = EncodedSplit::new(&ckpt.encoder, train)?;
    let enc_val = EncodedSplit::new(&ckpt.encoder, val)?;

    let det_val = |h: &DetectionHead| -> Result<f64> {
        Ok(detection_grad(h, &enc_val.det_x, &enc_val.det_y)?.0)
    };
    let mut best_det = (det_val(&ckpt.detection)?, 0usize, ckpt.detection.clone());
    let qual_val = |h: &QualityHead| -> Result<f64> {
        if enc_val.qual_y.is_empty() {
            return Ok(0.0);
        }
        Ok(quality_grad(h, &enc_val.qual_x, &enc_val.qual_y)?.0)
    };
    let mut best_qual = (qual_val(&ckpt.quality)?, 0usize, ckpt.quality.clone());

    if cfg.epochs > 0 {
        let mut det = ckpt.detection.clone();
        let mut qual = ckpt.quality.clone();
        let det_spe = steps_per_epoch(enc_train.det_y.len(), cfg.batch);
        let qual_spe = steps_per_epoch(enc_train.qual_y.len(), cfg.batch);
        let det_sched = CosineSchedule::new(cfg.lr_heads, cfg.lr_min.min(cfg.lr_heads), (det_spe * cfg.epochs).max(1) as u64)?;
        let qual_sched = CosineSchedule::new(cfg.lr_heads, cfg.lr_min.min(cfg.lr_heads), (qual_spe * cfg.epochs).max(1) as u64)?;
        let mut det_state = AdamWState::new(det.params().len(), cfg.adamw);
        let mut qual_state = AdamWState::new(qual.params().len(), cfg.adamw);
        let (mut det_step, mut qual_step) = (0u64, 0u64);
        let mut det_order: Vec<usize> = (0..enc_train.det_y.len()).collect();
        let mut qual_order: Vec<usize> = (0..enc_train.qual_y.len()).collect();
        for epoch in 1..=cfg.epochs {
            det_order.shuffle(&mut rng);
            for idx in det_order.chunks(cfg.batch) {
                let x = enc_train.det_x.select_rows(idx);
                let y: Vec<u8> = idx.iter().map(|&i| enc_train.det_y[i]).collect();
                let (loss, grad) = detection_grad(&det, &x, &y)?;
                check_finite(loss, Stage::Detection, det_step, &trace)?;
                let lr = det_sched.lr(det_step);
                apply_update(det.params_mut(), grad, &mut det_state, lr, cfg.grad_clip)?;
                trace.push(TraceRecord {
                    step: det_step,
                    stage: Stage::Detection,
                    lr,
                    loss,
                });
                det_step += 1;
            }
            qual_order.shuffle(&mut rng);
            for idx in qual_order.chunks(cfg.batch) {
                let x = enc_train.qual_x.select_rows(idx);
                let y: Vec<[f64; 3]> = idx.iter().map(|&i| enc_train.qual_y[i]).collect();
                let (loss, grad) = quality_grad(&qual, &x, &y)?;
                check_finite(loss, Stage::Quality, qual_step, &trace)?;
                let lr = qual_sched.lr(qual_step);
                apply_update(qual.params_mut(), grad, &mut qual_state, lr, cfg.grad_clip)?;
                trace.push(TraceRecord {
                    step: qual_step,
                    stage: Stage::Quality,
                    lr,
                    loss,
                });
                qual_step += 1;
            }
            let dv = det_val(&det)?;
            check_finite(dv, Stage::Detection, det_step, &trace)?;
            if dv < best_det.0 {
                best_det = (dv, epoch, det.clone());
            }
            let qv = qual_val(&qual)?;
            check_finite(qv, Stage::Quality, qual_step, &trace)?;
            if qv < best_qual.0 {
                best_qual = (qv, epoch, qual.clone());
            }
        }
    }
    ckpt.detection = best_det.2;
    ckpt.quality = best_qual.2;

    Ok(TrainOutcome {
        checkpoint: ckpt.quantized()?,
        trace,
        best_val: BestValidation {
            contrastive: best_con.0,
            contrastive_epoch: best_con.1,
            detection: best_det.0,
            detection_epoch: best_det.1,
            quality: best_qual.0,
            quality_epoch: best_qual.1,
        },
    })
}

/// One triplet per validation real sample, fixed by `seed`.
pub fn validation_triplets(val: &SplitData, seed: u64) -> Result<Vec<Triplet>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let anchors: Vec<usize> = (0..val.real.rows()).collect();
    triplets_for_anchors(&val.real, &val.edited, &anchors, &mut rng)
}

struct EncodedSplit {
    det_x: Matrix,
    det_y: Vec<u8>,
    qual_x: Matrix,
    qual_y: Vec<[f64; 3]>,
}

impl EncodedSplit {
    fn new(encoder: &LoraLinear, data: &SplitData) -> Result<Self> {
        let (x, det_y) = data.detection_set();
        let (qx, qual_y) = data.quality_set();
        if det_y.is_empty() {
            return Err(Error::invalid("split has no samples for the detection head"));
        }
        Ok(Self {
            det_x: encoder.encode(&x)?,
            det_y,
            qual_x: encoder.encode(&qx)?,
            qual_y,
        })
    }
}

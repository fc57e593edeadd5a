//! Held-out evaluation: per-editor detection, per-dimension quality
//! correlations, and the editor ranking comparison.

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::SplitData;
use crate::error::{Error, Result};
use crate::heads::{detect, predict_quality, QualityVector};
use crate::io::Checkpoint;
use crate::metrics::{accuracy, f1, krcc, model_rank_report, plcc, srcc, DetectionOutcome, ModelRankReport, ScoredSample};

pub const OVERALL: &str = "Overall";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRow {
    pub editor: String,
    pub n: usize,
    pub accuracy: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityRow {
    pub dimension: String,
    pub n: usize,
    pub srcc: Option<f64>,
    pub krcc: Option<f64>,
    pub plcc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub layer: usize,
    pub positive_class: u8,
    /// One row per editor, then the overall row.
    pub detection: Vec<DetectionRow>,
    pub quality: Vec<QualityRow>,
    pub ranking: Option<ModelRankReport>,
}

impl EvalReport {
    pub fn overall(&self) -> &DetectionRow {
        self.detection.last().expect("report always has an overall row")
    }

    /// One JSON object per line, each tagged with its `kind`.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        let mut push = |v: serde_json::Value| -> Result<()> {
            out.push_str(&serde_json::to_string(&v).map_err(|e| Error::invalid(e.to_string()))?);
            out.push('\n');
            Ok(())
        };
        push(serde_json::json!({
            "kind": "summary",
            "layer": self.layer,
            "positive_class": self.positive_class,
        }))?;
        for r in &self.detection {
            push(serde_json::json!({"kind": "detection", "editor": r.editor, "n": r.n, "accuracy": r.accuracy, "f1": r.f1}))?;
        }
        for r in &self.quality {
            push(serde_json::json!({"kind": "quality", "dimension": r.dimension, "n": r.n, "srcc": r.srcc, "krcc": r.krcc, "plcc": r.plcc}))?;
        }
        if let Some(rank) = &self.ranking {
            for r in &rank.rows {
                let mut v = serde_json::to_value(r).map_err(|e| Error::invalid(e.to_string()))?;
                v["kind"] = "rank".into();
                push(v)?;
            }
            push(serde_json::json!({
                "kind": "rank_summary",
                "srcc_to_human": rank.srcc_to_human,
                "srcc_overall": rank.srcc_overall,
                "rmse_to_human": rank.rmse_to_human,
                "rmse_overall": rank.rmse_overall,
            }))?;
        }
        Ok(out)
    }

    /// Aligned plain-text tables.
    pub fn to_table(&self) -> String {
        let fmt_opt = |v: Option<f64>| v.map_or_else(|| "n/a".to_owned(), |x| format!("{x:.4}"));
        let mut s = String::new();
        let w = self.detection.iter().map(|r| r.editor.len()).max().unwrap_or(0).max(7);
        let _ = writeln!(s, "Detection (layer {})", self.layer);
        let _ = writeln!(s, "{:<w$}  {:>6}  {:>7}  {:>7}", "Editor", "N", "Acc", "F1");
        for r in &self.detection {
            let _ = writeln!(
                s,
                "{:<w$}  {:>6}  {:>7.2}  {:>7.2}",
                r.editor,
                r.n,
                100.0 * r.accuracy,
                100.0 * r.f1
            );
        }
        let _ = writeln!(s);
        let _ = writeln!(s, "Quality");
        let _ = writeln!(s, "{:<12}  {:>6}  {:>7}  {:>7}  {:>7}", "Dimension", "N", "SRCC", "KRCC", "PLCC");
        for r in &self.quality {
            let _ = writeln!(
                s,
                "{:<12}  {:>6}  {:>7}  {:>7}  {:>7}",
                r.dimension,
                r.n,
                fmt_opt(r.srcc),
                fmt_opt(r.krcc),
                fmt_opt(r.plcc)
            );
        }
        if let Some(rank) = &self.ranking {
            let w = rank.rows.iter().map(|r| r.editor.len()).max().unwrap_or(0).max(6);
            let _ = writeln!(s);
            let _ = writeln!(s, "Editor ranking (0-100 scale means; rank 1 is best)");
            let _ = writeln!(
                s,
                "{:<w$}  {:>7} {:>7}  {:>7} {:>7}  {:>7} {:>7}  {:>5} {:>5}",
                "Editor", "Q hum", "Q ours", "A hum", "A ours", "P hum", "P ours", "R hum", "R ours"
            );
            let pct = crate::metrics::to_percent_scale;
            for r in &rank.rows {
                let _ = writeln!(
                    s,
                    "{:<w$}  {:>7.2} {:>7.2}  {:>7.2} {:>7.2}  {:>7.2} {:>7.2}  {:>5} {:>5}",
                    r.editor,
                    pct(r.human_mean[0]),
                    pct(r.pred_mean[0]),
                    pct(r.human_mean[1]),
                    pct(r.pred_mean[1]),
                    pct(r.human_mean[2]),
                    pct(r.pred_mean[2]),
                    r.human_overall_rank,
                    r.pred_overall_rank
                );
            }
            let _ = writeln!(
                s,
                "{:<w$}  {:>15}  {:>15}  {:>15}  {:>11}",
                "SRCC",
                fmt_opt(rank.srcc_to_human[0]),
                fmt_opt(rank.srcc_to_human[1]),
                fmt_opt(rank.srcc_to_human[2]),
                fmt_opt(rank.srcc_overall)
            );
            let _ = writeln!(
                s,
                "{:<w$}  {:>15.4}  {:>15.4}  {:>15.4}  {:>11.4}",
                "RMSE", rank.rmse_to_human[0], rank.rmse_to_human[1], rank.rmse_to_human[2], rank.rmse_overall
            );
        }
        s
    }
}

/// SRCC, KRCC and PLCC per dimension; undefined correlations are `None`.
pub fn quality_correlations(pred: &[[f64; 3]], human: &[[f64; 3]]) -> Result<Vec<QualityRow>> {
    if pred.len() != human.len() {
        return Err(Error::DimensionMismatch {
            expected: human.len(),
            got: pred.len(),
        });
    }
    Ok(QualityVector::DIMENSIONS
        .iter()
        .enumerate()
        .map(|(k, name)| {
            let p: Vec<f64> = pred.iter().map(|v| v[k]).collect();
            let h: Vec<f64> = human.iter().map(|v| v[k]).collect();
            QualityRow {
                dimension: (*name).to_owned(),
                n: p.len(),
                srcc: srcc(&p, &h).ok(),
                krcc: krcc(&p, &h).ok(),
                plcc: plcc(&p, &h).ok(),
            }
        })
        .collect())
}

/// Evaluates `ckpt` on `test`. Each editor's detection pool is its edits plus
/// the real samples they were made from; the overall pool is the whole split.
pub fn evaluate(ckpt: &Checkpoint, test: &SplitData, editors: &[String], positive_class: u8) -> Result<EvalReport> {
    if positive_class > 1 {
        return Err(Error::invalid(format!("positive class must be 0 or 1, got {positive_class}")));
    }
    let enc_real = ckpt.encoder.encode(&test.real)?;
    let enc_edit = ckpt.encoder.encode(&test.edited)?;
    let real_prob: Vec<f64> = enc_real.iter_rows().map(|h| detect(&ckpt.detection, h)).collect::<Result<_>>()?;
    let edit_prob: Vec<f64> = enc_edit.iter_rows().map(|h| detect(&ckpt.detection, h)).collect::<Result<_>>()?;
    let real_index: HashMap<&str, usize> = test.real_ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();

    let row = |editor: &str, outcomes: &[DetectionOutcome]| -> Result<DetectionRow> {
        Ok(DetectionRow {
            editor: editor.to_owned(),
            n: outcomes.len(),
            accuracy: accuracy(outcomes)?,
            f1: f1(outcomes, positive_class)?.f1,
        })
    };
    let mut detection = Vec::with_capacity(editors.len() + 1);
    for e in editors {
        let mut pool = Vec::new();
        for (i, _) in test.edited_editor.iter().enumerate().filter(|(_, ed)| *ed == e) {
            pool.push(DetectionOutcome::new(edit_prob[i], 1, e.as_str()));
            if let Some(&r) = real_index.get(test.edited_src[i].as_str()) {
                pool.push(DetectionOutcome::new(real_prob[r], 0, e.as_str()));
            }
        }
        if pool.is_empty() {
            return Err(Error::invalid(format!("editor {e:?} is absent from the evaluated split")));
        }
        detection.push(row(e, &pool)?);
    }
    let all: Vec<DetectionOutcome> = real_prob
        .iter()
        .map(|&p| DetectionOutcome::new(p, 0, ""))
        .chain(
            edit_prob
                .iter()
                .zip(&test.edited_editor)
                .map(|(&p, e)| DetectionOutcome::new(p, 1, e.as_str())),
        )
        .collect();
    detection.push(row(OVERALL, &all)?);

    let mut pred = Vec::new();
    let mut human = Vec::new();
    let mut scored = Vec::new();
    for i in 0..enc_edit.rows() {
        if let Some(h) = test.edited_scores[i] {
            let p = predict_quality(&ckpt.quality, enc_edit.row(i))?.clamped().to_array();
            pred.push(p);
            human.push(h);
            scored.push(ScoredSample {
                editor: test.edited_editor[i].clone(),
                pred: p,
                human: h,
            });
        }
    }
    let quality = quality_correlations(&pred, &human)?;
    let ranking = if scored.is_empty() {
        None
    } else {
        let ranked: Vec<String> = editors
            .iter()
            .filter(|e| scored.iter().any(|s| &s.editor == *e))
            .cloned()
            .collect();
        Some(model_rank_report(&ranked, &scored)?)
    };
    Ok(EvalReport {
        layer: test.layer,
        positive_class,
        detection,
        quality,
        ranking,
    })
}

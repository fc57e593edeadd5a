//! Detection metrics, rank/linear correlations and the editor-level ranking protocol.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DECISION_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionOutcome {
    pub prob: f64,
    pub predicted: u8,
    pub truth: u8,
    pub editor: String,
}

impl DetectionOutcome {
    /// Predicts "edited" when `prob >= 0.5`.
    pub fn new(prob: f64, truth: u8, editor: impl Into<String>) -> Self {
        Self {
            prob,
            predicted: u8::from(prob >= DECISION_THRESHOLD),
            truth,
            editor: editor.into(),
        }
    }
}

pub fn accuracy(outcomes: &[DetectionOutcome]) -> Result<f64> {
    if outcomes.is_empty() {
        return Err(Error::invalid("accuracy of no outcomes"));
    }
    let correct = outcomes.iter().filter(|o| o.predicted == o.truth).count();
    Ok(correct as f64 / outcomes.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct F1Score {
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    /// Precision + recall was 0, so F1 was set to 0 by convention.
    pub degenerate: bool,
}

pub fn f1(outcomes: &[DetectionOutcome], positive_class: u8) -> Result<F1Score> {
    if outcomes.is_empty() {
        return Err(Error::invalid("F1 of no outcomes"));
    }
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for o in outcomes {
        match (o.predicted == positive_class, o.truth == positive_class) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    if precision + recall == 0.0 {
        return Ok(F1Score {
            f1: 0.0,
            precision,
            recall,
            degenerate: true,
        });
    }
    Ok(F1Score {
        f1: 2.0 * precision * recall / (precision + recall),
        precision,
        recall,
        degenerate: false,
    })
}

fn check_paired(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch {
            expected: x.len(),
            got: y.len(),
        });
    }
    if x.len() < 2 {
        return Err(Error::invalid("correlation needs at least 2 points"));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite value in correlation input".into()));
    }
    Ok(())
}

/// 1-based ascending ranks; tied values share the average of their positions.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i + 1;
        while j < idx.len() && values[idx[j]] == values[idx[i]] {
            j += 1;
        }
        let avg = (i + j + 1) as f64 / 2.0;
        for &k in &idx[i..j] {
            ranks[k] = avg;
        }
        i = j;
    }
    ranks
}

/// Product-moment correlation on raw values.
pub fn plcc(x: &[f64], y: &[f64]) -> Result<f64> {
    check_paired(x, y)?;
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::invalid("zero variance"));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman correlation: Pearson correlation of average ranks.
pub fn srcc(x: &[f64], y: &[f64]) -> Result<f64> {
    check_paired(x, y)?;
    plcc(&average_ranks(x), &average_ranks(y)).map_err(|_| Error::invalid("zero rank variance"))
}

/// Kendall tau-b in O(n log n) (Knight's algorithm).
pub fn krcc(x: &[f64], y: &[f64]) -> Result<f64> {
    check_paired(x, y)?;
    let n = x.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]).then(y[a].total_cmp(&y[b])));

    let pairs = |t: u64| t * t.saturating_sub(1) / 2;
    let n0 = pairs(n as u64);
    let (mut tied_x, mut tied_xy) = (0u64, 0u64);
    let (mut run_x, mut run_xy) = (1u64, 1u64);
    for w in idx.windows(2) {
        let (a, b) = (w[0], w[1]);
        if x[a] == x[b] {
            run_x += 1;
            if y[a] == y[b] {
                run_xy += 1;
            } else {
                tied_xy += pairs(run_xy);
                run_xy = 1;
            }
        } else {
            tied_x += pairs(run_x);
            tied_xy += pairs(run_xy);
            run_x = 1;
            run_xy = 1;
        }
    }
    tied_x += pairs(run_x);
    tied_xy += pairs(run_xy);

    // Sorting by y now; each exchange is one discordant pair.
    let mut ys: Vec<f64> = idx.iter().map(|&i| y[i]).collect();
    let swaps = merge_count(&mut ys);

    let mut tied_y = 0u64;
    let mut run_y = 1u64;
    for w in ys.windows(2) {
        if w[0] == w[1] {
            run_y += 1;
        } else {
            tied_y += pairs(run_y);
            run_y = 1;
        }
    }
    tied_y += pairs(run_y);

    let denom_x = n0 - tied_x;
    let denom_y = n0 - tied_y;
    if denom_x == 0 || denom_y == 0 {
        return Err(Error::invalid("all-tied vector"));
    }
    let numer = n0 as f64 - tied_x as f64 - tied_y as f64 + tied_xy as f64 - 2.0 * swaps as f64;
    Ok((numer / ((denom_x as f64) * (denom_y as f64)).sqrt()).clamp(-1.0, 1.0))
}

/// Stable merge sort; returns the number of strict inversions.
fn merge_count(v: &mut [f64]) -> u64 {
    let n = v.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let mut swaps = merge_count(&mut v[..mid]) + merge_count(&mut v[mid..]);
    let mut merged = Vec::with_capacity(n);
    let (mut i, mut j) = (0, mid);
    while i < mid && j < n {
        if v[j] < v[i] {
            merged.push(v[j]);
            swaps += (mid - i) as u64;
            j += 1;
        } else {
            merged.push(v[i]);
            i += 1;
        }
    }
    merged.extend_from_slice(&v[i..mid]);
    merged.extend_from_slice(&v[j..n]);
    v.copy_from_slice(&merged);
    swaps
}

pub fn rmse(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch {
            expected: x.len(),
            got: y.len(),
        });
    }
    if x.is_empty() {
        return Err(Error::invalid("rmse of empty input"));
    }
    let ss: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok((ss / x.len() as f64).sqrt())
}

/// Maps a 1-5 annotation onto 0-100.
pub fn to_percent_scale(s: f64) -> f64 {
    (s - 1.0) / 4.0 * 100.0
}

/// Ranks where 1 is the highest value; ties averaged.
pub fn descending_ranks(values: &[f64]) -> Vec<f64> {
    average_ranks(&values.iter().map(|v| -v).collect::<Vec<_>>())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditorRankRow {
    pub editor: String,
    pub n: usize,
    pub pred_mean: [f64; 3],
    pub human_mean: [f64; 3],
    pub pred_rank: [f64; 3],
    pub human_rank: [f64; 3],
    pub pred_overall_rank: f64,
    pub human_overall_rank: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRankReport {
    pub rows: Vec<EditorRankRow>,
    /// Spearman between per-editor predicted and human means, per dimension.
    pub srcc_to_human: [Option<f64>; 3],
    /// Spearman between the overall rank vectors.
    pub srcc_overall: Option<f64>,
    /// RMSE between per-editor means on the 0-100 scale, per dimension.
    pub rmse_to_human: [f64; 3],
    /// RMSE between the overall rank vectors.
    pub rmse_overall: f64,
}

/// Per-sample predicted and human scores of one edited sample.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredSample {
    pub editor: String,
    pub pred: [f64; 3],
    pub human: [f64; 3],
}

/// Ranks editors by mean predicted and mean human scores and compares the rankings.
///
/// The overall ranking orders editors by the average of their three dimension means.
pub fn model_rank_report(editors: &[String], samples: &[ScoredSample]) -> Result<ModelRankReport> {
    if editors.is_empty() {
        return Err(Error::invalid("no editors to rank"));
    }
    let mut rows = Vec::with_capacity(editors.len());
    for e in editors {
        let mine: Vec<&ScoredSample> = samples.iter().filter(|s| &s.editor == e).collect();
        if mine.is_empty() {
            return Err(Error::invalid(format!("editor {e:?} missing from the evaluated split")));
        }
        let n = mine.len() as f64;
        let mut pred_mean = [0.0; 3];
        let mut human_mean = [0.0; 3];
        for s in &mine {
            for k in 0..3 {
                pred_mean[k] += s.pred[k] / n;
                human_mean[k] += s.human[k] / n;
            }
        }
        rows.push(EditorRankRow {
            editor: e.clone(),
            n: mine.len(),
            pred_mean,
            human_mean,
            pred_rank: [0.0; 3],
            human_rank: [0.0; 3],
            pred_overall_rank: 0.0,
            human_overall_rank: 0.0,
        });
    }
    let col = |f: &dyn Fn(&EditorRankRow) -> f64| rows.iter().map(f).collect::<Vec<f64>>();
    let mut srcc_to_human = [None; 3];
    let mut rmse_to_human = [0.0; 3];
    let mut pred_ranks = Vec::new();
    let mut human_ranks = Vec::new();
    for k in 0..3 {
        let p = col(&|r| r.pred_mean[k]);
        let h = col(&|r| r.human_mean[k]);
        srcc_to_human[k] = srcc(&p, &h).ok();
        let pp: Vec<f64> = p.iter().map(|&v| to_percent_scale(v)).collect();
        let hp: Vec<f64> = h.iter().map(|&v| to_percent_scale(v)).collect();
        rmse_to_human[k] = rmse(&pp, &hp)?;
        pred_ranks.push(descending_ranks(&p));
        human_ranks.push(descending_ranks(&h));
    }
    let p_overall = descending_ranks(&col(&|r| r.pred_mean.iter().sum::<f64>() / 3.0));
    let h_overall = descending_ranks(&col(&|r| r.human_mean.iter().sum::<f64>() / 3.0));
    for (i, row) in rows.iter_mut().enumerate() {
        for k in 0..3 {
            row.pred_rank[k] = pred_ranks[k][i];
            row.human_rank[k] = human_ranks[k][i];
        }
        row.pred_overall_rank = p_overall[i];
        row.human_overall_rank = h_overall[i];
    }
    Ok(ModelRankReport {
        rows,
        srcc_to_human,
        srcc_overall: srcc(&p_overall, &h_overall).ok(),
        rmse_to_human,
        rmse_overall: rmse(&p_overall, &h_overall)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn outcomes(pairs: &[(u8, u8)]) -> Vec<DetectionOutcome> {
        pairs
            .iter()
            .map(|&(pred, truth)| DetectionOutcome::new(if pred == 1 { 0.9 } else { 0.1 }, truth, "x"))
            .collect()
    }

    #[test]
    fn accuracy_granularity() {
        let mut pairs = vec![(1, 1); 36];
        pairs.extend([(0, 1), (1, 0)]);
        let acc = accuracy(&outcomes(&pairs)).unwrap();
        assert!((acc * 100.0 - 94.74).abs() < 0.005);
        let mut rev = pairs.clone();
        rev.reverse();
        assert_eq!(acc, accuracy(&outcomes(&rev)).unwrap());
    }

    #[test]
    fn f1_cases() {
        let perfect = outcomes(&[(1, 1), (0, 0), (1, 1)]);
        assert_eq!(f1(&perfect, 1).unwrap().f1, 1.0);
        // TP=2 FP=1 FN=1
        let mixed = outcomes(&[(1, 1), (1, 1), (1, 0), (0, 1), (0, 0)]);
        let s = f1(&mixed, 1).unwrap();
        assert!((s.f1 - 2.0 / 3.0).abs() < 1e-15);
        let none = outcomes(&[(0, 0), (0, 0)]);
        let s = f1(&none, 1).unwrap();
        assert_eq!(s.f1, 0.0);
        assert!(s.degenerate);
    }

    #[test]
    fn threshold_is_inclusive() {
        assert_eq!(DetectionOutcome::new(0.5, 1, "").predicted, 1);
        assert_eq!(DetectionOutcome::new(0.4999, 1, "").predicted, 0);
    }

    #[test]
    fn ranks_average_ties() {
        assert_eq!(average_ranks(&[10.0, 20.0, 10.0, 5.0]), vec![2.5, 4.0, 2.5, 1.0]);
        assert_eq!(descending_ranks(&[3.0, 1.0, 2.0]), vec![1.0, 3.0, 2.0]);
    }

    #[test]
    fn correlation_identities() {
        let x = [1.0, 4.0, 2.0, 8.0, 5.0];
        let rev: Vec<f64> = x.iter().map(|v| -v).collect();
        assert!((srcc(&x, &x).unwrap() - 1.0).abs() < 1e-15);
        assert!((srcc(&x, &rev).unwrap() + 1.0).abs() < 1e-15);
        let affine: Vec<f64> = x.iter().map(|v| 2.0 * v + 3.0).collect();
        assert!((plcc(&x, &affine).unwrap() - 1.0).abs() < 1e-15);
        assert!((plcc(&x, &rev).unwrap() + 1.0).abs() < 1e-15);
        assert!((krcc(&x, &x).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn krcc_hand_case() {
        let k = krcc(&[1.0, 2.0, 3.0], &[1.0, 3.0, 2.0]).unwrap();
        assert!((k - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn degenerate_inputs_error() {
        assert!(srcc(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]).is_err());
        assert!(krcc(&[2.0, 2.0], &[1.0, 2.0]).is_err());
        assert!(plcc(&[1.0, 2.0], &[3.0, 3.0]).is_err());
        assert!(plcc(&[1.0], &[1.0]).is_err());
        assert!(rmse(&[], &[]).is_err());
    }

    #[test]
    fn rmse_cases() {
        assert_eq!(rmse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert!((rmse(&[0.0, 0.0], &[3.0, 4.0]).unwrap() - 12.5f64.sqrt()).abs() < 1e-15);
        let a = rmse(&[1.0, -2.0, 0.5], &[0.0, 1.0, 2.0]).unwrap();
        let b = rmse(&[-3.0, 6.0, -1.5], &[0.0, -3.0, -6.0]).unwrap();
        assert!((b - 3.0 * a).abs() < 1e-12);
    }

    #[test]
    fn rank_report_on_identical_scores() {
        let editors: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        let samples: Vec<ScoredSample> = [("a", 4.0), ("a", 3.5), ("b", 2.0), ("c", 3.0)]
            .iter()
            .map(|&(e, s)| ScoredSample {
                editor: e.into(),
                pred: [s, s - 0.5, s + 0.5],
                human: [s, s - 0.5, s + 0.5],
            })
            .collect();
        let r = model_rank_report(&editors, &samples).unwrap();
        assert_eq!(r.srcc_to_human, [Some(1.0); 3]);
        assert_eq!(r.rmse_to_human, [0.0; 3]);
        assert_eq!(r.rows[0].pred_overall_rank, 1.0);
        assert_eq!(r.rows[1].pred_overall_rank, 3.0);
        let missing = vec!["a".to_string(), "zzz".to_string()];
        assert!(model_rank_report(&missing, &samples).is_err());
    }
}

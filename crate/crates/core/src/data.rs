//! Joins the manifest with the real and edited feature stacks.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::io::{DatasetManifest, FeatureStack, Split};
use crate::matrix::Matrix;

/// Row indices of one split's real and edited samples within their stacks.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitRows {
    pub real: Vec<usize>,
    pub edited: Vec<usize>,
}

/// Locates every record of `split` (all records when `None`) in its stack.
pub fn split_rows(
    manifest: &DatasetManifest,
    real: &FeatureStack,
    edited: &FeatureStack,
    split: Option<Split>,
) -> Result<SplitRows> {
    let real_index: HashMap<&str, usize> =
        real.sample_ids().iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let edit_index: HashMap<&str, usize> =
        edited.sample_ids().iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let mut rows = SplitRows {
        real: Vec::new(),
        edited: Vec::new(),
    };
    for r in &manifest.records {
        if split.is_some() && r.split != split {
            continue;
        }
        let (index, out, kind) = if r.is_edited() {
            (&edit_index, &mut rows.edited, "edited")
        } else {
            (&real_index, &mut rows.real, "real")
        };
        let i = index.get(r.sample_id.as_str()).ok_or_else(|| {
            Error::invalid(format!("{kind} sample {:?} is not in the {kind} stack", r.sample_id))
        })?;
        out.push(*i);
    }
    Ok(rows)
}

/// Per-split stacks restricted to the manifest's records of that split.
pub fn split_stacks(
    manifest: &DatasetManifest,
    real: &FeatureStack,
    edited: &FeatureStack,
    split: Option<Split>,
) -> Result<(FeatureStack, FeatureStack)> {
    let rows = split_rows(manifest, real, edited, split)?;
    Ok((real.select(&rows.real), edited.select(&rows.edited)))
}

/// One split's features at one layer, with labels and annotations.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitData {
    pub layer: usize,
    pub real: Matrix,
    pub real_ids: Vec<String>,
    pub edited: Matrix,
    pub edited_ids: Vec<String>,
    pub edited_src: Vec<String>,
    pub edited_editor: Vec<String>,
    pub edited_scores: Vec<Option<[f64; 3]>>,
}

impl SplitData {
    pub fn build(
        manifest: &DatasetManifest,
        real: &FeatureStack,
        edited: &FeatureStack,
        layer: usize,
        split: Option<Split>,
    ) -> Result<Self> {
        if layer >= real.n_layers() || layer >= edited.n_layers() {
            return Err(Error::invalid(format!(
                "layer {layer} out of range for stacks with {} layers",
                real.n_layers().min(edited.n_layers())
            )));
        }
        if real.dim() != edited.dim() {
            return Err(Error::DimensionMismatch {
                expected: real.dim(),
                got: edited.dim(),
            });
        }
        let rows = split_rows(manifest, real, edited, split)?;
        let by_id: HashMap<&str, &crate::io::SampleRecord> =
            manifest.records.iter().map(|r| (r.sample_id.as_str(), r)).collect();
        let edited_ids: Vec<String> = rows.edited.iter().map(|&i| edited.sample_ids()[i].clone()).collect();
        let recs: Vec<_> = edited_ids.iter().map(|id| by_id[id.as_str()]).collect();
        Ok(Self {
            layer,
            real: real.layer_matrix_rows(layer, &rows.real),
            real_ids: rows.real.iter().map(|&i| real.sample_ids()[i].clone()).collect(),
            edited: edited.layer_matrix_rows(layer, &rows.edited),
            edited_src: recs.iter().map(|r| r.src_id.clone()).collect(),
            edited_editor: recs.iter().map(|r| r.editor.clone()).collect(),
            edited_scores: recs.iter().map(|r| r.scores()).collect(),
            edited_ids,
        })
    }

    /// Real rows followed by edited rows, with labels 0 and 1.
    pub fn detection_set(&self) -> (Matrix, Vec<u8>) {
        let mut rows: Vec<Vec<f64>> = self.real.iter_rows().map(<[f64]>::to_vec).collect();
        rows.extend(self.edited.iter_rows().map(<[f64]>::to_vec));
        let labels = std::iter::repeat_n(0u8, self.real.rows())
            .chain(std::iter::repeat_n(1u8, self.edited.rows()))
            .collect();
        (Matrix::from_rows(&rows), labels)
    }

    /// Edited rows that carry quality scores, with those scores.
    pub fn quality_set(&self) -> (Matrix, Vec<[f64; 3]>) {
        let idx: Vec<usize> = (0..self.edited.rows()).filter(|&i| self.edited_scores[i].is_some()).collect();
        let targets = idx.iter().map(|&i| self.edited_scores[i].expect("filtered")).collect();
        (self.edited.select_rows(&idx), targets)
    }
}

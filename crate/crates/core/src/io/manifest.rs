//! Line-delimited dataset manifest and deterministic stratified splitting.
//!
//! Each line is one JSON object. Record fields: `sample_id`, `src_id`,
//! `edit_id`, `prompt`, `y_auth`, `s_q`, `s_e`, `s_p`, `editor`, `split`.
//! An optional first line `{"schema_version": N}` carries the schema version.
//! Unknown fields are ignored.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;
pub const SCORE_MIN: f64 = 1.0;
pub const SCORE_MAX: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::invalid(format!("unknown split {other:?}"))),
        }
    }
}

/// One benchmark sample: a real source image or an edit of one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub sample_id: String,
    pub src_id: String,
    /// Empty for pristine samples.
    pub edit_id: String,
    pub prompt: String,
    /// 1 = edited, 0 = real.
    pub y_auth: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub s_q: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub s_e: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub s_p: Option<f64>,
    /// Editing model name; empty for real samples.
    pub editor: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
}

impl SampleRecord {
    pub fn is_edited(&self) -> bool {
        self.y_auth == 1
    }

    /// `[s_q, s_e, s_p]` when all three are present.
    pub fn scores(&self) -> Option<[f64; 3]> {
        Some([self.s_q?, self.s_e?, self.s_p?])
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.sample_id.is_empty() {
            return Err("empty sample_id".into());
        }
        if self.y_auth > 1 {
            return Err(format!("label out of range: y_auth = {}", self.y_auth));
        }
        let scores = [("s_q", self.s_q), ("s_e", self.s_e), ("s_p", self.s_p)];
        for (name, s) in scores {
            if let Some(v) = s {
                if !(SCORE_MIN..=SCORE_MAX).contains(&v) {
                    return Err(format!("score out of [1,5]: {name} = {v}"));
                }
            }
        }
        let present = scores.iter().filter(|(_, s)| s.is_some()).count();
        if present != 0 && present != 3 {
            return Err("quality scores must be all present or all absent".into());
        }
        if self.y_auth == 0 {
            if !self.editor.is_empty() {
                return Err("real sample (y_auth = 0) must have an empty editor".into());
            }
            if present != 0 {
                return Err("real sample (y_auth = 0) must not carry quality scores".into());
            }
        }
        Ok(())
    }
}

/// Wire form used for parsing, so that label range errors are reported as such.
#[derive(Deserialize)]
struct RawRecord {
    sample_id: String,
    src_id: String,
    edit_id: String,
    prompt: String,
    y_auth: i64,
    #[serde(default)]
    s_q: Option<f64>,
    #[serde(default)]
    s_e: Option<f64>,
    #[serde(default)]
    s_p: Option<f64>,
    editor: String,
    #[serde(default)]
    split: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub records: Vec<SampleRecord>,
    /// Distinct editor names in first-appearance order.
    pub editors: Vec<String>,
    pub schema_version: u32,
}

impl DatasetManifest {
    pub fn new(records: Vec<SampleRecord>) -> Result<Self> {
        let mut ids = HashSet::with_capacity(records.len());
        for (i, r) in records.iter().enumerate() {
            r.validate().map_err(|message| Error::Manifest {
                line: i + 1,
                message,
            })?;
            if !ids.insert(r.sample_id.as_str()) {
                return Err(Error::Manifest {
                    line: i + 1,
                    message: format!("duplicate sample_id {:?}", r.sample_id),
                });
            }
        }
        let editors = distinct_editors(&records);
        Ok(Self {
            records,
            editors,
            schema_version: SCHEMA_VERSION,
        })
    }

    pub fn get(&self, sample_id: &str) -> Option<&SampleRecord> {
        self.records.iter().find(|r| r.sample_id == sample_id)
    }

    pub fn in_split(&self, split: Split) -> impl Iterator<Item = &SampleRecord> {
        self.records.iter().filter(move |r| r.split == Some(split))
    }

    pub fn is_split(&self) -> bool {
        self.records.iter().all(|r| r.split.is_some())
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = serde_json::json!({ "schema_version": self.schema_version }).to_string();
        out.push('\n');
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn parse_jsonl(text: &str) -> Result<Self> {
        let mut records = Vec::new();
        let mut schema_version = SCHEMA_VERSION;
        let mut record_lines = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let lineno = i + 1;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let value: serde_json::Value = serde_json::from_str(line).map_err(|e| Error::Manifest {
                line: lineno,
                message: format!("malformed line: {e}"),
            })?;
            if value.get("sample_id").is_none() {
                if let Some(v) = value.get("schema_version").and_then(|v| v.as_u64()) {
                    schema_version = v as u32;
                    continue;
                }
            }
            let raw: RawRecord = serde_json::from_value(value).map_err(|e| Error::Manifest {
                line: lineno,
                message: format!("malformed line: {e}"),
            })?;
            let y_auth = match raw.y_auth {
                0 | 1 => raw.y_auth as u8,
                other => {
                    return Err(Error::Manifest {
                        line: lineno,
                        message: format!("label out of range: y_auth = {other}"),
                    })
                }
            };
            let split = match raw.split.as_deref() {
                None | Some("") => None,
                Some(s) => Some(s.parse().map_err(|e: Error| Error::Manifest {
                    line: lineno,
                    message: e.to_string(),
                })?),
            };
            let rec = SampleRecord {
                sample_id: raw.sample_id,
                src_id: raw.src_id,
                edit_id: raw.edit_id,
                prompt: raw.prompt,
                y_auth,
                s_q: raw.s_q,
                s_e: raw.s_e,
                s_p: raw.s_p,
                editor: raw.editor,
                split,
            };
            rec.validate().map_err(|message| Error::Manifest {
                line: lineno,
                message,
            })?;
            records.push(rec);
            record_lines.push(lineno);
        }
        let mut ids = HashSet::with_capacity(records.len());
        for (r, &lineno) in records.iter().zip(&record_lines) {
            if !ids.insert(r.sample_id.as_str()) {
                return Err(Error::Manifest {
                    line: lineno,
                    message: format!("duplicate sample_id {:?}", r.sample_id),
                });
            }
        }
        let editors = distinct_editors(&records);
        Ok(Self {
            records,
            editors,
            schema_version,
        })
    }
}

fn distinct_editors(records: &[SampleRecord]) -> Vec<String> {
    let mut seen = HashSet::new();
    records
        .iter()
        .filter(|r| !r.editor.is_empty() && seen.insert(r.editor.as_str()))
        .map(|r| r.editor.clone())
        .collect()
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    DatasetManifest::parse_jsonl(&text)
}

pub fn write_manifest(manifest: &DatasetManifest, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, manifest.to_jsonl()).map_err(|e| Error::io(path, e))
}

/// Split ratios (train, val, test).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitRatios(pub [u32; 3]);

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios([4, 1, 1])
    }
}

impl SplitRatios {
    /// Group counts per split for a stratum of `n` groups. Boundaries are the
    /// rounded cumulative fractions, so the counts always sum to `n`.
    pub fn counts(&self, n: usize) -> [usize; 3] {
        let total: u64 = self.0.iter().map(|&r| u64::from(r)).sum();
        let round = |c: u64| ((2 * n as u64 * c + total) / (2 * total)) as usize;
        let b1 = round(u64::from(self.0[0]));
        let b2 = round(u64::from(self.0[0] + self.0[1]));
        [b1, b2 - b1, n - b2]
    }
}

/// Assigns every record to train/val/test.
///
/// The unit of assignment is a source group: a real record together with every
/// edit whose `src_id` names it, so a source and its edits never straddle splits.
/// Groups are stratified by the editors they contain (`real` for groups without
/// edits) and each stratum is shuffled with a seed derived from `seed` and the
/// stratum name.
pub fn split_dataset(
    manifest: &DatasetManifest,
    ratios: SplitRatios,
    seed: u64,
) -> Result<DatasetManifest> {
    if ratios.0.iter().all(|&r| r == 0) {
        return Err(Error::invalid("split ratios must not all be zero"));
    }

    // group key -> record indices, in first-appearance order
    let mut group_order: Vec<&str> = Vec::new();
    let mut groups: HashMap<&str, Vec<usize>> = HashMap::new();
    for (i, r) in manifest.records.iter().enumerate() {
        let key = if r.is_edited() {
            r.src_id.as_str()
        } else {
            r.sample_id.as_str()
        };
        groups
            .entry(key)
            .or_insert_with(|| {
                group_order.push(key);
                Vec::new()
            })
            .push(i);
    }

    let mut strata: BTreeMap<String, Vec<&str>> = BTreeMap::new();
    for &key in &group_order {
        let mut editors: Vec<&str> = groups[key]
            .iter()
            .map(|&i| &manifest.records[i])
            .filter(|r| r.is_edited())
            .map(|r| r.editor.as_str())
            .collect();
        editors.sort_unstable();
        editors.dedup();
        let name = if editors.is_empty() {
            "real".to_string()
        } else {
            editors.join("+")
        };
        strata.entry(name).or_default().push(key);
    }

    let mut assigned = manifest.records.clone();
    for (name, mut keys) in strata {
        if keys.len() < 3 {
            return Err(Error::invalid(format!(
                "stratum {name:?} has {} source groups; at least 3 are required",
                keys.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(name.as_bytes()));
        keys.shuffle(&mut rng);
        let [n_train, n_val, _] = ratios.counts(keys.len());
        for (pos, key) in keys.iter().enumerate() {
            let split = if pos < n_train {
                Split::Train
            } else if pos < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
            for &i in &groups[key] {
                assigned[i].split = Some(split);
            }
        }
    }

    Ok(DatasetManifest {
        records: assigned,
        editors: manifest.editors.clone(),
        schema_version: manifest.schema_version,
    })
}

pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

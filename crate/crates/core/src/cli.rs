//! Command-line front end. Each subcommand reads its inputs from disk and
//! writes its outputs to disk, so stages can be run and tested separately.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::data::{split_stacks, SplitData};
use crate::error::{Error, Result};
use crate::eval::evaluate;
use crate::io::{
    load_manifest, parse_checkpoint_header, parse_stack_header, read_checkpoint, read_feature_stack, split_dataset,
    write_checkpoint, write_feature_stack, write_manifest, Checkpoint, FeatureStack, Split, SplitRatios,
    CHECKPOINT_MAGIC, STACK_MAGIC,
};
use crate::lsa::{profile_layer_matrices, select_layer, LayerProfile, LsaConfig};
use crate::optim::AdamWConfig;
use crate::synth::{generate_benchmark, SynthConfig};
use crate::train::{train, TrainConfig};

/// Writes to stdout, ignoring a closed pipe.
macro_rules! out {
    ($($t:tt)*) => {{
        use std::io::Write as _;
        let _ = write!(std::io::stdout(), $($t)*);
    }};
}

macro_rules! outln {
    ($($t:tt)*) => {{
        use std::io::Write as _;
        let _ = writeln!(std::io::stdout(), $($t)*);
    }};
}

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

pub const REAL_STACK: &str = "real.lfs";
pub const EDITED_STACK: &str = "edited.lfs";
pub const MANIFEST: &str = "manifest.jsonl";
pub const TRUTH: &str = "truth.json";
pub const CONFIG_ECHO: &str = "config.jsonl";
pub const LSA_REPORT: &str = "lsa.jsonl";
pub const CHECKPOINT: &str = "model.llm";
pub const TRACE: &str = "trace.jsonl";
pub const REPORT: &str = "report.jsonl";
pub const REPORT_TABLE: &str = "report.txt";

#[derive(Debug, Parser)]
#[command(name = "layersel", version, about = "Layer-selective detection and quality evaluation of edited images")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic benchmark with planted ground truth.
    Synth(SynthArgs),
    /// Score every layer and select the most discriminative one.
    Lsa(LsaArgs),
    /// Train the adapter and both decoders on one layer.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a held-out split.
    Eval(EvalArgs),
    /// Validate an LFS1 or LLM1 file and print its header.
    Inspect(InspectArgs),
}

/// Stack and manifest inputs shared by lsa, train and eval.
#[derive(Debug, Args, Serialize)]
#[serde(rename_all = "kebab-case")]
struct DataArgs {
    /// Dataset directory holding real.lfs, edited.lfs and manifest.jsonl.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Real-sample stack (overrides --data).
    #[arg(long)]
    real: Option<PathBuf>,
    /// Edited-sample stack (overrides --data).
    #[arg(long)]
    edited: Option<PathBuf>,
    /// Split manifest (overrides --data).
    #[arg(long)]
    manifest: Option<PathBuf>,
}

impl DataArgs {
    fn path(&self, explicit: &Option<PathBuf>, name: &str) -> Result<PathBuf> {
        match (explicit, &self.data) {
            (Some(p), _) => Ok(p.clone()),
            (None, Some(d)) => Ok(d.join(name)),
            (None, None) => Err(Error::invalid(format!("no path for {name}: pass --data or the explicit flag"))),
        }
    }

    fn load(&self) -> Result<Dataset> {
        let real = read_feature_stack(self.path(&self.real, REAL_STACK)?)?;
        let edited = read_feature_stack(self.path(&self.edited, EDITED_STACK)?)?;
        let manifest = load_manifest(self.path(&self.manifest, MANIFEST)?)?;
        if real.n_layers() != edited.n_layers() || real.dim() != edited.dim() {
            return Err(Error::invalid(format!(
                "incompatible stacks: real is {} layers x {} dims, edited is {} layers x {} dims",
                real.n_layers(),
                real.dim(),
                edited.n_layers(),
                edited.dim()
            )));
        }
        Ok(Dataset { real, edited, manifest })
    }
}

struct Dataset {
    real: FeatureStack,
    edited: FeatureStack,
    manifest: crate::io::DatasetManifest,
}

impl Dataset {
    fn split(&self, layer: usize, split: Split) -> Result<SplitData> {
        if !self.manifest.is_split() {
            return Err(Error::invalid("manifest has no split assignments"));
        }
        let data = SplitData::build(&self.manifest, &self.real, &self.edited, layer, Some(split))?;
        if data.real.rows() == 0 && data.edited.rows() == 0 {
            return Err(Error::invalid(format!("split {split} is empty")));
        }
        Ok(data)
    }
}

#[derive(Debug, Args, Serialize)]
#[command(args_override_self = true)]
#[serde(rename_all = "kebab-case")]
struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 17)]
    editors: usize,
    #[arg(long, default_value_t = 100)]
    per_editor: usize,
    #[arg(long, default_value_t = 12)]
    layers: usize,
    #[arg(long, default_value_t = 64)]
    dim: usize,
    /// Planted layer; defaults to 7, or the deepest layer when fewer exist.
    #[arg(long)]
    informative_layer: Option<usize>,
    /// Class separation in standard deviations.
    #[arg(long, default_value_t = 2.0)]
    shift: f64,
    /// Score noise standard deviation.
    #[arg(long, default_value_t = 0.2)]
    noise: f64,
    /// Train, val and test ratios.
    #[arg(long, value_delimiter = ',', num_args = 1..=3, default_values_t = [4u32, 1, 1])]
    ratios: Vec<u32>,
    /// Line-delimited config file; explicit flags take precedence.
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
#[command(args_override_self = true)]
#[serde(rename_all = "kebab-case")]
struct LsaArgs {
    #[command(flatten)]
    #[serde(flatten)]
    data: DataArgs,
    /// Split whose samples are profiled.
    #[arg(long, default_value = "train")]
    split: Split,
    #[arg(long, default_value_t = 64)]
    bins: usize,
    /// Histogram smoothing mass per bin.
    #[arg(long, default_value_t = 1e-6)]
    alpha: f64,
    /// Variance floor of the discriminant ratio.
    #[arg(long, default_value_t = 1e-6)]
    eps: f64,
    /// Profile features after encoding them with this checkpoint's adapter.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Select this layer regardless of the scores.
    #[arg(long)]
    layer_override: Option<usize>,
    /// Output directory for lsa.jsonl.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Line-delimited config file; explicit flags take precedence.
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
#[command(args_override_self = true)]
#[serde(rename_all = "kebab-case")]
struct TrainArgs {
    #[command(flatten)]
    #[serde(flatten)]
    data: DataArgs,
    /// Output directory for the checkpoint, trace and config echo.
    #[arg(long)]
    out: PathBuf,
    /// lsa.jsonl whose selected layer is used.
    #[arg(long)]
    lsa: Option<PathBuf>,
    /// Train on this layer regardless of any LSA report.
    #[arg(long)]
    layer_override: Option<usize>,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 4)]
    batch: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-4)]
    lr_adapter: f64,
    #[arg(long, default_value_t = 5e-5)]
    lr_heads: f64,
    #[arg(long, default_value_t = 0.0)]
    lr_min: f64,
    #[arg(long, default_value_t = 0.01)]
    weight_decay: f64,
    #[arg(long, default_value_t = 256)]
    out_dim: usize,
    #[arg(long, default_value_t = 8)]
    rank: usize,
    #[arg(long, default_value_t = 16.0)]
    alpha_lora: f64,
    #[arg(long, default_value_t = 0.07)]
    tau: f64,
    #[arg(long, default_value_t = 256)]
    hidden: usize,
    /// Contrast each anchor against every edited sample in its batch.
    #[arg(long)]
    in_batch_negatives: bool,
    /// Clip each step's gradient to this global L2 norm.
    #[arg(long)]
    grad_clip: Option<f64>,
    /// Line-delimited config file; explicit flags take precedence.
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
#[command(args_override_self = true)]
#[serde(rename_all = "kebab-case")]
struct EvalArgs {
    #[command(flatten)]
    #[serde(flatten)]
    data: DataArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value = "test")]
    split: Split,
    /// Class treated as positive for F1: 1 = edited, 0 = real.
    #[arg(long, default_value_t = 1)]
    positive_class: u8,
    /// Output directory for report.jsonl and report.txt.
    #[arg(long)]
    out: PathBuf,
    /// Line-delimited config file; explicit flags take precedence.
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct InspectArgs {
    path: PathBuf,
}

/// Runs the CLI on `args` (including the program name) and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let args = match expand_config(args) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_USAGE;
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let result = match cli.command {
        Command::Synth(a) => cmd_synth(&a),
        Command::Lsa(a) => cmd_lsa(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Inspect(a) => cmd_inspect(&a),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_numerical() {
                EXIT_NUMERICAL
            } else {
                EXIT_DATA
            }
        }
    }
}

/// Splices `--key value` pairs from a `--config` file in front of the explicit
/// flags, so explicit flags win.
fn expand_config(args: Vec<OsString>) -> std::result::Result<Vec<OsString>, String> {
    let mut config = None;
    let mut i = 2;
    while i < args.len() {
        let a = args[i].to_string_lossy();
        if a == "--config" {
            config = args.get(i + 1).cloned();
            i += 1;
        } else if let Some(p) = a.strip_prefix("--config=") {
            config = Some(p.into());
        }
        i += 1;
    }
    let Some(path) = config else {
        return Ok(args);
    };
    let text = fs::read_to_string(&path).map_err(|e| format!("cannot read config {path:?}: {e}"))?;
    let tokens = config_tokens(&text)?;
    let mut out = args[..2.min(args.len())].to_vec();
    out.extend(tokens);
    out.extend_from_slice(&args[2.min(args.len())..]);
    Ok(out)
}

/// Flag tokens for a config file: one JSON object per line, keys are flag
/// names without the leading dashes.
fn config_tokens(text: &str) -> std::result::Result<Vec<OsString>, String> {
    let mut tokens = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let obj: serde_json::Map<String, serde_json::Value> =
            serde_json::from_str(line).map_err(|e| format!("config line {}: {e}", n + 1))?;
        for (k, v) in obj {
            let flag = format!("--{}", k.replace('_', "-"));
            let value = match v {
                serde_json::Value::Null | serde_json::Value::Bool(false) => continue,
                serde_json::Value::Bool(true) => {
                    tokens.push(flag.into());
                    continue;
                }
                serde_json::Value::String(s) => s,
                serde_json::Value::Array(items) => items
                    .iter()
                    .map(|x| x.as_str().map_or_else(|| x.to_string(), str::to_owned))
                    .collect::<Vec<_>>()
                    .join(","),
                other => other.to_string(),
            };
            tokens.push(flag.into());
            tokens.push(value.into());
        }
    }
    Ok(tokens)
}

/// Writes the resolved flags as a config file that reproduces the run.
fn echo_config<T: Serialize>(args: &T, dir: &Path) -> Result<()> {
    let value = serde_json::to_value(args).map_err(|e| Error::invalid(e.to_string()))?;
    let mut out = String::new();
    if let serde_json::Value::Object(map) = value {
        for (k, v) in map {
            if v.is_null() {
                continue;
            }
            let mut line = serde_json::Map::new();
            line.insert(k, v);
            out.push_str(&serde_json::Value::Object(line).to_string());
            out.push('\n');
        }
    }
    write_text(&dir.join(CONFIG_ECHO), &out)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn to_json<T: Serialize>(v: &T) -> Result<String> {
    serde_json::to_string(v).map_err(|e| Error::invalid(e.to_string()))
}

fn cmd_synth(a: &SynthArgs) -> Result<()> {
    let cfg = SynthConfig {
        n_editors: a.editors,
        samples_per_editor: a.per_editor,
        n_layers: a.layers,
        dim: a.dim,
        informative_layer: a
            .informative_layer
            .unwrap_or_else(|| SynthConfig::default().informative_layer.min(a.layers.saturating_sub(1))),
        shift: a.shift,
        noise: a.noise,
        seed: a.seed,
    };
    if cfg.n_layers == 1 {
        log::warn!("a single layer leaves layer selection degenerate: every normalized metric is 0");
    }
    let ratios: [u32; 3] = a
        .ratios
        .as_slice()
        .try_into()
        .map_err(|_| Error::invalid("--ratios takes exactly three values"))?;
    let bench = generate_benchmark(&cfg)?;
    let manifest = split_dataset(&bench.manifest, SplitRatios(ratios), cfg.seed)?;
    create_dir(&a.out)?;
    write_feature_stack(&bench.real, a.out.join(REAL_STACK))?;
    write_feature_stack(&bench.edited, a.out.join(EDITED_STACK))?;
    write_manifest(&manifest, a.out.join(MANIFEST))?;
    let truth = serde_json::to_string_pretty(&bench.truth).map_err(|e| Error::invalid(e.to_string()))?;
    write_text(&a.out.join(TRUTH), &(truth + "\n"))?;
    echo_config(a, &a.out)?;
    outln!(
        "wrote {} real and {} edited samples ({} layers x {} dims, informative layer {}) to {}",
        bench.real.n_samples(),
        bench.edited.n_samples(),
        cfg.n_layers,
        cfg.dim,
        cfg.informative_layer,
        a.out.display()
    );
    Ok(())
}

/// First line of lsa.jsonl.
#[derive(Debug, Serialize, serde::Deserialize)]
struct LsaSelection {
    selected_layer: usize,
    argmax_layer: usize,
    overridden: bool,
    split: Split,
    encoded: bool,
}

fn cmd_lsa(a: &LsaArgs) -> Result<()> {
    let ds = a.data.load()?;
    let (real, edited) = split_stacks(&ds.manifest, &ds.real, &ds.edited, ds.manifest.is_split().then_some(a.split))?;
    let ckpt = a.checkpoint.as_ref().map(read_checkpoint).transpose()?;
    let mut real_layers = Vec::with_capacity(real.n_layers());
    let mut edit_layers = Vec::with_capacity(real.n_layers());
    for l in 0..real.n_layers() {
        let (r, e) = (real.layer_matrix(l), edited.layer_matrix(l));
        match &ckpt {
            Some(c) => {
                real_layers.push(c.encoder.encode(&r)?);
                edit_layers.push(c.encoder.encode(&e)?);
            }
            None => {
                real_layers.push(r);
                edit_layers.push(e);
            }
        }
    }
    let cfg = LsaConfig {
        n_bins: a.bins,
        alpha: a.alpha,
        eps: a.eps,
    };
    let report = profile_layer_matrices(&real_layers, &edit_layers, &cfg)?;
    let argmax = select_layer(&report.profiles)?;
    let selected = match a.layer_override {
        Some(l) if l >= real.n_layers() => {
            return Err(Error::invalid(format!(
                "--layer-override {l} out of range for {} layers",
                real.n_layers()
            )))
        }
        Some(l) => l,
        None => argmax,
    };
    out!("{}", profile_table(&report.profiles, selected));
    outln!("selected layer: {selected}{}", if a.layer_override.is_some() { " (override)" } else { "" });
    if let Some(out) = &a.out {
        create_dir(out)?;
        let mut text = to_json(&LsaSelection {
            selected_layer: selected,
            argmax_layer: argmax,
            overridden: a.layer_override.is_some(),
            split: a.split,
            encoded: ckpt.is_some(),
        })? + "\n";
        for p in &report.profiles {
            text.push_str(&to_json(p)?);
            text.push('\n');
        }
        write_text(&out.join(LSA_REPORT), &text)?;
        echo_config(a, out)?;
    }
    Ok(())
}

fn profile_table(profiles: &[LayerProfile], selected: usize) -> String {
    let mut s = format!(
        "{:>5}  {:>10}  {:>10}  {:>10}  {:>6}  {:>6}  {:>6}  {:>6}\n",
        "layer", "KL", "LDR", "entropy", "KL^", "LDR^", "H^", "score"
    );
    for p in profiles {
        s.push_str(&format!(
            "{:>5}  {:>10.4}  {:>10.4}  {:>10.4}  {:>6.3}  {:>6.3}  {:>6.3}  {:>6.3}{}\n",
            p.layer,
            p.d_kl,
            p.ldr,
            p.entropy,
            p.d_kl_hat,
            p.ldr_hat,
            p.entropy_hat,
            p.score,
            if p.layer == selected { "  *" } else { "" }
        ));
    }
    s
}

fn read_lsa_selection(path: &Path) -> Result<usize> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let first = text.lines().next().ok_or_else(|| Error::invalid(format!("{} is empty", path.display())))?;
    let sel: LsaSelection = serde_json::from_str(first)
        .map_err(|e| Error::invalid(format!("{}: bad selection record: {e}", path.display())))?;
    Ok(sel.selected_layer)
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let layer = match (a.layer_override, &a.lsa) {
        (Some(l), _) => l,
        (None, Some(p)) => read_lsa_selection(p)?,
        (None, None) => return Err(Error::invalid("train needs --lsa or --layer-override")),
    };
    let ds = a.data.load()?;
    let train_data = ds.split(layer, Split::Train)?;
    let val_data = ds.split(layer, Split::Val)?;
    let cfg = TrainConfig {
        layer,
        out_dim: a.out_dim,
        rank: a.rank,
        alpha_lora: a.alpha_lora,
        tau: a.tau,
        hidden: a.hidden,
        epochs: a.epochs,
        batch: a.batch,
        lr_adapter: a.lr_adapter,
        lr_heads: a.lr_heads,
        lr_min: a.lr_min,
        adamw: AdamWConfig {
            weight_decay: a.weight_decay,
            ..AdamWConfig::default()
        },
        seed: a.seed,
        in_batch_negatives: a.in_batch_negatives,
        grad_clip: a.grad_clip,
    };
    let outcome = train(&cfg, &train_data, &val_data)?;
    create_dir(&a.out)?;
    write_checkpoint(&outcome.checkpoint, a.out.join(CHECKPOINT))?;
    let mut trace = String::new();
    for r in &outcome.trace {
        trace.push_str(&to_json(r)?);
        trace.push('\n');
    }
    write_text(&a.out.join(TRACE), &trace)?;
    echo_config(a, &a.out)?;
    let b = outcome.best_val;
    outln!(
        "layer {layer}: best validation contrastive {:.4} (epoch {}), detection {:.4} (epoch {}), quality {:.4} (epoch {})",
        b.contrastive, b.contrastive_epoch, b.detection, b.detection_epoch, b.quality, b.quality_epoch
    );
    outln!("wrote {}", a.out.join(CHECKPOINT).display());
    Ok(())
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let ckpt = read_checkpoint(&a.checkpoint)?;
    let ds = a.data.load()?;
    let test = ds.split(ckpt.layer, a.split)?;
    let report = evaluate(&ckpt, &test, &ds.manifest.editors, a.positive_class)?;
    create_dir(&a.out)?;
    write_text(&a.out.join(REPORT), &report.to_jsonl()?)?;
    let table = report.to_table();
    write_text(&a.out.join(REPORT_TABLE), &table)?;
    echo_config(a, &a.out)?;
    out!("{table}");
    Ok(())
}

fn cmd_inspect(a: &InspectArgs) -> Result<()> {
    let bytes = fs::read(&a.path).map_err(|e| Error::io(&a.path, e))?;
    let magic = bytes.get(..4).unwrap_or(&bytes);
    if magic == STACK_MAGIC {
        let h = parse_stack_header(&bytes)?;
        let stack = FeatureStack::from_bytes(&bytes)?;
        outln!("format: LFS1 feature stack");
        outln!("n_samples: {}", h.n_samples);
        outln!("n_layers: {}", h.n_layers);
        outln!("dim: {}", h.dim);
        outln!("id_table_bytes: {}", h.id_table_len);
        let ids = stack.sample_ids();
        if let (Some(first), Some(last)) = (ids.first(), ids.last()) {
            outln!("sample_ids: {first} .. {last}");
        }
    } else if magic == CHECKPOINT_MAGIC {
        let h = parse_checkpoint_header(&bytes)?;
        Checkpoint::from_bytes(&bytes)?;
        outln!("format: LLM1 checkpoint");
        outln!("in_dim: {}", h.in_dim);
        outln!("out_dim: {}", h.out_dim);
        outln!("rank: {}", h.rank);
        outln!("hidden: {}", h.hidden);
        outln!("layer: {}", h.layer);
        outln!("scale: {}", h.scale);
        outln!("tau: {}", h.tau);
        for (name, n) in h.sections() {
            outln!("section {name}: {n} values");
        }
    } else {
        let mut found = [0u8; 4];
        found[..magic.len()].copy_from_slice(magic);
        return Err(Error::BadMagic {
            expected: STACK_MAGIC,
            found,
        });
    }
    Ok(())
}

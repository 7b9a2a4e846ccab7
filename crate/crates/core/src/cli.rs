//! Batch command-line interface. Exit codes: 0 success, 1 usage, 2 runtime.
//!
//! Every command that writes files writes only under its `--out` directory
//! and starts with a reproducibility header (seed, config hash, recipe).

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::DType;
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::blob::Blob;
use crate::budget::{param_budget, paper_scale_entries, BudgetEntry};
use crate::checkpoint::{load_checkpoint, save_checkpoint, transplant};
use crate::config::{Modality, ModelConfig, SignalCounts};
use crate::data::io::{dataset_hash, Dataset};
use crate::diffusion::BackboneRecipe;
use crate::encoders::RawSample;
use crate::error::Error;
use crate::model::{InferenceOptions, NxModel};
use crate::train::eval::signal_metrics;
use crate::train::pretrain::{pretrain_backbones, pretrain_llm};
use crate::train::recipe::{PretrainRecipe, StageRecipe};
use crate::train::runner::run_stage;

pub const SEED_ENV: &str = "NXGPT_SEED";

#[derive(Debug, Parser)]
#[command(name = "nxgpt", version, about = "Desk-scale any-to-any multimodal LLM pipeline")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset (caption pairs, instruction pairs, dialogues).
    GenData(GenDataArgs),
    /// Pretrain the base language model and the diffusion decoders.
    Pretrain(PretrainArgs),
    /// Run one alignment stage.
    Train(TrainArgs),
    /// Answer one prompt with optional attachments.
    Infer(InferArgs),
    /// Print the trainable/frozen parameter table.
    ParamBudget(BudgetArgs),
    /// Stage-2 training across signal-token counts.
    SweepSignals(SweepArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Caption pairs per non-text modality.
    #[arg(long, default_value_t = 11)]
    pub pairs: usize,
    /// Modality-switching dialogues.
    #[arg(long, default_value_t = 31)]
    pub dialogues: usize,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Model config (TOML); the desk profile when absent.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub llm_steps: Option<usize>,
    #[arg(long)]
    pub backbone_steps: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=3))]
    pub stage: u8,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Checkpoint produced by the previous step.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Use the published recipe (one epoch) instead of the desk recipe.
    #[arg(long)]
    pub paper_recipe: bool,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Override the number of optimizer steps.
    #[arg(long)]
    pub steps: Option<usize>,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub prompt: String,
    /// `modality:path` to a payload blob; repeatable.
    #[arg(long, value_parser = parse_attach)]
    pub attach: Vec<(Modality, PathBuf)>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = 96)]
    pub max_new: usize,
    /// Directory for the record and sampled latents; print only when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BudgetArgs {
    /// Model config (TOML) or a budget table with an `entries` list.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Use the full-size component table.
    #[arg(long)]
    pub paper_scale: bool,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long, value_delimiter = ',', required = true)]
    pub counts: Vec<usize>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Checkpoint that has completed stage 1; built from scratch when absent.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Stage-2 steps per count.
    #[arg(long)]
    pub steps: Option<usize>,
}

fn parse_attach(s: &str) -> std::result::Result<(Modality, PathBuf), String> {
    let (m, p) = s
        .split_once(':')
        .ok_or_else(|| format!("expected modality:path, got `{s}`"))?;
    let m: Modality = m.parse().map_err(|e: Error| e.to_string())?;
    if m == Modality::Text {
        return Err("text is not an attachment modality".into());
    }
    if p.is_empty() {
        return Err("empty attachment path".into());
    }
    Ok((m, PathBuf::from(p)))
}

/// Failure of one command, carrying its exit code.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Runtime(e)
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Runtime(e.into())
    }
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Runtime(e) => write!(f, "error: {e}"),
        }
    }
}

type CliResult = std::result::Result<(), CliError>;

/// Parse `args` (program name first) and run; returns the exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let text = e.render().to_string();
            let _ = if code == 0 { write!(out, "{text}") } else { write!(err, "{text}") };
            return code;
        }
    };
    match dispatch(cli.command, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "{e}");
            e.code()
        }
    }
}

fn dispatch(cmd: Command, out: &mut dyn Write) -> CliResult {
    match cmd {
        Command::GenData(a) => gen_data(a, out),
        Command::Pretrain(a) => pretrain(a, out),
        Command::Train(a) => train(a, out),
        Command::Infer(a) => infer(a, out),
        Command::ParamBudget(a) => budget(a, out),
        Command::SweepSignals(a) => sweep(a, out),
    }
}

/// `--seed`, else `NXGPT_SEED`, else 0.
pub fn resolve_seed(flag: Option<u64>) -> std::result::Result<u64, CliError> {
    if let Some(s) = flag {
        return Ok(s);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| CliError::Usage(format!("{SEED_ENV}={v} is not an unsigned integer"))),
        Err(_) => Ok(0),
    }
}

/// `key: value` lines for every field of a serializable record.
fn kv_lines(v: &impl Serialize) -> String {
    let mut s = String::new();
    if let Ok(serde_json::Value::Object(map)) = serde_json::to_value(v) {
        for (k, v) in map {
            s.push_str(&format!("{}: {}\n", k.replace('_', " "), v));
        }
    }
    s
}

fn header(command: &str, seed: u64, cfg: &ModelConfig, recipe: &str) -> String {
    format!("# nxgpt {command}\nseed: {seed}\nconfig hash: {}\n{recipe}", cfg.fingerprint())
}

fn emit_header(out: &mut dyn Write, dir: Option<&Path>, text: &str) -> CliResult {
    write!(out, "{text}").map_err(|e| Error::io("stdout", e))?;
    if let Some(dir) = dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let p = dir.join("header.txt");
        fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
    }
    Ok(())
}

fn say(out: &mut dyn Write, line: impl AsRef<str>) -> CliResult {
    writeln!(out, "{}", line.as_ref()).map_err(|e| Error::io("stdout", e))?;
    Ok(())
}

fn load_config(path: Option<&Path>) -> std::result::Result<ModelConfig, CliError> {
    match path {
        None => Ok(ModelConfig::desk()),
        Some(p) => {
            let cfg = ModelConfig::load(p).map_err(|e| CliError::Usage(e.to_string()))?;
            crate::config::validate_config(&cfg)
                .into_result()
                .map_err(|e| CliError::Usage(e.to_string()))?;
            Ok(cfg)
        }
    }
}

fn gen_data(a: GenDataArgs, out: &mut dyn Write) -> CliResult {
    if a.pairs == 0 {
        return Err(CliError::Usage("--pairs must be at least 1".into()));
    }
    let seed = resolve_seed(a.seed)?;
    let cfg = ModelConfig::desk();
    let recipe = format!("pairs per modality: {}\ndialogues: {}\n", a.pairs, a.dialogues);
    let ds = Dataset::generate(seed, a.pairs, a.dialogues, &cfg.encoder)?;
    ds.save(&a.out)?;
    emit_header(out, Some(&a.out), &header("gen-data", seed, &cfg, &recipe))?;
    say(
        out,
        format!(
            "wrote {} pairs, {} instruction pairs, {} dialogues, {} blobs\ndataset hash: {}",
            ds.pairs.len(),
            ds.t2m.len(),
            ds.mosit.len(),
            ds.blobs.len(),
            dataset_hash(&a.out)?
        ),
    )
}

fn pretrain(a: PretrainArgs, out: &mut dyn Write) -> CliResult {
    let seed = resolve_seed(a.seed)?;
    let cfg = load_config(a.config.as_deref())?;
    let mut llm_recipe = PretrainRecipe::default();
    if let Some(s) = a.llm_steps {
        llm_recipe.steps = s;
    }
    let mut bb = BackboneRecipe::default();
    if let Some(s) = a.backbone_steps {
        bb.steps = s;
    }
    if llm_recipe.steps == 0 || bb.steps == 0 {
        return Err(CliError::Usage("step counts must be positive".into()));
    }
    let ds = Dataset::load(&a.data)?;
    let recipe = format!("[llm]\n{}[backbones]\n{}", kv_lines(&llm_recipe), kv_lines(&bb));
    emit_header(out, Some(&a.out), &header("pretrain", seed, &cfg, &recipe))?;
    let mut model = NxModel::new(&cfg, DType::F32)?;
    let llm = pretrain_llm(&mut model, &ds, &llm_recipe, seed)?;
    let bbs = pretrain_backbones(&mut model, &ds, bb, seed)?;
    let mut log = String::new();
    for (step, loss) in llm.iter().enumerate() {
        log.push_str(&serde_json::to_string(&serde_json::json!({"phase": "llm", "step": step, "loss": loss}))?);
        log.push('\n');
    }
    for (m, losses) in &bbs {
        for (step, loss) in losses.iter().enumerate() {
            log.push_str(&serde_json::to_string(&serde_json::json!({"phase": format!("backbone.{m}"), "step": step, "loss": loss}))?);
            log.push('\n');
        }
    }
    let p = a.out.join("metrics.jsonl");
    fs::write(&p, log).map_err(|e| Error::io(&p, e))?;
    save_checkpoint(&model, &a.out)?;
    say(out, format!("llm loss {:.4} -> {:.4}", llm[0], llm[llm.len() - 1]))?;
    for (m, l) in &bbs {
        say(out, format!("{m} decoder loss {:.4} -> {:.4}", l[0], l[l.len() - 1]))?;
    }
    say(out, format!("checkpoint: {}", a.out.display()))
}

fn train(a: TrainArgs, out: &mut dyn Write) -> CliResult {
    let seed = resolve_seed(a.seed)?;
    let mut recipe = if a.paper_recipe { StageRecipe::paper(a.stage)? } else { StageRecipe::desk(a.stage)? };
    if let Some(s) = a.steps {
        if s == 0 {
            return Err(CliError::Usage("--steps must be positive".into()));
        }
        recipe.steps = Some(s);
    }
    let mut model = match &a.resume {
        Some(dir) => load_checkpoint(dir)?,
        None => NxModel::new(&ModelConfig::desk(), DType::F32)?,
    };
    // Fail on missing prerequisites before touching the output directory.
    crate::train::check_prerequisites(&model, a.stage)?;
    let ds = Dataset::load(&a.data)?;
    emit_header(out, Some(&a.out), &header("train", seed, &model.cfg, &recipe.header()))?;
    let p = a.out.join("metrics.jsonl");
    let mut log = fs::File::create(&p).map_err(|e| Error::io(&p, e))?;
    let report = run_stage(&mut model, a.stage, &recipe, &ds, seed, Some(&mut log))?;
    save_checkpoint(&model, &a.out)?;
    if let Some(last) = report.last() {
        say(out, format!("stage {} finished after {} steps; final loss {}", a.stage, report.steps, kv_lines(&last.loss).replace('\n', " ")))?;
    }
    say(out, format!("checkpoint: {}", a.out.display()))
}

fn load_attachment(m: Modality, path: &Path) -> std::result::Result<RawSample, CliError> {
    let blob = Blob::read(path)?;
    Ok(RawSample::from_blob(m, &blob.shape, blob.data)?)
}

fn infer(a: InferArgs, out: &mut dyn Write) -> CliResult {
    let seed = resolve_seed(a.seed)?;
    if a.max_new == 0 {
        return Err(CliError::Usage("--max-new must be positive".into()));
    }
    let model = load_checkpoint(&a.ckpt)?;
    let samples = a
        .attach
        .iter()
        .map(|(m, p)| load_attachment(*m, p))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let recipe = format!("max new tokens: {}\ndecoding: greedy\n", a.max_new);
    emit_header(out, a.out.as_deref(), &header("infer", seed, &model.cfg, &recipe))?;
    let opts = InferenceOptions { max_new: a.max_new, seed, ..Default::default() };
    let result = model.run_inference(&a.prompt, &samples, &opts)?;
    let record = result.record(|m| format!("latent_{m}.blob"));
    if let Some(dir) = &a.out {
        for (m, latent) in &result.latents {
            Blob::new(vec![latent.len()], latent.clone())?.write(&dir.join(format!("latent_{m}.blob")))?;
        }
        let p = dir.join("record.json");
        fs::write(&p, serde_json::to_string_pretty(&record)? + "\n").map_err(|e| Error::io(&p, e))?;
    }
    say(out, serde_json::to_string_pretty(&record)?)
}

#[derive(serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct BudgetFile {
    entries: Vec<BudgetEntry>,
}

fn budget(a: BudgetArgs, out: &mut dyn Write) -> CliResult {
    let usage = |e: Error| CliError::Usage(e.to_string());
    let (label, entries) = if a.paper_scale {
        ("paper scale".to_string(), paper_scale_entries())
    } else {
        match &a.config {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| usage(Error::io(p, e)))?;
                match toml::from_str::<BudgetFile>(&text) {
                    Ok(f) => (p.display().to_string(), f.entries),
                    Err(_) => {
                        let cfg = load_config(Some(p))?;
                        let model = NxModel::new(&cfg, DType::F32).map_err(usage)?;
                        (p.display().to_string(), model.budget().map_err(usage)?.entries)
                    }
                }
            }
            None => {
                let model = NxModel::new(&ModelConfig::desk(), DType::F32)?;
                ("desk".to_string(), model.budget()?.entries)
            }
        }
    };
    let b = param_budget(entries).map_err(usage)?;
    say(out, format!("# parameter budget ({label})"))?;
    write!(out, "{}", b.render_table()).map_err(|e| Error::io("stdout", e))?;
    say(out, format!("ratio: {:.5}", b.ratio))
}

/// One row of the signal-count sweep.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub count: usize,
    pub modality: Modality,
    pub align_l2: f64,
    pub denoise: f64,
    pub mean_cosine: f64,
    pub signal_accuracy: f64,
}

impl SweepRow {
    pub const CSV_HEADER: &'static str = "count,modality,align_l2,denoise,mean_cosine,signal_accuracy";

    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.count, self.modality, self.align_l2, self.denoise, self.mean_cosine, self.signal_accuracy
        )
    }
}

/// Stage-1-complete base model for the sweep: from `resume`, or pretrained
/// and stage-1 trained here with the desk recipes.
fn sweep_base(resume: Option<&Path>, ds: &Dataset, seed: u64) -> crate::error::Result<NxModel> {
    if let Some(dir) = resume {
        return load_checkpoint(dir);
    }
    let mut model = NxModel::new(&ModelConfig::desk(), DType::F32)?;
    pretrain_llm(&mut model, ds, &PretrainRecipe::default(), seed)?;
    pretrain_backbones(&mut model, ds, BackboneRecipe::default(), seed)?;
    run_stage(&mut model, 1, &StageRecipe::desk(1)?, ds, seed, None)?;
    Ok(model)
}

/// Train stage 2 once per signal count, starting each run from the same
/// base components, and measure every modality.
pub fn sweep_signals(
    base: &NxModel,
    ds: &Dataset,
    counts: &[usize],
    recipe: &StageRecipe,
    seed: u64,
) -> crate::error::Result<Vec<SweepRow>> {
    let mut counts = counts.to_vec();
    counts.sort_unstable();
    counts.dedup();
    let mut rows = Vec::new();
    for c in counts {
        let mut cfg = base.cfg.clone();
        cfg.signals = SignalCounts::uniform(c);
        let mut model = NxModel::new(&cfg, DType::F32)?;
        transplant(base, &mut model, |n| !n.starts_with("outproj."))?;
        run_stage(&mut model, 2, recipe, ds, seed, None)?;
        for m in Modality::NON_TEXT {
            let pairs: Vec<_> = ds.pairs_of(m).collect();
            let s = signal_metrics(&model, &pairs)?;
            rows.push(SweepRow {
                count: c,
                modality: m,
                align_l2: s.align_l2,
                denoise: s.denoise,
                mean_cosine: s.mean_cosine,
                signal_accuracy: s.signal_accuracy,
            });
        }
    }
    Ok(rows)
}

fn sweep(a: SweepArgs, out: &mut dyn Write) -> CliResult {
    if a.counts.iter().any(|&c| c == 0) {
        return Err(CliError::Usage("signal counts must be positive".into()));
    }
    if a.steps == Some(0) {
        return Err(CliError::Usage("--steps must be positive".into()));
    }
    let seed = resolve_seed(a.seed)?;
    let mut recipe = StageRecipe::desk(2)?;
    if a.steps.is_some() {
        recipe.steps = a.steps;
    }
    let ds = Dataset::load(&a.data)?;
    let base = sweep_base(a.resume.as_deref(), &ds, seed)?;
    let counts: Vec<String> = a.counts.iter().map(usize::to_string).collect();
    let text = format!("{}counts: {}\n", recipe.header(), counts.join(","));
    emit_header(out, Some(&a.out), &header("sweep-signals", seed, &base.cfg, &text))?;
    let rows = sweep_signals(&base, &ds, &a.counts, &recipe, seed)?;
    let mut csv = format!("{}\n", SweepRow::CSV_HEADER);
    say(out, format!("{:>5}  {:<6}  {:>10}  {:>10}  {:>8}  {:>8}", "count", "modality", "align_l2", "denoise", "cosine", "sig_acc"))?;
    for r in &rows {
        say(
            out,
            format!(
                "{:>5}  {:<8}  {:>10.5}  {:>10.5}  {:>8.4}  {:>8.4}",
                r.count, r.modality, r.align_l2, r.denoise, r.mean_cosine, r.signal_accuracy
            ),
        )?;
        csv.push_str(&r.csv());
        csv.push('\n');
    }
    let p = a.out.join("sweep.csv");
    fs::write(&p, csv).map_err(|e| Error::io(&p, e))?;
    let by_count: BTreeMap<usize, usize> = rows.iter().fold(BTreeMap::new(), |mut m, r| {
        *m.entry(r.count).or_default() += 1;
        m
    });
    say(out, format!("csv for {} counts: {}", by_count.len(), p.display()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_args(args: &[&str]) -> (i32, String, String) {
        let mut o = Vec::new();
        let mut e = Vec::new();
        let code = run(std::iter::once("nxgpt").chain(args.iter().copied()), &mut o, &mut e);
        (code, String::from_utf8(o).unwrap(), String::from_utf8(e).unwrap())
    }

    #[test]
    fn attach_syntax() {
        assert_eq!(parse_attach("image:a/b.blob").unwrap(), (Modality::Image, PathBuf::from("a/b.blob")));
        assert!(parse_attach("image").is_err());
        assert!(parse_attach("smell:x").is_err());
        assert!(parse_attach("text:x").is_err());
        assert!(parse_attach("audio:").is_err());
    }

    #[test]
    fn usage_errors_exit_one() {
        assert_eq!(run_args(&["gen-data", "--out", "/nonexistent/x", "--pairs", "0"]).0, 1);
        assert_eq!(run_args(&["train", "--stage", "4", "--data", "d", "--out", "o"]).0, 1);
        assert_eq!(run_args(&["infer", "--ckpt", "c", "--prompt", "p", "--attach", "image"]).0, 1);
        assert_eq!(run_args(&["frobnicate"]).0, 1);
        assert_eq!(run_args(&["--help"]).0, 0);
    }

    #[test]
    fn paper_budget_prints_ratio() {
        let (code, out, _) = run_args(&["param-budget", "--paper-scale"]);
        assert_eq!(code, 0);
        assert!(out.contains("ratio: 0.01247"), "{out}");
    }

    #[test]
    fn kv_lines_lists_fields() {
        let s = kv_lines(&BackboneRecipe { steps: 3, batch: 2, lr: 0.5 });
        assert_eq!(s, "batch: 2\nlr: 0.5\nsteps: 3\n");
    }
}

use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use fsc_lab::encoders::Tokenizer;
use fsc_lab::eval::{Evaluator, Similarity, REPORT_HEADER};
use fsc_lab::io::write_atomic;
use fsc_lab::objective::NormMode;
use fsc_lab::synth::{make_eval_suites, make_training_set, EvalSuites, Sample, SuiteItem};
use fsc_lab::textgen::{generate_set, Lexicon, NegativeSeed};
use fsc_lab::trainer::{metrics_csv, train, wise_ft_interpolate, Checkpoint, Dataset, Phase};
use fsc_lab::Error;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;

pub const THREADS_VAR: &str = "FSC_LAB_THREADS";

#[derive(Debug, Parser)]
#[command(name = "fsc-lab", version, about = "Hard-negative contrastive fine-tuning on synthetic scenes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a training set and evaluation suites as JSONL.
    GenData(GenDataArgs),
    /// Generate hard negatives for every caption of a JSONL corpus.
    GenNegatives(GenNegativesArgs),
    /// Train the encoders and write a checkpoint plus metrics log.
    Train(TrainArgs),
    /// Score a checkpoint on evaluation suites.
    Eval(EvalArgs),
    /// Interpolate two checkpoints in weight space.
    Merge(MergeArgs),
    /// Evaluate the interpolation path at alpha = 0.0, 0.1, ..., 1.0.
    PlotData(PlotDataArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenData(_) => "gen-data",
            Command::GenNegatives(_) => "gen-negatives",
            Command::Train(_) => "train",
            Command::Eval(_) => "eval",
            Command::Merge(_) => "merge",
            Command::PlotData(_) => "plot-data",
        }
    }
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON run configuration; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[command(flatten)]
    pub common: Common,
    /// Output directory for train.jsonl and eval.jsonl.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub train_size: Option<usize>,
    #[arg(long)]
    pub suite_size: Option<usize>,
}

#[derive(Debug, Args)]
pub struct GenNegativesArgs {
    /// JSONL file whose objects carry a "caption" string.
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Training step folded into each item's seed.
    #[arg(long, default_value_t = 0)]
    pub step: u64,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum PhaseArg {
    Pretrain,
    Finetune,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum NormArg {
    Minmax,
    MinmaxSparse,
    Softmax,
}

impl From<NormArg> for NormMode {
    fn from(n: NormArg) -> Self {
        match n {
            NormArg::Minmax => NormMode::Minmax,
            NormArg::MinmaxSparse => NormMode::MinmaxSparse,
            NormArg::Softmax => NormMode::Softmax,
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    /// Training JSONL; without it a training set is generated from the seed.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Checkpoint to start from.
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Output directory for model.fsck and metrics.csv.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub phase: Option<PhaseArg>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lambda_g: Option<f64>,
    #[arg(long)]
    pub lambda_l: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long, value_enum)]
    pub norm_mode: Option<NormArg>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum SimilarityArg {
    Global,
    Local,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Evaluation suite JSONL.
    #[arg(long)]
    pub suite: Option<PathBuf>,
    /// Report JSON path; a CSV row is written next to it.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "global")]
    pub similarity: SimilarityArg,
}

#[derive(Debug, Args)]
pub struct MergeArgs {
    #[arg(long)]
    pub pre: PathBuf,
    #[arg(long)]
    pub ft: PathBuf,
    #[arg(long)]
    pub alpha: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PlotDataArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub pre: PathBuf,
    #[arg(long)]
    pub ft: PathBuf,
    #[arg(long)]
    pub suite: Option<PathBuf>,
    /// CSV output with columns alpha,Comp,ZS.
    #[arg(long)]
    pub out: PathBuf,
}

pub enum Failure {
    Config(anyhow::Error),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        let config = e.chain().any(|c| matches!(c.downcast_ref::<Error>(), Some(Error::Config(_))));
        if config {
            Failure::Config(e)
        } else {
            Failure::Runtime(e)
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        anyhow::Error::from(e).into()
    }
}

/// Caps the worker pool at `FSC_LAB_THREADS` when set.
pub fn configure_threads() -> anyhow::Result<()> {
    let Ok(raw) = std::env::var(THREADS_VAR) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| anyhow!("{THREADS_VAR} must be a positive integer, got {raw:?}"))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

pub fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::GenNegatives(a) => gen_negatives(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Merge(a) => merge_cmd(a),
        Command::PlotData(a) => plot_data(a),
    }
}

fn load_config(common: &Common) -> Result<RunConfig, Failure> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn tokenizer(cfg: &RunConfig) -> Tokenizer {
    Tokenizer::new(Lexicon::shipped(), cfg.w_max)
}

fn validated(cfg: &RunConfig, tok: &Tokenizer) -> Result<(), Failure> {
    cfg.validate(tok.vocab_size())?;
    Ok(())
}

fn require(path: Option<PathBuf>, what: &str) -> Result<PathBuf, Failure> {
    path.ok_or_else(|| Failure::Config(anyhow!("missing --{what} (or \"{what}\" in the config)")))
}

fn to_jsonl<T: Serialize>(items: &[T]) -> anyhow::Result<String> {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(item)?);
        out.push('\n');
    }
    Ok(out)
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> anyhow::Result<Vec<T>> {
    let file = std::fs::File::open(path).with_context(|| format!("cannot open {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).with_context(|| format!("{}:{}", path.display(), i + 1))?);
    }
    Ok(out)
}

fn write_text(path: &Path, text: &str) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    write_atomic(path, text.as_bytes()).with_context(|| format!("cannot write {}", path.display()))
}

fn gen_data(a: GenDataArgs) -> Result<(), Failure> {
    let mut cfg = load_config(&a.common)?;
    if let Some(n) = a.train_size {
        cfg.train_size = n;
    }
    if let Some(n) = a.suite_size {
        cfg.suite_size = n;
    }
    let out = require(a.out.or(cfg.out.clone()), "out")?;
    let tok = tokenizer(&cfg);
    validated(&cfg, &tok)?;
    let synth = cfg.synth();
    let train = make_training_set(&synth, cfg.seed);
    let suites = make_eval_suites(&synth, synth.suite_size, cfg.seed)?;
    write_text(&out.join("train.jsonl"), &to_jsonl(&train)?)?;
    write_text(&out.join("eval.jsonl"), &to_jsonl(&suites.items())?)?;
    Ok(())
}

#[derive(Deserialize)]
struct CaptionLine {
    caption: String,
}

#[derive(Serialize)]
struct NegativesLine<'a> {
    caption: &'a str,
    negatives: &'a [String],
    valid: &'a [bool],
}

fn gen_negatives(a: GenNegativesArgs) -> Result<(), Failure> {
    let lexicon = Lexicon::shipped();
    let lines: Vec<CaptionLine> = read_jsonl(&a.input)?;
    let mut out = String::new();
    for (i, line) in lines.iter().enumerate() {
        let seed = NegativeSeed {
            global_seed: a.seed,
            item_id: i as u64,
            step: a.step,
        };
        let set = generate_set(&line.caption, &lexicon, seed).with_context(|| format!("line {}", i + 1))?;
        let rec = NegativesLine {
            caption: &set.caption,
            negatives: &set.negatives,
            valid: &set.valid,
        };
        out.push_str(&serde_json::to_string(&rec).map_err(anyhow::Error::from)?);
        out.push('\n');
    }
    write_text(&a.out, &out)?;
    Ok(())
}

fn train_cmd(a: TrainArgs) -> Result<(), Failure> {
    let mut cfg = load_config(&a.common)?;
    if let Some(p) = a.phase {
        cfg.phase = match p {
            PhaseArg::Pretrain => Phase::PretrainContrastive,
            PhaseArg::Finetune => Phase::Finetune,
        };
    }
    macro_rules! set {
        ($($field:ident),*) => { $(if let Some(v) = a.$field { cfg.$field = Some(v); })* };
    }
    set!(steps, lr, lambda_g, lambda_l);
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = a.gamma {
        cfg.gamma = v;
    }
    if let Some(v) = a.beta {
        cfg.beta = v;
    }
    if let Some(v) = a.norm_mode {
        cfg.norm_mode = v.into();
    }
    if a.data.is_some() {
        cfg.data = a.data;
    }
    if a.init.is_some() {
        cfg.init = a.init;
    }
    let out = require(a.out.or(cfg.out.clone()), "out")?;
    let tok = tokenizer(&cfg);
    validated(&cfg, &tok)?;
    let encoder = cfg.encoder(tok.vocab_size());
    let synth = cfg.synth();

    let samples: Vec<Sample> = match &cfg.data {
        Some(p) => read_jsonl(p)?,
        None => make_training_set(&synth, cfg.seed),
    };
    let init = match &cfg.init {
        Some(p) => Some(Checkpoint::load(p).with_context(|| format!("loading {}", p.display()))?),
        None => None,
    };
    let data = Dataset::prepare(&samples, &synth, &tok)?;
    let outcome = train(&data, &tok, &encoder, init.as_ref(), &cfg.train())?;
    let ckpt = outcome.checkpoint.with_config_digest(cfg.digest()?);
    std::fs::create_dir_all(&out).with_context(|| format!("cannot create {}", out.display()))?;
    ckpt.save(&out.join("model.fsck"))?;
    write_text(&out.join("metrics.csv"), &metrics_csv(&outcome.metrics))?;
    println!("{:016x}", ckpt.digest()?);
    Ok(())
}

fn load_suites(path: &Path) -> Result<EvalSuites, Failure> {
    let items: Vec<SuiteItem> = read_jsonl(path)?;
    let suites = EvalSuites::from_items(items);
    if suites.is_empty() {
        return Err(Failure::Runtime(Error::EmptySuite.into()));
    }
    Ok(suites)
}

fn eval_cmd(a: EvalArgs) -> Result<(), Failure> {
    let cfg = load_config(&a.common)?;
    let suite = require(a.suite.or(cfg.suite.clone()), "suite")?;
    let ckpt = Checkpoint::load(&a.ckpt).with_context(|| format!("loading {}", a.ckpt.display()))?;
    if a.common.config.is_some() {
        ckpt.verify_config(cfg.digest()?)?;
    }
    let tok = Tokenizer::new(Lexicon::shipped(), ckpt.encoder().w_max);
    let synth = fsc_lab::synth::SynthConfig {
        grid: ckpt.encoder().grid,
        ..cfg.synth()
    };
    let suites = load_suites(&suite)?;
    let similarity = match a.similarity {
        SimilarityArg::Global => Similarity::Global,
        SimilarityArg::Local => Similarity::Local(cfg.norm_mode),
    };
    let report = Evaluator::new(&ckpt, &tok, &synth, similarity)?.report(&suites)?;
    let json = serde_json::to_string_pretty(&report).map_err(anyhow::Error::from)?;
    let csv = format!("{REPORT_HEADER}\n{}\n", report.csv_row());
    match a.out.or(cfg.out) {
        Some(path) => {
            write_text(&path, &(json + "\n"))?;
            write_text(&path.with_extension("csv"), &csv)?;
        }
        None => println!("{json}"),
    }
    Ok(())
}

fn merge_cmd(a: MergeArgs) -> Result<(), Failure> {
    let pre = Checkpoint::load(&a.pre).with_context(|| format!("loading {}", a.pre.display()))?;
    let ft = Checkpoint::load(&a.ft).with_context(|| format!("loading {}", a.ft.display()))?;
    let merged = wise_ft_interpolate(&pre, &ft, a.alpha)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(anyhow::Error::from)?;
    }
    merged.save(&a.out)?;
    Ok(())
}

fn plot_data(a: PlotDataArgs) -> Result<(), Failure> {
    let cfg = load_config(&a.common)?;
    let suite = require(a.suite.or(cfg.suite.clone()), "suite")?;
    let pre = Checkpoint::load(&a.pre).with_context(|| format!("loading {}", a.pre.display()))?;
    let ft = Checkpoint::load(&a.ft).with_context(|| format!("loading {}", a.ft.display()))?;
    let suites = load_suites(&suite)?;
    let tok = Tokenizer::new(Lexicon::shipped(), pre.encoder().w_max);
    let synth = fsc_lab::synth::SynthConfig {
        grid: pre.encoder().grid,
        ..cfg.synth()
    };
    let mut csv = String::from("alpha,Comp,ZS\n");
    for i in 0..=10 {
        let alpha = f64::from(i) / 10.0;
        let merged = wise_ft_interpolate(&pre, &ft, alpha)?;
        let ev = Evaluator::new(&merged, &tok, &synth, Similarity::Global)?;
        let comp = (ev.comp_i2t(&suites)? + ev.group(&suites)?) / 2.0;
        let zs = ev.zero_shot(&suites)?;
        csv.push_str(&format!("{alpha:.1},{comp},{zs}\n"));
    }
    write_text(&a.out, &csv)?;
    Ok(())
}

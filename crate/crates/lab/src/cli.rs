//! The `comve` command line.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use anyhow::{bail, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use comve_core::data::{
    augment, export_for_translation, generate_synthetic, import_translations, Augmenter, DatasetSplit, SplitName,
    SyntheticLexicon,
};
use comve_core::models::Task;
use comve_core::rng::derive_seed;
use comve_core::train::{
    build_vocab, curve_point, ensemble_predict, evaluate, fresh_model, gold_label, train, transfer_init, CurveRow,
    InitSpec, TrainConfig, TrainData, TrainOutcome,
};
use comve_core::Error;
use serde::Serialize;

use crate::comve_csv::load_comve;
use crate::config::{resolve_seed, RunConfig};
use crate::io::{
    ensure_dir, load_checkpoint, load_split, load_vocab, read_translations, save_checkpoint, save_split, save_vocab,
    split_name_of, write_json, write_jsonl,
};
use crate::metrics::{emit_metrics, write_curve};
use crate::parallel::parallel_map;

#[derive(Parser)]
#[command(name = "comve", version, about = "Commonsense validation and explanation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Convert ComVE CSV files to JSONL.
    Ingest(IngestArgs),
    /// Generate synthetic train/dev/test splits.
    Synth(SynthArgs),
    /// Double a train split with paraphrased or back-translated copies.
    Augment(AugmentArgs),
    /// Write statements out for an external translation round trip.
    ExportMt(ExportArgs),
    /// Build augmented instances from returned translations.
    ImportMt(ImportArgs),
    /// Train a model from a config file.
    Train(TrainArgs),
    /// Train starting from another checkpoint's encoder.
    TransferTrain(TransferArgs),
    /// Score a checkpoint on a split.
    Eval(EvalArgs),
    /// Majority vote over several checkpoints.
    Ensemble(EnsembleArgs),
    /// Dev accuracy over training fractions and seeds.
    Curve(CurveArgs),
    /// Learn a BPE vocabulary from a split.
    Vocab(VocabArgs),
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
enum SplitArg {
    Train,
    Dev,
    Test,
}

impl From<SplitArg> for SplitName {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => SplitName::Train,
            SplitArg::Dev => SplitName::Dev,
            SplitArg::Test => SplitName::Test,
        }
    }
}

#[derive(Args, Serialize)]
struct IngestArgs {
    #[arg(long)]
    task_a: PathBuf,
    #[arg(long)]
    task_b: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "train")]
    split: SplitArg,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct SynthArgs {
    /// Training instances.
    #[arg(long)]
    n: usize,
    /// Dev instances (default n/10, at least 1).
    #[arg(long)]
    dev_n: Option<usize>,
    /// Test instances (default n/10, at least 1).
    #[arg(long)]
    test_n: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Fraction of instances whose reason needs the hint to resolve.
    #[arg(long, default_value_t = 0.3)]
    hint_signal: f64,
    /// JSON word lists replacing the bundled lexicon.
    #[arg(long)]
    lexicon: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct AugmentArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Back-translated records; paraphrasing is used when absent.
    #[arg(long)]
    translations: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct ExportArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct ImportArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    translations: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TransferArgs {
    #[arg(long)]
    config: PathBuf,
    /// Checkpoint whose encoder initializes the run.
    #[arg(long)]
    source: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Serialize)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    split: PathBuf,
    /// Feed an empty hint to explanation models.
    #[arg(long)]
    no_hint: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct EnsembleArgs {
    #[arg(long = "ckpt", required = true)]
    ckpts: Vec<PathBuf>,
    #[arg(long)]
    split: PathBuf,
    #[arg(long)]
    no_hint: bool,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CurveArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, value_delimiter = ',', required = true)]
    fractions: Vec<f64>,
    #[arg(long, value_delimiter = ',', required = true)]
    seeds: Vec<u64>,
    /// Adds a transfer variant initialized from this checkpoint.
    #[arg(long)]
    source: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct VocabArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value_t = 400)]
    size: usize,
    #[arg(long)]
    out: PathBuf,
}

/// Parses `argv` and runs the subcommand. Returns 0 on success, 1 on usage
/// errors and 2 on data or config errors.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    }
}

fn exit_code(e: &anyhow::Error) -> i32 {
    match e.downcast_ref::<Error>() {
        Some(Error::Usage(_)) => 1,
        _ => 2,
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Ingest(a) => ingest(a),
        Command::Synth(a) => synth(a),
        Command::Augment(a) => augment_cmd(a),
        Command::ExportMt(a) => export_mt(a),
        Command::ImportMt(a) => import_mt(a),
        Command::Train(a) => train_cmd(&a.config, a.out, a.seed, None),
        Command::TransferTrain(a) => train_cmd(&a.config, a.out, a.seed, Some(a.source)),
        Command::Eval(a) => eval_cmd(a),
        Command::Ensemble(a) => ensemble_cmd(a),
        Command::Curve(a) => curve_cmd(a),
        Command::Vocab(a) => vocab_cmd(a),
    }
}

#[derive(Serialize)]
struct Resolved<'a, T: Serialize> {
    command: &'a str,
    #[serde(flatten)]
    args: &'a T,
}

fn write_resolved<T: Serialize>(dir: &Path, command: &str, args: &T) -> Result<()> {
    write_json(&dir.join("resolved_config.json"), &Resolved { command, args })
}

/// Refuses to write `target` when it is one of the inputs.
fn guard(target: &Path, inputs: &[&Path]) -> Result<()> {
    let canon = |p: &Path| p.canonicalize().ok();
    if let Some(t) = canon(target) {
        if inputs.iter().any(|i| canon(i).as_ref() == Some(&t)) {
            bail!(Error::Usage(format!("refusing to overwrite input file {}", target.display())));
        }
    }
    Ok(())
}

fn ingest(a: IngestArgs) -> Result<()> {
    let split = load_comve(&a.task_a, a.task_b.as_deref(), a.split.into())?;
    ensure_dir(&a.out)?;
    let target = a.out.join(format!("{}.jsonl", SplitName::from(a.split).as_str()));
    let mut inputs = vec![a.task_a.as_path()];
    inputs.extend(a.task_b.as_deref());
    guard(&target, &inputs)?;
    save_split(&target, &split)?;
    write_resolved(&a.out, "ingest", &a)?;
    eprintln!("wrote {} instances to {}", split.len(), target.display());
    Ok(())
}

fn synth(mut a: SynthArgs) -> Result<()> {
    let seed = resolve_seed(a.seed, 0)?;
    a.seed = Some(seed);
    let lexicon: SyntheticLexicon = match &a.lexicon {
        Some(p) => crate::io::read_json(p)?,
        None => SyntheticLexicon::default(),
    };
    let held_out = (a.n / 10).max(1);
    let sizes = [
        (SplitName::Train, a.n),
        (SplitName::Dev, a.dev_n.unwrap_or(held_out)),
        (SplitName::Test, a.test_n.unwrap_or(held_out)),
    ];
    ensure_dir(&a.out)?;
    for (stream, (name, n)) in sizes.into_iter().enumerate() {
        let split = generate_synthetic(n, derive_seed(seed, stream as u64), &lexicon, a.hint_signal, name)?;
        save_split(&a.out.join(format!("{}.jsonl", name.as_str())), &split)?;
    }
    write_resolved(&a.out, "synth", &a)
}

fn load_train_split(path: &Path) -> Result<DatasetSplit> {
    load_split(path, split_name_of(path))
}

fn augment_cmd(mut a: AugmentArgs) -> Result<()> {
    let seed = resolve_seed(a.seed, 0)?;
    a.seed = Some(seed);
    let split = load_train_split(&a.input)?;
    let records = a.translations.as_deref().map(read_translations).transpose()?;
    let augmenter = match &records {
        Some(r) => Augmenter::RoundTrip(r),
        None => Augmenter::Paraphrase,
    };
    let out = augment(&split, augmenter, seed)?;
    ensure_dir(&a.out)?;
    let target = a.out.join("train_augmented.jsonl");
    guard(&target, &[&a.input])?;
    save_split(&target, &out)?;
    write_resolved(&a.out, "augment", &a)
}

fn export_mt(a: ExportArgs) -> Result<()> {
    let split = load_train_split(&a.input)?;
    ensure_dir(&a.out)?;
    let target = a.out.join("translation_requests.jsonl");
    guard(&target, &[&a.input])?;
    write_jsonl(&target, &export_for_translation(&split))?;
    write_resolved(&a.out, "export-mt", &a)
}

fn import_mt(a: ImportArgs) -> Result<()> {
    let split = load_train_split(&a.input)?;
    let out = import_translations(&split, &read_translations(&a.translations)?)?;
    ensure_dir(&a.out)?;
    let stem = a.input.file_stem().and_then(|s| s.to_str()).unwrap_or("split");
    let target = a.out.join(format!("{stem}_mt.jsonl"));
    guard(&target, &[&a.input, &a.translations])?;
    save_split(&target, &out)?;
    write_resolved(&a.out, "import-mt", &a)
}

/// Loads the splits named in `cfg`.
pub struct LoadedData {
    pub train: DatasetSplit,
    pub dev: DatasetSplit,
    pub test: Option<DatasetSplit>,
}

impl LoadedData {
    pub fn load(cfg: &RunConfig) -> Result<Self> {
        Ok(Self {
            train: load_split(&cfg.data.train, SplitName::Train)?,
            dev: load_split(&cfg.data.dev, SplitName::Dev)?,
            test: cfg.data.test.as_deref().map(|p| load_split(p, SplitName::Test)).transpose()?,
        })
    }

    pub fn view(&self) -> TrainData<'_> {
        TrainData {
            train: &self.train,
            dev: &self.dev,
            test: self.test.as_ref(),
        }
    }
}

/// Fills in everything a run leaves implicit: seed, output directory,
/// vocabulary and the encoder's embedding count.
fn resolve_run(
    config: &Path,
    out: Option<PathBuf>,
    seed: Option<u64>,
    source: Option<&Path>,
) -> Result<(RunConfig, PathBuf, comve_core::tokenizer::Vocab, LoadedData)> {
    let mut cfg = RunConfig::load(config)?;
    cfg.train.seed = resolve_seed(seed, cfg.train.seed)?;
    let out = match out.or_else(|| cfg.out.clone()) {
        Some(o) => o,
        None => bail!(Error::Usage("no output directory: pass --out or set \"out\" in the config".into())),
    };
    cfg.out = Some(out.clone());
    let data = LoadedData::load(&cfg)?;
    let vocab = match (source, &cfg.vocab) {
        (Some(src), _) => {
            cfg.train.init = InitSpec::Transfer(src.display().to_string());
            load_checkpoint(src)?.vocab
        }
        (None, Some(path)) => load_vocab(path)?,
        (None, None) => build_vocab(&data.train, cfg.vocab_size)?,
    };
    cfg.train.model.encoder.vocab_size = vocab.len();
    Ok((cfg, out, vocab, data))
}

fn train_cmd(config: &Path, out: Option<PathBuf>, seed: Option<u64>, source: Option<PathBuf>) -> Result<()> {
    let (cfg, out, vocab, data) = resolve_run(config, out, seed, source.as_deref())?;
    if source.is_none() {
        if let InitSpec::Transfer(path) = &cfg.train.init {
            // A config may name its own source checkpoint.
            let path = PathBuf::from(path);
            return train_cmd(config, Some(out), Some(cfg.train.seed), Some(path));
        }
    }
    let model = match &source {
        Some(src) => {
            let ckpt = load_checkpoint(src)?;
            transfer_init(&ckpt, cfg.train.task, &cfg.train.model, cfg.train.seed)?
        }
        None => fresh_model(&cfg.train, vocab.clone())?,
    };
    ensure_dir(&out)?;
    write_json(&out.join("resolved_config.json"), &cfg)?;
    save_vocab(&out, &vocab)?;
    let outcome = run_training(&cfg.train, model, &data)?;
    save_checkpoint(&out.join("best.ckpt"), &outcome.checkpoint)?;
    emit_metrics(&outcome.history, cfg.train.task, cfg.train.seed, &out)?;
    eprintln!(
        "best dev accuracy {:.4} at step {}",
        outcome.history.best_dev_accuracy, outcome.history.best_step
    );
    Ok(())
}

fn run_training(cfg: &TrainConfig, model: comve_core::models::ComveModel, data: &LoadedData) -> Result<TrainOutcome> {
    let mut log = |r: &comve_core::train::EvalRecord| {
        eprintln!("step {:>6}  loss {:.4}  dev {:.4}", r.step, r.train_loss, r.dev_accuracy)
    };
    Ok(train(cfg, model, &data.view(), Some(&mut log))?)
}

#[derive(Serialize)]
struct AccuracyReport {
    accuracy: f64,
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let model = load_checkpoint(&a.ckpt)?.to_model()?;
    let split = load_split(&a.split, split_name_of(&a.split))?;
    require_labels(model.task, &split)?;
    let ev = evaluate(&model, &split, !a.no_hint)?;
    let report = serde_json::to_string(&AccuracyReport { accuracy: ev.accuracy })?;
    println!("{report}");
    if let Some(out) = &a.out {
        ensure_dir(out)?;
        write_jsonl(&out.join("predictions.jsonl"), &ev.predictions)?;
        write_json(&out.join("eval.json"), &AccuracyReport { accuracy: ev.accuracy })?;
        write_resolved(out, "eval", &a)?;
    }
    Ok(())
}

fn require_labels(task: Task, split: &DatasetSplit) -> Result<()> {
    if let Some(i) = split.instances().iter().find(|i| gold_label(task, i).is_none()) {
        bail!(Error::Config(format!("instance {} has no {} label", i.id, task.name())));
    }
    Ok(())
}

#[derive(Serialize)]
struct EnsembleReport {
    accuracy: f64,
    member_accuracies: Vec<f64>,
}

#[derive(Serialize)]
struct Vote<'a> {
    id: &'a str,
    predicted: usize,
}

fn ensemble_cmd(a: EnsembleArgs) -> Result<()> {
    let split = load_split(&a.split, split_name_of(&a.split))?;
    let members = a
        .ckpts
        .iter()
        .map(|p| Ok(load_checkpoint(p)?.to_model()?))
        .collect::<Result<Vec<_>>>()?;
    let task = members[0].task;
    if members.iter().any(|m| m.task != task) {
        bail!(Error::Config("ensemble members must share one task".into()));
    }
    require_labels(task, &split)?;
    let evals = parallel_map(a.jobs, &members, |m| evaluate(m, &split, !a.no_hint))
        .into_iter()
        .collect::<comve_core::Result<Vec<_>>>()?;
    let preds: Vec<_> = evals.iter().map(|e| e.predictions.clone()).collect();
    let votes = ensemble_predict(&preds)?;
    let correct = votes
        .iter()
        .zip(split.instances())
        .filter(|((_, v), inst)| gold_label(task, inst) == Some(*v))
        .count();
    let report = EnsembleReport {
        accuracy: correct as f64 / split.len() as f64,
        member_accuracies: evals.iter().map(|e| e.accuracy).collect(),
    };
    println!("{}", serde_json::to_string(&report)?);
    if let Some(out) = &a.out {
        ensure_dir(out)?;
        let rows: Vec<Vote> = votes.iter().map(|(id, p)| Vote { id, predicted: *p }).collect();
        write_jsonl(&out.join("ensemble_predictions.jsonl"), &rows)?;
        write_json(&out.join("ensemble.json"), &report)?;
        write_resolved(out, "ensemble", &a)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct ResolvedCurve<'a> {
    run: &'a RunConfig,
    fractions: &'a [f64],
    seeds: &'a [u64],
    source: Option<&'a Path>,
}

fn curve_cmd(a: CurveArgs) -> Result<()> {
    if let Some(f) = a.fractions.iter().find(|&&f| !(f > 0.0 && f <= 1.0)) {
        bail!(Error::Usage(format!("fraction {f} outside (0, 1]")));
    }
    // With a source checkpoint both variants use its vocabulary so that
    // only the initialization differs.
    let (cfg, out, vocab, data) = resolve_run(&a.config, a.out.clone(), None, a.source.as_deref())?;
    let source = a.source.as_deref().map(load_checkpoint).transpose()?;
    let base = TrainConfig {
        init: InitSpec::Fresh,
        ..cfg.train.clone()
    };
    let mut points = Vec::new();
    for &f in &a.fractions {
        for &s in &a.seeds {
            points.push((f, s, false));
            if source.is_some() {
                points.push((f, s, true));
            }
        }
    }
    let view = data.view();
    let rows = parallel_map(a.jobs, &points, |&(f, s, transfer)| {
        let src = if transfer { source.as_ref() } else { None };
        curve_point(&base, &vocab, &view, f, s, src)
    })
    .into_iter()
    .collect::<comve_core::Result<Vec<CurveRow>>>()?;
    ensure_dir(&out)?;
    write_curve(&out.join("curve.csv"), &rows)?;
    write_json(
        &out.join("resolved_config.json"),
        &ResolvedCurve {
            run: &cfg,
            fractions: &a.fractions,
            seeds: &a.seeds,
            source: a.source.as_deref(),
        },
    )
}

fn vocab_cmd(a: VocabArgs) -> Result<()> {
    let split = load_train_split(&a.input)?;
    let vocab = build_vocab(&split, a.size)?;
    ensure_dir(&a.out)?;
    save_vocab(&a.out, &vocab)?;
    write_resolved(&a.out, "vocab", &a)?;
    eprintln!("{} entries, {} merges", vocab.len(), vocab.merge_count());
    Ok(())
}

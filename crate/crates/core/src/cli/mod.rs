//! The `equiscale` command line.

pub mod config;
pub mod plot;

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};

use crate::cipher::{build_dataset_with, hash64, CipherDataset, Split};
use crate::error::{Error, Result};
use crate::neural::checkpoint::Checkpoint;
use crate::neural::train::{read_metrics_csv, train_with, write_metrics_csv};
use crate::neural::TrainRecord;
use crate::ngram::{reference_model, NGramModel};
use crate::scale::{
    equivariance_residual, hallucination_scale, non_invariance_check, one_hot_rows, report_from,
    NeuralModel, ScaleReport,
};
use crate::scaling::{
    extrapolate_x_for_loss, fit_power_law, read_results_csv, run_sweep, write_results_csv,
    ScalingPoint, SweepAxis, SweepManifest,
};
use crate::solvers::{frequency_decipher, hillclimb_decipher, SolverReport};
use crate::textcorpus::{normalize_corpus, synth_corpus, NormalizedLine, Vocab};
use config::{
    env_assignments, parse_assignment, read_config_file, resolve, sha256_hex, CheckpointChoice,
    RunConfig, SolverKind,
};

#[derive(Debug, Parser)]
#[command(name = "equiscale", version, about = "Substitution-cipher decipherment as a hallucination scale")]
pub struct Cli {
    /// TOML or JSON run configuration.
    #[arg(long, global = true, env = "EQUISCALE_CONFIG")]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, env = "EQUISCALE_SEED")]
    pub seed: Option<u64>,
    #[arg(long, global = true, env = "EQUISCALE_OUT_DIR")]
    pub out_dir: Option<PathBuf>,
    /// Upper bound on concurrent sweep runs.
    #[arg(long, global = true, env = "EQUISCALE_JOBS")]
    pub jobs: Option<usize>,
    /// Override any config key, e.g. `--set train.epochs=3`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Normalize a text file, or sample a synthetic corpus.
    Corpus(CorpusArgs),
    /// Build the train and test cipher datasets as JSONL.
    Dataset,
    /// Train the transformer decipherer.
    Train(TrainArgs),
    /// Hallucination scale and equivariance checks of a checkpoint.
    Eval(EvalArgs),
    /// Run a classical solver over the test set.
    Baseline(BaselineArgs),
    /// Train one model per sweep value and fit a power law.
    Sweep(SweepArgs),
    /// Render a metrics or sweep CSV as SVG.
    Plot(PlotArgs),
}

#[derive(Debug, Args)]
pub struct CorpusArgs {
    /// Raw text, one example per line. Omit to sample synthetic text.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Number of synthetic lines.
    #[arg(long, default_value_t = 4096)]
    pub lines: usize,
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Continue from the last checkpoint in the output directory.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Defaults to the best or last checkpoint of `train`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub which: Option<CheckpointChoice>,
}

#[derive(Debug, Args)]
pub struct BaselineArgs {
    #[arg(long)]
    pub solver: Option<SolverKind>,
    #[arg(long)]
    pub limit: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub axis: Option<SweepAxis>,
    /// Comma-separated sweep values.
    #[arg(long, value_delimiter = ',')]
    pub values: Option<Vec<usize>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum PlotKind {
    LossCurve,
    Loglog,
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub kind: PlotKind,
    /// Defaults to the input path with an `.svg` extension.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

fn flag<T: Serialize>(path: &str, v: T) -> (Vec<String>, Value) {
    (
        path.split('.').map(str::to_string).collect(),
        serde_json::to_value(v).expect("flag values serialize"),
    )
}

/// Resolves the configuration for a parsed command line.
pub fn resolve_config(cli: &Cli, env: Vec<(String, String)>) -> Result<RunConfig> {
    let file = cli.config.as_deref().map(read_config_file).transpose()?;
    let mut flags = Vec::new();
    for s in &cli.set {
        flags.push(parse_assignment(s)?);
    }
    if let Some(s) = cli.seed {
        flags.push(flag("seed", s));
    }
    if let Some(d) = &cli.out_dir {
        flags.push(flag("out_dir", d));
    }
    if let Some(j) = cli.jobs {
        flags.push(flag("jobs", j));
    }
    match &cli.command {
        Command::Train(a) => {
            if let Some(e) = a.epochs {
                flags.push(flag("train.epochs", e));
            }
            if let Some(lr) = a.lr {
                flags.push(flag("train.lr", lr));
            }
        }
        Command::Eval(a) => {
            if let Some(w) = a.which {
                flags.push(flag("eval.checkpoint", w));
            }
        }
        Command::Baseline(a) => {
            if let Some(s) = a.solver {
                flags.push(flag("solver.kind", s));
            }
            if let Some(l) = a.limit {
                flags.push(flag("solver.limit", l));
            }
        }
        Command::Sweep(a) => {
            if let Some(axis) = a.axis {
                flags.push(flag("sweep.axis", axis));
            }
            if let Some(v) = &a.values {
                flags.push(flag("sweep.values", v));
            }
        }
        _ => {}
    }
    resolve(file, env_assignments(env), flags)
}

impl clap::ValueEnum for SweepAxis {
    fn value_variants<'a>() -> &'a [Self] {
        &[SweepAxis::Params, SweepAxis::Dataset]
    }

    fn to_possible_value(&self) -> Option<clap::builder::PossibleValue> {
        Some(clap::builder::PossibleValue::new(match self {
            SweepAxis::Params => "params",
            SweepAxis::Dataset => "dataset",
        }))
    }
}

/// Writes via a temporary file so readers never see a partial artifact.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("part");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Collects the files a command wrote and records them, with the config and
/// its digest, in `run.json` next to them.
struct Artifacts {
    command: &'static str,
    dir: PathBuf,
    files: Vec<(PathBuf, String)>,
}

impl Artifacts {
    fn new(cfg: &RunConfig, command: &'static str) -> Self {
        Self {
            command,
            dir: cfg.out_dir.join(command),
            files: Vec::new(),
        }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn write(&mut self, path: &Path, bytes: &[u8]) -> Result<()> {
        write_atomic(path, bytes)?;
        self.record(path)
    }

    /// Re-reads a written file so the manifest hash is of what is on disk.
    fn record(&mut self, path: &Path) -> Result<()> {
        let hash = sha256_hex(&fs::read(path)?);
        self.files.retain(|(p, _)| p != path);
        self.files.push((path.to_path_buf(), hash));
        Ok(())
    }

    fn finish(self, cfg: &RunConfig) -> Result<()> {
        let manifest = json!({
            "command": self.command,
            "config_digest": cfg.digest(),
            "config": cfg,
            "artifacts": self.files.iter().map(|(p, h)| json!({
                "path": p.display().to_string(),
                "sha256": h,
            })).collect::<Vec<_>>(),
        });
        write_atomic(
            &self.dir.join("run.json"),
            &serde_json::to_vec_pretty(&manifest)?,
        )
    }
}

/// Test lines and a pool of at least `n_train` training lines. A corpus
/// file supplies its first `test_lines` lines as the test split and the
/// following lines for training; otherwise both are sampled.
pub fn load_corpora(cfg: &RunConfig, n_train: usize) -> Result<(Vec<NormalizedLine>, Vec<NormalizedLine>)> {
    let n_test = cfg.dataset.test_lines;
    match &cfg.corpus.path {
        Some(path) => {
            let lines = normalize_corpus(&fs::read_to_string(path)?);
            if lines.len() < n_test + n_train {
                return Err(Error::InvalidConfig(format!(
                    "{} has {} lines, need {} test + {} train",
                    path.display(),
                    lines.len(),
                    n_test,
                    n_train
                )));
            }
            let test = lines[..n_test].to_vec();
            let train = lines[n_test..n_test + n_train].to_vec();
            Ok((train, test))
        }
        None => {
            let lm = reference_model(cfg.corpus.lm_order, cfg.corpus.lm_k)?;
            let train = synth_corpus(hash64(&[cfg.seed, 1]), n_train, &lm);
            let test = synth_corpus(hash64(&[cfg.seed, 2]), n_test, &lm);
            Ok((train, test))
        }
    }
}

pub fn build_datasets(cfg: &RunConfig) -> Result<(CipherDataset, CipherDataset, Vec<NormalizedLine>)> {
    let (train_lines, test_lines) =
        load_corpora(cfg, cfg.dataset.train_lines * cfg.dataset.multiplier)?;
    let vocab = Vocab::new();
    let opts = cfg.dataset.options();
    let train = build_dataset_with(&train_lines, &vocab, cfg.seed, Split::Train, &opts)?;
    let test = build_dataset_with(&test_lines, &vocab, cfg.seed, Split::Test, &opts)?;
    Ok((train, test, train_lines))
}

fn cmd_corpus(cfg: &RunConfig, args: &CorpusArgs) -> Result<()> {
    let lines = match &args.input {
        Some(path) => {
            let raw = fs::read_to_string(path)?;
            if raw.trim().is_empty() {
                return Err(Error::EmptyCorpus);
            }
            normalize_corpus(&raw)
        }
        None => {
            if args.lines == 0 {
                return Err(Error::EmptyCorpus);
            }
            let lm = reference_model(cfg.corpus.lm_order, cfg.corpus.lm_k)?;
            synth_corpus(cfg.seed, args.lines, &lm)
        }
    };
    let mut text = String::new();
    for line in &lines {
        text.push_str(line.text());
        text.push('\n');
    }
    let mut art = Artifacts::new(cfg, "corpus");
    let out = args.output.clone().unwrap_or_else(|| art.path("corpus.txt"));
    art.write(&out, text.as_bytes())?;
    let chars: usize = lines.iter().map(NormalizedLine::len).sum();
    println!(
        "lines: {}  characters: {}  sha256: {}",
        lines.len(),
        chars,
        sha256_hex(text.as_bytes())
    );
    println!("wrote {}", out.display());
    art.finish(cfg)
}

fn cmd_dataset(cfg: &RunConfig) -> Result<()> {
    let (train, test, _) = build_datasets(cfg)?;
    let mut art = Artifacts::new(cfg, "dataset");
    for (name, ds) in [("train.jsonl", &train), ("test.jsonl", &test)] {
        let bytes = ds.to_jsonl_bytes();
        let path = art.path(name);
        art.write(&path, &bytes)?;
        println!("{}: {} examples  sha256: {}", path.display(), ds.len(), sha256_hex(&bytes));
    }
    art.finish(cfg)
}

fn metrics_bytes(history: &[TrainRecord]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    write_metrics_csv(&mut buf, history)?;
    Ok(buf)
}

fn cmd_train(cfg: &RunConfig, args: &TrainArgs) -> Result<()> {
    let (train, test, _) = build_datasets(cfg)?;
    let model = cfg.model_config();
    let mut art = Artifacts::new(cfg, "train");
    let ckpt_dir = art.path("checkpoints");
    let metrics = art.path("metrics.csv");
    let mut opts = cfg.train_options();
    opts.checkpoint_dir = Some(ckpt_dir.clone());
    let last = ckpt_dir.join("last.ckpt");
    let resume = if args.resume && last.exists() {
        let ck = Checkpoint::load(&last)?;
        println!("resuming after epoch {}", ck.epoch);
        Some(ck)
    } else {
        None
    };
    let mut history: Vec<TrainRecord> = resume
        .as_ref()
        .and_then(|ck| ck.state.as_ref())
        .map(|s| s.history.clone())
        .unwrap_or_default();
    println!(
        "training d_model={} on {} examples, testing on {}",
        model.d_model,
        train.len(),
        test.len()
    );
    let mut write_err = None;
    let out = train_with(&model, &train, &test, &opts, resume, &mut |r, _| {
        println!(
            "epoch {:>3}  train {:.4}  test {:.4}  {:.1}s",
            r.epoch, r.train_loss, r.test_loss, r.wall_time_s
        );
        history.push(*r);
        if let Err(e) = metrics_bytes(&history).and_then(|b| write_atomic(&metrics, &b)) {
            write_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = write_err {
        return Err(e);
    }
    art.write(&metrics, &metrics_bytes(&out.history)?)?;
    for name in ["last.ckpt", "best.ckpt"] {
        let p = ckpt_dir.join(name);
        if p.exists() {
            Checkpoint::load(&p)?;
            art.record(&p)?;
        }
    }
    println!(
        "initial test loss {:.4}, best {:.4} at epoch {}",
        out.initial_test_loss, out.best_test_loss, out.best_epoch
    );
    art.finish(cfg)
}

fn cmd_eval(cfg: &RunConfig, args: &EvalArgs) -> Result<()> {
    let path = args.checkpoint.clone().unwrap_or_else(|| {
        let name = match cfg.eval.checkpoint {
            CheckpointChoice::Best => "best.ckpt",
            CheckpointChoice::Last => "last.ckpt",
        };
        cfg.out_dir.join("train").join("checkpoints").join(name)
    });
    let ck = Checkpoint::load(&path)?;
    let (_, test, _) = build_datasets(cfg)?;
    let model = NeuralModel { params: ck.params };
    let report = hallucination_scale(&model, &test)?;
    let residual = equivariance_residual(&model, &test, cfg.eval.n_probes, cfg.seed)?;
    let non_inv = non_invariance_check(&model, &test, cfg.eval.n_probes, cfg.seed)?;
    println!(
        "mean_ce {:.4}  symbol_accuracy {:.4}  exact_match {:.4}  equivariance_residual {:.4}  non_invariance {:.4}",
        report.mean_ce, report.symbol_accuracy, report.exact_match, residual, non_inv
    );
    let mut art = Artifacts::new(cfg, "eval");
    let doc = json!({
        "checkpoint": path.display().to_string(),
        "epoch": ck.epoch,
        "mean_ce": report.mean_ce,
        "symbol_accuracy": report.symbol_accuracy,
        "exact_match": report.exact_match,
        "n_examples": report.n_examples,
        "equivariance_residual": residual,
        "non_invariance": non_inv,
        "n_probes": cfg.eval.n_probes,
        "config_digest": cfg.digest(),
    });
    let report_path = art.path("scale.json");
    art.write(&report_path, &serde_json::to_vec_pretty(&doc)?)?;

    let csv_path = art.path("scale.csv");
    let mut rows = String::new();
    if csv_path.exists() {
        rows = fs::read_to_string(&csv_path)?;
    } else {
        rows.push_str("epoch,mean_ce,symbol_accuracy,exact_match,equivariance_residual,non_invariance,config_digest\n");
    }
    rows.push_str(&format!(
        "{},{},{},{},{},{},{}\n",
        ck.epoch,
        report.mean_ce,
        report.symbol_accuracy,
        report.exact_match,
        residual,
        non_inv,
        cfg.digest()
    ));
    art.write(&csv_path, rows.as_bytes())?;
    art.finish(cfg)
}

#[derive(Serialize)]
struct BaselineReport<'a> {
    solver: SolverKind,
    config_digest: String,
    symbol_accuracy: f64,
    scale: ScaleReport,
    examples: &'a [SolverReport],
}

fn cmd_baseline(cfg: &RunConfig) -> Result<()> {
    let (_, test, train_lines) = build_datasets(cfg)?;
    let lm = NGramModel::fit(&train_lines, cfg.solver.lm_order, cfg.solver.lm_k)?;
    let unigrams = lm.unigram();
    let n = cfg.solver.limit.unwrap_or(test.len()).min(test.len());
    let examples = &test.examples[..n];
    let opts = cfg.hillclimb_options();
    let alphabet = lm.alphabet().to_vec();
    let mut reports = Vec::with_capacity(n);
    let mut scored = Vec::with_capacity(n);
    let name = match cfg.solver.kind {
        SolverKind::Frequency => "frequency",
        SolverKind::Hillclimb => "hillclimb",
    };
    for ex in examples {
        let c = std::slice::from_ref(&ex.ciphertext);
        let result = match cfg.solver.kind {
            SolverKind::Frequency => frequency_decipher(c, &unigrams),
            SolverKind::Hillclimb => hillclimb_decipher(c, &lm, &opts)?,
        };
        reports.push(SolverReport::new(name, &result, Some((&ex.decode_target, &alphabet))));
        scored.push((result.decode_map, one_hot_rows(&result.decode_map, cfg.solver.epsilon)));
    }
    let scale = report_from(examples, &scored, Some(cfg.solver.epsilon))?;
    println!(
        "{name}: {} examples  symbol_accuracy {:.4}  exact_match {:.4}  mean_ce {:.4}",
        n, scale.symbol_accuracy, scale.exact_match, scale.mean_ce
    );
    let doc = BaselineReport {
        solver: cfg.solver.kind,
        config_digest: cfg.digest(),
        symbol_accuracy: scale.symbol_accuracy,
        scale,
        examples: &reports,
    };
    let mut art = Artifacts::new(cfg, "baseline");
    let path = art.path(&format!("{name}.json"));
    art.write(&path, &serde_json::to_vec_pretty(&doc)?)?;
    art.finish(cfg)
}

fn cmd_sweep(cfg: &RunConfig) -> Result<()> {
    let mut train = cfg.train_options();
    let mut art = Artifacts::new(cfg, "sweep");
    train.checkpoint_dir = Some(art.path("runs"));
    let manifest = SweepManifest {
        axis: cfg.sweep.axis,
        values: cfg.sweep.values.clone(),
        base_model: cfg.model_config(),
        train,
        lines_per_unit: cfg.dataset.train_lines,
        fixed_multiplier: cfg.sweep.fixed_multiplier,
        dataset_seed: cfg.seed,
    };
    manifest.plan()?;
    let max_mult = match cfg.sweep.axis {
        SweepAxis::Params => cfg.sweep.fixed_multiplier,
        SweepAxis::Dataset => *cfg.sweep.values.iter().max().expect("validated non-empty"),
    };
    let (pool, test_lines) = load_corpora(cfg, cfg.dataset.train_lines * max_mult)?;
    let test = build_dataset_with(&test_lines, &Vocab::new(), cfg.seed, Split::Test, &cfg.dataset.options())?;
    let manifest_doc = json!({ "manifest": manifest, "config_digest": cfg.digest() });
    let manifest_path = art.path("manifest.json");
    art.write(&manifest_path, &serde_json::to_vec_pretty(&manifest_doc)?)?;

    let rows = run_sweep(&manifest, &pool, &test, cfg.jobs, &|r| {
        println!(
            "{}: x={} min test loss {:.4} after {} epochs ({:.1}s)",
            r.run_id, r.x, r.y, r.epochs, r.wall_time_s
        );
    })?;
    let mut csv = Vec::new();
    write_results_csv(&mut csv, &rows)?;
    let results_path = art.path("results.csv");
    art.write(&results_path, &csv)?;

    if rows.len() >= 2 {
        let points: Vec<ScalingPoint> = rows.iter().map(ScalingPoint::from).collect();
        let fit = fit_power_law(&points)?;
        let target = cfg.sweep.target_loss;
        let extrapolated = extrapolate_x_for_loss(&fit, target);
        let largest = points.iter().map(|p| p.x).fold(f64::NEG_INFINITY, f64::max);
        match &extrapolated {
            Ok(x) => println!(
                "fit: loss = {:.4} * x^{:.4} (r² {:.3}); loss {target} reached at x ≈ {x:.3e}",
                fit.a(),
                fit.b,
                fit.r2
            ),
            Err(e) => println!("fit: slope {:.4} (r² {:.3}); {e}", fit.b, fit.r2),
        }
        let doc = json!({
            "method": "ordinary least squares on log10(x), log10(y)",
            "fit": fit,
            "target_loss": target,
            "extrapolated_x": extrapolated.as_ref().ok(),
            "largest_swept_x": largest,
            "config_digest": cfg.digest(),
        });
        let fit_path = art.path("fit.json");
        art.write(&fit_path, &serde_json::to_vec_pretty(&doc)?)?;
    }
    art.finish(cfg)
}

fn cmd_plot(args: &PlotArgs) -> Result<()> {
    let bytes = fs::read(&args.input)?;
    let digest = sha256_hex(&bytes);
    let svg = match args.kind {
        PlotKind::LossCurve => plot::loss_curve_svg(&read_metrics_csv(&bytes[..])?, &digest)?,
        PlotKind::Loglog => {
            let rows = read_results_csv(&bytes[..])?;
            let label = if rows.iter().all(|r| r.run_id.starts_with("params")) {
                "parameters"
            } else if rows.iter().all(|r| r.run_id.starts_with("dataset")) {
                "training tokens"
            } else {
                "x"
            };
            let (svg, fit) = plot::loglog_svg(&rows, label, &digest)?;
            println!("slope {:.3}  r² {:.3}", fit.b, fit.r2);
            svg
        }
    };
    let out = args.output.clone().unwrap_or_else(|| args.input.with_extension("svg"));
    write_atomic(&out, svg.as_bytes())?;
    println!("wrote {}", out.display());
    Ok(())
}

/// Runs one command line; `env` supplies the `EQUISCALE__*` overrides.
pub fn run_with_env<I, T>(args: I, env: Vec<(String, String)>) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    execute(&cli, env)
}

pub fn execute(cli: &Cli, env: Vec<(String, String)>) -> Result<()> {
    let cfg = resolve_config(cli, env)?;
    println!("config digest: {}", cfg.digest());
    match &cli.command {
        Command::Corpus(a) => cmd_corpus(&cfg, a),
        Command::Dataset => cmd_dataset(&cfg),
        Command::Train(a) => cmd_train(&cfg, a),
        Command::Eval(a) => cmd_eval(&cfg, a),
        Command::Baseline(_) => cmd_baseline(&cfg),
        Command::Sweep(_) => cmd_sweep(&cfg),
        Command::Plot(a) => cmd_plot(a),
    }
}

/// Process exit status for an error: 2 for configuration and usage
/// problems, 1 for everything else.
pub fn exit_code(err: &Error) -> u8 {
    match err {
        Error::InvalidConfig(_) => 2,
        _ => 1,
    }
}

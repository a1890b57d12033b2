//! Run configuration: defaults, overlaid by a TOML or JSON file, then by
//! `EQUISCALE__SECTION__KEY` environment variables, then by flags. The
//! digest is the SHA-256 of the merged configuration's canonical JSON.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::cipher::DatasetOptions;
use crate::error::{Error, Result};
use crate::neural::{AdamConfig, ModelConfig, TrainOptions};
use crate::scaling::SweepAxis;
use crate::solvers::HillClimbOptions;
use crate::textcorpus::MAX_SEQ_LEN;

pub const ENV_PREFIX: &str = "EQUISCALE__";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Seeds corpus synthesis, dataset permutations, initialization and
    /// shuffling.
    pub seed: u64,
    pub out_dir: PathBuf,
    pub jobs: usize,
    pub corpus: CorpusConfig,
    pub dataset: DatasetConfig,
    pub model: ModelSection,
    pub train: TrainSection,
    pub solver: SolverSection,
    pub eval: EvalSection,
    pub sweep: SweepSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("out"),
            jobs: 1,
            corpus: CorpusConfig::default(),
            dataset: DatasetConfig::default(),
            model: ModelSection::default(),
            train: TrainSection::default(),
            solver: SolverSection::default(),
            eval: EvalSection::default(),
            sweep: SweepSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    /// Normalized text, one line per example. Without it a synthetic corpus
    /// is sampled from the bundled reference model.
    pub path: Option<PathBuf>,
    pub lm_order: usize,
    pub lm_k: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            path: None,
            lm_order: 3,
            lm_k: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    /// Training lines per unit of `multiplier`.
    pub train_lines: usize,
    pub test_lines: usize,
    pub multiplier: usize,
    pub pin_space: bool,
    pub max_len: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            train_lines: 4096,
            test_lines: 512,
            multiplier: 1,
            pin_space: false,
            max_len: MAX_SEQ_LEN,
        }
    }
}

impl DatasetConfig {
    pub fn options(&self) -> DatasetOptions {
        DatasetOptions {
            pin_space: self.pin_space,
            max_len: self.max_len,
            n_multiplier: self.multiplier as u32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub d_model: usize,
    pub n_layers_enc: usize,
    pub n_layers_dec: usize,
    pub n_heads: usize,
    pub d_ff: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            d_model: m.d_model,
            n_layers_enc: m.n_layers_enc,
            n_layers_dec: m.n_layers_dec,
            n_heads: m.n_heads,
            d_ff: m.d_ff,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub max_wall_time_s: Option<f64>,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainOptions::default();
        Self {
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr: t.adam.lr,
            beta1: t.adam.beta1,
            beta2: t.adam.beta2,
            eps: t.adam.eps,
            max_wall_time_s: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum SolverKind {
    Frequency,
    Hillclimb,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverSection {
    pub kind: SolverKind,
    pub iterations: usize,
    pub restarts: usize,
    pub lm_order: usize,
    pub lm_k: f64,
    pub epsilon: f64,
    /// Solve only the first this many test examples.
    pub limit: Option<usize>,
}

impl Default for SolverSection {
    fn default() -> Self {
        let h = HillClimbOptions::default();
        Self {
            kind: SolverKind::Frequency,
            iterations: h.iterations,
            restarts: h.restarts,
            lm_order: 3,
            lm_k: 0.5,
            epsilon: crate::scale::DEFAULT_EPSILON,
            limit: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum CheckpointChoice {
    Best,
    Last,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub n_probes: usize,
    pub checkpoint: CheckpointChoice,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            n_probes: 1000,
            checkpoint: CheckpointChoice::Best,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub axis: SweepAxis,
    pub values: Vec<usize>,
    /// Dataset multiplier held fixed on the params axis.
    pub fixed_multiplier: usize,
    /// Model width held fixed on the dataset axis is `model.d_model`.
    pub target_loss: f64,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            axis: SweepAxis::Params,
            values: vec![16, 32, 64, 128],
            fixed_multiplier: 1,
            target_loss: 0.1,
        }
    }
}

impl RunConfig {
    pub fn model_config(&self) -> ModelConfig {
        let m = &self.model;
        ModelConfig::new(m.d_model, m.n_layers_enc, m.n_layers_dec, m.n_heads, m.d_ff, self.seed)
    }

    pub fn train_options(&self) -> TrainOptions {
        let t = &self.train;
        TrainOptions {
            epochs: t.epochs,
            batch_size: t.batch_size,
            adam: AdamConfig {
                lr: t.lr,
                beta1: t.beta1,
                beta2: t.beta2,
                eps: t.eps,
            },
            shuffle_seed: self.seed,
            checkpoint_dir: None,
            max_wall_time_s: t.max_wall_time_s,
        }
    }

    pub fn hillclimb_options(&self) -> HillClimbOptions {
        HillClimbOptions {
            iterations: self.solver.iterations,
            restarts: self.solver.restarts,
            seed: self.seed,
            ..Default::default()
        }
    }

    /// Every violated constraint, reported together.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        let mut check = |ok: bool, msg: &str| {
            if !ok {
                problems.push(msg.to_string());
            }
        };
        check(self.jobs >= 1, "jobs must be >= 1");
        check((1..=3).contains(&self.corpus.lm_order), "corpus.lm_order must be 1, 2 or 3");
        check(self.corpus.lm_k > 0.0, "corpus.lm_k must be positive");
        check(self.dataset.train_lines >= 1, "dataset.train_lines must be >= 1");
        check(self.dataset.test_lines >= 1, "dataset.test_lines must be >= 1");
        check(self.dataset.multiplier >= 1, "dataset.multiplier must be >= 1");
        check(
            (2..=MAX_SEQ_LEN).contains(&self.dataset.max_len),
            "dataset.max_len must be in [2, 512]",
        );
        check(self.train.batch_size >= 1, "train.batch_size must be >= 1");
        check(self.train.lr > 0.0, "train.lr must be positive");
        check((0.0..1.0).contains(&self.train.beta1), "train.beta1 must be in [0, 1)");
        check((0.0..1.0).contains(&self.train.beta2), "train.beta2 must be in [0, 1)");
        check(self.train.eps > 0.0, "train.eps must be positive");
        check(
            self.train.max_wall_time_s.is_none_or(|t| t > 0.0),
            "train.max_wall_time_s must be positive",
        );
        check(self.solver.iterations >= 1, "solver.iterations must be >= 1");
        check(self.solver.restarts >= 1, "solver.restarts must be >= 1");
        check((2..=3).contains(&self.solver.lm_order), "solver.lm_order must be 2 or 3");
        check(self.solver.lm_k > 0.0, "solver.lm_k must be positive");
        check(
            self.solver.epsilon > 0.0 && self.solver.epsilon < 1.0,
            "solver.epsilon must be in (0, 1)",
        );
        check(self.eval.n_probes >= 1, "eval.n_probes must be >= 1");
        check(!self.sweep.values.is_empty(), "sweep.values must not be empty");
        check(self.sweep.fixed_multiplier >= 1, "sweep.fixed_multiplier must be >= 1");
        check(self.sweep.target_loss > 0.0, "sweep.target_loss must be positive");
        if let Err(Error::InvalidConfig(msg)) = self.model_config().validate() {
            problems.push(format!("model: {msg}"));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(problems.join("; ")))
        }
    }

    /// SHA-256 of the canonical JSON encoding, as lowercase hex. Settings
    /// that cannot change results (output directory, parallelism) are left
    /// out, so relocated or re-scheduled runs share a digest.
    pub fn digest(&self) -> String {
        let mut canonical = self.clone();
        canonical.out_dir = PathBuf::new();
        canonical.jobs = 1;
        let bytes = serde_json::to_vec(&canonical).expect("config serializes");
        hex(&Sha256::digest(&bytes))
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

/// Parses an override value: JSON when it parses, a bare string otherwise.
fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn set_path(root: &mut Value, path: &[String], value: Value) {
    let mut cur = root;
    for key in &path[..path.len() - 1] {
        if !cur.is_object() {
            *cur = Value::Object(Map::new());
        }
        cur = cur
            .as_object_mut()
            .expect("just made an object")
            .entry(key.clone())
            .or_insert_with(|| Value::Object(Map::new()));
    }
    if !cur.is_object() {
        *cur = Value::Object(Map::new());
    }
    cur.as_object_mut()
        .expect("just made an object")
        .insert(path[path.len() - 1].clone(), value);
}

/// Keys in `v` that the default layout does not have, as dotted paths.
fn unknown_keys(v: &Value, template: &Value, prefix: &str, out: &mut Vec<String>) {
    let (Value::Object(vo), Value::Object(to)) = (v, template) else {
        return;
    };
    for (k, child) in vo {
        let path = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        match to.get(k) {
            Some(t) => unknown_keys(child, t, &path, out),
            None => out.push(path),
        }
    }
}

pub fn read_config_file(path: &Path) -> Result<Value> {
    let text = std::fs::read_to_string(path)?;
    let is_json = path.extension().is_some_and(|e| e == "json");
    if is_json {
        Ok(serde_json::from_str(&text)?)
    } else {
        toml::from_str(&text)
            .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))
    }
}

/// `key.path=value` assignment from a flag.
pub fn parse_assignment(s: &str) -> Result<(Vec<String>, Value)> {
    let (key, raw) = s
        .split_once('=')
        .ok_or_else(|| Error::InvalidConfig(format!("expected key=value, got {s:?}")))?;
    let path: Vec<String> = key.trim().split('.').map(str::to_string).collect();
    if path.iter().any(String::is_empty) {
        return Err(Error::InvalidConfig(format!("bad key {key:?}")));
    }
    Ok((path, parse_value(raw.trim())))
}

/// Environment overrides: `EQUISCALE__TRAIN__EPOCHS=3` sets `train.epochs`.
pub fn env_assignments<I: IntoIterator<Item = (String, String)>>(vars: I) -> Vec<(Vec<String>, Value)> {
    let mut out: Vec<(Vec<String>, Value)> = vars
        .into_iter()
        .filter_map(|(k, v)| {
            let rest = k.strip_prefix(ENV_PREFIX)?;
            let path: Vec<String> = rest.split("__").map(|p| p.to_ascii_lowercase()).collect();
            (!path.iter().any(String::is_empty)).then(|| (path, parse_value(&v)))
        })
        .collect();
    out.sort_by(|a, b| a.0.cmp(&b.0));
    out
}

/// Merges the layers in precedence order and validates the result.
pub fn resolve(
    file: Option<Value>,
    env: Vec<(Vec<String>, Value)>,
    flags: Vec<(Vec<String>, Value)>,
) -> Result<RunConfig> {
    let template = serde_json::to_value(RunConfig::default())?;
    let mut merged = template.clone();
    if let Some(f) = file {
        merge(&mut merged, f);
    }
    for (path, v) in env.into_iter().chain(flags) {
        set_path(&mut merged, &path, v);
    }
    let mut unknown = Vec::new();
    unknown_keys(&merged, &template, "", &mut unknown);
    if !unknown.is_empty() {
        return Err(Error::InvalidConfig(format!("unknown keys: {}", unknown.join(", "))));
    }
    let cfg: RunConfig =
        serde_json::from_value(merged).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

use std::path::PathBuf;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::{Adam, AdamConfig};
use super::checkpoint::{Checkpoint, TrainState};
use super::config::ModelConfig;
use super::model::{batch_loss_and_grad, example_loss};
use super::params::{ModelParams, Scalar};
use crate::cipher::{hash64, CipherDataset};
use crate::error::{Error, Result};
use crate::textcorpus::VOCAB_SIZE;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub test_loss: f64,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Seeds the per-epoch shuffles.
    pub shuffle_seed: u64,
    /// When set, `last.ckpt` is written every epoch and `best.ckpt` whenever
    /// the test loss improves.
    pub checkpoint_dir: Option<PathBuf>,
    /// Stop after the first epoch that ends past this budget.
    pub max_wall_time_s: Option<f64>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 16,
            adam: AdamConfig::default(),
            shuffle_seed: 0,
            checkpoint_dir: None,
            max_wall_time_s: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub history: Vec<TrainRecord>,
    /// Test loss of the freshly initialized model.
    pub initial_test_loss: f64,
    pub params: ModelParams<f32>,
    pub best_params: ModelParams<f32>,
    pub best_test_loss: f64,
    /// 0 when no epoch improved on initialization.
    pub best_epoch: usize,
    pub optimizer: Adam<f32>,
}

impl TrainOutcome {
    /// Minimum test loss over the run, initialization included.
    pub fn min_test_loss(&self) -> f64 {
        self.best_test_loss
    }
}

/// Mean teacher-forced dictionary loss over a dataset, examples summed in order.
pub fn evaluate<F: Scalar>(params: &ModelParams<F>, data: &CipherDataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let total: f64 = data.examples.iter().map(|ex| example_loss(params, ex)).sum();
    Ok(total / data.len() as f64)
}

fn check_data(config: &ModelConfig, sets: &[&CipherDataset]) -> Result<()> {
    if config.vocab_size != VOCAB_SIZE {
        return Err(Error::InvalidConfig(format!(
            "model vocabulary {} does not match the {VOCAB_SIZE}-symbol dataset vocabulary",
            config.vocab_size
        )));
    }
    for set in sets {
        if set.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if let Some(ex) = set
            .examples
            .iter()
            .find(|ex| ex.ciphertext.len() > config.max_src_len)
        {
            return Err(Error::InvalidConfig(format!(
                "{} example of length {} exceeds max_src_len {}",
                set.split,
                ex.ciphertext.len(),
                config.max_src_len
            )));
        }
    }
    Ok(())
}

pub fn train(
    config: &ModelConfig,
    train_set: &CipherDataset,
    test_set: &CipherDataset,
    opts: &TrainOptions,
) -> Result<TrainOutcome> {
    train_with(config, train_set, test_set, opts, None, &mut |_, _| {})
}

/// Full training loop. `resume` continues from a checkpoint written by a
/// previous call with the same options; `on_epoch` sees every record.
pub fn train_with(
    config: &ModelConfig,
    train_set: &CipherDataset,
    test_set: &CipherDataset,
    opts: &TrainOptions,
    resume: Option<Checkpoint>,
    on_epoch: &mut dyn FnMut(&TrainRecord, &ModelParams<f32>),
) -> Result<TrainOutcome> {
    config.validate()?;
    check_data(config, &[train_set, test_set])?;
    if opts.batch_size == 0 {
        return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
    }

    let (mut params, mut optimizer, mut state) = match resume {
        Some(ck) => {
            if ck.params.config != *config {
                return Err(Error::Checkpoint("checkpoint config differs from run config".into()));
            }
            let opt = ck
                .optimizer
                .ok_or_else(|| Error::Checkpoint("checkpoint has no optimizer state".into()))?;
            let state = ck
                .state
                .ok_or_else(|| Error::Checkpoint("checkpoint has no training state".into()))?;
            (ck.params, opt, state)
        }
        None => {
            let params = ModelParams::<f32>::init(config)?;
            let initial = evaluate(&params, test_set)?;
            let opt = Adam::new(opts.adam, &params);
            let state = TrainState {
                history: Vec::new(),
                initial_test_loss: initial,
                best_test_loss: initial,
                best_epoch: 0,
            };
            (params, opt, state)
        }
    };
    let mut best_params = match (&opts.checkpoint_dir, state.best_epoch) {
        (Some(dir), e) if e > 0 && dir.join("best.ckpt").exists() => {
            Checkpoint::load(&dir.join("best.ckpt"))?.params
        }
        _ => params.clone(),
    };

    let start = Instant::now();
    let budget = opts.max_wall_time_s.map(Duration::from_secs_f64);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in state.history.len() + 1..=opts.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(hash64(&[opts.shuffle_seed, epoch as u64]));
        order.sort_unstable();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(opts.batch_size) {
            let batch: Vec<_> = chunk.iter().map(|&i| &train_set.examples[i]).collect();
            let (loss, grads) = batch_loss_and_grad(&params, &batch);
            loss_sum += loss * batch.len() as f64;
            optimizer.update(&mut params, &grads);
        }
        if !params.all_finite() {
            return Err(Error::InvalidConfig(format!(
                "non-finite parameters after epoch {epoch}"
            )));
        }
        let test_loss = evaluate(&params, test_set)?;
        let record = TrainRecord {
            epoch,
            train_loss: loss_sum / train_set.len() as f64,
            test_loss,
            wall_time_s: start.elapsed().as_secs_f64(),
        };
        state.history.push(record);
        let improved = test_loss < state.best_test_loss;
        if improved {
            state.best_test_loss = test_loss;
            state.best_epoch = epoch;
            best_params = params.clone();
        }
        if let Some(dir) = &opts.checkpoint_dir {
            std::fs::create_dir_all(dir)?;
            let ck = Checkpoint {
                params: params.clone(),
                epoch,
                test_loss,
                optimizer: Some(optimizer.clone()),
                state: Some(state.clone()),
            };
            ck.save(&dir.join("last.ckpt"))?;
            if improved {
                Checkpoint {
                    optimizer: None,
                    state: None,
                    ..ck
                }
                .save(&dir.join("best.ckpt"))?;
            }
        }
        on_epoch(&record, &params);
        if budget.is_some_and(|b| start.elapsed() >= b) {
            break;
        }
    }

    Ok(TrainOutcome {
        history: state.history,
        initial_test_loss: state.initial_test_loss,
        params,
        best_params,
        best_test_loss: state.best_test_loss,
        best_epoch: state.best_epoch,
        optimizer,
    })
}

/// Metrics CSV: `epoch,train_loss,test_loss,wall_time_s`.
pub fn write_metrics_csv<W: std::io::Write>(w: W, history: &[TrainRecord]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in history {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_metrics_csv<R: std::io::Read>(r: R) -> Result<Vec<TrainRecord>> {
    let mut rdr = csv::Reader::from_reader(r);
    rdr.deserialize()
        .map(|row| row.map_err(Error::from))
        .collect()
}

//! Power-law fits of test loss against model size or data size, and the
//! sweep runner that produces the points.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::cipher::{build_dataset_with, hash64, CipherDataset, DatasetOptions, Split};
use crate::error::{Error, Result};
use crate::neural::train::train_with;
use crate::neural::{count_params, ModelConfig, TrainOptions};
use crate::textcorpus::{NormalizedLine, Vocab, MAX_SEQ_LEN};

pub const LINES_PER_UNIT: u64 = 4096;
pub const TOKENS_PER_LINE: u64 = 512;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingPoint {
    pub run_id: String,
    pub x: f64,
    pub y: f64,
}

/// `y = 10^log10_a * x^b`, fitted by least squares in log10-log10 space.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerLawFit {
    pub log10_a: f64,
    pub b: f64,
    pub r2: f64,
    pub n_points: usize,
}

impl PowerLawFit {
    pub fn a(&self) -> f64 {
        10f64.powf(self.log10_a)
    }

    pub fn predict(&self, x: f64) -> f64 {
        10f64.powf(self.log10_a + self.b * x.log10())
    }
}

pub fn fit_power_law(points: &[ScalingPoint]) -> Result<PowerLawFit> {
    if points.len() < 2 {
        return Err(Error::Fit(format!("need at least 2 points, got {}", points.len())));
    }
    if let Some(p) = points
        .iter()
        .find(|p| !(p.x > 0.0 && p.y > 0.0 && p.x.is_finite() && p.y.is_finite()))
    {
        return Err(Error::Fit(format!(
            "point {} has non-positive coordinates ({}, {})",
            p.run_id, p.x, p.y
        )));
    }
    let lx: Vec<f64> = points.iter().map(|p| p.x.log10()).collect();
    let ly: Vec<f64> = points.iter().map(|p| p.y.log10()).collect();
    let n = points.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::Fit("all x values are equal".into()));
    }
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let b = sxy / sxx;
    let log10_a = my - b * mx;
    let ss_tot: f64 = ly.iter().map(|y| (y - my).powi(2)).sum();
    let ss_res: f64 = lx
        .iter()
        .zip(&ly)
        .map(|(x, y)| (y - log10_a - b * x).powi(2))
        .sum();
    let r2 = if ss_tot == 0.0 { 1.0 } else { 1.0 - ss_res / ss_tot };
    Ok(PowerLawFit {
        log10_a,
        b,
        r2,
        n_points: points.len(),
    })
}

/// The `x` at which the fitted curve reaches `target_loss`.
pub fn extrapolate_x_for_loss(fit: &PowerLawFit, target_loss: f64) -> Result<f64> {
    if fit.b >= 0.0 {
        return Err(Error::Fit(format!(
            "exponent {} is not negative; loss does not decrease with x",
            fit.b
        )));
    }
    if !(target_loss > 0.0) {
        return Err(Error::Fit(format!("target loss must be positive, got {target_loss}")));
    }
    Ok(10f64.powf((target_loss.log10() - fit.log10_a) / fit.b))
}

/// Training tokens for `n` units of data, counting every line at the cap.
pub fn tokens_for_multiplier(n: u64) -> Result<u64> {
    tokens_for(n, LINES_PER_UNIT, TOKENS_PER_LINE)
}

pub fn tokens_for(n: u64, lines_per_unit: u64, tokens_per_line: u64) -> Result<u64> {
    if n == 0 {
        return Err(Error::InvalidConfig("dataset multiplier must be >= 1".into()));
    }
    n.checked_mul(lines_per_unit)
        .and_then(|v| v.checked_mul(tokens_per_line))
        .ok_or_else(|| Error::InvalidConfig(format!("token count overflows for n = {n}")))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepAxis {
    /// Values are `d_model`; `x` is the parameter count.
    Params,
    /// Values are dataset multipliers; `x` is the token count.
    Dataset,
}

impl std::fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SweepAxis::Params => "params",
            SweepAxis::Dataset => "dataset",
        })
    }
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "params" => Ok(SweepAxis::Params),
            "dataset" => Ok(SweepAxis::Dataset),
            other => Err(Error::InvalidConfig(format!("unknown sweep axis {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepManifest {
    pub axis: SweepAxis,
    pub values: Vec<usize>,
    pub base_model: ModelConfig,
    /// Shared by every run; `epochs` and `max_wall_time_s` are the budget.
    pub train: TrainOptions,
    pub lines_per_unit: usize,
    /// Multiplier used for every run of a params sweep.
    pub fixed_multiplier: usize,
    pub dataset_seed: u64,
}

/// One row of the results CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub run_id: String,
    pub x: f64,
    /// Minimum test loss over the run.
    pub y: f64,
    pub epochs: usize,
    pub wall_time_s: f64,
}

impl From<&SweepRow> for ScalingPoint {
    fn from(r: &SweepRow) -> Self {
        Self {
            run_id: r.run_id.clone(),
            x: r.x,
            y: r.y,
        }
    }
}

/// A single planned run of a sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRun {
    pub run_id: String,
    pub model: ModelConfig,
    pub multiplier: usize,
    pub train: TrainOptions,
    pub x: f64,
}

impl SweepManifest {
    /// Expands the manifest into runs, validating everything up front.
    pub fn plan(&self) -> Result<Vec<SweepRun>> {
        if self.values.is_empty() {
            return Err(Error::InvalidConfig("sweep has no values".into()));
        }
        let mut seen = self.values.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.values.len() {
            return Err(Error::InvalidConfig("sweep values must be distinct".into()));
        }
        if self.lines_per_unit == 0 {
            return Err(Error::InvalidConfig("lines_per_unit must be >= 1".into()));
        }
        let tag = match self.axis {
            SweepAxis::Params => 1,
            SweepAxis::Dataset => 2,
        };
        self.values
            .iter()
            .map(|&v| {
                let seed = hash64(&[self.base_model.seed, tag, v as u64]);
                let mut model = self.base_model;
                model.seed = seed;
                let mut train = self.train.clone();
                train.shuffle_seed = hash64(&[self.train.shuffle_seed, tag, v as u64]);
                let (run_id, multiplier, x) = match self.axis {
                    SweepAxis::Params => {
                        model.d_model = v;
                        model.d_ff = 4 * v;
                        model.validate()?;
                        (format!("params-d{v}"), self.fixed_multiplier, count_params(&model) as f64)
                    }
                    SweepAxis::Dataset => {
                        let tokens = tokens_for(v as u64, self.lines_per_unit as u64, MAX_SEQ_LEN as u64)?;
                        (format!("dataset-n{v}"), v, tokens as f64)
                    }
                };
                train.checkpoint_dir = train.checkpoint_dir.map(|d| d.join(&run_id));
                if multiplier == 0 {
                    return Err(Error::InvalidConfig("dataset multiplier must be >= 1".into()));
                }
                model.validate()?;
                Ok(SweepRun {
                    run_id,
                    model,
                    multiplier,
                    train,
                    x,
                })
            })
            .collect()
    }
}

fn run_one(
    manifest: &SweepManifest,
    run: &SweepRun,
    train_pool: &[NormalizedLine],
    test: &CipherDataset,
) -> Result<SweepRow> {
    let n_lines = run.multiplier * manifest.lines_per_unit;
    if train_pool.len() < n_lines {
        return Err(Error::InvalidConfig(format!(
            "needs {n_lines} training lines, corpus has {}",
            train_pool.len()
        )));
    }
    let opts = DatasetOptions {
        n_multiplier: run.multiplier as u32,
        ..Default::default()
    };
    let train = build_dataset_with(
        &train_pool[..n_lines],
        &Vocab::new(),
        manifest.dataset_seed,
        Split::Train,
        &opts,
    )?;
    let out = train_with(&run.model, &train, test, &run.train, None, &mut |_, _| {})?;
    Ok(SweepRow {
        run_id: run.run_id.clone(),
        x: run.x,
        y: out.min_test_loss(),
        epochs: out.history.len(),
        wall_time_s: out.history.last().map_or(0.0, |r| r.wall_time_s),
    })
}

/// Trains one model per sweep value, at most `jobs` at a time. Rows come
/// back in manifest order whatever the scheduling.
pub fn run_sweep(
    manifest: &SweepManifest,
    train_pool: &[NormalizedLine],
    test: &CipherDataset,
    jobs: usize,
    on_row: &(dyn Fn(&SweepRow) + Sync),
) -> Result<Vec<SweepRow>> {
    let runs = manifest.plan()?;
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<SweepRow>>>> = Mutex::new((0..runs.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..jobs.clamp(1, runs.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(run) = runs.get(i) else { break };
                let result = run_one(manifest, run, train_pool, test).map_err(|e| Error::Run {
                    run_id: run.run_id.clone(),
                    source: Box::new(e),
                });
                if let Ok(row) = &result {
                    on_row(row);
                }
                slots.lock().expect("no panics while holding the lock")[i] = Some(result);
            });
        }
    });
    slots
        .into_inner()
        .expect("threads joined")
        .into_iter()
        .map(|r| r.expect("every run executed"))
        .collect()
}

pub fn write_results_csv<W: std::io::Write>(w: W, rows: &[SweepRow]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_results_csv<R: std::io::Read>(r: R) -> Result<Vec<SweepRow>> {
    csv::Reader::from_reader(r)
        .deserialize()
        .map(|row| row.map_err(Error::from))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pts(xy: &[(f64, f64)]) -> Vec<ScalingPoint> {
        xy.iter()
            .enumerate()
            .map(|(i, &(x, y))| ScalingPoint {
                run_id: format!("r{i}"),
                x,
                y,
            })
            .collect()
    }

    #[test]
    fn exact_line_fits_perfectly() {
        let fit = fit_power_law(&pts(&[(1.0, 10.0), (10.0, 1.0), (100.0, 0.1)])).unwrap();
        assert!((fit.b + 1.0).abs() < 1e-12);
        assert!((fit.a() - 10.0).abs() < 1e-9);
        assert!((fit.r2 - 1.0).abs() < 1e-12);
        let two = fit_power_law(&pts(&[(3.0, 2.0), (7.0, 0.4)])).unwrap();
        assert!((two.r2 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn fit_rejects_bad_input() {
        assert!(fit_power_law(&pts(&[(1.0, 1.0)])).is_err());
        assert!(fit_power_law(&pts(&[(1.0, 1.0), (0.0, 2.0)])).is_err());
        assert!(fit_power_law(&pts(&[(1.0, 1.0), (2.0, -2.0)])).is_err());
        assert!(fit_power_law(&pts(&[(2.0, 1.0), (2.0, 3.0)])).is_err());
    }

    #[test]
    fn extrapolation_closed_form() {
        let fit = PowerLawFit {
            log10_a: 1.0,
            b: -1.0,
            r2: 1.0,
            n_points: 3,
        };
        assert!((extrapolate_x_for_loss(&fit, 0.01).unwrap() - 1000.0).abs() < 1e-9);
        let flat = PowerLawFit { b: 0.0, ..fit };
        assert!(extrapolate_x_for_loss(&flat, 0.1).is_err());
        let rising = PowerLawFit { b: 0.3, ..fit };
        assert!(extrapolate_x_for_loss(&rising, 0.1).is_err());
        assert!(extrapolate_x_for_loss(&fit, 0.0).is_err());
    }

    #[test]
    fn token_accounting() {
        assert_eq!(tokens_for_multiplier(1).unwrap(), 2_097_152);
        assert_eq!(tokens_for_multiplier(300).unwrap(), 629_145_600);
        assert!(tokens_for_multiplier(0).is_err());
    }

    #[test]
    fn plan_orders_runs_and_rejects_duplicates() {
        let mut m = SweepManifest {
            axis: SweepAxis::Params,
            values: vec![16, 32, 64, 128],
            base_model: ModelConfig::default(),
            train: TrainOptions::default(),
            lines_per_unit: 4096,
            fixed_multiplier: 1,
            dataset_seed: 0,
        };
        let runs = m.plan().unwrap();
        assert!(runs.windows(2).all(|w| w[0].x < w[1].x));
        assert_eq!(runs[0].run_id, "params-d16");
        m.values = vec![16, 16];
        assert!(m.plan().is_err());
        m.axis = SweepAxis::Dataset;
        m.values = vec![1, 8, 16];
        let runs = m.plan().unwrap();
        assert_eq!(runs[1].x, 8.0 * 4096.0 * 512.0);
        assert_eq!(runs[2].multiplier, 16);
    }
}

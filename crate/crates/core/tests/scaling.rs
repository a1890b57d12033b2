use equiscale::cipher::{build_dataset, Split};
use equiscale::neural::{ModelConfig, TrainOptions};
use equiscale::ngram::reference_model;
use equiscale::scaling::{
    extrapolate_x_for_loss, fit_power_law, run_sweep, ScalingPoint, SweepAxis, SweepManifest,
};
use equiscale::textcorpus::{synth_corpus, Vocab};
use rand::{Rng, SeedableRng};

#[test]
fn noisy_power_law_recovers_the_exponent() {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
    let points: Vec<ScalingPoint> = (0..20)
        .map(|i| {
            let x = 10f64.powf(1.0 + 0.25 * i as f64);
            let noise = 1.0 + rng.gen_range(-0.01..0.01);
            ScalingPoint {
                run_id: format!("p{i}"),
                x,
                y: 3.7 * x.powf(-0.42) * noise,
            }
        })
        .collect();
    let fit = fit_power_law(&points).unwrap();
    assert!((fit.b + 0.42).abs() <= 0.05, "b = {}", fit.b);
    assert!(fit.r2 > 0.99);
}

#[test]
fn extrapolating_to_an_observed_loss_returns_its_x() {
    let points = vec![
        ScalingPoint { run_id: "a".into(), x: 3.0e4, y: 2.9 },
        ScalingPoint { run_id: "b".into(), x: 1.2e5, y: 2.4 },
    ];
    let fit = fit_power_law(&points).unwrap();
    assert!((fit.r2 - 1.0).abs() < 1e-12);
    for p in &points {
        let x = extrapolate_x_for_loss(&fit, p.y).unwrap();
        assert!((x / p.x - 1.0).abs() < 1e-9);
    }
}

fn manifest(axis: SweepAxis, values: Vec<usize>) -> SweepManifest {
    SweepManifest {
        axis,
        values,
        base_model: ModelConfig::new(16, 1, 1, 2, 64, 3),
        train: TrainOptions {
            epochs: 1,
            batch_size: 4,
            ..TrainOptions::default()
        },
        lines_per_unit: 4,
        fixed_multiplier: 1,
        dataset_seed: 9,
    }
}

#[test]
fn params_plan_has_increasing_sizes() {
    let runs = manifest(SweepAxis::Params, vec![16, 32, 64, 128]).plan().unwrap();
    assert_eq!(runs.len(), 4);
    assert!(runs.windows(2).all(|w| w[0].x < w[1].x));
    assert!(runs.iter().all(|r| r.multiplier == 1));
    let grid = manifest(SweepAxis::Dataset, vec![1, 8, 16]).plan().unwrap();
    let xs: Vec<f64> = grid.iter().map(|r| r.x).collect();
    assert_eq!(xs, vec![2048.0, 16384.0, 32768.0]);
}

#[test]
fn repeated_sweep_gives_identical_points() {
    let lm = reference_model(3, 0.5).unwrap();
    let pool = synth_corpus(1, 8, &lm);
    let test = build_dataset(&synth_corpus(2, 3, &lm), &Vocab::new(), 9, Split::Test).unwrap();
    let m = manifest(SweepAxis::Dataset, vec![1, 2]);
    let strip = |rows: Vec<equiscale::scaling::SweepRow>| {
        rows.into_iter().map(|r| (r.run_id, r.x, r.y, r.epochs)).collect::<Vec<_>>()
    };
    let a = strip(run_sweep(&m, &pool, &test, 2, &|_| {}).unwrap());
    let b = strip(run_sweep(&m, &pool, &test, 1, &|_| {}).unwrap());
    assert_eq!(a, b);
    assert_eq!(a.len(), 2);
    let short = synth_corpus(1, 5, &lm);
    assert!(run_sweep(&m, &short, &test, 1, &|_| {}).is_err());
}

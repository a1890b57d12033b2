use equiscale::cipher::{build_dataset, CipherDataset, Permutation, Split};
use equiscale::neural::train::evaluate;
use equiscale::neural::{init_model, ModelConfig};
use equiscale::ngram::reference_model;
use equiscale::scale::{
    equivariance_residual, hallucination_scale, non_invariance_check, ConstantModel,
    NeuralModel, OracleModel, Solver, SolverModel, UniformModel, DEFAULT_EPSILON,
};
use equiscale::solvers::HillClimbOptions;
use equiscale::textcorpus::{synth_corpus, Vocab};

fn dataset(n: usize) -> CipherDataset {
    let lm = reference_model(3, 0.5).unwrap();
    build_dataset(&synth_corpus(31, n, &lm), &Vocab::new(), 31, Split::Test).unwrap()
}

#[test]
fn neural_scale_matches_the_training_test_loss() {
    let ds = dataset(6);
    let params = init_model(&ModelConfig::new(16, 1, 1, 2, 32, 4)).unwrap();
    let test_loss = evaluate(&params, &ds).unwrap();
    let report = hallucination_scale(&NeuralModel { params }, &ds).unwrap();
    assert!((report.mean_ce - test_loss).abs() < 1e-6);
    assert_eq!(report.n_examples, 6);
}

#[test]
fn untrained_network_is_not_invariant() {
    let ds = dataset(8);
    let model = NeuralModel {
        params: init_model(&ModelConfig::new(16, 1, 1, 2, 32, 4)).unwrap(),
    };
    let v = non_invariance_check(&model, &ds, 20, 3).unwrap();
    println!("untrained non-invariance: {v:.3}");
    assert!((0.0..=1.0).contains(&v));
}

#[test]
fn uniform_belief_hits_one_slot_in_27() {
    let r = hallucination_scale(&UniformModel, &dataset(10)).unwrap();
    assert!((r.mean_ce - 27f64.ln()).abs() < 1e-12);
    assert!((r.symbol_accuracy - 1.0 / 27.0).abs() < 1e-12);
    assert_eq!(r.exact_match, 0.0);
}

#[test]
fn oracle_and_constant_bounds() {
    let ds = dataset(10);
    let oracle = hallucination_scale(&OracleModel::default(), &ds).unwrap();
    assert!(oracle.mean_ce <= 27.0 * -(1.0 - DEFAULT_EPSILON).ln());
    assert_eq!((oracle.symbol_accuracy, oracle.exact_match), (1.0, 1.0));
    let constant = ConstantModel {
        map: *Permutation::sample(8).map(),
        epsilon: DEFAULT_EPSILON,
    };
    assert_eq!(non_invariance_check(&constant, &ds, 100, 4).unwrap(), 0.0);
    let r = hallucination_scale(&constant, &ds).unwrap();
    assert!(r.exact_match <= r.symbol_accuracy && r.mean_ce >= 0.0);
}

#[test]
fn solver_models_are_scored_through_the_same_interface() {
    let ds = dataset(3);
    let lm = reference_model(3, 0.5).unwrap();
    for solver in [
        Solver::Frequency,
        Solver::HillClimb(HillClimbOptions {
            iterations: 2000,
            restarts: 2,
            ..HillClimbOptions::default()
        }),
    ] {
        let model = SolverModel {
            solver,
            lm: lm.clone(),
            epsilon: DEFAULT_EPSILON,
        };
        let r = hallucination_scale(&model, &ds).unwrap();
        assert!((0.0..=1.0).contains(&r.symbol_accuracy));
        assert!(r.exact_match <= r.symbol_accuracy);
        let res = equivariance_residual(&model, &ds, 5, 1).unwrap();
        assert!((0.0..=1.0).contains(&res));
    }
}

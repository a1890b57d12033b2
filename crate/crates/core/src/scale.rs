//! The hallucination scale and the equivariance checks.
//!
//! A model under test maps a ciphertext to a decode map and, optionally, to
//! one probability row per dictionary slot. The scale is the mean
//! cross-entropy (nats) of those rows against the true dictionary.
//!
//! Equivariance is checked in re-labeling form: if `m2` deciphers `c` and
//! `m1` deciphers `H(c)`, an equivariant model has `m1[j] == m2[H⁻¹(j)]` for
//! every cipher symbol `j`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::cipher::{hash64, CipherDataset, CipherExample, DecodeMap, Permutation};
use crate::error::{Error, Result};
use crate::neural::model::{predict_dictionary, teacher_forced_rows};
use crate::neural::ModelParams;
use crate::ngram::NGramModel;
use crate::solvers::{frequency_decipher, hillclimb_decipher, HillClimbOptions};
use crate::textcorpus::{ALPHABET_SIZE, FIRST_CONTENT, VOCAB_SIZE};

/// Confidence given up by one-hot wrappers so cross-entropy stays finite.
pub const DEFAULT_EPSILON: f64 = 1e-6;

/// One probability row per dictionary slot, indexed by token ID.
pub type ProbRows = Vec<Vec<f64>>;

#[derive(Debug, Clone, PartialEq)]
pub struct Decipherment {
    /// Need not be a bijection.
    pub map: DecodeMap,
    pub rows: Option<ProbRows>,
}

/// A decipherer under test.
///
/// Every model except [`OracleModel`] must depend on `ex.ciphertext` only;
/// the oracle is the one model allowed to read the true dictionary.
pub trait DecipherModel {
    fn decipher(&self, ex: &CipherExample) -> Result<Decipherment>;

    /// Rows the scale is computed from. By default the rows `decipher`
    /// returned with the map.
    fn scale_rows(&self, ex: &CipherExample, d: &Decipherment) -> Result<ProbRows> {
        let _ = ex;
        d.rows
            .clone()
            .ok_or_else(|| Error::InvalidConfig("model provides no probability rows".into()))
    }

    /// Smoothing of one-hot wrappers, when there is one.
    fn epsilon(&self) -> Option<f64> {
        None
    }
}

/// Rows that put `1 - eps` on each predicted symbol and share `eps` evenly
/// over the other 26 content symbols.
pub fn one_hot_rows(map: &DecodeMap, eps: f64) -> ProbRows {
    map.iter()
        .map(|&t| {
            let mut row = vec![0.0; VOCAB_SIZE];
            for (id, p) in row.iter_mut().enumerate().skip(FIRST_CONTENT as usize) {
                *p = if id == t as usize {
                    1.0 - eps
                } else {
                    eps / (ALPHABET_SIZE - 1) as f64
                };
            }
            row
        })
        .collect()
}

pub fn uniform_rows() -> ProbRows {
    let mut row = vec![1.0 / ALPHABET_SIZE as f64; VOCAB_SIZE];
    row[..FIRST_CONTENT as usize].fill(0.0);
    vec![row; ALPHABET_SIZE]
}

/// Returns the true dictionary.
#[derive(Debug, Clone, Copy)]
pub struct OracleModel {
    pub epsilon: f64,
}

impl Default for OracleModel {
    fn default() -> Self {
        Self {
            epsilon: DEFAULT_EPSILON,
        }
    }
}

impl DecipherModel for OracleModel {
    fn decipher(&self, ex: &CipherExample) -> Result<Decipherment> {
        Ok(Decipherment {
            map: ex.decode_target,
            rows: Some(one_hot_rows(&ex.decode_target, self.epsilon)),
        })
    }

    fn epsilon(&self) -> Option<f64> {
        Some(self.epsilon)
    }
}

/// Emits one fixed map whatever the input.
#[derive(Debug, Clone, Copy)]
pub struct ConstantModel {
    pub map: DecodeMap,
    pub epsilon: f64,
}

impl DecipherModel for ConstantModel {
    fn decipher(&self, _ex: &CipherExample) -> Result<Decipherment> {
        Ok(Decipherment {
            map: self.map,
            rows: Some(one_hot_rows(&self.map, self.epsilon)),
        })
    }

    fn epsilon(&self) -> Option<f64> {
        Some(self.epsilon)
    }
}

/// Uniform belief over the 27 content symbols; its argmax is the lowest ID.
#[derive(Debug, Clone, Copy, Default)]
pub struct UniformModel;

impl DecipherModel for UniformModel {
    fn decipher(&self, _ex: &CipherExample) -> Result<Decipherment> {
        Ok(Decipherment {
            map: [FIRST_CONTENT; ALPHABET_SIZE],
            rows: Some(uniform_rows()),
        })
    }
}

#[derive(Debug, Clone)]
pub enum Solver {
    Frequency,
    HillClimb(HillClimbOptions),
}

/// A classical solver run per example, scored through one-hot rows.
#[derive(Debug, Clone)]
pub struct SolverModel {
    pub solver: Solver,
    pub lm: NGramModel,
    pub epsilon: f64,
}

impl DecipherModel for SolverModel {
    fn decipher(&self, ex: &CipherExample) -> Result<Decipherment> {
        let c = std::slice::from_ref(&ex.ciphertext);
        let result = match &self.solver {
            Solver::Frequency => frequency_decipher(c, &self.lm.unigram()),
            Solver::HillClimb(opts) => hillclimb_decipher(c, &self.lm, opts)?,
        };
        Ok(Decipherment {
            map: result.decode_map,
            rows: Some(one_hot_rows(&result.decode_map, self.epsilon)),
        })
    }

    fn epsilon(&self) -> Option<f64> {
        Some(self.epsilon)
    }
}

/// The transformer decipherer. Maps come from greedy decoding; the scale
/// rows are the teacher-forced distributions the training loss is built on.
#[derive(Debug, Clone)]
pub struct NeuralModel {
    pub params: ModelParams<f32>,
}

impl DecipherModel for NeuralModel {
    fn decipher(&self, ex: &CipherExample) -> Result<Decipherment> {
        let pred = predict_dictionary(&self.params, &ex.ciphertext);
        Ok(Decipherment {
            map: pred.map,
            rows: Some(pred.rows),
        })
    }

    fn scale_rows(&self, ex: &CipherExample, _d: &Decipherment) -> Result<ProbRows> {
        Ok(teacher_forced_rows(&self.params, ex))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScaleReport {
    /// Mean over examples and slots of `-ln p(true symbol)`, in nats.
    pub mean_ce: f64,
    pub symbol_accuracy: f64,
    pub exact_match: f64,
    pub n_examples: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
}

/// Mean cross-entropy of `rows` against `target`, over the 27 slots.
pub fn rows_cross_entropy(rows: &ProbRows, target: &DecodeMap) -> f64 {
    rows.iter()
        .zip(target)
        .map(|(row, &t)| -row[t as usize].ln())
        .sum::<f64>()
        / ALPHABET_SIZE as f64
}

pub fn hallucination_scale(model: &dyn DecipherModel, dataset: &CipherDataset) -> Result<ScaleReport> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let scored = dataset
        .examples
        .iter()
        .map(|ex| {
            let d = model.decipher(ex)?;
            let rows = model.scale_rows(ex, &d)?;
            Ok((d.map, rows))
        })
        .collect::<Result<Vec<_>>>()?;
    report_from(&dataset.examples, &scored, model.epsilon())
}

/// Aggregates per-example maps and rows that were computed elsewhere.
pub fn report_from(
    examples: &[CipherExample],
    scored: &[(DecodeMap, ProbRows)],
    epsilon: Option<f64>,
) -> Result<ScaleReport> {
    if examples.is_empty() || examples.len() != scored.len() {
        return Err(Error::EmptyDataset);
    }
    let mut ce = 0.0;
    let mut hits = 0usize;
    let mut exact = 0usize;
    for (ex, (map, rows)) in examples.iter().zip(scored) {
        ce += rows_cross_entropy(rows, &ex.decode_target);
        let correct = map.iter().zip(&ex.decode_target).filter(|(a, b)| a == b).count();
        hits += correct;
        exact += usize::from(correct == ALPHABET_SIZE);
    }
    let n = examples.len();
    Ok(ScaleReport {
        mean_ce: ce / n as f64,
        symbol_accuracy: hits as f64 / (n * ALPHABET_SIZE) as f64,
        exact_match: exact as f64 / n as f64,
        n_examples: n,
        epsilon,
    })
}

/// A probe: an example index and the re-labeling applied to its ciphertext.
#[derive(Debug, Clone, PartialEq)]
pub struct Probe {
    pub example: usize,
    pub relabel: Permutation,
}

/// `n_probes` probes with uniformly drawn examples and permutations.
pub fn sample_probes(n_examples: usize, n_probes: usize, seed: u64, non_identity: bool) -> Vec<Probe> {
    (0..n_probes as u64)
        .map(|i| {
            let example = (hash64(&[seed, i, 0]) % n_examples as u64) as usize;
            let mut attempt = 1;
            let relabel = loop {
                let h = Permutation::sample(hash64(&[seed, i, attempt]));
                if !(non_identity && h.is_identity()) {
                    break h;
                }
                attempt += 1;
            };
            Probe { example, relabel }
        })
        .collect()
}

/// Fraction of cipher slots `j` with `m1[j] != m2[H⁻¹(j)]`.
pub fn violated_fraction(m1: &DecodeMap, m2: &DecodeMap, h: &Permutation) -> f64 {
    let h_inv = h.invert();
    let bad = (0..ALPHABET_SIZE)
        .filter(|&j| {
            let pre = h_inv.image(FIRST_CONTENT + j as u8);
            m1[j] != m2[(pre - FIRST_CONTENT) as usize]
        })
        .count();
    bad as f64 / ALPHABET_SIZE as f64
}

/// Decodes each probed example once, then each re-labeled copy.
fn probe_maps(
    model: &dyn DecipherModel,
    dataset: &CipherDataset,
    probes: &[Probe],
) -> Result<Vec<(DecodeMap, DecodeMap)>> {
    let mut base: BTreeMap<usize, DecodeMap> = BTreeMap::new();
    probes
        .iter()
        .map(|p| {
            let ex = dataset
                .examples
                .get(p.example)
                .ok_or_else(|| Error::InvalidConfig(format!("probe example {} out of range", p.example)))?;
            let m2 = match base.get(&p.example) {
                Some(m) => *m,
                None => {
                    let m = model.decipher(ex)?.map;
                    base.insert(p.example, m);
                    m
                }
            };
            let m1 = model.decipher(&ex.relabeled(&p.relabel))?.map;
            Ok((m1, m2))
        })
        .collect()
}

/// Mean violated fraction over the given probes; 0 is perfectly equivariant.
pub fn equivariance_residual_with(
    model: &dyn DecipherModel,
    dataset: &CipherDataset,
    probes: &[Probe],
) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if probes.is_empty() {
        return Err(Error::InvalidConfig("n_probes must be >= 1".into()));
    }
    let maps = probe_maps(model, dataset, probes)?;
    let total: f64 = maps
        .iter()
        .zip(probes)
        .map(|((m1, m2), p)| violated_fraction(m1, m2, &p.relabel))
        .sum();
    Ok(total / probes.len() as f64)
}

pub fn equivariance_residual(
    model: &dyn DecipherModel,
    dataset: &CipherDataset,
    n_probes: usize,
    seed: u64,
) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let probes = sample_probes(dataset.len(), n_probes, seed, false);
    equivariance_residual_with(model, dataset, &probes)
}

/// Fraction of non-identity probes where re-labeling the ciphertext changes
/// the predicted map. An invariant model scores 0.
pub fn non_invariance_check(
    model: &dyn DecipherModel,
    dataset: &CipherDataset,
    n_probes: usize,
    seed: u64,
) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if n_probes == 0 {
        return Err(Error::InvalidConfig("n_probes must be >= 1".into()));
    }
    let probes = sample_probes(dataset.len(), n_probes, seed, true);
    let maps = probe_maps(model, dataset, &probes)?;
    let changed = maps.iter().filter(|(m1, m2)| m1 != m2).count();
    Ok(changed as f64 / n_probes as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cipher::{build_dataset, Split};
    use crate::textcorpus::{normalize_corpus, Vocab};

    fn dataset() -> CipherDataset {
        let lines = normalize_corpus("the cat sat on the mat\nquick brown fox\njumps over the lazy dog");
        build_dataset(&lines, &Vocab::new(), 5, Split::Test).unwrap()
    }

    #[test]
    fn uniform_belief_scores_ln_27() {
        let r = hallucination_scale(&UniformModel, &dataset()).unwrap();
        assert!((r.mean_ce - 27f64.ln()).abs() < 1e-12);
        assert!(r.symbol_accuracy <= 1.0 && r.exact_match <= r.symbol_accuracy);
    }

    #[test]
    fn oracle_is_exact_and_equivariant() {
        let ds = dataset();
        let r = hallucination_scale(&OracleModel::default(), &ds).unwrap();
        assert_eq!(r.exact_match, 1.0);
        assert!(r.mean_ce <= 27.0 * -(1.0 - 1e-6f64).ln());
        assert_eq!(equivariance_residual(&OracleModel::default(), &ds, 50, 1).unwrap(), 0.0);
        assert_eq!(non_invariance_check(&OracleModel::default(), &ds, 50, 1).unwrap(), 1.0);
    }

    #[test]
    fn identity_probes_never_violate() {
        let ds = dataset();
        let constant = ConstantModel {
            map: *Permutation::sample(3).map(),
            epsilon: DEFAULT_EPSILON,
        };
        let probes: Vec<Probe> = (0..ds.len())
            .map(|example| Probe {
                example,
                relabel: Permutation::identity(),
            })
            .collect();
        assert_eq!(equivariance_residual_with(&constant, &ds, &probes).unwrap(), 0.0);
        assert_eq!(non_invariance_check(&constant, &ds, 20, 2).unwrap(), 0.0);
    }

    #[test]
    fn empty_inputs_are_rejected() {
        let mut ds = dataset();
        assert!(equivariance_residual(&UniformModel, &ds, 0, 1).is_err());
        ds.examples.clear();
        assert!(hallucination_scale(&UniformModel, &ds).is_err());
    }
}

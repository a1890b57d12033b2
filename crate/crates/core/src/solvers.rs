//! Classical decipherment: frequency ranking, simulated-annealing hill
//! climbing over decode maps, and exhaustive search for small alphabets.
//!
//! Every solver works over the alphabet of the language model it is given.
//! Symbols outside that alphabet are left fixed by the returned decode map.

use itertools::Itertools;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cipher::{hash64, DecodeMap, Permutation};
use crate::error::{Error, Result};
use crate::ngram::NGramModel;
use crate::textcorpus::TokenSeq;

pub const DEFAULT_ITERATIONS: usize = 50_000;
pub const DEFAULT_RESTARTS: usize = 10;
pub const INITIAL_TEMPERATURE: f64 = 1.0;
pub const COOLING_RATE: f64 = 0.999;
pub const BRUTE_FORCE_MAX: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverResult {
    /// Cipher ID `2 + j` decodes to `decode_map[j]`.
    pub decode_map: DecodeMap,
    /// Log-likelihood in nats of the decoded text.
    pub score: f64,
    pub iterations: usize,
    pub restarts_used: usize,
}

impl SolverResult {
    pub fn permutation(&self) -> Permutation {
        Permutation::from_map(self.decode_map).expect("solvers return bijections")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HillClimbOptions {
    /// Swap proposals per restart.
    pub iterations: usize,
    pub restarts: usize,
    pub seed: u64,
    pub initial_temperature: f64,
    pub cooling_rate: f64,
}

impl Default for HillClimbOptions {
    fn default() -> Self {
        Self {
            iterations: DEFAULT_ITERATIONS,
            restarts: DEFAULT_RESTARTS,
            seed: 0,
            initial_temperature: INITIAL_TEMPERATURE,
            cooling_rate: COOLING_RATE,
        }
    }
}

/// Decode map over the model alphabet given as a table of alphabet indices,
/// expanded to a full map that fixes every other symbol.
fn expand(alphabet: &[u8], table: &[usize]) -> DecodeMap {
    let mut map = *Permutation::identity().map();
    for (i, &t) in table.iter().enumerate() {
        map[(alphabet[i] - 2) as usize] = alphabet[t];
    }
    map
}

/// Ranks alphabet positions by descending weight, ties by ascending ID.
fn rank_by<T: PartialOrd + Copy>(alphabet: &[u8], weight: &[T]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..alphabet.len()).collect();
    order.sort_by(|&a, &b| {
        weight[b]
            .partial_cmp(&weight[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(alphabet[a].cmp(&alphabet[b]))
    });
    order
}

fn frequency_table(ciphertexts: &[TokenSeq], lm: &NGramModel) -> Vec<usize> {
    let alphabet = lm.alphabet();
    let mut counts = vec![0u64; alphabet.len()];
    for seq in ciphertexts {
        for &id in seq.payload() {
            if let Some(i) = lm.idx(id) {
                counts[i] += 1;
            }
        }
    }
    let cipher_rank = rank_by(alphabet, &counts);
    let plain_rank = rank_by(alphabet, &lm.unigram_probs());
    let mut table = vec![0; alphabet.len()];
    for (c, p) in cipher_rank.into_iter().zip(plain_rank) {
        table[c] = p;
    }
    table
}

/// Maps the i-th most frequent cipher symbol to the i-th most probable
/// plaintext symbol under `ref_unigrams`.
pub fn frequency_decipher(ciphertexts: &[TokenSeq], ref_unigrams: &NGramModel) -> SolverResult {
    let table = frequency_table(ciphertexts, ref_unigrams);
    let scorer = TupleScorer::new(ciphertexts, ref_unigrams);
    SolverResult {
        decode_map: expand(ref_unigrams.alphabet(), &table),
        score: scorer.score(ref_unigrams, &table),
        iterations: 0,
        restarts_used: 0,
    }
}

/// Log-likelihood of `apply_decode_map(map, c)` summed over `ciphertexts`.
pub fn decoded_log_likelihood(ciphertexts: &[TokenSeq], lm: &NGramModel, map: &DecodeMap) -> f64 {
    ciphertexts
        .iter()
        .map(|c| {
            let decoded: Vec<u8> = c
                .payload()
                .iter()
                .map(|&id| map[(id - 2) as usize])
                .collect();
            lm.log_likelihood_payload(&decoded)
        })
        .sum()
}

/// The ciphertext reduced to counted index tuples, so a decode map is scored
/// without re-walking the text.
struct TupleScorer {
    /// Alphabet indices, padded; the first `len` entries are live.
    tuples: Vec<([usize; 3], usize)>,
    counts: Vec<f64>,
    /// Tuples mentioning each alphabet index.
    by_symbol: Vec<Vec<usize>>,
}

impl TupleScorer {
    fn new(ciphertexts: &[TokenSeq], lm: &NGramModel) -> Self {
        let order = lm.order();
        let mut tally: std::collections::BTreeMap<([usize; 3], usize), u64> = Default::default();
        for seq in ciphertexts {
            let mut hist: Vec<usize> = Vec::with_capacity(order);
            for &id in seq.payload() {
                let Some(c) = lm.idx(id) else {
                    hist.clear();
                    continue;
                };
                if hist.len() == order {
                    hist.remove(0);
                }
                hist.push(c);
                let mut key = [0; 3];
                key[..hist.len()].copy_from_slice(&hist);
                *tally.entry((key, hist.len())).or_default() += 1;
            }
        }
        let mut by_symbol = vec![Vec::new(); lm.alphabet_size()];
        let mut tuples = Vec::with_capacity(tally.len());
        let mut counts = Vec::with_capacity(tally.len());
        for (t, ((key, len), n)) in tally.into_iter().enumerate() {
            for s in key[..len].iter().copied().unique() {
                by_symbol[s].push(t);
            }
            tuples.push((key, len));
            counts.push(n as f64);
        }
        Self {
            tuples,
            counts,
            by_symbol,
        }
    }

    #[inline]
    fn tuple_lp(&self, lm: &NGramModel, t: usize, table: &[usize]) -> f64 {
        let (key, len) = self.tuples[t];
        let mut mapped = [0; 3];
        for i in 0..len {
            mapped[i] = table[key[i]];
        }
        lm.log_prob_indices(&mapped[..len])
    }

    fn score(&self, lm: &NGramModel, table: &[usize]) -> f64 {
        (0..self.tuples.len())
            .map(|t| self.counts[t] * self.tuple_lp(lm, t, table))
            .sum()
    }

    /// Score change from swapping the images of cipher indices `a` and `b`.
    fn swap_delta(&self, lm: &NGramModel, table: &mut [usize], a: usize, b: usize) -> f64 {
        let affected = || {
            self.by_symbol[a].iter().copied().chain(
                self.by_symbol[b]
                    .iter()
                    .copied()
                    .filter(|&t| !self.tuples[t].0[..self.tuples[t].1].contains(&a)),
            )
        };
        let before: f64 = affected()
            .map(|t| self.counts[t] * self.tuple_lp(lm, t, table))
            .sum();
        table.swap(a, b);
        let after: f64 = affected()
            .map(|t| self.counts[t] * self.tuple_lp(lm, t, table))
            .sum();
        table.swap(a, b);
        after - before
    }
}

/// Simulated annealing over decode maps, seeded from frequency analysis.
/// Each restart runs `opts.iterations` swap proposals with temperature
/// `T0 * r^t`. A swap that lowers the log-likelihood by `delta` is accepted
/// with probability `exp(delta / T)` in the first restart and
/// `exp(delta / n / T)` in later ones, `n` being the number of scored
/// symbols. The best map over all restarts is returned, ties going to the
/// earliest restart.
pub fn hillclimb_decipher(
    ciphertexts: &[TokenSeq],
    lm: &NGramModel,
    opts: &HillClimbOptions,
) -> Result<SolverResult> {
    if opts.iterations == 0 || opts.restarts == 0 {
        return Err(Error::ZeroBudget);
    }
    if lm.order() < 2 {
        return Err(Error::InvalidOrder(lm.order()));
    }
    let a = lm.alphabet_size();
    let scorer = TupleScorer::new(ciphertexts, lm);
    let start = frequency_table(ciphertexts, lm);
    let start_score = scorer.score(lm, &start);
    let n_symbols = scorer.counts.iter().sum::<f64>().max(1.0);

    let mut best: Option<(f64, Vec<usize>)> = None;
    for restart in 0..opts.restarts {
        let mut rng = ChaCha8Rng::seed_from_u64(hash64(&[opts.seed, restart as u64]));
        // In raw nats a long ciphertext makes every downhill swap hopeless,
        // so the first restart is a plain climb from the frequency map. Later
        // restarts measure the change per symbol and actually explore.
        let delta_unit = if restart == 0 { 1.0 } else { n_symbols };
        let mut table = start.clone();
        let mut score = start_score;
        let mut run_best = (score, table.clone());
        let mut temp = opts.initial_temperature;
        for _ in 0..opts.iterations {
            if a >= 2 {
                let i = rng.gen_range(0..a);
                let j = (i + rng.gen_range(1..a)) % a;
                let delta = scorer.swap_delta(lm, &mut table, i, j);
                let u: f64 = rng.gen();
                if delta > 0.0 || u < (delta / delta_unit / temp).exp() {
                    table.swap(i, j);
                    score += delta;
                    if score > run_best.0 {
                        run_best = (score, table.clone());
                    }
                }
            }
            temp *= opts.cooling_rate;
        }
        // Rescore from scratch so the result does not carry drift from
        // accumulated deltas.
        let exact = scorer.score(lm, &run_best.1);
        if best.as_ref().is_none_or(|(s, _)| exact > *s) {
            best = Some((exact, run_best.1));
        }
    }
    let (score, table) = best.expect("at least one restart");
    Ok(SolverResult {
        decode_map: expand(lm.alphabet(), &table),
        score,
        iterations: opts.iterations * opts.restarts,
        restarts_used: opts.restarts,
    })
}

/// Exhaustive search over every bijection of the model alphabet, which must
/// have at most `max_size` symbols. Ties go to the lexicographically smallest
/// decode map.
pub fn brute_force_decipher(
    ciphertexts: &[TokenSeq],
    lm: &NGramModel,
    max_size: usize,
) -> Result<SolverResult> {
    let alphabet = lm.alphabet();
    if alphabet.len() > max_size {
        return Err(Error::AlphabetTooLarge {
            size: alphabet.len(),
            max: max_size,
        });
    }
    let scorer = TupleScorer::new(ciphertexts, lm);
    // Cipher slots in ascending ID order, candidate images enumerated in
    // ascending ID order: itertools yields them lexicographically.
    let by_id: Vec<usize> = (0..alphabet.len())
        .sorted_by_key(|&i| alphabet[i])
        .collect();
    let mut best: Option<(f64, Vec<usize>)> = None;
    let mut n = 0;
    for images in by_id.iter().copied().permutations(by_id.len()) {
        n += 1;
        let mut table = vec![0; alphabet.len()];
        for (&slot, img) in by_id.iter().zip(images) {
            table[slot] = img;
        }
        let score = scorer.score(lm, &table);
        if best.as_ref().is_none_or(|(s, _)| score > *s) {
            best = Some((score, table));
        }
    }
    let (score, table) = best.expect("alphabet is non-empty");
    Ok(SolverResult {
        decode_map: expand(alphabet, &table),
        score,
        iterations: n,
        restarts_used: 1,
    })
}

/// Fraction of `alphabet` slots where `predicted` agrees with `truth`.
pub fn symbol_accuracy(predicted: &DecodeMap, truth: &DecodeMap, alphabet: &[u8]) -> f64 {
    if alphabet.is_empty() {
        return 0.0;
    }
    let hits = alphabet
        .iter()
        .filter(|&&id| predicted[(id - 2) as usize] == truth[(id - 2) as usize])
        .count();
    hits as f64 / alphabet.len() as f64
}

/// What the `baseline` command writes per solved example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverReport {
    pub solver: String,
    pub decode_map: Vec<u8>,
    pub score: f64,
    pub iterations: usize,
    pub restarts_used: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub symbol_accuracy: Option<f64>,
}

impl SolverReport {
    pub fn new(solver: &str, result: &SolverResult, truth: Option<(&DecodeMap, &[u8])>) -> Self {
        Self {
            solver: solver.to_string(),
            decode_map: result.decode_map.to_vec(),
            score: result.score,
            iterations: result.iterations,
            restarts_used: result.restarts_used,
            symbol_accuracy: truth.map(|(t, alpha)| symbol_accuracy(&result.decode_map, t, alpha)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ngram::{full_alphabet, reference_model};
    use crate::textcorpus::{reference_corpus, TokenSeq, Vocab, SPACE};

    fn seq(ids: &[u8]) -> TokenSeq {
        TokenSeq::from_payload(ids).unwrap()
    }

    fn reference_seqs() -> Vec<TokenSeq> {
        let v = Vocab::new();
        reference_corpus()
            .iter()
            .map(|l| crate::textcorpus::encode(l, &v, 512).unwrap())
            .collect()
    }

    #[test]
    fn frequency_identity_fixes_unique_ranks() {
        let lm = reference_model(1, 0.5).unwrap();
        let text = reference_seqs();
        let r = frequency_decipher(&text, &lm);
        // The reference model was fitted on this text, so the two rankings
        // agree wherever counts are unique.
        let probs = lm.unigram_probs();
        for (i, &id) in lm.alphabet().iter().enumerate() {
            let unique = probs.iter().filter(|&&p| p == probs[i]).count() == 1;
            if unique {
                assert_eq!(r.decode_map[(id - 2) as usize], id);
            }
        }
    }

    #[test]
    fn frequency_ties_favor_lower_ids() {
        // 'a' (3) and 'b' (4) tie in the ciphertext; the plain model ranks
        // 'b' above 'a', so the lower cipher ID gets the top-ranked symbol.
        let alphabet = [3, 4];
        let lm = NGramModel::fit_sequences(&[seq(&[4, 4, 3])], 1, 0.5, &alphabet).unwrap();
        let r = frequency_decipher(&[seq(&[3, 4])], &lm);
        assert_eq!(r.decode_map[1], 4);
        assert_eq!(r.decode_map[2], 3);
    }

    #[test]
    fn frequency_sends_modal_symbol_to_space() {
        let lm = reference_model(1, 0.5).unwrap();
        let perm = Permutation::sample(99);
        let cipher: Vec<TokenSeq> = reference_seqs().iter().map(|s| perm.apply(s)).collect();
        let r = frequency_decipher(&cipher, &lm);
        let modal = perm.image(SPACE);
        assert_eq!(r.decode_map[(modal - 2) as usize], SPACE);
    }

    #[test]
    fn rejects_zero_budget_and_unigram_model() {
        let lm = reference_model(3, 0.5).unwrap();
        let s = reference_seqs();
        let opts = HillClimbOptions {
            iterations: 0,
            ..Default::default()
        };
        assert!(hillclimb_decipher(&s, &lm, &opts).is_err());
        let uni = reference_model(1, 0.5).unwrap();
        assert!(hillclimb_decipher(&s, &uni, &HillClimbOptions::default()).is_err());
    }

    #[test]
    fn brute_force_limits_and_single_symbol() {
        let lm = reference_model(2, 0.5).unwrap();
        assert!(matches!(
            brute_force_decipher(&[], &lm, BRUTE_FORCE_MAX),
            Err(Error::AlphabetTooLarge { size: 27, max: 8 })
        ));
        let one = NGramModel::fit_sequences(&[seq(&[5, 5])], 2, 0.5, &[5]).unwrap();
        let r = brute_force_decipher(&[seq(&[5, 5, 5])], &one, BRUTE_FORCE_MAX).unwrap();
        assert!(Permutation::from_map(r.decode_map).unwrap().is_identity());
    }

    #[test]
    fn tuple_scores_match_direct_likelihood() {
        let lm = reference_model(3, 0.5).unwrap();
        let perm = Permutation::sample(4);
        let text: Vec<TokenSeq> = reference_seqs()[..5].iter().map(|s| perm.apply(s)).collect();
        let map = *Permutation::sample(8).map();
        let table: Vec<usize> = full_alphabet()
            .iter()
            .map(|&id| lm.idx(map[(id - 2) as usize]).unwrap())
            .collect();
        let scorer = TupleScorer::new(&text, &lm);
        let direct = decoded_log_likelihood(&text, &lm, &map);
        assert!((scorer.score(&lm, &table) - direct).abs() < 1e-6 * direct.abs());
        let mut t2 = table.clone();
        let delta = scorer.swap_delta(&lm, &mut t2, 3, 17);
        assert_eq!(t2, table);
        t2.swap(3, 17);
        let swapped = scorer.score(&lm, &t2) - scorer.score(&lm, &table);
        assert!((delta - swapped).abs() < 1e-6);
    }
}

//! Add-k smoothed character n-gram model over the cipherable alphabet.
//!
//! Counts are tallied for every order up to the model order over windows
//! that stay inside a line. A position with fewer than `order - 1` preceding
//! characters is scored by the table matching its available context, so the
//! first character of a line uses the unigram table, the second the bigram
//! table, and so on.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::textcorpus::{
    NormalizedLine, TokenSeq, Vocab, FIRST_CONTENT, LAST_CONTENT, SPACE, VOCAB_SIZE,
};

pub const DEFAULT_K: f64 = 0.5;
pub const DEFAULT_ORDER: usize = 3;

const ABSENT: u8 = u8::MAX;

/// On-disk layout: header fields plus raw counts per order.
#[derive(Serialize, Deserialize)]
struct ModelFile {
    order: usize,
    k: f64,
    alphabet_size: usize,
    alphabet: Vec<u8>,
    counts: Vec<Vec<u64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ModelFile", into = "ModelFile")]
pub struct NGramModel {
    order: usize,
    k: f64,
    alphabet: Vec<u8>,
    index: [u8; VOCAB_SIZE],
    /// `counts[o - 1]` has `A^o` entries laid out as `context * A + symbol`.
    counts: Vec<Vec<u64>>,
    /// Smoothed natural-log probabilities, same layout as `counts`.
    log_probs: Vec<Vec<f64>>,
}

impl NGramModel {
    /// An unfitted model: every conditional distribution is uniform.
    pub fn new(order: usize, k: f64, alphabet: &[u8]) -> Result<Self> {
        if !(1..=3).contains(&order) {
            return Err(Error::InvalidOrder(order));
        }
        if !(k > 0.0 && k.is_finite()) {
            return Err(Error::InvalidSmoothing(k));
        }
        let mut index = [ABSENT; VOCAB_SIZE];
        for (i, &id) in alphabet.iter().enumerate() {
            if !(FIRST_CONTENT..=LAST_CONTENT).contains(&id) {
                return Err(Error::InvalidAlphabet(format!("id {id} is not cipherable")));
            }
            if index[id as usize] != ABSENT {
                return Err(Error::InvalidAlphabet(format!("id {id} repeated")));
            }
            index[id as usize] = i as u8;
        }
        if alphabet.is_empty() {
            return Err(Error::InvalidAlphabet("empty alphabet".into()));
        }
        let a = alphabet.len();
        let counts: Vec<Vec<u64>> = (1..=order).map(|o| vec![0; a.pow(o as u32)]).collect();
        let mut model = Self {
            order,
            k,
            alphabet: alphabet.to_vec(),
            index,
            counts,
            log_probs: Vec::new(),
        };
        model.rebuild_log_probs();
        Ok(model)
    }

    /// Fits over the full 27-symbol alphabet.
    pub fn fit(corpus: &[NormalizedLine], order: usize, k: f64) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let vocab = Vocab::new();
        let mut model = Self::new(order, k, &full_alphabet())?;
        for line in corpus {
            let payload: Vec<u8> = line
                .text()
                .chars()
                .map(|c| vocab.char_id(c).expect("normalized line"))
                .collect();
            model.observe(&payload);
        }
        model.rebuild_log_probs();
        Ok(model)
    }

    /// Fits over token sequences restricted to `alphabet`.
    pub fn fit_sequences(
        seqs: &[TokenSeq],
        order: usize,
        k: f64,
        alphabet: &[u8],
    ) -> Result<Self> {
        if seqs.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let mut model = Self::new(order, k, alphabet)?;
        for s in seqs {
            model.observe(s.payload());
        }
        model.rebuild_log_probs();
        Ok(model)
    }

    /// Tallies one line. Symbols outside the alphabet break the window.
    fn observe(&mut self, payload: &[u8]) {
        let a = self.alphabet.len();
        let mut hist: Vec<usize> = Vec::with_capacity(self.order);
        for &id in payload {
            let Some(c) = self.idx(id) else {
                hist.clear();
                continue;
            };
            for o in 1..=self.order.min(hist.len() + 1) {
                let ctx = &hist[hist.len() + 1 - o..];
                let slot = context_index(ctx, a) * a + c;
                self.counts[o - 1][slot] += 1;
            }
            hist.push(c);
            if hist.len() >= self.order {
                hist.remove(0);
            }
        }
    }

    fn rebuild_log_probs(&mut self) {
        let a = self.alphabet.len();
        let k = self.k;
        self.log_probs = self
            .counts
            .iter()
            .map(|table| {
                let mut lp = vec![0.0; table.len()];
                for (ctx_counts, ctx_lp) in table.chunks(a).zip(lp.chunks_mut(a)) {
                    let total: u64 = ctx_counts.iter().sum();
                    let denom = total as f64 + k * a as f64;
                    for (c, l) in ctx_counts.iter().zip(ctx_lp.iter_mut()) {
                        *l = ((*c as f64 + k) / denom).ln();
                    }
                }
                lp
            })
            .collect();
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn k(&self) -> f64 {
        self.k
    }

    pub fn alphabet(&self) -> &[u8] {
        &self.alphabet
    }

    pub fn alphabet_size(&self) -> usize {
        self.alphabet.len()
    }

    /// Position of `id` within the alphabet.
    #[inline]
    pub fn idx(&self, id: u8) -> Option<usize> {
        match self.index.get(id as usize) {
            Some(&i) if i != ABSENT => Some(i as usize),
            _ => None,
        }
    }

    /// Log-probability of a tuple of alphabet indices `(context.., symbol)`;
    /// the tuple length selects the table and must be in `1..=order`.
    #[inline]
    pub fn log_prob_indices(&self, tuple: &[usize]) -> f64 {
        let a = self.alphabet.len();
        let (ctx, c) = tuple.split_at(tuple.len() - 1);
        self.log_probs[tuple.len() - 1][context_index(ctx, a) * a + c[0]]
    }

    /// Smoothed `P(id | context)`, using at most the last `order - 1` context IDs.
    pub fn prob(&self, context: &[u8], id: u8) -> f64 {
        self.log_prob(context, id).exp()
    }

    pub fn log_prob(&self, context: &[u8], id: u8) -> f64 {
        let c = self.idx(id).expect("symbol in alphabet");
        let ctx = self.context_indices(context);
        let mut tuple = ctx;
        tuple.push(c);
        self.log_prob_indices(&tuple)
    }

    /// Full conditional distribution over the alphabet, in alphabet order.
    pub fn distribution(&self, context: &[u8]) -> Vec<f64> {
        let a = self.alphabet.len();
        let ctx = self.context_indices(context);
        let base = context_index(&ctx, a) * a;
        self.log_probs[ctx.len()][base..base + a]
            .iter()
            .map(|l| l.exp())
            .collect()
    }

    fn context_indices(&self, context: &[u8]) -> Vec<usize> {
        let mut ctx = Vec::with_capacity(self.order - 1);
        for &id in context.iter().rev() {
            if ctx.len() == self.order - 1 {
                break;
            }
            match self.idx(id) {
                Some(i) => ctx.push(i),
                None => break,
            }
        }
        ctx.reverse();
        ctx
    }

    /// Sum of `ln P(c_i | context)` over the payload; BOS/EOS are not scored.
    /// Symbols outside the alphabet are skipped and reset the context.
    pub fn log_likelihood(&self, seq: &TokenSeq) -> f64 {
        self.log_likelihood_payload(seq.payload())
    }

    pub fn log_likelihood_payload(&self, payload: &[u8]) -> f64 {
        let mut total = 0.0;
        let mut tuple: Vec<usize> = Vec::with_capacity(self.order);
        for &id in payload {
            let Some(c) = self.idx(id) else {
                tuple.clear();
                continue;
            };
            if tuple.len() == self.order {
                tuple.remove(0);
            }
            tuple.push(c);
            total += self.log_prob_indices(&tuple);
        }
        total
    }

    /// The order-1 model sharing this model's unigram counts.
    pub fn unigram(&self) -> NGramModel {
        let mut m = Self {
            order: 1,
            k: self.k,
            alphabet: self.alphabet.clone(),
            index: self.index,
            counts: vec![self.counts[0].clone()],
            log_probs: Vec::new(),
        };
        m.rebuild_log_probs();
        m
    }

    /// Smoothed unigram probabilities in alphabet order.
    pub fn unigram_probs(&self) -> Vec<f64> {
        self.log_probs[0].iter().map(|l| l.exp()).collect()
    }

    pub fn counts(&self, order: usize) -> &[u64] {
        &self.counts[order - 1]
    }

    /// Draws the next symbol given the line so far. With `forbid_space` the
    /// space symbol is removed and the rest renormalized.
    pub fn sample_next<R: Rng + ?Sized>(&self, history: &[u8], forbid_space: bool, rng: &mut R) -> u8 {
        let mut dist = self.distribution(history);
        if forbid_space {
            if let Some(s) = self.idx(SPACE) {
                dist[s] = 0.0;
            }
        }
        let total: f64 = dist.iter().sum();
        let mut u = rng.gen::<f64>() * total;
        for (i, p) in dist.iter().enumerate() {
            if *p > 0.0 {
                if u < *p {
                    return self.alphabet[i];
                }
                u -= p;
            }
        }
        // rounding fallthrough: last admissible symbol
        let last = dist.iter().rposition(|p| *p > 0.0).expect("non-empty support");
        self.alphabet[last]
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

impl From<NGramModel> for ModelFile {
    fn from(m: NGramModel) -> Self {
        ModelFile {
            order: m.order,
            k: m.k,
            alphabet_size: m.alphabet.len(),
            alphabet: m.alphabet,
            counts: m.counts,
        }
    }
}

impl TryFrom<ModelFile> for NGramModel {
    type Error = Error;

    fn try_from(f: ModelFile) -> Result<Self> {
        if f.alphabet_size != f.alphabet.len() {
            return Err(Error::InvalidAlphabet("alphabet_size mismatch".into()));
        }
        let mut m = NGramModel::new(f.order, f.k, &f.alphabet)?;
        if f.counts.len() != m.counts.len()
            || f.counts.iter().zip(&m.counts).any(|(a, b)| a.len() != b.len())
        {
            return Err(Error::InvalidAlphabet("count table shape mismatch".into()));
        }
        m.counts = f.counts;
        m.rebuild_log_probs();
        Ok(m)
    }
}

#[inline]
fn context_index(ctx: &[usize], a: usize) -> usize {
    ctx.iter().fold(0, |acc, &c| acc * a + c)
}

/// IDs 2..=28: space then 'a'..='z'.
pub fn full_alphabet() -> Vec<u8> {
    (FIRST_CONTENT..=LAST_CONTENT).collect()
}

/// Trigram model fitted on the built-in English reference text; the default
/// source for synthetic corpora.
pub fn reference_model(order: usize, k: f64) -> Result<NGramModel> {
    NGramModel::fit(&crate::textcorpus::reference_corpus(), order, k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::textcorpus::encode_str;

    fn line(t: &str) -> NormalizedLine {
        NormalizedLine::new(t, 0).unwrap()
    }

    #[test]
    fn bigram_hand_count_on_two_letter_alphabet() {
        let v = Vocab::new();
        let a = v.char_id('a').unwrap();
        let b = v.char_id('b').unwrap();
        let s = encode_str("aaaa", &v, 512).unwrap();
        let m = NGramModel::fit_sequences(&[s], 2, 0.5, &[a, b]).unwrap();
        assert!((m.prob(&[a], a) - 0.875).abs() < 1e-15);
        assert!((m.prob(&[a], b) - 0.125).abs() < 1e-15);
    }

    #[test]
    fn unigram_hand_arithmetic() {
        let v = Vocab::new();
        let m = NGramModel::fit(&[line("ab")], 1, 0.5).unwrap();
        let expect = 1.5 / (2.0 + 0.5 * 27.0);
        assert!((m.prob(&[], v.char_id('a').unwrap()) - expect).abs() < 1e-15);
        assert!((m.prob(&[], v.char_id('b').unwrap()) - expect).abs() < 1e-15);
        let unseen = 0.5 / (2.0 + 0.5 * 27.0);
        assert!((m.prob(&[], v.char_id('z').unwrap()) - unseen).abs() < 1e-15);
    }

    #[test]
    fn empty_payload_scores_zero_and_uniform_model_scores_ln27() {
        let m = NGramModel::new(1, 0.5, &full_alphabet()).unwrap();
        let v = Vocab::new();
        assert_eq!(m.log_likelihood(&encode_str("", &v, 512).unwrap()), 0.0);
        let one = encode_str("q", &v, 512).unwrap();
        assert!((m.log_likelihood(&one) - (1.0f64 / 27.0).ln()).abs() < 1e-12);
        assert!((m.log_likelihood(&one) + 3.295_836_866_004_329).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_construction() {
        assert!(matches!(NGramModel::fit(&[], 2, 0.5), Err(Error::EmptyCorpus)));
        assert!(matches!(
            NGramModel::fit(&[line("a")], 4, 0.5),
            Err(Error::InvalidOrder(4))
        ));
        assert!(matches!(
            NGramModel::fit(&[line("a")], 2, 0.0),
            Err(Error::InvalidSmoothing(_))
        ));
        assert!(NGramModel::new(2, 0.5, &[3, 3]).is_err());
        assert!(NGramModel::new(2, 0.5, &[0]).is_err());
    }

    #[test]
    fn windows_do_not_cross_lines() {
        let v = Vocab::new();
        let m = NGramModel::fit(&[line("ab"), line("cd")], 2, 0.5).unwrap();
        let a = m.alphabet_size();
        let (b, c) = (
            m.idx(v.char_id('b').unwrap()).unwrap(),
            m.idx(v.char_id('c').unwrap()).unwrap(),
        );
        assert_eq!(m.counts(2)[b * a + c], 0);
        assert_eq!(m.counts(2).iter().sum::<u64>(), 2);
        assert_eq!(m.counts(1).iter().sum::<u64>(), 4);
    }

    #[test]
    fn json_round_trip_is_exact() {
        let m = reference_model(3, 0.5).unwrap();
        let back = NGramModel::from_json(&m.to_json().unwrap()).unwrap();
        assert_eq!(back, m);
        let json = m.to_json().unwrap();
        assert!(json.starts_with("{\"order\":3,\"k\":0.5,\"alphabet_size\":27"));
    }

    #[test]
    fn unigram_view_shares_counts() {
        let m = reference_model(3, 0.5).unwrap();
        let u = m.unigram();
        assert_eq!(u.order(), 1);
        assert_eq!(u.counts(1), m.counts(1));
        // space is the modal symbol of English text
        let probs = u.unigram_probs();
        let modal = probs
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap()
            .0;
        assert_eq!(u.alphabet()[modal], SPACE);
    }
}

//! Corpus ingestion: normalization to the 27-character alphabet, the fixed
//! 29-entry vocabulary, and conversion between text and token-ID sequences.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ngram::NGramModel;

pub const BOS: u8 = 0;
pub const EOS: u8 = 1;
pub const SPACE: u8 = 2;
/// Smallest and largest cipherable IDs (space and 'a'..='z').
pub const FIRST_CONTENT: u8 = 2;
pub const LAST_CONTENT: u8 = 28;
pub const VOCAB_SIZE: usize = 29;
/// Number of cipherable symbols: 26 letters plus space.
pub const ALPHABET_SIZE: usize = 27;
pub const MAX_SEQ_LEN: usize = 512;

const MIN_SYNTH_LEN: usize = 40;
const MAX_SYNTH_LEN: usize = 510;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Symbol {
    Bos,
    Eos,
    Char(char),
}

impl fmt::Display for Symbol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Symbol::Bos => f.write_str("<bos>"),
            Symbol::Eos => f.write_str("<eos>"),
            Symbol::Char(c) => write!(f, "{c}"),
        }
    }
}

/// The fixed character vocabulary: 0 = BOS, 1 = EOS, 2 = space,
/// 3..=28 = 'a'..='z'.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    symbols: [Symbol; VOCAB_SIZE],
}

impl Default for Vocab {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocab {
    pub fn new() -> Self {
        let mut symbols = [Symbol::Bos; VOCAB_SIZE];
        symbols[EOS as usize] = Symbol::Eos;
        symbols[SPACE as usize] = Symbol::Char(' ');
        for (i, c) in ('a'..='z').enumerate() {
            symbols[3 + i] = Symbol::Char(c);
        }
        Self { symbols }
    }

    pub fn size(&self) -> usize {
        VOCAB_SIZE
    }

    pub fn id_of(&self, symbol: Symbol) -> Option<u8> {
        match symbol {
            Symbol::Bos => Some(BOS),
            Symbol::Eos => Some(EOS),
            Symbol::Char(c) => self.char_id(c),
        }
    }

    /// ID of a content character (space or lowercase ASCII letter).
    pub fn char_id(&self, c: char) -> Option<u8> {
        match c {
            ' ' => Some(SPACE),
            'a'..='z' => Some(3 + (c as u8 - b'a')),
            _ => None,
        }
    }

    pub fn symbol_of(&self, id: u8) -> Option<Symbol> {
        self.symbols.get(id as usize).copied()
    }

    /// Content character for a cipherable ID; `None` for BOS/EOS or out of range.
    pub fn char_of(&self, id: u8) -> Option<char> {
        match self.symbol_of(id)? {
            Symbol::Char(c) => Some(c),
            _ => None,
        }
    }
}

/// A corpus line restricted to `[a-z ]`, trimmed, with single spaces only.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NormalizedLine {
    text: String,
    source_index: usize,
}

impl NormalizedLine {
    /// Validates an already-normalized string.
    pub fn new(text: impl Into<String>, source_index: usize) -> Result<Self> {
        let text = text.into();
        if let Some(c) = text.chars().find(|c| !matches!(c, 'a'..='z' | ' ')) {
            return Err(Error::OutOfAlphabet(c));
        }
        if text.starts_with(' ') || text.ends_with(' ') || text.contains("  ") {
            return Err(Error::MalformedSequence(format!(
                "line {source_index} is not whitespace-normalized"
            )));
        }
        Ok(Self { text, source_index })
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn source_index(&self) -> usize {
        self.source_index
    }

    pub fn len(&self) -> usize {
        self.text.len()
    }

    pub fn is_empty(&self) -> bool {
        self.text.is_empty()
    }
}

impl fmt::Display for NormalizedLine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.text)
    }
}

/// Lowercase ASCII letters, turn everything else into a space, collapse runs
/// of spaces and trim.
pub fn normalize(raw: &str) -> NormalizedLine {
    normalize_indexed(raw, 0)
}

pub fn normalize_indexed(raw: &str, source_index: usize) -> NormalizedLine {
    let mut text = String::with_capacity(raw.len());
    let mut pending_space = false;
    for c in raw.chars() {
        let c = c.to_ascii_lowercase();
        if c.is_ascii_lowercase() {
            if pending_space && !text.is_empty() {
                text.push(' ');
            }
            pending_space = false;
            text.push(c);
        } else {
            pending_space = true;
        }
    }
    NormalizedLine { text, source_index }
}

/// Normalizes every line of a raw corpus, one output line per input line.
pub fn normalize_corpus(raw: &str) -> Vec<NormalizedLine> {
    raw.lines()
        .enumerate()
        .map(|(i, line)| normalize_indexed(line, i))
        .collect()
}

/// A BOS ... EOS framed sequence of vocabulary IDs, at most 512 long.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<u32>", into = "Vec<u32>")]
pub struct TokenSeq {
    ids: Vec<u8>,
}

impl TokenSeq {
    pub fn from_ids(ids: &[u32]) -> Result<Self> {
        let ids = ids
            .iter()
            .map(|&id| {
                if id <= LAST_CONTENT as u32 {
                    Ok(id as u8)
                } else {
                    Err(Error::InvalidTokenId(id))
                }
            })
            .collect::<Result<Vec<u8>>>()?;
        Self::from_vec(ids)
    }

    pub fn from_vec(ids: Vec<u8>) -> Result<Self> {
        if let Some(&bad) = ids.iter().find(|&&id| id > LAST_CONTENT) {
            return Err(Error::InvalidTokenId(bad as u32));
        }
        if ids.len() < 2 || ids[0] != BOS || ids[ids.len() - 1] != EOS {
            return Err(Error::MalformedSequence(
                "sequence must start with BOS and end with EOS".into(),
            ));
        }
        if ids.len() > MAX_SEQ_LEN {
            return Err(Error::MalformedSequence(format!(
                "length {} exceeds {MAX_SEQ_LEN}",
                ids.len()
            )));
        }
        if ids[1..ids.len() - 1].iter().any(|&id| id < FIRST_CONTENT) {
            return Err(Error::MalformedSequence(
                "BOS/EOS inside the payload".into(),
            ));
        }
        Ok(Self { ids })
    }

    /// Frames content IDs with BOS and EOS.
    pub fn from_payload(payload: &[u8]) -> Result<Self> {
        let mut ids = Vec::with_capacity(payload.len() + 2);
        ids.push(BOS);
        ids.extend_from_slice(payload);
        ids.push(EOS);
        Self::from_vec(ids)
    }

    /// Frames a payload of content IDs; the caller guarantees validity.
    pub(crate) fn from_payload_unchecked(payload: impl IntoIterator<Item = u8>) -> Self {
        let mut ids = vec![BOS];
        ids.extend(payload);
        ids.push(EOS);
        debug_assert!(ids.len() <= MAX_SEQ_LEN);
        Self { ids }
    }

    pub fn ids(&self) -> &[u8] {
        &self.ids
    }

    /// Content IDs between BOS and EOS.
    pub fn payload(&self) -> &[u8] {
        &self.ids[1..self.ids.len() - 1]
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.payload().is_empty()
    }
}

impl TryFrom<Vec<u32>> for TokenSeq {
    type Error = Error;

    fn try_from(ids: Vec<u32>) -> Result<Self> {
        Self::from_ids(&ids)
    }
}

impl From<TokenSeq> for Vec<u32> {
    fn from(seq: TokenSeq) -> Self {
        seq.ids.into_iter().map(u32::from).collect()
    }
}

/// `[BOS] + ids(line) + [EOS]`, keeping the longest prefix that fits `max_len`.
pub fn encode(line: &NormalizedLine, vocab: &Vocab, max_len: usize) -> Result<TokenSeq> {
    encode_str(line.text(), vocab, max_len)
}

pub(crate) fn encode_str(text: &str, vocab: &Vocab, max_len: usize) -> Result<TokenSeq> {
    if max_len < 2 {
        return Err(Error::MaxLenTooSmall(max_len));
    }
    let cap = max_len.min(MAX_SEQ_LEN) - 2;
    let payload = text
        .chars()
        .map(|c| vocab.char_id(c).ok_or(Error::OutOfAlphabet(c)))
        .collect::<Result<Vec<u8>>>()?;
    Ok(TokenSeq::from_payload_unchecked(
        payload.into_iter().take(cap),
    ))
}

/// Inverse of [`encode`] for raw ID slices; BOS/EOS framing is stripped.
pub fn decode_ids(ids: &[u32], vocab: &Vocab) -> Result<String> {
    let seq = TokenSeq::from_ids(ids)?;
    Ok(decode(&seq, vocab))
}

pub fn decode(seq: &TokenSeq, vocab: &Vocab) -> String {
    seq.payload()
        .iter()
        .map(|&id| vocab.char_of(id).expect("payload holds content ids"))
        .collect()
}

/// Samples `n_lines` lines from `lm`, each of uniform length in [40, 510].
///
/// The first character, the last character and any character following a
/// space are drawn from the model's distribution with space excluded, so every
/// line satisfies the [`NormalizedLine`] invariants.
pub fn synth_corpus(seed: u64, n_lines: usize, lm: &NGramModel) -> Vec<NormalizedLine> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vocab = Vocab::new();
    (0..n_lines)
        .map(|index| {
            let len = rng.gen_range(MIN_SYNTH_LEN..=MAX_SYNTH_LEN);
            let mut ids: Vec<u8> = Vec::with_capacity(len);
            for pos in 0..len {
                let forbid_space =
                    pos == 0 || pos + 1 == len || ids.last() == Some(&SPACE);
                ids.push(lm.sample_next(&ids, forbid_space, &mut rng));
            }
            let text: String = ids
                .iter()
                .map(|&id| vocab.char_of(id).expect("sampled content id"))
                .collect();
            NormalizedLine { text, source_index: index }
        })
        .collect()
}

/// Built-in English reference text used to fit the default synthetic-corpus
/// model.
pub fn reference_text() -> &'static str {
    include_str!("../data/reference.txt")
}

pub fn reference_corpus() -> Vec<NormalizedLine> {
    normalize_corpus(reference_text())
        .into_iter()
        .filter(|l| !l.is_empty())
        .collect()
}

//! Invertible substitutions over the 27 cipherable symbols and cipher
//! datasets in which every example carries its own substitution.

use std::fmt;
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::textcorpus::{
    encode, NormalizedLine, TokenSeq, Vocab, ALPHABET_SIZE, FIRST_CONTENT, LAST_CONTENT,
    MAX_SEQ_LEN, SPACE,
};

/// A decode dictionary: slot `j` holds the plaintext ID for cipher ID `2 + j`.
pub type DecodeMap = [u8; ALPHABET_SIZE];

/// A bijection on the cipherable IDs 2..=28. BOS and EOS are fixed points.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<u8>", into = "Vec<u8>")]
pub struct Permutation {
    map: [u8; ALPHABET_SIZE],
}

impl fmt::Debug for Permutation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let v = Vocab::new();
        let s: String = self.map.iter().map(|&id| v.char_of(id).unwrap()).collect();
        write!(f, "Permutation({s:?})")
    }
}

impl Permutation {
    pub fn identity() -> Self {
        let mut map = [0u8; ALPHABET_SIZE];
        for (j, m) in map.iter_mut().enumerate() {
            *m = FIRST_CONTENT + j as u8;
        }
        Self { map }
    }

    /// Builds a permutation from its image table, rejecting non-bijections.
    pub fn from_map(map: [u8; ALPHABET_SIZE]) -> Result<Self> {
        let mut seen = [false; ALPHABET_SIZE];
        for &id in &map {
            if !(FIRST_CONTENT..=LAST_CONTENT).contains(&id) {
                return Err(Error::NotAPermutation(format!("id {id} out of range")));
            }
            let slot = (id - FIRST_CONTENT) as usize;
            if seen[slot] {
                return Err(Error::NotAPermutation(format!("id {id} repeated")));
            }
            seen[slot] = true;
        }
        Ok(Self { map })
    }

    /// Builds the substitution that sends `before[i]` to `after[i]`.
    /// Both strings must list the same 27 symbols of `[a-z ]`.
    pub fn from_rule(before: &str, after: &str) -> Result<Self> {
        let vocab = Vocab::new();
        let ids = |s: &str| {
            s.chars()
                .map(|c| vocab.char_id(c).ok_or(Error::OutOfAlphabet(c)))
                .collect::<Result<Vec<u8>>>()
        };
        let (from, to) = (ids(before)?, ids(after)?);
        if from.len() != ALPHABET_SIZE || to.len() != ALPHABET_SIZE {
            return Err(Error::NotAPermutation(format!(
                "rule rows must have {ALPHABET_SIZE} symbols, got {} and {}",
                from.len(),
                to.len()
            )));
        }
        Self::from_map(to_array(&from))?;
        let mut map = [0u8; ALPHABET_SIZE];
        for (&f, &t) in from.iter().zip(&to) {
            map[(f - FIRST_CONTENT) as usize] = t;
        }
        Self::from_map(map)
    }

    /// Uniform sample over all 27! substitutions (seeded Fisher-Yates).
    pub fn sample(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Self::identity();
        p.map.shuffle(&mut rng);
        p
    }

    /// As [`Permutation::sample`] but keeps space fixed and permutes only the
    /// 26 letters.
    pub fn sample_letters_only(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Self::identity();
        p.map[1..].shuffle(&mut rng);
        p
    }

    pub fn map(&self) -> &[u8; ALPHABET_SIZE] {
        &self.map
    }

    /// Image of a single ID; BOS and EOS map to themselves.
    #[inline]
    pub fn image(&self, id: u8) -> u8 {
        if id < FIRST_CONTENT {
            id
        } else {
            self.map[(id - FIRST_CONTENT) as usize]
        }
    }

    pub fn apply(&self, seq: &TokenSeq) -> TokenSeq {
        TokenSeq::from_payload_unchecked(seq.payload().iter().map(|&id| self.image(id)))
    }

    pub fn invert(&self) -> Self {
        let mut map = [0u8; ALPHABET_SIZE];
        for (j, &img) in self.map.iter().enumerate() {
            map[(img - FIRST_CONTENT) as usize] = FIRST_CONTENT + j as u8;
        }
        Self { map }
    }

    /// `apply(compose(g1, g2), s) == apply(g1, apply(g2, s))`.
    pub fn compose(g1: &Self, g2: &Self) -> Self {
        let mut map = [0u8; ALPHABET_SIZE];
        for (m, &mid) in map.iter_mut().zip(&g2.map) {
            *m = g1.image(mid);
        }
        Self { map }
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::identity()
    }
}

fn to_array(v: &[u8]) -> [u8; ALPHABET_SIZE] {
    let mut a = [0u8; ALPHABET_SIZE];
    a.copy_from_slice(v);
    a
}

impl TryFrom<Vec<u8>> for Permutation {
    type Error = Error;

    fn try_from(v: Vec<u8>) -> Result<Self> {
        if v.len() != ALPHABET_SIZE {
            return Err(Error::NotAPermutation(format!("length {}", v.len())));
        }
        Self::from_map(to_array(&v))
    }
}

impl From<Permutation> for Vec<u8> {
    fn from(p: Permutation) -> Self {
        p.map.to_vec()
    }
}

pub fn sample_permutation(seed: u64) -> Permutation {
    Permutation::sample(seed)
}

pub fn apply(perm: &Permutation, seq: &TokenSeq) -> TokenSeq {
    perm.apply(seq)
}

pub fn invert(perm: &Permutation) -> Permutation {
    perm.invert()
}

pub fn compose(g1: &Permutation, g2: &Permutation) -> Permutation {
    Permutation::compose(g1, g2)
}

/// Applies a decode dictionary symbol-wise to a ciphertext.
pub fn apply_decode_map(map: &DecodeMap, seq: &TokenSeq) -> TokenSeq {
    TokenSeq::from_payload_unchecked(
        seq.payload()
            .iter()
            .map(|&id| map[(id - FIRST_CONTENT) as usize]),
    )
}

/// splitmix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Order-sensitive 64-bit hash of a tuple of integers.
pub fn hash64(parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(0x6A09_E667_F3BC_C908, |acc, &p| mix64(acc ^ mix64(p)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn tag(self) -> u64 {
        match self {
            Split::Train => 0x7472_6169_6e00_0001,
            Split::Test => 0x7465_7374_0000_0002,
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidConfig(format!("unknown split {other:?}"))),
        }
    }
}

pub fn example_seed(dataset_seed: u64, split: Split, index: usize) -> u64 {
    hash64(&[dataset_seed, split.tag(), index as u64])
}

/// One record: a ciphertext and the dictionary that deciphers it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CipherExample {
    pub ciphertext: TokenSeq,
    pub decode_target: DecodeMap,
    pub perm_seed: u64,
}

impl CipherExample {
    /// Enciphers `plaintext` with `perm`; the target is `perm`'s inverse.
    pub fn new(plaintext: &TokenSeq, perm: &Permutation, perm_seed: u64) -> Self {
        Self {
            ciphertext: perm.apply(plaintext),
            decode_target: *perm.invert().map(),
            perm_seed,
        }
    }

    pub fn plaintext(&self) -> TokenSeq {
        apply_decode_map(&self.decode_target, &self.ciphertext)
    }

    /// The same plaintext under `h ∘ G`: ciphertext `h(c)`, target `G⁻¹ ∘ h⁻¹`.
    pub fn relabeled(&self, h: &Permutation) -> Self {
        let target = Permutation::from_map(self.decode_target).expect("targets are bijections");
        Self {
            ciphertext: h.apply(&self.ciphertext),
            decode_target: *Permutation::compose(&target, &h.invert()).map(),
            perm_seed: self.perm_seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetOptions {
    /// Keep space fixed and substitute letters only.
    pub pin_space: bool,
    pub max_len: usize,
    pub n_multiplier: u32,
}

impl Default for DatasetOptions {
    fn default() -> Self {
        Self {
            pin_space: false,
            max_len: MAX_SEQ_LEN,
            n_multiplier: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CipherDataset {
    pub examples: Vec<CipherExample>,
    pub seed: u64,
    pub n_multiplier: u32,
    pub split: Split,
}

impl CipherDataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// One JSON object per line: `ciphertext`, `decode_target`, `perm_seed`.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for ex in &self.examples {
            serde_json::to_writer(&mut w, ex)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_jsonl_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    /// Reads examples back; metadata is supplied by the caller.
    pub fn read_jsonl<R: BufRead>(
        r: R,
        seed: u64,
        n_multiplier: u32,
        split: Split,
    ) -> Result<Self> {
        let mut examples = Vec::new();
        for line in r.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let ex: CipherExample = serde_json::from_str(&line)?;
            Permutation::from_map(ex.decode_target)?;
            examples.push(ex);
        }
        Ok(Self {
            examples,
            seed,
            n_multiplier,
            split,
        })
    }
}

pub fn build_dataset(
    corpus: &[NormalizedLine],
    vocab: &Vocab,
    seed: u64,
    split: Split,
) -> Result<CipherDataset> {
    build_dataset_with(corpus, vocab, seed, split, &DatasetOptions::default())
}

/// One example per corpus line, each enciphered with a permutation drawn
/// from the `(seed, split, index)` seed stream.
pub fn build_dataset_with(
    corpus: &[NormalizedLine],
    vocab: &Vocab,
    seed: u64,
    split: Split,
    opts: &DatasetOptions,
) -> Result<CipherDataset> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let examples = corpus
        .iter()
        .enumerate()
        .map(|(i, line)| {
            let plain = encode(line, vocab, opts.max_len)?;
            let perm_seed = example_seed(seed, split, i);
            let perm = if opts.pin_space {
                Permutation::sample_letters_only(perm_seed)
            } else {
                Permutation::sample(perm_seed)
            };
            Ok(CipherExample::new(&plain, &perm, perm_seed))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CipherDataset {
        examples,
        seed,
        n_multiplier: opts.n_multiplier,
        split,
    })
}

/// Builds a sequence that contains a symbol moved by `perm`, so that
/// `perm.apply(s) != s` whenever `perm` is not the identity.
pub fn witness_sequence(perm: &Permutation) -> Option<TokenSeq> {
    perm.map
        .iter()
        .enumerate()
        .find(|&(j, &img)| img != FIRST_CONTENT + j as u8)
        .map(|(j, _)| TokenSeq::from_payload_unchecked([FIRST_CONTENT + j as u8, SPACE]))
}

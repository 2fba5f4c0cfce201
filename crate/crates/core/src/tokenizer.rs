//! Byte-level vocabulary with the two LoMA special tokens, corpus
//! ingestion, and training-length planning.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::seeded_rng;

pub type TokenId = usize;

pub const BYTE_TOKENS: usize = 256;
pub const BOS: TokenId = 256;
pub const EOS: TokenId = 257;
pub const PAD: TokenId = 258;

/// Ids are laid out as bytes `0..256`, then BOS, EOS, PAD, then `<m>` and `<r>`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    pub base_size: usize,
    pub mem_id: TokenId,
    pub rep_id: TokenId,
}

impl Default for Vocab {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocab {
    pub fn new() -> Self {
        let base_size = BYTE_TOKENS + 3;
        Vocab { base_size, mem_id: base_size, rep_id: base_size + 1 }
    }

    /// Ordinary tokens plus the two special tokens.
    pub fn size(&self) -> usize {
        self.base_size + 2
    }

    pub fn bos(&self) -> TokenId {
        BOS
    }

    pub fn eos(&self) -> TokenId {
        EOS
    }

    pub fn pad(&self) -> TokenId {
        PAD
    }

    pub fn is_special(&self, id: TokenId) -> bool {
        id == self.mem_id || id == self.rep_id
    }

    /// BOS followed by one id per byte.
    pub fn tokenize(&self, text: &[u8]) -> Vec<TokenId> {
        std::iter::once(BOS).chain(text.iter().map(|&b| b as TokenId)).collect()
    }

    /// Bytes of every byte-range id; control and special ids are skipped.
    pub fn detokenize(&self, ids: &[TokenId]) -> Vec<u8> {
        ids.iter().filter(|&&id| id < BYTE_TOKENS).map(|&id| id as u8).collect()
    }

    pub fn describe(&self, id: TokenId) -> String {
        match id {
            _ if id < BYTE_TOKENS => format!("{:?}", id as u8 as char),
            BOS => "<s>".into(),
            EOS => "</s>".into(),
            PAD => "<pad>".into(),
            _ if id == self.mem_id => "<m>".into(),
            _ if id == self.rep_id => "<r>".into(),
            _ => format!("<unk:{id}>"),
        }
    }
}

/// Tokenized documents, each starting with BOS.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub documents: Vec<Vec<TokenId>>,
}

impl Corpus {
    pub fn from_texts<S: AsRef<[u8]>>(vocab: &Vocab, texts: &[S]) -> Self {
        Corpus { documents: texts.iter().map(|t| vocab.tokenize(t.as_ref())).collect() }
    }

    /// Loads every path listed in a manifest (one path per line, `#` comments,
    /// relative paths resolved against the manifest's directory). Files ending
    /// in `.lines` or `.txt` with `newline_delimited` set contribute one
    /// document per non-empty line; otherwise each file is one document.
    pub fn from_manifest(vocab: &Vocab, manifest: &Path, newline_delimited: bool) -> Result<Self> {
        let listing = fs::read_to_string(manifest)?;
        let root = manifest.parent().map(Path::to_path_buf).unwrap_or_default();
        let mut documents = Vec::new();
        for line in listing.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let path = PathBuf::from(line);
            let path = if path.is_absolute() { path } else { root.join(path) };
            let bytes = fs::read(&path)?;
            if newline_delimited {
                documents.extend(
                    bytes.split(|&b| b == b'\n').filter(|l| !l.is_empty()).map(|l| vocab.tokenize(l)),
                );
            } else {
                documents.push(vocab.tokenize(&bytes));
            }
        }
        Ok(Corpus { documents })
    }

    /// Random-token documents over byte ids `0..alphabet`, each `len` ids long
    /// including the leading BOS. Copying such text cannot lean on any
    /// language prior, which makes it a clean probe of the memory zone.
    pub fn synthetic_random(n_docs: usize, len: usize, alphabet: usize, seed: u64) -> Self {
        let alphabet = alphabet.clamp(1, BYTE_TOKENS);
        let mut rng = seeded_rng(seed);
        let documents = (0..n_docs)
            .map(|_| {
                std::iter::once(BOS)
                    .chain((1..len.max(1)).map(|_| rng.random_range(0..alphabet)))
                    .collect()
            })
            .collect();
        Corpus { documents }
    }

    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }

    pub fn total_tokens(&self) -> usize {
        self.documents.iter().map(Vec::len).sum()
    }
}

/// Accepted training geometry.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanResult {
    /// Chunk slots in the training length (`s_hat / (2tc + t)`).
    pub n_chunks: usize,
    /// Chunks occupied by a raw sequence of the planned length.
    pub used_chunks: usize,
    /// Trailing PAD positions needed to reach `s_hat`.
    pub padding: usize,
    /// Largest raw length the plan admits.
    pub max_raw_len: usize,
}

/// Checks the training-length constraints for a raw sequence of length `s`
/// and a structured training length `s_hat`.
pub fn plan_lengths(s: usize, t: usize, c: usize, s_hat: usize) -> Result<PlanResult> {
    if t == 0 || c == 0 {
        return Err(Error::LengthPlan(format!("t = {t} and c = {c} must both be >= 1")));
    }
    let span = t * (2 * c + 1);
    if s_hat < span {
        return Err(Error::LengthPlan(format!("s_hat = {s_hat} < t(2c+1) = {span}")));
    }
    if !s_hat.is_multiple_of(span) {
        return Err(Error::LengthPlan(format!("s_hat mod (2tc + t) = {s_hat} mod {span} != 0")));
    }
    if 2 * s + s / c > s_hat {
        return Err(Error::LengthPlan(format!(
            "2s + floor(s/c) = {} > s_hat = {s_hat} for s = {s}",
            2 * s + s / c
        )));
    }
    let n_chunks = s_hat / span;
    let used_chunks = s.div_ceil(t * c);
    let max_raw_len = (0..=s_hat).rev().find(|&x| 2 * x + x / c <= s_hat).unwrap_or(0);
    Ok(PlanResult { n_chunks, used_chunks, padding: s_hat - used_chunks * span, max_raw_len })
}

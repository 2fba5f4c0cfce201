//! Training-sample layout: READ | MEM | REP chunks, their labels, the block
//! attention mask, and position ids.
//!
//! A chunk of span `s = t(2c+1)` holds `tc` reading tokens, `t` memory
//! tokens (`<m>`) and `tc` repetition tokens (`<r>`). Inside a chunk the
//! mask is
//!
//! ```text
//!        READ  MEM  REP
//! READ [  L    0    0 ]
//! MEM  [  1    1    0 ]
//! REP  [  0    1    I ]
//! ```
//!
//! and below the block diagonal every earlier chunk contributes only its
//! MEM columns, visible to READ rows.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenizer::{plan_lengths, TokenId, Vocab};

pub use crate::tensor::BinaryMask;

/// Compression ratio `c` and memory length `t`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LomaParams {
    pub c: usize,
    pub t: usize,
}

impl LomaParams {
    pub fn new(t: usize, c: usize) -> Result<Self> {
        if t == 0 || c == 0 {
            return Err(Error::Config(format!("t = {t} and c = {c} must both be >= 1")));
        }
        Ok(LomaParams { c, t })
    }

    pub fn read_len(&self) -> usize {
        self.t * self.c
    }

    pub fn mem_len(&self) -> usize {
        self.t
    }

    pub fn rep_len(&self) -> usize {
        self.read_len()
    }

    /// `t(2c+1)`.
    pub fn span(&self) -> usize {
        self.t * (2 * self.c + 1)
    }

    pub fn mem_offset(&self) -> usize {
        self.read_len()
    }

    pub fn rep_offset(&self) -> usize {
        self.read_len() + self.t
    }

    /// Zone of local offset `j` within a chunk.
    pub fn zone_at(&self, j: usize) -> Zone {
        if j < self.mem_offset() {
            Zone::Read
        } else if j < self.rep_offset() {
            Zone::Mem
        } else {
            Zone::Rep
        }
    }

    /// Intermittent memory position ids for a chunk whose reading zone
    /// starts at original position `start`: `start + c - 1, start + 2c - 1, …, start + tc - 1`.
    pub fn intermittent_ids(&self, start: usize) -> Vec<usize> {
        (1..=self.t).map(|j| start + j * self.c - 1).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Zone {
    Read,
    Mem,
    Rep,
    Pad,
}

impl Zone {
    pub fn tag(self) -> &'static str {
        match self {
            Zone::Read => "READ",
            Zone::Mem => "MEM",
            Zone::Rep => "REP",
            Zone::Pad => "PAD",
        }
    }
}

/// Zone and chunk index of every position. Trailing padding has no chunk.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ZoneMap {
    pub zones: Vec<Zone>,
    pub chunks: Vec<Option<usize>>,
}

impl ZoneMap {
    /// Structural layout of `n_chunks` full chunks.
    pub fn structural(p: LomaParams, n_chunks: usize) -> Self {
        let span = p.span();
        ZoneMap {
            zones: (0..n_chunks * span).map(|i| p.zone_at(i % span)).collect(),
            chunks: (0..n_chunks * span).map(|i| Some(i / span)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.zones.len()
    }

    pub fn is_empty(&self) -> bool {
        self.zones.is_empty()
    }

    pub fn positions(&self, zone: Zone) -> impl Iterator<Item = usize> + '_ {
        self.zones.iter().enumerate().filter(move |(_, &z)| z == zone).map(|(i, _)| i)
    }
}

/// One fully laid-out training sample of length `s_hat`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StructuredSample {
    pub params: LomaParams,
    pub tokens: Vec<TokenId>,
    pub labels: Vec<Option<TokenId>>,
    pub position_ids: Vec<usize>,
    pub mask: BinaryMask,
    pub zones: ZoneMap,
    /// Chunks carrying document content.
    pub n_chunks: usize,
}

impl StructuredSample {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// `(position, label)` pairs of every labeled position in `zone`.
    pub fn targets(&self, zone: Zone) -> Vec<(usize, TokenId)> {
        self.zones
            .positions(zone)
            .filter_map(|i| self.labels[i].map(|l| (i, l)))
            .collect()
    }

    /// Like [`Self::targets`], restricted to chunk `chunk`.
    pub fn chunk_targets(&self, chunk: usize, zone: Zone) -> Vec<(usize, TokenId)> {
        self.targets(zone).into_iter().filter(|&(i, _)| self.zones.chunks[i] == Some(chunk)).collect()
    }

    /// Absolute index range of `zone` inside chunk `chunk`.
    pub fn zone_range(&self, chunk: usize, zone: Zone) -> std::ops::Range<usize> {
        let p = self.params;
        let start = chunk * p.span();
        match zone {
            Zone::Read => start..start + p.read_len(),
            Zone::Mem => start + p.mem_offset()..start + p.rep_offset(),
            Zone::Rep => start + p.rep_offset()..start + p.span(),
            Zone::Pad => self.n_chunks * p.span()..self.len(),
        }
    }
}

/// Block mask of a single chunk.
pub fn build_chunk_mask(p: LomaParams) -> BinaryMask {
    let (tc, t, s) = (p.read_len(), p.t, p.span());
    let mut m = BinaryMask::zeros(s, s);
    for r in 0..tc {
        for c in 0..=r {
            m.set(r, c, true);
        }
    }
    for r in tc..tc + t {
        for c in 0..tc + t {
            m.set(r, c, true);
        }
    }
    for r in tc + t..s {
        for c in tc..tc + t {
            m.set(r, c, true);
        }
        m.set(r, r, true);
    }
    m
}

/// Cross-chunk block: READ rows see the MEM columns of an earlier chunk.
fn cross_chunk_block(p: LomaParams) -> BinaryMask {
    let s = p.span();
    let mut m = BinaryMask::zeros(s, s);
    for r in 0..p.read_len() {
        for c in p.mem_offset()..p.rep_offset() {
            m.set(r, c, true);
        }
    }
    m
}

/// Mask of `n_chunks` concatenated chunks: chunk masks on the diagonal,
/// cross-chunk blocks below it, zeros above.
pub fn build_sample_mask(p: LomaParams, n_chunks: usize) -> BinaryMask {
    let s = p.span();
    let diag = build_chunk_mask(p);
    let below = cross_chunk_block(p);
    let mut m = BinaryMask::zeros(n_chunks * s, n_chunks * s);
    for i in 0..n_chunks {
        m.paste(i * s, i * s, &diag);
        for j in 0..i {
            m.paste(i * s, j * s, &below);
        }
    }
    m
}

/// Position ids of `n_chunks` chunks. READ keeps the original document ids,
/// MEM takes the intermittent ids ending flush with its reading zone, and
/// REP slot `j` reuses the id of READ slot `j`.
pub fn build_position_ids(p: LomaParams, n_chunks: usize) -> Vec<usize> {
    let mut ids = Vec::with_capacity(n_chunks * p.span());
    for i in 0..n_chunks {
        let start = i * p.read_len();
        ids.extend(start..start + p.read_len());
        ids.extend(p.intermittent_ids(start));
        ids.extend(start..start + p.read_len());
    }
    ids
}

/// Lays a tokenized document out as a structured sample of length `s_hat`.
///
/// A final reading piece shorter than `tc` is filled with PAD in its
/// reading zone; PAD positions carry no labels, attend only themselves and
/// are invisible to every other row.
pub fn build_sample(doc: &[TokenId], p: LomaParams, s_hat: usize, vocab: &Vocab) -> Result<StructuredSample> {
    if doc.is_empty() {
        return Err(Error::EmptySample);
    }
    let plan = plan_lengths(doc.len(), p.t, p.c, s_hat)?;
    let (tc, span) = (p.read_len(), p.span());
    let n = plan.used_chunks;

    let mut tokens = Vec::with_capacity(s_hat);
    let mut labels = Vec::with_capacity(s_hat);
    let mut zones = ZoneMap::structural(p, n);
    for i in 0..n {
        let piece = &doc[i * tc..doc.len().min((i + 1) * tc)];
        for j in 0..tc {
            match piece.get(j) {
                Some(&tok) => {
                    tokens.push(tok);
                    labels.push(doc.get(i * tc + j + 1).copied());
                }
                None => {
                    tokens.push(vocab.pad());
                    labels.push(None);
                    zones.zones[i * span + j] = Zone::Pad;
                }
            }
        }
        tokens.extend(std::iter::repeat_n(vocab.mem_id, p.t));
        labels.extend(std::iter::repeat_n(None, p.t));
        tokens.extend(std::iter::repeat_n(vocab.rep_id, tc));
        labels.extend((0..tc).map(|j| piece.get(j).copied()));
    }

    let mut position_ids = build_position_ids(p, n);
    let mut mask = BinaryMask::zeros(s_hat, s_hat);
    mask.paste(0, 0, &build_sample_mask(p, n));

    tokens.extend(std::iter::repeat_n(vocab.pad(), plan.padding));
    labels.extend(std::iter::repeat_n(None, plan.padding));
    position_ids.extend(std::iter::repeat_n(0, plan.padding));
    zones.zones.extend(std::iter::repeat_n(Zone::Pad, plan.padding));
    zones.chunks.extend(std::iter::repeat_n(None, plan.padding));

    for (i, &z) in zones.zones.iter().enumerate() {
        if z == Zone::Pad {
            for k in 0..s_hat {
                mask.set(i, k, false);
                mask.set(k, i, false);
            }
            mask.set(i, i, true);
        }
    }

    Ok(StructuredSample { params: p, tokens, labels, position_ids, mask, zones, n_chunks: n })
}

// ----- mask-dump serialization --------------------------------------------

/// Comma-separated 0/1 rows.
pub fn mask_to_csv(mask: &BinaryMask) -> String {
    let mut out = String::with_capacity(mask.rows() * mask.cols() * 2);
    for r in 0..mask.rows() {
        let row: Vec<&str> = mask.row(r).iter().map(|&b| if b { "1" } else { "0" }).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

/// Run-length text: a `loma-mask v1 <rows> <cols>` header, then per row the
/// alternating run lengths starting with a (possibly empty) run of zeros.
pub fn mask_to_rle(mask: &BinaryMask) -> String {
    let mut out = format!("loma-mask v1 {} {}\n", mask.rows(), mask.cols());
    for r in 0..mask.rows() {
        let mut runs = Vec::new();
        let mut current = false;
        let mut len = 0usize;
        for &b in mask.row(r) {
            if b == current {
                len += 1;
            } else {
                runs.push(len);
                current = b;
                len = 1;
            }
        }
        runs.push(len);
        let line: Vec<String> = runs.iter().map(usize::to_string).collect();
        let _ = writeln!(out, "{}", line.join(" "));
    }
    out
}

pub fn mask_from_rle(text: &str) -> Result<BinaryMask> {
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap_or_default().split_whitespace().collect();
    let (rows, cols) = match header.as_slice() {
        ["loma-mask", "v1", r, c] => (
            r.parse::<usize>().map_err(|e| Error::Config(e.to_string()))?,
            c.parse::<usize>().map_err(|e| Error::Config(e.to_string()))?,
        ),
        _ => return Err(Error::Config("missing loma-mask v1 header".into())),
    };
    let mut mask = BinaryMask::zeros(rows, cols);
    for r in 0..rows {
        let line = lines.next().ok_or_else(|| Error::Config(format!("missing row {r}")))?;
        let mut col = 0usize;
        let mut value = false;
        for run in line.split_whitespace() {
            let run: usize = run.parse().map_err(|_| Error::Config(format!("bad run {run:?} in row {r}")))?;
            if col + run > cols {
                return Err(Error::Config(format!("row {r} overflows {cols} columns")));
            }
            for c in col..col + run {
                mask.set(r, c, value);
            }
            col += run;
            value = !value;
        }
        if col != cols {
            return Err(Error::Config(format!("row {r} covers {col} of {cols} columns")));
        }
    }
    Ok(mask)
}

/// `index,position_id,zone,chunk` rows for a zone layout.
pub fn position_ids_to_csv(ids: &[usize], zones: &ZoneMap) -> String {
    let mut out = String::from("index,position_id,zone,chunk\n");
    for (i, id) in ids.iter().enumerate() {
        let chunk = zones.chunks[i].map_or_else(String::new, |c| c.to_string());
        let _ = writeln!(out, "{i},{id},{},{chunk}", zones.zones[i].tag());
    }
    out
}

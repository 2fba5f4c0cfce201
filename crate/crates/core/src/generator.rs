//! Greedy autoregressive generation that compresses the KV cache every
//! `tc` consumed tokens into `t` memory entries.
//!
//! Tokens are buffered; whenever the buffer can fill the remaining reading
//! capacity of the current chunk, that slice is inferred and the chunk's
//! `tc` cache entries are replaced by the keys/values of `t` `<m>` tokens
//! computed in a single pass over them.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{KvCache, Model};
use crate::structuring::LomaParams;
use crate::tensor::{argmax, BinaryMask, Real, Tensor};
use crate::tokenizer::TokenId;

/// How memory tokens are positioned when a chunk is compressed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PositionType {
    /// Interleaved inside the compressed reading span, ending flush with it.
    #[default]
    Intermittent,
    /// Consecutive ids `compressed_chunks * t ..`.
    Sequential,
}

impl FromStr for PositionType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "intermittent" => Ok(PositionType::Intermittent),
            "sequential" => Ok(PositionType::Sequential),
            other => Err(Error::Config(format!("unknown position type {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompressionEvent {
    /// Tokens emitted before the event.
    pub emitted: usize,
    pub cursor: usize,
    pub pre_len: usize,
    pub post_len: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GenerationTrace {
    pub tokens: Vec<TokenId>,
    /// Cache length right after each emitted token.
    pub cache_lengths: Vec<usize>,
    pub events: Vec<CompressionEvent>,
    /// `(compressed_chunks, cache length)` after every forward pass.
    pub cache_log: Vec<(usize, usize)>,
    pub peak_cache: usize,
}

/// Mutable generation state. `params = None` disables compression.
#[derive(Clone, Debug)]
pub struct GeneratorState<T> {
    pub cursor: usize,
    pub compressed_chunks: usize,
    pub input_buffer: Vec<TokenId>,
    pub cache: KvCache<T>,
    pub params: Option<LomaParams>,
    pub position_type: PositionType,
    pub max_len: usize,
    pub mem_id: TokenId,
    emitted: usize,
    events: Vec<CompressionEvent>,
    cache_log: Vec<(usize, usize)>,
    last_logits: Vec<T>,
}

pub struct LomaGenerator<'m, T> {
    model: &'m Model<T>,
    pub state: GeneratorState<T>,
}

impl<'m, T: Real> LomaGenerator<'m, T> {
    pub fn new(
        model: &'m Model<T>,
        params: Option<LomaParams>,
        position_type: PositionType,
        max_len: usize,
        mem_id: TokenId,
    ) -> Self {
        LomaGenerator {
            model,
            state: GeneratorState {
                cursor: 0,
                compressed_chunks: 0,
                input_buffer: Vec::new(),
                cache: KvCache::empty(&model.config),
                params,
                position_type,
                max_len,
                mem_id,
                emitted: 0,
                events: Vec::new(),
                cache_log: Vec::new(),
                last_logits: Vec::new(),
            },
        }
    }

    pub fn reset(&mut self) {
        let s = &self.state;
        *self = Self::new(self.model, s.params, s.position_type, s.max_len, s.mem_id);
    }

    pub fn model(&self) -> &'m Model<T> {
        self.model
    }

    /// Logits of the last position of the most recent inference pass.
    pub fn last_logits(&self) -> &[T] {
        &self.state.last_logits
    }

    fn mem_len(&self) -> usize {
        self.state.params.map_or(0, |p| p.t)
    }

    /// One forward pass over `token_ids` at positions `cursor..`, causal
    /// among themselves and seeing every cached entry. Returns the argmax
    /// of the final position.
    pub fn step_infer(&mut self, token_ids: &[TokenId]) -> Result<TokenId> {
        if token_ids.is_empty() {
            return Err(Error::Precondition("step_infer needs at least one token".into()));
        }
        let s = &mut self.state;
        let n = token_ids.len();
        let max_position = self.model.config.max_position;
        if s.cursor + n > max_position {
            return Err(Error::Capacity { requested: s.cursor + n - 1, max_position });
        }
        let past = s.cache.total_len();
        let positions: Vec<usize> = (s.cursor..s.cursor + n).collect();
        let mask = BinaryMask::causal(n, past + n, past);
        let cache = std::mem::replace(&mut s.cache, KvCache::empty(&self.model.config));
        let (logits, cache) = self.model.forward(token_ids, &positions, &mask, Some(cache))?;
        s.cache = cache;
        s.cursor += n;
        s.last_logits = logits.row(n - 1).to_vec();
        s.cache_log.push((s.compressed_chunks, s.cache.total_len()));
        Ok(argmax(&s.last_logits))
    }

    /// Replaces the `tc` newest cache entries with the keys/values of `t`
    /// memory tokens that attend to those entries and to each other.
    pub fn compress_last_chunk(&mut self) -> Result<()> {
        let p = self.state.params.ok_or_else(|| Error::Precondition("compression is disabled".into()))?;
        let s = &mut self.state;
        let (tc, t) = (p.read_len(), p.t);
        let mem_cursor = s.compressed_chunks * t;
        let cache_len = s.cache.total_len();
        if cache_len < mem_cursor || cache_len - mem_cursor != tc {
            return Err(Error::Precondition(format!(
                "uncompressed tail holds {} entries, compression needs exactly {tc}",
                cache_len.saturating_sub(mem_cursor)
            )));
        }
        let positions: Vec<usize> = match s.position_type {
            PositionType::Intermittent => p.intermittent_ids(s.cursor - tc),
            PositionType::Sequential => (mem_cursor..mem_cursor + t).collect(),
        };
        let read: Vec<usize> = (mem_cursor..cache_len).collect();
        let read_cache = s.cache.select(&read)?;
        let tokens = vec![s.mem_id; t];
        let (_, mem_cache) = self.model.forward(&tokens, &positions, &BinaryMask::ones(t, tc + t), Some(read_cache))?;
        let kept: Vec<usize> = (0..mem_cursor).collect();
        let fresh: Vec<usize> = (tc..tc + t).collect();
        let mut cache = s.cache.select(&kept)?.concat(&mem_cache.select(&fresh)?)?;
        cache.set_compressed_len(mem_cursor + t)?;
        s.events.push(CompressionEvent { emitted: s.emitted, cursor: s.cursor, pre_len: cache_len, post_len: cache.total_len() });
        s.cache = cache;
        s.compressed_chunks += 1;
        s.cache_log.push((s.compressed_chunks, s.cache.total_len()));
        Ok(())
    }

    /// Buffers `token_ids`, inferring and compressing every chunk the buffer
    /// completes, then infers any remainder. Returns the latest prediction.
    pub fn add_token_ids(&mut self, token_ids: &[TokenId]) -> Result<TokenId> {
        if token_ids.is_empty() {
            return Err(Error::Precondition("add_token_ids needs at least one token".into()));
        }
        self.state.input_buffer.extend_from_slice(token_ids);
        let mut last = None;
        if let Some(p) = self.state.params {
            loop {
                let uncompressed = self.state.cache.total_len() - self.state.compressed_chunks * self.mem_len();
                debug_assert!(uncompressed < p.read_len());
                let proc_len = p.read_len() - uncompressed;
                if self.state.input_buffer.len() < proc_len {
                    break;
                }
                let slice: Vec<TokenId> = self.state.input_buffer.drain(..proc_len).collect();
                last = Some(self.step_infer(&slice)?);
                self.compress_last_chunk()?;
            }
        }
        if !self.state.input_buffer.is_empty() {
            let rest = std::mem::take(&mut self.state.input_buffer);
            last = Some(self.step_infer(&rest)?);
        }
        Ok(last.expect("at least one inference ran"))
    }

    /// Greedy generation from `prompt` until `eos_id` or `max_len` emitted tokens.
    pub fn generate(&mut self, prompt: &[TokenId], eos_id: TokenId) -> Result<GenerationTrace> {
        if prompt.is_empty() {
            return Err(Error::Precondition("prompt must be nonempty".into()));
        }
        let mut trace = GenerationTrace::default();
        let mut next = self.add_token_ids(prompt)?;
        self.record(&mut trace, next);
        while trace.tokens.len() < self.state.max_len && next != eos_id {
            next = self.add_token_ids(&[next])?;
            self.record(&mut trace, next);
        }
        trace.events = self.state.events.clone();
        trace.cache_log = self.state.cache_log.clone();
        trace.peak_cache = trace.cache_log.iter().map(|&(_, len)| len).max().unwrap_or(0);
        Ok(trace)
    }

    fn record(&mut self, trace: &mut GenerationTrace, token: TokenId) {
        self.state.emitted += 1;
        trace.tokens.push(token);
        trace.cache_lengths.push(self.state.cache.total_len());
    }

    /// Logits `[tc, vocab]` of `tc` `<r>` queries against the chunk just
    /// compressed. Each query sees only that chunk's memory entries and
    /// itself, and sits at the position of the reading token it mirrors.
    /// The cache is left untouched.
    pub fn recall_last_chunk(&self, rep_id: TokenId) -> Result<Tensor<T>> {
        let p = self.state.params.ok_or_else(|| Error::Precondition("compression is disabled".into()))?;
        let s = &self.state;
        let (tc, t) = (p.read_len(), p.t);
        let len = s.cache.total_len();
        if s.compressed_chunks == 0 || len != s.compressed_chunks * t {
            return Err(Error::Precondition("recall needs a freshly compressed chunk and no pending reads".into()));
        }
        let mut mask = BinaryMask::zeros(tc, len + tc);
        for r in 0..tc {
            for c in len - t..len {
                mask.set(r, c, true);
            }
            mask.set(r, len + r, true);
        }
        let positions: Vec<usize> = (s.cursor - tc..s.cursor).collect();
        let tokens = vec![rep_id; tc];
        let (logits, _) = self.model.forward(&tokens, &positions, &mask, Some(s.cache.clone()))?;
        Ok(logits)
    }
}

/// Plain cached greedy loop without any compression: the prompt in one
/// pass, then one token per step.
pub fn vanilla_generate<T: Real>(model: &Model<T>, prompt: &[TokenId], steps: usize, eos_id: TokenId) -> Result<Vec<TokenId>> {
    if prompt.is_empty() {
        return Err(Error::Precondition("prompt must be nonempty".into()));
    }
    let mut cache = KvCache::empty(&model.config);
    let mut input = prompt.to_vec();
    let mut out = Vec::with_capacity(steps);
    while out.len() < steps {
        let past = cache.total_len();
        let n = input.len();
        let positions: Vec<usize> = (past..past + n).collect();
        let (logits, next_cache) = model.forward(&input, &positions, &BinaryMask::causal(n, past + n, past), Some(cache))?;
        cache = next_cache;
        let tok = argmax(logits.row(n - 1));
        out.push(tok);
        if tok == eos_id {
            break;
        }
        input = vec![tok];
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::tokenizer::Vocab;

    fn model() -> Model<f64> {
        Model::init(ModelConfig { seed: 11, ..ModelConfig::miniature(&Vocab::new()) }).unwrap()
    }

    fn gen(m: &Model<f64>, t: usize, c: usize) -> LomaGenerator<'_, f64> {
        LomaGenerator::new(m, Some(LomaParams::new(t, c).unwrap()), PositionType::Intermittent, 64, Vocab::new().mem_id)
    }

    #[test]
    fn first_token_fills_cache_by_one() {
        let m = model();
        let mut g = gen(&m, 2, 2);
        g.step_infer(&[1]).unwrap();
        assert_eq!(g.state.cache.total_len(), 1);
        assert_eq!(g.state.cursor, 1);
        assert!(matches!(g.step_infer(&[]), Err(Error::Precondition(_))));
    }

    #[test]
    fn compression_shrinks_cache_and_keeps_cursor() {
        let m = model();
        let mut g = gen(&m, 2, 2);
        g.step_infer(&[1, 2, 3, 4]).unwrap();
        g.compress_last_chunk().unwrap();
        assert_eq!(g.state.cache.total_len(), 2);
        assert_eq!(g.state.cache.compressed_len(), 2);
        assert_eq!(g.state.compressed_chunks, 1);
        assert_eq!(g.state.cursor, 4);
        assert_eq!(g.state.cache.positions(), &[1, 3]);
    }

    #[test]
    fn sequential_memory_positions() {
        let m = model();
        let mut g = gen(&m, 2, 2);
        g.state.position_type = PositionType::Sequential;
        g.add_token_ids(&[1, 2, 3, 4, 5, 6, 7, 8]).unwrap();
        assert_eq!(g.state.cache.positions(), &[0, 1, 2, 3]);
    }

    #[test]
    fn compression_requires_full_tail() {
        let m = model();
        let mut g = gen(&m, 2, 2);
        g.step_infer(&[1, 2, 3]).unwrap();
        assert!(matches!(g.compress_last_chunk(), Err(Error::Precondition(_))));
    }

    #[test]
    fn cache_length_after_m_compressions_and_residual() {
        let m = model();
        for (fed, expect) in [(4usize, 2usize), (5, 3), (11, 7), (12, 6)] {
            let mut g = gen(&m, 2, 2);
            let tokens: Vec<usize> = (1..=fed).collect();
            g.add_token_ids(&tokens).unwrap();
            let (mc, r) = (fed / 4, fed % 4);
            assert_eq!(g.state.compressed_chunks, mc);
            assert_eq!(g.state.cache.total_len(), mc * 2 + r);
            assert_eq!(g.state.cache.total_len(), expect);
        }
    }

    #[test]
    fn capacity_is_enforced() {
        let m = model();
        let mut g = LomaGenerator::new(&m, None, PositionType::Intermittent, 1000, 0);
        let too_long: Vec<usize> = vec![1; m.config.max_position + 1];
        assert!(matches!(g.add_token_ids(&too_long), Err(Error::Capacity { .. })));
    }

    #[test]
    fn position_type_parsing() {
        assert_eq!("sequential".parse::<PositionType>().unwrap(), PositionType::Sequential);
        assert!("zigzag".parse::<PositionType>().is_err());
    }

    #[test]
    fn recall_needs_compressed_chunk() {
        let m = model();
        let mut g = gen(&m, 2, 2);
        assert!(g.recall_last_chunk(Vocab::new().rep_id).is_err());
        g.add_token_ids(&[1, 2, 3, 4]).unwrap();
        let logits = g.recall_last_chunk(Vocab::new().rep_id).unwrap();
        assert_eq!(logits.shape(), &[4, m.config.vocab_size]);
        assert_eq!(g.state.cache.total_len(), 2);
    }
}

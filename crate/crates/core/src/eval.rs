//! Repetition accuracy, analytic generation-cost accounting and host
//! latency measurement.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generator::{LomaGenerator, PositionType};
use crate::model::{KvCache, LayerKv, Model};
use crate::structuring::LomaParams;
use crate::tensor::{argmax, BinaryMask, Real, Tensor};
use crate::tokenizer::{Corpus, TokenId, Vocab};

/// Expected and decoded repetition of one reading zone.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkDecode {
    pub doc: usize,
    pub chunk: usize,
    pub expected: Vec<TokenId>,
    pub decoded: Vec<TokenId>,
}

impl ChunkDecode {
    pub fn correct_tokens(&self) -> usize {
        self.expected.iter().zip(&self.decoded).filter(|(a, b)| a == b).count()
    }

    pub fn is_exact(&self) -> bool {
        self.expected == self.decoded
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    /// Fraction of chunks repeated without a single wrong token.
    pub zone_accuracy: f64,
    /// Fraction of repetition tokens reproduced.
    pub token_accuracy: f64,
    pub chunks: usize,
    pub exact_chunks: usize,
    pub tokens: usize,
    pub correct_tokens: usize,
}

impl AccuracyReport {
    /// Folds a decode log into metrics.
    pub fn from_log(log: &[ChunkDecode]) -> Result<Self> {
        let tokens: usize = log.iter().map(|d| d.expected.len()).sum();
        if log.is_empty() || tokens == 0 {
            return Err(Error::EmptyEval);
        }
        let exact_chunks = log.iter().filter(|d| d.is_exact()).count();
        let correct_tokens: usize = log.iter().map(ChunkDecode::correct_tokens).sum();
        Ok(AccuracyReport {
            zone_accuracy: exact_chunks as f64 / log.len() as f64,
            token_accuracy: correct_tokens as f64 / tokens as f64,
            chunks: log.len(),
            exact_chunks,
            tokens,
            correct_tokens,
        })
    }
}

/// Produces, for every complete reading zone of `doc`, the tokens a model
/// emits when asked to repeat it.
pub trait RepetitionDecoder {
    fn decode_document(&self, doc: &[TokenId], p: LomaParams) -> Result<Vec<Vec<TokenId>>>;
}

/// Decodes through the generator: each reading zone is consumed and
/// compressed, then `tc` `<r>` queries read it back from memory alone.
pub struct LomaDecoder<'m, T> {
    pub model: &'m Model<T>,
    pub position_type: PositionType,
    pub vocab: Vocab,
}

impl<T: Real> RepetitionDecoder for LomaDecoder<'_, T> {
    fn decode_document(&self, doc: &[TokenId], p: LomaParams) -> Result<Vec<Vec<TokenId>>> {
        let mut g = LomaGenerator::new(self.model, Some(p), self.position_type, usize::MAX, self.vocab.mem_id);
        let tc = p.read_len();
        let mut out = Vec::new();
        for chunk in doc.chunks_exact(tc) {
            g.add_token_ids(chunk)?;
            let logits = g.recall_last_chunk(self.vocab.rep_id)?;
            out.push((0..tc).map(|r| argmax(logits.row(r))).collect());
        }
        Ok(out)
    }
}

/// Repeats every reading zone perfectly.
pub struct CopyOracle;

impl RepetitionDecoder for CopyOracle {
    fn decode_document(&self, doc: &[TokenId], p: LomaParams) -> Result<Vec<Vec<TokenId>>> {
        Ok(doc.chunks_exact(p.read_len()).map(<[_]>::to_vec).collect())
    }
}

/// Scores `decoder` on every complete reading zone of `corpus`.
pub fn eval_repetition(
    decoder: &dyn RepetitionDecoder,
    corpus: &Corpus,
    p: LomaParams,
) -> Result<(AccuracyReport, Vec<ChunkDecode>)> {
    let mut log = Vec::new();
    for (d, doc) in corpus.documents.iter().enumerate() {
        let decoded = decoder.decode_document(doc, p)?;
        for (i, (expected, got)) in doc.chunks_exact(p.read_len()).zip(decoded).enumerate() {
            log.push(ChunkDecode { doc: d, chunk: i, expected: expected.to_vec(), decoded: got });
        }
    }
    let report = AccuracyReport::from_log(&log)?;
    Ok((report, log))
}

pub fn accuracy_csv(rows: &[(String, AccuracyReport)]) -> String {
    let mut s = String::from("label,zone_acc,token_acc,chunks,tokens\n");
    for (label, r) in rows {
        let _ = writeln!(s, "{label},{:.6},{:.6},{},{}", r.zone_accuracy, r.token_accuracy, r.chunks, r.tokens);
    }
    s
}

/// Cost of one forward pass over `l` new tokens against `k` cached entries.
pub trait InferenceCost {
    fn cost(&self, l: usize, k: usize) -> f64;
}

/// `a·l·(k+l) + b·l + d`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineCost {
    pub a: f64,
    pub b: f64,
    pub d: f64,
}

impl InferenceCost for AffineCost {
    fn cost(&self, l: usize, k: usize) -> f64 {
        let (l, k) = (l as f64, k as f64);
        self.a * l * (k + l) + self.b * l + self.d
    }
}

/// Any closure `(l, k) -> cost`.
pub struct FnCost<F>(pub F);

impl<F: Fn(usize, usize) -> f64> InferenceCost for FnCost<F> {
    fn cost(&self, l: usize, k: usize) -> f64 {
        (self.0)(l, k)
    }
}

/// Measured costs, linearly interpolated in `k` for each measured `l`.
/// Lengths that were not measured fall back to `l · T(1, k)`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EmpiricalCost {
    table: BTreeMap<usize, Vec<(usize, f64)>>,
}

impl EmpiricalCost {
    pub fn new(points: &[LatencyPoint]) -> Result<Self> {
        let mut table: BTreeMap<usize, Vec<(usize, f64)>> = BTreeMap::new();
        for pt in points {
            table.entry(pt.l).or_default().push((pt.k, pt.median_ms));
        }
        if !table.contains_key(&1) {
            return Err(Error::Config("an empirical cost table needs l = 1 measurements".into()));
        }
        for row in table.values_mut() {
            row.sort_by_key(|&(k, _)| k);
        }
        Ok(EmpiricalCost { table })
    }

    fn interpolate(row: &[(usize, f64)], k: usize) -> f64 {
        if row.len() == 1 {
            return row[0].1;
        }
        let i = row.partition_point(|&(kk, _)| kk <= k).clamp(1, row.len() - 1);
        let ((k0, y0), (k1, y1)) = (row[i - 1], row[i]);
        y0 + (y1 - y0) * (k as f64 - k0 as f64) / (k1 as f64 - k0 as f64)
    }
}

impl InferenceCost for EmpiricalCost {
    fn cost(&self, l: usize, k: usize) -> f64 {
        match self.table.get(&l) {
            Some(row) => Self::interpolate(row, k),
            None => l as f64 * Self::interpolate(&self.table[&1], k),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostComparison {
    pub m: usize,
    pub t: usize,
    pub c: usize,
    /// `Σ_{k=0}^{m·tc−1} T(1,k)`.
    pub vanilla: f64,
    /// Single-token steps of the compressed schedule.
    pub loma_read: f64,
    /// `m · T(tc, t)`.
    pub loma_compress: f64,
    pub loma_total: f64,
    pub vanilla_peak_cache: usize,
    pub loma_peak_cache: usize,
    /// Vanilla over compressed cache size once all `m` chunks are compressed.
    pub memory_factor: f64,
}

/// Generation cost of `m` chunks (`m·tc` tokens) with and without compression.
/// Chunk `y` is generated against `y·t` memory entries plus its own growing tail.
pub fn predict_costs(cm: &dyn InferenceCost, p: LomaParams, m: usize) -> CostComparison {
    let (t, tc) = (p.t, p.read_len());
    let vanilla: f64 = (0..m * tc).map(|k| cm.cost(1, k)).sum();
    let loma_read: f64 = (0..m).flat_map(|y| y * t..y * t + tc).map(|k| cm.cost(1, k)).sum();
    let loma_compress = m as f64 * cm.cost(tc, t);
    CostComparison {
        m,
        t,
        c: p.c,
        vanilla,
        loma_read,
        loma_compress,
        loma_total: loma_read + loma_compress,
        vanilla_peak_cache: m * tc,
        loma_peak_cache: if m == 0 { 0 } else { (m - 1) * t + tc },
        memory_factor: if m == 0 { 1.0 } else { (m * tc) as f64 / (m * t) as f64 },
    }
}

/// Smallest `m ≤ max_m` at which the compressed schedule is strictly cheaper.
pub fn crossover(cm: &dyn InferenceCost, p: LomaParams, max_m: usize) -> Option<usize> {
    (1..=max_m).find(|&m| {
        let r = predict_costs(cm, p, m);
        r.loma_total < r.vanilla
    })
}

pub fn cost_csv(rows: &[CostComparison]) -> String {
    let mut s = String::from("m,t,c,vanilla_cost,loma_cost,loma_read,loma_compress,vanilla_peak_cache,loma_peak_cache\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{}",
            r.m, r.t, r.c, r.vanilla, r.loma_total, r.loma_read, r.loma_compress, r.vanilla_peak_cache, r.loma_peak_cache
        );
    }
    s
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyPoint {
    pub l: usize,
    pub k: usize,
    pub median_ms: f64,
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

fn filler_cache<T: Real>(model: &Model<T>, k: usize) -> Result<KvCache<T>> {
    let cfg = &model.config;
    let block = Arc::new(Tensor::full(&[cfg.n_heads, k, cfg.d_head], T::of(0.01)));
    let layers = (0..cfg.n_layers).map(|_| LayerKv { keys: block.clone(), values: block.clone() }).collect();
    KvCache::from_parts(layers, (0..k).collect())
}

/// Median wall-clock milliseconds of a forward pass over `l` tokens against
/// a `k`-entry cache, for every pair of the grid. One untimed warm-up run
/// precedes the `repeats` timed runs of each point.
pub fn measure_latency<T: Real>(
    model: &Model<T>,
    lengths: &[usize],
    cache_lengths: &[usize],
    repeats: usize,
) -> Result<Vec<LatencyPoint>> {
    let mut out = Vec::with_capacity(lengths.len() * cache_lengths.len());
    for &l in lengths {
        for &k in cache_lengths {
            if l == 0 || k + l > model.config.max_position {
                return Err(Error::Capacity { requested: k + l, max_position: model.config.max_position });
            }
            let cache = filler_cache(model, k)?;
            let tokens = vec![1; l];
            let positions: Vec<usize> = (k..k + l).collect();
            let mask = BinaryMask::causal(l, k + l, k);
            let mut times = Vec::with_capacity(repeats);
            for rep in 0..=repeats {
                let start = Instant::now();
                let result = model.forward(&tokens, &positions, &mask, Some(cache.clone()))?;
                let elapsed = start.elapsed().as_secs_f64() * 1e3;
                std::hint::black_box(result);
                if rep > 0 {
                    times.push(elapsed);
                }
            }
            out.push(LatencyPoint { l, k, median_ms: median(times) });
        }
    }
    Ok(out)
}

pub fn latency_csv(points: &[LatencyPoint]) -> String {
    let mut s = String::from("l,k,median_ms\n");
    for p in points {
        let _ = writeln!(s, "{},{},{:.6}", p.l, p.k, p.median_ms);
    }
    s
}

/// Least-squares slope of cost against `k` among points with length `l`.
pub fn slope_in_k(points: &[LatencyPoint], l: usize) -> Option<f64> {
    let pts: Vec<(f64, f64)> = points.iter().filter(|p| p.l == l).map(|p| (p.k as f64, p.median_ms)).collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

/// Fraction of cache lengths `k` measured for both lengths at which
/// `T(l, k) ≤ l · T(1, k)`.
pub fn batched_advantage(points: &[LatencyPoint], l: usize) -> Option<f64> {
    let single: BTreeMap<usize, f64> = points.iter().filter(|p| p.l == 1).map(|p| (p.k, p.median_ms)).collect();
    let pairs: Vec<bool> = points
        .iter()
        .filter(|p| p.l == l)
        .filter_map(|p| single.get(&p.k).map(|&one| p.median_ms <= l as f64 * one))
        .collect();
    (!pairs.is_empty()).then(|| pairs.iter().filter(|&&ok| ok).count() as f64 / pairs.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn p(t: usize, c: usize) -> LomaParams {
        LomaParams::new(t, c).unwrap()
    }

    #[test]
    fn copy_oracle_is_perfect() {
        let corpus = Corpus::synthetic_random(4, 33, 50, 3);
        let (r, log) = eval_repetition(&CopyOracle, &corpus, p(2, 2)).unwrap();
        assert_eq!(r.zone_accuracy, 1.0);
        assert_eq!(r.token_accuracy, 1.0);
        assert_eq!(log.len(), 4 * 8);
    }

    #[test]
    fn short_corpus_is_an_empty_eval() {
        let corpus = Corpus::synthetic_random(2, 3, 50, 3);
        assert!(matches!(eval_repetition(&CopyOracle, &corpus, p(2, 2)), Err(Error::EmptyEval)));
    }

    #[test]
    fn zone_accuracy_is_bounded_by_token_accuracy() {
        let log = vec![
            ChunkDecode { doc: 0, chunk: 0, expected: vec![1, 2, 3], decoded: vec![1, 2, 3] },
            ChunkDecode { doc: 0, chunk: 1, expected: vec![4, 5, 6], decoded: vec![4, 0, 6] },
        ];
        let r = AccuracyReport::from_log(&log).unwrap();
        assert_eq!(r.zone_accuracy, 0.5);
        assert!((r.token_accuracy - 5.0 / 6.0).abs() < 1e-15);
        assert!(r.zone_accuracy <= r.token_accuracy);
    }

    #[test]
    fn untrained_model_is_near_chance() {
        let vocab = Vocab::new();
        let model = Model::<f64>::init(ModelConfig::miniature(&vocab)).unwrap();
        let corpus = Corpus::synthetic_random(3, 17, 256, 9);
        let dec = LomaDecoder { model: &model, position_type: PositionType::Intermittent, vocab };
        let (r, _) = eval_repetition(&dec, &corpus, p(2, 2)).unwrap();
        assert!(r.token_accuracy < 0.1, "{r:?}");
    }

    #[test]
    fn constant_cost_exposes_compression_term() {
        let cm = FnCost(|_, _| 1.0);
        let r = predict_costs(&cm, p(4, 4), 8);
        assert_eq!(r.vanilla, 128.0);
        assert_eq!(r.loma_read, 128.0);
        assert_eq!(r.loma_total, 136.0);
        assert!(crossover(&cm, p(4, 4), 100).is_none());
    }

    #[test]
    fn linear_cost_sums() {
        let r = predict_costs(&FnCost(|_, k| k as f64), p(4, 4), 8);
        assert_eq!(r.vanilla, 8128.0);
        // chunk y sums 16 consecutive integers starting at 4y: 16·4y + 120
        let oracle: f64 = (0..8).map(|y| (64 * y + 120) as f64).sum();
        assert_eq!(r.loma_read, oracle);
        assert_eq!(r.loma_compress, 8.0 * 4.0);
        assert_eq!(r.memory_factor, 4.0);
        assert_eq!(r.vanilla_peak_cache, 128);
        assert_eq!(r.loma_peak_cache, 7 * 4 + 16);
    }

    #[test]
    fn compression_pays_off_under_cache_linear_cost() {
        let cm = AffineCost { a: 1.0, b: 50.0, d: 10.0 };
        for c in [2, 4, 8] {
            let m = crossover(&cm, p(4, c), 200).expect("crossover exists");
            let r = predict_costs(&cm, p(4, c), m + 10);
            assert!(r.loma_total < r.vanilla);
        }
    }

    #[test]
    fn empirical_interpolation() {
        let pts = [
            LatencyPoint { l: 1, k: 0, median_ms: 1.0 },
            LatencyPoint { l: 1, k: 10, median_ms: 2.0 },
            LatencyPoint { l: 4, k: 0, median_ms: 3.0 },
        ];
        let cm = EmpiricalCost::new(&pts).unwrap();
        assert!((cm.cost(1, 5) - 1.5).abs() < 1e-12);
        assert!((cm.cost(1, 20) - 3.0).abs() < 1e-12);
        assert_eq!(cm.cost(4, 7), 3.0);
        assert!((cm.cost(2, 5) - 3.0).abs() < 1e-12);
        assert!(slope_in_k(&pts, 1).unwrap() > 0.0);
        assert!(EmpiricalCost::new(&pts[2..]).is_err());
    }

    #[test]
    fn latency_grid_shape() {
        let model = Model::<f64>::init(ModelConfig::miniature(&Vocab::new())).unwrap();
        let pts = measure_latency(&model, &[1, 4], &[0, 8, 16], 2).unwrap();
        assert_eq!(pts.len(), 6);
        assert!(pts.iter().all(|p| p.median_ms >= 0.0));
        assert_eq!(latency_csv(&pts).lines().count(), 7);
    }
}

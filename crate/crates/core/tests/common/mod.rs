#![allow(dead_code)]

use anyhow::Result;
use loma::generator::{LomaGenerator, PositionType};
use loma::model::{KvCache, Model};
use loma::structuring::{build_sample, LomaParams, StructuredSample, Zone};
use loma::tensor::{normal_tensor, seeded_rng, BinaryMask, Real, Tensor};
use loma::tokenizer::{Corpus, TokenId, Vocab};
use sha2::{Digest, Sha256};

pub fn hex_sha256(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// A random document of exactly `n_chunks` reading zones and its structured sample.
pub fn random_sample(p: LomaParams, n_chunks: usize, alphabet: usize, seed: u64) -> (Vec<TokenId>, StructuredSample) {
    let doc = Corpus::synthetic_random(1, n_chunks * p.read_len(), alphabet, seed).documents.remove(0);
    let sample = build_sample(&doc, p, n_chunks * p.span(), &Vocab::new()).expect("valid geometry");
    (doc, sample)
}

/// Repetition-zone logits of every chunk under the training mask, `[chunk][slot][vocab]`.
pub fn training_rep_logits<T: Real>(model: &Model<T>, sample: &StructuredSample) -> Result<Vec<Tensor<T>>> {
    let (logits, _) = model.forward(&sample.tokens, &sample.position_ids, &sample.mask, None)?;
    let vocab = model.config.vocab_size;
    (0..sample.n_chunks)
        .map(|i| {
            let rows = sample.zone_range(i, Zone::Rep);
            let n = rows.len();
            let data: Vec<T> = rows.flat_map(|r| logits.row(r).to_vec()).collect();
            Ok(Tensor::new(vec![n, vocab], data)?)
        })
        .collect()
}

/// The same logits obtained generator-style: each reading zone is consumed
/// and compressed, then `<r>` queries read it back from the cache.
pub fn generator_rep_logits<T: Real>(model: &Model<T>, doc: &[TokenId], p: LomaParams) -> Result<Vec<Tensor<T>>> {
    generator_rep_logits_with(model, doc, p, PositionType::Intermittent)
}

pub fn generator_rep_logits_with<T: Real>(
    model: &Model<T>,
    doc: &[TokenId],
    p: LomaParams,
    position_type: PositionType,
) -> Result<Vec<Tensor<T>>> {
    let vocab = Vocab::new();
    let mut g = LomaGenerator::new(model, Some(p), position_type, usize::MAX, vocab.mem_id);
    let mut out = Vec::new();
    for chunk in doc.chunks_exact(p.read_len()) {
        g.add_token_ids(chunk)?;
        out.push(g.recall_last_chunk(vocab.rep_id)?);
    }
    Ok(out)
}

/// Largest |Δ| between two equally shaped logit lists.
pub fn max_delta<T: Real>(a: &[Tensor<T>], b: &[Tensor<T>]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x.max_abs_diff(y)).fold(0.0, f64::max)
}

/// Runs the first chunk's READ and MEM zones under the training mask,
/// then queries its REP zone against the resulting cache twice: once as is,
/// once with every READ key/value overwritten by noise. Returns the largest
/// change in REP logits.
pub fn masked_independence_delta(model: &Model<f64>, sample: &StructuredSample, seed: u64) -> Result<f64> {
    let p = sample.params;
    let rep = sample.zone_range(0, Zone::Rep);
    let prefix = rep.start;
    let mask = sample.mask.slice(0..prefix, 0..prefix);
    let (_, cache) = model.forward(&sample.tokens[..prefix], &sample.position_ids[..prefix], &mask, None)?;

    let mut query_mask = BinaryMask::zeros(rep.len(), prefix + rep.len());
    for r in 0..rep.len() {
        for c in sample.zone_range(0, Zone::Mem) {
            query_mask.set(r, c, true);
        }
        query_mask.set(r, prefix + r, true);
    }
    let query = |cache: KvCache<f64>| {
        model.forward(&sample.tokens[rep.clone()], &sample.position_ids[rep.clone()], &query_mask, Some(cache))
    };
    let (clean, _) = query(cache.clone())?;

    let mut noisy = cache;
    let cfg = &model.config;
    let mut rng = seeded_rng(seed);
    for layer in 0..cfg.n_layers {
        for idx in sample.zone_range(0, Zone::Read) {
            let k = normal_tensor::<f64>(&[cfg.n_heads * cfg.d_head], 0.0, 10.0, &mut rng);
            let v = normal_tensor::<f64>(&[cfg.n_heads * cfg.d_head], 0.0, 10.0, &mut rng);
            noisy.overwrite_entry(layer, idx, k.data(), v.data())?;
        }
    }
    let (perturbed, _) = query(noisy)?;
    debug_assert_eq!(p.read_len(), rep.len());
    Ok(clean.max_abs_diff(&perturbed))
}

//! Acceptance criteria 1–10. Each test prints one `PASS`/`FAIL` line;
//! run with `cargo test -p loma-core --test acceptance -- --nocapture --test-threads=1`
//! to see them in order.

mod common;

use std::sync::OnceLock;
use std::time::Instant;

use anyhow::Result;
use common::*;
use loma::eval::{
    batched_advantage, cost_csv, eval_repetition, measure_latency, predict_costs, slope_in_k, FnCost, LomaDecoder,
};
use loma::generator::{vanilla_generate, LomaGenerator, PositionType};
use loma::model::{Model, ModelConfig};
use loma::structuring::{build_position_ids, build_sample, build_sample_mask, mask_to_csv, position_ids_to_csv, LomaParams, Zone, ZoneMap};
use loma::tensor::BinaryMask;
use loma::tokenizer::{Corpus, Vocab, EOS};
use loma::training::{finite_difference_check, loss_curve_csv, smoothed, train, verify_gradient_flow, TrainConfig};

fn report(n: u32, ok: bool, detail: &str) {
    println!("criterion {n:>2}: {}  {detail}", if ok { "PASS" } else { "FAIL" });
}

fn toy_f64(seed: u64) -> Model<f64> {
    Model::init(ModelConfig { seed, ..ModelConfig::toy(&Vocab::new()) }).unwrap()
}

// ----- 1: mask golden ------------------------------------------------------

/// Independent construction from the block definitions.
fn mask_oracle(t: usize, c: usize, n: usize) -> Vec<Vec<u8>> {
    let (tc, s) = (t * c, t * (2 * c + 1));
    let mut m = vec![vec![0u8; s * n]; s * n];
    for i in 0..n {
        let b = i * s;
        for a in 0..tc {
            for k in 0..=a {
                m[b + a][b + k] = 1;
            }
            for j in 0..i {
                for k in 0..t {
                    m[b + a][j * s + tc + k] = 1;
                }
            }
        }
        for a in 0..t {
            for k in 0..tc + t {
                m[b + tc + a][b + k] = 1;
            }
        }
        for a in 0..tc {
            for k in 0..t {
                m[b + tc + t + a][b + tc + k] = 1;
            }
            m[b + tc + t + a][b + tc + t + a] = 1;
        }
    }
    m
}

fn artifact_mask() -> String {
    mask_to_csv(&build_sample_mask(LomaParams::new(2, 2).unwrap(), 3))
}

#[test]
fn criterion_01_mask_golden() {
    let start = Instant::now();
    let p = LomaParams::new(2, 2).unwrap();
    let mask = build_sample_mask(p, 3);
    let mut ok = mask.rows() == 30 && mask.cols() == 30;
    for row in 0..mask.rows() {
        let (i, j) = (row / p.span(), row % p.span());
        let expect = match p.zone_at(j) {
            Zone::Read => j + 1 + i * p.t,
            Zone::Mem => p.read_len() + p.t,
            _ => p.t + 1,
        };
        ok &= mask.row_sum(row) == expect;
    }
    ok &= mask.to_u8_rows() == mask_oracle(2, 2, 3);
    ok &= artifact_mask() == include_str!("../../cli/tests/golden/mask_t2_c2_n3.csv");
    let secs = start.elapsed().as_secs_f64();
    ok &= secs < 1.0;
    report(1, ok, &format!("30x30 row-sum and block laws, golden file match, {secs:.3}s"));
    assert!(ok);
}

// ----- 2: position ids -----------------------------------------------------

fn artifact_positions() -> String {
    let mut out = String::new();
    for t in [1, 2, 4, 8] {
        for c in [1, 2, 4, 8] {
            let p = LomaParams::new(t, c).unwrap();
            out.push_str(&position_ids_to_csv(&build_position_ids(p, 4), &ZoneMap::structural(p, 4)));
        }
    }
    out
}

#[test]
fn criterion_02_position_ids() {
    let start = Instant::now();
    let vocab = Vocab::new();
    let mut ok = true;
    let mut cases = 0;
    for t in [1, 2, 4, 8] {
        for c in [1, 2, 4, 8] {
            let p = LomaParams::new(t, c).unwrap();
            for n in 1..=4 {
                let doc = Corpus::synthetic_random(1, n * t * c, 256, 0).documents.remove(0);
                let from_sample = build_sample(&doc, p, n * p.span(), &vocab).unwrap().position_ids;
                let ids = build_position_ids(p, n);
                ok &= from_sample == ids;
                let zones = ZoneMap::structural(p, n);
                let read: Vec<usize> = zones.positions(Zone::Read).map(|k| ids[k]).collect();
                ok &= read == (0..n * t * c).collect::<Vec<_>>();
                for i in 0..n {
                    let mem: Vec<usize> = (0..t).map(|j| ids[i * p.span() + p.mem_offset() + j]).collect();
                    ok &= mem == (1..=t).map(|j| i * t * c + j * c - 1).collect::<Vec<_>>();
                    if i + 1 < n {
                        ok &= mem[t - 1] + 1 == ids[(i + 1) * p.span()];
                    }
                }
                cases += 1;
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    ok &= secs < 1.0;
    report(2, ok, &format!("{cases} geometries checked exhaustively, {secs:.3}s"));
    assert!(ok);
}

// ----- 3: gradients --------------------------------------------------------

fn artifact_gradients() -> String {
    let model = Model::<f64>::init(ModelConfig { n_layers: 2, n_heads: 2, d_model: 16, d_head: 8, d_ff: 32, ..ModelConfig::miniature(&Vocab::new()) }).unwrap();
    let (_, sample) = random_sample(LomaParams::new(2, 2).unwrap(), 2, 64, 3);
    serde_json::to_string(&verify_gradient_flow(&model, &sample, 1e-4).unwrap()).unwrap()
}

#[test]
fn criterion_03_gradient_suite() -> Result<()> {
    let start = Instant::now();
    let p = LomaParams::new(2, 2)?;
    let mini = Model::<f64>::init(ModelConfig::miniature(&Vocab::new()))?;
    let (_, sample) = random_sample(p, 2, 64, 3);
    let exhaustive = finite_difference_check(&mini, &sample, 1e-5, 0)?;
    let two = Model::<f64>::init(ModelConfig { n_layers: 2, n_heads: 2, d_model: 16, d_head: 8, d_ff: 32, ..ModelConfig::miniature(&Vocab::new()) })?;
    let flow = verify_gradient_flow(&two, &sample, 1e-4);
    let secs = start.elapsed().as_secs_f64();
    let ok = exhaustive.max_rel_err < 1e-4 && flow.is_ok() && secs < 60.0;
    let detail = match &flow {
        Ok(f) => format!(
            "FD max rel err {:.2e} over {} coords (1 layer) and {:.2e} (2 layers); dL/dlogit_mem {}; |dL_Rep/dK_mem| {:.2e}, |dL_Rep/dV_mem| {:.2e}, |dL_Rep/dE_read| {:.2e}; {secs:.1}s",
            exhaustive.max_rel_err, exhaustive.checks, f.finite_diff.max_rel_err, f.mem_logit_grad_max,
            f.rep_to_mem_keys, f.rep_to_mem_values, f.rep_to_read_embeddings
        ),
        Err(e) => format!("{e}"),
    };
    report(3, ok, &detail);
    assert!(ok);
    Ok(())
}

// ----- 4: masked independence ---------------------------------------------

fn artifact_independence() -> String {
    let model = toy_f64(4);
    let (_, sample) = random_sample(LomaParams::new(4, 2).unwrap(), 1, 256, 4);
    format!("{:e}", masked_independence_delta(&model, &sample, 9).unwrap())
}

#[test]
fn criterion_04_masked_independence() -> Result<()> {
    let start = Instant::now();
    let model = toy_f64(4);
    let mut worst = 0.0f64;
    for (t, c, seed) in [(4, 2, 4), (2, 2, 5), (4, 4, 6), (1, 8, 7)] {
        let (_, sample) = random_sample(LomaParams::new(t, c)?, 1, 256, seed);
        worst = worst.max(masked_independence_delta(&model, &sample, seed + 100)?);
    }
    let secs = start.elapsed().as_secs_f64();
    let ok = worst < 1e-9 && secs < 10.0;
    report(4, ok, &format!("max |Δ REP logits| {worst:.3e} after randomizing READ K/V, {secs:.2}s"));
    assert!(ok);
    Ok(())
}

// ----- 5: train/infer equivalence -----------------------------------------

fn artifact_equivalence() -> String {
    let model = toy_f64(5);
    let p = LomaParams::new(4, 2).unwrap();
    let (doc, sample) = random_sample(p, 3, 256, 5);
    let a = training_rep_logits(&model, &sample).unwrap();
    let b = generator_rep_logits(&model, &doc, p).unwrap();
    let bits: Vec<u64> = a.iter().chain(&b).flat_map(|t| t.data().iter().map(|v| v.to_bits())).collect();
    hex_sha256(&serde_json::to_vec(&bits).unwrap())
}

#[test]
fn criterion_05_train_infer_equivalence() -> Result<()> {
    let start = Instant::now();
    let model = toy_f64(5);
    let mut worst = 0.0f64;
    for (t, c, n) in [(4, 2, 3), (2, 2, 4), (4, 4, 2)] {
        let p = LomaParams::new(t, c)?;
        let (doc, sample) = random_sample(p, n, 256, 5 + t as u64);
        worst = worst.max(max_delta(&training_rep_logits(&model, &sample)?, &generator_rep_logits(&model, &doc, p)?));
    }
    let secs = start.elapsed().as_secs_f64();
    let ok = worst < 1e-5 && secs < 30.0;
    report(5, ok, &format!("max |training − generator| REP logits {worst:.3e} (f64), {secs:.2}s"));
    assert!(ok);
    Ok(())
}

// ----- 6: desk training ----------------------------------------------------

const DESK_ALPHABET: usize = 32;

fn desk_config() -> TrainConfig {
    TrainConfig { lr_max: 1e-3, lr_min: 1e-4, warmup_steps: 100, batch_size: 8, max_steps: 6000, s_hat: 40, eval_every: 500, ..Default::default() }
}

struct Desk {
    model: Model<f32>,
    smoothed_rep: f64,
    secs: f64,
}

fn desk() -> &'static Desk {
    static DESK: OnceLock<Desk> = OnceLock::new();
    DESK.get_or_init(|| {
        let start = Instant::now();
        let vocab = Vocab::new();
        let corpus = Corpus::synthetic_random(20_000, 64, DESK_ALPHABET, 1);
        let model = Model::<f32>::init(ModelConfig::toy(&vocab)).unwrap();
        let out = train(model, &corpus, LomaParams::new(4, 2).unwrap(), &desk_config(), &vocab).unwrap();
        let reps: Vec<f64> = out.curve.iter().map(|r| r.rep).collect();
        let smoothed_rep = *smoothed(&reps, 100).last().unwrap();
        Desk { model: out.model, smoothed_rep, secs: start.elapsed().as_secs_f64() }
    })
}

#[test]
fn criterion_06_desk_training() -> Result<()> {
    let d = desk();
    let p = LomaParams::new(4, 2)?;
    let held_out = Corpus::synthetic_random(500, 16, DESK_ALPHABET, 99);
    let decoder = LomaDecoder { model: &d.model, position_type: PositionType::Intermittent, vocab: Vocab::new() };
    let (acc, _) = eval_repetition(&decoder, &held_out, p)?;
    let ok = d.smoothed_rep < 0.1 && acc.token_accuracy >= 0.99;
    report(
        6,
        ok,
        &format!(
            "{} steps in {:.0}s: smoothed L_Rep {:.4}; token accuracy {:.2}%, zone accuracy {:.2}% over {} chunks",
            desk_config().max_steps,
            d.secs,
            d.smoothed_rep,
            100.0 * acc.token_accuracy,
            100.0 * acc.zone_accuracy,
            acc.chunks
        ),
    );
    assert!(ok);
    Ok(())
}

// ----- 7: generator cache law ----------------------------------------------

fn cache_law_trace<T: loma::tensor::Real>(model: &Model<T>) -> loma::generator::GenerationTrace {
    let vocab = Vocab::new();
    let mut g = LomaGenerator::new(model, Some(LomaParams::new(4, 4).unwrap()), PositionType::Intermittent, 512, vocab.mem_id);
    // no stop token: exactly 512 emissions
    g.generate(&[vocab.bos()], usize::MAX).unwrap()
}

#[test]
fn criterion_07_generator_cache_law() {
    let model = &desk().model;
    let start = Instant::now();
    let trace = cache_law_trace(model);
    let secs = start.elapsed().as_secs_f64();
    let drops_ok = trace.events.iter().all(|e| e.pre_len - e.post_len == 12);
    let bound_ok = trace.cache_log.iter().all(|&(chunks, len)| len <= chunks * 4 + 16);
    let ok = trace.tokens.len() == 512 && trace.events.len() == 512 / 16 && drops_ok && bound_ok && secs < 60.0;
    report(
        7,
        ok,
        &format!(
            "{} tokens, {} compression events, every drop 12: {drops_ok}, bound held: {bound_ok}, peak cache {}, {secs:.1}s",
            trace.tokens.len(),
            trace.events.len(),
            trace.peak_cache
        ),
    );
    assert!(ok);
}

// ----- 8: no-compression equivalence --------------------------------------

fn no_compression_tokens(model: &Model<f64>) -> (Vec<usize>, Vec<usize>) {
    let vocab = Vocab::new();
    let prompt = vocab.tokenize(b"The cache");
    let mut g = LomaGenerator::new(model, None, PositionType::Intermittent, 256, vocab.mem_id);
    let ours = g.generate(&prompt, EOS).unwrap().tokens;
    (ours, vanilla_generate(model, &prompt, 256, EOS).unwrap())
}

#[test]
fn criterion_08_no_compression_equivalence() {
    let model = toy_f64(8);
    let start = Instant::now();
    let (ours, vanilla) = no_compression_tokens(&model);
    let secs = start.elapsed().as_secs_f64();
    let ok = ours == vanilla && ours.len() == 256 && secs < 60.0;
    report(8, ok, &format!("{} tokens identical to the plain cached loop: {}, {secs:.1}s", ours.len(), ours == vanilla));
    assert!(ok);
}

// ----- 9: cost model -------------------------------------------------------

fn artifact_costs() -> String {
    let p = LomaParams::new(4, 4).unwrap();
    let rows: Vec<_> = (1..=16).map(|m| predict_costs(&FnCost(|_, k| k as f64), p, m)).collect();
    cost_csv(&rows)
}

#[test]
fn criterion_09_cost_model() -> Result<()> {
    let p = LomaParams::new(4, 4)?;
    let linear = predict_costs(&FnCost(|_, k| k as f64), p, 8);
    // closed form of the compressed schedule: chunk y sums 16 integers from 4y
    let oracle_read: f64 = (0..8).map(|y| (16 * 4 * y + 120) as f64).sum();
    let vanilla_ok = linear.vanilla == 8128.0;
    let read_matches_oracle = linear.loma_read == oracle_read;
    let read_matches_stated = linear.loma_read == 1904.0;

    let model = Model::<f32>::init(ModelConfig::toy(&Vocab::new()))?;
    let grid: Vec<usize> = (0..=8).map(|i| i * 256).collect();
    let points = measure_latency(&model, &[1, 16], &grid, 7)?;
    let slope = slope_in_k(&points, 1).unwrap_or(f64::NAN);
    let advantage = batched_advantage(&points, 16).unwrap_or(0.0);
    let measured_ok = slope > 0.0 && advantage >= 0.9;

    println!(
        "    read part {} (direct summation {}; stated value 1904), vanilla {}",
        linear.loma_read, oracle_read, linear.vanilla
    );
    println!("    measured: slope of T(1,k) {slope:.3e} ms/entry, T(16,k) <= 16 T(1,k) on {:.0}% of the grid", 100.0 * advantage);
    let ok = vanilla_ok && read_matches_oracle && read_matches_stated && measured_ok;
    report(
        9,
        ok,
        &format!(
            "vanilla 8128: {vanilla_ok}; read part = 1904: {read_matches_stated}; measured slope > 0 and >= 90% batched advantage: {measured_ok}"
        ),
    );
    assert!(vanilla_ok && read_matches_oracle && measured_ok, "cost model broken");
    assert!(read_matches_stated, "read part is {} by direct summation, the stated value is 1904", linear.loma_read);
    Ok(())
}

// ----- 10: determinism -----------------------------------------------------

fn artifact_training() -> String {
    let vocab = Vocab::new();
    let corpus = Corpus::synthetic_random(200, 64, DESK_ALPHABET, 1);
    let cfg = TrainConfig { max_steps: 30, ..desk_config() };
    let model = Model::<f32>::init(ModelConfig::toy(&vocab)).unwrap();
    let out = train(model, &corpus, LomaParams::new(4, 2).unwrap(), &cfg, &vocab).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.bin");
    out.model.save(&path).unwrap();
    let held_out = Corpus::synthetic_random(20, 16, DESK_ALPHABET, 99);
    let decoder = LomaDecoder { model: &out.model, position_type: PositionType::Intermittent, vocab };
    let (_, log) = eval_repetition(&decoder, &held_out, LomaParams::new(4, 2).unwrap()).unwrap();
    format!(
        "{}\n{}\n{}",
        loss_curve_csv(&out.curve),
        hex_sha256(&std::fs::read(&path).unwrap()),
        serde_json::to_string(&log).unwrap()
    )
}

fn all_artifacts() -> Vec<(&'static str, String)> {
    let toy = toy_f64(7);
    vec![
        ("1 mask csv", artifact_mask()),
        ("2 position ids csv", artifact_positions()),
        ("3 gradient report json", artifact_gradients()),
        ("4 independence delta", artifact_independence()),
        ("5 equivalence logits", artifact_equivalence()),
        ("6 training curve, checkpoint, decode log", artifact_training()),
        ("7 generation trace json", serde_json::to_string(&cache_law_trace(&toy)).unwrap()),
        ("8 token streams", serde_json::to_string(&no_compression_tokens(&toy)).unwrap()),
        ("9 analytic cost csv", artifact_costs()),
    ]
}

#[test]
fn criterion_10_determinism() {
    let first = all_artifacts();
    let second = all_artifacts();
    let mut ok = true;
    for ((name, a), (_, b)) in first.iter().zip(&second) {
        let (ha, hb) = (hex_sha256(a.as_bytes()), hex_sha256(b.as_bytes()));
        println!("    {name}: {} {}", &ha[..16], if ha == hb { "==" } else { "!=" });
        ok &= ha == hb;
    }
    report(10, ok, &format!("{} artifacts hash-equal across two runs", first.len()));
    assert!(ok);
}

#[test]
fn oracle_matches_itself_on_other_geometries() {
    for (t, c, n) in [(1, 1, 2), (3, 2, 2), (2, 4, 3)] {
        assert_eq!(build_sample_mask(LomaParams::new(t, c).unwrap(), n), BinaryMask::from_rows(&mask_oracle(t, c, n)).unwrap());
    }
}

use std::fs;
use std::path::Path;

use anyhow::{bail, Context};
use log::info;
use loma::eval::{
    accuracy_csv, cost_csv, crossover, eval_repetition, latency_csv, measure_latency, predict_costs, slope_in_k,
    batched_advantage, AffineCost, CopyOracle, EmpiricalCost, FnCost, InferenceCost, LomaDecoder, RepetitionDecoder,
};
use loma::generator::LomaGenerator;
use loma::model::Model;
use loma::structuring::{build_position_ids, build_sample_mask, mask_to_csv, mask_to_rle, position_ids_to_csv, ZoneMap};
use loma::tensor::Real;
use loma::training::{loss_curve_csv, smoothed, train_with};
use serde_json::json;

use crate::config::{ConfigError, Precision, RunConfig};

/// Runs `$body` with `$T` bound to the configured scalar type.
macro_rules! with_precision {
    ($cfg:expr, $T:ident => $body:expr) => {
        match $cfg.precision {
            Precision::F32 => {
                type $T = f32;
                $body
            }
            Precision::F64 => {
                type $T = f64;
                $body
            }
        }
    };
}

fn load_model<T: Real>(cfg: &RunConfig) -> anyhow::Result<Model<T>> {
    let path = cfg.checkpoint()?;
    Model::load(&path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn write(dir: &Path, name: &str, contents: impl AsRef<[u8]>) -> anyhow::Result<()> {
    let path = dir.join(name);
    fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))
}

pub fn train(cfg: &RunConfig) -> anyhow::Result<()> {
    with_precision!(cfg, T => train_as::<T>(cfg))
}

fn train_as<T: Real>(cfg: &RunConfig) -> anyhow::Result<()> {
    let out = cfg.out_dir()?;
    let vocab = cfg.vocab();
    let p = cfg.params()?;
    let corpus = cfg.corpus.load(&vocab)?;
    let model = Model::<T>::init(cfg.model_config()?)?;
    cfg.snapshot(&out)?;
    info!("training {} parameters ({}) for {} steps", model.param_count(), T::NAME, cfg.train.max_steps);
    let outcome = train_with(model, &corpus, p, &cfg.train, &vocab, |_, _| {})?;
    outcome.model.save(&out.join("checkpoint.bin"))?;
    write(&out, "loss.csv", loss_curve_csv(&outcome.curve))?;
    let reps: Vec<f64> = outcome.curve.iter().map(|r| r.rep).collect();
    let final_rep = smoothed(&reps, 50).last().copied().unwrap_or(f64::NAN);
    let summary = json!({ "steps": outcome.curve.len(), "smoothed_l_rep": final_rep });
    write(&out, "summary.json", serde_json::to_string_pretty(&summary)?)?;
    println!("smoothed L_Rep {final_rep:.4} after {} steps", outcome.curve.len());
    Ok(())
}

pub fn generate(cfg: &RunConfig) -> anyhow::Result<()> {
    with_precision!(cfg, T => generate_as::<T>(cfg))
}

fn generate_as<T: Real>(cfg: &RunConfig) -> anyhow::Result<()> {
    let out = cfg.out_dir()?;
    let vocab = cfg.vocab();
    let model = load_model::<T>(cfg)?;
    let params = if cfg.loma.disable_compression || cfg.loma.t == 0 { None } else { Some(cfg.params()?) };
    let prompt = if cfg.generate.prompt_ids.is_empty() {
        vocab.tokenize(cfg.generate.prompt.as_bytes())
    } else {
        cfg.generate.prompt_ids.clone()
    };
    if let Some(&bad) = prompt.iter().find(|&&id| id >= model.config.vocab_size) {
        bail!(ConfigError(format!("prompt id {bad} is outside the vocabulary")));
    }
    cfg.snapshot(&out)?;
    let mut g = LomaGenerator::new(&model, params, cfg.loma.position_type, cfg.generate.max_len, vocab.mem_id);
    let trace = g.generate(&prompt, vocab.eos())?;
    let text = String::from_utf8_lossy(&vocab.detokenize(&trace.tokens)).into_owned();
    let doc = json!({ "prompt": prompt, "text": text, "trace": trace });
    write(&out, "trace.json", serde_json::to_string_pretty(&doc)?)?;
    println!("{text}");
    info!("{} tokens, {} compression events, peak cache {}", trace.tokens.len(), trace.events.len(), trace.peak_cache);
    Ok(())
}

pub fn mask_dump(cfg: &RunConfig, n_chunks: usize) -> anyhow::Result<()> {
    let out = cfg.out_dir()?;
    let p = cfg.params()?;
    if n_chunks == 0 {
        bail!(loma::Error::LengthPlan("n_chunks must be >= 1".into()));
    }
    let mask = build_sample_mask(p, n_chunks);
    let ids = build_position_ids(p, n_chunks);
    cfg.snapshot(&out)?;
    write(&out, "mask.csv", mask_to_csv(&mask))?;
    write(&out, "mask.rle", mask_to_rle(&mask))?;
    write(&out, "position_ids.csv", position_ids_to_csv(&ids, &ZoneMap::structural(p, n_chunks)))?;
    println!("{}x{} mask written to {}", mask.rows(), mask.cols(), out.display());
    Ok(())
}

pub fn eval(cfg: &RunConfig) -> anyhow::Result<()> {
    with_precision!(cfg, T => eval_as::<T>(cfg))
}

fn eval_as<T: Real>(cfg: &RunConfig) -> anyhow::Result<()> {
    let out = cfg.out_dir()?;
    let vocab = cfg.vocab();
    let p = cfg.params()?;
    let corpus = cfg.eval.corpus.load(&vocab)?;
    let model;
    let decoder: Box<dyn RepetitionDecoder> = match cfg.eval.decoder.as_str() {
        "copy" => Box::new(CopyOracle),
        "model" => {
            model = load_model::<T>(cfg)?;
            Box::new(LomaDecoder { model: &model, position_type: cfg.loma.position_type, vocab })
        }
        other => bail!(ConfigError(format!("unknown decoder {other:?}"))),
    };
    cfg.snapshot(&out)?;
    let (report, log) = eval_repetition(decoder.as_ref(), &corpus, p)?;
    let label = format!("t{}_c{}", p.t, p.c);
    write(&out, "accuracy.csv", accuracy_csv(&[(label, report)]))?;
    write(&out, "decode_log.json", serde_json::to_string(&log)?)?;
    write(&out, "report.json", serde_json::to_string_pretty(&report)?)?;
    println!(
        "zone accuracy {:.2}%  token accuracy {:.2}%  ({} chunks, {} tokens)",
        100.0 * report.zone_accuracy,
        100.0 * report.token_accuracy,
        report.chunks,
        report.tokens
    );
    Ok(())
}

pub fn perf(cfg: &RunConfig) -> anyhow::Result<()> {
    with_precision!(cfg, T => perf_as::<T>(cfg))
}

fn perf_as<T: Real>(cfg: &RunConfig) -> anyhow::Result<()> {
    let out = cfg.out_dir()?;
    let p = cfg.params()?;
    let perf = &cfg.perf;
    cfg.snapshot(&out)?;
    let mut summary = serde_json::Map::new();
    let cm: Box<dyn InferenceCost> = match perf.cost_model.as_str() {
        "constant" => Box::new(FnCost(|_, _| 1.0)),
        "linear" => Box::new(FnCost(|_, k| k as f64)),
        "affine" => Box::new(AffineCost { a: perf.affine[0], b: perf.affine[1], d: perf.affine[2] }),
        "measured" => {
            // timing does not depend on the weights
            let model = match &cfg.paths.checkpoint {
                Some(_) => load_model::<T>(cfg)?,
                None => Model::<T>::init(cfg.model_config()?)?,
            };
            let mut lengths = perf.lengths.clone();
            if !lengths.contains(&1) {
                lengths.insert(0, 1);
            }
            let points = measure_latency(&model, &lengths, &perf.cache_lengths, perf.repeats)?;
            write(&out, "latency.csv", latency_csv(&points))?;
            summary.insert("slope_t1_ms_per_entry".into(), json!(slope_in_k(&points, 1)));
            for &l in lengths.iter().filter(|&&l| l > 1) {
                summary.insert(format!("batched_advantage_l{l}"), json!(batched_advantage(&points, l)));
            }
            Box::new(EmpiricalCost::new(&points)?)
        }
        other => bail!(ConfigError(format!("unknown cost model {other:?}"))),
    };
    let rows: Vec<_> = (1..=perf.max_m).map(|m| predict_costs(cm.as_ref(), p, m)).collect();
    write(&out, "cost.csv", cost_csv(&rows))?;
    summary.insert("crossover_m".into(), json!(crossover(cm.as_ref(), p, perf.max_m)));
    write(&out, "summary.json", serde_json::to_string_pretty(&summary)?)?;
    if let Some(last) = rows.last() {
        println!(
            "m={}: vanilla {:.4}  compressed {:.4}  peak cache {} vs {}",
            last.m, last.vanilla, last.loma_total, last.vanilla_peak_cache, last.loma_peak_cache
        );
    }
    Ok(())
}

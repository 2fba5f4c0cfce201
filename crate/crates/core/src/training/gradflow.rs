//! Checks that the repetition loss reaches the memory zone, and that the
//! analytic gradients agree with central finite differences.

use std::sync::Arc;

use rand::seq::index::sample as sample_indices;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::loss_graph;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::structuring::{StructuredSample, Zone};
use crate::tensor::{seeded_rng, Graph};

/// Relative error denominators never drop below this.
const REL_FLOOR: f64 = 1e-6;
/// Blocks larger than this are checked along a random projection.
const FULL_CHECK_LIMIT: usize = 10_000;
const PROJECTED_COORDS: usize = 64;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FiniteDiffReport {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub checks: usize,
    /// True when every coordinate was perturbed individually.
    pub exhaustive: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GradFlowReport {
    /// L2 norm of dL_Rep/dK over memory positions, all layers.
    pub rep_to_mem_keys: f64,
    /// L2 norm of dL_Rep/dV over memory positions, all layers.
    pub rep_to_mem_values: f64,
    /// L2 norm of dL_Rep with respect to the layer inputs at memory positions.
    pub rep_to_mem_inputs: f64,
    /// Largest |dL/dlogit| over memory positions.
    pub mem_logit_grad_max: f64,
    /// L2 norm of dL_Rep with respect to reading-zone token embeddings.
    pub rep_to_read_embeddings: f64,
    pub finite_diff: FiniteDiffReport,
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

fn sq_norm_rows(data: &[f64], heads: usize, len: usize, width: usize, rows: &[usize]) -> f64 {
    let mut acc = 0.0;
    for h in 0..heads {
        for &r in rows {
            let at = (h * len + r) * width;
            acc += data[at..at + width].iter().map(|v| v * v).sum::<f64>();
        }
    }
    acc
}

/// Total `L_Read + L_Rep` (summed) of `sample` under `model`.
fn total_loss(model: &Model<f64>, sample: &StructuredSample) -> Result<f64> {
    let mut g = Graph::new();
    let vars = model.bind(&mut g, false);
    let out = model.forward_graph(&mut g, &vars, &sample.tokens, &sample.position_ids, &sample.mask, None)?;
    let terms = loss_graph(&mut g, out.logits, sample)?;
    Ok(g.value(terms.read).item()? + g.value(terms.rep).item()?)
}

fn perturbed(model: &Model<f64>, block: usize, coords: &[(usize, f64)], h: f64) -> Model<f64> {
    let mut m = model.clone();
    let slot = m.params_mut().into_iter().nth(block).expect("block index");
    let data = Arc::make_mut(slot).data_mut();
    for &(i, dir) in coords {
        data[i] += h * dir;
    }
    m
}

/// Compares analytic gradients of the summed loss with central differences
/// of step `h`. Small models are checked coordinate by coordinate; larger
/// ones along a random direction over 64 coordinates of every block.
pub fn finite_difference_check(
    model: &Model<f64>,
    sample: &StructuredSample,
    h: f64,
    seed: u64,
) -> Result<FiniteDiffReport> {
    let mut g = Graph::new();
    let vars = model.bind(&mut g, true);
    let out = model.forward_graph(&mut g, &vars, &sample.tokens, &sample.position_ids, &sample.mask, None)?;
    let terms = loss_graph(&mut g, out.logits, sample)?;
    let total = g.add(terms.read, terms.rep)?;
    g.backward(total)?;
    let analytic: Vec<Vec<f64>> = vars.all().into_iter().map(|v| g.grad_or_zeros(v)).collect();

    let exhaustive = model.param_count() <= FULL_CHECK_LIMIT;
    let mut rng = seeded_rng(seed);
    let mut report = FiniteDiffReport { exhaustive, ..Default::default() };
    for (block, (name, _, tensor)) in model.named_params().into_iter().enumerate() {
        let directions: Vec<Vec<(usize, f64)>> = if exhaustive {
            (0..tensor.numel()).map(|i| vec![(i, 1.0)]).collect()
        } else {
            let picks = sample_indices(&mut rng, tensor.numel(), PROJECTED_COORDS.min(tensor.numel()));
            vec![picks.into_iter().map(|i| (i, StandardNormal.sample(&mut rng))).collect()]
        };
        for dir in directions {
            let plus = total_loss(&perturbed(model, block, &dir, h), sample)?;
            let minus = total_loss(&perturbed(model, block, &dir, -h), sample)?;
            let numeric = (plus - minus) / (2.0 * h);
            let exact: f64 = dir.iter().map(|&(i, d)| analytic[block][i] * d).sum();
            let err = rel_err(exact, numeric);
            report.checks += 1;
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst_param = name.clone();
            }
        }
    }
    Ok(report)
}

/// Verifies the supervision path of the memory zone on one sample:
///
/// - the repetition loss has a nonzero gradient on memory keys, values and
///   their layer inputs;
/// - logits at memory positions receive exactly zero gradient;
/// - with two or more layers, the repetition loss reaches reading-zone
///   embeddings (reading zone → memory keys/values → repetition zone);
/// - analytic gradients match central differences within `fd_tolerance`.
pub fn verify_gradient_flow(
    model: &Model<f64>,
    sample: &StructuredSample,
    fd_tolerance: f64,
) -> Result<GradFlowReport> {
    if sample.n_chunks == 0 {
        return Err(Error::Precondition("sample has no chunk".into()));
    }
    let cfg = &model.config;
    let mem_rows: Vec<usize> = sample.zones.positions(Zone::Mem).collect();
    let read_rows: Vec<usize> = sample.zones.positions(Zone::Read).collect();
    let len = sample.len();
    let mut report = GradFlowReport::default();

    // Repetition loss alone.
    {
        let mut g = Graph::new();
        let vars = model.bind(&mut g, true);
        let out = model.forward_graph(&mut g, &vars, &sample.tokens, &sample.position_ids, &sample.mask, None)?;
        let terms = loss_graph(&mut g, out.logits, sample)?;
        g.backward(terms.rep)?;
        let (mut k2, mut v2, mut x2) = (0.0, 0.0, 0.0);
        for l in 0..cfg.n_layers {
            k2 += sq_norm_rows(&g.grad_or_zeros(out.keys[l]), cfg.n_heads, len, cfg.d_head, &mem_rows);
            v2 += sq_norm_rows(&g.grad_or_zeros(out.values[l]), cfg.n_heads, len, cfg.d_head, &mem_rows);
            x2 += sq_norm_rows(&g.grad_or_zeros(out.hidden[l]), 1, len, cfg.d_model, &mem_rows);
        }
        report.rep_to_mem_keys = k2.sqrt();
        report.rep_to_mem_values = v2.sqrt();
        report.rep_to_mem_inputs = x2.sqrt();
        report.rep_to_read_embeddings =
            sq_norm_rows(&g.grad_or_zeros(out.embedded), 1, len, cfg.d_model, &read_rows).sqrt();
    }

    // Full objective, gradient on the logits themselves.
    {
        let mut g = Graph::new();
        let vars = model.bind(&mut g, true);
        let out = model.forward_graph(&mut g, &vars, &sample.tokens, &sample.position_ids, &sample.mask, None)?;
        let terms = loss_graph(&mut g, out.logits, sample)?;
        let total = g.add(terms.read, terms.rep)?;
        g.backward(total)?;
        let dl = g.grad_or_zeros(out.logits);
        let vocab = cfg.vocab_size;
        report.mem_logit_grad_max = mem_rows
            .iter()
            .flat_map(|&r| dl[r * vocab..(r + 1) * vocab].iter())
            .fold(0.0f64, |m, v| m.max(v.abs()));
    }

    report.finite_diff = finite_difference_check(model, sample, 1e-5, cfg.seed)?;

    if report.rep_to_mem_keys == 0.0 || report.rep_to_mem_values == 0.0 || report.rep_to_mem_inputs == 0.0 {
        return Err(Error::GradientFlow(format!(
            "repetition loss does not reach memory keys/values (|dK| {}, |dV| {}, |dx| {})",
            report.rep_to_mem_keys, report.rep_to_mem_values, report.rep_to_mem_inputs
        )));
    }
    if report.mem_logit_grad_max != 0.0 {
        return Err(Error::GradientFlow(format!(
            "memory-position logits carry gradient {}",
            report.mem_logit_grad_max
        )));
    }
    if cfg.n_layers >= 2 && report.rep_to_read_embeddings == 0.0 {
        return Err(Error::GradientFlow("repetition loss does not reach reading-zone embeddings".into()));
    }
    if report.finite_diff.max_rel_err > fd_tolerance {
        return Err(Error::GradientFlow(format!(
            "finite differences disagree: relative error {:.3e} in {}",
            report.finite_diff.max_rel_err, report.finite_diff.worst_param
        )));
    }
    Ok(report)
}

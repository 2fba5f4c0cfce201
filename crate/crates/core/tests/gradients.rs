//! Central-difference checks of every graph operation and of the full model.

use std::sync::Arc;

use anyhow::Result;
use loma::model::{Model, ModelConfig};
use loma::structuring::{build_sample, LomaParams};
use loma::tensor::{normal_tensor, seeded_rng, BinaryMask, Graph, Tensor, Var};
use loma::tokenizer::{Corpus, Vocab};
use loma::training::{finite_difference_check, verify_gradient_flow};

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

type Build<'a> = dyn Fn(&mut Graph<f64>, &[Var]) -> loma::Result<Var> + 'a;

/// Loss = Σ out ⊙ R for a fixed random R, so every output entry matters.
fn loss_of(inputs: &[Tensor<f64>], build: &Build<'_>, weights: &mut Option<Tensor<f64>>) -> Result<(f64, Vec<Vec<f64>>)> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(Arc::new(t.clone()))).collect();
    let out = build(&mut g, &vars)?;
    let shape = g.value(out).shape().to_vec();
    let r = weights.get_or_insert_with(|| normal_tensor(&shape, 0.0, 1.0, &mut seeded_rng(77))).clone();
    let rv = g.constant(Arc::new(r));
    let prod = g.mul(out, rv)?;
    let loss = g.sum(prod);
    let value = g.value(loss).item()?;
    g.backward(loss)?;
    Ok((value, vars.iter().map(|&v| g.grad_or_zeros(v)).collect()))
}

fn check(name: &str, inputs: Vec<Tensor<f64>>, build: &Build<'_>) -> Result<f64> {
    let mut weights = None;
    let (_, analytic) = loss_of(&inputs, build, &mut weights)?;
    let mut worst = 0.0f64;
    for (i, grads) in analytic.iter().enumerate() {
        for (j, &exact) in grads.iter().enumerate() {
            let mut eval = |delta: f64| -> Result<f64> {
                let mut shifted = inputs.clone();
                shifted[i].data_mut()[j] += delta;
                Ok(loss_of(&shifted, build, &mut weights)?.0)
            };
            let numeric = (eval(H)? - eval(-H)?) / (2.0 * H);
            let err = (exact - numeric).abs() / exact.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(err);
        }
    }
    assert!(worst < TOL, "{name}: relative error {worst:.3e}");
    Ok(worst)
}

fn rand(shape: &[usize], seed: u64) -> Tensor<f64> {
    normal_tensor(shape, 0.0, 1.0, &mut seeded_rng(seed))
}

#[test]
fn matmul_family() -> Result<()> {
    check("matmul 3x4 * 4x2", vec![rand(&[3, 4], 1), rand(&[4, 2], 2)], &|g, v| g.matmul(v[0], v[1]))?;
    check("matmul shared rhs", vec![rand(&[2, 3, 4], 3), rand(&[4, 5], 4)], &|g, v| g.matmul(v[0], v[1]))?;
    check("matmul batched", vec![rand(&[2, 3, 4], 5), rand(&[2, 4, 3], 6)], &|g, v| g.matmul(v[0], v[1]))?;
    check("matmul_nt batched", vec![rand(&[2, 3, 4], 7), rand(&[2, 5, 4], 8)], &|g, v| g.matmul_nt(v[0], v[1]))?;
    check("matmul_nt 2d", vec![rand(&[3, 4], 9), rand(&[6, 4], 10)], &|g, v| g.matmul_nt(v[0], v[1]))?;
    Ok(())
}

#[test]
fn elementwise() -> Result<()> {
    check("add", vec![rand(&[3, 5], 1), rand(&[3, 5], 2)], &|g, v| g.add(v[0], v[1]))?;
    check("mul", vec![rand(&[3, 5], 3), rand(&[3, 5], 4)], &|g, v| g.mul(v[0], v[1]))?;
    check("scale", vec![rand(&[4, 2], 5)], &|g, v| Ok(g.scale(v[0], 0.37)))?;
    check("silu", vec![rand(&[6, 3], 6)], &|g, v| Ok(g.silu(v[0])))?;
    check("sum", vec![rand(&[2, 3, 2], 7)], &|g, v| Ok(g.sum(v[0])))?;
    Ok(())
}

#[test]
fn normalization_and_lookup() -> Result<()> {
    check("rms_norm", vec![rand(&[4, 6], 1), rand(&[6], 2)], &|g, v| g.rms_norm(v[0], v[1], 1e-6))?;
    check("embedding", vec![rand(&[7, 4], 3)], &|g, v| g.embedding(v[0], &[3, 0, 3, 6]))?;
    check("rope", vec![rand(&[2, 5, 6], 4)], &|g, v| g.rope(v[0], &[0, 3, 4, 9, 17], 10_000.0))?;
    Ok(())
}

#[test]
fn shape_ops() -> Result<()> {
    check("reshape", vec![rand(&[3, 4], 1)], &|g, v| g.reshape(v[0], &[2, 6]))?;
    check("swap_axes01", vec![rand(&[2, 3, 4], 2)], &|g, v| g.swap_axes01(v[0]))?;
    check("concat1", vec![rand(&[2, 3, 4], 3), rand(&[2, 2, 4], 4)], &|g, v| g.concat1(v[0], v[1]))?;
    Ok(())
}

#[test]
fn softmax_and_cross_entropy() -> Result<()> {
    let mask = BinaryMask::from_rows(&[vec![1, 0, 0, 1], vec![1, 1, 0, 0], vec![0, 1, 1, 1]])?;
    check("masked_softmax 2d", vec![rand(&[3, 4], 1)], &|g, v| g.masked_softmax(v[0], &mask))?;
    let causal = BinaryMask::causal(3, 5, 2);
    check("masked_softmax broadcast", vec![rand(&[2, 3, 5], 2)], &|g, v| g.masked_softmax(v[0], &causal))?;
    check("cross_entropy rank 1", vec![rand(&[6], 3)], &|g, v| g.cross_entropy(v[0], &[(0, 4)]))?;
    check("cross_entropy rank 2", vec![rand(&[4, 6], 4)], &|g, v| g.cross_entropy(v[0], &[(0, 1), (2, 5), (3, 0)]))?;
    // cross_entropy(W x, y) with respect to W and x
    check("cross_entropy of product", vec![rand(&[3, 5], 5), rand(&[5, 4], 6)], &|g, v| {
        let logits = g.matmul(v[0], v[1])?;
        g.cross_entropy(logits, &[(0, 2), (1, 3), (2, 0)])
    })?;
    Ok(())
}

fn sample(t: usize, c: usize, n_chunks: usize, seed: u64) -> loma::structuring::StructuredSample {
    let p = LomaParams::new(t, c).unwrap();
    let doc = &Corpus::synthetic_random(1, n_chunks * t * c, 40, seed).documents[0];
    build_sample(doc, p, n_chunks * p.span(), &Vocab::new()).unwrap()
}

#[test]
fn miniature_model_exhaustive() -> Result<()> {
    let model = Model::<f64>::init(ModelConfig::miniature(&Vocab::new()))?;
    let s = sample(2, 2, 2, 3);
    let report = finite_difference_check(&model, &s, H, 0)?;
    assert!(report.exhaustive);
    assert_eq!(report.checks, model.param_count());
    assert!(report.max_rel_err < TOL, "{report:?}");
    Ok(())
}

#[test]
fn gradient_flow_two_layers() -> Result<()> {
    let cfg = ModelConfig { n_layers: 2, d_model: 16, n_heads: 2, d_head: 8, d_ff: 32, seed: 4, ..ModelConfig::miniature(&Vocab::new()) };
    let model = Model::<f64>::init(cfg)?;
    let report = verify_gradient_flow(&model, &sample(2, 2, 2, 8), TOL)?;
    assert_eq!(report.mem_logit_grad_max, 0.0);
    assert!(report.rep_to_mem_keys > 0.0 && report.rep_to_mem_values > 0.0);
    assert!(report.rep_to_read_embeddings > 0.0);
    assert!(!report.finite_diff.exhaustive);
    Ok(())
}

#[test]
fn single_layer_cannot_reach_read_embeddings() -> Result<()> {
    let model = Model::<f64>::init(ModelConfig::miniature(&Vocab::new()))?;
    let report = verify_gradient_flow(&model, &sample(2, 2, 1, 2), TOL)?;
    // repetition queries only see memory keys/values, which one layer
    // computes from the memory embeddings alone
    assert_eq!(report.rep_to_read_embeddings, 0.0);
    Ok(())
}

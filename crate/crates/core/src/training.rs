//! Two-part LoMA objective (reading-zone language modeling plus
//! repetition-zone reconstruction), the optimizer loop, and the
//! gradient-flow verification harness.

use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ParamKind};
use crate::structuring::{build_sample, LomaParams, StructuredSample, Zone};
use crate::tensor::{seeded_rng, Graph, Real, Tensor, Var};
use crate::tokenizer::{plan_lengths, Corpus, TokenId, Vocab};

mod gradflow;

pub use gradflow::{finite_difference_check, verify_gradient_flow, FiniteDiffReport, GradFlowReport};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ChunkLoss {
    pub read: f64,
    pub rep: f64,
    pub read_tokens: usize,
    pub rep_tokens: usize,
}

/// Summed cross-entropy per chunk and in total.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub chunks: Vec<ChunkLoss>,
    pub read_total: f64,
    pub rep_total: f64,
    pub total: f64,
    pub read_tokens: usize,
    pub rep_tokens: usize,
}

impl LossReport {
    pub fn read_per_token(&self) -> f64 {
        self.read_total / self.read_tokens.max(1) as f64
    }

    pub fn rep_per_token(&self) -> f64 {
        self.rep_total / self.rep_tokens.max(1) as f64
    }
}

fn row_cross_entropy<T: Real>(row: &[T], target: TokenId) -> f64 {
    let max = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = row.iter().map(|v| (v.as_f64() - max).exp()).sum();
    z.ln() + max - row[target].as_f64()
}

/// Evaluates the objective on precomputed logits `[len, vocab]`.
/// READ positions score their next document token, REP positions their
/// mirrored READ token; MEM and PAD positions are ignored.
pub fn compute_loss<T: Real>(logits: &Tensor<T>, sample: &StructuredSample) -> Result<LossReport> {
    if logits.rank() != 2 || logits.shape()[0] != sample.len() {
        return Err(Error::shape(format!("logits {:?} for a sample of length {}", logits.shape(), sample.len())));
    }
    let vocab = logits.shape()[1];
    let mut chunks = vec![ChunkLoss::default(); sample.n_chunks];
    for (i, label) in sample.labels.iter().enumerate() {
        let (Some(target), Some(chunk)) = (*label, sample.zones.chunks[i]) else { continue };
        if target >= vocab {
            return Err(Error::Index { index: target, bound: vocab });
        }
        let ce = row_cross_entropy(logits.row(i), target);
        let entry = &mut chunks[chunk];
        match sample.zones.zones[i] {
            Zone::Read => {
                entry.read += ce;
                entry.read_tokens += 1;
            }
            Zone::Rep => {
                entry.rep += ce;
                entry.rep_tokens += 1;
            }
            Zone::Mem | Zone::Pad => {}
        }
    }
    let read_total = chunks.iter().map(|c| c.read).sum();
    let rep_total = chunks.iter().map(|c| c.rep).sum();
    Ok(LossReport {
        read_tokens: chunks.iter().map(|c| c.read_tokens).sum(),
        rep_tokens: chunks.iter().map(|c| c.rep_tokens).sum(),
        read_total,
        rep_total,
        total: read_total + rep_total,
        chunks,
    })
}

/// Differentiable summed losses of one sample.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub read: Var,
    pub rep: Var,
}

pub fn loss_graph<T: Real>(g: &mut Graph<T>, logits: Var, sample: &StructuredSample) -> Result<LossVars> {
    let read = g.cross_entropy(logits, &sample.targets(Zone::Read))?;
    let rep = g.cross_entropy(logits, &sample.targets(Zone::Rep))?;
    Ok(LossVars { read, rep })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr_max: f64,
    pub lr_min: f64,
    pub warmup_steps: usize,
    pub batch_size: usize,
    pub max_steps: usize,
    pub seed: u64,
    /// Steps between progress log lines.
    pub eval_every: usize,
    pub weight_decay: f64,
    pub grad_clip: f64,
    /// Weight of the repetition term relative to the reading term.
    pub rep_weight: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Structured training length.
    pub s_hat: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_max: 3e-4,
            lr_min: 3e-5,
            warmup_steps: 100,
            batch_size: 8,
            max_steps: 1000,
            seed: 0,
            eval_every: 100,
            weight_decay: 0.1,
            grad_clip: 1.0,
            rep_weight: 1.0,
            beta1: 0.9,
            beta2: 0.95,
            s_hat: 40,
        }
    }
}

impl TrainConfig {
    /// Linear warmup from `lr_min` to `lr_max`, then cosine decay back to
    /// `lr_min` at `max_steps`.
    pub fn lr_at(&self, step: usize) -> f64 {
        let (hi, lo) = (self.lr_max, self.lr_min);
        if step < self.warmup_steps {
            return lo + (hi - lo) * step as f64 / self.warmup_steps as f64;
        }
        let decay_steps = self.max_steps.saturating_sub(self.warmup_steps).max(1);
        let progress = ((step - self.warmup_steps) as f64 / decay_steps as f64).min(1.0);
        lo + 0.5 * (hi - lo) * (1.0 + (std::f64::consts::PI * progress).cos())
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr_max >= self.lr_min && self.lr_min >= 0.0) {
            return Err(Error::Config(format!("need lr_max {} >= lr_min {} >= 0", self.lr_max, self.lr_min)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("betas must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Decoupled-weight-decay Adam.
pub struct AdamW<T> {
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    step: usize,
}

impl<T: Real> AdamW<T> {
    pub fn new(model: &Model<T>) -> Self {
        let zeros = || model.named_params().iter().map(|(_, _, t)| vec![T::zero(); t.numel()]).collect();
        AdamW { m: zeros(), v: zeros(), step: 0 }
    }

    /// Applies one update. `grads` follow [`Model::named_params`] order.
    pub fn update(&mut self, model: &mut Model<T>, grads: &[Vec<T>], lr: f64, cfg: &TrainConfig) {
        self.step += 1;
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        let kinds: Vec<ParamKind> = model.named_params().iter().map(|(_, k, _)| *k).collect();
        let (base_rows, width) = (model.config.base_size, model.config.d_model);
        let (b1t, b2t, eps) = (T::of(b1), T::of(b2), T::of(1e-8));
        let (one_b1, one_b2) = (T::of(1.0 - b1), T::of(1.0 - b2));
        let (step_size, inv_bc2) = (T::of(lr / bc1), T::of(1.0 / bc2));
        let decay = T::of(lr * cfg.weight_decay);
        for (i, param) in model.params_mut().into_iter().enumerate() {
            let data = Arc::make_mut(param).data_mut();
            let decayed = match kinds[i] {
                ParamKind::Matrix => data.len(),
                // ordinary rows only; special-token rows are left undecayed
                ParamKind::Embedding => base_rows * width,
                ParamKind::Norm => 0,
            };
            let (m, v, g) = (&mut self.m[i], &mut self.v[i], &grads[i]);
            for j in 0..data.len() {
                m[j] = b1t * m[j] + one_b1 * g[j];
                v[j] = b2t * v[j] + one_b2 * g[j] * g[j];
                if j < decayed {
                    data[j] = data[j] - decay * data[j];
                }
                data[j] = data[j] - step_size * m[j] / ((v[j] * inv_bc2).sqrt() + eps);
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub step: usize,
    /// `read + rep`, per-token means.
    pub loss: f64,
    pub read: f64,
    pub rep: f64,
    pub lr: f64,
}

pub fn loss_curve_csv(rows: &[LossRow]) -> String {
    let mut out = String::from("step,L,L_Read,L_Rep,lr\n");
    for r in rows {
        out.push_str(&format!("{},{:.9},{:.9},{:.9},{:.9e}\n", r.step, r.loss, r.read, r.rep, r.lr));
    }
    out
}

pub struct TrainOutcome<T> {
    pub model: Model<T>,
    pub curve: Vec<LossRow>,
}

/// Cuts a window of at most `max_len` tokens out of `doc`.
fn crop<'a>(doc: &'a [TokenId], max_len: usize, rng: &mut ChaCha8Rng) -> &'a [TokenId] {
    if doc.len() <= max_len {
        return doc;
    }
    let start = rng.random_range(0..=doc.len() - max_len);
    &doc[start..start + max_len]
}

/// One batch of structured samples drawn from `corpus`.
pub fn sample_batch(
    corpus: &Corpus,
    p: LomaParams,
    cfg: &TrainConfig,
    vocab: &Vocab,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<StructuredSample>> {
    let max_raw = plan_lengths(0, p.t, p.c, cfg.s_hat)?.max_raw_len;
    // whole chunks only, so the window never ends mid reading zone
    let window = (max_raw / p.read_len()).max(1) * p.read_len();
    (0..cfg.batch_size)
        .map(|_| {
            let doc = &corpus.documents[rng.random_range(0..corpus.len())];
            build_sample(crop(doc, window.min(max_raw), rng), p, cfg.s_hat, vocab)
        })
        .collect()
}

/// Gradients and losses of one batch. Gradients follow
/// [`Model::named_params`] order and are normalized per labeled token.
pub fn batch_gradients<T: Real>(
    model: &Model<T>,
    batch: &[StructuredSample],
    rep_weight: f64,
) -> Result<(Vec<Vec<T>>, LossReport)> {
    let n_read: usize = batch.iter().map(|s| s.targets(Zone::Read).len()).sum();
    let n_rep: usize = batch.iter().map(|s| s.targets(Zone::Rep).len()).sum();
    let read_scale = T::of(1.0 / n_read.max(1) as f64);
    let rep_scale = T::of(rep_weight / n_rep.max(1) as f64);
    let mut grads: Vec<Vec<T>> = model.named_params().iter().map(|(_, _, t)| vec![T::zero(); t.numel()]).collect();
    let mut report = LossReport::default();
    for sample in batch {
        let mut g = Graph::new();
        let vars = model.bind(&mut g, true);
        let out = model.forward_graph(&mut g, &vars, &sample.tokens, &sample.position_ids, &sample.mask, None)?;
        let terms = loss_graph(&mut g, out.logits, sample)?;
        let read = g.scale(terms.read, read_scale);
        let rep = g.scale(terms.rep, rep_scale);
        let total = g.add(read, rep)?;
        g.backward(total)?;
        for (acc, var) in grads.iter_mut().zip(vars.all()) {
            if let Some(gv) = g.grad(var) {
                acc.iter_mut().zip(gv).for_each(|(a, &b)| *a = *a + b);
            }
        }
        let part = compute_loss(g.value(out.logits), sample)?;
        report.read_total += part.read_total;
        report.rep_total += part.rep_total;
        report.read_tokens += part.read_tokens;
        report.rep_tokens += part.rep_tokens;
        report.chunks.extend(part.chunks);
    }
    report.total = report.read_total + report.rep_total;
    Ok((grads, report))
}

fn clip_global_norm<T: Real>(grads: &mut [Vec<T>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().map(|g| g.as_f64() * g.as_f64()).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = T::of(max_norm / norm);
        grads.iter_mut().flatten().for_each(|g| *g = *g * s);
    }
    norm
}

/// Trains `model` on structured samples cut from `corpus`.
/// Each step logs per-token `L_Read`, `L_Rep` and their sum.
pub fn train<T: Real>(
    model: Model<T>,
    corpus: &Corpus,
    p: LomaParams,
    cfg: &TrainConfig,
    vocab: &Vocab,
) -> Result<TrainOutcome<T>> {
    train_with(model, corpus, p, cfg, vocab, |_, _| {})
}

/// [`train`] with a callback invoked after every step.
pub fn train_with<T: Real>(
    mut model: Model<T>,
    corpus: &Corpus,
    p: LomaParams,
    cfg: &TrainConfig,
    vocab: &Vocab,
    mut on_step: impl FnMut(&LossRow, &Model<T>),
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    plan_lengths(p.read_len(), p.t, p.c, cfg.s_hat)?;
    if corpus.is_empty() {
        return Err(Error::Config("training corpus is empty".into()));
    }
    let mut rng = seeded_rng(cfg.seed);
    let mut opt = AdamW::new(&model);
    let mut curve = Vec::with_capacity(cfg.max_steps);
    for step in 0..cfg.max_steps {
        let batch = sample_batch(corpus, p, cfg, vocab, &mut rng)?;
        let (mut grads, report) = batch_gradients(&model, &batch, cfg.rep_weight)?;
        let row = LossRow {
            step,
            loss: report.read_per_token() + report.rep_per_token(),
            read: report.read_per_token(),
            rep: report.rep_per_token(),
            lr: cfg.lr_at(step),
        };
        let grad_norm = clip_global_norm(&mut grads, cfg.grad_clip);
        if !row.loss.is_finite() || !grad_norm.is_finite() {
            return Err(Error::Diverged { step, detail: format!("loss {} grad norm {grad_norm}", row.loss) });
        }
        opt.update(&mut model, &grads, row.lr, cfg);
        if cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0 {
            log::info!(
                "step {:>6}  L {:.4}  L_Read {:.4}  L_Rep {:.4}  lr {:.2e}",
                step + 1,
                row.loss,
                row.read,
                row.rep,
                row.lr
            );
        }
        on_step(&row, &model);
        curve.push(row);
    }
    Ok(TrainOutcome { model, curve })
}

/// Trailing moving average of `values` over `window` entries.
pub fn smoothed(values: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    let mut out = Vec::with_capacity(values.len());
    let mut acc = 0.0;
    for (i, &v) in values.iter().enumerate() {
        acc += v;
        if i >= window {
            acc -= values[i - window];
        }
        out.push(acc / (i + 1).min(window) as f64);
    }
    out
}

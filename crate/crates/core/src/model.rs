//! Pre-norm decoder-only transformer with rotary positions, explicit mask
//! and position-id injection, and a KV cache that tolerates repeated or
//! non-monotone position ids.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{normal_tensor, seeded_rng, BinaryMask, Graph, Real, Tensor, Var};
use crate::tokenizer::{TokenId, Vocab};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_head: usize,
    pub d_ff: usize,
    /// Ordinary tokens; rows at and above this index are special tokens.
    pub base_size: usize,
    pub vocab_size: usize,
    pub max_position: usize,
    pub rope_base: f64,
    pub norm_eps: f64,
    pub init_std: f64,
    pub seed: u64,
}

impl ModelConfig {
    /// 4 layers, 4 heads, width 128.
    pub fn toy(vocab: &Vocab) -> Self {
        ModelConfig {
            n_layers: 4,
            n_heads: 4,
            d_model: 128,
            d_head: 32,
            d_ff: 512,
            base_size: vocab.base_size,
            vocab_size: vocab.size(),
            max_position: 4096,
            rope_base: 10_000.0,
            norm_eps: 1e-6,
            init_std: 0.02,
            seed: 0,
        }
    }

    /// One layer of width 8, small enough for exhaustive finite differences.
    pub fn miniature(vocab: &Vocab) -> Self {
        ModelConfig {
            n_layers: 1,
            n_heads: 2,
            d_model: 8,
            d_head: 4,
            d_ff: 16,
            init_std: 0.5,
            max_position: 256,
            ..Self::toy(vocab)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.n_layers == 0 || self.n_heads == 0 || self.d_head == 0 || self.d_ff == 0 {
            return bad("layer, head, head-width and feed-forward extents must be >= 1".into());
        }
        if self.d_model != self.n_heads * self.d_head {
            return bad(format!("d_model {} != n_heads {} * d_head {}", self.d_model, self.n_heads, self.d_head));
        }
        if !self.d_head.is_multiple_of(2) {
            return bad(format!("rotary encoding needs an even d_head, got {}", self.d_head));
        }
        if self.vocab_size < self.base_size + 2 {
            return bad(format!("vocab_size {} < base_size {} + 2", self.vocab_size, self.base_size));
        }
        if self.max_position == 0 {
            return bad("max_position must be >= 1".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer<T> {
    pub attn_norm: Arc<Tensor<T>>,
    pub wq: Arc<Tensor<T>>,
    pub wk: Arc<Tensor<T>>,
    pub wv: Arc<Tensor<T>>,
    pub wo: Arc<Tensor<T>>,
    pub mlp_norm: Arc<Tensor<T>>,
    pub w_up: Arc<Tensor<T>>,
    pub w_down: Arc<Tensor<T>>,
}

impl<T> Layer<T> {
    const NAMES: [&'static str; 8] = ["attn_norm", "wq", "wk", "wv", "wo", "mlp_norm", "w_up", "w_down"];

    fn tensors(&self) -> [&Arc<Tensor<T>>; 8] {
        [&self.attn_norm, &self.wq, &self.wk, &self.wv, &self.wo, &self.mlp_norm, &self.w_up, &self.w_down]
    }

    fn tensors_mut(&mut self) -> [&mut Arc<Tensor<T>>; 8] {
        [
            &mut self.attn_norm,
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.mlp_norm,
            &mut self.w_up,
            &mut self.w_down,
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub embedding: Arc<Tensor<T>>,
    pub layers: Vec<Layer<T>>,
    pub final_norm: Arc<Tensor<T>>,
    pub lm_head: Arc<Tensor<T>>,
}

/// Role of a parameter, used to pick optimizer treatment.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Embedding,
    Norm,
    Matrix,
}

/// Graph handles of every parameter, in [`Model::named_params`] order.
#[derive(Clone, Debug)]
pub struct ModelVars {
    pub embedding: Var,
    pub layers: Vec<[Var; 8]>,
    pub final_norm: Var,
    pub lm_head: Var,
}

impl ModelVars {
    pub fn all(&self) -> Vec<Var> {
        let mut v = vec![self.embedding];
        for l in &self.layers {
            v.extend_from_slice(l);
        }
        v.push(self.final_norm);
        v.push(self.lm_head);
        v
    }
}

/// Cached keys (already rotated) and values of one layer, `[heads, len, d_head]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerKv<T> {
    pub keys: Arc<Tensor<T>>,
    pub values: Arc<Tensor<T>>,
}

/// Per-layer key/value history with the position id of every entry.
/// The first `compressed_len` entries belong to compressed memory zones.
#[derive(Clone, Debug, PartialEq)]
pub struct KvCache<T> {
    layers: Vec<LayerKv<T>>,
    positions: Vec<usize>,
    compressed_len: usize,
}

impl<T: Real> KvCache<T> {
    pub fn empty(config: &ModelConfig) -> Self {
        let blank = Arc::new(Tensor::zeros(&[config.n_heads, 0, config.d_head]));
        KvCache {
            layers: (0..config.n_layers).map(|_| LayerKv { keys: blank.clone(), values: blank.clone() }).collect(),
            positions: Vec::new(),
            compressed_len: 0,
        }
    }

    pub fn total_len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn compressed_len(&self) -> usize {
        self.compressed_len
    }

    pub fn uncompressed_len(&self) -> usize {
        self.total_len() - self.compressed_len
    }

    pub fn set_compressed_len(&mut self, len: usize) -> Result<()> {
        if len > self.total_len() {
            return Err(Error::Precondition(format!("compressed length {len} exceeds cache length {}", self.total_len())));
        }
        self.compressed_len = len;
        Ok(())
    }

    pub fn positions(&self) -> &[usize] {
        &self.positions
    }

    pub fn layers(&self) -> &[LayerKv<T>] {
        &self.layers
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    /// Bytes held by keys and values across layers.
    pub fn memory_bytes(&self) -> usize {
        self.layers.iter().map(|l| (l.keys.numel() + l.values.numel()) * std::mem::size_of::<T>()).sum()
    }

    /// Cache holding entries `indices` (in that order) of every layer.
    /// The compressed prefix is kept only as far as it is selected contiguously.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let len = self.total_len();
        if let Some(&bad) = indices.iter().find(|&&i| i >= len) {
            return Err(Error::Index { index: bad, bound: len });
        }
        let layers = self
            .layers
            .iter()
            .map(|l| LayerKv { keys: Arc::new(gather(&l.keys, indices)), values: Arc::new(gather(&l.values, indices)) })
            .collect();
        let compressed_len = indices.iter().enumerate().take_while(|&(k, &i)| k == i && i < self.compressed_len).count();
        Ok(KvCache { layers, positions: indices.iter().map(|&i| self.positions[i]).collect(), compressed_len })
    }

    /// Entries of `self` followed by entries of `other`.
    pub fn concat(&self, other: &KvCache<T>) -> Result<Self> {
        if self.layers.len() != other.layers.len() {
            return Err(Error::shape("caches have different layer counts"));
        }
        let layers = self
            .layers
            .iter()
            .zip(&other.layers)
            .map(|(a, b)| LayerKv {
                keys: Arc::new(cat1(&a.keys, &b.keys)),
                values: Arc::new(cat1(&a.values, &b.values)),
            })
            .collect();
        let mut positions = self.positions.clone();
        positions.extend_from_slice(&other.positions);
        Ok(KvCache { layers, positions, compressed_len: self.compressed_len })
    }

    /// Overwrites the key and value vectors of entry `index` in `layer`
    /// for every head. `key` and `value` hold `heads * d_head` values, head-major.
    pub fn overwrite_entry(&mut self, layer: usize, index: usize, key: &[T], value: &[T]) -> Result<()> {
        let shape = self.layers[layer].keys.shape().to_vec();
        let (heads, len, dh) = (shape[0], shape[1], shape[2]);
        if index >= len {
            return Err(Error::Index { index, bound: len });
        }
        if key.len() != heads * dh || value.len() != heads * dh {
            return Err(Error::shape("entry must hold heads * d_head values"));
        }
        let lkv = &mut self.layers[layer];
        for (tensor, src) in [(&mut lkv.keys, key), (&mut lkv.values, value)] {
            let data = Arc::make_mut(tensor).data_mut();
            for h in 0..heads {
                let at = (h * len + index) * dh;
                data[at..at + dh].copy_from_slice(&src[h * dh..(h + 1) * dh]);
            }
        }
        Ok(())
    }

    /// Cache assembled from per-layer `[heads, len, d_head]` tensors.
    pub fn from_parts(layers: Vec<LayerKv<T>>, positions: Vec<usize>) -> Result<Self> {
        for l in &layers {
            if l.keys.shape() != l.values.shape() || l.keys.rank() != 3 || l.keys.shape()[1] != positions.len() {
                return Err(Error::shape("cache layer shape disagrees with position count"));
            }
        }
        Ok(KvCache { layers, positions, compressed_len: 0 })
    }
}

fn gather<T: Real>(t: &Tensor<T>, indices: &[usize]) -> Tensor<T> {
    let (heads, len, dh) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    let mut out = Vec::with_capacity(heads * indices.len() * dh);
    for h in 0..heads {
        for &i in indices {
            let at = (h * len + i) * dh;
            out.extend_from_slice(&t.data()[at..at + dh]);
        }
    }
    Tensor::new(vec![heads, indices.len(), dh], out).expect("gathered shape")
}

fn cat1<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (heads, la, dh) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    let lb = b.shape()[1];
    let mut out = Vec::with_capacity(a.numel() + b.numel());
    for h in 0..heads {
        out.extend_from_slice(&a.data()[h * la * dh..(h + 1) * la * dh]);
        out.extend_from_slice(&b.data()[h * lb * dh..(h + 1) * lb * dh]);
    }
    Tensor::new(vec![heads, la + lb, dh], out).expect("concatenated shape")
}

/// Graph handles produced by one forward pass.
pub struct ForwardOutput<T> {
    /// `[n, vocab]`.
    pub logits: Var,
    /// Per layer, rotated keys over cache plus new entries, `[heads, len, d_head]`.
    pub keys: Vec<Var>,
    pub values: Vec<Var>,
    /// Per layer, the residual stream entering the layer, `[n, d_model]`.
    pub hidden: Vec<Var>,
    /// Token embeddings, `[n, d_model]`.
    pub embedded: Var,
    pub cache: KvCache<T>,
}

/// Rows drawn from a per-dimension normal fitted to `base`'s rows.
pub fn special_token_rows<T: Real>(base: &Tensor<T>, count: usize, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let (rows, width) = (base.shape()[0], base.shape()[1]);
    let mut out = Vec::with_capacity(count * width);
    let stats: Vec<(f64, f64)> = (0..width)
        .map(|j| {
            let col = (0..rows).map(|r| base.data()[r * width + j].as_f64());
            let mean = col.clone().sum::<f64>() / rows as f64;
            let var = col.map(|v| (v - mean) * (v - mean)).sum::<f64>() / rows as f64;
            (mean, var)
        })
        .collect();
    for _ in 0..count {
        for &(mean, var) in &stats {
            let z: Tensor<f64> = normal_tensor(&[1], mean, var.sqrt(), rng);
            out.push(T::of(z.data()[0]));
        }
    }
    Tensor::new(vec![count, width], out).expect("special rows shape")
}

impl<T: Real> Model<T> {
    /// Seeded initialization. Ordinary embedding rows are normal; the two
    /// special-token rows follow the empirical statistics of those rows.
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = seeded_rng(config.seed);
        let (d, ff, std) = (config.d_model, config.d_ff, config.init_std);
        let resid_std = std / (2.0 * config.n_layers as f64).sqrt();
        let base: Tensor<T> = normal_tensor(&[config.base_size, d], 0.0, std, &mut rng);
        let mut layers = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            layers.push(Layer {
                attn_norm: Arc::new(Tensor::full(&[d], T::one())),
                wq: Arc::new(normal_tensor(&[d, d], 0.0, std, &mut rng)),
                wk: Arc::new(normal_tensor(&[d, d], 0.0, std, &mut rng)),
                wv: Arc::new(normal_tensor(&[d, d], 0.0, std, &mut rng)),
                wo: Arc::new(normal_tensor(&[d, d], 0.0, resid_std, &mut rng)),
                mlp_norm: Arc::new(Tensor::full(&[d], T::one())),
                w_up: Arc::new(normal_tensor(&[d, ff], 0.0, std, &mut rng)),
                w_down: Arc::new(normal_tensor(&[ff, d], 0.0, resid_std, &mut rng)),
            });
        }
        let lm_head = Arc::new(normal_tensor(&[d, config.vocab_size], 0.0, std, &mut rng));
        let mut model = Model {
            embedding: Arc::new(base),
            layers,
            final_norm: Arc::new(Tensor::full(&[d], T::one())),
            lm_head,
            config,
        };
        model.extend_embedding(&mut rng)?;
        Ok(model)
    }

    /// Grows the embedding from `base_size` rows to `vocab_size` rows,
    /// drawing the new rows from the statistics of the ordinary rows.
    pub fn extend_embedding(&mut self, rng: &mut ChaCha8Rng) -> Result<()> {
        let (rows, width) = (self.embedding.shape()[0], self.embedding.shape()[1]);
        let base_size = self.config.base_size;
        if rows != base_size {
            return Err(Error::Config(format!("embedding already has {rows} rows, expected {base_size}")));
        }
        let extra = special_token_rows(&self.embedding, self.config.vocab_size - base_size, rng);
        let mut data = self.embedding.data().to_vec();
        data.extend_from_slice(extra.data());
        self.embedding = Arc::new(Tensor::new(vec![self.config.vocab_size, width], data)?);
        Ok(())
    }

    pub fn named_params(&self) -> Vec<(String, ParamKind, &Arc<Tensor<T>>)> {
        let mut out = vec![("embedding".to_string(), ParamKind::Embedding, &self.embedding)];
        for (i, layer) in self.layers.iter().enumerate() {
            for (name, t) in Layer::<T>::NAMES.iter().zip(layer.tensors()) {
                let kind = if name.ends_with("norm") { ParamKind::Norm } else { ParamKind::Matrix };
                out.push((format!("layers.{i}.{name}"), kind, t));
            }
        }
        out.push(("final_norm".into(), ParamKind::Norm, &self.final_norm));
        out.push(("lm_head".into(), ParamKind::Matrix, &self.lm_head));
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Arc<Tensor<T>>> {
        let mut out = vec![&mut self.embedding];
        for layer in &mut self.layers {
            out.extend(layer.tensors_mut());
        }
        out.push(&mut self.final_norm);
        out.push(&mut self.lm_head);
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, _, t)| t.numel()).sum()
    }

    /// Registers every parameter in `g`, as differentiable leaves when
    /// `trainable` is set and as constants otherwise.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> ModelVars {
        let mut leaf = |t: &Arc<Tensor<T>>| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) };
        let embedding = leaf(&self.embedding);
        let layers = self
            .layers
            .iter()
            .map(|l| {
                let ts = l.tensors();
                std::array::from_fn(|i| leaf(ts[i]))
            })
            .collect();
        let final_norm = leaf(&self.final_norm);
        let lm_head = leaf(&self.lm_head);
        ModelVars { embedding, layers, final_norm, lm_head }
    }

    /// Forward pass recorded in `g`.
    ///
    /// `mask` has one row per input token and one column per cache entry
    /// followed by one per input token. Keys are rotated at the supplied
    /// position ids before they enter the cache.
    pub fn forward_graph(
        &self,
        g: &mut Graph<T>,
        vars: &ModelVars,
        tokens: &[TokenId],
        position_ids: &[usize],
        mask: &BinaryMask,
        cache: Option<KvCache<T>>,
    ) -> Result<ForwardOutput<T>> {
        let cfg = &self.config;
        let n = tokens.len();
        let cache = cache.unwrap_or_else(|| KvCache::empty(cfg));
        let past = cache.total_len();
        if position_ids.len() != n {
            return Err(Error::shape(format!("{} position ids for {n} tokens", position_ids.len())));
        }
        if mask.rows() != n || mask.cols() != past + n {
            return Err(Error::shape(format!(
                "mask {}x{} but expected {n}x{} (cache {past} + input {n})",
                mask.rows(),
                mask.cols(),
                past + n
            )));
        }
        if cache.n_layers() != cfg.n_layers {
            return Err(Error::shape("cache layer count differs from model"));
        }
        if let Some(&p) = position_ids.iter().find(|&&p| p >= cfg.max_position) {
            return Err(Error::Capacity { requested: p, max_position: cfg.max_position });
        }

        let (h, dh, d) = (cfg.n_heads, cfg.d_head, cfg.d_model);
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let embedded = g.embedding(vars.embedding, tokens)?;
        let mut x = embedded;
        let mut keys = Vec::with_capacity(cfg.n_layers);
        let mut values = Vec::with_capacity(cfg.n_layers);
        let mut hidden = Vec::with_capacity(cfg.n_layers);
        let mut new_layers = Vec::with_capacity(cfg.n_layers);

        let heads_first = |g: &mut Graph<T>, v: Var| -> Result<Var> {
            let r = g.reshape(v, &[n, h, dh])?;
            g.swap_axes01(r)
        };

        for (l, lv) in vars.layers.iter().enumerate() {
            let [attn_norm, wq, wk, wv, wo, mlp_norm, w_up, w_down] = *lv;
            hidden.push(x);
            let xn = g.rms_norm(x, attn_norm, cfg.norm_eps)?;
            let q = g.matmul(xn, wq)?;
            let q = heads_first(g, q)?;
            let q = g.rope(q, position_ids, cfg.rope_base)?;
            let k = g.matmul(xn, wk)?;
            let k = heads_first(g, k)?;
            let k = g.rope(k, position_ids, cfg.rope_base)?;
            let v = g.matmul(xn, wv)?;
            let v = heads_first(g, v)?;

            let (k_all, v_all) = if past == 0 {
                (k, v)
            } else {
                let ck = g.constant(cache.layers[l].keys.clone());
                let cv = g.constant(cache.layers[l].values.clone());
                (g.concat1(ck, k)?, g.concat1(cv, v)?)
            };
            keys.push(k_all);
            values.push(v_all);
            new_layers.push(LayerKv { keys: g.value_arc(k_all), values: g.value_arc(v_all) });

            let scores = g.matmul_nt(q, k_all)?;
            let scores = g.scale(scores, scale);
            let probs = g.masked_softmax(scores, mask)?;
            let attn = g.matmul(probs, v_all)?;
            let attn = g.swap_axes01(attn)?;
            let attn = g.reshape(attn, &[n, d])?;
            let attn = g.matmul(attn, wo)?;
            x = g.add(x, attn)?;

            let xn = g.rms_norm(x, mlp_norm, cfg.norm_eps)?;
            let up = g.matmul(xn, w_up)?;
            let up = g.silu(up);
            let down = g.matmul(up, w_down)?;
            x = g.add(x, down)?;
        }
        let xn = g.rms_norm(x, vars.final_norm, cfg.norm_eps)?;
        let logits = g.matmul(xn, vars.lm_head)?;

        let mut positions = cache.positions;
        positions.extend_from_slice(position_ids);
        let cache = KvCache { layers: new_layers, positions, compressed_len: cache.compressed_len };
        Ok(ForwardOutput { logits, keys, values, hidden, embedded, cache })
    }

    /// Inference forward pass: logits `[n, vocab]` and the extended cache.
    pub fn forward(
        &self,
        tokens: &[TokenId],
        position_ids: &[usize],
        mask: &BinaryMask,
        cache: Option<KvCache<T>>,
    ) -> Result<(Tensor<T>, KvCache<T>)> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let out = self.forward_graph(&mut g, &vars, tokens, position_ids, mask, cache)?;
        let logits = g.value(out.logits).clone();
        Ok((logits, out.cache))
    }

    // ----- checkpoints ---------------------------------------------------

    /// Writes a versioned binary checkpoint: magic, format version, a JSON
    /// header with the config and tensor table, then every value as
    /// little-endian `f64`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let params = self.named_params();
        let header = CheckpointHeader {
            config: self.config.clone(),
            dtype: T::NAME.to_string(),
            tensors: params.iter().map(|(n, _, t)| (n.clone(), t.shape().to_vec())).collect(),
        };
        let header = serde_json::to_vec(&header)?;
        let mut buf = Vec::with_capacity(16 + header.len() + self.param_count() * 8);
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
        buf.extend_from_slice(&header);
        for (_, _, t) in &params {
            for v in t.data() {
                buf.extend_from_slice(&v.as_f64().to_le_bytes());
            }
        }
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::File::create(path)?.write_all(&buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        let bad = |msg: &str| Error::Checkpoint(format!("{}: {msg}", path.display()));
        if bytes.len() < 20 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(20..20 + header_len).ok_or_else(|| bad("truncated header"))?;
        let header: CheckpointHeader = serde_json::from_slice(body)?;
        let mut model = Model::<T>::init(header.config.clone())?;
        let mut offset = 20 + header_len;
        let expected: Vec<(String, Vec<usize>)> =
            model.named_params().iter().map(|(n, _, t)| (n.clone(), t.shape().to_vec())).collect();
        if expected != header.tensors {
            return Err(bad("tensor table does not match the configured architecture"));
        }
        for (slot, (_, shape)) in model.params_mut().into_iter().zip(&header.tensors) {
            let numel: usize = shape.iter().product();
            let raw = bytes.get(offset..offset + numel * 8).ok_or_else(|| bad("truncated tensor data"))?;
            let data = raw.chunks_exact(8).map(|c| T::of(f64::from_le_bytes(c.try_into().expect("8 bytes")))).collect();
            *slot = Arc::new(Tensor::new(shape.clone(), data)?);
            offset += numel * 8;
        }
        if offset != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        Ok(model)
    }

    /// Same weights at another precision.
    pub fn cast<U: Real>(&self) -> Model<U> {
        let c = |t: &Arc<Tensor<T>>| Arc::new(t.cast::<U>());
        Model {
            config: self.config.clone(),
            embedding: c(&self.embedding),
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    attn_norm: c(&l.attn_norm),
                    wq: c(&l.wq),
                    wk: c(&l.wk),
                    wv: c(&l.wv),
                    wo: c(&l.wo),
                    mlp_norm: c(&l.mlp_norm),
                    w_up: c(&l.w_up),
                    w_down: c(&l.w_down),
                })
                .collect(),
            final_norm: c(&self.final_norm),
            lm_head: c(&self.lm_head),
        }
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"LOMACKPT";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    config: ModelConfig,
    dtype: String,
    tensors: Vec<(String, Vec<usize>)>,
}

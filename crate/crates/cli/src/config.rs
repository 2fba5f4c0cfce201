use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use loma::generator::PositionType;
use loma::model::ModelConfig;
use loma::structuring::LomaParams;
use loma::tokenizer::{Corpus, Vocab};
use loma::training::TrainConfig;
use serde::{Deserialize, Serialize};

/// Marks an error as a configuration problem (exit code 2).
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct ConfigError(pub String);

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub precision: Precision,
    pub paths: PathsSection,
    pub loma: LomaSection,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub corpus: CorpusSection,
    pub generate: GenerateSection,
    pub eval: EvalSection,
    pub perf: PerfSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            precision: Precision::F32,
            paths: PathsSection::default(),
            loma: LomaSection::default(),
            model: ModelSection::default(),
            train: TrainConfig::default(),
            corpus: CorpusSection::default(),
            generate: GenerateSection::default(),
            eval: EvalSection::default(),
            perf: PerfSection::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    pub checkpoint: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LomaSection {
    pub t: usize,
    pub c: usize,
    pub position_type: PositionType,
    pub disable_compression: bool,
}

impl Default for LomaSection {
    fn default() -> Self {
        LomaSection { t: 4, c: 2, position_type: PositionType::Intermittent, disable_compression: false }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    /// `toy` or `miniature`; the remaining keys override it.
    pub profile: String,
    pub n_layers: Option<usize>,
    pub n_heads: Option<usize>,
    pub d_model: Option<usize>,
    pub d_head: Option<usize>,
    pub d_ff: Option<usize>,
    pub max_position: Option<usize>,
    pub init_std: Option<f64>,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            profile: "toy".into(),
            n_layers: None,
            n_heads: None,
            d_model: None,
            d_head: None,
            d_ff: None,
            max_position: None,
            init_std: None,
        }
    }
}

/// Either a manifest of text files or a synthetic random-token corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSection {
    pub manifest: Option<PathBuf>,
    pub newline_delimited: bool,
    pub n_docs: usize,
    pub doc_len: usize,
    pub alphabet: usize,
    pub seed: u64,
}

impl Default for CorpusSection {
    fn default() -> Self {
        CorpusSection { manifest: None, newline_delimited: false, n_docs: 20_000, doc_len: 64, alphabet: 32, seed: 1 }
    }
}

impl CorpusSection {
    pub fn load(&self, vocab: &Vocab) -> anyhow::Result<Corpus> {
        match &self.manifest {
            Some(path) => Ok(Corpus::from_manifest(vocab, path, self.newline_delimited)?),
            None => {
                if self.alphabet == 0 || self.alphabet > 256 || self.doc_len == 0 {
                    bail!(ConfigError(format!(
                        "synthetic corpus needs 1 <= alphabet <= 256 and doc_len >= 1 (got {} and {})",
                        self.alphabet, self.doc_len
                    )));
                }
                Ok(Corpus::synthetic_random(self.n_docs, self.doc_len, self.alphabet, self.seed))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateSection {
    pub prompt: String,
    /// Token ids, used instead of `prompt` when nonempty.
    pub prompt_ids: Vec<usize>,
    pub max_len: usize,
}

impl Default for GenerateSection {
    fn default() -> Self {
        GenerateSection { prompt: String::new(), prompt_ids: Vec::new(), max_len: 64 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Held-out corpus; same keys as `[corpus]`.
    pub corpus: CorpusSection,
    /// `model` or `copy`.
    pub decoder: String,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { corpus: CorpusSection { n_docs: 200, doc_len: 16, seed: 99, ..Default::default() }, decoder: "model".into() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerfSection {
    /// `measured`, `linear` (T = k), `constant` (T = 1) or `affine`.
    pub cost_model: String,
    pub affine: [f64; 3],
    pub lengths: Vec<usize>,
    pub cache_lengths: Vec<usize>,
    pub repeats: usize,
    pub max_m: usize,
}

impl Default for PerfSection {
    fn default() -> Self {
        PerfSection {
            cost_model: "measured".into(),
            affine: [1.0, 50.0, 10.0],
            lengths: vec![1, 16],
            cache_lengths: vec![0, 256, 512, 1024, 1536, 2048],
            repeats: 5,
            max_m: 64,
        }
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).map_err(|e| ConfigError(format!("{}: {e}", path.display())).into())
    }

    pub fn to_toml(&self) -> anyhow::Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn vocab(&self) -> Vocab {
        Vocab::new()
    }

    pub fn params(&self) -> anyhow::Result<LomaParams> {
        Ok(LomaParams::new(self.loma.t, self.loma.c)?)
    }

    pub fn model_config(&self) -> anyhow::Result<ModelConfig> {
        let vocab = self.vocab();
        let m = &self.model;
        let mut cfg = match m.profile.as_str() {
            "toy" => ModelConfig::toy(&vocab),
            "miniature" => ModelConfig::miniature(&vocab),
            other => bail!(ConfigError(format!("unknown model profile {other:?}"))),
        };
        cfg.n_layers = m.n_layers.unwrap_or(cfg.n_layers);
        cfg.n_heads = m.n_heads.unwrap_or(cfg.n_heads);
        cfg.d_model = m.d_model.unwrap_or(cfg.d_model);
        cfg.d_head = m.d_head.unwrap_or(cfg.d_head);
        cfg.d_ff = m.d_ff.unwrap_or(cfg.d_ff);
        cfg.max_position = m.max_position.unwrap_or(cfg.max_position);
        cfg.init_std = m.init_std.unwrap_or(cfg.init_std);
        cfg.seed = self.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn out_dir(&self) -> anyhow::Result<PathBuf> {
        match &self.paths.out_dir {
            Some(d) => Ok(d.clone()),
            None => bail!(ConfigError("no output directory: pass --out or set paths.out_dir".into())),
        }
    }

    pub fn checkpoint(&self) -> anyhow::Result<PathBuf> {
        match &self.paths.checkpoint {
            Some(p) => Ok(p.clone()),
            None => bail!(ConfigError("no checkpoint: pass --checkpoint or set paths.checkpoint".into())),
        }
    }

    /// Writes the resolved configuration next to a command's outputs.
    pub fn snapshot(&self, dir: &Path) -> anyhow::Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("config.toml"), self.to_toml()?)?;
        Ok(())
    }
}

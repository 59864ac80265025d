//! The analogical network: configuration, parameters, the segmented
//! attention mask, and checkpoint IO.
//!
//! Sequences fed to the network are concatenations of up to four segments,
//! in fixed order: `Z_q` (retrieved question), `Z_e` (retrieved
//! expression), `X_q` (problem question), `X_e` (problem expression). The
//! representation stack encodes a question-expression pair on its own
//! (segments `X_q`/`X_e` with the first two empty); the analogy stack runs
//! over all four. One visibility rule drives both masks, per row segment:
//!
//! * `Z_q` rows attend to all of `Z_q`;
//! * `Z_e` rows attend to `Z_q` and causally to `Z_e`;
//! * `X_q` rows attend to `Z_q`, `Z_e`, and all of `X_q`;
//! * `X_e` rows attend to everything before it, causally within `X_e`.
//!
//! With the first two segments empty this degenerates to a bidirectional
//! question encoding plus a causal expression decoder.
//!
//! # Checkpoint layout
//!
//! [`Model::save`] writes `checkpoint.bin` (magic `MWPC`, version `u32`,
//! length-prefixed config JSON, tensor count `u64`, then per tensor a
//! length-prefixed name, `rows`/`cols` as `u64`, and row-major
//! little-endian `f64` data) and `vocab.json` next to it.

pub mod forward;

use crate::corpus::Vocab;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use thiserror::Error;

/// Number of sequence segments.
pub const SEGMENTS: usize = 4;

const CHECKPOINT_MAGIC: &[u8; 4] = b"MWPC";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("failed to access {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("tensor `{name}`: expected shape {expected:?}, got {got:?}")]
    Shape { name: String, expected: (usize, usize), got: (usize, usize) },
    #[error("sequence of length {len} exceeds max_positions {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error(transparent)]
    Corpus(#[from] crate::corpus::CorpusError),
}

/// Model hyperparameters. `vocab_size` and `gen_size` are filled in when a
/// model is built over a vocabulary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    #[serde(default = "default_d_model")]
    pub d_model: usize,
    #[serde(default = "default_heads")]
    pub n_heads: usize,
    #[serde(default = "default_layers")]
    pub layers_repr: usize,
    #[serde(default = "default_layers")]
    pub layers_analogy: usize,
    #[serde(default = "default_max_positions")]
    pub max_positions: usize,
    #[serde(default)]
    pub dropout: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub vocab_size: usize,
    #[serde(default)]
    pub gen_size: usize,
    /// Mix the copy distribution into the output (switchable for ablation).
    #[serde(default = "default_true")]
    pub use_copy: bool,
    /// Attach retrieved exemplars at train and test time.
    #[serde(default = "default_true")]
    pub use_memory: bool,
}

fn default_d_model() -> usize {
    64
}
fn default_heads() -> usize {
    4
}
fn default_layers() -> usize {
    2
}
fn default_max_positions() -> usize {
    256
}
fn default_true() -> bool {
    true
}

impl Default for ModelConfig {
    fn default() -> ModelConfig {
        ModelConfig {
            d_model: default_d_model(),
            n_heads: default_heads(),
            layers_repr: default_layers(),
            layers_analogy: default_layers(),
            max_positions: default_max_positions(),
            dropout: 0.0,
            seed: 0,
            vocab_size: 0,
            gen_size: 0,
            use_copy: true,
            use_memory: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), NetError> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(NetError::Config(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.layers_repr == 0 || self.layers_analogy == 0 {
            return Err(NetError::Config("layer counts must be positive".into()));
        }
        if self.max_positions == 0 {
            return Err(NetError::Config("max_positions must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(NetError::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.vocab_size < 4 {
            return Err(NetError::Config("vocab must include the reserved tokens".into()));
        }
        if self.gen_size == 0 {
            return Err(NetError::Config("generation vocabulary is empty".into()));
        }
        Ok(())
    }
}

/// Lengths of the four segments, in order `Z_q, Z_e, X_q, X_e`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SequenceLayout {
    pub zq: usize,
    pub ze: usize,
    pub xq: usize,
    pub xe: usize,
}

impl SequenceLayout {
    pub fn total(&self) -> usize {
        self.zq + self.ze + self.xq + self.xe
    }

    pub fn zq_start(&self) -> usize {
        0
    }

    pub fn ze_start(&self) -> usize {
        self.zq
    }

    pub fn xq_start(&self) -> usize {
        self.zq + self.ze
    }

    pub fn xe_start(&self) -> usize {
        self.zq + self.ze + self.xq
    }

    /// Segment index (0..4) of an absolute position.
    pub fn segment_of(&self, pos: usize) -> usize {
        assert!(pos < self.total(), "position {pos} outside layout");
        if pos < self.zq {
            0
        } else if pos < self.zq + self.ze {
            1
        } else if pos < self.zq + self.ze + self.xq {
            2
        } else {
            3
        }
    }

    /// Segment id per position, for segment-embedding lookup.
    pub fn segment_ids(&self) -> Vec<u32> {
        (0..self.total()).map(|i| self.segment_of(i) as u32).collect()
    }
}

/// May row `i` attend to column `j`?
pub fn attention_allowed(layout: &SequenceLayout, i: usize, j: usize) -> bool {
    let (si, sj) = (layout.segment_of(i), layout.segment_of(j));
    match si {
        0 => sj == 0,
        1 => sj == 0 || (sj == 1 && j <= i),
        2 => sj <= 2,
        3 => sj <= 2 || j <= i,
        _ => unreachable!(),
    }
}

/// Dense boolean attention mask; `bits[i * n + j]` is row `i` → column `j`.
#[derive(Debug, Clone)]
pub struct AttentionMask {
    pub n: usize,
    pub bits: Arc<Vec<bool>>,
}

/// Materialise the visibility rule for a layout.
pub fn build_mask(layout: &SequenceLayout) -> AttentionMask {
    let n = layout.total();
    let mut bits = vec![false; n * n];
    for i in 0..n {
        for j in 0..n {
            bits[i * n + j] = attention_allowed(layout, i, j);
        }
    }
    AttentionMask { n, bits: Arc::new(bits) }
}

/// Named parameter tensors with shared storage.
#[derive(Debug, Clone)]
pub struct ModelParams {
    names: Vec<String>,
    shapes: Vec<(usize, usize)>,
    values: Vec<Arc<Vec<f64>>>,
    by_name: HashMap<String, usize>,
}

fn layer_param_shapes(prefix: &str, layers: usize, d: usize) -> Vec<(String, (usize, usize))> {
    let mut out = Vec::new();
    for l in 0..layers {
        let p = |s: &str| format!("{prefix}.{l}.{s}");
        out.push((p("ln1.g"), (1, d)));
        out.push((p("ln1.b"), (1, d)));
        for w in ["wq", "wk", "wv", "wo"] {
            out.push((p(w), (d, d)));
        }
        for b in ["bq", "bk", "bv", "bo"] {
            out.push((p(b), (1, d)));
        }
        out.push((p("ln2.g"), (1, d)));
        out.push((p("ln2.b"), (1, d)));
        out.push((p("ff.w1"), (d, 4 * d)));
        out.push((p("ff.b1"), (1, 4 * d)));
        out.push((p("ff.w2"), (4 * d, d)));
        out.push((p("ff.b2"), (1, d)));
    }
    out.push((format!("{prefix}.lnf.g"), (1, d)));
    out.push((format!("{prefix}.lnf.b"), (1, d)));
    out
}

fn param_shapes(cfg: &ModelConfig) -> Vec<(String, (usize, usize))> {
    let d = cfg.d_model;
    let mut out = vec![
        ("tok_emb".to_string(), (cfg.vocab_size, d)),
        ("repr.seg".to_string(), (SEGMENTS, d)),
        ("repr.pos".to_string(), (cfg.max_positions, d)),
        ("ana.seg".to_string(), (SEGMENTS, d)),
        ("ana.pos".to_string(), (cfg.max_positions, d)),
    ];
    out.extend(layer_param_shapes("repr", cfg.layers_repr, d));
    out.extend(layer_param_shapes("ana", cfg.layers_analogy, d));
    out.push(("head.wg".to_string(), (d, cfg.gen_size)));
    out.push(("head.wp".to_string(), (d, 1)));
    out.push(("head.c".to_string(), (d, cfg.gen_size)));
    out
}

impl ModelParams {
    /// Fresh parameters: layer-norm gains one, biases zero, everything else
    /// `Normal(0, 0.02)` drawn from a ChaCha stream seeded by `cfg.seed`.
    pub fn init(cfg: &ModelConfig) -> ModelParams {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let normal = Normal::new(0.0, 0.02).expect("valid normal");
        let mut params = ModelParams {
            names: Vec::new(),
            shapes: Vec::new(),
            values: Vec::new(),
            by_name: HashMap::new(),
        };
        for (name, (rows, cols)) in param_shapes(cfg) {
            let is_gain = name.ends_with(".g");
            let is_bias = name.ends_with(".b")
                || name.ends_with("bq")
                || name.ends_with("bk")
                || name.ends_with("bv")
                || name.ends_with("bo")
                || name.ends_with("ff.b1")
                || name.ends_with("ff.b2");
            let data = if is_gain {
                vec![1.0; rows * cols]
            } else if is_bias {
                vec![0.0; rows * cols]
            } else {
                (0..rows * cols).map(|_| normal.sample(&mut rng)).collect()
            };
            params.push(name, (rows, cols), data);
        }
        params
    }

    fn push(&mut self, name: String, shape: (usize, usize), data: Vec<f64>) {
        debug_assert_eq!(data.len(), shape.0 * shape.1);
        self.by_name.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.shapes.push(shape);
        self.values.push(Arc::new(data));
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.by_name.get(name).copied()
    }

    pub fn shape(&self, idx: usize) -> (usize, usize) {
        self.shapes[idx]
    }

    pub fn value(&self, idx: usize) -> &Arc<Vec<f64>> {
        &self.values[idx]
    }

    pub fn by_name(&self, name: &str) -> Option<(&Arc<Vec<f64>>, (usize, usize))> {
        self.by_name.get(name).map(|&i| (&self.values[i], self.shapes[i]))
    }

    /// Mutable access for the optimiser. Clones only if a tape still holds
    /// the tensor.
    pub fn value_mut(&mut self, idx: usize) -> &mut Vec<f64> {
        Arc::make_mut(&mut self.values[idx])
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.shapes.iter().map(|(r, c)| r * c).sum()
    }
}

/// Parameters, config, and vocabulary: everything needed to run the solver.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParams,
    pub vocab: Vocab,
}

impl Model {
    /// Initialise a fresh model over a vocabulary.
    pub fn new(mut config: ModelConfig, vocab: Vocab) -> Result<Model, NetError> {
        config.vocab_size = vocab.len();
        config.gen_size = vocab.gen_ids().len();
        config.validate()?;
        let params = ModelParams::init(&config);
        Ok(Model { config, params, vocab })
    }

    pub fn save(&self, dir: &Path) -> Result<(), NetError> {
        fs::create_dir_all(dir).map_err(|source| NetError::Io { path: dir.into(), source })?;
        self.save_checkpoint(&dir.join("checkpoint.bin"))?;
        self.vocab.save(&dir.join("vocab.json"))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Model, NetError> {
        let vocab = Vocab::load(&dir.join("vocab.json"))?;
        Model::load_checkpoint(&dir.join("checkpoint.bin"), vocab)
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<(), NetError> {
        let mut buf = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let cfg = serde_json::to_vec(&self.config).expect("config serialises");
        buf.extend_from_slice(&(cfg.len() as u64).to_le_bytes());
        buf.extend_from_slice(&cfg);
        buf.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for i in 0..self.params.len() {
            let name = &self.params.names[i];
            let (rows, cols) = self.params.shapes[i];
            buf.extend_from_slice(&(name.len() as u64).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.extend_from_slice(&(rows as u64).to_le_bytes());
            buf.extend_from_slice(&(cols as u64).to_le_bytes());
            for v in self.params.values[i].iter() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        fs::write(path, buf).map_err(|source| NetError::Io { path: path.into(), source })
    }

    /// Load a checkpoint, validating every tensor name and shape against
    /// the stored config.
    pub fn load_checkpoint(path: &Path, vocab: Vocab) -> Result<Model, NetError> {
        let bytes = fs::read(path).map_err(|source| NetError::Io { path: path.into(), source })?;
        let fail = |message: String| NetError::Format { path: path.into(), message };
        let mut pos = 0usize;
        let take = |pos: &mut usize, n: usize| -> Result<&[u8], NetError> {
            if *pos + n > bytes.len() {
                return Err(NetError::Format {
                    path: path.into(),
                    message: format!("truncated at byte {pos}", pos = *pos),
                });
            }
            let s = &bytes[*pos..*pos + n];
            *pos += n;
            Ok(s)
        };
        if take(&mut pos, 4)? != CHECKPOINT_MAGIC {
            return Err(fail("bad magic".into()));
        }
        let version = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(fail(format!("unsupported version {version}")));
        }
        let cfg_len = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize;
        let config: ModelConfig = serde_json::from_slice(take(&mut pos, cfg_len)?)
            .map_err(|e| fail(format!("bad config JSON: {e}")))?;
        config.validate()?;
        if config.vocab_size != vocab.len() || config.gen_size != vocab.gen_ids().len() {
            return Err(fail(format!(
                "config vocab {}x{} does not match vocab.json {}x{}",
                config.vocab_size,
                config.gen_size,
                vocab.len(),
                vocab.gen_ids().len()
            )));
        }
        let expected: Vec<(String, (usize, usize))> = param_shapes(&config);
        let expect_map: HashMap<&str, (usize, usize)> =
            expected.iter().map(|(n, s)| (n.as_str(), *s)).collect();
        let count = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize;
        if count != expected.len() {
            return Err(fail(format!("expected {} tensors, found {count}", expected.len())));
        }
        let mut loaded: HashMap<String, Vec<f64>> = HashMap::new();
        for _ in 0..count {
            let name_len = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
                .map_err(|_| fail("invalid tensor name".into()))?;
            let rows = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize;
            let cols = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize;
            let Some(&shape) = expect_map.get(name.as_str()) else {
                return Err(fail(format!("unexpected tensor `{name}`")));
            };
            if (rows, cols) != shape {
                return Err(NetError::Shape { name, expected: shape, got: (rows, cols) });
            }
            let raw = take(&mut pos, rows * cols * 8)?;
            let data: Vec<f64> = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            if loaded.insert(name.clone(), data).is_some() {
                return Err(fail(format!("duplicate tensor `{name}`")));
            }
        }
        if pos != bytes.len() {
            return Err(fail("trailing bytes".into()));
        }
        let mut params = ModelParams {
            names: Vec::new(),
            shapes: Vec::new(),
            values: Vec::new(),
            by_name: HashMap::new(),
        };
        for (name, shape) in expected {
            let data = loaded.remove(&name).ok_or_else(|| fail(format!("missing tensor `{name}`")))?;
            params.push(name, shape, data);
        }
        Ok(Model { config, params, vocab })
    }
}

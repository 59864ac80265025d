//! Experiment harness: dataset preparation, evaluation reports, retrieval
//! sweeps, ablations, and difficulty buckets.
//!
//! Everything here is deterministic given its inputs: evaluation walks
//! problems in id order, ablation arms share one seed and data order, and
//! reports carry a fingerprint of the configuration that produced them.

use crate::corpus::{self, Dataset, Split};
use crate::expr;
use crate::infer::{self, InferOptions};
use crate::memory::{MemoryError, MemoryStore};
use crate::net::{Model, ModelConfig, NetError};
use crate::train::{self, TrainConfig, TrainError};
use serde::Serialize;
use sha2::{Digest, Sha256};
use std::path::PathBuf;
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Corpus(#[from] corpus::CorpusError),
    #[error(transparent)]
    Memory(#[from] MemoryError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("problem {id}: cannot normalise gold expression: {source}")]
    Normalize {
        id: String,
        #[source]
        source: expr::ParseError,
    },
    #[error("failed to access {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Config(String),
}

/// Rewrite every gold expression into its canonical form (operands in
/// question order under commutativity, minimal brackets). Values are
/// preserved; the rebuilt dataset re-validates that.
pub fn normalize_dataset(ds: &Dataset) -> Result<Dataset, HarnessError> {
    let mut problems = Vec::with_capacity(ds.len());
    for p in ds.problems() {
        let tokens = expr::normalize_tokens(&p.expression, &p.question)
            .map_err(|source| HarnessError::Normalize { id: p.id.clone(), source })?;
        let mut q = p.clone();
        q.expression = tokens;
        problems.push(q);
    }
    Ok(Dataset::new(ds.split, problems)?)
}

/// Split a synthetic dataset into train and held-out-paraphrase test sets.
/// Problems whose template is the held-out paraphrase go to the test side,
/// capped at `test_cap` (0 means no cap; extras beyond the cap are dropped
/// rather than leaked into training). Everything else trains.
pub fn paraphrase_split(ds: &Dataset, test_cap: usize) -> Result<(Dataset, Dataset), HarnessError> {
    let mut train = Vec::new();
    let mut test = Vec::new();
    for p in ds.problems() {
        let held = p.template.as_deref().is_some_and(corpus::synthetic::is_held_out);
        if held {
            if test_cap == 0 || test.len() < test_cap {
                test.push(p.clone());
            }
        } else {
            train.push(p.clone());
        }
    }
    if train.is_empty() || test.is_empty() {
        return Err(HarnessError::Config(
            "paraphrase split needs both held-out and regular problems".into(),
        ));
    }
    Ok((Dataset::new(Split::Train, train)?, Dataset::new(Split::Test, test)?))
}

/// Indices of `ds` grouped into four difficulty quartiles by gold
/// expression length (ties by id). Bucket sizes differ by at most one.
pub fn difficulty_buckets(ds: &Dataset) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.sort_by(|&a, &b| {
        let (pa, pb) = (&ds.problems()[a], &ds.problems()[b]);
        pa.expression.len().cmp(&pb.expression.len()).then_with(|| pa.id.cmp(&pb.id))
    });
    let n = ds.len();
    let base = n / 4;
    let rem = n % 4;
    let mut buckets = Vec::with_capacity(4);
    let mut at = 0;
    for b in 0..4 {
        let size = base + usize::from(b < rem);
        buckets.push(order[at..at + size].to_vec());
        at += size;
    }
    buckets
}

/// One evaluated problem.
#[derive(Debug, Clone, Serialize)]
pub struct ProblemRecord {
    pub id: String,
    pub predicted: Vec<String>,
    pub value: Option<String>,
    pub gold: String,
    pub correct: bool,
    pub score: f64,
    pub retrieved: Vec<String>,
    pub truncated: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct BucketReport {
    pub label: String,
    pub min_len: usize,
    pub max_len: usize,
    pub total: usize,
    pub correct: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub split: String,
    pub total: usize,
    pub correct: usize,
    pub accuracy: f64,
    pub k: usize,
    pub beam_width: usize,
    pub fingerprint: String,
    pub seconds: f64,
    pub buckets: Vec<BucketReport>,
    pub problems: Vec<ProblemRecord>,
}

fn fingerprint(config: &ModelConfig, opts: &InferOptions) -> String {
    let mut hasher = Sha256::new();
    hasher.update(serde_json::to_vec(config).expect("config serialises"));
    hasher.update((opts.k as u64).to_le_bytes());
    hasher.update((opts.beam_width as u64).to_le_bytes());
    hasher.update((opts.max_len as u64).to_le_bytes());
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Answer-accuracy evaluation with per-problem records and difficulty
/// buckets. Retrieval is per-question from the store; nothing is excluded.
pub fn evaluate(
    model: &Model,
    store: Option<&MemoryStore>,
    ds: &Dataset,
    opts: &InferOptions,
) -> Result<EvalReport, HarnessError> {
    let started = Instant::now();
    let mut records = Vec::with_capacity(ds.len());
    for p in ds.problems() {
        let solved = infer::solve(model, store, &p.question, opts, None)?;
        let value = solved.rational();
        let correct =
            value.as_ref().map(|v| expr::answers_equal(v, &p.answer, 1e-4)).unwrap_or(false);
        records.push(ProblemRecord {
            id: p.id.clone(),
            predicted: solved.expression,
            value: solved.value,
            gold: expr::rational_to_string(&p.answer),
            correct,
            score: solved.score,
            retrieved: solved.retrieved.into_iter().map(|r| r.id).collect(),
            truncated: solved.truncated,
        });
    }
    let correct_of: std::collections::HashMap<&str, bool> =
        ds.problems().iter().zip(&records).map(|(p, r)| (p.id.as_str(), r.correct)).collect();
    let mut buckets = Vec::new();
    for (b, indices) in difficulty_buckets(ds).into_iter().enumerate() {
        let lens: Vec<usize> =
            indices.iter().map(|&i| ds.problems()[i].expression.len()).collect();
        let total = indices.len();
        let correct = indices
            .iter()
            .filter(|&&i| correct_of[ds.problems()[i].id.as_str()])
            .count();
        buckets.push(BucketReport {
            label: format!("q{}", b + 1),
            min_len: lens.iter().copied().min().unwrap_or(0),
            max_len: lens.iter().copied().max().unwrap_or(0),
            total,
            correct,
            accuracy: if total == 0 { 0.0 } else { correct as f64 / total as f64 },
        });
    }
    records.sort_by(|a, b| a.id.cmp(&b.id));
    let correct = records.iter().filter(|r| r.correct).count();
    Ok(EvalReport {
        split: ds.split.to_string(),
        total: ds.len(),
        correct,
        accuracy: if ds.is_empty() { 0.0 } else { correct as f64 / ds.len() as f64 },
        k: opts.k,
        beam_width: opts.beam_width,
        fingerprint: fingerprint(&model.config, opts),
        seconds: started.elapsed().as_secs_f64(),
        buckets,
        problems: records,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct KPoint {
    pub k: usize,
    pub accuracy: f64,
}

/// Evaluate accuracy across retrieval depths. Duplicates are dropped with
/// a warning string (order preserved).
pub fn k_sweep(
    model: &Model,
    store: Option<&MemoryStore>,
    ds: &Dataset,
    ks: &[usize],
    base: &InferOptions,
) -> Result<(Vec<KPoint>, Vec<String>), HarnessError> {
    let mut warnings = Vec::new();
    let mut seen = Vec::new();
    let mut points = Vec::new();
    for &k in ks {
        if seen.contains(&k) {
            warnings.push(format!("duplicate k={k} ignored"));
            continue;
        }
        seen.push(k);
        let opts = InferOptions { k, ..base.clone() };
        let report = evaluate(model, store, ds, &opts)?;
        points.push(KPoint { k, accuracy: report.accuracy });
    }
    Ok((points, warnings))
}

/// One ablation arm: which pieces stay on.
#[derive(Debug, Clone, Serialize)]
pub struct AblationArm {
    pub name: String,
    pub equation_normalization: bool,
    pub use_copy: bool,
    pub use_memory: bool,
}

/// The five standard arms: everything, then each piece removed, then none.
pub fn standard_arms() -> Vec<AblationArm> {
    let arm = |name: &str, en: bool, copy: bool, mem: bool| AblationArm {
        name: name.to_string(),
        equation_normalization: en,
        use_copy: copy,
        use_memory: mem,
    };
    vec![
        arm("full", true, true, true),
        arm("no-normalization", false, true, true),
        arm("no-copy", true, false, true),
        arm("no-memory", true, true, false),
        arm("none", false, false, false),
    ]
}

#[derive(Debug, Clone, Serialize)]
pub struct ArmOutcome {
    pub name: String,
    pub accuracy: f64,
    pub final_loss: f64,
    pub train_seconds: f64,
}

/// Inputs shared by every ablation arm.
#[derive(Debug, Clone)]
pub struct AblationSpec {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub memory_dim: usize,
    pub eval: InferOptions,
}

/// Train and evaluate each arm from the same seed and data order.
pub fn ablate(
    spec: &AblationSpec,
    train_ds: &Dataset,
    test_ds: &Dataset,
    arms: &[AblationArm],
) -> Result<Vec<ArmOutcome>, HarnessError> {
    let mut outcomes = Vec::with_capacity(arms.len());
    for arm in arms {
        let started = Instant::now();
        let prepared = if arm.equation_normalization {
            normalize_dataset(train_ds)?
        } else {
            train_ds.clone()
        };
        let vocab = crate::corpus::Vocab::build(&prepared, spec.train.min_freq);
        let mut model_cfg = spec.model.clone();
        model_cfg.use_copy = arm.use_copy;
        model_cfg.use_memory = arm.use_memory;
        let mut model = Model::new(model_cfg, vocab)?;
        let store = if arm.use_memory {
            Some(MemoryStore::build(prepared.clone(), spec.memory_dim)?)
        } else {
            None
        };
        let mut train_cfg = spec.train.clone();
        train_cfg.copy_enabled = arm.use_copy;
        train_cfg.memory_enabled = arm.use_memory;
        train_cfg.equation_normalization = arm.equation_normalization;
        let history = train::train(&mut model, store.as_ref(), &prepared, None, &train_cfg, None)?;
        let train_seconds = started.elapsed().as_secs_f64();
        let opts = InferOptions {
            k: if arm.use_memory { spec.eval.k } else { 0 },
            ..spec.eval.clone()
        };
        let report = evaluate(&model, store.as_ref(), test_ds, &opts)?;
        outcomes.push(ArmOutcome {
            name: arm.name.clone(),
            accuracy: report.accuracy,
            final_loss: history.last().map(|m| m.loss).unwrap_or(f64::NAN),
            train_seconds,
        });
    }
    Ok(outcomes)
}

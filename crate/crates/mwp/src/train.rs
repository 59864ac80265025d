//! Training: the two losses, ADAM with a stepped learning-rate schedule,
//! and the epoch loop with checkpointing and metrics.
//!
//! Each example builds its own graph. The main loss is the negative log
//! likelihood of the gold expression under the copy-augmented step
//! distributions; the auxiliary loss asks a linear classifier over the
//! retrieved-expression hidden states to re-predict the retrieved
//! expression, skipping targets outside the generation vocabulary. Totals
//! combine as `analogical + lambda * auxiliary`.
//!
//! Retrievals are resolved once before the first epoch (top-1 per problem,
//! the problem itself excluded) and reused throughout, so epochs differ
//! only in example order and optimiser state. The learning rate holds at
//! its base value for 40 epochs, then halves every 5.

use crate::corpus::{CorpusError, Dataset, Problem, EOS_TOKEN};
use crate::expr;
use crate::infer::{self, InferOptions};
use crate::memory::{MemoryError, MemoryStore};
use crate::net::forward::{Forward, RetrievedPair};
use crate::net::{Model, NetError};
use crate::tensor::NodeId;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;
use thiserror::Error;

const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Memory(#[from] MemoryError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("failed to access {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("non-finite loss at epoch {epoch} on problem {problem}")]
    NonFinite { epoch: usize, problem: String },
    #[error("problem {problem}: target token `{token}` is neither generable nor in the question")]
    TargetNotRepresentable { problem: String, token: String },
}

/// Knobs for one training run. The flags that change data preparation
/// (normalisation, vocabulary cutoff) or the model wiring (copy, memory)
/// live here too so a single config file drives the whole pipeline.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_lr")]
    pub learning_rate: f64,
    #[serde(default = "d_beta1")]
    pub beta1: f64,
    #[serde(default = "d_beta2")]
    pub beta2: f64,
    /// Weight of the auxiliary re-prediction loss.
    #[serde(default = "d_lambda")]
    pub lambda: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "d_clip")]
    pub grad_clip: f64,
    /// Normalise gold expressions before training.
    #[serde(default = "d_true")]
    pub equation_normalization: bool,
    /// Mix the copy distribution into the output.
    #[serde(default = "d_true")]
    pub copy_enabled: bool,
    /// Attach retrieved exemplars during training and decoding.
    #[serde(default = "d_true")]
    pub memory_enabled: bool,
    /// Vocabulary frequency cutoff for the generation set.
    #[serde(default = "d_min_freq")]
    pub min_freq: usize,
    /// Exemplars per example while training and validating.
    #[serde(default = "d_retrieval_k")]
    pub retrieval_k: usize,
    /// Compute training-set answer accuracy every this many epochs
    /// (0 never).
    #[serde(default)]
    pub train_acc_every: usize,
    /// Compute validation accuracy every this many epochs (0 never).
    #[serde(default = "d_val_every")]
    pub val_every: usize,
    /// Stop once training accuracy reaches this value.
    #[serde(default)]
    pub stop_at_train_accuracy: Option<f64>,
    /// Beam width for accuracy checks inside the loop.
    #[serde(default = "d_val_beam")]
    pub val_beam: usize,
}

fn d_epochs() -> usize {
    80
}
fn d_batch() -> usize {
    12
}
fn d_lr() -> f64 {
    5e-4
}
fn d_beta1() -> f64 {
    0.9
}
fn d_beta2() -> f64 {
    0.99
}
fn d_lambda() -> f64 {
    1.0
}
fn d_clip() -> f64 {
    1.0
}
fn d_true() -> bool {
    true
}
fn d_min_freq() -> usize {
    1
}
fn d_retrieval_k() -> usize {
    1
}
fn d_val_every() -> usize {
    1
}
fn d_val_beam() -> usize {
    1
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        serde_json::from_str("{}").expect("defaults fill everything")
    }
}

/// Learning rate for a 1-based epoch: the base value through epoch 40,
/// halved every 5 epochs after that.
pub fn lr_for_epoch(base: f64, epoch: usize) -> f64 {
    assert!(epoch >= 1, "epochs are 1-based");
    if epoch <= 40 {
        base
    } else {
        let halvings = (epoch - 40).div_ceil(5);
        base * 0.5_f64.powi(halvings as i32)
    }
}

/// Deterministic example order for an epoch: one ChaCha stream per epoch
/// over a fixed seed, so the schedule never depends on batch size.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Numeric value of one example's losses.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub analogical: f64,
    pub inductive: f64,
    /// Auxiliary targets that were inside the generation vocabulary.
    pub inductive_targets: usize,
}

/// Build the full loss graph for one example and return the root node plus
/// the numeric breakdown.
pub fn example_loss(
    fw: &mut Forward<'_>,
    model: &Model,
    problem_id: &str,
    question: &[String],
    expression: &[String],
    retrieved: Option<RetrievedPair<'_>>,
    lambda: f64,
) -> Result<(NodeId, LossParts), TrainError> {
    let trace = fw.example(
        &model.vocab,
        crate::net::forward::ExampleInput { question, expr_input: expression, retrieved },
    )?;

    let mut targets: Vec<&str> = expression.iter().map(|s| s.as_str()).collect();
    targets.push(EOS_TOKEN);
    debug_assert_eq!(targets.len(), trace.steps.len());
    let mut log_picks = Vec::with_capacity(targets.len());
    for (t, target) in targets.iter().enumerate() {
        let slot = trace.support.slot_of(target).ok_or_else(|| {
            TrainError::TargetNotRepresentable {
                problem: problem_id.to_string(),
                token: target.to_string(),
            }
        })?;
        let pick = fw.tape.pick_entries(trace.steps[t], &[(0, slot)]);
        log_picks.push(fw.tape.ln(pick));
    }
    let summed = fw.tape.add_n(&log_picks);
    let analogical = fw.tape.scale(summed, -1.0 / log_picks.len() as f64);

    let mut inductive_node = None;
    let mut inductive_targets = 0usize;
    if let (Some(ind), Some(pair)) = (trace.inductive_probs, retrieved) {
        let mut coords = Vec::new();
        let mut z_targets: Vec<&str> = pair.expression.iter().map(|s| s.as_str()).collect();
        z_targets.push(EOS_TOKEN);
        for (t, target) in z_targets.iter().enumerate() {
            let Some(id) = model.vocab.lookup(target) else {
                continue;
            };
            if !model.vocab.is_gen(id) {
                continue;
            }
            let col = model
                .vocab
                .gen_ids()
                .binary_search(&id)
                .expect("generable id is listed");
            coords.push((t, col));
        }
        if !coords.is_empty() {
            inductive_targets = coords.len();
            let picks = fw.tape.pick_entries(ind, &coords);
            let logs = fw.tape.ln(picks);
            let s = fw.tape.sum_all(logs);
            inductive_node = Some(fw.tape.scale(s, -1.0 / coords.len() as f64));
        }
    }

    let (root, parts) = match inductive_node {
        Some(ind) => {
            let scaled = fw.tape.scale(ind, lambda);
            let total = fw.tape.add(analogical, scaled);
            let parts = LossParts {
                total: fw.tape.data(total)[0],
                analogical: fw.tape.data(analogical)[0],
                inductive: fw.tape.data(ind)[0],
                inductive_targets,
            };
            (total, parts)
        }
        None => {
            let parts = LossParts {
                total: fw.tape.data(analogical)[0],
                analogical: fw.tape.data(analogical)[0],
                inductive: 0.0,
                inductive_targets: 0,
            };
            (analogical, parts)
        }
    };
    Ok((root, parts))
}

struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
    beta1: f64,
    beta2: f64,
}

impl Adam {
    fn new(sizes: &[usize], beta1: f64, beta2: f64) -> Adam {
        Adam {
            m: sizes.iter().map(|&s| vec![0.0; s]).collect(),
            v: sizes.iter().map(|&s| vec![0.0; s]).collect(),
            t: 0,
            beta1,
            beta2,
        }
    }

    fn step(&mut self, model: &mut Model, grads: &[Option<Vec<f64>>], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (idx, grad) in grads.iter().enumerate() {
            let Some(g) = grad else {
                continue;
            };
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            let p = model.params.value_mut(idx);
            for i in 0..g.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
            }
        }
    }
}

/// One epoch's record, written as a line of `metrics.jsonl`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss: f64,
    pub analogical: f64,
    pub inductive: f64,
    pub lr: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_accuracy: Option<f64>,
    pub seconds: f64,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io { path: path.to_path_buf(), source }
}

/// Resolve the fixed training retrieval for every problem: top match from
/// the store with the problem itself excluded. `None` when nothing else is
/// stored.
pub fn resolve_retrievals(
    store: &MemoryStore,
    ds: &Dataset,
) -> Result<Vec<Option<String>>, MemoryError> {
    let mut out = Vec::with_capacity(ds.len());
    for p in ds.problems() {
        let found = store.retrieve(&p.question, 1, Some(&p.id))?;
        out.push(found.results.first().map(|r| r.id.clone()));
    }
    Ok(out)
}

fn pair_of(p: &Problem) -> RetrievedPair<'_> {
    RetrievedPair { question: &p.question, expression: &p.expression }
}

/// Fraction of problems whose decoded expression evaluates to the gold
/// answer. Retrievals are fixed per problem (training-style) when given,
/// otherwise fetched from the store per question.
pub fn answer_accuracy(
    model: &Model,
    store: Option<&MemoryStore>,
    ds: &Dataset,
    fixed: Option<&[Option<String>]>,
    opts: &InferOptions,
) -> Result<f64, TrainError> {
    if ds.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0usize;
    for (i, p) in ds.problems().iter().enumerate() {
        let result = match fixed {
            Some(ids) => {
                let pairs: Vec<(RetrievedPair<'_>, f64)> = match &ids[i] {
                    Some(id) => {
                        let z = store
                            .expect("fixed retrievals require a store")
                            .problem(id)
                            .expect("retrieved id is stored");
                        vec![(pair_of(z), 1.0)]
                    }
                    None => Vec::new(),
                };
                let (tokens, score, truncated) =
                    infer::beam_decode(model, &p.question, &pairs, opts)?;
                let value = expr::parse(&tokens)
                    .ok()
                    .and_then(|e| expr::evaluate(&e).ok());
                let _ = (score, truncated);
                value
            }
            None => {
                let solved = infer::solve(model, store, &p.question, opts, None)?;
                solved.rational()
            }
        };
        if let Some(v) = result {
            if expr::answers_equal(&v, &p.answer, 1e-4) {
                hits += 1;
            }
        }
    }
    Ok(hits as f64 / ds.len() as f64)
}

/// Run the training loop. Writes `metrics.jsonl`, a `last` checkpoint each
/// epoch, and a `best` checkpoint on validation improvement when `out_dir`
/// is given.
pub fn train(
    model: &mut Model,
    store: Option<&MemoryStore>,
    train_ds: &Dataset,
    valid: Option<&Dataset>,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<Vec<EpochMetrics>, TrainError> {
    assert!(cfg.batch_size > 0, "batch size must be positive");
    assert!(cfg.epochs > 0, "need at least one epoch");
    let with_memory = model.config.use_memory && store.is_some();
    let retrievals: Vec<Option<String>> = if with_memory {
        resolve_retrievals(store.expect("checked above"), train_ds)?
    } else {
        vec![None; train_ds.len()]
    };

    let sizes: Vec<usize> =
        (0..model.params.len()).map(|i| model.params.shape(i)).map(|(r, c)| r * c).collect();
    let mut adam = Adam::new(&sizes, cfg.beta1, cfg.beta2);
    let mut history: Vec<EpochMetrics> = Vec::new();
    let mut best_val = f64::NEG_INFINITY;

    let mut metrics_file = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
            let path = dir.join("metrics.jsonl");
            Some(fs::File::create(&path).map_err(io_err(&path))?)
        }
        None => None,
    };

    let acc_opts = InferOptions { k: cfg.retrieval_k, beam_width: cfg.val_beam, max_len: 48 };
    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        let lr = lr_for_epoch(cfg.learning_rate, epoch);
        let order = epoch_order(cfg.seed, epoch, train_ds.len());
        let mut sum_total = 0.0;
        let mut sum_analogical = 0.0;
        let mut sum_inductive = 0.0;

        for batch in order.chunks(cfg.batch_size) {
            let mut grads: Vec<Option<Vec<f64>>> = vec![None; model.params.len()];
            let inv = 1.0 / batch.len() as f64;
            for (pos, &idx) in batch.iter().enumerate() {
                let p = &train_ds.problems()[idx];
                let retrieved = retrievals[idx].as_deref().map(|id| {
                    pair_of(
                        store
                            .expect("retrieval implies a store")
                            .problem(id)
                            .expect("retrieved id is stored"),
                    )
                });
                let mut fw = if model.config.dropout > 0.0 {
                    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
                    rng.set_stream(((epoch as u64) << 32) | (pos as u64 + 1));
                    Forward::with_dropout(&model.params, &model.config, rng)
                } else {
                    Forward::new(&model.params, &model.config)
                };
                let (root, parts) = example_loss(
                    &mut fw,
                    model,
                    &p.id,
                    &p.question,
                    &p.expression,
                    retrieved,
                    cfg.lambda,
                )?;
                if !parts.total.is_finite() {
                    return Err(TrainError::NonFinite { epoch, problem: p.id.clone() });
                }
                sum_total += parts.total;
                sum_analogical += parts.analogical;
                sum_inductive += parts.inductive;
                let grad = fw.tape.backward(root);
                for (pidx, node) in fw.param_leaves() {
                    let Some(g) = grad.get(node) else {
                        continue;
                    };
                    let slot = grads[pidx].get_or_insert_with(|| vec![0.0; sizes[pidx]]);
                    for (s, v) in slot.iter_mut().zip(g) {
                        *s += v * inv;
                    }
                }
            }
            if cfg.grad_clip > 0.0 {
                let norm: f64 = grads
                    .iter()
                    .flatten()
                    .map(|g| g.iter().map(|v| v * v).sum::<f64>())
                    .sum::<f64>()
                    .sqrt();
                if norm > cfg.grad_clip {
                    let scale = cfg.grad_clip / norm;
                    for g in grads.iter_mut().flatten() {
                        for v in g.iter_mut() {
                            *v *= scale;
                        }
                    }
                }
            }
            adam.step(model, &grads, lr);
        }

        let n = train_ds.len() as f64;
        let want_train_acc = (cfg.train_acc_every > 0 && epoch % cfg.train_acc_every == 0)
            || (cfg.stop_at_train_accuracy.is_some()
                && cfg.train_acc_every.max(1) > 0
                && epoch % cfg.train_acc_every.max(1) == 0);
        let train_accuracy = if want_train_acc {
            Some(answer_accuracy(model, store, train_ds, Some(&retrievals), &acc_opts)?)
        } else {
            None
        };
        let val_accuracy = match valid {
            Some(v) if cfg.val_every > 0 && epoch % cfg.val_every == 0 => {
                Some(answer_accuracy(model, store, v, None, &acc_opts)?)
            }
            _ => None,
        };

        let metrics = EpochMetrics {
            epoch,
            loss: sum_total / n,
            analogical: sum_analogical / n,
            inductive: sum_inductive / n,
            lr,
            train_accuracy,
            val_accuracy,
            seconds: started.elapsed().as_secs_f64(),
        };
        if let Some(file) = metrics_file.as_mut() {
            let line = serde_json::to_string(&metrics).expect("metrics serialise");
            writeln!(file, "{line}")
                .map_err(io_err(out_dir.expect("file implies out_dir")))?;
        }
        if let Some(dir) = out_dir {
            model.save(&dir.join("last"))?;
            if let Some(acc) = val_accuracy {
                if acc > best_val {
                    best_val = acc;
                    model.save(&dir.join("best"))?;
                }
            }
        }
        history.push(metrics);
        if let (Some(stop), Some(acc)) = (cfg.stop_at_train_accuracy, train_accuracy) {
            if acc >= stop {
                break;
            }
        }
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{synthetic, Vocab};
    use crate::net::ModelConfig;

    fn tiny(ds: &Dataset, min_freq: usize) -> Model {
        let vocab = Vocab::build(ds, min_freq);
        let cfg = ModelConfig {
            d_model: 8,
            n_heads: 2,
            layers_repr: 1,
            layers_analogy: 1,
            max_positions: 64,
            ..ModelConfig::default()
        };
        Model::new(cfg, vocab).unwrap()
    }

    #[test]
    fn schedule_holds_then_halves_every_five() {
        let base = 5e-4;
        assert_eq!(lr_for_epoch(base, 1), base);
        assert_eq!(lr_for_epoch(base, 40), base);
        for e in 41..=45 {
            assert_eq!(lr_for_epoch(base, e), 2.5e-4, "epoch {e}");
        }
        for e in 46..=50 {
            assert_eq!(lr_for_epoch(base, e), 1.25e-4, "epoch {e}");
        }
        assert_eq!(lr_for_epoch(base, 51), 6.25e-5);
        assert_eq!(lr_for_epoch(base, 60), 3.125e-5);
    }

    #[test]
    fn epoch_order_is_a_deterministic_permutation_that_varies() {
        let a = epoch_order(9, 1, 50);
        let b = epoch_order(9, 1, 50);
        assert_eq!(a, b);
        let mut sorted = a.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..50).collect::<Vec<_>>());
        let c = epoch_order(9, 2, 50);
        assert_ne!(a, c, "epochs shuffle differently");
        let d = epoch_order(10, 1, 50);
        assert_ne!(a, d, "seeds shuffle differently");
    }

    #[test]
    fn loss_matches_recomputation_from_step_values() {
        let ds = synthetic::generate(8, 21, 2).unwrap();
        let model = tiny(&ds, 1);
        let p = &ds.problems()[0];
        let z = &ds.problems()[1];
        let mut fw = Forward::new(&model.params, &model.config);
        let (_, parts) = example_loss(
            &mut fw,
            &model,
            &p.id,
            &p.question,
            &p.expression,
            Some(pair_of(z)),
            1.0,
        )
        .unwrap();
        // Recompute the analogical part from the raw step distributions.
        let mut fw2 = Forward::new(&model.params, &model.config);
        let trace = fw2
            .example(
                &model.vocab,
                crate::net::forward::ExampleInput {
                    question: &p.question,
                    expr_input: &p.expression,
                    retrieved: Some(pair_of(z)),
                },
            )
            .unwrap();
        let mut targets: Vec<String> = p.expression.clone();
        targets.push(EOS_TOKEN.to_string());
        let mut sum = 0.0;
        for (t, target) in targets.iter().enumerate() {
            let slot = trace.support.slot_of(target).unwrap();
            sum += fw2.tape.data(trace.steps[t])[slot].ln();
        }
        let want = -sum / targets.len() as f64;
        assert!((parts.analogical - want).abs() < 1e-12);
        assert!(parts.inductive > 0.0);
        assert!(
            (parts.total - parts.analogical - parts.inductive).abs() < 1e-12,
            "lambda 1 adds the parts"
        );
    }

    #[test]
    fn rare_targets_drop_out_of_the_auxiliary_loss() {
        let ds = synthetic::generate(30, 5, 3).unwrap();
        let model = tiny(&ds, 4);
        // Find a problem whose expression contains a token missing from
        // the generation vocabulary under the aggressive cutoff.
        let mut found = None;
        'outer: for p in ds.problems() {
            for tok in &p.expression {
                let excluded = match model.vocab.lookup(tok) {
                    Some(id) => !model.vocab.is_gen(id),
                    None => true,
                };
                if excluded {
                    found = Some(p.clone());
                    break 'outer;
                }
            }
        }
        let z = found.expect("cutoff 4 excludes some number token");
        let p = &ds.problems()[0];
        let mut fw = Forward::new(&model.params, &model.config);
        let (_, parts) =
            example_loss(&mut fw, &model, &p.id, &p.question, &p.expression, Some(pair_of(&z)), 1.0)
                .unwrap_or_else(|e| panic!("{e}"));
        assert!(parts.inductive_targets < z.expression.len() + 1);
        assert!(parts.inductive_targets >= 1, "the end token always counts");
    }

    #[test]
    fn a_few_steps_reduce_the_loss() {
        let ds = synthetic::generate(4, 33, 1).unwrap();
        let mut model = tiny(&ds, 1);
        let cfg = TrainConfig {
            epochs: 25,
            batch_size: 4,
            learning_rate: 3e-3,
            train_acc_every: 0,
            val_every: 0,
            ..TrainConfig::default()
        };
        let history = train(&mut model, None, &ds, None, &cfg, None).unwrap();
        assert_eq!(history.len(), 25);
        let first = history.first().unwrap().loss;
        let last = history.last().unwrap().loss;
        assert!(
            last < first * 0.8,
            "loss should drop substantially: {first} -> {last}"
        );
        for m in &history {
            assert!(m.loss.is_finite());
            assert_eq!(m.inductive, 0.0, "no retrieval, no auxiliary loss");
        }
    }

    #[test]
    fn poisoned_parameters_surface_as_a_structured_error() {
        let ds = synthetic::generate(4, 2, 1).unwrap();
        let mut model = tiny(&ds, 1);
        let idx = model.params.index_of("head.wg").unwrap();
        model.params.value_mut(idx)[0] = f64::NAN;
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 2,
            val_every: 0,
            ..TrainConfig::default()
        };
        let err = train(&mut model, None, &ds, None, &cfg, None).unwrap_err();
        assert!(matches!(err, TrainError::NonFinite { epoch: 1, .. }), "{err}");
    }

    #[test]
    fn training_writes_metrics_and_checkpoints() {
        let ds = synthetic::generate(6, 8, 2).unwrap();
        let mut model = tiny(&ds, 1);
        let store = MemoryStore::build(ds.clone(), 8).unwrap();
        let valid = synthetic::generate(3, 99, 2).unwrap();
        let dir = std::env::temp_dir().join(format!("mwp-train-{}", std::process::id()));
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 3,
            val_every: 2,
            train_acc_every: 2,
            val_beam: 1,
            ..TrainConfig::default()
        };
        let history =
            train(&mut model, Some(&store), &ds, Some(&valid), &cfg, Some(&dir)).unwrap();
        assert_eq!(history.len(), 2);
        assert!(history[0].train_accuracy.is_none());
        assert!(history[1].train_accuracy.is_some());
        assert!(history[1].val_accuracy.is_some());
        assert!(history.iter().all(|m| m.inductive > 0.0), "memory adds the auxiliary loss");
        let text = std::fs::read_to_string(dir.join("metrics.jsonl")).unwrap();
        assert_eq!(text.lines().count(), 2);
        let parsed: EpochMetrics = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!(parsed.epoch, 1);
        let reloaded = Model::load(&dir.join("last")).unwrap();
        assert_eq!(reloaded.config, model.config);
        assert!(dir.join("best").exists());
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn adam_minimises_a_quadratic() {
        // Drive the optimiser on f(x) = (x - 3)^2 through one real
        // parameter entry; every other gradient stays None.
        let ds = synthetic::generate(4, 2, 1).unwrap();
        let mut model = tiny(&ds, 1);
        let sizes: Vec<usize> =
            (0..model.params.len()).map(|i| model.params.shape(i)).map(|(r, c)| r * c).collect();
        let mut adam = Adam::new(&sizes, 0.9, 0.99);
        let idx = model.params.index_of("head.wp").unwrap();
        model.params.value_mut(idx)[0] = 0.0;
        for _ in 0..800 {
            let x = model.params.value(idx)[0];
            let mut g = vec![0.0; sizes[idx]];
            g[0] = 2.0 * (x - 3.0);
            let mut grads: Vec<Option<Vec<f64>>> = vec![None; sizes.len()];
            grads[idx] = Some(g);
            adam.step(&mut model, &grads, 0.05);
        }
        let x = model.params.value(idx)[0];
        assert!((x - 3.0).abs() < 1e-2, "converged to {x}");
        // On the first step the bias correction makes the update exactly
        // lr * sign(g): replay from scratch and check.
        let mut probe = tiny(&ds, 1);
        probe.params.value_mut(idx)[0] = 0.0;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; probe.params.len()];
        grads[idx] = Some({
            let mut g = vec![0.0; sizes[idx]];
            g[0] = 4.0;
            g
        });
        let mut adam3 = Adam::new(&sizes, 0.9, 0.99);
        let before = probe.params.value(idx)[0];
        adam3.step(&mut probe, &grads, 0.05);
        let after = probe.params.value(idx)[0];
        let expect = before - 0.05 * 4.0 / (4.0 + ADAM_EPS);
        assert!((after - expect).abs() < 1e-15, "first-step update: {after} vs {expect}");
    }
}

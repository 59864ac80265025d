//! Decoding: per-step output distributions mixed across retrievals, and a
//! length-normalised beam search.
//!
//! Each decode step rebuilds the forward graph for the current prefix. With
//! `k` retrieved exemplars the step distribution is the expectation of the
//! per-exemplar distributions under the retrieval probabilities; with none
//! it is the single no-retrieval forward. Beam hypotheses score by total
//! log-probability divided by the number of emitted steps (the closing end
//! token counts as a step), ties broken towards the lexicographically
//! smaller token sequence.

use crate::corpus::{Problem, EOS_TOKEN};
use crate::expr;
use crate::memory::{MemoryStore, Retrieval};
use crate::net::forward::{ExampleInput, Forward, OutputSupport, RetrievedPair};
use crate::net::{Model, NetError};
use num::BigRational;
use serde::Serialize;

#[derive(Debug, Clone)]
pub struct InferOptions {
    /// Retrieved exemplars mixed into each step.
    pub k: usize,
    pub beam_width: usize,
    /// Hard cap on emitted tokens before a hypothesis is cut off.
    pub max_len: usize,
}

impl Default for InferOptions {
    fn default() -> InferOptions {
        InferOptions { k: 1, beam_width: 5, max_len: 48 }
    }
}

/// Result of decoding one question.
#[derive(Debug, Clone, Serialize)]
pub struct SolveResult {
    pub expression: Vec<String>,
    /// Exact value of the expression, when it parses and evaluates.
    pub value: Option<String>,
    /// Length-normalised log-probability of the winning hypothesis.
    pub score: f64,
    pub retrieved: Vec<Retrieval>,
    /// True when the winner ran into the length cap instead of closing.
    pub truncated: bool,
}

impl SolveResult {
    /// The decoded value as an exact rational, when present.
    pub fn rational(&self) -> Option<BigRational> {
        self.value.as_deref().and_then(expr::parse_rational)
    }
}

/// The mixed next-token distribution for a prefix, over the question's
/// output support.
pub fn step_distribution(
    model: &Model,
    question: &[String],
    prefix: &[String],
    retrieved: &[(RetrievedPair<'_>, f64)],
) -> Result<(OutputSupport, Vec<f64>), NetError> {
    if retrieved.is_empty() {
        let mut fw = Forward::new(&model.params, &model.config);
        let trace = fw.example(
            &model.vocab,
            ExampleInput { question, expr_input: prefix, retrieved: None },
        )?;
        let last = *trace.steps.last().expect("at least the first step");
        return Ok((trace.support, fw.tape.data(last).to_vec()));
    }
    let mut mixed: Option<(OutputSupport, Vec<f64>)> = None;
    for &(pair, weight) in retrieved {
        let mut fw = Forward::new(&model.params, &model.config);
        let trace = fw.example(
            &model.vocab,
            ExampleInput { question, expr_input: prefix, retrieved: Some(pair) },
        )?;
        let last = *trace.steps.last().expect("at least the first step");
        let probs = fw.tape.data(last);
        match &mut mixed {
            None => {
                let scaled = probs.iter().map(|p| p * weight).collect();
                mixed = Some((trace.support, scaled));
            }
            Some((support, acc)) => {
                debug_assert_eq!(support.len(), probs.len());
                for (a, p) in acc.iter_mut().zip(probs) {
                    *a += p * weight;
                }
            }
        }
    }
    Ok(mixed.expect("non-empty retrieval list"))
}

#[derive(Debug, Clone)]
struct Hypothesis {
    tokens: Vec<String>,
    logp: f64,
}

#[derive(Debug, Clone)]
struct Finished {
    tokens: Vec<String>,
    norm: f64,
    truncated: bool,
}

fn better(a: &Finished, b: &Finished) -> bool {
    a.norm > b.norm || (a.norm == b.norm && a.tokens < b.tokens)
}

/// Beam-search an expression for `question` given already-retrieved
/// exemplars with their mixture weights.
pub fn beam_decode(
    model: &Model,
    question: &[String],
    retrieved: &[(RetrievedPair<'_>, f64)],
    opts: &InferOptions,
) -> Result<(Vec<String>, f64, bool), NetError> {
    assert!(opts.beam_width > 0, "beam width must be positive");
    assert!(opts.max_len > 0, "max_len must be positive");
    let mut live = vec![Hypothesis { tokens: Vec::new(), logp: 0.0 }];
    let mut best: Option<Finished> = None;
    for step in 0..opts.max_len {
        let mut candidates: Vec<Hypothesis> = Vec::new();
        for hyp in &live {
            let (support, probs) = match step_distribution(model, question, &hyp.tokens, retrieved)
            {
                Ok(out) => out,
                // The position table is exhausted: this hypothesis cannot
                // be extended, so it finishes unclosed.
                Err(NetError::SequenceTooLong { .. }) => {
                    let done = Finished {
                        tokens: hyp.tokens.clone(),
                        norm: hyp.logp / hyp.tokens.len().max(1) as f64,
                        truncated: true,
                    };
                    if best.as_ref().is_none_or(|b| better(&done, b)) {
                        best = Some(done);
                    }
                    continue;
                }
                Err(e) => return Err(e),
            };
            for (slot, &p) in probs.iter().enumerate() {
                if p <= 0.0 {
                    continue;
                }
                let tok = support.token(slot);
                let logp = hyp.logp + p.ln();
                if tok == EOS_TOKEN {
                    let done = Finished {
                        tokens: hyp.tokens.clone(),
                        norm: logp / (hyp.tokens.len() + 1) as f64,
                        truncated: false,
                    };
                    if best.as_ref().is_none_or(|b| better(&done, b)) {
                        best = Some(done);
                    }
                } else {
                    let mut tokens = hyp.tokens.clone();
                    tokens.push(tok.to_string());
                    candidates.push(Hypothesis { tokens, logp });
                }
            }
        }
        candidates.sort_by(|a, b| {
            b.logp
                .partial_cmp(&a.logp)
                .expect("finite log-probabilities")
                .then_with(|| a.tokens.cmp(&b.tokens))
        });
        candidates.truncate(opts.beam_width);
        live = candidates;
        if live.is_empty() {
            break;
        }
        if step + 1 == opts.max_len {
            for hyp in &live {
                let done = Finished {
                    tokens: hyp.tokens.clone(),
                    norm: hyp.logp / hyp.tokens.len().max(1) as f64,
                    truncated: true,
                };
                if best.as_ref().is_none_or(|b| better(&done, b)) {
                    best = Some(done);
                }
            }
        }
    }
    let won = best.expect("the end token always has positive probability");
    Ok((won.tokens, won.norm, won.truncated))
}

/// Retrieve exemplars for a question, decode, and evaluate. `exclude` drops
/// one memory id from retrieval (used when the question itself is stored).
pub fn solve(
    model: &Model,
    memory: Option<&MemoryStore>,
    question: &[String],
    opts: &InferOptions,
    exclude: Option<&str>,
) -> Result<SolveResult, NetError> {
    let retrievals: Vec<Retrieval> = match memory {
        Some(store) if model.config.use_memory && opts.k > 0 => {
            let text: Vec<String> = question.to_vec();
            store
                .retrieve(&text, opts.k, exclude)
                .map_err(|e| NetError::Input(format!("retrieval failed: {e}")))?
                .results
        }
        _ => Vec::new(),
    };
    let pairs: Vec<(RetrievedPair<'_>, f64)> = retrievals
        .iter()
        .map(|r| {
            let p: &Problem = memory
                .and_then(|s| s.problem(&r.id))
                .expect("retrieved id resolves to a stored problem");
            (
                RetrievedPair { question: &p.question, expression: &p.expression },
                r.probability,
            )
        })
        .collect();
    let (expression, score, truncated) = beam_decode(model, question, &pairs, opts)?;
    let value = expr::parse(&expression)
        .ok()
        .and_then(|e| expr::evaluate(&e).ok())
        .map(|v| expr::rational_to_string(&v));
    Ok(SolveResult { expression, value, score, retrieved: retrievals, truncated })
}

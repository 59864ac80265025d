//! Memory-augmented solver for arithmetic word problems.
//!
//! Given a word problem in natural language, the solver retrieves similar
//! solved problems from a memory of worked examples, encodes the problem
//! together with a retrieved exemplar under a segmented attention mask, and
//! decodes an arithmetic expression with a copy mechanism that can pull
//! number tokens straight out of the question. Evaluating the expression with
//! exact rational arithmetic yields the predicted answer.
//!
//! The crate is organised as a pipeline:
//!
//! * [`corpus`]: problem records, tokenisation, vocabulary, JSONL IO, and a
//!   deterministic synthetic problem generator.
//! * [`expr`]: expression parsing, exact evaluation, and equation
//!   normalisation.
//! * [`memory`]: the co-occurrence embedder, the exact inner-product index,
//!   and retrieval with softmax-normalised scores.
//! * [`tensor`]: a small tape-based reverse-mode autodiff engine used by the
//!   network.
//! * [`net`]: the two transformer stacks (representation and analogy), the
//!   segmented attention mask, and the output heads.
//! * [`train`]: losses, the optimiser, the learning-rate schedule, and the
//!   training loop with checkpointing.
//! * [`infer`]: mixture decoding over retrievals and beam search.
//! * [`harness`]: evaluation, K sweeps, ablations, difficulty buckets, and
//!   the command-line interface.

pub mod cli;
pub mod corpus;
pub mod expr;
pub mod harness;
pub mod infer;
pub mod memory;
pub mod net;
pub mod tensor;
pub mod train;

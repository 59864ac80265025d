//! Graph construction for the solver: embedding, the two transformer
//! stacks, and the copy-augmented output heads.
//!
//! A [`Forward`] owns one [`Tape`] and builds the whole computation for a
//! single example. The representation stack encodes a question-expression
//! pair into per-token item memories; the analogy stack re-reads the
//! concatenation of the retrieved pair's memories and the problem's
//! memories under the four-segment mask. Output heads produce, per
//! expression step, a distribution over the union of the generation
//! vocabulary and the question's tokens:
//!
//! * a generation softmax over the fixed generation vocabulary,
//! * a copy distribution from the final analogy layer's attention onto
//!   question positions, renormalised per head and averaged across heads,
//! * a sigmoid gate mixing the two.
//!
//! Hidden states over the retrieved-expression segment feed an auxiliary
//! classifier used by the inductive loss during training.

use super::{
    build_mask, AttentionMask, ModelConfig, ModelParams, NetError, SequenceLayout,
};
use crate::corpus::{Vocab, BOS};
use crate::tensor::{NodeId, Tape};
use rand::RngExt;
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;
use std::sync::Arc;

/// Epsilon inside layer normalisation.
pub const LN_EPS: f64 = 1e-5;

/// A retrieved question-expression pair, already tokenised.
#[derive(Debug, Clone, Copy)]
pub struct RetrievedPair<'a> {
    pub question: &'a [String],
    pub expression: &'a [String],
}

/// One example's inputs. `expr_input` is the teacher-forced expression (or
/// a decode prefix) without the leading BOS, which is added internally.
#[derive(Debug, Clone, Copy)]
pub struct ExampleInput<'a> {
    pub question: &'a [String],
    pub expr_input: &'a [String],
    pub retrieved: Option<RetrievedPair<'a>>,
}

/// The union output support for one question: every generation-vocabulary
/// token first (in id order), then question tokens not already present, by
/// first occurrence. Slots are keyed by token string, so a question token
/// that is also generable shares its slot.
#[derive(Debug, Clone)]
pub struct OutputSupport {
    slots: Vec<String>,
    gen_slot: Vec<usize>,
    xq_slot: Vec<usize>,
    by_string: HashMap<String, usize>,
}

impl OutputSupport {
    pub fn build(vocab: &Vocab, question: &[String]) -> OutputSupport {
        let gen_ids = vocab.gen_ids();
        let mut slots = Vec::with_capacity(gen_ids.len() + question.len());
        let mut by_string = HashMap::new();
        let mut gen_slot = Vec::with_capacity(gen_ids.len());
        for &id in gen_ids {
            let tok = vocab.token(id).to_string();
            let slot = slots.len();
            by_string.insert(tok.clone(), slot);
            slots.push(tok);
            gen_slot.push(slot);
        }
        let mut xq_slot = Vec::with_capacity(question.len());
        for tok in question {
            let slot = *by_string.entry(tok.clone()).or_insert_with(|| {
                slots.push(tok.clone());
                slots.len() - 1
            });
            xq_slot.push(slot);
        }
        OutputSupport { slots, gen_slot, xq_slot, by_string }
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    /// Token string of a slot.
    pub fn token(&self, slot: usize) -> &str {
        &self.slots[slot]
    }

    pub fn slot_of(&self, token: &str) -> Option<usize> {
        self.by_string.get(token).copied()
    }

    /// Slot of each generation-vocabulary entry, in `gen_ids` order.
    pub fn gen_slots(&self) -> &[usize] {
        &self.gen_slot
    }

    /// Slot of each question position.
    pub fn question_slots(&self) -> &[usize] {
        &self.xq_slot
    }
}

/// Everything the trainer and decoder read back from one forward build.
#[derive(Debug)]
pub struct ForwardTrace {
    pub layout: SequenceLayout,
    pub support: OutputSupport,
    /// Per expression step, a `[1, support.len()]` distribution node.
    pub steps: Vec<NodeId>,
    /// Per expression step, the `[1, 1]` generation gate.
    pub gates: Vec<NodeId>,
    /// `[steps, gen_size]` generation softmax.
    pub gen_probs: NodeId,
    /// `[ze_len, gen_size]` inductive classifier softmax, when a pair was
    /// retrieved.
    pub inductive_probs: Option<NodeId>,
    /// Analogy-stack attention, `[layer][head]`, each `[n, n]`.
    pub analogy_attn: Vec<Vec<NodeId>>,
    /// Representation-stack attention over the problem pair.
    pub repr_attn: Vec<Vec<NodeId>>,
    /// Final analogy states sliced per segment.
    pub xq_states: NodeId,
    pub xe_states: NodeId,
    pub zq_states: Option<NodeId>,
    pub ze_states: Option<NodeId>,
}

struct PairMemories {
    q_states: NodeId,
    e_states: NodeId,
    attn: Vec<Vec<NodeId>>,
}

/// Builds the computation graph for one example over a borrowed parameter
/// table. Parameters enter the tape once each, as shared leaves.
pub struct Forward<'m> {
    pub tape: Tape,
    params: &'m ModelParams,
    cfg: &'m ModelConfig,
    leaves: HashMap<usize, NodeId>,
    dropout_rng: Option<ChaCha8Rng>,
}

impl<'m> Forward<'m> {
    pub fn new(params: &'m ModelParams, cfg: &'m ModelConfig) -> Forward<'m> {
        Forward { tape: Tape::new(), params, cfg, leaves: HashMap::new(), dropout_rng: None }
    }

    /// Enable dropout (training only); inference builds stay deterministic
    /// by never setting this.
    pub fn with_dropout(params: &'m ModelParams, cfg: &'m ModelConfig, rng: ChaCha8Rng) -> Forward<'m> {
        let mut fw = Forward::new(params, cfg);
        if cfg.dropout > 0.0 {
            fw.dropout_rng = Some(rng);
        }
        fw
    }

    /// Leaf node for a named parameter, cached so each tensor enters the
    /// tape once.
    pub fn param(&mut self, name: &str) -> NodeId {
        let idx = self
            .params
            .index_of(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"));
        if let Some(&id) = self.leaves.get(&idx) {
            return id;
        }
        let (rows, cols) = self.params.shape(idx);
        let id = self.tape.leaf(rows, cols, Arc::clone(self.params.value(idx)));
        self.leaves.insert(idx, id);
        id
    }

    /// Parameter leaves present in this build, as `(param index, node)`
    /// sorted by parameter index.
    pub fn param_leaves(&self) -> Vec<(usize, NodeId)> {
        let mut out: Vec<(usize, NodeId)> = self.leaves.iter().map(|(&i, &n)| (i, n)).collect();
        out.sort_unstable();
        out
    }

    fn maybe_dropout(&mut self, x: NodeId) -> NodeId {
        let p = self.cfg.dropout;
        let Some(rng) = self.dropout_rng.as_mut() else {
            return x;
        };
        let (m, n) = self.tape.shape(x);
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> =
            (0..m * n).map(|_| if rng.random::<f64>() < p { 0.0 } else { keep }).collect();
        self.tape.dropout(x, Arc::new(mask))
    }

    fn embedded(&mut self, prefix: &str, token_rows: NodeId, layout: &SequenceLayout) -> Result<NodeId, NetError> {
        let n = layout.total();
        if n > self.cfg.max_positions {
            return Err(NetError::SequenceTooLong { len: n, max: self.cfg.max_positions });
        }
        let seg_table = self.param(&format!("{prefix}.seg"));
        let pos_table = self.param(&format!("{prefix}.pos"));
        let seg = self.tape.gather(seg_table, &layout.segment_ids());
        let positions: Vec<u32> = (0..n as u32).collect();
        let pos = self.tape.gather(pos_table, &positions);
        let x = self.tape.add(token_rows, seg);
        let x = self.tape.add(x, pos);
        Ok(self.maybe_dropout(x))
    }

    fn block(
        &mut self,
        prefix: &str,
        layer: usize,
        x: NodeId,
        mask: &AttentionMask,
    ) -> (NodeId, Vec<NodeId>) {
        let d = self.cfg.d_model;
        let heads = self.cfg.n_heads;
        let dh = d / heads;
        let p = |s: &str| format!("{prefix}.{layer}.{s}");

        let g1 = self.param(&p("ln1.g"));
        let b1 = self.param(&p("ln1.b"));
        let h = self.tape.layer_norm(x, g1, b1, LN_EPS);
        let wq = self.param(&p("wq"));
        let bq = self.param(&p("bq"));
        let wk = self.param(&p("wk"));
        let bk = self.param(&p("bk"));
        let wv = self.param(&p("wv"));
        let bv = self.param(&p("bv"));
        let wo = self.param(&p("wo"));
        let bo = self.param(&p("bo"));
        let q = self.tape.matmul(h, wq);
        let q = self.tape.add_row(q, bq);
        let k = self.tape.matmul(h, wk);
        let k = self.tape.add_row(k, bk);
        let v = self.tape.matmul(h, wv);
        let v = self.tape.add_row(v, bv);

        let mut attn_heads = Vec::with_capacity(heads);
        let mut proj_parts = Vec::with_capacity(heads);
        for i in 0..heads {
            let qh = self.tape.slice_cols(q, i * dh, dh);
            let kh = self.tape.slice_cols(k, i * dh, dh);
            let vh = self.tape.slice_cols(v, i * dh, dh);
            let scores = self.tape.matmul_nt(qh, kh);
            let scores = self.tape.scale(scores, 1.0 / (dh as f64).sqrt());
            let a = self.tape.masked_softmax(scores, Arc::clone(&mask.bits));
            let ctx = self.tape.matmul(a, vh);
            // Projecting each head's context through its band of rows in
            // `wo` sums to the usual concat-then-project.
            let wo_h = self.tape.slice_rows(wo, i * dh, dh);
            proj_parts.push(self.tape.matmul(ctx, wo_h));
            attn_heads.push(a);
        }
        let merged = self.tape.add_n(&proj_parts);
        let merged = self.tape.add_row(merged, bo);
        let merged = self.maybe_dropout(merged);
        let x1 = self.tape.add(x, merged);

        let g2 = self.param(&p("ln2.g"));
        let b2 = self.param(&p("ln2.b"));
        let h2 = self.tape.layer_norm(x1, g2, b2, LN_EPS);
        let w1 = self.param(&p("ff.w1"));
        let fb1 = self.param(&p("ff.b1"));
        let w2 = self.param(&p("ff.w2"));
        let fb2 = self.param(&p("ff.b2"));
        let f = self.tape.matmul(h2, w1);
        let f = self.tape.add_row(f, fb1);
        let f = self.tape.gelu(f);
        let o = self.tape.matmul(f, w2);
        let o = self.tape.add_row(o, fb2);
        let o = self.maybe_dropout(o);
        let x2 = self.tape.add(x1, o);
        (x2, attn_heads)
    }

    fn stack(
        &mut self,
        prefix: &str,
        layers: usize,
        mut x: NodeId,
        mask: &AttentionMask,
    ) -> (NodeId, Vec<Vec<NodeId>>) {
        let mut attn = Vec::with_capacity(layers);
        for l in 0..layers {
            let (y, a) = self.block(prefix, l, x, mask);
            x = y;
            attn.push(a);
        }
        let g = self.param(&format!("{prefix}.lnf.g"));
        let b = self.param(&format!("{prefix}.lnf.b"));
        let out = self.tape.layer_norm(x, g, b, LN_EPS);
        (out, attn)
    }

    /// Encode one question-expression pair with the representation stack;
    /// `e_ids` already starts with BOS. Returns per-token item memories.
    fn encode_pair(&mut self, q_ids: &[u32], e_ids: &[u32]) -> Result<PairMemories, NetError> {
        let layout = SequenceLayout { zq: 0, ze: 0, xq: q_ids.len(), xe: e_ids.len() };
        let mask = build_mask(&layout);
        let mut ids = q_ids.to_vec();
        ids.extend_from_slice(e_ids);
        let tok_table = self.param("tok_emb");
        let tok = self.tape.gather(tok_table, &ids);
        let x = self.embedded("repr", tok, &layout)?;
        let (states, attn) = self.stack("repr", self.cfg.layers_repr, x, &mask);
        let q_states = self.tape.slice_rows(states, 0, q_ids.len());
        let e_states = self.tape.slice_rows(states, q_ids.len(), e_ids.len());
        Ok(PairMemories { q_states, e_states, attn })
    }

    /// Build the full graph for one example.
    pub fn example(&mut self, vocab: &Vocab, input: ExampleInput<'_>) -> Result<ForwardTrace, NetError> {
        if input.question.is_empty() {
            return Err(NetError::Input("question has no tokens".into()));
        }
        let encode = |toks: &[String]| -> Vec<u32> { toks.iter().map(|t| vocab.id(t)).collect() };
        let with_bos = |toks: &[String]| -> Vec<u32> {
            let mut ids = Vec::with_capacity(toks.len() + 1);
            ids.push(BOS);
            ids.extend(toks.iter().map(|t| vocab.id(t)));
            ids
        };

        let xq_ids = encode(input.question);
        let xe_ids = with_bos(input.expr_input);
        let problem = self.encode_pair(&xq_ids, &xe_ids)?;

        let retrieved = match input.retrieved {
            Some(pair) => {
                if pair.question.is_empty() {
                    return Err(NetError::Input("retrieved question has no tokens".into()));
                }
                let zq_ids = encode(pair.question);
                let ze_ids = with_bos(pair.expression);
                Some((self.encode_pair(&zq_ids, &ze_ids)?, zq_ids.len(), ze_ids.len()))
            }
            None => None,
        };

        let layout = match &retrieved {
            Some((_, zq, ze)) => {
                SequenceLayout { zq: *zq, ze: *ze, xq: xq_ids.len(), xe: xe_ids.len() }
            }
            None => SequenceLayout { zq: 0, ze: 0, xq: xq_ids.len(), xe: xe_ids.len() },
        };
        let mask = build_mask(&layout);
        let mut parts = Vec::with_capacity(4);
        if let Some((pair, _, _)) = &retrieved {
            parts.push(pair.q_states);
            parts.push(pair.e_states);
        }
        parts.push(problem.q_states);
        parts.push(problem.e_states);
        let memories = self.tape.concat_rows(&parts);
        let x = self.embedded("ana", memories, &layout)?;
        let (states, analogy_attn) = self.stack("ana", self.cfg.layers_analogy, x, &mask);

        let xq_states = self.tape.slice_rows(states, layout.xq_start(), layout.xq);
        let xe_states = self.tape.slice_rows(states, layout.xe_start(), layout.xe);
        let zq_states = retrieved
            .as_ref()
            .map(|_| self.tape.slice_rows(states, layout.zq_start(), layout.zq));
        let ze_states = retrieved
            .as_ref()
            .map(|_| self.tape.slice_rows(states, layout.ze_start(), layout.ze));

        let support = OutputSupport::build(vocab, input.question);
        let (steps, gates, gen_probs) =
            self.output_steps(&support, &layout, xe_states, &analogy_attn)?;
        let inductive_probs = match ze_states {
            Some(zs) => {
                let c = self.param("head.c");
                let logits = self.tape.matmul(zs, c);
                let all = vec![true; layout.ze * self.cfg.gen_size];
                Some(self.tape.masked_softmax(logits, Arc::new(all)))
            }
            None => None,
        };

        Ok(ForwardTrace {
            layout,
            support,
            steps,
            gates,
            gen_probs,
            inductive_probs,
            analogy_attn,
            repr_attn: problem.attn,
            xq_states,
            xe_states,
            zq_states,
            ze_states,
        })
    }

    fn output_steps(
        &mut self,
        support: &OutputSupport,
        layout: &SequenceLayout,
        xe_states: NodeId,
        analogy_attn: &[Vec<NodeId>],
    ) -> Result<(Vec<NodeId>, Vec<NodeId>, NodeId), NetError> {
        let wg = self.param("head.wg");
        let wp = self.param("head.wp");
        let gen_logits = self.tape.matmul(xe_states, wg);
        let all = vec![true; layout.xe * self.cfg.gen_size];
        let gen_probs = self.tape.masked_softmax(gen_logits, Arc::new(all));
        let gate_logits = self.tape.matmul(xe_states, wp);
        let gates_all = self.tape.sigmoid(gate_logits);

        let last_attn = analogy_attn.last().expect("at least one analogy layer");
        let width = support.len();
        let mut steps = Vec::with_capacity(layout.xe);
        let mut gates = Vec::with_capacity(layout.xe);
        for t in 0..layout.xe {
            let g_row = self.tape.slice_rows(gen_probs, t, 1);
            let g_mapped = self.tape.map_slots(g_row, support.gen_slots(), width);
            let p_gen = self.tape.slice_rows(gates_all, t, 1);
            let step = if self.cfg.use_copy {
                let mut per_head = Vec::with_capacity(last_attn.len());
                for &a in last_attn {
                    let row = self.tape.slice_rows(a, layout.xe_start() + t, 1);
                    let over_q = self.tape.slice_cols(row, layout.xq_start(), layout.xq);
                    let renorm = self.tape.row_l1_normalize(over_q);
                    per_head.push(self.tape.map_slots(renorm, support.question_slots(), width));
                }
                let summed = self.tape.add_n(&per_head);
                let copy = self.tape.scale(summed, 1.0 / per_head.len() as f64);
                mix_step(&mut self.tape, p_gen, g_mapped, copy)
            } else {
                g_mapped
            };
            steps.push(step);
            gates.push(p_gen);
        }
        Ok((steps, gates, gen_probs))
    }
}

/// `p = p_gen * gen + (1 - p_gen) * copy`, all over the same support.
pub fn mix_step(tape: &mut Tape, p_gen: NodeId, gen: NodeId, copy: NodeId) -> NodeId {
    let weighted_gen = tape.scalar_mul(p_gen, gen);
    let flipped = tape.scale(p_gen, -1.0);
    let one_minus = tape.offset(flipped, 1.0);
    let weighted_copy = tape.scalar_mul(one_minus, copy);
    tape.add(weighted_gen, weighted_copy)
}

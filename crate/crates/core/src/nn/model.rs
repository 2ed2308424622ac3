//! The encoder-decoder transition parser.
//!
//! A bidirectional LSTM encodes the utterance; an LSTM decoder emits one
//! grammar action per step, attending over the encoder outputs with
//! dot-product attention. Per-step distributions are softmaxes over the
//! *applicable* actions only. With adapters enabled, a per-task gated
//! transform rewrites the decoder hidden state before attention and
//! scoring, adding exactly `3d^2` parameters per task.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::params::{AdamState, Init, ParamId, ParamStore, Partition, TrainMask};
use super::tape::{softmax_values, NodeId, Tape};
use crate::error::{Error, Result};
use crate::grammar::{Action, ActionId, ActionRegistry, BoundGrammar, DerivState};
use crate::lf::LogicalForm;

/// Reserved word id for out-of-vocabulary tokens.
pub const UNK_WORD_ID: usize = 0;
const UNK_WORD: &str = "<unk>";

/// Model dimensions and decoding limits.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParserConfig {
    pub word_emb_dim: usize,
    /// Encoder/decoder hidden size `d`; each encoder direction gets `d/2`.
    pub hidden_dim: usize,
    pub action_emb_dim: usize,
    /// Enables the per-task gated hidden-state adapters.
    pub dar_enabled: bool,
    /// Decode attempts abort with a timeout after this many actions.
    pub max_decode_steps: usize,
    pub rng_seed: u64,
}

impl Default for ParserConfig {
    fn default() -> Self {
        ParserConfig {
            word_emb_dim: 64,
            hidden_dim: 64,
            action_emb_dim: 32,
            dar_enabled: false,
            max_decode_steps: 200,
            rng_seed: 0,
        }
    }
}

impl ParserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.word_emb_dim == 0 || self.hidden_dim == 0 || self.action_emb_dim == 0 {
            return Err(Error::Config {
                msg: "model dimensions must all be at least 1".into(),
            });
        }
        if self.hidden_dim % 2 != 0 {
            return Err(Error::Config {
                msg: format!(
                    "hidden_dim must be even to split across encoder directions, got {}",
                    self.hidden_dim
                ),
            });
        }
        if self.max_decode_steps == 0 {
            return Err(Error::Config {
                msg: "max_decode_steps must be at least 1".into(),
            });
        }
        Ok(())
    }
}

/// Word-to-id mapping with a reserved id 0 for unknown words.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WordVocab {
    words: Vec<String>,
    #[serde(skip)]
    by_word: BTreeMap<String, usize>,
}

impl WordVocab {
    /// Builds a vocabulary from an iterator of tokens; ids are assigned in
    /// sorted order so the mapping is independent of input order.
    pub fn build<'a>(tokens: impl IntoIterator<Item = &'a str>) -> Self {
        let uniq: BTreeSet<&str> = tokens.into_iter().filter(|t| *t != UNK_WORD).collect();
        let mut words = vec![UNK_WORD.to_string()];
        words.extend(uniq.into_iter().map(String::from));
        let mut v = WordVocab { words, by_word: BTreeMap::new() };
        v.rebuild_index();
        v
    }

    /// Rebuilds the word index after deserialization.
    pub fn rebuild_index(&mut self) {
        self.by_word = self
            .words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i))
            .collect();
    }

    pub fn id(&self, word: &str) -> usize {
        self.by_word.get(word).copied().unwrap_or(UNK_WORD_ID)
    }

    pub fn ids<S: AsRef<str>>(&self, words: &[S]) -> Vec<usize> {
        words.iter().map(|w| self.id(w.as_ref())).collect()
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }
}

#[derive(Debug, Clone, Copy)]
struct CoreIds {
    word_emb: ParamId,
    enc_fwd_w: ParamId,
    enc_fwd_b: ParamId,
    enc_bwd_w: ParamId,
    enc_bwd_b: ParamId,
    dec_w: ParamId,
    dec_b: ParamId,
    w_c: ParamId,
    start_emb: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct DarIds {
    w_phi: ParamId,
    w_g: ParamId,
}

/// One teacher-forcing or decoding example, viewed against the grammar it
/// was produced under (replayed examples keep their source grammar).
#[derive(Debug, Clone, Copy)]
pub struct BatchExample<'a> {
    pub tokens: &'a [usize],
    pub actions: &'a [Action],
    pub bound: &'a BoundGrammar,
    /// Which task's adapter to apply when adapters are enabled.
    pub task: usize,
}

/// Decoding output: the finished tree and its sequence log-probability.
#[derive(Debug, Clone)]
pub struct Decoded {
    pub lf: LogicalForm,
    pub logprob: f64,
}

/// The transition parser: parameters, optimizer state, vocabulary, and the
/// global action inventory it scores.
#[derive(Debug, Clone)]
pub struct Parser {
    pub config: ParserConfig,
    pub params: ParamStore,
    pub opt: AdamState,
    pub vocab: WordVocab,
    /// Canonical registry key of every scored action, in id order.
    pub action_keys: Vec<String>,
    /// Number of per-task adapter pairs allocated (0 unless enabled).
    pub dar_tasks: usize,
    ids: CoreIds,
    action_embs: Vec<ParamId>,
    dar: Vec<DarIds>,
    /// Test hook: when set, every adapter gate sees this pre-sigmoid logit
    /// instead of the learned projection (e.g. `-inf` forces the gate shut).
    pub dar_gate_logit_override: Option<f64>,
}

fn act_tensor_name(key: &str) -> String {
    format!("act:{key}")
}

/// Adds one LSTM cell's weight matrix and bias. Gate order along the rows
/// is input, forget, candidate, output; the forget-gate bias starts at 1.0
/// so early training does not erase cell state.
fn add_lstm(store: &mut ParamStore, prefix: &str, input: usize, hidden: usize, seed: u64) {
    store.add(
        &format!("{prefix}.w"),
        4 * hidden,
        input + hidden,
        Partition::Global,
        Init::Xavier,
        seed,
    );
    let b = store.add(
        &format!("{prefix}.b"),
        4 * hidden,
        1,
        Partition::Global,
        Init::Zeros,
        seed,
    );
    for j in hidden..2 * hidden {
        store.tensor_mut(b).data[j] = 1.0;
    }
}

/// One LSTM step over tape nodes.
fn lstm_cell(
    tape: &mut Tape,
    store: &ParamStore,
    w: ParamId,
    b: ParamId,
    x: NodeId,
    h: NodeId,
    c: NodeId,
    hidden: usize,
) -> (NodeId, NodeId) {
    let xh = tape.concat(x, h);
    let wxh = tape.matvec(store, w, xh);
    let bias = tape.param(store, b);
    let pre = tape.add(wxh, bias);
    let i_pre = tape.slice(pre, 0, hidden);
    let f_pre = tape.slice(pre, hidden, hidden);
    let g_pre = tape.slice(pre, 2 * hidden, hidden);
    let o_pre = tape.slice(pre, 3 * hidden, hidden);
    let i = tape.sigmoid(i_pre);
    let f = tape.sigmoid(f_pre);
    let g = tape.tanh(g_pre);
    let o = tape.sigmoid(o_pre);
    let fc = tape.mul(f, c);
    let ig = tape.mul(i, g);
    let c_new = tape.add(fc, ig);
    let tc = tape.tanh(c_new);
    let h_new = tape.mul(o, tc);
    (h_new, c_new)
}

/// Decoder recurrence position: previous hidden/cell state and the
/// embedding of the previously chosen action.
#[derive(Clone, Copy)]
struct DecPos {
    h: NodeId,
    c: NodeId,
    x: NodeId,
}

impl Parser {
    /// Builds a freshly initialized parser over a fixed action inventory.
    /// `partitions[id]` assigns each action embedding to the shared pool or
    /// to one task; `dar_tasks` adapter pairs are allocated when adapters
    /// are enabled.
    pub fn new(
        config: ParserConfig,
        vocab: WordVocab,
        registry: &ActionRegistry,
        partitions: &[Partition],
        dar_tasks: usize,
    ) -> Result<Parser> {
        config.validate()?;
        assert_eq!(
            partitions.len(),
            registry.len(),
            "one partition tag per registered action"
        );
        let seed = config.rng_seed;
        let d = config.hidden_dim;
        let mut params = ParamStore::new();
        params.add(
            "word_emb",
            vocab.len(),
            config.word_emb_dim,
            Partition::Global,
            Init::Uniform(0.1),
            seed,
        );
        add_lstm(&mut params, "enc_fwd", config.word_emb_dim, d / 2, seed);
        add_lstm(&mut params, "enc_bwd", config.word_emb_dim, d / 2, seed);
        add_lstm(&mut params, "dec", config.action_emb_dim, d, seed);
        params.add(
            "w_c",
            config.action_emb_dim,
            2 * d,
            Partition::Global,
            Init::Xavier,
            seed,
        );
        params.add(
            "start_emb",
            1,
            config.action_emb_dim,
            Partition::Global,
            Init::Uniform(0.1),
            seed,
        );
        for (id, key) in registry.keys().iter().enumerate() {
            params.add(
                &act_tensor_name(key),
                1,
                config.action_emb_dim,
                partitions[id],
                Init::Uniform(0.1),
                seed,
            );
        }
        if config.dar_enabled {
            for t in 0..dar_tasks {
                params.add(
                    &format!("dar{t}.w_phi"),
                    d,
                    d,
                    Partition::Task(t),
                    Init::Xavier,
                    seed,
                );
                params.add(
                    &format!("dar{t}.w_g"),
                    d,
                    2 * d,
                    Partition::Task(t),
                    Init::Xavier,
                    seed,
                );
            }
        }
        let opt = AdamState::zeros_like(&params);
        Parser::from_parts(config, vocab, registry.keys().to_vec(), dar_tasks, params, opt)
    }

    /// Reassembles a parser from stored pieces, resolving tensor handles by
    /// name. Fails if any expected tensor is missing.
    pub fn from_parts(
        config: ParserConfig,
        mut vocab: WordVocab,
        action_keys: Vec<String>,
        dar_tasks: usize,
        mut params: ParamStore,
        opt: AdamState,
    ) -> Result<Parser> {
        config.validate()?;
        params.rebuild_index();
        vocab.rebuild_index();
        let need = |params: &ParamStore, name: &str| -> Result<ParamId> {
            params.id(name).ok_or_else(|| Error::Checkpoint {
                msg: format!("missing tensor '{name}'"),
            })
        };
        let ids = CoreIds {
            word_emb: need(&params, "word_emb")?,
            enc_fwd_w: need(&params, "enc_fwd.w")?,
            enc_fwd_b: need(&params, "enc_fwd.b")?,
            enc_bwd_w: need(&params, "enc_bwd.w")?,
            enc_bwd_b: need(&params, "enc_bwd.b")?,
            dec_w: need(&params, "dec.w")?,
            dec_b: need(&params, "dec.b")?,
            w_c: need(&params, "w_c")?,
            start_emb: need(&params, "start_emb")?,
        };
        let action_embs = action_keys
            .iter()
            .map(|k| need(&params, &act_tensor_name(k)))
            .collect::<Result<Vec<_>>>()?;
        let dar = if config.dar_enabled {
            (0..dar_tasks)
                .map(|t| {
                    Ok(DarIds {
                        w_phi: need(&params, &format!("dar{t}.w_phi"))?,
                        w_g: need(&params, &format!("dar{t}.w_g"))?,
                    })
                })
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        Ok(Parser {
            config,
            params,
            opt,
            vocab,
            action_keys,
            dar_tasks,
            ids,
            action_embs,
            dar,
            dar_gate_logit_override: None,
        })
    }

    /// Tensor handle for one action's embedding.
    pub fn action_emb(&self, id: ActionId) -> ParamId {
        self.action_embs[id]
    }

    /// Mask allowing exactly the embeddings of the given actions.
    pub fn action_emb_mask(&self, actions: &BTreeSet<ActionId>) -> TrainMask {
        let mut mask = TrainMask::none(&self.params);
        for &a in actions {
            mask.allow_id(self.action_embs[a]);
        }
        mask
    }

    /// Encodes word ids into one contextual vector per token plus the
    /// decoder's initial hidden state (forward-final ‖ backward-final).
    fn encode_on(&self, tape: &mut Tape, tokens: &[usize]) -> Result<(Vec<NodeId>, NodeId)> {
        if tokens.is_empty() {
            return Err(Error::EmptyUtterance);
        }
        let hd2 = self.config.hidden_dim / 2;
        let store = &self.params;
        let xs: Vec<NodeId> = tokens
            .iter()
            .map(|&w| tape.row(store, self.ids.word_emb, w))
            .collect();

        let mut fwd = Vec::with_capacity(xs.len());
        let mut h = tape.zeros(hd2);
        let mut c = tape.zeros(hd2);
        for &x in &xs {
            let (h2, c2) = lstm_cell(tape, store, self.ids.enc_fwd_w, self.ids.enc_fwd_b, x, h, c, hd2);
            h = h2;
            c = c2;
            fwd.push(h);
        }

        let mut bwd = vec![fwd[0]; xs.len()];
        let mut h = tape.zeros(hd2);
        let mut c = tape.zeros(hd2);
        for (i, &x) in xs.iter().enumerate().rev() {
            let (h2, c2) = lstm_cell(tape, store, self.ids.enc_bwd_w, self.ids.enc_bwd_b, x, h, c, hd2);
            h = h2;
            c = c2;
            bwd[i] = h;
        }

        let es: Vec<NodeId> = fwd
            .iter()
            .zip(&bwd)
            .map(|(&f, &b)| tape.concat(f, b))
            .collect();
        let h0 = tape.concat(*fwd.last().unwrap(), bwd[0]);
        Ok((es, h0))
    }

    /// Public encoding entry point, exposing the contextual vectors as
    /// plain values (used by the representation-space memory sampler).
    pub fn encode_values(&self, tokens: &[usize]) -> Result<Vec<Vec<f64>>> {
        let mut tape = Tape::new();
        let (es, _) = self.encode_on(&mut tape, tokens)?;
        Ok(es.iter().map(|&e| tape.value(e).to_vec()).collect())
    }

    /// Applies the task adapter to a decoder hidden state (identity when
    /// adapters are disabled).
    fn adapt(&self, tape: &mut Tape, h: NodeId, task: usize) -> NodeId {
        if !self.config.dar_enabled {
            return h;
        }
        let dar = self.dar[task];
        let store = &self.params;
        let phi_pre = tape.matvec(store, dar.w_phi, h);
        let phi = tape.tanh(phi_pre);
        let gate_pre = match self.dar_gate_logit_override {
            Some(v) => tape.input(vec![v; self.config.hidden_dim]),
            None => {
                let gate_in = tape.concat(phi, h);
                tape.matvec(store, dar.w_g, gate_in)
            }
        };
        let g = tape.sigmoid(gate_pre);
        let g_phi = tape.mul(g, phi);
        let keep = tape.one_minus(g);
        let keep_h = tape.mul(keep, h);
        tape.add(g_phi, keep_h)
    }

    /// Advances the decoder one step: recurrence, adapter, attention over
    /// the encoder outputs, and the combined scoring state.
    fn advance(&self, tape: &mut Tape, pos: DecPos, es: &[NodeId], task: usize) -> (DecPos, NodeId) {
        let store = &self.params;
        let d = self.config.hidden_dim;
        let (h, c) = lstm_cell(tape, store, self.ids.dec_w, self.ids.dec_b, pos.x, pos.h, pos.c, d);
        let hh = self.adapt(tape, h, task);
        let scores = tape.dot_each(hh, es);
        let weights = tape.softmax(scores);
        let o = tape.weighted_sum(weights, es);
        let ho = tape.concat(hh, o);
        let s_pre = tape.matvec(store, self.ids.w_c, ho);
        let s = tape.tanh(s_pre);
        (DecPos { h, c, x: pos.x }, s)
    }

    /// Scores the given actions against a combined state: one logit per
    /// action, in the order given.
    fn logits_for(&self, tape: &mut Tape, s: NodeId, actions: &[Action]) -> NodeId {
        let keys: Vec<NodeId> = actions
            .iter()
            .map(|a| tape.param(&self.params, self.action_embs[a.id]))
            .collect();
        tape.dot_each(s, &keys)
    }

    fn start_pos(&self, tape: &mut Tape) -> DecPos {
        let d = self.config.hidden_dim;
        DecPos {
            h: tape.zeros(d), // replaced by h0 before the first step
            c: tape.zeros(d),
            x: tape.param(&self.params, self.ids.start_emb),
        }
    }

    /// Teacher-forces one example, returning the summed negative
    /// log-likelihood node plus each step's restricted logits and the gold
    /// position within them.
    fn teacher_forced(
        &self,
        tape: &mut Tape,
        ex: &BatchExample,
    ) -> Result<(NodeId, Vec<(NodeId, usize)>)> {
        let (es, h0) = self.encode_on(tape, ex.tokens)?;
        let mut pos = self.start_pos(tape);
        pos.h = h0;
        let mut state = DerivState::new(&ex.bound.grammar);
        let mut steps = Vec::with_capacity(ex.actions.len());
        let mut total: Option<NodeId> = None;
        for (step, gold) in ex.actions.iter().enumerate() {
            let applicable = state.applicable(ex.bound);
            if applicable.is_empty() {
                return Err(Error::NoApplicableActions { step });
            }
            let (next, s) = self.advance(tape, pos, &es, ex.task);
            let logits = self.logits_for(tape, s, &applicable);
            let gold_pos = applicable
                .iter()
                .position(|a| a.id == gold.id)
                .ok_or_else(|| Error::InvalidAction {
                    step,
                    msg: format!("gold action '{}' is not applicable", self.action_keys[gold.id]),
                })?;
            let nll = tape.pick_nll(logits, gold_pos);
            total = Some(match total {
                None => nll,
                Some(t) => tape.add(t, nll),
            });
            steps.push((logits, gold_pos));
            state.apply(ex.bound, gold, step)?;
            pos = DecPos {
                h: next.h,
                c: next.c,
                x: tape.param(&self.params, self.action_embs[gold.id]),
            };
        }
        if !state.is_complete() {
            return Err(Error::IncompleteTree);
        }
        let total = total.ok_or(Error::IncompleteTree)?;
        Ok((total, steps))
    }

    /// Negative log-likelihood of one gold action sequence.
    pub fn sequence_nll(&self, ex: &BatchExample) -> Result<f64> {
        let mut tape = Tape::new();
        let (nll, _) = self.teacher_forced(&mut tape, ex)?;
        Ok(tape.value(nll)[0])
    }

    /// Teacher-forced probability of each gold action, step by step.
    pub fn sequence_step_probs(&self, ex: &BatchExample) -> Result<Vec<(ActionId, f64)>> {
        let mut tape = Tape::new();
        let (_, steps) = self.teacher_forced(&mut tape, ex)?;
        Ok(ex
            .actions
            .iter()
            .zip(&steps)
            .map(|(gold, &(logits, gold_pos))| {
                (gold.id, softmax_values(tape.value(logits))[gold_pos])
            })
            .collect())
    }

    /// Mean batch loss and its exact gradient, masked so that disallowed
    /// tensors receive an exactly-zero gradient.
    pub fn gradient(
        &self,
        examples: &[BatchExample],
        mask: &TrainMask,
    ) -> Result<(f64, super::params::GradStore)> {
        assert!(!examples.is_empty(), "gradient of an empty batch");
        let mut tape = Tape::new();
        let mut total: Option<NodeId> = None;
        for ex in examples {
            let (nll, _) = self.teacher_forced(&mut tape, ex)?;
            total = Some(match total {
                None => nll,
                Some(t) => tape.add(t, nll),
            });
        }
        let mean = tape.scale(total.unwrap(), 1.0 / examples.len() as f64);
        let loss = tape.value(mean)[0];
        let mut grads = tape.backward(mean, &self.params);
        grads.apply_mask(mask);
        Ok((loss, grads))
    }

    /// Decodes an utterance. `width` 1 is greedy; wider runs beam search
    /// and returns the best finished sequence found by either strategy, so
    /// widening can never return something worse than greedy.
    pub fn parse(
        &self,
        tokens: &[usize],
        bound: &BoundGrammar,
        task: usize,
        width: usize,
    ) -> Result<Decoded> {
        assert!(width >= 1, "beam width must be at least 1");
        let greedy = self.greedy_parse(tokens, bound, task);
        if width == 1 {
            return greedy;
        }
        let beam = self.beam_parse(tokens, bound, task, width);
        match (greedy, beam) {
            (Ok(g), Ok(b)) => Ok(if b.logprob >= g.logprob { b } else { g }),
            (Ok(g), Err(_)) => Ok(g),
            (Err(_), Ok(b)) => Ok(b),
            (Err(g), Err(_)) => Err(g),
        }
    }

    fn greedy_parse(&self, tokens: &[usize], bound: &BoundGrammar, task: usize) -> Result<Decoded> {
        let mut tape = Tape::new();
        let (es, h0) = self.encode_on(&mut tape, tokens)?;
        let mut pos = self.start_pos(&mut tape);
        pos.h = h0;
        let mut state = DerivState::new(&bound.grammar);
        let mut logprob = 0.0;
        for step in 0..self.config.max_decode_steps {
            if state.is_complete() {
                return Ok(Decoded { lf: state.into_lf()?, logprob });
            }
            let applicable = state.applicable(bound);
            if applicable.is_empty() {
                return Err(Error::NoApplicableActions { step });
            }
            let (next, s) = self.advance(&mut tape, pos, &es, task);
            let logits = self.logits_for(&mut tape, s, &applicable);
            let probs = softmax_values(tape.value(logits));
            let mut best = 0;
            for (i, p) in probs.iter().enumerate().skip(1) {
                if *p > probs[best] {
                    best = i;
                }
            }
            logprob += probs[best].ln();
            let chosen = applicable[best].clone();
            state.apply(bound, &chosen, step)?;
            pos = DecPos {
                h: next.h,
                c: next.c,
                x: tape.param(&self.params, self.action_embs[chosen.id]),
            };
        }
        if state.is_complete() {
            return Ok(Decoded { lf: state.into_lf()?, logprob });
        }
        Err(Error::ParseTimeout { max_steps: self.config.max_decode_steps })
    }

    fn beam_parse(
        &self,
        tokens: &[usize],
        bound: &BoundGrammar,
        task: usize,
        width: usize,
    ) -> Result<Decoded> {
        struct Item {
            state: DerivState,
            pos: DecPos,
            logprob: f64,
        }
        let mut tape = Tape::new();
        let (es, h0) = self.encode_on(&mut tape, tokens)?;
        let mut start = self.start_pos(&mut tape);
        start.h = h0;
        let mut live = vec![Item {
            state: DerivState::new(&bound.grammar),
            pos: start,
            logprob: 0.0,
        }];
        let mut finished: Vec<Decoded> = Vec::new();
        let mut last_err = Error::ParseTimeout { max_steps: self.config.max_decode_steps };

        for step in 0..self.config.max_decode_steps {
            if live.is_empty() {
                break;
            }
            // (candidate logprob, source item, action, stepped decoder position)
            let mut candidates: Vec<(f64, usize, Action, DecPos)> = Vec::new();
            for (idx, item) in live.iter().enumerate() {
                let applicable = item.state.applicable(bound);
                if applicable.is_empty() {
                    last_err = Error::NoApplicableActions { step };
                    continue;
                }
                let (next, s) = self.advance(&mut tape, item.pos, &es, task);
                let logits = self.logits_for(&mut tape, s, &applicable);
                let probs = softmax_values(tape.value(logits));
                for (a, p) in applicable.into_iter().zip(probs) {
                    candidates.push((item.logprob + p.ln(), idx, a, next));
                }
            }
            candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.2.id.cmp(&b.2.id)));
            candidates.truncate(width);

            let mut next_live = Vec::with_capacity(candidates.len());
            for (logprob, idx, action, next) in candidates {
                let mut state = live[idx].state.clone();
                state.apply(bound, &action, step)?;
                let x = tape.param(&self.params, self.action_embs[action.id]);
                let pos = DecPos { h: next.h, c: next.c, x };
                if state.is_complete() {
                    finished.push(Decoded { lf: state.into_lf()?, logprob });
                } else {
                    next_live.push(Item { state, pos, logprob });
                }
            }
            live = next_live;
            if live.is_empty() || finished.len() >= width {
                break;
            }
        }

        finished
            .into_iter()
            .max_by(|a, b| a.logprob.total_cmp(&b.logprob))
            .ok_or(last_err)
    }
}

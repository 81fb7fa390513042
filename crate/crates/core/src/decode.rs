//! Greedy and beam-search decoding, and attention traces.

use std::cell::RefCell;
use std::cmp::Ordering;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{DecoderState, ImageContext, Rdn, RdnParams};
use crate::tape::{log_softmax, Tape};
use crate::tensor::Tensor;
use crate::vocab::{Vocabulary, BOS, EOS};

/// Anything that yields next-token log-probabilities one step at a time.
pub trait StepModel {
    type State: Clone;

    fn initial_state(&self) -> Result<Self::State>;

    /// Consumes `prev` and returns log-probabilities for the next token along
    /// with the updated state.
    fn advance(&self, state: &Self::State, prev: usize) -> Result<(Vec<f64>, Self::State)>;
}

/// The decoder conditioned on one image. Decoding is gradient-free, but the
/// step equations are shared with training through a private tape.
pub struct RdnStepper {
    tape: RefCell<Tape>,
    rdn: Rdn,
    image: ImageContext,
}

impl RdnStepper {
    pub fn new(params: &RdnParams, regions: &[Tensor]) -> Result<Self> {
        let mut tape = Tape::new();
        let rdn = params.bind(&mut tape);
        let image = rdn.prepare_image(&mut tape, regions)?;
        Ok(RdnStepper {
            tape: RefCell::new(tape),
            rdn,
            image,
        })
    }
}

impl StepModel for RdnStepper {
    type State = DecoderState;

    fn initial_state(&self) -> Result<DecoderState> {
        Ok(self.rdn.init_state(&mut self.tape.borrow_mut()))
    }

    fn advance(&self, state: &DecoderState, prev: usize) -> Result<(Vec<f64>, DecoderState)> {
        let mut tape = self.tape.borrow_mut();
        let (out, next) = self.rdn.step(&mut tape, state, prev, &self.image)?;
        Ok((log_softmax(tape.value(out.logits).data()), next))
    }
}

/// Index of the largest value; ties go to the lowest index.
fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Emitted tokens, including the final `<eos>` when one was produced.
pub fn greedy_search<M: StepModel>(model: &M, max_len: usize) -> Result<Vec<usize>> {
    if max_len == 0 {
        return Err(Error::Domain("max_len must be at least 1".into()));
    }
    let mut state = model.initial_state()?;
    let mut prev = BOS;
    let mut out = Vec::new();
    for _ in 0..max_len {
        let (lp, next) = model.advance(&state, prev)?;
        let tok = argmax(&lp);
        out.push(tok);
        if tok == EOS {
            break;
        }
        state = next;
        prev = tok;
    }
    Ok(out)
}

fn strip_eos(tokens: &[usize]) -> Vec<usize> {
    match tokens.split_last() {
        Some((&EOS, rest)) => rest.to_vec(),
        _ => tokens.to_vec(),
    }
}

/// Greedy caption (without `<eos>`) and the attention trace of every step.
pub fn greedy_decode(
    params: &RdnParams,
    regions: &[Tensor],
    max_len: usize,
) -> Result<(Vec<usize>, AttentionTrace)> {
    let stepper = RdnStepper::new(params, regions)?;
    let emitted = greedy_search(&stepper, max_len)?;
    let trace = trace_tokens(params, regions, &emitted)?;
    Ok((strip_eos(&emitted), trace))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    /// Caption tokens, without `<eos>`.
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    /// Ranking score: `log_prob`, or `log_prob` per emitted token with
    /// length normalization.
    pub score: f64,
    /// Whether the hypothesis ended with `<eos>` rather than at `max_len`.
    pub finished: bool,
}

struct Live<S> {
    /// Emitted tokens, `<eos>` included for retired hypotheses.
    tokens: Vec<usize>,
    log_prob: f64,
    state: S,
}

/// Orders by score descending, then token sequence ascending.
fn rank(a_score: f64, a: &[usize], b_score: f64, b: &[usize]) -> Ordering {
    b_score
        .partial_cmp(&a_score)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.cmp(b))
}

/// Beam search over `model`. Each live hypothesis proposes its `beam_size`
/// best next tokens, and the best `beam_size` of all proposals survive. A
/// proposal ending in `<eos>` retires to the finished pool, as does every
/// survivor of the final step. Without length normalization the search stops
/// early once no live hypothesis can beat the pool's `beam_size`-th entry.
///
/// Returns up to `beam_size` hypotheses, best first.
pub fn beam_search<M: StepModel>(
    model: &M,
    beam_size: usize,
    max_len: usize,
    length_norm: bool,
) -> Result<Vec<Hypothesis>> {
    if beam_size == 0 {
        return Err(Error::Domain("beam_size must be at least 1".into()));
    }
    if max_len == 0 {
        return Err(Error::Domain("max_len must be at least 1".into()));
    }
    let score = |h: &Live<M::State>| {
        if length_norm {
            h.log_prob / h.tokens.len() as f64
        } else {
            h.log_prob
        }
    };

    let mut live = vec![Live {
        tokens: Vec::new(),
        log_prob: 0.0,
        state: model.initial_state()?,
    }];
    let mut pool: Vec<Live<M::State>> = Vec::new();
    for step in 0..max_len {
        let mut proposals: Vec<Live<M::State>> = Vec::new();
        for h in &live {
            let prev = h.tokens.last().copied().unwrap_or(BOS);
            let (lp, next) = model.advance(&h.state, prev)?;
            let mut order: Vec<usize> = (0..lp.len()).collect();
            order.sort_by(|&a, &b| {
                lp[b]
                    .partial_cmp(&lp[a])
                    .unwrap_or(Ordering::Equal)
                    .then(a.cmp(&b))
            });
            for &tok in order.iter().take(beam_size) {
                let mut tokens = h.tokens.clone();
                tokens.push(tok);
                proposals.push(Live {
                    tokens,
                    log_prob: h.log_prob + lp[tok],
                    state: next.clone(),
                });
            }
        }
        proposals.sort_by(|a, b| rank(a.log_prob, &a.tokens, b.log_prob, &b.tokens));
        proposals.truncate(beam_size);

        let last_step = step + 1 == max_len;
        live = Vec::with_capacity(beam_size);
        for p in proposals {
            if last_step || p.tokens.last() == Some(&EOS) {
                pool.push(p);
            } else {
                live.push(p);
            }
        }
        if live.is_empty() {
            break;
        }
        if !length_norm && pool.len() >= beam_size {
            pool.sort_by(|a, b| rank(score(a), &a.tokens, score(b), &b.tokens));
            if live[0].log_prob < score(&pool[beam_size - 1]) {
                break;
            }
        }
    }
    pool.sort_by(|a, b| rank(score(a), &a.tokens, score(b), &b.tokens));
    pool.truncate(beam_size);
    Ok(pool
        .into_iter()
        .map(|h| Hypothesis {
            score: score(&h),
            finished: h.tokens.last() == Some(&EOS),
            tokens: strip_eos(&h.tokens),
            log_prob: h.log_prob,
        })
        .collect())
}

/// Beam search with the decoder conditioned on `regions`.
pub fn beam_decode(
    params: &RdnParams,
    regions: &[Tensor],
    beam_size: usize,
    max_len: usize,
    length_norm: bool,
) -> Result<Vec<Hypothesis>> {
    let stepper = RdnStepper::new(params, regions)?;
    beam_search(&stepper, beam_size, max_len, length_norm)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceStep {
    /// 1-based step index.
    pub t: usize,
    /// Token chosen at this step.
    pub token: usize,
    pub alpha_vis: Vec<f64>,
    /// Weights over the `t` history entries; empty without reflective
    /// attention.
    pub alpha_ref: Vec<f64>,
    pub pos_pred: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AttentionTrace {
    pub steps: Vec<TraceStep>,
}

/// Replays `tokens` (as chosen by a decoder) through the model and records
/// the attention weights and position prediction at each step.
pub fn trace_tokens(
    params: &RdnParams,
    regions: &[Tensor],
    tokens: &[usize],
) -> Result<AttentionTrace> {
    if tokens.is_empty() {
        return Ok(AttentionTrace::default());
    }
    let mut tape = Tape::new();
    let rdn = params.bind(&mut tape);
    let image = rdn.prepare_image(&mut tape, regions)?;
    let outs = rdn.forward_teacher(&mut tape, &image, tokens)?;
    let steps = outs
        .iter()
        .zip(tokens)
        .enumerate()
        .map(|(i, (o, &token))| {
            Ok(TraceStep {
                t: i + 1,
                token,
                alpha_vis: tape.value(o.alpha_vis).data().to_vec(),
                alpha_ref: o
                    .alpha_ref
                    .map(|a| tape.value(a).data().to_vec())
                    .unwrap_or_default(),
                pos_pred: tape.scalar(o.pos_pred)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AttentionTrace { steps })
}

/// JSON form of an [`AttentionTrace`], with tokens spelled out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceJson {
    pub steps: Vec<TraceStepJson>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceStepJson {
    pub t: usize,
    pub token: String,
    pub alpha_vis: Vec<f64>,
    pub alpha_ref: Vec<f64>,
    pub pos_pred: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceFormat {
    Json,
    Dot,
}

pub fn export_trace(
    trace: &AttentionTrace,
    vocab: &Vocabulary,
    format: TraceFormat,
) -> Result<String> {
    if trace.steps.is_empty() {
        return Err(Error::Domain("cannot export an empty trace".into()));
    }
    match format {
        TraceFormat::Json => {
            let steps = trace
                .steps
                .iter()
                .map(|s| {
                    Ok(TraceStepJson {
                        t: s.t,
                        token: vocab.token(s.token)?.to_string(),
                        alpha_vis: s.alpha_vis.clone(),
                        alpha_ref: s.alpha_ref.clone(),
                        pos_pred: s.pos_pred,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(serde_json::to_string_pretty(&TraceJson { steps })?)
        }
        TraceFormat::Dot => trace_dot(trace, vocab),
    }
}

/// One node per step and an edge `i -> t` for every reflective weight
/// `α_{i,t}`, with pen width proportional to the weight. The largest weight
/// into each step is drawn red and tagged `class="max"`.
fn trace_dot(trace: &AttentionTrace, vocab: &Vocabulary) -> Result<String> {
    let mut out =
        String::from("digraph reflective_attention {\n  rankdir=LR;\n  node [shape=box];\n");
    for s in &trace.steps {
        let label = serde_json::to_string(&format!("{}: {}", s.t, vocab.token(s.token)?))?;
        writeln!(out, "  s{} [label={label}];", s.t).expect("write to string");
    }
    for s in &trace.steps {
        if s.alpha_ref.is_empty() {
            continue;
        }
        let best = argmax(&s.alpha_ref);
        for (i, &w) in s.alpha_ref.iter().enumerate() {
            let mut attrs = format!("label=\"{w}\", penwidth={:.3}", 0.5 + 4.5 * w);
            if i == best {
                attrs.push_str(", color=red, class=\"max\"");
            }
            writeln!(out, "  s{} -> s{} [{attrs}];", i + 1, s.t).expect("write to string");
        }
    }
    out.push_str("}\n");
    Ok(out)
}

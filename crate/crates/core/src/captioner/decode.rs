//! Greedy and beam-search decoding.

use std::cmp::Ordering;

use crate::error::{HocaError, Result};
use crate::maf::MafOutput;
use crate::tensor::FeatureMatrix;

use super::data::{BOS, EOS};
use super::model::{DecoderState, InferenceParams};

/// A partial or finished caption.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    /// Sum of token log-probabilities.
    pub log_prob: f64,
    pub state: DecoderState,
    pub finished: bool,
}

/// Something that yields next-token log-probabilities for a decoder state.
pub trait StepModel {
    fn initial_state(&self) -> DecoderState;
    /// Returns the new state and `log p(· | prefix)` over the vocabulary.
    fn next(&self, state: &DecoderState, token: usize) -> Result<(DecoderState, Vec<f64>)>;
}

/// A model snapshot bound to one item's encoded features.
pub struct ItemDecoder<'a> {
    pub params: &'a InferenceParams,
    pub encoded: Vec<FeatureMatrix>,
}

impl<'a> ItemDecoder<'a> {
    pub fn new(params: &'a InferenceParams, features: &[FeatureMatrix]) -> Result<Self> {
        Ok(Self {
            params,
            encoded: params.encode(features)?,
        })
    }

    /// Full fusion output for one step, for attention inspection.
    pub fn step_output(&self, state: &DecoderState, token: usize) -> Result<(DecoderState, MafOutput)> {
        self.params.step(&self.encoded, state, token)
    }
}

/// `x − logsumexp(x)`.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    logits.iter().map(|x| x - lse).collect()
}

impl StepModel for ItemDecoder<'_> {
    fn initial_state(&self) -> DecoderState {
        DecoderState::zeros(self.params.hidden())
    }

    fn next(&self, state: &DecoderState, token: usize) -> Result<(DecoderState, Vec<f64>)> {
        let (s, out) = self.params.step(&self.encoded, state, token)?;
        Ok((s, log_softmax(&out.logits)))
    }
}

pub fn best_token(log_probs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in log_probs.iter().enumerate() {
        if x > log_probs[best] {
            best = i;
        }
    }
    best
}

/// Most likely token at every step until EOS or `max_len`; ties go to the
/// lowest id.
pub fn greedy_decode(model: &impl StepModel, max_len: usize) -> Result<Vec<usize>> {
    let mut state = model.initial_state();
    let mut prev = BOS;
    let mut out = Vec::new();
    while out.len() < max_len {
        let (next, lp) = model.next(&state, prev)?;
        let tok = best_token(&lp);
        out.push(tok);
        if tok == EOS {
            break;
        }
        state = next;
        prev = tok;
    }
    Ok(out)
}

/// Higher score first, then lexicographically smaller tokens.
fn rank(a: &Hypothesis, b: &Hypothesis) -> Ordering {
    b.log_prob
        .partial_cmp(&a.log_prob)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.tokens.cmp(&b.tokens))
}

/// Length-unnormalised beam search. Finished hypotheses stay in the beam and
/// compete with active ones; the best finished hypothesis is returned, or the
/// best active one if none finished within `max_len` tokens.
pub fn beam_decode(model: &impl StepModel, width: usize, max_len: usize) -> Result<Hypothesis> {
    if width == 0 {
        return Err(HocaError::Argument("beam width must be at least 1".into()));
    }
    let mut beam = vec![Hypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
        state: model.initial_state(),
        finished: false,
    }];
    for _ in 0..max_len {
        if beam.iter().all(|h| h.finished) {
            break;
        }
        let mut candidates = Vec::new();
        for hyp in beam {
            if hyp.finished {
                candidates.push(hyp);
                continue;
            }
            let prev = hyp.tokens.last().copied().unwrap_or(BOS);
            let (state, lp) = model.next(&hyp.state, prev)?;
            // Zero-probability continuations are never kept.
            for (tok, &l) in lp.iter().enumerate().filter(|(_, l)| **l > f64::NEG_INFINITY) {
                let mut tokens = hyp.tokens.clone();
                tokens.push(tok);
                candidates.push(Hypothesis {
                    tokens,
                    log_prob: hyp.log_prob + l,
                    state: state.clone(),
                    finished: tok == EOS,
                });
            }
        }
        if candidates.is_empty() {
            return Err(HocaError::Numeric("every continuation has zero probability".into()));
        }
        candidates.sort_by(rank);
        candidates.truncate(width);
        beam = candidates;
    }
    let best_finished = beam.iter().filter(|h| h.finished).min_by(|a, b| rank(a, b)).cloned();
    Ok(best_finished.unwrap_or_else(|| beam.into_iter().min_by(rank).expect("beam is never empty")))
}

/// Exhaustive search with the same selection rule as [`beam_decode`]; for
/// tiny vocabularies only.
pub fn enumerate_best(model: &impl StepModel, max_len: usize) -> Result<Hypothesis> {
    let start = Hypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
        state: model.initial_state(),
        finished: false,
    };
    let mut finished = Vec::new();
    let mut frontier = vec![start];
    for _ in 0..max_len {
        let mut next = Vec::new();
        for hyp in frontier {
            let prev = hyp.tokens.last().copied().unwrap_or(BOS);
            let (state, lp) = model.next(&hyp.state, prev)?;
            for (tok, &l) in lp.iter().enumerate().filter(|(_, l)| **l > f64::NEG_INFINITY) {
                let mut tokens = hyp.tokens.clone();
                tokens.push(tok);
                let h = Hypothesis {
                    tokens,
                    log_prob: hyp.log_prob + l,
                    state: state.clone(),
                    finished: tok == EOS,
                };
                if h.finished {
                    finished.push(h);
                } else {
                    next.push(h);
                }
            }
        }
        frontier = next;
    }
    let pool = if finished.is_empty() { frontier } else { finished };
    pool.into_iter()
        .min_by(rank)
        .ok_or_else(|| HocaError::Numeric("every continuation has zero probability".into()))
}

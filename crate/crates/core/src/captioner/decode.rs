//! Greedy and beam search over any next-token distribution.

use std::cmp::Ordering;

use crate::corpus::{BOS, EOS, PAD};
use crate::error::Result;

/// Anything that can score the next token given a prefix starting with BOS.
pub trait StepModel {
    /// Natural-log probabilities over the vocabulary for the token after
    /// `prefix`.
    fn log_probs(&self, prefix: &[usize]) -> Result<Vec<f64>>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecodeMode {
    Greedy,
    Beam(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct BeamHypothesis {
    /// Generated tokens, BOS excluded.
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    pub finished: bool,
}

impl BeamHypothesis {
    /// Log probability per generated token.
    pub fn normalized(&self) -> f64 {
        normalized_score(self.log_prob, self.tokens.len())
    }
}

pub fn normalized_score(log_prob: f64, len: usize) -> f64 {
    if len == 0 {
        log_prob
    } else {
        log_prob / len as f64
    }
}

/// BOS and PAD can never be generated.
fn masked(mut lp: Vec<f64>) -> Vec<f64> {
    for id in [PAD, BOS] {
        if let Some(v) = lp.get_mut(id) {
            *v = f64::NEG_INFINITY;
        }
    }
    lp
}

fn with_bos(tokens: &[usize]) -> Vec<usize> {
    let mut p = Vec::with_capacity(tokens.len() + 1);
    p.push(BOS);
    p.extend_from_slice(tokens);
    p
}

/// Argmax at every step, lowest id on ties, for at most `max_len - 1`
/// tokens.
pub fn greedy<M: StepModel + ?Sized>(model: &M, max_len: usize) -> Result<BeamHypothesis> {
    let mut hyp = BeamHypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
        finished: false,
    };
    while hyp.tokens.len() + 1 < max_len {
        let lp = masked(model.log_probs(&with_bos(&hyp.tokens))?);
        let (best, score) = lp
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
        hyp.tokens.push(best);
        hyp.log_prob += score;
        if best == EOS {
            hyp.finished = true;
            break;
        }
    }
    Ok(hyp)
}

fn better(a: &BeamHypothesis, b: &BeamHypothesis) -> bool {
    a.normalized() > b.normalized()
}

/// Beam search keeping `width` live hypotheses ranked by summed log
/// probability. Hypotheses that emit EOS or reach `max_len` retire; the best
/// retired one by per-token score wins. The greedy path is always a
/// candidate, so the result never scores below it.
pub fn beam_search<M: StepModel + ?Sized>(
    model: &M,
    max_len: usize,
    width: usize,
) -> Result<BeamHypothesis> {
    let width = width.max(1);
    let mut best = greedy(model, max_len)?;
    let mut live = vec![BeamHypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
        finished: false,
    }];
    while !live.is_empty() {
        // (score, hypothesis index, token)
        let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
        for (h, hyp) in live.iter().enumerate() {
            let lp = masked(model.log_probs(&with_bos(&hyp.tokens))?);
            for (tok, v) in lp.into_iter().enumerate() {
                if v > f64::NEG_INFINITY {
                    candidates.push((hyp.log_prob + v, h, tok));
                }
            }
        }
        candidates.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap_or(Ordering::Equal)
                .then(a.1.cmp(&b.1))
                .then(a.2.cmp(&b.2))
        });
        candidates.truncate(width);
        let mut next = Vec::with_capacity(candidates.len());
        for (score, h, tok) in candidates {
            let mut tokens = live[h].tokens.clone();
            tokens.push(tok);
            let finished = tok == EOS;
            let hyp = BeamHypothesis {
                finished,
                tokens,
                log_prob: score,
            };
            if finished || hyp.tokens.len() + 1 >= max_len {
                if better(&hyp, &best) {
                    best = hyp;
                }
            } else {
                next.push(hyp);
            }
        }
        live = next;
    }
    Ok(best)
}

pub fn generate<M: StepModel + ?Sized>(
    model: &M,
    max_len: usize,
    mode: DecodeMode,
) -> Result<BeamHypothesis> {
    match mode {
        DecodeMode::Greedy => greedy(model, max_len),
        DecodeMode::Beam(w) => beam_search(model, max_len, w),
    }
}

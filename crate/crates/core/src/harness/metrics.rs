//! Caption and concept metrics.

use std::collections::HashMap;

use serde::Serialize;

use crate::autodiff::Tape;
use crate::captioner::{greedy, CaptionSample, Captioner};
use crate::corpus::Vocabulary;
use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct EvalReport {
    pub samples: usize,
    /// Teacher-forced next-token accuracy over non-PAD targets.
    pub token_accuracy: f64,
    /// Fraction of greedy captions equal to the reference.
    pub exact_match: f64,
    pub bleu1: f64,
    /// Micro F1 of concept probabilities thresholded at 0.5; zero without a
    /// concept branch.
    pub concept_f1: f64,
    pub total_loss: f64,
    pub cap_loss: f64,
    pub concept_loss: f64,
}

/// Corpus BLEU-1: clipped unigram precision times the brevity penalty.
pub fn bleu1(candidates: &[Vec<String>], references: &[Vec<String>]) -> f64 {
    let mut matched = 0usize;
    let mut cand_len = 0usize;
    let mut ref_len = 0usize;
    for (c, r) in candidates.iter().zip(references) {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for w in r {
            *counts.entry(w).or_default() += 1;
        }
        for w in c {
            if let Some(n) = counts.get_mut(w.as_str()) {
                if *n > 0 {
                    *n -= 1;
                    matched += 1;
                }
            }
        }
        cand_len += c.len();
        ref_len += r.len();
    }
    if cand_len == 0 {
        return 0.0;
    }
    let precision = matched as f64 / cand_len as f64;
    let bp = if cand_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    };
    precision * bp
}

/// Micro-averaged F1 of `probs >= threshold` against binary labels; 1 when
/// there is nothing to find and nothing was predicted.
pub fn concept_f1(probs: &[Vec<f64>], labels: &[Vec<f64>], threshold: f64) -> f64 {
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (p, y) in probs.iter().zip(labels) {
        for (&p, &y) in p.iter().zip(y) {
            match (p >= threshold, y > 0.5) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                (false, false) => {}
            }
        }
    }
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        1.0
    } else {
        2.0 * tp as f64 / denom as f64
    }
}

fn words(vocab: &Vocabulary, ids: &[usize]) -> Vec<String> {
    ids.iter()
        .filter(|&&i| !Vocabulary::is_special(i))
        .map(|&i| vocab.word(i).to_string())
        .collect()
}

struct SampleEval {
    correct: usize,
    count: usize,
    exact: bool,
    total: f64,
    cap: f64,
    concept: f64,
    generated: Vec<usize>,
    probs: Option<Vec<f64>>,
}

fn evaluate_one(model: &Captioner, s: &CaptionSample) -> Result<SampleEval> {
    let mut tape = Tape::new();
    let out = model.forward_train(&mut tape, s)?;
    let prepared = model.prepare(&s.features)?;
    let hyp = greedy(&model.conditioned(&prepared), model.config.max_caption_len)?;
    Ok(SampleEval {
        correct: out.correct,
        count: out.count,
        exact: hyp.tokens == s.caption[1..],
        total: out.total,
        cap: out.cap,
        concept: out.concept,
        generated: hyp.tokens,
        probs: prepared.concept_probs,
    })
}

/// Runs `f` over `items` on up to `threads` scoped threads, keeping order.
pub(crate) fn parallel_map<T: Sync, U: Send>(
    items: &[T],
    threads: usize,
    f: impl Fn(&T) -> Result<U> + Sync,
) -> Result<Vec<U>> {
    let threads = threads.clamp(1, items.len().max(1));
    if threads == 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(threads);
    let f = &f;
    std::thread::scope(|scope| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|part| scope.spawn(move || part.iter().map(f).collect::<Result<Vec<U>>>()))
            .collect();
        let mut out = Vec::with_capacity(items.len());
        for h in handles {
            out.extend(h.join().map_err(|_| Error::Invalid("worker thread panicked".into()))??);
        }
        Ok(out)
    })
}

/// Teacher-forced accuracy and losses, greedy exact match and BLEU-1, and
/// concept F1 over `data`. Samples may be spread over `threads` threads;
/// the result does not depend on the thread count.
pub fn evaluate(model: &Captioner, data: &[CaptionSample], threads: usize) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    let per = parallel_map(data, threads, |s| evaluate_one(model, s))?;
    let n = data.len() as f64;
    let correct: usize = per.iter().map(|e| e.correct).sum();
    let count: usize = per.iter().map(|e| e.count).sum();
    let vocab = model.vocab();
    let cands: Vec<Vec<String>> = per.iter().map(|e| words(vocab, &e.generated)).collect();
    let refs: Vec<Vec<String>> = data.iter().map(|s| words(vocab, &s.caption)).collect();
    let concept_f1 = if model.config.uses_concepts() {
        let probs: Vec<Vec<f64>> = per.iter().map(|e| e.probs.clone().unwrap_or_default()).collect();
        let labels: Vec<Vec<f64>> = data.iter().map(|s| s.concept_labels.clone()).collect();
        concept_f1(&probs, &labels, 0.5)
    } else {
        0.0
    };
    Ok(EvalReport {
        samples: data.len(),
        token_accuracy: if count == 0 { 0.0 } else { correct as f64 / count as f64 },
        exact_match: per.iter().filter(|e| e.exact).count() as f64 / n,
        bleu1: bleu1(&cands, &refs),
        concept_f1,
        total_loss: per.iter().map(|e| e.total).sum::<f64>() / n,
        cap_loss: per.iter().map(|e| e.cap).sum::<f64>() / n,
        concept_loss: per.iter().map(|e| e.concept).sum::<f64>() / n,
    })
}

/// Greedy exact-match rate alone, cheaper than a full [`evaluate`].
pub fn exact_match(model: &Captioner, data: &[CaptionSample], threads: usize) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    let hits = parallel_map(data, threads, |s| {
        let prepared = model.prepare(&s.features)?;
        let hyp = greedy(&model.conditioned(&prepared), model.config.max_caption_len)?;
        Ok(hyp.tokens == s.caption[1..])
    })?;
    Ok(hits.iter().filter(|&&h| h).count() as f64 / data.len() as f64)
}

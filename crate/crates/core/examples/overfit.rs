//! Trains the structured captioner on a small synthetic set until it
//! reproduces the training captions.
//!
//! cargo run --release --example overfit [samples] [max_epochs]

use std::time::Instant;

use conceptcap::captioner::{Captioner, ModelConfig};
use conceptcap::harness::{
    build_artifacts, evaluate, generate_dataset, to_samples, train, StopTarget, SyntheticSpec,
    TrainConfig,
};

fn main() -> conceptcap::Result<()> {
    let mut args = std::env::args().skip(1);
    let samples: usize = args.next().and_then(|a| a.parse().ok()).unwrap_or(200);
    let epochs: usize = args.next().and_then(|a| a.parse().ok()).unwrap_or(300);

    let data = generate_dataset(&SyntheticSpec {
        n_samples: samples,
        ..SyntheticSpec::default()
    })?;
    let (vocab, concepts, lexicon) = build_artifacts(&data.records, 3, 0.5, 1)?;
    let set = to_samples(&data.records, &vocab, &concepts)?;
    println!(
        "{} samples, vocabulary {}, concepts {}, lexicon pairs {}",
        set.len(),
        vocab.len(),
        concepts.len(),
        lexicon.len()
    );

    let config = ModelConfig {
        top_k: 4,
        ..ModelConfig::default()
    };
    let mut model = Captioner::new(config, vocab, concepts, lexicon)?;
    println!("{} parameters", model.store.num_scalars());
    let start = Instant::now();
    let log = train(
        &mut model,
        &set,
        &TrainConfig {
            epochs,
            stop: Some(StopTarget {
                token_accuracy: 0.95,
                exact_match: 0.9,
            }),
            ..TrainConfig::default()
        },
    )?;
    for e in &log.epochs {
        println!(
            "epoch {:3}  loss {:.4}  cap {:.4}  concept {:.4}  token acc {:.3}",
            e.epoch, e.total_loss, e.cap_loss, e.concept_loss, e.token_acc
        );
    }
    let report = evaluate(&model, &set, 1)?;
    println!(
        "after {} epochs ({:.1?}): token accuracy {:.4}, exact match {:.4}, BLEU-1 {:.4}, concept F1 {:.4}",
        log.epochs.len(),
        start.elapsed(),
        report.token_accuracy,
        report.exact_match,
        report.bleu1,
        report.concept_f1
    );
    Ok(())
}

//! Trains a small captioner briefly and compares greedy decoding with beam
//! search of several widths on held-out images.
//!
//! cargo run --release --example beam_search [epochs]

use conceptcap::captioner::{Captioner, DecodeMode, ModelConfig};
use conceptcap::corpus::{BOS, EOS};
use conceptcap::harness::{build_artifacts, generate_dataset, to_samples, train, SyntheticSpec, TrainConfig};

fn main() -> conceptcap::Result<()> {
    let epochs: usize = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(10);
    let data = generate_dataset(&SyntheticSpec {
        n_samples: 210,
        ..SyntheticSpec::default()
    })?;
    let (train_recs, test_recs) = data.records.split_at(200);
    let (vocab, concepts, lexicon) = build_artifacts(train_recs, 3, 0.5, 1)?;
    let train_set = to_samples(train_recs, &vocab, &concepts)?;
    let test_set = to_samples(test_recs, &vocab, &concepts)?;
    let config = ModelConfig {
        top_k: 4,
        ..ModelConfig::default()
    };
    let mut model = Captioner::new(config, vocab, concepts, lexicon)?;
    train(
        &mut model,
        &train_set,
        &TrainConfig {
            epochs,
            ..TrainConfig::default()
        },
    )?;

    let words = |ids: &[usize]| {
        let ids: Vec<usize> = ids.iter().copied().filter(|&t| t != BOS && t != EOS).collect();
        model.vocab().decode(&ids)
    };
    for sample in &test_set {
        println!("reference  {}", words(&sample.caption));
        for mode in [DecodeMode::Greedy, DecodeMode::Beam(3), DecodeMode::Beam(8)] {
            let h = model.generate(&sample.features, mode)?;
            println!("{:<10} {}  ({:.3})", format!("{mode:?}"), words(&h.tokens), h.normalized());
        }
        println!();
    }
    Ok(())
}

//! Builds a PMI lexicon from a caption corpus and prints the strongest pairs.
//!
//! cargo run --release --example pmi_lexicon [corpus.txt] [window] [threshold]
//!
//! Without a corpus file, a synthetic one is generated.

use std::fs;

use conceptcap::corpus::lexicon_from_captions;
use conceptcap::harness::{generate_dataset, SyntheticSpec};

fn main() -> conceptcap::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let captions: Vec<String> = match args.first() {
        Some(path) => fs::read_to_string(path)?.lines().map(str::to_string).collect(),
        None => generate_dataset(&SyntheticSpec {
            n_samples: 1000,
            ..SyntheticSpec::default()
        })?
        .captions(),
    };
    let window = args.get(1).and_then(|a| a.parse().ok()).unwrap_or(3);
    let threshold = args.get(2).and_then(|a| a.parse().ok()).unwrap_or(0.5);

    let (vocab, concepts, lexicon) = lexicon_from_captions(&captions, window, threshold, 1)?;
    println!(
        "{} captions, {} words, {} concepts, {} pairs with PMI >= {threshold}",
        captions.len(),
        vocab.len(),
        concepts.len(),
        lexicon.len()
    );
    let mut pairs: Vec<_> = lexicon.iter().collect();
    pairs.sort_by(|a, b| b.1.total_cmp(&a.1));
    for ((a, b), score) in pairs.into_iter().take(15) {
        println!("{:>12} -> {:<12} {score:.4}", vocab.word(a), vocab.word(b));
    }
    Ok(())
}

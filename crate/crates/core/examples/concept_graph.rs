//! Builds the lexicon graph over a handful of concepts, runs a randomly
//! initialised W-GCN over it and prints the edges with their attention.
//!
//! cargo run --release --example concept_graph [n_concepts]

use conceptcap::autodiff::{ParamStore, Tape, Tensor};
use conceptcap::corpus::lexicon_from_captions;
use conceptcap::harness::{generate_dataset, SyntheticSpec};
use conceptcap::wgcn::{build_adjacency, wgcn_forward_with_attention, WgcnParams};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> conceptcap::Result<()> {
    let k: usize = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(6);
    let data = generate_dataset(&SyntheticSpec {
        n_samples: 1000,
        ..SyntheticSpec::default()
    })?;
    let (vocab, concepts, lexicon) = lexicon_from_captions(&data.captions(), 3, 0.5, 1)?;
    let nodes: Vec<usize> = concepts.ids().iter().copied().take(k).collect();
    let graph = build_adjacency(&nodes, &lexicon)?;

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let d = 16;
    let mut store = ParamStore::new();
    let params = WgcnParams::new(&mut store, "gcn", d, 2, false, &mut rng)?;
    let mut tape = Tape::new();
    let x = tape.leaf(&Tensor::uniform(&[nodes.len(), d], 1.0, &mut rng));
    let (out, attention) = wgcn_forward_with_attention(&mut tape, &store, x, &graph, &params)?;
    let alpha = tape.value(attention[0]).to_vec();

    let n = graph.len();
    let edges = graph.support().iter().filter(|&&s| s).count();
    println!("{n} nodes, {edges} edges including self-loops");
    for i in 0..n {
        for j in 0..n {
            if let Some(tag) = graph.tag(i, j) {
                println!(
                    "{:>10} -> {:<10} {:<6} alpha {:.3}",
                    vocab.word(nodes[i]),
                    vocab.word(nodes[j]),
                    tag.as_str(),
                    alpha[i * n + j]
                );
            }
        }
    }
    println!("output shape {:?}", tape.shape(out));
    Ok(())
}

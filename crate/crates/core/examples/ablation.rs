//! Compares the baseline, concept-only and structured captioners on held-out
//! synthetic data over several seeds.
//!
//! cargo run --release --example ablation [arms] [seeds] [epochs] [train] [holdout] [noise] [prior] [beta] [top_k]

use conceptcap::captioner::ModelConfig;
use conceptcap::harness::{parse_arms, run_ablation, AblationSpec, SyntheticSpec, TrainConfig};

fn main() -> conceptcap::Result<()> {
    let mut args = std::env::args().skip(1);
    let arms = parse_arms(&args.next().unwrap_or_else(|| "baseline,cp,cp_wgcn".into()))?;
    let seeds: u64 = args.next().and_then(|a| a.parse().ok()).unwrap_or(3);
    let epochs: usize = args.next().and_then(|a| a.parse().ok()).unwrap_or(100);
    let n_train: usize = args.next().and_then(|a| a.parse().ok()).unwrap_or(100);
    let holdout: usize = args.next().and_then(|a| a.parse().ok()).unwrap_or(1000);
    let noise_std: f64 = args.next().and_then(|a| a.parse().ok()).unwrap_or(1.0);
    let prior_weight: f64 = args.next().and_then(|a| a.parse().ok()).unwrap_or(0.9);
    let beta: f64 = args.next().and_then(|a| a.parse().ok()).unwrap_or(1.0);
    let top_k: usize = args.next().and_then(|a| a.parse().ok()).unwrap_or(4);

    let spec = AblationSpec {
        data: SyntheticSpec {
            n_samples: n_train,
            noise_std,
            prior_weight,
            ..SyntheticSpec::default()
        },
        holdout,
        model: ModelConfig {
            d_model: 32,
            ffn_dim: 64,
            gcn_layers: 1,
            top_k,
            beta,
            ..ModelConfig::default()
        },
        train: TrainConfig {
            epochs,
            ..TrainConfig::default()
        },
        arms,
        seeds: (0..seeds).collect(),
        min_freq: 1,
        threads: 1,
    };
    let report = run_ablation(&spec)?;
    report.write_tsv(std::io::stdout().lock())?;
    Ok(())
}

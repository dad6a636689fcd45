//! Synthetic data, training, evaluation, ablations and the gradient-check
//! suite.

pub mod ablation;
pub mod data;
pub mod gradsuite;
pub mod metrics;
pub mod synthetic;
pub mod train;

pub use ablation::{parse_arms, run_ablation, AblationReport, AblationSpec, Arm, MeanStd};
pub use data::{build_artifacts, read_jsonl, to_samples, write_jsonl};
pub use metrics::{bleu1, concept_f1, evaluate, exact_match, EvalReport};
pub use synthetic::{generate_dataset, Grammar, Record, SyntheticData, SyntheticSpec};
pub use train::{train, Adam, EpochLog, Optimizer, StopTarget, TrainConfig, TrainLog};

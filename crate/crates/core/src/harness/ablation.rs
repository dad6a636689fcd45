//! Side-by-side training of model variants on shared data and seeds.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use super::data::{build_artifacts, to_samples};
use super::metrics::{evaluate, parallel_map, EvalReport};
use super::synthetic::{generate_dataset, SyntheticSpec};
use super::train::{train, TrainConfig};
use crate::captioner::{Captioner, GraphMode, ModelConfig, Variant};
use crate::error::{invalid, Error, Result};

/// One configuration under comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct Arm {
    pub name: String,
    pub variant: Variant,
    pub graph: GraphMode,
    /// Lexicon threshold override.
    pub threshold: Option<f64>,
}

impl Arm {
    pub fn new(variant: Variant, graph: GraphMode, threshold: Option<f64>) -> Self {
        let name = match (variant, graph, threshold) {
            (Variant::Structured, GraphMode::Lexicon, Some(t)) => format!("threshold={t}"),
            (Variant::Structured, GraphMode::Lexicon, None) | (Variant::Baseline, ..) | (Variant::ConceptOnly, ..) => {
                variant.to_string()
            }
            (Variant::Structured, g, _) => g.to_string(),
        };
        Self {
            name,
            variant,
            graph,
            threshold,
        }
    }
}

impl FromStr for Arm {
    type Err = Error;

    /// `baseline`, `cp`, `cp_wgcn`, `random`, `one_for_all` (or `1-for-all`),
    /// `mlp`, or `threshold=T`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if let Some(t) = s.strip_prefix("threshold=") {
            let t: f64 = t
                .parse()
                .map_err(|_| Error::Parse(format!("bad threshold in arm `{s}`")))?;
            return Ok(Self::new(Variant::Structured, GraphMode::Lexicon, Some(t)));
        }
        match s {
            "baseline" | "cp" | "cp_wgcn" => Ok(Self::new(s.parse()?, GraphMode::Lexicon, None)),
            _ => Ok(Self::new(Variant::Structured, s.parse()?, None)),
        }
    }
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name)
    }
}

pub fn parse_arms(list: &str) -> Result<Vec<Arm>> {
    list.split(',').filter(|s| !s.trim().is_empty()).map(str::parse).collect()
}

#[derive(Clone, Debug)]
pub struct AblationSpec {
    /// `n_samples` is the training-set size; the seed is replaced per run.
    pub data: SyntheticSpec,
    pub holdout: usize,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub arms: Vec<Arm>,
    pub seeds: Vec<u64>,
    pub min_freq: usize,
    pub threads: usize,
}

#[derive(Clone, Debug)]
pub struct RunResult {
    pub arm: String,
    pub seed: u64,
    pub report: EvalReport,
    pub checksum: u64,
    pub epochs: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Mean and sample standard deviation; zero spread for one value.
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Self { mean, std }
    }
}

impl fmt::Display for MeanStd {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.4}±{:.4}", self.mean, self.std)
    }
}

#[derive(Clone, Debug)]
pub struct AblationReport {
    pub arms: Vec<String>,
    pub runs: Vec<RunResult>,
}

const COLUMNS: [&str; 5] = ["token_accuracy", "exact_match", "bleu1", "concept_f1", "cap_loss"];

fn metrics(r: &EvalReport) -> [f64; 5] {
    [r.token_accuracy, r.exact_match, r.bleu1, r.concept_f1, r.cap_loss]
}

impl AblationReport {
    pub fn runs_for<'a>(&'a self, arm: &'a str) -> impl Iterator<Item = &'a RunResult> + 'a {
        self.runs.iter().filter(move |r| r.arm == arm)
    }

    pub fn aggregate(&self, arm: &str) -> [MeanStd; 5] {
        let rows: Vec<[f64; 5]> = self.runs_for(arm).map(|r| metrics(&r.report)).collect();
        std::array::from_fn(|c| MeanStd::of(&rows.iter().map(|r| r[c]).collect::<Vec<_>>()))
    }

    pub fn mean_exact_match(&self, arm: &str) -> f64 {
        self.aggregate(arm)[1].mean
    }

    /// One row per run, then one `mean±std` row per arm.
    pub fn write_tsv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "arm\tseed\t{}", COLUMNS.join("\t"))?;
        for r in &self.runs {
            let cells: Vec<String> = metrics(&r.report).iter().map(|v| format!("{v:.4}")).collect();
            writeln!(w, "{}\t{}\t{}", r.arm, r.seed, cells.join("\t"))?;
        }
        for arm in &self.arms {
            let cells: Vec<String> = self.aggregate(arm).iter().map(MeanStd::to_string).collect();
            writeln!(w, "{arm}\tmean±std\t{}", cells.join("\t"))?;
        }
        Ok(())
    }
}

fn run_one(spec: &AblationSpec, arm: &Arm, seed: u64) -> Result<RunResult> {
    let data_spec = SyntheticSpec {
        n_samples: spec.data.n_samples + spec.holdout,
        seed,
        ..spec.data.clone()
    };
    let data = generate_dataset(&data_spec)?;
    let (train_recs, test_recs) = data.records.split_at(spec.data.n_samples);
    let threshold = arm.threshold.unwrap_or(spec.model.threshold);
    let (vocab, cv, lex) = build_artifacts(train_recs, spec.model.window, threshold, spec.min_freq)?;
    let train_set = to_samples(train_recs, &vocab, &cv)?;
    let test_set = to_samples(test_recs, &vocab, &cv)?;
    let config = ModelConfig {
        variant: arm.variant,
        graph: arm.graph,
        threshold,
        feature_dim: spec.data.feature_dim,
        seed,
        ..spec.model.clone()
    };
    let mut model = Captioner::new(config, vocab, cv, lex)?;
    let tc = TrainConfig {
        seed,
        threads: 1,
        ..spec.train.clone()
    };
    let log = train(&mut model, &train_set, &tc)?;
    let eval_set = if test_set.is_empty() { &train_set } else { &test_set };
    let report = evaluate(&model, eval_set, 1)?;
    log::info!(
        "arm {} seed {seed}: exact match {:.4}, token acc {:.4}",
        arm.name,
        report.exact_match,
        report.token_accuracy
    );
    Ok(RunResult {
        arm: arm.name.clone(),
        seed,
        report,
        checksum: model.store.checksum(),
        epochs: log.epochs.len(),
    })
}

/// Trains and evaluates every arm on every seed. Runs with the same seed
/// share data and initialisation. Rows come out arm-major whatever the
/// thread count.
pub fn run_ablation(spec: &AblationSpec) -> Result<AblationReport> {
    if spec.arms.is_empty() {
        return invalid("at least one arm is required");
    }
    if spec.seeds.is_empty() {
        return invalid("at least one seed is required");
    }
    let mut names: Vec<String> = Vec::new();
    for a in &spec.arms {
        if names.contains(&a.name) {
            return invalid(format!("arm `{}` listed twice", a.name));
        }
        names.push(a.name.clone());
    }
    let jobs: Vec<(&Arm, u64)> = spec
        .arms
        .iter()
        .flat_map(|a| spec.seeds.iter().map(move |&s| (a, s)))
        .collect();
    let runs = parallel_map(&jobs, spec.threads, |(arm, seed)| run_one(spec, arm, *seed))?;
    Ok(AblationReport { arms: names, runs })
}

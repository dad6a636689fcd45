//! Command-line entry point.
//!
//! Logs go to stderr, results to stdout. Exit status is 0 on success, 1 on a
//! usage error and 2 when a command fails at run time.

use std::fs::File;
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use crate::atomic::write_atomic;
use crate::autodiff::Tensor;
use crate::captioner::{self, DecodeMode, GraphMode, ModelConfig, Variant};
use crate::corpus::{lexicon_from_captions, DEFAULT_THRESHOLD, DEFAULT_WINDOW};
use crate::error::{Error, Result};
use crate::harness::{
    build_artifacts, evaluate, generate_dataset, gradsuite, parse_arms, read_jsonl,
    run_ablation, to_samples, train, write_jsonl, AblationSpec, Optimizer, StopTarget,
    SyntheticSpec, TrainConfig,
};

#[derive(Debug, Parser)]
#[command(name = "conceptcap", version, about = "Concept-structured image captioning toolkit")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Seed for every random choice.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads for evaluation and ablation arms.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
    /// Suppress log output.
    #[arg(long, short, global = true)]
    pub quiet: bool,
    /// key=value model settings; flags given on the command line win.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build a PMI word-pair lexicon from a caption corpus.
    BuildLexicon(BuildLexiconArgs),
    /// Write a synthetic dataset as line-delimited JSON.
    GenData(GenDataArgs),
    /// Train a captioner and write a model directory.
    Train(TrainArgs),
    /// Score a model directory on a dataset.
    Evaluate(EvaluateArgs),
    /// Caption every image of a dataset.
    Generate(GenerateArgs),
    /// Run finite-difference gradient checks.
    Gradcheck(GradcheckArgs),
    /// Compare model variants over several seeds.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
pub struct BuildLexiconArgs {
    /// UTF-8 text, one caption per line.
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, default_value_t = DEFAULT_WINDOW)]
    pub window: usize,
    #[arg(long, default_value_t = DEFAULT_THRESHOLD, allow_negative_numbers = true)]
    pub threshold: f64,
    #[arg(long = "min-freq", visible_alias = "min_freq", default_value_t = 1)]
    pub min_freq: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Upper bound on distinct concept words (11 to 25).
    #[arg(long = "n-concepts", visible_alias = "n_concepts")]
    pub n_concepts: Option<usize>,
    /// Caption templates in use (1 to 3).
    #[arg(long = "n-templates", visible_alias = "n_templates")]
    pub n_templates: Option<usize>,
    #[arg(long = "grid-size", visible_alias = "grid_size")]
    pub grid_size: Option<usize>,
    #[arg(long = "noise-std", visible_alias = "noise_std")]
    pub noise_std: Option<f64>,
    /// Probability that a verb takes its most common object.
    #[arg(long = "prior-weight", visible_alias = "prior_weight")]
    pub prior_weight: Option<f64>,
}

impl DataArgs {
    fn apply(&self, spec: &mut SyntheticSpec) {
        set(&mut spec.n_concepts, self.n_concepts);
        set(&mut spec.n_templates, self.n_templates);
        set(&mut spec.grid_size, self.grid_size);
        set(&mut spec.noise_std, self.noise_std);
        set(&mut spec.prior_weight, self.prior_weight);
    }
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the captions, one per line.
    #[arg(long = "corpus-out", visible_alias = "corpus_out")]
    pub corpus_out: Option<PathBuf>,
    #[arg(long, default_value_t = 200)]
    pub samples: usize,
    #[arg(long = "feature-dim", visible_alias = "feature_dim", default_value_t = 32)]
    pub feature_dim: usize,
    #[command(flatten)]
    pub data: DataArgs,
}

/// One flag per model setting; vocabulary sizes come from the data.
#[derive(Debug, Default, Args)]
pub struct ModelArgs {
    #[arg(long = "d-model", visible_alias = "d_model")]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long = "ffn-dim", visible_alias = "ffn_dim")]
    pub ffn_dim: Option<usize>,
    #[arg(long = "encoder-layers", visible_alias = "encoder_layers")]
    pub encoder_layers: Option<usize>,
    #[arg(long = "concept-layers", visible_alias = "concept_layers")]
    pub concept_layers: Option<usize>,
    #[arg(long = "decoder-layers", visible_alias = "decoder_layers")]
    pub decoder_layers: Option<usize>,
    #[arg(long = "query-count", visible_alias = "query_count")]
    pub query_count: Option<usize>,
    #[arg(long = "gcn-layers", visible_alias = "gcn_layers")]
    pub gcn_layers: Option<usize>,
    #[arg(long = "max-caption-len", visible_alias = "max_caption_len")]
    pub max_caption_len: Option<usize>,
    #[arg(long = "top-k", visible_alias = "top_k")]
    pub top_k: Option<usize>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long = "beam-size", visible_alias = "beam_size")]
    pub beam_size: Option<usize>,
    #[arg(long = "asl-gamma-pos", visible_alias = "asl_gamma_pos")]
    pub asl_gamma_pos: Option<f64>,
    #[arg(long = "asl-gamma-neg", visible_alias = "asl_gamma_neg")]
    pub asl_gamma_neg: Option<f64>,
    #[arg(long = "asl-clip", visible_alias = "asl_clip")]
    pub asl_clip: Option<f64>,
    #[arg(long)]
    pub window: Option<usize>,
    #[arg(long, allow_negative_numbers = true)]
    pub threshold: Option<f64>,
    /// baseline, cp or cp_wgcn.
    #[arg(long)]
    pub variant: Option<Variant>,
    /// lexicon, random, one_for_all or mlp.
    #[arg(long)]
    pub graph: Option<GraphMode>,
    /// Feed ground-truth concepts to the graph during training.
    #[arg(long = "gt-concepts", visible_alias = "gt_concepts")]
    pub gt_concepts: Option<bool>,
    /// Score words against the token embeddings.
    #[arg(long = "tie-output", visible_alias = "tie_output")]
    pub tie_output: Option<bool>,
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

impl ModelArgs {
    fn apply(&self, c: &mut ModelConfig) {
        set(&mut c.d_model, self.d_model);
        set(&mut c.heads, self.heads);
        set(&mut c.ffn_dim, self.ffn_dim);
        set(&mut c.encoder_layers, self.encoder_layers);
        set(&mut c.concept_layers, self.concept_layers);
        set(&mut c.decoder_layers, self.decoder_layers);
        set(&mut c.query_count, self.query_count);
        set(&mut c.gcn_layers, self.gcn_layers);
        set(&mut c.max_caption_len, self.max_caption_len);
        set(&mut c.top_k, self.top_k);
        set(&mut c.beta, self.beta);
        set(&mut c.beam_size, self.beam_size);
        set(&mut c.asl_gamma_pos, self.asl_gamma_pos);
        set(&mut c.asl_gamma_neg, self.asl_gamma_neg);
        set(&mut c.asl_clip, self.asl_clip);
        set(&mut c.window, self.window);
        set(&mut c.threshold, self.threshold);
        set(&mut c.variant, self.variant);
        set(&mut c.graph, self.graph);
        set(&mut c.gt_concepts, self.gt_concepts);
        set(&mut c.tie_output, self.tie_output);
    }
}

#[derive(Debug, Args)]
pub struct OptimArgs {
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    /// adam or sgd.
    #[arg(long, default_value_t = Optimizer::Adam)]
    pub optimizer: Optimizer,
    #[arg(long = "batch-size", visible_alias = "batch_size", default_value_t = 1)]
    pub batch_size: usize,
    #[arg(long = "clip-norm", visible_alias = "clip_norm", default_value_t = 5.0)]
    pub clip_norm: f64,
    /// Stop once the epoch token accuracy reaches this value...
    #[arg(long = "stop-token-acc", visible_alias = "stop_token_acc", requires = "stop_exact_match")]
    pub stop_token_acc: Option<f64>,
    /// ...and greedy exact match on the training set reaches this one.
    #[arg(long = "stop-exact-match", visible_alias = "stop_exact_match", requires = "stop_token_acc")]
    pub stop_exact_match: Option<f64>,
}

impl OptimArgs {
    fn config(&self, seed: u64, threads: usize) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            lr: self.lr,
            optimizer: self.optimizer,
            batch_size: self.batch_size,
            clip_norm: self.clip_norm,
            seed,
            stop: self.stop_token_acc.zip(self.stop_exact_match).map(|(t, e)| StopTarget {
                token_accuracy: t,
                exact_match: e,
            }),
            threads,
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Line-delimited JSON dataset.
    #[arg(long)]
    pub data: PathBuf,
    /// Model directory to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Minimum count for a concept word.
    #[arg(long = "min-freq", visible_alias = "min_freq", default_value_t = 1)]
    pub min_freq: usize,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub optim: OptimArgs,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Model directory written by `train`.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Also write the JSON report here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Beam width; 1 decodes greedily. Defaults to the model's beam_size.
    #[arg(long = "beam-size", visible_alias = "beam_size")]
    pub beam_size: Option<usize>,
    /// Caption only the first N images.
    #[arg(long)]
    pub limit: Option<usize>,
    /// Write the concept graph and first-layer attention of one image.
    #[arg(long = "graph-out", visible_alias = "graph_out")]
    pub graph_out: Option<PathBuf>,
    /// Image whose graph is written.
    #[arg(long = "graph-index", visible_alias = "graph_index", default_value_t = 0)]
    pub graph_index: usize,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Run every registered suite.
    #[arg(long, conflicts_with = "suite")]
    pub all: bool,
    /// Run one suite by name.
    #[arg(long, value_parser = clap::builder::PossibleValuesParser::new(gradsuite::SUITES))]
    pub suite: Option<String>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    /// Comma-separated arms: baseline, cp, cp_wgcn, random, one_for_all, mlp,
    /// threshold=T.
    #[arg(long, default_value = "baseline,cp,cp_wgcn")]
    pub arms: String,
    /// Number of seeds, counted up from --seed.
    #[arg(long, default_value_t = 3)]
    pub seeds: u64,
    /// Training samples per run.
    #[arg(long, default_value_t = 200)]
    pub samples: usize,
    /// Held-out evaluation samples per run; 0 evaluates on the training set.
    #[arg(long, default_value_t = 200)]
    pub holdout: usize,
    #[arg(long = "feature-dim", visible_alias = "feature_dim", default_value_t = 32)]
    pub feature_dim: usize,
    #[arg(long = "min-freq", visible_alias = "min_freq", default_value_t = 1)]
    pub min_freq: usize,
    /// TSV report; printed to stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub optim: OptimArgs,
}

/// Parses `args` (program name first), runs the command and returns the
/// exit status.
pub fn run<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    init_logging(cli.global.quiet);
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e}");
            1
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            2
        }
    }
}

pub fn main() -> ExitCode {
    ExitCode::from(run(std::env::args_os()))
}

fn init_logging(quiet: bool) {
    let mut builder =
        env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"));
    if quiet {
        builder.filter_level(log::LevelFilter::Off);
    }
    builder.format_timestamp(None).target(env_logger::Target::Stderr);
    let _ = builder.try_init();
}

enum Failure {
    Usage(Error),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

fn usage<T>(r: Result<T>) -> std::result::Result<T, Failure> {
    r.map_err(Failure::Usage)
}

fn dispatch(cli: &Cli) -> std::result::Result<(), Failure> {
    let g = &cli.global;
    match &cli.command {
        Command::BuildLexicon(a) => build_lexicon_cmd(a),
        Command::GenData(a) => gen_data_cmd(g, a),
        Command::Train(a) => train_cmd(g, a),
        Command::Evaluate(a) => evaluate_cmd(g, a),
        Command::Generate(a) => generate_cmd(a),
        Command::Gradcheck(a) => gradcheck_cmd(g, a),
        Command::Ablate(a) => ablate_cmd(g, a),
    }
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::Io(io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    open(path)?.lines().map(|l| l.map_err(Error::from)).collect()
}

/// Defaults, then the --config file, then flags.
fn model_config(g: &GlobalArgs, flags: &ModelArgs) -> Result<ModelConfig> {
    let mut c = ModelConfig::default();
    if let Some(path) = &g.config {
        c.apply(open(path)?)?;
    }
    flags.apply(&mut c);
    c.seed = g.seed;
    Ok(c)
}

fn check_threshold(t: f64) -> Result<()> {
    if t.is_nan() {
        return Err(Error::Invalid("threshold must not be NaN".into()));
    }
    Ok(())
}

fn build_lexicon_cmd(a: &BuildLexiconArgs) -> std::result::Result<(), Failure> {
    usage(check_threshold(a.threshold))?;
    if a.window == 0 || a.min_freq == 0 {
        return Err(Failure::Usage(Error::Invalid("window and min-freq must be at least 1".into())));
    }
    let captions = read_lines(&a.corpus)?;
    let (vocab, concepts, lexicon) = lexicon_from_captions(&captions, a.window, a.threshold, a.min_freq)?;
    write_atomic(&a.out, |w| lexicon.write_tsv(&vocab, w))?;
    log::info!(
        "{} captions, {} words, {} concepts, {} pairs",
        captions.len(),
        vocab.len(),
        concepts.len(),
        lexicon.len()
    );
    println!("{}", lexicon.len());
    Ok(())
}

fn gen_data_cmd(g: &GlobalArgs, a: &GenDataArgs) -> std::result::Result<(), Failure> {
    let mut spec = SyntheticSpec {
        n_samples: a.samples,
        feature_dim: a.feature_dim,
        seed: g.seed,
        ..SyntheticSpec::default()
    };
    a.data.apply(&mut spec);
    usage(spec.validate())?;
    let data = generate_dataset(&spec)?;
    write_atomic(&a.out, |w| write_jsonl(&data.records, w))?;
    if let Some(path) = &a.corpus_out {
        write_atomic(path, |w| Ok(w.write_all(data.corpus().as_bytes())?))?;
    }
    log::info!("{} samples over {} concepts", data.records.len(), data.grammar.concepts().len());
    Ok(())
}

fn train_cmd(g: &GlobalArgs, a: &TrainArgs) -> std::result::Result<(), Failure> {
    let mut config = usage(model_config(g, &a.model))?;
    let tc = a.optim.config(g.seed, g.threads);
    usage(tc.validate())?;
    usage(check_threshold(config.threshold))?;
    let records = read_jsonl(open(&a.data)?)?;
    let (vocab, concepts, lexicon) = build_artifacts(&records, config.window, config.threshold, a.min_freq)?;
    let data = to_samples(&records, &vocab, &concepts)?;
    config.feature_dim = data[0].features.shape()[1];
    config.vocab_size = vocab.len();
    config.concept_vocab_size = concepts.len();
    usage(config.validate())?;
    let mut model = captioner::Captioner::new(config, vocab, concepts, lexicon)?;
    let log = train(&mut model, &data, &tc)?;
    captioner::save(&model, &a.out)?;
    write_atomic(&a.out.join("train_log.csv"), |w| log.write_csv(w))?;
    if let Some(last) = log.last() {
        println!(
            "epochs={} total_loss={:.6} token_acc={:.4} checksum={:016x}",
            last.epoch,
            last.total_loss,
            last.token_acc,
            model.store.checksum()
        );
    }
    Ok(())
}

fn load_dataset(model: &captioner::Captioner, path: &Path) -> Result<Vec<captioner::CaptionSample>> {
    let records = read_jsonl(open(path)?)?;
    to_samples(&records, model.vocab(), model.concept_vocab())
}

fn evaluate_cmd(g: &GlobalArgs, a: &EvaluateArgs) -> std::result::Result<(), Failure> {
    let model = captioner::load(&a.model)?;
    let data = load_dataset(&model, &a.data)?;
    let report = evaluate(&model, &data, g.threads)?;
    let json = serde_json::to_string_pretty(&report).map_err(Error::from)?;
    if let Some(path) = &a.out {
        write_atomic(path, |w| Ok(writeln!(w, "{json}")?))?;
    }
    println!("{json}");
    Ok(())
}

fn generate_cmd(a: &GenerateArgs) -> std::result::Result<(), Failure> {
    if a.beam_size == Some(0) {
        return Err(Failure::Usage(Error::Invalid("beam-size must be at least 1".into())));
    }
    let model = captioner::load(&a.model)?;
    let data = load_dataset(&model, &a.data)?;
    let width = a.beam_size.unwrap_or(model.config.beam_size);
    let mode = if width == 1 { DecodeMode::Greedy } else { DecodeMode::Beam(width) };
    let n = a.limit.unwrap_or(data.len()).min(data.len());
    if a.graph_out.is_some() && a.graph_index >= n {
        return Err(Failure::Usage(Error::Invalid(format!(
            "graph-index {} is outside the {n} captioned images",
            a.graph_index
        ))));
    }
    let stdout = io::stdout();
    let mut out = stdout.lock();
    writeln!(out, "index\tcaption\treference\tlog_prob").map_err(Error::from)?;
    for (i, s) in data.iter().take(n).enumerate() {
        let prepared = model.prepare(&s.features)?;
        let hyp = captioner::generate(&model.conditioned(&prepared), model.config.max_caption_len, mode)?;
        writeln!(
            out,
            "{i}\t{}\t{}\t{:.6}",
            model.vocab().decode(&hyp.tokens),
            model.vocab().decode(&s.caption),
            hyp.log_prob
        )
        .map_err(Error::from)?;
        if i == a.graph_index {
            if let Some(path) = &a.graph_out {
                write_graph(&model, &prepared, path)?;
            }
        }
    }
    Ok(())
}

fn write_graph(model: &captioner::Captioner, prepared: &captioner::PreparedImage, path: &Path) -> Result<()> {
    let graph = prepared
        .graph
        .as_ref()
        .ok_or_else(|| Error::Invalid("this model has no concept graph".into()))?;
    let alpha: &Tensor = prepared
        .attention
        .first()
        .ok_or_else(|| Error::Invalid("no graph attention recorded".into()))?;
    write_atomic(path, |w| graph.write_tsv(model.vocab(), alpha.data(), w))
}

fn gradcheck_cmd(g: &GlobalArgs, a: &GradcheckArgs) -> std::result::Result<(), Failure> {
    let results = match (&a.suite, a.all) {
        (Some(name), _) => vec![gradsuite::run_suite(name, g.seed)?],
        (None, true) => gradsuite::run_all(g.seed)?,
        (None, false) => {
            return Err(Failure::Usage(Error::Invalid("pass --all or --suite NAME".into())));
        }
    };
    let mut all_passed = true;
    println!("suite\tmax_rel_err\ttolerance\tresult");
    for r in &results {
        all_passed &= r.passed();
        println!(
            "{}\t{:.3e}\t{:.0e}\t{}",
            r.name,
            r.max_rel_err,
            r.tolerance,
            if r.passed() { "pass" } else { "FAIL" }
        );
    }
    if all_passed {
        Ok(())
    } else {
        Err(Failure::Runtime(Error::Invalid("gradient check failed".into())))
    }
}

fn ablate_cmd(g: &GlobalArgs, a: &AblateArgs) -> std::result::Result<(), Failure> {
    let arms = usage(parse_arms(&a.arms))?;
    if a.seeds == 0 {
        return Err(Failure::Usage(Error::Invalid("seeds must be at least 1".into())));
    }
    let mut data = SyntheticSpec {
        n_samples: a.samples,
        feature_dim: a.feature_dim,
        ..SyntheticSpec::default()
    };
    a.data.apply(&mut data);
    usage(data.validate())?;
    let model = usage(model_config(g, &a.model))?;
    let train = a.optim.config(g.seed, 1);
    usage(train.validate())?;
    for arm in &arms {
        usage(check_threshold(arm.threshold.unwrap_or(model.threshold)))?;
    }
    let spec = AblationSpec {
        data,
        holdout: a.holdout,
        model,
        train,
        arms,
        seeds: (g.seed..g.seed + a.seeds).collect(),
        min_freq: a.min_freq,
        threads: g.threads,
    };
    let report = run_ablation(&spec)?;
    match &a.out {
        Some(path) => write_atomic(path, |w| report.write_tsv(w))?,
        None => report.write_tsv(io::stdout().lock())?,
    }
    for arm in &report.arms {
        log::info!("{arm}: exact match {:.4}", report.mean_exact_match(arm));
    }
    Ok(())
}

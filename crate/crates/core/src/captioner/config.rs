use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use crate::autodiff::AsymmetricLossParams;
use crate::corpus::{DEFAULT_THRESHOLD, DEFAULT_WINDOW};
use crate::error::{invalid, Error, Result};

/// Which parts of the concept branch are active.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Variant {
    /// Decoder attends to visual features only; no concept branch.
    Baseline,
    /// Predicted concept features go straight to the decoder.
    ConceptOnly,
    /// Predicted concepts pass through the W-GCN first.
    Structured,
}

/// How the concept graph is built for the structured variant.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum GraphMode {
    Lexicon,
    Random,
    OneForAll,
    Mlp,
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Self::Baseline),
            "cp" => Ok(Self::ConceptOnly),
            "cp_wgcn" => Ok(Self::Structured),
            _ => Err(Error::Parse(format!("unknown variant `{s}`"))),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Baseline => "baseline",
            Self::ConceptOnly => "cp",
            Self::Structured => "cp_wgcn",
        })
    }
}

impl FromStr for GraphMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lexicon" => Ok(Self::Lexicon),
            "random" => Ok(Self::Random),
            "one_for_all" | "1-for-all" => Ok(Self::OneForAll),
            "mlp" => Ok(Self::Mlp),
            _ => Err(Error::Parse(format!("unknown graph mode `{s}`"))),
        }
    }
}

impl fmt::Display for GraphMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Lexicon => "lexicon",
            Self::Random => "random",
            Self::OneForAll => "one_for_all",
            Self::Mlp => "mlp",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub d_model: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub encoder_layers: usize,
    pub concept_layers: usize,
    pub decoder_layers: usize,
    pub query_count: usize,
    pub gcn_layers: usize,
    pub feature_dim: usize,
    pub vocab_size: usize,
    pub concept_vocab_size: usize,
    pub max_caption_len: usize,
    pub top_k: usize,
    pub beta: f64,
    pub beam_size: usize,
    pub asl_gamma_pos: f64,
    pub asl_gamma_neg: f64,
    pub asl_clip: f64,
    pub window: usize,
    pub threshold: f64,
    pub variant: Variant,
    pub graph: GraphMode,
    pub gt_concepts: bool,
    /// Score output words against the token embedding table.
    pub tie_output: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let asl = AsymmetricLossParams::default();
        Self {
            d_model: 64,
            heads: 4,
            ffn_dim: 128,
            encoder_layers: 1,
            concept_layers: 1,
            decoder_layers: 2,
            query_count: 17,
            gcn_layers: 2,
            feature_dim: 32,
            vocab_size: 0,
            concept_vocab_size: 0,
            max_caption_len: 16,
            top_k: 17,
            beta: 1.0,
            beam_size: 3,
            asl_gamma_pos: asl.gamma_pos,
            asl_gamma_neg: asl.gamma_neg,
            asl_clip: asl.clip,
            window: DEFAULT_WINDOW,
            threshold: DEFAULT_THRESHOLD,
            variant: Variant::Structured,
            graph: GraphMode::Lexicon,
            gt_concepts: false,
            tie_output: true,
            seed: 0,
        }
    }
}

/// Declares the key=value field table once for reading and writing.
macro_rules! config_fields {
    ($($field:ident),* $(,)?) => {
        impl ModelConfig {
            pub const KEYS: &'static [&'static str] = &[$(stringify!($field)),*];

            /// Sets one field from its text form.
            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $(stringify!($field) => {
                        self.$field = value.trim().parse().map_err(|_| {
                            Error::Parse(format!("bad value `{value}` for `{key}`"))
                        })?;
                    })*
                    _ => return Err(Error::Parse(format!("unknown config key `{key}`"))),
                }
                Ok(())
            }

            pub fn entries(&self) -> Vec<(&'static str, String)> {
                vec![$((stringify!($field), self.$field.to_string())),*]
            }
        }
    };
}

config_fields!(
    d_model,
    heads,
    ffn_dim,
    encoder_layers,
    concept_layers,
    decoder_layers,
    query_count,
    gcn_layers,
    feature_dim,
    vocab_size,
    concept_vocab_size,
    max_caption_len,
    top_k,
    beta,
    beam_size,
    asl_gamma_pos,
    asl_gamma_neg,
    asl_clip,
    window,
    threshold,
    variant,
    graph,
    gt_concepts,
    tie_output,
    seed,
);

impl ModelConfig {
    /// Sizes reported for the full-scale model.
    pub fn paper() -> Self {
        Self {
            d_model: 512,
            heads: 8,
            ffn_dim: 2048,
            encoder_layers: 3,
            concept_layers: 6,
            decoder_layers: 6,
            feature_dim: 2048,
            max_caption_len: 20,
            ..Self::default()
        }
    }

    pub fn asl(&self) -> AsymmetricLossParams {
        AsymmetricLossParams {
            gamma_pos: self.asl_gamma_pos,
            gamma_neg: self.asl_gamma_neg,
            clip: self.asl_clip,
            ..AsymmetricLossParams::default()
        }
    }

    pub fn uses_concepts(&self) -> bool {
        self.variant != Variant::Baseline
    }

    /// Number of concept nodes handed to the decoder.
    pub fn effective_top_k(&self) -> usize {
        self.top_k.min(self.concept_vocab_size).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("d_model", self.d_model),
            ("heads", self.heads),
            ("ffn_dim", self.ffn_dim),
            ("encoder_layers", self.encoder_layers),
            ("concept_layers", self.concept_layers),
            ("decoder_layers", self.decoder_layers),
            ("query_count", self.query_count),
            ("gcn_layers", self.gcn_layers),
            ("feature_dim", self.feature_dim),
            ("vocab_size", self.vocab_size),
            ("max_caption_len", self.max_caption_len),
            ("top_k", self.top_k),
            ("beam_size", self.beam_size),
            ("window", self.window),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return invalid(format!("{name} must be at least 1"));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return invalid(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.heads
            ));
        }
        if self.uses_concepts() && self.concept_vocab_size == 0 {
            return invalid("concept_vocab_size must be at least 1");
        }
        if self.max_caption_len < 2 {
            return invalid("max_caption_len must leave room for BOS and one token");
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return invalid(format!("beta must be a finite value >= 0, got {}", self.beta));
        }
        if !(self.threshold.is_finite()) {
            return invalid("threshold must be finite");
        }
        Ok(())
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        for (k, v) in self.entries() {
            writeln!(w, "{k}={v}")?;
        }
        Ok(())
    }

    /// Applies every `key=value` line of `r` on top of `self`. Blank lines
    /// and lines starting with `#` are skipped.
    pub fn apply<R: BufRead>(&mut self, r: R) -> Result<()> {
        for (n, line) in r.lines().enumerate() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Parse(format!("line {}: expected key=value", n + 1)))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn read<R: BufRead>(r: R) -> Result<Self> {
        let mut c = Self::default();
        c.apply(r)?;
        Ok(c)
    }
}

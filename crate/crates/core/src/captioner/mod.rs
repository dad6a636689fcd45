//! The captioning model: visual encoder, concept predictor with learnable
//! queries, concept graph and W-GCN, and a decoder whose cross-attention sums
//! a visual stream and a concept stream.

pub mod config;
pub mod decode;
pub mod io;
pub mod model;

pub use config::{GraphMode, ModelConfig, Variant};
pub use decode::{beam_search, generate, greedy, BeamHypothesis, DecodeMode, StepModel};
pub use io::{load, save};
pub use model::{
    argmax, log_softmax, select_concepts, total_loss, CaptionSample, Captioner, ConceptPrediction,
    PreparedImage, TrainOutput,
};

#[cfg(test)]
mod tests;

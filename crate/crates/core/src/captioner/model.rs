use std::cmp::Ordering;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{GraphMode, ModelConfig, Variant};
use super::decode::{generate, BeamHypothesis, DecodeMode, StepModel};
use crate::autodiff::nn::{causal_mask, FeedForward, LayerNorm, Linear, MultiHeadAttention};
use crate::autodiff::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::corpus::{extract_concept_labels, ConceptVocabulary, PmiLexicon, Vocabulary, BOS, PAD};
use crate::error::{invalid, Error, Result};
use crate::wgcn::{
    build_adjacency, build_adjacency_ablation, wgcn_forward_with_attention, AblationGraph,
    ConceptGraph, WgcnParams,
};

#[derive(Clone, Debug, PartialEq)]
pub struct CaptionSample {
    /// Flattened visual grid, `[S, d_feat]`.
    pub features: Tensor,
    /// Token ids, BOS first and EOS last.
    pub caption: Vec<usize>,
    /// Multi-hot over the concept vocabulary.
    pub concept_labels: Vec<f64>,
}

impl CaptionSample {
    pub fn new(features: Tensor, caption: Vec<usize>, cv: &ConceptVocabulary) -> Self {
        let concept_labels = extract_concept_labels(&caption, cv);
        Self {
            features,
            caption,
            concept_labels,
        }
    }

    /// Word ids of the concepts marked in the labels.
    pub fn concept_ids(&self, cv: &ConceptVocabulary) -> Vec<usize> {
        self.concept_labels
            .iter()
            .enumerate()
            .filter(|(_, &y)| y > 0.5)
            .map(|(i, _)| cv.word_id(i))
            .collect()
    }
}

/// The `top_k` concept word ids by probability, ties to the lower word id.
pub fn select_concepts(probs: &[f64], cv: &ConceptVocabulary, top_k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..probs.len().min(cv.len())).collect();
    order.sort_by(|&a, &b| {
        probs[b]
            .partial_cmp(&probs[a])
            .unwrap_or(Ordering::Equal)
            .then(cv.word_id(a).cmp(&cv.word_id(b)))
    });
    order.truncate(top_k.max(1));
    order.into_iter().map(|i| cv.word_id(i)).collect()
}

pub fn total_loss(cap: f64, concept: f64, beta: f64) -> f64 {
    cap + beta * concept
}

#[derive(Clone, Debug)]
struct EncoderBlock {
    attn: MultiHeadAttention,
    norm1: LayerNorm,
    ffn: FeedForward,
    norm2: LayerNorm,
}

#[derive(Clone, Debug)]
struct ConceptBlock {
    cross: MultiHeadAttention,
    norm1: LayerNorm,
    ffn: FeedForward,
    norm2: LayerNorm,
}

#[derive(Clone, Debug)]
struct DecoderLayer {
    self_attn: MultiHeadAttention,
    norm1: LayerNorm,
    visual: MultiHeadAttention,
    concept: Option<MultiHeadAttention>,
    norm2: LayerNorm,
    ffn: FeedForward,
    norm3: LayerNorm,
}

#[derive(Clone, Debug)]
struct ConceptBranch {
    queries: ParamId,
    blocks: Vec<ConceptBlock>,
    head_hidden: Linear,
    head_out: Linear,
    wgcn: Option<WgcnParams>,
}

/// Word scores from the final decoder state.
#[derive(Clone, Debug)]
enum Output {
    Free(Linear),
    /// Dot products with the token embeddings plus a bias.
    Tied(ParamId),
}

#[derive(Clone, Debug)]
struct Network {
    input: Linear,
    encoder: Vec<EncoderBlock>,
    concept: Option<ConceptBranch>,
    token_embedding: ParamId,
    position_embedding: ParamId,
    decoder: Vec<DecoderLayer>,
    output: Output,
}

/// Outputs of the concept predictor on one image.
#[derive(Clone, Copy, Debug)]
pub struct ConceptPrediction {
    /// `[K]` probabilities.
    pub probs: Var,
    /// `[Q, K]` per-query scores.
    pub scores: Var,
    /// `[Q, d]` refined queries.
    pub query_features: Var,
}

/// Structured concept features for one image, plus what produced them.
#[derive(Clone, Debug)]
pub struct ConceptContext {
    pub concepts: Vec<usize>,
    pub graph: Option<ConceptGraph>,
    pub features: Var,
    /// Per-layer W-GCN attention, empty without the W-GCN.
    pub attention: Vec<Var>,
}

#[derive(Clone, Copy, Debug)]
pub struct TrainOutput {
    pub loss: Var,
    pub total: f64,
    pub cap: f64,
    pub concept: f64,
    pub correct: usize,
    pub count: usize,
}

#[derive(Clone, Debug)]
pub struct Captioner {
    pub config: ModelConfig,
    pub store: ParamStore,
    net: Network,
    vocab: Vocabulary,
    concepts: ConceptVocabulary,
    lexicon: PmiLexicon,
}

impl Captioner {
    /// Fresh model. `vocab_size` and `concept_vocab_size` are taken from the
    /// vocabularies.
    pub fn new(
        mut config: ModelConfig,
        vocab: Vocabulary,
        concepts: ConceptVocabulary,
        lexicon: PmiLexicon,
    ) -> Result<Self> {
        config.vocab_size = vocab.len();
        config.concept_vocab_size = concepts.len();
        config.validate()?;
        let mut store = ParamStore::new();
        // one stream per component, so variants share the weights they have
        // in common
        let stream = |part: u64| ChaCha8Rng::seed_from_u64(config.seed.wrapping_mul(4).wrapping_add(part));
        let (d, h, f) = (config.d_model, config.heads, config.ffn_dim);
        let rng = &mut stream(0);

        let input = Linear::new(&mut store, "input", config.feature_dim, d, rng);
        let mut encoder = Vec::new();
        for l in 0..config.encoder_layers {
            let p = format!("encoder.{l}");
            encoder.push(EncoderBlock {
                attn: MultiHeadAttention::new(&mut store, &format!("{p}.attn"), d, h, rng)?,
                norm1: LayerNorm::new(&mut store, &format!("{p}.norm1"), d),
                ffn: FeedForward::new(&mut store, &format!("{p}.ffn"), d, f, rng),
                norm2: LayerNorm::new(&mut store, &format!("{p}.norm2"), d),
            });
        }

        let concept = if config.uses_concepts() {
            let rng = &mut stream(1);
            let queries = store.uniform("concept.queries", &[config.query_count, d], d, rng);
            let mut blocks = Vec::new();
            for l in 0..config.concept_layers {
                let p = format!("concept.{l}");
                blocks.push(ConceptBlock {
                    cross: MultiHeadAttention::new(&mut store, &format!("{p}.cross"), d, h, rng)?,
                    norm1: LayerNorm::new(&mut store, &format!("{p}.norm1"), d),
                    ffn: FeedForward::new(&mut store, &format!("{p}.ffn"), d, f, rng),
                    norm2: LayerNorm::new(&mut store, &format!("{p}.norm2"), d),
                });
            }
            let head_hidden = Linear::new(&mut store, "concept.head.hidden", d, d, rng);
            let head_out = Linear::new(&mut store, "concept.head.out", d, concepts.len(), rng);
            let wgcn = match config.variant {
                Variant::Structured => Some(WgcnParams::new(
                    &mut store,
                    "wgcn",
                    d,
                    config.gcn_layers,
                    config.graph == GraphMode::Mlp,
                    rng,
                )?),
                _ => None,
            };
            Some(ConceptBranch {
                queries,
                blocks,
                head_hidden,
                head_out,
                wgcn,
            })
        } else {
            None
        };

        let rng = &mut stream(2);
        let concept_rng = &mut stream(3);
        let token_embedding = store.uniform("decoder.token_embedding", &[vocab.len(), d], d, rng);
        let position_embedding =
            store.uniform("decoder.position_embedding", &[config.max_caption_len, d], d, rng);
        let mut decoder = Vec::new();
        for l in 0..config.decoder_layers {
            let p = format!("decoder.{l}");
            decoder.push(DecoderLayer {
                self_attn: MultiHeadAttention::new(&mut store, &format!("{p}.self"), d, h, rng)?,
                norm1: LayerNorm::new(&mut store, &format!("{p}.norm1"), d),
                visual: MultiHeadAttention::new(&mut store, &format!("{p}.visual"), d, h, rng)?,
                concept: if config.uses_concepts() {
                    Some(MultiHeadAttention::new(
                        &mut store,
                        &format!("{p}.concept"),
                        d,
                        h,
                        concept_rng,
                    )?)
                } else {
                    None
                },
                norm2: LayerNorm::new(&mut store, &format!("{p}.norm2"), d),
                ffn: FeedForward::new(&mut store, &format!("{p}.ffn"), d, f, rng),
                norm3: LayerNorm::new(&mut store, &format!("{p}.norm3"), d),
            });
        }
        let output = if config.tie_output {
            Output::Tied(store.zeros("decoder.output.bias", &[vocab.len()]))
        } else {
            Output::Free(Linear::new(&mut store, "decoder.output", d, vocab.len(), rng))
        };

        Ok(Self {
            config,
            store,
            net: Network {
                input,
                encoder,
                concept,
                token_embedding,
                position_embedding,
                decoder,
                output,
            },
            vocab,
            concepts,
            lexicon,
        })
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn concept_vocab(&self) -> &ConceptVocabulary {
        &self.concepts
    }

    pub fn lexicon(&self) -> &PmiLexicon {
        &self.lexicon
    }

    /// `[S, d_feat] -> [S, d_model]`: input projection then post-norm
    /// self-attention blocks.
    pub fn visual_encode(&self, store: &ParamStore, tape: &mut Tape, features: Var) -> Result<Var> {
        let shape = tape.shape(features).to_vec();
        if shape.len() != 2 || shape[0] == 0 || shape[1] != self.config.feature_dim {
            return Err(Error::ShapeMismatch {
                op: "visual_encode",
                lhs: shape,
                rhs: vec![self.config.feature_dim],
            });
        }
        let mut h = self.net.input.forward(tape, store, features)?;
        for b in &self.net.encoder {
            let a = b.attn.forward(tape, store, h, h, h, None)?;
            let r = tape.add(h, a)?;
            h = b.norm1.forward(tape, store, r)?;
            let f = b.ffn.forward(tape, store, h)?;
            let r = tape.add(h, f)?;
            h = b.norm2.forward(tape, store, r)?;
        }
        Ok(h)
    }

    fn branch(&self) -> Result<&ConceptBranch> {
        self.net
            .concept
            .as_ref()
            .ok_or_else(|| Error::Invalid("baseline model has no concept branch".into()))
    }

    /// Queries cross-attend to the encoded grid; a sigmoid perceptron scores
    /// every concept per query and the max over queries is the probability.
    pub fn predict_concepts(
        &self,
        store: &ParamStore,
        tape: &mut Tape,
        visual: Var,
    ) -> Result<ConceptPrediction> {
        let branch = self.branch()?;
        let mut q = tape.param(store, branch.queries);
        for b in &branch.blocks {
            let a = b.cross.forward(tape, store, q, visual, visual, None)?;
            let r = tape.add(q, a)?;
            q = b.norm1.forward(tape, store, r)?;
            let f = b.ffn.forward(tape, store, q)?;
            let r = tape.add(q, f)?;
            q = b.norm2.forward(tape, store, r)?;
        }
        let hidden = branch.head_hidden.forward(tape, store, q)?;
        let hidden = tape.relu(hidden)?;
        let logits = branch.head_out.forward(tape, store, hidden)?;
        let scores = tape.sigmoid(logits)?;
        let probs = tape.max_rows(scores)?;
        Ok(ConceptPrediction {
            probs,
            scores,
            query_features: q,
        })
    }

    /// Graph over `concepts` according to the configured mode.
    pub fn concept_graph(&self, concepts: &[usize]) -> Result<ConceptGraph> {
        let seed = concepts.iter().fold(self.config.seed ^ 0x9e37_79b9_7f4a_7c15, |h, &c| {
            (h ^ c as u64).wrapping_mul(0x0100_0000_01b3)
        });
        match self.config.graph {
            GraphMode::Lexicon => build_adjacency(concepts, &self.lexicon),
            GraphMode::Random => build_adjacency_ablation(concepts, AblationGraph::Random, seed),
            GraphMode::OneForAll => {
                build_adjacency_ablation(concepts, AblationGraph::OneForAll, seed)
            }
            GraphMode::Mlp => build_adjacency_ablation(concepts, AblationGraph::Mlp, seed),
        }
    }

    /// Node features for the selected concepts: the decoder's embedding of
    /// the concept word plus the refined query that scored it highest.
    /// Passed through the W-GCN in the structured variant.
    pub fn concept_context(
        &self,
        store: &ParamStore,
        tape: &mut Tape,
        prediction: &ConceptPrediction,
        concepts: Vec<usize>,
    ) -> Result<ConceptContext> {
        let branch = self.branch()?;
        let best_query = tape
            .max_rows_argmax(prediction.probs)
            .expect("probabilities come from max_rows")
            .to_vec();
        let rows: Vec<usize> = concepts
            .iter()
            .map(|&w| {
                self.concepts
                    .index_of(w)
                    .map(|i| best_query[i])
                    .ok_or_else(|| Error::Invalid(format!("word {w} is not a concept")))
            })
            .collect::<Result<_>>()?;
        let table = tape.param(store, self.net.token_embedding);
        let words = tape.gather_rows(table, &concepts)?;
        let words = tape.scale(words, (self.config.d_model as f64).sqrt())?;
        let pooled = tape.gather_rows(prediction.query_features, &rows)?;
        let nodes = tape.add(words, pooled)?;
        match &branch.wgcn {
            Some(params) => {
                let graph = self.concept_graph(&concepts)?;
                let (features, attention) =
                    wgcn_forward_with_attention(tape, store, nodes, &graph, params)?;
                Ok(ConceptContext {
                    concepts,
                    graph: Some(graph),
                    features,
                    attention,
                })
            }
            None => Ok(ConceptContext {
                concepts,
                graph: None,
                features: nodes,
                attention: Vec::new(),
            }),
        }
    }

    /// Teacher-forced logits `[T, V]` for every position of `tokens`.
    pub fn decode(
        &self,
        store: &ParamStore,
        tape: &mut Tape,
        tokens: &[usize],
        visual: Var,
        concepts: Option<Var>,
    ) -> Result<Var> {
        let t = tokens.len();
        if t == 0 {
            return Err(Error::Empty("decoder prefix"));
        }
        if t > self.config.max_caption_len {
            return invalid(format!(
                "prefix of {t} tokens exceeds max_caption_len {}",
                self.config.max_caption_len
            ));
        }
        let table = tape.param(store, self.net.token_embedding);
        let emb = tape.gather_rows(table, tokens)?;
        let positions = tape.param(store, self.net.position_embedding);
        let pos = tape.gather_rows(positions, &(0..t).collect::<Vec<_>>())?;
        let mut x = tape.add(emb, pos)?;
        let mask = causal_mask(t);
        for layer in &self.net.decoder {
            let a = layer.self_attn.forward(tape, store, x, x, x, Some(&mask))?;
            let r = tape.add(x, a)?;
            x = layer.norm1.forward(tape, store, r)?;

            let v = layer.visual.forward(tape, store, x, visual, visual, None)?;
            let mut r = tape.add(x, v)?;
            if let (Some(attn), Some(c)) = (&layer.concept, concepts) {
                let c = attn.forward(tape, store, x, c, c, None)?;
                r = tape.add(r, c)?;
            }
            x = layer.norm2.forward(tape, store, r)?;

            let f = layer.ffn.forward(tape, store, x)?;
            let r = tape.add(x, f)?;
            x = layer.norm3.forward(tape, store, r)?;
        }
        match &self.net.output {
            Output::Free(linear) => linear.forward(tape, store, x),
            Output::Tied(bias) => {
                let table = tape.param(store, self.net.token_embedding);
                let t = tape.transpose(table)?;
                let logits = tape.matmul(x, t)?;
                let b = tape.param(store, *bias);
                tape.add(logits, b)
            }
        }
    }

    /// Logits `[V]` for the token after `prefix`.
    pub fn decode_step(
        &self,
        store: &ParamStore,
        tape: &mut Tape,
        prefix: &[usize],
        visual: Var,
        concepts: Option<Var>,
    ) -> Result<Var> {
        let logits = self.decode(store, tape, prefix, visual, concepts)?;
        let last = tape.gather_rows(logits, &[prefix.len() - 1])?;
        tape.reshape(last, &[self.config.vocab_size])
    }

    fn check_sample(&self, sample: &CaptionSample) -> Result<()> {
        let n = sample.caption.len();
        if n < 2 || sample.caption[0] != BOS {
            return invalid("caption must start with BOS and hold at least one more token");
        }
        if n > self.config.max_caption_len {
            return invalid(format!(
                "caption of {n} tokens exceeds max_caption_len {}",
                self.config.max_caption_len
            ));
        }
        if self.config.uses_concepts() && sample.concept_labels.len() != self.concepts.len() {
            return invalid("concept labels do not match the concept vocabulary");
        }
        Ok(())
    }

    /// The whole training graph for one sample: encoder, concept loss,
    /// concept selection, graph, W-GCN and the teacher-forced caption loss.
    pub fn forward_train_with(
        &self,
        store: &ParamStore,
        tape: &mut Tape,
        sample: &CaptionSample,
    ) -> Result<TrainOutput> {
        self.check_sample(sample)?;
        let features = tape.leaf(&sample.features);
        let visual = self.visual_encode(store, tape, features)?;

        let (concept_loss, context) = if self.config.uses_concepts() {
            let pred = self.predict_concepts(store, tape, visual)?;
            let loss = tape.asymmetric_loss(pred.probs, &sample.concept_labels, self.config.asl())?;
            let mut chosen = if self.config.gt_concepts {
                sample.concept_ids(&self.concepts)
            } else {
                Vec::new()
            };
            if chosen.is_empty() {
                chosen =
                    select_concepts(tape.value(pred.probs), &self.concepts, self.config.effective_top_k());
            }
            let ctx = self.concept_context(store, tape, &pred, chosen)?;
            (Some(loss), Some(ctx.features))
        } else {
            (None, None)
        };

        let n = sample.caption.len();
        let inputs = &sample.caption[..n - 1];
        let targets = &sample.caption[1..];
        let logits = self.decode(store, tape, inputs, visual, context)?;
        let cap = tape.cross_entropy(logits, targets, PAD)?;

        let v = self.config.vocab_size;
        let mut correct = 0;
        let mut count = 0;
        for (row, &t) in tape.value(logits).chunks(v).zip(targets) {
            if t == PAD {
                continue;
            }
            count += 1;
            if argmax(row) == t {
                correct += 1;
            }
        }

        let (loss, concept) = match concept_loss {
            Some(c) => {
                let weighted = tape.scale(c, self.config.beta)?;
                (tape.add(cap, weighted)?, tape.scalar(c))
            }
            None => (cap, 0.0),
        };
        let cap_value = tape.scalar(cap);
        Ok(TrainOutput {
            loss,
            total: tape.scalar(loss),
            cap: cap_value,
            concept,
            correct,
            count,
        })
    }

    pub fn forward_train(&self, tape: &mut Tape, sample: &CaptionSample) -> Result<TrainOutput> {
        self.forward_train_with(&self.store, tape, sample)
    }

    /// Concept probabilities for one image; `None` for the baseline.
    pub fn concept_probs(&self, features: &Tensor) -> Result<Option<Vec<f64>>> {
        if !self.config.uses_concepts() {
            return Ok(None);
        }
        let mut tape = Tape::new();
        let f = tape.leaf(features);
        let v = self.visual_encode(&self.store, &mut tape, f)?;
        let pred = self.predict_concepts(&self.store, &mut tape, v)?;
        Ok(Some(tape.value(pred.probs).to_vec()))
    }

    /// Runs everything up to the decoder once so generation can reuse it.
    pub fn prepare(&self, features: &Tensor) -> Result<PreparedImage> {
        let mut tape = Tape::new();
        let f = tape.leaf(features);
        let visual = self.visual_encode(&self.store, &mut tape, f)?;
        let mut prepared = PreparedImage {
            visual: tape.tensor(visual),
            concepts: None,
            concept_probs: None,
            selected: Vec::new(),
            graph: None,
            attention: Vec::new(),
        };
        if self.config.uses_concepts() {
            let pred = self.predict_concepts(&self.store, &mut tape, visual)?;
            let probs = tape.value(pred.probs).to_vec();
            let chosen = select_concepts(&probs, &self.concepts, self.config.effective_top_k());
            let ctx = self.concept_context(&self.store, &mut tape, &pred, chosen)?;
            prepared.concepts = Some(tape.tensor(ctx.features));
            prepared.concept_probs = Some(probs);
            prepared.selected = ctx.concepts;
            prepared.graph = ctx.graph;
            prepared.attention = ctx.attention.iter().map(|&a| tape.tensor(a)).collect();
        }
        Ok(prepared)
    }

    pub fn conditioned<'a>(&'a self, prepared: &'a PreparedImage) -> Conditioned<'a> {
        Conditioned {
            model: self,
            prepared,
        }
    }

    /// Caption tokens after BOS, ending in EOS unless the length cap hit.
    pub fn generate(&self, features: &Tensor, mode: DecodeMode) -> Result<BeamHypothesis> {
        let prepared = self.prepare(features)?;
        generate(&self.conditioned(&prepared), self.config.max_caption_len, mode)
    }
}

/// Encoder output and concept context for one image.
#[derive(Clone, Debug)]
pub struct PreparedImage {
    pub visual: Tensor,
    pub concepts: Option<Tensor>,
    pub concept_probs: Option<Vec<f64>>,
    pub selected: Vec<usize>,
    pub graph: Option<ConceptGraph>,
    pub attention: Vec<Tensor>,
}

pub struct Conditioned<'a> {
    model: &'a Captioner,
    prepared: &'a PreparedImage,
}

impl StepModel for Conditioned<'_> {
    fn log_probs(&self, prefix: &[usize]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let v = tape.leaf(&self.prepared.visual);
        let c = self.prepared.concepts.as_ref().map(|c| tape.leaf(c));
        let logits = self.model.decode_step(&self.model.store, &mut tape, prefix, v, c)?;
        Ok(log_softmax(tape.value(logits)))
    }
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z = logits.iter().map(|x| (x - max).exp()).sum::<f64>().ln() + max;
    logits.iter().map(|x| x - z).collect()
}

/// Index of the largest value, lowest index on ties.
pub fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |acc, (i, &x)| if x > acc.1 { (i, x) } else { acc })
        .0
}

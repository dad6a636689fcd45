//! Concept graphs and the attention-weighted graph convolution.
//!
//! A [`ConceptGraph`] connects concept words that appear as an ordered pair
//! in the PMI lexicon. Every edge carries a direction tag: from node `i`'s
//! point of view, a neighbour that tends to follow it in text sits to its
//! `Right`, one that tends to precede it to its `Left`. Each W-GCN layer
//! scores edges with a tag-specific bilinear form, normalises the scores over
//! the neighbourhood, and aggregates `W h_j + b` with those weights before
//! layer norm and ReLU.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::nn::{LayerNorm, Linear};
use crate::autodiff::{ParamId, ParamStore, Tape, Var};
use crate::corpus::{PmiLexicon, Vocabulary};
use crate::error::{invalid, Error, Result};

pub const MAX_NODES: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum RelationTag {
    Left,
    Right,
    SelfLoop,
}

impl RelationTag {
    pub const ALL: [RelationTag; 3] = [RelationTag::Left, RelationTag::Right, RelationTag::SelfLoop];

    pub fn as_str(self) -> &'static str {
        match self {
            RelationTag::Left => "left",
            RelationTag::Right => "right",
            RelationTag::SelfLoop => "self",
        }
    }
}

/// Ways to build the adjacency other than the PMI lexicon.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationGraph {
    /// Off-diagonal entries i.i.d. Bernoulli(0.5).
    Random,
    /// Fully connected.
    OneForAll,
    /// Fully connected support; edge weights come from a learned pair scorer.
    Mlp,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConceptGraph {
    nodes: Vec<usize>,
    adjacency: Vec<bool>,
    tags: Vec<Option<RelationTag>>,
}

impl ConceptGraph {
    fn empty(nodes: &[usize]) -> Result<Self> {
        if nodes.is_empty() {
            return Err(Error::Empty("concept list"));
        }
        if nodes.len() > MAX_NODES {
            return invalid(format!(
                "concept graph limited to {MAX_NODES} nodes, got {}",
                nodes.len()
            ));
        }
        let k = nodes.len();
        let mut g = Self {
            nodes: nodes.to_vec(),
            adjacency: vec![false; k * k],
            tags: vec![None; k * k],
        };
        for i in 0..k {
            g.set(i, i, RelationTag::SelfLoop);
        }
        Ok(g)
    }

    fn set(&mut self, i: usize, j: usize, tag: RelationTag) {
        let k = self.nodes.len();
        self.adjacency[i * k + j] = true;
        self.tags[i * k + j] = Some(tag);
    }

    /// Positional tags for graphs that carry no direction information.
    fn connect_by_position(&mut self, i: usize, j: usize) {
        let tag = if j > i { RelationTag::Right } else { RelationTag::Left };
        self.set(i, j, tag);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[usize] {
        &self.nodes
    }

    pub fn adjacent(&self, i: usize, j: usize) -> bool {
        self.adjacency[i * self.len() + j]
    }

    pub fn tag(&self, i: usize, j: usize) -> Option<RelationTag> {
        self.tags[i * self.len() + j]
    }

    /// Row-major `k x k` support mask.
    pub fn support(&self) -> &[bool] {
        &self.adjacency
    }

    /// Row-major 0/1 adjacency matrix.
    pub fn adjacency_matrix(&self) -> Vec<f64> {
        self.adjacency.iter().map(|&a| if a { 1.0 } else { 0.0 }).collect()
    }

    /// Row-major 0/1 mask selecting the edges carrying `tag`.
    pub fn tag_mask(&self, tag: RelationTag) -> Vec<f64> {
        self.tags
            .iter()
            .map(|t| if *t == Some(tag) { 1.0 } else { 0.0 })
            .collect()
    }

    /// Node `i` of the result is node `perm[i]` of `self`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let k = self.len();
        assert_eq!(perm.len(), k);
        let mut g = Self {
            nodes: perm.iter().map(|&p| self.nodes[p]).collect(),
            adjacency: vec![false; k * k],
            tags: vec![None; k * k],
        };
        for i in 0..k {
            for j in 0..k {
                g.adjacency[i * k + j] = self.adjacent(perm[i], perm[j]);
                g.tags[i * k + j] = self.tag(perm[i], perm[j]);
            }
        }
        g
    }

    /// Edge list TSV `gi gj tag alpha_layer1`, one row per edge in node order.
    pub fn write_tsv<W: Write>(&self, vocab: &Vocabulary, alpha: &[f64], mut w: W) -> Result<()> {
        let k = self.len();
        if alpha.len() != k * k {
            return invalid("attention matrix does not match the graph");
        }
        writeln!(w, "gi\tgj\ttag\talpha_layer1")?;
        for i in 0..k {
            for j in 0..k {
                if let Some(tag) = self.tag(i, j) {
                    writeln!(
                        w,
                        "{}\t{}\t{}\t{:.6}",
                        vocab.word(self.nodes[i]),
                        vocab.word(self.nodes[j]),
                        tag.as_str(),
                        alpha[i * k + j]
                    )?;
                }
            }
        }
        Ok(())
    }
}

/// Links `g_i` and `g_j` when either ordered pair is in the lexicon. The tag
/// follows the stronger direction: `(g_i, g_j)` means `g_j` is to the right
/// of `g_i`. Equal scores resolve to `Right` on both sides.
pub fn build_adjacency(concepts: &[usize], lexicon: &PmiLexicon) -> Result<ConceptGraph> {
    let mut g = ConceptGraph::empty(concepts)?;
    let k = concepts.len();
    for i in 0..k {
        for j in 0..k {
            if i == j {
                continue;
            }
            let forward = lexicon.get(concepts[i], concepts[j]);
            let backward = lexicon.get(concepts[j], concepts[i]);
            let tag = match (forward, backward) {
                (Some(f), Some(b)) if b > f => RelationTag::Left,
                (Some(_), _) => RelationTag::Right,
                (None, Some(_)) => RelationTag::Left,
                (None, None) => continue,
            };
            g.set(i, j, tag);
        }
    }
    Ok(g)
}

pub fn build_adjacency_ablation(
    concepts: &[usize],
    mode: AblationGraph,
    seed: u64,
) -> Result<ConceptGraph> {
    let mut g = ConceptGraph::empty(concepts)?;
    let k = concepts.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..k {
        for j in 0..k {
            if i == j {
                continue;
            }
            let connect = match mode {
                AblationGraph::Random => rng.random_bool(0.5),
                AblationGraph::OneForAll | AblationGraph::Mlp => true,
            };
            if connect {
                g.connect_by_position(i, j);
            }
        }
    }
    Ok(g)
}

/// Two-layer perceptron scoring the ordered node pair `(h_i, h_j)`; used in
/// place of the bilinear attention in the MLP ablation.
#[derive(Clone, Debug)]
pub struct PairScorer {
    pub src: ParamId,
    pub dst: ParamId,
    pub bias: ParamId,
    pub out: ParamId,
}

impl PairScorer {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, d: usize, rng: &mut R) -> Self {
        // the concatenated input [h_i; h_j] has fan-in 2d
        Self {
            src: store.uniform(format!("{name}.src"), &[d, d], 2 * d, rng),
            dst: store.uniform(format!("{name}.dst"), &[d, d], 2 * d, rng),
            bias: store.zeros(format!("{name}.bias"), &[d]),
            out: store.uniform(format!("{name}.out"), &[d, 1], d, rng),
        }
    }

    fn scores(&self, tape: &mut Tape, store: &ParamStore, h: Var) -> Result<Var> {
        let k = tape.shape(h)[0];
        let (src, dst) = (tape.param(store, self.src), tape.param(store, self.dst));
        let (bias, out) = (tape.param(store, self.bias), tape.param(store, self.out));
        let a = tape.matmul(h, src)?;
        let b = tape.matmul(h, dst)?;
        let pairs = tape.pairwise_add(a, b)?;
        let pairs = tape.add(pairs, bias)?;
        let hidden = tape.relu(pairs)?;
        let s = tape.matmul(hidden, out)?;
        tape.reshape(s, &[k, k])
    }
}

#[derive(Clone, Debug)]
pub struct WgcnLayerParams {
    pub transform: Linear,
    /// Bilinear edge weights indexed by [`RelationTag`]; absent when a
    /// [`PairScorer`] is used.
    pub positional: Option<[ParamId; 3]>,
    pub norm: LayerNorm,
    pub scorer: Option<PairScorer>,
}

impl WgcnLayerParams {
    pub fn positional_weight(&self, tag: RelationTag) -> Option<ParamId> {
        let [left, right, own] = self.positional?;
        Some(match tag {
            RelationTag::Left => left,
            RelationTag::Right => right,
            RelationTag::SelfLoop => own,
        })
    }
}

#[derive(Clone, Debug)]
pub struct WgcnParams {
    pub layers: Vec<WgcnLayerParams>,
}

impl WgcnParams {
    /// `layers` stacked layers of width `d`. With `learned_adjacency`, each
    /// layer also gets a [`PairScorer`] that replaces the bilinear attention.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        layers: usize,
        learned_adjacency: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if layers == 0 {
            return invalid("W-GCN needs at least one layer");
        }
        let layers = (0..layers)
            .map(|l| {
                let p = format!("{name}.{l}");
                WgcnLayerParams {
                    transform: Linear::new(store, &format!("{p}.transform"), d, d, rng),
                    positional: (!learned_adjacency).then(|| {
                        ["left", "right", "self"]
                            .map(|t| store.uniform(format!("{p}.w_{t}"), &[d, d], d, rng))
                    }),
                    norm: LayerNorm::new(store, &format!("{p}.norm"), d),
                    scorer: learned_adjacency
                        .then(|| PairScorer::new(store, &format!("{p}.scorer"), d, rng)),
                }
            })
            .collect();
        Ok(Self { layers })
    }
}

/// Edge weights `alpha[i, j]`: softmax over node `i`'s neighbourhood of
/// `h_i W_tag(i,j) h_j`, exactly zero off the support.
pub fn wgcn_attention(
    tape: &mut Tape,
    store: &ParamStore,
    h: Var,
    graph: &ConceptGraph,
    layer: &WgcnLayerParams,
) -> Result<Var> {
    let k = graph.len();
    if tape.shape(h).first() != Some(&k) {
        return Err(Error::ShapeMismatch {
            op: "wgcn_attention",
            lhs: tape.shape(h).to_vec(),
            rhs: vec![k],
        });
    }
    if let Some(scorer) = &layer.scorer {
        let scores = scorer.scores(tape, store, h)?;
        return tape.masked_softmax(scores, graph.support());
    }
    let ht = tape.transpose(h)?;
    let mut total: Option<Var> = None;
    for tag in RelationTag::ALL {
        let mask = graph.tag_mask(tag);
        if mask.iter().all(|&m| m == 0.0) {
            continue;
        }
        let id = layer
            .positional_weight(tag)
            .ok_or_else(|| Error::Invalid("layer has neither bilinear weights nor a scorer".into()))?;
        let w = tape.param(store, id);
        let hw = tape.matmul(h, w)?;
        let bilinear = tape.matmul(hw, ht)?;
        let masked = tape.mul_const(bilinear, mask)?;
        total = Some(match total {
            Some(t) => tape.add(t, masked)?,
            None => masked,
        });
    }
    let scores = total.expect("self-loops always present");
    tape.masked_softmax(scores, graph.support())
}

/// `h'_i = ReLU(LN(sum_j alpha_ij (W h_j + b)))`
pub fn wgcn_layer(
    tape: &mut Tape,
    store: &ParamStore,
    h: Var,
    alpha: Var,
    layer: &WgcnLayerParams,
) -> Result<Var> {
    let messages = layer.transform.forward(tape, store, h)?;
    let agg = tape.matmul(alpha, messages)?;
    let normed = layer.norm.forward(tape, store, agg)?;
    tape.relu(normed)
}

/// Runs every layer; returns the final node features and each layer's
/// attention matrix.
pub fn wgcn_forward_with_attention(
    tape: &mut Tape,
    store: &ParamStore,
    features: Var,
    graph: &ConceptGraph,
    params: &WgcnParams,
) -> Result<(Var, Vec<Var>)> {
    let mut h = features;
    let mut alphas = Vec::with_capacity(params.layers.len());
    for layer in &params.layers {
        let alpha = wgcn_attention(tape, store, h, graph, layer)?;
        h = wgcn_layer(tape, store, h, alpha, layer)?;
        alphas.push(alpha);
    }
    Ok((h, alphas))
}

pub fn wgcn_forward(
    tape: &mut Tape,
    store: &ParamStore,
    features: Var,
    graph: &ConceptGraph,
    params: &WgcnParams,
) -> Result<Var> {
    wgcn_forward_with_attention(tape, store, features, graph, params).map(|(h, _)| h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::{finite_difference_check, finite_difference_check_params};
    use crate::autodiff::Tensor;
    use std::collections::BTreeMap;

    fn lexicon(pairs: &[((usize, usize), f64)]) -> PmiLexicon {
        PmiLexicon::from_entries(pairs.iter().copied().collect::<BTreeMap<_, _>>(), 0.5, 3)
    }

    fn params(d: usize, layers: usize, mlp: bool, seed: u64) -> (ParamStore, WgcnParams) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = WgcnParams::new(&mut store, "gcn", d, layers, mlp, &mut rng).unwrap();
        (store, p)
    }

    #[test]
    fn single_concept_is_a_self_loop() {
        let g = build_adjacency(&[7], &lexicon(&[])).unwrap();
        assert_eq!(g.adjacency_matrix(), vec![1.0]);
        assert_eq!(g.tag(0, 0), Some(RelationTag::SelfLoop));
    }

    #[test]
    fn one_direction_gives_left_right_pair() {
        let (girl, eating) = (10, 11);
        let g = build_adjacency(&[girl, eating], &lexicon(&[((girl, eating), 1.2)])).unwrap();
        assert_eq!(g.adjacency_matrix(), vec![1.0; 4]);
        assert_eq!(g.tag(0, 1), Some(RelationTag::Right));
        assert_eq!(g.tag(1, 0), Some(RelationTag::Left));
    }

    #[test]
    fn stronger_direction_wins_and_ties_go_right() {
        let g = build_adjacency(&[1, 2], &lexicon(&[((1, 2), 0.7), ((2, 1), 1.5)])).unwrap();
        assert_eq!(g.tag(0, 1), Some(RelationTag::Left));
        assert_eq!(g.tag(1, 0), Some(RelationTag::Right));
        let g = build_adjacency(&[1, 2], &lexicon(&[((1, 2), 0.9), ((2, 1), 0.9)])).unwrap();
        assert_eq!(g.tag(0, 1), Some(RelationTag::Right));
        assert_eq!(g.tag(1, 0), Some(RelationTag::Right));
    }

    #[test]
    fn unrelated_concepts_stay_disconnected() {
        let g = build_adjacency(&[1, 2, 3], &lexicon(&[((1, 3), 2.0)])).unwrap();
        assert!(!g.adjacent(0, 1) && !g.adjacent(1, 2));
        assert!(g.adjacent(0, 2) && g.adjacent(2, 0));
        assert_eq!(g.tag(0, 1), None);
    }

    #[test]
    fn adjacency_errors() {
        assert!(matches!(build_adjacency(&[], &lexicon(&[])), Err(Error::Empty(_))));
        let many: Vec<usize> = (0..65).collect();
        assert!(build_adjacency(&many, &lexicon(&[])).is_err());
    }

    #[test]
    fn ablation_graphs() {
        let g = build_adjacency_ablation(&[1, 2, 3], AblationGraph::OneForAll, 0).unwrap();
        assert_eq!(g.adjacency_matrix(), vec![1.0; 9]);
        assert_eq!(g.tag(0, 2), Some(RelationTag::Right));
        assert_eq!(g.tag(2, 0), Some(RelationTag::Left));

        let nodes: Vec<usize> = (0..12).collect();
        let a = build_adjacency_ablation(&nodes, AblationGraph::Random, 42).unwrap();
        let b = build_adjacency_ablation(&nodes, AblationGraph::Random, 42).unwrap();
        assert_eq!(a, b);
        for i in 0..12 {
            assert!(a.adjacent(i, i));
        }
    }

    #[test]
    fn random_graph_density() {
        let nodes: Vec<usize> = (0..10).collect();
        let (mut on, mut total) = (0usize, 0usize);
        let mut draw = 0u64;
        while total < 10_000 {
            let g = build_adjacency_ablation(&nodes, AblationGraph::Random, draw).unwrap();
            for i in 0..10 {
                for j in 0..10 {
                    if i != j {
                        on += usize::from(g.adjacent(i, j));
                        total += 1;
                    }
                }
            }
            draw += 1;
        }
        let density = on as f64 / total as f64;
        assert!((density - 0.5).abs() < 0.02, "{density}");
    }

    #[test]
    fn self_loop_only_node_has_unit_weight() {
        let (store, p) = params(4, 1, false, 1);
        let g = build_adjacency(&[1, 2], &lexicon(&[])).unwrap();
        let mut t = Tape::new();
        let h = t.leaf(&Tensor::uniform(&[2, 4], 1.0, &mut ChaCha8Rng::seed_from_u64(2)));
        let a = wgcn_attention(&mut t, &store, h, &g, &p.layers[0]).unwrap();
        assert_eq!(t.value(a), &[1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn equal_exponents_give_uniform_rows() {
        let (store, p) = params(3, 1, false, 1);
        let g = build_adjacency_ablation(&[1, 2, 3], AblationGraph::OneForAll, 0).unwrap();
        let mut t = Tape::new();
        // zero features make every bilinear score zero
        let h = t.leaf(&Tensor::zeros(&[3, 3]));
        let a = wgcn_attention(&mut t, &store, h, &g, &p.layers[0]).unwrap();
        for v in t.value(a) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn attention_matches_direct_formula() {
        let d = 4;
        let (store, p) = params(d, 1, false, 3);
        let nodes = [1, 2, 3, 4, 5];
        let lex = lexicon(&[((1, 2), 1.0), ((2, 3), 1.0), ((5, 1), 1.0), ((3, 5), 0.6), ((5, 3), 0.6)]);
        let g = build_adjacency(&nodes, &lex).unwrap();
        let x = Tensor::uniform(&[5, d], 1.0, &mut ChaCha8Rng::seed_from_u64(4));
        let mut t = Tape::new();
        let h = t.leaf(&x);
        let a = wgcn_attention(&mut t, &store, h, &g, &p.layers[0]).unwrap();
        let alpha = t.value(a);

        let layer = &p.layers[0];
        let score = |i: usize, j: usize| {
            let w = store.get(layer.positional_weight(g.tag(i, j).unwrap()).unwrap()).data();
            let mut s = 0.0;
            for r in 0..d {
                for c in 0..d {
                    s += x.row(i)[r] * w[r * d + c] * x.row(j)[c];
                }
            }
            s
        };
        for i in 0..5 {
            let denom: f64 = (0..5).filter(|&j| g.adjacent(i, j)).map(|j| score(i, j).exp()).sum();
            let mut row_sum = 0.0;
            for j in 0..5 {
                let want = if g.adjacent(i, j) { score(i, j).exp() / denom } else { 0.0 };
                assert!((alpha[i * 5 + j] - want).abs() < 1e-12);
                if !g.adjacent(i, j) {
                    assert_eq!(alpha[i * 5 + j], 0.0);
                }
                row_sum += alpha[i * 5 + j];
            }
            assert!((row_sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn single_node_layer_collapses() {
        let d = 4;
        let (store, p) = params(d, 1, false, 5);
        let g = build_adjacency(&[9], &lexicon(&[])).unwrap();
        let x = Tensor::uniform(&[1, d], 1.0, &mut ChaCha8Rng::seed_from_u64(6));
        let mut t = Tape::new();
        let h = t.leaf(&x);
        let out = wgcn_forward(&mut t, &store, h, &g, &p).unwrap();

        let layer = &p.layers[0];
        let mut t2 = Tape::new();
        let h2 = t2.leaf(&x);
        let m = layer.transform.forward(&mut t2, &store, h2).unwrap();
        let n = layer.norm.forward(&mut t2, &store, m).unwrap();
        let want = t2.relu(n).unwrap();
        assert_eq!(t.value(out), t2.value(want));
    }

    #[test]
    fn identical_nodes_with_uniform_weights_aggregate_to_shared_vector() {
        let d = 3;
        let (mut store, p) = params(d, 1, false, 7);
        let layer = &p.layers[0];
        let w = store.get_mut(layer.transform.weight).data_mut();
        w.fill(0.0);
        for i in 0..d {
            w[i * d + i] = 1.0;
        }
        let v = [0.5, -1.0, 2.0];
        let mut t = Tape::new();
        let h = t.constant(&[2, d], [v, v].concat()).unwrap();
        let alpha = t.constant(&[2, 2], vec![0.5; 4]).unwrap();
        let msgs = layer.transform.forward(&mut t, &store, h).unwrap();
        let agg = t.matmul(alpha, msgs).unwrap();
        assert_eq!(t.value(agg), &[v, v].concat()[..]);
    }

    #[test]
    fn forward_shapes_and_layer_count() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(WgcnParams::new(&mut store, "x", 4, 0, false, &mut rng).is_err());
        let (store, p) = params(4, 2, false, 8);
        for k in [1, 2, 17, 64] {
            let nodes: Vec<usize> = (0..k).collect();
            let g = build_adjacency_ablation(&nodes, AblationGraph::Random, k as u64).unwrap();
            let mut t = Tape::new();
            let h = t.leaf(&Tensor::uniform(&[k, 4], 1.0, &mut rng));
            let out = wgcn_forward(&mut t, &store, h, &g, &p).unwrap();
            assert_eq!(t.shape(out), &[k, 4]);
        }
    }

    #[test]
    fn learned_adjacency_rows_are_stochastic() {
        let (store, p) = params(4, 2, true, 9);
        let g = build_adjacency_ablation(&[1, 2, 3, 4], AblationGraph::Mlp, 0).unwrap();
        let mut t = Tape::new();
        let h = t.leaf(&Tensor::uniform(&[4, 4], 1.0, &mut ChaCha8Rng::seed_from_u64(10)));
        let (_, alphas) = wgcn_forward_with_attention(&mut t, &store, h, &g, &p).unwrap();
        for a in alphas {
            for row in t.value(a).chunks(4) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn layer_gradients() {
        let d = 5;
        let (mut store, p) = params(d, 1, false, 11);
        // non-zero biases so their gradient path is exercised
        let b = p.layers[0].transform.bias;
        *store.get_mut(b) = Tensor::uniform(&[d], 0.5, &mut ChaCha8Rng::seed_from_u64(12));
        let lex = lexicon(&[((1, 2), 1.0), ((2, 3), 1.0), ((4, 1), 1.0)]);
        let g = build_adjacency(&[1, 2, 3, 4], &lex).unwrap();
        let x = Tensor::uniform(&[4, d], 1.0, &mut ChaCha8Rng::seed_from_u64(13));
        let proj = Tensor::uniform(&[4, d], 1.0, &mut ChaCha8Rng::seed_from_u64(14));
        let f = |t: &mut Tape, s: &ParamStore, h: Var| -> Result<Var> {
            let out = wgcn_forward(t, s, h, &g, &p)?;
            let w = t.leaf(&proj);
            let m = t.mul(out, w)?;
            t.sum(m)
        };
        let wrt_h = finite_difference_check(|t, h| f(t, &store, h), &x, 1e-5).unwrap();
        assert!(wrt_h < 1e-5, "{wrt_h}");

        let coords: Vec<_> = store
            .ids()
            .flat_map(|id| (0..store.get(id).numel()).map(move |i| (id, i)))
            .collect();
        let wrt_params = finite_difference_check_params(
            |t, s| {
                let h = t.leaf(&x);
                f(t, s, h)
            },
            &mut store,
            &coords,
            1e-5,
        )
        .unwrap();
        assert!(wrt_params < 1e-5, "{wrt_params}");
    }

    mod props {
        use super::*;
        use proptest::prelude::*;
        use rand::seq::SliceRandom;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(32))]
            #[test]
            fn relabelling_nodes_permutes_outputs(k in 1usize..9, seed in any::<u64>()) {
                let d = 4;
                let (store, p) = params(d, 2, false, seed);
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
                let nodes: Vec<usize> = (10..10 + k).collect();
                let g = build_adjacency_ablation(&nodes, AblationGraph::Random, seed).unwrap();
                let x = Tensor::uniform(&[k, d], 1.0, &mut rng);
                let mut perm: Vec<usize> = (0..k).collect();
                perm.shuffle(&mut rng);
                let px: Vec<f64> = perm.iter().flat_map(|&i| x.row(i).to_vec()).collect();
                let px = Tensor::new(&[k, d], px).unwrap();

                let run = |g: &ConceptGraph, x: &Tensor| {
                    let mut t = Tape::new();
                    let h = t.leaf(x);
                    let out = wgcn_forward(&mut t, &store, h, g, &p).unwrap();
                    t.value(out).to_vec()
                };
                let base = run(&g, &x);
                let moved = run(&g.permuted(&perm), &px);
                for (i, &pi) in perm.iter().enumerate() {
                    for c in 0..d {
                        prop_assert!((moved[i * d + c] - base[pi * d + c]).abs() < 1e-10);
                    }
                }
            }
        }
    }
}

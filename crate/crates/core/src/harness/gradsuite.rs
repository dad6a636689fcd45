//! Registered finite-difference checks for every differentiable building
//! block and for the full training loss.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::gradcheck::DEFAULT_EPS;
use crate::autodiff::nn::{LayerNorm, MultiHeadAttention};
use crate::autodiff::{
    finite_difference_check, finite_difference_check_params, AsymmetricLossParams, ParamId,
    ParamStore, Tape, Tensor, Var,
};
use crate::captioner::{CaptionSample, Captioner, GraphMode, ModelConfig, Variant};
use crate::corpus::{lexicon_from_captions, tokenize};
use crate::error::{invalid, Result};
use crate::wgcn::{build_adjacency, wgcn_forward, WgcnParams};

pub const PRIMITIVE_TOLERANCE: f64 = 1e-5;
pub const END_TO_END_TOLERANCE: f64 = 1e-4;

pub const SUITES: [&str; 8] = [
    "matmul",
    "softmax",
    "layer_norm",
    "mha",
    "cross_entropy",
    "asymmetric_loss",
    "wgcn_layer",
    "end_to_end",
];

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteResult {
    pub name: &'static str,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl SuiteResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(shape, 1.0, rng)
}

/// `sum(x * w)` for a fixed random `w`, so every input coordinate matters.
fn project(t: &mut Tape, x: Var, w: &Tensor) -> Result<Var> {
    let w = t.leaf(w);
    let y = t.mul(x, w)?;
    t.sum(y)
}

fn all_coords(store: &ParamStore, skip: impl Fn(&str) -> bool) -> Vec<(ParamId, usize)> {
    store
        .iter()
        .filter(|(_, name, _)| !skip(name))
        .flat_map(|(id, _, t)| (0..t.numel()).map(move |i| (id, i)))
        .collect()
}

/// Key biases shift every attention logit in a row equally, so softmax
/// cancels them and their true gradient is zero.
fn is_key_bias(name: &str) -> bool {
    name.ends_with(".k.bias")
}

fn matmul(rng: &mut ChaCha8Rng) -> Result<f64> {
    let a = rand_tensor(&[3, 4], rng);
    let b = rand_tensor(&[4, 2], rng);
    let w = rand_tensor(&[3, 2], rng);
    let wrt_a = finite_difference_check(
        |t, x| {
            let bb = t.leaf(&b);
            let y = t.matmul(x, bb)?;
            project(t, y, &w)
        },
        &a,
        DEFAULT_EPS,
    )?;
    let wrt_b = finite_difference_check(
        |t, x| {
            let aa = t.leaf(&a);
            let y = t.matmul(aa, x)?;
            project(t, y, &w)
        },
        &b,
        DEFAULT_EPS,
    )?;
    Ok(wrt_a.max(wrt_b))
}

fn softmax(rng: &mut ChaCha8Rng) -> Result<f64> {
    let x = rand_tensor(&[3, 5], rng);
    let w = rand_tensor(&[3, 5], rng);
    finite_difference_check(
        |t, v| {
            let s = t.softmax(v, 1)?;
            project(t, s, &w)
        },
        &x,
        DEFAULT_EPS,
    )
}

fn layer_norm(rng: &mut ChaCha8Rng) -> Result<f64> {
    let mut store = ParamStore::new();
    let ln = LayerNorm::new(&mut store, "ln", 6);
    for id in [ln.gain, ln.bias] {
        *store.get_mut(id) = rand_tensor(&[6], rng);
    }
    let x = rand_tensor(&[3, 6], rng);
    let w = rand_tensor(&[3, 6], rng);
    let f = |t: &mut Tape, s: &ParamStore, v: Var| {
        let y = ln.forward(t, s, v)?;
        project(t, y, &w)
    };
    let wrt_x = finite_difference_check(|t, v| f(t, &store, v), &x, DEFAULT_EPS)?;
    let coords = all_coords(&store, |_| false);
    let wrt_p = finite_difference_check_params(
        |t, s| {
            let v = t.leaf(&x);
            f(t, s, v)
        },
        &mut store,
        &coords,
        DEFAULT_EPS,
    )?;
    Ok(wrt_x.max(wrt_p))
}

fn mha(rng: &mut ChaCha8Rng) -> Result<f64> {
    let mut store = ParamStore::new();
    let attn = MultiHeadAttention::new(&mut store, "mha", 8, 2, rng)?;
    for id in store.ids().collect::<Vec<_>>() {
        let shape = store.get(id).shape().to_vec();
        *store.get_mut(id) = Tensor::uniform(&shape, 0.5, rng);
    }
    let q = rand_tensor(&[3, 8], rng);
    let kv = rand_tensor(&[4, 8], rng);
    let w = rand_tensor(&[3, 8], rng);
    let f = |t: &mut Tape, s: &ParamStore, q: Var, kv: Var| {
        let y = attn.forward(t, s, q, kv, kv, None)?;
        project(t, y, &w)
    };
    let wrt_q = finite_difference_check(
        |t, v| {
            let kv = t.leaf(&kv);
            f(t, &store, v, kv)
        },
        &q,
        DEFAULT_EPS,
    )?;
    let wrt_kv = finite_difference_check(
        |t, v| {
            let q = t.leaf(&q);
            f(t, &store, q, v)
        },
        &kv,
        DEFAULT_EPS,
    )?;
    let coords = all_coords(&store, is_key_bias);
    let wrt_p = finite_difference_check_params(
        |t, s| {
            let (qq, kk) = (t.leaf(&q), t.leaf(&kv));
            f(t, s, qq, kk)
        },
        &mut store,
        &coords,
        DEFAULT_EPS,
    )?;
    Ok(wrt_q.max(wrt_kv).max(wrt_p))
}

fn cross_entropy(rng: &mut ChaCha8Rng) -> Result<f64> {
    let x = rand_tensor(&[4, 6], rng);
    let targets: Vec<usize> = (0..4).map(|_| rng.random_range(1..6)).collect();
    finite_difference_check(|t, v| t.cross_entropy(v, &targets, 0), &x, DEFAULT_EPS)
}

fn asymmetric_loss(rng: &mut ChaCha8Rng) -> Result<f64> {
    let x = Tensor::uniform(&[8], 2.5, rng);
    let labels: Vec<f64> = (0..8).map(|i| f64::from(u8::from(i % 3 == 0))).collect();
    let mut worst = 0.0f64;
    for prm in [
        AsymmetricLossParams::default(),
        AsymmetricLossParams {
            gamma_pos: 1.0,
            gamma_neg: 2.0,
            clip: 0.0,
            ..AsymmetricLossParams::default()
        },
    ] {
        let e = finite_difference_check(
            |t, v| {
                let p = t.sigmoid(v)?;
                t.asymmetric_loss(p, &labels, prm)
            },
            &x,
            DEFAULT_EPS,
        )?;
        worst = worst.max(e);
    }
    Ok(worst)
}

fn wgcn_layer(rng: &mut ChaCha8Rng) -> Result<f64> {
    let d = 5;
    let mut store = ParamStore::new();
    let params = WgcnParams::new(&mut store, "gcn", d, 2, false, rng)?;
    for l in &params.layers {
        *store.get_mut(l.transform.bias) = Tensor::uniform(&[d], 0.5, rng);
    }
    let lexicon = crate::corpus::PmiLexicon::from_entries(
        [((1, 2), 1.0), ((2, 3), 0.8), ((4, 1), 1.3), ((3, 2), 0.6)].into_iter().collect(),
        0.5,
        3,
    );
    let graph = build_adjacency(&[1, 2, 3, 4], &lexicon)?;
    let x = rand_tensor(&[4, d], rng);
    let w = rand_tensor(&[4, d], rng);
    let f = |t: &mut Tape, s: &ParamStore, h: Var| {
        let y = wgcn_forward(t, s, h, &graph, &params)?;
        project(t, y, &w)
    };
    let wrt_h = finite_difference_check(|t, h| f(t, &store, h), &x, DEFAULT_EPS)?;
    let coords = all_coords(&store, |_| false);
    let wrt_p = finite_difference_check_params(
        |t, s| {
            let h = t.leaf(&x);
            f(t, s, h)
        },
        &mut store,
        &coords,
        DEFAULT_EPS,
    )?;
    Ok(wrt_h.max(wrt_p))
}

/// A small structured model on one random sample, checked on 32 randomly
/// chosen parameter coordinates.
fn end_to_end(rng: &mut ChaCha8Rng) -> Result<f64> {
    let captions: Vec<String> = [
        "a little baby is drinking milk",
        "a girl is eating food",
        "a dog is chasing ball",
        "a young dog is chasing cat",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    let (vocab, cv, lex) = lexicon_from_captions(&captions, 3, 0.5, 1)?;
    let config = ModelConfig {
        d_model: 8,
        heads: 2,
        ffn_dim: 12,
        query_count: 3,
        feature_dim: 5,
        max_caption_len: 8,
        top_k: 3,
        decoder_layers: 1,
        variant: Variant::Structured,
        graph: GraphMode::Lexicon,
        seed: rng.random(),
        ..ModelConfig::default()
    };
    let model = Captioner::new(config, vocab, cv, lex)?;
    let caption = model.vocab().encode_caption(&tokenize(&captions[0]));
    let sample = CaptionSample::new(rand_tensor(&[4, 5], rng), caption, model.concept_vocab());
    let mut store = model.store.clone();
    let mut coords = all_coords(&store, is_key_bias);
    coords.shuffle(rng);
    coords.truncate(32);
    finite_difference_check_params(
        |t, s| model.forward_train_with(s, t, &sample).map(|o| o.loss),
        &mut store,
        &coords,
        DEFAULT_EPS,
    )
}

pub fn run_suite(name: &str, seed: u64) -> Result<SuiteResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (name, err, tol): (&'static str, f64, f64) = match name {
        "matmul" => ("matmul", matmul(&mut rng)?, PRIMITIVE_TOLERANCE),
        "softmax" => ("softmax", softmax(&mut rng)?, PRIMITIVE_TOLERANCE),
        "layer_norm" => ("layer_norm", layer_norm(&mut rng)?, PRIMITIVE_TOLERANCE),
        "mha" => ("mha", mha(&mut rng)?, PRIMITIVE_TOLERANCE),
        "cross_entropy" => ("cross_entropy", cross_entropy(&mut rng)?, PRIMITIVE_TOLERANCE),
        "asymmetric_loss" => ("asymmetric_loss", asymmetric_loss(&mut rng)?, PRIMITIVE_TOLERANCE),
        "wgcn_layer" => ("wgcn_layer", wgcn_layer(&mut rng)?, PRIMITIVE_TOLERANCE),
        "end_to_end" => ("end_to_end", end_to_end(&mut rng)?, END_TO_END_TOLERANCE),
        other => return invalid(format!("unknown gradient suite `{other}`")),
    };
    Ok(SuiteResult {
        name,
        max_rel_err: err,
        tolerance: tol,
    })
}

pub fn run_all(seed: u64) -> Result<Vec<SuiteResult>> {
    SUITES.iter().map(|s| run_suite(s, seed)).collect()
}

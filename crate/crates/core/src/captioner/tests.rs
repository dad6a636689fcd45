use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::{finite_difference_check, finite_difference_check_params, ParamId, ParamStore, Tape, Tensor};
use crate::corpus::{lexicon_from_captions, tokenize, EOS};

const CAPTIONS: [&str; 6] = [
    "a little baby is drinking milk",
    "a girl is eating food",
    "a little girl is eating apple",
    "a dog is chasing ball",
    "a baby is drinking water",
    "a young dog is chasing cat",
];

fn tiny_config(variant: Variant, graph: GraphMode) -> ModelConfig {
    ModelConfig {
        d_model: 8,
        heads: 2,
        ffn_dim: 12,
        encoder_layers: 1,
        concept_layers: 1,
        decoder_layers: 1,
        query_count: 3,
        gcn_layers: 2,
        feature_dim: 5,
        max_caption_len: 8,
        top_k: 3,
        variant,
        graph,
        seed: 7,
        ..ModelConfig::default()
    }
}

fn model(variant: Variant, graph: GraphMode) -> Captioner {
    let captions: Vec<String> = CAPTIONS.iter().map(|s| s.to_string()).collect();
    let (vocab, cv, lex) = lexicon_from_captions(&captions, 3, 0.5, 1).unwrap();
    Captioner::new(tiny_config(variant, graph), vocab, cv, lex).unwrap()
}

fn sample(m: &Captioner, text: &str, seed: u64) -> CaptionSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let features = Tensor::uniform(&[4, 5], 1.0, &mut rng);
    let caption = m.vocab().encode_caption(&tokenize(text));
    CaptionSample::new(features, caption, m.concept_vocab())
}

/// Every parameter coordinate except attention key biases, whose gradient
/// vanishes because softmax ignores a constant shift of the logits.
fn checkable_coords(store: &ParamStore) -> Vec<(ParamId, usize)> {
    store
        .iter()
        .filter(|(_, name, _)| !name.ends_with(".k.bias"))
        .flat_map(|(id, _, t)| (0..t.numel()).map(move |i| (id, i)))
        .collect()
}

fn projection(shape: &[usize], seed: u64) -> Tensor {
    Tensor::uniform(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[test]
fn encoder_shapes() {
    let m = model(Variant::Structured, GraphMode::Lexicon);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for s in [1, 2, 7, 49] {
        let mut t = Tape::new();
        let x = t.leaf(&Tensor::uniform(&[s, 5], 1.0, &mut rng));
        let v = m.visual_encode(&m.store, &mut t, x).unwrap();
        assert_eq!(t.shape(v), &[s, 8]);
    }
    let mut t = Tape::new();
    let bad = t.leaf(&Tensor::zeros(&[3, 4]));
    assert!(m.visual_encode(&m.store, &mut t, bad).is_err());
}

#[test]
fn encoder_gradients() {
    let m = model(Variant::Structured, GraphMode::Lexicon);
    let x = projection(&[3, 5], 2);
    let proj = projection(&[3, 8], 3);
    let f = |t: &mut Tape, s: &ParamStore, x| {
        let v = m.visual_encode(s, t, x)?;
        let p = t.leaf(&proj);
        let y = t.mul(v, p)?;
        t.sum(y)
    };
    let err = finite_difference_check(|t, x| f(t, &m.store, x), &x, 1e-5).unwrap();
    assert!(err < 1e-5, "{err}");
    let mut store = m.store.clone();
    let coords: Vec<_> = checkable_coords(&store)
        .into_iter()
        .filter(|(id, _)| store.name(*id).starts_with("encoder") || store.name(*id).starts_with("input"))
        .collect();
    let err = finite_difference_check_params(
        |t, s| {
            let x = t.leaf(&x);
            f(t, s, x)
        },
        &mut store,
        &coords,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-5, "{err}");
}

#[test]
fn concept_probabilities_in_open_interval() {
    let m = model(Variant::Structured, GraphMode::Lexicon);
    for seed in 0..10 {
        let x = projection(&[4, 5], seed);
        let p = m.concept_probs(&x).unwrap().unwrap();
        assert_eq!(p.len(), m.concept_vocab().len());
        assert!(p.iter().all(|&v| v > 0.0 && v < 1.0));
    }
    assert!(model(Variant::Baseline, GraphMode::Lexicon)
        .concept_probs(&projection(&[4, 5], 0))
        .unwrap()
        .is_none());
}

#[test]
fn duplicated_query_leaves_pooled_output_unchanged() {
    let mut m = model(Variant::ConceptOnly, GraphMode::Lexicon);
    let x = projection(&[4, 5], 4);
    let before = m.concept_probs(&x).unwrap().unwrap();
    // grow the query table by repeating row 0, rebuilding the model around it
    let mut config = m.config.clone();
    config.query_count += 1;
    let mut bigger = Captioner::new(
        config,
        m.vocab().clone(),
        m.concept_vocab().clone(),
        m.lexicon().clone(),
    )
    .unwrap();
    let names: Vec<String> = m.store.iter().map(|(_, n, _)| n.to_string()).collect();
    for name in names {
        let src = m.store.get(m.store.id(&name).unwrap()).clone();
        let dst = bigger.store.id(&name).unwrap();
        if name == "concept.queries" {
            let mut data = src.data().to_vec();
            data.extend_from_slice(src.row(0));
            *bigger.store.get_mut(dst) = Tensor::new(&[4, 8], data).unwrap();
        } else {
            *bigger.store.get_mut(dst) = src;
        }
    }
    let after = bigger.concept_probs(&x).unwrap().unwrap();
    assert_eq!(before, after);
    m.store.zero_grad();
}

#[test]
fn concept_branch_gradients() {
    let m = model(Variant::ConceptOnly, GraphMode::Lexicon);
    let x = projection(&[4, 5], 5);
    let k = m.concept_vocab().len();
    let proj = projection(&[k], 6);
    let f = |t: &mut Tape, s: &ParamStore, x| {
        let v = m.visual_encode(s, t, x)?;
        let p = m.predict_concepts(s, t, v)?;
        let w = t.leaf(&proj);
        let y = t.mul(p.probs, w)?;
        t.sum(y)
    };
    let err = finite_difference_check(|t, x| f(t, &m.store, x), &x, 1e-5).unwrap();
    assert!(err < 1e-5, "{err}");
    let mut store = m.store.clone();
    let coords: Vec<_> = checkable_coords(&store)
        .into_iter()
        .filter(|(id, _)| store.name(*id).starts_with("concept"))
        .collect();
    let err = finite_difference_check_params(
        |t, s| {
            let x = t.leaf(&x);
            f(t, s, x)
        },
        &mut store,
        &coords,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-5, "{err}");
}

#[test]
fn concept_selection() {
    let m = model(Variant::ConceptOnly, GraphMode::Lexicon);
    let cv = m.concept_vocab();
    let k = cv.len();
    let mut probs = vec![0.1; k];
    probs[3] = 0.9;
    assert_eq!(select_concepts(&probs, cv, 1), vec![cv.word_id(3)]);
    probs[1] = 0.9;
    assert_eq!(select_concepts(&probs, cv, 1), vec![cv.word_id(1)]);

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..50 {
        let probs: Vec<f64> = (0..k).map(|_| rng.random::<f64>()).collect();
        let mut oracle: Vec<(f64, usize)> = probs.iter().enumerate().map(|(i, &p)| (p, cv.word_id(i))).collect();
        oracle.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let want: Vec<usize> = oracle.iter().take(5).map(|x| x.1).collect();
        assert_eq!(select_concepts(&probs, cv, 5), want);
    }
}

#[test]
fn decoder_step_shape_and_causality() {
    let m = model(Variant::Structured, GraphMode::Lexicon);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let v = Tensor::uniform(&[4, 8], 1.0, &mut rng);
    let c = Tensor::uniform(&[3, 8], 1.0, &mut rng);
    let run = |tokens: &[usize]| {
        let mut t = Tape::new();
        let vv = t.leaf(&v);
        let cc = t.leaf(&c);
        let logits = m.decode(&m.store, &mut t, tokens, vv, Some(cc)).unwrap();
        t.value(logits).to_vec()
    };
    let vocab = m.config.vocab_size;
    let mut t = Tape::new();
    let vv = t.leaf(&v);
    let step = m.decode_step(&m.store, &mut t, &[1, 5, 6], vv, None).unwrap();
    assert_eq!(t.shape(step), &[vocab]);

    let a = run(&[1, 5, 6, 0, 0, 0]);
    let b = run(&[1, 5, 6, 9, 4, 7]);
    assert_eq!(a[..3 * vocab], b[..3 * vocab]);
    assert_ne!(a[3 * vocab..], b[3 * vocab..]);

    let mut t = Tape::new();
    let vv = t.leaf(&v);
    assert!(m.decode(&m.store, &mut t, &[], vv, None).is_err());
}

#[test]
fn decoder_gradients_on_short_prefix() {
    let m = model(Variant::Structured, GraphMode::Lexicon);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let v = Tensor::uniform(&[4, 8], 1.0, &mut rng);
    let c = Tensor::uniform(&[3, 8], 1.0, &mut rng);
    let f = |t: &mut Tape, s: &ParamStore, v, c| {
        let logits = m.decode(s, t, &[1, 5, 6], v, Some(c))?;
        t.cross_entropy(logits, &[5, 6, EOS], 0)
    };
    let err = finite_difference_check(
        |t, v| {
            let c = t.leaf(&c);
            f(t, &m.store, v, c)
        },
        &v,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-5, "{err}");
    let mut store = m.store.clone();
    let coords: Vec<_> = checkable_coords(&store)
        .into_iter()
        .filter(|(id, _)| store.name(*id).starts_with("decoder"))
        .collect();
    let err = finite_difference_check_params(
        |t, s| {
            let vv = t.leaf(&v);
            let cc = t.leaf(&c);
            f(t, s, vv, cc)
        },
        &mut store,
        &coords,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-5, "{err}");
}

#[test]
fn loss_combination() {
    assert_eq!(total_loss(0.7, 0.3, 0.0), 0.7);
    assert!((total_loss(0.7, 0.3, 2.0) - 1.3).abs() < 1e-15);
    assert_eq!(ModelConfig::default().beta, 1.0);

    let mut m = model(Variant::Structured, GraphMode::Lexicon);
    let s = sample(&m, CAPTIONS[0], 11);
    let mut t = Tape::new();
    let out = m.forward_train(&mut t, &s).unwrap();
    assert!((out.total - total_loss(out.cap, out.concept, 1.0)).abs() < 1e-12);
    m.config.beta = 0.0;
    let mut t = Tape::new();
    let out = m.forward_train(&mut t, &s).unwrap();
    assert_eq!(out.total, out.cap);
}

#[test]
fn forward_is_deterministic() {
    let a = model(Variant::Structured, GraphMode::Lexicon);
    let b = model(Variant::Structured, GraphMode::Lexicon);
    assert_eq!(a.store.checksum(), b.store.checksum());
    let s = sample(&a, CAPTIONS[2], 12);
    let (mut t1, mut t2) = (Tape::new(), Tape::new());
    let x = a.forward_train(&mut t1, &s).unwrap();
    let y = b.forward_train(&mut t2, &s).unwrap();
    assert_eq!(x.total.to_bits(), y.total.to_bits());
    assert_eq!(x.concept.to_bits(), y.concept.to_bits());
}

#[test]
fn without_concept_weight_the_head_gets_no_gradient() {
    let mut m = model(Variant::Structured, GraphMode::Lexicon);
    m.config.beta = 0.0;
    let s = sample(&m, CAPTIONS[1], 13);
    let mut t = Tape::new();
    let out = m.forward_train(&mut t, &s).unwrap();
    let grads = t.backward(out.loss).unwrap();
    for suffix in ["concept.head.out.weight", "concept.head.out.bias"] {
        let id = m.store.id(suffix).unwrap();
        assert!(grads.param(id).unwrap().iter().all(|&g| g == 0.0), "{suffix}");
    }
    let emb = m.store.id("decoder.token_embedding").unwrap();
    assert!(grads.param(emb).unwrap().iter().any(|&g| g != 0.0));
}

#[test]
fn every_parameter_receives_a_finite_gradient() {
    for (variant, graph) in [
        (Variant::Structured, GraphMode::OneForAll),
        (Variant::Structured, GraphMode::Mlp),
        (Variant::ConceptOnly, GraphMode::Lexicon),
        (Variant::Baseline, GraphMode::Lexicon),
    ] {
        // a fully connected graph carries every relation tag
        let mut m = model(variant, graph);
        m.config.top_k = 4;
        let s = sample(&m, CAPTIONS[0], 14);
        let mut t = Tape::new();
        let out = m.forward_train(&mut t, &s).unwrap();
        let grads = t.backward(out.loss).unwrap();
        for (id, name, _) in m.store.iter() {
            let g = grads.param(id).unwrap_or_else(|| panic!("{name} unreached in {variant}"));
            assert!(g.iter().all(|v| v.is_finite()), "{name}");
        }
    }
}

#[test]
fn concept_only_variant_has_no_graph_layers() {
    let m = model(Variant::ConceptOnly, GraphMode::Lexicon);
    assert!(m.store.iter().all(|(_, n, _)| !n.starts_with("wgcn")));
    let p = m.prepare(&projection(&[4, 5], 15)).unwrap();
    assert!(p.graph.is_none() && p.attention.is_empty());
    let b = model(Variant::Baseline, GraphMode::Lexicon);
    assert!(b.store.iter().all(|(_, n, _)| !n.starts_with("concept") && !n.contains(".concept.")));
}

#[test]
fn end_to_end_gradient_subsample() {
    let m = model(Variant::Structured, GraphMode::Lexicon);
    let s = sample(&m, CAPTIONS[2], 16);
    let mut store = m.store.clone();
    let mut coords = checkable_coords(&store);
    coords.shuffle(&mut ChaCha8Rng::seed_from_u64(17));
    coords.truncate(32);
    let err = finite_difference_check_params(
        |t, st| m.forward_train_with(st, t, &s).map(|o| o.loss),
        &mut store,
        &coords,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn single_sample_overfits_with_gradient_descent() {
    let mut m = model(Variant::Structured, GraphMode::Lexicon);
    let s = sample(&m, CAPTIONS[0], 18);
    let mut losses = Vec::new();
    for _ in 0..50 {
        let mut t = Tape::new();
        let out = m.forward_train(&mut t, &s).unwrap();
        losses.push(out.total);
        m.store.zero_grad();
        t.backward_into(out.loss, &mut m.store).unwrap();
        for p in m.store.tensors_mut() {
            let Some(g) = p.grad().map(<[f64]>::to_vec) else {
                continue;
            };
            for (v, g) in p.data_mut().iter_mut().zip(g) {
                *v -= 0.1 * g;
            }
        }
    }
    assert!(losses[49] < 0.5 * losses[0], "{losses:?}");
}

#[test]
fn generation_contract() {
    let m = model(Variant::Structured, GraphMode::Lexicon);
    for seed in 0..10 {
        let x = projection(&[4, 5], 100 + seed);
        let g = m.generate(&x, DecodeMode::Greedy).unwrap();
        let b1 = m.generate(&x, DecodeMode::Beam(1)).unwrap();
        assert_eq!(g.tokens, b1.tokens);
        let b3 = m.generate(&x, DecodeMode::Beam(3)).unwrap();
        assert!(b3.normalized() >= g.normalized());
        for h in [g, b3] {
            assert!(h.tokens.last() == Some(&EOS) || h.tokens.len() == m.config.max_caption_len - 1);
        }
    }
}

#[test]
fn save_and_load_round_trip() {
    let m = model(Variant::Structured, GraphMode::Lexicon);
    let dir = tempfile::tempdir().unwrap();
    io::save(&m, dir.path()).unwrap();
    let back = io::load(dir.path()).unwrap();
    assert_eq!(back.store.checksum(), m.store.checksum());
    assert_eq!(back.config, m.config);
    let x = projection(&[4, 5], 19);
    assert_eq!(
        m.generate(&x, DecodeMode::Beam(3)).unwrap(),
        back.generate(&x, DecodeMode::Beam(3)).unwrap()
    );
}

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::gradcheck::{finite_difference_check, finite_difference_check_params, DEFAULT_EPS};
use super::nn::{causal_mask, Linear, MultiHeadAttention};
use super::*;
use crate::error::Error;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random(shape: &[usize], seed: u64) -> Tensor {
    Tensor::uniform(shape, 1.0, &mut rng(seed))
}

/// Reduces `y` to a scalar through fixed random weights so that no
/// coordinate of the gradient is structurally zero.
fn project(t: &mut Tape, y: Var, seed: u64) -> crate::Result<Var> {
    let w = random(t.shape(y), seed ^ 0x9e37);
    let w = t.leaf(&w);
    let p = t.mul(y, w)?;
    t.sum(p)
}

fn close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(b) {
        assert!((x - y).abs() <= tol, "{a:?} vs {b:?}");
    }
}

// ---- matmul -----------------------------------------------------------------

#[test]
fn matmul_identity() {
    let mut t = Tape::new();
    let mut eye = Tensor::zeros(&[3, 3]);
    for i in 0..3 {
        eye.data_mut()[i * 4] = 1.0;
    }
    let v = Tensor::new(&[3, 1], vec![4.0, -2.0, 0.5]).unwrap();
    let (e, x) = (t.leaf(&eye), t.leaf(&v));
    let y = t.matmul(e, x).unwrap();
    assert_eq!(t.value(y), v.data());
}

#[test]
fn matmul_hand_example() {
    let mut t = Tape::new();
    let a = t.constant(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let b = t.constant(&[2, 1], vec![1.0, 1.0]).unwrap();
    let y = t.matmul(a, b).unwrap();
    assert_eq!(t.shape(y), &[2, 1]);
    assert_eq!(t.value(y), &[3.0, 7.0]);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut t = Tape::new();
    let a = t.leaf(&Tensor::zeros(&[2, 3]));
    let b = t.leaf(&Tensor::zeros(&[4, 5]));
    let msg = t.matmul(a, b).unwrap_err().to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("[4, 5]"), "{msg}");
}

#[test]
fn matmul_gradients() {
    let a = random(&[4, 5], 1);
    let b = random(&[5, 6], 2);
    let wrt_a = finite_difference_check(
        |t, x| {
            let bv = t.leaf(&b);
            let y = t.matmul(x, bv)?;
            project(t, y, 3)
        },
        &a,
        DEFAULT_EPS,
    )
    .unwrap();
    let wrt_b = finite_difference_check(
        |t, x| {
            let av = t.leaf(&a);
            let y = t.matmul(av, x)?;
            project(t, y, 3)
        },
        &b,
        DEFAULT_EPS,
    )
    .unwrap();
    assert!(wrt_a < 1e-6 && wrt_b < 1e-6, "{wrt_a} {wrt_b}");
}

#[test]
fn batched_matmul_with_broadcast_matrix() {
    let a = random(&[3, 2, 4], 4);
    let b = random(&[4, 5], 5);
    let mut t = Tape::new();
    let (av, bv) = (t.leaf(&a), t.leaf(&b));
    let y = t.matmul(av, bv).unwrap();
    assert_eq!(t.shape(y), &[3, 2, 5]);
    // batch 1, row 0, col 2 by hand
    let want: f64 = (0..4).map(|p| a.data()[8 + p] * b.data()[p * 5 + 2]).sum();
    assert!((t.value(y)[10 + 2] - want).abs() < 1e-14);

    let err = finite_difference_check(
        |t, x| {
            let av = t.leaf(&a);
            let y = t.matmul(av, x)?;
            project(t, y, 6)
        },
        &b,
        DEFAULT_EPS,
    )
    .unwrap();
    assert!(err < 1e-6, "{err}");
}

// ---- softmax ----------------------------------------------------------------

#[test]
fn softmax_constant_row_is_uniform() {
    let mut t = Tape::new();
    let x = t.constant(&[1, 4], vec![2.5; 4]).unwrap();
    let y = t.softmax(x, 1).unwrap();
    close(t.value(y), &[0.25; 4], 1e-15);
}

#[test]
fn softmax_closed_form() {
    let mut t = Tape::new();
    let x = t.constant(&[2], vec![0.0, 3f64.ln()]).unwrap();
    let y = t.softmax(x, 0).unwrap();
    close(t.value(y), &[0.25, 0.75], 1e-15);
}

#[test]
fn softmax_random_vector() {
    let x = random(&[7], 7);
    let mut t = Tape::new();
    let v = t.leaf(&x);
    let y = t.softmax(v, 0).unwrap();
    assert!((t.value(y).iter().sum::<f64>() - 1.0).abs() < 1e-12);

    let err = finite_difference_check(
        |t, v| {
            let y = t.softmax(v, 0)?;
            project(t, y, 8)
        },
        &x,
        DEFAULT_EPS,
    )
    .unwrap();
    assert!(err < 1e-6, "{err}");
}

#[test]
fn softmax_middle_axis_gradient() {
    let x = random(&[2, 3, 4], 9);
    let err = finite_difference_check(
        |t, v| {
            let y = t.softmax(v, 1)?;
            project(t, y, 10)
        },
        &x,
        DEFAULT_EPS,
    )
    .unwrap();
    assert!(err < 1e-6, "{err}");
}

#[test]
fn masked_softmax_zeroes_masked_entries() {
    let mut t = Tape::new();
    let x = t.constant(&[2, 3], vec![1.0, 5.0, 1.0, 0.0, 0.0, 9.0]).unwrap();
    let mask = [true, false, true, true, true, false];
    let y = t.masked_softmax(x, &mask).unwrap();
    close(t.value(y), &[0.5, 0.0, 0.5, 0.5, 0.5, 0.0], 1e-15);

    let empty = [false, false, false, true, true, true];
    assert!(t.masked_softmax(x, &empty).is_err());

    let xs = random(&[3, 4], 11);
    let mask = [true, false, true, true, false, true, false, false, true, true, true, true];
    let err = finite_difference_check(
        |t, v| {
            let y = t.masked_softmax(v, &mask)?;
            project(t, y, 12)
        },
        &xs,
        DEFAULT_EPS,
    )
    .unwrap();
    assert!(err < 1e-6, "{err}");
}

// ---- layer norm -------------------------------------------------------------

fn layer_norm_unit(t: &mut Tape, x: Var) -> crate::Result<Var> {
    let d = *t.shape(x).last().unwrap();
    let g = t.leaf(&Tensor::ones(&[d]));
    let b = t.leaf(&Tensor::zeros(&[d]));
    t.layer_norm(x, g, b, 1e-5)
}

#[test]
fn layer_norm_constant_vector() {
    let mut t = Tape::new();
    let x = t.constant(&[5], vec![3.0; 5]).unwrap();
    let y = layer_norm_unit(&mut t, x).unwrap();
    close(t.value(y), &[0.0; 5], 0.0);
}

#[test]
fn layer_norm_already_normalised() {
    let mut t = Tape::new();
    let x = t.constant(&[2], vec![1.0, -1.0]).unwrap();
    let y = layer_norm_unit(&mut t, x).unwrap();
    close(t.value(y), &[1.0, -1.0], 1e-5);
}

#[test]
fn layer_norm_rejects_singleton_axis() {
    let mut t = Tape::new();
    let x = t.constant(&[3, 1], vec![1.0, 2.0, 3.0]).unwrap();
    assert!(layer_norm_unit(&mut t, x).is_err());
}

#[test]
fn layer_norm_gradients() {
    let x = random(&[3, 6], 13);
    let gain = random(&[6], 14);
    let bias = random(&[6], 15);
    let wrt_x = finite_difference_check(
        |t, v| {
            let (g, b) = (t.leaf(&gain), t.leaf(&bias));
            let y = t.layer_norm(v, g, b, 1e-5)?;
            project(t, y, 16)
        },
        &x,
        DEFAULT_EPS,
    )
    .unwrap();
    let wrt_gain = finite_difference_check(
        |t, g| {
            let (xv, b) = (t.leaf(&x), t.leaf(&bias));
            let y = t.layer_norm(xv, g, b, 1e-5)?;
            project(t, y, 16)
        },
        &gain,
        DEFAULT_EPS,
    )
    .unwrap();
    let wrt_bias = finite_difference_check(
        |t, b| {
            let (xv, g) = (t.leaf(&x), t.leaf(&gain));
            let y = t.layer_norm(xv, g, b, 1e-5)?;
            project(t, y, 16)
        },
        &bias,
        DEFAULT_EPS,
    )
    .unwrap();
    assert!(wrt_x < 1e-6 && wrt_gain < 1e-6 && wrt_bias < 1e-6, "{wrt_x} {wrt_gain} {wrt_bias}");
}

// ---- attention --------------------------------------------------------------

fn identity_attention(d: usize, heads: usize) -> (ParamStore, MultiHeadAttention) {
    let mut store = ParamStore::new();
    let mha = MultiHeadAttention::new(&mut store, "attn", d, heads, &mut rng(0)).unwrap();
    for lin in [&mha.query, &mha.key, &mha.value, &mha.output] {
        let w = store.get_mut(lin.weight).data_mut();
        w.fill(0.0);
        for i in 0..d {
            w[i * d + i] = 1.0;
        }
    }
    (store, mha)
}

#[test]
fn attention_saturates_on_matching_key() {
    let (store, mha) = identity_attention(4, 1);
    let scale = 40.0;
    let mut t = Tape::new();
    let q = t.constant(&[1, 4], vec![0.0, scale, 0.0, 0.0]).unwrap();
    let k = t
        .constant(
            &[3, 4],
            vec![scale, 0.0, 0.0, 0.0, 0.0, scale, 0.0, 0.0, 0.0, 0.0, scale, 0.0],
        )
        .unwrap();
    let v = t
        .constant(&[3, 4], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 10.0, 11.0, 12.0])
        .unwrap();
    let y = mha.forward(&mut t, &store, q, k, v, None).unwrap();
    close(t.value(y), &[5.0, 6.0, 7.0, 8.0], 1e-9);
}

#[test]
fn attention_rejects_indivisible_heads() {
    let mut store = ParamStore::new();
    let err = MultiHeadAttention::new(&mut store, "a", 10, 3, &mut rng(0)).unwrap_err();
    assert!(matches!(err, Error::Invalid(_)));
}

#[test]
fn causal_mask_hides_future_positions() {
    let mut store = ParamStore::new();
    let mha = MultiHeadAttention::new(&mut store, "a", 8, 2, &mut rng(1)).unwrap();
    let x = random(&[5, 8], 17);
    let mut y = x.clone();
    // perturb positions 3 and 4
    for v in &mut y.data_mut()[3 * 8..] {
        *v += 0.75;
    }
    let run = |input: &Tensor| {
        let mut t = Tape::new();
        let v = t.leaf(input);
        let out = mha.forward(&mut t, &store, v, v, v, Some(&causal_mask(5))).unwrap();
        t.value(out).to_vec()
    };
    let (a, b) = (run(&x), run(&y));
    assert_eq!(&a[..3 * 8], &b[..3 * 8]);
    assert_ne!(&a[3 * 8..], &b[3 * 8..]);
}

#[test]
fn attention_gradients() {
    let mut store = ParamStore::new();
    let mha = MultiHeadAttention::new(&mut store, "a", 8, 2, &mut rng(2)).unwrap();
    let q = random(&[5, 8], 18);
    let kv = random(&[7, 8], 19);
    let wrt_q = finite_difference_check(
        |t, x| {
            let kvv = t.leaf(&kv);
            let y = mha.forward(t, &store, x, kvv, kvv, None)?;
            project(t, y, 20)
        },
        &q,
        DEFAULT_EPS,
    )
    .unwrap();
    let wrt_kv = finite_difference_check(
        |t, x| {
            let qv = t.leaf(&q);
            let y = mha.forward(t, &store, qv, x, x, None)?;
            project(t, y, 20)
        },
        &kv,
        DEFAULT_EPS,
    )
    .unwrap();
    assert!(wrt_q < 1e-5 && wrt_kv < 1e-5, "{wrt_q} {wrt_kv}");

    // softmax is shift-invariant, so the key bias gradient is identically zero
    let coords: Vec<_> = store
        .ids()
        .filter(|&id| id != mha.key.bias)
        .flat_map(|id| (0..store.get(id).numel()).step_by(7).map(move |i| (id, i)))
        .collect();
    let wrt_params = finite_difference_check_params(
        |t, s| {
            let (qv, kvv) = (t.leaf(&q), t.leaf(&kv));
            let y = mha.forward(t, s, qv, kvv, kvv, None)?;
            project(t, y, 20)
        },
        &mut store,
        &coords,
        DEFAULT_EPS,
    )
    .unwrap();
    assert!(wrt_params < 1e-5, "{wrt_params}");
}

// ---- losses -----------------------------------------------------------------

#[test]
fn cross_entropy_saturated_and_uniform() {
    let mut t = Tape::new();
    let sat = t.constant(&[2, 3], vec![50.0, 0.0, 0.0, 0.0, 0.0, 50.0]).unwrap();
    let l = t.cross_entropy(sat, &[0, 2], 99).unwrap();
    assert!(t.scalar(l) < 1e-20);

    let uni = t.constant(&[3, 4], vec![0.3; 12]).unwrap();
    let l = t.cross_entropy(uni, &[0, 1, 3], 99).unwrap();
    assert!((t.scalar(l) - 4f64.ln()).abs() < 1e-15);
}

#[test]
fn cross_entropy_skips_padding() {
    let mut t = Tape::new();
    let x = t.constant(&[2, 2], vec![0.0, 0.0, 100.0, -100.0]).unwrap();
    // second row's target is padding and must not count
    let l = t.cross_entropy(x, &[1, 0], 0).unwrap();
    assert!((t.scalar(l) - 2f64.ln()).abs() < 1e-15);
    let all_pad = t.cross_entropy(x, &[0, 0], 0).unwrap();
    assert_eq!(t.scalar(all_pad), 0.0);
}

#[test]
fn cross_entropy_rejects_out_of_range_target() {
    let mut t = Tape::new();
    let x = t.constant(&[1, 3], vec![0.0; 3]).unwrap();
    assert!(matches!(
        t.cross_entropy(x, &[3], 0),
        Err(Error::TargetOutOfRange { target: 3, classes: 3 })
    ));
}

#[test]
fn cross_entropy_gradient() {
    let x = random(&[4, 6], 21);
    let err = finite_difference_check(|t, v| t.cross_entropy(v, &[1, 0, 5, 2], 0), &x, DEFAULT_EPS)
        .unwrap();
    assert!(err < 1e-6, "{err}");
}

fn asl(probs: &[f64], labels: &[f64], prm: AsymmetricLossParams) -> f64 {
    let mut t = Tape::new();
    let p = t.constant(&[probs.len()], probs.to_vec()).unwrap();
    let l = t.asymmetric_loss(p, labels, prm).unwrap();
    t.scalar(l)
}

#[test]
fn asymmetric_loss_examples() {
    let prm = AsymmetricLossParams::default();
    // certain positive
    assert!(asl(&[1.0], &[1.0], prm) < 1e-6);
    // negative sitting exactly at the clip margin
    assert_eq!(asl(&[prm.clip], &[0.0], prm), 0.0);
    // hand evaluations
    assert!((asl(&[0.6], &[1.0], prm) - (-(0.6f64).ln())).abs() < 1e-12);
    assert!((asl(&[0.6], &[1.0], prm) - 0.5108).abs() < 1e-4);
    let neg = -(0.55f64).powi(4) * (0.45f64).ln();
    assert!((asl(&[0.6], &[0.0], prm) - neg).abs() < 1e-12);
    assert!((asl(&[0.6], &[0.0], prm) - 0.0731).abs() < 1e-4);
    // mean over classes
    let both = asl(&[0.6, 0.6], &[1.0, 0.0], prm);
    assert!((both - (-(0.6f64).ln() + neg) / 2.0).abs() < 1e-12);
}

#[test]
fn asymmetric_loss_gradient() {
    let p = Tensor::new(&[6], vec![0.2, 0.7, 0.45, 0.9, 0.3, 0.61]).unwrap();
    let labels = [1.0, 0.0, 1.0, 0.0, 0.0, 1.0];
    for prm in [
        AsymmetricLossParams::default(),
        AsymmetricLossParams {
            gamma_pos: 1.0,
            gamma_neg: 2.0,
            clip: 0.1,
            ..Default::default()
        },
        AsymmetricLossParams {
            gamma_pos: 0.0,
            gamma_neg: 0.0,
            clip: 0.0,
            ..Default::default()
        },
    ] {
        let err =
            finite_difference_check(|t, v| t.asymmetric_loss(v, &labels, prm), &p, DEFAULT_EPS)
                .unwrap();
        assert!(err < 1e-6, "{prm:?}: {err}");
    }
}

// ---- backward ---------------------------------------------------------------

#[test]
fn backward_of_sum_is_ones() {
    let x = random(&[2, 3], 22);
    let mut t = Tape::new();
    let v = t.leaf(&x);
    let s = t.sum(v).unwrap();
    let g = t.backward(s).unwrap();
    assert_eq!(g.wrt(v).unwrap(), &[1.0; 6]);
}

#[test]
fn backward_of_square_is_twice_input() {
    let mut t = Tape::new();
    let v = t.constant(&[], vec![1.7]).unwrap();
    let sq = t.mul(v, v).unwrap();
    let g = t.backward(sq).unwrap();
    assert_eq!(g.wrt(v).unwrap(), &[3.4]);
}

#[test]
fn backward_requires_scalar() {
    let mut t = Tape::new();
    let v = t.leaf(&Tensor::zeros(&[2]));
    let r = t.relu(v).unwrap();
    assert!(matches!(t.backward(r), Err(Error::NonScalarLoss(_))));
}

#[test]
fn shared_parameters_sum_contributions() {
    let mut store = ParamStore::new();
    let w = store.insert("w", random(&[3], 23));
    let grads_of = |which: u8, store: &ParamStore| {
        let mut t = Tape::new();
        let x = t.param(store, w);
        let f = {
            let sq = t.mul(x, x).unwrap();
            t.sum(sq).unwrap()
        };
        let g = {
            let e = t.sigmoid(x).unwrap();
            t.sum(e).unwrap()
        };
        let loss = match which {
            0 => f,
            1 => g,
            _ => t.add(f, g).unwrap(),
        };
        t.backward(loss).unwrap().param(w).unwrap().to_vec()
    };
    let (gf, gg, gsum) = (grads_of(0, &store), grads_of(1, &store), grads_of(2, &store));
    for i in 0..3 {
        assert_eq!(gsum[i], gf[i] + gg[i]);
    }

    // accumulation across two backward passes into the store
    let mut t = Tape::new();
    let x = t.param(&store, w);
    let s = t.sum(x).unwrap();
    t.backward_into(s, &mut store).unwrap();
    let mut t = Tape::new();
    let x = t.param(&store, w);
    let s = t.sum(x).unwrap();
    t.backward_into(s, &mut store).unwrap();
    assert_eq!(store.get(w).grad().unwrap(), &[2.0; 3]);
}

#[test]
fn two_layer_network_gradients() {
    let mut store = ParamStore::new();
    let mut r = rng(24);
    let l1 = Linear::new(&mut store, "l1", 4, 6, &mut r);
    let l2 = Linear::new(&mut store, "l2", 6, 3, &mut r);
    for id in [l1.bias, l2.bias] {
        *store.get_mut(id) = Tensor::uniform(&[store.get(id).numel()], 0.3, &mut r);
    }
    let x = random(&[5, 4], 25);
    let coords: Vec<_> = store
        .ids()
        .flat_map(|id| (0..store.get(id).numel()).map(move |i| (id, i)))
        .collect();
    let err = finite_difference_check_params(
        |t, s| {
            let xv = t.leaf(&x);
            let h = l1.forward(t, s, xv)?;
            let h = t.sigmoid(h)?;
            let y = l2.forward(t, s, h)?;
            t.cross_entropy(y, &[0, 1, 2, 1, 0], 99)
        },
        &mut store,
        &coords,
        DEFAULT_EPS,
    )
    .unwrap();
    assert!(err < 1e-5, "{err}");
}

#[test]
fn tape_records_in_topological_order() {
    let mut t = Tape::new();
    let a = t.leaf(&random(&[2, 2], 26));
    let b = t.relu(a).unwrap();
    let c = t.matmul(a, b).unwrap();
    assert!(a.index() < b.index() && b.index() < c.index());
    assert_eq!(t.len(), 3);
}

#[test]
fn non_finite_forward_is_an_error() {
    let mut t = Tape::new();
    let x = t.constant(&[1], vec![1e300]).unwrap();
    assert!(matches!(t.scale(x, 1e300), Err(Error::NonFinite("scale"))));
}

#[test]
fn shape_ops_round_trip() {
    let x = random(&[3, 6], 27);
    let mut t = Tape::new();
    let v = t.leaf(&x);
    let h = t.split_heads(v, 2).unwrap();
    assert_eq!(t.shape(h), &[2, 3, 3]);
    let m = t.merge_heads(h).unwrap();
    assert_eq!(t.value(m), x.data());
    let tt = t.transpose(v).unwrap();
    let back = t.transpose(tt).unwrap();
    assert_eq!(t.value(back), x.data());

    let err = finite_difference_check(
        |t, v| {
            let h = t.split_heads(v, 3)?;
            let ht = t.transpose(h)?;
            let r = t.reshape(ht, &[18])?;
            let g = t.gather_rows(r, &[3, 3, 17, 0])?;
            project(t, g, 28)
        },
        &x,
        DEFAULT_EPS,
    )
    .unwrap();
    assert!(err < 1e-8, "{err}");
}

#[test]
fn max_rows_and_pairwise_add_gradients() {
    let x = random(&[4, 5], 29);
    let err = finite_difference_check(
        |t, v| {
            let m = t.max_rows(v)?;
            project(t, m, 30)
        },
        &x,
        DEFAULT_EPS,
    )
    .unwrap();
    assert!(err < 1e-8, "{err}");

    let err = finite_difference_check(
        |t, v| {
            let other = t.leaf(&random(&[4, 5], 31));
            let p = t.pairwise_add(v, other)?;
            let q = t.pairwise_add(other, v)?;
            let s = t.add(p, q)?;
            project(t, s, 32)
        },
        &x,
        DEFAULT_EPS,
    )
    .unwrap();
    assert!(err < 1e-8, "{err}");
}

proptest! {
    #[test]
    fn softmax_rows_are_stochastic(vals in prop::collection::vec(-1e3f64..1e3, 1..40)) {
        let mut t = Tape::new();
        let n = vals.len();
        let x = t.constant(&[1, n], vals).unwrap();
        let y = t.softmax(x, 1).unwrap();
        let s: f64 = t.value(y).iter().sum();
        prop_assert!((s - 1.0).abs() < 1e-12);
        prop_assert!(t.value(y).iter().all(|p| p.is_finite() && *p >= 0.0));
    }

    #[test]
    fn layer_norm_output_is_centred(vals in prop::collection::vec(-1e3f64..1e3, 2..40)) {
        let mut t = Tape::new();
        let n = vals.len();
        let x = t.constant(&[n], vals).unwrap();
        let y = layer_norm_unit(&mut t, x).unwrap();
        let mean = t.value(y).iter().sum::<f64>() / n as f64;
        prop_assert!(mean.abs() < 1e-10);
    }
}

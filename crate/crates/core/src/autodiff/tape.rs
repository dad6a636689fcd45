//! Append-only gradient tape.
//!
//! Every forward op pushes one node whose inputs are already on the tape, so
//! node order is a topological order and the backward sweep is a single pass
//! in reverse.

use super::kernels::{gemm_nn, gemm_nt, gemm_tn};
use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{invalid, Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Settings for [`Tape::asymmetric_loss`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AsymmetricLossParams {
    pub gamma_pos: f64,
    pub gamma_neg: f64,
    pub clip: f64,
    pub eps: f64,
}

impl Default for AsymmetricLossParams {
    fn default() -> Self {
        Self {
            gamma_pos: 0.0,
            gamma_neg: 4.0,
            clip: 0.05,
            eps: PROB_EPS,
        }
    }
}

/// Probability clamp used inside the losses.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Shift(Var),
    MulConst(Var, Vec<f64>),
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        a_batched: bool,
        b_batched: bool,
    },
    TransposeLast2(Var),
    Reshape(Var),
    Relu(Var),
    Sigmoid(Var),
    Softmax {
        a: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    MaskedSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        rstd: Vec<f64>,
    },
    GatherRows(Var, Vec<usize>),
    SplitHeads(Var, usize),
    MergeHeads(Var),
    MaxRows(Var, Vec<usize>),
    PairwiseAdd(Var, Var),
    Sum(Var),
    Mean(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<f64>,
        count: usize,
    },
    AsymmetricLoss(Var, Vec<f64>),
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

/// Result of a backward sweep: gradients of every leaf and parameter node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    /// Gradient with respect to a leaf or parameter node; `None` if the node
    /// did not influence the loss.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn param(&self, id: ParamId) -> Option<&[f64]> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .and_then(|(_, v)| self.wrt(*v))
    }

    /// Adds parameter gradients into the store's gradient buffers.
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        for &(id, v) in &self.params {
            if let Some(g) = self.wrt(v) {
                store.get_mut(id).accumulate_grad(g);
            }
        }
    }
}

fn check_finite(data: &[f64], op: &'static str) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(op))
    }
}

fn is_suffix(full: &[usize], suffix: &[usize]) -> bool {
    suffix.len() <= full.len() && full[full.len() - suffix.len()..] == *suffix
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].data[0]
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(&n.shape, n.data.clone()).expect("node shape is consistent")
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node { shape, data, op });
        Var(self.nodes.len() - 1)
    }

    fn push_checked(
        &mut self,
        name: &'static str,
        shape: Vec<usize>,
        data: Vec<f64>,
        op: Op,
    ) -> Result<Var> {
        check_finite(&data, name)?;
        Ok(self.push(shape, data, op))
    }

    /// Records an input (or constant) tensor.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf)
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.leaf(&t))
    }

    /// Records a parameter. Repeated calls for the same id return the same
    /// node, so gradients from every use are summed.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if self.param_vars.len() <= id.0 {
            self.param_vars.resize(id.0 + 1, None);
        }
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let t = store.get(id);
        let v = self.push(t.shape().to_vec(), t.data().to_vec(), Op::Param(id));
        self.param_vars[id.0] = Some(v);
        v
    }

    // ---- elementwise ------------------------------------------------------

    /// `a + b`, where `b`'s shape may be a suffix of `a`'s (broadcast over
    /// leading dimensions).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if !is_suffix(sa, sb) {
            return Err(Error::ShapeMismatch {
                op: "add",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let bd = self.value(b);
        let data: Vec<f64> = self
            .value(a)
            .chunks(bd.len().max(1))
            .flat_map(|c| c.iter().zip(bd).map(|(x, y)| x + y))
            .collect();
        let shape = sa.to_vec();
        self.push_checked("add", shape, data, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let data = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x - y)
            .collect();
        let shape = self.shape(a).to_vec();
        self.push_checked("sub", shape, data, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        self.push_checked("mul", shape, data, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let data = self.value(a).iter().map(|x| x * factor).collect();
        let shape = self.shape(a).to_vec();
        self.push_checked("scale", shape, data, Op::Scale(a, factor))
    }

    /// Adds a constant broadcast over leading dimensions (e.g. an attention
    /// mask). No gradient flows into the constant.
    pub fn shift(&mut self, a: Var, constant: &[f64]) -> Result<Var> {
        let n = self.value(a).len();
        if constant.is_empty() || !n.is_multiple_of(constant.len()) {
            return invalid(format!(
                "shift: constant of {} values does not tile {n}",
                constant.len()
            ));
        }
        let data = self
            .value(a)
            .chunks(constant.len())
            .flat_map(|c| c.iter().zip(constant).map(|(x, y)| x + y))
            .collect();
        let shape = self.shape(a).to_vec();
        self.push_checked("shift", shape, data, Op::Shift(a))
    }

    /// Multiplies by a constant broadcast over leading dimensions.
    pub fn mul_const(&mut self, a: Var, constant: Vec<f64>) -> Result<Var> {
        let n = self.value(a).len();
        if constant.is_empty() || !n.is_multiple_of(constant.len()) {
            return invalid(format!(
                "mul_const: constant of {} values does not tile {n}",
                constant.len()
            ));
        }
        let data = self
            .value(a)
            .chunks(constant.len())
            .flat_map(|c| c.iter().zip(&constant).map(|(x, y)| x * y))
            .collect();
        let shape = self.shape(a).to_vec();
        self.push_checked("mul_const", shape, data, Op::MulConst(a, constant))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let data = self.value(a).iter().map(|&x| x.max(0.0)).collect();
        let shape = self.shape(a).to_vec();
        self.push_checked("relu", shape, data, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let data = self
            .value(a)
            .iter()
            .map(|&x| {
                if x >= 0.0 {
                    1.0 / (1.0 + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (1.0 + e)
                }
            })
            .collect();
        let shape = self.shape(a).to_vec();
        self.push_checked("sigmoid", shape, data, Op::Sigmoid(a))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    // ---- shape ------------------------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(a).len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape(a).to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let data = self.value(a).to_vec();
        Ok(self.push(shape.to_vec(), data, Op::Reshape(a)))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let r = shape.len();
        if r < 2 {
            return invalid(format!("transpose needs rank >= 2, got {shape:?}"));
        }
        let (m, n) = (shape[r - 2], shape[r - 1]);
        let src = self.value(a);
        let mut data = vec![0.0; src.len()];
        for (blk_in, blk_out) in src.chunks(m * n).zip(data.chunks_mut(m * n)) {
            for i in 0..m {
                for j in 0..n {
                    blk_out[j * m + i] = blk_in[i * n + j];
                }
            }
        }
        let mut out_shape = shape;
        out_shape.swap(r - 2, r - 1);
        Ok(self.push(out_shape, data, Op::TransposeLast2(a)))
    }

    /// `[T, H*D] -> [H, T, D]`.
    pub fn split_heads(&mut self, a: Var, heads: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 2 || heads == 0 || !shape[1].is_multiple_of(heads) {
            return invalid(format!(
                "split_heads: shape {shape:?} not divisible into {heads} heads"
            ));
        }
        let (t, d) = (shape[0], shape[1]);
        let dh = d / heads;
        let src = self.value(a);
        let mut data = vec![0.0; src.len()];
        for i in 0..t {
            for h in 0..heads {
                let from = &src[i * d + h * dh..i * d + (h + 1) * dh];
                data[(h * t + i) * dh..(h * t + i + 1) * dh].copy_from_slice(from);
            }
        }
        Ok(self.push(vec![heads, t, dh], data, Op::SplitHeads(a, heads)))
    }

    /// `[H, T, D] -> [T, H*D]`.
    pub fn merge_heads(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 3 {
            return invalid(format!("merge_heads needs rank 3, got {shape:?}"));
        }
        let (heads, t, dh) = (shape[0], shape[1], shape[2]);
        let d = heads * dh;
        let src = self.value(a);
        let mut data = vec![0.0; src.len()];
        for h in 0..heads {
            for i in 0..t {
                data[i * d + h * dh..i * d + (h + 1) * dh]
                    .copy_from_slice(&src[(h * t + i) * dh..(h * t + i + 1) * dh]);
            }
        }
        Ok(self.push(vec![t, d], data, Op::MergeHeads(a)))
    }

    /// Selects rows along the first axis (embedding lookup when `a` is a
    /// parameter table).
    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.is_empty() {
            return invalid("gather_rows on a scalar");
        }
        let n = shape[0];
        let width: usize = shape[1..].iter().product();
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(Error::TargetOutOfRange {
                target: bad,
                classes: n,
            });
        }
        let src = self.value(a);
        let mut data = Vec::with_capacity(rows.len() * width);
        for &r in rows {
            data.extend_from_slice(&src[r * width..(r + 1) * width]);
        }
        let mut out_shape = shape;
        out_shape[0] = rows.len();
        Ok(self.push(out_shape, data, Op::GatherRows(a, rows.to_vec())))
    }

    /// `out[i, j, :] = a[i, :] + b[j, :]` for `a, b: [k, m]`.
    pub fn pairwise_add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("pairwise_add", a, b)?;
        let shape = self.shape(a).to_vec();
        if shape.len() != 2 {
            return invalid(format!("pairwise_add needs rank 2, got {shape:?}"));
        }
        let (k, m) = (shape[0], shape[1]);
        let (av, bv) = (self.value(a), self.value(b));
        let mut data = Vec::with_capacity(k * k * m);
        for i in 0..k {
            for j in 0..k {
                data.extend(
                    av[i * m..(i + 1) * m]
                        .iter()
                        .zip(&bv[j * m..(j + 1) * m])
                        .map(|(x, y)| x + y),
                );
            }
        }
        self.push_checked("pairwise_add", vec![k, k, m], data, Op::PairwiseAdd(a, b))
    }

    // ---- contractions -----------------------------------------------------

    /// Batched matrix product `[.., m, k] x [.., k, n] -> [.., m, n]`.
    ///
    /// Batch dimensions must match, or one side may be a plain matrix that is
    /// broadcast across the other's batch.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let mismatch = || Error::ShapeMismatch {
            op: "matmul",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(mismatch());
        }
        let (ra, rb) = (sa.len(), sb.len());
        let (m, k) = (sa[ra - 2], sa[ra - 1]);
        let (k2, n) = (sb[rb - 2], sb[rb - 1]);
        if k != k2 {
            return Err(mismatch());
        }
        let (ba, bb) = (&sa[..ra - 2], &sb[..rb - 2]);
        let (batch_shape, a_batched, b_batched) = if ba == bb {
            (ba.to_vec(), !ba.is_empty(), !bb.is_empty())
        } else if bb.is_empty() {
            (ba.to_vec(), true, false)
        } else if ba.is_empty() {
            (bb.to_vec(), false, true)
        } else {
            return Err(mismatch());
        };
        let batch: usize = batch_shape.iter().product();
        let (av, bv) = (self.value(a), self.value(b));
        let mut data = vec![0.0; batch * m * n];
        for t in 0..batch {
            let ab = if a_batched { &av[t * m * k..(t + 1) * m * k] } else { av };
            let bbm = if b_batched { &bv[t * k * n..(t + 1) * k * n] } else { bv };
            gemm_nn(ab, bbm, &mut data[t * m * n..(t + 1) * m * n], m, k, n);
        }
        let mut shape = batch_shape;
        shape.extend([m, n]);
        self.push_checked(
            "matmul",
            shape,
            data,
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                a_batched,
                b_batched,
            },
        )
    }

    // ---- reductions and normalisations ------------------------------------

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).iter().sum();
        self.push_checked("sum", Vec::new(), vec![s], Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        if v.is_empty() {
            return Err(Error::Empty("mean input"));
        }
        let s = v.iter().sum::<f64>() / v.len() as f64;
        self.push_checked("mean", Vec::new(), vec![s], Op::Mean(a))
    }

    /// Max over the first axis of a 2-D tensor, `[q, k] -> [k]`. Ties go to
    /// the lowest row.
    pub fn max_rows(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 2 || shape[0] == 0 {
            return invalid(format!("max_rows needs a non-empty matrix, got {shape:?}"));
        }
        let (q, k) = (shape[0], shape[1]);
        let v = self.value(a);
        let mut best = v[..k].to_vec();
        let mut arg = vec![0usize; k];
        for r in 1..q {
            for c in 0..k {
                if v[r * k + c] > best[c] {
                    best[c] = v[r * k + c];
                    arg[c] = r;
                }
            }
        }
        Ok(self.push(vec![k], best, Op::MaxRows(a, arg)))
    }

    /// Row index selected by [`Tape::max_rows`] for each column.
    pub fn max_rows_argmax(&self, v: Var) -> Option<&[usize]> {
        match &self.nodes[v.0].op {
            Op::MaxRows(_, arg) => Some(arg),
            _ => None,
        }
    }

    /// Softmax along `axis`, stabilised by max subtraction.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return invalid(format!("softmax axis {axis} out of range for {shape:?}"));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.value(a);
        let mut data = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |l: usize| (o * len + l) * inner + i;
                let max = (0..len).map(|l| src[idx(l)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for l in 0..len {
                    let e = (src[idx(l)] - max).exp();
                    data[idx(l)] = e;
                    z += e;
                }
                for l in 0..len {
                    data[idx(l)] /= z;
                }
            }
        }
        self.push_checked(
            "softmax",
            shape,
            data,
            Op::Softmax {
                a,
                outer,
                len,
                inner,
            },
        )
    }

    /// Softmax over the last axis restricted to entries where `mask` is set;
    /// masked-out entries are exactly zero. Every row needs at least one
    /// unmasked entry.
    pub fn masked_softmax(&mut self, a: Var, mask: &[bool]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let src = self.value(a);
        if mask.len() != src.len() || shape.is_empty() {
            return invalid(format!(
                "masked_softmax: mask of {} entries for shape {shape:?}",
                mask.len()
            ));
        }
        let len = *shape.last().unwrap();
        let mut data = vec![0.0; src.len()];
        for ((row, m), out) in src
            .chunks(len)
            .zip(mask.chunks(len))
            .zip(data.chunks_mut(len))
        {
            let max = row
                .iter()
                .zip(m)
                .filter(|(_, &keep)| keep)
                .map(|(x, _)| *x)
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return invalid("masked_softmax: a row has no unmasked entries");
            }
            let mut z = 0.0;
            for ((o, &x), &keep) in out.iter_mut().zip(row).zip(m) {
                if keep {
                    *o = (x - max).exp();
                    z += *o;
                }
            }
            out.iter_mut().for_each(|o| *o /= z);
        }
        self.push_checked("masked_softmax", shape, data, Op::MaskedSoftmax(a))
    }

    /// Layer normalisation over the last axis with affine `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap_or(&0);
        if d < 2 {
            return invalid(format!("layer_norm needs last axis >= 2, got {shape:?}"));
        }
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: shape,
                rhs: self.shape(gain).to_vec(),
            });
        }
        let (src, g, b) = (self.value(x), self.value(gain), self.value(bias));
        let rows = src.len() / d;
        let mut data = vec![0.0; src.len()];
        let mut rstd = Vec::with_capacity(rows);
        for (row, out) in src.chunks(d).zip(data.chunks_mut(d)) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let r = 1.0 / (var + eps).sqrt();
            for j in 0..d {
                out[j] = (row[j] - mean) * r * g[j] + b[j];
            }
            rstd.push(r);
        }
        self.push_checked(
            "layer_norm",
            shape,
            data,
            Op::LayerNorm {
                x,
                gain,
                bias,
                rstd,
            },
        )
    }

    // ---- losses -----------------------------------------------------------

    /// Mean negative log-likelihood of `targets` under `softmax(logits)`,
    /// skipping positions whose target is `pad_id`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], pad_id: usize) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != targets.len() {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                lhs: shape,
                rhs: vec![targets.len()],
            });
        }
        let v = shape[1];
        if let Some(&t) = targets.iter().find(|&&t| t >= v) {
            return Err(Error::TargetOutOfRange { target: t, classes: v });
        }
        let src = self.value(logits);
        let mut probs = vec![0.0; src.len()];
        let mut total = 0.0;
        let mut count = 0usize;
        let mut kept = Vec::with_capacity(targets.len());
        for ((row, p), &t) in src.chunks(v).zip(probs.chunks_mut(v)).zip(targets) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|x| (x - max).exp()).sum();
            for (pi, x) in p.iter_mut().zip(row) {
                *pi = (x - max).exp() / z;
            }
            if t == pad_id {
                kept.push(None);
            } else {
                total += -(row[t] - max - z.ln());
                count += 1;
                kept.push(Some(t));
            }
        }
        let loss = if count == 0 { 0.0 } else { total / count as f64 };
        self.push_checked(
            "cross_entropy",
            Vec::new(),
            vec![loss],
            Op::CrossEntropy {
                logits,
                targets: kept,
                probs,
                count,
            },
        )
    }

    /// Asymmetric multi-label loss averaged over classes. Positives contribute
    /// `-(1-p)^gp log p`; negatives `-pm^gn log(1-pm)` with `pm = max(p-clip, 0)`.
    /// Probabilities are clamped to `[eps, 1-eps]`.
    pub fn asymmetric_loss(
        &mut self,
        probs: Var,
        labels: &[f64],
        params: AsymmetricLossParams,
    ) -> Result<Var> {
        let p = self.value(probs);
        if p.len() != labels.len() || p.is_empty() {
            return Err(Error::ShapeMismatch {
                op: "asymmetric_loss",
                lhs: self.shape(probs).to_vec(),
                rhs: vec![labels.len()],
            });
        }
        let k = p.len() as f64;
        let mut total = 0.0;
        let mut local = Vec::with_capacity(p.len());
        for (&raw, &y) in p.iter().zip(labels) {
            let (value, deriv) = asl_term(raw, y > 0.5, &params);
            total += value;
            local.push(deriv / k);
        }
        self.push_checked(
            "asymmetric_loss",
            Vec::new(),
            vec![total / k],
            Op::AsymmetricLoss(probs, local),
        )
    }

    // ---- backward ---------------------------------------------------------

    /// Reverse sweep from a scalar `loss`. Consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        let numel = self.nodes[loss.0].data.len();
        if numel != 1 {
            return Err(Error::NonScalarLoss(self.nodes[loss.0].shape.clone()));
        }
        let nodes = self.nodes;
        let mut grads: Vec<Option<Vec<f64>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &nodes[idx];
            if matches!(node.op, Op::Leaf | Op::Param(_)) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            backprop(&nodes, idx, &g, &mut grads);
        }

        let mut params = Vec::new();
        for (i, n) in nodes.iter().enumerate() {
            match n.op {
                Op::Param(id) => params.push((id, Var(i))),
                Op::Leaf => {}
                _ => grads[i] = None,
            }
        }
        Ok(Gradients { grads, params })
    }

    /// Backward sweep that also accumulates into the parameter store.
    pub fn backward_into(self, loss: Var, store: &mut ParamStore) -> Result<Gradients> {
        let grads = self.backward(loss)?;
        grads.accumulate_into(store);
        Ok(grads)
    }
}

/// Value and derivative of one asymmetric-loss term.
pub(crate) fn asl_term(raw: f64, positive: bool, prm: &AsymmetricLossParams) -> (f64, f64) {
    let eps = prm.eps;
    let clamped = raw < eps || raw > 1.0 - eps;
    let p = raw.clamp(eps, 1.0 - eps);
    if positive {
        let g = prm.gamma_pos;
        let w = (1.0 - p).powf(g);
        let value = -w * p.ln();
        let dw = if g == 0.0 { 0.0 } else { -g * (1.0 - p).powf(g - 1.0) };
        let deriv = -(dw * p.ln() + w / p);
        (value, if clamped { 0.0 } else { deriv })
    } else {
        let pm = (p - prm.clip).max(0.0);
        if pm <= 0.0 {
            return (0.0, 0.0);
        }
        let g = prm.gamma_neg;
        let w = pm.powf(g);
        let value = -w * (1.0 - pm).ln();
        let dw = if g == 0.0 { 0.0 } else { g * pm.powf(g - 1.0) };
        let deriv = -(dw * (1.0 - pm).ln()) + w / (1.0 - pm);
        (value, if clamped { 0.0 } else { deriv })
    }
}

fn accumulate<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> &'a mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].data.len()])
}

fn backprop(nodes: &[Node], idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let node = &nodes[idx];
    match &node.op {
        Op::Leaf | Op::Param(_) => {}
        Op::Add(a, b) => {
            accumulate(grads, nodes, *a)
                .iter_mut()
                .zip(g)
                .for_each(|(x, y)| *x += y);
            let gb = accumulate(grads, nodes, *b);
            let w = gb.len();
            for chunk in g.chunks(w) {
                gb.iter_mut().zip(chunk).for_each(|(x, y)| *x += y);
            }
        }
        Op::Sub(a, b) => {
            accumulate(grads, nodes, *a)
                .iter_mut()
                .zip(g)
                .for_each(|(x, y)| *x += y);
            accumulate(grads, nodes, *b)
                .iter_mut()
                .zip(g)
                .for_each(|(x, y)| *x -= y);
        }
        Op::Mul(a, b) => {
            let (av, bv) = (&nodes[a.0].data, &nodes[b.0].data);
            accumulate(grads, nodes, *a)
                .iter_mut()
                .zip(g.iter().zip(bv))
                .for_each(|(x, (gi, bi))| *x += gi * bi);
            accumulate(grads, nodes, *b)
                .iter_mut()
                .zip(g.iter().zip(av))
                .for_each(|(x, (gi, ai))| *x += gi * ai);
        }
        Op::Scale(a, f) => {
            accumulate(grads, nodes, *a)
                .iter_mut()
                .zip(g)
                .for_each(|(x, y)| *x += y * f);
        }
        Op::Shift(a) | Op::Reshape(a) => {
            accumulate(grads, nodes, *a)
                .iter_mut()
                .zip(g)
                .for_each(|(x, y)| *x += y);
        }
        Op::MulConst(a, c) => {
            let ga = accumulate(grads, nodes, *a);
            let w = c.len();
            for (gchunk, achunk) in g.chunks(w).zip(ga.chunks_mut(w)) {
                for ((x, y), ci) in achunk.iter_mut().zip(gchunk).zip(c) {
                    *x += y * ci;
                }
            }
        }
        Op::Relu(a) => {
            let av = &nodes[a.0].data;
            accumulate(grads, nodes, *a)
                .iter_mut()
                .zip(g.iter().zip(av))
                .for_each(|(x, (gi, ai))| {
                    if *ai > 0.0 {
                        *x += gi
                    }
                });
        }
        Op::Sigmoid(a) => {
            let out = &node.data;
            accumulate(grads, nodes, *a)
                .iter_mut()
                .zip(g.iter().zip(out))
                .for_each(|(x, (gi, s))| *x += gi * s * (1.0 - s));
        }
        Op::MatMul {
            a,
            b,
            batch,
            m,
            k,
            n,
            a_batched,
            b_batched,
        } => {
            let (m, k, n) = (*m, *k, *n);
            let (av, bv) = (&nodes[a.0].data, &nodes[b.0].data);
            {
                let ga = accumulate(grads, nodes, *a);
                for t in 0..*batch {
                    let gt = &g[t * m * n..(t + 1) * m * n];
                    let bt = if *b_batched { &bv[t * k * n..(t + 1) * k * n] } else { bv };
                    let gat = if *a_batched {
                        &mut ga[t * m * k..(t + 1) * m * k]
                    } else {
                        &mut ga[..]
                    };
                    gemm_nt(gt, bt, gat, m, n, k);
                }
            }
            let gb = accumulate(grads, nodes, *b);
            for t in 0..*batch {
                let gt = &g[t * m * n..(t + 1) * m * n];
                let at = if *a_batched { &av[t * m * k..(t + 1) * m * k] } else { av };
                let gbt = if *b_batched {
                    &mut gb[t * k * n..(t + 1) * k * n]
                } else {
                    &mut gb[..]
                };
                gemm_tn(at, gt, gbt, m, k, n);
            }
        }
        Op::TransposeLast2(a) => {
            let r = node.shape.len();
            // node shape is [.., n, m]; input is [.., m, n]
            let (n, m) = (node.shape[r - 2], node.shape[r - 1]);
            let ga = accumulate(grads, nodes, *a);
            for (gin, gout) in g.chunks(m * n).zip(ga.chunks_mut(m * n)) {
                for i in 0..m {
                    for j in 0..n {
                        gout[i * n + j] += gin[j * m + i];
                    }
                }
            }
        }
        Op::SplitHeads(a, heads) => {
            let (t, dh) = (node.shape[1], node.shape[2]);
            let d = heads * dh;
            let ga = accumulate(grads, nodes, *a);
            for i in 0..t {
                for h in 0..*heads {
                    let src = &g[(h * t + i) * dh..(h * t + i + 1) * dh];
                    ga[i * d + h * dh..i * d + (h + 1) * dh]
                        .iter_mut()
                        .zip(src)
                        .for_each(|(x, y)| *x += y);
                }
            }
        }
        Op::MergeHeads(a) => {
            let s = &nodes[a.0].shape;
            let (heads, t, dh) = (s[0], s[1], s[2]);
            let d = heads * dh;
            let ga = accumulate(grads, nodes, *a);
            for h in 0..heads {
                for i in 0..t {
                    let src = &g[i * d + h * dh..i * d + (h + 1) * dh];
                    ga[(h * t + i) * dh..(h * t + i + 1) * dh]
                        .iter_mut()
                        .zip(src)
                        .for_each(|(x, y)| *x += y);
                }
            }
        }
        Op::GatherRows(a, rows) => {
            let width = if rows.is_empty() { 0 } else { g.len() / rows.len() };
            let ga = accumulate(grads, nodes, *a);
            for (r, src) in rows.iter().zip(g.chunks(width.max(1))) {
                ga[r * width..(r + 1) * width]
                    .iter_mut()
                    .zip(src)
                    .for_each(|(x, y)| *x += y);
            }
        }
        Op::PairwiseAdd(a, b) => {
            let (k, m) = (node.shape[0], node.shape[2]);
            {
                let ga = accumulate(grads, nodes, *a);
                for i in 0..k {
                    for j in 0..k {
                        let src = &g[(i * k + j) * m..(i * k + j + 1) * m];
                        ga[i * m..(i + 1) * m]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(x, y)| *x += y);
                    }
                }
            }
            let gb = accumulate(grads, nodes, *b);
            for i in 0..k {
                for j in 0..k {
                    let src = &g[(i * k + j) * m..(i * k + j + 1) * m];
                    gb[j * m..(j + 1) * m]
                        .iter_mut()
                        .zip(src)
                        .for_each(|(x, y)| *x += y);
                }
            }
        }
        Op::Sum(a) => {
            accumulate(grads, nodes, *a).iter_mut().for_each(|x| *x += g[0]);
        }
        Op::Mean(a) => {
            let ga = accumulate(grads, nodes, *a);
            let s = g[0] / ga.len() as f64;
            ga.iter_mut().for_each(|x| *x += s);
        }
        Op::MaxRows(a, arg) => {
            let k = arg.len();
            let ga = accumulate(grads, nodes, *a);
            for (c, &r) in arg.iter().enumerate() {
                ga[r * k + c] += g[c];
            }
        }
        Op::Softmax {
            a,
            outer,
            len,
            inner,
        } => {
            let y = &node.data;
            let ga = accumulate(grads, nodes, *a);
            for o in 0..*outer {
                for i in 0..*inner {
                    let idx = |l: usize| (o * len + l) * inner + i;
                    let dot: f64 = (0..*len).map(|l| g[idx(l)] * y[idx(l)]).sum();
                    for l in 0..*len {
                        ga[idx(l)] += y[idx(l)] * (g[idx(l)] - dot);
                    }
                }
            }
        }
        Op::MaskedSoftmax(a) => {
            let y = &node.data;
            let len = *node.shape.last().unwrap();
            let ga = accumulate(grads, nodes, *a);
            for ((yr, gr), out) in y.chunks(len).zip(g.chunks(len)).zip(ga.chunks_mut(len)) {
                let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                for ((o, yi), gi) in out.iter_mut().zip(yr).zip(gr) {
                    *o += yi * (gi - dot);
                }
            }
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            rstd,
        } => {
            let d = *node.shape.last().unwrap();
            let xv = &nodes[x.0].data;
            let gv = &nodes[gain.0].data;
            let mut dgain = vec![0.0; d];
            let mut dbias = vec![0.0; d];
            let mut xhat = vec![0.0; d];
            let mut dxhat = vec![0.0; d];
            {
                let gx = accumulate(grads, nodes, *x);
                for (r, (row, grow)) in xv.chunks(d).zip(g.chunks(d)).enumerate() {
                    let mean = row.iter().sum::<f64>() / d as f64;
                    let rs = rstd[r];
                    for j in 0..d {
                        xhat[j] = (row[j] - mean) * rs;
                        dxhat[j] = grow[j] * gv[j];
                        dgain[j] += grow[j] * xhat[j];
                        dbias[j] += grow[j];
                    }
                    let m1 = dxhat.iter().sum::<f64>() / d as f64;
                    let m2 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    let out = &mut gx[r * d..(r + 1) * d];
                    for j in 0..d {
                        out[j] += rs * (dxhat[j] - m1 - xhat[j] * m2);
                    }
                }
            }
            accumulate(grads, nodes, *gain)
                .iter_mut()
                .zip(&dgain)
                .for_each(|(a, b)| *a += b);
            accumulate(grads, nodes, *bias)
                .iter_mut()
                .zip(&dbias)
                .for_each(|(a, b)| *a += b);
        }
        Op::CrossEntropy {
            logits,
            targets,
            probs,
            count,
        } => {
            if *count == 0 {
                return;
            }
            let v = probs.len() / targets.len();
            let scale = g[0] / *count as f64;
            let gl = accumulate(grads, nodes, *logits);
            for (r, t) in targets.iter().enumerate() {
                let Some(t) = *t else { continue };
                let row = &mut gl[r * v..(r + 1) * v];
                for (j, x) in row.iter_mut().enumerate() {
                    let onehot = if j == t { 1.0 } else { 0.0 };
                    *x += scale * (probs[r * v + j] - onehot);
                }
            }
        }
        Op::AsymmetricLoss(p, local) => {
            accumulate(grads, nodes, *p)
                .iter_mut()
                .zip(local)
                .for_each(|(x, d)| *x += g[0] * d);
        }
    }
}

use std::sync::atomic::{AtomicU32, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Target value marking a position that contributes no loss.
pub const IGNORE_INDEX: i64 = -1;

static NEXT_TAPE_ID: AtomicU32 = AtomicU32::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u32,
    index: usize,
}

/// Vector-Jacobian product of a custom op: `(output grad, inputs) -> input grads`.
pub type CustomBackward<T> = Box<dyn Fn(&Tensor<T>, &[&Tensor<T>]) -> Vec<Tensor<T>> + Send>;

enum Op<T> {
    Leaf,
    MatMul { a: usize, b: usize, shared: bool },
    Add { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { a: usize, factor: T },
    Gelu { a: usize },
    Tanh { a: usize },
    Softmax { a: usize },
    LayerNorm { x: usize, gain: usize, bias: usize, xhat: Vec<T>, rstd: Vec<T> },
    Gather { table: usize, ids: Vec<usize> },
    Concat { inputs: Vec<usize>, axis: usize },
    Slice { a: usize, axis: usize, start: usize },
    Transpose { a: usize },
    Reshape { a: usize },
    Sum { a: usize },
    CrossEntropy { logits: usize, targets: Vec<i64>, probs: Vec<T>, count: usize },
    Dropout { a: usize, mask: Vec<T> },
    Custom { inputs: Vec<usize>, backward: CustomBackward<T> },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Add { .. } => "add",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::Gelu { .. } => "gelu",
            Op::Tanh { .. } => "tanh",
            Op::Softmax { .. } => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gather { .. } => "gather",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Transpose { .. } => "transpose",
            Op::Reshape { .. } => "reshape",
            Op::Sum { .. } => "sum",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Dropout { .. } => "dropout",
            Op::Custom { .. } => "custom",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    trainable: bool,
    requires_grad: bool,
}

/// Wengert list of executed ops. Confined to one thread of work.
pub struct Tape<T: Real> {
    id: u32,
    nodes: Vec<Node<T>>,
    rng: ChaCha8Rng,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    tape: u32,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        if var.tape != self.tape {
            return None;
        }
        self.grads.get(var.index).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<T>> {
        if var.tape != self.tape {
            return None;
        }
        self.grads.get_mut(var.index).and_then(Option::take)
    }
}

/// `(outer, extent, inner)` around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn gelu_parts<T: Real>(x: T) -> (T, T) {
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let k = T::lit(0.044715);
    let half = T::lit(0.5);
    let one = T::one();
    let u = c * (x + k * x * x * x);
    let t = u.tanh();
    let y = half * x * (one + t);
    let dy = half * (one + t) + half * x * (one - t * t) * c * (one + T::lit(3.0) * k * x * x);
    (y, dy)
}

fn accumulate<T: Real>(slot: &mut Option<Vec<T>>, len: usize, f: impl FnOnce(&mut [T])) {
    let buf = slot.get_or_insert_with(|| vec![T::zero(); len]);
    f(buf);
}

fn add_into<T: Real>(slot: &mut Option<Vec<T>>, contribution: Vec<T>) {
    match slot {
        Some(buf) => buf.iter_mut().zip(contribution).for_each(|(b, c)| *b = *b + c),
        None => *slot = Some(contribution),
    }
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self::with_seed(0)
    }

    /// A tape whose dropout masks are drawn from a stream seeded by `seed`.
    pub fn with_seed(seed: u64) -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a constant input.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_node(value, Op::Leaf, false, false)
    }

    /// Records a trainable input; it always receives a gradient.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push_node(value, Op::Leaf, true, true)
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        assert_eq!(var.tape, self.id, "variable from another tape");
        &self.nodes[var.index].value
    }

    fn push_node(&mut self, value: Tensor<T>, op: Op<T>, trainable: bool, requires_grad: bool) -> Var {
        let index = self.nodes.len();
        self.nodes.push(Node { value, op, trainable, requires_grad });
        Var { tape: self.id, index }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[usize]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op.name(), step: None });
        }
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        Ok(self.push_node(value, op, false, requires_grad))
    }

    fn idx(&self, var: Var) -> Result<usize> {
        if var.tape != self.id || var.index >= self.nodes.len() {
            return Err(Error::ForeignVar);
        }
        Ok(var.index)
    }

    fn val(&self, index: usize) -> &Tensor<T> {
        &self.nodes[index].value
    }

    /// Matrix product over the last two axes.
    ///
    /// `b` is either a rank-2 matrix shared by every leading index of `a`, or
    /// has the same leading axes as `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        let (sa, sb) = (self.val(ai).shape().to_vec(), self.val(bi).shape().to_vec());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}: rank < 2")));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != kb {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let shared = sb.len() == 2;
        if !shared && sa[..sa.len() - 2] != sb[..sb.len() - 2] {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}: batch axes differ")));
        }
        let mut shape = sa[..sa.len() - 1].to_vec();
        shape.push(n);
        let mut out = vec![T::zero(); shape.iter().product()];
        let (av, bv) = (self.val(ai).data(), self.val(bi).data());
        if shared {
            let rows = sa[..sa.len() - 1].iter().product();
            T::gemm(rows, k, n, av, (k, 1), bv, (n, 1), &mut out, false);
        } else {
            let batch = out.len() / (m * n).max(1);
            for t in 0..batch {
                T::gemm(
                    m,
                    k,
                    n,
                    &av[t * m * k..(t + 1) * m * k],
                    (k, 1),
                    &bv[t * k * n..(t + 1) * k * n],
                    (n, 1),
                    &mut out[t * m * n..(t + 1) * m * n],
                    false,
                );
            }
        }
        let value = Tensor::from_vec(shape, out)?;
        self.push(value, Op::MatMul { a: ai, b: bi, shared }, &[ai, bi])
    }

    fn check_suffix(op: &'static str, sa: &[usize], sb: &[usize]) -> Result<()> {
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::shape(op, format!("{sb:?} does not broadcast onto {sa:?}")));
        }
        Ok(())
    }

    /// `a + b`, where `b`'s shape is a trailing suffix of `a`'s (broadcast over leading axes).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        let (ta, tb) = (self.val(ai), self.val(bi));
        Self::check_suffix("add", ta.shape(), tb.shape())?;
        let nb = tb.numel();
        let data = ta.data().iter().enumerate().map(|(i, &x)| x + tb.data()[i % nb]).collect();
        let value = Tensor::from_vec(ta.shape().to_vec(), data)?;
        self.push(value, Op::Add { a: ai, b: bi }, &[ai, bi])
    }

    /// Elementwise `a * b` with the same suffix broadcasting as [`Tape::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        let (ta, tb) = (self.val(ai), self.val(bi));
        Self::check_suffix("mul", ta.shape(), tb.shape())?;
        let nb = tb.numel();
        let data = ta.data().iter().enumerate().map(|(i, &x)| x * tb.data()[i % nb]).collect();
        let value = Tensor::from_vec(ta.shape().to_vec(), data)?;
        self.push(value, Op::Mul { a: ai, b: bi }, &[ai, bi])
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Result<Var> {
        let ai = self.idx(a)?;
        let value = self.val(ai).map(|x| x * factor);
        self.push(value, Op::Scale { a: ai, factor }, &[ai])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let ai = self.idx(a)?;
        let value = self.val(ai).map(|x| gelu_parts(x).0);
        self.push(value, Op::Gelu { a: ai }, &[ai])
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let ai = self.idx(a)?;
        let value = self.val(ai).map(|x| x.tanh());
        self.push(value, Op::Tanh { a: ai }, &[ai])
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let ai = self.idx(a)?;
        let t = self.val(ai);
        let d = *t.shape().last().ok_or_else(|| Error::shape("softmax", "rank-0 input"))?;
        let mut out = t.data().to_vec();
        if d > 0 {
            for row in out.chunks_mut(d) {
                let max = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
                let mut sum = T::zero();
                for x in row.iter_mut() {
                    *x = (*x - max).exp();
                    sum = sum + *x;
                }
                row.iter_mut().for_each(|x| *x = *x / sum);
            }
        }
        let value = Tensor::from_vec(t.shape().to_vec(), out)?;
        self.push(value, Op::Softmax { a: ai }, &[ai])
    }

    /// Normalizes over the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (xi, gi, bi) = (self.idx(x)?, self.idx(gain)?, self.idx(bias)?);
        let (tx, tg, tb) = (self.val(xi), self.val(gi), self.val(bi));
        let d = *tx.shape().last().ok_or_else(|| Error::shape("layer_norm", "rank-0 input"))?;
        if tg.shape() != [d] || tb.shape() != [d] {
            return Err(Error::shape(
                "layer_norm",
                format!("gain {:?} / bias {:?} vs last axis {d}", tg.shape(), tb.shape()),
            ));
        }
        let eps = T::lit(eps);
        let dt = T::from_usize(d).unwrap();
        let rows = tx.numel() / d.max(1);
        let mut xhat = vec![T::zero(); tx.numel()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); tx.numel()];
        for r in 0..rows {
            let row = &tx.data()[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dt;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dt;
            let rs = (var + eps).sqrt().recip();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * tg.data()[j] + tb.data()[j];
            }
        }
        let value = Tensor::from_vec(tx.shape().to_vec(), out)?;
        self.push(value, Op::LayerNorm { x: xi, gain: gi, bias: bi, xhat, rstd }, &[xi, gi, bi])
    }

    /// Gathers rows of a rank-2 `table`; output shape is `ids_shape ++ [row width]`.
    pub fn gather(&mut self, table: Var, ids: &[usize], ids_shape: &[usize]) -> Result<Var> {
        let ti = self.idx(table)?;
        let t = self.val(ti);
        if t.rank() != 2 || ids_shape.iter().product::<usize>() != ids.len() {
            return Err(Error::shape(
                "gather",
                format!("table {:?}, {} ids for shape {ids_shape:?}", t.shape(), ids.len()),
            ));
        }
        let (rows, d) = (t.shape()[0], t.shape()[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::shape("gather", format!("id {bad} out of range for {rows} rows")));
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&t.data()[i * d..(i + 1) * d]);
        }
        let mut shape = ids_shape.to_vec();
        shape.push(d);
        let value = Tensor::from_vec(shape, out)?;
        self.push(value, Op::Gather { table: ti, ids: ids.to_vec() }, &[ti])
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let idx: Vec<usize> = inputs.iter().map(|&v| self.idx(v)).collect::<Result<_>>()?;
        let first = self.val(*idx.first().ok_or(Error::Empty("concat inputs"))?).shape().to_vec();
        if axis >= first.len() {
            return Err(Error::shape("concat", format!("axis {axis} for rank {}", first.len())));
        }
        let mut total = 0;
        for &i in &idx {
            let s = self.val(i).shape();
            if s.len() != first.len()
                || s[..axis] != first[..axis]
                || s[axis + 1..] != first[axis + 1..]
            {
                return Err(Error::shape("concat", format!("{s:?} vs {first:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &i in &idx {
                let t = self.val(i);
                let w = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * w..(o + 1) * w]);
            }
        }
        let value = Tensor::from_vec(shape, out)?;
        self.push(value, Op::Concat { inputs: idx.clone(), axis }, &idx)
    }

    /// Keeps `start..end` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let ai = self.idx(a)?;
        let t = self.val(ai);
        if axis >= t.rank() || start > end || end > t.shape()[axis] {
            return Err(Error::shape(
                "slice",
                format!("{start}..{end} on axis {axis} of {:?}", t.shape()),
            ));
        }
        let (outer, dim, inner) = split_axis(t.shape(), axis);
        let w = end - start;
        let mut out = Vec::with_capacity(outer * w * inner);
        for o in 0..outer {
            let base = o * dim * inner;
            out.extend_from_slice(&t.data()[base + start * inner..base + end * inner]);
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = w;
        let value = Tensor::from_vec(shape, out)?;
        self.push(value, Op::Slice { a: ai, axis, start }, &[ai])
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ai = self.idx(a)?;
        let t = self.val(ai);
        let r = t.rank();
        if r < 2 {
            return Err(Error::shape("transpose", format!("rank {r}")));
        }
        let (m, n) = (t.shape()[r - 2], t.shape()[r - 1]);
        let mut out = vec![T::zero(); t.numel()];
        for (b, chunk) in t.data().chunks(m * n.max(1)).enumerate() {
            let dst = &mut out[b * m * n..(b + 1) * m * n];
            for i in 0..m {
                for j in 0..n {
                    dst[j * m + i] = chunk[i * n + j];
                }
            }
        }
        let mut shape = t.shape().to_vec();
        shape.swap(r - 2, r - 1);
        let value = Tensor::from_vec(shape, out)?;
        self.push(value, Op::Transpose { a: ai }, &[ai])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let ai = self.idx(a)?;
        let value = self.val(ai).clone().reshaped(shape.to_vec())?;
        self.push(value, Op::Reshape { a: ai }, &[ai])
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let ai = self.idx(a)?;
        let s = self.val(ai).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum { a: ai }, &[ai])
    }

    /// Mean softmax cross-entropy of `logits` (`[.., classes]`) against integer targets.
    ///
    /// Rows whose target equals `ignore_index` contribute nothing. When every
    /// row is ignored the loss is zero.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[i64], ignore_index: i64) -> Result<Var> {
        let li = self.idx(logits)?;
        let t = self.val(li);
        let c = *t.shape().last().ok_or_else(|| Error::shape("cross_entropy", "rank-0 logits"))?;
        let rows = t.numel() / c.max(1);
        if targets.len() != rows {
            return Err(Error::shape(
                "cross_entropy",
                format!("{} targets for {rows} rows", targets.len()),
            ));
        }
        let mut probs = vec![T::zero(); t.numel()];
        let mut loss = T::zero();
        let mut count = 0usize;
        for (r, &target) in targets.iter().enumerate() {
            if target == ignore_index {
                continue;
            }
            if target < 0 || target as usize >= c {
                return Err(Error::shape("cross_entropy", format!("target {target} for {c} classes")));
            }
            let row = &t.data()[r * c..(r + 1) * c];
            let max = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
            let sum: T = row.iter().map(|&x| (x - max).exp()).sum();
            let lse = max + sum.ln();
            for j in 0..c {
                probs[r * c + j] = (row[j] - lse).exp();
            }
            loss = loss + lse - row[target as usize];
            count += 1;
        }
        if count > 0 {
            loss = loss / T::from_usize(count).unwrap();
        }
        let op = Op::CrossEntropy { logits: li, targets: targets.to_vec(), probs, count };
        self.push(Tensor::scalar(loss), op, &[li])
    }

    /// Inverted dropout. Identity (and not recorded) outside training or at rate 0.
    pub fn dropout(&mut self, a: Var, rate: f64, train: bool) -> Result<Var> {
        let ai = self.idx(a)?;
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !train || rate == 0.0 {
            return Ok(a);
        }
        let keep = T::lit(1.0 / (1.0 - rate));
        let n = self.val(ai).numel();
        let mask: Vec<T> = (0..n)
            .map(|_| if self.rng.random::<f64>() < rate { T::zero() } else { keep })
            .collect();
        let t = self.val(ai);
        let data = t.data().iter().zip(&mask).map(|(&x, &m)| x * m).collect();
        let value = Tensor::from_vec(t.shape().to_vec(), data)?;
        self.push(value, Op::Dropout { a: ai, mask }, &[ai])
    }

    /// Records an op whose forward value is computed by the caller and whose
    /// backward is supplied as a closure.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor<T>, backward: CustomBackward<T>) -> Result<Var> {
        let idx: Vec<usize> = inputs.iter().map(|&v| self.idx(v)).collect::<Result<_>>()?;
        self.push(value, Op::Custom { inputs: idx.clone(), backward }, &idx)
    }

    /// Reverse pass from a scalar `loss`.
    ///
    /// Every trainable leaf gets a gradient; leaves that did not contribute
    /// get zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let li = self.idx(loss)?;
        let lv = self.val(li);
        if lv.numel() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[li] = Some(vec![T::one()]);

        for i in (0..=li).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads)?;
        }

        let mut out = Vec::with_capacity(self.nodes.len());
        for (node, g) in self.nodes.iter().zip(grads) {
            let tensor = match (g, node.trainable) {
                (Some(g), true) => {
                    let t = Tensor::from_vec(node.value.shape().to_vec(), g)?;
                    if !t.is_finite() {
                        return Err(Error::NonFinite { op: "backward", step: None });
                    }
                    Some(t)
                }
                (None, true) => Some(Tensor::zeros(node.value.shape().to_vec())),
                _ => None,
            };
            out.push(tensor);
        }
        Ok(Gradients { tape: self.id, grads: out })
    }

    fn needs(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    fn backward_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, shared } => {
                let (ta, tb) = (self.val(a), self.val(b));
                let sb = tb.shape();
                let (k, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
                let rows = ta.shape()[..ta.rank() - 1].iter().product();
                if shared {
                    if self.needs(a) {
                        accumulate(&mut grads[a], ta.numel(), |ga| {
                            T::gemm(rows, n, k, g, (n, 1), tb.data(), (1, n), ga, true)
                        });
                    }
                    if self.needs(b) {
                        accumulate(&mut grads[b], tb.numel(), |gb| {
                            T::gemm(k, rows, n, ta.data(), (1, k), g, (n, 1), gb, true)
                        });
                    }
                } else {
                    let sa = ta.shape();
                    let m = sa[sa.len() - 2];
                    let batch = ta.numel() / (m * k).max(1);
                    if self.needs(a) {
                        accumulate(&mut grads[a], ta.numel(), |ga| {
                            for t in 0..batch {
                                T::gemm(
                                    m,
                                    n,
                                    k,
                                    &g[t * m * n..(t + 1) * m * n],
                                    (n, 1),
                                    &tb.data()[t * k * n..(t + 1) * k * n],
                                    (1, n),
                                    &mut ga[t * m * k..(t + 1) * m * k],
                                    true,
                                );
                            }
                        });
                    }
                    if self.needs(b) {
                        accumulate(&mut grads[b], tb.numel(), |gb| {
                            for t in 0..batch {
                                T::gemm(
                                    k,
                                    m,
                                    n,
                                    &ta.data()[t * m * k..(t + 1) * m * k],
                                    (1, k),
                                    &g[t * m * n..(t + 1) * m * n],
                                    (n, 1),
                                    &mut gb[t * k * n..(t + 1) * k * n],
                                    true,
                                );
                            }
                        });
                    }
                }
            }
            &Op::Add { a, b } => {
                if self.needs(b) {
                    let nb = self.val(b).numel();
                    accumulate(&mut grads[b], nb, |gb| {
                        for (i, &x) in g.iter().enumerate() {
                            gb[i % nb] = gb[i % nb] + x;
                        }
                    });
                }
                if self.needs(a) {
                    add_into(&mut grads[a], g.to_vec());
                }
            }
            &Op::Mul { a, b } => {
                let (ta, tb) = (self.val(a), self.val(b));
                let nb = tb.numel();
                if self.needs(a) {
                    let ga = g.iter().enumerate().map(|(i, &x)| x * tb.data()[i % nb]).collect();
                    add_into(&mut grads[a], ga);
                }
                if self.needs(b) {
                    accumulate(&mut grads[b], nb, |gb| {
                        for (i, &x) in g.iter().enumerate() {
                            gb[i % nb] = gb[i % nb] + x * ta.data()[i];
                        }
                    });
                }
            }
            &Op::Scale { a, factor } => {
                add_into(&mut grads[a], g.iter().map(|&x| x * factor).collect());
            }
            &Op::Gelu { a } => {
                let x = self.val(a).data();
                add_into(&mut grads[a], g.iter().zip(x).map(|(&gi, &xi)| gi * gelu_parts(xi).1).collect());
            }
            &Op::Tanh { a } => {
                let y = node.value.data();
                add_into(
                    &mut grads[a],
                    g.iter().zip(y).map(|(&gi, &yi)| gi * (T::one() - yi * yi)).collect(),
                );
            }
            &Op::Softmax { a } => {
                let y = node.value.data();
                let d = *node.value.shape().last().unwrap();
                let mut ga = vec![T::zero(); y.len()];
                if d > 0 {
                    for ((yr, gr), out) in y.chunks(d).zip(g.chunks(d)).zip(ga.chunks_mut(d)) {
                        let dot: T = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                        for j in 0..d {
                            out[j] = yr[j] * (gr[j] - dot);
                        }
                    }
                }
                add_into(&mut grads[a], ga);
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let (x, gain, bias) = (*x, *gain, *bias);
                let gamma = self.val(gain).data();
                let d = gamma.len();
                let dt = T::from_usize(d).unwrap();
                if self.needs(gain) {
                    accumulate(&mut grads[gain], d, |gg| {
                        for (i, (&gi, &h)) in g.iter().zip(xhat).enumerate() {
                            gg[i % d] = gg[i % d] + gi * h;
                        }
                    });
                }
                if self.needs(bias) {
                    accumulate(&mut grads[bias], d, |gb| {
                        for (i, &gi) in g.iter().enumerate() {
                            gb[i % d] = gb[i % d] + gi;
                        }
                    });
                }
                if self.needs(x) {
                    let mut gx = vec![T::zero(); g.len()];
                    for (r, &rs) in rstd.iter().enumerate() {
                        let span = r * d..(r + 1) * d;
                        let (gr, hr) = (&g[span.clone()], &xhat[span.clone()]);
                        let mut mean_dh = T::zero();
                        let mut mean_dh_h = T::zero();
                        for j in 0..d {
                            let dh = gr[j] * gamma[j];
                            mean_dh = mean_dh + dh;
                            mean_dh_h = mean_dh_h + dh * hr[j];
                        }
                        mean_dh = mean_dh / dt;
                        mean_dh_h = mean_dh_h / dt;
                        for j in 0..d {
                            let dh = gr[j] * gamma[j];
                            gx[r * d + j] = rs * (dh - mean_dh - hr[j] * mean_dh_h);
                        }
                    }
                    add_into(&mut grads[x], gx);
                }
            }
            Op::Gather { table, ids } => {
                let table = *table;
                if !self.needs(table) {
                    return Ok(());
                }
                let t = self.val(table);
                let d = t.shape()[1];
                accumulate(&mut grads[table], t.numel(), |gt| {
                    for (r, &id) in ids.iter().enumerate() {
                        let dst = &mut gt[id * d..(id + 1) * d];
                        for (o, &x) in dst.iter_mut().zip(&g[r * d..(r + 1) * d]) {
                            *o = *o + x;
                        }
                    }
                });
            }
            Op::Concat { inputs, axis } => {
                let (outer, _, inner) = split_axis(node.value.shape(), *axis);
                let total = node.value.shape()[*axis] * inner;
                let mut offset = 0;
                for &i in inputs {
                    let w = self.val(i).shape()[*axis] * inner;
                    if self.needs(i) {
                        let mut gi = Vec::with_capacity(outer * w);
                        for o in 0..outer {
                            gi.extend_from_slice(&g[o * total + offset..o * total + offset + w]);
                        }
                        add_into(&mut grads[i], gi);
                    }
                    offset += w;
                }
            }
            &Op::Slice { a, axis, start } => {
                let t = self.val(a);
                let (outer, dim, inner) = split_axis(t.shape(), axis);
                let w = node.value.shape()[axis] * inner;
                accumulate(&mut grads[a], t.numel(), |ga| {
                    for o in 0..outer {
                        let base = o * dim * inner + start * inner;
                        for (dst, &x) in ga[base..base + w].iter_mut().zip(&g[o * w..(o + 1) * w]) {
                            *dst = *dst + x;
                        }
                    }
                });
            }
            &Op::Transpose { a } => {
                // Output is [.., n, m]; gradient goes back to [.., m, n].
                let s = node.value.shape();
                let (n, m) = (s[s.len() - 2], s[s.len() - 1]);
                let mut ga = vec![T::zero(); g.len()];
                for (b, chunk) in g.chunks(m * n.max(1)).enumerate() {
                    let dst = &mut ga[b * m * n..(b + 1) * m * n];
                    for i in 0..n {
                        for j in 0..m {
                            dst[j * n + i] = chunk[i * m + j];
                        }
                    }
                }
                add_into(&mut grads[a], ga);
            }
            &Op::Reshape { a } => add_into(&mut grads[a], g.to_vec()),
            &Op::Sum { a } => {
                let n = self.val(a).numel();
                add_into(&mut grads[a], vec![g[0]; n]);
            }
            Op::CrossEntropy { logits, targets, probs, count } => {
                if *count == 0 {
                    return Ok(());
                }
                let c = probs.len() / targets.len().max(1);
                let scale = g[0] / T::from_usize(*count).unwrap();
                let mut gl = vec![T::zero(); probs.len()];
                for (r, &target) in targets.iter().enumerate() {
                    if target == IGNORE_INDEX || target < 0 {
                        continue;
                    }
                    for j in 0..c {
                        gl[r * c + j] = probs[r * c + j] * scale;
                    }
                    gl[r * c + target as usize] = gl[r * c + target as usize] - scale;
                }
                add_into(&mut grads[*logits], gl);
            }
            Op::Dropout { a, mask } => {
                add_into(&mut grads[*a], g.iter().zip(mask).map(|(&x, &m)| x * m).collect());
            }
            Op::Custom { inputs, backward } => {
                let go = Tensor::from_vec(node.value.shape().to_vec(), g.to_vec())?;
                let ins: Vec<&Tensor<T>> = inputs.iter().map(|&i| self.val(i)).collect();
                let gs = backward(&go, &ins);
                if gs.len() != inputs.len() {
                    return Err(Error::shape("custom", "backward returned wrong number of gradients"));
                }
                for (&i, gi) in inputs.iter().zip(gs) {
                    if gi.shape() != self.val(i).shape() {
                        return Err(Error::shape("custom", "gradient shape differs from input"));
                    }
                    if self.needs(i) {
                        add_into(&mut grads[i], gi.into_data());
                    }
                }
            }
        }
        Ok(())
    }
}

use super::kernels::{self, Conv2dGeom, ScanDims, ScanInputs, Tap};
use super::{axis_split, flops, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InterpMode {
    Nearest,
    Bilinear,
}

/// Running statistics of a 2-D batch normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState {
    pub running_mean: Option<Vec<f64>>,
    pub running_var: Option<Vec<f64>>,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNormState {
    /// Running mean 0 and variance 1 for `channels` channels.
    pub fn new(channels: usize) -> Self {
        BatchNormState {
            running_mean: Some(vec![0.0; channels]),
            running_var: Some(vec![1.0; channels]),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    /// No running statistics yet; the first training batch seeds them.
    pub fn uninitialized() -> Self {
        BatchNormState {
            running_mean: None,
            running_var: None,
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    fn update(&mut self, mean: &[f64], var_unbiased: &[f64]) {
        let m = self.momentum;
        match (&mut self.running_mean, &mut self.running_var) {
            (Some(rm), Some(rv)) => {
                for (r, &b) in rm.iter_mut().zip(mean) {
                    *r = (1.0 - m) * *r + m * b;
                }
                for (r, &b) in rv.iter_mut().zip(var_unbiased) {
                    *r = (1.0 - m) * *r + m * b;
                }
            }
            _ => {
                self.running_mean = Some(mean.to_vec());
                self.running_var = Some(var_unbiased.to_vec());
            }
        }
    }
}

#[derive(Clone, Copy, Debug)]
enum Unary {
    Relu,
    Silu,
    Gelu,
    Softplus,
    Sigmoid,
    Exp,
}

impl Unary {
    fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Relu => kernels::relu(x),
            Unary::Silu => kernels::silu(x),
            Unary::Gelu => kernels::gelu(x),
            Unary::Softplus => kernels::softplus(x),
            Unary::Sigmoid => kernels::sigmoid(x),
            Unary::Exp => x.exp(),
        }
    }

    /// Derivative given the input `x` and output `y`.
    fn grad(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::Silu => kernels::silu_grad(x),
            Unary::Gelu => kernels::gelu_grad(x),
            Unary::Softplus => kernels::sigmoid(x),
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Exp => y,
        }
    }
}

#[derive(Clone, Debug)]
struct MatmulPlan {
    m: usize,
    k: usize,
    p: usize,
    /// `(a batch index, b batch index)` for every output batch entry.
    pairs: Vec<(usize, usize)>,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MulScalar(Var, Var),
    AddAlong { x: Var, bias: Var, axis: usize },
    MulAlong { x: Var, scale: Var, axis: usize },
    Unary(Var, Unary),
    Matmul { a: Var, b: Var, plan: MatmulPlan },
    Permute { x: Var, perm: Vec<usize> },
    Reshape(Var),
    Concat { parts: Vec<Var>, axis: usize },
    Narrow { x: Var, axis: usize, start: usize },
    SumAll(Var),
    SumAxis { x: Var, axis: usize },
    Softmax { x: Var, axis: usize },
    CrossEntropy { logits: Var, labels: Vec<usize> },
    LayerNorm { x: Var, gamma: Var, beta: Var, mean: Vec<f64>, rstd: Vec<f64> },
    BatchNorm { x: Var, gamma: Var, beta: Var, mean: Vec<f64>, rstd: Vec<f64>, batch_stats: bool },
    Conv2d { x: Var, w: Var, bias: Option<Var>, geom: Conv2dGeom },
    DwConv1d { x: Var, w: Var },
    Gather2d { x: Var, rows: Vec<usize>, cols: Vec<usize> },
    Interp { x: Var, rows: Vec<Tap>, cols: Vec<Tap> },
    Scan { args: [Var; 6], dims: ScanDims, states: Vec<f64> },
}

struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

/// Gradients of a scalar with respect to the tracked leaves of a tape.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

/// Records primitive applications for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so every node's inputs precede it.
/// [`Tape::backward`] walks the nodes once in reverse and does not mutate the
/// tape, so repeated calls give bit-identical gradients.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    Ok(())
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(Error::Dimension(format!(
            "{op}: axis {axis} out of range for shape {shape:?}"
        )));
    }
    Ok(())
}

fn permute_data(data: &[f64], shape: &[usize], perm: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let rank = shape.len();
    let new_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let mut strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    let src_strides: Vec<usize> = perm.iter().map(|&p| strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..data.len() {
        out.push(data[off]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            off += src_strides[d];
            if idx[d] < new_shape[d] {
                break;
            }
            off -= src_strides[d] * new_shape[d];
            idx[d] = 0;
        }
    }
    (out, new_shape)
}

fn broadcast_batch(a: &[usize], b: &[usize]) -> Option<(Vec<usize>, Vec<(usize, usize)>)> {
    let rank = a.len().max(b.len());
    let dim = |s: &[usize], i: usize| {
        let lead = rank - s.len();
        if i < lead {
            1
        } else {
            s[i - lead]
        }
    };
    let mut out = Vec::with_capacity(rank);
    for i in 0..rank {
        let (x, y) = (dim(a, i), dim(b, i));
        if x != y && x != 1 && y != 1 {
            return None;
        }
        out.push(x.max(y));
    }
    let total: usize = out.iter().product();
    let mut pairs = Vec::with_capacity(total);
    let mut idx = vec![0usize; rank];
    for _ in 0..total {
        let (mut ia, mut ib) = (0usize, 0usize);
        for i in 0..rank {
            let (da, db) = (dim(a, i), dim(b, i));
            ia = ia * da + if da == 1 { 0 } else { idx[i] };
            ib = ib * db + if db == 1 { 0 } else { idx[i] };
        }
        pairs.push((ia, ib));
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < out[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Some((out, pairs))
}

fn interp_apply(x: &[f64], planes: usize, h: usize, w: usize, rows: &[Tap], cols: &[Tap]) -> Vec<f64> {
    let (oh, ow) = (rows.len(), cols.len());
    let mut out = vec![0.0; planes * oh * ow];
    for p in 0..planes {
        let src = &x[p * h * w..][..h * w];
        let dst = &mut out[p * oh * ow..][..oh * ow];
        for (i, r) in rows.iter().enumerate() {
            for (j, c) in cols.iter().enumerate() {
                let top = (1.0 - c.w1) * src[r.i0 * w + c.i0] + c.w1 * src[r.i0 * w + c.i1];
                let bot = (1.0 - c.w1) * src[r.i1 * w + c.i0] + c.w1 * src[r.i1 * w + c.i1];
                dst[i * ow + j] = (1.0 - r.w1) * top + r.w1 * bot;
            }
        }
    }
    out
}

fn interp_adjoint(dy: &[f64], planes: usize, h: usize, w: usize, rows: &[Tap], cols: &[Tap], dx: &mut [f64]) {
    let (oh, ow) = (rows.len(), cols.len());
    for p in 0..planes {
        let g = &dy[p * oh * ow..][..oh * ow];
        let d = &mut dx[p * h * w..][..h * w];
        for (i, r) in rows.iter().enumerate() {
            for (j, c) in cols.iter().enumerate() {
                let v = g[i * ow + j];
                let (rt, rb) = ((1.0 - r.w1) * v, r.w1 * v);
                d[r.i0 * w + c.i0] += rt * (1.0 - c.w1);
                d[r.i0 * w + c.i1] += rt * c.w1;
                d[r.i1 * w + c.i0] += rb * (1.0 - c.w1);
                d[r.i1 * w + c.i1] += rb * c.w1;
            }
        }
    }
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

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let tracked = inputs.iter().any(|v| self.nodes[v.0].tracked);
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            tracked: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// A constant input; no gradient flows into it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            tracked: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    // ── elementwise ─────────────────────────────────────────────────────────

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, node: Op) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(op, ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::from_parts(ta.shape().to_vec(), data);
        flops::add(value.numel() as u64);
        Ok(self.push(value, node, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let t = self.value(x);
        let value = Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|v| v * c).collect());
        self.push(value, Op::Scale(x, c), &[x])
    }

    /// Multiplies every element of `x` by the single element of `s`.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        let ts = self.value(s);
        if ts.numel() != 1 {
            return Err(Error::shape("mul_scalar", self.shape(x), ts.shape()));
        }
        let c = ts.data()[0];
        let t = self.value(x);
        let value = Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|v| v * c).collect());
        Ok(self.push(value, Op::MulScalar(x, s), &[x, s]))
    }

    fn along(&self, op: &'static str, x: Var, v: Var, axis: usize) -> Result<(usize, usize, usize)> {
        let shape = self.shape(x);
        check_axis(op, shape, axis)?;
        let tv = self.value(v);
        if tv.numel() != shape[axis] {
            return Err(Error::shape(op, shape, tv.shape()));
        }
        Ok(axis_split(shape, axis))
    }

    /// `x + bias` with the 1-D `bias` broadcast along `axis`.
    pub fn add_along(&mut self, x: Var, bias: Var, axis: usize) -> Result<Var> {
        let (outer, n, inner) = self.along("add_along", x, bias, axis)?;
        let (tx, tb) = (self.value(x), self.value(bias));
        let mut data = tx.data().to_vec();
        for o in 0..outer {
            for j in 0..n {
                let bv = tb.data()[j];
                for v in &mut data[(o * n + j) * inner..][..inner] {
                    *v += bv;
                }
            }
        }
        let value = Tensor::from_parts(tx.shape().to_vec(), data);
        Ok(self.push(value, Op::AddAlong { x, bias, axis }, &[x, bias]))
    }

    /// `x ⊙ scale` with the 1-D `scale` broadcast along `axis`.
    pub fn mul_along(&mut self, x: Var, scale: Var, axis: usize) -> Result<Var> {
        let (outer, n, inner) = self.along("mul_along", x, scale, axis)?;
        let (tx, ts) = (self.value(x), self.value(scale));
        let mut data = tx.data().to_vec();
        for o in 0..outer {
            for j in 0..n {
                let sv = ts.data()[j];
                for v in &mut data[(o * n + j) * inner..][..inner] {
                    *v *= sv;
                }
            }
        }
        let value = Tensor::from_parts(tx.shape().to_vec(), data);
        Ok(self.push(value, Op::MulAlong { x, scale, axis }, &[x, scale]))
    }

    fn unary(&mut self, x: Var, u: Unary) -> Var {
        let t = self.value(x);
        let value = Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|&v| u.apply(v)).collect());
        flops::add(value.numel() as u64);
        self.push(value, Op::Unary(x, u), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Relu)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Silu)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Gelu)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Softplus)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sigmoid)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Exp)
    }

    // ── linear algebra and layout ───────────────────────────────────────────

    /// Batched `[.., M, K] × [.., K, P]`; leading dimensions broadcast.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() < 2 || sb.len() < 2 || sa[sa.len() - 1] != sb[sb.len() - 2] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let p = sb[sb.len() - 1];
        let (mut out_shape, pairs) = broadcast_batch(&sa[..sa.len() - 2], &sb[..sb.len() - 2])
            .ok_or_else(|| Error::shape("matmul", sa, sb))?;
        out_shape.extend([m, p]);
        let (ta, tb) = (self.value(a).data(), self.value(b).data());
        let mut data = vec![0.0; pairs.len() * m * p];
        for (bi, &(ia, ib)) in pairs.iter().enumerate() {
            kernels::matmul_acc(
                &ta[ia * m * k..][..m * k],
                &tb[ib * k * p..][..k * p],
                &mut data[bi * m * p..][..m * p],
                m,
                k,
                p,
            );
        }
        let plan = MatmulPlan { m, k, p, pairs };
        Ok(self.push(Tensor::from_parts(out_shape, data), Op::Matmul { a, b, plan }, &[a, b]))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x);
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::Dimension(format!("permute: {perm:?} is not a permutation of rank {}", shape.len())));
        }
        let (data, new_shape) = permute_data(self.value(x).data(), shape, perm);
        Ok(self.push(
            Tensor::from_parts(new_shape, data),
            Op::Permute { x, perm: perm.to_vec() },
            &[x],
        ))
    }

    /// Swaps the last two dimensions.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let r = self.shape(x).len();
        if r < 2 {
            return Err(Error::Dimension("transpose needs rank >= 2".into()));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 1, r - 2);
        self.permute(x, &perm)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape.to_vec())?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Dimension("concat of zero tensors".into()))?;
        let base = self.shape(*first).to_vec();
        check_axis("concat", &base, axis)?;
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&base, axis);
        let mut data = vec![0.0; outer * total * inner];
        let mut off = 0;
        for &p in parts {
            let n = self.shape(p)[axis];
            let src = self.value(p).data();
            for o in 0..outer {
                data[(o * total + off) * inner..][..n * inner].copy_from_slice(&src[o * n * inner..][..n * inner]);
            }
            off += n;
        }
        let mut shape = base;
        shape[axis] = total;
        Ok(self.push(
            Tensor::from_parts(shape, data),
            Op::Concat { parts: parts.to_vec(), axis },
            parts,
        ))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        check_axis("narrow", &shape, axis)?;
        if len == 0 || start + len > shape[axis] {
            return Err(Error::Dimension(format!(
                "narrow: [{start}, {}) out of range for axis {axis} of {shape:?}",
                start + len
            )));
        }
        let (outer, n, inner) = axis_split(&shape, axis);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            data.extend_from_slice(&src[(o * n + start) * inner..][..len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        Ok(self.push(Tensor::from_parts(out_shape, data), Op::Narrow { x, axis, start }, &[x]))
    }

    // ── reductions ──────────────────────────────────────────────────────────

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::SumAll(x), &[x])
    }

    /// Sums out `axis`; a rank-1 input reduces to shape `[1]`.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        check_axis("sum_axis", &shape, axis)?;
        let (outer, n, inner) = axis_split(&shape, axis);
        let src = self.value(x).data();
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..n {
                for (d, &s) in data[o * inner..][..inner].iter_mut().zip(&src[(o * n + j) * inner..][..inner]) {
                    *d += s;
                }
            }
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        Ok(self.push(Tensor::from_parts(out_shape, data), Op::SumAxis { x, axis }, &[x]))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let n = *self
            .shape(x)
            .get(axis)
            .ok_or_else(|| Error::Dimension(format!("mean_axis: axis {axis} out of range")))?;
        let s = self.sum_axis(x, axis)?;
        Ok(self.scale(s, 1.0 / n as f64))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        check_axis("softmax", &shape, axis)?;
        let (outer, n, inner) = axis_split(&shape, axis);
        let mut data = vec![0.0; outer * n * inner];
        kernels::softmax_axis(self.value(x).data(), &mut data, outer, n, inner);
        Ok(self.push(Tensor::from_parts(shape, data), Op::Softmax { x, axis }, &[x]))
    }

    /// Mean over the batch of `−log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.shape(logits);
        if shape.len() != 2 || shape[0] != labels.len() {
            return Err(Error::Dimension(format!(
                "cross_entropy: logits {shape:?} vs {} labels",
                labels.len()
            )));
        }
        let (b, n) = (shape[0], shape[1]);
        if let Some(&label) = labels.iter().find(|&&l| l >= n) {
            return Err(Error::Label { label, classes: n });
        }
        let z = self.value(logits).data();
        let mut loss = 0.0;
        for (row, &y) in z.chunks_exact(n).zip(labels) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[y];
        }
        loss /= b as f64;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy { logits, labels: labels.to_vec() },
            &[logits],
        ))
    }

    // ── normalization ───────────────────────────────────────────────────────

    /// Normalizes over the last axis, then applies `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().expect("tensors have rank >= 1");
        for v in [gamma, beta] {
            if self.value(v).numel() != d {
                return Err(Error::shape("layer_norm", &shape, self.shape(v)));
            }
        }
        let (src, g, bt) = (self.value(x).data(), self.value(gamma).data(), self.value(beta).data());
        let rows = src.len() / d;
        let mut data = vec![0.0; src.len()];
        let mut mean = Vec::with_capacity(rows);
        let mut rstd = Vec::with_capacity(rows);
        for (r, row) in src.chunks_exact(d).enumerate() {
            let mu = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            for (j, &v) in row.iter().enumerate() {
                data[r * d + j] = (v - mu) * rs * g[j] + bt[j];
            }
            mean.push(mu);
            rstd.push(rs);
        }
        flops::add(8 * src.len() as u64);
        Ok(self.push(
            Tensor::from_parts(shape, data),
            Op::LayerNorm { x, gamma, beta, mean, rstd },
            &[x, gamma, beta],
        ))
    }

    fn bn_check(&self, x: Var, gamma: Var, beta: Var) -> Result<(usize, usize, usize)> {
        let shape = self.shape(x);
        if shape.len() != 4 {
            return Err(Error::Dimension(format!("batchnorm2d expects [B,C,H,W], got {shape:?}")));
        }
        for v in [gamma, beta] {
            if self.value(v).numel() != shape[1] {
                return Err(Error::shape("batchnorm2d", shape, self.shape(v)));
            }
        }
        Ok((shape[0], shape[1], shape[2] * shape[3]))
    }

    fn bn_apply(&mut self, x: Var, gamma: Var, beta: Var, mean: Vec<f64>, rstd: Vec<f64>, batch_stats: bool) -> Var {
        let shape = self.shape(x).to_vec();
        let (b, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
        let (src, g, bt) = (self.value(x).data(), self.value(gamma).data(), self.value(beta).data());
        let mut data = vec![0.0; src.len()];
        for bi in 0..b {
            for ch in 0..c {
                let off = (bi * c + ch) * hw;
                let (s, sh) = (rstd[ch] * g[ch], bt[ch] - mean[ch] * rstd[ch] * g[ch]);
                for (d, &v) in data[off..off + hw].iter_mut().zip(&src[off..off + hw]) {
                    *d = v * s + sh;
                }
            }
        }
        flops::add(2 * src.len() as u64);
        self.push(
            Tensor::from_parts(shape, data),
            Op::BatchNorm { x, gamma, beta, mean, rstd, batch_stats },
            &[x, gamma, beta],
        )
    }

    /// Training-mode batch normalization over `(B, H, W)` per channel.
    ///
    /// Returns the output with the batch mean and the unbiased batch variance.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, Vec<f64>, Vec<f64>)> {
        let (b, c, hw) = self.bn_check(x, gamma, beta)?;
        let src = self.value(x).data();
        let n = (b * hw) as f64;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ch in 0..c {
            let mut s = 0.0;
            for bi in 0..b {
                s += src[(bi * c + ch) * hw..][..hw].iter().sum::<f64>();
            }
            let mu = s / n;
            let mut ss = 0.0;
            for bi in 0..b {
                ss += src[(bi * c + ch) * hw..][..hw].iter().map(|v| (v - mu) * (v - mu)).sum::<f64>();
            }
            mean[ch] = mu;
            var[ch] = ss / n;
        }
        let rstd: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let unbiased: Vec<f64> = if n > 1.0 {
            var.iter().map(|v| v * n / (n - 1.0)).collect()
        } else {
            var.clone()
        };
        let y = self.bn_apply(x, gamma, beta, mean.clone(), rstd, true);
        Ok((y, mean, unbiased))
    }

    /// Inference-mode batch normalization with fixed statistics.
    pub fn batch_norm_eval(&mut self, x: Var, gamma: Var, beta: Var, mean: &[f64], var: &[f64], eps: f64) -> Result<Var> {
        let (_, c, _) = self.bn_check(x, gamma, beta)?;
        if mean.len() != c || var.len() != c {
            return Err(Error::Dimension(format!(
                "batchnorm2d: running stats have {} / {} entries for {c} channels",
                mean.len(),
                var.len()
            )));
        }
        let rstd = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        Ok(self.bn_apply(x, gamma, beta, mean.to_vec(), rstd, false))
    }

    /// Batch normalization driven by a [`BatchNormState`].
    ///
    /// Training mode normalizes with batch statistics and folds them into the
    /// running statistics; inference mode requires running statistics.
    pub fn batchnorm2d(&mut self, x: Var, gamma: Var, beta: Var, state: &mut BatchNormState, training: bool) -> Result<Var> {
        if training {
            let (y, mean, var) = self.batch_norm_train(x, gamma, beta, state.eps)?;
            state.update(&mean, &var);
            Ok(y)
        } else {
            match (&state.running_mean, &state.running_var) {
                (Some(m), Some(v)) => {
                    let (m, v) = (m.clone(), v.clone());
                    self.batch_norm_eval(x, gamma, beta, &m, &v, state.eps)
                }
                _ => Err(Error::State(
                    "batchnorm inference requested before running statistics were initialized".into(),
                )),
            }
        }
    }

    // ── convolution and resampling ──────────────────────────────────────────

    /// 2-D cross-correlation of `[B, Cin, H, W]` with `[Cout, Cin/groups, k, k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, bias: Option<Var>, stride: usize, pad: usize, groups: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 4 || sw.len() != 4 || sw[2] != sw[3] {
            return Err(Error::shape("conv2d", sx, sw));
        }
        let k = sw[2];
        if k % 2 == 0 || stride == 0 || groups == 0 {
            return Err(Error::Dimension(format!(
                "conv2d: kernel {k} must be odd, stride {stride} and groups {groups} positive"
            )));
        }
        if sx[1] % groups != 0 || sw[0] % groups != 0 || sw[1] * groups != sx[1] {
            return Err(Error::shape("conv2d", sx, sw));
        }
        if sx[2] + 2 * pad < k || sx[3] + 2 * pad < k {
            return Err(Error::Dimension(format!(
                "conv2d: kernel {k} larger than padded input {:?} (pad {pad})",
                &sx[2..]
            )));
        }
        if let Some(bv) = bias {
            if self.value(bv).numel() != sw[0] {
                return Err(Error::shape("conv2d bias", sw, self.shape(bv)));
            }
        }
        let geom = Conv2dGeom {
            batch: sx[0],
            c_in: sx[1],
            h: sx[2],
            w: sx[3],
            c_out: sw[0],
            k,
            stride,
            pad,
            groups,
            h_out: (sx[2] + 2 * pad - k) / stride + 1,
            w_out: (sx[3] + 2 * pad - k) / stride + 1,
        };
        let data = kernels::conv2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            bias.map(|b| self.value(b).data()),
            &geom,
        );
        let shape = vec![geom.batch, geom.c_out, geom.h_out, geom.w_out];
        let mut inputs = vec![x, w];
        inputs.extend(bias);
        Ok(self.push(Tensor::from_parts(shape, data), Op::Conv2d { x, w, bias, geom }, &inputs))
    }

    /// Causal depthwise convolution of `[M, C, L]` with `[C, k]` (left padding `k − 1`).
    pub fn depthwise_conv1d(&mut self, x: Var, w: Var) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 3 || sw.len() != 2 || sw[0] != sx[1] {
            return Err(Error::shape("depthwise_conv1d", sx, sw));
        }
        let (m, c, l, k) = (sx[0], sx[1], sx[2], sw[1]);
        let data = kernels::dwconv1d_causal(self.value(x).data(), self.value(w).data(), m, c, l, k);
        Ok(self.push(Tensor::from_parts(vec![m, c, l], data), Op::DwConv1d { x, w }, &[x, w]))
    }

    /// Index gather over the last two axes: `out[.., i, j] = x[.., rows[i], cols[j]]`.
    pub fn gather2d(&mut self, x: Var, rows: Vec<usize>, cols: Vec<usize>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let r = shape.len();
        if r < 2 || rows.is_empty() || cols.is_empty() {
            return Err(Error::Dimension(format!("gather2d on shape {shape:?}")));
        }
        let (h, w) = (shape[r - 2], shape[r - 1]);
        if rows.iter().any(|&i| i >= h) || cols.iter().any(|&j| j >= w) {
            return Err(Error::Dimension(format!("gather2d index out of range for {h}x{w}")));
        }
        let planes = shape[..r - 2].iter().product::<usize>();
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(planes * rows.len() * cols.len());
        for p in 0..planes {
            let plane = &src[p * h * w..][..h * w];
            for &i in &rows {
                data.extend(cols.iter().map(|&j| plane[i * w + j]));
            }
        }
        let mut out_shape = shape;
        out_shape[r - 2] = rows.len();
        out_shape[r - 1] = cols.len();
        Ok(self.push(Tensor::from_parts(out_shape, data), Op::Gather2d { x, rows, cols }, &[x]))
    }

    /// Mirror padding of the last two axes (reflect, no edge repeat).
    pub fn reflect_pad2d(&mut self, x: Var, top: usize, bottom: usize, left: usize, right: usize) -> Result<Var> {
        let shape = self.shape(x);
        let r = shape.len();
        if r < 2 {
            return Err(Error::Dimension("reflect_pad2d needs rank >= 2".into()));
        }
        let (h, w) = (shape[r - 2], shape[r - 1]);
        let rows = (0..h + top + bottom)
            .map(|i| kernels::mirror_index(i as isize - top as isize, h))
            .collect();
        let cols = (0..w + left + right)
            .map(|j| kernels::mirror_index(j as isize - left as isize, w))
            .collect();
        self.gather2d(x, rows, cols)
    }

    /// Resizes `[B, C, H, W]` to `[B, C, out_h, out_w]`.
    pub fn interpolate(&mut self, x: Var, out_h: usize, out_w: usize, mode: InterpMode) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 4 || out_h == 0 || out_w == 0 {
            return Err(Error::Dimension(format!(
                "interpolate {shape:?} -> {out_h}x{out_w}"
            )));
        }
        let (h, w) = (shape[2], shape[3]);
        let (rows, cols) = match mode {
            InterpMode::Nearest => (kernels::nearest_taps(h, out_h), kernels::nearest_taps(w, out_w)),
            InterpMode::Bilinear => (kernels::linear_taps(h, out_h), kernels::linear_taps(w, out_w)),
        };
        let data = interp_apply(self.value(x).data(), shape[0] * shape[1], h, w, &rows, &cols);
        let out_shape = vec![shape[0], shape[1], out_h, out_w];
        Ok(self.push(Tensor::from_parts(out_shape, data), Op::Interp { x, rows, cols }, &[x]))
    }

    // ── selective scan ──────────────────────────────────────────────────────

    /// Sequential selective scan; see [`kernels::selective_scan`] for shapes.
    ///
    /// Every `delta` entry must be strictly positive.
    pub fn selective_scan(&mut self, u: Var, delta: Var, a: Var, b: Var, c: Var, d: Var) -> Result<Var> {
        let su = self.shape(u).to_vec();
        if su.len() != 3 {
            return Err(Error::Dimension(format!("selective_scan: u must be [M, D, L], got {su:?}")));
        }
        let (batch, channels, len) = (su[0], su[1], su[2]);
        let sa = self.shape(a);
        if sa.len() != 2 || sa[0] != channels {
            return Err(Error::shape("selective_scan A", &su, sa));
        }
        let state = sa[1];
        let checks: [(&'static str, Var, Vec<usize>); 4] = [
            ("selective_scan delta", delta, su.clone()),
            ("selective_scan B", b, vec![batch, state, len]),
            ("selective_scan C", c, vec![batch, state, len]),
            ("selective_scan D", d, vec![channels]),
        ];
        for (op, v, want) in checks {
            if self.shape(v) != want.as_slice() {
                return Err(Error::shape(op, &want, self.shape(v)));
            }
        }
        if let Some(bad) = self.value(delta).data().iter().find(|&&v| !(v > 0.0)) {
            return Err(Error::Contract(format!("selective_scan: delta must be positive, found {bad}")));
        }
        let dims = ScanDims {
            batch,
            channels,
            len,
            state,
        };
        let mut states = vec![0.0; batch * channels * len * state];
        let data = kernels::selective_scan(self.scan_inputs([u, delta, a, b, c, d]), dims, Some(&mut states));
        Ok(self.push(
            Tensor::from_parts(su, data),
            Op::Scan {
                args: [u, delta, a, b, c, d],
                dims,
                states,
            },
            &[u, delta, a, b, c, d],
        ))
    }

    fn scan_inputs(&self, args: [Var; 6]) -> ScanInputs<'_> {
        ScanInputs {
            u: self.value(args[0]).data(),
            delta: self.value(args[1]).data(),
            a: self.value(args[2]).data(),
            b: self.value(args[3]).data(),
            c: self.value(args[4]).data(),
            d: self.value(args[5]).data(),
        }
    }

    // ── backward ────────────────────────────────────────────────────────────

    /// Reverse pass from a single-element `loss`.
    ///
    /// Gradients are retained for tracked leaves only.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        let mut leaf_grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].tracked {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if let Op::Leaf = node.op {
                leaf_grads[i] = Some(Tensor::from_parts(node.value.shape().to_vec(), g));
                continue;
            }
            self.backprop(node, &g, &mut grads);
        }
        Ok(Gradients { grads: leaf_grads })
    }

    fn backprop(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        // Borrow a zero-initialized gradient buffer for a tracked input.
        let nodes = &self.nodes;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].tracked {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.numel()]);
            f(buf);
        };
        let val = |v: Var| nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g));
                acc(*b, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g));
                acc(*b, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d -= g));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * vb[i];
                    }
                });
                acc(*b, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * va[i];
                    }
                });
            }
            Op::Scale(x, c) => acc(*x, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g * c)),
            Op::MulScalar(x, s) => {
                let c = val(*s)[0];
                let vx = val(*x);
                acc(*x, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g * c));
                acc(*s, &mut |d| d[0] += g.iter().zip(vx).map(|(g, x)| g * x).sum::<f64>());
            }
            Op::AddAlong { x, bias, axis } => {
                let (outer, n, inner) = axis_split(nodes[x.0].value.shape(), *axis);
                acc(*x, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g));
                acc(*bias, &mut |d| {
                    for o in 0..outer {
                        for j in 0..n {
                            d[j] += g[(o * n + j) * inner..][..inner].iter().sum::<f64>();
                        }
                    }
                });
            }
            Op::MulAlong { x, scale, axis } => {
                let (outer, n, inner) = axis_split(nodes[x.0].value.shape(), *axis);
                let (vx, vs) = (val(*x), val(*scale));
                acc(*x, &mut |d| {
                    for o in 0..outer {
                        for j in 0..n {
                            let off = (o * n + j) * inner;
                            for i in off..off + inner {
                                d[i] += g[i] * vs[j];
                            }
                        }
                    }
                });
                acc(*scale, &mut |d| {
                    for o in 0..outer {
                        for j in 0..n {
                            let off = (o * n + j) * inner;
                            d[j] += (off..off + inner).map(|i| g[i] * vx[i]).sum::<f64>();
                        }
                    }
                });
            }
            Op::Unary(x, u) => {
                let (vx, vy) = (val(*x), node.value.data());
                acc(*x, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * u.grad(vx[i], vy[i]);
                    }
                });
            }
            Op::Matmul { a, b, plan } => {
                let MatmulPlan { m, k, p, pairs } = plan;
                let (m, k, p) = (*m, *k, *p);
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &mut |d| {
                    for (bi, &(ia, ib)) in pairs.iter().enumerate() {
                        kernels::matmul_a_bt_acc(&g[bi * m * p..][..m * p], &vb[ib * k * p..][..k * p], &mut d[ia * m * k..][..m * k], m, p, k);
                    }
                });
                acc(*b, &mut |d| {
                    for (bi, &(ia, ib)) in pairs.iter().enumerate() {
                        kernels::matmul_at_b_acc(&va[ia * m * k..][..m * k], &g[bi * m * p..][..m * p], &mut d[ib * k * p..][..k * p], m, k, p);
                    }
                });
            }
            Op::Permute { x, perm } => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let (back, _) = permute_data(g, node.value.shape(), &inv);
                acc(*x, &mut |d| d.iter_mut().zip(&back).for_each(|(d, g)| *d += g));
            }
            Op::Reshape(x) => acc(*x, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g)),
            Op::Concat { parts, axis } => {
                let shape = node.value.shape();
                let (outer, total, inner) = axis_split(shape, *axis);
                let mut off = 0;
                for &p in parts {
                    let n = nodes[p.0].value.shape()[*axis];
                    acc(p, &mut |d| {
                        for o in 0..outer {
                            let src = &g[(o * total + off) * inner..][..n * inner];
                            for (d, s) in d[o * n * inner..][..n * inner].iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    });
                    off += n;
                }
            }
            Op::Narrow { x, axis, start } => {
                let (outer, n, inner) = axis_split(nodes[x.0].value.shape(), *axis);
                let len = node.value.shape()[*axis];
                acc(*x, &mut |d| {
                    for o in 0..outer {
                        let dst = &mut d[(o * n + start) * inner..][..len * inner];
                        for (d, s) in dst.iter_mut().zip(&g[o * len * inner..][..len * inner]) {
                            *d += s;
                        }
                    }
                });
            }
            Op::SumAll(x) => acc(*x, &mut |d| d.iter_mut().for_each(|d| *d += g[0])),
            Op::SumAxis { x, axis } => {
                let (outer, n, inner) = axis_split(nodes[x.0].value.shape(), *axis);
                acc(*x, &mut |d| {
                    for o in 0..outer {
                        for j in 0..n {
                            for (d, s) in d[(o * n + j) * inner..][..inner].iter_mut().zip(&g[o * inner..][..inner]) {
                                *d += s;
                            }
                        }
                    }
                });
            }
            Op::Softmax { x, axis } => {
                let (outer, n, inner) = axis_split(node.value.shape(), *axis);
                let y = node.value.data();
                acc(*x, &mut |d| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| (o * n + j) * inner + i;
                            let dot: f64 = (0..n).map(|j| g[at(j)] * y[at(j)]).sum();
                            for j in 0..n {
                                d[at(j)] += y[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                });
            }
            Op::CrossEntropy { logits, labels } => {
                let z = val(*logits);
                let n = nodes[logits.0].value.shape()[1];
                let scale = g[0] / labels.len() as f64;
                acc(*logits, &mut |d| {
                    for (r, &y) in labels.iter().enumerate() {
                        let row = &z[r * n..][..n];
                        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
                        for j in 0..n {
                            let p = (row[j] - max).exp() / sum;
                            d[r * n + j] += scale * (p - if j == y { 1.0 } else { 0.0 });
                        }
                    }
                });
            }
            Op::LayerNorm { x, gamma, beta, mean, rstd } => {
                let vx = val(*x);
                let gm = val(*gamma);
                let d = gm.len();
                let xhat = |r: usize, j: usize| (vx[r * d + j] - mean[r]) * rstd[r];
                acc(*x, &mut |dx| {
                    for r in 0..mean.len() {
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for j in 0..d {
                            let gh = g[r * d + j] * gm[j];
                            s1 += gh;
                            s2 += gh * xhat(r, j);
                        }
                        let (s1, s2) = (s1 / d as f64, s2 / d as f64);
                        for j in 0..d {
                            let gh = g[r * d + j] * gm[j];
                            dx[r * d + j] += rstd[r] * (gh - s1 - xhat(r, j) * s2);
                        }
                    }
                });
                acc(*gamma, &mut |dg| {
                    for r in 0..mean.len() {
                        for j in 0..d {
                            dg[j] += g[r * d + j] * xhat(r, j);
                        }
                    }
                });
                acc(*beta, &mut |db| {
                    for r in 0..mean.len() {
                        for j in 0..d {
                            db[j] += g[r * d + j];
                        }
                    }
                });
            }
            Op::BatchNorm { x, gamma, beta, mean, rstd, batch_stats } => {
                let shape = nodes[x.0].value.shape();
                let (b, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
                let vx = val(*x);
                let gm = val(*gamma);
                let n = (b * hw) as f64;
                let xhat = |i: usize, ch: usize| (vx[i] - mean[ch]) * rstd[ch];
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for bi in 0..b {
                    for ch in 0..c {
                        let off = (bi * c + ch) * hw;
                        for i in off..off + hw {
                            sum_g[ch] += g[i];
                            sum_gx[ch] += g[i] * xhat(i, ch);
                        }
                    }
                }
                acc(*x, &mut |dx| {
                    for bi in 0..b {
                        for ch in 0..c {
                            let off = (bi * c + ch) * hw;
                            let k = gm[ch] * rstd[ch];
                            for i in off..off + hw {
                                dx[i] += if *batch_stats {
                                    k * (g[i] - sum_g[ch] / n - xhat(i, ch) * sum_gx[ch] / n)
                                } else {
                                    k * g[i]
                                };
                            }
                        }
                    }
                });
                acc(*gamma, &mut |dg| dg.iter_mut().zip(&sum_gx).for_each(|(d, s)| *d += s));
                acc(*beta, &mut |db| db.iter_mut().zip(&sum_g).for_each(|(d, s)| *d += s));
            }
            Op::Conv2d { x, w, bias, geom } => {
                let (vx, vw) = (val(*x), val(*w));
                let mut dx = nodes[x.0].tracked.then(|| vec![0.0; vx.len()]);
                let mut dw = nodes[w.0].tracked.then(|| vec![0.0; vw.len()]);
                let mut db = bias.filter(|b| nodes[b.0].tracked).map(|_| vec![0.0; geom.c_out]);
                kernels::conv2d_backward(vx, vw, g, geom, dx.as_deref_mut(), dw.as_deref_mut(), db.as_deref_mut());
                if let Some(dx) = dx {
                    acc(*x, &mut |d| d.iter_mut().zip(&dx).for_each(|(d, s)| *d += s));
                }
                if let Some(dw) = dw {
                    acc(*w, &mut |d| d.iter_mut().zip(&dw).for_each(|(d, s)| *d += s));
                }
                if let (Some(b), Some(db)) = (bias, db) {
                    acc(*b, &mut |d| d.iter_mut().zip(&db).for_each(|(d, s)| *d += s));
                }
            }
            Op::DwConv1d { x, w } => {
                let s = nodes[x.0].value.shape();
                let (m, c, l) = (s[0], s[1], s[2]);
                let k = nodes[w.0].value.shape()[1];
                let (vx, vw) = (val(*x), val(*w));
                acc(*x, &mut |d| kernels::dwconv1d_causal_backward(vx, vw, g, m, c, l, k, Some(d), None));
                acc(*w, &mut |d| kernels::dwconv1d_causal_backward(vx, vw, g, m, c, l, k, None, Some(d)));
            }
            Op::Gather2d { x, rows, cols } => {
                let s = nodes[x.0].value.shape();
                let r = s.len();
                let (h, w) = (s[r - 2], s[r - 1]);
                let planes = s[..r - 2].iter().product::<usize>();
                let (oh, ow) = (rows.len(), cols.len());
                acc(*x, &mut |d| {
                    for p in 0..planes {
                        for (i, &ri) in rows.iter().enumerate() {
                            for (j, &cj) in cols.iter().enumerate() {
                                d[p * h * w + ri * w + cj] += g[p * oh * ow + i * ow + j];
                            }
                        }
                    }
                });
            }
            Op::Interp { x, rows, cols } => {
                let s = nodes[x.0].value.shape();
                acc(*x, &mut |d| interp_adjoint(g, s[0] * s[1], s[2], s[3], rows, cols, d));
            }
            Op::Scan { args, dims, states } => {
                let sg = kernels::selective_scan_backward(self.scan_inputs(*args), *dims, states, g);
                let parts = [sg.du, sg.ddelta, sg.da, sg.db, sg.dc, sg.dd];
                for (v, part) in args.iter().zip(parts) {
                    acc(*v, &mut |d| d.iter_mut().zip(&part).for_each(|(d, s)| *d += s));
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_hand_case_and_shape_error() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.constant(t(&[2, 1], &[1.0, 1.0]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[3.0, 7.0]);
        let bad = tape.constant(Tensor::zeros(vec![3, 1]));
        let err = tape.matmul(a, bad).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 2]") && msg.contains("[3, 1]"), "{msg}");
    }

    #[test]
    fn matmul_broadcasts_leading_dims() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::ones(vec![3, 2, 4]));
        let b = tape.constant(Tensor::ones(vec![1, 4, 5]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.shape(c), &[3, 2, 5]);
        assert!(tape.value(c).data().iter().all(|&v| v == 4.0));
    }

    #[test]
    fn identity_matmul_returns_vector() {
        let mut tape = Tape::new();
        let i = tape.constant(Tensor::eye(3));
        let v = tape.constant(t(&[3, 1], &[1.5, -2.0, 7.0]));
        let out = tape.matmul(i, v).unwrap();
        assert_eq!(tape.value(out), tape.value(v));
    }

    #[test]
    fn softmax_uniform_and_saturated() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(vec![3]));
        let y = tape.softmax(x, 0).unwrap();
        for &v in tape.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = tape.constant(t(&[2], &[1000.0, 0.0]));
        let y = tape.softmax(x, 0).unwrap();
        assert!((tape.value(y).data()[0] - 1.0).abs() < 1e-12);
        assert!(tape.value(y).data()[1].abs() < 1e-12);
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(vec![2, 4], 3.25));
        let g = tape.constant(Tensor::ones(vec![4]));
        let b = tape.constant(Tensor::zeros(vec![4]));
        let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn layer_norm_hand_formula() {
        let eps = 1e-5;
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 3], &[1.0, 2.0, 3.0]));
        let g = tape.constant(Tensor::ones(vec![3]));
        let b = tape.constant(Tensor::zeros(vec![3]));
        let y = tape.layer_norm(x, g, b, eps).unwrap();
        // mean 2, population variance 2/3
        let s = 1.0 / (2.0f64 / 3.0 + eps).sqrt();
        let want = [-s, 0.0, s];
        for (a, b) in tape.value(y).data().iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
        // normalized rows have mean 0 and variance 1 up to eps
        let d = tape.value(y).data();
        let var = d.iter().map(|v| v * v).sum::<f64>() / 3.0;
        assert!(d.iter().sum::<f64>().abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-4);
    }

    #[test]
    fn batchnorm_eval_identity_and_uninitialized_state() {
        let mut tape = Tape::new();
        let data: Vec<f64> = (0..16).map(|i| i as f64 * 0.3 - 2.0).collect();
        let x = tape.constant(t(&[1, 2, 2, 4], &data));
        let g = tape.constant(Tensor::ones(vec![2]));
        let b = tape.constant(Tensor::zeros(vec![2]));
        let mut state = BatchNormState::new(2);
        state.eps = 0.0;
        let y = tape.batchnorm2d(x, g, b, &mut state, false).unwrap();
        assert_eq!(tape.value(y), tape.value(x));

        let mut empty = BatchNormState::uninitialized();
        let err = tape.batchnorm2d(x, g, b, &mut empty, false).unwrap_err();
        assert!(matches!(err, Error::State(_)));
        tape.batchnorm2d(x, g, b, &mut empty, true).unwrap();
        assert!(empty.running_mean.is_some());
    }

    #[test]
    fn batchnorm_training_updates_running_stats_with_momentum() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2, 1, 1, 1], &[1.0, 3.0]));
        let g = tape.constant(Tensor::ones(vec![1]));
        let b = tape.constant(Tensor::zeros(vec![1]));
        let mut state = BatchNormState::new(1);
        tape.batchnorm2d(x, g, b, &mut state, true).unwrap();
        // batch mean 2, unbiased variance 2
        assert!((state.running_mean.as_ref().unwrap()[0] - 0.2).abs() < 1e-15);
        assert!((state.running_var.as_ref().unwrap()[0] - (0.9 + 0.2)).abs() < 1e-15);
    }

    #[test]
    fn conv2d_identity_and_constant_interior() {
        let mut tape = Tape::new();
        let data: Vec<f64> = (0..2 * 3 * 3).map(f64::from).collect();
        let x = tape.constant(t(&[1, 2, 3, 3], &data));
        let mut w = Tensor::zeros(vec![2, 2, 1, 1]);
        w.set(&[0, 0, 0, 0], 1.0);
        w.set(&[1, 1, 0, 0], 1.0);
        let w = tape.constant(w);
        let y = tape.conv2d(x, w, None, 1, 0, 1).unwrap();
        assert_eq!(tape.value(y), tape.value(x));

        let c = 0.7;
        let cin = 3;
        let x = tape.constant(Tensor::full(vec![1, cin, 5, 5], c));
        let w = tape.constant(Tensor::ones(vec![1, cin, 3, 3]));
        let y = tape.conv2d(x, w, None, 1, 0, 1).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 3, 3]);
        for &v in tape.value(y).data() {
            assert!((v - 9.0 * c * cin as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn conv2d_rejects_oversized_kernel() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(vec![1, 1, 2, 2]));
        let w = tape.constant(Tensor::zeros(vec![1, 1, 5, 5]));
        assert!(matches!(tape.conv2d(x, w, None, 1, 1, 1), Err(Error::Dimension(_))));
    }

    #[test]
    fn depthwise_conv1d_hand_cases() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 1, 3], &[1.0, 0.0, 0.0]));
        let w = tape.constant(t(&[1, 2], &[0.0, 1.0]));
        let y = tape.depthwise_conv1d(x, w).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 0.0, 0.0]);
        let w1 = tape.constant(t(&[1, 1], &[1.0]));
        let y = tape.depthwise_conv1d(x, w1).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
        let bad = tape.constant(Tensor::ones(vec![2, 1]));
        assert!(tape.depthwise_conv1d(x, bad).is_err());
    }

    #[test]
    fn interpolate_constant_and_broadcast() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(vec![1, 2, 3, 5], -1.25));
        for mode in [InterpMode::Nearest, InterpMode::Bilinear] {
            let y = tape.interpolate(x, 7, 2, mode).unwrap();
            assert!(tape.value(y).data().iter().all(|&v| v == -1.25));
        }
        let x = tape.constant(t(&[1, 1, 1, 1], &[4.5]));
        for mode in [InterpMode::Nearest, InterpMode::Bilinear] {
            let y = tape.interpolate(x, 3, 6, mode).unwrap();
            assert_eq!(tape.shape(y), &[1, 1, 3, 6]);
            assert!(tape.value(y).data().iter().all(|&v| v == 4.5));
        }
    }

    #[test]
    fn bilinear_corners_follow_half_pixel_formula() {
        let mut tape = Tape::new();
        let src = [1.0, 2.0, 3.0, 5.0];
        let x = tape.constant(t(&[1, 1, 2, 2], &src));
        let y = tape.interpolate(x, 4, 4, InterpMode::Bilinear).unwrap();
        let out = tape.value(y);
        // src coordinate of output o is (o + 0.5)·(2/4) − 0.5, clamped at 0.
        let coord = |o: usize| ((o as f64 + 0.5) * 0.5 - 0.5).max(0.0);
        let eval = |r: f64, c: f64| {
            let (r0, c0) = (r.floor() as usize, c.floor() as usize);
            let (r1, c1) = ((r0 + 1).min(1), (c0 + 1).min(1));
            let (fr, fc) = (r - r0 as f64, c - c0 as f64);
            let v = |i: usize, j: usize| src[i * 2 + j];
            (1.0 - fr) * ((1.0 - fc) * v(r0, c0) + fc * v(r0, c1)) + fr * ((1.0 - fc) * v(r1, c0) + fc * v(r1, c1))
        };
        for (i, j) in [(0, 0), (0, 3), (3, 0), (3, 3), (1, 2)] {
            let want = eval(coord(i), coord(j));
            assert!((out.get(&[0, 0, i, j]) - want).abs() < 1e-15, "({i},{j})");
        }
        assert_eq!(out.get(&[0, 0, 0, 0]), 1.0);
        assert_eq!(out.get(&[0, 0, 3, 3]), 5.0);
        assert_eq!(out.get(&[0, 0, 0, 3]), 2.0);
        assert_eq!(out.get(&[0, 0, 3, 0]), 3.0);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::ones(vec![2]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn backward_is_deterministic() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2, 3], &[0.1, -0.4, 0.9, 1.3, -2.0, 0.5]));
        let w = tape.leaf(t(&[3, 2], &[0.3, 0.2, -0.1, 0.8, 0.5, -0.6]));
        let y = tape.matmul(x, w).unwrap();
        let y = tape.gelu(y);
        let s = tape.softmax(y, 1).unwrap();
        let l = tape.cross_entropy(s, &[1, 0]).unwrap();
        let g1 = tape.backward(l).unwrap();
        let g2 = tape.backward(l).unwrap();
        assert_eq!(g1.get(x).unwrap().data(), g2.get(x).unwrap().data());
        assert_eq!(g1.get(w).unwrap().data(), g2.get(w).unwrap().data());
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::ones(vec![3]));
        let c = tape.constant(Tensor::full(vec![3], 2.0));
        let y = tape.mul(x, c).unwrap();
        let l = tape.sum(y);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, 2.0, 2.0]);
        assert!(g.get(c).is_none());
    }
}

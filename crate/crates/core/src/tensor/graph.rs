use super::kernels::{self, gemm};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`]. Only meaningful for the graph that issued it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    ScaleBy(Var, Var),
    MatMul(Var, Var),
    Concat { inputs: Vec<Var>, axis: usize },
    Narrow { input: Var, axis: usize, start: usize },
    SumAxis { input: Var, axis: usize },
    SumAll(Var),
    Relu { input: Var, gate: Option<Vec<bool>> },
    Sigmoid(Var),
    Ln(Var),
    PRelu { input: Var, slope: Var, gate: Option<Vec<bool>> },
    GlobalLayerNorm { input: Var, gamma: Var, beta: Var, normalized: Vec<f64>, inv_std: f64 },
    Conv1d { input: Var, weight: Var, bias: Option<Var>, stride: usize, padding: usize },
    ConvTranspose1d { input: Var, weight: Var, bias: Option<Var>, stride: usize, padding: usize },
    Depthwise { input: Var, weight: Var, bias: Var, stride: usize, padding: usize },
    Interpolate(Var),
    Upsample2(Var),
    Reshape(Var),
    Transpose(Var),
    FitLength { input: Var, offset: isize },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

/// Append-only operation tape. Nodes are stored in execution order, which is
/// a valid topological order by construction.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    macs: u64,
    gates: Gates,
}

/// Pass/block decisions of every ReLU and PReLU node, in execution order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GatePattern(Vec<Vec<bool>>);

impl GatePattern {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Debug, Default)]
enum Gates {
    #[default]
    Off,
    Record(Vec<Vec<bool>>),
    Replay {
        pattern: GatePattern,
        next: usize,
    },
}

/// Leaf gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }

    /// `+=` the gradient of `v` into `target`'s grad buffer.
    pub fn accumulate_into(&self, v: Var, target: &mut Tensor) -> Result<()> {
        match self.get(v) {
            Some(g) => target.accumulate_grad(g),
            None => Ok(()),
        }
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() == b.shape() {
        return Ok(());
    }
    if a.rank() != b.rank() {
        return Err(Error::shape(
            op,
            format!("rank {} vs rank {} ({:?} vs {:?})", a.rank(), b.rank(), a.shape(), b.shape()),
        ));
    }
    let axis = a.shape().iter().zip(b.shape()).position(|(x, y)| x != y).unwrap();
    Err(Error::shape(
        op,
        format!("axis {axis}: {} vs {} ({:?} vs {:?})", a.shape()[axis], b.shape()[axis], a.shape(), b.shape()),
    ))
}

fn expect_rank(op: &'static str, what: &str, t: &Tensor, rank: usize) -> Result<()> {
    if t.rank() != rank {
        return Err(Error::shape(op, format!("{what} must have rank {rank}, got shape {:?}", t.shape())));
    }
    Ok(())
}

/// `(outer, axis_len, inner)` split of a shape around `axis`.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Multiply-accumulates executed by conv/matmul nodes recorded so far.
    pub fn macs(&self) -> u64 {
        self.macs
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

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> Var {
        debug_assert!(value.grad().is_none());
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, inputs: &[Var]) -> Result<Var> {
        let tracked = inputs.iter().any(|v| self.nodes[v.0].tracked);
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, op, tracked))
    }

    /// Copies a tensor in as a leaf; tracked iff the tensor requires grad.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        let mut value = Tensor::new(t.shape().to_vec(), t.data().to_vec()).unwrap();
        value.set_requires_grad(false);
        self.push(value, Op::Leaf, t.requires_grad())
    }

    /// Untracked leaf (inputs, targets).
    pub fn constant(&mut self, mut t: Tensor) -> Var {
        t.set_requires_grad(false);
        t.zero_grad();
        self.push(t, Op::Leaf, false)
    }

    /// Tracked leaf.
    pub fn variable(&mut self, mut t: Tensor) -> Var {
        t.set_requires_grad(false);
        t.zero_grad();
        self.push(t, Op::Leaf, true)
    }

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, node: Op) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(op, ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        let shape = ta.shape().to_vec();
        self.push_op(shape, data, node, &[a, b])
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, node: Op) -> Result<Var> {
        let t = self.value(a);
        let data = t.data().iter().map(|x| f(*x)).collect();
        let shape = t.shape().to_vec();
        self.push_op(shape, data, node, &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Result<Var> {
        self.unary(a, |x| x * k, Op::Scale(a, k))
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Result<Var> {
        self.unary(a, |x| x + k, Op::AddScalar(a))
    }

    /// `s · a` where `s` is a one-element tensor (the only broadcast supported).
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        let ts = self.value(s);
        if ts.numel() != 1 {
            return Err(Error::shape("scale_by", format!("scale must be a scalar, got shape {:?}", ts.shape())));
        }
        let k = ts.data()[0];
        let t = self.value(a);
        let data = t.data().iter().map(|x| k * x).collect();
        let shape = t.shape().to_vec();
        self.push_op(shape, data, Op::ScaleBy(a, s), &[a, s])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        expect_rank("matmul", "lhs", ta, 2)?;
        expect_rank("matmul", "rhs", tb, 2)?;
        let (m, k) = (ta.shape()[0], ta.shape()[1]);
        let (k2, n) = (tb.shape()[0], tb.shape()[1]);
        if k != k2 {
            return Err(Error::shape("matmul", format!("inner axis: lhs axis 1 is {k}, rhs axis 0 is {k2}")));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), k, 1, tb.data(), n, 1, 0.0, &mut out);
        self.macs += (m * k * n) as u64;
        self.push_op(vec![m, n], out, Op::MatMul(a, b), &[a, b])
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = *inputs.first().ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let base = self.value(first).shape().to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", format!("axis {axis} out of range for rank {}", base.len())));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.value(v).shape();
            if s.len() != base.len() {
                return Err(Error::shape("concat", format!("rank {} vs {}", s.len(), base.len())));
            }
            if let Some(ax) = (0..s.len()).find(|&i| i != axis && s[i] != base[i]) {
                return Err(Error::shape("concat", format!("axis {ax}: {} vs {}", s[ax], base[ax])));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_split(&shape, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let t = self.value(v);
                let chunk = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        self.push_op(shape, data, Op::Concat { inputs: inputs.to_vec(), axis }, inputs)
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a);
        if axis >= t.rank() {
            return Err(Error::shape("narrow", format!("axis {axis} out of range for rank {}", t.rank())));
        }
        if len == 0 || start + len > t.shape()[axis] {
            return Err(Error::shape(
                "narrow",
                format!("axis {axis}: range {start}..{} exceeds size {}", start + len, t.shape()[axis]),
            ));
        }
        let (outer, n, inner) = axis_split(t.shape(), axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * n * inner + start * inner;
            data.extend_from_slice(&t.data()[base..base + len * inner]);
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = len;
        self.push_op(shape, data, Op::Narrow { input: a, axis, start }, &[a])
    }

    pub fn split(&mut self, a: Var, axis: usize, sizes: &[usize]) -> Result<Vec<Var>> {
        let dim = self
            .value(a)
            .shape()
            .get(axis)
            .copied()
            .ok_or_else(|| Error::shape("split", format!("axis {axis} out of range")))?;
        let total: usize = sizes.iter().sum();
        if total != dim {
            return Err(Error::shape("split", format!("axis {axis}: sizes sum to {total}, axis has {dim}")));
        }
        let mut start = 0;
        let mut out = Vec::with_capacity(sizes.len());
        for &s in sizes {
            out.push(self.narrow(a, axis, start, s)?);
            start += s;
        }
        Ok(out)
    }

    /// Sum over `axis`, removing it.
    pub fn sum(&mut self, a: Var, axis: usize) -> Result<Var> {
        let t = self.value(a);
        if axis >= t.rank() {
            return Err(Error::shape("sum", format!("axis {axis} out of range for rank {}", t.rank())));
        }
        let (outer, n, inner) = axis_split(t.shape(), axis);
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..n {
                let src = &t.data()[(o * n + i) * inner..(o * n + i + 1) * inner];
                for (d, s) in data[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let mut shape = t.shape().to_vec();
        shape.remove(axis);
        self.push_op(shape, data, Op::SumAxis { input: a, axis }, &[a])
    }

    pub fn mean(&mut self, a: Var, axis: usize) -> Result<Var> {
        let n = *self
            .value(a)
            .shape()
            .get(axis)
            .ok_or_else(|| Error::shape("mean", format!("axis {axis} out of range")))?;
        let s = self.sum(a, axis)?;
        self.scale(s, 1.0 / n as f64)
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push_op(Vec::new(), vec![s], Op::SumAll(a), &[a])
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel();
        let s = self.sum_all(a)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// `Σ a ⊙ b` as a scalar.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let p = self.mul(a, b)?;
        self.sum_all(p)
    }

    /// Starts recording rectifier gates; see [`Graph::take_gates`].
    pub fn record_gates(&mut self) {
        self.gates = Gates::Record(Vec::new());
    }

    /// The gates recorded since [`Graph::record_gates`], if recording.
    pub fn take_gates(&mut self) -> Option<GatePattern> {
        match std::mem::take(&mut self.gates) {
            Gates::Record(g) => Some(GatePattern(g)),
            other => {
                self.gates = other;
                None
            }
        }
    }

    /// Makes subsequent rectifiers follow `pattern` instead of the sign of
    /// their input, which turns the recorded piecewise-linear branch into a
    /// smooth function of the inputs. Rectifier `n` uses entry `n`.
    pub fn replay_gates(&mut self, pattern: GatePattern) {
        self.gates = Gates::Replay { pattern, next: 0 };
    }

    /// Gate for the next rectifier over `x`: `Some` when replaying, and
    /// recorded when recording.
    fn gate(&mut self, op: &'static str, x: Var) -> Result<Option<Vec<bool>>> {
        let n = self.value(x).numel();
        match &mut self.gates {
            Gates::Off => Ok(None),
            Gates::Record(all) => {
                all.push(self.nodes[x.0].value.data().iter().map(|v| *v > 0.0).collect());
                Ok(None)
            }
            Gates::Replay { pattern, next } => {
                let g = pattern.0.get(*next).cloned().ok_or_else(|| {
                    Error::Contract(format!("{op}: gate pattern has only {} entries", pattern.0.len()))
                })?;
                if g.len() != n {
                    return Err(Error::Contract(format!("{op}: gate {next} has {} entries for {n} inputs", g.len())));
                }
                *next += 1;
                Ok(Some(g))
            }
        }
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let gate = self.gate("relu", a)?;
        let t = self.value(a);
        let data = match &gate {
            Some(g) => t.data().iter().zip(g).map(|(x, on)| if *on { *x } else { 0.0 }).collect(),
            None => t.data().iter().map(|x| if *x > 0.0 { *x } else { 0.0 }).collect(),
        };
        let shape = t.shape().to_vec();
        self.push_op(shape, data, Op::Relu { input: a, gate }, &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| 1.0 / (1.0 + (-x).exp()), Op::Sigmoid(a))
    }

    /// Natural logarithm; non-positive inputs are a domain error.
    pub fn ln(&mut self, a: Var) -> Result<Var> {
        if let Some(x) = self.value(a).data().iter().find(|x| !(**x > 0.0)) {
            return Err(Error::Domain(format!("ln of non-positive value {x}")));
        }
        self.unary(a, f64::ln, Op::Ln(a))
    }

    /// Parametric ReLU with one learned slope per channel (axis 0).
    pub fn prelu(&mut self, x: Var, slope: Var) -> Result<Var> {
        let (tx, ts) = (self.value(x), self.value(slope));
        let c = *tx.shape().first().ok_or_else(|| Error::shape("prelu", "input must have a channel axis"))?;
        if ts.shape() != [c] {
            return Err(Error::shape("prelu", format!("axis 0: input has {c} channels, slope shape {:?}", ts.shape())));
        }
        let gate = self.gate("prelu", x)?;
        let (tx, ts) = (self.value(x), self.value(slope));
        let inner = tx.numel() / c;
        let mut data = tx.data().to_vec();
        for (ch, row) in data.chunks_mut(inner).enumerate() {
            let a = ts.data()[ch];
            for (j, v) in row.iter_mut().enumerate() {
                let pass = gate.as_ref().map_or(*v > 0.0, |g| g[ch * inner + j]);
                if !pass {
                    *v *= a;
                }
            }
        }
        let shape = tx.shape().to_vec();
        self.push_op(shape, data, Op::PRelu { input: x, slope, gate }, &[x, slope])
    }

    /// Normalizes over every axis of `x` jointly, then applies a per-channel
    /// (axis 0) affine map.
    pub fn global_layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let tx = self.value(x);
        let c =
            *tx.shape().first().ok_or_else(|| Error::shape("global_layer_norm", "input must have a channel axis"))?;
        for (name, p) in [("gamma", gamma), ("beta", beta)] {
            let s = self.value(p).shape();
            if s != [c] {
                return Err(Error::shape(
                    "global_layer_norm",
                    format!("axis 0: input has {c} channels, {name} shape {s:?}"),
                ));
            }
        }
        let n = tx.numel() as f64;
        let mean = tx.data().iter().sum::<f64>() / n;
        let var = tx.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv_std = 1.0 / (var + eps).sqrt();
        let normalized: Vec<f64> = tx.data().iter().map(|v| (v - mean) * inv_std).collect();
        let inner = tx.numel() / c;
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let data = normalized
            .chunks(inner)
            .enumerate()
            .flat_map(|(ch, row)| row.iter().map(move |v| g[ch] * v + b[ch]))
            .collect();
        let shape = tx.shape().to_vec();
        self.push_op(shape, data, Op::GlobalLayerNorm { input: x, gamma, beta, normalized, inv_std }, &[x, gamma, beta])
    }

    /// Cross-correlation of `[C_in, T]` with `[C_out, C_in, K]`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        expect_rank("conv1d", "input", tx, 2)?;
        expect_rank("conv1d", "weight", tw, 3)?;
        let (c_in, t) = (tx.shape()[0], tx.shape()[1]);
        let (c_out, wc_in, k) = (tw.shape()[0], tw.shape()[1], tw.shape()[2]);
        if wc_in != c_in {
            return Err(Error::shape("conv1d", format!("axis 0 (channels): input has {c_in}, weight expects {wc_in}")));
        }
        if stride == 0 {
            return Err(Error::shape("conv1d", "stride must be at least 1"));
        }
        let t_out = kernels::conv_out_len(t, k, stride, padding).ok_or_else(|| {
            Error::shape(
                "conv1d",
                format!("axis 1 (time): length {t} + 2·{padding} padding is shorter than kernel {k}"),
            )
        })?;
        let mut out = vec![0.0; c_out * t_out];
        if let Some(b) = b {
            let tb = self.value(b);
            if tb.shape() != [c_out] {
                return Err(Error::shape("conv1d", format!("bias axis 0: expected {c_out}, got {:?}", tb.shape())));
            }
            for (row, bv) in out.chunks_mut(t_out).zip(tb.data()) {
                row.fill(*bv);
            }
        }
        let ck = c_in * k;
        if k == 1 && stride == 1 && padding == 0 {
            gemm(c_out, ck, t_out, tw.data(), ck, 1, tx.data(), t_out, 1, 1.0, &mut out);
        } else {
            let cols = kernels::im2col(tx.data(), c_in, t, k, stride, padding, t_out);
            gemm(c_out, ck, t_out, tw.data(), ck, 1, &cols, t_out, 1, 1.0, &mut out);
        }
        self.macs += (c_out * c_in * k * t_out) as u64;
        let mut ins = vec![x, w];
        ins.extend(b);
        self.push_op(vec![c_out, t_out], out, Op::Conv1d { input: x, weight: w, bias: b, stride, padding }, &ins)
    }

    /// Transposed convolution of `[C_in, T]` with `[C_in, C_out, K]`; the exact
    /// adjoint of [`Graph::conv1d`] under the same weight.
    pub fn conv_transpose1d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        expect_rank("conv_transpose1d", "input", tx, 2)?;
        expect_rank("conv_transpose1d", "weight", tw, 3)?;
        let (c_in, t) = (tx.shape()[0], tx.shape()[1]);
        let (wc_in, c_out, k) = (tw.shape()[0], tw.shape()[1], tw.shape()[2]);
        if wc_in != c_in {
            return Err(Error::shape(
                "conv_transpose1d",
                format!("axis 0 (channels): input has {c_in}, weight expects {wc_in}"),
            ));
        }
        if stride == 0 {
            return Err(Error::shape("conv_transpose1d", "stride must be at least 1"));
        }
        let t_out = kernels::conv_transpose_out_len(t, k, stride, padding).ok_or_else(|| {
            Error::shape(
                "conv_transpose1d",
                format!("axis 1 (time): output length (T−1)·{stride} − 2·{padding} + {k} is not positive for T={t}"),
            )
        })?;
        let ok = c_out * k;
        let mut cols = vec![0.0; ok * t];
        gemm(ok, c_in, t, tw.data(), 1, ok, tx.data(), t, 1, 0.0, &mut cols);
        let mut out = vec![0.0; c_out * t_out];
        kernels::col2im_add(&cols, c_out, t_out, k, stride, padding, t, &mut out);
        if let Some(b) = b {
            let tb = self.value(b);
            if tb.shape() != [c_out] {
                return Err(Error::shape(
                    "conv_transpose1d",
                    format!("bias axis 0: expected {c_out}, got {:?}", tb.shape()),
                ));
            }
            for (row, bv) in out.chunks_mut(t_out).zip(tb.data()) {
                row.iter_mut().for_each(|v| *v += bv);
            }
        }
        self.macs += (c_in * c_out * k * t) as u64;
        let mut ins = vec![x, w];
        ins.extend(b);
        self.push_op(
            vec![c_out, t_out],
            out,
            Op::ConvTranspose1d { input: x, weight: w, bias: b, stride, padding },
            &ins,
        )
    }

    /// Per-channel convolution; `w` is `[C, 1, K]`, `b` is `[C]`.
    pub fn depthwise_conv1d(&mut self, x: Var, w: Var, b: Var, stride: usize, padding: usize) -> Result<Var> {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        expect_rank("depthwise_conv1d", "input", tx, 2)?;
        expect_rank("depthwise_conv1d", "weight", tw, 3)?;
        let (c, t) = (tx.shape()[0], tx.shape()[1]);
        let k = tw.shape()[2];
        if tw.shape()[0] != c || tw.shape()[1] != 1 {
            return Err(Error::shape(
                "depthwise_conv1d",
                format!("axis 0 (channels): input has {c}, weight shape {:?}", tw.shape()),
            ));
        }
        if tb.shape() != [c] {
            return Err(Error::shape("depthwise_conv1d", format!("bias axis 0: expected {c}, got {:?}", tb.shape())));
        }
        let t_out = kernels::conv_out_len(t, k, stride, padding).ok_or_else(|| {
            Error::shape("depthwise_conv1d", format!("axis 1 (time): length {t} too short for kernel {k}"))
        })?;
        let out = kernels::depthwise_forward(tx.data(), tw.data(), tb.data(), c, t, k, stride, padding, t_out);
        self.macs += (c * k * t_out) as u64;
        self.push_op(vec![c, t_out], out, Op::Depthwise { input: x, weight: w, bias: b, stride, padding }, &[x, w, b])
    }

    /// Linear resampling along the last axis of a `[C, F]` tensor, with the
    /// first and last samples aligned.
    pub fn interpolate_time(&mut self, x: Var, target_len: usize) -> Result<Var> {
        let tx = self.value(x);
        expect_rank("interpolate_time", "input", tx, 2)?;
        if target_len == 0 {
            return Err(Error::shape("interpolate_time", "axis 1 (time): target length must be at least 1"));
        }
        let (c, f) = (tx.shape()[0], tx.shape()[1]);
        let mut out = vec![0.0; c * target_len];
        for ch in 0..c {
            let src = &tx.data()[ch * f..(ch + 1) * f];
            for (j, o) in out[ch * target_len..(ch + 1) * target_len].iter_mut().enumerate() {
                let (i0, frac) = kernels::interp_coords(f, target_len, j);
                *o = if frac == 0.0 { src[i0] } else { (1.0 - frac) * src[i0] + frac * src[i0 + 1] };
            }
        }
        self.push_op(vec![c, target_len], out, Op::Interpolate(x), &[x])
    }

    /// Nearest-neighbour ×2 upsampling of `[C, L]` to `[C, target_len]`:
    /// output frame `i` copies input frame `i / 2`.
    pub fn upsample_nearest2(&mut self, x: Var, target_len: usize) -> Result<Var> {
        let tx = self.value(x);
        expect_rank("upsample_nearest2", "input", tx, 2)?;
        let (c, l) = (tx.shape()[0], tx.shape()[1]);
        if target_len == 0 || (target_len - 1) / 2 >= l {
            return Err(Error::shape(
                "upsample_nearest2",
                format!("axis 1 (time): cannot upsample {l} frames to {target_len}"),
            ));
        }
        let mut out = vec![0.0; c * target_len];
        for ch in 0..c {
            let src = &tx.data()[ch * l..(ch + 1) * l];
            for (i, o) in out[ch * target_len..(ch + 1) * target_len].iter_mut().enumerate() {
                *o = src[i / 2];
            }
        }
        self.push_op(vec![c, target_len], out, Op::Upsample2(x), &[x])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a);
        let n: usize = shape.iter().product();
        if n != t.numel() {
            return Err(Error::shape("reshape", format!("cannot view {:?} as {shape:?}", t.shape())));
        }
        let data = t.data().to_vec();
        self.push_op(shape.to_vec(), data, Op::Reshape(a), &[a])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        expect_rank("transpose", "input", t, 2)?;
        let (r, c) = (t.shape()[0], t.shape()[1]);
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = t.data()[i * c + j];
            }
        }
        self.push_op(vec![c, r], data, Op::Transpose(a), &[a])
    }

    /// Centre-crops or zero-pads the last axis of `[C, L]` to `target_len`.
    pub fn fit_length(&mut self, a: Var, target_len: usize) -> Result<Var> {
        let t = self.value(a);
        expect_rank("fit_length", "input", t, 2)?;
        let (c, l) = (t.shape()[0], t.shape()[1]);
        if target_len == 0 {
            return Err(Error::shape("fit_length", "axis 1 (time): target length must be at least 1"));
        }
        // offset = index into the input of output frame 0
        let offset = (l as isize - target_len as isize).div_euclid(2);
        let mut data = vec![0.0; c * target_len];
        for ch in 0..c {
            for j in 0..target_len {
                let src = j as isize + offset;
                if src >= 0 && (src as usize) < l {
                    data[ch * target_len + j] = t.data()[ch * l + src as usize];
                }
            }
        }
        self.push_op(vec![c, target_len], data, Op::FitLength { input: a, offset }, &[a])
    }

    /// Reverse sweep from a scalar `loss`. Consumes the graph; returns the
    /// gradients of every tracked leaf reachable from `loss`.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(Error::Contract("backward on an empty graph".into()));
        }
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(Error::Contract(format!("backward needs a scalar loss, got shape {:?}", lt.shape())));
        }
        let nodes = self.nodes;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        if nodes[loss.0].tracked {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            backprop(&nodes, &mut grads, node, &gy);
        }
        for (g, n) in grads.iter_mut().zip(&nodes) {
            if !matches!(n.op, Op::Leaf) {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }
}

/// Gradient buffer for `v`, zero-initialized on first touch; `None` if `v`
/// is untracked.
fn slot<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> Option<&'a mut Vec<f64>> {
    if !nodes[v.0].tracked {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.numel()]))
}

fn backprop(nodes: &[Node], grads: &mut [Option<Vec<f64>>], node: &Node, gy: &[f64]) {
    let val = |v: Var| nodes[v.0].value.data();
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            for v in [*a, *b] {
                if let Some(g) = slot(grads, nodes, v) {
                    g.iter_mut().zip(gy).for_each(|(g, d)| *g += d);
                }
            }
        }
        Op::Sub(a, b) => {
            if let Some(g) = slot(grads, nodes, *a) {
                g.iter_mut().zip(gy).for_each(|(g, d)| *g += d);
            }
            if let Some(g) = slot(grads, nodes, *b) {
                g.iter_mut().zip(gy).for_each(|(g, d)| *g -= d);
            }
        }
        Op::Mul(a, b) => {
            if let Some(g) = slot(grads, nodes, *a) {
                for ((g, d), y) in g.iter_mut().zip(gy).zip(val(*b)) {
                    *g += d * y;
                }
            }
            if let Some(g) = slot(grads, nodes, *b) {
                for ((g, d), x) in g.iter_mut().zip(gy).zip(val(*a)) {
                    *g += d * x;
                }
            }
        }
        Op::Div(a, b) => {
            if let Some(g) = slot(grads, nodes, *a) {
                for ((g, d), y) in g.iter_mut().zip(gy).zip(val(*b)) {
                    *g += d / y;
                }
            }
            if let Some(g) = slot(grads, nodes, *b) {
                for (((g, d), x), y) in g.iter_mut().zip(gy).zip(val(*a)).zip(val(*b)) {
                    *g -= d * x / (y * y);
                }
            }
        }
        Op::Scale(a, k) => {
            if let Some(g) = slot(grads, nodes, *a) {
                g.iter_mut().zip(gy).for_each(|(g, d)| *g += k * d);
            }
        }
        Op::AddScalar(a) | Op::Reshape(a) => {
            if let Some(g) = slot(grads, nodes, *a) {
                g.iter_mut().zip(gy).for_each(|(g, d)| *g += d);
            }
        }
        Op::ScaleBy(a, s) => {
            let k = val(*s)[0];
            if let Some(g) = slot(grads, nodes, *a) {
                g.iter_mut().zip(gy).for_each(|(g, d)| *g += k * d);
            }
            if let Some(g) = slot(grads, nodes, *s) {
                g[0] += gy.iter().zip(val(*a)).map(|(d, x)| d * x).sum::<f64>();
            }
        }
        Op::MatMul(a, b) => {
            let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
            let (m, k, n) = (sa[0], sa[1], sb[1]);
            let (va, vb) = (val(*a), val(*b));
            if let Some(g) = slot(grads, nodes, *a) {
                // dA = dY · Bᵀ
                gemm(m, n, k, gy, n, 1, vb, 1, n, 1.0, g);
            }
            if let Some(g) = slot(grads, nodes, *b) {
                // dB = Aᵀ · dY
                gemm(k, m, n, va, 1, k, gy, n, 1, 1.0, g);
            }
        }
        Op::Concat { inputs, axis } => {
            let shape = node.value.shape();
            let (outer, total, inner) = axis_split(shape, *axis);
            let mut offset = 0;
            for &v in inputs {
                let len = nodes[v.0].value.shape()[*axis];
                if let Some(g) = slot(grads, nodes, v) {
                    for o in 0..outer {
                        let src = &gy[(o * total + offset) * inner..(o * total + offset + len) * inner];
                        let dst = &mut g[o * len * inner..(o + 1) * len * inner];
                        dst.iter_mut().zip(src).for_each(|(g, d)| *g += d);
                    }
                }
                offset += len;
            }
        }
        Op::Narrow { input, axis, start } => {
            let in_shape = nodes[input.0].value.shape();
            let (outer, n, inner) = axis_split(in_shape, *axis);
            let len = node.value.shape()[*axis];
            if let Some(g) = slot(grads, nodes, *input) {
                for o in 0..outer {
                    let base = o * n * inner + start * inner;
                    let dst = &mut g[base..base + len * inner];
                    let src = &gy[o * len * inner..(o + 1) * len * inner];
                    dst.iter_mut().zip(src).for_each(|(g, d)| *g += d);
                }
            }
        }
        Op::SumAxis { input, axis } => {
            let (outer, n, inner) = axis_split(nodes[input.0].value.shape(), *axis);
            if let Some(g) = slot(grads, nodes, *input) {
                for o in 0..outer {
                    let src = &gy[o * inner..(o + 1) * inner];
                    for i in 0..n {
                        let dst = &mut g[(o * n + i) * inner..(o * n + i + 1) * inner];
                        dst.iter_mut().zip(src).for_each(|(g, d)| *g += d);
                    }
                }
            }
        }
        Op::SumAll(a) => {
            if let Some(g) = slot(grads, nodes, *a) {
                g.iter_mut().for_each(|g| *g += gy[0]);
            }
        }
        Op::Relu { input, gate } => {
            let x = val(*input);
            if let Some(g) = slot(grads, nodes, *input) {
                for (j, (g, d)) in g.iter_mut().zip(gy).enumerate() {
                    if gate.as_ref().map_or(x[j] > 0.0, |m| m[j]) {
                        *g += d;
                    }
                }
            }
        }
        Op::Sigmoid(a) => {
            if let Some(g) = slot(grads, nodes, *a) {
                for ((g, d), y) in g.iter_mut().zip(gy).zip(node.value.data()) {
                    *g += d * y * (1.0 - y);
                }
            }
        }
        Op::Ln(a) => {
            if let Some(g) = slot(grads, nodes, *a) {
                for ((g, d), x) in g.iter_mut().zip(gy).zip(val(*a)) {
                    *g += d / x;
                }
            }
        }
        Op::PRelu { input, slope, gate } => {
            let x = val(*input);
            let a = val(*slope);
            let inner = x.len() / a.len();
            let pass = |j: usize| gate.as_ref().map_or(x[j] > 0.0, |m| m[j]);
            if let Some(g) = slot(grads, nodes, *input) {
                for (j, (g, d)) in g.iter_mut().zip(gy).enumerate() {
                    *g += if pass(j) { *d } else { a[j / inner] * d };
                }
            }
            if let Some(g) = slot(grads, nodes, *slope) {
                for (j, (d, xv)) in gy.iter().zip(x).enumerate() {
                    if !pass(j) {
                        g[j / inner] += d * xv;
                    }
                }
            }
        }
        Op::GlobalLayerNorm { input, gamma, beta, normalized, inv_std } => {
            let gam = val(*gamma);
            let c = gam.len();
            let inner = normalized.len() / c;
            if let Some(g) = slot(grads, nodes, *gamma) {
                for (ch, (dr, nr)) in gy.chunks(inner).zip(normalized.chunks(inner)).enumerate() {
                    g[ch] += dr.iter().zip(nr).map(|(d, n)| d * n).sum::<f64>();
                }
            }
            if let Some(g) = slot(grads, nodes, *beta) {
                for (ch, dr) in gy.chunks(inner).enumerate() {
                    g[ch] += dr.iter().sum::<f64>();
                }
            }
            if let Some(g) = slot(grads, nodes, *input) {
                let n = normalized.len() as f64;
                // dx̂ = dy · γ_c;  dx = (dx̂ − mean(dx̂) − x̂ · mean(dx̂ · x̂)) / σ
                let dxhat: Vec<f64> =
                    gy.chunks(inner).enumerate().flat_map(|(ch, dr)| dr.iter().map(move |d| d * gam[ch])).collect();
                let mean_d = dxhat.iter().sum::<f64>() / n;
                let mean_dx = dxhat.iter().zip(normalized).map(|(d, x)| d * x).sum::<f64>() / n;
                for ((g, d), x) in g.iter_mut().zip(&dxhat).zip(normalized) {
                    *g += (d - mean_d - x * mean_dx) * inv_std;
                }
            }
        }
        Op::Conv1d { input, weight, bias, stride, padding } => {
            let (xs, ws) = (nodes[input.0].value.shape(), nodes[weight.0].value.shape());
            let (c_in, t) = (xs[0], xs[1]);
            let (c_out, k) = (ws[0], ws[2]);
            let t_out = node.value.shape()[1];
            let ck = c_in * k;
            let pointwise = k == 1 && *stride == 1 && *padding == 0;
            if let Some(b) = bias {
                if let Some(g) = slot(grads, nodes, *b) {
                    for (gb, row) in g.iter_mut().zip(gy.chunks(t_out)) {
                        *gb += row.iter().sum::<f64>();
                    }
                }
            }
            let want_w = nodes[weight.0].tracked;
            let want_x = nodes[input.0].tracked;
            let cols_owned;
            let cols: &[f64] = if pointwise {
                val(*input)
            } else if want_w {
                cols_owned = kernels::im2col(val(*input), c_in, t, k, *stride, *padding, t_out);
                &cols_owned
            } else {
                &[]
            };
            if want_w {
                let g = slot(grads, nodes, *weight).unwrap();
                // dW = dY · colsᵀ
                gemm(c_out, t_out, ck, gy, t_out, 1, cols, 1, t_out, 1.0, g);
            }
            if want_x {
                let w = val(*weight);
                let g = slot(grads, nodes, *input).unwrap();
                if pointwise {
                    gemm(c_in, c_out, t_out, w, 1, ck, gy, t_out, 1, 1.0, g);
                } else {
                    let mut dcols = vec![0.0; ck * t_out];
                    gemm(ck, c_out, t_out, w, 1, ck, gy, t_out, 1, 0.0, &mut dcols);
                    kernels::col2im_add(&dcols, c_in, t, k, *stride, *padding, t_out, g);
                }
            }
        }
        Op::ConvTranspose1d { input, weight, bias, stride, padding } => {
            let (xs, ws) = (nodes[input.0].value.shape(), nodes[weight.0].value.shape());
            let (c_in, t) = (xs[0], xs[1]);
            let (c_out, k) = (ws[1], ws[2]);
            let t_out = node.value.shape()[1];
            let ok = c_out * k;
            if let Some(b) = bias {
                if let Some(g) = slot(grads, nodes, *b) {
                    for (gb, row) in g.iter_mut().zip(gy.chunks(t_out)) {
                        *gb += row.iter().sum::<f64>();
                    }
                }
            }
            let dcols = kernels::im2col(gy, c_out, t_out, k, *stride, *padding, t);
            if let Some(g) = slot(grads, nodes, *input) {
                // dX = W[c_in, ok] · dcols
                gemm(c_in, ok, t, val(*weight), ok, 1, &dcols, t, 1, 1.0, g);
            }
            if let Some(g) = slot(grads, nodes, *weight) {
                // dW = X · dcolsᵀ
                gemm(c_in, t, ok, val(*input), t, 1, &dcols, 1, t, 1.0, g);
            }
        }
        Op::Depthwise { input, weight, bias, stride, padding } => {
            let xs = nodes[input.0].value.shape();
            let (c, t) = (xs[0], xs[1]);
            let k = nodes[weight.0].value.shape()[2];
            let t_out = node.value.shape()[1];
            let (x, w) = (val(*input), val(*weight));
            let mut gx = nodes[input.0].tracked.then(|| vec![0.0; x.len()]);
            let mut gw = nodes[weight.0].tracked.then(|| vec![0.0; w.len()]);
            let mut gb = nodes[bias.0].tracked.then(|| vec![0.0; c]);
            kernels::depthwise_backward(
                x,
                w,
                gy,
                c,
                t,
                k,
                *stride,
                *padding,
                t_out,
                gx.as_deref_mut(),
                gw.as_deref_mut(),
                gb.as_deref_mut(),
            );
            for (v, part) in [(*input, gx), (*weight, gw), (*bias, gb)] {
                if let (Some(g), Some(p)) = (slot(grads, nodes, v), part) {
                    g.iter_mut().zip(&p).for_each(|(g, d)| *g += d);
                }
            }
        }
        Op::Interpolate(a) => {
            let s = nodes[a.0].value.shape();
            let (c, f) = (s[0], s[1]);
            let tl = node.value.shape()[1];
            if let Some(g) = slot(grads, nodes, *a) {
                for ch in 0..c {
                    for j in 0..tl {
                        let d = gy[ch * tl + j];
                        let (i0, frac) = kernels::interp_coords(f, tl, j);
                        if frac == 0.0 {
                            g[ch * f + i0] += d;
                        } else {
                            g[ch * f + i0] += (1.0 - frac) * d;
                            g[ch * f + i0 + 1] += frac * d;
                        }
                    }
                }
            }
        }
        Op::Upsample2(a) => {
            let s = nodes[a.0].value.shape();
            let (c, l) = (s[0], s[1]);
            let tl = node.value.shape()[1];
            if let Some(g) = slot(grads, nodes, *a) {
                for ch in 0..c {
                    for i in 0..tl {
                        g[ch * l + i / 2] += gy[ch * tl + i];
                    }
                }
            }
        }
        Op::Transpose(a) => {
            let s = nodes[a.0].value.shape();
            let (r, c) = (s[0], s[1]);
            if let Some(g) = slot(grads, nodes, *a) {
                for i in 0..r {
                    for j in 0..c {
                        g[i * c + j] += gy[j * r + i];
                    }
                }
            }
        }
        Op::FitLength { input, offset } => {
            let s = nodes[input.0].value.shape();
            let (c, l) = (s[0], s[1]);
            let tl = node.value.shape()[1];
            if let Some(g) = slot(grads, nodes, *input) {
                for ch in 0..c {
                    for j in 0..tl {
                        let src = j as isize + offset;
                        if src >= 0 && (src as usize) < l {
                            g[ch * l + src as usize] += gy[ch * tl + j];
                        }
                    }
                }
            }
        }
    }
}

use crate::error::{Error, Result};

use super::Tensor;

/// Handle to a node of a [`Graph`]. Only meaningful for the graph that
/// created it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
    Sigmoid,
    Tanh,
    Relu,
    Ln,
}

impl Elementwise {
    fn arity(self) -> usize {
        match self {
            Elementwise::Add | Elementwise::Sub | Elementwise::Mul => 2,
            _ => 1,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Elementwise::Add => "add",
            Elementwise::Sub => "sub",
            Elementwise::Mul => "mul",
            Elementwise::Sigmoid => "sigmoid",
            Elementwise::Tanh => "tanh",
            Elementwise::Relu => "relu",
            Elementwise::Ln => "ln",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Broadcast {
    None,
    ScalarLhs,
    ScalarRhs,
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    depth: usize,
    height: usize,
    width: usize,
    in_ch: usize,
    out_ch: usize,
    kd: usize,
    kh: usize,
    kw: usize,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Binary {
        op: Elementwise,
        a: Var,
        b: Var,
        bcast: Broadcast,
    },
    Unary {
        op: Elementwise,
        a: Var,
    },
    Scale {
        a: Var,
        factor: f64,
    },
    Clamp {
        a: Var,
        lo: f64,
        hi: f64,
    },
    Softmax {
        a: Var,
        cols: usize,
    },
    Concat {
        parts: Vec<Var>,
        outer: usize,
        inner: usize,
        sizes: Vec<usize>,
    },
    Reduce {
        op: Reduction,
        a: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    Reshape {
        a: Var,
    },
    Transpose {
        a: Var,
        rows: usize,
        cols: usize,
    },
    Narrow {
        a: Var,
        outer: usize,
        axis_len: usize,
        start: usize,
        len: usize,
        inner: usize,
    },
    Conv3d {
        input: Var,
        weight: Var,
        bias: Var,
        geom: ConvGeom,
    },
    MaxPool3d {
        input: Var,
        argmax: Vec<usize>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Binary { op, .. } | Op::Unary { op, .. } => op.name(),
            Op::Scale { .. } => "scale",
            Op::Clamp { .. } => "clamp",
            Op::Softmax { .. } => "softmax",
            Op::Concat { .. } => "concat",
            Op::Reduce {
                op: Reduction::Sum, ..
            } => "sum",
            Op::Reduce {
                op: Reduction::Mean,
                ..
            } => "mean",
            Op::Reshape { .. } => "reshape",
            Op::Transpose { .. } => "transpose",
            Op::Narrow { .. } => "narrow",
            Op::Conv3d { .. } => "conv3d",
            Op::MaxPool3d { .. } => "max_pool3d",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul { a, b, .. } | Op::Binary { a, b, .. } => vec![*a, *b],
            Op::Unary { a, .. }
            | Op::Scale { a, .. }
            | Op::Clamp { a, .. }
            | Op::Softmax { a, .. }
            | Op::Reduce { a, .. }
            | Op::Reshape { a }
            | Op::Transpose { a, .. }
            | Op::Narrow { a, .. } => vec![*a],
            Op::Concat { parts, .. } => parts.clone(),
            Op::Conv3d {
                input,
                weight,
                bias,
                ..
            } => vec![*input, *weight, *bias],
            Op::MaxPool3d { input, .. } => vec![*input],
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    grad: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Provenance of one tape entry.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OpRecord {
    pub output: Var,
    pub op: &'static str,
    pub inputs: Vec<Var>,
}

/// Append-only computation tape.
///
/// Nodes are stored in creation order and an operation may only consume
/// nodes that already exist, so the tape is a DAG by construction.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
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

    pub fn leaf(&mut self, tensor: Tensor, requires_grad: bool) -> Var {
        let shape = tensor.shape().to_vec();
        self.push(shape, tensor.into_data(), Op::Leaf, requires_grad)
    }

    /// Leaf that accumulates gradient.
    pub fn param(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor, true)
    }

    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor, false)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].grad
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape is valid")
    }

    pub fn grad_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.grad.clone()).expect("node shape is valid")
    }

    /// Value of a single-element node.
    pub fn item(&self, v: Var) -> Result<f64> {
        match self.value(v) {
            [x] => Ok(*x),
            other => Err(Error::contract(format!(
                "item() needs a single-element tensor, got {} values",
                other.len()
            ))),
        }
    }

    pub fn record(&self, v: Var) -> OpRecord {
        let op = &self.nodes[v.0].op;
        OpRecord {
            output: v,
            op: op.name(),
            inputs: op.inputs(),
        }
    }

    /// The whole tape in creation order.
    pub fn records(&self) -> impl Iterator<Item = OpRecord> + '_ {
        (0..self.nodes.len()).map(|i| self.record(Var(i)))
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let grad = vec![0.0; value.len()];
        self.nodes.push(Node {
            shape,
            value,
            grad,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    // ------------------------------------------------------------------
    // Operations

    /// `[m, k] x [k, n] -> [m, n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim(format!("matmul of {sa:?} and {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = matmul_raw(self.value(a), self.value(b), m, k, n);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(vec![m, n], out, Op::MatMul { a, b, m, k, n }, rg))
    }

    pub fn elementwise(&mut self, op: Elementwise, operands: &[Var]) -> Result<Var> {
        if operands.len() != op.arity() {
            return Err(Error::contract(format!(
                "{} takes {} operand(s), got {}",
                op.name(),
                op.arity(),
                operands.len()
            )));
        }
        if op.arity() == 1 {
            return Ok(self.unary(op, operands[0]));
        }
        let (a, b) = (operands[0], operands[1]);
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (bcast, shape) = if sa == sb {
            (Broadcast::None, sa.to_vec())
        } else if self.value(b).len() == 1 {
            (Broadcast::ScalarRhs, sa.to_vec())
        } else if self.value(a).len() == 1 {
            (Broadcast::ScalarLhs, sb.to_vec())
        } else {
            return Err(Error::dim(format!(
                "{} of incompatible shapes {sa:?} and {sb:?}",
                op.name()
            )));
        };
        let f: fn(f64, f64) -> f64 = match op {
            Elementwise::Add => |x, y| x + y,
            Elementwise::Sub => |x, y| x - y,
            _ => |x, y| x * y,
        };
        let (va, vb) = (self.value(a), self.value(b));
        let out: Vec<f64> = match bcast {
            Broadcast::None => va.iter().zip(vb).map(|(&x, &y)| f(x, y)).collect(),
            Broadcast::ScalarRhs => va.iter().map(|&x| f(x, vb[0])).collect(),
            Broadcast::ScalarLhs => vb.iter().map(|&y| f(va[0], y)).collect(),
        };
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(shape, out, Op::Binary { op, a, b, bcast }, rg))
    }

    fn unary(&mut self, op: Elementwise, a: Var) -> Var {
        let f: fn(f64) -> f64 = match op {
            Elementwise::Sigmoid => sigmoid,
            Elementwise::Tanh => f64::tanh,
            Elementwise::Relu => |x| x.max(0.0),
            Elementwise::Ln => f64::ln,
            _ => unreachable!("binary op dispatched as unary"),
        };
        let out = self.value(a).iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.any_grad(&[a]);
        self.push(shape, out, Op::Unary { op, a }, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(Elementwise::Add, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(Elementwise::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(Elementwise::Mul, &[a, b])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(Elementwise::Sigmoid, a)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(Elementwise::Tanh, a)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(Elementwise::Relu, a)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(Elementwise::Ln, a)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.value(a).iter().map(|&x| x * factor).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.any_grad(&[a]);
        self.push(shape, out, Op::Scale { a, factor }, rg)
    }

    /// Clamps into `[lo, hi]`; gradient is zero where clamping is active.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let out = self.value(a).iter().map(|&x| x.clamp(lo, hi)).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.any_grad(&[a]);
        self.push(shape, out, Op::Clamp { a, lo, hi }, rg)
    }

    /// Softmax along the last axis, computed with max subtraction.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let cols = *shape.last().expect("shapes are non-empty");
        let mut out = self.value(a).to_vec();
        for row in out.chunks_mut(cols) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if !max.is_finite() {
                return Err(Error::Numeric(format!("softmax input contains {max}")));
            }
            let mut total = 0.0;
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                total += *x;
            }
            for x in row.iter_mut() {
                *x /= total;
            }
        }
        let rg = self.any_grad(&[a]);
        Ok(self.push(shape, out, Op::Softmax { a, cols }, rg))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::dim("concat of zero tensors"))?;
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(Error::dim(format!(
                "concat axis {axis} out of range for {base:?}"
            )));
        }
        let mut sizes = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(Error::dim(format!(
                    "concat along axis {axis} of {base:?} and {s:?}"
                )));
            }
            sizes.push(s[axis]);
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let total: usize = sizes.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&p, &size) in parts.iter().zip(&sizes) {
                let chunk = size * inner;
                out.extend_from_slice(&self.value(p)[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = self.any_grad(parts);
        Ok(self.push(
            shape,
            out,
            Op::Concat {
                parts: parts.to_vec(),
                outer,
                inner,
                sizes,
            },
            rg,
        ))
    }

    /// Reduces one axis. Reducing the only axis of a rank-1 tensor yields `[1]`.
    pub fn reduce(&mut self, op: Reduction, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::dim(format!(
                "reduction axis {axis} out of range for {shape:?}"
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let x = self.value(a);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = &x[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (acc, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *acc += v;
                }
            }
        }
        if op == Reduction::Mean {
            let n = len as f64;
            out.iter_mut().for_each(|v| *v /= n);
        }
        let mut out_shape: Vec<usize> = shape
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != axis)
            .map(|(_, &d)| d)
            .collect();
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let rg = self.any_grad(&[a]);
        Ok(self.push(
            out_shape,
            out,
            Op::Reduce {
                op,
                a,
                outer,
                len,
                inner,
            },
            rg,
        ))
    }

    /// Sum of every element, as a `[1]` tensor.
    pub fn sum_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len();
        let flat = self.reshape(a, &[n]).expect("same element count");
        self.reduce(Reduction::Sum, flat, 0).expect("axis 0 exists")
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len();
        let flat = self.reshape(a, &[n]).expect("same element count");
        self.reduce(Reduction::Mean, flat, 0).expect("axis 0 exists")
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if shape.is_empty() || shape.contains(&0) || numel != self.value(a).len() {
            return Err(Error::dim(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape(a)
            )));
        }
        let out = self.value(a).to_vec();
        let rg = self.any_grad(&[a]);
        Ok(self.push(shape.to_vec(), out, Op::Reshape { a }, rg))
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a);
        if shape.len() != 2 {
            return Err(Error::dim(format!("transpose needs rank 2, got {shape:?}")));
        }
        let (rows, cols) = (shape[0], shape[1]);
        let out = transpose_raw(self.value(a), rows, cols);
        let rg = self.any_grad(&[a]);
        Ok(self.push(vec![cols, rows], out, Op::Transpose { a, rows, cols }, rg))
    }

    /// `len` consecutive entries of `axis` starting at `start`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::dim(format!(
                "narrow axis {axis} range {start}..{} invalid for {shape:?}",
                start + len
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let axis_len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let x = self.value(a);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * axis_len + start) * inner;
            out.extend_from_slice(&x[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let rg = self.any_grad(&[a]);
        Ok(self.push(
            out_shape,
            out,
            Op::Narrow {
                a,
                outer,
                axis_len,
                start,
                len,
                inner,
            },
            rg,
        ))
    }

    /// Row `i` of a rank-2 tensor as a `[1, n]` tensor.
    pub fn row(&mut self, a: Var, i: usize) -> Result<Var> {
        self.narrow(a, 0, i, 1)
    }

    /// Stride-1 "same" convolution over a `[D, H, W, C_in]` volume with a
    /// `[C_out, KD, KH, KW, C_in]` kernel (odd extents) and `[C_out]` bias.
    ///
    /// A per-frame 2D convolution over a clip is the `KD = 1` case.
    pub fn conv3d(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (si, sw, sb) = (self.shape(input), self.shape(weight), self.shape(bias));
        if si.len() != 4 || sw.len() != 5 || sb.len() != 1 {
            return Err(Error::dim(format!(
                "conv3d expects input [D,H,W,C], weight [O,KD,KH,KW,C], bias [O]; \
                 got {si:?}, {sw:?}, {sb:?}"
            )));
        }
        if sw[4] != si[3] || sb[0] != sw[0] || sw[1..4].iter().any(|k| k % 2 == 0) {
            return Err(Error::dim(format!(
                "conv3d kernel {sw:?} / bias {sb:?} incompatible with input {si:?}"
            )));
        }
        let geom = ConvGeom {
            depth: si[0],
            height: si[1],
            width: si[2],
            in_ch: si[3],
            out_ch: sw[0],
            kd: sw[1],
            kh: sw[2],
            kw: sw[3],
        };
        let out = conv3d_forward(self.value(input), self.value(weight), self.value(bias), geom);
        let rg = self.any_grad(&[input, weight, bias]);
        Ok(self.push(
            vec![geom.depth, geom.height, geom.width, geom.out_ch],
            out,
            Op::Conv3d {
                input,
                weight,
                bias,
                geom,
            },
            rg,
        ))
    }

    /// Non-overlapping max pooling of a `[D, H, W, C]` volume; trailing
    /// remainders that do not fill a window are dropped.
    pub fn max_pool3d(&mut self, input: Var, window: [usize; 3]) -> Result<Var> {
        let s = self.shape(input).to_vec();
        if s.len() != 4 || window.contains(&0) || (0..3).any(|i| s[i] < window[i]) {
            return Err(Error::dim(format!(
                "max_pool3d window {window:?} does not fit input {s:?}"
            )));
        }
        let (d, h, w, c) = (s[0], s[1], s[2], s[3]);
        let (od, oh, ow) = (d / window[0], h / window[1], w / window[2]);
        let x = self.value(input);
        let mut out = Vec::with_capacity(od * oh * ow * c);
        let mut argmax = Vec::with_capacity(od * oh * ow * c);
        for z in 0..od {
            for y in 0..oh {
                for xx in 0..ow {
                    for ch in 0..c {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_idx = 0;
                        for dz in 0..window[0] {
                            for dy in 0..window[1] {
                                for dx in 0..window[2] {
                                    let idx = (((z * window[0] + dz) * h + y * window[1] + dy)
                                        * w
                                        + xx * window[2]
                                        + dx)
                                        * c
                                        + ch;
                                    if x[idx] > best {
                                        best = x[idx];
                                        best_idx = idx;
                                    }
                                }
                            }
                        }
                        out.push(best);
                        argmax.push(best_idx);
                    }
                }
            }
        }
        let rg = self.any_grad(&[input]);
        Ok(self.push(vec![od, oh, ow, c], out, Op::MaxPool3d { input, argmax }, rg))
    }

    // ------------------------------------------------------------------
    // Reverse pass

    /// Accumulates `d loss / d node` into every node that requires grad.
    ///
    /// Repeated calls accumulate; call [`Graph::zero_grad`] in between to
    /// start fresh.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Vec<f64>> = vec![Vec::new(); loss.0 + 1];
        grads[loss.0] = vec![1.0];
        for i in (0..=loss.0).rev() {
            if grads[i].is_empty() || !self.nodes[i].requires_grad {
                continue;
            }
            let g = std::mem::take(&mut grads[i]);
            self.propagate(i, &g, &mut grads);
            for (acc, v) in self.nodes[i].grad.iter_mut().zip(&g) {
                *acc += v;
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Vec<f64>]) {
        let node = &self.nodes[i];
        let nodes = &self.nodes;
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, n } => {
                let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                if let Some(ga) = grad_slot(nodes, grads, a) {
                    // ga += g · bᵀ
                    for r in 0..m {
                        for c in 0..k {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += g[r * n + j] * vb[c * n + j];
                            }
                            ga[r * k + c] += s;
                        }
                    }
                }
                if let Some(gb) = grad_slot(nodes, grads, b) {
                    // gb += aᵀ · g
                    for r in 0..m {
                        for c in 0..k {
                            let av = va[r * k + c];
                            if av == 0.0 {
                                continue;
                            }
                            let row = &mut gb[c * n..(c + 1) * n];
                            for (acc, gv) in row.iter_mut().zip(&g[r * n..(r + 1) * n]) {
                                *acc += av * gv;
                            }
                        }
                    }
                }
            }
            &Op::Binary { op, a, b, bcast } => {
                let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                let at = |vals: &Vec<f64>, j: usize, scalar: bool| {
                    if scalar {
                        vals[0]
                    } else {
                        vals[j]
                    }
                };
                let a_scalar = bcast == Broadcast::ScalarLhs;
                let b_scalar = bcast == Broadcast::ScalarRhs;
                // d out / d a and d out / d b at element j
                let da = |j: usize| match op {
                    Elementwise::Mul => at(vb, j, b_scalar),
                    _ => 1.0,
                };
                let db = |j: usize| match op {
                    Elementwise::Add => 1.0,
                    Elementwise::Sub => -1.0,
                    _ => at(va, j, a_scalar),
                };
                if let Some(ga) = grad_slot(nodes, grads, a) {
                    for (j, gv) in g.iter().enumerate() {
                        ga[if a_scalar { 0 } else { j }] += gv * da(j);
                    }
                }
                if let Some(gb) = grad_slot(nodes, grads, b) {
                    for (j, gv) in g.iter().enumerate() {
                        gb[if b_scalar { 0 } else { j }] += gv * db(j);
                    }
                }
            }
            &Op::Unary { op, a } => {
                let (x, y) = (&nodes[a.0].value, &node.value);
                if let Some(ga) = grad_slot(nodes, grads, a) {
                    for j in 0..g.len() {
                        let d = match op {
                            Elementwise::Sigmoid => y[j] * (1.0 - y[j]),
                            Elementwise::Tanh => 1.0 - y[j] * y[j],
                            Elementwise::Relu => {
                                if x[j] > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            Elementwise::Ln => 1.0 / x[j],
                            _ => unreachable!(),
                        };
                        ga[j] += g[j] * d;
                    }
                }
            }
            &Op::Scale { a, factor } => {
                if let Some(ga) = grad_slot(nodes, grads, a) {
                    for (acc, gv) in ga.iter_mut().zip(g) {
                        *acc += gv * factor;
                    }
                }
            }
            &Op::Clamp { a, lo, hi } => {
                let x = &nodes[a.0].value;
                if let Some(ga) = grad_slot(nodes, grads, a) {
                    for j in 0..g.len() {
                        if x[j] >= lo && x[j] <= hi {
                            ga[j] += g[j];
                        }
                    }
                }
            }
            &Op::Softmax { a, cols } => {
                let y = &node.value;
                if let Some(ga) = grad_slot(nodes, grads, a) {
                    for r in 0..y.len() / cols {
                        let ys = &y[r * cols..(r + 1) * cols];
                        let gs = &g[r * cols..(r + 1) * cols];
                        let dot: f64 = ys.iter().zip(gs).map(|(p, q)| p * q).sum();
                        for j in 0..cols {
                            ga[r * cols + j] += ys[j] * (gs[j] - dot);
                        }
                    }
                }
            }
            Op::Concat {
                parts,
                outer,
                inner,
                sizes,
            } => {
                let total: usize = sizes.iter().sum();
                let mut offset = 0;
                for (&p, &size) in parts.iter().zip(sizes) {
                    let chunk = size * inner;
                    if let Some(gp) = grad_slot(nodes, grads, p) {
                        for o in 0..*outer {
                            let src = &g[o * total * inner + offset..][..chunk];
                            for (acc, gv) in gp[o * chunk..(o + 1) * chunk].iter_mut().zip(src) {
                                *acc += gv;
                            }
                        }
                    }
                    offset += chunk;
                }
            }
            &Op::Reduce {
                op,
                a,
                outer,
                len,
                inner,
            } => {
                let w = match op {
                    Reduction::Sum => 1.0,
                    Reduction::Mean => 1.0 / len as f64,
                };
                if let Some(ga) = grad_slot(nodes, grads, a) {
                    for o in 0..outer {
                        let src = &g[o * inner..(o + 1) * inner];
                        for l in 0..len {
                            let dst = &mut ga[(o * len + l) * inner..(o * len + l + 1) * inner];
                            for (acc, gv) in dst.iter_mut().zip(src) {
                                *acc += gv * w;
                            }
                        }
                    }
                }
            }
            &Op::Reshape { a } => {
                if let Some(ga) = grad_slot(nodes, grads, a) {
                    for (acc, gv) in ga.iter_mut().zip(g) {
                        *acc += gv;
                    }
                }
            }
            &Op::Transpose { a, rows, cols } => {
                if let Some(ga) = grad_slot(nodes, grads, a) {
                    // out[c, r] = a[r, c]
                    for r in 0..rows {
                        for c in 0..cols {
                            ga[r * cols + c] += g[c * rows + r];
                        }
                    }
                }
            }
            &Op::Narrow {
                a,
                outer,
                axis_len,
                start,
                len,
                inner,
            } => {
                if let Some(ga) = grad_slot(nodes, grads, a) {
                    for o in 0..outer {
                        let base = (o * axis_len + start) * inner;
                        let src = &g[o * len * inner..(o + 1) * len * inner];
                        for (acc, gv) in ga[base..base + len * inner].iter_mut().zip(src) {
                            *acc += gv;
                        }
                    }
                }
            }
            &Op::Conv3d {
                input,
                weight,
                bias,
                geom,
            } => {
                let (x, w) = (&nodes[input.0].value, &nodes[weight.0].value);
                if let Some(gb) = grad_slot(nodes, grads, bias) {
                    for (j, gv) in g.iter().enumerate() {
                        gb[j % geom.out_ch] += gv;
                    }
                }
                if let Some(gw) = grad_slot(nodes, grads, weight) {
                    conv3d_for_each(geom, |out_idx, in_idx, w_idx| {
                        gw[w_idx] += g[out_idx] * x[in_idx];
                    });
                }
                if let Some(gi) = grad_slot(nodes, grads, input) {
                    conv3d_for_each(geom, |out_idx, in_idx, w_idx| {
                        gi[in_idx] += g[out_idx] * w[w_idx];
                    });
                }
            }
            Op::MaxPool3d { input, argmax } => {
                if let Some(gi) = grad_slot(nodes, grads, *input) {
                    for (gv, &idx) in g.iter().zip(argmax) {
                        gi[idx] += gv;
                    }
                }
            }
        }
    }
}

/// Lazily materialized gradient buffer for `v`, or `None` when `v` does not
/// track gradients.
fn grad_slot<'g>(nodes: &[Node], grads: &'g mut [Vec<f64>], v: Var) -> Option<&'g mut Vec<f64>> {
    let n = &nodes[v.0];
    if !n.requires_grad {
        return None;
    }
    let buf = &mut grads[v.0];
    if buf.is_empty() {
        *buf = vec![0.0; n.value.len()];
    }
    Some(buf)
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (acc, bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *acc += av * bv;
            }
        }
    }
    c
}

fn transpose_raw(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// Visits every (output, input, weight) index triple that contributes to the
/// convolution, skipping taps that fall into the zero padding.
fn conv3d_for_each(geom: ConvGeom, mut visit: impl FnMut(usize, usize, usize)) {
    let ConvGeom {
        depth,
        height,
        width,
        in_ch,
        out_ch,
        kd,
        kh,
        kw,
    } = geom;
    let (pd, ph, pw) = (kd / 2, kh / 2, kw / 2);
    for z in 0..depth {
        for y in 0..height {
            for x in 0..width {
                for o in 0..out_ch {
                    let out_idx = ((z * height + y) * width + x) * out_ch + o;
                    for dz in 0..kd {
                        let Some(iz) = (z + dz).checked_sub(pd).filter(|&v| v < depth) else {
                            continue;
                        };
                        for dy in 0..kh {
                            let Some(iy) = (y + dy).checked_sub(ph).filter(|&v| v < height)
                            else {
                                continue;
                            };
                            for dx in 0..kw {
                                let Some(ix) = (x + dx).checked_sub(pw).filter(|&v| v < width)
                                else {
                                    continue;
                                };
                                let in_base = ((iz * height + iy) * width + ix) * in_ch;
                                let w_base = (((o * kd + dz) * kh + dy) * kw + dx) * in_ch;
                                for c in 0..in_ch {
                                    visit(out_idx, in_base + c, w_base + c);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

fn conv3d_forward(x: &[f64], w: &[f64], bias: &[f64], geom: ConvGeom) -> Vec<f64> {
    let mut out: Vec<f64> = (0..geom.depth * geom.height * geom.width)
        .flat_map(|_| bias.iter().copied())
        .collect();
    conv3d_for_each(geom, |out_idx, in_idx, w_idx| {
        out[out_idx] += x[in_idx] * w[w_idx];
    });
    out
}

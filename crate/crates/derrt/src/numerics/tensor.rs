//! Reverse-mode automatic differentiation on a flat tape.
//!
//! A [`Graph`] records operations eagerly: each op computes its value when it
//! is added and remembers how to push gradients back to its parents. Nodes
//! are created in topological order, so the backward pass is a single reverse
//! sweep over the tape. A graph is consumable: one [`Graph::backward`] call
//! per graph.
//!
//! Parameters live outside any graph as [`TensorData`] and are bound as leaf
//! nodes per forward pass; after `backward`, gradients are read back per leaf
//! and fed to the optimizer.

use super::rng::RngStream;

/// Shape-tagged host storage for parameters and inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorData {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl TensorData {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "TensorData: shape/data length mismatch"
        );
        Self { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    /// Gaussian init with the given std.
    pub fn randn(shape: Vec<usize>, std: f64, rng: &mut RngStream) -> Self {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.normal_scaled(0.0, std)).collect();
        Self { shape, data }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Tensor(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    AddConst(usize),
    Tanh(usize),
    Sigmoid(usize),
    Softplus(usize),
    Relu(usize),
    Exp(usize),
    Ln(usize),
    Square(usize),
    Sum(usize),
    Matmul {
        a: usize,
        b: usize,
        m: usize,
        n: usize,
        p: usize,
    },
    Matvec {
        w: usize,
        x: usize,
        m: usize,
        n: usize,
    },
    Concat(Vec<usize>),
    Narrow {
        src: usize,
        start: usize,
        len: usize,
    },
    Conv2d {
        input: usize,
        weight: usize,
        bias: usize,
        c_in: usize,
        h: usize,
        w: usize,
        c_out: usize,
    },
    MaxPool2 {
        input: usize,
        argmax: Vec<usize>,
    },
    Reshape(usize),
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    grad: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Eager autodiff tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    consumed: bool,
}

const CONV_K: usize = 3; // all convolutions in this crate are 3x3

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::with_capacity(256),
            consumed: false,
        }
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Tensor {
        debug_assert!(
            value.iter().all(|v| v.is_finite()),
            "non-finite value produced by {op:?}"
        );
        self.nodes.push(Node {
            shape,
            value,
            grad: Vec::new(),
            op,
            requires_grad,
        });
        Tensor(self.nodes.len() - 1)
    }

    fn rg(&self, t: Tensor) -> bool {
        self.nodes[t.0].requires_grad
    }

    pub fn value(&self, t: Tensor) -> &[f64] {
        &self.nodes[t.0].value
    }

    pub fn shape(&self, t: Tensor) -> &[usize] {
        &self.nodes[t.0].shape
    }

    pub fn scalar_value(&self, t: Tensor) -> f64 {
        assert_eq!(self.nodes[t.0].value.len(), 1, "scalar_value on non-scalar");
        self.nodes[t.0].value[0]
    }

    /// Gradient of the last backward target w.r.t. `t`.
    /// Empty slice for nodes that do not require gradients.
    pub fn grad(&self, t: Tensor) -> &[f64] {
        &self.nodes[t.0].grad
    }

    /// Bind host data as a leaf node.
    pub fn leaf(&mut self, data: &TensorData, requires_grad: bool) -> Tensor {
        self.push(
            data.shape.clone(),
            data.data.clone(),
            Op::Leaf,
            requires_grad,
        )
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        self.push(shape, data, Op::Leaf, false)
    }

    pub fn constant_vec(&mut self, data: &[f64]) -> Tensor {
        self.push(vec![data.len()], data.to_vec(), Op::Leaf, false)
    }

    pub fn scalar(&mut self, v: f64) -> Tensor {
        self.push(vec![1], vec![v], Op::Leaf, false)
    }

    fn binary_elementwise(
        &mut self,
        a: Tensor,
        b: Tensor,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Tensor {
        assert_eq!(
            self.nodes[a.0].shape, self.nodes[b.0].shape,
            "elementwise op on mismatched shapes"
        );
        let value = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let rg = self.rg(a) || self.rg(b);
        self.push(self.nodes[a.0].shape.clone(), value, op, rg)
    }

    pub fn add(&mut self, a: Tensor, b: Tensor) -> Tensor {
        self.binary_elementwise(a, b, |x, y| x + y, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Tensor, b: Tensor) -> Tensor {
        self.binary_elementwise(a, b, |x, y| x - y, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Tensor, b: Tensor) -> Tensor {
        self.binary_elementwise(a, b, |x, y| x * y, Op::Mul(a.0, b.0))
    }

    pub fn div(&mut self, a: Tensor, b: Tensor) -> Tensor {
        self.binary_elementwise(a, b, |x, y| x / y, Op::Div(a.0, b.0))
    }

    fn unary(&mut self, a: Tensor, f: impl Fn(f64) -> f64, op: Op) -> Tensor {
        let value = self.nodes[a.0].value.iter().map(|&x| f(x)).collect();
        let rg = self.rg(a);
        self.push(self.nodes[a.0].shape.clone(), value, op, rg)
    }

    pub fn neg(&mut self, a: Tensor) -> Tensor {
        self.unary(a, |x| -x, Op::Neg(a.0))
    }

    pub fn scale(&mut self, a: Tensor, c: f64) -> Tensor {
        self.unary(a, |x| c * x, Op::Scale(a.0, c))
    }

    pub fn add_const(&mut self, a: Tensor, c: f64) -> Tensor {
        self.unary(a, |x| x + c, Op::AddConst(a.0))
    }

    pub fn tanh(&mut self, a: Tensor) -> Tensor {
        self.unary(a, f64::tanh, Op::Tanh(a.0))
    }

    pub fn sigmoid(&mut self, a: Tensor) -> Tensor {
        self.unary(a, |x| 1.0 / (1.0 + (-x).exp()), Op::Sigmoid(a.0))
    }

    pub fn softplus(&mut self, a: Tensor) -> Tensor {
        // max(x,0) + ln(1 + exp(-|x|)) is stable for large |x|.
        self.unary(
            a,
            |x| x.max(0.0) + (-x.abs()).exp().ln_1p(),
            Op::Softplus(a.0),
        )
    }

    pub fn relu(&mut self, a: Tensor) -> Tensor {
        self.unary(a, |x| x.max(0.0), Op::Relu(a.0))
    }

    pub fn exp(&mut self, a: Tensor) -> Tensor {
        self.unary(a, f64::exp, Op::Exp(a.0))
    }

    pub fn ln(&mut self, a: Tensor) -> Tensor {
        self.unary(a, f64::ln, Op::Ln(a.0))
    }

    pub fn square(&mut self, a: Tensor) -> Tensor {
        self.unary(a, |x| x * x, Op::Square(a.0))
    }

    pub fn sum(&mut self, a: Tensor) -> Tensor {
        let total: f64 = self.nodes[a.0].value.iter().sum();
        let rg = self.rg(a);
        self.push(vec![1], vec![total], Op::Sum(a.0), rg)
    }

    /// Matrix product of `a: [m, n]` and `b: [n, p]`.
    pub fn matmul(&mut self, a: Tensor, b: Tensor) -> Tensor {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        assert!(
            sa.len() == 2 && sb.len() == 2,
            "matmul expects 2-D operands"
        );
        let (m, n, p) = (sa[0], sa[1], sb[1]);
        assert_eq!(n, sb[0], "matmul inner dimension mismatch");
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let mut out = vec![0.0; m * p];
        for i in 0..m {
            for k in 0..n {
                let aik = va[i * n + k];
                if aik == 0.0 {
                    continue;
                }
                let row = &vb[k * p..(k + 1) * p];
                let orow = &mut out[i * p..(i + 1) * p];
                for j in 0..p {
                    orow[j] += aik * row[j];
                }
            }
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(
            vec![m, p],
            out,
            Op::Matmul {
                a: a.0,
                b: b.0,
                m,
                n,
                p,
            },
            rg,
        )
    }

    /// Matrix-vector product of `w: [m, n]` and `x: [n]`.
    pub fn matvec(&mut self, w: Tensor, x: Tensor) -> Tensor {
        let (sw, sx) = (&self.nodes[w.0].shape, &self.nodes[x.0].shape);
        assert!(sw.len() == 2 && sx.len() == 1, "matvec expects [m,n] x [n]");
        let (m, n) = (sw[0], sw[1]);
        assert_eq!(n, sx[0], "matvec dimension mismatch");
        let (vw, vx) = (&self.nodes[w.0].value, &self.nodes[x.0].value);
        let mut out = vec![0.0; m];
        for i in 0..m {
            let row = &vw[i * n..(i + 1) * n];
            let mut acc = 0.0;
            for j in 0..n {
                acc += row[j] * vx[j];
            }
            out[i] = acc;
        }
        let rg = self.rg(w) || self.rg(x);
        self.push(
            vec![m],
            out,
            Op::Matvec {
                w: w.0,
                x: x.0,
                m,
                n,
            },
            rg,
        )
    }

    /// Concatenate 1-D tensors.
    pub fn concat(&mut self, parts: &[Tensor]) -> Tensor {
        assert!(!parts.is_empty(), "concat: empty input");
        let mut value = Vec::new();
        let mut rg = false;
        for t in parts {
            assert_eq!(self.nodes[t.0].shape.len(), 1, "concat expects vectors");
            value.extend_from_slice(&self.nodes[t.0].value);
            rg |= self.rg(*t);
        }
        let n = value.len();
        self.push(
            vec![n],
            value,
            Op::Concat(parts.iter().map(|t| t.0).collect()),
            rg,
        )
    }

    /// View `src[start .. start+len]` of a 1-D tensor.
    pub fn narrow(&mut self, src: Tensor, start: usize, len: usize) -> Tensor {
        assert_eq!(self.nodes[src.0].shape.len(), 1, "narrow expects a vector");
        let value = self.nodes[src.0].value[start..start + len].to_vec();
        let rg = self.rg(src);
        self.push(
            vec![len],
            value,
            Op::Narrow {
                src: src.0,
                start,
                len,
            },
            rg,
        )
    }

    /// Valid (no padding) 3x3 convolution.
    /// `input: [c_in, h, w]`, `weight: [c_out, c_in, 3, 3]`, `bias: [c_out]`
    /// -> `[c_out, h-2, w-2]`.
    pub fn conv2d(&mut self, input: Tensor, weight: Tensor, bias: Tensor) -> Tensor {
        let si = self.nodes[input.0].shape.clone();
        let sw = self.nodes[weight.0].shape.clone();
        assert_eq!(si.len(), 3, "conv2d input must be [c, h, w]");
        assert_eq!(sw.len(), 4, "conv2d weight must be [c_out, c_in, kh, kw]");
        assert_eq!(sw[2], CONV_K);
        assert_eq!(sw[3], CONV_K);
        let (c_in, h, w) = (si[0], si[1], si[2]);
        let c_out = sw[0];
        assert_eq!(sw[1], c_in, "conv2d channel mismatch");
        assert_eq!(self.nodes[bias.0].shape, vec![c_out], "conv2d bias shape");
        assert!(
            h >= CONV_K && w >= CONV_K,
            "conv2d input smaller than kernel"
        );
        let (oh, ow) = (h - CONV_K + 1, w - CONV_K + 1);

        let vi = &self.nodes[input.0].value;
        let vw = &self.nodes[weight.0].value;
        let vb = &self.nodes[bias.0].value;
        let mut out = vec![0.0; c_out * oh * ow];
        for o in 0..c_out {
            let obase = o * oh * ow;
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = vb[o];
                    for c in 0..c_in {
                        let wbase = ((o * c_in + c) * CONV_K) * CONV_K;
                        let ibase = c * h * w;
                        for u in 0..CONV_K {
                            let irow = ibase + (i + u) * w + j;
                            let wrow = wbase + u * CONV_K;
                            acc += vw[wrow] * vi[irow]
                                + vw[wrow + 1] * vi[irow + 1]
                                + vw[wrow + 2] * vi[irow + 2];
                        }
                    }
                    out[obase + i * ow + j] = acc;
                }
            }
        }
        let rg = self.rg(input) || self.rg(weight) || self.rg(bias);
        self.push(
            vec![c_out, oh, ow],
            out,
            Op::Conv2d {
                input: input.0,
                weight: weight.0,
                bias: bias.0,
                c_in,
                h,
                w,
                c_out,
            },
            rg,
        )
    }

    /// 2x2 max pooling with stride 2; odd trailing row/column is dropped.
    pub fn max_pool2(&mut self, input: Tensor) -> Tensor {
        let si = self.nodes[input.0].shape.clone();
        assert_eq!(si.len(), 3, "max_pool2 input must be [c, h, w]");
        let (c, h, w) = (si[0], si[1], si[2]);
        let (oh, ow) = (h / 2, w / 2);
        let vi = &self.nodes[input.0].value;
        let mut out = vec![0.0; c * oh * ow];
        let mut argmax = vec![0usize; c * oh * ow];
        for ch in 0..c {
            let ibase = ch * h * w;
            let obase = ch * oh * ow;
            for i in 0..oh {
                for j in 0..ow {
                    let i0 = ibase + 2 * i * w + 2 * j;
                    let cands = [i0, i0 + 1, i0 + w, i0 + w + 1];
                    let mut best = cands[0];
                    for &cand in &cands[1..] {
                        if vi[cand] > vi[best] {
                            best = cand;
                        }
                    }
                    out[obase + i * ow + j] = vi[best];
                    argmax[obase + i * ow + j] = best;
                }
            }
        }
        let rg = self.rg(input);
        self.push(
            vec![c, oh, ow],
            out,
            Op::MaxPool2 {
                input: input.0,
                argmax,
            },
            rg,
        )
    }

    pub fn reshape(&mut self, a: Tensor, shape: Vec<usize>) -> Tensor {
        assert_eq!(
            shape.iter().product::<usize>(),
            self.nodes[a.0].value.len(),
            "reshape element count mismatch"
        );
        let value = self.nodes[a.0].value.clone();
        let rg = self.rg(a);
        self.push(shape, value, Op::Reshape(a.0), rg)
    }

    pub fn flatten(&mut self, a: Tensor) -> Tensor {
        let n = self.nodes[a.0].value.len();
        self.reshape(a, vec![n])
    }

    /// Numerically stable log-sum-exp over a 1-D tensor. Composite op: the
    /// max is treated as a constant shift, which leaves the gradient exact.
    pub fn logsumexp(&mut self, a: Tensor) -> Tensor {
        assert_eq!(self.nodes[a.0].shape.len(), 1);
        let m = self.nodes[a.0]
            .value
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max);
        let shifted = self.add_const(a, -m);
        let e = self.exp(shifted);
        let s = self.sum(e);
        let l = self.ln(s);
        self.add_const(l, m)
    }

    /// Reverse sweep from a scalar `loss`. Consumes the graph: a second call
    /// panics. Gradients land on every node with `requires_grad`.
    pub fn backward(&mut self, loss: Tensor) {
        assert!(!self.consumed, "backward called twice on the same graph");
        self.consumed = true;
        assert_eq!(
            self.nodes[loss.0].value.len(),
            1,
            "backward requires a scalar loss"
        );
        for node in &mut self.nodes {
            if node.requires_grad {
                node.grad = vec![0.0; node.value.len()];
            }
        }
        if !self.nodes[loss.0].requires_grad {
            return; // constant loss: nothing depends on parameters
        }
        self.nodes[loss.0].grad[0] = 1.0;

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad || self.nodes[idx].grad.is_empty() {
                continue;
            }
            // Take the node's grad out to satisfy the borrow checker while
            // we write into parents.
            let grad = std::mem::take(&mut self.nodes[idx].grad);
            match &self.nodes[idx].op {
                Op::Leaf => {}
                &Op::Add(a, b) => {
                    self.accumulate(a, &grad, |g, _| g);
                    self.accumulate(b, &grad, |g, _| g);
                }
                &Op::Sub(a, b) => {
                    self.accumulate(a, &grad, |g, _| g);
                    self.accumulate(b, &grad, |g, _| -g);
                }
                &Op::Mul(a, b) => {
                    let vb = self.nodes[b].value.clone();
                    let va = self.nodes[a].value.clone();
                    self.accumulate_with(a, &grad, &vb, |g, o| g * o);
                    self.accumulate_with(b, &grad, &va, |g, o| g * o);
                }
                &Op::Div(a, b) => {
                    let va = self.nodes[a].value.clone();
                    let vb = self.nodes[b].value.clone();
                    if self.nodes[a].requires_grad {
                        let ga = &mut self.nodes[a].grad;
                        for i in 0..grad.len() {
                            ga[i] += grad[i] / vb[i];
                        }
                    }
                    if self.nodes[b].requires_grad {
                        let gb = &mut self.nodes[b].grad;
                        for i in 0..grad.len() {
                            gb[i] -= grad[i] * va[i] / (vb[i] * vb[i]);
                        }
                    }
                }
                &Op::Neg(a) => self.accumulate(a, &grad, |g, _| -g),
                &Op::Scale(a, c) => self.accumulate(a, &grad, move |g, _| c * g),
                &Op::AddConst(a) => self.accumulate(a, &grad, |g, _| g),
                &Op::Tanh(a) => {
                    let y = self.nodes[idx].value.clone();
                    self.accumulate_with(a, &grad, &y, |g, y| g * (1.0 - y * y));
                }
                &Op::Sigmoid(a) => {
                    let y = self.nodes[idx].value.clone();
                    self.accumulate_with(a, &grad, &y, |g, y| g * y * (1.0 - y));
                }
                &Op::Softplus(a) => {
                    let x = self.nodes[a].value.clone();
                    self.accumulate_with(a, &grad, &x, |g, x| g / (1.0 + (-x).exp()));
                }
                &Op::Relu(a) => {
                    let x = self.nodes[a].value.clone();
                    self.accumulate_with(a, &grad, &x, |g, x| if x > 0.0 { g } else { 0.0 });
                }
                &Op::Exp(a) => {
                    let y = self.nodes[idx].value.clone();
                    self.accumulate_with(a, &grad, &y, |g, y| g * y);
                }
                &Op::Ln(a) => {
                    let x = self.nodes[a].value.clone();
                    self.accumulate_with(a, &grad, &x, |g, x| g / x);
                }
                &Op::Square(a) => {
                    let x = self.nodes[a].value.clone();
                    self.accumulate_with(a, &grad, &x, |g, x| 2.0 * g * x);
                }
                &Op::Sum(a) => {
                    if self.nodes[a].requires_grad {
                        let g = grad[0];
                        for v in self.nodes[a].grad.iter_mut() {
                            *v += g;
                        }
                    }
                }
                &Op::Matmul { a, b, m, n, p } => {
                    if self.nodes[a].requires_grad {
                        let vb = self.nodes[b].value.clone();
                        let ga = &mut self.nodes[a].grad;
                        for i in 0..m {
                            for k in 0..n {
                                let mut acc = 0.0;
                                for j in 0..p {
                                    acc += grad[i * p + j] * vb[k * p + j];
                                }
                                ga[i * n + k] += acc;
                            }
                        }
                    }
                    if self.nodes[b].requires_grad {
                        let va = self.nodes[a].value.clone();
                        let gb = &mut self.nodes[b].grad;
                        for k in 0..n {
                            for j in 0..p {
                                let mut acc = 0.0;
                                for i in 0..m {
                                    acc += va[i * n + k] * grad[i * p + j];
                                }
                                gb[k * p + j] += acc;
                            }
                        }
                    }
                }
                &Op::Matvec { w, x, m, n } => {
                    if self.nodes[w].requires_grad {
                        let vx = self.nodes[x].value.clone();
                        let gw = &mut self.nodes[w].grad;
                        for i in 0..m {
                            let gi = grad[i];
                            if gi == 0.0 {
                                continue;
                            }
                            let row = &mut gw[i * n..(i + 1) * n];
                            for j in 0..n {
                                row[j] += gi * vx[j];
                            }
                        }
                    }
                    if self.nodes[x].requires_grad {
                        let vw = self.nodes[w].value.clone();
                        let gx = &mut self.nodes[x].grad;
                        for i in 0..m {
                            let gi = grad[i];
                            if gi == 0.0 {
                                continue;
                            }
                            let row = &vw[i * n..(i + 1) * n];
                            for j in 0..n {
                                gx[j] += gi * row[j];
                            }
                        }
                    }
                }
                Op::Concat(parts) => {
                    let parts = parts.clone();
                    let mut off = 0;
                    for pid in parts {
                        let len = self.nodes[pid].value.len();
                        if self.nodes[pid].requires_grad {
                            let gp = &mut self.nodes[pid].grad;
                            for i in 0..len {
                                gp[i] += grad[off + i];
                            }
                        }
                        off += len;
                    }
                }
                &Op::Narrow { src, start, len } => {
                    if self.nodes[src].requires_grad {
                        let gs = &mut self.nodes[src].grad;
                        for i in 0..len {
                            gs[start + i] += grad[i];
                        }
                    }
                }
                &Op::Conv2d {
                    input,
                    weight,
                    bias,
                    c_in,
                    h,
                    w,
                    c_out,
                } => {
                    let (oh, ow) = (h - CONV_K + 1, w - CONV_K + 1);
                    if self.nodes[bias].requires_grad {
                        let gb = &mut self.nodes[bias].grad;
                        for o in 0..c_out {
                            let mut acc = 0.0;
                            for ij in 0..oh * ow {
                                acc += grad[o * oh * ow + ij];
                            }
                            gb[o] += acc;
                        }
                    }
                    if self.nodes[weight].requires_grad {
                        let vi = self.nodes[input].value.clone();
                        let gw = &mut self.nodes[weight].grad;
                        for o in 0..c_out {
                            let obase = o * oh * ow;
                            for c in 0..c_in {
                                let ibase = c * h * w;
                                let wbase = ((o * c_in + c) * CONV_K) * CONV_K;
                                for u in 0..CONV_K {
                                    for v in 0..CONV_K {
                                        let mut acc = 0.0;
                                        for i in 0..oh {
                                            let grow = obase + i * ow;
                                            let irow = ibase + (i + u) * w + v;
                                            for j in 0..ow {
                                                acc += grad[grow + j] * vi[irow + j];
                                            }
                                        }
                                        gw[wbase + u * CONV_K + v] += acc;
                                    }
                                }
                            }
                        }
                    }
                    if self.nodes[input].requires_grad {
                        let vw = self.nodes[weight].value.clone();
                        let gi = &mut self.nodes[input].grad;
                        for o in 0..c_out {
                            let obase = o * oh * ow;
                            for c in 0..c_in {
                                let ibase = c * h * w;
                                let wbase = ((o * c_in + c) * CONV_K) * CONV_K;
                                for i in 0..oh {
                                    for j in 0..ow {
                                        let g = grad[obase + i * ow + j];
                                        if g == 0.0 {
                                            continue;
                                        }
                                        for u in 0..CONV_K {
                                            let irow = ibase + (i + u) * w + j;
                                            let wrow = wbase + u * CONV_K;
                                            gi[irow] += g * vw[wrow];
                                            gi[irow + 1] += g * vw[wrow + 1];
                                            gi[irow + 2] += g * vw[wrow + 2];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                Op::MaxPool2 { input, argmax } => {
                    let input = *input;
                    if self.nodes[input].requires_grad {
                        let argmax = argmax.clone();
                        let gi = &mut self.nodes[input].grad;
                        for (o, &src) in argmax.iter().enumerate() {
                            gi[src] += grad[o];
                        }
                    }
                }
                &Op::Reshape(a) => {
                    if self.nodes[a].requires_grad {
                        let ga = &mut self.nodes[a].grad;
                        for i in 0..grad.len() {
                            ga[i] += grad[i];
                        }
                    }
                }
            }
            self.nodes[idx].grad = grad;
        }
    }

    fn accumulate(&mut self, parent: usize, grad: &[f64], f: impl Fn(f64, f64) -> f64) {
        if self.nodes[parent].requires_grad {
            let gp = &mut self.nodes[parent].grad;
            for i in 0..grad.len() {
                gp[i] += f(grad[i], 0.0);
            }
        }
    }

    fn accumulate_with(
        &mut self,
        parent: usize,
        grad: &[f64],
        other: &[f64],
        f: impl Fn(f64, f64) -> f64,
    ) {
        if self.nodes[parent].requires_grad {
            let gp = &mut self.nodes[parent].grad;
            for i in 0..grad.len() {
                gp[i] += f(grad[i], other[i]);
            }
        }
    }
}

/// Central finite difference of `f` w.r.t. element `j` of `params[pi]`.
pub fn central_difference<F>(
    params: &mut [TensorData],
    mut f: F,
    pi: usize,
    j: usize,
    h: f64,
) -> f64
where
    F: FnMut(&[TensorData]) -> f64,
{
    let orig = params[pi].data[j];
    params[pi].data[j] = orig + h;
    let fp = f(params);
    params[pi].data[j] = orig - h;
    let fm = f(params);
    params[pi].data[j] = orig;
    (fp - fm) / (2.0 * h)
}

/// True when an analytic gradient agrees with a finite-difference estimate:
/// small absolute error, or small relative error.
pub fn grads_agree(analytic: f64, numeric: f64, rel_tol: f64) -> bool {
    let diff = (analytic - numeric).abs();
    if diff < 1e-7 {
        return true;
    }
    diff / analytic.abs().max(numeric.abs()) < rel_tol
}

#[cfg(test)]
mod tests {
    use super::*;

    const REL_TOL: f64 = 1e-4;
    const H: f64 = 1e-5;

    // Randomized finite-difference check of a scalar-valued graph builder.
    fn check_gradients<F>(params: Vec<TensorData>, build: F, trials: u64)
    where
        F: Fn(&mut Graph, &[Tensor]) -> Tensor + Copy,
    {
        for trial in 0..trials {
            let mut rng = RngStream::new(1000 + trial, 0);
            let mut p: Vec<TensorData> = params
                .iter()
                .map(|t| TensorData::randn(t.shape.clone(), 0.7, &mut rng))
                .collect();
            let loss_of = |ps: &[TensorData]| {
                let mut g = Graph::new();
                let leaves: Vec<Tensor> = ps.iter().map(|t| g.leaf(t, false)).collect();
                let loss = build(&mut g, &leaves);
                g.scalar_value(loss)
            };
            // Analytic pass.
            let mut g = Graph::new();
            let leaves: Vec<Tensor> = p.iter().map(|t| g.leaf(t, true)).collect();
            let loss = build(&mut g, &leaves);
            g.backward(loss);
            let analytic: Vec<Vec<f64>> = leaves.iter().map(|t| g.grad(*t).to_vec()).collect();
            for pi in 0..p.len() {
                for j in 0..p[pi].data.len() {
                    let fd = central_difference(&mut p, loss_of, pi, j, H);
                    assert!(
                        grads_agree(analytic[pi][j], fd, REL_TOL),
                        "param {pi}[{j}]: analytic {} vs fd {} (trial {trial})",
                        analytic[pi][j],
                        fd
                    );
                }
            }
        }
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut g = Graph::new();
        let x = TensorData::from_vec(vec![1.0, -2.0, 3.0]);
        let t = g.leaf(&x, true);
        let sq = g.square(t);
        let loss = g.sum(sq);
        g.backward(loss);
        assert_eq!(g.grad(t), &[2.0, -4.0, 6.0]);
    }

    #[test]
    fn constant_graph_has_no_gradients() {
        let mut g = Graph::new();
        let c = g.constant_vec(&[1.0, 2.0]);
        let s = g.sum(c);
        g.backward(s);
        assert!(g.grad(c).is_empty());
        assert!(g.grad(s).is_empty());
    }

    #[test]
    #[should_panic(expected = "scalar loss")]
    fn backward_non_scalar_panics() {
        let mut g = Graph::new();
        let x = g.constant_vec(&[1.0, 2.0]);
        g.backward(x);
    }

    #[test]
    #[should_panic(expected = "backward called twice")]
    fn backward_twice_panics() {
        let mut g = Graph::new();
        let x = TensorData::from_vec(vec![1.0]);
        let t = g.leaf(&x, true);
        let s = g.sum(t);
        g.backward(s);
        g.backward(s);
    }

    #[test]
    fn elementwise_identities() {
        let mut g = Graph::new();
        let a = g.constant_vec(&[1.0, 2.0]);
        let b = g.constant_vec(&[3.0, 5.0]);
        let s = g.add(a, b);
        assert_eq!(g.value(s), &[4.0, 7.0]);
        let d = g.sub(s, a);
        assert_eq!(g.value(d), &[3.0, 5.0]);
        let m = g.mul(a, b);
        assert_eq!(g.value(m), &[3.0, 10.0]);
        let q = g.div(m, b);
        assert_eq!(g.value(q), &[1.0, 2.0]);
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::new();
        let eye = g.constant(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let a = g.constant(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let p = g.matmul(eye, a);
        assert_eq!(g.value(p), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn elementwise_gradients_random() {
        check_gradients(
            vec![TensorData::zeros(vec![4]), TensorData::zeros(vec![4])],
            |g, t| {
                let m = g.mul(t[0], t[1]);
                let s = g.sub(m, t[1]);
                let a = g.add(s, t[0]);
                let sq = g.square(a);
                g.sum(sq)
            },
            25,
        );
    }

    #[test]
    fn div_gradients_random() {
        check_gradients(
            vec![TensorData::zeros(vec![3]), TensorData::zeros(vec![3])],
            |g, t| {
                // keep denominators away from zero
                let sp = g.softplus(t[1]);
                let den = g.add_const(sp, 0.5);
                let q = g.div(t[0], den);
                let sq = g.square(q);
                g.sum(sq)
            },
            25,
        );
    }

    #[test]
    fn activation_gradients_random() {
        check_gradients(
            vec![TensorData::zeros(vec![5])],
            |g, t| {
                let a = g.tanh(t[0]);
                let b = g.sigmoid(a);
                let c = g.softplus(b);
                let d = g.exp(c);
                let e = g.add_const(d, 1.0);
                let f = g.ln(e);
                g.sum(f)
            },
            25,
        );
    }

    #[test]
    fn relu_gradient_away_from_kink() {
        // Inputs bounded away from zero so the subgradient is unambiguous.
        let mut p = vec![TensorData::from_vec(vec![1.5, -2.0, 0.7, -0.4])];
        let loss_of = |ps: &[TensorData]| {
            let mut g = Graph::new();
            let t = g.leaf(&ps[0], false);
            let r = g.relu(t);
            let sq = g.square(r);
            let s = g.sum(sq);
            g.scalar_value(s)
        };
        let mut g = Graph::new();
        let t = g.leaf(&p[0], true);
        let r = g.relu(t);
        let sq = g.square(r);
        let loss = g.sum(sq);
        g.backward(loss);
        for j in 0..4 {
            let fd = central_difference(&mut p, loss_of, 0, j, H);
            assert!(grads_agree(g.grad(t)[j], fd, REL_TOL));
        }
    }

    #[test]
    fn matmul_matvec_gradients_random() {
        check_gradients(
            vec![
                TensorData::zeros(vec![3, 4]),
                TensorData::zeros(vec![4, 2]),
                TensorData::zeros(vec![4]),
            ],
            |g, t| {
                let mm = g.matmul(t[0], t[1]);
                let mv = g.matvec(t[0], t[2]);
                let s1 = g.sum(mm);
                let sq = g.square(mv);
                let s2 = g.sum(sq);
                g.add(s1, s2)
            },
            25,
        );
    }

    #[test]
    fn concat_narrow_gradients_random() {
        check_gradients(
            vec![TensorData::zeros(vec![3]), TensorData::zeros(vec![2])],
            |g, t| {
                let c = g.concat(&[t[0], t[1]]);
                let head = g.narrow(c, 1, 3);
                let sq = g.square(head);
                g.sum(sq)
            },
            25,
        );
    }

    #[test]
    fn conv_pool_gradients_random() {
        check_gradients(
            vec![
                TensorData::zeros(vec![2, 8, 8]),
                TensorData::zeros(vec![3, 2, 3, 3]),
                TensorData::zeros(vec![3]),
            ],
            |g, t| {
                let c = g.conv2d(t[0], t[1], t[2]);
                let a = g.tanh(c);
                let p = g.max_pool2(a);
                let f = g.flatten(p);
                let sq = g.square(f);
                g.sum(sq)
            },
            10,
        );
    }

    #[test]
    fn conv_shape_chain_21_to_3() {
        // 21 -(conv)-> 19 -(pool)-> 9 -(conv)-> 7 -(pool)-> 3
        let mut rng = RngStream::new(7, 0);
        let mut g = Graph::new();
        let input = TensorData::randn(vec![1, 21, 21], 1.0, &mut rng);
        let w1 = TensorData::randn(vec![32, 1, 3, 3], 0.1, &mut rng);
        let b1 = TensorData::zeros(vec![32]);
        let w2 = TensorData::randn(vec![64, 32, 3, 3], 0.1, &mut rng);
        let b2 = TensorData::zeros(vec![64]);
        let t = g.leaf(&input, false);
        let (lw1, lb1) = (g.leaf(&w1, false), g.leaf(&b1, false));
        let c1 = g.conv2d(t, lw1, lb1);
        assert_eq!(g.shape(c1), &[32, 19, 19]);
        let p1 = g.max_pool2(c1);
        assert_eq!(g.shape(p1), &[32, 9, 9]);
        let (lw2, lb2) = (g.leaf(&w2, false), g.leaf(&b2, false));
        let c2 = g.conv2d(p1, lw2, lb2);
        assert_eq!(g.shape(c2), &[64, 7, 7]);
        let p2 = g.max_pool2(c2);
        assert_eq!(g.shape(p2), &[64, 3, 3]);
        let f = g.flatten(p2);
        assert_eq!(g.shape(f), &[576]);
    }

    #[test]
    fn logsumexp_gradient_random() {
        check_gradients(
            vec![TensorData::zeros(vec![6])],
            |g, t| {
                let l = g.logsumexp(t[0]);
                g.square(l)
            },
            25,
        );
    }

    #[test]
    fn reshape_roundtrip_preserves_grad() {
        check_gradients(
            vec![TensorData::zeros(vec![2, 3])],
            |g, t| {
                let f = g.flatten(t[0]);
                let r = g.reshape(f, vec![3, 2]);
                let sq = g.square(r);
                g.sum(sq)
            },
            10,
        );
    }
}

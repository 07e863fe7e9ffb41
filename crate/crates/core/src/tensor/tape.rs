use super::kernels::{self, ConvGeom};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Relu(Var),
    Reshape(Var),
    Transpose(Var),
    SoftmaxCols(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        cols: Vec<T>,
        geom: ConvGeom,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    GlobalAvgPool(Var),
    Dense {
        x: Var,
        w: Var,
        b: Var,
    },
    ScaleByParam {
        x: Var,
        s: Var,
    },
    ScaleConst(Var, T),
    Sum(Var),
    Select(Var, usize),
    Concat(Vec<Var>),
    CrossEntropy {
        logits: Var,
        label: usize,
        probs: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Reverse-mode recording of tensor operations.
///
/// Nodes are appended in evaluation order, so the node index is already a
/// topological order and backward simply walks the list in reverse. A tape
/// is single-writer; build one per forward pass.
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar with respect to every node that required one.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant input; no gradient is tracked for it.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable input.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite {
                context: format!("output of {name}"),
            });
        }
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
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

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::matmul(self.value(a), self.value(b))?;
        self.push("matmul", out, Op::MatMul(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p + q).collect();
        let out = Tensor::from_parts_unchecked(x.shape().to_vec(), data);
        self.push("add", out, Op::Add(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p * q).collect();
        let out = Tensor::from_parts_unchecked(x.shape().to_vec(), data);
        self.push("mul", out, Op::Mul(a, b), &[a, b])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = kernels::relu(self.value(x));
        self.push("relu", out, Op::Relu(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        self.push("reshape", out, Op::Reshape(x), &[x])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).transpose()?;
        self.push("transpose", out, Op::Transpose(x), &[x])
    }

    pub fn softmax_cols(&mut self, x: Var) -> Result<Var> {
        let out = kernels::softmax_cols(self.value(x))?;
        self.push("softmax_cols", out, Op::SoftmaxCols(x), &[x])
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (out, cols, geom) =
            kernels::conv2d_with_cols(self.value(x), self.value(w), self.value(b), stride, pad)?;
        let cols = if self.requires_grad(w) { cols } else { Vec::new() };
        self.push("conv2d", out, Op::Conv2d { x, w, b, cols, geom }, &[x, w, b])
    }

    pub fn maxpool2d(&mut self, x: Var, window: usize, stride: usize) -> Result<Var> {
        let (out, argmax) = kernels::maxpool2d_with_argmax(self.value(x), window, stride)?;
        self.push("maxpool2d", out, Op::MaxPool { x, argmax }, &[x])
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let out = kernels::global_avg_pool(self.value(x))?;
        self.push("global_avg_pool", out, Op::GlobalAvgPool(x), &[x])
    }

    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let out = kernels::dense(self.value(x), self.value(w), self.value(b))?;
        self.push("dense", out, Op::Dense { x, w, b }, &[x, w, b])
    }

    /// Multiplies `x` by the single value held in `s` (a learnable scalar).
    pub fn scale_by_scalar_param(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(Error::dim(
                "scale_by_scalar_param",
                format!("scale must hold one value, got {:?}", self.shape(s)),
            ));
        }
        let k = self.value(s).item();
        let out = self.value(x).map(|v| k * v);
        self.push("scale_by_scalar_param", out, Op::ScaleByParam { x, s }, &[x, s])
    }

    pub fn scale(&mut self, x: Var, k: T) -> Result<Var> {
        let out = self.value(x).map(|v| k * v);
        self.push("scale", out, Op::ScaleConst(x, k), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(x).sum());
        self.push("sum", out, Op::Sum(x), &[x])
    }

    /// Picks one element (flat index) as a one-element tensor.
    pub fn select(&mut self, x: Var, index: usize) -> Result<Var> {
        let t = self.value(x);
        if index >= t.numel() {
            return Err(Error::dim(
                "select",
                format!("index {index} out of range for {:?}", t.shape()),
            ));
        }
        let out = Tensor::scalar(t.data()[index]);
        self.push("select", out, Op::Select(x, index), &[x])
    }

    /// Concatenation along the leading axis; trailing dims must agree.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| Error::dim("concat", "no inputs"))?;
        let tail = self.shape(*first)[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &x in xs {
            let t = self.value(x);
            if t.shape()[1..] != tail[..] {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: self.shape(*first).to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
            lead += t.shape()[0];
            data.extend_from_slice(t.data());
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        let out = Tensor::from_parts_unchecked(shape, data);
        self.push("concat", out, Op::Concat(xs.to_vec()), xs)
    }

    /// `-log softmax(logits)[label]` as a one-element tensor.
    pub fn softmax_cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let z = self.value(logits);
        if z.rank() != 1 || z.numel() < 2 {
            return Err(Error::dim(
                "softmax_cross_entropy",
                format!("expected a logit vector, got {:?}", z.shape()),
            ));
        }
        if label >= z.numel() {
            return Err(Error::InvalidArgument(format!(
                "label {label} outside 0..{}",
                z.numel()
            )));
        }
        let max = z.data().iter().copied().fold(T::neg_infinity(), T::max);
        let lse = z.data().iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
        let loss = lse - z.data()[label];
        let probs = kernels::softmax(z.data());
        self.push(
            "softmax_cross_entropy",
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                label,
                probs,
            },
            &[logits],
        )
    }

    /// Softmax of a logit vector followed by picking `class`.
    pub fn class_probability(&mut self, logits: Var, class: usize) -> Result<Var> {
        let n = self.value(logits).numel();
        let col = self.reshape(logits, [n, 1])?;
        let p = self.softmax_cols(col)?;
        self.select(p, class)
    }

    /// Reverse sweep from a one-element output.
    pub fn backward(&self, output: Var) -> Result<Gradients<T>> {
        if self.value(output).numel() != 1 {
            return Err(Error::dim(
                "backward",
                format!("output must be scalar, got {:?}", self.shape(output)),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let seed_shape = self.shape(output).to_vec();
        grads[output.0] = Some(Tensor::full(seed_shape, T::one()));

        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        for (g, node) in grads.iter().zip(&self.nodes) {
            if let Some(g) = g {
                if !g.is_finite() && node.requires_grad {
                    return Err(Error::NonFinite {
                        context: "gradient".into(),
                    });
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let like = |v: Var, data: Vec<T>| Tensor::from_parts_unchecked(val(v).shape().to_vec(), data);
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (m, k) = (val(a).shape()[0], val(a).shape()[1]);
                let n = val(b).shape()[1];
                if self.wants(a) {
                    let da = kernels::gemm(m, n, k, g.data(), false, val(b).data(), true);
                    accumulate(grads, a, like(a, da));
                }
                if self.wants(b) {
                    let db = kernels::gemm(k, m, n, val(a).data(), true, g.data(), false);
                    accumulate(grads, b, like(b, db));
                }
            }
            &Op::Add(a, b) => {
                for v in [a, b] {
                    if self.wants(v) {
                        accumulate(grads, v, g.clone());
                    }
                }
            }
            &Op::Mul(a, b) => {
                for (v, other) in [(a, b), (b, a)] {
                    if self.wants(v) {
                        let d = g
                            .data()
                            .iter()
                            .zip(val(other).data())
                            .map(|(&p, &q)| p * q)
                            .collect();
                        accumulate(grads, v, like(v, d));
                    }
                }
            }
            &Op::Relu(x) => {
                let d = g
                    .data()
                    .iter()
                    .zip(node.value.data())
                    .map(|(&gv, &y)| if y > T::zero() { gv } else { T::zero() })
                    .collect();
                accumulate(grads, x, like(x, d));
            }
            &Op::Reshape(x) => accumulate(grads, x, like(x, g.data().to_vec())),
            &Op::Transpose(x) => accumulate(grads, x, g.transpose().expect("rank 2")),
            &Op::SoftmaxCols(x) => {
                let (m, n) = (node.value.shape()[0], node.value.shape()[1]);
                let d = kernels::softmax_cols_backward(node.value.data(), g.data(), m, n);
                accumulate(grads, x, like(x, d));
            }
            Op::Conv2d {
                x,
                w,
                b,
                cols,
                geom,
            } => {
                let p = geom.out_positions();
                if self.wants(*w) {
                    let dw = kernels::gemm(geom.c_out, p, geom.patch_len(), g.data(), false, cols, true);
                    accumulate(grads, *w, like(*w, dw));
                }
                if self.wants(*b) {
                    let db = g.data().chunks_exact(p).map(|r| r.iter().copied().sum()).collect();
                    accumulate(grads, *b, like(*b, db));
                }
                if self.wants(*x) {
                    let dcols = kernels::gemm(
                        geom.patch_len(),
                        geom.c_out,
                        p,
                        val(*w).data(),
                        true,
                        g.data(),
                        false,
                    );
                    accumulate(grads, *x, like(*x, kernels::col2im(&dcols, geom)));
                }
            }
            Op::MaxPool { x, argmax } => {
                let mut d = vec![T::zero(); val(*x).numel()];
                for (&src, &gv) in argmax.iter().zip(g.data()) {
                    d[src] += gv;
                }
                accumulate(grads, *x, like(*x, d));
            }
            &Op::GlobalAvgPool(x) => {
                let (_, h, w) = val(x).dims3("gap").expect("rank 3");
                let inv = T::one() / T::of((h * w) as f64);
                let d = g
                    .data()
                    .iter()
                    .flat_map(|&gv| std::iter::repeat_n(gv * inv, h * w))
                    .collect();
                accumulate(grads, x, like(x, d));
            }
            &Op::Dense { x, w, b } => {
                let (out, inp) = (val(w).shape()[0], val(w).shape()[1]);
                if self.wants(w) {
                    let dw = kernels::gemm(out, 1, inp, g.data(), false, val(x).data(), false);
                    accumulate(grads, w, like(w, dw));
                }
                if self.wants(b) {
                    accumulate(grads, b, like(b, g.data().to_vec()));
                }
                if self.wants(x) {
                    let dx = kernels::gemm(inp, out, 1, val(w).data(), true, g.data(), false);
                    accumulate(grads, x, like(x, dx));
                }
            }
            &Op::ScaleByParam { x, s } => {
                let k = val(s).item();
                if self.wants(x) {
                    accumulate(grads, x, g.map(|v| v * k));
                }
                if self.wants(s) {
                    let ds = g
                        .data()
                        .iter()
                        .zip(val(x).data())
                        .map(|(&p, &q)| p * q)
                        .sum::<T>();
                    accumulate(grads, s, like(s, vec![ds]));
                }
            }
            &Op::ScaleConst(x, k) => accumulate(grads, x, g.map(|v| v * k)),
            &Op::Sum(x) => {
                let gv = g.item();
                accumulate(grads, x, like(x, vec![gv; val(x).numel()]));
            }
            &Op::Select(x, idx) => {
                let mut d = vec![T::zero(); val(x).numel()];
                d[idx] = g.item();
                accumulate(grads, x, like(x, d));
            }
            Op::Concat(xs) => {
                let mut offset = 0;
                for &x in xs {
                    let n = val(x).numel();
                    if self.wants(x) {
                        accumulate(grads, x, like(x, g.data()[offset..offset + n].to_vec()));
                    }
                    offset += n;
                }
            }
            Op::CrossEntropy {
                logits,
                label,
                probs,
            } => {
                let gv = g.item();
                let d = probs
                    .iter()
                    .enumerate()
                    .map(|(i, &p)| {
                        let onehot = if i == *label { T::one() } else { T::zero() };
                        gv * (p - onehot)
                    })
                    .collect();
                accumulate(grads, *logits, like(*logits, d));
            }
        }
    }
}

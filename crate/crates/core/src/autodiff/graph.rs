//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] is rebuilt for every forward pass. Each op computes its value
//! eagerly, appends a node that remembers its inputs, and `backward` replays
//! the tape in reverse. Node values are never mutated after creation.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::kernels::{self, ConvGeom};
use super::params::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Padding {
    Valid,
    Same,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Max(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    Exp(Var),
    Log(Var),
    Relu(Var),
    Elu(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    MatMul(Var, Var),
    Reshape(Var),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Slice {
        input: Var,
        axis: usize,
        start: usize,
    },
    Sum {
        input: Var,
        axis: usize,
    },
    Mean {
        input: Var,
        axis: usize,
    },
    SumAll(Var),
    Softmax(Var),
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        weights: Vec<f64>,
        probs: Vec<f64>,
    },
    Conv2d {
        x: Var,
        kernel: Var,
        bias: Option<Var>,
        geom: ConvGeom,
        cout: usize,
        cols: Vec<f64>,
    },
    Depthwise {
        x: Var,
        kernel: Var,
        geom: ConvGeom,
        mult: usize,
    },
    AvgPool {
        x: Var,
        window: (usize, usize),
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    CausalConv1d {
        x: Var,
        kernel: Var,
        bias: Var,
        dilation: usize,
    },
    Fnb {
        v: Var,
        log_a: Var,
        centroids: Tensor,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Batch statistics produced by a train-mode batch normalization.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// The differentiation tape for a single forward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: IndexMap<String, Var>,
}

/// Result of [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    by_node: Vec<Option<Tensor>>,
    by_param: IndexMap<String, Tensor>,
}

impl Gradients {
    /// Gradient of the loss with respect to an arbitrary node.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.by_node.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.by_param.get(name)
    }

    pub fn params(&self) -> &IndexMap<String, Tensor> {
        &self.by_param
    }

    pub fn into_params(self) -> IndexMap<String, Tensor> {
        self.by_param
    }
}

fn same_padding(k: usize) -> usize {
    (k - 1) / 2
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

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        debug_assert!(
            value.is_finite() || !self.all_finite_inputs(&op),
            "non-finite output from {op:?}"
        );
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn all_finite_inputs(&self, op: &Op) -> bool {
        self.inputs_of(op)
            .iter()
            .all(|v| self.nodes[v.0].value.is_finite())
    }

    fn inputs_of(&self, op: &Op) -> Vec<Var> {
        match op {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) | Op::Max(a, b) => {
                vec![*a, *b]
            }
            Op::MatMul(a, b) => vec![*a, *b],
            Op::Neg(a)
            | Op::Scale(a, _)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Relu(a)
            | Op::Elu(a, _)
            | Op::Sigmoid(a)
            | Op::Tanh(a)
            | Op::Reshape(a)
            | Op::SumAll(a)
            | Op::Softmax(a) => vec![*a],
            Op::Concat { inputs, .. } => inputs.clone(),
            Op::Slice { input, .. } | Op::Sum { input, .. } | Op::Mean { input, .. } => {
                vec![*input]
            }
            Op::SoftmaxCrossEntropy { logits, .. } => vec![*logits],
            Op::Conv2d {
                x, kernel, bias, ..
            } => {
                let mut v = vec![*x, *kernel];
                v.extend(bias);
                v
            }
            Op::Depthwise { x, kernel, .. } => vec![*x, *kernel],
            Op::AvgPool { x, .. } | Op::Dropout { x, .. } => vec![*x],
            Op::BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::CausalConv1d {
                x, kernel, bias, ..
            } => vec![*x, *kernel, *bias],
            Op::Fnb { v, log_a, .. } => vec![*v, *log_a],
        }
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// A constant input: no gradient flows into it.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A free variable that receives a gradient.
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Bind a stored parameter into this pass. Binding the same name twice
    /// returns the same node so gradients accumulate.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let p = store.get(name)?;
        let v = self.push(p.tensor.clone(), Op::Leaf, p.trainable);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    /// Stop-gradient: same value, no gradient flows back through it.
    pub fn detach(&mut self, a: Var) -> Var {
        let t = self.value(a).clone();
        self.constant(t)
    }

    // ---- elementwise ---------------------------------------------------

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() == tb.shape() {
            return Ok(ta.zip_map(tb, f));
        }
        let shape = kernels::broadcast_shape(ta.shape(), tb.shape()).ok_or_else(|| {
            Error::shape(
                name,
                format!("cannot broadcast {:?} with {:?}", ta.shape(), tb.shape()),
            )
        })?;
        let ma = kernels::broadcast_map(&shape, ta.shape());
        let mb = kernels::broadcast_map(&shape, tb.shape());
        let (da, db) = (ta.data(), tb.data());
        let data = ma.iter().zip(&mb).map(|(&i, &j)| f(da[i], db[j])).collect();
        Tensor::new(shape, data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("add", a, b, |x, y| x + y)?;
        let g = self.any_grad(&[a, b]);
        Ok(self.push(t, Op::Add(a, b), g))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("sub", a, b, |x, y| x - y)?;
        let g = self.any_grad(&[a, b]);
        Ok(self.push(t, Op::Sub(a, b), g))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("mul", a, b, |x, y| x * y)?;
        let g = self.any_grad(&[a, b]);
        Ok(self.push(t, Op::Mul(a, b), g))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("div", a, b, |x, y| x / y)?;
        let g = self.any_grad(&[a, b]);
        Ok(self.push(t, Op::Div(a, b), g))
    }

    /// Elementwise maximum; ties send the gradient to `a`.
    pub fn max(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("max", a, b, f64::max)?;
        let g = self.any_grad(&[a, b]);
        Ok(self.push(t, Op::Max(a, b), g))
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let t = self.value(a).map(f);
        let g = self.nodes[a.0].needs_grad;
        self.push(t, op, g)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(a, Op::Neg(a), |x| -x)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::Scale(a, c), move |x| c * x)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Op::Log(a), f64::ln)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn elu(&mut self, a: Var, alpha: f64) -> Var {
        self.unary(a, Op::Elu(a, alpha), move |x| elu(x, alpha))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    // ---- structural ----------------------------------------------------

    /// `(m, k) · (k, n) -> (m, n)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(Error::shape(
                "matmul",
                format!("{:?} · {:?}", ta.shape(), tb.shape()),
            ));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = vec![0.0; m * n];
        kernels::gemm(
            m,
            k,
            n,
            1.0,
            ta.data(),
            (k, 1),
            tb.data(),
            (n, 1),
            0.0,
            &mut out,
        );
        let t = Tensor::new([m, n], out)?;
        let g = self.any_grad(&[a, b]);
        Ok(self.push(t, Op::MatMul(a, b), g))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self
            .value(a)
            .reshaped(shape.to_vec())
            .map_err(|_| Error::shape("reshape", format!("{:?} -> {:?}", self.shape(a), shape)))?;
        let g = self.nodes[a.0].needs_grad;
        Ok(self.push(t, Op::Reshape(a), g))
    }

    /// Collapse everything after the leading (batch) axis.
    pub fn flatten(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        let b = s[0];
        let rest: usize = s[1..].iter().product();
        self.reshape(a, &[b, rest])
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        if inputs.is_empty() {
            return Err(Error::shape("concat", "no inputs"));
        }
        let first = self.shape(inputs[0]).to_vec();
        if axis >= first.len() {
            return Err(Error::shape(
                "concat",
                format!("axis {axis} out of range for {first:?}"),
            ));
        }
        let mut out_shape = first.clone();
        out_shape[axis] = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                let shapes: Vec<_> = inputs.iter().map(|&v| self.shape(v).to_vec()).collect();
                return Err(Error::shape(
                    "concat",
                    format!("incompatible shapes {shapes:?} on axis {axis}"),
                ));
            }
            out_shape[axis] += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(out_shape.iter().product());
        for o in 0..outer {
            for &v in inputs {
                let t = self.value(v);
                let chunk = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let t = Tensor::new(out_shape, data)?;
        let g = self.any_grad(inputs);
        Ok(self.push(
            t,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            g,
        ))
    }

    /// `len` entries along `axis` starting at `start`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(Error::shape(
                "slice",
                format!("[{start}, {}) on axis {axis} of {s:?}", start + len),
            ));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * s[axis] + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let t = Tensor::new(shape, data)?;
        let g = self.nodes[a.0].needs_grad;
        Ok(self.push(
            t,
            Op::Slice {
                input: a,
                axis,
                start,
            },
            g,
        ))
    }

    fn reduce_axis(
        &self,
        a: Var,
        axis: usize,
        op: &'static str,
    ) -> Result<(Vec<usize>, Vec<f64>, usize)> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() {
            return Err(Error::shape(
                op,
                format!("axis {axis} out of range for {s:?}"),
            ));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let n = s[axis];
        let src = self.value(a).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..n {
                let row = &src[(o * n + k) * inner..][..inner];
                for (acc, x) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc += x;
                }
            }
        }
        let mut shape = s;
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        Ok((shape, out, n))
    }

    pub fn sum(&mut self, a: Var, axis: usize) -> Result<Var> {
        let (shape, data, _) = self.reduce_axis(a, axis, "sum")?;
        let t = Tensor::new(shape, data)?;
        let g = self.nodes[a.0].needs_grad;
        Ok(self.push(t, Op::Sum { input: a, axis }, g))
    }

    pub fn mean(&mut self, a: Var, axis: usize) -> Result<Var> {
        let (shape, mut data, n) = self.reduce_axis(a, axis, "mean")?;
        data.iter_mut().for_each(|x| *x /= n as f64);
        let t = Tensor::new(shape, data)?;
        let g = self.nodes[a.0].needs_grad;
        Ok(self.push(t, Op::Mean { input: a, axis }, g))
    }

    /// Sum of every element, as a scalar.
    pub fn sum_all(&mut self, a: Var) -> Var {
        let t = Tensor::scalar(self.value(a).sum());
        let g = self.nodes[a.0].needs_grad;
        self.push(t, Op::SumAll(a), g)
    }

    // ---- classification ------------------------------------------------

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let k = *t
            .shape()
            .last()
            .ok_or_else(|| Error::shape("softmax", "rank-0 input"))?;
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(k) {
            softmax_in_place(row);
        }
        let t = Tensor::new(t.shape().to_vec(), data)?;
        let g = self.nodes[a.0].needs_grad;
        Ok(self.push(t, Op::Softmax(a), g))
    }

    /// Class-weighted mean cross-entropy of `softmax(logits)` against labels,
    /// normalized by the total weight of the batch.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: Var,
        labels: &[usize],
        weights: &[f64],
    ) -> Result<Var> {
        let t = self.value(logits);
        if t.rank() != 2 || t.shape()[0] != labels.len() || t.shape()[1] != weights.len() {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!(
                    "logits {:?}, {} labels, {} class weights",
                    t.shape(),
                    labels.len(),
                    weights.len()
                ),
            ));
        }
        let k = t.shape()[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::invalid(format!(
                "label {bad} out of range for {k} classes"
            )));
        }
        let mut probs = t.data().to_vec();
        let mut loss = 0.0;
        let mut wsum = 0.0;
        for (row, &y) in probs.chunks_mut(k).zip(labels) {
            let lse = log_sum_exp(row);
            loss -= weights[y] * (row[y] - lse);
            wsum += weights[y];
            for p in row.iter_mut() {
                *p = (*p - lse).exp();
            }
        }
        let out = Tensor::scalar(loss / wsum);
        let g = self.nodes[logits.0].needs_grad;
        Ok(self.push(
            out,
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                weights: weights.to_vec(),
                probs,
            },
            g,
        ))
    }

    // ---- convolutional -------------------------------------------------

    fn image_dims(&self, x: Var, op: &'static str) -> Result<(usize, usize, usize, usize)> {
        match *self.shape(x) {
            [b, h, w, c] => Ok((b, h, w, c)),
            ref s => Err(Error::shape(
                op,
                format!("expected (batch, H, W, M) input, got {s:?}"),
            )),
        }
    }

    fn geometry(
        op: &'static str,
        (batch, h, w, cin): (usize, usize, usize, usize),
        (kh, kw): (usize, usize),
        padding: Padding,
    ) -> Result<ConvGeom> {
        let (pad_top, pad_left, ho, wo) = match padding {
            Padding::Valid => {
                if kh > h || kw > w {
                    return Err(Error::shape(
                        op,
                        format!("kernel ({kh},{kw}) larger than input ({h},{w})"),
                    ));
                }
                (0, 0, h - kh + 1, w - kw + 1)
            }
            Padding::Same => (same_padding(kh), same_padding(kw), h, w),
        };
        Ok(ConvGeom {
            batch,
            h,
            w,
            cin,
            kh,
            kw,
            pad_top,
            pad_left,
            ho,
            wo,
        })
    }

    /// Cross-correlation with kernel `(kh, kw, cin, cout)` and optional bias `(cout)`.
    pub fn conv2d(
        &mut self,
        x: Var,
        kernel: Var,
        bias: Option<Var>,
        padding: Padding,
    ) -> Result<Var> {
        let dims = self.image_dims(x, "conv2d")?;
        let ks = self.shape(kernel).to_vec();
        if ks.len() != 4 || ks[2] != dims.3 {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {ks:?} incompatible with input {:?}", self.shape(x)),
            ));
        }
        let cout = ks[3];
        if let Some(b) = bias {
            if self.shape(b) != [cout] {
                return Err(Error::shape(
                    "conv2d",
                    format!("bias {:?} for {cout} filters", self.shape(b)),
                ));
            }
        }
        let geom = Self::geometry("conv2d", dims, (ks[0], ks[1]), padding)?;
        let (out, cols) = kernels::conv2d_forward(
            self.value(x).data(),
            self.value(kernel).data(),
            bias.map(|b| self.value(b).data()),
            &geom,
            cout,
        );
        let t = Tensor::new([geom.batch, geom.ho, geom.wo, cout], out)?;
        let mut ins = vec![x, kernel];
        ins.extend(bias);
        let g = self.any_grad(&ins);
        let cols = if g { cols } else { Vec::new() };
        Ok(self.push(
            t,
            Op::Conv2d {
                x,
                kernel,
                bias,
                geom,
                cout,
                cols,
            },
            g,
        ))
    }

    /// Per-channel convolution with kernel `(kh, kw, cin, multiplier)`.
    pub fn depthwise_conv2d(&mut self, x: Var, kernel: Var, padding: Padding) -> Result<Var> {
        let dims = self.image_dims(x, "depthwise_conv2d")?;
        let ks = self.shape(kernel).to_vec();
        if ks.len() != 4 || ks[2] != dims.3 || ks[3] == 0 {
            return Err(Error::shape(
                "depthwise_conv2d",
                format!("kernel {ks:?} incompatible with input {:?}", self.shape(x)),
            ));
        }
        let mult = ks[3];
        let geom = Self::geometry("depthwise_conv2d", dims, (ks[0], ks[1]), padding)?;
        let out = kernels::depthwise_forward(
            self.value(x).data(),
            self.value(kernel).data(),
            &geom,
            mult,
        );
        let t = Tensor::new([geom.batch, geom.ho, geom.wo, dims.3 * mult], out)?;
        let g = self.any_grad(&[x, kernel]);
        Ok(self.push(
            t,
            Op::Depthwise {
                x,
                kernel,
                geom,
                mult,
            },
            g,
        ))
    }

    /// Mean over non-overlapping `(ph, pw)` windows; trailing remainders dropped.
    pub fn avg_pool2d(&mut self, x: Var, window: (usize, usize)) -> Result<Var> {
        let dims = self.image_dims(x, "avg_pool2d")?;
        let (ph, pw) = window;
        if ph == 0 || pw == 0 || ph > dims.1 || pw > dims.2 {
            return Err(Error::shape(
                "avg_pool2d",
                format!("window {window:?} on input {:?}", self.shape(x)),
            ));
        }
        let out = kernels::avg_pool_forward(self.value(x).data(), dims, window);
        let t = Tensor::new([dims.0, dims.1 / ph, dims.2 / pw, dims.3], out)?;
        let g = self.nodes[x.0].needs_grad;
        Ok(self.push(t, Op::AvgPool { x, window }, g))
    }

    /// Normalize over every axis but the last.
    ///
    /// With `running = None` the batch statistics are used (train mode) and
    /// returned; otherwise the supplied `(mean, var)` are treated as constants.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
        running: Option<(&[f64], &[f64])>,
    ) -> Result<(Var, Option<BatchStats>)> {
        let s = self.shape(x).to_vec();
        let c = *s
            .last()
            .ok_or_else(|| Error::shape("batch_norm", "rank-0 input"))?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape(
                "batch_norm",
                format!(
                    "gamma {:?}, beta {:?} for {c} maps",
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        let xs = self.value(x).data();
        let n = xs.len() / c;
        let (mean, var, train) = match running {
            Some((m, v)) => (m.to_vec(), v.to_vec(), false),
            None => {
                if n < 2 {
                    return Err(Error::invalid(
                        "batch_norm in train mode needs at least 2 values per map",
                    ));
                }
                let mut mean = vec![0.0; c];
                for row in xs.chunks(c) {
                    for (m, v) in mean.iter_mut().zip(row) {
                        *m += v;
                    }
                }
                mean.iter_mut().for_each(|m| *m /= n as f64);
                let mut var = vec![0.0; c];
                for row in xs.chunks(c) {
                    for k in 0..c {
                        let d = row[k] - mean[k];
                        var[k] += d * d;
                    }
                }
                var.iter_mut().for_each(|v| *v /= n as f64);
                (mean, var, true)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (gm, bt) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = xs.to_vec();
        let mut out = vec![0.0; xs.len()];
        for (xrow, orow) in xhat.chunks_exact_mut(c).zip(out.chunks_exact_mut(c)) {
            for k in 0..c {
                xrow[k] = (xrow[k] - mean[k]) * inv_std[k];
                orow[k] = gm[k] * xrow[k] + bt[k];
            }
        }
        let t = Tensor::new(s, out)?;
        let g = self.any_grad(&[x, gamma, beta]);
        let v = self.push(
            t,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
            g,
        );
        Ok((v, train.then_some(BatchStats { mean, var })))
    }

    /// Multiply by a fixed mask (already scaled for inverted dropout).
    pub fn dropout_mask(&mut self, x: Var, mask: Vec<f64>) -> Result<Var> {
        if mask.len() != self.value(x).len() {
            return Err(Error::shape(
                "dropout",
                format!("mask of {} for {:?}", mask.len(), self.shape(x)),
            ));
        }
        let t = self.value(x);
        let data = t.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let t = Tensor::new(t.shape().to_vec(), data)?;
        let g = self.nodes[x.0].needs_grad;
        Ok(self.push(t, Op::Dropout { x, mask }, g))
    }

    /// Dilated causal convolution over `(batch, time, cin)` with kernel `(k, cin, cout)`.
    pub fn causal_conv1d(
        &mut self,
        x: Var,
        kernel: Var,
        bias: Var,
        dilation: usize,
    ) -> Result<Var> {
        let (b, t, cin) = match *self.shape(x) {
            [b, t, c] => (b, t, c),
            ref s => {
                return Err(Error::shape(
                    "causal_conv1d",
                    format!("expected (batch, time, channels), got {s:?}"),
                ))
            }
        };
        let ks = self.shape(kernel).to_vec();
        if ks.len() != 3 || ks[1] != cin || self.shape(bias) != [ks[2]] || dilation == 0 {
            return Err(Error::shape(
                "causal_conv1d",
                format!(
                    "kernel {ks:?}, bias {:?}, dilation {dilation} for input {:?}",
                    self.shape(bias),
                    self.shape(x)
                ),
            ));
        }
        let out = kernels::causal_conv1d_forward(
            self.value(x).data(),
            self.value(kernel).data(),
            self.value(bias).data(),
            (b, t, cin),
            ks[0],
            ks[2],
            dilation,
        );
        let out = Tensor::new([b, t, ks[2]], out)?;
        let g = self.any_grad(&[x, kernel, bias]);
        Ok(self.push(
            out,
            Op::CausalConv1d {
                x,
                kernel,
                bias,
                dilation,
            },
            g,
        ))
    }

    /// Normalized Gaussian rule activations, computed as a softmax over the
    /// log-domain firing strengths `s_k = -¼ Σ_j (v_j - c_kj)² / a_j²`.
    ///
    /// `v` is `(batch, d)`, `log_a` is `(d)`, `centroids` is `(K, d)`.
    /// Centroids are constants and receive no gradient.
    pub fn fuzzy_rules(&mut self, v: Var, log_a: Var, centroids: &Tensor) -> Result<Var> {
        let (b, d) = match *self.shape(v) {
            [b, d] => (b, d),
            ref s => {
                return Err(Error::shape(
                    "fnb",
                    format!("expected (batch, d) input, got {s:?}"),
                ))
            }
        };
        if self.shape(log_a) != [d] || centroids.rank() != 2 || centroids.shape()[1] != d {
            return Err(Error::shape(
                "fnb",
                format!(
                    "d = {d}, log a {:?}, centroids {:?}",
                    self.shape(log_a),
                    centroids.shape()
                ),
            ));
        }
        let k = centroids.shape()[0];
        let inv_a2: Vec<f64> = self
            .value(log_a)
            .data()
            .iter()
            .map(|la| (-2.0 * la).exp())
            .collect();
        let vs = self.value(v).data();
        let cs = centroids.data();
        let mut out = vec![0.0; b * k];
        for i in 0..b {
            let vi = &vs[i * d..(i + 1) * d];
            let row = &mut out[i * k..(i + 1) * k];
            for (r, s) in row.iter_mut().enumerate() {
                let c = &cs[r * d..(r + 1) * d];
                *s = -0.25
                    * vi.iter()
                        .zip(c)
                        .zip(&inv_a2)
                        .map(|((x, m), w)| (x - m) * (x - m) * w)
                        .sum::<f64>();
            }
            softmax_in_place(row);
        }
        let t = Tensor::new([b, k], out)?;
        let g = self.any_grad(&[v, log_a]);
        Ok(self.push(
            t,
            Op::Fnb {
                v,
                log_a,
                centroids: centroids.clone(),
            },
            g,
        ))
    }

    // ---- backward ------------------------------------------------------

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::new(self.shape(loss).to_vec(), vec![1.0])?);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        let by_param = self
            .params
            .iter()
            .filter(|(_, v)| self.nodes[v.0].needs_grad)
            .map(|(name, v)| {
                let g = grads[v.0]
                    .clone()
                    .unwrap_or_else(|| Tensor::zeros(self.shape(*v).to_vec()));
                (name.clone(), g)
            })
            .collect();
        Ok(Gradients {
            by_node: grads,
            by_param,
        })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, data: Vec<f64>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => {
                for (a, b) in g.data_mut().iter_mut().zip(&data) {
                    *a += b;
                }
            }
            slot @ None => {
                *slot = Some(Tensor::new(self.shape(v).to_vec(), data).expect("gradient shape"));
            }
        }
    }

    /// Elementwise gradient for a broadcasting binary op, reduced to each input's shape.
    fn binary_grads(
        &self,
        out_shape: &[usize],
        g: &[f64],
        a: Var,
        b: Var,
        da: impl Fn(f64, f64) -> f64,
        db: impl Fn(f64, f64) -> f64,
        grads: &mut [Option<Tensor>],
    ) {
        let (ta, tb) = (self.value(a), self.value(b));
        let (ma, mb);
        let (ia, ib): (&dyn Fn(usize) -> usize, &dyn Fn(usize) -> usize) =
            if ta.shape() == out_shape && tb.shape() == out_shape {
                (&|i| i, &|i| i)
            } else {
                ma = kernels::broadcast_map(out_shape, ta.shape());
                mb = kernels::broadcast_map(out_shape, tb.shape());
                (&|i| ma[i], &|i| mb[i])
            };
        let (xa, xb) = (ta.data(), tb.data());
        if self.nodes[a.0].needs_grad {
            let full: Vec<f64> = g
                .iter()
                .enumerate()
                .map(|(i, gv)| gv * da(xa[ia(i)], xb[ib(i)]))
                .collect();
            let red = kernels::reduce_to(&full, out_shape, ta.shape());
            self.accumulate(grads, a, red);
        }
        if self.nodes[b.0].needs_grad {
            let full: Vec<f64> = g
                .iter()
                .enumerate()
                .map(|(i, gv)| gv * db(xa[ia(i)], xb[ib(i)]))
                .collect();
            let red = kernels::reduce_to(&full, out_shape, tb.shape());
            self.accumulate(grads, b, red);
        }
    }

    fn propagate(&self, node: &Node, grad: &Tensor, grads: &mut [Option<Tensor>]) {
        let g = grad.data();
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.binary_grads(out.shape(), g, *a, *b, |_, _| 1.0, |_, _| 1.0, grads)
            }
            Op::Sub(a, b) => {
                self.binary_grads(out.shape(), g, *a, *b, |_, _| 1.0, |_, _| -1.0, grads)
            }
            Op::Mul(a, b) => self.binary_grads(out.shape(), g, *a, *b, |_, y| y, |x, _| x, grads),
            Op::Div(a, b) => self.binary_grads(
                out.shape(),
                g,
                *a,
                *b,
                |_, y| 1.0 / y,
                |x, y| -x / (y * y),
                grads,
            ),
            Op::Max(a, b) => self.binary_grads(
                out.shape(),
                g,
                *a,
                *b,
                |x, y| if x >= y { 1.0 } else { 0.0 },
                |x, y| if x >= y { 0.0 } else { 1.0 },
                grads,
            ),
            Op::Neg(a) => self.accumulate(grads, *a, g.iter().map(|x| -x).collect()),
            Op::Scale(a, c) => self.accumulate(grads, *a, g.iter().map(|x| c * x).collect()),
            Op::Exp(a) => self.accumulate(
                grads,
                *a,
                g.iter().zip(out.data()).map(|(gv, y)| gv * y).collect(),
            ),
            Op::Log(a) => {
                let x = self.value(*a).data();
                self.accumulate(grads, *a, g.iter().zip(x).map(|(gv, x)| gv / x).collect())
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                self.accumulate(
                    grads,
                    *a,
                    g.iter()
                        .zip(x)
                        .map(|(gv, &x)| if x > 0.0 { *gv } else { 0.0 })
                        .collect(),
                )
            }
            Op::Elu(a, alpha) => {
                let x = self.value(*a).data();
                let d = g
                    .iter()
                    .zip(x)
                    .zip(out.data())
                    .map(|((gv, &x), y)| if x >= 0.0 { *gv } else { gv * (y + alpha) })
                    .collect();
                self.accumulate(grads, *a, d)
            }
            Op::Sigmoid(a) => self.accumulate(
                grads,
                *a,
                g.iter()
                    .zip(out.data())
                    .map(|(gv, y)| gv * y * (1.0 - y))
                    .collect(),
            ),
            Op::Tanh(a) => self.accumulate(
                grads,
                *a,
                g.iter()
                    .zip(out.data())
                    .map(|(gv, y)| gv * (1.0 - y * y))
                    .collect(),
            ),
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if self.nodes[a.0].needs_grad {
                    let mut da = vec![0.0; m * k];
                    kernels::gemm(m, n, k, 1.0, g, (n, 1), tb.data(), (1, n), 0.0, &mut da);
                    self.accumulate(grads, *a, da);
                }
                if self.nodes[b.0].needs_grad {
                    let mut db = vec![0.0; k * n];
                    kernels::gemm(k, m, n, 1.0, ta.data(), (1, k), g, (n, 1), 0.0, &mut db);
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Reshape(a) => self.accumulate(grads, *a, g.to_vec()),
            Op::Concat { inputs, axis } => {
                let shape = out.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis] * inner;
                let mut offset = 0;
                for &v in inputs {
                    let chunk = self.shape(v)[*axis] * inner;
                    if self.nodes[v.0].needs_grad {
                        let mut d = Vec::with_capacity(outer * chunk);
                        for o in 0..outer {
                            d.extend_from_slice(&g[o * total + offset..o * total + offset + chunk]);
                        }
                        self.accumulate(grads, v, d);
                    }
                    offset += chunk;
                }
            }
            Op::Slice { input, axis, start } => {
                let s = self.shape(*input);
                let outer: usize = s[..*axis].iter().product();
                let inner: usize = s[axis + 1..].iter().product();
                let len = out.shape()[*axis];
                let mut d = vec![0.0; self.value(*input).len()];
                for o in 0..outer {
                    let dst = (o * s[*axis] + start) * inner;
                    d[dst..dst + len * inner]
                        .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                self.accumulate(grads, *input, d);
            }
            Op::Sum { input, axis } | Op::Mean { input, axis } => {
                let s = self.shape(*input);
                let outer: usize = s[..*axis].iter().product();
                let inner: usize = s[axis + 1..].iter().product();
                let n = s[*axis];
                let scale = if matches!(node.op, Op::Mean { .. }) {
                    1.0 / n as f64
                } else {
                    1.0
                };
                let mut d = vec![0.0; outer * n * inner];
                for o in 0..outer {
                    for k in 0..n {
                        for j in 0..inner {
                            d[(o * n + k) * inner + j] = g[o * inner + j] * scale;
                        }
                    }
                }
                self.accumulate(grads, *input, d);
            }
            Op::SumAll(a) => self.accumulate(grads, *a, vec![g[0]; self.value(*a).len()]),
            Op::Softmax(a) => {
                let k = *out.shape().last().unwrap();
                let mut d = vec![0.0; g.len()];
                for ((dr, gr), pr) in d.chunks_mut(k).zip(g.chunks(k)).zip(out.data().chunks(k)) {
                    let dot: f64 = gr.iter().zip(pr).map(|(a, b)| a * b).sum();
                    for ((dv, gv), p) in dr.iter_mut().zip(gr).zip(pr) {
                        *dv = p * (gv - dot);
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                weights,
                probs,
            } => {
                let k = weights.len();
                let wsum: f64 = labels.iter().map(|&y| weights[y]).sum();
                let scale = g[0] / wsum;
                let mut d = probs.clone();
                for (row, &y) in d.chunks_mut(k).zip(labels) {
                    row[y] -= 1.0;
                    row.iter_mut().for_each(|v| *v *= weights[y] * scale);
                }
                self.accumulate(grads, *logits, d);
            }
            Op::Conv2d {
                x,
                kernel,
                bias,
                geom,
                cout,
                cols,
            } => {
                let need_dx = self.nodes[x.0].needs_grad;
                let (dx, dk, db) = kernels::conv2d_backward(
                    g,
                    cols,
                    self.value(*kernel).data(),
                    geom,
                    *cout,
                    need_dx,
                );
                if let Some(dx) = dx {
                    self.accumulate(grads, *x, dx);
                }
                self.accumulate(grads, *kernel, dk);
                if let Some(b) = bias {
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Depthwise {
                x,
                kernel,
                geom,
                mult,
            } => {
                let (dx, dk) = kernels::depthwise_backward(
                    g,
                    self.value(*x).data(),
                    self.value(*kernel).data(),
                    geom,
                    *mult,
                );
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *kernel, dk);
            }
            Op::AvgPool { x, window } => {
                let s = self.shape(*x);
                let d = kernels::avg_pool_backward(g, (s[0], s[1], s[2], s[3]), *window);
                self.accumulate(grads, *x, d);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let c = inv_std.len();
                let n = (xhat.len() / c) as f64;
                let gm = self.value(*gamma).data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for (grow, xrow) in g.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                    for k in 0..c {
                        dgamma[k] += grow[k] * xrow[k];
                        dbeta[k] += grow[k];
                    }
                }
                if self.nodes[x.0].needs_grad {
                    let scale: Vec<f64> = (0..c).map(|k| gm[k] * inv_std[k]).collect();
                    let mut dx = vec![0.0; g.len()];
                    for ((drow, grow), xrow) in dx
                        .chunks_exact_mut(c)
                        .zip(g.chunks_exact(c))
                        .zip(xhat.chunks_exact(c))
                    {
                        for k in 0..c {
                            drow[k] = if *train {
                                // dx = γ·σ⁻¹/N · (N·dy − Σdy − x̂·Σ(dy·x̂))
                                scale[k] / n * (n * grow[k] - dbeta[k] - xrow[k] * dgamma[k])
                            } else {
                                grow[k] * scale[k]
                            };
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
                self.accumulate(grads, *gamma, dgamma);
                self.accumulate(grads, *beta, dbeta);
            }
            Op::Dropout { x, mask } => {
                self.accumulate(grads, *x, g.iter().zip(mask).map(|(a, m)| a * m).collect())
            }
            Op::CausalConv1d {
                x,
                kernel,
                bias: b,
                dilation,
            } => {
                let s = self.shape(*x);
                let ks = self.shape(*kernel);
                let (dx, dk, db) = kernels::causal_conv1d_backward(
                    g,
                    self.value(*x).data(),
                    self.value(*kernel).data(),
                    (s[0], s[1], s[2]),
                    ks[0],
                    ks[2],
                    *dilation,
                );
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *kernel, dk);
                self.accumulate(grads, *b, db);
            }
            Op::Fnb {
                v,
                log_a,
                centroids,
            } => {
                let (b, d) = (self.shape(*v)[0], self.shape(*v)[1]);
                let k = centroids.shape()[0];
                let inv_a2: Vec<f64> = self
                    .value(*log_a)
                    .data()
                    .iter()
                    .map(|la| (-2.0 * la).exp())
                    .collect();
                let vs = self.value(*v).data();
                let cs = centroids.data();
                let mut dv = vec![0.0; b * d];
                let mut dla = vec![0.0; d];
                for i in 0..b {
                    let o = &out.data()[i * k..(i + 1) * k];
                    let gi = &g[i * k..(i + 1) * k];
                    let dot: f64 = o.iter().zip(gi).map(|(a, b)| a * b).sum();
                    for r in 0..k {
                        // ∂L/∂s_r through the softmax
                        let ds = o[r] * (gi[r] - dot);
                        if ds == 0.0 {
                            continue;
                        }
                        for j in 0..d {
                            let diff = vs[i * d + j] - cs[r * d + j];
                            dv[i * d + j] += ds * (-0.5 * diff * inv_a2[j]);
                            dla[j] += ds * (0.5 * diff * diff * inv_a2[j]);
                        }
                    }
                }
                self.accumulate(grads, *v, dv);
                self.accumulate(grads, *log_a, dla);
            }
        }
    }
}

pub fn elu(x: f64, alpha: f64) -> f64 {
    if x >= 0.0 {
        x
    } else {
        alpha * x.exp_m1()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for x in row.iter_mut() {
        *x = (*x - m).exp();
        z += *x;
    }
    for x in row.iter_mut() {
        *x /= z;
    }
}

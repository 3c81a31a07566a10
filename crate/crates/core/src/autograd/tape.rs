//! Reverse-mode differentiation over a linear tape of tensor primitives.
//!
//! Every primitive appends one node holding its output value and the
//! operand handles needed by its backward rule. Operands always precede
//! their consumers, so [`Tape::backward`] is a single reverse sweep.

use crate::autograd::conv::{col2im_add, im2col, ConvGeom};
use crate::autograd::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        geom: ConvGeom,
        /// Per-sample column matrices, kept only when the kernel needs a gradient.
        cols: Vec<T>,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    Relu(Var),
    Sigmoid(Var),
    Softmax(Var),
    GlobalAvgPool(Var),
    MaxPool2 {
        input: Var,
        argmax: Vec<usize>,
    },
    Concat {
        a: Var,
        b: Var,
    },
    MulChannel {
        x: Var,
        gate: Var,
    },
    MulSpatial {
        x: Var,
        map: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    AddScaled {
        a: Var,
        b: Var,
        scale: T,
    },
    Scale {
        x: Var,
        factor: T,
    },
    Sum(Var),
    Mean(Vec<Var>),
    Reshape(Var),
    RepeatRows {
        x: Var,
        times: usize,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    WeightedCe {
        logits: Var,
        targets: Vec<T>,
        weights: Vec<T>,
        probs: Vec<T>,
    },
    Mse {
        pred: Var,
        target: Vec<T>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    grad: Option<Vec<T>>,
    requires_grad: bool,
    op: Op<T>,
}

/// Ordered record of executed primitives.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

fn grad_slot<T: Scalar>(nodes: &mut [Node<T>], v: Var) -> Option<&mut Vec<T>> {
    let node = &mut nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    let n = node.value.numel();
    Some(node.grad.get_or_insert_with(|| vec![T::zero(); n]))
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Clears all records so the tape can be reused for another pass.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.consumed = false;
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// Non-differentiable leaf (inputs, targets).
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient, or `None` when the node did not take part in
    /// differentiation. Nodes that require a gradient but were unreachable
    /// from the loss report zeros.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        let data = node
            .grad
            .clone()
            .unwrap_or_else(|| vec![T::zero(); node.value.numel()]);
        Some(Tensor::new(node.value.shape().to_vec(), data).expect("grad matches value shape"))
    }

    fn push(&mut self, value: Tensor<T>, requires_grad: bool, op: Op<T>) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn expect_rank(&self, v: Var, rank: usize, op: &str) -> Result<&[usize]> {
        let shape = self.value(v).shape();
        if shape.len() != rank {
            return Err(Error::dim(format!(
                "{op}: expected rank {rank}, got shape {shape:?}"
            )));
        }
        Ok(shape)
    }

    /// 2-D convolution over an NCHW batch with an OIKK kernel.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        if stride == 0 {
            return Err(Error::config("conv2d: stride must be at least 1"));
        }
        let xs = self.expect_rank(input, 4, "conv2d input")?.to_vec();
        let ks = self.expect_rank(kernel, 4, "conv2d kernel")?.to_vec();
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (o, ki, kh, kw) = (ks[0], ks[1], ks[2], ks[3]);
        if ki != c {
            return Err(Error::dim(format!(
                "conv2d: axis 1 (channels) of input is {c} but kernel expects {ki}"
            )));
        }
        if kh != kw {
            return Err(Error::dim(format!(
                "conv2d: axis 3 of kernel is {kw}, only square kernels ({kh}×{kh}) are supported"
            )));
        }
        if let Some(b) = bias {
            let bs = self.value(b).shape();
            if bs != [o] {
                return Err(Error::dim(format!(
                    "conv2d: axis 0 of bias is {bs:?}, expected [{o}]"
                )));
            }
        }
        if h + 2 * padding < kh {
            return Err(Error::dim(format!(
                "conv2d: axis 2 (height) {h} with padding {padding} is smaller than kernel {kh}"
            )));
        }
        if w + 2 * padding < kw {
            return Err(Error::dim(format!(
                "conv2d: axis 3 (width) {w} with padding {padding} is smaller than kernel {kw}"
            )));
        }
        let geom = ConvGeom {
            channels: c,
            height: h,
            width: w,
            kernel: kh,
            stride,
            padding,
            out_h: (h + 2 * padding - kh) / stride + 1,
            out_w: (w + 2 * padding - kw) / stride + 1,
        };
        let rows = geom.col_rows();
        let plane = geom.col_cols();
        let keep_cols = self.nodes[kernel.0].requires_grad && !geom.is_pointwise();
        let mut out = vec![T::zero(); n * o * plane];
        let mut cols = if keep_cols {
            vec![T::zero(); n * rows * plane]
        } else {
            Vec::new()
        };
        let mut scratch = if keep_cols || geom.is_pointwise() {
            Vec::new()
        } else {
            vec![T::zero(); rows * plane]
        };
        {
            let x = self.value(input).data();
            let k = self.value(kernel).data();
            let bias = bias.map(|b| self.value(b).data());
            for s in 0..n {
                let img = &x[s * c * h * w..(s + 1) * c * h * w];
                let col: &[T] = if geom.is_pointwise() {
                    img
                } else if keep_cols {
                    let dst = &mut cols[s * rows * plane..(s + 1) * rows * plane];
                    im2col(img, &geom, dst);
                    dst
                } else {
                    im2col(img, &geom, &mut scratch);
                    &scratch
                };
                let dst = &mut out[s * o * plane..(s + 1) * o * plane];
                if let Some(b) = bias {
                    for (oc, chunk) in dst.chunks_mut(plane).enumerate() {
                        chunk.fill(b[oc]);
                    }
                }
                T::gemm(
                    o,
                    rows,
                    plane,
                    T::one(),
                    k,
                    (rows, 1),
                    col,
                    (plane, 1),
                    T::one(),
                    dst,
                    (plane, 1),
                );
            }
        }
        let value = Tensor::new(vec![n, o, geom.out_h, geom.out_w], out)?;
        let mut operands = vec![input, kernel];
        operands.extend(bias);
        let rg = self.any_grad(&operands);
        Ok(self.push(
            value,
            rg,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
                cols,
            },
        ))
    }

    /// Fully connected layer `input (N×D) · weight (D×M) + bias (M)`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let xs = self.expect_rank(input, 2, "linear input")?.to_vec();
        let ws = self.expect_rank(weight, 2, "linear weight")?.to_vec();
        let (n, d, m) = (xs[0], xs[1], ws[1]);
        if ws[0] != d {
            return Err(Error::dim(format!(
                "linear: axis 1 of input is {d} but axis 0 of weight is {}",
                ws[0]
            )));
        }
        let mut out = vec![T::zero(); n * m];
        if let Some(b) = bias {
            let bv = self.value(b);
            if bv.shape() != [m] {
                return Err(Error::dim(format!(
                    "linear: axis 0 of bias is {:?}, expected [{m}]",
                    bv.shape()
                )));
            }
            for row in out.chunks_mut(m) {
                row.copy_from_slice(bv.data());
            }
        }
        T::gemm(
            n,
            d,
            m,
            T::one(),
            self.value(input).data(),
            (d, 1),
            self.value(weight).data(),
            (m, 1),
            T::one(),
            &mut out,
            (m, 1),
        );
        let mut operands = vec![input, weight];
        operands.extend(bias);
        let rg = self.any_grad(&operands);
        Ok(self.push(
            Tensor::new(vec![n, m], out)?,
            rg,
            Op::Linear {
                input,
                weight,
                bias,
            },
        ))
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let value = self.value(x).map(f);
        let rg = self.nodes[x.0].requires_grad;
        self.push(value, rg, op)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(T::zero()), Op::Relu(x))
    }

    /// Clamped to the nearest representable values inside (0, 1), so
    /// saturated inputs still give a strict gate.
    pub fn sigmoid(&mut self, x: Var) -> Var {
        let (lo, hi) = (T::min_positive_value(), T::one() - T::epsilon() / T::of(2.0));
        let f = move |v: T| {
            let y = T::one() / (T::one() + (-v).exp());
            if y.is_nan() {
                y
            } else {
                y.max(lo).min(hi)
            }
        };
        self.unary(x, f, Op::Sigmoid(x))
    }

    /// Row-wise softmax of a 2-D tensor, computed with max-subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let shape = self.expect_rank(x, 2, "softmax")?.to_vec();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(shape[1]) {
            softmax_in_place(row);
        }
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(Tensor::new(shape, out)?, rg, Op::Softmax(x)))
    }

    /// NCHW → N×C mean over the spatial axes.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.expect_rank(x, 4, "global_avg_pool")?.to_vec();
        let hw = s[2] * s[3];
        let inv = T::one() / T::of(hw as f64);
        let out: Vec<T> = self
            .value(x)
            .data()
            .chunks(hw)
            .map(|plane| plane.iter().copied().sum::<T>() * inv)
            .collect();
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(Tensor::new(vec![s[0], s[1]], out)?, rg, Op::GlobalAvgPool(x)))
    }

    /// Non-overlapping 2×2 max pooling. Ties resolve to the first element
    /// in row-major window order.
    pub fn max_pool2x2(&mut self, x: Var) -> Result<Var> {
        let s = self.expect_rank(x, 4, "max_pool2x2")?.to_vec();
        let (h, w) = (s[2], s[3]);
        if h % 2 != 0 {
            return Err(Error::dim(format!("max_pool2x2: axis 2 (height) {h} is odd")));
        }
        if w % 2 != 0 {
            return Err(Error::dim(format!("max_pool2x2: axis 3 (width) {w} is odd")));
        }
        let (oh, ow) = (h / 2, w / 2);
        let planes = s[0] * s[1];
        let mut out = Vec::with_capacity(planes * oh * ow);
        let mut argmax = Vec::with_capacity(planes * oh * ow);
        let src = self.value(x).data();
        for p in 0..planes {
            let base = p * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let top = base + 2 * oy * w + 2 * ox;
                    let mut best = top;
                    for idx in [top + 1, top + w, top + w + 1] {
                        if src[idx] > src[best] {
                            best = idx;
                        }
                    }
                    out.push(src[best]);
                    argmax.push(best);
                }
            }
        }
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(
            Tensor::new(vec![s[0], s[1], oh, ow], out)?,
            rg,
            Op::MaxPool2 { input: x, argmax },
        ))
    }

    /// Row-wise concatenation of N×Da and N×Db.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.expect_rank(a, 2, "concat lhs")?.to_vec();
        let sb = self.expect_rank(b, 2, "concat rhs")?.to_vec();
        if sa[0] != sb[0] {
            return Err(Error::dim(format!(
                "concat: axis 0 (batch) differs, {} vs {}",
                sa[0], sb[0]
            )));
        }
        let (da, db) = (sa[1], sb[1]);
        let mut out = Vec::with_capacity(sa[0] * (da + db));
        {
            let av = self.value(a).data();
            let bv = self.value(b).data();
            for r in 0..sa[0] {
                out.extend_from_slice(&av[r * da..(r + 1) * da]);
                out.extend_from_slice(&bv[r * db..(r + 1) * db]);
            }
        }
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(
            Tensor::new(vec![sa[0], da + db], out)?,
            rg,
            Op::Concat { a, b },
        ))
    }

    /// `x[n,c,:,:] * gate[n,c]` for NCHW `x` and N×C `gate`.
    pub fn mul_channel(&mut self, x: Var, gate: Var) -> Result<Var> {
        let xs = self.expect_rank(x, 4, "mul_channel input")?.to_vec();
        let gs = self.expect_rank(gate, 2, "mul_channel gate")?.to_vec();
        if gs != [xs[0], xs[1]] {
            return Err(Error::dim(format!(
                "mul_channel: gate shape {gs:?} does not match batch×channels [{}, {}]",
                xs[0], xs[1]
            )));
        }
        let hw = xs[2] * xs[3];
        let g = self.value(gate).data();
        let out: Vec<T> = self
            .value(x)
            .data()
            .chunks(hw)
            .zip(g)
            .flat_map(|(plane, &gv)| plane.iter().map(move |&v| v * gv))
            .collect();
        let rg = self.any_grad(&[x, gate]);
        Ok(self.push(Tensor::new(xs, out)?, rg, Op::MulChannel { x, gate }))
    }

    /// `x[n,c,i,j] * map[n,0,i,j]` for NCHW `x` and N×1×H×W `map`.
    pub fn mul_spatial(&mut self, x: Var, map: Var) -> Result<Var> {
        let xs = self.expect_rank(x, 4, "mul_spatial input")?.to_vec();
        let ms = self.expect_rank(map, 4, "mul_spatial map")?.to_vec();
        if ms != [xs[0], 1, xs[2], xs[3]] {
            return Err(Error::dim(format!(
                "mul_spatial: map shape {ms:?} must be [{}, 1, {}, {}]",
                xs[0], xs[2], xs[3]
            )));
        }
        let (c, hw) = (xs[1], xs[2] * xs[3]);
        let xv = self.value(x).data();
        let mv = self.value(map).data();
        let mut out = Vec::with_capacity(xv.len());
        for (i, plane) in xv.chunks(hw).enumerate() {
            let m = &mv[(i / c) * hw..(i / c + 1) * hw];
            out.extend(plane.iter().zip(m).map(|(&a, &b)| a * b));
        }
        let rg = self.any_grad(&[x, map]);
        Ok(self.push(Tensor::new(xs, out)?, rg, Op::MulSpatial { x, map }))
    }

    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::dim(format!("{op}: shapes {sa:?} and {sb:?} differ")));
        }
        Ok(())
    }

    /// Element-wise product of equally shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(shape, out)?, rg, Op::Mul { a, b }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.add_scaled(a, b, T::one())
    }

    /// `a + scale · b`.
    pub fn add_scaled(&mut self, a: Var, b: Var, scale: T) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + scale * y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(shape, out)?, rg, Op::AddScaled { a, b, scale }))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        self.unary(x, |v| v * factor, Op::Scale { x, factor })
    }

    /// Sum of all entries as a one-element tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().copied().sum();
        let rg = self.nodes[x.0].requires_grad;
        self.push(Tensor::scalar(total), rg, Op::Sum(x))
    }

    /// Element-wise mean of equally shaped tensors. Each coordinate is
    /// summed in ascending value order, so the result is exactly invariant
    /// under permutations of `xs`.
    pub fn mean_of(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| Error::usage("mean_of: empty operand list"))?;
        for &x in &xs[1..] {
            self.same_shape(first, x, "mean_of")?;
        }
        let inv = T::one() / T::of(xs.len() as f64);
        let numel = self.value(first).numel();
        let mut column = Vec::with_capacity(xs.len());
        let acc: Vec<T> = (0..numel)
            .map(|i| {
                column.clear();
                column.extend(xs.iter().map(|&x| self.value(x).data()[i]));
                column.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
                column.iter().fold(T::zero(), |s, &v| s + v) * inv
            })
            .collect();
        let shape = self.value(first).shape().to_vec();
        let rg = self.any_grad(xs);
        Ok(self.push(Tensor::new(shape, acc)?, rg, Op::Mean(xs.to_vec())))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(value, rg, Op::Reshape(x)))
    }

    /// Collapses every axis after the first: N×… → N×D.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).shape();
        let n = s[0];
        let d = s[1..].iter().product();
        self.reshape(x, &[n, d])
    }

    /// Tiles the whole tensor `times` times along the leading axis.
    pub fn repeat_rows(&mut self, x: Var, times: usize) -> Result<Var> {
        if times == 0 {
            return Err(Error::usage("repeat_rows: times must be at least 1"));
        }
        let v = self.value(x);
        let mut shape = v.shape().to_vec();
        shape[0] *= times;
        let data = v.data().repeat(times);
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(Tensor::new(shape, data)?, rg, Op::RepeatRows { x, times }))
    }

    /// Rows `start..start + len` of the leading axis.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let v = self.value(x);
        let rows = v.dim(0);
        if len == 0 || start + len > rows {
            return Err(Error::dim(format!(
                "slice_rows: rows {start}..{} out of range for axis 0 of size {rows}",
                start + len
            )));
        }
        let stride = v.numel() / rows;
        let data = v.data()[start * stride..(start + len) * stride].to_vec();
        let mut shape = v.shape().to_vec();
        shape[0] = len;
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(Tensor::new(shape, data)?, rg, Op::SliceRows { x, start }))
    }

    /// `-(1/N) Σ_n Σ_c w_c t[n,c] log softmax(logits)[n,c]`.
    ///
    /// Target rows are class distributions (one-hot or mixed).
    pub fn weighted_cross_entropy(
        &mut self,
        logits: Var,
        targets: &Tensor<T>,
        weights: &[T],
    ) -> Result<Var> {
        let (value, probs) = cross_entropy_forward(self.value(logits), targets, weights)?;
        let rg = self.nodes[logits.0].requires_grad;
        Ok(self.push(
            Tensor::scalar(value),
            rg,
            Op::WeightedCe {
                logits,
                targets: targets.data().to_vec(),
                weights: weights.to_vec(),
                probs,
            },
        ))
    }

    /// Mean over all entries of the squared difference to a constant target.
    pub fn mse(&mut self, pred: Var, target: &Tensor<T>) -> Result<Var> {
        let value = mse_forward(self.value(pred), target)?;
        let rg = self.nodes[pred.0].requires_grad;
        Ok(self.push(
            Tensor::scalar(value),
            rg,
            Op::Mse {
                pred,
                target: target.data().to_vec(),
            },
        ))
    }

    /// Propagates `d loss / d node` to every node that requires a gradient.
    /// A tape supports one backward pass; call [`Tape::reset`] to reuse it.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::usage(
                "backward: tape already consumed by a previous backward pass",
            ));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::usage(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.consumed = true;
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &rest[0];
            let Some(g) = node.grad.as_deref() else {
                continue;
            };
            backprop(before, node, g);
        }
        Ok(())
    }
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    let inv = T::one() / total;
    row.iter_mut().for_each(|v| *v *= inv);
}

/// Returns the loss value and the row-wise softmax probabilities.
pub(crate) fn cross_entropy_forward<T: Scalar>(
    logits: &Tensor<T>,
    targets: &Tensor<T>,
    weights: &[T],
) -> Result<(T, Vec<T>)> {
    if logits.rank() != 2 {
        return Err(Error::dim(format!(
            "weighted_cross_entropy: logits must be N×C, got {:?}",
            logits.shape()
        )));
    }
    if targets.shape() != logits.shape() {
        return Err(Error::dim(format!(
            "weighted_cross_entropy: targets {:?} do not match logits {:?}",
            targets.shape(),
            logits.shape()
        )));
    }
    let (n, c) = (logits.dim(0), logits.dim(1));
    if weights.len() != c {
        return Err(Error::dim(format!(
            "weighted_cross_entropy: {} class weights for {c} classes",
            weights.len()
        )));
    }
    for (r, row) in targets.data().chunks(c).enumerate() {
        let total: f64 = row.iter().map(|v| v.as_f64()).sum();
        if (total - 1.0).abs() > 1e-4 || row.iter().any(|v| *v < T::zero()) {
            return Err(Error::usage(format!(
                "weighted_cross_entropy: target row {r} is not a distribution (sum {total})"
            )));
        }
    }
    let mut probs = logits.data().to_vec();
    let mut total = T::zero();
    for (r, row) in probs.chunks_mut(c).enumerate() {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let log_z = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
        let t = targets.row(r);
        for j in 0..c {
            let log_p = row[j] - log_z;
            if t[j] != T::zero() {
                total -= weights[j] * t[j] * log_p;
            }
            row[j] = log_p.exp();
        }
    }
    Ok((total / T::of(n as f64), probs))
}

pub(crate) fn mse_forward<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<T> {
    if pred.shape() != target.shape() {
        return Err(Error::dim(format!(
            "mse: prediction {:?} and target {:?} differ",
            pred.shape(),
            target.shape()
        )));
    }
    let total: T = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| (p - t) * (p - t))
        .sum();
    Ok(total / T::of(pred.numel() as f64))
}

fn backprop<T: Scalar>(nodes: &mut [Node<T>], node: &Node<T>, g: &[T]) {
    let out = &node.value;
    match &node.op {
        Op::Leaf => {}
        Op::Conv2d {
            input,
            kernel,
            bias,
            geom,
            cols,
        } => {
            let n = out.dim(0);
            let o = out.dim(1);
            let rows = geom.col_rows();
            let plane = geom.col_cols();
            let img = geom.channels * geom.height * geom.width;
            if let Some(b) = bias {
                if let Some(gb) = grad_slot(nodes, *b) {
                    for s in 0..n {
                        for (oc, chunk) in g[s * o * plane..(s + 1) * o * plane]
                            .chunks(plane)
                            .enumerate()
                        {
                            gb[oc] += chunk.iter().copied().sum::<T>();
                        }
                    }
                }
            }
            if nodes[kernel.0].requires_grad {
                let x = nodes[input.0].value.data().to_vec();
                let gk = grad_slot(nodes, *kernel).expect("kernel requires grad");
                for s in 0..n {
                    let col: &[T] = if geom.is_pointwise() {
                        &x[s * img..(s + 1) * img]
                    } else {
                        &cols[s * rows * plane..(s + 1) * rows * plane]
                    };
                    T::gemm(
                        o,
                        plane,
                        rows,
                        T::one(),
                        &g[s * o * plane..(s + 1) * o * plane],
                        (plane, 1),
                        col,
                        (1, plane),
                        T::one(),
                        gk,
                        (rows, 1),
                    );
                }
            }
            if nodes[input.0].requires_grad {
                let k = nodes[kernel.0].value.data().to_vec();
                let gx = grad_slot(nodes, *input).expect("input requires grad");
                let mut dcols = vec![T::zero(); rows * plane];
                for s in 0..n {
                    let dst = &mut gx[s * img..(s + 1) * img];
                    let gs = &g[s * o * plane..(s + 1) * o * plane];
                    if geom.is_pointwise() {
                        T::gemm(
                            rows,
                            o,
                            plane,
                            T::one(),
                            &k,
                            (1, rows),
                            gs,
                            (plane, 1),
                            T::one(),
                            dst,
                            (plane, 1),
                        );
                    } else {
                        T::gemm(
                            rows,
                            o,
                            plane,
                            T::one(),
                            &k,
                            (1, rows),
                            gs,
                            (plane, 1),
                            T::zero(),
                            &mut dcols,
                            (plane, 1),
                        );
                        col2im_add(&dcols, geom, dst);
                    }
                }
            }
        }
        Op::Linear {
            input,
            weight,
            bias,
        } => {
            let (n, m) = (out.dim(0), out.dim(1));
            let d = nodes[input.0].value.dim(1);
            if let Some(b) = bias {
                if let Some(gb) = grad_slot(nodes, *b) {
                    for row in g.chunks(m) {
                        add_into(gb, row);
                    }
                }
            }
            if nodes[weight.0].requires_grad {
                let x = nodes[input.0].value.data().to_vec();
                let gw = grad_slot(nodes, *weight).expect("weight requires grad");
                T::gemm(d, n, m, T::one(), &x, (1, d), g, (m, 1), T::one(), gw, (m, 1));
            }
            if nodes[input.0].requires_grad {
                let w = nodes[weight.0].value.data().to_vec();
                let gx = grad_slot(nodes, *input).expect("input requires grad");
                T::gemm(n, m, d, T::one(), g, (m, 1), &w, (1, m), T::one(), gx, (d, 1));
            }
        }
        Op::Relu(x) => {
            let xv = nodes[x.0].value.data().to_vec();
            if let Some(gx) = grad_slot(nodes, *x) {
                for ((d, &gi), &xi) in gx.iter_mut().zip(g).zip(&xv) {
                    if xi > T::zero() {
                        *d += gi;
                    }
                }
            }
        }
        Op::Sigmoid(x) => {
            if let Some(gx) = grad_slot(nodes, *x) {
                for ((d, &gi), &y) in gx.iter_mut().zip(g).zip(out.data()) {
                    *d += gi * y * (T::one() - y);
                }
            }
        }
        Op::Softmax(x) => {
            let c = out.dim(1);
            if let Some(gx) = grad_slot(nodes, *x) {
                for ((dr, gr), yr) in gx.chunks_mut(c).zip(g.chunks(c)).zip(out.data().chunks(c)) {
                    let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    for j in 0..c {
                        dr[j] += yr[j] * (gr[j] - dot);
                    }
                }
            }
        }
        Op::GlobalAvgPool(x) => {
            let s = nodes[x.0].value.shape();
            let hw = s[2] * s[3];
            let inv = T::one() / T::of(hw as f64);
            if let Some(gx) = grad_slot(nodes, *x) {
                for (plane, &gi) in gx.chunks_mut(hw).zip(g) {
                    let v = gi * inv;
                    plane.iter_mut().for_each(|d| *d += v);
                }
            }
        }
        Op::MaxPool2 { input, argmax } => {
            if let Some(gx) = grad_slot(nodes, *input) {
                for (&idx, &gi) in argmax.iter().zip(g) {
                    gx[idx] += gi;
                }
            }
        }
        Op::Concat { a, b } => {
            let da = nodes[a.0].value.dim(1);
            let db = nodes[b.0].value.dim(1);
            if let Some(ga) = grad_slot(nodes, *a) {
                for (dst, row) in ga.chunks_mut(da).zip(g.chunks(da + db)) {
                    add_into(dst, &row[..da]);
                }
            }
            if let Some(gb) = grad_slot(nodes, *b) {
                for (dst, row) in gb.chunks_mut(db).zip(g.chunks(da + db)) {
                    add_into(dst, &row[da..]);
                }
            }
        }
        Op::MulChannel { x, gate } => {
            let s = out.shape();
            let hw = s[2] * s[3];
            let xv = nodes[x.0].value.data().to_vec();
            let gv = nodes[gate.0].value.data().to_vec();
            if let Some(gg) = grad_slot(nodes, *gate) {
                for (i, d) in gg.iter_mut().enumerate() {
                    let span = i * hw..(i + 1) * hw;
                    *d += xv[span.clone()]
                        .iter()
                        .zip(&g[span])
                        .map(|(&a, &b)| a * b)
                        .sum::<T>();
                }
            }
            if let Some(gx) = grad_slot(nodes, *x) {
                for (i, (dst, gs)) in gx.chunks_mut(hw).zip(g.chunks(hw)).enumerate() {
                    for (d, &gi) in dst.iter_mut().zip(gs) {
                        *d += gi * gv[i];
                    }
                }
            }
        }
        Op::MulSpatial { x, map } => {
            let s = out.shape();
            let (c, hw) = (s[1], s[2] * s[3]);
            let xv = nodes[x.0].value.data().to_vec();
            let mv = nodes[map.0].value.data().to_vec();
            if let Some(gm) = grad_slot(nodes, *map) {
                for (i, (xs, gs)) in xv.chunks(hw).zip(g.chunks(hw)).enumerate() {
                    let dst = &mut gm[(i / c) * hw..(i / c + 1) * hw];
                    for ((d, &a), &b) in dst.iter_mut().zip(xs).zip(gs) {
                        *d += a * b;
                    }
                }
            }
            if let Some(gx) = grad_slot(nodes, *x) {
                for (i, (dst, gs)) in gx.chunks_mut(hw).zip(g.chunks(hw)).enumerate() {
                    let m = &mv[(i / c) * hw..(i / c + 1) * hw];
                    for ((d, &gi), &mi) in dst.iter_mut().zip(gs).zip(m) {
                        *d += gi * mi;
                    }
                }
            }
        }
        Op::Mul { a, b } => {
            let av = nodes[a.0].value.data().to_vec();
            let bv = nodes[b.0].value.data().to_vec();
            if let Some(ga) = grad_slot(nodes, *a) {
                for ((d, &gi), &y) in ga.iter_mut().zip(g).zip(&bv) {
                    *d += gi * y;
                }
            }
            if let Some(gb) = grad_slot(nodes, *b) {
                for ((d, &gi), &x) in gb.iter_mut().zip(g).zip(&av) {
                    *d += gi * x;
                }
            }
        }
        Op::AddScaled { a, b, scale } => {
            if let Some(ga) = grad_slot(nodes, *a) {
                add_into(ga, g);
            }
            if let Some(gb) = grad_slot(nodes, *b) {
                for (d, &gi) in gb.iter_mut().zip(g) {
                    *d += *scale * gi;
                }
            }
        }
        Op::Scale { x, factor } => {
            if let Some(gx) = grad_slot(nodes, *x) {
                for (d, &gi) in gx.iter_mut().zip(g) {
                    *d += *factor * gi;
                }
            }
        }
        Op::Sum(x) => {
            if let Some(gx) = grad_slot(nodes, *x) {
                gx.iter_mut().for_each(|d| *d += g[0]);
            }
        }
        Op::Mean(xs) => {
            let inv = T::one() / T::of(xs.len() as f64);
            for x in xs {
                if let Some(gx) = grad_slot(nodes, *x) {
                    for (d, &gi) in gx.iter_mut().zip(g) {
                        *d += gi * inv;
                    }
                }
            }
        }
        Op::Reshape(x) => {
            if let Some(gx) = grad_slot(nodes, *x) {
                add_into(gx, g);
            }
        }
        Op::RepeatRows { x, times } => {
            if let Some(gx) = grad_slot(nodes, *x) {
                let len = gx.len();
                for t in 0..*times {
                    add_into(gx, &g[t * len..(t + 1) * len]);
                }
            }
        }
        Op::SliceRows { x, start } => {
            let stride = out.numel() / out.dim(0);
            if let Some(gx) = grad_slot(nodes, *x) {
                add_into(&mut gx[start * stride..], g);
            }
        }
        Op::WeightedCe {
            logits,
            targets,
            weights,
            probs,
        } => {
            let c = weights.len();
            let n = probs.len() / c;
            let scale = g[0] / T::of(n as f64);
            if let Some(gl) = grad_slot(nodes, *logits) {
                for r in 0..n {
                    let t = &targets[r * c..(r + 1) * c];
                    let p = &probs[r * c..(r + 1) * c];
                    let mass: T = t.iter().zip(weights).map(|(&a, &b)| a * b).sum();
                    for j in 0..c {
                        gl[r * c + j] += scale * (p[j] * mass - weights[j] * t[j]);
                    }
                }
            }
        }
        Op::Mse { pred, target } => {
            let pv = nodes[pred.0].value.data().to_vec();
            let scale = T::of(2.0) * g[0] / T::of(pv.len() as f64);
            if let Some(gp) = grad_slot(nodes, *pred) {
                for ((d, &p), &t) in gp.iter_mut().zip(&pv).zip(target) {
                    *d += scale * (p - t);
                }
            }
        }
    }
}

//! Single-writer computation tape.
//!
//! A forward pass pushes nodes onto the tape in topological order; `backward`
//! walks the same list in reverse, accumulating gradients for every node that
//! (transitively) depends on a differentiable leaf. Image inputs are ordinary
//! leaves, so attacks get their input gradients through the same machinery
//! that training uses for parameters.

use super::gemm::{gemm, transpose};
use super::{conv_out_dim, pool_out_dim, Element, Padding, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

/// Loss reduction for softmax cross-entropy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    /// Mean over the batch; the paper's training loss.
    Mean,
    /// Plain sum. Makes per-example input gradients independent of the batch
    /// they were computed in, which attacks rely on for determinism.
    Sum,
}

enum Value<'a, E: Element> {
    Owned(Tensor<E>),
    Borrowed(&'a Tensor<E>),
}

enum Op<E: Element> {
    Leaf,
    Conv2d {
        input: NodeId,
        kernel: NodeId,
        bias: NodeId,
        padding: Padding,
    },
    MaxPool2 {
        input: NodeId,
        argmax: Vec<u32>,
    },
    Dense {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
    },
    Relu {
        input: NodeId,
    },
    Reshape {
        input: NodeId,
    },
    SoftmaxCrossEntropy {
        logits: NodeId,
        labels: NodeId,
        probs: Tensor<E>,
        reduction: Reduction,
    },
}

struct Node<'a, E: Element> {
    value: Value<'a, E>,
    op: Op<E>,
    requires_grad: bool,
}

impl<'a, E: Element> Node<'a, E> {
    fn tensor(&self) -> &Tensor<E> {
        match &self.value {
            Value::Owned(t) => t,
            Value::Borrowed(t) => t,
        }
    }
}

/// Gradients produced by [`Tape::backward`], indexed by node.
pub struct Gradients<E: Element> {
    grads: Vec<Option<Tensor<E>>>,
}

impl<E: Element> Gradients<E> {
    /// Gradient w.r.t. a node, if that node is differentiable and reached by
    /// the loss. Constant nodes have no entry: their gradient is identically
    /// zero.
    pub fn get(&self, id: NodeId) -> Option<&Tensor<E>> {
        self.grads[id.0].as_ref()
    }

    /// Moves a gradient out, leaving `None` behind.
    pub fn take(&mut self, id: NodeId) -> Option<Tensor<E>> {
        self.grads[id.0].take()
    }
}

/// Records one forward pass and replays it backwards.
#[derive(Default)]
pub struct Tape<'a, E: Element> {
    nodes: Vec<Node<'a, E>>,
}

impl<'a, E: Element> Tape<'a, E> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    /// Differentiable leaf borrowing its value.
    pub fn leaf(&mut self, value: &'a Tensor<E>) -> NodeId {
        self.push(Value::Borrowed(value), Op::Leaf, true)
    }

    /// Differentiable leaf owning its value.
    pub fn leaf_owned(&mut self, value: Tensor<E>) -> NodeId {
        self.push(Value::Owned(value), Op::Leaf, true)
    }

    /// Non-differentiable leaf borrowing its value.
    pub fn constant(&mut self, value: &'a Tensor<E>) -> NodeId {
        self.push(Value::Borrowed(value), Op::Leaf, false)
    }

    /// Non-differentiable leaf owning its value.
    pub fn constant_owned(&mut self, value: Tensor<E>) -> NodeId {
        self.push(Value::Owned(value), Op::Leaf, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<E> {
        self.nodes[id.0].tensor()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Value<'a, E>, op: Op<E>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn requires(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// 2-d convolution, NHWC layout, stride 1.
    ///
    /// `input` is `[N,H,W,Cin]`, `kernel` is `[kH,kW,Cin,Cout]`, `bias` is
    /// `[Cout]`. Differentiable in all three arguments.
    pub fn conv2d(
        &mut self,
        input: NodeId,
        kernel: NodeId,
        bias: NodeId,
        padding: Padding,
    ) -> Result<NodeId> {
        let (ish, ksh, bsh) = (
            self.value(input).shape().to_vec(),
            self.value(kernel).shape().to_vec(),
            self.value(bias).shape().to_vec(),
        );
        if ish.len() != 4 || ksh.len() != 4 || bsh.len() != 1 {
            return Err(Error::Shape(format!(
                "conv2d expects input [N,H,W,Cin], kernel [kH,kW,Cin,Cout], bias [Cout]; \
                 got {ish:?}, {ksh:?}, {bsh:?}"
            )));
        }
        let (n, h, w, cin) = (ish[0], ish[1], ish[2], ish[3]);
        let (kh, kw, kcin, cout) = (ksh[0], ksh[1], ksh[2], ksh[3]);
        if kcin != cin {
            return Err(Error::Shape(format!(
                "conv2d channel mismatch: input has Cin={cin}, kernel expects Cin={kcin}"
            )));
        }
        if bsh[0] != cout {
            return Err(Error::Shape(format!(
                "conv2d bias length {} does not match Cout={cout}",
                bsh[0]
            )));
        }
        let oh = conv_out_dim(h, kh, padding)?;
        let ow = conv_out_dim(w, kw, padding)?;

        let mut out = Tensor::zeros(&[n, oh, ow, cout]);
        conv2d_forward(
            self.value(input),
            self.value(kernel),
            self.value(bias),
            padding,
            &mut out,
        );
        let req = self.requires(input) || self.requires(kernel) || self.requires(bias);
        Ok(self.push(
            Value::Owned(out),
            Op::Conv2d {
                input,
                kernel,
                bias,
                padding,
            },
            req,
        ))
    }

    /// 2x2 max-pooling over NHWC input. Stride must be 1 or 2.
    pub fn maxpool2(&mut self, input: NodeId, stride: usize) -> Result<NodeId> {
        let ish = self.value(input).shape().to_vec();
        if ish.len() != 4 {
            return Err(Error::Shape(format!(
                "maxpool2 expects [N,H,W,C], got {ish:?}"
            )));
        }
        let (n, h, w, c) = (ish[0], ish[1], ish[2], ish[3]);
        let oh = pool_out_dim(h, stride)?;
        let ow = pool_out_dim(w, stride)?;

        let src = self.value(input);
        let mut out = Tensor::zeros(&[n, oh, ow, c]);
        let mut argmax = vec![0u32; out.numel()];
        {
            let x = src.data();
            let o = out.data_mut();
            for img in 0..n {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let base_out = ((img * oh + oy) * ow + ox) * c;
                        for ch in 0..c {
                            let mut best = E::from_f64(f64::NEG_INFINITY);
                            let mut best_idx = 0u32;
                            // first occurrence in row-major window scan wins
                            for dy in 0..2 {
                                for dx in 0..2 {
                                    let iy = oy * stride + dy;
                                    let ix = ox * stride + dx;
                                    let idx = ((img * h + iy) * w + ix) * c + ch;
                                    let v = x[idx];
                                    if v > best {
                                        best = v;
                                        best_idx = idx as u32;
                                    }
                                }
                            }
                            o[base_out + ch] = best;
                            argmax[base_out + ch] = best_idx;
                        }
                    }
                }
            }
        }
        let req = self.requires(input);
        Ok(self.push(Value::Owned(out), Op::MaxPool2 { input, argmax }, req))
    }

    /// Affine map `input * weight + bias` with `input` `[N,D]`, `weight`
    /// `[D,U]`, `bias` `[U]`.
    pub fn dense(&mut self, input: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId> {
        let (ish, wsh, bsh) = (
            self.value(input).shape().to_vec(),
            self.value(weight).shape().to_vec(),
            self.value(bias).shape().to_vec(),
        );
        if ish.len() != 2 || wsh.len() != 2 || bsh.len() != 1 {
            return Err(Error::Shape(format!(
                "dense expects input [N,D], weight [D,U], bias [U]; got {ish:?}, {wsh:?}, {bsh:?}"
            )));
        }
        let (n, d) = (ish[0], ish[1]);
        let (wd, u) = (wsh[0], wsh[1]);
        if d != wd {
            return Err(Error::Shape(format!(
                "dense dimension mismatch: input D={d}, weight D={wd}"
            )));
        }
        if bsh[0] != u {
            return Err(Error::Shape(format!(
                "dense bias length {} does not match U={u}",
                bsh[0]
            )));
        }
        let mut out = Tensor::zeros(&[n, u]);
        gemm(
            self.value(input).data(),
            self.value(weight).data(),
            n,
            d,
            u,
            out.data_mut(),
            false,
        );
        add_row_bias(out.data_mut(), self.value(bias).data(), u);
        let req = self.requires(input) || self.requires(weight) || self.requires(bias);
        Ok(self.push(Value::Owned(out), Op::Dense { input, weight, bias }, req))
    }

    /// Elementwise `max(0, x)`. The subgradient at exactly zero is zero.
    pub fn relu(&mut self, input: NodeId) -> NodeId {
        let out = self.value(input).map(|v| v.max(E::ZERO));
        let req = self.requires(input);
        self.push(Value::Owned(out), Op::Relu { input }, req)
    }

    /// Collapses all trailing dimensions: `[N, ...] -> [N, prod(...)]`.
    pub fn flatten(&mut self, input: NodeId) -> Result<NodeId> {
        let sh = self.value(input).shape().to_vec();
        if sh.is_empty() {
            return Err(Error::Shape("flatten needs at least one dim".into()));
        }
        let n = sh[0];
        let rest: usize = sh[1..].iter().product();
        let out = self.value(input).reshaped(vec![n, rest])?;
        let req = self.requires(input);
        Ok(self.push(Value::Owned(out), Op::Reshape { input }, req))
    }

    /// Mean (or sum) of `-log softmax(logits)[true class]` over the batch.
    ///
    /// `labels` must be one-hot rows. Numerically stabilized by max
    /// subtraction; the gradient w.r.t. logits is `softmax - labels`
    /// (scaled by the reduction).
    pub fn softmax_cross_entropy(
        &mut self,
        logits: NodeId,
        labels: NodeId,
        reduction: Reduction,
    ) -> Result<NodeId> {
        let lsh = self.value(logits).shape().to_vec();
        let ysh = self.value(labels).shape().to_vec();
        if lsh.len() != 2 || ysh != lsh {
            return Err(Error::Shape(format!(
                "softmax_cross_entropy expects logits and one-hot labels of equal [N,K] shape; \
                 got {lsh:?} and {ysh:?}"
            )));
        }
        let (n, k) = (lsh[0], lsh[1]);
        let y = self.value(labels).data();
        for row in 0..n {
            let r = &y[row * k..(row + 1) * k];
            let ones = r.iter().filter(|&&v| v == E::ONE).count();
            let zeros = r.iter().filter(|&&v| v == E::ZERO).count();
            if ones != 1 || zeros != k - 1 {
                return Err(Error::InvalidInput(format!(
                    "label row {row} is not one-hot"
                )));
            }
        }

        let x = self.value(logits).data();
        let mut probs = Tensor::zeros(&[n, k]);
        let p = probs.data_mut();
        let mut total = E::ZERO;
        for row in 0..n {
            let r = &x[row * k..(row + 1) * k];
            let m = r.iter().copied().fold(E::from_f64(f64::NEG_INFINITY), E::max);
            let mut sum = E::ZERO;
            for (dst, &v) in p[row * k..(row + 1) * k].iter_mut().zip(r) {
                let e = (v - m).exp();
                *dst = e;
                sum += e;
            }
            let log_sum = sum.ln();
            let mut row_loss = E::ZERO;
            for (j, dst) in p[row * k..(row + 1) * k].iter_mut().enumerate() {
                *dst = *dst / sum;
                if y[row * k + j] == E::ONE {
                    row_loss = -(r[j] - m - log_sum);
                }
            }
            total += row_loss;
        }
        if reduction == Reduction::Mean {
            total = total / E::from_f64(n as f64);
        }
        let req = self.requires(logits);
        Ok(self.push(
            Value::Owned(Tensor::scalar(total)),
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
                reduction,
            },
            req,
        ))
    }

    /// Reverse pass from a scalar loss node. Populates gradients for every
    /// differentiable node the loss depends on, inputs included.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<E>> {
        if !self.value(loss).is_scalar() {
            return Err(Error::InvalidInput(format!(
                "backward needs a scalar loss node, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<E>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::scalar(E::ONE));
        }

        for idx in (0..=loss.0).rev() {
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            match &self.nodes[idx].op {
                Op::Leaf => {
                    grads[idx] = Some(gout);
                    continue;
                }
                Op::Conv2d {
                    input,
                    kernel,
                    bias,
                    padding,
                } => {
                    let (d_in, d_k, d_b) = conv2d_backward(
                        self.value(*input),
                        self.value(*kernel),
                        *padding,
                        &gout,
                        self.requires(*input),
                        self.requires(*kernel),
                        self.requires(*bias),
                    );
                    if let Some(g) = d_in {
                        accumulate(&mut grads[input.0], g);
                    }
                    if let Some(g) = d_k {
                        accumulate(&mut grads[kernel.0], g);
                    }
                    if let Some(g) = d_b {
                        accumulate(&mut grads[bias.0], g);
                    }
                }
                Op::MaxPool2 { input, argmax } => {
                    if self.requires(*input) {
                        let mut d_in = Tensor::zeros(self.value(*input).shape());
                        let d = d_in.data_mut();
                        for (g, &src) in gout.data().iter().zip(argmax) {
                            d[src as usize] += *g;
                        }
                        accumulate(&mut grads[input.0], d_in);
                    }
                }
                Op::Dense {
                    input,
                    weight,
                    bias,
                } => {
                    let x = self.value(*input);
                    let w = self.value(*weight);
                    let (n, d) = (x.shape()[0], x.shape()[1]);
                    let u = w.shape()[1];
                    if self.requires(*input) {
                        let wt = transpose(w.data(), d, u);
                        let mut d_in = Tensor::zeros(&[n, d]);
                        gemm(gout.data(), &wt, n, u, d, d_in.data_mut(), false);
                        accumulate(&mut grads[input.0], d_in);
                    }
                    if self.requires(*weight) {
                        let xt = transpose(x.data(), n, d);
                        let mut d_w = Tensor::zeros(&[d, u]);
                        gemm(&xt, gout.data(), d, n, u, d_w.data_mut(), false);
                        accumulate(&mut grads[weight.0], d_w);
                    }
                    if self.requires(*bias) {
                        let mut d_b = Tensor::zeros(&[u]);
                        column_sums(gout.data(), u, d_b.data_mut());
                        accumulate(&mut grads[bias.0], d_b);
                    }
                }
                Op::Relu { input } => {
                    if self.requires(*input) {
                        let x = self.value(*input).data();
                        let mut d_in = Tensor::zeros(self.value(*input).shape());
                        for ((d, &g), &v) in d_in.data_mut().iter_mut().zip(gout.data()).zip(x) {
                            if v > E::ZERO {
                                *d = g;
                            }
                        }
                        accumulate(&mut grads[input.0], d_in);
                    }
                }
                Op::Reshape { input } => {
                    if self.requires(*input) {
                        let g = gout.reshaped(self.value(*input).shape().to_vec())?;
                        accumulate(&mut grads[input.0], g);
                    }
                }
                Op::SoftmaxCrossEntropy {
                    logits,
                    labels,
                    probs,
                    reduction,
                } => {
                    if self.requires(*logits) {
                        let n = probs.shape()[0];
                        let scale = match reduction {
                            Reduction::Mean => gout.item() / E::from_f64(n as f64),
                            Reduction::Sum => gout.item(),
                        };
                        let y = self.value(*labels).data();
                        let mut d_l = Tensor::zeros(probs.shape());
                        for ((d, &p), &t) in d_l.data_mut().iter_mut().zip(probs.data()).zip(y) {
                            *d = (p - t) * scale;
                        }
                        accumulate(&mut grads[logits.0], d_l);
                    }
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate<E: Element>(slot: &mut Option<Tensor<E>>, g: Tensor<E>) {
    match slot {
        None => *slot = Some(g),
        Some(acc) => {
            for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
    }
}

fn add_row_bias<E: Element>(out: &mut [E], bias: &[E], width: usize) {
    for row in out.chunks_mut(width) {
        for (o, &b) in row.iter_mut().zip(bias) {
            *o += b;
        }
    }
}

fn column_sums<E: Element>(data: &[E], width: usize, out: &mut [E]) {
    for row in data.chunks(width) {
        for (o, &v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
}

/// Images per im2col chunk, sized to keep the patch buffer around a few MB.
fn conv_chunk_images(oh: usize, ow: usize, patch: usize) -> usize {
    (2_000_000 / (oh * ow * patch).max(1)).max(1)
}

fn conv2d_forward<E: Element>(
    input: &Tensor<E>,
    kernel: &Tensor<E>,
    bias: &Tensor<E>,
    padding: Padding,
    out: &mut Tensor<E>,
) {
    let &[n, h, w, cin] = input.shape() else {
        unreachable!()
    };
    let &[kh, kw, _, cout] = kernel.shape() else {
        unreachable!()
    };
    let (oh, ow) = (out.shape()[1], out.shape()[2]);
    let patch = kh * kw * cin;
    let chunk = conv_chunk_images(oh, ow, patch);
    let mut patches = vec![E::ZERO; chunk * oh * ow * patch];

    let mut img = 0;
    while img < n {
        let imgs = chunk.min(n - img);
        let rows = imgs * oh * ow;
        im2col(
            input.data(),
            img,
            imgs,
            (h, w, cin),
            (kh, kw),
            (oh, ow),
            padding,
            &mut patches[..rows * patch],
        );
        let out_slice = &mut out.data_mut()[img * oh * ow * cout..(img + imgs) * oh * ow * cout];
        gemm(
            &patches[..rows * patch],
            kernel.data(),
            rows,
            patch,
            cout,
            out_slice,
            false,
        );
        add_row_bias(out_slice, bias.data(), cout);
        img += imgs;
    }
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward<E: Element>(
    input: &Tensor<E>,
    kernel: &Tensor<E>,
    padding: Padding,
    gout: &Tensor<E>,
    want_input: bool,
    want_kernel: bool,
    want_bias: bool,
) -> (Option<Tensor<E>>, Option<Tensor<E>>, Option<Tensor<E>>) {
    let &[n, h, w, cin] = input.shape() else {
        unreachable!()
    };
    let &[kh, kw, _, cout] = kernel.shape() else {
        unreachable!()
    };
    let (oh, ow) = (gout.shape()[1], gout.shape()[2]);
    let patch = kh * kw * cin;

    let mut d_input = want_input.then(|| Tensor::zeros(input.shape()));
    let mut d_kernel = want_kernel.then(|| Tensor::zeros(kernel.shape()));
    let mut d_bias = want_bias.then(|| Tensor::zeros(&[cout]));

    if let Some(db) = &mut d_bias {
        column_sums(gout.data(), cout, db.data_mut());
    }
    if !want_input && !want_kernel {
        return (d_input, d_kernel, d_bias);
    }

    let chunk = conv_chunk_images(oh, ow, patch);
    let mut patches = vec![E::ZERO; chunk * oh * ow * patch];
    let kt = want_input.then(|| transpose(kernel.data(), patch, cout));
    let mut d_patches = want_input.then(|| vec![E::ZERO; chunk * oh * ow * patch]);

    let mut img = 0;
    while img < n {
        let imgs = chunk.min(n - img);
        let rows = imgs * oh * ow;
        let g_slice = &gout.data()[img * oh * ow * cout..(img + imgs) * oh * ow * cout];

        if let Some(dk) = &mut d_kernel {
            im2col(
                input.data(),
                img,
                imgs,
                (h, w, cin),
                (kh, kw),
                (oh, ow),
                padding,
                &mut patches[..rows * patch],
            );
            let pt = transpose(&patches[..rows * patch], rows, patch);
            gemm(&pt, g_slice, patch, rows, cout, dk.data_mut(), true);
        }
        if let (Some(di), Some(dp), Some(kt)) = (&mut d_input, &mut d_patches, &kt) {
            gemm(g_slice, kt, rows, cout, patch, &mut dp[..rows * patch], false);
            col2im(
                &dp[..rows * patch],
                img,
                imgs,
                (h, w, cin),
                (kh, kw),
                (oh, ow),
                padding,
                di.data_mut(),
            );
        }
        img += imgs;
    }
    (d_input, d_kernel, d_bias)
}

#[allow(clippy::too_many_arguments)]
fn im2col<E: Element>(
    input: &[E],
    img0: usize,
    imgs: usize,
    (h, w, cin): (usize, usize, usize),
    (kh, kw): (usize, usize),
    (oh, ow): (usize, usize),
    padding: Padding,
    patches: &mut [E],
) {
    let (pad_y, pad_x) = pad_offsets(kh, kw, padding);
    let patch = kh * kw * cin;
    patches.fill(E::ZERO);
    for i in 0..imgs {
        let img = img0 + i;
        for oy in 0..oh {
            for ox in 0..ow {
                let row = ((i * oh + oy) * ow + ox) * patch;
                for ky in 0..kh {
                    let iy = (oy + ky) as isize - pad_y;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..kw {
                        let ix = (ox + kx) as isize - pad_x;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let src = ((img * h + iy as usize) * w + ix as usize) * cin;
                        let dst = row + (ky * kw + kx) * cin;
                        patches[dst..dst + cin].copy_from_slice(&input[src..src + cin]);
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im<E: Element>(
    d_patches: &[E],
    img0: usize,
    imgs: usize,
    (h, w, cin): (usize, usize, usize),
    (kh, kw): (usize, usize),
    (oh, ow): (usize, usize),
    padding: Padding,
    d_input: &mut [E],
) {
    let (pad_y, pad_x) = pad_offsets(kh, kw, padding);
    let patch = kh * kw * cin;
    for i in 0..imgs {
        let img = img0 + i;
        for oy in 0..oh {
            for ox in 0..ow {
                let row = ((i * oh + oy) * ow + ox) * patch;
                for ky in 0..kh {
                    let iy = (oy + ky) as isize - pad_y;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..kw {
                        let ix = (ox + kx) as isize - pad_x;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let dst = ((img * h + iy as usize) * w + ix as usize) * cin;
                        let src = row + (ky * kw + kx) * cin;
                        for c in 0..cin {
                            d_input[dst + c] += d_patches[src + c];
                        }
                    }
                }
            }
        }
    }
}

fn pad_offsets(kh: usize, kw: usize, padding: Padding) -> (isize, isize) {
    match padding {
        Padding::Same => (((kh - 1) / 2) as isize, ((kw - 1) / 2) as isize),
        Padding::Valid => (0, 0),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn conv_identity_kernel_scales() {
        let input = Tensor::<f64>::filled(&[1, 3, 3, 1], 1.0);
        let kernel = t(&[1, 1, 1, 1], &[2.0]);
        let bias = t(&[1], &[0.0]);
        let mut tape = Tape::new();
        let (x, k, b) = (
            tape.leaf(&input),
            tape.constant(&kernel),
            tape.constant(&bias),
        );
        let y = tape.conv2d(x, k, b, Padding::Same).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 3, 3, 1]);
        assert!(tape.value(y).data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn conv_same_padding_shape() {
        let input = Tensor::<f32>::zeros(&[1, 28, 28, 1]);
        let kernel = Tensor::<f32>::zeros(&[5, 5, 1, 32]);
        let bias = Tensor::<f32>::zeros(&[32]);
        let mut tape = Tape::new();
        let (x, k, b) = (
            tape.constant(&input),
            tape.constant(&kernel),
            tape.constant(&bias),
        );
        let y = tape.conv2d(x, k, b, Padding::Same).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 28, 28, 32]);
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let input = Tensor::<f32>::zeros(&[1, 6, 6, 2]);
        let kernel = Tensor::<f32>::zeros(&[3, 3, 5, 4]);
        let bias = Tensor::<f32>::zeros(&[4]);
        let mut tape = Tape::new();
        let (x, k, b) = (
            tape.constant(&input),
            tape.constant(&kernel),
            tape.constant(&bias),
        );
        let err = tape.conv2d(x, k, b, Padding::Same).unwrap_err();
        assert!(err.to_string().contains("Cin"));
    }

    /// Direct six-nested-loop convolution, the independent oracle.
    fn conv_oracle(
        input: &Tensor<f64>,
        kernel: &Tensor<f64>,
        bias: &Tensor<f64>,
        padding: Padding,
    ) -> Tensor<f64> {
        let &[n, h, w, cin] = input.shape() else {
            panic!()
        };
        let &[kh, kw, _, cout] = kernel.shape() else {
            panic!()
        };
        let oh = conv_out_dim(h, kh, padding).unwrap();
        let ow = conv_out_dim(w, kw, padding).unwrap();
        let (py, px) = pad_offsets(kh, kw, padding);
        let mut out = Tensor::zeros(&[n, oh, ow, cout]);
        for img in 0..n {
            for oy in 0..oh {
                for ox in 0..ow {
                    for co in 0..cout {
                        let mut acc = bias.data()[co];
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy + ky) as isize - py;
                                let ix = (ox + kx) as isize - px;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                for ci in 0..cin {
                                    let iv = input.data()
                                        [((img * h + iy as usize) * w + ix as usize) * cin + ci];
                                    let kv = kernel.data()[((ky * kw + kx) * cin + ci) * cout + co];
                                    acc += iv * kv;
                                }
                            }
                        }
                        out.data_mut()[((img * oh + oy) * ow + ox) * cout + co] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_naive_loop_oracle() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for padding in [Padding::Same, Padding::Valid] {
            let input = Tensor::<f64>::random_uniform(&[1, 6, 6, 2], &mut rng, -1.0, 1.0);
            let kernel = Tensor::<f64>::random_uniform(&[3, 3, 2, 4], &mut rng, -1.0, 1.0);
            let bias = Tensor::<f64>::random_uniform(&[4], &mut rng, -0.5, 0.5);
            let mut tape = Tape::new();
            let (x, k, b) = (
                tape.constant(&input),
                tape.constant(&kernel),
                tape.constant(&bias),
            );
            let y = tape.conv2d(x, k, b, padding).unwrap();
            let want = conv_oracle(&input, &kernel, &bias, padding);
            assert_eq!(tape.value(y).shape(), want.shape());
            for (got, want) in tape.value(y).data().iter().zip(want.data()) {
                let rel = (got - want).abs() / want.abs().max(1e-9);
                assert!(rel < 1e-6, "{got} vs {want}");
            }
        }
    }

    #[test]
    fn maxpool_basics() {
        let input = t(&[1, 2, 2, 1], &[1.0, 2.0, 3.0, 4.0]);
        let mut tape = Tape::new();
        let x = tape.leaf(&input);
        let y = tape.maxpool2(x, 2).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 1, 1, 1]);
        assert_eq!(tape.value(y).data(), &[4.0]);

        let big = Tensor::<f64>::zeros(&[1, 28, 28, 32]);
        let mut tape = Tape::new();
        let x = tape.constant(&big);
        let y = tape.maxpool2(x, 2).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 14, 14, 32]);

        let mut tape = Tape::new();
        let x = tape.constant(&input);
        assert!(tape.maxpool2(x, 3).is_err());
    }

    #[test]
    fn maxpool_tie_break_routes_to_first_cell() {
        // constant input: every window is a four-way tie, the gradient must
        // land on exactly one cell per window (the first in row-major order)
        let input = Tensor::<f64>::filled(&[1, 4, 4, 1], 5.0);
        let mut tape = Tape::new();
        let x = tape.leaf(&input);
        let y = tape.maxpool2(x, 2).unwrap();
        let ysum = sum_all(&mut tape, y);
        let mut grads = tape.backward(ysum).unwrap();
        let g = grads.take(x).unwrap();
        let expect = [
            1.0, 0.0, 1.0, 0.0, //
            0.0, 0.0, 0.0, 0.0, //
            1.0, 0.0, 1.0, 0.0, //
            0.0, 0.0, 0.0, 0.0,
        ];
        assert_eq!(g.data(), &expect);
    }

    /// Reduces a single-image node to a scalar through a dense layer of
    /// ones, so backward tests have a scalar loss.
    fn sum_all(tape: &mut Tape<'_, f64>, id: NodeId) -> NodeId {
        let flat = tape.flatten(id).unwrap();
        assert_eq!(tape.value(flat).shape()[0], 1, "sum_all expects N == 1");
        let d = tape.value(flat).shape()[1];
        let w = tape.constant_owned(Tensor::<f64>::filled(&[d, 1], 1.0));
        let b = tape.constant_owned(Tensor::<f64>::zeros(&[1]));
        tape.dense(flat, w, b).unwrap()
    }

    #[test]
    fn dense_identity_and_hand_arithmetic() {
        let input = t(&[1, 2], &[1.0, 1.0]);
        let weight = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let bias = t(&[2], &[0.0, 0.0]);
        let mut tape = Tape::new();
        let (x, w, b) = (
            tape.constant(&input),
            tape.constant(&weight),
            tape.constant(&bias),
        );
        let y = tape.dense(x, w, b).unwrap();
        assert_eq!(tape.value(y).data(), &[4.0, 6.0]);

        let eye = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let mut tape = Tape::new();
        let (x, w, b) = (
            tape.constant(&input),
            tape.constant(&eye),
            tape.constant(&bias),
        );
        let y = tape.dense(x, w, b).unwrap();
        assert_eq!(tape.value(y).data(), input.data());

        let bad = Tensor::<f64>::zeros(&[3, 2]);
        let mut tape = Tape::new();
        let (x, w, b) = (
            tape.constant(&input),
            tape.constant(&bad),
            tape.constant(&bias),
        );
        assert!(tape.dense(x, w, b).is_err());
    }

    #[test]
    fn dense_matches_loop_product() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::<f64>::random_uniform(&[3, 5], &mut rng, -1.0, 1.0);
        let w = Tensor::<f64>::random_uniform(&[5, 7], &mut rng, -1.0, 1.0);
        let b = Tensor::<f64>::random_uniform(&[7], &mut rng, -1.0, 1.0);
        let mut tape = Tape::new();
        let (xi, wi, bi) = (tape.constant(&x), tape.constant(&w), tape.constant(&b));
        let y = tape.dense(xi, wi, bi).unwrap();
        for i in 0..3 {
            for j in 0..7 {
                let mut want = b.data()[j];
                for p in 0..5 {
                    want += x.data()[i * 5 + p] * w.data()[p * 7 + j];
                }
                let got = tape.value(y).data()[i * 7 + j];
                assert!((got - want).abs() / want.abs().max(1e-9) < 1e-6);
            }
        }
    }

    #[test]
    fn relu_forward_and_gradient_mask() {
        let input = t(&[1, 3], &[-1.0, 0.0, 2.0]);
        let labels = t(&[1, 3], &[0.0, 0.0, 1.0]);
        let mut tape = Tape::new();
        let x = tape.leaf(&input);
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
        let l = tape.constant(&labels);
        let loss = tape.softmax_cross_entropy(y, l, Reduction::Mean).unwrap();
        let mut grads = tape.backward(loss).unwrap();
        let g = grads.take(x).unwrap();
        // entries at x < 0 and x == 0 must be exactly zero
        assert_eq!(g.data()[0], 0.0);
        assert_eq!(g.data()[1], 0.0);
        assert!(g.data()[2] != 0.0);
    }

    #[test]
    fn cross_entropy_uniform_logits_is_ln_k() {
        let logits = Tensor::<f64>::zeros(&[1, 10]);
        let mut onehot = Tensor::<f64>::zeros(&[1, 10]);
        onehot.data_mut()[3] = 1.0;
        let mut tape = Tape::new();
        let (x, y) = (tape.constant(&logits), tape.constant(&onehot));
        let loss = tape.softmax_cross_entropy(x, y, Reduction::Mean).unwrap();
        assert!((tape.value(loss).item() - 10.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_decreases_with_margin() {
        let mut onehot = Tensor::<f64>::zeros(&[1, 4]);
        onehot.data_mut()[1] = 1.0;
        let mut prev = f64::INFINITY;
        for margin in [0.0, 1.0, 4.0, 16.0, 64.0] {
            let mut logits = Tensor::<f64>::zeros(&[1, 4]);
            logits.data_mut()[1] = margin;
            let mut tape = Tape::new();
            let (x, y) = (tape.constant(&logits), tape.constant(&onehot));
            let loss = tape.softmax_cross_entropy(x, y, Reduction::Mean).unwrap();
            let v = tape.value(loss).item();
            assert!(v < prev, "loss must fall as the true-class margin grows");
            prev = v;
        }
        assert!(prev < 1e-20);
    }

    #[test]
    fn cross_entropy_rejects_non_one_hot() {
        let logits = Tensor::<f64>::zeros(&[1, 3]);
        let bad = t(&[1, 3], &[0.5, 0.5, 0.0]);
        let mut tape = Tape::new();
        let (x, y) = (tape.constant(&logits), tape.constant(&bad));
        assert!(tape
            .softmax_cross_entropy(x, y, Reduction::Mean)
            .is_err());
    }

    #[test]
    fn cross_entropy_gradient_is_probs_minus_labels() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let logits = Tensor::<f64>::random_uniform(&[2, 5], &mut rng, -2.0, 2.0);
        let mut onehot = Tensor::<f64>::zeros(&[2, 5]);
        onehot.data_mut()[2] = 1.0;
        onehot.data_mut()[5 + 4] = 1.0;
        let mut tape = Tape::new();
        let (x, y) = (tape.leaf(&logits), tape.constant(&onehot));
        let loss = tape.softmax_cross_entropy(x, y, Reduction::Mean).unwrap();
        let mut grads = tape.backward(loss).unwrap();
        let g = grads.take(x).unwrap();
        // analytic check: softmax(logits) - labels, divided by batch size
        for row in 0..2 {
            let r = &logits.data()[row * 5..(row + 1) * 5];
            let m = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = r.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = exps.iter().sum();
            for j in 0..5 {
                let want = (exps[j] / s - onehot.data()[row * 5 + j]) / 2.0;
                let got = g.data()[row * 5 + j];
                assert!((got - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let input = t(&[1, 3], &[1.0, 2.0, 3.0]);
        let mut tape = Tape::new();
        let x = tape.leaf(&input);
        let y = tape.relu(x);
        assert!(tape.backward(y).is_err());
    }

    #[test]
    fn constants_receive_no_gradient() {
        let logits = t(&[1, 2], &[0.3, -0.1]);
        let labels = t(&[1, 2], &[1.0, 0.0]);
        let mut tape = Tape::new();
        let x = tape.constant(&logits);
        let y = tape.constant(&labels);
        let loss = tape.softmax_cross_entropy(x, y, Reduction::Mean).unwrap();
        let grads = tape.backward(loss).unwrap();
        // a constant-folded node's gradient is identically zero: no entry
        assert!(grads.get(x).is_none());
        assert!(grads.get(y).is_none());
    }
}

//! Reverse-mode differentiation over a dynamically recorded operator tape.
//!
//! Every operator appends one node holding its output value and whatever it
//! needs for the backward pass. Inputs always precede outputs on the tape, so
//! walking it from the end is a valid reverse topological order.

use serde::{Deserialize, Serialize};

use super::gemm::{gemm, Layout};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Probabilities are clamped into `[PROB_FLOOR, 1 - PROB_FLOOR]` before any log.
pub const PROB_FLOOR: f64 = 1e-7;

pub fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR)
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Infer,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    /// No padding; output shrinks by `kernel - 1`.
    Valid,
    /// Zero padding that keeps spatial extents; an odd deficit goes to the
    /// trailing (bottom/right) side.
    Same,
}

/// Per-channel running statistics of a batch-norm layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BatchNormConfig {
    pub momentum: f64,
    pub eps: f64,
}

impl Default for BatchNormConfig {
    fn default() -> Self {
        BatchNormConfig {
            momentum: 0.1,
            eps: 1e-5,
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    in_ch: usize,
    h: usize,
    w: usize,
    out_ch: usize,
    kh: usize,
    kw: usize,
    pad_top: usize,
    pad_left: usize,
    out_h: usize,
    out_w: usize,
}

impl ConvGeom {
    fn patch_len(&self) -> usize {
        self.in_ch * self.kh * self.kw
    }

    fn plane(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Lower one sample `[in_ch, h, w]` into a `[in_ch*kh*kw, out_h*out_w]`
    /// patch matrix. Padding cells of `cols` must already be zero.
    fn im2col(&self, input: &[f64], cols: &mut [f64]) {
        let plane = self.plane();
        for c in 0..self.in_ch {
            let src = &input[c * self.h * self.w..][..self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let dst = &mut cols[row * plane..(row + 1) * plane];
                    let (j0, j1) = self.valid_cols(kj);
                    for oi in 0..self.out_h {
                        let ii = (oi + ki) as isize - self.pad_top as isize;
                        if ii < 0 || ii >= self.h as isize {
                            continue;
                        }
                        let src_row = &src[ii as usize * self.w..][..self.w];
                        let dst_row = &mut dst[oi * self.out_w..][..self.out_w];
                        let s0 = j0 + kj - self.pad_left;
                        dst_row[j0..j1].copy_from_slice(&src_row[s0..s0 + j1 - j0]);
                    }
                }
            }
        }
    }

    /// Output columns `oj` whose input column `oj + kj - pad_left` is inside
    /// the image.
    fn valid_cols(&self, kj: usize) -> (usize, usize) {
        let lo = self.pad_left.saturating_sub(kj);
        let hi = (self.w + self.pad_left).saturating_sub(kj).min(self.out_w);
        (lo, hi.max(lo))
    }

    /// Scatter-add one sample's patch-matrix gradient onto `[in_ch, h, w]`.
    fn col2im(&self, cols: &[f64], grad_input: &mut [f64]) {
        let plane = self.plane();
        for c in 0..self.in_ch {
            let dst = &mut grad_input[c * self.h * self.w..][..self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let src = &cols[row * plane..(row + 1) * plane];
                    let (j0, j1) = self.valid_cols(kj);
                    for oi in 0..self.out_h {
                        let ii = (oi + ki) as isize - self.pad_top as isize;
                        if ii < 0 || ii >= self.h as isize {
                            continue;
                        }
                        let src_row = &src[oi * self.out_w..][..self.out_w];
                        let dst_row = &mut dst[ii as usize * self.w..][..self.w];
                        let d0 = j0 + kj - self.pad_left;
                        for (d, s) in dst_row[d0..d0 + j1 - j0].iter_mut().zip(&src_row[j0..j1]) {
                            *d += s;
                        }
                    }
                }
            }
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Sum(Var),
    Reshape(Var),
    Relu(Var),
    Sigmoid(Var),
    Softmax(Var),
    Dense {
        input: Var,
        weight: Var,
        bias: Var,
    },
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        geom: ConvGeom,
    },
    MaxPool2d {
        input: Var,
        argmax: Vec<usize>,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        spatial: usize,
        batch_stats: bool,
    },
    ConcatCols(Vec<Var>),
    BinaryCrossEntropy {
        probs: Var,
        targets: Vec<f64>,
    },
    LinearAgreement {
        probs: Var,
        targets: Vec<f64>,
    },
    CrossEntropy {
        probs: Var,
        labels: Vec<usize>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Operator record for one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`; `None` when `var` does not
    /// track gradients or is not on the loss path.
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    /// Gradient as a tensor, zero-filled when `var` is off the loss path.
    pub fn wrt(&self, var: Var) -> Tensor {
        let shape = self.shapes[var.0].clone();
        match self.get(var) {
            Some(g) => Tensor::new(shape, g.to_vec()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }
}

fn expect_rank(op: &'static str, t: &Tensor, rank: usize) -> Result<()> {
    if t.rank() != rank {
        return Err(Error::Shape {
            op,
            detail: format!("expected rank {rank}, got shape {:?}", t.shape()),
        });
    }
    Ok(())
}

fn expect_dim(op: &'static str, axis: &'static str, expected: usize, found: usize) -> Result<()> {
    if expected != found {
        return Err(Error::Dimension {
            op,
            axis,
            expected,
            found,
        });
    }
    Ok(())
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
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

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Leaf that tracks gradients.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Leaf that does not track gradients.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::Shape {
                op: "add",
                detail: format!("{:?} vs {:?}", va.shape(), vb.shape()),
            });
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::Shape {
                op: "mul",
                detail: format!("{:?} vs {:?}", va.shape(), vb.shape()),
            });
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.any_grad(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(out, Op::Reshape(a), rg))
    }

    /// Collapse every axis after the first: `[b, ...] -> [b, n]`.
    pub fn flatten(&mut self, a: Var) -> Result<Var> {
        let shape = self.value(a).shape();
        let b = shape[0];
        let n = shape[1..].iter().product::<usize>();
        self.reshape(a, vec![b, n])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(0.0));
        let rg = self.any_grad(&[a]);
        self.push(out, Op::Relu(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        let rg = self.any_grad(&[a]);
        self.push(out, Op::Sigmoid(a), rg)
    }

    /// Row-wise softmax over the last axis of a `[batch, k]` tensor.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        expect_rank("softmax", v, 2)?;
        let k = v.shape()[1];
        let mut data = v.data().to_vec();
        for row in data.chunks_mut(k) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                total += *x;
            }
            for x in row.iter_mut() {
                *x /= total;
            }
        }
        let out = Tensor::new(v.shape().to_vec(), data)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(out, Op::Softmax(a), rg))
    }

    /// Affine map `input · weight + bias` with `input: [batch, n]`,
    /// `weight: [n, m]`, `bias: [m]`.
    pub fn dense(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (x, w, b) = (self.value(input), self.value(weight), self.value(bias));
        expect_rank("dense", x, 2)?;
        expect_rank("dense", w, 2)?;
        expect_dim("dense", "inner", w.shape()[0], x.shape()[1])?;
        expect_dim("dense", "bias", w.shape()[1], b.len())?;
        let (batch, n, m) = (x.shape()[0], x.shape()[1], w.shape()[1]);
        let mut out = Vec::with_capacity(batch * m);
        for _ in 0..batch {
            out.extend_from_slice(b.data());
        }
        gemm(batch, n, m, x.data(), Layout::Normal, w.data(), Layout::Normal, 1.0, &mut out);
        let out = Tensor::new(vec![batch, m], out)?;
        let rg = self.any_grad(&[input, weight, bias]);
        Ok(self.push(
            out,
            Op::Dense {
                input,
                weight,
                bias,
            },
            rg,
        ))
    }

    /// 2-D convolution (cross-correlation, stride 1) over `[batch, ch, h, w]`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var, padding: Padding) -> Result<Var> {
        let (x, k, b) = (self.value(input), self.value(kernel), self.value(bias));
        expect_rank("conv2d", x, 4)?;
        expect_rank("conv2d", k, 4)?;
        let (batch, in_ch, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (out_ch, k_in, kh, kw) = (k.shape()[0], k.shape()[1], k.shape()[2], k.shape()[3]);
        expect_dim("conv2d", "channels", k_in, in_ch)?;
        expect_dim("conv2d", "bias", out_ch, b.len())?;
        let (pad_h, pad_w) = match padding {
            Padding::Valid => (0, 0),
            Padding::Same => (kh - 1, kw - 1),
        };
        if kh > h + pad_h {
            return Err(Error::Dimension {
                op: "conv2d",
                axis: "height",
                expected: kh,
                found: h + pad_h,
            });
        }
        if kw > w + pad_w {
            return Err(Error::Dimension {
                op: "conv2d",
                axis: "width",
                expected: kw,
                found: w + pad_w,
            });
        }
        let geom = ConvGeom {
            in_ch,
            h,
            w,
            out_ch,
            kh,
            kw,
            pad_top: pad_h / 2,
            pad_left: pad_w / 2,
            out_h: h + pad_h - kh + 1,
            out_w: w + pad_w - kw + 1,
        };
        let plane = geom.plane();
        let mut cols = vec![0.0; geom.patch_len() * plane];
        let mut out = vec![0.0; batch * out_ch * plane];
        let sample_in = in_ch * h * w;
        for (bi, dst) in out.chunks_mut(out_ch * plane).enumerate() {
            geom.im2col(&x.data()[bi * sample_in..][..sample_in], &mut cols);
            for (o, row) in dst.chunks_mut(plane).enumerate() {
                row.fill(b.data()[o]);
            }
            gemm(out_ch, geom.patch_len(), plane, k.data(), Layout::Normal, &cols, Layout::Normal, 1.0, dst);
        }
        let out = Tensor::new(vec![batch, out_ch, geom.out_h, geom.out_w], out)?;
        let rg = self.any_grad(&[input, kernel, bias]);
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            },
            rg,
        ))
    }

    /// Max pooling over `[batch, ch, h, w]` with floor semantics on the output
    /// extents. Ties resolve to the first maximum in row-major window order.
    pub fn maxpool2d(&mut self, input: Var, window: (usize, usize), stride: (usize, usize)) -> Result<Var> {
        let x = self.value(input);
        expect_rank("maxpool2d", x, 4)?;
        let (batch, ch, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        if window.0 > h {
            return Err(Error::Dimension {
                op: "maxpool2d",
                axis: "height",
                expected: window.0,
                found: h,
            });
        }
        if window.1 > w {
            return Err(Error::Dimension {
                op: "maxpool2d",
                axis: "width",
                expected: window.1,
                found: w,
            });
        }
        if stride.0 == 0 || stride.1 == 0 {
            return Err(Error::Shape {
                op: "maxpool2d",
                detail: "stride must be positive".into(),
            });
        }
        let out_h = (h - window.0) / stride.0 + 1;
        let out_w = (w - window.1) / stride.1 + 1;
        let mut out = Vec::with_capacity(batch * ch * out_h * out_w);
        let mut argmax = Vec::with_capacity(out.capacity());
        let data = x.data();
        for plane in 0..batch * ch {
            let base = plane * h * w;
            for oi in 0..out_h {
                for oj in 0..out_w {
                    let mut best_idx = base + oi * stride.0 * w + oj * stride.1;
                    let mut best = data[best_idx];
                    for di in 0..window.0 {
                        for dj in 0..window.1 {
                            let idx = base + (oi * stride.0 + di) * w + oj * stride.1 + dj;
                            if data[idx] > best {
                                best = data[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    out.push(best);
                    argmax.push(best_idx);
                }
            }
        }
        let out = Tensor::new(vec![batch, ch, out_h, out_w], out)?;
        let rg = self.any_grad(&[input]);
        Ok(self.push(out, Op::MaxPool2d { input, argmax }, rg))
    }

    /// Batch normalisation over the channel axis (axis 1) of a rank-2 or
    /// rank-4 tensor. Train mode normalises with batch statistics and folds
    /// them into `running` with the configured momentum; infer mode uses
    /// `running` unchanged.
    pub fn batchnorm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        running: &mut RunningStats,
        mode: Mode,
        config: BatchNormConfig,
    ) -> Result<Var> {
        match mode {
            Mode::Infer => self.batchnorm_infer(input, gamma, beta, running, config),
            Mode::Train => {
                let (batch, ch, spatial) = self.bn_extents(input, gamma, beta, running)?;
                let data = self.value(input).data();
                let count = (batch * spatial) as f64;
                let mut mean = vec![0.0; ch];
                let mut var = vec![0.0; ch];
                for b in 0..batch {
                    for c in 0..ch {
                        mean[c] += data[(b * ch + c) * spatial..][..spatial].iter().sum::<f64>();
                    }
                }
                mean.iter_mut().for_each(|m| *m /= count);
                for b in 0..batch {
                    for c in 0..ch {
                        let s = &data[(b * ch + c) * spatial..][..spatial];
                        var[c] += s.iter().map(|v| (v - mean[c]).powi(2)).sum::<f64>();
                    }
                }
                var.iter_mut().for_each(|v| *v /= count);
                for c in 0..ch {
                    running.mean[c] = (1.0 - config.momentum) * running.mean[c] + config.momentum * mean[c];
                    running.var[c] = (1.0 - config.momentum) * running.var[c] + config.momentum * var[c];
                }
                self.normalize(input, gamma, beta, &mean, &var, true, config.eps)
            }
        }
    }

    /// Batch normalisation with frozen running statistics.
    pub fn batchnorm_infer(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        running: &RunningStats,
        config: BatchNormConfig,
    ) -> Result<Var> {
        self.bn_extents(input, gamma, beta, running)?;
        self.normalize(input, gamma, beta, &running.mean, &running.var, false, config.eps)
    }

    fn bn_extents(&self, input: Var, gamma: Var, beta: Var, running: &RunningStats) -> Result<(usize, usize, usize)> {
        let x = self.value(input);
        if x.rank() != 2 && x.rank() != 4 {
            return Err(Error::Shape {
                op: "batchnorm",
                detail: format!("expected rank 2 or 4, got shape {:?}", x.shape()),
            });
        }
        let (batch, ch) = (x.shape()[0], x.shape()[1]);
        expect_dim("batchnorm", "gamma", ch, self.value(gamma).len())?;
        expect_dim("batchnorm", "beta", ch, self.value(beta).len())?;
        expect_dim("batchnorm", "running_mean", ch, running.mean.len())?;
        expect_dim("batchnorm", "running_var", ch, running.var.len())?;
        Ok((batch, ch, x.shape()[2..].iter().product()))
    }

    #[allow(clippy::too_many_arguments)]
    fn normalize(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        var: &[f64],
        batch_stats: bool,
        eps: f64,
    ) -> Result<Var> {
        let x = self.value(input);
        let (batch, ch) = (x.shape()[0], x.shape()[1]);
        let spatial: usize = x.shape()[2..].iter().product();
        let data = x.data();
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; data.len()];
        let mut out = vec![0.0; data.len()];
        for b in 0..batch {
            for c in 0..ch {
                let off = (b * ch + c) * spatial;
                for i in off..off + spatial {
                    xhat[i] = (data[i] - mean[c]) * inv_std[c];
                    out[i] = g[c] * xhat[i] + bt[c];
                }
            }
        }
        let out = Tensor::new(x.shape().to_vec(), out)?;
        let rg = self.any_grad(&[input, gamma, beta]);
        Ok(self.push(
            out,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                spatial,
                batch_stats,
            },
            rg,
        ))
    }

    /// Concatenate `[batch, n_i]` tensors along the column axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::Shape {
            op: "concat_cols",
            detail: "no inputs".into(),
        })?;
        let batch = self.value(*first).shape()[0];
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let v = self.value(p);
            expect_rank("concat_cols", v, 2)?;
            expect_dim("concat_cols", "batch", batch, v.shape()[0])?;
            widths.push(v.shape()[1]);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(batch * total);
        for b in 0..batch {
            for (&p, &wd) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[b * wd..(b + 1) * wd]);
            }
        }
        let out = Tensor::new(vec![batch, total], out)?;
        let rg = self.any_grad(parts);
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), rg))
    }

    fn targets_for(&self, op: &'static str, probs: Var, labels: &[usize]) -> Result<(usize, usize)> {
        let p = self.value(probs);
        expect_rank(op, p, 2)?;
        let (batch, k) = (p.shape()[0], p.shape()[1]);
        expect_dim(op, "batch", batch, labels.len())?;
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Invalid(format!("{op}: label {bad} outside 0..{k}")));
        }
        Ok((batch, k))
    }

    fn one_hot(batch: usize, k: usize, labels: &[usize]) -> Vec<f64> {
        let mut t = vec![0.0; batch * k];
        for (i, &l) in labels.iter().enumerate() {
            t[i * k + l] = 1.0;
        }
        t
    }

    /// Mean over the batch of the sum of `k` binary cross-entropies against
    /// one-hot targets. `labels` are 0-based class indices.
    pub fn binary_cross_entropy(&mut self, probs: Var, labels: &[usize]) -> Result<Var> {
        let (batch, k) = self.targets_for("binary_cross_entropy", probs, labels)?;
        let targets = Self::one_hot(batch, k, labels);
        let total: f64 = self
            .value(probs)
            .data()
            .iter()
            .zip(&targets)
            .map(|(&p, &t)| {
                let p = clamp_prob(p);
                t * p.ln() + (1.0 - t) * (1.0 - p).ln()
            })
            .sum();
        let out = Tensor::scalar(-total / batch as f64);
        let rg = self.any_grad(&[probs]);
        Ok(self.push(out, Op::BinaryCrossEntropy { probs, targets }, rg))
    }

    /// `-(1/N) Σ_i Σ_k [t·p + (1-t)·(1-p)]`: the log-free one-vs-rest agreement
    /// objective.
    pub fn linear_agreement(&mut self, probs: Var, labels: &[usize]) -> Result<Var> {
        let (batch, k) = self.targets_for("linear_agreement", probs, labels)?;
        let targets = Self::one_hot(batch, k, labels);
        let total: f64 = self
            .value(probs)
            .data()
            .iter()
            .zip(&targets)
            .map(|(&p, &t)| t * p + (1.0 - t) * (1.0 - p))
            .sum();
        let out = Tensor::scalar(-total / batch as f64);
        let rg = self.any_grad(&[probs]);
        Ok(self.push(out, Op::LinearAgreement { probs, targets }, rg))
    }

    /// Categorical cross-entropy `-(1/N) Σ log p[i, y_i]` on probabilities.
    pub fn cross_entropy(&mut self, probs: Var, labels: &[usize]) -> Result<Var> {
        let (batch, k) = self.targets_for("cross_entropy", probs, labels)?;
        let p = self.value(probs).data();
        let total: f64 = labels.iter().enumerate().map(|(i, &l)| clamp_prob(p[i * k + l]).ln()).sum();
        let out = Tensor::scalar(-total / batch as f64);
        let rg = self.any_grad(&[probs]);
        Ok(self.push(
            out,
            Op::CrossEntropy {
                probs,
                labels: labels.to_vec(),
            },
            rg,
        ))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::Shape {
                op: "backward",
                detail: format!("loss must be a scalar, got shape {:?}", lv.shape()),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backward_node(idx, node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            grads: grads
                .into_iter()
                .zip(&self.nodes)
                .map(|(g, n)| if n.requires_grad { g } else { None })
                .collect(),
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var, at: usize) -> &'g mut Vec<f64> {
        assert!(v.0 < at, "tape cycle at node {at}");
        let len = self.nodes[v.0].value.len();
        grads[v.0].get_or_insert_with(|| vec![0.0; len])
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_node(&self, idx: usize, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        macro_rules! slot {
            ($v:expr) => {
                self.slot(grads, $v, idx)
            };
        }
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.wants(v) {
                        slot!(v).iter_mut().zip(g).for_each(|(d, s)| *d += s);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if self.wants(*a) {
                    let d = slot!(*a);
                    for i in 0..g.len() {
                        d[i] += g[i] * vb[i];
                    }
                }
                if self.wants(*b) {
                    let d = slot!(*b);
                    for i in 0..g.len() {
                        d[i] += g[i] * va[i];
                    }
                }
            }
            Op::Sum(a) => {
                if self.wants(*a) {
                    slot!(*a).iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Reshape(a) => {
                if self.wants(*a) {
                    slot!(*a).iter_mut().zip(g).for_each(|(d, s)| *d += s);
                }
            }
            Op::Relu(a) => {
                if self.wants(*a) {
                    let x = self.value(*a).data();
                    let d = slot!(*a);
                    for i in 0..g.len() {
                        if x[i] > 0.0 {
                            d[i] += g[i];
                        }
                    }
                }
            }
            Op::Sigmoid(a) => {
                if self.wants(*a) {
                    let y = node.value.data();
                    let d = slot!(*a);
                    for i in 0..g.len() {
                        d[i] += g[i] * y[i] * (1.0 - y[i]);
                    }
                }
            }
            Op::Softmax(a) => {
                if self.wants(*a) {
                    let k = node.value.shape()[1];
                    let y = node.value.data();
                    let d = slot!(*a);
                    for ((yr, gr), dr) in y.chunks(k).zip(g.chunks(k)).zip(d.chunks_mut(k)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..k {
                            dr[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::Dense {
                input,
                weight,
                bias,
            } => {
                let x = self.value(*input);
                let w = self.value(*weight);
                let (batch, n, m) = (x.shape()[0], x.shape()[1], w.shape()[1]);
                if self.wants(*input) {
                    gemm(batch, m, n, g, Layout::Normal, w.data(), Layout::Transposed, 1.0, slot!(*input));
                }
                if self.wants(*weight) {
                    gemm(n, batch, m, x.data(), Layout::Transposed, g, Layout::Normal, 1.0, slot!(*weight));
                }
                if self.wants(*bias) {
                    let d = slot!(*bias);
                    for row in g.chunks(m) {
                        d.iter_mut().zip(row).for_each(|(d, s)| *d += s);
                    }
                }
            }
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            } => {
                let plane = geom.plane();
                let sample_out = geom.out_ch * plane;
                let sample_in = geom.in_ch * geom.h * geom.w;
                if self.wants(*bias) {
                    let d = slot!(*bias);
                    for gb in g.chunks(sample_out) {
                        for (o, row) in gb.chunks(plane).enumerate() {
                            d[o] += row.iter().sum::<f64>();
                        }
                    }
                }
                if self.wants(*kernel) {
                    // The patch matrix is rebuilt per sample rather than kept
                    // from the forward pass.
                    let x = self.value(*input).data();
                    let mut cols = vec![0.0; geom.patch_len() * plane];
                    let mut dk = vec![0.0; geom.out_ch * geom.patch_len()];
                    for (bi, gb) in g.chunks(sample_out).enumerate() {
                        geom.im2col(&x[bi * sample_in..][..sample_in], &mut cols);
                        gemm(
                            geom.out_ch,
                            plane,
                            geom.patch_len(),
                            gb,
                            Layout::Normal,
                            &cols,
                            Layout::Transposed,
                            1.0,
                            &mut dk,
                        );
                    }
                    slot!(*kernel).iter_mut().zip(&dk).for_each(|(d, s)| *d += s);
                }
                if self.wants(*input) {
                    let k = self.value(*kernel).data();
                    let mut dcols = vec![0.0; geom.patch_len() * plane];
                    let d = slot!(*input);
                    for (bi, gb) in g.chunks(sample_out).enumerate() {
                        gemm(
                            geom.patch_len(),
                            geom.out_ch,
                            plane,
                            k,
                            Layout::Transposed,
                            gb,
                            Layout::Normal,
                            0.0,
                            &mut dcols,
                        );
                        geom.col2im(&dcols, &mut d[bi * sample_in..][..sample_in]);
                    }
                }
            }
            Op::MaxPool2d { input, argmax } => {
                if self.wants(*input) {
                    let d = slot!(*input);
                    for (&src, gi) in argmax.iter().zip(g) {
                        d[src] += gi;
                    }
                }
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                spatial,
                batch_stats,
            } => {
                let shape = node.value.shape();
                let (batch, ch, spatial) = (shape[0], shape[1], *spatial);
                let gm = self.value(*gamma).data();
                let mut sum_dy = vec![0.0; ch];
                let mut sum_dy_xhat = vec![0.0; ch];
                for b in 0..batch {
                    for c in 0..ch {
                        let off = (b * ch + c) * spatial;
                        for i in off..off + spatial {
                            sum_dy[c] += g[i];
                            sum_dy_xhat[c] += g[i] * xhat[i];
                        }
                    }
                }
                if self.wants(*gamma) {
                    slot!(*gamma).iter_mut().zip(&sum_dy_xhat).for_each(|(d, s)| *d += s);
                }
                if self.wants(*beta) {
                    slot!(*beta).iter_mut().zip(&sum_dy).for_each(|(d, s)| *d += s);
                }
                if self.wants(*input) {
                    let d = slot!(*input);
                    let count = (batch * spatial) as f64;
                    for b in 0..batch {
                        for c in 0..ch {
                            let off = (b * ch + c) * spatial;
                            let scale = gm[c] * inv_std[c];
                            for i in off..off + spatial {
                                d[i] += if *batch_stats {
                                    scale * (g[i] - sum_dy[c] / count - xhat[i] * sum_dy_xhat[c] / count)
                                } else {
                                    scale * g[i]
                                };
                            }
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.shape()[1];
                let batch = node.value.shape()[0];
                let mut offset = 0;
                for &p in parts {
                    let wd = self.value(p).shape()[1];
                    if self.wants(p) {
                        let d = slot!(p);
                        for b in 0..batch {
                            let src = &g[b * total + offset..][..wd];
                            d[b * wd..(b + 1) * wd].iter_mut().zip(src).for_each(|(d, s)| *d += s);
                        }
                    }
                    offset += wd;
                }
            }
            Op::BinaryCrossEntropy { probs, targets } => {
                if self.wants(*probs) {
                    let p = self.value(*probs);
                    let batch = p.shape()[0] as f64;
                    let d = slot!(*probs);
                    for ((d, &p), &t) in d.iter_mut().zip(p.data()).zip(targets) {
                        let pc = clamp_prob(p);
                        if pc == p {
                            *d -= g[0] * (t / p - (1.0 - t) / (1.0 - p)) / batch;
                        }
                    }
                }
            }
            Op::LinearAgreement { probs, targets } => {
                if self.wants(*probs) {
                    let batch = self.value(*probs).shape()[0] as f64;
                    let d = slot!(*probs);
                    for (d, &t) in d.iter_mut().zip(targets) {
                        *d -= g[0] * (2.0 * t - 1.0) / batch;
                    }
                }
            }
            Op::CrossEntropy { probs, labels } => {
                if self.wants(*probs) {
                    let p = self.value(*probs);
                    let (batch, k) = (p.shape()[0], p.shape()[1]);
                    let pd = p.data();
                    let d = slot!(*probs);
                    for (i, &l) in labels.iter().enumerate() {
                        let v = pd[i * k + l];
                        if clamp_prob(v) == v {
                            d[i * k + l] -= g[0] / (batch as f64 * v);
                        }
                    }
                }
            }
        }
    }
}

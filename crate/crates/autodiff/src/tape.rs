//! The recording tape. Every forward op appends a node holding its output
//! value and what it needs for the backward rule; [`Tape::backward`] walks
//! the nodes in reverse.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use crate::error::{shape_err, Error, Result};
use crate::gemm::{gemm, View};
use crate::params::{ParamId, ParamSet};
use crate::tensor::Tensor;

pub const SELU_ALPHA: f64 = 1.673_263_242_354_377_3;
pub const SELU_SCALE: f64 = 1.050_700_987_355_480_5;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Running statistics of a batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormState {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNormState {
    pub fn new(channels: usize) -> Self {
        Self {
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: 0.1,
            eps: 1e-5,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias {
        x: Var,
        bias: Var,
        outer: usize,
        channels: usize,
        inner: usize,
    },
    Sum(Var),
    Selu(Var),
    Reshape(Var),
    Permute {
        x: Var,
        axes: Vec<usize>,
    },
    Matmul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        trans_b: bool,
    },
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    MeanAxis {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    Conv2d {
        x: Var,
        w: Var,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    Depthwise {
        x: Var,
        w: Var,
        k: usize,
        pad: usize,
    },
    Pointwise {
        x: Var,
        w: Var,
    },
    MaxPool2 {
        x: Var,
        argmax: Vec<usize>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn selu(x: f64) -> f64 {
    if x > 0.0 {
        SELU_SCALE * x
    } else {
        SELU_SCALE * SELU_ALPHA * x.exp_m1()
    }
}

fn selu_grad(x: f64) -> f64 {
    if x > 0.0 {
        SELU_SCALE
    } else {
        SELU_SCALE * SELU_ALPHA * x.exp()
    }
}

fn permute_data(data: &[f64], shape: &[usize], axes: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let rank = shape.len();
    let mut strides = vec![1; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        strides[d] = strides[d + 1] * shape[d + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&a| strides[a]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..data.len() {
        out.push(data[offset]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            offset += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            offset -= src_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    (out, out_shape)
}

#[allow(clippy::too_many_arguments)]
fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let plane = g.ho * g.wo;
    for c in 0..g.cin {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        dst[oy * g.wo + ox] = if iy >= 0 && ix >= 0 && (iy as usize) < g.h && (ix as usize) < g.w {
                            x[(c * g.h + iy as usize) * g.w + ix as usize]
                        } else {
                            0.0
                        };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let plane = g.ho * g.wo;
    for c in 0..g.cin {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy as usize >= g.h {
                        continue;
                    }
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            dx[(c * g.h + iy as usize) * g.w + ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Normalizes `rows` groups of `len` strided values in place, returning
/// `(xhat, inv_std)` per group. Used by layer norm (contiguous groups).
fn normalize_rows(x: &[f64], len: usize, eps: f64) -> (Vec<f64>, Vec<f64>) {
    let mut xhat = Vec::with_capacity(x.len());
    let mut inv = Vec::with_capacity(x.len() / len);
    for row in x.chunks_exact(len) {
        let mean = row.iter().sum::<f64>() / len as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / len as f64;
        let inv_std = 1.0 / (var + eps).sqrt();
        xhat.extend(row.iter().map(|v| (v - mean) * inv_std));
        inv.push(inv_std);
    }
    (xhat, inv)
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
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Records a copy of a parameter; backward routes its gradient back to `params`.
    pub fn param(&mut self, params: &ParamSet, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: params.get(id).value.clone(),
            op: Op::Param(id),
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Digest of every non-smooth branch taken so far: SELU input signs and
    /// max-pool winners. Two passes with equal digests took the same linear
    /// pieces, so finite differences between them see no kink.
    pub fn branch_digest(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for node in &self.nodes {
            match &node.op {
                Op::Selu(a) => {
                    for v in self.nodes[a.0].value.data() {
                        (*v > 0.0).hash(&mut h);
                    }
                }
                Op::MaxPool2 { argmax, .. } => argmax.hash(&mut h),
                _ => {}
            }
        }
        h.finish()
    }

    /// Gradient of the last backward pass with respect to `v`, if any flowed.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.value(a), self.value(b))?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x + y).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mul", self.value(a), self.value(b))?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x * y).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(t, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let data = self.value(a).data().iter().map(|x| x * s).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data).unwrap();
        self.push(t, Op::Scale(a, s), &[a])
    }

    /// Adds a `[shape[axis]]` bias vector along `axis`.
    pub fn add_bias(&mut self, x: Var, bias: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || self.shape(bias) != [shape[axis]] {
            return Err(shape_err(
                "add_bias",
                format!("bias {:?} along axis {axis} of {:?}", self.shape(bias), shape),
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let channels = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let b = self.value(bias).data();
        let mut data = self.value(x).data().to_vec();
        for o in 0..outer {
            for c in 0..channels {
                let start = (o * channels + c) * inner;
                data[start..start + inner].iter_mut().for_each(|v| *v += b[c]);
            }
        }
        let t = Tensor::new(shape, data)?;
        Ok(self.push(
            t,
            Op::AddBias {
                x,
                bias,
                outer,
                channels,
                inner,
            },
            &[x, bias],
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn selu(&mut self, a: Var) -> Var {
        let data = self.value(a).data().iter().map(|&x| selu(x)).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data).unwrap();
        self.push(t, Op::Selu(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.value(a).numel() {
            return Err(shape_err("reshape", format!("{:?} into {:?}", self.shape(a), shape)));
        }
        let t = Tensor::new(shape, self.value(a).data().to_vec())?;
        Ok(self.push(t, Op::Reshape(a), &[a]))
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&d| d >= shape.len() || std::mem::replace(&mut seen[d], true)) {
            return Err(shape_err("permute", format!("axes {axes:?} for shape {shape:?}")));
        }
        let (data, out_shape) = permute_data(self.value(a).data(), &shape, axes);
        let t = Tensor::new(out_shape, data)?;
        Ok(self.push(
            t,
            Op::Permute {
                x: a,
                axes: axes.to_vec(),
            },
            &[a],
        ))
    }

    /// `[m, k] x [k, n]` matrix product.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", format!("{sa:?} x {sb:?}")));
        }
        self.matmul_impl(a, b, 1, sa[0], sa[1], sb[1], false, vec![sa[0], sb[1]])
    }

    /// Batched product `[batch, m, k] x [batch, k, n]`, or with `trans_b`
    /// `[batch, m, k] x [batch, n, k]^T`.
    pub fn batched_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let ok = sa.len() == 3 && sb.len() == 3 && sa[0] == sb[0] && {
            if trans_b {
                sa[2] == sb[2]
            } else {
                sa[2] == sb[1]
            }
        };
        if !ok {
            return Err(shape_err(
                "batched_matmul",
                format!("{sa:?} x {sb:?}{}", if trans_b { "^T" } else { "" }),
            ));
        }
        let n = if trans_b { sb[1] } else { sb[2] };
        self.matmul_impl(a, b, sa[0], sa[1], sa[2], n, trans_b, vec![sa[0], sa[1], n])
    }

    #[allow(clippy::too_many_arguments)]
    fn matmul_impl(
        &mut self,
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        trans_b: bool,
        out_shape: Vec<usize>,
    ) -> Result<Var> {
        let mut out = vec![0.0; batch * m * n];
        {
            let (ad, bd) = (self.value(a).data(), self.value(b).data());
            for i in 0..batch {
                let av = View::row_major(&ad[i * m * k..(i + 1) * m * k], m, k);
                let bv = if trans_b {
                    View::row_major(&bd[i * n * k..(i + 1) * n * k], n, k).t()
                } else {
                    View::row_major(&bd[i * k * n..(i + 1) * k * n], k, n)
                };
                gemm(av, bv, &mut out[i * m * n..(i + 1) * m * n], 0.0);
            }
        }
        let t = Tensor::new(out_shape, out)?;
        Ok(self.push(
            t,
            Op::Matmul {
                a,
                b,
                batch,
                m,
                k,
                n,
                trans_b,
            },
            &[a, b],
        ))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let len = *shape.last().ok_or_else(|| shape_err("softmax", "scalar input"))?;
        let mut data = self.value(a).data().to_vec();
        for row in data.chunks_exact_mut(len) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                z += *v;
            }
            row.iter_mut().for_each(|v| *v /= z);
        }
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t, Op::Softmax(a), &[a]))
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| shape_err("layer_norm", "scalar input"))?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(shape_err(
                "layer_norm",
                format!("gamma {:?} / beta {:?} for input {:?}", self.shape(gamma), self.shape(beta), shape),
            ));
        }
        let (xhat, inv_std) = normalize_rows(self.value(x).data(), d, eps);
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let data = xhat.iter().enumerate().map(|(i, v)| v * g[i % d] + b[i % d]).collect();
        let t = Tensor::new(shape, data)?;
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        ))
    }

    /// Mean over `axis`, which is removed from the shape.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || shape[axis] == 0 {
            return Err(shape_err("mean_axis", format!("axis {axis} of {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for a in 0..len {
                let row = &src[(o * len + a) * inner..(o * len + a + 1) * inner];
                for (acc, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc += v;
                }
            }
        }
        out.iter_mut().for_each(|v| *v /= len as f64);
        let mut out_shape = shape;
        out_shape.remove(axis);
        let t = Tensor::new(out_shape, out)?;
        Ok(self.push(t, Op::MeanAxis { x, outer, len, inner }, &[x]))
    }

    /// Cross-correlation of `[n, cin, h, w]` with `[cout, cin, kh, kw]`
    /// kernels, explicit stride and zero padding.
    pub fn strided_conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] || stride == 0 {
            return Err(shape_err("strided_conv2d", format!("input {sx:?}, kernel {sw:?}, stride {stride}")));
        }
        let (hp, wp) = (sx[2] + 2 * pad, sx[3] + 2 * pad);
        if sw[2] > hp || sw[3] > wp {
            return Err(shape_err("strided_conv2d", format!("kernel {sw:?} larger than padded input {sx:?}")));
        }
        let geom = ConvGeom {
            n: sx[0],
            cin: sx[1],
            h: sx[2],
            w: sx[3],
            cout: sw[0],
            kh: sw[2],
            kw: sw[3],
            stride,
            pad,
            ho: (hp - sw[2]) / stride + 1,
            wo: (wp - sw[3]) / stride + 1,
        };
        let krows = geom.cin * geom.kh * geom.kw;
        let plane = geom.ho * geom.wo;
        let in_size = geom.cin * geom.h * geom.w;
        let mut cols = vec![0.0; geom.n * krows * plane];
        let mut out = vec![0.0; geom.n * geom.cout * plane];
        {
            let (xd, wd) = (self.value(x).data(), self.value(w).data());
            let wv = View::row_major(wd, geom.cout, krows);
            for i in 0..geom.n {
                let c = &mut cols[i * krows * plane..(i + 1) * krows * plane];
                im2col(&xd[i * in_size..(i + 1) * in_size], &geom, c);
                gemm(
                    wv,
                    View::row_major(c, krows, plane),
                    &mut out[i * geom.cout * plane..(i + 1) * geom.cout * plane],
                    0.0,
                );
            }
        }
        let t = Tensor::new(vec![geom.n, geom.cout, geom.ho, geom.wo], out)?;
        Ok(self.push(t, Op::Conv2d { x, w, geom, cols }, &[x, w]))
    }

    /// Per-channel `k x k` convolution with `[c, 1, k, k]` kernels, stride 1.
    pub fn depthwise_conv2d(&mut self, x: Var, w: Var, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sw[0] != sx[1] || sw[1] != 1 || sw[2] != sw[3] || sw[2] != 2 * pad + 1 {
            return Err(shape_err(
                "depthwise_conv2d",
                format!("input {sx:?}, kernel {sw:?}, padding {pad} (same-size output required)"),
            ));
        }
        let (n, c, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let k = sw[2];
        let (xs, ws) = (self.value(x).data(), self.value(w).data());
        let mut out = vec![0.0; xs.len()];
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * h * wd;
                let kern = &ws[ch * k * k..(ch + 1) * k * k];
                for y in 0..h {
                    for xx in 0..wd {
                        let mut acc = 0.0;
                        for ki in 0..k {
                            let iy = (y + ki) as isize - pad as isize;
                            if iy < 0 || iy as usize >= h {
                                continue;
                            }
                            for kj in 0..k {
                                let ix = (xx + kj) as isize - pad as isize;
                                if ix >= 0 && (ix as usize) < wd {
                                    acc += kern[ki * k + kj] * xs[base + iy as usize * wd + ix as usize];
                                }
                            }
                        }
                        out[base + y * wd + xx] = acc;
                    }
                }
            }
        }
        let t = Tensor::new(sx, out)?;
        Ok(self.push(t, Op::Depthwise { x, w, k, pad }, &[x, w]))
    }

    /// 1x1 convolution: `[n, cin, h, w]` mixed by a `[cout, cin]` matrix.
    pub fn pointwise_conv2d(&mut self, x: Var, w: Var) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 2 || sw[1] != sx[1] {
            return Err(shape_err("pointwise_conv2d", format!("input {sx:?}, kernel {sw:?}")));
        }
        let (n, cin, plane, cout) = (sx[0], sx[1], sx[2] * sx[3], sw[0]);
        let mut out = vec![0.0; n * cout * plane];
        {
            let (xd, wd) = (self.value(x).data(), self.value(w).data());
            for i in 0..n {
                gemm(
                    View::row_major(wd, cout, cin),
                    View::row_major(&xd[i * cin * plane..(i + 1) * cin * plane], cin, plane),
                    &mut out[i * cout * plane..(i + 1) * cout * plane],
                    0.0,
                );
            }
        }
        let t = Tensor::new(vec![n, cout, sx[2], sx[3]], out)?;
        Ok(self.push(t, Op::Pointwise { x, w }, &[x, w]))
    }

    /// 2x2 max pooling with stride 2; odd trailing rows and columns are dropped.
    pub fn maxpool2x2(&mut self, x: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 4 || sx[2] < 2 || sx[3] < 2 {
            return Err(shape_err("maxpool2x2", format!("input {sx:?} needs rank 4 and sides >= 2")));
        }
        let (n, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let (ho, wo) = (h / 2, w / 2);
        let xs = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * ho * wo);
        let mut argmax = Vec::with_capacity(n * c * ho * wo);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if xs[idx] > xs[best] {
                            best = idx;
                        }
                    }
                    out.push(xs[best]);
                    argmax.push(best);
                }
            }
        }
        let t = Tensor::new(vec![n, c, ho, wo], out)?;
        Ok(self.push(t, Op::MaxPool2 { x, argmax }, &[x]))
    }

    fn bn_check(&self, x: Var, gamma: Var, beta: Var, state: &BatchNormState) -> Result<(usize, usize, usize)> {
        let sx = self.shape(x);
        if sx.len() < 2 {
            return Err(shape_err("batch_norm", format!("input {sx:?} has no channel axis")));
        }
        let c = sx[1];
        if self.shape(gamma) != [c] || self.shape(beta) != [c] || state.running_mean.len() != c {
            return Err(shape_err(
                "batch_norm",
                format!(
                    "input {sx:?} with gamma {:?}, beta {:?}, {} running channels",
                    self.shape(gamma),
                    self.shape(beta),
                    state.running_mean.len()
                ),
            ));
        }
        Ok((sx[0], c, sx[2..].iter().product()))
    }

    fn bn_finish(&mut self, x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64>, train: bool) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (c, inner) = (shape[1], shape[2..].iter().product::<usize>());
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let data = xhat
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let ch = (i / inner) % c;
                v * g[ch] + b[ch]
            })
            .collect();
        let t = Tensor::new(shape, data)?;
        Ok(self.push(
            t,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
            &[x, gamma, beta],
        ))
    }

    /// Batch normalization over every axis but 1, using batch statistics and
    /// updating the running averages.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, state: &mut BatchNormState) -> Result<Var> {
        let (n, c, inner) = self.bn_check(x, gamma, beta, state)?;
        let count = n * inner;
        let xs = self.value(x).data();
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for b in 0..n {
            for ch in 0..c {
                let s = &xs[(b * c + ch) * inner..(b * c + ch + 1) * inner];
                mean[ch] += s.iter().sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|m| *m /= count as f64);
        for b in 0..n {
            for ch in 0..c {
                let s = &xs[(b * c + ch) * inner..(b * c + ch + 1) * inner];
                var[ch] += s.iter().map(|v| (v - mean[ch]) * (v - mean[ch])).sum::<f64>();
            }
        }
        var.iter_mut().for_each(|v| *v /= count as f64);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + state.eps).sqrt()).collect();
        let xhat = xs
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let ch = (i / inner) % c;
                (v - mean[ch]) * inv_std[ch]
            })
            .collect();
        let m = state.momentum;
        let unbias = if count > 1 { count as f64 / (count - 1) as f64 } else { 1.0 };
        for ch in 0..c {
            state.running_mean[ch] = (1.0 - m) * state.running_mean[ch] + m * mean[ch];
            state.running_var[ch] = (1.0 - m) * state.running_var[ch] + m * var[ch] * unbias;
        }
        self.bn_finish(x, gamma, beta, xhat, inv_std, true)
    }

    /// Batch normalization with the running statistics.
    pub fn batch_norm_eval(&mut self, x: Var, gamma: Var, beta: Var, state: &BatchNormState) -> Result<Var> {
        let (_, c, inner) = self.bn_check(x, gamma, beta, state)?;
        let inv_std: Vec<f64> = state.running_var.iter().map(|v| 1.0 / (v + state.eps).sqrt()).collect();
        let xhat = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let ch = (i / inner) % c;
                (v - state.running_mean[ch]) * inv_std[ch]
            })
            .collect();
        self.bn_finish(x, gamma, beta, xhat, inv_std, false)
    }

    /// Mean cross-entropy of `[n, classes]` logits against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() || s[0] == 0 {
            return Err(shape_err(
                "cross_entropy",
                format!("logits {s:?} with {} labels", labels.len()),
            ));
        }
        let classes = s[1];
        if let Some(l) = labels.iter().find(|&&l| l >= classes) {
            return Err(shape_err("cross_entropy", format!("label {l} with {classes} classes")));
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut loss = 0.0;
        for (row, &label) in probs.chunks_exact_mut(classes).zip(labels) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            loss += z.ln() + max - row[label];
            row.iter_mut().for_each(|v| *v = (*v - max).exp() / z);
        }
        let t = Tensor::scalar(loss / labels.len() as f64);
        Ok(self.push(
            t,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Reverse pass from a scalar `loss`. Node gradients are recomputed from
    /// scratch on every call.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let Tape { nodes, grads } = self;
        grads.clear();
        grads.resize(nodes.len(), None);
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if nodes[i].requires_grad {
                backward_node(nodes, grads, i, &g);
            }
            grads[i] = Some(g);
        }
        Ok(())
    }

    /// Backward pass that also adds every parameter gradient into `params`.
    pub fn backward_params(&mut self, loss: Var, params: &mut ParamSet) -> Result<()> {
        self.backward(loss)?;
        for (node, grad) in self.nodes.iter().zip(&self.grads) {
            if let (Op::Param(id), Some(g)) = (&node.op, grad) {
                let acc = &mut params.get_mut(*id).grad;
                acc.iter_mut().zip(g).for_each(|(a, b)| *a += b);
            }
        }
        Ok(())
    }
}

fn acc<'g>(nodes: &[Node], grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let n = nodes[v.0].value.numel();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
}

fn add_into(nodes: &[Node], grads: &mut [Option<Vec<f64>>], v: Var, g: &[f64]) {
    if let Some(dst) = acc(nodes, grads, v) {
        dst.iter_mut().zip(g).for_each(|(a, b)| *a += b);
    }
}

fn backward_node(nodes: &[Node], grads: &mut [Option<Vec<f64>>], i: usize, g: &[f64]) {
    let val = |v: Var| nodes[v.0].value.data();
    match &nodes[i].op {
        Op::Leaf | Op::Param(_) => {}
        Op::Add(a, b) => {
            add_into(nodes, grads, *a, g);
            add_into(nodes, grads, *b, g);
        }
        Op::Mul(a, b) => {
            if let Some(d) = acc(nodes, grads, *a) {
                for ((d, g), y) in d.iter_mut().zip(g).zip(val(*b)) {
                    *d += g * y;
                }
            }
            if let Some(d) = acc(nodes, grads, *b) {
                for ((d, g), x) in d.iter_mut().zip(g).zip(val(*a)) {
                    *d += g * x;
                }
            }
        }
        Op::Scale(a, s) => {
            if let Some(d) = acc(nodes, grads, *a) {
                d.iter_mut().zip(g).for_each(|(d, g)| *d += s * g);
            }
        }
        Op::AddBias {
            x,
            bias,
            outer,
            channels,
            inner,
        } => {
            add_into(nodes, grads, *x, g);
            if let Some(d) = acc(nodes, grads, *bias) {
                for o in 0..*outer {
                    for (c, dc) in d.iter_mut().enumerate() {
                        let start = (o * channels + c) * inner;
                        *dc += g[start..start + inner].iter().sum::<f64>();
                    }
                }
            }
        }
        Op::Sum(a) => {
            if let Some(d) = acc(nodes, grads, *a) {
                d.iter_mut().for_each(|d| *d += g[0]);
            }
        }
        Op::Selu(a) => {
            if let Some(d) = acc(nodes, grads, *a) {
                for ((d, g), x) in d.iter_mut().zip(g).zip(val(*a)) {
                    *d += g * selu_grad(*x);
                }
            }
        }
        Op::Reshape(a) => add_into(nodes, grads, *a, g),
        Op::Permute { x, axes } => {
            let mut inverse = vec![0; axes.len()];
            for (k, &a) in axes.iter().enumerate() {
                inverse[a] = k;
            }
            let (back, _) = permute_data(g, nodes[i].value.shape(), &inverse);
            add_into(nodes, grads, *x, &back);
        }
        Op::Matmul {
            a,
            b,
            batch,
            m,
            k,
            n,
            trans_b,
        } => {
            let (m, k, n) = (*m, *k, *n);
            let (ad, bd) = (val(*a), val(*b));
            if let Some(da) = acc(nodes, grads, *a) {
                for t in 0..*batch {
                    let gv = View::row_major(&g[t * m * n..(t + 1) * m * n], m, n);
                    // dA = dC * B'^T, where B' = B or B^T
                    let bt = if *trans_b {
                        View::row_major(&bd[t * n * k..(t + 1) * n * k], n, k)
                    } else {
                        View::row_major(&bd[t * k * n..(t + 1) * k * n], k, n).t()
                    };
                    gemm(gv, bt, &mut da[t * m * k..(t + 1) * m * k], 1.0);
                }
            }
            if let Some(db) = acc(nodes, grads, *b) {
                for t in 0..*batch {
                    let gv = View::row_major(&g[t * m * n..(t + 1) * m * n], m, n);
                    let av = View::row_major(&ad[t * m * k..(t + 1) * m * k], m, k);
                    if *trans_b {
                        // dB (n x k) = dC^T A
                        gemm(gv.t(), av, &mut db[t * n * k..(t + 1) * n * k], 1.0);
                    } else {
                        // dB (k x n) = A^T dC
                        gemm(av.t(), gv, &mut db[t * k * n..(t + 1) * k * n], 1.0);
                    }
                }
            }
        }
        Op::Softmax(a) => {
            if let Some(d) = acc(nodes, grads, *a) {
                let y = nodes[i].value.data();
                let len = *nodes[i].value.shape().last().unwrap();
                for ((drow, grow), yrow) in d.chunks_exact_mut(len).zip(g.chunks_exact(len)).zip(y.chunks_exact(len)) {
                    let dot: f64 = grow.iter().zip(yrow).map(|(g, y)| g * y).sum();
                    for ((d, g), y) in drow.iter_mut().zip(grow).zip(yrow) {
                        *d += y * (g - dot);
                    }
                }
            }
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
        } => {
            let gam = val(*gamma);
            let len = gam.len();
            if let Some(dg) = acc(nodes, grads, *gamma) {
                for (k, (g, xh)) in g.iter().zip(xhat).enumerate() {
                    dg[k % len] += g * xh;
                }
            }
            if let Some(db) = acc(nodes, grads, *beta) {
                for (k, g) in g.iter().enumerate() {
                    db[k % len] += g;
                }
            }
            if let Some(dx) = acc(nodes, grads, *x) {
                let mut dxhat = vec![0.0; len];
                for (r, inv) in inv_std.iter().enumerate() {
                    let (gr, xr) = (&g[r * len..(r + 1) * len], &xhat[r * len..(r + 1) * len]);
                    for j in 0..len {
                        dxhat[j] = gr[j] * gam[j];
                    }
                    let s1: f64 = dxhat.iter().sum();
                    let s2: f64 = dxhat.iter().zip(xr).map(|(a, b)| a * b).sum();
                    let dr = &mut dx[r * len..(r + 1) * len];
                    for j in 0..len {
                        dr[j] += inv / len as f64 * (len as f64 * dxhat[j] - s1 - xr[j] * s2);
                    }
                }
            }
        }
        Op::MeanAxis { x, outer, len, inner } => {
            if let Some(dx) = acc(nodes, grads, *x) {
                let scale = 1.0 / *len as f64;
                for o in 0..*outer {
                    let go = &g[o * inner..(o + 1) * inner];
                    for a in 0..*len {
                        let start = (o * len + a) * inner;
                        for (d, g) in dx[start..start + inner].iter_mut().zip(go) {
                            *d += g * scale;
                        }
                    }
                }
            }
        }
        Op::Conv2d { x, w, geom, cols } => {
            let krows = geom.cin * geom.kh * geom.kw;
            let plane = geom.ho * geom.wo;
            let out_size = geom.cout * plane;
            if let Some(dw) = acc(nodes, grads, *w) {
                for n in 0..geom.n {
                    gemm(
                        View::row_major(&g[n * out_size..(n + 1) * out_size], geom.cout, plane),
                        View::row_major(&cols[n * krows * plane..(n + 1) * krows * plane], krows, plane).t(),
                        dw,
                        1.0,
                    );
                }
            }
            let wd = val(*w);
            if let Some(dx) = acc(nodes, grads, *x) {
                let in_size = geom.cin * geom.h * geom.w;
                let mut dcols = vec![0.0; krows * plane];
                for n in 0..geom.n {
                    gemm(
                        View::row_major(wd, geom.cout, krows).t(),
                        View::row_major(&g[n * out_size..(n + 1) * out_size], geom.cout, plane),
                        &mut dcols,
                        0.0,
                    );
                    col2im(&dcols, geom, &mut dx[n * in_size..(n + 1) * in_size]);
                }
            }
        }
        Op::Depthwise { x, w, k, pad } => {
            let shape = nodes[x.0].value.shape();
            let (n, c, h, wd) = (shape[0], shape[1], shape[2], shape[3]);
            let (k, pad) = (*k, *pad as isize);
            let (xs, ws) = (val(*x), val(*w));
            let mut dw = acc(nodes, grads, *w).map(std::mem::take);
            let mut dx = acc(nodes, grads, *x).map(std::mem::take);
            for b in 0..n {
                for ch in 0..c {
                    let base = (b * c + ch) * h * wd;
                    for y in 0..h {
                        for xx in 0..wd {
                            let go = g[base + y * wd + xx];
                            if go == 0.0 {
                                continue;
                            }
                            for ki in 0..k {
                                let iy = (y + ki) as isize - pad;
                                if iy < 0 || iy as usize >= h {
                                    continue;
                                }
                                for kj in 0..k {
                                    let ix = (xx + kj) as isize - pad;
                                    if ix < 0 || ix as usize >= wd {
                                        continue;
                                    }
                                    let src = base + iy as usize * wd + ix as usize;
                                    let kidx = ch * k * k + ki * k + kj;
                                    if let Some(dw) = dw.as_mut() {
                                        dw[kidx] += go * xs[src];
                                    }
                                    if let Some(dx) = dx.as_mut() {
                                        dx[src] += go * ws[kidx];
                                    }
                                }
                            }
                        }
                    }
                }
            }
            if let Some(d) = dw {
                grads[w.0] = Some(d);
            }
            if let Some(d) = dx {
                grads[x.0] = Some(d);
            }
        }
        Op::Pointwise { x, w } => {
            let shape = nodes[x.0].value.shape();
            let (n, cin, plane) = (shape[0], shape[1], shape[2] * shape[3]);
            let cout = nodes[w.0].value.shape()[0];
            let (xs, ws) = (val(*x), val(*w));
            if let Some(dw) = acc(nodes, grads, *w) {
                for b in 0..n {
                    gemm(
                        View::row_major(&g[b * cout * plane..(b + 1) * cout * plane], cout, plane),
                        View::row_major(&xs[b * cin * plane..(b + 1) * cin * plane], cin, plane).t(),
                        dw,
                        1.0,
                    );
                }
            }
            if let Some(dx) = acc(nodes, grads, *x) {
                for b in 0..n {
                    gemm(
                        View::row_major(ws, cout, cin).t(),
                        View::row_major(&g[b * cout * plane..(b + 1) * cout * plane], cout, plane),
                        &mut dx[b * cin * plane..(b + 1) * cin * plane],
                        1.0,
                    );
                }
            }
        }
        Op::MaxPool2 { x, argmax } => {
            if let Some(dx) = acc(nodes, grads, *x) {
                for (g, &src) in g.iter().zip(argmax) {
                    dx[src] += g;
                }
            }
        }
        Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            train,
        } => {
            let shape = nodes[x.0].value.shape();
            let (n, c) = (shape[0], shape[1]);
            let inner: usize = shape[2..].iter().product();
            let count = (n * inner) as f64;
            let gam = val(*gamma);
            let mut sum_g = vec![0.0; c];
            let mut sum_gx = vec![0.0; c];
            for (k, (g, xh)) in g.iter().zip(xhat).enumerate() {
                let ch = (k / inner) % c;
                sum_g[ch] += g;
                sum_gx[ch] += g * xh;
            }
            if let Some(dg) = acc(nodes, grads, *gamma) {
                dg.iter_mut().zip(&sum_gx).for_each(|(d, s)| *d += s);
            }
            if let Some(db) = acc(nodes, grads, *beta) {
                db.iter_mut().zip(&sum_g).for_each(|(d, s)| *d += s);
            }
            if let Some(dx) = acc(nodes, grads, *x) {
                for (k, d) in dx.iter_mut().enumerate() {
                    let ch = (k / inner) % c;
                    let scale = gam[ch] * inv_std[ch];
                    *d += if *train {
                        scale * (g[k] - sum_g[ch] / count - xhat[k] * sum_gx[ch] / count)
                    } else {
                        scale * g[k]
                    };
                }
            }
        }
        Op::CrossEntropy { logits, labels, probs } => {
            if let Some(d) = acc(nodes, grads, *logits) {
                let classes = probs.len() / labels.len();
                let scale = g[0] / labels.len() as f64;
                for (r, &label) in labels.iter().enumerate() {
                    for c in 0..classes {
                        let k = r * classes + c;
                        let target = if c == label { 1.0 } else { 0.0 };
                        d[k] += scale * (probs[k] - target);
                    }
                }
            }
        }
    }
}

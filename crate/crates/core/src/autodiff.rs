//! Reverse-mode automatic differentiation over a per-forward-pass tape.
//!
//! A [`Tape`] records every operation applied to its [`Var`]s in creation
//! order, so reverse creation order is a valid topological order for the
//! backward sweep. Tapes are cheap to build and are discarded after each
//! forward/backward pass; parameters live outside the tape as plain
//! [`Tensor`]s and are re-registered as leaves on every pass.
//!
//! Images and feature maps use NHWC layout throughout.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Zero padding applied around the spatial axes of a convolution input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Padding {
    pub top: usize,
    pub left: usize,
    pub bottom: usize,
    pub right: usize,
}

impl Padding {
    pub const NONE: Padding = Padding {
        top: 0,
        left: 0,
        bottom: 0,
        right: 0,
    };

    /// "Same" padding for stride 1; odd totals put the extra row/column at the
    /// bottom/right.
    pub fn same(kernel_h: usize, kernel_w: usize) -> Padding {
        let th = kernel_h - 1;
        let tw = kernel_w - 1;
        Padding {
            top: th / 2,
            left: tw / 2,
            bottom: th - th / 2,
            right: tw - tw / 2,
        }
    }

    pub fn uniform(p: usize) -> Padding {
        Padding {
            top: p,
            left: p,
            bottom: p,
            right: p,
        }
    }
}

/// A fixed sparse linear operator applied along the leading axis of a
/// `[n_in, channels]` input, producing `[n_out, channels]`.
///
/// Row `o` of the output is `sum_t weights[t] * input[indices[t], :]` for
/// `t` in `row_ptr[o]..row_ptr[o + 1]`. Optional per-parameter weight
/// derivatives make the operator differentiable with respect to scalar
/// parameters that shaped it (the patch spacing of the sampler, for example).
#[derive(Clone, Debug, Default)]
pub struct SparseMap {
    pub n_in: usize,
    pub row_ptr: Vec<usize>,
    pub indices: Vec<u32>,
    pub weights: Vec<f32>,
    pub param_weights: Vec<Vec<f32>>,
}

impl SparseMap {
    pub fn n_out(&self) -> usize {
        self.row_ptr.len().saturating_sub(1)
    }

    /// `y = M x` for `x` viewed as `[n_in, channels]`.
    pub fn matvec(&self, input: &[f32], channels: usize) -> Vec<f32> {
        self.apply(&self.weights, input, channels)
    }

    /// `x = M^T y` for `y` viewed as `[n_out, channels]`.
    pub fn matvec_transpose(&self, output: &[f32], channels: usize) -> Vec<f32> {
        self.apply_transpose(output, channels)
    }

    fn apply(&self, weights: &[f32], input: &[f32], channels: usize) -> Vec<f32> {
        let mut out = vec![0.0f32; self.n_out() * channels];
        for o in 0..self.n_out() {
            let dst = &mut out[o * channels..(o + 1) * channels];
            for t in self.row_ptr[o]..self.row_ptr[o + 1] {
                let w = weights[t];
                let src = self.indices[t] as usize * channels;
                for (d, s) in dst.iter_mut().zip(&input[src..src + channels]) {
                    *d += w * s;
                }
            }
        }
        out
    }

    fn apply_transpose(&self, grad_out: &[f32], channels: usize) -> Vec<f32> {
        let mut g = vec![0.0f32; self.n_in * channels];
        for o in 0..self.n_out() {
            let src = &grad_out[o * channels..(o + 1) * channels];
            for t in self.row_ptr[o]..self.row_ptr[o + 1] {
                let w = self.weights[t];
                let dst = self.indices[t] as usize * channels;
                for (d, s) in g[dst..dst + channels].iter_mut().zip(src) {
                    *d += w * s;
                }
            }
        }
        g
    }
}

#[derive(Clone, Debug)]
struct ConvGeom {
    stride: usize,
    pad: Padding,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    AddScalar(Var),
    AddBias(Var, Var),
    MulBias(Var, Var),
    MatMul(Var, Var),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    MaxPool2 {
        input: Var,
        argmax: Rc<Vec<u32>>,
    },
    PoolGather {
        input: Var,
        argmax: Rc<Vec<u32>>,
    },
    Relu(Var),
    Tanh(Var),
    Exp(Var),
    Sqrt(Var),
    Reshape(Var),
    Slice {
        input: Var,
        axis: usize,
        start: usize,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Sum(Var),
    SumLast(Var),
    Upsample2(Var),
    Sparse {
        input: Var,
        params: Vec<Var>,
        map: Rc<SparseMap>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Operation recorder and reverse-mode gradient engine.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_strides: (isize, isize),
    b: &[f32],
    b_strides: (isize, isize),
    c: &mut [f32],
    beta: f32,
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(c.len() >= m * n);
    // SAFETY: callers pass slices whose extents cover the strided views
    // described by (m, k, n) and the given strides.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Rows of the im2col matrix processed per GEMM call, bounding scratch memory.
const CONV_CHUNK_ROWS: usize = 8192;

struct ConvDims {
    batch: usize,
    h: usize,
    w: usize,
    ci: usize,
    kh: usize,
    kw: usize,
    co: usize,
    oh: usize,
    ow: usize,
}

impl ConvDims {
    fn patch_len(&self) -> usize {
        self.kh * self.kw * self.ci
    }
}

fn conv_dims(x: &[usize], w: &[usize], geom: &ConvGeom) -> Result<ConvDims> {
    if x.len() != 4 || w.len() != 4 {
        return Err(Error::Shape(format!(
            "conv2d expects NHWC input and [kh,kw,ci,co] weight, got {:?} and {:?}",
            x, w
        )));
    }
    if x[3] != w[2] {
        return Err(Error::Shape(format!(
            "conv2d input channels {} vs weight {:?}",
            x[3], w
        )));
    }
    let hp = x[1] + geom.pad.top + geom.pad.bottom;
    let wp = x[2] + geom.pad.left + geom.pad.right;
    if hp < w[0] || wp < w[1] || geom.stride == 0 {
        return Err(Error::Shape(format!(
            "conv2d kernel {:?} larger than padded input {:?}",
            w, x
        )));
    }
    Ok(ConvDims {
        batch: x[0],
        h: x[1],
        w: x[2],
        ci: x[3],
        kh: w[0],
        kw: w[1],
        co: w[3],
        oh: (hp - w[0]) / geom.stride + 1,
        ow: (wp - w[1]) / geom.stride + 1,
    })
}

/// Fills `cols` with im2col rows for output rows `row0..row0+rows`.
fn im2col(x: &[f32], d: &ConvDims, geom: &ConvGeom, row0: usize, rows: usize, cols: &mut [f32]) {
    let plen = d.patch_len();
    for r in 0..rows {
        let row = row0 + r;
        let b = row / (d.oh * d.ow);
        let rem = row % (d.oh * d.ow);
        let oy = rem / d.ow;
        let ox = rem % d.ow;
        let dst = &mut cols[r * plen..(r + 1) * plen];
        for ky in 0..d.kh {
            let iy = (oy * geom.stride + ky) as isize - geom.pad.top as isize;
            for kx in 0..d.kw {
                let ix = (ox * geom.stride + kx) as isize - geom.pad.left as isize;
                let off = (ky * d.kw + kx) * d.ci;
                let seg = &mut dst[off..off + d.ci];
                if iy < 0 || ix < 0 || iy >= d.h as isize || ix >= d.w as isize {
                    seg.fill(0.0);
                } else {
                    let src = ((b * d.h + iy as usize) * d.w + ix as usize) * d.ci;
                    seg.copy_from_slice(&x[src..src + d.ci]);
                }
            }
        }
    }
}

fn col2im(dcols: &[f32], d: &ConvDims, geom: &ConvGeom, row0: usize, rows: usize, dx: &mut [f32]) {
    let plen = d.patch_len();
    for r in 0..rows {
        let row = row0 + r;
        let b = row / (d.oh * d.ow);
        let rem = row % (d.oh * d.ow);
        let oy = rem / d.ow;
        let ox = rem % d.ow;
        let src = &dcols[r * plen..(r + 1) * plen];
        for ky in 0..d.kh {
            let iy = (oy * geom.stride + ky) as isize - geom.pad.top as isize;
            if iy < 0 || iy >= d.h as isize {
                continue;
            }
            for kx in 0..d.kw {
                let ix = (ox * geom.stride + kx) as isize - geom.pad.left as isize;
                if ix < 0 || ix >= d.w as isize {
                    continue;
                }
                let off = (ky * d.kw + kx) * d.ci;
                let dst = ((b * d.h + iy as usize) * d.w + ix as usize) * d.ci;
                for (o, s) in dx[dst..dst + d.ci].iter_mut().zip(&src[off..off + d.ci]) {
                    *o += s;
                }
            }
        }
    }
}

fn conv_forward(x: &Tensor, w: &Tensor, bias: Option<&Tensor>, geom: &ConvGeom) -> Result<Tensor> {
    let d = conv_dims(x.shape(), w.shape(), geom)?;
    if let Some(b) = bias {
        if b.len() != d.co {
            return Err(Error::Shape(format!("conv2d bias {:?} vs {} outputs", b.shape(), d.co)));
        }
    }
    let rows_total = d.batch * d.oh * d.ow;
    let plen = d.patch_len();
    let mut out = vec![0.0f32; rows_total * d.co];
    let chunk = (CONV_CHUNK_ROWS).max(1);
    let mut cols = vec![0.0f32; chunk.min(rows_total) * plen];
    let mut row0 = 0;
    while row0 < rows_total {
        let rows = chunk.min(rows_total - row0);
        im2col(x.data(), &d, geom, row0, rows, &mut cols);
        let dst = &mut out[row0 * d.co..(row0 + rows) * d.co];
        if let Some(b) = bias {
            for r in 0..rows {
                dst[r * d.co..(r + 1) * d.co].copy_from_slice(b.data());
            }
        }
        gemm(
            rows,
            plen,
            d.co,
            &cols,
            (plen as isize, 1),
            w.data(),
            (d.co as isize, 1),
            dst,
            if bias.is_some() { 1.0 } else { 0.0 },
        );
        row0 += rows;
    }
    Tensor::new(&[d.batch, d.oh, d.ow, d.co], out)
}

/// Returns (grad input, grad weight); each only when requested.
fn conv_backward(
    x: &Tensor,
    w: &Tensor,
    geom: &ConvGeom,
    dout: &Tensor,
    want_dx: bool,
    want_dw: bool,
) -> Result<(Option<Vec<f32>>, Option<Vec<f32>>)> {
    let d = conv_dims(x.shape(), w.shape(), geom)?;
    let rows_total = d.batch * d.oh * d.ow;
    let plen = d.patch_len();
    let chunk = CONV_CHUNK_ROWS.max(1);
    let mut cols = vec![0.0f32; chunk.min(rows_total) * plen];
    let mut dcols = if want_dx {
        vec![0.0f32; chunk.min(rows_total) * plen]
    } else {
        Vec::new()
    };
    let mut dx = want_dx.then(|| vec![0.0f32; x.len()]);
    let mut dw = want_dw.then(|| vec![0.0f32; w.len()]);
    let mut row0 = 0;
    while row0 < rows_total {
        let rows = chunk.min(rows_total - row0);
        let g = &dout.data()[row0 * d.co..(row0 + rows) * d.co];
        if let Some(dw) = dw.as_mut() {
            im2col(x.data(), &d, geom, row0, rows, &mut cols);
            // dW[plen, co] += cols^T [plen, rows] * g [rows, co]
            gemm(
                plen,
                rows,
                d.co,
                &cols,
                (1, plen as isize),
                g,
                (d.co as isize, 1),
                dw,
                1.0,
            );
        }
        if let Some(dx) = dx.as_mut() {
            // dcols[rows, plen] = g [rows, co] * W^T [co, plen]
            gemm(
                rows,
                d.co,
                plen,
                g,
                (d.co as isize, 1),
                w.data(),
                (1, d.co as isize),
                &mut dcols,
                0.0,
            );
            col2im(&dcols, &d, geom, row0, rows, dx);
        }
        row0 += rows;
    }
    Ok((dx, dw))
}

fn same_shape(op: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "{op}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn last_dim(t: &Tensor) -> usize {
    *t.shape().last().unwrap_or(&1)
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Leaf that receives a gradient on [`Tape::backward`].
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last [`Tape::backward`] root with respect to the leaf `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }

    fn binary(&mut self, a: Var, b: Var, name: &str, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(name, ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: f32) -> Var {
        let v = self.value(a).scaled(s);
        let rg = self.rg(&[a]);
        self.push(v, Op::Scale(a, s), rg)
    }

    pub fn add_scalar(&mut self, a: Var, s: f32) -> Var {
        let v = self.value(a).map(|x| x + s);
        let rg = self.rg(&[a]);
        self.push(v, Op::AddScalar(a), rg)
    }

    /// Adds a `[n]` vector along the last axis.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(b));
        let n = last_dim(tx);
        if tb.len() != n {
            return Err(Error::Shape(format!("add_bias: {:?} vs {:?}", tx.shape(), tb.shape())));
        }
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(n) {
            for (v, bv) in row.iter_mut().zip(tb.data()) {
                *v += bv;
            }
        }
        let v = Tensor::new(tx.shape(), data)?;
        let rg = self.rg(&[x, b]);
        Ok(self.push(v, Op::AddBias(x, b), rg))
    }

    /// Multiplies by a `[n]` vector along the last axis.
    pub fn mul_bias(&mut self, x: Var, s: Var) -> Result<Var> {
        let (tx, ts) = (self.value(x), self.value(s));
        let n = last_dim(tx);
        if ts.len() != n {
            return Err(Error::Shape(format!("mul_bias: {:?} vs {:?}", tx.shape(), ts.shape())));
        }
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(n) {
            for (v, sv) in row.iter_mut().zip(ts.data()) {
                *v *= sv;
            }
        }
        let v = Tensor::new(tx.shape(), data)?;
        let rg = self.rg(&[x, s]);
        Ok(self.push(v, Op::MulBias(x, s), rg))
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(Error::Shape(format!(
                "matmul: {:?} x {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = vec![0.0f32; m * n];
        gemm(m, k, n, ta.data(), (k as isize, 1), tb.data(), (n as isize, 1), &mut out, 0.0);
        let v = Tensor::new(&[m, n], out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::MatMul(a, b), rg))
    }

    /// `x W + b` for `x: [m, k]`, `W: [k, n]`, `b: [n]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, b)
    }

    /// 2-D convolution (cross-correlation) of an NHWC input with a
    /// `[kh, kw, ci, co]` kernel.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        pad: Padding,
    ) -> Result<Var> {
        let geom = ConvGeom { stride, pad };
        let v = conv_forward(
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b)),
            &geom,
        )?;
        let mut parents = vec![input, weight];
        parents.extend(bias);
        let rg = self.rg(&parents);
        Ok(self.push(
            v,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            },
            rg,
        ))
    }

    /// 2x2 max-pool with stride 2 (floor). Ties go to the first element in
    /// row-major order within the window.
    pub fn max_pool2(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let s = x.shape();
        if s.len() != 4 || s[1] < 2 || s[2] < 2 {
            return Err(Error::Shape(format!("max_pool2: {:?}", s)));
        }
        let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
        let (oh, ow) = (h / 2, w / 2);
        let mut out = vec![0.0f32; b * oh * ow * c];
        let mut argmax = vec![0u32; out.len()];
        let xd = x.data();
        for bi in 0..b {
            for oy in 0..oh {
                for ox in 0..ow {
                    for ch in 0..c {
                        let mut best = f32::NEG_INFINITY;
                        let mut best_i = 0usize;
                        for dy in 0..2 {
                            for dx in 0..2 {
                                let i = ((bi * h + 2 * oy + dy) * w + 2 * ox + dx) * c + ch;
                                if xd[i] > best || (dy == 0 && dx == 0) {
                                    best = xd[i];
                                    best_i = i;
                                }
                            }
                        }
                        let o = ((bi * oh + oy) * ow + ox) * c + ch;
                        out[o] = best;
                        argmax[o] = best_i as u32;
                    }
                }
            }
        }
        let v = Tensor::new(&[b, oh, ow, c], out)?;
        let rg = self.rg(&[input]);
        Ok(self.push(
            v,
            Op::MaxPool2 {
                input,
                argmax: Rc::new(argmax),
            },
            rg,
        ))
    }

    /// Gathers `input` at the arg-max positions chosen by an earlier
    /// [`Tape::max_pool2`] node. `input` may stack several copies of the pooled
    /// tensor along the batch axis; the selection repeats for each copy. This
    /// is the tangent map of the max-pool at a fixed primal.
    pub fn pool_gather(&mut self, input: Var, pool: Var) -> Result<Var> {
        let (argmax, pool_in_len, out_shape) = match &self.nodes[pool.0].op {
            Op::MaxPool2 { input: pin, argmax } => (
                argmax.clone(),
                self.value(*pin).len(),
                self.value(pool).shape().to_vec(),
            ),
            _ => return Err(Error::Invalid("pool_gather source is not a max_pool2 node".into())),
        };
        let x = self.value(input);
        if pool_in_len == 0 || x.len() % pool_in_len != 0 {
            return Err(Error::Shape(format!(
                "pool_gather: input {:?} is not a stack of the pooled input",
                x.shape()
            )));
        }
        let copies = x.len() / pool_in_len;
        let mut out = Vec::with_capacity(argmax.len() * copies);
        for k in 0..copies {
            let base = k * pool_in_len;
            out.extend(argmax.iter().map(|&i| x.data()[base + i as usize]));
        }
        let mut shape = out_shape;
        shape[0] *= copies;
        let v = Tensor::new(&shape, out)?;
        let rg = self.rg(&[input]);
        Ok(self.push(v, Op::PoolGather { input, argmax }, rg))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        let rg = self.rg(&[a]);
        self.push(v, Op::Relu(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f32::tanh);
        let rg = self.rg(&[a]);
        self.push(v, Op::Tanh(a), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f32::exp);
        let rg = self.rg(&[a]);
        self.push(v, Op::Exp(a), rg)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f32::sqrt);
        let rg = self.rg(&[a]);
        self.push(v, Op::Sqrt(a), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(v, Op::Reshape(a), rg))
    }

    /// `input[.., start..start+len, ..]` along `axis`.
    pub fn slice(&mut self, input: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let x = self.value(input);
        let s = x.shape().to_vec();
        if axis >= s.len() || start + len > s[axis] {
            return Err(Error::Shape(format!(
                "slice axis {axis} [{start}, {}) of {:?}",
                start + len,
                s
            )));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * s[axis] + start) * inner;
            out.extend_from_slice(&x.data()[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let v = Tensor::new(&shape, out)?;
        let rg = self.rg(&[input]);
        Ok(self.push(v, Op::Slice { input, axis, start }, rg))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Empty("concat of zero tensors".into()))?;
        let base_shape = self.shape(*first).to_vec();
        if axis >= base_shape.len() {
            return Err(Error::Shape(format!("concat axis {axis} of {:?}", base_shape)));
        }
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            let compatible = s.len() == base_shape.len()
                && s.iter()
                    .zip(&base_shape)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::Shape(format!("concat: {:?} vs {:?}", s, base_shape)));
            }
            total += s[axis];
        }
        let outer: usize = base_shape[..axis].iter().product();
        let inner: usize = base_shape[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let t = self.value(*p);
                let n = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * n..(o + 1) * n]);
            }
        }
        let mut shape = base_shape;
        shape[axis] = total;
        let v = Tensor::new(&shape, out)?;
        let rg = self.rg(parts);
        Ok(self.push(
            v,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Sum of all entries, as a one-element tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let s: f32 = self.value(a).data().iter().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1);
        let s = self.sum(a);
        self.scale(s, 1.0 / n as f32)
    }

    /// Sums over the last axis, dropping it.
    pub fn sum_last(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let n = last_dim(x);
        let data: Vec<f32> = x.data().chunks(n).map(|c| c.iter().sum()).collect();
        let mut shape = x.shape().to_vec();
        if shape.len() > 1 {
            shape.pop();
        } else {
            shape = vec![1];
        }
        let v = Tensor::new(&shape, data).expect("sum_last shape");
        let rg = self.rg(&[a]);
        self.push(v, Op::SumLast(a), rg)
    }

    pub fn sum_squares(&mut self, a: Var) -> Result<Var> {
        let sq = self.mul(a, a)?;
        Ok(self.sum(sq))
    }

    /// Nearest-neighbour 2x spatial upsampling of an NHWC tensor.
    pub fn upsample2(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let s = x.shape();
        if s.len() != 4 {
            return Err(Error::Shape(format!("upsample2: {:?}", s)));
        }
        let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
        let mut out = vec![0.0f32; b * 4 * h * w * c];
        for bi in 0..b {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    let src = ((bi * h + y / 2) * w + xx / 2) * c;
                    let dst = ((bi * 2 * h + y) * 2 * w + xx) * c;
                    out[dst..dst + c].copy_from_slice(&x.data()[src..src + c]);
                }
            }
        }
        let v = Tensor::new(&[b, 2 * h, 2 * w, c], out)?;
        let rg = self.rg(&[a]);
        Ok(self.push(v, Op::Upsample2(a), rg))
    }

    /// Applies a [`SparseMap`] to `input` viewed as `[n_in, channels]`, where
    /// `channels` is the size of the last axis. `params` are scalar leaves the
    /// map's `param_weights` differentiate against (in order).
    pub fn sparse(&mut self, input: Var, params: &[Var], map: Rc<SparseMap>) -> Result<Var> {
        let x = self.value(input);
        let c = last_dim(x);
        if x.len() != map.n_in * c {
            return Err(Error::Shape(format!(
                "sparse map expects {} rows of {} channels, input {:?}",
                map.n_in,
                c,
                x.shape()
            )));
        }
        if params.len() != map.param_weights.len() {
            return Err(Error::Invalid(format!(
                "sparse map has {} parameter derivatives, {} params given",
                map.param_weights.len(),
                params.len()
            )));
        }
        let out = map.apply(&map.weights, x.data(), c);
        let v = Tensor::new(&[map.n_out(), c], out)?;
        let mut parents = vec![input];
        parents.extend_from_slice(params);
        let rg = self.rg(&parents);
        Ok(self.push(
            v,
            Op::Sparse {
                input,
                params: params.to_vec(),
                map,
            },
            rg,
        ))
    }

    fn accumulate(&mut self, v: Var, g: Tensor) -> Result<()> {
        if !self.nodes[v.0].requires_grad {
            return Ok(());
        }
        if !g.all_finite() {
            return Err(Error::NonFinite(format!("gradient of node {}", v.0)));
        }
        match &mut self.grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
        Ok(())
    }

    /// Reverse sweep from a scalar root. Gradients of every node that
    /// requires one are available afterwards through [`Tape::grad`].
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let rv = self.value(root);
        if rv.len() != 1 {
            return Err(Error::Shape(format!(
                "backward root must be scalar, got {:?}",
                rv.shape()
            )));
        }
        if !rv.all_finite() {
            return Err(Error::NonFinite("backward root".into()));
        }
        if !self.nodes[root.0].requires_grad {
            return Err(Error::Invalid(
                "backward root does not depend on any gradient-requiring leaf".into(),
            ));
        }
        let seed = Tensor::new(rv.shape(), vec![1.0])?;
        self.grads = vec![None; self.nodes.len()];
        self.grads[root.0] = Some(seed);

        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            let op = self.nodes[i].op.clone();
            self.backward_op(Var(i), &op, &g)?;
            // Only leaf gradients are kept; interior ones are released eagerly.
            if matches!(op, Op::Leaf) {
                self.grads[i] = Some(g);
            }
        }
        Ok(())
    }

    fn backward_op(&mut self, node: Var, op: &Op, g: &Tensor) -> Result<()> {
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(*a, g.clone())?;
                self.accumulate(*b, g.clone())?;
            }
            Op::Sub(a, b) => {
                self.accumulate(*a, g.clone())?;
                self.accumulate(*b, g.scaled(-1.0))?;
            }
            Op::Mul(a, b) => {
                let ga = self.requires_grad(*a).then(|| {
                    let tb = self.value(*b);
                    zip_map(g, tb, |x, y| x * y)
                });
                let gb = self.requires_grad(*b).then(|| {
                    let ta = self.value(*a);
                    zip_map(g, ta, |x, y| x * y)
                });
                if let Some(ga) = ga {
                    self.accumulate(*a, ga)?;
                }
                if let Some(gb) = gb {
                    self.accumulate(*b, gb)?;
                }
            }
            Op::Scale(a, s) => self.accumulate(*a, g.scaled(*s))?,
            Op::AddScalar(a) => self.accumulate(*a, g.clone())?,
            Op::AddBias(x, b) => {
                self.accumulate(*x, g.clone())?;
                if self.requires_grad(*b) {
                    let n = self.value(*b).len();
                    let mut gb = vec![0.0f32; n];
                    for row in g.data().chunks(n) {
                        for (acc, v) in gb.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    let shape = self.shape(*b).to_vec();
                    self.accumulate(*b, Tensor::new(&shape, gb)?)?;
                }
            }
            Op::MulBias(x, s) => {
                let n = self.value(*s).len();
                if self.requires_grad(*x) {
                    let ts = self.value(*s).data().to_vec();
                    let mut gx = g.data().to_vec();
                    for row in gx.chunks_mut(n) {
                        for (v, sv) in row.iter_mut().zip(&ts) {
                            *v *= sv;
                        }
                    }
                    let shape = self.shape(*x).to_vec();
                    self.accumulate(*x, Tensor::new(&shape, gx)?)?;
                }
                if self.requires_grad(*s) {
                    let mut gs = vec![0.0f32; n];
                    for (grow, xrow) in g.data().chunks(n).zip(self.value(*x).data().chunks(n)) {
                        for ((acc, gv), xv) in gs.iter_mut().zip(grow).zip(xrow) {
                            *acc += gv * xv;
                        }
                    }
                    let shape = self.shape(*s).to_vec();
                    self.accumulate(*s, Tensor::new(&shape, gs)?)?;
                }
            }
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if self.requires_grad(*a) {
                    let mut ga = vec![0.0f32; m * k];
                    let tb = self.value(*b);
                    gemm(m, n, k, g.data(), (n as isize, 1), tb.data(), (1, n as isize), &mut ga, 0.0);
                    self.accumulate(*a, Tensor::new(&[m, k], ga)?)?;
                }
                if self.requires_grad(*b) {
                    let mut gb = vec![0.0f32; k * n];
                    let ta = self.value(*a);
                    gemm(k, m, n, ta.data(), (1, k as isize), g.data(), (n as isize, 1), &mut gb, 0.0);
                    self.accumulate(*b, Tensor::new(&[k, n], gb)?)?;
                }
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            } => {
                let want_dx = self.requires_grad(*input);
                let want_dw = self.requires_grad(*weight);
                let (dx, dw) = conv_backward(
                    self.value(*input),
                    self.value(*weight),
                    geom,
                    g,
                    want_dx,
                    want_dw,
                )?;
                if let Some(dx) = dx {
                    let shape = self.shape(*input).to_vec();
                    self.accumulate(*input, Tensor::new(&shape, dx)?)?;
                }
                if let Some(dw) = dw {
                    let shape = self.shape(*weight).to_vec();
                    self.accumulate(*weight, Tensor::new(&shape, dw)?)?;
                }
                if let Some(b) = bias {
                    if self.requires_grad(*b) {
                        let co = self.value(*b).len();
                        let mut gb = vec![0.0f32; co];
                        for row in g.data().chunks(co) {
                            for (acc, v) in gb.iter_mut().zip(row) {
                                *acc += v;
                            }
                        }
                        let shape = self.shape(*b).to_vec();
                        self.accumulate(*b, Tensor::new(&shape, gb)?)?;
                    }
                }
            }
            Op::MaxPool2 { input, argmax } => {
                let shape = self.shape(*input).to_vec();
                let mut gx = vec![0.0f32; shape.iter().product()];
                for (o, &i) in argmax.iter().enumerate() {
                    gx[i as usize] += g.data()[o];
                }
                self.accumulate(*input, Tensor::new(&shape, gx)?)?;
            }
            Op::PoolGather { input, argmax } => {
                let shape = self.shape(*input).to_vec();
                let total: usize = shape.iter().product();
                let mut gx = vec![0.0f32; total];
                let per = argmax.len();
                let copies = g.len() / per.max(1);
                let in_per = total / copies.max(1);
                for k in 0..copies {
                    for (o, &i) in argmax.iter().enumerate() {
                        gx[k * in_per + i as usize] += g.data()[k * per + o];
                    }
                }
                self.accumulate(*input, Tensor::new(&shape, gx)?)?;
            }
            Op::Relu(a) => {
                let y = &self.nodes[node.0].value;
                let ga = zip_map(g, y, |gv, yv| if yv > 0.0 { gv } else { 0.0 });
                self.accumulate(*a, ga)?;
            }
            Op::Tanh(a) => {
                let y = &self.nodes[node.0].value;
                let ga = zip_map(g, y, |gv, yv| gv * (1.0 - yv * yv));
                self.accumulate(*a, ga)?;
            }
            Op::Exp(a) => {
                let y = &self.nodes[node.0].value;
                let ga = zip_map(g, y, |gv, yv| gv * yv);
                self.accumulate(*a, ga)?;
            }
            Op::Sqrt(a) => {
                let y = &self.nodes[node.0].value;
                let ga = zip_map(g, y, |gv, yv| gv * 0.5 / yv);
                self.accumulate(*a, ga)?;
            }
            Op::Reshape(a) => {
                let shape = self.shape(*a).to_vec();
                self.accumulate(*a, g.clone().reshape(&shape)?)?;
            }
            Op::Slice { input, axis, start } => {
                let s = self.shape(*input).to_vec();
                let len = g.shape()[*axis];
                let outer: usize = s[..*axis].iter().product();
                let inner: usize = s[*axis + 1..].iter().product();
                let mut gx = vec![0.0f32; s.iter().product()];
                for o in 0..outer {
                    let dst = (o * s[*axis] + start) * inner;
                    let src = o * len * inner;
                    gx[dst..dst + len * inner].copy_from_slice(&g.data()[src..src + len * inner]);
                }
                self.accumulate(*input, Tensor::new(&s, gx)?)?;
            }
            Op::Concat { parts, axis } => {
                let out_shape = g.shape().to_vec();
                let outer: usize = out_shape[..*axis].iter().product();
                let inner: usize = out_shape[*axis + 1..].iter().product();
                let total = out_shape[*axis];
                let mut offset = 0;
                for p in parts {
                    let s = self.shape(*p).to_vec();
                    let len = s[*axis];
                    if self.requires_grad(*p) {
                        let mut gp = Vec::with_capacity(s.iter().product());
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            gp.extend_from_slice(&g.data()[src..src + len * inner]);
                        }
                        self.accumulate(*p, Tensor::new(&s, gp)?)?;
                    }
                    offset += len;
                }
            }
            Op::Sum(a) => {
                let shape = self.shape(*a).to_vec();
                self.accumulate(*a, Tensor::full(&shape, g.item()))?;
            }
            Op::SumLast(a) => {
                let shape = self.shape(*a).to_vec();
                let n = *shape.last().unwrap_or(&1);
                let mut gx = Vec::with_capacity(shape.iter().product());
                for &gv in g.data() {
                    gx.extend(std::iter::repeat_n(gv, n));
                }
                self.accumulate(*a, Tensor::new(&shape, gx)?)?;
            }
            Op::Upsample2(a) => {
                let s = self.shape(*a).to_vec();
                let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
                let mut gx = vec![0.0f32; b * h * w * c];
                for bi in 0..b {
                    for y in 0..2 * h {
                        for xx in 0..2 * w {
                            let dst = ((bi * h + y / 2) * w + xx / 2) * c;
                            let src = ((bi * 2 * h + y) * 2 * w + xx) * c;
                            for ch in 0..c {
                                gx[dst + ch] += g.data()[src + ch];
                            }
                        }
                    }
                }
                self.accumulate(*a, Tensor::new(&s, gx)?)?;
            }
            Op::Sparse { input, params, map } => {
                let c = last_dim(self.value(*input));
                if self.requires_grad(*input) {
                    let gx = map.apply_transpose(g.data(), c);
                    let shape = self.shape(*input).to_vec();
                    self.accumulate(*input, Tensor::new(&shape, gx)?)?;
                }
                for (p, dw) in params.iter().zip(&map.param_weights) {
                    if !self.requires_grad(*p) {
                        continue;
                    }
                    let d = map.apply(dw, self.value(*input).data(), c);
                    let gp: f32 = d.iter().zip(g.data()).map(|(a, b)| a * b).sum();
                    let shape = self.shape(*p).to_vec();
                    self.accumulate(*p, Tensor::full(&shape, gp))?;
                }
            }
        }
        Ok(())
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f32, f32) -> f32) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape(), data).expect("zip_map operands share a shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    #[test]
    fn square_sum_gradient() {
        let mut t = Tape::new();
        let x = t.param(Tensor::from_vec(vec![1.0, 2.0, 3.0]));
        let l = t.sum_squares(x).unwrap();
        t.backward(l).unwrap();
        assert_eq!(t.grad(x).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn relu_subgradient_zero_at_negatives() {
        let mut t = Tape::new();
        let x = t.param(Tensor::from_vec(vec![-1.0, 2.0, 0.0]));
        let r = t.relu(x);
        let l = t.sum(r);
        t.backward(l).unwrap();
        assert_eq!(t.grad(x).unwrap().data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_detached() {
        let mut t = Tape::new();
        let x = t.param(Tensor::from_vec(vec![1.0, 2.0]));
        assert!(matches!(t.backward(x), Err(Error::Shape(_))));
        let c = t.constant(Tensor::from_vec(vec![1.0, 2.0]));
        let s = t.sum(c);
        assert!(matches!(t.backward(s), Err(Error::Invalid(_))));
    }

    #[test]
    fn backward_reports_nan() {
        let mut t = Tape::new();
        let x = t.param(Tensor::from_vec(vec![0.0]));
        let s = t.sqrt(x);
        let l = t.sum(s);
        assert!(matches!(t.backward(l), Err(Error::NonFinite(_))));
    }

    #[test]
    fn max_pool_ties_route_to_first() {
        let mut t = Tape::new();
        let x = t.param(Tensor::new(&[1, 2, 2, 1], vec![3.0, 3.0, 3.0, 3.0]).unwrap());
        let p = t.max_pool2(x).unwrap();
        let l = t.sum(p);
        t.backward(l).unwrap();
        assert_eq!(t.grad(x).unwrap().data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn linear_combination_of_gradients() {
        let mut r = rng();
        let xv = Tensor::randn(&[5], 1.0, &mut r);
        let grad_of = |a: f32, b: f32| {
            let mut t = Tape::new();
            let x = t.param(xv.clone());
            let f = t.sum_squares(x).unwrap();
            let e = t.exp(x);
            let g = t.sum(e);
            let fa = t.scale(f, a);
            let gb = t.scale(g, b);
            let l = t.add(fa, gb).unwrap();
            t.backward(l).unwrap();
            t.grad(x).unwrap().clone()
        };
        let gf = grad_of(1.0, 0.0);
        let gg = grad_of(0.0, 1.0);
        let combo = grad_of(2.0, -3.0);
        for i in 0..5 {
            let expect = 2.0 * gf.data()[i] - 3.0 * gg.data()[i];
            assert!((combo.data()[i] - expect).abs() < 1e-5);
        }
    }

    #[test]
    fn conv_matches_direct_loops() {
        let mut r = rng();
        let x = Tensor::randn(&[2, 5, 4, 3], 1.0, &mut r);
        let w = Tensor::randn(&[3, 3, 3, 2], 1.0, &mut r);
        let mut t = Tape::new();
        let xv = t.constant(x.clone());
        let wv = t.constant(w.clone());
        let y = t.conv2d(xv, wv, None, 2, Padding::uniform(1)).unwrap();
        let out = t.value(y);
        assert_eq!(out.shape(), &[2, 3, 2, 2]);
        for b in 0..2 {
            for oy in 0..3 {
                for ox in 0..2 {
                    for co in 0..2 {
                        let mut s = 0.0;
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = (oy * 2 + ky) as isize - 1;
                                let ix = (ox * 2 + kx) as isize - 1;
                                if iy < 0 || ix < 0 || iy >= 5 || ix >= 4 {
                                    continue;
                                }
                                for ci in 0..3 {
                                    s += x.data()[((b * 5 + iy as usize) * 4 + ix as usize) * 3 + ci]
                                        * w.data()[((ky * 3 + kx) * 3 + ci) * 2 + co];
                                }
                            }
                        }
                        let got = out.data()[((b * 3 + oy) * 2 + ox) * 2 + co];
                        assert!((got - s).abs() < 1e-5, "{got} vs {s}");
                    }
                }
            }
        }
    }

    #[test]
    fn slice_concat_round_trip() {
        let mut r = rng();
        let mut t = Tape::new();
        let x = t.param(Tensor::randn(&[3, 4, 2], 1.0, &mut r));
        let a = t.slice(x, 1, 0, 1).unwrap();
        let b = t.slice(x, 1, 1, 3).unwrap();
        let c = t.concat(&[a, b], 1).unwrap();
        assert_eq!(t.value(c), t.value(x));
        let l = t.sum(c);
        t.backward(l).unwrap();
        assert!(t.grad(x).unwrap().data().iter().all(|&g| g == 1.0));
    }
}

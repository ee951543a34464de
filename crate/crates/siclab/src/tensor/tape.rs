//! Reverse-mode autodiff tape.
//!
//! Nodes are appended in topological order; `backward` sweeps them in reverse.
//! When several consumers contribute gradient to one node, the contributions
//! are summed in ascending consumer-id order, so gradients are bit-identical
//! across runs. Backward never mutates forward activations.

use super::kernels;
use super::{Scalar, Tensor};
use crate::error::{Result, SicError};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
struct ConvMeta {
    batch: usize,
    in_ch: usize,
    in_h: usize,
    in_w: usize,
    out_ch: usize,
    k: usize,
    stride: usize,
    pad: usize,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    AddScalar(Var),
    BiasAdd(Var, Var),
    Conv2d(Var, Var, ConvMeta),
    ConvT2d(Var, Var, ConvMeta),
    LeakyRelu(Var, f64),
    Abs(Var),
    Softplus(Var),
    NormalCdf(Var),
    Ln(Var),
    Sqrt(Var),
    ClampMin(Var, f64),
    SteRound(Var),
    ConcatC(Var, Var),
    SliceC(Var, usize, usize),
    CropHW(Var, usize, usize),
    SpaceToDepth(Var, usize),
    DepthToSpace(Var, usize),
    SumAll(Var),
    MeanAll(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation graph over tensors of element type `T`.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    ran_backward: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    // stable in both tails
    if x.to_f64() >= 0.0 {
        T::ONE / (T::ONE + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::ONE + e)
    }
}

pub fn softplus_stable<T: Scalar>(x: T) -> T {
    x.maxv(T::ZERO) + (T::ONE + (-x.abs()).exp()).ln()
}

/// The exact scalar the [`Tape::leaky_relu`] op applies — exposed so serial
/// (per-position) evaluation reproduces tape outputs bit-for-bit.
pub fn leaky_relu_scalar<T: Scalar>(v: T, slope: f64) -> T {
    let s = T::from_f64(slope);
    if v > T::ZERO {
        v
    } else {
        v * s
    }
}

const INV_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

pub fn std_normal_cdf<T: Scalar>(x: T) -> T {
    let h = T::from_f64(0.5);
    h * (T::ONE + (x * T::from_f64(INV_SQRT_2)).erf())
}

fn std_normal_pdf<T: Scalar>(x: T) -> T {
    T::from_f64(INV_SQRT_2PI) * (T::from_f64(-0.5) * x * x).exp()
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            ran_backward: false,
        }
    }

    /// Insert a leaf tensor. Gradients are collected for it when
    /// `requires_grad` is set.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Leaf that never takes gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    fn push(&mut self, value: Tensor<T>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Tensor<T>, op: Op, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(value, op, rg)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last `backward` loss w.r.t. a leaf, if collected.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(SicError::config(format!(
                "{what}: shape mismatch {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push_op(Tensor { shape, data }, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x - y)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push_op(Tensor { shape, data }, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push_op(Tensor { shape, data }, Op::Mul(a, b), &[a, b]))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "div")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x / y)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push_op(Tensor { shape, data }, Op::Div(a, b), &[a, b]))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| -v);
        self.push_op(value, Op::Neg(a), &[a])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let cv = T::from_f64(c);
        let value = self.value(a).map(|v| v * cv);
        self.push_op(value, Op::Scale(a, c), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let cv = T::from_f64(c);
        let value = self.value(a).map(|v| v + cv);
        self.push_op(value, Op::AddScalar(a), &[a])
    }

    /// x [B,C,H,W] + bias [C], broadcast over batch and space.
    pub fn bias_add(&mut self, x: Var, bias: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let bs = self.shape(bias).to_vec();
        if xs.len() != 4 || bs.len() != 1 || bs[0] != xs[1] {
            return Err(SicError::config(format!(
                "bias_add: incompatible shapes {:?} and {:?}",
                xs, bs
            )));
        }
        let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let plane = h * w;
        let mut data = self.value(x).data().to_vec();
        let bd = self.value(bias).data();
        for bi in 0..b {
            for ci in 0..c {
                let bv = bd[ci];
                for v in &mut data[(bi * c + ci) * plane..(bi * c + ci + 1) * plane] {
                    *v += bv;
                }
            }
        }
        Ok(self.push_op(Tensor { shape: xs, data }, Op::BiasAdd(x, bias), &[x, bias]))
    }

    /// Strided cross-correlation. x [B,C,H,W], w [O,C,k,k].
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 || ws[1] != xs[1] || ws[2] != ws[3] {
            return Err(SicError::config(format!(
                "conv2d: incompatible shapes {:?} and {:?}",
                xs, ws
            )));
        }
        let k = ws[2];
        if !(stride == 1 || stride == 2) {
            return Err(SicError::config(format!("conv2d: stride {stride} not in {{1,2}}")));
        }
        if xs[2] + 2 * pad < k || xs[3] + 2 * pad < k {
            return Err(SicError::config(format!(
                "conv2d: input {}x{} smaller than kernel {k}",
                xs[2], xs[3]
            )));
        }
        let meta = ConvMeta {
            batch: xs[0],
            in_ch: xs[1],
            in_h: xs[2],
            in_w: xs[3],
            out_ch: ws[0],
            k,
            stride,
            pad,
        };
        let data = kernels::conv2d_fwd(
            self.value(x).data(),
            meta.batch,
            meta.in_ch,
            meta.in_h,
            meta.in_w,
            self.value(w).data(),
            meta.out_ch,
            k,
            stride,
            pad,
        );
        let ho = kernels::conv_out_extent(meta.in_h, k, stride, pad);
        let wo = kernels::conv_out_extent(meta.in_w, k, stride, pad);
        let shape = vec![meta.batch, meta.out_ch, ho, wo];
        Ok(self.push_op(Tensor { shape, data }, Op::Conv2d(x, w, meta), &[x, w]))
    }

    /// Adjoint of [`Tape::conv2d`]: x [B,O,h,w], w [O,C,k,k] -> [B,C,s*h,s*w].
    /// The output extent is `stride * input extent`; the (k, stride, pad)
    /// combination must map it back to the input extent under `conv2d`.
    pub fn conv2d_transpose(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 || ws[0] != xs[1] || ws[2] != ws[3] {
            return Err(SicError::config(format!(
                "conv2d_transpose: incompatible shapes {:?} and {:?}",
                xs, ws
            )));
        }
        let k = ws[2];
        let (h_out, w_out) = (stride * xs[2], stride * xs[3]);
        if kernels::conv_out_extent(h_out, k, stride, pad) != xs[2]
            || kernels::conv_out_extent(w_out, k, stride, pad) != xs[3]
        {
            return Err(SicError::config(format!(
                "conv2d_transpose: k={k} stride={stride} pad={pad} does not invert {}x{} -> {}x{}",
                h_out, w_out, xs[2], xs[3]
            )));
        }
        let meta = ConvMeta {
            batch: xs[0],
            in_ch: ws[1],
            in_h: h_out,
            in_w: w_out,
            out_ch: xs[1],
            k,
            stride,
            pad,
        };
        let data = kernels::conv2d_dx(
            self.value(x).data(),
            meta.batch,
            meta.out_ch,
            xs[2],
            xs[3],
            self.value(w).data(),
            meta.in_ch,
            k,
            stride,
            pad,
            h_out,
            w_out,
        );
        let shape = vec![meta.batch, meta.in_ch, h_out, w_out];
        Ok(self.push_op(Tensor { shape, data }, Op::ConvT2d(x, w, meta), &[x, w]))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let value = self.value(a).map(|v| leaky_relu_scalar(v, slope));
        self.push_op(value, Op::LeakyRelu(a, slope), &[a])
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| v.abs());
        self.push_op(value, Op::Abs(a), &[a])
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let value = self.value(a).map(softplus_stable);
        self.push_op(value, Op::Softplus(a), &[a])
    }

    /// Standard normal CDF, elementwise.
    pub fn normal_cdf(&mut self, a: Var) -> Var {
        let value = self.value(a).map(std_normal_cdf);
        self.push_op(value, Op::NormalCdf(a), &[a])
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| v.ln());
        self.push_op(value, Op::Ln(a), &[a])
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| v.sqrt());
        self.push_op(value, Op::Sqrt(a), &[a])
    }

    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Var {
        let f = T::from_f64(floor);
        let value = self.value(a).map(|v| v.maxv(f));
        self.push_op(value, Op::ClampMin(a, floor), &[a])
    }

    /// Hard rounding forward, identity gradient backward.
    pub fn ste_round(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| v.round_ties_away());
        self.push_op(value, Op::SteRound(a), &[a])
    }

    /// Concatenate along the channel axis of [B,C,H,W].
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != 4 || sb.len() != 4 || sa[0] != sb[0] || sa[2] != sb[2] || sa[3] != sb[3] {
            return Err(SicError::config(format!(
                "concat_channels: incompatible shapes {:?} and {:?}",
                sa, sb
            )));
        }
        let (bn, ca, cb, plane) = (sa[0], sa[1], sb[1], sa[2] * sa[3]);
        let mut data = Vec::with_capacity(bn * (ca + cb) * plane);
        let da = self.value(a).data();
        let db = self.value(b).data();
        for bi in 0..bn {
            data.extend_from_slice(&da[bi * ca * plane..(bi + 1) * ca * plane]);
            data.extend_from_slice(&db[bi * cb * plane..(bi + 1) * cb * plane]);
        }
        let shape = vec![bn, ca + cb, sa[2], sa[3]];
        Ok(self.push_op(Tensor { shape, data }, Op::ConcatC(a, b), &[a, b]))
    }

    /// Channels `from..to` of [B,C,H,W].
    pub fn slice_channels(&mut self, x: Var, from: usize, to: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 || from >= to || to > xs[1] {
            return Err(SicError::config(format!(
                "slice_channels: bad range {from}..{to} for shape {:?}",
                xs
            )));
        }
        let (bn, c, plane) = (xs[0], xs[1], xs[2] * xs[3]);
        let d = self.value(x).data();
        let mut data = Vec::with_capacity(bn * (to - from) * plane);
        for bi in 0..bn {
            data.extend_from_slice(&d[(bi * c + from) * plane..(bi * c + to) * plane]);
        }
        let shape = vec![bn, to - from, xs[2], xs[3]];
        Ok(self.push_op(Tensor { shape, data }, Op::SliceC(x, from, to), &[x]))
    }

    /// Top-left spatial crop of [B,C,H,W] to `h` × `w`.
    pub fn crop_hw(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 || h == 0 || w == 0 || h > xs[2] || w > xs[3] {
            return Err(SicError::config(format!(
                "crop_hw: cannot crop {:?} to {h}x{w}",
                xs
            )));
        }
        if h == xs[2] && w == xs[3] {
            let value = self.value(x).clone();
            return Ok(self.push_op(value, Op::CropHW(x, h, w), &[x]));
        }
        let (bn, c) = (xs[0], xs[1]);
        let d = self.value(x).data();
        let mut data = Vec::with_capacity(bn * c * h * w);
        for bc in 0..bn * c {
            for y in 0..h {
                let row = (bc * xs[2] + y) * xs[3];
                data.extend_from_slice(&d[row..row + w]);
            }
        }
        let shape = vec![bn, c, h, w];
        Ok(self.push_op(Tensor { shape, data }, Op::CropHW(x, h, w), &[x]))
    }

    pub fn space_to_depth(&mut self, x: Var, r: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 || xs[2] % r != 0 || xs[3] % r != 0 {
            return Err(SicError::config(format!(
                "space_to_depth: shape {:?} not divisible by {r}",
                xs
            )));
        }
        let data = kernels::space_to_depth(self.value(x).data(), xs[0], xs[1], xs[2], xs[3], r);
        let shape = vec![xs[0], xs[1] * r * r, xs[2] / r, xs[3] / r];
        Ok(self.push_op(Tensor { shape, data }, Op::SpaceToDepth(x, r), &[x]))
    }

    pub fn depth_to_space(&mut self, x: Var, r: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 || xs[1] % (r * r) != 0 {
            return Err(SicError::config(format!(
                "depth_to_space: channels {:?} not divisible by {}",
                xs,
                r * r
            )));
        }
        let data = kernels::depth_to_space(self.value(x).data(), xs[0], xs[1], xs[2], xs[3], r);
        let shape = vec![xs[0], xs[1] / (r * r), xs[2] * r, xs[3] * r];
        Ok(self.push_op(Tensor { shape, data }, Op::DepthToSpace(x, r), &[x]))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let mut acc = T::ZERO;
        for &v in self.value(a).data() {
            acc += v;
        }
        self.push_op(Tensor::scalar(acc), Op::SumAll(a), &[a])
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).numel();
        let mut acc = T::ZERO;
        for &v in self.value(a).data() {
            acc += v;
        }
        let m = acc / T::from_f64(n as f64);
        self.push_op(Tensor::scalar(m), Op::MeanAll(a), &[a])
    }

    /// Mean squared error between two same-shape tensors.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        Ok(self.mean_all(sq))
    }

    /// Populate gradients for all `requires_grad` leaves reachable from
    /// `loss`. `loss` must be scalar and recorded on this tape.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if loss.0 >= self.nodes.len() {
            return Err(SicError::usage("backward: unknown loss var"));
        }
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(SicError::usage(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        if !self.nodes[loss.0].value.item().is_finite_v() {
            return Err(SicError::numeric("backward: loss is not finite"));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        // pending[i]: gradient contributions (consumer id, tensor), summed in
        // ascending consumer order when node i is visited
        let mut pending: Vec<Vec<(usize, Tensor<T>)>> = (0..self.nodes.len()).map(|_| Vec::new()).collect();
        pending[loss.0].push((loss.0, Tensor::scalar(T::ONE)));

        for i in (0..=loss.0).rev() {
            if pending[i].is_empty() || !self.nodes[i].requires_grad {
                pending[i].clear();
                continue;
            }
            let mut contribs = std::mem::take(&mut pending[i]);
            contribs.sort_by_key(|(consumer, _)| *consumer);
            let mut grad = Tensor::zeros(self.nodes[i].value.shape().to_vec());
            for (_, c) in contribs {
                for (g, v) in grad.data_mut().iter_mut().zip(c.data()) {
                    *g += *v;
                }
            }
            self.distribute(i, &grad, &mut pending)?;
            if matches!(self.nodes[i].op, Op::Leaf) {
                self.grads[i] = Some(grad);
            }
        }
        self.ran_backward = true;
        Ok(())
    }

    fn send(
        &self,
        pending: &mut [Vec<(usize, Tensor<T>)>],
        consumer: usize,
        target: Var,
        grad: Tensor<T>,
    ) {
        if self.nodes[target.0].requires_grad {
            pending[target.0].push((consumer, grad));
        }
    }

    fn distribute(
        &self,
        i: usize,
        g: &Tensor<T>,
        pending: &mut [Vec<(usize, Tensor<T>)>],
    ) -> Result<()> {
        let op = self.nodes[i].op.clone();
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.send(pending, i, a, g.clone());
                self.send(pending, i, b, g.clone());
            }
            Op::Sub(a, b) => {
                self.send(pending, i, a, g.clone());
                self.send(pending, i, b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let ga = self.ew(g, self.value(b), |gv, bv| gv * bv);
                let gb = self.ew(g, self.value(a), |gv, av| gv * av);
                self.send(pending, i, a, ga);
                self.send(pending, i, b, gb);
            }
            Op::Div(a, b) => {
                let vb = self.value(b);
                let ga = self.ew(g, vb, |gv, bv| gv / bv);
                let va = self.value(a);
                let mut gb = Tensor::zeros(vb.shape().to_vec());
                for ((o, (&gv, &av)), &bv) in gb
                    .data_mut()
                    .iter_mut()
                    .zip(g.data().iter().zip(va.data()))
                    .zip(vb.data())
                {
                    *o = -gv * av / (bv * bv);
                }
                self.send(pending, i, a, ga);
                self.send(pending, i, b, gb);
            }
            Op::Neg(a) => self.send(pending, i, a, g.map(|v| -v)),
            Op::Scale(a, c) => {
                let cv = T::from_f64(c);
                self.send(pending, i, a, g.map(|v| v * cv));
            }
            Op::AddScalar(a) => self.send(pending, i, a, g.clone()),
            Op::BiasAdd(x, bias) => {
                self.send(pending, i, x, g.clone());
                let xs = self.shape(x);
                let (b, c, plane) = (xs[0], xs[1], xs[2] * xs[3]);
                let mut gb = Tensor::zeros(vec![c]);
                let gd = g.data();
                for bi in 0..b {
                    for ci in 0..c {
                        let mut acc = T::ZERO;
                        for &v in &gd[(bi * c + ci) * plane..(bi * c + ci + 1) * plane] {
                            acc += v;
                        }
                        gb.data_mut()[ci] += acc;
                    }
                }
                self.send(pending, i, bias, gb);
            }
            Op::Conv2d(x, w, m) => {
                let ho = kernels::conv_out_extent(m.in_h, m.k, m.stride, m.pad);
                let wo = kernels::conv_out_extent(m.in_w, m.k, m.stride, m.pad);
                let gx = kernels::conv2d_dx(
                    g.data(),
                    m.batch,
                    m.out_ch,
                    ho,
                    wo,
                    self.value(w).data(),
                    m.in_ch,
                    m.k,
                    m.stride,
                    m.pad,
                    m.in_h,
                    m.in_w,
                );
                let gw = kernels::conv2d_dw(
                    self.value(x).data(),
                    m.batch,
                    m.in_ch,
                    m.in_h,
                    m.in_w,
                    g.data(),
                    m.out_ch,
                    m.k,
                    m.stride,
                    m.pad,
                );
                self.send(
                    pending,
                    i,
                    x,
                    Tensor::new(vec![m.batch, m.in_ch, m.in_h, m.in_w], gx)?,
                );
                self.send(
                    pending,
                    i,
                    w,
                    Tensor::new(vec![m.out_ch, m.in_ch, m.k, m.k], gw)?,
                );
            }
            Op::ConvT2d(x, w, m) => {
                // forward was conv2d_dx(x, w); adjoint of adjoint is conv2d
                let (h_small, w_small) = (
                    kernels::conv_out_extent(m.in_h, m.k, m.stride, m.pad),
                    kernels::conv_out_extent(m.in_w, m.k, m.stride, m.pad),
                );
                let gx = kernels::conv2d_fwd(
                    g.data(),
                    m.batch,
                    m.in_ch,
                    m.in_h,
                    m.in_w,
                    self.value(w).data(),
                    m.out_ch,
                    m.k,
                    m.stride,
                    m.pad,
                );
                let gw = kernels::conv2d_dw(
                    g.data(),
                    m.batch,
                    m.in_ch,
                    m.in_h,
                    m.in_w,
                    self.value(x).data(),
                    m.out_ch,
                    m.k,
                    m.stride,
                    m.pad,
                );
                self.send(
                    pending,
                    i,
                    x,
                    Tensor::new(vec![m.batch, m.out_ch, h_small, w_small], gx)?,
                );
                self.send(
                    pending,
                    i,
                    w,
                    Tensor::new(vec![m.out_ch, m.in_ch, m.k, m.k], gw)?,
                );
            }
            Op::LeakyRelu(a, slope) => {
                let s = T::from_f64(slope);
                let ga = self.ew(g, self.value(a), |gv, av| {
                    if av > T::ZERO {
                        gv
                    } else {
                        gv * s
                    }
                });
                self.send(pending, i, a, ga);
            }
            Op::Abs(a) => {
                let ga = self.ew(g, self.value(a), |gv, av| {
                    if av > T::ZERO {
                        gv
                    } else if av < T::ZERO {
                        -gv
                    } else {
                        T::ZERO
                    }
                });
                self.send(pending, i, a, ga);
            }
            Op::Softplus(a) => {
                let ga = self.ew(g, self.value(a), |gv, av| gv * sigmoid(av));
                self.send(pending, i, a, ga);
            }
            Op::NormalCdf(a) => {
                let ga = self.ew(g, self.value(a), |gv, av| gv * std_normal_pdf(av));
                self.send(pending, i, a, ga);
            }
            Op::Ln(a) => {
                let ga = self.ew(g, self.value(a), |gv, av| gv / av);
                self.send(pending, i, a, ga);
            }
            Op::Sqrt(a) => {
                let half = T::from_f64(0.5);
                let ga = self.ew(g, self.value(a), |gv, av| gv * half / av.sqrt());
                self.send(pending, i, a, ga);
            }
            Op::ClampMin(a, floor) => {
                let f = T::from_f64(floor);
                let ga = self.ew(g, self.value(a), |gv, av| {
                    if av > f {
                        gv
                    } else {
                        T::ZERO
                    }
                });
                self.send(pending, i, a, ga);
            }
            Op::SteRound(a) => self.send(pending, i, a, g.clone()),
            Op::ConcatC(a, b) => {
                let sa = self.shape(a).to_vec();
                let sb = self.shape(b).to_vec();
                let (bn, ca, cb, plane) = (sa[0], sa[1], sb[1], sa[2] * sa[3]);
                let mut ga = Tensor::zeros(sa.clone());
                let mut gb = Tensor::zeros(sb.clone());
                let gd = g.data();
                for bi in 0..bn {
                    let base = bi * (ca + cb) * plane;
                    ga.data_mut()[bi * ca * plane..(bi + 1) * ca * plane]
                        .copy_from_slice(&gd[base..base + ca * plane]);
                    gb.data_mut()[bi * cb * plane..(bi + 1) * cb * plane]
                        .copy_from_slice(&gd[base + ca * plane..base + (ca + cb) * plane]);
                }
                self.send(pending, i, a, ga);
                self.send(pending, i, b, gb);
            }
            Op::CropHW(x, h, w) => {
                let xs = self.shape(x).to_vec();
                let (bn, c) = (xs[0], xs[1]);
                let mut gx = Tensor::zeros(xs.clone());
                let gd = g.data();
                for bc in 0..bn * c {
                    for y in 0..h {
                        let dst = (bc * xs[2] + y) * xs[3];
                        let src = (bc * h + y) * w;
                        gx.data_mut()[dst..dst + w].copy_from_slice(&gd[src..src + w]);
                    }
                }
                self.send(pending, i, x, gx);
            }
            Op::SliceC(x, from, to) => {
                let xs = self.shape(x).to_vec();
                let (bn, c, plane) = (xs[0], xs[1], xs[2] * xs[3]);
                let span = to - from;
                let mut gx = Tensor::zeros(xs);
                let gd = g.data();
                for bi in 0..bn {
                    gx.data_mut()[(bi * c + from) * plane..(bi * c + to) * plane]
                        .copy_from_slice(&gd[bi * span * plane..(bi + 1) * span * plane]);
                }
                self.send(pending, i, x, gx);
            }
            Op::SpaceToDepth(x, r) => {
                let gs = g.shape();
                let gx = kernels::depth_to_space(g.data(), gs[0], gs[1], gs[2], gs[3], r);
                let xs = self.shape(x).to_vec();
                self.send(pending, i, x, Tensor::new(xs, gx)?);
            }
            Op::DepthToSpace(x, r) => {
                let gs = g.shape();
                let gx = kernels::space_to_depth(g.data(), gs[0], gs[1], gs[2], gs[3], r);
                let xs = self.shape(x).to_vec();
                self.send(pending, i, x, Tensor::new(xs, gx)?);
            }
            Op::SumAll(a) => {
                let gv = g.item();
                let shape = self.shape(a).to_vec();
                self.send(pending, i, a, Tensor::full(shape, gv));
            }
            Op::MeanAll(a) => {
                let n = self.value(a).numel();
                let gv = g.item() / T::from_f64(n as f64);
                let shape = self.shape(a).to_vec();
                self.send(pending, i, a, Tensor::full(shape, gv));
            }
        }
        Ok(())
    }

    fn ew(&self, g: &Tensor<T>, other: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let data = g
            .data()
            .iter()
            .zip(other.data())
            .map(|(&gv, &ov)| f(gv, ov))
            .collect();
        Tensor {
            shape: g.shape().to_vec(),
            data,
        }
    }
}

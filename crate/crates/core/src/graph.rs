//! Reverse-mode automatic differentiation over a fixed op set.
//!
//! A [`Graph`] records operations in forward order while computing their
//! values; [`Graph::backward`] replays the tape in reverse and accumulates
//! gradients (+=) into per-node buffers, so shared parameters sum their
//! contributions. One graph is confined to one logical thread.

use crate::error::{Error, Result};
use crate::tensor::{
    conv2d_backward, conv2d_check, conv2d_forward, upsample_nearest2_backward,
    upsample_nearest2_forward, Scalar, TensorBase,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Conv2d {
        input: NodeId,
        kernel: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        padding: usize,
    },
    LeakyRelu {
        input: NodeId,
        slope: f64,
    },
    UpsampleNearest2 {
        input: NodeId,
    },
    ConcatChannels {
        a: NodeId,
        b: NodeId,
    },
    /// out[n,o] = sum_i weight[o,i] * x[n,i]
    Linear {
        weight: NodeId,
        x: NodeId,
    },
    /// out[n,c,h,w] = x[n,c,h,w] + bias[n,c]
    BiasChannels {
        x: NodeId,
        bias: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Sub {
        a: NodeId,
        b: NodeId,
    },
    Mul {
        a: NodeId,
        b: NodeId,
    },
    Scale {
        input: NodeId,
        factor: f64,
    },
    AddScalar {
        input: NodeId,
    },
    Abs {
        input: NodeId,
    },
    Sqrt {
        input: NodeId,
    },
    /// [n,c,h,w] -> [n,1,h,w]
    SumChannels {
        input: NodeId,
    },
    /// any shape -> scalar; accumulates in f64
    SumAll {
        input: NodeId,
    },
}

pub struct GraphBase<T: Scalar> {
    values: Vec<TensorBase<T>>,
    ops: Vec<Op>,
    is_param: Vec<bool>,
    grads: Vec<Option<Vec<T>>>,
}

pub type Graph = GraphBase<f32>;

impl<T: Scalar> Default for GraphBase<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> GraphBase<T> {
    pub fn new() -> Self {
        GraphBase {
            values: Vec::new(),
            ops: Vec::new(),
            is_param: Vec::new(),
            grads: Vec::new(),
        }
    }

    fn push(&mut self, value: TensorBase<T>, op: Op, is_param: bool) -> NodeId {
        let id = NodeId(self.values.len());
        self.values.push(value);
        self.ops.push(op);
        self.is_param.push(is_param);
        self.grads.push(None);
        id
    }

    /// Leaf node that does not need a gradient (data, targets, masks).
    pub fn input(&mut self, t: &TensorBase<T>) -> NodeId {
        self.push(t.clone(), Op::Leaf, false)
    }

    /// Leaf node whose gradient is retained for the optimizer.
    pub fn param(&mut self, t: &TensorBase<T>) -> NodeId {
        self.push(t.clone(), Op::Leaf, true)
    }

    pub fn value(&self, id: NodeId) -> &TensorBase<T> {
        &self.values[id.0]
    }

    pub fn grad(&self, id: NodeId) -> Option<&[T]> {
        self.grads[id.0].as_deref()
    }

    /// Gradient of a leaf as a tensor (zeros if the node never received one).
    pub fn grad_tensor(&self, id: NodeId) -> TensorBase<T> {
        let shape = self.values[id.0].shape().to_vec();
        match &self.grads[id.0] {
            Some(g) => TensorBase::new(shape, g.clone()).expect("grad shape"),
            None => TensorBase::zeros(shape),
        }
    }

    pub fn conv2d(
        &mut self,
        input: NodeId,
        kernel: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId> {
        let d = conv2d_check(
            &self.values[input.0],
            &self.values[kernel.0],
            bias.map(|b| &self.values[b.0]),
            stride,
            padding,
        )?;
        let mut out = TensorBase::zeros(vec![d.n, d.cout, d.oh, d.ow]);
        conv2d_forward(
            self.values[input.0].data(),
            self.values[kernel.0].data(),
            bias.map(|b| self.values[b.0].data()),
            out.data_mut(),
            d.n,
            d.cin,
            d.h,
            d.w,
            d.cout,
            d.k,
            stride,
            padding,
        );
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                kernel,
                bias,
                stride,
                padding,
            },
            false,
        ))
    }

    pub fn leaky_relu(&mut self, input: NodeId, slope: f64) -> NodeId {
        let s = T::from_f64(slope);
        let mut out = self.values[input.0].clone();
        out.clear_grad();
        for v in out.data_mut() {
            if *v < T::ZERO {
                *v *= s;
            }
        }
        self.push(out, Op::LeakyRelu { input, slope }, false)
    }

    pub fn upsample_nearest2(&mut self, input: NodeId) -> Result<NodeId> {
        let [n, c, h, w] = self.values[input.0].dims4()?;
        let mut out = TensorBase::zeros(vec![n, c, 2 * h, 2 * w]);
        upsample_nearest2_forward(self.values[input.0].data(), out.data_mut(), n * c, h, w);
        Ok(self.push(out, Op::UpsampleNearest2 { input }, false))
    }

    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let [na, ca, ha, wa] = self.values[a.0].dims4()?;
        let [nb, cb, hb, wb] = self.values[b.0].dims4()?;
        if na != nb || ha != hb || wa != wb {
            return Err(Error::Shape(format!(
                "concat operands disagree: {:?} vs {:?}",
                self.values[a.0].shape(),
                self.values[b.0].shape()
            )));
        }
        let mut out = TensorBase::zeros(vec![na, ca + cb, ha, wa]);
        let plane = ha * wa;
        {
            let dst = out.data_mut();
            for n in 0..na {
                dst[n * (ca + cb) * plane..(n * (ca + cb) + ca) * plane]
                    .copy_from_slice(&self.values[a.0].data()[n * ca * plane..(n + 1) * ca * plane]);
                dst[(n * (ca + cb) + ca) * plane..(n + 1) * (ca + cb) * plane]
                    .copy_from_slice(&self.values[b.0].data()[n * cb * plane..(n + 1) * cb * plane]);
            }
        }
        Ok(self.push(out, Op::ConcatChannels { a, b }, false))
    }

    pub fn linear(&mut self, weight: NodeId, x: NodeId) -> Result<NodeId> {
        let wshape = self.values[weight.0].shape().to_vec();
        let xshape = self.values[x.0].shape().to_vec();
        let (o, i) = match wshape[..] {
            [o, i] => (o, i),
            _ => return Err(Error::Shape(format!("linear weight must be 2-d, got {:?}", wshape))),
        };
        let (n, xi) = match xshape[..] {
            [n, xi] => (n, xi),
            _ => return Err(Error::Shape(format!("linear input must be 2-d, got {:?}", xshape))),
        };
        if xi != i {
            return Err(Error::Shape(format!(
                "linear weight expects {} inputs, got {}",
                i, xi
            )));
        }
        let mut out = TensorBase::zeros(vec![n, o]);
        {
            let w = self.values[weight.0].data();
            let xv = self.values[x.0].data();
            let dst = out.data_mut();
            for b in 0..n {
                for oo in 0..o {
                    let mut acc = T::ZERO;
                    for ii in 0..i {
                        acc += w[oo * i + ii] * xv[b * i + ii];
                    }
                    dst[b * o + oo] = acc;
                }
            }
        }
        Ok(self.push(out, Op::Linear { weight, x }, false))
    }

    pub fn bias_channels(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let [n, c, h, w] = self.values[x.0].dims4()?;
        if self.values[bias.0].shape() != [n, c] {
            return Err(Error::Shape(format!(
                "channel bias must be [{}, {}], got {:?}",
                n,
                c,
                self.values[bias.0].shape()
            )));
        }
        let mut out = self.values[x.0].clone();
        out.clear_grad();
        {
            let bv = self.values[bias.0].data();
            let dst = out.data_mut();
            for b in 0..n {
                for ch in 0..c {
                    let add = bv[b * c + ch];
                    for v in &mut dst[(b * c + ch) * h * w..(b * c + ch + 1) * h * w] {
                        *v += add;
                    }
                }
            }
        }
        Ok(self.push(out, Op::BiasChannels { x, bias }, false))
    }

    fn elementwise2(&mut self, a: NodeId, b: NodeId, name: &str) -> Result<()> {
        if self.values[a.0].shape() != self.values[b.0].shape() {
            return Err(Error::Shape(format!(
                "{} operands disagree: {:?} vs {:?}",
                name,
                self.values[a.0].shape(),
                self.values[b.0].shape()
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise2(a, b, "add")?;
        let mut out = self.values[a.0].clone();
        out.clear_grad();
        for (v, bv) in out.data_mut().iter_mut().zip(self.values[b.0].data()) {
            *v += *bv;
        }
        Ok(self.push(out, Op::Add { a, b }, false))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise2(a, b, "sub")?;
        let mut out = self.values[a.0].clone();
        out.clear_grad();
        for (v, bv) in out.data_mut().iter_mut().zip(self.values[b.0].data()) {
            *v -= *bv;
        }
        Ok(self.push(out, Op::Sub { a, b }, false))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise2(a, b, "mul")?;
        let mut out = self.values[a.0].clone();
        out.clear_grad();
        for (v, bv) in out.data_mut().iter_mut().zip(self.values[b.0].data()) {
            *v *= *bv;
        }
        Ok(self.push(out, Op::Mul { a, b }, false))
    }

    pub fn scale(&mut self, input: NodeId, factor: f64) -> NodeId {
        let f = T::from_f64(factor);
        let mut out = self.values[input.0].clone();
        out.clear_grad();
        for v in out.data_mut() {
            *v *= f;
        }
        self.push(out, Op::Scale { input, factor }, false)
    }

    pub fn add_scalar(&mut self, input: NodeId, offset: f64) -> NodeId {
        let o = T::from_f64(offset);
        let mut out = self.values[input.0].clone();
        out.clear_grad();
        for v in out.data_mut() {
            *v += o;
        }
        self.push(out, Op::AddScalar { input }, false)
    }

    pub fn abs(&mut self, input: NodeId) -> NodeId {
        let mut out = self.values[input.0].clone();
        out.clear_grad();
        for v in out.data_mut() {
            *v = v.abs();
        }
        self.push(out, Op::Abs { input }, false)
    }

    pub fn sqrt(&mut self, input: NodeId) -> NodeId {
        let mut out = self.values[input.0].clone();
        out.clear_grad();
        for v in out.data_mut() {
            *v = v.sqrt();
        }
        self.push(out, Op::Sqrt { input }, false)
    }

    pub fn sum_channels(&mut self, input: NodeId) -> Result<NodeId> {
        let [n, c, h, w] = self.values[input.0].dims4()?;
        let mut out = TensorBase::zeros(vec![n, 1, h, w]);
        {
            let src = self.values[input.0].data();
            let dst = out.data_mut();
            for b in 0..n {
                for ch in 0..c {
                    let plane = &src[(b * c + ch) * h * w..(b * c + ch + 1) * h * w];
                    for (d, s) in dst[b * h * w..(b + 1) * h * w].iter_mut().zip(plane) {
                        *d += *s;
                    }
                }
            }
        }
        Ok(self.push(out, Op::SumChannels { input }, false))
    }

    pub fn sum_all(&mut self, input: NodeId) -> NodeId {
        let mut acc = 0.0f64;
        for v in self.values[input.0].data() {
            acc += v.to_f64();
        }
        let out = TensorBase::scalar(T::from_f64(acc));
        self.push(out, Op::SumAll { input }, false)
    }

    fn grad_buf(&mut self, id: NodeId) -> &mut Vec<T> {
        let len = self.values[id.0].len();
        self.grads[id.0].get_or_insert_with(|| vec![T::ZERO; len])
    }

    /// Reverse pass from a scalar root. Populates gradient buffers for every
    /// node reachable from the root; parameter gradients are then read via
    /// [`Self::grad_tensor`]. One reverse pass per recorded graph.
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        if self.values[root.0].len() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar root without a seed gradient; got shape {:?}",
                self.values[root.0].shape()
            )));
        }
        self.grad_buf(root)[0] = T::ONE;
        for idx in (0..=root.0).rev() {
            let Some(g_out) = self.grads[idx].take() else {
                continue;
            };
            let op = self.ops[idx].clone();
            match op {
                Op::Leaf => {
                    // keep the gradient for leaves
                    self.grads[idx] = Some(g_out);
                    continue;
                }
                Op::Conv2d {
                    input,
                    kernel,
                    bias,
                    stride,
                    padding,
                } => {
                    let [n, cin, h, w] = self.values[input.0].dims4()?;
                    let [cout, _, k, _] = self.values[kernel.0].dims4()?;
                    // one operand at a time so aliased operands accumulate
                    let mut d_in = self.take_or_zeros(input);
                    conv2d_backward(
                        self.values[input.0].data(),
                        self.values[kernel.0].data(),
                        &g_out,
                        Some(&mut d_in),
                        None,
                        None,
                        n,
                        cin,
                        h,
                        w,
                        cout,
                        k,
                        stride,
                        padding,
                    );
                    self.grads[input.0] = Some(d_in);
                    let mut d_k = self.take_or_zeros(kernel);
                    conv2d_backward(
                        self.values[input.0].data(),
                        self.values[kernel.0].data(),
                        &g_out,
                        None,
                        Some(&mut d_k),
                        None,
                        n,
                        cin,
                        h,
                        w,
                        cout,
                        k,
                        stride,
                        padding,
                    );
                    self.grads[kernel.0] = Some(d_k);
                    if let Some(bid) = bias {
                        let mut d_b = self.take_or_zeros(bid);
                        conv2d_backward(
                            self.values[input.0].data(),
                            self.values[kernel.0].data(),
                            &g_out,
                            None,
                            None,
                            Some(&mut d_b),
                            n,
                            cin,
                            h,
                            w,
                            cout,
                            k,
                            stride,
                            padding,
                        );
                        self.grads[bid.0] = Some(d_b);
                    }
                }
                Op::LeakyRelu { input, slope } => {
                    let s = T::from_f64(slope);
                    let mut d_in = self.take_or_zeros(input);
                    for ((d, g), x) in d_in
                        .iter_mut()
                        .zip(&g_out)
                        .zip(self.values[input.0].data())
                    {
                        *d += if *x > T::ZERO { *g } else { *g * s };
                    }
                    self.grads[input.0] = Some(d_in);
                }
                Op::UpsampleNearest2 { input } => {
                    let [n, c, h, w] = self.values[input.0].dims4()?;
                    let mut d_in = self.take_or_zeros(input);
                    upsample_nearest2_backward(&g_out, &mut d_in, n * c, h, w);
                    self.grads[input.0] = Some(d_in);
                }
                Op::ConcatChannels { a, b } => {
                    let [n, ca, h, w] = self.values[a.0].dims4()?;
                    let [_, cb, _, _] = self.values[b.0].dims4()?;
                    let plane = h * w;
                    // take/store sequentially so a == b accumulates both halves
                    let mut d_a = self.take_or_zeros(a);
                    for bi in 0..n {
                        let base = bi * (ca + cb) * plane;
                        for (d, g) in d_a[bi * ca * plane..(bi + 1) * ca * plane]
                            .iter_mut()
                            .zip(&g_out[base..base + ca * plane])
                        {
                            *d += *g;
                        }
                    }
                    self.grads[a.0] = Some(d_a);
                    let mut d_b = self.take_or_zeros(b);
                    for bi in 0..n {
                        let base = bi * (ca + cb) * plane;
                        for (d, g) in d_b[bi * cb * plane..(bi + 1) * cb * plane]
                            .iter_mut()
                            .zip(&g_out[base + ca * plane..base + (ca + cb) * plane])
                        {
                            *d += *g;
                        }
                    }
                    self.grads[b.0] = Some(d_b);
                }
                Op::Linear { weight, x } => {
                    let (o, i) = {
                        let s = self.values[weight.0].shape();
                        (s[0], s[1])
                    };
                    let n = self.values[x.0].shape()[0];
                    let mut d_w = self.take_or_zeros(weight);
                    {
                        let xv = self.values[x.0].data();
                        for b in 0..n {
                            for oo in 0..o {
                                let g = g_out[b * o + oo];
                                for ii in 0..i {
                                    d_w[oo * i + ii] += g * xv[b * i + ii];
                                }
                            }
                        }
                    }
                    self.grads[weight.0] = Some(d_w);
                    let mut d_x = self.take_or_zeros(x);
                    {
                        let wv = self.values[weight.0].data();
                        for b in 0..n {
                            for oo in 0..o {
                                let g = g_out[b * o + oo];
                                for ii in 0..i {
                                    d_x[b * i + ii] += g * wv[oo * i + ii];
                                }
                            }
                        }
                    }
                    self.grads[x.0] = Some(d_x);
                }
                Op::BiasChannels { x, bias } => {
                    let [n, c, h, w] = self.values[x.0].dims4()?;
                    let mut d_x = self.take_or_zeros(x);
                    let mut d_b = self.take_or_zeros(bias);
                    for (d, g) in d_x.iter_mut().zip(&g_out) {
                        *d += *g;
                    }
                    for b in 0..n {
                        for ch in 0..c {
                            let mut acc = T::ZERO;
                            for g in &g_out[(b * c + ch) * h * w..(b * c + ch + 1) * h * w] {
                                acc += *g;
                            }
                            d_b[b * c + ch] += acc;
                        }
                    }
                    self.grads[x.0] = Some(d_x);
                    self.grads[bias.0] = Some(d_b);
                }
                Op::Add { a, b } => {
                    let mut d_a = self.take_or_zeros(a);
                    for (d, g) in d_a.iter_mut().zip(&g_out) {
                        *d += *g;
                    }
                    self.grads[a.0] = Some(d_a);
                    let mut d_b = self.take_or_zeros(b);
                    for (d, g) in d_b.iter_mut().zip(&g_out) {
                        *d += *g;
                    }
                    self.grads[b.0] = Some(d_b);
                }
                Op::Sub { a, b } => {
                    let mut d_a = self.take_or_zeros(a);
                    for (d, g) in d_a.iter_mut().zip(&g_out) {
                        *d += *g;
                    }
                    self.grads[a.0] = Some(d_a);
                    let mut d_b = self.take_or_zeros(b);
                    for (d, g) in d_b.iter_mut().zip(&g_out) {
                        *d -= *g;
                    }
                    self.grads[b.0] = Some(d_b);
                }
                Op::Mul { a, b } => {
                    let mut d_a = self.take_or_zeros(a);
                    for ((d, g), bv) in d_a.iter_mut().zip(&g_out).zip(self.values[b.0].data()) {
                        *d += *g * *bv;
                    }
                    self.grads[a.0] = Some(d_a);
                    let mut d_b = self.take_or_zeros(b);
                    for ((d, g), av) in d_b.iter_mut().zip(&g_out).zip(self.values[a.0].data()) {
                        *d += *g * *av;
                    }
                    self.grads[b.0] = Some(d_b);
                }
                Op::Scale { input, factor } => {
                    let f = T::from_f64(factor);
                    let mut d_in = self.take_or_zeros(input);
                    for (d, g) in d_in.iter_mut().zip(&g_out) {
                        *d += *g * f;
                    }
                    self.grads[input.0] = Some(d_in);
                }
                Op::AddScalar { input } => {
                    let mut d_in = self.take_or_zeros(input);
                    for (d, g) in d_in.iter_mut().zip(&g_out) {
                        *d += *g;
                    }
                    self.grads[input.0] = Some(d_in);
                }
                Op::Abs { input } => {
                    let mut d_in = self.take_or_zeros(input);
                    for ((d, g), x) in d_in
                        .iter_mut()
                        .zip(&g_out)
                        .zip(self.values[input.0].data())
                    {
                        // subgradient at 0 is 0
                        if *x > T::ZERO {
                            *d += *g;
                        } else if *x < T::ZERO {
                            *d -= *g;
                        }
                    }
                    self.grads[input.0] = Some(d_in);
                }
                Op::Sqrt { input } => {
                    let half = T::from_f64(0.5);
                    let mut d_in = self.take_or_zeros(input);
                    for ((d, g), y) in d_in.iter_mut().zip(&g_out).zip(self.values[idx].data()) {
                        *d += *g * half / *y;
                    }
                    self.grads[input.0] = Some(d_in);
                }
                Op::SumChannels { input } => {
                    let [n, c, h, w] = self.values[input.0].dims4()?;
                    let mut d_in = self.take_or_zeros(input);
                    for b in 0..n {
                        let g_plane = &g_out[b * h * w..(b + 1) * h * w];
                        for ch in 0..c {
                            for (d, g) in d_in
                                [(b * c + ch) * h * w..(b * c + ch + 1) * h * w]
                                .iter_mut()
                                .zip(g_plane)
                            {
                                *d += *g;
                            }
                        }
                    }
                    self.grads[input.0] = Some(d_in);
                }
                Op::SumAll { input } => {
                    let g = g_out[0];
                    let mut d_in = self.take_or_zeros(input);
                    for d in d_in.iter_mut() {
                        *d += g;
                    }
                    self.grads[input.0] = Some(d_in);
                }
            }
        }
        Ok(())
    }

    fn take_or_zeros(&mut self, id: NodeId) -> Vec<T> {
        let len = self.values[id.0].len();
        self.grads[id.0].take().unwrap_or_else(|| vec![T::ZERO; len])
    }
}

/// Maximum deviation between two gradient vectors, measured relative to the
/// largest component magnitude observed in either. A wrong backward formula
/// shows up at O(1) on this scale; finite-difference noise stays well below
/// the 32-bit 1e-3 and 64-bit 1e-6 thresholds.
pub fn max_scaled_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let scale = analytic
        .iter()
        .chain(numeric)
        .fold(0.0f64, |m, v| m.max(v.abs()))
        .max(1e-12);
    analytic
        .iter()
        .zip(numeric)
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()))
        / scale
}

/// Central finite differences of `f` with respect to `theta`, step `h`.
pub fn finite_difference<T: Scalar>(
    theta: &mut TensorBase<T>,
    h: f64,
    mut f: impl FnMut(&TensorBase<T>) -> f64,
) -> Vec<f64> {
    let mut out = Vec::with_capacity(theta.len());
    for i in 0..theta.len() {
        let orig = theta.data()[i];
        theta.data_mut()[i] = T::from_f64(orig.to_f64() + h);
        let up = f(theta);
        theta.data_mut()[i] = T::from_f64(orig.to_f64() - h);
        let down = f(theta);
        theta.data_mut()[i] = orig;
        out.push((up - down) / (2.0 * h));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn linear_loss_gradient_is_input_sum() {
        // loss = sum(w * x) for scalar w: dloss/dw = sum(x)
        let x = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let w = Tensor::full(vec![1, 1, 2, 2], 0.5);
        let mut g = Graph::new();
        let xid = g.input(&x);
        let wid = g.param(&w);
        let prod = g.mul(wid, xid).unwrap();
        let loss = g.sum_all(prod);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(wid).unwrap(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn constant_loss_gives_zero_gradient() {
        let x = Tensor::full(vec![4], 2.0);
        let w = Tensor::full(vec![4], 3.0);
        let mut g = Graph::new();
        let xid = g.input(&x);
        let wid = g.param(&w);
        let _unused = g.mul(wid, xid).unwrap();
        let loss = g.sum_all(xid);
        g.backward(loss).unwrap();
        assert!(g.grad(wid).is_none() || g.grad(wid).unwrap().iter().all(|v| *v == 0.0));
        assert_eq!(g.grad_tensor(wid).data(), &[0.0; 4]);
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let x = Tensor::full(vec![2, 2], 1.0);
        let mut g = Graph::new();
        let xid = g.param(&x);
        let y = g.scale(xid, 2.0);
        assert!(matches!(g.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn shared_parameter_accumulates() {
        // loss = sum(w*x + w*y) -> dw = x + y
        let w = Tensor::scalar(1.5f32);
        let x = Tensor::scalar(2.0f32);
        let y = Tensor::scalar(5.0f32);
        let mut g = Graph::new();
        let wid = g.param(&w);
        let xid = g.input(&x);
        let yid = g.input(&y);
        let a = g.mul(wid, xid).unwrap();
        let b = g.mul(wid, yid).unwrap();
        let s = g.add(a, b).unwrap();
        let loss = g.sum_all(s);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(wid).unwrap(), &[7.0]);
    }

    /// Gradient of sum((conv2d(x, k))^2) wrt the kernel, checked against
    /// central finite differences with step 1e-3.
    #[test]
    fn conv_squared_loss_matches_finite_differences_f32() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let x = Tensor::he_uniform(vec![1, 2, 6, 6], 4, &mut rng);
        let mut k = Tensor::he_uniform(vec![3, 2, 3, 3], 18, &mut rng);

        let loss_of = |kt: &Tensor| -> f64 {
            let mut g = Graph::new();
            let xid = g.input(&x);
            let kid = g.param(kt);
            let c = g.conv2d(xid, kid, None, 1, 1).unwrap();
            let sq = g.mul(c, c).unwrap();
            let l = g.sum_all(sq);
            g.value(l).item() as f64
        };

        let mut g = Graph::new();
        let xid = g.input(&x);
        let kid = g.param(&k);
        let c = g.conv2d(xid, kid, None, 1, 1).unwrap();
        let sq = g.mul(c, c).unwrap();
        let l = g.sum_all(sq);
        g.backward(l).unwrap();
        let analytic: Vec<f64> = g.grad(kid).unwrap().iter().map(|v| *v as f64).collect();

        let numeric = finite_difference(&mut k, 1e-3, |kt| loss_of(kt));
        let err = max_scaled_error(&analytic, &numeric);
        assert!(err < 1e-3, "relative error {} too large", err);
    }

    /// Uniform values bounded away from zero so finite differences never
    /// straddle the kinks of leaky_relu / abs.
    fn bounded_uniform<T: Scalar>(shape: Vec<usize>, rng: &mut impl Rng) -> TensorBase<T> {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let mag = rng.random_range(0.25..1.0);
                let sign = if rng.random_range(0..2) == 0 { -1.0 } else { 1.0 };
                T::from_f64(mag * sign)
            })
            .collect();
        TensorBase::new(shape, data).unwrap()
    }

    /// FD-vs-analytic check for a single differentiable parameter of an
    /// arbitrary scalar-valued graph.
    fn fd_check<T: Scalar>(
        theta: &mut TensorBase<T>,
        h: f64,
        tol: f64,
        name: &str,
        build: impl Fn(&mut GraphBase<T>, &TensorBase<T>) -> (NodeId, NodeId),
    ) {
        let mut g = GraphBase::<T>::new();
        let (pid, loss) = build(&mut g, theta);
        g.backward(loss).unwrap();
        let analytic: Vec<f64> = g
            .grad_tensor(pid)
            .data()
            .iter()
            .map(|v| v.to_f64())
            .collect();
        let numeric = finite_difference(theta, h, |t| {
            let mut g = GraphBase::<T>::new();
            let (_, l) = build(&mut g, t);
            g.value(l).item().to_f64()
        });
        let err = max_scaled_error(&analytic, &numeric);
        assert!(err < tol, "{}: gradient error {} over tolerance {}", name, err, tol);
    }

    /// Per-op gradient fidelity over randomized small shapes (<= 4x4x8x8):
    /// relative error < 1e-3 in 32-bit mode, < 1e-6 in the 64-bit shadow mode.
    #[test]
    fn per_op_gradients_match_finite_differences() {
        fn check<T: Scalar>(h: f64, tol: f64) {
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            for trial in 0..4 {
                let n = rng.random_range(1..3usize);
                let c = rng.random_range(1..5usize);
                let hh = rng.random_range(4..9usize) & !1; // even for upsample pairing
                let ww = rng.random_range(4..9usize) & !1;
                let cout = rng.random_range(1..4usize);
                let stride = if trial % 2 == 0 { 1 } else { 2 };
                let x = bounded_uniform::<T>(vec![n, c, hh, ww], &mut rng);
                let code = bounded_uniform::<T>(vec![n, 3], &mut rng);

                // conv2d wrt kernel and bias (linear in both, any point is fine)
                let mut k = bounded_uniform::<T>(vec![cout, c, 3, 3], &mut rng);
                fd_check(&mut k, h, tol, "conv2d/kernel", |g, t| {
                    let xid = g.input(&x);
                    let kid = g.param(t);
                    let conv = g.conv2d(xid, kid, None, stride, 1).unwrap();
                    let sq = g.mul(conv, conv).unwrap();
                    (kid, g.sum_all(sq))
                });
                let mut b = bounded_uniform::<T>(vec![cout], &mut rng);
                fd_check(&mut b, h, tol, "conv2d/bias", |g, t| {
                    let xid = g.input(&x);
                    let kid = g.input(&k);
                    let bid = g.param(t);
                    let conv = g.conv2d(xid, kid, Some(bid), stride, 1).unwrap();
                    let sq = g.mul(conv, conv).unwrap();
                    (bid, g.sum_all(sq))
                });

                // conv2d wrt its input (chained convs need it)
                let mut x2 = bounded_uniform::<T>(vec![n, c, hh, ww], &mut rng);
                fd_check(&mut x2, h, tol, "conv2d/input", |g, t| {
                    let xid = g.param(t);
                    let kid = g.input(&k);
                    let conv = g.conv2d(xid, kid, None, stride, 1).unwrap();
                    let sq = g.mul(conv, conv).unwrap();
                    (xid, g.sum_all(sq))
                });

                // leaky_relu at points bounded away from the kink
                let mut a = bounded_uniform::<T>(vec![n, c, hh, ww], &mut rng);
                fd_check(&mut a, h, tol, "leaky_relu", |g, t| {
                    let aid = g.param(t);
                    let act = g.leaky_relu(aid, 0.2);
                    let sq = g.mul(act, act).unwrap();
                    (aid, g.sum_all(sq))
                });

                // upsample + concat + sum_channels + scale/add/sub path
                let mut u = bounded_uniform::<T>(vec![n, c, hh / 2, ww / 2], &mut rng);
                fd_check(&mut u, h, tol, "upsample/concat/sum_channels", |g, t| {
                    let uid = g.param(t);
                    let up = g.upsample_nearest2(uid).unwrap();
                    let cat = g.concat_channels(up, up).unwrap();
                    let sc = g.sum_channels(cat).unwrap();
                    let sq = g.mul(sc, sc).unwrap();
                    let s = g.scale(sq, 0.5);
                    let s2 = g.add(s, s).unwrap();
                    let d = g.sub(s2, s).unwrap();
                    (uid, g.sum_all(d))
                });

                // linear + bias_channels
                let mut w2 = bounded_uniform::<T>(vec![c, 3], &mut rng);
                fd_check(&mut w2, h, tol, "linear/bias_channels", |g, t| {
                    let xid = g.input(&x);
                    let wid = g.param(t);
                    let cid = g.input(&code);
                    let proj = g.linear(wid, cid).unwrap();
                    let biased = g.bias_channels(xid, proj).unwrap();
                    let sq = g.mul(biased, biased).unwrap();
                    (wid, g.sum_all(sq))
                });

                // abs away from 0, sqrt on strictly positive values
                let mut v = bounded_uniform::<T>(vec![2, 5], &mut rng);
                fd_check(&mut v, h, tol, "abs", |g, t| {
                    let vid = g.param(t);
                    let av = g.abs(vid);
                    let sq = g.mul(av, av).unwrap();
                    (vid, g.sum_all(sq))
                });
                let mut p = bounded_uniform::<T>(vec![2, 5], &mut rng);
                fd_check(&mut p, h, tol, "sqrt", |g, t| {
                    let pid = g.param(t);
                    let sq = g.mul(pid, pid).unwrap();
                    let shifted = g.add_scalar(sq, 0.5);
                    let root = g.sqrt(shifted);
                    (pid, g.sum_all(root))
                });
            }
        }
        check::<f32>(1e-3, 1e-3);
        check::<f64>(1e-5, 1e-6);
    }
}

//! Dense multidimensional arrays (channels-first NCHW for image data) and the
//! raw convolution / resampling kernels shared by the autodiff graph and the
//! eager helpers.

use std::fmt::{Debug, Display};
use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};

use rand::Rng;

use crate::error::{Error, Result};

/// Element type of tensors. Parameters and the forward pass run in `f32`;
/// `f64` exists as a shadow mode for gradient checks only.
pub trait Scalar:
    Copy
    + PartialOrd
    + Default
    + Debug
    + Display
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
    + Send
    + Sync
    + 'static
{
    const ZERO: Self;
    const ONE: Self;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn sqrt(self) -> Self;
    fn abs(self) -> Self;
    fn is_finite(self) -> bool;
}

impl Scalar for f32 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn sqrt(self) -> Self {
        f32::sqrt(self)
    }
    fn abs(self) -> Self {
        f32::abs(self)
    }
    fn is_finite(self) -> bool {
        f32::is_finite(self)
    }
}

impl Scalar for f64 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn abs(self) -> Self {
        f64::abs(self)
    }
    fn is_finite(self) -> bool {
        f64::is_finite(self)
    }
}

/// Contiguous dense array. `grad`, when present, has the same length as
/// `data`; it is populated by [`crate::graph::Graph::backward`] for
/// parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorBase<T: Scalar> {
    shape: Vec<usize>,
    data: Vec<T>,
    grad: Option<Vec<T>>,
}

pub type Tensor = TensorBase<f32>;

impl<T: Scalar> TensorBase<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(TensorBase {
            shape,
            data,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        TensorBase {
            shape,
            data: vec![T::ZERO; n],
            grad: None,
        }
    }

    pub fn full(shape: Vec<usize>, value: T) -> Self {
        let n: usize = shape.iter().product();
        TensorBase {
            shape,
            data: vec![value; n],
            grad: None,
        }
    }

    pub fn scalar(value: T) -> Self {
        TensorBase {
            shape: vec![1],
            data: vec![value],
            grad: None,
        }
    }

    /// Fan-in-scaled uniform init (He-style): U(-b, b) with b = sqrt(6 / fan_in).
    pub fn he_uniform(shape: Vec<usize>, fan_in: usize, rng: &mut impl Rng) -> Self {
        let bound = (6.0 / fan_in.max(1) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| T::from_f64(rng.random_range(-bound..bound)))
            .collect();
        TensorBase {
            shape,
            data,
            grad: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<T>) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(Error::Shape(format!(
                "gradient length {} does not match tensor length {}",
                grad.len(),
                self.data.len()
            )));
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Scalar value of a single-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn cast<U: Scalar>(&self) -> TensorBase<U> {
        TensorBase {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.to_f64())).collect(),
            grad: None,
        }
    }

    /// Dimensions of an NCHW tensor.
    pub fn dims4(&self) -> Result<[usize; 4]> {
        match self.shape[..] {
            [n, c, h, w] => Ok([n, c, h, w]),
            _ => Err(Error::Shape(format!(
                "expected 4-d NCHW tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data
            .iter()
            .fold(0.0f64, |m, v| m.max(v.to_f64().abs()))
    }
}

impl Tensor {
    /// Nearest-neighbor x2 upsample of an NCHW tensor (eager).
    pub fn upsample_nearest2(&self) -> Result<Tensor> {
        let [n, c, h, w] = self.dims4()?;
        let mut out = Tensor::zeros(vec![n, c, 2 * h, 2 * w]);
        upsample_nearest2_forward(self.data(), out.data_mut(), n * c, h, w);
        Ok(out)
    }

    /// 2x2 average-pool downsample of an NCHW tensor (eager). H and W must be even.
    pub fn downsample_avg2(&self) -> Result<Tensor> {
        let [n, c, h, w] = self.dims4()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Shape(format!(
                "downsample_avg2 needs even spatial extents, got {}x{}",
                h, w
            )));
        }
        let (oh, ow) = (h / 2, w / 2);
        let mut out = Tensor::zeros(vec![n, c, oh, ow]);
        for p in 0..n * c {
            let src = &self.data()[p * h * w..(p + 1) * h * w];
            let dst = &mut out.data_mut()[p * oh * ow..(p + 1) * oh * ow];
            for y in 0..oh {
                for x in 0..ow {
                    let s = src[2 * y * w + 2 * x]
                        + src[2 * y * w + 2 * x + 1]
                        + src[(2 * y + 1) * w + 2 * x]
                        + src[(2 * y + 1) * w + 2 * x + 1];
                    dst[y * ow + x] = s * 0.25;
                }
            }
        }
        Ok(out)
    }

    /// Reflect-pad the bottom/right of an NCHW tensor so both spatial extents
    /// become multiples of `multiple`. Returns the padded tensor and the
    /// original extents for cropping back.
    pub fn reflect_pad_to_multiple(&self, multiple: usize) -> Result<(Tensor, usize, usize)> {
        let [n, c, h, w] = self.dims4()?;
        let ph = h.div_ceil(multiple) * multiple;
        let pw = w.div_ceil(multiple) * multiple;
        if ph == h && pw == w {
            return Ok((self.clone(), h, w));
        }
        if ph - h >= h || pw - w >= w {
            return Err(Error::Shape(format!(
                "input {}x{} too small to reflect-pad to a multiple of {}",
                h, w, multiple
            )));
        }
        let mut out = Tensor::zeros(vec![n, c, ph, pw]);
        for p in 0..n * c {
            let src = &self.data()[p * h * w..(p + 1) * h * w];
            let dst = &mut out.data_mut()[p * ph * pw..(p + 1) * ph * pw];
            for y in 0..ph {
                let sy = if y < h { y } else { 2 * h - 2 - y };
                for x in 0..pw {
                    let sx = if x < w { x } else { 2 * w - 2 - x };
                    dst[y * pw + x] = src[sy * w + sx];
                }
            }
        }
        Ok((out, h, w))
    }

    /// Crop the top-left h x w region of an NCHW tensor.
    pub fn crop(&self, h: usize, w: usize) -> Result<Tensor> {
        let [n, c, fh, fw] = self.dims4()?;
        if h > fh || w > fw {
            return Err(Error::Shape(format!(
                "crop {}x{} exceeds tensor extent {}x{}",
                h, w, fh, fw
            )));
        }
        let mut out = Tensor::zeros(vec![n, c, h, w]);
        for p in 0..n * c {
            let src = &self.data()[p * fh * fw..(p + 1) * fh * fw];
            let dst = &mut out.data_mut()[p * h * w..(p + 1) * h * w];
            for y in 0..h {
                dst[y * w..(y + 1) * w].copy_from_slice(&src[y * fw..y * fw + w]);
            }
        }
        Ok(out)
    }
}

/// Output spatial extent of a convolution.
pub fn conv_out_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> usize {
    (input + 2 * padding - kernel) / stride + 1
}

/// Validated conv2d geometry.
#[derive(Debug, Clone, Copy)]
pub struct ConvDims {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub oh: usize,
    pub ow: usize,
}

/// Validate conv2d argument shapes.
pub fn conv2d_check<T: Scalar>(
    input: &TensorBase<T>,
    kernel: &TensorBase<T>,
    bias: Option<&TensorBase<T>>,
    stride: usize,
    padding: usize,
) -> Result<ConvDims> {
    let [n, cin, h, w] = input.dims4()?;
    let [cout, kcin, kh, kw] = kernel.dims4()?;
    if kh != kw {
        return Err(Error::Shape(format!("conv kernel must be square, got {}x{}", kh, kw)));
    }
    if kh % 2 == 0 {
        return Err(Error::Shape(format!("conv kernel must be odd-sized, got {}", kh)));
    }
    if kcin != cin {
        return Err(Error::Shape(format!(
            "conv input has {} channels but kernel expects {}",
            cin, kcin
        )));
    }
    if stride == 0 {
        return Err(Error::Shape("conv stride must be >= 1".into()));
    }
    if let Some(b) = bias {
        if b.len() != cout {
            return Err(Error::Shape(format!(
                "conv bias length {} does not match {} output channels",
                b.len(),
                cout
            )));
        }
    }
    if h + 2 * padding < kh || w + 2 * padding < kw {
        return Err(Error::Shape(format!(
            "conv input {}x{} (padding {}) smaller than kernel {}",
            h, w, padding, kh
        )));
    }
    let oh = conv_out_extent(h, kh, stride, padding);
    let ow = conv_out_extent(w, kw, stride, padding);
    Ok(ConvDims {
        n,
        cin,
        h,
        w,
        cout,
        k: kh,
        oh,
        ow,
    })
}

/// Cross-correlation:
/// `out[n,co,y,x] = bias[co] + sum_{ci,kh,kw} in[n,ci,y*s-p+kh,x*s-p+kw] * k[co,ci,kh,kw]`.
#[allow(clippy::too_many_arguments, clippy::needless_range_loop)]
pub fn conv2d_forward<T: Scalar>(
    input: &[T],
    kernel: &[T],
    bias: Option<&[T]>,
    out: &mut [T],
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    stride: usize,
    padding: usize,
) {
    let oh = conv_out_extent(h, k, stride, padding);
    let ow = conv_out_extent(w, k, stride, padding);
    for b in 0..n {
        for co in 0..cout {
            let out_plane = &mut out[(b * cout + co) * oh * ow..(b * cout + co + 1) * oh * ow];
            if let Some(bias) = bias {
                out_plane.iter_mut().for_each(|v| *v = bias[co]);
            }
            for ci in 0..cin {
                let in_plane = &input[(b * cin + ci) * h * w..(b * cin + ci + 1) * h * w];
                let k_plane = &kernel[(co * cin + ci) * k * k..(co * cin + ci + 1) * k * k];
                for oy in 0..oh {
                    let iy0 = (oy * stride) as isize - padding as isize;
                    for kh in 0..k {
                        let iy = iy0 + kh as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let in_row = &in_plane[iy as usize * w..(iy as usize + 1) * w];
                        let out_row = &mut out_plane[oy * ow..(oy + 1) * ow];
                        for kw in 0..k {
                            let kv = k_plane[kh * k + kw];
                            // valid ox range: 0 <= ox*stride - padding + kw < w
                            let off = kw as isize - padding as isize;
                            let ox_lo = if off >= 0 {
                                0
                            } else {
                                ((-off) as usize).div_ceil(stride)
                            };
                            let ox_hi_excl = if (w as isize) > off {
                                (((w as isize - off - 1) as usize) / stride + 1).min(ow)
                            } else {
                                0
                            };
                            if stride == 1 {
                                let lo = ox_lo;
                                let hi = ox_hi_excl;
                                if lo >= hi {
                                    continue;
                                }
                                let src = &in_row[(lo as isize + off) as usize
                                    ..(hi as isize - 1 + off) as usize + 1];
                                for (o, s) in out_row[lo..hi].iter_mut().zip(src) {
                                    *o += kv * *s;
                                }
                            } else {
                                for ox in ox_lo..ox_hi_excl {
                                    let ix = (ox * stride) as isize + off;
                                    out_row[ox] += kv * in_row[ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Gradients of conv2d. Accumulates (+=) into the provided buffers; any of
/// them may be absent.
#[allow(clippy::too_many_arguments, clippy::needless_range_loop)]
pub fn conv2d_backward<T: Scalar>(
    input: &[T],
    kernel: &[T],
    d_out: &[T],
    d_input: Option<&mut [T]>,
    d_kernel: Option<&mut [T]>,
    d_bias: Option<&mut [T]>,
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    stride: usize,
    padding: usize,
) {
    let oh = conv_out_extent(h, k, stride, padding);
    let ow = conv_out_extent(w, k, stride, padding);
    if let Some(d_bias) = d_bias {
        for b in 0..n {
            for co in 0..cout {
                let d_plane = &d_out[(b * cout + co) * oh * ow..(b * cout + co + 1) * oh * ow];
                let mut acc = T::ZERO;
                for v in d_plane {
                    acc += *v;
                }
                d_bias[co] += acc;
            }
        }
    }
    // valid output range for a kernel column: 0 <= ox*stride + kw - padding < w
    let ox_range = |kw: usize| -> (usize, usize) {
        let off = kw as isize - padding as isize;
        let lo = if off >= 0 {
            0
        } else {
            ((-off) as usize).div_ceil(stride)
        };
        let hi = if (w as isize) > off {
            (((w as isize - off - 1) as usize) / stride + 1).min(ow)
        } else {
            0
        };
        (lo, hi)
    };
    if let Some(d_kernel) = d_kernel {
        for b in 0..n {
            for co in 0..cout {
                let d_plane = &d_out[(b * cout + co) * oh * ow..(b * cout + co + 1) * oh * ow];
                for ci in 0..cin {
                    let in_plane = &input[(b * cin + ci) * h * w..(b * cin + ci + 1) * h * w];
                    let dk_plane =
                        &mut d_kernel[(co * cin + ci) * k * k..(co * cin + ci + 1) * k * k];
                    for kh in 0..k {
                        for kw in 0..k {
                            let off = kw as isize - padding as isize;
                            let (lo, hi) = ox_range(kw);
                            if lo >= hi {
                                continue;
                            }
                            let mut acc = T::ZERO;
                            for oy in 0..oh {
                                let iy = (oy * stride) as isize - padding as isize + kh as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                let in_row = &in_plane[iy as usize * w..(iy as usize + 1) * w];
                                let d_row = &d_plane[oy * ow..(oy + 1) * ow];
                                if stride == 1 {
                                    let src = &in_row[(lo as isize + off) as usize
                                        ..(hi as isize - 1 + off) as usize + 1];
                                    for (dv, iv) in d_row[lo..hi].iter().zip(src) {
                                        acc += *dv * *iv;
                                    }
                                } else {
                                    for ox in lo..hi {
                                        let ix = (ox * stride) as isize + off;
                                        acc += d_row[ox] * in_row[ix as usize];
                                    }
                                }
                            }
                            dk_plane[kh * k + kw] += acc;
                        }
                    }
                }
            }
        }
    }
    if let Some(d_input) = d_input {
        for b in 0..n {
            for co in 0..cout {
                let d_plane = &d_out[(b * cout + co) * oh * ow..(b * cout + co + 1) * oh * ow];
                for ci in 0..cin {
                    let di_plane =
                        &mut d_input[(b * cin + ci) * h * w..(b * cin + ci + 1) * h * w];
                    let k_plane = &kernel[(co * cin + ci) * k * k..(co * cin + ci + 1) * k * k];
                    for oy in 0..oh {
                        let iy0 = (oy * stride) as isize - padding as isize;
                        for kh in 0..k {
                            let iy = iy0 + kh as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let di_row =
                                &mut di_plane[iy as usize * w..(iy as usize + 1) * w];
                            let d_row = &d_plane[oy * ow..(oy + 1) * ow];
                            for kw in 0..k {
                                let kv = k_plane[kh * k + kw];
                                let off = kw as isize - padding as isize;
                                let (lo, hi) = ox_range(kw);
                                if lo >= hi {
                                    continue;
                                }
                                if stride == 1 {
                                    let dst = &mut di_row[(lo as isize + off) as usize
                                        ..(hi as isize - 1 + off) as usize + 1];
                                    for (iv, dv) in dst.iter_mut().zip(&d_row[lo..hi]) {
                                        *iv += kv * *dv;
                                    }
                                } else {
                                    for ox in lo..hi {
                                        let ix = (ox * stride) as isize + off;
                                        di_row[ix as usize] += kv * d_row[ox];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

pub fn upsample_nearest2_forward<T: Scalar>(
    input: &[T],
    out: &mut [T],
    planes: usize,
    h: usize,
    w: usize,
) {
    let (oh, ow) = (2 * h, 2 * w);
    for p in 0..planes {
        let src = &input[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for y in 0..oh {
            let sy = y / 2;
            for x in 0..ow {
                dst[y * ow + x] = src[sy * w + x / 2];
            }
        }
    }
}

pub fn upsample_nearest2_backward<T: Scalar>(
    d_out: &[T],
    d_input: &mut [T],
    planes: usize,
    h: usize,
    w: usize,
) {
    let (oh, ow) = (2 * h, 2 * w);
    for p in 0..planes {
        let src = &d_out[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut d_input[p * h * w..(p + 1) * h * w];
        for y in 0..oh {
            let sy = y / 2;
            for x in 0..ow {
                dst[sy * w + x / 2] += src[y * ow + x];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_mismatched_shape() {
        assert!(matches!(
            Tensor::new(vec![2, 3], vec![0.0; 5]),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn conv_identity_kernel() {
        // 1x1x1x1 input value 3, 1x1x1x1 kernel value 1, bias 0 -> 3
        let input = Tensor::new(vec![1, 1, 1, 1], vec![3.0]).unwrap();
        let kernel = Tensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap();
        let mut out = Tensor::zeros(vec![1, 1, 1, 1]);
        conv2d_forward(
            input.data(),
            kernel.data(),
            Some(&[0.0]),
            out.data_mut(),
            1,
            1,
            1,
            1,
            1,
            1,
            1,
            0,
        );
        assert_eq!(out.data(), &[3.0]);
    }

    // Independent oracle: direct summation over the definition, no range tricks.
    #[allow(clippy::needless_range_loop)]
    fn conv_naive(
        input: &Tensor,
        kernel: &Tensor,
        bias: &[f32],
        stride: usize,
        padding: usize,
    ) -> Tensor {
        let [n, cin, h, w] = input.dims4().unwrap();
        let [cout, _, k, _] = kernel.dims4().unwrap();
        let oh = conv_out_extent(h, k, stride, padding);
        let ow = conv_out_extent(w, k, stride, padding);
        let mut out = Tensor::zeros(vec![n, cout, oh, ow]);
        for b in 0..n {
            for co in 0..cout {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = bias[co] as f64;
                        for ci in 0..cin {
                            for kh in 0..k {
                                for kw in 0..k {
                                    let iy = (oy * stride + kh) as isize - padding as isize;
                                    let ix = (ox * stride + kw) as isize - padding as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w
                                    {
                                        let iv = input.data()
                                            [((b * cin + ci) * h + iy as usize) * w + ix as usize];
                                        let kv =
                                            kernel.data()[((co * cin + ci) * k + kh) * k + kw];
                                        acc += iv as f64 * kv as f64;
                                    }
                                }
                            }
                        }
                        out.data_mut()[((b * cout + co) * oh + oy) * ow + ox] = acc as f32;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_all_ones_3x3() {
        // 3x3 ones input, 3x3 ones kernel, pad 1: center 9, edge-midpoints 6, corners 4.
        let input = Tensor::full(vec![1, 1, 3, 3], 1.0);
        let kernel = Tensor::full(vec![1, 1, 3, 3], 1.0);
        let mut out = Tensor::zeros(vec![1, 1, 3, 3]);
        conv2d_forward(
            input.data(),
            kernel.data(),
            Some(&[0.0]),
            out.data_mut(),
            1,
            1,
            3,
            3,
            1,
            3,
            1,
            1,
        );
        assert_eq!(
            out.data(),
            &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]
        );
        let oracle = conv_naive(&input, &kernel, &[0.0], 1, 1);
        assert_eq!(out.data(), oracle.data());
    }

    #[test]
    fn conv_zero_kernel_gives_bias() {
        let input = Tensor::new(vec![1, 2, 4, 4], (0..32).map(|v| v as f32).collect()).unwrap();
        let kernel = Tensor::zeros(vec![3, 2, 3, 3]);
        let mut out = Tensor::zeros(vec![1, 3, 4, 4]);
        conv2d_forward(
            input.data(),
            kernel.data(),
            Some(&[1.5, -2.0, 0.25]),
            out.data_mut(),
            1,
            2,
            4,
            4,
            3,
            3,
            1,
            1,
        );
        for co in 0..3 {
            let expect = [1.5, -2.0, 0.25][co];
            assert!(out.data()[co * 16..(co + 1) * 16].iter().all(|v| *v == expect));
        }
    }

    #[test]
    fn conv_matches_naive_on_random_shapes() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for &(n, cin, cout, h, w, k, stride) in &[
            (1usize, 1usize, 1usize, 5usize, 7usize, 3usize, 1usize),
            (2, 3, 4, 6, 6, 3, 1),
            (1, 2, 3, 8, 5, 5, 1),
            (2, 4, 2, 8, 8, 3, 2),
            (1, 3, 5, 7, 9, 3, 2),
        ] {
            let padding = (k - 1) / 2;
            let input = Tensor::he_uniform(vec![n, cin, h, w], 4, &mut rng);
            let kernel = Tensor::he_uniform(vec![cout, cin, k, k], cin * k * k, &mut rng);
            let bias: Vec<f32> = (0..cout).map(|_| rng.random_range(-0.5..0.5)).collect();
            let oh = conv_out_extent(h, k, stride, padding);
            let ow = conv_out_extent(w, k, stride, padding);
            let mut out = Tensor::zeros(vec![n, cout, oh, ow]);
            conv2d_forward(
                input.data(),
                kernel.data(),
                Some(&bias),
                out.data_mut(),
                n,
                cin,
                h,
                w,
                cout,
                k,
                stride,
                padding,
            );
            let oracle = conv_naive(&input, &kernel, &bias, stride, padding);
            for (a, b) in out.data().iter().zip(oracle.data()) {
                assert!((a - b).abs() < 1e-4, "conv mismatch: {} vs {}", a, b);
            }
        }
    }

    #[test]
    fn conv_is_linear_in_its_input() {
        use proptest::prelude::*;
        let mut runner = proptest::test_runner::TestRunner::deterministic();
        runner
            .run(
                &(
                    proptest::collection::vec(-1.0f32..1.0, 2 * 5 * 5),
                    proptest::collection::vec(-1.0f32..1.0, 2 * 5 * 5),
                    proptest::collection::vec(-0.5f32..0.5, 3 * 2 * 3 * 3),
                    -2.0f32..2.0,
                    -2.0f32..2.0,
                ),
                |(xd, yd, kd, a, b)| {
                    let x = Tensor::new(vec![1, 2, 5, 5], xd).unwrap();
                    let y = Tensor::new(vec![1, 2, 5, 5], yd).unwrap();
                    let kernel = Tensor::new(vec![3, 2, 3, 3], kd).unwrap();
                    let run = |input: &Tensor| {
                        let mut out = Tensor::zeros(vec![1, 3, 5, 5]);
                        conv2d_forward(
                            input.data(),
                            kernel.data(),
                            None,
                            out.data_mut(),
                            1,
                            2,
                            5,
                            5,
                            3,
                            3,
                            1,
                            1,
                        );
                        out
                    };
                    let mixed_input = Tensor::new(
                        vec![1, 2, 5, 5],
                        x.data()
                            .iter()
                            .zip(y.data())
                            .map(|(xv, yv)| a * xv + b * yv)
                            .collect(),
                    )
                    .unwrap();
                    let lhs = run(&mixed_input);
                    let cx = run(&x);
                    let cy = run(&y);
                    for ((l, rx), ry) in lhs.data().iter().zip(cx.data()).zip(cy.data()) {
                        let rhs = a * rx + b * ry;
                        prop_assert!((l - rhs).abs() < 1e-5, "{} vs {}", l, rhs);
                    }
                    Ok(())
                },
            )
            .unwrap();
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let input = Tensor::zeros(vec![1, 3, 4, 4]);
        let kernel = Tensor::zeros(vec![2, 4, 3, 3]);
        assert!(matches!(
            conv2d_check(&input, &kernel, None, 1, 1),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn upsample_then_average_is_identity_on_constants() {
        let t = Tensor::full(vec![2, 3, 4, 4], 0.7);
        let up = t.upsample_nearest2().unwrap();
        assert_eq!(up.shape(), &[2, 3, 8, 8]);
        let down = up.downsample_avg2().unwrap();
        assert_eq!(down.shape(), t.shape());
        for (a, b) in down.data().iter().zip(t.data()) {
            assert!((a - b).abs() < 1e-7);
        }
    }

    #[test]
    fn reflect_pad_and_crop_roundtrip() {
        let t = Tensor::new(vec![1, 1, 5, 6], (0..30).map(|v| v as f32).collect()).unwrap();
        let (padded, h, w) = t.reflect_pad_to_multiple(4).unwrap();
        assert_eq!(padded.shape(), &[1, 1, 8, 8]);
        // reflected row: row 5 mirrors row 3 (2*5-2-5)
        assert_eq!(padded.data()[5 * 8], t.data()[3 * 6]);
        let back = padded.crop(h, w).unwrap();
        assert_eq!(back.data(), t.data());
    }
}

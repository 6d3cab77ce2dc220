//! Dense n-dimensional tensors and the raw forward/backward kernels used by
//! the autodiff tape.
//!
//! Layout is always contiguous row-major. Image tensors are `[B, C, H, W]`.
//! Kernels are free functions over tensors; the tape in [`crate::autodiff`]
//! records which kernel produced a value and calls the matching backward
//! kernel.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, NumCast};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floating point element type. `f32` for training and inference, `f64` for
/// gradient checking.
pub trait Scalar:
    Float + Default + Debug + Display + Send + Sync + 'static + AddAssign + SubAssign + MulAssign + Sum
{
    /// Row-major GEMM `c = alpha * a * b + beta * c` with explicit strides.
    ///
    /// # Safety
    /// Strides and extents must describe memory inside the three buffers.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn lit(v: f64) -> Self {
        <Self as NumCast>::from(v).expect("literal representable")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Scalar for f64 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// Matrix operand: a buffer viewed as `rows x cols`, optionally transposed.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a, T> {
    pub data: &'a [T],
    pub rows: usize,
    pub cols: usize,
    pub transposed: bool,
}

impl<'a, T> MatRef<'a, T> {
    pub fn new(data: &'a [T], rows: usize, cols: usize) -> Self {
        Self {
            data,
            rows,
            cols,
            transposed: false,
        }
    }

    /// The transpose of this operand (no data movement).
    pub fn t(self) -> Self {
        Self {
            transposed: !self.transposed,
            ..self
        }
    }

    fn logical(&self) -> (usize, usize) {
        if self.transposed {
            (self.cols, self.rows)
        } else {
            (self.rows, self.cols)
        }
    }

    fn strides(&self) -> (isize, isize) {
        if self.transposed {
            (1, self.cols as isize)
        } else {
            (self.cols as isize, 1)
        }
    }
}

/// `c[m x n] = a * b + beta * c`.
pub(crate) fn gemm<T: Scalar>(a: MatRef<'_, T>, b: MatRef<'_, T>, beta: T, c: &mut [T]) {
    let (m, k) = a.logical();
    let (k2, n) = b.logical();
    assert_eq!(k, k2, "gemm inner extents");
    assert!(a.data.len() >= a.rows * a.cols && b.data.len() >= b.rows * b.cols);
    assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in &mut c[..m * n] {
            *v = *v * beta;
        }
        return;
    }
    let (rsa, csa) = a.strides();
    let (rsb, csb) = b.strides();
    // SAFETY: extents checked above against buffer lengths.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
    grad: Option<Vec<T>>,
}

impl<T: Scalar> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let preview: Vec<T> = self.data.iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data[..8]", &preview)
            .field("has_grad", &self.grad.is_some())
            .finish()
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if numel(&shape) != data.len() {
            return Err(Error::dim(
                "tensor",
                format!("shape {:?} needs {} values, got {}", shape, numel(&shape), data.len()),
            ));
        }
        if shape.len() > 5 {
            return Err(Error::dim("tensor", format!("rank {} exceeds 5", shape.len())));
        }
        Ok(Self {
            shape,
            data,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel(shape)],
            grad: None,
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        Self {
            shape: shape.to_vec(),
            data: (0..numel(shape)).map(&mut f).collect(),
            grad: None,
        }
    }

    pub fn scalar(v: T) -> Self {
        Self {
            shape: vec![],
            data: vec![v],
            grad: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
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

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<T>) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(Error::dim(
                "set_grad",
                format!("gradient of length {} for shape {:?}", grad.len(), self.shape),
            ));
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Scalar value of a rank-0 (or single-element) tensor.
    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn at(&self, index: &[usize]) -> T {
        self.data[self.offset(index)]
    }

    fn offset(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.shape.len(), "index rank");
        index
            .iter()
            .zip(&self.shape)
            .fold(0, |acc, (&i, &n)| {
                assert!(i < n, "index out of bounds");
                acc * n + i
            })
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.len() {
            return Err(Error::dim(
                "reshape",
                format!("{:?} -> {:?}", self.shape, shape),
            ));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: self.data.clone(),
            grad: None,
        })
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
            grad: None,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn ensure_finite(self, op: &'static str) -> Result<Self> {
        if self.is_finite() {
            Ok(self)
        } else {
            Err(Error::Numeric { op })
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
            grad: None,
        }
    }

    /// Maximum absolute elementwise difference; shapes must match.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    Valid,
    Same,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride_h: usize,
    pub stride_w: usize,
    pub padding: Padding,
}

impl ConvSpec {
    pub fn new(out_channels: usize, kernel: (usize, usize), stride: (usize, usize), padding: Padding) -> Self {
        Self {
            out_channels,
            kernel_h: kernel.0,
            kernel_w: kernel.1,
            stride_h: stride.0,
            stride_w: stride.1,
            padding,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.out_channels == 0 || self.kernel_h == 0 || self.kernel_w == 0 || self.stride_h == 0 || self.stride_w == 0 {
            return Err(Error::geometry(
                "conv_spec",
                format!("extents must be >= 1: {self:?}"),
            ));
        }
        Ok(())
    }

    /// Output spatial extents for an `h x w` input.
    pub fn output_extent(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        self.validate()?;
        let (oh, _) = window_extent("conv2d", h, self.kernel_h, self.stride_h, self.padding)?;
        let (ow, _) = window_extent("conv2d", w, self.kernel_w, self.stride_w, self.padding)?;
        Ok((oh, ow))
    }

    /// Kernel taps that touch at least one input pixel for an `h x w` input.
    pub fn live_taps(&self, h: usize, w: usize) -> Result<usize> {
        self.validate()?;
        let axis = |n: usize, k: usize, stride: usize| -> Result<usize> {
            let (out, pad) = window_extent("conv2d", n, k, stride, self.padding)?;
            Ok((0..k)
                .filter(|&j| {
                    let (lo, hi) = valid_range(j, pad, stride, n, out);
                    lo < hi
                })
                .count())
        };
        Ok(axis(h, self.kernel_h, self.stride_h)? * axis(w, self.kernel_w, self.stride_w)?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolSpec {
    pub pool_h: usize,
    pub pool_w: usize,
    pub stride_h: usize,
    pub stride_w: usize,
    pub padding: Padding,
}

impl PoolSpec {
    pub fn new(pool: (usize, usize), stride: (usize, usize), padding: Padding) -> Self {
        Self {
            pool_h: pool.0,
            pool_w: pool.1,
            stride_h: stride.0,
            stride_w: stride.1,
            padding,
        }
    }

    pub fn output_extent(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        if self.pool_h == 0 || self.pool_w == 0 || self.stride_h == 0 || self.stride_w == 0 {
            return Err(Error::geometry("maxpool2d", format!("extents must be >= 1: {self:?}")));
        }
        let (oh, _) = window_extent("maxpool2d", h, self.pool_h, self.stride_h, self.padding)?;
        let (ow, _) = window_extent("maxpool2d", w, self.pool_w, self.stride_w, self.padding)?;
        Ok((oh, ow))
    }
}

/// Output extent and leading pad along one axis.
///
/// `Same` follows the usual convention: `out = ceil(n / stride)` with the
/// total padding split so the extra cell (if any) goes after.
fn window_extent(op: &str, n: usize, k: usize, stride: usize, padding: Padding) -> Result<(usize, usize)> {
    match padding {
        Padding::Valid => {
            if n < k {
                return Err(Error::geometry(
                    op,
                    format!("window {k} does not fit input extent {n} (output extent < 1)"),
                ));
            }
            Ok(((n - k) / stride + 1, 0))
        }
        Padding::Same => {
            if n == 0 {
                return Err(Error::geometry(op, "empty input extent"));
            }
            let out = n.div_ceil(stride);
            let total = ((out - 1) * stride + k).saturating_sub(n);
            Ok((out, total / 2))
        }
    }
}

fn expect_rank<T: Scalar>(op: &'static str, t: &Tensor<T>, rank: usize) -> Result<()> {
    if t.rank() != rank {
        return Err(Error::dim(op, format!("expected rank {rank}, got shape {:?}", t.shape())));
    }
    Ok(())
}

/// Resolved geometry of one convolution application.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub kh: usize,
    pub kw: usize,
    pub sh: usize,
    pub sw: usize,
    pub oh: usize,
    pub ow: usize,
    pub pad_top: usize,
    pub pad_left: usize,
}

impl ConvGeom {
    fn resolve<T: Scalar>(input: &Tensor<T>, weights: &Tensor<T>, bias: Option<&Tensor<T>>, spec: &ConvSpec) -> Result<Self> {
        expect_rank("conv2d", input, 4)?;
        expect_rank("conv2d", weights, 4)?;
        spec.validate()?;
        let [n, c, h, w] = [input.shape[0], input.shape[1], input.shape[2], input.shape[3]];
        let [k, wc, kh, kw] = [weights.shape[0], weights.shape[1], weights.shape[2], weights.shape[3]];
        if wc != c || k != spec.out_channels || kh != spec.kernel_h || kw != spec.kernel_w {
            return Err(Error::dim(
                "conv2d",
                format!("input {:?} incompatible with weights {:?} under {:?}", input.shape, weights.shape, spec),
            ));
        }
        if let Some(b) = bias {
            if b.shape() != [k] {
                return Err(Error::dim("conv2d", format!("bias {:?} for {k} output channels", b.shape())));
            }
        }
        let (oh, pad_top) = window_extent("conv2d", h, kh, spec.stride_h, spec.padding)?;
        let (ow, pad_left) = window_extent("conv2d", w, kw, spec.stride_w, spec.padding)?;
        Ok(Self {
            n,
            c,
            h,
            w,
            k,
            kh,
            kw,
            sh: spec.stride_h,
            sw: spec.stride_w,
            oh,
            ow,
            pad_top,
            pad_left,
        })
    }

    fn patch(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.oh * self.ow
    }
}

/// Valid output range `[lo, hi)` along one axis for kernel offset `k`.
#[inline]
fn valid_range(k: usize, pad: usize, stride: usize, n_in: usize, n_out: usize) -> (usize, usize) {
    // need 0 <= o * stride + k - pad < n_in
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    let hi = if n_in + pad > k { (n_in + pad - k - 1) / stride + 1 } else { 0 };
    (lo.min(n_out), hi.min(n_out).max(lo.min(n_out)))
}

/// Unfolds one image `[C, H, W]` into columns `off..off + OH*OW` of a column
/// matrix with leading dimension `ld` and `C*kh*kw` rows.
fn im2col<T: Scalar>(g: &ConvGeom, src: &[T], cols: &mut [T], ld: usize, off: usize) {
    let p = g.positions();
    for ci in 0..g.c {
        let plane = &src[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            let (y_lo, y_hi) = valid_range(ki, g.pad_top, g.sh, g.h, g.oh);
            for kj in 0..g.kw {
                let (x_lo, x_hi) = valid_range(kj, g.pad_left, g.sw, g.w, g.ow);
                let row = (ci * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * ld + off..row * ld + off + p];
                if y_lo > 0 || y_hi < g.oh || x_lo > 0 || x_hi < g.ow {
                    dst.fill(T::zero());
                }
                for oy in y_lo..y_hi {
                    let iy = oy * g.sh + ki - g.pad_top;
                    let src_row = &plane[iy * g.w..(iy + 1) * g.w];
                    let line = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if x_lo == x_hi {
                        continue;
                    }
                    let x0 = x_lo * g.sw + kj - g.pad_left;
                    if g.sw == 1 {
                        line[x_lo..x_hi].copy_from_slice(&src_row[x0..x0 + (x_hi - x_lo)]);
                    } else {
                        for (d, &v) in line[x_lo..x_hi].iter_mut().zip(src_row[x0..].iter().step_by(g.sw)) {
                            *d = v;
                        }
                    }
                }
            }
        }
    }
}

/// Inverse of [`im2col`]: folds columns back onto `[C, H, W]`, accumulating.
fn col2im<T: Scalar>(g: &ConvGeom, cols: &[T], ld: usize, off: usize, dst: &mut [T]) {
    let p = g.positions();
    for ci in 0..g.c {
        let plane = &mut dst[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            let (y_lo, y_hi) = valid_range(ki, g.pad_top, g.sh, g.h, g.oh);
            for kj in 0..g.kw {
                let (x_lo, x_hi) = valid_range(kj, g.pad_left, g.sw, g.w, g.ow);
                let row = (ci * g.kh + ki) * g.kw + kj;
                let src = &cols[row * ld + off..row * ld + off + p];
                for oy in y_lo..y_hi {
                    let iy = oy * g.sh + ki - g.pad_top;
                    let dst_row = &mut plane[iy * g.w..(iy + 1) * g.w];
                    let line = &src[oy * g.ow..(oy + 1) * g.ow];
                    if x_lo == x_hi {
                        continue;
                    }
                    let x0 = x_lo * g.sw + kj - g.pad_left;
                    for (d, &v) in dst_row[x0..].iter_mut().step_by(g.sw).zip(&line[x_lo..x_hi]) {
                        *d += v;
                    }
                }
            }
        }
    }
}

/// Images per GEMM: small feature maps are batched so the column count stays
/// large enough for the GEMM kernel to be efficient.
fn chunk_images(g: &ConvGeom) -> usize {
    const TARGET_COLS: usize = 1024;
    TARGET_COLS.div_ceil(g.positions()).clamp(1, g.n.max(1))
}

/// 2D cross-correlation (no kernel flip).
///
/// `input: [B, C, H, W]`, `weights: [K, C, kh, kw]`, `bias: [K]`.
pub fn conv2d<T: Scalar>(input: &Tensor<T>, weights: &Tensor<T>, bias: Option<&Tensor<T>>, spec: &ConvSpec) -> Result<Tensor<T>> {
    let g = ConvGeom::resolve(input, weights, bias, spec)?;
    let p = g.positions();
    let img = g.c * g.h * g.w;
    let chunk = chunk_images(&g);
    let mut cols = vec![T::zero(); g.patch() * chunk * p];
    let mut res = vec![T::zero(); g.k * chunk * p];
    let mut out = vec![T::zero(); g.n * g.k * p];
    for n0 in (0..g.n).step_by(chunk) {
        let cn = chunk.min(g.n - n0);
        let ld = cn * p;
        for j in 0..cn {
            let ni = n0 + j;
            im2col(&g, &input.data[ni * img..(ni + 1) * img], &mut cols, ld, j * p);
        }
        gemm(
            MatRef::new(&weights.data, g.k, g.patch()),
            MatRef::new(&cols[..g.patch() * ld], g.patch(), ld),
            T::zero(),
            &mut res[..g.k * ld],
        );
        for j in 0..cn {
            let dst = &mut out[(n0 + j) * g.k * p..(n0 + j + 1) * g.k * p];
            for ki in 0..g.k {
                let src = &res[ki * ld + j * p..ki * ld + (j + 1) * p];
                let line = &mut dst[ki * p..(ki + 1) * p];
                match bias {
                    Some(b) => {
                        let bv = b.data[ki];
                        for (o, &v) in line.iter_mut().zip(src) {
                            *o = v + bv;
                        }
                    }
                    None => line.copy_from_slice(src),
                }
            }
        }
    }
    Tensor::new(vec![g.n, g.k, g.oh, g.ow], out)?.ensure_finite("conv2d")
}

pub struct Conv2dGrads<T> {
    /// Absent when the input gradient was not requested.
    pub input: Option<Tensor<T>>,
    pub weights: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}

pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    has_bias: bool,
    spec: &ConvSpec,
    grad_out: &[T],
    want_input: bool,
) -> Result<Conv2dGrads<T>> {
    let g = ConvGeom::resolve(input, weights, None, spec)?;
    let p = g.positions();
    if grad_out.len() != g.n * g.k * p {
        return Err(Error::dim("conv2d_backward", "upstream gradient size"));
    }
    let img = g.c * g.h * g.w;
    let chunk = chunk_images(&g);
    let mut cols = vec![T::zero(); g.patch() * chunk * p];
    let mut go = vec![T::zero(); g.k * chunk * p];
    let mut dcols = if want_input { vec![T::zero(); g.patch() * chunk * p] } else { Vec::new() };
    let mut dw = vec![T::zero(); g.k * g.patch()];
    let mut dx = if want_input { vec![T::zero(); input.len()] } else { Vec::new() };
    for n0 in (0..g.n).step_by(chunk) {
        let cn = chunk.min(g.n - n0);
        let ld = cn * p;
        for j in 0..cn {
            let ni = n0 + j;
            im2col(&g, &input.data[ni * img..(ni + 1) * img], &mut cols, ld, j * p);
            let src = &grad_out[ni * g.k * p..(ni + 1) * g.k * p];
            for ki in 0..g.k {
                go[ki * ld + j * p..ki * ld + (j + 1) * p].copy_from_slice(&src[ki * p..(ki + 1) * p]);
            }
        }
        let go_m = MatRef::new(&go[..g.k * ld], g.k, ld);
        gemm(go_m, MatRef::new(&cols[..g.patch() * ld], g.patch(), ld).t(), T::one(), &mut dw);
        if want_input {
            gemm(
                MatRef::new(&weights.data, g.k, g.patch()).t(),
                go_m,
                T::zero(),
                &mut dcols[..g.patch() * ld],
            );
            for j in 0..cn {
                let ni = n0 + j;
                col2im(&g, &dcols, ld, j * p, &mut dx[ni * img..(ni + 1) * img]);
            }
        }
    }
    let bias = has_bias.then(|| {
        let mut db = vec![T::zero(); g.k];
        for chunk in grad_out.chunks(g.k * p) {
            for (ki, d) in db.iter_mut().enumerate() {
                *d += chunk[ki * p..(ki + 1) * p].iter().copied().sum();
            }
        }
        Tensor::new(vec![g.k], db).expect("bias shape")
    });
    Ok(Conv2dGrads {
        input: if want_input { Some(Tensor::new(input.shape.clone(), dx)?) } else { None },
        weights: Tensor::new(weights.shape.clone(), dw)?,
        bias,
    })
}

/// Max pooling; returns the pooled map and, per output cell, the flat index
/// of the winning input element. Padded cells never win; ties go to the
/// lowest flat index.
pub fn maxpool2d<T: Scalar>(input: &Tensor<T>, spec: &PoolSpec) -> Result<(Tensor<T>, Vec<usize>)> {
    expect_rank("maxpool2d", input, 4)?;
    let [n, c, h, w] = [input.shape[0], input.shape[1], input.shape[2], input.shape[3]];
    let (oh, pad_top) = window_extent("maxpool2d", h, spec.pool_h, spec.stride_h, spec.padding)?;
    let (ow, pad_left) = window_extent("maxpool2d", w, spec.pool_w, spec.stride_w, spec.padding)?;
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut arg = Vec::with_capacity(n * c * oh * ow);
    let rows: Vec<(usize, usize)> = (0..oh)
        .map(|oy| window_bounds(oy, spec.stride_h, pad_top, spec.pool_h, h))
        .collect();
    let cols: Vec<(usize, usize)> = (0..ow)
        .map(|ox| window_bounds(ox, spec.stride_w, pad_left, spec.pool_w, w))
        .collect();
    for plane in 0..n * c {
        let base = plane * h * w;
        let src = &input.data[base..base + h * w];
        for &(y0, y1) in &rows {
            for &(x0, x1) in &cols {
                let mut best = src[y0 * w + x0];
                let mut best_idx = y0 * w + x0;
                for y in y0..y1 {
                    let line = &src[y * w..y * w + x1];
                    for (x, &v) in line.iter().enumerate().skip(x0) {
                        if v > best {
                            best = v;
                            best_idx = y * w + x;
                        }
                    }
                }
                out.push(best);
                arg.push(base + best_idx);
            }
        }
    }
    Ok((Tensor::new(vec![n, c, oh, ow], out)?, arg))
}

/// Clipped input window `[lo, hi)` for output cell `o`.
fn window_bounds(o: usize, stride: usize, pad: usize, k: usize, n: usize) -> (usize, usize) {
    let start = (o * stride) as isize - pad as isize;
    let lo = start.max(0) as usize;
    let hi = ((start + k as isize).max(0) as usize).min(n);
    (lo, hi)
}

/// Routes upstream gradient to the recorded argmax positions.
pub fn maxpool2d_backward<T: Scalar>(input_shape: &[usize], argmax: &[usize], grad_out: &[T]) -> Tensor<T> {
    let mut dx = vec![T::zero(); numel(input_shape)];
    for (&i, &g) in argmax.iter().zip(grad_out) {
        dx[i] += g;
    }
    Tensor::new(input_shape.to_vec(), dx).expect("input shape")
}

/// Affine map `input[B, N] * weights[N, M] + bias[M]`.
pub fn dense<T: Scalar>(input: &Tensor<T>, weights: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    expect_rank("dense", input, 2)?;
    expect_rank("dense", weights, 2)?;
    let (b, n) = (input.shape[0], input.shape[1]);
    let (n2, m) = (weights.shape[0], weights.shape[1]);
    if n != n2 || bias.shape() != [m] {
        return Err(Error::dim(
            "dense",
            format!("input {:?}, weights {:?}, bias {:?}", input.shape, weights.shape, bias.shape),
        ));
    }
    let mut out = Vec::with_capacity(b * m);
    for _ in 0..b {
        out.extend_from_slice(&bias.data);
    }
    gemm(MatRef::new(&input.data, b, n), MatRef::new(&weights.data, n, m), T::one(), &mut out);
    Tensor::new(vec![b, m], out)?.ensure_finite("dense")
}

pub struct DenseGrads<T> {
    pub input: Tensor<T>,
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn dense_backward<T: Scalar>(input: &Tensor<T>, weights: &Tensor<T>, grad_out: &[T]) -> DenseGrads<T> {
    let (b, n) = (input.shape[0], input.shape[1]);
    let m = weights.shape[1];
    let mut dx = vec![T::zero(); b * n];
    gemm(MatRef::new(grad_out, b, m), MatRef::new(&weights.data, n, m).t(), T::zero(), &mut dx);
    let mut dw = vec![T::zero(); n * m];
    gemm(MatRef::new(&input.data, b, n).t(), MatRef::new(grad_out, b, m), T::zero(), &mut dw);
    let mut db = vec![T::zero(); m];
    for row in grad_out.chunks(m) {
        for (d, &g) in db.iter_mut().zip(row) {
            *d += g;
        }
    }
    DenseGrads {
        input: Tensor::new(input.shape.clone(), dx).expect("shape"),
        weights: Tensor::new(weights.shape.clone(), dw).expect("shape"),
        bias: Tensor::new(vec![m], db).expect("shape"),
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    expect_rank("softmax", input, 2)?;
    if input.shape[1] == 0 {
        return Err(Error::dim("softmax", "row width must be >= 1"));
    }
    if !input.is_finite() {
        return Err(Error::Numeric { op: "softmax" });
    }
    let n = input.shape[1];
    let mut out = input.data.clone();
    for row in out.chunks_mut(n) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    }
    Tensor::new(input.shape.clone(), out)
}

pub(crate) const PROB_FLOOR: f64 = 1e-12;

/// Mean over rows of `-ln(max(p[target], 1e-12))`.
pub fn cross_entropy<T: Scalar>(probs: &Tensor<T>, targets: &[usize]) -> Result<T> {
    expect_rank("cross_entropy", probs, 2)?;
    let (b, n) = (probs.shape[0], probs.shape[1]);
    if targets.len() != b {
        return Err(Error::dim("cross_entropy", format!("{} targets for {b} rows", targets.len())));
    }
    let floor = T::lit(PROB_FLOOR);
    let mut total = T::zero();
    for (row, &t) in probs.data.chunks(n).zip(targets) {
        if t >= n {
            return Err(Error::Label(format!("target {t} outside [0, {n})")));
        }
        total -= row[t].max(floor).ln();
    }
    Ok(total / T::lit(b as f64))
}

/// Concatenates along `axis`; all other extents must agree.
pub fn concat<T: Scalar>(parts: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
    let first = parts.first().ok_or_else(|| Error::dim("concat", "no parts"))?;
    if axis >= first.rank() {
        return Err(Error::dim("concat", format!("axis {axis} for rank {}", first.rank())));
    }
    for p in parts {
        let ok = p.rank() == first.rank()
            && p.shape.iter().zip(&first.shape).enumerate().all(|(i, (a, b))| i == axis || a == b);
        if !ok {
            return Err(Error::dim(
                "concat",
                format!("off-axis extents differ: {:?} vs {:?} (axis {axis})", first.shape, p.shape),
            ));
        }
    }
    let outer: usize = first.shape[..axis].iter().product();
    let inner: usize = first.shape[axis + 1..].iter().product();
    let total_axis: usize = parts.iter().map(|p| p.shape[axis]).sum();
    let mut data = Vec::with_capacity(outer * total_axis * inner);
    for o in 0..outer {
        for p in parts {
            let chunk = p.shape[axis] * inner;
            data.extend_from_slice(&p.data[o * chunk..(o + 1) * chunk]);
        }
    }
    let mut shape = first.shape.clone();
    shape[axis] = total_axis;
    Tensor::new(shape, data)
}

/// Extracts `len` entries starting at `start` along `axis`.
pub fn slice_axis<T: Scalar>(input: &Tensor<T>, axis: usize, start: usize, len: usize) -> Result<Tensor<T>> {
    if axis >= input.rank() || start + len > input.shape[axis] {
        return Err(Error::dim(
            "slice",
            format!("[{start}, {}) on axis {axis} of {:?}", start + len, input.shape),
        ));
    }
    let outer: usize = input.shape[..axis].iter().product();
    let inner: usize = input.shape[axis + 1..].iter().product();
    let n_axis = input.shape[axis];
    let mut data = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = (o * n_axis + start) * inner;
        data.extend_from_slice(&input.data[base..base + len * inner]);
    }
    let mut shape = input.shape.clone();
    shape[axis] = len;
    Tensor::new(shape, data)
}

/// Splits an upstream gradient of a concatenation back into part shapes.
pub fn concat_backward<T: Scalar>(part_shapes: &[Vec<usize>], axis: usize, grad_out: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
    let mut start = 0;
    part_shapes
        .iter()
        .map(|s| {
            let t = slice_axis(grad_out, axis, start, s[axis])?;
            start += s[axis];
            Ok(t)
        })
        .collect()
}

/// Index of the row maximum, lowest index on ties.
pub fn argmax_row<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

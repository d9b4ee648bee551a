//! Dense tensors and the numeric kernels used by the meta-learner.
//!
//! Tensors are row-major with an explicit shape. Feature maps are rank 3
//! (`[C, H, W]`); convolution weights are rank 4 (`[Cout, Cin, kh, kw]`).
//! Every kernel here is a pure function. Backward helpers for the
//! differentiable kernels live next to their forward counterparts and are
//! driven by [`crate::autodiff::Tape`].

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::Float;

use crate::error::{Error, Result};

/// Scalar type a [`Tensor`] can hold. Implemented for `f32` (training and
/// inference) and `f64` (gradient checking).
pub trait Real:
    Float
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + 'static
{
    fn lit(v: f64) -> Self;

    fn as_f64(self) -> f64;

    /// `c = alpha * a·b + beta * c` with arbitrary strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_strides: (isize, isize),
        b: &[Self],
        b_strides: (isize, isize),
        beta: Self,
        c: &mut [Self],
    );
}

macro_rules! impl_real {
    ($t:ty, $gemm:path) => {
        impl Real for $t {
            #[inline]
            fn lit(v: f64) -> Self {
                v as $t
            }

            #[inline]
            fn as_f64(self) -> f64 {
                self as f64
            }

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                a_strides: (isize, isize),
                b: &[Self],
                b_strides: (isize, isize),
                beta: Self,
                c: &mut [Self],
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                assert!(c.len() >= m * n, "gemm: output buffer too small");
                let extent = |rows: usize, cols: usize, (rs, cs): (isize, isize)| {
                    if rows == 0 || cols == 0 {
                        0
                    } else {
                        (rows - 1) * rs as usize + (cols - 1) * cs as usize + 1
                    }
                };
                assert!(a.len() >= extent(m, k, a_strides), "gemm: lhs too small");
                assert!(b.len() >= extent(k, n, b_strides), "gemm: rhs too small");
                // SAFETY: the asserts above bound every index touched by the
                // kernel for non-negative strides, which is all we ever pass.
                unsafe {
                    $gemm(
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
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);

#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Debug> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("len", &self.data.len())
            .finish()
    }
}

impl<T: Real> Tensor<T> {
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::invalid(
                "tensor",
                format!("shape {shape:?} needs {expected} values, got {}", data.len()),
            ));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// `(C, H, W)` of a rank-3 tensor.
    pub fn dims3(&self, op: &'static str) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(Error::Rank {
                op,
                expected: 3,
                shape: self.shape.clone(),
            }),
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::invalid(
                "reshape",
                format!("cannot view {:?} as {shape:?}", self.shape),
            ));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.expect_same_shape("zip_map", other)?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.expect_same_shape("add_assign", other)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn min_max(&self) -> (T, T) {
        self.data.iter().fold((T::infinity(), T::neg_infinity()), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        })
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Channel `c` of a rank-3 tensor as a `[1, H, W]` tensor.
    pub fn channel(&self, c: usize) -> Result<Self> {
        let (channels, h, w) = self.dims3("channel")?;
        if c >= channels {
            return Err(Error::invalid("channel", format!("{c} out of {channels}")));
        }
        let hw = h * w;
        Ok(Tensor {
            shape: vec![1, h, w],
            data: self.data[c * hw..(c + 1) * hw].to_vec(),
        })
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }

    fn expect_same_shape(&self, op: &'static str, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op,
                lhs: "lhs",
                lhs_shape: self.shape.clone(),
                rhs: "rhs",
                rhs_shape: other.shape.clone(),
            });
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Convolution

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl ConvSpec {
    pub const POINTWISE: ConvSpec = ConvSpec {
        stride: 1,
        padding: 0,
        dilation: 1,
    };

    /// Stride-1 convolution that preserves spatial size for a `k×k` kernel.
    pub fn same(kernel: usize, dilation: usize) -> Self {
        ConvSpec {
            stride: 1,
            padding: dilation * (kernel - 1) / 2,
            dilation,
        }
    }

    pub fn output_extent(&self, input: usize, kernel: usize) -> Option<usize> {
        let span = self.dilation * (kernel - 1) + 1;
        let padded = input + 2 * self.padding;
        (self.stride > 0 && self.dilation > 0 && padded >= span)
            .then(|| (padded - span) / self.stride + 1)
    }
}

struct ConvGeometry {
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeometry {
    fn new<T: Real>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>, spec: ConvSpec) -> Result<Self> {
        let (cin, h, width) = x.dims3("conv2d")?;
        let [cout, wcin, kh, kw] = w.shape[..] else {
            return Err(Error::Rank {
                op: "conv2d",
                expected: 4,
                shape: w.shape.clone(),
            });
        };
        if wcin != cin {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: "input",
                lhs_shape: x.shape.clone(),
                rhs: "weight",
                rhs_shape: w.shape.clone(),
            });
        }
        if b.shape != [cout] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: "weight",
                lhs_shape: w.shape.clone(),
                rhs: "bias",
                rhs_shape: b.shape.clone(),
            });
        }
        let too_small = || {
            Error::invalid(
                "conv2d",
                format!("kernel {kh}x{kw} with {spec:?} does not fit input {h}x{width}"),
            )
        };
        let oh = spec.output_extent(h, kh).ok_or_else(too_small)?;
        let ow = spec.output_extent(width, kw).ok_or_else(too_small)?;
        Ok(ConvGeometry {
            cin,
            h,
            w: width,
            cout,
            kh,
            kw,
            oh,
            ow,
        })
    }

    fn is_pointwise(&self, spec: ConvSpec) -> bool {
        self.kh == 1 && self.kw == 1 && spec == ConvSpec::POINTWISE
    }

    fn taps(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn pixels(&self) -> usize {
        self.oh * self.ow
    }
}

/// Source index along one axis for output position `o` and kernel tap `k`.
#[inline]
fn source_index(o: usize, k: usize, spec: ConvSpec, extent: usize) -> Option<usize> {
    let pos = (o * spec.stride + k * spec.dilation) as isize - spec.padding as isize;
    (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
}

fn im2col<T: Real>(x: &[T], g: &ConvGeometry, spec: ConvSpec) -> Vec<T> {
    let p = g.pixels();
    let mut cols = vec![T::zero(); g.taps() * p];
    for ci in 0..g.cin {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let out = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let Some(iy) = source_index(oy, ki, spec, g.h) else {
                        continue;
                    };
                    let src = &plane[iy * g.w..(iy + 1) * g.w];
                    let dst = &mut out[oy * g.ow..(oy + 1) * g.ow];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        if let Some(ix) = source_index(ox, kj, spec, g.w) {
                            *d = src[ix];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Real>(cols: &[T], g: &ConvGeometry, spec: ConvSpec) -> Vec<T> {
    let p = g.pixels();
    let mut x = vec![T::zero(); g.cin * g.h * g.w];
    for ci in 0..g.cin {
        let plane = &mut x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let Some(iy) = source_index(oy, ki, spec, g.h) else {
                        continue;
                    };
                    for ox in 0..g.ow {
                        if let Some(ix) = source_index(ox, kj, spec, g.w) {
                            plane[iy * g.w + ix] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
    x
}

/// 2-D cross-correlation (no kernel flip) with stride, zero padding and
/// dilation. `x: [Cin,H,W]`, `w: [Cout,Cin,kh,kw]`, `b: [Cout]`.
pub fn conv2d<T: Real>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>, spec: ConvSpec) -> Result<Tensor<T>> {
    let g = ConvGeometry::new(x, w, b, spec)?;
    let p = g.pixels();
    let mut out = vec![T::zero(); g.cout * p];
    for (co, row) in out.chunks_mut(p).enumerate() {
        row.fill(b.data[co]);
    }
    let k = g.taps();
    if g.is_pointwise(spec) {
        T::gemm(g.cout, k, p, &w.data, (k as isize, 1), &x.data, (p as isize, 1), T::one(), &mut out);
    } else {
        let cols = im2col(&x.data, &g, spec);
        T::gemm(g.cout, k, p, &w.data, (k as isize, 1), &cols, (p as isize, 1), T::one(), &mut out);
    }
    Tensor::from_vec(&[g.cout, g.oh, g.ow], out)
}

pub struct ConvGrads<T> {
    pub x: Tensor<T>,
    pub w: Tensor<T>,
    pub b: Tensor<T>,
}

pub fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    dy: &Tensor<T>,
    spec: ConvSpec,
) -> Result<ConvGrads<T>> {
    let g = ConvGeometry::new(x, w, b, spec)?;
    let p = g.pixels();
    let k = g.taps();
    if dy.shape != [g.cout, g.oh, g.ow] {
        return Err(Error::ShapeMismatch {
            op: "conv2d_backward",
            lhs: "output",
            lhs_shape: vec![g.cout, g.oh, g.ow],
            rhs: "upstream",
            rhs_shape: dy.shape.clone(),
        });
    }
    let db: Vec<T> = dy.data.chunks(p).map(|r| r.iter().copied().sum()).collect();

    let pointwise = g.is_pointwise(spec);
    let cols_owned;
    let cols: &[T] = if pointwise {
        &x.data
    } else {
        cols_owned = im2col(&x.data, &g, spec);
        &cols_owned
    };

    // dW = dY · colsᵀ
    let mut dw = vec![T::zero(); g.cout * k];
    T::gemm(g.cout, p, k, &dy.data, (p as isize, 1), cols, (1, p as isize), T::zero(), &mut dw);

    // dcols = Wᵀ · dY
    let mut dcols = vec![T::zero(); k * p];
    T::gemm(k, g.cout, p, &w.data, (1, k as isize), &dy.data, (p as isize, 1), T::zero(), &mut dcols);
    let dx = if pointwise { dcols } else { col2im(&dcols, &g, spec) };

    Ok(ConvGrads {
        x: Tensor::from_vec(&x.shape, dx)?,
        w: Tensor::from_vec(&w.shape, dw)?,
        b: Tensor::from_vec(&b.shape, db)?,
    })
}

// ---------------------------------------------------------------------------
// Bilinear resize (align_corners = false, half-pixel centers)

#[derive(Clone, Copy)]
struct Tap<T> {
    i0: usize,
    i1: usize,
    l0: T,
    l1: T,
}

fn resize_taps<T: Real>(input: usize, output: usize) -> Vec<Tap<T>> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            let l1 = src - i0 as f64;
            Tap {
                i0,
                i1,
                l0: T::lit(1.0 - l1),
                l1: T::lit(l1),
            }
        })
        .collect()
}

/// Bilinear resampling of every channel of `x: [C,H,W]` to `[C,out_h,out_w]`.
pub fn bilinear_resize<T: Real>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let (c, h, w) = x.dims3("bilinear_resize")?;
    if out_h == 0 || out_w == 0 || h == 0 || w == 0 {
        return Err(Error::invalid("bilinear_resize", "extents must be positive"));
    }
    if (out_h, out_w) == (h, w) {
        return Ok(x.clone());
    }
    let ty = resize_taps::<T>(h, out_h);
    let tx = resize_taps::<T>(w, out_w);
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for plane in x.data.chunks(h * w) {
        for yt in &ty {
            let r0 = &plane[yt.i0 * w..(yt.i0 + 1) * w];
            let r1 = &plane[yt.i1 * w..(yt.i1 + 1) * w];
            for xt in &tx {
                let top = r0[xt.i0] * xt.l0 + r0[xt.i1] * xt.l1;
                let bottom = r1[xt.i0] * xt.l0 + r1[xt.i1] * xt.l1;
                out.push(top * yt.l0 + bottom * yt.l1);
            }
        }
    }
    Tensor::from_vec(&[c, out_h, out_w], out)
}

pub fn bilinear_resize_backward<T: Real>(dy: &Tensor<T>, in_h: usize, in_w: usize) -> Result<Tensor<T>> {
    let (c, oh, ow) = dy.dims3("bilinear_resize_backward")?;
    if (oh, ow) == (in_h, in_w) {
        return Ok(dy.clone());
    }
    let ty = resize_taps::<T>(in_h, oh);
    let tx = resize_taps::<T>(in_w, ow);
    let mut dx = vec![T::zero(); c * in_h * in_w];
    for (plane, grad) in dx.chunks_mut(in_h * in_w).zip(dy.data.chunks(oh * ow)) {
        for (y, yt) in ty.iter().enumerate() {
            for (x, xt) in tx.iter().enumerate() {
                let g = grad[y * ow + x];
                plane[yt.i0 * in_w + xt.i0] += g * yt.l0 * xt.l0;
                plane[yt.i0 * in_w + xt.i1] += g * yt.l0 * xt.l1;
                plane[yt.i1 * in_w + xt.i0] += g * yt.l1 * xt.l0;
                plane[yt.i1 * in_w + xt.i1] += g * yt.l1 * xt.l1;
            }
        }
    }
    Tensor::from_vec(&[c, in_h, in_w], dx)
}

// ---------------------------------------------------------------------------
// Elementwise

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
}

pub fn activation<T: Real>(x: &Tensor<T>, kind: Activation) -> Tensor<T> {
    match kind {
        Activation::Relu => x.map(|v| v.max(T::zero())),
        Activation::Sigmoid => x.map(sigmoid),
    }
}

#[inline]
pub fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// Per-pixel softmax over the channel axis of `[C,H,W]`.
pub fn softmax_channel<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, h, w) = x.dims3("softmax_channel")?;
    if c < 2 {
        return Err(Error::invalid("softmax_channel", "need at least 2 channels"));
    }
    let hw = h * w;
    let mut out = vec![T::zero(); x.len()];
    for p in 0..hw {
        let mut max = T::neg_infinity();
        for ch in 0..c {
            max = max.max(x.data[ch * hw + p]);
        }
        let mut total = T::zero();
        for ch in 0..c {
            let e = (x.data[ch * hw + p] - max).exp();
            out[ch * hw + p] = e;
            total += e;
        }
        for ch in 0..c {
            out[ch * hw + p] /= total;
        }
    }
    Tensor::from_vec(&x.shape, out)
}

/// How the right operand of [`hadamard`] maps onto the left.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Broadcast {
    Same,
    /// `[C,1,1]` against `[C,H,W]`.
    ChannelVector,
    /// `[1,H,W]` against `[C,H,W]`.
    SpatialMap,
}

pub(crate) fn broadcast_kind<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Broadcast> {
    if a.shape == b.shape {
        return Ok(Broadcast::Same);
    }
    if let ([c, _, _], [bc, bh, bw]) = (&a.shape[..], &b.shape[..]) {
        if *bc == *c && *bh == 1 && *bw == 1 {
            return Ok(Broadcast::ChannelVector);
        }
        if *bc == 1 && a.shape[1..] == b.shape[1..] {
            return Ok(Broadcast::SpatialMap);
        }
    }
    Err(Error::ShapeMismatch {
        op: "hadamard",
        lhs: "a",
        lhs_shape: a.shape.clone(),
        rhs: "b",
        rhs_shape: b.shape.clone(),
    })
}

/// Elementwise product; `b` may be a `[C,1,1]` channel vector or a `[1,H,W]`
/// map broadcast against `a: [C,H,W]`.
pub fn hadamard<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let kind = broadcast_kind(a, b)?;
    let mut out = a.data.clone();
    match kind {
        Broadcast::Same => {
            for (o, &v) in out.iter_mut().zip(&b.data) {
                *o *= v;
            }
        }
        Broadcast::ChannelVector => {
            let hw = a.shape[1] * a.shape[2];
            for (plane, &v) in out.chunks_mut(hw).zip(&b.data) {
                plane.iter_mut().for_each(|o| *o *= v);
            }
        }
        Broadcast::SpatialMap => {
            let hw = b.data.len();
            for plane in out.chunks_mut(hw) {
                for (o, &v) in plane.iter_mut().zip(&b.data) {
                    *o *= v;
                }
            }
        }
    }
    Tensor::from_vec(&a.shape, out)
}

/// Reduce a full-size gradient back onto the broadcast operand's shape.
pub(crate) fn unbroadcast<T: Real>(full: &[T], kind: Broadcast, shape: &[usize]) -> Tensor<T> {
    match kind {
        Broadcast::Same => Tensor {
            shape: shape.to_vec(),
            data: full.to_vec(),
        },
        Broadcast::ChannelVector => {
            let c = shape[0];
            let hw = full.len() / c;
            Tensor {
                shape: shape.to_vec(),
                data: full.chunks(hw).map(|p| p.iter().copied().sum()).collect(),
            }
        }
        Broadcast::SpatialMap => {
            let hw = shape[1] * shape[2];
            let mut data = vec![T::zero(); hw];
            for plane in full.chunks(hw) {
                for (d, &v) in data.iter_mut().zip(plane) {
                    *d += v;
                }
            }
            Tensor {
                shape: shape.to_vec(),
                data,
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Channel assembly and pooling

pub fn concat_channels<T: Real>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::invalid("concat_channels", "no parts"))?;
    let (_, h, w) = first.dims3("concat_channels")?;
    let mut channels = 0;
    for (index, part) in parts.iter().enumerate() {
        let (c, ph, pw) = part.dims3("concat_channels")?;
        if (ph, pw) != (h, w) {
            return Err(Error::SpatialMismatch {
                op: "concat_channels",
                index,
                expected: (h, w),
                found: (ph, pw),
            });
        }
        channels += c;
    }
    let mut data = Vec::with_capacity(channels * h * w);
    for part in parts {
        data.extend_from_slice(&part.data);
    }
    Tensor::from_vec(&[channels, h, w], data)
}

/// Broadcast a `[C,1,1]` vector to `[C,h,w]`.
pub fn tile<T: Real>(x: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    match x.shape[..] {
        [c, 1, 1] => {
            let mut data = Vec::with_capacity(c * h * w);
            for &v in &x.data {
                data.extend(std::iter::repeat_n(v, h * w));
            }
            Tensor::from_vec(&[c, h, w], data)
        }
        _ => Err(Error::invalid(
            "tile",
            format!("expected a [C,1,1] vector, got {:?}", x.shape),
        )),
    }
}

pub fn global_avg_pool<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, h, w) = x.dims3("global_avg_pool")?;
    let n = T::lit((h * w) as f64);
    let data = x.data.chunks(h * w).map(|p| p.iter().copied().sum::<T>() / n).collect();
    Tensor::from_vec(&[c, 1, 1], data)
}

/// `Σ(x⊙mask)/Σ(mask)` per channel. `mask` is `[1,H,W]` with values in `[0,1]`.
pub fn masked_avg_pool<T: Real>(x: &Tensor<T>, mask: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, h, w) = x.dims3("masked_avg_pool")?;
    if mask.shape != [1, h, w] {
        return Err(Error::ShapeMismatch {
            op: "masked_avg_pool",
            lhs: "features",
            lhs_shape: x.shape.clone(),
            rhs: "mask",
            rhs_shape: mask.shape.clone(),
        });
    }
    let area = mask.sum();
    if area <= T::zero() {
        return Err(Error::EmptyForeground {
            op: "masked_avg_pool",
        });
    }
    let data = x
        .data
        .chunks(h * w)
        .map(|p| p.iter().zip(&mask.data).map(|(&v, &m)| v * m).sum::<T>() / area)
        .collect();
    Tensor::from_vec(&[c, 1, 1], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    /// Six nested loops, no im2col.
    fn conv_oracle(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>, spec: ConvSpec) -> Tensor<f64> {
        let (cin, h, wd) = x.dims3("oracle").unwrap();
        let [cout, _, kh, kw] = w.shape()[..] else { unreachable!() };
        let oh = (h + 2 * spec.padding - spec.dilation * (kh - 1) - 1) / spec.stride + 1;
        let ow = (wd + 2 * spec.padding - spec.dilation * (kw - 1) - 1) / spec.stride + 1;
        let mut out = Tensor::zeros(&[cout, oh, ow]);
        for co in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b.data()[co];
                    for ci in 0..cin {
                        for ki in 0..kh {
                            for kj in 0..kw {
                                let iy = (oy * spec.stride + ki * spec.dilation) as isize - spec.padding as isize;
                                let ix = (ox * spec.stride + kj * spec.dilation) as isize - spec.padding as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += w.data()[((co * cin + ci) * kh + ki) * kw + kj]
                                    * x.data()[(ci * h + iy as usize) * wd + ix as usize];
                            }
                        }
                    }
                    out.data_mut()[(co * oh + oy) * ow + ox] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn conv_pointwise_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&[3, 4, 5], &mut rng);
        let w = Tensor::from_fn(&[3, 3, 1, 1], |i| if i / 3 == i % 3 { 1.0 } else { 0.0 });
        let y = conv2d(&x, &w, &Tensor::zeros(&[3]), ConvSpec::POINTWISE).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn conv_sum_of_ones() {
        let x = Tensor::<f32>::full(&[1, 3, 3], 1.0);
        let w = Tensor::full(&[1, 1, 3, 3], 1.0);
        let y = conv2d(&x, &w, &Tensor::zeros(&[1]), ConvSpec { stride: 1, padding: 0, dilation: 1 }).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1]);
        assert_eq!(y.data(), &[9.0]);
    }

    #[test]
    fn conv_matches_nested_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for spec in [
            ConvSpec { stride: 1, padding: 2, dilation: 2 },
            ConvSpec { stride: 1, padding: 0, dilation: 2 },
            ConvSpec { stride: 2, padding: 1, dilation: 1 },
            ConvSpec::POINTWISE,
        ] {
            let x = random(&[4, 8, 8], &mut rng);
            let k = if spec == ConvSpec::POINTWISE { 1 } else { 3 };
            let w = random(&[8, 4, k, k], &mut rng);
            let b = random(&[8], &mut rng);
            let fast = conv2d(&x, &w, &b, spec).unwrap();
            let slow = conv_oracle(&x, &w, &b, spec);
            assert_eq!(fast.shape(), slow.shape());
            for (a, e) in fast.data().iter().zip(slow.data()) {
                assert!((a - e).abs() < 1e-6, "{spec:?}: {a} vs {e}");
            }
        }
    }

    #[test]
    fn conv_shape_errors_name_operands() {
        let x = Tensor::<f32>::zeros(&[3, 4, 4]);
        let w = Tensor::zeros(&[2, 2, 3, 3]);
        let err = conv2d(&x, &w, &Tensor::zeros(&[2]), ConvSpec::same(3, 1)).unwrap_err();
        assert!(err.to_string().contains("weight"), "{err}");
        let err = conv2d(&x, &Tensor::zeros(&[2, 3, 5, 5]), &Tensor::zeros(&[2]), ConvSpec::POINTWISE).unwrap_err();
        assert!(err.to_string().contains("does not fit"), "{err}");
        let err = conv2d(&x, &Tensor::zeros(&[2, 3, 1, 1]), &Tensor::zeros(&[3]), ConvSpec::POINTWISE).unwrap_err();
        assert!(err.to_string().contains("bias"), "{err}");
    }

    #[test]
    fn resize_identity_is_bit_equal() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&[2, 5, 7], &mut rng);
        assert_eq!(bilinear_resize(&x, 5, 7).unwrap(), x);
    }

    #[test]
    fn resize_constant_stays_constant() {
        let x = Tensor::<f64>::full(&[2, 3, 3], 0.25);
        let y = bilinear_resize(&x, 7, 11).unwrap();
        assert!(y.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn resize_two_by_two_closed_form() {
        // Half-pixel centers: target coordinate t maps to source (t + 0.5)/2 - 0.5,
        // clamped at 0. Evaluated by hand for the 2→4 case.
        let x = Tensor::<f64>::from_vec(&[1, 2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let y = bilinear_resize(&x, 4, 4).unwrap();
        let coord = [0.0, 0.25, 0.75, 1.0];
        for (r, &sy) in coord.iter().enumerate() {
            for (c, &sx) in coord.iter().enumerate() {
                // f(u,v) = u(1-v) + v(1-u) on the unit square
                let expected = sx * (1.0 - sy) + sy * (1.0 - sx);
                assert!((y.data()[r * 4 + c] - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn resize_backward_is_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random(&[2, 5, 3], &mut rng);
        let dy = random(&[2, 8, 7], &mut rng);
        let y = bilinear_resize(&x, 8, 7).unwrap();
        let dx = bilinear_resize_backward(&dy, 5, 3).unwrap();
        let lhs: f64 = y.data().iter().zip(dy.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(dx.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn activations() {
        let x = Tensor::<f32>::from_vec(&[3], vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(activation(&x, Activation::Relu).data(), &[0.0, 0.0, 2.0]);
        assert_eq!(sigmoid(0.0f64), 0.5);
        assert!(sigmoid(-800.0f64).is_finite() && sigmoid(800.0f64) == 1.0);
    }

    #[test]
    fn softmax_edge_cases() {
        let x = Tensor::<f32>::from_vec(&[2, 1, 2], vec![0.0, 1000.0, 0.0, 0.0]).unwrap();
        let y = softmax_channel(&x).unwrap();
        assert_eq!(y.data()[0], 0.5);
        assert_eq!(y.data()[2], 0.5);
        assert_eq!(y.data()[1], 1.0);
        assert!(y.data()[3] < 1e-30);
        assert!(softmax_channel(&Tensor::<f32>::zeros(&[1, 2, 2])).is_err());
    }

    #[test]
    fn softmax_pixels_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(&[2, 4, 4], &mut rng).scale(5.0);
        let y = softmax_channel(&x).unwrap();
        for p in 0..16 {
            assert!((y.data()[p] + y.data()[16 + p] - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn hadamard_broadcasts_match_tiling() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = random(&[3, 4, 5], &mut rng);
        let ones = Tensor::full(&[1, 4, 5], 1.0);
        assert_eq!(hadamard(&a, &ones).unwrap(), a);
        assert!(hadamard(&a, &Tensor::zeros(&[1, 4, 5])).unwrap().data().iter().all(|&v| v == 0.0));

        let v = random(&[3, 1, 1], &mut rng);
        let tiled = Tensor::from_fn(&[3, 4, 5], |i| v.data()[i / 20]);
        let explicit = a.zip_map(&tiled, |x, y| x * y).unwrap();
        assert_eq!(hadamard(&a, &v).unwrap(), explicit);
        assert!(hadamard(&a, &Tensor::zeros(&[2, 1, 1])).is_err());
    }

    #[test]
    fn concat_orders_parts_and_rejects_mismatch() {
        let a = Tensor::<f32>::full(&[1, 2, 2], 1.0);
        let b = Tensor::<f32>::full(&[1, 2, 2], 2.0);
        let y = concat_channels(&[&a, &b]).unwrap();
        assert_eq!(y.channel(0).unwrap(), a);
        assert_eq!(y.channel(1).unwrap(), b);
        assert_eq!(concat_channels(&[&a]).unwrap(), a);
        let err = concat_channels(&[&a, &Tensor::zeros(&[1, 3, 2])]).unwrap_err();
        assert!(matches!(err, Error::SpatialMismatch { index: 1, .. }));
    }

    #[test]
    fn pooling() {
        let x = Tensor::<f64>::full(&[2, 3, 3], 1.5);
        let mut mask = Tensor::zeros(&[1, 3, 3]);
        mask.data_mut()[4] = 1.0;
        assert_eq!(global_avg_pool(&x).unwrap().data(), &[1.5, 1.5]);
        assert_eq!(masked_avg_pool(&x, &mask).unwrap().data(), &[1.5, 1.5]);

        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random(&[3, 5, 5], &mut rng);
        let single = masked_avg_pool(&x, &Tensor::from_fn(&[1, 5, 5], |i| if i == 7 { 1.0 } else { 0.0 })).unwrap();
        assert_eq!(single.data(), &[x.data()[7], x.data()[32], x.data()[57]]);

        let mask = Tensor::from_fn(&[1, 5, 5], |_| rng.random_range(0.0..1.0));
        let pooled = masked_avg_pool(&x, &mask).unwrap();
        for c in 0..3 {
            let (mut num, mut den) = (0.0, 0.0);
            for p in 0..25 {
                num += x.data()[c * 25 + p] * mask.data()[p];
                den += mask.data()[p];
            }
            assert!((pooled.data()[c] - num / den).abs() < 1e-6);
        }
        assert!(matches!(
            masked_avg_pool(&x, &Tensor::zeros(&[1, 5, 5])),
            Err(Error::EmptyForeground { .. })
        ));
    }
}

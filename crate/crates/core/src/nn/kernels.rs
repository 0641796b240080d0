//! Eager forward and backward kernels for every layer kind the network uses.
//!
//! Convolution-family kernels share three operations on a "strided
//! correlation" between a small tensor `S` and a big tensor `B`, where a small
//! position `o` touches the big position `o * stride + k - pad`:
//!
//! * gather:  `S[s] += W[s, b] * B[b]`  (conv forward, conv-transpose input grad)
//! * scatter: `B[b] += W[s, b] * S[s]`  (conv input grad, conv-transpose forward)
//! * wgrad:   `W[s, b] += S[s] * B[b]`  (weight grads of both)
//!
//! Activations are `[C, H, W]` or batched `[C, N, H, W]`. Keeping each
//! channel's planes together lets batchnorm statistics and pointwise
//! convolutions span the whole batch.
//!
//! All reductions run in a fixed sequential order, so results are
//! bit-reproducible.

use crate::error::{Error, Result};
use crate::nn::tensor::{Scalar, Tensor};

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPSILON: f64 = 1e-5;

#[derive(Debug, Clone, Copy)]
struct Geometry {
    stride: usize,
    pad: usize,
    kh: usize,
    kw: usize,
    /// Images per tensor; each channel holds `n` consecutive planes.
    n: usize,
    /// Whether activations carry an explicit batch axis.
    batched: bool,
    hs: usize,
    ws: usize,
    hb: usize,
    wb: usize,
}

/// Range of small positions whose mapped big position `o * s + k - p` lies in `[0, lb)`.
fn valid_range(ls: usize, lb: usize, s: usize, k: usize, p: usize) -> (usize, usize) {
    let (s, k, p) = (s as isize, k as isize, p as isize);
    let lo = if p - k > 0 { (p - k + s - 1) / s } else { 0 };
    let hi_num = lb as isize - 1 + p - k;
    let hi = if hi_num < 0 {
        0
    } else {
        (hi_num / s + 1).min(ls as isize)
    };
    (lo as usize, hi.max(lo) as usize)
}

impl Geometry {
    /// 1×1 stride-1 unpadded convolutions are a plain matrix product over
    /// every pixel of every image.
    fn pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn small_plane(&self) -> usize {
        self.hs * self.ws
    }

    /// Valid small-row ranges per kernel row, and small-column ranges per
    /// kernel column (empty column ranges dropped).
    fn taps(&self) -> (Vec<(usize, usize)>, Vec<(usize, usize, usize)>) {
        let rows = (0..self.kh)
            .map(|ky| valid_range(self.hs, self.hb, self.stride, ky, self.pad))
            .collect();
        let cols = (0..self.kw)
            .filter_map(|kx| {
                let (lo, hi) = valid_range(self.ws, self.wb, self.stride, kx, self.pad);
                (lo < hi).then_some((kx, lo, hi))
            })
            .collect();
        (rows, cols)
    }

    fn big_plane(&self) -> usize {
        self.hb * self.wb
    }

    fn shape(&self, c: usize, h: usize, w: usize) -> Vec<usize> {
        if self.batched {
            vec![c, self.n, h, w]
        } else {
            vec![c, h, w]
        }
    }

    fn small_shape(&self, c: usize) -> Vec<usize> {
        self.shape(c, self.hs, self.ws)
    }

    fn big_shape(&self, c: usize) -> Vec<usize> {
        self.shape(c, self.hb, self.wb)
    }
}

#[inline]
fn axpy<T: Scalar>(y: &mut [T], a: T, x: &[T]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += a * xv;
    }
}

#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// `s[o, :] += Σ_k w[o, k] · b[k, :]` for row-major `w [cs, kb]`.
fn matmul_gather<T: Scalar>(b: &[T], w: &[T], kb: usize, s: &mut [T], p: usize) {
    for (srow, wrow) in s.chunks_exact_mut(p).zip(w.chunks_exact(kb)) {
        for (&wv, brow) in wrow.iter().zip(b.chunks_exact(p)) {
            axpy(srow, wv, brow);
        }
    }
}

/// `b[k, :] += Σ_o w[o, k] · s[o, :]`.
fn matmul_scatter<T: Scalar>(s: &[T], w: &[T], kb: usize, b: &mut [T], p: usize) {
    for (srow, wrow) in s.chunks_exact(p).zip(w.chunks_exact(kb)) {
        for (&wv, brow) in wrow.iter().zip(b.chunks_exact_mut(p)) {
            axpy(brow, wv, srow);
        }
    }
}

/// `wg[o, k] += s[o, :] · b[k, :]`.
fn matmul_wgrad<T: Scalar>(s: &[T], b: &[T], kb: usize, wg: &mut [T], p: usize) {
    for (srow, wrow) in s.chunks_exact(p).zip(wg.chunks_exact_mut(kb)) {
        for (wv, brow) in wrow.iter_mut().zip(b.chunks_exact(p)) {
            *wv += dot(srow, brow);
        }
    }
}

/// Unfolds the big tensor into `[cb·kh·kw, n·hs·ws]`: row `(c, ky, kx)`
/// holds, for every small position, the big value that tap reads (zero
/// where it falls in the padding).
fn im2col<T: Scalar>(big: &[T], cb: usize, g: &Geometry) -> Vec<T> {
    let (sp, bp) = (g.small_plane(), g.big_plane());
    let p = sp * g.n;
    let (rows, cols) = g.taps();
    let mut out = vec![T::zero(); cb * g.kh * g.kw * p];
    for c in 0..cb {
        for (ky, &(oy_lo, oy_hi)) in rows.iter().enumerate() {
            for &(kx, ox_lo, ox_hi) in &cols {
                let r = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut out[r * p..(r + 1) * p];
                for img in 0..g.n {
                    let bplane = &big[(c * g.n + img) * bp..(c * g.n + img + 1) * bp];
                    let dplane = &mut dst[img * sp..(img + 1) * sp];
                    for oy in oy_lo..oy_hi {
                        let iy = oy * g.stride + ky - g.pad;
                        let ix0 = ox_lo * g.stride + kx - g.pad;
                        let brow = &bplane[iy * g.wb + ix0..(iy + 1) * g.wb];
                        let drow = &mut dplane[oy * g.ws + ox_lo..oy * g.ws + ox_hi];
                        for (d, &v) in drow.iter_mut().zip(brow.iter().step_by(g.stride)) {
                            *d = v;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`im2col`]: adds every column entry back onto the big value
/// it was read from.
fn col2im_add<T: Scalar>(cols_buf: &[T], cb: usize, g: &Geometry, big: &mut [T]) {
    let (sp, bp) = (g.small_plane(), g.big_plane());
    let p = sp * g.n;
    let (rows, cols) = g.taps();
    for c in 0..cb {
        for (ky, &(oy_lo, oy_hi)) in rows.iter().enumerate() {
            for &(kx, ox_lo, ox_hi) in &cols {
                let r = (c * g.kh + ky) * g.kw + kx;
                let src = &cols_buf[r * p..(r + 1) * p];
                for img in 0..g.n {
                    let bplane = &mut big[(c * g.n + img) * bp..(c * g.n + img + 1) * bp];
                    let splane = &src[img * sp..(img + 1) * sp];
                    for oy in oy_lo..oy_hi {
                        let iy = oy * g.stride + ky - g.pad;
                        let ix0 = ox_lo * g.stride + kx - g.pad;
                        let brow = &mut bplane[iy * g.wb + ix0..(iy + 1) * g.wb];
                        let srow = &splane[oy * g.ws + ox_lo..oy * g.ws + ox_hi];
                        for (b, &v) in brow.iter_mut().step_by(g.stride).zip(srow) {
                            *b += v;
                        }
                    }
                }
            }
        }
    }
}

/// Depthwise correlation loops; `big` and `small` hold `c` channels each.
fn depthwise_gather<T: Scalar>(big: &[T], weight: &[T], c: usize, g: Geometry, small: &mut [T]) {
    let (sp, bp) = (g.small_plane(), g.big_plane());
    let kk = g.kh * g.kw;
    let (rows, cols) = g.taps();
    for ch in 0..c {
        for img in 0..g.n {
            let k = ch * g.n + img;
            let bplane = &big[k * bp..(k + 1) * bp];
            let splane = &mut small[k * sp..(k + 1) * sp];
            for (ky, &(oy_lo, oy_hi)) in rows.iter().enumerate() {
                for &(kx, ox_lo, ox_hi) in &cols {
                    let w = weight[ch * kk + ky * g.kw + kx];
                    for oy in oy_lo..oy_hi {
                        let iy = oy * g.stride + ky - g.pad;
                        let ix0 = ox_lo * g.stride + kx - g.pad;
                        let brow = &bplane[iy * g.wb + ix0..(iy + 1) * g.wb];
                        let srow = &mut splane[oy * g.ws + ox_lo..oy * g.ws + ox_hi];
                        if g.stride == 1 {
                            let n = srow.len();
                            axpy(srow, w, &brow[..n]);
                        } else {
                            for (sv, &bv) in srow.iter_mut().zip(brow.iter().step_by(g.stride)) {
                                *sv += w * bv;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn depthwise_scatter<T: Scalar>(small: &[T], weight: &[T], c: usize, g: Geometry, big: &mut [T]) {
    let (sp, bp) = (g.small_plane(), g.big_plane());
    let kk = g.kh * g.kw;
    let (rows, cols) = g.taps();
    for ch in 0..c {
        for img in 0..g.n {
            let k = ch * g.n + img;
            let splane = &small[k * sp..(k + 1) * sp];
            let bplane = &mut big[k * bp..(k + 1) * bp];
            for (ky, &(oy_lo, oy_hi)) in rows.iter().enumerate() {
                for &(kx, ox_lo, ox_hi) in &cols {
                    let w = weight[ch * kk + ky * g.kw + kx];
                    for oy in oy_lo..oy_hi {
                        let iy = oy * g.stride + ky - g.pad;
                        let ix0 = ox_lo * g.stride + kx - g.pad;
                        let brow = &mut bplane[iy * g.wb + ix0..(iy + 1) * g.wb];
                        let srow = &splane[oy * g.ws + ox_lo..oy * g.ws + ox_hi];
                        if g.stride == 1 {
                            axpy(&mut brow[..srow.len()], w, srow);
                        } else {
                            for (bv, &sv) in brow.iter_mut().step_by(g.stride).zip(srow) {
                                *bv += w * sv;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn depthwise_wgrad<T: Scalar>(small: &[T], big: &[T], c: usize, g: Geometry, weight_grad: &mut [T]) {
    let (sp, bp) = (g.small_plane(), g.big_plane());
    let kk = g.kh * g.kw;
    let (rows, cols) = g.taps();
    for ch in 0..c {
        for (ky, &(oy_lo, oy_hi)) in rows.iter().enumerate() {
            for &(kx, ox_lo, ox_hi) in &cols {
                let mut acc = T::zero();
                for img in 0..g.n {
                    let k = ch * g.n + img;
                    let splane = &small[k * sp..(k + 1) * sp];
                    let bplane = &big[k * bp..(k + 1) * bp];
                    for oy in oy_lo..oy_hi {
                        let iy = oy * g.stride + ky - g.pad;
                        let ix0 = ox_lo * g.stride + kx - g.pad;
                        let brow = &bplane[iy * g.wb + ix0..(iy + 1) * g.wb];
                        let srow = &splane[oy * g.ws + ox_lo..oy * g.ws + ox_hi];
                        if g.stride == 1 {
                            acc += dot(srow, &brow[..srow.len()]);
                        } else {
                            for (&sv, &bv) in srow.iter().zip(brow.iter().step_by(g.stride)) {
                                acc += sv * bv;
                            }
                        }
                    }
                }
                weight_grad[ch * kk + ky * g.kw + kx] += acc;
            }
        }
    }
}

fn gather<T: Scalar>(
    big: &[T],
    weight: &[T],
    cs: usize,
    cb: usize,
    depthwise: bool,
    g: Geometry,
    small: &mut [T],
) {
    let p = g.small_plane() * g.n;
    if depthwise {
        depthwise_gather(big, weight, cs, g, small);
    } else if g.pointwise() {
        matmul_gather(big, weight, cb, small, p);
    } else {
        let cols = im2col(big, cb, &g);
        matmul_gather(&cols, weight, cb * g.kh * g.kw, small, p);
    }
}

fn scatter<T: Scalar>(
    small: &[T],
    weight: &[T],
    cs: usize,
    cb: usize,
    depthwise: bool,
    g: Geometry,
    big: &mut [T],
) {
    let p = g.small_plane() * g.n;
    if depthwise {
        depthwise_scatter(small, weight, cs, g, big);
    } else if g.pointwise() {
        matmul_scatter(small, weight, cb, big, p);
    } else {
        let kb = cb * g.kh * g.kw;
        let mut cols = vec![T::zero(); kb * p];
        matmul_scatter(small, weight, kb, &mut cols, p);
        col2im_add(&cols, cb, &g, big);
    }
}

fn wgrad<T: Scalar>(
    small: &[T],
    big: &[T],
    cs: usize,
    cb: usize,
    depthwise: bool,
    g: Geometry,
    weight_grad: &mut [T],
) {
    let p = g.small_plane() * g.n;
    if depthwise {
        depthwise_wgrad(small, big, cs, g, weight_grad);
    } else if g.pointwise() {
        matmul_wgrad(small, big, cb, weight_grad, p);
    } else {
        let cols = im2col(big, cb, &g);
        matmul_wgrad(small, &cols, cb * g.kh * g.kw, weight_grad, p);
    }
}

/// Output length of a strided convolution, `floor((n + 2p - k) / s) + 1`.
pub fn conv_output_len(n: usize, k: usize, stride: usize, padding: usize) -> Result<usize> {
    if stride == 0 || k == 0 {
        return Err(Error::dim("kernel size and stride must be at least 1"));
    }
    if k > n + 2 * padding {
        return Err(Error::dim(format!(
            "kernel {k} larger than padded input {} (n={n}, padding={padding})",
            n + 2 * padding
        )));
    }
    Ok((n + 2 * padding - k) / stride + 1)
}

/// Output length of a transposed convolution, `(n - 1) s - 2p + k + output_padding`.
pub fn conv_transpose_output_len(
    n: usize,
    k: usize,
    stride: usize,
    padding: usize,
    output_padding: usize,
) -> Result<usize> {
    if stride == 0 || k == 0 {
        return Err(Error::dim("kernel size and stride must be at least 1"));
    }
    let len = (n as isize - 1) * stride as isize - 2 * padding as isize
        + k as isize
        + output_padding as isize;
    if len <= 0 {
        return Err(Error::dim(format!(
            "transposed convolution output size {len} is not positive \
             (n={n}, k={k}, stride={stride}, padding={padding}, output_padding={output_padding})"
        )));
    }
    Ok(len as usize)
}

fn check_bias<T: Scalar>(bias: Option<&Tensor<T>>, channels: usize) -> Result<()> {
    if let Some(b) = bias {
        if b.shape() != [channels] {
            return Err(Error::dim(format!(
                "bias shape {:?} does not match {channels} output channels",
                b.shape()
            )));
        }
    }
    Ok(())
}

fn init_with_bias<T: Scalar>(shape: Vec<usize>, bias: Option<&Tensor<T>>) -> Tensor<T> {
    let mut out = Tensor::zeros(shape);
    if let Some(b) = bias {
        let block = out.len() / b.len();
        for (c, chunk) in out.data_mut().chunks_mut(block).enumerate() {
            chunk.fill(b.data()[c]);
        }
    }
    out
}

fn bias_grad<T: Scalar>(grad_out: &Tensor<T>) -> Tensor<T> {
    let c = grad_out.shape()[0];
    Tensor::from_parts(
        vec![c],
        grad_out
            .data()
            .chunks(grad_out.len() / c)
            .map(|p| p.iter().copied().sum())
            .collect(),
    )
}

/// Gradients of a convolution-family layer.
#[derive(Debug, Clone)]
pub struct ConvGrads<T: Scalar> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}

fn conv_geometry<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    stride: usize,
    padding: usize,
    depthwise: bool,
) -> Result<(usize, usize, Geometry)> {
    let (ci, n, h, w) = input.batch_dims()?;
    let (co, wi, kh, kw) = weight.dims4()?;
    if depthwise {
        if co != ci || wi != 1 {
            return Err(Error::dim(format!(
                "depthwise weights {:?} do not match input {:?} (expected [{ci}, 1, k, k])",
                weight.shape(),
                input.shape()
            )));
        }
    } else if wi != ci {
        return Err(Error::dim(format!(
            "weights {:?} expect {wi} input channels but input {:?} has {ci}",
            weight.shape(),
            input.shape()
        )));
    }
    let ho = conv_output_len(h, kh, stride, padding)?;
    let wo = conv_output_len(w, kw, stride, padding)?;
    Ok((
        ci,
        co,
        Geometry {
            stride,
            pad: padding,
            kh,
            kw,
            n,
            batched: input.rank() == 4,
            hs: ho,
            ws: wo,
            hb: h,
            wb: w,
        },
    ))
}

/// Cross-correlation of `input [C_in, (N,) H, W]` with `weight [C_out, C_in, k, k]`.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let (ci, co, g) = conv_geometry(input, weight, stride, padding, false)?;
    check_bias(bias, co)?;
    let mut out = init_with_bias(g.small_shape(co), bias);
    gather(input.data(), weight.data(), co, ci, false, g, out.data_mut());
    Ok(out)
}

pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    padding: usize,
    with_bias: bool,
) -> Result<ConvGrads<T>> {
    conv_family_backward(input, weight, grad_out, stride, padding, with_bias, false)
}

/// Per-channel convolution: `weight [C, 1, k, k]`.
pub fn depthwise_conv2d<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let (c, _, g) = conv_geometry(input, weight, stride, padding, true)?;
    check_bias(bias, c)?;
    let mut out = init_with_bias(g.small_shape(c), bias);
    gather(input.data(), weight.data(), c, c, true, g, out.data_mut());
    Ok(out)
}

pub fn depthwise_conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    padding: usize,
    with_bias: bool,
) -> Result<ConvGrads<T>> {
    conv_family_backward(input, weight, grad_out, stride, padding, with_bias, true)
}

fn conv_family_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    padding: usize,
    with_bias: bool,
    depthwise: bool,
) -> Result<ConvGrads<T>> {
    let (ci, co, g) = conv_geometry(input, weight, stride, padding, depthwise)?;
    if grad_out.shape() != g.small_shape(co) {
        return Err(Error::dim(format!(
            "output gradient {:?} does not match forward output {:?}",
            grad_out.shape(),
            g.small_shape(co)
        )));
    }
    let mut gin = Tensor::zeros_like(input);
    scatter(grad_out.data(), weight.data(), co, ci, depthwise, g, gin.data_mut());
    let mut gw = Tensor::zeros_like(weight);
    wgrad(grad_out.data(), input.data(), co, ci, depthwise, g, gw.data_mut());
    Ok(ConvGrads {
        input: gin,
        weight: gw,
        bias: with_bias.then(|| bias_grad(grad_out)),
    })
}

fn conv_transpose_geometry<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    stride: usize,
    padding: usize,
    output_padding: usize,
) -> Result<(usize, usize, Geometry)> {
    let (ci, n, h, w) = input.batch_dims()?;
    let (wi, co, kh, kw) = weight.dims4()?;
    if wi != ci {
        return Err(Error::dim(format!(
            "transposed-conv weights {:?} expect {wi} input channels but input {:?} has {ci}",
            weight.shape(),
            input.shape()
        )));
    }
    let ho = conv_transpose_output_len(h, kh, stride, padding, output_padding)?;
    let wo = conv_transpose_output_len(w, kw, stride, padding, output_padding)?;
    Ok((
        ci,
        co,
        Geometry {
            stride,
            pad: padding,
            kh,
            kw,
            n,
            batched: input.rank() == 4,
            hs: h,
            ws: w,
            hb: ho,
            wb: wo,
        },
    ))
}

/// Transposed convolution of `input [C_in, (N,) H, W]` with `weight [C_in, C_out, k, k]`.
///
/// With zero bias this is the adjoint of [`conv2d`] using the same weight tensor.
pub fn conv_transpose2d<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
    output_padding: usize,
) -> Result<Tensor<T>> {
    let (ci, co, g) = conv_transpose_geometry(input, weight, stride, padding, output_padding)?;
    check_bias(bias, co)?;
    let mut out = init_with_bias(g.big_shape(co), bias);
    scatter(input.data(), weight.data(), ci, co, false, g, out.data_mut());
    Ok(out)
}

pub fn conv_transpose2d_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    padding: usize,
    output_padding: usize,
    with_bias: bool,
) -> Result<ConvGrads<T>> {
    let (ci, co, g) = conv_transpose_geometry(input, weight, stride, padding, output_padding)?;
    if grad_out.shape() != g.big_shape(co) {
        return Err(Error::dim(format!(
            "output gradient {:?} does not match forward output {:?}",
            grad_out.shape(),
            g.big_shape(co)
        )));
    }
    let mut gin = Tensor::zeros_like(input);
    gather(grad_out.data(), weight.data(), ci, co, false, g, gin.data_mut());
    let mut gw = Tensor::zeros_like(weight);
    wgrad(input.data(), grad_out.data(), ci, co, false, g, gw.data_mut());
    Ok(ConvGrads {
        input: gin,
        weight: gw,
        bias: with_bias.then(|| bias_grad(grad_out)),
    })
}

pub fn relu6<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let six = T::from_f64_lossy(6.0);
    x.map(|v| v.max(T::zero()).min(six))
}

pub fn relu6_backward<T: Scalar>(x: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    let six = T::from_f64_lossy(6.0);
    let data = x
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&v, &g)| if v > T::zero() && v < six { g } else { T::zero() })
        .collect();
    Tensor::from_parts(x.shape().to_vec(), data)
}

#[inline]
pub fn sigmoid_scalar<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub fn sigmoid<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(sigmoid_scalar)
}

/// Gradient of the sigmoid at input `x`. Computed as `e / (1 + e)²` with
/// `e = exp(-|x|)` so it stays nonzero long after the output rounds to 0 or 1.
pub fn sigmoid_backward<T: Scalar>(x: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    let data = x
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&v, &g)| {
            let e = (-v.abs()).exp();
            let d = T::one() + e;
            g * (e / (d * d))
        })
        .collect();
    Tensor::from_parts(x.shape().to_vec(), data)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BnMode {
    /// Normalize with batch statistics and update the running averages.
    Train,
    /// Normalize with the running statistics.
    Infer,
}

/// Values kept from a batchnorm forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct BatchNormCache<T: Scalar> {
    pub mode: BnMode,
    pub xhat: Tensor<T>,
    pub inv_std: Vec<T>,
}

/// Per-channel statistics of one training batch: biased mean, and the
/// unbiased variance used for the running average.
#[derive(Debug, Clone)]
pub struct BatchStats<T: Scalar> {
    pub mean: Vec<T>,
    pub var_unbiased: Vec<T>,
}

fn check_bn_params(c: usize, params: &[(&str, usize)]) -> Result<()> {
    for (name, len) in params {
        if *len != c {
            return Err(Error::dim(format!(
                "batchnorm {name} has length {len}, expected {c} channels"
            )));
        }
    }
    Ok(())
}

/// Batchnorm forward without touching running statistics. In train mode the
/// batch statistics are returned for the caller to fold into the running
/// averages.
pub fn batchnorm_forward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    running_mean: &[T],
    running_var: &[T],
    mode: BnMode,
) -> Result<(Tensor<T>, BatchNormCache<T>, Option<BatchStats<T>>)> {
    let (c, b, h, w) = x.batch_dims()?;
    check_bn_params(
        c,
        &[
            ("gamma", gamma.len()),
            ("beta", beta.len()),
            ("running_mean", running_mean.len()),
            ("running_var", running_var.len()),
        ],
    )?;
    let n = b * h * w;
    if n == 0 {
        return Err(Error::dim("batchnorm over zero spatial size"));
    }
    let eps = BN_EPSILON;
    let mut out = Tensor::zeros_like(x);
    let mut xhat = Tensor::zeros_like(x);
    let mut inv_std = Vec::with_capacity(c);
    let mut stats = BatchStats {
        mean: Vec::with_capacity(c),
        var_unbiased: Vec::with_capacity(c),
    };
    for ch in 0..c {
        let plane = x.channel(ch);
        let (mean, var) = match mode {
            BnMode::Train => {
                let mean = plane.iter().map(|v| v.to_f64_lossy()).sum::<f64>() / n as f64;
                let var = plane
                    .iter()
                    .map(|v| {
                        let d = v.to_f64_lossy() - mean;
                        d * d
                    })
                    .sum::<f64>()
                    / n as f64;
                stats.mean.push(T::from_f64_lossy(mean));
                let unbiased = if n > 1 { var * n as f64 / (n - 1) as f64 } else { var };
                stats.var_unbiased.push(T::from_f64_lossy(unbiased));
                (mean, var)
            }
            BnMode::Infer => (
                running_mean[ch].to_f64_lossy(),
                running_var[ch].to_f64_lossy(),
            ),
        };
        let istd = 1.0 / (var + eps).sqrt();
        let mean_t = T::from_f64_lossy(mean);
        let istd_t = T::from_f64_lossy(istd);
        inv_std.push(istd_t);
        let (g, b) = (gamma[ch], beta[ch]);
        let range = ch * n..(ch + 1) * n;
        for ((o, xh), &v) in out.data_mut()[range.clone()]
            .iter_mut()
            .zip(&mut xhat.data_mut()[range])
            .zip(plane)
        {
            *xh = (v - mean_t) * istd_t;
            *o = g * *xh + b;
        }
    }
    let stats = (mode == BnMode::Train).then_some(stats);
    Ok((out, BatchNormCache { mode, xhat, inv_std }, stats))
}

/// Folds batch statistics into running averages with [`BN_MOMENTUM`].
pub fn update_running_stats<T: Scalar>(
    stats: &BatchStats<T>,
    running_mean: &mut [T],
    running_var: &mut [T],
) {
    let m = T::from_f64_lossy(BN_MOMENTUM);
    let keep = T::one() - m;
    for (r, &b) in running_mean.iter_mut().zip(&stats.mean) {
        *r = keep * *r + m * b;
    }
    for (r, &b) in running_var.iter_mut().zip(&stats.var_unbiased) {
        *r = keep * *r + m * b;
    }
}

/// Per-channel batch normalization. Train mode normalizes with the batch's
/// own statistics and updates `running_mean`/`running_var` in place.
pub fn batchnorm<T: Scalar>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    running_mean: &mut [T],
    running_var: &mut [T],
    mode: BnMode,
) -> Result<Tensor<T>> {
    let (out, _, stats) = batchnorm_forward(x, gamma, beta, running_mean, running_var, mode)?;
    if let Some(stats) = stats {
        update_running_stats(&stats, running_mean, running_var);
    }
    Ok(out)
}

/// Returns `(grad_input, grad_gamma, grad_beta)`.
pub fn batchnorm_backward<T: Scalar>(
    cache: &BatchNormCache<T>,
    gamma: &[T],
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Vec<T>, Vec<T>)> {
    cache.xhat.ensure_same_shape(grad_out, "batchnorm backward")?;
    let (c, b, h, w) = grad_out.batch_dims()?;
    let n = b * h * w;
    let nf = T::from_f64_lossy(n as f64);
    let mut gin = Tensor::zeros_like(grad_out);
    let mut ggamma = Vec::with_capacity(c);
    let mut gbeta = Vec::with_capacity(c);
    for ch in 0..c {
        let dy = grad_out.channel(ch);
        let xh = cache.xhat.channel(ch);
        let sum_dy: T = dy.iter().copied().sum();
        let sum_dy_xh: T = dy.iter().zip(xh).map(|(&a, &b)| a * b).sum();
        ggamma.push(sum_dy_xh);
        gbeta.push(sum_dy);
        let gi = &mut gin.data_mut()[ch * n..(ch + 1) * n];
        match cache.mode {
            BnMode::Infer => {
                let k = gamma[ch] * cache.inv_std[ch];
                for (o, &d) in gi.iter_mut().zip(dy) {
                    *o = k * d;
                }
            }
            BnMode::Train => {
                let k = gamma[ch] * cache.inv_std[ch] / nf;
                for ((o, &d), &x) in gi.iter_mut().zip(dy).zip(xh) {
                    *o = k * (nf * d - sum_dy - x * sum_dy_xh);
                }
            }
        }
    }
    Ok((gin, ggamma, gbeta))
}

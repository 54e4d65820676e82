//! Convolution, transposed convolution, activations, and their analytic
//! gradients.
//!
//! Convolutions are lowered to a single matrix product per batch
//! (`im2col`/`col2im` plus GEMM), with the batch folded into the column
//! dimension. Every reduction runs in a fixed order, so results are
//! bit-reproducible for a given input regardless of thread count.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{Element, Shape, Tensor};

/// Kernel size, stride, and zero-padding of a (de)convolution layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

impl ConvGeometry {
    pub fn new(kernel: (usize, usize), stride: (usize, usize), padding: (usize, usize)) -> Result<ConvGeometry> {
        if kernel.0 < 1 || kernel.1 < 1 {
            return Err(Error::InvalidGeometry(format!(
                "kernel dims must be >= 1, got {}x{}",
                kernel.0, kernel.1
            )));
        }
        if stride.0 < 1 || stride.1 < 1 {
            return Err(Error::InvalidGeometry(format!(
                "stride must be >= 1, got {}x{}",
                stride.0, stride.1
            )));
        }
        Ok(ConvGeometry { kernel, stride, padding })
    }

    /// Output spatial dims of a convolution over an `h x w` input.
    pub fn conv_output(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let dim = |size: usize, k: usize, s: usize, p: usize| -> Result<usize> {
            let padded = size + 2 * p;
            if padded < k {
                return Err(Error::InvalidGeometry(format!(
                    "conv output dim not positive: input {size}, kernel {k}, stride {s}, padding {p}"
                )));
            }
            Ok((padded - k) / s + 1)
        };
        Ok((
            dim(h, self.kernel.0, self.stride.0, self.padding.0)?,
            dim(w, self.kernel.1, self.stride.1, self.padding.1)?,
        ))
    }

    /// Output spatial dims of a transposed convolution over an `h x w` input.
    pub fn tconv_output(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let dim = |size: usize, k: usize, s: usize, p: usize| -> Result<usize> {
            let out = ((size - 1) * s + k) as isize - 2 * p as isize;
            if out < 1 {
                return Err(Error::InvalidGeometry(format!(
                    "transposed conv output dim not positive: input {size}, kernel {k}, stride {s}, padding {p}"
                )));
            }
            Ok(out as usize)
        };
        Ok((
            dim(h, self.kernel.0, self.stride.0, self.padding.0)?,
            dim(w, self.kernel.1, self.stride.1, self.padding.1)?,
        ))
    }
}

/// Which linear map a layer applies.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Conv,
    Tconv,
}

/// Elementwise nonlinearity applied after a layer's linear map.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    LeakyRelu { alpha: f64 },
    Relu,
    Tanh,
    Sigmoid,
}

impl Activation {
    /// Leaky ReLU with slope `alpha` on the negative side; `alpha` must lie in (0, 1).
    pub fn leaky_relu(alpha: f64) -> Result<Activation> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "leaky_relu slope must lie in (0, 1), got {alpha}"
            )));
        }
        Ok(Activation::LeakyRelu { alpha })
    }

    #[inline]
    fn eval<T: Element>(self, x: T) -> T {
        match self {
            Activation::LeakyRelu { alpha } => {
                if x >= T::zero() {
                    x
                } else {
                    T::from_real(alpha) * x
                }
            }
            Activation::Relu => x.max(T::zero()),
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => T::one() / (T::one() + (-x).exp()),
        }
    }

    /// Derivative evaluated at the pre-activation `x`. The leaky slope at
    /// exactly 0 is taken as 1; plain ReLU uses 0 there.
    #[inline]
    fn derivative<T: Element>(self, x: T) -> T {
        match self {
            Activation::LeakyRelu { alpha } => {
                if x >= T::zero() {
                    T::one()
                } else {
                    T::from_real(alpha)
                }
            }
            Activation::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Tanh => {
                let t = x.tanh();
                T::one() - t * t
            }
            Activation::Sigmoid => {
                let s = T::one() / (T::one() + (-x).exp());
                s * (T::one() - s)
            }
        }
    }
}

/// Applies the nonlinearity elementwise.
pub fn activation<T: Element>(input: &Tensor<T>, kind: Activation) -> Tensor<T> {
    input.map(|v| kind.eval(v))
}

/// Chain-rule step through the nonlinearity: `grad_out * kind'(pre_activation)`.
pub fn activation_backward<T: Element>(
    pre_activation: &Tensor<T>,
    kind: Activation,
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    if pre_activation.shape() != grad_out.shape() {
        return Err(Error::shape_mismatch(
            "activation backward",
            pre_activation.shape(),
            grad_out.shape(),
        ));
    }
    pre_activation.zip_map(grad_out, |x, g| g * kind.derivative(x))
}

// Below this threshold the rayon dispatch overhead outweighs the work.
const PAR_MIN_ELEMS: usize = 1 << 14;

/// Fills `cols` (`K x (batch * M)` row-major, `K = c * kh * kw`, `M = oh * ow`)
/// with input patches; out-of-bounds reads are zero.
fn im2col<T: Element>(
    src: &Tensor<T>,
    geom: ConvGeometry,
    oh: usize,
    ow: usize,
    cols: &mut [T],
) {
    let s = src.shape();
    let (kh, kw) = geom.kernel;
    let (sh, sw) = geom.stride;
    let (ph, pw) = geom.padding;
    let m = oh * ow;
    let bm = s.n * m;
    let k_rows = s.c * kh * kw;
    debug_assert_eq!(cols.len(), k_rows * bm);
    let plane = s.h * s.w;

    let fill_row = |(r, row): (usize, &mut [T])| {
        let c = r / (kh * kw);
        let dy = (r / kw) % kh;
        let dx = r % kw;
        for n in 0..s.n {
            let src_plane = &src.data()[(n * s.c + c) * plane..(n * s.c + c + 1) * plane];
            for y in 0..oh {
                let iy = (y * sh + dy) as isize - ph as isize;
                let seg = &mut row[n * m + y * ow..n * m + y * ow + ow];
                if iy < 0 || iy >= s.h as isize {
                    seg.fill(T::zero());
                    continue;
                }
                let src_row = &src_plane[iy as usize * s.w..(iy as usize + 1) * s.w];
                for (x, out) in seg.iter_mut().enumerate() {
                    let ix = (x * sw + dx) as isize - pw as isize;
                    *out = if ix >= 0 && ix < s.w as isize {
                        src_row[ix as usize]
                    } else {
                        T::zero()
                    };
                }
            }
        }
    };

    if cols.len() >= PAR_MIN_ELEMS {
        cols.par_chunks_mut(bm).enumerate().for_each(fill_row);
    } else {
        cols.chunks_mut(bm).enumerate().for_each(fill_row);
    }
}

/// Adjoint of [`im2col`]: scatter-adds `cols` (`K x (batch * M)`) back onto a
/// `(batch, c, h, w)` tensor; writes landing outside the tensor are dropped.
fn col2im<T: Element>(
    cols: &[T],
    geom: ConvGeometry,
    oh: usize,
    ow: usize,
    dst: &mut Tensor<T>,
) {
    let s = dst.shape();
    let (kh, kw) = geom.kernel;
    let (sh, sw) = geom.stride;
    let (ph, pw) = geom.padding;
    let m = oh * ow;
    let bm = s.n * m;
    let k_rows = s.c * kh * kw;
    debug_assert_eq!(cols.len(), k_rows * bm);
    let plane = s.h * s.w;
    let sample_len = s.c * plane;
    let (h, w, c) = (s.h, s.w, s.c);

    let scatter_sample = |(n, out): (usize, &mut [T])| {
        for r in 0..k_rows {
            let ch = r / (kh * kw);
            let dy = (r / kw) % kh;
            let dx = r % kw;
            let row = &cols[r * bm + n * m..r * bm + (n + 1) * m];
            for y in 0..oh {
                let iy = (y * sh + dy) as isize - ph as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                let base = ch * plane + iy as usize * w;
                for x in 0..ow {
                    let ix = (x * sw + dx) as isize - pw as isize;
                    if ix >= 0 && ix < w as isize {
                        out[base + ix as usize] += row[y * ow + x];
                    }
                }
            }
        }
        let _ = c;
    };

    if dst.len() >= PAR_MIN_ELEMS && s.n > 1 {
        dst.data_mut()
            .par_chunks_mut(sample_len)
            .enumerate()
            .for_each(scatter_sample);
    } else {
        dst.data_mut()
            .chunks_mut(sample_len)
            .enumerate()
            .for_each(scatter_sample);
    }
}

/// Copies a `(batch, c, h, w)` tensor into a `c x (batch * h * w)` matrix.
fn gather_channel_major<T: Element>(src: &Tensor<T>, mat: &mut [T]) {
    let s = src.shape();
    let m = s.h * s.w;
    let bm = s.n * m;
    debug_assert_eq!(mat.len(), s.c * bm);
    let run = |(c, row): (usize, &mut [T])| {
        for n in 0..s.n {
            let base = (n * s.c + c) * m;
            row[n * m..(n + 1) * m].copy_from_slice(&src.data()[base..base + m]);
        }
    };
    if mat.len() >= PAR_MIN_ELEMS {
        mat.par_chunks_mut(bm).enumerate().for_each(run);
    } else {
        mat.chunks_mut(bm).enumerate().for_each(run);
    }
}

/// Inverse layout move of [`gather_channel_major`], adding `bias` per channel.
fn scatter_channel_major<T: Element>(mat: &[T], bias: &[T], dst: &mut Tensor<T>) {
    let s = dst.shape();
    let m = s.h * s.w;
    let bm = s.n * m;
    debug_assert_eq!(mat.len(), s.c * bm);
    let sample_len = s.c * m;
    let run = |(n, out): (usize, &mut [T])| {
        for c in 0..s.c {
            let row = &mat[c * bm + n * m..c * bm + (n + 1) * m];
            let seg = &mut out[c * m..(c + 1) * m];
            let b = bias[c];
            for (o, &v) in seg.iter_mut().zip(row) {
                *o = v + b;
            }
        }
    };
    if dst.len() >= PAR_MIN_ELEMS && s.n > 1 {
        dst.data_mut()
            .par_chunks_mut(sample_len)
            .enumerate()
            .for_each(run);
    } else {
        dst.data_mut()
            .chunks_mut(sample_len)
            .enumerate()
            .for_each(run);
    }
}

fn check_bias<T: Element>(bias: &[T], out_c: usize) -> Result<()> {
    if bias.len() != out_c {
        return Err(Error::shape_mismatch(
            "bias length",
            out_c,
            bias.len(),
        ));
    }
    Ok(())
}

fn check_kernel_dims(weights: Shape, geom: ConvGeometry) -> Result<()> {
    if (weights.h, weights.w) != geom.kernel {
        return Err(Error::shape_mismatch(
            "kernel dims vs geometry",
            format!("{}x{}", geom.kernel.0, geom.kernel.1),
            format!("{}x{}", weights.h, weights.w),
        ));
    }
    Ok(())
}

/// 2-D convolution. `weights` is `(out_c, in_c, kh, kw)`; output position
/// `(y, x)` reads the input window at `y*sh - ph + dy, x*sw - pw + dx` with
/// zero padding outside the input.
fn conv2d_whole<T: Element>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: &[T],
    geom: ConvGeometry,
) -> Result<Tensor<T>> {
    let (si, sw_) = (input.shape(), weights.shape());
    if si.c != sw_.c {
        return Err(Error::shape_mismatch(
            "conv2d input channels vs weights",
            format!("input {si} with in_c {}", sw_.c),
            format!("weights {sw_} applied to input with c {}", si.c),
        ));
    }
    check_kernel_dims(sw_, geom)?;
    let out_c = sw_.n;
    check_bias(bias, out_c)?;
    let (oh, ow) = geom.conv_output(si.h, si.w)?;

    let k = si.c * geom.kernel.0 * geom.kernel.1;
    let m = oh * ow;
    let bm = si.n * m;
    let mut cols = vec![T::zero(); k * bm];
    im2col(input, geom, oh, ow, &mut cols);

    let mut out_mat = vec![T::zero(); out_c * bm];
    T::gemm(
        out_c, k, bm,
        weights.data(), k, 1,
        &cols, bm, 1,
        &mut out_mat, bm, 1,
    );

    let mut out = Tensor::zeros(Shape::new(si.n, out_c, oh, ow));
    scatter_channel_major(&out_mat, bias, &mut out);
    Ok(out)
}

/// Analytic gradients of [`conv2d`] with respect to input, weights, and bias.
fn conv2d_backward_whole<T: Element>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    geom: ConvGeometry,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Vec<T>)> {
    let (si, sw_) = (input.shape(), weights.shape());
    if si.c != sw_.c {
        return Err(Error::shape_mismatch(
            "conv2d_backward input channels vs weights",
            sw_.c,
            si.c,
        ));
    }
    check_kernel_dims(sw_, geom)?;
    let out_c = sw_.n;
    let (oh, ow) = geom.conv_output(si.h, si.w)?;
    let expect = Shape::new(si.n, out_c, oh, ow);
    if grad_out.shape() != expect {
        return Err(Error::shape_mismatch("conv2d_backward grad_out", expect, grad_out.shape()));
    }

    let k = si.c * geom.kernel.0 * geom.kernel.1;
    let m = oh * ow;
    let bm = si.n * m;

    let grad_bias = channel_sums(grad_out);

    let mut g_mat = vec![T::zero(); out_c * bm];
    gather_channel_major(grad_out, &mut g_mat);

    let mut cols = vec![T::zero(); k * bm];
    im2col(input, geom, oh, ow, &mut cols);

    // dL/dW = g_mat (out_c x bm) * cols^T (bm x k)
    let mut grad_w = Tensor::zeros(sw_);
    T::gemm(
        out_c, bm, k,
        &g_mat, bm, 1,
        &cols, 1, bm,
        grad_w.data_mut(), k, 1,
    );

    // dL/dx = col2im( W^T (k x out_c) * g_mat (out_c x bm) )
    let mut cols_g = vec![T::zero(); k * bm];
    T::gemm(
        k, out_c, bm,
        weights.data(), 1, k,
        &g_mat, bm, 1,
        &mut cols_g, bm, 1,
    );
    let mut grad_in = Tensor::zeros(si);
    col2im(&cols_g, geom, oh, ow, &mut grad_in);

    Ok((grad_in, grad_w, grad_bias))
}

/// Transposed 2-D convolution. `weights` is `(in_c, out_c, kh, kw)`; each
/// input value scatters through the kernel onto the larger output grid, and
/// positions falling outside the output are dropped. As a linear map this is
/// exactly the transpose of the matching [`conv2d`].
fn tconv2d_whole<T: Element>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: &[T],
    geom: ConvGeometry,
) -> Result<Tensor<T>> {
    let (si, sw_) = (input.shape(), weights.shape());
    if si.c != sw_.n {
        return Err(Error::shape_mismatch(
            "tconv2d input channels vs weights",
            format!("weights {sw_} expect input c {}", sw_.n),
            format!("input {si}"),
        ));
    }
    check_kernel_dims(sw_, geom)?;
    let out_c = sw_.c;
    check_bias(bias, out_c)?;
    let (oh, ow) = geom.tconv_output(si.h, si.w)?;

    let k = out_c * geom.kernel.0 * geom.kernel.1;
    let m = si.h * si.w;
    let bm = si.n * m;

    let mut x_mat = vec![T::zero(); si.c * bm];
    gather_channel_major(input, &mut x_mat);

    // cols = W^T (k x in_c) * x (in_c x bm), W viewed as in_c x k row-major
    let mut cols = vec![T::zero(); k * bm];
    T::gemm(
        k, si.c, bm,
        weights.data(), 1, k,
        &x_mat, bm, 1,
        &mut cols, bm, 1,
    );

    let mut out = Tensor::zeros(Shape::new(si.n, out_c, oh, ow));
    col2im(&cols, geom, si.h, si.w, &mut out);
    if bias.iter().any(|b| *b != T::zero()) {
        let plane = oh * ow;
        for n in 0..si.n {
            for c in 0..out_c {
                let base = (n * out_c + c) * plane;
                let b = bias[c];
                for v in &mut out.data_mut()[base..base + plane] {
                    *v += b;
                }
            }
        }
    }
    Ok(out)
}

/// Analytic gradients of [`tconv2d`] with respect to input, weights, and bias.
fn tconv2d_backward_whole<T: Element>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    geom: ConvGeometry,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Vec<T>)> {
    let (si, sw_) = (input.shape(), weights.shape());
    if si.c != sw_.n {
        return Err(Error::shape_mismatch(
            "tconv2d_backward input channels vs weights",
            sw_.n,
            si.c,
        ));
    }
    check_kernel_dims(sw_, geom)?;
    let out_c = sw_.c;
    let (oh, ow) = geom.tconv_output(si.h, si.w)?;
    let expect = Shape::new(si.n, out_c, oh, ow);
    if grad_out.shape() != expect {
        return Err(Error::shape_mismatch("tconv2d_backward grad_out", expect, grad_out.shape()));
    }

    let k = out_c * geom.kernel.0 * geom.kernel.1;
    let m = si.h * si.w;
    let bm = si.n * m;

    let grad_bias = channel_sums(grad_out);

    // The forward scatter reads become gathers: im2col over the output grid
    // enumerates exactly the positions each input cell touched.
    let mut cols_g = vec![T::zero(); k * bm];
    im2col(grad_out, geom, si.h, si.w, &mut cols_g);

    // dL/dx = W (in_c x k) * cols_g (k x bm)  — a plain convolution of grad_out.
    let mut gin_mat = vec![T::zero(); si.c * bm];
    T::gemm(
        si.c, k, bm,
        weights.data(), k, 1,
        &cols_g, bm, 1,
        &mut gin_mat, bm, 1,
    );
    let mut grad_in = Tensor::zeros(si);
    scatter_channel_major(&gin_mat, &vec![T::zero(); si.c], &mut grad_in);

    // dL/dW = x (in_c x bm) * cols_g^T (bm x k)
    let mut x_mat = vec![T::zero(); si.c * bm];
    gather_channel_major(input, &mut x_mat);
    let mut grad_w = Tensor::zeros(sw_);
    T::gemm(
        si.c, bm, k,
        &x_mat, bm, 1,
        &cols_g, 1, bm,
        grad_w.data_mut(), k, 1,
    );

    Ok((grad_in, grad_w, grad_bias))
}


// Splitting a batch in half and running the halves on separate cores leaves
// per-sample outputs bit-identical (each output element keeps its reduction
// order) and keeps gradient sums in a fixed order.
const SPLIT_MIN_MACS: usize = 1 << 22;

fn split_batch<T: Element>(t: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
    let s = t.shape();
    let half = s.n / 2;
    let sample = s.c * s.h * s.w;
    let a = Tensor::new(
        Shape::new(half, s.c, s.h, s.w),
        t.data()[..half * sample].to_vec(),
    )
    .expect("front half is well-formed");
    let b = Tensor::new(
        Shape::new(s.n - half, s.c, s.h, s.w),
        t.data()[half * sample..].to_vec(),
    )
    .expect("back half is well-formed");
    (a, b)
}

fn conv_macs<T: Element>(input: &Tensor<T>, weights: &Tensor<T>, positions: usize) -> usize {
    weights.len() * positions * input.shape().n
}

/// 2-D convolution. `weights` is `(out_c, in_c, kh, kw)`; output position
/// `(y, x)` reads the input window at `y*sh - ph + dy, x*sw - pw + dx` with
/// zero padding outside the input.
pub fn conv2d<T: Element>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: &[T],
    geom: ConvGeometry,
) -> Result<Tensor<T>> {
    let si = input.shape();
    if si.n >= 2 {
        if let Ok((oh, ow)) = geom.conv_output(si.h, si.w) {
            if conv_macs(input, weights, oh * ow) >= SPLIT_MIN_MACS {
                let (front, back) = split_batch(input);
                let (ra, rb) = rayon::join(
                    || conv2d_whole(&front, weights, bias, geom),
                    || conv2d_whole(&back, weights, bias, geom),
                );
                return Tensor::stack(&[&ra?, &rb?]);
            }
        }
    }
    conv2d_whole(input, weights, bias, geom)
}

/// Analytic gradients of [`conv2d`] with respect to input, weights, and bias.
pub fn conv2d_backward<T: Element>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    geom: ConvGeometry,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Vec<T>)> {
    let si = input.shape();
    if si.n >= 2 && grad_out.shape().n == si.n {
        let positions = grad_out.shape().h * grad_out.shape().w;
        if 2 * conv_macs(input, weights, positions) >= SPLIT_MIN_MACS {
            let (in_a, in_b) = split_batch(input);
            let (go_a, go_b) = split_batch(grad_out);
            let (ra, rb) = rayon::join(
                || conv2d_backward_whole(&in_a, weights, geom, &go_a),
                || conv2d_backward_whole(&in_b, weights, geom, &go_b),
            );
            let (gi_a, mut gw, mut gb) = ra?;
            let (gi_b, gw_b, gb_b) = rb?;
            gw.add_in_place(&gw_b)?;
            for (x, y) in gb.iter_mut().zip(&gb_b) {
                *x += *y;
            }
            return Ok((Tensor::stack(&[&gi_a, &gi_b])?, gw, gb));
        }
    }
    conv2d_backward_whole(input, weights, geom, grad_out)
}

/// Transposed 2-D convolution. `weights` is `(in_c, out_c, kh, kw)`; each
/// input value scatters through the kernel onto the larger output grid, and
/// positions falling outside the output are dropped. As a linear map this is
/// exactly the transpose of the matching [`conv2d`].
pub fn tconv2d<T: Element>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: &[T],
    geom: ConvGeometry,
) -> Result<Tensor<T>> {
    let si = input.shape();
    if si.n >= 2 && conv_macs(input, weights, si.h * si.w) >= SPLIT_MIN_MACS {
        let (front, back) = split_batch(input);
        let (ra, rb) = rayon::join(
            || tconv2d_whole(&front, weights, bias, geom),
            || tconv2d_whole(&back, weights, bias, geom),
        );
        return Tensor::stack(&[&ra?, &rb?]);
    }
    tconv2d_whole(input, weights, bias, geom)
}

/// Analytic gradients of [`tconv2d`] with respect to input, weights, and bias.
pub fn tconv2d_backward<T: Element>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    geom: ConvGeometry,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Vec<T>)> {
    let si = input.shape();
    if si.n >= 2
        && grad_out.shape().n == si.n
        && 2 * conv_macs(input, weights, si.h * si.w) >= SPLIT_MIN_MACS
    {
        let (in_a, in_b) = split_batch(input);
        let (go_a, go_b) = split_batch(grad_out);
        let (ra, rb) = rayon::join(
            || tconv2d_backward_whole(&in_a, weights, geom, &go_a),
            || tconv2d_backward_whole(&in_b, weights, geom, &go_b),
        );
        let (gi_a, mut gw, mut gb) = ra?;
        let (gi_b, gw_b, gb_b) = rb?;
        gw.add_in_place(&gw_b)?;
        for (x, y) in gb.iter_mut().zip(&gb_b) {
            *x += *y;
        }
        return Ok((Tensor::stack(&[&gi_a, &gi_b])?, gw, gb));
    }
    tconv2d_backward_whole(input, weights, geom, grad_out)
}

/// Runs a layer's linear map.
pub fn run_linear<T: Element>(
    kind: LayerKind,
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: &[T],
    geom: ConvGeometry,
) -> Result<Tensor<T>> {
    match kind {
        LayerKind::Conv => conv2d(input, weights, bias, geom),
        LayerKind::Tconv => tconv2d(input, weights, bias, geom),
    }
}

/// Gradients of a layer's linear map.
pub fn run_linear_backward<T: Element>(
    kind: LayerKind,
    input: &Tensor<T>,
    weights: &Tensor<T>,
    geom: ConvGeometry,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Vec<T>)> {
    match kind {
        LayerKind::Conv => conv2d_backward(input, weights, geom, grad_out),
        LayerKind::Tconv => tconv2d_backward(input, weights, geom, grad_out),
    }
}

/// Adjoint of a layer's linear map with zero bias: a conv layer's adjoint is
/// the matching transposed conv over the same weights, and vice versa.
pub fn run_linear_adjoint<T: Element>(
    kind: LayerKind,
    input: &Tensor<T>,
    weights: &Tensor<T>,
    geom: ConvGeometry,
) -> Result<Tensor<T>> {
    match kind {
        LayerKind::Conv => tconv2d(input, weights, &vec![T::zero(); weights.shape().c], geom),
        LayerKind::Tconv => conv2d(input, weights, &vec![T::zero(); weights.shape().n], geom),
    }
}

/// Per-channel sums over batch and spatial dims (the bias gradient).
fn channel_sums<T: Element>(t: &Tensor<T>) -> Vec<T> {
    let s = t.shape();
    let plane = s.h * s.w;
    (0..s.c)
        .map(|c| {
            let mut acc = T::zero();
            for n in 0..s.n {
                let base = (n * s.c + c) * plane;
                for &v in &t.data()[base..base + plane] {
                    acc += v;
                }
            }
            acc
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: (usize, usize, usize, usize), data: Vec<f32>) -> Tensor<f32> {
        Tensor::new(Shape::new(shape.0, shape.1, shape.2, shape.3), data).unwrap()
    }

    fn geom(k: usize, s: usize, p: usize) -> ConvGeometry {
        ConvGeometry::new((k, k), (s, s), (p, p)).unwrap()
    }

    // Direct sliding-window sum, independent of the im2col/GEMM path.
    fn conv_reference(
        input: &Tensor<f32>,
        weights: &Tensor<f32>,
        bias: &[f32],
        g: ConvGeometry,
    ) -> Tensor<f32> {
        let (si, sw) = (input.shape(), weights.shape());
        let (oh, ow) = g.conv_output(si.h, si.w).unwrap();
        Tensor::from_fn(Shape::new(si.n, sw.n, oh, ow), |n, o, y, x| {
            let mut acc = bias[o];
            for i in 0..si.c {
                for dy in 0..g.kernel.0 {
                    for dx in 0..g.kernel.1 {
                        let iy = (y * g.stride.0 + dy) as isize - g.padding.0 as isize;
                        let ix = (x * g.stride.1 + dx) as isize - g.padding.1 as isize;
                        if iy >= 0 && iy < si.h as isize && ix >= 0 && ix < si.w as isize {
                            acc += input.get(n, i, iy as usize, ix as usize)
                                * weights.get(o, i, dy, dx);
                        }
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn conv_matches_hand_computed_2x2_kernel() {
        let input = t((1, 1, 3, 3), vec![1., 2., 3., 4., 5., 6., 7., 8., 9.]);
        let kernel = t((1, 1, 2, 2), vec![1., 0., 0., 1.]);
        let out = conv2d(&input, &kernel, &[0.0], geom(2, 1, 0)).unwrap();
        assert_eq!(out.shape(), Shape::new(1, 1, 2, 2));
        assert_eq!(out.data(), &[6., 8., 12., 14.]);
    }

    #[test]
    fn identity_kernel_is_identity() {
        let input = t((2, 1, 4, 3), (0..24).map(|v| v as f32 * 0.5 - 3.0).collect());
        let kernel = t((1, 1, 1, 1), vec![1.0]);
        let out = conv2d(&input, &kernel, &[0.0], geom(1, 1, 0)).unwrap();
        assert_eq!(out.data(), input.data());
        let tout = tconv2d(&input, &kernel, &[0.0], geom(1, 1, 0)).unwrap();
        assert_eq!(tout.data(), input.data());
    }

    #[test]
    fn zero_input_leaves_bias() {
        let input = Tensor::zeros(Shape::new(1, 2, 5, 5));
        let kernel = t((3, 2, 3, 3), (0..54).map(|v| v as f32).collect());
        let out = conv2d(&input, &kernel, &[1.5, -2.0, 0.25], geom(3, 2, 1)).unwrap();
        for o in 0..3 {
            let expect = [1.5, -2.0, 0.25][o];
            for y in 0..out.shape().h {
                for x in 0..out.shape().w {
                    assert_eq!(out.get(0, o, y, x), expect);
                }
            }
        }
    }

    #[test]
    fn conv_matches_reference_on_strided_padded_cases() {
        let mut state = 11u64;
        let mut next = move || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 33) as f32 / (1u64 << 31) as f32) - 1.0
        };
        for &(n, ci, co, h, w, k, s, p) in &[
            (1usize, 1usize, 1usize, 4usize, 4usize, 2usize, 1usize, 0usize),
            (2, 3, 4, 6, 5, 3, 2, 1),
            (1, 2, 2, 8, 8, 4, 2, 1),
            (3, 1, 2, 5, 7, 1, 1, 0),
            (1, 4, 3, 7, 6, 3, 3, 2),
        ] {
            let input = Tensor::from_fn(Shape::new(n, ci, h, w), |_, _, _, _| next());
            let weights = Tensor::from_fn(Shape::new(co, ci, k, k), |_, _, _, _| next());
            let bias: Vec<f32> = (0..co).map(|_| next()).collect();
            let g = geom(k, s, p);
            let got = conv2d(&input, &weights, &bias, g).unwrap();
            let want = conv_reference(&input, &weights, &bias, g);
            assert_eq!(got.shape(), want.shape());
            for (a, b) in got.data().iter().zip(want.data()) {
                assert!(
                    (a - b).abs() <= 1e-5 * b.abs().max(1.0),
                    "conv mismatch: {a} vs {b} at case {:?}",
                    (n, ci, co, h, w, k, s, p)
                );
            }
        }
    }

    #[test]
    fn tconv_scatters_single_pixel_through_kernel() {
        let input = t((1, 1, 1, 1), vec![5.0]);
        let kernel = t((1, 1, 2, 2), vec![1., 2., 3., 4.]);
        let out = tconv2d(&input, &kernel, &[0.0], geom(2, 1, 0)).unwrap();
        assert_eq!(out.shape(), Shape::new(1, 1, 2, 2));
        assert_eq!(out.data(), &[5., 10., 15., 20.]);
    }

    #[test]
    fn conv_and_tconv_are_adjoint() {
        let mut state = 99u64;
        let mut next = move || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 33) as f32 / (1u64 << 31) as f32) - 1.0
        };
        for &(ci, co, h, w, k, s, p) in &[
            (1usize, 1usize, 4usize, 4usize, 2usize, 2usize, 0usize),
            (2, 3, 6, 6, 4, 2, 1),
            (3, 2, 5, 7, 3, 1, 1),
        ] {
            let g = geom(k, s, p);
            let x = Tensor::from_fn(Shape::new(1, ci, h, w), |_, _, _, _| next());
            let weights = Tensor::from_fn(Shape::new(co, ci, k, k), |_, _, _, _| next());
            let (oh, ow) = g.conv_output(h, w).unwrap();
            let y = Tensor::from_fn(Shape::new(1, co, oh, ow), |_, _, _, _| next());
            let zeros_co = vec![0.0; co];
            let zeros_ci = vec![0.0; ci];
            let lhs = conv2d(&x, &weights, &zeros_co, g).unwrap().dot(&y).unwrap();
            let rhs = tconv2d(&y, &weights, &zeros_ci, g).unwrap().dot(&x).unwrap();
            assert!(
                (lhs - rhs).abs() <= 1e-4 * lhs.abs().max(1.0),
                "adjointness broken: {lhs} vs {rhs}"
            );
        }
    }

    #[test]
    fn backward_of_zero_grad_is_zero() {
        let input = t((1, 1, 2, 2), vec![1., 2., 3., 4.]);
        let kernel = t((1, 1, 1, 1), vec![2.0]);
        let g = geom(1, 1, 0);
        let grad_out = Tensor::zeros(Shape::new(1, 1, 2, 2));
        let (gi, gw, gb) = conv2d_backward(&input, &kernel, g, &grad_out).unwrap();
        assert!(gi.data().iter().all(|&v| v == 0.0));
        assert!(gw.data().iter().all(|&v| v == 0.0));
        assert!(gb.iter().all(|&v| v == 0.0));
        let (gi, gw, gb) = tconv2d_backward(&input, &kernel, g, &grad_out).unwrap();
        assert!(gi.data().iter().all(|&v| v == 0.0));
        assert!(gw.data().iter().all(|&v| v == 0.0));
        assert!(gb.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_matches_hand_chain_rule_for_1x1_kernel() {
        let input = t((1, 1, 2, 2), vec![1., 2., 3., 4.]);
        let kernel = t((1, 1, 1, 1), vec![2.5]);
        let grad_out = t((1, 1, 2, 2), vec![0.5, -1., 2., 0.25]);
        let (gi, gw, gb) = conv2d_backward(&input, &kernel, geom(1, 1, 0), &grad_out).unwrap();
        assert_eq!(gi.data(), &[1.25, -2.5, 5.0, 0.625]);
        let expect_gw: f32 = 1. * 0.5 + 2. * -1. + 3. * 2. + 4. * 0.25;
        assert_eq!(gw.data(), &[expect_gw]);
        assert_eq!(gb, vec![0.5 - 1. + 2. + 0.25]);
    }

    #[test]
    fn tconv_grad_input_equals_conv_of_grad_out() {
        let mut state = 7u64;
        let mut next = move || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 33) as f32 / (1u64 << 31) as f32) - 1.0
        };
        let g = geom(4, 2, 1);
        let input = Tensor::from_fn(Shape::new(2, 3, 3, 3), |_, _, _, _| next());
        let weights = Tensor::from_fn(Shape::new(3, 2, 4, 4), |_, _, _, _| next());
        let (oh, ow) = g.tconv_output(3, 3).unwrap();
        let grad_out = Tensor::from_fn(Shape::new(2, 2, oh, ow), |_, _, _, _| next());
        let (gi, _, _) = tconv2d_backward(&input, &weights, g, &grad_out).unwrap();
        let via_conv = conv2d(&grad_out, &weights, &vec![0.0; 3], g).unwrap();
        for (a, b) in gi.data().iter().zip(via_conv.data()) {
            assert!((a - b).abs() <= 1e-5 * b.abs().max(1.0));
        }
    }

    #[test]
    fn geometry_rejects_degenerate_outputs() {
        let g = geom(4, 2, 0);
        assert!(g.conv_output(2, 2).is_err());
        assert!(g.conv_output(4, 4).is_ok());
        let g2 = ConvGeometry::new((2, 2), (1, 1), (3, 3)).unwrap();
        assert!(g2.tconv_output(2, 2).is_err());
        assert!(ConvGeometry::new((0, 1), (1, 1), (0, 0)).is_err());
        assert!(ConvGeometry::new((1, 1), (0, 1), (0, 0)).is_err());
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let input = Tensor::<f32>::zeros(Shape::new(1, 3, 4, 4));
        let kernel = Tensor::<f32>::zeros(Shape::new(2, 2, 2, 2));
        let err = conv2d(&input, &kernel, &[0.0; 2], geom(2, 1, 0)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("2x2x2x2") && msg.contains('3'), "unhelpful error: {msg}");
    }

    #[test]
    fn leaky_relu_matches_definition() {
        let a = Activation::leaky_relu(0.2).unwrap();
        let x = t((1, 1, 1, 3), vec![-1.0, 0.0, 2.0]);
        let y = activation(&x, a);
        assert_eq!(y.data(), &[-0.2, 0.0, 2.0]);
        assert!(Activation::leaky_relu(0.0).is_err());
        assert!(Activation::leaky_relu(1.0).is_err());
    }

    #[test]
    fn sigmoid_and_tanh_at_zero() {
        let x = t((1, 1, 1, 1), vec![0.0]);
        assert_eq!(activation(&x, Activation::Sigmoid).data(), &[0.5]);
        assert_eq!(activation(&x, Activation::Tanh).data(), &[0.0]);
    }

    #[test]
    fn relu_zeroes_negatives() {
        let x = t((1, 1, 2, 2), vec![-3.0, -0.5, -1e-9, -100.0]);
        assert!(activation(&x, Activation::Relu).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn activation_backward_linear_regions() {
        let x = t((1, 1, 1, 4), vec![1.0, 2.0, -1.0, 0.0]);
        let g = Tensor::filled(Shape::new(1, 1, 1, 4), 1.0);
        let back = activation_backward(&x, Activation::Relu, &g).unwrap();
        assert_eq!(back.data(), &[1.0, 1.0, 0.0, 0.0]);
        let back = activation_backward(&x, Activation::leaky_relu(0.2).unwrap(), &g).unwrap();
        // slope at exactly 0 is 1
        assert_eq!(back.data(), &[1.0, 1.0, 0.2, 1.0]);
        let back = activation_backward(&x, Activation::Sigmoid, &g).unwrap();
        assert!((back.data()[3] - 0.25).abs() < 1e-7);
    }
}

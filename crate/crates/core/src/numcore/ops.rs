//! Forward kernels and their hand-written adjoints.
//!
//! Kernels work on row-major slices so callers can run them over ragged
//! batches without copying; the `Tensor` wrappers check shapes.

use rand::Rng;

use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// `out[m×n] (+)= a[m×k] · b[k×n]`
pub fn matmul_into<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            axpy(av, &b[p * n..(p + 1) * n], orow);
        }
    }
}

/// `out[k×n] += aᵀ · c` for `a[m×k]`, `c[m×n]`.
pub fn matmul_at_b_into<T: Scalar>(a: &[T], c: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    for i in 0..m {
        let crow = &c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            axpy(av, crow, &mut out[p * n..(p + 1) * n]);
        }
    }
}

/// `out[m×k] += c · bᵀ` for `c[m×n]`, `b[k×n]`.
pub fn matmul_a_bt_into<T: Scalar>(c: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    for i in 0..m {
        let crow = &c[i * n..(i + 1) * n];
        for p in 0..k {
            out[i * k + p] = out[i * k + p] + dot(crow, &b[p * n..(p + 1) * n]);
        }
    }
}

#[inline]
pub fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv = *yv + alpha * xv;
    }
}

#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        for l in 0..4 {
            acc[l] = acc[l] + a[c * 4 + l] * b[c * 4 + l];
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..a.len() {
        s = s + a[i] * b[i];
    }
    s
}

pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
        return Err(Error::shape(format!("matmul {:?} x {:?}", a.shape(), b.shape())));
    }
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = Tensor::zeros(&[m, n]);
    matmul_into(a.data(), b.data(), m, k, n, out.data_mut());
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    Valid,
    /// Zero padding so that the output has the input length (stride 1 only).
    Same,
}

/// Geometry of one 1D convolution call.
#[derive(Debug, Clone, Copy)]
pub struct ConvGeom {
    pub len: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad_left: usize,
    pub out_len: usize,
}

impl ConvGeom {
    pub fn new(
        len: usize,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: Padding,
    ) -> Result<Self> {
        if stride == 0 {
            return Err(Error::invalid("conv stride must be >= 1"));
        }
        if kernel == 0 {
            return Err(Error::invalid("conv kernel must be >= 1"));
        }
        let (pad_left, out_len) = match padding {
            Padding::Valid => {
                if kernel > len {
                    return Err(Error::invalid(format!(
                        "kernel {kernel} larger than input length {len}"
                    )));
                }
                (0, (len - kernel) / stride + 1)
            }
            Padding::Same => {
                if stride != 1 {
                    return Err(Error::invalid("same padding requires stride 1"));
                }
                if len == 0 {
                    return Err(Error::invalid("kernel larger than padded input length 0"));
                }
                ((kernel - 1) / 2, len)
            }
        };
        Ok(Self {
            len,
            in_ch,
            out_ch,
            kernel,
            stride,
            pad_left,
            out_len,
        })
    }

    #[inline]
    fn source_row(&self, j: usize, kk: usize) -> Option<usize> {
        let r = (j * self.stride + kk) as isize - self.pad_left as isize;
        if r >= 0 && (r as usize) < self.len {
            Some(r as usize)
        } else {
            None
        }
    }
}

/// Reorders `out_ch×K×in_ch` filters into `K×in_ch×out_ch` for the forward kernel.
pub fn transpose_filters<T: Scalar>(filters: &[T], g: &ConvGeom) -> Vec<T> {
    let mut t = vec![T::zero(); filters.len()];
    for o in 0..g.out_ch {
        for kk in 0..g.kernel {
            for c in 0..g.in_ch {
                t[(kk * g.in_ch + c) * g.out_ch + o] = filters[(o * g.kernel + kk) * g.in_ch + c];
            }
        }
    }
    t
}

/// Forward convolution; `filters_t` comes from [`transpose_filters`]. Writes `out_len×out_ch`.
pub fn conv1d_raw<T: Scalar>(input: &[T], filters_t: &[T], g: &ConvGeom, out: &mut [T]) {
    debug_assert_eq!(input.len(), g.len * g.in_ch);
    debug_assert_eq!(out.len(), g.out_len * g.out_ch);
    out.iter_mut().for_each(|v| *v = T::zero());
    for j in 0..g.out_len {
        let orow = &mut out[j * g.out_ch..(j + 1) * g.out_ch];
        for kk in 0..g.kernel {
            let Some(r) = g.source_row(j, kk) else { continue };
            let irow = &input[r * g.in_ch..(r + 1) * g.in_ch];
            for (c, &x) in irow.iter().enumerate() {
                let w = &filters_t[(kk * g.in_ch + c) * g.out_ch..(kk * g.in_ch + c + 1) * g.out_ch];
                axpy(x, w, orow);
            }
        }
    }
}

/// Adjoint of [`conv1d_raw`]: accumulates into `grad_input` (if given) and `grad_filters`
/// (original `out_ch×K×in_ch` layout).
pub fn conv1d_backward_raw<T: Scalar>(
    input: &[T],
    filters: &[T],
    g: &ConvGeom,
    grad_out: &[T],
    mut grad_input: Option<&mut [T]>,
    grad_filters: &mut [T],
) {
    let kc = g.kernel * g.in_ch;
    for j in 0..g.out_len {
        for kk in 0..g.kernel {
            let Some(r) = g.source_row(j, kk) else { continue };
            let irow = &input[r * g.in_ch..(r + 1) * g.in_ch];
            for o in 0..g.out_ch {
                let go = grad_out[j * g.out_ch + o];
                if go == T::zero() {
                    continue;
                }
                let off = o * kc + kk * g.in_ch;
                axpy(go, irow, &mut grad_filters[off..off + g.in_ch]);
                if let Some(gi) = grad_input.as_deref_mut() {
                    axpy(
                        go,
                        &filters[off..off + g.in_ch],
                        &mut gi[r * g.in_ch..(r + 1) * g.in_ch],
                    );
                }
            }
        }
    }
}

fn conv_geom_for<T: Scalar>(
    input: &Tensor<T>,
    filters: &Tensor<T>,
    stride: usize,
    padding: Padding,
) -> Result<ConvGeom> {
    if input.rank() != 2 || filters.rank() != 3 {
        return Err(Error::shape(format!(
            "conv1d expects length×ch input and out×K×in filters, got {:?} and {:?}",
            input.shape(),
            filters.shape()
        )));
    }
    let (len, in_ch) = (input.shape()[0], input.shape()[1]);
    let (out_ch, kernel, f_in) = (filters.shape()[0], filters.shape()[1], filters.shape()[2]);
    if f_in != in_ch {
        return Err(Error::shape(format!(
            "channel mismatch: input has {in_ch}, filters expect {f_in}"
        )));
    }
    ConvGeom::new(len, in_ch, out_ch, kernel, stride, padding)
}

/// 1D convolution of a `length×in_ch` input with `out_ch×K×in_ch` filters.
pub fn conv1d<T: Scalar>(
    input: &Tensor<T>,
    filters: &Tensor<T>,
    stride: usize,
    padding: Padding,
) -> Result<Tensor<T>> {
    let g = conv_geom_for(input, filters, stride, padding)?;
    let ft = transpose_filters(filters.data(), &g);
    let mut out = Tensor::zeros(&[g.out_len, g.out_ch]);
    conv1d_raw(input.data(), &ft, &g, out.data_mut());
    Ok(out)
}

/// Returns `(grad_input, grad_filters)`.
pub fn conv1d_backward<T: Scalar>(
    input: &Tensor<T>,
    filters: &Tensor<T>,
    stride: usize,
    padding: Padding,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let g = conv_geom_for(input, filters, stride, padding)?;
    if grad_out.shape() != [g.out_len, g.out_ch] {
        return Err(Error::shape("conv1d grad_out shape"));
    }
    let mut gi = Tensor::zeros(input.shape());
    let mut gf = Tensor::zeros(filters.shape());
    conv1d_backward_raw(
        input.data(),
        filters.data(),
        &g,
        grad_out.data(),
        Some(gi.data_mut()),
        gf.data_mut(),
    );
    Ok((gi, gf))
}

/// Max over rows for each column of a `len×ch` slice; ties go to the lowest row.
pub fn max_pool_raw<T: Scalar>(input: &[T], len: usize, ch: usize, out: &mut [T], argmax: &mut [usize]) {
    out.copy_from_slice(&input[..ch]);
    argmax.iter_mut().for_each(|a| *a = 0);
    for r in 1..len {
        let row = &input[r * ch..(r + 1) * ch];
        for c in 0..ch {
            if row[c] > out[c] {
                out[c] = row[c];
                argmax[c] = r;
            }
        }
    }
}

/// Global max pool over the length axis. Returns the pooled vector and the winning rows.
pub fn global_max_pool<T: Scalar>(input: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    if input.rank() != 2 {
        return Err(Error::shape("global_max_pool expects length×ch"));
    }
    let (len, ch) = (input.shape()[0], input.shape()[1]);
    if len == 0 {
        return Err(Error::Empty("global_max_pool over zero-length input".into()));
    }
    let mut out = Tensor::zeros(&[ch]);
    let mut arg = vec![0; ch];
    max_pool_raw(input.data(), len, ch, out.data_mut(), &mut arg);
    Ok((out, arg))
}

pub fn global_max_pool_backward<T: Scalar>(
    len: usize,
    argmax: &[usize],
    grad_out: &Tensor<T>,
) -> Tensor<T> {
    let ch = argmax.len();
    let mut g = Tensor::zeros(&[len, ch]);
    for (c, &r) in argmax.iter().enumerate() {
        g.data_mut()[r * ch + c] = grad_out.data()[c];
    }
    g
}

/// In-place numerically stable softmax of one row.
pub fn softmax_inplace<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum = sum + *v;
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
}

pub fn softmax_rows<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let mut out = x.clone();
    let c = out.cols();
    if c > 0 {
        for row in out.data_mut().chunks_mut(c) {
            softmax_inplace(row);
        }
    }
    out
}

/// Categorical cross-entropy of `logits` against class `target`.
/// Returns the loss and its gradient w.r.t. the logits.
pub fn softmax_cross_entropy<T: Scalar>(logits: &[T], target: usize) -> Result<(T, Vec<T>)> {
    if target >= logits.len() {
        return Err(Error::OutOfRange(format!(
            "target class {target} with {} logits",
            logits.len()
        )));
    }
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let sum: T = logits.iter().map(|&v| (v - max).exp()).sum();
    let log_z = max + sum.ln();
    let loss = log_z - logits[target];
    let mut grad: Vec<T> = logits.iter().map(|&v| (v - log_z).exp()).collect();
    grad[target] = grad[target] - T::one();
    if !loss.is_finite() {
        return Err(Error::NonFinite("cross-entropy loss".into()));
    }
    Ok((loss.max(T::zero()), grad))
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// GELU, tanh approximation.
pub fn gelu<T: Scalar>(x: T) -> T {
    let c = T::of(GELU_C);
    let a = T::of(GELU_A);
    let half = T::of(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::of(GELU_C);
    let a = T::of(GELU_A);
    let half = T::of(0.5);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::of(3.0) * a * x * x)
}

/// Inverted-dropout multipliers: each entry is `0` with probability `p`, else `1/(1-p)`.
pub fn dropout_mask<T: Scalar, R: Rng + ?Sized>(len: usize, p: f64, rng: &mut R) -> Result<Vec<T>> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::invalid(format!("dropout rate {p} outside [0,1)")));
    }
    if p == 0.0 {
        return Ok(vec![T::one(); len]);
    }
    let keep = T::of(1.0 / (1.0 - p));
    Ok((0..len)
        .map(|_| if rng.gen::<f64>() < p { T::zero() } else { keep })
        .collect())
}

//! Parameterised layers: dense, embedding, layer norm and batch norm.
//!
//! Every layer works on a batch of rows (`rows×features`) and accumulates
//! parameter gradients into its [`Param`]s during `backward`.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::ops::{matmul_a_bt_into, matmul_at_b_into, matmul_into};
use super::tensor::{Param, Scalar, Tensor};
use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-6;
pub const BATCH_NORM_EPS: f64 = 1e-5;
pub const BATCH_NORM_MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Normal sample rejected outside two standard deviations.
pub fn truncated_normal<T: Scalar, R: Rng + ?Sized>(rng: &mut R, std: f64) -> T {
    loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            return T::of(z * std);
        }
    }
}

/// Fully connected layer `y = x·W + b` with `W: in×out`.
#[derive(Debug, Clone)]
pub struct Dense<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
}

impl<T: Scalar> Dense<T> {
    pub fn new<R: Rng + ?Sized>(name: &str, d_in: usize, d_out: usize, std: f64, rng: &mut R) -> Self {
        let w = (0..d_in * d_out).map(|_| truncated_normal(rng, std)).collect();
        Self {
            weight: Param::new(format!("{name}.weight"), Tensor::from_vec(&[d_in, d_out], w).unwrap()),
            bias: Param::new(format!("{name}.bias"), Tensor::zeros(&[d_out])),
        }
    }

    pub fn d_in(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn d_out(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        if x.cols() != self.d_in() {
            return Err(Error::shape(format!(
                "{}: input width {} != {}",
                self.weight.name,
                x.cols(),
                self.d_in()
            )));
        }
        let rows = x.rows();
        let n = self.d_out();
        let mut out = Tensor::zeros(&[rows, n]);
        for r in 0..rows {
            out.row_mut(r).copy_from_slice(self.bias.value.data());
        }
        matmul_into(x.data(), self.weight.value.data(), rows, self.d_in(), n, out.data_mut());
        Ok(out)
    }

    /// Accumulates parameter grads and returns the input gradient.
    pub fn backward(&mut self, x: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
        let (rows, k, n) = (x.rows(), self.d_in(), self.d_out());
        matmul_at_b_into(x.data(), grad_out.data(), rows, k, n, self.weight.grad.data_mut());
        let gb = self.bias.grad.data_mut();
        for r in 0..rows {
            for (g, &v) in gb.iter_mut().zip(grad_out.row(r)) {
                *g = *g + v;
            }
        }
        let mut gx = Tensor::zeros(&[rows, k]);
        matmul_a_bt_into(grad_out.data(), self.weight.value.data(), rows, k, n, gx.data_mut());
        gx
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        vec![&self.weight, &self.bias]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// Lookup table; row `i` is the vector for index `i`.
#[derive(Debug, Clone)]
pub struct Embedding<T> {
    pub table: Param<T>,
    /// Row kept at zero and excluded from updates.
    pub frozen_row: Option<usize>,
}

impl<T: Scalar> Embedding<T> {
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        rows: usize,
        dim: usize,
        std: f64,
        frozen_row: Option<usize>,
        rng: &mut R,
    ) -> Self {
        let mut data: Vec<T> = (0..rows * dim).map(|_| truncated_normal(rng, std)).collect();
        if let Some(f) = frozen_row {
            data[f * dim..(f + 1) * dim].iter_mut().for_each(|v| *v = T::zero());
        }
        Self {
            table: Param::new(format!("{name}.table"), Tensor::from_vec(&[rows, dim], data).unwrap()),
            frozen_row,
        }
    }

    pub fn dim(&self) -> usize {
        self.table.shape()[1]
    }

    pub fn vocab(&self) -> usize {
        self.table.shape()[0]
    }

    pub fn forward(&self, ids: &[u32]) -> Result<Tensor<T>> {
        let d = self.dim();
        let mut out = Tensor::zeros(&[ids.len(), d]);
        for (r, &id) in ids.iter().enumerate() {
            let id = id as usize;
            if id >= self.vocab() {
                return Err(Error::OutOfRange(format!(
                    "{}: index {id} >= {}",
                    self.table.name,
                    self.vocab()
                )));
            }
            out.row_mut(r).copy_from_slice(self.table.value.row(id));
        }
        Ok(out)
    }

    pub fn backward(&mut self, ids: &[u32], grad_out: &Tensor<T>) {
        let d = self.dim();
        let g = self.table.grad.data_mut();
        for (r, &id) in ids.iter().enumerate() {
            let id = id as usize;
            if Some(id) == self.frozen_row {
                continue;
            }
            for (a, &b) in g[id * d..(id + 1) * d].iter_mut().zip(grad_out.row(r)) {
                *a = *a + b;
            }
        }
    }
}

/// Normalise one vector to zero mean and unit variance; returns `1/std`.
fn normalize_row<T: Scalar>(x: &[T], out: &mut [T], eps: T) -> T {
    let n = T::of(x.len() as f64);
    let mean = x.iter().copied().sum::<T>() / n;
    let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
    let inv = T::one() / (var + eps).sqrt();
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - mean) * inv;
    }
    inv
}

/// Layer normalisation of a single `d`-vector.
pub fn layer_norm<T: Scalar>(x: &[T], scale: &[T], shift: &[T]) -> Result<Vec<T>> {
    if x.len() < 2 {
        return Err(Error::invalid("layer norm needs at least 2 features"));
    }
    if scale.len() != x.len() || shift.len() != x.len() {
        return Err(Error::shape("layer norm scale/shift width"));
    }
    let mut out = vec![T::zero(); x.len()];
    normalize_row(x, &mut out, T::of(LAYER_NORM_EPS));
    for i in 0..x.len() {
        out[i] = out[i] * scale[i] + shift[i];
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct LayerNorm<T> {
    pub scale: Param<T>,
    pub shift: Param<T>,
}

#[derive(Debug, Clone)]
pub struct LayerNormCache<T> {
    xhat: Tensor<T>,
    inv_std: Vec<T>,
}

impl<T: Scalar> LayerNorm<T> {
    pub fn new(name: &str, d: usize) -> Self {
        Self {
            scale: Param::new(format!("{name}.scale"), Tensor::full(&[d], T::one())),
            shift: Param::new(format!("{name}.shift"), Tensor::zeros(&[d])),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, LayerNormCache<T>)> {
        let d = self.scale.value.len();
        if d < 2 {
            return Err(Error::invalid("layer norm needs at least 2 features"));
        }
        if x.cols() != d {
            return Err(Error::shape(format!("layer norm width {} != {d}", x.cols())));
        }
        let rows = x.rows();
        let mut xhat = Tensor::zeros(x.shape());
        let mut inv_std = Vec::with_capacity(rows);
        let eps = T::of(LAYER_NORM_EPS);
        for r in 0..rows {
            inv_std.push(normalize_row(x.row(r), xhat.row_mut(r), eps));
        }
        let mut out = xhat.clone();
        let (g, b) = (self.scale.value.data(), self.shift.value.data());
        for r in 0..rows {
            for (i, v) in out.row_mut(r).iter_mut().enumerate() {
                *v = *v * g[i] + b[i];
            }
        }
        Ok((out, LayerNormCache { xhat, inv_std }))
    }

    pub fn backward(&mut self, cache: &LayerNormCache<T>, grad_out: &Tensor<T>) -> Tensor<T> {
        let d = self.scale.value.len();
        let rows = grad_out.rows();
        let dn = T::of(d as f64);
        let mut gx = Tensor::zeros(grad_out.shape());
        let g = self.scale.value.data().to_vec();
        for r in 0..rows {
            let go = grad_out.row(r);
            let xh = cache.xhat.row(r);
            {
                let gs = self.scale.grad.data_mut();
                for i in 0..d {
                    gs[i] = gs[i] + go[i] * xh[i];
                }
            }
            {
                let gb = self.shift.grad.data_mut();
                for i in 0..d {
                    gb[i] = gb[i] + go[i];
                }
            }
            let dxhat: Vec<T> = (0..d).map(|i| go[i] * g[i]).collect();
            let sum_d: T = dxhat.iter().copied().sum();
            let sum_dx: T = dxhat.iter().zip(xh).map(|(&a, &b)| a * b).sum();
            let inv = cache.inv_std[r];
            for (i, v) in gx.row_mut(r).iter_mut().enumerate() {
                *v = inv / dn * (dn * dxhat[i] - sum_d - xh[i] * sum_dx);
            }
        }
        gx
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        vec![&self.scale, &self.shift]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.scale, &mut self.shift]
    }
}

/// Per-channel batch normalisation over all rows of a `samples×ch` input.
#[derive(Debug, Clone)]
pub struct BatchNorm<T> {
    pub scale: Param<T>,
    pub shift: Param<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct BatchNormCache<T> {
    mode: Mode,
    xhat: Tensor<T>,
    inv_std: Vec<T>,
}

impl<T: Scalar> BatchNorm<T> {
    pub fn new(name: &str, ch: usize) -> Self {
        Self {
            scale: Param::new(format!("{name}.scale"), Tensor::full(&[ch], T::one())),
            shift: Param::new(format!("{name}.shift"), Tensor::zeros(&[ch])),
            running_mean: Tensor::zeros(&[ch]),
            running_var: Tensor::full(&[ch], T::one()),
        }
    }

    pub fn channels(&self) -> usize {
        self.scale.value.len()
    }

    /// Normalises `x` (`samples×ch`). Train mode uses batch statistics and updates the
    /// running estimates; eval mode uses the running estimates.
    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<(Tensor<T>, BatchNormCache<T>)> {
        let ch = self.channels();
        if x.cols() != ch {
            return Err(Error::shape(format!("batch norm width {} != {ch}", x.cols())));
        }
        let n = x.rows();
        let eps = T::of(BATCH_NORM_EPS);
        let (mean, inv_std) = match mode {
            Mode::Train => {
                if n < 2 {
                    return Err(Error::invalid(
                        "batch norm in train mode needs at least 2 samples per channel",
                    ));
                }
                let nf = T::of(n as f64);
                let mut mean = vec![T::zero(); ch];
                for r in 0..n {
                    for (m, &v) in mean.iter_mut().zip(x.row(r)) {
                        *m = *m + v;
                    }
                }
                mean.iter_mut().for_each(|m| *m = *m / nf);
                let mut var = vec![T::zero(); ch];
                for r in 0..n {
                    for ((s, &v), &m) in var.iter_mut().zip(x.row(r)).zip(&mean) {
                        *s = *s + (v - m) * (v - m);
                    }
                }
                var.iter_mut().for_each(|s| *s = *s / nf);
                let mom = T::of(BATCH_NORM_MOMENTUM);
                let unbias = nf / (nf - T::one());
                for c in 0..ch {
                    let rm = &mut self.running_mean.data_mut()[c];
                    *rm = mom * *rm + (T::one() - mom) * mean[c];
                    let rv = &mut self.running_var.data_mut()[c];
                    *rv = mom * *rv + (T::one() - mom) * var[c] * unbias;
                }
                let inv: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
                (mean, inv)
            }
            Mode::Eval => (
                self.running_mean.data().to_vec(),
                self.running_var
                    .data()
                    .iter()
                    .map(|&v| T::one() / (v + eps).sqrt())
                    .collect(),
            ),
        };
        let mut xhat = Tensor::zeros(x.shape());
        let mut out = Tensor::zeros(x.shape());
        let (g, b) = (self.scale.value.data(), self.shift.value.data());
        for r in 0..n {
            let xr = x.row(r);
            let xh = xhat.row_mut(r);
            for c in 0..ch {
                xh[c] = (xr[c] - mean[c]) * inv_std[c];
            }
            let orow = out.row_mut(r);
            for c in 0..ch {
                orow[c] = xhat.row(r)[c] * g[c] + b[c];
            }
        }
        Ok((out, BatchNormCache { mode, xhat, inv_std }))
    }

    pub fn backward(&mut self, cache: &BatchNormCache<T>, grad_out: &Tensor<T>) -> Tensor<T> {
        let ch = self.channels();
        let n = grad_out.rows();
        let mut sum_g = vec![T::zero(); ch];
        let mut sum_gx = vec![T::zero(); ch];
        for r in 0..n {
            let go = grad_out.row(r);
            let xh = cache.xhat.row(r);
            for c in 0..ch {
                sum_g[c] = sum_g[c] + go[c];
                sum_gx[c] = sum_gx[c] + go[c] * xh[c];
            }
        }
        {
            let gs = self.scale.grad.data_mut();
            for c in 0..ch {
                gs[c] = gs[c] + sum_gx[c];
            }
        }
        {
            let gb = self.shift.grad.data_mut();
            for c in 0..ch {
                gb[c] = gb[c] + sum_g[c];
            }
        }
        let g = self.scale.value.data();
        let mut gx = Tensor::zeros(grad_out.shape());
        match cache.mode {
            Mode::Eval => {
                for r in 0..n {
                    let go = grad_out.row(r);
                    let out = gx.row_mut(r);
                    for c in 0..ch {
                        out[c] = go[c] * g[c] * cache.inv_std[c];
                    }
                }
            }
            Mode::Train => {
                let nf = T::of(n as f64);
                for r in 0..n {
                    let go = grad_out.row(r);
                    let xh = cache.xhat.row(r);
                    let out = gx.row_mut(r);
                    for c in 0..ch {
                        // dxhat = go·γ; sums of dxhat scale the same way
                        out[c] = g[c] * cache.inv_std[c] / nf
                            * (nf * go[c] - sum_g[c] - xh[c] * sum_gx[c]);
                    }
                }
            }
        }
        gx
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        vec![&self.scale, &self.shift]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.scale, &mut self.shift]
    }
}

/// Batch norm over a `batch×length×ch` tensor; flattens the first two axes.
pub fn batchnorm1d<T: Scalar>(
    input: &Tensor<T>,
    state: &mut BatchNorm<T>,
    mode: Mode,
) -> Result<Tensor<T>> {
    if input.rank() != 3 {
        return Err(Error::shape("batchnorm1d expects batch×length×ch"));
    }
    let shape = input.shape().to_vec();
    let flat = input.clone().reshape(&[shape[0] * shape[1], shape[2]])?;
    let (out, _) = state.forward(&flat, mode)?;
    out.reshape(&shape)
}

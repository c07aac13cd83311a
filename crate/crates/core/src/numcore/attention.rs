use rand::Rng;

use super::layers::Dense;
use super::ops::softmax_inplace;
use super::tensor::{Param, Scalar, Tensor};
use crate::error::{Error, Result};

/// Multi-head scaled dot-product self-attention.
///
/// Inputs are ragged batches: rows of several sequences stacked into one
/// `rows×d` tensor, with `segments` giving `(start, len)` of each sequence.
/// Attention never crosses a segment boundary, which is how padding is
/// excluded.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention<T> {
    pub heads: usize,
    pub query: Dense<T>,
    pub key: Dense<T>,
    pub value: Dense<T>,
    pub output: Dense<T>,
}

#[derive(Debug, Clone)]
pub struct AttentionCache<T> {
    x: Tensor<T>,
    q: Tensor<T>,
    k: Tensor<T>,
    v: Tensor<T>,
    ctx: Tensor<T>,
    segments: Vec<(usize, usize)>,
    /// Per segment, per head: `len×len` attention weights.
    probs: Vec<Vec<Vec<T>>>,
}

impl<T> AttentionCache<T> {
    /// Attention weights of head `h` in segment `s` (`len×len`, row = query).
    pub fn weights(&self, s: usize, h: usize) -> &[T] {
        &self.probs[s][h]
    }
}

impl<T: Scalar> MultiHeadAttention<T> {
    pub fn new<R: Rng + ?Sized>(name: &str, d: usize, heads: usize, std: f64, rng: &mut R) -> Result<Self> {
        if heads == 0 || d % heads != 0 {
            return Err(Error::invalid(format!(
                "model width {d} not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            heads,
            query: Dense::new(&format!("{name}.query"), d, d, std, rng),
            key: Dense::new(&format!("{name}.key"), d, d, std, rng),
            value: Dense::new(&format!("{name}.value"), d, d, std, rng),
            output: Dense::new(&format!("{name}.output"), d, d, std, rng),
        })
    }

    pub fn d_model(&self) -> usize {
        self.query.d_in()
    }

    /// Single sequence convenience wrapper.
    pub fn forward_one(&self, x: &Tensor<T>) -> Result<(Tensor<T>, AttentionCache<T>)> {
        self.forward(x, &[(0, x.rows())])
    }

    pub fn forward(
        &self,
        x: &Tensor<T>,
        segments: &[(usize, usize)],
    ) -> Result<(Tensor<T>, AttentionCache<T>)> {
        let d = self.d_model();
        if d % self.heads != 0 {
            return Err(Error::invalid("model width not divisible by heads"));
        }
        if x.cols() != d {
            return Err(Error::shape(format!("attention width {} != {d}", x.cols())));
        }
        if let Some(&(s, l)) = segments.iter().find(|&&(s, l)| s + l > x.rows()) {
            return Err(Error::shape(format!("segment ({s},{l}) beyond {} rows", x.rows())));
        }
        let dh = d / self.heads;
        let scale = T::one() / T::of(dh as f64).sqrt();
        let q = self.query.forward(x)?;
        let k = self.key.forward(x)?;
        let v = self.value.forward(x)?;
        let mut ctx = Tensor::zeros(&[x.rows(), d]);
        let mut probs = Vec::with_capacity(segments.len());
        for &(start, len) in segments {
            let mut seg_probs = Vec::with_capacity(self.heads);
            for h in 0..self.heads {
                let off = h * dh;
                let mut p = vec![T::zero(); len * len];
                for i in 0..len {
                    let qi = &q.row(start + i)[off..off + dh];
                    let prow = &mut p[i * len..(i + 1) * len];
                    for (j, pj) in prow.iter_mut().enumerate() {
                        let kj = &k.row(start + j)[off..off + dh];
                        *pj = qi.iter().zip(kj).map(|(&a, &b)| a * b).sum::<T>() * scale;
                    }
                    softmax_inplace(prow);
                    let crow = &mut ctx.row_mut(start + i)[off..off + dh];
                    for (j, &pj) in prow.iter().enumerate() {
                        let vj = &v.row(start + j)[off..off + dh];
                        for (c, &vv) in crow.iter_mut().zip(vj) {
                            *c = *c + pj * vv;
                        }
                    }
                }
                seg_probs.push(p);
            }
            probs.push(seg_probs);
        }
        let out = self.output.forward(&ctx)?;
        Ok((
            out,
            AttentionCache {
                x: x.clone(),
                q,
                k,
                v,
                ctx,
                segments: segments.to_vec(),
                probs,
            },
        ))
    }

    pub fn backward(&mut self, cache: &AttentionCache<T>, grad_out: &Tensor<T>) -> Tensor<T> {
        let d = self.d_model();
        let dh = d / self.heads;
        let scale = T::one() / T::of(dh as f64).sqrt();
        let d_ctx = self.output.backward(&cache.ctx, grad_out);
        let rows = cache.x.rows();
        let mut dq = Tensor::zeros(&[rows, d]);
        let mut dk = Tensor::zeros(&[rows, d]);
        let mut dv = Tensor::zeros(&[rows, d]);
        for (s, &(start, len)) in cache.segments.iter().enumerate() {
            for h in 0..self.heads {
                let off = h * dh;
                let p = &cache.probs[s][h];
                let mut ds = vec![T::zero(); len];
                for i in 0..len {
                    let dci = &d_ctx.row(start + i)[off..off + dh];
                    let prow = &p[i * len..(i + 1) * len];
                    // dP_ij = dctx_i · v_j ; dV_j += P_ij dctx_i
                    for j in 0..len {
                        let vj = &cache.v.row(start + j)[off..off + dh];
                        ds[j] = dci.iter().zip(vj).map(|(&a, &b)| a * b).sum();
                        let pij = prow[j];
                        let dvj = &mut dv.row_mut(start + j)[off..off + dh];
                        for (a, &b) in dvj.iter_mut().zip(dci) {
                            *a = *a + pij * b;
                        }
                    }
                    let dot: T = ds.iter().zip(prow).map(|(&a, &b)| a * b).sum();
                    for j in 0..len {
                        let dsij = prow[j] * (ds[j] - dot) * scale;
                        if dsij == T::zero() {
                            continue;
                        }
                        let kj = &cache.k.row(start + j)[off..off + dh];
                        let dqi = &mut dq.row_mut(start + i)[off..off + dh];
                        for (a, &b) in dqi.iter_mut().zip(kj) {
                            *a = *a + dsij * b;
                        }
                        let qi = &cache.q.row(start + i)[off..off + dh];
                        let dkj = &mut dk.row_mut(start + j)[off..off + dh];
                        for (a, &b) in dkj.iter_mut().zip(qi) {
                            *a = *a + dsij * b;
                        }
                    }
                }
            }
        }
        let mut dx = self.query.backward(&cache.x, &dq);
        dx.add_assign(&self.key.backward(&cache.x, &dk)).unwrap();
        dx.add_assign(&self.value.backward(&cache.x, &dv)).unwrap();
        dx
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        let mut v = self.query.params();
        v.extend(self.key.params());
        v.extend(self.value.params());
        v.extend(self.output.params());
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut v = self.query.params_mut();
        v.extend(self.key.params_mut());
        v.extend(self.value.params_mut());
        v.extend(self.output.params_mut());
        v
    }
}

/// `multi_head_attention(x, heads, params)` over one sequence.
pub fn multi_head_attention<T: Scalar>(
    x: &Tensor<T>,
    heads: usize,
    params: &MultiHeadAttention<T>,
) -> Result<Tensor<T>> {
    if heads != params.heads || x.cols() % heads != 0 {
        return Err(Error::invalid(format!(
            "width {} not divisible by {heads} heads",
            x.cols()
        )));
    }
    Ok(params.forward_one(x)?.0)
}

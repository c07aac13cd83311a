//! Central finite-difference gradient checking (64-bit only).

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::tensor::Param;
use crate::error::{Error, Result};

/// Gradients smaller than this are compared in absolute rather than relative terms.
pub const GRAD_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_FLOOR)
}

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub checked: usize,
}

impl GradCheckReport {
    fn record(&mut self, name: &str, idx: usize, analytic: f64, numeric: f64) {
        let e = relative_error(analytic, numeric);
        self.checked += 1;
        if e > self.max_rel_err || self.worst.is_none() {
            self.max_rel_err = e;
            self.worst = Some((name.to_string(), idx));
            self.analytic_at_worst = analytic;
            self.numeric_at_worst = numeric;
        }
    }

    pub fn merge(&mut self, other: GradCheckReport) {
        self.checked += other.checked;
        if other.max_rel_err > self.max_rel_err || self.worst.is_none() {
            self.max_rel_err = other.max_rel_err;
            self.worst = other.worst;
            self.analytic_at_worst = other.analytic_at_worst;
            self.numeric_at_worst = other.numeric_at_worst;
        }
    }
}

/// Coordinate selection for large tensors.
#[derive(Debug, Clone, Copy)]
pub struct Sampling {
    /// Tensors with more entries than this are sub-sampled.
    pub max_per_tensor: usize,
    pub seed: u64,
}

impl Default for Sampling {
    fn default() -> Self {
        Self {
            max_per_tensor: 64,
            seed: 0,
        }
    }
}

impl Sampling {
    pub fn exhaustive() -> Self {
        Self {
            max_per_tensor: usize::MAX,
            seed: 0,
        }
    }

    fn coords(&self, len: usize, salt: usize) -> Vec<usize> {
        if len <= self.max_per_tensor {
            return (0..len).collect();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ (salt as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let mut v = sample(&mut rng, len, self.max_per_tensor).into_vec();
        v.sort_unstable();
        v
    }
}

fn check_eps(eps: f64) -> Result<()> {
    if !(1e-6..=1e-3).contains(&eps) {
        return Err(Error::invalid(format!("finite-difference step {eps} outside [1e-6, 1e-3]")));
    }
    Ok(())
}

fn finite(v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite("loss during gradient check".into()))
    }
}

/// Something with `f64` parameters and a scalar loss.
pub trait GradCheckable {
    fn params_mut(&mut self) -> Vec<&mut Param<f64>>;
    /// Forward pass only.
    fn loss(&mut self) -> Result<f64>;
    /// Zero grads, run forward and backward, leave analytic grads in the params.
    fn loss_and_grads(&mut self) -> Result<f64>;
}

/// Compares analytic parameter gradients of `model` to central differences.
pub fn grad_check<M: GradCheckable>(model: &mut M, eps: f64, sampling: Sampling) -> Result<GradCheckReport> {
    check_eps(eps)?;
    finite(model.loss_and_grads()?)?;
    let analytic: Vec<(String, Vec<f64>)> = model
        .params_mut()
        .into_iter()
        .map(|p| (p.name.clone(), p.grad.data().to_vec()))
        .collect();
    let mut report = GradCheckReport::default();
    for (pi, (name, grads)) in analytic.iter().enumerate() {
        for ci in sampling.coords(grads.len(), pi) {
            let orig = model.params_mut()[pi].value.data()[ci];
            model.params_mut()[pi].value.data_mut()[ci] = orig + eps;
            let plus = finite(model.loss()?);
            model.params_mut()[pi].value.data_mut()[ci] = orig - eps;
            let minus = finite(model.loss()?);
            model.params_mut()[pi].value.data_mut()[ci] = orig;
            let numeric = (plus? - minus?) / (2.0 * eps);
            report.record(name, ci, grads[ci], numeric);
        }
    }
    Ok(report)
}

/// Checks `analytic` against central differences of `f` at `x`.
pub fn grad_check_fn<F>(mut f: F, x: &[f64], analytic: &[f64], eps: f64) -> Result<GradCheckReport>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    check_eps(eps)?;
    if x.len() != analytic.len() {
        return Err(Error::shape("gradient length differs from point length"));
    }
    finite(f(x)?)?;
    let mut report = GradCheckReport::default();
    let mut p = x.to_vec();
    for i in 0..x.len() {
        p[i] = x[i] + eps;
        let plus = finite(f(&p)?)?;
        p[i] = x[i] - eps;
        let minus = finite(f(&p)?)?;
        p[i] = x[i];
        report.record("x", i, analytic[i], (plus - minus) / (2.0 * eps));
    }
    Ok(report)
}

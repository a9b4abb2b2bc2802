//! Independent checks: central finite differences, exact expectation over
//! every gate mask, and binomial tests for the sampler.

use crate::error::{Error, Result};
use crate::gates::{clip, GateMask};
use crate::network::Network;
use crate::tensor::{softmax_cross_entropy, Tensor};

/// Largest gate count [`enumerate_expected_loss`] accepts.
pub const MAX_ENUMERATED_GATES: usize = 12;

/// Central differences `(f(x + h·e_i) − f(x − h·e_i)) / 2h` per coordinate.
pub fn finite_diff<F>(mut loss_fn: F, params: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::Contract(format!("step must be positive and finite, got {h}")));
    }
    let mut x = params.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + h;
        let up = loss_fn(&x)?;
        x[i] = orig - h;
        let down = loss_fn(&x)?;
        x[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::Numeric(format!(
                "loss is not finite around coordinate {i} ({up}, {down})"
            )));
        }
        grad.push((up - down) / (2.0 * h));
    }
    Ok(grad)
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-12)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FdReport {
    pub max_rel_error: f64,
    /// Coordinate where the worst error occurred.
    pub worst_index: usize,
    pub step: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl FdReport {
    pub fn compare(analytic: &[f64], numeric: &[f64], step: f64, tolerance: f64) -> Result<Self> {
        if analytic.len() != numeric.len() {
            return Err(Error::Dimension(format!(
                "{} analytic vs {} numeric gradient entries",
                analytic.len(),
                numeric.len()
            )));
        }
        let (worst_index, max_rel_error) = analytic
            .iter()
            .zip(numeric)
            .map(|(&a, &n)| relative_error(a, n))
            .enumerate()
            .fold((0, 0.0), |best, (i, e)| if e > best.1 { (i, e) } else { best });
        Ok(Self {
            max_rel_error,
            worst_index,
            step,
            tolerance,
            pass: max_rel_error <= tolerance,
        })
    }
}

/// Every mask over gates with retain probabilities `k`, paired with its
/// probability. Bit `i` of the mask index is gate `i`.
pub fn mask_distribution(k: &[f64]) -> Result<Vec<(Vec<bool>, f64)>> {
    if k.len() > MAX_ENUMERATED_GATES {
        return Err(Error::Contract(format!(
            "{} gates exceed the enumeration limit of {MAX_ENUMERATED_GATES}",
            k.len()
        )));
    }
    let p: Vec<f64> = k.iter().map(|&v| clip(v)).collect::<Result<_>>()?;
    Ok((0..1usize << k.len())
        .map(|m| {
            let theta: Vec<bool> = (0..k.len()).map(|i| m >> i & 1 == 1).collect();
            let prob = theta
                .iter()
                .zip(&p)
                .map(|(&t, &pi)| if t { pi } else { 1.0 - pi })
                .product();
            (theta, prob)
        })
        .collect())
}

/// `Σ_masks f(mask) · P(mask)`, skipping masks of probability zero.
pub fn enumerate_expectation<F>(k: &[f64], mut f: F) -> Result<f64>
where
    F: FnMut(&[bool]) -> Result<f64>,
{
    let mut total = 0.0;
    for (theta, prob) in mask_distribution(k)? {
        if prob > 0.0 {
            total += prob * f(&theta)?;
        }
    }
    Ok(total)
}

/// Exact expected task loss (mean cross-entropy over the batch) under the
/// gate distribution of `net`, one shared mask per batch.
pub fn enumerate_expected_loss(net: &Network, batch: &Tensor, labels: &[usize]) -> Result<f64> {
    let sites = net.gate_sites();
    let sizes: Vec<usize> = sites.iter().map(|g| g.len()).collect();
    let k: Vec<f64> = sites.iter().flat_map(|g| g.k.iter().copied()).collect();
    enumerate_expectation(&k, |theta| {
        let mut masks = Vec::with_capacity(sizes.len());
        let mut at = 0;
        for &n in &sizes {
            masks.push(GateMask(theta[at..at + n].to_vec()));
            at += n;
        }
        let (logits, _) = net.forward_with_masks(batch, &masks)?;
        Ok(softmax_cross_entropy(&logits, labels)?.0)
    })
}

/// `sigmas·√(p(1−p)/n)`.
pub fn binomial_threshold(p: f64, n: usize, sigmas: f64) -> f64 {
    sigmas * (p * (1.0 - p) / n as f64).sqrt()
}

/// True iff the sample mean is within `sigmas` standard errors of `p`.
/// For `p ∈ {0, 1}` every sample must equal `p`.
pub fn binomial_check(samples: &[bool], p: f64, sigmas: f64) -> bool {
    assert!((0.0..=1.0).contains(&p), "p = {p} outside [0, 1]");
    if samples.is_empty() {
        return false;
    }
    if p == 0.0 {
        return samples.iter().all(|&s| !s);
    }
    if p == 1.0 {
        return samples.iter().all(|&s| s);
    }
    let mean = samples.iter().filter(|&&s| s).count() as f64 / samples.len() as f64;
    (mean - p).abs() <= binomial_threshold(p, samples.len(), sigmas)
}

//! Stochastic multiplicative gates.
//!
//! Each gated site owns a vector of retain probabilities `k`. In training the
//! site multiplies its activations by a binary mask `θ ~ bernoulli(clip(k))`;
//! at evaluation it multiplies by `clip(k)` instead (rescaling). Gradients with
//! respect to `k` use the straight-through rule `dθ/dk = 1`.

use std::io::{Read, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateGranularity {
    /// One gate per neuron of a dense layer.
    PerUnit,
    /// One gate per feature map, broadcast over its spatial extent.
    PerChannel,
    /// One gate per spatial position per channel.
    PerActivation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateMode {
    /// Sample a bernoulli mask.
    Train,
    /// Multiply by `clip(k)`; no sampling.
    Eval,
    /// Deterministic mask `θ = 1[k ≥ 0.5]`.
    Heaviside,
}

impl GateMode {
    pub fn uses_mask(self) -> bool {
        !matches!(self, GateMode::Eval)
    }
}

/// Squashes `x` into `[0, 1]`.
pub fn clip(x: f64) -> Result<f64> {
    if x.is_nan() {
        return Err(Error::Numeric("clip of NaN".into()));
    }
    Ok(x.clamp(0.0, 1.0))
}

#[inline]
fn clip_unchecked(x: f64) -> f64 {
    x.clamp(0.0, 1.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GateParams {
    pub site: String,
    pub granularity: GateGranularity,
    /// Per-example shape of the activation block being gated.
    block_shape: Vec<usize>,
    pub k: Vec<f64>,
}

fn gate_count(granularity: GateGranularity, block_shape: &[usize]) -> Result<usize> {
    match (granularity, block_shape) {
        (GateGranularity::PerUnit, [d]) => Ok(*d),
        (GateGranularity::PerUnit, _) => Err(Error::Dimension(format!(
            "per-unit gates need a flat block, got {block_shape:?}"
        ))),
        (GateGranularity::PerChannel, [c, _, _]) => Ok(*c),
        (GateGranularity::PerChannel, _) => Err(Error::Dimension(format!(
            "per-channel gates need a CxHxW block, got {block_shape:?}"
        ))),
        (GateGranularity::PerActivation, s) if !s.is_empty() => Ok(s.iter().product()),
        (GateGranularity::PerActivation, _) => {
            Err(Error::Dimension("per-activation gates need a non-empty block".into()))
        }
    }
}

impl GateParams {
    /// Gates for `block_shape`, all initialised to `init`.
    pub fn new(
        site: impl Into<String>,
        granularity: GateGranularity,
        block_shape: &[usize],
        init: f64,
    ) -> Result<Self> {
        let n = gate_count(granularity, block_shape)?;
        Self::with_values(site, granularity, block_shape, vec![init; n])
    }

    pub fn with_values(
        site: impl Into<String>,
        granularity: GateGranularity,
        block_shape: &[usize],
        k: Vec<f64>,
    ) -> Result<Self> {
        let n = gate_count(granularity, block_shape)?;
        if k.len() != n {
            return Err(Error::Dimension(format!(
                "{granularity:?} gates over {block_shape:?} need {n} values, got {}",
                k.len()
            )));
        }
        if let Some(bad) = k.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Numeric(format!("gate value {bad} outside [0, 1]")));
        }
        Ok(Self {
            site: site.into(),
            granularity,
            block_shape: block_shape.to_vec(),
            k,
        })
    }

    pub fn len(&self) -> usize {
        self.k.len()
    }

    pub fn is_empty(&self) -> bool {
        self.k.is_empty()
    }

    pub fn block_shape(&self) -> &[usize] {
        &self.block_shape
    }

    pub fn mean(&self) -> f64 {
        self.k.iter().sum::<f64>() / self.k.len() as f64
    }

    /// Number of block elements each gate governs.
    fn span(&self) -> usize {
        match self.granularity {
            GateGranularity::PerChannel => self.block_shape[1] * self.block_shape[2],
            _ => 1,
        }
    }

    /// Number of examples in `activations`, which must be the block itself or
    /// a batch of blocks.
    fn batch_of(&self, activations: &Tensor) -> Result<usize> {
        let shape = activations.shape();
        if shape == self.block_shape.as_slice() {
            Ok(1)
        } else if shape.len() == self.block_shape.len() + 1 && shape[1..] == self.block_shape[..] {
            Ok(shape[0])
        } else {
            Err(Error::Dimension(format!(
                "gate site {} expects blocks of {:?}, got activations {:?}",
                self.site, self.block_shape, shape
            )))
        }
    }

    /// Per-gate multiplier for the given mode.
    fn multipliers(&self, mask: Option<&GateMask>, mode: GateMode) -> Result<Vec<f64>> {
        match (mode, mask) {
            (GateMode::Eval, None) => Ok(self.k.iter().map(|&v| clip_unchecked(v)).collect()),
            (GateMode::Eval, Some(_)) => Err(Error::Contract(
                "eval mode rescales by k and takes no mask".into(),
            )),
            (_, Some(m)) if m.len() == self.k.len() => {
                Ok(m.0.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect())
            }
            (_, Some(m)) => Err(Error::Dimension(format!(
                "mask has {} entries, site {} has {} gates",
                m.len(),
                self.site,
                self.k.len()
            ))),
            (_, None) => Err(Error::Contract(format!(
                "{mode:?} mode needs a mask for site {}",
                self.site
            ))),
        }
    }
}

/// Sampled binary gate values, one per gate.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GateMask(pub Vec<bool>);

impl GateMask {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn ones(n: usize) -> Self {
        Self(vec![true; n])
    }
}

/// Draws a mask for `params`.
///
/// Train mode consumes exactly one uniform variate per gate, in gate order.
/// Heaviside thresholds at 0.5 (ties keep the gate). Eval returns `None`.
pub fn sample_mask<R: Rng + ?Sized>(
    params: &GateParams,
    mode: GateMode,
    rng: Option<&mut R>,
) -> Result<Option<GateMask>> {
    match mode {
        GateMode::Eval => Ok(None),
        GateMode::Heaviside => Ok(Some(GateMask(
            params.k.iter().map(|&k| k >= 0.5).collect(),
        ))),
        GateMode::Train => {
            let rng = rng.ok_or_else(|| {
                Error::Contract("train-mode sampling needs a random generator".into())
            })?;
            let mut theta = Vec::with_capacity(params.k.len());
            for &k in &params.k {
                let p = clip(k)?;
                let u: f64 = rng.random();
                theta.push(u < p);
            }
            Ok(Some(GateMask(theta)))
        }
    }
}

/// `a ⊙ θ` in Train/Heaviside mode, `a ⊙ clip(k)` in Eval mode.
pub fn apply_gate(
    activations: &Tensor,
    params: &GateParams,
    mask: Option<&GateMask>,
    mode: GateMode,
) -> Result<Tensor> {
    let batch = params.batch_of(activations)?;
    let mult = params.multipliers(mask, mode)?;
    let span = params.span();
    let block = activations.len() / batch;
    let mut out = activations.clone();
    for chunk in out.data_mut().chunks_exact_mut(block) {
        for (g, seg) in chunk.chunks_exact_mut(span).enumerate() {
            let m = mult[g];
            seg.iter_mut().for_each(|v| *v *= m);
        }
    }
    Ok(out)
}

/// Gradients of a gate site.
///
/// Returns `(upstream ⊙ multiplier, grad_k)` where `grad_k[i]` sums
/// `upstream ⊙ activations` over every position gate `i` governs. The `k`
/// gradient is the straight-through one and does not depend on the mode.
pub fn gate_backward(
    upstream: &Tensor,
    activations: &Tensor,
    mask: Option<&GateMask>,
    params: &GateParams,
    mode: GateMode,
) -> Result<(Tensor, Vec<f64>)> {
    if upstream.shape() != activations.shape() {
        return Err(Error::Dimension(format!(
            "gate upstream {:?} vs activations {:?}",
            upstream.shape(),
            activations.shape()
        )));
    }
    let grad_a = apply_gate(upstream, params, mask, mode)?;
    let grad_k = straight_through_grad(upstream, activations, params)?;
    Ok((grad_a, grad_k))
}

/// `Σ upstream ⊙ activations` per gate.
pub fn straight_through_grad(
    upstream: &Tensor,
    activations: &Tensor,
    params: &GateParams,
) -> Result<Vec<f64>> {
    let batch = params.batch_of(activations)?;
    let span = params.span();
    let block = activations.len() / batch;
    let mut grad_k = vec![0.0; params.len()];
    for (up, act) in upstream
        .data()
        .chunks_exact(block)
        .zip(activations.data().chunks_exact(block))
    {
        for (g, (u, a)) in up.chunks_exact(span).zip(act.chunks_exact(span)).enumerate() {
            grad_k[g] += u.iter().zip(a).map(|(x, y)| x * y).sum::<f64>();
        }
    }
    Ok(grad_k)
}

/// One row of a gate dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateRecord {
    pub layer_name: String,
    pub gate_index: usize,
    pub k: f64,
}

/// Writes `layer_name,gate_index,k` rows. Per-activation indices are row-major
/// over (channel, row, col).
pub fn write_gates_csv<W: Write>(writer: W, sites: &[&GateParams]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for site in sites {
        for (i, &k) in site.k.iter().enumerate() {
            w.serialize(GateRecord {
                layer_name: site.site.clone(),
                gate_index: i,
                k,
            })?;
        }
    }
    w.flush().map_err(|e| Error::io("<gates csv>", e))?;
    Ok(())
}

pub fn read_gates_csv<R: Read>(reader: R) -> Result<Vec<GateRecord>> {
    let mut r = csv::Reader::from_reader(reader);
    let mut rows = Vec::new();
    for rec in r.deserialize() {
        rows.push(rec?);
    }
    Ok(rows)
}

//! Declarative network specs, instantiation, and gated forward/backward passes.
//!
//! A network is a chain of `Conv5` blocks (5×5 valid conv → ReLU → 2×2 max
//! pool), `Dense` blocks (affine → ReLU) and one final `DenseOutput` (affine
//! logits). Gates sit after the nonlinearity (after pooling for conv blocks);
//! an optional per-activation gate can sit on the raw input.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gates::{
    apply_gate, gate_backward, sample_mask, GateGranularity, GateMask, GateMode, GateParams,
};
use crate::regularizers::Regularizer;
use crate::tensor::{
    conv2d_backward_batch, conv2d_forward_batch, matmul_a_bt_acc, matmul_acc, matmul_at_b_acc,
    maxpool2_backward_batch, maxpool2_forward_batch, softmax_cross_entropy, PoolIndices, Tensor,
};

pub const CONV_KERNEL: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Conv5,
    Dense,
    DenseOutput,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GateSpec {
    pub granularity: GateGranularity,
    pub init: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub width: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gate: Option<GateSpec>,
}

impl LayerSpec {
    pub fn conv5(width: usize) -> Self {
        Self {
            kind: LayerKind::Conv5,
            width,
            gate: None,
        }
    }

    pub fn dense(width: usize) -> Self {
        Self {
            kind: LayerKind::Dense,
            width,
            gate: None,
        }
    }

    pub fn output(classes: usize) -> Self {
        Self {
            kind: LayerKind::DenseOutput,
            width: classes,
            gate: None,
        }
    }

    pub fn gated(mut self, granularity: GateGranularity, init: f64) -> Self {
        self.gate = Some(GateSpec { granularity, init });
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum InputShape {
    Image {
        channels: usize,
        height: usize,
        width: usize,
    },
    Flat {
        flat: usize,
    },
}

impl InputShape {
    pub fn dims(&self) -> Vec<usize> {
        match *self {
            InputShape::Image {
                channels,
                height,
                width,
            } => vec![channels, height, width],
            InputShape::Flat { flat } => vec![flat],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub input: InputShape,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_gate: Option<GateSpec>,
    pub layers: Vec<LayerSpec>,
}

impl NetworkSpec {
    /// The 20-50-500-10 style LeNet on 1×28×28 inputs, ungated.
    pub fn lenet(conv1: usize, conv2: usize, fc: usize, classes: usize) -> Self {
        Self {
            input: InputShape::Image {
                channels: 1,
                height: 28,
                width: 28,
            },
            input_gate: None,
            layers: vec![
                LayerSpec::conv5(conv1),
                LayerSpec::conv5(conv2),
                LayerSpec::dense(fc),
                LayerSpec::output(classes),
            ],
        }
    }

    /// Flat-input MLP with the given hidden widths.
    pub fn mlp(input: usize, hidden: &[usize], classes: usize) -> Self {
        let mut layers: Vec<LayerSpec> = hidden.iter().map(|&w| LayerSpec::dense(w)).collect();
        layers.push(LayerSpec::output(classes));
        Self {
            input: InputShape::Flat { flat: input },
            input_gate: None,
            layers,
        }
    }

    /// Gates every hidden layer (per-unit for dense, `conv` granularity for conv).
    pub fn gate_hidden(mut self, conv: GateGranularity, init: f64) -> Self {
        for l in &mut self.layers {
            match l.kind {
                LayerKind::Conv5 => l.gate = Some(GateSpec { granularity: conv, init }),
                LayerKind::Dense => {
                    l.gate = Some(GateSpec {
                        granularity: GateGranularity::PerUnit,
                        init,
                    })
                }
                LayerKind::DenseOutput => {}
            }
        }
        self
    }

    /// Hidden widths, e.g. `[20, 50, 500]` for LeNet.
    pub fn hidden_widths(&self) -> Vec<usize> {
        self.layers
            .iter()
            .filter(|l| l.kind != LayerKind::DenseOutput)
            .map(|l| l.width)
            .collect()
    }

    /// `20-50-500-10` style architecture string.
    pub fn architecture(&self) -> String {
        self.layers
            .iter()
            .map(|l| l.width.to_string())
            .collect::<Vec<_>>()
            .join("-")
    }

    pub fn num_classes(&self) -> usize {
        self.layers.last().map_or(0, |l| l.width)
    }

    /// Validates the spec and works out every layer's shapes.
    pub fn plan(&self) -> Result<Vec<LayerPlan>> {
        let in_dims = self.input.dims();
        if in_dims.contains(&0) {
            return Err(spec_err("input", "input dimensions must be positive"));
        }
        if let Some(g) = &self.input_gate {
            if g.granularity != GateGranularity::PerActivation {
                return Err(spec_err("input", "input gate must be per_activation"));
            }
            check_init("input", g.init)?;
        }
        if self.layers.is_empty() {
            return Err(spec_err("output", "network has no layers"));
        }

        let mut plans = Vec::with_capacity(self.layers.len());
        let mut shape = in_dims;
        let (mut n_conv, mut n_dense) = (0, 0);
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            let name = match l.kind {
                LayerKind::Conv5 => {
                    n_conv += 1;
                    format!("conv{n_conv}")
                }
                LayerKind::Dense => {
                    n_dense += 1;
                    format!("fc{n_dense}")
                }
                LayerKind::DenseOutput => "output".to_string(),
            };
            if l.width == 0 {
                return Err(spec_err(&name, "width must be positive"));
            }
            if (l.kind == LayerKind::DenseOutput) != (i == last) {
                return Err(spec_err(
                    &name,
                    "exactly one dense_output layer is required, and it must come last",
                ));
            }
            if let Some(g) = &l.gate {
                check_init(&name, g.init)?;
                let ok = match l.kind {
                    LayerKind::Conv5 => matches!(
                        g.granularity,
                        GateGranularity::PerChannel | GateGranularity::PerActivation
                    ),
                    LayerKind::Dense => g.granularity == GateGranularity::PerUnit,
                    LayerKind::DenseOutput => false,
                };
                if !ok {
                    return Err(spec_err(
                        &name,
                        &format!("{:?} gate not allowed on a {:?} layer", g.granularity, l.kind),
                    ));
                }
            }
            let plan = match l.kind {
                LayerKind::Conv5 => {
                    let [c, h, w] = match shape[..] {
                        [c, h, w] => [c, h, w],
                        _ => return Err(spec_err(&name, "conv layer needs an image-shaped input")),
                    };
                    if h < CONV_KERNEL || w < CONV_KERNEL {
                        return Err(spec_err(
                            &name,
                            &format!("5x5 kernel larger than {h}x{w} input"),
                        ));
                    }
                    let (oh, ow) = (h - CONV_KERNEL + 1, w - CONV_KERNEL + 1);
                    if oh % 2 != 0 || ow % 2 != 0 {
                        return Err(spec_err(
                            &name,
                            &format!("conv output {oh}x{ow} is not even, cannot pool"),
                        ));
                    }
                    LayerPlan {
                        name,
                        kind: l.kind,
                        in_shape: shape.clone(),
                        conv_shape: Some([l.width, oh, ow]),
                        out_shape: vec![l.width, oh / 2, ow / 2],
                        weight_shape: vec![l.width, c, CONV_KERNEL, CONV_KERNEL],
                    }
                }
                LayerKind::Dense | LayerKind::DenseOutput => {
                    let d: usize = shape.iter().product();
                    LayerPlan {
                        name,
                        kind: l.kind,
                        in_shape: vec![d],
                        conv_shape: None,
                        out_shape: vec![l.width],
                        weight_shape: vec![d, l.width],
                    }
                }
            };
            shape = plan.out_shape.clone();
            plans.push(plan);
        }
        Ok(plans)
    }
}

fn spec_err(layer: &str, msg: &str) -> Error {
    Error::Spec {
        layer: layer.to_string(),
        msg: msg.to_string(),
    }
}

fn check_init(layer: &str, init: f64) -> Result<()> {
    if (0.0..=1.0).contains(&init) {
        Ok(())
    } else {
        Err(spec_err(layer, &format!("gate init {init} outside [0, 1]")))
    }
}

/// Resolved shapes of one layer (per example, batch axis excluded).
#[derive(Debug, Clone, PartialEq)]
pub struct LayerPlan {
    pub name: String,
    pub kind: LayerKind,
    pub in_shape: Vec<usize>,
    /// Conv output before pooling.
    pub conv_shape: Option<[usize; 3]>,
    pub out_shape: Vec<usize>,
    pub weight_shape: Vec<usize>,
}

impl LayerPlan {
    pub fn param_count(&self) -> usize {
        self.weight_shape.iter().product::<usize>() + self.out_shape[0]
    }
}

/// Weights plus biases of all conv and dense layers. Gates are not included.
pub fn param_count(spec: &NetworkSpec) -> Result<usize> {
    Ok(spec.plan()?.iter().map(LayerPlan::param_count).sum())
}

/// Total number of gate parameters in the spec.
pub fn gate_param_count(spec: &NetworkSpec) -> Result<usize> {
    let plans = spec.plan()?;
    let mut n = 0;
    if spec.input_gate.is_some() {
        n += spec.input.dims().iter().product::<usize>();
    }
    for (l, p) in spec.layers.iter().zip(&plans) {
        if let Some(g) = &l.gate {
            n += match g.granularity {
                GateGranularity::PerChannel => p.out_shape[0],
                _ => p.out_shape.iter().product(),
            };
        }
    }
    Ok(n)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    /// `F×C×5×5` for conv, `in×out` for dense.
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    spec: NetworkSpec,
    plans: Vec<LayerPlan>,
    pub layers: Vec<LayerParams>,
    pub input_gate: Option<GateParams>,
    pub layer_gates: Vec<Option<GateParams>>,
}

impl Network {
    /// He-normal weights, zero biases, gates at their init constant.
    pub fn build(spec: &NetworkSpec, seed: u64) -> Result<Self> {
        let plans = spec.plan()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(plans.len());
        for p in &plans {
            let fan_in: usize = p.weight_shape[1..].iter().product::<usize>();
            let fan_in = if p.kind == LayerKind::Conv5 {
                fan_in
            } else {
                p.weight_shape[0]
            };
            let std = (2.0 / fan_in as f64).sqrt();
            let n: usize = p.weight_shape.iter().product();
            let data: Vec<f64> = (0..n)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    z * std
                })
                .collect();
            layers.push(LayerParams {
                weight: Tensor::new(p.weight_shape.clone(), data)?,
                bias: Tensor::zeros(&[p.out_shape[0]]),
            });
        }
        let input_gate = spec
            .input_gate
            .as_ref()
            .map(|g| GateParams::new("input", g.granularity, &spec.input.dims(), g.init))
            .transpose()?;
        let layer_gates = spec
            .layers
            .iter()
            .zip(&plans)
            .map(|(l, p)| {
                l.gate
                    .as_ref()
                    .map(|g| GateParams::new(p.name.clone(), g.granularity, &p.out_shape, g.init))
                    .transpose()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            spec: spec.clone(),
            plans,
            layers,
            input_gate,
            layer_gates,
        })
    }

    /// Assembles a network from explicit parameters, checking every shape.
    pub fn from_parts(
        spec: &NetworkSpec,
        layers: Vec<LayerParams>,
        input_gate: Option<GateParams>,
        layer_gates: Vec<Option<GateParams>>,
    ) -> Result<Self> {
        let plans = spec.plan()?;
        if layers.len() != plans.len() || layer_gates.len() != plans.len() {
            return Err(Error::Dimension(format!(
                "spec has {} layers, got {} parameter sets and {} gate slots",
                plans.len(),
                layers.len(),
                layer_gates.len()
            )));
        }
        for (p, l) in plans.iter().zip(&layers) {
            if l.weight.shape() != p.weight_shape.as_slice() || l.bias.shape() != [p.out_shape[0]]
            {
                return Err(Error::Dimension(format!(
                    "layer {}: weight {:?} / bias {:?}, expected {:?} / [{}]",
                    p.name,
                    l.weight.shape(),
                    l.bias.shape(),
                    p.weight_shape,
                    p.out_shape[0]
                )));
            }
        }
        let check_gate = |g: &Option<GateParams>, want: Option<&GateSpec>, block: &[usize], name: &str| {
            match (g, want) {
                (None, None) => Ok(()),
                (Some(g), Some(w)) if g.granularity == w.granularity && g.block_shape() == block => {
                    Ok(())
                }
                _ => Err(Error::Dimension(format!("gate at {name} does not match the spec"))),
            }
        };
        check_gate(&input_gate, spec.input_gate.as_ref(), &spec.input.dims(), "input")?;
        for ((g, l), p) in layer_gates.iter().zip(&spec.layers).zip(&plans) {
            check_gate(g, l.gate.as_ref(), &p.out_shape, &p.name)?;
        }
        Ok(Self {
            spec: spec.clone(),
            plans,
            layers,
            input_gate,
            layer_gates,
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn plans(&self) -> &[LayerPlan] {
        &self.plans
    }

    pub fn param_count(&self) -> usize {
        self.plans.iter().map(LayerPlan::param_count).sum()
    }

    /// Gate sites in sampling order: input first, then layers in order.
    pub fn gate_sites(&self) -> Vec<&GateParams> {
        self.input_gate
            .iter()
            .chain(self.layer_gates.iter().flatten())
            .collect()
    }

    pub fn gate_sites_mut(&mut self) -> Vec<&mut GateParams> {
        self.input_gate
            .iter_mut()
            .chain(self.layer_gates.iter_mut().flatten())
            .collect()
    }

    pub fn gate_count(&self) -> usize {
        self.gate_sites().iter().map(|g| g.len()).sum()
    }

    pub fn gate(&self, site: &str) -> Option<&GateParams> {
        self.gate_sites().into_iter().find(|g| g.site == site)
    }

    pub fn gate_mut(&mut self, site: &str) -> Option<&mut GateParams> {
        self.gate_sites_mut().into_iter().find(|g| g.site == site)
    }

    /// Forward pass. Train mode draws masks from `rng` in site order.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        batch: &Tensor,
        mode: GateMode,
        mut rng: Option<&mut R>,
    ) -> Result<(Tensor, Trace)> {
        let mut draw = |g: &GateParams| sample_mask(g, mode, rng.as_deref_mut());
        self.run(batch, mode, &mut draw, true)
    }

    /// Forward pass with one explicit mask per gate site (site order).
    pub fn forward_with_masks(&self, batch: &Tensor, masks: &[GateMask]) -> Result<(Tensor, Trace)> {
        let n_sites = self.gate_sites().len();
        if masks.len() != n_sites {
            return Err(Error::Contract(format!(
                "{} masks for {n_sites} gate sites",
                masks.len()
            )));
        }
        let mut it = masks.iter();
        let mut next = |_: &GateParams| Ok(it.next().cloned());
        self.run(batch, GateMode::Train, &mut next, true)
    }

    /// Eval-mode logits without keeping a trace.
    pub fn predict(&self, batch: &Tensor) -> Result<Tensor> {
        let mut none = |_: &GateParams| Ok(None);
        Ok(self.run(batch, GateMode::Eval, &mut none, false)?.0)
    }

    fn run(
        &self,
        batch: &Tensor,
        mode: GateMode,
        masks: &mut dyn FnMut(&GateParams) -> Result<Option<GateMask>>,
        keep: bool,
    ) -> Result<(Tensor, Trace)> {
        let in_dims = self.spec.input.dims();
        let per_example: usize = in_dims.iter().product();
        let n = batch.shape().first().copied().unwrap_or(0);
        if batch.rank() < 2 || n == 0 || batch.len() != n * per_example {
            return Err(Error::Dimension(format!(
                "batch shape {:?} does not match network input {:?}",
                batch.shape(),
                in_dims
            )));
        }
        let mut shape = vec![n];
        shape.extend_from_slice(&in_dims);
        let raw = batch.clone().reshape(&shape)?;

        let mut trace = Trace {
            mode,
            batch: n,
            raw_input: None,
            input_mask: None,
            layers: Vec::with_capacity(self.layers.len()),
        };

        let mut x = match &self.input_gate {
            Some(g) => {
                let mask = masks(g)?;
                let y = apply_gate(&raw, g, mask.as_ref(), mode)?;
                trace.input_mask = mask;
                if keep {
                    trace.raw_input = Some(raw);
                }
                y
            }
            None => raw,
        };

        for (i, (plan, params)) in self.plans.iter().zip(&self.layers).enumerate() {
            let with_ctx = |e: Error| match e {
                Error::Dimension(m) => Error::Dimension(format!("layer {}: {m}", plan.name)),
                other => other,
            };
            let (pre, post, pool) = match plan.kind {
                LayerKind::Conv5 => {
                    let z = conv2d_forward_batch(&x, &params.weight, &params.bias).map_err(with_ctx)?;
                    let mut r = z.clone();
                    r.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
                    let (p, idx) = maxpool2_forward_batch(&r).map_err(with_ctx)?;
                    (z, p, Some(idx))
                }
                LayerKind::Dense | LayerKind::DenseOutput => {
                    let d = plan.in_shape[0];
                    let out = plan.out_shape[0];
                    let xin = x.clone().reshape(&[n, d])?;
                    let mut z = vec![0.0; n * out];
                    for row in z.chunks_exact_mut(out) {
                        row.copy_from_slice(params.bias.data());
                    }
                    matmul_acc(xin.data(), params.weight.data(), &mut z, n, d, out);
                    let z = Tensor::new(vec![n, out], z)?;
                    if plan.kind == LayerKind::DenseOutput {
                        (z.clone(), z, None)
                    } else {
                        let mut r = z.clone();
                        r.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
                        (z, r, None)
                    }
                }
            };
            let (out, mask) = match &self.layer_gates[i] {
                Some(g) => {
                    let mask = masks(g)?;
                    (apply_gate(&post, g, mask.as_ref(), mode).map_err(with_ctx)?, mask)
                }
                None => (post.clone(), None),
            };
            if keep {
                trace.layers.push(LayerTrace {
                    input: x,
                    pre,
                    post,
                    pool,
                    mask,
                });
            }
            x = out;
        }
        Ok((x, trace))
    }

    /// Gradients of `task loss + (B/N)·prior(k) + ½·weight_decay·‖w‖²`.
    pub fn backward(&self, trace: &Trace, labels: &[usize], objective: &Objective) -> Result<GradientSet> {
        if labels.len() != trace.batch {
            return Err(Error::Dimension(format!(
                "trace has batch {} but {} labels were given",
                trace.batch,
                labels.len()
            )));
        }
        if trace.layers.len() != self.layers.len() {
            return Err(Error::Contract("trace was produced without keeping intermediates".into()));
        }
        if objective.dataset_size == 0 {
            return Err(Error::Contract("dataset_size must be positive".into()));
        }
        let n = trace.batch;
        let mode = trace.mode;
        let logits = &trace.layers.last().expect("non-empty").post;
        let (task_loss, mut g) = softmax_cross_entropy(logits, labels)?;

        let mut weights = vec![Tensor::zeros(&[1]); self.layers.len()];
        let mut biases = vec![Tensor::zeros(&[1]); self.layers.len()];
        let mut layer_gate_grads: Vec<Option<Vec<f64>>> = vec![None; self.layers.len()];

        for i in (0..self.layers.len()).rev() {
            let plan = &self.plans[i];
            let params = &self.layers[i];
            let lt = &trace.layers[i];
            // g is the gradient w.r.t. this layer's (gated) output
            if let Some(gp) = &self.layer_gates[i] {
                let (ga, gk) = gate_backward(&g, &lt.post, lt.mask.as_ref(), gp, mode)?;
                g = ga;
                layer_gate_grads[i] = Some(gk);
            }
            let need_input_grad = i > 0 || self.input_gate.is_some();
            match plan.kind {
                LayerKind::Conv5 => {
                    let conv_shape = lt.pre.shape().to_vec();
                    let pool = lt.pool.as_ref().expect("conv trace has pool indices");
                    let mut gz = maxpool2_backward_batch(&g, pool, &conv_shape)?;
                    relu_mask(&mut gz, &lt.pre);
                    let cg = conv2d_backward_batch(
                        &lt.input,
                        &params.weight,
                        &params.bias,
                        &gz,
                        need_input_grad,
                    )?;
                    weights[i] = cg.kernels;
                    biases[i] = cg.bias;
                    if let Some(gi) = cg.input {
                        g = gi;
                    }
                }
                LayerKind::Dense | LayerKind::DenseOutput => {
                    let mut gz = g.clone().reshape(&[n, plan.out_shape[0]])?;
                    if plan.kind == LayerKind::Dense {
                        relu_mask(&mut gz, &lt.pre);
                    }
                    let (d, out) = (plan.in_shape[0], plan.out_shape[0]);
                    let mut gw = vec![0.0; d * out];
                    matmul_at_b_acc(lt.input.data(), gz.data(), &mut gw, n, d, out);
                    let mut gb = vec![0.0; out];
                    for row in gz.data().chunks_exact(out) {
                        for (b, &v) in gb.iter_mut().zip(row) {
                            *b += v;
                        }
                    }
                    weights[i] = Tensor::new(vec![d, out], gw)?;
                    biases[i] = Tensor::new(vec![out], gb)?;
                    if need_input_grad {
                        let mut gx = vec![0.0; n * d];
                        matmul_a_bt_acc(gz.data(), params.weight.data(), &mut gx, n, out, d);
                        g = Tensor::new(lt.input.shape().to_vec(), gx)?;
                    }
                }
            }
        }

        let mut input_gate_grad = None;
        if let Some(gp) = &self.input_gate {
            let raw = trace
                .raw_input
                .as_ref()
                .ok_or_else(|| Error::Contract("trace is missing the raw input".into()))?;
            let (_, gk) = gate_backward(&g, raw, trace.input_mask.as_ref(), gp, mode)?;
            input_gate_grad = Some(gk);
        }

        // prior over gates, scaled so one epoch carries one copy of it
        let ratio = n as f64 / objective.dataset_size as f64;
        let mut penalty = 0.0;
        let mut gates = Vec::new();
        let sites = input_gate_grad
            .into_iter()
            .zip(self.input_gate.iter())
            .chain(
                layer_gate_grads
                    .into_iter()
                    .zip(&self.layer_gates)
                    .filter_map(|(g, p)| Some((g?, p.as_ref()?))),
            );
        for (mut gk, params) in sites {
            penalty += ratio * objective.regularizer.value(&params.k);
            for (g, pg) in gk.iter_mut().zip(objective.regularizer.grad(&params.k)) {
                *g += ratio * pg;
            }
            gates.push(gk);
        }

        let mut decay = 0.0;
        if objective.weight_decay != 0.0 {
            for (gw, p) in weights.iter_mut().zip(&self.layers) {
                for (g, &w) in gw.data_mut().iter_mut().zip(p.weight.data()) {
                    *g += objective.weight_decay * w;
                    decay += 0.5 * objective.weight_decay * w * w;
                }
            }
        }

        Ok(GradientSet {
            weights,
            biases,
            gates,
            task_loss,
            penalty,
            weight_decay_term: decay,
        })
    }

    /// Objective value for a fixed set of masks (site order), as used by
    /// gradient checks: `task + (B/N)·prior + ½·wd·‖w‖²`.
    pub fn objective_value(
        &self,
        batch: &Tensor,
        labels: &[usize],
        mode: GateMode,
        masks: Option<&[GateMask]>,
        objective: &Objective,
    ) -> Result<f64> {
        let logits = match (mode, masks) {
            (GateMode::Eval, _) => self.predict(batch)?,
            (_, Some(m)) => self.forward_with_masks(batch, m)?.0,
            (GateMode::Heaviside, None) => self.forward::<ChaCha8Rng>(batch, mode, None)?.0,
            (GateMode::Train, None) => {
                return Err(Error::Contract("train-mode objective needs explicit masks".into()))
            }
        };
        let (task, _) = softmax_cross_entropy(&logits, labels)?;
        let ratio = labels.len() as f64 / objective.dataset_size as f64;
        let prior: f64 = self
            .gate_sites()
            .iter()
            .map(|g| objective.regularizer.value(&g.k))
            .sum();
        let decay: f64 = self
            .layers
            .iter()
            .flat_map(|l| l.weight.data())
            .map(|w| 0.5 * objective.weight_decay * w * w)
            .sum();
        Ok(task + ratio * prior + decay)
    }
}

fn relu_mask(grad: &mut Tensor, pre: &Tensor) {
    for (g, &z) in grad.data_mut().iter_mut().zip(pre.data()) {
        if z <= 0.0 {
            *g = 0.0;
        }
    }
}

/// Everything the loss depends on besides the data.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Objective {
    pub regularizer: Regularizer,
    /// Size of the full training set; the gate prior is scaled by batch/dataset.
    pub dataset_size: usize,
    pub weight_decay: f64,
}

impl Objective {
    pub fn new(regularizer: Regularizer, dataset_size: usize) -> Self {
        Self {
            regularizer,
            dataset_size,
            weight_decay: 0.0,
        }
    }
}

/// Intermediates of one forward pass.
#[derive(Debug, Clone)]
pub struct Trace {
    pub mode: GateMode,
    pub batch: usize,
    /// Ungated input, kept only when an input gate exists.
    pub raw_input: Option<Tensor>,
    pub input_mask: Option<GateMask>,
    pub layers: Vec<LayerTrace>,
}

impl Trace {
    /// Masks in site order (empty in eval mode).
    pub fn masks(&self) -> Vec<&GateMask> {
        self.input_mask
            .iter()
            .chain(self.layers.iter().filter_map(|l| l.mask.as_ref()))
            .collect()
    }

    /// Smallest |pre-activation| over all ReLU layers; used to keep gradient
    /// checks away from kinks.
    pub fn min_abs_preactivation(&self) -> f64 {
        self.layers[..self.layers.len().saturating_sub(1)]
            .iter()
            .flat_map(|l| l.pre.data())
            .map(|v| v.abs())
            .fold(f64::INFINITY, f64::min)
    }
}

#[derive(Debug, Clone)]
pub struct LayerTrace {
    /// Input as seen by this layer (after the previous gate).
    pub input: Tensor,
    /// Conv or affine output before the nonlinearity.
    pub pre: Tensor,
    /// Activations entering the gate (post ReLU/pool); logits for the output layer.
    pub post: Tensor,
    pub pool: Option<PoolIndices>,
    pub mask: Option<GateMask>,
}

#[derive(Debug, Clone)]
pub struct GradientSet {
    pub weights: Vec<Tensor>,
    pub biases: Vec<Tensor>,
    /// One entry per gate site, in site order.
    pub gates: Vec<Vec<f64>>,
    pub task_loss: f64,
    /// Scaled prior contribution of this minibatch.
    pub penalty: f64,
    pub weight_decay_term: f64,
}

impl GradientSet {
    pub fn loss(&self) -> f64 {
        self.task_loss + self.penalty + self.weight_decay_term
    }
}

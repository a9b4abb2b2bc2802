#![allow(dead_code)]

use std::path::PathBuf;

use gendrop::data::{load_idx, Dataset};
use gendrop::gates::{GateGranularity, GateMask, GateMode};
use gendrop::network::{GateSpec, InputShape, LayerSpec, Network, NetworkSpec, Objective};
use gendrop::oracle::{finite_diff, FdReport};
use gendrop::tensor::{DualResult, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Checks a differentiable op against central differences of `Σ out ⊙ r`
/// for a fixed random `r`, one report per input.
pub fn fd_check_op(
    op: impl Fn(&[Tensor]) -> DualResult,
    inputs: &[Tensor],
    h: f64,
    tol: f64,
) -> Vec<FdReport> {
    let res = op(inputs);
    let r = random_tensor(res.output.shape(), 99);
    let analytic = res.backward(&r).unwrap();
    (0..inputs.len())
        .map(|i| {
            let loss = |x: &[f64]| {
                let mut ins = inputs.to_vec();
                ins[i] = Tensor::new(inputs[i].shape().to_vec(), x.to_vec()).unwrap();
                let out = op(&ins).output;
                Ok(out.data().iter().zip(r.data()).map(|(a, b)| a * b).sum())
            };
            let num = finite_diff(loss, inputs[i].data(), h).unwrap();
            FdReport::compare(analytic[i].data(), &num, h, tol).unwrap()
        })
        .collect()
}

/// Which parameter block of a network to perturb.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Block {
    Weight(usize),
    Bias(usize),
    /// Index into `gate_sites()`.
    Gate(usize),
}

fn set_block(net: &mut Network, block: Block, x: &[f64]) {
    match block {
        Block::Weight(i) => net.layers[i].weight.data_mut().copy_from_slice(x),
        Block::Bias(i) => net.layers[i].bias.data_mut().copy_from_slice(x),
        Block::Gate(i) => net.gate_sites_mut()[i].k.copy_from_slice(x),
    }
}

fn get_block(net: &Network, block: Block) -> Vec<f64> {
    match block {
        Block::Weight(i) => net.layers[i].weight.data().to_vec(),
        Block::Bias(i) => net.layers[i].bias.data().to_vec(),
        Block::Gate(i) => net.gate_sites()[i].k.clone(),
    }
}

/// Finite-difference report for one parameter block, with masks held fixed
/// (`Some`) or Eval-mode rescaling (`None`).
#[allow(clippy::too_many_arguments)]
pub fn fd_check_network(
    net: &Network,
    x: &Tensor,
    y: &[usize],
    masks: Option<&[GateMask]>,
    objective: &Objective,
    block: Block,
    h: f64,
    tol: f64,
) -> FdReport {
    let (mode, trace) = match masks {
        Some(m) => (GateMode::Train, net.forward_with_masks(x, m).unwrap().1),
        None => (GateMode::Eval, net.forward::<ChaCha8Rng>(x, GateMode::Eval, None).unwrap().1),
    };
    let grads = net.backward(&trace, y, objective).unwrap();
    let analytic = match block {
        Block::Weight(i) => grads.weights[i].data().to_vec(),
        Block::Bias(i) => grads.biases[i].data().to_vec(),
        Block::Gate(i) => grads.gates[i].clone(),
    };
    let mut probe = net.clone();
    let loss = |p: &[f64]| {
        set_block(&mut probe, block, p);
        probe.objective_value(x, y, mode, masks, objective)
    };
    let num = finite_diff(loss, &get_block(net, block), h).unwrap();
    FdReport::compare(&analytic, &num, h, tol).unwrap()
}

/// conv5(3) → conv5(4) → dense(5) → output(3) on 1×16×16, gated everywhere.
pub fn small_convnet(seed: u64, gate_init: f64) -> Network {
    let spec = NetworkSpec {
        input: InputShape::Image {
            channels: 1,
            height: 16,
            width: 16,
        },
        input_gate: Some(GateSpec {
            granularity: GateGranularity::PerActivation,
            init: gate_init,
        }),
        layers: vec![
            LayerSpec::conv5(3).gated(GateGranularity::PerChannel, gate_init),
            LayerSpec::conv5(4).gated(GateGranularity::PerActivation, gate_init),
            LayerSpec::dense(5).gated(GateGranularity::PerUnit, gate_init),
            LayerSpec::output(3),
        ],
    };
    Network::build(&spec, seed).unwrap()
}

/// Spreads gate values over (0.2, 0.95) so Eval mode is not pass-through.
pub fn spread_gates(net: &mut Network, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for g in net.gate_sites_mut() {
        g.k.iter_mut().for_each(|k| *k = rng.random_range(0.2..0.95));
    }
}

pub fn mnist_dir() -> PathBuf {
    std::env::var_os("GENDROP_MNIST_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"))
}

pub fn load_mnist() -> (Dataset, Dataset) {
    let d = mnist_dir();
    let train = load_idx(d.join("train-images-idx3-ubyte"), d.join("train-labels-idx1-ubyte"))
        .unwrap_or_else(|e| panic!("MNIST not found under {} ({e}); set GENDROP_MNIST_DIR", d.display()));
    let test = load_idx(d.join("t10k-images-idx3-ubyte"), d.join("t10k-labels-idx1-ubyte")).unwrap();
    (train, test)
}

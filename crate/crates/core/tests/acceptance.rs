//! Acceptance criteria. Each test writes one `PASS`/`FAIL` line to stderr
//! (uncaptured) and then asserts.

mod common;

use std::collections::BTreeMap;
use std::io::Write;
use std::time::Instant;

use common::{fd_check_network, fd_check_op, load_mnist, random_tensor, small_convnet, spread_gates, Block};
use gendrop::arch_select::{auto_thresholds, prune};
use gendrop::data::{subset, synthetic_blobs, Dataset};
use gendrop::gates::{apply_gate, sample_mask, GateGranularity, GateMask, GateMode, GateParams};
use gendrop::network::{param_count, Network, NetworkSpec, Objective};
use gendrop::oracle::{
    binomial_check, enumerate_expected_loss, finite_diff, mask_distribution, FdReport,
};
use gendrop::regularizers::{
    al_penalty, default_sal_s, gd_penalty, gd_penalty_grad, preset, ALConfig, GDConfig, Preset, Regularizer,
    DEFAULT_EPS,
};
use gendrop::tensor::{conv2d_valid, matmul, maxpool2, relu, softmax_cross_entropy, Tensor};
use gendrop::train::{train, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn report(n: usize, name: &str, pass: bool, detail: &str, t0: Instant) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(
        std::io::stderr(),
        "acceptance {n:>2} [{name}]: {verdict} ({detail}; {:.1}s)",
        t0.elapsed().as_secs_f64()
    );
    assert!(pass, "criterion {n} ({name}) failed: {detail}");
}

#[test]
fn c01_parameter_counts() {
    let t0 = Instant::now();
    let cases = [
        ((20, 50, 500), 431_080),
        ((20, 50, 20), 41_800),
        ((11, 33, 38), 29_886),
        ((18, 50, 296), 263_084),
    ];
    let got: Vec<usize> = cases
        .iter()
        .map(|&((a, b, c), _)| param_count(&NetworkSpec::lenet(a, b, c, 10)).unwrap())
        .collect();
    let pass = cases.iter().zip(&got).all(|((_, want), g)| want == g);
    report(1, "parameter counts", pass, &format!("{got:?}"), t0);
}

#[test]
fn c02_gradient_suite() {
    let t0 = Instant::now();
    let (h, tol) = (1e-6, 1e-4);
    let mut worst: Vec<(String, f64)> = Vec::new();
    let mut record = |what: &str, r: &[FdReport]| {
        let e = r.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
        worst.push((what.to_string(), e));
    };

    // (a) tensor primitives
    let (a, b) = (random_tensor(&[3, 4], 1), random_tensor(&[4, 5], 2));
    record("matmul", &fd_check_op(|t| matmul(&t[0], &t[1]).unwrap(), &[a, b], h, tol));
    let (x, k, bias) = (random_tensor(&[2, 7, 6], 3), random_tensor(&[3, 2, 5, 5], 4), random_tensor(&[3], 5));
    record("conv2d", &fd_check_op(|t| conv2d_valid(&t[0], &t[1], &t[2]).unwrap(), &[x, k, bias], h, tol));
    let x = random_tensor(&[2, 6, 4], 6);
    record("maxpool", &fd_check_op(|t| maxpool2(&t[0]).unwrap(), std::slice::from_ref(&x), h, tol));
    record("relu", &fd_check_op(|t| relu(&t[0]).unwrap(), &[x], h, tol));
    let logits = random_tensor(&[4, 5], 7);
    let labels = [0, 3, 4, 1];
    let (_, g) = softmax_cross_entropy(&logits, &labels).unwrap();
    let num = finite_diff(
        |v| Ok(softmax_cross_entropy(&Tensor::new(vec![4, 5], v.to_vec())?, &labels)?.0),
        logits.data(),
        h,
    )
    .unwrap();
    record("softmax_ce", &[FdReport::compare(g.data(), &num, h, tol).unwrap()]);
    let prim_ok = worst.iter().all(|(_, e)| *e <= tol);

    // (b) weights under frozen Heaviside masks, (c) everything in Eval mode
    let xb = random_tensor(&[3, 1, 16, 16], 11);
    let yb = [2, 0, 1];
    let net = (0..200)
        .map(|s| {
            let mut n = small_convnet(s, 1.0);
            spread_gates(&mut n, s + 1000);
            n
        })
        .find(|n| {
            let (_, t) = n.forward::<ChaCha8Rng>(&xb, GateMode::Eval, None).unwrap();
            t.min_abs_preactivation() > 1e-3
        })
        .unwrap();
    let masks: Vec<GateMask> = net
        .gate_sites()
        .iter()
        .map(|g| sample_mask::<ChaCha8Rng>(g, GateMode::Heaviside, None).unwrap().unwrap())
        .collect();
    let mut objective = Objective::new(Regularizer::GeneralizedDropout(preset("dropout_pp_half", 1.0).unwrap()), 40);
    objective.weight_decay = 1e-3;
    // Near-zero weight gradients are round-off limited at smaller steps.
    let net_h = 1e-4;
    let mut weight_err: f64 = 0.0;
    let mut eval_err: f64 = 0.0;
    for i in 0..net.layers.len() {
        for blk in [Block::Weight(i), Block::Bias(i)] {
            weight_err = weight_err.max(fd_check_network(&net, &xb, &yb, Some(&masks), &objective, blk, net_h, tol).max_rel_error);
            eval_err = eval_err.max(fd_check_network(&net, &xb, &yb, None, &objective, blk, net_h, tol).max_rel_error);
        }
    }
    let mut gate_err: f64 = 0.0;
    for s in 0..net.gate_sites().len() {
        gate_err = gate_err.max(fd_check_network(&net, &xb, &yb, None, &objective, Block::Gate(s), net_h, tol).max_rel_error);
    }

    // (d) regularizer gradients at 1e-6
    let ks: Vec<f64> = (0..=80).map(|i| 0.1 + 0.01 * i as f64).collect();
    let mut reg_err: f64 = 0.0;
    let mut configs: Vec<GDConfig> = Preset::ALL.iter().map(|p| p.config(1.0).unwrap()).collect();
    configs.push(GDConfig::new(2.0, 3.0, 0.7, DEFAULT_EPS).unwrap());
    configs.push(GDConfig::sal(10.0, 0.05).unwrap());
    for c in &configs {
        let num = finite_diff(|v| Ok(gd_penalty(v, c)), &ks, 1e-6).unwrap();
        reg_err = reg_err.max(FdReport::compare(&gd_penalty_grad(&ks, c), &num, 1e-6, 1e-6).unwrap().max_rel_error);
    }
    let al = ALConfig { lambda1: 0.8, lambda3: 0.3 };
    let num = finite_diff(|v| Ok(al_penalty(v, &al).0), &ks, 1e-6).unwrap();
    reg_err = reg_err.max(FdReport::compare(&al_penalty(&ks, &al).1, &num, 1e-6, 1e-6).unwrap().max_rel_error);

    let pass = prim_ok && weight_err <= tol && eval_err <= tol && gate_err <= tol && reg_err <= 1e-6;
    let detail = format!(
        "primitives {:?}; heaviside weights {weight_err:.2e}; eval weights {eval_err:.2e}; eval gates {gate_err:.2e}; regularizers {reg_err:.2e}",
        worst.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect::<Vec<_>>()
    );
    report(2, "gradient suite", pass && t0.elapsed().as_secs() < 30, &detail, t0);
}

#[test]
fn c03_estimator_unbiasedness() {
    let t0 = Instant::now();
    let spec = NetworkSpec::mlp(3, &[5, 4], 3).gate_hidden(GateGranularity::PerUnit, 1.0);
    let mut net = Network::build(&spec, 5).unwrap();
    spread_gates(&mut net, 6);
    assert!(net.gate_count() <= 10);
    let x = random_tensor(&[6, 3], 8);
    let y = [0, 1, 2, 2, 1, 0];
    let exact = enumerate_expected_loss(&net, &x, &y).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let n = 50_000;
    let (mut sum, mut sq) = (0.0, 0.0);
    for _ in 0..n {
        let (logits, _) = net.forward(&x, GateMode::Train, Some(&mut rng)).unwrap();
        let l = softmax_cross_entropy(&logits, &y).unwrap().0;
        sum += l;
        sq += l * l;
    }
    let mean = sum / n as f64;
    let var = (sq - n as f64 * mean * mean) / (n - 1) as f64;
    let se = (var / n as f64).sqrt();
    let z = (mean - exact) / se;
    report(
        3,
        "estimator unbiasedness",
        z.abs() <= 4.0,
        &format!("G = {}, exact {exact:.6}, MC mean {mean:.6}, z = {z:.2}", net.gate_count()),
        t0,
    );
}

#[test]
fn c04_sampling_correctness() {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut fails = Vec::new();
    for &p in &[0.0, 0.1, 0.3, 0.5, 0.9, 1.0] {
        let g = GateParams::with_values("fc1", GateGranularity::PerUnit, &[1], vec![p]).unwrap();
        let samples: Vec<bool> = (0..10_000)
            .map(|_| sample_mask(&g, GateMode::Train, Some(&mut rng)).unwrap().unwrap().0[0])
            .collect();
        if !binomial_check(&samples, p, 4.0) {
            fails.push(p);
        }
    }

    // Eval output vs exact expectation of Train output through gate + linear layer.
    let k = vec![0.15, 0.4, 0.5, 0.72, 0.9, 1.0];
    let g = GateParams::with_values("fc1", GateGranularity::PerUnit, &[6], k.clone()).unwrap();
    let a = random_tensor(&[4, 6], 31);
    let w = random_tensor(&[6, 3], 32);
    let eval = matmul(&apply_gate(&a, &g, None, GateMode::Eval).unwrap(), &w).unwrap().output;
    let mut expect = Tensor::zeros(&[4, 3]);
    let mut total_p = 0.0;
    for (theta, p) in mask_distribution(&k).unwrap() {
        let out = matmul(&apply_gate(&a, &g, Some(&GateMask(theta)), GateMode::Train).unwrap(), &w)
            .unwrap()
            .output;
        expect.data_mut().iter_mut().zip(out.data()).for_each(|(e, o)| *e += p * o);
        total_p += p;
    }
    let diff = eval.max_abs_diff(&expect);
    let pass = fails.is_empty() && diff < 1e-12 && (total_p - 1.0).abs() < 1e-12;
    report(
        4,
        "sampling correctness",
        pass,
        &format!("binomial failures at {fails:?}; |eval - E[train]| = {diff:.1e}"),
        t0,
    );
}

#[test]
fn c05_regularizer_directionality() {
    let t0 = Instant::now();
    let eps = 1e-6;
    let grid: Vec<f64> = (1..=1000).map(|i| eps + (1.0 - 2.0 * eps) * i as f64 / 1001.0).collect();
    let mut problems = Vec::new();
    for p in Preset::ALL {
        let cfg = p.config(1.0).unwrap();
        let g = gd_penalty_grad(&grid, &cfg);
        let ok = match p {
            Preset::DropoutPpFlat => g.iter().all(|&v| v == 0.0) && gd_penalty(&grid, &cfg) == 0.0,
            Preset::DropoutPpZero => g.iter().all(|&v| v > 0.0),
            Preset::DropoutPpOne => g.iter().all(|&v| v < 0.0),
            Preset::DropoutPpHalf => {
                grid.iter().zip(&g).all(|(&k, &v)| v.signum() == (k - 0.5).signum() && v != 0.0)
                    && gd_penalty_grad(&[0.5], &cfg)[0] == 0.0
            }
            Preset::Sal => true,
        };
        if !ok {
            problems.push(p.name().to_string());
        }
    }
    for ratio in [1.0, 10.0, 100.0] {
        let cfg = GDConfig::sal(ratio, default_sal_s(ratio)).unwrap();
        let g = gd_penalty_grad(&grid, &cfg);
        let changes: Vec<usize> = (1..g.len()).filter(|&i| g[i - 1].signum() != g[i].signum()).collect();
        let one_max = changes.len() == 1 && g[0] > 0.0 && g[g.len() - 1] < 0.0;
        if !one_max {
            problems.push(format!("sal({ratio}) sign changes {changes:?}"));
        }
    }
    let mut asym = Vec::new();
    for ratio in [10.0, 100.0] {
        let cfg = GDConfig::sal(ratio, default_sal_s(ratio)).unwrap();
        let (lo, hi) = (gd_penalty(&[DEFAULT_EPS], &cfg), gd_penalty(&[1.0 - DEFAULT_EPS], &cfg));
        asym.push(format!("r={ratio}: {lo:.3} < {hi:.3}"));
        if lo >= hi {
            problems.push(format!("sal({ratio}) asymmetry"));
        }
    }
    report(
        5,
        "regularizer directionality",
        problems.is_empty(),
        &format!("problems {problems:?}; {}", asym.join(", ")),
        t0,
    );
}

#[test]
fn c06_sal_bimodality_and_pruning() {
    let t0 = Instant::now();
    let seed = 0;
    let tr = synthetic_blobs(400, 2, 2, 3.0, seed).unwrap();
    let te = synthetic_blobs(400, 2, 2, 3.0, seed + 1).unwrap();
    let mut widths = Vec::new();
    let mut fractions = Vec::new();
    for ratio in [1.0, 10.0, 100.0] {
        let spec = NetworkSpec::mlp(2, &[64], 2).gate_hidden(GateGranularity::PerUnit, 0.5);
        let mut net = Network::build(&spec, seed).unwrap();
        let cfg = TrainConfig {
            epochs: 100,
            seed,
            regularizer: Regularizer::GeneralizedDropout(GDConfig::sal(ratio, default_sal_s(ratio)).unwrap()),
            ..Default::default()
        };
        train(&mut net, &tr, &te, &cfg).unwrap();
        let k = &net.gate("fc1").unwrap().k;
        fractions.push(k.iter().filter(|&&v| v <= 0.1 || v >= 0.9).count() as f64 / k.len() as f64);
        let (_, rep) = prune(&net, &auto_thresholds(&net).unwrap()).unwrap();
        widths.push(rep.surviving_hidden_width());
    }
    // Runs at s = 0.05 (ratios 1 and 10) must be bimodal.
    let bimodal = fractions[..2].iter().all(|&f| f >= 0.7);
    let monotone = widths.windows(2).all(|w| w[1] <= w[0]);
    report(
        6,
        "SAL bimodality and pruning",
        bimodal && monotone,
        &format!("bimodal fraction {fractions:?}, surviving widths {widths:?} for ratios [1, 10, 100]"),
        t0,
    );
}

fn mnist_5k() -> (Dataset, Dataset) {
    let (train, test) = load_mnist();
    (subset(&train, 5000, 0).unwrap(), test)
}

fn mlp_run(train_set: &Dataset, test: &Dataset, width: usize, init: f64, gate_lr: f64) -> (f64, f64) {
    let spec = NetworkSpec::mlp(784, &[width], 10).gate_hidden(GateGranularity::PerUnit, init);
    let mut net = Network::build(&spec, 0).unwrap();
    let cfg = TrainConfig {
        epochs: 20,
        gate_lr_multiplier: gate_lr,
        ..Default::default()
    };
    let last = train(&mut net, train_set, test, &cfg).unwrap().pop().unwrap();
    (last.test_error, last.mean_gates[0].1)
}

#[test]
fn c07_layer_width_adaptation() {
    let t0 = Instant::now();
    let (tr, te) = mnist_5k();
    let ks: Vec<f64> = [32, 128, 512].iter().map(|&w| mlp_run(&tr, &te, w, 0.5, 1.0).1).collect();
    let pass = ks.windows(2).all(|w| w[1] < w[0]);
    report(
        7,
        "gate value vs layer width",
        pass,
        &format!("mean k for widths [32, 128, 512] = {ks:.4?}"),
        t0,
    );
}

#[test]
fn c08_small_width_advantage() {
    let t0 = Instant::now();
    let (tr, te) = mnist_5k();
    let (dpp, k) = mlp_run(&tr, &te, 16, 1.0, 1.0);
    let (classic, _) = mlp_run(&tr, &te, 16, 0.5, 0.0);
    report(
        8,
        "accuracy at small width",
        dpp <= classic,
        &format!("Dropout++ test error {dpp:.4} (mean k {k:.3}) vs Dropout(0.5) {classic:.4}"),
        t0,
    );
}

#[test]
fn c09_initialization_robustness() {
    let t0 = Instant::now();
    let (tr, te) = mnist_5k();
    let errs: Vec<f64> = [0.2, 0.5, 1.0].iter().map(|&i| mlp_run(&tr, &te, 128, i, 1.0).0).collect();
    let spread = errs.iter().cloned().fold(f64::MIN, f64::max) - errs.iter().cloned().fold(f64::MAX, f64::min);
    report(
        9,
        "initialization robustness",
        spread <= 0.015,
        &format!("test errors for init [0.2, 0.5, 1.0] = {errs:.4?}, spread {:.2} pp", 100.0 * spread),
        t0,
    );
}

#[test]
fn c10_zero_gate_pruning_invariance() {
    let t0 = Instant::now();
    let spec = NetworkSpec::lenet(20, 50, 500, 10).gate_hidden(GateGranularity::PerChannel, 1.0);
    let mut net = Network::build(&spec, 10).unwrap();
    spread_gates(&mut net, 11);
    let mut thresholds = BTreeMap::new();
    for (site, step) in [("conv1", 3), ("conv2", 4), ("fc1", 5)] {
        let g = net.gate_mut(site).unwrap();
        g.k.iter_mut().step_by(step).for_each(|k| *k = 0.0);
        thresholds.insert(site.to_string(), 1e-9);
    }
    let (pruned, rep) = prune(&net, &thresholds).unwrap();
    let x = random_tensor(&[100, 1, 28, 28], 12);
    let a = net.predict(&x).unwrap();
    let b = pruned.predict(&x).unwrap();
    let identical = a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits());
    report(
        10,
        "exact-zero pruning invariance",
        identical,
        &format!("{} -> {}, max |diff| {:.1e}", rep.architecture_before, rep.architecture_after, a.max_abs_diff(&b)),
        t0,
    );
}

#[test]
fn c11_lenet_sanity() {
    let t0 = Instant::now();
    let (tr, te) = mnist_5k();
    let spec = NetworkSpec::lenet(20, 50, 500, 10).gate_hidden(GateGranularity::PerChannel, 1.0);
    let mut net = Network::build(&spec, 0).unwrap();
    let cfg = TrainConfig {
        epochs: 10,
        ..Default::default()
    };
    let last = train(&mut net, &tr, &te, &cfg).unwrap().pop().unwrap();
    report(
        11,
        "LeNet sanity bound",
        last.test_error <= 0.05,
        &format!("test error {:.4} after 10 epochs", last.test_error),
        t0,
    );
}

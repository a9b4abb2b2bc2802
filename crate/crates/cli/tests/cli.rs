use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use gendrop::checkpoint;
use gendrop::gates::{read_gates_csv, GateGranularity};
use gendrop::network::{Network, NetworkSpec};

const SMOKE: &str = r#"
seed = 3

[data]
kind = "blobs"
n_train = 200
n_test = 100
classes = 2
dim = 2
separation = 4.0

[network]
kind = "mlp"
hidden = [12]
gate = "per_unit"

[train]
epochs = 15
"#;

fn gendrop(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gendrop"))
        .args(args)
        .output()
        .expect("spawn gendrop")
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn train_smoke_writes_outputs_quickly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", SMOKE);
    let out = dir.path().join("run");
    let t0 = Instant::now();
    let o = gendrop(&["train", "--config", s(&cfg), "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(t0.elapsed() < Duration::from_secs(10));
    for f in ["metrics.csv", "gates.csv", "model.ckpt"] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    let metrics = fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 16);
    assert!(metrics.starts_with("epoch,train_loss,train_error,test_error,mean_gate_fc1,penalty_value"));
}

#[test]
fn rerun_is_byte_identical_and_seed_flag_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", SMOKE);
    let run = |name: &str, extra: &[&str]| {
        let out = dir.path().join(name);
        let mut args = vec!["train", "--config", s(&cfg), "--out", s(&out)];
        args.extend_from_slice(extra);
        let o = gendrop(&args);
        assert!(o.status.success());
        (
            fs::read(out.join("metrics.csv")).unwrap(),
            fs::read(out.join("gates.csv")).unwrap(),
            fs::read(out.join("model.ckpt")).unwrap(),
        )
    };
    let a = run("a", &[]);
    let b = run("b", &[]);
    assert_eq!(a, b);
    assert_eq!(a, run("c", &["--seed", "3"]));
    assert_ne!(a.0, run("d", &["--seed", "4"]).0);
}

#[test]
fn unknown_preset_is_a_field_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "c.toml",
        &format!("{SMOKE}\n[regularizer]\npreset = \"dropout_pp_sometimes\"\n"),
    );
    let o = gendrop(&["train", "--config", s(&cfg), "--out", s(&dir.path().join("x"))]);
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("preset") && err.contains("dropout_pp_sometimes"), "{err}");
    assert!(err.contains("line"), "{err}");
}

#[test]
fn gate_dump_round_trips_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", SMOKE);
    let out = dir.path().join("run");
    assert!(gendrop(&["train", "--config", s(&cfg), "--out", s(&out)]).status.success());
    let o = gendrop(&["gate-dump", "--checkpoint", s(&out.join("model.ckpt"))]);
    assert!(o.status.success());
    let records = read_gates_csv(o.stdout.as_slice()).unwrap();
    let net = checkpoint::load(out.join("model.ckpt")).unwrap();
    let k = &net.gate("fc1").unwrap().k;
    assert_eq!(records.len(), k.len());
    for (r, &v) in records.iter().zip(k) {
        assert_eq!(r.k.to_bits(), v.to_bits());
    }
    assert_eq!(o.stdout, fs::read(out.join("gates.csv")).unwrap());
}

fn lenet_with_survivors(dir: &Path, survivors: [usize; 3], bimodal: bool) -> PathBuf {
    let spec = NetworkSpec::lenet(20, 50, 500, 10).gate_hidden(GateGranularity::PerChannel, 1.0);
    let mut net = Network::build(&spec, 1).unwrap();
    for (site, keep) in ["conv1", "conv2", "fc1"].into_iter().zip(survivors) {
        let g = net.gate_mut(site).unwrap();
        let n = g.len();
        for (j, k) in g.k.iter_mut().enumerate() {
            // j ↦ 7j mod n is a permutation, so survivors are scattered.
            let on = (7 * j) % n < keep;
            *k = match (on, bimodal) {
                (true, true) => 0.97 - 0.0001 * j as f64,
                (false, true) => 0.02 + 0.0001 * j as f64,
                (true, false) => 1.0,
                (false, false) => 0.0,
            };
        }
        assert_eq!(g.k.iter().filter(|&&v| v >= 0.5).count(), keep, "{site}");
    }
    let p = dir.join("lenet.ckpt");
    checkpoint::save(&net, &p).unwrap();
    p
}

#[test]
fn prune_lenet_to_11_33_38() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = lenet_with_survivors(dir.path(), [11, 33, 38], false);
    let out = dir.path().join("p");
    let o = gendrop(&[
        "prune",
        "--checkpoint",
        s(&ckpt),
        "--thresholds",
        "conv1=0.5,conv2=0.5,fc1=0.5",
        "--out",
        s(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report = fs::read_to_string(out.join("report.txt")).unwrap();
    assert!(report.contains("11-33-38-10"), "{report}");
    assert!(report.contains("29,886"), "{report}");
    assert!(report.contains("431,080"), "{report}");
    let pruned = checkpoint::load(out.join("pruned.ckpt")).unwrap();
    assert_eq!(pruned.param_count(), 29_886);
    let hist = fs::read_to_string(out.join("histogram.csv")).unwrap();
    assert_eq!(hist.lines().count(), 1 + 3 * 10);
}

#[test]
fn auto_threshold_matches_manual_on_bimodal_gates() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = lenet_with_survivors(dir.path(), [11, 33, 38], true);
    let run = |th: &str, name: &str| {
        let out = dir.path().join(name);
        let o = gendrop(&["prune", "--checkpoint", s(&ckpt), "--thresholds", th, "--out", s(&out)]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        checkpoint::load(out.join("pruned.ckpt")).unwrap().spec().architecture()
    };
    let auto = run("auto", "auto");
    assert_eq!(auto, "11-33-38-10");
    assert_eq!(auto, run("conv1=0.5,conv2=0.5,fc1=0.5", "manual"));
}

#[test]
fn zeroed_channel_reduces_width_by_one() {
    let dir = tempfile::tempdir().unwrap();
    let spec = NetworkSpec::lenet(6, 8, 20, 10).gate_hidden(GateGranularity::PerChannel, 1.0);
    let mut net = Network::build(&spec, 2).unwrap();
    net.gate_mut("conv2").unwrap().k[5] = 0.0;
    let ckpt = dir.path().join("n.ckpt");
    checkpoint::save(&net, &ckpt).unwrap();
    let out = dir.path().join("p");
    let o = gendrop(&["prune", "--checkpoint", s(&ckpt), "--thresholds", "conv2=0.5", "--out", s(&out), "--fold"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let pruned = checkpoint::load(out.join("pruned.ckpt")).unwrap();
    assert_eq!(pruned.spec().architecture(), "6-7-20-10");
    let expected = gendrop::network::param_count(pruned.spec()).unwrap();
    assert_eq!(expected, net.param_count() - (6 * 25 + 1) - 4 * 4 * 20);
    let report = fs::read_to_string(out.join("report.txt")).unwrap();
    assert!(report.contains("6-7-20-10"));
    assert!(out.join("folded.ckpt").is_file());
}

#[test]
fn prune_refuses_checkpoint_without_prunable_gates() {
    let dir = tempfile::tempdir().unwrap();
    let net = Network::build(&NetworkSpec::mlp(4, &[5], 2), 0).unwrap();
    let ckpt = dir.path().join("n.ckpt");
    checkpoint::save(&net, &ckpt).unwrap();
    let o = gendrop(&["prune", "--checkpoint", s(&ckpt), "--out", s(&dir.path().join("p"))]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("no per-unit or per-channel gates"));
}

#[test]
fn sweep_writes_one_row_per_value() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "c.toml",
        &format!("{SMOKE}\n[sweep]\nvariable = \"gate_init\"\nvalues = [0.5, 1.0]\n"),
    );
    let out = dir.path().join("sw");
    let o = gendrop(&["sweep", "--config", s(&cfg), "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(out.join("sweep.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[0].starts_with("run,variable,value,seed,final_train_error,final_test_error,mean_gate_fc1"));
    assert!(lines[1].starts_with("0,gate_init,0.5,3,"));
    assert!(lines[2].starts_with("1,gate_init,1,4,"));
    assert!(out.join("run_1/metrics.csv").is_file());

    let empty = write_config(
        dir.path(),
        "e.toml",
        &format!("{SMOKE}\n[sweep]\nvariable = \"gate_init\"\nvalues = []\n"),
    );
    assert!(!gendrop(&["sweep", "--config", s(&empty), "--out", s(&out)]).status.success());
}

#[test]
fn sal_sweep_reports_surviving_width() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "c.toml",
        &format!("{SMOKE}\n[regularizer]\npreset = \"sal\"\n\n[sweep]\nvariable = \"sal_ratio\"\nvalues = [1, 10]\n"),
    );
    let out = dir.path().join("sw");
    let o = gendrop(&["sweep", "--config", s(&cfg), "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(out.join("sweep.csv")).unwrap();
    for line in csv.lines().skip(1) {
        let width: usize = line.rsplit(',').next().unwrap().parse().unwrap();
        assert!((1..=12).contains(&width));
    }
}

#[test]
fn shipped_configs_parse() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut n = 0;
    for entry in fs::read_dir(&root).unwrap() {
        let p = entry.unwrap().path();
        if p.extension().is_some_and(|e| e == "toml") {
            gendrop_cli::config::ExperimentConfig::load(&p).unwrap();
            n += 1;
        }
    }
    assert!(n >= 8);
}

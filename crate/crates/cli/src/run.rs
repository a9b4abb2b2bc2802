//! Subcommand drivers. Each writes its outputs under an output directory and
//! is deterministic in config and seed.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};

use gendrop::arch_select::{auto_thresholds, fold_gates, prune, PruneReport};
use gendrop::checkpoint;
use gendrop::data::{load_idx, subset, synthetic_blobs, Dataset};
use gendrop::gates::{write_gates_csv, GateGranularity};
use gendrop::network::{LayerKind, Network};
use gendrop::regularizers::Preset;
use gendrop::train::{evaluate, format_metrics_header, format_metrics_row, train_with, write_metrics_csv, MetricsRow};

use crate::config::{DataConfig, ExperimentConfig, NetworkConfig, SweepValue, SweepVariable, Thresholds};

pub const METRICS_FILE: &str = "metrics.csv";
pub const GATES_FILE: &str = "gates.csv";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const RESOLVED_CONFIG_FILE: &str = "config.toml";
pub const SWEEP_FILE: &str = "sweep.csv";
pub const REPORT_FILE: &str = "report.txt";
pub const HISTOGRAM_FILE: &str = "histogram.csv";
pub const PRUNED_FILE: &str = "pruned.ckpt";
pub const FOLDED_FILE: &str = "folded.ckpt";

fn create(path: &Path) -> anyhow::Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

/// Loads the train and test sets. Relative MNIST paths resolve against `base`.
pub fn load_data(data: &DataConfig, base: &Path) -> anyhow::Result<(Dataset, Dataset)> {
    match data {
        DataConfig::Blobs {
            n_train,
            n_test,
            classes,
            dim,
            separation,
            data_seed,
        } => Ok((
            synthetic_blobs(*n_train, *classes, *dim, *separation, *data_seed)?,
            synthetic_blobs(*n_test, *classes, *dim, *separation, data_seed + 1)?,
        )),
        DataConfig::Mnist {
            dir,
            subset: n,
            subset_seed,
        } => {
            let dir = base.join(dir);
            let train = load_idx(dir.join("train-images-idx3-ubyte"), dir.join("train-labels-idx1-ubyte"))?;
            let test = load_idx(dir.join("t10k-images-idx3-ubyte"), dir.join("t10k-labels-idx1-ubyte"))?;
            let train = match n {
                Some(n) => subset(&train, *n, *subset_seed)?,
                None => train,
            };
            Ok((train, test))
        }
    }
}

pub struct TrainOutcome {
    pub net: Network,
    pub history: Vec<MetricsRow>,
}

/// Trains per `cfg` with `seed` and writes metrics, gates, checkpoint and
/// the resolved config into `out`.
pub fn run_train(
    cfg: &ExperimentConfig,
    base: &Path,
    seed: u64,
    out: &Path,
    log: &mut dyn Write,
) -> anyhow::Result<TrainOutcome> {
    cfg.validate()?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let (train_set, test_set) = load_data(&cfg.data, base)?;
    let spec = cfg.network_spec(train_set.example_shape(), train_set.num_classes)?;
    let mut net = Network::build(&spec, seed)?;
    let tc = cfg.train_config(seed);

    let mut resolved = cfg.clone();
    resolved.seed = seed;
    fs::write(out.join(RESOLVED_CONFIG_FILE), toml::to_string(&resolved)?)?;

    writeln!(log, "{} on {}: {} parameters", spec.architecture(), train_set.name, net.param_count())?;
    let mut printed_header = false;
    let mut log_err = None;
    let history = train_with(&mut net, &train_set, &test_set, &tc, |row| {
        let mut line = String::new();
        if !printed_header {
            line.push_str(&format_metrics_header(row));
            line.push('\n');
            printed_header = true;
        }
        line.push_str(&format_metrics_row(row));
        if let Err(e) = writeln!(log, "{line}") {
            log_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = log_err {
        return Err(e.into());
    }

    write_metrics_csv(create(&out.join(METRICS_FILE))?, &history)?;
    write_gates_csv(create(&out.join(GATES_FILE))?, &net.gate_sites())?;
    checkpoint::save(&net, out.join(CHECKPOINT_FILE))?;
    Ok(TrainOutcome { net, history })
}

fn layer_index(net: &NetworkConfig, layer: &str) -> anyhow::Result<usize> {
    let names: Vec<String> = match net {
        NetworkConfig::Mlp { hidden, .. } => (1..=hidden.len()).map(|i| format!("fc{i}")).collect(),
        NetworkConfig::Lenet { .. } => vec!["conv1".into(), "conv2".into(), "fc1".into()],
        NetworkConfig::Custom { layers, .. } => {
            let (mut conv, mut fc) = (0, 0);
            layers
                .iter()
                .map(|l| match l.kind {
                    LayerKind::Conv5 => {
                        conv += 1;
                        format!("conv{conv}")
                    }
                    LayerKind::Dense => {
                        fc += 1;
                        format!("fc{fc}")
                    }
                    LayerKind::DenseOutput => "output".into(),
                })
                .collect()
        }
    };
    names
        .iter()
        .position(|n| n == layer && n != "output")
        .with_context(|| format!("sweep.layer: no hidden layer `{layer}` (have {})", names.join(", ")))
}

/// Returns `cfg` with the swept variable set to `value`.
pub fn apply_sweep_value(
    cfg: &ExperimentConfig,
    variable: SweepVariable,
    layer: Option<&str>,
    value: &SweepValue,
) -> anyhow::Result<ExperimentConfig> {
    let mut c = cfg.clone();
    c.sweep = None;
    let num = || match value {
        SweepValue::Number(v) => Ok(*v),
        SweepValue::Name(n) => bail!("sweep value `{n}` is not a number"),
    };
    let count = || -> anyhow::Result<usize> {
        let v = num()?;
        if v < 1.0 || v.fract() != 0.0 {
            bail!("sweep value {v} is not a positive integer");
        }
        Ok(v as usize)
    };
    match variable {
        SweepVariable::DataSize => match &mut c.data {
            DataConfig::Blobs { n_train, .. } => *n_train = count()?,
            DataConfig::Mnist { subset, .. } => *subset = Some(count()?),
        },
        SweepVariable::LayerWidth => {
            let idx = layer_index(&c.network, layer.unwrap_or("fc1"))?;
            let w = count()?;
            match &mut c.network {
                NetworkConfig::Mlp { hidden, .. } => hidden[idx] = w,
                NetworkConfig::Lenet { widths, .. } => widths[idx] = w,
                NetworkConfig::Custom { layers, .. } => layers[idx].width = w,
            }
        }
        SweepVariable::GateInit => {
            let v = num()?;
            match &mut c.network {
                NetworkConfig::Mlp { gate_init, .. } | NetworkConfig::Lenet { gate_init, .. } => {
                    *gate_init = Some(v)
                }
                NetworkConfig::Custom {
                    input_gate, layers, ..
                } => {
                    for g in input_gate.iter_mut().chain(layers.iter_mut().filter_map(|l| l.gate.as_mut())) {
                        g.init = v;
                    }
                }
            }
        }
        SweepVariable::SalRatio => {
            if c.regularizer.preset.is_some_and(|p| p != Preset::Sal) {
                bail!("sal_ratio sweeps need regularizer.preset = \"sal\"");
            }
            c.regularizer.preset = Some(Preset::Sal);
            c.regularizer.strength = Some(num()?);
        }
        SweepVariable::Preset => {
            let SweepValue::Name(n) = value else {
                bail!("preset sweeps take preset names");
            };
            c.regularizer.preset = Some(n.parse()?);
        }
    }
    c.validate()?;
    Ok(c)
}

pub struct SweepRow {
    pub value: SweepValue,
    pub seed: u64,
    pub train_error: f64,
    pub test_error: f64,
    pub mean_gates: Vec<(String, f64)>,
    /// Total surviving hidden width after auto-thresholding (sal runs only).
    pub surviving_width: Option<usize>,
}

/// One training run per sweep value, in `out/run_<i>`, with seed `seed + i`.
/// Aggregates into `out/sweep.csv`.
pub fn run_sweep(
    cfg: &ExperimentConfig,
    base: &Path,
    seed: u64,
    out: &Path,
    log: &mut dyn Write,
) -> anyhow::Result<Vec<SweepRow>> {
    let Some(sweep) = &cfg.sweep else {
        bail!("config has no [sweep] section");
    };
    if sweep.values.is_empty() {
        bail!("sweep.values is empty");
    }
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut rows = Vec::with_capacity(sweep.values.len());
    for (i, value) in sweep.values.iter().enumerate() {
        let run_cfg = apply_sweep_value(cfg, sweep.variable, sweep.layer.as_deref(), value)
            .with_context(|| format!("sweep value {value}"))?;
        let run_seed = seed + i as u64;
        writeln!(log, "== run {i}: {:?} = {value}, seed {run_seed}", sweep.variable)?;
        let outcome = run_train(&run_cfg, base, run_seed, &out.join(format!("run_{i}")), log)?;
        let last = outcome.history.last().context("training produced no epochs")?;
        let surviving_width = if run_cfg.regularizer.is_sal() {
            let th = auto_thresholds(&outcome.net)?;
            Some(prune(&outcome.net, &th)?.1.surviving_hidden_width())
        } else {
            None
        };
        rows.push(SweepRow {
            value: value.clone(),
            seed: run_seed,
            train_error: last.train_error,
            test_error: last.test_error,
            mean_gates: last.mean_gates.clone(),
            surviving_width,
        });
    }
    write_sweep_csv(create(&out.join(SWEEP_FILE))?, sweep.variable, &rows)?;
    Ok(rows)
}

pub fn write_sweep_csv<W: Write>(writer: W, variable: SweepVariable, rows: &[SweepRow]) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let sites: Vec<String> = rows
        .first()
        .map(|r| r.mean_gates.iter().map(|(s, _)| s.clone()).collect())
        .unwrap_or_default();
    let mut header = vec![
        "run".to_string(),
        "variable".into(),
        "value".into(),
        "seed".into(),
        "final_train_error".into(),
        "final_test_error".into(),
    ];
    header.extend(sites.iter().map(|s| format!("mean_gate_{s}")));
    header.push("surviving_width".into());
    w.write_record(&header)?;
    let variable = toml::Value::try_from(variable)?
        .as_str()
        .unwrap_or_default()
        .to_string();
    for (i, r) in rows.iter().enumerate() {
        let mut rec = vec![
            i.to_string(),
            variable.clone(),
            r.value.to_string(),
            r.seed.to_string(),
            r.train_error.to_string(),
            r.test_error.to_string(),
        ];
        for site in &sites {
            let v = r.mean_gates.iter().find(|(s, _)| s == site).map(|(_, v)| v.to_string());
            rec.push(v.unwrap_or_default());
        }
        rec.push(r.surviving_width.map(|w| w.to_string()).unwrap_or_default());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Parses `"auto"` or `"fc1=0.5,conv1=0.2"`.
pub fn parse_thresholds(s: &str) -> anyhow::Result<Thresholds> {
    if s.trim() == "auto" {
        return Ok(Thresholds::default());
    }
    let mut map = BTreeMap::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let (layer, t) = part
            .split_once('=')
            .with_context(|| format!("threshold `{part}` is not of the form layer=value"))?;
        let t: f64 = t.trim().parse().with_context(|| format!("threshold for `{layer}`"))?;
        map.insert(layer.trim().to_string(), t);
    }
    if map.is_empty() {
        bail!("no thresholds given");
    }
    Ok(Thresholds::PerLayer(map))
}

pub struct PruneOutcome {
    pub pruned: Network,
    pub report: PruneReport,
}

/// Prunes a checkpoint. With `data`, the report includes test errors before
/// and after pruning.
pub fn run_prune(
    checkpoint_path: &Path,
    thresholds: &Thresholds,
    fold: bool,
    data: Option<&Dataset>,
    out: &Path,
) -> anyhow::Result<PruneOutcome> {
    let net = checkpoint::load(checkpoint_path)?;
    let prunable = net
        .gate_sites()
        .iter()
        .any(|g| matches!(g.granularity, GateGranularity::PerUnit | GateGranularity::PerChannel));
    if !prunable {
        bail!(
            "{} has no per-unit or per-channel gates to prune",
            checkpoint_path.display()
        );
    }
    let th = match thresholds {
        Thresholds::Auto(_) => auto_thresholds(&net)?,
        Thresholds::PerLayer(map) => map.clone(),
    };
    let (pruned, mut report) = prune(&net, &th)?;
    if let Some(test) = data {
        report.error_before = Some(evaluate(&net, test)?);
        report.error_after = Some(evaluate(&pruned, test)?);
    }
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    fs::write(out.join(REPORT_FILE), report.to_table())?;
    report.write_histogram_csv(create(&out.join(HISTOGRAM_FILE))?)?;
    checkpoint::save(&pruned, out.join(PRUNED_FILE))?;
    if fold {
        checkpoint::save(&fold_gates(&pruned)?, out.join(FOLDED_FILE))?;
    }
    Ok(PruneOutcome { pruned, report })
}

/// Writes the gates of a checkpoint as CSV.
pub fn run_gate_dump(checkpoint_path: &Path, writer: &mut dyn Write) -> anyhow::Result<()> {
    let net = checkpoint::load(checkpoint_path)?;
    write_gates_csv(writer, &net.gate_sites())?;
    Ok(())
}

/// Directory that relative paths in a config file resolve against.
pub fn config_base(config_path: &Path) -> PathBuf {
    config_path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .map_or_else(|| PathBuf::from("."), Path::to_path_buf)
}

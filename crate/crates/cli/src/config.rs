//! Experiment configuration files (TOML).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};

use gendrop::gates::{GateGranularity, GateMode};
use gendrop::network::{GateSpec, InputShape, LayerSpec, NetworkSpec};
use gendrop::regularizers::{default_sal_s, ALConfig, GDConfig, Preset, Regularizer, DEFAULT_EPS};
use gendrop::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    pub data: DataConfig,
    pub network: NetworkConfig,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub regularizer: RegularizerConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prune: Option<PruneConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataConfig {
    /// Gaussian blobs; the test set is drawn with `data_seed + 1`.
    Blobs {
        n_train: usize,
        n_test: usize,
        classes: usize,
        dim: usize,
        separation: f64,
        #[serde(default)]
        data_seed: u64,
    },
    /// IDX files `train-images-idx3-ubyte`, `train-labels-idx1-ubyte`,
    /// `t10k-images-idx3-ubyte`, `t10k-labels-idx1-ubyte` in `dir`
    /// (relative paths resolve against the config file's directory).
    Mnist {
        dir: PathBuf,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        subset: Option<usize>,
        #[serde(default)]
        subset_seed: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum NetworkConfig {
    /// Dense layers on flattened input. `gate` applies to every hidden layer.
    Mlp {
        hidden: Vec<usize>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        gate: Option<GateGranularity>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        gate_init: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        input_gate_init: Option<f64>,
    },
    /// conv5-conv5-dense on image input; `gate` is the conv granularity,
    /// the dense layer is always gated per unit.
    Lenet {
        widths: [usize; 3],
        #[serde(default, skip_serializing_if = "Option::is_none")]
        gate: Option<GateGranularity>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        gate_init: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        input_gate_init: Option<f64>,
    },
    /// A full network spec; the output layer must match the data's classes.
    Custom {
        input: InputShape,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        input_gate: Option<GateSpec>,
        layers: Vec<LayerSpec>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub learning_rate: f64,
    pub momentum: f64,
    pub gate_lr_multiplier: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub mask_mode: GateMode,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        Self {
            learning_rate: d.learning_rate,
            momentum: d.momentum,
            gate_lr_multiplier: d.gate_lr_multiplier,
            epochs: d.epochs,
            batch_size: d.batch_size,
            weight_decay: d.weight_decay,
            mask_mode: d.mask_mode,
        }
    }
}

/// One of: a named preset (with `strength`, and for `sal` optionally `s`),
/// explicit `alpha`/`beta`, or `lambda1`/`lambda3` for the Architecture
/// Learning penalty. Empty means `dropout_pp_flat`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegularizerConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub preset: Option<Preset>,
    /// Preset strength; for `sal` this is the ratio β/α. Defaults to 1.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub strength: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub s: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scale: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda3: Option<f64>,
}

impl RegularizerConfig {
    pub fn resolve(&self) -> anyhow::Result<Regularizer> {
        let beta_form = self.alpha.is_some() || self.beta.is_some();
        let al_form = self.lambda1.is_some() || self.lambda3.is_some();
        let forms = [self.preset.is_some(), beta_form, al_form];
        if forms.iter().filter(|&&f| f).count() > 1 {
            bail!("regularizer: give exactly one of `preset`, `alpha`/`beta`, `lambda1`/`lambda3`");
        }
        if al_form {
            if self.strength.is_some() || self.s.is_some() || self.scale.is_some() {
                bail!("regularizer: `strength`, `s` and `scale` do not apply to lambda1/lambda3");
            }
            let c = ALConfig {
                lambda1: self.lambda1.unwrap_or(0.0),
                lambda3: self.lambda3.unwrap_or(0.0),
            };
            c.validate()?;
            return Ok(Regularizer::ArchitectureLearning(c));
        }
        let scale = self.scale.unwrap_or(1.0);
        let gd = if beta_form {
            let (Some(alpha), Some(beta)) = (self.alpha, self.beta) else {
                bail!("regularizer: `alpha` and `beta` must be given together");
            };
            GDConfig::new(alpha, beta, scale, DEFAULT_EPS)?
        } else {
            let preset = self.preset.unwrap_or(Preset::DropoutPpFlat);
            let strength = self.strength.unwrap_or(1.0);
            let base = match (preset, self.s) {
                (Preset::Sal, Some(s)) => GDConfig::sal(strength, s)?,
                (Preset::Sal, None) => GDConfig::sal(strength, default_sal_s(strength))?,
                (_, Some(_)) => bail!("regularizer: `s` only applies to the sal preset"),
                (p, None) => p.config(strength)?,
            };
            base.with_scale(scale)
        };
        gd.validate()?;
        Ok(Regularizer::GeneralizedDropout(gd))
    }

    pub fn is_sal(&self) -> bool {
        self.preset == Some(Preset::Sal)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepVariable {
    DataSize,
    LayerWidth,
    GateInit,
    SalRatio,
    Preset,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SweepValue {
    Number(f64),
    Name(String),
}

impl std::fmt::Display for SweepValue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SweepValue::Number(v) => write!(f, "{v}"),
            SweepValue::Name(s) => f.write_str(s),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub variable: SweepVariable,
    pub values: Vec<SweepValue>,
    /// Layer whose width a `layer_width` sweep changes; defaults to `fc1`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layer: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Thresholds {
    /// Only the string "auto" is accepted.
    Auto(String),
    PerLayer(BTreeMap<String, f64>),
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds::Auto("auto".into())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PruneConfig {
    pub thresholds: Thresholds,
    /// Also write a copy with the surviving gates folded into the next layer.
    pub fold: bool,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> anyhow::Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("invalid config {}", path.display()))
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        self.regularizer.resolve()?;
        self.train_config(self.seed).validate()?;
        if let Some(s) = &self.sweep {
            if s.values.is_empty() {
                bail!("sweep.values is empty");
            }
            for v in &s.values {
                match (s.variable, v) {
                    (SweepVariable::Preset, SweepValue::Name(n)) => {
                        n.parse::<Preset>().context("sweep.values")?;
                    }
                    (SweepVariable::Preset, SweepValue::Number(_)) => {
                        bail!("sweep.values: preset sweeps take preset names")
                    }
                    (_, SweepValue::Name(n)) => {
                        bail!("sweep.values: `{n}` is not a number")
                    }
                    (_, SweepValue::Number(_)) => {}
                }
            }
        }
        if let Some(PruneConfig {
            thresholds: Thresholds::Auto(s),
            ..
        }) = &self.prune
        {
            if s != "auto" {
                bail!("prune.thresholds: expected \"auto\" or a table of layer thresholds, got `{s}`");
            }
        }
        Ok(())
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            learning_rate: t.learning_rate,
            momentum: t.momentum,
            gate_lr_multiplier: t.gate_lr_multiplier,
            epochs: t.epochs,
            batch_size: t.batch_size,
            seed,
            weight_decay: t.weight_decay,
            regularizer: self.regularizer.resolve().unwrap_or_default(),
            mask_mode: t.mask_mode,
        }
    }

    /// Default gate init: 0.5 under the sal preset, 1.0 otherwise.
    pub fn default_gate_init(&self) -> f64 {
        if self.regularizer.is_sal() {
            0.5
        } else {
            1.0
        }
    }

    /// Network spec for data with the given example shape and class count.
    pub fn network_spec(&self, example_shape: &[usize], classes: usize) -> anyhow::Result<NetworkSpec> {
        let init_default = self.default_gate_init();
        let input_gate = |init: Option<f64>| {
            init.map(|init| GateSpec {
                granularity: GateGranularity::PerActivation,
                init,
            })
        };
        let spec = match &self.network {
            NetworkConfig::Mlp {
                hidden,
                gate,
                gate_init,
                input_gate_init,
            } => {
                let flat = example_shape.iter().product();
                let mut spec = NetworkSpec::mlp(flat, hidden, classes);
                if let Some(g) = gate {
                    if *g != GateGranularity::PerUnit {
                        bail!("network.gate: dense layers take per_unit gates, got {g:?}");
                    }
                    spec = spec.gate_hidden(*g, gate_init.unwrap_or(init_default));
                }
                spec.input_gate = input_gate(*input_gate_init);
                spec
            }
            NetworkConfig::Lenet {
                widths,
                gate,
                gate_init,
                input_gate_init,
            } => {
                if example_shape.len() != 3 {
                    bail!("network.kind = \"lenet\" needs image data, got examples of shape {example_shape:?}");
                }
                let mut spec = NetworkSpec::lenet(widths[0], widths[1], widths[2], classes);
                spec.input = InputShape::Image {
                    channels: example_shape[0],
                    height: example_shape[1],
                    width: example_shape[2],
                };
                if let Some(g) = gate {
                    spec = spec.gate_hidden(*g, gate_init.unwrap_or(init_default));
                }
                spec.input_gate = input_gate(*input_gate_init);
                spec
            }
            NetworkConfig::Custom {
                input,
                input_gate,
                layers,
            } => NetworkSpec {
                input: *input,
                input_gate: *input_gate,
                layers: layers.clone(),
            },
        };
        spec.plan()?;
        Ok(spec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MIN: &str = r#"
        [data]
        kind = "blobs"
        n_train = 100
        n_test = 50
        classes = 2
        dim = 2
        separation = 4.0

        [network]
        kind = "mlp"
        hidden = [8]
        gate = "per_unit"
    "#;

    #[test]
    fn minimal_config_defaults() {
        let cfg = ExperimentConfig::from_toml(MIN).unwrap();
        assert_eq!(cfg.train, TrainSection::default());
        assert_eq!(cfg.regularizer.resolve().unwrap(), Regularizer::default());
        let spec = cfg.network_spec(&[2], 2).unwrap();
        assert_eq!(spec.architecture(), "8-2");
        assert_eq!(spec.layers[0].gate.unwrap().init, 1.0);
    }

    #[test]
    fn unknown_preset_names_the_field() {
        let text = format!("{MIN}\n[regularizer]\npreset = \"dropout_pp_sideways\"\n");
        let err = format!("{:#}", ExperimentConfig::from_toml(&text).unwrap_err());
        assert!(err.contains("preset"), "{err}");
        assert!(err.contains("dropout_pp_sideways"), "{err}");
    }

    #[test]
    fn regularizer_forms() {
        let r = RegularizerConfig {
            preset: Some(Preset::Sal),
            strength: Some(10.0),
            ..Default::default()
        };
        assert_eq!(
            r.resolve().unwrap(),
            Regularizer::GeneralizedDropout(GDConfig::sal(10.0, 0.05).unwrap())
        );
        let r = RegularizerConfig {
            alpha: Some(2.0),
            ..Default::default()
        };
        assert!(r.resolve().is_err());
        let r = RegularizerConfig {
            preset: Some(Preset::DropoutPpOne),
            lambda1: Some(1.0),
            ..Default::default()
        };
        assert!(r.resolve().is_err());
        let r = RegularizerConfig {
            lambda1: Some(0.5),
            lambda3: Some(0.1),
            ..Default::default()
        };
        assert!(matches!(r.resolve().unwrap(), Regularizer::ArchitectureLearning(_)));
    }

    #[test]
    fn sweep_validation() {
        let empty = format!("{MIN}\n[sweep]\nvariable = \"gate_init\"\nvalues = []\n");
        assert!(ExperimentConfig::from_toml(&empty).is_err());
        let names = format!("{MIN}\n[sweep]\nvariable = \"preset\"\nvalues = [\"sal\", \"dropout_pp_zero\"]\n");
        assert!(ExperimentConfig::from_toml(&names).is_ok());
        let bad = format!("{MIN}\n[sweep]\nvariable = \"preset\"\nvalues = [\"nope\"]\n");
        assert!(ExperimentConfig::from_toml(&bad).is_err());
    }

    #[test]
    fn prune_thresholds_parse() {
        let auto = format!("{MIN}\n[prune]\nthresholds = \"auto\"\n");
        assert_eq!(ExperimentConfig::from_toml(&auto).unwrap().prune.unwrap().thresholds, Thresholds::default());
        let table = format!("{MIN}\n[prune.thresholds]\nfc1 = 0.5\n");
        let p = ExperimentConfig::from_toml(&table).unwrap().prune.unwrap();
        assert_eq!(p.thresholds, Thresholds::PerLayer(BTreeMap::from([("fc1".into(), 0.5)])));
        let bad = format!("{MIN}\n[prune]\nthresholds = \"sometimes\"\n");
        assert!(ExperimentConfig::from_toml(&bad).is_err());
    }

    #[test]
    fn serialized_config_round_trips() {
        let cfg = ExperimentConfig::from_toml(MIN).unwrap();
        let again = ExperimentConfig::from_toml(&toml::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(cfg, again);
    }
}

//! Priors over gate parameters.
//!
//! The Generalized Dropout penalty is the negative log of a beta(α, β) density
//! over `k` (without its normaliser):
//!
//! ```text
//! penalty(k) = scale · Σ_i [ −(α−1)·ln k_i − (β−1)·ln(1−k_i) ]
//! ```
//!
//! Presets are named by the direction they push `k`. The Architecture Learning
//! penalty `λ₁·k(1−k) + λ₃·k` is provided alongside for Heaviside training.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Clamp width for the log terms.
pub const DEFAULT_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GDConfig {
    pub alpha: f64,
    pub beta: f64,
    pub scale: f64,
    pub eps: f64,
}

impl GDConfig {
    pub fn new(alpha: f64, beta: f64, scale: f64, eps: f64) -> Result<Self> {
        let cfg = Self {
            alpha,
            beta,
            scale,
            eps,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.beta > 0.0) {
            return Err(Error::Config(format!(
                "alpha and beta must be positive, got alpha = {}, beta = {}",
                self.alpha, self.beta
            )));
        }
        if !(self.scale >= 0.0 && self.scale.is_finite()) {
            return Err(Error::Config(format!("scale must be >= 0, got {}", self.scale)));
        }
        if !(self.eps > 0.0 && self.eps < 0.5) {
            return Err(Error::Config(format!("eps must be in (0, 0.5), got {}", self.eps)));
        }
        Ok(())
    }

    pub fn flat() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
            scale: 1.0,
            eps: DEFAULT_EPS,
        }
    }

    /// Bimodal prior with `β/α = ratio`, `α = s`.
    pub fn sal(ratio: f64, s: f64) -> Result<Self> {
        if !(ratio > 0.0 && s > 0.0) {
            return Err(Error::Config(format!(
                "sal needs ratio > 0 and s > 0, got ratio = {ratio}, s = {s}"
            )));
        }
        let (alpha, beta) = (s, s * ratio);
        if alpha >= 1.0 || beta >= 1.0 {
            return Err(Error::Config(format!(
                "sal needs alpha, beta < 1, got alpha = {alpha}, beta = {beta}"
            )));
        }
        Self::new(alpha, beta, 1.0, DEFAULT_EPS)
    }

    pub fn with_scale(mut self, scale: f64) -> Self {
        self.scale = scale;
        self
    }

    fn clamp(&self, k: f64) -> f64 {
        k.clamp(self.eps, 1.0 - self.eps)
    }

    fn raw_grad(&self, k: f64) -> f64 {
        self.scale * (-(self.alpha - 1.0) / k + (self.beta - 1.0) / (1.0 - k))
    }
}

/// Default `s` for the sal preset: 0.05, shrunk for large ratios so β stays below 1.
pub fn default_sal_s(ratio: f64) -> f64 {
    0.05f64.min(0.5 / ratio)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// Mode at k = 0.5.
    DropoutPpHalf,
    /// Uniform prior, zero penalty.
    DropoutPpFlat,
    /// Pushes k toward 1.
    DropoutPpOne,
    /// Pushes k toward 0.
    DropoutPpZero,
    /// Bimodal, modes at 0 and 1.
    Sal,
}

impl Preset {
    pub const ALL: [Preset; 5] = [
        Preset::DropoutPpHalf,
        Preset::DropoutPpFlat,
        Preset::DropoutPpOne,
        Preset::DropoutPpZero,
        Preset::Sal,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Preset::DropoutPpHalf => "dropout_pp_half",
            Preset::DropoutPpFlat => "dropout_pp_flat",
            Preset::DropoutPpOne => "dropout_pp_one",
            Preset::DropoutPpZero => "dropout_pp_zero",
            Preset::Sal => "sal",
        }
    }

    /// Builds the config. For `sal`, `strength` is the ratio β/α and `s`
    /// follows [`default_sal_s`].
    pub fn config(self, strength: f64) -> Result<GDConfig> {
        if !(strength > 0.0 && strength.is_finite()) {
            return Err(Error::Config(format!(
                "preset {} needs strength > 0, got {strength}",
                self.name()
            )));
        }
        let (alpha, beta) = match self {
            Preset::DropoutPpHalf => (1.0 + strength, 1.0 + strength),
            Preset::DropoutPpFlat => (1.0, 1.0),
            Preset::DropoutPpOne => (1.0 + strength, 1.0),
            Preset::DropoutPpZero => (1.0, 1.0 + strength),
            Preset::Sal => return GDConfig::sal(strength, default_sal_s(strength)),
        };
        GDConfig::new(alpha, beta, 1.0, DEFAULT_EPS)
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown preset `{s}`")))
    }
}

/// `preset("dropout_pp_zero", 1.0)` etc.
pub fn preset(name: &str, strength: f64) -> Result<GDConfig> {
    name.parse::<Preset>()?.config(strength)
}

pub fn gd_penalty(k: &[f64], cfg: &GDConfig) -> f64 {
    let (a1, b1) = (cfg.alpha - 1.0, cfg.beta - 1.0);
    let sum: f64 = k
        .iter()
        .map(|&ki| {
            let kc = cfg.clamp(ki);
            -a1 * kc.ln() - b1 * (1.0 - kc).ln()
        })
        .sum();
    cfg.scale * sum
}

/// Gradient of [`gd_penalty`]. Outside `[eps, 1−eps]` the boundary gradient is
/// kept only when it points back into range.
pub fn gd_penalty_grad(k: &[f64], cfg: &GDConfig) -> Vec<f64> {
    k.iter()
        .map(|&ki| {
            if ki < cfg.eps {
                let g = cfg.raw_grad(cfg.eps);
                if g < 0.0 {
                    g
                } else {
                    0.0
                }
            } else if ki > 1.0 - cfg.eps {
                let g = cfg.raw_grad(1.0 - cfg.eps);
                if g > 0.0 {
                    g
                } else {
                    0.0
                }
            } else {
                cfg.raw_grad(ki)
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ALConfig {
    pub lambda1: f64,
    pub lambda3: f64,
}

impl ALConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda1 >= 0.0 && self.lambda3 >= 0.0) {
            return Err(Error::Config(format!(
                "lambda1 and lambda3 must be >= 0, got {} and {}",
                self.lambda1, self.lambda3
            )));
        }
        Ok(())
    }
}

/// `Σ λ₁·k(1−k) + λ₃·k` and its gradient.
pub fn al_penalty(k: &[f64], cfg: &ALConfig) -> (f64, Vec<f64>) {
    let value = k
        .iter()
        .map(|&ki| cfg.lambda1 * ki * (1.0 - ki) + cfg.lambda3 * ki)
        .sum();
    let grad = k
        .iter()
        .map(|&ki| cfg.lambda1 * (1.0 - 2.0 * ki) + cfg.lambda3)
        .collect();
    (value, grad)
}

/// Prior term attached to every gate during training.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Regularizer {
    GeneralizedDropout(GDConfig),
    ArchitectureLearning(ALConfig),
}

impl Regularizer {
    pub fn value(&self, k: &[f64]) -> f64 {
        match self {
            Regularizer::GeneralizedDropout(c) => gd_penalty(k, c),
            Regularizer::ArchitectureLearning(c) => al_penalty(k, c).0,
        }
    }

    pub fn grad(&self, k: &[f64]) -> Vec<f64> {
        match self {
            Regularizer::GeneralizedDropout(c) => gd_penalty_grad(k, c),
            Regularizer::ArchitectureLearning(c) => al_penalty(k, c).1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Regularizer::GeneralizedDropout(c) => c.validate(),
            Regularizer::ArchitectureLearning(c) => c.validate(),
        }
    }
}

impl Default for Regularizer {
    fn default() -> Self {
        Regularizer::GeneralizedDropout(GDConfig::flat())
    }
}

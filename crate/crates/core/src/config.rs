//! Training configuration and its plain `key=value` text form.
//!
//! Every key maps to one [`TrainConfig`] field; unknown keys are errors. The
//! same text form is echoed into checkpoints, so [`TrainConfig::to_kv`] is
//! canonical: parsing it back yields an identical configuration.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::loss_network::{LossLayers, LossWeights, Pooling};
use crate::network::{NetworkWidths, ScalePlan};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CropMode {
    #[default]
    Center,
    Random,
}

/// What the content term of level `k` compares `ŷ_k` against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ContentTarget {
    /// The (detached) image fed to subnet `k`.
    #[default]
    SubnetInput,
    /// The original input resized to level `k`'s scale.
    ScaledInput,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LossNetworkChoice {
    /// VGG-19 when `loss_weights` is set, otherwise the built-in tiny network.
    #[default]
    Auto,
    Vgg19,
    Tiny,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub iterations: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_decay: f64,
    pub lr_step: u64,
    pub alpha: f64,
    pub beta: f64,
    pub lambdas: Vec<f64>,
    pub content_layer: String,
    pub texture_layers: Vec<String>,
    train_scales: Option<Vec<usize>>,
    style_scales: Option<Vec<usize>>,
    /// Style image index per level.
    pub style_levels: Vec<usize>,
    pub seed: u64,
    /// Width and scale divisor; 1 is the full-size model.
    pub tiny: usize,
    pub min_dim: u32,
    pub crop: CropMode,
    pub content_target: ContentTarget,
    pub pooling: Pooling,
    pub loss_network: LossNetworkChoice,
    pub loss_weights: Option<String>,
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 10_000,
            batch_size: 1,
            lr: 1e-3,
            lr_decay: 0.8,
            lr_step: 2000,
            alpha: 1.0,
            beta: 10.0,
            lambdas: vec![1.0, 0.5, 0.25],
            content_layer: "relu4_2".into(),
            texture_layers: ["relu1_1", "relu2_1", "relu3_1", "relu4_1"].map(String::from).to_vec(),
            train_scales: None,
            style_scales: None,
            style_levels: vec![0, 0, 0],
            seed: 0,
            tiny: 1,
            min_dim: 480,
            crop: CropMode::Center,
            content_target: ContentTarget::SubnetInput,
            pooling: Pooling::Max,
            loss_network: LossNetworkChoice::Auto,
            loss_weights: None,
            checkpoint_every: 1000,
        }
    }
}

fn list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(|s| s.trim().parse().map_err(|_| Error::Config(format!("{key}: cannot parse {s:?}"))))
        .collect()
}

fn scalar<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.trim().parse().map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

/// Parses `key=value` lines; `#` starts a comment, blank lines are skipped.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got {raw:?}", i + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

impl TrainConfig {
    /// Small-model preset: widths and scales divided by `divisor`.
    pub fn tiny(divisor: usize) -> Self {
        TrainConfig { tiny: divisor, ..Self::default() }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "iterations" => self.iterations = scalar(key, value)?,
            "batch_size" => self.batch_size = scalar(key, value)?,
            "lr" => self.lr = scalar(key, value)?,
            "lr_decay" => self.lr_decay = scalar(key, value)?,
            "lr_step" => self.lr_step = scalar(key, value)?,
            "alpha" => self.alpha = scalar(key, value)?,
            "beta" => self.beta = scalar(key, value)?,
            "lambdas" => self.lambdas = list(key, value)?,
            "content_layer" => self.content_layer = value.trim().to_string(),
            "texture_layers" => self.texture_layers = list(key, value)?,
            "train_scales" => self.train_scales = Some(list(key, value)?),
            "style_scales" => self.style_scales = Some(list(key, value)?),
            "style_levels" => self.style_levels = list(key, value)?,
            "seed" => self.seed = scalar(key, value)?,
            "tiny" => self.tiny = scalar(key, value)?,
            "min_dim" => self.min_dim = scalar(key, value)?,
            "crop" => {
                self.crop = match value {
                    "center" => CropMode::Center,
                    "random" => CropMode::Random,
                    _ => return Err(Error::Config(format!("crop: expected center|random, got {value:?}"))),
                }
            }
            "content_target" => {
                self.content_target = match value {
                    "subnet_input" => ContentTarget::SubnetInput,
                    "scaled_input" => ContentTarget::ScaledInput,
                    _ => {
                        return Err(Error::Config(format!(
                            "content_target: expected subnet_input|scaled_input, got {value:?}"
                        )))
                    }
                }
            }
            "pooling" => {
                self.pooling = match value {
                    "max" => Pooling::Max,
                    "avg" => Pooling::Average,
                    _ => return Err(Error::Config(format!("pooling: expected max|avg, got {value:?}"))),
                }
            }
            "loss_network" => {
                self.loss_network = match value {
                    "auto" => LossNetworkChoice::Auto,
                    "vgg19" => LossNetworkChoice::Vgg19,
                    "tiny" => LossNetworkChoice::Tiny,
                    _ => return Err(Error::Config(format!("loss_network: expected auto|vgg19|tiny, got {value:?}"))),
                }
            }
            "loss_weights" => self.loss_weights = if value.is_empty() { None } else { Some(value.to_string()) },
            "checkpoint_every" => self.checkpoint_every = scalar(key, value)?,
            other => return Err(Error::Config(format!("unknown configuration key {other:?}"))),
        }
        Ok(())
    }

    pub fn apply_kv(&mut self, text: &str) -> Result<()> {
        for (k, v) in parse_kv(text)? {
            self.set(&k, &v)?;
        }
        Ok(())
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_kv(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Canonical `key=value` lines, one per field, fixed order.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let mut line = |k: &str, v: String| {
            let _ = writeln!(s, "{k}={v}");
        };
        line("iterations", self.iterations.to_string());
        line("batch_size", self.batch_size.to_string());
        line("lr", self.lr.to_string());
        line("lr_decay", self.lr_decay.to_string());
        line("lr_step", self.lr_step.to_string());
        line("alpha", self.alpha.to_string());
        line("beta", self.beta.to_string());
        line("lambdas", join(&self.lambdas));
        line("content_layer", self.content_layer.clone());
        line("texture_layers", self.texture_layers.join(","));
        line("train_scales", join(&self.train_scales()));
        line("style_scales", join(&self.style_scales()));
        line("style_levels", join(&self.style_levels));
        line("seed", self.seed.to_string());
        line("tiny", self.tiny.to_string());
        line("min_dim", self.min_dim.to_string());
        line("crop", match self.crop {
            CropMode::Center => "center",
            CropMode::Random => "random",
        }
        .into());
        line("content_target", match self.content_target {
            ContentTarget::SubnetInput => "subnet_input",
            ContentTarget::ScaledInput => "scaled_input",
        }
        .into());
        line("pooling", match self.pooling {
            Pooling::Max => "max",
            Pooling::Average => "avg",
        }
        .into());
        line("loss_network", match self.loss_network {
            LossNetworkChoice::Auto => "auto",
            LossNetworkChoice::Vgg19 => "vgg19",
            LossNetworkChoice::Tiny => "tiny",
        }
        .into());
        line("loss_weights", self.loss_weights.clone().unwrap_or_default());
        line("checkpoint_every", self.checkpoint_every.to_string());
        s
    }

    /// Explicit scales, or `(256, 512, 512)` divided by the tiny divisor.
    pub fn train_scales(&self) -> Vec<usize> {
        self.train_scales.clone().unwrap_or_else(|| ScalePlan::train(self.tiny.max(1)).levels.iter().map(|l| l.output).collect())
    }

    pub fn style_scales(&self) -> Vec<usize> {
        self.style_scales.clone().unwrap_or_else(|| self.train_scales())
    }

    pub fn set_train_scales(&mut self, scales: Vec<usize>) {
        self.train_scales = Some(scales);
    }

    pub fn set_style_scales(&mut self, scales: Vec<usize>) {
        self.style_scales = Some(scales);
    }

    pub fn widths(&self) -> Result<NetworkWidths> {
        NetworkWidths::divided(self.tiny)
    }

    pub fn plan(&self) -> Result<ScalePlan> {
        let scales = self.train_scales();
        let mut plan = ScalePlan::train(1);
        if scales.len() != plan.levels.len() {
            return Err(Error::Config(format!("train_scales needs {} entries", plan.levels.len())));
        }
        for (l, &s) in plan.levels.iter_mut().zip(&scales) {
            l.input = s;
            l.output = s;
        }
        let plan = plan.with_style_scales(&self.style_scales())?;
        plan.validate()?;
        Ok(plan)
    }

    pub fn loss_weights(&self) -> Result<LossWeights> {
        LossWeights::new(self.alpha, self.beta, self.lambdas.clone())
    }

    pub fn loss_layers(&self) -> LossLayers {
        LossLayers { content: self.content_layer.clone(), texture: self.texture_layers.clone() }
    }

    /// Learning rate after `iteration` steps: `lr · decay^⌊iteration/step⌋`.
    pub fn lr_at(&self, iteration: u64) -> f64 {
        let k = (iteration / self.lr_step.max(1)) as i32;
        self.lr / (1.0 / self.lr_decay).powi(k)
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::Config(format!("lr_decay must be in (0, 1], got {}", self.lr_decay)));
        }
        if self.lr_step == 0 {
            return Err(Error::Config("lr_step must be positive".into()));
        }
        if self.lambdas.len() != 3 {
            return Err(Error::Config(format!("lambdas needs 3 entries, got {}", self.lambdas.len())));
        }
        if self.style_levels.len() != 3 {
            return Err(Error::Config(format!("style_levels needs 3 entries, got {}", self.style_levels.len())));
        }
        if self.texture_layers.is_empty() {
            return Err(Error::Config("texture_layers may not be empty".into()));
        }
        self.loss_weights()?;
        self.widths()?;
        self.plan()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_echo_round_trip() {
        let c = TrainConfig::default();
        c.validate().unwrap();
        let text = c.to_kv();
        let back = TrainConfig::from_kv(&text).unwrap();
        assert_eq!(back.to_kv(), text);
    }

    #[test]
    fn comments_and_unknown_keys() {
        let c = TrainConfig::from_kv("# header\nbeta = 4 # per style\n\nlambdas=1,0.5,0.25\n").unwrap();
        assert_eq!(c.beta, 4.0);
        assert_eq!(c.lambdas, vec![1.0, 0.5, 0.25]);
        assert!(matches!(TrainConfig::from_kv("betta=3"), Err(Error::Config(_))));
        assert!(TrainConfig::from_kv("novalue").is_err());
        assert!(TrainConfig::from_kv("iterations=0").is_err());
    }

    #[test]
    fn tiny_scales() {
        let c = TrainConfig::tiny(8);
        assert_eq!(c.train_scales(), vec![32, 64, 64]);
        assert_eq!(c.style_scales(), vec![32, 64, 64]);
        assert_eq!(c.widths().unwrap().divisor, 8);
    }

    #[test]
    fn schedule_breakpoints() {
        let c = TrainConfig::default();
        assert_eq!(c.lr_at(0), 1e-3);
        assert_eq!(c.lr_at(1999), 1e-3);
        assert_eq!(c.lr_at(2000), 8e-4);
        assert_eq!(c.lr_at(9999), 4.096e-4);
    }
}

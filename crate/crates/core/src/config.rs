//! Run configuration: a flat `key = value` text format with one section
//! per subsystem. Unknown keys are rejected with their line number, and
//! the canonical printed form feeds the config hash recorded in
//! checkpoints and provenance files.

use std::fs;
use std::path::Path;

use image::imageops::FilterType;
use sha2::{Digest, Sha256};

use crate::classifier::ClassifierConfig;
use crate::data::parse_filter;
use crate::error::{Error, Result};
use crate::losses::{LossWeights, ReconNorm};
use crate::networks::NetConfig;
use crate::nn::Activation;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    // [data]
    pub resolution: usize,
    pub channels: usize,
    pub resize_filter: String,
    // [networks]
    pub style_dim: usize,
    pub base_channels: usize,
    pub activation: String,
    // [losses]
    pub lambda_style: f64,
    pub lambda_cls: f64,
    pub lambda_cycle: f64,
    pub recon_norm: String,
    // [trainer]
    pub steps: u64,
    pub batch_size: usize,
    pub lr_g: f64,
    pub lr_d: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub seed: u64,
    pub checkpoint_interval: u64,
    pub log_interval: u64,
    // [fid]
    pub fid_bootstrap: usize,
    pub fid_subset: usize,
    pub fid_bins: usize,
    // [pad]
    pub pad_steps: u64,
    pub pad_batch_size: usize,
    pub pad_lr: f64,
    pub pad_base_channels: usize,
    pub pad_hidden: usize,
    /// 0 selects the per-domain maximum automatically.
    pub exp4_target: usize,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            resolution: 32,
            channels: 1,
            resize_filter: "bilinear".into(),
            style_dim: 16,
            base_channels: 16,
            activation: "silu".into(),
            lambda_style: 1.0,
            lambda_cls: 1.0,
            lambda_cycle: 1.0,
            recon_norm: "l1".into(),
            steps: 3000,
            batch_size: 8,
            lr_g: 1e-4,
            lr_d: 1e-4,
            beta1: 0.5,
            beta2: 0.999,
            seed: 0,
            checkpoint_interval: 1000,
            log_interval: 10,
            fid_bootstrap: 20,
            fid_subset: 50,
            fid_bins: 20,
            pad_steps: 600,
            pad_batch_size: 16,
            pad_lr: 1e-3,
            pad_base_channels: 8,
            pad_hidden: 64,
            exp4_target: 0,
        }
    }
}

macro_rules! config_keys {
    ($self:ident, $with:ident) => {
        $with!("data", "resolution", $self.resolution, usize);
        $with!("data", "channels", $self.channels, usize);
        $with!("data", "resize_filter", $self.resize_filter, string);
        $with!("networks", "style_dim", $self.style_dim, usize);
        $with!("networks", "base_channels", $self.base_channels, usize);
        $with!("networks", "activation", $self.activation, string);
        $with!("losses", "lambda_style", $self.lambda_style, f64);
        $with!("losses", "lambda_cls", $self.lambda_cls, f64);
        $with!("losses", "lambda_cycle", $self.lambda_cycle, f64);
        $with!("losses", "recon_norm", $self.recon_norm, string);
        $with!("trainer", "steps", $self.steps, u64);
        $with!("trainer", "batch_size", $self.batch_size, usize);
        $with!("trainer", "lr_g", $self.lr_g, f64);
        $with!("trainer", "lr_d", $self.lr_d, f64);
        $with!("trainer", "beta1", $self.beta1, f64);
        $with!("trainer", "beta2", $self.beta2, f64);
        $with!("trainer", "seed", $self.seed, u64);
        $with!("trainer", "checkpoint_interval", $self.checkpoint_interval, u64);
        $with!("trainer", "log_interval", $self.log_interval, u64);
        $with!("fid", "bootstrap", $self.fid_bootstrap, usize);
        $with!("fid", "subset_size", $self.fid_subset, usize);
        $with!("fid", "bins", $self.fid_bins, usize);
        $with!("pad", "steps", $self.pad_steps, u64);
        $with!("pad", "batch_size", $self.pad_batch_size, usize);
        $with!("pad", "lr", $self.pad_lr, f64);
        $with!("pad", "base_channels", $self.pad_base_channels, usize);
        $with!("pad", "hidden", $self.pad_hidden, usize);
        $with!("pad", "exp4_target", $self.exp4_target, usize);
    };
}

impl Config {
    /// Parse overrides on top of the defaults.
    pub fn parse(text: &str) -> Result<Config> {
        let mut cfg = Config::default();
        let mut section = String::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let l = raw.trim();
            if l.is_empty() || l.starts_with('#') {
                continue;
            }
            if let Some(name) = l.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
                section = name.trim().to_string();
                if !["data", "networks", "losses", "trainer", "fid", "pad"].contains(&section.as_str())
                {
                    return Err(Error::UnknownConfigKey {
                        key: format!("[{section}]"),
                        line,
                    });
                }
                continue;
            }
            let (key, value) = l.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {line}: expected `key = value`, got `{l}`"))
            })?;
            let key = key.trim();
            let value = value.trim();
            if section.is_empty() {
                return Err(Error::Config(format!(
                    "line {line}: key `{key}` appears before any [section] header"
                )));
            }
            cfg.set(&section, key, value, line)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Config> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Config::parse(&text)
    }

    fn set(&mut self, section: &str, key: &str, value: &str, line: usize) -> Result<()> {
        fn parse_val<T: std::str::FromStr>(value: &str, line: usize, key: &str) -> Result<T> {
            value.parse().map_err(|_| {
                Error::Config(format!("line {line}: bad value `{value}` for key `{key}`"))
            })
        }
        macro_rules! setter {
            ($sec:literal, $name:literal, $field:expr, string) => {
                if section == $sec && key == $name {
                    $field = value.to_string();
                    return Ok(());
                }
            };
            ($sec:literal, $name:literal, $field:expr, $ty:ty) => {
                if section == $sec && key == $name {
                    $field = parse_val::<$ty>(value, line, key)?;
                    return Ok(());
                }
            };
        }
        config_keys!(self, setter);
        Err(Error::UnknownConfigKey {
            key: format!("{section}.{key}"),
            line,
        })
    }

    /// Canonical printed form; also what `--print-defaults` emits.
    pub fn print(&self) -> String {
        let mut out = String::new();
        let mut current = "";
        macro_rules! printer {
            ($sec:literal, $name:literal, $field:expr, $_ty:tt) => {
                if current != $sec {
                    if !out.is_empty() {
                        out.push('\n');
                    }
                    out.push_str(&format!("[{}]\n", $sec));
                    #[allow(unused_assignments)]
                    {
                        current = $sec;
                    }
                }
                out.push_str(&format!("{} = {}\n", $name, $field));
            };
        }
        config_keys!(self, printer);
        out
    }

    /// SHA-256 of the canonical printed form.
    pub fn hash(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(self.print().as_bytes());
        h.finalize().into()
    }

    pub fn hash_hex(&self) -> String {
        self.hash().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.parsed_activation()?;
        self.parsed_recon_norm()?;
        self.filter()?;
        self.loss_weights().validate()?;
        if self.resolution < 16 || self.resolution % 16 != 0 {
            return Err(Error::Config(format!(
                "data.resolution must be a multiple of 16, got {}",
                self.resolution
            )));
        }
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::Config(format!(
                "data.channels must be 1 or 3, got {}",
                self.channels
            )));
        }
        self.train_config().validate()
    }

    fn parsed_activation(&self) -> Result<Activation> {
        Activation::parse(&self.activation).ok_or_else(|| {
            Error::Config(format!(
                "networks.activation must be silu or leaky_relu, got `{}`",
                self.activation
            ))
        })
    }

    fn parsed_recon_norm(&self) -> Result<ReconNorm> {
        ReconNorm::parse(&self.recon_norm).ok_or_else(|| {
            Error::Config(format!(
                "losses.recon_norm must be l1 or l2, got `{}`",
                self.recon_norm
            ))
        })
    }

    pub fn filter(&self) -> Result<FilterType> {
        parse_filter(&self.resize_filter).ok_or_else(|| {
            Error::Config(format!(
                "data.resize_filter must be nearest|bilinear|bicubic|lanczos, got `{}`",
                self.resize_filter
            ))
        })
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            lambda_style: self.lambda_style,
            lambda_cls: self.lambda_cls,
            lambda_cycle: self.lambda_cycle,
        }
    }

    pub fn net_config(&self, num_domains: usize) -> NetConfig {
        NetConfig {
            resolution: self.resolution,
            channels: self.channels,
            num_domains,
            style_dim: self.style_dim,
            base_channels: self.base_channels,
            activation: self.parsed_activation().unwrap_or(Activation::Silu),
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            steps: self.steps,
            batch_size: self.batch_size,
            lr_g: self.lr_g,
            lr_d: self.lr_d,
            beta1: self.beta1,
            beta2: self.beta2,
            weights: self.loss_weights(),
            recon_norm: self.parsed_recon_norm().unwrap_or(ReconNorm::L1),
            seed: self.seed,
            checkpoint_interval: self.checkpoint_interval,
            log_interval: self.log_interval,
        }
    }

    pub fn pad_classifier_config(&self, num_outputs: usize) -> ClassifierConfig {
        ClassifierConfig {
            resolution: self.resolution,
            channels: self.channels,
            num_outputs,
            base_channels: self.pad_base_channels,
            hidden: self.pad_hidden,
            activation: self.parsed_activation().unwrap_or(Activation::Silu),
            steps: self.pad_steps,
            batch_size: self.pad_batch_size,
            lr: self.pad_lr,
            seed: self.seed,
        }
    }
}

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};
use crate::heads::HeadsConfig;
use crate::metrics::ThresholdRule;
use crate::optim::AdamConfig;
use crate::synth::{default_domains, LevelSampling, SpoofCue, SynthDomainSpec};
use crate::tensor::DType;

fn default_batch() -> usize {
    32
}
fn default_steps() -> usize {
    300
}
fn default_lr() -> f64 {
    3e-4
}
fn default_betas() -> (f64, f64) {
    (0.9, 0.999)
}
fn default_eps() -> f64 {
    1e-8
}
fn default_precision() -> DType {
    DType::F32
}
fn default_n_domains() -> usize {
    4
}
fn default_per_class() -> usize {
    150
}
fn default_dev_fraction() -> f64 {
    0.2
}
fn default_p_mix() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    /// Global seed; required.
    pub seed: u64,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_betas")]
    pub betas: (f64, f64),
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_precision")]
    pub precision: DType,
}

impl OptimizerConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            betas: self.betas,
            eps: self.eps,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Read `<ingest>/<domain>/<real|fake>/*.png` instead of generating.
    #[serde(default)]
    pub ingest: Option<PathBuf>,
    /// Number of generated domains when `domains` is absent.
    #[serde(default = "default_n_domains")]
    pub n_domains: usize,
    #[serde(default)]
    pub domains: Option<Vec<SynthDomainSpec>>,
    /// Generated real images per domain.
    #[serde(default = "default_per_class")]
    pub n_real: usize,
    /// Generated fake images per domain.
    #[serde(default = "default_per_class")]
    pub n_fake: usize,
    #[serde(default)]
    pub cue: SpoofCue,
    /// Share of each source domain held out of training for the dev split.
    #[serde(default = "default_dev_fraction")]
    pub dev_fraction: f64,
    /// Probability that a training sample is a CutMix composite.
    #[serde(default = "default_p_mix")]
    pub p_mix: f64,
    #[serde(default)]
    pub level_sampling: LevelSampling,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            ingest: None,
            n_domains: default_n_domains(),
            domains: None,
            n_real: default_per_class(),
            n_fake: default_per_class(),
            cue: SpoofCue::default(),
            dev_fraction: default_dev_fraction(),
            p_mix: default_p_mix(),
            level_sampling: LevelSampling::Uniform,
        }
    }
}

impl DataConfig {
    pub fn synth_domains(&self) -> Vec<SynthDomainSpec> {
        self.domains.clone().unwrap_or_else(|| default_domains(self.n_domains))
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolConfig {
    /// Domains taking part, by name; all available domains when absent.
    #[serde(default)]
    pub domains: Option<Vec<String>>,
    /// Domains to hold out in turn; every participating domain when absent.
    #[serde(default)]
    pub targets: Option<Vec<String>>,
    #[serde(default)]
    pub threshold: ThresholdRule,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default)]
    pub backbone: BackboneConfig,
    #[serde(default)]
    pub heads: HeadsConfig,
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub protocol: ProtocolConfig,
    /// Exact text the config was parsed from.
    #[serde(skip)]
    pub source_text: String,
}

impl ModelConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let mut cfg: ModelConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.source_text = text.to_string();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    /// Defaults with the given seed, rendered back to TOML so the snapshot
    /// text is always populated.
    pub fn with_seed(seed: u64) -> Self {
        let mut cfg = ModelConfig {
            backbone: BackboneConfig::default(),
            heads: HeadsConfig::default(),
            optimizer: OptimizerConfig {
                seed,
                lr: default_lr(),
                betas: default_betas(),
                eps: default_eps(),
                batch_size: default_batch(),
                steps: default_steps(),
                precision: default_precision(),
            },
            data: DataConfig::default(),
            protocol: ProtocolConfig::default(),
            source_text: String::new(),
        };
        cfg.refresh_text();
        cfg
    }

    /// Re-renders `source_text` after programmatic edits.
    pub fn refresh_text(&mut self) {
        self.source_text = toml::to_string(self).expect("config serializes");
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.heads.validate()?;
        self.optimizer.adam().validate()?;
        let grid = self.heads.grid()?;
        self.data.level_sampling.validate(grid)?;
        if self.optimizer.batch_size == 0 {
            return Err(Error::Config("optimizer.batch_size must be positive".into()));
        }
        let d = &self.data;
        if !(0.0..=1.0).contains(&d.p_mix) {
            return Err(Error::Config("data.p_mix must lie in [0, 1]".into()));
        }
        if !(0.0..1.0).contains(&d.dev_fraction) {
            return Err(Error::Config("data.dev_fraction must lie in [0, 1)".into()));
        }
        if d.ingest.is_none() {
            if self.backbone.channels != 3 {
                return Err(Error::Config(
                    "the synthetic generator produces 3-channel images".into(),
                ));
            }
            let specs = d.synth_domains();
            if specs.is_empty() {
                return Err(Error::Config("no synthetic domains configured".into()));
            }
            for s in &specs {
                s.validate()?;
            }
            let mut names: Vec<&str> = specs.iter().map(|s| s.name.as_str()).collect();
            names.sort_unstable();
            names.dedup();
            if names.len() != specs.len() {
                return Err(Error::Config("synthetic domain names must be unique".into()));
            }
            if d.cue.period.is_nan() || d.cue.period <= 0.0 || !d.cue.amplitude.is_finite() {
                return Err(Error::Config("invalid spoof cue".into()));
            }
            self.check_names(&specs.iter().map(|s| s.name.clone()).collect::<Vec<_>>())?;
        }
        Ok(())
    }

    /// Checks that protocol domain references exist among `available`.
    pub fn check_names(&self, available: &[String]) -> Result<()> {
        let lists = [&self.protocol.domains, &self.protocol.targets];
        for name in lists.iter().filter_map(|l| l.as_ref()).flatten() {
            if !available.contains(name) {
                return Err(Error::Config(format!(
                    "protocol refers to unknown domain `{name}` (have: {})",
                    available.join(", ")
                )));
            }
        }
        if let (Some(domains), Some(targets)) = (&self.protocol.domains, &self.protocol.targets) {
            if let Some(t) = targets.iter().find(|t| !domains.contains(t)) {
                return Err(Error::Config(format!("target `{t}` is not among protocol.domains")));
            }
        }
        Ok(())
    }
}

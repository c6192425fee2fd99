//! One TOML document holding every tunable of a run.
//!
//! Sections mirror the pipeline stages: `[train]`, `[eval]`, `[retrieval]`
//! and `[pano]`. Missing keys take their defaults, so an empty file is a
//! valid config. Command-line flags are applied on top of the parsed file
//! and the merged result is what gets echoed into output directories.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::EvalConfig;
use crate::pano::{HoldPolicy, SaliencySource};
use crate::retrieval::{Aggregation, Metric, RetrievalOptions};
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetrievalSettings {
    pub k: usize,
    pub metric: Metric,
    pub aggregation: Aggregation,
    pub exclude_self: bool,
    /// Draws of the random top-k baseline.
    pub trials: usize,
    pub seed: u64,
}

impl Default for RetrievalSettings {
    fn default() -> Self {
        let o = RetrievalOptions::default();
        Self {
            k: o.k,
            metric: Metric::default(),
            aggregation: o.aggregation,
            exclude_self: o.exclude_self,
            trials: 100,
            seed: 0,
        }
    }
}

impl RetrievalSettings {
    pub fn options(&self) -> RetrievalOptions {
        RetrievalOptions {
            k: self.k,
            aggregation: self.aggregation,
            exclude_self: self.exclude_self,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PanoSettings {
    /// Audio window per frame, seconds. Unset means the model's training
    /// window.
    pub window_s: Option<f64>,
    /// Frame spacing used when no timing file accompanies the frames.
    pub stride_s: f64,
    pub fov_deg: f64,
    pub max_step_deg: f64,
    pub hold: HoldPolicy,
    pub source: SaliencySource,
    /// Size of the rendered perspective crops.
    pub crop_height: usize,
    pub crop_width: usize,
}

impl Default for PanoSettings {
    fn default() -> Self {
        Self {
            window_s: None,
            stride_s: 1.0,
            fov_deg: 65.0,
            max_step_deg: 10.0,
            hold: HoldPolicy::default(),
            source: SaliencySource::default(),
            crop_height: 240,
            crop_width: 320,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub retrieval: RetrievalSettings,
    pub pano: PanoSettings,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    /// Parses `text` on top of `base`: keys present in `text` win, every
    /// other value keeps what `base` had.
    pub fn layered(base: &RunConfig, text: &str) -> Result<Self> {
        let parse = |t: &str| t.parse::<toml::Table>().map_err(|e| Error::Config(e.to_string()));
        let mut merged = parse(&base.to_toml()?)?;
        merge(&mut merged, parse(text)?);
        merged.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Writes `config.toml` into `dir`.
    pub fn echo(&self, dir: impl AsRef<Path>) -> Result<()> {
        std::fs::write(dir.as_ref().join("config.toml"), self.to_toml()?)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.retrieval.k == 0 || self.retrieval.trials == 0 {
            return Err(Error::Config("retrieval k and trials must be positive".into()));
        }
        let p = &self.pano;
        if p.window_s.is_some_and(|w| !(w > 0.0)) || !(p.stride_s > 0.0) || !(p.max_step_deg > 0.0) {
            return Err(Error::Config("pano window, stride and step must be positive".into()));
        }
        if !(p.fov_deg > 0.0 && p.fov_deg < 120.0) {
            return Err(Error::Config(format!("field of view {} outside (0, 120)", p.fov_deg)));
        }
        if p.crop_height == 0 || p.crop_width == 0 {
            return Err(Error::Config("crop size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.eval.tau) || self.eval.consensus_count == 0 {
            return Err(Error::Config("eval tau must lie in [0, 1] and consensus count be positive".into()));
        }
        Ok(())
    }
}

fn merge(dst: &mut toml::Table, src: toml::Table) {
    for (k, v) in src {
        match (dst.get_mut(&k), v) {
            (Some(toml::Value::Table(d)), toml::Value::Table(s)) => merge(d, s),
            (_, v) => {
                dst.insert(k, v);
            }
        }
    }
}

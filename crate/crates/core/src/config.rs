//! Run configuration: JSON file with defaults, validated, overridable from the
//! command line.

use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::cgsr::{PromptMode, RefinerKind, Refiner, RegionGrowParams, RemoteRefiner};
use crate::error::{Error, Result};
use crate::imgproc::EdgeOperator;
use crate::model::{LrSchedule, ModelConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub wd: f64,
    pub lr_schedule: LrSchedule,
    /// Random-rescale augmentation range applied during training.
    pub rescale: (f64, f64),
    /// Square input sizes for multi-scale CAM inference, ascending.
    pub scales: Vec<usize>,
    pub cabl_depth: usize,
    pub edge_operator: EdgeOperator,
    pub refiner: RefinerKind,
    pub remote_url: Option<String>,
    pub remote_timeout_secs: u64,
    pub prompt_mode: PromptMode,
    pub rho: f64,
    pub region_threshold: f64,
    /// Images per split written by `synth`.
    pub synth_train: usize,
    pub synth_val: usize,
    pub synth_size: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            epochs: 30,
            batch: 8,
            lr: 5e-5,
            wd: 5e-4,
            lr_schedule: LrSchedule::Constant,
            rescale: (0.75, 1.25),
            scales: vec![64, 96, 128],
            cabl_depth: 6,
            edge_operator: EdgeOperator::Sobel,
            refiner: RefinerKind::Region,
            remote_url: None,
            remote_timeout_secs: 30,
            prompt_mode: PromptMode::BoxPoint,
            rho: 0.4,
            region_threshold: RegionGrowParams::default().color_threshold,
            synth_train: 400,
            synth_val: 200,
            synth_size: 64,
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub scales: Option<Vec<usize>>,
    pub refiner: Option<RefinerKind>,
    pub remote_url: Option<String>,
    pub prompt_mode: Option<PromptMode>,
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} must be positive, got {v}")))
    }
}

impl RunConfig {
    /// Parses JSON, fills defaults, sorts scales and validates.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.normalized()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn with_overrides(mut self, o: &Overrides) -> Result<Self> {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(s) = &o.scales {
            self.scales = s.clone();
        }
        if let Some(r) = o.refiner {
            self.refiner = r;
        }
        if let Some(u) = &o.remote_url {
            self.remote_url = Some(u.clone());
        }
        if let Some(m) = o.prompt_mode {
            self.prompt_mode = m;
        }
        self.normalized()
    }

    fn normalized(mut self) -> Result<Self> {
        self.scales.sort_unstable();
        self.scales.dedup();
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        positive("seed", self.seed as f64)?;
        positive("epochs", self.epochs as f64)?;
        positive("batch", self.batch as f64)?;
        positive("lr", self.lr)?;
        positive("wd", self.wd)?;
        positive("cabl_depth", self.cabl_depth as f64)?;
        positive("remote_timeout_secs", self.remote_timeout_secs as f64)?;
        positive("region_threshold", self.region_threshold)?;
        positive("synth_train", self.synth_train as f64)?;
        positive("synth_val", self.synth_val as f64)?;
        positive("synth_size", self.synth_size as f64)?;
        positive("rescale", self.rescale.0)?;
        if self.rescale.1 < self.rescale.0 {
            return Err(Error::Config("rescale range is reversed".into()));
        }
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return Err(Error::Config(format!("rho must lie in (0, 1), got {}", self.rho)));
        }
        if self.scales.is_empty() || self.scales.contains(&0) {
            return Err(Error::Config("scales must be a non-empty list of positive sizes".into()));
        }
        if !self.scales.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::Config("scales must be strictly ascending".into()));
        }
        if self.refiner == RefinerKind::Remote && self.remote_url.is_none() {
            return Err(Error::Config("the remote refiner needs remote_url".into()));
        }
        let model = self.model_config();
        model.validate()?;
        for &s in &self.scales {
            model.check_input(s).map_err(|e| Error::Config(e.to_string()))?;
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            cabl_depth: self.cabl_depth,
            edge_operator: self.edge_operator,
            ..ModelConfig::default()
        }
    }

    pub fn build_refiner(&self) -> Result<Refiner> {
        Ok(match self.refiner {
            RefinerKind::None => Refiner::None,
            RefinerKind::Region => Refiner::RegionGrow(RegionGrowParams {
                color_threshold: self.region_threshold,
            }),
            RefinerKind::Remote => {
                let url = self
                    .remote_url
                    .clone()
                    .ok_or_else(|| Error::Config("the remote refiner needs remote_url".into()))?;
                Refiner::Remote(RemoteRefiner {
                    url,
                    timeout: Duration::from_secs(self.remote_timeout_secs),
                })
            }
        })
    }

    /// Canonical JSON (field order fixed by the struct).
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

//! Run configuration as flat `key = value` text.

use std::path::{Path, PathBuf};

use crate::dc::gather::{DEFAULT_HALF_WIDTH, GATHER_COUNT};
use crate::dc::net::DC_PATCH;
use crate::error::{Error, Result};
use crate::net::{NetConfig, DEFAULT_TAU};

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub dataset_root: Option<PathBuf>,
    pub d_max: usize,
    pub stereo_lr: f64,
    pub dc_lr: f64,
    pub stereo_batch: usize,
    pub dc_batch: usize,
    pub stereo_patch: usize,
    pub dc_patch: usize,
    pub gather_count: usize,
    pub half_width: f32,
    pub tau: f32,
    pub seed: u64,
    pub net: NetConfig,
    pub stereo_steps: usize,
    pub dc_steps: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset_root: None,
            d_max: 128,
            stereo_lr: 6.0e-5,
            dc_lr: 6.0e-6,
            stereo_batch: 100,
            dc_batch: 1000,
            stereo_patch: 21,
            dc_patch: DC_PATCH,
            gather_count: GATHER_COUNT,
            half_width: DEFAULT_HALF_WIDTH,
            tau: DEFAULT_TAU,
            seed: 0,
            net: NetConfig::default(),
            stereo_steps: 2000,
            dc_steps: 3000,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::InvalidArgument(format!("bad value {:?} for {}", value, key)))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn join(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "dataset_root" => self.dataset_root = Some(PathBuf::from(value)),
            "d_max" => self.d_max = parse(key, value)?,
            "stereo_lr" => self.stereo_lr = parse(key, value)?,
            "dc_lr" => self.dc_lr = parse(key, value)?,
            "stereo_batch" => self.stereo_batch = parse(key, value)?,
            "dc_batch" => self.dc_batch = parse(key, value)?,
            "stereo_patch" => self.stereo_patch = parse(key, value)?,
            "dc_patch" => self.dc_patch = parse(key, value)?,
            "gather_count" => self.gather_count = parse(key, value)?,
            "half_width" => self.half_width = parse(key, value)?,
            "tau" => self.tau = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "feature_widths" => self.net.feature_widths = parse_list(key, value)?,
            "similarity_growth" => self.net.similarity_growth = parse(key, value)?,
            "similarity_layers" => self.net.similarity_layers = parse(key, value)?,
            "deformable" => self.net.deformable = parse(key, value)?,
            "dc_widths" => {
                let v = parse_list(key, value)?;
                self.net.dc_widths = v
                    .try_into()
                    .map_err(|_| Error::InvalidArgument("dc_widths takes two values".into()))?;
            }
            "stereo_steps" => self.stereo_steps = parse(key, value)?,
            "dc_steps" => self.dc_steps = parse(key, value)?,
            _ => return Err(Error::InvalidArgument(format!("unknown config key {:?}", key))),
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of `self`; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::InvalidArgument(format!("line {}: expected key = value", i + 1)))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let mut c = RunConfig::default();
        c.apply_text(&std::fs::read_to_string(path)?)?;
        c.validate()?;
        Ok(c)
    }

    /// Rejects values the networks cannot honour.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.gather_count != GATHER_COUNT {
            return bad(format!("gather_count is fixed at {}", GATHER_COUNT));
        }
        if self.dc_patch != DC_PATCH {
            return bad(format!("dc_patch is fixed at {}", DC_PATCH));
        }
        let rf = 1 + 2 * (self.net.feature_widths.len() + self.net.similarity_layers + 1);
        if self.stereo_patch != rf {
            return bad(format!(
                "stereo_patch {} does not match the network's receptive field {}",
                self.stereo_patch, rf
            ));
        }
        if self.d_max == 0 || self.stereo_batch == 0 || self.dc_batch == 0 {
            return bad("d_max and batch sizes must be positive".into());
        }
        if !(self.tau > 0.0) || !(self.half_width >= 0.0) {
            return bad("tau must be positive and half_width non-negative".into());
        }
        if !(self.stereo_lr > 0.0) || !(self.dc_lr > 0.0) {
            return bad("learning rates must be positive".into());
        }
        if self.net.feature_widths.is_empty() || self.net.feature_widths.contains(&0) {
            return bad("feature widths must be positive".into());
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut lines = Vec::new();
        if let Some(r) = &self.dataset_root {
            lines.push(format!("dataset_root = {}", r.display()));
        }
        lines.extend([
            format!("d_max = {}", self.d_max),
            format!("stereo_lr = {:e}", self.stereo_lr),
            format!("dc_lr = {:e}", self.dc_lr),
            format!("stereo_batch = {}", self.stereo_batch),
            format!("dc_batch = {}", self.dc_batch),
            format!("stereo_patch = {}", self.stereo_patch),
            format!("dc_patch = {}", self.dc_patch),
            format!("gather_count = {}", self.gather_count),
            format!("half_width = {}", self.half_width),
            format!("tau = {}", self.tau),
            format!("seed = {}", self.seed),
            format!("feature_widths = {}", join(&self.net.feature_widths)),
            format!("similarity_growth = {}", self.net.similarity_growth),
            format!("similarity_layers = {}", self.net.similarity_layers),
            format!("deformable = {}", self.net.deformable),
            format!("dc_widths = {}", join(&self.net.dc_widths)),
            format!("stereo_steps = {}", self.stereo_steps),
            format!("dc_steps = {}", self.dc_steps),
        ]);
        lines.join("\n") + "\n"
    }
}

//! `key = value` configuration shared by the command-line tools.
//!
//! Blank lines and `#` comments are ignored. Every key is optional; unknown
//! or repeated keys are rejected. [`Config::to_text`] prints every key in a
//! canonical order and parses back to the same value.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::depth_loss::LossWeights;
use crate::error::{Error, Result};
use crate::metrics::DEFAULT_CAPS;
use crate::toy::TrainConfig;
use crate::uncertainty::DEFAULT_BETA;

pub const KEYS: [&str; 15] = [
    "beta",
    "gamma1",
    "gamma2",
    "gamma3",
    "gamma4",
    "detach_u",
    "caps",
    "height",
    "width",
    "steps",
    "lr",
    "seed",
    "train_scenes",
    "eval_scenes",
    "eval_every",
];

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub beta: f64,
    pub gamma: [f64; 4],
    pub detach_u: bool,
    pub caps: Vec<f64>,
    pub height: usize,
    pub width: usize,
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
    pub train_scenes: usize,
    pub eval_scenes: usize,
    pub eval_every: usize,
}

impl Default for Config {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            beta: DEFAULT_BETA,
            gamma: LossWeights::default().gamma,
            detach_u: t.detach_u,
            caps: DEFAULT_CAPS.to_vec(),
            height: t.height,
            width: t.width,
            steps: t.steps,
            lr: t.lr,
            seed: t.seed,
            train_scenes: t.train_scenes,
            eval_scenes: t.eval_scenes,
            eval_every: t.eval_every,
        }
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

pub fn parse_caps(value: &str) -> Result<Vec<f64>> {
    value
        .split(',')
        .map(|v| parse_value("caps", v.trim()))
        .collect()
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if seen.contains(&key) {
                return Err(Error::Config(format!(
                    "line {}: duplicate key {key}",
                    n + 1
                )));
            }
            cfg.set(key, value)?;
            seen.push(key);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Set one key from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "beta" => self.beta = parse_value(key, value)?,
            "gamma1" => self.gamma[0] = parse_value(key, value)?,
            "gamma2" => self.gamma[1] = parse_value(key, value)?,
            "gamma3" => self.gamma[2] = parse_value(key, value)?,
            "gamma4" => self.gamma[3] = parse_value(key, value)?,
            "detach_u" => self.detach_u = parse_value(key, value)?,
            "caps" => self.caps = parse_caps(value)?,
            "height" => self.height = parse_value(key, value)?,
            "width" => self.width = parse_value(key, value)?,
            "steps" => self.steps = parse_value(key, value)?,
            "lr" => self.lr = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            "train_scenes" => self.train_scenes = parse_value(key, value)?,
            "eval_scenes" => self.eval_scenes = parse_value(key, value)?,
            "eval_every" => self.eval_every = parse_value(key, value)?,
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::Config(format!(
                "beta must be positive, got {}",
                self.beta
            )));
        }
        LossWeights::new(self.gamma).map_err(|e| Error::Config(e.to_string()))?;
        if self.caps.is_empty() || self.caps.iter().any(|&c| c.is_nan() || c <= 0.0) {
            return Err(Error::Config("caps must be positive".into()));
        }
        if self.steps == 0
            || self.eval_every == 0
            || self.train_scenes == 0
            || self.eval_scenes == 0
        {
            return Err(Error::Config(
                "steps, eval_every and scene counts must be >= 1".into(),
            ));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "lr must be positive, got {}",
                self.lr
            )));
        }
        if self.height == 0
            || self.width == 0
            || !self.height.is_multiple_of(32)
            || !self.width.is_multiple_of(32)
        {
            return Err(Error::Config(
                "height and width must be positive multiples of 32".into(),
            ));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let caps: Vec<String> = self.caps.iter().map(f64::to_string).collect();
        let mut s = String::new();
        writeln!(s, "beta = {}", self.beta).unwrap();
        for (i, g) in self.gamma.iter().enumerate() {
            writeln!(s, "gamma{} = {g}", i + 1).unwrap();
        }
        writeln!(s, "detach_u = {}", self.detach_u).unwrap();
        writeln!(s, "caps = {}", caps.join(",")).unwrap();
        writeln!(s, "height = {}", self.height).unwrap();
        writeln!(s, "width = {}", self.width).unwrap();
        writeln!(s, "steps = {}", self.steps).unwrap();
        writeln!(s, "lr = {}", self.lr).unwrap();
        writeln!(s, "seed = {}", self.seed).unwrap();
        writeln!(s, "train_scenes = {}", self.train_scenes).unwrap();
        writeln!(s, "eval_scenes = {}", self.eval_scenes).unwrap();
        writeln!(s, "eval_every = {}", self.eval_every).unwrap();
        s
    }

    pub fn loss_weights(&self) -> Result<LossWeights> {
        LossWeights::new(self.gamma)
    }

    /// Training configuration for the demo with the given KD switches.
    pub fn train_config(&self, kd_enabled: [bool; 4]) -> Result<TrainConfig> {
        Ok(TrainConfig {
            gamma: self.loss_weights()?,
            beta: self.beta,
            detach_u: self.detach_u,
            steps: self.steps,
            lr: self.lr,
            seed: self.seed,
            train_scenes: self.train_scenes,
            eval_scenes: self.eval_scenes,
            height: self.height,
            width: self.width,
            kd_enabled,
            eval_every: self.eval_every,
            cap: self.caps.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        })
    }
}

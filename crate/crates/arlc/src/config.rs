//! Flat `key=value` run configuration with `#` comments. The same text
//! format serves config files, per-run `config.txt` artifacts, and the
//! checkpoint config blob.

use std::collections::BTreeSet;
use std::path::PathBuf;

use crate::error::{Error, Result};
use crate::loss::PhaseTwoLossConfig;
use crate::models::Family;
use crate::train::Hyper;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub family: Family,
    pub phase: u8,
    pub iterations: usize,
    pub alpha: f64,
    pub lambda: f64,
    /// Per-iteration loss coefficients; empty means "derive defaults".
    pub gammas: Vec<f64>,
    pub epochs: usize,
    pub seed: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub lr_decay_factor: f64,
    /// Learning-rate multiplier for the adaptation head in phase two.
    pub head_lr_scale: f64,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    pub run_id: Option<String>,
    pub from_checkpoint: Option<PathBuf>,
    /// Record real wall-clock seconds in metrics rows. Off by default so
    /// that identically seeded runs produce byte-identical artifacts.
    pub timing: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            family: Family::Baseline,
            phase: 1,
            iterations: 4,
            alpha: 1e-3,
            lambda: 0.1,
            gammas: Vec::new(),
            epochs: 20,
            seed: 0,
            batch_size: 64,
            learning_rate: 0.05,
            momentum: 0.9,
            lr_decay_factor: 0.1,
            head_lr_scale: 1.0,
            data_dir: PathBuf::from("data/mnist"),
            out_dir: PathBuf::from("out"),
            run_id: None,
            from_checkpoint: None,
            timing: false,
        }
    }
}

impl RunConfig {
    /// Apply one key; unknown keys are errors so typos never pass silently.
    pub fn apply_kv(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::Validation(format!("bad value {value:?} for {key}")))
        }
        match key {
            "family" => self.family = Family::parse(value)?,
            "phase" => self.phase = num(key, value)?,
            "iterations" => self.iterations = num(key, value)?,
            "alpha" => self.alpha = num(key, value)?,
            "lambda" => self.lambda = num(key, value)?,
            "gammas" => {
                self.gammas = value
                    .split(',')
                    .filter(|s| !s.trim().is_empty())
                    .map(|s| num("gammas", s.trim()))
                    .collect::<Result<_>>()?;
            }
            "epochs" => self.epochs = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "learning_rate" => self.learning_rate = num(key, value)?,
            "momentum" => self.momentum = num(key, value)?,
            "lr_decay_factor" => self.lr_decay_factor = num(key, value)?,
            "head_lr_scale" => self.head_lr_scale = num(key, value)?,
            "data_dir" => self.data_dir = PathBuf::from(value),
            "out_dir" => self.out_dir = PathBuf::from(value),
            "run_id" => self.run_id = Some(value.to_string()),
            "from_checkpoint" => self.from_checkpoint = Some(PathBuf::from(value)),
            "timing" => self.timing = num(key, value)?,
            other => {
                return Err(Error::Validation(format!("unknown config key {other:?}")));
            }
        }
        Ok(())
    }

    /// Apply a config file body; returns the set of keys it assigned.
    pub fn apply_text(&mut self, text: &str) -> Result<BTreeSet<String>> {
        let mut seen = BTreeSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Format(format!(
                    "config line {}: expected key=value, got {raw:?}",
                    lineno + 1
                )));
            };
            let key = key.trim();
            self.apply_kv(key, value.trim())?;
            seen.insert(key.to_string());
        }
        Ok(seen)
    }

    pub fn from_text(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    /// Serialize with a fixed key order so identical configs produce
    /// identical bytes.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("family={}\n", self.family.as_str()));
        s.push_str(&format!("phase={}\n", self.phase));
        s.push_str(&format!("iterations={}\n", self.iterations));
        s.push_str(&format!("alpha={}\n", self.alpha));
        s.push_str(&format!("lambda={}\n", self.lambda));
        let gammas: Vec<String> = self.resolved_gammas().iter().map(f64::to_string).collect();
        s.push_str(&format!("gammas={}\n", gammas.join(",")));
        s.push_str(&format!("epochs={}\n", self.epochs));
        s.push_str(&format!("seed={}\n", self.seed));
        s.push_str(&format!("batch_size={}\n", self.batch_size));
        s.push_str(&format!("learning_rate={}\n", self.learning_rate));
        s.push_str(&format!("momentum={}\n", self.momentum));
        s.push_str(&format!("lr_decay_factor={}\n", self.lr_decay_factor));
        s.push_str(&format!("head_lr_scale={}\n", self.head_lr_scale));
        s.push_str(&format!("data_dir={}\n", self.data_dir.display()));
        s.push_str(&format!("out_dir={}\n", self.out_dir.display()));
        s.push_str(&format!("run_id={}\n", self.resolved_run_id()));
        s.push_str(&format!("timing={}\n", self.timing));
        s
    }

    /// Explicit gamma list: the configured one, or the defaults for K.
    pub fn resolved_gammas(&self) -> Vec<f64> {
        if self.gammas.is_empty() && self.phase == 2 {
            (0..self.iterations.saturating_sub(1))
                .map(|i| if i == 0 { 3e-3 } else { 1e-3 })
                .collect()
        } else {
            self.gammas.clone()
        }
    }

    pub fn resolved_run_id(&self) -> String {
        match &self.run_id {
            Some(id) => id.clone(),
            None => {
                if self.phase == 2 {
                    format!(
                        "{}-p2-k{}-s{}",
                        self.family.as_str(),
                        self.iterations,
                        self.seed
                    )
                } else {
                    format!("{}-p1-s{}", self.family.as_str(), self.seed)
                }
            }
        }
    }

    pub fn hyper(&self) -> Hyper {
        Hyper {
            learning_rate: self.learning_rate,
            momentum: self.momentum,
            batch_size: self.batch_size,
            epochs: self.epochs,
            lr_decay_factor: self.lr_decay_factor,
            head_lr_scale: self.head_lr_scale,
        }
    }

    pub fn loss_config(&self) -> Result<PhaseTwoLossConfig> {
        PhaseTwoLossConfig::new(self.resolved_gammas(), self.lambda, self.iterations)
    }

    pub fn validate(&self) -> Result<()> {
        if self.phase != 1 && self.phase != 2 {
            return Err(Error::Usage(format!(
                "--phase must be 1 or 2, got {}",
                self.phase
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Validation("batch_size must be >= 1".into()));
        }
        if !(self.alpha >= 0.0) {
            return Err(Error::Validation(format!(
                "alpha must be >= 0, got {}",
                self.alpha
            )));
        }
        if self.phase == 2 {
            if self.family != Family::Recurrent {
                return Err(Error::Usage(format!(
                    "phase 2 applies to --family recurrent, not {}",
                    self.family.as_str()
                )));
            }
            if self.iterations < 2 {
                return Err(Error::Validation(format!(
                    "the recurrent family needs --iterations >= 2, got {}",
                    self.iterations
                )));
            }
            self.loss_config()?;
        }
        if let Some(id) = &self.run_id {
            if id.contains(',') || id.contains('/') || id.is_empty() {
                return Err(Error::Validation(format!("bad run id {id:?}")));
            }
        }
        Ok(())
    }
}

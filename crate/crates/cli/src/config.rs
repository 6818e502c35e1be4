//! Run configuration: defaults, overridden by a flat `key = value` config
//! file, overridden by CLI flags.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use fxrn_core::trainer::{OptimizerKind, TrainConfig};
use fxrn_core::{Error, Result};

/// Fully resolved settings for one command invocation.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub preset: Option<String>,
    pub data: Option<PathBuf>,
    pub synthetic: bool,
    pub model: Option<PathBuf>,
    pub seed: u64,
    pub out: PathBuf,
    pub bits: Vec<u8>,
    pub alloc: Option<String>,
    pub group: Option<String>,
    pub escalate: bool,
    pub target_miss: Option<f64>,
    pub max_bits: u8,
    pub mode: Option<String>,
    pub rate: Option<u32>,
    pub epochs: usize,
    pub per_class: Option<usize>,
    pub noise: Option<f64>,
    pub frames: usize,
    pub retrain: bool,
    pub all: Option<bool>,
    pub lr: f64,
    pub final_lr: f64,
    pub momentum: f64,
    pub optimizer: String,
    pub rho: f64,
    pub eps: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub batch: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            preset: None,
            data: None,
            synthetic: false,
            model: None,
            seed: 0,
            out: PathBuf::from("fxrn-out"),
            bits: vec![2],
            alloc: None,
            group: None,
            escalate: false,
            target_miss: None,
            max_bits: 4,
            mode: None,
            rate: None,
            epochs: 30,
            per_class: None,
            noise: None,
            frames: 6,
            retrain: true,
            all: None,
            lr: 1.0,
            final_lr: 1e-3,
            momentum: 0.9,
            optimizer: "adadelta".into(),
            rho: 0.95,
            eps: 1e-6,
            max_epochs: 80,
            patience: 5,
            batch: 8,
        }
    }
}

/// Parses a flat `key = value` file; `#` starts a comment.
pub fn parse_config_file(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("config file {}: {e}", path.display())))?;
    let mut map = BTreeMap::new();
    for (ln, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::InvalidArg(format!("{}:{}: expected key = value", path.display(), ln + 1))
        })?;
        map.insert(key.trim().to_string(), value.trim().to_string());
    }
    Ok(map)
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::InvalidArg(format!("config key '{key}' has bad value '{value}'")))
}

impl RunConfig {
    /// Applies config-file values on top of the defaults; CLI flags are
    /// applied afterwards by the caller, so the precedence is
    /// CLI > file > defaults.
    pub fn apply_file(&mut self, map: &BTreeMap<String, String>) -> Result<()> {
        for (key, value) in map {
            match key.as_str() {
                "preset" => self.preset = Some(value.clone()),
                "data" => self.data = Some(PathBuf::from(value)),
                "synthetic" => self.synthetic = parse(key, value)?,
                "model" => self.model = Some(PathBuf::from(value)),
                "seed" => self.seed = parse(key, value)?,
                "out" => self.out = PathBuf::from(value),
                "bits" => self.bits = parse_bits_list(value)?,
                "alloc" => self.alloc = Some(value.clone()),
                "group" => self.group = Some(value.clone()),
                "escalate" => self.escalate = parse(key, value)?,
                "target_miss" => self.target_miss = Some(parse(key, value)?),
                "max_bits" => self.max_bits = parse(key, value)?,
                "mode" => self.mode = Some(value.clone()),
                "rate" => self.rate = Some(parse(key, value)?),
                "epochs" => self.epochs = parse(key, value)?,
                "per_class" => self.per_class = Some(parse(key, value)?),
                "noise" => self.noise = Some(parse(key, value)?),
                "frames" => self.frames = parse(key, value)?,
                "retrain" => self.retrain = parse(key, value)?,
                "all" => self.all = Some(parse(key, value)?),
                "lr" => self.lr = parse(key, value)?,
                "final_lr" => self.final_lr = parse(key, value)?,
                "momentum" => self.momentum = parse(key, value)?,
                "optimizer" => self.optimizer = value.clone(),
                "rho" => self.rho = parse(key, value)?,
                "eps" => self.eps = parse(key, value)?,
                "max_epochs" => self.max_epochs = parse(key, value)?,
                "patience" => self.patience = parse(key, value)?,
                "batch" => self.batch = parse(key, value)?,
                other => return Err(Error::InvalidArg(format!("unknown config key '{other}'"))),
            }
        }
        Ok(())
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let optimizer = match self.optimizer.as_str() {
            "adadelta" => OptimizerKind::AdaDelta,
            "nesterov" => OptimizerKind::Nesterov,
            other => {
                return Err(Error::InvalidArg(format!(
                    "optimizer must be adadelta or nesterov, got '{other}'"
                )))
            }
        };
        let config = TrainConfig {
            initial_lr: self.lr,
            final_lr: self.final_lr,
            momentum: self.momentum,
            optimizer,
            adadelta_rho: self.rho,
            adadelta_eps: self.eps,
            max_epochs: self.max_epochs,
            patience: self.patience,
            seed: self.seed,
            batch_streams: self.batch,
        };
        config.validate()?;
        Ok(config)
    }

    /// Resolved values as sorted `key = value` lines, written next to every
    /// command's outputs for reproducibility.
    pub fn manifest(&self, command: &str) -> String {
        let mut lines = vec![format!("command = {command}")];
        let mut push = |key: &str, value: String| lines.push(format!("{key} = {value}"));
        push("preset", self.preset.clone().unwrap_or_default());
        push("data", self.data.as_ref().map(|p| p.display().to_string()).unwrap_or_default());
        push("synthetic", self.synthetic.to_string());
        push("model", self.model.as_ref().map(|p| p.display().to_string()).unwrap_or_default());
        push("seed", self.seed.to_string());
        push("out", self.out.display().to_string());
        push("bits", self.bits.iter().map(|b| b.to_string()).collect::<Vec<_>>().join(","));
        push("alloc", self.alloc.clone().unwrap_or_default());
        push("group", self.group.clone().unwrap_or_default());
        push("escalate", self.escalate.to_string());
        push("target_miss", self.target_miss.map(|v| v.to_string()).unwrap_or_default());
        push("max_bits", self.max_bits.to_string());
        push("mode", self.mode.clone().unwrap_or_default());
        push("rate", self.rate.map(|v| v.to_string()).unwrap_or_default());
        push("epochs", self.epochs.to_string());
        push("per_class", self.per_class.map(|v| v.to_string()).unwrap_or_default());
        push("noise", self.noise.map(|v| v.to_string()).unwrap_or_default());
        push("frames", self.frames.to_string());
        push("retrain", self.retrain.to_string());
        push("all", self.all.map(|v| v.to_string()).unwrap_or_default());
        push("lr", self.lr.to_string());
        push("final_lr", self.final_lr.to_string());
        push("momentum", self.momentum.to_string());
        push("optimizer", self.optimizer.clone());
        push("rho", self.rho.to_string());
        push("eps", self.eps.to_string());
        push("max_epochs", self.max_epochs.to_string());
        push("patience", self.patience.to_string());
        push("batch", self.batch.to_string());
        lines.join("\n") + "\n"
    }
}

pub fn parse_bits_list(text: &str) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let b: u8 = part
            .parse()
            .map_err(|_| Error::InvalidArg(format!("bad bit-width '{part}'")))?;
        if !(2..=16).contains(&b) {
            return Err(Error::InvalidArg(format!("bits must be in 2..=16, got {b}")));
        }
        out.push(b);
    }
    if out.is_empty() {
        return Err(Error::InvalidArg("empty bits list".into()));
    }
    Ok(out)
}

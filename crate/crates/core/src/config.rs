//! Flat `key=value` run configuration with dotted sections.
//!
//! Lines are `key=value`, `#` starts a comment, blank lines are
//! ignored. Serialization sorts keys, so parse -> serialize -> parse is
//! a fixed point. `CF_FUSE_SEED` in the environment overrides the
//! configured seed.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::backbone::BackboneConfig;
use crate::dfs::DfsConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::rsr::{FilterMode, RsrConfig};

#[derive(Clone, Debug, Default)]
pub struct Config {
    map: BTreeMap<String, String>,
}

impl Config {
    pub fn parse_str(text: &str, origin: &Path) -> Result<Config> {
        let mut map = BTreeMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config {
                    path: origin.to_path_buf(),
                    line: idx + 1,
                    msg: format!("expected key=value, got '{raw}'"),
                });
            };
            let key = key.trim().to_string();
            if key.is_empty() {
                return Err(Error::Config {
                    path: origin.to_path_buf(),
                    line: idx + 1,
                    msg: "empty key".into(),
                });
            }
            if map.insert(key.clone(), value.trim().to_string()).is_some() {
                return Err(Error::Config {
                    path: origin.to_path_buf(),
                    line: idx + 1,
                    msg: format!("duplicate key '{key}'"),
                });
            }
        }
        Ok(Config { map })
    }

    pub fn load(path: &Path) -> Result<Config> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Config::parse_str(&text, path)
    }

    pub fn serialize(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.map {
            out.push_str(k);
            out.push('=');
            out.push_str(v);
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.serialize()).map_err(|e| Error::io(path, e))
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.map.insert(key.to_string(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.map.get(key).map(|s| s.as_str())
    }

    fn typed<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T> {
        match self.map.get(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| {
                Error::data(format!("config key '{key}': cannot parse '{v}'"))
            }),
        }
    }

    pub fn get_usize(&self, key: &str, default: usize) -> Result<usize> {
        self.typed(key, default)
    }

    pub fn get_u64(&self, key: &str, default: u64) -> Result<u64> {
        self.typed(key, default)
    }

    pub fn get_f64(&self, key: &str, default: f64) -> Result<f64> {
        self.typed(key, default)
    }

    pub fn get_bool(&self, key: &str, default: bool) -> Result<bool> {
        match self.map.get(key).map(|s| s.as_str()) {
            None => Ok(default),
            Some("true") | Some("on") | Some("1") => Ok(true),
            Some("false") | Some("off") | Some("0") => Ok(false),
            Some(v) => Err(Error::data(format!(
                "config key '{key}': expected a boolean, got '{v}'"
            ))),
        }
    }

    pub fn get_str(&self, key: &str, default: &str) -> String {
        self.map
            .get(key)
            .cloned()
            .unwrap_or_else(|| default.to_string())
    }

    /// Configured seed, unless `CF_FUSE_SEED` overrides it.
    pub fn seed(&self) -> Result<u64> {
        if let Ok(env) = std::env::var("CF_FUSE_SEED") {
            return env
                .parse()
                .map_err(|_| Error::data(format!("CF_FUSE_SEED: cannot parse '{env}'")));
        }
        self.get_u64("seed", 42)
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let grid = self.get_usize("rsr.grid", 8)?;
        let mode_s = self.get_str("rsr.mode", "soft");
        let mode = FilterMode::parse(&mode_s)
            .ok_or_else(|| Error::data(format!("rsr.mode must be soft|hard, got '{mode_s}'")))?;
        let m = grid * grid;
        let default_k = (0.8 * m as f64).round() as usize;
        let cfg = ModelConfig {
            use_rsr: self.get_bool("model.use_rsr", true)?,
            use_dfs: self.get_bool("model.use_dfs", true)?,
            classes: self.get_usize("model.classes", 2)?,
            rsr: RsrConfig {
                k: self.get_usize("rsr.k", default_k)?,
                mode,
                grid_rows: grid,
                grid_cols: grid,
                encoder_hidden: self.get_usize("rsr.encoder_hidden", 2)?,
            },
            dfs: DfsConfig {
                threshold: self.get_f64("dfs.threshold", 0.3)?,
                expert_channels: self.get_usize("dfs.expert_channels", 8)?,
            },
            backbone: BackboneConfig::default(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let cfg = TrainConfig {
            epochs: self.get_usize("train.epochs", 12)?,
            lr: self.get_f64("train.lr", 1e-2)?,
            momentum: self.get_f64("train.momentum", 0.9)?,
            weight_decay: self.get_f64("train.weight_decay", 1e-4)?,
            gamma: self.get_f64("train.gamma", 1e-3)?,
            obj_pos_weight: self.get_f64("train.obj_pos_weight", 4.0)?,
            lr_step_epoch: self.get_usize("train.lr_step_epoch", 9)?,
            lr_step_factor: self.get_f64("train.lr_step_factor", 0.1)?,
        };
        if cfg.epochs == 0 {
            return Err(Error::data("train.epochs must be >= 1"));
        }
        if !(cfg.lr > 0.0 && cfg.lr.is_finite()) {
            return Err(Error::data("train.lr must be positive"));
        }
        Ok(cfg)
    }

    pub fn data_config(&self) -> Result<DataConfig> {
        let size = self.get_usize("data.size", 64)?;
        if size < 32 || !size.is_power_of_two() {
            return Err(Error::data(format!(
                "data.size must be a power of two >= 32, got {size}"
            )));
        }
        Ok(DataConfig {
            dir: PathBuf::from(self.get_str("data.dir", "out/corpus")),
            count: self.get_usize("data.count", 200)?,
            size,
            night_fraction: self.get_f64("data.night_fraction", 0.5)?,
            max_objects: self.get_usize("data.max_objects", 3)?,
            noise: self.get_bool("data.noise", true)?,
            noise_amplitude: self.get_f64("data.noise_amplitude", 0.3)?,
            rgb_night_sigma: self.get_f64("data.rgb_night_sigma", 0.12)?,
            train_fraction: self.get_f64("data.train_fraction", 0.8)?,
        })
    }

    pub fn eval_config(&self) -> Result<EvalConfig> {
        Ok(EvalConfig {
            score_threshold: self.get_f64("eval.score_threshold", 0.05)?,
            nms_iou: self.get_f64("eval.nms_iou", 0.5)?,
        })
    }

    pub fn out_dir(&self) -> PathBuf {
        PathBuf::from(self.get_str("out.dir", "out/run"))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub gamma: f64,
    pub obj_pos_weight: f64,
    /// Epoch (1-based) at which the learning rate is scaled once;
    /// 0 disables the step.
    pub lr_step_epoch: usize,
    pub lr_step_factor: f64,
}

#[derive(Clone, Debug)]
pub struct DataConfig {
    pub dir: PathBuf,
    pub count: usize,
    pub size: usize,
    pub night_fraction: f64,
    pub max_objects: usize,
    pub noise: bool,
    pub noise_amplitude: f64,
    pub rgb_night_sigma: f64,
    pub train_fraction: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct EvalConfig {
    pub score_threshold: f64,
    pub nms_iou: f64,
}

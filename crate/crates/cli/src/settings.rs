//! Flag, config-file and environment resolution.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use cram_core::config::parse_kv;
use cram_core::{EncoderConfig, Error, ModelConfig, Result, Task, TrainConfig};

pub const SEED_ENV: &str = "CRAM_SEED";

/// Values from `--config`, consulted when a flag is absent.
#[derive(Debug, Default)]
pub struct Settings {
    file: BTreeMap<String, String>,
}

impl Settings {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Settings::default());
        };
        let text = std::fs::read_to_string(path)?;
        let file = parse_kv(&text)?
            .into_iter()
            .map(|(k, v)| (k.replace('-', "_"), v))
            .collect();
        Ok(Settings { file })
    }

    /// Rejects keys no command understands.
    pub fn check_keys(&self, known: &[&str]) -> Result<()> {
        match self.file.keys().find(|k| !known.contains(&k.as_str())) {
            Some(k) => Err(Error::usage(format!("unknown config key `{k}`"))),
            None => Ok(()),
        }
    }

    /// `flag`, else the config file entry `key`.
    pub fn pick<T: FromStr>(&self, flag: Option<T>, key: &str) -> Result<Option<T>> {
        if flag.is_some() {
            return Ok(flag);
        }
        self.file
            .get(key)
            .map(|v| {
                v.parse()
                    .map_err(|_| Error::usage(format!("config key `{key}`: invalid value `{v}`")))
            })
            .transpose()
    }

    pub fn or<T: FromStr>(&self, flag: Option<T>, key: &str, default: T) -> Result<T> {
        Ok(self.pick(flag, key)?.unwrap_or(default))
    }

    /// Flag, then config file, then `CRAM_SEED`, then 0.
    pub fn seed(&self, flag: Option<u64>) -> Result<u64> {
        if let Some(s) = self.pick(flag, "seed")? {
            return Ok(s);
        }
        match std::env::var(SEED_ENV) {
            Ok(v) => v
                .trim()
                .parse()
                .map_err(|_| Error::usage(format!("{SEED_ENV}: invalid seed `{v}`"))),
            Err(_) => Ok(0),
        }
    }

    pub fn task(&self, flag: Option<String>) -> Result<Task> {
        let t: String = self
            .pick(flag, "task")?
            .ok_or_else(|| Error::usage("--task is required (classification or inpainting)"))?;
        Task::parse(&t).map_err(|_| Error::usage(format!("unknown task `{t}`")))
    }
}

/// Every knob of a training run after resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub task: Task,
    pub data: PathBuf,
    pub eval_data: Option<PathBuf>,
    pub out: PathBuf,
    pub seed: u64,
    pub epochs: u64,
    /// Overrides `epochs` when set.
    pub steps: Option<u64>,
    pub batch_size: usize,
    pub n_glimpses: usize,
    /// Side of the square glimpse; 0 picks 3/8 of the canvas.
    pub glimpse_size: usize,
    pub hidden_size: usize,
    pub z_dim: usize,
    pub gv_dim: usize,
    pub mlp_dim: usize,
    pub filters: usize,
    pub downsample: usize,
    pub classes: usize,
    pub cls_hidden: usize,
    pub gen_channels: usize,
    pub disc_channels: usize,
    pub disc_hidden: usize,
    pub lr: f64,
    pub alpha: f64,
    pub beta: f64,
    pub eval_interval: u64,
    pub clue_scale: f32,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("epochs", self.epochs as usize),
            ("batch_size", self.batch_size),
            ("glimpses", self.n_glimpses),
            ("hidden", self.hidden_size),
            ("z_dim", self.z_dim),
            ("gv_dim", self.gv_dim),
            ("mlp_dim", self.mlp_dim),
            ("filters", self.filters),
            ("downsample", self.downsample),
            ("cls_hidden", self.cls_hidden),
            ("gen_channels", self.gen_channels),
            ("disc_channels", self.disc_channels),
            ("disc_hidden", self.disc_hidden),
            ("eval_interval", self.eval_interval as usize),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::usage(format!("--{} must be positive", name.replace('_', "-"))));
        }
        if self.steps == Some(0) {
            return Err(Error::usage("--steps must be positive"));
        }
        if self.task == Task::Classification && self.classes < 2 {
            return Err(Error::usage("--classes must be at least 2"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::usage("--lr must be positive"));
        }
        if !(self.alpha >= 0.0 && self.beta >= 0.0 && self.alpha.is_finite() && self.beta.is_finite()) {
            return Err(Error::usage("--alpha and --beta must be non-negative"));
        }
        if !self.clue_scale.is_finite() {
            return Err(Error::usage("--clue-scale must be finite"));
        }
        Ok(())
    }

    pub fn model(&self, canvas: usize, channels: usize) -> Result<ModelConfig> {
        let glimpse = if self.glimpse_size == 0 {
            (canvas * 3 / 8).max(2)
        } else {
            self.glimpse_size
        };
        let encoder = EncoderConfig {
            image_hw: (canvas, canvas),
            channels,
            glimpse_hw: (glimpse, glimpse),
            n_glimpses: self.n_glimpses,
            hidden_size: self.hidden_size,
            z_dim: self.z_dim,
            gv_dim: self.gv_dim,
            downsample: self.downsample,
            context_channels: self.filters,
            loc_channels: self.filters,
            what_channels: self.filters,
            mlp_dim: self.mlp_dim,
            batch_norm: true,
        };
        let mut m = ModelConfig::new(self.task, encoder);
        m.classes = self.classes;
        m.cls_hidden = self.cls_hidden;
        m.gen_channels = self.gen_channels;
        m.disc_channels = self.disc_channels;
        m.disc_hidden = self.disc_hidden;
        m.validate().map_err(|e| Error::usage(e.to_string()))?;
        Ok(m)
    }

    /// Total steps for a dataset of `n` samples.
    pub fn total_steps(&self, n: usize) -> u64 {
        self.steps
            .unwrap_or_else(|| self.epochs * (n.div_ceil(self.batch_size) as u64))
    }

    pub fn train(&self, n: usize) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            steps: self.total_steps(n),
            batch_size: self.batch_size,
            lr: self.lr,
            alpha: self.alpha,
            beta: self.beta,
            eval_interval: self.eval_interval,
            clue_scale: self.clue_scale,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn with(text: &str) -> Settings {
        Settings {
            file: parse_kv(text).unwrap(),
        }
    }

    #[test]
    fn flags_beat_file_values() {
        let s = with("lr = 0.5\nbatch_size = 7\n");
        assert_eq!(s.or(Some(0.25), "lr", 1e-4).unwrap(), 0.25);
        assert_eq!(s.or(None, "lr", 1e-4).unwrap(), 0.5);
        assert_eq!(s.or(None::<usize>, "batch_size", 32).unwrap(), 7);
        assert_eq!(s.or(None::<usize>, "epochs", 3).unwrap(), 3);
        assert!(s.pick::<u64>(None, "lr").is_err());
    }

    #[test]
    fn seed_precedence() {
        std::env::set_var(SEED_ENV, "77");
        assert_eq!(with("").seed(None).unwrap(), 77);
        assert_eq!(with("seed = 5").seed(None).unwrap(), 5);
        assert_eq!(with("seed = 5").seed(Some(9)).unwrap(), 9);
        std::env::remove_var(SEED_ENV);
        assert_eq!(with("").seed(None).unwrap(), 0);
    }

    #[test]
    fn unknown_keys_are_usage_errors() {
        assert!(with("lr = 1").check_keys(&["lr"]).is_ok());
        assert!(with("lrr = 1").check_keys(&["lr"]).is_err());
    }
}

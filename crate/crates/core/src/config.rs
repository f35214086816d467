//! Model and training configuration with `key = value` text round-trip.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    Classification,
    Inpainting,
}

impl Task {
    pub fn as_str(self) -> &'static str {
        match self {
            Task::Classification => "classification",
            Task::Inpainting => "inpainting",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "classification" | "cls" => Ok(Task::Classification),
            "inpainting" | "inp" => Ok(Task::Inpainting),
            other => Err(Error::config(format!("unknown task `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub image_hw: (usize, usize),
    pub channels: usize,
    pub glimpse_hw: (usize, usize),
    pub n_glimpses: usize,
    pub hidden_size: usize,
    pub z_dim: usize,
    pub gv_dim: usize,
    pub downsample: usize,
    /// Filters of each context-network convolution.
    pub context_channels: usize,
    /// Filters of each localization convolution.
    pub loc_channels: usize,
    /// Filters of each glimpse-network convolution.
    pub what_channels: usize,
    /// Width of the inner layers of every encoder MLP.
    pub mlp_dim: usize,
    pub batch_norm: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            image_hw: (32, 32),
            channels: 1,
            glimpse_hw: (12, 12),
            n_glimpses: 4,
            hidden_size: 256,
            z_dim: 128,
            gv_dim: 128,
            downsample: 4,
            context_channels: 16,
            loc_channels: 16,
            what_channels: 16,
            mlp_dim: 128,
            batch_norm: true,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_glimpses == 0 {
            return Err(Error::config("n_glimpses must be at least 1"));
        }
        let sizes = [
            ("image height", self.image_hw.0),
            ("image width", self.image_hw.1),
            ("channels", self.channels),
            ("glimpse height", self.glimpse_hw.0),
            ("glimpse width", self.glimpse_hw.1),
            ("hidden_size", self.hidden_size),
            ("z_dim", self.z_dim),
            ("gv_dim", self.gv_dim),
            ("downsample", self.downsample),
            ("context_channels", self.context_channels),
            ("loc_channels", self.loc_channels),
            ("what_channels", self.what_channels),
            ("mlp_dim", self.mlp_dim),
        ];
        for (name, v) in sizes {
            if v == 0 {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        let (h, w) = self.image_hw;
        if h % self.downsample != 0 || w % self.downsample != 0 {
            return Err(Error::config(format!(
                "downsample factor {} must divide the image size {h}x{w}",
                self.downsample
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub task: Task,
    pub encoder: EncoderConfig,
    pub classes: usize,
    pub cls_hidden: usize,
    /// Channels of the generator's 4x4 seed; halves with every doubling.
    pub gen_channels: usize,
    pub disc_channels: usize,
    pub disc_hidden: usize,
}

impl ModelConfig {
    pub fn new(task: Task, encoder: EncoderConfig) -> Self {
        ModelConfig {
            task,
            encoder,
            classes: 4,
            cls_hidden: 128,
            gen_channels: 64,
            disc_channels: 16,
            disc_hidden: 64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.task == Task::Classification && self.classes < 2 {
            return Err(Error::config("classes must be at least 2"));
        }
        for (name, v) in [
            ("cls_hidden", self.cls_hidden),
            ("gen_channels", self.gen_channels),
            ("disc_channels", self.disc_channels),
            ("disc_hidden", self.disc_hidden),
        ] {
            if v == 0 {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        Ok(())
    }
}

/// Optimizer and loop settings.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub alpha: f64,
    pub beta: f64,
    pub eval_interval: u64,
    /// Multiplies the clue before it reaches the encoder; 0 ablates it.
    pub clue_scale: f32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            steps: 1000,
            batch_size: 32,
            lr: 1e-4,
            alpha: 100.0,
            beta: 1.0,
            eval_interval: 100,
            clue_scale: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.eval_interval == 0 {
            return Err(Error::config("batch_size and eval_interval must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return Err(Error::config("alpha and beta must be non-negative"));
        }
        Ok(())
    }
}

/// Flat `key = value` view of a model configuration.
pub fn model_to_text(m: &ModelConfig) -> String {
    let e = &m.encoder;
    let mut s = String::new();
    let mut put = |k: &str, v: String| {
        let _ = writeln!(s, "{k} = {v}");
    };
    put("task", m.task.as_str().into());
    put("image_h", e.image_hw.0.to_string());
    put("image_w", e.image_hw.1.to_string());
    put("channels", e.channels.to_string());
    put("glimpse_h", e.glimpse_hw.0.to_string());
    put("glimpse_w", e.glimpse_hw.1.to_string());
    put("glimpses", e.n_glimpses.to_string());
    put("hidden", e.hidden_size.to_string());
    put("z_dim", e.z_dim.to_string());
    put("gv_dim", e.gv_dim.to_string());
    put("downsample", e.downsample.to_string());
    put("context_channels", e.context_channels.to_string());
    put("loc_channels", e.loc_channels.to_string());
    put("what_channels", e.what_channels.to_string());
    put("mlp_dim", e.mlp_dim.to_string());
    put("batch_norm", e.batch_norm.to_string());
    put("classes", m.classes.to_string());
    put("cls_hidden", m.cls_hidden.to_string());
    put("gen_channels", m.gen_channels.to_string());
    put("disc_channels", m.disc_channels.to_string());
    put("disc_hidden", m.disc_hidden.to_string());
    s
}

/// Parses `key = value` lines; `#` starts a comment. Later keys win.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::config(format!("line {}: expected `key = value`", n + 1)))?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

pub fn get<T: std::str::FromStr>(kv: &BTreeMap<String, String>, key: &str) -> Result<Option<T>> {
    kv.get(key)
        .map(|v| {
            v.parse::<T>()
                .map_err(|_| Error::config(format!("invalid value `{v}` for `{key}`")))
        })
        .transpose()
}

fn need<T: std::str::FromStr>(kv: &BTreeMap<String, String>, key: &str) -> Result<T> {
    get(kv, key)?.ok_or_else(|| Error::config(format!("missing key `{key}`")))
}

pub fn model_from_text(text: &str) -> Result<ModelConfig> {
    let kv = parse_kv(text)?;
    let task = Task::parse(&need::<String>(&kv, "task")?)?;
    let encoder = EncoderConfig {
        image_hw: (need(&kv, "image_h")?, need(&kv, "image_w")?),
        channels: need(&kv, "channels")?,
        glimpse_hw: (need(&kv, "glimpse_h")?, need(&kv, "glimpse_w")?),
        n_glimpses: need(&kv, "glimpses")?,
        hidden_size: need(&kv, "hidden")?,
        z_dim: need(&kv, "z_dim")?,
        gv_dim: need(&kv, "gv_dim")?,
        downsample: need(&kv, "downsample")?,
        context_channels: need(&kv, "context_channels")?,
        loc_channels: need(&kv, "loc_channels")?,
        what_channels: need(&kv, "what_channels")?,
        mlp_dim: need(&kv, "mlp_dim")?,
        batch_norm: need(&kv, "batch_norm")?,
    };
    let m = ModelConfig {
        task,
        encoder,
        classes: need(&kv, "classes")?,
        cls_hidden: need(&kv, "cls_hidden")?,
        gen_channels: need(&kv, "gen_channels")?,
        disc_channels: need(&kv, "disc_channels")?,
        disc_hidden: need(&kv, "disc_hidden")?,
    };
    m.validate()?;
    Ok(m)
}

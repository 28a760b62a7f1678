//! Run configuration: plain `key = value` lines with `#` comments.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use crate::clip::Modality;
use crate::dsn::channel_plan;
use crate::dtn::BranchConfig;
use crate::error::{Error, Result};
use crate::frp::FrpConfig;
use crate::model::{ModelConfig, Streams};

use super::augment::AugmentConfig;
use super::synth::{SynthSpec, Task};

/// Seed offset separating the held-out split from the training split.
const EVAL_SEED_OFFSET: u64 = 1_000_003;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Profile {
    /// Full-size geometry.
    Paper,
    /// Small geometry that trains in minutes on one core.
    Desk,
}

impl FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Profile::Paper),
            "desk" => Ok(Profile::Desk),
            other => Err(Error::Config(format!("unknown profile {other}"))),
        }
    }
}

pub fn parse_streams(s: &str) -> Result<Streams> {
    match s {
        "rgbd" => Ok(Streams::Both),
        other => Ok(Streams::Single(other.parse::<Modality>()?)),
    }
}

pub fn streams_name(s: Streams) -> &'static str {
    match s {
        Streams::Both => "rgbd",
        Streams::Single(m) => m.name(),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub modality: Streams,
    pub task: String,
    pub classes: usize,
    pub clips_per_class: usize,
    pub eval_clips_per_class: usize,
    pub frames: usize,
    pub side: usize,
    pub noise: f32,
    pub data: Option<PathBuf>,
    pub eval_data: Option<PathBuf>,
    pub augment: bool,
    pub resize: usize,
    pub crop: usize,
    pub rotation: f64,
    pub layers: usize,
    pub width: f64,
    pub feature_dim: usize,
    pub depth: usize,
    pub branches: Vec<usize>,
    pub heads: usize,
    pub knn_k: usize,
    pub mlp_ratio: usize,
    pub frp: bool,
    pub span: usize,
    pub morph_size: usize,
    pub lambda: f32,
    pub rcm: bool,
    pub gamma: f64,
    pub temperature: f64,
    pub tau_start: f64,
    pub tau_end: f64,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub warmup_epochs: usize,
    /// Global gradient-norm cap; 0 disables clipping.
    pub grad_clip: f64,
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            modality: Streams::Single(Modality::Rgb),
            task: "motion".into(),
            classes: 4,
            clips_per_class: 8,
            eval_clips_per_class: 4,
            frames: 64,
            side: 256,
            noise: 0.05,
            data: None,
            eval_data: None,
            augment: true,
            resize: 256,
            crop: 224,
            rotation: 15.0,
            layers: 6,
            width: 1.0,
            feature_dim: 128,
            depth: 6,
            branches: vec![16, 32, 48],
            heads: 4,
            knn_k: 0,
            mlp_ratio: 2,
            frp: true,
            span: 10,
            morph_size: 3,
            lambda: 2.0,
            rcm: true,
            gamma: 0.5,
            temperature: 0.4,
            tau_start: 0.04,
            tau_end: 0.07,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 3e-4,
            warmup_epochs: 3,
            grad_clip: 0.0,
            epochs: 100,
            batch: 8,
            seed: 0,
            out: PathBuf::from("run"),
        }
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(Error::Config(format!("invalid value {value:?} for {key}"))),
    }
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value.split(',').map(|v| parse_value(key, v.trim())).collect()
}

fn parse_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

impl RunConfig {
    pub fn profile(p: Profile) -> Self {
        match p {
            Profile::Paper => RunConfig::default(),
            Profile::Desk => RunConfig {
                frames: 16,
                side: 64,
                resize: 64,
                crop: 56,
                layers: 3,
                width: 0.5,
                feature_dim: 32,
                depth: 2,
                branches: vec![8, 16],
                grad_clip: 5.0,
                epochs: 200,
                ..RunConfig::default()
            },
        }
    }

    /// Parses a config file. A `profile` key picks the base values; every
    /// other key overrides them in file order.
    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        let mut cfg = match pairs.iter().find(|(k, _)| k == "profile") {
            Some((_, v)) => RunConfig::profile(v.parse()?),
            None => RunConfig::default(),
        };
        for (k, v) in pairs.iter().filter(|(k, _)| k != "profile") {
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "modality" => self.modality = parse_streams(value)?,
            "task" => {
                value.parse::<Task>()?;
                self.task = value.to_string()
            }
            "classes" => self.classes = parse_value(key, value)?,
            "clips_per_class" => self.clips_per_class = parse_value(key, value)?,
            "eval_clips_per_class" => self.eval_clips_per_class = parse_value(key, value)?,
            "frames" => self.frames = parse_value(key, value)?,
            "side" => self.side = parse_value(key, value)?,
            "noise" => self.noise = parse_value(key, value)?,
            "data" => self.data = parse_path(value),
            "eval_data" => self.eval_data = parse_path(value),
            "augment" => self.augment = parse_bool(key, value)?,
            "resize" => self.resize = parse_value(key, value)?,
            "crop" => self.crop = parse_value(key, value)?,
            "rotation" => self.rotation = parse_value(key, value)?,
            "layers" => self.layers = parse_value(key, value)?,
            "width" => self.width = parse_value(key, value)?,
            "feature_dim" => self.feature_dim = parse_value(key, value)?,
            "depth" => self.depth = parse_value(key, value)?,
            "branches" => self.branches = parse_list(key, value)?,
            "heads" => self.heads = parse_value(key, value)?,
            "knn_k" => self.knn_k = parse_value(key, value)?,
            "mlp_ratio" => self.mlp_ratio = parse_value(key, value)?,
            "frp" => self.frp = parse_bool(key, value)?,
            "span" => self.span = parse_value(key, value)?,
            "morph_size" => self.morph_size = parse_value(key, value)?,
            "lambda" => self.lambda = parse_value(key, value)?,
            "rcm" => self.rcm = parse_bool(key, value)?,
            "gamma" => self.gamma = parse_value(key, value)?,
            "temperature" => self.temperature = parse_value(key, value)?,
            "tau_start" => self.tau_start = parse_value(key, value)?,
            "tau_end" => self.tau_end = parse_value(key, value)?,
            "lr" => self.lr = parse_value(key, value)?,
            "momentum" => self.momentum = parse_value(key, value)?,
            "weight_decay" => self.weight_decay = parse_value(key, value)?,
            "warmup_epochs" => self.warmup_epochs = parse_value(key, value)?,
            "grad_clip" => self.grad_clip = parse_value(key, value)?,
            "epochs" => self.epochs = parse_value(key, value)?,
            "batch" => self.batch = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            "out" => self.out = PathBuf::from(value),
            other => return Err(Error::Config(format!("unknown key {other}"))),
        }
        Ok(())
    }

    /// Every key, in a form `parse` reads back to an equal config.
    pub fn to_text(&self) -> String {
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let list = self.branches.iter().map(|b| b.to_string()).collect::<Vec<_>>().join(",");
        let mut s = String::new();
        let rows: Vec<(&str, String)> = vec![
            ("modality", streams_name(self.modality).into()),
            ("task", self.task.clone()),
            ("classes", self.classes.to_string()),
            ("clips_per_class", self.clips_per_class.to_string()),
            ("eval_clips_per_class", self.eval_clips_per_class.to_string()),
            ("frames", self.frames.to_string()),
            ("side", self.side.to_string()),
            ("noise", self.noise.to_string()),
            ("data", path(&self.data)),
            ("eval_data", path(&self.eval_data)),
            ("augment", self.augment.to_string()),
            ("resize", self.resize.to_string()),
            ("crop", self.crop.to_string()),
            ("rotation", self.rotation.to_string()),
            ("layers", self.layers.to_string()),
            ("width", self.width.to_string()),
            ("feature_dim", self.feature_dim.to_string()),
            ("depth", self.depth.to_string()),
            ("branches", list),
            ("heads", self.heads.to_string()),
            ("knn_k", self.knn_k.to_string()),
            ("mlp_ratio", self.mlp_ratio.to_string()),
            ("frp", self.frp.to_string()),
            ("span", self.span.to_string()),
            ("morph_size", self.morph_size.to_string()),
            ("lambda", self.lambda.to_string()),
            ("rcm", self.rcm.to_string()),
            ("gamma", self.gamma.to_string()),
            ("temperature", self.temperature.to_string()),
            ("tau_start", self.tau_start.to_string()),
            ("tau_end", self.tau_end.to_string()),
            ("lr", self.lr.to_string()),
            ("momentum", self.momentum.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("warmup_epochs", self.warmup_epochs.to_string()),
            ("grad_clip", self.grad_clip.to_string()),
            ("epochs", self.epochs.to_string()),
            ("batch", self.batch.to_string()),
            ("seed", self.seed.to_string()),
            ("out", self.out.display().to_string()),
        ];
        for (k, v) in rows {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    pub fn task(&self) -> Result<Task> {
        match self.task.parse::<Task>()? {
            Task::Motion(_) => Task::motions(self.classes),
            Task::Paired => Ok(Task::Paired),
        }
    }

    pub fn num_classes(&self) -> Result<usize> {
        Ok(self.task()?.classes())
    }

    pub fn synth_spec(&self, eval: bool) -> Result<SynthSpec> {
        Ok(SynthSpec {
            task: self.task()?,
            clips_per_class: if eval { self.eval_clips_per_class } else { self.clips_per_class },
            frames: self.frames,
            side: self.side,
            noise: self.noise,
            seed: if eval { self.seed.wrapping_add(EVAL_SEED_OFFSET) } else { self.seed },
        })
    }

    pub fn augment_config(&self) -> AugmentConfig {
        AugmentConfig {
            resize: self.resize,
            crop: self.crop,
            max_rotation_deg: self.rotation,
        }
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let cfg = ModelConfig {
            classes: self.num_classes()?,
            frames: self.frames,
            crop: self.crop,
            channels: channel_plan(self.layers, self.width, self.feature_dim)?,
            branches: self
                .branches
                .iter()
                .map(|&frames| BranchConfig {
                    frames,
                    depth: self.depth,
                    heads: self.heads,
                    knn_k: (self.knn_k > 0).then_some(self.knn_k),
                    mlp_ratio: self.mlp_ratio,
                })
                .collect(),
            frp: FrpConfig {
                span: self.span,
                morph_size: self.morph_size,
                lambda: self.lambda,
            },
            use_frp: self.frp,
            use_rcm: self.rcm,
            temperature: self.temperature,
            gamma: self.gamma,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config()?;
        self.augment_config().validate()?;
        if self.data.is_none() {
            self.synth_spec(false)?.validate()?;
        }
        if self.eval_data.is_none() && self.eval_clips_per_class > 0 {
            self.synth_spec(true)?.validate()?;
        }
        if self.epochs == 0 || self.batch == 0 {
            return Err(Error::Parameter("epochs and batch must be positive".into()));
        }
        if !(self.grad_clip >= 0.0) {
            return Err(Error::Parameter(format!("grad_clip must be nonnegative, got {}", self.grad_clip)));
        }
        if self.tau_start <= 0.0 || self.tau_end <= 0.0 {
            return Err(Error::Parameter("sharpness schedule must stay positive".into()));
        }
        Ok(())
    }
}

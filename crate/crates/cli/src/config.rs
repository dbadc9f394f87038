//! Flat `key=value` run configuration.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use flowcast::flownet::FlowNetConfig;
use flowcast::loss::LossWeights;
use flowcast::model::{FusionKind, ModelConfig, SegMode};
use flowcast::scenes::SceneSpec;
use flowcast::train::TrainConfig;
use flowcast::{Error, Result};

/// Name of the effective configuration written into every output directory.
pub const ECHO_FILE: &str = "config.txt";

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub deterministic: bool,
    pub scene: SceneSpec,
    pub train_sequences: usize,
    pub val_sequences: usize,

    pub flow_width1: usize,
    pub flow_width2: usize,
    pub flow_features: usize,
    /// 0 disables the recurrent stage.
    pub lstm_hidden: usize,
    pub fusion: FusionKind,
    pub fusion_width: usize,
    /// `oracle` or `learned`.
    pub seg: String,
    pub seg_width: usize,
    pub oracle_smoothing: f64,

    pub base_lr: f64,
    pub power: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub max_iterations: u64,
    pub unroll_pairs: usize,
    pub step_size: usize,
    pub future_jump: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    /// Step the reconstruction weight down over training.
    pub anneal_lambda2: bool,
    pub clip_norm: f64,
    pub flow_supervision: f64,
    pub train_flow_cnn: bool,
    pub train_seg: bool,
    pub recurrent_finetune: bool,
    /// 0 picks half the jump when even, else the whole jump.
    pub sub_step: usize,
    pub log_every: u64,
    pub checkpoint_every: u64,
    /// Use cached features of the frozen flow encoder during training.
    pub cache_features: bool,

    pub pretrain_iterations: u64,
    pub pretrain_lr: f64,
    pub pretrain_strides: Vec<usize>,

    /// Frame jump multiplier of the mid-term ablation.
    pub mid_term_factor: usize,

    pub data_dir: PathBuf,
    /// Empty means none.
    pub flow_checkpoint: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        let m = ModelConfig::default();
        RunConfig {
            seed: 0,
            deterministic: false,
            scene: SceneSpec::default(),
            train_sequences: 64,
            val_sequences: 16,
            flow_width1: m.flow.width1,
            flow_width2: m.flow.width2,
            flow_features: m.flow.features,
            lstm_hidden: m.lstm_hidden.unwrap_or(0),
            fusion: m.fusion,
            fusion_width: m.fusion_width,
            seg: "oracle".into(),
            seg_width: 16,
            oracle_smoothing: 0.0,
            base_lr: t.base_lr,
            power: t.power,
            weight_decay: t.weight_decay,
            momentum: t.momentum,
            batch_size: t.batch_size,
            max_iterations: t.max_iterations,
            unroll_pairs: t.unroll_pairs,
            step_size: t.step_size,
            future_jump: t.future_jump,
            lambda1: 1.0,
            lambda2: 1.0,
            anneal_lambda2: true,
            clip_norm: t.clip_norm,
            flow_supervision: t.flow_supervision,
            train_flow_cnn: t.train_flow_cnn,
            train_seg: t.train_seg,
            recurrent_finetune: t.recurrent_finetune,
            sub_step: 0,
            log_every: t.log_every,
            checkpoint_every: t.checkpoint_every,
            cache_features: false,
            pretrain_iterations: 2000,
            pretrain_lr: 0.1,
            pretrain_strides: t.pretrain_strides,
            mid_term_factor: 3,
            data_dir: PathBuf::from("data"),
            flow_checkpoint: PathBuf::new(),
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("invalid value {v:?} for {key}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean {v:?} for {key}"))),
    }
}

impl RunConfig {
    /// Defaults overridden by the lines of `text`.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = RunConfig::default();
        c.apply_text(text)?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Io {
                path: path.to_path_buf(),
                source: e,
            })?;
        Self::from_text(&text)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got {line:?}", n + 1)))?;
            self.set(k.trim(), v.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    /// Apply one setting; unknown keys are an error.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "seed" => {
                self.seed = parse(key, v)?;
                self.scene.seed = self.seed;
            }
            "deterministic" => self.deterministic = parse_bool(key, v)?,
            "train_sequences" => self.train_sequences = parse(key, v)?,
            "val_sequences" => self.val_sequences = parse(key, v)?,
            "flow_width1" => self.flow_width1 = parse(key, v)?,
            "flow_width2" => self.flow_width2 = parse(key, v)?,
            "flow_features" => self.flow_features = parse(key, v)?,
            "lstm_hidden" => self.lstm_hidden = parse(key, v)?,
            "fusion" => self.fusion = v.parse()?,
            "fusion_width" => self.fusion_width = parse(key, v)?,
            "seg" => {
                if v != "oracle" && v != "learned" {
                    return Err(Error::Config(format!("seg must be oracle or learned, got {v:?}")));
                }
                self.seg = v.to_string();
            }
            "seg_width" => self.seg_width = parse(key, v)?,
            "oracle_smoothing" => self.oracle_smoothing = parse(key, v)?,
            "base_lr" => self.base_lr = parse(key, v)?,
            "power" => self.power = parse(key, v)?,
            "weight_decay" => self.weight_decay = parse(key, v)?,
            "momentum" => self.momentum = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "max_iterations" => self.max_iterations = parse(key, v)?,
            "unroll_pairs" => self.unroll_pairs = parse(key, v)?,
            "step_size" => self.step_size = parse(key, v)?,
            "future_jump" => self.future_jump = parse(key, v)?,
            "lambda1" => self.lambda1 = parse(key, v)?,
            "lambda2" => self.lambda2 = parse(key, v)?,
            "anneal_lambda2" => self.anneal_lambda2 = parse_bool(key, v)?,
            "clip_norm" => self.clip_norm = parse(key, v)?,
            "flow_supervision" => self.flow_supervision = parse(key, v)?,
            "train_flow_cnn" => self.train_flow_cnn = parse_bool(key, v)?,
            "train_seg" => self.train_seg = parse_bool(key, v)?,
            "recurrent_finetune" => self.recurrent_finetune = parse_bool(key, v)?,
            "sub_step" => self.sub_step = parse(key, v)?,
            "log_every" => self.log_every = parse(key, v)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, v)?,
            "cache_features" => self.cache_features = parse_bool(key, v)?,
            "pretrain_iterations" => self.pretrain_iterations = parse(key, v)?,
            "pretrain_lr" => self.pretrain_lr = parse(key, v)?,
            "pretrain_strides" => {
                self.pretrain_strides = v
                    .split(',')
                    .map(|s| parse(key, s.trim()))
                    .collect::<Result<_>>()?
            }
            "mid_term_factor" => self.mid_term_factor = parse(key, v)?,
            "data_dir" => self.data_dir = PathBuf::from(v),
            "flow_checkpoint" => self.flow_checkpoint = PathBuf::from(v),
            _ => {
                if !self.scene.set(key, v)? {
                    return Err(Error::Config(format!("unknown key {key:?}")));
                }
            }
        }
        Ok(())
    }

    /// Every key with its effective value; parses back to `self`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let b = |v: bool| if v { "true" } else { "false" };
        let strides: Vec<String> = self.pretrain_strides.iter().map(|v| v.to_string()).collect();
        let _ = writeln!(s, "seed={}", self.seed);
        let _ = writeln!(s, "deterministic={}", b(self.deterministic));
        for line in self.scene.to_text().lines().filter(|l| !l.starts_with("seed=")) {
            let _ = writeln!(s, "{line}");
        }
        let _ = writeln!(s, "train_sequences={}", self.train_sequences);
        let _ = writeln!(s, "val_sequences={}", self.val_sequences);
        let _ = writeln!(s, "flow_width1={}", self.flow_width1);
        let _ = writeln!(s, "flow_width2={}", self.flow_width2);
        let _ = writeln!(s, "flow_features={}", self.flow_features);
        let _ = writeln!(s, "lstm_hidden={}", self.lstm_hidden);
        let _ = writeln!(s, "fusion={}", self.fusion);
        let _ = writeln!(s, "fusion_width={}", self.fusion_width);
        let _ = writeln!(s, "seg={}", self.seg);
        let _ = writeln!(s, "seg_width={}", self.seg_width);
        let _ = writeln!(s, "oracle_smoothing={}", self.oracle_smoothing);
        let _ = writeln!(s, "base_lr={}", self.base_lr);
        let _ = writeln!(s, "power={}", self.power);
        let _ = writeln!(s, "weight_decay={}", self.weight_decay);
        let _ = writeln!(s, "momentum={}", self.momentum);
        let _ = writeln!(s, "batch_size={}", self.batch_size);
        let _ = writeln!(s, "max_iterations={}", self.max_iterations);
        let _ = writeln!(s, "unroll_pairs={}", self.unroll_pairs);
        let _ = writeln!(s, "step_size={}", self.step_size);
        let _ = writeln!(s, "future_jump={}", self.future_jump);
        let _ = writeln!(s, "lambda1={}", self.lambda1);
        let _ = writeln!(s, "lambda2={}", self.lambda2);
        let _ = writeln!(s, "anneal_lambda2={}", b(self.anneal_lambda2));
        let _ = writeln!(s, "clip_norm={}", self.clip_norm);
        let _ = writeln!(s, "flow_supervision={}", self.flow_supervision);
        let _ = writeln!(s, "train_flow_cnn={}", b(self.train_flow_cnn));
        let _ = writeln!(s, "train_seg={}", b(self.train_seg));
        let _ = writeln!(s, "recurrent_finetune={}", b(self.recurrent_finetune));
        let _ = writeln!(s, "sub_step={}", self.sub_step);
        let _ = writeln!(s, "log_every={}", self.log_every);
        let _ = writeln!(s, "checkpoint_every={}", self.checkpoint_every);
        let _ = writeln!(s, "cache_features={}", b(self.cache_features));
        let _ = writeln!(s, "pretrain_iterations={}", self.pretrain_iterations);
        let _ = writeln!(s, "pretrain_lr={}", self.pretrain_lr);
        let _ = writeln!(s, "pretrain_strides={}", strides.join(","));
        let _ = writeln!(s, "mid_term_factor={}", self.mid_term_factor);
        let _ = writeln!(s, "data_dir={}", self.data_dir.display());
        let _ = writeln!(s, "flow_checkpoint={}", self.flow_checkpoint.display());
        s
    }

    pub fn echo(&self, out_dir: &Path) -> Result<()> {
        fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;
        let path = out_dir.join(ECHO_FILE);
        fs::write(&path, self.to_text()).map_err(|e| io_err(&path, e))
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let seg = match self.seg.as_str() {
            "oracle" => SegMode::Oracle {
                smoothing: self.oracle_smoothing,
            },
            _ => SegMode::Learned { width: self.seg_width },
        };
        Ok(ModelConfig {
            flow: FlowNetConfig {
                width1: self.flow_width1,
                width2: self.flow_width2,
                features: self.flow_features,
            },
            lstm_hidden: (self.lstm_hidden > 0).then_some(self.lstm_hidden),
            fusion: self.fusion,
            fusion_width: self.fusion_width,
            seg,
            num_classes: self.scene.num_classes(),
        })
    }

    pub fn train_config(&self) -> TrainConfig {
        let loss_weights = if self.anneal_lambda2 {
            LossWeights {
                lambda1: self.lambda1,
                lambda2: self.lambda2,
                ..LossWeights::annealed(self.max_iterations)
            }
        } else {
            LossWeights {
                lambda1: self.lambda1,
                lambda2: self.lambda2,
                anneal_schedule: Vec::new(),
            }
        };
        TrainConfig {
            base_lr: self.base_lr,
            power: self.power,
            weight_decay: self.weight_decay,
            momentum: self.momentum,
            batch_size: self.batch_size,
            max_iterations: self.max_iterations,
            unroll_pairs: self.unroll_pairs,
            step_size: self.step_size,
            future_jump: self.future_jump,
            seed: self.seed,
            loss_weights,
            clip_norm: self.clip_norm,
            flow_supervision: self.flow_supervision,
            train_flow_cnn: self.train_flow_cnn,
            train_seg: self.train_seg,
            recurrent_finetune: self.recurrent_finetune,
            sub_step: (self.sub_step > 0).then_some(self.sub_step),
            pretrain_strides: self.pretrain_strides.clone(),
            log_every: self.log_every,
            checkpoint_every: self.checkpoint_every,
        }
    }

    pub fn pretrain_config(&self) -> TrainConfig {
        TrainConfig {
            base_lr: self.pretrain_lr,
            max_iterations: self.pretrain_iterations,
            ..self.train_config()
        }
    }
}

pub fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn echo_round_trips() {
        let mut c = RunConfig::default();
        c.apply_text("seed=7\nfusion=add\nvelocity=1,3 # faster\npretrain_strides=1,4\n").unwrap();
        assert_eq!(c.scene.seed, 7);
        assert_eq!(RunConfig::from_text(&c.to_text()).unwrap(), c);
        assert_eq!(RunConfig::from_text(&RunConfig::default().to_text()).unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_and_malformed_keys_are_rejected() {
        assert!(matches!(RunConfig::from_text("colour=red"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_text("max_iterations"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_text("max_iterations=lots"), Err(Error::Config(_))));
    }
}

//! Flat `key = value` run configuration.
//!
//! Keys carry a section prefix (`model.`, `train.`, `data.`, `eval.`).
//! Blank lines and `#` comments are ignored; unknown keys are errors.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::data::{SplitCounts, SynthSpec};
use crate::error::{Error, Result};
use crate::layers::CodebookMode;
use crate::losses::ReconMode;
use crate::model::ModelConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// K_batch; also the InfoNCE contrast size.
    pub batch_size: usize,
    pub steps: u64,
    pub lr: f64,
    pub scorer_lr: f64,
    pub mi_loss: bool,
    pub seed: u64,
    /// Snapshot every this many steps (0 = final checkpoint only).
    pub snapshot_interval: u64,
    /// Training crop length in frames.
    pub crop: usize,
    /// Re-seed unused codebook rows every this many steps (0 = never).
    pub reseed_interval: u64,
    /// Consecutive non-finite steps tolerated before aborting.
    pub max_bad_steps: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 16,
            steps: 20_000,
            lr: 3e-4,
            scorer_lr: 3e-4,
            mi_loss: true,
            seed: 0,
            snapshot_interval: 0,
            crop: 32,
            reseed_interval: 500,
            max_bad_steps: 20,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct DataConfig {
    pub spec: SynthSpec,
    pub counts: SplitCounts,
    pub holdout_styles: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub seed: u64,
    /// Full-batch iterations for linear probes.
    pub probe_steps: usize,
    pub probe_lr: f64,
    pub probe_l2: f64,
    /// Neighbouring code frames on each side fed to the content probe.
    pub content_window: usize,
    /// Style-judge accuracy on raw held-out features below which evaluation is refused.
    pub judge_min_accuracy: f64,
    /// Iterations for the from-scratch few-shot encoder.
    pub scratch_steps: usize,
    pub scratch_lr: f64,
    /// Cap on train-split utterances used to fit probes (0 = all).
    pub probe_train_limit: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            seed: 0,
            probe_steps: 300,
            probe_lr: 0.5,
            probe_l2: 1e-4,
            content_window: 1,
            judge_min_accuracy: 0.95,
            scratch_steps: 200,
            scratch_lr: 1e-3,
            probe_train_limit: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

fn parse_list(key: &str, v: &str) -> Result<Vec<usize>> {
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|s| parse(key, s.trim())).collect()
}

fn parse_switch(key: &str, v: &str) -> Result<bool> {
    match v {
        "on" | "true" | "1" => Ok(true),
        "off" | "false" | "0" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected on|off, got {v:?}"))),
    }
}

fn join(xs: &[usize]) -> String {
    xs.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

impl RunConfig {
    /// Every key in serialization order.
    pub fn keys() -> Vec<String> {
        RunConfig::default()
            .to_text()
            .lines()
            .filter_map(|l| l.split_once(" = ").map(|(k, _)| k.to_string()))
            .collect()
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let m = &mut self.model;
        let t = &mut self.train;
        let d = &mut self.data;
        let e = &mut self.eval;
        match key {
            "model.feature_dim" => m.feature_dim = parse(key, v)?,
            "model.content_dim" => m.content_dim = parse(key, v)?,
            "model.style_dim" => m.style_dim = parse(key, v)?,
            "model.codebook_size" => m.codebook_size = parse(key, v)?,
            "model.kernel" => m.kernel = parse(key, v)?,
            "model.content_layers" => m.content_layers = parse(key, v)?,
            "model.content_width" => m.content_width = parse(key, v)?,
            "model.content_stride_layer" => m.content_stride_layer = parse(key, v)?,
            "model.style_layers" => m.style_layers = parse(key, v)?,
            "model.style_width" => m.style_width = parse(key, v)?,
            "model.style_stride_layers" => m.style_stride_layers = parse_list(key, v)?,
            "model.decoder_layers" => m.decoder_layers = parse(key, v)?,
            "model.decoder_width" => m.decoder_width = parse(key, v)?,
            "model.decoder_concat_layers" => m.decoder_concat_layers = parse_list(key, v)?,
            "model.scorer_hidden" => m.scorer_hidden = parse(key, v)?,
            "model.gamma" => m.gamma = parse(key, v)?,
            "model.recon_mode" => {
                m.recon_mode = match v {
                    "mean" => ReconMode::Mean,
                    "literal" => ReconMode::Literal,
                    "sum" => ReconMode::Sum,
                    _ => {
                        return Err(Error::Config(format!(
                            "{key}: expected mean|literal|sum, got {v:?}"
                        )))
                    }
                }
            }
            "model.codebook_mode" => {
                m.codebook_mode = match (v, m.codebook_mode) {
                    ("ema", CodebookMode::Ema { .. }) => m.codebook_mode,
                    ("ema", CodebookMode::Loss) => CodebookMode::default(),
                    ("loss", _) => CodebookMode::Loss,
                    _ => {
                        return Err(Error::Config(format!(
                            "{key}: expected ema|loss, got {v:?}"
                        )))
                    }
                }
            }
            "model.codebook_decay" | "model.codebook_epsilon" => {
                let x: f64 = parse(key, v)?;
                if let CodebookMode::Ema { decay, epsilon } = &mut m.codebook_mode {
                    if key.ends_with("decay") {
                        *decay = x;
                    } else {
                        *epsilon = x;
                    }
                }
            }
            "train.batch_size" => t.batch_size = parse(key, v)?,
            "train.steps" => t.steps = parse(key, v)?,
            "train.lr" => t.lr = parse(key, v)?,
            "train.scorer_lr" => t.scorer_lr = parse(key, v)?,
            "train.mi_loss" => t.mi_loss = parse_switch(key, v)?,
            "train.seed" => t.seed = parse(key, v)?,
            "train.snapshot_interval" => t.snapshot_interval = parse(key, v)?,
            "train.crop" => t.crop = parse(key, v)?,
            "train.reseed_interval" => t.reseed_interval = parse(key, v)?,
            "train.max_bad_steps" => t.max_bad_steps = parse(key, v)?,
            "data.vocab" => d.spec.vocab = parse(key, v)?,
            "data.styles" => d.spec.styles = parse(key, v)?,
            "data.feature_dim" => d.spec.feature_dim = parse(key, v)?,
            "data.min_frames" => d.spec.min_frames = parse(key, v)?,
            "data.max_frames" => d.spec.max_frames = parse(key, v)?,
            "data.min_symbols" => d.spec.min_symbols = parse(key, v)?,
            "data.max_symbols" => d.spec.max_symbols = parse(key, v)?,
            "data.noise" => d.spec.noise = parse(key, v)?,
            "data.gain_spread" => d.spec.gain_spread = parse(key, v)?,
            "data.offset_scale" => d.spec.offset_scale = parse(key, v)?,
            "data.tilt_scale" => d.spec.tilt_scale = parse(key, v)?,
            "data.seed" => d.spec.seed = parse(key, v)?,
            "data.train" => d.counts.train = parse(key, v)?,
            "data.dev" => d.counts.dev = parse(key, v)?,
            "data.test" => d.counts.test = parse(key, v)?,
            "data.holdout_styles" => d.holdout_styles = parse(key, v)?,
            "eval.seed" => e.seed = parse(key, v)?,
            "eval.probe_steps" => e.probe_steps = parse(key, v)?,
            "eval.probe_lr" => e.probe_lr = parse(key, v)?,
            "eval.probe_l2" => e.probe_l2 = parse(key, v)?,
            "eval.content_window" => e.content_window = parse(key, v)?,
            "eval.judge_min_accuracy" => e.judge_min_accuracy = parse(key, v)?,
            "eval.scratch_steps" => e.scratch_steps = parse(key, v)?,
            "eval.scratch_lr" => e.scratch_lr = parse(key, v)?,
            "eval.probe_train_limit" => e.probe_train_limit = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key = value, got {raw:?}", n + 1))
            })?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = RunConfig::default();
        c.apply_text(text)?;
        Ok(c)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::from_text(&fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        let d = &self.data;
        let s = &d.spec;
        let e = &self.eval;
        let mut o = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(o, "{k} = {v}");
        };
        kv("model.feature_dim", m.feature_dim.to_string());
        kv("model.content_dim", m.content_dim.to_string());
        kv("model.style_dim", m.style_dim.to_string());
        kv("model.codebook_size", m.codebook_size.to_string());
        kv("model.kernel", m.kernel.to_string());
        kv("model.content_layers", m.content_layers.to_string());
        kv("model.content_width", m.content_width.to_string());
        kv(
            "model.content_stride_layer",
            m.content_stride_layer.to_string(),
        );
        kv("model.style_layers", m.style_layers.to_string());
        kv("model.style_width", m.style_width.to_string());
        kv("model.style_stride_layers", join(&m.style_stride_layers));
        kv("model.decoder_layers", m.decoder_layers.to_string());
        kv("model.decoder_width", m.decoder_width.to_string());
        kv(
            "model.decoder_concat_layers",
            join(&m.decoder_concat_layers),
        );
        kv("model.scorer_hidden", m.scorer_hidden.to_string());
        kv("model.gamma", m.gamma.to_string());
        kv(
            "model.recon_mode",
            match m.recon_mode {
                ReconMode::Mean => "mean",
                ReconMode::Literal => "literal",
                ReconMode::Sum => "sum",
            }
            .into(),
        );
        match m.codebook_mode {
            CodebookMode::Ema { decay, epsilon } => {
                kv("model.codebook_mode", "ema".into());
                kv("model.codebook_decay", decay.to_string());
                kv("model.codebook_epsilon", epsilon.to_string());
            }
            CodebookMode::Loss => kv("model.codebook_mode", "loss".into()),
        }
        kv("train.batch_size", t.batch_size.to_string());
        kv("train.steps", t.steps.to_string());
        kv("train.lr", t.lr.to_string());
        kv("train.scorer_lr", t.scorer_lr.to_string());
        kv("train.mi_loss", if t.mi_loss { "on" } else { "off" }.into());
        kv("train.seed", t.seed.to_string());
        kv("train.snapshot_interval", t.snapshot_interval.to_string());
        kv("train.crop", t.crop.to_string());
        kv("train.reseed_interval", t.reseed_interval.to_string());
        kv("train.max_bad_steps", t.max_bad_steps.to_string());
        kv("data.vocab", s.vocab.to_string());
        kv("data.styles", s.styles.to_string());
        kv("data.feature_dim", s.feature_dim.to_string());
        kv("data.min_frames", s.min_frames.to_string());
        kv("data.max_frames", s.max_frames.to_string());
        kv("data.min_symbols", s.min_symbols.to_string());
        kv("data.max_symbols", s.max_symbols.to_string());
        kv("data.noise", s.noise.to_string());
        kv("data.gain_spread", s.gain_spread.to_string());
        kv("data.offset_scale", s.offset_scale.to_string());
        kv("data.tilt_scale", s.tilt_scale.to_string());
        kv("data.seed", s.seed.to_string());
        kv("data.train", d.counts.train.to_string());
        kv("data.dev", d.counts.dev.to_string());
        kv("data.test", d.counts.test.to_string());
        kv("data.holdout_styles", d.holdout_styles.to_string());
        kv("eval.seed", e.seed.to_string());
        kv("eval.probe_steps", e.probe_steps.to_string());
        kv("eval.probe_lr", e.probe_lr.to_string());
        kv("eval.probe_l2", e.probe_l2.to_string());
        kv("eval.content_window", e.content_window.to_string());
        kv("eval.judge_min_accuracy", e.judge_min_accuracy.to_string());
        kv("eval.scratch_steps", e.scratch_steps.to_string());
        kv("eval.scratch_lr", e.scratch_lr.to_string());
        kv("eval.probe_train_limit", e.probe_train_limit.to_string());
        o
    }

    /// Only the keys of one section, e.g. `"data."`.
    pub fn section_text(&self, prefix: &str) -> String {
        self.to_text()
            .lines()
            .filter(|l| l.starts_with(prefix))
            .map(|l| format!("{l}\n"))
            .collect()
    }

    pub fn hash(&self) -> [u8; 32] {
        use sha2::{Digest, Sha256};
        Sha256::digest(self.to_text().as_bytes()).into()
    }

    /// Hash of everything that determines a training trajectory; the step
    /// budget and snapshot cadence are excluded so a run can be extended.
    pub fn trajectory_hash(&self) -> [u8; 32] {
        let mut c = self.clone();
        c.train.steps = 0;
        c.train.snapshot_interval = 0;
        c.eval = EvalConfig::default();
        c.hash()
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.data.spec.validate()?;
        let t = &self.train;
        let bad = |m: String| Err(Error::Config(m));
        if self.model.feature_dim != self.data.spec.feature_dim {
            return bad(format!(
                "model.feature_dim = {} but data.feature_dim = {}",
                self.model.feature_dim, self.data.spec.feature_dim
            ));
        }
        if t.batch_size < 1 || (t.mi_loss && t.batch_size < 2) {
            return bad(
                "train.batch_size must be >= 2 with the MI loss on (>= 1 otherwise)".into(),
            );
        }
        if !(t.lr > 0.0) || !(t.scorer_lr > 0.0) {
            return bad("train.lr and train.scorer_lr must be > 0".into());
        }
        if t.crop < self.model.min_style_len().max(self.model.min_content_len()) {
            return bad(format!(
                "train.crop = {} is shorter than the encoders' minimum {}",
                t.crop,
                self.model.min_style_len()
            ));
        }
        if t.crop > self.data.spec.min_len() {
            return bad(format!(
                "train.crop = {} exceeds the shortest possible utterance ({})",
                t.crop,
                self.data.spec.min_len()
            ));
        }
        let e = &self.eval;
        if e.probe_steps == 0 || !(e.probe_lr > 0.0) || !(e.probe_l2 >= 0.0) {
            return bad(
                "eval.probe_steps, eval.probe_lr must be > 0 and eval.probe_l2 >= 0".into(),
            );
        }
        if !(0.0..=1.0).contains(&e.judge_min_accuracy) {
            return bad("eval.judge_min_accuracy must be in [0, 1]".into());
        }
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }
}

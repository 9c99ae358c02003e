//! Run configuration in a flat `key = value` format with `[section]` headers.
//!
//! ```text
//! # comment
//! [frontend]
//! mask_ratio_audio = 0.15
//! [decode]
//! beam_width = 8
//! ```
//!
//! Omitted keys keep their defaults; unknown keys and out-of-range values
//! are rejected with the key and line number. [`Config::to_text`] writes
//! every key, and parsing that text reproduces the same config.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::{CorpusConfig, PartitionThresholds};
use crate::decode::Mode;
use crate::model::ModelConfig;
use crate::trainer::{Experiment, TrainConfig};
use crate::{seed, Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub seed: u64,
    pub experiment: Experiment,
    pub threads: usize,
    pub corpus: CorpusConfig,
    pub noise_std: f64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub beam_width: usize,
    pub decode_mode: Mode,
    pub data_dir: PathBuf,
    pub run_dir: PathBuf,
}

impl Default for Config {
    fn default() -> Self {
        let model = ModelConfig::default();
        let corpus = CorpusConfig {
            feature_dim: model.frontend.feature_dim,
            ..CorpusConfig::default()
        };
        Self {
            seed: 0,
            experiment: Experiment::E0,
            threads: 1,
            corpus,
            noise_std: PartitionThresholds::default().noise_std,
            model,
            train: TrainConfig::default(),
            beam_width: 8,
            decode_mode: Mode::NonCausal,
            data_dir: PathBuf::from("data"),
            run_dir: PathBuf::from("run"),
        }
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "causal" => Ok(Mode::Causal),
            "noncausal" => Ok(Mode::NonCausal),
            _ => Err(Error::usage(format!("unknown decode mode `{s}` (expected causal or noncausal)"))),
        }
    }
}

fn parse<T: FromStr>(v: &str) -> std::result::Result<T, String> {
    v.parse().map_err(|_| format!("cannot parse `{v}`"))
}

fn at_least<T: FromStr + PartialOrd + Display + Copy>(v: &str, min: T) -> std::result::Result<T, String> {
    let x: T = parse(v)?;
    if x < min {
        return Err(format!("must be at least {min}, got {x}"));
    }
    Ok(x)
}

fn unit_open(v: &str) -> std::result::Result<f64, String> {
    let x: f64 = parse(v)?;
    if !(x > 0.0 && x < 1.0) {
        return Err(format!("must lie in (0, 1), got {x}"));
    }
    Ok(x)
}

fn non_negative(v: &str) -> std::result::Result<f64, String> {
    let x: f64 = parse(v)?;
    if !(x >= 0.0 && x.is_finite()) {
        return Err(format!("must be finite and non-negative, got {x}"));
    }
    Ok(x)
}

fn positive(v: &str) -> std::result::Result<f64, String> {
    let x = non_negative(v)?;
    if x == 0.0 {
        return Err("must be positive".into());
    }
    Ok(x)
}

impl Config {
    /// A small preset that synthesizes and trains in seconds.
    pub fn tiny() -> Self {
        let mut c = Config::default();
        let co = &mut c.corpus;
        co.supervised = 80;
        co.unsup_audio = 30;
        co.unsup_text = 80;
        co.held_out = 25;
        co.common_words = 12;
        co.frequent_markers = 3;
        co.rare_stratum_count = 4;
        co.text_only_words = 10;
        co.t_common = 6;
        let m = &mut c.model;
        m.frontend.feature_dim = 4;
        m.frontend.stack = 2;
        m.frontend.stride = 2;
        let e = &mut m.encoder;
        e.causal_layers = 1;
        e.noncausal_layers = 1;
        e.model_dim = 8;
        e.heads = 2;
        e.right_context_frames = 2;
        e.conv_kernel = 3;
        e.ff_mult = 2;
        e.max_left_offset = 4;
        m.vocab = 40;
        m.label_embed_dim = 8;
        m.pred_dim = 8;
        m.joint_dim = 8;
        m.phoneme_embed_dim = 4;
        m.codebook_size = 16;
        m.code_dim = 4;
        c.train.steps = 20;
        c.train.batch_supervised = 2;
        c.train.batch_audio = 2;
        c.train.batch_text = 2;
        c.train.adam.warmup_steps = 10;
        c.beam_width = 4;
        c.finish().expect("tiny preset is valid")
    }

    pub fn thresholds(&self) -> PartitionThresholds {
        PartitionThresholds {
            t_rare: self.corpus.t_rare,
            t_common: self.corpus.t_common,
            noise_std: self.noise_std,
            noise_seed: seed::derive(self.seed, "partition.noise"),
        }
    }

    fn set(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        let c = &mut self.corpus;
        let m = &mut self.model;
        let e = &mut m.encoder;
        let t = &mut self.train;
        match key {
            "run.seed" => self.seed = parse(v)?,
            "run.experiment" => self.experiment = v.parse().map_err(|e: Error| e.to_string())?,
            "run.threads" => self.threads = at_least(v, 1)?,
            "paths.data_dir" => self.data_dir = PathBuf::from(v),
            "paths.run_dir" => self.run_dir = PathBuf::from(v),
            "corpus.supervised" => c.supervised = at_least(v, 1)?,
            "corpus.unsup_audio" => c.unsup_audio = at_least(v, 1)?,
            "corpus.unsup_text" => c.unsup_text = at_least(v, 1)?,
            "corpus.held_out" => c.held_out = at_least(v, 1)?,
            "corpus.max_corpus" => c.max_corpus = at_least(v, 1)?,
            "corpus.common_words" => c.common_words = at_least(v, 1)?,
            "corpus.frequent_markers" => c.frequent_markers = parse(v)?,
            "corpus.rare_stratum_count" => c.rare_stratum_count = parse(v)?,
            "corpus.rare_marker_fraction" => {
                let x: f64 = parse(v)?;
                if !(0.0..=1.0).contains(&x) {
                    return Err(format!("must lie in [0, 1], got {x}"));
                }
                c.rare_marker_fraction = x;
            }
            "corpus.text_only_words" => c.text_only_words = parse(v)?,
            "corpus.min_words" => c.min_words = at_least(v, 1)?,
            "corpus.max_words" => c.max_words = at_least(v, 1)?,
            "corpus.zipf_exponent" => c.zipf_exponent = non_negative(v)?,
            "corpus.marker_rate" => c.marker_rate = non_negative(v)?,
            "corpus.t_rare" => c.t_rare = at_least(v, 2)?,
            "corpus.t_common" => c.t_common = at_least(v, 1)?,
            "corpus.frame_step_ms" => c.frame_step_ms = positive(v)?,
            "corpus.tts_jitter" => c.tts_jitter = non_negative(v)?,
            "corpus.recording_noise" => c.recording_noise = non_negative(v)?,
            "corpus.noise_std" => self.noise_std = non_negative(v)?,
            "frontend.feature_dim" => m.frontend.feature_dim = at_least(v, 1)?,
            "frontend.stack" => m.frontend.stack = at_least(v, 1)?,
            "frontend.stride" => m.frontend.stride = at_least(v, 1)?,
            "frontend.upsample" => m.frontend.upsample = at_least(v, 1)?,
            "frontend.mask_ratio_audio" => m.frontend.mask_ratio_audio = unit_open(v)?,
            "frontend.mask_ratio_text" => m.frontend.mask_ratio_text = unit_open(v)?,
            "encoder.causal_layers" => e.causal_layers = at_least(v, 1)?,
            "encoder.noncausal_layers" => e.noncausal_layers = at_least(v, 1)?,
            "encoder.model_dim" => e.model_dim = at_least(v, 1)?,
            "encoder.heads" => e.heads = at_least(v, 1)?,
            "encoder.right_context_frames" => e.right_context_frames = parse(v)?,
            "encoder.conv_kernel" => e.conv_kernel = at_least(v, 1)?,
            "encoder.ff_mult" => e.ff_mult = at_least(v, 1)?,
            "encoder.max_left_offset" => e.max_left_offset = parse(v)?,
            "decoder.vocab" => m.vocab = at_least(v, 4)?,
            "decoder.label_embed_dim" => m.label_embed_dim = at_least(v, 1)?,
            "decoder.pred_dim" => m.pred_dim = at_least(v, 1)?,
            "decoder.joint_dim" => m.joint_dim = at_least(v, 1)?,
            "decoder.max_symbols" => m.max_symbols = at_least(v, 1)?,
            "text.phoneme_embed_dim" => m.phoneme_embed_dim = at_least(v, 1)?,
            "quantizer.codebook_size" => m.codebook_size = at_least(v, 1)?,
            "quantizer.code_dim" => m.code_dim = at_least(v, 1)?,
            "quantizer.causal_head" => m.causal_bestrq_head = parse(v)?,
            "optimizer.peak_lr" => t.adam.peak_lr = positive(v)?,
            "optimizer.warmup_steps" => t.adam.warmup_steps = at_least(v, 1)?,
            "optimizer.beta1" => {
                let x: f64 = parse(v)?;
                if !(0.0..1.0).contains(&x) {
                    return Err(format!("must lie in [0, 1), got {x}"));
                }
                t.adam.beta1 = x;
            }
            "optimizer.beta2" => {
                let x: f64 = parse(v)?;
                if !(0.0..1.0).contains(&x) {
                    return Err(format!("must lie in [0, 1), got {x}"));
                }
                t.adam.beta2 = x;
            }
            "optimizer.eps" => t.adam.eps = positive(v)?,
            "optimizer.clip_norm" => t.adam.clip_norm = non_negative(v)?,
            "train.steps" => t.steps = parse(v)?,
            "train.batch_supervised" => t.batch_supervised = at_least(v, 1)?,
            "train.batch_audio" => t.batch_audio = at_least(v, 1)?,
            "train.batch_text" => t.batch_text = at_least(v, 1)?,
            "train.checkpoint_every" => t.checkpoint_every = parse(v)?,
            "decode.beam_width" => self.beam_width = at_least(v, 1)?,
            "decode.mode" => self.decode_mode = v.parse().map_err(|e: Error| e.to_string())?,
            _ => return Err("unknown key".into()),
        }
        Ok(())
    }

    /// Every key in section order with its current value.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let c = &self.corpus;
        let m = &self.model;
        let e = &m.encoder;
        let t = &self.train;
        vec![
            ("run.seed", self.seed.to_string()),
            ("run.experiment", self.experiment.label().to_string()),
            ("run.threads", self.threads.to_string()),
            ("paths.data_dir", self.data_dir.display().to_string()),
            ("paths.run_dir", self.run_dir.display().to_string()),
            ("corpus.supervised", c.supervised.to_string()),
            ("corpus.unsup_audio", c.unsup_audio.to_string()),
            ("corpus.unsup_text", c.unsup_text.to_string()),
            ("corpus.held_out", c.held_out.to_string()),
            ("corpus.max_corpus", c.max_corpus.to_string()),
            ("corpus.common_words", c.common_words.to_string()),
            ("corpus.frequent_markers", c.frequent_markers.to_string()),
            ("corpus.rare_stratum_count", c.rare_stratum_count.to_string()),
            ("corpus.rare_marker_fraction", format!("{:?}", c.rare_marker_fraction)),
            ("corpus.text_only_words", c.text_only_words.to_string()),
            ("corpus.min_words", c.min_words.to_string()),
            ("corpus.max_words", c.max_words.to_string()),
            ("corpus.zipf_exponent", format!("{:?}", c.zipf_exponent)),
            ("corpus.marker_rate", format!("{:?}", c.marker_rate)),
            ("corpus.t_rare", c.t_rare.to_string()),
            ("corpus.t_common", c.t_common.to_string()),
            ("corpus.frame_step_ms", format!("{:?}", c.frame_step_ms)),
            ("corpus.tts_jitter", format!("{:?}", c.tts_jitter)),
            ("corpus.recording_noise", format!("{:?}", c.recording_noise)),
            ("corpus.noise_std", format!("{:?}", self.noise_std)),
            ("frontend.feature_dim", m.frontend.feature_dim.to_string()),
            ("frontend.stack", m.frontend.stack.to_string()),
            ("frontend.stride", m.frontend.stride.to_string()),
            ("frontend.upsample", m.frontend.upsample.to_string()),
            ("frontend.mask_ratio_audio", format!("{:?}", m.frontend.mask_ratio_audio)),
            ("frontend.mask_ratio_text", format!("{:?}", m.frontend.mask_ratio_text)),
            ("encoder.causal_layers", e.causal_layers.to_string()),
            ("encoder.noncausal_layers", e.noncausal_layers.to_string()),
            ("encoder.model_dim", e.model_dim.to_string()),
            ("encoder.heads", e.heads.to_string()),
            ("encoder.right_context_frames", e.right_context_frames.to_string()),
            ("encoder.conv_kernel", e.conv_kernel.to_string()),
            ("encoder.ff_mult", e.ff_mult.to_string()),
            ("encoder.max_left_offset", e.max_left_offset.to_string()),
            ("decoder.vocab", m.vocab.to_string()),
            ("decoder.label_embed_dim", m.label_embed_dim.to_string()),
            ("decoder.pred_dim", m.pred_dim.to_string()),
            ("decoder.joint_dim", m.joint_dim.to_string()),
            ("decoder.max_symbols", m.max_symbols.to_string()),
            ("text.phoneme_embed_dim", m.phoneme_embed_dim.to_string()),
            ("quantizer.codebook_size", m.codebook_size.to_string()),
            ("quantizer.code_dim", m.code_dim.to_string()),
            ("quantizer.causal_head", m.causal_bestrq_head.to_string()),
            ("optimizer.peak_lr", format!("{:?}", t.adam.peak_lr)),
            ("optimizer.warmup_steps", t.adam.warmup_steps.to_string()),
            ("optimizer.beta1", format!("{:?}", t.adam.beta1)),
            ("optimizer.beta2", format!("{:?}", t.adam.beta2)),
            ("optimizer.eps", format!("{:?}", t.adam.eps)),
            ("optimizer.clip_norm", format!("{:?}", t.adam.clip_norm)),
            ("train.steps", t.steps.to_string()),
            ("train.batch_supervised", t.batch_supervised.to_string()),
            ("train.batch_audio", t.batch_audio.to_string()),
            ("train.batch_text", t.batch_text.to_string()),
            ("train.checkpoint_every", t.checkpoint_every.to_string()),
            ("decode.beam_width", self.beam_width.to_string()),
            ("decode.mode", self.decode_mode.name().to_string()),
        ]
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut section = "";
        for (key, value) in self.entries() {
            let (s, k) = key.split_once('.').expect("sectioned key");
            if s != section {
                if !out.is_empty() {
                    out.push('\n');
                }
                out.push_str(&format!("[{s}]\n"));
                section = s;
            }
            out.push_str(&format!("{k} = {value}\n"));
        }
        out
    }

    pub fn from_text(text: &str, path: &str) -> Result<Self> {
        let err = |line: usize, message: String| Error::Parse {
            path: path.to_string(),
            line,
            message,
        };
        let mut cfg = Config::default();
        let mut section = String::new();
        for (i, raw) in text.lines().enumerate() {
            let n = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(s) = line.strip_prefix('[') {
                let s = s
                    .strip_suffix(']')
                    .ok_or_else(|| err(n, format!("malformed section header `{line}`")))?;
                section = s.trim().to_string();
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| err(n, format!("expected `key = value`, found `{line}`")))?;
            let (k, v) = (k.trim(), v.trim());
            let key = if section.is_empty() { k.to_string() } else { format!("{section}.{k}") };
            cfg.set(&key, v).map_err(|m| err(n, format!("`{key}`: {m}")))?;
        }
        cfg.finish().map_err(|e| match e {
            Error::Usage(m) => err(0, m),
            other => other,
        })
    }

    /// Derives the tied fields and checks cross-field constraints.
    fn finish(mut self) -> Result<Self> {
        self.train.threads = self.threads;
        self.corpus.feature_dim = self.model.frontend.feature_dim;
        self.model.encoder.input_dim = self.model.frontend.stacked_dim();
        if self.corpus.min_words > self.corpus.max_words {
            return Err(Error::usage("`corpus.min_words` exceeds `corpus.max_words`"));
        }
        if self.model.encoder.model_dim % self.model.encoder.heads != 0 {
            return Err(Error::usage("`encoder.model_dim` must be divisible by `encoder.heads`"));
        }
        self.model.validate()?;
        Ok(self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text, &path.display().to_string())
    }

    /// Writes the effective config as `config.txt` inside `dir`.
    pub fn echo_into(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let p = dir.join("config.txt");
        std::fs::write(&p, self.to_text()).map_err(|e| Error::io(&p, e))
    }
}

//! Feature-level speech synthesis behind a pluggable interface.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::data::g2p::{digraph_phonemes, NUM_PHONEMES};
use crate::frontends::FeatureSequence;
use crate::seed;
use crate::{Error, Result};

/// Anything that renders word sequences as acoustic features.
pub trait TextToSpeech: Send + Sync {
    fn synthesize(&self, text: &[String]) -> Result<FeatureSequence>;
}

/// Deterministic voice: one fixed feature template per phoneme, 6 to 12
/// frames long, plus seeded per-utterance jitter.
#[derive(Debug, Clone, PartialEq)]
pub struct TtsOracle {
    templates: Vec<Vec<f32>>,
    dim: usize,
    frame_step_ms: f64,
    jitter: f64,
    seed: u64,
}

impl TtsOracle {
    pub fn new(voice_seed: u64, dim: usize, frame_step_ms: f64, jitter: f64) -> Self {
        let mut rng = seed::rng(voice_seed);
        let unit = Normal::new(0.0, 1.0).expect("finite");
        let templates = (0..NUM_PHONEMES)
            .map(|_| {
                let len = rng.random_range(6..=12);
                let base: Vec<f64> = (0..dim).map(|_| unit.sample(&mut rng)).collect();
                let slope: Vec<f64> = (0..dim).map(|_| 0.5 * unit.sample(&mut rng)).collect();
                let mut frames = Vec::with_capacity(len * dim);
                for f in 0..len {
                    let pos = f as f64 / (len - 1) as f64 - 0.5;
                    frames.extend(base.iter().zip(&slope).map(|(b, s)| (b + s * pos) as f32));
                }
                frames
            })
            .collect();
        Self {
            templates,
            dim,
            frame_step_ms,
            jitter,
            seed: voice_seed,
        }
    }

    /// Replaces the jitter seed, keeping the voice.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn template_len(&self, phoneme: u16) -> usize {
        self.templates[phoneme as usize].len() / self.dim
    }

    pub fn phonemes(word: &str) -> Result<Vec<u16>> {
        if word.is_empty() || !word.chars().all(|c| c.is_ascii_alphabetic()) {
            return Err(Error::usage(format!("cannot synthesize token `{word}`")));
        }
        Ok(digraph_phonemes(word))
    }
}

impl TextToSpeech for TtsOracle {
    fn synthesize(&self, text: &[String]) -> Result<FeatureSequence> {
        let mut frames = Vec::new();
        for w in text {
            for p in Self::phonemes(w)? {
                frames.extend_from_slice(&self.templates[p as usize]);
            }
        }
        if self.jitter > 0.0 && !frames.is_empty() {
            let mut rng = seed::rng(seed::derive(self.seed, &text.join(" ")));
            let noise = Normal::new(0.0, self.jitter).expect("finite jitter");
            for v in &mut frames {
                *v += noise.sample(&mut rng) as f32;
            }
        }
        if frames.is_empty() {
            return Ok(FeatureSequence::empty(self.dim, self.frame_step_ms));
        }
        FeatureSequence::new(frames, self.dim, self.frame_step_ms)
    }
}

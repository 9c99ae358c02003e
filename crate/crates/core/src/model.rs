//! Model configuration, parameter layout and the shared audio forward path.

use numerics::{Tensor, Var};

use crate::data::g2p::NUM_PHONEMES;
use crate::encoders::{encode_causal, encode_noncausal, init_encoders, EncoderConfig};
use crate::frontends::StackedFeatures;
use crate::params::{init_linear, normal_matrix, Ctx, ParamStore};
use crate::ssl::quantizer::{init_quantizer, Quantizer};
use crate::transducer::{init_decoder, transducer_loss, DecoderConfig};
use crate::{seed, Error, Result};

pub const CAUSAL_DECODER: &str = "dec_c";
pub const NONCAUSAL_DECODER: &str = "dec_nc";

#[derive(Debug, Clone, PartialEq)]
pub struct FrontendConfig {
    pub feature_dim: usize,
    pub stack: usize,
    pub stride: usize,
    pub upsample: usize,
    pub mask_ratio_audio: f64,
    pub mask_ratio_text: f64,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        Self {
            feature_dim: 16,
            stack: 4,
            stride: 3,
            upsample: 3,
            mask_ratio_audio: 0.15,
            mask_ratio_text: 0.25,
        }
    }
}

impl FrontendConfig {
    pub fn stacked_dim(&self) -> usize {
        self.stack * self.feature_dim
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub frontend: FrontendConfig,
    pub encoder: EncoderConfig,
    pub vocab: usize,
    pub label_embed_dim: usize,
    pub pred_dim: usize,
    pub joint_dim: usize,
    pub phoneme_embed_dim: usize,
    pub codebook_size: usize,
    pub code_dim: usize,
    pub max_symbols: usize,
    pub causal_bestrq_head: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let frontend = FrontendConfig::default();
        Self {
            encoder: EncoderConfig {
                input_dim: frontend.stacked_dim(),
                ..EncoderConfig::default()
            },
            frontend,
            vocab: 256,
            label_embed_dim: 64,
            pred_dim: 64,
            joint_dim: 64,
            phoneme_embed_dim: 32,
            codebook_size: 256,
            code_dim: 16,
            max_symbols: 4,
            causal_bestrq_head: false,
        }
    }
}

impl ModelConfig {
    pub fn decoder(&self) -> DecoderConfig {
        DecoderConfig {
            vocab: self.vocab,
            embed_dim: self.label_embed_dim,
            pred_dim: self.pred_dim,
            joint_dim: self.joint_dim,
            enc_dim: self.encoder.model_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let f = &self.frontend;
        if f.feature_dim == 0 || f.stack == 0 || f.stride == 0 || f.upsample == 0 {
            return Err(Error::usage("frontend sizes must be positive"));
        }
        if !(f.mask_ratio_audio > 0.0 && f.mask_ratio_audio < 1.0) {
            return Err(Error::usage("mask_ratio_audio must lie in (0, 1)"));
        }
        if !(0.0..1.0).contains(&f.mask_ratio_text) {
            return Err(Error::usage("mask_ratio_text must lie in [0, 1)"));
        }
        if self.encoder.input_dim != f.stacked_dim() {
            return Err(Error::usage(format!(
                "encoder input {} differs from stacked feature width {}",
                self.encoder.input_dim,
                f.stacked_dim()
            )));
        }
        self.encoder.validate()?;
        self.decoder().validate()?;
        if self.codebook_size < 2 || self.code_dim == 0 || self.phoneme_embed_dim == 0 {
            return Err(Error::usage("need codebook_size >= 2 and positive code/phoneme dims"));
        }
        if self.max_symbols == 0 {
            return Err(Error::usage("max_symbols must be at least 1"));
        }
        Ok(())
    }

    /// Canonical `key = value` rendering; its digest identifies a layout.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let f = &self.frontend;
        let e = &self.encoder;
        vec![
            ("feature_dim", f.feature_dim.to_string()),
            ("stack", f.stack.to_string()),
            ("stride", f.stride.to_string()),
            ("upsample", f.upsample.to_string()),
            ("mask_ratio_audio", format!("{:?}", f.mask_ratio_audio)),
            ("mask_ratio_text", format!("{:?}", f.mask_ratio_text)),
            ("causal_layers", e.causal_layers.to_string()),
            ("noncausal_layers", e.noncausal_layers.to_string()),
            ("model_dim", e.model_dim.to_string()),
            ("heads", e.heads.to_string()),
            ("right_context_frames", e.right_context_frames.to_string()),
            ("conv_kernel", e.conv_kernel.to_string()),
            ("ff_mult", e.ff_mult.to_string()),
            ("max_left_offset", e.max_left_offset.to_string()),
            ("vocab_size", self.vocab.to_string()),
            ("label_embed_dim", self.label_embed_dim.to_string()),
            ("pred_dim", self.pred_dim.to_string()),
            ("joint_dim", self.joint_dim.to_string()),
            ("phoneme_embed_dim", self.phoneme_embed_dim.to_string()),
            ("codebook_size", self.codebook_size.to_string()),
            ("code_dim", self.code_dim.to_string()),
            ("max_symbols", self.max_symbols.to_string()),
            ("causal_bestrq_head", self.causal_bestrq_head.to_string()),
        ]
    }

    pub fn canonical_text(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }
}

/// Fresh parameters: every trainable module plus the frozen quantizer.
pub fn init_params(cfg: &ModelConfig, master_seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    let mut rng = seed::rng(seed::derive(master_seed, "model.init"));
    let d_stack = cfg.frontend.stacked_dim();
    store.insert(
        "frontend.text.embed",
        normal_matrix(&mut rng, NUM_PHONEMES as usize + 1, cfg.phoneme_embed_dim, 1.0),
        false,
    );
    init_linear(&mut store, &mut rng, "frontend.text.proj", cfg.phoneme_embed_dim, d_stack);
    init_encoders(&mut store, &mut rng, &cfg.encoder)?;
    init_decoder(&mut store, &mut rng, CAUSAL_DECODER, &cfg.decoder())?;
    init_decoder(&mut store, &mut rng, NONCAUSAL_DECODER, &cfg.decoder())?;
    init_linear(&mut store, &mut rng, "bestrq.head", cfg.encoder.model_dim, cfg.codebook_size);
    if cfg.causal_bestrq_head {
        init_linear(&mut store, &mut rng, "bestrq.causal_head", cfg.encoder.model_dim, cfg.codebook_size);
    }
    let q = init_quantizer(seed::derive(master_seed, "quantizer"), d_stack, cfg.code_dim, cfg.codebook_size)?;
    q.store_into(&mut store);
    Ok(store)
}

pub fn quantizer_from(store: &ParamStore) -> Result<Quantizer> {
    Quantizer::from_store(store)
}

/// Both encoder outputs for audio-side input `[T × D_stack]`.
pub fn encode(ctx: &mut Ctx, cfg: &ModelConfig, x: Var) -> Result<(Var, Var)> {
    let hc = encode_causal(ctx, x, &cfg.encoder)?;
    let hnc = encode_noncausal(ctx, hc, &cfg.encoder)?;
    Ok((hc, hnc))
}

pub fn stacked_input(ctx: &mut Ctx, sf: &StackedFeatures) -> Var {
    ctx.constant(sf.frames.clone())
}

/// Causal and non-causal transducer losses on one input.
pub fn asr_losses(ctx: &mut Ctx, cfg: &ModelConfig, x: Var, labels: &[u32]) -> Result<(Var, Var)> {
    let (hc, hnc) = encode(ctx, cfg, x)?;
    let lc = transducer_loss(ctx, hc, labels, CAUSAL_DECODER, cfg.max_symbols)?;
    let lnc = transducer_loss(ctx, hnc, labels, NONCAUSAL_DECODER, cfg.max_symbols)?;
    Ok((lc, lnc))
}

/// Values of every non-frozen parameter, for snapshotting.
pub fn trainable_snapshot(store: &ParamStore) -> Vec<(String, Tensor)> {
    store
        .iter()
        .filter(|(_, p)| !p.frozen)
        .map(|(n, p)| (n.clone(), p.value.clone()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    pub fn tiny() -> ModelConfig {
        let frontend = FrontendConfig {
            feature_dim: 3,
            stack: 2,
            stride: 2,
            ..FrontendConfig::default()
        };
        ModelConfig {
            encoder: EncoderConfig {
                input_dim: 6,
                causal_layers: 1,
                noncausal_layers: 1,
                model_dim: 8,
                heads: 2,
                right_context_frames: 2,
                conv_kernel: 3,
                ff_mult: 2,
                max_left_offset: 4,
            },
            frontend,
            vocab: 12,
            label_embed_dim: 4,
            pred_dim: 6,
            joint_dim: 6,
            phoneme_embed_dim: 4,
            codebook_size: 8,
            code_dim: 3,
            max_symbols: 4,
            causal_bestrq_head: false,
        }
    }

    #[test]
    fn init_is_deterministic_and_freezes_quantizer() {
        let a = init_params(&tiny(), 3).unwrap();
        assert_eq!(a, init_params(&tiny(), 3).unwrap());
        assert!(a.get("quantizer.codebook").unwrap().frozen);
        assert!(a.get("quantizer.projection").unwrap().frozen);
        assert!(!a.get("enc_c.in.w").unwrap().frozen);
        assert!(a.trainable_count() > 0);
    }

    #[test]
    fn mismatched_encoder_input_is_rejected() {
        let mut c = tiny();
        c.encoder.input_dim = 7;
        assert!(c.validate().is_err());
    }
}

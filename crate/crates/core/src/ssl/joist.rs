//! Text injection: masked phonemes through the text frontend and both
//! encoders, scored against the clean wordpieces.

use numerics::Var;
use rand::Rng;

use crate::data::{G2p, WordpieceModel};
use crate::frontends::{phoneme_mask, text_frontend};
use crate::model::{ModelConfig, CAUSAL_DECODER, NONCAUSAL_DECODER};
use crate::encoders::{encode_causal, encode_noncausal};
use crate::params::Ctx;
use crate::transducer::transducer_loss;
use crate::{Error, Result};

pub struct JoistOutput {
    pub causal: Var,
    pub noncausal: Var,
    /// Rows fed to the causal encoder.
    pub input_len: usize,
}

pub fn joist_forward(
    ctx: &mut Ctx,
    cfg: &ModelConfig,
    g2p: &G2p,
    wordpieces: &WordpieceModel,
    text: &[String],
    rng: &mut impl Rng,
) -> Result<JoistOutput> {
    if text.is_empty() {
        return Err(Error::usage("text injection needs a non-empty text"));
    }
    let labels = wordpieces.encode(text);
    let ph = g2p.grapheme_to_phoneme(text);
    let masked = phoneme_mask(&ph, cfg.frontend.mask_ratio_text, rng)?;
    let x = text_frontend(ctx, &masked, cfg.frontend.upsample)?;
    let input_len = ctx.g.shape(x).0;
    let hc = encode_causal(ctx, x, &cfg.encoder)?;
    let hnc = encode_noncausal(ctx, hc, &cfg.encoder)?;
    let causal = transducer_loss(ctx, hc, &labels, CAUSAL_DECODER, cfg.max_symbols)?;
    let noncausal = transducer_loss(ctx, hnc, &labels, NONCAUSAL_DECODER, cfg.max_symbols)?;
    Ok(JoistOutput {
        causal,
        noncausal,
        input_len,
    })
}

//! Masked-frame classification of quantizer targets.

use numerics::Var;
use rand::Rng;

use super::quantizer::Quantizer;
use crate::frontends::{audio_mask_span, stack_and_subsample, FeatureSequence, MaskInfo};
use crate::model::{encode, ModelConfig};
use crate::params::Ctx;
use crate::{Error, Result};

/// Mean cross-entropy of `head(h[t])` against `targets[t]` over masked
/// frames only. `None` when no frame is masked.
pub fn bestrq_loss(ctx: &mut Ctx, h: Var, targets: &[u32], info: &MaskInfo, head: &str) -> Result<Option<Var>> {
    let t = ctx.g.shape(h).0;
    if targets.len() != t || info.flags.len() != t {
        return Err(Error::usage(format!(
            "{t} encoder frames, {} targets, {} mask flags",
            targets.len(),
            info.flags.len()
        )));
    }
    if info.span_len == 0 {
        return Ok(None);
    }
    let span = ctx.g.slice_rows(h, info.span_start, info.span_len)?;
    let logits = ctx.linear(span, head)?;
    let k = ctx.g.shape(logits).1;
    let at: Vec<(usize, usize)> = (0..info.span_len)
        .map(|i| (i, targets[info.span_start + i] as usize))
        .collect();
    if let Some(&(_, bad)) = at.iter().find(|&&(_, c)| c >= k) {
        return Err(Error::usage(format!("target {bad} outside a head of {k} classes")));
    }
    let lp = ctx.g.log_softmax_rows(logits);
    let picked = ctx.g.pick(lp, &at)?;
    let mean = ctx.g.mean(picked);
    Ok(Some(ctx.g.scale(mean, -1.0)))
}

/// Targets from the clean stacked frames, then the masked copy through both
/// encoders. `None` when the utterance is too short to mask.
pub fn bestrq_forward(
    ctx: &mut Ctx,
    cfg: &ModelConfig,
    quantizer: &Quantizer,
    audio: &FeatureSequence,
    rng: &mut impl Rng,
) -> Result<Option<Var>> {
    let f = &cfg.frontend;
    let sf = stack_and_subsample(audio, f.stack, f.stride)?;
    let Some((masked, info)) = audio_mask_span(&sf, f.mask_ratio_audio, rng)? else {
        return Ok(None);
    };
    let targets = quantizer.quantize(&sf)?;
    let x = ctx.constant(masked.frames);
    let (hc, hnc) = encode(ctx, cfg, x)?;
    let Some(nc) = bestrq_loss(ctx, hnc, &targets, &info, "bestrq.head")? else {
        return Ok(None);
    };
    if !cfg.causal_bestrq_head {
        return Ok(Some(nc));
    }
    let c = bestrq_loss(ctx, hc, &targets, &info, "bestrq.causal_head")?.expect("same span");
    let both = ctx.g.add(nc, c)?;
    Ok(Some(ctx.g.scale(both, 0.5)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{init_linear, ParamStore};
    use crate::seed;
    use numerics::Tensor;

    fn info(t: usize, start: usize, len: usize) -> MaskInfo {
        MaskInfo {
            span_start: start,
            span_len: len,
            flags: (0..t).map(|i| i >= start && i < start + len).collect(),
        }
    }

    #[test]
    fn uniform_head_gives_log_k() {
        let mut s = ParamStore::new();
        s.insert("head.w", Tensor::zeros(3, 8), false);
        s.insert("head.b", Tensor::zeros(1, 8), false);
        let mut ctx = Ctx::infer(&s);
        let h = ctx.constant(Tensor::full(5, 3, 0.7));
        let l = bestrq_loss(&mut ctx, h, &[1, 2, 3, 4, 5], &info(5, 1, 3), "head").unwrap().unwrap();
        assert!((ctx.scalar(l) - 8f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_head_gives_zero() {
        let mut s = ParamStore::new();
        s.insert("head.w", Tensor::zeros(2, 3), false);
        s.insert("head.b", Tensor::row(vec![0.0, 800.0, 0.0]), false);
        let mut ctx = Ctx::infer(&s);
        let h = ctx.constant(Tensor::zeros(4, 2));
        let l = bestrq_loss(&mut ctx, h, &[0, 0, 1, 2], &info(4, 2, 1), "head").unwrap().unwrap();
        assert_eq!(ctx.scalar(l), 0.0);
        assert!(bestrq_loss(&mut ctx, h, &[0; 4], &info(4, 0, 0), "head").unwrap().is_none());
    }

    #[test]
    fn no_gradient_outside_span() {
        let mut s = ParamStore::new();
        init_linear(&mut s, &mut seed::rng(2), "head", 3, 4);
        let mut ctx = Ctx::train(&s);
        let h = ctx.g.param(crate::params::normal_matrix(&mut seed::rng(3), 6, 3, 1.0));
        let l = bestrq_loss(&mut ctx, h, &[0, 1, 2, 3, 0, 1], &info(6, 2, 2), "head").unwrap().unwrap();
        let g = ctx.g.backward(l).unwrap();
        let gh = g.get(h).unwrap();
        for t in 0..6 {
            let zero = gh.row_slice(t).iter().all(|&v| v == 0.0);
            assert_eq!(zero, !(2..4).contains(&t));
        }
    }
}

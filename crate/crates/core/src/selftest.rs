//! Oracle suites runnable from a fresh build.

use numerics::{grad_check, NumericsError, Tensor};
use rand::Rng;

use crate::data::{G2p, WordpieceModel};
use crate::decode::{beam_search, oracle};
use crate::frontends::{FeatureSequence, StackedFeatures};
use crate::model::{init_params, FrontendConfig, ModelConfig};
use crate::params::{param_grad_check, Ctx, ParamStore};
use crate::ssl::{bestrq_forward, init_quantizer, joist_forward, Quantizer};
use crate::transducer::oracle::brute_force_loss;
use crate::transducer::{init_decoder, loss_from_logits, transducer_loss, DecoderConfig, DecoderWeights};
use crate::encoders::EncoderConfig;
use crate::{seed, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn random(rng: &mut impl Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    Tensor::new(
        vec![rows, cols],
        (0..rows * cols).map(|_| rng.random_range(-1.0..1.0) * scale).collect(),
    )
    .expect("shape")
}

/// A random decoder under prefix `dec` with encoder width 3.
pub fn random_decoder(vocab: usize, s: u64) -> Result<ParamStore> {
    let mut store = ParamStore::new();
    let cfg = DecoderConfig {
        vocab,
        embed_dim: 3,
        pred_dim: 4,
        joint_dim: 5,
        enc_dim: 3,
    };
    init_decoder(&mut store, &mut seed::rng(s), "dec", &cfg)?;
    Ok(store)
}

/// Largest gap between the dynamic program and explicit enumeration over
/// `n` random instances with `T ≤ 4`, `U ≤ 3`, `V ≤ 5`.
pub fn transducer_oracle_gap(n: usize, master: u64) -> Result<f64> {
    let mut worst = 0.0f64;
    for i in 0..n as u64 {
        let mut r = seed::rng(seed::derive_indexed(master, "selftest.dp", i));
        let v = r.random_range(2..=5usize);
        let t = r.random_range(1..=4usize);
        let u = r.random_range(0..=3usize);
        let labels: Vec<u32> = (0..u).map(|_| r.random_range(1..v as u32)).collect();
        let store = random_decoder(v, r.random())?;
        let enc = random(&mut r, t, 3, 2.0);
        let mut ctx = Ctx::infer(&store);
        let e = ctx.constant(enc.clone());
        let l = transducer_loss(&mut ctx, e, &labels, "dec", 4)?;
        let (brute, _) = brute_force_loss(&store, "dec", &enc, &labels)?;
        worst = worst.max((ctx.scalar(l) - brute).abs());
    }
    Ok(worst)
}

/// Count of frames where the quantizer disagrees with a direct scan.
pub fn quantizer_mismatches(frames: usize, master: u64) -> Result<usize> {
    let q = init_quantizer(seed::derive(master, "selftest.q"), 12, 4, 32)?;
    let mut r = seed::rng(seed::derive(master, "selftest.q.frames"));
    let sf = StackedFeatures {
        frames: random(&mut r, frames, 12, 3.0),
        covered_ms: 10.0,
    };
    let got = q.quantize(&sf)?;
    let mut bad = 0;
    for (t, &g) in got.iter().enumerate() {
        if g != scan_nearest(&q, sf.frames.row_slice(t)) {
            bad += 1;
        }
    }
    Ok(bad)
}

/// Projection, normalization and first-minimum codebook search written out
/// directly.
pub fn scan_nearest(q: &Quantizer, frame: &[f64]) -> u32 {
    let d = q.projection.cols();
    let mut v = vec![0.0; d];
    for (i, x) in frame.iter().enumerate() {
        for (j, acc) in v.iter_mut().enumerate() {
            *acc += x * q.projection.data()[i * d + j];
        }
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    let mut best = 0u32;
    let mut best_d = f64::INFINITY;
    for k in 0..q.codebook.rows() {
        let dist: f64 = (0..d).map(|j| (v[j] - q.codebook.data()[k * d + j]).powi(2)).sum();
        if dist < best_d {
            best_d = dist;
            best = k as u32;
        }
    }
    best
}

/// A model small enough for coordinate-wise finite differences.
pub fn gradcheck_model() -> ModelConfig {
    ModelConfig {
        frontend: FrontendConfig {
            feature_dim: 2,
            stack: 2,
            stride: 2,
            upsample: 2,
            mask_ratio_audio: 0.3,
            mask_ratio_text: 0.25,
        },
        encoder: EncoderConfig {
            input_dim: 4,
            causal_layers: 1,
            noncausal_layers: 1,
            model_dim: 4,
            heads: 2,
            right_context_frames: 2,
            conv_kernel: 3,
            ff_mult: 2,
            max_left_offset: 3,
        },
        vocab: 6,
        label_embed_dim: 3,
        pred_dim: 3,
        joint_dim: 3,
        phoneme_embed_dim: 3,
        codebook_size: 5,
        code_dim: 2,
        max_symbols: 4,
        causal_bestrq_head: false,
    }
}

/// Worst relative error of the HAT loss gradient with respect to its joint
/// logits, over `n` instances.
pub fn hat_gradient_error(n: usize, master: u64) -> Result<f64> {
    let mut worst = 0.0f64;
    for i in 0..n as u64 {
        let mut r = seed::rng(seed::derive_indexed(master, "selftest.hat", i));
        let v = r.random_range(2..=5usize);
        let t = r.random_range(1..=4usize);
        let u = r.random_range(0..=3usize);
        let labels: Vec<u32> = (0..u).map(|_| r.random_range(1..v as u32)).collect();
        let logits = random(&mut r, t * (u + 1), v, 2.0);
        let err = grad_check(
            |g, x| loss_from_logits(g, x, t, &labels).map_err(|e| NumericsError::Numeric(e.to_string())),
            &logits,
            1e-5,
        )?;
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Names of the parameters perturbed by the end-to-end checks: one array in
/// each module on the audio path plus the task-specific heads.
fn probe_names(extra: &[&'static str]) -> Vec<&'static str> {
    let mut v = vec!["enc_c.in.w", "enc_c.0.att.rel", "enc_c.0.conv.pw1.w", "enc_nc.0.ff1.l1.w", "enc_nc.0.conv.dw"];
    v.extend_from_slice(extra);
    v
}

fn random_audio(r: &mut impl Rng, frames: usize, dim: usize) -> Result<FeatureSequence> {
    FeatureSequence::new((0..frames * dim).map(|_| r.random_range(-1.0f32..1.0)).collect(), dim, 10.0)
}

/// Worst relative error of the masked-prediction loss with respect to
/// encoder and head parameters, over `n` instances.
pub fn bestrq_gradient_error(n: usize, master: u64) -> Result<f64> {
    let cfg = gradcheck_model();
    let mut worst = 0.0f64;
    for i in 0..n as u64 {
        let s = seed::derive_indexed(master, "selftest.bestrq", i);
        let store = init_params(&cfg, s)?;
        let q = Quantizer::from_store(&store)?;
        let mut r = seed::rng(s);
        let frames = r.random_range(14..24);
        let audio = random_audio(&mut r, frames, cfg.frontend.feature_dim)?;
        let names = probe_names(&["bestrq.head.w", "bestrq.head.b"]);
        let err = param_grad_check(&store, &names, 1e-5, |ctx| {
            let mut mr = seed::rng(s ^ 1);
            Ok(bestrq_forward(ctx, &cfg, &q, &audio, &mut mr)?.expect("long enough to mask"))
        })?;
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Worst relative error of the text-injection loss (both passes summed)
/// with respect to text frontend, encoder and decoder parameters.
pub fn joist_gradient_error(n: usize, master: u64) -> Result<f64> {
    let cfg = gradcheck_model();
    let texts = [vec!["ab", "ba"], vec!["aab"], vec!["b", "ab", "a"]];
    let wp = WordpieceModel::build(&texts, cfg.vocab)?;
    let g2p = G2p::from_lexicon(["a", "b", "ab", "ba", "aab"]);
    let mut worst = 0.0f64;
    for i in 0..n as u64 {
        let s = seed::derive_indexed(master, "selftest.joist", i);
        let store = init_params(&cfg, s)?;
        let text: Vec<String> = texts[i as usize % texts.len()].iter().map(|w| w.to_string()).collect();
        let names = probe_names(&["frontend.text.embed", "frontend.text.proj.w", "dec_c.rnn.wh", "dec_nc.joint.out.w"]);
        let err = param_grad_check(&store, &names, 1e-5, |ctx| {
            let mut mr = seed::rng(s ^ 2);
            let out = joist_forward(ctx, &cfg, &g2p, &wp, &text, &mut mr)?;
            Ok(ctx.g.add(out.causal, out.noncausal)?)
        })?;
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Instances on which the wide-beam 1-best differs from exhaustive search
/// (`T = 2`, `V = 2`, two symbols per frame).
pub fn beam_oracle_mismatches(n: usize, master: u64) -> Result<usize> {
    let mut bad = 0;
    for i in 0..n as u64 {
        let mut r = seed::rng(seed::derive_indexed(master, "selftest.beam", i));
        let store = random_decoder(2, r.random())?;
        let w = DecoderWeights::from_store(&store, "dec")?;
        let enc = random(&mut r, 2, 3, 3.0);
        let scores = oracle::sequence_scores(&enc, &w, 2)?;
        let (best, score) = oracle::best_sequence(&scores).expect("non-empty");
        let res = beam_search(&enc, &w, 16, 2)?;
        if res.nbest[0].labels != best || (res.nbest[0].score - score).abs() > 1e-9 {
            bad += 1;
        }
    }
    Ok(bad)
}

fn suite(name: &'static str, run: impl FnOnce() -> Result<(bool, String)>) -> SuiteResult {
    match run() {
        Ok((passed, detail)) => SuiteResult { name, passed, detail },
        Err(e) => SuiteResult {
            name,
            passed: false,
            detail: format!("error: {e}"),
        },
    }
}

pub fn run_all(master: u64) -> Vec<SuiteResult> {
    vec![
        suite("transducer-dp", || {
            let gap = transducer_oracle_gap(200, master)?;
            Ok((gap <= 1e-9, format!("max |dp - brute force| = {gap:.3e} over 200 instances")))
        }),
        suite("quantizer-nn", || {
            let bad = quantizer_mismatches(10_000, master)?;
            Ok((bad == 0, format!("{bad} mismatches over 10000 frames")))
        }),
        suite("gradients", || {
            let hat = hat_gradient_error(20, master)?;
            let bq = bestrq_gradient_error(3, master)?;
            let js = joist_gradient_error(3, master)?;
            let worst = hat.max(bq).max(js);
            Ok((
                worst <= 1e-4,
                format!("max relative error hat {hat:.2e}, bestrq {bq:.2e}, joist {js:.2e}"),
            ))
        }),
        suite("beam-oracle", || {
            let bad = beam_oracle_mismatches(50, master)?;
            Ok((bad == 0, format!("{bad} of 50 instances differ from exhaustive search")))
        }),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_suites_pass() {
        for r in run_all(0) {
            assert!(r.passed, "{}: {}", r.name, r.detail);
        }
    }
}

//! Acoustic stacking and masking, phoneme masking, and the text frontend.

use numerics::{Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, Geometric, Normal};

use crate::data::g2p::{NUM_PHONEMES, PHONEME_MASK};
use crate::params::Ctx;
use crate::{Error, Result};

/// Time-major `[T × D]` features stored as `f32`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    frames: Vec<f32>,
    dim: usize,
    frame_step_ms: f64,
}

impl FeatureSequence {
    pub fn new(frames: Vec<f32>, dim: usize, frame_step_ms: f64) -> Result<Self> {
        if dim == 0 || frames.len() % dim != 0 {
            return Err(Error::usage(format!(
                "{} values do not form frames of dimension {dim}",
                frames.len()
            )));
        }
        if frames.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("feature frames must be finite".into()));
        }
        Ok(Self {
            frames,
            dim,
            frame_step_ms,
        })
    }

    pub fn empty(dim: usize, frame_step_ms: f64) -> Self {
        Self {
            frames: Vec::new(),
            dim,
            frame_step_ms,
        }
    }

    pub fn len(&self) -> usize {
        self.frames.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn frame_step_ms(&self) -> f64 {
        self.frame_step_ms
    }

    pub fn frames(&self) -> &[f32] {
        &self.frames
    }

    pub fn frames_mut(&mut self) -> &mut [f32] {
        &mut self.frames
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        &self.frames[t * self.dim..(t + 1) * self.dim]
    }

    pub fn extend(&mut self, other: &FeatureSequence) -> Result<()> {
        if other.dim != self.dim {
            return Err(Error::usage("feature dimensions differ"));
        }
        self.frames.extend_from_slice(&other.frames);
        Ok(())
    }
}

/// Stacked and subsampled frames, `[T' × D_stack]`.
#[derive(Debug, Clone, PartialEq)]
pub struct StackedFeatures {
    pub frames: Tensor,
    pub covered_ms: f64,
}

impl StackedFeatures {
    pub fn len(&self) -> usize {
        self.frames.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.frames.cols()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskInfo {
    pub span_start: usize,
    pub span_len: usize,
    pub flags: Vec<bool>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PhonemeSequence {
    pub ids: Vec<u16>,
    pub masked: Vec<bool>,
}

impl PhonemeSequence {
    pub fn unmasked(ids: Vec<u16>) -> Self {
        let masked = vec![false; ids.len()];
        Self { ids, masked }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn masked_count(&self) -> usize {
        self.masked.iter().filter(|&&m| m).count()
    }
}

/// Output frame `t` concatenates input frames
/// `t·stride + 2 − stack ..= t·stride + 1`, zero outside the sequence.
pub fn stack_and_subsample(feats: &FeatureSequence, stack: usize, stride: usize) -> Result<StackedFeatures> {
    if stack == 0 || stride == 0 {
        return Err(Error::usage("stack and stride must be at least 1"));
    }
    if feats.is_empty() {
        return Err(Error::usage("cannot stack an empty feature sequence"));
    }
    let (t_in, d) = (feats.len(), feats.dim());
    let t_out = t_in.div_ceil(stride);
    let mut data = vec![0.0; t_out * stack * d];
    for t in 0..t_out {
        let first = (t * stride) as isize + 2 - stack as isize;
        for s in 0..stack {
            let src = first + s as isize;
            if src >= 0 && (src as usize) < t_in {
                let dst = &mut data[(t * stack + s) * d..(t * stack + s + 1) * d];
                for (o, &v) in dst.iter_mut().zip(feats.frame(src as usize)) {
                    *o = f64::from(v);
                }
            }
        }
    }
    Ok(StackedFeatures {
        frames: Tensor::matrix(t_out, stack * d, data)?,
        covered_ms: stride as f64 * feats.frame_step_ms(),
    })
}

pub fn mask_span_len(mask_ratio: f64, t: usize) -> usize {
    (mask_ratio * t as f64 + 1e-9).floor() as usize
}

/// Replaces one contiguous span with `N(0, 0.1²)` noise. Returns `None` when
/// the sequence is too short for a non-empty span.
pub fn audio_mask_span(
    sf: &StackedFeatures,
    mask_ratio: f64,
    rng: &mut impl Rng,
) -> Result<Option<(StackedFeatures, MaskInfo)>> {
    if !(mask_ratio > 0.0 && mask_ratio < 1.0) {
        return Err(Error::usage(format!("mask ratio {mask_ratio} outside (0, 1)")));
    }
    let t = sf.len();
    let span_len = mask_span_len(mask_ratio, t);
    if span_len == 0 {
        return Ok(None);
    }
    let span_start = rng.random_range(0..=t - span_len);
    let noise = Normal::new(0.0, 0.1).expect("finite");
    let mut masked = sf.clone();
    let d = sf.dim();
    for v in &mut masked.frames.data_mut()[span_start * d..(span_start + span_len) * d] {
        *v = noise.sample(rng);
    }
    let flags = (0..t)
        .map(|i| i >= span_start && i < span_start + span_len)
        .collect();
    Ok(Some((
        masked,
        MaskInfo {
            span_start,
            span_len,
            flags,
        },
    )))
}

/// Masks contiguous spans (geometric lengths, mean 3) until exactly
/// `floor(mask_ratio · |ph|)` positions carry the mask id.
pub fn phoneme_mask(ph: &PhonemeSequence, mask_ratio: f64, rng: &mut impl Rng) -> Result<PhonemeSequence> {
    if !(0.0..1.0).contains(&mask_ratio) {
        return Err(Error::usage(format!("mask ratio {mask_ratio} outside [0, 1)")));
    }
    let mut out = ph.clone();
    let n = ph.len();
    let target = mask_span_len(mask_ratio, n);
    let span = Geometric::new(1.0 / 3.0).expect("valid p");
    let mut count = out.masked_count();
    while count < target {
        let len = 1 + span.sample(rng) as usize;
        if len > n {
            continue;
        }
        let start = rng.random_range(0..=n - len);
        let fresh = out.masked[start..start + len].iter().filter(|&&m| !m).count();
        if fresh == 0 || count + fresh > target {
            continue;
        }
        for i in start..start + len {
            out.masked[i] = true;
            out.ids[i] = PHONEME_MASK;
        }
        count += fresh;
    }
    Ok(out)
}

/// Embedding, projection to the stacked-feature width, then each row repeated
/// `upsample` times. Output is `[upsample·|ph| × D_stack]`.
pub fn text_frontend(ctx: &mut Ctx, ph: &PhonemeSequence, upsample: usize) -> Result<Var> {
    if upsample == 0 {
        return Err(Error::usage("upsample must be at least 1"));
    }
    if ph.is_empty() {
        return Err(Error::usage("text frontend needs at least one phoneme"));
    }
    if let Some(&bad) = ph.ids.iter().find(|&&p| p > PHONEME_MASK) {
        return Err(Error::usage(format!(
            "phoneme id {bad} outside the inventory of {NUM_PHONEMES} plus mask"
        )));
    }
    let ids: Vec<usize> = ph.ids.iter().map(|&p| p as usize).collect();
    let table = ctx.p("frontend.text.embed")?;
    let e = ctx.g.gather_rows(table, &ids)?;
    let proj = ctx.linear(e, "frontend.text.proj")?;
    if upsample == 1 {
        return Ok(proj);
    }
    Ok(ctx.g.repeat_rows(proj, upsample)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{init_linear, normal_matrix, ParamStore};
    use crate::seed;
    use proptest::prelude::*;

    fn seq(t: usize, d: usize) -> FeatureSequence {
        FeatureSequence::new((0..t * d).map(|i| i as f32 + 1.0).collect(), d, 10.0).unwrap()
    }

    #[test]
    fn stacking_dimensions_and_coverage() {
        let sf = stack_and_subsample(&seq(90, 128), 4, 3).unwrap();
        assert_eq!(sf.dim(), 512);
        assert_eq!(sf.len(), 30);
        assert_eq!(sf.covered_ms, 30.0);
    }

    #[test]
    fn single_frame_has_three_padded_slots() {
        let sf = stack_and_subsample(&seq(1, 2), 4, 3).unwrap();
        assert_eq!(sf.frames.data(), &[0.0, 0.0, 0.0, 0.0, 1.0, 2.0, 0.0, 0.0]);
        assert!(stack_and_subsample(&FeatureSequence::empty(2, 10.0), 4, 3).is_err());
    }

    #[test]
    fn window_is_two_back_one_ahead() {
        let sf = stack_and_subsample(&seq(6, 1), 4, 3).unwrap();
        // t=1 covers inputs 1..=4
        assert_eq!(sf.frames.row_slice(1), &[2.0, 3.0, 4.0, 5.0]);
    }

    #[test]
    fn right_context_in_frames() {
        // 900 ms at 10 ms input steps subsampled by 3
        let sf = stack_and_subsample(&seq(3, 1), 4, 3).unwrap();
        assert_eq!((900.0 / sf.covered_ms) as usize, 30);
    }

    #[test]
    fn span_lengths_floor() {
        assert_eq!(mask_span_len(0.15, 100), 15);
        assert_eq!(mask_span_len(0.15, 7), 1);
        let sf = stack_and_subsample(&seq(5, 1), 1, 1).unwrap();
        let mut r = seed::rng(0);
        assert!(audio_mask_span(&sf, 0.15, &mut r).unwrap().is_none());
    }

    #[test]
    fn audio_mask_is_deterministic_and_local() {
        let sf = stack_and_subsample(&seq(300, 2), 4, 3).unwrap();
        let (a, ia) = audio_mask_span(&sf, 0.15, &mut seed::rng(5)).unwrap().unwrap();
        let (b, ib) = audio_mask_span(&sf, 0.15, &mut seed::rng(5)).unwrap().unwrap();
        assert_eq!(ia, ib);
        assert_eq!(a, b);
        assert_eq!(ia.span_len, 15);
        for t in 0..sf.len() {
            let same = a.frames.row_slice(t) == sf.frames.row_slice(t);
            assert_eq!(same, !ia.flags[t]);
        }
    }

    #[test]
    fn phoneme_masking_counts() {
        let ph = PhonemeSequence::unmasked((0..20).map(|i| i % 26).collect());
        assert_eq!(phoneme_mask(&ph, 0.0, &mut seed::rng(1)).unwrap(), ph);
        let m = phoneme_mask(&ph, 0.25, &mut seed::rng(1)).unwrap();
        assert_eq!(m.masked_count(), 5);
        assert_eq!(m.ids.iter().filter(|&&p| p == PHONEME_MASK).count(), 5);
        assert_eq!(m, phoneme_mask(&ph, 0.25, &mut seed::rng(1)).unwrap());
    }

    fn frontend_store() -> ParamStore {
        let mut s = ParamStore::new();
        let mut r = seed::rng(3);
        s.insert("frontend.text.embed", normal_matrix(&mut r, 30, 4, 1.0), false);
        init_linear(&mut s, &mut r, "frontend.text.proj", 4, 6);
        s
    }

    #[test]
    fn text_frontend_repeats_rows() {
        let s = frontend_store();
        let ph = PhonemeSequence::unmasked(vec![1, 2, 3, 4, PHONEME_MASK]);
        let mut ctx = Ctx::infer(&s);
        let out = text_frontend(&mut ctx, &ph, 3).unwrap();
        let v = ctx.value(out).clone();
        assert_eq!(v.rows(), 15);
        for g in 0..5 {
            assert_eq!(v.row_slice(3 * g), v.row_slice(3 * g + 1));
            assert_eq!(v.row_slice(3 * g), v.row_slice(3 * g + 2));
        }
        let one = text_frontend(&mut ctx, &ph, 1).unwrap();
        assert_eq!(ctx.value(one).row_slice(2), v.row_slice(6));
        let bad = PhonemeSequence::unmasked(vec![31]);
        assert!(text_frontend(&mut ctx, &bad, 1).is_err());
    }

    proptest! {
        #[test]
        fn stacking_is_length_exact(t in 1usize..10_000, stride in 1usize..5) {
            let f = FeatureSequence::new(vec![0.5; t], 1, 10.0).unwrap();
            prop_assert_eq!(stack_and_subsample(&f, 4, stride).unwrap().len(), t.div_ceil(stride));
        }

        #[test]
        fn text_frontend_length(n in 1usize..12, up in 1usize..5) {
            let s = frontend_store();
            let ph = PhonemeSequence::unmasked((0..n as u16).collect());
            let mut ctx = Ctx::infer(&s);
            let out = text_frontend(&mut ctx, &ph, up).unwrap();
            prop_assert_eq!(ctx.g.shape(out).0, up * n);
        }
    }
}

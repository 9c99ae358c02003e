//! Cascaded conformer encoder: a causal stack followed by a non-causal
//! continuation with a bounded total lookahead.

use numerics::Var;
use rand::Rng;

use crate::params::{init_layer_norm, init_linear, normal_matrix, Ctx, ParamStore};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub input_dim: usize,
    pub causal_layers: usize,
    pub noncausal_layers: usize,
    pub model_dim: usize,
    pub heads: usize,
    /// Total lookahead of the non-causal stack, in encoder frames.
    pub right_context_frames: usize,
    pub conv_kernel: usize,
    pub ff_mult: usize,
    /// Past offsets beyond this share one learned position bias.
    pub max_left_offset: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            input_dim: 4 * 16,
            causal_layers: 2,
            noncausal_layers: 3,
            model_dim: 64,
            heads: 4,
            right_context_frames: 30,
            conv_kernel: 7,
            ff_mult: 4,
            max_left_offset: 16,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.model_dim == 0 || self.heads == 0 || self.model_dim % self.heads != 0 {
            return Err(Error::usage(format!(
                "model_dim {} must be a positive multiple of heads {}",
                self.model_dim, self.heads
            )));
        }
        if self.input_dim == 0 || self.conv_kernel == 0 || self.ff_mult == 0 {
            return Err(Error::usage("input_dim, conv_kernel and ff_mult must be positive"));
        }
        if self.causal_layers == 0 {
            return Err(Error::usage("the causal encoder needs at least one layer"));
        }
        if self.noncausal_layers == 0 && self.right_context_frames > 0 {
            return Err(Error::usage("right context requires at least one non-causal layer"));
        }
        Ok(())
    }

    /// Per-layer attention lookahead of the non-causal stack. The budget is
    /// split evenly, earlier layers taking the remainder.
    pub fn lookahead_schedule(&self) -> Vec<usize> {
        let l = self.noncausal_layers;
        if l == 0 {
            return Vec::new();
        }
        let (base, extra) = (self.right_context_frames / l, self.right_context_frames % l);
        (0..l).map(|i| base + usize::from(i < extra)).collect()
    }
}

fn init_ff(store: &mut ParamStore, rng: &mut impl Rng, p: &str, d: usize, mult: usize) {
    init_layer_norm(store, &format!("{p}.ln"), d);
    init_linear(store, rng, &format!("{p}.l1"), d, mult * d);
    init_linear(store, rng, &format!("{p}.l2"), mult * d, d);
}

pub fn init_block(store: &mut ParamStore, rng: &mut impl Rng, p: &str, cfg: &EncoderConfig, lookahead: usize) {
    let d = cfg.model_dim;
    init_ff(store, rng, &format!("{p}.ff1"), d, cfg.ff_mult);
    init_layer_norm(store, &format!("{p}.att.ln"), d);
    for m in ["q", "k", "v", "o"] {
        init_linear(store, rng, &format!("{p}.att.{m}"), d, d);
    }
    store.insert(
        format!("{p}.att.rel"),
        numerics::Tensor::zeros(cfg.heads, cfg.max_left_offset + 1 + lookahead),
        false,
    );
    init_layer_norm(store, &format!("{p}.conv.ln"), d);
    init_linear(store, rng, &format!("{p}.conv.pw1"), d, 2 * d);
    let k = cfg.conv_kernel;
    store.insert(
        format!("{p}.conv.dw"),
        normal_matrix(rng, k, d, (1.0 / k as f64).sqrt()),
        false,
    );
    init_linear(store, rng, &format!("{p}.conv.pw2"), d, d);
    init_ff(store, rng, &format!("{p}.ff2"), d, cfg.ff_mult);
    init_layer_norm(store, &format!("{p}.out_ln"), d);
}

pub fn init_encoders(store: &mut ParamStore, rng: &mut impl Rng, cfg: &EncoderConfig) -> Result<()> {
    cfg.validate()?;
    init_linear(store, rng, "enc_c.in", cfg.input_dim, cfg.model_dim);
    for l in 0..cfg.causal_layers {
        init_block(store, rng, &format!("enc_c.{l}"), cfg, 0);
    }
    for (l, r) in cfg.lookahead_schedule().into_iter().enumerate() {
        init_block(store, rng, &format!("enc_nc.{l}"), cfg, r);
    }
    Ok(())
}

fn feed_forward(ctx: &mut Ctx, x: Var, p: &str) -> Result<Var> {
    let n = ctx.layer_norm(x, &format!("{p}.ln"))?;
    let h = ctx.linear(n, &format!("{p}.l1"))?;
    let h = ctx.g.swish(h);
    let y = ctx.linear(h, &format!("{p}.l2"))?;
    let half = ctx.g.scale(y, 0.5);
    Ok(ctx.g.add(x, half)?)
}

fn self_attention(ctx: &mut Ctx, x: Var, p: &str, cfg: &EncoderConfig, lookahead: usize) -> Result<Var> {
    let t = ctx.g.shape(x).0;
    let d = cfg.model_dim;
    let dh = d / cfg.heads;
    let rel_width = cfg.max_left_offset + 1 + lookahead;
    let n = ctx.layer_norm(x, &format!("{p}.ln"))?;
    let q = ctx.linear(n, &format!("{p}.q"))?;
    let k = ctx.linear(n, &format!("{p}.k"))?;
    let v = ctx.linear(n, &format!("{p}.v"))?;
    let rel = ctx.p(&format!("{p}.rel"))?;
    if ctx.g.shape(rel) != (cfg.heads, rel_width) {
        return Err(Error::usage(format!(
            "`{p}.rel` has shape {:?}, expected [{} × {rel_width}]",
            ctx.g.shape(rel),
            cfg.heads
        )));
    }
    let mut allowed = vec![false; t * t];
    let mut offset = vec![0usize; t * t];
    for i in 0..t {
        for j in 0..t {
            if j <= i + lookahead {
                allowed[i * t + j] = true;
                offset[i * t + j] = if j <= i {
                    cfg.max_left_offset - (i - j).min(cfg.max_left_offset)
                } else {
                    cfg.max_left_offset + (j - i)
                };
            }
        }
    }
    let inv = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let qh = ctx.g.slice_cols(q, h * dh, dh)?;
        let kh = ctx.g.slice_cols(k, h * dh, dh)?;
        let vh = ctx.g.slice_cols(v, h * dh, dh)?;
        let kt = ctx.g.transpose(kh);
        let s = ctx.g.matmul(qh, kt)?;
        let s = ctx.g.scale(s, inv);
        let idx: Vec<usize> = offset.iter().map(|&o| h * rel_width + o).collect();
        let bias = ctx.g.gather_flat(rel, &idx, t, t)?;
        let s = ctx.g.add(s, bias)?;
        let a = ctx.g.masked_softmax_rows(s, &allowed)?;
        heads.push(ctx.g.matmul(a, vh)?);
    }
    let cat = if heads.len() == 1 {
        heads[0]
    } else {
        ctx.g.concat_cols(&heads)?
    };
    let o = ctx.linear(cat, &format!("{p}.o"))?;
    Ok(ctx.g.add(x, o)?)
}

/// Pointwise, GLU, left-only depthwise, swish, pointwise.
fn convolution(ctx: &mut Ctx, x: Var, p: &str, cfg: &EncoderConfig) -> Result<Var> {
    let d = cfg.model_dim;
    let n = ctx.layer_norm(x, &format!("{p}.ln"))?;
    let h = ctx.linear(n, &format!("{p}.pw1"))?;
    let a = ctx.g.slice_cols(h, 0, d)?;
    let b = ctx.g.slice_cols(h, d, d)?;
    let gate = ctx.g.sigmoid(b);
    let u = ctx.g.mul(a, gate)?;
    let dw = ctx.p(&format!("{p}.dw"))?;
    let t = ctx.g.shape(u).0;
    let mut acc: Option<Var> = None;
    for j in 0..cfg.conv_kernel.min(t) {
        let w = ctx.g.slice_rows(dw, j, 1)?;
        let shifted = if j == 0 { u } else { ctx.g.shift_rows(u, j as isize) };
        let term = ctx.g.mul_row(shifted, w)?;
        acc = Some(match acc {
            None => term,
            Some(s) => ctx.g.add(s, term)?,
        });
    }
    let c = ctx.g.swish(acc.expect("kernel has at least one tap"));
    let y = ctx.linear(c, &format!("{p}.pw2"))?;
    Ok(ctx.g.add(x, y)?)
}

/// One conformer block; `lookahead` future frames are visible to attention.
pub fn conformer_block(ctx: &mut Ctx, x: Var, p: &str, cfg: &EncoderConfig, lookahead: usize) -> Result<Var> {
    let (t, d) = ctx.g.shape(x);
    if t == 0 || d != cfg.model_dim {
        return Err(Error::usage(format!(
            "conformer block `{p}` expects [T × {}] input, got [{t} × {d}]",
            cfg.model_dim
        )));
    }
    let x = feed_forward(ctx, x, &format!("{p}.ff1"))?;
    let x = self_attention(ctx, x, &format!("{p}.att"), cfg, lookahead)?;
    let x = convolution(ctx, x, &format!("{p}.conv"), cfg)?;
    let x = feed_forward(ctx, x, &format!("{p}.ff2"))?;
    ctx.layer_norm(x, &format!("{p}.out_ln"))
}

/// Strictly causal stack over `[T × input_dim]` inputs.
pub fn encode_causal(ctx: &mut Ctx, x: Var, cfg: &EncoderConfig) -> Result<Var> {
    let (t, d) = ctx.g.shape(x);
    if t == 0 {
        return Err(Error::usage("empty encoder input"));
    }
    if d != cfg.input_dim {
        return Err(Error::usage(format!(
            "encoder input has {d} columns, expected {}",
            cfg.input_dim
        )));
    }
    let mut h = ctx.linear(x, "enc_c.in")?;
    for l in 0..cfg.causal_layers {
        h = conformer_block(ctx, h, &format!("enc_c.{l}"), cfg, 0)?;
    }
    Ok(h)
}

pub fn encode_noncausal(ctx: &mut Ctx, h: Var, cfg: &EncoderConfig) -> Result<Var> {
    if ctx.g.shape(h).0 == 0 {
        return Err(Error::usage("empty encoder input"));
    }
    let mut h = h;
    for (l, r) in cfg.lookahead_schedule().into_iter().enumerate() {
        h = conformer_block(ctx, h, &format!("enc_nc.{l}"), cfg, r)?;
    }
    Ok(h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;
    use numerics::Tensor;

    fn cfg() -> EncoderConfig {
        EncoderConfig {
            input_dim: 6,
            causal_layers: 2,
            noncausal_layers: 2,
            model_dim: 8,
            heads: 2,
            right_context_frames: 3,
            conv_kernel: 3,
            ff_mult: 2,
            max_left_offset: 4,
        }
    }

    fn store(c: &EncoderConfig) -> ParamStore {
        let mut s = ParamStore::new();
        init_encoders(&mut s, &mut seed::rng(1), c).unwrap();
        let mut r = seed::rng(2);
        let names: Vec<String> = s.names().filter(|n| n.ends_with(".rel")).cloned().collect();
        for n in names {
            let t = s.tensor(&n).unwrap();
            let v = normal_matrix(&mut r, t.rows(), t.cols(), 0.5);
            s.insert(n, v, false);
        }
        s
    }

    fn input(t: usize, d: usize, seed_: u64) -> Tensor {
        normal_matrix(&mut seed::rng(seed_), t, d, 1.0)
    }

    fn run(s: &ParamStore, c: &EncoderConfig, x: &Tensor, nc: bool) -> Tensor {
        let mut ctx = Ctx::infer(s);
        let xv = ctx.constant(x.clone());
        let h = encode_causal(&mut ctx, xv, c).unwrap();
        let out = if nc { encode_noncausal(&mut ctx, h, c).unwrap() } else { h };
        ctx.value(out).clone()
    }

    #[test]
    fn schedule_spreads_remainder_early() {
        let mut c = cfg();
        c.noncausal_layers = 4;
        c.right_context_frames = 30;
        assert_eq!(c.lookahead_schedule(), vec![8, 8, 7, 7]);
        assert_eq!(c.lookahead_schedule().iter().sum::<usize>(), 30);
    }

    #[test]
    fn zero_branches_reduce_to_layer_norm() {
        let c = cfg();
        let mut s = store(&c);
        let p = "enc_c.0";
        for b in ["ff1.l2", "att.o", "conv.pw2", "ff2.l2"] {
            for part in ["w", "b"] {
                let n = format!("{p}.{b}.{part}");
                let t = s.tensor(&n).unwrap();
                let z = Tensor::zeros(t.rows(), t.cols());
                s.insert(n, z, false);
            }
        }
        let x = input(5, 8, 3);
        let mut ctx = Ctx::infer(&s);
        let xv = ctx.constant(x.clone());
        let y = conformer_block(&mut ctx, xv, p, &c, 0).unwrap();
        let ln = ctx.layer_norm(xv, &format!("{p}.out_ln")).unwrap();
        assert_eq!(ctx.value(y), ctx.value(ln));
    }

    #[test]
    fn shapes_and_determinism() {
        let c = cfg();
        let s = store(&c);
        let x = input(17, 6, 4);
        let a = run(&s, &c, &x, true);
        assert_eq!(a.shape(), &[17, 8]);
        assert_eq!(a, run(&s, &c, &x, true));
        assert_eq!(run(&s, &c, &input(1, 6, 1), false).rows(), 1);
    }

    #[test]
    fn causal_prefix_is_stable() {
        let c = cfg();
        let s = store(&c);
        let x = input(12, 6, 5);
        let full = run(&s, &c, &x, false);
        for t in 1..12 {
            let prefix = Tensor::matrix(t, 6, x.data()[..t * 6].to_vec()).unwrap();
            let p = run(&s, &c, &prefix, false);
            assert_eq!(p.data(), &full.data()[..t * 8]);
        }
    }

    #[test]
    fn noncausal_lookahead_is_bounded() {
        let c = cfg();
        let s = store(&c);
        let x = input(14, 6, 6);
        let base = run(&s, &c, &x, true);
        for t in 0..14 {
            let k = t + c.right_context_frames + 1;
            if k >= 14 {
                break;
            }
            let mut y = x.clone();
            y.data_mut()[k * 6] += 3.0;
            let out = run(&s, &c, &y, true);
            assert_eq!(out.data()[..(t + 1) * 8], base.data()[..(t + 1) * 8]);
            // the frame exactly at the budget does see the change
            let mut z = x.clone();
            z.data_mut()[(t + c.right_context_frames) * 6] += 3.0;
            assert_ne!(run(&s, &c, &z, true).row_slice(t), base.row_slice(t));
        }
    }

    #[test]
    fn zero_right_context_is_causal() {
        let mut c = cfg();
        c.right_context_frames = 0;
        let s = store(&c);
        let x = input(9, 6, 8);
        let full = run(&s, &c, &x, true);
        let prefix = Tensor::matrix(4, 6, x.data()[..24].to_vec()).unwrap();
        assert_eq!(run(&s, &c, &prefix, true).data(), &full.data()[..32]);
    }
}

//! HAT transducer: recurrent prediction network, factorized joint and the
//! exact log-space alignment loss.

pub mod oracle;

use numerics::{log_add, log_sigmoid, sigmoid, Graph, Tensor, Var};
use rand::Rng;

use crate::data::wordpiece::BLANK;
use crate::params::{init_linear, normal_matrix, Ctx, ParamStore};
use crate::{Error, Result};

pub use oracle::{alignment_count, brute_force_loss};

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderConfig {
    /// Wordpiece vocabulary size including blank at id 0.
    pub vocab: usize,
    pub embed_dim: usize,
    pub pred_dim: usize,
    pub joint_dim: usize,
    pub enc_dim: usize,
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab < 2 {
            return Err(Error::usage("vocabulary needs blank plus at least one label"));
        }
        if self.embed_dim == 0 || self.pred_dim == 0 || self.joint_dim == 0 || self.enc_dim == 0 {
            return Err(Error::usage("decoder dimensions must be positive"));
        }
        Ok(())
    }
}

pub fn init_decoder(store: &mut ParamStore, rng: &mut impl Rng, p: &str, cfg: &DecoderConfig) -> Result<()> {
    cfg.validate()?;
    store.insert(format!("{p}.embed"), normal_matrix(rng, cfg.vocab, cfg.embed_dim, 1.0), false);
    store.insert(format!("{p}.start"), Tensor::zeros(1, cfg.pred_dim), false);
    store.insert(
        format!("{p}.rnn.wx"),
        normal_matrix(rng, cfg.embed_dim, cfg.pred_dim, (1.0 / cfg.embed_dim as f64).sqrt()),
        false,
    );
    store.insert(
        format!("{p}.rnn.wh"),
        normal_matrix(rng, cfg.pred_dim, cfg.pred_dim, (0.5 / cfg.pred_dim as f64).sqrt()),
        false,
    );
    store.insert(format!("{p}.rnn.b"), Tensor::zeros(1, cfg.pred_dim), false);
    store.insert(
        format!("{p}.joint.enc.w"),
        normal_matrix(rng, cfg.enc_dim, cfg.joint_dim, (1.0 / cfg.enc_dim as f64).sqrt()),
        false,
    );
    init_linear(store, rng, &format!("{p}.joint.pred"), cfg.pred_dim, cfg.joint_dim);
    init_linear(store, rng, &format!("{p}.joint.out"), cfg.joint_dim, cfg.vocab);
    Ok(())
}

fn check_labels(labels: &[u32], vocab: usize) -> Result<()> {
    if let Some(&bad) = labels.iter().find(|&&l| l == BLANK || l as usize >= vocab) {
        return Err(Error::usage(format!(
            "label {bad} is blank or outside the vocabulary of {vocab}"
        )));
    }
    Ok(())
}

/// Prediction states `[(U+1) × pred_dim]`; row `u` depends on `labels[..u]`.
pub fn predict(ctx: &mut Ctx, labels: &[u32], p: &str) -> Result<Var> {
    let embed = ctx.p(&format!("{p}.embed"))?;
    check_labels(labels, ctx.g.shape(embed).0)?;
    let start = ctx.p(&format!("{p}.start"))?;
    if labels.is_empty() {
        return Ok(start);
    }
    let wx = ctx.p(&format!("{p}.rnn.wx"))?;
    let wh = ctx.p(&format!("{p}.rnn.wh"))?;
    let b = ctx.p(&format!("{p}.rnn.b"))?;
    let ids: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
    let e = ctx.g.gather_rows(embed, &ids)?;
    let xin = ctx.g.matmul(e, wx)?;
    let xin = ctx.g.add_row(xin, b)?;
    let mut states = vec![start];
    let mut g = start;
    for u in 0..labels.len() {
        let x = ctx.g.slice_rows(xin, u, 1)?;
        let r = ctx.g.matmul(g, wh)?;
        let pre = ctx.g.add(x, r)?;
        g = ctx.g.tanh(pre);
        states.push(g);
    }
    Ok(ctx.g.concat_rows(&states)?)
}

/// Joint logits for every `(t, u)` pair, row `t·(U+1) + u`. Column 0 is the
/// blank logit, the rest are label logits.
pub fn joint_logits(ctx: &mut Ctx, enc: Var, pred: Var, p: &str) -> Result<Var> {
    let t = ctx.g.shape(enc).0;
    let u1 = ctx.g.shape(pred).0;
    let we = ctx.p(&format!("{p}.joint.enc.w"))?;
    let a = ctx.g.matmul(enc, we)?;
    let b = ctx.linear(pred, &format!("{p}.joint.pred"))?;
    let a = if u1 > 1 { ctx.g.repeat_rows(a, u1)? } else { a };
    let b = if t > 1 { ctx.g.tile_rows(b, t)? } else { b };
    let z = ctx.g.add(a, b)?;
    let z = ctx.g.tanh(z);
    ctx.linear(z, &format!("{p}.joint.out"))
}

/// HAT log-probabilities from one logit row: entry 0 is `log p_blank`,
/// entry `k ≥ 1` is `log p_label(k)`.
pub fn hat_log_probs(logits: &[f64]) -> Vec<f64> {
    let b = logits[0];
    let labels = &logits[1..];
    let m = labels.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + labels.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    let keep = log_sigmoid(-b);
    std::iter::once(log_sigmoid(b))
        .chain(labels.iter().map(|v| keep + v - lse))
        .collect()
}

/// `(p_blank, p_labels)` with `p_labels` indexed from label id 1.
pub fn hat_distribution(logits: &[f64]) -> (f64, Vec<f64>) {
    let pb = sigmoid(logits[0]);
    let labels = &logits[1..];
    let m = labels.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = labels.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    (pb, e.into_iter().map(|v| (1.0 - pb) * v / z).collect())
}

/// Joint evaluation for one encoder frame and one prediction state.
pub fn hat_joint(store: &ParamStore, p: &str, h_t: &[f64], g_u: &[f64]) -> Result<(f64, Vec<f64>)> {
    let w = DecoderWeights::from_store(store, p)?;
    if h_t.len() != w.joint_enc.rows() || g_u.len() != w.pred_dim() {
        return Err(Error::usage("joint input dimensions do not match the decoder"));
    }
    let a = row_matmul(h_t, &w.joint_enc, None);
    let logits = w.logits(&a, &w.pred_proj(g_u));
    Ok(hat_distribution(&logits))
}

/// Forward variables `α` over the `[T × (U+1)]` trellis.
pub fn forward_variables(t_len: usize, u_len: usize, blank: &[f64], label: &[f64]) -> Vec<f64> {
    let w = u_len + 1;
    let mut alpha = vec![f64::NEG_INFINITY; t_len * w];
    alpha[0] = 0.0;
    for t in 0..t_len {
        for u in 0..=u_len {
            if t == 0 && u == 0 {
                continue;
            }
            let mut a = f64::NEG_INFINITY;
            if t > 0 {
                a = alpha[(t - 1) * w + u] + blank[(t - 1) * w + u];
            }
            if u > 0 {
                a = log_add(a, alpha[t * w + u - 1] + label[t * w + u - 1]);
            }
            alpha[t * w + u] = a;
        }
    }
    alpha
}

fn backward_variables(t_len: usize, u_len: usize, blank: &[f64], label: &[f64]) -> Vec<f64> {
    let w = u_len + 1;
    let mut beta = vec![f64::NEG_INFINITY; t_len * w];
    for t in (0..t_len).rev() {
        for u in (0..=u_len).rev() {
            let i = t * w + u;
            beta[i] = if t == t_len - 1 && u == u_len {
                blank[i]
            } else {
                let mut b = f64::NEG_INFINITY;
                if t + 1 < t_len {
                    b = beta[i + w] + blank[i];
                }
                if u < u_len {
                    b = log_add(b, beta[i + 1] + label[i]);
                }
                b
            };
        }
    }
    beta
}

/// Negative log-likelihood over all alignments, with analytic gradients
/// with respect to the joint logits `[T·(U+1) × V]`.
pub fn loss_from_logits(g: &mut Graph, logits: Var, t_len: usize, labels: &[u32]) -> Result<Var> {
    let u_len = labels.len();
    let w = u_len + 1;
    let (rows, v) = g.shape(logits);
    if rows != t_len * w || v < 2 {
        return Err(Error::usage(format!(
            "joint logits [{rows} × {v}] do not match T={t_len}, U={u_len}"
        )));
    }
    check_labels(labels, v)?;
    let x = g.value(logits).data();
    let mut blank = vec![0.0; rows];
    let mut label = vec![f64::NEG_INFINITY; rows];
    let mut soft = vec![0.0; rows * (v - 1)];
    for i in 0..rows {
        let row = &x[i * v..(i + 1) * v];
        let lab = &row[1..];
        blank[i] = log_sigmoid(row[0]);
        let u = i % w;
        if u == u_len {
            continue;
        }
        let m = lab.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let s = &mut soft[i * (v - 1)..(i + 1) * (v - 1)];
        for (e, l) in s.iter_mut().zip(lab) {
            *e = (l - m).exp();
        }
        let z: f64 = s.iter().sum();
        s.iter_mut().for_each(|e| *e /= z);
        label[i] = log_sigmoid(-row[0]) + row[labels[u] as usize] - (m + z.ln());
    }
    let alpha = forward_variables(t_len, u_len, &blank, &label);
    let beta = backward_variables(t_len, u_len, &blank, &label);
    let log_p = alpha[rows - 1] + blank[rows - 1];
    if !log_p.is_finite() {
        return Err(Error::Numeric(format!("transducer log-likelihood is {log_p}")));
    }
    let mut grad = vec![0.0; rows * v];
    for i in 0..rows {
        let (t, u) = (i / w, i % w);
        let occ_blank = if t + 1 < t_len {
            (alpha[i] + blank[i] + beta[i + w] - log_p).exp()
        } else if u == u_len {
            (alpha[i] + blank[i] - log_p).exp()
        } else {
            0.0
        };
        let occ_label = if u < u_len {
            (alpha[i] + label[i] + beta[i + 1] - log_p).exp()
        } else {
            0.0
        };
        let pb = sigmoid(x[i * v]);
        let gr = &mut grad[i * v..(i + 1) * v];
        gr[0] = -(occ_blank * (1.0 - pb) - occ_label * pb);
        if occ_label != 0.0 {
            let y = labels[u] as usize;
            for j in 1..v {
                let delta = if j == y { 1.0 } else { 0.0 };
                gr[j] = -occ_label * (delta - soft[i * (v - 1) + j - 1]);
            }
        }
    }
    let local = Tensor::matrix(rows, v, grad)?;
    Ok(g.custom_scalar(&[logits], -log_p, vec![local])?)
}

/// Transducer loss of `labels` given encoder frames `enc`, decoded by the
/// decoder under prefix `p`. At most `max_symbols` labels per frame.
pub fn transducer_loss(ctx: &mut Ctx, enc: Var, labels: &[u32], p: &str, max_symbols: usize) -> Result<Var> {
    let t_len = ctx.g.shape(enc).0;
    if t_len == 0 {
        return Err(Error::usage("transducer loss needs at least one frame"));
    }
    if labels.len() > max_symbols * t_len {
        return Err(Error::usage(format!(
            "{} labels exceed {max_symbols} symbols per frame over {t_len} frames",
            labels.len()
        )));
    }
    let pred = predict(ctx, labels, p)?;
    let logits = joint_logits(ctx, enc, pred, p)?;
    loss_from_logits(&mut ctx.g, logits, t_len, labels)
}

fn row_matmul(x: &[f64], w: &Tensor, bias: Option<&Tensor>) -> Vec<f64> {
    let cols = w.cols();
    let mut out = match bias {
        Some(b) => b.data().to_vec(),
        None => vec![0.0; cols],
    };
    for (i, &xi) in x.iter().enumerate() {
        for (o, &wv) in out.iter_mut().zip(w.row_slice(i)) {
            *o += xi * wv;
        }
    }
    out
}

/// Plain-array copy of one decoder for search.
#[derive(Debug, Clone)]
pub struct DecoderWeights {
    embed: Tensor,
    start: Tensor,
    wx: Tensor,
    wh: Tensor,
    b: Tensor,
    joint_enc: Tensor,
    pred_w: Tensor,
    pred_b: Tensor,
    out_w: Tensor,
    out_b: Tensor,
}

impl DecoderWeights {
    pub fn from_store(store: &ParamStore, p: &str) -> Result<Self> {
        let t = |n: &str| store.tensor(&format!("{p}.{n}")).cloned();
        Ok(Self {
            embed: t("embed")?,
            start: t("start")?,
            wx: t("rnn.wx")?,
            wh: t("rnn.wh")?,
            b: t("rnn.b")?,
            joint_enc: t("joint.enc.w")?,
            pred_w: t("joint.pred.w")?,
            pred_b: t("joint.pred.b")?,
            out_w: t("joint.out.w")?,
            out_b: t("joint.out.b")?,
        })
    }

    pub fn vocab(&self) -> usize {
        self.out_w.cols()
    }

    pub fn pred_dim(&self) -> usize {
        self.start.cols()
    }

    pub fn start(&self) -> Vec<f64> {
        self.start.data().to_vec()
    }

    pub fn step(&self, state: &[f64], label: u32) -> Vec<f64> {
        let x = row_matmul(self.embed.row_slice(label as usize), &self.wx, Some(&self.b));
        let r = row_matmul(state, &self.wh, None);
        x.iter().zip(&r).map(|(a, b)| (a + b).tanh()).collect()
    }

    /// Encoder frames projected into the joint space, `[T × J]`.
    pub fn project_encoder(&self, enc: &Tensor) -> Result<Tensor> {
        Ok(enc.matmul(&self.joint_enc)?)
    }

    pub fn pred_proj(&self, state: &[f64]) -> Vec<f64> {
        row_matmul(state, &self.pred_w, Some(&self.pred_b))
    }

    pub fn logits(&self, enc_proj: &[f64], pred_proj: &[f64]) -> Vec<f64> {
        let z: Vec<f64> = enc_proj.iter().zip(pred_proj).map(|(a, b)| (a + b).tanh()).collect();
        row_matmul(&z, &self.out_w, Some(&self.out_b))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;
    use numerics::grad_check;

    fn cfg(v: usize) -> DecoderConfig {
        DecoderConfig {
            vocab: v,
            embed_dim: 3,
            pred_dim: 4,
            joint_dim: 5,
            enc_dim: 3,
        }
    }

    fn store(v: usize, s: u64) -> ParamStore {
        let mut st = ParamStore::new();
        init_decoder(&mut st, &mut seed::rng(s), "dec", &cfg(v)).unwrap();
        st
    }

    #[test]
    fn uniform_logits_split_evenly() {
        let (pb, pl) = hat_distribution(&[0.0, 1.0, 1.0, 1.0, 1.0]);
        assert_eq!(pb, 0.5);
        assert!(pl.iter().all(|&p| (p - 0.125).abs() < 1e-15));
        let (pb, _) = hat_distribution(&[800.0, 0.0, 1.0]);
        assert_eq!(pb, 1.0);
    }

    #[test]
    fn distribution_sums_to_one() {
        let mut r = seed::rng(4);
        for _ in 0..200 {
            let n = r.random_range(2..9);
            let l: Vec<f64> = (0..n).map(|_| r.random_range(-6.0..6.0)).collect();
            let (pb, pl) = hat_distribution(&l);
            assert!((pb + pl.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            let lp = hat_log_probs(&l);
            assert!((lp[0].exp() - pb).abs() < 1e-14);
        }
    }

    #[test]
    fn prediction_states_share_prefixes() {
        let s = store(6, 1);
        let mut ctx = Ctx::infer(&s);
        let a = predict(&mut ctx, &[1, 2, 3], "dec").unwrap();
        let b = predict(&mut ctx, &[1, 2, 5, 4], "dec").unwrap();
        let e = predict(&mut ctx, &[], "dec").unwrap();
        assert_eq!(ctx.g.shape(e), (1, 4));
        assert_eq!(ctx.value(a).data()[..12], ctx.value(b).data()[..12]);
        assert_ne!(ctx.value(a).row_slice(3), ctx.value(b).row_slice(3));
        assert!(predict(&mut ctx, &[1, 0], "dec").is_err());
        // plain stepping agrees with the tape
        let w = DecoderWeights::from_store(&s, "dec").unwrap();
        let g1 = w.step(&w.start(), 1);
        for (x, y) in g1.iter().zip(ctx.value(a).row_slice(1)) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    fn enc(t: usize, s: u64) -> Tensor {
        normal_matrix(&mut seed::rng(s), t, 3, 1.0)
    }

    fn loss(st: &ParamStore, e: &Tensor, y: &[u32]) -> f64 {
        let mut ctx = Ctx::infer(st);
        let ev = ctx.constant(e.clone());
        let l = transducer_loss(&mut ctx, ev, y, "dec", 4).unwrap();
        ctx.scalar(l)
    }

    #[test]
    fn single_frame_no_labels_is_blank() {
        let st = store(4, 2);
        let e = enc(1, 3);
        let w = DecoderWeights::from_store(&st, "dec").unwrap();
        let a = w.project_encoder(&e).unwrap();
        let lg = w.logits(a.row_slice(0), &w.pred_proj(&w.start()));
        assert!((loss(&st, &e, &[]) + hat_log_probs(&lg)[0]).abs() < 1e-12);
    }

    #[test]
    fn two_frame_one_label_by_hand() {
        let mut g = Graph::new();
        // rows (t,u): (0,0) (0,1) (1,0) (1,1); V=2
        let lg = Tensor::matrix(4, 2, vec![0.3, 0.0, -0.2, 0.0, 1.1, 0.0, 0.4, 0.0]).unwrap();
        let x = g.constant(lg);
        let l = loss_from_logits(&mut g, x, 2, &[1]).unwrap();
        let s = sigmoid;
        // emit at t=0 then blank twice, or blank then emit at t=1 then blank
        let p1 = (1.0 - s(0.3)) * s(-0.2) * s(0.4);
        let p2 = s(0.3) * (1.0 - s(1.1)) * s(0.4);
        assert!((g.value(l).data()[0] + (p1 + p2).ln()).abs() < 1e-12);
    }

    #[test]
    fn label_order_matters() {
        let st = store(5, 7);
        let e = enc(4, 8);
        assert_ne!(loss(&st, &e, &[1, 3]), loss(&st, &e, &[3, 1]));
    }

    #[test]
    fn symbol_cap_is_enforced() {
        let st = store(4, 2);
        let mut ctx = Ctx::infer(&st);
        let ev = ctx.constant(enc(1, 1));
        assert!(transducer_loss(&mut ctx, ev, &[1, 2, 3], "dec", 2).is_err());
    }

    #[test]
    fn logit_gradients_match_finite_differences() {
        let mut r = seed::rng(11);
        for _ in 0..10 {
            let t = r.random_range(1..5);
            let u = r.random_range(0..4);
            let v = r.random_range(2..6);
            let y: Vec<u32> = (0..u).map(|_| r.random_range(1..v as u32)).collect();
            let x = normal_matrix(&mut r, t * (u + 1), v, 1.5);
            let err = grad_check(
                |g, x| Ok(loss_from_logits(g, x, t, &y).map_err(|e| numerics::NumericsError::Numeric(e.to_string()))?),
                &x,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-6, "err {err}");
        }
    }
}

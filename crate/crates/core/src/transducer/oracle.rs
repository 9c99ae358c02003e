//! Exhaustive alignment enumeration, for checking the dynamic program.

use numerics::Tensor;

use super::{hat_distribution, DecoderWeights};
use crate::params::ParamStore;
use crate::{Error, Result};

const MAX_PATHS: u128 = 1_000_000;

/// Alignments of `u` labels over `t` frames: the last move is the final
/// blank, the other `t − 1` blanks and `u` labels interleave freely.
pub fn alignment_count(t: usize, u: usize) -> u128 {
    let n = (t - 1 + u) as u128;
    let k = u.min(t - 1) as u128;
    (0..k).fold(1u128, |acc, i| acc * (n - i) / (i + 1))
}

/// Linear-space probabilities `(p_blank, p_label(y_{u+1}))` per trellis node,
/// evaluated through the plain decoder arithmetic.
fn node_probs(store: &ParamStore, p: &str, enc: &Tensor, labels: &[u32]) -> Result<Vec<(f64, f64)>> {
    let w = DecoderWeights::from_store(store, p)?;
    let proj = w.project_encoder(enc)?;
    let mut state = w.start();
    let mut preds = vec![w.pred_proj(&state)];
    for &y in labels {
        state = w.step(&state, y);
        preds.push(w.pred_proj(&state));
    }
    let mut out = Vec::with_capacity(enc.rows() * preds.len());
    for t in 0..enc.rows() {
        for (u, g) in preds.iter().enumerate() {
            let (pb, pl) = hat_distribution(&w.logits(proj.row_slice(t), g));
            let py = labels.get(u).map_or(0.0, |&y| pl[y as usize - 1]);
            out.push((pb, py));
        }
    }
    Ok(out)
}

/// `−log Σ_paths Π p` by explicit enumeration. Returns the loss and the
/// number of alignments visited.
pub fn brute_force_loss(store: &ParamStore, p: &str, enc: &Tensor, labels: &[u32]) -> Result<(f64, u128)> {
    let t = enc.rows();
    if t == 0 {
        return Err(Error::usage("brute force needs at least one frame"));
    }
    let u = labels.len();
    if alignment_count(t, u) > MAX_PATHS {
        return Err(Error::usage(format!("T={t}, U={u} has too many alignments to enumerate")));
    }
    let probs = node_probs(store, p, enc, labels)?;
    let w = u + 1;
    let mut total = 0.0f64;
    let mut paths = 0u128;
    // depth-first over move sequences, leaving the final blank to the end
    let mut stack = vec![(0usize, 0usize, 1.0f64)];
    while let Some((ti, ui, prob)) = stack.pop() {
        if ti == t - 1 && ui == u {
            total += prob * probs[ti * w + ui].0;
            paths += 1;
            continue;
        }
        let (pb, py) = probs[ti * w + ui];
        if ti + 1 < t {
            stack.push((ti + 1, ui, prob * pb));
        }
        if ui < u {
            stack.push((ti, ui + 1, prob * py));
        }
    }
    Ok((-total.ln(), paths))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts() {
        assert_eq!(alignment_count(1, 0), 1);
        assert_eq!(alignment_count(3, 2), 6);
        assert_eq!(alignment_count(2, 1), 2);
        assert_eq!(alignment_count(4, 3), 20);
    }
}

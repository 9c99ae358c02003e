//! Exhaustive search over capped alignments, for checking the beam search.

use std::collections::BTreeMap;

use numerics::{log_add, Tensor};

use crate::transducer::{hat_log_probs, DecoderWeights};
use crate::Result;

/// Log probability of every label sequence reachable with at most
/// `max_symbols` emissions per frame, summed over its alignments.
pub fn sequence_scores(enc: &Tensor, w: &DecoderWeights, max_symbols: usize) -> Result<BTreeMap<Vec<u32>, f64>> {
    let proj = w.project_encoder(enc)?;
    let mut out = BTreeMap::new();
    if proj.rows() > 0 {
        let mut labels = Vec::new();
        walk(&proj, w, max_symbols, 0, 0, &mut labels, w.start(), 0.0, &mut out);
    }
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn walk(
    proj: &Tensor,
    w: &DecoderWeights,
    max: usize,
    t: usize,
    k: usize,
    labels: &mut Vec<u32>,
    state: Vec<f64>,
    lp: f64,
    out: &mut BTreeMap<Vec<u32>, f64>,
) {
    let p = hat_log_probs(&w.logits(proj.row_slice(t), &w.pred_proj(&state)));
    let blank = lp + p[0];
    if t + 1 == proj.rows() {
        let e = out.entry(labels.clone()).or_insert(f64::NEG_INFINITY);
        *e = log_add(*e, blank);
    } else {
        walk(proj, w, max, t + 1, 0, labels, state.clone(), blank, out);
    }
    if k < max {
        for y in 1..w.vocab() as u32 {
            labels.push(y);
            walk(proj, w, max, t, k + 1, labels, w.step(&state, y), lp + p[y as usize], out);
            labels.pop();
        }
    }
}

/// Highest-scoring sequence, ties broken by shorter then lexicographically
/// smaller labels.
pub fn best_sequence(scores: &BTreeMap<Vec<u32>, f64>) -> Option<(Vec<u32>, f64)> {
    scores
        .iter()
        .min_by(|a, b| b.1.total_cmp(a.1).then(a.0.len().cmp(&b.0.len())).then(a.0.cmp(b.0)))
        .map(|(l, s)| (l.clone(), *s))
}

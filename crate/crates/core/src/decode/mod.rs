//! Frame-synchronous beam search over the HAT transducer.
//!
//! Hypotheses carrying the same label sequence are merged by summing their
//! probabilities. The lattice is the prefix tree of label sequences kept by
//! the search: each node is created the first time its prefix survives a
//! frame, and arc weights are differences of creation scores, so any path
//! plus its final weight reproduces the hypothesis score exactly.

pub mod lattice;
pub mod oracle;

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, HashMap};

use numerics::{log_add, Tensor};

use crate::frontends::StackedFeatures;
use crate::model::{encode, ModelConfig, CAUSAL_DECODER, NONCAUSAL_DECODER};
use crate::params::{Ctx, ParamStore};
use crate::transducer::{hat_log_probs, DecoderWeights};
use crate::{Error, Result};

pub use lattice::{Arc, Lattice};

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub labels: Vec<u32>,
    /// Log probability summed over merged alignments.
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct DecodeStats {
    pub states_expanded: u64,
    pub frames: usize,
    pub beam_width: usize,
}

#[derive(Debug, Clone)]
pub struct DecodeResult {
    pub nbest: Vec<Hypothesis>,
    pub lattice: Lattice,
    pub stats: DecodeStats,
}

#[derive(Clone)]
struct Hyp {
    labels: Vec<u32>,
    score: f64,
    state: Vec<f64>,
    proj: Vec<f64>,
    /// Scores at each label emitted during the current frame.
    fresh: Vec<f64>,
}

struct Merged {
    hyp: Hyp,
    contributors: Vec<Vec<f64>>,
}

fn rank(a_score: f64, a: &[u32], b_score: f64, b: &[u32]) -> Ordering {
    b_score
        .total_cmp(&a_score)
        .then(a.len().cmp(&b.len()))
        .then(a.cmp(b))
}

fn prune(hyps: &mut Vec<Hyp>, beam: usize) {
    hyps.sort_by(|a, b| rank(a.score, &a.labels, b.score, &b.labels));
    hyps.truncate(beam);
}

struct Trie {
    index: HashMap<Vec<u32>, usize>,
    frames: Vec<usize>,
    created: Vec<f64>,
    arcs: Vec<(usize, usize, u32)>,
}

impl Trie {
    fn new() -> Self {
        let mut index = HashMap::new();
        index.insert(Vec::new(), 0);
        Self {
            index,
            frames: vec![0],
            created: vec![0.0],
            arcs: Vec::new(),
        }
    }

    /// Adds the prefixes emitted during frame `t` by one contributor.
    fn commit(&mut self, labels: &[u32], fresh: &[f64], t: usize, new_this_frame: &mut BTreeSet<usize>) {
        let base = labels.len() - fresh.len();
        for (i, &score) in fresh.iter().enumerate() {
            let prefix = &labels[..base + i + 1];
            match self.index.get(prefix) {
                Some(&n) => {
                    if new_this_frame.contains(&n) && score > self.created[n] {
                        self.created[n] = score;
                    }
                }
                None => {
                    let parent = self.index[&labels[..base + i]];
                    let n = self.frames.len();
                    self.index.insert(prefix.to_vec(), n);
                    self.frames.push(t);
                    self.created.push(score);
                    self.arcs.push((parent, n, prefix[prefix.len() - 1]));
                    new_this_frame.insert(n);
                }
            }
        }
    }
}

/// Beam search over encoder output `enc` (`[T × D]`). At most `max_symbols`
/// labels are emitted per frame, and each expansion proposes at most
/// `beam` labels.
pub fn beam_search(enc: &Tensor, w: &DecoderWeights, beam: usize, max_symbols: usize) -> Result<DecodeResult> {
    if beam == 0 {
        return Err(Error::usage("beam width must be at least 1"));
    }
    let t_len = enc.rows();
    if t_len == 0 {
        return Err(Error::usage("cannot decode an empty utterance"));
    }
    let proj = w.project_encoder(enc)?;
    let mut stats = DecodeStats {
        states_expanded: 0,
        frames: t_len,
        beam_width: beam,
    };
    let start = w.start();
    let mut active = vec![Hyp {
        labels: Vec::new(),
        score: 0.0,
        proj: w.pred_proj(&start),
        state: start,
        fresh: Vec::new(),
    }];
    let mut trie = Trie::new();

    for t in 0..t_len {
        let frame = proj.row_slice(t);
        let mut next: BTreeMap<Vec<u32>, Merged> = BTreeMap::new();
        let mut current = active;
        for k in 0..=max_symbols {
            let mut grown = Vec::new();
            for h in &current {
                stats.states_expanded += 1;
                let lp = hat_log_probs(&w.logits(frame, &h.proj));
                let ended = Hyp {
                    score: h.score + lp[0],
                    ..h.clone()
                };
                match next.get_mut(&h.labels) {
                    Some(m) => {
                        m.hyp.score = log_add(m.hyp.score, ended.score);
                        m.contributors.push(ended.fresh);
                    }
                    None => {
                        next.insert(
                            h.labels.clone(),
                            Merged {
                                contributors: vec![ended.fresh.clone()],
                                hyp: ended,
                            },
                        );
                    }
                }
                if k == max_symbols {
                    continue;
                }
                let mut cand: Vec<u32> = (1..lp.len() as u32).collect();
                cand.sort_by(|&a, &b| lp[b as usize].total_cmp(&lp[a as usize]).then(a.cmp(&b)));
                for &y in cand.iter().take(beam) {
                    let score = h.score + lp[y as usize];
                    let state = w.step(&h.state, y);
                    let mut labels = h.labels.clone();
                    labels.push(y);
                    let mut fresh = h.fresh.clone();
                    fresh.push(score);
                    grown.push(Hyp {
                        labels,
                        score,
                        proj: w.pred_proj(&state),
                        state,
                        fresh,
                    });
                }
            }
            prune(&mut grown, beam);
            if grown.is_empty() {
                break;
            }
            current = grown;
        }
        let mut survivors: Vec<Merged> = next.into_values().collect();
        survivors.sort_by(|a, b| rank(a.hyp.score, &a.hyp.labels, b.hyp.score, &b.hyp.labels));
        survivors.truncate(beam);
        let mut new_nodes = BTreeSet::new();
        for m in &survivors {
            for fresh in &m.contributors {
                trie.commit(&m.hyp.labels, fresh, t, &mut new_nodes);
            }
        }
        active = survivors
            .into_iter()
            .map(|m| Hyp {
                fresh: Vec::new(),
                ..m.hyp
            })
            .collect();
    }

    let nbest: Vec<Hypothesis> = active
        .iter()
        .map(|h| Hypothesis {
            labels: h.labels.clone(),
            score: h.score,
        })
        .collect();
    let finals = active
        .iter()
        .map(|h| {
            let n = trie.index[&h.labels];
            (n, h.score - trie.created[n])
        })
        .collect();
    let arcs = trie
        .arcs
        .iter()
        .map(|&(from, to, wordpiece)| Arc {
            from,
            to,
            wordpiece,
            weight: trie.created[to] - trie.created[from],
        })
        .collect();
    Ok(DecodeResult {
        nbest,
        lattice: Lattice {
            frames: trie.frames,
            arcs,
            start: 0,
            finals,
        },
        stats,
    })
}

/// Which encoder and decoder pair to decode with.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Causal,
    NonCausal,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Causal => "causal",
            Mode::NonCausal => "noncausal",
        }
    }
}

/// Runs the encoders in inference mode and searches with the chosen pass.
pub fn decode_utterance(
    store: &ParamStore,
    cfg: &ModelConfig,
    features: &StackedFeatures,
    mode: Mode,
    beam: usize,
) -> Result<DecodeResult> {
    let mut ctx = Ctx::infer(store);
    let x = ctx.constant(features.frames.clone());
    let (hc, hnc) = encode(&mut ctx, cfg, x)?;
    let (enc, prefix) = match mode {
        Mode::Causal => (hc, CAUSAL_DECODER),
        Mode::NonCausal => (hnc, NONCAUSAL_DECODER),
    };
    let enc = ctx.value(enc).clone();
    let w = DecoderWeights::from_store(store, prefix)?;
    beam_search(&enc, &w, beam, cfg.max_symbols)
}

/// `rank<TAB>score<TAB>text` lines, best first.
pub fn nbest_text(nbest: &[Hypothesis], to_text: impl Fn(&[u32]) -> String) -> String {
    nbest
        .iter()
        .enumerate()
        .map(|(i, h)| format!("{}\t{:?}\t{}\n", i + 1, h.score, to_text(&h.labels)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use crate::seed;
    use crate::transducer::{init_decoder, DecoderConfig};
    use proptest::prelude::*;

    fn weights(v: usize, s: u64) -> DecoderWeights {
        let mut st = ParamStore::new();
        let cfg = DecoderConfig {
            vocab: v,
            embed_dim: 3,
            pred_dim: 4,
            joint_dim: 5,
            enc_dim: 3,
        };
        init_decoder(&mut st, &mut seed::rng(s), "dec", &cfg).unwrap();
        DecoderWeights::from_store(&st, "dec").unwrap()
    }

    fn enc(t: usize, s: u64, scale: f64) -> Tensor {
        use rand::Rng;
        let mut r = seed::rng(s);
        Tensor::new(
            vec![t, 3],
            (0..t * 3).map(|_| r.random_range(-1.0..1.0) * scale).collect(),
        )
        .unwrap()
    }

    fn exhaustive(enc: &Tensor, w: &DecoderWeights, max_symbols: usize) -> BTreeMap<Vec<u32>, f64> {
        oracle::sequence_scores(enc, w, max_symbols).unwrap()
    }

    fn argmax(m: &BTreeMap<Vec<u32>, f64>) -> (Vec<u32>, f64) {
        oracle::best_sequence(m).unwrap()
    }

    #[test]
    fn wide_beam_matches_exhaustive_argmax_binary() {
        for s in 0..8 {
            let w = weights(2, s);
            let e = enc(3, 100 + s, 2.0);
            let ex = exhaustive(&e, &w, 2);
            let r = beam_search(&e, &w, 64, 2).unwrap();
            let (labels, score) = argmax(&ex);
            assert_eq!(r.nbest[0].labels, labels);
            assert!((r.nbest[0].score - score).abs() < 1e-9);
        }
    }

    #[test]
    fn wide_beam_matches_exhaustive_argmax_ternary() {
        for s in 0..4 {
            let w = weights(3, 40 + s);
            let e = enc(2, 200 + s, 2.0);
            let ex = exhaustive(&e, &w, 2);
            let r = beam_search(&e, &w, 64, 2).unwrap();
            assert_eq!(r.nbest.len(), ex.len());
            for h in &r.nbest {
                assert!((h.score - ex[&h.labels]).abs() < 1e-9);
            }
            assert_eq!(r.nbest[0].labels, argmax(&ex).0);
        }
    }

    #[test]
    fn probabilities_over_all_sequences_sum_to_one() {
        let w = weights(3, 9);
        let e = enc(3, 9, 1.0);
        let total = exhaustive(&e, &w, 1)
            .values()
            .fold(f64::NEG_INFINITY, |a, &b| log_add(a, b));
        // capping emissions removes mass, so the total is at most one
        assert!(total <= 1e-12);
        let uncapped_like = exhaustive(&e, &w, 4)
            .values()
            .fold(f64::NEG_INFINITY, |a, &b| log_add(a, b));
        assert!(uncapped_like > total);
    }

    #[test]
    fn greedy_gives_one_hypothesis_and_chain_lattice() {
        for s in 0..6 {
            let w = weights(5, s);
            let e = enc(6, s, 2.0);
            let r = beam_search(&e, &w, 1, 3).unwrap();
            assert_eq!(r.nbest.len(), 1);
            let k = r.nbest[0].labels.len();
            assert_eq!(r.lattice.num_arcs(), k);
            assert_eq!(r.lattice.finals.len(), 1);
            if k == 0 {
                assert_eq!(r.lattice.finals[0].0, r.lattice.start);
            }
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let w = weights(3, 1);
        assert!(beam_search(&enc(2, 1, 1.0), &w, 0, 2).unwrap_err().is_usage());
        let empty = Tensor::new(vec![0, 3], vec![]).unwrap();
        assert!(beam_search(&empty, &w, 2, 2).unwrap_err().is_usage());
    }

    #[test]
    fn nbest_format() {
        let n = vec![
            Hypothesis { labels: vec![3], score: -0.5 },
            Hypothesis { labels: vec![], score: -2.0 },
        ];
        let txt = nbest_text(&n, |l| format!("{l:?}"));
        assert_eq!(txt, "1\t-0.5\t[3]\n2\t-2.0\t[]\n");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn lattice_paths_reproduce_scores(s in 0u64..1000, t in 1usize..6, beam in 1usize..6, v in 2usize..6) {
            let w = weights(v, s);
            let e = enc(t, s + 7, 1.5);
            let r = beam_search(&e, &w, beam, 2).unwrap();
            let l = &r.lattice;
            prop_assert!(l.validate().is_ok());
            prop_assert!(r.nbest.len() <= beam);
            prop_assert!(r.stats.states_expanded >= t as u64);
            for h in &r.nbest {
                let p = l.path_score(&h.labels).expect("hypothesis path");
                prop_assert!((p - h.score).abs() < 1e-9);
                prop_assert!(h.labels.len() <= 2 * t);
            }
            for pair in r.nbest.windows(2) {
                prop_assert!(pair[0].score >= pair[1].score);
            }
            let back = Lattice::from_text(&l.to_text(), "mem").unwrap();
            prop_assert_eq!(&back, l);
        }
    }
}

//! Word error rate, lattice density, decoding-state counts and the
//! per-partition report.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::data::{SupervisedExample, TestPartitions, WordpieceModel, PARTITION_NAMES};
use crate::decode::{decode_utterance, DecodeResult, DecodeStats, Lattice, Mode};
use crate::frontends::stack_and_subsample;
use crate::model::ModelConfig;
use crate::params::ParamStore;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct EditCounts {
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
}

impl EditCounts {
    pub fn errors(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }
}

/// Unit-cost Levenshtein alignment. On equal cost the backtrace prefers a
/// substitution, then an insertion, then a deletion.
pub fn align<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> EditCounts {
    let (n, m) = (reference.len(), hypothesis.len());
    let mut d = vec![vec![0usize; m + 1]; n + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=m {
        d[0][j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub = d[i - 1][j - 1] + usize::from(reference[i - 1] != hypothesis[j - 1]);
            d[i][j] = sub.min(d[i][j - 1] + 1).min(d[i - 1][j] + 1);
        }
    }
    let mut c = EditCounts::default();
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        if i > 0 && j > 0 {
            let diff = usize::from(reference[i - 1] != hypothesis[j - 1]);
            if d[i][j] == d[i - 1][j - 1] + diff {
                c.substitutions += diff;
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if j > 0 && d[i][j] == d[i][j - 1] + 1 {
            c.insertions += 1;
            j -= 1;
        } else {
            c.deletions += 1;
            i -= 1;
        }
    }
    c
}

/// Corpus-level `(S + D + I) / Σ|ref|`.
pub fn wer<S: AsRef<str>>(refs: &[Vec<S>], hyps: &[Vec<S>]) -> Result<f64> {
    if refs.len() != hyps.len() {
        return Err(Error::usage(format!(
            "{} references but {} hypotheses",
            refs.len(),
            hyps.len()
        )));
    }
    let words: usize = refs.iter().map(Vec::len).sum();
    if words == 0 {
        return Err(Error::usage("reference corpus has no words"));
    }
    let errors: usize = refs
        .iter()
        .zip(hyps)
        .map(|(r, h)| {
            let r: Vec<&str> = r.iter().map(AsRef::as_ref).collect();
            let h: Vec<&str> = h.iter().map(AsRef::as_ref).collect();
            align(&r, &h).errors()
        })
        .sum();
    Ok(errors as f64 / words as f64)
}

pub fn lattice_density(lattice: &Lattice, ref_wordpieces: usize) -> Result<f64> {
    if ref_wordpieces == 0 {
        return Err(Error::usage("lattice density needs a non-empty reference"));
    }
    Ok(lattice.num_arcs() as f64 / ref_wordpieces as f64)
}

/// `(per-utterance mean, per-frame mean)`; the per-frame figure averages
/// each utterance's states-per-frame ratio.
pub fn avg_decoding_states(stats: &[DecodeStats]) -> Result<(f64, f64)> {
    if stats.is_empty() {
        return Err(Error::usage("no decoding statistics to average"));
    }
    let n = stats.len() as f64;
    let per_utt = stats.iter().map(|s| s.states_expanded as f64).sum::<f64>() / n;
    let per_frame = stats
        .iter()
        .map(|s| s.states_expanded as f64 / s.frames.max(1) as f64)
        .sum::<f64>()
        / n;
    Ok((per_utt, per_frame))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SetMetrics {
    pub name: String,
    pub utterances: usize,
    pub wer: f64,
    pub lattice_density: f64,
    pub avg_states: f64,
    pub per_frame_states: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvalReport {
    pub sets: Vec<SetMetrics>,
}

const CSV_HEADER: &str = "set,utterances,wer,lattice_density,avg_states,per_frame_states";

/// `(candidate − baseline) / baseline`, with `0/0` read as no change.
pub fn relative_delta(candidate: f64, baseline: f64) -> f64 {
    if baseline == 0.0 {
        if candidate == 0.0 {
            0.0
        } else {
            candidate.signum() * f64::INFINITY
        }
    } else {
        (candidate - baseline) / baseline
    }
}

/// Signed percentage with one decimal; no change renders as `-0.0%`.
pub fn format_delta(d: f64) -> String {
    let pct = d * 100.0;
    if pct > 0.0 && format!("{pct:.1}") != "0.0" {
        format!("+{pct:.1}%")
    } else {
        format!("-{:.1}%", pct.abs())
    }
}

impl EvalReport {
    pub fn get(&self, name: &str) -> Option<&SetMetrics> {
        self.sets.iter().find(|s| s.name == name)
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{CSV_HEADER}\n");
        for s in &self.sets {
            let _ = writeln!(
                out,
                "{},{},{:?},{:?},{:?},{:?}",
                s.name, s.utterances, s.wer, s.lattice_density, s.avg_states, s.per_frame_states
            );
        }
        out
    }

    pub fn from_csv(text: &str, path: &str) -> Result<Self> {
        let err = |line: usize, message: String| Error::Parse {
            path: path.to_string(),
            line,
            message,
        };
        let mut lines = text.lines();
        if lines.next() != Some(CSV_HEADER) {
            return Err(err(1, format!("expected header `{CSV_HEADER}`")));
        }
        let mut sets = Vec::new();
        for (i, line) in lines.enumerate() {
            let ln = i + 2;
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 6 {
                return Err(err(ln, format!("expected 6 fields, found {}", f.len())));
            }
            let num = |s: &str| -> Result<f64> { s.parse().map_err(|_| err(ln, format!("bad number `{s}`"))) };
            sets.push(SetMetrics {
                name: f[0].to_string(),
                utterances: f[1].parse().map_err(|_| err(ln, format!("bad count `{}`", f[1])))?,
                wer: num(f[2])?,
                lattice_density: num(f[3])?,
                avg_states: num(f[4])?,
                per_frame_states: num(f[5])?,
            });
        }
        Ok(Self { sets })
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv(&text, &path.display().to_string())
    }

    /// Aligned table with one row per metric and one column per set. With a
    /// baseline, rows show signed relative changes instead of values.
    pub fn table(&self, baseline: Option<&EvalReport>) -> Result<String> {
        type Pick = fn(&SetMetrics) -> f64;
        let metrics: [(&str, Pick); 4] = [
            ("WER", |s| s.wer),
            ("Lattice density", |s| s.lattice_density),
            ("Avg states", |s| s.avg_states),
            ("States/frame", |s| s.per_frame_states),
        ];
        let mut rows: Vec<Vec<String>> = vec![std::iter::once(String::from("Metric"))
            .chain(self.sets.iter().map(|s| s.name.clone()))
            .collect()];
        for (label, pick) in metrics {
            let mut row = vec![label.to_string()];
            for s in &self.sets {
                row.push(match baseline {
                    None => format!("{:.4}", pick(s)),
                    Some(b) => {
                        let bs = b
                            .get(&s.name)
                            .ok_or_else(|| Error::usage(format!("baseline report has no `{}` set", s.name)))?;
                        format_delta(relative_delta(pick(s), pick(bs)))
                    }
                });
            }
            rows.push(row);
        }
        let widths: Vec<usize> = (0..rows[0].len())
            .map(|c| rows.iter().map(|r| r[c].chars().count()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for r in &rows {
            let cells: Vec<String> = r
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(i, (c, &w))| if i == 0 { format!("{c:<w$}") } else { format!("{c:>w$}") })
                .collect();
            out.push_str(cells.join("  ").trim_end());
            out.push('\n');
        }
        Ok(out)
    }
}

#[derive(Debug, Clone)]
pub struct UtteranceResult {
    pub id: String,
    pub reference: Vec<String>,
    pub hypothesis: Vec<String>,
    pub ref_wordpieces: usize,
    pub decode: DecodeResult,
}

/// Decodes every example; order of the output follows the input.
pub fn decode_set(
    store: &ParamStore,
    cfg: &ModelConfig,
    wordpieces: &WordpieceModel,
    examples: &[SupervisedExample],
    mode: Mode,
    beam: usize,
    pool: &rayon::ThreadPool,
) -> Result<Vec<UtteranceResult>> {
    let f = &cfg.frontend;
    pool.install(|| {
        examples
            .par_iter()
            .map(|e| {
                let sf = stack_and_subsample(&e.audio, f.stack, f.stride)?;
                let decode = decode_utterance(store, cfg, &sf, mode, beam)?;
                let hypothesis = wordpieces.decode(&decode.nbest[0].labels);
                Ok(UtteranceResult {
                    id: e.id.clone(),
                    reference: e.text.clone(),
                    hypothesis,
                    ref_wordpieces: wordpieces.encode(&e.text).len(),
                    decode,
                })
            })
            .collect()
    })
}

pub fn set_metrics(name: &str, results: &[UtteranceResult]) -> Result<SetMetrics> {
    if results.is_empty() {
        return Err(Error::usage(format!("test set `{name}` is empty")));
    }
    let refs: Vec<Vec<String>> = results.iter().map(|r| r.reference.clone()).collect();
    let hyps: Vec<Vec<String>> = results.iter().map(|r| r.hypothesis.clone()).collect();
    let mut density = 0.0;
    for r in results {
        density += lattice_density(&r.decode.lattice, r.ref_wordpieces)?;
    }
    let stats: Vec<DecodeStats> = results.iter().map(|r| r.decode.stats).collect();
    let (avg_states, per_frame_states) = avg_decoding_states(&stats)?;
    Ok(SetMetrics {
        name: name.to_string(),
        utterances: results.len(),
        wer: wer(&refs, &hyps)?,
        lattice_density: density / results.len() as f64,
        avg_states,
        per_frame_states,
    })
}

/// All metrics on the five partitions, in their canonical order.
pub fn evaluate_suite(
    store: &ParamStore,
    cfg: &ModelConfig,
    wordpieces: &WordpieceModel,
    partitions: &TestPartitions,
    mode: Mode,
    beam: usize,
    pool: &rayon::ThreadPool,
) -> Result<EvalReport> {
    let mut sets = Vec::with_capacity(PARTITION_NAMES.len());
    for (name, examples) in partitions.sets() {
        let results = decode_set(store, cfg, wordpieces, examples, mode, beam, pool)?;
        sets.push(set_metrics(name, &results)?);
    }
    Ok(EvalReport { sets })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decode::Arc;
    use proptest::prelude::*;

    /// Plain recursive edit distance with memoization, independent of `align`.
    fn naive_distance(a: &[u8], b: &[u8]) -> usize {
        fn go(a: &[u8], b: &[u8], memo: &mut std::collections::HashMap<(usize, usize), usize>) -> usize {
            if a.is_empty() {
                return b.len();
            }
            if b.is_empty() {
                return a.len();
            }
            if let Some(&v) = memo.get(&(a.len(), b.len())) {
                return v;
            }
            let v = if a[0] == b[0] {
                go(&a[1..], &b[1..], memo)
            } else {
                1 + go(&a[1..], b, memo).min(go(a, &b[1..], memo)).min(go(&a[1..], &b[1..], memo))
            };
            memo.insert((a.len(), b.len()), v);
            v
        }
        go(a, b, &mut Default::default())
    }

    fn words(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn simple_wer_cases() {
        assert_eq!(wer(&[words("a b c")], &[words("a b c")]).unwrap(), 0.0);
        assert_eq!(wer(&[words("a b c")], &[words("a x c")]).unwrap(), 1.0 / 3.0);
        assert_eq!(wer(&[words("a b")], &[words("")]).unwrap(), 1.0);
        assert_eq!(wer(&[words("a")], &[words("b a c")]).unwrap(), 2.0);
        let empty: Vec<Vec<String>> = vec![vec![]];
        assert!(wer(&empty, &empty).unwrap_err().is_usage());
    }

    #[test]
    fn alignment_tie_prefers_substitution() {
        let c = align(&["a"], &["b"]);
        assert_eq!(c, EditCounts { substitutions: 1, deletions: 0, insertions: 0 });
    }

    #[test]
    fn density_formula() {
        let l = Lattice {
            frames: vec![0; 7],
            arcs: (0..6)
                .map(|i| Arc { from: i, to: i + 1, wordpiece: 3, weight: 0.0 })
                .collect(),
            start: 0,
            finals: vec![(6, 0.0)],
        };
        assert_eq!(lattice_density(&l, 3).unwrap(), 2.0);
        assert_eq!(lattice_density(&l, 6).unwrap(), 1.0);
        assert!(lattice_density(&l, 0).unwrap_err().is_usage());
    }

    #[test]
    fn state_means() {
        let s = |n, f| DecodeStats { states_expanded: n, frames: f, beam_width: 1 };
        assert_eq!(avg_decoding_states(&[s(10, 4)]).unwrap(), (10.0, 2.5));
        assert_eq!(avg_decoding_states(&[s(10, 5), s(20, 5)]).unwrap().0, 15.0);
        assert!(avg_decoding_states(&[]).is_err());
    }

    fn report(scale: f64) -> EvalReport {
        EvalReport {
            sets: PARTITION_NAMES
                .iter()
                .enumerate()
                .map(|(i, n)| SetMetrics {
                    name: n.to_string(),
                    utterances: 10 + i,
                    wer: scale * (0.1 + i as f64 / 7.0),
                    lattice_density: 1.5,
                    avg_states: 40.0 + i as f64,
                    per_frame_states: 4.0,
                })
                .collect(),
        }
    }

    #[test]
    fn csv_round_trip_and_table() {
        let r = report(1.0);
        assert_eq!(EvalReport::from_csv(&r.to_csv(), "m").unwrap(), r);
        let t = r.table(None).unwrap();
        let header: Vec<&str> = t.lines().next().unwrap().split_whitespace().collect();
        assert_eq!(header, ["Metric", "VS", "Noisy", "RPN", "R_LM", "C_LM"]);
        let own = r.table(Some(&r)).unwrap();
        assert_eq!(own.matches("-0.0%").count(), 20);
        let better = report(0.953).table(Some(&r)).unwrap();
        assert!(better.lines().nth(1).unwrap().contains("-4.7%"));
    }

    #[test]
    fn delta_rendering() {
        assert_eq!(format_delta(relative_delta(0.5, 0.5)), "-0.0%");
        assert_eq!(format_delta(relative_delta(0.0, 0.0)), "-0.0%");
        assert_eq!(format_delta(relative_delta(1.1, 1.0)), "+10.0%");
        assert_eq!(format_delta(relative_delta(0.95, 1.0)), "-5.0%");
    }

    proptest! {
        #[test]
        fn matches_naive_oracle(a in proptest::collection::vec(0u8..4, 0..9), b in proptest::collection::vec(0u8..4, 0..9)) {
            prop_assert_eq!(align(&a, &b).errors(), naive_distance(&a, &b));
        }
    }
}

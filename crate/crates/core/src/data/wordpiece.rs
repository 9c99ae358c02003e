//! Merge-based wordpiece vocabulary.
//!
//! Every word is spelled as `▁` followed by its characters; pieces never
//! cross word boundaries. Ids 0, 1 and 2 are reserved for blank, unknown and
//! mask.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;

use crate::{Error, Result};

pub const BLANK: u32 = 0;
pub const UNK: u32 = 1;
pub const MASK: u32 = 2;
pub const RESERVED: usize = 3;
pub const WORD_START: char = '▁';

const RESERVED_UNITS: [&str; RESERVED] = ["<blank>", "<unk>", "<mask>"];

#[derive(Debug, Clone, PartialEq)]
pub struct WordpieceModel {
    units: Vec<String>,
    index: HashMap<String, u32>,
    merges: Vec<(String, String)>,
    ranks: HashMap<(String, String), usize>,
}

fn spell(word: &str) -> Vec<String> {
    std::iter::once(WORD_START)
        .chain(word.chars())
        .map(|c| c.to_string())
        .collect()
}

impl WordpieceModel {
    /// Greedy pair merging until the vocabulary holds `vocab_size` units.
    /// Ties between equally frequent pairs go to the lexicographically
    /// smallest `(left, right)`.
    pub fn build<S: AsRef<str>>(texts: &[Vec<S>], vocab_size: usize) -> Result<Self> {
        let mut word_counts: BTreeMap<String, u64> = BTreeMap::new();
        for text in texts {
            for w in text {
                *word_counts.entry(w.as_ref().to_string()).or_default() += 1;
            }
        }
        let chars: BTreeSet<char> = std::iter::once(WORD_START)
            .chain(word_counts.keys().flat_map(|w| w.chars()))
            .collect();
        let base = RESERVED + chars.len();
        if vocab_size < base {
            return Err(Error::usage(format!(
                "vocab_size {vocab_size} is below the {} characters plus {RESERVED} reserved symbols",
                chars.len()
            )));
        }

        let mut units: Vec<String> = RESERVED_UNITS.iter().map(|s| s.to_string()).collect();
        units.extend(chars.iter().map(|c| c.to_string()));
        let mut known: BTreeSet<String> = units.iter().cloned().collect();

        let mut words: Vec<(Vec<String>, u64)> = word_counts
            .iter()
            .map(|(w, &n)| (spell(w), n))
            .collect();
        let mut merges = Vec::new();

        while units.len() < vocab_size {
            let mut pairs: HashMap<(&str, &str), u64> = HashMap::new();
            for (syms, n) in &words {
                for pair in syms.windows(2) {
                    *pairs.entry((pair[0].as_str(), pair[1].as_str())).or_default() += n;
                }
            }
            let best = pairs
                .into_iter()
                .max_by(|(pa, ca), (pb, cb)| ca.cmp(cb).then_with(|| pb.cmp(pa)))
                .map(|((a, b), _)| (a.to_string(), b.to_string()));
            let Some((left, right)) = best else {
                return Err(Error::usage(format!(
                    "corpus supports at most {} wordpieces, {vocab_size} requested",
                    units.len()
                )));
            };
            for (syms, _) in &mut words {
                merge_in_place(syms, &left, &right);
            }
            let joined = format!("{left}{right}");
            if known.insert(joined.clone()) {
                units.push(joined);
            }
            merges.push((left, right));
        }
        Ok(Self::from_parts(units, merges))
    }

    fn from_parts(units: Vec<String>, merges: Vec<(String, String)>) -> Self {
        let index = units
            .iter()
            .enumerate()
            .map(|(i, u)| (u.clone(), i as u32))
            .collect();
        let ranks = merges
            .iter()
            .enumerate()
            .map(|(i, m)| (m.clone(), i))
            .collect();
        Self {
            units,
            index,
            merges,
            ranks,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.units.len()
    }

    pub fn units(&self) -> &[String] {
        &self.units
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn unit(&self, id: u32) -> Option<&str> {
        self.units.get(id as usize).map(|s| s.as_str())
    }

    pub fn id(&self, unit: &str) -> Option<u32> {
        self.index.get(unit).copied()
    }

    pub fn encode_word(&self, word: &str) -> Vec<u32> {
        let mut syms = spell(word);
        loop {
            let best = syms
                .windows(2)
                .filter_map(|p| self.ranks.get(&(p[0].clone(), p[1].clone())))
                .min()
                .copied();
            let Some(rank) = best else { break };
            let (l, r) = &self.merges[rank];
            merge_in_place(&mut syms, l, r);
        }
        syms.iter().map(|s| self.index.get(s).copied().unwrap_or(UNK)).collect()
    }

    pub fn encode<S: AsRef<str>>(&self, words: &[S]) -> Vec<u32> {
        words.iter().flat_map(|w| self.encode_word(w.as_ref())).collect()
    }

    /// Joins pieces back into words; blank and mask ids are dropped.
    pub fn decode(&self, ids: &[u32]) -> Vec<String> {
        let mut text = String::new();
        for &id in ids {
            match id {
                BLANK | MASK => {}
                _ => text.push_str(self.unit(id).unwrap_or("<unk>")),
            }
        }
        text.split(WORD_START)
            .filter(|w| !w.is_empty())
            .map(|w| w.to_string())
            .collect()
    }

    /// Plain-text serialization: one unit per line, then the merges.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "units\t{}", self.units.len());
        for u in &self.units {
            let _ = writeln!(out, "{u}");
        }
        let _ = writeln!(out, "merges\t{}", self.merges.len());
        for (l, r) in &self.merges {
            let _ = writeln!(out, "{l}\t{r}");
        }
        out
    }

    pub fn from_text(text: &str, path: &str) -> Result<Self> {
        let perr = |line: usize, message: String| Error::Parse {
            path: path.to_string(),
            line,
            message,
        };
        let mut lines = text.lines().enumerate();
        let count = |lines: &mut dyn Iterator<Item = (usize, &str)>, tag: &str| -> Result<usize> {
            let (i, l) = lines.next().ok_or_else(|| perr(0, format!("missing `{tag}` header")))?;
            let n = l
                .strip_prefix(tag)
                .and_then(|rest| rest.trim().parse().ok())
                .ok_or_else(|| perr(i + 1, format!("expected `{tag}\\t<count>`")))?;
            Ok(n)
        };
        let n_units = count(&mut lines, "units")?;
        let mut units = Vec::with_capacity(n_units);
        for _ in 0..n_units {
            let (_, l) = lines.next().ok_or_else(|| perr(0, "truncated unit list".into()))?;
            units.push(l.to_string());
        }
        let n_merges = count(&mut lines, "merges")?;
        let mut merges = Vec::with_capacity(n_merges);
        for _ in 0..n_merges {
            let (i, l) = lines.next().ok_or_else(|| perr(0, "truncated merge list".into()))?;
            let (a, b) = l
                .split_once('\t')
                .ok_or_else(|| perr(i + 1, "merge needs two tab-separated units".into()))?;
            merges.push((a.to_string(), b.to_string()));
        }
        if units.len() < RESERVED || units[..RESERVED] != RESERVED_UNITS {
            return Err(perr(2, "reserved units missing".into()));
        }
        Ok(Self::from_parts(units, merges))
    }
}

fn merge_in_place(syms: &mut Vec<String>, left: &str, right: &str) {
    let mut i = 0;
    while i + 1 < syms.len() {
        if syms[i] == left && syms[i + 1] == right {
            let r = syms.remove(i + 1);
            syms[i].push_str(&r);
        }
        i += 1;
    }
}

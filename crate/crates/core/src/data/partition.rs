//! Frequency-driven test partitions over held-out utterances.

use std::collections::{HashMap, HashSet};

use rand_distr::{Distribution, Normal};

use super::corpus::{is_marker, SupervisedExample, UnsupervisedText};
use crate::seed;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PartitionThresholds {
    pub t_rare: usize,
    pub t_common: usize,
    pub noise_std: f64,
    pub noise_seed: u64,
}

impl Default for PartitionThresholds {
    fn default() -> Self {
        Self {
            t_rare: 5,
            t_common: 30,
            noise_std: 0.5,
            noise_seed: 0,
        }
    }
}

/// The tail sets may overlap; VS holds examples that qualify for none of them.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TestPartitions {
    pub vs: Vec<SupervisedExample>,
    pub noisy: Vec<SupervisedExample>,
    pub rpn: Vec<SupervisedExample>,
    pub r_lm: Vec<SupervisedExample>,
    pub c_lm: Vec<SupervisedExample>,
}

pub const PARTITION_NAMES: [&str; 5] = ["VS", "Noisy", "RPN", "R_LM", "C_LM"];

impl TestPartitions {
    pub fn sets(&self) -> [(&'static str, &[SupervisedExample]); 5] {
        [
            ("VS", &self.vs),
            ("Noisy", &self.noisy),
            ("RPN", &self.rpn),
            ("R_LM", &self.r_lm),
            ("C_LM", &self.c_lm),
        ]
    }

    pub fn sets_mut(&mut self) -> [&mut Vec<SupervisedExample>; 5] {
        [
            &mut self.vs,
            &mut self.noisy,
            &mut self.rpn,
            &mut self.r_lm,
            &mut self.c_lm,
        ]
    }
}

pub fn unigram_counts<'a, I, S>(texts: I) -> HashMap<String, usize>
where
    I: IntoIterator<Item = &'a [S]>,
    S: AsRef<str> + 'a,
{
    let mut counts = HashMap::new();
    for text in texts {
        for w in text {
            *counts.entry(w.as_ref().to_string()).or_default() += 1;
        }
    }
    counts
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Membership {
    pub rpn: bool,
    pub r_lm: bool,
    pub c_lm: bool,
}

impl Membership {
    pub fn is_tail(&self) -> bool {
        self.rpn || self.r_lm || self.c_lm
    }
}

pub fn classify(
    text: &[String],
    supervised: &HashMap<String, usize>,
    unpaired: &HashMap<String, usize>,
    th: &PartitionThresholds,
) -> Membership {
    let mut m = Membership::default();
    for w in text {
        let s = supervised.get(w).copied().unwrap_or(0);
        if s >= th.t_rare {
            continue;
        }
        let t = unpaired.get(w).copied().unwrap_or(0);
        m.rpn |= is_marker(w);
        m.r_lm |= t < th.t_rare;
        m.c_lm |= t >= th.t_common;
    }
    m
}

pub fn partition_test_sets(
    supervised: &[SupervisedExample],
    unpaired: &[UnsupervisedText],
    held_out: &[SupervisedExample],
    th: &PartitionThresholds,
) -> Result<TestPartitions> {
    if held_out.is_empty() {
        return Err(Error::usage("held-out set is empty"));
    }
    let train_ids: HashSet<&str> = supervised.iter().map(|e| e.id.as_str()).collect();
    if let Some(e) = held_out.iter().find(|e| train_ids.contains(e.id.as_str())) {
        return Err(Error::usage(format!(
            "held-out example `{}` also appears in the supervised corpus",
            e.id
        )));
    }
    let s_counts = unigram_counts(supervised.iter().map(|e| e.text.as_slice()));
    let t_counts = unigram_counts(unpaired.iter().map(|e| e.text.as_slice()));
    let mut parts = TestPartitions::default();
    for e in held_out {
        let m = classify(&e.text, &s_counts, &t_counts, th);
        if m.rpn {
            parts.rpn.push(e.clone());
        }
        if m.r_lm {
            parts.r_lm.push(e.clone());
        }
        if m.c_lm {
            parts.c_lm.push(e.clone());
        }
        if !m.is_tail() {
            parts.vs.push(e.clone());
        }
    }
    let noise = Normal::new(0.0, th.noise_std)
        .map_err(|_| Error::usage("noise_std must be finite and non-negative"))?;
    parts.noisy = parts
        .vs
        .iter()
        .enumerate()
        .map(|(i, e)| {
            let mut rng = seed::rng(seed::derive_indexed(th.noise_seed, "noisy", i as u64));
            let mut audio = e.audio.clone();
            for v in audio.frames_mut() {
                *v += noise.sample(&mut rng) as f32;
            }
            SupervisedExample {
                id: format!("{}-noisy", e.id),
                audio,
                text: e.text.clone(),
            }
        })
        .collect();
    Ok(parts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frontends::FeatureSequence;

    fn ex(id: &str, text: &str) -> SupervisedExample {
        SupervisedExample {
            id: id.into(),
            audio: FeatureSequence::new(vec![0.0; 4], 2, 10.0).unwrap(),
            text: text.split(' ').map(String::from).collect(),
        }
    }

    fn txt(id: &str, text: &str) -> UnsupervisedText {
        UnsupervisedText {
            id: id.into(),
            text: text.split(' ').map(String::from).collect(),
        }
    }

    fn repeat(word: &str, n: usize) -> Vec<SupervisedExample> {
        (0..n).map(|i| ex(&format!("{word}{i}"), word)).collect()
    }

    #[test]
    fn common_in_text_only_goes_to_c_lm() {
        let mut s = repeat("ba", 10);
        s.extend(repeat("zo", 2));
        let t: Vec<_> = (0..200).map(|i| txt(&format!("t{i}"), "zo")).collect();
        let th = PartitionThresholds {
            t_rare: 5,
            t_common: 150,
            ..Default::default()
        };
        let p = partition_test_sets(&s, &t, &[ex("h0", "ba zo")], &th).unwrap();
        assert_eq!(p.c_lm.len(), 1);
        assert!(p.vs.is_empty() && p.r_lm.is_empty() && p.rpn.is_empty());
    }

    #[test]
    fn frequent_words_go_to_vs_and_noisy_copies() {
        let s = repeat("ba", 10);
        let th = PartitionThresholds::default();
        let p = partition_test_sets(&s, &[], &[ex("h0", "ba ba")], &th).unwrap();
        assert_eq!(p.vs.len(), 1);
        assert_eq!(p.noisy.len(), 1);
        assert_ne!(p.noisy[0].audio, p.vs[0].audio);
        assert_eq!(p.noisy[0].text, p.vs[0].text);
    }

    #[test]
    fn rare_markers_and_words_rare_everywhere() {
        let mut s = repeat("ba", 10);
        s.extend(repeat("Kilo", 1));
        let p = partition_test_sets(&s, &[], &[ex("h0", "ba Kilo")], &Default::default()).unwrap();
        assert_eq!((p.rpn.len(), p.r_lm.len(), p.c_lm.len()), (1, 1, 0));
    }

    #[test]
    fn empty_or_overlapping_held_out_is_rejected() {
        let s = repeat("ba", 3);
        assert!(partition_test_sets(&s, &[], &[], &Default::default()).is_err());
        assert!(partition_test_sets(&s, &[], &[ex("ba0", "ba")], &Default::default()).is_err());
    }
}

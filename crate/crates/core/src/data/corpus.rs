//! Synthetic corpora: a stratified lexicon, Zipf-like word sampling and
//! audio rendered through the synthetic TTS voice.

use std::collections::{BTreeSet, HashMap};

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::frontends::FeatureSequence;
use crate::seed;
use crate::ssl::tts::{TextToSpeech, TtsOracle};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SupervisedExample {
    pub id: String,
    pub audio: FeatureSequence,
    pub text: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnsupervisedAudio {
    pub id: String,
    pub audio: FeatureSequence,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnsupervisedText {
    pub id: String,
    pub text: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusConfig {
    pub supervised: usize,
    pub unsup_audio: usize,
    pub unsup_text: usize,
    pub held_out: usize,
    pub max_corpus: usize,
    pub common_words: usize,
    pub frequent_markers: usize,
    /// Word types present in the supervised corpus fewer than `t_rare` times.
    pub rare_stratum_count: usize,
    /// Share of the rare stratum realized as marker tokens.
    pub rare_marker_fraction: f64,
    pub text_only_words: usize,
    pub min_words: usize,
    pub max_words: usize,
    pub zipf_exponent: f64,
    pub marker_rate: f64,
    pub t_rare: usize,
    pub t_common: usize,
    pub feature_dim: usize,
    pub frame_step_ms: f64,
    pub tts_jitter: f64,
    /// Additive noise separating recorded audio from clean synthesis.
    pub recording_noise: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            supervised: 1000,
            unsup_audio: 2000,
            unsup_text: 5000,
            held_out: 200,
            max_corpus: 1_000_000,
            common_words: 60,
            frequent_markers: 12,
            rare_stratum_count: 20,
            rare_marker_fraction: 0.5,
            text_only_words: 80,
            min_words: 2,
            max_words: 4,
            zipf_exponent: 1.0,
            marker_rate: 0.12,
            t_rare: 5,
            t_common: 30,
            feature_dim: 16,
            frame_step_ms: 10.0,
            tts_jitter: 0.1,
            recording_noise: 0.3,
        }
    }
}

/// Which population a lexicon entry belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stratum {
    Common,
    FrequentMarker,
    /// Rare in the supervised corpus, at least `t_common` occurrences in text.
    RareTextCommon,
    /// Rare in the supervised corpus and in text.
    RareTextRare,
    TextOnly,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LexEntry {
    pub word: String,
    pub stratum: Stratum,
    /// Exact occurrences in the supervised corpus for rare words.
    pub supervised_count: usize,
    /// Exact occurrences in the text corpus for injected words.
    pub text_count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Lexicon {
    pub entries: Vec<LexEntry>,
}

impl Lexicon {
    pub fn words(&self, stratum: Stratum) -> Vec<&str> {
        self.entries
            .iter()
            .filter(|e| e.stratum == stratum)
            .map(|e| e.word.as_str())
            .collect()
    }

    pub fn rare(&self) -> impl Iterator<Item = &LexEntry> {
        self.entries
            .iter()
            .filter(|e| matches!(e.stratum, Stratum::RareTextCommon | Stratum::RareTextRare))
    }

    pub fn all_words(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.word.as_str())
    }
}

/// Marker tokens stand in for proper nouns: they start with an uppercase letter.
pub fn is_marker(word: &str) -> bool {
    word.chars().next().is_some_and(|c| c.is_ascii_uppercase())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpora {
    pub lexicon: Lexicon,
    pub supervised: Vec<SupervisedExample>,
    pub unsup_audio: Vec<UnsupervisedAudio>,
    pub unsup_text: Vec<UnsupervisedText>,
    /// Held-out utterances for test partitioning, disjoint from `supervised`.
    pub held_out: Vec<SupervisedExample>,
}

const ONSETS: [&str; 17] = [
    "b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "sh", "ch", "th",
];
const VOWELS: [&str; 5] = ["a", "e", "i", "o", "u"];

fn capitalize(w: &str) -> String {
    let mut c = w.chars();
    match c.next() {
        Some(f) => f.to_ascii_uppercase().to_string() + c.as_str(),
        None => String::new(),
    }
}

fn make_lexicon(cfg: &CorpusConfig, rng: &mut ChaCha8Rng) -> Result<Lexicon> {
    let rare_markers = (cfg.rare_stratum_count as f64 * cfg.rare_marker_fraction).round() as usize;
    let rare_plain = cfg.rare_stratum_count - rare_markers;
    let total = cfg.common_words
        + cfg.frequent_markers
        + cfg.rare_stratum_count
        + cfg.text_only_words;
    let mut seen = BTreeSet::new();
    let mut forms = Vec::with_capacity(total);
    let mut attempts = 0usize;
    while forms.len() < total {
        attempts += 1;
        if attempts > total * 1000 {
            return Err(Error::usage("lexicon too large for the syllable inventory"));
        }
        // common words are short, the tail grows longer
        let syllables = match forms.len() {
            n if n < cfg.common_words / 2 => rng.random_range(1..=2),
            n if n < cfg.common_words => 2,
            _ => rng.random_range(2..=3),
        };
        let w: String = (0..syllables)
            .map(|_| {
                let o = ONSETS[rng.random_range(0..ONSETS.len())];
                let v = VOWELS[rng.random_range(0..VOWELS.len())];
                format!("{o}{v}")
            })
            .collect();
        if seen.insert(w.clone()) {
            forms.push(w);
        }
    }
    let mut it = forms.into_iter();
    let mut entries = Vec::with_capacity(total);
    let mut take = |n: usize, stratum: Stratum, marker: bool, rng: &mut ChaCha8Rng| {
        for w in it.by_ref().take(n) {
            let word = if marker { capitalize(&w) } else { w };
            let (supervised_count, text_count) = match stratum {
                Stratum::RareTextCommon => (
                    rng.random_range(1..cfg.t_rare.max(2)),
                    cfg.t_common + rng.random_range(0..=cfg.t_common),
                ),
                Stratum::RareTextRare => (
                    rng.random_range(1..cfg.t_rare.max(2)),
                    rng.random_range(1..cfg.t_rare.max(2)),
                ),
                _ => (0, 0),
            };
            entries.push(LexEntry {
                word,
                stratum,
                supervised_count,
                text_count,
            });
        }
    };
    take(cfg.common_words, Stratum::Common, false, rng);
    take(cfg.frequent_markers, Stratum::FrequentMarker, true, rng);
    // rare markers are well attested in text, plain rare words split evenly
    take(rare_markers, Stratum::RareTextCommon, true, rng);
    take(rare_plain.div_ceil(2), Stratum::RareTextCommon, false, rng);
    take(rare_plain / 2, Stratum::RareTextRare, false, rng);
    take(cfg.text_only_words, Stratum::TextOnly, false, rng);
    Ok(Lexicon { entries })
}

struct Zipf {
    cdf: Vec<f64>,
}

impl Zipf {
    fn new(n: usize, s: f64) -> Self {
        let mut acc = 0.0;
        let cdf = (1..=n)
            .map(|k| {
                acc += 1.0 / (k as f64).powf(s);
                acc
            })
            .collect::<Vec<_>>();
        let total = acc;
        Self {
            cdf: cdf.into_iter().map(|c| c / total).collect(),
        }
    }

    fn sample(&self, rng: &mut impl Rng) -> usize {
        let u: f64 = rng.random();
        self.cdf.partition_point(|&c| c < u).min(self.cdf.len() - 1)
    }
}

fn sample_sentences(
    n: usize,
    cfg: &CorpusConfig,
    common: &[&str],
    markers: &[&str],
    extra: &[&str],
    extra_rate: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<Vec<String>> {
    let zipf = Zipf::new(common.len(), cfg.zipf_exponent);
    (0..n)
        .map(|_| {
            let len = rng.random_range(cfg.min_words..=cfg.max_words);
            (0..len)
                .map(|_| {
                    let u: f64 = rng.random();
                    if !markers.is_empty() && u < cfg.marker_rate {
                        markers[rng.random_range(0..markers.len())].to_string()
                    } else if !extra.is_empty() && u < cfg.marker_rate + extra_rate {
                        extra[rng.random_range(0..extra.len())].to_string()
                    } else {
                        common[zipf.sample(rng)].to_string()
                    }
                })
                .collect()
        })
        .collect()
}

fn positions_of(sentences: &[Vec<String>]) -> HashMap<String, Vec<(usize, usize)>> {
    let mut pos: HashMap<String, Vec<(usize, usize)>> = HashMap::new();
    for (i, s) in sentences.iter().enumerate() {
        for (j, w) in s.iter().enumerate() {
            pos.entry(w.clone()).or_default().push((i, j));
        }
    }
    pos
}

/// Overwrites random occurrences of the currently most frequent donor word
/// so that `word` occurs exactly `count` more times. Donors never drop below
/// `floor` occurrences.
fn inject(
    sentences: &mut [Vec<String>],
    pos: &mut HashMap<String, Vec<(usize, usize)>>,
    donors: &[&str],
    word: &str,
    count: usize,
    floor: usize,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    for _ in 0..count {
        let donor = donors
            .iter()
            .max_by_key(|d| (pos.get(**d).map_or(0, |v| v.len()), std::cmp::Reverse(**d)))
            .copied()
            .ok_or_else(|| Error::usage("no donor words available"))?;
        let slots = pos.get_mut(donor).expect("donor has positions");
        if slots.len() <= floor {
            return Err(Error::usage(format!(
                "corpus too small to place `{word}` with every frequent word above {floor} occurrences"
            )));
        }
        let k = rng.random_range(0..slots.len());
        let (i, j) = slots.swap_remove(k);
        sentences[i][j] = word.to_string();
        pos.entry(word.to_string()).or_default().push((i, j));
    }
    Ok(())
}

fn render(
    tts: &TtsOracle,
    text: &[String],
    noise: f64,
    rng: &mut ChaCha8Rng,
) -> Result<FeatureSequence> {
    let mut audio = tts.synthesize(text)?;
    if noise > 0.0 {
        let dist = Normal::new(0.0, noise).expect("finite noise");
        for v in audio.frames_mut() {
            *v += dist.sample(rng) as f32;
        }
    }
    Ok(audio)
}

/// Voice and seeds shared by every corpus rendered for one master seed.
pub fn training_voice(cfg: &CorpusConfig, seed: u64) -> TtsOracle {
    TtsOracle::new(
        seed::derive(seed, "tts.voice"),
        cfg.feature_dim,
        cfg.frame_step_ms,
        cfg.tts_jitter,
    )
    .with_seed(seed::derive(seed, "tts.jitter"))
}

pub fn synth_corpora(cfg: &CorpusConfig, seed: u64) -> Result<Corpora> {
    for (name, n) in [
        ("supervised", cfg.supervised),
        ("unsup_audio", cfg.unsup_audio),
        ("unsup_text", cfg.unsup_text),
    ] {
        if n == 0 {
            return Err(Error::usage(format!("corpus size `{name}` must be at least 1")));
        }
        if n > cfg.max_corpus {
            return Err(Error::usage(format!(
                "corpus size `{name}` = {n} exceeds max_corpus = {}",
                cfg.max_corpus
            )));
        }
    }
    if cfg.min_words == 0 || cfg.min_words > cfg.max_words {
        return Err(Error::usage("need 1 <= min_words <= max_words"));
    }
    if cfg.common_words == 0 || cfg.t_rare < 2 {
        return Err(Error::usage("need common_words >= 1 and t_rare >= 2"));
    }
    let mut rng = seed::rng(seed::derive(seed, "corpus.lexicon"));
    let lexicon = make_lexicon(cfg, &mut rng)?;
    let common = lexicon.words(Stratum::Common);
    let markers = lexicon.words(Stratum::FrequentMarker);
    let text_only = lexicon.words(Stratum::TextOnly);

    // supervised text: every frequent word reaches t_rare, rare words exact
    let mut rng = seed::rng(seed::derive(seed, "corpus.supervised"));
    let mut s_text = sample_sentences(cfg.supervised, cfg, &common, &markers, &[], 0.0, &mut rng);
    let mut pos = positions_of(&s_text);
    let frequent: Vec<&str> = common.iter().chain(&markers).copied().collect();
    for w in &frequent {
        let have = pos.get(*w).map_or(0, |v| v.len());
        if have < cfg.t_rare {
            let donors: Vec<&str> = frequent.iter().copied().filter(|d| d != w).collect();
            inject(&mut s_text, &mut pos, &donors, w, cfg.t_rare - have, cfg.t_rare, &mut rng)?;
        }
    }
    for e in lexicon.rare() {
        inject(&mut s_text, &mut pos, &common, &e.word, e.supervised_count, cfg.t_rare, &mut rng)?;
    }

    // text-only corpus draws on a broader vocabulary
    let mut rng = seed::rng(seed::derive(seed, "corpus.text"));
    let mut t_text = sample_sentences(cfg.unsup_text, cfg, &common, &markers, &text_only, 0.25, &mut rng);
    let mut tpos = positions_of(&t_text);
    for e in lexicon.rare() {
        inject(&mut t_text, &mut tpos, &common, &e.word, e.text_count, cfg.t_rare, &mut rng)?;
    }

    let mut rng = seed::rng(seed::derive(seed, "corpus.audio_text"));
    let a_text = sample_sentences(cfg.unsup_audio, cfg, &common, &markers, &[], 0.0, &mut rng);

    let voice = training_voice(cfg, seed);
    let mut rng = seed::rng(seed::derive(seed, "corpus.recording"));
    let mut supervised = Vec::with_capacity(s_text.len());
    for (i, text) in s_text.into_iter().enumerate() {
        let audio = render(&voice, &text, cfg.recording_noise, &mut rng)?;
        supervised.push(SupervisedExample {
            id: format!("s-{i:06}"),
            audio,
            text,
        });
    }
    let mut unsup_audio = Vec::with_capacity(a_text.len());
    for (i, text) in a_text.into_iter().enumerate() {
        let audio = render(&voice, &text, cfg.recording_noise, &mut rng)?;
        unsup_audio.push(UnsupervisedAudio {
            id: format!("ua-{i:06}"),
            audio,
        });
    }
    let unsup_text = t_text
        .into_iter()
        .enumerate()
        .map(|(i, text)| UnsupervisedText {
            id: format!("ut-{i:06}"),
            text,
        })
        .collect();
    let held_out = synth_held_out(cfg, &lexicon, seed)?;
    Ok(Corpora {
        lexicon,
        supervised,
        unsup_audio,
        unsup_text,
        held_out,
    })
}

/// Held-out utterances cycle through five compositions: plain frequent
/// words (two of five), one rare word well attested in text, one rare
/// marker, one word rare in both corpora. Audio uses the training voice with
/// its own jitter seed.
pub fn synth_held_out(cfg: &CorpusConfig, lexicon: &Lexicon, seed: u64) -> Result<Vec<SupervisedExample>> {
    let common = lexicon.words(Stratum::Common);
    let markers = lexicon.words(Stratum::FrequentMarker);
    let pick = |marker: bool, stratum: Stratum| -> Vec<&str> {
        lexicon
            .rare()
            .filter(|e| is_marker(&e.word) == marker && e.stratum == stratum)
            .map(|e| e.word.as_str())
            .collect()
    };
    let rare_text_common = pick(false, Stratum::RareTextCommon);
    let rare_markers = pick(true, Stratum::RareTextCommon);
    let rare_text_rare = pick(false, Stratum::RareTextRare);
    let mut rng = seed::rng(seed::derive(seed, "corpus.held_out"));
    let mut texts = sample_sentences(cfg.held_out, cfg, &common, &markers, &[], 0.0, &mut rng);
    for (i, text) in texts.iter_mut().enumerate() {
        let pool: &[&str] = match i % 5 {
            2 => &rare_text_common,
            3 => &rare_markers,
            4 => &rare_text_rare,
            _ => &[],
        };
        if !pool.is_empty() {
            let j = rng.random_range(0..text.len());
            text[j] = pool.choose(&mut rng).expect("non-empty").to_string();
        }
    }
    let voice = TtsOracle::new(
        seed::derive(seed, "tts.voice"),
        cfg.feature_dim,
        cfg.frame_step_ms,
        cfg.tts_jitter,
    )
    .with_seed(seed::derive(seed, "tts.jitter.test"));
    let mut rng = seed::rng(seed::derive(seed, "corpus.recording.test"));
    texts
        .into_iter()
        .enumerate()
        .map(|(i, text)| {
            let audio = render(&voice, &text, cfg.recording_noise, &mut rng)?;
            Ok(SupervisedExample {
                id: format!("test-{i:06}"),
                audio,
                text,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> CorpusConfig {
        CorpusConfig {
            supervised: 300,
            unsup_audio: 40,
            unsup_text: 600,
            held_out: 50,
            feature_dim: 4,
            ..CorpusConfig::default()
        }
    }

    #[test]
    fn cardinalities_follow_config() {
        let c = synth_corpora(&small(), 7).unwrap();
        assert_eq!(c.supervised.len(), 300);
        assert_eq!(c.unsup_audio.len(), 40);
        assert_eq!(c.unsup_text.len(), 600);
        assert_eq!(c.held_out.len(), 50);
    }

    #[test]
    fn generation_is_deterministic() {
        let a = synth_corpora(&small(), 11).unwrap();
        let b = synth_corpora(&small(), 11).unwrap();
        assert_eq!(a, b);
        let c = synth_corpora(&small(), 12).unwrap();
        assert_ne!(a.supervised[0].text, c.supervised[0].text);
    }

    #[test]
    fn size_limits_are_enforced() {
        let mut cfg = small();
        cfg.max_corpus = 100;
        assert!(matches!(synth_corpora(&cfg, 1), Err(Error::Usage(_))));
        cfg.max_corpus = 1000;
        cfg.supervised = 0;
        assert!(matches!(synth_corpora(&cfg, 1), Err(Error::Usage(_))));
    }

    #[test]
    fn markers_are_capitalized() {
        let c = synth_corpora(&small(), 3).unwrap();
        for e in &c.lexicon.entries {
            let expect = matches!(e.stratum, Stratum::FrequentMarker)
                || (e.stratum == Stratum::RareTextCommon && is_marker(&e.word));
            if e.stratum == Stratum::FrequentMarker {
                assert!(is_marker(&e.word));
            }
            let _ = expect;
        }
        assert!(c.supervised.iter().any(|s| s.text.iter().any(|w| is_marker(w))));
    }
}

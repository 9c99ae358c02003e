//! Per-word grapheme-to-phoneme lookup over the synthetic character set.

use std::collections::HashMap;

use crate::frontends::PhonemeSequence;

/// Single-letter phonemes `A`..`Z` occupy ids 0..26.
pub const LETTER_PHONEMES: u16 = 26;
pub const PHONEME_SH: u16 = 26;
pub const PHONEME_CH: u16 = 27;
pub const PHONEME_TH: u16 = 28;
/// Number of real phonemes; the mask symbol comes right after.
pub const NUM_PHONEMES: u16 = 29;
pub const PHONEME_MASK: u16 = NUM_PHONEMES;

pub fn phoneme_name(id: u16) -> String {
    match id {
        0..=25 => ((b'A' + id as u8) as char).to_string(),
        PHONEME_SH => "SH".into(),
        PHONEME_CH => "CH".into(),
        PHONEME_TH => "TH".into(),
        PHONEME_MASK => "<mask>".into(),
        _ => format!("<{id}>"),
    }
}

/// One phoneme per ASCII letter, case-insensitive; anything else yields nothing.
pub fn letter_phonemes(word: &str) -> Vec<u16> {
    word.chars()
        .filter(|c| c.is_ascii_alphabetic())
        .map(|c| (c.to_ascii_lowercase() as u8 - b'a') as u16)
        .collect()
}

/// Pronunciation used for words in the table: digraphs `sh`, `ch` and `th`
/// collapse to a single phoneme.
pub fn digraph_phonemes(word: &str) -> Vec<u16> {
    let lower = word.to_ascii_lowercase();
    let b = lower.as_bytes();
    let mut out = Vec::with_capacity(b.len());
    let mut i = 0;
    while i < b.len() {
        if i + 1 < b.len() && b[i + 1] == b'h' {
            let digraph = match b[i] {
                b's' => Some(PHONEME_SH),
                b'c' => Some(PHONEME_CH),
                b't' => Some(PHONEME_TH),
                _ => None,
            };
            if let Some(p) = digraph {
                out.push(p);
                i += 2;
                continue;
            }
        }
        if b[i].is_ascii_lowercase() {
            out.push((b[i] - b'a') as u16);
        }
        i += 1;
    }
    out
}

#[derive(Debug, Clone, Default)]
pub struct G2p {
    table: HashMap<String, Vec<u16>>,
}

impl G2p {
    pub fn new(table: HashMap<String, Vec<u16>>) -> Self {
        Self { table }
    }

    /// Table covering `words` (keys are lowercased) with digraph pronunciations.
    pub fn from_lexicon<'a>(words: impl IntoIterator<Item = &'a str>) -> Self {
        let table = words
            .into_iter()
            .map(|w| (w.to_ascii_lowercase(), digraph_phonemes(w)))
            .collect();
        Self { table }
    }

    pub fn lookup(&self, word: &str) -> Option<&[u16]> {
        self.table.get(&word.to_ascii_lowercase()).map(|v| v.as_slice())
    }

    pub fn word(&self, word: &str) -> Vec<u16> {
        match self.lookup(word) {
            Some(p) => p.to_vec(),
            None => letter_phonemes(word),
        }
    }

    /// Concatenated pronunciations of every word; nothing is masked.
    pub fn grapheme_to_phoneme<S: AsRef<str>>(&self, text: &[S]) -> PhonemeSequence {
        let ids: Vec<u16> = text.iter().flat_map(|w| self.word(w.as_ref())).collect();
        PhonemeSequence::unmasked(ids)
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_entry_is_returned_verbatim() {
        let mut table = HashMap::new();
        table.insert("shavo".to_string(), vec![PHONEME_SH, 0, 21, 14]);
        let g2p = G2p::new(table);
        assert_eq!(g2p.grapheme_to_phoneme(&["shavo"]).ids, vec![PHONEME_SH, 0, 21, 14]);
    }

    #[test]
    fn empty_text_gives_empty_sequence() {
        let g2p = G2p::from_lexicon(["ka"]);
        let empty: [&str; 0] = [];
        assert!(g2p.grapheme_to_phoneme(&empty).ids.is_empty());
    }

    #[test]
    fn out_of_table_word_falls_back_to_letters() {
        let g2p = G2p::from_lexicon(["ka"]);
        let ph = g2p.grapheme_to_phoneme(&["zq"]);
        assert_eq!(ph.ids, vec![25, 16]);
        assert_eq!(ph.ids.iter().map(|&p| phoneme_name(p)).collect::<Vec<_>>(), vec!["Z", "Q"]);
    }

    #[test]
    fn digraphs_differ_from_letter_fallback() {
        let g2p = G2p::from_lexicon(["shi"]);
        assert_eq!(g2p.word("shi"), vec![PHONEME_SH, 8]);
        assert_eq!(letter_phonemes("shi"), vec![18, 7, 8]);
        // proper nouns are pronounced like their lowercase form
        assert_eq!(g2p.word("Shi"), g2p.word("shi"));
    }
}

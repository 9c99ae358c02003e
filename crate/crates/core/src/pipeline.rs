//! Corpus synthesis, on-disk datasets and training inputs for one config.

use std::path::Path;

use crate::config::Config;
use crate::data::manifest::{read_corpus, write_corpus, Record};
use crate::data::{
    partition_test_sets, synth_corpora, training_voice, G2p, SupervisedExample, TestPartitions,
    UnsupervisedAudio, UnsupervisedText, WordpieceModel, PARTITION_NAMES,
};
use crate::trainer::TrainData;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub supervised: Vec<SupervisedExample>,
    pub unsup_audio: Vec<UnsupervisedAudio>,
    pub unsup_text: Vec<UnsupervisedText>,
    pub partitions: TestPartitions,
    pub wordpieces: WordpieceModel,
    /// Words covered by the pronunciation table.
    pub words: Vec<String>,
}

fn set_file(name: &str) -> String {
    format!("test_{}", name.to_ascii_lowercase())
}

impl Dataset {
    pub fn g2p(&self) -> G2p {
        G2p::from_lexicon(self.words.iter().map(String::as_str))
    }

    pub fn save(&self, dir: &Path, dim: usize, step_ms: f64) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let write = |stem: &str, records: Vec<Record>| {
            write_corpus(
                &dir.join(format!("{stem}.tsv")),
                &dir.join(format!("{stem}.f32")),
                &records,
                dim,
                step_ms,
            )
        };
        let paired = |v: &[SupervisedExample]| -> Vec<Record> {
            v.iter()
                .map(|e| Record {
                    id: e.id.clone(),
                    text: e.text.clone(),
                    audio: Some(e.audio.clone()),
                })
                .collect()
        };
        write("supervised", paired(&self.supervised))?;
        write(
            "unsup_audio",
            self.unsup_audio
                .iter()
                .map(|e| Record {
                    id: e.id.clone(),
                    text: Vec::new(),
                    audio: Some(e.audio.clone()),
                })
                .collect(),
        )?;
        write(
            "unsup_text",
            self.unsup_text
                .iter()
                .map(|e| Record {
                    id: e.id.clone(),
                    text: e.text.clone(),
                    audio: None,
                })
                .collect(),
        )?;
        for (name, set) in self.partitions.sets() {
            write(&set_file(name), paired(set))?;
        }
        let wp = dir.join("wordpieces.txt");
        std::fs::write(&wp, self.wordpieces.to_text()).map_err(|e| Error::io(&wp, e))?;
        let lex = dir.join("lexicon.txt");
        let mut words = self.words.join("\n");
        words.push('\n');
        std::fs::write(&lex, words).map_err(|e| Error::io(&lex, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        if !dir.join("supervised.tsv").exists() {
            return Err(Error::usage(format!(
                "no corpus found in {} (run `synth` first)",
                dir.display()
            )));
        }
        let read = |stem: &str| read_corpus(&dir.join(format!("{stem}.tsv")), &dir.join(format!("{stem}.f32")));
        let paired = |stem: &str| -> Result<Vec<SupervisedExample>> {
            read(stem)?
                .into_iter()
                .map(|r| {
                    let audio = r
                        .audio
                        .ok_or_else(|| Error::usage(format!("`{}` in {stem} has no audio", r.id)))?;
                    Ok(SupervisedExample {
                        id: r.id,
                        audio,
                        text: r.text,
                    })
                })
                .collect()
        };
        let supervised = paired("supervised")?;
        let unsup_audio = read("unsup_audio")?
            .into_iter()
            .map(|r| {
                let audio = r
                    .audio
                    .ok_or_else(|| Error::usage(format!("`{}` in unsup_audio has no audio", r.id)))?;
                Ok(UnsupervisedAudio { id: r.id, audio })
            })
            .collect::<Result<_>>()?;
        let unsup_text = read("unsup_text")?
            .into_iter()
            .map(|r| UnsupervisedText { id: r.id, text: r.text })
            .collect();
        let mut partitions = TestPartitions::default();
        for (name, slot) in PARTITION_NAMES.iter().zip(partitions.sets_mut()) {
            *slot = paired(&set_file(name))?;
        }
        let wp = dir.join("wordpieces.txt");
        let text = std::fs::read_to_string(&wp).map_err(|e| Error::io(&wp, e))?;
        let wordpieces = WordpieceModel::from_text(&text, &wp.display().to_string())?;
        let lex = dir.join("lexicon.txt");
        let words = std::fs::read_to_string(&lex)
            .map_err(|e| Error::io(&lex, e))?
            .lines()
            .filter(|l| !l.is_empty())
            .map(String::from)
            .collect();
        Ok(Self {
            supervised,
            unsup_audio,
            unsup_text,
            partitions,
            wordpieces,
            words,
        })
    }
}

/// Corpora, test partitions and the wordpiece inventory for `cfg`.
pub fn synthesize(cfg: &Config) -> Result<Dataset> {
    let c = synth_corpora(&cfg.corpus, cfg.seed)?;
    let partitions = partition_test_sets(&c.supervised, &c.unsup_text, &c.held_out, &cfg.thresholds())?;
    let texts: Vec<Vec<String>> = c
        .supervised
        .iter()
        .map(|e| e.text.clone())
        .chain(c.unsup_text.iter().map(|e| e.text.clone()))
        .collect();
    let wordpieces = WordpieceModel::build(&texts, cfg.model.vocab)?;
    Ok(Dataset {
        words: c.lexicon.all_words().map(String::from).collect(),
        supervised: c.supervised,
        unsup_audio: c.unsup_audio,
        unsup_text: c.unsup_text,
        partitions,
        wordpieces,
    })
}

pub fn train_data(cfg: &Config, ds: &Dataset) -> Result<TrainData> {
    TrainData::prepare(
        &cfg.model,
        &ds.supervised,
        &ds.unsup_audio,
        &ds.unsup_text,
        ds.g2p(),
        ds.wordpieces.clone(),
        Some(Box::new(training_voice(&cfg.corpus, cfg.seed))),
    )
}

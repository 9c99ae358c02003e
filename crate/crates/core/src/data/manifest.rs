//! On-disk corpora: a tab-separated manifest plus a raw feature file.
//!
//! Manifest lines are `id<TAB>text<TAB>feature_offset<TAB>feature_len`, where
//! the offset counts frames from the start of the feature file and the text
//! is space-separated (empty for audio-only records, `feature_len` zero for
//! text-only ones). The feature file holds little-endian `f32` values,
//! row-major, concatenated in manifest order. The first manifest line is a
//! header `#dim<TAB>D<TAB>step_ms<TAB>S`.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::frontends::FeatureSequence;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub id: String,
    pub text: Vec<String>,
    pub audio: Option<FeatureSequence>,
}

pub fn write_corpus(manifest: &Path, features: &Path, records: &[Record], dim: usize, step_ms: f64) -> Result<()> {
    let mut lines = format!("#dim\t{dim}\tstep_ms\t{step_ms:?}\n");
    let mut bytes = Vec::new();
    let mut offset = 0usize;
    for r in records {
        if r.id.contains(['\t', '\n']) || r.text.iter().any(|w| w.contains(['\t', '\n', ' '])) {
            return Err(Error::usage(format!("record `{}` contains separator characters", r.id)));
        }
        let len = match &r.audio {
            Some(a) => {
                if a.dim() != dim {
                    return Err(Error::usage(format!("record `{}` has feature dim {}, expected {dim}", r.id, a.dim())));
                }
                for v in a.frames() {
                    bytes.extend_from_slice(&v.to_le_bytes());
                }
                a.len()
            }
            None => 0,
        };
        lines.push_str(&format!("{}\t{}\t{offset}\t{len}\n", r.id, r.text.join(" ")));
        offset += len;
    }
    fs::write(manifest, lines).map_err(|e| Error::io(manifest, e))?;
    let mut f = fs::File::create(features).map_err(|e| Error::io(features, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(features, e))?;
    Ok(())
}

pub fn read_corpus(manifest: &Path, features: &Path) -> Result<Vec<Record>> {
    let text = fs::read_to_string(manifest).map_err(|e| Error::io(manifest, e))?;
    let bytes = fs::read(features).map_err(|e| Error::io(features, e))?;
    let mpath = manifest.display().to_string();
    let perr = |line: usize, message: String| Error::Parse {
        path: mpath.clone(),
        line,
        message,
    };
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| perr(1, "missing header".into()))?;
    let h: Vec<&str> = header.split('\t').collect();
    let (dim, step_ms) = match h.as_slice() {
        ["#dim", d, "step_ms", s] => (
            d.parse::<usize>().map_err(|_| perr(1, "bad feature dim".into()))?,
            s.parse::<f64>().map_err(|_| perr(1, "bad frame step".into()))?,
        ),
        _ => return Err(perr(1, "expected `#dim<TAB>D<TAB>step_ms<TAB>S`".into())),
    };
    let total_frames = bytes.len() / 4 / dim.max(1);
    if bytes.len() != total_frames * dim * 4 {
        return Err(Error::usage(format!(
            "feature file {} is not a whole number of frames",
            features.display()
        )));
    }
    let mut out = Vec::new();
    for (i, line) in lines {
        let n = i + 1;
        let f: Vec<&str> = line.split('\t').collect();
        let [id, words, off, len] = f.as_slice() else {
            return Err(perr(n, format!("expected 4 tab-separated fields, found {}", f.len())));
        };
        let off: usize = off.parse().map_err(|_| perr(n, format!("bad offset `{off}`")))?;
        let len: usize = len.parse().map_err(|_| perr(n, format!("bad length `{len}`")))?;
        if off + len > total_frames {
            return Err(perr(n, format!("frames {off}..{} exceed the feature file", off + len)));
        }
        let audio = if len == 0 {
            None
        } else {
            let frames = bytes[off * dim * 4..(off + len) * dim * 4]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            Some(FeatureSequence::new(frames, dim, step_ms)?)
        };
        let text = if words.is_empty() {
            Vec::new()
        } else {
            words.split(' ').map(String::from).collect()
        };
        out.push(Record {
            id: id.to_string(),
            text,
            audio,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let (m, f) = (dir.path().join("c.tsv"), dir.path().join("c.f32"));
        let recs = vec![
            Record {
                id: "a".into(),
                text: vec!["ba".into(), "Ko".into()],
                audio: Some(FeatureSequence::new(vec![0.1, -2.5, f32::MIN_POSITIVE, 3.0e7], 2, 10.0).unwrap()),
            },
            Record {
                id: "b".into(),
                text: vec!["zu".into()],
                audio: None,
            },
            Record {
                id: "c".into(),
                text: vec![],
                audio: Some(FeatureSequence::new(vec![1.0 / 3.0, 7.0], 2, 10.0).unwrap()),
            },
        ];
        write_corpus(&m, &f, &recs, 2, 10.0).unwrap();
        assert_eq!(read_corpus(&m, &f).unwrap(), recs);
    }

    #[test]
    fn malformed_line_names_its_number() {
        let dir = tempfile::tempdir().unwrap();
        let (m, f) = (dir.path().join("c.tsv"), dir.path().join("c.f32"));
        fs::write(&m, "#dim\t2\tstep_ms\t10.0\nx\tba\t0\n").unwrap();
        fs::write(&f, []).unwrap();
        match read_corpus(&m, &f) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }
}

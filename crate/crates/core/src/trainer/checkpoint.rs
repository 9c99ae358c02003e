//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    "JASRCKPT"
//! version  u32
//! digest   [u8; 32]   SHA-256 of the model config text
//! config   u32 length + UTF-8 canonical model config
//! step     u64
//! count    u32, then per array:
//!            name   u32 length + UTF-8
//!            dtype  u8 (1 = f64)
//!            frozen u8
//!            ndim   u32, dims u64 × ndim
//!            data   f64 × product(dims)
//! "RNG0"   seed [u8; 32], word position u128, stream u64
//! "ADAM"   t u64, count u32, then per entry: name, m array, v array
//! trailer  [u8; 32]   SHA-256 of every preceding byte
//! ```

use std::path::Path;

use numerics::Tensor;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::adam::AdamState;
use crate::model::ModelConfig;
use crate::params::ParamStore;
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"JASRCKPT";
pub const FORMAT_VERSION: u32 = 1;
const DTYPE_F64: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    pub store: ParamStore,
    pub adam: AdamState,
    pub rng: ChaCha8Rng,
    /// Canonical model config the parameters were laid out for.
    pub config_text: String,
}

pub fn config_digest(text: &str) -> [u8; 32] {
    Sha256::digest(text.as_bytes()).into()
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn bytes(&mut self, b: &[u8]) {
        self.0.extend_from_slice(b);
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.bytes(s.as_bytes());
    }
    fn array(&mut self, t: &Tensor) {
        self.u32(t.shape().len() as u32);
        for &d in t.shape() {
            self.u64(d as u64);
        }
        for v in t.data() {
            self.bytes(&v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("name is not UTF-8".into()))
    }
    fn tag(&mut self, tag: &[u8; 4]) -> Result<()> {
        if self.take(4)? != tag {
            return Err(Error::Checkpoint(format!(
                "expected section `{}`",
                String::from_utf8_lossy(tag)
            )));
        }
        Ok(())
    }
    fn array(&mut self) -> Result<Tensor> {
        let ndim = self.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(self.u64()? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("array too large".into()))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Ok(Tensor::new(shape, data)?)
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.bytes(MAGIC);
        w.u32(FORMAT_VERSION);
        w.bytes(&config_digest(&self.config_text));
        w.str(&self.config_text);
        w.u64(self.step);
        w.u32(self.store.len() as u32);
        for (name, p) in self.store.iter() {
            w.str(name);
            w.u8(DTYPE_F64);
            w.u8(u8::from(p.frozen));
            w.array(&p.value);
        }
        w.bytes(b"RNG0");
        w.bytes(&self.rng.get_seed());
        w.bytes(&self.rng.get_word_pos().to_le_bytes());
        w.u64(self.rng.get_stream());
        w.bytes(b"ADAM");
        w.u64(self.adam.t);
        w.u32(self.adam.m.len() as u32);
        for (name, m) in &self.adam.m {
            w.str(name);
            w.array(m);
            w.array(&self.adam.v[name]);
        }
        let trailer = Sha256::digest(&w.0);
        w.bytes(&trailer);
        w.0
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        if buf.len() < MAGIC.len() + 4 + 32 + 32 {
            return Err(Error::Checkpoint("file too short".into()));
        }
        let (body, trailer) = buf.split_at(buf.len() - 32);
        if Sha256::digest(body).as_slice() != trailer {
            return Err(Error::Checkpoint("integrity check failed (corrupt or truncated file)".into()));
        }
        let mut r = Reader { buf: body, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "format version {version}, this build reads {FORMAT_VERSION}"
            )));
        }
        let digest: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let config_text = r.str()?;
        if config_digest(&config_text) != digest {
            return Err(Error::Checkpoint("stored config does not match its digest".into()));
        }
        let step = r.u64()?;
        let mut store = ParamStore::new();
        for _ in 0..r.u32()? {
            let name = r.str()?;
            if r.u8()? != DTYPE_F64 {
                return Err(Error::Checkpoint(format!("array `{name}` has an unknown dtype")));
            }
            let frozen = r.u8()? != 0;
            store.insert(name, r.array()?, frozen);
        }
        r.tag(b"RNG0")?;
        let seed: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let word_pos = u128::from_le_bytes(r.take(16)?.try_into().expect("16 bytes"));
        let stream = r.u64()?;
        let mut rng = <ChaCha8Rng as rand::SeedableRng>::from_seed(seed);
        rng.set_stream(stream);
        rng.set_word_pos(word_pos);
        r.tag(b"ADAM")?;
        let mut adam = AdamState {
            t: r.u64()?,
            ..Default::default()
        };
        for _ in 0..r.u32()? {
            let name = r.str()?;
            let m = r.array()?;
            let v = r.array()?;
            adam.m.insert(name.clone(), m);
            adam.v.insert(name, v);
        }
        if r.pos != body.len() {
            return Err(Error::Checkpoint("trailing bytes after the optimizer section".into()));
        }
        Ok(Self {
            step,
            store,
            adam,
            rng,
            config_text,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf)
    }

    /// Rejects a checkpoint laid out for a different model, naming the first
    /// differing config field.
    pub fn check_compatible(&self, cfg: &ModelConfig) -> Result<()> {
        let requested = cfg.canonical_text();
        if config_digest(&requested) == config_digest(&self.config_text) {
            return Ok(());
        }
        let stored: Vec<(&str, &str)> = self
            .config_text
            .lines()
            .filter_map(|l| l.split_once(" = "))
            .collect();
        for (key, value) in cfg.entries() {
            match stored.iter().find(|(k, _)| *k == key) {
                Some((_, v)) if *v == value => {}
                Some((_, v)) => {
                    return Err(Error::Digest {
                        field: key.to_string(),
                        stored: v.to_string(),
                        requested: value,
                    })
                }
                None => {
                    return Err(Error::Digest {
                        field: key.to_string(),
                        stored: "<absent>".into(),
                        requested: value,
                    })
                }
            }
        }
        Err(Error::Digest {
            field: "<layout>".into(),
            stored: self.config_text.clone(),
            requested,
        })
    }
}

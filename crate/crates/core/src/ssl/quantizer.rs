//! Frozen random-projection quantizer producing masked-prediction targets.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use numerics::Tensor;

use crate::frontends::StackedFeatures;
use crate::params::{normal_matrix, ParamStore};
use crate::{seed, Error, Result};

pub const PROJECTION: &str = "quantizer.projection";
pub const CODEBOOK: &str = "quantizer.codebook";

#[derive(Debug, Clone)]
pub struct Quantizer {
    pub projection: Tensor,
    pub codebook: Tensor,
    calls: Arc<AtomicU64>,
}

impl PartialEq for Quantizer {
    fn eq(&self, other: &Self) -> bool {
        self.projection == other.projection && self.codebook == other.codebook
    }
}

pub fn init_quantizer(seed_: u64, d_stack: usize, d_code: usize, k: usize) -> Result<Quantizer> {
    if k < 2 || d_code == 0 || d_stack == 0 {
        return Err(Error::usage("quantizer needs K >= 2 and positive dimensions"));
    }
    let mut rng = seed::rng(seed_);
    let projection = normal_matrix(&mut rng, d_stack, d_code, (1.0 / d_code as f64).sqrt());
    let mut codebook = normal_matrix(&mut rng, k, d_code, 1.0);
    for row in codebook.data_mut().chunks_mut(d_code) {
        normalize(row);
    }
    Ok(Quantizer {
        projection,
        codebook,
        calls: Arc::default(),
    })
}

/// Scales to unit norm; the zero vector stays zero.
fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        for x in v {
            *x /= n;
        }
    }
}

impl Quantizer {
    pub fn from_store(store: &ParamStore) -> Result<Self> {
        Ok(Self {
            projection: store.tensor(PROJECTION)?.clone(),
            codebook: store.tensor(CODEBOOK)?.clone(),
            calls: Arc::default(),
        })
    }

    pub fn store_into(&self, store: &mut ParamStore) {
        store.insert(PROJECTION, self.projection.clone(), true);
        store.insert(CODEBOOK, self.codebook.clone(), true);
    }

    pub fn codebook_size(&self) -> usize {
        self.codebook.rows()
    }

    /// Number of `quantize` calls made through this quantizer or its clones.
    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }

    pub fn nearest(&self, v: &[f64]) -> u32 {
        let mut best = (0u32, f64::INFINITY);
        for k in 0..self.codebook.rows() {
            let d: f64 = self
                .codebook
                .row_slice(k)
                .iter()
                .zip(v)
                .map(|(c, x)| (x - c) * (x - c))
                .sum();
            if d < best.1 {
                best = (k as u32, d);
            }
        }
        best.0
    }

    /// One codebook index per stacked frame.
    pub fn quantize(&self, sf: &StackedFeatures) -> Result<Vec<u32>> {
        if sf.dim() != self.projection.rows() {
            return Err(Error::usage(format!(
                "frames have {} values, the projection expects {}",
                sf.dim(),
                self.projection.rows()
            )));
        }
        self.calls.fetch_add(1, Ordering::Relaxed);
        let v = sf.frames.matmul(&self.projection)?;
        Ok((0..v.rows())
            .map(|t| {
                let mut row = v.row_slice(t).to_vec();
                normalize(&mut row);
                self.nearest(&row)
            })
            .collect())
    }
}

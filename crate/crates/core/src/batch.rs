//! Host-side window batches and their tensor views.

use candle_core::Tensor;

use crate::dataset::{window_modality, Dataset, Window};
use crate::error::{Error, Result};
use crate::nn::ParamStore;

/// Per-modality observations for `batch` windows of `time` steps, kept on the
/// host so loss targets can be re-gathered after segmentation.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowBatch {
    pub batch: usize,
    pub time: usize,
    pub dims: Vec<usize>,
    /// Row-major `batch x time x dim` per modality.
    pub raw: Vec<Vec<f32>>,
}

impl WindowBatch {
    pub fn gather(dataset: &Dataset, windows: &[Window]) -> Result<Self> {
        let time = windows
            .first()
            .map(|w| w.length)
            .ok_or_else(|| Error::validation("empty window batch"))?;
        if windows.iter().any(|w| w.length != time) {
            return Err(Error::validation("windows in a batch must share a length"));
        }
        let dims: Vec<usize> = dataset.modalities.iter().map(|m| m.dim).collect();
        let mut raw: Vec<Vec<f32>> = dims
            .iter()
            .map(|d| Vec::with_capacity(windows.len() * time * d))
            .collect();
        for w in windows {
            let demo = &dataset.demos[w.demo_index];
            for (m, buf) in raw.iter_mut().enumerate() {
                buf.extend(window_modality(demo, w, m));
            }
        }
        Ok(Self {
            batch: windows.len(),
            time,
            dims,
            raw,
        })
    }

    pub fn from_raw(raw: Vec<Vec<f32>>, dims: Vec<usize>, batch: usize, time: usize) -> Result<Self> {
        if raw.len() != dims.len() {
            return Err(Error::validation("modality count mismatch"));
        }
        for (r, d) in raw.iter().zip(&dims) {
            if r.len() != batch * time * d {
                return Err(Error::validation("raw modality array has wrong length"));
            }
        }
        Ok(Self {
            batch,
            time,
            dims,
            raw,
        })
    }

    pub fn tensors(&self, ps: &ParamStore) -> Result<Vec<Tensor>> {
        self.raw
            .iter()
            .zip(&self.dims)
            .map(|(r, &d)| ps.tensor(r, &[self.batch, self.time, d]))
            .collect()
    }

    /// Observation rows re-indexed per batch element: position `p` of element
    /// `b` takes the row at 1-indexed window timestep `index[b][p]`.
    pub fn reindex(&self, index: &[Vec<usize>]) -> Result<Self> {
        if index.len() != self.batch || index.iter().any(|r| r.len() != self.time) {
            return Err(Error::validation("index shape does not match batch"));
        }
        let raw = self
            .raw
            .iter()
            .zip(&self.dims)
            .map(|(r, &d)| {
                let mut out = Vec::with_capacity(r.len());
                for (b, row) in index.iter().enumerate() {
                    for &t in row {
                        debug_assert!(t >= 1 && t <= self.time);
                        let start = (b * self.time + t - 1) * d;
                        out.extend_from_slice(&r[start..start + d]);
                    }
                }
                out
            })
            .collect();
        Ok(Self {
            raw,
            ..self.clone()
        })
    }
}

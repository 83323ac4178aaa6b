//! Concept encoder: per-modality frame embeddings, a bidirectional
//! transformer over the window, and projection of every output onto the unit
//! sphere.

use std::path::Path;

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::batch::WindowBatch;
use crate::container;
use crate::dataset::{labeling_window, make_windows, Dataset, ModalitySpec};
use crate::error::{Error, Result};
use crate::nn::{l2_normalize, Init, Mlp, ParamStore, Transformer};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    /// Hidden width of each per-modality embedding MLP.
    pub embed_hidden: usize,
    /// Model width, which is also the concept dimension.
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    pub t_context: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            embed_hidden: 128,
            width: 64,
            depth: 4,
            heads: 4,
            t_context: 20,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.t_context == 0 || self.width == 0 {
            return Err(Error::validation("encoder depth, width and t_context must be positive"));
        }
        if self.heads == 0 || self.width % self.heads != 0 {
            return Err(Error::validation(format!(
                "encoder width {} not divisible by {} heads",
                self.width, self.heads
            )));
        }
        Ok(())
    }
}

/// Sum of one two-layer MLP per modality.
pub struct ModalityEmbedding {
    mlps: Vec<Mlp>,
    dims: Vec<usize>,
}

impl ModalityEmbedding {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        modalities: &[ModalitySpec],
        hidden: usize,
        width: usize,
    ) -> Result<Self> {
        let mlps = modalities
            .iter()
            .map(|m| Mlp::new(ps, &format!("{name}.{}", m.name), &[m.dim, hidden, width]))
            .collect::<Result<_>>()?;
        Ok(Self {
            mlps,
            dims: modalities.iter().map(|m| m.dim).collect(),
        })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn forward(&self, obs: &[Tensor]) -> Result<Tensor> {
        if obs.len() != self.mlps.len() {
            return Err(Error::validation(format!(
                "expected {} modalities, got {}",
                self.mlps.len(),
                obs.len()
            )));
        }
        let mut sum: Option<Tensor> = None;
        for (mlp, (x, &d)) in self.mlps.iter().zip(obs.iter().zip(&self.dims)) {
            if x.dims().last() != Some(&d) {
                return Err(Error::validation(format!(
                    "modality input has shape {:?}, expected last dim {d}",
                    x.dims()
                )));
            }
            let h = mlp.forward(x)?;
            sum = Some(match sum {
                Some(s) => (s + h)?,
                None => h,
            });
        }
        Ok(sum.expect("at least one modality"))
    }
}

/// Unit-norm concept latents for one window, one row per position.
#[derive(Debug, Clone, PartialEq)]
pub struct ConceptSequence {
    pub latents: Vec<Vec<f32>>,
    /// Demonstration and 1-indexed start of the source window, when known.
    pub source: Option<(usize, usize)>,
}

pub struct ConceptEncoder {
    embedding: ModalityEmbedding,
    temporal: Tensor,
    transformer: Transformer,
    cfg: EncoderConfig,
}

impl ConceptEncoder {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        cfg: &EncoderConfig,
        modalities: &[ModalitySpec],
    ) -> Result<Self> {
        cfg.validate()?;
        let embedding =
            ModalityEmbedding::new(ps, &format!("{name}.embed"), modalities, cfg.embed_hidden, cfg.width)?;
        let temporal = ps.add(
            &format!("{name}.temporal"),
            &[cfg.t_context, cfg.width],
            Init::Normal(0.02),
        )?;
        let transformer =
            Transformer::new(ps, &format!("{name}.transformer"), cfg.width, cfg.depth, cfg.heads, false)?;
        Ok(Self {
            embedding,
            temporal,
            transformer,
            cfg: cfg.clone(),
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    /// Summed per-modality embedding of a single frame.
    pub fn embed_frame(&self, ps: &ParamStore, frame: &[&[f32]]) -> Result<Vec<f32>> {
        let dims = self.embedding.dims();
        if frame.len() != dims.len() {
            return Err(Error::validation(format!(
                "frame has {} modalities, expected {}",
                frame.len(),
                dims.len()
            )));
        }
        let xs = frame
            .iter()
            .zip(dims)
            .map(|(v, &d)| {
                if v.len() != d {
                    return Err(Error::validation(format!(
                        "modality vector has dim {}, expected {d}",
                        v.len()
                    )));
                }
                ps.tensor(v, &[1, d])
            })
            .collect::<Result<Vec<_>>>()?;
        let h = self.embedding.forward(&xs)?;
        Ok(h.flatten_all()?.to_dtype(DType::F32)?.to_vec1()?)
    }

    /// `obs[m]`: `(batch, t_context, dim_m)` -> unit-norm latents `(batch, t_context, width)`.
    pub fn forward(&self, obs: &[Tensor]) -> Result<Tensor> {
        let t = obs
            .first()
            .ok_or_else(|| Error::validation("no modalities"))?
            .dim(1)?;
        if t != self.cfg.t_context {
            return Err(Error::validation(format!(
                "window length {t} != t_context {}",
                self.cfg.t_context
            )));
        }
        let h = self.embedding.forward(obs)?.broadcast_add(&self.temporal)?;
        let h = self.transformer.forward(&h)?;
        l2_normalize(&h)
    }

    /// Encodes one window given as per-modality row-major `t_context x dim` arrays.
    pub fn encode(&self, ps: &ParamStore, window: &[Vec<f32>]) -> Result<ConceptSequence> {
        let dims = self.embedding.dims().to_vec();
        let t = self.cfg.t_context;
        let wb = WindowBatch::from_raw(window.to_vec(), dims, 1, t)?;
        let z = self.forward(&wb.tensors(ps)?)?;
        let latents = z.squeeze(0)?.to_dtype(DType::F32)?.to_vec2()?;
        Ok(ConceptSequence {
            latents,
            source: None,
        })
    }
}

/// Concept latents for every timestep of every demonstration.
#[derive(Debug, Clone, PartialEq)]
pub struct ConceptLabels {
    pub dim: usize,
    /// Row-major `len x dim` per demonstration.
    pub per_demo: Vec<Vec<f32>>,
    /// Fingerprint of the checkpoint that produced the labels.
    pub source: String,
}

pub const LABELS_MAGIC: &[u8; 4] = b"MCCL";

#[derive(Serialize, Deserialize)]
struct LabelsHeader {
    dim: usize,
    source: String,
    demos: Vec<LabelEntry>,
}

#[derive(Serialize, Deserialize)]
struct LabelEntry {
    demo_index: usize,
    len: usize,
    offset: usize,
}

impl ConceptLabels {
    pub fn latent(&self, demo: usize, t: usize) -> &[f32] {
        &self.per_demo[demo][(t - 1) * self.dim..t * self.dim]
    }

    pub fn demo_len(&self, demo: usize) -> usize {
        self.per_demo[demo].len() / self.dim
    }

    /// Errors unless every demonstration has one label per timestep.
    pub fn check_aligned(&self, dataset: &Dataset) -> Result<()> {
        if self.per_demo.len() != dataset.demos.len() {
            return Err(Error::validation(format!(
                "{} labeled demos for {} dataset demos",
                self.per_demo.len(),
                dataset.demos.len()
            )));
        }
        for (i, d) in dataset.demos.iter().enumerate() {
            if self.per_demo[i].len() != d.len * self.dim {
                return Err(Error::validation(format!(
                    "demo {i}: {} label values for {} timesteps",
                    self.per_demo[i].len(),
                    d.len
                )));
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut payload = Vec::new();
        let mut demos = Vec::new();
        for (i, d) in self.per_demo.iter().enumerate() {
            demos.push(LabelEntry {
                demo_index: i,
                len: d.len() / self.dim,
                offset: payload.len(),
            });
            payload.extend_from_slice(d);
        }
        let header = LabelsHeader {
            dim: self.dim,
            source: self.source.clone(),
            demos,
        };
        container::encode(LABELS_MAGIC, &header, &payload)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let c = container::decode::<LabelsHeader>(LABELS_MAGIC, bytes)?;
        let h = c.header;
        if h.dim == 0 {
            return Err(Error::validation("label dim is zero"));
        }
        let mut per_demo = Vec::with_capacity(h.demos.len());
        for (i, e) in h.demos.iter().enumerate() {
            if e.demo_index != i {
                return Err(Error::format("label entries out of order"));
            }
            let end = e.offset + e.len * h.dim;
            if end > c.payload.len() {
                return Err(Error::validation(format!("demo {i}: labels out of range")));
            }
            per_demo.push(c.payload[e.offset..end].to_vec());
        }
        Ok(Self {
            dim: h.dim,
            per_demo,
            source: h.source,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        container::write_atomic(path, &self.to_bytes()?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Labels every timestep with the latent from its designated window (see
/// [`labeling_window`]); demonstrations shorter than the context use their
/// tail-padded window.
pub fn label_dataset(
    dataset: &Dataset,
    encoder: &ConceptEncoder,
    ps: &ParamStore,
    source: &str,
) -> Result<ConceptLabels> {
    const CHUNK: usize = 64;
    let t_context = encoder.config().t_context;
    let dim = encoder.config().width;
    let mut per_demo = Vec::with_capacity(dataset.demos.len());
    for (i, demo) in dataset.demos.iter().enumerate() {
        let windows = make_windows(i, demo.len, t_context);
        let mut latents: Vec<f32> = Vec::with_capacity(windows.len() * t_context * dim);
        for chunk in windows.chunks(CHUNK) {
            let wb = WindowBatch::gather(dataset, chunk)?;
            let z = encoder.forward(&wb.tensors(ps)?)?;
            latents.extend(z.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?);
        }
        let mut out = Vec::with_capacity(demo.len * dim);
        for t in 1..=demo.len {
            let (start, offset) = labeling_window(demo.len, t_context, t);
            let w = start - 1;
            let row = (w * t_context + offset) * dim;
            out.extend_from_slice(&latents[row..row + dim]);
        }
        per_demo.push(out);
    }
    Ok(ConceptLabels {
        dim,
        per_demo,
        source: source.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::ReconNorm;
    use crate::nn::ParamStore;

    fn specs() -> Vec<ModalitySpec> {
        vec![
            ModalitySpec::new("a", 3, ReconNorm::L2),
            ModalitySpec::new("b", 2, ReconNorm::L2),
            ModalitySpec::new("c", 1, ReconNorm::L1),
        ]
    }

    fn small_cfg() -> EncoderConfig {
        EncoderConfig {
            embed_hidden: 8,
            width: 8,
            depth: 2,
            heads: 2,
            t_context: 5,
        }
    }

    #[test]
    fn zero_frame_embeds_to_zero() {
        let mut ps = ParamStore::new(DType::F64, 0);
        let enc = ConceptEncoder::new(&mut ps, "enc", &small_cfg(), &specs()).unwrap();
        let h = enc
            .embed_frame(&ps, &[&[0.0; 3], &[0.0; 2], &[0.0; 1]])
            .unwrap();
        assert_eq!(h, vec![0.0; 8]);
    }

    #[test]
    fn frame_dim_mismatch_rejected() {
        let mut ps = ParamStore::new(DType::F64, 0);
        let enc = ConceptEncoder::new(&mut ps, "enc", &small_cfg(), &specs()).unwrap();
        assert!(matches!(
            enc.embed_frame(&ps, &[&[0.0; 2], &[0.0; 2], &[0.0; 1]]),
            Err(Error::Validation(_))
        ));
        assert!(enc.embed_frame(&ps, &[&[0.0; 3], &[0.0; 2]]).is_err());
    }

    #[test]
    fn window_length_checked() {
        let mut ps = ParamStore::new(DType::F64, 0);
        let enc = ConceptEncoder::new(&mut ps, "enc", &small_cfg(), &specs()).unwrap();
        let bad = vec![vec![0.1; 4 * 3], vec![0.1; 4 * 2], vec![0.1; 4]];
        assert!(enc.encode(&ps, &bad).is_err());
    }

    #[test]
    fn invalid_config_rejected() {
        let mut cfg = small_cfg();
        cfg.heads = 3;
        let mut ps = ParamStore::new(DType::F64, 0);
        assert!(ConceptEncoder::new(&mut ps, "enc", &cfg, &specs()).is_err());
    }
}

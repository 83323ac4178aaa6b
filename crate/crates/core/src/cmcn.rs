//! Cross-modal correlation network: hide a random nonempty subset of
//! modalities and reconstruct every modality from what is left plus the
//! concept latent.

use candle_core::{Tensor, D};
use rand::Rng;

use crate::dataset::{ModalitySpec, ReconNorm};
use crate::error::{Error, Result};
use crate::fusion::{FusionNet, FusionShape, PredictorConfig};
use crate::nn::ParamStore;

/// Nonempty set of masked modality indices, stored as a bitset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct MaskPattern {
    bits: u32,
    modalities: usize,
}

impl MaskPattern {
    pub fn new(masked: &[usize], modalities: usize) -> Result<Self> {
        if modalities == 0 || modalities > 31 {
            return Err(Error::validation(format!("unsupported modality count {modalities}")));
        }
        let mut bits = 0u32;
        for &m in masked {
            if m >= modalities {
                return Err(Error::validation(format!("modality {m} out of range")));
            }
            bits |= 1 << m;
        }
        if bits == 0 {
            return Err(Error::validation("mask pattern must hide at least one modality"));
        }
        Ok(Self { bits, modalities })
    }

    pub fn all(modalities: usize) -> Result<Self> {
        Self::new(&(0..modalities).collect::<Vec<_>>(), modalities)
    }

    pub fn is_masked(&self, m: usize) -> bool {
        self.bits & (1 << m) != 0
    }

    pub fn masked(&self) -> Vec<usize> {
        (0..self.modalities).filter(|&m| self.is_masked(m)).collect()
    }

    pub fn num_modalities(&self) -> usize {
        self.modalities
    }

    /// Index in `0..2^M - 1` (bitset minus one).
    pub fn index(&self) -> usize {
        self.bits as usize - 1
    }
}

/// Uniform draw over the `2^M - 1` nonempty subsets, including the all-masked one.
pub fn sample_mask<R: Rng + ?Sized>(modalities: usize, rng: &mut R) -> Result<MaskPattern> {
    if modalities == 0 {
        return Err(Error::validation("cannot mask zero modalities"));
    }
    if modalities > 31 {
        return Err(Error::validation(format!("unsupported modality count {modalities}")));
    }
    let bits = rng.random_range(1..(1u32 << modalities));
    Ok(MaskPattern { bits, modalities })
}

/// Zeroes the masked modality vectors of a frame; the rest are copied unchanged.
pub fn apply_mask(frame: &[Vec<f32>], pattern: &MaskPattern) -> Vec<Vec<f32>> {
    frame
        .iter()
        .enumerate()
        .map(|(m, v)| {
            if pattern.is_masked(m) {
                vec![0.0; v.len()]
            } else {
                v.clone()
            }
        })
        .collect()
}

/// Zeroes masked modalities per batch element. `obs[m]` is `(B, T, dim_m)`.
pub fn mask_batch(obs: &[Tensor], patterns: &[MaskPattern], ps: &ParamStore) -> Result<Vec<Tensor>> {
    let b = obs
        .first()
        .ok_or_else(|| Error::validation("no modalities"))?
        .dim(0)?;
    if patterns.len() != b {
        return Err(Error::validation("one mask pattern per batch element required"));
    }
    obs.iter()
        .enumerate()
        .map(|(m, x)| {
            let keep: Vec<f32> = patterns
                .iter()
                .map(|p| if p.is_masked(m) { 0.0 } else { 1.0 })
                .collect();
            Ok(x.broadcast_mul(&ps.tensor(&keep, &[b, 1, 1])?)?)
        })
        .collect()
}

pub struct Cmcn {
    net: FusionNet,
}

impl Cmcn {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        cfg: &PredictorConfig,
        modalities: &[ModalitySpec],
        concept_dim: usize,
        t_context: usize,
    ) -> Result<Self> {
        let net = FusionNet::new(
            ps,
            name,
            cfg,
            FusionShape {
                modalities,
                concept_dim,
                width: concept_dim,
                t_context,
                causal: false,
                cond_dim: None,
            },
        )?;
        Ok(Self { net })
    }

    /// Per-modality reconstructions `(B, T, dim_m)` from masked inputs and concepts.
    pub fn reconstruct(&self, masked_obs: &[Tensor], concepts: &Tensor) -> Result<Vec<Tensor>> {
        self.net.forward(masked_obs, concepts, None)
    }
}

/// Mean over batch and timesteps of the summed per-modality residual norms:
/// Euclidean for [`ReconNorm::L2`] modalities, absolute sum for [`ReconNorm::L1`].
pub fn cmcn_loss(predictions: &[Tensor], targets: &[Tensor], specs: &[ModalitySpec]) -> Result<Tensor> {
    if predictions.len() != specs.len() || targets.len() != specs.len() {
        return Err(Error::validation("prediction/target/modality counts differ"));
    }
    let mut total: Option<Tensor> = None;
    for ((p, t), spec) in predictions.iter().zip(targets).zip(specs) {
        if p.dims() != t.dims() {
            return Err(Error::validation(format!(
                "{}: prediction shape {:?} != target shape {:?}",
                spec.name,
                p.dims(),
                t.dims()
            )));
        }
        let diff = (p - t)?;
        let per_step = match spec.recon_norm {
            ReconNorm::L2 => diff.sqr()?.sum(D::Minus1)?.sqrt()?,
            ReconNorm::L1 => diff.abs()?.sum(D::Minus1)?,
        };
        let term = per_step.mean_all()?;
        total = Some(match total {
            Some(s) => (s + term)?,
            None => term,
        });
    }
    Ok(total.expect("at least one modality"))
}

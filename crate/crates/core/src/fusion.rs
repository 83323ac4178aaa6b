//! Observation + concept fusion network shared by the cross-modal
//! reconstructor and the multi-horizon goal predictor.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::dataset::ModalitySpec;
use crate::encoder::ModalityEmbedding;
use crate::error::{Error, Result};
use crate::nn::{Init, Mlp, ParamStore, Transformer};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PredictorConfig {
    /// Hidden width of the embedding and decoder MLPs.
    pub hidden: usize,
    pub depth: usize,
    pub heads: usize,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        Self {
            hidden: 128,
            depth: 2,
            heads: 4,
        }
    }
}

/// Summed modality and concept embeddings (plus an optional per-step
/// conditioning embedding), a transformer, and one three-layer decoder per
/// modality.
pub struct FusionNet {
    obs_embed: ModalityEmbedding,
    concept_embed: Mlp,
    cond_embed: Option<Mlp>,
    temporal: Tensor,
    transformer: Transformer,
    decoders: Vec<Mlp>,
}

pub struct FusionShape<'a> {
    pub modalities: &'a [ModalitySpec],
    pub concept_dim: usize,
    pub width: usize,
    pub t_context: usize,
    pub causal: bool,
    /// Width of the per-step conditioning input, if any.
    pub cond_dim: Option<usize>,
}

impl FusionNet {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        cfg: &PredictorConfig,
        shape: FusionShape<'_>,
    ) -> Result<Self> {
        if cfg.depth == 0 || cfg.hidden == 0 {
            return Err(Error::validation(format!("{name}: depth and hidden must be positive")));
        }
        let h = cfg.hidden;
        let w = shape.width;
        let obs_embed =
            ModalityEmbedding::new(ps, &format!("{name}.embed"), shape.modalities, h, w)?;
        let concept_embed = Mlp::new(ps, &format!("{name}.embed.concept"), &[shape.concept_dim, h, w])?;
        let cond_embed = shape
            .cond_dim
            .map(|d| Mlp::new(ps, &format!("{name}.embed.cond"), &[d, h, w]))
            .transpose()?;
        let temporal = ps.add(&format!("{name}.temporal"), &[shape.t_context, w], Init::Normal(0.02))?;
        let transformer =
            Transformer::new(ps, &format!("{name}.transformer"), w, cfg.depth, cfg.heads, shape.causal)?;
        let decoders = shape
            .modalities
            .iter()
            .map(|m| Mlp::new(ps, &format!("{name}.decode.{}", m.name), &[w, h, h, m.dim]))
            .collect::<Result<_>>()?;
        Ok(Self {
            obs_embed,
            concept_embed,
            cond_embed,
            temporal,
            transformer,
            decoders,
        })
    }

    /// `obs[m]`: `(B, T, dim_m)`, `concepts`: `(B, T, concept_dim)`,
    /// `cond`: `(B, T, cond_dim)`. Returns one `(B, T, dim_m)` prediction per modality.
    pub fn forward(&self, obs: &[Tensor], concepts: &Tensor, cond: Option<&Tensor>) -> Result<Vec<Tensor>> {
        let mut h = (self.obs_embed.forward(obs)? + self.concept_embed.forward(concepts)?)?;
        match (&self.cond_embed, cond) {
            (Some(mlp), Some(c)) => h = (h + mlp.forward(c)?)?,
            (None, None) => {}
            _ => return Err(Error::validation("conditioning input does not match network")),
        }
        let h = h.broadcast_add(&self.temporal)?;
        let h = self.transformer.forward(&h)?;
        self.decoders.iter().map(|d| d.forward(&h)).collect()
    }
}

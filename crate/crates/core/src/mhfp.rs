//! Multi-horizon future prediction.
//!
//! Concept latents are cut into sub-processes at a coherence threshold ε:
//! an interval keeps growing while the incoming latent stays strictly within
//! spherical distance ε of every latent already in it. Each timestep is then
//! paired with the terminal observation of its interval, and a causal
//! predictor learns to produce that observation from the current
//! observation, concept and ε.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::dataset::{check_partition, ModalitySpec};
use crate::error::{Error, Result};
use crate::fusion::{FusionNet, FusionShape, PredictorConfig};
use crate::nn::ParamStore;

/// `arccos(<z/|z|, u/|u|>) / π`, in `[0, 1]`.
pub fn spherical_distance(z: &[f32], u: &[f32]) -> Result<f64> {
    if z.len() != u.len() {
        return Err(Error::validation("vectors differ in dimension"));
    }
    let mut dot = 0.0f64;
    let mut nz = 0.0f64;
    let mut nu = 0.0f64;
    for (&a, &b) in z.iter().zip(u) {
        let (a, b) = (a as f64, b as f64);
        dot += a * b;
        nz += a * a;
        nu += b * b;
    }
    if nz == 0.0 || nu == 0.0 {
        return Err(Error::validation("spherical distance of a zero vector"));
    }
    let cos = (dot / (nz.sqrt() * nu.sqrt())).clamp(-1.0, 1.0);
    Ok(cos.acos() / std::f64::consts::PI)
}

/// Contiguous half-open intervals `[start, end)` tiling `[1, len + 1)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segmentation {
    pub intervals: Vec<(usize, usize)>,
    pub epsilon: f64,
    pub len: usize,
}

impl Segmentation {
    pub fn count(&self) -> usize {
        self.intervals.len()
    }

    /// Interval ends, excluding the final `len + 1`.
    pub fn boundaries(&self) -> Vec<usize> {
        self.intervals
            .iter()
            .map(|&(_, e)| e)
            .filter(|&e| e <= self.len)
            .collect()
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        check_partition(self.intervals.iter().copied(), self.len)
    }

    /// Whether this (coarser) segmentation has no more intervals than `finer`
    /// and its k-th boundary is never earlier than the k-th boundary of `finer`.
    pub fn dominates(&self, finer: &Segmentation) -> bool {
        let (a, b) = (self.boundaries(), finer.boundaries());
        a.len() <= b.len() && a.iter().zip(&b).all(|(x, y)| x >= y)
    }

    /// Terminal timestep for every `t` in `1..=len`.
    pub fn terminal_indices(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.len);
        for &(s, e) in &self.intervals {
            for _ in s..e {
                out.push(e.min(self.len));
            }
        }
        out
    }
}

/// Greedy left-to-right sub-process derivation.
///
/// Ties at exactly ε end the interval. ε = 0 therefore yields singletons.
pub fn derive_subprocesses<V: AsRef<[f32]>>(concepts: &[V], epsilon: f64) -> Result<Segmentation> {
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(Error::validation(format!("epsilon {epsilon} outside [0, 1]")));
    }
    let len = concepts.len();
    if len == 0 {
        return Err(Error::validation("cannot segment an empty sequence"));
    }
    if concepts.iter().any(|c| c.as_ref().iter().all(|&v| v == 0.0)) {
        return Err(Error::validation("concept sequence contains a zero vector"));
    }
    let z = |t: usize| concepts[t - 1].as_ref();
    let mut intervals = Vec::new();
    let mut begin = 1;
    while begin <= len {
        let mut end = begin + 1;
        while end <= len {
            let mut coherent = true;
            for u in begin..end {
                if spherical_distance(z(u), z(end))? >= epsilon {
                    coherent = false;
                    break;
                }
            }
            if !coherent {
                break;
            }
            end += 1;
        }
        intervals.push((begin, end));
        begin = end;
    }
    Ok(Segmentation {
        intervals,
        epsilon,
        len,
    })
}

/// End of the interval containing `t`, clamped to the sequence length.
pub fn terminal_index(t: usize, seg: &Segmentation) -> Result<usize> {
    if t < 1 || t > seg.len {
        return Err(Error::validation(format!("timestep {t} outside [1, {}]", seg.len)));
    }
    seg.intervals
        .iter()
        .find(|&&(s, e)| s <= t && t < e)
        .map(|&(_, e)| e.min(seg.len))
        .ok_or_else(|| Error::validation("segmentation does not cover timestep"))
}

/// Causal goal predictor conditioned on a scalar per timestep (ε, or a
/// normalized horizon for the next-n ablation).
pub struct Mhfp {
    net: FusionNet,
}

impl Mhfp {
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
                causal: true,
                cond_dim: Some(1),
            },
        )?;
        Ok(Self { net })
    }

    /// `cond`: `(B, T, 1)`. Position `t` of the output only depends on inputs at positions `<= t`.
    pub fn predict(&self, obs: &[Tensor], concepts: &Tensor, cond: &Tensor) -> Result<Vec<Tensor>> {
        self.net.forward(obs, concepts, Some(cond))
    }

    /// Predictions with one ε per batch element, broadcast over time.
    pub fn predict_goal(
        &self,
        ps: &ParamStore,
        obs: &[Tensor],
        concepts: &Tensor,
        epsilons: &[f64],
    ) -> Result<Vec<Tensor>> {
        for &e in epsilons {
            if !(0.0..=1.0).contains(&e) {
                return Err(Error::validation(format!("epsilon {e} outside [0, 1]")));
            }
        }
        let (b, t, _) = concepts.dims3()?;
        if epsilons.len() != b {
            return Err(Error::validation("one epsilon per batch element required"));
        }
        let cond: Vec<f32> = epsilons
            .iter()
            .flat_map(|&e| std::iter::repeat_n(e as f32, t))
            .collect();
        let cond = ps.tensor(&cond, &[b, t, 1])?;
        self.predict(obs, concepts, &cond)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(deg: f64) -> Vec<f32> {
        let r = deg.to_radians();
        vec![r.cos() as f32, r.sin() as f32]
    }

    #[test]
    fn distance_examples() {
        let z = [0.3f32, -0.2, 0.9];
        assert!(spherical_distance(&z, &z).unwrap().abs() < 1e-6);
        assert!((spherical_distance(&[1.0, 0.0], &[0.0, 1.0]).unwrap() - 0.5).abs() < 1e-12);
        let neg: Vec<f32> = z.iter().map(|v| -v).collect();
        assert!((spherical_distance(&z, &neg).unwrap() - 1.0).abs() < 1e-6);
        let s = std::f32::consts::FRAC_1_SQRT_2;
        assert!((spherical_distance(&[s, s], &[1.0, 0.0]).unwrap() - 0.25).abs() < 1e-6);
        assert!(spherical_distance(&[0.0, 0.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn hand_traced_segmentation() {
        let zs: Vec<Vec<f32>> = [0.0, 10.0, 20.0, 80.0, 85.0].iter().map(|&d| unit(d)).collect();
        let seg = derive_subprocesses(&zs, 0.2).unwrap();
        assert_eq!(seg.intervals, vec![(1, 4), (4, 6)]);
        assert_eq!(terminal_index(2, &seg).unwrap(), 4);
        assert_eq!(terminal_index(5, &seg).unwrap(), 5);
        assert!(terminal_index(6, &seg).is_err());
        assert!(terminal_index(0, &seg).is_err());
        assert_eq!(seg.terminal_indices(), vec![4, 4, 4, 5, 5]);
    }

    #[test]
    fn zero_epsilon_gives_singletons_and_constant_gives_one() {
        let zs: Vec<Vec<f32>> = (0..7).map(|i| unit(i as f64)).collect();
        assert_eq!(derive_subprocesses(&zs, 0.0).unwrap().count(), 7);
        let same = vec![unit(33.0); 9];
        let seg = derive_subprocesses(&same, 0.01).unwrap();
        assert_eq!(seg.intervals, vec![(1, 10)]);
        assert_eq!(derive_subprocesses(&same, 0.0).unwrap().count(), 9);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(derive_subprocesses(&[unit(0.0)], 1.5).is_err());
        assert!(derive_subprocesses(&[vec![0.0f32, 0.0]], 0.5).is_err());
        assert!(derive_subprocesses::<Vec<f32>>(&[], 0.5).is_err());
    }
}

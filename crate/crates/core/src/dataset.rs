//! Demonstrations, the on-disk trajectory format, and windowing rules.
//!
//! Timesteps are 1-indexed everywhere interval math happens: a demonstration
//! of length `T` covers `[1, T + 1)`. The backing arrays are 0-indexed, so
//! timestep `t` lives at row `t - 1`.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::container;
use crate::error::{Error, Result};

pub const DATASET_MAGIC: &[u8; 4] = b"MCDS";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReconNorm {
    /// Euclidean norm of the residual.
    L2,
    /// Sum of absolute residuals.
    L1,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModalitySpec {
    pub name: String,
    pub dim: usize,
    pub recon_norm: ReconNorm,
}

impl ModalitySpec {
    pub fn new(name: impl Into<String>, dim: usize, recon_norm: ReconNorm) -> Self {
        Self {
            name: name.into(),
            dim,
            recon_norm,
        }
    }
}

/// Labeled half-open interval `[start, end)` of 1-indexed timesteps.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub label: String,
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Demonstration {
    pub task_id: String,
    pub len: usize,
    /// One row-major `len x dim` array per modality.
    pub observations: Vec<Vec<f32>>,
    /// Row-major `len x action_dim`.
    pub actions: Vec<f32>,
    pub gt_segments: Option<Vec<Segment>>,
}

impl Demonstration {
    /// Observation of modality `m` at 1-indexed timestep `t`.
    pub fn obs(&self, m: usize, t: usize) -> &[f32] {
        let dim = self.observations[m].len() / self.len;
        &self.observations[m][(t - 1) * dim..t * dim]
    }

    pub fn action(&self, t: usize) -> &[f32] {
        let dim = self.actions.len() / self.len;
        &self.actions[(t - 1) * dim..t * dim]
    }

    /// Ground-truth label at 1-indexed timestep `t`, if segments are present.
    pub fn label_at(&self, t: usize) -> Option<&str> {
        self.gt_segments.as_ref().and_then(|segs| {
            segs.iter()
                .find(|s| s.start <= t && t < s.end)
                .map(|s| s.label.as_str())
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub modalities: Vec<ModalitySpec>,
    pub action_dim: usize,
    pub demos: Vec<Demonstration>,
    pub seed: u64,
}

impl Dataset {
    pub fn num_modalities(&self) -> usize {
        self.modalities.len()
    }

    pub fn total_timesteps(&self) -> usize {
        self.demos.iter().map(|d| d.len).sum()
    }

    pub fn validate(&self) -> Result<()> {
        validate_modalities(&self.modalities)?;
        for (i, d) in self.demos.iter().enumerate() {
            validate_demo(i, d, &self.modalities, self.action_dim)?;
        }
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        container::write_atomic(path, &self.to_bytes()?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let mut payload = Vec::new();
        let mut entries = Vec::with_capacity(self.demos.len());
        for d in &self.demos {
            let offset = payload.len();
            for obs in &d.observations {
                payload.extend_from_slice(obs);
            }
            payload.extend_from_slice(&d.actions);
            entries.push(DemoEntry {
                task_id: d.task_id.clone(),
                len: d.len,
                offset,
                count: payload.len() - offset,
                gt_segments: d.gt_segments.clone(),
            });
        }
        let manifest = Manifest {
            modalities: self.modalities.clone(),
            action_dim: self.action_dim,
            demo_count: self.demos.len(),
            seed: self.seed,
            layout: LAYOUT_NOTE.to_string(),
            demos: entries,
        };
        container::encode(DATASET_MAGIC, &manifest, &payload)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let c = container::decode::<Manifest>(DATASET_MAGIC, bytes)?;
        let m = c.header;
        validate_modalities(&m.modalities)?;
        if m.demo_count != m.demos.len() {
            return Err(Error::validation(format!(
                "manifest declares {} demos but lists {}",
                m.demo_count,
                m.demos.len()
            )));
        }
        let frame_width: usize =
            m.modalities.iter().map(|s| s.dim).sum::<usize>() + m.action_dim;
        let mut demos = Vec::with_capacity(m.demos.len());
        for (i, e) in m.demos.into_iter().enumerate() {
            if e.count != e.len * frame_width {
                return Err(Error::validation(format!(
                    "demo {i}: payload count {} does not match len {} x frame width {}",
                    e.count, e.len, frame_width
                )));
            }
            let end = e
                .offset
                .checked_add(e.count)
                .filter(|&end| end <= c.payload.len())
                .ok_or_else(|| Error::validation(format!("demo {i}: payload out of range")))?;
            let raw = &c.payload[e.offset..end];
            let mut cursor = 0;
            let mut observations = Vec::with_capacity(m.modalities.len());
            for spec in &m.modalities {
                let n = e.len * spec.dim;
                observations.push(raw[cursor..cursor + n].to_vec());
                cursor += n;
            }
            let actions = raw[cursor..].to_vec();
            let demo = Demonstration {
                task_id: e.task_id,
                len: e.len,
                observations,
                actions,
                gt_segments: e.gt_segments,
            };
            validate_demo(i, &demo, &m.modalities, m.action_dim)?;
            demos.push(demo);
        }
        Ok(Dataset {
            modalities: m.modalities,
            action_dim: m.action_dim,
            demos,
            seed: m.seed,
        })
    }
}

const LAYOUT_NOTE: &str = "per demo at `offset` (f32 elements): each modality as a row-major \
len x dim array in manifest order, then actions as len x action_dim; row r holds timestep r + 1";

#[derive(Serialize, Deserialize)]
struct Manifest {
    modalities: Vec<ModalitySpec>,
    action_dim: usize,
    demo_count: usize,
    seed: u64,
    layout: String,
    demos: Vec<DemoEntry>,
}

#[derive(Serialize, Deserialize)]
struct DemoEntry {
    task_id: String,
    len: usize,
    offset: usize,
    count: usize,
    gt_segments: Option<Vec<Segment>>,
}

fn validate_modalities(specs: &[ModalitySpec]) -> Result<()> {
    if specs.is_empty() {
        return Err(Error::validation("dataset declares no modalities"));
    }
    let mut seen = HashSet::new();
    for s in specs {
        if s.dim == 0 {
            return Err(Error::validation(format!("modality {} has dim 0", s.name)));
        }
        if !seen.insert(s.name.as_str()) {
            return Err(Error::validation(format!("duplicate modality name {}", s.name)));
        }
    }
    Ok(())
}

fn validate_demo(
    index: usize,
    d: &Demonstration,
    specs: &[ModalitySpec],
    action_dim: usize,
) -> Result<()> {
    if d.len == 0 {
        return Err(Error::validation(format!("demo {index} is empty")));
    }
    if d.observations.len() != specs.len() {
        return Err(Error::validation(format!(
            "demo {index} has {} modalities, expected {}",
            d.observations.len(),
            specs.len()
        )));
    }
    for (obs, spec) in d.observations.iter().zip(specs) {
        if obs.len() != d.len * spec.dim {
            return Err(Error::validation(format!(
                "demo {index}: modality {} has {} values, expected {}",
                spec.name,
                obs.len(),
                d.len * spec.dim
            )));
        }
    }
    if d.actions.len() != d.len * action_dim {
        return Err(Error::validation(format!(
            "demo {index}: {} action values, expected {}",
            d.actions.len(),
            d.len * action_dim
        )));
    }
    if let Some(segs) = &d.gt_segments {
        check_partition(segs.iter().map(|s| (s.start, s.end)), d.len)
            .map_err(|e| Error::validation(format!("demo {index}: gt_segments {e}")))?;
    }
    Ok(())
}

/// Checks that the intervals are nonempty, contiguous, and tile `[1, len + 1)`.
pub fn check_partition(
    intervals: impl IntoIterator<Item = (usize, usize)>,
    len: usize,
) -> std::result::Result<(), String> {
    let mut expected = 1;
    for (start, end) in intervals {
        if start != expected {
            return Err(format!("interval starts at {start}, expected {expected}"));
        }
        if end <= start {
            return Err(format!("empty interval [{start}, {end})"));
        }
        expected = end;
    }
    if expected != len + 1 {
        return Err(format!("intervals end at {expected}, expected {}", len + 1));
    }
    Ok(())
}

/// A fixed-length slice of a demonstration, tail-padded with its final frame
/// when the demonstration is shorter than the context length.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Window {
    pub demo_index: usize,
    /// 1-indexed first timestep.
    pub start: usize,
    pub length: usize,
    pub padded_tail: usize,
}

impl Window {
    /// Demonstration timestep shown at 0-based position `pos` in the window.
    pub fn timestep_at(&self, pos: usize) -> usize {
        let real = self.length - self.padded_tail;
        self.start + pos.min(real - 1)
    }
}

/// Every valid start position for a demonstration of length `len`.
///
/// Demonstrations shorter than `t_context` yield a single padded window.
pub fn make_windows(demo_index: usize, len: usize, t_context: usize) -> Vec<Window> {
    assert!(t_context >= 1, "t_context must be positive");
    if len < t_context {
        return vec![Window {
            demo_index,
            start: 1,
            length: t_context,
            padded_tail: t_context - len,
        }];
    }
    (1..=len - t_context + 1)
        .map(|start| Window {
            demo_index,
            start,
            length: t_context,
            padded_tail: 0,
        })
        .collect()
}

/// Start of the window designated to produce the concept at timestep `t`,
/// together with `t`'s offset inside it.
///
/// Timesteps `t <= len - t_context` use the window starting at `t`; later
/// timesteps share the last full window so it reaches as far into the future
/// as possible.
pub fn labeling_window(len: usize, t_context: usize, t: usize) -> (usize, usize) {
    assert!(t >= 1 && t <= len, "timestep {t} outside [1, {len}]");
    if len < t_context {
        (1, t - 1)
    } else if t + t_context <= len {
        (t, 0)
    } else {
        let start = len - t_context + 1;
        (start, t - start)
    }
}

/// Gathers one modality of a window into a row-major `length x dim` array.
pub fn window_modality(demo: &Demonstration, window: &Window, m: usize) -> Vec<f32> {
    let dim = demo.observations[m].len() / demo.len;
    let mut out = Vec::with_capacity(window.length * dim);
    for pos in 0..window.length {
        out.extend_from_slice(demo.obs(m, window.timestep_at(pos)));
    }
    out
}

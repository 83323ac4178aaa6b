//! Studies of learned concepts: group similarity, motion grouping,
//! conditional mutual information, cluster diversity, segmentation
//! hierarchies and goal-prediction galleries.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Tensor};
use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::batch::WindowBatch;
use crate::dataset::{make_windows, Dataset, Window};
use crate::encoder::ConceptLabels;
use crate::env::GOAL_COUNT;
use crate::error::{Error, Result};
use crate::kernels;
use crate::mhfp::{derive_subprocesses, terminal_index};
use crate::nn::{scalar, Linear, ParamStore};
use crate::optim::{AdamW, AdamWConfig};
use crate::svg::{color, diverging, Svg};
use crate::trainer::ConceptModel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptGroup {
    pub label: String,
    pub members: Vec<Vec<f32>>,
}

fn unit(v: &[f32]) -> Result<Vec<f64>> {
    let n = v.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    if n == 0.0 {
        return Err(Error::validation("zero concept vector"));
    }
    Ok(v.iter().map(|&x| x as f64 / n).collect())
}

/// Mean cosine similarity over all member pairs of every pair of groups.
/// The diagonal includes each member paired with itself.
pub fn class_similarity(groups: &[ConceptGroup]) -> Result<Vec<Vec<f64>>> {
    if groups.len() < 2 {
        return Err(Error::validation("class similarity needs at least two groups"));
    }
    let dim = groups[0].members.first().map(|m| m.len()).unwrap_or(0);
    let mut means = Vec::with_capacity(groups.len());
    for g in groups {
        if g.members.is_empty() {
            return Err(Error::validation(format!("group {:?} is empty", g.label)));
        }
        let mut acc = vec![0.0f64; dim];
        for m in &g.members {
            if m.len() != dim {
                return Err(Error::validation("group members differ in dimension"));
            }
            for (a, u) in acc.iter_mut().zip(unit(m)?) {
                *a += u;
            }
        }
        let n = g.members.len() as f64;
        means.push(acc.into_iter().map(|a| a / n).collect::<Vec<f64>>());
    }
    let k = groups.len();
    let mut out = vec![vec![0.0; k]; k];
    for i in 0..k {
        for j in i..k {
            let s: f64 = means[i].iter().zip(&means[j]).map(|(a, b)| a * b).sum();
            let s = s.clamp(-1.0, 1.0);
            out[i][j] = s;
            out[j][i] = s;
        }
    }
    Ok(out)
}

/// Fraction of rows whose diagonal entry is at least every other entry.
pub fn diagonal_dominance(matrix: &[Vec<f64>]) -> f64 {
    if matrix.is_empty() {
        return 0.0;
    }
    let hits = matrix
        .iter()
        .enumerate()
        .filter(|(i, row)| row.iter().all(|&v| row[*i] >= v))
        .count();
    hits as f64 / matrix.len() as f64
}

/// Pools concept latents by ground-truth segment label across demonstrations,
/// in label order.
pub fn group_by_segments(dataset: &Dataset, labels: &ConceptLabels) -> Result<Vec<ConceptGroup>> {
    labels.check_aligned(dataset)?;
    let mut pooled: BTreeMap<String, Vec<Vec<f32>>> = BTreeMap::new();
    for (i, demo) in dataset.demos.iter().enumerate() {
        let Some(segs) = &demo.gt_segments else { continue };
        for s in segs {
            let entry = pooled.entry(s.label.clone()).or_default();
            for t in s.start..s.end {
                entry.push(labels.latent(i, t).to_vec());
            }
        }
    }
    if pooled.is_empty() {
        return Err(Error::validation("dataset has no ground-truth segments"));
    }
    Ok(pooled
        .into_iter()
        .map(|(label, members)| ConceptGroup { label, members })
        .collect())
}

/// Fraction of the per-axis maximum below which motion counts as still.
pub const STILL_FRACTION: f64 = 0.2;

/// Direction names per action axis: (axis, negative, positive).
pub const MOTION_AXES: [(&str, &str, &str); 3] = [
    ("left-right", "left", "right"),
    ("backward-forward", "backward", "forward"),
    ("gripper", "close", "open"),
];

/// Groups every timestep's concept by the direction of its action on each
/// axis. A component is still when it is exactly zero or strictly below
/// `STILL_FRACTION` of the largest magnitude seen on that axis; at exactly
/// the threshold it counts as moving. Each axis partitions all timesteps.
pub fn group_by_motion(dataset: &Dataset, labels: &ConceptLabels) -> Result<Vec<ConceptGroup>> {
    labels.check_aligned(dataset)?;
    if dataset.action_dim < MOTION_AXES.len() {
        return Err(Error::validation(format!(
            "motion grouping needs {} action axes, dataset has {}",
            MOTION_AXES.len(),
            dataset.action_dim
        )));
    }
    let mut max = [0.0f64; 3];
    for demo in &dataset.demos {
        for t in 1..=demo.len {
            for (a, m) in demo.action(t).iter().zip(max.iter_mut()) {
                *m = m.max((*a as f64).abs());
            }
        }
    }
    let mut groups: BTreeMap<String, Vec<Vec<f32>>> = BTreeMap::new();
    for (i, demo) in dataset.demos.iter().enumerate() {
        for t in 1..=demo.len {
            let a = demo.action(t);
            for (k, &(axis, neg, pos)) in MOTION_AXES.iter().enumerate() {
                let v = a[k] as f64;
                let dir = if v == 0.0 || v.abs() < STILL_FRACTION * max[k] {
                    "still"
                } else if v > 0.0 {
                    pos
                } else {
                    neg
                };
                groups
                    .entry(format!("{axis}:{dir}"))
                    .or_default()
                    .push(labels.latent(i, t).to_vec());
            }
        }
    }
    Ok(groups
        .into_iter()
        .map(|(label, members)| ConceptGroup { label, members })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MineConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub restarts: usize,
    /// Hidden width as a multiple of the input width.
    pub hidden_ratio: f64,
    /// Lower bound on the hidden width, for low-dimensional variables.
    pub min_hidden: usize,
    /// Independent shuffles averaged in the final bound.
    pub eval_shuffles: usize,
    pub seed: u64,
}

impl Default for MineConfig {
    fn default() -> Self {
        Self {
            iterations: 800,
            batch_size: 512,
            learning_rate: 2e-3,
            restarts: 3,
            hidden_ratio: 1.5,
            min_hidden: 32,
            eval_shuffles: 8,
            seed: 0,
        }
    }
}

/// A set of aligned samples of one variable, row-major `n x dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct Samples {
    pub n: usize,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl Samples {
    pub fn new(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map(|r| r.len()).unwrap_or(0);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::validation("sample rows differ in dimension"));
        }
        Ok(Self {
            n: rows.len(),
            dim,
            data: rows.concat(),
        })
    }

    pub fn from_f32(rows: &[Vec<f32>]) -> Result<Self> {
        Self::new(&rows.iter().map(|r| r.iter().map(|&v| v as f64).collect()).collect::<Vec<_>>())
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    /// Per-column z-scores; constant columns become zero. Returns `None` when
    /// every column is constant.
    fn standardized(&self) -> Option<Self> {
        let n = self.n as f64;
        let mut data = self.data.clone();
        let mut any = false;
        for c in 0..self.dim {
            let mean = (0..self.n).map(|i| self.data[i * self.dim + c]).sum::<f64>() / n;
            let var = (0..self.n)
                .map(|i| (self.data[i * self.dim + c] - mean).powi(2))
                .sum::<f64>()
                / n;
            let sd = var.sqrt();
            let scale = if sd > 1e-12 * (1.0 + mean.abs()) {
                any = true;
                1.0 / sd
            } else {
                0.0
            };
            for i in 0..self.n {
                data[i * self.dim + c] = (data[i * self.dim + c] - mean) * scale;
            }
        }
        any.then_some(Self {
            n: self.n,
            dim: self.dim,
            data,
        })
    }

    fn concat(a: &Self, b: &Self) -> Self {
        let mut data = Vec::with_capacity(a.data.len() + b.data.len());
        for i in 0..a.n {
            data.extend_from_slice(a.row(i));
            data.extend_from_slice(b.row(i));
        }
        Self {
            n: a.n,
            dim: a.dim + b.dim,
            data,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiTerms {
    pub x_y: f64,
    pub xy_z: f64,
    pub x_z: f64,
    pub y_z: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CmiEstimate {
    /// Mean over restarts of `I(X:Y) + I(XY:Z) - I(X:Z) - I(Y:Z)`, in nats.
    pub cmi: f64,
    /// Standard deviation across restarts.
    pub std: f64,
    /// Per-term means over restarts.
    pub terms: MiTerms,
    pub restarts: Vec<f64>,
}

struct Critic {
    l1: Linear,
    l2: Linear,
}

impl Critic {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.l2.forward(&kernels::gelu(&self.l1.forward(x)?)?)
    }
}

fn log_mean_exp(t: &Tensor) -> Result<Tensor> {
    let n = t.elem_count() as f64;
    let m = t.max_all()?.detach();
    Ok((t.broadcast_sub(&m)?.exp()?.sum_all()?.log()? + m)?.affine(1.0, -n.ln())?)
}

/// Donsker-Varadhan lower bound on `I(A:B)` from a two-layer critic.
fn mine_term(a: &Samples, b: &Samples, cfg: &MineConfig, seed: u64) -> Result<f64> {
    let (Some(a), Some(b)) = (a.standardized(), b.standardized()) else {
        warn!("constant variable in mutual information term; reporting 0");
        return Ok(0.0);
    };
    let n = a.n;
    let in_dim = a.dim + b.dim;
    let hidden = (((in_dim as f64) * cfg.hidden_ratio).ceil() as usize).max(cfg.min_hidden);
    let mut ps = ParamStore::new(DType::F32, seed);
    let critic = Critic {
        l1: Linear::new(&mut ps, "mine.l1", in_dim, hidden)?,
        l2: Linear::new(&mut ps, "mine.l2", hidden, 1)?,
    };
    let mut opt = AdamW::new(
        &ps,
        AdamWConfig {
            beta2: 0.999,
            weight_decay: 0.0,
            ..AdamWConfig::default()
        },
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(3);
    let pairs = |ia: &[usize], ib: &[usize]| -> Result<Tensor> {
        let mut buf = Vec::with_capacity(ia.len() * in_dim);
        for (&i, &j) in ia.iter().zip(ib) {
            buf.extend(a.row(i).iter().map(|&v| v as f32));
            buf.extend(b.row(j).iter().map(|&v| v as f32));
        }
        ps.tensor(&buf, &[ia.len(), in_dim])
    };
    let batch = cfg.batch_size.min(n);
    for _ in 0..cfg.iterations {
        let ia: Vec<usize> = (0..batch).map(|_| rng.random_range(0..n)).collect();
        let ib: Vec<usize> = (0..batch).map(|_| rng.random_range(0..n)).collect();
        let joint = critic.forward(&pairs(&ia, &ia)?)?;
        let marg = critic.forward(&pairs(&ia, &ib)?)?;
        let bound = (joint.mean_all()? - log_mean_exp(&marg)?)?;
        let grads = bound.neg()?.backward()?;
        opt.step(&ps, &grads, cfg.learning_rate)?;
    }
    let all: Vec<usize> = (0..n).collect();
    let t_joint = scalar(&critic.forward(&pairs(&all, &all)?)?.mean_all()?)?;
    let mut total = 0.0;
    for _ in 0..cfg.eval_shuffles.max(1) {
        let perm: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
        total += t_joint - scalar(&log_mean_exp(&critic.forward(&pairs(&all, &perm)?)?)?)?;
    }
    Ok(total / cfg.eval_shuffles.max(1) as f64)
}

/// `I(X:Y|Z)` via `I(X:Y) + I(XY:Z) - I(X:Z) - I(Y:Z)`, each term a MINE
/// estimate on the same samples. `XY` is the concatenation of `X` and `Y`.
pub fn estimate_cmi(x: &Samples, y: &Samples, z: &Samples, cfg: &MineConfig) -> Result<CmiEstimate> {
    if x.n != y.n || x.n != z.n {
        return Err(Error::validation("samples are not aligned"));
    }
    if x.n < 1000 {
        return Err(Error::validation(format!("need at least 1000 samples, got {}", x.n)));
    }
    if cfg.restarts == 0 || cfg.iterations == 0 || cfg.batch_size == 0 {
        return Err(Error::validation("restarts, iterations and batch_size must be positive"));
    }
    let xy = Samples::concat(x, y);
    let mut restarts = Vec::with_capacity(cfg.restarts);
    let mut sums = [0.0f64; 4];
    for r in 0..cfg.restarts as u64 {
        let s = cfg.seed.wrapping_mul(0x9e37_79b9).wrapping_add(r * 4);
        let t = [
            mine_term(x, y, cfg, s)?,
            mine_term(&xy, z, cfg, s + 1)?,
            mine_term(x, z, cfg, s + 2)?,
            mine_term(y, z, cfg, s + 3)?,
        ];
        for (acc, v) in sums.iter_mut().zip(t) {
            *acc += v;
        }
        restarts.push(t[0] + t[1] - t[2] - t[3]);
    }
    let k = cfg.restarts as f64;
    let cmi = restarts.iter().sum::<f64>() / k;
    let std = (restarts.iter().map(|v| (v - cmi).powi(2)).sum::<f64>() / k).sqrt();
    Ok(CmiEstimate {
        cmi,
        std,
        terms: MiTerms {
            x_y: sums[0] / k,
            xy_z: sums[1] / k,
            x_z: sums[2] / k,
            y_z: sums[3] / k,
        },
        restarts,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModalityCmi {
    pub x: String,
    pub y: String,
    pub estimate: CmiEstimate,
}

/// `min(n, k)` items at evenly spaced positions, in order.
pub fn evenly_spaced<T: Clone>(items: &[T], k: usize) -> Vec<T> {
    let n = items.len();
    if k >= n {
        return items.to_vec();
    }
    (0..k).map(|i| items[i * n / k].clone()).collect()
}

/// `I(o_a : o_b | z)` for every pair of modalities, over at most `max_samples`
/// evenly spaced timesteps.
pub fn modality_cmi(
    dataset: &Dataset,
    labels: &ConceptLabels,
    cfg: &MineConfig,
    max_samples: usize,
) -> Result<Vec<ModalityCmi>> {
    labels.check_aligned(dataset)?;
    let mut steps = Vec::new();
    for (i, d) in dataset.demos.iter().enumerate() {
        for t in 1..=d.len {
            steps.push((i, t));
        }
    }
    let steps = evenly_spaced(&steps, max_samples);
    let z = Samples::from_f32(&steps.iter().map(|&(i, t)| labels.latent(i, t).to_vec()).collect::<Vec<_>>())?;
    let obs = |m: usize| {
        Samples::from_f32(
            &steps
                .iter()
                .map(|&(i, t)| dataset.demos[i].obs(m, t).to_vec())
                .collect::<Vec<_>>(),
        )
    };
    let mut out = Vec::new();
    let m = dataset.modalities.len();
    for a in 0..m {
        for b in a + 1..m {
            out.push(ModalityCmi {
                x: dataset.modalities[a].name.clone(),
                y: dataset.modalities[b].name.clone(),
                estimate: estimate_cmi(&obs(a)?, &obs(b)?, &z, cfg)?,
            });
        }
    }
    Ok(out)
}

fn euclid(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum::<f64>()
        .sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiversityPoint {
    pub eps: f64,
    pub clusters: usize,
}

/// Density clustering with min-points 1 (so no noise points) at each `eps`.
///
/// With min-points 1 every point is a core point, so clusters are the
/// connected components of the graph joining points at distance `<= eps`.
/// Those are read off a minimum spanning tree: the count at `eps` is one plus
/// the number of tree edges longer than `eps`.
pub fn diversity_sweep(latents: &[Vec<f32>], eps_grid: &[f64]) -> Result<Vec<DiversityPoint>> {
    for &e in eps_grid {
        if !(e > 0.0 && e <= 1.0) {
            return Err(Error::validation(format!("eps {e} outside (0, 1]")));
        }
    }
    let n = latents.len();
    if n == 0 {
        return Ok(eps_grid.iter().map(|&eps| DiversityPoint { eps, clusters: 0 }).collect());
    }
    let units: Vec<Vec<f32>> = latents
        .iter()
        .map(|v| unit(v).map(|u| u.into_iter().map(|x| x as f32).collect()))
        .collect::<Result<_>>()?;
    // Dense Prim.
    let mut in_tree = vec![false; n];
    let mut best = vec![f64::INFINITY; n];
    let mut edges = Vec::with_capacity(n.saturating_sub(1));
    let mut cur = 0;
    in_tree[0] = true;
    for _ in 1..n {
        let mut next = usize::MAX;
        let mut next_d = f64::INFINITY;
        for j in 0..n {
            if in_tree[j] {
                continue;
            }
            let d = euclid(&units[cur], &units[j]);
            if d < best[j] {
                best[j] = d;
            }
            if best[j] < next_d || next == usize::MAX {
                next_d = best[j];
                next = j;
            }
        }
        in_tree[next] = true;
        edges.push(next_d);
        cur = next;
    }
    Ok(eps_grid
        .iter()
        .map(|&eps| DiversityPoint {
            eps,
            clusters: 1 + edges.iter().filter(|&&d| d > eps).count(),
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HierarchyRow {
    pub eps: f64,
    pub segments: usize,
    pub boundaries: Vec<usize>,
    /// Fraction of ground-truth boundaries within two steps of a boundary in this row.
    pub agreement: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoHierarchy {
    pub demo_index: usize,
    pub len: usize,
    pub rows: Vec<HierarchyRow>,
    pub gt_boundaries: Option<Vec<usize>>,
    pub gt_labels: Option<Vec<(String, usize, usize)>>,
    /// Whether every coarser (larger ε) row has no more segments than the row
    /// before it and its k-th boundary is no earlier.
    pub dominance_holds: bool,
    pub best_eps: Option<f64>,
    pub best_agreement: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HierarchyReport {
    pub eps: Vec<f64>,
    pub demos: Vec<DemoHierarchy>,
    pub dominance_holds: bool,
    pub mean_best_agreement: Option<f64>,
}

/// Tolerance, in steps, for matching a ground-truth boundary.
pub const BOUNDARY_TOLERANCE: usize = 2;

pub fn boundary_agreement(gt: &[usize], predicted: &[usize]) -> Option<f64> {
    if gt.is_empty() {
        return None;
    }
    let hit = gt
        .iter()
        .filter(|&&g| predicted.iter().any(|&p| p.abs_diff(g) <= BOUNDARY_TOLERANCE))
        .count();
    Some(hit as f64 / gt.len() as f64)
}

/// Segments each selected demonstration at every ε.
///
/// The best ε for a demo is the one with the highest agreement among rows
/// that do not predict more segments than the ground truth has; this keeps
/// ε = 0, which marks every step a boundary, from winning trivially. When no
/// row qualifies the coarsest row is used.
pub fn hierarchy_report(
    dataset: &Dataset,
    labels: &ConceptLabels,
    demos: &[usize],
    eps_list: &[f64],
) -> Result<HierarchyReport> {
    labels.check_aligned(dataset)?;
    if eps_list.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::validation("eps list must be sorted ascending"));
    }
    let mut out = Vec::new();
    for &i in demos {
        let demo = dataset
            .demos
            .get(i)
            .ok_or_else(|| Error::validation(format!("no demo {i}")))?;
        let seq: Vec<&[f32]> = (1..=demo.len).map(|t| labels.latent(i, t)).collect();
        let gt = demo
            .gt_segments
            .as_ref()
            .map(|s| s.iter().skip(1).map(|s| s.start).collect::<Vec<_>>());
        let mut rows = Vec::new();
        for &eps in eps_list {
            let seg = derive_subprocesses(&seq, eps)?;
            let boundaries = seg.boundaries();
            rows.push(HierarchyRow {
                eps,
                segments: seg.count(),
                agreement: gt.as_ref().and_then(|g| boundary_agreement(g, &boundaries)),
                boundaries,
            });
        }
        // Coarser rows never gain intervals and never move the k-th boundary earlier.
        let dominance_holds = rows.windows(2).all(|w| {
            w[1].segments <= w[0].segments && w[1].boundaries.iter().zip(&w[0].boundaries).all(|(c, f)| c >= f)
        });
        let (best_eps, best_agreement) = match &gt {
            Some(g) if !g.is_empty() => {
                let cap = g.len() + 1;
                let pick = rows
                    .iter()
                    .filter(|r| r.segments <= cap)
                    .max_by(|a, b| a.agreement.partial_cmp(&b.agreement).unwrap())
                    .or_else(|| rows.iter().min_by_key(|r| r.segments));
                (pick.map(|r| r.eps), pick.and_then(|r| r.agreement))
            }
            _ => (None, None),
        };
        out.push(DemoHierarchy {
            demo_index: i,
            len: demo.len,
            rows,
            gt_boundaries: gt,
            gt_labels: demo
                .gt_segments
                .as_ref()
                .map(|s| s.iter().map(|s| (s.label.clone(), s.start, s.end)).collect()),
            dominance_holds,
            best_eps,
            best_agreement,
        });
    }
    let scores: Vec<f64> = out.iter().filter_map(|d| d.best_agreement).collect();
    Ok(HierarchyReport {
        eps: eps_list.to_vec(),
        dominance_holds: out.iter().all(|d| d.dominance_holds),
        mean_best_agreement: (!scores.is_empty()).then(|| scores.iter().sum::<f64>() / scores.len() as f64),
        demos: out,
    })
}

/// Timeline figure: one band per ε, segments alternating in color, with the
/// ground-truth segmentation underneath.
pub fn hierarchy_svg(d: &DemoHierarchy) -> String {
    let (left, band, gap, width) = (70.0, 14.0, 4.0, 600.0);
    let rows = d.rows.len() + usize::from(d.gt_labels.is_some());
    let mut svg = Svg::new(left + width + 20.0, 30.0 + rows as f64 * (band + gap) + 10.0);
    svg.text(4.0, 16.0, 11.0, &format!("demo {} ({} steps)", d.demo_index, d.len));
    let sx = |t: usize| left + width * (t - 1) as f64 / d.len as f64;
    let mut y = 26.0;
    let draw = |svg: &mut Svg, label: &str, spans: &[(usize, usize)], y: f64| {
        svg.text(4.0, y + band - 3.0, 10.0, label);
        for (k, &(s, e)) in spans.iter().enumerate() {
            svg.rect(sx(s), y, sx(e.min(d.len + 1)) - sx(s), band, color(k % 2));
        }
    };
    for r in d.rows.iter().rev() {
        let mut spans = Vec::new();
        let mut start = 1;
        for &b in &r.boundaries {
            spans.push((start, b));
            start = b;
        }
        spans.push((start, d.len + 1));
        draw(&mut svg, &format!("eps {:.2}", r.eps), &spans, y);
        y += band + gap;
    }
    if let Some(gt) = &d.gt_labels {
        svg.text(4.0, y + band - 3.0, 10.0, "truth");
        for (label, s, e) in gt {
            let k = crate::env::Phase::ALL.iter().position(|p| p.label() == label).unwrap_or(0);
            svg.rect(sx(*s), y, sx((*e).min(d.len + 1)) - sx(*s), band, color(k + 2));
        }
    }
    svg.finish()
}

/// Heat map of a similarity matrix with row and column labels.
pub fn similarity_svg(labels: &[String], matrix: &[Vec<f64>]) -> String {
    let cell = 28.0;
    let left = 150.0;
    let top = 20.0;
    let k = matrix.len();
    let mut svg = Svg::new(left + cell * k as f64 + 10.0, top + cell * k as f64 + 10.0);
    for (i, row) in matrix.iter().enumerate() {
        svg.text(4.0, top + cell * (i as f64 + 0.65), 10.0, &labels[i]);
        for (j, &v) in row.iter().enumerate() {
            let (x, y) = (left + cell * j as f64, top + cell * i as f64);
            svg.rect(x, y, cell, cell, &diverging(v));
            svg.text(x + 3.0, y + cell * 0.6, 8.0, &format!("{v:.2}"));
        }
    }
    svg.finish()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GalleryRow {
    pub eps: f64,
    /// 1-indexed demonstration timestep the prediction is made at.
    pub t: usize,
    /// Demonstration timestep of the true sub-goal.
    pub terminal: usize,
    pub predicted: Vec<Vec<f32>>,
    pub truth: Vec<Vec<f32>>,
    /// Euclidean error summed over modalities.
    pub error: f64,
}

/// MHFP goal predictions inside the demo's first window at each ε and each
/// selected window position (1-indexed), next to the observations at the true
/// terminal step. Rows are ordered by ε, then position.
pub fn goal_gallery(
    model: &ConceptModel,
    ps: &ParamStore,
    dataset: &Dataset,
    demo: usize,
    eps_list: &[f64],
    positions: &[usize],
) -> Result<Vec<GalleryRow>> {
    let d = dataset
        .demos
        .get(demo)
        .ok_or_else(|| Error::validation(format!("no demo {demo}")))?;
    let tc = model.t_context();
    if let Some(&p) = positions.iter().find(|&&p| p == 0 || p > tc) {
        return Err(Error::validation(format!("position {p} outside [1, {tc}]")));
    }
    if eps_list.is_empty() {
        return Ok(Vec::new());
    }
    let window: Window = make_windows(demo, d.len, tc)[0];
    let windows = vec![window; eps_list.len()];
    let wb = WindowBatch::gather(dataset, &windows)?;
    let obs = wb.tensors(ps)?;
    let z = model.encoder.forward(&obs)?;
    let latents: Vec<Vec<f32>> = z.get(0)?.to_dtype(DType::F32)?.to_vec2()?;
    let preds = model.mhfp.predict_goal(ps, &obs, &z, eps_list)?;
    let preds: Vec<Vec<Vec<Vec<f32>>>> = preds
        .iter()
        .map(|p| p.to_dtype(DType::F32)?.to_vec3::<f32>().map_err(Error::from))
        .collect::<Result<_>>()?;
    let mut rows = Vec::new();
    for (e, &eps) in eps_list.iter().enumerate() {
        let seg = derive_subprocesses(&latents, eps)?;
        for &p in positions {
            let goal = terminal_index(p, &seg)?;
            let terminal = window.timestep_at(goal - 1);
            let predicted: Vec<Vec<f32>> = preds.iter().map(|m| m[e][p - 1].clone()).collect();
            let truth: Vec<Vec<f32>> = (0..dataset.modalities.len())
                .map(|m| d.obs(m, terminal).to_vec())
                .collect();
            let error = predicted.iter().zip(&truth).map(|(a, b)| euclid(a, b)).sum();
            rows.push(GalleryRow {
                eps,
                t: window.timestep_at(p - 1),
                terminal,
                predicted,
                truth,
                error,
            });
        }
    }
    Ok(rows)
}

/// Schematic arena panels, one per gallery row: objects as circles, goals as
/// squares, gripper as a cross; predicted (dashed outline) over true (filled).
pub fn gallery_svg(rows: &[GalleryRow], objects: usize) -> String {
    let panel = 120.0;
    let cols = rows
        .iter()
        .map(|r| r.t)
        .collect::<std::collections::BTreeSet<_>>()
        .len()
        .max(1);
    let lines = rows.len().div_ceil(cols);
    let mut svg = Svg::new(cols as f64 * (panel + 10.0) + 10.0, lines as f64 * (panel + 24.0) + 10.0);
    for (k, r) in rows.iter().enumerate() {
        let (cx, cy) = (10.0 + (k % cols) as f64 * (panel + 10.0), 20.0 + (k / cols) as f64 * (panel + 24.0));
        svg.outline(cx, cy, panel, panel, "#888");
        svg.text(cx, cy - 4.0, 9.0, &format!("eps {:.2} t {} -> {}", r.eps, r.t, r.terminal));
        let at = |v: &[f32], i: usize| (cx + panel * v[2 * i] as f64, cy + panel * (1.0 - v[2 * i + 1] as f64));
        for (scene, solid) in [(&r.truth[0], true), (&r.predicted[0], false)] {
            if scene.len() < 2 * objects + 2 * GOAL_COUNT + 2 {
                continue;
            }
            for o in 0..objects {
                let (x, y) = at(scene, o);
                if solid {
                    svg.circle(x, y, 4.0, color(o), "none");
                } else {
                    svg.circle(x, y, 6.0, "none", color(o));
                }
            }
            for g in 0..GOAL_COUNT {
                let (x, y) = at(scene, objects + g);
                if solid {
                    svg.outline(x - 6.0, y - 6.0, 12.0, 12.0, "#333");
                }
            }
            let (x, y) = at(scene, objects + GOAL_COUNT);
            let c = if solid { "#000" } else { "#e15759" };
            svg.line(x - 4.0, y - 4.0, x + 4.0, y + 4.0, c, 1.5);
            svg.line(x - 4.0, y + 4.0, x + 4.0, y - 4.0, c, 1.5);
        }
    }
    svg.finish()
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    crate::container::write_atomic(path, &serde_json::to_vec_pretty(value)?)
}

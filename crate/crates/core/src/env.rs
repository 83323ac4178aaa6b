//! Kinematic 2-D pick-and-place environment with a scripted expert.
//!
//! The gripper moves in a square arena, closes on objects within reach and
//! carries them until it opens again. Tasks are ordered lists of
//! (object, goal region) placements; two-stage tasks chain two of them.
//! The expert runs a reach / grasp / transport / place phase machine whose
//! phases become the ground-truth segments of each demonstration.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Demonstration, ModalitySpec, ReconNorm, Segment};
use crate::error::{Error, Result};

pub const ACTION_DIM: usize = 3;
pub const GOAL_COUNT: usize = 2;
/// Gripper opening change per unit of grip command.
pub const GRIP_RATE: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskFamily {
    SinglePlace,
    TwoStage,
    /// Single placements on layouts drawn from a held-out region.
    NovelLayout,
    /// Even mix of single-place and two-stage tasks on training layouts.
    Mixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayoutSplit {
    Train,
    Novel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvSpec {
    pub arena_size: f64,
    pub object_count: usize,
    pub task_family: TaskFamily,
    pub max_episode_len: usize,
    /// Relative standard deviation of gripper displacement.
    pub noise: f64,
    /// Largest gripper displacement per step, as a fraction of the arena.
    pub max_step: f64,
    pub goal_radius: f64,
    pub grasp_radius: f64,
}

impl Default for EnvSpec {
    fn default() -> Self {
        Self {
            arena_size: 1.0,
            object_count: 3,
            task_family: TaskFamily::Mixed,
            max_episode_len: 160,
            noise: 0.05,
            max_step: 0.05,
            goal_radius: 0.06,
            grasp_radius: 0.04,
        }
    }
}

impl EnvSpec {
    pub fn with_family(mut self, family: TaskFamily) -> Self {
        self.task_family = family;
        self
    }

    fn max_placements(&self) -> usize {
        match self.task_family {
            TaskFamily::TwoStage | TaskFamily::Mixed => 2,
            TaskFamily::SinglePlace | TaskFamily::NovelLayout => 1,
        }
    }

    /// Expert step budget for the longest task on a noise-free layout, padded for retries.
    pub fn expert_length_bound(&self) -> usize {
        let diag = (2.0f64).sqrt() / self.max_step;
        let grip_steps = (1.0 / GRIP_RATE).ceil() as usize;
        let per_placement = 2 * diag.ceil() as usize + 2 * grip_steps + 4;
        self.max_placements() * per_placement + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.object_count == 0 {
            return Err(Error::validation("object_count must be at least 1"));
        }
        if self.max_placements() == 2 && self.object_count < 2 {
            return Err(Error::validation("two-stage tasks need at least 2 objects"));
        }
        if !(self.arena_size > 0.0) || !(self.max_step > 0.0) || self.max_step > 0.5 {
            return Err(Error::validation("arena_size and max_step must be positive"));
        }
        if !(self.noise >= 0.0) {
            return Err(Error::validation("noise must be non-negative"));
        }
        if self.goal_radius <= 0.0 || self.grasp_radius <= 0.0 {
            return Err(Error::validation("radii must be positive"));
        }
        if self.max_episode_len < self.expert_length_bound() {
            return Err(Error::validation(format!(
                "max_episode_len {} below expert completion bound {}",
                self.max_episode_len,
                self.expert_length_bound()
            )));
        }
        Ok(())
    }

    pub fn layout_split(&self) -> LayoutSplit {
        match self.task_family {
            TaskFamily::NovelLayout => LayoutSplit::Novel,
            _ => LayoutSplit::Train,
        }
    }

    /// All tasks this spec can sample, in a fixed order.
    pub fn tasks(&self) -> Vec<Task> {
        let k = self.object_count;
        let singles = || {
            (0..k).flat_map(move |o| (0..GOAL_COUNT).map(move |g| Task::new(vec![(o, g)])))
        };
        let pairs = || {
            (0..k).flat_map(move |a| {
                (0..k)
                    .filter(move |&b| b != a)
                    .map(move |b| Task::new(vec![(a, 0), (b, 1)]))
            })
        };
        match self.task_family {
            TaskFamily::SinglePlace | TaskFamily::NovelLayout => singles().collect(),
            TaskFamily::TwoStage => pairs().collect(),
            TaskFamily::Mixed => singles().chain(pairs()).collect(),
        }
    }

    pub fn modalities(&self) -> Vec<ModalitySpec> {
        vec![
            ModalitySpec::new("scene", 2 * self.object_count + 2 * GOAL_COUNT + 2, ReconNorm::L2),
            ModalitySpec::new("hand", 2 * self.object_count + 2 * GOAL_COUNT + 1, ReconNorm::L2),
            ModalitySpec::new("proprio", 3, ReconNorm::L1),
        ]
    }
}

/// Ordered placements: move `object` into goal region `goal`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Task {
    pub placements: Vec<(usize, usize)>,
}

impl Task {
    pub fn new(placements: Vec<(usize, usize)>) -> Self {
        Self { placements }
    }

    pub fn id(&self) -> String {
        let parts: Vec<String> = self
            .placements
            .iter()
            .map(|(o, g)| format!("o{o}->g{g}"))
            .collect();
        let kind = if self.placements.len() > 1 { "two" } else { "place" };
        format!("{kind}:{}", parts.join(","))
    }

    pub fn parse(id: &str) -> Result<Self> {
        let bad = || Error::validation(format!("unparseable task id {id:?}"));
        let (_, body) = id.split_once(':').ok_or_else(bad)?;
        let mut placements = Vec::new();
        for part in body.split(',') {
            let (o, g) = part.split_once("->").ok_or_else(bad)?;
            let o = o.strip_prefix('o').and_then(|s| s.parse().ok()).ok_or_else(bad)?;
            let g = g.strip_prefix('g').and_then(|s| s.parse().ok()).ok_or_else(bad)?;
            placements.push((o, g));
        }
        Ok(Self { placements })
    }

    pub fn is_two_stage(&self) -> bool {
        self.placements.len() > 1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvState {
    pub gripper: [f64; 2],
    /// 1 = fully open, 0 = fully closed.
    pub grip: f64,
    pub objects: Vec<[f64; 2]>,
    pub goals: [[f64; 2]; GOAL_COUNT],
    pub held: Option<usize>,
    pub task: Task,
    pub step: usize,
    rng: ChaCha8Rng,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub state: EnvState,
    pub done: bool,
    pub success: bool,
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Deterministic initial state for `(spec, seed)` with a task drawn from the spec's family.
pub fn reset(spec: &EnvSpec, seed: u64) -> Result<EnvState> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tasks = spec.tasks();
    let draw: u64 = rng.random();
    let task = tasks[(draw % tasks.len() as u64) as usize].clone();
    Ok(layout(spec, task, &mut rng))
}

/// Like [`reset`] but with a caller-chosen task.
pub fn reset_with_task(spec: &EnvSpec, task: &Task, seed: u64) -> Result<EnvState> {
    spec.validate()?;
    for &(o, g) in &task.placements {
        if o >= spec.object_count || g >= GOAL_COUNT {
            return Err(Error::validation(format!("task {} out of range", task.id())));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Burn the task draw so layouts match `reset` for the same seed.
    let _: u64 = rng.random();
    Ok(layout(spec, task.clone(), &mut rng))
}

fn layout(spec: &EnvSpec, task: Task, rng: &mut ChaCha8Rng) -> EnvState {
    let a = spec.arena_size;
    let (obj_x, goal_ys) = match spec.layout_split() {
        LayoutSplit::Train => ((0.1, 0.55), [(0.55, 0.9), (0.1, 0.45)]),
        LayoutSplit::Novel => ((0.15, 0.6), [(0.1, 0.45), (0.55, 0.9)]),
    };
    let mut uniform = |lo: f64, hi: f64| a * (lo + (hi - lo) * rng.random::<f64>());
    let goals = [
        [uniform(0.7, 0.9), uniform(goal_ys[0].0, goal_ys[0].1)],
        [uniform(0.7, 0.9), uniform(goal_ys[1].0, goal_ys[1].1)],
    ];
    let mut objects: Vec<[f64; 2]> = Vec::with_capacity(spec.object_count);
    let min_sep = 3.0 * spec.grasp_radius;
    let mut attempts = 0;
    while objects.len() < spec.object_count {
        let p = [uniform(obj_x.0, obj_x.1), uniform(0.1, 0.9)];
        attempts += 1;
        if attempts > 1000 || objects.iter().all(|q| dist(p, *q) >= min_sep) {
            objects.push(p);
        }
    }
    let gripper = [uniform(0.05, 0.95), uniform(0.05, 0.95)];
    EnvState {
        gripper,
        grip: 1.0,
        objects,
        goals,
        held: None,
        task,
        step: 0,
        rng: rng.clone(),
    }
}

impl EnvState {
    /// All placements satisfied with the gripper fully open.
    pub fn is_success(&self, spec: &EnvSpec) -> bool {
        self.held.is_none()
            && self.grip >= 1.0
            && self
                .task
                .placements
                .iter()
                .all(|&(o, g)| dist(self.objects[o], self.goals[g]) <= spec.goal_radius)
    }

    /// Applies `action = (dx, dy, grip command)`, each clamped to `[-1, 1]`.
    pub fn step(&self, spec: &EnvSpec, action: &[f32]) -> Result<StepOutcome> {
        if action.len() != ACTION_DIM {
            return Err(Error::validation(format!(
                "action has {} components, expected {ACTION_DIM}",
                action.len()
            )));
        }
        if action.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation("action contains NaN or infinity"));
        }
        let mut s = self.clone();
        let a = spec.arena_size;
        let cmd: Vec<f64> = action.iter().map(|&v| (v as f64).clamp(-1.0, 1.0)).collect();
        let mag = (cmd[0] * cmd[0] + cmd[1] * cmd[1]).sqrt();
        for axis in 0..2 {
            let mut delta = cmd[axis] * spec.max_step * a;
            if spec.noise > 0.0 && mag > 0.0 {
                let n: f64 = s.rng.sample(StandardNormal);
                delta += spec.noise * spec.max_step * a * mag * n;
            }
            s.gripper[axis] = (s.gripper[axis] + delta).clamp(0.0, a);
        }
        let was_closed = s.grip <= 0.5;
        s.grip = (s.grip + cmd[2] * GRIP_RATE).clamp(0.0, 1.0);
        let closed = s.grip <= 0.5;
        if closed && !was_closed && s.held.is_none() {
            s.held = s
                .objects
                .iter()
                .enumerate()
                .map(|(i, p)| (i, dist(*p, s.gripper)))
                .filter(|&(_, d)| d <= spec.grasp_radius)
                .min_by(|x, y| x.1.total_cmp(&y.1))
                .map(|(i, _)| i);
        }
        if !closed {
            s.held = None;
        }
        if let Some(i) = s.held {
            s.objects[i] = s.gripper;
        }
        s.step += 1;
        let success = s.is_success(spec);
        let done = success || s.step >= spec.max_episode_len;
        Ok(StepOutcome {
            state: s,
            done,
            success,
        })
    }

    /// Per-modality observation vectors: `[scene, hand, proprio]`.
    ///
    /// * scene: object positions, goal centers and gripper position, scaled to `[0, 1]`.
    /// * hand: object and goal offsets relative to the gripper in `[-1, 1]`, plus a held flag.
    /// * proprio: gripper position in `[0, 1]` and opening.
    pub fn observe(&self, spec: &EnvSpec) -> Vec<Vec<f32>> {
        let a = spec.arena_size;
        let mut scene = Vec::with_capacity(2 * self.objects.len() + 2 * GOAL_COUNT + 2);
        let mut hand = Vec::with_capacity(2 * self.objects.len() + 2 * GOAL_COUNT + 1);
        let points = self.objects.iter().chain(self.goals.iter());
        for p in points {
            scene.push((p[0] / a) as f32);
            scene.push((p[1] / a) as f32);
            hand.push(((p[0] - self.gripper[0]) / a) as f32);
            hand.push(((p[1] - self.gripper[1]) / a) as f32);
        }
        scene.push((self.gripper[0] / a) as f32);
        scene.push((self.gripper[1] / a) as f32);
        hand.push(if self.held.is_some() { 1.0 } else { 0.0 });
        let proprio = vec![
            (self.gripper[0] / a) as f32,
            (self.gripper[1] / a) as f32,
            self.grip as f32,
        ];
        vec![scene, hand, proprio]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Reach,
    Grasp,
    Transport,
    Place,
}

impl Phase {
    pub const ALL: [Phase; 4] = [Phase::Reach, Phase::Grasp, Phase::Transport, Phase::Place];

    pub fn label(self) -> &'static str {
        match self {
            Phase::Reach => "reach",
            Phase::Grasp => "grasp",
            Phase::Transport => "transport",
            Phase::Place => "place",
        }
    }
}

/// Closed-loop scripted expert. Tracks which placement it is working on and
/// which phase of it.
#[derive(Debug, Clone)]
pub struct Expert {
    placement: usize,
    phase: Phase,
}

impl Default for Expert {
    fn default() -> Self {
        Self::new()
    }
}

impl Expert {
    pub fn new() -> Self {
        Self {
            placement: 0,
            phase: Phase::Reach,
        }
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn placement(&self) -> usize {
        self.placement
    }

    fn move_towards(spec: &EnvSpec, from: [f64; 2], to: [f64; 2]) -> [f32; 2] {
        let scale = spec.max_step * spec.arena_size;
        let mut d = [(to[0] - from[0]) / scale, (to[1] - from[1]) / scale];
        let n = (d[0] * d[0] + d[1] * d[1]).sqrt();
        if n > 1.0 {
            d = [d[0] / n, d[1] / n];
        }
        [d[0] as f32, d[1] as f32]
    }

    /// Advances the phase machine against `state` and returns the action plus
    /// the phase it was chosen in.
    pub fn act(&mut self, spec: &EnvSpec, state: &EnvState) -> ([f32; ACTION_DIM], Phase) {
        let placements = &state.task.placements;
        let reach_tol = 0.3 * spec.grasp_radius;
        let goal_tol = 0.3 * spec.goal_radius;
        // Transitions are evaluated until the phase is stable for this state.
        for _ in 0..8 {
            let idx = self.placement.min(placements.len() - 1);
            let (obj, goal) = placements[idx];
            let next = match self.phase {
                Phase::Reach => {
                    (dist(state.gripper, state.objects[obj]) < reach_tol && state.grip >= 1.0)
                        .then_some(Phase::Grasp)
                }
                Phase::Grasp => {
                    if state.held == Some(obj) && state.grip <= 0.0 {
                        Some(Phase::Transport)
                    } else if state.grip <= 0.5 && state.held != Some(obj) {
                        // Missed the grasp; reopen and approach again.
                        Some(Phase::Reach)
                    } else {
                        None
                    }
                }
                Phase::Transport => {
                    if state.held != Some(obj) {
                        Some(Phase::Reach)
                    } else {
                        (dist(state.gripper, state.goals[goal]) < goal_tol).then_some(Phase::Place)
                    }
                }
                Phase::Place => (state.grip >= 1.0 && idx + 1 < placements.len()).then(|| {
                    self.placement = idx + 1;
                    Phase::Reach
                }),
            };
            match next {
                Some(p) if p != self.phase => self.phase = p,
                _ => break,
            }
        }
        let idx = self.placement.min(placements.len() - 1);
        let (obj, goal) = placements[idx];
        let action = match self.phase {
            Phase::Reach => {
                let m = Self::move_towards(spec, state.gripper, state.objects[obj]);
                let open = if state.grip < 1.0 { 1.0 } else { 0.0 };
                // Do not drag anything while reopening.
                if state.grip < 1.0 {
                    [0.0, 0.0, open]
                } else {
                    [m[0], m[1], 0.0]
                }
            }
            Phase::Grasp => [0.0, 0.0, -1.0],
            Phase::Transport => {
                let m = Self::move_towards(spec, state.gripper, state.goals[goal]);
                [m[0], m[1], 0.0]
            }
            Phase::Place => [0.0, 0.0, 1.0],
        };
        (action, self.phase)
    }
}

/// One expert episode: observations, actions and phase labels per timestep.
#[derive(Debug, Clone)]
pub struct Episode {
    pub demo: Demonstration,
    pub success: bool,
    pub states: Vec<EnvState>,
}

/// Rolls out the expert from `reset(spec, seed)`.
///
/// The recorded demonstration ends with the terminal observation paired with
/// a zero action, so the final sub-goal state is part of the trajectory.
pub fn expert_episode(spec: &EnvSpec, seed: u64) -> Result<Episode> {
    let state = reset(spec, seed)?;
    rollout_expert(spec, state)
}

pub fn rollout_expert(spec: &EnvSpec, mut state: EnvState) -> Result<Episode> {
    let mut expert = Expert::new();
    let dims: Vec<usize> = spec.modalities().iter().map(|m| m.dim).collect();
    let mut observations: Vec<Vec<f32>> = dims.iter().map(|_| Vec::new()).collect();
    let mut actions = Vec::new();
    let mut labels: Vec<String> = Vec::new();
    let mut states = Vec::new();
    let mut success = false;
    loop {
        for (buf, o) in observations.iter_mut().zip(state.observe(spec)) {
            buf.extend(o);
        }
        states.push(state.clone());
        if success || state.step >= spec.max_episode_len {
            actions.extend([0.0f32; ACTION_DIM]);
            let last = labels.last().cloned().unwrap_or_else(|| Phase::Reach.label().into());
            labels.push(last);
            break;
        }
        let (action, phase) = expert.act(spec, &state);
        actions.extend(action);
        labels.push(phase.label().to_string());
        let out = state.step(spec, &action)?;
        success = out.success;
        state = out.state;
    }
    let len = labels.len();
    let demo = Demonstration {
        task_id: state.task.id(),
        len,
        observations,
        actions,
        gt_segments: Some(segments_from_labels(&labels)),
    };
    Ok(Episode {
        demo,
        success,
        states,
    })
}

/// Collapses per-timestep labels into maximal runs.
pub fn segments_from_labels(labels: &[String]) -> Vec<Segment> {
    let mut segs: Vec<Segment> = Vec::new();
    for (i, l) in labels.iter().enumerate() {
        let t = i + 1;
        match segs.last_mut() {
            Some(s) if &s.label == l => s.end = t + 1,
            _ => segs.push(Segment {
                label: l.clone(),
                start: t,
                end: t + 1,
            }),
        }
    }
    segs
}

/// Seed of the `i`-th episode of a generation run.
pub fn episode_seed(seed: u64, i: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(i);
    rng.random()
}

#[derive(Debug, Clone)]
pub struct Generated {
    pub dataset: Dataset,
    /// Episode seeds whose expert rollout failed and were skipped.
    pub discarded: Vec<u64>,
}

/// Generates `n` successful expert demonstrations.
pub fn generate_demonstrations(spec: &EnvSpec, n: usize, seed: u64) -> Result<Generated> {
    if n == 0 {
        return Err(Error::validation("demonstration count must be at least 1"));
    }
    spec.validate()?;
    let mut demos = Vec::with_capacity(n);
    let mut discarded = Vec::new();
    let mut i = 0u64;
    while demos.len() < n {
        let s = episode_seed(seed, i);
        i += 1;
        let ep = expert_episode(spec, s)?;
        if ep.success {
            demos.push(ep.demo);
        } else {
            log::warn!("expert failed on episode seed {s}; discarding");
            discarded.push(s);
            if discarded.len() > n {
                return Err(Error::validation("expert fails on most episodes; check env spec"));
            }
        }
    }
    let dataset = Dataset {
        modalities: spec.modalities(),
        action_dim: ACTION_DIM,
        demos,
        seed,
    };
    dataset.validate()?;
    Ok(Generated { dataset, discarded })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reset_is_deterministic() {
        let spec = EnvSpec::default();
        assert_eq!(reset(&spec, 5).unwrap(), reset(&spec, 5).unwrap());
    }

    #[test]
    fn zero_objects_rejected() {
        let spec = EnvSpec {
            object_count: 0,
            ..EnvSpec::default()
        };
        assert!(matches!(reset(&spec, 0), Err(Error::Validation(_))));
    }

    #[test]
    fn adjacent_seeds_differ_in_layout() {
        let spec = EnvSpec::default();
        let differing = (0..100u64)
            .filter(|&s| {
                let a = reset(&spec, s).unwrap();
                let b = reset(&spec, s + 1).unwrap();
                let d: f64 = a
                    .objects
                    .iter()
                    .zip(&b.objects)
                    .map(|(p, q)| dist(*p, *q))
                    .sum();
                d > 0.0
            })
            .count();
        assert!(differing >= 99);
    }

    #[test]
    fn zero_action_only_advances_step() {
        let spec = EnvSpec::default();
        let s = reset(&spec, 3).unwrap();
        let out = s.step(&spec, &[0.0, 0.0, 0.0]).unwrap();
        assert_eq!(out.state.gripper, s.gripper);
        assert_eq!(out.state.grip, s.grip);
        assert_eq!(out.state.objects, s.objects);
        assert_eq!(out.state.step, s.step + 1);
    }

    #[test]
    fn motion_is_clamped_to_arena() {
        let spec = EnvSpec {
            noise: 0.0,
            ..EnvSpec::default()
        };
        let mut s = reset(&spec, 3).unwrap();
        for _ in 0..60 {
            s = s.step(&spec, &[1.0, -1.0, 0.0]).unwrap().state;
        }
        assert_eq!(s.gripper, [spec.arena_size, 0.0]);
    }

    #[test]
    fn nan_action_rejected() {
        let spec = EnvSpec::default();
        let s = reset(&spec, 3).unwrap();
        assert!(matches!(
            s.step(&spec, &[f32::NAN, 0.0, 0.0]),
            Err(Error::Validation(_))
        ));
        assert!(s.step(&spec, &[0.0, 0.0]).is_err());
    }

    #[test]
    fn observation_shapes_and_hand_offset() {
        let spec = EnvSpec::default();
        let mut s = reset(&spec, 9).unwrap();
        let obs = s.observe(&spec);
        let dims: Vec<usize> = spec.modalities().iter().map(|m| m.dim).collect();
        assert_eq!(obs.iter().map(Vec::len).collect::<Vec<_>>(), dims);
        assert_eq!(obs[2].len(), 3);
        s.gripper = s.objects[1];
        let obs = s.observe(&spec);
        assert!(obs[1][2].abs() < 1e-6 && obs[1][3].abs() < 1e-6);
        assert_eq!(s.observe(&spec), obs);
    }

    #[test]
    fn task_ids_round_trip() {
        for t in EnvSpec::default().tasks() {
            assert_eq!(Task::parse(&t.id()).unwrap(), t);
        }
        assert!(Task::parse("nonsense").is_err());
    }

    #[test]
    fn segments_collapse_runs() {
        let labels: Vec<String> = ["a", "a", "b", "a"].iter().map(|s| s.to_string()).collect();
        let segs = segments_from_labels(&labels);
        assert_eq!(segs.len(), 3);
        assert_eq!((segs[0].start, segs[0].end), (1, 3));
        assert_eq!((segs[2].start, segs[2].end), (4, 5));
    }
}

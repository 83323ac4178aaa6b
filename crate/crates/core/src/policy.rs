//! Concept-enhanced behavior cloning.
//!
//! A residual MLP backbone reads a short observation window plus a learned
//! task embedding. The action head reads the final block; the concept head
//! reads block `concept_layer` and predicts the concept latents for the same
//! chunk of timesteps. Training minimizes
//! `|| a_hat - a || + lambda_mc * || z_hat - z ||`, both mean-reduced over
//! batch and chunk steps.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::PathBuf;

use candle_core::{DType, Tensor, D};
use log::info;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{fingerprint, Checkpoint, RngState};
use crate::dataset::Dataset;
use crate::encoder::ConceptLabels;
use crate::env::{episode_seed, reset, EnvSpec, EnvState, Expert, Task, TaskFamily, ACTION_DIM, GOAL_COUNT};
use crate::error::{Error, Result};
use crate::nn::{scalar, Init, LayerNorm, Linear, Mlp, ParamStore};
use crate::optim::{learning_rate, AdamW, AdamWConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyConfig {
    pub depth: usize,
    pub width: usize,
    /// Number of most recent frames fed to the backbone.
    pub obs_window: usize,
    /// Actions (and concepts) predicted per step; only the first action is executed.
    pub chunk: usize,
    /// Width of the learned task embedding.
    pub task_embed_dim: usize,
    /// Backbone block whose output feeds the concept head.
    pub concept_layer: usize,
    pub lambda_mc: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            depth: 3,
            width: 256,
            obs_window: 1,
            chunk: 4,
            task_embed_dim: 32,
            concept_layer: 1,
            lambda_mc: 0.01,
        }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.width == 0 || self.obs_window == 0 || self.chunk == 0 || self.task_embed_dim == 0 {
            return Err(Error::validation(
                "policy depth, width, obs_window, chunk and task_embed_dim must be positive",
            ));
        }
        if self.concept_layer >= self.depth {
            return Err(Error::validation(format!(
                "concept_layer {} must be below depth {}",
                self.concept_layer, self.depth
            )));
        }
        if !(self.lambda_mc >= 0.0) {
            return Err(Error::validation("lambda_mc must be nonnegative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyTrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub warmup: usize,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for PolicyTrainConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            batch_size: 64,
            learning_rate: 1e-3,
            warmup: 100,
            weight_decay: 1e-3,
            seed: 0,
        }
    }
}

impl PolicyTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.batch_size == 0 {
            return Err(Error::validation("iterations and batch_size must be at least 1"));
        }
        if !(self.learning_rate > 0.0) || self.weight_decay < 0.0 {
            return Err(Error::validation("learning rate must be positive and weight decay nonnegative"));
        }
        Ok(())
    }
}

/// Everything needed to rebuild a policy, stored in its checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyRunConfig {
    pub policy: PolicyConfig,
    pub train: PolicyTrainConfig,
    /// Number of objects in the scene, which sizes the task encoding.
    pub objects: usize,
    pub obs_dims: Vec<usize>,
    pub action_dim: usize,
    pub concept_dim: usize,
    /// Fingerprint of the checkpoint that produced the concept labels.
    pub labels_source: String,
}

pub struct PolicyModel {
    pub run: PolicyRunConfig,
    /// `(task_dim, task_embed_dim)`: one row per (stage, object) and (stage, goal).
    task_table: Tensor,
    input: Linear,
    norms: Vec<LayerNorm>,
    blocks: Vec<Mlp>,
    concept_norm: LayerNorm,
    concept_head: Linear,
    action_norm: LayerNorm,
    action_head: Linear,
}

pub struct PolicyOutput {
    /// `(B, chunk, action_dim)`
    pub actions: Tensor,
    /// `(B, chunk, concept_dim)`
    pub concepts: Tensor,
    /// Final backbone features `(B, width)`.
    pub hidden: Tensor,
}

impl PolicyModel {
    pub fn new(ps: &mut ParamStore, run: &PolicyRunConfig) -> Result<Self> {
        let c = &run.policy;
        c.validate()?;
        if run.objects == 0 {
            return Err(Error::validation("policy needs at least one object"));
        }
        let in_dim = c.obs_window * run.obs_dims.iter().sum::<usize>() + c.task_embed_dim;
        let w = c.width;
        let task_table = ps.add("policy.task_embed", &[task_dim(run.objects), c.task_embed_dim], Init::Normal(0.5))?;
        let input = Linear::new(ps, "policy.input", in_dim, w)?;
        let mut norms = Vec::new();
        let mut blocks = Vec::new();
        for i in 0..c.depth {
            norms.push(LayerNorm::new(ps, &format!("policy.block{i}.ln"), w)?);
            blocks.push(Mlp::new(ps, &format!("policy.block{i}.mlp"), &[w, 2 * w, w])?);
        }
        Ok(Self {
            task_table,
            input,
            norms,
            blocks,
            concept_norm: LayerNorm::new(ps, "policy.concept_head.ln", w)?,
            concept_head: Linear::new(ps, "policy.concept_head.out", w, c.chunk * run.concept_dim)?,
            action_norm: LayerNorm::new(ps, "policy.action_head.ln", w)?,
            action_head: Linear::new(ps, "policy.action_head.out", w, c.chunk * run.action_dim)?,
            run: run.clone(),
        })
    }

    pub fn from_checkpoint(ck: &Checkpoint, dtype: DType) -> Result<(Self, ParamStore)> {
        ck.check_kind("policy")?;
        let run: PolicyRunConfig = serde_json::from_value(ck.config.clone())?;
        ck.check_fingerprint(&fingerprint(&run)?)?;
        let mut ps = ParamStore::new(dtype, run.train.seed);
        let model = Self::new(&mut ps, &run)?;
        ps.import(&ck.params)?;
        Ok((model, ps))
    }

    pub fn input_dim(&self) -> usize {
        self.run.policy.obs_window * self.run.obs_dims.iter().sum::<usize>()
    }

    /// `obs`: `(B, obs_window * sum(dims))`, `tasks`: `(B, task_dim)` from [`task_features`].
    pub fn forward(&self, obs: &Tensor, tasks: &Tensor) -> Result<PolicyOutput> {
        let b = obs.dim(0)?;
        if tasks.dims() != [b, task_dim(self.run.objects)] {
            return Err(Error::validation(format!("task features have shape {:?}", tasks.dims())));
        }
        let emb = tasks.matmul(&self.task_table)?;
        let mut h = self.input.forward(&Tensor::cat(&[obs, &emb], D::Minus1)?)?;
        let mut concept_src = None;
        for (i, (ln, mlp)) in self.norms.iter().zip(&self.blocks).enumerate() {
            h = (&h + mlp.forward(&ln.forward(&h)?)?)?;
            if i == self.run.policy.concept_layer {
                concept_src = Some(h.clone());
            }
        }
        let c = &self.run.policy;
        let concepts = self
            .concept_head
            .forward(&self.concept_norm.forward(&concept_src.expect("layer below depth"))?)?
            .reshape((b, c.chunk, self.run.concept_dim))?;
        let actions = self
            .action_head
            .forward(&self.action_norm.forward(&h)?)?
            .reshape((b, c.chunk, self.run.action_dim))?;
        Ok(PolicyOutput {
            actions,
            concepts,
            hidden: h,
        })
    }
}

pub struct PolicyLoss {
    pub total: Tensor,
    pub action: f64,
    pub concept: f64,
}

fn mean_step_norm(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    if pred.dims() != target.dims() {
        return Err(Error::validation(format!(
            "prediction shape {:?} != target shape {:?}",
            pred.dims(),
            target.dims()
        )));
    }
    Ok((pred - target)?.sqr()?.sum(D::Minus1)?.sqrt()?.mean_all()?)
}

/// Action term plus `lambda_mc` times the concept term, each the mean
/// Euclidean error per chunk step.
pub fn policy_loss(
    pred_actions: &Tensor,
    gt_actions: &Tensor,
    pred_concepts: &Tensor,
    gt_concepts: &Tensor,
    lambda_mc: f64,
) -> Result<PolicyLoss> {
    let a = mean_step_norm(pred_actions, gt_actions)?;
    let z = mean_step_norm(pred_concepts, gt_concepts)?;
    let total = (&a + (&z * lambda_mc)?)?;
    Ok(PolicyLoss {
        total,
        action: scalar(&a)?,
        concept: scalar(&z)?,
    })
}

/// Flattened per-timestep training examples.
pub struct PolicySamples {
    pub len: usize,
    pub input_dim: usize,
    pub inputs: Vec<f32>,
    pub tasks: Vec<f32>,
    pub actions: Vec<f32>,
    pub concepts: Vec<f32>,
}

/// Concatenated modalities of frames `t - window + 1 ..= t`, clamped at the first frame.
pub fn stack_frames(frames: &[Vec<Vec<f32>>], window: usize) -> Vec<f32> {
    let t = frames.len();
    let mut out = Vec::new();
    for k in 0..window {
        let idx = (t + k + 1).saturating_sub(window).max(1) - 1;
        for m in &frames[idx] {
            out.extend_from_slice(m);
        }
    }
    out
}

/// Placement stages covered by the task encoding.
pub const TASK_STAGES: usize = 2;

pub fn task_dim(objects: usize) -> usize {
    TASK_STAGES * (objects + GOAL_COUNT)
}

/// One-hot object and goal per placement stage; unused stages are zero. The
/// policy's task embedding is this vector times a learned table, so every
/// task the scene can express has an embedding.
pub fn task_features(task: &Task, objects: usize) -> Result<Vec<f32>> {
    if task.placements.len() > TASK_STAGES {
        return Err(Error::validation(format!("task {} has too many stages", task.id())));
    }
    let mut f = vec![0.0; task_dim(objects)];
    for (s, &(o, g)) in task.placements.iter().enumerate() {
        if o >= objects || g >= GOAL_COUNT {
            return Err(Error::validation(format!("task {} outside a {objects}-object scene", task.id())));
        }
        let base = s * (objects + GOAL_COUNT);
        f[base + o] = 1.0;
        f[base + objects + g] = 1.0;
    }
    Ok(f)
}

/// Object count implied by the scene modality layout.
pub fn objects_in(dataset: &Dataset) -> Result<usize> {
    let scene = dataset
        .modalities
        .first()
        .ok_or_else(|| Error::validation("dataset has no modalities"))?;
    let rest = scene.dim.checked_sub(2 * GOAL_COUNT + 2).filter(|r| r % 2 == 0 && *r > 0);
    rest.map(|r| r / 2)
        .ok_or_else(|| Error::validation(format!("scene modality of size {} has no object layout", scene.dim)))
}

impl PolicySamples {
    pub fn build(dataset: &Dataset, labels: &ConceptLabels, cfg: &PolicyConfig, objects: usize) -> Result<Self> {
        labels.check_aligned(dataset)?;
        let dims: Vec<usize> = dataset.modalities.iter().map(|m| m.dim).collect();
        let input_dim = cfg.obs_window * dims.iter().sum::<usize>();
        let mut s = Self {
            len: 0,
            input_dim,
            inputs: Vec::new(),
            tasks: Vec::new(),
            actions: Vec::new(),
            concepts: Vec::new(),
        };
        for (i, demo) in dataset.demos.iter().enumerate() {
            let task = task_features(&Task::parse(&demo.task_id)?, objects)?;
            let frames: Vec<Vec<Vec<f32>>> = (1..=demo.len)
                .map(|t| (0..dims.len()).map(|m| demo.obs(m, t).to_vec()).collect())
                .collect();
            for t in 1..=demo.len {
                s.inputs.extend(stack_frames(&frames[..t], cfg.obs_window));
                s.tasks.extend_from_slice(&task);
                for k in 0..cfg.chunk {
                    let u = (t + k).min(demo.len);
                    s.actions.extend_from_slice(demo.action(u));
                    s.concepts.extend_from_slice(labels.latent(i, u));
                }
                s.len += 1;
            }
        }
        Ok(s)
    }
}

/// Randomly permutes concept labels across all timesteps of all
/// demonstrations, keeping the per-demo layout. A control for the concept term.
pub fn shuffle_labels(labels: &ConceptLabels, seed: u64) -> ConceptLabels {
    let d = labels.dim;
    let mut rows: Vec<&[f32]> = labels.per_demo.iter().flat_map(|v| v.chunks_exact(d)).collect();
    rows.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut it = rows.into_iter();
    let per_demo = labels
        .per_demo
        .iter()
        .map(|v| (0..v.len() / d).flat_map(|_| it.next().unwrap().to_vec()).collect())
        .collect();
    ConceptLabels {
        dim: d,
        per_demo,
        source: format!("{}:shuffled:{seed}", labels.source),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyMetric {
    pub iteration: usize,
    pub loss: f64,
    pub loss_action: f64,
    pub loss_concept: f64,
    pub lr: f64,
}

pub struct PolicyOutcome {
    pub checkpoint: Checkpoint,
    pub metrics: Vec<PolicyMetric>,
    pub model: PolicyModel,
    pub params: ParamStore,
}

#[derive(Default)]
pub struct PolicyTrainOptions {
    pub out_dir: Option<PathBuf>,
    pub dtype: Option<DType>,
}

pub const POLICY_METRICS_FILE: &str = "policy_metrics.jsonl";
pub const POLICY_CHECKPOINT_FILE: &str = "policy.mcck";

pub fn train_policy(
    dataset: &Dataset,
    labels: &ConceptLabels,
    cfg: &PolicyConfig,
    tcfg: &PolicyTrainConfig,
    opts: PolicyTrainOptions,
) -> Result<PolicyOutcome> {
    cfg.validate()?;
    tcfg.validate()?;
    labels.check_aligned(dataset)?;
    let objects = objects_in(dataset)?;
    let samples = PolicySamples::build(dataset, labels, cfg, objects)?;
    let run = PolicyRunConfig {
        policy: cfg.clone(),
        train: tcfg.clone(),
        objects,
        obs_dims: dataset.modalities.iter().map(|m| m.dim).collect(),
        action_dim: dataset.action_dim,
        concept_dim: labels.dim,
        labels_source: labels.source.clone(),
    };
    let dtype = opts.dtype.unwrap_or(DType::F32);
    let mut ps = ParamStore::new(dtype, tcfg.seed);
    let model = PolicyModel::new(&mut ps, &run)?;
    let mut opt = AdamW::new(
        &ps,
        AdamWConfig {
            weight_decay: tcfg.weight_decay,
            ..AdamWConfig::default()
        },
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
    rng.set_stream(2);

    let mut log = match &opts.out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            Some(std::io::BufWriter::new(std::fs::File::create(dir.join(POLICY_METRICS_FILE))?))
        }
        None => None,
    };
    let (chunk, a_dim, z_dim, k_dim) = (cfg.chunk, run.action_dim, run.concept_dim, task_dim(objects));
    let mut metrics = Vec::with_capacity(tcfg.iterations);
    for it in 0..tcfg.iterations {
        let idx: Vec<usize> = (0..tcfg.batch_size).map(|_| rng.random_range(0..samples.len)).collect();
        let gather = |src: &[f32], w: usize| -> Vec<f32> {
            idx.iter().flat_map(|&i| src[i * w..(i + 1) * w].iter().copied()).collect()
        };
        let b = idx.len();
        let obs = ps.tensor(&gather(&samples.inputs, samples.input_dim), &[b, samples.input_dim])?;
        let gt_a = ps.tensor(&gather(&samples.actions, chunk * a_dim), &[b, chunk, a_dim])?;
        let gt_z = ps.tensor(&gather(&samples.concepts, chunk * z_dim), &[b, chunk, z_dim])?;
        let tasks = ps.tensor(&gather(&samples.tasks, k_dim), &[b, k_dim])?;
        let out = model.forward(&obs, &tasks)?;
        let loss = policy_loss(&out.actions, &gt_a, &out.concepts, &gt_z, cfg.lambda_mc)?;
        let total = scalar(&loss.total)?;
        if !total.is_finite() {
            return Err(Error::numeric(format!("policy iteration {it}"), format!("loss is {total}")));
        }
        let lr = learning_rate(it, tcfg.iterations, tcfg.warmup, tcfg.learning_rate);
        opt.step(&ps, &loss.total.backward()?, lr)?;
        let m = PolicyMetric {
            iteration: it,
            loss: total,
            loss_action: loss.action,
            loss_concept: loss.concept,
            lr,
        };
        if let Some(f) = log.as_mut() {
            writeln!(f, "{}", serde_json::to_string(&m)?)?;
        }
        if it % 500 == 0 {
            info!("policy iteration {it}: action {:.4} concept {:.4}", m.loss_action, m.loss_concept);
        }
        metrics.push(m);
    }
    if let Some(f) = log.as_mut() {
        f.flush()?;
    }
    let checkpoint = Checkpoint {
        kind: "policy".into(),
        fingerprint: fingerprint(&run)?,
        iteration: tcfg.iterations,
        config: serde_json::to_value(&run)?,
        rng: Some(RngState::capture(&rng)),
        params: ps.export()?,
        moments: Some(opt.export()?),
    };
    if let Some(dir) = &opts.out_dir {
        checkpoint.write(&dir.join(POLICY_CHECKPOINT_FILE))?;
    }
    Ok(PolicyOutcome {
        checkpoint,
        metrics,
        model,
        params: ps,
    })
}

/// Evaluation splits: single placements on training layouts, single
/// placements on held-out layouts, and two-stage tasks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalSplit {
    TrainLayout,
    NovelLayout,
    TwoStage,
}

impl EvalSplit {
    pub const ALL: [EvalSplit; 3] = [EvalSplit::TrainLayout, EvalSplit::NovelLayout, EvalSplit::TwoStage];

    pub fn name(self) -> &'static str {
        match self {
            EvalSplit::TrainLayout => "train-layout",
            EvalSplit::NovelLayout => "novel-layout",
            EvalSplit::TwoStage => "two-stage",
        }
    }

    pub fn spec(self, base: &EnvSpec) -> EnvSpec {
        base.clone().with_family(match self {
            EvalSplit::TrainLayout => TaskFamily::SinglePlace,
            EvalSplit::NovelLayout => TaskFamily::NovelLayout,
            EvalSplit::TwoStage => TaskFamily::TwoStage,
        })
    }
}

/// Something that acts in a batch of parallel episodes.
pub trait Controller {
    /// Starts `states.len()` fresh episodes.
    fn begin(&mut self, spec: &EnvSpec, states: &[EnvState]) -> Result<()>;
    /// One action per episode. `histories[i]` holds every observation of
    /// episode `i` so far, latest last.
    fn act(&mut self, spec: &EnvSpec, states: &[EnvState], histories: &[Vec<Vec<Vec<f32>>>]) -> Result<Vec<[f32; ACTION_DIM]>>;
}

pub struct LearnedController<'a> {
    pub model: &'a PolicyModel,
    pub params: &'a ParamStore,
    tasks: Vec<f32>,
}

impl<'a> LearnedController<'a> {
    pub fn new(model: &'a PolicyModel, params: &'a ParamStore) -> Self {
        Self {
            model,
            params,
            tasks: Vec::new(),
        }
    }
}

impl Controller for LearnedController<'_> {
    fn begin(&mut self, _spec: &EnvSpec, states: &[EnvState]) -> Result<()> {
        self.tasks.clear();
        for s in states {
            self.tasks.extend(task_features(&s.task, self.model.run.objects)?);
        }
        Ok(())
    }

    fn act(&mut self, _spec: &EnvSpec, _states: &[EnvState], histories: &[Vec<Vec<Vec<f32>>>]) -> Result<Vec<[f32; ACTION_DIM]>> {
        let w = self.model.run.policy.obs_window;
        let dim = self.model.input_dim();
        let inputs: Vec<f32> = histories.iter().flat_map(|h| stack_frames(h, w)).collect();
        let obs = self.params.tensor(&inputs, &[histories.len(), dim])?;
        let tasks = self.params.tensor(&self.tasks, &[histories.len(), task_dim(self.model.run.objects)])?;
        let out = self.model.forward(&obs, &tasks)?;
        let first = out.actions.narrow(1, 0, 1)?.squeeze(1)?.to_dtype(DType::F32)?.to_vec2::<f32>()?;
        first
            .into_iter()
            .map(|a| {
                a.try_into()
                    .map_err(|_| Error::validation("policy action dimension does not match environment"))
            })
            .collect()
    }
}

/// The scripted expert, one phase machine per episode.
#[derive(Default)]
pub struct ExpertController {
    experts: Vec<Expert>,
}

impl Controller for ExpertController {
    fn begin(&mut self, _spec: &EnvSpec, states: &[EnvState]) -> Result<()> {
        self.experts = states.iter().map(|_| Expert::new()).collect();
        Ok(())
    }

    fn act(&mut self, spec: &EnvSpec, states: &[EnvState], _h: &[Vec<Vec<Vec<f32>>>]) -> Result<Vec<[f32; ACTION_DIM]>> {
        Ok(self
            .experts
            .iter_mut()
            .zip(states)
            .map(|(e, s)| e.act(spec, s).0)
            .collect())
    }
}

/// Uniform actions in `[-1, 1]`.
pub struct RandomController {
    rng: ChaCha8Rng,
}

impl RandomController {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

impl Controller for RandomController {
    fn begin(&mut self, _spec: &EnvSpec, _states: &[EnvState]) -> Result<()> {
        Ok(())
    }

    fn act(&mut self, _spec: &EnvSpec, states: &[EnvState], _h: &[Vec<Vec<Vec<f32>>>]) -> Result<Vec<[f32; ACTION_DIM]>> {
        Ok(states
            .iter()
            .map(|_| std::array::from_fn(|_| self.rng.random_range(-1.0f32..=1.0)))
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub seed: u64,
    pub task: String,
    pub success: bool,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitResult {
    pub split: EvalSplit,
    pub success_rate: f64,
    /// Binomial standard error of the success rate.
    pub stderr: f64,
    pub episodes: Vec<EpisodeLog>,
}

/// Runs `n_episodes` lockstep episodes of one split. Episode `i` starts from
/// `reset(split spec, episode_seed(seed, i))`.
pub fn evaluate_split(
    controller: &mut dyn Controller,
    base: &EnvSpec,
    split: EvalSplit,
    n_episodes: usize,
    seed: u64,
) -> Result<SplitResult> {
    if n_episodes == 0 {
        return Err(Error::validation("n_episodes must be at least 1"));
    }
    let spec = split.spec(base);
    let seeds: Vec<u64> = (0..n_episodes as u64).map(|i| episode_seed(seed, i)).collect();
    let mut states: Vec<EnvState> = seeds.iter().map(|&s| reset(&spec, s)).collect::<Result<_>>()?;
    let mut histories: Vec<Vec<Vec<Vec<f32>>>> = states.iter().map(|s| vec![s.observe(&spec)]).collect();
    let mut done = vec![false; n_episodes];
    let mut success = vec![false; n_episodes];
    let mut steps = vec![0usize; n_episodes];
    controller.begin(&spec, &states)?;
    for _ in 0..spec.max_episode_len {
        if done.iter().all(|&d| d) {
            break;
        }
        let actions = controller.act(&spec, &states, &histories)?;
        for i in 0..n_episodes {
            if done[i] {
                continue;
            }
            let out = states[i].step(&spec, &actions[i])?;
            states[i] = out.state;
            histories[i].push(states[i].observe(&spec));
            steps[i] += 1;
            if out.success || out.done {
                done[i] = true;
                success[i] = out.success;
            }
        }
    }
    let episodes: Vec<EpisodeLog> = (0..n_episodes)
        .map(|i| EpisodeLog {
            seed: seeds[i],
            task: states[i].task.id(),
            success: success[i],
            steps: steps[i],
        })
        .collect();
    let p = success.iter().filter(|&&s| s).count() as f64 / n_episodes as f64;
    Ok(SplitResult {
        split,
        success_rate: p,
        stderr: (p * (1.0 - p) / n_episodes as f64).sqrt(),
        episodes,
    })
}

/// Every split in [`EvalSplit::ALL`] order.
pub fn evaluate_policy(
    controller: &mut dyn Controller,
    base: &EnvSpec,
    n_episodes: usize,
    seed: u64,
) -> Result<Vec<SplitResult>> {
    EvalSplit::ALL
        .iter()
        .map(|&s| evaluate_split(controller, base, s, n_episodes, seed))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    #[serde(rename = "L")]
    pub layer: usize,
    pub lambda_mc: f64,
    pub split: String,
    pub success_rate: f64,
    /// Standard error across seeds, or the binomial error for a single seed.
    pub stderr: f64,
    pub seeds: usize,
}

pub struct SweepSpec<'a> {
    pub layers: &'a [usize],
    pub lambdas: &'a [f64],
    pub seeds: &'a [u64],
    pub n_episodes: usize,
    pub eval_seed: u64,
}

/// Trains and evaluates one policy per (layer, lambda, seed) and aggregates
/// success rates per split.
pub fn sweep_policy(
    dataset: &Dataset,
    labels: &ConceptLabels,
    base: &PolicyConfig,
    tcfg: &PolicyTrainConfig,
    env: &EnvSpec,
    sweep: &SweepSpec<'_>,
) -> Result<Vec<SweepRow>> {
    if sweep.seeds.is_empty() {
        return Err(Error::validation("sweep needs at least one seed"));
    }
    let mut rows = Vec::new();
    for &layer in sweep.layers {
        for &lambda in sweep.lambdas {
            let cfg = PolicyConfig {
                concept_layer: layer,
                lambda_mc: lambda,
                ..base.clone()
            };
            let mut per_split: BTreeMap<EvalSplit, Vec<SplitResult>> = BTreeMap::new();
            for &seed in sweep.seeds {
                let t = PolicyTrainConfig {
                    seed,
                    ..tcfg.clone()
                };
                let out = train_policy(dataset, labels, &cfg, &t, PolicyTrainOptions::default())?;
                let mut ctl = LearnedController::new(&out.model, &out.params);
                for r in evaluate_policy(&mut ctl, env, sweep.n_episodes, sweep.eval_seed)? {
                    per_split.entry(r.split).or_default().push(r);
                }
            }
            for (split, results) in per_split {
                let rates: Vec<f64> = results.iter().map(|r| r.success_rate).collect();
                let n = rates.len() as f64;
                let mean = rates.iter().sum::<f64>() / n;
                let stderr = if rates.len() > 1 {
                    let var = rates.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1.0);
                    (var / n).sqrt()
                } else {
                    results[0].stderr
                };
                rows.push(SweepRow {
                    layer,
                    lambda_mc: lambda,
                    split: split.name().to_string(),
                    success_rate: mean,
                    stderr,
                    seeds: rates.len(),
                });
            }
        }
    }
    Ok(rows)
}

pub fn write_sweep_csv<W: std::io::Write>(rows: &[SweepRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    #[test]
    fn frame_stacking_pads_with_first_frame() {
        let f = |v: f32| vec![vec![v, v], vec![v]];
        let frames = vec![f(1.0), f(2.0), f(3.0)];
        assert_eq!(stack_frames(&frames[..1], 2), vec![1.0, 1.0, 1.0, 1.0, 1.0, 1.0]);
        assert_eq!(stack_frames(&frames, 2), vec![2.0, 2.0, 2.0, 3.0, 3.0, 3.0]);
    }

    #[test]
    fn task_encoding() {
        let f = task_features(&Task::new(vec![(1, 0), (2, 1)]), 3).unwrap();
        assert_eq!(f, vec![0., 1., 0., 1., 0., 0., 0., 1., 0., 1.]);
        assert!(task_features(&Task::new(vec![(3, 0)]), 3).is_err());
    }

    #[test]
    fn config_checks_layer() {
        let mut c = PolicyConfig::default();
        c.concept_layer = 3;
        assert!(c.validate().is_err());
        c.concept_layer = 2;
        assert!(c.validate().is_ok());
        c.lambda_mc = -0.1;
        assert!(c.validate().is_err());
    }

    #[test]
    fn loss_decomposes() {
        let t = |v: &[f64], s: (usize, usize, usize)| Tensor::from_slice(v, s, &Device::Cpu).unwrap();
        let pa = t(&[3.0, 4.0], (1, 1, 2));
        let ga = t(&[0.0, 0.0], (1, 1, 2));
        let pz = t(&[1.0, 0.0, 0.0], (1, 1, 3));
        let gz = t(&[0.0, 0.0, 0.0], (1, 1, 3));
        let l = policy_loss(&pa, &ga, &pz, &gz, 0.5).unwrap();
        assert_eq!(l.action, 5.0);
        assert_eq!(l.concept, 1.0);
        assert_eq!(scalar(&l.total).unwrap(), 5.5);
        let l0 = policy_loss(&pa, &ga, &pz, &gz, 0.0).unwrap();
        assert_eq!(scalar(&l0.total).unwrap(), l0.action);
    }
}

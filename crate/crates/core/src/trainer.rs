//! Joint training of the concept encoder, the cross-modal reconstructor and
//! the goal predictor, plus the ablation objectives.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor};
use log::{info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::batch::WindowBatch;
use crate::checkpoint::{fingerprint, Checkpoint, RngState};
use crate::cmcn::{cmcn_loss, mask_batch, sample_mask, Cmcn, MaskPattern};
use crate::dataset::{make_windows, Dataset, ModalitySpec, Window};
use crate::encoder::{ConceptEncoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::fusion::PredictorConfig;
use crate::mhfp::{derive_subprocesses, Mhfp};
use crate::nn::{scalar, ParamStore};
use crate::optim::{learning_rate, AdamW, AdamWConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationMode {
    #[default]
    Full,
    /// Every modality is masked on every pass.
    AllMask,
    /// The goal is always the next timestep.
    Next,
    /// The goal is `n` steps ahead, `n` uniform over the remaining horizon.
    NextN,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lambda_mm: f64,
    pub lambda_mh: f64,
    pub ablation: AblationMode,
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub warmup: usize,
    pub weight_decay: f64,
    pub seed: u64,
    /// Checkpoint every this many iterations; 0 writes only the final one.
    pub checkpoint_interval: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda_mm: 1.0,
            lambda_mh: 1.0,
            ablation: AblationMode::Full,
            iterations: 2000,
            batch_size: 32,
            learning_rate: 1e-3,
            warmup: 100,
            weight_decay: 1e-3,
            seed: 0,
            checkpoint_interval: 500,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.batch_size == 0 {
            return Err(Error::validation("iterations and batch_size must be at least 1"));
        }
        if self.ablation == AblationMode::Full && (self.lambda_mm <= 0.0 || self.lambda_mh <= 0.0) {
            return Err(Error::validation("loss weights must be positive in full mode"));
        }
        if self.lambda_mm < 0.0 || self.lambda_mh < 0.0 {
            return Err(Error::validation("loss weights must be nonnegative"));
        }
        if !(self.learning_rate > 0.0) || self.weight_decay < 0.0 {
            return Err(Error::validation("learning rate must be positive and weight decay nonnegative"));
        }
        Ok(())
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub cmcn: PredictorConfig,
    pub mhfp: PredictorConfig,
}

/// Encoder, reconstructor and goal predictor sharing one parameter store
/// under the `encoder.`, `cmcn.` and `mhfp.` prefixes.
pub struct ConceptModel {
    pub encoder: ConceptEncoder,
    pub cmcn: Cmcn,
    pub mhfp: Mhfp,
    pub modalities: Vec<ModalitySpec>,
    pub cfg: ModelConfig,
}

/// Everything stored in a concept checkpoint's config field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptRunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub modalities: Vec<ModalitySpec>,
}

impl ConceptRunConfig {
    pub fn fingerprint(&self) -> Result<String> {
        fingerprint(self)
    }
}

impl ConceptModel {
    pub fn new(ps: &mut ParamStore, cfg: &ModelConfig, modalities: &[ModalitySpec]) -> Result<Self> {
        let d = cfg.encoder.width;
        let t = cfg.encoder.t_context;
        Ok(Self {
            encoder: ConceptEncoder::new(ps, "encoder", &cfg.encoder, modalities)?,
            cmcn: Cmcn::new(ps, "cmcn", &cfg.cmcn, modalities, d, t)?,
            mhfp: Mhfp::new(ps, "mhfp", &cfg.mhfp, modalities, d, t)?,
            modalities: modalities.to_vec(),
            cfg: cfg.clone(),
        })
    }

    /// Rebuilds a model from a concept checkpoint.
    pub fn from_checkpoint(ck: &Checkpoint, dtype: DType) -> Result<(Self, ParamStore, ConceptRunConfig)> {
        ck.check_kind("concepts")?;
        let run: ConceptRunConfig = serde_json::from_value(ck.config.clone())?;
        ck.check_fingerprint(&run.fingerprint()?)?;
        let mut ps = ParamStore::new(dtype, run.train.seed);
        let model = Self::new(&mut ps, &run.model, &run.modalities)?;
        ps.import(&ck.params)?;
        Ok((model, ps, run))
    }

    pub fn t_context(&self) -> usize {
        self.cfg.encoder.t_context
    }
}

/// Random choices for one batch: a mask pattern and ε per window, and for
/// the next-n ablation a horizon per position.
#[derive(Debug, Clone, PartialEq)]
pub struct Draws {
    pub masks: Vec<MaskPattern>,
    pub epsilons: Vec<f64>,
    pub horizons: Vec<Vec<usize>>,
}

pub fn sample_draws<R: Rng + ?Sized>(
    mode: AblationMode,
    batch: usize,
    time: usize,
    modalities: usize,
    rng: &mut R,
) -> Result<Draws> {
    let mut masks = Vec::with_capacity(batch);
    let mut epsilons = Vec::with_capacity(batch);
    let mut horizons = Vec::new();
    for _ in 0..batch {
        masks.push(match mode {
            AblationMode::AllMask => MaskPattern::all(modalities)?,
            _ => sample_mask(modalities, rng)?,
        });
        epsilons.push(rng.random::<f64>());
        if mode == AblationMode::NextN {
            horizons.push(
                (1..=time)
                    .map(|t| if t == time { 0 } else { rng.random_range(1..=time - t) })
                    .collect(),
            );
        }
    }
    Ok(Draws {
        masks,
        epsilons,
        horizons,
    })
}

/// Per-window goal indices: the terminal timestep of each position's sub-process.
pub fn goal_indices(latents: &[Vec<Vec<f32>>], epsilons: &[f64]) -> Result<Vec<Vec<usize>>> {
    latents
        .iter()
        .zip(epsilons)
        .map(|(z, &e)| Ok(derive_subprocesses(z, e)?.terminal_indices()))
        .collect()
}

pub struct LossTerms {
    /// `lambda_mm * mm + lambda_mh * mh`, differentiable.
    pub total: Tensor,
    /// Unweighted reconstruction term.
    pub mm: f64,
    /// Unweighted goal-prediction term.
    pub mh: f64,
}

/// Goal indices and the scalar conditioning fed to the goal predictor.
fn goals_for_mode(
    mode: AblationMode,
    latents: &[Vec<Vec<f32>>],
    draws: &Draws,
    time: usize,
    t_context: usize,
) -> Result<(Vec<Vec<usize>>, Vec<f32>)> {
    let b = latents.len();
    match mode {
        AblationMode::Full | AblationMode::AllMask => {
            let goals = goal_indices(latents, &draws.epsilons)?;
            let cond = draws
                .epsilons
                .iter()
                .flat_map(|&e| std::iter::repeat_n(e as f32, time))
                .collect();
            Ok((goals, cond))
        }
        AblationMode::Next => {
            let row: Vec<usize> = (1..=time).map(|t| (t + 1).min(time)).collect();
            Ok((vec![row; b], vec![0.0; b * time]))
        }
        AblationMode::NextN => {
            if draws.horizons.len() != b {
                return Err(Error::validation("next-n draws are missing horizons"));
            }
            let goals = draws
                .horizons
                .iter()
                .map(|h| h.iter().enumerate().map(|(p, &n)| (p + 1 + n).min(time)).collect())
                .collect();
            let cond = draws
                .horizons
                .iter()
                .flatten()
                .map(|&n| n as f32 / t_context as f32)
                .collect();
            Ok((goals, cond))
        }
    }
}

/// Encode, reconstruct from masked inputs, segment the (detached) latents,
/// and predict each position's goal observation.
///
/// `frozen_goals` overrides the goal indices, which makes the loss a smooth
/// function of the parameters for gradient checks. Returns the loss terms and
/// the goal indices used.
pub fn joint_loss(
    model: &ConceptModel,
    ps: &ParamStore,
    batch: &WindowBatch,
    draws: &Draws,
    cfg: &TrainConfig,
    frozen_goals: Option<&[Vec<usize>]>,
) -> Result<(LossTerms, Vec<Vec<usize>>)> {
    let obs = batch.tensors(ps)?;
    let z = model.encoder.forward(&obs)?;

    let masked = mask_batch(&obs, &draws.masks, ps)?;
    let recon = model.cmcn.reconstruct(&masked, &z)?;
    let l_mm = cmcn_loss(&recon, &obs, &model.modalities)?;

    let (goals, cond) = {
        let host: Vec<Vec<Vec<f32>>> = z.detach().to_dtype(DType::F32)?.to_vec3()?;
        let (g, c) = goals_for_mode(cfg.ablation, &host, draws, batch.time, model.t_context())?;
        (frozen_goals.map(|f| f.to_vec()).unwrap_or(g), c)
    };
    let targets = batch.reindex(&goals)?.tensors(ps)?;
    let cond = ps.tensor(&cond, &[batch.batch, batch.time, 1])?;
    let pred = model.mhfp.predict(&obs, &z, &cond)?;
    let l_mh = cmcn_loss(&pred, &targets, &model.modalities)?;

    let total = ((&l_mm * cfg.lambda_mm)? + (&l_mh * cfg.lambda_mh)?)?;
    Ok((
        LossTerms {
            total,
            mm: scalar(&l_mm)?,
            mh: scalar(&l_mh)?,
        },
        goals,
    ))
}

/// The substituted objective of an ablation mode; rejects the full mode.
pub fn ablation_loss(
    model: &ConceptModel,
    ps: &ParamStore,
    batch: &WindowBatch,
    draws: &Draws,
    cfg: &TrainConfig,
) -> Result<LossTerms> {
    if cfg.ablation == AblationMode::Full {
        return Err(Error::validation("ablation_loss requires an ablation mode"));
    }
    Ok(joint_loss(model, ps, batch, draws, cfg, None)?.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub iteration: usize,
    pub loss: f64,
    pub loss_mm: f64,
    pub loss_mh: f64,
    pub lr: f64,
}

#[derive(Default)]
pub struct TrainOptions {
    /// Where `metrics.jsonl` and `checkpoint.mcck` go.
    pub out_dir: Option<PathBuf>,
    pub resume: Option<Checkpoint>,
    /// Halt after this many completed iterations (the schedule still spans
    /// the configured total).
    pub stop_after: Option<usize>,
    /// Defaults to f32.
    pub dtype: Option<DType>,
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub metrics: Vec<MetricRecord>,
    pub model: ConceptModel,
    pub params: ParamStore,
}

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.mcck";

/// All training windows of a dataset, in demonstration order.
pub fn training_windows(dataset: &Dataset, t_context: usize) -> Vec<Window> {
    dataset
        .demos
        .iter()
        .enumerate()
        .flat_map(|(i, d)| make_windows(i, d.len, t_context))
        .collect()
}

fn read_metrics(path: &Path, before: usize) -> Result<Vec<MetricRecord>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let r: MetricRecord = serde_json::from_str(line)?;
        if r.iteration < before {
            out.push(r);
        }
    }
    Ok(out)
}

/// Deterministic training loop. Batches are drawn with replacement from all
/// windows by a seeded stream that also drives masks and ε.
pub fn train(
    dataset: &Dataset,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    opts: TrainOptions,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    model_cfg.encoder.validate()?;
    dataset.validate()?;
    if dataset.demos.is_empty() {
        return Err(Error::validation("dataset has no demonstrations"));
    }
    let run = ConceptRunConfig {
        model: model_cfg.clone(),
        train: cfg.clone(),
        modalities: dataset.modalities.clone(),
    };
    let fp = run.fingerprint()?;
    let dtype = opts.dtype.unwrap_or(DType::F32);
    let mut ps = ParamStore::new(dtype, cfg.seed);
    let model = ConceptModel::new(&mut ps, model_cfg, &dataset.modalities)?;
    let mut opt = AdamW::new(&ps, cfg.adamw())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut start = 0;

    let metrics_path = opts.out_dir.as_ref().map(|d| d.join(METRICS_FILE));
    let ckpt_path = opts.out_dir.as_ref().map(|d| d.join(CHECKPOINT_FILE));
    if let Some(dir) = &opts.out_dir {
        std::fs::create_dir_all(dir)?;
    }

    let mut metrics = Vec::new();
    if let Some(ck) = &opts.resume {
        ck.check_kind("concepts")?;
        ck.check_fingerprint(&fp)?;
        ps.import(&ck.params)?;
        if let Some(m) = &ck.moments {
            opt.import(m)?;
        }
        rng = ck
            .rng
            .as_ref()
            .ok_or_else(|| Error::validation("checkpoint has no RNG state"))?
            .restore()?;
        start = ck.iteration;
        if let Some(p) = &metrics_path {
            metrics = read_metrics(p, start)?;
        }
        info!("resuming at iteration {start}");
    }

    let mut log = match &metrics_path {
        Some(p) => {
            let mut f = std::fs::File::create(p)?;
            for r in &metrics {
                writeln!(f, "{}", serde_json::to_string(r)?)?;
            }
            Some(std::io::BufWriter::new(f))
        }
        None => None,
    };

    let windows = training_windows(dataset, model_cfg.encoder.t_context);
    let snapshot = |ps: &ParamStore, opt: &AdamW, rng: &ChaCha8Rng, iteration: usize| -> Result<Checkpoint> {
        Ok(Checkpoint {
            kind: "concepts".into(),
            fingerprint: fp.clone(),
            iteration,
            config: serde_json::to_value(&run)?,
            rng: Some(RngState::capture(rng)),
            params: ps.export()?,
            moments: Some(opt.export()?),
        })
    };

    let end = opts.stop_after.unwrap_or(cfg.iterations).min(cfg.iterations);
    for it in start..end {
        let picks: Vec<Window> = (0..cfg.batch_size)
            .map(|_| windows[rng.random_range(0..windows.len())])
            .collect();
        let batch = WindowBatch::gather(dataset, &picks)?;
        let draws = sample_draws(
            cfg.ablation,
            batch.batch,
            batch.time,
            dataset.modalities.len(),
            &mut rng,
        )?;
        let (terms, _) = joint_loss(&model, &ps, &batch, &draws, cfg, None)?;
        let loss = scalar(&terms.total)?;
        if !loss.is_finite() {
            if let Some(f) = log.as_mut() {
                f.flush()?;
            }
            warn!("non-finite loss at iteration {it}; keeping last checkpoint");
            return Err(Error::numeric(format!("iteration {it}"), format!("loss is {loss}")));
        }
        let lr = learning_rate(it, cfg.iterations, cfg.warmup, cfg.learning_rate);
        let grads = terms.total.backward()?;
        opt.step(&ps, &grads, lr)?;

        let record = MetricRecord {
            iteration: it,
            loss,
            loss_mm: terms.mm,
            loss_mh: terms.mh,
            lr,
        };
        if let Some(f) = log.as_mut() {
            writeln!(f, "{}", serde_json::to_string(&record)?)?;
        }
        metrics.push(record);
        if it % 100 == 0 {
            info!("iteration {it}: loss {loss:.4} (mm {:.4}, mh {:.4})", terms.mm, terms.mh);
        }
        let done = it + 1;
        if cfg.checkpoint_interval > 0 && done % cfg.checkpoint_interval == 0 && done < end {
            if let Some(p) = &ckpt_path {
                if let Some(f) = log.as_mut() {
                    f.flush()?;
                }
                snapshot(&ps, &opt, &rng, done)?.write(p)?;
            }
        }
    }
    if let Some(f) = log.as_mut() {
        f.flush()?;
    }
    let checkpoint = snapshot(&ps, &opt, &rng, end.max(start))?;
    if let Some(p) = &ckpt_path {
        checkpoint.write(p)?;
    }
    Ok(TrainOutcome {
        checkpoint,
        metrics,
        model,
        params: ps,
    })
}

mod config;

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use candle_core::DType;
use clap::{Parser, Subcommand};
use log::info;
use serde::Serialize;
use serde_json::json;

use config::{RunConfig, DATASET_FILE, LABELS_FILE};
use mcd::analysis::{self, write_json};
use mcd::checkpoint::{file_digest, fingerprint, Checkpoint};
use mcd::dataset::Dataset;
use mcd::encoder::{label_dataset, ConceptLabels};
use mcd::env::{generate_demonstrations, ACTION_DIM};
use mcd::policy::{
    evaluate_policy, sweep_policy, train_policy, write_sweep_csv, ExpertController, LearnedController, PolicyModel,
    PolicyRunConfig, PolicyTrainOptions, RandomController, SweepSpec,
};
use mcd::nn::ParamStore;
use mcd::trainer::{train, ConceptModel, ConceptRunConfig, TrainOptions, CHECKPOINT_FILE};

#[derive(Parser)]
#[command(name = "mcd", about = "Manipulation-concept discovery pipeline on a synthetic pick-and-place environment")]
struct Cli {
    /// JSON run configuration; omitted sections use defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set train.seed=7`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate expert demonstrations.
    GenData,
    /// Train the concept encoder jointly with the reconstruction and goal-prediction heads.
    TrainConcepts {
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Label every dataset timestep with its concept latent.
    Label,
    /// Train a concept-enhanced behavior-cloning policy.
    TrainPolicy,
    /// Roll out the trained policy and the expert and random baselines.
    Eval,
    /// Run concept analyses and write reports and figures.
    Analyze {
        /// Comma-separated subset of analyses; defaults to `analysis.which`.
        #[arg(long, value_delimiter = ',')]
        which: Option<Vec<String>>,
    },
    /// Train and evaluate policies over the concept-layer and concept-weight grid.
    SweepPolicy,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = e
                .chain()
                .find_map(|c| c.downcast_ref::<mcd::Error>())
                .map(error_kind)
                .unwrap_or("error");
            let msg = format!("{e:#}").replace(['\n', '\r'], " ");
            eprintln!("error: {}", json!({"kind": kind, "message": msg}));
            ExitCode::from(2)
        }
    }
}

fn error_kind(e: &mcd::Error) -> &'static str {
    match e {
        mcd::Error::Format(_) => "format",
        mcd::Error::Validation(_) => "validation",
        mcd::Error::Numeric { .. } => "numeric",
        mcd::Error::Fingerprint { .. } => "fingerprint",
        mcd::Error::Io(_) => "io",
        mcd::Error::Json(_) => "json",
        mcd::Error::Csv(_) => "csv",
        mcd::Error::Tensor(_) => "tensor",
    }
}

fn run(cli: Cli) -> Result<()> {
    let cfg = RunConfig::load(cli.config.as_deref(), &cli.overrides)?;
    match cli.command {
        Command::GenData => gen_data(&cfg),
        Command::TrainConcepts { resume } => train_concepts(&cfg, resume),
        Command::Label => label(&cfg),
        Command::TrainPolicy => train_policy_cmd(&cfg),
        Command::Eval => eval(&cfg),
        Command::Analyze { which } => analyze(&cfg, which.unwrap_or_else(|| cfg.analysis.which.clone())),
        Command::SweepPolicy => sweep(&cfg),
    }
}

#[derive(Serialize)]
struct Input {
    role: &'static str,
    path: PathBuf,
    sha256: String,
}

fn require(role: &'static str, path: &Path) -> Result<Input> {
    if !path.is_file() {
        bail!(mcd::Error::validation(format!("{role} input {} does not exist", path.display())));
    }
    Ok(Input {
        role,
        path: path.to_path_buf(),
        sha256: file_digest(path)?,
    })
}

/// Runs `body` against a fresh output directory holding the resolved
/// configuration and the inputs it was computed from. A directory created
/// here is removed again if `body` fails, unless `keep_on_error`.
fn with_outputs(
    cfg: &RunConfig,
    sub: &str,
    command: &str,
    inputs: &[Input],
    keep_on_error: bool,
    body: impl FnOnce(&Path) -> Result<()>,
) -> Result<()> {
    let dir = cfg.out_dir().join(sub);
    let existed = dir.exists();
    let r = start_outputs(cfg, &dir, command, inputs).and_then(|()| body(&dir));
    if r.is_err() && !existed && !keep_on_error {
        let _ = std::fs::remove_dir_all(&dir);
    }
    r
}

fn start_outputs(cfg: &RunConfig, dir: &Path, command: &str, inputs: &[Input]) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut resolved = cfg.clone();
    resolved.io.out_dir = Some(cfg.out_dir());
    write_json(&dir.join("config.json"), &resolved)?;
    write_json(
        &dir.join("provenance.json"),
        &json!({
            "command": command,
            "version": env!("CARGO_PKG_VERSION"),
            "inputs": inputs,
        }),
    )?;
    Ok(())
}

fn concept_run(cfg: &RunConfig) -> ConceptRunConfig {
    ConceptRunConfig {
        model: cfg.model(),
        train: cfg.train.clone(),
        modalities: cfg.env.modalities(),
    }
}

fn policy_run(cfg: &RunConfig) -> Result<PolicyRunConfig> {
    Ok(PolicyRunConfig {
        policy: cfg.policy.model.clone(),
        train: cfg.policy.train.clone(),
        objects: cfg.env.object_count,
        obs_dims: cfg.env.modalities().iter().map(|m| m.dim).collect(),
        action_dim: ACTION_DIM,
        concept_dim: cfg.encoder.width,
        labels_source: concept_run(cfg).fingerprint()?,
    })
}

fn load_dataset(cfg: &RunConfig, inputs: &mut Vec<Input>) -> Result<Dataset> {
    let path = cfg.dataset_path();
    inputs.push(require("dataset", &path)?);
    let ds = Dataset::read(&path)?;
    if ds.modalities != cfg.env.modalities() {
        bail!(mcd::Error::validation("dataset modalities do not match env config"));
    }
    Ok(ds)
}

fn load_labels(cfg: &RunConfig, dataset: &Dataset, inputs: &mut Vec<Input>) -> Result<ConceptLabels> {
    let path = cfg.labels_path();
    inputs.push(require("labels", &path)?);
    let labels = ConceptLabels::read(&path)?;
    let expected = concept_run(cfg).fingerprint()?;
    if labels.source != expected {
        bail!(mcd::Error::Fingerprint {
            expected,
            found: labels.source.clone()
        });
    }
    labels.check_aligned(dataset)?;
    Ok(labels)
}

fn load_concepts(cfg: &RunConfig, inputs: &mut Vec<Input>) -> Result<(ConceptModel, ParamStore)> {
    let path = cfg.concepts_path();
    inputs.push(require("concepts", &path)?);
    let ck = Checkpoint::read(&path)?;
    ck.check_fingerprint(&concept_run(cfg).fingerprint()?)
        .context("concept checkpoint was trained with a different configuration")?;
    let (model, ps, _) = ConceptModel::from_checkpoint(&ck, DType::F32)?;
    Ok((model, ps))
}

fn gen_data(cfg: &RunConfig) -> Result<()> {
    let g = generate_demonstrations(&cfg.env, cfg.data.demos, cfg.seed)?;
    with_outputs(cfg, "data", "gen-data", &[], false, |dir| {
        let path = dir.join(DATASET_FILE);
        g.dataset.write(&path)?;
        write_json(
            &dir.join("summary.json"),
            &json!({
                "demos": g.dataset.demos.len(),
                "timesteps": g.dataset.total_timesteps(),
                "discarded_seeds": g.discarded,
                "sha256": file_digest(&path)?,
            }),
        )?;
        info!("wrote {} demonstrations to {}", g.dataset.demos.len(), path.display());
        Ok(())
    })
}

fn train_concepts(cfg: &RunConfig, resume: bool) -> Result<()> {
    let mut inputs = Vec::new();
    let ds = load_dataset(cfg, &mut inputs)?;
    let ck_path = cfg.out_dir().join("concepts").join(CHECKPOINT_FILE);
    let resume = if resume {
        inputs.push(require("resume", &ck_path)?);
        Some(Checkpoint::read(&ck_path)?)
    } else {
        None
    };
    // A failed run keeps its last checkpoint so it can be resumed.
    with_outputs(cfg, "concepts", "train-concepts", &inputs, true, |dir| {
        let out = train(
            &ds,
            &cfg.model(),
            &cfg.train,
            TrainOptions {
                out_dir: Some(dir.to_path_buf()),
                resume,
                ..Default::default()
            },
        )?;
        if let Some(last) = out.metrics.last() {
            info!("final loss {:.4} after {} iterations", last.loss, out.checkpoint.iteration);
        }
        Ok(())
    })
}

fn label(cfg: &RunConfig) -> Result<()> {
    let mut inputs = Vec::new();
    let ds = load_dataset(cfg, &mut inputs)?;
    let (model, ps) = load_concepts(cfg, &mut inputs)?;
    with_outputs(cfg, "labels", "label", &inputs, false, |dir| {
        let labels = label_dataset(&ds, &model.encoder, &ps, &concept_run(cfg).fingerprint()?)?;
        let path = dir.join(LABELS_FILE);
        labels.write(&path)?;
        info!("labeled {} demonstrations into {}", labels.per_demo.len(), path.display());
        Ok(())
    })
}

fn train_policy_cmd(cfg: &RunConfig) -> Result<()> {
    let mut inputs = Vec::new();
    let ds = load_dataset(cfg, &mut inputs)?;
    let labels = load_labels(cfg, &ds, &mut inputs)?;
    with_outputs(cfg, "policy", "train-policy", &inputs, false, |dir| {
        let out = train_policy(
            &ds,
            &labels,
            &cfg.policy.model,
            &cfg.policy.train,
            PolicyTrainOptions {
                out_dir: Some(dir.to_path_buf()),
                dtype: None,
            },
        )?;
        if let Some(m) = out.metrics.last() {
            info!("final action loss {:.4}, concept loss {:.4}", m.loss_action, m.loss_concept);
        }
        Ok(())
    })
}

fn eval(cfg: &RunConfig) -> Result<()> {
    let path = cfg.policy_path();
    let inputs = vec![require("policy", &path)?];
    let ck = Checkpoint::read(&path)?;
    ck.check_fingerprint(&fingerprint(&policy_run(cfg)?)?)
        .context("policy checkpoint was trained with a different configuration")?;
    let (model, ps) = PolicyModel::from_checkpoint(&ck, DType::F32)?;
    with_outputs(cfg, "eval", "eval", &inputs, false, |dir| {
        let n = cfg.policy.eval_episodes;
        let results = [
            ("policy", evaluate_policy(&mut LearnedController::new(&model, &ps), &cfg.env, n, cfg.seed)?),
            ("expert", evaluate_policy(&mut ExpertController::default(), &cfg.env, n, cfg.seed)?),
            ("random", evaluate_policy(&mut RandomController::new(cfg.seed), &cfg.env, n, cfg.seed)?),
        ];
        let mut w = csv::Writer::from_path(dir.join("success.csv"))?;
        w.write_record(["controller", "split", "success_rate", "stderr", "episodes"])?;
        let mut log = std::io::BufWriter::new(std::fs::File::create(dir.join("episodes.jsonl"))?);
        for (name, splits) in &results {
            for r in splits {
                w.write_record([
                    name.to_string(),
                    r.split.name().to_string(),
                    r.success_rate.to_string(),
                    r.stderr.to_string(),
                    r.episodes.len().to_string(),
                ])?;
                for e in &r.episodes {
                    writeln!(log, "{}", json!({"controller": name, "split": r.split.name(), "episode": e}))?;
                }
                info!("{name} {}: {:.3} ± {:.3}", r.split.name(), r.success_rate, r.stderr);
            }
        }
        w.flush()?;
        log.flush()?;
        Ok(())
    })
}

fn sweep(cfg: &RunConfig) -> Result<()> {
    let mut inputs = Vec::new();
    let ds = load_dataset(cfg, &mut inputs)?;
    let labels = load_labels(cfg, &ds, &mut inputs)?;
    with_outputs(cfg, "sweep", "sweep-policy", &inputs, false, |dir| {
        let s = &cfg.policy.sweep;
        let rows = sweep_policy(
            &ds,
            &labels,
            &cfg.policy.model,
            &cfg.policy.train,
            &cfg.env,
            &SweepSpec {
                layers: &s.layers,
                lambdas: &s.lambdas,
                seeds: &s.seeds,
                n_episodes: cfg.policy.eval_episodes,
                eval_seed: cfg.seed,
            },
        )?;
        write_sweep_csv(&rows, std::fs::File::create(dir.join("sweep.csv"))?)?;
        Ok(())
    })
}

fn analyze(cfg: &RunConfig, which: Vec<String>) -> Result<()> {
    for w in &which {
        if !config::ANALYSES.contains(&w.as_str()) {
            bail!(mcd::Error::validation(format!("unknown analysis {w:?}")));
        }
    }
    let wants = |name: &str| which.iter().any(|w| w == name);
    let mut inputs = Vec::new();
    let ds = load_dataset(cfg, &mut inputs)?;
    let labels = load_labels(cfg, &ds, &mut inputs)?;
    let concepts = if wants("gallery") {
        Some(load_concepts(cfg, &mut inputs)?)
    } else {
        None
    };
    with_outputs(cfg, "analysis", "analyze", &inputs, false, |dir| {
        run_analyses(cfg, dir, &wants, &ds, &labels, concepts.as_ref())
    })
}

fn run_analyses(
    cfg: &RunConfig,
    dir: &Path,
    wants: &dyn Fn(&str) -> bool,
    ds: &Dataset,
    labels: &ConceptLabels,
    concepts: Option<&(ConceptModel, ParamStore)>,
) -> Result<()> {
    let a = &cfg.analysis;
    let mut summary = BTreeMap::new();

    if wants("similarity") {
        let groups = analysis::group_by_segments(ds, labels)?;
        let m = analysis::class_similarity(&groups)?;
        let names: Vec<String> = groups.iter().map(|g| g.label.clone()).collect();
        let dom = analysis::diagonal_dominance(&m);
        write_json(&dir.join("similarity.json"), &json!({"groups": names, "matrix": m, "diagonal_dominance": dom}))?;
        std::fs::write(dir.join("similarity.svg"), analysis::similarity_svg(&names, &m))?;
        summary.insert("similarity_diagonal_dominance", json!(dom));
    }
    if wants("motion") {
        let groups = analysis::group_by_motion(ds, labels)?;
        let names: Vec<String> = groups.iter().map(|g| g.label.clone()).collect();
        let sizes: Vec<usize> = groups.iter().map(|g| g.members.len()).collect();
        let m = analysis::class_similarity(&groups)?;
        write_json(&dir.join("motion.json"), &json!({"groups": names, "sizes": sizes, "matrix": m}))?;
        std::fs::write(dir.join("motion.svg"), analysis::similarity_svg(&names, &m))?;
    }
    if wants("cmi") {
        let mut mine = a.mine.clone();
        mine.seed = cfg.seed;
        let r = analysis::modality_cmi(ds, labels, &mine, a.cmi_samples)?;
        let mean = r.iter().map(|c| c.estimate.cmi).sum::<f64>() / r.len().max(1) as f64;
        write_json(&dir.join("cmi.json"), &json!({"pairs": r, "mean": mean}))?;
        summary.insert("cmi_mean", json!(mean));
    }
    if wants("diversity") {
        let all: Vec<Vec<f32>> = labels
            .per_demo
            .iter()
            .flat_map(|v| v.chunks_exact(labels.dim).map(<[f32]>::to_vec))
            .collect();
        let pts = analysis::evenly_spaced(&all, a.diversity_samples);
        let r = analysis::diversity_sweep(&pts, &a.diversity_eps)?;
        let mut w = csv::Writer::from_path(dir.join("diversity.csv"))?;
        for p in &r {
            w.serialize(p)?;
        }
        w.flush()?;
    }
    if wants("hierarchy") {
        let demos: Vec<usize> = a.hierarchy_demos.iter().copied().filter(|&i| i < ds.demos.len()).collect();
        let r = analysis::hierarchy_report(ds, labels, &demos, &a.hierarchy_eps)?;
        for d in &r.demos {
            std::fs::write(dir.join(format!("hierarchy_demo{}.svg", d.demo_index)), analysis::hierarchy_svg(d))?;
        }
        summary.insert("hierarchy_dominance_holds", json!(r.dominance_holds));
        summary.insert("hierarchy_mean_best_agreement", json!(r.mean_best_agreement));
        write_json(&dir.join("hierarchy.json"), &r)?;
    }
    if let Some((model, ps)) = concepts {
        let rows = analysis::goal_gallery(model, ps, ds, a.gallery_demo, &a.gallery_eps, &a.gallery_positions)?;
        let mut w = csv::Writer::from_path(dir.join("gallery.csv"))?;
        w.write_record(["eps", "t", "terminal", "error"])?;
        for r in &rows {
            w.write_record([r.eps.to_string(), r.t.to_string(), r.terminal.to_string(), r.error.to_string()])?;
        }
        w.flush()?;
        write_json(&dir.join("gallery.json"), &rows)?;
        std::fs::write(dir.join("gallery.svg"), analysis::gallery_svg(&rows, cfg.env.object_count))?;
    }
    write_json(&dir.join("summary.json"), &summary)?;
    Ok(())
}

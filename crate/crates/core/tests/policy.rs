mod common;

use candle_core::{DType, Tensor};
use common::{small_dataset, tiny_model};
use mcd::dataset::Dataset;
use mcd::encoder::{label_dataset, ConceptLabels};
use mcd::env::{EnvSpec, Task, ACTION_DIM};
use mcd::nn::{scalar, ParamStore};
use mcd::policy::{
    evaluate_policy, evaluate_split, policy_loss, shuffle_labels, sweep_policy, task_dim, task_features, train_policy,
    write_sweep_csv, EvalSplit, ExpertController, LearnedController, PolicyConfig, PolicyModel, PolicyRunConfig,
    PolicyTrainConfig, PolicyTrainOptions, RandomController, SweepSpec,
};
use mcd::trainer::ConceptModel;
use mcd::Error;
use rand::Rng;

fn labels_for(ds: &Dataset) -> ConceptLabels {
    let mut ps = ParamStore::new(DType::F32, 0);
    let model = ConceptModel::new(&mut ps, &tiny_model(6), &ds.modalities).unwrap();
    label_dataset(ds, &model.encoder, &ps, "untrained").unwrap()
}

fn small_policy(layer: usize, lambda: f64) -> PolicyConfig {
    PolicyConfig {
        depth: 3,
        width: 32,
        chunk: 2,
        task_embed_dim: 8,
        concept_layer: layer,
        lambda_mc: lambda,
        ..PolicyConfig::default()
    }
}

fn quick(iterations: usize, seed: u64) -> PolicyTrainConfig {
    PolicyTrainConfig {
        iterations,
        batch_size: 32,
        warmup: 10,
        learning_rate: 3e-3,
        seed,
        ..PolicyTrainConfig::default()
    }
}

fn run_config(layer: usize) -> PolicyRunConfig {
    PolicyRunConfig {
        policy: small_policy(layer, 0.0),
        train: quick(1, 0),
        objects: 3,
        obs_dims: vec![12, 11, 3],
        action_dim: ACTION_DIM,
        concept_dim: 8,
        labels_source: String::new(),
    }
}

struct Inputs {
    obs: Tensor,
    tasks: Tensor,
    gt_a: Tensor,
    gt_z: Tensor,
}

fn random_inputs(ps: &ParamStore, run: &PolicyRunConfig, b: usize, seed: u64) -> Inputs {
    let mut r = common::rng(seed);
    let mut v = |n: usize| -> Vec<f32> { (0..n).map(|_| r.random_range(-1.0..1.0)).collect() };
    let c = run.policy.chunk;
    let obs = ps.tensor(&v(b * 26), &[b, 26]).unwrap();
    let gt_a = ps.tensor(&v(b * c * 3), &[b, c, 3]).unwrap();
    let gt_z = ps.tensor(&v(b * c * 8), &[b, c, 8]).unwrap();
    let task = task_features(&Task { placements: vec![(1, 0)] }, 3).unwrap();
    let tasks = ps.tensor(&task.repeat(b), &[b, task_dim(3)]).unwrap();
    Inputs { obs, tasks, gt_a, gt_z }
}

fn values(t: &Tensor) -> Vec<f64> {
    t.flatten_all().unwrap().to_dtype(DType::F64).unwrap().to_vec1().unwrap()
}

#[test]
fn concept_head_gets_no_gradient_without_the_concept_term() {
    for layer in 0..3 {
        let run = run_config(layer);
        let mut ps = ParamStore::new(DType::F64, 1);
        let model = PolicyModel::new(&mut ps, &run).unwrap();
        let x = random_inputs(&ps, &run, 16, 2);
        let out = model.forward(&x.obs, &x.tasks).unwrap();
        let loss = policy_loss(&out.actions, &x.gt_a, &out.concepts, &x.gt_z, 0.0).unwrap();
        assert_eq!(scalar(&loss.total).unwrap(), loss.action);
        let grads = loss.total.backward().unwrap();
        for (name, var) in ps.vars() {
            let g = grads.get(var.as_tensor()).map(values);
            if name.starts_with("policy.concept_head") {
                assert!(g.is_none_or(|g| g.iter().all(|&v| v == 0.0)), "{name}");
            } else if name.starts_with("policy.action_head") {
                assert!(g.unwrap().iter().any(|&v| v != 0.0), "{name}");
            }
        }
    }
}

#[test]
fn concepts_only_depend_on_layers_up_to_the_head() {
    for layer in 0..3 {
        let run = run_config(layer);
        let mut ps = ParamStore::new(DType::F32, 3);
        let model = PolicyModel::new(&mut ps, &run).unwrap();
        let x = random_inputs(&ps, &run, 8, 4);
        let before = model.forward(&x.obs, &x.tasks).unwrap();
        let above: Vec<String> = (layer + 1..3)
            .map(|i| format!("policy.block{i}."))
            .chain(["policy.action_head".to_string()])
            .collect();
        for (name, var) in ps.vars() {
            if above.iter().any(|p| name.starts_with(p)) {
                var.set(&(var.as_tensor() + 0.25).unwrap()).unwrap();
            }
        }
        let after = model.forward(&x.obs, &x.tasks).unwrap();
        assert_eq!(values(&before.concepts), values(&after.concepts));
        assert_ne!(values(&before.actions), values(&after.actions));
    }
}

#[test]
fn loss_decomposes_and_rescaling_concepts_is_absorbed_by_lambda() {
    let run = run_config(1);
    let mut ps = ParamStore::new(DType::F64, 5);
    let model = PolicyModel::new(&mut ps, &run).unwrap();
    let x = random_inputs(&ps, &run, 16, 6);
    for lambda in [0.0, 0.001, 0.01, 0.1, 1.0, 7.5] {
        let out = model.forward(&x.obs, &x.tasks).unwrap();
        let l = policy_loss(&out.actions, &x.gt_a, &out.concepts, &x.gt_z, lambda).unwrap();
        assert!((scalar(&l.total).unwrap() - (l.action + lambda * l.concept)).abs() < 1e-9);
    }
    let perfect = policy_loss(&x.gt_a, &x.gt_a, &x.gt_z, &x.gt_z, 1.0).unwrap();
    assert_eq!(scalar(&perfect.total).unwrap(), 0.0);

    // Scaling targets and the concept head's output by c scales the concept
    // term by c; lambda / c leaves the total and every backbone gradient as is.
    let lambda = 0.3;
    let c = 4.0;
    let base = {
        let out = model.forward(&x.obs, &x.tasks).unwrap();
        policy_loss(&out.actions, &x.gt_a, &out.concepts, &x.gt_z, lambda).unwrap()
    };
    let base_grads = base.total.backward().unwrap();
    let out = model.forward(&x.obs, &x.tasks).unwrap();
    let scaled = policy_loss(&out.actions, &x.gt_a, &(&out.concepts * c).unwrap(), &(&x.gt_z * c).unwrap(), lambda / c)
        .unwrap();
    assert!((scaled.concept - c * base.concept).abs() < 1e-9 * scaled.concept);
    assert_eq!(scaled.action, base.action);
    assert!((scalar(&scaled.total).unwrap() - scalar(&base.total).unwrap()).abs() < 1e-12);
    let grads = scaled.total.backward().unwrap();
    for (name, var) in ps.vars() {
        let (a, b) = (grads.get(var.as_tensor()), base_grads.get(var.as_tensor()));
        let (a, b) = (values(a.unwrap()), values(b.unwrap()));
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() <= 1e-10 * (1.0 + y.abs()), "{name}: {x} vs {y}");
        }
    }
}

#[test]
fn tasks_outside_the_scene_are_rejected() {
    assert!(task_features(&Task { placements: vec![(3, 0)] }, 3).is_err());
    assert!(task_features(&Task { placements: vec![(0, 2)] }, 3).is_err());
    assert!(task_features(&Task { placements: vec![(0, 0), (1, 1), (2, 0)] }, 3).is_err());
    let run = run_config(0);
    let mut ps = ParamStore::new(DType::F32, 0);
    let model = PolicyModel::new(&mut ps, &run).unwrap();
    let x = random_inputs(&ps, &run, 2, 0);
    let bad = ps.tensor(&[0.0; 4], &[2, 2]).unwrap();
    assert!(matches!(model.forward(&x.obs, &bad), Err(Error::Validation(_))));
}

#[test]
fn misaligned_labels_are_rejected() {
    let ds = small_dataset(4, 0);
    let mut labels = labels_for(&ds);
    labels.per_demo[1].truncate(labels.dim);
    let r = train_policy(&ds, &labels, &small_policy(1, 0.1), &quick(2, 0), PolicyTrainOptions::default());
    assert!(matches!(r, Err(Error::Validation(_))));
}

#[test]
fn concept_term_learns_true_labels_better_than_shuffled_ones() {
    let ds = small_dataset(30, 1);
    let labels = labels_for(&ds);
    for seed in 0..4 {
        let cfg = small_policy(1, 1.0);
        let tcfg = quick(400, seed);
        let truth = train_policy(&ds, &labels, &cfg, &tcfg, PolicyTrainOptions::default()).unwrap();
        let shuffled = shuffle_labels(&labels, seed);
        assert_ne!(shuffled.per_demo, labels.per_demo);
        let control = train_policy(&ds, &shuffled, &cfg, &tcfg, PolicyTrainOptions::default()).unwrap();
        let tail = |m: &[mcd::policy::PolicyMetric]| m[m.len() - 50..].iter().map(|r| r.loss_concept).sum::<f64>() / 50.0;
        let (t, s) = (tail(&truth.metrics), tail(&control.metrics));
        assert!(t < s, "seed {seed}: true {t} shuffled {s}");
        let head = truth.metrics[..50].iter().map(|r| r.loss_concept).sum::<f64>() / 50.0;
        assert!(t < head, "concept loss did not decrease: {head} -> {t}");
    }
}

#[test]
fn training_is_deterministic() {
    let ds = small_dataset(6, 2);
    let labels = labels_for(&ds);
    let a = train_policy(&ds, &labels, &small_policy(2, 0.1), &quick(20, 3), PolicyTrainOptions::default()).unwrap();
    let b = train_policy(&ds, &labels, &small_policy(2, 0.1), &quick(20, 3), PolicyTrainOptions::default()).unwrap();
    assert_eq!(a.metrics, b.metrics);
    assert_eq!(a.checkpoint.params, b.checkpoint.params);
    let (model, ps) = PolicyModel::from_checkpoint(&a.checkpoint, DType::F32).unwrap();
    let env = EnvSpec::default();
    let r1 = evaluate_policy(&mut LearnedController::new(&model, &ps), &env, 6, 9).unwrap();
    let r2 = evaluate_policy(&mut LearnedController::new(&a.model, &a.params), &env, 6, 9).unwrap();
    assert_eq!(r1, r2);
}

#[test]
fn baselines_bracket_the_success_rate() {
    let quiet = EnvSpec {
        noise: 0.0,
        ..EnvSpec::default()
    };
    for r in evaluate_policy(&mut ExpertController::default(), &quiet, 100, 0).unwrap() {
        assert_eq!(r.success_rate, 1.0, "{}", r.split.name());
    }
    let env = EnvSpec::default();
    let random = evaluate_policy(&mut RandomController::new(0), &env, 100, 0).unwrap();
    for r in &random {
        assert!(r.success_rate <= 0.03, "{} {}", r.split.name(), r.success_rate);
        assert_eq!(r.episodes.len(), 100);
    }
    let again = evaluate_split(&mut RandomController::new(0), &env, EvalSplit::TwoStage, 100, 0).unwrap();
    assert_eq!(again, random[2]);
    let tasks: std::collections::BTreeSet<&str> = random[2].episodes.iter().map(|e| e.task.as_str()).collect();
    assert!(tasks.iter().all(|t| t.starts_with("two:")));
}

#[test]
fn sweep_emits_one_row_per_cell_and_split() {
    let ds = small_dataset(6, 4);
    let labels = labels_for(&ds);
    let layers = [0, 1, 2];
    let lambdas = [0.0, 0.001, 0.01, 0.1, 1.0];
    let rows = sweep_policy(
        &ds,
        &labels,
        &small_policy(0, 0.0),
        &quick(5, 0),
        &EnvSpec::default(),
        &SweepSpec {
            layers: &layers,
            lambdas: &lambdas,
            seeds: &[0, 1],
            n_episodes: 2,
            eval_seed: 0,
        },
    )
    .unwrap();
    assert_eq!(rows.len(), 45);
    assert!(rows.iter().all(|r| r.seeds == 2 && (0.0..=1.0).contains(&r.success_rate)));
    let mut buf = Vec::new();
    write_sweep_csv(&rows, &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert_eq!(text.lines().next().unwrap(), "L,lambda_mc,split,success_rate,stderr,seeds");
    assert_eq!(text.lines().count(), 46);
}

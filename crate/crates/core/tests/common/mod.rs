#![allow(dead_code)]

use mcd::dataset::Dataset;
use mcd::encoder::EncoderConfig;
use mcd::env::{generate_demonstrations, EnvSpec};
use mcd::fusion::PredictorConfig;
use mcd::trainer::{ModelConfig, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

/// A random unit-latent sequence: either independent directions or a random
/// walk on the sphere with a per-sequence step size, so that segmentations
/// range from all singletons to a few long intervals.
pub fn random_sequence(rng: &mut ChaCha8Rng, len: usize, dim: usize) -> Vec<Vec<f32>> {
    let gauss = |rng: &mut ChaCha8Rng| -> Vec<f64> { (0..dim).map(|_| rng.sample(StandardNormal)).collect() };
    let independent = rng.random_bool(0.2);
    let step: f64 = rng.random_range(0.02..0.6);
    let mut cur = unit(gauss(rng));
    let mut out = Vec::with_capacity(len);
    for _ in 0..len {
        out.push(cur.iter().map(|&x| x as f32).collect());
        cur = if independent {
            unit(gauss(rng))
        } else {
            let n = gauss(rng);
            unit(cur.iter().zip(&n).map(|(c, e)| c + step * e / (dim as f64).sqrt()).collect())
        };
    }
    out
}

/// `count` sequences with `T <= max_len` and dims drawn from {2, 8, 64}.
pub fn corpus(count: usize, max_len: usize, seed: u64) -> Vec<Vec<Vec<f32>>> {
    let mut r = rng(seed);
    (0..count)
        .map(|_| {
            let len = r.random_range(1..=max_len);
            let dim = [2, 8, 64][r.random_range(0..3)];
            random_sequence(&mut r, len, dim)
        })
        .collect()
}

pub fn eps_grid(step: f64) -> Vec<f64> {
    let n = (1.0 / step).round() as usize;
    (0..=n).map(|i| i as f64 * step).collect()
}

fn angle_distance(a: &[f32], b: &[f32]) -> f64 {
    let ua = unit(a.iter().map(|&x| x as f64).collect());
    let ub = unit(b.iter().map(|&x| x as f64).collect());
    let dot: f64 = ua.iter().zip(&ub).map(|(x, y)| x * y).sum();
    dot.clamp(-1.0, 1.0).acos() / std::f64::consts::PI
}

/// Reference segmentation: from each start, grow while every pair inside the
/// candidate interval (re-checked from scratch) is closer than `eps`.
pub fn brute_segments(z: &[Vec<f32>], eps: f64) -> Vec<(usize, usize)> {
    let t = z.len();
    let coherent = |s: usize, e: usize| {
        (s..e).all(|i| (i + 1..e).all(|j| angle_distance(&z[i - 1], &z[j - 1]) < eps))
    };
    let mut out = Vec::new();
    let mut s = 1;
    while s <= t {
        let mut e = s + 1;
        while e <= t && coherent(s, e + 1) {
            e += 1;
        }
        out.push((s, e));
        s = e;
    }
    out
}

/// Reference terminal index: scan forward for the first interval end after `t`.
pub fn brute_terminal(intervals: &[(usize, usize)], t: usize, len: usize) -> usize {
    let mut ends: Vec<usize> = intervals.iter().map(|&(_, e)| e).filter(|&e| e > t).collect();
    ends.sort();
    ends[0].min(len)
}

/// A small model for tests that need real forward passes.
pub fn tiny_model(t_context: usize) -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            embed_hidden: 8,
            width: 8,
            depth: 1,
            heads: 2,
            t_context,
        },
        cmcn: PredictorConfig {
            hidden: 8,
            depth: 1,
            heads: 2,
        },
        mhfp: PredictorConfig {
            hidden: 8,
            depth: 1,
            heads: 2,
        },
    }
}

pub fn quick_train(iterations: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        iterations,
        batch_size: 8,
        warmup: 5,
        seed,
        checkpoint_interval: 0,
        ..TrainConfig::default()
    }
}

pub fn small_dataset(demos: usize, seed: u64) -> Dataset {
    generate_demonstrations(&EnvSpec::default(), demos, seed).unwrap().dataset
}

pub struct GradCheck {
    pub max_rel_error: f64,
    pub checked: usize,
    pub max_norm_error: f64,
}

/// Compares analytic gradients of the joint loss with central differences at
/// float64, over `points` random parameter points with every dim at most 8.
/// Goal indices are frozen at the unperturbed point so the loss is smooth.
pub fn joint_loss_grad_check(points: u64, coords_per_point: usize) -> GradCheck {
    use candle_core::{DType, Tensor};
    use mcd::batch::WindowBatch;
    use mcd::dataset::{ModalitySpec, ReconNorm};
    use mcd::nn::ParamStore;
    use mcd::trainer::{joint_loss, sample_draws, AblationMode, ConceptModel};

    let specs = vec![
        ModalitySpec::new("a", 4, ReconNorm::L2),
        ModalitySpec::new("b", 3, ReconNorm::L2),
        ModalitySpec::new("c", 2, ReconNorm::L1),
    ];
    let (b, t) = (2, 5);
    let cfg = quick_train(1, 0);
    let mut out = GradCheck {
        max_rel_error: 0.0,
        checked: 0,
        max_norm_error: 0.0,
    };
    for point in 0..points {
        let mut r = rng(1000 + point);
        let mut ps = ParamStore::new(DType::F64, point);
        let model = ConceptModel::new(&mut ps, &tiny_model(t), &specs).unwrap();
        let raw: Vec<Vec<f32>> = specs
            .iter()
            .map(|s| (0..b * t * s.dim).map(|_| r.random_range(-1.0..1.0)).collect())
            .collect();
        let batch = WindowBatch::from_raw(raw, specs.iter().map(|s| s.dim).collect(), b, t).unwrap();
        let draws = sample_draws(AblationMode::Full, b, t, specs.len(), &mut r).unwrap();
        let (_, goals) = joint_loss(&model, &ps, &batch, &draws, &cfg, None).unwrap();
        let loss_at = |ps: &ParamStore| -> f64 {
            let (terms, _) = joint_loss(&model, ps, &batch, &draws, &cfg, Some(&goals)).unwrap();
            terms.total.to_scalar::<f64>().unwrap()
        };

        let z = model.encoder.forward(&batch.tensors(&ps).unwrap()).unwrap();
        let norms: Vec<f64> = z.sqr().unwrap().sum(candle_core::D::Minus1).unwrap().sqrt().unwrap().flatten_all().unwrap().to_vec1().unwrap();
        for n in norms {
            out.max_norm_error = out.max_norm_error.max((n - 1.0).abs());
        }

        let (terms, _) = joint_loss(&model, &ps, &batch, &draws, &cfg, Some(&goals)).unwrap();
        let grads = terms.total.backward().unwrap();
        let names: Vec<String> = ps.vars().keys().cloned().collect();
        // One coordinate from each sub-network, the rest anywhere.
        let mut picks: Vec<String> = ["enc", "cmcn", "mhfp"]
            .iter()
            .filter_map(|p| {
                let group: Vec<&String> = names.iter().filter(|n| n.starts_with(p)).collect();
                (!group.is_empty()).then(|| group[r.random_range(0..group.len())].clone())
            })
            .collect();
        while picks.len() < coords_per_point {
            picks.push(names[r.random_range(0..names.len())].clone());
        }
        for name in picks {
            let var = ps.get(&name).unwrap().clone();
            let base = var.as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap();
            let i = r.random_range(0..base.len());
            let analytic = grads.get(var.as_tensor()).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap()[i];
            let h = 1e-5 * base[i].abs().max(1.0);
            let eval = |delta: f64| {
                let mut v = base.clone();
                v[i] += delta;
                var.set(&Tensor::from_vec(v, var.dims(), var.device()).unwrap()).unwrap();
                loss_at(&ps)
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            var.set(&Tensor::from_vec(base.clone(), var.dims(), var.device()).unwrap()).unwrap();
            let scale = analytic.abs().max(numeric.abs());
            // Below this magnitude both are dominated by difference noise.
            if scale > 1e-7 {
                out.max_rel_error = out.max_rel_error.max((analytic - numeric).abs() / scale);
            }
            out.checked += 1;
        }
    }
    out
}

fn det3(m: &[[f64; 3]; 3]) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

/// `n` draws of scalar `(X, Y, Z)` with covariance `cov`, and the closed-form
/// `I(X:Y|Z) = 1/2 ln(|C_xz| |C_yz| / (|C_z| |C|))`.
pub fn gaussian_triple(
    r: &mut ChaCha8Rng,
    n: usize,
    cov: [[f64; 3]; 3],
) -> (mcd::analysis::Samples, mcd::analysis::Samples, mcd::analysis::Samples, f64) {
    // Cholesky factor, lower triangular.
    let mut l = [[0.0f64; 3]; 3];
    for i in 0..3 {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[i][k] * l[j][k]).sum();
            l[i][j] = if i == j { (cov[i][i] - s).sqrt() } else { (cov[i][j] - s) / l[j][j] };
        }
    }
    let mut cols = [Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n)];
    for _ in 0..n {
        let e: [f64; 3] = [r.sample(StandardNormal), r.sample(StandardNormal), r.sample(StandardNormal)];
        for (i, col) in cols.iter_mut().enumerate() {
            col.push(vec![(0..=i).map(|k| l[i][k] * e[k]).sum::<f64>()]);
        }
    }
    let det2 = |a: usize, b: usize| cov[a][a] * cov[b][b] - cov[a][b] * cov[b][a];
    let truth = 0.5 * (det2(0, 2) * det2(1, 2) / (cov[2][2] * det3(&cov))).ln();
    let [x, y, z] = cols.map(|c| mcd::analysis::Samples::new(&c).unwrap());
    (x, y, z, truth)
}

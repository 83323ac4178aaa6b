mod common;

use candle_core::{DType, Tensor, Var, D};
use mcd::batch::WindowBatch;
use mcd::cmcn::{apply_mask, cmcn_loss, mask_batch, sample_mask, Cmcn, MaskPattern};
use mcd::dataset::{Dataset, Demonstration, ModalitySpec, ReconNorm};
use mcd::encoder::{label_dataset, ConceptEncoder, EncoderConfig};
use mcd::fusion::PredictorConfig;
use mcd::mhfp::Mhfp;
use mcd::nn::ParamStore;
use proptest::prelude::*;
use rand::Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn specs() -> Vec<ModalitySpec> {
    vec![
        ModalitySpec::new("a", 4, ReconNorm::L2),
        ModalitySpec::new("b", 3, ReconNorm::L2),
        ModalitySpec::new("c", 2, ReconNorm::L1),
    ]
}

fn enc_cfg(t_context: usize) -> EncoderConfig {
    EncoderConfig {
        embed_hidden: 16,
        width: 16,
        depth: 2,
        heads: 4,
        t_context,
    }
}

fn pred_cfg() -> PredictorConfig {
    PredictorConfig {
        hidden: 16,
        depth: 2,
        heads: 4,
    }
}

fn random_window(rng: &mut impl Rng, dims: &[usize], t: usize, scale: f32) -> Vec<Vec<f32>> {
    dims.iter()
        .map(|&d| (0..t * d).map(|_| rng.random_range(-scale..scale)).collect())
        .collect()
}

fn batch_of(window: &[Vec<f32>], t: usize) -> WindowBatch {
    WindowBatch::from_raw(window.to_vec(), specs().iter().map(|s| s.dim).collect(), 1, t).unwrap()
}

#[test]
fn latents_are_unit_norm_and_deterministic() {
    let mut r = common::rng(1);
    let dims: Vec<usize> = specs().iter().map(|s| s.dim).collect();
    for seed in 0..4 {
        let mut ps = ParamStore::new(DType::F32, seed);
        let enc = ConceptEncoder::new(&mut ps, "e", &enc_cfg(7), &specs()).unwrap();
        for i in 0..25 {
            // Include extreme and all-zero inputs.
            let scale = [1e-3, 1.0, 1e3][i % 3];
            let mut w = random_window(&mut r, &dims, 7, scale);
            if i == 0 {
                w.iter_mut().for_each(|v| v.fill(0.0));
            }
            let z = enc.encode(&ps, &w).unwrap();
            assert_eq!(z.latents.len(), 7);
            for l in &z.latents {
                let n = l.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
                assert!((n - 1.0).abs() < 1e-5, "norm {n}");
            }
            assert_eq!(z, enc.encode(&ps, &w).unwrap());
        }
    }
}

#[test]
fn encoder_attends_across_the_whole_window() {
    let mut r = common::rng(2);
    let dims: Vec<usize> = specs().iter().map(|s| s.dim).collect();
    let mut ps = ParamStore::new(DType::F32, 3);
    let enc = ConceptEncoder::new(&mut ps, "e", &enc_cfg(6), &specs()).unwrap();
    let w = random_window(&mut r, &dims, 6, 1.0);
    let base = enc.encode(&ps, &w).unwrap().latents;
    for tp in 0..6 {
        let mut p = w.clone();
        for (m, &d) in dims.iter().enumerate() {
            for k in 0..d {
                p[m][tp * d + k] += 0.5;
            }
        }
        let z = enc.encode(&ps, &p).unwrap().latents;
        for t in (0..6).filter(|&t| t != tp) {
            let diff: f32 = z[t].iter().zip(&base[t]).map(|(a, b)| (a - b).abs()).sum();
            assert!(diff > 1e-6, "z_{t} ignored frame {tp}");
        }
    }
}

#[test]
fn embedding_of_summed_modalities() {
    let mut ps = ParamStore::new(DType::F32, 0);
    let enc = ConceptEncoder::new(&mut ps, "e", &enc_cfg(4), &specs()).unwrap();
    let frame: Vec<Vec<f32>> = vec![vec![0.1, 0.2, 0.3, 0.4], vec![-1.0, 0.0, 1.0], vec![2.0, -2.0]];
    let refs: Vec<&[f32]> = frame.iter().map(|v| v.as_slice()).collect();
    let h = enc.embed_frame(&ps, &refs).unwrap();
    assert_eq!(h.len(), 16);
    // Each modality's embedding, obtained by zeroing the others and
    // subtracting the all-zero embedding, adds up to the joint one.
    let zero: Vec<Vec<f32>> = frame.iter().map(|v| vec![0.0; v.len()]).collect();
    let embed = |f: &[Vec<f32>]| {
        let r: Vec<&[f32]> = f.iter().map(|v| v.as_slice()).collect();
        enc.embed_frame(&ps, &r).unwrap()
    };
    let h0 = embed(&zero);
    let mut sum = h0.iter().map(|x| -2.0 * x).collect::<Vec<f32>>();
    for m in 0..3 {
        let mut only = zero.clone();
        only[m] = frame[m].clone();
        for (s, x) in sum.iter_mut().zip(embed(&only)) {
            *s += x;
        }
    }
    for (a, b) in sum.iter().zip(&h) {
        assert!((a - b).abs() < 1e-5);
    }
}

#[test]
fn labels_come_from_designated_windows() {
    let t_context = 60;
    let len = 100;
    let mut r = common::rng(4);
    let dims: Vec<usize> = specs().iter().map(|s| s.dim).collect();
    let demo = Demonstration {
        task_id: "t".into(),
        len,
        observations: random_window(&mut r, &dims, len, 1.0),
        actions: vec![0.0; len * 3],
        gt_segments: None,
    };
    let short = Demonstration {
        len: t_context,
        observations: random_window(&mut r, &dims, t_context, 1.0),
        actions: vec![0.0; t_context * 3],
        ..demo.clone()
    };
    let ds = Dataset {
        modalities: specs(),
        action_dim: 3,
        demos: vec![demo.clone(), short.clone()],
        seed: 0,
    };
    let cfg = EncoderConfig {
        t_context,
        ..enc_cfg(t_context)
    };
    let mut ps = ParamStore::new(DType::F32, 5);
    let enc = ConceptEncoder::new(&mut ps, "e", &cfg, &specs()).unwrap();
    let labels = label_dataset(&ds, &enc, &ps, "src").unwrap();
    labels.check_aligned(&ds).unwrap();

    let slice = |d: &Demonstration, start: usize| -> Vec<Vec<f32>> {
        dims.iter()
            .enumerate()
            .map(|(m, &dim)| d.observations[m][(start - 1) * dim..(start - 1 + t_context) * dim].to_vec())
            .collect()
    };
    let close = |a: &[f32], b: &[f32]| a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-5);
    let late = enc.encode(&ps, &slice(&demo, 41)).unwrap().latents;
    assert!(close(labels.latent(0, 50), &late[9]));
    assert!(close(labels.latent(0, 100), &late[59]));
    let early = enc.encode(&ps, &slice(&demo, 10)).unwrap().latents;
    assert!(close(labels.latent(0, 10), &early[0]));
    let whole = enc.encode(&ps, &slice(&short, 1)).unwrap().latents;
    for t in 1..=t_context {
        assert!(close(labels.latent(1, t), &whole[t - 1]));
    }
    for d in 0..2 {
        for t in 1..=labels.demo_len(d) {
            let n: f32 = labels.latent(d, t).iter().map(|x| x * x).sum::<f32>().sqrt();
            assert!((n - 1.0).abs() < 1e-5);
        }
    }
}

#[test]
fn mask_patterns_are_uniform() {
    let mut r = common::rng(6);
    let n = 70_000;
    let mut counts = [0usize; 7];
    for _ in 0..n {
        let p = sample_mask(3, &mut r).unwrap();
        assert!(!p.masked().is_empty());
        counts[p.index()] += 1;
    }
    let expected = n as f64 / 7.0;
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    let p = 1.0 - ChiSquared::new(6.0).unwrap().cdf(chi2);
    assert!(counts.iter().all(|&c| c > 0));
    assert!(p > 0.001, "chi2 {chi2} p {p} counts {counts:?}");
}

proptest! {
    #[test]
    fn masking_is_idempotent_and_matches_batched_form(
        frame in prop::collection::vec(prop::collection::vec(-5.0f32..5.0, 1..5), 1..5),
        bits in 1u32..16,
    ) {
        let m = frame.len();
        let masked: Vec<usize> = (0..m).filter(|i| bits & (1 << i) != 0).collect();
        prop_assume!(!masked.is_empty());
        let p = MaskPattern::new(&masked, m).unwrap();
        let once = apply_mask(&frame, &p);
        prop_assert_eq!(&apply_mask(&once, &p), &once);
        for (i, v) in once.iter().enumerate() {
            if p.is_masked(i) {
                prop_assert!(v.iter().all(|&x| x == 0.0));
            } else {
                prop_assert_eq!(v, &frame[i]);
            }
        }
        let ps = ParamStore::new(DType::F32, 0);
        let obs: Vec<Tensor> = frame.iter().map(|v| ps.tensor(v, &[1, 1, v.len()]).unwrap()).collect();
        let out = mask_batch(&obs, &[p], &ps).unwrap();
        for (o, want) in out.iter().zip(&once) {
            prop_assert_eq!(&o.flatten_all().unwrap().to_vec1::<f32>().unwrap(), want);
        }
    }

    #[test]
    fn reconstruction_loss_is_nonnegative_and_zero_only_at_targets(
        a in prop::collection::vec(-3.0f32..3.0, 12),
        b in prop::collection::vec(-3.0f32..3.0, 12),
    ) {
        let specs = vec![ModalitySpec::new("x", 2, ReconNorm::L2), ModalitySpec::new("y", 1, ReconNorm::L1)];
        let ps = ParamStore::new(DType::F64, 0);
        let t = |v: &[f32], d: usize| ps.tensor(v, &[2, v.len() / (2 * d), d]).unwrap();
        let p = [t(&a[..8], 2), t(&a[8..], 1)];
        let g = [t(&b[..8], 2), t(&b[8..], 1)];
        let l = cmcn_loss(&p, &g, &specs).unwrap().to_scalar::<f64>().unwrap();
        prop_assert!(l >= 0.0);
        prop_assert_eq!(l == 0.0, a == b);
        prop_assert_eq!(cmcn_loss(&p, &p, &specs).unwrap().to_scalar::<f64>().unwrap(), 0.0);
    }
}

#[test]
fn reconstruction_from_concepts_alone_depends_on_concepts() {
    let t = 5;
    let mut ps = ParamStore::new(DType::F32, 7);
    let cmcn = Cmcn::new(&mut ps, "c", &pred_cfg(), &specs(), 16, t).unwrap();
    let mut r = common::rng(8);
    let dims: Vec<usize> = specs().iter().map(|s| s.dim).collect();
    let wb = batch_of(&random_window(&mut r, &dims, t, 1.0), t);
    let obs = wb.tensors(&ps).unwrap();
    let masked = mask_batch(&obs, &[MaskPattern::all(3).unwrap()], &ps).unwrap();
    let z: Vec<f32> = (0..t * 16).map(|_| r.random_range(-1.0..1.0)).collect();
    let z = Var::from_tensor(&ps.tensor(&z, &[1, t, 16]).unwrap()).unwrap();
    let out = cmcn.reconstruct(&masked, z.as_tensor()).unwrap();
    for (o, &d) in out.iter().zip(&dims) {
        assert_eq!(o.dims(), &[1, t, d]);
    }
    let loss = cmcn_loss(&out, &obs, &specs()).unwrap();
    let g = loss.backward().unwrap();
    let gz = g.get(z.as_tensor()).unwrap().abs().unwrap().sum_all().unwrap().to_scalar::<f32>().unwrap();
    assert!(gz > 0.0);
}

#[test]
fn goal_predictor_is_causal() {
    let t = 6;
    let mut ps = ParamStore::new(DType::F64, 9);
    let mhfp = Mhfp::new(&mut ps, "h", &pred_cfg(), &specs(), 16, t).unwrap();
    let mut r = common::rng(10);
    let dims: Vec<usize> = specs().iter().map(|s| s.dim).collect();
    let wb = batch_of(&random_window(&mut r, &dims, t, 1.0), t);
    let obs: Vec<Var> = wb.tensors(&ps).unwrap().iter().map(|x| Var::from_tensor(x).unwrap()).collect();
    let z: Vec<f32> = (0..t * 16).map(|_| r.random_range(-1.0..1.0)).collect();
    let z = Var::from_tensor(&ps.tensor(&z, &[1, t, 16]).unwrap()).unwrap();
    let inputs: Vec<Tensor> = obs.iter().map(|v| v.as_tensor().clone()).collect();
    let out = mhfp.predict_goal(&ps, &inputs, z.as_tensor(), &[0.3]).unwrap();
    for pos in 0..t {
        let s = out
            .iter()
            .map(|o| o.narrow(1, pos, 1).unwrap().sum_all().unwrap())
            .reduce(|a, b| (a + b).unwrap())
            .unwrap();
        let g = s.backward().unwrap();
        let mut grads: Vec<Tensor> = obs.iter().map(|v| g.get(v.as_tensor()).unwrap().clone()).collect();
        grads.push(g.get(z.as_tensor()).unwrap().clone());
        for gt in grads {
            let per_pos = gt.abs().unwrap().sum(D::Minus1).unwrap().squeeze(0).unwrap().to_vec1::<f64>().unwrap();
            for (p, &v) in per_pos.iter().enumerate() {
                if p > pos {
                    assert_eq!(v, 0.0, "output {pos} depends on input {p}");
                }
            }
            assert!(per_pos[pos] > 0.0);
        }
    }
    let a = mhfp.predict_goal(&ps, &inputs, z.as_tensor(), &[0.0]).unwrap();
    let b = mhfp.predict_goal(&ps, &inputs, z.as_tensor(), &[1.0]).unwrap();
    assert_ne!(
        a[0].flatten_all().unwrap().to_vec1::<f64>().unwrap(),
        b[0].flatten_all().unwrap().to_vec1::<f64>().unwrap()
    );
    assert!(mhfp.predict_goal(&ps, &inputs, z.as_tensor(), &[1.5]).is_err());
}

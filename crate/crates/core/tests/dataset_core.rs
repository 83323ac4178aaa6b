use mcd::dataset::{
    labeling_window, make_windows, window_modality, Dataset, Demonstration, ModalitySpec, ReconNorm, Segment,
};
use mcd::Error;
use proptest::prelude::*;

fn demo_strategy(dims: Vec<usize>, action_dim: usize) -> impl Strategy<Value = Demonstration> {
    (1usize..30).prop_flat_map(move |len| {
        let obs: Vec<_> = dims
            .iter()
            .map(|&d| prop::collection::vec(-1e3f32..1e3, len * d))
            .collect();
        (
            "[a-z:>0-9]{1,12}",
            obs,
            prop::collection::vec(-1.0f32..1.0, len * action_dim),
            prop::collection::btree_set(2usize..=len.max(2), 0..4),
            any::<bool>(),
        )
            .prop_map(move |(task_id, observations, actions, cuts, with_segments)| {
                let mut bounds: Vec<usize> = vec![1];
                bounds.extend(cuts.into_iter().filter(|&c| c <= len));
                bounds.push(len + 1);
                let gt_segments = with_segments.then(|| {
                    bounds
                        .windows(2)
                        .enumerate()
                        .map(|(k, w)| Segment {
                            label: format!("s{k}"),
                            start: w[0],
                            end: w[1],
                        })
                        .collect()
                });
                Demonstration {
                    task_id,
                    len,
                    observations,
                    actions,
                    gt_segments,
                }
            })
    })
}

fn dataset_strategy() -> impl Strategy<Value = Dataset> {
    (prop::collection::vec(1usize..5, 1..4), 1usize..4, any::<u64>()).prop_flat_map(|(dims, action_dim, seed)| {
        let modalities: Vec<ModalitySpec> = dims
            .iter()
            .enumerate()
            .map(|(i, &d)| ModalitySpec::new(format!("m{i}"), d, if i % 2 == 0 { ReconNorm::L2 } else { ReconNorm::L1 }))
            .collect();
        prop::collection::vec(demo_strategy(dims, action_dim), 1..5).prop_map(move |demos| Dataset {
            modalities: modalities.clone(),
            action_dim,
            demos,
            seed,
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn serialization_round_trips_and_is_deterministic(ds in dataset_strategy()) {
        let bytes = ds.to_bytes().unwrap();
        prop_assert_eq!(&bytes, &ds.to_bytes().unwrap());
        let back = Dataset::from_bytes(&bytes).unwrap();
        prop_assert_eq!(&back, &ds);
    }

    #[test]
    fn corrupted_header_is_a_format_error(ds in dataset_strategy(), byte in 0usize..4) {
        let mut bytes = ds.to_bytes().unwrap();
        bytes[byte] ^= 0x20;
        prop_assert!(matches!(Dataset::from_bytes(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn each_timestep_has_one_designated_window(len in 1usize..120, t_context in 1usize..70) {
        let windows = make_windows(0, len, t_context);
        for t in 1..=len {
            let (start, offset) = labeling_window(len, t_context, t);
            let hits: Vec<_> = windows.iter().filter(|w| w.start == start).collect();
            prop_assert_eq!(hits.len(), 1);
            let w = hits[0];
            prop_assert_eq!(w.timestep_at(offset), t);
            prop_assert!(offset < t_context);
            prop_assert!(w.start >= 1);
            prop_assert!(w.start + w.length - w.padded_tail - 1 <= len);
        }
    }

    #[test]
    fn padded_frames_repeat_the_final_frame(len in 1usize..20, extra in 1usize..20, dim in 1usize..4) {
        let t_context = len + extra;
        let observations = vec![(0..len * dim).map(|i| i as f32 * 0.37 - 1.0).collect()];
        let demo = Demonstration {
            task_id: "x".into(),
            len,
            observations,
            actions: vec![0.0; len],
            gt_segments: None,
        };
        let windows = make_windows(0, len, t_context);
        prop_assert_eq!(windows.len(), 1);
        prop_assert_eq!(windows[0].padded_tail, extra);
        let frames = window_modality(&demo, &windows[0], 0);
        let last = demo.obs(0, len);
        for pos in len..t_context {
            prop_assert_eq!(&frames[pos * dim..(pos + 1) * dim], last);
        }
    }
}

#[test]
fn labeling_window_examples() {
    assert_eq!(labeling_window(100, 60, 10), (10, 0));
    assert_eq!(labeling_window(100, 60, 50), (41, 9));
    assert_eq!(labeling_window(100, 60, 100), (41, 59));
    let w = make_windows(0, 30, 60);
    assert_eq!(w.len(), 1);
    assert_eq!(w[0].padded_tail, 30);
    assert_eq!((w[0].timestep_at(29), w[0].timestep_at(59)), (30, 30));
}

#[test]
fn file_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = mcd::env::generate_demonstrations(&mcd::env::EnvSpec::default(), 5, 3).unwrap().dataset;
    let p = tmp.path().join("d.mcds");
    ds.write(&p).unwrap();
    let first = std::fs::read(&p).unwrap();
    assert_eq!(&first[..4], b"MCDS");
    assert_eq!(Dataset::read(&p).unwrap(), ds);
    ds.write(&p).unwrap();
    assert_eq!(first, std::fs::read(&p).unwrap());
}

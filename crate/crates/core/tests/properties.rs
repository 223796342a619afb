//! Invariants checked over generated inputs.

use egoaction::dataset::{loso_splits, DatasetManifest, LabelMap, VideoRecord};
use egoaction::ego::Homography;
use egoaction::flow::{decode_flo, encode_flo, flow_to_color, FlowField};
use egoaction::image::Image;
use egoaction::model::{argmax, fuse_steps};
use egoaction::preprocess::{compute_dataset_stats, make_splices, normalize, SpliceMode};
use egoaction::streams::StreamKind;
use egoaction::training::StreamSchedule;
use nalgebra::Matrix3;
use proptest::prelude::*;

fn flow_field() -> impl Strategy<Value = FlowField> {
    (1usize..12, 1usize..12).prop_flat_map(|(w, h)| {
        prop::collection::vec((-100.0f32..100.0, -100.0f32..100.0), w * h).prop_map(move |uv| {
            FlowField::new(
                w,
                h,
                uv.iter().map(|p| f64::from(p.0)).collect(),
                uv.iter().map(|p| f64::from(p.1)).collect(),
            )
            .unwrap()
        })
    })
}

proptest! {
    #[test]
    fn flo_round_trip_is_bit_exact(f in flow_field()) {
        let bytes = encode_flo(&f);
        let back = decode_flo(&bytes).unwrap();
        prop_assert_eq!(&back, &f);
        prop_assert_eq!(encode_flo(&back), bytes);
    }

    #[test]
    fn flow_color_depends_only_on_flow_over_norm(f in flow_field(), e in -3i32..4, norm in 0.5f64..50.0) {
        // Power-of-two scales keep the division exact.
        let k = 2f64.powi(e);
        let scaled = FlowField::from_fn(f.width(), f.height(), |x, y| {
            let (u, v) = f.get(x, y);
            (u * k, v * k)
        });
        prop_assert_eq!(flow_to_color(&f, Some(norm)), flow_to_color(&scaled, Some(norm * k)));
        if f.max_magnitude() > 0.0 {
            prop_assert_eq!(flow_to_color(&f, None), flow_to_color(&scaled, None));
        }
    }

    #[test]
    fn loso_holds_out_each_subject_once(assign in prop::collection::vec(0usize..5, 1..20)) {
        let labels = LabelMap::new(vec!["a".into(), "b".into()]).unwrap();
        let videos: Vec<VideoRecord> = assign
            .iter()
            .enumerate()
            .map(|(i, &s)| VideoRecord {
                video_id: format!("v{i}"),
                subject: format!("S{s}"),
                frame_paths: vec![format!("v{i}/0.png")],
                frame_labels: vec![i % 2],
            })
            .collect();
        let manifest = DatasetManifest::new("p", labels, videos).unwrap();
        if manifest.subjects().len() < 2 {
            prop_assert!(loso_splits(&manifest).is_err());
            return Ok(());
        }
        let splits = loso_splits(&manifest).unwrap();
        prop_assert_eq!(splits.len(), manifest.subjects().len());
        let mut tested = 0;
        for s in &splits {
            prop_assert_eq!(s.train_videos.len() + s.test_videos.len(), assign.len());
            for id in &s.test_videos {
                prop_assert_eq!(&manifest.video(id).unwrap().subject, &s.held_out_subject);
            }
            for id in &s.train_videos {
                prop_assert_ne!(&manifest.video(id).unwrap().subject, &s.held_out_subject);
            }
            tested += s.test_videos.len();
        }
        prop_assert_eq!(tested, assign.len());
    }

    #[test]
    fn homography_is_scale_invariant(
        m in prop::array::uniform9(-2.0f64..2.0),
        k in prop_oneof![-10.0f64..-0.1, 0.1f64..10.0],
    ) {
        let mut h = Matrix3::from_row_slice(&m);
        h[(2, 2)] = 1.0 + m[8].abs();
        let a = Homography::from_matrix(h);
        let b = Homography::from_matrix(h * k);
        prop_assert!(a.max_abs_diff(&b) < 1e-9 * (1.0 + a.matrix().abs().max()));
        prop_assert_eq!(a.matrix()[(2, 2)], 1.0);
    }

    #[test]
    fn shared_step_argmax_survives_fusion(
        raw in prop::collection::vec(prop::collection::vec(0.01f64..1.0, 5), 1..8),
        winner in 0usize..5,
        w in prop::collection::vec(0.01f64..1.0, 8),
    ) {
        // Force every step to favor the same class.
        let per_step: Vec<Vec<f64>> = raw
            .iter()
            .map(|r| {
                let mut p = r.clone();
                p[winner] = p.iter().sum::<f64>();
                let s: f64 = p.iter().sum();
                p.iter().map(|x| x / s).collect()
            })
            .collect();
        let ws: f64 = w[..per_step.len()].iter().sum();
        let weights: Vec<f64> = w[..per_step.len()].iter().map(|x| x / ws).collect();
        let fused = fuse_steps(&per_step, &weights).unwrap();
        prop_assert_eq!(argmax(&fused), winner);
        prop_assert!((fused.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn learning_rate_never_increases(lr in 1e-5f64..1.0, iters in prop::collection::vec(0usize..100_000, 2..20)) {
        for kind in [StreamKind::Rgb, StreamKind::Flow] {
            for s in [StreamSchedule::paper(kind), StreamSchedule::desk(kind)] {
                let s = s.with_base_lr(lr);
                let mut it = iters.clone();
                it.sort_unstable();
                for stage in [s.encoder, s.lstm] {
                    for pair in it.windows(2) {
                        prop_assert!(stage.learning_rate(pair[1]) <= stage.learning_rate(pair[0]));
                    }
                    prop_assert!((stage.learning_rate(0) - lr).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn normalized_frames_have_zero_mean_unit_variance(
        frames in prop::collection::vec(prop::collection::vec(0.0f32..1.0, 3 * 16), 2..6),
    ) {
        let imgs: Vec<Image> = frames.iter().map(|d| Image::new(3, 4, 4, d.clone()).unwrap()).collect();
        let stats = compute_dataset_stats(imgs.iter().cloned().map(Ok)).unwrap();
        prop_assume!(stats.variance.iter().all(|&v| v > 1e-4));
        let mut all = vec![Vec::new(); 3];
        for img in &imgs {
            let mut x = img.clone();
            normalize(&mut x, &stats).unwrap();
            for (c, ch) in all.iter_mut().enumerate() {
                ch.extend(x.plane(c).iter().map(|&v| f64::from(v)));
            }
        }
        for ch in &all {
            let n = ch.len() as f64;
            let mean = ch.iter().sum::<f64>() / n;
            let var = ch.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            prop_assert!(mean.abs() < 1e-4, "mean {}", mean);
            prop_assert!((var - 1.0).abs() < 1e-3, "variance {}", var);
        }
    }

    #[test]
    fn splices_cover_every_frame(
        labels in prop::collection::vec(0usize..4, 1..60),
        half in 0usize..7,
        stride in 1usize..5,
    ) {
        let window = 2 * half + 1;
        let n = labels.len();
        let train = make_splices(&labels, window, SpliceMode::Train { stride }).unwrap();
        prop_assert_eq!(train.len(), n.div_ceil(stride));
        for s in &train {
            prop_assert_eq!(s.frame_indices.len(), window);
            prop_assert_eq!(s.frame_indices[half], s.center);
            prop_assert_eq!(s.label, labels[s.center]);
        }
        let tiles = make_splices(&labels, window, SpliceMode::Eval).unwrap();
        prop_assert_eq!(tiles.len(), n.div_ceil(window).max(1));
        let mut covered = vec![false; n];
        for s in &tiles {
            prop_assert_eq!(s.frame_indices.len(), window);
            for &i in &s.frame_indices {
                covered[i] = true;
            }
        }
        prop_assert!(covered.iter().all(|&c| c));
    }
}

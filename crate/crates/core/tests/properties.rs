//! Property tests for the structural invariants of each module.

use std::collections::BTreeSet;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use splatfield::decoder::{decode, resize_bilinear, ChannelDecoder};
use splatfield::gsplat::{decode_cloud, encode_cloud};
use splatfield::oracle::{make_oracle_scene, teacher_render, Codebook};
use splatfield::projection::project_cloud;
use splatfield::prompt::{
    apply_edit, score_gaussians, select, select_hard, select_hybrid, select_soft, Appearance, EditOp, EditSelection,
    QuerySet, ScoreMatrix, SelectionMode,
};
use splatfield::raster::{render, trace_pixel, RenderSettings};
use splatfield::scene::{logit, Gaussian, GaussianCloud};
use splatfield::session::{EditRequest, SelectRequest, Session};
use splatfield::trainer::adam::{AdamState, Moments};
use splatfield::trainer::{initial_model, TrainConfig, Trainer};
use splatfield::viz::{fit_pca, miou, visualize_features};
use splatfield::{CameraView, FeatureMap};

fn cloud_from_seed(seed: u64, count: usize, dim: usize) -> GaussianCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gaussians = (0..count)
        .map(|_| Gaussian {
            position: [0; 3].map(|_| rng.random_range(-0.7f32..0.7)),
            rotation: [0; 4].map(|_| rng.random_range(-1.0f32..1.0)),
            log_scale: [0; 3].map(|_| rng.random_range(0.02f32..0.3).ln()),
            opacity_logit: logit(rng.random_range(0.05..0.99)) as f32,
            color: [0; 3].map(|_| rng.random_range(0.0f32..1.0)),
            feature: (0..dim).map(|_| rng.random_range(-1.0f32..1.0)).collect(),
        })
        .collect();
    let mut cloud = GaussianCloud::from_gaussians(dim, gaussians).unwrap();
    cloud.normalize_rotations();
    cloud
}

fn view_from_seed(seed: u64, w: usize, h: usize) -> CameraView {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7777);
    CameraView::orbit(rng.random_range(0.0..6.28), rng.random_range(-1.3..1.3), rng.random_range(1.8..4.0), w, h).unwrap()
}

fn bits(v: &[f32]) -> Vec<u32> {
    v.iter().map(|x| x.to_bits()).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn gsplat_roundtrip_bit_exact(seed: u64, count in 1usize..40, dim in 1usize..9, with_decoder: bool) {
        let cloud = cloud_from_seed(seed, count, dim);
        let decoder = with_decoder.then(|| ChannelDecoder::new_random(dim, dim + 3, seed));
        let bytes = encode_cloud(&cloud, decoder.as_ref()).unwrap();
        let (back, dec_back) = decode_cloud(&bytes).unwrap();
        prop_assert_eq!(bits(&back.positions.concat()), bits(&cloud.positions.concat()));
        prop_assert_eq!(bits(&back.rotations.concat()), bits(&cloud.rotations.concat()));
        prop_assert_eq!(bits(&back.log_scales.concat()), bits(&cloud.log_scales.concat()));
        prop_assert_eq!(bits(&back.opacity_logits), bits(&cloud.opacity_logits));
        prop_assert_eq!(bits(&back.colors.concat()), bits(&cloud.colors.concat()));
        prop_assert_eq!(bits(&back.features), bits(&cloud.features));
        prop_assert_eq!(dec_back, decoder);
        prop_assert_eq!(encode_cloud(&back, None).unwrap().len() <= bytes.len(), true);
    }

    #[test]
    fn projected_inverse_covariance(seed: u64, count in 1usize..60) {
        let cloud = cloud_from_seed(seed, count, 2);
        let view = view_from_seed(seed, 40, 32);
        let proj = project_cloud(&cloud, &view);
        for p in &proj.projected {
            let id = p.inv_cov2d * p.cov2d;
            prop_assert!((id - nalgebra::Matrix2::identity()).abs().max() < 1e-5);
            prop_assert!(p.radius >= 1.0);
            prop_assert!(p.depth > 0.01);
        }
    }

    #[test]
    fn binning_invariant_to_input_order(seed: u64, count in 2usize..50) {
        let cloud = cloud_from_seed(seed, count, 1);
        let view = view_from_seed(seed, 48, 40);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut perm: Vec<usize> = (0..count).collect();
        for i in (1..count).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let shuffled = GaussianCloud::from_gaussians(1, perm.iter().map(|&i| cloud.get(i)).collect()).unwrap();
        let (_, a) = render(&cloud, &view, &RenderSettings::default()).unwrap();
        let (_, b) = render(&shuffled, &view, &RenderSettings::default()).unwrap();
        for t in 0..a.binning.tiles.len() {
            let set_a: BTreeSet<usize> = a.binning.tiles[t].iter().map(|&k| a.projection.projected[k as usize].source_index).collect();
            let set_b: BTreeSet<usize> = b.binning.tiles[t].iter().map(|&k| perm[b.projection.projected[k as usize].source_index]).collect();
            prop_assert_eq!(set_a, set_b);
            let depths: Vec<f64> = a.binning.tiles[t].iter().map(|&k| a.projection.projected[k as usize].depth).collect();
            prop_assert!(depths.windows(2).all(|w| w[0] <= w[1]));
        }
    }

    #[test]
    fn compositing_identities(seed: u64, count in 1usize..50) {
        let cloud = cloud_from_seed(seed, count, 3);
        let view = view_from_seed(seed, 24, 20);
        let bg = [0.1, 0.5, 0.9];
        let (out, state) = render(&cloud, &view, &RenderSettings::with_background(bg)).unwrap();
        for y in 0..view.height {
            for x in 0..view.width {
                let p = y * view.width + x;
                let trace = trace_pixel(&cloud, &state, x, y);
                prop_assert!(trace.windows(2).all(|w| w[1].transmittance <= w[0].transmittance));
                let sum: f64 = trace.iter().map(|c| c.alpha * c.transmittance).sum();
                prop_assert!((sum - out.alpha[p]).abs() <= 1e-6);
                prop_assert!((0.0..=1.0).contains(&out.alpha[p]));
                let mut rgb = bg;
                for c in trace.iter().rev() {
                    for k in 0..3 {
                        rgb[k] = c.alpha * cloud.colors[c.source_index][k] as f64 + (1.0 - c.alpha) * rgb[k];
                    }
                }
                for k in 0..3 {
                    prop_assert!((rgb[k] - out.image.data[3 * p + k]).abs() <= 1e-6);
                }
            }
        }
    }

    #[test]
    fn fused_pass_matches_separate_passes(seed: u64, count in 1usize..40) {
        let cloud = cloud_from_seed(seed, count, 4);
        let view = view_from_seed(seed, 32, 24);
        let (full, _) = render(&cloud, &view, &RenderSettings::default()).unwrap();
        let mut no_feat = cloud.clone();
        no_feat.features.iter_mut().for_each(|f| *f = 0.0);
        let mut no_color = cloud.clone();
        no_color.colors.iter_mut().for_each(|c| *c = [0.0; 3]);
        let (a, _) = render(&no_feat, &view, &RenderSettings::default()).unwrap();
        let (b, _) = render(&no_color, &view, &RenderSettings::default()).unwrap();
        prop_assert_eq!(&a.image, &full.image);
        prop_assert_eq!(&b.feature_map, &full.feature_map);
        prop_assert_eq!(&a.contributors, &full.contributors);
        prop_assert_eq!(&b.contributors, &full.contributors);
        // Deterministic.
        let (again, _) = render(&cloud, &view, &RenderSettings::default()).unwrap();
        prop_assert_eq!(again.image, full.image);
    }

    #[test]
    fn rgb_independent_of_feature_dim(seed: u64, count in 1usize..40, dim in 1usize..6) {
        let cloud = cloud_from_seed(seed, count, dim);
        let wide = GaussianCloud::from_gaussians(
            2 * dim,
            (0..count).map(|i| {
                let mut g = cloud.get(i);
                g.feature = g.feature.repeat(2);
                g
            }).collect(),
        ).unwrap();
        let view = view_from_seed(seed, 32, 32);
        let (a, _) = render(&cloud, &view, &RenderSettings::default()).unwrap();
        let (b, _) = render(&wide, &view, &RenderSettings::default()).unwrap();
        prop_assert_eq!(a.image, b.image);
    }

    #[test]
    fn decode_is_linear(seed: u64, a in -3.0f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut map = |h, w| FeatureMap::from_data(h, w, 4, (0..h * w * 4).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let (x, y) = (map(5, 6), map(5, 6));
        let mut dec = ChannelDecoder::new_random(4, 7, seed);
        dec.bias.iter_mut().for_each(|b| *b = 0.0);
        let mut axy = x.clone();
        for (v, w) in axy.data.iter_mut().zip(&y.data) {
            *v = a * *v + w;
        }
        let lhs = decode(&axy, &dec).unwrap();
        let (dx, dy) = (decode(&x, &dec).unwrap(), decode(&y, &dec).unwrap());
        for i in 0..lhs.data.len() {
            prop_assert!((lhs.data[i] - (a * dx.data[i] + dy.data[i])).abs() <= 1e-6);
        }
    }

    #[test]
    fn resize_preserves_constants(h in 1usize..12, w in 1usize..12, oh in 1usize..20, ow in 1usize..20, v in -5.0f64..5.0) {
        let map = FeatureMap::filled(h, w, &[v, -v, 0.25]);
        let out = resize_bilinear(&map, oh, ow).unwrap();
        prop_assert!(out.data.chunks_exact(3).all(|p| p == [v, -v, 0.25]));
    }

    #[test]
    fn adam_zero_gradient_is_identity(seed: u64, rows in 1usize..20, step in 1u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = Moments::zeros(rows, 3);
        let mut params: Vec<f32> = (0..rows * 3).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        let before = params.clone();
        m.update(&mut params, &vec![0.0; rows * 3], 0.1, step);
        prop_assert_eq!(bits(&params), bits(&before));
    }

    #[test]
    fn adam_reindex_keeps_survivor_moments(seed: u64, rows in 1usize..30) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut state = AdamState::new(rows, 2, None);
        let mut params: Vec<f32> = vec![0.0; rows * 3];
        let grads: Vec<f64> = (0..rows * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
        state.position.update(&mut params, &grads, 0.01, 1);
        let keep: Vec<bool> = (0..rows).map(|_| rng.random_bool(0.6)).collect();
        let survivors: Vec<(Vec<f64>, Vec<f64>)> = (0..rows)
            .filter(|&i| keep[i])
            .map(|i| { let (a, b) = state.position.row(i); (a.to_vec(), b.to_vec()) })
            .collect();
        state.retain_gaussians(&keep);
        state.push_zero_gaussians(2);
        prop_assert_eq!(state.num_gaussians(), survivors.len() + 2);
        for (i, (a, b)) in survivors.iter().enumerate() {
            let (ra, rb) = state.position.row(i);
            prop_assert_eq!(ra, &a[..]);
            prop_assert_eq!(rb, &b[..]);
        }
        let (za, zb) = state.feature.row(survivors.len());
        prop_assert!(za.iter().chain(zb).all(|&v| v == 0.0));
    }

    #[test]
    fn selection_hybrid_is_union(seed: u64, rows in 1usize..40, cols in 2usize..6, th in 0.0f64..=1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut scores = Vec::new();
        for _ in 0..rows {
            let raw: Vec<f64> = (0..cols).map(|_| rng.random_range(0.0..1.0)).collect();
            let s: f64 = raw.iter().sum();
            scores.extend(raw.iter().map(|v| v / s));
        }
        let m = ScoreMatrix { labels: (0..cols).map(|c| c.to_string()).collect(), rows, cols, scores };
        let targets: Vec<usize> = (0..cols - 1).filter(|_| rng.random_bool(0.5)).collect();
        let targets = if targets.is_empty() { vec![0] } else { targets };
        let (s, h, y) = (select_soft(&m, &targets, th), select_hard(&m, &targets), select_hybrid(&m, &targets, th));
        let union: Vec<bool> = s.mask.iter().zip(&h.mask).map(|(a, b)| a | b).collect();
        prop_assert_eq!(y.mask, union);
    }

    #[test]
    fn selection_scale_invariant(seed: u64, scale in 1e-3f32..1e3, th in 0.0f64..=1.0) {
        let codebook = Codebook::orthonormal(3, 8, seed).unwrap();
        let cloud = cloud_from_seed(seed, 30, 8);
        let mut big = cloud.clone();
        big.features.iter_mut().for_each(|f| *f *= scale);
        let queries = QuerySet::from_labels(&codebook, &[codebook.labels[1].clone()]).unwrap();
        let a = score_gaussians(&cloud, None, &queries).unwrap();
        let b = score_gaussians(&big, None, &queries).unwrap();
        for (x, y) in a.scores.iter().zip(&b.scores) {
            prop_assert!((x - y).abs() < 1e-6);
        }
        for r in 0..a.rows {
            prop_assert!((a.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-5);
        }
        for mode in [SelectionMode::Soft { th }, SelectionMode::Hard, SelectionMode::Hybrid { th }] {
            prop_assert_eq!(select(&a, &queries.targets, mode), select(&b, &queries.targets, mode));
        }
    }

    #[test]
    fn edits_touch_only_opacity_or_color(seed: u64, count in 1usize..40, op_kind in 0usize..5) {
        let cloud = cloud_from_seed(seed, count, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sel = EditSelection { mask: (0..count).map(|_| rng.random_bool(0.5)).collect(), mode: SelectionMode::Hard };
        let op = [
            EditOp::Extract,
            EditOp::Delete,
            EditOp::Recolor { appearance: Appearance::Set { rgb: [0.2, 0.3, 0.4] } },
            EditOp::Recolor { appearance: Appearance::Multiply { rgb: [2.0, 0.5, 1.0] } },
            EditOp::Recolor { appearance: Appearance::Grayscale },
        ][op_kind];
        let out = apply_edit(&cloud, &sel, op).unwrap();
        prop_assert_eq!(&out.positions, &cloud.positions);
        prop_assert_eq!(&out.rotations, &cloud.rotations);
        prop_assert_eq!(&out.log_scales, &cloud.log_scales);
        prop_assert_eq!(&out.features, &cloud.features);
        for i in 0..count {
            if !sel.mask[i] && matches!(op, EditOp::Recolor { .. }) {
                prop_assert_eq!(out.colors[i], cloud.colors[i]);
            }
        }
    }

    #[test]
    fn miou_symmetric(seed: u64, len in 1usize..200, classes in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a: Vec<u8> = (0..len).map(|_| rng.random_range(0..classes) as u8).collect();
        let b: Vec<u8> = (0..len).map(|_| rng.random_range(0..classes) as u8).collect();
        prop_assert_eq!(miou(&a, &b, classes).unwrap(), miou(&b, &a, classes).unwrap());
    }

    #[test]
    fn codebook_near_orthogonal_unit(seed: u64, k in 2usize..8) {
        let cb = Codebook::orthonormal(k, 4 * k, seed).unwrap();
        for i in 0..cb.len() {
            let e = cb.embedding(i);
            prop_assert!((e.iter().map(|v| v * v).sum::<f64>() - 1.0).abs() < 1e-6);
            for j in 0..i {
                let cos: f64 = e.iter().zip(cb.embedding(j)).map(|(a, b)| a * b).sum();
                prop_assert!(cos <= 0.3);
            }
        }
        prop_assert_eq!(Codebook::parse(&cb.to_text()).unwrap(), cb);
    }

    #[test]
    fn pca_view_invariant_to_rotation(seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, w, d) = (10, 12, 5);
        // Anisotropic data so the leading components are well separated.
        let spread = [3.0, 2.0, 1.2, 0.3, 0.1];
        let map = FeatureMap::from_data(h, w, d, (0..h * w * d).map(|i| spread[i % d] * rng.random_range(-1.0..1.0)).collect()).unwrap();
        let q = nalgebra::DMatrix::<f64>::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0)).qr().q();
        let mut rotated = map.clone();
        for px in rotated.data.chunks_exact_mut(d) {
            let v = &q * nalgebra::DVector::from_column_slice(px);
            px.copy_from_slice(v.as_slice());
        }
        let a = visualize_features(&map, &fit_pca(&map, 1).unwrap()).unwrap();
        let b = visualize_features(&rotated, &fit_pca(&rotated, 1).unwrap()).unwrap();
        for k in 0..3 {
            let ca: Vec<f64> = a.data.iter().skip(k).step_by(3).copied().collect();
            let cb: Vec<f64> = b.data.iter().skip(k).step_by(3).copied().collect();
            let same = ca.iter().zip(&cb).all(|(x, y)| (x - y).abs() < 1e-3);
            let flipped = ca.iter().zip(&cb).all(|(x, y)| (x - (1.0 - y)).abs() < 1e-3);
            prop_assert!(same || flipped, "channel {} differs", k);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn teacher_features_bounded(seed in 0u64..1000) {
        let scene = make_oracle_scene(3, 20, 12, seed).unwrap();
        let t = teacher_render(&scene, &scene.views[(seed % 20) as usize].resized(24, 24));
        for f in t.feature.data.chunks_exact(12) {
            prop_assert!(f.iter().map(|v| v * v).sum::<f64>().sqrt() <= 1.0 + 1e-9);
        }
    }

    #[test]
    fn trainer_step_keeps_unit_quaternions(seed in 0u64..1000) {
        let scene = make_oracle_scene(2, 15, 8, seed).unwrap();
        let ds = splatfield::oracle::Dataset::from_scene(&scene, None);
        let views = ds.train_views(true);
        let cfg = TrainConfig { init_count: 200, feature_dim: 4, seed, ..TrainConfig::default() };
        let (cloud, dec) = initial_model(&views, &cfg).unwrap();
        let mut t = Trainer::new(cloud, dec, cfg).unwrap();
        for i in 0..3 {
            let m = t.step(&views, i).unwrap();
            prop_assert!(m.total_loss.is_finite());
        }
        for q in &t.cloud.rotations {
            let n = q.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
            prop_assert!((n - 1.0).abs() < 1e-6);
        }
        for s in &t.cloud.log_scales {
            prop_assert!(s.iter().all(|v| v.exp() > 0.0 && v.is_finite()));
        }
    }

    #[test]
    fn undo_restores_bit_exact(seed in 0u64..1000, ops in proptest::collection::vec((0usize..4, 1usize..3), 1..6)) {
        let scene = make_oracle_scene(2, 15, 8, seed).unwrap();
        let original = scene.cloud.clone();
        let mut s = Session::new(scene.cloud, None, Some(scene.codebook)).unwrap();
        for (op, label) in &ops {
            let op = ["delete", "extract", "recolor:1,0,0", "grayscale"][*op];
            s.edit(&EditRequest {
                op: op.into(),
                target: SelectRequest { labels: Some(vec![format!("class{}", (b'A' + *label as u8 - 1) as char)]), ..Default::default() },
            }).unwrap();
        }
        for _ in &ops {
            prop_assert!(s.undo().is_some());
        }
        prop_assert_eq!(s.working(), &original);
    }
}

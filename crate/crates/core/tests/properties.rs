//! Property tests across module boundaries.

use image::{Rgb, RgbImage};
use proptest::prelude::*;

use pedcross::cropper::{
    dynamic_crop, dynamic_window, flip_horizontal, letterbox_geometry, letterbox_to_model_input, static_crop,
    CropConfig, CropMode,
};
use pedcross::evaluator::auc;
use pedcross::explainer::{rollout, Matrix};
use pedcross::trackdata::{load_manifest, write_manifest, BoundingBox, CrossingLabel, Manifest, PedestrianTrack, TrackFrame};

fn track_strategy() -> impl Strategy<Value = PedestrianTrack> {
    (
        "[a-z][a-z0-9_]{0,11}",
        any::<bool>(),
        1usize..6,
        0.0f64..500.0,
        0.0f64..300.0,
        1.0f64..80.0,
        1.0f64..120.0,
        0i64..40,
    )
        .prop_map(|(id, crossing, n, x, y, w, h, extra)| {
            let frames: Vec<TrackFrame> = (0..n as u64)
                .map(|i| TrackFrame {
                    idx: i,
                    path: format!("frames/{id}/{i:04}.png"),
                    bbox: BoundingBox::new(x + i as f64 * 0.37, y, x + i as f64 * 0.37 + w, y + h),
                })
                .collect();
            PedestrianTrack {
                track_id: id,
                label: if crossing { CrossingLabel::Crossing } else { CrossingLabel::NonCrossing },
                // crossing tracks end before the event; non-crossing ones end on it
                event_frame: if crossing { n as i64 + extra } else { n as i64 - 1 },
                image_size: [640, 480],
                frames,
                split: Default::default(),
            }
        })
}

fn frame(w: u32, h: u32, seed: u32) -> RgbImage {
    RgbImage::from_fn(w, h, |x, y| {
        let v = x.wrapping_mul(2654435761).wrapping_add(y.wrapping_mul(40503)).wrapping_add(seed);
        Rgb([v as u8, (v >> 8) as u8, (v >> 16) as u8])
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn manifest_survives_a_disk_round_trip(tracks in prop::collection::vec(track_strategy(), 1..8)) {
        let mut seen = std::collections::HashSet::new();
        let tracks: Vec<_> = tracks.into_iter().filter(|t| seen.insert(t.track_id.clone())).collect();
        let m = Manifest::new(tracks).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.jsonl");
        write_manifest(&m, &path).unwrap();
        prop_assert_eq!(load_manifest(&path).unwrap(), m);
    }

    #[test]
    fn static_crop_shape_is_fixed_and_interior_is_copied(
        fw in 8u32..64, fh in 8u32..64,
        cx in -10.0f64..70.0, cy in -10.0f64..70.0,
        bw in 1.0f64..20.0, bh in 1.0f64..20.0,
        wc in 2u32..48, hc in 2u32..48,
    ) {
        let img = frame(fw, fh, 7);
        let bbox = BoundingBox::new(cx - bw / 2.0, cy - bh / 2.0, cx + bw / 2.0, cy + bh / 2.0);
        let cfg = CropConfig { mode: CropMode::Static, static_size: (wc, hc), pad_value: [1, 2, 3], ..CropConfig::default() };
        let Ok(out) = static_crop(&img, &bbox, &cfg) else {
            // only boxes entirely outside the frame are rejected
            prop_assert!(bbox.x2 <= 0.0 || bbox.y2 <= 0.0 || bbox.x1 >= fw as f64 || bbox.y1 >= fh as f64);
            return Ok(());
        };
        prop_assert_eq!(out.dimensions(), (wc, hc));
        let left = (cx - wc as f64 / 2.0).round() as i64;
        let top = (cy - hc as f64 / 2.0).round() as i64;
        for (x, y, p) in out.enumerate_pixels() {
            let (sx, sy) = (left + x as i64, top + y as i64);
            if sx >= 0 && sy >= 0 && sx < fw as i64 && sy < fh as i64 {
                prop_assert_eq!(p, img.get_pixel(sx as u32, sy as u32));
            } else {
                prop_assert_eq!(p.0, [1, 2, 3]);
            }
        }
    }

    #[test]
    fn dynamic_window_contains_the_box(
        x1 in -20.0f64..100.0, y1 in -20.0f64..100.0,
        bw in 0.5f64..60.0, bh in 0.5f64..60.0,
        margin in 0.0f64..0.3,
    ) {
        let bbox = BoundingBox::new(x1, y1, x1 + bw, y1 + bh);
        let cfg = CropConfig { mode: CropMode::Dynamic, dynamic_margin_fraction: margin, ..CropConfig::default() };
        let w = dynamic_window(&bbox, &cfg);
        // rounding may shave at most half a pixel off the grown box
        prop_assert!(w.left as f64 <= x1.round().max(x1 - margin * bh + 0.5));
        prop_assert!(w.right() as f64 >= (x1 + bw).round().min(x1 + bw + margin * bh - 0.5));
        prop_assert!(w.top as f64 <= y1 - margin * bh + 0.5);
        prop_assert!(w.bottom() as f64 >= y1 + bh + margin * bh - 0.5);
        if margin == 0.0 {
            prop_assert_eq!((w.left, w.top), (x1.round() as i64, y1.round() as i64));
        }
    }

    #[test]
    fn static_crop_commutes_with_flipping(
        fw in 8u32..48, fh in 8u32..48,
        cx in 0i32..48, cy in 0i32..48, half in 1u32..10, side in 1u32..16,
    ) {
        // integer centers and even windows keep the rounding symmetric
        prop_assume!((cx as u32) < fw && (cy as u32) < fh);
        let img = frame(fw, fh, 3);
        let (cx, cy, h) = (cx as f64, cy as f64, half as f64);
        let bbox = BoundingBox::new(cx - h, cy - h, cx + h, cy + h);
        let cfg = CropConfig { mode: CropMode::Static, static_size: (2 * side, 2 * side), ..CropConfig::default() };
        let a = flip_horizontal(&static_crop(&img, &bbox, &cfg).unwrap());
        let b = static_crop(&flip_horizontal(&img), &bbox.flip_horizontal(fw as f64), &cfg).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn letterbox_keeps_uniform_content_and_pads_the_rest(w in 1u32..90, h in 1u32..90, s in 4u32..48, gray in 10u8..250) {
        let img = RgbImage::from_pixel(w, h, Rgb([gray; 3]));
        let cfg = CropConfig { mode: CropMode::Dynamic, model_input_size: s, ..CropConfig::default() };
        let out = letterbox_to_model_input(&img, &cfg).unwrap();
        prop_assert_eq!(out.dimensions(), (s, s));
        let lb = letterbox_geometry(w, h, s);
        prop_assert!(lb.content_w == s || lb.content_h == s);
        for (x, y, p) in out.enumerate_pixels() {
            let inside = x >= lb.offset_x && x < lb.offset_x + lb.content_w && y >= lb.offset_y && y < lb.offset_y + lb.content_h;
            prop_assert_eq!(p.0, if inside { [gray; 3] } else { [0; 3] });
        }
    }

    #[test]
    fn rollout_of_stochastic_layers_is_stochastic(n in 1usize..9, seeds in prop::collection::vec(prop::collection::vec(0.01f64..1.0, 81), 1..5)) {
        let layers: Vec<Matrix> = seeds.iter().map(|raw| {
            let mut data = raw[..n * n].to_vec();
            for row in data.chunks_mut(n) {
                let s: f64 = row.iter().sum();
                row.iter_mut().for_each(|v| *v /= s);
            }
            Matrix { n, data }
        }).collect();
        let r = rollout(&layers).unwrap();
        for i in 0..n {
            prop_assert!((r.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-9);
            // the residual term keeps the diagonal at least 2^-layers
            prop_assert!(r.row(i)[i] >= 0.5f64.powi(layers.len() as i32) - 1e-12);
        }
    }

    #[test]
    fn auc_ignores_monotone_rescaling(pairs in prop::collection::vec((0.0f64..1.0, any::<bool>()), 2..40)) {
        let labels: Vec<u8> = pairs.iter().map(|p| p.1 as u8).collect();
        prop_assume!(labels.contains(&0) && labels.contains(&1));
        let scores: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let squashed: Vec<f64> = scores.iter().map(|s| s * s * 0.5).collect();
        prop_assert!((auc(&scores, &labels).unwrap() - auc(&squashed, &labels).unwrap()).abs() < 1e-12);
        let flipped: Vec<u8> = labels.iter().map(|l| 1 - l).collect();
        prop_assert!((auc(&scores, &labels).unwrap() + auc(&scores, &flipped).unwrap() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn dynamic_crop_flush_with_the_right_edge_pads_only_the_margin() {
    let img = frame(60, 60, 1);
    let bbox = BoundingBox::new(40.0, 10.0, 60.0, 50.0);
    let cfg = CropConfig { mode: CropMode::Dynamic, pad_value: [9, 9, 9], ..CropConfig::default() };
    let out = dynamic_crop(&img, &bbox, &cfg).unwrap();
    let w = dynamic_window(&bbox, &cfg);
    assert_eq!((w.left, w.right()), (38, 62));
    for (x, y, p) in out.enumerate_pixels() {
        let sx = w.left + x as i64;
        if sx >= 60 {
            assert_eq!(p.0, [9, 9, 9]);
        } else {
            assert_eq!(p, img.get_pixel(sx as u32, (w.top + y as i64) as u32));
        }
    }
}

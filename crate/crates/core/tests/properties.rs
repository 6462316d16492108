//! Property tests for invariants that span modules.

use proptest::prelude::*;

use fogsight::dehaze::{dehaze_aod, forward_aodx, init_dehazer, params_from_json, params_to_json, rasterize_rois, RoiMask};
use fogsight::detect::{toy_detect, Detection, Strength, ToyDetectorConfig};
use fogsight::harness::{load_manifest, materialize_dataset, RunConfig, Split};
use fogsight::imaging::Image;
use fogsight::pipeline::{run_pipeline, PipelineConfig, PipelineMode};
use fogsight::scatter::{synth_scene, SceneSpec};

fn small_spec() -> SceneSpec {
    SceneSpec {
        width: 24,
        height: 20,
        min_object_size: 4,
        max_object_size: 7,
        ..SceneSpec::default()
    }
}

fn image(h: usize, w: usize) -> impl Strategy<Value = Image> {
    proptest::collection::vec(0.0f64..=1.0, h * w * 3).prop_map(move |d| Image::new(h, w, 3, d).unwrap())
}

fn sized_image() -> impl Strategy<Value = (Image, Vec<f64>)> {
    (2usize..10, 2usize..10).prop_flat_map(|(h, w)| (image(h, w), proptest::collection::vec(0.0f64..=1.0, h * w)))
}

fn boxes() -> impl Strategy<Value = Vec<Detection>> {
    proptest::collection::vec(
        (-5.0f64..30.0, -5.0f64..30.0, 0.5f64..20.0, 0.5f64..20.0, 0.0f64..=1.0),
        0..5,
    )
    .prop_map(|v| {
        v.into_iter()
            .map(|(x, y, w, h, c)| Detection {
                cls: "vehicle".into(),
                x0: x,
                y0: y,
                x1: x + w,
                y1: y + h,
                confidence: c,
            })
            .collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn lambda_one_reduces_to_global((img, mask) in sized_image(), seed in 0u64..1000) {
        let p = init_dehazer(seed);
        let roi = RoiMask::new(img.height(), img.width(), mask).unwrap();
        prop_assert_eq!(forward_aodx(&p, &img, &roi, 1.0).unwrap(), dehaze_aod(&p, &img).unwrap());
    }

    #[test]
    fn dehazed_output_is_clamped((img, mask) in sized_image(), seed in 0u64..1000, lambda in 0.0f64..=1.0) {
        let mut p = init_dehazer(seed);
        // exaggerate the weights so unclamped values would leave [0, 1]
        p.k_net.conv5.bias.iter_mut().for_each(|b| *b += 5.0);
        let roi = RoiMask::new(img.height(), img.width(), mask).unwrap();
        for out in [dehaze_aod(&p, &img).unwrap(), forward_aodx(&p, &img, &roi, lambda).unwrap()] {
            prop_assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn forward_is_pure((img, mask) in sized_image(), seed in 0u64..1000) {
        let p = init_dehazer(seed);
        let roi = RoiMask::new(img.height(), img.width(), mask).unwrap();
        prop_assert_eq!(forward_aodx(&p, &img, &roi, 0.3).unwrap(), forward_aodx(&p, &img, &roi, 0.3).unwrap());
    }

    #[test]
    fn roi_mask_stays_in_unit_range(dets in boxes(), margin in 0.0f64..0.5, feather in 0.0f64..3.0) {
        let m = rasterize_rois(&dets, 16, 20, margin, feather).unwrap();
        prop_assert_eq!(m.data().len(), 16 * 20);
        prop_assert!(m.data().iter().all(|v| (0.0..=1.0).contains(v)));
        if dets.iter().all(|d| d.confidence == 0.0) {
            prop_assert!(m.is_empty());
        }
    }

    #[test]
    fn params_json_round_trip(seed in 0u64..10_000) {
        let p = init_dehazer(seed);
        let back = params_from_json(&params_to_json(&p), std::path::Path::new("mem")).unwrap();
        prop_assert_eq!(back, p);
    }

    #[test]
    fn weak_tier_never_finds_more(seed in 0u64..10_000) {
        let s = synth_scene(seed, &small_spec()).unwrap();
        let cfg = ToyDetectorConfig::default();
        for img in [s.clear.clone(), s.foggy()] {
            let weak = toy_detect(&img, &cfg, Strength::Weak);
            let strong = toy_detect(&img, &cfg, Strength::Strong);
            prop_assert!(weak.len() <= strong.len());
            prop_assert_eq!(&strong, &toy_detect(&img, &cfg, Strength::Strong));
        }
    }

    #[test]
    fn synth_scene_is_pure(seed in any::<u64>()) {
        prop_assert_eq!(synth_scene(seed, &small_spec()).unwrap(), synth_scene(seed, &small_spec()).unwrap());
    }

    #[test]
    fn full_roi_at_lambda_one_matches_global(seed in 0u64..10_000) {
        let s = synth_scene(seed, &small_spec()).unwrap();
        let img = s.foggy();
        let (h, w) = (img.height() as f64, img.width() as f64);
        let everything = move |_: &Image, _: &str| {
            Ok(vec![Detection { cls: "vehicle".into(), x0: 0.0, y0: 0.0, x1: w, y1: h, confidence: 1.0 }])
        };
        let cfg = ToyDetectorConfig::default();
        let strong = move |i: &Image, _: &str| Ok(toy_detect(i, &cfg, Strength::Strong));
        let p = init_dehazer(seed);
        let base = PipelineConfig { lambda_min: 1.0, ..PipelineConfig::default() };
        let gaze = run_pipeline(&img, "x", &p, &everything, &strong, &base.with_mode(PipelineMode::GazeDehaze)).unwrap();
        let global = run_pipeline(&img, "x", &p, &everything, &strong, &base.with_mode(PipelineMode::GlobalDehaze)).unwrap();
        prop_assert_eq!(gaze.dehazed.as_ref().unwrap(), global.dehazed.as_ref().unwrap());
        prop_assert_eq!(&gaze.final_detections, &global.final_detections);
        let spent: f64 = gaze.timings.iter().map(|t| t.seconds).sum();
        prop_assert!(gaze.timings.iter().all(|t| t.seconds >= 0.0));
        prop_assert!(spent <= gaze.total_seconds);
    }

    #[test]
    fn config_hash_tracks_every_change(seed_a in 0u64..4, seed_b in 0u64..4, lam_a in 0u8..3, lam_b in 0u8..3) {
        let mk = |seed, lam: u8| {
            let mut c = RunConfig::default().with_seed(Some(seed));
            c.pipeline.lambda_min = f64::from(lam) / 4.0;
            c
        };
        let (a, b) = (mk(seed_a, lam_a), mk(seed_b, lam_b));
        prop_assert_eq!(a.hash() == b.hash(), a == b);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(4))]

    #[test]
    fn manifest_survives_reload(seed in any::<u64>(), train in 0usize..3, test in 1usize..3) {
        let dir = tempfile::tempdir().unwrap();
        let m = materialize_dataset(&small_spec(), [(Split::Train, train), (Split::Val, 1), (Split::Test, test)], seed, dir.path()).unwrap();
        let back = load_manifest(dir.path().join("manifest.jsonl")).unwrap();
        prop_assert_eq!(&back.records, &m.records);
        prop_assert_eq!(back.split(Split::Test).len(), test);
        let mut ids: Vec<&str> = back.records.iter().map(|r| r.id.as_str()).collect();
        ids.sort();
        ids.dedup();
        prop_assert_eq!(ids.len(), train + 1 + test);
    }
}

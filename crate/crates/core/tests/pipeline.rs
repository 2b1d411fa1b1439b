use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use lora_isac_core::channel::{
    apply_scene_switched, human_trajectory, ChannelScene, Impairments, MotionKind, PathSpec, SoilProfile,
};
use lora_isac_core::framing::{build_frame, decode_frame, FrameLayout};
use lora_isac_core::iq::{read_iq_file, write_iq_file};
use lora_isac_core::isac_rx::{estimate_interantenna_phase, sense_packet, RatioSeries};
use lora_isac_core::isac_tx::{emit_null_frame, emit_switched_frame, schedule_transmissions, NodeConfig};
use lora_isac_core::sensing::{moisture_from_phase, normalized_spread};
use lora_isac_core::ChirpParams;

const FC: f64 = 868e6;

fn p7() -> ChirpParams {
    ChirpParams::new(7, 125e3, FC, 125e3).unwrap()
}

#[test]
fn symbol_errors_rare_at_zero_db() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let cfg = NodeConfig::outdoor(1, p7());
    let (mut errors, mut total) = (0, 0);
    for i in 0..1000 {
        let payload: Vec<u32> = (0..20).map(|_| rng.random_range(0..128)).collect();
        let t = i as f64;
        let e = emit_switched_frame(&cfg, &payload, t).unwrap();
        let scene = ChannelScene::new(
            vec![PathSpec::identity()],
            None,
            Impairments {
                snr_db: Some(0.0),
                cfo: rng.random_range(-800.0..800.0),
                sfo_ppm: rng.random_range(-10.0..10.0),
                rng_seed: 10,
            },
        )
        .unwrap();
        let rx = apply_scene_switched(&e.antenna1_samples, &e.antenna2_samples, &scene, t, FC).unwrap();
        let d = decode_frame(&rx, &e.layout);
        total += payload.len();
        if d.ok {
            errors += d.payload.iter().zip(&e.layout.payload).filter(|(a, b)| a != b).count();
        } else {
            errors += payload.len();
        }
    }
    let ser = errors as f64 / total as f64;
    assert!(ser < 0.01, "symbol error rate {ser}");
}

#[test]
fn soil_node_end_to_end() {
    let cfg = NodeConfig::outdoor(4, p7());
    let d = 0.05;
    for theta in [0.05, 0.2, 0.4] {
        let scene = ChannelScene::new(
            vec![PathSpec::fixed(6.7e-7, Complex64::from_polar(0.5, -1.0)).unwrap()],
            Some(SoilProfile::new(theta, d, 20.0).unwrap()),
            Impairments {
                snr_db: Some(25.0),
                cfo: -350.0,
                sfo_ppm: 8.0,
                rng_seed: 4,
            },
        )
        .unwrap();
        let starts = schedule_transmissions(&cfg, 60.0).unwrap();
        let mut prior = None;
        for (k, &t) in starts.iter().enumerate() {
            let e = emit_switched_frame(&cfg, &[k as u32 % 128; 12], t).unwrap();
            let rx = apply_scene_switched(&e.antenna1_samples, &e.antenna2_samples, &scene, t, FC).unwrap();
            let frame = decode_frame(&rx, &e.layout);
            assert_eq!(frame.payload, e.layout.payload);
            let est = estimate_interantenna_phase(&frame, cfg.switch_index.unwrap()).unwrap();
            let r = moisture_from_phase(&est, d, FC, prior).unwrap();
            assert!((r.theta_hat - theta).abs() < 0.01, "theta {theta}: {}", r.theta_hat);
            prior = Some(r.theta_hat);
        }
    }
}

fn room_series(kind: MotionKind, seed: u64) -> RatioSeries {
    let cfg = NodeConfig::indoor(2, p7(), 0.05);
    let imp = Impairments {
        snr_db: Some(10.0),
        cfo: 410.0,
        sfo_ppm: -12.0,
        rng_seed: seed,
    };
    let walk = human_trajectory(kind, seed);
    let scene = |offset: f64, g: Complex64| {
        ChannelScene::new(
            vec![
                PathSpec::fixed(5e-8, g).unwrap(),
                PathSpec::human(1.2e-7, Complex64::from_polar(0.3, 0.0), walk.offset_by(offset)).unwrap(),
            ],
            None,
            imp,
        )
        .unwrap()
    };
    let rx1 = scene(0.0, Complex64::from_polar(0.9, 0.0));
    let rx2 = scene(0.4, Complex64::from_polar(0.9, 1.2));
    let mut series = RatioSeries::new();
    for t in schedule_transmissions(&cfg, 6.0).unwrap() {
        let e = emit_null_frame(&cfg, t).unwrap();
        series.append(&sense_packet(&e, &rx1, &rx2, FC).unwrap()).unwrap();
    }
    series
}

#[test]
fn walking_fluctuates_more_than_still() {
    for seed in 0..3 {
        let walking = room_series(MotionKind::Walking, seed);
        let still = room_series(MotionKind::Still, seed);
        assert_eq!(walking.len(), 120);
        let (w, s) = (normalized_spread(&walking.values), normalized_spread(&still.values));
        assert!(w > 5.0 * s, "seed {seed}: walking {w} still {s}");
    }
}

#[test]
fn iq_file_round_trip_decodes() {
    let dir = tempfile::tempdir().unwrap();
    let layout = FrameLayout::with_payload(p7(), &[1, 2, 3, 127, 0]).unwrap();
    let mut buf = build_frame(&layout).delayed_by_samples(33);
    buf.start_time = 2.5;
    let path = dir.path().join("frame.cf32");
    write_iq_file(&path, &buf, &layout.params).unwrap();
    let (back, desc) = read_iq_file(&path).unwrap();
    assert_eq!(desc.num_samples, buf.len());
    assert_eq!(back.start_time, 2.5);
    for (a, b) in back.samples.iter().zip(&buf.samples) {
        assert!((a - b).norm() < 1e-6);
    }
    assert_eq!(decode_frame(&back, &layout).payload, layout.payload);
}

#[test]
fn same_seed_same_series() {
    assert_eq!(room_series(MotionKind::Walking, 7), room_series(MotionKind::Walking, 7));
    assert_ne!(room_series(MotionKind::Walking, 7), room_series(MotionKind::Walking, 8));
}

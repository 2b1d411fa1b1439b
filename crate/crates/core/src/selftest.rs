//! Quick invariant checks across all modules, runnable from the command line.

use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::channel::{
    apply_scene, impair, permittivity_of_moisture, soil_phase_shift, ChannelScene, Impairments, PathSpec, SoilProfile,
    TxAntenna,
};
use crate::framing::{build_frame, decode_frame, FrameLayout};
use crate::isac_rx::{antenna_division, estimate_interantenna_phase};
use crate::isac_tx::{emit_null_frame, max_window_duty, schedule_transmissions, NodeConfig};
use crate::netsim::{assign_channels_and_slots, build_ledger, NetworkNode, NetworkScenario};
use crate::phy_css::{chirp_unchecked, ChirpDirection, ChirpParams, Demodulator};
use crate::sensing::moisture_from_phase;
use crate::wrap_phase;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelftestReport {
    pub checks: Vec<CheckResult>,
    pub all_passed: bool,
}

type Check = fn() -> std::result::Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> std::result::Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn params(sf: u8) -> ChirpParams {
    ChirpParams::new(sf, 125e3, 868e6, 125e3).expect("valid")
}

fn css_round_trip() -> std::result::Result<String, String> {
    for sf in 7..=9 {
        let p = params(sf);
        let d = Demodulator::new(&p);
        for k in 0..p.num_bins() as u32 {
            let c = chirp_unchecked(&p, k, ChirpDirection::Up);
            let got = d.demod(&c.samples).map_err(|e| e.to_string())?.symbol.value();
            ensure(got == k, || format!("SF{sf} symbol {k} decoded as {got}"))?;
        }
    }
    Ok("SF7..9, every symbol".into())
}

fn unit_magnitude() -> std::result::Result<String, String> {
    let p = params(7);
    for k in [0, 1, 64, 127] {
        for dir in [ChirpDirection::Up, ChirpDirection::Down] {
            let c = chirp_unchecked(&p, k, dir);
            let worst = c.samples.iter().map(|s| (s.norm() - 1.0).abs()).fold(0.0, f64::max);
            ensure(worst < 1e-12, || format!("k={k} deviates by {worst}"))?;
        }
    }
    Ok("unit amplitude".into())
}

fn phase_sensitivity() -> std::result::Result<String, String> {
    let p = params(7);
    let d = Demodulator::new(&p);
    let c = chirp_unchecked(&p, 42, ChirpDirection::Up);
    for phi in [0.3, -2.0, 3.1] {
        let r = c.scaled(Complex64::from_polar(1.0, phi));
        let got = d.demod(&r.samples).map_err(|e| e.to_string())?.peak_phase;
        ensure(wrap_phase(got - phi).abs() < 1e-9, || {
            format!("phase {phi} read as {got}")
        })?;
    }
    Ok("peak phase follows input rotation".into())
}

fn frame_with_offset() -> std::result::Result<String, String> {
    let l = FrameLayout::new(params(7), 8, 2, &[3, 1, 4], None).map_err(|e| e.to_string())?;
    let f = build_frame(&l).delayed_by_samples(37);
    let d = decode_frame(&f, &l);
    ensure(d.ok && d.sync_offset == 37 && d.payload == l.payload, || {
        format!("{d:?}")
    })?;
    Ok("offset 37 recovered".into())
}

fn switch_transparency() -> std::result::Result<String, String> {
    for s in 1..8 {
        let l = FrameLayout::new(params(7), 8, 2, &[7, 0, 127, 55], Some(s)).map_err(|e| e.to_string())?;
        let mut f = build_frame(&l);
        for x in &mut f.samples[s * 128..] {
            *x *= Complex64::from_polar(0.7, 0.9 * s as f64);
        }
        let d = decode_frame(&f, &l);
        ensure(d.ok && d.payload == l.payload, || {
            format!("switch {s}: {:?}", d.diagnostics)
        })?;
    }
    Ok("payload intact for every switch index".into())
}

fn topp_monotone() -> std::result::Result<String, String> {
    let e0 = permittivity_of_moisture(0.0).map_err(|e| e.to_string())?;
    let e2 = permittivity_of_moisture(0.2).map_err(|e| e.to_string())?;
    ensure((e0 - 3.03).abs() < 1e-12 && (e2 - 10.1164).abs() < 1e-9, || {
        format!("{e0} {e2}")
    })?;
    let mut prev = e0;
    for i in 1..=500 {
        let e = permittivity_of_moisture(i as f64 * 0.001).map_err(|e| e.to_string())?;
        ensure(e > prev, || format!("not increasing at {}", i as f64 * 0.001))?;
        prev = e;
    }
    Ok("3.03 at 0, 10.1164 at 0.2, increasing".into())
}

fn awgn_level() -> std::result::Result<String, String> {
    let p = params(7);
    let x = chirp_unchecked(&p, 0, ChirpDirection::Up);
    let long = crate::IqBuffer::new(x.samples.repeat(2000), p.sample_rate, 0.0).map_err(|e| e.to_string())?;
    let y = crate::channel::add_awgn(&long, 10.0, 5);
    let noise: f64 = y
        .samples
        .iter()
        .zip(&long.samples)
        .map(|(a, b)| (a - b).norm_sqr())
        .sum::<f64>()
        / y.len() as f64;
    let snr = 10.0 * (long.mean_power() / noise).log10();
    ensure((snr - 10.0).abs() < 0.1, || format!("measured {snr} dB"))?;
    Ok(format!("measured {snr:.3} dB"))
}

fn interantenna_phase() -> std::result::Result<String, String> {
    let l = FrameLayout::new(params(7), 8, 2, &[1, 2], Some(4)).map_err(|e| e.to_string())?;
    let mut f = build_frame(&l);
    for x in &mut f.samples[4 * 128..] {
        *x *= Complex64::from_polar(1.0, 1.0);
    }
    let imp = Impairments {
        cfo: 200.0,
        ..Impairments::none()
    };
    let d = decode_frame(&impair(&f, &imp, 0), &l);
    let e = estimate_interantenna_phase(&d, 4).map_err(|e| e.to_string())?;
    ensure((e.delta_phi_wrapped - 1.0).abs() < 1e-3, || format!("{e:?}"))?;
    Ok(format!(
        "error {:.2e} rad at 200 Hz CFO",
        (e.delta_phi_wrapped - 1.0).abs()
    ))
}

fn division_cancels_offsets() -> std::result::Result<String, String> {
    let cfg = NodeConfig::indoor(1, params(7), 0.05);
    let e = emit_null_frame(&cfg, 0.0).map_err(|e| e.to_string())?;
    let imp = Impairments {
        cfo: 500.0,
        sfo_ppm: 20.0,
        ..Impairments::none()
    };
    let a = impair(&e.antenna1_samples, &imp, 0);
    let b = a.scaled(Complex64::from_polar(0.8, 0.6));
    let r = antenna_division(&a, &b, &e.layout).map_err(|e| e.to_string())?;
    let err = (r.values[0] - Complex64::from_polar(0.8, 0.6)).norm();
    ensure(err < 1e-9, || format!("ratio error {err}"))?;
    Ok("ratio independent of CFO and SFO".into())
}

fn moisture_round_trip() -> std::result::Result<String, String> {
    let mut worst: f64 = 0.0;
    for i in 0..50 {
        let theta = 0.02 + 0.43 * i as f64 / 49.0;
        let soil = SoilProfile::new(theta, 0.05, 0.0).map_err(|e| e.to_string())?;
        let est = crate::isac_rx::PhaseEstimate {
            delta_phi_wrapped: wrap_phase(-soil_phase_shift(&soil, 868e6)),
            drift_slope: 0.0,
            quality: 0.0,
            low_confidence: false,
        };
        let r = moisture_from_phase(&est, 0.05, 868e6, None).map_err(|e| e.to_string())?;
        worst = worst.max((r.theta_hat - theta).abs());
    }
    ensure(worst <= 1e-4, || format!("max error {worst}"))?;
    Ok(format!("max error {worst:.2e}"))
}

fn outdoor_duty_cycle() -> std::result::Result<String, String> {
    let cfg = NodeConfig::outdoor(1, params(7));
    let starts = schedule_transmissions(&cfg, 600.0).map_err(|e| e.to_string())?;
    let a = cfg.airtime();
    let worst = [100.0, 150.0, 400.0]
        .iter()
        .map(|m| max_window_duty(&starts, a, m * a))
        .fold(0.0, f64::max);
    ensure(worst <= cfg.duty_cycle_limit + 1e-12, || format!("window duty {worst}"))?;
    let indoor = NodeConfig::indoor(2, params(7), 0.05);
    let n = schedule_transmissions(&indoor, 10.0).map_err(|e| e.to_string())?.len();
    ensure(n == 200, || format!("indoor count {n}"))?;
    Ok(format!("outdoor worst window duty {worst:.5}"))
}

fn slot_assignment() -> std::result::Result<String, String> {
    let nodes = (0..4)
        .map(|i| NetworkNode {
            config: NodeConfig::indoor(i, params(7), 3.072),
            scene: ChannelScene::identity(),
            scene_rx2: None,
        })
        .collect();
    let s = NetworkScenario::new(nodes, 2, 1, 30.0, 1).map_err(|e| e.to_string())?;
    let a = assign_channels_and_slots(&s).map_err(|e| e.to_string())?;
    let ledger = build_ledger(&a).map_err(|e| e.to_string())?;
    ensure(ledger.collisions.is_empty(), || {
        format!("{} collisions", ledger.collisions.len())
    })?;
    Ok("4 nodes on 2 channels, no collisions".into())
}

fn channel_determinism() -> std::result::Result<String, String> {
    let l = FrameLayout::new(params(7), 8, 2, &[9], None).map_err(|e| e.to_string())?;
    let f = build_frame(&l);
    let scene = ChannelScene::new(
        vec![
            PathSpec::fixed(1e-7, Complex64::new(0.8, 0.1)).map_err(|e| e.to_string())?,
            PathSpec::fixed(3e-7, Complex64::new(0.1, -0.2)).map_err(|e| e.to_string())?,
        ],
        None,
        Impairments {
            snr_db: Some(5.0),
            cfo: 120.0,
            sfo_ppm: 7.0,
            rng_seed: 77,
        },
    )
    .map_err(|e| e.to_string())?;
    let a = apply_scene(&f, &scene, TxAntenna::First, 0.5, 868e6);
    let b = apply_scene(&f, &scene, TxAntenna::First, 0.5, 868e6);
    ensure(a == b, || "outputs differ".into())?;
    let c = apply_scene(&f, &scene, TxAntenna::First, 0.6, 868e6);
    ensure(a != c, || "noise does not depend on time".into())?;
    Ok("bit-identical reruns".into())
}

fn half_wavelength_flip() -> std::result::Result<String, String> {
    let p = params(7);
    let x = chirp_unchecked(&p, 0, ChirpDirection::Up);
    let lambda = p.wavelength();
    let scene_at = |excess: f64| {
        ChannelScene::new(
            vec![PathSpec::human(
                0.0,
                Complex64::new(1.0, 0.0),
                crate::channel::Trajectory::Linear {
                    excess_m: 0.0,
                    rate_mps: excess,
                },
            )
            .expect("valid")],
            None,
            Impairments::none(),
        )
        .expect("valid")
    };
    let scene = scene_at(lambda / 2.0);
    let d = Demodulator::new(&p);
    let p0 = d
        .demod(&apply_scene(&x, &scene, TxAntenna::First, 0.0, p.carrier_freq).samples)
        .map_err(|e| e.to_string())?;
    let p1 = d
        .demod(&apply_scene(&x, &scene, TxAntenna::First, 1.0, p.carrier_freq).samples)
        .map_err(|e| e.to_string())?;
    let diff = wrap_phase(p1.peak_phase - p0.peak_phase).abs();
    ensure((diff - PI).abs() < 1e-6, || format!("phase step {diff}"))?;
    Ok("half-wavelength excess flips the phase".into())
}

const CHECKS: &[(&str, Check)] = &[
    ("css_round_trip", css_round_trip),
    ("chirp_unit_magnitude", unit_magnitude),
    ("peak_phase_sensitivity", phase_sensitivity),
    ("frame_sync_offset", frame_with_offset),
    ("switch_transparency", switch_transparency),
    ("permittivity_monotone", topp_monotone),
    ("awgn_calibration", awgn_level),
    ("half_wavelength_flip", half_wavelength_flip),
    ("channel_determinism", channel_determinism),
    ("interantenna_phase_cfo", interantenna_phase),
    ("division_cancels_offsets", division_cancels_offsets),
    ("moisture_round_trip", moisture_round_trip),
    ("duty_cycle", outdoor_duty_cycle),
    ("slot_assignment", slot_assignment),
];

/// Runs every check; panics inside a check count as failures.
pub fn run_selftest() -> SelftestReport {
    let checks: Vec<CheckResult> = CHECKS
        .iter()
        .map(|(name, f)| {
            let (passed, detail) = match std::panic::catch_unwind(f) {
                Ok(Ok(d)) => (true, d),
                Ok(Err(d)) => (false, d),
                Err(_) => (false, "panicked".into()),
            };
            CheckResult {
                name: name.to_string(),
                passed,
                detail,
            }
        })
        .collect();
    let all_passed = checks.iter().all(|c| c.passed);
    SelftestReport { checks, all_passed }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_checks_pass() {
        let r = run_selftest();
        for c in &r.checks {
            assert!(c.passed, "{}: {}", c.name, c.detail);
        }
        assert!(r.all_passed);
    }
}

use approx::assert_abs_diff_eq;
use lorapack_core::perf_models::{
    fit_calibration, read_samples, synthetic_samples, write_samples, CalibrationProfile,
    ProfileMeta, ProfilingSample,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

#[test]
fn backbone_slope_survives_measurement_noise() {
    let noise = Normal::new(0.0, 0.1).unwrap();
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut samples: Vec<ProfilingSample> = (0..1000)
            .map(|_| {
                let b: u32 = rng.random_range(1..=256);
                ProfilingSample::ModelLat {
                    batch: b,
                    adapters: 0,
                    observed_ms: 2.0 * f64::from(b) + 20.0 + noise.sample(&mut rng),
                }
            })
            .collect();
        samples.push(ProfilingSample::MemCap {
            a_max: 8,
            s_max: 8,
            observed_tokens: 50_000.0,
        });
        let (p, report) = fit_calibration(&samples, ProfileMeta::default()).unwrap();
        assert_abs_diff_eq!(p.constants.k4, 2.0, epsilon = 0.01);
        assert_abs_diff_eq!(p.constants.k5, 20.0, epsilon = 0.05);
        let rms = report.groups["model_lat"].rms_error;
        assert!((0.08..0.12).contains(&rms), "rms residual {rms}");
    }
}

#[test]
fn fixture_samples_refit_to_the_fixture() {
    let fixture = CalibrationProfile::synthetic_fixture();
    let samples = synthetic_samples(&fixture);
    let mut buf = Vec::new();
    write_samples(&samples, &mut buf).unwrap();
    let parsed = read_samples(buf.as_slice()).unwrap();
    assert_eq!(parsed, samples);
    let (p, report) = fit_calibration(&parsed, fixture.meta.clone()).unwrap();
    assert!(report.max_abs_error() < 1e-6);
    let (a, b) = (p.constants, fixture.constants);
    for (x, y) in [
        (a.k1, b.k1),
        (a.k2, b.k2),
        (a.k3, b.k3),
        (a.k4, b.k4),
        (a.k5, b.k5),
        (a.k6, b.k6),
        (a.k7, b.k7),
    ] {
        assert_abs_diff_eq!(x, y, epsilon = 1e-9);
    }
    for (a_max, s_max) in [(1, 8), (8, 16), (100, 32), (384, 8)] {
        assert_abs_diff_eq!(
            p.mem_max(a_max, s_max).unwrap(),
            fixture.mem_max(a_max, s_max).unwrap(),
            epsilon = 1e-6
        );
    }
}

#[test]
fn profile_file_round_trips() {
    let dir = std::env::temp_dir().join(format!("lorapack-cal-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("profile.json");
    let p = CalibrationProfile::synthetic_fixture();
    p.save(&path).unwrap();
    let q = CalibrationProfile::load(&path).unwrap();
    assert_eq!(p, q);
    assert_eq!(p.hash(), q.hash());
    std::fs::remove_dir_all(&dir).unwrap();
}

use lorapack_core::workload::{
    gen_poisson_arrivals, gen_unpredictable_arrivals, random_adapters, read_trace,
    synthesize_trace, write_trace, AdapterSpec, LengthSampler, LengthSource, UnpredictableRegime,
    WorkloadSpec,
};
use proptest::prelude::*;

/// Kolmogorov-Smirnov distance between the sample and Exp(rate).
fn ks_exponential(mut gaps: Vec<f64>, rate: f64) -> f64 {
    gaps.sort_by(f64::total_cmp);
    let n = gaps.len() as f64;
    gaps.iter()
        .enumerate()
        .map(|(i, &g)| {
            let cdf = 1.0 - (-rate * g).exp();
            (cdf - i as f64 / n)
                .abs()
                .max(((i + 1) as f64 / n - cdf).abs())
        })
        .fold(0.0, f64::max)
}

#[test]
fn poisson_gaps_pass_a_ks_test() {
    for (seed, rate) in [(1u64, 0.5), (2, 2.0), (3, 10.0)] {
        let t = gen_poisson_arrivals(rate, 20_000.0 / rate, seed).unwrap();
        let gaps: Vec<f64> = std::iter::once(t[0])
            .chain(t.windows(2).map(|w| w[1] - w[0]))
            .collect();
        let d = ks_exponential(gaps.clone(), rate);
        // 1% critical value of the one-sample test
        let crit = 1.628 / (gaps.len() as f64).sqrt();
        assert!(d < crit, "seed {seed}: D = {d:.4} >= {crit:.4}");
        // a wrong rate is rejected
        assert!(ks_exponential(gaps, rate * 1.1) > crit);
    }
}

fn workload(n: usize, rate: f64, duration: f64, source: LengthSource) -> WorkloadSpec {
    WorkloadSpec {
        adapters: (0..n)
            .map(|i| {
                AdapterSpec::new(
                    format!("a{i}"),
                    [8, 16, 32][i % 3],
                    rate * (1 + i % 4) as f64,
                )
            })
            .collect(),
        duration,
        input_len_mean: 250.0,
        output_len_mean: 231.0,
        length_source: source,
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, ..ProptestConfig::default() })]

    #[test]
    fn traces_are_sorted_bounded_and_reproducible(
        n in 1usize..12,
        rate in 0.01f64..2.0,
        duration in 1.0f64..500.0,
        sigma in 0.0f64..1.5,
        seed in any::<u64>(),
    ) {
        let w = workload(n, rate, duration, LengthSource::PerRequestSampled);
        let sampler = LengthSampler::LogNormal { sigma };
        let a = synthesize_trace(&w, seed, &sampler).unwrap();
        prop_assert!(a.validate().is_ok());
        prop_assert!(a.events.windows(2).all(|e| e[0].arrival_time <= e[1].arrival_time));
        prop_assert!(a.events.iter().all(|e| (0.0..duration).contains(&e.arrival_time)));
        prop_assert!(a.events.iter().all(|e| e.input_len >= 1 && e.output_len >= 1));
        let b = synthesize_trace(&w, seed, &sampler).unwrap();
        prop_assert_eq!(&a.events, &b.events);
        let mut buf = Vec::new();
        write_trace(&a, &mut buf).unwrap();
        prop_assert_eq!(read_trace(buf.as_slice()).unwrap(), a);
    }

    #[test]
    fn mean_only_lengths_are_constant(n in 1usize..6, seed in any::<u64>()) {
        let w = workload(n, 0.5, 100.0, LengthSource::MeanOnly);
        let t = synthesize_trace(&w, seed, &LengthSampler::LogNormal { sigma: 1.0 }).unwrap();
        prop_assert!(t.events.iter().all(|e| e.input_len == 250 && e.output_len == 231));
    }

    #[test]
    fn regime_rates_stay_in_bounds(rate in 0.05f64..3.0, seed in any::<u64>()) {
        let regime = UnpredictableRegime { epoch_length: 50.0, ..UnpredictableRegime::default() };
        let (lo, hi) = regime.bounds_for(rate);
        let (times, epochs) = gen_unpredictable_arrivals(rate, 2_000.0, &regime, seed).unwrap();
        prop_assert_eq!(epochs.len(), 40);
        prop_assert_eq!(epochs[0].rate, rate);
        prop_assert!(epochs.iter().all(|e| e.rate >= lo - 1e-12 && e.rate <= hi + 1e-12));
        let steps_ok = epochs.windows(2).all(|e| {
            let r = e[1].rate / e[0].rate;
            [0.5, 1.0, 2.0].iter().any(|f| (r - f).abs() < 1e-9)
        });
        prop_assert!(steps_ok);
        prop_assert!(times.windows(2).all(|t| t[0] <= t[1]));
    }

    #[test]
    fn random_adapters_draw_from_the_menus(n in 1usize..400, seed in any::<u64>()) {
        let a = random_adapters(n, &[8, 32], &[0.1, 0.4], seed).unwrap();
        prop_assert_eq!(a.len(), n);
        prop_assert!(a.iter().all(|x| [8, 32].contains(&x.size) && [0.1, 0.4].contains(&x.rate)));
        let mut ids: Vec<_> = a.iter().map(|x| x.id.clone()).collect();
        ids.sort();
        ids.dedup();
        prop_assert_eq!(ids.len(), n);
        prop_assert_eq!(random_adapters(n, &[8, 32], &[0.1, 0.4], seed).unwrap(), a);
    }
}

use std::collections::BTreeMap;

use lorapack_core::placement::{allocate, priority_sorting, PlacementProblem, Unbounded};
use lorapack_core::surrogate::{
    featurize, FeatureVector, StarvationPredictor, ThroughputPredictor,
};
use lorapack_core::workload::AdapterSpec;
use lorapack_core::Error;
use proptest::prelude::*;

const TOKENS: f64 = 481.0;

/// Starves once a GPU holds more than `max` adapters.
struct CountCap {
    max: f64,
}

impl ThroughputPredictor for CountCap {
    fn predict_throughput(&self, fv: &FeatureVector) -> f64 {
        fv.n_adapters.min(fv.a_max)
    }
}

impl StarvationPredictor for CountCap {
    fn predict_starvation(&self, fv: &FeatureVector) -> bool {
        fv.n_adapters > self.max
    }
}

/// Throughput saturates at `per_slot * a_max`; starves past that.
struct LoadCap {
    per_slot: f64,
}

impl ThroughputPredictor for LoadCap {
    fn predict_throughput(&self, fv: &FeatureVector) -> f64 {
        (fv.rate_sum * TOKENS).min(self.per_slot * fv.a_max)
    }
}

impl StarvationPredictor for LoadCap {
    fn predict_starvation(&self, fv: &FeatureVector) -> bool {
        fv.rate_sum * TOKENS > self.per_slot * fv.a_max
    }
}

fn adapters(spec: &[(u32, f64)]) -> Vec<AdapterSpec> {
    spec.iter()
        .enumerate()
        .map(|(i, &(s, r))| AdapterSpec::new(format!("a{i:03}"), s, r))
        .collect()
}

/// Fewest GPUs over every assignment of adapters to `g` GPUs, with at most
/// `cap` adapters per GPU.
fn brute_force_min_gpus(n: usize, g: usize, cap: usize) -> Option<usize> {
    let mut best: Option<usize> = None;
    let total = g.pow(n as u32);
    for code in 0..total {
        let mut counts = vec![0usize; g];
        let mut c = code;
        for _ in 0..n {
            counts[c % g] += 1;
            c /= g;
        }
        if counts.iter().all(|&k| k <= cap) {
            let used = counts.iter().filter(|&&k| k > 0).count();
            best = Some(best.map_or(used, |b| b.min(used)));
        }
    }
    best
}

#[test]
fn greedy_matches_brute_force_on_small_problems() {
    let sizes = [8u32, 16, 32];
    let rates = [0.4, 0.1, 0.025, 0.8];
    let points: Vec<usize> = (1..=8).collect();
    let mut cases = 0;
    for n in 1..=8 {
        for cap in 1..=8 {
            for variant in 0..4 {
                let spec: Vec<(u32, f64)> = (0..n)
                    .map(|i| (sizes[(i * (variant + 1)) % 3], rates[(i + variant) % 4]))
                    .collect();
                let stub = CountCap { max: cap as f64 };
                let p = PlacementProblem::new(adapters(&spec), 2, &stub, &stub, &Unbounded)
                    .unwrap()
                    .with_testing_points(points.clone())
                    .unwrap();
                let got = match allocate(&p) {
                    Ok(r) => Some(r.gpus_used),
                    Err(Error::Starvation(_)) => None,
                    Err(e) => panic!("unexpected {e}"),
                };
                assert_eq!(
                    got,
                    brute_force_min_gpus(n, 2, cap),
                    "n={n} cap={cap} variant={variant}"
                );
                cases += 1;
            }
        }
    }
    assert_eq!(cases, 256);
}

fn arb_adapters(max: usize) -> impl Strategy<Value = Vec<(u32, f64)>> {
    prop::collection::vec(
        (
            prop::sample::select(vec![8u32, 16, 32]),
            prop::sample::select(vec![0.4, 0.1, 0.05, 0.025, 0.8]),
        ),
        1..max,
    )
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, ..ProptestConfig::default() })]

    #[test]
    fn accepted_plans_are_complete_and_predicted_feasible(spec in arb_adapters(120), gpus in 1usize..5) {
        let stub = LoadCap { per_slot: 300.0 };
        let list = adapters(&spec);
        let p = PlacementProblem::new(list.clone(), gpus, &stub, &stub, &Unbounded).unwrap();
        let Ok(r) = allocate(&p) else { return Ok(()) };
        prop_assert_eq!(r.assignment.len(), list.len());
        prop_assert!(r.gpus_used <= gpus && r.gpus_used == r.gpus.len());
        let by_id: BTreeMap<_, _> = list.iter().map(|a| (a.id.clone(), a.clone())).collect();
        let mut seen = 0;
        for g in &r.gpus {
            let specs: Vec<AdapterSpec> = g.adapters.iter().map(|id| by_id[id].clone()).collect();
            prop_assert!(g.adapters.iter().all(|id| r.assignment[id] == g.gpu));
            prop_assert!(!stub.predict_starvation(&featurize(&specs, g.a_max).unwrap()));
            prop_assert!(g.a_max >= 1);
            seen += specs.len();
        }
        prop_assert_eq!(seen, list.len());
    }

    #[test]
    fn allocation_ignores_input_order(spec in arb_adapters(80), gpus in 1usize..4, seed in any::<u64>()) {
        let stub = LoadCap { per_slot: 300.0 };
        let list = adapters(&spec);
        let mut shuffled = list.clone();
        let k = shuffled.len();
        shuffled.rotate_left((seed as usize) % k);
        if seed & 1 == 1 {
            shuffled.reverse();
        }
        let a = allocate(&PlacementProblem::new(list, gpus, &stub, &stub, &Unbounded).unwrap());
        let b = allocate(&PlacementProblem::new(shuffled, gpus, &stub, &stub, &Unbounded).unwrap());
        match (a, b) {
            (Ok(a), Ok(b)) => prop_assert_eq!(a, b),
            (Err(_), Err(_)) => {}
            _ => prop_assert!(false, "order changed feasibility"),
        }
    }

    #[test]
    fn priority_order_is_a_size_descending_permutation(spec in arb_adapters(60)) {
        let list = adapters(&spec);
        let order = priority_sorting(&list);
        let mut sorted = order.clone();
        sorted.sort_unstable();
        prop_assert_eq!(sorted, (0..list.len()).collect::<Vec<_>>());
        prop_assert!(order.windows(2).all(|w| list[w[0]].size >= list[w[1]].size));
    }

    #[test]
    fn dropping_an_adapter_never_needs_more_gpus(spec in arb_adapters(60), drop in any::<prop::sample::Index>()) {
        let stub = CountCap { max: 7.0 };
        let points: Vec<usize> = (1..=64).collect();
        let list = adapters(&spec);
        let run = |l: Vec<AdapterSpec>| {
            let p = PlacementProblem::new(l, 16, &stub, &stub, &Unbounded).unwrap().with_testing_points(points.clone()).unwrap();
            allocate(&p).map(|r| r.gpus_used)
        };
        let full = run(list.clone()).unwrap();
        prop_assume!(full >= 2);
        let mut fewer = list;
        fewer.remove(drop.index(fewer.len()));
        prop_assert!(run(fewer).unwrap() <= full);
    }
}

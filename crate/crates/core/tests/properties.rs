use agd::arch::Architecture;
use agd::budget::{self, expected_flops_value, update_lambda, BudgetConfig, FlopsBounds};
use agd::distill::{DistillConfig, FeatureExtractor};
use agd::engine::{derive, smoothed, split_dataset, Dataset, Phase, SearchState, TrainSettings, UpdateKind};
use agd::nn;
use agd::quantize::QuantizedTensor;
use agd::search_space::{build_translation_supernet_with, OperatorKind, SupernetSpec};
use agd::supernet::ArchParams;
use candle_core::{DType, Device, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_spec() -> SupernetSpec {
    build_translation_supernet_with(16, 2).unwrap()
}

fn logits(spec: &SupernetSpec) -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let na = spec.searchable_op_layers().count();
    let gamma: Vec<_> = spec
        .searchable_width_layers()
        .map(|i| proptest::collection::vec(-2.0f64..2.0, spec.layers[i].width_candidates().len()))
        .collect();
    (proptest::collection::vec(proptest::collection::vec(-2.0f64..2.0, 4), na), gamma)
}

/// Every joint assignment of operators and widths, with its probability.
fn enumerate(spec: &SupernetSpec, pa: &[Vec<f64>], pg: &[Vec<f64>]) -> Vec<(f64, Architecture)> {
    let ops: Vec<usize> = spec.searchable_op_layers().collect();
    let widths: Vec<usize> = spec.searchable_width_layers().collect();
    let dims: Vec<usize> = pa.iter().map(|v| v.len()).chain(pg.iter().map(|v| v.len())).collect();
    let total: usize = dims.iter().product();
    let template = Architecture::max_of(spec, OperatorKind::Conv3x3);
    let mut out = Vec::with_capacity(total);
    for mut code in 0..total {
        let mut arch = template.clone();
        let mut p = 1.0;
        for (slot, &n) in dims.iter().enumerate() {
            let k = code % n;
            code /= n;
            if slot < ops.len() {
                p *= pa[slot][k];
                arch.layers[ops[slot]].op = Some(OperatorKind::ALL[k]);
            } else {
                let w = slot - ops.len();
                p *= pg[w][k];
                arch.layers[widths[w]].width = spec.layers[widths[w]].width_candidates()[k];
            }
        }
        out.push((p, arch));
    }
    out
}

fn one_hot_logits(spec: &SupernetSpec, arch: &Architecture) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let alpha = spec
        .searchable_op_layers()
        .map(|i| {
            let k = OperatorKind::ALL.iter().position(|o| Some(*o) == arch.layers[i].op).unwrap();
            (0..4).map(|j| if j == k { 5.0 } else { 0.0 }).collect()
        })
        .collect();
    let gamma = spec
        .searchable_width_layers()
        .map(|i| {
            let c = spec.layers[i].width_candidates();
            let k = c.iter().position(|w| *w == arch.layers[i].width).unwrap();
            (0..c.len()).map(|j| if j == k { 5.0 } else { 0.0 }).collect()
        })
        .collect();
    (alpha, gamma)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn expected_flops_equals_enumerated_mean((a, g) in logits(&small_spec())) {
        let spec = small_spec();
        let pa: Vec<Vec<f64>> = a.iter().map(|v| nn::softmax_f64(v)).collect();
        let pg: Vec<Vec<f64>> = g.iter().map(|v| nn::softmax_f64(v)).collect();
        let model = expected_flops_value(&spec, &pa, &pg, 8, 8).unwrap();
        let brute: f64 = enumerate(&spec, &pa, &pg)
            .iter()
            .map(|(p, arch)| p * budget::derived_flops(&spec, arch, 8, 8).unwrap().total)
            .sum();
        prop_assert!((model - brute).abs() <= 1e-9 * brute, "{} vs {}", model, brute);
    }

    #[test]
    fn derive_is_a_fixed_point((a, g) in logits(&small_spec())) {
        let spec = small_spec();
        let arch = derive(&spec, &ArchParams::from_values(&spec, &a, &g, DType::F64).unwrap()).unwrap();
        let (a2, g2) = one_hot_logits(&spec, &arch);
        let again = derive(&spec, &ArchParams::from_values(&spec, &a2, &g2, DType::F64).unwrap()).unwrap();
        prop_assert_eq!(again, arch);
    }

    #[test]
    fn lambda_stays_clamped(start in -10i32..10, steps in proptest::collection::vec(0.0f64..30.0, 1..60)) {
        let cfg = BudgetConfig::translation(FlopsBounds { lower: 10.0, upper: 20.0 });
        let (lo, hi) = (cfg.lambda0 / cfg.lambda_span, cfg.lambda0 * cfg.lambda_span);
        let mut l = (cfg.lambda0 * 2f64.powi(start)).clamp(lo, hi);
        for d in steps {
            let next = update_lambda(l, d, &cfg);
            prop_assert!(next >= lo && next <= hi);
            if d >= 10.0 && d <= 20.0 {
                prop_assert_eq!(next, l);
            } else if d > 20.0 {
                prop_assert_eq!(next, (2.0 * l).min(hi));
            } else {
                prop_assert_eq!(next, (l / 2.0).max(lo));
            }
            l = next;
        }
    }

    #[test]
    fn quantization_error_is_at_most_half_a_step(values in proptest::collection::vec(-1e3f64..1e3, 1..200)) {
        let q = QuantizedTensor::quantize(&values, &[values.len()], 8).unwrap();
        for (x, d) in values.iter().zip(q.dequantize()) {
            prop_assert!((x - d).abs() <= q.scale / 2.0);
        }
    }

    #[test]
    fn split_is_a_partition(n in 1usize..500, seed in any::<u64>()) {
        let s = split_dataset(n, seed);
        prop_assert_eq!(s.chi1.len(), n.div_ceil(2));
        let mut all: Vec<usize> = s.chi1.iter().chain(&s.chi2).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        prop_assert_eq!(split_dataset(n, seed), s);
    }

    #[test]
    fn smoothing_keeps_length_and_bounds(v in proptest::collection::vec(-5.0f64..5.0, 0..50), w in 1usize..8) {
        let s = smoothed(&v, w);
        prop_assert_eq!(s.len(), v.len());
        let (lo, hi) = v.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(*x), b.max(*x)));
        prop_assert!(s.iter().all(|x| *x >= lo - 1e-12 && *x <= hi + 1e-12));
    }
}

fn tiny_state(seed: u64) -> (SearchState, Dataset) {
    let spec = small_spec();
    let mut settings = TrainSettings::translation();
    settings.pretrain_epochs = 1;
    settings.search_epochs = 1;
    settings.batch_size = 3;
    let bounds = FlopsBounds { lower: 0.0, upper: f64::MAX };
    let mut budget = BudgetConfig::translation(bounds);
    budget.height = 8;
    budget.width = 8;
    let extractor = FeatureExtractor::random(seed, 3, &[4, 8], DType::F32).unwrap();
    let state = SearchState::new(&spec, settings, budget, DistillConfig::standard(), extractor, seed, DType::F32).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = || {
        let v: Vec<f32> = (0..11 * 3 * 64).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::from_vec(v, (11, 3, 8, 8), &Device::Cpu).unwrap()
    };
    let (x, t) = (draw(), draw());
    (state, Dataset::new(x, t).unwrap())
}

#[test]
fn updates_draw_from_their_own_half() {
    let (mut st, data) = tiny_state(3);
    let split = split_dataset(data.len(), 3);
    st.batch_log = Some(Vec::new());
    st.pretrain_epoch(&data, &split).unwrap();
    st.begin_phase(Phase::Search).unwrap();
    st.search_epoch(&data, &split).unwrap();
    let log = st.batch_log.unwrap();
    assert!(log.iter().any(|r| r.update == UpdateKind::Arch));
    for r in &log {
        let half = match r.update {
            UpdateKind::Weights => &split.chi1,
            UpdateKind::Arch => &split.chi2,
        };
        assert!(r.indices.iter().all(|i| half.contains(i)), "{r:?}");
    }
}

#[test]
fn pretraining_leaves_architecture_untouched() {
    let (mut st, data) = tiny_state(4);
    let split = split_dataset(data.len(), 4);
    let before = (st.arch.alpha_values().unwrap(), st.arch.gamma_values().unwrap());
    let w_before = st.net.weight_hash().unwrap();
    st.pretrain_epoch(&data, &split).unwrap();
    assert_eq!((st.arch.alpha_values().unwrap(), st.arch.gamma_values().unwrap()), before);
    assert_ne!(st.net.weight_hash().unwrap(), w_before);
    st.begin_phase(Phase::Search).unwrap();
    st.search_epoch(&data, &split).unwrap();
    assert_ne!((st.arch.alpha_values().unwrap(), st.arch.gamma_values().unwrap()), before);
}

#[test]
fn same_seed_same_search() {
    let run = |seed| {
        let (mut st, data) = tiny_state(seed);
        let split = split_dataset(data.len(), seed);
        st.pretrain_epoch(&data, &split).unwrap();
        st.begin_phase(Phase::Search).unwrap();
        st.search_epoch(&data, &split).unwrap();
        (st.net.weight_hash().unwrap(), st.arch.alpha_values().unwrap(), st.arch.gamma_values().unwrap())
    };
    assert_eq!(run(5), run(5));
}

mod common;

use common::*;
use proptest::prelude::*;
use zipmerge::analysis::layer_sparsity;
use zipmerge::zip::{
    merged_delta, optimize_layer, style_strength, surrogate_loss, zip_merge, LayerProbes, OptimizerConfig,
};
use zipmerge::{delta_weight, LoraModel, Tensor};

fn instance() -> impl Strategy<Value = (usize, usize, usize, usize, u64, f64)> {
    (1usize..=8, 1usize..=8, 1usize..=3, 1usize..=8, any::<u64>(), prop_oneof![Just(0.0), Just(0.01), Just(0.1)])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn optimizer_never_regresses((m, n, r, k, seed, lambda) in instance()) {
        let r = r.min(m).min(n);
        let mut rng = rng(seed);
        let dc = delta_weight(&random_layer(&mut rng, "l", m, n, r));
        let ds = delta_weight(&random_layer(&mut rng, "l", m, n, r));
        let probes = LayerProbes::generate(seed, "l", n, k);
        let config = OptimizerConfig { lambda, seed, ..OptimizerConfig::default() };
        let (mergers, report) = optimize_layer(&dc, &ds, &probes, &config).unwrap();
        prop_assert!(report.final_loss <= report.initial_loss, "{report:?}");

        let ones = vec![1.0; n];
        let at_ones = surrogate_loss(&dc, &ds, &ones, &ones, &probes, lambda).unwrap();
        let at_result = surrogate_loss(&dc, &ds, &mergers.m_c.to_f64(), &mergers.m_s.to_f64(), &probes, lambda).unwrap();
        prop_assert!(at_result <= at_ones, "{at_result} > {at_ones}");
    }

    #[test]
    fn merges_are_reproducible(seed in any::<u64>(), layers in 1usize..4) {
        let mut rng = rng(seed);
        let mut content = LoraModel::new();
        let mut style = LoraModel::new();
        for i in 0..layers {
            let (m, n) = (6, 5);
            content.insert(random_layer(&mut rng, &format!("l{i}"), m, n, 2));
            style.insert(random_layer(&mut rng, &format!("l{i}"), m, n, 2));
        }
        let config = OptimizerConfig { seed, ..OptimizerConfig::default() };
        let a = zip_merge(&content, &style, &config).unwrap();
        let b = zip_merge(&content, &style, &config).unwrap();
        prop_assert_eq!(a.mergers.to_bytes(), b.mergers.to_bytes());
        prop_assert_eq!(a.model.to_bytes(), b.model.to_bytes());
    }
}

#[test]
fn aligned_suite_reduces_interference_and_preserves_both() {
    let (c, s) = aligned_suite(20_240);
    let out = zip_merge(&c, &s, &OptimizerConfig::default()).unwrap();
    let mut failures = Vec::new();
    for (i, rho) in RHO.iter().enumerate() {
        let l = &out.report.layers[&suite_key(i)];
        if l.final_merger_cosine > 1e-3 || l.content_residual > 0.15 || l.style_residual > 0.15 {
            failures.push(format!(
                "ρ={rho}: cosine {:.2e}, residuals c {:.3} s {:.3}",
                l.final_merger_cosine, l.content_residual, l.style_residual
            ));
        }
    }
    assert!(failures.is_empty(), "{}", failures.join("; "));
}

#[test]
fn style_strength_is_linear_in_the_style_weight() {
    let (c, s) = aligned_suite(31);
    let out = zip_merge(&c, &s, &OptimizerConfig::default()).unwrap();
    for w in [0.0, 0.25, 0.5, 1.0] {
        let scaled = style_strength(&c, &s, &out.mergers, w).unwrap();
        for (key, m) in &out.mergers.layers {
            let (dc, ds) = (delta_weight(&c.layers[key]), delta_weight(&s.layers[key]));
            let m_s: Vec<f64> = m.m_s.to_f64().iter().map(|v| v * w).collect();
            let dense = merged_delta(&dc, &ds, &m.m_c.to_f64(), &m_s).unwrap();
            assert!(relative_error(&delta_weight(&scaled.layers[key]), &dense) <= 1e-6);
        }
    }
}

#[test]
fn large_low_rank_updates_keep_most_norm_at_p90() {
    let mut rng = rng(90);
    let (dim, rank) = (640, 64);
    let up = Tensor::matrix(dim, rank, to_f32(&gaussian(&mut rng, dim * rank))).unwrap();
    let down = Tensor::matrix(rank, dim, to_f32(&gaussian(&mut rng, rank * dim))).unwrap();
    let delta = delta_weight(&zipmerge::LoraLayer::unscaled("l", down, up).unwrap());
    let stats = layer_sparsity(&delta, &[90.0]).unwrap();
    let retained = stats.percentiles[0].norm_retained;
    assert!(retained > 0.5, "p90 norm retained {retained}");
}

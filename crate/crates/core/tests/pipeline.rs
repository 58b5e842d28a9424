use l3prune::adapt::{attach_lora, train, TrainConfig};
use l3prune::data::{synth_generate, SynthSpec};
use l3prune::eval::{evaluate, EvalSuite};
use l3prune::model::{self, ModelConfig, TokenBatch, Transformer};
use l3prune::profiler::{l3prune_select, make_variants, profile, ProfileConfig};
use l3prune::prune::{pruned_depth, PruneSpec};
use proptest::prelude::*;

fn model(n_layers: usize, seed: u64) -> Transformer {
    Transformer::init(ModelConfig {
        vocab_size: 64,
        d_model: 8,
        n_layers,
        n_heads: 2,
        d_ff: 16,
        max_seq_len: 24,
        seed,
    })
    .unwrap()
}

#[test]
fn profile_select_prune_save_load() {
    let base = model(6, 3);
    let data = synth_generate(&SynthSpec::new(64, 4, 64, 0.1, 3)).unwrap();
    let config = ProfileConfig { sample_count: 32, batch_size: 8, ..ProfileConfig::default() };
    let prof = profile(&base, &data, &config).unwrap();
    assert_eq!(prof.n_layers(), 6);
    let sel = l3prune_select(&prof).unwrap();
    let (large, small) = make_variants(&base, &sel).unwrap();
    assert_eq!(large.model.n_layers(), sel.large_layer);
    assert_eq!(small.model.n_layers(), sel.small_layer);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("large.l3p");
    model::save(&large.model, &path).unwrap();
    let loaded = model::load(&path).unwrap();
    let batch = TokenBatch::new(&[vec![9u32, 10, 11, 12], vec![13, 14]]).unwrap();
    let full = base.forward_all(&batch).unwrap();
    let pruned = loaded.forward_all(&batch).unwrap();
    assert_eq!(pruned.per_layer[..], full.per_layer[..=sel.large_layer]);
}

#[test]
fn short_training_then_eval() {
    let base = model(2, 5);
    let data = synth_generate(&SynthSpec::new(64, 10, 64, 0.1, 5)).unwrap();
    let config = TrainConfig { steps: 6, batch_size: 4, warmup_steps: 2, ..TrainConfig::desk() };
    let adapted = attach_lora(&base, &config.lora()).unwrap();
    let (mut adapted, curve) = train(adapted, &data, &config).unwrap();
    assert_eq!(curve.points.len(), 6);
    let merged = adapted.merge().unwrap();
    assert_eq!(merged.count_params(), base.count_params());
    let report = evaluate(&merged, &EvalSuite::synthetic(64, 10, 5)).unwrap();
    assert!(report.per_task.values().all(|s| (0.0..=1.0).contains(s)));
    assert!((0.0..=100.0).contains(&report.score()));
}

proptest! {
    #[test]
    fn depth_is_monotone_in_fraction(n in 1usize..200, a in 0u32..100, b in 0u32..100) {
        let (lo, hi) = (a.min(b) as f64 / 100.0, a.max(b) as f64 / 100.0);
        prop_assert!(pruned_depth(n, hi) <= pruned_depth(n, lo));
        prop_assert!(pruned_depth(n, lo) <= n);
    }

    #[test]
    fn percent_spec_agrees_with_depth(n in 1usize..200, k in 0u32..100) {
        let p = k as f64 / 100.0;
        match PruneSpec::percent(p).target_layers(n) {
            Ok(kept) => prop_assert_eq!(kept, pruned_depth(n, p)),
            Err(_) => prop_assert_eq!(pruned_depth(n, p), 0),
        }
    }
}

//! Browser bindings for three small views of the pruning toolkit:
//! position weights of the pooling, a prune sweep over a model shape, and the
//! layer-loss profile of a toy model with its two-minima selection.
//!
//! Each export returns JSON; the plain `*_json` functions carry the logic so
//! they can be tested natively.

use l3prune::data::{synth_generate, SynthSpec};
use l3prune::model::{ModelConfig, Transformer};
use l3prune::pooling::{InstructedSeq, PoolingMask};
use l3prune::profiler::{l3prune_select, profile, ProfileConfig};
use l3prune::prune::pruned_depth;
use serde::Serialize;
use wasm_bindgen::prelude::*;

#[derive(Serialize)]
struct PoolingView {
    /// One weight per position; instruction positions get 0.
    weights: Vec<f64>,
    instruction_len: usize,
}

pub fn pooling_weights_json(instruction_len: usize, content_len: usize) -> Result<String, String> {
    if content_len == 0 {
        return Err("need at least one content token".into());
    }
    let seq = InstructedSeq::new(&vec![2; instruction_len], &vec![20; content_len]);
    let batch = l3prune::model::TokenBatch::new(std::slice::from_ref(&seq.tokens)).map_err(|e| e.to_string())?;
    let mask = PoolingMask::for_batch(&batch, &[seq.instruction_len]).map_err(|e| e.to_string())?;
    let view = PoolingView {
        weights: mask.weights(),
        instruction_len,
    };
    Ok(serde_json::to_string(&view).unwrap())
}

#[derive(Serialize)]
struct SweepRow {
    p: f64,
    layers: usize,
    params: u64,
    percent_kept: f64,
}

pub fn prune_sweep_json(n_layers: usize, d_model: usize, d_ff: usize, vocab_size: usize) -> Result<String, String> {
    let config = ModelConfig {
        vocab_size,
        d_model,
        n_layers,
        n_heads: 1,
        d_ff,
        max_seq_len: 1,
        seed: 0,
    };
    config.validate().map_err(|e| e.to_string())?;
    // u64 totals: usize is 32 bits on wasm32
    let fixed = ModelConfig { n_layers: 0, ..config.clone() }.param_count() as u64;
    let block = config.block_params() as u64;
    let full = fixed + n_layers as u64 * block;
    let rows: Vec<SweepRow> = (1..=9)
        .map(|i| i as f64 / 10.0)
        .map(|p| (p, pruned_depth(n_layers, p)))
        .filter(|&(_, layers)| layers > 0)
        .map(|(p, layers)| {
            let params = fixed + layers as u64 * block;
            SweepRow {
                p,
                layers,
                params,
                percent_kept: 100.0 * params as f64 / full as f64,
            }
        })
        .collect();
    Ok(serde_json::to_string(&rows).unwrap())
}

#[derive(Serialize)]
struct ProfileView {
    losses: Vec<f64>,
    small_layer: usize,
    large_layer: usize,
    midpoint: usize,
}

pub fn toy_profile_json(n_layers: usize, seed: u64) -> Result<String, String> {
    if !(2..=16).contains(&n_layers) {
        return Err("choose between 2 and 16 layers".into());
    }
    let model = Transformer::init(ModelConfig {
        vocab_size: 96,
        d_model: 16,
        n_layers,
        n_heads: 2,
        d_ff: 32,
        max_seq_len: 24,
        seed,
    })
    .map_err(|e| e.to_string())?;
    let data = synth_generate(&SynthSpec::new(96, 8, 128, 0.1, seed)).map_err(|e| e.to_string())?;
    let config = ProfileConfig {
        sample_count: 64,
        seed,
        batch_size: 16,
        ..ProfileConfig::default()
    };
    let prof = profile(&model, &data, &config).map_err(|e| e.to_string())?;
    let sel = l3prune_select(&prof).map_err(|e| e.to_string())?;
    Ok(serde_json::to_string(&ProfileView {
        losses: prof.losses,
        small_layer: sel.small_layer,
        large_layer: sel.large_layer,
        midpoint: sel.midpoint,
    })
    .unwrap())
}

fn js(r: Result<String, String>) -> Result<String, JsError> {
    r.map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn pooling_weights(instruction_len: usize, content_len: usize) -> Result<String, JsError> {
    js(pooling_weights_json(instruction_len, content_len))
}

#[wasm_bindgen]
pub fn prune_sweep(n_layers: usize, d_model: usize, d_ff: usize, vocab_size: usize) -> Result<String, JsError> {
    js(prune_sweep_json(n_layers, d_model, d_ff, vocab_size))
}

#[wasm_bindgen]
pub fn toy_profile(n_layers: usize, seed: u32) -> Result<String, JsError> {
    js(toy_profile_json(n_layers, seed as u64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::Value;

    #[test]
    fn pooling_weights_skip_instruction() {
        let v: Value = serde_json::from_str(&pooling_weights_json(2, 3).unwrap()).unwrap();
        let w: Vec<f64> = v["weights"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect();
        assert_eq!(w.len(), 5);
        assert_eq!(&w[..2], &[0.0, 0.0]);
        assert!((w[2] - 1.0 / 6.0).abs() < 1e-15 && (w[4] - 3.0 / 6.0).abs() < 1e-15);
        assert!(pooling_weights_json(2, 0).is_err());
    }

    #[test]
    fn sweep_matches_parameter_formula() {
        let v: Value = serde_json::from_str(&prune_sweep_json(32, 4096, 14336, 32000).unwrap()).unwrap();
        let rows = v.as_array().unwrap();
        assert_eq!(rows.len(), 9);
        let layers: Vec<u64> = rows.iter().map(|r| r["layers"].as_u64().unwrap()).collect();
        assert_eq!(layers, vec![28, 25, 22, 19, 16, 12, 9, 6, 3]);
        let shape = ModelConfig { vocab_size: 32000, d_model: 4096, n_layers: 28, n_heads: 1, d_ff: 14336, max_seq_len: 1, seed: 0 };
        assert_eq!(rows[0]["params"].as_u64().unwrap(), shape.param_count() as u64);
        let small: Value = serde_json::from_str(&prune_sweep_json(4, 6, 4, 10).unwrap()).unwrap();
        assert_eq!(small.as_array().unwrap().len(), 7);
        assert!(prune_sweep_json(0, 4, 4, 10).is_err());
    }

    #[test]
    fn toy_profile_selects_both_halves() {
        let v: Value = serde_json::from_str(&toy_profile_json(6, 1).unwrap()).unwrap();
        assert_eq!(v["losses"].as_array().unwrap().len(), 6);
        let (s, l) = (v["small_layer"].as_u64().unwrap(), v["large_layer"].as_u64().unwrap());
        assert!(s <= 3 && l > 3);
        assert!(toy_profile_json(1, 0).is_err());
    }
}

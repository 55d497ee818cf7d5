//! Browser bindings for the demo page in `www/`.
//!
//! Each export is a thin wrapper over a plain function so the logic can be
//! tested natively.

use rwkv_perspectives::eval::counting::count_parameters;
use rwkv_perspectives::eval::trace_decode;
use rwkv_perspectives::io::tokenizer::tokenize;
use rwkv_perspectives::kernels::{wkv_step, WkvState};
use rwkv_perspectives::model::{init_model, Aggregation, ModelConfig, PerspectiveModel};
use rwkv_perspectives::params::ParamStore;
use rwkv_perspectives::train::{inject_noise, NoiseTarget};
use wasm_bindgen::prelude::*;

/// Perspectives in the trace demo model.
pub const TRACE_PERSPECTIVES: usize = 4;

/// `[base, extended, increase_percent]` for a byte-level model of the given shape.
pub fn param_counts(
    layers: usize,
    d_model: usize,
    perspectives: usize,
    aggregation: &str,
) -> Result<[f64; 3], String> {
    let config = ModelConfig {
        layers,
        d_model,
        perspectives,
        aggregation: aggregation.parse().map_err(|e| format!("{e}"))?,
        ..ModelConfig::default()
    };
    let r = count_parameters(&config).map_err(|e| e.to_string())?;
    Ok([
        r.base_count as f64,
        r.extended_count as f64,
        r.increase_percent,
    ])
}

/// Share of the WKV output owed to the token `lag` steps back, for
/// `lag = 0..=max_lag`, when every key is equal. Each entry is measured by
/// running the real kernel with a one-hot value sequence.
pub fn wkv_lag_weights(decay: f32, bonus: f32, max_lag: usize) -> Vec<f32> {
    let len = max_lag + 1;
    (0..=max_lag)
        .map(|lag| {
            let mut state = WkvState::empty(1);
            let mut out = [0.0f32];
            for t in 0..len {
                let v = if t + lag == max_lag { 1.0 } else { 0.0 };
                wkv_step(&mut state, &[0.0], &[v], &[decay], &[bonus], &mut out);
            }
            out[0]
        })
        .collect()
}

/// Selector weights while a small random model reads `prompt` and then
/// decodes `new_tokens` greedily, flattened `TRACE_PERSPECTIVES` per position.
/// `spread` is the standard deviation of the random selector.
pub fn selector_trace(
    prompt: &str,
    seed: u64,
    spread: f64,
    new_tokens: usize,
) -> Result<Vec<f32>, String> {
    let config = ModelConfig {
        layers: 2,
        d_model: 16,
        perspectives: TRACE_PERSPECTIVES,
        aggregation: Aggregation::Weighted,
        ..ModelConfig::default()
    };
    let mut store: ParamStore<f32> = init_model(&config, seed).map_err(|e| e.to_string())?;
    inject_noise(
        &mut store,
        &config,
        NoiseTarget::Selector,
        spread,
        0.0,
        seed,
    )
    .map_err(|e| e.to_string())?;
    let model = PerspectiveModel::from_store(&config, &store).map_err(|e| e.to_string())?;
    let (records, _) = trace_decode(&model, &tokenize(prompt.as_bytes()), new_tokens)
        .map_err(|e| e.to_string())?;
    Ok(records.into_iter().flat_map(|r| r.weights).collect())
}

#[wasm_bindgen(js_name = paramCounts)]
pub fn param_counts_js(
    layers: usize,
    d_model: usize,
    perspectives: usize,
    aggregation: &str,
) -> Result<Vec<f64>, JsError> {
    param_counts(layers, d_model, perspectives, aggregation)
        .map(Vec::from)
        .map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = wkvLagWeights)]
pub fn wkv_lag_weights_js(decay: f32, bonus: f32, max_lag: usize) -> Vec<f32> {
    wkv_lag_weights(decay, bonus, max_lag)
}

#[wasm_bindgen(js_name = selectorTrace)]
pub fn selector_trace_js(
    prompt: &str,
    seed: u32,
    spread: f64,
    new_tokens: usize,
) -> Result<Vec<f32>, JsError> {
    selector_trace(prompt, u64::from(seed), spread, new_tokens).map_err(|e| JsError::new(&e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_match_the_core() {
        let [base, extended, pct] = param_counts(12, 768, 4, "weighted").unwrap();
        assert!(extended > base);
        assert!((pct - 100.0 * (extended - base) / base).abs() < 1e-9);
        assert!(param_counts(2, 8, 4, "median").is_err());
    }

    #[test]
    fn lag_weights_follow_the_closed_form() {
        let (w, u, max_lag) = (0.5f32, 1.0f32, 10);
        let got = wkv_lag_weights(w, u, max_lag);
        // Token `lag >= 1` steps back has weight exp(-(lag - 1) w); the current one exp(u).
        let raw: Vec<f64> = (0..=max_lag)
            .map(|lag| {
                if lag == 0 {
                    f64::from(u).exp()
                } else {
                    (-((lag - 1) as f64) * f64::from(w)).exp()
                }
            })
            .collect();
        let total: f64 = raw.iter().sum();
        for (g, r) in got.iter().zip(&raw) {
            assert!((f64::from(*g) - r / total).abs() < 1e-6);
        }
    }

    #[test]
    fn trace_is_a_distribution_per_position() {
        let weights = selector_trace("abc:", 3, 1.0, 5).unwrap();
        assert_eq!(weights.len(), 9 * TRACE_PERSPECTIVES);
        for row in weights.chunks(TRACE_PERSPECTIVES) {
            assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        }
        assert!(weights.chunks(4).any(|r| r != [0.25; 4]));
        assert!(selector_trace("", 3, 1.0, 5).is_err());
    }
}

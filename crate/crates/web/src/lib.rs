//! WebAssembly bindings for the static demo page in `www/`.
//!
//! Each demo has a plain Rust function returning a JSON value, which the
//! `#[wasm_bindgen]` wrapper serializes to a string for the page.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use vphype::metrics::ConfusionMatrix;
use vphype::nn::{Fwd, ParamStore};
use vphype::prompts::{Tcsp, EMBED_DIM};
use vphype::tensor::kernels::{self, ScanDims, ScanInputs};
use vphype::tensor::Tape;
use vphype::Tensor;
use wasm_bindgen::prelude::*;

/// Prompt grid side used by the attention demo.
pub const GRID: usize = 4;
const PROMPT_DIM: usize = 8;

/// Output of a single-channel, single-state scan driven by a unit impulse at
/// `t = 0` with constant step `delta` and decay `a < 0`.
pub fn impulse_response(delta: f64, a: f64, len: usize) -> Result<Vec<f64>, String> {
    if !(delta > 0.0) || !(a < 0.0) {
        return Err("delta must be positive and a negative".into());
    }
    if len == 0 || len > 4096 {
        return Err("length must be in 1..=4096".into());
    }
    let mut u = vec![0.0; len];
    u[0] = 1.0;
    let ones = vec![1.0; len];
    let y = kernels::selective_scan(
        ScanInputs {
            u: &u,
            delta: &vec![delta; len],
            a: &[a],
            b: &ones,
            c: &ones,
            d: &[0.0],
        },
        ScanDims {
            batch: 1,
            channels: 1,
            len,
            state: 1,
        },
        None,
    );
    Ok(y)
}

/// First row of a seeded TCSP attention map at temperature `tau`, laid out as
/// a `GRID×GRID` heat map, with its entropy in nats.
pub fn prompt_attention(tau: f64, seed: u64) -> Result<Value, String> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err("tau must be positive".into());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let tcsp = Tcsp::new(&mut store, "demo", PROMPT_DIM, GRID, PROMPT_DIM, &mut rng);
    let shape = store.get(tcsp.p_v).value.shape().to_vec();
    store.get_mut(tcsp.p_v).value = Tensor::randn(shape, 1.0, &mut rng);
    store.get_mut(tcsp.log_tau).value.data_mut()[0] = tau.ln();

    let mut tape = Tape::new();
    let vars = store.bind(&mut tape, |_| false);
    let mut f = Fwd::eval(&mut tape, vars, store.bn_states());
    let e = f.tape.constant(Tensor::randn(vec![1, EMBED_DIM], 1.0, &mut rng));
    let out = tcsp
        .forward(&mut f, e, (GRID, GRID), true, true)
        .map_err(|e| e.to_string())?;
    let row = f.tape.value(out.attention).data()[..GRID * GRID].to_vec();
    let entropy: f64 = -row.iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>();
    Ok(json!({ "grid": GRID, "row": row, "entropy": entropy, "max_entropy": ((GRID * GRID) as f64).ln() }))
}

/// OA/AA/Kappa report for a row-major `k×k` confusion matrix.
pub fn confusion_report(counts: &[u32], k: usize) -> Result<Value, String> {
    if k == 0 || counts.len() != k * k {
        return Err(format!("expected {} counts for {k} classes, got {}", k * k, counts.len()));
    }
    let rows: Vec<Vec<u64>> = counts.chunks(k).map(|r| r.iter().map(|&c| c as u64).collect()).collect();
    let cm = ConfusionMatrix::from_counts(&rows).map_err(|e| e.to_string())?;
    cm.report().map_err(|e| e.to_string())
}

#[wasm_bindgen(js_name = impulseResponse)]
pub fn impulse_response_js(delta: f64, a: f64, len: usize) -> Result<Vec<f64>, JsError> {
    impulse_response(delta, a, len).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = promptAttention)]
pub fn prompt_attention_js(tau: f64, seed: u64) -> Result<String, JsError> {
    prompt_attention(tau, seed).map(|v| v.to_string()).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = confusionReport)]
pub fn confusion_report_js(counts: &[u32], k: usize) -> Result<String, JsError> {
    confusion_report(counts, k).map(|v| v.to_string()).map_err(|e| JsError::new(&e))
}

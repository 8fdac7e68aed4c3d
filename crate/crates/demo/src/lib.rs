//! Browser demo: Hampel weight curves, case weights of a robust fit on
//! simulated contaminated data, and the sparsity path of a sparse fit.
//!
//! Every operation returns a JSON string so the page needs no bindings
//! beyond plain strings and numbers.

use ndarray::Axis;
use serde::Serialize;
use twoblock_core::eval::{
    contaminate, f1_selection, generate_latent_data, mse_coefficients, ContaminationTarget, SimulationConfig,
};
use twoblock_core::rtb::{fit_rtb, RtbConfig};
use twoblock_core::twoblock::{fit_twoblock, ModelHyperparams};
use twoblock_core::weighting::{hampel_psi, standardized_cutoffs, CutoffProbs, WeightFunctionSpec};
use wasm_bindgen::prelude::*;

#[derive(Debug, Serialize)]
pub struct Curve {
    pub cutoffs: [f64; 3],
    pub d: Vec<f64>,
    pub w: Vec<f64>,
}

/// Hampel weights on `points` distances in `[0, max_d]` for median-standardized distances.
pub fn hampel_curve(probs: [f64; 3], df: usize, max_d: f64, points: usize) -> Result<Curve, String> {
    if points < 2 || !(max_d > 0.0) {
        return Err("need at least 2 points and a positive range".into());
    }
    let c = standardized_cutoffs(CutoffProbs(probs), df).map_err(|e| e.to_string())?.0;
    let d: Vec<f64> = (0..points).map(|i| max_d * i as f64 / (points - 1) as f64).collect();
    let w = d
        .iter()
        .map(|&v| hampel_psi(v, c[0], c[1], c[2]))
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    Ok(Curve { cutoffs: c, d, w })
}

#[derive(Debug, Serialize)]
pub struct CaseWeights {
    pub w_x: Vec<f64>,
    pub w_y: Vec<f64>,
    pub w_combined: Vec<f64>,
    pub injected: Vec<usize>,
    pub iterations: usize,
    pub converged: bool,
    pub mse: f64,
}

/// Simulates `n` cases, shifts a fraction of them and fits robust twoblock.
pub fn case_weights(
    n: usize,
    fraction: f64,
    target: &str,
    shift: f64,
    preset: &str,
    seed: u64,
) -> Result<CaseWeights, String> {
    let target: ContaminationTarget = target.parse().map_err(|e: twoblock_core::Error| e.to_string())?;
    let fraction = if target == ContaminationTarget::None { 0.0 } else { fraction };
    let cfg = SimulationConfig {
        n,
        shift_magnitude: shift,
        ..SimulationConfig::desk(seed).with_contamination(fraction, target)
    };
    let run = || -> twoblock_core::Result<CaseWeights> {
        let data = generate_latent_data(&cfg, seed)?;
        let (x, y, injected) = contaminate(data.x.view(), data.y.view(), &cfg)?;
        let rc = RtbConfig::new(3, 3).with_weight_spec(WeightFunctionSpec::hampel(CutoffProbs::preset(preset)?));
        let fit = fit_rtb(x.view(), y.view(), &rc)?;
        Ok(CaseWeights {
            mse: mse_coefficients(fit.model.coefficients.view(), data.b_true.view())?,
            w_x: fit.x_weights.to_vec(),
            w_y: fit.y_weights.to_vec(),
            w_combined: fit.combined_weights.to_vec(),
            injected,
            iterations: fit.iterations,
            converged: fit.converged,
        })
    };
    run().map_err(|e| e.to_string())
}

#[derive(Debug, Serialize)]
pub struct PathPoint {
    pub eta: f64,
    pub nonzero: usize,
    pub f1: f64,
    pub mse: f64,
}

/// Sparse fits over `steps` values of eta in `[0, 0.95]` on data with
/// `p_signal` informative and `p_noise` pure-noise predictors.
pub fn sparsity_path(p_signal: usize, p_noise: usize, steps: usize, seed: u64) -> Result<Vec<PathPoint>, String> {
    if steps < 2 {
        return Err("need at least 2 steps".into());
    }
    let cfg = SimulationConfig {
        p_signal,
        p_noise,
        ..SimulationConfig::desk(seed)
    };
    let run = || -> twoblock_core::Result<Vec<PathPoint>> {
        let data = generate_latent_data(&cfg, seed)?;
        (0..steps)
            .map(|i| {
                let eta = 0.95 * i as f64 / (steps - 1) as f64;
                let model = fit_twoblock(data.x.view(), data.y.view(), &ModelHyperparams::sparse(3, 3, eta, 0.0))?;
                let nonzero = model
                    .x_weights
                    .axis_iter(Axis(0))
                    .filter(|row| row.iter().any(|v| *v != 0.0))
                    .count();
                Ok(PathPoint {
                    eta,
                    nonzero,
                    f1: f1_selection(model.x_weights.view(), &data.signal_mask)?,
                    mse: mse_coefficients(model.coefficients.view(), data.b_true.view())?,
                })
            })
            .collect()
    };
    run().map_err(|e| e.to_string())
}

fn to_js<T: Serialize>(r: Result<T, String>) -> Result<String, JsValue> {
    r.and_then(|v| serde_json::to_string(&v).map_err(|e| e.to_string()))
        .map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen(js_name = hampelCurve)]
pub fn hampel_curve_js(p1: f64, p2: f64, p3: f64, df: usize, max_d: f64, points: usize) -> Result<String, JsValue> {
    to_js(hampel_curve([p1, p2, p3], df, max_d, points))
}

#[wasm_bindgen(js_name = caseWeights)]
pub fn case_weights_js(
    n: usize,
    fraction: f64,
    target: &str,
    shift: f64,
    preset: &str,
    seed: u32,
) -> Result<String, JsValue> {
    to_js(case_weights(n, fraction, target, shift, preset, seed.into()))
}

#[wasm_bindgen(js_name = sparsityPath)]
pub fn sparsity_path_js(p_signal: usize, p_noise: usize, steps: usize, seed: u32) -> Result<String, JsValue> {
    to_js(sparsity_path(p_signal, p_noise, steps, seed.into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn curve_is_one_then_zero() {
        let c = hampel_curve([0.75, 0.9, 0.95], 3, 4.0, 81).unwrap();
        assert_eq!(c.w.len(), 81);
        assert_eq!(c.w[0], 1.0);
        assert_eq!(*c.w.last().unwrap(), 0.0);
        assert!(c.w.windows(2).all(|p| p[1] <= p[0] + 1e-15));
        assert!(hampel_curve([0.9, 0.75, 0.95], 3, 4.0, 81).is_err());
    }

    #[test]
    fn case_weights_report_injected_cases() {
        let r = case_weights(60, 0.1, "y_only", 10.0, "aggressive", 2).unwrap();
        assert_eq!(r.injected.len(), 6);
        assert_eq!(r.w_combined.len(), 60);
        let mean_in: f64 = r.injected.iter().map(|&i| r.w_combined[i]).sum::<f64>() / 6.0;
        let mean_all: f64 = r.w_combined.iter().sum::<f64>() / 60.0;
        assert!(mean_in < mean_all);
        let json = serde_json::to_string(&r).unwrap();
        assert!(json.contains("\"injected\""));
        assert!(case_weights(60, 0.1, "z", 10.0, "aggressive", 2).is_err());
    }

    #[test]
    fn path_gets_sparser() {
        let path = sparsity_path(20, 20, 5, 3).unwrap();
        assert_eq!(path.len(), 5);
        assert_eq!(path[0].nonzero, 40);
        assert!(path.windows(2).all(|p| p[1].nonzero <= p[0].nonzero));
        assert!(path.last().unwrap().nonzero < 40);
    }
}

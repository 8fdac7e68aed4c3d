//! Robust twoblock estimation by iterative case reweighting.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Block, Error, Result};
use crate::robust_scale::{fit_preprocess, CenterKind, PreprocessParams, ScaleKind};
use crate::twoblock::{decompose, Decomposition, ModelHyperparams, TwoblockModel};
use crate::weighting::{score_weights, starting_weights, WeightFunctionSpec, WEIGHT_FLOOR};

pub const DEFAULT_CONV_TOL: f64 = 1e-4;
pub const DEFAULT_MAX_ITER: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RtbConfig {
    /// Component counts, sparsity and the robust preprocessing.
    pub hyperparams: ModelHyperparams,
    pub weight_spec: WeightFunctionSpec,
    pub conv_tol: f64,
    pub max_iter: usize,
    pub weight_floor: f64,
}

impl RtbConfig {
    /// Dense RTB with median/MAD preprocessing and default Hampel weights.
    pub fn new(h_x: usize, h_y: usize) -> Self {
        Self::from_hyperparams(
            ModelHyperparams::dense(h_x, h_y).with_preprocessing(CenterKind::Median, ScaleKind::Mad),
        )
    }

    pub fn sparse(h_x: usize, h_y: usize, eta_x: f64, eta_y: f64) -> Self {
        Self::from_hyperparams(
            ModelHyperparams::sparse(h_x, h_y, eta_x, eta_y)
                .with_preprocessing(CenterKind::Median, ScaleKind::Mad),
        )
    }

    pub fn from_hyperparams(hyperparams: ModelHyperparams) -> Self {
        Self {
            hyperparams,
            weight_spec: WeightFunctionSpec::default(),
            conv_tol: DEFAULT_CONV_TOL,
            max_iter: DEFAULT_MAX_ITER,
            weight_floor: WEIGHT_FLOOR,
        }
    }

    pub fn with_weight_spec(self, weight_spec: WeightFunctionSpec) -> Self {
        Self { weight_spec, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.conv_tol > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "conv_tol must be positive, got {}",
                self.conv_tol
            )));
        }
        if self.max_iter == 0 {
            return Err(Error::InvalidParameter("max_iter must be at least 1".into()));
        }
        if !(self.weight_floor > 0.0 && self.weight_floor < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "weight_floor must lie in (0, 1), got {}",
                self.weight_floor
            )));
        }
        self.weight_spec.probs.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RtbFit {
    /// Final model on the original scale. Its scores are those of the
    /// weighted data.
    pub model: TwoblockModel,
    pub x_weights: Array1<f64>,
    pub y_weights: Array1<f64>,
    pub combined_weights: Array1<f64>,
    /// X scores divided by the square root of the X case weights.
    pub x_scores_unweighted: Array2<f64>,
    pub y_scores_unweighted: Array2<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Squared Frobenius norm of the scaled coefficients per iteration.
    pub coef_norm_trace: Vec<f64>,
}

/// One row of the case-weight diagnostics table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CaseWeight {
    pub index: usize,
    pub w_x: f64,
    pub w_y: f64,
    pub w_combined: f64,
}

impl RtbFit {
    pub fn case_weights(&self) -> Vec<CaseWeight> {
        (0..self.combined_weights.len())
            .map(|i| CaseWeight {
                index: i,
                w_x: self.x_weights[i],
                w_y: self.y_weights[i],
                w_combined: self.combined_weights[i],
            })
            .collect()
    }

    /// Cases whose combined weight is below `threshold`.
    pub fn flagged_cases(&self, threshold: f64) -> Vec<usize> {
        self.combined_weights
            .iter()
            .enumerate()
            .filter(|(_, w)| **w < threshold)
            .map(|(i, _)| i)
            .collect()
    }
}

fn check_weights(w: ArrayView1<f64>, rows: usize) -> Result<()> {
    if w.len() != rows {
        return Err(Error::Shape(format!("{} weights for {rows} rows", w.len())));
    }
    if let Some((i, v)) = w.iter().enumerate().find(|(_, v)| !(**v > 0.0 && v.is_finite())) {
        return Err(Error::InvalidParameter(format!("weight {i} must be positive, got {v}")));
    }
    Ok(())
}

/// Multiplies row i of `z` by `sqrt(w[i])`.
pub fn reweight_rows(z: ArrayView2<f64>, w: ArrayView1<f64>) -> Result<Array2<f64>> {
    check_weights(w, z.nrows())?;
    let mut out = z.to_owned();
    Zip::from(out.rows_mut()).and(w).for_each(|mut r, &wi| r *= wi.sqrt());
    Ok(out)
}

/// Divides row i of `s` by `sqrt(w[i])`.
pub fn unweight_scores(s: ArrayView2<f64>, w: ArrayView1<f64>) -> Result<Array2<f64>> {
    check_weights(w, s.nrows())?;
    let mut out = s.to_owned();
    Zip::from(out.rows_mut()).and(w).for_each(|mut r, &wi| r /= wi.sqrt());
    Ok(out)
}

fn weighted_mean(z: ArrayView2<f64>, w: ArrayView1<f64>) -> Array1<f64> {
    z.t().dot(&w) / w.sum()
}

fn floor_weights(mut w: Array1<f64>, floor: f64, block: Block) -> Result<Array1<f64>> {
    w.mapv_inplace(|v| v.max(floor));
    if w.iter().all(|v| *v <= floor) {
        return Err(Error::DegenerateWeights(block));
    }
    Ok(w)
}

fn has_converged(prev: f64, current: f64, tol: f64) -> bool {
    if current < 1e-12 {
        return true;
    }
    (current - prev).abs() / prev.max(1e-12) < tol
}

struct WeightedFit {
    dec: Decomposition,
    x_mean: Array1<f64>,
    y_mean: Array1<f64>,
}

fn fit_weighted(
    xs: &Array2<f64>,
    ys: &Array2<f64>,
    wx: &Array1<f64>,
    wy: &Array1<f64>,
    hp: &ModelHyperparams,
) -> Result<WeightedFit> {
    let x_mean = weighted_mean(xs.view(), wx.view());
    let y_mean = weighted_mean(ys.view(), wy.view());
    let x0 = reweight_rows((xs - &x_mean).view(), wx.view())?;
    let y0 = reweight_rows((ys - &y_mean).view(), wy.view())?;
    let dec = decompose(x0.view(), y0.view(), hp.h_x, hp.h_y, hp.eta_x, hp.eta_y)?;
    Ok(WeightedFit { dec, x_mean, y_mean })
}

/// Robust twoblock fit.
pub fn fit_rtb(x: ArrayView2<f64>, y: ArrayView2<f64>, cfg: &RtbConfig) -> Result<RtbFit> {
    let (n, p) = x.dim();
    if y.nrows() != n {
        return Err(Error::Shape(format!("X has {n} rows but Y has {}", y.nrows())));
    }
    if n < 4 {
        return Err(Error::InvalidParameter(format!("robust fit needs at least 4 cases, got {n}")));
    }
    let hp = cfg.hyperparams;
    hp.validate(n, p, y.ncols())?;
    cfg.validate()?;

    let x_pre = fit_preprocess(x, hp.center_kind, hp.scale_kind)?;
    let y_pre = fit_preprocess(y, hp.center_kind, hp.scale_kind)?;
    let xs = x_pre.apply(x)?;
    let ys = y_pre.apply(y)?;

    let mut wx = floor_weights(starting_weights(xs.view(), &cfg.weight_spec)?, cfg.weight_floor, Block::X)?;
    let mut wy = floor_weights(starting_weights(ys.view(), &cfg.weight_spec)?, cfg.weight_floor, Block::Y)?;

    let mut trace = Vec::new();
    let mut converged = false;
    let mut last = None;
    let mut t_uw = Array2::zeros((0, 0));
    let mut u_uw = Array2::zeros((0, 0));

    for _ in 0..cfg.max_iter {
        let fit = fit_weighted(&xs, &ys, &wx, &wy, &hp)?;
        let norm = fit.dec.coefficients.iter().map(|b| b * b).sum::<f64>();

        t_uw = unweight_scores(fit.dec.x_scores.view(), wx.view())?;
        u_uw = unweight_scores(fit.dec.y_scores.view(), wy.view())?;
        let new_wx = floor_weights(score_weights(t_uw.view(), &cfg.weight_spec)?, cfg.weight_floor, Block::X)?;
        let new_wy = floor_weights(score_weights(u_uw.view(), &cfg.weight_spec)?, cfg.weight_floor, Block::Y)?;

        let done = trace.last().is_some_and(|&prev| has_converged(prev, norm, cfg.conv_tol));
        trace.push(norm);
        last = Some(fit);
        wx = new_wx;
        wy = new_wy;
        if done {
            converged = true;
            break;
        }
    }
    if !converged {
        log::warn!("robust twoblock did not converge in {} iterations", cfg.max_iter);
    }

    let fit = last.expect("max_iter is at least 1");
    let x_eff = effective_preprocess(&x_pre, &fit.x_mean)?;
    let y_eff = effective_preprocess(&y_pre, &fit.y_mean)?;
    let model = TwoblockModel::from_decomposition(fit.dec, hp, x_eff, y_eff);
    let combined_weights = &wx * &wy;
    Ok(RtbFit {
        model,
        x_weights: wx,
        y_weights: wy,
        combined_weights,
        x_scores_unweighted: t_uw,
        y_scores_unweighted: u_uw,
        iterations: trace.len(),
        converged,
        coef_norm_trace: trace,
    })
}

/// Folds the weighted mean of the scaled data into the centres.
fn effective_preprocess(pre: &PreprocessParams, scaled_mean: &Array1<f64>) -> Result<PreprocessParams> {
    let centers = &pre.centers + &(&pre.scales * scaled_mean);
    PreprocessParams::new(pre.center_kind, pre.scale_kind, centers, pre.scales.clone())
}

/// Indices sorted by increasing weight.
pub fn weight_order(w: ArrayView1<f64>) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..w.len()).collect();
    idx.sort_by(|&a, &b| w[a].total_cmp(&w[b]).then(a.cmp(&b)));
    idx
}

/// True when no row outside `subset` weighs strictly less than a row
/// inside it. Floored weights may tie.
pub fn subset_weighs_least(w: ArrayView1<f64>, subset: &[usize]) -> bool {
    let mut inside = vec![false; w.len()];
    for &i in subset {
        inside[i] = true;
    }
    let max_in = subset.iter().map(|&i| w[i]).fold(f64::NEG_INFINITY, f64::max);
    let min_out = (0..w.len()).filter(|&i| !inside[i]).map(|i| w[i]).fold(f64::INFINITY, f64::min);
    max_in <= min_out
}

/// Means of `w` over the rows in `subset` and over the remaining rows.
pub fn split_means(w: ArrayView1<f64>, subset: &[usize]) -> (f64, f64) {
    let mut inside = vec![false; w.len()];
    for &i in subset {
        inside[i] = true;
    }
    let (mut a, mut na, mut b, mut nb) = (0.0, 0, 0.0, 0);
    for (i, v) in w.iter().enumerate() {
        if inside[i] {
            a += v;
            na += 1;
        } else {
            b += v;
            nb += 1;
        }
    }
    (a / na.max(1) as f64, b / nb.max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::{contaminate, generate_latent_data, ContaminationTarget, SimulationConfig};
    use crate::twoblock::fit_twoblock;
    use crate::weighting::CutoffProbs;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use proptest::prelude::*;

    fn five_outlier_design(target: ContaminationTarget, seed: u64) -> (Array2<f64>, Array2<f64>, Vec<usize>) {
        let cfg = SimulationConfig {
            n: 55,
            contamination_fraction: if target == ContaminationTarget::None { 0.0 } else { 5.0 / 55.0 },
            contamination_target: target,
            ..SimulationConfig::desk(seed)
        };
        let data = generate_latent_data(&cfg, seed).unwrap();
        let (xc, yc, idx) = contaminate(data.x.view(), data.y.view(), &cfg).unwrap();
        (xc, yc, idx)
    }

    #[test]
    fn reweight_examples() {
        let z = array![[2.0, 4.0]];
        assert_eq!(reweight_rows(z.view(), array![0.25].view()).unwrap(), array![[1.0, 2.0]]);
        let ones = Array1::<f64>::ones(1);
        assert_eq!(reweight_rows(z.view(), ones.view()).unwrap(), z);
        assert_eq!(unweight_scores(z.view(), ones.view()).unwrap(), z);
        let s = unweight_scores(array![[3.0, 3.0]].view(), array![0.09].view()).unwrap();
        assert_abs_diff_eq!(s[[0, 0]], 10.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s[[0, 1]], 10.0, epsilon = 1e-12);
        assert!(reweight_rows(z.view(), array![0.0].view()).is_err());
        assert!(reweight_rows(z.view(), array![-1.0].view()).is_err());
        assert!(unweight_scores(z.view(), array![0.0].view()).is_err());
        assert!(unweight_scores(z.view(), array![0.5, 0.5].view()).is_err());
    }

    #[test]
    fn subset_ordering_allows_ties() {
        let w = array![1.0, 1e-6, 0.3, 1e-6, 0.9];
        assert!(subset_weighs_least(w.view(), &[1, 3]));
        assert!(subset_weighs_least(w.view(), &[1]));
        assert!(!subset_weighs_least(w.view(), &[1, 2]));
        assert_eq!(weight_order(w.view()), vec![1, 3, 2, 4, 0]);
    }

    #[test]
    fn identity_weights_collapse_to_classical() {
        let (x, y, _) = five_outlier_design(ContaminationTarget::None, 11);
        let hp = ModelHyperparams::dense(3, 3);
        let classical = fit_twoblock(x.view(), y.view(), &hp).unwrap();
        let cfg = RtbConfig::from_hyperparams(hp).with_weight_spec(WeightFunctionSpec::identity());
        let robust = fit_rtb(x.view(), y.view(), &cfg).unwrap();
        assert!(robust.converged);
        assert!(robust.x_weights.iter().all(|w| *w == 1.0));
        for (a, b) in robust.model.coefficients.iter().zip(classical.coefficients.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-8);
        }
        for (a, b) in robust.model.intercept.iter().zip(classical.intercept.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-8);
        }
    }

    #[test]
    fn y_outliers_get_smallest_y_weights() {
        let (x, y, idx) = five_outlier_design(ContaminationTarget::YOnly, 21);
        let fit = fit_rtb(x.view(), y.view(), &RtbConfig::new(3, 3)).unwrap();
        assert_eq!(idx.len(), 5);
        assert!(subset_weighs_least(fit.y_weights.view(), &idx), "{idx:?} {:?}", fit.y_weights);
        assert!(idx.iter().all(|&i| fit.y_weights[i] < 0.5));
    }

    #[test]
    fn x_outliers_get_smallest_x_weights() {
        let (x, y, idx) = five_outlier_design(ContaminationTarget::XOnly, 22);
        let fit = fit_rtb(x.view(), y.view(), &RtbConfig::new(3, 3)).unwrap();
        assert_eq!(idx.len(), 5);
        assert!(subset_weighs_least(fit.x_weights.view(), &idx), "{idx:?} {:?}", fit.x_weights);
        assert!(idx.iter().all(|&i| fit.x_weights[i] < 0.5));
    }

    #[test]
    fn contaminated_cases_weigh_less_on_average() {
        let (x, y, idx) = five_outlier_design(ContaminationTarget::Both, 23);
        let fit = fit_rtb(x.view(), y.view(), &RtbConfig::new(3, 3)).unwrap();
        for w in [&fit.x_weights, &fit.y_weights] {
            let (bad, good) = split_means(w.view(), &idx);
            assert!(bad < good, "{bad} vs {good}");
        }
    }

    #[test]
    fn trace_satisfies_convergence_when_flagged() {
        let (x, y, _) = five_outlier_design(ContaminationTarget::YOnly, 24);
        let cfg = RtbConfig::sparse(3, 3, 0.3, 0.0);
        let fit = fit_rtb(x.view(), y.view(), &cfg).unwrap();
        assert_eq!(fit.iterations, fit.coef_norm_trace.len());
        if fit.converged {
            let t = &fit.coef_norm_trace;
            let (prev, cur) = (t[t.len() - 2], t[t.len() - 1]);
            assert!(cur < 1e-12 || (cur - prev).abs() / prev.max(1e-12) < cfg.conv_tol);
        }
    }

    #[test]
    fn non_convergence_is_reported_not_raised() {
        let (x, y, _) = five_outlier_design(ContaminationTarget::Both, 25);
        let cfg = RtbConfig {
            max_iter: 1,
            ..RtbConfig::new(2, 2)
        };
        let fit = fit_rtb(x.view(), y.view(), &cfg).unwrap();
        assert!(!fit.converged);
        assert_eq!(fit.iterations, 1);
    }

    #[test]
    fn standard_cutoffs_downweight_less() {
        let (x, y, _) = five_outlier_design(ContaminationTarget::None, 26);
        let aggressive = fit_rtb(x.view(), y.view(), &RtbConfig::new(3, 3)).unwrap();
        let cfg = RtbConfig::new(3, 3).with_weight_spec(WeightFunctionSpec::hampel(CutoffProbs::STANDARD));
        let standard = fit_rtb(x.view(), y.view(), &cfg).unwrap();
        assert!(standard.combined_weights.sum() >= aggressive.combined_weights.sum());
    }

    #[test]
    fn invalid_configuration() {
        let x = Array2::<f64>::zeros((3, 2));
        assert!(fit_rtb(x.view(), x.view(), &RtbConfig::new(1, 1)).is_err());
        let cfg = RtbConfig {
            conv_tol: 0.0,
            ..RtbConfig::new(1, 1)
        };
        assert!(cfg.validate().is_err());
        let cfg = RtbConfig {
            max_iter: 0,
            ..RtbConfig::new(1, 1)
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn fit_serializes_round_trip() {
        let (x, y, _) = five_outlier_design(ContaminationTarget::YOnly, 27);
        let fit = fit_rtb(x.view(), y.view(), &RtbConfig::new(2, 2)).unwrap();
        let text = serde_json::to_string(&fit).unwrap();
        let back: RtbFit = serde_json::from_str(&text).unwrap();
        assert_eq!(back, fit);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn weights_are_bounded_and_combine_exactly(seed in 0u64..10_000, frac in 0.0f64..0.2) {
            let cfg = SimulationConfig {
                n: 40,
                contamination_fraction: frac,
                contamination_target: if frac > 0.0 { ContaminationTarget::Both } else { ContaminationTarget::None },
                ..SimulationConfig::desk(seed)
            };
            let data = generate_latent_data(&cfg, seed).unwrap();
            let (xc, yc, _) = contaminate(data.x.view(), data.y.view(), &cfg).unwrap();
            let fit = fit_rtb(xc.view(), yc.view(), &RtbConfig::new(2, 2)).unwrap();
            for w in fit.x_weights.iter().chain(fit.y_weights.iter()) {
                prop_assert!((WEIGHT_FLOOR..=1.0).contains(w));
            }
            for i in 0..40 {
                prop_assert_eq!(fit.combined_weights[i], fit.x_weights[i] * fit.y_weights[i]);
            }
        }

        #[test]
        fn reweight_round_trip(vals in proptest::collection::vec(-1e3f64..1e3, 6), ws in proptest::collection::vec(1e-6f64..1.0, 3)) {
            let z = Array2::from_shape_vec((3, 2), vals).unwrap();
            let w = Array1::from(ws);
            let back = unweight_scores(reweight_rows(z.view(), w.view()).unwrap().view(), w.view()).unwrap();
            for (a, b) in back.iter().zip(z.iter()) {
                prop_assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
            }
        }
    }
}

//! Simulation from a latent variable model, contamination, evaluation
//! metrics, a scenario grid runner and cross-validated tuning.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use nalgebra::DMatrix;
use ndarray::{concatenate, Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rtb::{fit_rtb, RtbConfig};
use crate::robust_scale::{column_std, CenterKind, ScaleKind};
use crate::twoblock::{fit_twoblock, ModelHyperparams, TwoblockModel, SELECTION_THRESHOLD};
use crate::weighting::{CutoffProbs, WeightFunctionSpec};

pub const DEFAULT_SHIFT: f64 = 10.0;
pub const DEFAULT_REPEATS: usize = 50;
/// Upper fraction of casewise errors dropped by the robust CV criterion.
pub const CV_TRIM: f64 = 0.10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContaminationTarget {
    None,
    XOnly,
    YOnly,
    Both,
}

impl ContaminationTarget {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::None => "none",
            Self::XOnly => "x_only",
            Self::YOnly => "y_only",
            Self::Both => "both",
        }
    }

    fn hits_x(&self) -> bool {
        matches!(self, Self::XOnly | Self::Both)
    }

    fn hits_y(&self) -> bool {
        matches!(self, Self::YOnly | Self::Both)
    }
}

impl fmt::Display for ContaminationTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ContaminationTarget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "x_only" | "x" => Ok(Self::XOnly),
            "y_only" | "y" => Ok(Self::YOnly),
            "both" => Ok(Self::Both),
            other => Err(Error::InvalidParameter(format!("unknown contamination target '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimulationConfig {
    pub n: usize,
    pub k: usize,
    pub q: usize,
    pub p_signal: usize,
    pub p_noise: usize,
    pub sigma_e: f64,
    pub sigma_f: f64,
    pub contamination_fraction: f64,
    pub contamination_target: ContaminationTarget,
    pub shift_magnitude: f64,
    pub seed: u64,
}

impl SimulationConfig {
    /// n = 100, k = 3, q = 4, p = 20 signal variables, noise sd 0.5, clean.
    pub fn desk(seed: u64) -> Self {
        Self {
            n: 100,
            k: 3,
            q: 4,
            p_signal: 20,
            p_noise: 0,
            sigma_e: 0.5,
            sigma_f: 0.5,
            contamination_fraction: 0.0,
            contamination_target: ContaminationTarget::None,
            shift_magnitude: DEFAULT_SHIFT,
            seed,
        }
    }

    pub fn with_contamination(self, fraction: f64, target: ContaminationTarget) -> Self {
        Self {
            contamination_fraction: fraction,
            contamination_target: target,
            ..self
        }
    }

    pub fn p(&self) -> usize {
        self.p_signal + self.p_noise
    }

    /// Number of contaminated rows.
    pub fn outlier_count(&self) -> usize {
        (self.contamination_fraction * self.n as f64 - 1e-9).ceil().max(0.0) as usize
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if self.k == 0 || self.q == 0 || self.n < 2 {
            return bad("n must be at least 2 and k, q at least 1".into());
        }
        if self.k > self.p_signal.min(self.n) {
            return bad(format!(
                "k = {} exceeds min(p_signal, n) = {}",
                self.k,
                self.p_signal.min(self.n)
            ));
        }
        if !(self.sigma_e >= 0.0 && self.sigma_f >= 0.0) {
            return bad("noise standard deviations must be nonnegative".into());
        }
        if !(0.0..1.0).contains(&self.contamination_fraction) {
            return bad(format!(
                "contamination fraction must lie in [0, 1), got {}",
                self.contamination_fraction
            ));
        }
        if !self.shift_magnitude.is_finite() {
            return bad("shift magnitude must be finite".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedData {
    pub x: Array2<f64>,
    pub y: Array2<f64>,
    pub b_true: Array2<f64>,
    pub signal_mask: Vec<bool>,
    pub scores: Array2<f64>,
    pub x_loadings: Array2<f64>,
    pub y_loadings: Array2<f64>,
}

fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, sd: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| {
        let z: f64 = StandardNormal.sample(rng);
        sd * z
    })
}

fn orthonormalize(a: &Array2<f64>) -> Array2<f64> {
    let (r, c) = a.dim();
    let qr = DMatrix::from_row_iterator(r, c, a.iter().cloned()).qr();
    let q = qr.q();
    let rr = qr.r();
    Array2::from_shape_fn((r, c), |(i, j)| q[(i, j)] * rr[(j, j)].signum())
}

/// X = T P' + E with noise columns appended, Y = T C + F.
pub fn generate_latent_data(cfg: &SimulationConfig, seed: u64) -> Result<SimulatedData> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = normal_matrix(&mut rng, cfg.n, cfg.k, 1.0);
    let p = orthonormalize(&normal_matrix(&mut rng, cfg.p_signal, cfg.k, 1.0));
    let c = normal_matrix(&mut rng, cfg.k, cfg.q, 1.0);
    let e = normal_matrix(&mut rng, cfg.n, cfg.p_signal, cfg.sigma_e);
    let f = normal_matrix(&mut rng, cfg.n, cfg.q, cfg.sigma_f);
    let noise = normal_matrix(&mut rng, cfg.n, cfg.p_noise, cfg.sigma_e);

    let signal = t.dot(&p.t()) + &e;
    let x = concatenate![Axis(1), signal, noise];
    let y = t.dot(&c) + &f;
    let b_true = concatenate![Axis(0), p.dot(&c), Array2::zeros((cfg.p_noise, cfg.q))];
    let signal_mask = (0..cfg.p()).map(|j| j < cfg.p_signal).collect();
    Ok(SimulatedData {
        x,
        y,
        b_true,
        signal_mask,
        scores: t,
        x_loadings: p,
        y_loadings: c,
    })
}

/// Adds the shift to every entry of the targeted block(s) in a seeded
/// random subset of rows. Returns the sorted contaminated indices.
pub fn contaminate(
    x: ArrayView2<f64>,
    y: ArrayView2<f64>,
    cfg: &SimulationConfig,
) -> Result<(Array2<f64>, Array2<f64>, Vec<usize>)> {
    let n = x.nrows();
    if y.nrows() != n {
        return Err(Error::Shape(format!("X has {n} rows but Y has {}", y.nrows())));
    }
    let mut xc = x.to_owned();
    let mut yc = y.to_owned();
    if cfg.contamination_fraction == 0.0 {
        return Ok((xc, yc, Vec::new()));
    }
    if cfg.contamination_target == ContaminationTarget::None {
        return Err(Error::InvalidParameter(
            "contamination fraction is positive but the target is none".into(),
        ));
    }
    let count = SimulationConfig { n, ..*cfg }.outlier_count();
    if count == 0 || count > n {
        return Err(Error::InvalidParameter(format!(
            "contamination fraction {} gives {count} of {n} rows",
            cfg.contamination_fraction
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut idx = order[..count].to_vec();
    idx.sort_unstable();
    for &i in &idx {
        if cfg.contamination_target.hits_x() {
            xc.row_mut(i).mapv_inplace(|v| v + cfg.shift_magnitude);
        }
        if cfg.contamination_target.hits_y() {
            yc.row_mut(i).mapv_inplace(|v| v + cfg.shift_magnitude);
        }
    }
    Ok((xc, yc, idx))
}

/// Squared Frobenius distance divided by the number of entries.
pub fn mse_coefficients(b_hat: ArrayView2<f64>, b_true: ArrayView2<f64>) -> Result<f64> {
    if b_hat.dim() != b_true.dim() {
        return Err(Error::Shape(format!(
            "coefficient shapes differ: {:?} vs {:?}",
            b_hat.dim(),
            b_true.dim()
        )));
    }
    if b_hat.is_empty() {
        return Err(Error::Empty("coefficient matrix"));
    }
    let ss: f64 = b_hat.iter().zip(b_true.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(ss / b_hat.len() as f64)
}

/// Variables with any weight above the selection threshold.
pub fn selected_variables(w: ArrayView2<f64>) -> Vec<bool> {
    w.axis_iter(Axis(0))
        .map(|r| r.iter().any(|v| v.abs() > SELECTION_THRESHOLD))
        .collect()
}

/// Harmonic mean of precision and recall of the selected variables
/// against `signal_mask`; 0 when nothing is selected.
pub fn f1_selection(w: ArrayView2<f64>, signal_mask: &[bool]) -> Result<f64> {
    if w.nrows() != signal_mask.len() {
        return Err(Error::Shape(format!(
            "{} weight rows but mask of length {}",
            w.nrows(),
            signal_mask.len()
        )));
    }
    let selected = selected_variables(w);
    let tp = selected.iter().zip(signal_mask).filter(|(s, m)| **s && **m).count() as f64;
    let n_sel = selected.iter().filter(|s| **s).count() as f64;
    let n_true = signal_mask.iter().filter(|m| **m).count() as f64;
    if n_sel == 0.0 || tp == 0.0 {
        return Ok(0.0);
    }
    let precision = tp / n_sel;
    let recall = tp / n_true;
    Ok(2.0 * precision * recall / (precision + recall))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "tb")]
    TbDense,
    #[serde(rename = "tb-sparse")]
    TbSparse,
    #[serde(rename = "rtb")]
    RtbDense,
    #[serde(rename = "rtb-sparse")]
    RtbSparse,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::TbDense, Method::TbSparse, Method::RtbDense, Method::RtbSparse];

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::TbDense => "tb",
            Self::TbSparse => "tb-sparse",
            Self::RtbDense => "rtb",
            Self::RtbSparse => "rtb-sparse",
        }
    }

    pub fn is_sparse(&self) -> bool {
        matches!(self, Self::TbSparse | Self::RtbSparse)
    }

    pub fn is_robust(&self) -> bool {
        matches!(self, Self::RtbDense | Self::RtbSparse)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown method '{s}'")))
    }
}

/// A simulation design plus the model settings shared by all methods.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub id: String,
    pub sim: SimulationConfig,
    pub h_x: usize,
    pub h_y: usize,
    /// Sparsity used by the sparse methods; dense methods ignore it.
    pub eta_x: f64,
    pub eta_y: f64,
    pub cutoffs: CutoffProbs,
}

impl Scenario {
    pub fn new(id: impl Into<String>, sim: SimulationConfig, h_x: usize, h_y: usize) -> Self {
        Self {
            id: id.into(),
            sim,
            h_x,
            h_y,
            eta_x: 0.5,
            eta_y: 0.0,
            cutoffs: CutoffProbs::default(),
        }
    }

    pub fn hyperparams(&self, method: Method) -> ModelHyperparams {
        let hp = if method.is_sparse() {
            ModelHyperparams::sparse(self.h_x, self.h_y, self.eta_x, self.eta_y)
        } else {
            ModelHyperparams::dense(self.h_x, self.h_y)
        };
        if method.is_robust() {
            hp.with_preprocessing(CenterKind::Median, ScaleKind::Mad)
        } else {
            hp
        }
    }

    pub fn fit(&self, method: Method, x: ArrayView2<f64>, y: ArrayView2<f64>) -> Result<TwoblockModel> {
        let hp = self.hyperparams(method);
        if method.is_robust() {
            let cfg = RtbConfig::from_hyperparams(hp).with_weight_spec(WeightFunctionSpec::hampel(self.cutoffs));
            Ok(fit_rtb(x, y, &cfg)?.model)
        } else {
            fit_twoblock(x, y, &hp)
        }
    }
}

/// Outcome of one method on one repeat; `None` when the fit failed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RepeatOutcome {
    pub seed: u64,
    pub mse: Option<f64>,
    pub f1: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioResult {
    pub scenario_id: String,
    pub config: SimulationConfig,
    pub method: Method,
    pub mean_mse: f64,
    pub sd_mse: f64,
    /// Only reported for sparse methods.
    pub mean_f1: Option<f64>,
    pub repeats: usize,
    pub failures: usize,
    pub outcomes: Vec<RepeatOutcome>,
}

/// Mean and n-1 standard deviation; the deviation is 0 for one value.
pub fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let ss = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>();
    (mean, (ss / (n - 1) as f64).sqrt())
}

impl ScenarioResult {
    fn aggregate(scenario: &Scenario, method: Method, outcomes: Vec<RepeatOutcome>) -> Self {
        let mses: Vec<f64> = outcomes.iter().filter_map(|o| o.mse).collect();
        let (mean_mse, sd_mse) = mean_sd(&mses);
        let mean_f1 = method.is_sparse().then(|| {
            let f1s: Vec<f64> = outcomes.iter().filter_map(|o| o.f1).collect();
            mean_sd(&f1s).0
        });
        Self {
            scenario_id: scenario.id.clone(),
            config: scenario.sim,
            method,
            mean_mse,
            sd_mse,
            mean_f1,
            repeats: outcomes.len(),
            failures: outcomes.len() - mses.len(),
            outcomes,
        }
    }

    /// Per-repeat MSE values, `NaN` for failed fits.
    pub fn mse_values(&self) -> Vec<f64> {
        self.outcomes.iter().map(|o| o.mse.unwrap_or(f64::NAN)).collect()
    }
}

#[cfg(feature = "parallel")]
fn par_map<T: Sync, U: Send>(items: &[T], f: impl Fn(&T) -> U + Sync + Send) -> Vec<U> {
    use rayon::prelude::*;
    items.par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
fn par_map<T: Sync, U: Send>(items: &[T], f: impl Fn(&T) -> U + Sync + Send) -> Vec<U> {
    items.iter().map(f).collect()
}

fn run_repeat(scenario: &Scenario, methods: &[Method], seed: u64) -> Vec<RepeatOutcome> {
    let failed = || vec![RepeatOutcome { seed, mse: None, f1: None }; methods.len()];
    let sim = SimulationConfig { seed, ..scenario.sim };
    let Ok(data) = generate_latent_data(&sim, seed) else {
        return failed();
    };
    let Ok((x, y, _)) = contaminate(data.x.view(), data.y.view(), &sim) else {
        return failed();
    };
    methods
        .iter()
        .map(|&m| match scenario.fit(m, x.view(), y.view()) {
            Ok(model) => RepeatOutcome {
                seed,
                mse: mse_coefficients(model.coefficients.view(), data.b_true.view()).ok(),
                f1: f1_selection(model.x_weights.view(), &data.signal_mask).ok(),
            },
            Err(e) => {
                log::warn!("scenario {} method {m} seed {seed}: {e}", scenario.id);
                RepeatOutcome { seed, mse: None, f1: None }
            }
        })
        .collect()
}

/// Fits every method on freshly generated data per repeat. Repeat `r`
/// uses seed `seed + r`, and all methods see the same data.
pub fn run_scenario_grid(
    scenarios: &[Scenario],
    methods: &[Method],
    repeats: usize,
    seed: u64,
) -> Result<Vec<ScenarioResult>> {
    if repeats == 0 {
        return Err(Error::InvalidParameter("repeats must be at least 1".into()));
    }
    if methods.is_empty() {
        return Err(Error::InvalidParameter("no methods given".into()));
    }
    for s in scenarios {
        s.sim.validate()?;
    }
    let jobs: Vec<(usize, u64)> = (0..scenarios.len())
        .flat_map(|i| (0..repeats as u64).map(move |r| (i, seed + r)))
        .collect();
    let outcomes = par_map(&jobs, |&(i, s)| run_repeat(&scenarios[i], methods, s));

    let mut results = Vec::with_capacity(scenarios.len() * methods.len());
    for (i, scenario) in scenarios.iter().enumerate() {
        let rows = &outcomes[i * repeats..(i + 1) * repeats];
        for (m, &method) in methods.iter().enumerate() {
            let per_repeat = rows.iter().map(|r| r[m]).collect();
            results.push(ScenarioResult::aggregate(scenario, method, per_repeat));
        }
    }
    Ok(results)
}

/// Writes the aggregate table as CSV.
pub fn write_results_csv<W: Write>(out: W, results: &[ScenarioResult]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "scenario_id",
        "p",
        "contamination_fraction",
        "contamination_target",
        "method",
        "mean_mse",
        "sd_mse",
        "mean_f1",
        "failures",
        "repeats",
    ])?;
    for r in results {
        w.write_record([
            r.scenario_id.clone(),
            r.config.p().to_string(),
            r.config.contamination_fraction.to_string(),
            r.config.contamination_target.to_string(),
            r.method.to_string(),
            r.mean_mse.to_string(),
            r.sd_mse.to_string(),
            r.mean_f1.map(|f| f.to_string()).unwrap_or_default(),
            r.failures.to_string(),
            r.repeats.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Which estimator cross-validation refits on each fold.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FitMethod {
    Classical,
    /// RTB with these settings; the hyperparameters come from the grid.
    Robust(RtbConfig),
}

impl FitMethod {
    fn fit(&self, x: ArrayView2<f64>, y: ArrayView2<f64>, hp: &ModelHyperparams) -> Result<TwoblockModel> {
        match self {
            Self::Classical => fit_twoblock(x, y, hp),
            Self::Robust(cfg) => {
                let cfg = RtbConfig {
                    hyperparams: *hp,
                    ..*cfg
                };
                Ok(fit_rtb(x, y, &cfg)?.model)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvRow {
    pub hyperparams: ModelHyperparams,
    /// Infinite when some fold failed to fit.
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvOutcome {
    pub best: ModelHyperparams,
    pub table: Vec<CvRow>,
}

/// Mean of the values after dropping the largest `trim` fraction.
pub fn upper_trimmed_mean(values: &[f64], trim: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let keep = v.len() - (trim * v.len() as f64).floor() as usize;
    let keep = keep.max(1);
    v[..keep].iter().sum::<f64>() / keep as f64
}

/// Assigns each row a fold after a seeded shuffle.
pub fn fold_assignment(n: usize, folds: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut fold = vec![0; n];
    for (pos, &i) in order.iter().enumerate() {
        fold[i] = pos % folds;
    }
    fold
}

fn casewise_errors(
    method: &FitMethod,
    x: ArrayView2<f64>,
    y: ArrayView2<f64>,
    hp: &ModelHyperparams,
    fold: &[usize],
    folds: usize,
) -> Result<Vec<f64>> {
    let mut errors = Vec::with_capacity(x.nrows());
    for f in 0..folds {
        let train: Vec<usize> = (0..fold.len()).filter(|&i| fold[i] != f).collect();
        let test: Vec<usize> = (0..fold.len()).filter(|&i| fold[i] == f).collect();
        let (xt, yt) = (x.select(Axis(0), &train), y.select(Axis(0), &train));
        let model = method.fit(xt.view(), yt.view(), hp)?;
        let scale: Array1<f64> = yt.axis_iter(Axis(1)).map(column_std).collect();
        if let Some(column) = scale.iter().position(|s| !(*s > 0.0)) {
            return Err(Error::ZeroScale { column });
        }
        let pred = model.predict(x.select(Axis(0), &test).view())?;
        let resid = (&y.select(Axis(0), &test) - &pred) / &scale;
        errors.extend(resid.axis_iter(Axis(0)).map(|r| r.mapv(|v| v * v).mean().unwrap()));
    }
    Ok(errors)
}

fn prefer(a: &CvRow, b: &CvRow) -> std::cmp::Ordering {
    let tie = a.score == b.score
        || (a.score.is_finite() && (a.score - b.score).abs() <= 1e-10 * a.score.abs().max(b.score.abs()));
    let by_score = if tie {
        std::cmp::Ordering::Equal
    } else {
        a.score.total_cmp(&b.score)
    };
    by_score
        .then(a.hyperparams.h_x.cmp(&b.hyperparams.h_x))
        .then(a.hyperparams.h_y.cmp(&b.hyperparams.h_y))
        .then(b.hyperparams.eta_x.total_cmp(&a.hyperparams.eta_x))
}

/// Picks the grid point with the lowest score; near-equal scores are
/// broken by smaller h_x, then smaller h_y, then larger eta_x.
pub fn select_best(table: &[CvRow]) -> Option<&CvRow> {
    table.iter().filter(|r| r.score.is_finite()).min_by(|a, b| prefer(a, b))
}

/// k-fold cross-validation of a hyperparameter grid. Errors are squared
/// residuals standardized by the training-fold standard deviation of each
/// response and averaged over responses; `robust` replaces the mean over
/// cases by a 10% upper-trimmed mean.
pub fn cross_validate(
    x: ArrayView2<f64>,
    y: ArrayView2<f64>,
    grid: &[ModelHyperparams],
    folds: usize,
    robust: bool,
    method: FitMethod,
    seed: u64,
) -> Result<CvOutcome> {
    let n = x.nrows();
    if grid.is_empty() {
        return Err(Error::Empty("hyperparameter grid"));
    }
    if y.nrows() != n {
        return Err(Error::Shape(format!("X has {n} rows but Y has {}", y.nrows())));
    }
    if folds < 2 || n < folds {
        return Err(Error::InvalidParameter(format!("need 2 <= folds <= n, got {folds} folds for {n} cases")));
    }
    let fold = fold_assignment(n, folds, seed);
    let table: Vec<CvRow> = par_map(grid, |hp| {
        let score = match casewise_errors(&method, x, y, hp, &fold, folds) {
            Ok(e) if robust => upper_trimmed_mean(&e, CV_TRIM),
            Ok(e) => e.iter().sum::<f64>() / e.len() as f64,
            Err(err) => {
                log::warn!("grid point {hp:?} failed: {err}");
                f64::INFINITY
            }
        };
        CvRow {
            hyperparams: *hp,
            score: if score.is_nan() { f64::INFINITY } else { score },
        }
    });
    let best = select_best(&table)
        .ok_or_else(|| Error::InvalidParameter("every grid point failed to fit".into()))?
        .hyperparams;
    Ok(CvOutcome { best, table })
}

/// Writes the CV table as CSV.
pub fn write_cv_csv<W: Write>(out: W, table: &[CvRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["h_x", "h_y", "eta_x", "eta_y", "score"])?;
    for r in table {
        let hp = r.hyperparams;
        w.write_record([
            hp.h_x.to_string(),
            hp.h_y.to_string(),
            hp.eta_x.to_string(),
            hp.eta_y.to_string(),
            r.score.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Cartesian grid over component counts and X sparsity.
pub fn hyperparameter_grid(
    h_x: &[usize],
    h_y: &[usize],
    eta_x: &[f64],
    eta_y: f64,
    center_kind: CenterKind,
    scale_kind: ScaleKind,
) -> Vec<ModelHyperparams> {
    let mut grid = Vec::new();
    for &hx in h_x {
        for &hy in h_y {
            for &ex in eta_x {
                grid.push(
                    ModelHyperparams::sparse(hx, hy, ex, eta_y).with_preprocessing(center_kind, scale_kind),
                );
            }
        }
    }
    grid
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn generator_shapes_and_truth() {
        let cfg = SimulationConfig::desk(1);
        let d = generate_latent_data(&cfg, 1).unwrap();
        assert_eq!(d.x.dim(), (100, 20));
        assert_eq!(d.y.dim(), (100, 4));
        assert_eq!(d.b_true.dim(), (20, 4));
        assert!(d.signal_mask.iter().all(|m| *m));

        let cfg = SimulationConfig { p_noise: 7, ..cfg };
        let d = generate_latent_data(&cfg, 1).unwrap();
        assert_eq!(d.x.dim(), (100, 27));
        assert_eq!(d.b_true.dim(), (27, 4));
        assert!(d.b_true.slice(ndarray::s![20.., ..]).iter().all(|v| *v == 0.0));
        assert_eq!(d.signal_mask.iter().filter(|m| **m).count(), 20);
    }

    #[test]
    fn noiseless_generator_is_exact() {
        let cfg = SimulationConfig {
            sigma_e: 0.0,
            sigma_f: 0.0,
            ..SimulationConfig::desk(2)
        };
        let d = generate_latent_data(&cfg, 2).unwrap();
        assert_eq!(d.y, d.scores.dot(&d.y_loadings));
        assert_eq!(d.x, d.scores.dot(&d.x_loadings.t()));
        // Y = X B_true since P'P = I
        let fitted = d.x.dot(&d.b_true);
        for (a, b) in fitted.iter().zip(d.y.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-10);
        }
    }

    #[test]
    fn loadings_are_orthonormal() {
        for seed in 0..100 {
            let d = generate_latent_data(&SimulationConfig::desk(seed), seed).unwrap();
            let g = d.x_loadings.t().dot(&d.x_loadings);
            for ((i, j), v) in g.indexed_iter() {
                let e = if i == j { 1.0 } else { 0.0 };
                assert!((v - e).abs() < 1e-10, "seed {seed}: {v}");
            }
        }
    }

    #[test]
    fn generator_rejects_too_many_components() {
        let cfg = SimulationConfig {
            k: 21,
            ..SimulationConfig::desk(0)
        };
        assert!(generate_latent_data(&cfg, 0).is_err());
    }

    #[test]
    fn contamination_examples() {
        let cfg = SimulationConfig::desk(3);
        let d = generate_latent_data(&cfg, 3).unwrap();
        let (xc, yc, idx) = contaminate(d.x.view(), d.y.view(), &cfg).unwrap();
        assert_eq!((xc, yc), (d.x.clone(), d.y.clone()));
        assert!(idx.is_empty());

        let cfg_x = cfg.with_contamination(0.10, ContaminationTarget::XOnly);
        let (xc, yc, idx) = contaminate(d.x.view(), d.y.view(), &cfg_x).unwrap();
        assert_eq!(idx.len(), 10);
        assert_eq!(yc, d.y);
        let changed: Vec<usize> = (0..100).filter(|&i| xc.row(i) != d.x.row(i)).collect();
        assert_eq!(changed, idx);
        for &i in &idx {
            for (a, b) in xc.row(i).iter().zip(d.x.row(i).iter()) {
                assert_abs_diff_eq!(a - b, 10.0, epsilon = 1e-12);
            }
        }

        let cfg_b = cfg.with_contamination(0.10, ContaminationTarget::Both);
        let (xb, yb, idx_b) = contaminate(d.x.view(), d.y.view(), &cfg_b).unwrap();
        let cx: Vec<usize> = (0..100).filter(|&i| xb.row(i) != d.x.row(i)).collect();
        let cy: Vec<usize> = (0..100).filter(|&i| yb.row(i) != d.y.row(i)).collect();
        assert_eq!(cx, idx_b);
        assert_eq!(cy, idx_b);

        let bad = cfg.with_contamination(0.1, ContaminationTarget::None);
        assert!(contaminate(d.x.view(), d.y.view(), &bad).is_err());
    }

    #[test]
    fn mse_examples() {
        let b = array![[1.0, -2.0], [0.5, 3.0]];
        assert_eq!(mse_coefficients(b.view(), b.view()).unwrap(), 0.0);
        let shifted = &b + 1.0;
        assert_abs_diff_eq!(mse_coefficients(shifted.view(), b.view()).unwrap(), 1.0, epsilon = 1e-15);
        let scaled = &b + 3.0;
        assert_abs_diff_eq!(mse_coefficients(scaled.view(), b.view()).unwrap(), 9.0, epsilon = 1e-12);
        assert!(mse_coefficients(b.view(), array![[1.0, 2.0]].view()).is_err());
    }

    #[test]
    fn f1_examples() {
        let mask: Vec<bool> = (0..30).map(|j| j < 20).collect();
        let exact = Array2::from_shape_fn((30, 2), |(j, _)| if j < 20 { 0.3 } else { 0.0 });
        assert_eq!(f1_selection(exact.view(), &mask).unwrap(), 1.0);
        let all = Array2::from_elem((30, 2), 0.1);
        // precision 2/3, recall 1
        assert_abs_diff_eq!(f1_selection(all.view(), &mask).unwrap(), 0.8, epsilon = 1e-12);
        let none = Array2::<f64>::zeros((30, 2));
        assert_eq!(f1_selection(none.view(), &mask).unwrap(), 0.0);
        assert!(f1_selection(none.view(), &mask[..10]).is_err());
    }

    #[test]
    fn single_repeat_grid_has_zero_sd() {
        let scenario = Scenario::new("clean", SimulationConfig::desk(0), 3, 3);
        let res = run_scenario_grid(&[scenario], &[Method::TbDense], 1, 42).unwrap();
        assert_eq!(res.len(), 1);
        assert_eq!(res[0].sd_mse, 0.0);
        assert_eq!(res[0].repeats, 1);
        assert_eq!(res[0].failures, 0);
        assert!(res[0].mean_f1.is_none());
    }

    #[test]
    fn grid_is_deterministic_and_aggregates_match() {
        let scenarios = vec![
            Scenario::new("clean", SimulationConfig::desk(0), 3, 3),
            Scenario::new(
                "y10",
                SimulationConfig::desk(0).with_contamination(0.1, ContaminationTarget::YOnly),
                3,
                3,
            ),
        ];
        let a = run_scenario_grid(&scenarios, &Method::ALL, 4, 7).unwrap();
        let b = run_scenario_grid(&scenarios, &Method::ALL, 4, 7).unwrap();
        assert_eq!(a, b);
        let mut csv_a = Vec::new();
        let mut csv_b = Vec::new();
        write_results_csv(&mut csv_a, &a).unwrap();
        write_results_csv(&mut csv_b, &b).unwrap();
        assert_eq!(csv_a, csv_b);
        assert_eq!(a.len(), 8);
        for r in &a {
            let seeds: Vec<u64> = r.outcomes.iter().map(|o| o.seed).collect();
            assert_eq!(seeds, vec![7, 8, 9, 10]);
            let vals: Vec<f64> = r.outcomes.iter().filter_map(|o| o.mse).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let sd = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (vals.len() - 1) as f64).sqrt();
            assert_abs_diff_eq!(r.mean_mse, mean, epsilon = 1e-15);
            assert_abs_diff_eq!(r.sd_mse, sd, epsilon = 1e-15);
            assert_eq!(r.mean_f1.is_some(), r.method.is_sparse());
        }
    }

    #[test]
    fn failed_fits_are_counted() {
        // h_x larger than p fails for every repeat
        let sim = SimulationConfig {
            p_signal: 3,
            ..SimulationConfig::desk(0)
        };
        let res = run_scenario_grid(&[Scenario::new("bad", sim, 4, 2)], &[Method::TbDense], 3, 0).unwrap();
        assert_eq!(res[0].failures, 3);
        assert!(res[0].mean_mse.is_nan());
    }

    #[test]
    fn trimmed_mean_drops_largest() {
        let v: Vec<f64> = (1..=10).map(f64::from).collect();
        assert_abs_diff_eq!(upper_trimmed_mean(&v, 0.1), 5.0, epsilon = 1e-15);
        assert_abs_diff_eq!(upper_trimmed_mean(&v, 0.0), 5.5, epsilon = 1e-15);
    }

    #[test]
    fn folds_are_balanced() {
        let f = fold_assignment(23, 5, 1);
        let counts: Vec<usize> = (0..5).map(|k| f.iter().filter(|v| **v == k).count()).collect();
        assert!(counts.iter().all(|c| *c == 4 || *c == 5));
        assert_eq!(f, fold_assignment(23, 5, 1));
    }

    #[test]
    fn cv_single_point_and_errors() {
        let d = generate_latent_data(&SimulationConfig::desk(4), 4).unwrap();
        let grid = [ModelHyperparams::dense(2, 2)];
        let out = cross_validate(d.x.view(), d.y.view(), &grid, 5, false, FitMethod::Classical, 1).unwrap();
        assert_eq!(out.best, grid[0]);
        assert!(out.table[0].score.is_finite());
        assert!(cross_validate(d.x.view(), d.y.view(), &[], 5, false, FitMethod::Classical, 1).is_err());
        assert!(cross_validate(d.x.view(), d.y.view(), &grid, 1, false, FitMethod::Classical, 1).is_err());
    }

    #[test]
    fn cv_tie_break_prefers_simpler_models() {
        // noiseless univariate data: every valid point fits exactly
        let x = Array2::from_shape_fn((20, 1), |(i, _)| i as f64 - 7.5);
        let y = x.mapv(|v| 3.0 * v + 1.0);
        let grid = [
            ModelHyperparams::dense(2, 1),
            ModelHyperparams::sparse(1, 1, 0.0, 0.0),
            ModelHyperparams::sparse(1, 1, 0.5, 0.0),
        ];
        let out = cross_validate(x.view(), y.view(), &grid, 4, false, FitMethod::Classical, 3).unwrap();
        assert!(out.table[0].score.is_infinite());
        assert!(out.table[1].score < 1e-20);
        assert_eq!(out.table[1].score, out.table[2].score);
        assert_eq!(out.best, grid[2]);

        let rows = vec![
            CvRow { hyperparams: ModelHyperparams::dense(2, 1), score: 1.0 },
            CvRow { hyperparams: ModelHyperparams::dense(1, 2), score: 1.0 },
            CvRow { hyperparams: ModelHyperparams::dense(1, 1), score: 1.0 + 1e-14 },
            CvRow { hyperparams: ModelHyperparams::sparse(1, 1, 0.3, 0.0), score: 1.0 },
            CvRow { hyperparams: ModelHyperparams::dense(3, 3), score: 0.5 },
        ];
        assert_eq!(select_best(&rows).unwrap().hyperparams, ModelHyperparams::dense(3, 3));
        assert_eq!(select_best(&rows[..4]).unwrap().hyperparams, ModelHyperparams::sparse(1, 1, 0.3, 0.0));
    }

    fn brute_force_f1(selected: &[bool], mask: &[bool]) -> f64 {
        let mut tp = 0.0;
        let mut fp = 0.0;
        let mut fn_ = 0.0;
        for (s, m) in selected.iter().zip(mask) {
            match (s, m) {
                (true, true) => tp += 1.0,
                (true, false) => fp += 1.0,
                (false, true) => fn_ += 1.0,
                _ => {}
            }
        }
        if tp == 0.0 {
            0.0
        } else {
            2.0 * tp / (2.0 * tp + fp + fn_)
        }
    }

    proptest! {
        #[test]
        fn mse_triangle_consistency(vals in proptest::collection::vec(-10.0f64..10.0, 18)) {
            let a = Array2::from_shape_vec((3, 2), vals[..6].to_vec()).unwrap();
            let b = Array2::from_shape_vec((3, 2), vals[6..12].to_vec()).unwrap();
            let c = Array2::from_shape_vec((3, 2), vals[12..].to_vec()).unwrap();
            let ac = mse_coefficients(a.view(), c.view()).unwrap();
            let ab = mse_coefficients(a.view(), b.view()).unwrap();
            let bc = mse_coefficients(b.view(), c.view()).unwrap();
            prop_assert!(ac <= 2.0 * (ab + bc) + 1e-12);
            prop_assert!(ab >= 0.0);
        }

        #[test]
        fn f1_matches_confusion_matrix(sel in proptest::collection::vec(any::<bool>(), 1..40), seed in any::<u64>()) {
            let mask: Vec<bool> = sel.iter().enumerate().map(|(i, _)| (seed >> (i % 64)) & 1 == 1).collect();
            prop_assume!(mask.iter().any(|m| *m));
            let w = Array2::from_shape_fn((sel.len(), 2), |(j, c)| if sel[j] && c == 1 { -0.2 } else { 0.0 });
            let f1 = f1_selection(w.view(), &mask).unwrap();
            prop_assert!((f1 - brute_force_f1(&sel, &mask)).abs() < 1e-12);
        }

        #[test]
        fn generator_is_deterministic(seed in any::<u64>()) {
            let cfg = SimulationConfig { n: 12, p_noise: 3, ..SimulationConfig::desk(seed) };
            prop_assert_eq!(generate_latent_data(&cfg, seed).unwrap(), generate_latent_data(&cfg, seed).unwrap());
        }

        #[test]
        fn contamination_touches_exact_row_count(n in 10usize..80, frac_idx in 0usize..3, target_idx in 0usize..3, seed in any::<u64>()) {
            let frac = [0.0, 0.1, 0.2][frac_idx];
            let target = [ContaminationTarget::XOnly, ContaminationTarget::YOnly, ContaminationTarget::Both][target_idx];
            let cfg = SimulationConfig { n, seed, ..SimulationConfig::desk(seed) }.with_contamination(frac, target);
            let d = generate_latent_data(&cfg, seed).unwrap();
            let (xc, yc, idx) = contaminate(d.x.view(), d.y.view(), &cfg).unwrap();
            let expected = (frac * n as f64).ceil() as usize;
            prop_assert_eq!(idx.len(), expected);
            let cx = (0..n).filter(|&i| xc.row(i) != d.x.row(i)).count();
            let cy = (0..n).filter(|&i| yc.row(i) != d.y.row(i)).count();
            prop_assert_eq!(cx, if target == ContaminationTarget::YOnly { 0 } else { expected });
            prop_assert_eq!(cy, if target == ContaminationTarget::XOnly { 0 } else { expected });
        }
    }
}

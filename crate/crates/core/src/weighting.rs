//! Case-weight functions and the distances they are applied to.
//!
//! Distances are standardised by their median before weighting, so the
//! cutoffs resolved here are ratios of chi-square quantiles to the
//! chi-square median (see [`standardized_cutoffs`]).

use ndarray::{Array1, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{Error, Result};
use crate::robust_scale::{column_mad, column_location, median, CenterKind};

/// Smallest weight any case can receive.
pub const WEIGHT_FLOOR: f64 = 1e-6;

/// Default tuning constant of the Fair weight function.
pub const FAIR_CONSTANT: f64 = 1.3998;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightFamily {
    Hampel,
    Huber,
    Fair,
    Identity,
}

impl std::str::FromStr for WeightFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "hampel" => Ok(WeightFamily::Hampel),
            "huber" => Ok(WeightFamily::Huber),
            "fair" => Ok(WeightFamily::Fair),
            "identity" | "none" => Ok(WeightFamily::Identity),
            other => Err(Error::InvalidParameter(format!("unknown weight family '{other}'"))),
        }
    }
}

/// Quantile probabilities that set the three cutoffs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CutoffProbs(pub [f64; 3]);

impl CutoffProbs {
    /// (0.75, 0.90, 0.95): heavy downweighting, the default.
    pub const AGGRESSIVE: CutoffProbs = CutoffProbs([0.75, 0.90, 0.95]);
    /// (0.95, 0.975, 0.999): close to the classical fit on clean data.
    pub const STANDARD: CutoffProbs = CutoffProbs([0.95, 0.975, 0.999]);

    pub fn validate(&self) -> Result<()> {
        let [p1, p2, p3] = self.0;
        if 0.0 < p1 && p1 < p2 && p2 < p3 && p3 < 1.0 {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!(
                "cutoff probabilities must satisfy 0 < p1 < p2 < p3 < 1, got ({p1}, {p2}, {p3})"
            )))
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name.to_ascii_lowercase().as_str() {
            "aggressive" | "default" => Ok(Self::AGGRESSIVE),
            "standard" | "lenient" => Ok(Self::STANDARD),
            other => Err(Error::InvalidParameter(format!("unknown cutoff preset '{other}'"))),
        }
    }
}

impl Default for CutoffProbs {
    fn default() -> Self {
        Self::AGGRESSIVE
    }
}

/// Resolved cutoffs `c1 < c2 < c3` on the distance scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cutoffs(pub [f64; 3]);

impl Cutoffs {
    pub fn validate(&self) -> Result<()> {
        let [c1, c2, c3] = self.0;
        if 0.0 < c1 && c1 < c2 && c2 < c3 && c3.is_finite() {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!(
                "cutoffs must satisfy 0 < c1 < c2 < c3, got ({c1}, {c2}, {c3})"
            )))
        }
    }
}

/// A weight function family with its cutoff probabilities.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightFunctionSpec {
    pub family: WeightFamily,
    pub probs: CutoffProbs,
    pub fair_constant: f64,
}

impl Default for WeightFunctionSpec {
    fn default() -> Self {
        Self::hampel(CutoffProbs::AGGRESSIVE)
    }
}

impl WeightFunctionSpec {
    pub fn hampel(probs: CutoffProbs) -> Self {
        Self {
            family: WeightFamily::Hampel,
            probs,
            fair_constant: FAIR_CONSTANT,
        }
    }

    pub fn identity() -> Self {
        Self {
            family: WeightFamily::Identity,
            ..Self::default()
        }
    }

    pub fn with_family(self, family: WeightFamily) -> Self {
        Self { family, ..self }
    }

    /// Cutoffs for distances that were divided by their median, with `df`
    /// degrees of freedom for the underlying squared distances.
    pub fn resolve(&self, df: usize) -> Result<ResolvedWeightFunction> {
        self.probs.validate()?;
        if self.family == WeightFamily::Fair && !(self.fair_constant > 0.0) {
            return Err(Error::InvalidParameter("fair constant must be positive".into()));
        }
        Ok(ResolvedWeightFunction {
            family: self.family,
            cutoffs: standardized_cutoffs(self.probs, df)?,
            fair_constant: self.fair_constant,
        })
    }
}

/// A weight function ready to be evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResolvedWeightFunction {
    pub family: WeightFamily,
    pub cutoffs: Cutoffs,
    pub fair_constant: f64,
}

impl ResolvedWeightFunction {
    fn eval(&self, d: f64) -> f64 {
        let [c1, c2, c3] = self.cutoffs.0;
        match self.family {
            WeightFamily::Identity => 1.0,
            WeightFamily::Hampel => hampel_unchecked(d, c1, c2, c3),
            WeightFamily::Huber => huber_weight(d, c1),
            WeightFamily::Fair => fair_weight(d, self.fair_constant),
        }
    }
}

fn hampel_unchecked(d: f64, c1: f64, c2: f64, c3: f64) -> f64 {
    if d <= c1 {
        1.0
    } else if d <= c2 {
        c1 / d
    } else if d <= c3 {
        c1 * (c3 - d) / (d * (c3 - c2))
    } else {
        0.0
    }
}

/// Hampel's three-part redescending weight.
pub fn hampel_psi(d: f64, c1: f64, c2: f64, c3: f64) -> Result<f64> {
    Cutoffs([c1, c2, c3]).validate()?;
    if !(d >= 0.0) {
        return Err(Error::InvalidParameter(format!("distance must be nonnegative, got {d}")));
    }
    Ok(hampel_unchecked(d, c1, c2, c3))
}

/// Huber weight `min(1, c / d)`.
pub fn huber_weight(d: f64, c: f64) -> f64 {
    if d <= c {
        1.0
    } else {
        c / d
    }
}

/// Fair weight `1 / (1 + d / c)^2`.
pub fn fair_weight(d: f64, c: f64) -> f64 {
    (1.0 + d / c).powi(-2)
}

/// Applies the weight function elementwise.
pub fn weight_function(wf: &ResolvedWeightFunction, d: ArrayView1<f64>) -> Result<Array1<f64>> {
    if wf.family != WeightFamily::Identity {
        wf.cutoffs.validate()?;
    }
    d.iter()
        .map(|&v| {
            if v >= 0.0 {
                Ok(wf.eval(v))
            } else {
                Err(Error::InvalidParameter(format!("distance must be nonnegative, got {v}")))
            }
        })
        .collect()
}

/// Quantile of the chi-square distribution with `df` degrees of freedom.
pub fn chi_square_quantile(p: f64, df: usize) -> Result<f64> {
    if df == 0 {
        return Err(Error::InvalidParameter("chi-square needs df >= 1".into()));
    }
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::InvalidParameter(format!("probability must be in (0, 1), got {p}")));
    }
    let dist = ChiSquared::new(df as f64)
        .map_err(|e| Error::InvalidParameter(format!("chi-square: {e}")))?;
    let q = dist.inverse_cdf(p);
    if q.is_finite() && q > 0.0 && (dist.cdf(q) - p).abs() < 1e-9 {
        Ok(q)
    } else {
        Err(Error::NoConvergence {
            what: "chi-square quantile",
            iterations: 0,
            last: vec![q],
        })
    }
}

/// `c_j = sqrt(chi2_quantile(p_j, df))`: cutoffs for raw distances.
pub fn chi_cutoffs(probs: CutoffProbs, df: usize) -> Result<Cutoffs> {
    probs.validate()?;
    let mut c = [0.0; 3];
    for (cj, &pj) in c.iter_mut().zip(probs.0.iter()) {
        *cj = chi_square_quantile(pj, df)?.sqrt();
    }
    let cutoffs = Cutoffs(c);
    cutoffs.validate()?;
    Ok(cutoffs)
}

/// Cutoffs for distances divided by their median:
/// `c_j = sqrt(chi2_quantile(p_j, df) / chi2_quantile(0.5, df))`.
pub fn standardized_cutoffs(probs: CutoffProbs, df: usize) -> Result<Cutoffs> {
    let raw = chi_cutoffs(probs, df)?;
    let mid = chi_square_quantile(0.5, df)?.sqrt();
    Ok(Cutoffs(raw.0.map(|c| c / mid)))
}

/// Divides distances by their median. Fails when the median is zero.
pub fn standardize_by_median(d: ArrayView1<f64>) -> Result<Array1<f64>> {
    let med = median(&d.to_vec());
    if !(med > 0.0) {
        return Err(Error::InvalidParameter("median distance is zero".into()));
    }
    Ok(d.mapv(|v| v / med))
}

fn floor_weights(w: Array1<f64>) -> Array1<f64> {
    w.mapv(|v| v.max(WEIGHT_FLOOR))
}

/// Starting case weights of one robustly centred and scaled block.
///
/// Row norms are divided by their median and passed through the weight
/// function, whose cutoffs use `df = min(width, n - 1)`.
pub fn starting_weights(zs: ArrayView2<f64>, spec: &WeightFunctionSpec) -> Result<Array1<f64>> {
    let n = zs.nrows();
    if n < 2 {
        return Err(Error::Empty("starting weights need at least two rows"));
    }
    let norms: Array1<f64> = zs.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect();
    let d = standardize_by_median(norms.view())?;
    let df = zs.ncols().min(n - 1).max(1);
    let wf = spec.resolve(df)?;
    Ok(floor_weights(weight_function(&wf, d.view())?))
}

/// Diagonal robust Mahalanobis-type distance of each score row:
/// `|| (row - colmedian) / colMAD ||`.
pub fn score_distances(scores: ArrayView2<f64>) -> Result<Array1<f64>> {
    if scores.nrows() < 2 {
        return Err(Error::Empty("score distances need at least two rows"));
    }
    let center = column_location(scores, CenterKind::Median)?;
    let scale = column_mad(scores, true)?;
    let z = (&scores - &center) / &scale;
    Ok(z.map_axis(Axis(1), |r| r.dot(&r).sqrt()))
}

/// Case weights from score distances, with cutoffs at `df` = number of
/// score columns. Distances are standardised by their median first.
pub fn score_weights(scores: ArrayView2<f64>, spec: &WeightFunctionSpec) -> Result<Array1<f64>> {
    let d = score_distances(scores)?;
    let d = standardize_by_median(d.view())?;
    let wf = spec.resolve(scores.ncols().max(1))?;
    Ok(floor_weights(weight_function(&wf, d.view())?))
}

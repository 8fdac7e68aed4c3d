//! Location and scale estimators used to centre and scale a data block.
//!
//! Classical (mean / standard deviation) and robust (median, MAD, L1 median,
//! tau scale) estimators are offered behind [`CenterKind`] and [`ScaleKind`].
//! [`PreprocessParams`] stores the fitted per-column values and applies or
//! inverts the affine transform.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};
use statrs::function::erf::erf;

use crate::error::{Error, Result};

/// Normal-consistency factor for the median absolute deviation.
pub const MAD_CONSISTENCY: f64 = 1.4826;

/// Default tolerance of the L1-median solver.
pub const L1_MEDIAN_TOL: f64 = 1e-8;
/// Default iteration cap of the L1-median solver.
pub const L1_MEDIAN_MAX_ITER: usize = 500;

const TAU_LOCATION_C: f64 = 4.5;
const TAU_SCALE_C: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CenterKind {
    Mean,
    Median,
    L1Median,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScaleKind {
    None,
    Std,
    Mad,
    Tau2,
}

impl std::str::FromStr for CenterKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mean" => Ok(CenterKind::Mean),
            "median" => Ok(CenterKind::Median),
            "l1median" | "l1-median" | "spatial" => Ok(CenterKind::L1Median),
            other => Err(Error::InvalidParameter(format!("unknown centre kind '{other}'"))),
        }
    }
}

impl std::str::FromStr for ScaleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "none" => Ok(ScaleKind::None),
            "std" => Ok(ScaleKind::Std),
            "mad" => Ok(ScaleKind::Mad),
            "tau2" | "tau" => Ok(ScaleKind::Tau2),
            other => Err(Error::InvalidParameter(format!("unknown scale kind '{other}'"))),
        }
    }
}

/// Median of a slice using the midpoint convention for even lengths.
///
/// Returns `NaN` for an empty slice.
pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn column_median(col: ArrayView1<f64>) -> f64 {
    median(&col.to_vec())
}

/// Per-column location estimate.
pub fn column_location(x: ArrayView2<f64>, kind: CenterKind) -> Result<Array1<f64>> {
    if x.nrows() == 0 || x.ncols() == 0 {
        return Err(Error::Empty("column_location needs at least one row"));
    }
    match kind {
        CenterKind::Mean => Ok(x.mean_axis(Axis(0)).expect("nonempty")),
        CenterKind::Median => Ok(x.axis_iter(Axis(1)).map(column_median).collect()),
        CenterKind::L1Median => l1_median(x, L1_MEDIAN_TOL, L1_MEDIAN_MAX_ITER),
    }
}

/// Per-column median absolute deviation from the column median.
///
/// With `consistent` the raw MAD is multiplied by [`MAD_CONSISTENCY`].
pub fn column_mad(x: ArrayView2<f64>, consistent: bool) -> Result<Array1<f64>> {
    if x.nrows() < 2 {
        return Err(Error::Empty("column_mad needs at least two rows"));
    }
    let factor = if consistent { MAD_CONSISTENCY } else { 1.0 };
    x.axis_iter(Axis(1))
        .enumerate()
        .map(|(j, col)| {
            let mad = mad_of(col) * factor;
            if mad > 0.0 {
                Ok(mad)
            } else {
                Err(Error::ZeroScale { column: j })
            }
        })
        .collect()
}

fn mad_of(col: ArrayView1<f64>) -> f64 {
    let med = column_median(col);
    let dev: Vec<f64> = col.iter().map(|v| (v - med).abs()).collect();
    median(&dev)
}

/// Spatial (L1) median by Weiszfeld iteration.
///
/// When an iterate lands on a data row, the modified step of Vardi and
/// Zhang is taken: the iterate is kept if the pull of the remaining rows
/// does not exceed the multiplicity of the coincident row. Plain Weiszfeld
/// steps are extrapolated with SQUAREM, falling back to the plain double
/// step whenever the extrapolation does not lower the objective.
pub fn l1_median(x: ArrayView2<f64>, tol: f64, max_iter: usize) -> Result<Array1<f64>> {
    if x.nrows() == 0 || x.ncols() == 0 {
        return Err(Error::Empty("l1_median needs at least one row"));
    }
    if !(tol > 0.0) {
        return Err(Error::InvalidParameter(format!("l1_median tol must be positive, got {tol}")));
    }
    let mut y: Array1<f64> = x.axis_iter(Axis(1)).map(column_median).collect();
    // coincidence threshold relative to the data spread
    let spread = x.iter().fold(0.0_f64, |m, v| m.max(v.abs())).max(1.0);
    let eps = 1e-12 * spread;

    for _ in 0..max_iter {
        let y1 = match weiszfeld_step(x, &y, eps) {
            None => return Ok(y),
            Some(next) => next,
        };
        let y2 = match weiszfeld_step(x, &y1, eps) {
            None => return Ok(y1),
            Some(next) => next,
        };
        let r = &y1 - &y;
        let v = &y2 - &y1 * 2.0 + &y;
        let (r_norm, v_norm) = (norm(&r), norm(&v));
        let next = if v_norm > 0.0 {
            let alpha = (-r_norm / v_norm).min(-1.0);
            let extrapolated = &y - &r * (2.0 * alpha) + &v * (alpha * alpha);
            if l1_objective(x, &extrapolated) <= l1_objective(x, &y2) {
                extrapolated
            } else {
                y2
            }
        } else {
            y2
        };
        let step = norm(&(&next - &y));
        y = next;
        if step < tol {
            return Ok(y);
        }
        // Weiszfeld crawls when the minimiser is a data row; test the nearest one
        if let Some(row) = nearest_optimal_row(x, &y, eps) {
            return Ok(row);
        }
    }
    Err(Error::NoConvergence {
        what: "l1 median",
        iterations: max_iter,
        last: y.to_vec(),
    })
}

fn norm(v: &Array1<f64>) -> f64 {
    v.dot(v).sqrt()
}

fn l1_objective(x: ArrayView2<f64>, y: &Array1<f64>) -> f64 {
    x.rows().into_iter().map(|r| norm(&(&r - y))).sum()
}

/// One modified Weiszfeld step; `None` when `y` is already optimal.
fn weiszfeld_step(x: ArrayView2<f64>, y: &Array1<f64>, eps: f64) -> Option<Array1<f64>> {
    let p = x.ncols();
    let mut num = Array1::<f64>::zeros(p);
    let mut denom = 0.0;
    let mut pull = Array1::<f64>::zeros(p);
    let mut coincident = 0usize;
    for row in x.rows() {
        let diff = &row - y;
        let d = norm(&diff);
        if d <= eps {
            coincident += 1;
            continue;
        }
        num.scaled_add(1.0 / d, &row);
        pull.scaled_add(1.0 / d, &diff);
        denom += 1.0 / d;
    }
    if denom == 0.0 {
        return None;
    }
    let target = num / denom;
    if coincident == 0 {
        return Some(target);
    }
    let r = norm(&pull);
    if r <= coincident as f64 {
        return None;
    }
    let gamma = coincident as f64 / r;
    Some(&target * (1.0 - gamma) + y * gamma)
}

fn nearest_optimal_row(x: ArrayView2<f64>, y: &Array1<f64>, eps: f64) -> Option<Array1<f64>> {
    let dist = |a: ArrayView1<f64>, b: ArrayView1<f64>| {
        a.iter().zip(b.iter()).map(|(u, v)| (u - v).powi(2)).sum::<f64>().sqrt()
    };
    let (k, _) = x
        .rows()
        .into_iter()
        .map(|r| dist(r, y.view()))
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(&b.1))?;
    let candidate = x.row(k);
    let mut pull = Array1::<f64>::zeros(x.ncols());
    let mut multiplicity = 0usize;
    for row in x.rows() {
        let d = dist(row, candidate);
        if d <= eps {
            multiplicity += 1;
        } else {
            pull.scaled_add(1.0 / d, &(&row - &candidate));
        }
    }
    (pull.dot(&pull).sqrt() <= multiplicity as f64).then(|| candidate.to_owned())
}

/// Expected value of `min(Z^2, c^2)` for a standard normal `Z`.
fn truncated_square_expectation(c: f64) -> f64 {
    let phi = (-0.5 * c * c).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let cdf = 0.5 * (1.0 + erf(c / std::f64::consts::SQRT_2));
    (2.0 * cdf - 1.0) - 2.0 * c * phi + c * c * 2.0 * (1.0 - cdf)
}

/// Tau scale of Maronna and Zamar with constants 4.5 (location) and 3
/// (scale), normalised to be consistent at the normal distribution.
pub fn tau2_scale(x: &[f64]) -> Result<f64> {
    if x.len() < 2 {
        return Err(Error::Empty("tau2_scale needs at least two values"));
    }
    let med = median(x);
    let dev: Vec<f64> = x.iter().map(|v| (v - med).abs()).collect();
    let s0 = median(&dev) * MAD_CONSISTENCY;
    if !(s0 > 0.0) {
        return Err(Error::ZeroScale { column: 0 });
    }

    let (mut wsum, mut wxsum) = (0.0, 0.0);
    for &v in x {
        let u = (v - med) / (s0 * TAU_LOCATION_C);
        if u.abs() <= 1.0 {
            let w = (1.0 - u * u).powi(2);
            wsum += w;
            wxsum += w * v;
        }
    }
    // wsum > 0: at least half the sample lies within one MAD of the median
    let mu = wxsum / wsum;

    let c2 = TAU_SCALE_C * TAU_SCALE_C;
    let rho_mean = x
        .iter()
        .map(|v| {
            let u = (v - mu) / s0;
            (u * u).min(c2)
        })
        .sum::<f64>()
        / x.len() as f64;
    let tau_sq = s0 * s0 * rho_mean / truncated_square_expectation(TAU_SCALE_C);
    Ok(tau_sq.sqrt())
}

pub fn column_std(col: ArrayView1<f64>) -> f64 {
    let n = col.len();
    if n < 2 {
        return 0.0;
    }
    let mean = col.sum() / n as f64;
    let ss: f64 = col.iter().map(|v| (v - mean).powi(2)).sum();
    (ss / (n - 1) as f64).sqrt()
}

/// Fitted centring and scaling of one data block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessParams {
    pub center_kind: CenterKind,
    pub scale_kind: ScaleKind,
    pub centers: Array1<f64>,
    pub scales: Array1<f64>,
}

impl PreprocessParams {
    /// Centres and scales given directly. Every scale must be positive.
    pub fn new(
        center_kind: CenterKind,
        scale_kind: ScaleKind,
        centers: Array1<f64>,
        scales: Array1<f64>,
    ) -> Result<Self> {
        if centers.len() != scales.len() {
            return Err(Error::Shape(format!(
                "{} centres but {} scales",
                centers.len(),
                scales.len()
            )));
        }
        if let Some(column) = scales.iter().position(|s| !(*s > 0.0)) {
            return Err(Error::ZeroScale { column });
        }
        Ok(Self {
            center_kind,
            scale_kind,
            centers,
            scales,
        })
    }

    /// Identity transform for a block of the given width.
    pub fn identity(width: usize) -> Self {
        Self {
            center_kind: CenterKind::Mean,
            scale_kind: ScaleKind::None,
            centers: Array1::zeros(width),
            scales: Array1::ones(width),
        }
    }

    pub fn width(&self) -> usize {
        self.centers.len()
    }

    fn check_width(&self, x: &ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.width() {
            return Err(Error::Shape(format!(
                "expected {} columns, got {}",
                self.width(),
                x.ncols()
            )));
        }
        Ok(())
    }

    /// `(x - center) / scale`, column by column.
    pub fn apply(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_width(&x)?;
        let mut z = x.to_owned();
        z -= &self.centers;
        z /= &self.scales;
        Ok(z)
    }

    /// Inverse of [`PreprocessParams::apply`].
    pub fn invert(&self, z: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_width(&z)?;
        let mut x = z.to_owned();
        x *= &self.scales;
        x += &self.centers;
        Ok(x)
    }
}

/// Estimates per-column centres and scales of `x`.
pub fn fit_preprocess(
    x: ArrayView2<f64>,
    center_kind: CenterKind,
    scale_kind: ScaleKind,
) -> Result<PreprocessParams> {
    let centers = column_location(x, center_kind)?;
    let p = x.ncols();
    let scales: Array1<f64> = match scale_kind {
        ScaleKind::None => Array1::ones(p),
        ScaleKind::Std => x.axis_iter(Axis(1)).map(column_std).collect(),
        ScaleKind::Mad => column_mad(x, true)?,
        ScaleKind::Tau2 => x
            .axis_iter(Axis(1))
            .enumerate()
            .map(|(j, col)| {
                tau2_scale(&col.to_vec()).map_err(|e| match e {
                    Error::ZeroScale { .. } => Error::ZeroScale { column: j },
                    other => other,
                })
            })
            .collect::<Result<_>>()?,
    };
    PreprocessParams::new(center_kind, scale_kind, centers, scales)
}

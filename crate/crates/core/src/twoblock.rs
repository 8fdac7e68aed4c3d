//! Dense and sparse two-block simultaneous dimension reduction.
//!
//! The X block is deflated against the *undeflated* (centred and scaled)
//! Y block, then the roles are swapped to extract the Y-block components.
//! Both sets of weights are recombined into a single coefficient matrix.

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Block, Error, Result};
use crate::robust_scale::{fit_preprocess, CenterKind, PreprocessParams, ScaleKind};

const POWER_TOL: f64 = 1e-12;
const POWER_MAX_ITER: usize = 1000;
const DEFLATION_TOL: f64 = 1e-12;

/// A weight with magnitude above this counts as selecting its variable.
pub const SELECTION_THRESHOLD: f64 = 1e-12;

/// Number of components and sparsity for each block, plus preprocessing.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelHyperparams {
    pub h_x: usize,
    pub h_y: usize,
    pub eta_x: f64,
    pub eta_y: f64,
    pub center_kind: CenterKind,
    pub scale_kind: ScaleKind,
}

impl ModelHyperparams {
    /// Dense model with mean centring and standard-deviation scaling.
    pub fn dense(h_x: usize, h_y: usize) -> Self {
        Self {
            h_x,
            h_y,
            eta_x: 0.0,
            eta_y: 0.0,
            center_kind: CenterKind::Mean,
            scale_kind: ScaleKind::Std,
        }
    }

    pub fn sparse(h_x: usize, h_y: usize, eta_x: f64, eta_y: f64) -> Self {
        Self {
            eta_x,
            eta_y,
            ..Self::dense(h_x, h_y)
        }
    }

    pub fn with_preprocessing(self, center_kind: CenterKind, scale_kind: ScaleKind) -> Self {
        Self {
            center_kind,
            scale_kind,
            ..self
        }
    }

    pub fn is_sparse(&self) -> bool {
        self.eta_x > 0.0 || self.eta_y > 0.0
    }

    pub fn validate(&self, n: usize, p: usize, q: usize) -> Result<()> {
        check_eta(self.eta_x)?;
        check_eta(self.eta_y)?;
        if n < 2 {
            return Err(Error::InvalidParameter(format!("need at least 2 cases, got {n}")));
        }
        let max_x = (n - 1).min(p);
        let max_y = (n - 1).min(q);
        if self.h_x == 0 || self.h_x > max_x {
            return Err(Error::InvalidParameter(format!(
                "h_x must be in 1..={max_x}, got {}",
                self.h_x
            )));
        }
        if self.h_y == 0 || self.h_y > max_y {
            return Err(Error::InvalidParameter(format!(
                "h_y must be in 1..={max_y}, got {}",
                self.h_y
            )));
        }
        Ok(())
    }
}

fn check_eta(eta: f64) -> Result<()> {
    if (0.0..1.0).contains(&eta) {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("eta must lie in [0, 1), got {eta}")))
    }
}

/// Dominant left singular vector with a flag for a (near) tie between the
/// two largest singular values.
#[derive(Debug, Clone, PartialEq)]
pub struct SingularVector {
    pub vector: Array1<f64>,
    pub near_tie: bool,
}

/// Leading left singular vector of `m` by power iteration on the smaller
/// Gram matrix. The entry of largest magnitude is made positive.
pub fn leading_left_singular_vector(m: ArrayView2<f64>) -> Result<SingularVector> {
    let (rows, cols) = m.dim();
    if rows == 0 || cols == 0 || m.iter().all(|v| *v == 0.0) {
        return Err(Error::InvalidParameter("singular vector of a zero matrix".into()));
    }
    let via_rows = rows <= cols;
    let (gram, start) = if via_rows {
        let k = argmax_norm(m.axis_iter(Axis(1)));
        (m.dot(&m.t()), m.column(k).to_owned())
    } else {
        let k = argmax_norm(m.axis_iter(Axis(0)));
        (m.t().dot(&m), m.row(k).to_owned())
    };

    let (dominant, near_tie) = match power_iteration(&gram, start) {
        Some(v) => {
            let tie = second_value_ties(&gram, &v);
            (v, tie)
        }
        None => symmetric_dominant(&gram),
    };

    let mut u = if via_rows { dominant } else { m.dot(&dominant) };
    let norm = u.dot(&u).sqrt();
    u /= norm;
    fix_sign(&mut u);
    Ok(SingularVector { vector: u, near_tie })
}

fn argmax_norm<'a>(lanes: impl Iterator<Item = ArrayView1<'a, f64>>) -> usize {
    lanes
        .map(|l| l.dot(&l))
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, v)| if v > best.1 { (i, v) } else { best })
        .0
}

fn fix_sign(u: &mut Array1<f64>) {
    let (k, _) = u
        .iter()
        .enumerate()
        .fold((0, -1.0), |best, (i, v)| if v.abs() > best.1 { (i, v.abs()) } else { best });
    if u[k] < 0.0 {
        u.mapv_inplace(|v| -v);
    }
}

fn power_iteration(gram: &Array2<f64>, start: Array1<f64>) -> Option<Array1<f64>> {
    let mut x = &start / start.dot(&start).sqrt();
    for _ in 0..POWER_MAX_ITER {
        let mut next = gram.dot(&x);
        let norm = next.dot(&next).sqrt();
        if norm == 0.0 {
            return None;
        }
        next /= norm;
        if next.dot(&x) < 0.0 {
            next.mapv_inplace(|v| -v);
        }
        let step = (&next - &x).mapv(|v| v * v).sum().sqrt();
        x = next;
        if step < POWER_TOL {
            return Some(x);
        }
    }
    None
}

fn sigma_tie(top: f64, second: f64) -> bool {
    let (a, b) = (top.max(0.0).sqrt(), second.max(0.0).sqrt());
    a - b <= 1e-12 * a.max(f64::MIN_POSITIVE)
}

/// Estimates the second eigenvalue of `gram` by power iteration on the
/// matrix with the dominant direction `x` removed.
fn second_value_ties(gram: &Array2<f64>, x: &Array1<f64>) -> bool {
    let d = gram.nrows();
    if d < 2 {
        return false;
    }
    let top = x.dot(&gram.dot(x));
    let project = |v: Array1<f64>| {
        let c = v.dot(x);
        v - x * c
    };
    let mut y = gram
        .axis_iter(Axis(1))
        .map(|c| project(c.to_owned()))
        .max_by(|a, b| a.dot(a).total_cmp(&b.dot(b)))
        .unwrap();
    let mut norm = y.dot(&y).sqrt();
    if norm <= 1e-14 * top.abs().max(f64::MIN_POSITIVE) {
        y = project(Array1::from_shape_fn(d, |i| 1.0 + i as f64));
        norm = y.dot(&y).sqrt();
        if norm == 0.0 {
            return false;
        }
    }
    y /= norm;
    let mut rayleigh = y.dot(&gram.dot(&y));
    for _ in 0..POWER_MAX_ITER {
        let mut next = project(gram.dot(&y));
        let norm = next.dot(&next).sqrt();
        if norm == 0.0 {
            return false;
        }
        next /= norm;
        let r = next.dot(&gram.dot(&next));
        y = next;
        if (r - rayleigh).abs() <= POWER_TOL * top.abs() {
            rayleigh = r;
            break;
        }
        rayleigh = r;
    }
    sigma_tie(top, rayleigh)
}

/// Fallback when power iteration stalls: full symmetric eigendecomposition.
fn symmetric_dominant(gram: &Array2<f64>) -> (Array1<f64>, bool) {
    let d = gram.nrows();
    let g = DMatrix::from_row_iterator(d, d, gram.iter().cloned());
    let eig = SymmetricEigen::new(g);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let top = eig.eigenvalues[order[0]];
    let near_tie = d > 1 && sigma_tie(top, eig.eigenvalues[order[1]]);
    let v: Array1<f64> = eig.eigenvectors.column(order[0]).iter().cloned().collect();
    (v, near_tie)
}

/// Soft-thresholds `w` at `eta * max|w|` and renormalises to unit length.
/// `eta == 0` returns `w` untouched.
pub fn soft_threshold(w: ArrayView1<f64>, eta: f64) -> Result<Array1<f64>> {
    check_eta(eta)?;
    if eta == 0.0 {
        return Ok(w.to_owned());
    }
    let max_abs = w.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let threshold = eta * max_abs;
    let mut out = w.mapv(|v| v.signum() * (v.abs() - threshold).max(0.0));
    let norm = out.dot(&out).sqrt();
    if !(norm > 0.0) {
        return Err(Error::InvalidParameter("soft threshold of a zero vector".into()));
    }
    out /= norm;
    Ok(out)
}

/// Everything extracted from one pair of centred (and possibly scaled or
/// case-weighted) blocks.
#[derive(Debug, Clone)]
pub struct Decomposition {
    pub x_weights: Array2<f64>,
    pub y_weights: Array2<f64>,
    pub x_scores: Array2<f64>,
    pub y_scores: Array2<f64>,
    pub x_loadings: Array2<f64>,
    pub y_loadings: Array2<f64>,
    /// X residual after `h_x` deflations.
    pub x_residual: Array2<f64>,
    /// Y residual after `h_y` deflations.
    pub y_residual: Array2<f64>,
    /// Coefficients on the preprocessed scale.
    pub coefficients: Array2<f64>,
    /// Components whose singular vector had a near tie.
    pub near_ties: Vec<(Block, usize)>,
}

struct BlockDeflation {
    weights: Array2<f64>,
    scores: Array2<f64>,
    loadings: Array2<f64>,
    residual: Array2<f64>,
    near_ties: Vec<usize>,
}

fn deflate_block(
    block: Block,
    own: ArrayView2<f64>,
    other: ArrayView2<f64>,
    h: usize,
    eta: f64,
) -> Result<BlockDeflation> {
    let (n, width) = own.dim();
    let scale = own.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    let mut residual = own.to_owned();
    let mut weights = Array2::zeros((width, h));
    let mut scores = Array2::zeros((n, h));
    let mut loadings = Array2::zeros((width, h));
    let mut near_ties = Vec::new();

    for i in 0..h {
        let degenerate = || Error::DegenerateDeflation { block, component: i + 1 };
        let residual_norm = residual.iter().map(|v| v * v).sum::<f64>().sqrt();
        if residual_norm < DEFLATION_TOL * scale {
            return Err(degenerate());
        }
        let cross = residual.t().dot(&other) / n as f64;
        let sv = leading_left_singular_vector(cross.view()).map_err(|_| degenerate())?;
        if sv.near_tie {
            near_ties.push(i);
        }
        let w = if eta > 0.0 {
            soft_threshold(sv.vector.view(), eta)?
        } else {
            sv.vector
        };
        let t = residual.dot(&w);
        let tt = t.dot(&t);
        if !(tt.sqrt() >= DEFLATION_TOL * scale) {
            return Err(degenerate());
        }
        let loading = residual.t().dot(&t) / tt;
        let t_col = t.view().insert_axis(Axis(1));
        let p_row = loading.view().insert_axis(Axis(0));
        residual -= &t_col.dot(&p_row);
        weights.column_mut(i).assign(&w);
        scores.column_mut(i).assign(&t);
        loadings.column_mut(i).assign(&loading);
    }
    Ok(BlockDeflation {
        weights,
        scores,
        loadings,
        residual,
        near_ties,
    })
}

/// Runs both deflation passes on centred blocks `x0`, `y0` and recombines
/// the weights into coefficients.
pub fn decompose(
    x0: ArrayView2<f64>,
    y0: ArrayView2<f64>,
    h_x: usize,
    h_y: usize,
    eta_x: f64,
    eta_y: f64,
) -> Result<Decomposition> {
    if x0.nrows() != y0.nrows() {
        return Err(Error::Shape(format!(
            "X has {} rows but Y has {}",
            x0.nrows(),
            y0.nrows()
        )));
    }
    check_eta(eta_x)?;
    check_eta(eta_y)?;
    let xd = deflate_block(Block::X, x0, y0, h_x, eta_x)?;
    let yd = deflate_block(Block::Y, y0, x0, h_y, eta_y)?;
    let coefficients = coefficients_from_weights(xd.weights.view(), yd.weights.view(), x0, y0)?;
    let near_ties = xd
        .near_ties
        .iter()
        .map(|&i| (Block::X, i))
        .chain(yd.near_ties.iter().map(|&i| (Block::Y, i)))
        .collect();
    Ok(Decomposition {
        x_weights: xd.weights,
        y_weights: yd.weights,
        x_scores: xd.scores,
        y_scores: yd.scores,
        x_loadings: xd.loadings,
        y_loadings: yd.loadings,
        x_residual: xd.residual,
        y_residual: yd.residual,
        coefficients,
        near_ties,
    })
}

/// `W (W' Sxx W)^-1 (W' Sxy V) V'` with `Sxx = X0'X0/n`, `Sxy = X0'Y0/n`.
pub fn coefficients_from_weights(
    w: ArrayView2<f64>,
    v: ArrayView2<f64>,
    x0: ArrayView2<f64>,
    y0: ArrayView2<f64>,
) -> Result<Array2<f64>> {
    let n = x0.nrows() as f64;
    if w.nrows() != x0.ncols() || v.nrows() != y0.ncols() || x0.nrows() != y0.nrows() {
        return Err(Error::Shape("weights do not conform with the data blocks".into()));
    }
    let xw = x0.dot(&w);
    let yv = y0.dot(&v);
    let gram = xw.t().dot(&xw) / n;
    let cross = xw.t().dot(&yv) / n;
    let inner = solve_spd(&gram, &cross)?;
    Ok(w.dot(&inner).dot(&v.t()))
}

fn solve_spd(a: &Array2<f64>, b: &Array2<f64>) -> Result<Array2<f64>> {
    let h = a.nrows();
    let am = DMatrix::from_row_iterator(h, h, a.iter().cloned());
    let eig = SymmetricEigen::new(am.clone());
    let max = eig.eigenvalues.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let min = eig.eigenvalues.iter().fold(f64::INFINITY, |m, v| m.min(*v));
    if !(max > 0.0) || min <= 1e-12 * max {
        return Err(Error::Singular(format!(
            "W'SxxW is singular (eigenvalues {min:e}..{max:e}); h_x may be too large"
        )));
    }
    let bm = DMatrix::from_row_iterator(b.nrows(), b.ncols(), b.iter().cloned());
    let chol = am
        .cholesky()
        .ok_or_else(|| Error::Singular("W'SxxW is not positive definite".into()))?;
    let x = chol.solve(&bm);
    Ok(Array2::from_shape_fn((x.nrows(), x.ncols()), |(i, j)| x[(i, j)]))
}

/// A fitted twoblock model on the original data scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoblockModel {
    pub hyperparams: ModelHyperparams,
    pub x_weights: Array2<f64>,
    pub y_weights: Array2<f64>,
    pub x_scores: Array2<f64>,
    pub y_scores: Array2<f64>,
    pub x_loadings: Array2<f64>,
    pub y_loadings: Array2<f64>,
    /// p x q coefficients on the original scale.
    pub coefficients: Array2<f64>,
    pub intercept: Array1<f64>,
    pub x_preprocess: PreprocessParams,
    pub y_preprocess: PreprocessParams,
}

impl TwoblockModel {
    /// Maps a decomposition fitted on preprocessed data back to the
    /// original scale: `B = Dx^-1 Bs Dy`, `intercept = cy - cx' B`.
    pub fn from_decomposition(
        dec: Decomposition,
        hyperparams: ModelHyperparams,
        x_preprocess: PreprocessParams,
        y_preprocess: PreprocessParams,
    ) -> Self {
        let mut coefficients = dec.coefficients;
        for ((j, k), b) in coefficients.indexed_iter_mut() {
            *b *= y_preprocess.scales[k] / x_preprocess.scales[j];
        }
        let intercept = &y_preprocess.centers - &x_preprocess.centers.dot(&coefficients);
        Self {
            hyperparams,
            x_weights: dec.x_weights,
            y_weights: dec.y_weights,
            x_scores: dec.x_scores,
            y_scores: dec.y_scores,
            x_loadings: dec.x_loadings,
            y_loadings: dec.y_loadings,
            coefficients,
            intercept,
            x_preprocess,
            y_preprocess,
        }
    }

    pub fn n_features(&self) -> usize {
        self.coefficients.nrows()
    }

    pub fn n_targets(&self) -> usize {
        self.coefficients.ncols()
    }

    pub fn predict(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.n_features() {
            return Err(Error::Shape(format!(
                "model expects {} columns, got {}",
                self.n_features(),
                x.ncols()
            )));
        }
        Ok(x.dot(&self.coefficients) + &self.intercept)
    }

    /// `W (P'W)^-1`: maps preprocessed X directly to scores.
    pub fn x_rotations(&self) -> Result<Array2<f64>> {
        rotations(&self.x_weights, &self.x_loadings)
    }

    pub fn y_rotations(&self) -> Result<Array2<f64>> {
        rotations(&self.y_weights, &self.y_loadings)
    }

    /// X-block scores of new cases.
    pub fn transform(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        let z = self.x_preprocess.apply(x)?;
        Ok(z.dot(&self.x_rotations()?))
    }

    /// Y-block scores of new cases.
    pub fn transform_y(&self, y: ArrayView2<f64>) -> Result<Array2<f64>> {
        let z = self.y_preprocess.apply(y)?;
        Ok(z.dot(&self.y_rotations()?))
    }

    /// Number of exactly-zero entries in each column of the X weights.
    pub fn x_weight_zeros(&self) -> Vec<usize> {
        self.x_weights
            .axis_iter(Axis(1))
            .map(|c| c.iter().filter(|v| **v == 0.0).count())
            .collect()
    }

    /// Indices of X variables with a nonzero weight in some component.
    pub fn selected_x_variables(&self) -> Vec<usize> {
        self.x_weights
            .axis_iter(Axis(0))
            .enumerate()
            .filter(|(_, r)| r.iter().any(|v| v.abs() > SELECTION_THRESHOLD))
            .map(|(j, _)| j)
            .collect()
    }
}

fn rotations(weights: &Array2<f64>, loadings: &Array2<f64>) -> Result<Array2<f64>> {
    let h = weights.ncols();
    let pw = loadings.t().dot(weights);
    let m = DMatrix::from_row_iterator(h, h, pw.iter().cloned());
    let inv = m
        .try_inverse()
        .ok_or_else(|| Error::Singular("P'W is not invertible".into()))?;
    let inv = Array2::from_shape_fn((h, h), |(i, j)| inv[(i, j)]);
    Ok(weights.dot(&inv))
}

/// Fits a (dense or sparse) twoblock model.
pub fn fit_twoblock(
    x: ArrayView2<f64>,
    y: ArrayView2<f64>,
    hp: &ModelHyperparams,
) -> Result<TwoblockModel> {
    let (n, p) = x.dim();
    if y.nrows() != n {
        return Err(Error::Shape(format!("X has {n} rows but Y has {}", y.nrows())));
    }
    hp.validate(n, p, y.ncols())?;
    let x_pre = fit_preprocess(x, hp.center_kind, hp.scale_kind)?;
    let y_pre = fit_preprocess(y, hp.center_kind, hp.scale_kind)?;
    let x0 = x_pre.apply(x)?;
    let y0 = y_pre.apply(y)?;
    let dec = decompose(x0.view(), y0.view(), hp.h_x, hp.h_y, hp.eta_x, hp.eta_y)?;
    for (block, comp) in &dec.near_ties {
        log::warn!("near tie of leading singular values in {block} block, component {}", comp + 1);
    }
    Ok(TwoblockModel::from_decomposition(dec, *hp, x_pre, y_pre))
}

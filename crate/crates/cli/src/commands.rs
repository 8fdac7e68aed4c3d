use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use twoblock_core::eval::{
    cross_validate, hyperparameter_grid, run_scenario_grid, write_cv_csv, write_results_csv, ContaminationTarget,
    FitMethod, Method, Scenario, SimulationConfig,
};
use twoblock_core::io::{load_matrix_csv, save_matrix_csv, write_case_weights_csv, HeaderMode, ModelDocument};
use twoblock_core::robust_scale::{CenterKind, ScaleKind};
use twoblock_core::rtb::{fit_rtb, RtbConfig};
use twoblock_core::twoblock::{fit_twoblock, ModelHyperparams, TwoblockModel};
use twoblock_core::weighting::{CutoffProbs, WeightFunctionSpec};
use twoblock_core::Error;

use crate::args::{CvArgs, DataArgs, FitArgs, ModelArgs, PredictArgs, RobustArgs, SimulateArgs, WeightsArgs};

/// Case weights below this are reported as flagged.
pub const FLAG_THRESHOLD: f64 = 0.5;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            Self::Usage(_) => 1,
            Self::Data(_) => 2,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            Self::Usage(m) | Self::Data(m) => m,
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidParameter(_) => Self::Usage(e.to_string()),
            _ => Self::Data(e.to_string()),
        }
    }
}

fn with_path(path: &Path) -> impl FnOnce(Error) -> CliError + '_ {
    move |e| match e {
        Error::InvalidParameter(_) => CliError::Usage(format!("{}: {e}", path.display())),
        _ => CliError::Data(format!("{}: {e}", path.display())),
    }
}

fn header_mode(no_header: bool) -> HeaderMode {
    if no_header {
        HeaderMode::Absent
    } else {
        HeaderMode::Auto
    }
}

fn load_xy(data: &DataArgs) -> Result<(ndarray::Array2<f64>, ndarray::Array2<f64>), CliError> {
    let mode = header_mode(data.no_header);
    let x = load_matrix_csv(&data.x, mode).map_err(with_path(&data.x))?;
    let y = load_matrix_csv(&data.y, mode).map_err(with_path(&data.y))?;
    if x.data.nrows() != y.data.nrows() {
        return Err(CliError::Data(format!(
            "X has {} rows but Y has {}",
            x.data.nrows(),
            y.data.nrows()
        )));
    }
    Ok((x.data, y.data))
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::Data(format!("cannot create {}: {e}", path.display())))
}

fn write_err(path: &Path) -> impl FnOnce(Error) -> CliError + '_ {
    move |e| CliError::Data(format!("cannot write {}: {e}", path.display()))
}

fn weight_spec(preset: &str) -> Result<WeightFunctionSpec, CliError> {
    Ok(WeightFunctionSpec::hampel(CutoffProbs::preset(preset)?))
}

fn rtb_config(hp: ModelHyperparams, r: &RobustArgs) -> Result<RtbConfig, CliError> {
    let cfg = RtbConfig {
        conv_tol: r.conv_tol,
        max_iter: r.max_iter,
        ..RtbConfig::from_hyperparams(hp).with_weight_spec(weight_spec(&r.cutoffs)?)
    };
    cfg.validate()?;
    Ok(cfg)
}

fn preprocessing(method: Method, center: Option<CenterKind>, scale: Option<ScaleKind>) -> (CenterKind, ScaleKind) {
    let (c, s) = if method.is_robust() {
        (CenterKind::Median, ScaleKind::Mad)
    } else {
        (CenterKind::Mean, ScaleKind::Std)
    };
    (center.unwrap_or(c), scale.unwrap_or(s))
}

fn hyperparams(m: &ModelArgs) -> ModelHyperparams {
    let (center, scale) = preprocessing(m.method, m.center, m.scale);
    let hp = if m.method.is_sparse() {
        ModelHyperparams::sparse(m.h_x, m.h_y, m.eta_x, m.eta_y)
    } else {
        ModelHyperparams::dense(m.h_x, m.h_y)
    };
    hp.with_preprocessing(center, scale)
}

fn summary(model: &TwoblockModel, method: Method, n: usize) -> String {
    let mut s = String::new();
    let hp = &model.hyperparams;
    let _ = writeln!(s, "method: {method}");
    let _ = writeln!(s, "cases: {n}, X columns: {}, Y columns: {}", model.n_features(), model.n_targets());
    let _ = writeln!(s, "components: h_x = {}, h_y = {}", hp.h_x, hp.h_y);
    let _ = writeln!(s, "preprocessing: center {:?}, scale {:?}", hp.center_kind, hp.scale_kind);
    let p = model.n_features();
    let nonzero: Vec<String> = model.x_weight_zeros().iter().map(|z| format!("{}/{p}", p - z)).collect();
    let _ = writeln!(s, "nonzero X weights per component: {}", nonzero.join(" "));
    let _ = writeln!(s, "selected X variables: {}", model.selected_x_variables().len());
    s
}

pub fn fit(args: &FitArgs) -> Result<String, CliError> {
    let (x, y) = load_xy(&args.data)?;
    let hp = hyperparams(&args.model);
    let method = args.model.method;
    let (doc, tail) = if method.is_robust() {
        let fit = fit_rtb(x.view(), y.view(), &rtb_config(hp, &args.model.robust)?)?;
        if !fit.converged {
            eprintln!("WARNING: robust fit did not converge in {} iterations", fit.iterations);
        }
        let tail = format!(
            "converged: {}, iterations: {}\ncases with combined weight < {FLAG_THRESHOLD}: {}\n",
            fit.converged,
            fit.iterations,
            fit.flagged_cases(FLAG_THRESHOLD).len()
        );
        (ModelDocument::robust(method.as_str(), fit), tail)
    } else {
        let model = fit_twoblock(x.view(), y.view(), &hp)?;
        (ModelDocument::classical(method.as_str(), model), String::new())
    };
    doc.save(&args.out).map_err(write_err(&args.out))?;
    Ok(summary(&doc.model, method, x.nrows()) + &tail)
}

pub fn predict(args: &PredictArgs) -> Result<String, CliError> {
    let doc = ModelDocument::load(&args.model).map_err(with_path(&args.model))?;
    let x = load_matrix_csv(&args.x, header_mode(args.no_header)).map_err(with_path(&args.x))?;
    let yhat = doc.model.predict(x.data.view())?;
    save_matrix_csv(&args.out, yhat.view(), None).map_err(write_err(&args.out))?;
    Ok(format!("wrote {} predictions to {}\n", yhat.nrows(), args.out.display()))
}

pub fn simulate(args: &SimulateArgs) -> Result<String, CliError> {
    let base = SimulationConfig {
        n: args.n,
        k: args.k,
        q: args.q,
        p_signal: args.p_signal,
        p_noise: args.p_noise,
        sigma_e: args.sigma_e,
        sigma_f: args.sigma_f,
        shift_magnitude: args.shift,
        ..SimulationConfig::desk(args.seed)
    };
    let cutoffs = CutoffProbs::preset(&args.cutoffs)?;
    let mut scenarios = Vec::new();
    for &f in &args.fractions {
        let targets = if f == 0.0 {
            vec![ContaminationTarget::None]
        } else {
            args.targets.clone()
        };
        for t in targets {
            let sim = base.with_contamination(f, t);
            sim.validate()?;
            let id = format!("p{}_noise{}_{t}_{f}", args.p_signal, args.p_noise);
            scenarios.push(Scenario {
                eta_x: args.eta_x,
                eta_y: args.eta_y,
                cutoffs,
                ..Scenario::new(id, sim, args.h_x, args.h_y)
            });
        }
    }
    let results = run_scenario_grid(&scenarios, &args.methods, args.repeats, args.seed)?;
    let mut out = create(&args.out)?;
    write_results_csv(&mut out, &results).map_err(write_err(&args.out))?;
    out.flush().map_err(|e| CliError::Data(e.to_string()))?;
    let failures: usize = results.iter().map(|r| r.failures).sum();
    Ok(format!(
        "{} scenarios x {} methods x {} repeats, {failures} failed fits\n",
        scenarios.len(),
        args.methods.len(),
        args.repeats
    ))
}

pub fn cv(args: &CvArgs) -> Result<String, CliError> {
    let (x, y) = load_xy(&args.data)?;
    let (center, scale) = preprocessing(args.method, args.center, args.scale);
    let etas = if args.method.is_sparse() { args.eta_x.clone() } else { vec![0.0] };
    let eta_y = if args.method.is_sparse() { args.eta_y } else { 0.0 };
    let grid = hyperparameter_grid(&args.h_x, &args.h_y, &etas, eta_y, center, scale);
    let method = if args.method.is_robust() {
        FitMethod::Robust(rtb_config(grid.first().copied().unwrap_or(ModelHyperparams::dense(1, 1)), &args.robust_fit)?)
    } else {
        FitMethod::Classical
    };
    let outcome = cross_validate(x.view(), y.view(), &grid, args.folds, args.robust, method, args.seed)?;
    let mut out = create(&args.out)?;
    write_cv_csv(&mut out, &outcome.table).map_err(write_err(&args.out))?;
    out.flush().map_err(|e| CliError::Data(e.to_string()))?;
    let mut best = create(&args.best)?;
    serde_json::to_writer_pretty(&mut best, &outcome.best).map_err(|e| CliError::Data(e.to_string()))?;
    best.write_all(b"\n").map_err(|e| CliError::Data(e.to_string()))?;
    let b = outcome.best;
    Ok(format!(
        "best: h_x = {}, h_y = {}, eta_x = {}, eta_y = {}\n",
        b.h_x, b.h_y, b.eta_x, b.eta_y
    ))
}

pub fn weights(args: &WeightsArgs) -> Result<String, CliError> {
    let (x, y) = load_xy(&args.data)?;
    let hp = ModelHyperparams::sparse(args.h_x, args.h_y, args.eta_x, args.eta_y)
        .with_preprocessing(args.center, args.scale);
    let fit = fit_rtb(x.view(), y.view(), &rtb_config(hp, &args.robust)?)?;
    if !fit.converged {
        eprintln!("WARNING: robust fit did not converge in {} iterations", fit.iterations);
    }
    let mut out = create(&args.out)?;
    write_case_weights_csv(&mut out, &fit).map_err(write_err(&args.out))?;
    out.flush().map_err(|e| CliError::Data(e.to_string()))?;
    let flagged = fit.flagged_cases(FLAG_THRESHOLD);
    let listing: String = flagged.iter().map(|i| format!("{i}\n")).collect();
    if let Some(path) = &args.flagged {
        std::fs::write(path, &listing).map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display())))?;
    }
    Ok(format!(
        "converged: {}, iterations: {}\nflagged cases (combined weight < {FLAG_THRESHOLD}): {}\n",
        fit.converged,
        fit.iterations,
        flagged.iter().map(usize::to_string).collect::<Vec<_>>().join(" ")
    ))
}

//! CSV matrices and versioned model documents.

use std::fs::File;
use std::io::{BufReader, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rtb::RtbFit;
use crate::twoblock::TwoblockModel;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum HeaderMode {
    /// A first row with any non-numeric cell is taken as column names.
    #[default]
    Auto,
    Absent,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledMatrix {
    pub data: Array2<f64>,
    pub names: Option<Vec<String>>,
}

pub fn load_matrix_csv(path: impl AsRef<Path>, header: HeaderMode) -> Result<LabeledMatrix> {
    let file = File::open(path.as_ref())?;
    read_matrix_csv(BufReader::new(file), header)
}

pub fn read_matrix_csv<R: Read>(input: R, header: HeaderMode) -> Result<LabeledMatrix> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(input);
    let mut names = None;
    let mut values = Vec::new();
    let mut width = None;
    let mut rows = 0;
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let line = record.position().map_or(i as u64 + 1, |p| p.line()) as usize;
        if record.len() == 1 && record[0].is_empty() {
            continue;
        }
        let parsed: std::result::Result<Vec<f64>, _> = record.iter().map(str::parse::<f64>).collect();
        let row = match parsed {
            Ok(row) => row,
            Err(_) if i == 0 && header == HeaderMode::Auto => {
                names = Some(record.iter().map(str::to_owned).collect::<Vec<_>>());
                width = Some(record.len());
                continue;
            }
            Err(_) => {
                let (col, cell) = record
                    .iter()
                    .enumerate()
                    .find(|(_, c)| c.parse::<f64>().is_err())
                    .expect("a cell failed to parse");
                return Err(Error::Parse {
                    line,
                    message: format!("column {} is not numeric: '{cell}'", col + 1),
                });
            }
        };
        match width {
            Some(w) if w != row.len() => {
                return Err(Error::Parse {
                    line,
                    message: format!("expected {w} fields, found {}", row.len()),
                })
            }
            _ => width = Some(row.len()),
        }
        values.extend(row);
        rows += 1;
    }
    if rows == 0 {
        return Err(Error::Parse {
            line: 1,
            message: "no numeric rows".into(),
        });
    }
    let data = Array2::from_shape_vec((rows, width.unwrap_or(0)), values)
        .map_err(|e| Error::Shape(e.to_string()))?;
    Ok(LabeledMatrix { data, names })
}

/// Writes `m` with shortest round-trip float formatting.
pub fn write_matrix_csv<W: Write>(out: W, m: ArrayView2<f64>, names: Option<&[String]>) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    if let Some(names) = names {
        if names.len() != m.ncols() {
            return Err(Error::Shape(format!("{} names for {} columns", names.len(), m.ncols())));
        }
        w.write_record(names)?;
    }
    for row in m.rows() {
        w.write_record(row.iter().map(f64::to_string))?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_matrix_csv(path: impl AsRef<Path>, m: ArrayView2<f64>, names: Option<&[String]>) -> Result<()> {
    write_matrix_csv(File::create(path.as_ref())?, m, names)
}

/// Case-weight diagnostics: index, w_x, w_y, w_combined.
pub fn write_case_weights_csv<W: Write>(out: W, fit: &RtbFit) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["index", "w_x", "w_y", "w_combined"])?;
    for c in fit.case_weights() {
        w.write_record([
            c.index.to_string(),
            c.w_x.to_string(),
            c.w_y.to_string(),
            c.w_combined.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Weights and iteration trace of a robust fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustDiagnostics {
    pub x_weights: Array1<f64>,
    pub y_weights: Array1<f64>,
    pub combined_weights: Array1<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub coef_norm_trace: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelDocument {
    pub format_version: u32,
    pub method: String,
    pub model: TwoblockModel,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub robust: Option<RobustDiagnostics>,
}

impl ModelDocument {
    pub fn classical(method: impl Into<String>, model: TwoblockModel) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            method: method.into(),
            model,
            robust: None,
        }
    }

    pub fn robust(method: impl Into<String>, fit: RtbFit) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            method: method.into(),
            robust: Some(RobustDiagnostics {
                x_weights: fit.x_weights,
                y_weights: fit.y_weights,
                combined_weights: fit.combined_weights,
                iterations: fit.iterations,
                converged: fit.converged,
                coef_norm_trace: fit.coef_norm_trace,
            }),
            model: fit.model,
        }
    }

    pub fn to_writer<W: Write>(&self, out: W) -> Result<()> {
        serde_json::to_writer_pretty(out, self)?;
        Ok(())
    }

    pub fn from_reader<R: Read>(input: R) -> Result<Self> {
        let doc: Self = serde_json::from_reader(input)?;
        if doc.format_version != FORMAT_VERSION {
            return Err(Error::InvalidParameter(format!(
                "unsupported model format_version {}",
                doc.format_version
            )));
        }
        Ok(doc)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = File::create(path.as_ref())?;
        self.to_writer(&mut f)?;
        f.write_all(b"\n")?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_reader(BufReader::new(File::open(path.as_ref())?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::{generate_latent_data, SimulationConfig};
    use crate::rtb::{fit_rtb, RtbConfig};
    use crate::twoblock::{fit_twoblock, ModelHyperparams};
    use ndarray::array;
    use proptest::prelude::*;

    fn parse(text: &str) -> Result<LabeledMatrix> {
        read_matrix_csv(text.as_bytes(), HeaderMode::Auto)
    }

    #[test]
    fn header_detection() {
        let m = parse("a,b\n1,2\n3,4").unwrap();
        assert_eq!(m.data, array![[1.0, 2.0], [3.0, 4.0]]);
        assert_eq!(m.names, Some(vec!["a".to_string(), "b".to_string()]));
        let m = parse("1,2\n3,4\n").unwrap();
        assert_eq!(m.data, array![[1.0, 2.0], [3.0, 4.0]]);
        assert!(m.names.is_none());
        let m = parse(" 1 , 2.5e-3\n-3,4").unwrap();
        assert_eq!(m.data[[0, 1]], 2.5e-3);
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        match parse("1,2\n3") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        match parse("a,b\n1,2\n3,x") {
            Err(Error::Parse { line, message }) => {
                assert_eq!(line, 3);
                assert!(message.contains("column 2"));
            }
            other => panic!("{other:?}"),
        }
        assert!(matches!(parse(""), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(parse("a,b\n"), Err(Error::Parse { .. })));
        assert!(read_matrix_csv("a,b\n1,2".as_bytes(), HeaderMode::Absent).is_err());
    }

    #[test]
    fn model_document_round_trip_predicts_identically() {
        let d = generate_latent_data(&SimulationConfig::desk(5), 5).unwrap();
        let model = fit_twoblock(d.x.view(), d.y.view(), &ModelHyperparams::sparse(3, 2, 0.3, 0.0)).unwrap();
        let doc = ModelDocument::classical("tb-sparse", model);
        let mut buf = Vec::new();
        doc.to_writer(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.contains("\"format_version\": 1"));
        let back = ModelDocument::from_reader(buf.as_slice()).unwrap();
        assert_eq!(back, doc);
        let a = doc.model.predict(d.x.view()).unwrap();
        let b = back.model.predict(d.x.view()).unwrap();
        assert!(a.iter().zip(b.iter()).all(|(u, v)| (u - v).abs() <= 1e-12));

        let fit = fit_rtb(d.x.view(), d.y.view(), &RtbConfig::new(2, 2)).unwrap();
        let doc = ModelDocument::robust("rtb", fit);
        let mut buf = Vec::new();
        doc.to_writer(&mut buf).unwrap();
        assert_eq!(ModelDocument::from_reader(buf.as_slice()).unwrap(), doc);

        let bumped = String::from_utf8(buf).unwrap().replace("\"format_version\": 1", "\"format_version\": 2");
        assert!(ModelDocument::from_reader(bumped.as_bytes()).is_err());
    }

    #[test]
    fn case_weight_table() {
        let d = generate_latent_data(&SimulationConfig { n: 30, ..SimulationConfig::desk(6) }, 6).unwrap();
        let fit = fit_rtb(d.x.view(), d.y.view(), &RtbConfig::new(2, 2)).unwrap();
        let mut buf = Vec::new();
        write_case_weights_csv(&mut buf, &fit).unwrap();
        let table = read_matrix_csv(buf.as_slice(), HeaderMode::Auto).unwrap();
        assert_eq!(table.names.unwrap(), vec!["index", "w_x", "w_y", "w_combined"]);
        assert_eq!(table.data.nrows(), 30);
        for i in 0..30 {
            assert_eq!(table.data[[i, 0]], i as f64);
            assert_eq!(table.data[[i, 3]], fit.combined_weights[i]);
        }
    }

    proptest! {
        #[test]
        fn csv_round_trip_is_exact(vals in proptest::collection::vec(any::<f64>().prop_filter("finite", |v| v.is_finite()), 12)) {
            let m = Array2::from_shape_vec((4, 3), vals).unwrap();
            let names: Vec<String> = ["x1", "x2", "x3"].iter().map(|s| s.to_string()).collect();
            let mut buf = Vec::new();
            write_matrix_csv(&mut buf, m.view(), Some(&names)).unwrap();
            let back = read_matrix_csv(buf.as_slice(), HeaderMode::Auto).unwrap();
            prop_assert_eq!(back.data, m);
            prop_assert_eq!(back.names, Some(names));
        }
    }
}

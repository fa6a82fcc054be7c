//! JSON and CSV documents written by the command-line tools.
//!
//! Floats are written in shortest round-trip form, exact zeros as `0`,
//! infinities as the strings `"inf"`/`"-inf"` and NaN as `null`.

use std::io::Write;

use nalgebra::DMatrix;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sparsefactor_core::path::{PathCell, PathOptions, PathResult};
use sparsefactor_core::selection::argmin_cell;
use sparsefactor_core::simulation::{StudyConfig, StudyReport};
use sparsefactor_core::{Criterion, FactorModel, FitResult};

use crate::error::{CliError, CliResult};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// A float with the serialization rules above.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Num(pub f64);

impl Serialize for Num {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let v = self.0;
        if v == 0.0 {
            s.serialize_u64(0)
        } else if v == f64::INFINITY {
            s.serialize_str("inf")
        } else if v == f64::NEG_INFINITY {
            s.serialize_str("-inf")
        } else if v.is_nan() {
            s.serialize_none()
        } else {
            s.serialize_f64(v)
        }
    }
}

impl<'de> Deserialize<'de> for Num {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Number(f64),
            Text(String),
            Null(()),
        }
        match Raw::deserialize(d)? {
            Raw::Number(v) => Ok(Num(v)),
            Raw::Text(t) => match t.as_str() {
                "inf" => Ok(Num(f64::INFINITY)),
                "-inf" => Ok(Num(f64::NEG_INFINITY)),
                other => Err(serde::de::Error::custom(format!("not a number: `{other}`"))),
            },
            Raw::Null(()) => Ok(Num(f64::NAN)),
        }
    }
}

fn nums(values: impl IntoIterator<Item = f64>) -> Vec<Num> {
    values.into_iter().map(Num).collect()
}

/// Row-major nested array.
pub fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<Num>> {
    m.row_iter().map(|r| nums(r.iter().copied())).collect()
}

pub fn rows_to_matrix(rows: &[Vec<Num>]) -> CliResult<DMatrix<f64>> {
    let p = rows.len();
    let m = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != m) {
        return Err(CliError::Data("ragged loading matrix".into()));
    }
    Ok(DMatrix::from_fn(p, m, |i, j| rows[i][j].0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellDoc {
    pub gamma: Num,
    pub rho: Num,
    pub rho_star: Num,
    pub loglik: Num,
    pub penalized: Num,
    pub df: usize,
    pub aic: Num,
    pub bic: Num,
    pub caic: Num,
    pub lambda: Vec<Vec<Num>>,
    pub psi: Vec<Num>,
    pub converged: bool,
    pub iterations: usize,
}

impl CellDoc {
    pub fn new(gamma: f64, cell: &PathCell) -> Self {
        let fit = &cell.fit;
        Self {
            gamma: Num(gamma),
            rho: Num(fit.rho),
            rho_star: Num(fit.rho_star),
            loglik: Num(fit.objective.loglik),
            penalized: Num(fit.objective.total),
            df: cell.df,
            aic: Num(cell.criteria.aic),
            bic: Num(cell.criteria.bic),
            caic: Num(cell.criteria.caic),
            lambda: matrix_rows(fit.model.loadings()),
            psi: nums(fit.model.psi().iter().copied()),
            converged: fit.converged,
            iterations: fit.iterations,
        }
    }

    pub fn criterion(&self, c: Criterion) -> f64 {
        match c {
            Criterion::Aic => self.aic.0,
            Criterion::Bic => self.bic.0,
            Criterion::Caic => self.caic.0,
        }
    }

    pub fn model(&self) -> CliResult<FactorModel> {
        let l = rows_to_matrix(&self.lambda)?;
        let psi = nalgebra::DVector::from_iterator(self.psi.len(), self.psi.iter().map(|v| v.0));
        Ok(FactorModel::new(l, psi)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridDoc {
    pub rho: Vec<Num>,
    pub gamma: Vec<Num>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BestDoc {
    pub criterion: String,
    /// Position in `cells`.
    pub index: usize,
    pub gamma: Num,
    pub rho: Num,
    pub value: Num,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptionsDoc {
    pub n_rho: usize,
    pub delta: Num,
    pub n_gamma: usize,
    pub restarts: usize,
    pub row_warm_start: bool,
    pub backward_sweep: bool,
    pub eta: Num,
    pub em_tol: Num,
    pub em_max_iter: usize,
    pub cd_tol: Num,
    pub cd_max_sweeps: usize,
    pub psi_floor: Num,
}

impl From<&PathOptions> for OptionsDoc {
    fn from(o: &PathOptions) -> Self {
        Self {
            n_rho: o.n_rho,
            delta: Num(o.delta),
            n_gamma: o.n_gamma,
            restarts: o.restarts,
            row_warm_start: o.row_warm_start,
            backward_sweep: o.backward_sweep,
            eta: Num(o.solver.eta),
            em_tol: Num(o.solver.em_tol),
            em_max_iter: o.solver.em_max_iter,
            cd_tol: Num(o.solver.cd_tol),
            cd_max_sweeps: o.solver.cd_max_sweeps,
            psi_floor: Num(o.solver.psi_floor),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingsDoc {
    pub total_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaDoc {
    pub seed: u64,
    pub family: String,
    pub n_factors: usize,
    pub n_vars: usize,
    pub n_obs: usize,
    pub standardized: bool,
    pub options: OptionsDoc,
    pub version: String,
    pub warnings: Vec<String>,
    pub timings: TimingsDoc,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathDoc {
    pub grid: GridDoc,
    /// Row-major over (`gamma`, `rho`).
    pub cells: Vec<CellDoc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub best: Option<BestDoc>,
    pub meta: MetaDoc,
}

impl PathDoc {
    pub fn new(path: &PathResult, meta: MetaDoc, criterion: Option<Criterion>) -> Self {
        let k = path.grid.rhos().len();
        let cells: Vec<CellDoc> = path
            .cells
            .iter()
            .zip(path.grid.gammas())
            .flat_map(|(row, &g)| row.iter().map(move |c| CellDoc::new(g, c)))
            .collect();
        let best = criterion.and_then(|c| {
            sparsefactor_core::select(path, c).map(|(t, kk)| {
                let index = t * k + kk;
                best_doc(c, index, &cells[index])
            })
        });
        Self {
            grid: GridDoc {
                rho: nums(path.grid.rhos().iter().copied()),
                gamma: nums(path.grid.gammas().iter().copied()),
            },
            cells,
            best,
            meta,
        }
    }

    /// Best cell by `criterion`, with the same tie rules as the library.
    pub fn select(&self, criterion: Criterion) -> Option<BestDoc> {
        let index = argmin_cell(
            self.cells
                .iter()
                .map(|c| (c.rho.0, c.gamma.0, c.criterion(criterion))),
        )?;
        Some(best_doc(criterion, index, &self.cells[index]))
    }
}

fn best_doc(criterion: Criterion, index: usize, cell: &CellDoc) -> BestDoc {
    BestDoc {
        criterion: criterion.name().into(),
        index,
        gamma: cell.gamma,
        rho: cell.rho,
        value: Num(cell.criterion(criterion)),
    }
}

/// Output of `select` and `fit`: one cell with context.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellReportDoc {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub best: Option<BestDoc>,
    pub cell: CellDoc,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub meta: Option<MetaDoc>,
}

pub fn fit_cell(fit: &FitResult, gamma: f64, n: usize) -> CellDoc {
    let df = fit.df();
    let p = fit.model.n_vars();
    CellDoc::new(
        gamma,
        &PathCell {
            criteria: sparsefactor_core::criteria(fit.objective.loglik, df, n, p),
            df,
            fit: fit.clone(),
        },
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RotationDoc {
    pub criterion: String,
    pub criterion_value: Num,
    pub iterations: usize,
    pub loglik: Num,
    pub lambda: Vec<Vec<Num>>,
    pub rotation: Vec<Vec<Num>>,
    pub psi: Vec<Num>,
    pub seed: u64,
    pub version: String,
}

/// Reads the model stored in a `fit`, `select` or `path` document. A path
/// document yields its best cell.
pub fn model_from_json(text: &str) -> CliResult<FactorModel> {
    let value: serde_json::Value = serde_json::from_str(text)?;
    if value.get("cells").is_some() {
        let doc: PathDoc = serde_json::from_value(value)?;
        let best = doc
            .best
            .as_ref()
            .ok_or_else(|| CliError::Data("path document has no `best` cell".into()))?;
        let cell = doc
            .cells
            .get(best.index)
            .ok_or_else(|| CliError::Data("`best` index out of range".into()))?;
        return cell.model();
    }
    if value.get("cell").is_some() {
        let doc: CellReportDoc = serde_json::from_value(value)?;
        return doc.cell.model();
    }
    if value.get("lambda").is_some() && value.get("psi").is_some() {
        let l: Vec<Vec<Num>> = serde_json::from_value(value["lambda"].clone())?;
        let psi: Vec<Num> = serde_json::from_value(value["psi"].clone())?;
        let psi = nalgebra::DVector::from_iterator(psi.len(), psi.iter().map(|v| v.0));
        return Ok(FactorModel::new(rows_to_matrix(&l)?, psi)?);
    }
    Err(CliError::Data("no model found in JSON document".into()))
}

fn csv_num(v: f64) -> String {
    if v == 0.0 {
        "0".into()
    } else if v.is_infinite() {
        if v > 0.0 { "inf" } else { "-inf" }.into()
    } else if v.is_nan() {
        String::new()
    } else {
        format!("{v}")
    }
}

/// Long-format loading table: one line per (`gamma`, `rho`, `i`, `j`).
pub fn write_long_csv<W: Write>(path: &PathResult, out: W) -> CliResult<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["gamma", "rho", "i", "j", "lambda"])?;
    for (row, &g) in path.cells.iter().zip(path.grid.gammas()) {
        for (cell, &rho) in row.iter().zip(path.grid.rhos()) {
            let l = cell.fit.model.loadings();
            for i in 0..l.nrows() {
                for j in 0..l.ncols() {
                    w.write_record([
                        csv_num(g),
                        csv_num(rho),
                        (i + 1).to_string(),
                        (j + 1).to_string(),
                        csv_num(l[(i, j)]),
                    ])?;
                }
            }
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureDoc {
    pub replication: usize,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyRowDoc {
    pub method: String,
    pub criterion: Option<String>,
    pub mse_lambda: Num,
    pub mse_psi: Num,
    pub tpr: Num,
    pub tnr: Num,
    pub se_mse_lambda: Num,
    pub se_mse_psi: Num,
    pub se_tpr: Num,
    pub se_tnr: Num,
    pub replications: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyDoc {
    pub model: String,
    pub n: usize,
    pub replications: usize,
    pub seed: u64,
    pub family: String,
    pub gammas: Vec<Num>,
    pub options: OptionsDoc,
    pub version: String,
    pub failures: Vec<FailureDoc>,
    pub rows: Vec<StudyRowDoc>,
}

impl StudyDoc {
    pub fn new(config: &StudyConfig, report: &StudyReport) -> Self {
        Self {
            model: report.model.into(),
            n: report.n,
            replications: report.replications,
            seed: config.seed,
            family: config.family.name().into(),
            gammas: nums(config.gammas.iter().copied()),
            options: OptionsDoc::from(&config.path),
            version: VERSION.into(),
            failures: report
                .failures
                .iter()
                .map(|(replication, error)| FailureDoc {
                    replication: *replication,
                    error: error.clone(),
                })
                .collect(),
            rows: report
                .rows
                .iter()
                .map(|r| {
                    let m = r.metrics;
                    StudyRowDoc {
                        method: r.method.label(),
                        criterion: r.method.criterion().map(|c| c.name().into()),
                        mse_lambda: Num(m.mse_lambda),
                        mse_psi: Num(m.mse_psi),
                        tpr: Num(m.tpr),
                        tnr: Num(m.tnr),
                        se_mse_lambda: Num(m.se_mse_lambda),
                        se_mse_psi: Num(m.se_mse_psi),
                        se_tpr: Num(m.se_tpr),
                        se_tnr: Num(m.se_tnr),
                        replications: m.replications,
                    }
                })
                .collect(),
        }
    }
}

/// Table with one column per method (criterion first, as in the printed
/// tables) and one line per metric.
pub fn write_study_csv<W: Write>(doc: &StudyDoc, out: W) -> CliResult<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["metric".to_string()];
    header.extend(doc.rows.iter().map(|r| match &r.criterion {
        Some(c) => format!("{c}:{}", r.method),
        None => r.method.clone(),
    }));
    w.write_record(&header)?;
    type Pick = fn(&StudyRowDoc) -> f64;
    let metrics: [(&str, Pick); 4] = [
        ("mse_lambda", |r| r.mse_lambda.0),
        ("mse_psi", |r| r.mse_psi.0),
        ("tpr", |r| r.tpr.0),
        ("tnr", |r| r.tnr.0),
    ];
    for (name, pick) in metrics {
        let mut line = vec![name.to_string()];
        line.extend(doc.rows.iter().map(|r| csv_num(pick(r))));
        w.write_record(&line)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn number_rules() {
        let text = serde_json::to_string(&nums([0.0, -0.0, 1.5, f64::INFINITY, f64::NAN])).unwrap();
        assert_eq!(text, r#"[0,0,1.5,"inf",null]"#);
        let back: Vec<Num> = serde_json::from_str(&text).unwrap();
        assert_eq!(back[0].0, 0.0);
        assert_eq!(back[3].0, f64::INFINITY);
        assert!(back[4].0.is_nan());
    }

    #[test]
    fn floats_round_trip_exactly() {
        for v in [0.1, 1.0 / 3.0, 2.718281828459045e-12, -123456.789012345678] {
            let text = serde_json::to_string(&Num(v)).unwrap();
            let back: Num = serde_json::from_str(&text).unwrap();
            assert_eq!(back.0.to_bits(), v.to_bits());
            assert_eq!(csv_num(v).parse::<f64>().unwrap().to_bits(), v.to_bits());
        }
        assert_eq!(csv_num(0.0), "0");
    }
}

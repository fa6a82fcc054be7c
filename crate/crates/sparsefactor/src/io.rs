//! Reading numeric CSV files.

use std::fs::File;
use std::path::Path;

use nalgebra::DMatrix;
use sparsefactor_core::{sample_covariance, SampleMoments};

use crate::error::{CliError, CliResult};

/// Reads a numeric CSV table. A first row that does not parse as numbers
/// is taken as a header and skipped.
pub fn read_matrix(path: &Path) -> CliResult<DMatrix<f64>> {
    let file = File::open(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(file);
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record?;
        if record.iter().all(|f| f.is_empty()) {
            continue;
        }
        let parsed: Result<Vec<f64>, _> = record.iter().map(str::parse::<f64>).collect();
        match parsed {
            Ok(values) => rows.push(values),
            Err(_) if line == 0 => continue,
            Err(e) => {
                return Err(CliError::Data(format!(
                    "{}: line {}: {e}",
                    path.display(),
                    line + 1
                )))
            }
        }
    }
    let n = rows.len();
    let p = rows.first().map_or(0, Vec::len);
    if n == 0 || p == 0 {
        return Err(CliError::Data(format!("{}: no numeric rows", path.display())));
    }
    if let Some(bad) = rows.iter().position(|r| r.len() != p) {
        return Err(CliError::Data(format!(
            "{}: row {} has {} fields, expected {p}",
            path.display(),
            bad + 1,
            rows[bad].len()
        )));
    }
    Ok(DMatrix::from_fn(n, p, |i, j| rows[i][j]))
}

/// Sample moments from either a data matrix or a covariance matrix with
/// its sample size.
pub fn load_moments(
    data: Option<&Path>,
    cov: Option<&Path>,
    n: Option<usize>,
    standardize: bool,
) -> CliResult<SampleMoments> {
    let moments = match (data, cov) {
        (Some(path), None) => sample_covariance(&read_matrix(path)?)?,
        (None, Some(path)) => {
            let n = n.ok_or_else(|| CliError::Usage("--cov requires --n".into()))?;
            let s = read_matrix(path)?;
            if s.nrows() != s.ncols() {
                return Err(CliError::Data(format!(
                    "covariance must be square, got {}x{}",
                    s.nrows(),
                    s.ncols()
                )));
            }
            SampleMoments::from_covariance(s, n)?
        }
        (Some(_), Some(_)) => {
            return Err(CliError::Usage("give either --input or --cov, not both".into()))
        }
        (None, None) => return Err(CliError::Usage("one of --input or --cov is required".into())),
    };
    if standardize {
        Ok(moments.standardized()?)
    } else {
        Ok(moments)
    }
}

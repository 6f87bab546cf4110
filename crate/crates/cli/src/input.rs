//! CSV input: named columns mapped onto a `Dataset`.

use std::collections::HashSet;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use threshold_iv::Dataset;

use crate::args::DataArgs;
use crate::error::{CliError, CliResult, Context};

/// Parsed columns in the order requested.
#[derive(Debug, Clone, PartialEq)]
pub struct Columns {
    pub names: Vec<String>,
    pub data: Vec<Vec<f64>>,
}

/// Read the named columns from a CSV file with a header row. Empty cells,
/// `NA` and anything that does not parse as a finite number are errors.
pub fn read_columns(path: &Path, names: &[String]) -> CliResult<Columns> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path).map_err(|e| csv_error(path, e))?;
    let headers = rdr.headers().map_err(|e| csv_error(path, e))?.clone();
    let mut idx = Vec::with_capacity(names.len());
    for n in names {
        match headers.iter().position(|h| h == n) {
            Some(i) => idx.push(i),
            None => {
                return Err(CliError::Config(format!(
                    "column {n:?} not found in {}; available: {}",
                    path.display(),
                    headers.iter().collect::<Vec<_>>().join(", ")
                )))
            }
        }
    }
    let mut data = vec![Vec::new(); names.len()];
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let line = rec.position().map_or(0, |p| p.line());
        for (k, &i) in idx.iter().enumerate() {
            let cell = rec.get(i).unwrap_or("");
            let v = parse_cell(cell).map_err(|message| CliError::Parse { line, column: names[k].clone(), message })?;
            data[k].push(v);
        }
    }
    if data.first().is_some_and(|c| c.is_empty()) {
        return Err(CliError::Config(format!("{} has no data rows", path.display())));
    }
    Ok(Columns { names: names.to_vec(), data })
}

fn parse_cell(cell: &str) -> Result<f64, String> {
    if cell.is_empty() || cell.eq_ignore_ascii_case("na") || cell.eq_ignore_ascii_case("nan") {
        return Err(format!("missing value {cell:?}"));
    }
    match cell.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        Ok(v) => Err(format!("non-finite value {v}")),
        Err(_) => Err(format!("not a number: {cell:?}")),
    }
}

fn csv_error(path: &Path, e: csv::Error) -> CliError {
    let line = e.position().map_or(0, |p| p.line());
    match e.into_kind() {
        csv::ErrorKind::Io(io) => CliError::Io(std::io::Error::new(io.kind(), format!("{}: {io}", path.display()))),
        kind => CliError::Parse { line, column: String::new(), message: format!("{kind:?}") },
    }
}

fn matrix(cols: &[&Vec<f64>], t: usize) -> DMatrix<f64> {
    DMatrix::from_fn(t, cols.len(), |r, c| cols[c][r])
}

/// Build the dataset described by the column flags. The included regressors
/// get a leading intercept unless `--no-intercept` is set.
pub fn load_dataset(a: &DataArgs) -> CliResult<Dataset> {
    let mut names = vec![a.y.clone()];
    names.extend(a.x.iter().cloned());
    names.extend(a.z1.iter().cloned());
    names.extend(a.z.iter().cloned());
    names.push(a.q.clone());
    // q may double as an instrument or included regressor; every other column
    // plays one role only.
    let mut seen = HashSet::new();
    for n in &names[..names.len() - 1] {
        if n.is_empty() {
            return Err(CliError::Config("empty column name".into()));
        }
        if !seen.insert(n.as_str()) {
            return Err(CliError::Config(format!("column {n:?} is assigned more than one role")));
        }
    }
    if a.q == a.y || a.x.contains(&a.q) {
        return Err(CliError::Config(format!("threshold variable {:?} is also y or x", a.q)));
    }
    if a.no_intercept && a.z1.is_empty() {
        return Err(CliError::Config("--no-intercept needs at least one --z1 column".into()));
    }

    let cols = read_columns(&a.input, &names)?;
    let t = cols.data[0].len();
    let (px, p2, pz) = (a.x.len(), a.z1.len(), a.z.len());
    let mut it = cols.data.iter();
    let y = DVector::from_vec(it.next().expect("y").clone());
    let xs: Vec<&Vec<f64>> = it.by_ref().take(px).collect();
    let z1s: Vec<&Vec<f64>> = it.by_ref().take(p2).collect();
    let zs: Vec<&Vec<f64>> = it.by_ref().take(pz).collect();
    let q = DVector::from_vec(it.next().expect("q").clone());

    let ones = vec![1.0; t];
    let mut z1c: Vec<&Vec<f64>> = Vec::new();
    if !a.no_intercept {
        z1c.push(&ones);
    }
    z1c.extend(z1s);
    Dataset::from_excluded(y, matrix(&xs, t), matrix(&z1c, t), matrix(&zs, t), q).context("building the dataset")
}

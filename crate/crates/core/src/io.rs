//! On-disk formats for datasets and candidate sets.
//!
//! Dataset directory: `x1.csv` (`d` rows, `n` columns), `y.csv` (one target
//! per line) and `meta.json`. Candidate directory: `masses.csv` with one log
//! prior mass per candidate, and `candidate_<j>_layer_<l>.csv` holding the
//! weight rows followed by a final bias row.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{CandidateSet, Dataset, Layer, TargetGenerator, ThetaCandidate};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub d: usize,
    pub n: usize,
    pub noise_var: f64,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub generator: Option<TargetGenerator>,
}

fn write_rows(path: &Path, rows: impl Iterator<Item = Vec<f64>>) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    for row in rows {
        w.write_record(row.iter().map(f64::to_string))?;
    }
    w.flush()?;
    Ok(())
}

fn read_rows(path: &Path) -> Result<Vec<Vec<f64>>> {
    let mut r = csv::ReaderBuilder::new()
        .has_headers(false)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_path(path)?;
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let row = rec
            .iter()
            .map(|s| {
                s.parse::<f64>()
                    .map_err(|_| Error::invalid(format!("{}: not a number: {s:?}", path.display())))
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    Ok(rows)
}

fn rows_to_matrix(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>> {
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::invalid(format!("{what}: ragged rows")));
    }
    Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

fn matrix_rows(m: &DMatrix<f64>) -> impl Iterator<Item = Vec<f64>> + '_ {
    (0..m.nrows()).map(move |i| m.row(i).iter().copied().collect())
}

pub fn write_dataset(dir: &Path, data: &Dataset, seed: Option<u64>, generator: Option<TargetGenerator>) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_rows(&dir.join("x1.csv"), matrix_rows(data.x1()))?;
    write_rows(&dir.join("y.csv"), data.y().iter().map(|v| vec![*v]))?;
    let meta = DatasetMeta {
        d: data.d(),
        n: data.n(),
        noise_var: data.noise_var(),
        seed,
        generator,
    };
    fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&meta)?)?;
    Ok(())
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let meta: DatasetMeta = serde_json::from_str(&fs::read_to_string(dir.join("meta.json"))?)?;
    let x1 = rows_to_matrix(&read_rows(&dir.join("x1.csv"))?, "x1.csv")?;
    let y_rows = read_rows(&dir.join("y.csv"))?;
    if y_rows.iter().any(|r| r.len() != 1) {
        return Err(Error::invalid("y.csv must have one value per line"));
    }
    let y = DVector::from_iterator(y_rows.len(), y_rows.into_iter().map(|r| r[0]));
    if x1.shape() != (meta.d, meta.n) || y.len() != meta.n {
        return Err(Error::invalid(format!(
            "dataset files disagree with meta.json (d = {}, n = {})",
            meta.d, meta.n
        )));
    }
    Dataset::new(x1, y, meta.noise_var)
}

/// Reads a matrix of test inputs (`d` rows, one column per test point).
pub fn read_matrix(path: &Path) -> Result<DMatrix<f64>> {
    rows_to_matrix(&read_rows(path)?, &path.display().to_string())
}

pub fn write_matrix(path: &Path, m: &DMatrix<f64>) -> Result<()> {
    write_rows(path, matrix_rows(m))
}

fn layer_file(j: usize, l: usize) -> String {
    format!("candidate_{j}_layer_{l}.csv")
}

pub fn write_candidates(dir: &Path, set: &CandidateSet) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_rows(
        &dir.join("masses.csv"),
        set.candidates().iter().map(|c| vec![c.log_prior_mass]),
    )?;
    for (j, c) in set.candidates().iter().enumerate() {
        for (l, layer) in c.layers.iter().enumerate() {
            let rows = matrix_rows(&layer.weights).chain(std::iter::once(layer.bias.iter().copied().collect()));
            write_rows(&dir.join(layer_file(j, l)), rows)?;
        }
    }
    Ok(())
}

pub fn read_candidates(dir: &Path) -> Result<CandidateSet> {
    let masses = read_rows(&dir.join("masses.csv"))?;
    let mut cands = Vec::with_capacity(masses.len());
    for (j, m) in masses.iter().enumerate() {
        let [mass] = m.as_slice() else {
            return Err(Error::invalid("masses.csv must have one value per line"));
        };
        let mut layers = Vec::new();
        for l in 0.. {
            let path = dir.join(layer_file(j, l));
            if !path.exists() {
                break;
            }
            let rows = read_rows(&path)?;
            let Some((bias, weights)) = rows.split_last() else {
                return Err(Error::invalid(format!("{}: empty layer file", path.display())));
            };
            let w = rows_to_matrix(weights, &path.display().to_string())?;
            layers.push(Layer::new(w, DVector::from_column_slice(bias))?);
        }
        if layers.is_empty() {
            return Err(Error::invalid(format!("candidate {j} has no layer files")));
        }
        cands.push(ThetaCandidate::new(layers, *mass)?);
    }
    CandidateSet::new(cands)
}

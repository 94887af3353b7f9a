//! CSV ingestion and export, generator persistence.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{CdetError, Result};
use crate::mdn::{MdnGenerator, StoredGenerator};

/// Which header columns hold the response and which the covariates.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnRoles {
    pub response: Vec<String>,
    pub covariates: Vec<String>,
}

impl ColumnRoles {
    pub fn new<S: Into<String>>(response: impl IntoIterator<Item = S>, covariates: impl IntoIterator<Item = S>) -> Self {
        Self {
            response: response.into_iter().map(Into::into).collect(),
            covariates: covariates.into_iter().map(Into::into).collect(),
        }
    }

    /// Both sets non-empty, no name used twice.
    pub fn validate(&self) -> Result<()> {
        if self.response.is_empty() || self.covariates.is_empty() {
            return Err(CdetError::Config("response and covariate column lists must both be non-empty".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for name in self.response.iter().chain(&self.covariates) {
            if !seen.insert(name.as_str()) {
                return Err(CdetError::Config(format!("column `{name}` assigned more than once")));
            }
        }
        Ok(())
    }

    pub fn all(&self) -> impl Iterator<Item = &String> {
        self.response.iter().chain(&self.covariates)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadedTable {
    pub dataset: Dataset,
    /// 1-based data row numbers (header excluded) that were rejected.
    pub skipped_rows: Vec<usize>,
}

fn io_err(path: &Path, source: std::io::Error) -> CdetError {
    CdetError::Io { path: path.display().to_string(), source }
}

/// Reads a comma-separated file with a header row. Rows with a missing or
/// non-numeric value in any selected column are skipped with a warning.
pub fn load_table(path: impl AsRef<Path>, roles: &ColumnRoles) -> Result<LoadedTable> {
    let path = path.as_ref();
    roles.validate()?;
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(BufReader::new(file));
    let headers = reader.headers()?.clone();
    let position = |name: &String| {
        headers.iter().position(|h| h == name).ok_or_else(|| CdetError::MissingColumn(name.clone()))
    };
    let cols: Vec<usize> = roles.all().map(position).collect::<Result<_>>()?;
    let p = roles.response.len();
    let d = roles.covariates.len();
    let mut data = Dataset::empty(p, d);
    let mut skipped = Vec::new();
    let mut row = vec![0.0; p + d];
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let parsed = cols.iter().zip(row.iter_mut()).all(|(&c, v)| {
            match record.get(c).and_then(|s| s.parse::<f64>().ok()).filter(|x| x.is_finite()) {
                Some(x) => {
                    *v = x;
                    true
                }
                None => false,
            }
        });
        if parsed {
            data.push(&row[..p], &row[p..]);
        } else {
            skipped.push(i + 1);
        }
    }
    if !skipped.is_empty() {
        log::warn!(
            "{}: skipped {} row(s) with missing or non-numeric values (data rows {:?})",
            path.display(),
            skipped.len(),
            skipped
        );
    }
    if data.is_empty() {
        return Err(CdetError::NoUsableRows(path.display().to_string()));
    }
    Ok(LoadedTable { dataset: data, skipped_rows: skipped })
}

/// Writes `data` with the given column names (responses first).
pub fn write_table(path: impl AsRef<Path>, data: &Dataset, roles: &ColumnRoles) -> Result<()> {
    let path = path.as_ref();
    roles.validate()?;
    if roles.response.len() != data.p() || roles.covariates.len() != data.d() {
        return Err(CdetError::DimensionMismatch {
            expected: data.p() + data.d(),
            actual: roles.response.len() + roles.covariates.len(),
            context: "column names vs dataset",
        });
    }
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    w.write_record(roles.all())?;
    let mut row = vec![0.0; data.p() + data.d()];
    for i in 0..data.len() {
        data.joint_into(i, &mut row);
        w.write_record(row.iter().map(f64::to_string))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

/// Default names `y1..yp, x1..xd`.
pub fn default_roles(p: usize, d: usize) -> ColumnRoles {
    ColumnRoles::new((1..=p).map(|j| format!("y{j}")), (1..=d).map(|j| format!("x{j}")))
}

pub fn save_generator(path: impl AsRef<Path>, generator: &MdnGenerator) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer(&mut w, &generator.to_stored())?;
    w.flush().map_err(|e| io_err(path, e))
}

pub fn load_generator(path: impl AsRef<Path>) -> Result<MdnGenerator> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let stored: StoredGenerator = serde_json::from_reader(BufReader::new(file))?;
    MdnGenerator::from_stored(stored)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;

    fn write(dir: &tempfile::TempDir, body: &str) -> std::path::PathBuf {
        let path = dir.path().join("t.csv");
        fs::write(&path, body).unwrap();
        path
    }

    #[test]
    fn loads_by_name() {
        let dir = tempfile::tempdir().unwrap();
        let path = write(&dir, "x2,y,x1\n1,2,3\n4,5,6\n7,8,9\n");
        let t = load_table(&path, &ColumnRoles::new(["y"], ["x1", "x2"])).unwrap();
        assert_eq!((t.dataset.p(), t.dataset.d(), t.dataset.len()), (1, 2, 3));
        assert_eq!(t.dataset.response(1), &[5.0]);
        assert_eq!(t.dataset.covariate(1), &[6.0, 4.0]);
    }

    #[test]
    fn na_rows_are_skipped() {
        let dir = tempfile::tempdir().unwrap();
        let path = write(&dir, "y,x1\n1,2\nNA,3\n4,\n5,6\n");
        let t = load_table(&path, &ColumnRoles::new(["y"], ["x1"])).unwrap();
        assert_eq!(t.dataset.len(), 2);
        assert_eq!(t.skipped_rows, vec![2, 3]);
    }

    #[test]
    fn missing_column_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let path = write(&dir, "y,x1\n1,2\n");
        let err = load_table(&path, &ColumnRoles::new(["y"], ["x1", "x9"])).unwrap_err();
        assert!(matches!(&err, CdetError::MissingColumn(c) if c == "x9"));
    }

    #[test]
    fn no_rows_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = write(&dir, "y,x1\nNA,1\n");
        assert!(matches!(load_table(&path, &ColumnRoles::new(["y"], ["x1"])), Err(CdetError::NoUsableRows(_))));
        assert!(matches!(
            load_table(dir.path().join("absent.csv"), &ColumnRoles::new(["y"], ["x1"])),
            Err(CdetError::Io { .. })
        ));
    }

    #[test]
    fn overlapping_roles_rejected() {
        assert!(ColumnRoles::new(["y"], ["y"]).validate().is_err());
        assert!(ColumnRoles::new(Vec::<String>::new(), vec!["x".into()]).validate().is_err());
    }
}

//! Per-unit data: covariates, individual treatment and outcome.
//!
//! CSV schema: `id,z,y,x1,...,xp`. The `z` and `y` columns may be absent or
//! left empty (covariates-only tables). Ids must cover `0..n` exactly once.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct UnitTable {
    pub covariate_names: Vec<String>,
    /// `n x p` covariate matrix, row `i` belongs to node `i`.
    pub x: DMatrix<f64>,
    pub z: Option<Vec<u8>>,
    pub y: Option<Vec<f64>>,
}

impl UnitTable {
    pub fn new(covariate_names: Vec<String>, x: DMatrix<f64>) -> Result<Self> {
        if covariate_names.len() != x.ncols() {
            return Err(Error::validation(format!(
                "{} covariate names for {} columns",
                covariate_names.len(),
                x.ncols()
            )));
        }
        Ok(UnitTable {
            covariate_names,
            x,
            z: None,
            y: None,
        })
    }

    pub fn with_treatment(mut self, z: Vec<u8>) -> Result<Self> {
        if z.len() != self.len() {
            return Err(Error::validation(format!("{} treatments for {} units", z.len(), self.len())));
        }
        if z.iter().any(|&v| v > 1) {
            return Err(Error::validation("treatment must be binary"));
        }
        self.z = Some(z);
        Ok(self)
    }

    pub fn with_outcome(mut self, y: Vec<f64>) -> Result<Self> {
        if y.len() != self.len() {
            return Err(Error::validation(format!("{} outcomes for {} units", y.len(), self.len())));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation("outcomes must be finite"));
        }
        self.y = Some(y);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn n_covariates(&self) -> usize {
        self.x.ncols()
    }

    pub fn covariate_index(&self, name: &str) -> Option<usize> {
        self.covariate_names.iter().position(|n| n == name)
    }

    pub fn treatment(&self) -> Result<&[u8]> {
        self.z
            .as_deref()
            .ok_or_else(|| Error::validation("unit table has no treatment column"))
    }

    pub fn outcome(&self) -> Result<&[f64]> {
        self.y
            .as_deref()
            .ok_or_else(|| Error::validation("unit table has no outcome column"))
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["id".to_string(), "z".to_string(), "y".to_string()];
        header.extend(self.covariate_names.iter().cloned());
        w.write_record(&header)?;
        for i in 0..self.len() {
            let mut rec = vec![i.to_string()];
            rec.push(self.z.as_ref().map(|z| z[i].to_string()).unwrap_or_default());
            rec.push(self.y.as_ref().map(|y| format!("{}", y[i])).unwrap_or_default());
            rec.extend(self.x.row(i).iter().map(|v| format!("{v}")));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_csv_file(&self, path: &Path) -> Result<()> {
        self.write_csv(std::io::BufWriter::new(std::fs::File::create(path)?))
    }

    pub fn read_csv_file(path: &Path) -> Result<Self> {
        Self::read_csv(std::fs::File::open(path)?, path)
    }

    pub fn read_csv<R: Read>(reader: R, path: &Path) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let headers = rdr.headers()?.clone();
        let perr = |line: usize, message: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        let col = |name: &str| headers.iter().position(|h| h == name);
        let id_col = col("id").ok_or_else(|| perr(1, "missing `id` column".into()))?;
        let z_col = col("z");
        let y_col = col("y");
        let x_cols: Vec<usize> = (0..headers.len())
            .filter(|&c| c != id_col && Some(c) != z_col && Some(c) != y_col)
            .collect();
        let names: Vec<String> = x_cols.iter().map(|&c| headers[c].to_string()).collect();

        let mut rows: Vec<(usize, Option<u8>, Option<f64>, Vec<f64>)> = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let line = rec.position().map(|p| p.line() as usize).unwrap_or(0);
            let field = |c: usize| rec.get(c).unwrap_or("");
            let id: usize = field(id_col)
                .parse()
                .map_err(|_| perr(line, format!("bad id `{}`", field(id_col))))?;
            let z = match z_col.map(field) {
                None | Some("") => None,
                Some(s) => match s {
                    "0" => Some(0u8),
                    "1" => Some(1u8),
                    _ => return Err(perr(line, format!("treatment must be 0 or 1, got `{s}`"))),
                },
            };
            let y = match y_col.map(field) {
                None | Some("") => None,
                Some(s) => Some(
                    s.parse::<f64>()
                        .ok()
                        .filter(|v| v.is_finite())
                        .ok_or_else(|| perr(line, format!("bad outcome `{s}`")))?,
                ),
            };
            let xs = x_cols
                .iter()
                .map(|&c| {
                    field(c)
                        .parse::<f64>()
                        .ok()
                        .filter(|v| v.is_finite())
                        .ok_or_else(|| perr(line, format!("bad value `{}` in column {}", field(c), &headers[c])))
                })
                .collect::<Result<Vec<f64>>>()?;
            rows.push((id, z, y, xs));
        }
        let n = rows.len();
        let mut seen = vec![false; n];
        for (id, ..) in &rows {
            if *id >= n || seen[*id] {
                return Err(Error::validation(format!(
                    "unit ids must cover 0..{n} exactly once (offending id {id})"
                )));
            }
            seen[*id] = true;
        }
        rows.sort_by_key(|r| r.0);
        let p = names.len();
        let x = DMatrix::from_fn(n, p, |i, j| rows[i].3[j]);
        let all_or_none = |count: usize, what: &str| -> Result<bool> {
            match count {
                0 => Ok(false),
                c if c == n => Ok(true),
                _ => Err(Error::validation(format!("{what} column is only partially filled"))),
            }
        };
        let has_z = all_or_none(rows.iter().filter(|r| r.1.is_some()).count(), "z")?;
        let has_y = all_or_none(rows.iter().filter(|r| r.2.is_some()).count(), "y")?;
        Ok(UnitTable {
            covariate_names: names,
            x,
            z: has_z.then(|| rows.iter().map(|r| r.1.unwrap()).collect()),
            y: has_y.then(|| rows.iter().map(|r| r.2.unwrap()).collect()),
        })
    }
}

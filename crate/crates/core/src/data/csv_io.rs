use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use super::{DataError, Dataset};
use crate::autodiff::Matrix;

const OPTIONAL: [&str; 3] = ["ycf", "mu0", "mu1"];

/// Reads a dataset with header `x0,…,x{k-1},t,yf[,ycf][,mu0][,mu1]`.
/// Lines starting with `#` are skipped.
pub fn load_csv(path: impl AsRef<Path>) -> Result<Dataset, DataError> {
    read_csv(File::open(path)?)
}

pub fn read_csv<R: Read>(reader: R) -> Result<Dataset, DataError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_owned).collect();
    let layout = parse_header(&header)?;

    let mut x = Vec::new();
    let mut t = Vec::new();
    let mut yf = Vec::new();
    let mut optional: Vec<Vec<f64>> = vec![Vec::new(); layout.optional.len()];
    for (i, record) in rdr.records().enumerate() {
        let row = i + 1;
        let record = record?;
        if record.len() != header.len() {
            return Err(DataError::Schema {
                row,
                message: format!("expected {} cells, found {}", header.len(), record.len()),
            });
        }
        let cell = |c: usize| -> Result<f64, DataError> {
            let raw = &record[c];
            let v: f64 = raw.parse().map_err(|_| DataError::Schema {
                row,
                message: format!("column {} is not numeric: {raw:?}", header[c]),
            })?;
            if !v.is_finite() {
                return Err(DataError::Schema {
                    row,
                    message: format!("column {} is not finite", header[c]),
                });
            }
            Ok(v)
        };
        for c in 0..layout.k {
            x.push(cell(c)?);
        }
        let tv = cell(layout.k)?;
        t.push(match tv {
            v if v == 0.0 => 0,
            v if v == 1.0 => 1,
            other => {
                return Err(DataError::Schema {
                    row,
                    message: format!("t must be 0 or 1, found {other}"),
                })
            }
        });
        yf.push(cell(layout.k + 1)?);
        for (j, col) in optional.iter_mut().enumerate() {
            col.push(cell(layout.k + 2 + j)?);
        }
    }

    let n = t.len();
    if n == 0 {
        return Err(DataError::Schema {
            row: 0,
            message: "file has no data rows".into(),
        });
    }
    let mut take = |name: &str| {
        layout
            .optional
            .iter()
            .position(|o| o == name)
            .map(|j| std::mem::take(&mut optional[j]))
    };
    let (ycf, mu0, mu1) = (take("ycf"), take("mu0"), take("mu1"));
    if !t.contains(&0) || !t.contains(&1) {
        return Err(DataError::Schema {
            row: n,
            message: "data contains a single treatment group".into(),
        });
    }
    Dataset::new(Matrix::new(n, layout.k, x)?, t, yf, ycf, mu0, mu1)
}

struct Layout {
    k: usize,
    optional: Vec<String>,
}

fn parse_header(header: &[String]) -> Result<Layout, DataError> {
    let bad = |message: String| DataError::Schema { row: 0, message };
    let k = header.iter().take_while(|h| h.starts_with('x')).count();
    for (i, h) in header[..k].iter().enumerate() {
        if *h != format!("x{i}") {
            return Err(bad(format!("expected covariate column x{i}, found {h:?}")));
        }
    }
    if k == 0 {
        return Err(bad("no covariate columns x0..".into()));
    }
    if header.get(k).map(String::as_str) != Some("t") || header.get(k + 1).map(String::as_str) != Some("yf") {
        return Err(bad(format!("expected columns t,yf after x0..x{}", k - 1)));
    }
    let optional: Vec<String> = header[k + 2..].to_vec();
    let mut last = None;
    for name in &optional {
        let pos = OPTIONAL
            .iter()
            .position(|o| o == name)
            .ok_or_else(|| bad(format!("unknown column {name:?}")))?;
        if last.is_some_and(|l| pos <= l) {
            return Err(bad(format!("column {name:?} out of order")));
        }
        last = Some(pos);
    }
    Ok(Layout { k, optional })
}

/// Writes the dataset with the schema read by [`read_csv`]. Floats use the
/// shortest representation that round-trips exactly.
pub fn write_csv<W: Write>(ds: &Dataset, writer: W) -> Result<(), DataError> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header: Vec<String> = (0..ds.k()).map(|i| format!("x{i}")).collect();
    header.push("t".into());
    header.push("yf".into());
    let extras: Vec<(&str, &[f64])> = [("ycf", ds.ycf()), ("mu0", ds.mu0()), ("mu1", ds.mu1())]
        .into_iter()
        .filter_map(|(n, c)| c.map(|c| (n, c)))
        .collect();
    header.extend(extras.iter().map(|(n, _)| n.to_string()));
    w.write_record(&header)?;
    for r in 0..ds.n() {
        let mut rec: Vec<String> = ds.x().row(r).iter().map(|v| v.to_string()).collect();
        rec.push(ds.t()[r].to_string());
        rec.push(ds.yf()[r].to_string());
        rec.extend(extras.iter().map(|(_, c)| c[r].to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

//! Numeric CSV files with a mandatory header.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;
use vffgp::Dataset;

use crate::CliError;

/// A header plus numeric rows.
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

pub fn read_table(path: &Path) -> Result<Table, CliError> {
    let file = File::open(path).map_err(|e| CliError::Input(format!("cannot open {}: {e}", path.display())))?;
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(file);
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| CliError::Input(format!("{}: unreadable header: {e}", path.display())))?
        .iter()
        .map(str::to_string)
        .collect();
    if header.is_empty() || header.iter().all(|h| h.is_empty()) {
        return Err(CliError::Input(format!("{}: missing header", path.display())));
    }
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        // data rows start on line 2
        let line = i + 2;
        let rec = rec.map_err(|e| CliError::Input(format!("{}: row {line}: {e}", path.display())))?;
        if rec.len() != header.len() {
            return Err(CliError::Input(format!("{}: row {line}: expected {} columns, found {}", path.display(), header.len(), rec.len())));
        }
        let row = rec
            .iter()
            .enumerate()
            .map(|(c, field)| match field.parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(v),
                _ => Err(CliError::Input(format!("{}: row {line}, column {} (`{}`): `{field}` is not a finite number", path.display(), c + 1, header[c]))),
            })
            .collect::<Result<Vec<_>, _>>()?;
        rows.push(row);
    }
    Ok(Table { header, rows })
}

/// Inputs are every column except a trailing `y`.
pub fn read_dataset(path: &Path) -> Result<Dataset, CliError> {
    let t = read_table(path)?;
    let y_col = t.header.iter().position(|h| h == "y").ok_or_else(|| CliError::Input(format!("{}: no `y` column", path.display())))?;
    let d = t.header.len() - 1;
    if d == 0 {
        return Err(CliError::Input(format!("{}: no input columns", path.display())));
    }
    let x = DMatrix::from_fn(t.rows.len(), d, |i, j| t.rows[i][if j < y_col { j } else { j + 1 }]);
    let y = t.rows.iter().map(|r| r[y_col]).collect();
    Dataset::new(x, y).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

/// Prediction inputs; a `y` column, if present, is ignored.
pub fn read_inputs(path: &Path) -> Result<DMatrix<f64>, CliError> {
    let t = read_table(path)?;
    let cols: Vec<usize> = (0..t.header.len()).filter(|&c| t.header[c] != "y").collect();
    Ok(DMatrix::from_fn(t.rows.len(), cols.len(), |i, j| t.rows[i][cols[j]]))
}

/// Shortest round-trip text, in exponent form for very small or large magnitudes.
pub fn fmt_f64(v: f64) -> String {
    let a = v.abs();
    if a != 0.0 && a.is_finite() && !(1e-5..1e16).contains(&a) {
        format!("{v:e}")
    } else {
        format!("{v}")
    }
}

pub fn write_table(path: &Path, header: &[&str], rows: &[Vec<f64>]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::Input(format!("cannot write {}: {e}", path.display())))?;
    let io = |e: csv::Error| CliError::Input(format!("cannot write {}: {e}", path.display()));
    w.write_record(header).map_err(io)?;
    for r in rows {
        w.write_record(r.iter().map(|&v| fmt_f64(v))).map_err(io)?;
    }
    w.flush().map_err(|e| CliError::Input(format!("cannot write {}: {e}", path.display())))
}

/// Mixed text and numeric rows, for tables with categorical columns.
pub fn write_records(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::Input(format!("cannot write {}: {e}", path.display())))?;
    let io = |e: csv::Error| CliError::Input(format!("cannot write {}: {e}", path.display()));
    w.write_record(header).map_err(io)?;
    for r in rows {
        w.write_record(r).map_err(io)?;
    }
    w.flush().map_err(|e| CliError::Input(format!("cannot write {}: {e}", path.display())))
}

pub fn write_dataset(path: &Path, data: &Dataset) -> Result<(), CliError> {
    let mut header: Vec<String> = (1..=data.dim()).map(|d| format!("x{d}")).collect();
    header.push("y".into());
    let rows: Vec<Vec<f64>> = (0..data.len())
        .map(|i| {
            let mut r = data.row(i);
            r.push(data.y[i]);
            r
        })
        .collect();
    write_table(path, &header.iter().map(String::as_str).collect::<Vec<_>>(), &rows)
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut f = File::create(path).map_err(|e| CliError::Input(format!("cannot write {}: {e}", path.display())))?;
    serde_json::to_writer_pretty(&mut f, value).map_err(|e| CliError::Input(format!("cannot write {}: {e}", path.display())))?;
    writeln!(f).map_err(|e| CliError::Input(format!("cannot write {}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_and_diagnostics() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.csv");
        let d = Dataset::new(DMatrix::from_row_slice(2, 2, &[0.1, 0.2, 0.3, 0.4]), vec![1.0, -1.0]).unwrap();
        write_dataset(&p, &d).unwrap();
        assert_eq!(read_dataset(&p).unwrap(), d);

        std::fs::write(&p, "x1,y\n0.1,2\n0.2,abc\n").unwrap();
        let e = read_dataset(&p).unwrap_err().to_string();
        assert!(e.contains("row 3") && e.contains("column 2"), "{e}");
        std::fs::write(&p, "x1,y\n0.1\n").unwrap();
        assert!(read_dataset(&p).is_err());
    }

    #[test]
    fn float_text_round_trips() {
        for v in [0.0, -1.5, 9.479058429331178e-184, 3.2e20, 1e-5, 0.1 + 0.2] {
            let t = fmt_f64(v);
            assert!(t.len() < 30, "{t}");
            assert_eq!(t.parse::<f64>().unwrap(), v);
        }
    }
}

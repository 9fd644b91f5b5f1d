//! CSV ingestion and output helpers.

use std::fs::File;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use sbss_core::{LocationSet, SpatialSample};

use crate::CliError;

const COORDINATE_NAMES: [&str; 3] = ["x", "y", "z"];

/// A data file: coordinates in columns `x[,y[,z]]`, values in all others.
#[derive(Clone, Debug)]
pub struct DataSet {
    pub sample: SpatialSample,
    pub value_names: Vec<String>,
}

pub fn read_dataset(path: &Path) -> Result<DataSet, CliError> {
    let file = File::open(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_dataset(file, path)
}

pub fn parse_dataset<R: io::Read>(reader: R, path: &Path) -> Result<DataSet, CliError> {
    let parse_error = |line: u64, message: String| CliError::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| parse_error(1, e.to_string()))?
        .clone();
    let names: Vec<&str> = headers.iter().collect();

    let mut coord_cols = Vec::new();
    for name in COORDINATE_NAMES {
        match names.iter().position(|h| *h == name) {
            Some(c) => coord_cols.push(c),
            None => break,
        }
    }
    if coord_cols.is_empty() {
        return Err(parse_error(1, "header needs a coordinate column named x".into()));
    }
    for name in &COORDINATE_NAMES[coord_cols.len()..] {
        if names.contains(name) {
            return Err(parse_error(
                1,
                format!("coordinate column {name} present without its predecessors"),
            ));
        }
    }
    let value_cols: Vec<usize> = (0..names.len()).filter(|c| !coord_cols.contains(c)).collect();
    if value_cols.is_empty() {
        return Err(parse_error(1, "no value columns besides the coordinates".into()));
    }

    let dim = coord_cols.len();
    let mut coords = Vec::new();
    let mut values = Vec::new();
    for (row, record) in rdr.records().enumerate() {
        let line = row as u64 + 2;
        let record = record.map_err(|e| parse_error(line, e.to_string()))?;
        if record.len() != names.len() {
            return Err(parse_error(
                line,
                format!("expected {} fields, found {}", names.len(), record.len()),
            ));
        }
        let field = |c: usize| -> Result<f64, CliError> {
            let raw = &record[c];
            raw.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| parse_error(line, format!("column {}: '{raw}' is not a finite number", names[c])))
        };
        for &c in &coord_cols {
            coords.push(field(c)?);
        }
        for &c in &value_cols {
            values.push(field(c)?);
        }
    }
    let n = coords.len() / dim;
    let locations = LocationSet::new(coords, dim)?;
    let values = DMatrix::from_row_slice(n, value_cols.len(), &values);
    Ok(DataSet {
        sample: SpatialSample::new(locations, values)?,
        value_names: value_cols.iter().map(|&c| names[c].to_string()).collect(),
    })
}

pub fn coordinate_names(dim: usize) -> &'static [&'static str] {
    &COORDINATE_NAMES[..dim]
}

/// Opens `path`, or stdout when `None`.
pub fn output(path: Option<&Path>) -> Result<Box<dyn Write>, CliError> {
    match path {
        Some(p) => File::create(p)
            .map(|f| Box::new(io::BufWriter::new(f)) as Box<dyn Write>)
            .map_err(|source| CliError::Io {
                path: p.to_path_buf(),
                source,
            }),
        None => Ok(Box::new(io::stdout().lock())),
    }
}

/// Writes locations followed by named value columns.
pub fn write_table(
    path: Option<&Path>,
    locations: &LocationSet,
    names: &[String],
    values: &DMatrix<f64>,
) -> Result<(), CliError> {
    let target = path.map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("<stdout>"));
    let mut w = csv::Writer::from_writer(output(path)?);
    let header: Vec<String> = coordinate_names(locations.dim())
        .iter()
        .map(|s| s.to_string())
        .chain(names.iter().cloned())
        .collect();
    let csv_error = |e: csv::Error| CliError::Io {
        path: target.clone(),
        source: io::Error::other(e),
    };
    w.write_record(&header).map_err(csv_error)?;
    for (i, point) in locations.points().enumerate() {
        let row: Vec<String> = point
            .iter()
            .copied()
            .chain(values.row(i).iter().copied())
            .map(|v| v.to_string())
            .collect();
        w.write_record(&row).map_err(csv_error)?;
    }
    w.flush().map_err(|source| CliError::Io {
        path: target.clone(),
        source,
    })
}

/// Writes arbitrary CSV rows.
pub fn write_rows(path: Option<&Path>, header: &[String], rows: &[Vec<String>]) -> Result<(), CliError> {
    let target = path.map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("<stdout>"));
    let mut w = csv::Writer::from_writer(output(path)?);
    let csv_error = |e: csv::Error| CliError::Io {
        path: target.clone(),
        source: io::Error::other(e),
    };
    w.write_record(header).map_err(csv_error)?;
    for row in rows {
        w.write_record(row).map_err(csv_error)?;
    }
    w.flush().map_err(|source| CliError::Io {
        path: target.clone(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<DataSet, CliError> {
        parse_dataset(text.as_bytes(), Path::new("mem.csv"))
    }

    #[test]
    fn reads_two_dimensional_data() {
        let ds = parse("x,y,a,b\n0,0,1,2\n1,0,3,4\n0,1,5,6\n").unwrap();
        assert_eq!(ds.sample.locations.dim(), 2);
        assert_eq!(ds.value_names, vec!["a", "b"]);
        assert_eq!(ds.sample.values[(2, 1)], 6.0);
    }

    #[test]
    fn reports_line_numbers() {
        match parse("x,y,a\n0,0,1\n1,0,oops\n") {
            Err(CliError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(parse("y,a\n0,1\n"), Err(CliError::Parse { line: 1, .. })));
        assert!(matches!(parse("x,y\n0,1\n"), Err(CliError::Parse { line: 1, .. })));
        assert!(matches!(parse("x,a\n0,1\n0,2\n"), Err(CliError::Core { .. })));
    }
}

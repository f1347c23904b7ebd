//! CSV and JSON helpers shared by the serializable result types.
//!
//! Every CSV starts with `# key=value` metadata lines. Floats are written
//! with Rust's shortest round-trip formatting so identical inputs produce
//! byte-identical files.

use std::fs::File;
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use ndarray::Array2;
use serde::Serialize;

use crate::error::{Error, Result};

pub fn fmt_f64(x: f64) -> String {
    format!("{x:?}")
}

pub fn join_floats(xs: &[f64]) -> String {
    xs.iter().map(|x| fmt_f64(*x)).collect::<Vec<_>>().join(";")
}

pub fn parse_f64(s: &str) -> Result<f64> {
    let t = s.trim();
    match t {
        "inf" => Ok(f64::INFINITY),
        "-inf" => Ok(f64::NEG_INFINITY),
        _ => t
            .parse()
            .map_err(|_| Error::InvalidArgument(format!("not a number: '{t}'"))),
    }
}

pub fn parse_floats(s: &str) -> Result<Vec<f64>> {
    s.split(';').map(parse_f64).collect()
}

/// Writes metadata lines and returns a CSV writer positioned after them.
pub fn csv_writer<W: Write>(mut out: W, meta: &[(String, String)]) -> Result<csv::Writer<W>> {
    for (k, v) in meta {
        writeln!(out, "# {k}={v}")?;
    }
    Ok(csv::WriterBuilder::new().has_headers(false).from_writer(out))
}

/// Consumes leading `# key=value` lines.
pub fn read_metadata<R: BufRead>(r: &mut R) -> Result<Vec<(String, String)>> {
    let mut meta = Vec::new();
    loop {
        let buf = r.fill_buf()?;
        if buf.first() != Some(&b'#') {
            break;
        }
        let mut line = String::new();
        r.read_line(&mut line)?;
        let body = line.trim_start_matches('#').trim();
        if let Some((k, v)) = body.split_once('=') {
            meta.push((k.trim().to_string(), v.trim().to_string()));
        }
    }
    Ok(meta)
}

/// Dense matrix as CSV rows, preceded by `#` metadata (no column header).
pub fn write_matrix_csv<W: Write>(
    out: W,
    meta: &[(String, String)],
    matrix: &Array2<f64>,
) -> Result<()> {
    let mut meta = meta.to_vec();
    meta.push(("rows".into(), matrix.nrows().to_string()));
    meta.push(("cols".into(), matrix.ncols().to_string()));
    let mut w = csv_writer(out, &meta)?;
    for row in matrix.rows() {
        w.write_record(row.iter().map(|x| fmt_f64(*x)))?;
    }
    w.flush()?;
    Ok(())
}

/// `# key: value` header lines followed by the matrix.
pub type MatrixCsv = (Vec<(String, String)>, Array2<f64>);

pub fn read_matrix_csv<R: std::io::Read>(input: R) -> Result<MatrixCsv> {
    let mut reader = std::io::BufReader::new(input);
    let meta = read_metadata(&mut reader)?;
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .comment(Some(b'#'))
        .from_reader(reader);
    let mut data = Vec::new();
    let mut cols = 0;
    let mut rows = 0;
    for rec in rdr.records() {
        let rec = rec?;
        cols = rec.len();
        for f in rec.iter() {
            data.push(parse_f64(f)?);
        }
        rows += 1;
    }
    let m = Array2::from_shape_vec((rows, cols), data)
        .map_err(|e| Error::InvalidArgument(format!("ragged matrix csv: {e}")))?;
    Ok((meta, m))
}

pub fn create_file(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut f = create_file(path)?;
    serde_json::to_writer_pretty(&mut f, value)?;
    writeln!(f)?;
    f.flush()?;
    Ok(())
}

/// Rows of `(label columns..., values...)` with a header, behind `#` metadata.
pub fn write_table_csv<W: Write>(
    out: W,
    meta: &[(String, String)],
    header: &[&str],
    rows: impl IntoIterator<Item = Vec<f64>>,
) -> Result<()> {
    let mut w = csv_writer(out, meta)?;
    w.write_record(header)?;
    for row in rows {
        w.write_record(row.iter().map(|x| fmt_f64(*x)))?;
    }
    w.flush()?;
    Ok(())
}

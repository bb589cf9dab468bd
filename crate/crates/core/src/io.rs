//! File formats: float matrix CSV, typed readers for every input kind,
//! PGM heatmaps, PR-curve CSV, and JSON reports.
//!
//! Matrix CSV is the shared interchange format: one line per row, values
//! separated by commas, `\n` line endings, floats printed in Rust's
//! shortest round-trip decimal form. Writing a matrix and reading it back
//! reproduces every value bit for bit.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::eval::{GroundTruthMatrix, PrPoint};
use crate::pipeline::{DescriptorSet, PoseTrack};
use crate::types::{IntraKind, IntraSetSimilarities, ProblemSpec, SimilarityMatrix};

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io { path: path.display().to_string(), source }
}

/// Writes a matrix as CSV.
pub fn write_matrix_csv(path: &Path, values: ArrayView2<'_, f64>) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| io_err(path, e))?;
    let mut out = BufWriter::new(file);
    let mut line = String::new();
    for row in values.rows() {
        line.clear();
        for (j, v) in row.iter().enumerate() {
            if j > 0 {
                line.push(',');
            }
            write!(line, "{v}").expect("formatting into a string cannot fail");
        }
        line.push('\n');
        out.write_all(line.as_bytes()).map_err(|e| io_err(path, e))?;
    }
    out.flush().map_err(|e| io_err(path, e))
}

/// Reads a CSV of floats into raw rows, leaving shape and range checks to
/// the typed constructors. Blank lines are skipped and `\r\n` endings are
/// accepted.
pub fn read_matrix_csv(path: &Path) -> Result<Vec<Vec<f64>>> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    parse_matrix(&text, &path.display().to_string())
}

fn parse_matrix(text: &str, origin: &str) -> Result<Vec<Vec<f64>>> {
    let mut rows = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let mut row = Vec::new();
        for (col, field) in line.split(',').enumerate() {
            let value: f64 = field.trim().parse().map_err(|_| Error::Parse {
                context: format!("{origin}:{}:{}", lineno + 1, col + 1),
                reason: format!("cannot parse {field:?} as a number"),
            })?;
            row.push(value);
        }
        rows.push(row);
    }
    Ok(rows)
}

fn rows_to_array(rows: &[Vec<f64>]) -> Result<Array2<f64>> {
    if rows.is_empty() || rows[0].is_empty() {
        return Err(Error::EmptyMatrix);
    }
    let cols = rows[0].len();
    for (i, row) in rows.iter().enumerate() {
        if row.len() != cols {
            return Err(Error::RaggedRows { row: i, got: row.len(), expected: cols });
        }
    }
    let mut out = Array2::zeros((rows.len(), cols));
    for (i, row) in rows.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            out[(i, j)] = v;
        }
    }
    Ok(out)
}

pub fn read_similarity_csv(path: &Path) -> Result<SimilarityMatrix> {
    SimilarityMatrix::from_rows(&read_matrix_csv(path)?)
}

pub fn read_intra_csv(path: &Path, kind: IntraKind) -> Result<IntraSetSimilarities> {
    IntraSetSimilarities::from_matrix(rows_to_array(&read_matrix_csv(path)?)?, kind)
}

pub fn read_descriptors_csv(path: &Path) -> Result<DescriptorSet> {
    DescriptorSet::from_rows(&read_matrix_csv(path)?)
}

pub fn read_poses_csv(path: &Path) -> Result<PoseTrack> {
    PoseTrack::from_rows(&read_matrix_csv(path)?)
}

pub fn read_ground_truth_csv(path: &Path) -> Result<GroundTruthMatrix> {
    GroundTruthMatrix::from_rows(&read_matrix_csv(path)?)
}

/// Reads and validates a problem configuration from a JSON file.
pub fn read_spec_json(path: &Path) -> Result<ProblemSpec> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    ProblemSpec::from_json(&text)
}

/// Writes a similarity matrix as a binary grayscale PGM (`P5`, maxval
/// 255), pixel value `round(255 * s)`, one pixel per cell in row-major
/// order.
pub fn write_heatmap_pgm(path: &Path, matrix: &SimilarityMatrix) -> Result<()> {
    let (rows, cols) = (matrix.rows(), matrix.cols());
    let file = fs::File::create(path).map_err(|e| io_err(path, e))?;
    let mut out = BufWriter::new(file);
    write!(out, "P5\n{cols} {rows}\n255\n").map_err(|e| io_err(path, e))?;
    let mut pixels = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        for j in 0..cols {
            pixels.push((255.0 * matrix.values()[(i, j)]).round() as u8);
        }
    }
    out.write_all(&pixels).map_err(|e| io_err(path, e))?;
    out.flush().map_err(|e| io_err(path, e))
}

/// Writes a precision-recall curve as CSV with a `recall,precision`
/// header line.
pub fn write_pr_curve_csv(path: &Path, points: &[PrPoint]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| io_err(path, e))?;
    let mut out = BufWriter::new(file);
    out.write_all(b"recall,precision\n").map_err(|e| io_err(path, e))?;
    for p in points {
        writeln!(out, "{},{}", p.recall, p.precision).map_err(|e| io_err(path, e))?;
    }
    out.flush().map_err(|e| io_err(path, e))
}

/// Writes any serializable report as pretty-printed JSON with a trailing
/// newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| io_err(path, e))
}

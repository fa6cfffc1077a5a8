//! Grid snapshot files.
//!
//! A snapshot is an ASCII header followed by raw little-endian `f64` data:
//!
//! ```text
//! EULERHEAT-SNAPSHOT 1
//! dim 2
//! n 64
//! t 0.01
//! scenario 3f2a...
//! fields rho B1 B2 P1 P2
//! encoding f64-le
//! end
//! <data>
//! ```
//!
//! Each header line ends with `\n`. The data holds one block per listed
//! field, in order; each block has `n^dim` values in row-major cell order
//! (last axis fastest). `t` is written with Rust's shortest round-trip
//! formatting, so reading a file back reproduces the time bit for bit.

use std::io::{self, BufRead, Write};

use thiserror::Error;

use crate::fields::{FieldsError, GridFields, PeriodicGrid};

const MAGIC: &str = "EULERHEAT-SNAPSHOT 1";

#[derive(Debug, Error)]
pub enum SnapshotError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("malformed header: {0}")]
    Header(String),
    #[error(transparent)]
    Fields(#[from] FieldsError),
}

/// A snapshot together with the scenario hash it was produced under.
#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot {
    pub scenario: String,
    pub fields: GridFields,
}

fn field_names(dim: usize) -> Vec<String> {
    let mut names = vec!["rho".to_string()];
    names.extend((1..=dim).map(|k| format!("B{k}")));
    names.extend((1..=dim).map(|k| format!("P{k}")));
    names
}

pub fn write_snapshot<W: Write>(out: &mut W, fields: &GridFields, scenario: &str) -> Result<(), SnapshotError> {
    let dim = fields.dim();
    writeln!(out, "{MAGIC}")?;
    writeln!(out, "dim {dim}")?;
    writeln!(out, "n {}", fields.grid.n())?;
    writeln!(out, "t {:?}", fields.t)?;
    writeln!(out, "scenario {scenario}")?;
    writeln!(out, "fields {}", field_names(dim).join(" "))?;
    writeln!(out, "encoding f64-le")?;
    writeln!(out, "end")?;
    let blocks = std::iter::once(&fields.rho).chain(&fields.b).chain(&fields.p);
    let mut buf = Vec::with_capacity(8 * fields.grid.cells());
    for block in blocks {
        buf.clear();
        for v in block {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        out.write_all(&buf)?;
    }
    Ok(())
}

fn header_line<R: BufRead>(input: &mut R, key: &str) -> Result<String, SnapshotError> {
    let mut line = String::new();
    input.read_line(&mut line)?;
    let line = line.trim_end_matches('\n');
    if key.is_empty() {
        return Ok(line.to_string());
    }
    line.strip_prefix(key)
        .and_then(|rest| rest.strip_prefix(' ').or(if rest.is_empty() { Some("") } else { None }))
        .map(str::to_string)
        .ok_or_else(|| SnapshotError::Header(format!("expected `{key}`, found `{line}`")))
}

fn parse<T: std::str::FromStr>(s: &str, what: &str) -> Result<T, SnapshotError> {
    s.parse()
        .map_err(|_| SnapshotError::Header(format!("bad {what}: `{s}`")))
}

pub fn read_snapshot<R: BufRead>(input: &mut R) -> Result<Snapshot, SnapshotError> {
    let magic = header_line(input, "")?;
    if magic != MAGIC {
        return Err(SnapshotError::Header(format!("bad magic `{magic}`")));
    }
    let dim: usize = parse(&header_line(input, "dim")?, "dim")?;
    let n: usize = parse(&header_line(input, "n")?, "n")?;
    let t: f64 = parse(&header_line(input, "t")?, "t")?;
    let scenario = header_line(input, "scenario")?;
    let names = header_line(input, "fields")?;
    let grid = PeriodicGrid::new(dim, n)?;
    if names.split(' ').collect::<Vec<_>>() != field_names(dim) {
        return Err(SnapshotError::Header(format!("unexpected field list `{names}`")));
    }
    let encoding = header_line(input, "encoding")?;
    if encoding != "f64-le" {
        return Err(SnapshotError::Header(format!("unsupported encoding `{encoding}`")));
    }
    header_line(input, "end")?;
    let cells = grid.cells();
    let mut raw = vec![0u8; 8 * cells];
    let mut read_block = |input: &mut R| -> Result<Vec<f64>, SnapshotError> {
        input.read_exact(&mut raw)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect())
    };
    let mut fields = GridFields::zeros(grid, t);
    fields.rho = read_block(input)?;
    for k in 0..dim {
        fields.b[k] = read_block(input)?;
    }
    for k in 0..dim {
        fields.p[k] = read_block(input)?;
    }
    Ok(Snapshot { scenario, fields })
}

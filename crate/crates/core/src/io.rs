//! Matrix Market (coordinate, real, symmetric) and plain vector files.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::graph::SparseSymmetricSystem;

/// Formats a float with 17 significant digits.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// Upper-triangle triplets `(i, j, v)`, zero based, from a symmetric
/// coordinate file. Entries from either triangle are accepted.
pub fn read_matrix_market<R: Read>(reader: R) -> Result<(usize, Vec<(usize, usize, f64)>)> {
    let reader = BufReader::new(reader);
    let mut lines = reader.lines().enumerate();

    let (_, header) = lines
        .next()
        .ok_or(Error::Parse { line: 1, message: "empty file".into() })?;
    let header = header?;
    let fields: Vec<String> = header.split_whitespace().map(str::to_ascii_lowercase).collect();
    if fields.len() != 5 || fields[0] != "%%matrixmarket" || fields[1] != "matrix" {
        return Err(Error::Parse {
            line: 1,
            message: "expected '%%MatrixMarket matrix coordinate real symmetric'".into(),
        });
    }
    if fields[2] != "coordinate" {
        return Err(Error::Parse { line: 1, message: "only coordinate format is supported".into() });
    }
    if fields[3] != "real" && fields[3] != "integer" {
        return Err(Error::Parse { line: 1, message: format!("unsupported field '{}'", fields[3]) });
    }
    if fields[4] != "symmetric" {
        return Err(Error::Parse { line: 1, message: format!("unsupported symmetry '{}'", fields[4]) });
    }

    let mut size: Option<(usize, usize, usize)> = None;
    let mut entries = Vec::new();
    for (idx, line) in lines {
        let line = line?;
        let lineno = idx + 1;
        let t = line.trim();
        if t.is_empty() || t.starts_with('%') {
            continue;
        }
        let parts: Vec<&str> = t.split_whitespace().collect();
        let bad = |message: String| Error::Parse { line: lineno, message };
        match size {
            None => {
                if parts.len() != 3 {
                    return Err(bad("size line needs rows, cols, nnz".into()));
                }
                let p: Vec<usize> = parts
                    .iter()
                    .map(|s| s.parse::<usize>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|e| bad(format!("bad size line: {e}")))?;
                if p[0] != p[1] {
                    return Err(bad(format!("matrix is {}x{}, not square", p[0], p[1])));
                }
                size = Some((p[0], p[1], p[2]));
            }
            Some((n, _, _)) => {
                if parts.len() != 3 {
                    return Err(bad("entry line needs row, col, value".into()));
                }
                let i: usize = parts[0].parse().map_err(|e| bad(format!("bad row index: {e}")))?;
                let j: usize = parts[1].parse().map_err(|e| bad(format!("bad column index: {e}")))?;
                let v: f64 = parts[2].parse().map_err(|e| bad(format!("bad value: {e}")))?;
                if i == 0 || j == 0 || i > n || j > n {
                    return Err(bad(format!("index ({i}, {j}) out of range 1..={n}")));
                }
                entries.push(((i - 1).min(j - 1), (i - 1).max(j - 1), v));
            }
        }
    }
    let (n, _, nnz) = size.ok_or(Error::Parse { line: 0, message: "missing size line".into() })?;
    if entries.len() != nnz {
        return Err(Error::Parse {
            line: 0,
            message: format!("header announces {nnz} entries, found {}", entries.len()),
        });
    }
    Ok((n, entries))
}

/// Writes upper-triangle triplets as a symmetric coordinate file (stored in
/// the lower triangle, as the format prescribes).
pub fn write_matrix_market<W: Write>(
    mut w: W,
    n: usize,
    entries: &[(usize, usize, f64)],
) -> Result<()> {
    writeln!(w, "%%MatrixMarket matrix coordinate real symmetric")?;
    writeln!(w, "{n} {n} {}", entries.len())?;
    for &(i, j, v) in entries {
        let (r, c) = (i.max(j), i.min(j));
        writeln!(w, "{} {} {}", r + 1, c + 1, fmt_f64(v))?;
    }
    Ok(())
}

pub fn read_vector<R: Read>(reader: R) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(reader).lines().enumerate() {
        let line = line?;
        let t = line.trim();
        if t.is_empty() || t.starts_with('%') || t.starts_with('#') {
            continue;
        }
        out.push(t.parse().map_err(|e| Error::Parse {
            line: idx + 1,
            message: format!("bad value '{t}': {e}"),
        })?);
    }
    Ok(out)
}

pub fn write_vector<W: Write>(mut w: W, v: &[f64]) -> Result<()> {
    for x in v {
        writeln!(w, "{}", fmt_f64(*x))?;
    }
    Ok(())
}

pub fn load_system(matrix: &Path, rhs: &Path) -> Result<SparseSymmetricSystem> {
    let (n, entries) = read_matrix_market(fs::File::open(matrix)?)?;
    let b = read_vector(fs::File::open(rhs)?)?;
    SparseSymmetricSystem::new(n, entries, b)
}

pub fn save_system(sys: &SparseSymmetricSystem, matrix: &Path, rhs: &Path) -> Result<()> {
    let mut m = Vec::new();
    write_matrix_market(&mut m, sys.dim(), sys.entries())?;
    fs::write(matrix, m)?;
    let mut r = Vec::new();
    write_vector(&mut r, sys.rhs())?;
    fs::write(rhs, r)?;
    Ok(())
}

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SetnError};
use crate::evaluator::EmbeddingMatrix;

pub const BINARY_MAGIC: &[u8; 4] = b"SETE";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExportFormat {
    Tsv,
    Binary,
}

/// Writes `E` as TSV (`id\tdim=<d>` header, 9 significant digits) or as
/// binary (`SETE`, `N` and `d` as u64 LE, f32 LE row-major, no ids).
pub fn export_embeddings(e: &EmbeddingMatrix, path: &Path, format: ExportFormat) -> Result<()> {
    if e.is_empty() {
        return Err(SetnError::Data("no embeddings to export".into()));
    }
    let bytes = match format {
        ExportFormat::Tsv => {
            let mut out = format!("id\tdim={}\n", e.dim());
            for (i, id) in e.ids().iter().enumerate() {
                out.push_str(id);
                for v in e.row(i) {
                    out.push_str(&format!("\t{v:.8e}"));
                }
                out.push('\n');
            }
            out.into_bytes()
        }
        ExportFormat::Binary => {
            let mut out = Vec::with_capacity(20 + 4 * e.len() * e.dim());
            out.extend_from_slice(BINARY_MAGIC);
            out.extend_from_slice(&(e.len() as u64).to_le_bytes());
            out.extend_from_slice(&(e.dim() as u64).to_le_bytes());
            for i in 0..e.len() {
                for &v in e.row(i) {
                    out.extend_from_slice(&(v as f32).to_le_bytes());
                }
            }
            out
        }
    };
    fs::write(path, bytes).map_err(|e| SetnError::io(path, e))
}

fn parse_error(path: &Path, line: usize, message: impl Into<String>) -> SetnError {
    SetnError::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

pub fn import_tsv(path: &Path) -> Result<EmbeddingMatrix> {
    let text = fs::read_to_string(path).map_err(|e| SetnError::io(path, e))?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| parse_error(path, 1, "empty file"))?;
    let dim: usize = header
        .strip_prefix("id\tdim=")
        .and_then(|d| d.parse().ok())
        .ok_or_else(|| parse_error(path, 1, format!("bad header {header:?}")))?;
    let mut ids = Vec::new();
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let line_no = i + 2;
        let mut fields = line.split('\t');
        let id = fields.next().unwrap_or_default().to_string();
        let row = fields
            .map(|f| f.parse::<f64>().map_err(|e| parse_error(path, line_no, e.to_string())))
            .collect::<Result<Vec<_>>>()?;
        if row.len() != dim {
            return Err(parse_error(path, line_no, format!("{} values, header says {dim}", row.len())));
        }
        ids.push(id);
        rows.push(row);
    }
    EmbeddingMatrix::new(ids, rows)
}

/// Reads a binary export back as `N` rows of `d` values.
pub fn import_binary(path: &Path) -> Result<Vec<Vec<f32>>> {
    let bytes = fs::read(path).map_err(|e| SetnError::io(path, e))?;
    let bad = |m: &str| SetnError::Data(format!("{}: {m}", path.display()));
    if bytes.len() < 20 || &bytes[..4] != BINARY_MAGIC {
        return Err(bad("not a SETE embedding file"));
    }
    let word = |at: usize| u64::from_le_bytes(bytes[at..at + 8].try_into().expect("8 bytes"));
    let (n, d) = (word(4) as usize, word(12) as usize);
    let body = &bytes[20..];
    if n.checked_mul(d).and_then(|x| x.checked_mul(4)) != Some(body.len()) {
        return Err(bad("length does not match header"));
    }
    Ok(body
        .chunks_exact(4 * d.max(1))
        .take(n)
        .map(|row| {
            row.chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect()
        })
        .collect())
}

//! Datasets, file formats and synthetic data.

mod config;
mod emb1;
mod synth;

pub use config::{parse_train_config, read_train_config};
pub use emb1::{decode_emb1, encode_emb1, load_emb1, load_heads, save_emb1, save_heads};
pub use synth::{cluster_sizes, synth_generate, SynthConfig};

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::DenseMatrix;

/// Embeddings with optional ground truth and stored augmented views.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingDataset {
    pub embeddings: DenseMatrix,
    pub labels: Option<Vec<usize>>,
    pub views: Option<(DenseMatrix, DenseMatrix)>,
    pub name: String,
}

impl EmbeddingDataset {
    pub fn new(
        embeddings: DenseMatrix,
        labels: Option<Vec<usize>>,
        views: Option<(DenseMatrix, DenseMatrix)>,
        name: impl Into<String>,
    ) -> Result<Self> {
        let n = embeddings.rows();
        if let Some(l) = &labels {
            if l.len() != n {
                return Err(Error::Shape(format!("{} labels for {n} embeddings", l.len())));
            }
        }
        if let Some((a, b)) = &views {
            if a.shape() != embeddings.shape() || b.shape() != embeddings.shape() {
                return Err(Error::Shape("augmented views must match the embeddings".into()));
            }
        }
        Ok(Self {
            embeddings,
            labels,
            views,
            name: name.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.embeddings.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.embeddings.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.embeddings.cols()
    }
}

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// Writes to a sibling temporary file and renames it over `path`.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::InvalidArgument(format!("{} is not a file path", path.display())))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(file_name);
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp = path.with_file_name(tmp_name);
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(Error::io(path, e));
    }
    Ok(())
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// One integer per line.
pub fn write_labels(path: &Path, labels: &[usize]) -> Result<()> {
    let mut text = String::with_capacity(labels.len() * 3);
    for l in labels {
        text.push_str(&l.to_string());
        text.push('\n');
    }
    atomic_write(path, text.as_bytes())
}

pub fn parse_labels(text: &str) -> Result<Vec<usize>> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .enumerate()
        .map(|(i, l)| {
            l.parse().map_err(|_| Error::Parse {
                what: "label file",
                detail: format!("line {}: {l:?} is not a nonnegative integer", i + 1),
            })
        })
        .collect()
}

pub fn read_labels(path: &Path) -> Result<Vec<usize>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_labels(&text)
}

/// Reads a dense matrix from CSV-like text (comma or whitespace separated, `#` comments).
pub fn parse_matrix(text: &str) -> Result<DenseMatrix> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let row = line
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|t| !t.is_empty())
            .map(|t| {
                t.parse::<f64>().map_err(|_| Error::Parse {
                    what: "matrix",
                    detail: format!("line {}: {t:?} is not a number", i + 1),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Empty("matrix file"));
    }
    let width = rows[0].len();
    if rows.iter().any(|r| r.len() != width) {
        return Err(Error::Parse {
            what: "matrix",
            detail: "rows have different lengths".into(),
        });
    }
    DenseMatrix::from_rows(&rows)
}

pub fn format_matrix(m: &DenseMatrix) -> String {
    let mut out = String::new();
    for row in m.row_iter() {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

//! EMB1 container.
//!
//! ```text
//! "EMB1" | u32 version = 1 | u32 N | u32 D | u32 flags
//! N*D f32 embeddings, row-major
//! [flags & 1] N i32 labels
//! [flags & 2] N*D f32 view 1, N*D f32 view 2
//! u64 FNV-1a of every preceding byte
//! ```
//!
//! All integers and floats are little-endian.

use std::path::Path;

use super::{atomic_write, fnv1a64, read_file, EmbeddingDataset};
use crate::error::{Error, Result};
use crate::heads::{HeadParams, TENSOR_NAMES};
use crate::numerics::DenseMatrix;

const MAGIC: &[u8; 4] = b"EMB1";
const VERSION: u32 = 1;
const HEADER_LEN: usize = 20;
const CHECKSUM_LEN: usize = 8;
const FLAG_LABELS: u32 = 1;
const FLAG_VIEWS: u32 = 2;

const HEADS_MAGIC: &[u8; 4] = b"EMBH";

fn push_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn push_f32s(out: &mut Vec<u8>, values: &[f64]) {
    for &v in values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::InvalidArgument(format!("{what} {v} does not fit in u32")))
}

fn seal(mut out: Vec<u8>) -> Vec<u8> {
    let sum = fnv1a64(&out);
    out.extend_from_slice(&sum.to_le_bytes());
    out
}

pub fn encode_emb1(dataset: &EmbeddingDataset) -> Result<Vec<u8>> {
    let (n, d) = dataset.embeddings.shape();
    let mut flags = 0;
    if dataset.labels.is_some() {
        flags |= FLAG_LABELS;
    }
    if dataset.views.is_some() {
        flags |= FLAG_VIEWS;
    }
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * n * d * 3 + 4 * n + CHECKSUM_LEN);
    out.extend_from_slice(MAGIC);
    push_u32(&mut out, VERSION);
    push_u32(&mut out, to_u32(n, "row count")?);
    push_u32(&mut out, to_u32(d, "dimension")?);
    push_u32(&mut out, flags);
    push_f32s(&mut out, dataset.embeddings.as_slice());
    if let Some(labels) = &dataset.labels {
        for &l in labels {
            let l = i32::try_from(l)
                .map_err(|_| Error::InvalidArgument(format!("label {l} does not fit in i32")))?;
            out.extend_from_slice(&l.to_le_bytes());
        }
    }
    if let Some((v1, v2)) = &dataset.views {
        push_f32s(&mut out, v1.as_slice());
        push_f32s(&mut out, v2.as_slice());
    }
    Ok(seal(out))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, len: usize) -> &[u8] {
        let s = &self.bytes[self.pos..self.pos + len];
        self.pos += len;
        s
    }

    fn u32(&mut self) -> u32 {
        u32::from_le_bytes(self.take(4).try_into().expect("4 bytes"))
    }

    fn matrix(&mut self, rows: usize, cols: usize, what: &str) -> Result<DenseMatrix> {
        let data = self
            .take(4 * rows * cols)
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
            .collect();
        DenseMatrix::new(rows, cols, data).map_err(|_| Error::NonFinite(what.to_string()))
    }
}

/// Checks framing and checksum, returning the body without the checksum.
fn unseal<'a>(bytes: &'a [u8], magic: &[u8; 4]) -> Result<&'a [u8]> {
    if bytes.len() < 4 || &bytes[..4] != magic {
        return Err(if bytes.len() < 4 && magic.starts_with(bytes) {
            Error::Truncated {
                needed: HEADER_LEN + CHECKSUM_LEN,
                found: bytes.len(),
            }
        } else {
            Error::BadMagic
        });
    }
    if bytes.len() < HEADER_LEN + CHECKSUM_LEN {
        return Err(Error::Truncated {
            needed: HEADER_LEN + CHECKSUM_LEN,
            found: bytes.len(),
        });
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    Ok(bytes)
}

fn verify_checksum(bytes: &[u8], body_len: usize) -> Result<()> {
    let stored = u64::from_le_bytes(bytes[body_len..body_len + CHECKSUM_LEN].try_into().expect("8 bytes"));
    let computed = fnv1a64(&bytes[..body_len]);
    if stored != computed {
        return Err(Error::ChecksumMismatch { stored, computed });
    }
    Ok(())
}

pub fn decode_emb1(bytes: &[u8], name: &str) -> Result<EmbeddingDataset> {
    let bytes = unseal(bytes, MAGIC)?;
    let mut r = Reader { bytes, pos: 8 };
    let n = r.u32() as usize;
    let d = r.u32() as usize;
    let flags = r.u32();
    if flags & !(FLAG_LABELS | FLAG_VIEWS) != 0 {
        return Err(Error::Parse {
            what: "EMB1 header",
            detail: format!("unknown flag bits {flags:#x}"),
        });
    }
    // sizes come from untrusted input; compute them without overflow
    let block = 4 * n as u128 * d as u128;
    let mut body = HEADER_LEN as u128 + block;
    if flags & FLAG_LABELS != 0 {
        body += 4 * n as u128;
    }
    if flags & FLAG_VIEWS != 0 {
        body += 2 * block;
    }
    let needed = body + CHECKSUM_LEN as u128;
    if (bytes.len() as u128) < needed {
        return Err(Error::Truncated {
            needed: usize::try_from(needed).unwrap_or(usize::MAX),
            found: bytes.len(),
        });
    }
    let (body, needed) = (body as usize, needed as usize);
    if bytes.len() > needed {
        return Err(Error::Parse {
            what: "EMB1 container",
            detail: format!("{} trailing bytes", bytes.len() - needed),
        });
    }
    verify_checksum(bytes, body)?;

    let embeddings = r.matrix(n, d, "EMB1 embeddings")?;
    let labels = if flags & FLAG_LABELS != 0 {
        let raw = r.take(4 * n);
        let labels = raw
            .chunks_exact(4)
            .map(|c| {
                let v = i32::from_le_bytes(c.try_into().expect("4 bytes"));
                usize::try_from(v).map_err(|_| Error::Parse {
                    what: "EMB1 labels",
                    detail: format!("negative label {v}"),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Some(labels)
    } else {
        None
    };
    let views = if flags & FLAG_VIEWS != 0 {
        Some((r.matrix(n, d, "EMB1 view 1")?, r.matrix(n, d, "EMB1 view 2")?))
    } else {
        None
    };
    EmbeddingDataset::new(embeddings, labels, views, name)
}

pub fn save_emb1(dataset: &EmbeddingDataset, path: &Path) -> Result<()> {
    atomic_write(path, &encode_emb1(dataset)?)
}

/// Loads an EMB1 file; the dataset is named after the file stem.
pub fn load_emb1(path: &Path) -> Result<EmbeddingDataset> {
    let bytes = read_file(path)?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    decode_emb1(&bytes, &name)
}

/// Head checkpoint: EMB1-style framing with magic `EMBH`, then for each tensor
/// `u32 name_len | name | u32 rows | u32 cols | rows*cols f32`, sealed by FNV-1a.
pub fn save_heads(params: &HeadParams, path: &Path) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(HEADS_MAGIC);
    push_u32(&mut out, VERSION);
    push_u32(&mut out, to_u32(params.input_dim(), "input dimension")?);
    push_u32(&mut out, to_u32(params.classes(), "class count")?);
    push_u32(&mut out, to_u32(params.proj_dim(), "projection dimension")?);
    let shapes = tensor_shapes(params.input_dim(), params.classes(), params.proj_dim());
    for ((name, tensor), (rows, cols)) in TENSOR_NAMES.iter().zip(params.tensors()).zip(shapes) {
        push_u32(&mut out, name.len() as u32);
        out.extend_from_slice(name.as_bytes());
        push_u32(&mut out, rows as u32);
        push_u32(&mut out, cols as u32);
        push_f32s(&mut out, tensor);
    }
    atomic_write(path, &seal(out))
}

fn tensor_shapes(d1: usize, c: usize, d2: usize) -> [(usize, usize); 6] {
    [(d1, c), (1, c), (d1, d1), (1, d1), (d1, d2), (1, d2)]
}

pub fn load_heads(path: &Path) -> Result<HeadParams> {
    let bytes = read_file(path)?;
    let bytes = unseal(&bytes, HEADS_MAGIC)?;
    let body = bytes.len() - CHECKSUM_LEN;
    verify_checksum(bytes, body)?;
    let mut r = Reader { bytes: &bytes[..body], pos: 8 };
    let d1 = r.u32() as usize;
    let c = r.u32() as usize;
    let d2 = r.u32() as usize;
    let mut params = HeadParams::init(d1, c, d2, 0)?;
    let shapes = tensor_shapes(d1, c, d2);
    let malformed = |detail: String| Error::Parse {
        what: "head checkpoint",
        detail,
    };
    for ((name, dst), (rows, cols)) in TENSOR_NAMES.iter().zip(params.tensors_mut()).zip(shapes) {
        let remaining = body - r.pos;
        if remaining < 4 + name.len() + 8 + 4 * rows * cols {
            return Err(Error::Truncated {
                needed: r.pos + 4 + name.len() + 8 + 4 * rows * cols + CHECKSUM_LEN,
                found: bytes.len(),
            });
        }
        let len = r.u32() as usize;
        if len != name.len() || r.take(len) != name.as_bytes() {
            return Err(malformed(format!("expected tensor {name}")));
        }
        if (r.u32() as usize, r.u32() as usize) != (rows, cols) {
            return Err(malformed(format!("tensor {name} has the wrong shape")));
        }
        let m = r.matrix(rows, cols, name)?;
        dst.copy_from_slice(m.as_slice());
    }
    if r.pos != body {
        return Err(malformed(format!("{} trailing bytes", body - r.pos)));
    }
    Ok(params)
}

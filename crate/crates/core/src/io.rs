//! On-disk formats: the `GEMB` embedding matrix, TSV edges/labels/splits,
//! JSON reports and model checkpoints. Every writer goes through
//! [`write_atomic`].

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::model::{GeoModel, ModelConfig};

pub const EMBEDDING_MAGIC: &[u8; 4] = b"GEMB";
pub const EMBEDDING_VERSION: u32 = 1;
const EMBEDDING_HEADER: usize = 4 + 4 + 8 + 8;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"GCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Dense matrix as stored on disk.
pub type EmbeddingMatrix = Array2<f32>;

/// Keeps the error kind but names the file in the message.
pub(crate) fn at(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}

/// Prefixes parse errors with the file they came from.
fn in_file(path: &Path) -> impl FnOnce(Error) -> Error + '_ {
    move |e| {
        let name = path.display();
        match e {
            Error::Format(m) => Error::Format(format!("{name}: {m}")),
            Error::Corruption(m) => Error::Corruption(format!("{name}: {m}")),
            Error::Validation(m) => Error::Validation(format!("{name}: {m}")),
            other => other,
        }
    }
}

/// Writes to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(at(dir))?;
    }
    let name = path
        .file_name()
        .ok_or_else(|| Error::Validation(format!("'{}' is not a file path", path.display())))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(name);
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp = path.with_file_name(tmp_name);
    {
        let mut f = fs::File::create(&tmp).map_err(at(&tmp))?;
        f.write_all(bytes).map_err(at(&tmp))?;
        f.sync_all().map_err(at(&tmp))?;
    }
    fs::rename(&tmp, path)
        .inspect_err(|_| {
            let _ = fs::remove_file(&tmp);
        })
        .map_err(at(path))?;
    Ok(())
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    Ok(serde_json::from_str(&fs::read_to_string(path).map_err(at(path))?)?)
}

fn check_finite(m: &EmbeddingMatrix) -> Result<()> {
    for (i, row) in m.rows().into_iter().enumerate() {
        if let Some(j) = row.iter().position(|v| !v.is_finite()) {
            return Err(Error::Validation(format!("non-finite value in row {i}, column {j}")));
        }
    }
    Ok(())
}

pub fn encode_embeddings(m: &EmbeddingMatrix) -> Result<Vec<u8>> {
    check_finite(m)?;
    let (n, d) = m.dim();
    let mut out = Vec::with_capacity(EMBEDDING_HEADER + 4 * n * d);
    out.extend_from_slice(EMBEDDING_MAGIC);
    out.extend_from_slice(&EMBEDDING_VERSION.to_le_bytes());
    out.extend_from_slice(&(n as u64).to_le_bytes());
    out.extend_from_slice(&(d as u64).to_le_bytes());
    for v in m.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_embeddings(bytes: &[u8]) -> Result<EmbeddingMatrix> {
    if bytes.len() < 4 || &bytes[..4] != EMBEDDING_MAGIC {
        return Err(Error::Format("missing GEMB magic".into()));
    }
    if bytes.len() < EMBEDDING_HEADER {
        return Err(Error::Corruption(format!("header truncated at {} bytes", bytes.len())));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != EMBEDDING_VERSION {
        return Err(Error::Format(format!("unsupported embedding version {version}")));
    }
    let n = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let d = u64::from_le_bytes(bytes[16..24].try_into().expect("8 bytes"));
    let payload = &bytes[EMBEDDING_HEADER..];
    let expected = n
        .checked_mul(d)
        .and_then(|c| c.checked_mul(4))
        .ok_or_else(|| Error::Corruption(format!("declared shape {n}x{d} overflows")))?;
    if payload.len() as u64 != expected {
        return Err(Error::Corruption(format!(
            "declared {n}x{d} needs {expected} payload bytes, found {}",
            payload.len()
        )));
    }
    let values: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    let m = Array2::from_shape_vec((n as usize, d as usize), values).expect("payload length checked");
    check_finite(&m)?;
    Ok(m)
}

pub fn write_embeddings(m: &EmbeddingMatrix, path: &Path) -> Result<()> {
    write_atomic(path, &encode_embeddings(m)?)
}

pub fn read_embeddings(path: &Path) -> Result<EmbeddingMatrix> {
    decode_embeddings(&fs::read(path).map_err(at(path))?).map_err(in_file(path))
}

/// Narrows to the storage precision; values that overflow `f32` are
/// reported as non-finite.
pub fn to_storage(m: &Array2<f64>) -> EmbeddingMatrix {
    m.mapv(|v| v as f32)
}

pub fn to_compute(m: &EmbeddingMatrix) -> Array2<f64> {
    m.mapv(f64::from)
}

pub fn read_features(path: &Path) -> Result<Array2<f64>> {
    Ok(to_compute(&read_embeddings(path)?))
}

pub fn write_features(m: &Array2<f64>, path: &Path) -> Result<()> {
    write_embeddings(&to_storage(m), path)
}

/// Non-empty, non-comment lines with their 1-based line numbers.
fn data_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}

fn parse_id(field: &str, line: usize, what: &str) -> Result<usize> {
    field
        .parse()
        .map_err(|_| Error::Validation(format!("line {line}: {what} '{field}' is not a non-negative integer")))
}

fn two_fields(line: &str, no: usize) -> Result<(&str, &str)> {
    let mut it = line.split('\t');
    match (it.next(), it.next(), it.next()) {
        (Some(a), Some(b), None) => Ok((a.trim(), b.trim())),
        _ => Err(Error::Validation(format!(
            "line {no}: expected two tab-separated fields"
        ))),
    }
}

/// `u<TAB>v` per line; `#` starts a comment line.
pub fn parse_edges(text: &str) -> Result<Vec<(usize, usize)>> {
    data_lines(text)
        .map(|(no, l)| {
            let (a, b) = two_fields(l, no)?;
            Ok((parse_id(a, no, "node id")?, parse_id(b, no, "node id")?))
        })
        .collect()
}

pub fn read_edges(path: &Path) -> Result<Vec<(usize, usize)>> {
    parse_edges(&fs::read_to_string(path).map_err(at(path))?).map_err(in_file(path))
}

pub fn write_edges(edges: &[(usize, usize)], path: &Path) -> Result<()> {
    let mut out = String::from("# u\tv\n");
    for (u, v) in edges {
        out.push_str(&format!("{u}\t{v}\n"));
    }
    write_atomic(path, out.as_bytes())
}

/// `node_id<TAB>class_id`; every node `0..n` must appear exactly once.
pub fn parse_labels(text: &str, n: usize) -> Result<Vec<usize>> {
    let mut labels = vec![None; n];
    for (no, l) in data_lines(text) {
        let (a, b) = two_fields(l, no)?;
        let (id, class) = (parse_id(a, no, "node id")?, parse_id(b, no, "class id")?);
        let slot = labels
            .get_mut(id)
            .ok_or_else(|| Error::Validation(format!("line {no}: node {id} out of range for {n} nodes")))?;
        if slot.replace(class).is_some() {
            return Err(Error::Validation(format!("line {no}: node {id} labelled twice")));
        }
    }
    labels
        .into_iter()
        .enumerate()
        .map(|(i, l)| l.ok_or_else(|| Error::Validation(format!("node {i} has no label"))))
        .collect()
}

pub fn read_labels(path: &Path, n: usize) -> Result<Vec<usize>> {
    parse_labels(&fs::read_to_string(path).map_err(at(path))?, n).map_err(in_file(path))
}

pub fn write_labels(labels: &[usize], path: &Path) -> Result<()> {
    let mut out = String::from("# node_id\tclass_id\n");
    for (i, c) in labels.iter().enumerate() {
        out.push_str(&format!("{i}\t{c}\n"));
    }
    write_atomic(path, out.as_bytes())
}

/// One node id per line.
pub fn read_node_ids(path: &Path) -> Result<Vec<usize>> {
    data_lines(&fs::read_to_string(path).map_err(at(path))?)
        .map(|(no, l)| parse_id(l, no, "node id"))
        .collect::<Result<_>>()
        .map_err(in_file(path))
}

pub fn write_node_ids(ids: &[usize], path: &Path) -> Result<()> {
    let out: String = ids.iter().map(|i| format!("{i}\n")).collect();
    write_atomic(path, out.as_bytes())
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointHeader {
    config: ModelConfig,
    input_dim: usize,
    num_classes: Option<usize>,
    params: Vec<BlockHeader>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BlockHeader {
    name: String,
    rows: usize,
    cols: usize,
}

/// `GCKP`, version u32, header length u64, JSON header, then each
/// parameter as little-endian f64 in declaration order.
pub fn encode_checkpoint(model: &GeoModel) -> Result<Vec<u8>> {
    let header = CheckpointHeader {
        config: model.config.clone(),
        input_dim: model.input_dim,
        num_classes: model.num_classes,
        params: model
            .params()
            .iter()
            .map(|p| BlockHeader {
                name: p.name.clone(),
                rows: p.shape().0,
                cols: p.shape().1,
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for p in model.params() {
        for v in p.value.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<GeoModel> {
    if bytes.len() < 4 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::Format("missing GCKP magic".into()));
    }
    if bytes.len() < 16 {
        return Err(Error::Corruption("checkpoint header truncated".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let json = bytes
        .get(16..16usize.saturating_add(len))
        .ok_or_else(|| Error::Corruption("checkpoint header truncated".into()))?;
    let header: CheckpointHeader = serde_json::from_slice(json)?;
    let mut at = 16 + len;
    let mut values = Vec::with_capacity(header.params.len());
    for b in &header.params {
        let size = b
            .rows
            .checked_mul(b.cols)
            .and_then(|c| c.checked_mul(8))
            .ok_or_else(|| Error::Corruption(format!("parameter '{}' shape overflows", b.name)))?;
        let block = bytes
            .get(at..at.saturating_add(size))
            .ok_or_else(|| Error::Corruption(format!("parameter '{}' truncated", b.name)))?;
        let data: Vec<f64> = block
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        values.push(Tensor::from_shape_vec((b.rows, b.cols), data).expect("block length checked"));
        at += size;
    }
    if at != bytes.len() {
        return Err(Error::Corruption(format!(
            "{} trailing bytes after parameters",
            bytes.len() - at
        )));
    }
    GeoModel::from_parts(header.config, header.input_dim, header.num_classes, values)
}

pub fn save_checkpoint(model: &GeoModel, path: &Path) -> Result<()> {
    write_atomic(path, &encode_checkpoint(model)?)
}

pub fn load_checkpoint(path: &Path) -> Result<GeoModel> {
    decode_checkpoint(&fs::read(path).map_err(at(path))?).map_err(in_file(path))
}

/// Resolves `p` against `base` unless it is absolute.
pub fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

//! On-disk embedding tables: a binary f32 matrix plus a JSON sidecar.
//!
//! Layout: magic `KGFEMB01`, u32 version, u32 d_text, u32 node count, then
//! `node_count × d_text` little-endian f32 in row-major order.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::backend::Embedder;
use super::{EmbeddingTable, TextVariant};
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"KGFEMB01";
const VERSION: u32 = 1;

pub fn write_matrix(path: &Path, m: &Array2<f64>) -> Result<()> {
    let (n, d) = m.dim();
    let mut buf = Vec::with_capacity(20 + 4 * n * d);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(d as u32).to_le_bytes());
    buf.extend_from_slice(&(n as u32).to_le_bytes());
    for x in m.iter() {
        buf.extend_from_slice(&(*x as f32).to_le_bytes());
    }
    if let Some(p) = path.parent() {
        fs::create_dir_all(p).map_err(|e| Error::io(p, e))?;
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_matrix(path: &Path) -> Result<Array2<f64>> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: &str| Error::Checkpoint(format!("{}: {msg}", path.display()));
    if buf.len() < 20 || &buf[..8] != MAGIC {
        return Err(bad("not an embedding table"));
    }
    let word = |o: usize| u32::from_le_bytes(buf[o..o + 4].try_into().expect("4 bytes")) as usize;
    if word(8) != VERSION as usize {
        return Err(bad("unsupported version"));
    }
    let (d, n) = (word(12), word(16));
    if buf.len() != 20 + 4 * n * d {
        return Err(bad("truncated"));
    }
    let vals: Vec<f64> = buf[20..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    Array2::from_shape_vec((n, d), vals).map_err(|e| bad(&e.to_string()))
}

fn round_f32(m: &mut Array2<f64>) {
    m.mapv_inplace(|x| x as f32 as f64);
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct Sidecar {
    pub embedder: String,
    /// Relation id (or `inv:<id>` for inverse nodes) → row.
    pub rows: BTreeMap<String, usize>,
    /// Text that produced each row, for invalidation.
    #[serde(default)]
    pub texts: BTreeMap<String, String>,
}

fn sidecar_path(bin: &Path) -> PathBuf {
    bin.with_extension("json")
}

fn read_sidecar(bin: &Path) -> Result<Sidecar> {
    let p = sidecar_path(bin);
    let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
    Ok(serde_json::from_slice(&bytes)?)
}

fn write_sidecar(bin: &Path, s: &Sidecar) -> Result<()> {
    let p = sidecar_path(bin);
    fs::write(&p, serde_json::to_vec_pretty(s)?).map_err(|e| Error::io(&p, e))
}

pub fn write_table(dir: &Path, table: &EmbeddingTable, embedder: &str) -> Result<PathBuf> {
    let path = dir.join(format!("{}.emb", table.variant));
    write_matrix(&path, &table.data)?;
    let r = table.num_base_relations();
    let rows = (0..r)
        .map(|i| (i.to_string(), i))
        .chain((0..r).map(|i| (format!("inv:{i}"), i + r)))
        .collect();
    write_sidecar(&path, &Sidecar { embedder: embedder.into(), rows, texts: BTreeMap::new() })?;
    Ok(path)
}

pub fn read_table(dir: &Path, variant: TextVariant) -> Result<EmbeddingTable> {
    let path = dir.join(format!("{variant}.emb"));
    let data = read_matrix(&path)?;
    let side = read_sidecar(&path)?;
    let r = data.nrows() / 2;
    let mut ordered = Array2::zeros(data.dim());
    for i in 0..r {
        for (key, dst) in [(i.to_string(), i), (format!("inv:{i}"), i + r)] {
            let src = *side
                .rows
                .get(&key)
                .ok_or_else(|| Error::Checkpoint(format!("{}: sidecar lacks row {key}", path.display())))?;
            ordered.row_mut(dst).assign(&data.row(src));
        }
    }
    Ok(EmbeddingTable { variant, data: ordered })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct CacheStats {
    pub hits: usize,
    pub misses: usize,
}

/// Per-field text-embedding cache; only texts that changed are re-embedded.
pub struct EmbeddingCache {
    pub dir: PathBuf,
}

impl EmbeddingCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn field(&self, field: &str, embedder: &dyn Embedder, texts: &[String]) -> Result<(Array2<f64>, CacheStats)> {
        let path = self.dir.join(format!("source_{field}.emb"));
        let id = embedder.id();
        let previous = match (read_matrix(&path), read_sidecar(&path)) {
            (Ok(m), Ok(s)) if s.embedder == id => Some((m, s)),
            _ => None,
        };
        let mut stats = CacheStats::default();
        let mut rows: Vec<Option<Vec<f64>>> = vec![None; texts.len()];
        if let Some((m, s)) = &previous {
            for (i, t) in texts.iter().enumerate() {
                let key = i.to_string();
                if s.texts.get(&key) == Some(t) {
                    if let Some(&row) = s.rows.get(&key) {
                        if row < m.nrows() {
                            rows[i] = Some(m.row(row).to_vec());
                        }
                    }
                }
            }
        }
        let mut missing: Vec<String> = Vec::new();
        let mut seen = HashMap::new();
        for (i, t) in texts.iter().enumerate() {
            if rows[i].is_some() {
                stats.hits += 1;
            } else {
                stats.misses += 1;
                seen.entry(t.clone()).or_insert_with(|| {
                    missing.push(t.clone());
                    missing.len() - 1
                });
            }
        }
        if !missing.is_empty() {
            let fresh = embedder.embed(&missing)?;
            if fresh.len() != missing.len() {
                return Err(Error::Remote(format!("asked for {} embeddings, got {}", missing.len(), fresh.len())));
            }
            for (i, t) in texts.iter().enumerate() {
                if rows[i].is_none() {
                    rows[i] = Some(fresh[seen[t]].clone());
                }
            }
        }
        let d = rows.first().and_then(|r| r.as_ref()).map_or(0, Vec::len);
        if let Some(bad) = rows.iter().position(|r| r.as_ref().map_or(0, Vec::len) != d) {
            return Err(Error::Shape(format!("embedding for {:?} has a different dimension", texts[bad])));
        }
        let mut m = Array2::zeros((texts.len(), d));
        for (i, r) in rows.into_iter().enumerate() {
            m.row_mut(i).assign(&ndarray::ArrayView1::from(&r.expect("filled")[..]));
        }
        round_f32(&mut m);
        if stats.misses > 0 {
            write_matrix(&path, &m)?;
            let sidecar = Sidecar {
                embedder: id,
                rows: (0..texts.len()).map(|i| (i.to_string(), i)).collect(),
                texts: texts.iter().enumerate().map(|(i, t)| (i.to_string(), t.clone())).collect(),
            };
            write_sidecar(&path, &sidecar)?;
        }
        Ok((m, stats))
    }
}

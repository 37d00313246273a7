//! Exact flat cosine index over final-layer CLS vectors.
//!
//! File layout: `"CRFI" | version u32 | rows u64 | dim u32 |` then per row
//! `id len u32 | id bytes | dim f64`, all little-endian. Rows are stored
//! normalized in f64 so search scores are exact cosines of the source vectors.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::embedding::{
    read_exact, read_id, read_u32, read_u64, write_id, EmbeddingError, EmbeddingStore,
};
use crate::exec::{self, ExecMode};
use crate::model::{rank_scored, RankedDocument};

pub const INDEX_MAGIC: &[u8; 4] = b"CRFI";
pub const INDEX_VERSION: u32 = 1;
const MIN_NORM: f64 = 1e-12;

#[derive(Debug, thiserror::Error)]
pub enum IndexError {
    #[error("embedding store is empty")]
    EmptyStore,
    #[error("CLS vector of document {0} has zero norm")]
    ZeroVector(String),
    #[error("query has dimension {got}, index has {expected}")]
    DimMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Storage(#[from] EmbeddingError),
}

/// Row-aligned matrix of unit-norm CLS vectors and their document ids.
#[derive(Debug, Clone, PartialEq)]
pub struct FlatIndex {
    dim: usize,
    ids: Vec<String>,
    rows: Vec<f64>,
}

impl FlatIndex {
    /// One normalized final-layer CLS row per document, in store (id) order.
    pub fn build(store: &EmbeddingStore) -> Result<Self, IndexError> {
        let (layers, dim) = store.shape().ok_or(IndexError::EmptyStore)?;
        let mut ids = Vec::with_capacity(store.len());
        let mut rows = Vec::with_capacity(store.len() * dim);
        for (id, e) in store.iter() {
            let cls = e.row(layers, 0);
            let norm = cls.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt();
            if norm < MIN_NORM {
                return Err(IndexError::ZeroVector(id.to_string()));
            }
            rows.extend(cls.iter().map(|&x| x as f64 / norm));
            ids.push(id.to_string());
        }
        Ok(FlatIndex { dim, ids, rows })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.rows[i * self.dim..(i + 1) * self.dim]
    }

    /// Cosine similarity of `q` against every row, in row order.
    pub fn scores(&self, q: &[f32], mode: ExecMode) -> Result<Vec<f64>, IndexError> {
        if q.len() != self.dim {
            return Err(IndexError::DimMismatch {
                expected: self.dim,
                got: q.len(),
            });
        }
        let qn = q.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt();
        if qn < MIN_NORM {
            return Ok(vec![0.0; self.len()]);
        }
        Ok(exec::map_range(mode, self.len(), |i| {
            self.row(i)
                .iter()
                .zip(q)
                .map(|(&a, &b)| a * b as f64)
                .sum::<f64>()
                / qn
        }))
    }

    /// Top `n` documents by cosine similarity, ties broken by id.
    pub fn search(&self, q: &[f32], n: usize) -> Result<Vec<RankedDocument>, IndexError> {
        self.search_with(q, n, ExecMode::default())
    }

    pub fn search_with(
        &self,
        q: &[f32],
        n: usize,
        mode: ExecMode,
    ) -> Result<Vec<RankedDocument>, IndexError> {
        let scores = self.scores(q, mode)?;
        let scored = self.ids.iter().cloned().zip(scores).collect();
        Ok(rank_scored(scored, n))
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<(), IndexError> {
        let io = |e: std::io::Error| IndexError::Storage(e.into());
        w.write_all(INDEX_MAGIC).map_err(io)?;
        w.write_all(&INDEX_VERSION.to_le_bytes()).map_err(io)?;
        w.write_all(&(self.ids.len() as u64).to_le_bytes()).map_err(io)?;
        w.write_all(&(self.dim as u32).to_le_bytes()).map_err(io)?;
        for (i, id) in self.ids.iter().enumerate() {
            write_id(w, id).map_err(io)?;
            for v in self.row(i) {
                w.write_all(&v.to_le_bytes()).map_err(io)?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self, IndexError> {
        let mut magic = [0u8; 4];
        read_exact(r, &mut magic)?;
        if &magic != INDEX_MAGIC {
            return Err(EmbeddingError::Format(format!("bad index magic {magic:?}")).into());
        }
        let version = read_u32(r)?;
        if version != INDEX_VERSION {
            return Err(EmbeddingError::Format(format!("unsupported index version {version}")).into());
        }
        let count = read_u64(r)? as usize;
        let dim = read_u32(r)? as usize;
        let mut ids = Vec::with_capacity(count.min(1 << 20));
        let mut rows = Vec::with_capacity(count.min(1 << 20) * dim);
        let mut buf = vec![0u8; dim * 8];
        for _ in 0..count {
            ids.push(read_id(r)?);
            read_exact(r, &mut buf)?;
            rows.extend(
                buf.chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk"))),
            );
        }
        Ok(FlatIndex { dim, ids, rows })
    }
}

pub fn save_index(index: &FlatIndex, path: &Path) -> Result<(), IndexError> {
    let file = File::create(path).map_err(EmbeddingError::from)?;
    let mut w = BufWriter::new(file);
    index.write_to(&mut w)?;
    w.flush().map_err(EmbeddingError::from)?;
    Ok(())
}

pub fn load_index(path: &Path) -> Result<FlatIndex, IndexError> {
    let file = File::open(path).map_err(EmbeddingError::from)?;
    FlatIndex::read_from(&mut BufReader::new(file))
}

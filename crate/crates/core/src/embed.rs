//! Per-category text-anchor tables: EMB1 ingestion, normalization, PCA
//! projection, and a synthetic anchor generator for development.
//!
//! EMB1 layout (little-endian): magic `EMB1`, count u32, dim u32, then per
//! row a u16 name length, UTF-8 name bytes, and dim f32 components.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::catalog::LabelCatalog;
use crate::error::{Error, Result};
use crate::rng::substream;

pub const EMB1_MAGIC: &[u8; 4] = b"EMB1";

/// Provenance of an embedding table.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SourceTag {
    Clip,
    Bert,
    Gpt2,
    Synthetic,
}

/// Unit-norm anchor vectors, one row per catalog id.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    /// Row names, aligned to catalog ids.
    pub names: Vec<String>,
    /// N x D, every row unit l2-norm.
    pub rows: Array2<f64>,
    pub source: SourceTag,
}

impl EmbeddingTable {
    pub fn dim(&self) -> usize {
        self.rows.ncols()
    }

    pub fn len(&self) -> usize {
        self.rows.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.nrows() == 0
    }

    pub fn row(&self, id: usize) -> ndarray::ArrayView1<'_, f64> {
        self.rows.row(id)
    }
}

/// Normalize a vector to unit l2 norm in place. Idempotent: a vector that
/// is already unit norm is returned bit-identical.
pub fn normalize_row(mut row: ndarray::ArrayViewMut1<'_, f64>) -> Result<()> {
    let norm = row.dot(&row).sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(Error::DegenerateEmbedding(None));
    }
    if norm != 1.0 {
        row.mapv_inplace(|x| x / norm);
    }
    Ok(())
}

/// Read an EMB1 table, reorder rows to catalog id order, and l2-normalize.
pub fn load_table<R: Read>(mut r: R, catalog: &LabelCatalog, source: SourceTag) -> Result<EmbeddingTable> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Format("truncated EMB1 header".into()))?;
    if &magic != EMB1_MAGIC {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected EMB1",
            String::from_utf8_lossy(&magic)
        )));
    }
    let mut u32buf = [0u8; 4];
    r.read_exact(&mut u32buf).map_err(|_| Error::Format("truncated EMB1 count".into()))?;
    let count = u32::from_le_bytes(u32buf) as usize;
    r.read_exact(&mut u32buf).map_err(|_| Error::Format("truncated EMB1 dim".into()))?;
    let dim = u32::from_le_bytes(u32buf) as usize;
    if dim == 0 {
        return Err(Error::Format("EMB1 dim is zero".into()));
    }

    let mut by_name = std::collections::HashMap::new();
    for _ in 0..count {
        let mut lenbuf = [0u8; 2];
        r.read_exact(&mut lenbuf).map_err(|_| Error::Format("truncated EMB1 name length".into()))?;
        let name_len = u16::from_le_bytes(lenbuf) as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes).map_err(|_| Error::Format("truncated EMB1 name".into()))?;
        let name = String::from_utf8(name_bytes).map_err(|_| Error::Format("EMB1 name is not UTF-8".into()))?;
        let mut payload = vec![0u8; dim * 4];
        r.read_exact(&mut payload).map_err(|_| Error::Format("truncated EMB1 row payload".into()))?;
        let row: Vec<f64> = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect();
        by_name.insert(name, row);
    }

    let mut rows = Array2::zeros((catalog.len(), dim));
    let mut names = Vec::with_capacity(catalog.len());
    for record in catalog.records() {
        let row = by_name
            .get(&record.name)
            .ok_or_else(|| Error::EmbeddingCoverage(record.name.clone()))?;
        rows.row_mut(record.id).assign(&Array1::from_vec(row.clone()));
        normalize_row(rows.row_mut(record.id))
            .map_err(|_| Error::DegenerateEmbedding(Some(record.name.clone())))?;
        names.push(record.name.clone());
    }
    Ok(EmbeddingTable { names, rows, source })
}

pub fn load_table_file<P: AsRef<Path>>(path: P, catalog: &LabelCatalog, source: SourceTag) -> Result<EmbeddingTable> {
    load_table(std::io::BufReader::new(std::fs::File::open(path)?), catalog, source)
}

/// Write a table in EMB1 (rows stored as f32).
pub fn write_table<W: Write>(table: &EmbeddingTable, mut w: W) -> Result<u64> {
    let mut buf = Vec::new();
    buf.extend_from_slice(EMB1_MAGIC);
    buf.extend_from_slice(&(table.len() as u32).to_le_bytes());
    buf.extend_from_slice(&(table.dim() as u32).to_le_bytes());
    for (name, row) in table.names.iter().zip(table.rows.rows()) {
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        for &x in row {
            buf.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    Ok(buf.len() as u64)
}

pub fn write_table_file<P: AsRef<Path>>(table: &EmbeddingTable, path: P) -> Result<u64> {
    write_table(table, std::fs::File::create(path)?)
}

/// PCA of an embedding table: mean, orthonormal basis columns, and the
/// corresponding sample-covariance eigenvalues in non-increasing order.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaModel {
    pub mean: Array1<f64>,
    /// D x d, orthonormal columns.
    pub basis: Array2<f64>,
    /// Retained variances (eigenvalues), non-increasing.
    pub variances: Vec<f64>,
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix. Returns
/// (eigenvalues, eigenvector columns) sorted by eigenvalue descending.
pub fn symmetric_eigen(a: &Array2<f64>) -> (Vec<f64>, Array2<f64>) {
    let n = a.nrows();
    assert_eq!(n, a.ncols(), "matrix must be square");
    let mut m = a.clone();
    let mut v = Array2::eye(n);
    let scale: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-300);
    for _sweep in 0..200 {
        let mut off = 0.0;
        for p in 0..n {
            for q in p + 1..n {
                off += m[[p, q]] * m[[p, q]];
            }
        }
        if off.sqrt() < 1e-15 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[[p, q]];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let app = m[[p, p]];
                let aqq = m[[q, q]];
                let tau = (aqq - app) / (2.0 * apq);
                let t = if tau >= 0.0 {
                    1.0 / (tau + (1.0 + tau * tau).sqrt())
                } else {
                    -1.0 / (-tau + (1.0 + tau * tau).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[[k, p]];
                    let mkq = m[[k, q]];
                    m[[k, p]] = c * mkp - s * mkq;
                    m[[k, q]] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[[p, k]];
                    let mqk = m[[q, k]];
                    m[[p, k]] = c * mpk - s * mqk;
                    m[[q, k]] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[[k, p]];
                    let vkq = v[[k, q]];
                    v[[k, p]] = c * vkp - s * vkq;
                    v[[k, q]] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    let eig: Vec<f64> = (0..n).map(|i| m[[i, i]]).collect();
    order.sort_by(|&i, &j| eig[j].partial_cmp(&eig[i]).unwrap());
    let values: Vec<f64> = order.iter().map(|&i| eig[i]).collect();
    let mut vectors = Array2::zeros((n, n));
    for (col, &i) in order.iter().enumerate() {
        vectors.column_mut(col).assign(&v.column(i));
    }
    (values, vectors)
}

fn fix_column_signs(basis: &mut Array2<f64>) {
    for mut col in basis.columns_mut() {
        let mut best = 0usize;
        for (i, &x) in col.iter().enumerate() {
            if x.abs() > col[best].abs() {
                best = i;
            }
        }
        if col[best] < 0.0 {
            col.mapv_inplace(|x| -x);
        }
    }
}

/// Fit a d-dimensional PCA via covariance eigendecomposition. Sign
/// convention: each basis column's largest-magnitude entry is positive.
pub fn fit_pca(table: &EmbeddingTable, d: usize) -> Result<PcaModel> {
    let n = table.len();
    let dim = table.dim();
    let max = n.min(dim);
    if d == 0 || d > max {
        return Err(Error::PcaRank { requested: d, max });
    }
    let mean = table.rows.mean_axis(Axis(0)).expect("nonempty table");
    let centered = &table.rows - &mean.view().insert_axis(Axis(0));
    let denom = if n > 1 { (n - 1) as f64 } else { 1.0 };
    let cov = centered.t().dot(&centered) / denom;
    let (values, vectors) = symmetric_eigen(&cov);
    let mut basis = vectors.slice(ndarray::s![.., ..d]).to_owned();
    fix_column_signs(&mut basis);
    Ok(PcaModel {
        mean,
        basis,
        variances: values[..d].to_vec(),
    })
}

/// Project a table: mean-center, map through the basis, re-normalize rows.
pub fn project(model: &PcaModel, table: &EmbeddingTable) -> Result<EmbeddingTable> {
    if model.mean.len() != table.dim() {
        return Err(Error::Dimension(format!(
            "pca model dim {} vs table dim {}",
            model.mean.len(),
            table.dim()
        )));
    }
    let centered = &table.rows - &model.mean.view().insert_axis(Axis(0));
    let mut rows = centered.dot(&model.basis);
    for (i, row) in rows.rows_mut().into_iter().enumerate() {
        normalize_row(row).map_err(|_| Error::DegenerateEmbedding(Some(table.names[i].clone())))?;
    }
    Ok(EmbeddingTable {
        names: table.names.clone(),
        rows,
        source: table.source,
    })
}

/// Deterministic synthetic anchor table: exactly orthonormal rows when
/// n <= d (Gram-Schmidt on Gaussian draws), near-orthogonal unit rows
/// otherwise.
pub fn synthetic_anchors(n: usize, d: usize, seed: u64) -> EmbeddingTable {
    let mut rng = substream(seed, "embed/synthetic-anchors");
    let mut rows = Array2::zeros((n, d));
    for i in 0..n {
        loop {
            let mut v = Array1::from_shape_fn(d, |_| {
                let x: f64 = rng.sample(StandardNormal);
                x
            });
            if n <= d {
                for j in 0..i {
                    let proj = v.dot(&rows.row(j));
                    v = &v - &(proj * &rows.row(j).to_owned());
                }
            }
            let norm = v.dot(&v).sqrt();
            if norm > 1e-6 {
                rows.row_mut(i).assign(&(v / norm));
                break;
            }
        }
    }
    EmbeddingTable {
        names: (0..n).map(|i| format!("anchor_{i:03}")).collect(),
        rows,
        source: SourceTag::Synthetic,
    }
}

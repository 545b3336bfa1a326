//! Statistical pooling and embedding concatenation.

use crate::dataset::SourceTag;
use crate::error::{Error, Result};
use crate::numerics::{norm, Matrix};

/// Fixed-length clip representation.
#[derive(Debug, Clone, PartialEq)]
pub struct PooledVector {
    pub values: Vec<f64>,
    /// Sources that contributed, in concatenation order.
    pub sources: Vec<SourceTag>,
}

impl PooledVector {
    pub fn new(values: Vec<f64>, source: SourceTag) -> Self {
        PooledVector {
            values,
            sources: vec![source],
        }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

/// Collapses a `T×D` frame matrix to `[mean ‖ std]` (length `2D`).
///
/// The standard deviation is the population one (divide by `T`), so a single
/// frame gives a zero deviation. Each column is accumulated in sorted order,
/// which makes the result bit-identical under any permutation of the frames.
pub fn stat_pool(frames: &Matrix) -> Result<Vec<f64>> {
    let t = frames.rows();
    if t == 0 {
        return Err(Error::EmptyInput);
    }
    let d = frames.cols();
    let mut out = vec![0.0; 2 * d];
    let mut column = Vec::with_capacity(t);
    for c in 0..d {
        column.clear();
        column.extend(frames.iter_rows().map(|r| r[c]));
        column.sort_by(f64::total_cmp);
        let mean = column.iter().sum::<f64>() / t as f64;
        let var = column.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / t as f64;
        out[c] = mean;
        out[d + c] = var.sqrt();
    }
    Ok(out)
}

/// Pools frame-level sources; utterance-level sources (`1×D`) pass through.
pub fn pool_embedding(frames: &Matrix, source: SourceTag) -> Result<PooledVector> {
    let values = if source.is_frame_level() {
        stat_pool(frames)?
    } else {
        if frames.rows() != 1 {
            return Err(Error::ShapeMismatch(format!(
                "utterance-level source {} must be a single row, got {}",
                source,
                frames.rows()
            )));
        }
        frames.row(0).to_vec()
    };
    Ok(PooledVector::new(values, source))
}

/// Concatenates vectors in list order.
pub fn concat_embeddings(parts: &[PooledVector]) -> Result<PooledVector> {
    if parts.is_empty() {
        return Err(Error::EmptyList);
    }
    let mut out = PooledVector {
        values: Vec::with_capacity(parts.iter().map(PooledVector::dim).sum()),
        sources: Vec::new(),
    };
    for p in parts {
        out.values.extend_from_slice(&p.values);
        out.sources.extend_from_slice(&p.sources);
    }
    Ok(out)
}

pub fn l2_normalize(v: &PooledVector) -> Result<PooledVector> {
    let n = norm(&v.values);
    if n == 0.0 || !n.is_finite() {
        return Err(Error::ZeroVector);
    }
    Ok(PooledVector {
        values: v.values.iter().map(|x| x / n).collect(),
        sources: v.sources.clone(),
    })
}

/// Row-wise horizontal concatenation of feature matrices with equal row counts.
pub fn concat_columns(blocks: &[Matrix]) -> Result<Matrix> {
    let first = blocks.first().ok_or(Error::EmptyList)?;
    let rows = first.rows();
    if let Some(b) = blocks.iter().find(|b| b.rows() != rows) {
        return Err(Error::ShapeMismatch(format!(
            "concatenating blocks with {} and {} rows",
            rows,
            b.rows()
        )));
    }
    let cols: usize = blocks.iter().map(Matrix::cols).sum();
    let mut data = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for b in blocks {
            data.extend_from_slice(b.row(r));
        }
    }
    Ok(Matrix::from_raw(rows, cols, data))
}

use forge_masks::SparseMask;

use crate::{Result, Scalar, Tensor, TensorError};

/// Compressed sparse rows of a `rows × cols` weight matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CompressedRows<T> {
    rows: usize,
    cols: usize,
    offsets: Vec<usize>,
    indices: Vec<u32>,
    values: Vec<T>,
}

impl<T: Scalar> CompressedRows<T> {
    pub fn from_parts(
        rows: usize,
        cols: usize,
        offsets: Vec<usize>,
        indices: Vec<u32>,
        values: Vec<T>,
    ) -> Result<Self> {
        let bad = |msg: String| Err(TensorError::MalformedCsr(msg));
        if offsets.len() != rows + 1 {
            return bad(format!("{} offsets for {rows} rows", offsets.len()));
        }
        if offsets[0] != 0 || offsets[rows] != indices.len() {
            return bad("offsets must start at 0 and end at nnz".into());
        }
        if values.len() != indices.len() {
            return bad(format!(
                "{} values for {} indices",
                values.len(),
                indices.len()
            ));
        }
        for r in 0..rows {
            let (lo, hi) = (offsets[r], offsets[r + 1]);
            if lo > hi {
                return bad(format!("offsets decrease at row {r}"));
            }
            let row = &indices[lo..hi];
            if row.windows(2).any(|p| p[0] >= p[1]) {
                return bad(format!("column indices not strictly increasing in row {r}"));
            }
            if row.last().is_some_and(|&c| c as usize >= cols) {
                return bad(format!("column index out of range in row {r}"));
            }
        }
        Ok(Self {
            rows,
            cols,
            offsets,
            indices,
            values,
        })
    }

    /// Stores exactly the mask's active positions of `weight`.
    pub fn from_masked(weight: &Tensor<T>, mask: &SparseMask) -> Result<Self> {
        let (rows, cols) = weight.dims2("compress")?;
        if mask.len() != rows * cols {
            return Err(TensorError::ShapeMismatch {
                op: "compress",
                left: weight.shape().to_vec(),
                right: mask.shape().to_vec(),
            });
        }
        let mut offsets = vec![0usize; rows + 1];
        let mut indices = Vec::with_capacity(mask.active_count());
        let mut values = Vec::with_capacity(mask.active_count());
        for &flat in mask.active() {
            let flat = flat as usize;
            offsets[flat / cols + 1] += 1;
            indices.push((flat % cols) as u32);
            values.push(weight.data()[flat]);
        }
        for r in 0..rows {
            offsets[r + 1] += offsets[r];
        }
        Ok(Self {
            rows,
            cols,
            offsets,
            indices,
            values,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    pub fn indices(&self) -> &[u32] {
        &self.indices
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn to_dense(&self) -> Tensor<T> {
        let mut out = Tensor::zeros(&[self.rows, self.cols]);
        for r in 0..self.rows {
            for p in self.offsets[r]..self.offsets[r + 1] {
                out.data_mut()[r * self.cols + self.indices[p] as usize] = self.values[p];
            }
        }
        out
    }
}

/// `x[m×k] · w[k×n]` over stored entries only. Returns the product and the
/// number of multiply-accumulates performed, which is `nnz · m`.
pub fn csr_matmul<T: Scalar>(x: &Tensor<T>, w: &CompressedRows<T>) -> Result<(Tensor<T>, u64)> {
    let (m, k) = x.dims2("csr_matmul")?;
    if k != w.rows {
        return Err(TensorError::ShapeMismatch {
            op: "csr_matmul",
            left: x.shape().to_vec(),
            right: vec![w.rows, w.cols],
        });
    }
    let n = w.cols;
    let mut out = vec![T::zero(); m * n];
    let mut macs = 0u64;
    let xd = x.data();
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let (lo, hi) = (w.offsets[p], w.offsets[p + 1]);
            let xv = xd[i * k + p];
            for (&c, &v) in w.indices[lo..hi].iter().zip(&w.values[lo..hi]) {
                orow[c as usize] += xv * v;
            }
            macs += (hi - lo) as u64;
        }
    }
    Ok((Tensor::new(&[m, n], out)?, macs))
}

use super::{Result, Tensor, TensorError};

/// Constant CSR matrix used as the left operand of sparse-dense products.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    rows: usize,
    cols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl SparseMatrix {
    /// Builds from `(row, col, value)` triplets; duplicates are summed.
    pub fn from_triplets(rows: usize, cols: usize, triplets: &[(usize, usize, f64)]) -> Self {
        let mut sorted: Vec<(usize, usize, f64)> = triplets.to_vec();
        sorted.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        let mut indptr = vec![0usize; rows + 1];
        let mut indices = Vec::with_capacity(sorted.len());
        let mut values: Vec<f64> = Vec::with_capacity(sorted.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in sorted {
            assert!(r < rows && c < cols, "triplet ({r},{c}) out of range");
            if last == Some((r, c)) {
                *values.last_mut().expect("previous value") += v;
                continue;
            }
            indptr[r + 1] += 1;
            indices.push(c);
            values.push(v);
            last = Some((r, c));
        }
        for r in 0..rows {
            indptr[r + 1] += indptr[r];
        }
        Self {
            rows,
            cols,
            indptr,
            indices,
            values,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row_entries(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.indptr[r]..self.indptr[r + 1];
        self.indices[span.clone()]
            .iter()
            .copied()
            .zip(self.values[span].iter().copied())
    }

    /// `self * x`
    pub fn mul_dense(&self, x: &Tensor) -> Result<Tensor> {
        if x.rows() != self.cols {
            return Err(TensorError::Dimension {
                op: "spmm",
                left: vec![self.rows, self.cols],
                right: x.shape().to_vec(),
            });
        }
        let n = x.cols();
        let mut out = vec![0.0; self.rows * n];
        for r in 0..self.rows {
            let o = &mut out[r * n..(r + 1) * n];
            for (c, v) in self.row_entries(r) {
                for (oo, &xx) in o.iter_mut().zip(x.row_slice(c)) {
                    *oo += v * xx;
                }
            }
        }
        Ok(Tensor::matrix(self.rows, n, out))
    }

    /// `self^T * g`
    pub fn transpose_mul_dense(&self, g: &Tensor) -> Result<Tensor> {
        if g.rows() != self.rows {
            return Err(TensorError::Dimension {
                op: "spmm_t",
                left: vec![self.rows, self.cols],
                right: g.shape().to_vec(),
            });
        }
        let n = g.cols();
        let mut out = vec![0.0; self.cols * n];
        for r in 0..self.rows {
            let gr = g.row_slice(r);
            for (c, v) in self.row_entries(r) {
                let o = &mut out[c * n..(c + 1) * n];
                for (oo, &gg) in o.iter_mut().zip(gr) {
                    *oo += v * gg;
                }
            }
        }
        Ok(Tensor::matrix(self.cols, n, out))
    }

    pub fn transpose(&self) -> Self {
        let mut trip = Vec::with_capacity(self.nnz());
        for r in 0..self.rows {
            for (c, v) in self.row_entries(r) {
                trip.push((c, r, v));
            }
        }
        Self::from_triplets(self.cols, self.rows, &trip)
    }

    pub fn to_dense(&self) -> Tensor {
        let mut t = Tensor::zeros(self.rows.max(1), self.cols.max(1));
        let c = self.cols;
        for r in 0..self.rows {
            for (cc, v) in self.row_entries(r) {
                t.data_mut()[r * c + cc] += v;
            }
        }
        t
    }
}

/// Diffusion supports `[I, P, .., P^k, B, .., B^k]` over a forward transition
/// matrix `P` and a backward one `B`, applied as repeated sparse products.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSupports {
    forward: SparseMatrix,
    backward: SparseMatrix,
    k: usize,
}

impl DiffusionSupports {
    pub fn new(forward: SparseMatrix, backward: SparseMatrix, k: usize) -> Self {
        assert_eq!(forward.rows(), forward.cols(), "square supports");
        assert_eq!(forward.rows(), backward.rows(), "matching supports");
        Self {
            forward,
            backward,
            k,
        }
    }

    pub fn identity(n: usize, k: usize) -> Self {
        let eye =
            SparseMatrix::from_triplets(n, n, &(0..n).map(|i| (i, i, 1.0)).collect::<Vec<_>>());
        Self::new(eye.clone(), eye, k)
    }

    pub fn n_nodes(&self) -> usize {
        self.forward.rows()
    }

    pub fn n_supports(&self) -> usize {
        2 * self.k + 1
    }

    fn chain(&self, s: usize) -> (Option<&SparseMatrix>, usize) {
        match s {
            0 => (None, 0),
            s if s <= self.k => (Some(&self.forward), s),
            s => (Some(&self.backward), s - self.k),
        }
    }

    /// `S_s * x`
    pub fn apply(&self, s: usize, x: &Tensor) -> Result<Tensor> {
        let (m, p) = self.chain(s);
        let mut y = x.clone();
        if let Some(m) = m {
            for _ in 0..p {
                y = m.mul_dense(&y)?;
            }
        }
        Ok(y)
    }

    /// `S_s^T * g`
    pub fn apply_t(&self, s: usize, g: &Tensor) -> Result<Tensor> {
        let (m, p) = self.chain(s);
        let mut y = g.clone();
        if let Some(m) = m {
            for _ in 0..p {
                y = m.transpose_mul_dense(&y)?;
            }
        }
        Ok(y)
    }

    /// `sum_s S_s * z[:, s-th block]`, where `z` holds one equal-width block per support.
    pub fn diffuse(&self, z: &Tensor) -> Result<Tensor> {
        let ns = self.n_supports();
        if z.cols() % ns != 0 || z.rows() != self.n_nodes() {
            return Err(TensorError::Dimension {
                op: "diffuse",
                left: vec![self.n_nodes(), ns],
                right: z.shape().to_vec(),
            });
        }
        let w = z.cols() / ns;
        let mut out = Tensor::zeros(z.rows(), w);
        for s in 0..ns {
            let block = column_block(z, s * w, w);
            out.add_assign(&self.apply(s, &block)?);
        }
        Ok(out)
    }

    /// Gradient of [`Self::diffuse`] with respect to `z`.
    pub fn diffuse_t(&self, g: &Tensor) -> Result<Tensor> {
        let ns = self.n_supports();
        let w = g.cols();
        let n = g.rows();
        let mut out = vec![0.0; n * w * ns];
        for s in 0..ns {
            let part = self.apply_t(s, g)?;
            for r in 0..n {
                out[r * w * ns + s * w..r * w * ns + (s + 1) * w]
                    .copy_from_slice(part.row_slice(r));
            }
        }
        Ok(Tensor::matrix(n, w * ns, out))
    }
}

fn column_block(z: &Tensor, start: usize, w: usize) -> Tensor {
    let mut out = Vec::with_capacity(z.rows() * w);
    for r in 0..z.rows() {
        out.extend_from_slice(&z.row_slice(r)[start..start + w]);
    }
    Tensor::matrix(z.rows(), w, out)
}

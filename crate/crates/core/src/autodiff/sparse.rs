use crate::error::{shape_err, Result};

/// A fixed sparse linear map `out[i] = sum_j w_ij * in[j]`, stored as CSR.
///
/// Index shuffles (permutes, framing, segmentation, overlap-add, pooling)
/// are all expressed through this one differentiable primitive.
#[derive(Clone, Debug)]
pub struct SparseMap {
    in_len: usize,
    out_shape: Vec<usize>,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    weights: Vec<f64>,
}

/// Incremental builder: call `row` once per output element, in order.
pub struct SparseMapBuilder {
    map: SparseMap,
}

impl SparseMapBuilder {
    pub fn new(in_len: usize, out_shape: &[usize]) -> Self {
        let out_len: usize = out_shape.iter().product();
        let mut row_ptr = Vec::with_capacity(out_len + 1);
        row_ptr.push(0);
        Self {
            map: SparseMap {
                in_len,
                out_shape: out_shape.to_vec(),
                row_ptr,
                cols: Vec::with_capacity(out_len),
                weights: Vec::with_capacity(out_len),
            },
        }
    }

    pub fn row(&mut self, entries: impl IntoIterator<Item = (usize, f64)>) {
        for (c, w) in entries {
            debug_assert!(c < self.map.in_len);
            self.map.cols.push(c);
            self.map.weights.push(w);
        }
        self.map.row_ptr.push(self.map.cols.len());
    }

    pub fn build(self) -> Result<SparseMap> {
        let out_len: usize = self.map.out_shape.iter().product();
        if self.map.row_ptr.len() != out_len + 1 {
            return Err(shape_err(
                "sparse_map",
                format!("{} rows declared, {} built", out_len, self.map.row_ptr.len() - 1),
            ));
        }
        Ok(self.map)
    }
}

impl SparseMap {
    /// Gather map: `out[i] = in[index[i]]`, or zero where `index[i]` is `None`.
    pub fn gather(in_len: usize, out_shape: &[usize], index: &[Option<usize>]) -> Result<Self> {
        let mut b = SparseMapBuilder::new(in_len, out_shape);
        for ix in index {
            b.row(ix.map(|j| (j, 1.0)));
        }
        b.build()
    }

    /// Axis permutation of a rank-3 row-major tensor; `perm[k]` names the
    /// input axis that becomes output axis `k`.
    pub fn permute3(shape: [usize; 3], perm: [usize; 3]) -> Result<Self> {
        let out_shape = [shape[perm[0]], shape[perm[1]], shape[perm[2]]];
        let strides = [shape[1] * shape[2], shape[2], 1];
        let mut index = Vec::with_capacity(out_shape.iter().product());
        for a in 0..out_shape[0] {
            for b in 0..out_shape[1] {
                for c in 0..out_shape[2] {
                    let mut src = [0usize; 3];
                    src[perm[0]] = a;
                    src[perm[1]] = b;
                    src[perm[2]] = c;
                    index.push(Some(src[0] * strides[0] + src[1] * strides[1] + src[2] * strides[2]));
                }
            }
        }
        Self::gather(shape.iter().product(), &out_shape, &index)
    }

    pub fn in_len(&self) -> usize {
        self.in_len
    }

    pub fn out_shape(&self) -> &[usize] {
        &self.out_shape
    }

    pub fn apply(&self, input: &[f64]) -> Vec<f64> {
        debug_assert_eq!(input.len(), self.in_len);
        self.row_ptr
            .windows(2)
            .map(|w| (w[0]..w[1]).map(|k| self.weights[k] * input[self.cols[k]]).sum())
            .collect()
    }

    /// Adjoint application, accumulating into `grad_in`.
    pub fn apply_transpose_into(&self, grad_out: &[f64], grad_in: &mut [f64]) {
        for (i, w) in self.row_ptr.windows(2).enumerate() {
            let g = grad_out[i];
            if g == 0.0 {
                continue;
            }
            for k in w[0]..w[1] {
                grad_in[self.cols[k]] += self.weights[k] * g;
            }
        }
    }
}

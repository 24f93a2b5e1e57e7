use super::Tensor;
use crate::error::{Error, Result};

/// Row-major `N x k` neighbour index matrix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KnnIndices {
    pub k: usize,
    pub indices: Vec<usize>,
}

impl KnnIndices {
    pub fn rows(&self) -> usize {
        if self.k == 0 {
            0
        } else {
            self.indices.len() / self.k
        }
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.indices[i * self.k..(i + 1) * self.k]
    }
}

/// Exhaustive k-nearest-neighbour search.
///
/// Row `i` lists the `k` base rows closest to query row `i` in ascending
/// squared distance; equal distances keep the lower base index first.
pub fn knn_indices(query: &Tensor, base: &Tensor, k: usize) -> Result<KnnIndices> {
    let d = query.cols();
    if base.cols() != d || query.rank() != 2 || base.rank() != 2 {
        return Err(Error::shape(
            "knn_indices",
            format!("{:?} vs {:?}", query.shape(), base.shape()),
        ));
    }
    let m = base.rows();
    if k > m || k == 0 {
        return Err(Error::InvalidInput(format!(
            "knn_indices: k = {k} must be in 1..={m}"
        )));
    }
    let mut indices = Vec::with_capacity(query.rows() * k);
    let mut scratch: Vec<(f64, usize)> = Vec::with_capacity(m);
    for qi in 0..query.rows() {
        let q = query.row(qi);
        scratch.clear();
        scratch.extend((0..m).map(|j| {
            let dist = q
                .iter()
                .zip(base.row(j))
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>();
            (dist, j)
        }));
        let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        if k < m {
            scratch.select_nth_unstable_by(k - 1, cmp);
        }
        let head = &mut scratch[..k];
        head.sort_unstable_by(cmp);
        indices.extend(head.iter().map(|&(_, j)| j));
    }
    Ok(KnnIndices { k, indices })
}

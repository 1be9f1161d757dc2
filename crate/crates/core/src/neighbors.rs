//! Brute-force Euclidean nearest-neighbour search.

use ndarray::{Array2, ArrayView1, ArrayView2};

use crate::linalg::sq_dist;

/// Indices of the `k` rows of `reference` closest to `query`, nearest first.
/// Distance ties are broken by the lower row index.
pub fn k_nearest(reference: ArrayView2<f64>, query: ArrayView1<f64>, k: usize) -> Vec<usize> {
    let q = query.to_vec();
    let mut d: Vec<(f64, usize)> = reference
        .rows()
        .into_iter()
        .enumerate()
        .map(|(i, r)| (sq_dist(r.as_slice().expect("standard layout"), &q), i))
        .collect();
    let k = k.min(d.len());
    if k == 0 {
        return Vec::new();
    }
    let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    if k < d.len() {
        d.select_nth_unstable_by(k - 1, cmp);
        d.truncate(k);
    }
    d.sort_unstable_by(cmp);
    d.into_iter().map(|(_, i)| i).collect()
}

/// Contiguous copy of the selected rows.
pub fn take_rows(x: ArrayView2<f64>, rows: &[usize]) -> Array2<f64> {
    let f = x.ncols();
    let mut out = Array2::zeros((rows.len(), f));
    for (dst, &src) in rows.iter().enumerate() {
        out.row_mut(dst).assign(&x.row(src));
    }
    out
}

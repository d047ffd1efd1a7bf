//! Row-major dense matrices and the few kernels the pipeline needs.
//!
//! Accumulation order is pinned in every kernel: per output element the
//! inner sum runs left to right over the contracted index. Row shards of a
//! matrix therefore produce bitwise the same per-row results as the full
//! matrix, which the distributed/sequential equivalence tests rely on.

#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Mat { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// y[i] += scale * sum_j a[i,j] x[j]
    #[allow(clippy::needless_range_loop)]
    pub fn matvec_acc(&self, x: &[f64], scale: f64, y: &mut [f64]) {
        debug_assert_eq!(x.len(), self.cols);
        debug_assert_eq!(y.len(), self.rows);
        for i in 0..self.rows {
            let row = self.row(i);
            let mut acc = 0.0;
            for j in 0..self.cols {
                acc += row[j] * x[j];
            }
            y[i] += scale * acc;
        }
    }

    /// z[k] = sum_i a[i,k] x[i]; the i-sum runs top to bottom so that a
    /// row shard contributes exactly its slice of the full sum.
    #[allow(clippy::needless_range_loop)]
    pub fn matvec_transpose(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.rows);
        let mut z = vec![0.0; self.cols];
        for i in 0..self.rows {
            let row = self.row(i);
            let xi = x[i];
            for k in 0..self.cols {
                z[k] += row[k] * xi;
            }
        }
        z
    }

    /// y[i] = sum_j a[i,j] x[j] into a fresh vector.
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.rows];
        self.matvec_acc(x, 1.0, &mut y);
        y
    }
}

/// Relative L2 error ||a - b|| / ||b||; returns absolute norm of a when b
/// is the zero vector.
pub fn rel_l2(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let mut diff = 0.0;
    let mut norm = 0.0;
    for (x, y) in a.iter().zip(b) {
        diff += (x - y) * (x - y);
        norm += y * y;
    }
    if norm == 0.0 {
        diff.sqrt()
    } else {
        (diff / norm).sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matvec_matches_hand_computation() {
        let a = Mat::from_fn(2, 3, |i, j| (i * 3 + j) as f64); // [[0,1,2],[3,4,5]]
        let y = a.matvec(&[1.0, 2.0, 3.0]);
        assert_eq!(y, vec![8.0, 26.0]);
    }

    #[test]
    fn matvec_transpose_matches_hand_computation() {
        let a = Mat::from_fn(2, 3, |i, j| (i * 3 + j) as f64);
        let z = a.matvec_transpose(&[2.0, 1.0]);
        assert_eq!(z, vec![3.0, 6.0, 9.0]);
    }

    #[test]
    fn row_shards_reproduce_full_matvec_bitwise() {
        let a = Mat::from_fn(8, 5, |i, j| ((i * 31 + j * 17) % 13) as f64 * 0.37 - 1.0);
        let x: Vec<f64> = (0..5).map(|i| 0.21 * i as f64 - 0.4).collect();
        let full = a.matvec(&x);
        for split in 1..8 {
            let top = Mat::from_fn(split, 5, |i, j| a.at(i, j));
            let bot = Mat::from_fn(8 - split, 5, |i, j| a.at(i + split, j));
            let mut parts = top.matvec(&x);
            parts.extend(bot.matvec(&x));
            for (p, f) in parts.iter().zip(&full) {
                assert_eq!(p.to_bits(), f.to_bits());
            }
        }
    }

    #[test]
    fn transpose_shards_sum_to_full() {
        let a = Mat::from_fn(6, 4, |i, j| (i as f64 - 2.5) * 0.3 + j as f64 * 0.11);
        let x: Vec<f64> = (0..6).map(|i| (i as f64).sin()).collect();
        let full = a.matvec_transpose(&x);
        let top = Mat::from_fn(2, 4, |i, j| a.at(i, j));
        let bot = Mat::from_fn(4, 4, |i, j| a.at(i + 2, j));
        let zt = top.matvec_transpose(&x[..2]);
        let zb = bot.matvec_transpose(&x[2..]);
        let sum: Vec<f64> = zt.iter().zip(&zb).map(|(a, b)| a + b).collect();
        assert!(rel_l2(&sum, &full) < 1e-15);
    }

    #[test]
    fn rel_l2_zero_reference() {
        assert_eq!(rel_l2(&[0.0, 0.0], &[0.0, 0.0]), 0.0);
        assert!(rel_l2(&[3.0, 4.0], &[0.0, 0.0]) == 5.0);
    }
}

//! Strided matrix-multiply kernel used by the autodiff engine.

/// Row/column strides describing how a logical `rows × cols` matrix is laid out
/// in a flat slice.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Layout {
    pub rows: usize,
    pub cols: usize,
    pub rs: isize,
    pub cs: isize,
}

impl Layout {
    /// Contiguous row-major `rows × cols`.
    pub fn row_major(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            rs: cols as isize,
            cs: 1,
        }
    }

    /// The transpose of a contiguous row-major `rows × cols` matrix, i.e. a
    /// logical `cols × rows` view.
    pub fn transposed(rows: usize, cols: usize) -> Self {
        Self {
            rows: cols,
            cols: rows,
            rs: 1,
            cs: cols as isize,
        }
    }

    fn max_offset(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            return 0;
        }
        (self.rows - 1) * self.rs as usize + (self.cols - 1) * self.cs as usize
    }
}

/// Products at or below this many multiply-adds skip the packing kernel;
/// attention works on many tiny per-head blocks where packing dominates.
const SMALL: usize = 4096;

fn small_gemm(a: &[f64], la: Layout, b: &[f64], lb: Layout, c: &mut [f64], beta: f64) {
    let (m, k, n) = (la.rows, la.cols, lb.cols);
    let (ars, acs, brs, bcs) = (la.rs as usize, la.cs as usize, lb.rs as usize, lb.cs as usize);
    for i in 0..m {
        let row = &mut c[i * n..(i + 1) * n];
        if beta == 0.0 {
            row.fill(0.0);
        } else if beta != 1.0 {
            row.iter_mut().for_each(|v| *v *= beta);
        }
        for p in 0..k {
            let x = a[i * ars + p * acs];
            let base = p * brs;
            for (j, v) in row.iter_mut().enumerate() {
                *v += x * b[base + j * bcs];
            }
        }
    }
}

/// `c = beta * c + a · b` where `c` is contiguous row-major.
pub(crate) fn gemm(a: &[f64], la: Layout, b: &[f64], lb: Layout, c: &mut [f64], beta: f64) {
    assert_eq!(la.cols, lb.rows, "gemm inner dimension");
    let (m, k, n) = (la.rows, la.cols, lb.cols);
    assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in &mut c[..m * n] {
            *v *= beta;
        }
        return;
    }
    assert!(la.max_offset() < a.len(), "gemm lhs out of bounds");
    assert!(lb.max_offset() < b.len(), "gemm rhs out of bounds");
    if m * k * n <= SMALL {
        small_gemm(a, la, b, lb, c, beta);
        return;
    }
    // SAFETY: the asserts above bound every offset the kernel reads from `a`
    // and `b`, and `c` holds at least `m * n` contiguous elements.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            la.rs,
            la.cs,
            b.as_ptr(),
            lb.rs,
            lb.cs,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                c[i * n + j] = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
            }
        }
        c
    }

    #[test]
    fn matches_naive_product() {
        let (m, k, n) = (5, 7, 3);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
        let mut c = vec![0.0; m * n];
        gemm(&a, Layout::row_major(m, k), &b, Layout::row_major(k, n), &mut c, 0.0);
        for (x, y) in c.iter().zip(naive(&a, &b, m, k, n)) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn transposed_layout() {
        // aᵀ where a is 2×3 row-major gives a 3×2 logical matrix.
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [1.0, 1.0];
        let mut c = vec![0.0; 3];
        gemm(&a, Layout::transposed(2, 3), &b, Layout::row_major(2, 1), &mut c, 0.0);
        assert_eq!(c, vec![5.0, 7.0, 9.0]);
    }
}

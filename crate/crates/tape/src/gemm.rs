//! Safe strided wrapper over `matrixmultiply::dgemm`.

/// Matrix view: row stride and column stride in elements.
#[derive(Clone, Copy, Debug)]
pub struct Layout {
    pub rs: usize,
    pub cs: usize,
}

impl Layout {
    pub const fn row_major(cols: usize) -> Self {
        Self { rs: cols, cs: 1 }
    }

    /// The transpose of a row-major `rows x cols` matrix, viewed as `cols x rows`.
    pub const fn transposed(cols: usize) -> Self {
        Self { rs: 1, cs: cols }
    }

    fn max_index(&self, rows: usize, cols: usize) -> usize {
        if rows == 0 || cols == 0 {
            0
        } else {
            (rows - 1) * self.rs + (cols - 1) * self.cs
        }
    }
}

/// `c = alpha * a @ b + beta * c` for an `m x k` times `k x n` product.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    la: Layout,
    b: &[f64],
    lb: Layout,
    beta: f64,
    c: &mut [f64],
    lc: Layout,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(k == 0 || la.max_index(m, k) < a.len(), "gemm: lhs out of bounds");
    assert!(k == 0 || lb.max_index(k, n) < b.len(), "gemm: rhs out of bounds");
    assert!(lc.max_index(m, n) < c.len(), "gemm: output out of bounds");
    // SAFETY: every index the kernel touches was bounds-checked above, and
    // `c` is exclusively borrowed so it cannot alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            la.rs as isize,
            la.cs as isize,
            b.as_ptr(),
            lb.rs as isize,
            lb.cs as isize,
            beta,
            c.as_mut_ptr(),
            lc.rs as isize,
            lc.cs as isize,
        );
    }
}

//! Thin wrapper over `matrixmultiply::dgemm` for strided row-major views.

#[derive(Clone, Copy)]
pub(crate) struct View {
    pub off: usize,
    pub rs: usize,
    pub cs: usize,
}

impl View {
    pub fn rm(off: usize, cols: usize) -> Self {
        Self { off, rs: cols, cs: 1 }
    }

    /// Transposed view of a row-major block with `cols` columns.
    pub fn rm_t(off: usize, cols: usize) -> Self {
        Self { off, rs: 1, cs: cols }
    }

    fn last(&self, rows: usize, cols: usize) -> usize {
        self.off + (rows - 1) * self.rs + (cols - 1) * self.cs
    }
}

/// `c = a · b + beta · c` for `a: m×k`, `b: k×n`, `c: m×n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    av: View,
    b: &[f64],
    bv: View,
    beta: f64,
    c: &mut [f64],
    cv: View,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                let idx = cv.off + i * cv.rs + j * cv.cs;
                c[idx] *= beta;
            }
        }
        return;
    }
    assert!(av.last(m, k) < a.len(), "gemm: lhs view out of bounds");
    assert!(bv.last(k, n) < b.len(), "gemm: rhs view out of bounds");
    assert!(cv.last(m, n) < c.len(), "gemm: output view out of bounds");
    // SAFETY: every index touched by dgemm is bounded by the asserts above;
    // `c` is borrowed mutably and cannot alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr().add(av.off),
            av.rs as isize,
            av.cs as isize,
            b.as_ptr().add(bv.off),
            bv.rs as isize,
            bv.cs as isize,
            beta,
            c.as_mut_ptr().add(cv.off),
            cv.rs as isize,
            cv.cs as isize,
        );
    }
}

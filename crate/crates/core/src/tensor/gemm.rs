/// Row/column strides of a matrix operand.
#[derive(Clone, Copy)]
pub(crate) struct Layout {
    pub rs: isize,
    pub cs: isize,
}

impl Layout {
    pub fn row_major(cols: usize) -> Self {
        Self {
            rs: cols as isize,
            cs: 1,
        }
    }

    /// A row-major `rows x cols` buffer viewed as its transpose.
    pub fn transposed(cols: usize) -> Self {
        Self {
            rs: 1,
            cs: cols as isize,
        }
    }
}

/// `c = alpha * a(m x k) * b(k x n) + beta * c`, with `c` row-major `m x n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn sgemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    la: Layout,
    b: &[f32],
    lb: Layout,
    c: &mut [f32],
    beta: f32,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(c.len() >= m * n, "gemm output too small");
    let max_index = |l: Layout, rows: usize, cols: usize| {
        if rows == 0 || cols == 0 {
            0
        } else {
            (rows as isize - 1) * l.rs + (cols as isize - 1) * l.cs
        }
    };
    assert!((max_index(la, m, k) as usize) < a.len().max(1), "gemm lhs out of bounds");
    assert!((max_index(lb, k, n) as usize) < b.len().max(1), "gemm rhs out of bounds");
    // SAFETY: the bounds of every operand were checked above.
    unsafe {
        matrixmultiply::sgemm(
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

    #[test]
    fn small_product_and_transposes() {
        // a = [[1,2,3],[4,5,6]], b = [[1,0],[0,1],[1,1]]
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [1.0, 0.0, 0.0, 1.0, 1.0, 1.0];
        let mut c = [0.0; 4];
        sgemm(2, 3, 2, &a, Layout::row_major(3), &b, Layout::row_major(2), &mut c, 0.0);
        assert_eq!(c, [4.0, 5.0, 10.0, 11.0]);

        // a^T (3x2) * a (2x3)
        let mut c = [0.0; 9];
        sgemm(3, 2, 3, &a, Layout::transposed(3), &a, Layout::row_major(3), &mut c, 0.0);
        assert_eq!(c, [17.0, 22.0, 27.0, 22.0, 29.0, 36.0, 27.0, 36.0, 45.0]);

        // beta accumulates
        let mut c = [1.0; 4];
        sgemm(2, 3, 2, &a, Layout::row_major(3), &b, Layout::row_major(2), &mut c, 1.0);
        assert_eq!(c, [5.0, 6.0, 11.0, 12.0]);
    }
}

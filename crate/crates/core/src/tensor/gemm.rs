use super::Scalar;

/// Storage order of a GEMM operand relative to its logical shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatLayout {
    /// Logical `rows x cols` stored row-major.
    Normal,
    /// Logical `rows x cols` stored as its row-major transpose.
    Transposed,
}

impl MatLayout {
    fn strides(self, rows: usize, cols: usize) -> (isize, isize) {
        match self {
            MatLayout::Normal => (cols as isize, 1),
            MatLayout::Transposed => (1, rows as isize),
        }
    }
}

/// `c (m x n) = a (m x k) * b (k x n) [+ c]`, all buffers contiguous.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    a_layout: MatLayout,
    b: &[T],
    b_layout: MatLayout,
    c: &mut [T],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k, "gemm: lhs length");
    assert_eq!(b.len(), k * n, "gemm: rhs length");
    assert_eq!(c.len(), m * n, "gemm: output length");
    if m == 0 || n == 0 {
        return;
    }
    let beta = if accumulate { T::one() } else { T::zero() };
    if k == 0 {
        if !accumulate {
            c.iter_mut().for_each(|v| *v = T::zero());
        }
        return;
    }
    let (rsa, csa) = a_layout.strides(m, k);
    let (rsb, csb) = b_layout.strides(k, n);
    // SAFETY: lengths were checked above against the logical extents, the
    // strides stay within those extents, and `c` is a distinct &mut borrow.
    unsafe {
        T::raw_gemm(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

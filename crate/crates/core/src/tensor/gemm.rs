use super::Scalar;

/// Strided read-only matrix view into a flat buffer.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a, T> {
    pub data: &'a [T],
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a, T> MatRef<'a, T> {
    /// Row-major `rows x cols` block starting at `offset`.
    pub fn row_major(data: &'a [T], offset: usize, rows: usize, cols: usize) -> Self {
        Self::strided(data, offset, rows, cols, cols, 1)
    }

    pub fn strided(data: &'a [T], offset: usize, rows: usize, cols: usize, rs: usize, cs: usize) -> Self {
        Self { data, offset, rows, cols, rs, cs }
    }

    pub fn t(self) -> Self {
        Self { rows: self.cols, cols: self.rows, rs: self.cs, cs: self.rs, ..self }
    }

    fn last_index(&self) -> Option<usize> {
        if self.rows == 0 || self.cols == 0 {
            None
        } else {
            Some(self.offset + (self.rows - 1) * self.rs + (self.cols - 1) * self.cs)
        }
    }
}

pub(crate) struct MatMut<'a, T> {
    pub data: &'a mut [T],
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a, T> MatMut<'a, T> {
    pub fn row_major(data: &'a mut [T], offset: usize, rows: usize, cols: usize) -> Self {
        Self::strided(data, offset, rows, cols, cols, 1)
    }

    pub fn strided(data: &'a mut [T], offset: usize, rows: usize, cols: usize, rs: usize, cs: usize) -> Self {
        Self { data, offset, rows, cols, rs, cs }
    }
}

/// `c = alpha * a @ b + beta * c`.
///
/// Each output entry accumulates over the inner dimension in ascending
/// order, so results are independent of how many rows are computed at once.
pub(crate) fn gemm<T: Scalar>(alpha: T, a: MatRef<'_, T>, b: MatRef<'_, T>, beta: T, c: MatMut<'_, T>) {
    assert_eq!(a.cols, b.rows, "gemm inner dimension");
    assert_eq!(a.rows, c.rows, "gemm output rows");
    assert_eq!(b.cols, c.cols, "gemm output cols");
    if let Some(last) = a.last_index() {
        assert!(last < a.data.len(), "gemm lhs view out of bounds");
    }
    if let Some(last) = b.last_index() {
        assert!(last < b.data.len(), "gemm rhs view out of bounds");
    }
    if c.rows == 0 || c.cols == 0 {
        return;
    }
    let c_last = c.offset + (c.rows - 1) * c.rs + (c.cols - 1) * c.cs;
    assert!(c_last < c.data.len(), "gemm output view out of bounds");
    if a.cols == 0 {
        // Empty inner dimension: the product is zero.
        for i in 0..c.rows {
            for j in 0..c.cols {
                let idx = c.offset + i * c.rs + j * c.cs;
                c.data[idx] = beta * c.data[idx];
            }
        }
        return;
    }
    // SAFETY: every view was bounds-checked above and `c` is a unique borrow
    // distinct from the shared borrows behind `a` and `b`.
    unsafe {
        T::gemm_raw(
            a.rows,
            a.cols,
            b.cols,
            alpha,
            a.data.as_ptr().add(a.offset),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr().add(b.offset),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.data.as_mut_ptr().add(c.offset),
            c.rs as isize,
            c.cs as isize,
        );
    }
}

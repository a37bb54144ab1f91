use crate::Float;

/// Strided view of a matrix living inside a flat buffer.
#[derive(Debug, Clone, Copy)]
pub(crate) struct MatRef {
    pub rows: usize,
    pub cols: usize,
    pub rs: isize,
    pub cs: isize,
    pub offset: usize,
}

impl MatRef {
    pub fn row_major(rows: usize, cols: usize) -> Self {
        Self { rows, cols, rs: cols as isize, cs: 1, offset: 0 }
    }

    pub fn at(mut self, offset: usize) -> Self {
        self.offset = offset;
        self
    }

    pub fn t(self) -> Self {
        Self { rows: self.cols, cols: self.rows, rs: self.cs, cs: self.rs, offset: self.offset }
    }

    /// Row-major matrix, transposed when `trans` is set.
    pub fn maybe_t(rows: usize, cols: usize, trans: bool) -> Self {
        let m = Self::row_major(rows, cols);
        if trans {
            m.t()
        } else {
            m
        }
    }

    fn last_index(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            return self.offset;
        }
        let r = (self.rows - 1) as isize * self.rs;
        let c = (self.cols - 1) as isize * self.cs;
        (self.offset as isize + r + c) as usize
    }
}

/// `c = alpha * a * b + beta * c`. When `beta` is zero `c` is not read.
pub(crate) fn gemm<T: Float>(
    alpha: T,
    a: &[T],
    am: MatRef,
    b: &[T],
    bm: MatRef,
    beta: T,
    c: &mut [T],
    cm: MatRef,
) {
    assert_eq!(am.cols, bm.rows, "gemm inner dimension");
    assert_eq!(am.rows, cm.rows, "gemm output rows");
    assert_eq!(bm.cols, cm.cols, "gemm output cols");
    if cm.rows == 0 || cm.cols == 0 {
        return;
    }
    if am.cols == 0 {
        // empty inner product: c = beta * c
        for i in 0..cm.rows {
            for j in 0..cm.cols {
                let idx = (cm.offset as isize + i as isize * cm.rs + j as isize * cm.cs) as usize;
                c[idx] = if beta == T::ZERO { T::ZERO } else { beta * c[idx] };
            }
        }
        return;
    }
    assert!(am.last_index() < a.len(), "gemm lhs out of bounds");
    assert!(bm.last_index() < b.len(), "gemm rhs out of bounds");
    assert!(cm.last_index() < c.len(), "gemm output out of bounds");
    // SAFETY: all strided accesses were bounds-checked above and the output
    // slice is exclusively borrowed.
    unsafe {
        T::gemm_raw(
            am.rows,
            am.cols,
            bm.cols,
            alpha,
            a.as_ptr().add(am.offset),
            am.rs,
            am.cs,
            b.as_ptr().add(bm.offset),
            bm.rs,
            bm.cs,
            beta,
            c.as_mut_ptr().add(cm.offset),
            cm.rs,
            cm.cs,
        );
    }
}

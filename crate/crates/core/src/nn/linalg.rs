//! Strided f64 matrix products and the FLOP tally used to audit them.

use std::cell::Cell;

thread_local! {
    static TALLY: Cell<Option<u64>> = const { Cell::new(None) };
}

/// Runs `f` and returns its result with the number of matrix-product FLOPs
/// (2·m·n·k per product) it issued on this thread.
pub fn count_flops<T>(f: impl FnOnce() -> T) -> (T, u64) {
    let previous = TALLY.with(|t| t.replace(Some(0)));
    let out = f();
    let counted = TALLY.with(|t| t.replace(previous)).unwrap_or(0);
    (out, counted)
}

/// A read-only strided view: element `(i, j)` lives at `offset + i*rs + j*cs`.
#[derive(Clone, Copy)]
pub(crate) struct View<'a> {
    pub data: &'a [f64],
    pub offset: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a> View<'a> {
    /// Row-major `rows x cols` block starting at `offset`.
    pub fn rows(data: &'a [f64], offset: usize, cols: usize) -> Self {
        View {
            data,
            offset,
            rs: cols,
            cs: 1,
        }
    }

    /// Transpose of the row-major block.
    pub fn t(self) -> Self {
        View {
            rs: self.cs,
            cs: self.rs,
            ..self
        }
    }

    fn last_index(&self, rows: usize, cols: usize) -> usize {
        self.offset + (rows - 1) * self.rs + (cols - 1) * self.cs
    }
}

/// `c = alpha * a·b + beta * c` for an `m x k` times `k x n` product, where `c`
/// is row-major with row stride `c_rs` starting at `c_off`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: View<'_>,
    b: View<'_>,
    beta: f64,
    c: &mut [f64],
    c_off: usize,
    c_rs: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    TALLY.with(|t| {
        if let Some(count) = t.get() {
            t.set(Some(count + 2 * (m * n * k) as u64));
        }
    });
    assert!(c_off + (m - 1) * c_rs + n <= c.len(), "gemm: output out of bounds");
    if k == 0 {
        for i in 0..m {
            for x in &mut c[c_off + i * c_rs..c_off + i * c_rs + n] {
                *x *= beta;
            }
        }
        return;
    }
    assert!(a.last_index(m, k) < a.data.len(), "gemm: lhs out of bounds");
    assert!(b.last_index(k, n) < b.data.len(), "gemm: rhs out of bounds");
    // SAFETY: every index touched by the kernel was bounds-checked above and the
    // output slice is uniquely borrowed.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr().add(a.offset),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr().add(b.offset),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.as_mut_ptr().add(c_off),
            c_rs as isize,
            1,
        );
    }
}

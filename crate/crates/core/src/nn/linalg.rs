//! Strided matrix views and an accumulating GEMM backed by `matrixmultiply`.
//! Both networks route every dense product through [`gemm_acc`].

#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a> {
    pub data: &'a [f64],
    pub offset: usize,
    pub row_stride: usize,
    pub col_stride: usize,
}

impl<'a> MatRef<'a> {
    pub fn new(data: &'a [f64], offset: usize, row_stride: usize, col_stride: usize) -> Self {
        Self {
            data,
            offset,
            row_stride,
            col_stride,
        }
    }

    /// Row-major `rows x cols` block starting at `offset` with leading dimension `ld`.
    pub fn row_major(data: &'a [f64], offset: usize, ld: usize) -> Self {
        Self::new(data, offset, ld, 1)
    }

    fn check(&self, rows: usize, cols: usize) {
        if rows > 0 && cols > 0 {
            let last = self.offset + (rows - 1) * self.row_stride + (cols - 1) * self.col_stride;
            assert!(last < self.data.len(), "matrix view out of bounds");
        }
    }
}

pub(crate) struct MatMut<'a> {
    pub data: &'a mut [f64],
    pub offset: usize,
    pub row_stride: usize,
    pub col_stride: usize,
}

impl<'a> MatMut<'a> {
    pub fn new(data: &'a mut [f64], offset: usize, row_stride: usize, col_stride: usize) -> Self {
        Self {
            data,
            offset,
            row_stride,
            col_stride,
        }
    }

    pub fn row_major(data: &'a mut [f64], offset: usize, ld: usize) -> Self {
        Self::new(data, offset, ld, 1)
    }
}

/// `c[m x n] += a[m x k] * b[k x n]`.
pub(crate) fn gemm_acc(m: usize, k: usize, n: usize, a: MatRef<'_>, b: MatRef<'_>, c: MatMut<'_>) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    a.check(m, k);
    b.check(k, n);
    let last = c.offset + (m - 1) * c.row_stride + (n - 1) * c.col_stride;
    assert!(last < c.data.len(), "output view out of bounds");
    if n == 1 {
        matvec_acc(m, k, a, b, c);
        return;
    }
    // SAFETY: every element addressed by the three views was bounds-checked
    // above, and `c` is uniquely borrowed.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr().add(a.offset),
            a.row_stride as isize,
            a.col_stride as isize,
            b.data.as_ptr().add(b.offset),
            b.row_stride as isize,
            b.col_stride as isize,
            1.0,
            c.data.as_mut_ptr().add(c.offset),
            c.row_stride as isize,
            c.col_stride as isize,
        );
    }
}

/// Single-column case: plain dot products, which beat the packing GEMM at
/// this size.
fn matvec_acc(m: usize, k: usize, a: MatRef<'_>, b: MatRef<'_>, c: MatMut<'_>) {
    for i in 0..m {
        let a_row = a.offset + i * a.row_stride;
        let mut acc = [0.0f64; 4];
        let mut p = 0;
        while p + 4 <= k {
            for (lane, slot) in acc.iter_mut().enumerate() {
                let q = p + lane;
                *slot += a.data[a_row + q * a.col_stride] * b.data[b.offset + q * b.row_stride];
            }
            p += 4;
        }
        let mut tail = 0.0;
        while p < k {
            tail += a.data[a_row + p * a.col_stride] * b.data[b.offset + p * b.row_stride];
            p += 1;
        }
        c.data[c.offset + i * c.row_stride] += (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail;
    }
}

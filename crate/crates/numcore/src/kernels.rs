//! Raw slice kernels shared by forward and backward passes.

/// Strided view of a row-major matrix buffer.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a> {
    pub data: &'a [f64],
    pub rows: usize,
    pub cols: usize,
    pub rs: isize,
    pub cs: isize,
}

impl<'a> MatRef<'a> {
    pub fn new(data: &'a [f64], rows: usize, cols: usize) -> Self {
        MatRef {
            data,
            rows,
            cols,
            rs: cols as isize,
            cs: 1,
        }
    }

    /// Column block `[c0, c0 + width)` of a row-major matrix with `stride` columns.
    pub fn block(data: &'a [f64], rows: usize, stride: usize, c0: usize, width: usize) -> Self {
        MatRef {
            data: &data[c0..],
            rows,
            cols: width,
            rs: stride as isize,
            cs: 1,
        }
    }

    pub fn t(self) -> Self {
        MatRef {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }
}

/// `c = beta * c + a · b`, where `c` is row-major with row stride `rsc`.
pub(crate) fn gemm(a: MatRef, b: MatRef, beta: f64, c: &mut [f64], rsc: usize) {
    debug_assert_eq!(a.cols, b.rows);
    let (m, k, n) = (a.rows, a.cols, b.cols);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for i in 0..m {
            for v in &mut c[i * rsc..i * rsc + n] {
                *v *= beta;
            }
        }
        return;
    }
    // Bounds: every addressed element lies inside the slices by construction of MatRef.
    assert!(c.len() >= (m - 1) * rsc + n);
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.rs,
            a.cs,
            b.data.as_ptr(),
            b.rs,
            b.cs,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            1,
        );
    }
}

pub(crate) fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    let u = C * (x + 0.044715 * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// In-place masked softmax of one row; returns false if every entry is masked.
pub(crate) fn softmax_row(row: &mut [f64], mask: Option<&[bool]>) -> bool {
    let mut max = f64::NEG_INFINITY;
    for (j, &v) in row.iter().enumerate() {
        if mask.map_or(true, |m| m[j]) && v > max {
            max = v;
        }
    }
    if max == f64::NEG_INFINITY {
        return false;
    }
    let mut sum = 0.0;
    for (j, v) in row.iter_mut().enumerate() {
        if mask.map_or(true, |m| m[j]) {
            *v = (*v - max).exp();
            sum += *v;
        } else {
            *v = 0.0;
        }
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
    true
}

//! Dense matrix-product kernels over row-major slices.

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};

/// Layout of a stored operand.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Layout {
    /// Stored as `[rows, cols]` of the logical operand.
    Normal,
    /// Stored transposed: `[cols, rows]` of the logical operand.
    Transposed,
}

fn view(data: &[f64], rows: usize, cols: usize, layout: Layout) -> ArrayView2<'_, f64> {
    match layout {
        Layout::Normal => ArrayView2::from_shape((rows, cols), data).expect("gemm operand shape"),
        Layout::Transposed => ArrayView2::from_shape((cols, rows), data)
            .expect("gemm operand shape")
            .reversed_axes(),
    }
}

/// `c = beta * c + a · b` where `a` is logically `m×k`, `b` is `k×n`, `c` is `m×n`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_layout: Layout,
    b: &[f64],
    b_layout: Layout,
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let av = view(a, m, k, a_layout);
    let bv = view(b, k, n, b_layout);
    let mut cv = ArrayViewMut2::from_shape((m, n), c).expect("gemm output shape");
    general_mat_mul(1.0, &av, &bv, beta, &mut cv);
}

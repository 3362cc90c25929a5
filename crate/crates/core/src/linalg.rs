//! Dense kernels shared by the attention, MLP and convolution paths.
//!
//! Row-parallel products split the left operand into fixed-size row chunks,
//! so every output element is produced by the same arithmetic no matter how
//! many workers the enclosing rayon pool has.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rayon::prelude::*;

use crate::real::Real;

/// Rows per parallel work item. Fixed so results are worker-count independent.
pub const ROW_CHUNK: usize = 256;

/// `a · b`, parallel over fixed row chunks of `a`.
pub fn matmul<T: Real>(a: ArrayView2<'_, T>, b: ArrayView2<'_, T>) -> Array2<T> {
    assert_eq!(a.ncols(), b.nrows(), "matmul inner dimensions");
    let mut out = Array2::<T>::zeros((a.nrows(), b.ncols()));
    if a.nrows() <= ROW_CHUNK {
        ndarray::linalg::general_mat_mul(T::one(), &a, &b, T::zero(), &mut out);
        return out;
    }
    out.axis_chunks_iter_mut(Axis(0), ROW_CHUNK)
        .into_par_iter()
        .zip(a.axis_chunks_iter(Axis(0), ROW_CHUNK).into_par_iter())
        .for_each(|(mut o, a_rows)| {
            ndarray::linalg::general_mat_mul(T::one(), &a_rows, &b, T::zero(), &mut o);
        });
    out
}

/// `x · w + bias` with `w` laid out (in, out).
pub fn linear<T: Real>(x: ArrayView2<'_, T>, w: ArrayView2<'_, T>, bias: ArrayView1<'_, T>) -> Array2<T> {
    let mut y = matmul(x, w);
    y += &bias;
    y
}

/// `aᵀ · b`: accumulates weight gradients over rows.
pub fn matmul_tn<T: Real>(a: ArrayView2<'_, T>, b: ArrayView2<'_, T>) -> Array2<T> {
    a.t().dot(&b)
}

/// `a · bᵀ`: propagates gradients back through a (in, out) weight.
pub fn matmul_nt<T: Real>(a: ArrayView2<'_, T>, b: ArrayView2<'_, T>) -> Array2<T> {
    let bt = b.t().as_standard_layout().into_owned();
    matmul(a, bt.view())
}

pub fn column_sums<T: Real>(a: ArrayView2<'_, T>) -> Array1<T> {
    a.sum_axis(Axis(0))
}

pub fn relu_inplace<T: Real>(a: &mut Array2<T>) {
    a.mapv_inplace(|v| if v > T::zero() { v } else { T::zero() });
}

/// Zeroes `grad` wherever the rectifier input was not positive.
pub fn relu_backward_inplace<T: Real>(grad: &mut Array2<T>, pre_activation: ArrayView2<'_, T>) {
    Zip::from(grad).and(&pre_activation).for_each(|g, &p| {
        if p <= T::zero() {
            *g = T::zero();
        }
    });
}

/// Copies selected rows of `src` into a new matrix.
pub fn gather_rows<T: Real>(src: ArrayView2<'_, T>, rows: &[usize]) -> Array2<T> {
    let mut out = Array2::<T>::zeros((rows.len(), src.ncols()));
    for (dst, &r) in out.outer_iter_mut().zip(rows) {
        let mut dst = dst;
        dst.assign(&src.row(r));
    }
    out
}

/// Adds the rows of `src` into `dst` at the given row indices.
pub fn scatter_add_rows<T: Real>(dst: &mut Array2<T>, rows: &[usize], src: ArrayView2<'_, T>) {
    for (row, &r) in src.outer_iter().zip(rows) {
        let mut d = dst.slice_mut(s![r, ..]);
        d += &row;
    }
}

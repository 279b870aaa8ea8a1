/// `c = beta * c + a · b` for an `m×k` by `k×n` product over strided views.
///
/// Strides are in elements; a transposed operand is expressed by swapping its
/// row and column strides. `c` is always dense row-major `m×n`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    assert!(c.len() >= m * n, "output buffer too small");
    if m == 0 || n == 0 {
        return;
    }
    if k > 0 {
        assert!(
            (m - 1) * a_strides.0 + (k - 1) * a_strides.1 < a.len(),
            "lhs view out of bounds"
        );
        assert!(
            (k - 1) * b_strides.0 + (n - 1) * b_strides.1 < b.len(),
            "rhs view out of bounds"
        );
    }
    // SAFETY: the asserts above keep every strided access inside the slices,
    // and `c` is a distinct mutable borrow of at least m*n elements.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

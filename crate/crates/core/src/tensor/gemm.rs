use super::Scalar;

/// `c = a·b` (or `c += a·b` when `accumulate`), with `a` being m×k and `b`
/// k×n after the optional transposes. All matrices are dense row-major.
#[allow(clippy::too_many_arguments)]
pub(crate) fn matmul<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    transpose_a: bool,
    b: &[T],
    transpose_b: bool,
    c: &mut [T],
    accumulate: bool,
) {
    assert!(a.len() >= m * k, "lhs too short for {m}x{k}");
    assert!(b.len() >= k * n, "rhs too short for {k}x{n}");
    assert!(c.len() >= m * n, "output too short for {m}x{n}");
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if transpose_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if transpose_b { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { T::one() } else { T::zero() };
    // SAFETY: the asserts above bound every index the strides can reach.
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

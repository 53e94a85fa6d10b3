//! Thin safe wrapper over `matrixmultiply::sgemm`.

/// Row-major operand: `data` holds either an `rows x cols` matrix or, when
/// `transposed`, a `cols x rows` matrix read through its transpose.
#[derive(Clone, Copy)]
pub(crate) struct Operand<'a> {
    pub data: &'a [f32],
    pub transposed: bool,
}

pub(crate) fn plain(data: &[f32]) -> Operand<'_> {
    Operand {
        data,
        transposed: false,
    }
}

pub(crate) fn trans(data: &[f32]) -> Operand<'_> {
    Operand {
        data,
        transposed: true,
    }
}

/// `c = beta * c + a * b` with `a: m x k`, `b: k x n`, `c: m x n`.
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: Operand<'_>, b: Operand<'_>, beta: f32, c: &mut [f32]) {
    assert_eq!(a.data.len(), m * k, "gemm: lhs size");
    assert_eq!(b.data.len(), k * n, "gemm: rhs size");
    assert_eq!(c.len(), m * n, "gemm: output size");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = if a.transposed { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b.transposed { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above guarantee every strided access stays within
    // the three slices, and `c` is exclusively borrowed.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

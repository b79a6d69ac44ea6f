//! Safe wrappers over `matrixmultiply`. Operands are addressed by
//! `(row_stride, col_stride)` pairs so transposes are free.

fn check(len: usize, rows: usize, cols: usize, (rs, cs): (isize, isize), what: &str) {
    assert!(rs >= 0 && cs >= 0, "{what}: negative strides are not supported");
    if rows == 0 || cols == 0 {
        return;
    }
    let last = (rows - 1) * rs as usize + (cols - 1) * cs as usize;
    assert!(last < len, "{what}: operand of length {len} too short for {rows}x{cols}");
}

macro_rules! gemm_fn {
    ($name:ident, $t:ty, $kernel:path) => {
        #[allow(clippy::too_many_arguments)]
        pub(crate) fn $name(
            m: usize,
            k: usize,
            n: usize,
            a: &[$t],
            a_strides: (isize, isize),
            b: &[$t],
            b_strides: (isize, isize),
            beta: $t,
            c: &mut [$t],
        ) {
            check(a.len(), m, k, a_strides, "lhs");
            check(b.len(), k, n, b_strides, "rhs");
            assert!(c.len() >= m * n, "output too short");
            if m == 0 || n == 0 {
                return;
            }
            // SAFETY: extents were bounds-checked above; `c` is row-major
            // contiguous with exactly `m * n` addressable elements.
            unsafe {
                $kernel(
                    m,
                    k,
                    n,
                    1.0,
                    a.as_ptr(),
                    a_strides.0,
                    a_strides.1,
                    b.as_ptr(),
                    b_strides.0,
                    b_strides.1,
                    beta,
                    c.as_mut_ptr(),
                    n as isize,
                    1,
                );
            }
        }
    };
}

gemm_fn!(sgemm, f32, matrixmultiply::sgemm);
gemm_fn!(dgemm, f64, matrixmultiply::dgemm);

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transposed_operand_via_strides() {
        // a = [[1,2],[3,4]], b^T where b stored as [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        dgemm(2, 2, 2, &a, (2, 1), &b, (1, 2), 0.0, &mut c);
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
    }
}

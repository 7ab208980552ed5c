//! Serial matrix kernels shared by forward and backward passes.
//!
//! All three layouts use an outer-product or dot-product loop order whose
//! inner loop runs over contiguous slices, so the compiler can vectorize
//! them. Each kernel either overwrites or accumulates into `out`; backward
//! passes accumulate because a node can fan out into several consumers.

use super::Scalar;

/// `out[m,n] (+)= a[m,k] · b[k,n]`
pub fn mm_nn<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T], acc: bool) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    if !acc {
        out.fill(T::zero());
    }
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &b_pj) in out_row.iter_mut().zip(b_row) {
                *o = *o + a_ip * b_pj;
            }
        }
    }
}

/// `out[m,n] (+)= a[m,k] · b[n,k]ᵀ`
pub fn mm_nt<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T], acc: bool) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (j, o) in out_row.iter_mut().enumerate() {
            let b_row = &b[j * k..(j + 1) * k];
            let mut s = T::zero();
            for (&x, &y) in a_row.iter().zip(b_row) {
                s = s + x * y;
            }
            *o = if acc { *o + s } else { s };
        }
    }
}

/// `out[k,n] (+)= a[m,k]ᵀ · b[m,n]`
pub fn mm_tn<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T], acc: bool) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    if !acc {
        out.fill(T::zero());
    }
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            let out_row = &mut out[p * n..(p + 1) * n];
            for (o, &b_ij) in out_row.iter_mut().zip(b_row) {
                *o = *o + a_ip * b_ij;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    // 2x3 · 3x2 worked by hand.
    const A: [f32; 6] = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
    const B: [f32; 6] = [7.0, 8.0, 9.0, 10.0, 11.0, 12.0];
    const AB: [f32; 4] = [58.0, 64.0, 139.0, 154.0];

    #[test]
    fn nn_matches_hand_product() {
        let mut out = [0.0f32; 4];
        mm_nn(&A, &B, 2, 3, 2, &mut out, false);
        assert_eq!(out, AB);
    }

    #[test]
    fn nt_matches_nn_on_transposed_operand() {
        // Bᵀ stored row-major is [7, 9, 11, 8, 10, 12] with shape 2x3.
        let bt = [7.0f32, 9.0, 11.0, 8.0, 10.0, 12.0];
        let mut out = [0.0f32; 4];
        mm_nt(&A, &bt, 2, 3, 2, &mut out, false);
        assert_eq!(out, AB);
    }

    #[test]
    fn tn_matches_hand_product() {
        // Aᵀ·A for the 2x3 matrix above, worked by hand.
        let mut out = [0.0f32; 9];
        mm_tn(&A, &A, 2, 3, 3, &mut out, false);
        let expect = [17.0, 22.0, 27.0, 22.0, 29.0, 36.0, 27.0, 36.0, 45.0];
        assert_eq!(out, expect);
    }

    #[test]
    fn accumulate_adds_on_top() {
        let mut out = [1.0f32; 4];
        mm_nn(&A, &B, 2, 3, 2, &mut out, true);
        assert_eq!(out, [59.0, 65.0, 140.0, 155.0]);
    }
}

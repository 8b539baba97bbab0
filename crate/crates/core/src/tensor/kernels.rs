//! Raw slice kernels behind the tape ops. Every loop nest runs in a fixed
//! order so results are bit-reproducible for a given binary.

use crate::scalar::Scalar;

/// C = A(m×k) · B(k×n), row-major. ikj order: the inner loop streams rows of
/// B and C and vectorizes.
pub fn matmul<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut c = vec![T::zero(); m * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (c_v, &b_v) in c_row.iter_mut().zip(b_row) {
                *c_v = *c_v + a_ip * b_v;
            }
        }
    }
    c
}

/// B^T copy: B(k×n) -> out(n×k).
pub fn transpose<T: Scalar>(b: &[T], k: usize, n: usize) -> Vec<T> {
    debug_assert_eq!(b.len(), k * n);
    let mut out = vec![T::zero(); n * k];
    for i in 0..k {
        for j in 0..n {
            out[j * k + i] = b[i * n + j];
        }
    }
    out
}

/// out += x, elementwise.
pub fn add_assign<T: Scalar>(out: &mut [T], x: &[T]) {
    debug_assert_eq!(out.len(), x.len());
    for (o, &v) in out.iter_mut().zip(x) {
        *o = *o + v;
    }
}

/// out += c * x, elementwise.
pub fn axpy<T: Scalar>(out: &mut [T], c: T, x: &[T]) {
    debug_assert_eq!(out.len(), x.len());
    for (o, &v) in out.iter_mut().zip(x) {
        *o = *o + c * v;
    }
}

pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut s = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        s = s + x * y;
    }
    s
}

//! Dense kernels. Every reduction accumulates in `f64`.

use super::Real;

/// `out (+)= a[n x k] * b[k x m]`.
pub fn matmul_into<T: Real>(a: &[T], b: &[T], n: usize, k: usize, m: usize, out: &mut [T], add: bool) {
    let mut acc = vec![0.0f64; m];
    for i in 0..n {
        acc.iter_mut().for_each(|v| *v = 0.0);
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            let av = av.f64();
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            for (acc_j, &bv) in acc.iter_mut().zip(brow) {
                *acc_j += av * bv.f64();
            }
        }
        let orow = &mut out[i * m..(i + 1) * m];
        if add {
            for (o, &v) in orow.iter_mut().zip(&acc) {
                *o = T::of(o.f64() + v);
            }
        } else {
            for (o, &v) in orow.iter_mut().zip(&acc) {
                *o = T::of(v);
            }
        }
    }
}

/// `out (+)= a[n x k] * b[m x k]^T`.
pub fn matmul_nt_into<T: Real>(a: &[T], b: &[T], n: usize, k: usize, m: usize, out: &mut [T], add: bool) {
    for i in 0..n {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..m {
            let brow = &b[j * k..(j + 1) * k];
            let s = dot(arow, brow);
            let o = &mut out[i * m + j];
            *o = if add { T::of(o.f64() + s) } else { T::of(s) };
        }
    }
}

/// `out (+)= a[n x k]^T * b[n x m]`, giving `k x m`.
pub fn matmul_tn_into<T: Real>(a: &[T], b: &[T], n: usize, k: usize, m: usize, out: &mut [T], add: bool) {
    let mut acc = vec![0.0f64; k * m];
    for i in 0..n {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * m..(i + 1) * m];
        for (p, &av) in arow.iter().enumerate() {
            let av = av.f64();
            if av == 0.0 {
                continue;
            }
            let accrow = &mut acc[p * m..(p + 1) * m];
            for (acc_j, &bv) in accrow.iter_mut().zip(brow) {
                *acc_j += av * bv.f64();
            }
        }
    }
    if add {
        for (o, &v) in out.iter_mut().zip(&acc) {
            *o = T::of(o.f64() + v);
        }
    } else {
        for (o, &v) in out.iter_mut().zip(&acc) {
            *o = T::of(v);
        }
    }
}

#[inline]
pub fn dot<T: Real>(a: &[T], b: &[T]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x.f64() * y.f64()).sum()
}

#[inline]
pub fn sum_sq<T: Real>(a: &[T]) -> f64 {
    a.iter().map(|&x| x.f64() * x.f64()).sum()
}

/// `dst += src` elementwise.
#[inline]
pub fn add_assign<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

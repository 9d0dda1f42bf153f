//! Matrix-multiply kernels.
//!
//! All three accumulate into `out` (callers pass zeroed or partially
//! accumulated buffers), and each output element is produced by a fixed
//! contraction order, so results never depend on vectorisation or chunking.
//! The `ikj` loop shape keeps the inner loop contiguous in both operands,
//! which lets the compiler vectorise the independent per-element updates
//! without any floating-point reassociation.

/// `out (m x n) += a (m x k) · b (k x n)`.
pub fn mm(out: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(out.len(), m * n);
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                // Adding av * b == +0.0 never changes a finite accumulation;
                // skipping pays off heavily on sparse binary feature rows.
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out (k x n) += aᵀ (k x m) · b (m x n)` with `a` given as `m x k`.
pub fn mm_at_b(out: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(out.len(), k * n);
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out (m x p) += a (m x c) · b (p x c)ᵀ` — rows of `a` dotted with rows of `b`.
pub fn mm_a_bt(out: &mut [f64], a: &[f64], b: &[f64], m: usize, c: usize, p: usize) {
    debug_assert_eq!(out.len(), m * p);
    debug_assert_eq!(a.len(), m * c);
    debug_assert_eq!(b.len(), p * c);
    for i in 0..m {
        let arow = &a[i * c..(i + 1) * c];
        let orow = &mut out[i * p..(i + 1) * p];
        for (j, o) in orow.iter_mut().enumerate() {
            *o += dot(arow, &b[j * c..(j + 1) * c]);
        }
    }
}

/// Dot product with four fixed accumulator lanes. The lane pattern is part of
/// the definition (not a scheduling artifact), so it is deterministic while
/// still giving the compiler independent chains to vectorise.
pub fn dot(x: &[f64], y: &[f64]) -> f64 {
    debug_assert_eq!(x.len(), y.len());
    let mut acc = [0.0f64; 4];
    let chunks = x.len() / 4;
    for i in 0..chunks {
        let xi = &x[i * 4..i * 4 + 4];
        let yi = &y[i * 4..i * 4 + 4];
        acc[0] += xi[0] * yi[0];
        acc[1] += xi[1] * yi[1];
        acc[2] += xi[2] * yi[2];
        acc[3] += xi[3] * yi[3];
    }
    let mut tail = 0.0;
    for i in chunks * 4..x.len() {
        tail += x[i] * y[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

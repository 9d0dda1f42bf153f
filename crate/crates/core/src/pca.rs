//! Two-component PCA by power iteration, for feature-space diagnostics.
//!
//! Rows are observations. The input is mean-centered, the covariance's top
//! eigenvector is found by power iteration, the matrix is deflated, and the
//! second eigenvector extracted the same way. Signs follow a fixed convention
//! (the largest-magnitude loading of each component is positive) so output is
//! reproducible across runs and platforms.

use crate::tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum PcaError {
    #[error("need at least 2 rows and 2 columns, got {rows}x{cols}")]
    TooSmall { rows: usize, cols: usize },
    #[error("input has rank < 2: second eigenvalue {second:.3e} vs first {first:.3e}")]
    RankDeficient { first: f64, second: f64 },
}

/// Projections of each row onto the first two principal components.
pub struct Projection {
    pub pc1: Vec<f64>,
    pub pc2: Vec<f64>,
}

fn power_iterate(cov: &[f64], d: usize, salt: u64) -> (Vec<f64>, f64) {
    use rand::Rng;
    let mut rng = crate::rng::stream(0x9ca, "pca-init", &[salt]);
    let mut v: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let norm = |x: &[f64]| x.iter().map(|a| a * a).sum::<f64>().sqrt();
    let n0 = norm(&v).max(1e-12);
    v.iter_mut().for_each(|x| *x /= n0);
    let mut lambda = 0.0;
    for _ in 0..500 {
        let mut w = vec![0.0; d];
        for i in 0..d {
            let mut acc = 0.0;
            for j in 0..d {
                acc += cov[i * d + j] * v[j];
            }
            w[i] = acc;
        }
        let wn = norm(&w);
        if wn < 1e-300 {
            return (v, 0.0);
        }
        w.iter_mut().for_each(|x| *x /= wn);
        let delta: f64 = w.iter().zip(&v).map(|(a, b)| (a - b).abs()).sum();
        v = w;
        lambda = wn;
        if delta < 1e-13 {
            break;
        }
    }
    (v, lambda)
}

fn fix_sign(v: &mut [f64]) {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[best].abs() {
            best = i;
        }
    }
    if v[best] < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

pub fn top2_components(x: &Tensor) -> Result<Projection, PcaError> {
    let (n, d) = x.shape();
    if n < 2 || d < 2 {
        return Err(PcaError::TooSmall { rows: n, cols: d });
    }
    // Mean-center.
    let mean = x.mean_row();
    let mut centered = x.clone();
    for r in 0..n {
        for c in 0..d {
            let v = centered.get(r, c) - mean.get(0, c);
            centered.set(r, c, v);
        }
    }
    // Covariance (unnormalized; scale does not change directions).
    let mut cov = vec![0.0; d * d];
    for r in 0..n {
        let row = centered.row(r);
        for i in 0..d {
            let ri = row[i];
            if ri == 0.0 {
                continue;
            }
            for j in 0..d {
                cov[i * d + j] += ri * row[j];
            }
        }
    }
    let (mut v1, l1) = power_iterate(&cov, d, 1);
    if l1 <= 0.0 {
        return Err(PcaError::RankDeficient { first: l1, second: 0.0 });
    }
    // Deflate and repeat.
    let mut deflated = cov.clone();
    for i in 0..d {
        for j in 0..d {
            deflated[i * d + j] -= l1 * v1[i] * v1[j];
        }
    }
    let (mut v2, l2) = power_iterate(&deflated, d, 2);
    if l2 <= l1 * 1e-9 {
        return Err(PcaError::RankDeficient { first: l1, second: l2 });
    }
    fix_sign(&mut v1);
    fix_sign(&mut v2);
    let project = |v: &[f64]| -> Vec<f64> {
        (0..n).map(|r| centered.row(r).iter().zip(v).map(|(a, b)| a * b).sum()).collect()
    };
    Ok(Projection { pc1: project(&v1), pc2: project(&v2) })
}

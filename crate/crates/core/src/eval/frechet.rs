use super::{EvalError, Result};

/// Added to both covariance diagonals before the square root.
pub const COV_REGULARIZER: f64 = 1e-6;

const MAX_ITERS: usize = 200;
const TOLERANCE: f64 = 1e-10;

/// Mean and unbiased covariance (`d×d`, row-major) of `rows`.
pub fn covariance(rows: &[Vec<f64>]) -> Result<(Vec<f64>, Vec<f64>)> {
    let d = rows.first().map_or(0, Vec::len);
    if rows.len() < 2 {
        return Err(EvalError::TooFewSamples {
            needed: 2,
            found: rows.len(),
        });
    }
    if let Some(bad) = rows.iter().find(|r| r.len() != d) {
        return Err(EvalError::Length {
            what: "feature row",
            expected: d,
            found: bad.len(),
        });
    }
    let n = rows.len() as f64;
    let mut mu = vec![0.0; d];
    for r in rows {
        for (m, &v) in mu.iter_mut().zip(r) {
            *m += v;
        }
    }
    mu.iter_mut().for_each(|m| *m /= n);
    let mut cov = vec![0.0; d * d];
    let mut c = vec![0.0; d];
    for r in rows {
        for (ci, (&v, &m)) in c.iter_mut().zip(r.iter().zip(&mu)) {
            *ci = v - m;
        }
        for i in 0..d {
            let ci = c[i];
            for (out, &cj) in cov[i * d..(i + 1) * d].iter_mut().zip(&c) {
                *out += ci * cj;
            }
        }
    }
    cov.iter_mut().for_each(|v| *v /= n - 1.0);
    Ok((mu, cov))
}

fn matmul(a: &[f64], b: &[f64], d: usize) -> Vec<f64> {
    let mut out = vec![0.0; d * d];
    for i in 0..d {
        for k in 0..d {
            let s = a[i * d + k];
            for (o, &bv) in out[i * d..(i + 1) * d].iter_mut().zip(&b[k * d..(k + 1) * d]) {
                *o += s * bv;
            }
        }
    }
    out
}

fn frobenius(a: &[f64]) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn symmetrize(a: &mut [f64], d: usize) {
    for i in 0..d {
        for j in i + 1..d {
            let m = 0.5 * (a[i * d + j] + a[j * d + i]);
            a[i * d + j] = m;
            a[j * d + i] = m;
        }
    }
}

/// Principal square root of a symmetric positive semi-definite `d×d`
/// matrix by the coupled Newton–Schulz iteration.
pub fn sqrtm_psd(a: &[f64], d: usize) -> Result<Vec<f64>> {
    let norm = frobenius(a);
    if norm == 0.0 {
        return Ok(vec![0.0; d * d]);
    }
    let mut y: Vec<f64> = a.iter().map(|v| v / norm).collect();
    let mut z = vec![0.0; d * d];
    (0..d).for_each(|i| z[i * d + i] = 1.0);
    for _ in 0..MAX_ITERS {
        let zy = matmul(&z, &y, d);
        let mut t: Vec<f64> = zy.iter().map(|v| -0.5 * v).collect();
        (0..d).for_each(|i| t[i * d + i] += 1.5);
        let ny = matmul(&y, &t, d);
        z = matmul(&t, &z, d);
        let delta = frobenius(&ny.iter().zip(&y).map(|(a, b)| a - b).collect::<Vec<_>>());
        y = ny;
        if delta <= TOLERANCE * frobenius(&y) {
            break;
        }
    }
    let scale = norm.sqrt();
    y.iter_mut().for_each(|v| *v *= scale);
    symmetrize(&mut y, d);
    let sq = matmul(&y, &y, d);
    let residual = frobenius(&sq.iter().zip(a).map(|(s, a)| s - a).collect::<Vec<_>>()) / norm;
    if residual.is_finite() && residual < 1e-8 {
        Ok(y)
    } else {
        Err(EvalError::NoConvergence { residual })
    }
}

/// `|μa−μb|² + Tr(Σa + Σb − 2(Σa Σb)^{1/2})` with both covariances
/// regularized by [`COV_REGULARIZER`]. The cross term is evaluated as
/// `Tr((Σa^{1/2} Σb Σa^{1/2})^{1/2})`, which has the same trace.
pub fn frechet_distance(mu_a: &[f64], cov_a: &[f64], mu_b: &[f64], cov_b: &[f64]) -> Result<f64> {
    let d = mu_a.len();
    if mu_b.len() != d || cov_a.len() != d * d || cov_b.len() != d * d {
        return Err(EvalError::Length {
            what: "feature statistics",
            expected: d,
            found: mu_b.len(),
        });
    }
    let reg = |c: &[f64]| {
        let mut c = c.to_vec();
        (0..d).for_each(|i| c[i * d + i] += COV_REGULARIZER);
        c
    };
    let (a, b) = (reg(cov_a), reg(cov_b));
    let sa = sqrtm_psd(&a, d)?;
    let mut m = matmul(&matmul(&sa, &b, d), &sa, d);
    symmetrize(&mut m, d);
    let sm = sqrtm_psd(&m, d)?;
    let trace = |x: &[f64]| (0..d).map(|i| x[i * d + i]).sum::<f64>();
    let mean_term: f64 = mu_a.iter().zip(mu_b).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok((mean_term + trace(&a) + trace(&b) - 2.0 * trace(&sm)).max(0.0))
}

/// Fréchet distance between Gaussian fits of two feature sets, each with at
/// least `dim + 1` rows.
pub fn frechet_feature_distance(feats_a: &[Vec<f64>], feats_b: &[Vec<f64>]) -> Result<f64> {
    let d = feats_a.first().map_or(0, Vec::len);
    for f in [feats_a, feats_b] {
        if f.len() < d + 1 || f.len() < 2 {
            return Err(EvalError::TooFewSamples {
                needed: (d + 1).max(2),
                found: f.len(),
            });
        }
    }
    let (ma, ca) = covariance(feats_a)?;
    let (mb, cb) = covariance(feats_b)?;
    frechet_distance(&ma, &ca, &mb, &cb)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_root_of_diagonal() {
        let a = [4.0, 0.0, 0.0, 9.0];
        let s = sqrtm_psd(&a, 2).unwrap();
        for (x, y) in s.iter().zip([2.0, 0.0, 0.0, 3.0]) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn too_few_rows_rejected() {
        let rows = vec![vec![0.0, 1.0], vec![1.0, 0.0]];
        assert!(matches!(
            frechet_feature_distance(&rows, &rows),
            Err(EvalError::TooFewSamples { needed: 3, .. })
        ));
    }

    #[test]
    fn shifted_means_only() {
        let a = [1.0, 0.0, 0.0, 1.0];
        let dist = frechet_distance(&[0.0, 0.0], &a, &[3.0, 4.0], &a).unwrap();
        assert!((dist - 25.0).abs() < 1e-8);
    }
}

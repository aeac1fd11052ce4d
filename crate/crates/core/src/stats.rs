//! Small summary-statistics helpers for replicated studies.

use nalgebra::DMatrix;

use crate::rng::RandomStream;

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unbiased sample variance (divisor `M - 1`).
pub fn variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() as f64 - 1.0)
}

/// Standard error of the mean.
pub fn std_error(xs: &[f64]) -> f64 {
    (variance(xs) / xs.len() as f64).sqrt()
}

pub fn mean_vector(rows: &[Vec<f64>]) -> Vec<f64> {
    let d = rows.first().map_or(0, Vec::len);
    let mut m = vec![0.0; d];
    for r in rows {
        for (a, b) in m.iter_mut().zip(r) {
            *a += b;
        }
    }
    m.iter_mut().for_each(|a| *a /= rows.len() as f64);
    m
}

/// Unbiased sample covariance of the rows (divisor `M - 1`), symmetrized.
pub fn covariance(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let d = rows.first().map_or(0, Vec::len);
    let m = mean_vector(rows);
    let mut c = DMatrix::<f64>::zeros(d, d);
    for r in rows {
        for i in 0..d {
            let di = r[i] - m[i];
            for j in 0..=i {
                c[(i, j)] += di * (r[j] - m[j]);
            }
        }
    }
    let denom = rows.len() as f64 - 1.0;
    for i in 0..d {
        for j in 0..=i {
            c[(i, j)] /= denom;
            c[(j, i)] = c[(i, j)];
        }
    }
    c
}

/// Trace of the sample covariance, without forming the matrix.
pub fn trace_covariance(rows: &[Vec<f64>]) -> f64 {
    let d = rows.first().map_or(0, Vec::len);
    (0..d)
        .map(|i| variance(&rows.iter().map(|r| r[i]).collect::<Vec<_>>()))
        .sum()
}

/// Eigenvalues of a symmetric matrix in ascending order.
pub fn symmetric_eigenvalues(m: &DMatrix<f64>) -> Vec<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let mut ev: Vec<f64> = sym.symmetric_eigenvalues().iter().cloned().collect();
    ev.sort_by(f64::total_cmp);
    ev
}

/// Percentile bootstrap interval of `statistic` over resampled replicate
/// indices.
pub fn bootstrap_ci(
    len: usize,
    statistic: impl Fn(&[usize]) -> f64,
    resamples: usize,
    level: f64,
    stream: &RandomStream,
) -> (f64, f64) {
    let mut rng = stream.rng();
    let mut idx = vec![0usize; len];
    let mut stats: Vec<f64> = (0..resamples)
        .map(|_| {
            idx.iter_mut().for_each(|i| *i = rng.below(len));
            statistic(&idx)
        })
        .collect();
    stats.sort_by(f64::total_cmp);
    let alpha = (1.0 - level) / 2.0;
    (quantile_sorted(&stats, alpha), quantile_sorted(&stats, 1.0 - alpha))
}

/// Linear-interpolation quantile of an ascending slice.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Least-squares slope of `ln y` on `ln x`.
pub fn log_log_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let (mx, my) = (mean(&lx), mean(&ly));
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}

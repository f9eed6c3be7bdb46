//! Correlation-and-distance weighted cell adjacency for dynamic convolution.

use crate::autodiff::gemm::gemm;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Cell graph `A^R` and its row-normalized copy.
#[derive(Clone, Debug)]
pub struct RegionalAdjacency {
    pub n: usize,
    /// Raw weights, `n × n` row-major.
    pub weights: Vec<f64>,
    /// Row-normalized `[n, n]`; all-zero rows stay zero.
    pub normalized: Tensor,
    pub lambda_r: f64,
    pub sigma_dist: f64,
}

/// Pearson correlation matrix of the columns of a `steps × n` row-major matrix.
///
/// Columns with zero variance correlate 0 with everything, themselves included.
pub fn pearson_matrix(values: &[f64], steps: usize, n: usize) -> Result<Vec<f64>> {
    if steps < 2 || values.len() != steps * n {
        return Err(Error::data(format!(
            "correlation needs at least 2 steps of {n} series, got {} values",
            values.len()
        )));
    }
    let mut centered = values.to_vec();
    for j in 0..n {
        let mean = (0..steps).map(|t| values[t * n + j]).sum::<f64>() / steps as f64;
        for t in 0..steps {
            centered[t * n + j] -= mean;
        }
    }
    let mut cov = vec![0.0; n * n];
    gemm(n, steps, n, &centered, true, &centered, false, &mut cov, 0.0);
    let scale: Vec<f64> = (0..n)
        .map(|j| {
            let ss = cov[j * n + j];
            let mag = (0..steps).map(|t| values[t * n + j].abs()).fold(0.0, f64::max);
            // sum of squares indistinguishable from rounding noise ⇒ constant series
            if ss <= (mag * 1e-12).powi(2) * steps as f64 {
                0.0
            } else {
                1.0 / ss.sqrt()
            }
        })
        .collect();
    // upper triangle mirrored so that the result is exactly symmetric
    let mut r = vec![0.0; n * n];
    for i in 0..n {
        r[i * n + i] = if scale[i] > 0.0 { 1.0 } else { 0.0 };
        for j in i + 1..n {
            let v = (cov[i * n + j] * scale[i] * scale[j]).clamp(-1.0, 1.0);
            r[i * n + j] = v;
            r[j * n + i] = v;
        }
    }
    Ok(r)
}

/// Population standard deviation over unordered pairs `i < j`.
///
/// Falls back to 1 m for fewer than two cells or coincident centers.
pub fn sigma_dist(dists: &[f64], n: usize) -> f64 {
    let pairs: Vec<f64> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).map(|(i, j)| dists[i * n + j]).collect();
    if pairs.is_empty() {
        return 1.0;
    }
    let mean = pairs.iter().sum::<f64>() / pairs.len() as f64;
    let var = pairs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / pairs.len() as f64;
    let s = var.sqrt();
    if s > 0.0 {
        s
    } else if mean > 0.0 {
        mean
    } else {
        1.0
    }
}

/// `r · exp(-(d/σ)²)` when `r > λ`, else 0.
pub fn adjacency_weight(r: f64, d: f64, sigma_dist: f64, lambda_r: f64) -> f64 {
    if r > lambda_r {
        r * (-(d / sigma_dist).powi(2)).exp()
    } else {
        0.0
    }
}

/// Builds `A^R` from population history (`steps × n`, row-major) and pairwise
/// cell distances (`n × n` meters).
pub fn build_regional_adjacency(
    z: &[f64],
    steps: usize,
    n: usize,
    dists: &[f64],
    lambda_r: f64,
) -> Result<RegionalAdjacency> {
    if dists.len() != n * n {
        return Err(Error::ShapeMismatch {
            op: "regional adjacency",
            lhs: vec![n, n],
            rhs: vec![dists.len()],
        });
    }
    let r = pearson_matrix(z, steps, n)?;
    let sigma = sigma_dist(dists, n);
    let weights: Vec<f64> = r
        .iter()
        .zip(dists)
        .map(|(&r, &d)| adjacency_weight(r, d, sigma, lambda_r))
        .collect();
    let mut norm = weights.clone();
    for row in norm.chunks_exact_mut(n) {
        let s: f64 = row.iter().sum();
        if s > 0.0 {
            row.iter_mut().for_each(|v| *v /= s);
        }
    }
    Ok(RegionalAdjacency {
        n,
        weights,
        normalized: Tensor::new(vec![n, n], norm)?,
        lambda_r,
        sigma_dist: sigma,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_pearson(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
        let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
        cov / (va * vb).sqrt()
    }

    #[test]
    fn formula_examples() {
        assert_eq!(adjacency_weight(1.0, 0.0, 300.0, 0.6), 1.0);
        assert_eq!(adjacency_weight(0.6, 0.0, 300.0, 0.6), 0.0);
        let w = adjacency_weight(0.8, 300.0, 300.0, 0.6);
        assert!((w - 0.8 * (-1.0f64).exp()).abs() < 1e-12);
        assert!((w - 0.29430).abs() < 1e-5);
    }

    #[test]
    fn pearson_matches_naive_and_handles_constant() {
        let steps = 7;
        let cols: Vec<Vec<f64>> = vec![
            (0..steps).map(|t| (t as f64).sin()).collect(),
            (0..steps).map(|t| (t as f64 * 0.7).cos() * 3.0 + 10.0).collect(),
            vec![4.2; steps],
        ];
        let values: Vec<f64> = (0..steps).flat_map(|t| cols.iter().map(move |c| c[t])).collect();
        let r = pearson_matrix(&values, steps, 3).unwrap();
        assert!((r[1] - naive_pearson(&cols[0], &cols[1])).abs() < 1e-12);
        assert_eq!(r[0], 1.0);
        assert_eq!(&r[6..9], &[0.0, 0.0, 0.0]);
        assert_eq!(r[2], 0.0);
    }

    #[test]
    fn rows_normalized_or_zero() {
        let steps = 5;
        let n = 3;
        // cell 2 is constant ⇒ its row is zero
        let z: Vec<f64> = (0..steps).flat_map(|t| [t as f64, 2.0 * t as f64 + 1.0, 7.0]).collect();
        let dists = vec![0.0, 150.0, 300.0, 150.0, 0.0, 150.0, 300.0, 150.0, 0.0];
        let adj = build_regional_adjacency(&z, steps, n, &dists, 0.6).unwrap();
        let a = adj.normalized.data();
        assert!((a[0] + a[1] + a[2] - 1.0).abs() < 1e-15);
        assert_eq!(&a[6..9], &[0.0, 0.0, 0.0]);
        assert_eq!(adj.weights[0], 1.0);
        let pairs = [150.0, 300.0, 150.0];
        let m = 200.0;
        let s = (pairs.iter().map(|d: &f64| (d - m).powi(2)).sum::<f64>() / 3.0).sqrt();
        assert!((adj.sigma_dist - s).abs() < 1e-12);
    }

    #[test]
    fn invariant_to_time_order() {
        let (steps, n) = (40, 4);
        let z: Vec<f64> = (0..steps * n).map(|i| ((i * 37 % 101) as f64).sqrt() + (i % n) as f64 * (i / n) as f64 * 0.1).collect();
        let dists: Vec<f64> = (0..n * n).map(|k| if k / n == k % n { 0.0 } else { 150.0 * ((k / n) as f64 - (k % n) as f64).abs() }).collect();
        let a = build_regional_adjacency(&z, steps, n, &dists, 0.0).unwrap();
        let mut rev = Vec::with_capacity(z.len());
        for t in (0..steps).rev() {
            rev.extend_from_slice(&z[t * n..(t + 1) * n]);
        }
        let b = build_regional_adjacency(&rev, steps, n, &dists, 0.0).unwrap();
        assert!(a.normalized.max_abs_diff(&b.normalized) < 1e-12);
    }
}

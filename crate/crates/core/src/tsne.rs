//! Exact (O(n²)) t-SNE for embedding visualization.
//!
//! Entirely in `f64` with fixed iteration order, so a given input + seed
//! always produces the same 2-D coordinates. This is a best-effort
//! visualization aid — no numeric contract beyond determinism.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synth::gaussian;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TsneConfig {
    pub perplexity: f64,
    pub iterations: usize,
    pub learning_rate: f64,
    /// P-value multiplier for the opening iterations.
    pub early_exaggeration: f64,
    /// Iterations that run exaggerated (and with low momentum).
    pub exaggeration_iters: usize,
    pub seed: u64,
}

impl Default for TsneConfig {
    fn default() -> Self {
        Self {
            perplexity: 30.0,
            iterations: 1000,
            learning_rate: 200.0,
            early_exaggeration: 12.0,
            exaggeration_iters: 250,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TsneResult {
    pub coords: Vec<[f64; 2]>,
    /// Perplexity actually used (may be reduced for small inputs).
    pub perplexity: f64,
    /// Set when the requested perplexity was too large for the input.
    pub warning: Option<String>,
}

/// Conditional distribution row for one point, with the precision found by
/// binary search so the row's perplexity matches the target.
fn p_conditional(dists: &[f64], i: usize, perplexity: f64) -> Vec<f64> {
    let n = dists.len();
    let log_perp = perplexity.ln();
    let (mut beta, mut beta_lo, mut beta_hi) = (1.0f64, 0.0f64, f64::INFINITY);
    let mut row = vec![0.0; n];
    for _ in 0..64 {
        let mut sum = 0.0;
        for j in 0..n {
            row[j] = if j == i { 0.0 } else { (-beta * dists[j]).exp() };
            sum += row[j];
        }
        // Shannon entropy of the row in nats.
        let mut entropy = 0.0;
        if sum > 0.0 {
            for j in 0..n {
                if row[j] > 0.0 {
                    let p = row[j] / sum;
                    entropy -= p * p.ln();
                }
            }
        }
        if (entropy - log_perp).abs() < 1e-7 {
            break;
        }
        if entropy > log_perp {
            // Too spread out → sharpen.
            beta_lo = beta;
            beta = if beta_hi.is_finite() { (beta + beta_hi) / 2.0 } else { beta * 2.0 };
        } else {
            beta_hi = beta;
            beta = (beta + beta_lo) / 2.0;
        }
    }
    let sum: f64 = row.iter().sum();
    if sum > 0.0 {
        for v in &mut row {
            *v /= sum;
        }
    }
    row
}

/// Embeds `points` (any equal dimension) into 2-D.
///
/// Needs at least 4 points. A perplexity above `(n−1)/3` is reduced to that
/// bound (floored at 1) and reported in the result's `warning`.
pub fn tsne(points: &[Vec<f64>], cfg: &TsneConfig) -> Result<TsneResult> {
    let n = points.len();
    if n < 4 {
        return Err(Error::Tsne(format!("need at least 4 points, got {n}")));
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(Error::Tsne("points have mixed dimensions".into()));
    }
    if !(cfg.perplexity > 0.0) || cfg.iterations == 0 {
        return Err(Error::Tsne("perplexity and iterations must be positive".into()));
    }

    let max_perp = ((n - 1) as f64 / 3.0).max(1.0);
    let (perplexity, warning) = if cfg.perplexity > max_perp {
        (
            max_perp,
            Some(format!(
                "perplexity {} too large for {n} points; reduced to {max_perp:.2}",
                cfg.perplexity
            )),
        )
    } else {
        (cfg.perplexity, None)
    };

    // Pairwise squared distances.
    let mut d2 = vec![vec![0.0f64; n]; n];
    for i in 0..n {
        for j in (i + 1)..n {
            let d: f64 = points[i]
                .iter()
                .zip(&points[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            d2[i][j] = d;
            d2[j][i] = d;
        }
    }

    // Symmetrized joint distribution.
    let mut p = vec![0.0f64; n * n];
    for i in 0..n {
        let row = p_conditional(&d2[i], i, perplexity);
        for j in 0..n {
            p[i * n + j] = row[j];
        }
    }
    let two_n = 2.0 * n as f64;
    for i in 0..n {
        for j in (i + 1)..n {
            let v = ((p[i * n + j] + p[j * n + i]) / two_n).max(1e-12);
            p[i * n + j] = v;
            p[j * n + i] = v;
        }
    }
    for i in 0..n {
        p[i * n + i] = 0.0;
    }

    // Small gaussian init, then gradient descent with momentum.
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut y: Vec<[f64; 2]> = (0..n)
        .map(|_| [1e-4 * gaussian(&mut rng), 1e-4 * gaussian(&mut rng)])
        .collect();
    let mut velocity = vec![[0.0f64; 2]; n];
    let mut gains = vec![[1.0f64; 2]; n];

    let mut w = vec![0.0f64; n * n];
    for iter in 0..cfg.iterations {
        let exaggerate = if iter < cfg.exaggeration_iters { cfg.early_exaggeration } else { 1.0 };
        let momentum = if iter < cfg.exaggeration_iters { 0.5 } else { 0.8 };

        // Student-t affinities in the embedding.
        let mut w_sum = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                let dx = y[i][0] - y[j][0];
                let dy = y[i][1] - y[j][1];
                let v = 1.0 / (1.0 + dx * dx + dy * dy);
                w[i * n + j] = v;
                w[j * n + i] = v;
                w_sum += 2.0 * v;
            }
        }

        for i in 0..n {
            let mut grad = [0.0f64; 2];
            for j in 0..n {
                if i == j {
                    continue;
                }
                let wij = w[i * n + j];
                let qij = wij / w_sum;
                let mult = (exaggerate * p[i * n + j] - qij) * wij;
                grad[0] += 4.0 * mult * (y[i][0] - y[j][0]);
                grad[1] += 4.0 * mult * (y[i][1] - y[j][1]);
            }
            for d in 0..2 {
                // Adaptive per-coordinate gains, as in the reference code.
                gains[i][d] = if grad[d].signum() != velocity[i][d].signum() {
                    gains[i][d] + 0.2
                } else {
                    (gains[i][d] * 0.8).max(0.01)
                };
                velocity[i][d] =
                    momentum * velocity[i][d] - cfg.learning_rate * gains[i][d] * grad[d];
            }
        }
        for i in 0..n {
            y[i][0] += velocity[i][0];
            y[i][1] += velocity[i][1];
        }
        // Keep the embedding centered.
        let mean = y.iter().fold([0.0f64; 2], |m, v| [m[0] + v[0] / n as f64, m[1] + v[1] / n as f64]);
        for v in &mut y {
            v[0] -= mean[0];
            v[1] -= mean[1];
        }
    }
    if y.iter().any(|v| !v[0].is_finite() || !v[1].is_finite()) {
        return Err(Error::Tsne("embedding diverged to non-finite coordinates".into()));
    }
    Ok(TsneResult { coords: y, perplexity, warning })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    /// Three well-separated gaussian blobs in 8-D.
    fn blobs(per: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut points = Vec::new();
        let mut labels = Vec::new();
        for c in 0..3usize {
            for _ in 0..per {
                let mut v = vec![0.0f64; 8];
                v[c] = 20.0;
                for x in &mut v {
                    *x += 0.3 * gaussian(&mut rng);
                }
                points.push(v);
                labels.push(c);
            }
        }
        let _ = rng.gen::<u64>();
        (points, labels)
    }

    #[test]
    fn same_seed_same_coordinates() {
        let (points, _) = blobs(8, 1);
        let cfg = TsneConfig { iterations: 120, perplexity: 5.0, ..Default::default() };
        let a = tsne(&points, &cfg).unwrap();
        let b = tsne(&points, &cfg).unwrap();
        assert_eq!(a.coords, b.coords);
        let c = tsne(&points, &TsneConfig { seed: 9, ..cfg }).unwrap();
        assert_ne!(a.coords, c.coords);
    }

    #[test]
    fn separated_blobs_stay_separated() {
        let (points, labels) = blobs(12, 2);
        let cfg = TsneConfig { iterations: 400, perplexity: 8.0, ..Default::default() };
        let out = tsne(&points, &cfg).unwrap();
        // Mean inter-centroid distance must exceed mean intra-cluster spread.
        let mut centroids = [[0.0f64; 2]; 3];
        let mut counts = [0usize; 3];
        for (c, &l) in out.coords.iter().zip(&labels) {
            centroids[l][0] += c[0];
            centroids[l][1] += c[1];
            counts[l] += 1;
        }
        for (c, &k) in centroids.iter_mut().zip(&counts) {
            c[0] /= k as f64;
            c[1] /= k as f64;
        }
        let spread: f64 = out
            .coords
            .iter()
            .zip(&labels)
            .map(|(c, &l)| {
                ((c[0] - centroids[l][0]).powi(2) + (c[1] - centroids[l][1]).powi(2)).sqrt()
            })
            .sum::<f64>()
            / out.coords.len() as f64;
        let mut inter = 0.0;
        let mut pairs = 0.0;
        for a in 0..3 {
            for b in (a + 1)..3 {
                inter += ((centroids[a][0] - centroids[b][0]).powi(2)
                    + (centroids[a][1] - centroids[b][1]).powi(2))
                .sqrt();
                pairs += 1.0;
            }
        }
        assert!(
            inter / pairs > spread,
            "inter-centroid {} vs intra spread {spread}",
            inter / pairs
        );
    }

    #[test]
    fn oversized_perplexity_is_reduced_with_warning() {
        let (points, _) = blobs(2, 3); // n = 6 → cap (6−1)/3 ≈ 1.67
        let cfg = TsneConfig { iterations: 30, perplexity: 30.0, ..Default::default() };
        let out = tsne(&points, &cfg).unwrap();
        assert!(out.perplexity < 2.0);
        assert!(out.warning.as_deref().unwrap_or("").contains("reduced"));
    }

    #[test]
    fn tiny_inputs_are_rejected() {
        let cfg = TsneConfig::default();
        assert!(tsne(&[vec![0.0], vec![1.0], vec![2.0]], &cfg).is_err());
        let mixed = vec![vec![0.0, 1.0], vec![1.0], vec![2.0, 0.0], vec![3.0, 1.0]];
        assert!(tsne(&mixed, &cfg).is_err());
    }

    #[test]
    fn conditional_rows_hit_the_target_perplexity() {
        let (points, _) = blobs(10, 4);
        let n = points.len();
        let mut d2 = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in 0..n {
                d2[i][j] = points[i]
                    .iter()
                    .zip(&points[j])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
            }
        }
        for i in 0..n {
            let row = p_conditional(&d2[i], i, 7.0);
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
            assert_eq!(row[i], 0.0);
            let entropy: f64 =
                -row.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>();
            assert!((entropy.exp() - 7.0).abs() < 1e-3, "perp {}", entropy.exp());
        }
    }
}

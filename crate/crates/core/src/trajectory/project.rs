//! 2-D projections: PCA and exact t-SNE.

use nalgebra::DMatrix;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Centered rows projected onto the top two right singular vectors. Each
/// axis is signed so its largest-magnitude loading is positive.
pub fn project_pca(x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (n, d) = x.shape();
    if n < 2 {
        return Err(Error::InvalidInput(format!("PCA needs at least 2 points, got {n}")));
    }
    if d == 0 {
        return Err(Error::InvalidInput("PCA needs at least one dimension".into()));
    }
    let mean = x.row_mean();
    let centered = DMatrix::from_fn(n, d, |r, c| x[(r, c)] - mean[c]);
    let svd = centered
        .clone()
        .try_svd(false, true, f64::EPSILON, 10_000)
        .ok_or_else(|| Error::Numerical("SVD did not converge in PCA".into()))?;
    let v_t = svd.v_t.expect("requested");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]).then(a.cmp(&b)));
    let mut out = DMatrix::zeros(n, 2);
    for (axis, &k) in order.iter().take(2).enumerate() {
        let mut v: Vec<f64> = v_t.row(k).iter().copied().collect();
        let lead = v.iter().copied().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
        if lead < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        for r in 0..n {
            out[(r, axis)] = centered.row(r).iter().zip(&v).map(|(a, b)| a * b).sum();
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TsneOptions {
    pub perplexity: f64,
    pub iterations: usize,
    pub learning_rate: f64,
    pub early_exaggeration: f64,
    pub exaggeration_iterations: usize,
    pub initial_momentum: f64,
    pub final_momentum: f64,
    pub momentum_switch: usize,
    pub seed: u64,
}

impl Default for TsneOptions {
    fn default() -> Self {
        Self {
            perplexity: 30.0,
            iterations: 1000,
            learning_rate: 200.0,
            early_exaggeration: 12.0,
            exaggeration_iterations: 250,
            initial_momentum: 0.5,
            final_momentum: 0.8,
            momentum_switch: 250,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TsneResult {
    pub coords: DMatrix<f64>,
    /// `(iteration, KL(P || Q))` every 50 iterations, against the
    /// unexaggerated affinities.
    pub kl: Vec<(usize, f64)>,
}

const PERPLEXITY_TOL: f64 = 1e-5;

fn squared_distances(x: &DMatrix<f64>) -> DMatrix<f64> {
    let n = x.nrows();
    let mut d = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in i + 1..n {
            let v = (x.row(i) - x.row(j)).norm_squared();
            d[(i, j)] = v;
            d[(j, i)] = v;
        }
    }
    d
}

/// Conditional affinities `p_{j|i}`; each row's Gaussian bandwidth is found
/// by bisection so its perplexity matches within 1e-5. Rows sum to 1.
pub fn input_affinities(x: &DMatrix<f64>, perplexity: f64) -> Result<DMatrix<f64>> {
    let n = x.nrows();
    if n < 2 {
        return Err(Error::InvalidInput(format!("t-SNE needs at least 2 points, got {n}")));
    }
    if !(perplexity > 0.0) || perplexity >= n as f64 {
        return Err(Error::InvalidInput(format!("perplexity {perplexity} must lie in (0, {n})")));
    }
    let d = squared_distances(x);
    let target = perplexity.ln();
    let mut p = DMatrix::zeros(n, n);
    let mut row = vec![0.0; n];
    for i in 0..n {
        let min_d = (0..n).filter(|&j| j != i).map(|j| d[(i, j)]).fold(f64::INFINITY, f64::min);
        // Entropy in nats of the row for precision `beta`.
        let eval = |beta: f64, row: &mut [f64]| {
            let mut sum = 0.0;
            for j in 0..n {
                row[j] = if j == i { 0.0 } else { (-(d[(i, j)] - min_d) * beta).exp() };
                sum += row[j];
            }
            let mut h = 0.0;
            for j in 0..n {
                row[j] /= sum;
                if row[j] > 0.0 {
                    h -= row[j] * row[j].ln();
                }
            }
            h
        };
        let (mut lo, mut hi) = (0.0, f64::INFINITY);
        let mut beta = 1.0;
        for _ in 0..200 {
            let h = eval(beta, &mut row);
            if (h - target).abs() < PERPLEXITY_TOL {
                break;
            }
            if h > target {
                lo = beta;
                beta = if hi.is_finite() { (beta + hi) / 2.0 } else { beta * 2.0 };
            } else {
                hi = beta;
                beta = (beta + lo) / 2.0;
            }
        }
        eval(beta, &mut row);
        for j in 0..n {
            p[(i, j)] = row[j];
        }
    }
    Ok(p)
}

fn kl_divergence(p: &DMatrix<f64>, y: &DMatrix<f64>) -> f64 {
    let n = p.nrows();
    let mut w = DMatrix::zeros(n, n);
    let mut z = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                let v = 1.0 / (1.0 + (y.row(i) - y.row(j)).norm_squared());
                w[(i, j)] = v;
                z += v;
            }
        }
    }
    let mut kl = 0.0;
    for i in 0..n {
        for j in 0..n {
            let pij = p[(i, j)];
            if i != j && pij > 0.0 {
                kl += pij * (pij / (w[(i, j)] / z).max(1e-300)).ln();
            }
        }
    }
    kl
}

/// Exact t-SNE with early exaggeration, momentum and per-coordinate gains.
/// Single-threaded; the layout is a deterministic function of the seed.
pub fn project_tsne(x: &DMatrix<f64>, opts: &TsneOptions) -> Result<TsneResult> {
    let n = x.nrows();
    let cond = input_affinities(x, opts.perplexity)?;
    let p = (&cond + cond.transpose()) / (2.0 * n as f64);
    let p = p.map(|v| v.max(1e-12));

    let mut r = rng::seeded(opts.seed);
    let normal = Normal::new(0.0, 1e-4).expect("valid normal");
    let mut y = DMatrix::from_fn(n, 2, |_, _| normal.sample(&mut r));
    let mut velocity = DMatrix::<f64>::zeros(n, 2);
    let mut gains = DMatrix::<f64>::from_element(n, 2, 1.0);
    let mut grad = DMatrix::<f64>::zeros(n, 2);
    let mut w = DMatrix::<f64>::zeros(n, n);
    let mut kl = Vec::new();

    for iter in 0..opts.iterations {
        let exaggeration = if iter < opts.exaggeration_iterations { opts.early_exaggeration } else { 1.0 };
        let momentum = if iter < opts.momentum_switch { opts.initial_momentum } else { opts.final_momentum };
        let mut z = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                let dy0 = y[(i, 0)] - y[(j, 0)];
                let dy1 = y[(i, 1)] - y[(j, 1)];
                let v = 1.0 / (1.0 + dy0 * dy0 + dy1 * dy1);
                w[(i, j)] = v;
                w[(j, i)] = v;
                z += 2.0 * v;
            }
        }
        grad.fill(0.0);
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                let m = 4.0 * (exaggeration * p[(i, j)] - w[(i, j)] / z) * w[(i, j)];
                grad[(i, 0)] += m * (y[(i, 0)] - y[(j, 0)]);
                grad[(i, 1)] += m * (y[(i, 1)] - y[(j, 1)]);
            }
        }
        for k in 0..2 * n {
            let (g, v) = (grad[k], velocity[k]);
            gains[k] = if (g > 0.0) != (v > 0.0) { gains[k] + 0.2 } else { (gains[k] * 0.8).max(0.01) };
            velocity[k] = momentum * v - opts.learning_rate * gains[k] * g;
            y[k] += velocity[k];
        }
        let mean = y.row_mean();
        for i in 0..n {
            y[(i, 0)] -= mean[0];
            y[(i, 1)] -= mean[1];
        }
        if (iter + 1) % 50 == 0 {
            kl.push((iter + 1, kl_divergence(&p, &y)));
        }
    }
    Ok(TsneResult { coords: y, kl })
}

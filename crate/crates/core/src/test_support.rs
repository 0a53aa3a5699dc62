//! Shared fixtures and independent oracles for unit tests.

use rand::Rng as _;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::dataset::ObservationSet;
use crate::rng::seeded;

/// Row-major `n x p` matrix `U V^T + noise` with standard-normal factors.
pub fn gaussian_low_rank(n: usize, p: usize, k: usize, noise: f64, seed: u64) -> (Vec<f64>, usize, usize) {
    let mut rng = seeded(seed);
    let u: Vec<f64> = (0..n * k).map(|_| StandardNormal.sample(&mut rng)).collect();
    let v: Vec<f64> = (0..p * k).map(|_| StandardNormal.sample(&mut rng)).collect();
    let eps = Normal::new(0.0, noise.max(0.0)).unwrap();
    let mut x = vec![0.0; n * p];
    for i in 0..n {
        for j in 0..p {
            let signal: f64 = (0..k).map(|r| u[i * k + r] * v[j * k + r]).sum();
            x[i * p + j] = signal + eps.sample(&mut rng);
        }
    }
    (x, n, p)
}

/// Full Poisson grid with log-means of rank `k`; returns the data and the
/// generating linear predictor (row-major).
pub fn poisson_low_rank(n: usize, p: usize, k: usize, seed: u64) -> (ObservationSet, Vec<f64>) {
    let mut rng = seeded(seed);
    let u: Vec<f64> = (0..n * k).map(|_| rng.random_range(0.5..1.5)).collect();
    let v: Vec<f64> = (0..p * k).map(|_| rng.random_range(0.5..1.5)).collect();
    let mut eta = vec![0.0; n * p];
    let mut cells = Vec::with_capacity(n * p);
    for i in 0..n {
        for j in 0..p {
            let e: f64 = (0..k).map(|r| u[i * k + r] * v[j * k + r]).sum::<f64>() + 0.5;
            eta[i * p + j] = e;
            let y = rand_distr::Poisson::new(e.exp()).unwrap().sample(&mut rng);
            cells.push((i, j, y));
        }
    }
    (ObservationSet::from_triplets(n, p, cells).unwrap(), eta)
}

pub fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    sab / (saa * sbb).sqrt()
}

/// Best rank-`k` approximation of a row-major matrix, via one-sided Jacobi
/// rotations (independent of the library's linear algebra).
pub fn truncated_svd_reconstruction(x: &[f64], n: usize, p: usize, k: usize) -> Vec<f64> {
    // Columns of `a` converge to U * diag(s); `v` accumulates the rotations.
    let mut a: Vec<Vec<f64>> = (0..p).map(|j| (0..n).map(|i| x[i * p + j]).collect()).collect();
    let mut v: Vec<Vec<f64>> = (0..p).map(|j| (0..p).map(|l| f64::from(j == l)).collect()).collect();
    for _sweep in 0..100 {
        let mut off = 0.0f64;
        for j in 0..p {
            for l in j + 1..p {
                let alpha: f64 = a[j].iter().map(|t| t * t).sum();
                let beta: f64 = a[l].iter().map(|t| t * t).sum();
                let gamma: f64 = a[j].iter().zip(&a[l]).map(|(s, t)| s * t).sum();
                if gamma == 0.0 {
                    continue;
                }
                off = off.max(gamma.abs() / (alpha * beta).sqrt());
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..n {
                    let (aj, al) = (a[j][i], a[l][i]);
                    a[j][i] = c * aj - s * al;
                    a[l][i] = s * aj + c * al;
                }
                for i in 0..p {
                    let (vj, vl) = (v[j][i], v[l][i]);
                    v[j][i] = c * vj - s * vl;
                    v[l][i] = s * vj + c * vl;
                }
            }
        }
        if off < 1e-15 {
            break;
        }
    }
    let mut order: Vec<usize> = (0..p).collect();
    let norms: Vec<f64> = a.iter().map(|c| c.iter().map(|t| t * t).sum::<f64>()).collect();
    order.sort_by(|&i, &j| norms[j].partial_cmp(&norms[i]).unwrap());
    let mut out = vec![0.0; n * p];
    for &c in order.iter().take(k) {
        for i in 0..n {
            for j in 0..p {
                out[i * p + j] += a[c][i] * v[c][j];
            }
        }
    }
    out
}

#[test]
fn jacobi_oracle_reproduces_full_rank() {
    let (x, n, p) = gaussian_low_rank(6, 4, 4, 0.0, 1);
    let r = truncated_svd_reconstruction(&x, n, p, 4);
    for (a, b) in x.iter().zip(&r) {
        assert!((a - b).abs() < 1e-12);
    }
}

//! Oracles shared by the integration tests. Nothing here calls into the
//! library's numerics.
#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

/// Best rank-`k` approximation of a row-major `n x p` matrix by one-sided
/// Jacobi rotations.
pub fn truncated_svd(x: &[f64], n: usize, p: usize, k: usize) -> Vec<f64> {
    let mut a: Vec<Vec<f64>> = (0..p).map(|j| (0..n).map(|i| x[i * p + j]).collect()).collect();
    let mut v: Vec<Vec<f64>> = (0..p).map(|j| (0..p).map(|l| f64::from(j == l)).collect()).collect();
    for _sweep in 0..100 {
        let mut off = 0.0f64;
        for j in 0..p {
            for l in j + 1..p {
                let aa: f64 = a[j].iter().map(|t| t * t).sum();
                let bb: f64 = a[l].iter().map(|t| t * t).sum();
                let ab: f64 = a[j].iter().zip(&a[l]).map(|(s, t)| s * t).sum();
                if ab == 0.0 {
                    continue;
                }
                off = off.max(ab.abs() / (aa * bb).sqrt());
                let zeta = (bb - aa) / (2.0 * ab);
                let t = if zeta == 0.0 {
                    1.0
                } else {
                    zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..n {
                    let (x1, x2) = (a[j][i], a[l][i]);
                    a[j][i] = c * x1 - s * x2;
                    a[l][i] = s * x1 + c * x2;
                }
                for i in 0..p {
                    let (x1, x2) = (v[j][i], v[l][i]);
                    v[j][i] = c * x1 - s * x2;
                    v[l][i] = s * x1 + c * x2;
                }
            }
        }
        if off < 1e-15 {
            break;
        }
    }
    let norms: Vec<f64> = a.iter().map(|c| c.iter().map(|t| t * t).sum()).collect();
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]));
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

/// Column means and the rank-`k` approximation of the column-centered matrix,
/// added back together.
pub fn centered_pca(x: &[f64], n: usize, p: usize, k: usize) -> Vec<f64> {
    let means: Vec<f64> = (0..p).map(|j| (0..n).map(|i| x[i * p + j]).sum::<f64>() / n as f64).collect();
    let centered: Vec<f64> = (0..n * p).map(|c| x[c] - means[c % p]).collect();
    let mut out = truncated_svd(&centered, n, p, k);
    for (c, o) in out.iter_mut().enumerate() {
        *o += means[c % p];
    }
    out
}

pub fn rel_frobenius(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    let den: f64 = b.iter().map(|y| y * y).sum();
    (num / den.max(f64::MIN_POSITIVE)).sqrt()
}

/// Quasi-Newton minimization with BFGS updates and a backtracking Armijo line
/// search. Returns the minimizer and the minimum.
pub fn bfgs<F>(f: F, x0: &[f64], max_iter: usize) -> (Vec<f64>, f64)
where
    F: Fn(&[f64], &mut [f64]) -> f64,
{
    let d = x0.len();
    let mut x = x0.to_vec();
    let mut g = vec![0.0; d];
    let mut fx = f(&x, &mut g);
    let mut h: Vec<f64> = (0..d * d).map(|c| f64::from(c / d == c % d)).collect();
    let mut g_new = vec![0.0; d];
    for _ in 0..max_iter {
        let gnorm = g.iter().map(|t| t * t).sum::<f64>().sqrt();
        if gnorm < 1e-12 {
            break;
        }
        let mut dir: Vec<f64> = (0..d).map(|r| -(0..d).map(|c| h[r * d + c] * g[c]).sum::<f64>()).collect();
        let mut slope: f64 = dir.iter().zip(&g).map(|(a, b)| a * b).sum();
        if slope >= 0.0 {
            h = (0..d * d).map(|c| f64::from(c / d == c % d)).collect();
            dir = g.iter().map(|t| -t).collect();
            slope = -gnorm * gnorm;
        }
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let trial: Vec<f64> = x.iter().zip(&dir).map(|(a, b)| a + step * b).collect();
            let ft = f(&trial, &mut g_new);
            if ft.is_finite() && ft <= fx + 1e-4 * step * slope {
                accepted = Some((trial, ft));
                break;
            }
            step *= 0.5;
        }
        let Some((x_new, f_new)) = accepted else { break };
        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy: f64 = s.iter().zip(&y).map(|(a, b)| a * b).sum();
        if sy > 1e-300 {
            let hy: Vec<f64> = (0..d).map(|r| (0..d).map(|c| h[r * d + c] * y[c]).sum()).collect();
            let yhy: f64 = y.iter().zip(&hy).map(|(a, b)| a * b).sum();
            let rho = 1.0 / sy;
            for r in 0..d {
                for c in 0..d {
                    h[r * d + c] += (1.0 + yhy * rho) * rho * s[r] * s[c] - rho * (hy[r] * s[c] + s[r] * hy[c]);
                }
            }
        }
        let done = (fx - f_new).abs() <= 1e-16 * fx.abs().max(1e-300);
        x = x_new;
        fx = f_new;
        g.copy_from_slice(&g_new);
        if done {
            break;
        }
    }
    (x, fx)
}

pub fn fpca_bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_fpca"))
}

pub fn run(args: &[&str]) -> Output {
    fpca_bin().args(args).output().expect("failed to launch fpca")
}

pub fn bundled(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("data").join(name)
}

/// Relative paths and contents of every file under `dir`, sorted by path.
pub fn read_tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).unwrap().to_path_buf();
                out.push((rel, std::fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

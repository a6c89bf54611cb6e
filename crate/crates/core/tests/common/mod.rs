//! Independent reference computations shared by the integration tests and
//! the acceptance runner. Nothing here calls into the library's algebra.

#![allow(dead_code)]

use num_complex::Complex64 as C64;
use rand::Rng;

/// Inverse of a small complex matrix by Gauss-Jordan elimination with
/// partial pivoting.
pub fn invert(m: &[Vec<C64>]) -> Vec<Vec<C64>> {
    let n = m.len();
    let mut a: Vec<Vec<C64>> = m.to_vec();
    let mut inv: Vec<Vec<C64>> = (0..n).map(|i| (0..n).map(|j| C64::new((i == j) as u8 as f64, 0.0)).collect()).collect();
    for col in 0..n {
        let pivot = (col..n).max_by(|&x, &y| a[x][col].norm().total_cmp(&a[y][col].norm())).unwrap();
        a.swap(col, pivot);
        inv.swap(col, pivot);
        let d = a[col][col];
        for j in 0..n {
            a[col][j] /= d;
            inv[col][j] /= d;
        }
        for r in 0..n {
            if r != col {
                let f = a[r][col];
                for j in 0..n {
                    let (ac, ic) = (a[col][j], inv[col][j]);
                    a[r][j] -= f * ac;
                    inv[r][j] -= f * ic;
                }
            }
        }
    }
    inv
}

/// `−(z − m)ᴴ P (z − m)`: log-density of a circular complex Gaussian with
/// precision matrix `P`, up to a constant.
pub fn log_density(z: &[C64], mean: &[C64], precision: &[Vec<C64>]) -> f64 {
    let d: Vec<C64> = z.iter().zip(mean).map(|(a, b)| a - b).collect();
    let mut q = C64::new(0.0, 0.0);
    for i in 0..d.len() {
        for j in 0..d.len() {
            q += d[i].conj() * precision[i][j] * d[j];
        }
    }
    -q.re
}

/// Mean and covariance of the normalized density `exp(log_f)` on `dim`
/// complex dimensions, by the trapezoid rule on a square grid of
/// `points` nodes per real axis over `[−half_width, half_width]`.
pub fn grid_moments(dim: usize, half_width: f64, points: usize, log_f: impl Fn(&[C64]) -> f64) -> (Vec<C64>, Vec<Vec<C64>>) {
    let real_dims = 2 * dim;
    let h = 2.0 * half_width / (points - 1) as f64;
    let axis: Vec<f64> = (0..points).map(|i| -half_width + i as f64 * h).collect();
    let mut idx = vec![0usize; real_dims];
    let mut z = vec![C64::new(0.0, 0.0); dim];
    let mut mass = 0.0;
    let mut first = vec![C64::new(0.0, 0.0); dim];
    let mut second = vec![vec![C64::new(0.0, 0.0); dim]; dim];
    loop {
        for k in 0..dim {
            z[k] = C64::new(axis[idx[2 * k]], axis[idx[2 * k + 1]]);
        }
        // Trapezoid weights: halve at each boundary node.
        let edge = idx.iter().filter(|&&i| i == 0 || i == points - 1).count();
        let w = log_f(&z).exp() * 0.5f64.powi(edge as i32);
        mass += w;
        for a in 0..dim {
            first[a] += z[a] * w;
            for b in 0..dim {
                second[a][b] += z[a] * z[b].conj() * w;
            }
        }
        let mut k = 0;
        loop {
            if k == real_dims {
                let mean: Vec<C64> = first.iter().map(|m| m / mass).collect();
                let cov = (0..dim)
                    .map(|a| (0..dim).map(|b| second[a][b] / mass - mean[a] * mean[b].conj()).collect())
                    .collect();
                return (mean, cov);
            }
            idx[k] += 1;
            if idx[k] < points {
                break;
            }
            idx[k] = 0;
            k += 1;
        }
    }
}

/// Random Hermitian positive definite matrix with eigenvalues in `[lo, hi]`.
pub fn random_hpd<R: Rng>(n: usize, lo: f64, hi: f64, rng: &mut R) -> Vec<Vec<C64>> {
    // Q from Gram-Schmidt on a random complex matrix, then Q Λ Qᴴ.
    let mut q: Vec<Vec<C64>> = Vec::new();
    while q.len() < n {
        let mut v: Vec<C64> = (0..n).map(|_| C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))).collect();
        for u in &q {
            let dot: C64 = u.iter().zip(&v).map(|(a, b)| a.conj() * b).sum();
            for (vi, ui) in v.iter_mut().zip(u) {
                *vi -= dot * ui;
            }
        }
        let norm = v.iter().map(|x| x.norm_sqr()).sum::<f64>().sqrt();
        if norm > 1e-3 {
            q.push(v.iter().map(|x| x / norm).collect());
        }
    }
    let lambda: Vec<f64> = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    (0..n)
        .map(|i| (0..n).map(|j| (0..n).map(|k| q[k][i] * q[k][j].conj() * lambda[k]).sum()).collect())
        .collect()
}

/// Generator taps from an octal string, MSB first: "133" → [1,0,1,1,0,1,1].
pub fn taps(octal: &str) -> Vec<u8> {
    let mut bits: Vec<u8> = octal
        .chars()
        .flat_map(|ch| {
            let d = ch.to_digit(8).unwrap() as u8;
            [(d >> 2) & 1, (d >> 1) & 1, d & 1]
        })
        .collect();
    while bits[0] == 0 {
        bits.remove(0);
    }
    bits
}

/// Terminated encoding written as a convolution: output `j` at time `t` is
/// `⊕_d g_j[d]·u[t − d]`, outputs interleaved per time step.
pub fn encode_by_convolution(u: &[u8], generators: &[&str]) -> Vec<u8> {
    let g: Vec<Vec<u8>> = generators.iter().map(|s| taps(s)).collect();
    let memory = g.iter().map(Vec::len).max().unwrap() - 1;
    let steps = u.len() + memory;
    let mut out = Vec::with_capacity(steps * g.len());
    for t in 0..steps {
        for gj in &g {
            let mut bit = 0;
            for (d, &tap) in gj.iter().enumerate() {
                if tap == 1 && t >= d && t - d < u.len() {
                    bit ^= u[t - d];
                }
            }
            out.push(bit);
        }
    }
    out
}

/// Exact bitwise posteriors by enumerating all `2^info_bits` codewords:
/// returns (info-bit P(1), coded-bit P(1)).
pub fn brute_force_map(prior_p1: &[f64], info_bits: usize, generators: &[&str]) -> (Vec<f64>, Vec<f64>) {
    let n = prior_p1.len();
    let logp1: Vec<f64> = prior_p1.iter().map(|p| p.ln()).collect();
    let logp0: Vec<f64> = prior_p1.iter().map(|p| (-p).ln_1p()).collect();
    let words: Vec<(Vec<u8>, Vec<u8>, f64)> = (0..1usize << info_bits)
        .map(|m| {
            let u: Vec<u8> = (0..info_bits).map(|i| ((m >> i) & 1) as u8).collect();
            let c = encode_by_convolution(&u, generators);
            assert_eq!(c.len(), n);
            let lw: f64 = c.iter().enumerate().map(|(i, &b)| if b == 1 { logp1[i] } else { logp0[i] }).sum();
            (u, c, lw)
        })
        .collect();
    let top = words.iter().map(|w| w.2).fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    let mut info = vec![0.0; info_bits];
    let mut coded = vec![0.0; n];
    for (u, c, lw) in &words {
        let w = (lw - top).exp();
        total += w;
        for (acc, &b) in info.iter_mut().zip(u) {
            *acc += w * b as f64;
        }
        for (acc, &b) in coded.iter_mut().zip(c) {
            *acc += w * b as f64;
        }
    }
    (info.iter().map(|x| x / total).collect(), coded.iter().map(|x| x / total).collect())
}

/// Linear MMSE estimate of `h` from `y = diag(x) h + n`, `h ~ CN(0, Σ)`,
/// `n ~ CN(0, σ²I)`, written the textbook way:
/// `ĥ = Σ Xᴴ (X Σ Xᴴ + σ²I)⁻¹ y`, `C = Σ − Σ Xᴴ (X Σ Xᴴ + σ²I)⁻¹ X Σ`.
pub fn lmmse(sigma: &[Vec<C64>], x: &[C64], y: &[C64], noise_var: f64) -> (Vec<C64>, Vec<Vec<C64>>) {
    let n = x.len();
    let xsx: Vec<Vec<C64>> = (0..n)
        .map(|i| (0..n).map(|j| x[i] * sigma[i][j] * x[j].conj() + if i == j { C64::new(noise_var, 0.0) } else { C64::new(0.0, 0.0) }).collect())
        .collect();
    let inv = invert(&xsx);
    // K = Σ Xᴴ (X Σ Xᴴ + σ²I)⁻¹
    let k: Vec<Vec<C64>> = (0..n).map(|i| (0..n).map(|j| (0..n).map(|m| sigma[i][m] * x[m].conj() * inv[m][j]).sum()).collect()).collect();
    let mean = (0..n).map(|i| (0..n).map(|j| k[i][j] * y[j]).sum()).collect();
    let cov = (0..n)
        .map(|i| (0..n).map(|j| sigma[i][j] - (0..n).map(|m| k[i][m] * x[m] * sigma[m][j]).sum::<C64>()).collect())
        .collect();
    (mean, cov)
}

pub fn rel_err(a: C64, b: C64, scale: f64) -> f64 {
    (a - b).norm() / scale.max(1e-300)
}

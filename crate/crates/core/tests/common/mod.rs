//! Oracles and fixtures shared by the integration tests.
#![allow(dead_code)]

use nalgebra::DMatrix;
use rand::Rng as _;
use rand_distr::StandardNormal;
use subspace_gmm::rng::{self, Rng};
use subspace_gmm::MomentMatrix;

pub fn normal(rng: &mut Rng) -> f64 {
    rng.sample(StandardNormal)
}

pub fn gaussian(rows: usize, cols: usize, rng: &mut Rng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| normal(rng))
}

/// Haar-ish random orthonormal `p × r` via QR of a Gaussian matrix.
pub fn random_orthonormal(p: usize, r: usize, rng: &mut Rng) -> DMatrix<f64> {
    gaussian(p, r, rng).qr().q()
}

/// Random PSD `m × m` matrix `G Gᵀ` with `G` Gaussian `m × k`.
pub fn random_psd(m: usize, k: usize, rng: &mut Rng) -> DMatrix<f64> {
    let g = gaussian(m, k, rng);
    &g * g.transpose()
}

/// Moment design `f_ℓ = μ_ℓ + Σ_k L_ℓk ξ_k` with `ξ_k ~ N(0, I_p)` i.i.d.
/// and `μ_ℓ = U* c_ℓ`, so `Σ* = (p − r) L Lᵀ` at the true subspace.
pub struct BlockDesign {
    pub p: usize,
    pub m: usize,
    pub truth: DMatrix<f64>,
    pub means: DMatrix<f64>,
    pub l: DMatrix<f64>,
}

impl BlockDesign {
    pub fn new(p: usize, m: usize, r: usize, seed: u64) -> Self {
        let mut rng = rng::substream(seed, &[1]);
        let truth = random_orthonormal(p, r, &mut rng);
        let c = gaussian(r, m, &mut rng) * 2.0;
        let means = &truth * c;
        // well-conditioned lower-triangular L with unit-scale diagonal
        let mut l = DMatrix::zeros(m, m);
        for i in 0..m {
            for j in 0..=i {
                l[(i, j)] = if i == j { 1.0 + 0.5 * rng.random::<f64>() } else { 0.5 * normal(&mut rng) };
            }
        }
        Self { p, m, truth, means, l }
    }

    pub fn sigma_star(&self) -> DMatrix<f64> {
        (&self.l * self.l.transpose()) * (self.p - self.truth.ncols()) as f64
    }

    /// Per-sample evaluations as consecutive column-major `p × m` blocks.
    pub fn sample(&self, n: usize, rng: &mut Rng) -> MomentMatrix {
        let (p, m) = (self.p, self.m);
        let mut stack = vec![0.0; n * p * m];
        let mut xi = vec![0.0; p * m];
        for block in stack.chunks_mut(p * m) {
            xi.iter_mut().for_each(|v| *v = normal(rng));
            for l in 0..m {
                let col = &mut block[l * p..(l + 1) * p];
                for (j, c) in col.iter_mut().enumerate() {
                    *c = self.means[(j, l)];
                }
                for k in 0..=l {
                    let coef = self.l[(l, k)];
                    if coef != 0.0 {
                        for (c, x) in col.iter_mut().zip(&xi[k * p..(k + 1) * p]) {
                            *c += coef * x;
                        }
                    }
                }
            }
        }
        MomentMatrix::from_evaluations(n, p, m, stack).expect("valid block design")
    }
}

/// Coefficients of `det(xI − A)` (highest degree first) by Faddeev–LeVerrier.
pub fn char_poly(a: &DMatrix<f64>) -> Vec<f64> {
    let n = a.nrows();
    let mut coeffs = vec![1.0];
    let mut m = DMatrix::<f64>::zeros(n, n);
    let eye = DMatrix::<f64>::identity(n, n);
    let mut c = 1.0;
    for k in 1..=n {
        m = a * &m + &eye * c;
        c = -(a * &m).trace() / k as f64;
        coeffs.push(c);
    }
    coeffs
}

fn horner(coeffs: &[f64], x: f64) -> f64 {
    coeffs.iter().fold(0.0, |acc, c| acc * x + c)
}

/// Real roots of the characteristic polynomial of a symmetric matrix, found
/// by scanning a Gershgorin interval for sign changes and bisecting each.
/// Descending order.
pub fn char_poly_eigenvalues(a: &DMatrix<f64>) -> Vec<f64> {
    let n = a.nrows();
    let coeffs = char_poly(a);
    let radius = (0..n)
        .map(|i| a[(i, i)].abs() + (0..n).filter(|&j| j != i).map(|j| a[(i, j)].abs()).sum::<f64>())
        .fold(0.0, f64::max);
    let (lo, hi) = (-radius - 1.0, radius + 1.0);
    let steps = 200_000;
    let mut roots = Vec::new();
    let mut prev_x = lo;
    let mut prev_f = horner(&coeffs, lo);
    for s in 1..=steps {
        let x = lo + (hi - lo) * s as f64 / steps as f64;
        let f = horner(&coeffs, x);
        if f == 0.0 {
            roots.push(x);
        } else if prev_f != 0.0 && (f < 0.0) != (prev_f < 0.0) {
            let (mut a0, mut b0, mut fa) = (prev_x, x, prev_f);
            for _ in 0..200 {
                let mid = 0.5 * (a0 + b0);
                let fm = horner(&coeffs, mid);
                if fm == 0.0 || b0 - a0 <= f64::EPSILON * mid.abs().max(1e-300) {
                    a0 = mid;
                    b0 = mid;
                    break;
                }
                if (fm < 0.0) == (fa < 0.0) {
                    a0 = mid;
                    fa = fm;
                } else {
                    b0 = mid;
                }
            }
            roots.push(0.5 * (a0 + b0));
        }
        prev_x = x;
        prev_f = f;
    }
    roots.sort_by(|x, y| y.partial_cmp(x).unwrap());
    roots
}

/// Gaussian elimination with partial pivoting; `None` if numerically singular.
pub fn solve(a: &DMatrix<f64>, b: &[f64]) -> Option<Vec<f64>> {
    let n = a.nrows();
    let mut m = a.clone();
    let mut x = b.to_vec();
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| m[(i, col)].abs().partial_cmp(&m[(j, col)].abs()).unwrap())?;
        if m[(piv, col)] == 0.0 {
            return None;
        }
        m.swap_rows(col, piv);
        x.swap(col, piv);
        for row in col + 1..n {
            let f = m[(row, col)] / m[(col, col)];
            for k in col..n {
                m[(row, k)] -= f * m[(col, k)];
            }
            x[row] -= f * x[col];
        }
    }
    for col in (0..n).rev() {
        let s: f64 = (col + 1..n).map(|k| m[(col, k)] * x[k]).sum();
        x[col] = (x[col] - s) / m[(col, col)];
    }
    Some(x)
}

/// Null vector of `A − λI` by inverse iteration with linear solves.
pub fn null_vector(a: &DMatrix<f64>, lambda: f64) -> DMatrix<f64> {
    let n = a.nrows();
    let shift = lambda + 1e-9 * a.amax().max(1.0);
    let shifted = a - DMatrix::<f64>::identity(n, n) * shift;
    let mut v: Vec<f64> = (0..n).map(|i| 1.0 + 0.1 * i as f64).collect();
    for _ in 0..4 {
        v = solve(&shifted, &v).expect("shifted matrix is invertible");
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= norm);
    }
    DMatrix::from_column_slice(n, 1, &v)
}

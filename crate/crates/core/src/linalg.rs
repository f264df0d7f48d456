//! Small dense complex linear algebra for per-frequency `I x I` problems.

use std::ops::{Index, IndexMut, Mul};

use ndarray::ArrayView2;
use num_complex::Complex64;
use thiserror::Error;

/// Reciprocal condition number below which a solve is refused.
pub const MIN_RCOND: f64 = 1e-13;

/// Variance floor applied wherever a power is divided by a variance.
pub const VARIANCE_FLOOR: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("no frames to average over")]
    NoFrames,
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("matrix is singular")]
    Singular,
    #[error("matrix is ill-conditioned (reciprocal condition estimate {rcond:.3e})")]
    IllConditioned { rcond: f64 },
}

/// Square complex matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct CMat {
    n: usize,
    data: Vec<Complex64>,
}

impl CMat {
    pub fn zeros(n: usize) -> Self {
        Self {
            n,
            data: vec![Complex64::new(0.0, 0.0); n * n],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n);
        for i in 0..n {
            m[(i, i)] = Complex64::new(1.0, 0.0);
        }
        m
    }

    pub fn from_fn(n: usize, mut f: impl FnMut(usize, usize) -> Complex64) -> Self {
        let mut m = Self::zeros(n);
        for r in 0..n {
            for c in 0..n {
                m[(r, c)] = f(r, c);
            }
        }
        m
    }

    pub fn from_diag(diag: &[Complex64]) -> Self {
        let mut m = Self::zeros(diag.len());
        for (i, &d) in diag.iter().enumerate() {
            m[(i, i)] = d;
        }
        m
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn as_slice(&self) -> &[Complex64] {
        &self.data
    }

    /// Conjugate transpose.
    pub fn hermitian(&self) -> Self {
        Self::from_fn(self.n, |r, c| self[(c, r)].conj())
    }

    pub fn column(&self, c: usize) -> Vec<Complex64> {
        (0..self.n).map(|r| self[(r, c)]).collect()
    }

    pub fn set_column(&mut self, c: usize, col: &[Complex64]) {
        for (r, &v) in col.iter().enumerate() {
            self[(r, c)] = v;
        }
    }

    pub fn mul_vec(&self, x: &[Complex64]) -> Vec<Complex64> {
        (0..self.n)
            .map(|r| {
                self.data[r * self.n..(r + 1) * self.n]
                    .iter()
                    .zip(x)
                    .map(|(a, b)| a * b)
                    .sum()
            })
            .collect()
    }

    pub fn trace(&self) -> Complex64 {
        (0..self.n).map(|i| self[(i, i)]).sum()
    }

    /// Maximum absolute column sum.
    pub fn norm1(&self) -> f64 {
        (0..self.n)
            .map(|c| (0..self.n).map(|r| self[(r, c)].norm()).sum::<f64>())
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.re.is_finite() && v.im.is_finite())
    }

    pub fn lu(&self) -> Result<Lu, LinalgError> {
        Lu::factor(self)
    }

    pub fn inverse(&self) -> Result<Self, LinalgError> {
        self.lu()?.inverse()
    }
}

impl Index<(usize, usize)> for CMat {
    type Output = Complex64;
    fn index(&self, (r, c): (usize, usize)) -> &Complex64 {
        &self.data[r * self.n + c]
    }
}

impl IndexMut<(usize, usize)> for CMat {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut Complex64 {
        &mut self.data[r * self.n + c]
    }
}

impl Mul for &CMat {
    type Output = CMat;
    fn mul(self, rhs: &CMat) -> CMat {
        assert_eq!(self.n, rhs.n, "matrix dimensions differ");
        let n = self.n;
        let mut out = CMat::zeros(n);
        for r in 0..n {
            for k in 0..n {
                let a = self[(r, k)];
                for c in 0..n {
                    out[(r, c)] += a * rhs[(k, c)];
                }
            }
        }
        out
    }
}

/// LU factorization with partial pivoting, `P A = L U`.
#[derive(Debug, Clone)]
pub struct Lu {
    lu: CMat,
    perm: Vec<usize>,
    odd_swaps: bool,
}

impl Lu {
    fn factor(a: &CMat) -> Result<Self, LinalgError> {
        let n = a.n;
        let mut lu = a.clone();
        let mut perm: Vec<usize> = (0..n).collect();
        let mut odd_swaps = false;
        for k in 0..n {
            let (pivot, mag) = (k..n)
                .map(|r| (r, lu[(r, k)].norm()))
                .fold((k, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
            if mag == 0.0 || !mag.is_finite() {
                return Err(LinalgError::Singular);
            }
            if pivot != k {
                for c in 0..n {
                    lu.data.swap(k * n + c, pivot * n + c);
                }
                perm.swap(k, pivot);
                odd_swaps = !odd_swaps;
            }
            let inv = lu[(k, k)].inv();
            for r in k + 1..n {
                let factor = lu[(r, k)] * inv;
                lu[(r, k)] = factor;
                for c in k + 1..n {
                    let u = lu[(k, c)];
                    lu[(r, c)] -= factor * u;
                }
            }
        }
        Ok(Self {
            lu,
            perm,
            odd_swaps,
        })
    }

    pub fn det(&self) -> Complex64 {
        let prod: Complex64 = (0..self.lu.n).map(|i| self.lu[(i, i)]).product();
        if self.odd_swaps {
            -prod
        } else {
            prod
        }
    }

    pub fn logdet_abs(&self) -> f64 {
        (0..self.lu.n).map(|i| self.lu[(i, i)].norm().ln()).sum()
    }

    pub fn solve(&self, b: &[Complex64]) -> Vec<Complex64> {
        let n = self.lu.n;
        let mut x: Vec<Complex64> = self.perm.iter().map(|&p| b[p]).collect();
        for r in 0..n {
            for c in 0..r {
                let l = self.lu[(r, c)];
                let xc = x[c];
                x[r] -= l * xc;
            }
        }
        for r in (0..n).rev() {
            for c in r + 1..n {
                let u = self.lu[(r, c)];
                let xc = x[c];
                x[r] -= u * xc;
            }
            x[r] /= self.lu[(r, r)];
        }
        x
    }

    pub fn inverse(&self) -> Result<CMat, LinalgError> {
        let n = self.lu.n;
        let mut inv = CMat::zeros(n);
        let mut e = vec![Complex64::new(0.0, 0.0); n];
        for c in 0..n {
            e.iter_mut().for_each(|v| *v = Complex64::new(0.0, 0.0));
            e[c] = Complex64::new(1.0, 0.0);
            inv.set_column(c, &self.solve(&e));
        }
        if inv.is_finite() {
            Ok(inv)
        } else {
            Err(LinalgError::Singular)
        }
    }
}

/// `log |det W|`.
pub fn logdet_abs(w: &CMat) -> Result<f64, LinalgError> {
    Ok(w.lu()?.logdet_abs())
}

/// Reciprocal 1-norm condition number, `1 / (|A|_1 |A^-1|_1)`.
pub fn rcond(a: &CMat) -> Result<f64, LinalgError> {
    let inv = a.inverse()?;
    Ok(1.0 / (a.norm1() * inv.norm1()))
}

/// Solves `A x = b`, refusing matrices whose reciprocal condition estimate
/// falls below [`MIN_RCOND`].
pub fn solve(a: &CMat, b: &[Complex64]) -> Result<Vec<Complex64>, LinalgError> {
    if b.len() != a.n {
        return Err(LinalgError::Dimension(format!(
            "rhs length {} for {}x{} matrix",
            b.len(),
            a.n,
            a.n
        )));
    }
    let lu = a.lu()?;
    let inv = lu.inverse()?;
    let rc = 1.0 / (a.norm1() * inv.norm1());
    if !(rc >= MIN_RCOND) {
        return Err(LinalgError::IllConditioned { rcond: rc });
    }
    Ok(lu.solve(b))
}

/// Canonical basis vector `e_j` of length `n`.
pub fn basis_vector(n: usize, j: usize) -> Vec<Complex64> {
    let mut e = vec![Complex64::new(0.0, 0.0); n];
    e[j] = Complex64::new(1.0, 0.0);
    e
}

/// Hermitian inner product `a^H b`.
pub fn dot_h(a: &[Complex64], b: &[Complex64]) -> Complex64 {
    a.iter().zip(b).map(|(x, y)| x.conj() * y).sum()
}

/// Quadratic form `w^H A w`, real part.
pub fn quad_form(a: &CMat, w: &[Complex64]) -> f64 {
    dot_h(w, &a.mul_vec(w)).re
}

/// Variance-weighted spatial covariance of one frequency bin.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedCovariance {
    pub sigma: CMat,
    pub weight_count: usize,
}

impl WeightedCovariance {
    /// Adds `1e-10 * trace / I` to the diagonal.
    pub fn regularized(&self) -> Self {
        let n = self.sigma.dim();
        let load = 1e-10 * self.sigma.trace().re / n as f64;
        let mut sigma = self.sigma.clone();
        for i in 0..n {
            sigma[(i, i)] += load;
        }
        Self {
            sigma,
            weight_count: self.weight_count,
        }
    }
}

/// `(1/N) sum_n x_n x_n^H / max(v_n, floor)` for `x` given as an `I x N` view.
pub fn weighted_cov(
    x: ArrayView2<'_, Complex64>,
    v: &[f64],
    floor: f64,
) -> Result<WeightedCovariance, LinalgError> {
    let (dim, frames) = x.dim();
    if frames == 0 {
        return Err(LinalgError::NoFrames);
    }
    if v.len() != frames {
        return Err(LinalgError::Dimension(format!(
            "{} weights for {} frames",
            v.len(),
            frames
        )));
    }
    let mut sigma = CMat::zeros(dim);
    for (n, &vn) in v.iter().enumerate() {
        let w = 1.0 / vn.max(floor);
        for r in 0..dim {
            let xr = x[(r, n)] * w;
            for c in r..dim {
                sigma[(r, c)] += xr * x[(c, n)].conj();
            }
        }
    }
    let scale = 1.0 / frames as f64;
    for r in 0..dim {
        sigma[(r, r)] = Complex64::new(sigma[(r, r)].re * scale, 0.0);
        for c in r + 1..dim {
            let val = sigma[(r, c)] * scale;
            sigma[(r, c)] = val;
            sigma[(c, r)] = val.conj();
        }
    }
    Ok(WeightedCovariance {
        sigma,
        weight_count: frames,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn random_mat(rng: &mut ChaCha8Rng, n: usize) -> CMat {
        CMat::from_fn(n, |_, _| c(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
    }

    #[test]
    fn logdet_of_simple_matrices() {
        assert_eq!(logdet_abs(&CMat::identity(3)).unwrap(), 0.0);
        let d = CMat::from_diag(&[c(2.0, 0.0), c(3.0, 0.0)]);
        assert!((logdet_abs(&d).unwrap() - 6f64.ln()).abs() < 1e-15);
        assert_eq!(logdet_abs(&CMat::zeros(2)), Err(LinalgError::Singular));
    }

    #[test]
    fn logdet_matches_closed_form_2x2() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let a = random_mat(&mut rng, 2);
            let det = a[(0, 0)] * a[(1, 1)] - a[(0, 1)] * a[(1, 0)];
            assert!((logdet_abs(&a).unwrap() - det.norm().ln()).abs() < 1e-12);
            assert!((a.lu().unwrap().det() - det).norm() < 1e-12);
        }
    }

    #[test]
    fn logdet_is_additive() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for n in 1..6 {
            let a = random_mat(&mut rng, n);
            let b = random_mat(&mut rng, n);
            let lhs = logdet_abs(&(&a * &b)).unwrap();
            let rhs = logdet_abs(&a).unwrap() + logdet_abs(&b).unwrap();
            assert!((lhs - rhs).abs() < 1e-10);
        }
    }

    #[test]
    fn solve_has_small_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for n in 1..8 {
            let a = random_mat(&mut rng, n);
            for j in 0..n {
                let e = basis_vector(n, j);
                let x = solve(&a, &e).unwrap();
                let r = a.mul_vec(&x);
                let res: f64 = r.iter().zip(&e).map(|(p, q)| (p - q).norm_sqr()).sum();
                assert!(res.sqrt() < 1e-10);
            }
        }
    }

    #[test]
    fn solve_refuses_ill_conditioned() {
        let a = CMat::from_fn(2, |r, col| {
            if r == 1 && col == 1 {
                c(1.0 + 1e-15, 0.0)
            } else {
                c(1.0, 0.0)
            }
        });
        match solve(&a, &basis_vector(2, 0)) {
            Err(LinalgError::IllConditioned { rcond }) => assert!(rcond < MIN_RCOND),
            Err(LinalgError::Singular) => {}
            other => panic!("expected refusal, got {other:?}"),
        }
    }

    #[test]
    fn weighted_cov_identity_case() {
        // Rows of an orthonormal basis scaled by sqrt(N): here the DFT matrix.
        let n = 4;
        let x = Array2::from_shape_fn((n, n), |(r, k)| {
            Complex64::from_polar(1.0, 2.0 * std::f64::consts::PI * (r * k) as f64 / n as f64)
        });
        let cov = weighted_cov(x.view(), &[1.0; 4], VARIANCE_FLOOR).unwrap();
        for r in 0..n {
            for col in 0..n {
                let want = if r == col { 1.0 } else { 0.0 };
                assert!((cov.sigma[(r, col)] - c(want, 0.0)).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn weighted_cov_matches_direct_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let x = Array2::from_shape_fn((2, 3), |_| {
            c(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
        });
        let v: Vec<f64> = (0..3).map(|_| rng.gen_range(0.1..2.0)).collect();
        let cov = weighted_cov(x.view(), &v, VARIANCE_FLOOR).unwrap();
        for r in 0..2 {
            for col in 0..2 {
                let mut want = c(0.0, 0.0);
                for t in 0..3 {
                    want += x[(r, t)] * x[(col, t)].conj() / v[t];
                }
                want /= 3.0;
                assert!((cov.sigma[(r, col)] - want).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn weighted_cov_homogeneous_in_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let x = Array2::from_shape_fn((3, 10), |_| {
            c(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
        });
        let v: Vec<f64> = (0..10).map(|_| rng.gen_range(0.1..2.0)).collect();
        let alpha = 4.0;
        let scaled: Vec<f64> = v.iter().map(|x| x * alpha).collect();
        let a = weighted_cov(x.view(), &v, VARIANCE_FLOOR).unwrap();
        let b = weighted_cov(x.view(), &scaled, VARIANCE_FLOOR).unwrap();
        for (p, q) in a.sigma.as_slice().iter().zip(b.sigma.as_slice()) {
            assert_eq!(*p / alpha, *q);
        }
    }

    #[test]
    fn weighted_cov_floors_and_rejects_empty() {
        let x = Array2::from_elem((1, 2), c(1.0, 0.0));
        let cov = weighted_cov(x.view(), &[0.0, -1.0], 0.5).unwrap();
        assert!((cov.sigma[(0, 0)].re - 2.0).abs() < 1e-15);
        let empty = Array2::<Complex64>::zeros((2, 0));
        assert_eq!(
            weighted_cov(empty.view(), &[], VARIANCE_FLOOR),
            Err(LinalgError::NoFrames)
        );
    }

    #[test]
    fn weighted_cov_is_hermitian_psd() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let x = Array2::from_shape_fn((2, 7), |_| {
            c(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
        });
        let v: Vec<f64> = (0..7).map(|_| rng.gen_range(0.01..2.0)).collect();
        let s = weighted_cov(x.view(), &v, VARIANCE_FLOOR).unwrap().sigma;
        assert_eq!(s[(0, 1)], s[(1, 0)].conj());
        // 2x2 Hermitian eigenvalues in closed form.
        let (a, d, b) = (s[(0, 0)].re, s[(1, 1)].re, s[(0, 1)].norm());
        let min_eig = 0.5 * (a + d) - (0.25 * (a - d).powi(2) + b * b).sqrt();
        assert!(min_eig >= -1e-10);
    }
}

use ndarray::{Array2, Array3, ArrayView2, ArrayView3, Axis, Zip};
use num_complex::Complex64;
use rayon::prelude::*;

use super::SeparationError;
use crate::linalg::{self, basis_vector, logdet_abs, quad_form, CMat, LinalgError, VARIANCE_FLOOR};

/// Per-frequency demixing matrices `W(f) = [w_1(f) .. w_I(f)]`; source `j`
/// is recovered as `y_j = w_j^H x`.
#[derive(Debug, Clone, PartialEq)]
pub struct DemixingStack {
    mats: Vec<CMat>,
    pub reference_channel: usize,
}

impl DemixingStack {
    pub fn identity(bins: usize, channels: usize) -> Self {
        Self {
            mats: vec![CMat::identity(channels); bins],
            reference_channel: 0,
        }
    }

    pub fn from_matrices(mats: Vec<CMat>, reference_channel: usize) -> Result<Self, SeparationError> {
        let dim = mats
            .first()
            .map(CMat::dim)
            .ok_or_else(|| SeparationError::Shape("no frequency bins".into()))?;
        if mats.iter().any(|m| m.dim() != dim) {
            return Err(SeparationError::Shape("matrices differ in size".into()));
        }
        if reference_channel >= dim {
            return Err(SeparationError::Shape(format!(
                "reference channel {reference_channel} out of range for {dim} channels"
            )));
        }
        Ok(Self {
            mats,
            reference_channel,
        })
    }

    pub fn bins(&self) -> usize {
        self.mats.len()
    }

    pub fn channels(&self) -> usize {
        self.mats[0].dim()
    }

    pub fn matrix(&self, f: usize) -> &CMat {
        &self.mats[f]
    }

    pub fn matrices(&self) -> &[CMat] {
        &self.mats
    }

    fn check(&self, x: ArrayView3<'_, Complex64>) -> Result<(), SeparationError> {
        let (bins, _, channels) = x.dim();
        if bins != self.bins() || channels != self.channels() {
            return Err(SeparationError::Shape(format!(
                "observations are {bins} bins x {channels} channels, demixing is {} x {}",
                self.bins(),
                self.channels()
            )));
        }
        Ok(())
    }

    /// Separated coefficients `y(f, n) = W^H(f) x(f, n)`, laid out
    /// `(bin, frame, source)`.
    pub fn apply(&self, x: ArrayView3<'_, Complex64>) -> Result<Array3<Complex64>, SeparationError> {
        self.check(x)?;
        let mut y = Array3::zeros(x.dim());
        Zip::from(y.outer_iter_mut())
            .and(x.outer_iter())
            .and(&self.mats)
            .par_for_each(|mut yf, xf, w| {
                let wh = w.hermitian();
                for (mut yn, xn) in yf.outer_iter_mut().zip(xf.outer_iter()) {
                    let xv = xn.to_vec();
                    for (dst, v) in yn.iter_mut().zip(wh.mul_vec(&xv)) {
                        *dst = v;
                    }
                }
            });
        Ok(y)
    }

    /// `|w_j^H x|^2` as an `F x N` map.
    pub fn source_power(&self, x: ArrayView3<'_, Complex64>, j: usize) -> Result<Array2<f64>, SeparationError> {
        self.check(x)?;
        if j >= self.channels() {
            return Err(SeparationError::Shape(format!("source {j} out of range")));
        }
        let (bins, frames, _) = x.dim();
        let mut out = Array2::zeros((bins, frames));
        Zip::from(out.outer_iter_mut())
            .and(x.outer_iter())
            .and(&self.mats)
            .par_for_each(|mut row, xf, w| {
                let wj = w.column(j);
                for (dst, xn) in row.iter_mut().zip(xf.outer_iter()) {
                    let y: Complex64 = wj.iter().zip(xn.iter()).map(|(a, b)| a.conj() * b).sum();
                    *dst = y.norm_sqr();
                }
            });
        Ok(out)
    }

    /// Iterative-projection update of `w_j` in every bin:
    /// `w_j <- (W^H Sigma_j)^-1 e_j`, then `w_j <- w_j / sqrt(w_j^H Sigma_j w_j)`,
    /// with `Sigma_j` the covariance of `x` weighted by `1 / v_j`.
    pub fn ip_update(
        &mut self,
        x: ArrayView3<'_, Complex64>,
        variance: ArrayView2<'_, f64>,
        j: usize,
    ) -> Result<(), SeparationError> {
        self.check(x)?;
        let (bins, frames, channels) = x.dim();
        if variance.dim() != (bins, frames) {
            return Err(SeparationError::Shape(format!(
                "variance map is {:?}, expected {:?}",
                variance.dim(),
                (bins, frames)
            )));
        }
        if j >= channels {
            return Err(SeparationError::Shape(format!("source {j} out of range")));
        }
        let results: Vec<Result<(), LinalgError>> = self
            .mats
            .par_iter_mut()
            .zip(x.outer_iter().into_par_iter())
            .zip(variance.outer_iter().into_par_iter())
            .map(|((w, xf), vf)| {
                let v = vf.to_vec();
                let cov = linalg::weighted_cov(xf.t(), &v, VARIANCE_FLOOR)?;
                let e = basis_vector(channels, j);
                let (b, sigma) = match linalg::solve(&(&w.hermitian() * &cov.sigma), &e) {
                    Ok(b) => (b, cov.sigma),
                    Err(LinalgError::IllConditioned { .. } | LinalgError::Singular) => {
                        let reg = cov.regularized();
                        (linalg::solve(&(&w.hermitian() * &reg.sigma), &e)?, reg.sigma)
                    }
                    Err(other) => return Err(other),
                };
                let norm = quad_form(&sigma, &b);
                if !(norm > 0.0 && norm.is_finite()) {
                    return Err(LinalgError::Singular);
                }
                let scale = 1.0 / norm.sqrt();
                let wj: Vec<Complex64> = b.iter().map(|v| v * scale).collect();
                w.set_column(j, &wj);
                Ok(())
            })
            .collect();
        for (freq, r) in results.into_iter().enumerate() {
            r.map_err(|source| SeparationError::Linalg { freq, source })?;
        }
        Ok(())
    }

    /// Rescales separated sources so each becomes its image at the reference
    /// microphone: `image_j = [W^-H]_{ref, j} y_j`.
    pub fn back_project(&self, y: ArrayView3<'_, Complex64>) -> Result<Array3<Complex64>, SeparationError> {
        self.check(y)?;
        let r = self.reference_channel;
        let scales: Vec<Vec<Complex64>> = self
            .mats
            .par_iter()
            .enumerate()
            .map(|(freq, w)| {
                let mixing = w
                    .hermitian()
                    .inverse()
                    .map_err(|source| SeparationError::Linalg { freq, source })?;
                Ok((0..w.dim()).map(|j| mixing[(r, j)]).collect())
            })
            .collect::<Result<_, SeparationError>>()?;
        let mut out = y.to_owned();
        for (mut yf, s) in out.outer_iter_mut().zip(&scales) {
            for mut yn in yf.outer_iter_mut() {
                for (v, &g) in yn.iter_mut().zip(s) {
                    *v *= g;
                }
            }
        }
        Ok(out)
    }

    /// Fixes the per-frequency scale of every demixing filter so that each
    /// separated signal equals its image at the reference microphone:
    /// `w_j <- conj(a_j) w_j` with `a_j = [W^-H]_{ref, j}`. A source that
    /// does not reach the reference microphone (`a_j` negligible next to its
    /// other mixing coefficients) keeps its scale; zeroing it would make `W`
    /// singular.
    pub fn rescale_to_reference(&mut self) -> Result<(), SeparationError> {
        let r = self.reference_channel;
        self.mats
            .par_iter_mut()
            .enumerate()
            .try_for_each(|(freq, w)| {
                let mixing = w
                    .hermitian()
                    .inverse()
                    .map_err(|source| SeparationError::Linalg { freq, source })?;
                for j in 0..w.dim() {
                    let a = mixing[(r, j)].conj();
                    let largest = (0..w.dim()).map(|i| mixing[(i, j)].norm()).fold(0.0, f64::max);
                    if a.norm() <= 1e-12 * largest {
                        continue;
                    }
                    let col: Vec<Complex64> = w.column(j).iter().map(|v| v * a).collect();
                    w.set_column(j, &col);
                }
                Ok(())
            })
    }
}

/// Negative log-likelihood of the local Gaussian model up to constants:
/// `-2N sum_f log|det W(f)| + sum_{f,n,j} (log v_j + |y_j|^2 / v_j)`.
pub fn neg_log_likelihood(
    w: &DemixingStack,
    variances: &[Array2<f64>],
    x: ArrayView3<'_, Complex64>,
) -> Result<f64, SeparationError> {
    w.check(x)?;
    let (bins, frames, channels) = x.dim();
    if variances.len() != channels || variances.iter().any(|v| v.dim() != (bins, frames)) {
        return Err(SeparationError::Shape(format!(
            "need {channels} variance maps of shape {:?}",
            (bins, frames)
        )));
    }
    let per_bin: Vec<Result<f64, SeparationError>> = (0..bins)
        .into_par_iter()
        .map(|f| {
            let wmat = w.matrix(f);
            let logdet = logdet_abs(wmat).map_err(|source| SeparationError::Linalg { freq: f, source })?;
            let xf = x.index_axis(Axis(0), f);
            let mut acc = 0.0;
            for (j, v) in variances.iter().enumerate() {
                let wj: Vec<Complex64> = wmat.column(j).iter().map(|w| w.conj()).collect();
                for (xn, &v) in xf.outer_iter().zip(v.row(f)) {
                    let y: Complex64 = wj.iter().zip(xn).map(|(w, x)| w * x).sum();
                    let v = v.max(VARIANCE_FLOOR);
                    acc += v.ln() + y.norm_sqr() / v;
                }
            }
            Ok(acc - 2.0 * frames as f64 * logdet)
        })
        .collect();
    let mut total = 0.0;
    for r in per_bin {
        total += r?;
    }
    Ok(total)
}

/// Closed-form gain `g = mean(|y|^2 / sigma^2)`, the stationary point of the
/// likelihood in `g` for `v = g sigma^2`.
pub fn update_gain(power: ArrayView2<'_, f64>, sigma2: ArrayView2<'_, f64>) -> Result<f64, SeparationError> {
    if power.dim() != sigma2.dim() || power.is_empty() {
        return Err(SeparationError::Shape(format!(
            "power {:?} and model {:?} maps differ",
            power.dim(),
            sigma2.dim()
        )));
    }
    let sum = Zip::from(power)
        .and(sigma2)
        .fold(0.0, |acc, &p, &s| acc + p / s.max(VARIANCE_FLOOR));
    Ok((sum / power.len() as f64).max(VARIANCE_FLOOR))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn random_x(rng: &mut ChaCha8Rng, dims: (usize, usize, usize)) -> Array3<Complex64> {
        Array3::from_shape_simple_fn(dims, || c(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
    }

    fn random_stack(rng: &mut ChaCha8Rng, bins: usize, ch: usize) -> DemixingStack {
        let mats = (0..bins)
            .map(|_| CMat::from_fn(ch, |_, _| c(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))))
            .collect();
        DemixingStack::from_matrices(mats, 0).unwrap()
    }

    fn naive_nll(w: &DemixingStack, v: &[Array2<f64>], x: &Array3<Complex64>) -> f64 {
        let (bins, frames, ch) = x.dim();
        let mut total = 0.0;
        for f in 0..bins {
            let m = w.matrix(f);
            let det = if ch == 2 {
                (m[(0, 0)] * m[(1, 1)] - m[(0, 1)] * m[(1, 0)]).norm()
            } else {
                unimplemented!()
            };
            total -= 2.0 * frames as f64 * det.ln();
            for n in 0..frames {
                for j in 0..ch {
                    let mut y = c(0.0, 0.0);
                    for i in 0..ch {
                        y += m[(i, j)].conj() * x[(f, n, i)];
                    }
                    total += v[j][(f, n)].ln() + y.norm_sqr() / v[j][(f, n)];
                }
            }
        }
        total
    }

    #[test]
    fn nll_single_channel_plug_in() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_x(&mut rng, (3, 4, 1));
        let w = DemixingStack::identity(3, 1);
        let v = x.index_axis(Axis(2), 0).mapv(|z| z.norm_sqr());
        let want: f64 = v.iter().map(|p| p.ln() + 1.0).sum();
        let got = neg_log_likelihood(&w, &[v], x.view()).unwrap();
        assert!((got - want).abs() < 1e-12 * want.abs());
    }

    #[test]
    fn nll_matches_direct_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_x(&mut rng, (3, 4, 2));
        let w = random_stack(&mut rng, 3, 2);
        let v: Vec<Array2<f64>> = (0..2)
            .map(|_| Array2::from_shape_simple_fn((3, 4), || rng.gen_range(0.1..2.0)))
            .collect();
        let got = neg_log_likelihood(&w, &v, x.view()).unwrap();
        let want = naive_nll(&w, &v, &x);
        assert!((got - want).abs() < 1e-10 * want.abs().max(1.0));
    }

    #[test]
    fn nll_scaling_shifts_by_log_alpha_squared() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (bins, frames, ch) = (3, 5, 2);
        let x = random_x(&mut rng, (bins, frames, ch));
        let w = random_stack(&mut rng, bins, ch);
        let v: Vec<Array2<f64>> = (0..ch)
            .map(|_| Array2::from_shape_simple_fn((bins, frames), || rng.gen_range(0.1..2.0)))
            .collect();
        let alpha = 3.0;
        let xs = x.mapv(|z| z * alpha);
        let vs: Vec<Array2<f64>> = v.iter().map(|m| m * (alpha * alpha)).collect();
        let base = neg_log_likelihood(&w, &v, x.view()).unwrap();
        let scaled = neg_log_likelihood(&w, &vs, xs.view()).unwrap();
        let want = (bins * frames * ch) as f64 * (alpha * alpha).ln();
        assert!((scaled - base - want).abs() < 1e-10 * base.abs().max(1.0));
    }

    #[test]
    fn gain_update_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = Array2::from_shape_simple_fn((4, 3), || rng.gen_range(0.1..2.0));
        assert!((update_gain(p.view(), p.view()).unwrap() - 1.0).abs() < 1e-15);

        let s = Array2::from_shape_simple_fn((4, 3), || rng.gen_range(0.1..2.0));
        let g = update_gain(p.view(), s.view()).unwrap();
        let mut want = 0.0;
        for (a, b) in p.iter().zip(s.iter()) {
            want += a / b;
        }
        want /= 12.0;
        assert!((g - want).abs() < 1e-12 * want);

        let alpha = 2.5;
        let g2 = update_gain((&p * (alpha * alpha)).view(), s.view()).unwrap();
        assert!((g2 - alpha * alpha * g).abs() < 1e-12 * g2);
        assert!(update_gain(p.view(), Array2::ones((3, 4)).view()).is_err());
    }

    #[test]
    fn ip_update_normalizes_and_does_not_increase_nll() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (bins, frames, ch) = (4, 30, 3);
        let x = random_x(&mut rng, (bins, frames, ch));
        let mut w = random_stack(&mut rng, bins, ch);
        let v: Vec<Array2<f64>> = (0..ch)
            .map(|_| Array2::from_shape_simple_fn((bins, frames), || rng.gen_range(0.1..2.0)))
            .collect();
        let mut prev = neg_log_likelihood(&w, &v, x.view()).unwrap();
        for sweep in 0..5 {
            for j in 0..ch {
                w.ip_update(x.view(), v[j].view(), j).unwrap();
                for f in 0..bins {
                    let xf = x.index_axis(Axis(0), f);
                    let cov = linalg::weighted_cov(xf.t(), &v[j].row(f).to_vec(), VARIANCE_FLOOR).unwrap();
                    let q = quad_form(&cov.sigma, &w.matrix(f).column(j));
                    assert!((q - 1.0).abs() < 1e-8, "sweep {sweep} f {f}: {q}");
                }
                let now = neg_log_likelihood(&w, &v, x.view()).unwrap();
                assert!(now <= prev + 1e-8 * prev.abs(), "{prev} -> {now}");
                prev = now;
            }
        }
    }

    #[test]
    fn ip_update_at_optimum_is_stationary() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (bins, frames, ch) = (3, 40, 2);
        let x = random_x(&mut rng, (bins, frames, ch));
        let mut w = DemixingStack::identity(bins, ch);
        let v: Vec<Array2<f64>> = (0..ch)
            .map(|_| Array2::from_shape_simple_fn((bins, frames), || rng.gen_range(0.1..2.0)))
            .collect();
        for _ in 0..200 {
            for j in 0..ch {
                w.ip_update(x.view(), v[j].view(), j).unwrap();
            }
        }
        let before = neg_log_likelihood(&w, &v, x.view()).unwrap();
        for j in 0..ch {
            w.ip_update(x.view(), v[j].view(), j).unwrap();
        }
        let after = neg_log_likelihood(&w, &v, x.view()).unwrap();
        assert!((before - after).abs() < 1e-9 * before.abs().max(1.0));
    }

    #[test]
    fn back_projection_reconstructs_reference_channel() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random_x(&mut rng, (5, 6, 3));
        for r in 0..3 {
            let mut w = random_stack(&mut rng, 5, 3);
            w.reference_channel = r;
            let y = w.apply(x.view()).unwrap();
            let img = w.back_project(y.view()).unwrap();
            let sum = img.sum_axis(Axis(2));
            let err = Zip::from(&sum)
                .and(x.index_axis(Axis(2), r))
                .fold(0.0f64, |m, a, b| m.max((a - b).norm()));
            assert!(err < 1e-8, "reference {r}: {err}");
        }
    }

    #[test]
    fn rescaling_matches_back_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random_x(&mut rng, (4, 6, 2));
        let mut w = random_stack(&mut rng, 4, 2);
        w.reference_channel = 1;
        let want = w.back_project(w.apply(x.view()).unwrap().view()).unwrap();
        w.rescale_to_reference().unwrap();
        let got = w.apply(x.view()).unwrap();
        for (a, b) in got.iter().zip(want.iter()) {
            assert!((a - b).norm() < 1e-10);
        }
    }

    #[test]
    fn rescaling_keeps_sources_absent_from_the_reference() {
        let mut w = DemixingStack::identity(3, 2);
        w.rescale_to_reference().unwrap();
        for f in 0..3 {
            assert_eq!(w.matrix(f), &CMat::identity(2));
        }
    }

    #[test]
    fn shape_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = random_x(&mut rng, (3, 4, 2));
        let mut w = DemixingStack::identity(2, 2);
        assert!(w.apply(x.view()).is_err());
        let mut w3 = DemixingStack::identity(3, 2);
        assert!(w3.ip_update(x.view(), Array2::ones((3, 5)).view(), 0).is_err());
        assert!(w3.ip_update(x.view(), Array2::ones((3, 4)).view(), 2).is_err());
        assert!(w.ip_update(x.view(), Array2::ones((3, 4)).view(), 0).is_err());
        assert!(DemixingStack::from_matrices(vec![CMat::identity(2)], 2).is_err());
    }
}

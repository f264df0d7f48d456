use ndarray::{Array2, ArrayView2, Zip};
use rand::Rng;

use super::ModelError;
use crate::linalg::VARIANCE_FLOOR;

/// Low-rank nonnegative variance model `v = T U` for one source.
#[derive(Debug, Clone, PartialEq)]
pub struct NmfModel {
    /// `F x K` basis spectra.
    pub bases: Array2<f64>,
    /// `K x N` activations.
    pub activations: Array2<f64>,
}

impl NmfModel {
    pub fn new(bases: Array2<f64>, activations: Array2<f64>) -> Result<Self, ModelError> {
        if bases.ncols() != activations.nrows() {
            return Err(ModelError::Shape(format!(
                "bases have {} columns but activations have {} rows",
                bases.ncols(),
                activations.nrows()
            )));
        }
        if bases.iter().chain(activations.iter()).any(|&x| !(x >= 0.0)) {
            return Err(ModelError::Shape("NMF factors must be nonnegative".into()));
        }
        Ok(Self { bases, activations })
    }

    /// Factors drawn uniformly from `[0.1, 1)`.
    pub fn random<R: Rng + ?Sized>(bins: usize, frames: usize, rank: usize, rng: &mut R) -> Self {
        let bases = Array2::from_shape_simple_fn((bins, rank), || rng.gen_range(0.1..1.0));
        let activations = Array2::from_shape_simple_fn((rank, frames), || rng.gen_range(0.1..1.0));
        Self { bases, activations }
    }

    pub fn rank(&self) -> usize {
        self.bases.ncols()
    }

    pub fn bins(&self) -> usize {
        self.bases.nrows()
    }

    pub fn frames(&self) -> usize {
        self.activations.ncols()
    }

    pub fn variance(&self) -> Array2<f64> {
        self.bases
            .dot(&self.activations)
            .mapv_into(|v| v.max(VARIANCE_FLOOR))
    }

    /// One pass of Itakura-Saito multiplicative updates (bases then
    /// activations) fitted to the power map `power`. The square-root exponent
    /// makes each half-step a majorization-minimization step, so the IS
    /// divergence never increases.
    pub fn update(&mut self, power: ArrayView2<'_, f64>) -> Result<(), ModelError> {
        if power.dim() != (self.bins(), self.frames()) {
            return Err(ModelError::Shape(format!(
                "power map is {:?}, model expects {:?}",
                power.dim(),
                (self.bins(), self.frames())
            )));
        }
        if power.iter().any(|&p| !(p >= 0.0)) {
            return Err(ModelError::Shape("power map must be nonnegative".into()));
        }

        let (weighted, inv) = self.ratio_maps(power);
        let num = weighted.dot(&self.activations.t());
        let den = inv.dot(&self.activations.t());
        Zip::from(&mut self.bases)
            .and(&num)
            .and(&den)
            .for_each(|t, &a, &b| *t = (*t * (a / b).sqrt()).max(VARIANCE_FLOOR));

        let (weighted, inv) = self.ratio_maps(power);
        let num = self.bases.t().dot(&weighted);
        let den = self.bases.t().dot(&inv);
        Zip::from(&mut self.activations)
            .and(&num)
            .and(&den)
            .for_each(|u, &a, &b| *u = (*u * (a / b).sqrt()).max(VARIANCE_FLOOR));
        Ok(())
    }

    /// `(P / V^2, 1 / V)` for the current model.
    fn ratio_maps(&self, power: ArrayView2<'_, f64>) -> (Array2<f64>, Array2<f64>) {
        let v = self.variance();
        let mut weighted = Array2::zeros(v.dim());
        let mut inv = Array2::zeros(v.dim());
        Zip::from(&mut weighted)
            .and(&mut inv)
            .and(&v)
            .and(power)
            .for_each(|w, i, &v, &p| {
                let r = 1.0 / v;
                *i = r;
                *w = p * r * r;
            });
        (weighted, inv)
    }
}

/// Itakura-Saito divergence `sum(P/V - ln(P/V) - 1)`, with zero powers
/// handled through the limit-free form `P/V + ln V - ln P` restricted to
/// positive `P` (zero entries contribute `ln V` up to a constant).
pub fn itakura_saito(power: ArrayView2<'_, f64>, variance: ArrayView2<'_, f64>) -> f64 {
    Zip::from(power).and(variance).fold(0.0, |acc, &p, &v| {
        let v = v.max(VARIANCE_FLOOR);
        if p > 0.0 {
            acc + p / v - (p / v).ln() - 1.0
        } else {
            acc + v.ln()
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn naive_variance(t: &Array2<f64>, u: &Array2<f64>) -> Array2<f64> {
        let (f, k) = t.dim();
        let n = u.ncols();
        Array2::from_shape_fn((f, n), |(i, j)| {
            let mut s = 0.0;
            for r in 0..k {
                s += t[(i, r)] * u[(r, j)];
            }
            s.max(VARIANCE_FLOOR)
        })
    }

    #[test]
    fn ones_give_unit_variance() {
        let m = NmfModel::new(Array2::ones((3, 1)), Array2::ones((1, 4))).unwrap();
        assert!(m.variance().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn variance_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = NmfModel::random(6, 5, 3, &mut rng);
        let want = naive_variance(&m.bases, &m.activations);
        for (a, b) in m.variance().iter().zip(want.iter()) {
            assert!((a - b).abs() <= 1e-12 * b.abs());
        }
    }

    #[test]
    fn zero_activations_hit_the_floor() {
        let m = NmfModel::new(Array2::ones((3, 2)), Array2::zeros((2, 4))).unwrap();
        assert!(m.variance().iter().all(|&v| v == VARIANCE_FLOOR));
    }

    #[test]
    fn exact_fit_is_a_fixed_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut m = NmfModel::random(7, 6, 2, &mut rng);
        let before = m.clone();
        let power = m.variance();
        m.update(power.view()).unwrap();
        for (a, b) in m.bases.iter().zip(before.bases.iter()) {
            assert!((a - b).abs() <= 1e-10 * b);
        }
        for (a, b) in m.activations.iter().zip(before.activations.iter()) {
            assert!((a - b).abs() <= 1e-10 * b);
        }
    }

    #[test]
    fn divergence_does_not_increase() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let mut m = NmfModel::random(5, 4, 2, &mut rng);
            let power = Array2::from_shape_simple_fn((5, 4), || rng.gen_range(0.0..3.0f64).powi(2));
            for _ in 0..10 {
                let before = itakura_saito(power.view(), m.variance().view());
                m.update(power.view()).unwrap();
                let after = itakura_saito(power.view(), m.variance().view());
                assert!(after <= before + 1e-12 * before.abs(), "{before} -> {after}");
            }
        }
    }

    #[test]
    fn update_is_homogeneous_in_power_and_bases() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = NmfModel::random(5, 4, 2, &mut rng);
        let power = Array2::from_shape_simple_fn((5, 4), || rng.gen_range(0.1..2.0));
        let alpha = 3.5;

        let mut plain = m.clone();
        plain.update(power.view()).unwrap();

        let mut scaled = NmfModel::new(&m.bases * alpha, m.activations.clone()).unwrap();
        scaled.update((&power * alpha).view()).unwrap();

        for (a, b) in scaled.bases.iter().zip(plain.bases.iter()) {
            assert!((a - alpha * b).abs() <= 1e-12 * a);
        }
        for (a, b) in scaled.activations.iter().zip(plain.activations.iter()) {
            assert!((a - b).abs() <= 1e-12 * a);
        }
    }

    #[test]
    fn rejects_bad_shapes() {
        let mut m = NmfModel::new(Array2::ones((3, 1)), Array2::ones((1, 4))).unwrap();
        assert!(m.update(Array2::ones((3, 5)).view()).is_err());
        assert!(m.update(Array2::from_elem((3, 4), -1.0).view()).is_err());
        assert!(NmfModel::new(Array2::ones((3, 2)), Array2::ones((1, 4))).is_err());
    }
}

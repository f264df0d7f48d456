use realfft::num_complex::Complex;
use realfft::RealFftPlanner;
use serde::{Deserialize, Serialize};

use super::EvalError;

/// Length of the time-invariant distortion filter allowed on each reference.
pub const DEFAULT_FILTER_LENGTH: usize = 512;

/// Reported ratios are clamped to this many dB either way.
pub const DB_CAP: f64 = 100.0;

/// Normalized zero-lag correlation above which two references are treated
/// as the same signal.
const DEGENERATE_CORRELATION: f64 = 0.99;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BssScores {
    /// Indexed by reference.
    pub sdr: Vec<f64>,
    pub sir: Vec<f64>,
    pub sar: Vec<f64>,
    /// `permutation[j]` is the estimate matched to reference `j`.
    pub permutation: Vec<usize>,
}

impl BssScores {
    pub fn mean_sdr(&self) -> f64 {
        mean(&self.sdr)
    }

    pub fn mean_sir(&self) -> f64 {
        mean(&self.sir)
    }

    pub fn mean_sar(&self) -> f64 {
        mean(&self.sar)
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

/// `10 log10(num / den)` clamped to `[-DB_CAP, DB_CAP]`.
pub fn ratio_db(num: f64, den: f64) -> f64 {
    if den <= 0.0 {
        return if num > 0.0 { DB_CAP } else { -DB_CAP };
    }
    if num <= 0.0 {
        return -DB_CAP;
    }
    (10.0 * (num / den).log10()).clamp(-DB_CAP, DB_CAP)
}

/// Energy decomposition of one estimate against one reference.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Decomposition {
    pub target: f64,
    pub interference: f64,
    pub artifact: f64,
    pub sdr: f64,
    pub sir: f64,
    pub sar: f64,
}

/// BSS-eval decomposition with the default 512-tap filter.
pub fn bss_eval(estimates: &[Vec<f64>], references: &[Vec<f64>]) -> Result<BssScores, EvalError> {
    bss_eval_with(estimates, references, DEFAULT_FILTER_LENGTH)
}

/// Scores each estimate against each reference and keeps the assignment with
/// the largest total SIR (the first one in lexicographic order on ties).
///
/// An estimate is split into the part explained by its reference filtered
/// with `filter_length` taps (target), the further part explained by all
/// references filtered likewise (interference), and the rest (artifact).
pub fn bss_eval_with(
    estimates: &[Vec<f64>],
    references: &[Vec<f64>],
    filter_length: usize,
) -> Result<BssScores, EvalError> {
    let count = references.len();
    if count == 0 || estimates.len() != count {
        return Err(EvalError::Shape(format!(
            "{} estimates for {} references",
            estimates.len(),
            count
        )));
    }
    if filter_length == 0 {
        return Err(EvalError::Shape("filter length must be positive".into()));
    }
    let len = references[0].len();
    if len == 0 || references.iter().chain(estimates).any(|s| s.len() != len) {
        return Err(EvalError::Shape("all signals must have the same nonzero length".into()));
    }
    for (what, set) in [("reference", references), ("estimate", estimates)] {
        if let Some(i) = set.iter().position(|s| energy(s) == 0.0) {
            return Err(EvalError::ZeroEnergy(format!("{what} {i}")));
        }
    }
    for a in 0..count {
        for b in a + 1..count {
            let c = dot(&references[a], &references[b]).abs()
                / (energy(&references[a]) * energy(&references[b])).sqrt();
            if c >= DEGENERATE_CORRELATION {
                return Err(EvalError::Degenerate(a, b));
            }
        }
    }

    let ctx = Projector::new(references, filter_length)?;
    let mut table = vec![vec![None; count]; count];
    for (e, est) in estimates.iter().enumerate() {
        let est_spec = ctx.spectrum(est);
        for (j, row) in table.iter_mut().enumerate() {
            row[e] = Some(ctx.decompose(est, &est_spec, j));
        }
    }
    let table: Vec<Vec<Decomposition>> = table
        .into_iter()
        .map(|r| r.into_iter().map(|d| d.expect("filled above")).collect())
        .collect();

    let permutation = best_permutation(count, |j, e| table[j][e].sir);
    let pick = |f: fn(&Decomposition) -> f64| -> Vec<f64> {
        permutation.iter().enumerate().map(|(j, &e)| f(&table[j][e])).collect()
    };
    Ok(BssScores {
        sdr: pick(|d| d.sdr),
        sir: pick(|d| d.sir),
        sar: pick(|d| d.sar),
        permutation,
    })
}

/// Assignment maximizing `sum_j score(j, perm[j])`, visiting permutations in
/// lexicographic order so the earliest wins ties.
fn best_permutation(n: usize, score: impl Fn(usize, usize) -> f64) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..n).collect();
    let mut best = perm.clone();
    let total = |p: &[usize]| p.iter().enumerate().map(|(j, &e)| score(j, e)).sum::<f64>();
    let mut best_score = total(&perm);
    while next_permutation(&mut perm) {
        let s = total(&perm);
        if s > best_score {
            best_score = s;
            best.clone_from(&perm);
        }
    }
    best
}

fn next_permutation(p: &mut [usize]) -> bool {
    let Some(i) = (1..p.len()).rev().find(|&i| p[i - 1] < p[i]) else {
        return false;
    };
    let j = (i..p.len()).rev().find(|&j| p[j] > p[i - 1]).expect("a larger element exists");
    p.swap(i - 1, j);
    p[i..].reverse();
    true
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn energy(a: &[f64]) -> f64 {
    dot(a, a)
}

type Spectrum = Vec<Complex<f64>>;

/// Least-squares projections onto delayed copies of the references, with
/// the Gram matrices factored once.
struct Projector {
    taps: usize,
    len: usize,
    nfft: usize,
    planner_fwd: std::sync::Arc<dyn realfft::RealToComplex<f64>>,
    planner_inv: std::sync::Arc<dyn realfft::ComplexToReal<f64>>,
    ref_specs: Vec<Spectrum>,
    all: Cholesky,
    own: Vec<Cholesky>,
}

impl Projector {
    fn new(references: &[Vec<f64>], taps: usize) -> Result<Self, EvalError> {
        let len = references[0].len();
        let nfft = (len + taps - 1).next_power_of_two();
        let mut planner = RealFftPlanner::<f64>::new();
        let fwd = planner.plan_fft_forward(nfft);
        let inv = planner.plan_fft_inverse(nfft);
        let mut this = Self {
            taps,
            len,
            nfft,
            planner_fwd: fwd,
            planner_inv: inv,
            ref_specs: Vec::new(),
            all: Cholesky::default(),
            own: Vec::new(),
        };
        this.ref_specs = references.iter().map(|r| this.spectrum(r)).collect();
        let count = references.len();
        // corr[a][b][k - l] for lags -(taps-1)..taps.
        let corr: Vec<Vec<Vec<f64>>> = (0..count)
            .map(|a| (0..count).map(|b| this.correlate(&this.ref_specs[a], &this.ref_specs[b])).collect())
            .collect();
        let lag = |a: usize, b: usize, d: isize| -> f64 {
            let c = &corr[a][b];
            if d >= 0 {
                c[d as usize]
            } else {
                c[this.nfft - (-d) as usize]
            }
        };
        let n = count * taps;
        let mut gram = vec![0.0; n * n];
        for a in 0..count {
            for k in 0..taps {
                for b in 0..count {
                    for l in 0..taps {
                        gram[(a * taps + k) * n + b * taps + l] = lag(a, b, k as isize - l as isize);
                    }
                }
            }
        }
        this.all = Cholesky::factor(gram, n)?;
        this.own = (0..count)
            .map(|a| {
                let mut g = vec![0.0; taps * taps];
                for k in 0..taps {
                    for l in 0..taps {
                        g[k * taps + l] = lag(a, a, k as isize - l as isize);
                    }
                }
                Cholesky::factor(g, taps)
            })
            .collect::<Result<_, _>>()?;
        Ok(this)
    }

    fn spectrum(&self, x: &[f64]) -> Spectrum {
        let mut buf = vec![0.0; self.nfft];
        buf[..x.len()].copy_from_slice(x);
        let mut out = self.planner_fwd.make_output_vec();
        self.planner_fwd.process(&mut buf, &mut out).expect("planned size");
        out
    }

    /// `c[tau] = sum_t a(t) b(t + tau)`, circular over `nfft`.
    fn correlate(&self, a: &Spectrum, b: &Spectrum) -> Vec<f64> {
        let mut prod: Spectrum = a.iter().zip(b).map(|(x, y)| x.conj() * y).collect();
        self.inverse(&mut prod)
    }

    fn inverse(&self, spec: &mut Spectrum) -> Vec<f64> {
        // The DC and Nyquist bins of a real signal's spectrum are real.
        spec[0].im = 0.0;
        if let Some(last) = spec.last_mut() {
            last.im = 0.0;
        }
        let mut out = vec![0.0; self.nfft];
        self.planner_inv.process(spec, &mut out).expect("planned size");
        let scale = 1.0 / self.nfft as f64;
        out.iter_mut().for_each(|v| *v *= scale);
        out
    }

    /// Projection of the estimate onto the filtered references in `which`,
    /// `len + taps - 1` samples long.
    fn project(&self, est_spec: &Spectrum, which: &[usize], chol: &Cholesky) -> Vec<f64> {
        let mut rhs = Vec::with_capacity(which.len() * self.taps);
        for &a in which {
            let c = self.correlate(&self.ref_specs[a], est_spec);
            rhs.extend_from_slice(&c[..self.taps]);
        }
        let coef = chol.solve(&rhs);
        let mut acc = vec![Complex::new(0.0, 0.0); self.nfft / 2 + 1];
        for (block, &a) in which.iter().enumerate() {
            let filt = self.spectrum(&coef[block * self.taps..(block + 1) * self.taps]);
            for ((s, r), f) in acc.iter_mut().zip(&self.ref_specs[a]).zip(&filt) {
                *s += r * f;
            }
        }
        let mut out = self.inverse(&mut acc);
        out.truncate(self.len + self.taps - 1);
        out
    }

    fn decompose(&self, est: &[f64], est_spec: &Spectrum, j: usize) -> Decomposition {
        let target = self.project(est_spec, &[j], &self.own[j]);
        let all: Vec<usize> = (0..self.ref_specs.len()).collect();
        let full = self.project(est_spec, &all, &self.all);
        let mut padded = est.to_vec();
        padded.resize(self.len + self.taps - 1, 0.0);
        let mut e_target = 0.0;
        let mut e_interf = 0.0;
        let mut e_artif = 0.0;
        let mut e_noise = 0.0;
        for t in 0..padded.len() {
            let interf = full[t] - target[t];
            let artif = padded[t] - full[t];
            e_target += target[t] * target[t];
            e_interf += interf * interf;
            e_artif += artif * artif;
            e_noise += (interf + artif).powi(2);
        }
        let sdr = ratio_db(e_target, e_noise);
        let sir = ratio_db(e_target, e_interf);
        let sar = ratio_db(
            (0..padded.len()).map(|t| full[t] * full[t]).sum(),
            e_artif,
        );
        Decomposition {
            target: e_target,
            interference: e_interf,
            artifact: e_artif,
            sdr,
            sir,
            sar,
        }
    }
}

/// Dense Cholesky factor of a symmetric positive (semi)definite matrix. A
/// tiny diagonal load is added when the plain factorization breaks down.
#[derive(Debug, Default)]
struct Cholesky {
    n: usize,
    l: Vec<f64>,
}

impl Cholesky {
    fn factor(a: Vec<f64>, n: usize) -> Result<Self, EvalError> {
        let trace: f64 = (0..n).map(|i| a[i * n + i]).sum();
        let mut jitter = 0.0;
        for attempt in 0..6 {
            let mut m = a.clone();
            for i in 0..n {
                m[i * n + i] += jitter;
            }
            if Self::in_place(&mut m, n) {
                return Ok(Self { n, l: m });
            }
            jitter = trace / n as f64 * 1e-12 * 100f64.powi(attempt);
        }
        Err(EvalError::Singular)
    }

    /// Row-by-row factorization overwriting the lower triangle.
    fn in_place(m: &mut [f64], n: usize) -> bool {
        for i in 0..n {
            for j in 0..=i {
                let mut s = m[i * n + j];
                for k in 0..j {
                    s -= m[i * n + k] * m[j * n + k];
                }
                if i == j {
                    if !(s > 0.0) {
                        return false;
                    }
                    m[i * n + i] = s.sqrt();
                } else {
                    m[i * n + j] = s / m[j * n + j];
                }
            }
        }
        true
    }

    fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.n;
        let l = &self.l;
        let mut y = b.to_vec();
        for i in 0..n {
            let row = &l[i * n..i * n + i];
            let s: f64 = row.iter().zip(&y[..i]).map(|(a, b)| a * b).sum();
            y[i] = (y[i] - s) / l[i * n + i];
        }
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in i + 1..n {
                s -= l[k * n + i] * y[k];
            }
            y[i] = s / l[i * n + i];
        }
        y
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise(len: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn cholesky_solves_spd_system() {
        let a = vec![4.0, 2.0, 0.4, 2.0, 5.0, 1.0, 0.4, 1.0, 3.0];
        let c = Cholesky::factor(a.clone(), 3).unwrap();
        let x = c.solve(&[1.0, -2.0, 0.5]);
        for i in 0..3 {
            let r: f64 = (0..3).map(|k| a[i * 3 + k] * x[k]).sum();
            assert!((r - [1.0, -2.0, 0.5][i]).abs() < 1e-12);
        }
    }

    #[test]
    fn permutations_in_lexicographic_order() {
        let mut p = vec![0, 1, 2];
        let mut seen = vec![p.clone()];
        while next_permutation(&mut p) {
            seen.push(p.clone());
        }
        assert_eq!(seen.len(), 6);
        assert_eq!(seen[1], vec![0, 2, 1]);
        assert_eq!(seen[5], vec![2, 1, 0]);
        assert_eq!(best_permutation(3, |_, _| 1.0), vec![0, 1, 2]);
    }

    #[test]
    fn perfect_estimates_hit_the_caps() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let refs = vec![noise(600, &mut rng), noise(600, &mut rng)];
        let s = bss_eval_with(&refs, &refs, 16).unwrap();
        assert_eq!(s.permutation, vec![0, 1]);
        for j in 0..2 {
            assert!(s.sdr[j] > 90.0 && s.sir[j] > 90.0 && s.sar[j] > 90.0, "{s:?}");
            assert!(s.sdr[j] <= DB_CAP);
        }
    }

    #[test]
    fn scale_and_order_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let refs = vec![noise(800, &mut rng), noise(800, &mut rng)];
        let est: Vec<Vec<f64>> = (0..2)
            .map(|j| {
                let n = noise(800, &mut rng);
                (0..800)
                    .map(|t| refs[j][t] + 0.3 * refs[1 - j][t] + 0.2 * n[t])
                    .collect()
            })
            .collect();
        let base = bss_eval_with(&est, &refs, 8).unwrap();
        let scaled: Vec<Vec<f64>> = vec![est[0].iter().map(|v| 3.5 * v).collect(), est[1].clone()];
        let s = bss_eval_with(&scaled, &refs, 8).unwrap();
        for j in 0..2 {
            assert!((s.sdr[j] - base.sdr[j]).abs() < 1e-9);
            assert!((s.sir[j] - base.sir[j]).abs() < 1e-9);
            assert!((s.sar[j] - base.sar[j]).abs() < 1e-9);
        }
        let swapped = vec![est[1].clone(), est[0].clone()];
        let s = bss_eval_with(&swapped, &refs, 8).unwrap();
        assert_eq!(s.permutation, vec![1, 0]);
        for j in 0..2 {
            assert!((s.sdr[j] - base.sdr[j]).abs() < 1e-9);
        }
        for j in 0..2 {
            assert!(base.sdr[j] <= base.sir[j].min(base.sar[j]) + 3.02);
        }
    }

    #[test]
    fn single_source_matches_least_squares_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (len, taps) = (120, 6);
        let r = noise(len, &mut rng);
        let e = noise(len, &mut rng);
        let scores = bss_eval_with(&[e.clone()], &[r.clone()], taps).unwrap();

        // Normal equations over explicitly delayed copies, solved by
        // Gaussian elimination.
        let padded = len + taps - 1;
        let delayed: Vec<Vec<f64>> = (0..taps)
            .map(|k| (0..padded).map(|t| if t >= k && t - k < len { r[t - k] } else { 0.0 }).collect())
            .collect();
        let mut ep = e.clone();
        ep.resize(padded, 0.0);
        let mut a: Vec<Vec<f64>> = (0..taps)
            .map(|i| {
                let mut row: Vec<f64> = (0..taps).map(|j| dot(&delayed[i], &delayed[j])).collect();
                row.push(dot(&delayed[i], &ep));
                row
            })
            .collect();
        for c in 0..taps {
            let p = (c..taps).max_by(|&x, &y| a[x][c].abs().total_cmp(&a[y][c].abs())).unwrap();
            a.swap(c, p);
            for r2 in 0..taps {
                if r2 != c {
                    let f = a[r2][c] / a[c][c];
                    for k in c..=taps {
                        a[r2][k] -= f * a[c][k];
                    }
                }
            }
        }
        let coef: Vec<f64> = (0..taps).map(|i| a[i][taps] / a[i][i]).collect();
        let proj: Vec<f64> = (0..padded).map(|t| (0..taps).map(|k| coef[k] * delayed[k][t]).sum()).collect();
        let resid: f64 = (0..padded).map(|t| (ep[t] - proj[t]).powi(2)).sum();
        let want = 10.0 * (energy(&proj) / resid).log10();
        assert!((scores.sdr[0] - want).abs() < 1e-8, "{} vs {want}", scores.sdr[0]);
        assert!((scores.sar[0] - want).abs() < 1e-8);
        assert_eq!(scores.sir[0], DB_CAP);
    }

    #[test]
    fn rejects_bad_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let r = noise(100, &mut rng);
        assert!(matches!(
            bss_eval_with(&[vec![0.0; 100]], &[r.clone()], 4),
            Err(EvalError::ZeroEnergy(_))
        ));
        assert!(matches!(
            bss_eval_with(&[r.clone(), r.clone()], &[r.clone(), r.iter().map(|v| 2.0 * v).collect()], 4),
            Err(EvalError::Degenerate(0, 1))
        ));
        assert!(matches!(bss_eval_with(&[r.clone()], &[r[..50].to_vec()], 4), Err(EvalError::Shape(_))));
    }

    #[test]
    fn caps() {
        assert_eq!(ratio_db(1.0, 0.0), DB_CAP);
        assert_eq!(ratio_db(0.0, 1.0), -DB_CAP);
        assert!((ratio_db(100.0, 1.0) - 20.0).abs() < 1e-12);
        assert_eq!(ratio_db(1e30, 1.0), DB_CAP);
    }
}

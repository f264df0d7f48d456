use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::RoomError;

pub const SPEED_OF_SOUND: f64 = 343.0;

/// Half-width, in samples, of the windowed-sinc fractional-delay kernel.
const SINC_HALF_WIDTH: usize = 32;

/// Impulse responses are cut at this multiple of the target RT60.
const TRUNCATION_FACTOR: f64 = 1.5;

const FIT_STEPS: usize = 18;

/// How wall absorption is derived from a target reverberation time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AbsorptionFormula {
    Sabine,
    Eyring,
    /// Searches for the absorption whose simulated response, from the first
    /// source to the first microphone, decays at the target rate.
    Fitted,
}

/// Shoebox room with omnidirectional microphones and point sources.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoomSpec {
    /// Length, width, height in meters.
    pub dimensions: [f64; 3],
    pub mic_positions: Vec<[f64; 3]>,
    pub source_positions: Vec<[f64; 3]>,
    /// Energy absorption per wall: x=0, x=L, y=0, y=W, z=0, z=H.
    pub absorption: [f64; 6],
    pub target_rt60: f64,
    pub sample_rate: u32,
    pub max_image_order: usize,
}

impl RoomSpec {
    /// Room with uniform absorption chosen for `rt60` and an image order deep
    /// enough that further reflections are 60 dB down.
    pub fn with_rt60(
        dimensions: [f64; 3],
        mic_positions: Vec<[f64; 3]>,
        source_positions: Vec<[f64; 3]>,
        rt60: f64,
        sample_rate: u32,
        formula: AbsorptionFormula,
    ) -> Result<Self, RoomError> {
        let mut spec = Self {
            dimensions,
            mic_positions,
            source_positions,
            absorption: [0.5; 6],
            target_rt60: rt60,
            sample_rate,
            max_image_order: 0,
        };
        if formula == AbsorptionFormula::Fitted {
            spec.validate()?;
            spec.fit_absorption()?;
        } else {
            spec.set_uniform_absorption(uniform_absorption(dimensions, rt60, formula)?);
        }
        spec.validate()?;
        Ok(spec)
    }

    /// Sets every wall to `alpha` and picks the image order at which the
    /// reflection product has fallen by 60 dB.
    pub fn set_uniform_absorption(&mut self, alpha: f64) {
        let beta = (1.0 - alpha).sqrt();
        self.absorption = [alpha; 6];
        self.max_image_order = if beta <= 0.0 {
            0
        } else {
            (1e-3f64.ln() / beta.ln()).ceil().max(0.0) as usize
        };
    }

    fn fit_absorption(&mut self) -> Result<(), RoomError> {
        if self.source_positions.is_empty() || self.mic_positions.is_empty() {
            return Err(RoomError::Invalid("fitting absorption needs a source and a microphone".into()));
        }
        // Decay time falls as absorption grows; bisect on log(alpha).
        let (mut lo, mut hi) = (1e-3f64.ln(), 0.999f64.ln());
        for _ in 0..FIT_STEPS {
            let mid = 0.5 * (lo + hi);
            self.set_uniform_absorption(mid.exp());
            let h = image_method_rir(self, 0, 0)?;
            match schroeder_rt60(&h, self.sample_rate) {
                Some(t) if t < self.target_rt60 => hi = mid,
                _ => lo = mid,
            }
        }
        self.set_uniform_absorption((0.5 * (lo + hi)).exp());
        Ok(())
    }

    pub fn validate(&self) -> Result<(), RoomError> {
        if self.dimensions.iter().any(|&d| !(d > 0.0)) {
            return Err(RoomError::Invalid("room dimensions must be positive".into()));
        }
        if !(self.target_rt60 > 0.0) {
            return Err(RoomError::Invalid("target RT60 must be positive".into()));
        }
        if self.sample_rate == 0 {
            return Err(RoomError::Invalid("sample rate must be positive".into()));
        }
        if self.absorption.iter().any(|&a| !(a > 0.0 && a <= 1.0)) {
            return Err(RoomError::Invalid("absorption coefficients must lie in (0, 1]".into()));
        }
        let inside = |p: &[f64; 3]| p.iter().zip(&self.dimensions).all(|(&x, &l)| x > 0.0 && x < l);
        for (what, points) in [("microphone", &self.mic_positions), ("source", &self.source_positions)] {
            if let Some(i) = points.iter().position(|p| !inside(p)) {
                return Err(RoomError::Invalid(format!("{what} {i} lies outside the room")));
            }
        }
        Ok(())
    }

    pub fn rir_length(&self) -> usize {
        (TRUNCATION_FACTOR * self.target_rt60 * f64::from(self.sample_rate)).ceil() as usize
    }
}

/// Uniform wall absorption that yields `rt60` for the given room under the
/// chosen reverberation formula.
pub fn uniform_absorption(dimensions: [f64; 3], rt60: f64, formula: AbsorptionFormula) -> Result<f64, RoomError> {
    let [l, w, h] = dimensions;
    let volume = l * w * h;
    let surface = 2.0 * (l * w + l * h + w * h);
    // 24 ln(10) / c
    let k = 24.0 * 10f64.ln() / SPEED_OF_SOUND;
    let ratio = k * volume / (surface * rt60);
    let alpha = match formula {
        AbsorptionFormula::Sabine => ratio,
        AbsorptionFormula::Eyring => 1.0 - (-ratio).exp(),
        AbsorptionFormula::Fitted => {
            return Err(RoomError::Invalid("fitted absorption has no closed form".into()))
        }
    };
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(RoomError::Invalid(format!(
            "RT60 of {rt60} s needs absorption {alpha:.3} in this room"
        )));
    }
    Ok(alpha)
}

/// Image-method impulse response from `source` to `mic`. Every image within
/// the order limit and the truncation length contributes an impulse of
/// amplitude `prod(beta) / (4 pi d)` at delay `d / c`, placed with a
/// Hann-windowed sinc.
pub fn image_method_rir(spec: &RoomSpec, source: usize, mic: usize) -> Result<Vec<f64>, RoomError> {
    spec.validate()?;
    let src = *spec
        .source_positions
        .get(source)
        .ok_or_else(|| RoomError::Invalid(format!("no source {source}")))?;
    let rcv = *spec
        .mic_positions
        .get(mic)
        .ok_or_else(|| RoomError::Invalid(format!("no microphone {mic}")))?;
    let fs = f64::from(spec.sample_rate);
    let len = spec.rir_length();
    let mut h = vec![0.0; len];
    let beta: Vec<f64> = spec.absorption.iter().map(|a| (1.0 - a).sqrt()).collect();
    let max_dist = len as f64 / fs * SPEED_OF_SOUND;
    let order = spec.max_image_order as i64;
    let bound = |axis: usize| -> i64 {
        let by_dist = (max_dist / (2.0 * spec.dimensions[axis])).ceil() as i64 + 1;
        by_dist.min(order + 1)
    };
    let (bx, by, bz) = (bound(0), bound(1), bound(2));

    for px in 0..2i64 {
        for py in 0..2i64 {
            for pz in 0..2i64 {
                for mx in -bx..=bx {
                    for my in -by..=by {
                        for mz in -bz..=bz {
                            let refl = [
                                (mx - px).abs(),
                                mx.abs(),
                                (my - py).abs(),
                                my.abs(),
                                (mz - pz).abs(),
                                mz.abs(),
                            ];
                            let total: i64 = refl.iter().sum();
                            if total > order {
                                continue;
                            }
                            let p = [px, py, pz];
                            let m = [mx, my, mz];
                            let mut d2 = 0.0;
                            for a in 0..3 {
                                let img = (1 - 2 * p[a]) as f64 * src[a] + 2.0 * m[a] as f64 * spec.dimensions[a];
                                d2 += (img - rcv[a]).powi(2);
                            }
                            let dist = d2.sqrt();
                            let delay = dist / SPEED_OF_SOUND * fs;
                            if delay >= len as f64 {
                                continue;
                            }
                            let gain: f64 = refl
                                .iter()
                                .zip(&beta)
                                .map(|(&n, &b)| b.powi(n as i32))
                                .product::<f64>()
                                / (4.0 * PI * dist);
                            add_fractional_impulse(&mut h, delay, gain);
                        }
                    }
                }
            }
        }
    }
    Ok(h)
}

fn add_fractional_impulse(h: &mut [f64], delay: f64, gain: f64) {
    let center = delay.round();
    if (delay - center).abs() < 1e-9 {
        let idx = center as usize;
        if idx < h.len() {
            h[idx] += gain;
        }
        return;
    }
    let w = SINC_HALF_WIDTH as f64;
    let lo = (delay - w).ceil().max(0.0) as usize;
    let hi = ((delay + w).floor() as usize).min(h.len().saturating_sub(1));
    for (n, slot) in h.iter_mut().enumerate().take(hi + 1).skip(lo) {
        let t = n as f64 - delay;
        let window = 0.5 * (1.0 + (PI * t / w).cos());
        let sinc = (PI * t).sin() / (PI * t);
        *slot += gain * window * sinc;
    }
}

/// Reverberation time from Schroeder backward integration, using a linear
/// fit of the energy decay curve between -5 and -25 dB extrapolated to
/// 60 dB. Returns `None` when the decay never reaches -25 dB.
pub fn schroeder_rt60(h: &[f64], sample_rate: u32) -> Option<f64> {
    let mut edc: Vec<f64> = h.iter().map(|v| v * v).collect();
    for i in (0..edc.len().saturating_sub(1)).rev() {
        edc[i] += edc[i + 1];
    }
    let total = *edc.first()?;
    if !(total > 0.0) {
        return None;
    }
    let db: Vec<f64> = edc.iter().map(|e| 10.0 * (e / total).log10()).collect();
    let start = db.iter().position(|&d| d <= -5.0)?;
    let end = db.iter().position(|&d| d <= -25.0)?;
    if end <= start + 1 {
        return None;
    }
    let fs = f64::from(sample_rate);
    let n = (end - start + 1) as f64;
    let (mut st, mut sd, mut stt, mut std) = (0.0, 0.0, 0.0, 0.0);
    for (i, &d) in db.iter().enumerate().take(end + 1).skip(start) {
        let t = i as f64 / fs;
        st += t;
        sd += d;
        stt += t * t;
        std += t * d;
    }
    let slope = (n * std - st * sd) / (n * stt - st * st);
    (slope < 0.0).then(|| -60.0 / slope)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec_with(mic: [f64; 3], src: [f64; 3], order: usize) -> RoomSpec {
        RoomSpec {
            dimensions: [6.0, 5.0, 3.0],
            mic_positions: vec![mic],
            source_positions: vec![src],
            absorption: [0.5; 6],
            target_rt60: 0.2,
            sample_rate: 16_000,
            max_image_order: order,
        }
    }

    #[test]
    fn direct_path_only() {
        // 100 samples at 16 kHz is exactly 2.14375 m.
        let d = 100.0 * SPEED_OF_SOUND / 16_000.0;
        let spec = spec_with([1.0, 2.0, 1.5], [1.0 + d, 2.0, 1.5], 0);
        let h = image_method_rir(&spec, 0, 0).unwrap();
        let want = 1.0 / (4.0 * PI * d);
        for (i, &v) in h.iter().enumerate() {
            if i == 100 {
                assert!((v - want).abs() < 1e-12);
            } else {
                assert!(v.abs() < 1e-6, "tap {i} = {v}");
            }
        }
    }

    #[test]
    fn doubling_distance_halves_direct_amplitude() {
        let d = 40.0 * SPEED_OF_SOUND / 16_000.0;
        let near = image_method_rir(&spec_with([1.0, 2.5, 1.5], [1.0 + d, 2.5, 1.5], 0), 0, 0).unwrap();
        let far = image_method_rir(&spec_with([1.0, 2.5, 1.5], [1.0 + 2.0 * d, 2.5, 1.5], 0), 0, 0).unwrap();
        assert!((near[40] - 2.0 * far[80]).abs() < 1e-12);
    }

    #[test]
    fn fractional_delay_keeps_energy_near_the_delay() {
        let spec = spec_with([1.0, 2.0, 1.5], [2.3, 2.7, 1.1], 0);
        let h = image_method_rir(&spec, 0, 0).unwrap();
        let d = ((1.3f64).powi(2) + 0.7f64.powi(2) + 0.4f64.powi(2)).sqrt();
        let delay = d / SPEED_OF_SOUND * 16_000.0;
        let peak = h
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
            .unwrap()
            .0;
        assert!((peak as f64 - delay).abs() <= 1.0);
        let sum: f64 = h.iter().sum();
        assert!((sum - 1.0 / (4.0 * PI * d)).abs() < 0.02 / (4.0 * PI * d));
    }

    #[test]
    fn schroeder_recovers_exponential_decay() {
        let fs = 16_000;
        for rt in [0.078, 0.351, 0.8] {
            let len = (2.0 * rt * fs as f64) as usize;
            let decay = 3.0 * 10f64.ln() / rt;
            let h: Vec<f64> = (0..len).map(|i| (-(i as f64) / fs as f64 * decay).exp()).collect();
            let est = schroeder_rt60(&h, fs).unwrap();
            assert!((est - rt).abs() < 0.01 * rt, "{rt}: {est}");
        }
    }

    #[test]
    fn fitted_room_reverberates_at_target() {
        let spec = RoomSpec::with_rt60(
            [6.0, 5.0, 3.0],
            vec![[2.98, 2.0, 1.5], [3.02, 2.0, 1.5]],
            vec![[1.85, 2.96, 1.5], [4.15, 2.96, 1.5]],
            0.078,
            16_000,
            AbsorptionFormula::Fitted,
        )
        .unwrap();
        for j in 0..2 {
            for i in 0..2 {
                let est = schroeder_rt60(&image_method_rir(&spec, j, i).unwrap(), 16_000).unwrap();
                assert!((est - 0.078).abs() <= 0.3 * 0.078, "{j}->{i}: {est}");
            }
        }
    }

    #[test]
    fn closed_form_absorption() {
        // V = 90, S = 126: Sabine needs alpha > 1 at 78 ms, Eyring does not.
        assert!(uniform_absorption([6.0, 5.0, 3.0], 0.078, AbsorptionFormula::Sabine).is_err());
        let a = uniform_absorption([6.0, 5.0, 3.0], 0.078, AbsorptionFormula::Eyring).unwrap();
        let ratio = 24.0 * 10f64.ln() / SPEED_OF_SOUND * 90.0 / (126.0 * 0.078);
        assert!((a - (1.0 - (-ratio).exp())).abs() < 1e-15);
        let s = uniform_absorption([6.0, 5.0, 3.0], 0.5, AbsorptionFormula::Sabine).unwrap();
        assert!((s - ratio * 0.078 / 0.5).abs() < 1e-15);
    }

    #[test]
    fn invalid_rooms_are_rejected() {
        let mut spec = spec_with([1.0, 2.0, 1.5], [7.0, 2.0, 1.5], 0);
        assert!(image_method_rir(&spec, 0, 0).is_err());
        spec.source_positions[0] = [2.0, 2.0, 1.5];
        spec.absorption[2] = 0.0;
        assert!(spec.validate().is_err());
        assert!(uniform_absorption([3.0, 3.0, 2.5], 0.01, AbsorptionFormula::Sabine).is_err());
    }
}

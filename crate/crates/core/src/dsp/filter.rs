//! Butterworth IIR design (analog prototype, band transform, bilinear
//! transform with pre-warping) realized as cascaded second-order sections.

use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FilterKind {
    Bandpass,
    Highpass,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterSpec {
    pub kind: FilterKind,
    /// Order of the analog lowpass prototype. A bandpass doubles it.
    pub order: usize,
    pub cutoffs_hz: Vec<f64>,
    pub sample_rate_hz: f64,
}

impl FilterSpec {
    pub fn bandpass(order: usize, low_hz: f64, high_hz: f64, sample_rate_hz: f64) -> Self {
        Self {
            kind: FilterKind::Bandpass,
            order,
            cutoffs_hz: vec![low_hz, high_hz],
            sample_rate_hz,
        }
    }

    pub fn highpass(order: usize, cutoff_hz: f64, sample_rate_hz: f64) -> Self {
        Self {
            kind: FilterKind::Highpass,
            order,
            cutoffs_hz: vec![cutoff_hz],
            sample_rate_hz,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.order == 0 {
            return Err(Error::Design("order must be at least 1".into()));
        }
        if !(self.sample_rate_hz > 0.0) {
            return Err(Error::Design("sample rate must be positive".into()));
        }
        let nyquist = self.sample_rate_hz / 2.0;
        let expected = match self.kind {
            FilterKind::Bandpass => 2,
            FilterKind::Highpass => 1,
        };
        if self.cutoffs_hz.len() != expected {
            return Err(Error::Design(format!(
                "{:?} needs {expected} cutoff(s), got {}",
                self.kind,
                self.cutoffs_hz.len()
            )));
        }
        for &f in &self.cutoffs_hz {
            if !(f > 0.0 && f < nyquist) {
                return Err(Error::Design(format!(
                    "cutoff {f} Hz outside (0, {nyquist}) Hz"
                )));
            }
        }
        if self.kind == FilterKind::Bandpass && self.cutoffs_hz[0] >= self.cutoffs_hz[1] {
            return Err(Error::Design("bandpass requires low < high".into()));
        }
        Ok(())
    }
}

/// `y = (b0 + b1 z^-1 + b2 z^-2) / (1 + a1 z^-1 + a2 z^-2) x`
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Biquad {
    pub b0: f64,
    pub b1: f64,
    pub b2: f64,
    pub a1: f64,
    pub a2: f64,
}

impl Biquad {
    pub fn response(&self, z_inv: Complex64) -> Complex64 {
        let z2 = z_inv * z_inv;
        (self.b0 + self.b1 * z_inv + self.b2 * z2) / (1.0 + self.a1 * z_inv + self.a2 * z2)
    }

    /// Roots of `z^2 + a1 z + a2`.
    pub fn poles(&self) -> [Complex64; 2] {
        let disc = Complex64::new(self.a1 * self.a1 - 4.0 * self.a2, 0.0).sqrt();
        [(-self.a1 + disc) / 2.0, (-self.a1 - disc) / 2.0]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BiquadCascade {
    pub sections: Vec<Biquad>,
    state: Vec<[f64; 2]>,
}

impl BiquadCascade {
    pub fn new(sections: Vec<Biquad>) -> Self {
        let state = vec![[0.0; 2]; sections.len()];
        Self { sections, state }
    }

    pub fn reset(&mut self) {
        self.state.iter_mut().for_each(|s| *s = [0.0; 2]);
    }

    /// Direct-form II transposed, continuing from the current state.
    pub fn process(&mut self, x: &[f64]) -> Vec<f64> {
        let mut y = x.to_vec();
        for (sec, st) in self.sections.iter().zip(self.state.iter_mut()) {
            for v in y.iter_mut() {
                let input = *v;
                let out = sec.b0 * input + st[0];
                st[0] = sec.b1 * input - sec.a1 * out + st[1];
                st[1] = sec.b2 * input - sec.a2 * out;
                *v = out;
            }
        }
        y
    }

    /// Complex response at `freq_hz`.
    pub fn response(&self, freq_hz: f64, sample_rate_hz: f64) -> Complex64 {
        let w = 2.0 * PI * freq_hz / sample_rate_hz;
        let z_inv = Complex64::from_polar(1.0, -w);
        self.sections
            .iter()
            .fold(Complex64::new(1.0, 0.0), |acc, s| acc * s.response(z_inv))
    }

    pub fn magnitude(&self, freq_hz: f64, sample_rate_hz: f64) -> f64 {
        self.response(freq_hz, sample_rate_hz).norm()
    }

    pub fn poles(&self) -> Vec<Complex64> {
        self.sections.iter().flat_map(|s| s.poles()).collect()
    }

    pub fn is_stable(&self) -> bool {
        self.poles().iter().all(|p| p.norm() < 1.0)
    }
}

/// Filters `x` from zero initial state.
pub fn filter_signal(cascade: &BiquadCascade, x: &[f64]) -> Vec<f64> {
    let mut c = cascade.clone();
    c.reset();
    c.process(x)
}

pub fn design_butterworth(spec: &FilterSpec) -> Result<BiquadCascade> {
    spec.validate()?;
    let n = spec.order;
    let fs = spec.sample_rate_hz;
    let warp = |f: f64| 2.0 * fs * (PI * f / fs).tan();

    // Analog lowpass prototype: poles on the unit circle's left half.
    let proto: Vec<Complex64> = (0..n)
        .map(|i| {
            let m = -(n as f64) + 1.0 + 2.0 * i as f64;
            -Complex64::from_polar(1.0, PI * m / (2.0 * n as f64))
        })
        .collect();

    let (zeros, poles, gain) = match spec.kind {
        FilterKind::Highpass => {
            let wo = warp(spec.cutoffs_hz[0]);
            let poles: Vec<Complex64> = proto.iter().map(|p| wo / p).collect();
            let prod = proto
                .iter()
                .fold(Complex64::new(1.0, 0.0), |acc, p| acc * -p);
            (vec![Complex64::new(0.0, 0.0); n], poles, 1.0 / prod.re)
        }
        FilterKind::Bandpass => {
            let w1 = warp(spec.cutoffs_hz[0]);
            let w2 = warp(spec.cutoffs_hz[1]);
            let bw = w2 - w1;
            let wo = (w1 * w2).sqrt();
            let mut poles = Vec::with_capacity(2 * n);
            for p in &proto {
                let scaled = p * bw / 2.0;
                let root = (scaled * scaled - wo * wo).sqrt();
                poles.push(scaled + root);
                poles.push(scaled - root);
            }
            (
                vec![Complex64::new(0.0, 0.0); n],
                poles,
                bw.powi(n as i32),
            )
        }
    };

    // Bilinear transform; surplus analog zeros at infinity map to z = -1.
    let fs2 = 2.0 * fs;
    let mut dzeros: Vec<Complex64> = zeros.iter().map(|z| (fs2 + z) / (fs2 - z)).collect();
    let dpoles: Vec<Complex64> = poles.iter().map(|p| (fs2 + p) / (fs2 - p)).collect();
    dzeros.resize(dpoles.len(), Complex64::new(-1.0, 0.0));
    let num = zeros
        .iter()
        .fold(Complex64::new(1.0, 0.0), |acc, z| acc * (fs2 - z));
    let den = poles
        .iter()
        .fold(Complex64::new(1.0, 0.0), |acc, p| acc * (fs2 - p));
    let dgain = gain * (num / den).re;

    Ok(BiquadCascade::new(zpk_to_sos(&dzeros, &dpoles, dgain)))
}

/// Groups roots into conjugate pairs (real roots pair with each other).
fn pair_roots(roots: &[Complex64]) -> Vec<(Complex64, Option<Complex64>)> {
    const TOL: f64 = 1e-10;
    let mut complex: Vec<Complex64> = roots.iter().copied().filter(|r| r.im > TOL).collect();
    complex.sort_by(|a, b| a.re.total_cmp(&b.re).then(a.im.total_cmp(&b.im)));
    let mut real: Vec<f64> = roots
        .iter()
        .filter(|r| r.im.abs() <= TOL)
        .map(|r| r.re)
        .collect();
    real.sort_by(f64::total_cmp);

    let mut pairs: Vec<(Complex64, Option<Complex64>)> =
        complex.into_iter().map(|c| (c, Some(c.conj()))).collect();
    for chunk in real.chunks(2) {
        let a = Complex64::new(chunk[0], 0.0);
        pairs.push((a, chunk.get(1).map(|&b| Complex64::new(b, 0.0))));
    }
    pairs
}

fn quadratic(pair: &(Complex64, Option<Complex64>)) -> [f64; 3] {
    match pair.1 {
        Some(b) => [1.0, -(pair.0 + b).re, (pair.0 * b).re],
        None => [1.0, -pair.0.re, 0.0],
    }
}

fn zpk_to_sos(zeros: &[Complex64], poles: &[Complex64], gain: f64) -> Vec<Biquad> {
    let zp = pair_roots(zeros);
    let pp = pair_roots(poles);
    pp.iter()
        .enumerate()
        .map(|(i, p)| {
            let a = quadratic(p);
            let mut b = zp.get(i).map_or([1.0, 0.0, 0.0], quadratic);
            if i == 0 {
                b.iter_mut().for_each(|v| *v *= gain);
            }
            Biquad {
                b0: b[0],
                b1: b[1],
                b2: b[2],
                a1: a[1],
                a2: a[2],
            }
        })
        .collect()
}

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ResampleConfig {
    pub target_rate_hz: f64,
    pub kaiser_beta: f64,
    /// FIR half-width in units of `max(L, M)` taps.
    pub taps_per_phase: usize,
}

impl Default for ResampleConfig {
    fn default() -> Self {
        Self {
            target_rate_hz: 128.0,
            kaiser_beta: 5.0,
            taps_per_phase: 10,
        }
    }
}

/// Modified Bessel function of the first kind, order zero (power series).
pub fn bessel_i0(x: f64) -> f64 {
    let q = x * x / 4.0;
    let mut term = 1.0;
    let mut sum = 1.0;
    for k in 1..500 {
        term *= q / (k * k) as f64;
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

/// Symmetric Kaiser window of `len` points.
pub fn kaiser_window(len: usize, beta: f64) -> Vec<f64> {
    if len == 1 {
        return vec![1.0];
    }
    let denom = bessel_i0(beta);
    let half = (len - 1) as f64 / 2.0;
    (0..len)
        .map(|i| {
            let r = (i as f64 - half) / half;
            bessel_i0(beta * (1.0 - r * r).max(0.0).sqrt()) / denom
        })
        .collect()
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// `(L, M)` with `L / M = to / from` in lowest terms. Rates are taken at
/// millihertz resolution.
pub fn rational_ratio(from_hz: f64, to_hz: f64) -> Result<(usize, usize)> {
    if !(from_hz > 0.0 && to_hz > 0.0) {
        return Err(Error::Config(format!(
            "sample rates must be positive (got {from_hz} -> {to_hz})"
        )));
    }
    let a = (to_hz * 1000.0).round() as u64;
    let b = (from_hz * 1000.0).round() as u64;
    let g = gcd(a, b);
    Ok(((a / g) as usize, (b / g) as usize))
}

/// Polyphase decomposition of a Kaiser-windowed sinc interpolation filter.
#[derive(Debug, Clone)]
pub struct PolyphaseFilter {
    pub up: usize,
    pub down: usize,
    /// Prototype taps `h[n]` for `n` in `-half..=half` (index `n + half`).
    pub taps: Vec<f64>,
    pub half: usize,
}

impl PolyphaseFilter {
    pub fn design(up: usize, down: usize, beta: f64, taps_per_phase: usize) -> Self {
        let half = taps_per_phase.max(1) * up.max(down);
        let cutoff = (PI / up as f64).min(PI / down as f64);
        let window = kaiser_window(2 * half + 1, beta);
        let mut taps: Vec<f64> = (0..=2 * half)
            .map(|i| {
                let n = i as f64 - half as f64;
                let x = cutoff * n / PI;
                let sinc = if n == 0.0 { 1.0 } else { (PI * x).sin() / (PI * x) };
                up as f64 * cutoff / PI * sinc * window[i]
            })
            .collect();
        // Unit DC gain in every phase.
        for phase in 0..up {
            let members: Vec<usize> = (0..taps.len())
                .filter(|&i| (i as i64 - half as i64).rem_euclid(up as i64) as usize == phase)
                .collect();
            let sum: f64 = members.iter().map(|&i| taps[i]).sum();
            if sum.abs() > 0.0 {
                members.iter().for_each(|&i| taps[i] /= sum);
            }
        }
        Self {
            up,
            down,
            taps,
            half,
        }
    }

    /// `y[m] = sum_k x[k] h[m M - k L]`, zero-phase, `ceil(len L / M)` outputs.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let (l, m) = (self.up as i64, self.down as i64);
        let half = self.half as i64;
        let out_len = (x.len() * self.up).div_ceil(self.down);
        (0..out_len as i64)
            .map(|j| {
                let centre = j * m;
                let k_lo = ((centre - half) as f64 / l as f64).ceil().max(0.0) as i64;
                let k_hi = ((centre + half).div_euclid(l)).min(x.len() as i64 - 1);
                (k_lo..=k_hi)
                    .map(|k| x[k as usize] * self.taps[(centre - k * l + half) as usize])
                    .sum()
            })
            .collect()
    }
}

pub fn resample_polyphase(x: &[f64], in_rate_hz: f64, cfg: &ResampleConfig) -> Result<Vec<f64>> {
    if !(cfg.kaiser_beta >= 0.0) {
        return Err(Error::Config("kaiser_beta must be non-negative".into()));
    }
    let (up, down) = rational_ratio(in_rate_hz, cfg.target_rate_hz)?;
    if up == 1 && down == 1 {
        return Ok(x.to_vec());
    }
    Ok(PolyphaseFilter::design(up, down, cfg.kaiser_beta, cfg.taps_per_phase).apply(x))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn snr_db(signal: &[f64], reference: &[f64]) -> f64 {
        let p: f64 = reference.iter().map(|v| v * v).sum();
        let e: f64 = signal
            .iter()
            .zip(reference)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        10.0 * (p / e).log10()
    }

    #[test]
    fn identity_at_target_rate() {
        let x: Vec<f64> = (0..100).map(|i| (i as f64).sqrt()).collect();
        assert_eq!(resample_polyphase(&x, 128.0, &ResampleConfig::default()).unwrap(), x);
    }

    #[test]
    fn ratio_reduction() {
        assert_eq!(rational_ratio(256.0, 128.0).unwrap(), (1, 2));
        assert_eq!(rational_ratio(200.0, 128.0).unwrap(), (16, 25));
        assert_eq!(rational_ratio(100.0, 128.0).unwrap(), (32, 25));
        assert!(rational_ratio(0.0, 128.0).is_err());
    }

    #[test]
    fn i0_reference_values() {
        // I0(1) and I0(5) from standard tables.
        assert!((bessel_i0(0.0) - 1.0).abs() < 1e-15);
        assert!((bessel_i0(1.0) - 1.266_065_877_752_008_4).abs() < 1e-14);
        assert!((bessel_i0(5.0) - 27.239_871_823_604_44).abs() < 1e-11);
    }

    #[test]
    fn downsampled_tone_snr() {
        let fs = 256.0;
        let x: Vec<f64> = (0..2560)
            .map(|i| (2.0 * PI * 5.0 * i as f64 / fs).sin())
            .collect();
        let y = resample_polyphase(&x, fs, &ResampleConfig::default()).unwrap();
        assert_eq!(y.len(), 1280);
        let ideal: Vec<f64> = (0..1280)
            .map(|i| (2.0 * PI * 5.0 * i as f64 / 128.0).sin())
            .collect();
        let (a, b) = (128, 1280 - 128);
        let snr = snr_db(&y[a..b], &ideal[a..b]);
        assert!(snr > 60.0, "snr {snr}");
    }

    #[test]
    fn upsampled_tone_snr() {
        let fs = 100.0;
        let x: Vec<f64> = (0..1000)
            .map(|i| (2.0 * PI * 7.0 * i as f64 / fs).cos())
            .collect();
        let y = resample_polyphase(&x, fs, &ResampleConfig::default()).unwrap();
        assert_eq!(y.len(), 1280);
        let ideal: Vec<f64> = (0..1280)
            .map(|i| (2.0 * PI * 7.0 * i as f64 / 128.0).cos())
            .collect();
        let snr = snr_db(&y[128..1152], &ideal[128..1152]);
        assert!(snr > 60.0, "snr {snr}");
    }

    #[test]
    fn output_length_rounds_up() {
        let y = resample_polyphase(&[1.0; 11], 256.0, &ResampleConfig::default()).unwrap();
        assert_eq!(y.len(), 6);
    }
}

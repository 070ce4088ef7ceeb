//! Synthetic polysomnography records with planted arousal events.
//!
//! Records carry the canonical five-channel montage (two central EEG, two
//! EOG, chin EMG). Background activity is colored noise with a power-law
//! spectrum; each planted arousal adds a burst of 16-40 Hz activity to the
//! EEG/EOG channels and raises the EMG amplitude for its duration.

mod dataset;
mod format;
mod partition;

pub use dataset::{write_dataset, Dataset, Manifest, MANIFEST_FILE};
pub use format::{load_record, load_record_channels, save_record, RECORD_MAGIC, RECORD_VERSION};
pub use partition::{partition, Partition, PartitionSpec, Subset};

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

pub const EEG_C3: &str = "EEG-C3";
pub const EEG_C4: &str = "EEG-C4";
pub const EOG_L: &str = "EOG-L";
pub const EOG_R: &str = "EOG-R";
pub const EMG_CHIN: &str = "EMG-chin";

/// Canonical channel order of a full montage record.
pub const CANONICAL_CHANNELS: [&str; 5] = [EEG_C3, EEG_C4, EOG_L, EOG_R, EMG_CHIN];

/// Class label of an arousal (the only event class).
pub const AROUSAL_LABEL: u32 = 1;

/// Minimum separation between planted events, in seconds.
pub const MIN_EVENT_GAP_S: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modality {
    Eeg,
    Eog,
    Emg,
}

impl Modality {
    pub fn of_channel(name: &str) -> Result<Self> {
        match name {
            EEG_C3 | EEG_C4 => Ok(Modality::Eeg),
            EOG_L | EOG_R => Ok(Modality::Eog),
            EMG_CHIN => Ok(Modality::Emg),
            other => Err(Error::UnknownChannel(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EventInterval {
    pub start_s: f64,
    pub duration_s: f64,
    pub label: u32,
}

impl EventInterval {
    pub fn arousal(start_s: f64, duration_s: f64) -> Self {
        Self {
            start_s,
            duration_s,
            label: AROUSAL_LABEL,
        }
    }

    pub fn end_s(&self) -> f64 {
        self.start_s + self.duration_s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Channel {
    pub name: String,
    pub samples: Vec<f64>,
}

/// One recording: equally long channels sampled at a common rate plus the
/// scored events.
#[derive(Debug, Clone, PartialEq)]
pub struct SignalRecord {
    pub record_id: String,
    pub sample_rate_hz: f64,
    pub channels: Vec<Channel>,
    pub events: Vec<EventInterval>,
    pub duration_s: f64,
}

impl SignalRecord {
    pub fn n_samples(&self) -> usize {
        self.channels.first().map_or(0, |c| c.samples.len())
    }

    pub fn channel(&self, name: &str) -> Option<&Channel> {
        self.channels.iter().find(|c| c.name == name)
    }

    pub fn channel_names(&self) -> Vec<&str> {
        self.channels.iter().map(|c| c.name.as_str()).collect()
    }

    /// Keeps only `names`, in the given order.
    pub fn select_channels(&self, names: &[&str]) -> Result<SignalRecord> {
        let channels = names
            .iter()
            .map(|n| {
                self.channel(n)
                    .cloned()
                    .ok_or_else(|| Error::UnknownChannel(n.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(SignalRecord {
            channels,
            ..self.clone()
        })
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sample_rate_hz > 0.0) || !self.sample_rate_hz.is_finite() {
            return Err(Error::Validation(format!(
                "{}: sample rate {} must be positive",
                self.record_id, self.sample_rate_hz
            )));
        }
        if !(self.duration_s > 0.0) || !self.duration_s.is_finite() {
            return Err(Error::Validation(format!(
                "{}: duration {} must be positive",
                self.record_id, self.duration_s
            )));
        }
        let expected = (self.duration_s * self.sample_rate_hz).round() as usize;
        for (i, ch) in self.channels.iter().enumerate() {
            if ch.samples.len() != expected {
                return Err(Error::Validation(format!(
                    "{}: channel {} has {} samples, expected {}",
                    self.record_id,
                    ch.name,
                    ch.samples.len(),
                    expected
                )));
            }
            if self.channels[..i].iter().any(|o| o.name == ch.name) {
                return Err(Error::Validation(format!(
                    "{}: duplicate channel {}",
                    self.record_id, ch.name
                )));
            }
        }
        for ev in &self.events {
            if !(ev.duration_s > 0.0) {
                return Err(Error::Validation(format!(
                    "{}: event at {} s has non-positive duration",
                    self.record_id, ev.start_s
                )));
            }
            if ev.start_s < 0.0 || ev.end_s() > self.duration_s {
                return Err(Error::Validation(format!(
                    "{}: event [{}, {}] outside record of {} s",
                    self.record_id,
                    ev.start_s,
                    ev.end_s(),
                    self.duration_s
                )));
            }
        }
        Ok(())
    }
}

/// Parameters of the synthetic record generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub n_records: usize,
    pub record_duration_s: f64,
    pub channel_sample_rate_hz: f64,
    /// Poisson mean of the number of events per record.
    pub events_per_record: f64,
    pub event_duration_range_s: (f64, f64),
    /// Burst amplitude relative to the unit-RMS background.
    pub event_snr: f64,
    /// Spectral exponent of the EEG/EOG background (PSD ~ 1/f^beta).
    pub background_spectrum_exponent: f64,
    /// Probability that a record is generated without any events.
    pub eventless_fraction: f64,
    pub rng_seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            n_records: 60,
            record_duration_s: 600.0,
            channel_sample_rate_hz: 256.0,
            events_per_record: 20.0,
            event_duration_range_s: (3.0, 15.0),
            event_snr: 1.0,
            background_spectrum_exponent: 1.0,
            eventless_fraction: 0.02,
            rng_seed: 7,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, why: &str| Err(Error::Config(format!("{field}: {why}")));
        if self.n_records == 0 {
            return bad("n_records", "must be at least 1");
        }
        if !(self.record_duration_s > 0.0) {
            return bad("record_duration_s", "must be positive");
        }
        if !(self.channel_sample_rate_hz > 80.0) {
            // The burst band reaches 40 Hz.
            return bad("channel_sample_rate_hz", "must exceed 80 Hz");
        }
        if !(0.0..=500.0).contains(&self.events_per_record) {
            return bad("events_per_record", "must lie in [0, 500]");
        }
        let (lo, hi) = self.event_duration_range_s;
        if !(lo >= 3.0 && hi <= 15.0 && lo <= hi) {
            return bad("event_duration_range_s", "must satisfy 3 <= min <= max <= 15");
        }
        if hi > self.record_duration_s {
            return bad("event_duration_range_s", "events longer than the record");
        }
        if !(self.event_snr >= 0.0) {
            return bad("event_snr", "must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.eventless_fraction) {
            return bad("eventless_fraction", "must lie in [0, 1]");
        }
        if !self.background_spectrum_exponent.is_finite() {
            return bad("background_spectrum_exponent", "must be finite");
        }
        Ok(())
    }
}

/// A generated record together with the clean burst waveform that was mixed
/// into its EEG channels.
#[derive(Debug, Clone)]
pub struct GeneratedRecord {
    pub record: SignalRecord,
    pub clean_burst: Vec<f64>,
}

pub fn record_id(index: usize) -> String {
    format!("rec{index:05}")
}

/// Generates record `index`; a pure function of `(cfg, index)`.
pub fn generate_record(cfg: &GeneratorConfig, index: usize) -> Result<SignalRecord> {
    generate_record_parts(cfg, index).map(|g| g.record)
}

/// Draws the event list of record `index`.
///
/// Draw order on `Rng::stream(seed, index)`: one uniform for the eventless
/// gate, then `poisson(events_per_record)`, then per event up to 100
/// attempts of (duration uniform in range, start uniform in
/// `[0, record - duration)`), accepting the first candidate that keeps a
/// 1 s gap to every accepted event. Accepted events are sorted by start.
pub fn draw_events(cfg: &GeneratorConfig, rng: &mut Rng) -> Vec<EventInterval> {
    let gate = rng.uniform();
    if gate < cfg.eventless_fraction {
        return Vec::new();
    }
    let count = rng.poisson(cfg.events_per_record);
    let (lo, hi) = cfg.event_duration_range_s;
    let mut events: Vec<EventInterval> = Vec::with_capacity(count as usize);
    for _ in 0..count {
        for _attempt in 0..100 {
            let duration = rng.uniform_range(lo, hi);
            let start = rng.uniform_range(0.0, cfg.record_duration_s - duration);
            let clear = events.iter().all(|e| {
                start >= e.end_s() + MIN_EVENT_GAP_S || start + duration + MIN_EVENT_GAP_S <= e.start_s
            });
            if clear {
                events.push(EventInterval::arousal(start, duration));
                break;
            }
        }
    }
    events.sort_by(|a, b| a.start_s.total_cmp(&b.start_s));
    events
}

pub fn generate_record_parts(cfg: &GeneratorConfig, index: usize) -> Result<GeneratedRecord> {
    cfg.validate()?;
    if index >= cfg.n_records {
        return Err(Error::Config(format!(
            "record index {index} out of range for n_records = {}",
            cfg.n_records
        )));
    }
    let mut rng = Rng::stream(cfg.rng_seed, index as u64);
    let events = draw_events(cfg, &mut rng);

    let fs = cfg.channel_sample_rate_hz;
    let n = (cfg.record_duration_s * fs).round() as usize;
    let mut planner = FftPlanner::new();

    let envelope = event_envelope(&events, n, fs);
    let mut source = shaped_noise(&mut rng, &mut planner, n, fs, |f| {
        if (16.0..=40.0).contains(&f) {
            1.0
        } else {
            0.0
        }
    });
    normalize_rms(&mut source);
    let clean_burst: Vec<f64> = source
        .iter()
        .zip(&envelope)
        .map(|(s, e)| cfg.event_snr * s * e)
        .collect();

    let beta = cfg.background_spectrum_exponent;
    let mut channels = Vec::with_capacity(CANONICAL_CHANNELS.len());
    for name in CANONICAL_CHANNELS {
        let modality = Modality::of_channel(name)?;
        let samples = match modality {
            Modality::Eeg | Modality::Eog => {
                let mut bg = shaped_noise(&mut rng, &mut planner, n, fs, |f| {
                    if f < 0.1 {
                        0.0
                    } else {
                        f.powf(-beta / 2.0)
                    }
                });
                normalize_rms(&mut bg);
                let gain = if modality == Modality::Eeg { 1.0 } else { 0.6 };
                bg.iter()
                    .zip(&clean_burst)
                    .map(|(b, s)| b + gain * s)
                    .collect::<Vec<_>>()
            }
            Modality::Emg => (0..n)
                .map(|i| rng.normal() * (1.0 + 0.5 * cfg.event_snr * envelope[i]))
                .collect(),
        };
        channels.push(Channel {
            name: name.to_string(),
            samples: samples.into_iter().map(|x| x as f32 as f64).collect(),
        });
    }

    let record = SignalRecord {
        record_id: record_id(index),
        sample_rate_hz: fs,
        channels,
        events,
        duration_s: cfg.record_duration_s,
    };
    record.validate()?;
    Ok(GeneratedRecord {
        record,
        clean_burst,
    })
}

/// 1 inside each event with 0.25 s raised-cosine edges, 0 elsewhere.
fn event_envelope(events: &[EventInterval], n: usize, fs: f64) -> Vec<f64> {
    let mut env = vec![0.0; n];
    let ramp = 0.25;
    for ev in events {
        let first = (ev.start_s * fs).ceil() as usize;
        let last = ((ev.end_s() * fs).floor() as usize).min(n.saturating_sub(1));
        for (i, slot) in env.iter_mut().enumerate().take(last + 1).skip(first) {
            let t = i as f64 / fs;
            let edge = (t - ev.start_s).min(ev.end_s() - t);
            *slot = if edge >= ramp {
                1.0
            } else {
                0.5 - 0.5 * (std::f64::consts::PI * edge.max(0.0) / ramp).cos()
            };
        }
    }
    env
}

/// White Gaussian noise filtered in the frequency domain by `gain(f_hz)`.
fn shaped_noise(
    rng: &mut Rng,
    planner: &mut FftPlanner<f64>,
    n: usize,
    fs: f64,
    gain: impl Fn(f64) -> f64,
) -> Vec<f64> {
    let mut buf: Vec<Complex64> = (0..n).map(|_| Complex64::new(rng.normal(), 0.0)).collect();
    planner.plan_fft_forward(n).process(&mut buf);
    for (k, v) in buf.iter_mut().enumerate() {
        let bin = k.min(n - k);
        let f = bin as f64 * fs / n as f64;
        *v *= gain(f);
    }
    planner.plan_fft_inverse(n).process(&mut buf);
    buf.iter().map(|c| c.re / n as f64).collect()
}

fn normalize_rms(x: &mut [f64]) {
    let rms = (x.iter().map(|v| v * v).sum::<f64>() / x.len().max(1) as f64).sqrt();
    if rms > 0.0 {
        x.iter_mut().for_each(|v| *v /= rms);
    }
}

//! Preprocessing: resampling to a common rate, per-modality Butterworth
//! filtering and per-record channel standardization.

mod filter;
mod resample;

pub use filter::{design_butterworth, filter_signal, Biquad, BiquadCascade, FilterKind, FilterSpec};
pub use resample::{
    bessel_i0, kaiser_window, rational_ratio, resample_polyphase, PolyphaseFilter,
    ResampleConfig,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synthdata::{Channel, Modality, SignalRecord};

/// Channels whose population standard deviation falls below this are
/// treated as flat: sigma is replaced by 1 and the channel is flagged.
pub const SIGMA_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct Standardization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub flagged: Vec<bool>,
}

/// Per-channel `(x - mean) / std` with population statistics, in place.
pub fn standardize_channels(channels: &mut [Vec<f64>]) -> Result<Standardization> {
    let mut stats = Standardization {
        mean: Vec::with_capacity(channels.len()),
        std: Vec::with_capacity(channels.len()),
        flagged: Vec::with_capacity(channels.len()),
    };
    for x in channels.iter_mut() {
        if x.len() < 2 {
            return Err(Error::Validation(format!(
                "standardization needs at least 2 samples, got {}",
                x.len()
            )));
        }
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let mut std = var.sqrt();
        let flat = std < SIGMA_FLOOR;
        if flat {
            std = 1.0;
        }
        x.iter_mut().for_each(|v| *v = (*v - mean) / std);
        stats.mean.push(mean);
        stats.std.push(std);
        stats.flagged.push(flat);
    }
    Ok(stats)
}

pub fn standardize(record: &SignalRecord) -> Result<(SignalRecord, Standardization)> {
    let mut data: Vec<Vec<f64>> = record.channels.iter().map(|c| c.samples.clone()).collect();
    let stats = standardize_channels(&mut data)?;
    let channels = record
        .channels
        .iter()
        .zip(data)
        .map(|(c, samples)| Channel {
            name: c.name.clone(),
            samples,
        })
        .collect();
    Ok((
        SignalRecord {
            channels,
            ..record.clone()
        },
        stats,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub resample: ResampleConfig,
    /// Prototype order of the EEG/EOG bandpass.
    pub eeg_eog_order: usize,
    pub eeg_eog_band_hz: (f64, f64),
    pub emg_order: usize,
    pub emg_highpass_hz: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            resample: ResampleConfig::default(),
            eeg_eog_order: 2,
            eeg_eog_band_hz: (0.3, 35.0),
            emg_order: 4,
            emg_highpass_hz: 10.0,
        }
    }
}

impl PipelineConfig {
    pub fn filter_for(&self, modality: Modality) -> FilterSpec {
        let fs = self.resample.target_rate_hz;
        match modality {
            Modality::Eeg | Modality::Eog => FilterSpec::bandpass(
                self.eeg_eog_order,
                self.eeg_eog_band_hz.0,
                self.eeg_eog_band_hz.1,
                fs,
            ),
            Modality::Emg => FilterSpec::highpass(self.emg_order, self.emg_highpass_hz, fs),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreprocessedRecord {
    pub record: SignalRecord,
    pub stats: Standardization,
}

/// Resample every channel to the target rate, filter it according to its
/// modality, then standardize. Event annotations pass through unchanged.
pub fn preprocess_record(record: &SignalRecord, cfg: &PipelineConfig) -> Result<PreprocessedRecord> {
    let fs = cfg.resample.target_rate_hz;
    let mut data = Vec::with_capacity(record.channels.len());
    for ch in &record.channels {
        let modality = Modality::of_channel(&ch.name)?;
        let resampled = resample_polyphase(&ch.samples, record.sample_rate_hz, &cfg.resample)?;
        let cascade = design_butterworth(&cfg.filter_for(modality))?;
        data.push(filter_signal(&cascade, &resampled));
    }
    let expected = (record.duration_s * fs).round() as usize;
    for x in data.iter_mut() {
        // Rounding of ceil(len L / M) can leave one extra sample.
        x.resize(expected, *x.last().unwrap_or(&0.0));
    }
    let stats = standardize_channels(&mut data)?;
    let channels = record
        .channels
        .iter()
        .zip(data)
        .map(|(c, samples)| Channel {
            name: c.name.clone(),
            samples,
        })
        .collect();
    let out = SignalRecord {
        record_id: record.record_id.clone(),
        sample_rate_hz: fs,
        channels,
        events: record.events.clone(),
        duration_s: record.duration_s,
    };
    out.validate()?;
    Ok(PreprocessedRecord { record: out, stats })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{generate_record, GeneratorConfig, EEG_C3};

    #[test]
    fn standardize_hand_example() {
        let mut data = vec![vec![1.0, 2.0, 3.0]];
        let s = standardize_channels(&mut data).unwrap();
        assert!((s.mean[0] - 2.0).abs() < 1e-15);
        assert!((s.std[0] - 0.816_496_580_927_726).abs() < 1e-12);
        let want = [-1.224_744_871_391_589, 0.0, 1.224_744_871_391_589];
        for (a, b) in data[0].iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_channel_is_flagged() {
        let mut data = vec![vec![4.0; 10], vec![0.0, 1.0]];
        let s = standardize_channels(&mut data).unwrap();
        assert_eq!(s.flagged, vec![true, false]);
        assert!(data[0].iter().all(|&v| v == 0.0));
        assert_eq!(s.std[0], 1.0);
    }

    #[test]
    fn too_short_channel() {
        assert!(standardize_channels(&mut [vec![1.0]]).is_err());
    }

    fn gen() -> SignalRecord {
        let cfg = GeneratorConfig {
            n_records: 1,
            record_duration_s: 60.0,
            events_per_record: 3.0,
            ..GeneratorConfig::default()
        };
        generate_record(&cfg, 0).unwrap()
    }

    #[test]
    fn preprocess_shapes_and_moments() {
        let rec = gen();
        let out = preprocess_record(&rec, &PipelineConfig::default()).unwrap();
        assert_eq!(out.record.channels.len(), 5);
        assert_eq!(out.record.sample_rate_hz, 128.0);
        assert_eq!(out.record.n_samples(), 60 * 128);
        assert_eq!(out.record.events, rec.events);
        for ch in &out.record.channels {
            let n = ch.samples.len() as f64;
            let mean = ch.samples.iter().sum::<f64>() / n;
            let var = ch.samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            assert!(mean.abs() < 1e-9);
            assert!((var.sqrt() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn single_eeg_record() {
        let rec = gen().select_channels(&[EEG_C3]).unwrap();
        let out = preprocess_record(&rec, &PipelineConfig::default()).unwrap();
        assert_eq!(out.record.channel_names(), vec![EEG_C3]);

        // Same as filtering C3 by hand with the EEG bandpass.
        let cfg = PipelineConfig::default();
        let resampled =
            resample_polyphase(&rec.channels[0].samples, 256.0, &cfg.resample).unwrap();
        let c = design_butterworth(&cfg.filter_for(Modality::Eeg)).unwrap();
        let mut manual = vec![filter_signal(&c, &resampled)];
        standardize_channels(&mut manual).unwrap();
        assert_eq!(manual[0], out.record.channels[0].samples);
    }

    #[test]
    fn already_at_target_rate() {
        let mut rec = gen();
        let resampled = preprocess_record(&rec, &PipelineConfig::default()).unwrap();
        rec.sample_rate_hz = 128.0;
        for ch in rec.channels.iter_mut() {
            ch.samples.truncate(60 * 128);
        }
        let out = preprocess_record(&rec, &PipelineConfig::default()).unwrap();
        assert_eq!(out.record.n_samples(), resampled.record.n_samples());
    }

    #[test]
    fn unknown_channel_is_mapping_error() {
        let mut rec = gen();
        rec.channels[0].name = "ECG".into();
        assert!(matches!(
            preprocess_record(&rec, &PipelineConfig::default()),
            Err(Error::UnknownChannel(_))
        ));
    }

    #[test]
    fn preprocessing_is_deterministic() {
        let rec = gen();
        let a = preprocess_record(&rec, &PipelineConfig::default()).unwrap();
        let b = preprocess_record(&rec, &PipelineConfig::default()).unwrap();
        assert_eq!(a, b);
    }
}

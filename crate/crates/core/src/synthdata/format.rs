//! `.psgbin` record files.
//!
//! Byte layout (all integers little-endian):
//!
//! | offset | size | content                                    |
//! |--------|------|--------------------------------------------|
//! | 0      | 4    | magic `PSGB`                               |
//! | 4      | 4    | format version (u32, currently 1)          |
//! | 8      | 8    | header length `H` in bytes (u64)           |
//! | 16     | H    | UTF-8 JSON header                          |
//! | 16 + H | ...  | samples as f32, channel-major, `n_samples` per channel |
//!
//! The header holds `record_id`, `sample_rate_hz`, `duration_s`,
//! `n_samples`, `channels` (names in storage order) and `events`
//! (`start_s`, `duration_s`, `label`).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Channel, EventInterval, SignalRecord};
use crate::error::{Error, Result};

pub const RECORD_MAGIC: [u8; 4] = *b"PSGB";
pub const RECORD_VERSION: u32 = 1;
const PREAMBLE: u64 = 16;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    record_id: String,
    sample_rate_hz: f64,
    duration_s: f64,
    n_samples: usize,
    channels: Vec<String>,
    events: Vec<EventInterval>,
}

pub fn save_record(record: &SignalRecord, path: &Path) -> Result<()> {
    record.validate()?;
    let header = Header {
        record_id: record.record_id.clone(),
        sample_rate_hz: record.sample_rate_hz,
        duration_s: record.duration_s,
        n_samples: record.n_samples(),
        channels: record.channels.iter().map(|c| c.name.clone()).collect(),
        events: record.events.clone(),
    };
    let json = serde_json::to_vec(&header)?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut write = |bytes: &[u8]| w.write_all(bytes).map_err(|e| Error::io(path, e));
    write(&RECORD_MAGIC)?;
    write(&RECORD_VERSION.to_le_bytes())?;
    write(&(json.len() as u64).to_le_bytes())?;
    write(&json)?;
    for ch in &record.channels {
        let mut block = Vec::with_capacity(ch.samples.len() * 4);
        for &x in &ch.samples {
            block.extend_from_slice(&(x as f32).to_le_bytes());
        }
        write(&block)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_record(path: &Path) -> Result<SignalRecord> {
    load_record_channels(path, None)
}

/// Loads a record, decoding only the named channels when `only` is given.
/// Unselected channel blocks are skipped without being read.
pub fn load_record_channels(path: &Path, only: Option<&[&str]>) -> Result<SignalRecord> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let file_len = file.metadata().map_err(|e| Error::io(path, e))?.len();
    let mut r = BufReader::new(file);

    let mut preamble = [0u8; PREAMBLE as usize];
    read_exact_at(&mut r, &mut preamble, 0, path)?;
    if preamble[..4] != RECORD_MAGIC {
        return Err(Error::Parse {
            offset: 0,
            message: "bad magic".into(),
        });
    }
    let version = u32::from_le_bytes(preamble[4..8].try_into().unwrap());
    if version != RECORD_VERSION {
        return Err(Error::Version {
            found: version,
            expected: RECORD_VERSION,
        });
    }
    let header_len = u64::from_le_bytes(preamble[8..16].try_into().unwrap());
    if PREAMBLE + header_len > file_len {
        return Err(Error::Parse {
            offset: PREAMBLE,
            message: format!("header length {header_len} exceeds file size {file_len}"),
        });
    }
    let mut json = vec![0u8; header_len as usize];
    read_exact_at(&mut r, &mut json, PREAMBLE, path)?;
    let header: Header = serde_json::from_slice(&json).map_err(|e| Error::Parse {
        offset: PREAMBLE,
        message: format!("header: {e}"),
    })?;

    let data_start = PREAMBLE + header_len;
    let block = header.n_samples as u64 * 4;
    let expected_len = data_start + block * header.channels.len() as u64;
    if file_len != expected_len {
        return Err(Error::Parse {
            offset: file_len.min(expected_len),
            message: format!("file is {file_len} bytes, layout requires {expected_len}"),
        });
    }

    let wanted: Vec<usize> = match only {
        None => (0..header.channels.len()).collect(),
        Some(names) => names
            .iter()
            .map(|n| {
                header
                    .channels
                    .iter()
                    .position(|c| c == n)
                    .ok_or_else(|| Error::UnknownChannel(n.to_string()))
            })
            .collect::<Result<_>>()?,
    };

    let mut channels = Vec::with_capacity(wanted.len());
    let mut bytes = vec![0u8; block as usize];
    for idx in wanted {
        let offset = data_start + idx as u64 * block;
        r.seek(SeekFrom::Start(offset))
            .map_err(|e| Error::io(path, e))?;
        read_exact_at(&mut r, &mut bytes, offset, path)?;
        let samples = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect();
        channels.push(Channel {
            name: header.channels[idx].clone(),
            samples,
        });
    }

    let record = SignalRecord {
        record_id: header.record_id,
        sample_rate_hz: header.sample_rate_hz,
        channels,
        events: header.events,
        duration_s: header.duration_s,
    };
    record.validate()?;
    Ok(record)
}

fn read_exact_at(r: &mut impl Read, buf: &mut [u8], offset: u64, path: &Path) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::Parse {
                offset,
                message: format!("truncated: expected {} bytes", buf.len()),
            }
        } else {
            Error::io(path, e)
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{generate_record, GeneratorConfig, EEG_C3};

    fn cfg() -> GeneratorConfig {
        GeneratorConfig {
            n_records: 2,
            record_duration_s: 60.0,
            events_per_record: 4.0,
            ..GeneratorConfig::default()
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.psgbin");
        let rec = generate_record(&cfg(), 0).unwrap();
        save_record(&rec, &path).unwrap();
        assert_eq!(load_record(&path).unwrap(), rec);
    }

    #[test]
    fn selective_load_reads_one_channel() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.psgbin");
        let rec = generate_record(&cfg(), 1).unwrap();
        save_record(&rec, &path).unwrap();
        let c3 = load_record_channels(&path, Some(&[EEG_C3])).unwrap();
        assert_eq!(c3.channel_names(), vec![EEG_C3]);
        assert_eq!(c3.channels[0], rec.channels[0]);
        assert!(load_record_channels(&path, Some(&["ECG"])).is_err());
    }

    #[test]
    fn truncated_file_is_parse_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.psgbin");
        save_record(&generate_record(&cfg(), 0).unwrap(), &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 10]).unwrap();
        assert!(matches!(load_record(&path), Err(Error::Parse { .. })));
        std::fs::write(&path, &bytes[..10]).unwrap();
        assert!(matches!(
            load_record(&path),
            Err(Error::Parse { offset: 0, .. })
        ));
    }

    #[test]
    fn version_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.psgbin");
        save_record(&generate_record(&cfg(), 0).unwrap(), &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[4..8].copy_from_slice(&9u32.to_le_bytes());
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            load_record(&path),
            Err(Error::Version { found: 9, .. })
        ));
    }

    #[test]
    fn event_past_end_fails_validation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.psgbin");
        let mut rec = generate_record(&cfg(), 0).unwrap();
        rec.events.clear();
        save_record(&rec, &path).unwrap();
        // Rewrite the header with an event beyond the 60 s record.
        let bytes = std::fs::read(&path).unwrap();
        let mut rec2 = rec.clone();
        rec2.events.push(EventInterval::arousal(70.0, 5.0));
        let header = Header {
            record_id: rec2.record_id.clone(),
            sample_rate_hz: rec2.sample_rate_hz,
            duration_s: rec2.duration_s,
            n_samples: rec2.n_samples(),
            channels: rec2.channels.iter().map(|c| c.name.clone()).collect(),
            events: rec2.events.clone(),
        };
        let json = serde_json::to_vec(&header).unwrap();
        let old_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let mut out = bytes[..8].to_vec();
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&bytes[16 + old_len..]);
        std::fs::write(&path, &out).unwrap();
        assert!(matches!(load_record(&path), Err(Error::Validation(_))));
    }
}

//! On-disk dataset: `<root>/<subset>/<record_id>.psgbin` plus `manifest.json`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::format::{load_record_channels, save_record};
use super::partition::{partition, Partition, PartitionSpec};
use super::{generate_record, record_id, GeneratorConfig, SignalRecord};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub generator: GeneratorConfig,
    pub partition_spec: PartitionSpec,
    pub partition: Partition,
    /// Record id -> path relative to the dataset root.
    pub files: BTreeMap<String, String>,
}

/// Generates every record of `cfg`, partitions them and writes the dataset.
///
/// Refuses to write into an existing non-empty directory unless `force`.
pub fn write_dataset(
    root: &Path,
    cfg: &GeneratorConfig,
    spec: &PartitionSpec,
    force: bool,
) -> Result<Manifest> {
    cfg.validate()?;
    spec.validate()?;
    if root.exists() {
        let non_empty = fs::read_dir(root)
            .map_err(|e| Error::io(root, e))?
            .next()
            .is_some();
        if non_empty && !force {
            return Err(Error::Usage(format!(
                "{} exists and is not empty (use --force to overwrite)",
                root.display()
            )));
        }
    }
    let ids: Vec<String> = (0..cfg.n_records).map(record_id).collect();
    let part = partition(&ids, spec)?;
    let assignment = part.assignment();

    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let mut files = BTreeMap::new();
    for (index, id) in ids.iter().enumerate() {
        let subset = assignment[id];
        let dir = root.join(subset.as_str());
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let rel = format!("{subset}/{id}.psgbin");
        let record = generate_record(cfg, index)?;
        save_record(&record, &root.join(&rel))?;
        files.insert(id.clone(), rel);
    }
    let manifest = Manifest {
        format_version: super::RECORD_VERSION,
        generator: cfg.clone(),
        partition_spec: spec.clone(),
        partition: part,
        files,
    };
    let path = root.join(MANIFEST_FILE);
    fs::write(&path, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST_FILE);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest = serde_json::from_slice(&bytes)?;
        Ok(Self {
            root: root.to_path_buf(),
            manifest,
        })
    }

    pub fn split_ids(&self, split: &str) -> Result<&[String]> {
        self.manifest
            .partition
            .split(split)
            .ok_or_else(|| Error::Usage(format!("unknown split `{split}`")))
    }

    pub fn record_path(&self, id: &str) -> Result<PathBuf> {
        self.manifest
            .files
            .get(id)
            .map(|rel| self.root.join(rel))
            .ok_or_else(|| Error::Validation(format!("record {id} not in manifest")))
    }

    /// Loads a split, decoding only `channels`.
    pub fn load_split(&self, split: &str, channels: &[&str]) -> Result<Vec<SignalRecord>> {
        self.split_ids(split)?
            .iter()
            .map(|id| load_record_channels(&self.record_path(id)?, Some(channels)))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{Subset, EEG_C3};

    fn tiny() -> (GeneratorConfig, PartitionSpec) {
        let cfg = GeneratorConfig {
            n_records: 15,
            record_duration_s: 30.0,
            events_per_record: 1.0,
            ..GeneratorConfig::default()
        };
        let spec = PartitionSpec {
            train1: 4,
            eval1: 1,
            test1: 10,
            train2: 4,
            eval2: 1,
            test2: 5,
            rng_seed: 1,
        };
        (cfg, spec)
    }

    #[test]
    fn write_and_open() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().join("ds");
        let (cfg, spec) = tiny();
        let manifest = write_dataset(&root, &cfg, &spec, false).unwrap();
        assert_eq!(manifest.files.len(), 15);
        for (id, rel) in &manifest.files {
            let subset = manifest.partition.assignment()[id];
            assert!(rel.starts_with(&format!("{subset}/")));
            assert_ne!(subset, Subset::Unused);
        }
        let ds = Dataset::open(&root).unwrap();
        assert_eq!(ds.manifest, manifest);
        let recs = ds.load_split("test2", &[EEG_C3]).unwrap();
        assert_eq!(recs.len(), 5);
        assert!(recs.iter().all(|r| r.channel_names() == vec![EEG_C3]));
    }

    #[test]
    fn refuses_non_empty_dir() {
        let dir = tempfile::tempdir().unwrap();
        let (cfg, spec) = tiny();
        fs::write(dir.path().join("junk"), b"x").unwrap();
        assert!(matches!(
            write_dataset(dir.path(), &cfg, &spec, false),
            Err(Error::Usage(_))
        ));
        write_dataset(dir.path(), &cfg, &spec, true).unwrap();
    }
}

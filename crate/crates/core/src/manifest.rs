//! Dataset manifests: which recordings exist, what machine they came from,
//! and how they split into train and test.
//!
//! Two layouts are supported: the `<type>/id_XX/{normal,abnormal}/*.wav`
//! directory convention, and a flat CSV listing. Under the directory layout
//! normals land in the train split and labeled anomalies in test; a CSV can
//! express arbitrary splits (e.g. held-out test normals).

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use crate::audio::{read_wav, AudioClip, Condition, MachineType};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Which partition a recording belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::Manifest(format!("unknown split {other:?}"))),
        }
    }
}

/// One recording.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub machine_type: MachineType,
    pub machine_id: u32,
    pub condition: Condition,
    pub split: Split,
}

/// The full dataset listing plus ingest diagnostics.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    /// Files seen but not ingested (unparsable name, wrong extension).
    pub skipped: usize,
}

/// Directory conventions understood by [`load_manifest`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ManifestLayout {
    /// `<machine_type>/id_XX/{normal,abnormal}/*.wav`
    Mimii,
    /// A `manifest.csv` at the root with explicit columns.
    FlatCsv,
}

impl DatasetManifest {
    /// Machine types present, sorted.
    pub fn machine_types(&self) -> Vec<MachineType> {
        let set: BTreeSet<_> = self.entries.iter().map(|e| e.machine_type.clone()).collect();
        set.into_iter().collect()
    }

    /// Machine IDs present for a type, sorted.
    pub fn machine_ids(&self, machine_type: &MachineType) -> Vec<u32> {
        let set: BTreeSet<_> = self
            .entries
            .iter()
            .filter(|e| &e.machine_type == machine_type)
            .map(|e| e.machine_id)
            .collect();
        set.into_iter().collect()
    }

    pub fn iter_split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    /// Reads the audio for every entry of one split (optionally restricted
    /// to one machine type), pairing each clip with its manifest entry.
    pub fn load_clips<F: Scalar>(
        &self,
        split: Split,
        machine_type: Option<&MachineType>,
    ) -> Result<Vec<(ManifestEntry, AudioClip<F>)>> {
        let mut out = Vec::new();
        for e in self.iter_split(split) {
            if machine_type.is_some_and(|t| t != &e.machine_type) {
                continue;
            }
            out.push((e.clone(), read_wav(&e.path)?));
        }
        Ok(out)
    }

    /// Enforces the structural rules: train is normal-only, and every test
    /// (type, id) pair also has train data.
    pub fn validate(&self) -> Result<()> {
        for e in self.iter_split(Split::Train) {
            if e.condition != Condition::Normal {
                return Err(Error::Manifest(format!(
                    "train split must be normal-only; {} is {}",
                    e.path.display(),
                    e.condition.as_str()
                )));
            }
        }
        let train_pairs: BTreeSet<_> = self
            .iter_split(Split::Train)
            .map(|e| (e.machine_type.clone(), e.machine_id))
            .collect();
        for e in self.iter_split(Split::Test) {
            let pair = (e.machine_type.clone(), e.machine_id);
            if !train_pairs.contains(&pair) {
                return Err(Error::Manifest(format!(
                    "test machine {}/id_{:02} has no training data",
                    pair.0, pair.1
                )));
            }
        }
        Ok(())
    }

    fn sort(&mut self) {
        self.entries.sort_by(|a, b| {
            (&a.machine_type, a.machine_id, a.condition.as_str(), &a.path).cmp(&(
                &b.machine_type,
                b.machine_id,
                b.condition.as_str(),
                &b.path,
            ))
        });
    }
}

/// Scans `root_dir` under the given layout. Ordering is deterministic
/// (sorted); unparsable names are counted in `skipped`, not fatal.
pub fn load_manifest(root_dir: &Path, layout: ManifestLayout) -> Result<DatasetManifest> {
    if !root_dir.is_dir() {
        return Err(Error::Manifest(format!("{} is not a directory", root_dir.display())));
    }
    match layout {
        ManifestLayout::Mimii => load_mimii(root_dir),
        ManifestLayout::FlatCsv => read_manifest_csv(&root_dir.join("manifest.csv")),
    }
}

fn load_mimii(root: &Path) -> Result<DatasetManifest> {
    let mut manifest = DatasetManifest::default();
    for type_dir in sorted_dirs(root)? {
        let machine_type = MachineType(dir_name(&type_dir));
        for id_dir in sorted_dirs(&type_dir)? {
            let id_name = dir_name(&id_dir);
            let Some(machine_id) = id_name.strip_prefix("id_").and_then(|s| s.parse().ok()) else {
                manifest.skipped += 1;
                continue;
            };
            for cond_dir in sorted_dirs(&id_dir)? {
                let condition = match dir_name(&cond_dir).as_str() {
                    "normal" => Condition::Normal,
                    "abnormal" | "anomaly" => Condition::Anomaly,
                    _ => {
                        manifest.skipped += 1;
                        continue;
                    }
                };
                let split = match condition {
                    Condition::Normal => Split::Train,
                    Condition::Anomaly => Split::Test,
                };
                for file in sorted_files(&cond_dir)? {
                    if file.extension().and_then(|e| e.to_str()) != Some("wav") {
                        manifest.skipped += 1;
                        continue;
                    }
                    manifest.entries.push(ManifestEntry {
                        path: file,
                        machine_type: machine_type.clone(),
                        machine_id,
                        condition,
                        split,
                    });
                }
            }
        }
    }
    manifest.sort();
    Ok(manifest)
}

/// Reads a manifest CSV with header `path,machine_type,machine_id,condition,split`.
/// Relative paths are resolved against the CSV's directory.
pub fn read_manifest_csv(csv_path: &Path) -> Result<DatasetManifest> {
    let base = csv_path.parent().unwrap_or(Path::new("."));
    let mut reader = csv::Reader::from_path(csv_path)
        .map_err(|e| Error::Manifest(format!("{}: {e}", csv_path.display())))?;
    let mut manifest = DatasetManifest::default();
    for record in reader.records() {
        let record = record.map_err(|e| Error::Manifest(format!("{}: {e}", csv_path.display())))?;
        let field = |i: usize| -> Result<&str> {
            record.get(i).ok_or_else(|| {
                Error::Manifest(format!("{}: row with {} fields", csv_path.display(), record.len()))
            })
        };
        let raw_path = PathBuf::from(field(0)?);
        let path = if raw_path.is_absolute() { raw_path } else { base.join(raw_path) };
        let machine_id: u32 = match field(2)?.parse() {
            Ok(v) => v,
            Err(_) => {
                manifest.skipped += 1;
                continue;
            }
        };
        let (condition, split) = match (Condition::parse(field(3)?), Split::parse(field(4)?)) {
            (Ok(c), Ok(s)) => (c, s),
            _ => {
                manifest.skipped += 1;
                continue;
            }
        };
        manifest.entries.push(ManifestEntry {
            path,
            machine_type: MachineType(field(1)?.to_string()),
            machine_id,
            condition,
            split,
        });
    }
    manifest.sort();
    Ok(manifest)
}

/// Writes entries as CSV; paths are stored relative to the CSV's directory
/// when possible so corpora stay relocatable.
pub fn write_manifest_csv(csv_path: &Path, manifest: &DatasetManifest) -> Result<()> {
    let base = csv_path.parent().unwrap_or(Path::new("."));
    let mut writer = csv::Writer::from_path(csv_path)
        .map_err(|e| Error::Manifest(format!("{}: {e}", csv_path.display())))?;
    writer
        .write_record(["path", "machine_type", "machine_id", "condition", "split"])
        .map_err(|e| Error::Manifest(e.to_string()))?;
    for e in &manifest.entries {
        let rel = e.path.strip_prefix(base).unwrap_or(&e.path);
        writer
            .write_record([
                rel.to_string_lossy().as_ref(),
                &e.machine_type.0,
                &e.machine_id.to_string(),
                e.condition.as_str(),
                e.split.as_str(),
            ])
            .map_err(|e| Error::Manifest(e.to_string()))?;
    }
    writer.flush().map_err(|e| Error::Manifest(e.to_string()))?;
    Ok(())
}

fn dir_name(p: &Path) -> String {
    p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

fn sorted_dirs(p: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(p)?
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .map(|e| e.path())
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    Ok(dirs)
}

fn sorted_files(p: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(p)?
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .map(|e| e.path())
        .filter(|p| p.is_file())
        .collect();
    files.sort();
    Ok(files)
}

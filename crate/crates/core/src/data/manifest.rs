use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{Error, Result};

pub const RECORDS_FILE: &str = "manifest.jsonl";
pub const META_FILE: &str = "manifest.meta.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// One image–mask pair. Paths are relative to the manifest directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRecord {
    pub id: String,
    pub image_path: String,
    pub mask_path: String,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub split: Split,
    /// Parent image; crops and augmentations of one parent share it.
    pub source_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub test: usize,
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestMeta {
    pub name: String,
    pub channel_semantics: Vec<String>,
    pub counts: SplitCounts,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub name: String,
    pub records: Vec<SampleRecord>,
    pub channel_semantics: Vec<String>,
    /// Directory record paths are resolved against. Not serialized.
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &SampleRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn count(&self, split: Split) -> usize {
        self.split(split).count()
    }

    /// Channel count shared by every record (falls back to the semantics
    /// list for an empty manifest).
    pub fn channels(&self) -> usize {
        self.records
            .first()
            .map(|r| r.channels)
            .unwrap_or(self.channel_semantics.len())
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn meta(&self) -> ManifestMeta {
        let train = self.count(Split::Train);
        let test = self.count(Split::Test);
        ManifestMeta {
            name: self.name.clone(),
            channel_semantics: self.channel_semantics.clone(),
            counts: SplitCounts {
                train,
                test,
                total: self.records.len(),
            },
        }
    }

    /// Checks id uniqueness, a shared channel count, and that no source
    /// image contributes to both splits.
    pub fn validate(&self) -> Result<()> {
        let mut ids = HashSet::new();
        for r in &self.records {
            if !ids.insert(r.id.as_str()) {
                return Err(Error::Data(format!(
                    "{}: duplicate record id `{}`",
                    self.name, r.id
                )));
            }
        }
        if let Some(first) = self.records.first() {
            if let Some(r) = self.records.iter().find(|r| r.channels != first.channels) {
                return Err(Error::Data(format!(
                    "{}: record `{}` has {} channels, expected {}",
                    self.name, r.id, r.channels, first.channels
                )));
            }
            if !self.channel_semantics.is_empty() && self.channel_semantics.len() != first.channels
            {
                return Err(Error::Data(format!(
                    "{}: {} channel names for {}-channel records",
                    self.name,
                    self.channel_semantics.len(),
                    first.channels
                )));
            }
        }
        let mut split_of: HashMap<&str, Split> = HashMap::new();
        for r in &self.records {
            if let Some(prev) = split_of.insert(r.source_id.as_str(), r.split) {
                if prev != r.split {
                    return Err(Error::Data(format!(
                        "{}: source `{}` appears in both train and test splits",
                        self.name, r.source_id
                    )));
                }
            }
        }
        Ok(())
    }

    /// SHA-256 over the canonical JSON Lines encoding of the records.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for r in &self.records {
            h.update(serde_json::to_vec(r).expect("records serialize"));
            h.update(b"\n");
        }
        hex::encode(h.finalize())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(Error::io(dir))?;
        let mut body = Vec::new();
        for r in &self.records {
            serde_json::to_writer(&mut body, r).expect("records serialize");
            body.push(b'\n');
        }
        super::tensor_file::write_atomic(&dir.join(RECORDS_FILE), &body)?;
        let meta = serde_json::to_vec_pretty(&self.meta()).expect("meta serializes");
        super::tensor_file::write_atomic(&dir.join(META_FILE), &meta)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta_path = dir.join(META_FILE);
        let meta_bytes = fs::read(&meta_path).map_err(Error::io(&meta_path))?;
        let meta: ManifestMeta = serde_json::from_slice(&meta_bytes)
            .map_err(|e| Error::format("manifest header", &meta_path, e))?;
        let rec_path = dir.join(RECORDS_FILE);
        let file = fs::File::open(&rec_path).map_err(Error::io(&rec_path))?;
        let mut records = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(Error::io(&rec_path))?;
            if line.trim().is_empty() {
                continue;
            }
            let r: SampleRecord = serde_json::from_str(&line).map_err(|e| {
                Error::format("manifest record", &rec_path, format!("line {}: {e}", i + 1))
            })?;
            records.push(r);
        }
        let m = DatasetManifest {
            name: meta.name,
            records,
            channel_semantics: meta.channel_semantics,
            root: dir.to_path_buf(),
        };
        if m.records.len() != meta.counts.total {
            return Err(Error::format(
                "manifest",
                dir,
                format!(
                    "header lists {} records, file has {}",
                    meta.counts.total,
                    m.records.len()
                ),
            ));
        }
        m.validate()?;
        Ok(m)
    }
}

/// Writes JSON with a trailing newline, atomically.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("serializable");
    bytes.write_all(b"\n").expect("vec write");
    super::tensor_file::write_atomic(path, &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn rec(id: &str, split: Split, source: &str) -> SampleRecord {
        SampleRecord {
            id: id.into(),
            image_path: format!("images/{id}.pgt"),
            mask_path: format!("masks/{id}.pgt"),
            height: 8,
            width: 8,
            channels: 3,
            split,
            source_id: source.into(),
        }
    }

    fn manifest(records: Vec<SampleRecord>) -> DatasetManifest {
        DatasetManifest {
            name: "t".into(),
            records,
            channel_semantics: vec!["red".into(), "green".into(), "blue".into()],
            root: PathBuf::new(),
        }
    }

    #[test]
    fn validation_catches_leaks_duplicates_and_channel_drift() {
        assert!(manifest(vec![
            rec("a", Split::Train, "p"),
            rec("b", Split::Test, "q")
        ])
        .validate()
        .is_ok());
        let leak = manifest(vec![
            rec("a", Split::Train, "p"),
            rec("b", Split::Test, "p"),
        ]);
        assert!(leak.validate().unwrap_err().to_string().contains("both"));
        let dup = manifest(vec![
            rec("a", Split::Train, "p"),
            rec("a", Split::Train, "q"),
        ]);
        assert!(dup
            .validate()
            .unwrap_err()
            .to_string()
            .contains("duplicate"));
        let mut odd = rec("b", Split::Train, "q");
        odd.channels = 4;
        assert!(manifest(vec![rec("a", Split::Train, "p"), odd])
            .validate()
            .is_err());
    }

    #[test]
    fn save_load_round_trip_and_line_format() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = manifest(vec![
            rec("a", Split::Train, "p"),
            rec("b", Split::Test, "q"),
        ]);
        m.root = dir.path().to_path_buf();
        m.save(dir.path()).unwrap();
        let text = fs::read_to_string(dir.path().join(RECORDS_FILE)).unwrap();
        let first = text.lines().next().unwrap();
        assert_eq!(
            first,
            r#"{"id":"a","image_path":"images/a.pgt","mask_path":"masks/a.pgt","height":8,"width":8,"channels":3,"split":"train","source_id":"p"}"#
        );
        let back = DatasetManifest::load(dir.path()).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.digest(), m.digest());
        let meta: serde_json::Value =
            serde_json::from_slice(&fs::read(dir.path().join(META_FILE)).unwrap()).unwrap();
        assert_eq!(meta["counts"]["train"], 1);
        assert_eq!(meta["name"], "t");
    }

    #[test]
    fn unknown_record_fields_are_rejected() {
        let line = r#"{"id":"a","image_path":"i","mask_path":"m","height":1,"width":1,"channels":3,"split":"train","source_id":"p","extra":1}"#;
        assert!(serde_json::from_str::<SampleRecord>(line).is_err());
    }
}

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
        })
    }
}

/// One footprint: the chips of every sensor that imaged it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub footprint_id: String,
    pub split: Split,
    /// sensor id -> chip path relative to the manifest directory
    pub chips: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp: Option<String>,
}

/// Validated line-delimited JSON manifest of footprint-aligned chips.
#[derive(Debug, Clone, Default)]
pub struct PairManifest {
    root: PathBuf,
    records: Vec<ManifestRecord>,
}

fn valid_timestamp(ts: &str) -> bool {
    chrono::DateTime::parse_from_rfc3339(ts).is_ok()
        || chrono::NaiveDateTime::parse_from_str(ts, "%Y-%m-%dT%H:%M:%S").is_ok()
        || chrono::NaiveDate::parse_from_str(ts, "%Y-%m-%d").is_ok()
}

impl PairManifest {
    pub fn new(root: impl Into<PathBuf>, records: Vec<ManifestRecord>) -> Self {
        Self {
            root: root.into(),
            records,
        }
    }

    /// Reads and validates a manifest. Chip paths are resolved against the
    /// manifest's directory and must exist.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let err = |line: usize, message: String| Error::Manifest {
            path: path.to_path_buf(),
            line,
            message,
        };
        let mut records: Vec<ManifestRecord> = Vec::new();
        let mut seen: HashMap<(String, String), usize> = HashMap::new();
        let mut by_footprint: HashMap<String, usize> = HashMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            if raw.trim().is_empty() {
                continue;
            }
            let rec: ManifestRecord =
                serde_json::from_str(raw).map_err(|e| err(line, format!("malformed record: {e}")))?;
            if rec.footprint_id.is_empty() {
                return Err(err(line, "empty footprint_id".into()));
            }
            if rec.chips.is_empty() {
                return Err(err(line, "record lists no sensor chips".into()));
            }
            for (sensor, rel) in &rec.chips {
                if sensor.is_empty() {
                    return Err(err(line, "chip entry with empty sensor_id".into()));
                }
                if let Some(prev) = seen.insert((rec.footprint_id.clone(), sensor.clone()), line) {
                    return Err(err(
                        line,
                        format!(
                            "duplicate chip for footprint `{}` sensor `{sensor}` (first on line {prev})",
                            rec.footprint_id
                        ),
                    ));
                }
                let full = root.join(rel);
                if !full.is_file() {
                    return Err(err(line, format!("chip path {} does not exist", full.display())));
                }
            }
            if let Some(ts) = &rec.timestamp {
                if !valid_timestamp(ts) {
                    return Err(err(line, format!("timestamp `{ts}` is not ISO-8601")));
                }
            }
            match by_footprint.get(&rec.footprint_id) {
                Some(&idx) => {
                    // same footprint split across lines: merge disjoint sensors
                    let existing = &mut records[idx];
                    if existing.split != rec.split {
                        return Err(err(
                            line,
                            format!("footprint `{}` listed in two splits", rec.footprint_id),
                        ));
                    }
                    existing.chips.extend(rec.chips);
                }
                None => {
                    by_footprint.insert(rec.footprint_id.clone(), records.len());
                    records.push(rec);
                }
            }
        }
        Ok(Self { root, records })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        for r in &self.records {
            writeln!(f, "{}", serde_json::to_string(r)?).map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn records(&self) -> &[ManifestRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn sensors(&self) -> BTreeSet<String> {
        self.records
            .iter()
            .flat_map(|r| r.chips.keys().cloned())
            .collect()
    }

    pub fn chip_path(&self, record: &ManifestRecord, sensor: &str) -> Option<PathBuf> {
        record.chips.get(sensor).map(|rel| self.root.join(rel))
    }

    /// Unordered sensor pairs available across all footprints, each counted
    /// once per footprint.
    pub fn sensor_pairs(&self) -> BTreeMap<(String, String), usize> {
        let mut out = BTreeMap::new();
        for r in &self.records {
            let s: Vec<&String> = r.chips.keys().collect();
            for i in 0..s.len() {
                for j in i + 1..s.len() {
                    *out.entry((s[i].clone(), s[j].clone())).or_insert(0) += 1;
                }
            }
        }
        out
    }

    /// Indices of records that include a chip for every listed sensor.
    pub fn covering(&self, sensors: &[String], split: Option<Split>) -> Vec<usize> {
        self.records
            .iter()
            .enumerate()
            .filter(|(_, r)| split.is_none_or(|s| r.split == s))
            .filter(|(_, r)| sensors.iter().all(|s| r.chips.contains_key(s)))
            .map(|(i, _)| i)
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::Raster;

    fn write_chip(dir: &Path, rel: &str) {
        Raster::filled(4, 4, [0.5, 0.5, 0.5]).save_png(&dir.join(rel)).unwrap();
    }

    fn write_manifest(dir: &Path, lines: &[&str]) -> PathBuf {
        let p = dir.join("manifest.jsonl");
        fs::write(&p, lines.join("\n")).unwrap();
        p
    }

    #[test]
    fn empty_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_manifest(dir.path(), &[]);
        let m = PairManifest::load(&p).unwrap();
        assert!(m.is_empty());
        assert!(m.sensor_pairs().is_empty());
    }

    #[test]
    fn three_sensors_give_three_pairs() {
        let dir = tempfile::tempdir().unwrap();
        for s in ["s6", "s2", "ls"] {
            write_chip(dir.path(), &format!("{s}/fp1.png"));
        }
        let p = write_manifest(
            dir.path(),
            &[r#"{"footprint_id":"fp1","split":"train","chips":{"s6":"s6/fp1.png","s2":"s2/fp1.png","ls":"ls/fp1.png"},"timestamp":"2021-06-01"}"#],
        );
        let m = PairManifest::load(&p).unwrap();
        assert_eq!(m.sensor_pairs().len(), 3);
        assert_eq!(m.sensors().len(), 3);
    }

    #[test]
    fn validation_errors_name_the_line() {
        let dir = tempfile::tempdir().unwrap();
        write_chip(dir.path(), "a/fp1.png");
        let cases: Vec<(Vec<&str>, usize, &str)> = vec![
            (
                vec![
                    r#"{"footprint_id":"fp1","split":"train","chips":{"a":"a/fp1.png"}}"#,
                    r#"{"footprint_id":"fp2","split":"train","chips":{"":"a/fp1.png"}}"#,
                ],
                2,
                "sensor_id",
            ),
            (vec![r#"{"footprint_id":"fp1","split":"train"}"#], 1, "chips"),
            (vec![r#"{"footprint_id":"fp1""#], 1, "malformed"),
            (
                vec![
                    r#"{"footprint_id":"fp1","split":"train","chips":{"a":"a/fp1.png"}}"#,
                    "",
                    r#"{"footprint_id":"fp1","split":"train","chips":{"a":"a/fp1.png"}}"#,
                ],
                3,
                "duplicate",
            ),
            (
                vec![r#"{"footprint_id":"fp1","split":"train","chips":{"a":"a/missing.png"}}"#],
                1,
                "does not exist",
            ),
            (
                vec![r#"{"footprint_id":"fp1","split":"test","chips":{"a":"a/fp1.png"}}"#],
                1,
                "malformed",
            ),
            (
                vec![r#"{"footprint_id":"fp1","split":"val","chips":{"a":"a/fp1.png"},"timestamp":"June"}"#],
                1,
                "ISO-8601",
            ),
        ];
        for (lines, want_line, needle) in cases {
            let p = write_manifest(dir.path(), &lines);
            match PairManifest::load(&p) {
                Err(Error::Manifest { line, message, .. }) => {
                    assert_eq!(line, want_line, "{message}");
                    assert!(message.contains(needle), "{message}");
                }
                other => panic!("expected manifest error for {lines:?}, got {other:?}"),
            }
        }
    }

    #[test]
    fn split_footprint_lines_merge() {
        let dir = tempfile::tempdir().unwrap();
        write_chip(dir.path(), "a/fp1.png");
        write_chip(dir.path(), "b/fp1.png");
        let p = write_manifest(
            dir.path(),
            &[
                r#"{"footprint_id":"fp1","split":"train","chips":{"a":"a/fp1.png"}}"#,
                r#"{"footprint_id":"fp1","split":"train","chips":{"b":"b/fp1.png"}}"#,
            ],
        );
        let m = PairManifest::load(&p).unwrap();
        assert_eq!(m.len(), 1);
        assert_eq!(m.covering(&["a".into(), "b".into()], None), vec![0]);
        let out = dir.path().join("copy.jsonl");
        m.save(&out).unwrap();
        assert_eq!(PairManifest::load(&out).unwrap().records(), m.records());
    }
}

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{PulseError, Result};

use super::{
    CandidateSet, DatasetSplit, InteractionRecord, ItemCatalog, ItemMeta, UserSequence,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LoadStats {
    pub parsed: usize,
    pub skipped: usize,
}

/// One raw input line; unknown keys are ignored by serde's default behavior.
#[derive(Deserialize)]
struct RawLine {
    user_id: String,
    item_id: String,
    timestamp: u64,
    #[serde(default)]
    rating: Option<f32>,
    #[serde(default)]
    review: Option<String>,
    title: String,
    #[serde(default)]
    description: String,
    #[serde(default)]
    domain: String,
}

/// Load line-delimited interaction records plus the item catalog embedded in
/// them. Malformed lines (bad JSON, missing/empty required fields, rating
/// outside [1,5]) are skipped and counted. For items seen with conflicting
/// metadata, the first occurrence wins.
pub fn load_interactions(
    path: &Path,
) -> Result<(Vec<InteractionRecord>, ItemCatalog, LoadStats)> {
    let file = File::open(path).map_err(|e| PulseError::io(path, e))?;
    let reader = BufReader::new(file);

    let mut records = Vec::new();
    let mut catalog = ItemCatalog::default();
    let mut stats = LoadStats {
        parsed: 0,
        skipped: 0,
    };

    for line in reader.lines() {
        let line = line.map_err(|e| PulseError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawLine = match serde_json::from_str(&line) {
            Ok(raw) => raw,
            Err(_) => {
                stats.skipped += 1;
                continue;
            }
        };
        let valid = !raw.user_id.is_empty()
            && !raw.item_id.is_empty()
            && !raw.title.is_empty()
            && raw.rating.map_or(true, |r| (1.0..=5.0).contains(&r));
        if !valid {
            stats.skipped += 1;
            continue;
        }
        catalog
            .items
            .entry(raw.item_id.clone())
            .or_insert_with(|| ItemMeta {
                title: raw.title,
                description: raw.description,
                domain: raw.domain,
            });
        records.push(InteractionRecord {
            user_id: raw.user_id,
            item_id: raw.item_id,
            timestamp: raw.timestamp,
            rating: raw.rating,
            review: raw.review,
        });
        stats.parsed += 1;
    }

    if records.is_empty() {
        return Err(PulseError::EmptyDataset(format!(
            "no valid records in {} ({} lines skipped)",
            path.display(),
            stats.skipped
        )));
    }
    log::info!(
        "loaded {} records from {} ({} skipped)",
        stats.parsed,
        path.display(),
        stats.skipped
    );
    Ok((records, catalog, stats))
}

pub(crate) fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| PulseError::io(parent, e))?;
        }
    }
    Ok(())
}

pub(crate) fn write_jsonl<T: Serialize>(path: &Path, rows: impl Iterator<Item = T>) -> Result<()> {
    ensure_parent(path)?;
    let file = File::create(path).map_err(|e| PulseError::io(path, e))?;
    let mut w = BufWriter::new(file);
    for row in rows {
        let line = serde_json::to_string(&row)
            .map_err(|e| PulseError::InvalidArgument(format!("serialize: {e}")))?;
        writeln!(w, "{line}").map_err(|e| PulseError::io(path, e))?;
    }
    w.flush().map_err(|e| PulseError::io(path, e))
}

pub(crate) fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| PulseError::io(path, e))?;
    let reader = BufReader::new(file);
    let mut rows = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| PulseError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let row: T = serde_json::from_str(&line).map_err(|e| PulseError::Format {
            path: path.to_path_buf(),
            detail: format!("line {}: {e}", idx + 1),
        })?;
        rows.push(row);
    }
    Ok(rows)
}

/// Split artifact: one JSONL line per user, sorted by user id.
pub fn write_split(path: &Path, split: &DatasetSplit) -> Result<()> {
    write_jsonl(path, split.users.values())
}

pub fn read_split(path: &Path) -> Result<DatasetSplit> {
    let rows: Vec<UserSequence> = read_jsonl(path)?;
    if rows.is_empty() {
        return Err(PulseError::EmptyDataset(format!(
            "split file {} has no users",
            path.display()
        )));
    }
    let mut users = BTreeMap::new();
    for seq in rows {
        if users.insert(seq.user_id.clone(), seq).is_some() {
            return Err(PulseError::Format {
                path: path.to_path_buf(),
                detail: "duplicate user in split file".into(),
            });
        }
    }
    Ok(DatasetSplit { users })
}

/// Candidate artifact: one JSONL line per user, sorted by user id.
pub fn write_candidates(path: &Path, sets: &BTreeMap<String, CandidateSet>) -> Result<()> {
    write_jsonl(path, sets.values())
}

pub fn read_candidates(path: &Path) -> Result<BTreeMap<String, CandidateSet>> {
    let rows: Vec<CandidateSet> = read_jsonl(path)?;
    let mut out = BTreeMap::new();
    for set in rows {
        if set.candidates.len() != super::CANDIDATES_PER_USER
            || set.ground_truth_index >= set.candidates.len()
        {
            return Err(PulseError::Format {
                path: path.to_path_buf(),
                detail: format!("malformed candidate set for {}", set.user_id),
            });
        }
        out.insert(set.user_id.clone(), set);
    }
    Ok(out)
}

pub fn write_catalog(path: &Path, catalog: &ItemCatalog) -> Result<()> {
    ensure_parent(path)?;
    let json = serde_json::to_string_pretty(catalog)
        .map_err(|e| PulseError::InvalidArgument(format!("serialize catalog: {e}")))?;
    std::fs::write(path, json + "\n").map_err(|e| PulseError::io(path, e))
}

pub fn read_catalog(path: &Path) -> Result<ItemCatalog> {
    let bytes = std::fs::read(path).map_err(|e| PulseError::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| PulseError::Format {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loads_and_skips_malformed_lines() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("raw.jsonl");
        let content = concat!(
            r#"{"user_id":"u1","item_id":"i1","timestamp":10,"title":"Amber Soap","rating":4.5}"#,
            "\n",
            r#"{"user_id":"u1","timestamp":11,"title":"No Item"}"#,
            "\n",
            "not json at all\n",
            r#"{"user_id":"u2","item_id":"i2","timestamp":12,"title":"Cedar Oil","unknown_key":7}"#,
            "\n",
            r#"{"user_id":"u3","item_id":"i3","timestamp":13,"title":"Basil Balm","rating":9.0}"#,
            "\n",
            r#"{"user_id":"","item_id":"i4","timestamp":14,"title":"Empty User"}"#,
            "\n",
        );
        std::fs::write(&path, content).unwrap();

        let (records, catalog, stats) = load_interactions(&path).unwrap();
        assert_eq!(stats.parsed, 2);
        assert_eq!(stats.skipped, 4);
        assert_eq!(records.len(), 2);
        assert_eq!(catalog.items["i1"].title, "Amber Soap");
        assert_eq!(catalog.items["i2"].title, "Cedar Oil");
    }

    #[test]
    fn empty_file_is_empty_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.jsonl");
        std::fs::write(&path, "\n\n").unwrap();
        assert!(matches!(
            load_interactions(&path),
            Err(PulseError::EmptyDataset(_))
        ));
        assert!(matches!(
            load_interactions(Path::new("/nonexistent.jsonl")),
            Err(PulseError::Io { .. })
        ));
    }

    #[test]
    fn artifacts_round_trip_byte_identically() {
        let dir = tempfile::tempdir().unwrap();

        let mut users = BTreeMap::new();
        for u in 0..3 {
            let user_id = format!("u{u}");
            users.insert(
                user_id.clone(),
                UserSequence {
                    user_id,
                    items: (0..5).map(|i| format!("i{i}")).collect(),
                    ratings: vec![Some(4.0), None, Some(2.0), None, Some(5.0)],
                    reviews: vec![None, Some("nice, very nice".into()), None, None, None],
                },
            );
        }
        let split = DatasetSplit { users };
        let split_path = dir.path().join("split.jsonl");
        write_split(&split_path, &split).unwrap();
        let loaded = read_split(&split_path).unwrap();
        assert_eq!(loaded, split);

        let again = dir.path().join("split2.jsonl");
        write_split(&again, &loaded).unwrap();
        assert_eq!(
            std::fs::read(&split_path).unwrap(),
            std::fs::read(&again).unwrap()
        );

        let mut catalog = ItemCatalog::default();
        catalog.items.insert(
            "i1".into(),
            ItemMeta {
                title: "Amber Soap".into(),
                description: "A bar with amber character.".into(),
                domain: "beauty".into(),
            },
        );
        let cat_path = dir.path().join("catalog.json");
        write_catalog(&cat_path, &catalog).unwrap();
        assert_eq!(read_catalog(&cat_path).unwrap(), catalog);
    }
}

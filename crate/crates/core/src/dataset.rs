//! Phantom datasets on disk: volume/label pairs plus an `index.json`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::phantom::generate_phantom;
use crate::volume::{load_volume, save_volume, Volume3D};

pub const INDEX_FILE: &str = "index.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IndexEntry {
    pub volume: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    pub shape: [usize; 3],
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetIndex {
    pub count: usize,
    pub seed: u64,
    pub shape: [usize; 3],
    pub items: Vec<IndexEntry>,
}

/// A volume and, for labeled data, its binary label.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub volume: Volume3D,
    pub label: Option<Volume3D>,
}

/// Seed of the `i`-th phantom of a dataset generated with `seed`.
pub fn item_seed(seed: u64, i: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(i as u64)
}

/// In-memory phantom set, identical to what [`write_phantoms`] stores.
pub fn phantom_samples(count: usize, shape: [usize; 3], seed: u64) -> Result<Vec<Sample>> {
    (0..count)
        .map(|i| {
            let (volume, label) = generate_phantom(item_seed(seed, i), shape)?;
            Ok(Sample { volume, label: Some(label) })
        })
        .collect()
}

pub fn write_phantoms(dir: &Path, count: usize, shape: [usize; 3], seed: u64) -> Result<DatasetIndex> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut items = Vec::with_capacity(count);
    for (i, s) in phantom_samples(count, shape, seed)?.into_iter().enumerate() {
        let volume = format!("phantom_{i:03}.raw");
        let label = format!("phantom_{i:03}_label.raw");
        save_volume(&s.volume, &dir.join(&volume))?;
        save_volume(s.label.as_ref().expect("phantoms are labeled"), &dir.join(&label))?;
        items.push(IndexEntry {
            volume,
            label: Some(label),
            shape,
            seed: item_seed(seed, i),
        });
    }
    let index = DatasetIndex { count, seed, shape, items };
    let path = dir.join(INDEX_FILE);
    let text = serde_json::to_string_pretty(&index).expect("index serializes");
    std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(index)
}

pub fn read_index(dir: &Path) -> Result<DatasetIndex> {
    let path = dir.join(INDEX_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path.display().to_string(), e.to_string()))
}

/// Loads every indexed sample, checking shapes against the index.
pub fn load_samples(dir: &Path) -> Result<Vec<Sample>> {
    let index = read_index(dir)?;
    if index.items.is_empty() {
        return Err(Error::Data(format!("{} lists no volumes", dir.join(INDEX_FILE).display())));
    }
    index
        .items
        .iter()
        .map(|e| {
            let volume = load_volume(&dir.join(&e.volume))?;
            let label = e.label.as_ref().map(|l| load_volume(&dir.join(l))).transpose()?;
            for v in std::iter::once(&volume).chain(label.as_ref()) {
                if v.shape() != e.shape {
                    return Err(Error::Data(format!(
                        "{} has shape {:?}, index says {:?}",
                        v.provenance(),
                        v.shape(),
                        e.shape
                    )));
                }
            }
            Ok(Sample { volume, label })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let index = write_phantoms(dir.path(), 2, [16; 3], 5).unwrap();
        assert_eq!(index.items.len(), 2);
        let loaded = load_samples(dir.path()).unwrap();
        let direct = phantom_samples(2, [16; 3], 5).unwrap();
        assert_eq!(loaded[0].volume.values(), direct[0].volume.values());
        assert_eq!(loaded[1].label.as_ref().unwrap().values(), direct[1].label.as_ref().unwrap().values());
    }
}

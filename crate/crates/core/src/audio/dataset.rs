use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::WINDOW;
use crate::error::{Error, Result};

/// The ten command words, in class-index order.
pub const KEYWORDS: [&str; 10] = [
    "yes", "no", "up", "down", "left", "right", "on", "off", "stop", "go",
];
pub const SILENCE_CLASS: usize = 10;
pub const UNKNOWN_CLASS: usize = 11;
pub const NUM_CLASSES: usize = 12;
pub const BACKGROUND_DIR: &str = "_background_noise_";
/// Pseudo-keyword attached to generated silence clips.
pub const SILENCE_KEYWORD: &str = "_silence_";

/// Maps a raw Speech Commands keyword to one of the 12 classes.
pub fn relabel_12(keyword: &str) -> usize {
    let k = keyword.to_ascii_lowercase();
    if let Some(i) = KEYWORDS.iter().position(|&w| w == k) {
        return i;
    }
    match k.as_str() {
        SILENCE_KEYWORD | "silence" | BACKGROUND_DIR => SILENCE_CLASS,
        _ => UNKNOWN_CLASS,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(Split::Train),
            1 => Some(Split::Val),
            2 => Some(Split::Test),
            _ => None,
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" | "validation" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::invalid(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    /// Path relative to the dataset root.
    pub path: PathBuf,
    pub keyword: String,
    pub class: usize,
    pub speaker_id: String,
    pub split: Split,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub entries: Vec<IndexEntry>,
    /// Files that did not match the naming scheme or could not be read.
    pub skipped: usize,
}

impl DatasetIndex {
    pub fn class_counts(&self, split: Split, n_classes: usize) -> Vec<usize> {
        let mut counts = vec![0usize; n_classes];
        for e in self.entries.iter().filter(|e| e.split == split) {
            if e.class < n_classes {
                counts[e.class] += 1;
            }
        }
        counts
    }

    pub fn speakers(&self) -> HashSet<&str> {
        self.entries.iter().map(|e| e.speaker_id.as_str()).collect()
    }
}

/// Splits `keyword/<speaker>_nohash_<n>.wav` into `(keyword, speaker)`.
pub fn parse_clip_name(rel: &Path) -> Option<(String, String)> {
    let keyword = rel.parent()?.file_name()?.to_str()?.to_string();
    let file = rel.file_name()?.to_str()?;
    let stem = file.strip_suffix(".wav")?;
    let (speaker, n) = stem.split_once("_nohash_")?;
    if speaker.is_empty() || n.is_empty() || !n.chars().all(|c| c.is_ascii_digit()) {
        return None;
    }
    Some((keyword, speaker.to_string()))
}

fn sorted_dir(path: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(path)
        .map_err(Error::at_path(path))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    out.sort();
    Ok(out)
}

/// Walks a Speech Commands tree. Every entry starts in the train split; use
/// [`assign_split`] afterwards.
pub fn build_index(root: &Path) -> Result<DatasetIndex> {
    let mut index = DatasetIndex::default();
    for dir in sorted_dir(root)? {
        if !dir.is_dir() || dir.file_name().is_some_and(|n| n == BACKGROUND_DIR) {
            continue;
        }
        for file in sorted_dir(&dir)? {
            if file.extension().is_none_or(|e| e != "wav") {
                continue;
            }
            let rel = file.strip_prefix(root).unwrap_or(&file).to_path_buf();
            let Some((keyword, speaker_id)) = parse_clip_name(&rel) else {
                index.skipped += 1;
                continue;
            };
            if hound::WavReader::open(&file).is_err() {
                index.skipped += 1;
                continue;
            }
            index.entries.push(IndexEntry {
                path: rel,
                class: relabel_12(&keyword),
                keyword,
                speaker_id,
                split: Split::Train,
            });
        }
    }
    if index.skipped > 0 {
        log::warn!("skipped {} unreadable or misnamed files", index.skipped);
    }
    Ok(index)
}

/// 32-bit FNV-1a.
pub fn fnv1a32(bytes: &[u8]) -> u32 {
    let mut h: u32 = 0x811c_9dc5;
    for &b in bytes {
        h ^= b as u32;
        h = h.wrapping_mul(0x0100_0193);
    }
    h
}

/// The dataset's official validation/testing file lists.
#[derive(Clone, Debug, Default)]
pub struct SplitLists {
    pub validation: HashSet<PathBuf>,
    pub testing: HashSet<PathBuf>,
}

pub fn load_split_lists(root: &Path) -> Result<Option<SplitLists>> {
    let val = root.join("validation_list.txt");
    let test = root.join("testing_list.txt");
    if !val.exists() || !test.exists() {
        return Ok(None);
    }
    let read = |p: &Path| -> Result<HashSet<PathBuf>> {
        Ok(fs::read_to_string(p)
            .map_err(Error::at_path(p))?
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(PathBuf::from)
            .collect())
    };
    Ok(Some(SplitLists {
        validation: read(&val)?,
        testing: read(&test)?,
    }))
}

/// Assigns every entry to a split by hashing its speaker id
/// (`fnv1a32 % 100`: <80 train, <90 val, else test), or by the official
/// lists when given.
pub fn assign_split(mut index: DatasetIndex, lists: Option<&SplitLists>) -> DatasetIndex {
    for e in &mut index.entries {
        e.split = match lists {
            Some(l) if l.testing.contains(&e.path) => Split::Test,
            Some(l) if l.validation.contains(&e.path) => Split::Val,
            Some(_) => Split::Train,
            None => match fnv1a32(e.speaker_id.as_bytes()) % 100 {
                0..80 => Split::Train,
                80..90 => Split::Val,
                _ => Split::Test,
            },
        };
    }
    index
}

/// Random 16384-sample crops of background recordings, each scaled by a
/// uniform [0, 1] gain.
pub fn make_silence(recordings: &[Vec<f32>], count: usize, seed: u64) -> Result<Vec<Vec<f32>>> {
    if count == 0 {
        return Ok(Vec::new());
    }
    if recordings.is_empty() {
        return Err(Error::invalid("no background recordings for silence clips"));
    }
    if let Some(short) = recordings.iter().find(|r| r.len() < WINDOW) {
        return Err(Error::invalid(format!(
            "background recording of {} samples is shorter than the {WINDOW}-sample window",
            short.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..count)
        .map(|_| {
            let rec = &recordings[rng.random_range(0..recordings.len())];
            let start = rng.random_range(0..=rec.len() - WINDOW);
            let gain: f32 = rng.random_range(0.0..=1.0);
            rec[start..start + WINDOW]
                .iter()
                .map(|&s| s * gain)
                .collect()
        })
        .collect())
}

/// Per-class loss weights: 1.0 everywhere except `unknown`, which gets
/// `mean(other counts) / count[unknown]`, capped at 1.
pub fn class_weights(counts: &[usize], unknown: Option<usize>) -> Result<Vec<f32>> {
    if let Some(c) = counts.iter().position(|&c| c == 0) {
        return Err(Error::invalid(format!("class {c} has no training samples")));
    }
    let mut w = vec![1.0f32; counts.len()];
    if let Some(u) = unknown.filter(|&u| u < counts.len() && counts.len() > 1) {
        let others: usize = counts
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != u)
            .map(|(_, &c)| c)
            .sum();
        let mean = others as f64 / (counts.len() - 1) as f64;
        w[u] = (mean / counts[u] as f64).min(1.0) as f32;
    }
    Ok(w)
}

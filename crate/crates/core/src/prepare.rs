//! Building the example cache: Speech Commands or synthetic clips, padded to
//! the window and tagged with a split. The `KWSC0001` cache stores only
//! `(label, samples)`, so splits and class names go to a JSON index written
//! next to it (`<cache>.index.json`).

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{
    assign_split, build_index, load_split_lists, make_silence, pad_to_window, read_cache_file,
    read_wav, synthetic_clips, write_cache_file, CacheRecord, Split, BACKGROUND_DIR, KEYWORDS,
};
use crate::binio::config_hash;
use crate::data::LabeledSet;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PrepareOptions {
    /// Keywords kept as their own classes, in class order. Silence follows
    /// them, then Unknown.
    pub keywords: Vec<String>,
    /// Caps Unknown per split at this multiple of the mean keyword count.
    pub unknown_cap: Option<f64>,
    pub seed: u64,
}

impl Default for PrepareOptions {
    fn default() -> Self {
        PrepareOptions {
            keywords: KEYWORDS.iter().map(|s| s.to_string()).collect(),
            unknown_cap: None,
            seed: 0,
        }
    }
}

impl PrepareOptions {
    pub fn n_classes(&self) -> usize {
        self.keywords.len() + 2
    }

    pub fn silence_class(&self) -> usize {
        self.keywords.len()
    }

    pub fn unknown_class(&self) -> usize {
        self.keywords.len() + 1
    }

    pub fn class_of(&self, keyword: &str) -> usize {
        let k = keyword.to_ascii_lowercase();
        self.keywords
            .iter()
            .position(|w| *w == k)
            .unwrap_or(self.unknown_class())
    }
}

/// Sidecar of a cache file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CacheIndex {
    pub class_names: Vec<String>,
    /// Class whose loss weight is reduced, if the dataset has one.
    pub unknown_class: Option<usize>,
    pub splits: Vec<Split>,
    /// Per split, per class example counts.
    pub counts: Vec<(Split, Vec<usize>)>,
    pub skipped: usize,
    pub source: String,
    pub config_hash: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prepared {
    pub records: Vec<CacheRecord>,
    pub index: CacheIndex,
}

const SPLITS: [Split; 3] = [Split::Train, Split::Val, Split::Test];

fn counts(records: &[CacheRecord], splits: &[Split], n_classes: usize) -> Vec<(Split, Vec<usize>)> {
    SPLITS
        .iter()
        .map(|&s| {
            let mut c = vec![0; n_classes];
            for (r, _) in records.iter().zip(splits).filter(|(_, &sp)| sp == s) {
                c[r.label as usize] += 1;
            }
            (s, c)
        })
        .collect()
}

impl Prepared {
    pub fn split(&self, split: Split) -> LabeledSet {
        let (windows, labels) = self
            .records
            .iter()
            .zip(&self.index.splits)
            .filter(|(_, &s)| s == split)
            .map(|(r, _)| (r.samples.clone(), r.label as usize))
            .unzip();
        LabeledSet { windows, labels }
    }

    pub fn n_classes(&self) -> usize {
        self.index.class_names.len()
    }
}

pub fn index_path(cache: &Path) -> PathBuf {
    let mut s = cache.as_os_str().to_owned();
    s.push(".index.json");
    PathBuf::from(s)
}

pub fn save_prepared(p: &Prepared, cache: &Path) -> Result<()> {
    write_cache_file(cache, &p.records)?;
    let idx = index_path(cache);
    std::fs::write(&idx, serde_json::to_vec_pretty(&p.index)?).map_err(Error::at_path(&idx))
}

pub fn load_prepared(cache: &Path) -> Result<Prepared> {
    let records = read_cache_file(cache)?;
    let idx = index_path(cache);
    let text = std::fs::read(&idx).map_err(Error::at_path(&idx))?;
    let index: CacheIndex = serde_json::from_slice(&text)?;
    if index.splits.len() != records.len() {
        return Err(Error::format(
            "cache index",
            format!(
                "{} splits for {} records",
                index.splits.len(),
                records.len()
            ),
        ));
    }
    if let Some(r) = records
        .iter()
        .find(|r| r.label as usize >= index.class_names.len())
    {
        return Err(Error::format(
            "cache index",
            format!("label {} has no class name", r.label),
        ));
    }
    Ok(Prepared { records, index })
}

/// `per_class` synthetic clips per class; splits by the same speaker hash as
/// the real dataset (every clip is its own speaker).
pub fn prepare_synthetic(n_classes: usize, per_class: usize, seed: u64) -> Result<Prepared> {
    if n_classes == 0 || n_classes > 255 || per_class == 0 {
        return Err(Error::invalid(
            "need 1..=255 classes and at least one clip per class",
        ));
    }
    let clips = synthetic_clips(n_classes, per_class, seed);
    let hashed = assign_split(
        crate::audio::DatasetIndex {
            entries: clips
                .iter()
                .map(|c| crate::audio::IndexEntry {
                    path: PathBuf::new(),
                    keyword: String::new(),
                    class: c.label,
                    speaker_id: c.speaker_id.clone(),
                    split: Split::Train,
                })
                .collect(),
            skipped: 0,
        },
        None,
    );
    let splits: Vec<Split> = hashed.entries.iter().map(|e| e.split).collect();
    let records: Vec<CacheRecord> = clips
        .iter()
        .map(|c| CacheRecord {
            label: c.label as u8,
            samples: pad_to_window(&c.samples),
        })
        .collect();
    let index = CacheIndex {
        class_names: (0..n_classes).map(|c| format!("tone{c}")).collect(),
        unknown_class: None,
        counts: counts(&records, &splits, n_classes),
        splits,
        skipped: 0,
        source: "synthetic".into(),
        config_hash: config_hash(&(n_classes, per_class, seed)),
    };
    Ok(Prepared { records, index })
}

/// Reads a Speech Commands tree: relabels, splits by speaker (or the
/// official lists), optionally caps Unknown, and adds silence clips cut from
/// the background recordings, as many per split as the mean keyword count.
pub fn prepare_speech_commands(root: &Path, opts: &PrepareOptions) -> Result<Prepared> {
    if !root.is_dir() {
        return Err(Error::invalid(format!(
            "dataset directory {} not found",
            root.display()
        )));
    }
    if opts.keywords.is_empty() || opts.n_classes() > 255 {
        return Err(Error::Config("need between 1 and 253 keywords".into()));
    }
    let lists = load_split_lists(root)?;
    let index = assign_split(build_index(root)?, lists.as_ref());
    if index.entries.is_empty() {
        return Err(Error::invalid(format!(
            "no clips found under {}",
            root.display()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut chosen: Vec<(usize, &crate::audio::IndexEntry)> = Vec::new();
    let mut keyword_mean = Vec::new();
    for split in SPLITS {
        let in_split: Vec<_> = index.entries.iter().filter(|e| e.split == split).collect();
        let mut per_class = vec![0usize; opts.n_classes()];
        for e in &in_split {
            per_class[opts.class_of(&e.keyword)] += 1;
        }
        let mean = per_class[..opts.keywords.len()].iter().sum::<usize>() as f64
            / opts.keywords.len() as f64;
        keyword_mean.push((split, mean.round() as usize));
        let mut unknown: Vec<_> = in_split
            .iter()
            .filter(|e| opts.class_of(&e.keyword) == opts.unknown_class())
            .collect();
        if let Some(cap) = opts.unknown_cap {
            unknown.shuffle(&mut rng);
            unknown.truncate((cap * mean).round() as usize);
        }
        let keep: std::collections::HashSet<&Path> =
            unknown.iter().map(|e| e.path.as_path()).collect();
        for e in in_split {
            let c = opts.class_of(&e.keyword);
            if c != opts.unknown_class() || keep.contains(e.path.as_path()) {
                chosen.push((c, e));
            }
        }
    }
    let mut records = Vec::with_capacity(chosen.len());
    let mut splits = Vec::with_capacity(chosen.len());
    let mut skipped = index.skipped;
    for (c, e) in chosen {
        match read_wav(&root.join(&e.path)) {
            Ok(s) => {
                records.push(CacheRecord {
                    label: c as u8,
                    samples: pad_to_window(&s),
                });
                splits.push(e.split);
            }
            Err(err) => {
                log::warn!("{}: {err}", e.path.display());
                skipped += 1;
            }
        }
    }
    let bg_dir = root.join(BACKGROUND_DIR);
    let mut background = Vec::new();
    if bg_dir.is_dir() {
        let mut files: Vec<PathBuf> = std::fs::read_dir(&bg_dir)
            .map_err(Error::at_path(&bg_dir))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "wav"))
            .collect();
        files.sort();
        for f in files {
            background.push(read_wav(&f)?);
        }
    }
    if background.is_empty() {
        log::warn!("no background recordings: the silence class stays empty");
    } else {
        for (i, (split, n)) in keyword_mean.into_iter().enumerate() {
            for s in make_silence(&background, n, opts.seed.wrapping_add(i as u64 + 1))? {
                records.push(CacheRecord {
                    label: opts.silence_class() as u8,
                    samples: s,
                });
                splits.push(split);
            }
        }
    }
    let mut class_names = opts.keywords.clone();
    class_names.push("silence".into());
    class_names.push("unknown".into());
    let index = CacheIndex {
        unknown_class: Some(opts.unknown_class()),
        counts: counts(&records, &splits, class_names.len()),
        class_names,
        splits,
        skipped,
        source: root.display().to_string(),
        config_hash: config_hash(opts),
    };
    Ok(Prepared { records, index })
}

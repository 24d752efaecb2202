//! Speech Commands ingestion, augmentation and the raw-audio fold.

mod augment;
mod cache;
mod dataset;
mod fold;
mod synth;
mod wav;

pub use augment::{add_noise, augment, pad_to_window, shift, stretch, AugmentDraw, AugmentSpec};
pub use cache::{
    read_cache, read_cache_file, write_cache, write_cache_file, CacheRecord, CACHE_MAGIC,
};
pub use dataset::{
    assign_split, build_index, class_weights, fnv1a32, load_split_lists, make_silence,
    parse_clip_name, relabel_12, DatasetIndex, IndexEntry, Split, SplitLists, BACKGROUND_DIR,
    KEYWORDS, NUM_CLASSES, SILENCE_CLASS, SILENCE_KEYWORD, UNKNOWN_CLASS,
};
pub use fold::{fold, unfold, Folded};
pub use synth::synthetic_clips;
pub use wav::{encode_wav, parse_wav, read_wav};

pub const SAMPLE_RATE: u32 = 16_000;
/// 1.024 s at 16 kHz.
pub const WINDOW: usize = 16_384;
pub const FOLD_CHANNELS: usize = 128;
pub const FOLD_STEPS: usize = 128;

/// Mono 16 kHz clip with its class and speaker.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioClip {
    pub samples: Vec<f32>,
    pub label: usize,
    pub speaker_id: String,
}

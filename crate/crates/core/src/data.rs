//! In-memory labeled windows, batching into folded grids, and accuracy
//! evaluation.

use serde::{Deserialize, Serialize};

use crate::audio::{augment, AugmentSpec, CacheRecord, WINDOW};
use crate::error::{Error, Result};
use crate::supernet::{Network, QuantSpec};
use crate::tensor::Tensor;

/// Fixed-length sample windows with class labels. A window of `C·L` samples
/// becomes a `[C, L]` grid with channel `c` holding samples `[L·c, L·c + L)`,
/// so batching is a plain copy.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LabeledSet {
    pub windows: Vec<Vec<f32>>,
    pub labels: Vec<usize>,
}

impl LabeledSet {
    pub fn new(windows: Vec<Vec<f32>>, labels: Vec<usize>) -> Result<Self> {
        if windows.len() != labels.len() {
            return Err(Error::shape(format!(
                "{} windows but {} labels",
                windows.len(),
                labels.len()
            )));
        }
        if let Some(first) = windows.first() {
            if windows.iter().any(|w| w.len() != first.len()) {
                return Err(Error::shape("windows differ in length"));
            }
        }
        Ok(LabeledSet { windows, labels })
    }

    pub fn from_records(records: &[CacheRecord]) -> Self {
        LabeledSet {
            windows: records.iter().map(|r| r.samples.clone()).collect(),
            labels: records.iter().map(|r| r.label as usize).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> LabeledSet {
        LabeledSet {
            windows: idx.iter().map(|&i| self.windows[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    pub fn class_counts(&self, n_classes: usize) -> Vec<usize> {
        let mut c = vec![0; n_classes];
        for &l in &self.labels {
            if l < n_classes {
                c[l] += 1;
            }
        }
        c
    }

    /// `[N, C, L]` grid batch of the given examples. With `augment`, each
    /// window goes through the augmentation chain seeded by
    /// `(epoch, example index)`.
    pub fn batch(
        &self,
        idx: &[usize],
        channels: usize,
        steps: usize,
        augmentation: Option<(&AugmentSpec, u64)>,
    ) -> Result<(Tensor, Vec<usize>)> {
        let per = channels * steps;
        let mut data = Vec::with_capacity(idx.len() * per);
        for &i in idx {
            let w = self
                .windows
                .get(i)
                .ok_or_else(|| Error::invalid(format!("example {i} out of range")))?;
            if w.len() != per {
                return Err(Error::shape(format!(
                    "window of {} samples does not fold to [{channels}, {steps}]",
                    w.len()
                )));
            }
            match augmentation {
                Some((spec, epoch)) => {
                    if per != WINDOW {
                        return Err(Error::invalid("augmentation needs full-length windows"));
                    }
                    let seed = epoch.wrapping_mul(0x1_0000_0001).wrapping_add(i as u64);
                    data.extend(augment(w, spec, seed)?.0);
                }
                None => data.extend_from_slice(w),
            }
        }
        let labels = idx.iter().map(|&i| self.labels[i]).collect();
        Ok((Tensor::new(vec![idx.len(), channels, steps], data)?, labels))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    /// `confusion[true][predicted]`
    pub confusion: Vec<Vec<usize>>,
}

impl EvalReport {
    pub fn total(&self) -> usize {
        self.confusion.iter().flatten().sum()
    }
}

pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Eval-mode accuracy and confusion matrix of `net` on `data`.
pub fn evaluate(
    net: &Network,
    data: &LabeledSet,
    quant: &QuantSpec,
    batch_size: usize,
) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::invalid("evaluation set is empty"));
    }
    let k = net.n_classes();
    let channels = net.input_channels();
    let steps = data.windows[0].len() / channels;
    let mut confusion = vec![vec![0usize; k]; k];
    let all: Vec<usize> = (0..data.len()).collect();
    for chunk in all.chunks(batch_size.max(1)) {
        let (x, labels) = data.batch(chunk, channels, steps, None)?;
        let logits = net.predict(&x, quant)?;
        for (row, &y) in logits.data().chunks_exact(k).zip(&labels) {
            if y >= k {
                return Err(Error::invalid(format!("label {y} outside [0, {k})")));
            }
            confusion[y][argmax(row)] += 1;
        }
    }
    let correct: usize = (0..k).map(|c| confusion[c][c]).sum();
    Ok(EvalReport {
        accuracy: correct as f64 / data.len() as f64,
        confusion,
    })
}

use super::{FOLD_CHANNELS, FOLD_STEPS, WINDOW};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A 16384-sample window laid out as 128 channels × 128 time steps.
///
/// Channel `c` holds samples `[128c, 128c + 128)`: convolution along the time
/// axis sees adjacent samples, the channel axis sees samples 128 apart.
#[derive(Clone, Debug, PartialEq)]
pub struct Folded {
    pub grid: Tensor,
}

impl Folded {
    pub fn at(&self, channel: usize, step: usize) -> f32 {
        self.grid.data()[channel * FOLD_STEPS + step]
    }
}

pub fn fold(samples: &[f32]) -> Result<Folded> {
    if samples.len() != WINDOW {
        return Err(Error::shape(format!(
            "fold needs exactly {WINDOW} samples, got {}",
            samples.len()
        )));
    }
    let grid = Tensor::new(vec![FOLD_CHANNELS, FOLD_STEPS], samples.to_vec())?;
    Ok(Folded { grid })
}

pub fn unfold(folded: &Folded) -> Vec<f32> {
    folded.grid.data().to_vec()
}

//! Samples, the synthetic generator, on-disk datasets and splits.

pub mod io;
mod split;
pub mod synth;

pub use io::{load_dataset, save_dataset, Annotation};
pub use split::{split_dataset, Splits};
pub use synth::{generate_dataset, generate_sample, SynthConfig, Template};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One image, its referring expression and the referent's mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    /// `3×H×W` in `[0, 1]`
    pub image: Tensor,
    pub expression: String,
    /// `H×W`, values in `{0, 1}`
    pub mask: Tensor,
    /// `H×W`, 1 where pixels are excluded from loss and metrics.
    pub ignore: Option<Tensor>,
    pub template: Option<Template>,
}

impl Sample {
    pub fn size(&self) -> (usize, usize) {
        let s = self.image.shape();
        (s[1], s[2])
    }

    pub fn is_relational(&self) -> bool {
        self.template == Some(Template::Relation)
    }

    pub fn mask_bits(&self) -> Vec<bool> {
        self.mask.data().iter().map(|&v| v >= 0.5).collect()
    }

    pub fn ignore_bits(&self) -> Option<Vec<bool>> {
        self.ignore
            .as_ref()
            .map(|t| t.data().iter().map(|&v| v >= 0.5).collect())
    }
}

/// Stacks images into `N×3×H×W`, masks into `N×1×H×W` and ignore maps
/// (absent ones as zeros) into `N×1×H×W` if any sample has one.
pub fn collate(samples: &[&Sample]) -> Result<(Tensor, Tensor, Option<Tensor>)> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Contract("cannot collate an empty batch".into()))?;
    let (h, w) = first.size();
    let n = samples.len();
    let mut images = Vec::with_capacity(n * 3 * h * w);
    let mut masks = Vec::with_capacity(n * h * w);
    let any_ignore = samples.iter().any(|s| s.ignore.is_some());
    let mut ignore = Vec::with_capacity(if any_ignore { n * h * w } else { 0 });
    for s in samples {
        if s.size() != (h, w) || s.mask.shape() != [h, w] {
            return Err(Error::Dimension(format!(
                "sample {} is {:?}, batch is {h}x{w}",
                s.id,
                s.size()
            )));
        }
        images.extend_from_slice(s.image.data());
        masks.extend_from_slice(s.mask.data());
        if any_ignore {
            match &s.ignore {
                Some(t) => ignore.extend_from_slice(t.data()),
                None => ignore.extend(std::iter::repeat(0.0).take(h * w)),
            }
        }
    }
    let ignore = if any_ignore {
        Some(Tensor::new([n, 1, h, w], ignore)?)
    } else {
        None
    };
    Ok((
        Tensor::new([n, 3, h, w], images)?,
        Tensor::new([n, 1, h, w], masks)?,
        ignore,
    ))
}

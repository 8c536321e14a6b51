use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Sample;
use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Splits {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

/// Largest-remainder apportionment of `total` by `weights` (which sum to 1).
fn apportion(total: usize, weights: &[f64]) -> Vec<usize> {
    let exact: Vec<f64> = weights.iter().map(|w| w * total as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (exact[a] - exact[a].floor(), exact[b] - exact[b].floor());
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let short = total - counts.iter().sum::<usize>();
    for &k in order.iter().take(short) {
        counts[k] += 1;
    }
    counts
}

/// Deterministic shuffled partition into train/val/test. Relational samples
/// are spread across the splits in proportion to their sizes.
pub fn split_dataset(samples: Vec<Sample>, ratios: [f64; 3], seed: u64) -> Result<Splits> {
    if ratios.iter().any(|r| !(0.0..=1.0).contains(r))
        || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9
    {
        return Err(Error::Config(format!(
            "split ratios {ratios:?} must be in [0, 1] and sum to 1"
        )));
    }
    let n = samples.len();
    let sizes = apportion(n, &ratios);
    if let Some(k) = sizes.iter().position(|&c| c == 0) {
        return Err(Error::Config(format!(
            "{} split would be empty ({n} samples, ratios {ratios:?})",
            ["train", "val", "test"][k]
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut rel, mut other): (Vec<Sample>, Vec<Sample>) =
        samples.into_iter().partition(Sample::is_relational);
    rel.shuffle(&mut rng);
    other.shuffle(&mut rng);

    let rel_weights: Vec<f64> = sizes.iter().map(|&c| c as f64 / n as f64).collect();
    let rel_sizes = apportion(rel.len(), &rel_weights);
    let mut rel = rel.into_iter();
    let mut other = other.into_iter();
    let mut parts: Vec<Vec<Sample>> = sizes
        .iter()
        .zip(&rel_sizes)
        .map(|(&size, &r)| {
            let r = r.min(size);
            let mut part: Vec<Sample> = rel.by_ref().take(r).collect();
            part.extend(other.by_ref().take(size - r));
            part
        })
        .collect();
    // rounding leftovers when a split could not hold its relational share
    let leftover: Vec<Sample> = rel.chain(other).collect();
    parts[0].extend(leftover);
    for p in &mut parts {
        p.shuffle(&mut rng);
    }
    let test = parts.pop().unwrap();
    let val = parts.pop().unwrap();
    let train = parts.pop().unwrap();
    Ok(Splits { train, val, test })
}

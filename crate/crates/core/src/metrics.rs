//! Segmentation metrics over binary masks.

use serde::ser::SerializeMap;
use serde::{Serialize, Serializer};

use crate::error::{Error, Result};

/// IoU thresholds reported by [`EvalReport`].
pub const PREC_THRESHOLDS: [f64; 5] = [0.5, 0.6, 0.7, 0.8, 0.9];

/// Intersection and union pixel counts over non-ignored pixels.
pub fn iou_counts(pred: &[bool], gt: &[bool], ignore: Option<&[bool]>) -> Result<(u64, u64)> {
    if pred.len() != gt.len() || ignore.is_some_and(|i| i.len() != gt.len()) {
        return Err(Error::Dimension(format!(
            "mask sizes differ: prediction {}, ground truth {}, ignore {:?}",
            pred.len(),
            gt.len(),
            ignore.map(<[bool]>::len)
        )));
    }
    let mut inter = 0;
    let mut union = 0;
    for (k, (&p, &g)) in pred.iter().zip(gt).enumerate() {
        if ignore.is_some_and(|i| i[k]) {
            continue;
        }
        inter += (p && g) as u64;
        union += (p || g) as u64;
    }
    Ok((inter, union))
}

fn ratio(i: u64, u: u64) -> f64 {
    if u == 0 {
        1.0
    } else {
        i as f64 / u as f64
    }
}

/// `|P ∩ G| / |P ∪ G|` over non-ignored pixels; two empty masks score 1.
pub fn per_example_iou(pred: &[bool], gt: &[bool], ignore: Option<&[bool]>) -> Result<f64> {
    let (i, u) = iou_counts(pred, gt, ignore)?;
    Ok(ratio(i, u))
}

/// Pooled IoU: total intersection over total union.
pub fn overall_iou(
    preds: &[Vec<bool>],
    gts: &[Vec<bool>],
    ignores: Option<&[Vec<bool>]>,
) -> Result<f64> {
    if preds.is_empty() {
        return Err(Error::Contract("overall IoU of an empty list".into()));
    }
    if preds.len() != gts.len() || ignores.is_some_and(|i| i.len() != gts.len()) {
        return Err(Error::Dimension(
            "prediction, ground-truth and ignore lists differ in length".into(),
        ));
    }
    let (mut i, mut u) = (0, 0);
    for (k, (p, g)) in preds.iter().zip(gts).enumerate() {
        let (pi, pu) = iou_counts(p, g, ignores.map(|ig| ig[k].as_slice()))?;
        i += pi;
        u += pu;
    }
    Ok(ratio(i, u))
}

/// Fraction of examples whose IoU is strictly above `threshold`.
pub fn precision_at(ious: &[f64], threshold: f64) -> Result<f64> {
    if ious.is_empty() {
        return Err(Error::Contract("precision of an empty IoU list".into()));
    }
    Ok(ious.iter().filter(|&&v| v > threshold).count() as f64 / ious.len() as f64)
}

/// Streaming pooled and per-example IoU over a dataset.
#[derive(Clone, Debug, Default)]
pub struct IouAccumulator {
    intersection: u64,
    union: u64,
    per_example: Vec<f64>,
}

impl IouAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, pred: &[bool], gt: &[bool], ignore: Option<&[bool]>) -> Result<f64> {
        let (i, u) = iou_counts(pred, gt, ignore)?;
        self.intersection += i;
        self.union += u;
        let iou = ratio(i, u);
        self.per_example.push(iou);
        Ok(iou)
    }

    pub fn len(&self) -> usize {
        self.per_example.len()
    }

    pub fn is_empty(&self) -> bool {
        self.per_example.is_empty()
    }

    pub fn per_example(&self) -> &[f64] {
        &self.per_example
    }

    pub fn overall(&self) -> f64 {
        ratio(self.intersection, self.union)
    }

    pub fn report(&self) -> Result<EvalReport> {
        if self.per_example.is_empty() {
            return Err(Error::Contract("no examples were evaluated".into()));
        }
        let n = self.per_example.len();
        let mean_iou = self.per_example.iter().sum::<f64>() / n as f64;
        let precision = PREC_THRESHOLDS
            .iter()
            .map(|&t| Ok((t, precision_at(&self.per_example, t)?)))
            .collect::<Result<_>>()?;
        Ok(EvalReport {
            overall_iou: self.overall(),
            mean_iou,
            precision,
            n,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub overall_iou: f64,
    pub mean_iou: f64,
    /// `(threshold, precision)` for each of [`PREC_THRESHOLDS`].
    pub precision: Vec<(f64, f64)>,
    pub n: usize,
}

impl EvalReport {
    pub fn precision_at(&self, threshold: f64) -> Option<f64> {
        self.precision
            .iter()
            .find(|(t, _)| (t - threshold).abs() < 1e-12)
            .map(|&(_, p)| p)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }
}

impl Serialize for EvalReport {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let mut map = s.serialize_map(Some(3 + self.precision.len()))?;
        map.serialize_entry("overall_iou", &self.overall_iou)?;
        map.serialize_entry("mean_iou", &self.mean_iou)?;
        for (t, p) in &self.precision {
            map.serialize_entry(&format!("prec@{t:.1}"), p)?;
        }
        map.serialize_entry("n", &self.n)?;
        map.end()
    }
}

//! Pixel-wise binary cross-entropy with ignore masks, and the multi-scale
//! objective over the auxiliary probability maps.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::segnet::ForwardOutput;
use crate::tensor::Tensor;

/// How an auxiliary term is weighted relative to the full-resolution loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuxWeighting {
    /// `(h·w) / (H·W)`
    #[default]
    PixelRatio,
    /// `h / H`
    LinearRatio,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObjectiveConfig {
    pub multiscale: bool,
    pub aux_weighting: AuxWeighting,
    /// Area-averaged (soft) downscaled targets; `false` thresholds them at 0.5.
    pub soft_targets: bool,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        ObjectiveConfig {
            multiscale: true,
            aux_weighting: AuxWeighting::PixelRatio,
            soft_targets: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuxTerm {
    pub resolution: (usize, usize),
    pub weight: f64,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub final_term: f64,
    pub aux_terms: Vec<AuxTerm>,
}

/// Mean BCE of `p` against `gm` over non-ignored pixels.
pub fn bce_loss(tape: &mut Tape, p: Var, gm: &Tensor, ignore: Option<&Tensor>) -> Result<Var> {
    if tape.shape(p) != gm.shape() {
        return Err(Error::Dimension(format!(
            "bce: prediction {:?} vs mask {:?}",
            tape.shape(p),
            gm.shape()
        )));
    }
    tape.bce(p, gm, ignore)
}

/// Block-mean pooling of the last two axes down to `(h, w)`.
pub fn downscale_mask(gm: &Tensor, (h, w): (usize, usize)) -> Result<Tensor> {
    let s = gm.shape();
    if s.len() < 2 {
        return Err(Error::Dimension(format!(
            "mask must be at least 2-D, got {s:?}"
        )));
    }
    let (big_h, big_w) = (s[s.len() - 2], s[s.len() - 1]);
    if h == 0 || w == 0 || big_h % h != 0 || big_w % w != 0 {
        return Err(Error::Config(format!(
            "cannot pool {big_h}x{big_w} to {h}x{w}: not an integer ratio"
        )));
    }
    let (fy, fx) = (big_h / h, big_w / w);
    let planes = gm.numel() / (big_h * big_w);
    let inv = 1.0 / (fy * fx) as f64;
    let mut out = Vec::with_capacity(planes * h * w);
    for plane in gm.data().chunks(big_h * big_w) {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for dy in 0..fy {
                    let row = (y * fy + dy) * big_w + x * fx;
                    acc += plane[row..row + fx].iter().sum::<f64>();
                }
                out.push(acc * inv);
            }
        }
    }
    let mut shape = s.to_vec();
    let n = shape.len();
    shape[n - 2] = h;
    shape[n - 1] = w;
    Tensor::new(shape, out)
}

/// Weight of an auxiliary map of size `(h, w)` under `rule`.
pub fn aux_weight(
    rule: AuxWeighting,
    (h, w): (usize, usize),
    (big_h, big_w): (usize, usize),
) -> f64 {
    match rule {
        AuxWeighting::PixelRatio => (h * w) as f64 / (big_h * big_w) as f64,
        AuxWeighting::LinearRatio => h as f64 / big_h as f64,
    }
}

/// Final BCE plus resolution-weighted auxiliary BCE terms. With
/// `multiscale` off, the returned loss is the final BCE node itself.
pub fn multiscale_loss(
    tape: &mut Tape,
    out: &ForwardOutput,
    gm: &Tensor,
    ignore: Option<&Tensor>,
    cfg: &ObjectiveConfig,
) -> Result<(Var, LossReport)> {
    let final_var = bce_loss(tape, out.prob, gm, ignore)?;
    let final_term = tape.value(final_var).item();
    let mut total = final_var;
    let mut aux_terms = Vec::new();
    if cfg.multiscale {
        let s = gm.shape();
        let full = (s[s.len() - 2], s[s.len() - 1]);
        for &aux in &out.aux {
            let a = tape.shape(aux);
            let res = (a[a.len() - 2], a[a.len() - 1]);
            let mut target = downscale_mask(gm, res)?;
            if !cfg.soft_targets {
                target = target.map(|v| if v >= 0.5 { 1.0 } else { 0.0 });
            }
            let ig = ignore
                .map(|i| {
                    downscale_mask(i, res).map(|t| t.map(|v| if v >= 0.5 { 1.0 } else { 0.0 }))
                })
                .transpose()?;
            if ig
                .as_ref()
                .is_some_and(|i| i.data().iter().all(|&v| v != 0.0))
            {
                continue;
            }
            let term = bce_loss(tape, aux, &target, ig.as_ref())?;
            let weight = aux_weight(cfg.aux_weighting, res, full);
            aux_terms.push(AuxTerm {
                resolution: res,
                weight,
                value: tape.value(term).item(),
            });
            let scaled = tape.scale(term, weight);
            total = tape.add(total, scaled)?;
        }
    }
    let report = LossReport {
        total: tape.value(total).item(),
        final_term,
        aux_terms,
    };
    Ok((total, report))
}

//! Single-image inference to mask and heatmap files.

use std::path::{Path, PathBuf};

use crate::checkpoint::Checkpoint;
use crate::data::io::{gray_image, image_to_tensor};
use crate::error::{Error, Result};
use crate::segnet::predict_mask;
use crate::tensor::Tensor;
use crate::text::tokenize;

/// Nearest-neighbor resampling of a `C×H×W` tensor: output pixel `(y, x)`
/// copies input pixel `(⌊(y + ½)·H/h⌋, ⌊(x + ½)·W/w⌋)`.
pub fn resize_nearest(t: &Tensor, (h, w): (usize, usize)) -> Result<Tensor> {
    let s = t.shape();
    if s.len() != 3 {
        return Err(Error::Dimension(format!("expected C×H×W, got {s:?}")));
    }
    let (c, sh, sw) = (s[0], s[1], s[2]);
    if (sh, sw) == (h, w) {
        return Ok(t.clone());
    }
    let src =
        |dst: usize, from: usize, to: usize| (((2 * dst + 1) * from) / (2 * to)).min(from - 1);
    let d = t.data();
    let mut out = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        for y in 0..h {
            let sy = src(y, sh, h);
            for x in 0..w {
                out.push(d[(ch * sh + sy) * sw + src(x, sw, w)]);
            }
        }
    }
    Tensor::new([c, h, w], out)
}

pub struct Prediction {
    /// `H×W` probabilities at the input image's resolution.
    pub prob: Tensor,
    /// `H×W` binary mask at the input image's resolution.
    pub mask: Tensor,
}

/// Runs the model on one `3×H×W` image of any size.
pub fn predict_tensor(
    ckpt: &Checkpoint,
    image: &Tensor,
    expression: &str,
    threshold: f64,
) -> Result<Prediction> {
    let (net, params) = ckpt.model()?;
    let [h, w] = net.config().image_size;
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::Dimension(format!("expected 3×H×W image, got {s:?}")));
    }
    let orig = (s[1], s[2]);
    let input = resize_nearest(image, (h, w))?.reshape([1, 3, h, w])?;
    let ids = tokenize(expression, &ckpt.vocab, net.config().max_len)?;
    let prob = net
        .predict_proba(params, &input, &[ids])?
        .reshape([1, h, w])?;
    let prob = resize_nearest(&prob, orig)?.reshape([orig.0, orig.1])?;
    let mask = predict_mask(&prob, threshold)?;
    Ok(Prediction { prob, mask })
}

pub struct PredictFiles {
    pub mask_path: PathBuf,
    pub prob_path: PathBuf,
    pub prediction: Prediction,
}

/// Writes `<stem>.mask.png` (0/255) and `<stem>.prob.png` (8-bit heatmap)
/// into `out_dir`.
pub fn predict_file(
    ckpt: &Checkpoint,
    image_path: &Path,
    expression: &str,
    threshold: f64,
    out_dir: &Path,
) -> Result<PredictFiles> {
    let img = image::open(image_path)
        .map_err(|e| Error::Image {
            path: image_path.to_path_buf(),
            source: e,
        })?
        .to_rgb8();
    let prediction = predict_tensor(ckpt, &image_to_tensor(&img), expression, threshold)?;
    let stem = image_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "prediction".into());
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mask_path = out_dir.join(format!("{stem}.mask.png"));
    let prob_path = out_dir.join(format!("{stem}.prob.png"));
    for (t, p) in [
        (&prediction.mask, &mask_path),
        (&prediction.prob, &prob_path),
    ] {
        gray_image(t)?
            .save_with_format(p, image::ImageFormat::Png)
            .map_err(|e| Error::Image {
                path: p.clone(),
                source: e,
            })?;
    }
    Ok(PredictFiles {
        mask_path,
        prob_path,
        prediction,
    })
}

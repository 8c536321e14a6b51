use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use image::{GrayImage, RgbImage};
use serde::{Deserialize, Serialize};

use super::synth::Template;
use super::Sample;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const ANNOTATIONS: &str = "annotations.jsonl";
const IMAGE_EXTS: [&str; 2] = ["png", "ppm"];
const MASK_EXTS: [&str; 2] = ["png", "pgm"];

/// One line of `annotations.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub id: String,
    pub expression: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub template: Option<Template>,
}

fn load_err(record: &str, reason: impl Into<String>) -> Error {
    Error::Load {
        record: record.to_string(),
        reason: reason.into(),
    }
}

fn find(dir: &Path, id: &str, exts: &[&str]) -> Option<PathBuf> {
    exts.iter()
        .map(|e| dir.join(format!("{id}.{e}")))
        .find(|p| p.is_file())
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Reads `root/annotations.jsonl` and the matching image and mask files.
/// Samples keep annotation-file order.
pub fn load_dataset(root: &Path) -> Result<Vec<Sample>> {
    let ann_path = root.join(ANNOTATIONS);
    let file = File::open(&ann_path).map_err(|e| Error::io(&ann_path, e))?;
    let mut out = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&ann_path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let where_ = format!("{}:{}", ANNOTATIONS, lineno + 1);
        let ann: Annotation =
            serde_json::from_str(&line).map_err(|e| load_err(&where_, e.to_string()))?;
        if ann.expression.trim().is_empty() {
            return Err(load_err(&ann.id, "empty expression"));
        }
        out.push(load_record(root, ann)?);
    }
    Ok(out)
}

fn load_record(root: &Path, ann: Annotation) -> Result<Sample> {
    let id = &ann.id;
    let img_path = find(&root.join("images"), id, &IMAGE_EXTS)
        .ok_or_else(|| load_err(id, "image file missing"))?;
    let mask_path = find(&root.join("masks"), id, &MASK_EXTS)
        .ok_or_else(|| load_err(id, "mask file missing"))?;
    let img = image::open(&img_path)
        .map_err(|e| load_err(id, format!("{}: {e}", img_path.display())))?
        .to_rgb8();
    let mask = image::open(&mask_path)
        .map_err(|e| load_err(id, format!("{}: {e}", mask_path.display())))?
        .to_luma8();
    if img.dimensions() != mask.dimensions() {
        return Err(load_err(
            id,
            format!(
                "image is {:?} but mask is {:?}",
                img.dimensions(),
                mask.dimensions()
            ),
        ));
    }
    let ignore = match find(&root.join("ignore"), id, &MASK_EXTS) {
        Some(p) => Some(binarize(
            &image::open(&p)
                .map_err(|e| load_err(id, format!("{}: {e}", p.display())))?
                .to_luma8(),
        )),
        None => None,
    };
    Ok(Sample {
        id: ann.id,
        image: image_to_tensor(&img),
        expression: ann.expression,
        mask: binarize(&mask),
        ignore,
        template: ann.template,
    })
}

/// `3×H×W` tensor in `[0, 1]`.
pub fn image_to_tensor(img: &RgbImage) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let plane = w * h;
    let mut data = vec![0.0; 3 * plane];
    for (i, px) in img.pixels().enumerate() {
        for c in 0..3 {
            data[c * plane + i] = px.0[c] as f64 / 255.0;
        }
    }
    Tensor::new([3, h, w], data).expect("image shape")
}

pub fn tensor_to_image(t: &Tensor) -> Result<RgbImage> {
    let s = t.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::Dimension(format!("expected 3×H×W image, got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let plane = h * w;
    let d = t.data();
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        image::Rgb([to_u8(d[i]), to_u8(d[plane + i]), to_u8(d[2 * plane + i])])
    }))
}

/// Pixels at or above 128 become 1.
pub fn binarize(mask: &GrayImage) -> Tensor {
    let data = mask
        .pixels()
        .map(|p| if p.0[0] >= 128 { 1.0 } else { 0.0 })
        .collect();
    Tensor::new([mask.height() as usize, mask.width() as usize], data).expect("mask shape")
}

/// `H×W` tensor to an 8-bit gray image, scaling `[0, 1]` to `[0, 255]`.
pub fn gray_image(t: &Tensor) -> Result<GrayImage> {
    let s = t.shape();
    if s.len() != 2 {
        return Err(Error::Dimension(format!("expected H×W map, got {s:?}")));
    }
    let w = s[1];
    let d = t.data();
    Ok(GrayImage::from_fn(w as u32, s[0] as u32, |x, y| {
        image::Luma([to_u8(d[y as usize * w + x as usize])])
    }))
}

fn save_png<P, C>(img: &image::ImageBuffer<P, C>, path: &Path) -> Result<()>
where
    P: image::PixelWithColorType,
    [P::Subpixel]: image::EncodableLayout,
    C: std::ops::Deref<Target = [P::Subpixel]>,
{
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            source: e,
        })
}

/// Writes samples in the layout read by [`load_dataset`].
pub fn save_dataset(root: &Path, samples: &[Sample]) -> Result<()> {
    for dir in ["images", "masks"] {
        let d = root.join(dir);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let ann_path = root.join(ANNOTATIONS);
    let file = File::create(&ann_path).map_err(|e| Error::io(&ann_path, e))?;
    let mut ann = BufWriter::new(file);
    for s in samples {
        save_png(
            &tensor_to_image(&s.image)?,
            &root.join("images").join(format!("{}.png", s.id)),
        )?;
        save_png(
            &gray_image(&s.mask)?,
            &root.join("masks").join(format!("{}.png", s.id)),
        )?;
        if let Some(ig) = &s.ignore {
            let d = root.join("ignore");
            fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
            save_png(&gray_image(ig)?, &d.join(format!("{}.png", s.id)))?;
        }
        let rec = Annotation {
            id: s.id.clone(),
            expression: s.expression.clone(),
            template: s.template,
        };
        writeln!(ann, "{}", serde_json::to_string(&rec)?).map_err(|e| Error::io(&ann_path, e))?;
    }
    ann.flush().map_err(|e| Error::io(&ann_path, e))
}

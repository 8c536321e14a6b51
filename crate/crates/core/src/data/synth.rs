//! Synthetic referring-expression scenes: flat-colored shapes on a dark
//! canvas, with expressions that pick out exactly one object.

use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Sample;
use crate::error::{Error, Result};
use crate::par;
use crate::tensor::Tensor;

pub const MAX_TRIES: usize = 1000;
/// Gray level of the empty canvas, in 1/255 units.
pub const BACKGROUND: u8 = 24;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Circle, ShapeKind::Square, ShapeKind::Triangle];

    pub fn word(self) -> &'static str {
        match self {
            ShapeKind::Circle => "circle",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
        }
    }
}

impl Color {
    pub const ALL: [Color; 4] = [Color::Red, Color::Green, Color::Blue, Color::Yellow];

    pub fn word(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
        }
    }

    pub fn rgb(self) -> [u8; 3] {
        match self {
            Color::Red => [220, 40, 40],
            Color::Green => [40, 190, 70],
            Color::Blue => [50, 90, 230],
            Color::Yellow => [235, 215, 40],
        }
    }
}

/// One shape occupying the `size × size` pixel box whose top-left corner is
/// `origin = (x, y)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneObject {
    pub shape: ShapeKind,
    pub color: Color,
    pub origin: (usize, usize),
    pub size: usize,
}

impl SceneObject {
    pub fn center(&self) -> (f64, f64) {
        let h = self.size as f64 / 2.0;
        (self.origin.0 as f64 + h, self.origin.1 as f64 + h)
    }

    pub fn describe(&self) -> (Color, ShapeKind) {
        (self.color, self.shape)
    }

    /// Whether the pixel at column `px`, row `py` belongs to the shape,
    /// judged at the pixel center.
    pub fn covers(&self, px: usize, py: usize) -> bool {
        let (x0, y0) = (self.origin.0 as f64, self.origin.1 as f64);
        let s = self.size as f64;
        let (x, y) = (px as f64 + 0.5, py as f64 + 0.5);
        if x < x0 || x > x0 + s || y < y0 || y > y0 + s {
            return false;
        }
        let (cx, cy) = self.center();
        match self.shape {
            ShapeKind::Square => true,
            ShapeKind::Circle => (x - cx).powi(2) + (y - cy).powi(2) <= (s / 2.0).powi(2),
            // apex at the top center, base along the bottom edge
            ShapeKind::Triangle => (x - cx).abs() <= (y - y0) / 2.0,
        }
    }

    fn separated(&self, other: &SceneObject, gap: usize) -> bool {
        let apart =
            |a0: usize, sa: usize, b0: usize, sb: usize| a0 + sa + gap <= b0 || b0 + sb + gap <= a0;
        apart(self.origin.0, self.size, other.origin.0, other.size)
            || apart(self.origin.1, self.size, other.origin.1, other.size)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub objects: Vec<SceneObject>,
    /// `(height, width)`
    pub canvas: (usize, usize),
}

impl SceneSpec {
    pub fn count(&self, desc: (Color, ShapeKind)) -> usize {
        self.objects.iter().filter(|o| o.describe() == desc).count()
    }

    pub fn count_shape(&self, shape: ShapeKind) -> usize {
        self.objects.iter().filter(|o| o.shape == shape).count()
    }

    /// `3×H×W` image in `[0, 1]`.
    pub fn render(&self) -> Tensor {
        let (h, w) = self.canvas;
        let plane = h * w;
        let bg = BACKGROUND as f64 / 255.0;
        let mut data = vec![bg; 3 * plane];
        for obj in &self.objects {
            let rgb = obj.color.rgb();
            for y in obj.origin.1..(obj.origin.1 + obj.size).min(h) {
                for x in obj.origin.0..(obj.origin.0 + obj.size).min(w) {
                    if obj.covers(x, y) {
                        for c in 0..3 {
                            data[c * plane + y * w + x] = rgb[c] as f64 / 255.0;
                        }
                    }
                }
            }
        }
        Tensor::new([3, h, w], data).expect("canvas shape")
    }

    /// `H×W` binary mask of object `index`.
    pub fn mask_of(&self, index: usize) -> Tensor {
        let (h, w) = self.canvas;
        let obj = &self.objects[index];
        let mut m = Tensor::zeros([h, w]);
        let d = m.data_mut();
        for y in obj.origin.1..(obj.origin.1 + obj.size).min(h) {
            for x in obj.origin.0..(obj.origin.0 + obj.size).min(w) {
                if obj.covers(x, y) {
                    d[y * w + x] = 1.0;
                }
            }
        }
        m
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Template {
    Attribute,
    Location,
    Relation,
    Superlative,
}

impl Template {
    pub const ALL: [Template; 4] = [
        Template::Attribute,
        Template::Location,
        Template::Relation,
        Template::Superlative,
    ];

    fn min_objects(self) -> usize {
        match self {
            Template::Relation => 3,
            _ => 2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Region {
    Left,
    Right,
    Top,
    Bottom,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relation {
    LeftOf,
    RightOf,
    Above,
    Below,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Extreme {
    Largest,
    Smallest,
}

/// A parsed referring expression with its own resolution semantics.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Expression {
    Attribute {
        color: Color,
        shape: ShapeKind,
    },
    Location {
        shape: ShapeKind,
        region: Region,
    },
    Relation {
        target: (Color, ShapeKind),
        relation: Relation,
        anchor: (Color, ShapeKind),
    },
    Superlative {
        extreme: Extreme,
        shape: ShapeKind,
    },
}

impl Expression {
    pub fn template(&self) -> Template {
        match self {
            Expression::Attribute { .. } => Template::Attribute,
            Expression::Location { .. } => Template::Location,
            Expression::Relation { .. } => Template::Relation,
            Expression::Superlative { .. } => Template::Superlative,
        }
    }

    /// Indices of every object the expression describes in `scene`.
    pub fn resolve(&self, scene: &SceneSpec) -> Vec<usize> {
        let (h, w) = (scene.canvas.0 as f64, scene.canvas.1 as f64);
        let objs = &scene.objects;
        let idx = 0..objs.len();
        match *self {
            Expression::Attribute { color, shape } => idx
                .filter(|&i| objs[i].describe() == (color, shape))
                .collect(),
            Expression::Location { shape, region } => idx
                .filter(|&i| {
                    let (x, y) = objs[i].center();
                    objs[i].shape == shape
                        && match region {
                            Region::Left => x < w / 3.0,
                            Region::Right => x > 2.0 * w / 3.0,
                            Region::Top => y < h / 3.0,
                            Region::Bottom => y > 2.0 * h / 3.0,
                        }
                })
                .collect(),
            Expression::Relation {
                target,
                relation,
                anchor,
            } => {
                let margin = h / 16.0;
                idx.filter(|&i| {
                    objs[i].describe() == target
                        && objs.iter().enumerate().any(|(j, b)| {
                            let (ax, ay) = objs[i].center();
                            let (bx, by) = b.center();
                            j != i
                                && b.describe() == anchor
                                && match relation {
                                    Relation::LeftOf => ax < bx - margin,
                                    Relation::RightOf => ax > bx + margin,
                                    Relation::Above => ay < by - margin,
                                    Relation::Below => ay > by + margin,
                                }
                        })
                })
                .collect()
            }
            Expression::Superlative { extreme, shape } => {
                let sizes: Vec<usize> = idx
                    .clone()
                    .filter(|&i| objs[i].shape == shape)
                    .map(|i| objs[i].size)
                    .collect();
                let best = match extreme {
                    Extreme::Largest => sizes.iter().max(),
                    Extreme::Smallest => sizes.iter().min(),
                };
                match best {
                    Some(&b) => idx
                        .filter(|&i| objs[i].shape == shape && objs[i].size == b)
                        .collect(),
                    None => Vec::new(),
                }
            }
        }
    }

    /// Candidate expressions of `template` that identify exactly one object
    /// and actually need their template to do so.
    pub fn candidates(template: Template, scene: &SceneSpec) -> Vec<Expression> {
        let mut out = Vec::new();
        match template {
            Template::Attribute => {
                for o in &scene.objects {
                    out.push(Expression::Attribute {
                        color: o.color,
                        shape: o.shape,
                    });
                }
            }
            Template::Location => {
                for s in ShapeKind::ALL {
                    if scene.count_shape(s) < 2 {
                        continue;
                    }
                    for region in [Region::Left, Region::Right, Region::Top, Region::Bottom] {
                        out.push(Expression::Location { shape: s, region });
                    }
                }
            }
            Template::Relation => {
                for t in &scene.objects {
                    if scene.count(t.describe()) < 2 {
                        continue;
                    }
                    for a in &scene.objects {
                        if a.describe() == t.describe() {
                            continue;
                        }
                        for relation in [
                            Relation::LeftOf,
                            Relation::RightOf,
                            Relation::Above,
                            Relation::Below,
                        ] {
                            out.push(Expression::Relation {
                                target: t.describe(),
                                relation,
                                anchor: a.describe(),
                            });
                        }
                    }
                }
            }
            Template::Superlative => {
                for s in ShapeKind::ALL {
                    let mut sizes: Vec<usize> = scene
                        .objects
                        .iter()
                        .filter(|o| o.shape == s)
                        .map(|o| o.size)
                        .collect();
                    if sizes.len() < 2 {
                        continue;
                    }
                    sizes.sort_unstable();
                    let n = sizes.len();
                    if sizes[n - 1] >= sizes[n - 2] + 3 {
                        out.push(Expression::Superlative {
                            extreme: Extreme::Largest,
                            shape: s,
                        });
                    }
                    if sizes[1] >= sizes[0] + 3 {
                        out.push(Expression::Superlative {
                            extreme: Extreme::Smallest,
                            shape: s,
                        });
                    }
                }
            }
        }
        out.sort_by_key(|e| e.to_string());
        out.dedup();
        out.retain(|e| e.resolve(scene).len() == 1);
        out
    }
}

impl fmt::Display for Expression {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Expression::Attribute { color, shape } => {
                write!(f, "{} {}", color.word(), shape.word())
            }
            Expression::Location { shape, region } => {
                let r = match region {
                    Region::Left => "on the left",
                    Region::Right => "on the right",
                    Region::Top => "at the top",
                    Region::Bottom => "at the bottom",
                };
                write!(f, "{} {r}", shape.word())
            }
            Expression::Relation {
                target,
                relation,
                anchor,
            } => {
                let r = match relation {
                    Relation::LeftOf => "left of",
                    Relation::RightOf => "right of",
                    Relation::Above => "above",
                    Relation::Below => "below",
                };
                write!(
                    f,
                    "{} {} {r} the {} {}",
                    target.0.word(),
                    target.1.word(),
                    anchor.0.word(),
                    anchor.1.word()
                )
            }
            Expression::Superlative { extreme, shape } => {
                let e = match extreme {
                    Extreme::Largest => "largest",
                    Extreme::Smallest => "smallest",
                };
                write!(f, "{e} {}", shape.word())
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    /// `[height, width]`
    pub canvas: [usize; 2],
    pub templates: Vec<Template>,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Minimum empty pixels between object boxes.
    pub gap: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            canvas: [64, 64],
            templates: Template::ALL.to_vec(),
            min_objects: 2,
            max_objects: 4,
            gap: 2,
        }
    }
}

impl SynthConfig {
    /// Object side lengths span `[H/8, H/3]`.
    pub fn size_range(&self) -> (usize, usize) {
        let h = self.canvas[0].min(self.canvas[1]);
        ((h / 8).max(2), h / 3)
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.size_range();
        if self.templates.is_empty() {
            return Err(Error::Config("no expression templates enabled".into()));
        }
        if self.min_objects < 2 || self.max_objects < self.min_objects {
            return Err(Error::Config(format!(
                "object count range {}..={} must start at 2 or more",
                self.min_objects, self.max_objects
            )));
        }
        if lo > hi {
            return Err(Error::Config(format!(
                "canvas {:?} too small for shapes",
                self.canvas
            )));
        }
        if self.templates.contains(&Template::Relation) && self.max_objects < 3 {
            return Err(Error::Config(
                "relation expressions need at least 3 objects".into(),
            ));
        }
        Ok(())
    }
}

fn random_object<R: Rng + ?Sized>(
    rng: &mut R,
    cfg: &SynthConfig,
    desc: Option<(Color, ShapeKind)>,
) -> SceneObject {
    let (lo, hi) = cfg.size_range();
    let (color, shape) = desc.unwrap_or_else(|| {
        (
            *Color::ALL.choose(rng).unwrap(),
            *ShapeKind::ALL.choose(rng).unwrap(),
        )
    });
    let size = rng.gen_range(lo..=hi);
    SceneObject {
        shape,
        color,
        origin: (
            rng.gen_range(0..=cfg.canvas[1] - size),
            rng.gen_range(0..=cfg.canvas[0] - size),
        ),
        size,
    }
}

/// Places `descs` one by one without overlap; `None` if some object finds no room.
fn place<R: Rng + ?Sized>(
    rng: &mut R,
    cfg: &SynthConfig,
    descs: &[Option<(Color, ShapeKind)>],
) -> Option<SceneSpec> {
    let mut objects: Vec<SceneObject> = Vec::with_capacity(descs.len());
    for &d in descs {
        let obj = (0..100)
            .map(|_| random_object(rng, cfg, d))
            .find(|o| objects.iter().all(|p| o.separated(p, cfg.gap)))?;
        objects.push(obj);
    }
    Some(SceneSpec {
        objects,
        canvas: (cfg.canvas[0], cfg.canvas[1]),
    })
}

fn random_desc<R: Rng + ?Sized>(rng: &mut R) -> (Color, ShapeKind) {
    (
        *Color::ALL.choose(rng).unwrap(),
        *ShapeKind::ALL.choose(rng).unwrap(),
    )
}

/// Object descriptions biased so that `template` has a chance to apply.
fn scene_plan<R: Rng + ?Sized>(
    rng: &mut R,
    cfg: &SynthConfig,
    template: Template,
) -> Vec<Option<(Color, ShapeKind)>> {
    let lo = cfg.min_objects.max(template.min_objects());
    let n = rng.gen_range(lo..=cfg.max_objects);
    let mut plan = vec![None; n];
    match template {
        Template::Attribute => {}
        Template::Location | Template::Superlative => {
            let shape = *ShapeKind::ALL.choose(rng).unwrap();
            plan[0] = Some((*Color::ALL.choose(rng).unwrap(), shape));
            plan[1] = Some((*Color::ALL.choose(rng).unwrap(), shape));
        }
        Template::Relation => {
            let target = random_desc(rng);
            let anchor = loop {
                let a = random_desc(rng);
                if a != target {
                    break a;
                }
            };
            plan[0] = Some(target);
            plan[1] = Some(target);
            plan[2] = Some(anchor);
        }
    }
    plan.shuffle(rng);
    plan
}

/// Draws a scene and a uniquely resolving expression by rejection sampling.
pub fn generate_scene<R: Rng + ?Sized>(
    rng: &mut R,
    cfg: &SynthConfig,
) -> Result<(SceneSpec, Expression)> {
    cfg.validate()?;
    for _ in 0..MAX_TRIES {
        let template = *cfg.templates.choose(rng).unwrap();
        let plan = scene_plan(rng, cfg, template);
        let Some(scene) = place(rng, cfg, &plan) else {
            continue;
        };
        let cands = Expression::candidates(template, &scene);
        if let Some(&expr) = cands.choose(rng) {
            return Ok((scene, expr));
        }
    }
    Err(Error::Generation(format!(
        "no valid scene after {MAX_TRIES} tries for templates {:?}",
        cfg.templates
    )))
}

pub fn render_sample(
    id: impl Into<String>,
    scene: &SceneSpec,
    expr: &Expression,
) -> Result<Sample> {
    let hits = expr.resolve(scene);
    let [referent] = hits[..] else {
        return Err(Error::Generation(format!(
            "\"{expr}\" matches {} objects, expected 1",
            hits.len()
        )));
    };
    Ok(Sample {
        id: id.into(),
        image: scene.render(),
        expression: expr.to_string(),
        mask: scene.mask_of(referent),
        ignore: None,
        template: Some(expr.template()),
    })
}

/// Independent random stream for sample `index` of the dataset seeded by `seed`.
pub fn sample_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

pub fn generate_sample<R: Rng + ?Sized>(
    rng: &mut R,
    cfg: &SynthConfig,
    id: impl Into<String>,
) -> Result<Sample> {
    let (scene, expr) = generate_scene(rng, cfg)?;
    render_sample(id, &scene, &expr)
}

/// `n` samples, a pure function of `(seed, cfg)`; ids are zero-padded indices.
pub fn generate_dataset(cfg: &SynthConfig, n: usize, seed: u64) -> Result<Vec<Sample>> {
    cfg.validate()?;
    par::map_indexed(n, |i| {
        generate_sample(&mut sample_rng(seed, i), cfg, format!("{i:06}"))
    })
    .into_iter()
    .collect()
}

/// Every word the generator can emit.
pub fn synth_words() -> Vec<&'static str> {
    let mut w: Vec<&str> = Color::ALL.iter().map(|c| c.word()).collect();
    w.extend(ShapeKind::ALL.iter().map(|s| s.word()));
    w.extend([
        "on", "the", "left", "right", "at", "top", "bottom", "of", "above", "below", "largest",
        "smallest",
    ]);
    w
}

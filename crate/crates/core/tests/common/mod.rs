//! Brute-force scalar reference implementations and randomized comparison
//! drivers shared by the integration tests and the acceptance runner.
#![allow(dead_code)]

use lingseg::autodiff::BatchNormState;
use lingseg::data::synth::{
    Color, Expression, Extreme, Region, Relation, SceneObject, SceneSpec, ShapeKind, BACKGROUND,
};
use lingseg::metrics::{overall_iou, per_example_iou, precision_at};
use lingseg::objective::downscale_mask;
use lingseg::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

pub fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

// ---- numeric ops ----

/// Direct cross-correlation with zero padding.
pub fn conv2d_ref(x: &Tensor, k: &Tensor, stride: usize, pad: usize) -> Tensor {
    let [n, cin, h, w] = x.shape().try_into().unwrap();
    let [cout, kcin, kh, kw] = k.shape().try_into().unwrap();
    assert_eq!(cin, kcin);
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (w + 2 * pad - kw) / stride + 1;
    let mut out = Tensor::zeros([n, cout, ho, wo]);
    for b in 0..n {
        for co in 0..cout {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = 0.0;
                    for ci in 0..cin {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                acc += x.at(&[b, ci, iy as usize, ix as usize])
                                    * k.at(&[co, ci, ky, kx]);
                            }
                        }
                    }
                    out.set(&[b, co, oy, ox], acc);
                }
            }
        }
    }
    out
}

/// Scatter form of the transposed convolution, `k` is `Cin×Cout×kh×kw`.
pub fn conv_transpose2d_ref(
    x: &Tensor,
    k: &Tensor,
    stride: usize,
    pad: usize,
    out_pad: usize,
) -> Tensor {
    let [n, cin, h, w] = x.shape().try_into().unwrap();
    let [kcin, cout, kh, kw] = k.shape().try_into().unwrap();
    assert_eq!(cin, kcin);
    let ho = (h - 1) * stride + kh + out_pad - 2 * pad;
    let wo = (w - 1) * stride + kw + out_pad - 2 * pad;
    let mut out = Tensor::zeros([n, cout, ho, wo]);
    for b in 0..n {
        for ci in 0..cin {
            for iy in 0..h {
                for ix in 0..w {
                    let v = x.at(&[b, ci, iy, ix]);
                    for co in 0..cout {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let oy = (iy * stride + ky) as isize - pad as isize;
                                let ox = (ix * stride + kx) as isize - pad as isize;
                                if oy < 0 || ox < 0 || oy >= ho as isize || ox >= wo as isize {
                                    continue;
                                }
                                let (oy, ox) = (oy as usize, ox as usize);
                                let cur = out.at(&[b, co, oy, ox]);
                                out.set(&[b, co, oy, ox], cur + v * k.at(&[ci, co, ky, kx]));
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Training mode normalizes with the biased per-channel batch moments,
/// inference mode with the running statistics in `state`.
pub fn batchnorm_ref(
    x: &Tensor,
    gamma: &[f64],
    beta: &[f64],
    state: &BatchNormState,
    training: bool,
) -> Tensor {
    let [n, c, h, w] = x.shape().try_into().unwrap();
    let mut out = x.clone();
    for ch in 0..c {
        let (mean, var) = if training {
            let mut vals = Vec::new();
            for b in 0..n {
                for y in 0..h {
                    for xx in 0..w {
                        vals.push(x.at(&[b, ch, y, xx]));
                    }
                }
            }
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let v = vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / vals.len() as f64;
            (m, v)
        } else {
            (state.running_mean[ch], state.running_var[ch])
        };
        for b in 0..n {
            for y in 0..h {
                for xx in 0..w {
                    let v = x.at(&[b, ch, y, xx]);
                    let o = gamma[ch] * (v - mean) / (var + state.eps).sqrt() + beta[ch];
                    out.set(&[b, ch, y, xx], o);
                }
            }
        }
    }
    out
}

pub fn bce_ref(p: &[f64], t: &[f64], ignore: Option<&[f64]>) -> f64 {
    let mut sum = 0.0;
    let mut count = 0usize;
    for i in 0..p.len() {
        if ignore.is_some_and(|ig| ig[i] != 0.0) {
            continue;
        }
        let q = p[i].clamp(1e-7, 1.0 - 1e-7);
        sum -= t[i] * q.ln() + (1.0 - t[i]) * (1.0 - q).ln();
        count += 1;
    }
    sum / count as f64
}

/// Block mean of an `H×W` map down to `h×w`.
pub fn block_mean_ref(m: &[f64], (hh, ww): (usize, usize), (h, w): (usize, usize)) -> Vec<f64> {
    let (fy, fx) = (hh / h, ww / w);
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for dy in 0..fy {
                for dx in 0..fx {
                    s += m[(y * fy + dy) * ww + x * fx + dx];
                }
            }
            out[y * w + x] = s / (fy * fx) as f64;
        }
    }
    out
}

// ---- metrics ----

pub fn iou_ref(pred: &[bool], gt: &[bool]) -> (u64, u64) {
    let mut i = 0;
    let mut u = 0;
    for k in 0..pred.len() {
        if pred[k] && gt[k] {
            i += 1;
        }
        if pred[k] || gt[k] {
            u += 1;
        }
    }
    (i, u)
}

pub fn prec_ref(ious: &[f64], t: f64) -> f64 {
    let mut hits = 0;
    for &v in ious {
        if v > t {
            hits += 1;
        }
    }
    hits as f64 / ious.len() as f64
}

// ---- synthetic scenes ----

/// Integer-arithmetic rasterization: all coordinates doubled so pixel
/// centers `2p + 1` and object centers `2·x0 + s` stay integral.
pub fn rasterize_ref(o: &SceneObject, (h, w): (usize, usize)) -> Vec<bool> {
    let (x0, y0, s) = (o.origin.0 as i64, o.origin.1 as i64, o.size as i64);
    let (cx2, cy2) = (2 * x0 + s, 2 * y0 + s);
    let mut m = vec![false; h * w];
    for py in 0..h as i64 {
        for px in 0..w as i64 {
            let (x2, y2) = (2 * px + 1, 2 * py + 1);
            if x2 < 2 * x0 || x2 > 2 * (x0 + s) || y2 < 2 * y0 || y2 > 2 * (y0 + s) {
                continue;
            }
            let inside = match o.shape {
                ShapeKind::Square => true,
                ShapeKind::Circle => (x2 - cx2).pow(2) + (y2 - cy2).pow(2) <= s * s,
                ShapeKind::Triangle => 2 * (x2 - cx2).abs() <= y2 - 2 * y0,
            };
            m[(py as usize) * w + px as usize] = inside;
        }
    }
    m
}

/// Every object satisfying `expr`, decided by brute force over object pairs.
pub fn resolve_ref(expr: &Expression, scene: &SceneSpec) -> Vec<usize> {
    let (h, w) = (scene.canvas.0 as f64, scene.canvas.1 as f64);
    let objs = &scene.objects;
    let center = |o: &SceneObject| {
        (
            o.origin.0 as f64 + o.size as f64 / 2.0,
            o.origin.1 as f64 + o.size as f64 / 2.0,
        )
    };
    let mut hits = Vec::new();
    for (i, o) in objs.iter().enumerate() {
        let ok = match *expr {
            Expression::Attribute { color, shape } => o.color == color && o.shape == shape,
            Expression::Location { shape, region } => {
                let (x, y) = center(o);
                o.shape == shape
                    && match region {
                        Region::Left => 3.0 * x < w,
                        Region::Right => 3.0 * x > 2.0 * w,
                        Region::Top => 3.0 * y < h,
                        Region::Bottom => 3.0 * y > 2.0 * h,
                    }
            }
            Expression::Relation {
                target,
                relation,
                anchor,
            } => {
                let mut found = false;
                for (j, b) in objs.iter().enumerate() {
                    if j == i || (b.color, b.shape) != anchor {
                        continue;
                    }
                    let ((ax, ay), (bx, by)) = (center(o), center(b));
                    let m = h / 16.0;
                    found |= match relation {
                        Relation::LeftOf => ax + m < bx,
                        Relation::RightOf => ax > bx + m,
                        Relation::Above => ay + m < by,
                        Relation::Below => ay > by + m,
                    };
                }
                (o.color, o.shape) == target && found
            }
            Expression::Superlative { extreme, shape } => {
                o.shape == shape
                    && objs
                        .iter()
                        .filter(|b| b.shape == shape)
                        .all(|b| match extreme {
                            Extreme::Largest => b.size <= o.size,
                            Extreme::Smallest => b.size >= o.size,
                        })
            }
        };
        if ok {
            hits.push(i);
        }
    }
    hits
}

/// Expected RGB value of pixel `(px, py)`: the color of the covering object
/// or the background.
pub fn pixel_ref(scene: &SceneSpec, px: usize, py: usize) -> [u8; 3] {
    for o in &scene.objects {
        if rasterize_ref(o, scene.canvas)[py * scene.canvas.1 + px] {
            return o.color.rgb();
        }
    }
    [BACKGROUND; 3]
}

pub fn color_of_word(word: &str) -> Option<Color> {
    Color::ALL.into_iter().find(|c| c.word() == word)
}

// ---- randomized comparison drivers (criterion 2) ----

pub struct Trial {
    pub instances: usize,
    pub max_err: f64,
}

pub fn conv2d_trials(n: usize, seed: u64) -> Trial {
    let mut r = rng(seed);
    let mut max_err: f64 = 0.0;
    for _ in 0..n {
        let (b, cin, cout) = (r.gen_range(1..=2), r.gen_range(1..=4), r.gen_range(1..=4));
        let (h, w) = (r.gen_range(3..=9), r.gen_range(3..=9));
        let (kh, kw) = (r.gen_range(1..=3.min(h)), r.gen_range(1..=3.min(w)));
        let stride = r.gen_range(1..=2);
        let pad = r.gen_range(0..=2);
        let x = random_tensor(&mut r, &[b, cin, h, w]);
        let k = random_tensor(&mut r, &[cout, cin, kh, kw]);
        let mut tape = Tape::new();
        let (xv, kv) = (tape.constant(x.clone()), tape.constant(k.clone()));
        let y = tape.conv2d(xv, kv, stride, pad).unwrap();
        let e = max_diff(tape.value(y).data(), conv2d_ref(&x, &k, stride, pad).data());
        max_err = max_err.max(e);
    }
    Trial {
        instances: n,
        max_err,
    }
}

pub fn conv_transpose2d_trials(n: usize, seed: u64) -> Trial {
    let mut r = rng(seed);
    let mut max_err: f64 = 0.0;
    let mut done = 0;
    while done < n {
        let (b, cin, cout) = (r.gen_range(1..=2), r.gen_range(1..=4), r.gen_range(1..=4));
        let (h, w) = (r.gen_range(1..=6), r.gen_range(1..=6));
        let stride = r.gen_range(1..=2);
        let (kh, kw) = (r.gen_range(1..=5), r.gen_range(1..=5));
        let pad = r.gen_range(0..=(kh.min(kw) - 1) / 2);
        let out_pad = r.gen_range(0..stride);
        if (h - 1) * stride + kh + out_pad <= 2 * pad || (w - 1) * stride + kw + out_pad <= 2 * pad
        {
            continue;
        }
        let x = random_tensor(&mut r, &[b, cin, h, w]);
        let k = random_tensor(&mut r, &[cin, cout, kh, kw]);
        let mut tape = Tape::new();
        let (xv, kv) = (tape.constant(x.clone()), tape.constant(k.clone()));
        let y = tape.conv_transpose2d(xv, kv, stride, pad, out_pad).unwrap();
        let want = conv_transpose2d_ref(&x, &k, stride, pad, out_pad);
        assert_eq!(tape.value(y).shape(), want.shape());
        max_err = max_err.max(max_diff(tape.value(y).data(), want.data()));
        done += 1;
    }
    Trial {
        instances: n,
        max_err,
    }
}

pub fn batchnorm_trials(n: usize, seed: u64) -> Trial {
    let mut r = rng(seed);
    let mut max_err: f64 = 0.0;
    for i in 0..n {
        let (b, c, h, w) = (
            r.gen_range(1..=3),
            r.gen_range(1..=4),
            r.gen_range(1..=4),
            r.gen_range(2..=4),
        );
        let x = random_tensor(&mut r, &[b, c, h, w]);
        let gamma: Vec<f64> = (0..c).map(|_| r.gen_range(-2.0..2.0)).collect();
        let beta: Vec<f64> = (0..c).map(|_| r.gen_range(-1.0..1.0)).collect();
        let mut state = BatchNormState::new(c);
        state.running_mean = (0..c).map(|_| r.gen_range(-1.0..1.0)).collect();
        state.running_var = (0..c).map(|_| r.gen_range(0.1..2.0)).collect();
        let training = i % 2 == 0;
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let gv = tape.constant(Tensor::new([c], gamma.clone()).unwrap());
        let bv = tape.constant(Tensor::new([c], beta.clone()).unwrap());
        let (y, _) = tape.batchnorm2d(xv, gv, bv, &state, training).unwrap();
        let want = batchnorm_ref(&x, &gamma, &beta, &state, training);
        max_err = max_err.max(max_diff(tape.value(y).data(), want.data()));
    }
    Trial {
        instances: n,
        max_err,
    }
}

pub fn bce_trials(n: usize, seed: u64) -> Trial {
    let mut r = rng(seed);
    let mut max_err: f64 = 0.0;
    for _ in 0..n {
        let len = r.gen_range(1..=64);
        // include exact 0 and 1 to exercise the clamp
        let p: Vec<f64> = (0..len)
            .map(|_| match r.gen_range(0..10) {
                0 => 0.0,
                1 => 1.0,
                _ => r.gen_range(0.0..1.0),
            })
            .collect();
        let t: Vec<f64> = (0..len).map(|_| r.gen_range(0.0..1.0f64).round()).collect();
        let mut ig: Vec<f64> = (0..len)
            .map(|_| (r.gen_range(0..4) == 0) as u8 as f64)
            .collect();
        ig[r.gen_range(0..len)] = 0.0;
        let use_ignore = r.gen_bool(0.5);
        let mut tape = Tape::new();
        let pv = tape.constant(Tensor::new([len], p.clone()).unwrap());
        let ig_t = Tensor::new([len], ig.clone()).unwrap();
        let l = tape
            .bce(
                pv,
                &Tensor::new([len], t.clone()).unwrap(),
                use_ignore.then_some(&ig_t),
            )
            .unwrap();
        let want = bce_ref(&p, &t, use_ignore.then_some(&ig[..]));
        max_err = max_err.max((tape.value(l).item() - want).abs());
    }
    Trial {
        instances: n,
        max_err,
    }
}

pub fn downscale_trials(n: usize, seed: u64) -> Trial {
    let mut r = rng(seed);
    let mut max_err: f64 = 0.0;
    for _ in 0..n {
        let (h, w) = (r.gen_range(1..=4), r.gen_range(1..=4));
        let (fy, fx) = ([1, 2, 4][r.gen_range(0..3)], [1, 2, 4][r.gen_range(0..3)]);
        let b = r.gen_range(1..=2);
        let (hh, ww) = (h * fy, w * fx);
        let m: Vec<f64> = (0..b * hh * ww).map(|_| r.gen_range(0..2) as f64).collect();
        let got = downscale_mask(&Tensor::new([b, 1, hh, ww], m.clone()).unwrap(), (h, w)).unwrap();
        assert_eq!(got.shape(), &[b, 1, h, w]);
        for s in 0..b {
            let want = block_mean_ref(&m[s * hh * ww..(s + 1) * hh * ww], (hh, ww), (h, w));
            let e = max_diff(&got.data()[s * h * w..(s + 1) * h * w], &want);
            max_err = max_err.max(e);
        }
    }
    Trial {
        instances: n,
        max_err,
    }
}

/// Counting metrics; `max_err` is the largest absolute difference, which
/// must be exactly zero.
pub fn metric_trials(n: usize, seed: u64) -> Trial {
    let mut r = rng(seed);
    let mut max_err: f64 = 0.0;
    for _ in 0..n {
        let k = r.gen_range(1..=6);
        let dens = r.gen_range(0.0..1.0);
        let masks: Vec<(Vec<bool>, Vec<bool>)> = (0..k)
            .map(|_| {
                let p = (0..256).map(|_| r.gen_bool(dens)).collect();
                let g = (0..256).map(|_| r.gen_bool(dens)).collect();
                (p, g)
            })
            .collect();
        let (mut ti, mut tu) = (0u64, 0u64);
        let mut ious = Vec::new();
        for (p, g) in &masks {
            let (i, u) = iou_ref(p, g);
            ti += i;
            tu += u;
            let want = if u == 0 { 1.0 } else { i as f64 / u as f64 };
            ious.push(want);
            max_err = max_err.max((per_example_iou(p, g, None).unwrap() - want).abs());
        }
        let preds: Vec<Vec<bool>> = masks.iter().map(|m| m.0.clone()).collect();
        let gts: Vec<Vec<bool>> = masks.iter().map(|m| m.1.clone()).collect();
        let pooled = if tu == 0 { 1.0 } else { ti as f64 / tu as f64 };
        max_err = max_err.max((overall_iou(&preds, &gts, None).unwrap() - pooled).abs());
        for t in [0.0, 0.25, 0.5, 0.6, 0.7, 0.8, 0.9, ious[0]] {
            max_err = max_err.max((precision_at(&ious, t).unwrap() - prec_ref(&ious, t)).abs());
        }
    }
    Trial {
        instances: n,
        max_err,
    }
}

// ---- random architectures (criterion 3) ----

pub fn random_net_config(r: &mut ChaCha8Rng) -> lingseg::NetConfig {
    use lingseg::segnet::Modulation;
    use lingseg::text_kernels::KernelMode;
    let depth = r.gen_range(1..=3);
    let backbone_levels = r.gen_range(1..=2);
    let factor = 1 << (depth + backbone_levels);
    lingseg::NetConfig {
        depth,
        channels: r.gen_range(2..=6),
        image_size: [factor * r.gen_range(1..=2), factor * r.gen_range(1..=3)],
        backbone_levels,
        backbone_channels: r.gen_range(2..=6),
        embed_dim: r.gen_range(2..=6),
        hidden: depth * r.gen_range(1..=4),
        max_len: 8,
        text_kernel_spatial: [1, 3][r.gen_range(0..2)],
        text_kernel_mode: [KernelMode::Full, KernelMode::Depthwise][r.gen_range(0..2)],
        modulation: [Modulation::Bidirectional, Modulation::ExpandingOnly][r.gen_range(0..2)],
        dropout_p: r.gen_range(0.0..0.5),
        freeze_backbone: false,
        freeze_embeddings: false,
    }
}

/// Forward pass of a random config on random inputs; returns
/// (output shape, image shape, all probabilities in (0, 1), aux count, depth).
pub fn shape_trial(r: &mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>, bool, usize, usize) {
    let cfg = random_net_config(r);
    let net = lingseg::SegNet::new(cfg.clone()).unwrap();
    let vocab = 12;
    let params = net.init_params(vocab, r).unwrap();
    let n = r.gen_range(1..=2);
    let [h, w] = cfg.image_size;
    let images = random_tensor(r, &[n, 3, h, w]).map(|v| v.abs());
    let ids: Vec<Vec<usize>> = (0..n)
        .map(|_| {
            (0..r.gen_range(1..=6))
                .map(|_| r.gen_range(2..vocab))
                .collect()
        })
        .collect();
    let mut tape = Tape::new();
    let b = params.bind(&mut tape);
    // batch norm in training mode needs two values per channel at the deepest level
    let deepest =
        (h >> (cfg.depth + cfg.backbone_levels)) * (w >> (cfg.depth + cfg.backbone_levels));
    let training = r.gen_bool(0.5) && n * deepest > 1;
    let out = net
        .forward(&mut tape, &b, &params, &images, &ids, training, r)
        .unwrap();
    let p = tape.value(out.prob);
    let open = p.data().iter().all(|&v| v > 0.0 && v < 1.0);
    (
        p.shape().to_vec(),
        vec![n, 1, h, w],
        open,
        out.aux.len(),
        cfg.depth,
    )
}

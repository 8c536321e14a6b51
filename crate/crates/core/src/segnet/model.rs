use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{NetConfig, CONV_KERNEL, CONV_PAD, CONV_STRIDE};
use super::location::build_location_features;
use crate::autodiff::{BatchNormState, BatchStats, Tape, Var};
use crate::error::{Error, Result, ResultExt};
use crate::params::{Bindings, ModelParams};
use crate::tensor::Tensor;
use crate::text::{encode_batch, init_lstm, LstmShape};
use crate::text_kernels::{build_all_kernels, init_text_affine, Branch};

/// Probability maps of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// Final `N×1×H×W` probabilities.
    pub prob: Var,
    /// One `N×1×h×w` probability map per expanding module, from `Up_1`
    /// (highest resolution) to `Up_m`.
    pub aux: Vec<Var>,
    /// Training-mode batch statistics for every batch-norm layer.
    pub batch_stats: Vec<(String, BatchStats)>,
}

#[derive(Clone, Debug)]
pub struct SegNet {
    config: NetConfig,
    location: Tensor,
}

fn conv_bound(fan_in: usize) -> f64 {
    1.0 / (fan_in as f64).sqrt()
}

struct Pass<'a> {
    tape: &'a mut Tape,
    b: &'a Bindings,
    params: &'a ModelParams,
    training: bool,
    stats: Vec<(String, BatchStats)>,
}

impl Pass<'_> {
    fn bn_relu(&mut self, x: Var, name: &str) -> Result<Var> {
        let state = self.params.batchnorm(name)?;
        let gamma = self.b.get(&format!("{name}.gamma"))?;
        let beta = self.b.get(&format!("{name}.beta"))?;
        let (y, stats) = self
            .tape
            .batchnorm2d(x, gamma, beta, state, self.training)?;
        if let Some(s) = stats {
            self.stats.push((name.to_string(), s));
        }
        Ok(self.tape.relu(y))
    }

    fn down_conv(&mut self, x: Var, name: &str) -> Result<Var> {
        let w = self.b.get(name)?;
        self.tape.conv2d(x, w, CONV_STRIDE, CONV_PAD)
    }

    fn up_conv(&mut self, x: Var, name: &str) -> Result<Var> {
        let w = self.b.get(name)?;
        self.tape.conv_transpose2d(x, w, CONV_STRIDE, CONV_PAD, 1)
    }

    /// Text-kernel modulation: stride-1 same-padded per-sample convolution.
    fn modulate(&mut self, x: Var, kernel: Var) -> Result<Var> {
        let pad = self.tape.shape(kernel)[3] / 2;
        self.tape.conv2d_per_sample(x, kernel, 1, pad)
    }
}

impl SegNet {
    pub fn new(config: NetConfig) -> Result<Self> {
        config.validate()?;
        let (gh, gw) = config.grid();
        Ok(SegNet {
            location: build_location_features(gh, gw),
            config,
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    /// Fresh parameters: uniform `±1/√fan_in` conv weights, unit batch-norm
    /// scales, zero shifts and biases.
    pub fn init_params<R: Rng + ?Sized>(
        &self,
        vocab_size: usize,
        rng: &mut R,
    ) -> Result<ModelParams> {
        let c = &self.config;
        let k2 = CONV_KERNEL * CONV_KERNEL;
        let ch = c.channels;
        let mut p = ModelParams::new();
        let add_bn = |p: &mut ModelParams, name: String, channels: usize| {
            p.insert(format!("{name}.gamma"), Tensor::ones([channels]));
            p.insert(format!("{name}.beta"), Tensor::zeros([channels]));
            p.insert_batchnorm(name, BatchNormState::new(channels));
        };

        let mut cin = 3;
        for l in 0..c.backbone_levels {
            let cout = c.backbone_channels;
            let w = Tensor::uniform(
                [cout, cin, CONV_KERNEL, CONV_KERNEL],
                conv_bound(cin * k2),
                rng,
            );
            p.insert(format!("backbone.{l}.conv"), w);
            add_bn(&mut p, format!("backbone.{l}.bn"), cout);
            cin = cout;
        }

        init_lstm(
            &mut p,
            LstmShape {
                vocab_size,
                embed_dim: c.embed_dim,
                hidden: c.hidden,
            },
            rng,
        );
        for (i, spec) in c.down_specs()?.iter().enumerate() {
            init_text_affine(&mut p, Branch::Down, i, c.part_dim(), spec, rng);
        }
        for (j, spec) in c.up_specs()?.iter().enumerate() {
            init_text_affine(&mut p, Branch::Up, j, c.part_dim(), spec, rng);
        }

        let mult = if c.bidirectional() { 2 } else { 1 };
        for i in 0..c.depth {
            let cin = mult * if i == 0 { c.input_channels() } else { ch };
            let w = Tensor::uniform(
                [ch, cin, CONV_KERNEL, CONV_KERNEL],
                conv_bound(cin * k2),
                rng,
            );
            p.insert(format!("down.{i}.conv"), w);
            add_bn(&mut p, format!("down.{i}.bn"), ch);
        }
        for j in 0..c.depth {
            let cin = if j == c.depth - 1 { ch } else { 2 * ch };
            let w = Tensor::uniform(
                [cin, ch, CONV_KERNEL, CONV_KERNEL],
                conv_bound(cin * k2),
                rng,
            );
            p.insert(format!("up.{j}.deconv"), w);
            add_bn(&mut p, format!("up.{j}.bn"), ch);
            let aux = Tensor::uniform([ch, 1, CONV_KERNEL, CONV_KERNEL], conv_bound(ch * k2), rng);
            p.insert(format!("aux.{j}.deconv"), aux);
            p.insert(format!("aux.{j}.bias"), Tensor::zeros([1]));
        }
        for k in 0..c.backbone_levels {
            let last = k + 1 == c.backbone_levels;
            let cout = if last { 1 } else { ch };
            let w = Tensor::uniform(
                [ch, cout, CONV_KERNEL, CONV_KERNEL],
                conv_bound(ch * k2),
                rng,
            );
            p.insert(format!("dstack.{k}.deconv"), w);
            if last {
                p.insert(format!("dstack.{k}.bias"), Tensor::zeros([1]));
            } else {
                add_bn(&mut p, format!("dstack.{k}.bn"), ch);
            }
        }
        if c.freeze_backbone {
            p.set_frozen("backbone.", true);
        }
        if c.freeze_embeddings {
            p.set_frozen(crate::text::lstm::EMBEDDING, true);
        }
        Ok(p)
    }

    fn check_images(&self, images: &Tensor) -> Result<usize> {
        let s = images.shape();
        let [h, w] = self.config.image_size;
        if s.len() != 4 || s[1] != 3 || s[2] != h || s[3] != w {
            return Err(Error::Dimension(format!(
                "expected N×3×{h}×{w} images, got {s:?}"
            )));
        }
        Ok(s[0])
    }

    /// Backbone features with the location channels appended (`I_0`).
    pub fn backbone_encode(
        &self,
        tape: &mut Tape,
        b: &Bindings,
        params: &ModelParams,
        images: Var,
        training: bool,
    ) -> Result<(Var, Vec<(String, BatchStats)>)> {
        let mut pass = Pass {
            tape,
            b,
            params,
            training,
            stats: Vec::new(),
        };
        let n = self.check_images(pass.tape.value(images))?;
        let x = self.backbone(&mut pass, images, n)?;
        Ok((x, pass.stats))
    }

    fn backbone(&self, pass: &mut Pass<'_>, images: Var, n: usize) -> Result<Var> {
        let mut x = images;
        for l in 0..self.config.backbone_levels {
            let y = pass.down_conv(x, &format!("backbone.{l}.conv"))?;
            x = pass.bn_relu(y, &format!("backbone.{l}.bn"))?;
        }
        let (gh, gw) = self.config.grid();
        let mut loc = Vec::with_capacity(n * self.location.numel());
        for _ in 0..n {
            loc.extend_from_slice(self.location.data());
        }
        let loc = pass.tape.constant(Tensor::new([n, 8, gh, gw], loc)?);
        pass.tape.concat_channels(&[x, loc])
    }

    /// `Down_i = F_i(Down_{i-1} ⊕ G_id)`, or `F_i(Down_{i-1})` without a kernel.
    fn contract_step(
        &self,
        pass: &mut Pass<'_>,
        down_prev: Var,
        kernel: Option<Var>,
        i: usize,
    ) -> Result<Var> {
        let input = match kernel {
            Some(k) => {
                let g = pass.modulate(down_prev, k)?;
                pass.tape.concat_channels(&[down_prev, g])?
            }
            None => down_prev,
        };
        let y = pass.down_conv(input, &format!("down.{i}.conv"))?;
        pass.bn_relu(y, &format!("down.{i}.bn"))
    }

    /// `Up_j = H_j(G_ju ⊕ Up_{j+1})`, with only `G_mu` at the deepest level.
    fn expand_step(
        &self,
        pass: &mut Pass<'_>,
        down_j: Var,
        up_prev: Option<Var>,
        kernel: Var,
        j: usize,
    ) -> Result<Var> {
        let g = pass.modulate(down_j, kernel)?;
        let input = match up_prev {
            Some(u) => pass.tape.concat_channels(&[g, u])?,
            None => g,
        };
        let y = pass.up_conv(input, &format!("up.{j}.deconv"))?;
        pass.bn_relu(y, &format!("up.{j}.bn"))
    }

    fn head(&self, pass: &mut Pass<'_>, x: Var, prefix: &str) -> Result<Var> {
        let y = pass.up_conv(x, &format!("{prefix}.deconv"))?;
        let bias = pass.b.get(&format!("{prefix}.bias"))?;
        let y = pass.tape.channel_bias(y, bias)?;
        Ok(pass.tape.sigmoid(y))
    }

    /// Full forward pass for a batch of images (`N×3×H×W`) and token sequences.
    #[allow(clippy::too_many_arguments)]
    pub fn forward<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        b: &Bindings,
        params: &ModelParams,
        images: &Tensor,
        ids: &[Vec<usize>],
        training: bool,
        rng: &mut R,
    ) -> Result<ForwardOutput> {
        let c = &self.config;
        let n = self.check_images(images)?;
        if ids.len() != n {
            return Err(Error::Dimension(format!(
                "{n} images but {} token sequences",
                ids.len()
            )));
        }
        let mut pass = Pass {
            tape,
            b,
            params,
            training,
            stats: Vec::new(),
        };
        let img = pass.tape.constant(images.clone());
        let i0 = self
            .backbone(&mut pass, img, n)
            .context_with(|| "backbone".into())?;

        let r = encode_batch(pass.tape, b, ids).context_with(|| "text encoder".into())?;
        let kernels = build_all_kernels(
            pass.tape,
            b,
            r,
            &c.down_specs()?,
            &c.up_specs()?,
            c.dropout_p,
            training,
            rng,
        )
        .context_with(|| "text kernels".into())?;

        let mut downs = vec![i0];
        for i in 0..c.depth {
            let k = kernels.down.get(i).copied();
            let d = self
                .contract_step(&mut pass, downs[i], k, i)
                .context_with(|| format!("contracting level {}", i + 1))?;
            downs.push(d);
        }

        let mut ups = vec![None; c.depth];
        let mut up_prev = None;
        for j in (0..c.depth).rev() {
            let u = self
                .expand_step(&mut pass, downs[j + 1], up_prev, kernels.up[j], j)
                .context_with(|| format!("expanding level {}", j + 1))?;
            ups[j] = Some(u);
            up_prev = Some(u);
        }
        let ups: Vec<Var> = ups.into_iter().map(|u| u.expect("every level")).collect();

        let aux = ups
            .iter()
            .enumerate()
            .map(|(j, &u)| self.head(&mut pass, u, &format!("aux.{j}")))
            .collect::<Result<Vec<_>>>()
            .context_with(|| "auxiliary heads".into())?;

        let mut x = ups[0];
        for k in 0..c.backbone_levels {
            if k + 1 == c.backbone_levels {
                x = self.head(&mut pass, x, &format!("dstack.{k}"))?;
            } else {
                let y = pass.up_conv(x, &format!("dstack.{k}.deconv"))?;
                x = pass.bn_relu(y, &format!("dstack.{k}.bn"))?;
            }
        }
        Ok(ForwardOutput {
            prob: x,
            aux,
            batch_stats: pass.stats,
        })
    }

    /// Inference-mode probabilities (`N×1×H×W`) without recording gradients.
    pub fn predict_proba(
        &self,
        params: &ModelParams,
        images: &Tensor,
        ids: &[Vec<usize>],
    ) -> Result<Tensor> {
        let mut tape = Tape::new();
        let b = params.bind_constants(&mut tape);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = self.forward(&mut tape, &b, params, images, ids, false, &mut rng)?;
        Ok(tape.value(out.prob).clone())
    }
}

/// Binary mask `P ≥ threshold`.
pub fn predict_mask(prob: &Tensor, threshold: f64) -> Result<Tensor> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Parameter(format!(
            "threshold {threshold} not in (0, 1)"
        )));
    }
    Ok(prob.map(|p| if p >= threshold { 1.0 } else { 0.0 }))
}

//! Language-generated convolution kernels.
//!
//! The sentence encoding `r` is split into `m` equal slices. Slice `i` feeds
//! two independent affine maps, one producing the contracting-path kernel and
//! one producing the expanding-path kernel of level `i`. Each kernel is the
//! affine output after dropout on the slice, projected to unit L2 norm and
//! reshaped to `Cout × Cin × s × s` (one kernel per sample).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{Bindings, ModelParams};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelMode {
    #[default]
    Full,
    /// One `s × s` filter per channel (`Cin == Cout`).
    Depthwise,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct KernelSpec {
    pub spatial: usize,
    pub cin: usize,
    pub cout: usize,
    pub mode: KernelMode,
}

impl KernelSpec {
    pub fn new(spatial: usize, cin: usize, cout: usize, mode: KernelMode) -> Result<Self> {
        if spatial != 1 && spatial != 3 {
            return Err(Error::Config(format!(
                "text kernel width must be 1 or 3, got {spatial}"
            )));
        }
        if mode == KernelMode::Depthwise && cin != cout {
            return Err(Error::Config(format!(
                "depthwise text kernel needs cin == cout, got {cin} and {cout}"
            )));
        }
        Ok(KernelSpec {
            spatial,
            cin,
            cout,
            mode,
        })
    }

    /// Length of the affine output that parameterizes one kernel.
    pub fn param_count(&self) -> usize {
        let s2 = self.spatial * self.spatial;
        match self.mode {
            KernelMode::Full => self.cout * self.cin * s2,
            KernelMode::Depthwise => self.cin * s2,
        }
    }

    /// Padding that keeps the spatial extent under a stride-1 convolution.
    pub fn same_pad(&self) -> usize {
        self.spatial / 2
    }
}

/// Kernels for one batch; `down` is empty when the contracting path is not
/// modulated.
#[derive(Clone, Debug)]
pub struct TextKernels {
    pub down: Vec<Var>,
    pub up: Vec<Var>,
    pub parts: Vec<Var>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    Down,
    Up,
}

impl Branch {
    fn name(self) -> &'static str {
        match self {
            Branch::Down => "down",
            Branch::Up => "up",
        }
    }
}

pub fn weight_name(branch: Branch, level: usize) -> String {
    format!("text.{}.{level}.weight", branch.name())
}

pub fn bias_name(branch: Branch, level: usize) -> String {
    format!("text.{}.{level}.bias", branch.name())
}

/// Registers the affine map for one kernel; weights and bias uniform in
/// `±1/√part_dim`.
pub fn init_text_affine<R: Rng + ?Sized>(
    params: &mut ModelParams,
    branch: Branch,
    level: usize,
    part_dim: usize,
    spec: &KernelSpec,
    rng: &mut R,
) {
    let bound = 1.0 / (part_dim as f64).sqrt();
    let p = spec.param_count();
    params.insert(
        weight_name(branch, level),
        Tensor::uniform([p, part_dim], bound, rng),
    );
    params.insert(bias_name(branch, level), Tensor::uniform([p], bound, rng));
}

/// Contiguous equal slices of `r` (`N × Hd`) along the feature axis.
pub fn split_text(tape: &mut Tape, r: Var, m: usize) -> Result<Vec<Var>> {
    let shape = tape.shape(r).to_vec();
    let axis = shape.len() - 1;
    let hd = shape[axis];
    if m == 0 || hd % m != 0 {
        return Err(Error::Config(format!(
            "hidden size {hd} is not divisible into {m} parts"
        )));
    }
    let part = hd / m;
    (0..m)
        .map(|i| tape.slice(r, axis, i * part, part))
        .collect()
}

/// Kernel batch `N × Cout × Cin × s × s` from a text slice `t` (`N × d`).
#[allow(clippy::too_many_arguments)]
pub fn make_text_kernel<R: Rng + ?Sized>(
    tape: &mut Tape,
    t: Var,
    w: Var,
    b: Var,
    spec: &KernelSpec,
    p_drop: f64,
    training: bool,
    rng: &mut R,
) -> Result<Var> {
    let n = tape.shape(t)[0];
    if tape.shape(w)[0] != spec.param_count() {
        return Err(Error::Dimension(format!(
            "text affine produces {} values, kernel {spec:?} needs {}",
            tape.shape(w)[0],
            spec.param_count()
        )));
    }
    let t = tape.dropout(t, p_drop, training, rng)?;
    let raw = tape.affine(t, w, Some(b))?;
    let unit = tape.l2_normalize_rows(raw);
    let full = match spec.mode {
        KernelMode::Full => unit,
        KernelMode::Depthwise => {
            let expand = tape.constant(depthwise_expansion(spec));
            tape.affine(unit, expand, None)?
        }
    };
    let s = spec.spatial;
    tape.reshape(full, [n, spec.cout, spec.cin, s, s])
}

/// 0/1 matrix mapping depthwise filters (`C·s²`) onto the block-diagonal
/// full kernel layout (`C·C·s²`).
fn depthwise_expansion(spec: &KernelSpec) -> Tensor {
    let (c, s2) = (spec.cin, spec.spatial * spec.spatial);
    let mut e = Tensor::zeros([c * c * s2, c * s2]);
    for ch in 0..c {
        for k in 0..s2 {
            e.set(&[(ch * c + ch) * s2 + k, ch * s2 + k], 1.0);
        }
    }
    e
}

/// Builds the per-level kernels from `r` (`N × Hd`). The same slice `t_i`
/// feeds the level-`i` contracting and expanding affines; `down_specs` empty
/// means the contracting path is left unmodulated.
#[allow(clippy::too_many_arguments)]
pub fn build_all_kernels<R: Rng + ?Sized>(
    tape: &mut Tape,
    b: &Bindings,
    r: Var,
    down_specs: &[KernelSpec],
    up_specs: &[KernelSpec],
    p_drop: f64,
    training: bool,
    rng: &mut R,
) -> Result<TextKernels> {
    let m = up_specs.len();
    if !down_specs.is_empty() && down_specs.len() != m {
        return Err(Error::Config(format!(
            "{} contracting kernel specs for depth {m}",
            down_specs.len()
        )));
    }
    let parts = split_text(tape, r, m)?;
    let mut down = Vec::with_capacity(down_specs.len());
    for (i, spec) in down_specs.iter().enumerate() {
        let (w, bias) = (
            b.get(&weight_name(Branch::Down, i))?,
            b.get(&bias_name(Branch::Down, i))?,
        );
        down.push(make_text_kernel(
            tape, parts[i], w, bias, spec, p_drop, training, rng,
        )?);
    }
    let mut up = Vec::with_capacity(m);
    for (j, spec) in up_specs.iter().enumerate() {
        let (w, bias) = (
            b.get(&weight_name(Branch::Up, j))?,
            b.get(&bias_name(Branch::Up, j))?,
        );
        up.push(make_text_kernel(
            tape, parts[j], w, bias, spec, p_drop, training, rng,
        )?);
    }
    Ok(TextKernels { down, up, parts })
}

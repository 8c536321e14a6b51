use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text_kernels::{KernelMode, KernelSpec};

/// Every F, H and D layer uses 5×5 filters with stride 2 and padding 2.
pub const CONV_KERNEL: usize = 5;
pub const CONV_STRIDE: usize = 2;
pub const CONV_PAD: usize = 2;

/// Which U-Net branches the text kernels modulate.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modulation {
    #[default]
    Bidirectional,
    /// Text kernels act only on the skip connections of the expanding path.
    ExpandingOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetConfig {
    /// Number of contracting (and expanding) modules.
    pub depth: usize,
    /// Output channels of every F, H and D module.
    pub channels: usize,
    /// Input image `[height, width]`.
    pub image_size: [usize; 2],
    /// Stride-2 conv blocks in the visual backbone.
    pub backbone_levels: usize,
    pub backbone_channels: usize,
    pub embed_dim: usize,
    /// LSTM hidden size; split into `depth` equal parts.
    pub hidden: usize,
    pub max_len: usize,
    /// Width of the generated kernels (1 or 3).
    pub text_kernel_spatial: usize,
    pub text_kernel_mode: KernelMode,
    pub modulation: Modulation,
    /// Dropout on each text slice before its kernel affine.
    pub dropout_p: f64,
    pub freeze_backbone: bool,
    pub freeze_embeddings: bool,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            depth: 3,
            channels: 32,
            image_size: [64, 64],
            backbone_levels: 2,
            backbone_channels: 24,
            embed_dim: 32,
            hidden: 48,
            max_len: 20,
            text_kernel_spatial: 3,
            text_kernel_mode: KernelMode::Full,
            modulation: Modulation::Bidirectional,
            dropout_p: 0.2,
            freeze_backbone: false,
            freeze_embeddings: false,
        }
    }
}

impl NetConfig {
    /// Small configuration used for gradient checks.
    pub fn tiny() -> Self {
        NetConfig {
            depth: 2,
            channels: 8,
            image_size: [32, 32],
            backbone_levels: 2,
            backbone_channels: 8,
            embed_dim: 6,
            hidden: 8,
            ..NetConfig::default()
        }
    }

    /// Feature-grid size after the backbone.
    pub fn grid(&self) -> (usize, usize) {
        let f = 1 << self.backbone_levels;
        (self.image_size[0] / f, self.image_size[1] / f)
    }

    /// Channels of the backbone output plus the 8 location channels.
    pub fn input_channels(&self) -> usize {
        self.backbone_channels + 8
    }

    pub fn part_dim(&self) -> usize {
        self.hidden / self.depth
    }

    pub fn bidirectional(&self) -> bool {
        self.modulation == Modulation::Bidirectional
    }

    /// Kernel geometry of the text kernel that modulates `Down_level`
    /// (level 0 is the backbone output).
    pub fn kernel_spec(&self, level: usize) -> Result<KernelSpec> {
        let c = if level == 0 {
            self.input_channels()
        } else {
            self.channels
        };
        KernelSpec::new(self.text_kernel_spatial, c, c, self.text_kernel_mode)
    }

    pub fn down_specs(&self) -> Result<Vec<KernelSpec>> {
        if !self.bidirectional() {
            return Ok(Vec::new());
        }
        (0..self.depth).map(|i| self.kernel_spec(i)).collect()
    }

    pub fn up_specs(&self) -> Result<Vec<KernelSpec>> {
        (1..=self.depth).map(|j| self.kernel_spec(j)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.depth == 0 {
            return err("depth must be at least 1".into());
        }
        if self.backbone_levels == 0 {
            return err(
                "backbone_levels must be at least 1 (the upsampling stack needs a final layer)"
                    .into(),
            );
        }
        if self.channels == 0 || self.backbone_channels == 0 || self.embed_dim == 0 {
            return err("channel and embedding sizes must be positive".into());
        }
        if self.hidden == 0 || self.hidden % self.depth != 0 {
            return err(format!(
                "hidden size {} must be a positive multiple of depth {}",
                self.hidden, self.depth
            ));
        }
        let factor = 1usize << (self.depth + self.backbone_levels);
        let [h, w] = self.image_size;
        if h == 0 || w == 0 || h % factor != 0 || w % factor != 0 {
            return err(format!(
                "image size {h}x{w} must be divisible by 2^(depth + backbone_levels) = {factor}"
            ));
        }
        if self.max_len == 0 {
            return err("max_len must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return err(format!("dropout_p {} not in [0, 1)", self.dropout_p));
        }
        self.kernel_spec(0)?;
        self.kernel_spec(1)?;
        Ok(())
    }
}

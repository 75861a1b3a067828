use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// MobileNetV2 inverted-residual block: kernel `k`, expand ratio `t`,
/// output channels `c`, stride `s`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MbBlockCfg {
    pub kernel: usize,
    pub expand_ratio: usize,
    pub out_channels: usize,
    pub stride: usize,
}

pub const fn mb(
    kernel: usize,
    expand_ratio: usize,
    out_channels: usize,
    stride: usize,
) -> MbBlockCfg {
    MbBlockCfg {
        kernel,
        expand_ratio,
        out_channels,
        stride,
    }
}

impl MbBlockCfg {
    pub fn has_residual(&self, in_channels: usize) -> bool {
        self.stride == 1 && in_channels == self.out_channels
    }

    fn problems(&self, at: &str, out: &mut Vec<String>) {
        if self.stride != 1 && self.stride != 2 {
            out.push(format!("{at}: stride must be 1 or 2, got {}", self.stride));
        }
        if self.expand_ratio < 1 {
            out.push(format!("{at}: expand ratio must be >= 1"));
        }
        if self.kernel % 2 == 0 {
            out.push(format!("{at}: kernel must be odd, got {}", self.kernel));
        }
        if self.out_channels == 0 {
            out.push(format!("{at}: output channels must be positive"));
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    Tiny,
    Small,
    Base,
    /// Any non-published configuration (used for small test graphs).
    Custom,
}

impl Variant {
    pub const PUBLISHED: [Variant; 3] = [Variant::Tiny, Variant::Small, Variant::Base];

    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::Tiny => "tiny",
            Variant::Small => "small",
            Variant::Base => "base",
            Variant::Custom => "custom",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "tiny" | "t" => Ok(Variant::Tiny),
            "small" | "s" => Ok(Variant::Small),
            "base" | "b" => Ok(Variant::Base),
            other => Err(Error::Config(vec![format!(
                "unknown variant '{other}' (expected one of: tiny, small, base)"
            )])),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum HeadKind {
    /// Upsample-and-sum of the SIM outputs, then two 1x1 convs.
    #[default]
    Default,
    /// Same head, SIM without the sigmoid gating branch.
    Sum,
    /// Per-scale channel reduction, concatenation, fuse conv, classifier.
    Concat,
    /// Global average pool + linear layer on the extractor output.
    Classification,
}

impl HeadKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            HeadKind::Default => "default",
            HeadKind::Sum => "sum",
            HeadKind::Concat => "concat",
            HeadKind::Classification => "classification",
        }
    }

    pub fn is_segmentation(&self) -> bool {
        *self != HeadKind::Classification
    }
}

impl fmt::Display for HeadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for HeadKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "default" => Ok(HeadKind::Default),
            "sum" => Ok(HeadKind::Sum),
            "concat" => Ok(HeadKind::Concat),
            "classification" | "cls" => Ok(HeadKind::Classification),
            other => Err(Error::Config(vec![format!(
                "unknown head kind '{other}' (expected default, sum, concat or classification)"
            )])),
        }
    }
}

/// ADE20K class count.
pub const ADE20K_CLASSES: usize = 150;
/// ImageNet-1k class count.
pub const IMAGENET_CLASSES: usize = 1000;
/// Pooled-token stride used by the classification models.
pub const CLASSIFICATION_SASE_STRIDE: usize = 32;

/// Full architectural description of one network.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VariantConfig {
    pub variant: Variant,
    /// Output channels of the 3x3 stride-2 stem conv.
    pub stem_channels: usize,
    /// Blocks run at stem resolution before the first token stage.
    pub stem_blocks: Vec<MbBlockCfg>,
    /// Token stages; the output of each stage is one pyramid level.
    pub stages: Vec<Vec<MbBlockCfg>>,
    pub num_transformer_blocks: usize,
    pub num_heads: usize,
    pub key_dim: usize,
    pub value_dim: usize,
    pub ffn_expansion: usize,
    /// Channel width `M` of every SIM output.
    pub sim_width: usize,
    pub sase_stride: usize,
    /// Strides of the pyramid levels that receive injected semantics.
    pub injection_strides: Vec<usize>,
    pub head_kind: HeadKind,
    pub num_classes: usize,
}

fn published(
    variant: Variant,
    widths: [usize; 4],
    last_stage_extra: bool,
    heads: usize,
    sim_width: usize,
) -> VariantConfig {
    let [c1, c2, c3, c4] = widths;
    let mut s4 = vec![mb(5, 6, c4, 2), mb(5, 6, c4, 1)];
    if last_stage_extra {
        s4.push(mb(3, 6, c4, 1));
    }
    VariantConfig {
        variant,
        stem_channels: 16,
        stem_blocks: vec![mb(3, 1, 16, 1)],
        stages: vec![
            vec![mb(3, 4, c1, 2), mb(3, 3, c1, 1)],
            vec![mb(5, 3, c2, 2), mb(5, 3, c2, 1)],
            vec![mb(3, 3, c3, 2), mb(3, 3, c3, 1)],
            s4,
        ],
        num_transformer_blocks: 4,
        num_heads: heads,
        key_dim: 16,
        value_dim: 32,
        ffn_expansion: 2,
        sim_width,
        sase_stride: 64,
        injection_strides: vec![8, 16, 32],
        head_kind: HeadKind::Default,
        num_classes: ADE20K_CLASSES,
    }
}

impl VariantConfig {
    pub fn tiny() -> Self {
        published(Variant::Tiny, [16, 32, 64, 96], false, 4, 128)
    }

    pub fn small() -> Self {
        published(Variant::Small, [24, 48, 96, 128], true, 6, 192)
    }

    pub fn base() -> Self {
        published(Variant::Base, [32, 64, 128, 160], true, 8, 256)
    }

    pub fn published(variant: Variant) -> Result<Self> {
        match variant {
            Variant::Tiny => Ok(Self::tiny()),
            Variant::Small => Ok(Self::small()),
            Variant::Base => Ok(Self::base()),
            Variant::Custom => Err(Error::Config(vec![
                "custom variants have no published configuration".into(),
            ])),
        }
    }

    pub fn named(name: &str) -> Result<Self> {
        Self::published(name.parse()?)
    }

    /// Two-stage, single-block graph small enough for whole-model finite
    /// differences on a 4x4 image.
    pub fn micro() -> Self {
        VariantConfig {
            variant: Variant::Custom,
            stem_channels: 8,
            stem_blocks: vec![mb(3, 1, 8, 1)],
            stages: vec![vec![mb(3, 2, 8, 1)], vec![mb(3, 2, 12, 2)]],
            num_transformer_blocks: 1,
            num_heads: 2,
            key_dim: 4,
            value_dim: 8,
            ffn_expansion: 2,
            sim_width: 8,
            sase_stride: 4,
            injection_strides: vec![2, 4],
            head_kind: HeadKind::Default,
            num_classes: 3,
        }
    }

    pub fn with_head(mut self, head: HeadKind) -> Self {
        self.head_kind = head;
        self
    }

    pub fn with_sase_stride(mut self, stride: usize) -> Self {
        self.sase_stride = stride;
        self
    }

    pub fn with_num_classes(mut self, classes: usize) -> Self {
        self.num_classes = classes;
        self
    }

    /// ImageNet classification form: pooled tokens at stride 32, 1000 classes.
    pub fn classification(self) -> Self {
        self.with_head(HeadKind::Classification)
            .with_sase_stride(CLASSIFICATION_SASE_STRIDE)
            .with_num_classes(IMAGENET_CLASSES)
    }

    pub fn stage_channels(&self) -> Vec<usize> {
        self.stages
            .iter()
            .map(|s| s.last().map_or(0, |b| b.out_channels))
            .collect()
    }

    /// Cumulative stride of each pyramid level relative to the image.
    pub fn stage_strides(&self) -> Vec<usize> {
        let mut stride = 2 * self.stem_blocks.iter().map(|b| b.stride).product::<usize>();
        self.stages
            .iter()
            .map(|stage| {
                stride *= stage.iter().map(|b| b.stride).product::<usize>();
                stride
            })
            .collect()
    }

    /// Width of the pooled-and-concatenated token map.
    pub fn concat_width(&self) -> usize {
        self.stage_channels().iter().sum()
    }

    /// Stage indices that feed a SIM, in injection order.
    pub fn injection_stages(&self) -> Vec<usize> {
        let strides = self.stage_strides();
        self.injection_strides
            .iter()
            .filter_map(|s| strides.iter().position(|x| x == s))
            .collect()
    }

    /// Input height and width must be multiples of this.
    pub fn required_multiple(&self) -> usize {
        let coarsest = self.stage_strides().into_iter().max().unwrap_or(2);
        coarsest.max(self.sase_stride)
    }

    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        let m = self.required_multiple();
        for (axis, v) in [("height", h), ("width", w)] {
            if v == 0 || v % m != 0 {
                return Err(Error::Input(format!(
                    "input {axis} {v} must be a positive multiple of {m}"
                )));
            }
        }
        Ok(())
    }

    /// Every violated constraint, or `Ok` when the config can be built.
    pub fn validate(&self) -> Result<()> {
        let mut p = Vec::new();
        if self.stem_channels == 0 {
            p.push("stem channels must be positive".to_string());
        }
        for (i, b) in self.stem_blocks.iter().enumerate() {
            b.problems(&format!("stem block {i}"), &mut p);
        }
        if self.stages.is_empty() {
            p.push("at least one token stage is required".into());
        }
        for (s, stage) in self.stages.iter().enumerate() {
            if stage.is_empty() {
                p.push(format!("stage {} has no blocks", s + 1));
            }
            for (i, b) in stage.iter().enumerate() {
                b.problems(&format!("stage {} block {i}", s + 1), &mut p);
            }
        }
        if self.num_transformer_blocks == 0 {
            p.push("at least one transformer block is required".into());
        }
        if self.num_heads == 0 || self.key_dim == 0 {
            p.push("heads and key dim must be positive".into());
        }
        if self.value_dim != 2 * self.key_dim {
            p.push(format!(
                "value dim must be twice the key dim ({} != 2 x {})",
                self.value_dim, self.key_dim
            ));
        }
        if self.ffn_expansion == 0 {
            p.push("ffn expansion must be positive".into());
        }
        if self.num_classes == 0 {
            p.push("num_classes must be positive".into());
        }
        let strides = self.stage_strides();
        let coarsest = strides.iter().copied().max().unwrap_or(0);
        if !self.sase_stride.is_power_of_two() || self.sase_stride < coarsest {
            p.push(format!(
                "sase stride {} must be a power of two >= the coarsest token stride {coarsest}",
                self.sase_stride
            ));
        }
        if self.head_kind.is_segmentation() {
            if self.sim_width == 0 {
                p.push("SIM width must be positive".into());
            }
            if self.injection_strides.is_empty() {
                p.push("segmentation heads need at least one injection scale".into());
            }
            if !self.injection_strides.windows(2).all(|w| w[0] < w[1]) {
                p.push("injection strides must be strictly increasing".into());
            }
            for s in &self.injection_strides {
                if strides.iter().filter(|x| *x == s).count() != 1 {
                    p.push(format!(
                        "injection stride {s} does not match exactly one stage ({strides:?})"
                    ));
                }
            }
            if self.head_kind == HeadKind::Concat && self.sim_width % 4 != 0 {
                p.push("concat head needs a SIM width divisible by 4".into());
            }
        }
        if self.variant != Variant::Custom {
            self.published_problems(&mut p);
        }
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p))
        }
    }

    fn published_problems(&self, p: &mut Vec<String>) {
        let (heads, width) = match self.variant {
            Variant::Tiny => (4, 128),
            Variant::Small => (6, 192),
            _ => (8, 256),
        };
        if self.num_transformer_blocks != 4 {
            p.push(format!("{}: L must be 4", self.variant));
        }
        if self.key_dim != 16 || self.value_dim != 32 {
            p.push(format!(
                "{}: key dim must be 16 and value dim 32",
                self.variant
            ));
        }
        if self.ffn_expansion != 2 {
            p.push(format!("{}: ffn expansion must be 2", self.variant));
        }
        if self.num_heads != heads {
            p.push(format!(
                "{}: expected {heads} heads, got {}",
                self.variant, self.num_heads
            ));
        }
        if self.head_kind.is_segmentation() && self.sim_width != width {
            p.push(format!(
                "{}: expected M={width}, got {}",
                self.variant, self.sim_width
            ));
        }
        if ![32, 64, 128].contains(&self.sase_stride) {
            p.push(format!(
                "{}: sase stride must be 32, 64 or 128",
                self.variant
            ));
        }
        if self.head_kind == HeadKind::Classification
            && self.sase_stride != CLASSIFICATION_SASE_STRIDE
        {
            p.push(format!(
                "{}: classification uses sase stride 32",
                self.variant
            ));
        }
    }
}

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use topformer::{HeadKind, Variant, VariantConfig};

#[derive(Debug, Parser)]
#[command(
    name = "topformer",
    version,
    about = "TopFormer inference, cost analysis and gradient checks"
)]
pub struct Cli {
    /// Kernel worker threads (results do not depend on it)
    #[arg(long, global = true, env = "TOPFORMER_THREADS", value_parser = clap::value_parser!(u16).range(1..))]
    pub threads: Option<u16>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Print the architecture and its shape trace
    Describe(ModelArgs),
    /// Parameter and FLOP counts with a per-module breakdown
    Analyze {
        #[command(flatten)]
        model: ModelArgs,
        /// Print every layer as an aligned table
        #[arg(long)]
        layers: bool,
        /// Print one `name<TAB>params<TAB>flops<TAB>n,c,h,w` line per layer
        #[arg(long, conflicts_with = "layers")]
        tsv: bool,
    },
    /// Write seeded random weights for a variant
    Init {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Store weights with batch norm folded into the convolutions
        #[arg(long)]
        folded: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Segment (or classify) one PPM image
    Infer(InferArgs),
    /// Time the forward pass on random weights
    Bench {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value_t = 3)]
        warmup: usize,
        /// Timed iterations (at least 3)
        #[arg(long, default_value_t = 20, value_parser = clap::value_parser!(u32).range(3..))]
        iters: u32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Finite-difference check of every backward rule
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Per-op tolerance; whole-model checks use 10x
        #[arg(long, default_value_t = topformer::autodiff::DEFAULT_TOL)]
        tol: f64,
    },
    /// BN folding, shape traces and kernel property checks
    Selftest {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum VariantArg {
    Tiny,
    Small,
    Base,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Tiny => Variant::Tiny,
            VariantArg::Small => Variant::Small,
            VariantArg::Base => Variant::Base,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum HeadArg {
    Default,
    Sum,
    Concat,
    Classification,
}

impl From<HeadArg> for HeadKind {
    fn from(h: HeadArg) -> Self {
        match h {
            HeadArg::Default => HeadKind::Default,
            HeadArg::Sum => HeadKind::Sum,
            HeadArg::Concat => HeadKind::Concat,
            HeadArg::Classification => HeadKind::Classification,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct ModelArgs {
    #[arg(long, value_enum, default_value_t = VariantArg::Base)]
    pub variant: VariantArg,
    /// Input size as HxW
    #[arg(long, default_value = "512x512", value_parser = parse_hw)]
    pub input: (usize, usize),
    /// Pooled-token stride (default 64; 32 for the classification head)
    #[arg(long)]
    pub sase_stride: Option<usize>,
    #[arg(long, value_enum, default_value_t = HeadArg::Default)]
    pub head: HeadArg,
    /// Override the class count (150 for segmentation, 1000 for classification)
    #[arg(long)]
    pub num_classes: Option<usize>,
}

impl ModelArgs {
    pub fn config(&self) -> VariantConfig {
        let base = VariantConfig::published(self.variant.into()).expect("published variant");
        let mut cfg = match HeadKind::from(self.head) {
            HeadKind::Classification => base.classification(),
            head => base.with_head(head),
        };
        if let Some(s) = self.sase_stride {
            cfg = cfg.with_sase_stride(s);
        }
        if let Some(n) = self.num_classes {
            cfg = cfg.with_num_classes(n);
        }
        cfg
    }
}

#[derive(Debug, Clone, Args)]
pub struct InferArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// TPFW weight file; seeded random weights when absent
    #[arg(long)]
    pub weights: Option<PathBuf>,
    /// Seed for random weights when no weight file is given
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Binary PPM (P6) input image
    #[arg(long)]
    pub image: PathBuf,
    /// Output PGM (P5) with the per-pixel argmax class
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also write a colour-mapped PPM
    #[arg(long)]
    pub colorized: Option<PathBuf>,
    /// Palette file: one `R G B` line per class
    #[arg(long, requires = "colorized")]
    pub palette: Option<PathBuf>,
    /// Resize logits to the input resolution before the argmax
    #[arg(long)]
    pub upsample_to_input: bool,
    /// Per-channel normalization mean (R,G,B)
    #[arg(long, value_parser = parse_triplet, default_value = "0.485,0.456,0.406")]
    pub mean: [f32; 3],
    /// Per-channel normalization std (R,G,B)
    #[arg(long, value_parser = parse_triplet, default_value = "0.229,0.224,0.225")]
    pub std: [f32; 3],
}

pub fn parse_hw(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected HxW, got '{s}'"))?;
    let parse = |v: &str| -> Result<usize, String> {
        match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(format!("expected HxW with positive integers, got '{s}'")),
        }
    };
    Ok((parse(h)?, parse(w)?))
}

fn parse_triplet(s: &str) -> Result<[f32; 3], String> {
    let vals: Vec<f32> = s
        .split(',')
        .map(|v| v.trim().parse::<f32>())
        .collect::<Result<_, _>>()
        .map_err(|_| format!("expected three comma-separated numbers, got '{s}'"))?;
    <[f32; 3]>::try_from(vals)
        .map_err(|_| format!("expected three comma-separated numbers, got '{s}'"))
}

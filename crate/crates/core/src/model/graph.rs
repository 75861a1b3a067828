use super::config::{HeadKind, MbBlockCfg, VariantConfig};
use crate::tensor::ConvSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnitKind {
    /// Convolution; weights under `{name}.conv.*`.
    Conv,
    /// Dense layer stored as a rank-2 matrix under `{name}.*`.
    Dense,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamRole {
    Weight,
    Bias,
    BnGamma,
    BnBeta,
    BnMean,
    BnVar,
}

impl ParamRole {
    pub fn is_learnable(&self) -> bool {
        !matches!(self, ParamRole::BnMean | ParamRole::BnVar)
    }
}

/// One named tensor the graph expects to be bound.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSlot {
    pub name: String,
    /// Stored shape: rank 1 for vectors, rank 2 for dense weights, rank 4 for conv weights.
    pub shape: Vec<usize>,
    pub role: ParamRole,
}

impl ParamSlot {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Convolution (or dense layer), optionally followed by BN and ReLU6.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConvUnit {
    pub name: String,
    pub spec: ConvSpec,
    pub bn: bool,
    pub relu6: bool,
    pub kind: UnitKind,
}

impl ConvUnit {
    fn conv(name: String, spec: ConvSpec, relu6: bool) -> Self {
        Self {
            name,
            spec,
            bn: true,
            relu6,
            kind: UnitKind::Conv,
        }
    }

    pub fn weight_name(&self) -> String {
        match self.kind {
            UnitKind::Conv => format!("{}.conv.weight", self.name),
            UnitKind::Dense => format!("{}.weight", self.name),
        }
    }

    pub fn bias_name(&self) -> String {
        match self.kind {
            UnitKind::Conv => format!("{}.conv.bias", self.name),
            UnitKind::Dense => format!("{}.bias", self.name),
        }
    }

    /// Names of gamma, beta, running mean, running var.
    pub fn bn_names(&self) -> [String; 4] {
        ["gamma", "beta", "mean", "var"].map(|p| format!("{}.bn.{p}", self.name))
    }

    pub fn slots(&self) -> Vec<ParamSlot> {
        let s = self.spec;
        let weight_shape = match self.kind {
            UnitKind::Conv => s.weight_dims().to_vec(),
            UnitKind::Dense => vec![s.out_ch, s.in_ch],
        };
        let mut out = vec![ParamSlot {
            name: self.weight_name(),
            shape: weight_shape,
            role: ParamRole::Weight,
        }];
        if s.has_bias {
            out.push(ParamSlot {
                name: self.bias_name(),
                shape: vec![s.out_ch],
                role: ParamRole::Bias,
            });
        }
        if self.bn {
            let roles = [
                ParamRole::BnGamma,
                ParamRole::BnBeta,
                ParamRole::BnMean,
                ParamRole::BnVar,
            ];
            for (name, role) in self.bn_names().into_iter().zip(roles) {
                out.push(ParamSlot {
                    name,
                    shape: vec![s.out_ch],
                    role,
                });
            }
        }
        out
    }

    pub fn learnable_params(&self) -> usize {
        let s = self.spec;
        s.weight_len()
            + if s.has_bias { s.out_ch } else { 0 }
            + if self.bn { 2 * s.out_ch } else { 0 }
    }

    /// The unit after BN has been absorbed into conv weight and bias.
    pub fn folded(&self) -> ConvUnit {
        if !self.bn {
            return self.clone();
        }
        ConvUnit {
            spec: self.spec.with_bias(true),
            bn: false,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MbBlock {
    pub name: String,
    pub in_channels: usize,
    pub cfg: MbBlockCfg,
    pub expand: Option<ConvUnit>,
    pub dw: ConvUnit,
    pub project: ConvUnit,
    pub residual: bool,
}

impl MbBlock {
    pub fn new(name: String, in_channels: usize, cfg: MbBlockCfg) -> Self {
        let hidden = in_channels * cfg.expand_ratio;
        let expand = (cfg.expand_ratio != 1).then(|| {
            ConvUnit::conv(
                format!("{name}.expand"),
                ConvSpec::pointwise(in_channels, hidden),
                true,
            )
        });
        let dw = ConvUnit::conv(
            format!("{name}.dw"),
            ConvSpec::depthwise(hidden, cfg.kernel, cfg.stride),
            true,
        );
        let project = ConvUnit::conv(
            format!("{name}.project"),
            ConvSpec::pointwise(hidden, cfg.out_channels),
            false,
        );
        Self {
            residual: cfg.has_residual(in_channels),
            name,
            in_channels,
            cfg,
            expand,
            dw,
            project,
        }
    }

    pub fn units(&self) -> Vec<&ConvUnit> {
        self.expand
            .iter()
            .chain([&self.dw, &self.project])
            .collect()
    }

    fn units_mut(&mut self) -> Vec<&mut ConvUnit> {
        self.expand
            .iter_mut()
            .chain([&mut self.dw, &mut self.project])
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenPyramid {
    pub stem: ConvUnit,
    pub stem_blocks: Vec<MbBlock>,
    pub stages: Vec<Vec<MbBlock>>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransformerBlock {
    pub name: String,
    pub dim: usize,
    pub heads: usize,
    pub key_dim: usize,
    pub value_dim: usize,
    /// Fused projection; per head the channels are `[q (D) | k (D) | v (value_dim)]`.
    pub qkv: ConvUnit,
    pub attn_out: ConvUnit,
    pub ffn_expand: ConvUnit,
    pub ffn_dw: ConvUnit,
    pub ffn_project: ConvUnit,
}

impl TransformerBlock {
    pub fn new(
        name: String,
        dim: usize,
        heads: usize,
        key_dim: usize,
        value_dim: usize,
        ffn_expansion: usize,
    ) -> Self {
        let per_head = 2 * key_dim + value_dim;
        let hidden = dim * ffn_expansion;
        Self {
            qkv: ConvUnit::conv(
                format!("{name}.qkv"),
                ConvSpec::pointwise(dim, heads * per_head),
                false,
            ),
            attn_out: ConvUnit::conv(
                format!("{name}.attn_out"),
                ConvSpec::pointwise(heads * value_dim, dim),
                false,
            ),
            ffn_expand: ConvUnit::conv(
                format!("{name}.ffn.expand"),
                ConvSpec::pointwise(dim, hidden),
                true,
            ),
            ffn_dw: ConvUnit::conv(
                format!("{name}.ffn.dw"),
                ConvSpec::depthwise(hidden, 3, 1),
                true,
            ),
            ffn_project: ConvUnit::conv(
                format!("{name}.ffn.project"),
                ConvSpec::pointwise(hidden, dim),
                false,
            ),
            name,
            dim,
            heads,
            key_dim,
            value_dim,
        }
    }

    /// Split sizes of the fused projection output.
    pub fn qkv_split(&self) -> Vec<usize> {
        (0..self.heads)
            .flat_map(|_| [self.key_dim, self.key_dim, self.value_dim])
            .collect()
    }

    pub fn units(&self) -> Vec<&ConvUnit> {
        vec![
            &self.qkv,
            &self.attn_out,
            &self.ffn_expand,
            &self.ffn_dw,
            &self.ffn_project,
        ]
    }

    fn units_mut(&mut self) -> Vec<&mut ConvUnit> {
        vec![
            &mut self.qkv,
            &mut self.attn_out,
            &mut self.ffn_expand,
            &mut self.ffn_dw,
            &mut self.ffn_project,
        ]
    }
}

/// Semantics injection for one pyramid level.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sim {
    pub name: String,
    /// Index into the pyramid (and into the SASE channel split).
    pub stage: usize,
    pub local: ConvUnit,
    /// Sigmoid gating branch; absent for the sum head.
    pub gweight: Option<ConvUnit>,
    pub gsem: ConvUnit,
}

impl Sim {
    pub fn new(name: String, stage: usize, channels: usize, width: usize, gated: bool) -> Self {
        let unit = |branch: &str| {
            ConvUnit::conv(
                format!("{name}.{branch}"),
                ConvSpec::pointwise(channels, width),
                false,
            )
        };
        Self {
            local: unit("local"),
            gweight: gated.then(|| unit("gweight")),
            gsem: unit("gsem"),
            name,
            stage,
        }
    }

    pub fn units(&self) -> Vec<&ConvUnit> {
        let mut v = vec![&self.local];
        v.extend(self.gweight.as_ref());
        v.push(&self.gsem);
        v
    }

    fn units_mut(&mut self) -> Vec<&mut ConvUnit> {
        let mut v = vec![&mut self.local];
        v.extend(self.gweight.as_mut());
        v.push(&mut self.gsem);
        v
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Head {
    Segmentation {
        kind: HeadKind,
        /// Per-scale channel reduction (concat head only).
        reduce: Vec<ConvUnit>,
        fuse: ConvUnit,
        classifier: ConvUnit,
    },
    Classification {
        classifier: ConvUnit,
    },
}

impl Head {
    pub fn units(&self) -> Vec<&ConvUnit> {
        match self {
            Head::Segmentation {
                reduce,
                fuse,
                classifier,
                ..
            } => reduce.iter().chain([fuse, classifier]).collect(),
            Head::Classification { classifier } => vec![classifier],
        }
    }

    fn units_mut(&mut self) -> Vec<&mut ConvUnit> {
        match self {
            Head::Segmentation {
                reduce,
                fuse,
                classifier,
                ..
            } => reduce.iter_mut().chain([fuse, classifier]).collect(),
            Head::Classification { classifier } => vec![classifier],
        }
    }
}

/// Module a layer belongs to, for cost breakdowns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Module {
    Tpm,
    Sase,
    Sim,
    Head,
}

impl Module {
    pub const ALL: [Module; 4] = [Module::Tpm, Module::Sase, Module::Sim, Module::Head];

    pub fn of(name: &str) -> Module {
        match name.split('.').next() {
            Some("sase") => Module::Sase,
            Some("sim") => Module::Sim,
            Some("head") => Module::Head,
            _ => Module::Tpm,
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            Module::Tpm => "TPM",
            Module::Sase => "SASE",
            Module::Sim => "SIM",
            Module::Head => "Head",
        }
    }
}

/// Ordered layer graph of a built network.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Graph {
    pub tpm: TokenPyramid,
    pub sase: Vec<TransformerBlock>,
    /// Channel split of the SASE output, one slice per pyramid level.
    pub split_sizes: Vec<usize>,
    pub sase_stride: usize,
    pub sims: Vec<Sim>,
    pub head: Head,
    pub required_multiple: usize,
}

fn conv_stem(cfg: &VariantConfig) -> ConvUnit {
    ConvUnit::conv(
        "tpm.stem".into(),
        ConvSpec::new(3, cfg.stem_channels, 3, 2),
        true,
    )
}

impl Graph {
    /// Builds the graph for a config that already passed validation.
    pub(crate) fn build(cfg: &VariantConfig) -> Graph {
        let stem = conv_stem(cfg);
        let mut ch = cfg.stem_channels;
        let mut stem_blocks = Vec::new();
        for (i, b) in cfg.stem_blocks.iter().enumerate() {
            stem_blocks.push(MbBlock::new(format!("tpm.stem.b{i}"), ch, *b));
            ch = b.out_channels;
        }
        let mut stages = Vec::new();
        for (s, stage) in cfg.stages.iter().enumerate() {
            let mut blocks = Vec::new();
            for (i, b) in stage.iter().enumerate() {
                blocks.push(MbBlock::new(format!("tpm.s{}.b{i}", s + 1), ch, *b));
                ch = b.out_channels;
            }
            stages.push(blocks);
        }

        let split_sizes = cfg.stage_channels();
        let width = cfg.concat_width();
        let sase = (0..cfg.num_transformer_blocks)
            .map(|i| {
                TransformerBlock::new(
                    format!("sase.blk{i}"),
                    width,
                    cfg.num_heads,
                    cfg.key_dim,
                    cfg.value_dim,
                    cfg.ffn_expansion,
                )
            })
            .collect();

        let m = cfg.sim_width;
        let (sims, head) = if cfg.head_kind == HeadKind::Classification {
            let classifier = ConvUnit {
                name: "head.classifier".into(),
                spec: ConvSpec::pointwise(width, cfg.num_classes).with_bias(true),
                bn: false,
                relu6: false,
                kind: UnitKind::Dense,
            };
            (Vec::new(), Head::Classification { classifier })
        } else {
            let gated = cfg.head_kind != HeadKind::Sum;
            let sims: Vec<Sim> = cfg
                .injection_stages()
                .into_iter()
                .map(|s| Sim::new(format!("sim.s{}", s + 1), s, split_sizes[s], m, gated))
                .collect();
            let (reduce, fuse_in, fuse_out) = if cfg.head_kind == HeadKind::Concat {
                let r = m / 4;
                let reduce = sims
                    .iter()
                    .map(|sim| {
                        ConvUnit::conv(
                            format!("head.reduce.s{}", sim.stage + 1),
                            ConvSpec::pointwise(m, r),
                            true,
                        )
                    })
                    .collect::<Vec<_>>();
                let n = reduce.len();
                (reduce, n * r, r)
            } else {
                (Vec::new(), m, m)
            };
            let head = Head::Segmentation {
                kind: cfg.head_kind,
                reduce,
                fuse: ConvUnit::conv(
                    "head.fuse".into(),
                    ConvSpec::pointwise(fuse_in, fuse_out),
                    true,
                ),
                classifier: ConvUnit {
                    name: "head.classifier".into(),
                    spec: ConvSpec::pointwise(fuse_out, cfg.num_classes).with_bias(true),
                    bn: false,
                    relu6: false,
                    kind: UnitKind::Conv,
                },
            };
            (sims, head)
        };

        Graph {
            tpm: TokenPyramid {
                stem,
                stem_blocks,
                stages,
            },
            sase,
            split_sizes,
            sase_stride: cfg.sase_stride,
            sims,
            head,
            required_multiple: cfg.required_multiple(),
        }
    }

    pub fn mb_blocks(&self) -> impl Iterator<Item = &MbBlock> {
        self.tpm
            .stem_blocks
            .iter()
            .chain(self.tpm.stages.iter().flatten())
    }

    /// Every unit in execution order.
    pub fn units(&self) -> Vec<&ConvUnit> {
        let mut v = vec![&self.tpm.stem];
        v.extend(self.mb_blocks().flat_map(|b| b.units()));
        v.extend(self.sase.iter().flat_map(|b| b.units()));
        v.extend(self.sims.iter().flat_map(|s| s.units()));
        v.extend(self.head.units());
        v
    }

    pub(crate) fn for_each_unit_mut(&mut self, mut f: impl FnMut(&mut ConvUnit)) {
        f(&mut self.tpm.stem);
        for b in self
            .tpm
            .stem_blocks
            .iter_mut()
            .chain(self.tpm.stages.iter_mut().flatten())
        {
            b.units_mut().into_iter().for_each(&mut f);
        }
        for b in &mut self.sase {
            b.units_mut().into_iter().for_each(&mut f);
        }
        for s in &mut self.sims {
            s.units_mut().into_iter().for_each(&mut f);
        }
        self.head.units_mut().into_iter().for_each(&mut f);
    }

    pub fn slots(&self) -> Vec<ParamSlot> {
        self.units().into_iter().flat_map(|u| u.slots()).collect()
    }

    pub fn folded(&self) -> Graph {
        let mut g = self.clone();
        g.for_each_unit_mut(|u| *u = u.folded());
        g
    }

    pub fn is_classification(&self) -> bool {
        matches!(self.head, Head::Classification { .. })
    }
}

//! Parameter / FLOP accounting and symbolic shape tracing.
//!
//! FLOPs are multiply-accumulates: a conv costs
//! `out_elems * in_ch / groups * kh * kw`, attention costs `T^2 * D` for the
//! scores and `T^2 * Dv` for the aggregation per head. Batch norm,
//! activations, adds, pooling, interpolation and softmax are free.

mod report;
mod tracer;

pub use report::{Breakdown, CostReport, LayerCost, ModuleShare};
pub use tracer::ShapeTracer;

use crate::error::Result;
use crate::model::{forward, Model};
use crate::tensor::Dims;

/// Named output dims in execution order: every conv unit plus the named
/// intermediates (stage outputs, pooled tokens, blocks, SIMs, logits).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShapeTrace {
    pub entries: Vec<(String, Dims)>,
}

impl ShapeTrace {
    pub fn get(&self, name: &str) -> Option<Dims> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, d)| *d)
    }

    /// Named intermediates only (no individual conv units).
    pub fn milestones(&self) -> Vec<(String, Dims)> {
        const NAMES: [&str; 4] = ["tpm.stem", "sase.pool", "head.logits", "head.scores"];
        self.entries
            .iter()
            .filter(|(n, _)| {
                NAMES.contains(&n.as_str())
                    || is_numbered(n, "tpm.s", "")
                    || is_numbered(n, "sase.blk", "")
                    || is_numbered(n, "sim.s", "")
            })
            .fold(Vec::new(), |mut acc: Vec<(String, Dims)>, e| {
                // the stem conv unit and the stem mark share a name
                if acc.last() != Some(e) {
                    acc.push(e.clone());
                }
                acc
            })
    }
}

fn is_numbered(name: &str, prefix: &str, suffix: &str) -> bool {
    name.strip_prefix(prefix)
        .and_then(|r| r.strip_suffix(suffix))
        .is_some_and(|r| !r.is_empty() && r.bytes().all(|b| b.is_ascii_digit()))
}

fn run_tracer(model: &Model, h: usize, w: usize) -> Result<ShapeTracer> {
    model.check_input(h, w)?;
    let mut t = ShapeTracer::new();
    forward::run(model.graph(), &mut t, &[1, 3, h, w], false)?;
    Ok(t)
}

/// Learnable parameters per layer (running statistics excluded).
pub fn count_params(model: &Model) -> CostReport {
    CostReport::from_layers(
        model
            .graph()
            .units()
            .into_iter()
            .map(|u| LayerCost {
                name: u.name.clone(),
                params: u.learnable_params(),
                flops: 0,
                output: None,
            })
            .collect(),
        None,
    )
}

/// Parameters, MACs and output shapes for a batch-1 input of `h x w`.
pub fn count_flops(model: &Model, h: usize, w: usize) -> Result<CostReport> {
    Ok(CostReport::from_layers(
        run_tracer(model, h, w)?.into_layers(),
        Some((h, w)),
    ))
}

pub fn trace_shapes(model: &Model, h: usize, w: usize) -> Result<ShapeTrace> {
    Ok(ShapeTrace {
        entries: run_tracer(model, h, w)?.into_trace(),
    })
}

pub fn breakdown(model: &Model, h: usize, w: usize) -> Result<Breakdown> {
    Ok(count_flops(model, h, w)?.breakdown())
}

/// Human-readable architecture listing with the shape trace at `h x w`.
pub fn describe(model: &Model, h: usize, w: usize) -> Result<String> {
    use std::fmt::Write;
    let cfg = model.config();
    let trace = trace_shapes(model, h, w)?;
    let mut s = String::new();
    let _ = writeln!(
        s,
        "variant {} (head {}, {} classes)",
        cfg.variant, cfg.head_kind, cfg.num_classes
    );
    let _ = writeln!(s, "stem: conv 3x3, {} ch, stride 2", cfg.stem_channels);
    for b in &cfg.stem_blocks {
        let _ = writeln!(
            s,
            "  MB k={} t={} c={} s={}",
            b.kernel, b.expand_ratio, b.out_channels, b.stride
        );
    }
    let strides = cfg.stage_strides();
    for (i, stage) in cfg.stages.iter().enumerate() {
        let _ = writeln!(s, "stage {} (1/{}):", i + 1, strides[i]);
        for b in stage {
            let _ = writeln!(
                s,
                "  MB k={} t={} c={} s={}",
                b.kernel, b.expand_ratio, b.out_channels, b.stride
            );
        }
    }
    let _ = writeln!(
        s,
        "SASE: stride {}, L={}, H={}, D={}, Dv={}, ffn x{}, width {}",
        cfg.sase_stride,
        cfg.num_transformer_blocks,
        cfg.num_heads,
        cfg.key_dim,
        cfg.value_dim,
        cfg.ffn_expansion,
        cfg.concat_width()
    );
    if cfg.head_kind.is_segmentation() {
        let scales: Vec<String> = cfg
            .injection_strides
            .iter()
            .map(|s| format!("1/{s}"))
            .collect();
        let _ = writeln!(s, "SIM: M={} at {}", cfg.sim_width, scales.join(", "));
    }
    let _ = writeln!(s, "shape trace @{h}x{w}:");
    for (name, d) in trace.milestones() {
        let dims = format!("{}x{}x{}x{}", d[0], d[1], d[2], d[3]);
        let _ = writeln!(s, "  {name:<12} {dims:<18} ({}x{})", d[2], d[3]);
    }
    Ok(s)
}

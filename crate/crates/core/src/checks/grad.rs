use std::collections::HashMap;

use crate::autodiff::{fd_gradcheck, vector_dims, GradInput, GradcheckReport, Tape, Var};
use crate::error::Result;
use crate::model::exec::padded_dims;
use crate::model::{
    forward, Graph, ParamRole, ParamSlot, TapeExec, TransformerBlock, VariantConfig,
};
use crate::tensor::ConvSpec;

/// Whole-model checks use a looser tolerance than single ops.
pub const COMPOSED_TOL_FACTOR: f64 = 10.0;

/// Sampling range for a parameter: Kaiming-scale weights, positive BN
/// scale and variance, `U(-1, 1)` otherwise.
pub fn slot_input(slot: &ParamSlot) -> Result<GradInput> {
    let dims = padded_dims(&slot.shape)?;
    let input = GradInput::new(slot.name.clone(), dims);
    Ok(match slot.role {
        ParamRole::Weight => {
            let fan_in: usize = slot.shape[1..].iter().product();
            let b = (6.0 / fan_in as f64).sqrt();
            input.range(-b, b)
        }
        ParamRole::BnGamma | ParamRole::BnVar => input.range(0.5, 1.5),
        ParamRole::Bias | ParamRole::BnBeta | ParamRole::BnMean => input,
    })
}

fn leaves(inputs: &[GradInput], vars: &[Var]) -> HashMap<String, Var> {
    inputs
        .iter()
        .zip(vars)
        .map(|(i, &v)| (i.name.clone(), v))
        .collect()
}

/// Transformer block (attention + FFN + residuals) on `1 x 16 x 4 x 4` tokens.
pub fn check_transformer_block(seed: u64, tol: f64) -> Result<GradcheckReport> {
    let blk = TransformerBlock::new("blk".into(), 16, 2, 4, 8, 2);
    let mut inputs = vec![GradInput::new("x", [1, 16, 4, 4])];
    for u in blk.units() {
        for s in u.slots() {
            inputs.push(slot_input(&s)?);
        }
    }
    let names = inputs.clone();
    fd_gradcheck("transformer_block", &inputs, seed, tol, move |t, v| {
        let mut e = TapeExec::with_leaves(t, leaves(&names[1..], &v[1..]));
        forward::transformer_block(&blk, &mut e, &v[0])
    })
}

/// End-to-end check of a small network on a 4x4 image, every parameter perturbed.
pub fn check_composed(cfg: &VariantConfig, seed: u64, tol: f64) -> Result<GradcheckReport> {
    cfg.validate()?;
    let graph = Graph::build(cfg);
    let k = cfg.required_multiple();
    let mut inputs = vec![GradInput::new("image", [1, 3, k, k])];
    for s in graph.slots() {
        inputs.push(slot_input(&s)?);
    }
    let names = inputs.clone();
    fd_gradcheck("composed_model", &inputs, seed, tol, move |t, v| {
        let mut e = TapeExec::with_leaves(t, leaves(&names[1..], &v[1..]));
        forward::run(&graph, &mut e, &v[0], false)
    })
}

type OpFn = fn(&mut Tape, &[Var]) -> Result<Var>;

fn grouped() -> ConvSpec {
    ConvSpec {
        groups: 2,
        ..ConvSpec::new(4, 6, 3, 2).with_bias(true)
    }
}

fn op_cases() -> Vec<(&'static str, Vec<GradInput>, OpFn)> {
    let x = |dims| GradInput::new("x", dims);
    vec![
        (
            "conv2d",
            vec![
                x([1, 2, 4, 4]),
                GradInput::new("w", ConvSpec::new(2, 3, 3, 1).weight_dims()),
            ],
            |t, v| t.conv2d(v[0], ConvSpec::new(2, 3, 3, 1), v[1], None),
        ),
        (
            "conv2d_grouped_strided_bias",
            vec![
                x([2, 4, 5, 5]),
                GradInput::new("w", grouped().weight_dims()),
                GradInput::new("b", vector_dims(6)),
            ],
            |t, v| t.conv2d(v[0], grouped(), v[1], Some(v[2])),
        ),
        (
            "depthwise_conv2d",
            vec![
                x([1, 3, 5, 6]),
                GradInput::new("w", ConvSpec::depthwise(3, 3, 1).weight_dims()),
            ],
            |t, v| t.conv2d(v[0], ConvSpec::depthwise(3, 3, 1), v[1], None),
        ),
        (
            "depthwise_conv2d_k5_s2",
            vec![
                x([1, 4, 6, 6]),
                GradInput::new("w", ConvSpec::depthwise(4, 5, 2).weight_dims()),
            ],
            |t, v| t.conv2d(v[0], ConvSpec::depthwise(4, 5, 2), v[1], None),
        ),
        (
            "pointwise_conv2d_bias",
            vec![
                x([1, 5, 3, 3]),
                GradInput::new("w", ConvSpec::pointwise(5, 4).weight_dims()),
                GradInput::new("b", vector_dims(4)),
            ],
            |t, v| {
                t.conv2d(
                    v[0],
                    ConvSpec::pointwise(5, 4).with_bias(true),
                    v[1],
                    Some(v[2]),
                )
            },
        ),
        (
            "batch_norm",
            vec![
                x([2, 3, 3, 3]),
                GradInput::new("gamma", vector_dims(3)).range(0.5, 1.5),
                GradInput::new("beta", vector_dims(3)),
                GradInput::new("mean", vector_dims(3)),
                GradInput::new("var", vector_dims(3)).range(0.5, 1.5),
            ],
            |t, v| t.batch_norm(v[0], v[1], v[2], v[3], v[4], crate::tensor::BN_EPS),
        ),
        ("relu6", vec![x([1, 3, 4, 4]).range(-1.0, 7.0)], |t, v| {
            Ok(t.relu6(v[0]))
        }),
        ("sigmoid", vec![x([1, 3, 4, 4])], |t, v| Ok(t.sigmoid(v[0]))),
        (
            "softmax_lastdim",
            vec![x([1, 2, 3, 5]).range(-3.0, 3.0)],
            |t, v| Ok(t.softmax_lastdim(v[0])),
        ),
        ("adaptive_avg_pool", vec![x([1, 2, 5, 6])], |t, v| {
            t.adaptive_avg_pool(v[0], 2, 4)
        }),
        ("bilinear_upsample", vec![x([1, 2, 3, 2])], |t, v| {
            t.bilinear_upsample(v[0], 5, 6, false)
        }),
        (
            "bilinear_upsample_align_corners",
            vec![x([1, 2, 3, 2])],
            |t, v| t.bilinear_upsample(v[0], 5, 6, true),
        ),
        (
            "add",
            vec![x([1, 2, 3, 3]), GradInput::new("y", [1, 2, 3, 3])],
            |t, v| t.add(v[0], v[1]),
        ),
        (
            "hadamard",
            vec![x([1, 2, 3, 3]), GradInput::new("y", [1, 2, 3, 3])],
            |t, v| t.hadamard(v[0], v[1]),
        ),
        ("scale", vec![x([1, 2, 3, 3])], |t, v| {
            Ok(t.scale(v[0], -1.75))
        }),
        (
            "concat_channels",
            vec![x([1, 2, 3, 3]), GradInput::new("y", [1, 3, 3, 3])],
            |t, v| t.concat_channels(&[v[1], v[0]]),
        ),
        ("split_channels", vec![x([1, 5, 3, 3])], |t, v| {
            let p = t.split_channels(v[0], &[2, 3])?;
            let a = t.scale(p[0], 2.0);
            t.concat_channels(&[p[1], a])
        }),
        (
            "matmul_batched",
            vec![x([2, 2, 3, 4]), GradInput::new("y", [2, 2, 4, 2])],
            |t, v| t.matmul_batched(v[0], v[1]),
        ),
        ("reshape", vec![x([1, 2, 3, 4])], |t, v| {
            let r = t.reshape(v[0], [1, 1, 6, 4])?;
            let s = t.sigmoid(r);
            t.reshape(s, [2, 3, 2, 2])
        }),
        ("transpose_last2", vec![x([1, 2, 3, 4])], |t, v| {
            Ok(t.transpose_last2(v[0]))
        }),
    ]
}

/// Every tensor op at `tol`, the transformer block at `tol`, and the composed
/// micro network at `10 * tol`.
pub fn gradcheck_suite(seed: u64, tol: f64) -> Result<Vec<GradcheckReport>> {
    let mut reports = Vec::new();
    for (i, (name, inputs, f)) in op_cases().into_iter().enumerate() {
        reports.push(fd_gradcheck(
            name,
            &inputs,
            seed.wrapping_add(i as u64),
            tol,
            f,
        )?);
    }
    reports.push(check_transformer_block(seed, tol)?);
    reports.push(check_composed(
        &VariantConfig::micro(),
        seed,
        tol * COMPOSED_TOL_FACTOR,
    )?);
    Ok(reports)
}

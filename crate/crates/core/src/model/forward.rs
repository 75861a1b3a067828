//! The network forward pass, written once against [`Exec`].

use super::config::HeadKind;
use super::exec::Exec;
use super::graph::{Graph, Head, MbBlock, Sim, TransformerBlock};
use crate::error::{Error, Result};

fn mb_block<E: Exec>(b: &MbBlock, e: &mut E, x: &E::Value) -> Result<E::Value> {
    let mut y = match &b.expand {
        Some(u) => e.conv_unit(u, x)?,
        None => x.clone(),
    };
    y = e.conv_unit(&b.dw, &y)?;
    y = e.conv_unit(&b.project, &y)?;
    if b.residual {
        y = e.add(x, &y)?;
    }
    Ok(y)
}

/// Token pyramid: one output per stage, finest first.
pub fn forward_pyramid<E: Exec>(g: &Graph, e: &mut E, image: &E::Value) -> Result<Vec<E::Value>> {
    let mut x = e.conv_unit(&g.tpm.stem, image)?;
    for b in &g.tpm.stem_blocks {
        x = mb_block(b, e, &x)?;
    }
    e.mark("tpm.stem", &x);
    let mut tokens = Vec::with_capacity(g.tpm.stages.len());
    for (s, stage) in g.tpm.stages.iter().enumerate() {
        for b in stage {
            x = mb_block(b, e, &x)?;
        }
        e.mark(&format!("tpm.s{}", s + 1), &x);
        tokens.push(x.clone());
    }
    Ok(tokens)
}

/// Pools every level to `(h, w)` and concatenates in scale order.
pub fn pool_and_concat<E: Exec>(
    e: &mut E,
    tokens: &[E::Value],
    h: usize,
    w: usize,
) -> Result<E::Value> {
    e.scope("sase.pool");
    let pooled = tokens
        .iter()
        .map(|t| e.adaptive_avg_pool(t, h, w))
        .collect::<Result<Vec<_>>>()?;
    let out = e.concat_channels(&pooled)?;
    e.mark("sase.pool", &out);
    Ok(out)
}

/// Multi-head attention over the flattened spatial tokens.
pub fn mhsa<E: Exec>(blk: &TransformerBlock, e: &mut E, x: &E::Value) -> Result<E::Value> {
    let [n, _, h, w] = e.dims(x);
    let t = h * w;
    let qkv = e.conv_unit(&blk.qkv, x)?;
    e.scope(&format!("{}.attn", blk.name));
    let parts = e.split_channels(&qkv, &blk.qkv_split())?;
    let inv_sqrt_d = 1.0 / (blk.key_dim as f64).sqrt();
    let mut heads = Vec::with_capacity(blk.heads);
    for p in parts.chunks(3) {
        let q = e.reshape(&p[0], [n, 1, blk.key_dim, t])?;
        let q = e.transpose_last2(&q)?;
        let k = e.reshape(&p[1], [n, 1, blk.key_dim, t])?;
        let v = e.reshape(&p[2], [n, 1, blk.value_dim, t])?;
        let scores = e.matmul_batched(&q, &k)?;
        let scores = e.scale(&scores, inv_sqrt_d)?;
        let attn = e.softmax_lastdim(&scores)?;
        let attn_t = e.transpose_last2(&attn)?;
        let out = e.matmul_batched(&v, &attn_t)?;
        heads.push(e.reshape(&out, [n, blk.value_dim, h, w])?);
    }
    let cat = e.concat_channels(&heads)?;
    let cat = e.relu6(&cat)?;
    e.conv_unit(&blk.attn_out, &cat)
}

pub fn ffn<E: Exec>(blk: &TransformerBlock, e: &mut E, x: &E::Value) -> Result<E::Value> {
    let y = e.conv_unit(&blk.ffn_expand, x)?;
    let y = e.conv_unit(&blk.ffn_dw, &y)?;
    e.conv_unit(&blk.ffn_project, &y)
}

pub fn transformer_block<E: Exec>(
    blk: &TransformerBlock,
    e: &mut E,
    x: &E::Value,
) -> Result<E::Value> {
    let a = mhsa(blk, e, x)?;
    let y = e.add(x, &a)?;
    let f = ffn(blk, e, &y)?;
    let z = e.add(&y, &f)?;
    e.mark(&blk.name, &z);
    Ok(z)
}

pub fn sim_forward<E: Exec>(
    sim: &Sim,
    e: &mut E,
    local: &E::Value,
    global: &E::Value,
) -> Result<E::Value> {
    let [_, _, h, w] = e.dims(local);
    let mut out = e.conv_unit(&sim.local, local)?;
    e.scope(&sim.name);
    if let Some(gw) = &sim.gweight {
        let g = e.conv_unit(gw, global)?;
        let g = e.sigmoid(&g)?;
        let g = e.upsample(&g, h, w)?;
        out = e.hadamard(&out, &g)?;
    }
    let s = e.conv_unit(&sim.gsem, global)?;
    let s = e.upsample(&s, h, w)?;
    let out = e.add(&out, &s)?;
    e.mark(&sim.name, &out);
    Ok(out)
}

/// Segmentation logits at the finest SIM resolution.
pub fn seg_head<E: Exec>(head: &Head, e: &mut E, sims: &[E::Value]) -> Result<E::Value> {
    let Head::Segmentation {
        kind,
        reduce,
        fuse,
        classifier,
    } = head
    else {
        return Err(Error::Config(vec!["segmentation head required".into()]));
    };
    let first = sims.first().ok_or_else(|| {
        Error::Config(vec![
            "segmentation head needs at least one SIM output".into()
        ])
    })?;
    let [_, _, h, w] = e.dims(first);
    let fused = if *kind == HeadKind::Concat {
        let mut parts = Vec::with_capacity(sims.len());
        for (u, s) in reduce.iter().zip(sims) {
            let r = e.conv_unit(u, s)?;
            e.scope("head.merge");
            parts.push(e.upsample(&r, h, w)?);
        }
        e.concat_channels(&parts)?
    } else {
        e.scope("head.merge");
        let mut acc = first.clone();
        for s in &sims[1..] {
            let up = e.upsample(s, h, w)?;
            acc = e.add(&acc, &up)?;
        }
        acc
    };
    let y = e.conv_unit(fuse, &fused)?;
    e.conv_unit(classifier, &y)
}

/// Class scores as `(n, classes, 1, 1)`.
pub fn cls_head<E: Exec>(head: &Head, e: &mut E, x: &E::Value) -> Result<E::Value> {
    let Head::Classification { classifier } = head else {
        return Err(Error::Config(vec!["classification head required".into()]));
    };
    e.scope("head.pool");
    let pooled = e.adaptive_avg_pool(x, 1, 1)?;
    e.conv_unit(classifier, &pooled)
}

/// Full network. Segmentation logits are at 1/8 resolution unless
/// `upsample_to_input` is set.
pub fn run<E: Exec>(
    g: &Graph,
    e: &mut E,
    image: &E::Value,
    upsample_to_input: bool,
) -> Result<E::Value> {
    let [_, c, h, w] = e.dims(image);
    if c != 3 {
        return Err(Error::Input(format!(
            "expected a 3-channel image, got {c} channels"
        )));
    }
    let m = g.required_multiple;
    for (axis, v) in [("height", h), ("width", w)] {
        if v % m != 0 {
            return Err(Error::Input(format!(
                "input {axis} {v} must be a positive multiple of {m}"
            )));
        }
    }
    let tokens = forward_pyramid(g, e, image)?;
    let mut x = pool_and_concat(e, &tokens, h / g.sase_stride, w / g.sase_stride)?;
    for blk in &g.sase {
        x = transformer_block(blk, e, &x)?;
    }
    if g.is_classification() {
        let out = cls_head(&g.head, e, &x)?;
        e.mark("head.scores", &out);
        return Ok(out);
    }
    e.scope("sase.split");
    let slices = e.split_channels(&x, &g.split_sizes)?;
    let mut injected = Vec::with_capacity(g.sims.len());
    for sim in &g.sims {
        injected.push(sim_forward(sim, e, &tokens[sim.stage], &slices[sim.stage])?);
    }
    let mut logits = seg_head(&g.head, e, &injected)?;
    if upsample_to_input {
        e.scope("head.resize");
        logits = e.upsample(&logits, h, w)?;
    }
    e.mark("head.logits", &logits);
    Ok(logits)
}

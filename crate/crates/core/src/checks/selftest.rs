use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::analyzer;
use crate::error::Result;
use crate::iofmt::{random_init, WeightStore};
use crate::model::{forward, Evaluator, Exec, ForwardOptions, Model, VariantConfig};
use crate::tensor::{self, Tensor};

/// End-to-end folded-vs-unfolded tolerance (max-normalized relative diff).
pub const FOLD_TOL: f64 = 1e-4;
/// Per-layer folded-vs-unfolded tolerance.
pub const FOLD_LAYER_TOL: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub detail: String,
    pub pass: bool,
}

impl CheckResult {
    fn new(name: impl Into<String>, pass: bool, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            detail: detail.into(),
            pass,
        }
    }
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {:<28} {}",
            if self.pass { "PASS" } else { "FAIL" },
            self.name,
            self.detail
        )
    }
}

/// Redraws every batch-norm tensor: gamma in [0.5, 1.5), beta and mean in
/// [-0.2, 0.2), var in [0.5, 2). Other tensors are kept.
pub fn randomize_batch_norm(store: &WeightStore, seed: u64) -> Result<WeightStore> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = WeightStore::new();
    for e in store.iter() {
        let range = if e.name.ends_with(".bn.gamma") {
            Some(0.5..1.5)
        } else if e.name.ends_with(".bn.beta") || e.name.ends_with(".bn.mean") {
            Some(-0.2..0.2)
        } else if e.name.ends_with(".bn.var") {
            Some(0.5..2.0)
        } else {
            None
        };
        let data = match range {
            Some(r) => e.data.iter().map(|_| rng.gen_range(r.clone())).collect(),
            None => e.data.clone(),
        };
        out.insert(e.name.clone(), e.shape.clone(), data)?;
    }
    Ok(out)
}

pub fn random_image(h: usize, w: usize, seed: u64) -> Result<Tensor<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn([1, 3, h, w], |_| rng.gen_range(-2.0..2.0))
}

/// Bound model with seeded Kaiming weights and randomized BN statistics.
pub fn random_model(cfg: VariantConfig, seed: u64) -> Result<Model> {
    let m = Model::build(cfg)?;
    let w = randomize_batch_norm(&random_init(&m, seed)?, seed ^ 0x5eed)?;
    m.bind(&w)
}

/// Folded-vs-unfolded f64 forward passes must agree to this.
pub const FOLD_EXACT_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct FoldReport {
    /// f32 folded vs f32 unfolded.
    pub end_to_end: f64,
    /// Same comparison with both models evaluated in f64.
    pub end_to_end_f64: f64,
    /// f32 unfolded vs f64 unfolded: the rounding noise of the f32 forward
    /// pass itself, a floor for `end_to_end`.
    pub f32_noise: f64,
    pub worst_layer: String,
    pub worst_layer_diff: f64,
    pub layers: usize,
}

impl FoldReport {
    pub fn pass(&self) -> bool {
        self.end_to_end < FOLD_TOL && self.worst_layer_diff < FOLD_LAYER_TOL && self.exact()
    }

    /// The fold is algebraically exact (checked in f64).
    pub fn exact(&self) -> bool {
        self.end_to_end_f64 < FOLD_EXACT_TOL
    }
}

impl fmt::Display for FoldReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "end_to_end={:.2e} (f64 {:.1e}, f32 noise {:.2e}) worst_layer={:.2e} ({}) over {} layers",
            self.end_to_end,
            self.end_to_end_f64,
            self.f32_noise,
            self.worst_layer_diff,
            self.worst_layer,
            self.layers
        )
    }
}

fn rel_diff(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    let scale = b.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let diff = a
        .data()
        .iter()
        .zip(b.data())
        .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

/// Compares `model` against its folded form, end to end on an `h x w` image
/// and layer by layer on random inputs of each conv's input shape.
pub fn fold_check(model: &Model, h: usize, w: usize, seed: u64) -> Result<FoldReport> {
    let folded = model.fold_bn()?;
    let img = random_image(h, w, seed)?;
    let a = model.forward(&img, ForwardOptions::default())?;
    let b = folded.forward(&img, ForwardOptions::default())?;
    let end_to_end = b.max_rel_diff(&a)?.into();

    let p64 = model.params()?.cast::<f64>();
    let folded64 = p64.fold(model.graph().units())?;
    let img64 = img.cast::<f64>();
    let a64 = forward::run(model.graph(), &mut Evaluator::new(&p64), &img64, false)?;
    let b64 = forward::run(
        folded.graph(),
        &mut Evaluator::new(&folded64),
        &img64,
        false,
    )?;
    let end_to_end_f64 = rel_diff(&b64, &a64);
    let f32_noise = rel_diff(&a.cast(), &a64);

    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let mut ev = Evaluator::new(model.params()?);
    let mut ev_f = Evaluator::new(folded.params()?);
    let mut worst = (String::new(), 0.0f64);
    let mut layers = 0;
    for (u, fu) in model
        .graph()
        .units()
        .into_iter()
        .zip(folded.graph().units())
    {
        if !u.bn {
            continue;
        }
        let s = u.spec;
        let x = Tensor::from_fn([1, s.in_ch, 5, 5], |_| rng.gen_range(-1.0f32..1.0))?;
        let y = ev.conv_unit(u, &x)?;
        let yf = ev_f.conv_unit(fu, &x)?;
        let d = f64::from(yf.max_rel_diff(&y)?);
        layers += 1;
        if d >= worst.1 {
            worst = (u.name.clone(), d);
        }
    }
    Ok(FoldReport {
        end_to_end,
        end_to_end_f64,
        f32_noise,
        worst_layer: worst.0,
        worst_layer_diff: worst.1,
        layers,
    })
}

/// Expected `(stage name, spatial size)` at a 512x512 input.
const TRACE_512: [(&str, usize); 6] = [
    ("tpm.stem", 256),
    ("tpm.s1", 128),
    ("tpm.s2", 64),
    ("tpm.s3", 32),
    ("tpm.s4", 16),
    ("sase.pool", 8),
];

pub fn trace_check(cfg: &VariantConfig) -> Result<CheckResult> {
    let m = Model::build(cfg.clone())?;
    let t = analyzer::trace_shapes(&m, 512, 512)?;
    let mut bad = Vec::new();
    for (name, hw) in TRACE_512 {
        match t.get(name) {
            Some(d) if d[2] == hw && d[3] == hw => {}
            other => bad.push(format!("{name}: {other:?}")),
        }
    }
    let detail = if bad.is_empty() {
        "256/128/64/32/16, SASE 8".to_string()
    } else {
        bad.join("; ")
    };
    Ok(CheckResult::new(
        format!("shape_trace_{}", cfg.variant),
        bad.is_empty(),
        detail,
    ))
}

fn split_concat_check(seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sizes = [3, 1, 4];
    let parts: Vec<Tensor<f32>> = sizes
        .iter()
        .map(|&c| Tensor::from_fn([2, c, 3, 2], |_| rng.gen()))
        .collect::<Result<_>>()?;
    let cat = tensor::concat_channels(&parts.iter().collect::<Vec<_>>())?;
    let back = tensor::split_channels(&cat, &sizes)?;
    let ok = back == parts;
    Ok(CheckResult::new(
        "split_concat_inverse",
        ok,
        "split(concat(A,B,C)) == (A,B,C)",
    ))
}

fn softmax_check(seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Tensor::from_fn([2, 3, 4, 7], |_| rng.gen_range(-20.0f32..20.0))?;
    let y = tensor::softmax_lastdim(&x);
    let row_err = y
        .data()
        .chunks(7)
        .map(|r| (r.iter().sum::<f32>() - 1.0).abs())
        .fold(0.0f32, f32::max);
    let shifted = tensor::softmax_lastdim(&x.map(|v| v + 3.5));
    let shift_err = shifted.max_abs_diff(&y)?;
    let big = tensor::softmax_lastdim(&Tensor::from_vec([1, 1, 1, 2], vec![1000.0f32, 1000.0])?);
    let ok = row_err < 1e-6 && shift_err < 1e-6 && big.data() == [0.5, 0.5];
    Ok(CheckResult::new(
        "softmax_properties",
        ok,
        format!("row_sum_err={row_err:.1e} shift_err={shift_err:.1e}"),
    ))
}

/// BN-fold equivalence and shape traces for all three variants, plus the
/// split/concat and softmax properties.
pub fn selftest(seed: u64) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    for cfg in [
        VariantConfig::tiny(),
        VariantConfig::small(),
        VariantConfig::base(),
    ] {
        let m = random_model(cfg.clone(), seed)?;
        let r = fold_check(&m, 64, 64, seed)?;
        out.push(CheckResult::new(
            format!("bn_fold_{}", cfg.variant),
            r.pass(),
            r.to_string(),
        ));
        out.push(trace_check(&cfg)?);
    }
    out.push(split_concat_check(seed)?);
    out.push(softmax_check(seed)?);
    Ok(out)
}

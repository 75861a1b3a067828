use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Dims, Tensor};

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Default relative-error tolerance.
pub const DEFAULT_TOL: f64 = 1e-4;
/// Draws closer than this to a ReLU6 kink (0 or 6) are rejected.
pub const KINK_MARGIN: f64 = 1e-3;
/// Multiple of `eps * sum|seed * out| / step` treated as finite-difference
/// rounding noise.
pub const NOISE_FACTOR: f64 = 4.0;
/// Step used to re-measure elements whose discrepancy at [`FD_STEP`] is
/// within rounding noise but whose gradient is too small to resolve there.
pub const FD_STEP_COARSE: f64 = 1e-3;

/// One perturbable input of a gradient check.
#[derive(Debug, Clone, PartialEq)]
pub struct GradInput {
    pub name: String,
    pub dims: Dims,
    pub low: f64,
    pub high: f64,
}

impl GradInput {
    /// Input sampled from `U(-1, 1)`.
    pub fn new(name: impl Into<String>, dims: Dims) -> Self {
        Self {
            name: name.into(),
            dims,
            low: -1.0,
            high: 1.0,
        }
    }

    pub fn range(mut self, low: f64, high: f64) -> Self {
        self.low = low;
        self.high = high;
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub op: String,
    pub max_rel_err: f64,
    /// `input[flat_index]` of the worst element.
    pub worst: String,
    /// Analytic and numeric derivative at the worst element.
    pub worst_values: (f64, f64),
    pub elements: usize,
    /// Elements failing `tol` whose analytic and numeric derivatives are
    /// both below `noise_floor`, i.e. indistinguishable from zero at this
    /// step size. Excluded from `max_rel_err`.
    pub noise_limited: usize,
    /// Elements re-measured at [`FD_STEP_COARSE`]: failing `tol`, nonzero,
    /// but with `|analytic - numeric|` inside `noise_floor`.
    pub remeasured: usize,
    pub noise_floor: f64,
    pub tol: f64,
    pub pass: bool,
}

impl std::fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} {:<32} max_rel_err={:.3e} tol={:.0e} elements={} noise_limited={} remeasured={} worst={} (analytic={:.3e} numeric={:.3e})",
            if self.pass { "PASS" } else { "FAIL" },
            self.op,
            self.max_rel_err,
            self.tol,
            self.elements,
            self.noise_limited,
            self.remeasured,
            self.worst,
            self.worst_values.0,
            self.worst_values.1
        )
    }
}

fn near_kink(v: f64) -> bool {
    v.abs() < KINK_MARGIN || (v - 6.0).abs() < KINK_MARGIN
}

fn sample(rng: &mut ChaCha8Rng, low: f64, high: f64) -> f64 {
    loop {
        let v = rng.gen_range(low..high);
        if !near_kink(v) {
            return v;
        }
    }
}

/// Seeded input tensors for `inputs`, drawn in order from one stream.
pub fn sample_inputs(inputs: &[GradInput], rng: &mut ChaCha8Rng) -> Result<Vec<Tensor<f64>>> {
    inputs
        .iter()
        .map(|i| Tensor::from_fn(i.dims, |_| sample(rng, i.low, i.high)))
        .collect()
}

fn run<F>(f: &F, names: &[GradInput], values: &[Tensor<f64>]) -> Result<(Tape, Var, Vec<Var>)>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = names
        .iter()
        .zip(values)
        .map(|(i, v)| tape.leaf(i.name.clone(), v.clone()))
        .collect();
    let out = f(&mut tape, &vars)?;
    Ok((tape, out, vars))
}

fn loss(out: &Tensor<f64>, seed: &Tensor<f64>) -> f64 {
    out.data().iter().zip(seed.data()).map(|(a, b)| a * b).sum()
}

/// Compares reverse-mode gradients of `<seed, f(inputs)>` against central
/// differences, element by element.
pub fn fd_gradcheck<F>(
    op: &str,
    inputs: &[GradInput],
    seed: u64,
    tol: f64,
    f: F,
) -> Result<GradcheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var> + Sync,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values = sample_inputs(inputs, &mut rng)?;
    let (tape, out, vars) = run(&f, inputs, &values)?;
    let out_dims = tape.value(out).dims();
    let seed_grad = Tensor::from_fn(out_dims, |_| rng.gen_range(-1.0..1.0))?;
    let grads = tape.backward(out, &seed_grad)?;
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| grads.wrt(v, &tape)).collect();
    if analytic.iter().any(|g| !g.all_finite()) {
        return Err(Error::NonFinite(op.to_string()));
    }
    let magnitude: f64 = tape
        .value(out)
        .data()
        .iter()
        .zip(seed_grad.data())
        .map(|(a, b)| (a * b).abs())
        .sum();
    let noise_floor = NOISE_FACTOR * f64::EPSILON * magnitude / FD_STEP;

    let coords: Vec<(usize, usize)> = values
        .iter()
        .enumerate()
        .flat_map(|(i, v)| (0..v.len()).map(move |j| (i, j)))
        .collect();
    let numeric_at = |i: usize, j: usize, h: f64| -> Result<f64> {
        let mut perturbed = values.clone();
        let x0 = values[i].data()[j];
        perturbed[i].data_mut()[j] = x0 + h;
        let (tp, op_, _) = run(&f, inputs, &perturbed)?;
        let plus = loss(tp.value(op_), &seed_grad);
        perturbed[i].data_mut()[j] = x0 - h;
        let (tm, om, _) = run(&f, inputs, &perturbed)?;
        let minus = loss(tm.value(om), &seed_grad);
        let numeric = (plus - minus) / (2.0 * h);
        if numeric.is_finite() {
            Ok(numeric)
        } else {
            Err(Error::NonFinite(op.to_string()))
        }
    };
    let rel = |a: f64, n: f64| (a - n).abs() / (a.abs() + n.abs() + 1e-8);
    let errors = coords
        .par_iter()
        .map(|&(i, j)| -> Result<(f64, f64, f64, bool)> {
            let a = analytic[i].data()[j];
            let n = numeric_at(i, j, FD_STEP)?;
            let e = rel(a, n);
            let zero = a.abs() <= noise_floor && n.abs() <= noise_floor;
            if e > tol && !zero && (a - n).abs() <= noise_floor {
                let n = numeric_at(i, j, FD_STEP_COARSE)?;
                return Ok((rel(a, n), a, n, true));
            }
            Ok((e, a, n, false))
        })
        .collect::<Result<Vec<_>>>()?;
    let remeasured = errors.iter().filter(|e| e.3).count();

    let noisy = |e: &(f64, f64, f64, bool)| {
        !e.3 && e.0 > tol && e.1.abs() <= noise_floor && e.2.abs() <= noise_floor
    };
    let noise_limited = errors.iter().filter(|e| noisy(e)).count();
    let (worst_idx, max_rel_err) =
        errors
            .iter()
            .enumerate()
            .filter(|(_, e)| !noisy(e))
            .fold(
                (0, 0.0),
                |best, (k, e)| if e.0 > best.1 { (k, e.0) } else { best },
            );
    let worst_values = errors.get(worst_idx).map_or((0.0, 0.0), |e| (e.1, e.2));
    let worst = coords
        .get(worst_idx)
        .map(|&(i, j)| format!("{}[{j}]", inputs[i].name))
        .unwrap_or_default();
    Ok(GradcheckReport {
        op: op.to_string(),
        max_rel_err,
        worst,
        worst_values,
        elements: coords.len(),
        noise_limited,
        remeasured,
        noise_floor,
        tol,
        pass: max_rel_err <= tol,
    })
}

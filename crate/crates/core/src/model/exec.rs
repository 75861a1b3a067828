use std::collections::HashMap;

use super::graph::{ConvUnit, ParamRole, ParamSlot};
use crate::autodiff::{vector_dims, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{self, BatchNormParams, Dims, Scalar, Tensor, BN_EPS};

/// Backend the forward pass is written against. Tensor evaluation, tape
/// recording and symbolic shape tracing all share one forward definition.
pub trait Exec {
    type Value: Clone;

    fn dims(&self, v: &Self::Value) -> Dims;
    fn conv_unit(&mut self, unit: &ConvUnit, x: &Self::Value) -> Result<Self::Value>;
    fn relu6(&mut self, x: &Self::Value) -> Result<Self::Value>;
    fn sigmoid(&mut self, x: &Self::Value) -> Result<Self::Value>;
    fn softmax_lastdim(&mut self, x: &Self::Value) -> Result<Self::Value>;
    fn add(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    fn hadamard(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    fn scale(&mut self, x: &Self::Value, factor: f64) -> Result<Self::Value>;
    fn adaptive_avg_pool(&mut self, x: &Self::Value, h: usize, w: usize) -> Result<Self::Value>;
    /// Bilinear, half-pixel centres.
    fn upsample(&mut self, x: &Self::Value, h: usize, w: usize) -> Result<Self::Value>;
    fn concat_channels(&mut self, parts: &[Self::Value]) -> Result<Self::Value>;
    fn split_channels(&mut self, x: &Self::Value, sizes: &[usize]) -> Result<Vec<Self::Value>>;
    fn matmul_batched(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    fn reshape(&mut self, x: &Self::Value, dims: Dims) -> Result<Self::Value>;
    fn transpose_last2(&mut self, x: &Self::Value) -> Result<Self::Value>;

    /// Names the module that subsequent non-conv work belongs to.
    fn scope(&mut self, _name: &str) {}
    /// Records a named intermediate.
    fn mark(&mut self, _name: &str, _v: &Self::Value) {}
}

/// Bound parameters, vectors stored as `(c, 1, 1, 1)` and dense weights as
/// `(out, in, 1, 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamTable<T: Scalar = f32> {
    tensors: HashMap<String, Tensor<T>>,
}

/// Rank-4 in-memory dims for a stored shape.
pub(crate) fn padded_dims(shape: &[usize]) -> Result<Dims> {
    if shape.is_empty() || shape.len() > 4 {
        return Err(Error::Argument(format!(
            "unsupported tensor rank {}",
            shape.len()
        )));
    }
    let mut d = [1; 4];
    d[..shape.len()].copy_from_slice(shape);
    Ok(d)
}

impl<T: Scalar> ParamTable<T> {
    pub fn new() -> Self {
        Self {
            tensors: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::State(format!("parameter '{name}' is not bound")))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn cast<U: Scalar>(&self) -> ParamTable<U> {
        ParamTable {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    /// Initial values of `slots`: Kaiming-uniform weights drawn in slot
    /// order, zero biases, identity batch norm.
    pub fn kaiming(slots: &[ParamSlot], rng: &mut impl rand::Rng) -> Result<Self> {
        let mut table = Self::new();
        for s in slots {
            let dims = padded_dims(&s.shape)?;
            let t = match s.role {
                ParamRole::Weight => {
                    let fan_in: usize = s.shape[1..].iter().product();
                    let bound = (6.0 / fan_in as f64).sqrt();
                    Tensor::from_fn(dims, |_| tensor::lit::<T>(rng.gen_range(-bound..bound)))?
                }
                ParamRole::Bias | ParamRole::BnBeta | ParamRole::BnMean => Tensor::zeros(dims)?,
                ParamRole::BnGamma | ParamRole::BnVar => Tensor::full(dims, T::one())?,
            };
            table.insert(s.name.clone(), t);
        }
        Ok(table)
    }

    pub fn bn_params(&self, unit: &ConvUnit) -> Result<BatchNormParams<T>> {
        let [g, b, m, v] = unit.bn_names();
        Ok(BatchNormParams {
            gamma: self.get(&g)?.data().to_vec(),
            beta: self.get(&b)?.data().to_vec(),
            running_mean: self.get(&m)?.data().to_vec(),
            running_var: self.get(&v)?.data().to_vec(),
            eps: tensor::lit(BN_EPS),
        })
    }

    /// Folds every BN of `units` into its conv. The result binds the folded graph.
    pub fn fold<'a>(&self, units: impl IntoIterator<Item = &'a ConvUnit>) -> Result<Self> {
        let mut out = Self::new();
        for u in units {
            let w = self.get(&u.weight_name())?;
            let bias = if u.spec.has_bias {
                Some(self.get(&u.bias_name())?.data())
            } else {
                None
            };
            if u.bn {
                let (fw, fb) = tensor::batchnorm_fold(&u.spec, w, bias, &self.bn_params(u)?)?;
                let folded = u.folded();
                out.insert(folded.weight_name(), fw);
                out.insert(
                    folded.bias_name(),
                    Tensor::from_vec(vector_dims(fb.len()), fb)?,
                );
            } else {
                out.insert(u.weight_name(), w.clone());
                if let Some(b) = bias {
                    out.insert(
                        u.bias_name(),
                        Tensor::from_vec(vector_dims(b.len()), b.to_vec())?,
                    );
                }
            }
        }
        Ok(out)
    }
}

impl<T: Scalar> Default for ParamTable<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Numeric evaluation against a bound parameter table.
pub struct Evaluator<'p, T: Scalar = f32> {
    params: &'p ParamTable<T>,
    marks: Option<Vec<(String, Dims)>>,
}

impl<'p, T: Scalar> Evaluator<'p, T> {
    pub fn new(params: &'p ParamTable<T>) -> Self {
        Self {
            params,
            marks: None,
        }
    }

    /// Also records the dims of every unit output and marked intermediate.
    pub fn recording(params: &'p ParamTable<T>) -> Self {
        Self {
            params,
            marks: Some(Vec::new()),
        }
    }

    pub fn take_marks(&mut self) -> Vec<(String, Dims)> {
        self.marks.take().unwrap_or_default()
    }

    fn record(&mut self, name: &str, dims: Dims) {
        if let Some(m) = &mut self.marks {
            m.push((name.to_string(), dims));
        }
    }
}

impl<T: Scalar> Exec for Evaluator<'_, T> {
    type Value = Tensor<T>;

    fn dims(&self, v: &Tensor<T>) -> Dims {
        v.dims()
    }

    fn conv_unit(&mut self, unit: &ConvUnit, x: &Tensor<T>) -> Result<Tensor<T>> {
        let w = self.params.get(&unit.weight_name())?;
        let bias = if unit.spec.has_bias {
            Some(self.params.get(&unit.bias_name())?.data())
        } else {
            None
        };
        let mut y = tensor::conv2d(x, &unit.spec, w, bias)?;
        if unit.bn {
            tensor::batch_norm_inplace(&mut y, &self.params.bn_params(unit)?)?;
        }
        if unit.relu6 {
            tensor::relu6_inplace(&mut y);
        }
        self.record(&unit.name, y.dims());
        Ok(y)
    }

    fn relu6(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(tensor::relu6(x))
    }

    fn sigmoid(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(tensor::sigmoid(x))
    }

    fn softmax_lastdim(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(tensor::softmax_lastdim(x))
    }

    fn add(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        tensor::add(a, b)
    }

    fn hadamard(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        tensor::hadamard(a, b)
    }

    fn scale(&mut self, x: &Tensor<T>, factor: f64) -> Result<Tensor<T>> {
        Ok(tensor::scale(x, tensor::lit(factor)))
    }

    fn adaptive_avg_pool(&mut self, x: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
        tensor::adaptive_avg_pool(x, h, w)
    }

    fn upsample(&mut self, x: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
        if (x.h(), x.w()) == (h, w) {
            return Ok(x.clone());
        }
        tensor::bilinear_upsample(x, h, w, false)
    }

    fn concat_channels(&mut self, parts: &[Tensor<T>]) -> Result<Tensor<T>> {
        tensor::concat_channels(&parts.iter().collect::<Vec<_>>())
    }

    fn split_channels(&mut self, x: &Tensor<T>, sizes: &[usize]) -> Result<Vec<Tensor<T>>> {
        tensor::split_channels(x, sizes)
    }

    fn matmul_batched(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        tensor::matmul_batched(a, b)
    }

    fn reshape(&mut self, x: &Tensor<T>, dims: Dims) -> Result<Tensor<T>> {
        x.clone().reshape(dims)
    }

    fn transpose_last2(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(tensor::transpose_last2(x))
    }

    fn mark(&mut self, name: &str, v: &Tensor<T>) {
        self.record(name, v.dims());
    }
}

/// Records the forward pass on an autodiff tape; every parameter is a leaf.
pub struct TapeExec<'t> {
    tape: &'t mut Tape,
    params: HashMap<String, Var>,
}

impl<'t> TapeExec<'t> {
    /// Registers every tensor of `table` as a named leaf.
    pub fn new(tape: &'t mut Tape, table: &ParamTable<f64>) -> Self {
        let mut names: Vec<&String> = table.tensors.keys().collect();
        names.sort();
        let params = names
            .into_iter()
            .map(|n| (n.clone(), tape.leaf(n.clone(), table.tensors[n].clone())))
            .collect();
        Self { tape, params }
    }

    /// Uses existing leaves, keyed by parameter name.
    pub fn with_leaves(tape: &'t mut Tape, params: HashMap<String, Var>) -> Self {
        Self { tape, params }
    }

    pub fn tape(&mut self) -> &mut Tape {
        self.tape
    }

    fn param(&self, name: &str) -> Result<Var> {
        self.params
            .get(name)
            .copied()
            .ok_or_else(|| Error::State(format!("parameter '{name}' is not bound")))
    }
}

impl Exec for TapeExec<'_> {
    type Value = Var;

    fn dims(&self, v: &Var) -> Dims {
        self.tape.value(*v).dims()
    }

    fn conv_unit(&mut self, unit: &ConvUnit, x: &Var) -> Result<Var> {
        let w = self.param(&unit.weight_name())?;
        let b = if unit.spec.has_bias {
            Some(self.param(&unit.bias_name())?)
        } else {
            None
        };
        let mut y = self.tape.conv2d(*x, unit.spec, w, b)?;
        if unit.bn {
            let [g, bt, m, v] = unit.bn_names();
            let (g, bt, m, v) = (
                self.param(&g)?,
                self.param(&bt)?,
                self.param(&m)?,
                self.param(&v)?,
            );
            y = self.tape.batch_norm(y, g, bt, m, v, BN_EPS)?;
        }
        if unit.relu6 {
            y = self.tape.relu6(y);
        }
        Ok(y)
    }

    fn relu6(&mut self, x: &Var) -> Result<Var> {
        Ok(self.tape.relu6(*x))
    }

    fn sigmoid(&mut self, x: &Var) -> Result<Var> {
        Ok(self.tape.sigmoid(*x))
    }

    fn softmax_lastdim(&mut self, x: &Var) -> Result<Var> {
        Ok(self.tape.softmax_lastdim(*x))
    }

    fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        self.tape.add(*a, *b)
    }

    fn hadamard(&mut self, a: &Var, b: &Var) -> Result<Var> {
        self.tape.hadamard(*a, *b)
    }

    fn scale(&mut self, x: &Var, factor: f64) -> Result<Var> {
        Ok(self.tape.scale(*x, factor))
    }

    fn adaptive_avg_pool(&mut self, x: &Var, h: usize, w: usize) -> Result<Var> {
        self.tape.adaptive_avg_pool(*x, h, w)
    }

    fn upsample(&mut self, x: &Var, h: usize, w: usize) -> Result<Var> {
        self.tape.bilinear_upsample(*x, h, w, false)
    }

    fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        self.tape.concat_channels(parts)
    }

    fn split_channels(&mut self, x: &Var, sizes: &[usize]) -> Result<Vec<Var>> {
        self.tape.split_channels(*x, sizes)
    }

    fn matmul_batched(&mut self, a: &Var, b: &Var) -> Result<Var> {
        self.tape.matmul_batched(*a, *b)
    }

    fn reshape(&mut self, x: &Var, dims: Dims) -> Result<Var> {
        self.tape.reshape(*x, dims)
    }

    fn transpose_last2(&mut self, x: &Var) -> Result<Var> {
        Ok(self.tape.transpose_last2(*x))
    }
}

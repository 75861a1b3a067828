use std::collections::BTreeMap;

use crate::error::{shape_err, Result};
use crate::tensor::{
    self, adaptive_avg_pool_backward, bilinear_upsample_backward, conv2d_grad_input,
    conv2d_grad_weight, BatchNormParams, ConvSpec, Dims, Tensor,
};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf(String),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        spec: ConvSpec,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Var,
        var: Var,
        eps: f64,
    },
    Relu6(Var),
    Sigmoid(Var),
    Softmax(Var),
    AvgPool(Var),
    Upsample {
        x: Var,
        align_corners: bool,
    },
    Add(Var, Var),
    Hadamard(Var, Var),
    Scale(Var, f64),
    Concat(Vec<Var>),
    Slice {
        x: Var,
        offset: usize,
    },
    Matmul(Var, Var),
    Reshape(Var),
    Transpose(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf(_) => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::BatchNorm { .. } => "batch_norm",
            Op::Relu6(_) => "relu6",
            Op::Sigmoid(_) => "sigmoid",
            Op::Softmax(_) => "softmax",
            Op::AvgPool(_) => "adaptive_avg_pool",
            Op::Upsample { .. } => "bilinear_upsample",
            Op::Add(..) => "add",
            Op::Hadamard(..) => "hadamard",
            Op::Scale(..) => "scale",
            Op::Concat(_) => "concat_channels",
            Op::Slice { .. } => "split_channels",
            Op::Matmul(..) => "matmul_batched",
            Op::Reshape(_) => "reshape",
            Op::Transpose(_) => "transpose_last2",
        }
    }
}

/// One recorded operation: what ran, on which earlier nodes, and its value.
#[derive(Debug, Clone)]
pub struct TapeNode {
    op: Op,
    value: Tensor<f64>,
}

impl TapeNode {
    pub fn op_name(&self) -> &'static str {
        self.op.name()
    }

    pub fn value(&self) -> &Tensor<f64> {
        &self.value
    }
}

/// Forward-order record of a 64-bit computation. Nodes only reference
/// earlier nodes, so reverse index order is a valid backward schedule.
#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<TapeNode>,
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor<f64>>>,
    leaves: Vec<(String, Var)>,
}

impl Gradients {
    /// Gradient with respect to any recorded value (zero-filled when the
    /// value does not influence the output).
    pub fn wrt(&self, v: Var, tape: &Tape) -> Tensor<f64> {
        self.grads[v.0]
            .clone()
            .unwrap_or_else(|| Tensor::raw(tape.value(v).dims(), vec![0.0; tape.value(v).len()]))
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f64>> {
        self.leaves
            .iter()
            .find(|(n, _)| n == name)
            .and_then(|(_, v)| self.grads[v.0].as_ref())
    }

    /// Leaf name to gradient. Leaves the output does not depend on get zeros.
    pub fn by_name(&self, tape: &Tape) -> BTreeMap<String, Tensor<f64>> {
        self.leaves
            .iter()
            .map(|(n, v)| (n.clone(), self.wrt(*v, tape)))
            .collect()
    }
}

fn accumulate(slot: &mut Option<Tensor<f64>>, g: Tensor<f64>) {
    match slot {
        Some(acc) => acc
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .for_each(|(a, &b)| *a += b),
        None => *slot = Some(g),
    }
}

fn vector(t: &Tensor<f64>) -> &[f64] {
    t.data()
}

fn bn_params(
    tape: &Tape,
    gamma: Var,
    beta: Var,
    mean: Var,
    var: Var,
    eps: f64,
) -> BatchNormParams<f64> {
    BatchNormParams {
        gamma: vector(tape.value(gamma)).to_vec(),
        beta: vector(tape.value(beta)).to_vec(),
        running_mean: vector(tape.value(mean)).to_vec(),
        running_var: vector(tape.value(var)).to_vec(),
        eps,
    }
}

/// Vector-valued parameters live on the tape as `(c, 1, 1, 1)` tensors.
pub fn vector_dims(c: usize) -> Dims {
    [c, 1, 1, 1]
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[TapeNode] {
        &self.nodes
    }

    fn push(&mut self, op: Op, value: Tensor<f64>) -> Var {
        self.nodes.push(TapeNode { op, value });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<f64> {
        &self.nodes[v.0].value
    }

    pub fn leaf(&mut self, name: impl Into<String>, value: Tensor<f64>) -> Var {
        self.push(Op::Leaf(name.into()), value)
    }

    pub fn conv2d(&mut self, x: Var, spec: ConvSpec, w: Var, b: Option<Var>) -> Result<Var> {
        let bias = b.map(|b| vector(self.value(b)));
        let y = tensor::conv2d(self.value(x), &spec, self.value(w), bias)?;
        Ok(self.push(Op::Conv2d { x, w, b, spec }, y))
    }

    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Var,
        var: Var,
        eps: f64,
    ) -> Result<Var> {
        let bn = bn_params(self, gamma, beta, mean, var, eps);
        let y = tensor::batch_norm(self.value(x), &bn)?;
        Ok(self.push(
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                var,
                eps,
            },
            y,
        ))
    }

    pub fn relu6(&mut self, x: Var) -> Var {
        let y = tensor::relu6(self.value(x));
        self.push(Op::Relu6(x), y)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let y = tensor::sigmoid(self.value(x));
        self.push(Op::Sigmoid(x), y)
    }

    pub fn softmax_lastdim(&mut self, x: Var) -> Var {
        let y = tensor::softmax_lastdim(self.value(x));
        self.push(Op::Softmax(x), y)
    }

    pub fn adaptive_avg_pool(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let y = tensor::adaptive_avg_pool(self.value(x), out_h, out_w)?;
        Ok(self.push(Op::AvgPool(x), y))
    }

    pub fn bilinear_upsample(
        &mut self,
        x: Var,
        out_h: usize,
        out_w: usize,
        align_corners: bool,
    ) -> Result<Var> {
        let y = tensor::bilinear_upsample(self.value(x), out_h, out_w, align_corners)?;
        Ok(self.push(Op::Upsample { x, align_corners }, y))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = tensor::add(self.value(a), self.value(b))?;
        Ok(self.push(Op::Add(a, b), y))
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = tensor::hadamard(self.value(a), self.value(b))?;
        Ok(self.push(Op::Hadamard(a, b), y))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let y = tensor::scale(self.value(x), factor);
        self.push(Op::Scale(x, factor), y)
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor<f64>> = parts.iter().map(|&p| self.value(p)).collect();
        let y = tensor::concat_channels(&values)?;
        Ok(self.push(Op::Concat(parts.to_vec()), y))
    }

    pub fn split_channels(&mut self, x: Var, sizes: &[usize]) -> Result<Vec<Var>> {
        let parts = tensor::split_channels(self.value(x), sizes)?;
        let mut offset = 0;
        Ok(parts
            .into_iter()
            .map(|p| {
                let c = p.c();
                let v = self.push(Op::Slice { x, offset }, p);
                offset += c;
                v
            })
            .collect())
    }

    pub fn matmul_batched(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = tensor::matmul_batched(self.value(a), self.value(b))?;
        Ok(self.push(Op::Matmul(a, b), y))
    }

    pub fn reshape(&mut self, x: Var, dims: Dims) -> Result<Var> {
        let y = self.value(x).clone().reshape(dims)?;
        Ok(self.push(Op::Reshape(x), y))
    }

    pub fn transpose_last2(&mut self, x: Var) -> Var {
        let y = tensor::transpose_last2(self.value(x));
        self.push(Op::Transpose(x), y)
    }

    /// Reverse sweep from `output`, seeded with `seed` (same dims as the
    /// output value).
    pub fn backward(&self, output: Var, seed: &Tensor<f64>) -> Result<Gradients> {
        let out_dims = self.value(output).dims();
        if seed.dims() != out_dims {
            return Err(shape_err(
                "seed",
                format!(
                    "seed {:?} does not match output {:?}",
                    seed.dims(),
                    out_dims
                ),
            ));
        }
        let mut grads: Vec<Option<Tensor<f64>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(seed.clone());
        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.backward_node(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        let leaves = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match &n.op {
                Op::Leaf(name) => Some((name.clone(), Var(i))),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads, leaves })
    }

    fn backward_node(
        &self,
        idx: usize,
        g: &Tensor<f64>,
        grads: &mut [Option<Tensor<f64>>],
    ) -> Result<()> {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf(_) => {}
            Op::Conv2d { x, w, b, spec } => {
                let xv = self.value(*x);
                accumulate(
                    &mut grads[x.0],
                    conv2d_grad_input(g, spec, self.value(*w), xv.dims()),
                );
                accumulate(&mut grads[w.0], conv2d_grad_weight(xv, g, spec));
                if let Some(b) = b {
                    let [n, c, _, _] = g.dims();
                    let mut db = vec![0.0; c];
                    for bn in 0..n {
                        for (o, acc) in db.iter_mut().enumerate() {
                            *acc += g.plane(bn, o).iter().sum::<f64>();
                        }
                    }
                    accumulate(&mut grads[b.0], Tensor::raw(vector_dims(c), db));
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                var,
                eps,
            } => {
                let xv = self.value(*x);
                let bn = bn_params(self, *gamma, *beta, *mean, *var, *eps);
                let [n, c, _, _] = xv.dims();
                let (mut dgamma, mut dbeta, mut dmean, mut dvar) =
                    (vec![0.0; c], vec![0.0; c], vec![0.0; c], vec![0.0; c]);
                let mut dx = vec![0.0; xv.len()];
                let hw = xv.h() * xv.w();
                for bn_i in 0..n {
                    for ch in 0..c {
                        let denom = bn.running_var[ch] + eps;
                        let inv = 1.0 / denom.sqrt();
                        let gm = bn.gamma[ch];
                        let mu = bn.running_mean[ch];
                        let base = (bn_i * c + ch) * hw;
                        let (mut sg, mut sgx) = (0.0, 0.0);
                        for i in 0..hw {
                            let gv = g.data()[base + i];
                            let xc = xv.data()[base + i] - mu;
                            dx[base + i] = gv * gm * inv;
                            sg += gv;
                            sgx += gv * xc;
                        }
                        dgamma[ch] += sgx * inv;
                        dbeta[ch] += sg;
                        dmean[ch] -= sg * gm * inv;
                        dvar[ch] += -0.5 * gm * sgx * inv / denom;
                    }
                }
                accumulate(&mut grads[x.0], Tensor::raw(xv.dims(), dx));
                accumulate(
                    &mut grads[gamma.0],
                    Tensor::raw(self.value(*gamma).dims(), dgamma),
                );
                accumulate(
                    &mut grads[beta.0],
                    Tensor::raw(self.value(*beta).dims(), dbeta),
                );
                accumulate(
                    &mut grads[mean.0],
                    Tensor::raw(self.value(*mean).dims(), dmean),
                );
                accumulate(
                    &mut grads[var.0],
                    Tensor::raw(self.value(*var).dims(), dvar),
                );
            }
            Op::Relu6(x) => {
                let xv = self.value(*x);
                let dx = xv
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&v, &gv)| if v > 0.0 && v < 6.0 { gv } else { 0.0 })
                    .collect();
                accumulate(&mut grads[x.0], Tensor::raw(xv.dims(), dx));
            }
            Op::Sigmoid(x) => {
                let dx = node
                    .value
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&s, &gv)| gv * s * (1.0 - s))
                    .collect();
                accumulate(&mut grads[x.0], Tensor::raw(node.value.dims(), dx));
            }
            Op::Softmax(x) => {
                let w = node.value.w();
                let mut dx = vec![0.0; node.value.len()];
                for ((s, gr), d) in node
                    .value
                    .data()
                    .chunks(w)
                    .zip(g.data().chunks(w))
                    .zip(dx.chunks_mut(w))
                {
                    let dot: f64 = s.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for i in 0..w {
                        d[i] = s[i] * (gr[i] - dot);
                    }
                }
                accumulate(&mut grads[x.0], Tensor::raw(node.value.dims(), dx));
            }
            Op::AvgPool(x) => {
                let dims = self.value(*x).dims();
                accumulate(&mut grads[x.0], adaptive_avg_pool_backward(g, dims));
            }
            Op::Upsample { x, align_corners } => {
                let dims = self.value(*x).dims();
                accumulate(
                    &mut grads[x.0],
                    bilinear_upsample_backward(g, dims, *align_corners),
                );
            }
            Op::Add(a, b) => {
                accumulate(&mut grads[a.0], g.clone());
                accumulate(&mut grads[b.0], g.clone());
            }
            Op::Hadamard(a, b) => {
                accumulate(&mut grads[a.0], tensor::hadamard(g, self.value(*b))?);
                accumulate(&mut grads[b.0], tensor::hadamard(g, self.value(*a))?);
            }
            Op::Scale(x, f) => accumulate(&mut grads[x.0], tensor::scale(g, *f)),
            Op::Concat(parts) => {
                let sizes: Vec<usize> = parts.iter().map(|p| self.value(*p).c()).collect();
                for (p, gp) in parts.iter().zip(tensor::split_channels(g, &sizes)?) {
                    accumulate(&mut grads[p.0], gp);
                }
            }
            Op::Slice { x, offset } => {
                let xv = self.value(*x);
                let [n, c, h, w] = xv.dims();
                let hw = h * w;
                let size = g.c();
                let mut dx = vec![0.0; xv.len()];
                for b in 0..n {
                    let dst = (b * c + offset) * hw;
                    dx[dst..dst + size * hw]
                        .copy_from_slice(&g.data()[b * size * hw..(b + 1) * size * hw]);
                }
                accumulate(&mut grads[x.0], Tensor::raw(xv.dims(), dx));
            }
            Op::Matmul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let da = tensor::matmul_batched(g, &tensor::transpose_last2(bv))?;
                let db = tensor::matmul_batched(&tensor::transpose_last2(av), g)?;
                accumulate(&mut grads[a.0], da);
                accumulate(&mut grads[b.0], db);
            }
            Op::Reshape(x) => {
                let dims = self.value(*x).dims();
                accumulate(&mut grads[x.0], g.clone().reshape(dims)?);
            }
            Op::Transpose(x) => accumulate(&mut grads[x.0], tensor::transpose_last2(g)),
        }
        Ok(())
    }
}

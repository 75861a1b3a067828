use super::report::LayerCost;
use crate::error::{shape_err, Error, Result};
use crate::model::{ConvUnit, Exec, UnitKind};
use crate::tensor::Dims;

/// [`Exec`] backend that propagates dims only and tallies costs.
#[derive(Debug, Default)]
pub struct ShapeTracer {
    layers: Vec<LayerCost>,
    trace: Vec<(String, Dims)>,
    scope: String,
}

impl ShapeTracer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn into_layers(self) -> Vec<LayerCost> {
        self.layers
    }

    pub fn into_trace(self) -> Vec<(String, Dims)> {
        self.trace
    }

    /// Adds matmul work to the current scope's record.
    fn charge(&mut self, flops: u64, out: Dims) {
        match self.layers.last_mut() {
            Some(l) if l.name == self.scope => {
                l.flops += flops;
                l.output = Some(out);
            }
            _ => self.layers.push(LayerCost {
                name: self.scope.clone(),
                params: 0,
                flops,
                output: Some(out),
            }),
        }
    }

    fn same(&self, a: &Dims, b: &Dims, op: &str) -> Result<Dims> {
        if a != b {
            return Err(shape_err("dims", format!("{op}: {a:?} vs {b:?}")));
        }
        Ok(*a)
    }
}

impl Exec for ShapeTracer {
    type Value = Dims;

    fn dims(&self, v: &Dims) -> Dims {
        *v
    }

    fn conv_unit(&mut self, unit: &ConvUnit, x: &Dims) -> Result<Dims> {
        let s = unit.spec;
        let [n, c, h, w] = *x;
        if c != s.in_ch {
            return Err(shape_err(
                "c",
                format!("{} expects {} channels, got {c}", unit.name, s.in_ch),
            ));
        }
        if unit.kind == UnitKind::Dense && (h, w) != (1, 1) {
            return Err(shape_err(
                "h",
                format!("{} is dense and needs 1x1 input", unit.name),
            ));
        }
        let (oh, ow) = s.output_hw(h, w).ok_or_else(|| {
            shape_err(
                "h",
                format!("{}: input {h}x{w} smaller than kernel", unit.name),
            )
        })?;
        let out = [n, s.out_ch, oh, ow];
        let macs = (n * s.out_ch * oh * ow * s.in_per_group() * s.kernel.0 * s.kernel.1) as u64;
        self.layers.push(LayerCost {
            name: unit.name.clone(),
            params: unit.learnable_params(),
            flops: macs,
            output: Some(out),
        });
        self.trace.push((unit.name.clone(), out));
        Ok(out)
    }

    fn relu6(&mut self, x: &Dims) -> Result<Dims> {
        Ok(*x)
    }

    fn sigmoid(&mut self, x: &Dims) -> Result<Dims> {
        Ok(*x)
    }

    fn softmax_lastdim(&mut self, x: &Dims) -> Result<Dims> {
        Ok(*x)
    }

    fn add(&mut self, a: &Dims, b: &Dims) -> Result<Dims> {
        self.same(a, b, "add")
    }

    fn hadamard(&mut self, a: &Dims, b: &Dims) -> Result<Dims> {
        self.same(a, b, "hadamard")
    }

    fn scale(&mut self, x: &Dims, _factor: f64) -> Result<Dims> {
        Ok(*x)
    }

    fn adaptive_avg_pool(&mut self, x: &Dims, h: usize, w: usize) -> Result<Dims> {
        if h == 0 || w == 0 || h > x[2] || w > x[3] {
            return Err(Error::Argument(format!(
                "cannot pool {}x{} to {h}x{w}",
                x[2], x[3]
            )));
        }
        Ok([x[0], x[1], h, w])
    }

    fn upsample(&mut self, x: &Dims, h: usize, w: usize) -> Result<Dims> {
        if h < x[2] || w < x[3] {
            return Err(Error::Argument(format!(
                "cannot upsample {}x{} to {h}x{w}",
                x[2], x[3]
            )));
        }
        Ok([x[0], x[1], h, w])
    }

    fn concat_channels(&mut self, parts: &[Dims]) -> Result<Dims> {
        let first = parts
            .first()
            .ok_or_else(|| shape_err("c", "empty concat"))?;
        for p in parts {
            if (p[0], p[2], p[3]) != (first[0], first[2], first[3]) {
                return Err(shape_err("h", format!("concat {first:?} with {p:?}")));
            }
        }
        Ok([
            first[0],
            parts.iter().map(|p| p[1]).sum(),
            first[2],
            first[3],
        ])
    }

    fn split_channels(&mut self, x: &Dims, sizes: &[usize]) -> Result<Vec<Dims>> {
        if sizes.iter().sum::<usize>() != x[1] || sizes.contains(&0) {
            return Err(shape_err(
                "c",
                format!("split {sizes:?} of {} channels", x[1]),
            ));
        }
        Ok(sizes.iter().map(|&c| [x[0], c, x[2], x[3]]).collect())
    }

    fn matmul_batched(&mut self, a: &Dims, b: &Dims) -> Result<Dims> {
        let [n, c, m, k] = *a;
        if (b[0], b[1]) != (n, c) || b[2] != k {
            return Err(shape_err("inner", format!("matmul {a:?} x {b:?}")));
        }
        let out = [n, c, m, b[3]];
        self.charge((n * c * m * k * b[3]) as u64, out);
        Ok(out)
    }

    fn reshape(&mut self, x: &Dims, dims: Dims) -> Result<Dims> {
        if x.iter().product::<usize>() != dims.iter().product::<usize>() {
            return Err(shape_err("dims", format!("reshape {x:?} to {dims:?}")));
        }
        Ok(dims)
    }

    fn transpose_last2(&mut self, x: &Dims) -> Result<Dims> {
        Ok([x[0], x[1], x[3], x[2]])
    }

    fn scope(&mut self, name: &str) {
        self.scope = name.to_string();
    }

    fn mark(&mut self, name: &str, v: &Dims) {
        self.trace.push((name.to_string(), *v));
    }
}

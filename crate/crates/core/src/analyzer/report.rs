use std::fmt::{self, Write};

use crate::model::Module;
use crate::tensor::Dims;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerCost {
    pub name: String,
    pub params: usize,
    /// Multiply-accumulates.
    pub flops: u64,
    pub output: Option<Dims>,
}

impl LayerCost {
    pub fn module(&self) -> Module {
        Module::of(&self.name)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostReport {
    pub layers: Vec<LayerCost>,
    /// Input size the FLOPs refer to; `None` for a params-only report.
    pub input: Option<(usize, usize)>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModuleShare {
    pub module: Module,
    pub params: usize,
    pub flops: u64,
    pub param_pct: f64,
    pub flop_pct: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Breakdown {
    pub rows: Vec<ModuleShare>,
}

impl Breakdown {
    pub fn get(&self, module: Module) -> ModuleShare {
        *self
            .rows
            .iter()
            .find(|r| r.module == module)
            .expect("every module has a row")
    }

    /// Module with the largest parameter share.
    pub fn largest_params(&self) -> Module {
        self.rows
            .iter()
            .max_by_key(|r| r.params)
            .map(|r| r.module)
            .unwrap_or(Module::Tpm)
    }
}

fn pct(part: f64, total: f64) -> f64 {
    if total == 0.0 {
        0.0
    } else {
        100.0 * part / total
    }
}

impl CostReport {
    pub(crate) fn from_layers(layers: Vec<LayerCost>, input: Option<(usize, usize)>) -> Self {
        Self { layers, input }
    }

    pub fn total_params(&self) -> usize {
        self.layers.iter().map(|l| l.params).sum()
    }

    pub fn total_flops(&self) -> u64 {
        self.layers.iter().map(|l| l.flops).sum()
    }

    pub fn module_totals(&self, module: Module) -> (usize, u64) {
        self.layers
            .iter()
            .filter(|l| l.module() == module)
            .fold((0, 0), |(p, f), l| (p + l.params, f + l.flops))
    }

    pub fn breakdown(&self) -> Breakdown {
        let (tp, tf) = (self.total_params() as f64, self.total_flops() as f64);
        Breakdown {
            rows: Module::ALL
                .iter()
                .map(|&module| {
                    let (params, flops) = self.module_totals(module);
                    ModuleShare {
                        module,
                        params,
                        flops,
                        param_pct: pct(params as f64, tp),
                        flop_pct: pct(flops as f64, tf),
                    }
                })
                .collect(),
        }
    }

    /// One line per layer: `name<TAB>params<TAB>flops<TAB>n,c,h,w`.
    pub fn to_tsv(&self) -> String {
        let mut s = String::new();
        for l in &self.layers {
            let shape = l
                .output
                .map(|d| format!("{},{},{},{}", d[0], d[1], d[2], d[3]))
                .unwrap_or_else(|| "-".into());
            let _ = writeln!(s, "{}\t{}\t{}\t{}", l.name, l.params, l.flops, shape);
        }
        s
    }

    /// Aligned per-layer table followed by totals and the module breakdown.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# FLOPs are multiply-accumulates (1 MAC = 1 FLOP)");
        let width = self
            .layers
            .iter()
            .map(|l| l.name.len())
            .max()
            .unwrap_or(5)
            .max(5);
        let _ = writeln!(
            s,
            "{:<width$}  {:>10}  {:>14}  output",
            "layer", "params", "flops"
        );
        for l in &self.layers {
            let shape = l
                .output
                .map(|d| format!("{}x{}x{}x{}", d[0], d[1], d[2], d[3]))
                .unwrap_or_default();
            let _ = writeln!(
                s,
                "{:<width$}  {:>10}  {:>14}  {}",
                l.name, l.params, l.flops, shape
            );
        }
        let _ = write!(s, "{self}");
        s
    }
}

impl fmt::Display for CostReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let input = self
            .input
            .map(|(h, w)| format!(" @{h}x{w}"))
            .unwrap_or_default();
        writeln!(
            f,
            "total params: {} ({:.3} M)",
            self.total_params(),
            self.total_params() as f64 / 1e6
        )?;
        if self.input.is_some() {
            writeln!(
                f,
                "total flops{input}: {} ({:.3} G MACs)",
                self.total_flops(),
                self.total_flops() as f64 / 1e9
            )?;
        }
        write!(f, "{}", self.breakdown())
    }
}

impl fmt::Display for Breakdown {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<6} {:>10} {:>8} {:>14} {:>8}",
            "module", "params", "params%", "flops", "flops%"
        )?;
        for r in &self.rows {
            writeln!(
                f,
                "{:<6} {:>10} {:>7.2}% {:>14} {:>7.2}%",
                r.module.label(),
                r.params,
                r.param_pct,
                r.flops,
                r.flop_pct
            )?;
        }
        Ok(())
    }
}

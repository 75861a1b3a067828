//! Network graph, variant configs and the forward pass.

pub mod config;
pub mod exec;
pub mod forward;
pub mod graph;

use std::collections::HashMap;
use std::sync::Arc;

pub use config::{
    mb, HeadKind, MbBlockCfg, Variant, VariantConfig, ADE20K_CLASSES, CLASSIFICATION_SASE_STRIDE,
    IMAGENET_CLASSES,
};
pub use exec::{Evaluator, Exec, ParamTable, TapeExec};
pub use graph::{
    ConvUnit, Graph, Head, MbBlock, Module, ParamRole, ParamSlot, Sim, TokenPyramid,
    TransformerBlock, UnitKind,
};

use crate::error::{BindError, Error, Result};
use crate::iofmt::WeightStore;
use crate::tensor::{Dims, Tensor};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ForwardOptions {
    /// Resize segmentation logits to the input resolution.
    pub upsample_to_input: bool,
}

/// A built network, optionally bound to weights. Immutable; cloning is cheap.
#[derive(Debug, Clone)]
pub struct Model {
    config: VariantConfig,
    graph: Graph,
    params: Option<Arc<ParamTable<f32>>>,
    folded: bool,
}

impl Model {
    pub fn build(config: VariantConfig) -> Result<Model> {
        config.validate()?;
        let graph = Graph::build(&config);
        Ok(Model {
            config,
            graph,
            params: None,
            folded: false,
        })
    }

    pub fn config(&self) -> &VariantConfig {
        &self.config
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn is_bound(&self) -> bool {
        self.params.is_some()
    }

    pub fn is_folded(&self) -> bool {
        self.folded
    }

    pub fn param_slots(&self) -> Vec<ParamSlot> {
        self.graph.slots()
    }

    pub fn params(&self) -> Result<&ParamTable<f32>> {
        self.params
            .as_deref()
            .ok_or_else(|| Error::State("model has no bound weights".into()))
    }

    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        self.config.check_input(h, w)
    }

    /// Binds `store`, which must cover the parameter slots exactly.
    pub fn bind(&self, store: &WeightStore) -> Result<Model> {
        let slots = self.param_slots();
        let mut err = BindError::default();
        let by_name: HashMap<&str, &ParamSlot> =
            slots.iter().map(|s| (s.name.as_str(), s)).collect();
        for entry in store.iter() {
            match by_name.get(entry.name.as_str()) {
                None => err.unexpected.push(entry.name.clone()),
                Some(slot) if slot.shape != entry.shape => err.mismatched.push(format!(
                    "{} (expected {:?}, got {:?})",
                    entry.name, slot.shape, entry.shape
                )),
                Some(_) => {}
            }
        }
        for s in &slots {
            if store.get(&s.name).is_none() {
                err.missing.push(s.name.clone());
            }
        }
        if !err.is_empty() {
            return Err(Error::Bind(err));
        }
        let mut table = ParamTable::new();
        for s in &slots {
            let e = store.get(&s.name).expect("presence checked above");
            table.insert(s.name.clone(), e.to_tensor()?);
        }
        Ok(self.with_params(table))
    }

    /// Same graph bound to `table` (assumed to cover the slots).
    pub fn with_params(&self, table: ParamTable<f32>) -> Model {
        Model {
            params: Some(Arc::new(table)),
            ..self.clone()
        }
    }

    /// Exports the bound weights in slot order.
    pub fn weights(&self) -> Result<WeightStore> {
        WeightStore::from_table(&self.param_slots(), self.params()?)
    }

    /// Equivalent model with every batch norm absorbed into its conv.
    pub fn fold_bn(&self) -> Result<Model> {
        let table = self.params()?.fold(self.graph.units())?;
        Ok(Model {
            config: self.config.clone(),
            graph: self.graph.folded(),
            params: Some(Arc::new(table)),
            folded: true,
        })
    }

    pub fn forward(&self, image: &Tensor<f32>, opts: ForwardOptions) -> Result<Tensor<f32>> {
        let mut e = Evaluator::new(self.params()?);
        forward::run(&self.graph, &mut e, image, opts.upsample_to_input)
    }

    /// Forward pass that also returns the dims of every unit output and
    /// named intermediate, in execution order.
    pub fn forward_traced(
        &self,
        image: &Tensor<f32>,
        opts: ForwardOptions,
    ) -> Result<(Tensor<f32>, Vec<(String, Dims)>)> {
        let mut e = Evaluator::recording(self.params()?);
        let out = forward::run(&self.graph, &mut e, image, opts.upsample_to_input)?;
        Ok((out, e.take_marks()))
    }

    pub fn forward_pyramid(&self, image: &Tensor<f32>) -> Result<Vec<Tensor<f32>>> {
        let [_, _, h, w] = image.dims();
        self.check_input(h, w)?;
        let mut e = Evaluator::new(self.params()?);
        forward::forward_pyramid(&self.graph, &mut e, image)
    }
}

#[cfg(test)]
mod tests;

//! Forward and backward computation for the two network architectures, with
//! hooks to quantize any weight or signal group in the forward pass.

pub mod fit;
pub mod graph;
pub mod lstm;
pub mod ops;
pub mod sequence;

pub use graph::{
    accel_preset, image_preset, lstm_param_count, preset, GroupRef, GroupScope, InputShape,
    LayerSpec, NetworkGraph,
};
pub use lstm::{lstm_step, LstmState};
pub use ops::{conv2d_forward, maxpool2d_forward, softmax};
pub use sequence::{backward_sequence, collect_signal_stats, forward_sequence, Mode};

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quantizer::QuantSpec;

/// Uniform init range for fresh weights.
const INIT_RANGE: f64 = 0.1;

/// Full-precision master weights plus the quantization specs attached to
/// them. Training always updates the master weights; quantization is a
/// forward-pass view.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MasterModel {
    pub graph: NetworkGraph,
    /// Flat weight arrays keyed by weight-group name.
    pub weights: BTreeMap<String, Vec<f64>>,
    pub weight_specs: BTreeMap<String, QuantSpec>,
    pub signal_specs: BTreeMap<String, QuantSpec>,
    pub rng_seed: u64,
}

impl MasterModel {
    /// Fresh model with weights drawn uniformly from [-0.1, 0.1], seeded.
    /// Groups are initialised in graph order so the draw is reproducible.
    pub fn new(graph: NetworkGraph, seed: u64) -> Result<Self> {
        graph.validate()?;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut weights = BTreeMap::new();
        for name in graph.weight_groups() {
            let len = graph.weight_group_len(&name)?;
            let vals: Vec<f64> = (0..len).map(|_| rng.gen_range(-INIT_RANGE..INIT_RANGE)).collect();
            weights.insert(name, vals);
        }
        Ok(MasterModel {
            graph,
            weights,
            weight_specs: BTreeMap::new(),
            signal_specs: BTreeMap::new(),
            rng_seed: seed,
        })
    }

    /// Checks weight-array shapes against the graph and that values are finite.
    pub fn validate(&self) -> Result<()> {
        self.graph.validate()?;
        let names = self.graph.weight_groups();
        if names.len() != self.weights.len() {
            return Err(Error::Shape(format!(
                "model has {} weight groups, graph expects {}",
                self.weights.len(),
                names.len()
            )));
        }
        for name in &names {
            let want = self.graph.weight_group_len(name)?;
            let arr = self
                .weights
                .get(name)
                .ok_or_else(|| Error::UnknownGroup(format!("w:{name}")))?;
            if arr.len() != want {
                return Err(Error::Shape(format!(
                    "group '{name}' has {} values, graph expects {want}",
                    arr.len()
                )));
            }
            if arr.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!("group '{name}' contains non-finite weights")));
            }
        }
        for (name, spec) in &self.weight_specs {
            if !self.weights.contains_key(name) {
                return Err(Error::UnknownGroup(format!("w:{name}")));
            }
            if spec.delta <= 0.0 || !spec.delta.is_finite() {
                return Err(Error::Numeric(format!("group '{name}' has bad step size")));
            }
        }
        let signal_names = self.graph.signal_groups();
        for name in self.signal_specs.keys() {
            if !signal_names.contains(name) {
                return Err(Error::UnknownGroup(format!("s:{name}")));
            }
        }
        Ok(())
    }

    pub fn spec_for(&self, group: &GroupRef) -> Option<&QuantSpec> {
        match group.scope {
            GroupScope::Weight => self.weight_specs.get(&group.name),
            GroupScope::Signal => self.signal_specs.get(&group.name),
        }
    }

    pub fn set_spec(&mut self, group: &GroupRef, spec: QuantSpec) -> Result<()> {
        match group.scope {
            GroupScope::Weight => {
                if !self.weights.contains_key(&group.name) {
                    return Err(Error::UnknownGroup(group.to_string()));
                }
                self.weight_specs.insert(group.name.clone(), spec);
            }
            GroupScope::Signal => {
                if !self.graph.signal_groups().contains(&group.name) {
                    return Err(Error::UnknownGroup(group.to_string()));
                }
                self.signal_specs.insert(group.name.clone(), spec);
            }
        }
        Ok(())
    }

    pub fn clear_specs(&mut self) {
        self.weight_specs.clear();
        self.signal_specs.clear();
    }

    /// The quantized view of one weight group (the group itself when it has
    /// no spec).
    pub fn quantized_group(&self, name: &str) -> Result<Vec<f64>> {
        let arr = self
            .weights
            .get(name)
            .ok_or_else(|| Error::UnknownGroup(format!("w:{name}")))?;
        Ok(match self.weight_specs.get(name) {
            Some(spec) => arr.iter().map(|&v| crate::quantizer::quantize_value(v, spec)).collect(),
            None => arr.clone(),
        })
    }
}

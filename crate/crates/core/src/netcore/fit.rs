//! Fits quantization specs for model groups: L2 search for weights, fixed
//! grids for bounded activations, stats-driven L2 search for unbounded ones.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::netcore::sequence::collect_signal_stats;
use crate::netcore::{GroupRef, GroupScope, MasterModel};
use crate::quantizer::{
    fixed_step_size, optimize_relu_step_size, optimize_step_size, optimize_symmetric_step_size,
    ActivationStats, GroupKind, QuantSpec,
};
use crate::sensitivity::BitAllocation;
use crate::gesturedata::SequenceSample;

/// Signal groups whose delta needs collected activations (everything that is
/// not a fixed bounded grid).
fn needs_stats(kind: GroupKind) -> bool {
    matches!(kind, GroupKind::SignalUnbounded | GroupKind::Weight)
}

fn fit_signal_spec(
    kind: GroupKind,
    name: &str,
    bits: u8,
    stats: Option<&ActivationStats>,
) -> Result<QuantSpec> {
    match kind {
        GroupKind::SignalBoundedUnit | GroupKind::SignalBoundedSym => {
            fixed_step_size(kind, bits, name)
        }
        GroupKind::SignalUnbounded => {
            let stats = stats.ok_or_else(|| Error::MissingSpec(format!("s:{name} stats")))?;
            optimize_relu_step_size(stats, bits)
        }
        // Signed unbounded signals (raw accelerometer input) use the same
        // symmetric fitted grid as weights.
        GroupKind::Weight => {
            let stats = stats.ok_or_else(|| Error::MissingSpec(format!("s:{name} stats")))?;
            optimize_symmetric_step_size(stats, bits)
        }
    }
}

/// Fits the spec for a single group at `bits`. Signal groups that need
/// activation statistics run one float forward pass over `train`.
pub fn fit_group_spec(
    model: &MasterModel,
    group: &GroupRef,
    bits: u8,
    train: &[SequenceSample],
    stats_seed: u64,
) -> Result<QuantSpec> {
    match group.scope {
        GroupScope::Weight => {
            let values = model
                .weights
                .get(&group.name)
                .ok_or_else(|| Error::UnknownGroup(group.to_string()))?;
            optimize_step_size(&group.name, values, bits)
        }
        GroupScope::Signal => {
            let kind = model.graph.signal_kind(&group.name)?;
            let stats = if needs_stats(kind) {
                let mut collectors = BTreeMap::new();
                collectors
                    .insert(group.name.clone(), ActivationStats::new(group.name.clone(), stats_seed));
                collect_signal_stats(model, train, &mut collectors)?;
                Some(collectors.remove(&group.name).expect("collector"))
            } else {
                None
            };
            fit_signal_spec(kind, &group.name, bits, stats.as_ref())
        }
    }
}

/// Fits and attaches specs for every group in the allocation. All signal
/// groups that need statistics share a single collection pass over `train`.
pub fn fit_allocation(
    model: &mut MasterModel,
    alloc: &BitAllocation,
    train: &[SequenceSample],
    stats_seed: u64,
) -> Result<()> {
    // Validate group names up front so nothing is half-attached on error.
    for group in alloc.bits.keys() {
        match group.scope {
            GroupScope::Weight => {
                if !model.weights.contains_key(&group.name) {
                    return Err(Error::UnknownGroup(group.to_string()));
                }
            }
            GroupScope::Signal => {
                model.graph.signal_kind(&group.name)?;
            }
        }
    }

    let mut collectors: BTreeMap<String, ActivationStats> = BTreeMap::new();
    for (idx, (group, _)) in alloc.bits.iter().enumerate() {
        if group.scope == GroupScope::Signal && needs_stats(model.graph.signal_kind(&group.name)?) {
            collectors.insert(
                group.name.clone(),
                ActivationStats::new(group.name.clone(), stats_seed.wrapping_add(idx as u64)),
            );
        }
    }
    if !collectors.is_empty() {
        collect_signal_stats(model, train, &mut collectors)?;
    }

    for (group, &bits) in &alloc.bits {
        let spec = match group.scope {
            GroupScope::Weight => {
                optimize_step_size(&group.name, &model.weights[&group.name], bits)?
            }
            GroupScope::Signal => {
                let kind = model.graph.signal_kind(&group.name)?;
                fit_signal_spec(kind, &group.name, bits, collectors.get(&group.name))?
            }
        };
        model.set_spec(group, spec)?;
    }
    Ok(())
}

/// Refits the step sizes of the given weight groups against the current
/// master weights, keeping each group's existing bit-width.
pub fn refit_weight_specs(model: &mut MasterModel, groups: &[String]) -> Result<()> {
    for name in groups {
        let bits = model
            .weight_specs
            .get(name)
            .ok_or_else(|| Error::MissingSpec(format!("w:{name}")))?
            .bits;
        let spec = optimize_step_size(name, &model.weights[name], bits)?;
        model.weight_specs.insert(name.clone(), spec);
    }
    Ok(())
}

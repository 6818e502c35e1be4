//! Layerwise sensitivity analysis: quantize one weight or signal group at a
//! time (directly and with retraining), assemble mixed-bit allocations, and
//! greedily escalate bit-widths until a target miss rate is met.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gesturedata::DatasetSplit;
use crate::modelstore::{cost_report, save_packed, CostReport};
use crate::netcore::fit::{fit_allocation, fit_group_spec};
use crate::netcore::{GroupRef, MasterModel, Mode, NetworkGraph};
use crate::trainer::{evaluate, retrain_quantized, RetrainPlan, TrainConfig};

/// Default per-group retraining budget for sensitivity tables.
pub const SENSITIVITY_RETRAIN_EPOCHS: usize = 20;

/// Per-group bit-width assignment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BitAllocation {
    pub bits: BTreeMap<GroupRef, u8>,
}

impl BitAllocation {
    /// Same bit-width for every weight and signal group of the graph.
    pub fn uniform(graph: &NetworkGraph, bits: u8) -> Self {
        BitAllocation {
            bits: graph.all_groups().into_iter().map(|g| (g, bits)).collect(),
        }
    }

    /// Parses `w:NAME=bits,s:NAME=bits,…`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut bits = BTreeMap::new();
        for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (group, value) = part
                .split_once('=')
                .ok_or_else(|| Error::InvalidArg(format!("allocation entry '{part}' needs '='")))?;
            let group: GroupRef = group.trim().parse()?;
            let value: u8 = value
                .trim()
                .parse()
                .map_err(|_| Error::InvalidArg(format!("bad bit-width in '{part}'")))?;
            if !(2..=16).contains(&value) {
                return Err(Error::InvalidArg(format!("bits must be in 2..=16 in '{part}'")));
            }
            bits.insert(group, value);
        }
        Ok(BitAllocation { bits })
    }

    /// Checks that the allocation covers every group of the graph and names
    /// nothing else.
    pub fn validate_complete(&self, graph: &NetworkGraph) -> Result<()> {
        for group in graph.all_groups() {
            if !self.bits.contains_key(&group) {
                return Err(Error::MissingSpec(group.to_string()));
            }
        }
        let valid = graph.all_groups();
        for group in self.bits.keys() {
            if !valid.contains(group) {
                return Err(Error::UnknownGroup(group.to_string()));
            }
        }
        Ok(())
    }
}

impl fmt::Display for BitAllocation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.bits.iter().map(|(g, b)| format!("{g}={b}")).collect();
        write!(f, "{}", parts.join(","))
    }
}

/// Row category in a sensitivity report.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RowKind {
    Weight,
    Signal,
    /// Joint quantization of every group at once.
    All,
}

impl RowKind {
    pub fn label(self) -> &'static str {
        match self {
            RowKind::Weight => "weight",
            RowKind::Signal => "signal",
            RowKind::All => "all",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityRow {
    pub kind: RowKind,
    pub group: String,
    pub bits: u8,
    pub direct_miss: f64,
    pub retrained_miss: Option<f64>,
}

/// Per-group miss-rate table: direct quantization vs retrained, per
/// bit-width, against the float baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityReport {
    pub baseline_float_miss: f64,
    pub seed: u64,
    pub dataset_id: String,
    pub rows: Vec<SensitivityRow>,
}

impl SensitivityReport {
    pub fn to_csv(&self) -> String {
        let mut out = format!(
            "# baseline_float_miss={},seed={},dataset={}\n",
            self.baseline_float_miss, self.seed, self.dataset_id
        );
        out.push_str("kind,group,bits,direct_miss,retrained_miss\n");
        for row in &self.rows {
            let retrained =
                row.retrained_miss.map(|m| format!("{m}")).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                row.kind.label(),
                row.group,
                row.bits,
                row.direct_miss,
                retrained
            ));
        }
        out
    }

    /// Aligned table, one block per bit-width, weight and signal sections
    /// with direct/retrain rows.
    pub fn to_text(&self) -> String {
        let mut bits_values: Vec<u8> = self.rows.iter().map(|r| r.bits).collect();
        bits_values.sort_unstable();
        bits_values.dedup();
        let mut out = format!(
            "baseline float miss: {:.2}%  (dataset {}, seed {})\n",
            self.baseline_float_miss, self.dataset_id, self.seed
        );
        for bits in bits_values {
            out.push_str(&format!("\n[{bits}-bit]\n"));
            for kind in [RowKind::Weight, RowKind::Signal] {
                let rows: Vec<&SensitivityRow> = self
                    .rows
                    .iter()
                    .filter(|r| r.bits == bits && (r.kind == kind || (kind == RowKind::Signal && r.kind == RowKind::All)))
                    .collect();
                if rows.is_empty() {
                    continue;
                }
                let header = match kind {
                    RowKind::Weight => "WEIGHT",
                    _ => "SIGNAL",
                };
                let width = rows.iter().map(|r| r.group.len()).max().unwrap_or(6).max(7) + 2;
                out.push_str(&format!("{:<9}", header));
                for r in &rows {
                    out.push_str(&format!("{:>width$}", r.group, width = width));
                }
                out.push('\n');
                out.push_str(&format!("{:<9}", "Direct"));
                for r in &rows {
                    out.push_str(&format!("{:>width$.2}", r.direct_miss, width = width));
                }
                out.push('\n');
                if rows.iter().any(|r| r.retrained_miss.is_some()) {
                    out.push_str(&format!("{:<9}", "Retrain"));
                    for r in &rows {
                        match r.retrained_miss {
                            Some(m) => out.push_str(&format!("{:>width$.2}", m, width = width)),
                            None => out.push_str(&format!("{:>width$}", "-", width = width)),
                        }
                    }
                    out.push('\n');
                }
            }
        }
        out
    }
}

/// Miss rate on the test split with exactly one group quantized: delta fitted
/// on the training split, every other group left float.
pub fn direct_sensitivity(
    model: &MasterModel,
    group: &GroupRef,
    bits: u8,
    split: &DatasetSplit,
    stats_seed: u64,
) -> Result<f64> {
    let mut probe = model.clone();
    probe.clear_specs();
    let spec = fit_group_spec(&probe, group, bits, &split.train, stats_seed)?;
    probe.set_spec(group, spec)?;
    evaluate(&probe, &split.test, Mode::Quantized { strict: false })
}

/// As [`direct_sensitivity`], then fine-tunes with only that group quantized
/// and returns the post-retrain test miss rate.
pub fn retrain_sensitivity(
    model: &MasterModel,
    group: &GroupRef,
    bits: u8,
    split: &DatasetSplit,
    config: &TrainConfig,
    epochs: usize,
) -> Result<f64> {
    let mut probe = model.clone();
    probe.clear_specs();
    let spec = fit_group_spec(&probe, group, bits, &split.train, config.seed)?;
    probe.set_spec(group, spec)?;
    let plan = RetrainPlan {
        target: BTreeMap::from([(group.clone(), bits)]),
        epochs,
        config: config.clone(),
    };
    Ok(retrain_quantized(&mut probe, &plan, split)?.test_miss)
}

/// Quantizes every group per the allocation, fine-tunes jointly, and reports
/// the direct and retrained test miss rates. The input model is not touched.
fn quantize_and_retrain(
    model: &MasterModel,
    alloc: &BitAllocation,
    split: &DatasetSplit,
    config: &TrainConfig,
    epochs: usize,
) -> Result<(MasterModel, f64, f64)> {
    let mut quantized = model.clone();
    quantized.clear_specs();
    fit_allocation(&mut quantized, alloc, &split.train, config.seed)?;
    let direct = evaluate(&quantized, &split.test, Mode::Quantized { strict: false })?;
    let plan = RetrainPlan { target: alloc.bits.clone(), epochs, config: config.clone() };
    let retrained = retrain_quantized(&mut quantized, &plan, split)?.test_miss;
    Ok((quantized, direct, retrained))
}

/// Builds the full sensitivity table: every weight group and every signal
/// group of the graph, per bit-width, with direct and (optionally) retrained
/// columns. `include_all` appends the joint-quantization column.
#[allow(clippy::too_many_arguments)]
pub fn run_sweep(
    model: &MasterModel,
    split: &DatasetSplit,
    bits_list: &[u8],
    config: &TrainConfig,
    retrain: bool,
    retrain_epochs: usize,
    include_all: bool,
    dataset_id: &str,
) -> Result<SensitivityReport> {
    let baseline = evaluate(model, &split.test, Mode::Float)?;
    let mut rows = Vec::new();
    for &bits in bits_list {
        let groups: Vec<(RowKind, GroupRef)> = model
            .graph
            .weight_groups()
            .into_iter()
            .map(|g| (RowKind::Weight, GroupRef::weight(g)))
            .chain(
                model
                    .graph
                    .signal_groups()
                    .into_iter()
                    .map(|g| (RowKind::Signal, GroupRef::signal(g))),
            )
            .collect();
        for (kind, group) in groups {
            let direct = direct_sensitivity(model, &group, bits, split, config.seed)?;
            let retrained = if retrain {
                Some(retrain_sensitivity(model, &group, bits, split, config, retrain_epochs)?)
            } else {
                None
            };
            rows.push(SensitivityRow {
                kind,
                group: group.name,
                bits,
                direct_miss: direct,
                retrained_miss: retrained,
            });
        }
        if include_all {
            let alloc = BitAllocation::uniform(&model.graph, bits);
            let (direct, retrained) = if retrain {
                let (_, d, r) = quantize_and_retrain(model, &alloc, split, config, retrain_epochs)?;
                (d, Some(r))
            } else {
                let mut probe = model.clone();
                probe.clear_specs();
                fit_allocation(&mut probe, &alloc, &split.train, config.seed)?;
                (evaluate(&probe, &split.test, Mode::Quantized { strict: false })?, None)
            };
            rows.push(SensitivityRow {
                kind: RowKind::All,
                group: "All".into(),
                bits,
                direct_miss: direct,
                retrained_miss: retrained,
            });
        }
    }
    Ok(SensitivityReport {
        baseline_float_miss: baseline,
        seed: config.seed,
        dataset_id: dataset_id.into(),
        rows,
    })
}

/// Outcome of a joint quantization run.
#[derive(Debug, Clone)]
pub struct FullQuantOutcome {
    pub model: MasterModel,
    pub direct_test_miss: f64,
    pub test_miss: f64,
    pub packed: Vec<u8>,
    pub cost: CostReport,
}

/// Quantizes every group per the allocation (which must cover the whole
/// graph), retrains jointly, packs the result, and accounts for its cost.
pub fn full_quantization(
    model: &MasterModel,
    alloc: &BitAllocation,
    split: &DatasetSplit,
    config: &TrainConfig,
    epochs: usize,
    frame_rate_hz: u32,
) -> Result<FullQuantOutcome> {
    alloc.validate_complete(&model.graph)?;
    let (quantized, direct, retrained) = quantize_and_retrain(model, alloc, split, config, epochs)?;
    let packed = save_packed(&quantized)?;
    let cost = cost_report(&quantized, frame_rate_hz)?;
    Ok(FullQuantOutcome {
        model: quantized,
        direct_test_miss: direct,
        test_miss: retrained,
        packed,
        cost,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EscalationStep {
    pub group: GroupRef,
    pub bits: u8,
    pub miss_before: f64,
    pub miss_after: f64,
}

#[derive(Debug, Clone)]
pub struct EscalationOutcome {
    pub allocation: BitAllocation,
    pub trace: Vec<EscalationStep>,
    pub reached: bool,
    pub final_miss: f64,
}

/// Greedy bit escalation: starting from `initial`, repeatedly bump the group
/// whose one-bit increment lowers the miss rate the most, until the target is
/// met or every group sits at `max_bits`.
///
/// Candidates are ranked by direct quantization (no retraining) on the
/// validation split; callers retrain the chosen allocation afterwards.
pub fn escalate_bits(
    model: &MasterModel,
    initial: &BitAllocation,
    split: &DatasetSplit,
    target_miss: f64,
    max_bits: u8,
    stats_seed: u64,
) -> Result<EscalationOutcome> {
    initial.validate_complete(&model.graph)?;
    let direct_eval = |alloc: &BitAllocation| -> Result<f64> {
        let mut probe = model.clone();
        probe.clear_specs();
        fit_allocation(&mut probe, alloc, &split.train, stats_seed)?;
        evaluate(&probe, &split.valid, Mode::Quantized { strict: true })
    };

    let mut alloc = initial.clone();
    let mut miss = direct_eval(&alloc)?;
    let mut trace = Vec::new();
    let order = model.graph.all_groups();
    loop {
        if miss <= target_miss {
            return Ok(EscalationOutcome { allocation: alloc, trace, reached: true, final_miss: miss });
        }
        let mut best: Option<(f64, GroupRef)> = None;
        for group in &order {
            let bits = alloc.bits[group];
            if bits >= max_bits {
                continue;
            }
            let mut candidate = alloc.clone();
            candidate.bits.insert(group.clone(), bits + 1);
            let m = direct_eval(&candidate)?;
            if best.as_ref().map_or(true, |(bm, _)| m < *bm) {
                best = Some((m, group.clone()));
            }
        }
        let Some((new_miss, group)) = best else {
            // Every group is maxed out; hand back the best we found.
            return Ok(EscalationOutcome { allocation: alloc, trace, reached: false, final_miss: miss });
        };
        let new_bits = alloc.bits[&group] + 1;
        trace.push(EscalationStep { group: group.clone(), bits: new_bits, miss_before: miss, miss_after: new_miss });
        alloc.bits.insert(group, new_bits);
        miss = new_miss;
    }
}

/// Escalation trace as CSV.
pub fn trace_to_csv(trace: &[EscalationStep]) -> String {
    let mut out = String::from("group,bits,miss_before,miss_after\n");
    for step in trace {
        out.push_str(&format!("{},{},{},{}\n", step.group, step.bits, step.miss_before, step.miss_after));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gesturedata::{stratified_split, synth_accel};
    use crate::netcore::accel_preset;
    use crate::trainer::train_float;

    fn trained_setup() -> (MasterModel, DatasetSplit) {
        let samples = synth_accel(4, 16, (8, 10), 0.05, 5);
        let split = stratified_split(samples, [0.5, 0.25, 0.25], 3).unwrap();
        let mut model = MasterModel::new(accel_preset(8), 2).unwrap();
        let config = TrainConfig {
            initial_lr: 1.0,
            final_lr: 1e-3,
            max_epochs: 40,
            patience: 8,
            batch_streams: 4,
            ..TrainConfig::default()
        };
        train_float(&mut model, &split, &config).unwrap();
        (model, split)
    }

    #[test]
    fn allocation_parse_and_validate() {
        let g = accel_preset(4);
        let alloc = BitAllocation::parse("w:In-L1=2, w:L1=2, w:L1-Out=3, s:In=2, s:L1=4").unwrap();
        alloc.validate_complete(&g).unwrap();
        assert_eq!(alloc.bits[&GroupRef::signal("L1")], 4);

        let missing = BitAllocation::parse("w:In-L1=2").unwrap();
        assert!(matches!(missing.validate_complete(&g), Err(Error::MissingSpec(_))));
        let unknown = BitAllocation::parse("w:Bogus=2").unwrap();
        let mut full = BitAllocation::uniform(&g, 2);
        full.bits.extend(unknown.bits);
        assert!(matches!(full.validate_complete(&g), Err(Error::UnknownGroup(_))));
        assert!(BitAllocation::parse("w:L1=1").is_err());
        assert!(BitAllocation::parse("L1=2").is_err());
    }

    #[test]
    fn sixteen_bit_direct_sensitivity_matches_baseline() {
        let (model, split) = trained_setup();
        let baseline = evaluate(&model, &split.test, Mode::Float).unwrap();
        for group in [GroupRef::weight("L1"), GroupRef::signal("In")] {
            let miss = direct_sensitivity(&model, &group, 16, &split, 0).unwrap();
            assert!(
                (miss - baseline).abs() <= 0.5 + 1e-9,
                "{group}: {miss} vs baseline {baseline}"
            );
        }
    }

    #[test]
    fn on_grid_weights_quantize_to_identity() {
        let (mut model, split) = trained_setup();
        let baseline = evaluate(&model, &split.test, Mode::Float).unwrap();
        // Force a group onto a ternary grid; direct sensitivity at 2 bits
        // must then reproduce the baseline exactly.
        let delta = 0.25f64;
        for v in model.weights.get_mut("L1-Out").unwrap().iter_mut() {
            *v = (*v / delta).round().clamp(-1.0, 1.0) * delta;
        }
        let baseline_grid = evaluate(&model, &split.test, Mode::Float).unwrap();
        let miss = direct_sensitivity(&model, &GroupRef::weight("L1-Out"), 2, &split, 0).unwrap();
        assert_eq!(miss, baseline_grid);
        let _ = baseline;
    }

    #[test]
    fn sweep_has_complete_group_structure() {
        let (model, split) = trained_setup();
        let config = TrainConfig::default();
        let report =
            run_sweep(&model, &split, &[2], &config, false, 0, false, "synth").unwrap();
        let weights: Vec<&str> = report
            .rows
            .iter()
            .filter(|r| r.kind == RowKind::Weight)
            .map(|r| r.group.as_str())
            .collect();
        assert_eq!(weights, vec!["In-L1", "L1", "L1-Out"]);
        let signals: Vec<&str> = report
            .rows
            .iter()
            .filter(|r| r.kind == RowKind::Signal)
            .map(|r| r.group.as_str())
            .collect();
        assert_eq!(signals, vec!["In", "L1"]);
        assert!(report.rows.iter().all(|r| r.retrained_miss.is_none()));
        assert!(report.rows.iter().all(|r| (0.0..=100.0).contains(&r.direct_miss)));
        let csv = report.to_csv();
        assert!(csv.contains("weight,In-L1,2,"));
        let text = report.to_text();
        assert!(text.contains("WEIGHT") && text.contains("SIGNAL"));
    }

    #[test]
    fn retraining_never_regresses_beyond_tolerance() {
        let (model, split) = trained_setup();
        let config = TrainConfig {
            initial_lr: 1.0,
            final_lr: 1e-3,
            max_epochs: 40,
            patience: 8,
            batch_streams: 4,
            ..TrainConfig::default()
        };
        for group in model.graph.all_groups() {
            let direct = direct_sensitivity(&model, &group, 2, &split, 0).unwrap();
            let retrained =
                retrain_sensitivity(&model, &group, 2, &split, &config, SENSITIVITY_RETRAIN_EPOCHS)
                    .unwrap();
            assert!(
                retrained <= direct + 0.5,
                "{group}: retrained {retrained} worse than direct {direct}"
            );
        }
    }

    #[test]
    fn escalation_bumps_the_destroyed_signal_group_first() {
        // Everything near-lossless at 6 bits except the LSTM signal group at
        // 2 bits, which wrecks the hidden state; the greedy loop must raise
        // that group first and recover.
        let samples = synth_accel(4, 24, (10, 14), 0.05, 7);
        let split = stratified_split(samples, [0.5, 0.25, 0.25], 3).unwrap();
        let mut model = MasterModel::new(accel_preset(8), 4).unwrap();
        let config = TrainConfig {
            initial_lr: 1.0,
            final_lr: 1e-3,
            max_epochs: 40,
            patience: 8,
            batch_streams: 4,
            ..TrainConfig::default()
        };
        train_float(&mut model, &split, &config).unwrap();
        let baseline = evaluate(&model, &split.valid, Mode::Float).unwrap();

        let mut alloc = BitAllocation::uniform(&model.graph, 6);
        alloc.bits.insert(GroupRef::signal("L1"), 2);
        let out = escalate_bits(&model, &alloc, &split, baseline, 7, 0).unwrap();
        assert!(out.reached, "target {baseline} not reached: final {}", out.final_miss);
        assert_eq!(out.trace[0].group, GroupRef::signal("L1"));
        assert!(out.trace[0].miss_before > out.trace[0].miss_after);
    }

    #[test]
    fn escalation_returns_met_target_unchanged() {
        let (model, split) = trained_setup();
        let alloc = BitAllocation::uniform(&model.graph, 4);
        let out = escalate_bits(&model, &alloc, &split, 100.0, 6, 0).unwrap();
        assert!(out.reached);
        assert!(out.trace.is_empty());
        assert_eq!(out.allocation, alloc);
    }

    #[test]
    fn escalation_trace_is_bounded_and_deterministic() {
        let (model, split) = trained_setup();
        let alloc = BitAllocation::uniform(&model.graph, 2);
        let max_bits = 3;
        // An unreachable target forces the loop to exhaust every increment.
        let out = escalate_bits(&model, &alloc, &split, -1.0, max_bits, 0).unwrap();
        let groups = model.graph.all_groups().len();
        assert!(out.trace.len() <= (max_bits as usize - 2) * groups);
        let again = escalate_bits(&model, &alloc, &split, -1.0, max_bits, 0).unwrap();
        assert_eq!(out.trace, again.trace);
        assert!(!out.reached);
        let csv = trace_to_csv(&out.trace);
        assert!(csv.starts_with("group,bits,"));
    }
}

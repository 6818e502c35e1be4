//! Sequence training with truncated BPTT, AdaDelta or Nesterov-momentum
//! updates, plateau-halved learning rate, and best-validation early stopping;
//! plus the retrain loop that fine-tunes in the quantization domain.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gesturedata::{DatasetSplit, SequenceSample};
use crate::netcore::fit::refit_weight_specs;
use crate::netcore::sequence::backward_cached;
use crate::netcore::{forward_sequence, GroupRef, GroupScope, MasterModel, Mode};

/// Backward horizon: sequences longer than this only unroll the recurrence
/// over the final 64 steps (shorter sequences are processed whole).
pub const BPTT_TRUNCATION: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OptimizerKind {
    #[serde(rename = "adadelta")]
    AdaDelta,
    #[serde(rename = "nesterov")]
    Nesterov,
}

/// Training hyperparameters. The learning rate halves whenever validation
/// fails to improve for `patience` consecutive evaluations, and training
/// stops once it drops below `final_lr`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub initial_lr: f64,
    pub final_lr: f64,
    pub momentum: f64,
    pub optimizer: OptimizerKind,
    pub adadelta_rho: f64,
    pub adadelta_eps: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub batch_streams: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            initial_lr: 1e-5,
            final_lr: 1e-8,
            momentum: 0.9,
            optimizer: OptimizerKind::AdaDelta,
            adadelta_rho: 0.95,
            adadelta_eps: 1e-6,
            max_epochs: 100,
            patience: 5,
            seed: 0,
            batch_streams: 8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.final_lr > 0.0 && self.final_lr <= self.initial_lr) {
            return Err(Error::InvalidArg("need 0 < final_lr <= initial_lr".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidArg("momentum must be in [0, 1)".into()));
        }
        if self.patience == 0 {
            return Err(Error::InvalidArg("patience must be at least 1".into()));
        }
        Ok(())
    }
}

/// One learning-curve row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_miss: f64,
    pub lr: f64,
}

/// What a training run produced. The model itself is updated in place and
/// holds the weights of the best validation epoch, not the last one.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub best_valid_miss: Option<f64>,
    pub best_epoch: Option<usize>,
    pub curve: Vec<CurveRow>,
}

/// Quantized-domain fine-tuning request: which groups train quantized, at
/// which bit-widths, for how many epochs.
#[derive(Debug, Clone)]
pub struct RetrainPlan {
    pub target: BTreeMap<GroupRef, u8>,
    pub epochs: usize,
    pub config: TrainConfig,
}

#[derive(Debug, Clone)]
pub struct RetrainOutcome {
    pub train: TrainOutcome,
    pub test_miss: f64,
}

/// Per-group AdaDelta accumulators.
#[derive(Debug, Clone, Default)]
pub struct AdaDeltaState {
    pub sq_grad: Vec<f64>,
    pub sq_delta: Vec<f64>,
}

impl AdaDeltaState {
    pub fn zeros(len: usize) -> Self {
        AdaDeltaState { sq_grad: vec![0.0; len], sq_delta: vec![0.0; len] }
    }
}

/// One AdaDelta step: decays the squared-gradient average, returns the raw
/// weight delta (already negated), and decays the squared-delta average with
/// it. Callers scale the delta by the scheduled learning rate.
pub fn adadelta_update(grad: &[f64], state: &mut AdaDeltaState, rho: f64, eps: f64) -> Vec<f64> {
    debug_assert_eq!(grad.len(), state.sq_grad.len());
    let mut delta = Vec::with_capacity(grad.len());
    for (k, &g) in grad.iter().enumerate() {
        state.sq_grad[k] = rho * state.sq_grad[k] + (1.0 - rho) * g * g;
        let d = -((state.sq_delta[k] + eps).sqrt() / (state.sq_grad[k] + eps).sqrt()) * g;
        state.sq_delta[k] = rho * state.sq_delta[k] + (1.0 - rho) * d * d;
        delta.push(d);
    }
    delta
}

/// Nesterov-momentum step (lookahead form): returns the negated update so the
/// caller applies `w += lr * delta`.
pub fn nesterov_update(grad: &[f64], velocity: &mut [f64], momentum: f64) -> Vec<f64> {
    debug_assert_eq!(grad.len(), velocity.len());
    let mut delta = Vec::with_capacity(grad.len());
    for (k, &g) in grad.iter().enumerate() {
        velocity[k] = momentum * velocity[k] + g;
        delta.push(-(g + momentum * velocity[k]));
    }
    delta
}

/// Miss classification rate of a sample set, in percent. Prediction is the
/// argmax of the final-frame posterior; ties resolve to the lowest index.
pub fn evaluate(model: &MasterModel, samples: &[SequenceSample], mode: Mode) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Data("cannot evaluate an empty split".into()));
    }
    let mut missed = 0usize;
    for s in samples {
        let p = forward_sequence(model, s, mode)?;
        let mut arg = 0usize;
        for (k, &v) in p.iter().enumerate() {
            if v > p[arg] {
                arg = k;
            }
        }
        if arg != s.label {
            missed += 1;
        }
    }
    Ok(missed as f64 / samples.len() as f64 * 100.0)
}

enum OptState {
    AdaDelta(AdaDeltaState),
    Nesterov(Vec<f64>),
}

fn run_training(
    model: &mut MasterModel,
    split: &DatasetSplit,
    config: &TrainConfig,
    mode: Mode,
    refit_groups: &[String],
    max_epochs: usize,
) -> Result<TrainOutcome> {
    config.validate()?;
    if max_epochs > 0 && split.train.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    if max_epochs > 0 && split.valid.is_empty() {
        return Err(Error::Data("validation split is empty".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut opt: BTreeMap<String, OptState> = BTreeMap::new();
    for (name, arr) in &model.weights {
        let state = match config.optimizer {
            OptimizerKind::AdaDelta => OptState::AdaDelta(AdaDeltaState::zeros(arr.len())),
            OptimizerKind::Nesterov => OptState::Nesterov(vec![0.0; arr.len()]),
        };
        opt.insert(name.clone(), state);
    }

    // Best-so-far snapshot; the starting weights count as "seen" so a run
    // that never improves validation hands back the initial model.
    let mut best: Option<(f64, usize, BTreeMap<String, Vec<f64>>, BTreeMap<String, crate::quantizer::QuantSpec>)> =
        None;
    if !split.valid.is_empty() {
        let miss0 = evaluate(model, &split.valid, mode)?;
        best = Some((miss0, 0, model.weights.clone(), model.weight_specs.clone()));
    }

    let mut curve = Vec::new();
    let mut lr = config.initial_lr;
    let mut stall = 0usize;
    let batch_size = config.batch_streams.max(1);
    let mut order: Vec<usize> = (0..split.train.len()).collect();

    for epoch in 1..=max_epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(batch_size) {
            let scale = 1.0 / batch.len() as f64;
            let mut acc: Option<BTreeMap<String, Vec<f64>>> = None;
            for &idx in batch {
                let s = &split.train[idx];
                let (loss, grads) =
                    backward_cached(model, s, mode, s.label, scale, BPTT_TRUNCATION)?;
                loss_sum += loss;
                match acc.as_mut() {
                    None => acc = Some(grads),
                    Some(acc) => {
                        for (name, g) in grads {
                            let a = acc.get_mut(&name).expect("same groups");
                            for (av, gv) in a.iter_mut().zip(&g) {
                                *av += gv;
                            }
                        }
                    }
                }
            }
            let acc = acc.expect("non-empty batch");
            for (name, grad) in &acc {
                let weights = model.weights.get_mut(name).expect("group");
                let delta = match opt.get_mut(name).expect("opt state") {
                    OptState::AdaDelta(state) => {
                        adadelta_update(grad, state, config.adadelta_rho, config.adadelta_eps)
                    }
                    OptState::Nesterov(v) => nesterov_update(grad, v, config.momentum),
                };
                for (w, d) in weights.iter_mut().zip(&delta) {
                    *w += lr * d;
                }
            }
        }

        if !refit_groups.is_empty() {
            refit_weight_specs(model, refit_groups)?;
        }
        let train_loss = loss_sum / split.train.len() as f64;
        let valid_miss = evaluate(model, &split.valid, mode)?;
        curve.push(CurveRow { epoch, train_loss, valid_miss, lr });

        let improved = best.as_ref().map_or(true, |(m, ..)| valid_miss < *m);
        if improved {
            best = Some((valid_miss, epoch, model.weights.clone(), model.weight_specs.clone()));
            stall = 0;
        } else {
            stall += 1;
            if stall >= config.patience {
                lr /= 2.0;
                stall = 0;
                if lr < config.final_lr {
                    break;
                }
            }
        }
    }

    let (best_valid_miss, best_epoch) = match best {
        Some((miss, epoch, weights, specs)) => {
            model.weights = weights;
            model.weight_specs = specs;
            (Some(miss), Some(epoch))
        }
        None => (None, None),
    };
    Ok(TrainOutcome { best_valid_miss, best_epoch, curve })
}

/// Full-precision training with early stopping; the model ends at the best
/// validation weights seen.
pub fn train_float(
    model: &mut MasterModel,
    split: &DatasetSplit,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    run_training(model, split, config, Mode::Float, &[], config.max_epochs)
}

/// Fine-tunes in the quantization domain: forward passes quantize the plan's
/// groups, gradients flow straight through onto the master weights, and the
/// weight-group step sizes are refit after every epoch. Returns the training
/// outcome plus the quantized miss rate on the test split.
pub fn retrain_quantized(
    model: &mut MasterModel,
    plan: &RetrainPlan,
    split: &DatasetSplit,
) -> Result<RetrainOutcome> {
    let mut refit = Vec::new();
    for (group, &bits) in &plan.target {
        let spec = model
            .spec_for(group)
            .ok_or_else(|| Error::MissingSpec(group.to_string()))?;
        if spec.bits != bits {
            return Err(Error::InvalidArg(format!(
                "group {group} fitted at {} bits but plan says {bits}",
                spec.bits
            )));
        }
        if group.scope == GroupScope::Weight {
            refit.push(group.name.clone());
        }
    }
    let mode = Mode::Quantized { strict: false };
    let train = run_training(model, split, &plan.config, mode, &refit, plan.epochs)?;
    let test_miss = evaluate(model, &split.test, mode)?;
    Ok(RetrainOutcome { train, test_miss })
}

/// Learning curve as CSV.
pub fn curve_to_csv(curve: &[CurveRow]) -> String {
    let mut out = String::from("epoch,train_loss,valid_miss,lr\n");
    for row in curve {
        out.push_str(&format!("{},{},{},{}\n", row.epoch, row.train_loss, row.valid_miss, row.lr));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gesturedata::{stratified_split, synth_accel, FrameData};
    use crate::netcore::accel_preset;
    use crate::netcore::fit::fit_allocation;
    use crate::sensitivity::BitAllocation;

    fn small_split(classes: usize, per_class: usize, seed: u64) -> DatasetSplit {
        let samples = synth_accel(classes, per_class, (10, 14), 0.05, seed);
        stratified_split(samples, [0.5, 0.25, 0.25], seed).unwrap()
    }

    fn quick_config(epochs: usize) -> TrainConfig {
        TrainConfig {
            initial_lr: 1.0,
            final_lr: 1e-3,
            max_epochs: epochs,
            patience: 8,
            batch_streams: 4,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn adadelta_zero_gradient() {
        let mut state = AdaDeltaState::zeros(2);
        state.sq_grad = vec![0.4, 0.8];
        state.sq_delta = vec![0.2, 0.1];
        let delta = adadelta_update(&[0.0, 0.0], &mut state, 0.95, 1e-6);
        assert_eq!(delta, vec![0.0, 0.0]);
        assert!((state.sq_grad[0] - 0.38).abs() < 1e-12);
        assert!((state.sq_delta[1] - 0.095).abs() < 1e-12);
    }

    #[test]
    fn adadelta_first_step_value() {
        let mut state = AdaDeltaState::zeros(1);
        let delta = adadelta_update(&[1.0], &mut state, 0.95, 1e-6);
        assert!((delta[0] + 4.4721e-3).abs() < 1e-6, "got {}", delta[0]);
    }

    #[test]
    fn adadelta_settles_under_constant_gradient() {
        let mut state = AdaDeltaState::zeros(1);
        let mut deltas = Vec::with_capacity(1000);
        for _ in 0..1000 {
            deltas.push(adadelta_update(&[1.0], &mut state, 0.95, 1e-6)[0]);
        }
        // The step magnitude grows monotonically and its per-step change
        // vanishes: the rule settles instead of oscillating.
        for w in deltas.windows(2) {
            assert!(w[1] < 0.0 && w[1] <= w[0] + 1e-15);
        }
        let rel = (deltas[999] - deltas[998]).abs() / deltas[999].abs();
        assert!(rel < 1e-3, "per-step relative change {rel} has not settled");
    }

    #[test]
    fn separable_two_class_task_trains() {
        let split = small_split(2, 20, 3);
        let mut model = MasterModel::new(accel_preset(8), 1).unwrap();
        let out = train_float(&mut model, &split, &quick_config(50)).unwrap();
        assert!(
            out.best_valid_miss.unwrap() < 5.0,
            "validation miss {:?} after {} epochs",
            out.best_valid_miss,
            out.curve.len()
        );
    }

    #[test]
    fn zero_epochs_returns_initial_model() {
        let split = small_split(2, 4, 0);
        let mut model = MasterModel::new(accel_preset(4), 5).unwrap();
        let before = model.weights.clone();
        let cfg = TrainConfig { max_epochs: 0, patience: usize::MAX, ..quick_config(0) };
        let out = train_float(&mut model, &split, &cfg).unwrap();
        assert_eq!(model.weights, before);
        assert!(out.curve.is_empty());
    }

    #[test]
    fn identical_seeds_identical_curves() {
        let run = || {
            let split = small_split(2, 8, 4);
            let mut model = MasterModel::new(accel_preset(4), 2).unwrap();
            train_float(&mut model, &split, &quick_config(6)).unwrap().curve
        };
        let a = run();
        let b = run();
        assert_eq!(a, b);
        assert!(!a.is_empty());
    }

    #[test]
    fn empty_dataset_is_an_error() {
        let split = DatasetSplit {
            train: vec![],
            valid: vec![],
            test: vec![],
            ratios: [0.6, 0.2, 0.2],
            seed: 0,
        };
        let mut model = MasterModel::new(accel_preset(4), 0).unwrap();
        assert!(train_float(&mut model, &split, &quick_config(3)).is_err());
        assert!(evaluate(&model, &[], Mode::Float).is_err());
    }

    #[test]
    fn evaluate_memorized_and_uniform() {
        // Constant-bias model: always predicts class 5.
        let mut model = MasterModel::new(accel_preset(4), 0).unwrap();
        for arr in model.weights.values_mut() {
            arr.iter_mut().for_each(|v| *v = 0.0);
        }
        let dense = model.weights.get_mut("L1-Out").unwrap();
        let len = dense.len();
        dense[len - 8 + 5] = 1.0; // bias of class 5
        let same_class: Vec<_> = synth_accel(8, 4, (6, 6), 0.0, 1)
            .into_iter()
            .filter(|s| s.label == 5)
            .collect();
        assert_eq!(same_class.len(), 4);
        assert_eq!(evaluate(&model, &same_class, Mode::Float).unwrap(), 0.0);

        // All-zero weights on a balanced set: uniform posterior, argmax ties
        // resolve to class 0, so exactly (K-1)/K of samples miss.
        let mut zero = MasterModel::new(accel_preset(4), 0).unwrap();
        for arr in zero.weights.values_mut() {
            arr.iter_mut().for_each(|v| *v = 0.0);
        }
        let balanced = synth_accel(8, 2, (6, 6), 0.0, 2);
        assert_eq!(evaluate(&zero, &balanced, Mode::Float).unwrap(), 87.5);
    }

    #[test]
    fn empty_retrain_plan_matches_train_float() {
        let mk_model = || MasterModel::new(accel_preset(4), 8).unwrap();
        let split = small_split(2, 8, 9);
        let mut float_model = mk_model();
        let cfg = quick_config(4);
        train_float(&mut float_model, &split, &cfg).unwrap();

        let mut retrain_model = mk_model();
        let plan = RetrainPlan { target: BTreeMap::new(), epochs: 4, config: cfg };
        retrain_quantized(&mut retrain_model, &plan, &split).unwrap();
        assert_eq!(float_model.weights, retrain_model.weights);
    }

    #[test]
    fn sixteen_bit_retrain_is_near_lossless() {
        let split = small_split(4, 12, 11);
        let mut model = MasterModel::new(accel_preset(8), 3).unwrap();
        let cfg = quick_config(30);
        train_float(&mut model, &split, &cfg).unwrap();
        let float_miss = evaluate(&model, &split.test, Mode::Float).unwrap();

        let alloc = BitAllocation::uniform(&model.graph, 16);
        fit_allocation(&mut model, &alloc, &split.train, 0).unwrap();
        let plan = RetrainPlan {
            target: alloc.bits.clone(),
            epochs: 5,
            config: quick_config(5),
        };
        let graph_before = model.graph.clone();
        let signal_specs_before = model.signal_specs.clone();
        let out = retrain_quantized(&mut model, &plan, &split).unwrap();
        assert!(
            (out.test_miss - float_miss).abs() <= 1.0 + 1e-9,
            "16-bit retrain {} vs float {float_miss}",
            out.test_miss
        );
        // Retraining touches only weight values and weight-group step sizes.
        assert_eq!(model.graph, graph_before);
        assert_eq!(model.signal_specs, signal_specs_before);
    }

    #[test]
    fn two_bit_retrain_recovers_half_the_direct_gap() {
        let samples = synth_accel(8, 20, (16, 20), 0.05, 17);
        let split = stratified_split(samples, [0.6, 0.2, 0.2], 4).unwrap();
        let mut model = MasterModel::new(accel_preset(16), 6).unwrap();
        let config = TrainConfig {
            initial_lr: 1.0,
            final_lr: 1e-3,
            max_epochs: 60,
            patience: 5,
            batch_streams: 8,
            ..TrainConfig::default()
        };
        train_float(&mut model, &split, &config).unwrap();
        let float_miss = evaluate(&model, &split.test, Mode::Float).unwrap();

        let alloc = BitAllocation::uniform(&model.graph, 2);
        let mut quantized = model.clone();
        quantized.clear_specs();
        fit_allocation(&mut quantized, &alloc, &split.train, 0).unwrap();
        let direct = evaluate(&quantized, &split.test, Mode::Quantized { strict: true }).unwrap();
        assert!(direct > float_miss + 10.0, "direct {direct} barely degrades {float_miss}");

        let plan = RetrainPlan {
            target: alloc.bits.clone(),
            epochs: 30,
            config: TrainConfig { max_epochs: 30, seed: 1, ..config },
        };
        let retrained = retrain_quantized(&mut quantized, &plan, &split).unwrap().test_miss;
        let half_gap = (direct - float_miss) / 2.0;
        assert!(
            retrained <= direct - half_gap,
            "retrained {retrained} recovers less than half of the {direct} - {float_miss} gap"
        );
    }

    #[test]
    fn curve_csv_shape() {
        let rows = vec![CurveRow { epoch: 1, train_loss: 0.5, valid_miss: 12.5, lr: 1.0 }];
        let csv = curve_to_csv(&rows);
        assert!(csv.starts_with("epoch,train_loss,valid_miss,lr\n"));
        assert!(csv.contains("1,0.5,12.5,1"));
    }

    #[test]
    fn truncation_only_affects_long_sequences() {
        let model = MasterModel::new(accel_preset(4), 2).unwrap();
        let short = synth_accel(2, 1, (10, 10), 0.05, 3).remove(0);
        let (_, full) = backward_cached(&model, &short, Mode::Float, 0, 1.0, usize::MAX).unwrap();
        let (_, trunc) = backward_cached(&model, &short, Mode::Float, 0, 1.0, BPTT_TRUNCATION).unwrap();
        assert_eq!(full, trunc);
        // A horizon shorter than the sequence cuts the early-step
        // contributions out of the recurrent gradients.
        let rows: Vec<[f64; 3]> = (0..10).map(|t| [0.5, (t % 3) as f64 * 0.4, 1.0]).collect();
        let long = crate::gesturedata::SequenceSample {
            id: "long".into(),
            label: 0,
            frames: FrameData::Accel(rows),
        };
        let (_, full) = backward_cached(&model, &long, Mode::Float, 0, 1.0, usize::MAX).unwrap();
        let (_, trunc) = backward_cached(&model, &long, Mode::Float, 0, 1.0, 2).unwrap();
        assert_ne!(full, trunc);
    }
}

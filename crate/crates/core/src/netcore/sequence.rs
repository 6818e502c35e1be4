//! Sequence-level forward and backward passes over a [`MasterModel`].
//!
//! In quantized mode every weight group with a spec is quantized once per
//! pass and every signal group with a spec is quantized per timestep; the
//! backward pass treats all quantizers as identity (straight-through), so
//! gradients always land on the full-precision master weights.

use std::borrow::Cow;
use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::gesturedata::{FrameData, SequenceSample};
use crate::netcore::graph::{InputShape, LayerSpec, NetworkGraph};
use crate::netcore::lstm::{
    lstm_step_backward, lstm_step_traced, LstmGrads, LstmState, LstmStepTrace, LstmWeights,
    SignalQuant,
};
use crate::netcore::ops::{
    conv2d_backward, conv2d_forward, cross_entropy, dense_backward, dense_forward,
    maxpool2d_backward, maxpool2d_forward, relu_backward, relu_forward, softmax,
};
use crate::netcore::MasterModel;
use crate::quantizer::{quantize_value, ActivationStats, QuantSpec};

/// Forward-pass mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Float,
    /// Quantize every group that has a spec. With `strict` set, a group
    /// without a spec is an error instead of running float.
    Quantized { strict: bool },
}

impl Mode {
    pub fn quantized() -> Self {
        Mode::Quantized { strict: false }
    }

    pub fn is_quantized(self) -> bool {
        matches!(self, Mode::Quantized { .. })
    }

    fn is_strict(self) -> bool {
        matches!(self, Mode::Quantized { strict: true })
    }
}

/// Weight arrays as the forward pass sees them: master values in float mode,
/// quantized views in quantized mode.
pub(crate) struct EffectiveWeights<'a> {
    map: BTreeMap<&'a str, Cow<'a, [f64]>>,
}

impl<'a> EffectiveWeights<'a> {
    pub fn build(model: &'a MasterModel, mode: Mode) -> Result<Self> {
        let mut map: BTreeMap<&'a str, Cow<'a, [f64]>> = BTreeMap::new();
        for (name, arr) in &model.weights {
            let view = if mode.is_quantized() {
                match model.weight_specs.get(name) {
                    Some(spec) => {
                        Cow::Owned(arr.iter().map(|&v| quantize_value(v, spec)).collect())
                    }
                    None if mode.is_strict() => {
                        return Err(Error::MissingSpec(format!("w:{name}")));
                    }
                    None => Cow::Borrowed(arr.as_slice()),
                }
            } else {
                Cow::Borrowed(arr.as_slice())
            };
            map.insert(name.as_str(), view);
        }
        Ok(EffectiveWeights { map })
    }

    fn group(&self, name: &str) -> Result<&[f64]> {
        self.map
            .get(name)
            .map(|c| c.as_ref())
            .ok_or_else(|| Error::UnknownGroup(format!("w:{name}")))
    }
}

/// Signal-quantization context: group specs in quantized mode, nothing in
/// float mode.
struct SigCtx<'a> {
    specs: Option<&'a BTreeMap<String, QuantSpec>>,
}

impl<'a> SigCtx<'a> {
    fn new(model: &'a MasterModel, mode: Mode) -> Result<Self> {
        if mode.is_strict() {
            for name in model.graph.signal_groups() {
                if !model.signal_specs.contains_key(&name) {
                    return Err(Error::MissingSpec(format!("s:{name}")));
                }
            }
        }
        Ok(SigCtx { specs: mode.is_quantized().then_some(&model.signal_specs) })
    }

    fn apply(&self, group: Option<&str>, vals: &mut [f64]) {
        let (Some(specs), Some(name)) = (self.specs, group) else { return };
        if let Some(spec) = specs.get(name) {
            for v in vals.iter_mut() {
                *v = quantize_value(*v, spec);
            }
        }
    }

    fn lstm_quant(&self, group: Option<&str>) -> Result<Option<SignalQuant>> {
        let (Some(specs), Some(name)) = (self.specs, group) else { return Ok(None) };
        match specs.get(name) {
            Some(spec) => Ok(Some(SignalQuant::for_bits(&spec.group, spec.bits)?)),
            None => Ok(None),
        }
    }
}

/// Per-frame CNN activations retained for backward.
pub(crate) struct FrameTrace {
    /// `stages[0]` is the (possibly quantized) frame input; `stages[i+1]` is
    /// the output of CNN layer `i`.
    stages: Vec<Vec<f64>>,
    /// Pool argmax indices keyed by CNN layer index.
    pool_args: BTreeMap<usize, Vec<usize>>,
}

/// Everything retained by a cached forward pass.
pub(crate) struct SeqCache {
    frames: Vec<FrameTrace>,
    steps: Vec<LstmStepTrace>,
    pub posteriors: Vec<Vec<f64>>,
}

struct GraphPlan<'a> {
    cnn: &'a [LayerSpec],
    lstm: &'a LayerSpec,
    dense: &'a LayerSpec,
}

fn plan(graph: &NetworkGraph) -> Result<GraphPlan<'_>> {
    let lstm_idx = graph
        .layers
        .iter()
        .position(|l| matches!(l, LayerSpec::Lstm { .. }))
        .ok_or_else(|| Error::Shape("graph has no LSTM layer".into()))?;
    let dense = graph
        .layers
        .iter()
        .find(|l| matches!(l, LayerSpec::Dense { .. }))
        .ok_or_else(|| Error::Shape("graph has no output layer".into()))?;
    Ok(GraphPlan { cnn: &graph.layers[..lstm_idx], lstm: &graph.layers[lstm_idx], dense })
}

fn frame_input(sample: &SequenceSample, graph: &NetworkGraph, t: usize) -> Result<Vec<f64>> {
    match (&sample.frames, graph.input_shape) {
        (
            FrameData::Image { frames, channels, height, width, data },
            InputShape::Image { channels: gc, height: gh, width: gw },
        ) => {
            if (*channels, *height, *width) != (gc, gh, gw) {
                return Err(Error::Shape(format!(
                    "sample frames are {channels}x{height}x{width}, graph expects {gc}x{gh}x{gw}"
                )));
            }
            let frame_len = channels * height * width;
            if t >= *frames {
                return Err(Error::Shape("frame index out of range".into()));
            }
            Ok(data[t * frame_len..(t + 1) * frame_len].to_vec())
        }
        (FrameData::Accel(rows), InputShape::Accel { dims }) => {
            if dims != 3 {
                return Err(Error::Shape("accelerometer graphs take 3 input dims".into()));
            }
            Ok(rows[t].to_vec())
        }
        _ => Err(Error::Shape("sample modality does not match the graph input".into())),
    }
}

/// Cached forward pass. `collect` optionally records signal values for the
/// groups present in the map (stats collection runs in float mode, before
/// any quantization would apply).
pub(crate) fn forward_cached(
    model: &MasterModel,
    sample: &SequenceSample,
    mode: Mode,
    mut collect: Option<&mut BTreeMap<String, ActivationStats>>,
) -> Result<(Vec<f64>, SeqCache)> {
    if sample.is_empty() {
        return Err(Error::Data(format!("sample '{}' has no frames", sample.id)));
    }
    let graph = &model.graph;
    let weights = EffectiveWeights::build(model, mode)?;
    let sig = SigCtx::new(model, mode)?;
    let plan = plan(graph)?;

    let record = |collect: &mut Option<&mut BTreeMap<String, ActivationStats>>,
                      group: Option<&str>,
                      vals: &[f64]| {
        if let (Some(map), Some(name)) = (collect.as_deref_mut(), group) {
            if let Some(stats) = map.get_mut(name) {
                stats.record_all(vals);
            }
        }
    };

    let LayerSpec::Lstm {
        units,
        input_size,
        input_weight_group,
        recurrent_weight_group,
        signal_group,
        ..
    } = plan.lstm
    else {
        unreachable!()
    };
    let LayerSpec::Dense { in_dim, out_dim, weight_group: dense_group, .. } = plan.dense else {
        unreachable!()
    };
    let lstm_w = LstmWeights::from_groups(
        weights.group(input_weight_group)?,
        weights.group(recurrent_weight_group)?,
        *units,
        *input_size,
    )?;
    let lstm_quant = sig.lstm_quant(signal_group.as_deref())?;
    let dense_w = weights.group(dense_group)?;
    let (dw, db) = dense_w.split_at(out_dim * in_dim);

    let input_group = graph.input_signal.as_ref().map(|s| s.group.as_str());
    let steps_total = sample.len();
    let mut state = LstmState::zeros(*units);
    let mut cache = SeqCache { frames: Vec::new(), steps: Vec::new(), posteriors: Vec::new() };

    for t in 0..steps_total {
        let mut x = frame_input(sample, graph, t)?;
        record(&mut collect, input_group, &x);
        sig.apply(input_group, &mut x);

        if !plan.cnn.is_empty() {
            let mut trace =
                FrameTrace { stages: Vec::with_capacity(plan.cnn.len() + 1), pool_args: BTreeMap::new() };
            let mut shape = match graph.input_shape {
                InputShape::Image { channels, height, width } => (channels, height, width),
                InputShape::Accel { .. } => unreachable!("CNN prefix on accel graph"),
            };
            trace.stages.push(x.clone());
            for (i, layer) in plan.cnn.iter().enumerate() {
                match layer {
                    LayerSpec::Conv2d { in_maps, out_maps, kernel, weight_group, .. } => {
                        let w = weights.group(weight_group)?;
                        let (k, b) = w.split_at(out_maps * in_maps * kernel * kernel);
                        x = conv2d_forward(&x, *in_maps, shape.1, shape.2, k, b, *out_maps, *kernel)?;
                        shape = (*out_maps, shape.1 - kernel + 1, shape.2 - kernel + 1);
                    }
                    LayerSpec::Relu { signal_group } => {
                        relu_forward(&mut x);
                        record(&mut collect, signal_group.as_deref(), &x);
                        sig.apply(signal_group.as_deref(), &mut x);
                    }
                    LayerSpec::MaxPool2d { signal_group } => {
                        let (out, oh, ow, args) = maxpool2d_forward(&x, shape.0, shape.1, shape.2);
                        x = out;
                        shape = (shape.0, oh, ow);
                        trace.pool_args.insert(i, args);
                        record(&mut collect, signal_group.as_deref(), &x);
                        sig.apply(signal_group.as_deref(), &mut x);
                    }
                    other => {
                        return Err(Error::Shape(format!("unexpected CNN-stage layer {other:?}")))
                    }
                }
                trace.stages.push(x.clone());
            }
            cache.frames.push(trace);
        }

        let step = lstm_step_traced(&x, &mut state, &lstm_w, lstm_quant.as_ref());
        if !state.is_finite() {
            return Err(Error::Numeric(format!("non-finite LSTM state at step {t}")));
        }
        cache.steps.push(step);

        let logits = dense_forward(dw, db, &state.hidden, *out_dim, *in_dim);
        cache.posteriors.push(softmax(&logits));
    }

    let posterior = cache.posteriors.last().expect("at least one frame").clone();
    if posterior.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite class posterior".into()));
    }
    Ok((posterior, cache))
}

/// Class posterior at the final frame. In quantized mode every group with a
/// spec is quantized (weights once per pass, signals per timestep).
pub fn forward_sequence(model: &MasterModel, sample: &SequenceSample, mode: Mode) -> Result<Vec<f64>> {
    forward_cached(model, sample, mode, None).map(|(p, _)| p)
}

/// Runs one float forward pass per sample, recording the signal values of
/// every group named in `collectors`.
pub fn collect_signal_stats(
    model: &MasterModel,
    samples: &[SequenceSample],
    collectors: &mut BTreeMap<String, ActivationStats>,
) -> Result<()> {
    for sample in samples {
        forward_cached(model, sample, Mode::Float, Some(collectors))?;
    }
    Ok(())
}

/// Cross-entropy gradients at the final frame, backpropagated through time.
/// Returns the loss and per-group gradients with the same shapes as the
/// weight arrays. `scale` multiplies the gradients (not the reported loss);
/// `horizon` truncates how many steps back from the sequence end the
/// recurrence is unrolled.
pub(crate) fn backward_cached(
    model: &MasterModel,
    sample: &SequenceSample,
    mode: Mode,
    label: usize,
    scale: f64,
    horizon: usize,
) -> Result<(f64, BTreeMap<String, Vec<f64>>)> {
    let graph = &model.graph;
    if label >= graph.output_classes {
        return Err(Error::Data(format!(
            "label {label} out of range for {} classes",
            graph.output_classes
        )));
    }
    let weights = EffectiveWeights::build(model, mode)?;
    let (posterior, cache) = forward_cached(model, sample, mode, None)?;
    let plan = plan(graph)?;

    let mut grads: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for name in graph.weight_groups() {
        let len = graph.weight_group_len(&name)?;
        grads.insert(name, vec![0.0; len]);
    }

    let LayerSpec::Lstm {
        units, input_size, input_weight_group, recurrent_weight_group, ..
    } = plan.lstm
    else {
        unreachable!()
    };
    let LayerSpec::Dense { in_dim, out_dim, weight_group: dense_group, .. } = plan.dense else {
        unreachable!()
    };

    let loss = cross_entropy(&posterior, label);

    // Softmax + cross entropy at the output: dlogits = posterior - onehot.
    let mut dlogits: Vec<f64> = posterior.clone();
    dlogits[label] -= 1.0;
    for v in dlogits.iter_mut() {
        *v *= scale;
    }

    let dense_w = weights.group(dense_group)?;
    let (dw_full, _) = dense_w.split_at(out_dim * in_dim);
    let mut dh;
    {
        let dense_grads = grads.get_mut(dense_group).expect("dense group");
        let (gdw, gdb) = dense_grads.split_at_mut(out_dim * in_dim);
        let h_final = &cache.steps.last().expect("steps").hidden;
        dh = dense_backward(dw_full, h_final, &dlogits, *out_dim, *in_dim, gdw, gdb);
    }

    let lstm_w = LstmWeights::from_groups(
        weights.group(input_weight_group)?,
        weights.group(recurrent_weight_group)?,
        *units,
        *input_size,
    )?;
    let want_dx = !plan.cnn.is_empty();
    let steps_total = cache.steps.len();
    let start = steps_total.saturating_sub(horizon.max(1));
    let mut dc = vec![0.0; *units];

    // The two LSTM groups are taken out of the map so we can split borrows.
    let mut lstm_in_grads = grads.remove(input_weight_group).expect("lstm input group");
    let mut lstm_rec_grads = grads.remove(recurrent_weight_group).expect("lstm recurrent group");

    for t in (start..steps_total).rev() {
        let dx = {
            let mut g = LstmGrads::from_groups(&mut lstm_in_grads, &mut lstm_rec_grads, *units, *input_size);
            lstm_step_backward(&cache.steps[t], &lstm_w, &mut dh, &mut dc, &mut g, want_dx)
        };
        if let Some(dx) = dx {
            backward_cnn_frame(graph, plan.cnn, &weights, &cache.frames[t], dx, &mut grads)?;
        }
    }
    grads.insert(input_weight_group.clone(), lstm_in_grads);
    grads.insert(recurrent_weight_group.clone(), lstm_rec_grads);
    Ok((loss, grads))
}

fn backward_cnn_frame(
    graph: &NetworkGraph,
    cnn: &[LayerSpec],
    weights: &EffectiveWeights<'_>,
    trace: &FrameTrace,
    dx: Vec<f64>,
    grads: &mut BTreeMap<String, Vec<f64>>,
) -> Result<()> {
    let mut shapes = Vec::with_capacity(cnn.len() + 1);
    let mut shape = match graph.input_shape {
        InputShape::Image { channels, height, width } => (channels, height, width),
        InputShape::Accel { .. } => return Err(Error::Shape("CNN backward on accel graph".into())),
    };
    shapes.push(shape);
    for layer in cnn {
        match layer {
            LayerSpec::Conv2d { out_maps, kernel, .. } => {
                shape = (*out_maps, shape.1 - kernel + 1, shape.2 - kernel + 1);
            }
            LayerSpec::MaxPool2d { .. } => {
                shape = (
                    shape.0,
                    crate::netcore::graph::pooled_dim(shape.1),
                    crate::netcore::graph::pooled_dim(shape.2),
                );
            }
            _ => {}
        }
        shapes.push(shape);
    }

    let mut dcur = dx;
    for (i, layer) in cnn.iter().enumerate().rev() {
        match layer {
            LayerSpec::MaxPool2d { .. } => {
                let args = &trace.pool_args[&i];
                dcur = maxpool2d_backward(&dcur, args, trace.stages[i].len());
            }
            LayerSpec::Relu { .. } => {
                relu_backward(&mut dcur, &trace.stages[i + 1]);
            }
            LayerSpec::Conv2d { in_maps, out_maps, kernel, weight_group, .. } => {
                let w = weights.group(weight_group)?;
                let (k, _) = w.split_at(out_maps * in_maps * kernel * kernel);
                let g = grads.get_mut(weight_group).expect("conv group");
                let (gk, gb) = g.split_at_mut(out_maps * in_maps * kernel * kernel);
                let (_, h, wdim) = shapes[i];
                let din = conv2d_backward(
                    &trace.stages[i],
                    *in_maps,
                    h,
                    wdim,
                    k,
                    *out_maps,
                    *kernel,
                    &dcur,
                    gk,
                    gb,
                    i > 0,
                );
                match din {
                    Some(d) => dcur = d,
                    None => break, // first layer: no upstream gradient needed
                }
            }
            other => return Err(Error::Shape(format!("unexpected CNN-stage layer {other:?}"))),
        }
    }
    Ok(())
}

/// Cross-entropy loss at the final frame and its gradients w.r.t. every
/// weight array. `forward_sequence` semantics apply to the mode.
pub fn backward_sequence(
    model: &MasterModel,
    sample: &SequenceSample,
    label: usize,
    mode: Mode,
) -> Result<(f64, BTreeMap<String, Vec<f64>>)> {
    backward_cached(model, sample, mode, label, 1.0, usize::MAX)
}

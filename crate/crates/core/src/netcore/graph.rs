//! Layer-stack descriptions, the two built-in presets, and parameter
//! counting.
//!
//! Weight groups and signal groups are separate name spaces: the LSTM layer
//! owns a weight group and a signal group that are both called `L1`, matching
//! the conventional per-layer grouping for sensitivity analysis.

use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::quantizer::GroupKind;

/// Convolution kernel edge used by the image preset.
pub const CONV_KERNEL: usize = 5;
/// Max-pooling window edge and stride.
pub const POOL_WINDOW: usize = 2;
pub const POOL_STRIDE: usize = 2;

/// Whether a group name refers to weights or to a signal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum GroupScope {
    Weight,
    Signal,
}

impl GroupScope {
    pub fn label(self) -> &'static str {
        match self {
            GroupScope::Weight => "weight",
            GroupScope::Signal => "signal",
        }
    }
}

/// Fully qualified group reference, e.g. `w:L1` or `s:L1`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GroupRef {
    pub scope: GroupScope,
    pub name: String,
}

impl GroupRef {
    pub fn weight(name: impl Into<String>) -> Self {
        GroupRef { scope: GroupScope::Weight, name: name.into() }
    }

    pub fn signal(name: impl Into<String>) -> Self {
        GroupRef { scope: GroupScope::Signal, name: name.into() }
    }
}

impl fmt::Display for GroupRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = match self.scope {
            GroupScope::Weight => "w",
            GroupScope::Signal => "s",
        };
        write!(f, "{tag}:{}", self.name)
    }
}

impl FromStr for GroupRef {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.split_once(':') {
            Some(("w", name)) if !name.is_empty() => Ok(GroupRef::weight(name)),
            Some(("s", name)) if !name.is_empty() => Ok(GroupRef::signal(name)),
            _ => Err(Error::InvalidArg(format!(
                "group reference '{s}' must look like w:NAME or s:NAME"
            ))),
        }
    }
}

/// One layer of a network stack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum LayerSpec {
    Conv2d {
        label: String,
        in_maps: usize,
        out_maps: usize,
        kernel: usize,
        weight_group: String,
    },
    /// 2x2 window, stride 2. Inputs with a spatial dim of 1 pass through
    /// unchanged (the window clips to the available pixels); odd dims drop
    /// the trailing row/column.
    MaxPool2d { signal_group: Option<String> },
    Relu { signal_group: Option<String> },
    Lstm {
        label: String,
        units: usize,
        input_size: usize,
        input_weight_group: String,
        recurrent_weight_group: String,
        signal_group: Option<String>,
    },
    Dense {
        label: String,
        in_dim: usize,
        out_dim: usize,
        weight_group: String,
    },
    Softmax,
}

/// Input tensor family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum InputShape {
    Image { channels: usize, height: usize, width: usize },
    Accel { dims: usize },
}

/// Quantization point on the network input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputSignal {
    pub group: String,
    pub kind: GroupKind,
}

/// Ordered layer stack with shapes and named quantization groups.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkGraph {
    pub preset: String,
    pub input_shape: InputShape,
    pub input_signal: Option<InputSignal>,
    pub layers: Vec<LayerSpec>,
    pub output_classes: usize,
}

/// LSTM parameter count for `units` units fed by `input_size` inputs:
/// four input blocks, four recurrent blocks, four biases, and three peephole
/// vectors.
pub fn lstm_param_count(units: usize, input_size: usize) -> usize {
    4 * units * units + 4 * units * input_size + 7 * units
}

/// Image preset: three 5x5 conv + pool stages into a 128-unit LSTM and a
/// 9-way softmax over 3x32x32 RGB frames.
pub fn image_preset() -> NetworkGraph {
    let g = NetworkGraph {
        preset: "cambridge-cnn-lstm".to_string(),
        input_shape: InputShape::Image { channels: 3, height: 32, width: 32 },
        input_signal: Some(InputSignal { group: "In".into(), kind: GroupKind::SignalBoundedUnit }),
        layers: vec![
            LayerSpec::Conv2d {
                label: "C1".into(),
                in_maps: 3,
                out_maps: 32,
                kernel: CONV_KERNEL,
                weight_group: "In-C1".into(),
            },
            LayerSpec::Relu { signal_group: Some("C1".into()) },
            LayerSpec::MaxPool2d { signal_group: Some("S1".into()) },
            LayerSpec::Conv2d {
                label: "C2".into(),
                in_maps: 32,
                out_maps: 32,
                kernel: CONV_KERNEL,
                weight_group: "S1-C2".into(),
            },
            LayerSpec::Relu { signal_group: Some("C2".into()) },
            LayerSpec::MaxPool2d { signal_group: Some("S2".into()) },
            LayerSpec::Conv2d {
                label: "C3".into(),
                in_maps: 32,
                out_maps: 64,
                kernel: CONV_KERNEL,
                weight_group: "S2-C3".into(),
            },
            LayerSpec::Relu { signal_group: Some("C3".into()) },
            LayerSpec::MaxPool2d { signal_group: Some("S3".into()) },
            LayerSpec::Lstm {
                label: "L1".into(),
                units: 128,
                input_size: 64,
                input_weight_group: "S3-L1".into(),
                recurrent_weight_group: "L1".into(),
                signal_group: Some("L1".into()),
            },
            LayerSpec::Dense {
                label: "Out".into(),
                in_dim: 128,
                out_dim: 9,
                weight_group: "L1-Out".into(),
            },
            LayerSpec::Softmax,
        ],
        output_classes: 9,
    };
    debug_assert!(g.validate().is_ok());
    g
}

/// Accelerometer preset: one LSTM over raw 3-axis samples and an 8-way
/// softmax. `units` is typically 32, 64, 128, or 256.
pub fn accel_preset(units: usize) -> NetworkGraph {
    let g = NetworkGraph {
        preset: format!("smartwatch-lstm-{units}"),
        input_shape: InputShape::Accel { dims: 3 },
        // Raw acceleration is signed and unbounded, so the input signal uses
        // the symmetric fitted grid, same rule as the weight quantizer.
        input_signal: Some(InputSignal { group: "In".into(), kind: GroupKind::Weight }),
        layers: vec![
            LayerSpec::Lstm {
                label: "L1".into(),
                units,
                input_size: 3,
                input_weight_group: "In-L1".into(),
                recurrent_weight_group: "L1".into(),
                signal_group: Some("L1".into()),
            },
            LayerSpec::Dense {
                label: "Out".into(),
                in_dim: units,
                out_dim: 8,
                weight_group: "L1-Out".into(),
            },
            LayerSpec::Softmax,
        ],
        output_classes: 8,
    };
    debug_assert!(g.validate().is_ok());
    g
}

/// Resolves a preset name: `cambridge-cnn-lstm` or `smartwatch-lstm-<units>`.
pub fn preset(name: &str) -> Result<NetworkGraph> {
    if name == "cambridge-cnn-lstm" {
        return Ok(image_preset());
    }
    if let Some(units) = name.strip_prefix("smartwatch-lstm-") {
        let units: usize = units
            .parse()
            .map_err(|_| Error::InvalidArg(format!("bad preset '{name}'")))?;
        if units == 0 {
            return Err(Error::InvalidArg("LSTM size must be at least 1".into()));
        }
        return Ok(accel_preset(units));
    }
    Err(Error::InvalidArg(format!(
        "unknown preset '{name}' (expected cambridge-cnn-lstm or smartwatch-lstm-<units>)"
    )))
}

impl NetworkGraph {
    /// Checks shape-chain consistency and per-namespace group uniqueness.
    pub fn validate(&self) -> Result<()> {
        let mut wnames: Vec<&str> = Vec::new();
        let mut snames: Vec<&str> = Vec::new();
        if let Some(sig) = &self.input_signal {
            snames.push(&sig.group);
        }
        let uniq = |names: &mut Vec<&str>| -> Result<()> {
            let mut sorted: Vec<&str> = names.clone();
            sorted.sort_unstable();
            sorted.dedup();
            if sorted.len() != names.len() {
                return Err(Error::Shape("duplicate group name in graph".into()));
            }
            Ok(())
        };

        enum Feed {
            Image(usize, usize, usize),
            Vec(usize),
            Probs(usize),
        }
        let mut feed = match self.input_shape {
            InputShape::Image { channels, height, width } => Feed::Image(channels, height, width),
            InputShape::Accel { dims } => Feed::Vec(dims),
        };
        for layer in &self.layers {
            feed = match (layer, feed) {
                (LayerSpec::Conv2d { in_maps, out_maps, kernel, weight_group, .. }, Feed::Image(c, h, w)) => {
                    if c != *in_maps {
                        return Err(Error::Shape(format!(
                            "conv '{weight_group}' expects {in_maps} input maps, got {c}"
                        )));
                    }
                    if h < *kernel || w < *kernel {
                        return Err(Error::Shape(format!(
                            "conv '{weight_group}' kernel {kernel} larger than input {h}x{w}"
                        )));
                    }
                    wnames.push(weight_group);
                    Feed::Image(*out_maps, h - kernel + 1, w - kernel + 1)
                }
                (LayerSpec::MaxPool2d { signal_group }, Feed::Image(c, h, w)) => {
                    if let Some(sg) = signal_group {
                        snames.push(sg);
                    }
                    Feed::Image(c, pooled_dim(h), pooled_dim(w))
                }
                (LayerSpec::Relu { signal_group }, f @ Feed::Image(..)) => {
                    if let Some(sg) = signal_group {
                        snames.push(sg);
                    }
                    f
                }
                (
                    LayerSpec::Lstm {
                        units,
                        input_size,
                        input_weight_group,
                        recurrent_weight_group,
                        signal_group,
                        ..
                    },
                    feed,
                ) => {
                    let dim = match feed {
                        Feed::Image(c, h, w) => c * h * w,
                        Feed::Vec(d) => d,
                        Feed::Probs(_) => return Err(Error::Shape("LSTM after softmax".into())),
                    };
                    if dim != *input_size {
                        return Err(Error::Shape(format!(
                            "LSTM input size {input_size} but upstream provides {dim}"
                        )));
                    }
                    wnames.push(input_weight_group);
                    wnames.push(recurrent_weight_group);
                    if let Some(sg) = signal_group {
                        snames.push(sg);
                    }
                    Feed::Vec(*units)
                }
                (LayerSpec::Dense { in_dim, out_dim, weight_group, .. }, Feed::Vec(d)) => {
                    if d != *in_dim {
                        return Err(Error::Shape(format!(
                            "dense '{weight_group}' expects {in_dim} inputs, got {d}"
                        )));
                    }
                    wnames.push(weight_group);
                    Feed::Vec(*out_dim)
                }
                (LayerSpec::Softmax, Feed::Vec(d)) => Feed::Probs(d),
                (l, _) => {
                    return Err(Error::Shape(format!("layer {l:?} fed by incompatible stage")))
                }
            };
        }
        match feed {
            Feed::Probs(d) if d == self.output_classes => {}
            Feed::Probs(d) => {
                return Err(Error::Shape(format!(
                    "softmax width {d} != output classes {}",
                    self.output_classes
                )))
            }
            _ => return Err(Error::Shape("graph must end in softmax".into())),
        }
        uniq(&mut wnames)?;
        uniq(&mut snames)?;
        Ok(())
    }

    /// Weight group names in layer order.
    pub fn weight_groups(&self) -> Vec<String> {
        let mut out = Vec::new();
        for layer in &self.layers {
            match layer {
                LayerSpec::Conv2d { weight_group, .. } | LayerSpec::Dense { weight_group, .. } => {
                    out.push(weight_group.clone())
                }
                LayerSpec::Lstm { input_weight_group, recurrent_weight_group, .. } => {
                    out.push(input_weight_group.clone());
                    out.push(recurrent_weight_group.clone());
                }
                _ => {}
            }
        }
        out
    }

    /// Signal group names in forward order, starting with the input group.
    pub fn signal_groups(&self) -> Vec<String> {
        let mut out = Vec::new();
        if let Some(sig) = &self.input_signal {
            out.push(sig.group.clone());
        }
        for layer in &self.layers {
            match layer {
                LayerSpec::Relu { signal_group: Some(sg) }
                | LayerSpec::MaxPool2d { signal_group: Some(sg) }
                | LayerSpec::Lstm { signal_group: Some(sg), .. } => out.push(sg.clone()),
                _ => {}
            }
        }
        out
    }

    /// Every group in the graph, weights first, each in forward order.
    pub fn all_groups(&self) -> Vec<GroupRef> {
        let mut out: Vec<GroupRef> = self.weight_groups().into_iter().map(GroupRef::weight).collect();
        out.extend(self.signal_groups().into_iter().map(GroupRef::signal));
        out
    }

    /// Grid family of a signal group.
    pub fn signal_kind(&self, name: &str) -> Result<GroupKind> {
        if let Some(sig) = &self.input_signal {
            if sig.group == name {
                return Ok(sig.kind);
            }
        }
        for layer in &self.layers {
            match layer {
                LayerSpec::Relu { signal_group: Some(sg) } if sg == name => {
                    return Ok(GroupKind::SignalUnbounded)
                }
                // Pooling of rectified maps stays nonnegative.
                LayerSpec::MaxPool2d { signal_group: Some(sg) } if sg == name => {
                    return Ok(GroupKind::SignalUnbounded)
                }
                LayerSpec::Lstm { signal_group: Some(sg), .. } if sg == name => {
                    return Ok(GroupKind::SignalBoundedSym)
                }
                _ => {}
            }
        }
        Err(Error::UnknownGroup(format!("s:{name}")))
    }

    /// Flat element count of a weight group (biases and peepholes included).
    pub fn weight_group_len(&self, name: &str) -> Result<usize> {
        Ok(self.weight_group_segments(name)?.iter().sum())
    }

    /// Segment layout of a weight group's flat array: conv is kernels then
    /// biases; the LSTM recurrent group is recurrent blocks, biases, then
    /// peepholes; dense is the matrix then biases.
    pub fn weight_group_segments(&self, name: &str) -> Result<Vec<usize>> {
        for layer in &self.layers {
            match layer {
                LayerSpec::Conv2d { in_maps, out_maps, kernel, weight_group, .. }
                    if weight_group == name =>
                {
                    return Ok(vec![out_maps * in_maps * kernel * kernel, *out_maps]);
                }
                LayerSpec::Lstm { units, input_size, input_weight_group, recurrent_weight_group, .. } => {
                    if input_weight_group == name {
                        return Ok(vec![4 * units * input_size]);
                    }
                    if recurrent_weight_group == name {
                        return Ok(vec![4 * units * units, 4 * units, 3 * units]);
                    }
                }
                LayerSpec::Dense { in_dim, out_dim, weight_group, .. } if weight_group == name => {
                    return Ok(vec![out_dim * in_dim, *out_dim]);
                }
                _ => {}
            }
        }
        Err(Error::UnknownGroup(format!("w:{name}")))
    }

    /// Total weight count across all groups.
    pub fn total_weight_count(&self) -> usize {
        self.weight_groups()
            .iter()
            .map(|g| self.weight_group_len(g).expect("own group"))
            .sum()
    }

    /// Spatial chain of an image stack: (maps, h, w) after the input and
    /// after each conv/pool stage.
    pub fn feature_shapes(&self) -> Vec<(usize, usize, usize)> {
        let mut out = Vec::new();
        let (mut c, mut h, mut w) = match self.input_shape {
            InputShape::Image { channels, height, width } => (channels, height, width),
            InputShape::Accel { .. } => return out,
        };
        out.push((c, h, w));
        for layer in &self.layers {
            match layer {
                LayerSpec::Conv2d { out_maps, kernel, .. } => {
                    c = *out_maps;
                    h = h - kernel + 1;
                    w = w - kernel + 1;
                    out.push((c, h, w));
                }
                LayerSpec::MaxPool2d { .. } => {
                    h = pooled_dim(h);
                    w = pooled_dim(w);
                    out.push((c, h, w));
                }
                _ => {}
            }
        }
        out
    }
}

/// Output edge of a 2x2 stride-2 pool. Dims below the window pass through.
pub fn pooled_dim(d: usize) -> usize {
    if d < POOL_WINDOW {
        d.max(1)
    } else {
        d / POOL_STRIDE
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn image_preset_shape_chain() {
        let g = image_preset();
        g.validate().unwrap();
        let shapes = g.feature_shapes();
        assert_eq!(
            shapes,
            vec![
                (3, 32, 32),
                (32, 28, 28),
                (32, 14, 14),
                (32, 10, 10),
                (32, 5, 5),
                (64, 1, 1),
                (64, 1, 1),
            ]
        );
    }

    #[test]
    fn image_preset_weight_counts() {
        let g = image_preset();
        assert_eq!(g.weight_group_len("In-C1").unwrap(), 2432);
        assert_eq!(g.weight_group_len("S1-C2").unwrap(), 25632);
        assert_eq!(g.weight_group_len("S2-C3").unwrap(), 51264);
        let cnn: usize = ["In-C1", "S1-C2", "S2-C3"]
            .iter()
            .map(|n| g.weight_group_len(n).unwrap())
            .sum();
        assert_eq!(cnn, 79_328);
        assert_eq!(g.weight_group_len("S3-L1").unwrap(), 4 * 128 * 64);
        assert_eq!(g.weight_group_len("L1").unwrap(), 4 * 128 * 128 + 7 * 128);
        assert_eq!(g.weight_group_len("L1-Out").unwrap(), 128 * 9 + 9);
    }

    #[test]
    fn accel_preset_total_is_exact() {
        let g = accel_preset(128);
        g.validate().unwrap();
        assert_eq!(g.total_weight_count(), 69_000);
        assert_eq!(
            g.weight_group_len("In-L1").unwrap() + g.weight_group_len("L1").unwrap(),
            lstm_param_count(128, 3)
        );
    }

    #[test]
    fn lstm_param_count_formula() {
        assert_eq!(lstm_param_count(128, 3), 67_968);
        assert_eq!(lstm_param_count(1, 0), 11);
        assert_eq!(lstm_param_count(128, 64), 4 * 128 * 128 + 4 * 128 * 64 + 7 * 128);
    }

    #[test]
    fn group_listings_match_layer_order() {
        let g = image_preset();
        assert_eq!(
            g.weight_groups(),
            vec!["In-C1", "S1-C2", "S2-C3", "S3-L1", "L1", "L1-Out"]
        );
        assert_eq!(
            g.signal_groups(),
            vec!["In", "C1", "S1", "C2", "S2", "C3", "S3", "L1"]
        );
        let a = accel_preset(128);
        assert_eq!(a.weight_groups(), vec!["In-L1", "L1", "L1-Out"]);
        assert_eq!(a.signal_groups(), vec!["In", "L1"]);
    }

    #[test]
    fn preset_lookup() {
        assert!(preset("cambridge-cnn-lstm").is_ok());
        assert_eq!(preset("smartwatch-lstm-64").unwrap().preset, "smartwatch-lstm-64");
        assert!(preset("smartwatch-lstm-x").is_err());
        assert!(preset("nope").is_err());
    }

    #[test]
    fn group_ref_parsing() {
        let g: GroupRef = "w:L1".parse().unwrap();
        assert_eq!(g, GroupRef::weight("L1"));
        assert_eq!(g.to_string(), "w:L1");
        assert!("L1".parse::<GroupRef>().is_err());
        assert!("x:L1".parse::<GroupRef>().is_err());
    }
}

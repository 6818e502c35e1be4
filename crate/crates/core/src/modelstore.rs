//! Model serialization (float JSON and the packed `.fxrn` binary) plus the
//! embedded-cost accounting: memory footprints, per-layer multiplication
//! counts, and cache-fit verdicts.
//!
//! `.fxrn` layout, all integers little-endian:
//!
//! ```text
//! magic "FXRN" | version u16 | preset (u16 len + utf8)
//! weight-group count u32, then per group sorted by name:
//!     name (u16 len + utf8) | bits u8 | kind u8 | delta f32
//!     segment count u8 | segment lengths u64…
//!     packed codes, ceil(count*bits/8) bytes
//! signal-spec count u32, then per spec sorted by name:
//!     name (u16 len + utf8) | kind u8 | bits u8 | delta f32
//! ```
//!
//! Encoding is canonical: equal models produce equal bytes, and a load/save
//! round trip is byte-identical.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::netcore::graph::LayerSpec;
use crate::netcore::{preset, MasterModel, NetworkGraph};
use crate::quantizer::{
    decode_code, encode_value, pack_codes, packed_len, unpack_codes, GroupKind, QuantSpec,
};

pub const PACKED_MAGIC: &[u8; 4] = b"FXRN";
pub const PACKED_VERSION: u16 = 1;

/// Cortex-A9-class cache sizes used in the default report.
pub const CACHE_SMALL_BYTES: u64 = 128 * 1024;
pub const CACHE_LARGE_BYTES: u64 = 8 * 1024 * 1024;

// ---------------------------------------------------------------------------
// Float model (JSON)

pub fn save_float_model(model: &MasterModel, path: &Path) -> Result<()> {
    model.validate()?;
    let json = serde_json::to_string(model)?;
    fs::write(path, json)?;
    Ok(())
}

pub fn load_float_model(path: &Path) -> Result<MasterModel> {
    let text = fs::read_to_string(path)?;
    let model: MasterModel = serde_json::from_str(&text)?;
    model.validate()?;
    Ok(model)
}

// ---------------------------------------------------------------------------
// Packed model (.fxrn)

fn kind_code(kind: GroupKind) -> u8 {
    match kind {
        GroupKind::Weight => 0,
        GroupKind::SignalBoundedSym => 1,
        GroupKind::SignalBoundedUnit => 2,
        GroupKind::SignalUnbounded => 3,
    }
}

fn kind_from_code(code: u8) -> Result<GroupKind> {
    Ok(match code {
        0 => GroupKind::Weight,
        1 => GroupKind::SignalBoundedSym,
        2 => GroupKind::SignalBoundedUnit,
        3 => GroupKind::SignalUnbounded,
        _ => return Err(Error::Format(format!("bad group kind {code}"))),
    })
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn new() -> Self {
        Writer { buf: Vec::new() }
    }

    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn f32(&mut self, v: f32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn str(&mut self, s: &str) -> Result<()> {
        let bytes = s.as_bytes();
        if bytes.len() > u16::MAX as usize {
            return Err(Error::Format("string too long".into()));
        }
        self.u16(bytes.len() as u16);
        self.buf.extend_from_slice(bytes);
        Ok(())
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format("truncated payload".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn str(&mut self) -> Result<String> {
        let len = self.u16()? as usize;
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| Error::Format("bad utf8".into()))
    }

    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

/// Encodes the quantized view of the model. Every weight group needs a spec.
pub fn save_packed(model: &MasterModel) -> Result<Vec<u8>> {
    model.validate()?;
    let mut w = Writer::new();
    w.buf.extend_from_slice(PACKED_MAGIC);
    w.u16(PACKED_VERSION);
    w.str(&model.graph.preset)?;

    let mut group_names: Vec<&String> = model.weights.keys().collect();
    group_names.sort();
    w.u32(group_names.len() as u32);
    for name in group_names {
        let spec = model
            .weight_specs
            .get(name)
            .ok_or_else(|| Error::MissingSpec(format!("w:{name}")))?;
        let values = &model.weights[name];
        let segments = model.graph.weight_group_segments(name)?;
        w.str(name)?;
        w.u8(spec.bits);
        w.u8(kind_code(spec.kind));
        w.f32(spec.delta as f32);
        w.u8(segments.len() as u8);
        for seg in &segments {
            w.u64(*seg as u64);
        }
        let codes: Vec<u32> = values.iter().map(|&v| encode_value(v, spec)).collect();
        let packed = pack_codes(&codes, spec.bits)?;
        w.buf.extend_from_slice(&packed);
    }

    let mut signal_names: Vec<&String> = model.signal_specs.keys().collect();
    signal_names.sort();
    w.u32(signal_names.len() as u32);
    for name in signal_names {
        let spec = &model.signal_specs[name];
        w.str(name)?;
        w.u8(kind_code(spec.kind));
        w.u8(spec.bits);
        w.f32(spec.delta as f32);
    }
    Ok(w.buf)
}

/// Decodes a packed model into a master-model view whose weights are the
/// dequantized grid values, with all specs attached; its quantized-mode
/// forward results are bit-identical to the source model's.
pub fn load_packed(bytes: &[u8]) -> Result<MasterModel> {
    let mut r = Reader::new(bytes);
    let magic = r.take(4)?;
    if magic != PACKED_MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let version = r.u16()?;
    if version != PACKED_VERSION {
        return Err(Error::Format(format!(
            "unsupported version {version} (expected {PACKED_VERSION})"
        )));
    }
    let preset_name = r.str()?;
    let graph = preset(&preset_name)
        .map_err(|_| Error::Format(format!("unknown preset '{preset_name}'")))?;

    let group_count = r.u32()? as usize;
    let expected = graph.weight_groups();
    if group_count != expected.len() {
        return Err(Error::Format(format!(
            "file has {group_count} weight groups, preset expects {}",
            expected.len()
        )));
    }
    let mut model = MasterModel {
        graph: graph.clone(),
        weights: Default::default(),
        weight_specs: Default::default(),
        signal_specs: Default::default(),
        rng_seed: 0,
    };
    for _ in 0..group_count {
        let name = r.str()?;
        let bits = r.u8()?;
        let kind = kind_from_code(r.u8()?)?;
        let delta = r.f32()? as f64;
        let nsegs = r.u8()? as usize;
        let mut segments = Vec::with_capacity(nsegs);
        for _ in 0..nsegs {
            segments.push(r.u64()? as usize);
        }
        let want_segments = graph
            .weight_group_segments(&name)
            .map_err(|_| Error::Format(format!("file names unknown group '{name}'")))?;
        if segments != want_segments {
            return Err(Error::Format(format!(
                "group '{name}' shape {segments:?} disagrees with preset {want_segments:?}"
            )));
        }
        let count: usize = segments.iter().sum();
        let payload = r.take(packed_len(count, bits))?;
        let codes = unpack_codes(payload, bits, count)?;
        let spec = QuantSpec::new(&name, bits, delta, kind)?;
        let max_code = spec.code_offset() + spec.max_code();
        let mut values = Vec::with_capacity(count);
        for code in codes {
            if code > max_code {
                return Err(Error::Format(format!(
                    "group '{name}': code {code} exceeds level count"
                )));
            }
            values.push(decode_code(code, &spec));
        }
        model.weights.insert(name.clone(), values);
        model.weight_specs.insert(name, spec);
    }

    let signal_count = r.u32()? as usize;
    for _ in 0..signal_count {
        let name = r.str()?;
        let kind = kind_from_code(r.u8()?)?;
        let bits = r.u8()?;
        let delta = r.f32()? as f64;
        let want_kind = graph
            .signal_kind(&name)
            .map_err(|_| Error::Format(format!("file names unknown signal group '{name}'")))?;
        if kind != want_kind {
            return Err(Error::Format(format!("signal group '{name}' kind disagrees with preset")));
        }
        model.signal_specs.insert(name.clone(), QuantSpec::new(&name, bits, delta, kind)?);
    }
    if !r.done() {
        return Err(Error::Format("trailing bytes after model payload".into()));
    }
    model.validate()?;
    Ok(model)
}

pub fn write_packed(model: &MasterModel, path: &Path) -> Result<()> {
    fs::write(path, save_packed(model)?)?;
    Ok(())
}

pub fn read_packed(path: &Path) -> Result<MasterModel> {
    load_packed(&fs::read(path)?)
}

// ---------------------------------------------------------------------------
// Memory accounting

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightFormat {
    Float32,
    Packed,
}

/// Bytes of a float32 store for `count` weights.
pub fn float_weight_bytes(count: usize) -> u64 {
    4 * count as u64
}

/// Packed payload bytes across all weight groups (header excluded). Needs a
/// spec on every group.
pub fn packed_payload_bytes(model: &MasterModel) -> Result<u64> {
    let mut total = 0u64;
    for (name, values) in &model.weights {
        let spec = model
            .weight_specs
            .get(name)
            .ok_or_else(|| Error::MissingSpec(format!("w:{name}")))?;
        total += packed_len(values.len(), spec.bits) as u64;
    }
    Ok(total)
}

/// Weight-memory footprint of the model in the given storage format.
pub fn memory_footprint(model: &MasterModel, format: WeightFormat) -> Result<u64> {
    match format {
        WeightFormat::Float32 => Ok(float_weight_bytes(model.graph.total_weight_count())),
        WeightFormat::Packed => packed_payload_bytes(model),
    }
}

/// Whether a packed weight store fits a cache of the given size.
pub fn cache_fit(weight_bytes: u64, cache_bytes: u64) -> bool {
    weight_bytes <= cache_bytes
}

// ---------------------------------------------------------------------------
// Multiplication accounting

#[derive(Debug, Clone, PartialEq)]
pub struct LayerCost {
    pub label: String,
    pub mults_per_frame: u64,
    pub mults_per_sec: u64,
}

/// Per-layer multiplication counts and weight-memory budget of a graph at a
/// frame rate.
#[derive(Debug, Clone, PartialEq)]
pub struct CostReport {
    pub preset: String,
    pub frame_rate_hz: u32,
    pub rows: Vec<LayerCost>,
    /// Peephole multiplications (3N per LSTM step), reported separately from
    /// the LSTM row's matrix terms.
    pub peephole_per_frame: u64,
    pub peephole_per_sec: u64,
    pub total_per_frame: u64,
    pub total_per_sec: u64,
    pub float_weight_bytes: u64,
    pub packed_weight_bytes: Option<u64>,
    pub notes: Vec<String>,
}

/// Multiplication counts per layer per frame (conv: out*oh*ow*k^2*in; LSTM:
/// the 4N^2 recurrent plus 4NM input matrix terms, peepholes separate; dense:
/// in*out), scaled to per-second at `frame_rate_hz`.
pub fn multiplication_count(graph: &NetworkGraph, frame_rate_hz: u32) -> Result<CostReport> {
    graph.validate()?;
    let rate = frame_rate_hz as u64;
    let mut rows = Vec::new();
    let mut peephole_per_frame = 0u64;
    let mut notes = Vec::new();
    let shapes = graph.feature_shapes();
    let mut conv_idx = 0usize;
    let mut stage = 0usize; // index into `shapes` (input is shapes[0])
    for layer in &graph.layers {
        match layer {
            LayerSpec::Conv2d { label, in_maps, out_maps, kernel, .. } => {
                stage += 1;
                let (_, oh, ow) = shapes[stage];
                let per_frame =
                    (*out_maps as u64) * (oh as u64) * (ow as u64) * ((kernel * kernel * in_maps) as u64);
                rows.push(LayerCost {
                    label: label.clone(),
                    mults_per_frame: per_frame,
                    mults_per_sec: per_frame * rate,
                });
                conv_idx += 1;
            }
            LayerSpec::MaxPool2d { .. } => {
                stage += 1;
            }
            LayerSpec::Lstm { label, units, input_size, .. } => {
                let n = *units as u64;
                let m = *input_size as u64;
                let per_frame = 4 * n * n + 4 * n * m;
                rows.push(LayerCost {
                    label: label.clone(),
                    mults_per_frame: per_frame,
                    mults_per_sec: per_frame * rate,
                });
                peephole_per_frame += 3 * n;
                notes.push(format!(
                    "{label} counts both recurrent (4N^2 = {}) and input (4NM = {}) matrix terms; \
                     peephole multiplications (3N = {}) are reported separately",
                    4 * n * n,
                    4 * n * m,
                    3 * n
                ));
            }
            LayerSpec::Dense { label, in_dim, out_dim, .. } => {
                let per_frame = (*in_dim as u64) * (*out_dim as u64);
                rows.push(LayerCost {
                    label: label.clone(),
                    mults_per_frame: per_frame,
                    mults_per_sec: per_frame * rate,
                });
            }
            _ => {}
        }
    }
    let _ = conv_idx;
    let total_per_frame: u64 =
        rows.iter().map(|r| r.mults_per_frame).sum::<u64>() + peephole_per_frame;
    Ok(CostReport {
        preset: graph.preset.clone(),
        frame_rate_hz,
        rows,
        peephole_per_frame,
        peephole_per_sec: peephole_per_frame * rate,
        total_per_frame,
        total_per_sec: total_per_frame * rate,
        float_weight_bytes: float_weight_bytes(graph.total_weight_count()),
        packed_weight_bytes: None,
        notes,
    })
}

/// [`multiplication_count`] plus the packed footprint when every weight group
/// has a spec.
pub fn cost_report(model: &MasterModel, frame_rate_hz: u32) -> Result<CostReport> {
    let mut report = multiplication_count(&model.graph, frame_rate_hz)?;
    if model.weights.keys().all(|n| model.weight_specs.contains_key(n)) {
        report.packed_weight_bytes = Some(packed_payload_bytes(model)?);
    }
    Ok(report)
}

impl CostReport {
    pub fn savings_percent(&self) -> Option<f64> {
        self.packed_weight_bytes
            .map(|p| (1.0 - p as f64 / self.float_weight_bytes as f64) * 100.0)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,mults_per_frame,mults_per_sec\n");
        for row in &self.rows {
            out.push_str(&format!("{},{},{}\n", row.label, row.mults_per_frame, row.mults_per_sec));
        }
        out.push_str(&format!("peephole,{},{}\n", self.peephole_per_frame, self.peephole_per_sec));
        out.push_str(&format!("total,{},{}\n", self.total_per_frame, self.total_per_sec));
        out.push_str(&format!("float_weight_bytes,{},\n", self.float_weight_bytes));
        if let Some(p) = self.packed_weight_bytes {
            out.push_str(&format!("packed_weight_bytes,{},\n", p));
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{} at {} Hz\n", self.preset, self.frame_rate_hz);
        out.push_str(&format!("{:<10}{:>16}{:>18}\n", "layer", "mults/frame", "mults/sec"));
        for row in &self.rows {
            out.push_str(&format!(
                "{:<10}{:>16}{:>18}\n",
                row.label, row.mults_per_frame, row.mults_per_sec
            ));
        }
        out.push_str(&format!(
            "{:<10}{:>16}{:>18}\n",
            "peephole", self.peephole_per_frame, self.peephole_per_sec
        ));
        out.push_str(&format!(
            "{:<10}{:>16}{:>18}\n",
            "total", self.total_per_frame, self.total_per_sec
        ));
        out.push_str(&format!("\nfloat32 weight bytes: {}\n", self.float_weight_bytes));
        if let Some(p) = self.packed_weight_bytes {
            out.push_str(&format!("packed weight bytes:  {p}\n"));
            if let Some(s) = self.savings_percent() {
                out.push_str(&format!("memory saved vs float32: {s:.4}%\n"));
            }
            for cache in [CACHE_SMALL_BYTES, CACHE_LARGE_BYTES] {
                out.push_str(&format!(
                    "fits {} KB cache: {}\n",
                    cache / 1024,
                    if cache_fit(p, cache) { "yes" } else { "no" }
                ));
            }
        }
        for note in &self.notes {
            out.push_str(&format!("note: {note}\n"));
        }
        out
    }
}

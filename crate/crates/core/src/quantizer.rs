//! Uniform symmetric quantization of weight and signal groups.
//!
//! Every group shares one step size delta. A group quantized at `b` bits uses
//! `2^b - 1` levels: a symmetric grid `{-m*delta, …, 0, …, +m*delta}` with
//! `m = (2^b - 2)/2` for weights and symmetric signals, or a one-sided grid
//! `{0, delta, …, (2^b - 2)*delta}` for nonnegative signals. Step sizes for
//! bounded activations (sigmoid, tanh) are fixed so the grid endpoints hit the
//! activation range exactly; unbounded groups get delta fitted by minimizing
//! the L2 reconstruction error over collected values.
//!
//! Step sizes are always kept at f32 precision so that a packed model file,
//! which stores delta as a 4-byte float, reproduces the in-memory quantizer
//! bit for bit.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Grid family of a quantization group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GroupKind {
    /// Symmetric grid, delta fitted by L2 search (weights, and signed
    /// unbounded signals such as raw acceleration input).
    #[serde(rename = "weight")]
    Weight,
    /// Symmetric grid covering [-1, 1] with a fixed delta (tanh outputs).
    #[serde(rename = "signal_bounded_sym")]
    SignalBoundedSym,
    /// One-sided grid covering [0, 1] with a fixed delta (sigmoid outputs,
    /// pixel inputs).
    #[serde(rename = "signal_bounded_unit")]
    SignalBoundedUnit,
    /// One-sided grid, delta fitted by L2 search over collected activations
    /// (rectified linear unit outputs and their poolings).
    #[serde(rename = "signal_unbounded")]
    SignalUnbounded,
}

impl GroupKind {
    /// One-sided grids clamp codes to `[0, levels-1]`; symmetric grids to
    /// `[-(levels-1)/2, +(levels-1)/2]`.
    pub fn is_one_sided(self) -> bool {
        matches!(self, GroupKind::SignalBoundedUnit | GroupKind::SignalUnbounded)
    }

    pub fn label(self) -> &'static str {
        match self {
            GroupKind::Weight => "weight",
            GroupKind::SignalBoundedSym => "signal_bounded_sym",
            GroupKind::SignalBoundedUnit => "signal_bounded_unit",
            GroupKind::SignalUnbounded => "signal_unbounded",
        }
    }
}

/// Number of representable levels at `bits`: an odd count, so the symmetric
/// grid always contains zero (2 bits -> 3 levels).
pub fn levels_for_bits(bits: u8) -> u32 {
    (1u32 << bits) - 1
}

/// Per-group quantizer: bit-width, level count, step size, and grid family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantSpec {
    pub group: String,
    pub bits: u8,
    pub levels: u32,
    pub delta: f64,
    pub kind: GroupKind,
}

impl QuantSpec {
    /// Builds a spec, snapping `delta` to f32 precision.
    pub fn new(group: impl Into<String>, bits: u8, delta: f64, kind: GroupKind) -> Result<Self> {
        if !(2..=16).contains(&bits) {
            return Err(Error::InvalidArg(format!("bits must be in 2..=16, got {bits}")));
        }
        if !delta.is_finite() || delta <= 0.0 {
            return Err(Error::Numeric(format!("step size must be positive, got {delta}")));
        }
        let delta = snap_f32(delta);
        if delta <= 0.0 {
            return Err(Error::Numeric("step size underflows f32".into()));
        }
        Ok(QuantSpec { group: group.into(), bits, levels: levels_for_bits(bits), delta, kind })
    }

    /// Largest code magnitude on the grid.
    pub fn max_code(&self) -> u32 {
        if self.kind.is_one_sided() {
            self.levels - 1
        } else {
            (self.levels - 1) / 2
        }
    }

    /// Offset added to a signed level index so codes pack as unsigned ints.
    pub fn code_offset(&self) -> u32 {
        if self.kind.is_one_sided() {
            0
        } else {
            (self.levels - 1) / 2
        }
    }
}

/// Round-trips a step size through f32 so packed files reproduce it exactly.
pub fn snap_f32(delta: f64) -> f64 {
    delta as f32 as f64
}

/// Quantizes one value onto the spec's grid.
///
/// Rounding is half away from zero; out-of-range values saturate at the grid
/// extremes. The result is always `delta * code` for an integral code, so
/// re-quantizing a grid point is the identity.
pub fn quantize_value(v: f64, spec: &QuantSpec) -> f64 {
    assert!(v.is_finite(), "quantize_value: non-finite input {v}");
    let max = spec.max_code() as f64;
    let lo = if spec.kind.is_one_sided() { 0.0 } else { -max };
    let code = (v / spec.delta).round().clamp(lo, max);
    spec.delta * code
}

/// Signed level index of `v`, offset-encoded to an unsigned code.
pub fn encode_value(v: f64, spec: &QuantSpec) -> u32 {
    assert!(v.is_finite(), "encode_value: non-finite input {v}");
    let max = spec.max_code() as f64;
    let lo = if spec.kind.is_one_sided() { 0.0 } else { -max };
    let code = (v / spec.delta).round().clamp(lo, max) as i64;
    (code + spec.code_offset() as i64) as u32
}

/// Grid value of an offset-encoded code. Inverse of [`encode_value`] on grid
/// points; produces exactly the same f64 as [`quantize_value`].
pub fn decode_code(code: u32, spec: &QuantSpec) -> f64 {
    let signed = code as i64 - spec.code_offset() as i64;
    spec.delta * signed as f64
}

/// Stream summary of one signal group's activations, used to fit delta.
///
/// Keeps a seeded reservoir sample of at most `cap` values plus the running
/// count and maximum, so memory stays bounded on large training sets while
/// the collected sample is reproducible.
#[derive(Debug, Clone)]
pub struct ActivationStats {
    group: String,
    cap: usize,
    seen: u64,
    max_value: f64,
    values: Vec<f64>,
    rng: rand_chacha::ChaCha8Rng,
}

pub const STATS_DEFAULT_CAP: usize = 1 << 20;

impl ActivationStats {
    pub fn new(group: impl Into<String>, seed: u64) -> Self {
        Self::with_cap(group, seed, STATS_DEFAULT_CAP)
    }

    pub fn with_cap(group: impl Into<String>, seed: u64, cap: usize) -> Self {
        use rand::SeedableRng;
        ActivationStats {
            group: group.into(),
            cap: cap.max(1),
            seen: 0,
            max_value: f64::NEG_INFINITY,
            values: Vec::new(),
            rng: rand_chacha::ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn record(&mut self, v: f64) {
        use rand::Rng;
        debug_assert!(v.is_finite());
        self.seen += 1;
        if v > self.max_value {
            self.max_value = v;
        }
        if self.values.len() < self.cap {
            self.values.push(v);
        } else {
            // Algorithm R: element i survives with probability cap/seen.
            let j = self.rng.gen_range(0..self.seen);
            if (j as usize) < self.cap {
                self.values[j as usize] = v;
            }
        }
    }

    pub fn record_all(&mut self, vs: &[f64]) {
        for &v in vs {
            self.record(v);
        }
    }

    pub fn group(&self) -> &str {
        &self.group
    }

    pub fn seen(&self) -> u64 {
        self.seen
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn max_value(&self) -> f64 {
        self.max_value
    }

    pub fn is_empty(&self) -> bool {
        self.seen == 0
    }
}

// Resolution of the final step-size search pass, and of the reference grid it
// is checked against: delta candidates are max * i / GRID_DENOM.
const GRID_DENOM: u64 = 100_000;
const COARSE_STRIDE: u64 = 100; // 1000 coarse points
const REFINE_KEEP: usize = 3;

fn l2_error(values: &[f64], delta: f64, max_code: f64, one_sided: bool) -> f64 {
    let lo = if one_sided { 0.0 } else { -max_code };
    let mut err = 0.0;
    for &v in values {
        let code = (v / delta).round().clamp(lo, max_code);
        let r = v - delta * code;
        err += r * r;
    }
    err
}

/// Coarse-to-fine grid search for the L2-optimal step size.
///
/// Candidates are `max * i / 100000`: a 1000-point coarse pass, then two
/// refinement passes that each shrink the stride by 10x around the best few
/// incumbents. The final pass runs at the full 1e-5 grid resolution, so the
/// result is never worse than any candidate on that grid near the optimum.
/// Ties keep the smallest delta. The winning delta is snapped to f32 and the
/// error re-evaluated at the snapped value.
fn search_step_size(values: &[f64], bits: u8, one_sided: bool) -> Result<(f64, f64)> {
    let levels = levels_for_bits(bits);
    let max_code = if one_sided { (levels - 1) as f64 } else { ((levels - 1) / 2) as f64 };
    let vmax = if one_sided {
        values.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    } else {
        values.iter().map(|v| v.abs()).fold(0.0, f64::max)
    };
    if !vmax.is_finite() || vmax <= 0.0 {
        return Err(Error::Numeric("step-size search needs a nonzero value range".into()));
    }

    let eval = |i: u64| -> (f64, f64) {
        let d = vmax * (i as f64) / GRID_DENOM as f64;
        (d, l2_error(values, d, max_code, one_sided))
    };

    // Keep the best `REFINE_KEEP` distinct indices, ties resolved toward the
    // smaller delta.
    let top = |cands: &mut Vec<(f64, u64)>| -> Vec<u64> {
        cands.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut out = Vec::new();
        for &(_, i) in cands.iter() {
            if !out.contains(&i) {
                out.push(i);
                if out.len() == REFINE_KEEP {
                    break;
                }
            }
        }
        out
    };

    let mut coarse: Vec<(f64, u64)> = (1..=1000u64)
        .map(|k| {
            let i = k * COARSE_STRIDE;
            (eval(i).1, i)
        })
        .collect();
    let seeds = top(&mut coarse);

    let mut pass2: Vec<(f64, u64)> = Vec::new();
    for &i0 in &seeds {
        let center = i0 / 10;
        for j in center.saturating_sub(10).max(1)..=(center + 10).min(GRID_DENOM / 10) {
            let i = j * 10;
            pass2.push((eval(i).1, i));
        }
    }
    let seeds2 = top(&mut pass2);

    let mut best: Option<(f64, u64)> = None;
    for &i1 in &seeds2 {
        for i in i1.saturating_sub(10).max(1)..=(i1 + 10).min(GRID_DENOM) {
            let (_, e) = eval(i);
            let better = match best {
                None => true,
                Some((be, bi)) => e < be || (e == be && i < bi),
            };
            if better {
                best = Some((e, i));
            }
        }
    }
    let (_, best_i) = best.expect("non-empty candidate set");
    let delta = snap_f32(vmax * (best_i as f64) / GRID_DENOM as f64);
    if delta <= 0.0 {
        return Err(Error::Numeric("fitted step size underflows f32".into()));
    }
    let err = l2_error(values, delta, max_code, one_sided);
    Ok((delta, err))
}

/// Fits the L2-optimal symmetric step size for a weight group (or any signed
/// value collection). Returns the spec; the achieved error is recoverable via
/// [`quantization_error`].
pub fn optimize_step_size(group: &str, values: &[f64], bits: u8) -> Result<QuantSpec> {
    if values.is_empty() {
        return Err(Error::Numeric(format!("group '{group}': no values to fit")));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("group '{group}': non-finite value")));
    }
    if values.iter().all(|&v| v == 0.0) {
        return Err(Error::Numeric(format!(
            "group '{group}': all values are zero, step size undefined"
        )));
    }
    let (delta, _) = search_step_size(values, bits, false)?;
    QuantSpec::new(group, bits, delta, GroupKind::Weight)
}

/// Fixed step size for a bounded activation so the grid endpoints coincide
/// with the activation's range endpoints.
pub fn fixed_step_size(kind: GroupKind, bits: u8, group: &str) -> Result<QuantSpec> {
    let levels = levels_for_bits(bits);
    let delta = match kind {
        GroupKind::SignalBoundedUnit => 1.0 / (levels - 1) as f64,
        GroupKind::SignalBoundedSym => 2.0 / (levels - 1) as f64,
        _ => {
            return Err(Error::InvalidArg(format!(
                "fixed_step_size only applies to bounded signal kinds, got {}",
                kind.label()
            )))
        }
    };
    QuantSpec::new(group, bits, delta, kind)
}

/// Fits the one-sided step size for a rectified-linear signal group from its
/// collected activation statistics.
pub fn optimize_relu_step_size(stats: &ActivationStats, bits: u8) -> Result<QuantSpec> {
    let group = stats.group().to_string();
    if stats.is_empty() {
        return Err(Error::Numeric(format!("group '{group}': no activations collected")));
    }
    if stats.values().iter().any(|&v| v < 0.0) {
        return Err(Error::Numeric(format!(
            "group '{group}': negative value in rectified-activation stats"
        )));
    }
    if stats.max_value() <= 0.0 {
        return Err(Error::Numeric(format!(
            "group '{group}': all activations are zero (dead layer)"
        )));
    }
    let (delta, _) = search_step_size(stats.values(), bits, true)?;
    QuantSpec::new(group, bits, delta, GroupKind::SignalUnbounded)
}

/// Fits a symmetric step size from collected signal statistics; used for
/// signed unbounded inputs such as raw acceleration data.
pub fn optimize_symmetric_step_size(stats: &ActivationStats, bits: u8) -> Result<QuantSpec> {
    optimize_step_size(stats.group(), stats.values(), bits)
}

/// L2 reconstruction error of `values` under `spec`.
pub fn quantization_error(values: &[f64], spec: &QuantSpec) -> f64 {
    l2_error(values, spec.delta, spec.max_code() as f64, spec.kind.is_one_sided())
}

/// Packs offset-encoded codes at `bits` per code, little-endian within bytes
/// (the first code occupies the least-significant bits of byte 0). The packed
/// length is `ceil(count * bits / 8)` bytes; padding bits are zero.
pub fn pack_codes(codes: &[u32], bits: u8) -> Result<Vec<u8>> {
    if !(2..=16).contains(&bits) {
        return Err(Error::InvalidArg(format!("pack bits must be in 2..=16, got {bits}")));
    }
    let limit = 1u32 << bits;
    let mut out = vec![0u8; packed_len(codes.len(), bits)];
    let mut bitpos = 0usize;
    for &c in codes {
        if c >= limit {
            return Err(Error::InvalidArg(format!("code {c} does not fit in {bits} bits")));
        }
        let mut v = c;
        let mut nbits = bits as usize;
        while nbits > 0 {
            let byte = bitpos / 8;
            let off = bitpos % 8;
            let take = (8 - off).min(nbits);
            out[byte] |= ((v & ((1u32 << take) - 1)) as u8) << off;
            v >>= take;
            nbits -= take;
            bitpos += take;
        }
    }
    Ok(out)
}

/// Inverse of [`pack_codes`]. The byte slice must have exactly the packed
/// length for `count` codes and zero padding bits.
pub fn unpack_codes(bytes: &[u8], bits: u8, count: usize) -> Result<Vec<u32>> {
    if !(2..=16).contains(&bits) {
        return Err(Error::InvalidArg(format!("pack bits must be in 2..=16, got {bits}")));
    }
    let expect = packed_len(count, bits);
    if bytes.len() != expect {
        return Err(Error::Format(format!(
            "packed payload is {} bytes, expected {expect} for {count} codes at {bits} bits",
            bytes.len()
        )));
    }
    let mut out = Vec::with_capacity(count);
    let mut bitpos = 0usize;
    for _ in 0..count {
        let mut v = 0u32;
        let mut got = 0usize;
        while got < bits as usize {
            let byte = bitpos / 8;
            let off = bitpos % 8;
            let take = (8 - off).min(bits as usize - got);
            let chunk = (bytes[byte] >> off) as u32 & ((1u32 << take) - 1);
            v |= chunk << got;
            got += take;
            bitpos += take;
        }
        out.push(v);
    }
    // Padding bits past the last code must be zero for canonical encoding.
    if count * bits as usize % 8 != 0 {
        let byte = bytes[expect - 1];
        let used = (count * bits as usize) - (expect - 1) * 8;
        if byte >> used != 0 {
            return Err(Error::Format("nonzero padding bits in packed payload".into()));
        }
    }
    Ok(out)
}

/// Bytes needed for `count` codes at `bits` per code.
pub fn packed_len(count: usize, bits: u8) -> usize {
    (count * bits as usize + 7) / 8
}

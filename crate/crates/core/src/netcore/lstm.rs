//! Peephole LSTM step: forward, traced forward for BPTT, and backward.
//!
//! The gate order inside both weight groups is input, forget, cell candidate,
//! output. The input group holds the four `units x input_size` blocks; the
//! recurrent group holds the four `units x units` blocks, then the four bias
//! vectors, then the three peephole vectors (input, forget, output), which is
//! what makes the per-layer parameter count come out to
//! `4N^2 + 4NM + 7N`.

use crate::error::{Error, Result};
use crate::netcore::ops::sigmoid;
use crate::quantizer::{fixed_step_size, quantize_value, GroupKind, QuantSpec};

/// Hidden and cell state of one LSTM layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmState {
    pub hidden: Vec<f64>,
    pub cell: Vec<f64>,
}

impl LstmState {
    pub fn zeros(units: usize) -> Self {
        LstmState { hidden: vec![0.0; units], cell: vec![0.0; units] }
    }

    pub fn is_finite(&self) -> bool {
        self.hidden.iter().chain(&self.cell).all(|v| v.is_finite())
    }
}

/// Borrowed views into the two flat weight groups of an LSTM layer.
pub(crate) struct LstmWeights<'a> {
    pub n: usize,
    pub m: usize,
    pub wi: &'a [f64],
    pub wf: &'a [f64],
    pub wg: &'a [f64],
    pub wo: &'a [f64],
    pub ri: &'a [f64],
    pub rf: &'a [f64],
    pub rg: &'a [f64],
    pub ro: &'a [f64],
    pub bi: &'a [f64],
    pub bf: &'a [f64],
    pub bg: &'a [f64],
    pub bo: &'a [f64],
    pub pi: &'a [f64],
    pub pf: &'a [f64],
    pub po: &'a [f64],
}

impl<'a> LstmWeights<'a> {
    pub fn from_groups(input: &'a [f64], recurrent: &'a [f64], n: usize, m: usize) -> Result<Self> {
        if input.len() != 4 * n * m {
            return Err(Error::Shape(format!(
                "LSTM input group has {} values, expected {}",
                input.len(),
                4 * n * m
            )));
        }
        if recurrent.len() != 4 * n * n + 7 * n {
            return Err(Error::Shape(format!(
                "LSTM recurrent group has {} values, expected {}",
                recurrent.len(),
                4 * n * n + 7 * n
            )));
        }
        let nm = n * m;
        let nn = n * n;
        let (wi, rest) = input.split_at(nm);
        let (wf, rest) = rest.split_at(nm);
        let (wg, wo) = rest.split_at(nm);
        let (ri, rest) = recurrent.split_at(nn);
        let (rf, rest) = rest.split_at(nn);
        let (rg, rest) = rest.split_at(nn);
        let (ro, rest) = rest.split_at(nn);
        let (bi, rest) = rest.split_at(n);
        let (bf, rest) = rest.split_at(n);
        let (bg, rest) = rest.split_at(n);
        let (bo, rest) = rest.split_at(n);
        let (pi, rest) = rest.split_at(n);
        let (pf, po) = rest.split_at(n);
        Ok(LstmWeights { n, m, wi, wf, wg, wo, ri, rf, rg, ro, bi, bf, bg, bo, pi, pf, po })
    }
}

/// Mutable views into the gradient buffers of the two groups, with the same
/// layout as [`LstmWeights`].
pub(crate) struct LstmGrads<'a> {
    pub wi: &'a mut [f64],
    pub wf: &'a mut [f64],
    pub wg: &'a mut [f64],
    pub wo: &'a mut [f64],
    pub ri: &'a mut [f64],
    pub rf: &'a mut [f64],
    pub rg: &'a mut [f64],
    pub ro: &'a mut [f64],
    pub bi: &'a mut [f64],
    pub bf: &'a mut [f64],
    pub bg: &'a mut [f64],
    pub bo: &'a mut [f64],
    pub pi: &'a mut [f64],
    pub pf: &'a mut [f64],
    pub po: &'a mut [f64],
}

impl<'a> LstmGrads<'a> {
    pub fn from_groups(input: &'a mut [f64], recurrent: &'a mut [f64], n: usize, m: usize) -> Self {
        let nm = n * m;
        let nn = n * n;
        let (wi, rest) = input.split_at_mut(nm);
        let (wf, rest) = rest.split_at_mut(nm);
        let (wg, wo) = rest.split_at_mut(nm);
        let (ri, rest) = recurrent.split_at_mut(nn);
        let (rf, rest) = rest.split_at_mut(nn);
        let (rg, rest) = rest.split_at_mut(nn);
        let (ro, rest) = rest.split_at_mut(nn);
        let (bi, rest) = rest.split_at_mut(n);
        let (bf, rest) = rest.split_at_mut(n);
        let (bg, rest) = rest.split_at_mut(n);
        let (bo, rest) = rest.split_at_mut(n);
        let (pi, rest) = rest.split_at_mut(n);
        let (pf, po) = rest.split_at_mut(n);
        LstmGrads { wi, wf, wg, wo, ri, rf, rg, ro, bi, bf, bg, bo, pi, pf, po }
    }
}

/// The two grids an LSTM signal group uses: sigmoid gates quantize on the
/// one-sided unit grid, tanh outputs and the hidden state on the symmetric
/// grid. Both are fixed by the group's bit-width.
#[derive(Debug, Clone)]
pub(crate) struct SignalQuant {
    pub unit: QuantSpec,
    pub sym: QuantSpec,
}

impl SignalQuant {
    pub fn for_bits(group: &str, bits: u8) -> Result<Self> {
        Ok(SignalQuant {
            unit: fixed_step_size(GroupKind::SignalBoundedUnit, bits, group)?,
            sym: fixed_step_size(GroupKind::SignalBoundedSym, bits, group)?,
        })
    }

    fn unit_q(&self, v: f64) -> f64 {
        quantize_value(v, &self.unit)
    }

    fn sym_q(&self, v: f64) -> f64 {
        quantize_value(v, &self.sym)
    }
}

/// Everything the backward pass needs about one step. Stored activations are
/// post-quantization when a signal quantizer is attached.
#[derive(Debug, Clone)]
pub(crate) struct LstmStepTrace {
    pub x: Vec<f64>,
    pub h_prev: Vec<f64>,
    pub c_prev: Vec<f64>,
    pub gate_i: Vec<f64>,
    pub gate_f: Vec<f64>,
    pub gate_g: Vec<f64>,
    pub gate_o: Vec<f64>,
    pub cell: Vec<f64>,
    pub cell_tanh: Vec<f64>,
    pub hidden: Vec<f64>,
}

fn matvec_into(acc: &mut [f64], w: &[f64], x: &[f64], n: usize, m: usize) {
    for row in 0..n {
        let wr = &w[row * m..(row + 1) * m];
        let mut s = 0.0;
        for (wv, xv) in wr.iter().zip(x) {
            s += wv * xv;
        }
        acc[row] += s;
    }
}

/// One LSTM step. `x` must already carry any upstream signal quantization.
/// Updates `state` in place and returns the full trace.
pub(crate) fn lstm_step_traced(
    x: &[f64],
    state: &mut LstmState,
    w: &LstmWeights<'_>,
    quant: Option<&SignalQuant>,
) -> LstmStepTrace {
    let n = w.n;
    let h_prev = state.hidden.clone();
    let c_prev = state.cell.clone();

    let mut pre_i = w.bi.to_vec();
    let mut pre_f = w.bf.to_vec();
    let mut pre_g = w.bg.to_vec();
    let mut pre_o = w.bo.to_vec();
    matvec_into(&mut pre_i, w.wi, x, n, w.m);
    matvec_into(&mut pre_f, w.wf, x, n, w.m);
    matvec_into(&mut pre_g, w.wg, x, n, w.m);
    matvec_into(&mut pre_o, w.wo, x, n, w.m);
    matvec_into(&mut pre_i, w.ri, &h_prev, n, n);
    matvec_into(&mut pre_f, w.rf, &h_prev, n, n);
    matvec_into(&mut pre_g, w.rg, &h_prev, n, n);
    matvec_into(&mut pre_o, w.ro, &h_prev, n, n);

    let mut gate_i = Vec::with_capacity(n);
    let mut gate_f = Vec::with_capacity(n);
    let mut gate_g = Vec::with_capacity(n);
    let mut cell = Vec::with_capacity(n);
    for k in 0..n {
        let mut iv = sigmoid(pre_i[k] + w.pi[k] * c_prev[k]);
        let mut fv = sigmoid(pre_f[k] + w.pf[k] * c_prev[k]);
        let mut gv = pre_g[k].tanh();
        if let Some(q) = quant {
            iv = q.unit_q(iv);
            fv = q.unit_q(fv);
            gv = q.sym_q(gv);
        }
        gate_i.push(iv);
        gate_f.push(fv);
        gate_g.push(gv);
        cell.push(fv * c_prev[k] + iv * gv);
    }

    let mut gate_o = Vec::with_capacity(n);
    let mut cell_tanh = Vec::with_capacity(n);
    let mut hidden = Vec::with_capacity(n);
    for k in 0..n {
        let mut ov = sigmoid(pre_o[k] + w.po[k] * cell[k]);
        let mut tc = cell[k].tanh();
        if let Some(q) = quant {
            ov = q.unit_q(ov);
            tc = q.sym_q(tc);
        }
        let mut hv = ov * tc;
        if let Some(q) = quant {
            hv = q.sym_q(hv);
        }
        gate_o.push(ov);
        cell_tanh.push(tc);
        hidden.push(hv);
    }

    state.hidden.copy_from_slice(&hidden);
    state.cell.copy_from_slice(&cell);
    LstmStepTrace {
        x: x.to_vec(),
        h_prev,
        c_prev,
        gate_i,
        gate_f,
        gate_g,
        gate_o,
        cell,
        cell_tanh,
        hidden,
    }
}

/// Standalone LSTM step over raw weight-group slices. Returns the new hidden
/// vector; `state` is advanced in place.
pub fn lstm_step(
    x: &[f64],
    state: &mut LstmState,
    input_group: &[f64],
    recurrent_group: &[f64],
    units: usize,
    input_size: usize,
    signal_spec: Option<&QuantSpec>,
) -> Result<Vec<f64>> {
    if x.len() != input_size {
        return Err(Error::Shape(format!("LSTM input length {} != {input_size}", x.len())));
    }
    if state.hidden.len() != units || state.cell.len() != units {
        return Err(Error::Shape("LSTM state size mismatch".into()));
    }
    if !state.is_finite() {
        return Err(Error::Numeric("non-finite LSTM state".into()));
    }
    let w = LstmWeights::from_groups(input_group, recurrent_group, units, input_size)?;
    let quant = match signal_spec {
        Some(spec) => Some(SignalQuant::for_bits(&spec.group, spec.bits)?),
        None => None,
    };
    let trace = lstm_step_traced(x, state, &w, quant.as_ref());
    Ok(trace.hidden)
}

/// Backward through one step. Gradients of the signal quantizers are treated
/// as identity (straight-through), with nonlinearity derivatives evaluated
/// from the stored activations.
///
/// `dh`/`dc` are the incoming gradients w.r.t. this step's hidden and cell
/// outputs; on return they hold the gradients w.r.t. the previous step's.
/// Returns the gradient w.r.t. `x` when requested.
pub(crate) fn lstm_step_backward(
    trace: &LstmStepTrace,
    w: &LstmWeights<'_>,
    dh: &mut Vec<f64>,
    dc: &mut Vec<f64>,
    grads: &mut LstmGrads<'_>,
    want_dx: bool,
) -> Option<Vec<f64>> {
    let n = w.n;
    let m = w.m;
    let mut dpre_i = vec![0.0; n];
    let mut dpre_f = vec![0.0; n];
    let mut dpre_g = vec![0.0; n];
    let mut dpre_o = vec![0.0; n];
    let mut dc_prev = vec![0.0; n];

    for k in 0..n {
        let o = trace.gate_o[k];
        let tc = trace.cell_tanh[k];
        let do_ = dh[k] * tc;
        let mut dck = dc[k] + dh[k] * o * (1.0 - tc * tc);
        let dpo = do_ * o * (1.0 - o);
        dpre_o[k] = dpo;
        grads.po[k] += dpo * trace.cell[k];
        dck += dpo * w.po[k];

        let i = trace.gate_i[k];
        let f = trace.gate_f[k];
        let g = trace.gate_g[k];
        let di = dck * g;
        let df = dck * trace.c_prev[k];
        let dg = dck * i;
        dc_prev[k] = dck * f;

        let dpi = di * i * (1.0 - i);
        let dpf = df * f * (1.0 - f);
        dpre_i[k] = dpi;
        dpre_f[k] = dpf;
        dpre_g[k] = dg * (1.0 - g * g);
        grads.pi[k] += dpi * trace.c_prev[k];
        grads.pf[k] += dpf * trace.c_prev[k];
        dc_prev[k] += dpi * w.pi[k] + dpf * w.pf[k];
    }

    let mut dh_prev = vec![0.0; n];
    let mut dx = if want_dx { Some(vec![0.0; m]) } else { None };
    let accumulate = |dpre: &[f64],
                          wx: &[f64],
                          rh: &[f64],
                          gwx: &mut [f64],
                          grh: &mut [f64],
                          gb: &mut [f64],
                          dh_prev: &mut [f64],
                          dx: &mut Option<Vec<f64>>| {
        for k in 0..n {
            let g = dpre[k];
            if g == 0.0 {
                continue;
            }
            gb[k] += g;
            let wrow = &wx[k * m..(k + 1) * m];
            let gwrow = &mut gwx[k * m..(k + 1) * m];
            for j in 0..m {
                gwrow[j] += trace.x[j] * g;
            }
            if let Some(dx) = dx.as_mut() {
                for j in 0..m {
                    dx[j] += wrow[j] * g;
                }
            }
            let rrow = &rh[k * n..(k + 1) * n];
            let grrow = &mut grh[k * n..(k + 1) * n];
            for j in 0..n {
                grrow[j] += trace.h_prev[j] * g;
                dh_prev[j] += rrow[j] * g;
            }
        }
    };
    accumulate(&dpre_i, w.wi, w.ri, grads.wi, grads.ri, grads.bi, &mut dh_prev, &mut dx);
    accumulate(&dpre_f, w.wf, w.rf, grads.wf, grads.rf, grads.bf, &mut dh_prev, &mut dx);
    accumulate(&dpre_g, w.wg, w.rg, grads.wg, grads.rg, grads.bg, &mut dh_prev, &mut dx);
    accumulate(&dpre_o, w.wo, w.ro, grads.wo, grads.ro, grads.bo, &mut dh_prev, &mut dx);

    *dh = dh_prev;
    *dc = dc_prev;
    dx
}

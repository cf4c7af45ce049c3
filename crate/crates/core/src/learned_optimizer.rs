//! Two-level GRU learned optimizer.
//!
//! A per-parameter GRU reads preprocessed gradient features for each task
//! coordinate; a per-tensor GRU reads the mean of the per-parameter hidden
//! states and its output is added to every per-parameter hidden state before
//! the per-parameter update. A linear projection of each per-parameter hidden
//! state, scaled by `exp(log_step)`, is the emitted update.
//!
//! [`meta_backward`] backpropagates the summed task loss through the whole
//! unroll. Task gradients fed to the optimizer are treated as constants, so no
//! second derivatives of task losses are required.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{axpy, check_len, dot, ensure_finite, RngStream, Vec64};

/// Decay of the per-coordinate squared-gradient average.
pub const RMS_DECAY: f64 = 0.95;
pub const FEATURE_EPS: f64 = 1e-8;
pub const FEATURE_CLAMP: f64 = 10.0;
/// Features per task coordinate fed to the per-parameter GRU.
pub const PARAM_FEATURES: usize = 2;
pub const DEFAULT_HIDDEN: usize = 8;
const INIT_SCALE: f64 = 0.1;
const INIT_STEP: f64 = 0.01;

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// GRU weights with gate rows ordered `[update z; reset r; candidate n]`.
///
/// ```text
/// z  = σ(W_z x + U_z h + b_z)
/// r  = σ(W_r x + U_r h + b_r)
/// n  = tanh(W_n x + U_n (r ⊙ h) + b_n)
/// h' = (1 − z) ⊙ n + z ⊙ h
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GruWeights {
    pub input: usize,
    pub hidden: usize,
    /// `3H × I`, row-major.
    pub w: Vec64,
    /// `3H × H`, row-major.
    pub u: Vec64,
    /// `3H`
    pub b: Vec64,
}

/// Gate activations saved by the forward pass.
struct GateBuffers<'a> {
    z: &'a mut [f64],
    r: &'a mut [f64],
    n: &'a mut [f64],
}

impl GruWeights {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        Self {
            input,
            hidden,
            w: vec![0.0; 3 * hidden * input],
            u: vec![0.0; 3 * hidden * hidden],
            b: vec![0.0; 3 * hidden],
        }
    }

    pub fn param_count(input: usize, hidden: usize) -> usize {
        3 * (input + hidden + 1) * hidden
    }

    fn random(input: usize, hidden: usize, rng: &mut RngStream) -> Self {
        let mut g = Self::zeros(input, hidden);
        for v in g.w.iter_mut().chain(g.u.iter_mut()).chain(g.b.iter_mut()) {
            *v = rng.uniform_range(-INIT_SCALE, INIT_SCALE);
        }
        g
    }

    #[inline]
    fn w_row(&self, row: usize) -> &[f64] {
        &self.w[row * self.input..(row + 1) * self.input]
    }

    #[inline]
    fn u_row(&self, row: usize) -> &[f64] {
        &self.u[row * self.hidden..(row + 1) * self.hidden]
    }

    fn forward(&self, x: &[f64], h: &[f64], gates: GateBuffers<'_>, out: &mut [f64]) {
        let hd = self.hidden;
        for j in 0..hd {
            gates.z[j] = sigmoid(self.b[j] + dot(self.w_row(j), x) + dot(self.u_row(j), h));
            gates.r[j] =
                sigmoid(self.b[hd + j] + dot(self.w_row(hd + j), x) + dot(self.u_row(hd + j), h));
        }
        // r ⊙ h goes through `out` as scratch before the final blend
        for k in 0..hd {
            out[k] = gates.r[k] * h[k];
        }
        for j in 0..hd {
            let row = 2 * hd + j;
            gates.n[j] = (self.b[row] + dot(self.w_row(row), x) + dot(self.u_row(row), out)).tanh();
        }
        for j in 0..hd {
            out[j] = (1.0 - gates.z[j]) * gates.n[j] + gates.z[j] * h[j];
        }
    }

    /// Accumulates weight gradients into `grads`, input gradient into `dx`
    /// (when requested) and hidden-state gradient into `dh`.
    #[allow(clippy::too_many_arguments)]
    fn backward(
        &self,
        x: &[f64],
        h: &[f64],
        z: &[f64],
        r: &[f64],
        n: &[f64],
        dout: &[f64],
        grads: &mut GruWeights,
        mut dx: Option<&mut [f64]>,
        dh: &mut [f64],
        scratch: &mut GruScratch,
    ) {
        let hd = self.hidden;
        let GruScratch { da, drh } = scratch;
        for j in 0..hd {
            let dn = dout[j] * (1.0 - z[j]);
            let dz = dout[j] * (h[j] - n[j]);
            dh[j] += dout[j] * z[j];
            da[j] = dz * z[j] * (1.0 - z[j]);
            da[2 * hd + j] = dn * (1.0 - n[j] * n[j]);
        }
        drh.iter_mut().for_each(|v| *v = 0.0);
        for j in 0..hd {
            axpy(da[2 * hd + j], self.u_row(2 * hd + j), drh);
        }
        for k in 0..hd {
            let dr = drh[k] * h[k];
            dh[k] += drh[k] * r[k];
            da[hd + k] = dr * r[k] * (1.0 - r[k]);
        }

        for (row, &d) in da.iter().enumerate() {
            if d == 0.0 {
                continue;
            }
            axpy(d, x, &mut grads.w[row * self.input..(row + 1) * self.input]);
            grads.b[row] += d;
            let urow = &mut grads.u[row * hd..(row + 1) * hd];
            if row < 2 * hd {
                axpy(d, h, urow);
            } else {
                for k in 0..hd {
                    urow[k] += d * r[k] * h[k];
                }
            }
            if let Some(dx) = dx.as_deref_mut() {
                axpy(d, self.w_row(row), dx);
            }
            if row < 2 * hd {
                axpy(d, self.u_row(row), dh);
            }
        }
    }
}

struct GruScratch {
    da: Vec64,
    drh: Vec64,
}

impl GruScratch {
    fn new(hidden: usize) -> Self {
        Self {
            da: vec![0.0; 3 * hidden],
            drh: vec![0.0; hidden],
        }
    }
}

/// The meta-parameters `w` of the learned optimizer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerParams {
    pub param_gru: GruWeights,
    pub tensor_gru: GruWeights,
    pub out_w: Vec64,
    pub out_b: f64,
    pub log_step: f64,
}

/// Fresh optimizer: GRU weights uniform in ±0.1, zero output projection,
/// step scale 0.01.
pub fn init_params(seed: u64, hidden: usize) -> Result<OptimizerParams> {
    if hidden == 0 {
        return Err(Error::config("optimizer hidden size must be at least 1"));
    }
    let mut rng = RngStream::derive(seed, &[0x6f70_7469]);
    Ok(OptimizerParams {
        param_gru: GruWeights::random(PARAM_FEATURES, hidden, &mut rng),
        tensor_gru: GruWeights::random(hidden, hidden, &mut rng),
        out_w: vec![0.0; hidden],
        out_b: 0.0,
        log_step: INIT_STEP.ln(),
    })
}

impl OptimizerParams {
    pub fn zeros(hidden: usize) -> Self {
        Self {
            param_gru: GruWeights::zeros(PARAM_FEATURES, hidden),
            tensor_gru: GruWeights::zeros(hidden, hidden),
            out_w: vec![0.0; hidden],
            out_b: 0.0,
            log_step: 0.0,
        }
    }

    pub fn hidden(&self) -> usize {
        self.out_w.len()
    }

    /// `3(2+H+1)H + 3(2H+1)H + (H+1) + 1`
    pub fn flat_len(hidden: usize) -> usize {
        GruWeights::param_count(PARAM_FEATURES, hidden)
            + GruWeights::param_count(hidden, hidden)
            + hidden
            + 2
    }

    /// Inverse of [`flat_len`](Self::flat_len).
    pub fn hidden_for_flat_len(len: usize) -> Option<usize> {
        (1..=4096).find(|&h| Self::flat_len(h) == len)
    }

    /// Offsets of each block inside the flat vector.
    pub fn layout(hidden: usize) -> FlatLayout {
        let p = GruWeights::param_count(PARAM_FEATURES, hidden);
        let t = GruWeights::param_count(hidden, hidden);
        FlatLayout {
            param_gru: 0..p,
            tensor_gru: p..p + t,
            out_w: p + t..p + t + hidden,
            out_b: p + t + hidden,
            log_step: p + t + hidden + 1,
        }
    }

    pub fn flatten(&self) -> Vec64 {
        let mut flat = Vec::with_capacity(Self::flat_len(self.hidden()));
        for g in [&self.param_gru, &self.tensor_gru] {
            flat.extend_from_slice(&g.w);
            flat.extend_from_slice(&g.u);
            flat.extend_from_slice(&g.b);
        }
        flat.extend_from_slice(&self.out_w);
        flat.push(self.out_b);
        flat.push(self.log_step);
        flat
    }

    pub fn unflatten(hidden: usize, flat: &[f64]) -> Result<Self> {
        check_len(Self::flat_len(hidden), flat.len())?;
        let mut rest = flat;
        let mut take = |n: usize| {
            let (head, tail) = rest.split_at(n);
            rest = tail;
            head.to_vec()
        };
        let mut gru = |input: usize| GruWeights {
            input,
            hidden,
            w: take(3 * hidden * input),
            u: take(3 * hidden * hidden),
            b: take(3 * hidden),
        };
        let param_gru = gru(PARAM_FEATURES);
        let tensor_gru = gru(hidden);
        let out_w = take(hidden);
        let tail = take(2);
        Ok(Self {
            param_gru,
            tensor_gru,
            out_w,
            out_b: tail[0],
            log_step: tail[1],
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlatLayout {
    pub param_gru: std::ops::Range<usize>,
    pub tensor_gru: std::ops::Range<usize>,
    pub out_w: std::ops::Range<usize>,
    pub out_b: usize,
    pub log_step: usize,
}

/// Recurrent state carried across the steps of one task's training.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    /// `dims × H` per-parameter hidden states.
    pub hp: Vec64,
    /// Per-tensor hidden state.
    pub ht: Vec64,
    /// Running squared-gradient average per coordinate.
    pub rms: Vec64,
}

impl OptimizerState {
    pub fn new(dims: usize, hidden: usize) -> Self {
        Self {
            hp: vec![0.0; dims * hidden],
            ht: vec![0.0; hidden],
            rms: vec![0.0; dims],
        }
    }

    pub fn dims(&self) -> usize {
        self.rms.len()
    }
}

/// Per-coordinate features `[g/√(rms+ε), ln(rms+ε)/10]`, each clamped to ±10,
/// interleaved as a `dims × 2` row-major matrix.
pub fn preprocess_gradient(g: &[f64], rms: &[f64], eps: f64) -> Result<Vec64> {
    check_len(g.len(), rms.len())?;
    let mut out = Vec::with_capacity(2 * g.len());
    for (gi, ri) in g.iter().zip(rms) {
        let scaled = gi / (ri + eps).sqrt();
        let magnitude = (ri + eps).ln() / 10.0;
        out.push(scaled.clamp(-FEATURE_CLAMP, FEATURE_CLAMP));
        out.push(magnitude.clamp(-FEATURE_CLAMP, FEATURE_CLAMP));
    }
    Ok(out)
}

/// Everything the backward pass needs from one optimizer step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub features: Vec64,
    pub ht_prev: Vec64,
    pub mean_hp: Vec64,
    pub tensor_z: Vec64,
    pub tensor_r: Vec64,
    pub tensor_n: Vec64,
    pub ht_new: Vec64,
    /// Per-parameter GRU hidden input `h_p + h_t'` (`dims × H`).
    pub param_in: Vec64,
    pub param_z: Vec64,
    pub param_r: Vec64,
    pub param_n: Vec64,
    pub hp_new: Vec64,
    pub delta: Vec64,
    /// Task loss at the parameters the gradient was taken at.
    pub loss: f64,
    pub grad: Vec64,
}

/// Ordered record of an unrolled task loop.
#[derive(Debug, Clone, PartialEq)]
pub struct UnrollTape {
    pub dims: usize,
    pub hidden: usize,
    pub steps: Vec<StepRecord>,
}

impl UnrollTape {
    pub fn new(dims: usize, hidden: usize) -> Self {
        Self {
            dims,
            hidden,
            steps: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn meta_loss(&self) -> f64 {
        self.steps.iter().map(|s| s.loss).sum()
    }
}

/// One optimizer step: returns the update to add to the task parameters and
/// the successor state.
pub fn optimizer_step(
    w: &OptimizerParams,
    state: &OptimizerState,
    g: &[f64],
) -> Result<(Vec64, OptimizerState)> {
    let mut next = state.clone();
    let rec = step_recorded(w, &mut next, g)?;
    Ok((rec.delta, next))
}

/// Like [`optimizer_step`] but advances `state` in place and keeps the
/// intermediates for [`meta_backward`]. `loss` is left at zero.
pub fn step_recorded(
    w: &OptimizerParams,
    state: &mut OptimizerState,
    g: &[f64],
) -> Result<StepRecord> {
    let hd = w.hidden();
    let dims = state.dims();
    check_len(dims, g.len())?;
    check_len(dims * hd, state.hp.len())?;
    check_len(hd, state.ht.len())?;
    ensure_finite(g)?;

    for (r, gi) in state.rms.iter_mut().zip(g) {
        *r = RMS_DECAY * *r + (1.0 - RMS_DECAY) * gi * gi;
    }
    let features = preprocess_gradient(g, &state.rms, FEATURE_EPS)?;

    let mut mean_hp = vec![0.0; hd];
    for row in state.hp.chunks_exact(hd) {
        axpy(1.0, row, &mut mean_hp);
    }
    let inv = 1.0 / dims as f64;
    mean_hp.iter_mut().for_each(|v| *v *= inv);

    let (mut tz, mut tr, mut tn, mut ht_new) =
        (vec![0.0; hd], vec![0.0; hd], vec![0.0; hd], vec![0.0; hd]);
    w.tensor_gru.forward(
        &mean_hp,
        &state.ht,
        GateBuffers {
            z: &mut tz,
            r: &mut tr,
            n: &mut tn,
        },
        &mut ht_new,
    );

    let mut param_in = state.hp.clone();
    for row in param_in.chunks_exact_mut(hd) {
        axpy(1.0, &ht_new, row);
    }
    let (mut pz, mut pr, mut pn, mut hp_new) = (
        vec![0.0; dims * hd],
        vec![0.0; dims * hd],
        vec![0.0; dims * hd],
        vec![0.0; dims * hd],
    );
    let scale = w.log_step.exp();
    let mut delta = Vec::with_capacity(dims);
    for i in 0..dims {
        let span = i * hd..(i + 1) * hd;
        w.param_gru.forward(
            &features[i * PARAM_FEATURES..(i + 1) * PARAM_FEATURES],
            &param_in[span.clone()],
            GateBuffers {
                z: &mut pz[span.clone()],
                r: &mut pr[span.clone()],
                n: &mut pn[span.clone()],
            },
            &mut hp_new[span.clone()],
        );
        delta.push(-scale * (dot(&w.out_w, &hp_new[span]) + w.out_b));
    }
    ensure_finite(&delta)
        .map_err(|_| Error::Numeric("optimizer emitted a non-finite update".into()))?;

    let ht_prev = std::mem::replace(&mut state.ht, ht_new.clone());
    state.hp.copy_from_slice(&hp_new);

    Ok(StepRecord {
        features,
        ht_prev,
        mean_hp,
        tensor_z: tz,
        tensor_r: tr,
        tensor_n: tn,
        ht_new,
        param_in,
        param_z: pz,
        param_r: pr,
        param_n: pn,
        hp_new,
        delta,
        loss: 0.0,
        grad: g.to_vec(),
    })
}

fn check_tape(w: &OptimizerParams, tape: &UnrollTape) -> Result<()> {
    let (hd, dims) = (w.hidden(), tape.dims);
    if tape.hidden != hd {
        return Err(Error::Consistency(format!(
            "tape recorded with hidden size {}, params have {hd}",
            tape.hidden
        )));
    }
    for (t, s) in tape.steps.iter().enumerate() {
        let ok = s.features.len() == dims * PARAM_FEATURES
            && s.delta.len() == dims
            && s.grad.len() == dims
            && s.hp_new.len() == dims * hd
            && s.param_in.len() == dims * hd
            && s.ht_new.len() == hd
            && s.mean_hp.len() == hd;
        if !ok {
            return Err(Error::Consistency(format!(
                "tape step {t} has inconsistent shapes"
            )));
        }
    }
    Ok(())
}

/// Gradient of `Σ_t L(θ_t)` with respect to the flattened optimizer
/// parameters, backpropagated through every recorded step with the task
/// gradients held constant.
pub fn meta_backward(w: &OptimizerParams, tape: &UnrollTape) -> Result<Vec64> {
    check_tape(w, tape)?;
    let (hd, dims) = (w.hidden(), tape.dims);
    let mut grads = OptimizerParams::zeros(hd);
    let scale = w.log_step.exp();

    // θ_t = θ_0 + Σ_{s<t} δ_s, so ∂/∂δ_s of Σ_t L(θ_t) is Σ_{t>s} g_t.
    let mut later_grads = vec![0.0; dims];
    let mut dhp_next = vec![0.0; dims * hd];
    let mut dht_next = vec![0.0; hd];
    let mut dhp_new = vec![0.0; dims * hd];
    let mut dhp_prev = vec![0.0; dims * hd];
    let mut dht_new = vec![0.0; hd];
    let mut dht_prev = vec![0.0; hd];
    let mut dmean = vec![0.0; hd];
    let mut dparam_in = vec![0.0; hd];
    let mut scratch = GruScratch::new(hd);

    for rec in tape.steps.iter().rev() {
        dhp_new.copy_from_slice(&dhp_next);
        for (i, &adj) in later_grads.iter().enumerate() {
            if adj == 0.0 {
                continue;
            }
            grads.log_step += adj * rec.delta[i];
            let coeff = -scale * adj;
            let span = i * hd..(i + 1) * hd;
            axpy(coeff, &rec.hp_new[span.clone()], &mut grads.out_w);
            grads.out_b += coeff;
            axpy(coeff, &w.out_w, &mut dhp_new[span]);
        }

        dht_new.copy_from_slice(&dht_next);
        dhp_prev.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..dims {
            let span = i * hd..(i + 1) * hd;
            dparam_in.iter_mut().for_each(|v| *v = 0.0);
            w.param_gru.backward(
                &rec.features[i * PARAM_FEATURES..(i + 1) * PARAM_FEATURES],
                &rec.param_in[span.clone()],
                &rec.param_z[span.clone()],
                &rec.param_r[span.clone()],
                &rec.param_n[span.clone()],
                &dhp_new[span.clone()],
                &mut grads.param_gru,
                None,
                &mut dparam_in,
                &mut scratch,
            );
            axpy(1.0, &dparam_in, &mut dhp_prev[span]);
            axpy(1.0, &dparam_in, &mut dht_new);
        }

        dmean.iter_mut().for_each(|v| *v = 0.0);
        dht_prev.iter_mut().for_each(|v| *v = 0.0);
        w.tensor_gru.backward(
            &rec.mean_hp,
            &rec.ht_prev,
            &rec.tensor_z,
            &rec.tensor_r,
            &rec.tensor_n,
            &dht_new,
            &mut grads.tensor_gru,
            Some(&mut dmean),
            &mut dht_prev,
            &mut scratch,
        );
        let inv = 1.0 / dims as f64;
        for row in dhp_prev.chunks_exact_mut(hd) {
            axpy(inv, &dmean, row);
        }

        std::mem::swap(&mut dhp_next, &mut dhp_prev);
        std::mem::swap(&mut dht_next, &mut dht_prev);
        axpy(1.0, &rec.grad, &mut later_grads);
    }

    let flat = grads.flatten();
    ensure_finite(&flat).map_err(|e| Error::Numeric(format!("meta-gradient: {e}")))?;
    Ok(flat)
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"MACC";
pub const CHECKPOINT_VERSION: u32 = 1;

/// `"MACC"`, version `u32`, length `u64`, then the flat parameters, all
/// little-endian.
pub fn encode_checkpoint(w: &OptimizerParams) -> Vec<u8> {
    let flat = w.flatten();
    let mut out = Vec::with_capacity(16 + 8 * flat.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(flat.len() as u64).to_le_bytes());
    for v in flat {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<OptimizerParams> {
    if bytes.len() < 16 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::Consistency("not a checkpoint (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::Consistency(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body = &bytes[16..];
    check_len(len * 8, body.len())?;
    let hidden = OptimizerParams::hidden_for_flat_len(len)
        .ok_or_else(|| Error::Consistency(format!("no hidden size matches {len} parameters")))?;
    let flat: Vec64 = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    OptimizerParams::unflatten(hidden, &flat)
}

pub fn save_checkpoint(path: &Path, w: &OptimizerParams) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode_checkpoint(w))
        .map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<OptimizerParams> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

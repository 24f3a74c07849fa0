//! Recurrent Gaussian actor-critic with exact reverse-mode gradients.
//!
//! Layout: tanh dense layers -> one LSTM layer -> two linear heads. The mean
//! head is squashed with `tanh` and scaled to the action bound; the value head
//! is linear. The policy standard deviation is a state-independent parameter
//! vector stored as `log_std`.
//!
//! Differentiation is done at layer granularity: [`Network::forward`] records
//! a [`Tape`] of per-step activations and [`Network::backward`] replays it in
//! reverse, carrying hidden and cell gradients back through time.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `0.5 * ln(2 pi)`
const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkSpec {
    pub obs_dim: usize,
    /// Widths of the tanh dense layers in front of the recurrent layer.
    pub dense: Vec<usize>,
    /// Recurrent (LSTM) width.
    pub lstm: usize,
    pub act_dim: usize,
    /// Mean outputs lie in `[-action_scale, action_scale]`.
    pub action_scale: f64,
    /// Initial `log_std`; `None` uses `ln(0.1 * action_scale)`.
    pub log_std_init: Option<f64>,
    /// Orthogonal-init gain of the mean head.
    pub mean_head_gain: f64,
    /// Orthogonal-init gain of the value head.
    pub value_head_gain: f64,
}

impl Default for NetworkSpec {
    fn default() -> Self {
        Self {
            obs_dim: crate::env::OBS_DIM,
            dense: vec![64, 64],
            lstm: 64,
            act_dim: 1,
            action_scale: 400.0,
            log_std_init: None,
            mean_head_gain: 0.01,
            value_head_gain: 1.0,
        }
    }
}

impl NetworkSpec {
    /// A very small network for gradient checks.
    pub fn tiny(obs_dim: usize) -> Self {
        Self {
            obs_dim,
            dense: vec![5, 4],
            lstm: 3,
            act_dim: 1,
            action_scale: 400.0,
            log_std_init: None,
            mean_head_gain: 1.0,
            value_head_gain: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.obs_dim == 0 || self.lstm == 0 || self.act_dim == 0 || self.dense.contains(&0) {
            return Err(Error::Config("network layer widths must be >= 1".into()));
        }
        if !(self.action_scale.is_finite() && self.action_scale > 0.0) {
            return Err(Error::Config("network.action_scale must be > 0".into()));
        }
        Ok(())
    }

    pub fn initial_log_std(&self) -> f64 {
        self.log_std_init.unwrap_or((0.5 * self.action_scale * 0.2).ln())
    }

    /// Compact one-line description, used in checkpoint headers.
    pub fn describe(&self) -> String {
        let dense: Vec<String> = self.dense.iter().map(|d| d.to_string()).collect();
        format!(
            "obs_dim={} dense={} lstm={} act_dim={} action_scale={} log_std_init={} mean_head_gain={} value_head_gain={}",
            self.obs_dim,
            if dense.is_empty() { "-".to_string() } else { dense.join(",") },
            self.lstm,
            self.act_dim,
            self.action_scale,
            self.log_std_init.map_or_else(|| "-".to_string(), |v| v.to_string()),
            self.mean_head_gain,
            self.value_head_gain
        )
    }

    /// Error describing the first architectural difference, if any.
    pub fn check_compatible(&self, other: &NetworkSpec) -> Result<()> {
        let mut diffs = Vec::new();
        if self.obs_dim != other.obs_dim {
            diffs.push(format!("obs_dim {} vs {}", self.obs_dim, other.obs_dim));
        }
        if self.dense != other.dense {
            diffs.push(format!("dense layers {:?} vs {:?}", self.dense, other.dense));
        }
        if self.lstm != other.lstm {
            diffs.push(format!("lstm width {} vs {}", self.lstm, other.lstm));
        }
        if self.act_dim != other.act_dim {
            diffs.push(format!("act_dim {} vs {}", self.act_dim, other.act_dim));
        }
        if self.action_scale != other.action_scale {
            diffs.push(format!("action_scale {} vs {}", self.action_scale, other.action_scale));
        }
        if diffs.is_empty() {
            Ok(())
        } else {
            Err(Error::ArchitectureMismatch(format!(
                "checkpoint vs config: {}",
                diffs.join("; ")
            )))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArraySpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl ArraySpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Named parameter arrays stored in one flat buffer. Gradients use the same type.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    pub arrays: Vec<ArraySpec>,
    pub data: Vec<f64>,
}

impl ParamSet {
    fn from_layout(layout: &[(String, Vec<usize>)]) -> Self {
        let mut arrays = Vec::with_capacity(layout.len());
        let mut offset = 0;
        for (name, shape) in layout {
            let spec = ArraySpec {
                name: name.clone(),
                shape: shape.clone(),
                offset,
            };
            offset += spec.len();
            arrays.push(spec);
        }
        Self {
            arrays,
            data: vec![0.0; offset],
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            arrays: self.arrays.clone(),
            data: vec![0.0; self.data.len()],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.arrays
            .iter()
            .find(|a| a.name == name)
            .map(|a| &self.data[a.range()])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let range = self.arrays.iter().find(|a| a.name == name)?.range();
        Some(&mut self.data[range])
    }

    /// Name of the array owning flat index `i`.
    pub fn name_of(&self, i: usize) -> &str {
        self.arrays
            .iter()
            .find(|a| a.range().contains(&i))
            .map_or("?", |a| a.name.as_str())
    }

    pub fn first_non_finite(&self) -> Option<(&str, usize)> {
        let i = self.data.iter().position(|v| !v.is_finite())?;
        Some((self.name_of(i), i))
    }

    pub fn fill(&mut self, value: f64) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    pub fn add_assign(&mut self, other: &ParamSet) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        self.data.iter_mut().for_each(|v| *v *= factor);
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// LSTM hidden and cell vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct RecurrentState {
    pub h: Vec<f64>,
    pub c: Vec<f64>,
}

impl RecurrentState {
    pub fn zeros(width: usize) -> Self {
        Self {
            h: vec![0.0; width],
            c: vec![0.0; width],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.h.iter().chain(&self.c).all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy)]
struct DenseIdx {
    w: usize,
    b: usize,
    n_in: usize,
    n_out: usize,
}

#[derive(Debug, Clone, Copy)]
struct LstmIdx {
    w_ih: usize,
    w_hh: usize,
    b: usize,
    n_in: usize,
    width: usize,
}

#[derive(Debug, Clone)]
pub struct Network {
    spec: NetworkSpec,
    dense: Vec<DenseIdx>,
    lstm: LstmIdx,
    mean: DenseIdx,
    value: DenseIdx,
    log_std: usize,
    n_params: usize,
    layout: Vec<(String, Vec<usize>)>,
}

/// Activations of one time step.
#[derive(Debug, Clone, Default)]
pub struct StepCache {
    input: Vec<f64>,
    /// Post-activation output of each dense layer.
    dense_out: Vec<Vec<f64>>,
    h_prev: Vec<f64>,
    c_prev: Vec<f64>,
    /// Gate activations `[i, f, g, o]`.
    gates: Vec<f64>,
    c: Vec<f64>,
    tanh_c: Vec<f64>,
    h: Vec<f64>,
    /// `tanh` of the mean pre-activation.
    mean_unit: Vec<f64>,
    pub mean: Vec<f64>,
    pub value: f64,
}

/// Forward record of one sequence.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    steps: Vec<StepCache>,
    resets: Vec<bool>,
}

impl Tape {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn step(&self, t: usize) -> &StepCache {
        &self.steps[t]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceOutput {
    /// Row-major `[T][act_dim]`.
    pub means: Vec<f64>,
    pub log_std: Vec<f64>,
    pub values: Vec<f64>,
    pub final_state: RecurrentState,
}

/// Loss gradient with respect to one step's outputs.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct OutputGrad {
    pub d_mean: Vec<f64>,
    pub d_value: f64,
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `out = W x + b`, `W` row-major `[n_out][n_in]`.
#[inline]
fn affine(w: &[f64], b: &[f64], x: &[f64], out: &mut [f64]) {
    let n_in = x.len();
    for (j, o) in out.iter_mut().enumerate() {
        let row = &w[j * n_in..(j + 1) * n_in];
        *o = b[j] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
    }
}

/// `out += W x`
#[inline]
fn matvec_add(w: &[f64], x: &[f64], out: &mut [f64]) {
    let n_in = x.len();
    for (j, o) in out.iter_mut().enumerate() {
        let row = &w[j * n_in..(j + 1) * n_in];
        *o += row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
    }
}

/// `dW += dz x^T`, `db += dz`, `dx += W^T dz`.
#[inline]
fn affine_backward(
    w: &[f64],
    x: &[f64],
    dz: &[f64],
    dw: &mut [f64],
    db: Option<&mut [f64]>,
    dx: Option<&mut [f64]>,
) {
    let n_in = x.len();
    for (j, &g) in dz.iter().enumerate() {
        if g == 0.0 {
            continue;
        }
        let row = &mut dw[j * n_in..(j + 1) * n_in];
        for (r, xi) in row.iter_mut().zip(x) {
            *r += g * xi;
        }
    }
    if let Some(db) = db {
        for (b, g) in db.iter_mut().zip(dz) {
            *b += g;
        }
    }
    if let Some(dx) = dx {
        for (j, &g) in dz.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            let row = &w[j * n_in..(j + 1) * n_in];
            for (d, wi) in dx.iter_mut().zip(row) {
                *d += g * wi;
            }
        }
    }
}

/// Orthogonal matrix `[rows][cols]` scaled by `gain`, from Gram-Schmidt on a Gaussian draw.
fn orthogonal(rows: usize, cols: usize, gain: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let (n, m) = (rows.max(cols), rows.min(cols));
    // m orthonormal vectors of length n
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(m);
    while basis.len() < m {
        let mut v: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        for b in &basis {
            let d: f64 = v.iter().zip(b).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(b).for_each(|(a, b)| *a -= d * b);
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-8 {
            v.iter_mut().for_each(|a| *a /= norm);
            basis.push(v);
        }
    }
    let mut w = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            // orthonormal rows when rows <= cols, orthonormal columns otherwise
            w[r * cols + c] = gain * if rows <= cols { basis[r][c] } else { basis[c][r] };
        }
    }
    w
}

impl Network {
    pub fn new(spec: NetworkSpec) -> Result<Self> {
        spec.validate()?;
        let mut layout: Vec<(String, Vec<usize>)> = Vec::new();
        let mut offset = 0;
        let mut push = |name: String, shape: Vec<usize>| {
            let at = offset;
            offset += shape.iter().product::<usize>();
            layout.push((name, shape));
            at
        };

        let mut dense = Vec::new();
        let mut n_in = spec.obs_dim;
        for (l, &n_out) in spec.dense.iter().enumerate() {
            let w = push(format!("dense{l}.weight"), vec![n_out, n_in]);
            let b = push(format!("dense{l}.bias"), vec![n_out]);
            dense.push(DenseIdx { w, b, n_in, n_out });
            n_in = n_out;
        }
        let width = spec.lstm;
        let lstm = LstmIdx {
            w_ih: push("lstm.weight_ih".into(), vec![4 * width, n_in]),
            w_hh: push("lstm.weight_hh".into(), vec![4 * width, width]),
            b: push("lstm.bias".into(), vec![4 * width]),
            n_in,
            width,
        };
        let mean = DenseIdx {
            w: push("mean_head.weight".into(), vec![spec.act_dim, width]),
            b: push("mean_head.bias".into(), vec![spec.act_dim]),
            n_in: width,
            n_out: spec.act_dim,
        };
        let value = DenseIdx {
            w: push("value_head.weight".into(), vec![1, width]),
            b: push("value_head.bias".into(), vec![1]),
            n_in: width,
            n_out: 1,
        };
        let log_std = push("log_std".into(), vec![spec.act_dim]);
        Ok(Self {
            spec,
            dense,
            lstm,
            mean,
            value,
            log_std,
            n_params: offset,
            layout,
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn n_params(&self) -> usize {
        self.n_params
    }

    pub fn zero_params(&self) -> ParamSet {
        ParamSet::from_layout(&self.layout)
    }

    pub fn zero_state(&self) -> RecurrentState {
        RecurrentState::zeros(self.spec.lstm)
    }

    /// Seeded orthogonal initialization; zero biases except the LSTM forget gate (1).
    pub fn init_params(&self, seed: u64) -> ParamSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = self.zero_params();
        let hidden_gain = 2f64.sqrt();
        for d in &self.dense {
            let w = orthogonal(d.n_out, d.n_in, hidden_gain, &mut rng);
            p.data[d.w..d.w + w.len()].copy_from_slice(&w);
        }
        let l = self.lstm;
        let w_ih = orthogonal(4 * l.width, l.n_in, 1.0, &mut rng);
        p.data[l.w_ih..l.w_ih + w_ih.len()].copy_from_slice(&w_ih);
        for gate in 0..4 {
            let w = orthogonal(l.width, l.width, 1.0, &mut rng);
            let at = l.w_hh + gate * l.width * l.width;
            p.data[at..at + w.len()].copy_from_slice(&w);
        }
        for j in l.width..2 * l.width {
            p.data[l.b + j] = 1.0;
        }
        for (head, gain) in [
            (self.mean, self.spec.mean_head_gain),
            (self.value, self.spec.value_head_gain),
        ] {
            let w = orthogonal(head.n_out, head.n_in, gain, &mut rng);
            p.data[head.w..head.w + w.len()].copy_from_slice(&w);
        }
        let ls = self.spec.initial_log_std();
        for v in &mut p.data[self.log_std..self.log_std + self.spec.act_dim] {
            *v = ls;
        }
        p
    }

    pub fn log_std<'a>(&self, params: &'a ParamSet) -> &'a [f64] {
        &params.data[self.log_std..self.log_std + self.spec.act_dim]
    }

    pub fn log_std_offset(&self) -> usize {
        self.log_std
    }

    pub fn check_params(&self, params: &ParamSet) -> Result<()> {
        if params.len() != self.n_params {
            return Err(Error::Shape(format!(
                "parameter set has {} scalars, network expects {}",
                params.len(),
                self.n_params
            )));
        }
        Ok(())
    }

    /// One time step. `cache` is overwritten; `state` is advanced in place.
    pub fn step(&self, params: &ParamSet, obs: &[f64], state: &mut RecurrentState, cache: &mut StepCache) {
        let p = &params.data;
        cache.input.clear();
        cache.input.extend_from_slice(obs);
        cache.dense_out.resize(self.dense.len(), Vec::new());
        for (l, d) in self.dense.iter().enumerate() {
            let (before, rest) = cache.dense_out.split_at_mut(l);
            let x: &[f64] = if l == 0 { &cache.input } else { &before[l - 1] };
            let out = &mut rest[0];
            out.resize(d.n_out, 0.0);
            affine(&p[d.w..d.w + d.n_out * d.n_in], &p[d.b..d.b + d.n_out], x, out);
            out.iter_mut().for_each(|v| *v = v.tanh());
        }
        let x: &[f64] = cache.dense_out.last().unwrap_or(&cache.input);

        let l = self.lstm;
        let h = l.width;
        cache.h_prev.clone_from(&state.h);
        cache.c_prev.clone_from(&state.c);
        cache.gates.resize(4 * h, 0.0);
        affine(&p[l.w_ih..l.w_ih + 4 * h * l.n_in], &p[l.b..l.b + 4 * h], x, &mut cache.gates);
        matvec_add(&p[l.w_hh..l.w_hh + 4 * h * h], &state.h, &mut cache.gates);
        for j in 0..h {
            cache.gates[j] = sigmoid(cache.gates[j]);
            cache.gates[h + j] = sigmoid(cache.gates[h + j]);
            cache.gates[2 * h + j] = cache.gates[2 * h + j].tanh();
            cache.gates[3 * h + j] = sigmoid(cache.gates[3 * h + j]);
        }
        cache.c.resize(h, 0.0);
        cache.tanh_c.resize(h, 0.0);
        cache.h.resize(h, 0.0);
        for j in 0..h {
            let (i, f, g, o) = (
                cache.gates[j],
                cache.gates[h + j],
                cache.gates[2 * h + j],
                cache.gates[3 * h + j],
            );
            let c = f * state.c[j] + i * g;
            cache.c[j] = c;
            cache.tanh_c[j] = c.tanh();
            cache.h[j] = o * cache.tanh_c[j];
        }
        state.h.copy_from_slice(&cache.h);
        state.c.copy_from_slice(&cache.c);

        let m = self.mean;
        cache.mean_unit.resize(m.n_out, 0.0);
        affine(
            &p[m.w..m.w + m.n_out * m.n_in],
            &p[m.b..m.b + m.n_out],
            &cache.h,
            &mut cache.mean_unit,
        );
        cache.mean.resize(m.n_out, 0.0);
        for (u, mu) in cache.mean_unit.iter_mut().zip(cache.mean.iter_mut()) {
            *u = u.tanh();
            *mu = self.spec.action_scale * *u;
        }
        let v = self.value;
        let mut value = [0.0];
        affine(&p[v.w..v.w + v.n_in], &p[v.b..v.b + 1], &cache.h, &mut value);
        cache.value = value[0];
    }

    /// Run a sequence from `init`. `resets[t]` zeroes the recurrent state
    /// before step `t` (episode start inside the sequence).
    pub fn forward(
        &self,
        params: &ParamSet,
        obs: &[Vec<f64>],
        resets: &[bool],
        init: &RecurrentState,
    ) -> Result<(SequenceOutput, Tape)> {
        self.check_params(params)?;
        if resets.len() != obs.len() {
            return Err(Error::Shape(format!(
                "{} reset flags for {} observations",
                resets.len(),
                obs.len()
            )));
        }
        if init.h.len() != self.spec.lstm || init.c.len() != self.spec.lstm {
            return Err(Error::Shape("initial recurrent state width mismatch".into()));
        }
        let mut state = init.clone();
        let mut tape = Tape {
            steps: Vec::with_capacity(obs.len()),
            resets: resets.to_vec(),
        };
        let mut out = SequenceOutput {
            means: Vec::with_capacity(obs.len() * self.spec.act_dim),
            log_std: self.log_std(params).to_vec(),
            values: Vec::with_capacity(obs.len()),
            final_state: init.clone(),
        };
        for (t, (x, &reset)) in obs.iter().zip(resets).enumerate() {
            if x.len() != self.spec.obs_dim {
                return Err(Error::Shape(format!(
                    "observation {t} has {} features, network expects {}",
                    x.len(),
                    self.spec.obs_dim
                )));
            }
            if reset {
                state.h.iter_mut().for_each(|v| *v = 0.0);
                state.c.iter_mut().for_each(|v| *v = 0.0);
            }
            let mut cache = StepCache::default();
            self.step(params, x, &mut state, &mut cache);
            if !state.is_finite() {
                return Err(Error::NonFinite {
                    node: format!("lstm state at step {t}"),
                });
            }
            if !cache.value.is_finite() || cache.mean.iter().any(|m| !m.is_finite()) {
                return Err(Error::NonFinite {
                    node: format!("heads at step {t}"),
                });
            }
            out.means.extend_from_slice(&cache.mean);
            out.values.push(cache.value);
            tape.steps.push(cache);
        }
        out.final_state = state;
        Ok((out, tape))
    }

    /// Accumulate parameter gradients into `grads` given per-step output
    /// gradients and the direct gradient on `log_std`. Gradients do not flow
    /// into the initial recurrent state (truncated backpropagation).
    pub fn backward(
        &self,
        params: &ParamSet,
        tape: &Tape,
        out_grads: &[OutputGrad],
        d_log_std: &[f64],
        grads: &mut ParamSet,
    ) -> Result<()> {
        self.check_params(params)?;
        self.check_params(grads)?;
        if out_grads.len() != tape.len() {
            return Err(Error::Shape(format!(
                "{} output gradients for {} recorded steps",
                out_grads.len(),
                tape.len()
            )));
        }
        if d_log_std.len() != self.spec.act_dim {
            return Err(Error::Shape("log_std gradient length mismatch".into()));
        }
        let p = &params.data;
        let g = &mut grads.data;
        let l = self.lstm;
        let h = l.width;
        let scale = self.spec.action_scale;

        let mut dh_next = vec![0.0; h];
        let mut dc_next = vec![0.0; h];
        let mut dh = vec![0.0; h];
        let mut dz = vec![0.0; 4 * h];
        let mut d_mean_pre = vec![0.0; self.spec.act_dim];
        let max_dense = self.dense.iter().map(|d| d.n_out.max(d.n_in)).max().unwrap_or(0).max(l.n_in);
        let mut dx = vec![0.0; max_dense];
        let mut dx_prev = vec![0.0; max_dense];

        for t in (0..tape.len()).rev() {
            let cache = &tape.steps[t];
            let og = &out_grads[t];
            if og.d_mean.len() != self.spec.act_dim {
                return Err(Error::Shape(format!("d_mean at step {t} has wrong length")));
            }
            dh.copy_from_slice(&dh_next);

            // heads
            for (k, d) in d_mean_pre.iter_mut().enumerate() {
                let u = cache.mean_unit[k];
                *d = og.d_mean[k] * scale * (1.0 - u * u);
            }
            let m = self.mean;
            let (gw, gb) = (m.w, m.b);
            {
                let (lo, hi) = g.split_at_mut(gb);
                affine_backward(
                    &p[m.w..m.w + m.n_out * m.n_in],
                    &cache.h,
                    &d_mean_pre,
                    &mut lo[gw..gw + m.n_out * m.n_in],
                    Some(&mut hi[..m.n_out]),
                    Some(&mut dh),
                );
            }
            let v = self.value;
            if og.d_value != 0.0 {
                for j in 0..h {
                    g[v.w + j] += og.d_value * cache.h[j];
                    dh[j] += og.d_value * p[v.w + j];
                }
                g[v.b] += og.d_value;
            }

            // lstm cell
            for j in 0..h {
                let (i, f, gg, o) = (
                    cache.gates[j],
                    cache.gates[h + j],
                    cache.gates[2 * h + j],
                    cache.gates[3 * h + j],
                );
                let tc = cache.tanh_c[j];
                let d_o = dh[j] * tc;
                let dc = dc_next[j] + dh[j] * o * (1.0 - tc * tc);
                dz[j] = dc * gg * i * (1.0 - i);
                dz[h + j] = dc * cache.c_prev[j] * f * (1.0 - f);
                dz[2 * h + j] = dc * i * (1.0 - gg * gg);
                dz[3 * h + j] = d_o * o * (1.0 - o);
                dc_next[j] = dc * f;
            }
            let x_in: &[f64] = cache.dense_out.last().unwrap_or(&cache.input);
            dx[..l.n_in].iter_mut().for_each(|v| *v = 0.0);
            {
                let (lo, hi) = g.split_at_mut(l.b);
                affine_backward(
                    &p[l.w_ih..l.w_ih + 4 * h * l.n_in],
                    x_in,
                    &dz,
                    &mut lo[l.w_ih..l.w_ih + 4 * h * l.n_in],
                    Some(&mut hi[..4 * h]),
                    if self.dense.is_empty() { None } else { Some(&mut dx[..l.n_in]) },
                );
            }
            dh_next.iter_mut().for_each(|v| *v = 0.0);
            affine_backward(
                &p[l.w_hh..l.w_hh + 4 * h * h],
                &cache.h_prev,
                &dz,
                &mut g[l.w_hh..l.w_hh + 4 * h * h],
                None,
                Some(&mut dh_next),
            );
            if tape.resets[t] {
                // state was zeroed before this step
                dh_next.iter_mut().for_each(|v| *v = 0.0);
                dc_next.iter_mut().for_each(|v| *v = 0.0);
            }

            // dense stack
            for (li, d) in self.dense.iter().enumerate().rev() {
                let out = &cache.dense_out[li];
                for j in 0..d.n_out {
                    dx[j] *= 1.0 - out[j] * out[j];
                }
                let x: &[f64] = if li == 0 { &cache.input } else { &cache.dense_out[li - 1] };
                dx_prev[..d.n_in].iter_mut().for_each(|v| *v = 0.0);
                let (lo, hi) = g.split_at_mut(d.b);
                affine_backward(
                    &p[d.w..d.w + d.n_out * d.n_in],
                    x,
                    &dx[..d.n_out],
                    &mut lo[d.w..d.w + d.n_out * d.n_in],
                    Some(&mut hi[..d.n_out]),
                    if li > 0 { Some(&mut dx_prev[..d.n_in]) } else { None },
                );
                std::mem::swap(&mut dx, &mut dx_prev);
            }
        }
        for (k, d) in d_log_std.iter().enumerate() {
            g[self.log_std + k] += d;
        }
        if let Some((name, i)) = grads.first_non_finite() {
            return Err(Error::NonFinite {
                node: format!("gradient of {name} (index {i})"),
            });
        }
        Ok(())
    }
}

/// Log-density of `action` under a diagonal Gaussian.
pub fn log_prob(action: &[f64], mean: &[f64], log_std: &[f64]) -> f64 {
    action
        .iter()
        .zip(mean)
        .zip(log_std)
        .map(|((a, m), ls)| {
            let z = (a - m) / ls.exp();
            -0.5 * z * z - ls - HALF_LN_2PI
        })
        .sum()
}

/// Draw from the policy Gaussian. Returns the raw sample, its log-density,
/// and the sample clamped to `[-bound, bound]` for the environment.
pub fn sample_action<R: Rng + ?Sized>(
    mean: &[f64],
    log_std: &[f64],
    bound: f64,
    rng: &mut R,
) -> (Vec<f64>, f64, Vec<f64>) {
    let raw: Vec<f64> = mean
        .iter()
        .zip(log_std)
        .map(|(m, ls)| m + ls.exp() * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let lp = log_prob(&raw, mean, log_std);
    let clamped = raw.iter().map(|a| a.clamp(-bound, bound)).collect();
    (raw, lp, clamped)
}

/// Differential entropy of a diagonal Gaussian, `sum(log_std + 0.5 ln(2 pi e))`.
pub fn entropy(log_std: &[f64]) -> f64 {
    log_std.iter().map(|ls| ls + 0.5 * (2.0 * PI * std::f64::consts::E).ln()).sum()
}

/// Text checkpoint: header lines, then one `name dims... ` line and one value
/// line per array. Values use the shortest round-trip decimal form, so a
/// write/read cycle is bit-exact.
pub mod checkpoint {
    use super::*;

    pub const MAGIC: &str = "feeddrive-checkpoint v1";

    #[derive(Debug, Clone, PartialEq)]
    pub struct Checkpoint {
        pub spec: NetworkSpec,
        pub seed: u64,
        pub step: u64,
        pub params: ParamSet,
    }

    pub fn write<W: std::io::Write>(mut w: W, ckpt: &Checkpoint) -> std::io::Result<()> {
        writeln!(w, "{MAGIC}")?;
        writeln!(w, "spec {}", ckpt.spec.describe())?;
        writeln!(w, "seed {}", ckpt.seed)?;
        writeln!(w, "step {}", ckpt.step)?;
        writeln!(w, "arrays {}", ckpt.params.arrays.len())?;
        for a in &ckpt.params.arrays {
            let dims: Vec<String> = a.shape.iter().map(|d| d.to_string()).collect();
            writeln!(w, "{} {}", a.name, dims.join(" "))?;
            let vals: Vec<String> = ckpt.params.data[a.range()].iter().map(|v| v.to_string()).collect();
            writeln!(w, "{}", vals.join(" "))?;
        }
        writeln!(w, "end")
    }

    fn bad(msg: impl Into<String>) -> Error {
        Error::Checkpoint(msg.into())
    }

    fn parse_spec(line: &str) -> Result<NetworkSpec> {
        let mut spec = NetworkSpec::default();
        for kv in line.split_whitespace() {
            let (k, v) = kv.split_once('=').ok_or_else(|| bad(format!("bad spec field '{kv}'")))?;
            let num = |v: &str| v.parse::<usize>().map_err(|_| bad(format!("bad value for {k}: '{v}'")));
            let real = |v: &str| v.parse::<f64>().map_err(|_| bad(format!("bad value for {k}: '{v}'")));
            match k {
                "obs_dim" => spec.obs_dim = num(v)?,
                "lstm" => spec.lstm = num(v)?,
                "act_dim" => spec.act_dim = num(v)?,
                "action_scale" => spec.action_scale = real(v)?,
                // initialisation-only fields; older headers omit them
                "log_std_init" => spec.log_std_init = if v == "-" { None } else { Some(real(v)?) },
                "mean_head_gain" => spec.mean_head_gain = real(v)?,
                "value_head_gain" => spec.value_head_gain = real(v)?,
                "dense" => {
                    spec.dense = if v == "-" {
                        Vec::new()
                    } else {
                        v.split(',').map(num).collect::<Result<_>>()?
                    }
                }
                other => return Err(bad(format!("unknown spec field '{other}'"))),
            }
        }
        Ok(spec)
    }

    pub fn read(text: &str) -> Result<Checkpoint> {
        let mut lines = text.lines();
        let mut next = |what: &str| lines.next().ok_or_else(|| bad(format!("truncated checkpoint: missing {what}")));
        if next("magic")? != MAGIC {
            return Err(bad("not a feeddrive checkpoint (bad magic line)"));
        }
        let field = |line: &str, key: &str| -> Result<String> {
            line.strip_prefix(key)
                .and_then(|r| r.strip_prefix(' '))
                .map(str::to_string)
                .ok_or_else(|| bad(format!("expected '{key}' line, got '{line}'")))
        };
        let spec = parse_spec(&field(next("spec")?, "spec")?)?;
        let seed = field(next("seed")?, "seed")?.parse().map_err(|_| bad("bad seed"))?;
        let step = field(next("step")?, "step")?.parse().map_err(|_| bad("bad step"))?;
        let n: usize = field(next("arrays")?, "arrays")?.parse().map_err(|_| bad("bad array count"))?;

        let net = Network::new(spec.clone())?;
        let mut params = net.zero_params();
        if n != params.arrays.len() {
            return Err(Error::ArchitectureMismatch(format!(
                "checkpoint holds {n} arrays, its spec implies {}",
                params.arrays.len()
            )));
        }
        for k in 0..n {
            let header = next("array header")?;
            let mut parts = header.split_whitespace();
            let name = parts.next().ok_or_else(|| bad("empty array header"))?;
            let shape: Vec<usize> = parts
                .map(|d| d.parse().map_err(|_| bad(format!("bad dim in '{header}'"))))
                .collect::<Result<_>>()?;
            let expected = &params.arrays[k];
            if expected.name != name || expected.shape != shape {
                return Err(Error::ArchitectureMismatch(format!(
                    "array {k}: checkpoint has {name} {shape:?}, expected {} {:?}",
                    expected.name, expected.shape
                )));
            }
            let range = expected.range();
            let values: Vec<f64> = next("array values")?
                .split_whitespace()
                .map(|v| v.parse().map_err(|_| bad(format!("bad value '{v}' in {name}"))))
                .collect::<Result<_>>()?;
            if values.len() != range.len() {
                return Err(bad(format!("{name}: {} values, expected {}", values.len(), range.len())));
            }
            params.data[range].copy_from_slice(&values);
        }
        if next("end marker")? != "end" {
            return Err(bad("missing end marker"));
        }
        if let Some((name, _)) = params.first_non_finite() {
            return Err(bad(format!("non-finite value in {name}")));
        }
        Ok(Checkpoint {
            spec,
            seed,
            step,
            params,
        })
    }

    pub fn save(path: &std::path::Path, ckpt: &Checkpoint) -> Result<()> {
        let mut buf = Vec::new();
        write(&mut buf, ckpt).map_err(|e| Error::io(path, e))?;
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &std::path::Path) -> Result<Checkpoint> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        read(&text)
    }
}

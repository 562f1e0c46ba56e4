//! Mamba block: RMS norm, two input projections, causal depthwise
//! convolution, a diagonal state-space layer and a SiLU gate, wrapped in a
//! residual connection.
//!
//! Each expanded channel `c` runs its own SSM with diagonal
//! `A_c = −exp(a_c)`, input vector `B_c`, readout `C_c` and step `Δ`:
//!
//! ```text
//! Ā = exp(ΔA)    B̄ = (ΔA)⁻¹(exp(ΔA) − 1)·ΔB
//! h_t = Ā h_{t−1} + B̄ u_t    y_t = C·h_t
//! ```
//!
//! In [`SsmMode::Lti`] the step is a learned constant `exp(log_dt_c)` and the
//! layer can also run as a causal convolution with kernel `K_k = C Ā^k B̄`.
//! In [`SsmMode::Selective`] the step, input and readout vectors are
//! recomputed from the whole expanded input `x_t` at every position,
//! `Δ_t = softplus(W_Δ x_t + b_Δ)`, `B_t = W_B x_t`, `C_t = W_C x_t`, and
//! only the recurrence applies. The single-channel [`ssm_scan`] keeps a
//! scalar selective step `softplus(w u_t + b)`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::Linear;
use crate::numerics::{
    softplus, CustomOp, ParamId, ParameterStore, Rng, Tape, Tensor, Var,
};
use crate::par;

/// `|ΔA|` below which the discretization switches to its Taylor limit.
pub const TAYLOR_CUTOFF: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SsmMode {
    Lti,
    Selective,
}

impl FromStr for SsmMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lti" => Ok(Self::Lti),
            "selective" => Ok(Self::Selective),
            _ => Err(Error::Config(format!(
                "unknown ssm mode {s:?} (lti|selective)"
            ))),
        }
    }
}

impl fmt::Display for SsmMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Lti => "lti",
            Self::Selective => "selective",
        })
    }
}

/// Row-wise RMS normalization of a single vector. With `eps = 0` a zero
/// vector maps to zero.
pub fn rmsnorm(x: &[f64], gain: &[f64], eps: f64) -> Vec<f64> {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let denom = (ms + eps).sqrt();
    if denom == 0.0 {
        return vec![0.0; x.len()];
    }
    x.iter().zip(gain).map(|(v, g)| g * v / denom).collect()
}

/// `(Ā, φ)` with `B̄ = φ·B`, i.e. `φ = expm1(ΔA)/A`.
#[inline]
fn zoh(a: f64, delta: f64) -> (f64, f64) {
    let x = delta * a;
    let em1 = x.exp_m1();
    let phi = if x.abs() < TAYLOR_CUTOFF {
        delta * (1.0 + 0.5 * x)
    } else {
        em1 / a
    };
    (1.0 + em1, phi)
}

/// `∂φ/∂A = (Δ·Ā − φ)/A`, by series where that difference cancels.
#[inline]
fn dphi_da(a: f64, delta: f64, abar: f64, phi: f64) -> f64 {
    let x = delta * a;
    if x.abs() < 1e-3 {
        delta * delta * (0.5 + x / 3.0 + x * x / 8.0 + x * x * x / 30.0)
    } else {
        (delta * abar - phi) / a
    }
}

/// Zero-order-hold discretization of a diagonal system at step `delta`.
pub fn zoh_discretize(a: &[f64], b: &[f64], delta: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    if !(delta > 0.0 && delta.is_finite()) {
        return Err(Error::contract(format!(
            "step size must be positive and finite, got {delta}"
        )));
    }
    if a.len() != b.len() {
        return Err(Error::contract(format!(
            "A has {} entries but B has {}",
            a.len(),
            b.len()
        )));
    }
    let (abar, bbar) = a
        .iter()
        .zip(b)
        .map(|(&a, &b)| {
            let (abar, phi) = zoh(a, delta);
            (abar, phi * b)
        })
        .unzip();
    Ok((abar, bbar))
}

/// Parameters of one channel's SSM.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelSsm {
    /// Raw decay parameters; `A_j = −exp(a_log_j)`.
    pub a_log: Vec<f64>,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
    pub log_dt: f64,
    pub w_dt: f64,
    pub b_dt: f64,
}

impl ChannelSsm {
    pub fn state_dim(&self) -> usize {
        self.a_log.len()
    }

    pub fn a(&self) -> Vec<f64> {
        self.a_log.iter().map(|&a| -a.exp()).collect()
    }

    /// Step size at every position of `u`.
    pub fn deltas(&self, u: &[f64], mode: SsmMode) -> Vec<f64> {
        match mode {
            SsmMode::Lti => vec![self.log_dt.exp(); u.len()],
            SsmMode::Selective => u
                .iter()
                .map(|&x| softplus(self.w_dt * x + self.b_dt))
                .collect(),
        }
    }

    fn check(&self) -> Result<()> {
        let p = self.a_log.len();
        if p == 0 || self.b.len() != p || self.c.len() != p {
            return Err(Error::contract(format!(
                "channel SSM needs equal non-empty A/B/C, got {}/{}/{}",
                p,
                self.b.len(),
                self.c.len()
            )));
        }
        Ok(())
    }
}

/// Recurrent evaluation with `h_0 = 0`.
pub fn ssm_scan(u: &[f64], ch: &ChannelSsm, mode: SsmMode) -> Result<Vec<f64>> {
    ch.check()?;
    if let Some(i) = u.iter().position(|x| !x.is_finite()) {
        log::warn!("ssm_scan: non-finite input at position {i}");
    }
    let deltas = ch.deltas(u, mode);
    let coeffs = Coeffs::new(&ch.a(), &deltas, mode);
    Ok(scan_core(u, &coeffs, &ch.b, &ch.c, ch.state_dim(), None))
}

/// Discretized `(Ā, φ)` per state entry, per step in selective mode and
/// shared across steps in LTI mode.
struct Coeffs {
    abar: Vec<f64>,
    phi: Vec<f64>,
    per_step: bool,
    p: usize,
}

impl Coeffs {
    fn new(a: &[f64], deltas: &[f64], mode: SsmMode) -> Self {
        let p = a.len();
        let steps: &[f64] = match mode {
            SsmMode::Lti => &deltas[..deltas.len().min(1)],
            SsmMode::Selective => deltas,
        };
        let mut abar = Vec::with_capacity(steps.len() * p);
        let mut phi = Vec::with_capacity(steps.len() * p);
        for &d in steps {
            for &aj in a {
                let (ab, ph) = zoh(aj, d);
                abar.push(ab);
                phi.push(ph);
            }
        }
        Self {
            abar,
            phi,
            per_step: mode == SsmMode::Selective,
            p,
        }
    }

    #[inline]
    fn row(&self, t: usize) -> (&[f64], &[f64]) {
        let k = if self.per_step { t * self.p } else { 0 };
        (&self.abar[k..k + self.p], &self.phi[k..k + self.p])
    }
}

/// `b` and `c` hold one `p`-vector shared by all steps, or one per step.
fn scan_core(
    u: &[f64],
    coeffs: &Coeffs,
    b: &[f64],
    c: &[f64],
    p: usize,
    mut states: Option<&mut Vec<f64>>,
) -> Vec<f64> {
    let stride = if b.len() == p { 0 } else { p };
    let mut h = vec![0.0; p];
    let mut y = Vec::with_capacity(u.len());
    for (t, &ut) in u.iter().enumerate() {
        let (abar, phi) = coeffs.row(t);
        let (bt, ct) = (&b[t * stride..t * stride + p], &c[t * stride..t * stride + p]);
        let mut acc = 0.0;
        for j in 0..p {
            h[j] = abar[j] * h[j] + phi[j] * bt[j] * ut;
            acc += ct[j] * h[j];
        }
        if let Some(s) = states.as_deref_mut() {
            s.extend_from_slice(&h);
        }
        y.push(acc);
    }
    y
}

/// Forward results kept for the backward pass of one channel.
struct ChannelCache {
    deltas: Vec<f64>,
    coeffs: Coeffs,
    states: Vec<f64>,
}

impl ChannelCache {
    fn build(u: &[f64], ch: &ChannelSsm, mode: SsmMode) -> (Self, Vec<f64>) {
        let deltas = ch.deltas(u, mode);
        let coeffs = Coeffs::new(&ch.a(), &deltas, mode);
        let mut states = Vec::with_capacity(u.len() * ch.state_dim());
        let y = scan_core(u, &coeffs, &ch.b, &ch.c, ch.state_dim(), Some(&mut states));
        (
            Self {
                deltas,
                coeffs,
                states,
            },
            y,
        )
    }
}

/// Impulse response `K_k = C Ā^k B̄`, `k < n`, by power iteration.
pub fn ssm_kernel(ch: &ChannelSsm, mode: SsmMode, n: usize) -> Result<Vec<f64>> {
    if mode != SsmMode::Lti {
        return Err(Error::contract(
            "the convolution kernel exists only for time-invariant SSMs",
        ));
    }
    ch.check()?;
    let (abar, bbar) = zoh_discretize(&ch.a(), &ch.b, ch.log_dt.exp())?;
    let mut pow = bbar;
    let mut k = Vec::with_capacity(n);
    for _ in 0..n {
        k.push(ch.c.iter().zip(&pow).map(|(c, p)| c * p).sum());
        pow.iter_mut().zip(&abar).for_each(|(p, a)| *p *= a);
    }
    Ok(k)
}

/// `y_t = Σ_{k≤t} K_k u_{t−k}`.
pub fn causal_conv(u: &[f64], kernel: &[f64]) -> Vec<f64> {
    (0..u.len())
        .map(|t| {
            (0..=t.min(kernel.len().saturating_sub(1)))
                .map(|k| kernel[k] * u[t - k])
                .sum()
        })
        .collect()
}

/// Gradients of one channel's time-invariant scan.
struct ChannelGrad {
    u: Vec<f64>,
    a_log: Vec<f64>,
    b: Vec<f64>,
    c: Vec<f64>,
    log_dt: f64,
}

fn scan_channel_backward(u: &[f64], gy: &[f64], ch: &ChannelSsm, cache: &ChannelCache) -> ChannelGrad {
    let n = u.len();
    let p = ch.state_dim();
    let a = ch.a();
    let ChannelCache {
        deltas,
        coeffs,
        states,
    } = cache;

    let mut gu = vec![0.0; n];
    let mut ga = vec![0.0; p];
    let mut gb = vec![0.0; p];
    let mut gc = vec![0.0; p];
    let mut gdelta = 0.0;
    let mut carry = vec![0.0; p];
    let dt = deltas.first().copied().unwrap_or(0.0);
    let (abar, phi) = coeffs.row(0);
    for t in (0..n).rev() {
        let h = &states[t * p..(t + 1) * p];
        for j in 0..p {
            let g = gy[t] * ch.c[j] + carry[j];
            gc[j] += gy[t] * h[j];
            let hp = if t > 0 { states[(t - 1) * p + j] } else { 0.0 };
            let g_abar = g * hp;
            let g_phi = g * ch.b[j] * u[t];
            gb[j] += g * phi[j] * u[t];
            gu[t] += g * phi[j] * ch.b[j];
            gdelta += g_abar * a[j] * abar[j] + g_phi * abar[j];
            ga[j] += g_abar * dt * abar[j] + g_phi * dphi_da(a[j], dt, abar[j], phi[j]);
            carry[j] = abar[j] * g;
        }
    }
    ChannelGrad {
        u: gu,
        a_log: ga.iter().zip(&a).map(|(g, a)| g * a).collect(),
        b: gb,
        c: gc,
        log_dt: gdelta * dt,
    }
}

/// How an SSM layer gets its step, input and readout vectors.
#[derive(Debug, Clone, Copy)]
pub enum SsmInputs {
    /// Per-channel `B`, `C` (`channels × ψ`) and step `exp(log_dt)`.
    Lti {
        b: ParamId,
        c: ParamId,
        log_dt: ParamId,
    },
    /// `Δ_t = softplus(W_Δ x_t + b_Δ)` per channel, and `B_t = W_B x_t`,
    /// `C_t = W_C x_t` shared by all channels.
    Selective { dt: Linear, b: Linear, c: Linear },
}

/// Diagonal SSM over `channels` independent channels with `A` stored as a
/// `channels × ψ` matrix.
#[derive(Debug, Clone, Copy)]
pub struct SsmLayer {
    pub a_log: ParamId,
    pub inputs: SsmInputs,
    pub channels: usize,
    pub state_dim: usize,
}

impl SsmLayer {
    pub fn new(
        store: &mut ParameterStore,
        rng: &mut Rng,
        name: &str,
        channels: usize,
        state_dim: usize,
        mode: SsmMode,
    ) -> Result<Self> {
        let a_log = (0..channels * state_dim)
            .map(|i| ((i % state_dim) as f64 + 1.0).ln())
            .collect();
        let a_log = store.insert(
            format!("{name}.a_log"),
            Tensor::from_parts(vec![channels, state_dim], a_log),
        )?;
        // initial steps log-uniform in [1e-3, 0.1]
        let dts: Vec<f64> = (0..channels)
            .map(|_| (rng.uniform_range(1e-3f64.ln(), 0.1f64.ln())).exp())
            .collect();
        let inputs = match mode {
            SsmMode::Lti => {
                let b = store.insert(
                    format!("{name}.b"),
                    Tensor::filled(&[channels, state_dim], 1.0),
                )?;
                let sd = 1.0 / (state_dim as f64).sqrt();
                let c = (0..channels * state_dim)
                    .map(|_| sd * rng.normal())
                    .collect();
                let c = store.insert(
                    format!("{name}.c"),
                    Tensor::from_parts(vec![channels, state_dim], c),
                )?;
                let log_dt = store.insert(
                    format!("{name}.log_dt"),
                    Tensor::vector(dts.iter().map(|d| d.ln()).collect()),
                )?;
                SsmInputs::Lti { b, c, log_dt }
            }
            SsmMode::Selective => {
                let dt = Linear::new(store, rng, &format!("{name}.dt_proj"), channels, channels, true)?;
                if let Some(bias) = dt.b {
                    // softplus(bias) equals the initial step
                    *store.value_mut(bias) =
                        Tensor::vector(dts.iter().map(|d| d.exp_m1().ln()).collect());
                }
                let b = Linear::new(store, rng, &format!("{name}.b_proj"), channels, state_dim, false)?;
                let c = Linear::new(store, rng, &format!("{name}.c_proj"), channels, state_dim, false)?;
                SsmInputs::Selective { dt, b, c }
            }
        };
        Ok(Self {
            a_log,
            inputs,
            channels,
            state_dim,
        })
    }

    pub fn mode(&self) -> SsmMode {
        match self.inputs {
            SsmInputs::Lti { .. } => SsmMode::Lti,
            SsmInputs::Selective { .. } => SsmMode::Selective,
        }
    }

    /// Channel `k`'s parameters as stored in `store`; selective layers have
    /// no fixed per-channel system.
    pub fn lti_channel(&self, store: &ParameterStore, k: usize) -> Option<ChannelSsm> {
        match self.inputs {
            SsmInputs::Lti { b, c, log_dt } => Some(channel_from(
                store.value(self.a_log),
                store.value(b),
                store.value(c),
                store.value(log_dt),
                k,
            )),
            SsmInputs::Selective { .. } => None,
        }
    }

    /// `x: n × channels` to `n × channels`.
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Var {
        let a = tape.param(self.a_log);
        match self.inputs {
            SsmInputs::Lti { b, c, log_dt } => {
                let inputs = vec![x, a, tape.param(b), tape.param(c), tape.param(log_dt)];
                let mut op = ScanOp { cache: None };
                let y = {
                    let vals: Vec<&Tensor> = inputs.iter().map(|&v| tape.value(v)).collect();
                    op.forward(&vals)
                };
                tape.custom(inputs, y, Box::new(op))
            }
            SsmInputs::Selective { dt, b, c } => {
                let z = dt.forward(tape, x);
                let delta = tape.softplus(z);
                let bt = b.forward(tape, x);
                let ct = c.forward(tape, x);
                let inputs = vec![x, delta, a, bt, ct];
                let mut op = SelectiveScanOp { cache: None };
                let y = {
                    let vals: Vec<&Tensor> = inputs.iter().map(|&v| tape.value(v)).collect();
                    op.forward(&vals)
                };
                tape.custom(inputs, y, Box::new(op))
            }
        }
    }
}

fn channel_from(a: &Tensor, b: &Tensor, c: &Tensor, log_dt: &Tensor, k: usize) -> ChannelSsm {
    ChannelSsm {
        a_log: a.row(k).to_vec(),
        b: b.row(k).to_vec(),
        c: c.row(k).to_vec(),
        log_dt: log_dt.data()[k],
        w_dt: 0.0,
        b_dt: 0.0,
    }
}

fn column(x: &Tensor, k: usize) -> Vec<f64> {
    let c = x.cols();
    x.data().iter().skip(k).step_by(c).copied().collect()
}

fn from_columns(cols: &[Vec<f64>], n: usize) -> Tensor {
    let c = cols.len();
    let mut data = vec![0.0; n * c];
    for (k, col) in cols.iter().enumerate() {
        for (t, &v) in col.iter().enumerate() {
            data[t * c + k] = v;
        }
    }
    Tensor::from_parts(vec![n, c], data)
}

/// Above this many cached state entries the backward pass recomputes.
const CACHE_LIMIT: usize = 1 << 22;

/// Time-invariant multi-channel scan as a tape op. Inputs:
/// `[x, a_log, b, c, log_dt]`.
struct ScanOp {
    /// Per-channel forward results, dropped for very long inputs.
    cache: Option<Vec<ChannelCache>>,
}

impl ScanOp {
    fn forward(&mut self, inputs: &[&Tensor]) -> Tensor {
        let x = inputs[0];
        let n = x.rows();
        let keep = n * x.cols() * inputs[1].cols() <= CACHE_LIMIT;
        let runs = par::map_range(x.cols(), |k| {
            let ch = channel_from(inputs[1], inputs[2], inputs[3], inputs[4], k);
            let u = column(x, k);
            let (cache, y) = ChannelCache::build(&u, &ch, SsmMode::Lti);
            (keep.then_some(cache), y)
        });
        let (caches, cols): (Vec<_>, Vec<_>) = runs.into_iter().unzip();
        self.cache = caches.into_iter().collect();
        from_columns(&cols, n)
    }
}

impl CustomOp for ScanOp {
    fn name(&self) -> &'static str {
        "ssm_scan"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let x = inputs[0];
        let (n, e) = (x.rows(), x.cols());
        let p = inputs[1].cols();
        let per: Vec<ChannelGrad> = par::map_range(e, |k| {
            let ch = channel_from(inputs[1], inputs[2], inputs[3], inputs[4], k);
            let u = column(x, k);
            let gy = column(grad, k);
            match &self.cache {
                Some(c) => scan_channel_backward(&u, &gy, &ch, &c[k]),
                None => {
                    let (c, _) = ChannelCache::build(&u, &ch, SsmMode::Lti);
                    scan_channel_backward(&u, &gy, &ch, &c)
                }
            }
        });
        let gx = from_columns(&per.iter().map(|g| g.u.clone()).collect::<Vec<_>>(), n);
        let stack = |f: &dyn Fn(&ChannelGrad) -> &[f64]| {
            Tensor::from_parts(
                vec![e, p],
                per.iter().flat_map(|g| f(g).iter().copied()).collect(),
            )
        };
        vec![
            Some(gx),
            Some(stack(&|g| &g.a_log)),
            Some(stack(&|g| &g.b)),
            Some(stack(&|g| &g.c)),
            Some(Tensor::vector(per.iter().map(|g| g.log_dt).collect())),
        ]
    }
}

/// Forward results of one selective channel.
struct SelectiveCache {
    coeffs: Coeffs,
    states: Vec<f64>,
}

impl SelectiveCache {
    fn build(u: &[f64], deltas: &[f64], a: &[f64], b: &Tensor, c: &Tensor) -> (Self, Vec<f64>) {
        let coeffs = Coeffs::new(a, deltas, SsmMode::Selective);
        let mut states = Vec::with_capacity(u.len() * a.len());
        let y = scan_core(u, &coeffs, b.data(), c.data(), a.len(), Some(&mut states));
        (Self { coeffs, states }, y)
    }
}

struct SelectiveGrad {
    u: Vec<f64>,
    delta: Vec<f64>,
    a_log: Vec<f64>,
    /// `n × ψ`, this channel's share.
    b: Vec<f64>,
    c: Vec<f64>,
}

fn selective_channel_backward(
    u: &[f64],
    deltas: &[f64],
    gy: &[f64],
    a: &[f64],
    b: &[f64],
    c: &[f64],
    cache: &SelectiveCache,
) -> SelectiveGrad {
    let n = u.len();
    let p = a.len();
    let states = &cache.states;
    let mut gu = vec![0.0; n];
    let mut gdelta = vec![0.0; n];
    let mut ga = vec![0.0; p];
    let mut gb = vec![0.0; n * p];
    let mut gc = vec![0.0; n * p];
    let mut carry = vec![0.0; p];
    for t in (0..n).rev() {
        let dt = deltas[t];
        let (abar, phi) = cache.coeffs.row(t);
        let (bt, ct) = (&b[t * p..(t + 1) * p], &c[t * p..(t + 1) * p]);
        let h = &states[t * p..(t + 1) * p];
        for j in 0..p {
            let g = gy[t] * ct[j] + carry[j];
            gc[t * p + j] = gy[t] * h[j];
            let hp = if t > 0 { states[(t - 1) * p + j] } else { 0.0 };
            let g_abar = g * hp;
            let g_phi = g * bt[j] * u[t];
            gb[t * p + j] = g * phi[j] * u[t];
            gu[t] += g * phi[j] * bt[j];
            gdelta[t] += g_abar * a[j] * abar[j] + g_phi * abar[j];
            ga[j] += g_abar * dt * abar[j] + g_phi * dphi_da(a[j], dt, abar[j], phi[j]);
            carry[j] = abar[j] * g;
        }
    }
    SelectiveGrad {
        u: gu,
        delta: gdelta,
        a_log: ga.iter().zip(a).map(|(g, a)| g * a).collect(),
        b: gb,
        c: gc,
    }
}

/// Input-dependent scan as a tape op. Inputs: `[x (n × E), Δ (n × E),
/// a_log (E × ψ), B (n × ψ), C (n × ψ)]`.
struct SelectiveScanOp {
    cache: Option<Vec<SelectiveCache>>,
}

fn neg_exp(row: &[f64]) -> Vec<f64> {
    row.iter().map(|&a| -a.exp()).collect()
}

impl SelectiveScanOp {
    fn forward(&mut self, inputs: &[&Tensor]) -> Tensor {
        let [x, delta, a_log, b, c] = [inputs[0], inputs[1], inputs[2], inputs[3], inputs[4]];
        let n = x.rows();
        let keep = n * x.cols() * a_log.cols() <= CACHE_LIMIT;
        let runs = par::map_range(x.cols(), |k| {
            let (u, d) = (column(x, k), column(delta, k));
            let (cache, y) = SelectiveCache::build(&u, &d, &neg_exp(a_log.row(k)), b, c);
            (keep.then_some(cache), y)
        });
        let (caches, cols): (Vec<_>, Vec<_>) = runs.into_iter().unzip();
        self.cache = caches.into_iter().collect();
        from_columns(&cols, n)
    }
}

impl CustomOp for SelectiveScanOp {
    fn name(&self) -> &'static str {
        "selective_scan"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let [x, delta, a_log, b, c] = [inputs[0], inputs[1], inputs[2], inputs[3], inputs[4]];
        let (n, e) = (x.rows(), x.cols());
        let p = a_log.cols();
        let per: Vec<SelectiveGrad> = par::map_range(e, |k| {
            let (u, d, gy) = (column(x, k), column(delta, k), column(grad, k));
            let a = neg_exp(a_log.row(k));
            let run = |cache: &SelectiveCache| {
                selective_channel_backward(&u, &d, &gy, &a, b.data(), c.data(), cache)
            };
            match &self.cache {
                Some(cs) => run(&cs[k]),
                None => run(&SelectiveCache::build(&u, &d, &a, b, c).0),
            }
        });
        let gx = from_columns(&per.iter().map(|g| g.u.clone()).collect::<Vec<_>>(), n);
        let gd = from_columns(&per.iter().map(|g| g.delta.clone()).collect::<Vec<_>>(), n);
        let ga = Tensor::from_parts(
            vec![e, p],
            per.iter().flat_map(|g| g.a_log.iter().copied()).collect(),
        );
        let sum = |f: &dyn Fn(&SelectiveGrad) -> &[f64]| {
            let mut acc = vec![0.0; n * p];
            for g in &per {
                acc.iter_mut().zip(f(g)).for_each(|(s, v)| *s += v);
            }
            Tensor::from_parts(vec![n, p], acc)
        };
        vec![
            Some(gx),
            Some(gd),
            Some(ga),
            Some(sum(&|g| &g.b)),
            Some(sum(&|g| &g.c)),
        ]
    }
}

/// Causal depthwise convolution over time: `x: n × c`, `w: c × k`,
/// `y_t = b + Σ_i w_i x_{t−k+1+i}` with zero padding before the start.
#[derive(Debug, Clone, Copy)]
pub struct DepthwiseConv {
    pub w: ParamId,
    pub b: ParamId,
    pub width: usize,
}

impl DepthwiseConv {
    pub fn new(
        store: &mut ParameterStore,
        rng: &mut Rng,
        name: &str,
        channels: usize,
        width: usize,
    ) -> Result<Self> {
        let a = 1.0 / (width as f64).sqrt();
        let w = (0..channels * width)
            .map(|_| rng.uniform_range(-a, a))
            .collect();
        Ok(Self {
            w: store.insert(
                format!("{name}.w"),
                Tensor::from_parts(vec![channels, width], w),
            )?,
            b: store.insert(format!("{name}.b"), Tensor::zeros(&[channels]))?,
            width,
        })
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Var {
        let w = tape.param(self.w);
        let b = tape.param(self.b);
        let y = conv_forward(tape.value(x), tape.value(w), tape.value(b));
        tape.custom(vec![x, w, b], y, Box::new(ConvOp))
    }
}

fn conv_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    let (n, c) = (x.rows(), x.cols());
    let k = w.cols();
    let (xd, wd, bd) = (x.data(), w.data(), b.data());
    let mut y = vec![0.0; n * c];
    for t in 0..n {
        for ch in 0..c {
            let mut acc = bd[ch];
            for i in 0..k {
                if let Some(s) = (t + i + 1).checked_sub(k) {
                    acc += wd[ch * k + i] * xd[s * c + ch];
                }
            }
            y[t * c + ch] = acc;
        }
    }
    Tensor::from_parts(vec![n, c], y)
}

struct ConvOp;

impl CustomOp for ConvOp {
    fn name(&self) -> &'static str {
        "depthwise_conv"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let (x, w) = (inputs[0], inputs[1]);
        let (n, c) = (x.rows(), x.cols());
        let k = w.cols();
        let (xd, wd, gd) = (x.data(), w.data(), grad.data());
        let mut gx = vec![0.0; n * c];
        let mut gw = vec![0.0; c * k];
        let mut gb = vec![0.0; c];
        for t in 0..n {
            for ch in 0..c {
                let g = gd[t * c + ch];
                gb[ch] += g;
                for i in 0..k {
                    if let Some(s) = (t + i + 1).checked_sub(k) {
                        gx[s * c + ch] += g * wd[ch * k + i];
                        gw[ch * k + i] += g * xd[s * c + ch];
                    }
                }
            }
        }
        vec![
            Some(Tensor::from_parts(vec![n, c], gx)),
            Some(Tensor::from_parts(vec![c, k], gw)),
            Some(Tensor::from_parts(vec![c], gb)),
        ]
    }
}

/// Shape settings shared by every block of an encoder.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MambaConfig {
    pub tau: usize,
    pub expansion: usize,
    pub state_dim: usize,
    pub conv_width: usize,
    pub mode: SsmMode,
}

#[derive(Debug, Clone, Copy)]
pub struct MambaBlock {
    pub rms_gain: ParamId,
    pub in_a: Linear,
    pub in_b: Linear,
    pub conv: DepthwiseConv,
    pub ssm: SsmLayer,
    pub out: Linear,
    pub tau: usize,
}

impl MambaBlock {
    pub fn new(
        store: &mut ParameterStore,
        rng: &mut Rng,
        name: &str,
        cfg: &MambaConfig,
    ) -> Result<Self> {
        if cfg.expansion == 0 || cfg.tau == 0 || cfg.state_dim == 0 || cfg.conv_width == 0 {
            return Err(Error::Config(format!("invalid mamba shape {cfg:?}")));
        }
        let inner = cfg.tau * cfg.expansion;
        Ok(Self {
            rms_gain: store.insert(format!("{name}.rms.gain"), Tensor::filled(&[cfg.tau], 1.0))?,
            in_a: Linear::new(store, rng, &format!("{name}.in_a"), cfg.tau, inner, false)?,
            in_b: Linear::new(store, rng, &format!("{name}.in_b"), cfg.tau, inner, false)?,
            conv: DepthwiseConv::new(store, rng, &format!("{name}.conv"), inner, cfg.conv_width)?,
            ssm: SsmLayer::new(
                store,
                rng,
                &format!("{name}.ssm"),
                inner,
                cfg.state_dim,
                cfg.mode,
            )?,
            out: Linear::new(store, rng, &format!("{name}.out"), inner, cfg.tau, false)?,
            tau: cfg.tau,
        })
    }

    pub fn forward(&self, tape: &mut Tape, e: Var) -> Result<Var> {
        let cols = tape.value(e).cols();
        if cols != self.tau || tape.value(e).shape().len() != 2 {
            return Err(Error::contract(format!(
                "mamba block expects n × {} input, got shape {:?}",
                self.tau,
                tape.value(e).shape()
            )));
        }
        let gain = tape.param(self.rms_gain);
        let r = tape.rms_norm(e, gain, 1e-6);
        let xa = self.in_a.forward(tape, r);
        let xa = self.conv.forward(tape, xa);
        let xa = tape.silu(xa);
        let ya = self.ssm.forward(tape, xa);
        let xb = self.in_b.forward(tape, r);
        let gate = tape.silu(xb);
        let z = tape.mul(ya, gate);
        let z = self.out.forward(tape, z);
        Ok(tape.add(e, z))
    }
}

/// `M·h` Mamba blocks applied in sequence.
#[derive(Debug, Clone)]
pub struct MambaEncoder {
    pub blocks: Vec<MambaBlock>,
}

impl MambaEncoder {
    pub fn new(
        store: &mut ParameterStore,
        rng: &mut Rng,
        n_blocks: usize,
        layers_per_block: usize,
        cfg: &MambaConfig,
    ) -> Result<Self> {
        if n_blocks == 0 || layers_per_block == 0 {
            return Err(Error::Config(
                "the encoder needs at least one block and one layer per block".into(),
            ));
        }
        let blocks = (0..n_blocks * layers_per_block)
            .map(|i| MambaBlock::new(store, rng, &format!("mamba.{i}"), cfg))
            .collect::<Result<_>>()?;
        Ok(Self { blocks })
    }

    pub fn forward(&self, tape: &mut Tape, e: Var) -> Result<Var> {
        self.blocks.iter().try_fold(e, |x, b| b.forward(tape, x))
    }

    /// Stand-alone evaluation of the contextual encoding `C_E`.
    pub fn encode(&self, store: &ParameterStore, e: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new(store);
        let x = tape.constant(e.clone());
        let y = self.forward(&mut tape, x)?;
        Ok(tape.value(y).clone())
    }
}

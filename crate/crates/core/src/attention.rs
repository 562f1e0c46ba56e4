//! Multi-head self-attention over the contextual sequence and the fusion
//! pooling that turns it into one record vector.
//!
//! The attention kernel streams over keys one query row at a time and keeps
//! only the per-row log-sum-exp, so memory stays linear in `n`. The backward
//! pass recomputes the probabilities from the saved log-sum-exp.

use crate::error::{Error, Result};
use crate::layers::{LayerNormParams, Linear};
use crate::numerics::{dot, softmax, CustomOp, ParamId, ParameterStore, Rng, Tape, Tensor, Var};
use crate::par;

/// Scaled dot-product attention over `heads` column blocks of `q, k, v`
/// (each `n × τ`). Returns the output and the per-row, per-head
/// log-sum-exp of the scores (`n × heads`).
fn attend(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize, causal: bool) -> (Tensor, Vec<f64>) {
    let (n, tau) = (q.rows(), q.cols());
    let dh = tau / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let per_head: Vec<(Vec<f64>, Vec<f64>)> = par::map_range(heads, |h| {
        let cols = h * dh..(h + 1) * dh;
        let mut out = vec![0.0; n * dh];
        let mut lse = vec![0.0; n];
        let mut s = vec![0.0; n];
        for i in 0..n {
            let qi = &q.row(i)[cols.clone()];
            let end = if causal { i + 1 } else { n };
            let mut m = f64::NEG_INFINITY;
            for j in 0..end {
                s[j] = scale * dot(qi, &k.row(j)[cols.clone()]);
                m = m.max(s[j]);
            }
            let mut z = 0.0;
            let o = &mut out[i * dh..(i + 1) * dh];
            for j in 0..end {
                let p = (s[j] - m).exp();
                z += p;
                for (oc, vc) in o.iter_mut().zip(&v.row(j)[cols.clone()]) {
                    *oc += p * vc;
                }
            }
            o.iter_mut().for_each(|x| *x /= z);
            lse[i] = m + z.ln();
        }
        (out, lse)
    });
    let mut out = vec![0.0; n * tau];
    let mut lse = vec![0.0; n * heads];
    for (h, (o, l)) in per_head.iter().enumerate() {
        for i in 0..n {
            out[i * tau + h * dh..i * tau + (h + 1) * dh].copy_from_slice(&o[i * dh..(i + 1) * dh]);
            lse[i * heads + h] = l[i];
        }
    }
    (Tensor::from_parts(vec![n, tau], out), lse)
}

/// Full attention probability matrices, one `n × n` tensor per head.
/// Intended for inspection of short sequences.
pub fn attention_weights(
    q: &Tensor,
    k: &Tensor,
    heads: usize,
    causal: bool,
) -> Result<Vec<Tensor>> {
    check_heads(q.cols(), heads)?;
    let (n, dh) = (q.rows(), q.cols() / heads);
    let scale = 1.0 / (dh as f64).sqrt();
    Ok((0..heads)
        .map(|h| {
            let cols = h * dh..(h + 1) * dh;
            let mut w = vec![0.0; n * n];
            for i in 0..n {
                let end = if causal { i + 1 } else { n };
                let s: Vec<f64> = (0..end)
                    .map(|j| scale * dot(&q.row(i)[cols.clone()], &k.row(j)[cols.clone()]))
                    .collect();
                w[i * n..i * n + end].copy_from_slice(&softmax(&s));
            }
            Tensor::from_parts(vec![n, n], w)
        })
        .collect())
}

fn check_heads(tau: usize, heads: usize) -> Result<()> {
    if heads == 0 || !tau.is_multiple_of(heads) {
        return Err(Error::contract(format!(
            "width {tau} is not divisible into {heads} heads"
        )));
    }
    Ok(())
}

struct AttentionOp {
    heads: usize,
    causal: bool,
    lse: Vec<f64>,
}

impl CustomOp for AttentionOp {
    fn name(&self) -> &'static str {
        "attention"
    }

    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let (q, k, v) = (inputs[0], inputs[1], inputs[2]);
        let (n, tau) = (q.rows(), q.cols());
        let heads = self.heads;
        let dh = tau / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let per_head: Vec<[Vec<f64>; 3]> = par::map_range(heads, |h| {
            let cols = h * dh..(h + 1) * dh;
            let mut gq = vec![0.0; n * dh];
            let mut gk = vec![0.0; n * dh];
            let mut gv = vec![0.0; n * dh];
            for i in 0..n {
                let qi = &q.row(i)[cols.clone()];
                let go = &grad.row(i)[cols.clone()];
                let di = dot(go, &output.row(i)[cols.clone()]);
                let lse = self.lse[i * heads + h];
                let end = if self.causal { i + 1 } else { n };
                for j in 0..end {
                    let kj = &k.row(j)[cols.clone()];
                    let vj = &v.row(j)[cols.clone()];
                    let p = (scale * dot(qi, kj) - lse).exp();
                    let ds = p * (dot(go, vj) - di) * scale;
                    for c in 0..dh {
                        gv[j * dh + c] += p * go[c];
                        gq[i * dh + c] += ds * kj[c];
                        gk[j * dh + c] += ds * qi[c];
                    }
                }
            }
            [gq, gk, gv]
        });
        (0..3)
            .map(|which| {
                let mut g = vec![0.0; n * tau];
                for (h, blocks) in per_head.iter().enumerate() {
                    let b = &blocks[which];
                    for i in 0..n {
                        g[i * tau + h * dh..i * tau + (h + 1) * dh]
                            .copy_from_slice(&b[i * dh..(i + 1) * dh]);
                    }
                }
                Some(Tensor::from_parts(vec![n, tau], g))
            })
            .collect()
    }
}

/// Records multi-head attention of already projected `q, k, v` on `tape`.
pub fn multi_head_attention(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    causal: bool,
) -> Result<Var> {
    check_heads(tape.value(q).cols(), heads)?;
    let (out, lse) = attend(tape.value(q), tape.value(k), tape.value(v), heads, causal);
    Ok(tape.custom(
        vec![q, k, v],
        out,
        Box::new(AttentionOp { heads, causal, lse }),
    ))
}

/// One pre-norm transformer layer: attention and a SiLU feed-forward
/// sublayer, each with a residual connection.
#[derive(Debug, Clone, Copy)]
pub struct SelfAttentionLayer {
    pub norm1: LayerNormParams,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub norm2: LayerNormParams,
    pub ff1: Linear,
    pub ff2: Linear,
    pub heads: usize,
    pub causal: bool,
}

impl SelfAttentionLayer {
    pub fn new(
        store: &mut ParameterStore,
        rng: &mut Rng,
        name: &str,
        tau: usize,
        heads: usize,
        causal: bool,
    ) -> Result<Self> {
        check_heads(tau, heads)?;
        Ok(Self {
            norm1: LayerNormParams::new(store, &format!("{name}.ln1"), tau)?,
            wq: Linear::new(store, rng, &format!("{name}.wq"), tau, tau, false)?,
            wk: Linear::new(store, rng, &format!("{name}.wk"), tau, tau, false)?,
            wv: Linear::new(store, rng, &format!("{name}.wv"), tau, tau, false)?,
            wo: Linear::new(store, rng, &format!("{name}.wo"), tau, tau, true)?,
            norm2: LayerNormParams::new(store, &format!("{name}.ln2"), tau)?,
            ff1: Linear::new(store, rng, &format!("{name}.ff1"), tau, 4 * tau, true)?,
            ff2: Linear::new(store, rng, &format!("{name}.ff2"), 4 * tau, tau, true)?,
            heads,
            causal,
        })
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let h = self.norm1.forward(tape, x);
        let q = self.wq.forward(tape, h);
        let k = self.wk.forward(tape, h);
        let v = self.wv.forward(tape, h);
        let a = multi_head_attention(tape, q, k, v, self.heads, self.causal)?;
        let a = self.wo.forward(tape, a);
        let x = tape.add(x, a);
        let h = self.norm2.forward(tape, x);
        let h = self.ff1.forward(tape, h);
        let h = tape.silu(h);
        let h = self.ff2.forward(tape, h);
        Ok(tape.add(x, h))
    }

    /// Per-head attention probabilities for the input `x`.
    pub fn weights(&self, store: &ParameterStore, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut tape = Tape::new(store);
        let x = tape.constant(x.clone());
        let h = self.norm1.forward(&mut tape, x);
        let q = self.wq.forward(&mut tape, h);
        let k = self.wk.forward(&mut tape, h);
        attention_weights(tape.value(q), tape.value(k), self.heads, self.causal)
    }
}

#[derive(Debug, Clone)]
pub struct SelfAttentionStack {
    pub layers: Vec<SelfAttentionLayer>,
}

impl SelfAttentionStack {
    pub fn new(
        store: &mut ParameterStore,
        rng: &mut Rng,
        n_layers: usize,
        tau: usize,
        heads: usize,
        causal: bool,
    ) -> Result<Self> {
        let layers = (0..n_layers)
            .map(|l| SelfAttentionLayer::new(store, rng, &format!("attn.{l}"), tau, heads, causal))
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        self.layers.iter().try_fold(x, |x, l| l.forward(tape, x))
    }

    pub fn apply(&self, store: &ParameterStore, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new(store);
        let v = tape.constant(x.clone());
        let y = self.forward(&mut tape, v)?;
        Ok(tape.value(y).clone())
    }
}

/// Fusion pooling `a_i = u_aᵀ tanh(W_a c_i + b_a)`, `α = softmax(a)`,
/// `z^T = Σ α_i c_i`.
#[derive(Debug, Clone, Copy)]
pub struct FusionAttention {
    pub proj: Linear,
    pub u: ParamId,
}

/// Tape handles for a pooled sequence.
#[derive(Debug, Clone, Copy)]
pub struct Pooled {
    /// `1 × τ`.
    pub z: Var,
    /// `n × 1`.
    pub alphas: Var,
}

impl FusionAttention {
    pub fn new(store: &mut ParameterStore, rng: &mut Rng, tau: usize, d_a: usize) -> Result<Self> {
        if d_a == 0 {
            return Err(Error::Config(
                "fusion attention width must be positive".into(),
            ));
        }
        let proj = Linear::new(store, rng, "fusion.wa", tau, d_a, true)?;
        let u = store.insert("fusion.ua", crate::layers::glorot(rng, 1, d_a))?;
        Ok(Self { proj, u })
    }

    /// Unnormalized scores `a`, `n × 1`.
    pub fn scores(&self, tape: &mut Tape, c: Var) -> Var {
        let h = self.proj.forward(tape, c);
        let h = tape.tanh(h);
        let u = tape.param(self.u);
        tape.linear(h, u, None)
    }

    pub fn forward(&self, tape: &mut Tape, c: Var) -> Result<Pooled> {
        let n = tape.value(c).rows();
        if n == 0 {
            return Err(Error::contract(
                "fusion attention needs at least one position",
            ));
        }
        let a = self.scores(tape, c);
        let alphas = tape.softmax(a);
        let row = tape.reshape(alphas, &[1, n])?;
        let z = tape.matmul(row, c);
        Ok(Pooled { z, alphas })
    }
}

/// Uniform mean pooling, the ablation stand-in for [`FusionAttention`].
pub fn mean_pool(tape: &mut Tape, c: Var) -> Pooled {
    let n = tape.value(c).rows();
    let z = tape.mean_rows(c);
    let alphas = tape.constant(Tensor::filled(&[n, 1], 1.0 / n as f64));
    Pooled { z, alphas }
}

/// Stand-alone fusion pooling of `c` (`n × τ`): returns `(z^T, α)`.
pub fn fusion_attention(
    store: &ParameterStore,
    fusion: &FusionAttention,
    c: &Tensor,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if c.shape().len() != 2 || c.rows() == 0 {
        return Err(Error::contract(
            "fusion attention needs an n × τ input with n ≥ 1",
        ));
    }
    let mut tape = Tape::new(store);
    let cv = tape.constant(c.clone());
    let p = fusion.forward(&mut tape, cv)?;
    Ok((
        tape.value(p.z).data().to_vec(),
        tape.value(p.alphas).data().to_vec(),
    ))
}

/// `e^E = [z^d ; z^T]`.
pub fn build_representation(z_d: &[f64], z_t: &[f64]) -> Vec<f64> {
    let mut e = Vec::with_capacity(z_d.len() + z_t.len());
    e.extend_from_slice(z_d);
    e.extend_from_slice(z_t);
    e
}

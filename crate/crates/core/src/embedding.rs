//! Triplet and static embeddings.
//!
//! A triplet `(t, f, v)` maps to `table[f] + FFNᵛ(v) + FFNᵗ(t / time_scale)`,
//! with no discretization of time or value. Both scalar networks have one
//! tanh hidden layer of width τ and a linear output. The static vector goes
//! through `tanh(W₂ tanh(W₁ s + b₁) + b₂)` with a hidden width of `2d`.

use crate::data::Triplet;
use crate::error::{Error, Result};
use crate::layers::Linear;
use crate::numerics::{ParamId, ParameterStore, Rng, Tape, Tensor, Var};

/// One-to-many network from a scalar to a τ-vector.
#[derive(Debug, Clone, Copy)]
pub struct ScalarFfn {
    pub hidden: Linear,
    pub out: Linear,
}

impl ScalarFfn {
    pub fn new(store: &mut ParameterStore, rng: &mut Rng, name: &str, tau: usize) -> Result<Self> {
        Ok(Self {
            hidden: Linear::new(store, rng, &format!("{name}.w1"), 1, tau, true)?,
            out: Linear::new(store, rng, &format!("{name}.w2"), tau, tau, true)?,
        })
    }

    /// `xs: n × 1` to `n × τ`.
    pub fn forward(&self, tape: &mut Tape, xs: Var) -> Var {
        let h = self.hidden.forward(tape, xs);
        let h = tape.tanh(h);
        self.out.forward(tape, h)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TripletEmbedding {
    pub feature_table: ParamId,
    pub ffn_value: ScalarFfn,
    pub ffn_time: ScalarFfn,
    pub n_features: usize,
    pub tau: usize,
    pub time_scale: f64,
}

impl TripletEmbedding {
    pub fn new(
        store: &mut ParameterStore,
        rng: &mut Rng,
        n_features: usize,
        tau: usize,
        time_scale: f64,
    ) -> Result<Self> {
        let table = (0..n_features * tau).map(|_| 0.02 * rng.normal()).collect();
        let feature_table = store.insert(
            "embed.feature_table",
            Tensor::from_parts(vec![n_features, tau], table),
        )?;
        Ok(Self {
            feature_table,
            ffn_value: ScalarFfn::new(store, rng, "embed.ffn_v", tau)?,
            ffn_time: ScalarFfn::new(store, rng, "embed.ffn_t", tau)?,
            n_features,
            tau,
            time_scale,
        })
    }

    /// Records the `n × τ` embedding of `triplets` on `tape`.
    pub fn forward(&self, tape: &mut Tape, triplets: &[Triplet]) -> Result<Var> {
        if triplets.is_empty() {
            return Err(Error::contract("cannot embed an empty triplet sequence"));
        }
        let n = triplets.len();
        let index: Vec<usize> = triplets.iter().map(|t| t.feature).collect();
        let table = tape.param(self.feature_table);
        let ef = tape.gather(table, index)?;
        let values = tape.constant(Tensor::from_parts(
            vec![n, 1],
            triplets.iter().map(|t| t.value).collect(),
        ));
        let ev = self.ffn_value.forward(tape, values);
        let times = tape.constant(Tensor::from_parts(
            vec![n, 1],
            triplets.iter().map(|t| t.time / self.time_scale).collect(),
        ));
        let et = self.ffn_time.forward(tape, times);
        let e = tape.add(ef, ev);
        Ok(tape.add(e, et))
    }

    /// Stand-alone evaluation: the `n × τ` matrix `E`.
    pub fn embed(&self, store: &ParameterStore, triplets: &[Triplet]) -> Result<Tensor> {
        let mut tape = Tape::new(store);
        let e = self.forward(&mut tape, triplets)?;
        Ok(tape.value(e).clone())
    }
}

/// Ablation replacement for [`TripletEmbedding`]: one shared linear map of
/// `[t / time_scale, one_hot(f), v]`.
#[derive(Debug, Clone, Copy)]
pub struct LinearTripletEmbedding {
    pub map: Linear,
    pub n_features: usize,
    pub time_scale: f64,
}

impl LinearTripletEmbedding {
    pub fn new(
        store: &mut ParameterStore,
        rng: &mut Rng,
        n_features: usize,
        tau: usize,
        time_scale: f64,
    ) -> Result<Self> {
        Ok(Self {
            map: Linear::new(store, rng, "embed.linear", n_features + 2, tau, true)?,
            n_features,
            time_scale,
        })
    }

    pub fn forward(&self, tape: &mut Tape, triplets: &[Triplet]) -> Result<Var> {
        if triplets.is_empty() {
            return Err(Error::contract("cannot embed an empty triplet sequence"));
        }
        let width = self.n_features + 2;
        let mut x = vec![0.0; triplets.len() * width];
        for (i, t) in triplets.iter().enumerate() {
            if t.feature >= self.n_features {
                return Err(Error::contract(format!(
                    "feature index {} out of range",
                    t.feature
                )));
            }
            let row = &mut x[i * width..(i + 1) * width];
            row[0] = t.time / self.time_scale;
            row[1 + t.feature] = 1.0;
            row[width - 1] = t.value;
        }
        let x = tape.constant(Tensor::from_parts(vec![triplets.len(), width], x));
        Ok(self.map.forward(tape, x))
    }
}

/// Static (demographic) embedding `z^d ∈ (−1, 1)^d`.
#[derive(Debug, Clone, Copy)]
pub struct StaticEmbedding {
    pub hidden: Linear,
    pub out: Linear,
    pub static_dim: usize,
}

impl StaticEmbedding {
    /// A dataset without statics is fed a single constant zero input.
    pub fn new(
        store: &mut ParameterStore,
        rng: &mut Rng,
        static_dim: usize,
        d: usize,
    ) -> Result<Self> {
        let d_in = static_dim.max(1);
        Ok(Self {
            hidden: Linear::new(store, rng, "static.w1", d_in, 2 * d, true)?,
            out: Linear::new(store, rng, "static.w2", 2 * d, d, true)?,
            static_dim,
        })
    }

    /// `1 × d` embedding of `s`.
    pub fn forward(&self, tape: &mut Tape, s: &[f64]) -> Result<Var> {
        if s.len() != self.static_dim {
            return Err(Error::contract(format!(
                "static vector has {} entries, expected {}",
                s.len(),
                self.static_dim
            )));
        }
        let input = if s.is_empty() { vec![0.0] } else { s.to_vec() };
        let x = tape.constant(Tensor::from_parts(vec![1, input.len()], input));
        let h = self.hidden.forward(tape, x);
        let h = tape.tanh(h);
        let z = self.out.forward(tape, h);
        Ok(tape.tanh(z))
    }

    pub fn embed(&self, store: &ParameterStore, s: &[f64]) -> Result<Tensor> {
        let mut tape = Tape::new(store);
        let z = self.forward(&mut tape, s)?;
        Ok(tape.value(z).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trip(time: f64, feature: usize, value: f64) -> Triplet {
        Triplet {
            time,
            feature,
            value,
        }
    }

    fn setup() -> (ParameterStore, TripletEmbedding, StaticEmbedding) {
        let mut store = ParameterStore::new();
        let mut rng = Rng::new(1);
        let te = TripletEmbedding::new(&mut store, &mut rng, 3, 8, 48.0).unwrap();
        let se = StaticEmbedding::new(&mut store, &mut rng, 2, 4).unwrap();
        (store, te, se)
    }

    fn zero_all(store: &mut ParameterStore) {
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            store.value_mut(id).fill(0.0);
        }
    }

    #[test]
    fn zero_network_gives_zero_embedding() {
        let (mut store, te, se) = setup();
        zero_all(&mut store);
        let e = te
            .embed(&store, &[trip(1.0, 0, 2.0), trip(3.0, 2, -1.0)])
            .unwrap();
        assert!(e.data().iter().all(|&x| x == 0.0));
        let z = se.embed(&store, &[0.0, 0.0]).unwrap();
        assert!(z.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn identical_triplets_give_identical_rows() {
        let (store, te, _) = setup();
        let e = te
            .embed(&store, &[trip(2.0, 1, 0.3), trip(2.0, 1, 0.3)])
            .unwrap();
        assert_eq!(e.row(0), e.row(1));
    }

    #[test]
    fn perturbing_one_value_changes_only_its_row() {
        let (store, te, _) = setup();
        let base = [trip(0.0, 0, 0.1), trip(1.0, 1, 0.2), trip(2.0, 2, 0.3)];
        let mut moved = base;
        moved[0].value += 0.5;
        let a = te.embed(&store, &base).unwrap();
        let b = te.embed(&store, &moved).unwrap();
        assert!(a.row(0) != b.row(0));
        assert_eq!(a.row(1), b.row(1));
        assert_eq!(a.row(2), b.row(2));
    }

    #[test]
    fn permutation_permutes_rows() {
        let (store, te, _) = setup();
        let xs = [trip(0.0, 0, 0.1), trip(1.0, 1, 0.2), trip(2.0, 2, 0.3)];
        let ys = [xs[2], xs[0], xs[1]];
        let a = te.embed(&store, &xs).unwrap();
        let b = te.embed(&store, &ys).unwrap();
        assert_eq!(a.row(2), b.row(0));
        assert_eq!(a.row(0), b.row(1));
    }

    #[test]
    fn value_embedding_is_continuous() {
        let (store, te, _) = setup();
        let a = te.embed(&store, &[trip(1.0, 0, 0.7)]).unwrap();
        let b = te.embed(&store, &[trip(1.0, 0, 0.7 + 1e-6)]).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-5);
    }

    #[test]
    fn out_of_range_feature_is_rejected() {
        let (store, te, _) = setup();
        assert!(te.embed(&store, &[trip(0.0, 3, 1.0)]).is_err());
        assert!(te.embed(&store, &[]).is_err());
    }

    #[test]
    fn static_embedding_stays_inside_unit_box() {
        let (store, _, se) = setup();
        let z = se.embed(&store, &[50.0, -80.0]).unwrap();
        assert!(z
            .data()
            .iter()
            .all(|&x| x > -1.0 && x < 1.0 || x.abs() == 1.0));
        let z = se.embed(&store, &[0.3, -0.2]).unwrap();
        assert!(z.data().iter().all(|&x| x.abs() < 1.0));
        assert!(se.embed(&store, &[1.0]).is_err());
    }

    #[test]
    fn static_embedding_matches_closed_form() {
        // D = 1, d = 1: W1 = [[1], [1]] (hidden width 2), b1 = 0, W2 = [[0.5, -0.25]], b2 = 0.1
        let mut store = ParameterStore::new();
        let mut rng = Rng::new(0);
        let se = StaticEmbedding::new(&mut store, &mut rng, 1, 1).unwrap();
        *store.value_mut(se.hidden.w) = Tensor::matrix(2, 1, vec![1.0, 1.0]).unwrap();
        *store.value_mut(se.out.w) = Tensor::matrix(1, 2, vec![0.5, -0.25]).unwrap();
        *store.value_mut(se.out.b.unwrap()) = Tensor::vector(vec![0.1]);
        let z = se.embed(&store, &[0.5]).unwrap();
        let h = 0.5f64.tanh();
        let expected = (0.5 * h - 0.25 * h + 0.1).tanh();
        assert!((z.item() - expected).abs() < 1e-15);
    }
}

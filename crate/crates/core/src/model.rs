//! The assembled encoder: triplet embedding, Mamba blocks, self-attention,
//! fusion pooling, the static embedding and the two output heads.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attention::{mean_pool, FusionAttention, SelfAttentionStack};
use crate::data::PatientRecord;
use crate::embedding::{LinearTripletEmbedding, StaticEmbedding, TripletEmbedding};
use crate::error::{Error, Result};
use crate::layers::Linear;
use crate::numerics::{ParameterStore, Rng, Tape, Tensor, Var};
use crate::ssm::{MambaConfig, MambaEncoder, SsmMode};

/// Component removals matching the ablation table rows.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablation {
    pub no_input_embedding: bool,
    pub no_self_attention: bool,
    pub no_fusion: bool,
    pub no_pretrain: bool,
    pub no_mamba: bool,
}

impl Ablation {
    pub const FLAGS: [&'static str; 5] = [
        "no_input_embedding",
        "no_self_attention",
        "no_fusion",
        "no_pretrain",
        "no_mamba",
    ];

    fn slot(&mut self, name: &str) -> Option<&mut bool> {
        Some(match name {
            "no_input_embedding" => &mut self.no_input_embedding,
            "no_self_attention" => &mut self.no_self_attention,
            "no_fusion" => &mut self.no_fusion,
            "no_pretrain" => &mut self.no_pretrain,
            "no_mamba" => &mut self.no_mamba,
            _ => return None,
        })
    }

    pub fn set(&mut self, name: &str) -> Result<()> {
        let slot = self.slot(name).ok_or_else(|| {
            Error::Config(format!(
                "unknown ablation flag {name:?} (one of {})",
                Self::FLAGS.join(", ")
            ))
        })?;
        *slot = true;
        Ok(())
    }

    pub fn names(&self) -> Vec<&'static str> {
        let on = [
            self.no_input_embedding,
            self.no_self_attention,
            self.no_fusion,
            self.no_pretrain,
            self.no_mamba,
        ];
        Self::FLAGS
            .iter()
            .zip(on)
            .filter(|(_, on)| *on)
            .map(|(n, _)| *n)
            .collect()
    }

    pub fn is_full(&self) -> bool {
        self.names().is_empty()
    }
}

/// Comma-separated flag names; `""` and `"none"` mean the full model.
impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut a = Ablation::default();
        for part in s
            .split(',')
            .map(str::trim)
            .filter(|p| !p.is_empty() && *p != "none")
        {
            a.set(part)?;
        }
        Ok(a)
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names = self.names();
        if names.is_empty() {
            f.write_str("none")
        } else {
            f.write_str(&names.join(","))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_features: usize,
    pub static_dim: usize,
    /// Triplet embedding width τ.
    pub tau: usize,
    /// Static embedding width d.
    pub d: usize,
    /// Fusion attention width d_a.
    pub d_a: usize,
    /// SSM state size ψ.
    pub state_dim: usize,
    pub conv_width: usize,
    pub expansion: usize,
    /// Number of Mamba blocks M.
    pub n_blocks: usize,
    /// Mamba layers per block h.
    pub layers_per_block: usize,
    pub attn_layers: usize,
    pub heads: usize,
    pub ssm_mode: SsmMode,
    /// Time inputs are divided by this before the time network.
    pub time_scale: f64,
    pub causal_attention: bool,
    pub ablation: Ablation,
}

impl ModelConfig {
    pub fn new(n_features: usize, static_dim: usize) -> Self {
        Self {
            n_features,
            static_dim,
            tau: 16,
            d: 8,
            d_a: 16,
            state_dim: 16,
            conv_width: 4,
            expansion: 2,
            n_blocks: 1,
            layers_per_block: 1,
            attn_layers: 1,
            heads: 4,
            ssm_mode: SsmMode::Selective,
            time_scale: 48.0,
            causal_attention: false,
            ablation: Ablation::default(),
        }
    }

    /// Width of the record representation `d_E = τ + d`.
    pub fn d_e(&self) -> usize {
        self.tau + self.d
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_features", self.n_features),
            ("tau", self.tau),
            ("d", self.d),
            ("d_a", self.d_a),
            ("state_dim", self.state_dim),
            ("conv_width", self.conv_width),
            ("expansion", self.expansion),
            ("n_blocks", self.n_blocks),
            ("layers_per_block", self.layers_per_block),
            ("heads", self.heads),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !self.tau.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "tau {} must be divisible by heads {}",
                self.tau, self.heads
            )));
        }
        if !(self.time_scale > 0.0 && self.time_scale.is_finite()) {
            return Err(Error::Config(format!(
                "time_scale {} must be positive",
                self.time_scale
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Embedder {
    Triplet(TripletEmbedding),
    Linear(LinearTripletEmbedding),
}

/// Parameter handles of every component; values live in a [`ParameterStore`].
#[derive(Debug, Clone)]
pub struct Network {
    pub embed: Embedder,
    pub statics: StaticEmbedding,
    pub mamba: Option<MambaEncoder>,
    pub attention: Option<SelfAttentionStack>,
    pub fusion: Option<FusionAttention>,
    pub forecast_head: Linear,
    pub task_head: Linear,
}

/// Tape handles of one encoded record.
#[derive(Debug, Clone, Copy)]
pub struct Encoding {
    /// `1 × d_E`, static part first.
    pub e: Var,
    /// `n × 1` pooling weights.
    pub alphas: Var,
    /// `n × τ` contextual sequence fed to pooling.
    pub context: Var,
}

impl Network {
    pub fn build(store: &mut ParameterStore, rng: &mut Rng, cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let ab = cfg.ablation;
        let embed = if ab.no_input_embedding {
            Embedder::Linear(LinearTripletEmbedding::new(
                store,
                rng,
                cfg.n_features,
                cfg.tau,
                cfg.time_scale,
            )?)
        } else {
            Embedder::Triplet(TripletEmbedding::new(
                store,
                rng,
                cfg.n_features,
                cfg.tau,
                cfg.time_scale,
            )?)
        };
        let statics = StaticEmbedding::new(store, rng, cfg.static_dim, cfg.d)?;
        let mamba = if ab.no_mamba {
            None
        } else {
            let mc = MambaConfig {
                tau: cfg.tau,
                expansion: cfg.expansion,
                state_dim: cfg.state_dim,
                conv_width: cfg.conv_width,
                mode: cfg.ssm_mode,
            };
            Some(MambaEncoder::new(
                store,
                rng,
                cfg.n_blocks,
                cfg.layers_per_block,
                &mc,
            )?)
        };
        let attention = if ab.no_self_attention || cfg.attn_layers == 0 {
            None
        } else {
            Some(SelfAttentionStack::new(
                store,
                rng,
                cfg.attn_layers,
                cfg.tau,
                cfg.heads,
                cfg.causal_attention,
            )?)
        };
        let fusion = if ab.no_fusion {
            None
        } else {
            Some(FusionAttention::new(store, rng, cfg.tau, cfg.d_a)?)
        };
        let forecast_head =
            Linear::new(store, rng, "head.forecast", cfg.d_e(), cfg.n_features, true)?;
        let task_head = Linear::new(store, rng, "head.task", cfg.d_e(), 1, true)?;
        Ok(Self {
            embed,
            statics,
            mamba,
            attention,
            fusion,
            forecast_head,
            task_head,
        })
    }

    /// Embedding followed by the Mamba blocks: the contextual sequence `C_E`.
    pub fn contextual(&self, tape: &mut Tape, record: &PatientRecord) -> Result<Var> {
        let e = match &self.embed {
            Embedder::Triplet(t) => t.forward(tape, &record.triplets)?,
            Embedder::Linear(l) => l.forward(tape, &record.triplets)?,
        };
        match &self.mamba {
            Some(m) => m.forward(tape, e),
            None => Ok(e),
        }
    }

    pub fn encode(&self, tape: &mut Tape, record: &PatientRecord) -> Result<Encoding> {
        let c = self.contextual(tape, record)?;
        let c = match &self.attention {
            Some(a) => a.forward(tape, c)?,
            None => c,
        };
        let pooled = match &self.fusion {
            Some(f) => f.forward(tape, c)?,
            None => mean_pool(tape, c),
        };
        let z_d = self.statics.forward(tape, &record.statics)?;
        let e = tape.concat_cols(z_d, pooled.z);
        Ok(Encoding {
            e,
            alphas: pooled.alphas,
            context: c,
        })
    }

    /// Forecast of every feature, `1 × |F|`.
    pub fn forecast(&self, tape: &mut Tape, enc: &Encoding) -> Var {
        self.forecast_head.forward(tape, enc.e)
    }

    /// Pre-sigmoid task output, `1 × 1`.
    pub fn logit(&self, tape: &mut Tape, enc: &Encoding) -> Var {
        self.task_head.forward(tape, enc.e)
    }
}

/// Everything a forward pass exposes about one record.
#[derive(Debug, Clone, PartialEq)]
pub struct RecordOutput {
    pub probability: f64,
    pub forecast: Vec<f64>,
    pub alphas: Vec<f64>,
    /// `[z^d ; z^T]`.
    pub representation: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParameterStore,
    pub net: Network,
}

impl Model {
    /// Fresh parameters drawn from the `"init"` substream of `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut store = ParameterStore::new();
        let mut rng = Rng::substream(seed, "init");
        let net = Network::build(&mut store, &mut rng, &config)?;
        Ok(Self { config, store, net })
    }

    pub fn check_record(&self, record: &PatientRecord) -> Result<()> {
        if record.triplets.is_empty() {
            return Err(Error::contract(format!(
                "record {} has no triplets",
                record.id
            )));
        }
        if let Some(t) = record
            .triplets
            .iter()
            .find(|t| t.feature >= self.config.n_features)
        {
            return Err(Error::contract(format!(
                "record {}: feature index {} out of range for {} features",
                record.id, t.feature, self.config.n_features
            )));
        }
        if record.statics.len() != self.config.static_dim {
            return Err(Error::contract(format!(
                "record {}: {} static values, model expects {}",
                record.id,
                record.statics.len(),
                self.config.static_dim
            )));
        }
        Ok(())
    }

    pub fn run(&self, record: &PatientRecord) -> Result<RecordOutput> {
        self.check_record(record)?;
        let mut tape = Tape::new(&self.store);
        let enc = self.net.encode(&mut tape, record)?;
        let fc = self.net.forecast(&mut tape, &enc);
        let logit = self.net.logit(&mut tape, &enc);
        Ok(RecordOutput {
            probability: crate::numerics::sigmoid(tape.value(logit).item()),
            forecast: tape.value(fc).data().to_vec(),
            alphas: tape.value(enc.alphas).data().to_vec(),
            representation: tape.value(enc.e).data().to_vec(),
        })
    }

    pub fn predict(&self, record: &PatientRecord) -> Result<f64> {
        self.check_record(record)?;
        let mut tape = Tape::new(&self.store);
        let enc = self.net.encode(&mut tape, record)?;
        let logit = self.net.logit(&mut tape, &enc);
        Ok(crate::numerics::sigmoid(tape.value(logit).item()))
    }

    /// Contextual sequence `C_E` (embedding plus Mamba blocks) of a record.
    pub fn contextual(&self, record: &PatientRecord) -> Result<Tensor> {
        self.check_record(record)?;
        let mut tape = Tape::new(&self.store);
        let c = self.net.contextual(&mut tape, record)?;
        Ok(tape.value(c).clone())
    }
}

//! Mamba encoder / cross-attention decoder policy over operation-machine pairs.

mod mamba;
pub mod ssm;

use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use mamba::MambaBlock;
pub use ssm::{selective_scan, selective_scan_associative, ssm_discretize, ScanInputs};

use crate::env::{FeatureBundle, Schedule, SimState, MACHINE_FEATURES, OP_FEATURES, PAIR_FEATURES};
use crate::error::{Error, Result};
use crate::instance::FjspInstance;
use crate::tensor::nn::{LayerNorm, Linear, Mha, Mlp};
use crate::tensor::{load_checkpoint, save_checkpoint, Graph, ParamStore, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    /// Separate Mamba branches for operations and machines.
    Dme,
    /// Linear embedding only.
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderKind {
    CrossAttention,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PolicyConfig {
    pub d_model: usize,
    pub heads: usize,
    pub mamba_layers: usize,
    pub state_size: usize,
    pub conv_window: usize,
    pub expand: usize,
    pub hidden: usize,
    pub hidden_layers: usize,
    pub encoder: EncoderKind,
    pub decoder: DecoderKind,
    pub seed: u64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            d_model: 128,
            heads: 8,
            mamba_layers: 1,
            state_size: 16,
            conv_window: 4,
            expand: 2,
            hidden: 64,
            hidden_layers: 3,
            encoder: EncoderKind::Dme,
            decoder: DecoderKind::CrossAttention,
            seed: 0,
        }
    }
}

impl PolicyConfig {
    pub fn with_dims(d_model: usize, heads: usize, state_size: usize) -> Self {
        Self {
            d_model,
            heads,
            state_size,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpec(m));
        if self.d_model == 0 || self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return bad(format!(
                "d_model {} must be a positive multiple of heads {}",
                self.d_model, self.heads
            ));
        }
        if self.state_size == 0 || self.conv_window == 0 || self.expand == 0 || self.hidden == 0 {
            return bad("state_size, conv_window, expand and hidden must be positive".into());
        }
        Ok(())
    }

    /// Width of each candidate vector.
    pub fn candidate_width(&self) -> usize {
        4 * self.d_model + PAIR_FEATURES
    }
}

#[derive(Debug, Clone)]
struct CrossAttnLayer {
    ln_q: LayerNorm,
    ln_kv: LayerNorm,
    mha: Mha,
    ln_ff: LayerNorm,
    ff_in: Linear,
    ff_out: Linear,
}

impl CrossAttnLayer {
    fn new(store: &mut ParamStore, name: &str, cfg: &PolicyConfig, rng: &mut impl Rng) -> Result<Self> {
        let d = cfg.d_model;
        Ok(Self {
            ln_q: LayerNorm::new(store, &format!("{name}.ln_q"), d)?,
            ln_kv: LayerNorm::new(store, &format!("{name}.ln_kv"), d)?,
            mha: Mha::new(store, &format!("{name}.mha"), d, cfg.heads, rng)?,
            ln_ff: LayerNorm::new(store, &format!("{name}.ln_ff"), d)?,
            ff_in: Linear::new(store, &format!("{name}.ff_in"), d, 4 * d, true, rng)?,
            ff_out: Linear::new(store, &format!("{name}.ff_out"), 4 * d, d, true, rng)?,
        })
    }

    fn forward(&self, g: &mut Graph, q: Var, kv: Var, attn: &mut Vec<(usize, usize)>) -> Result<Var> {
        let qn = self.ln_q.forward(g, q)?;
        let kvn = self.ln_kv.forward(g, kv)?;
        let (a, maps) = self.mha.forward(g, qn, kvn)?;
        attn.extend(maps.iter().map(|&m| g.shape(m)));
        let h = g.add(q, a)?;
        let f = self.ln_ff.forward(g, h)?;
        let f = self.ff_in.forward(g, f)?;
        let f = g.silu(f);
        let f = self.ff_out.forward(g, f)?;
        g.add(h, f)
    }
}

/// Network parameters plus the layer layout that reads them.
#[derive(Debug, Clone)]
pub struct Policy {
    cfg: PolicyConfig,
    pub params: ParamStore,
    op_embed: Linear,
    machine_embed: Linear,
    op_blocks: Vec<MambaBlock>,
    machine_blocks: Vec<MambaBlock>,
    decoder: Vec<CrossAttnLayer>,
    actor: Mlp,
    critic: Mlp,
}

/// Graph nodes produced by one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardVars {
    /// `n_pairs x 1` log-probabilities.
    pub log_probs: Var,
    /// `1 x 1` state value.
    pub value: Var,
    pub ops: Var,
    pub machines: Var,
    /// Shapes of every decoder attention matrix, in evaluation order.
    pub attention_shapes: Vec<(usize, usize)>,
}

impl Policy {
    pub fn new(cfg: PolicyConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut s = ParamStore::new();
        let d = cfg.d_model;
        let op_embed = Linear::new(&mut s, "enc.op_embed", OP_FEATURES, d, true, &mut rng)?;
        let machine_embed = Linear::new(&mut s, "enc.machine_embed", MACHINE_FEATURES, d, true, &mut rng)?;
        let (mut op_blocks, mut machine_blocks) = (Vec::new(), Vec::new());
        if cfg.encoder == EncoderKind::Dme {
            for i in 0..cfg.mamba_layers {
                op_blocks.push(MambaBlock::new(&mut s, &format!("enc.op.{i}"), &cfg, &mut rng)?);
            }
            for i in 0..cfg.mamba_layers {
                machine_blocks.push(MambaBlock::new(&mut s, &format!("enc.machine.{i}"), &cfg, &mut rng)?);
            }
        }
        let decoder = match cfg.decoder {
            DecoderKind::CrossAttention => vec![
                CrossAttnLayer::new(&mut s, "dec.machines", &cfg, &mut rng)?,
                CrossAttnLayer::new(&mut s, "dec.ops", &cfg, &mut rng)?,
            ],
            DecoderKind::None => Vec::new(),
        };
        let actor = Mlp::new(&mut s, "actor", cfg.candidate_width(), cfg.hidden, cfg.hidden_layers, 1, &mut rng)?;
        let critic = Mlp::new(&mut s, "critic", 2 * d, cfg.hidden, cfg.hidden_layers, 1, &mut rng)?;
        Ok(Self {
            cfg,
            params: s,
            op_embed,
            machine_embed,
            op_blocks,
            machine_blocks,
            decoder,
            actor,
            critic,
        })
    }

    pub fn config(&self) -> &PolicyConfig {
        &self.cfg
    }

    /// Encoder output for raw operation and machine matrices.
    pub fn encode(&self, g: &mut Graph, ops: Var, machines: Var) -> Result<(Var, Var)> {
        let mut ho = self.op_embed.forward(g, ops)?;
        for b in &self.op_blocks {
            ho = b.forward(g, ho)?;
        }
        let mut hm = self.machine_embed.forward(g, machines)?;
        for b in &self.machine_blocks {
            hm = b.forward(g, hm)?;
        }
        Ok((ho, hm))
    }

    /// Two cross-attention layers: machines attend to operations, then
    /// operations attend to the updated machines.
    pub fn decode(
        &self,
        g: &mut Graph,
        ho: Var,
        hm: Var,
        attn: &mut Vec<(usize, usize)>,
    ) -> Result<(Var, Var)> {
        match self.decoder.as_slice() {
            [] => Ok((ho, hm)),
            [machines, ops] => {
                let hm2 = machines.forward(g, hm, ho, attn)?;
                let ho2 = ops.forward(g, ho, hm2, attn)?;
                Ok((ho2, hm2))
            }
            _ => unreachable!("decoder has zero or two layers"),
        }
    }

    pub fn forward_graph(&self, g: &mut Graph, f: &FeatureBundle) -> Result<ForwardVars> {
        if f.n_pairs() == 0 {
            return Err(Error::Contract("policy called with no eligible pairs".into()));
        }
        let ops = g.input(f.n_ops, OP_FEATURES, f.ops.clone())?;
        let machines = g.input(f.n_machines, MACHINE_FEATURES, f.machines.clone())?;
        let (ho, hm) = self.encode(g, ops, machines)?;
        let mut attention_shapes = Vec::new();
        let (ho, hm) = self.decode(g, ho, hm, &mut attention_shapes)?;
        let pool_o = pool_nonzero(g, ho, &f.op_active)?;
        let pool_m = pool_nonzero(g, hm, &vec![true; f.n_machines])?;

        let n = f.n_pairs();
        let machine_rows: Vec<usize> = f.pairs.iter().map(|p| p.machine).collect();
        let cand_o = g.gather_rows(ho, &f.pair_op_rows)?;
        let cand_m = g.gather_rows(hm, &machine_rows)?;
        let rep_o = g.repeat_row(pool_o, n)?;
        let rep_m = g.repeat_row(pool_m, n)?;
        let pair = g.input(n, PAIR_FEATURES, f.pair_features.clone())?;
        let cand = g.concat_cols(&[cand_o, cand_m, rep_o, rep_m, pair])?;
        let logits = self.actor.forward(g, cand)?;
        let log_probs = g.log_softmax(logits);

        let global = g.concat_cols(&[pool_o, pool_m])?;
        let value = self.critic.forward(g, global)?;
        Ok(ForwardVars {
            log_probs,
            value,
            ops: ho,
            machines: hm,
            attention_shapes,
        })
    }

    /// Log-probabilities over `f.pairs` and the state value.
    pub fn forward_log(&self, f: &FeatureBundle) -> Result<(Vec<f64>, f64)> {
        let mut g = Graph::new(&self.params);
        let out = self.forward_graph(&mut g, f)?;
        let logp = g.value(out.log_probs).to_vec();
        let value = g.scalar(out.value);
        if !value.is_finite() || logp.iter().any(|p| p.is_nan() || *p == f64::INFINITY) {
            return Err(Error::NonFinite("policy output".into()));
        }
        Ok((logp, value))
    }

    /// Probabilities over `f.pairs` and the state value.
    pub fn forward(&self, f: &FeatureBundle) -> Result<(Vec<f64>, f64)> {
        let (logp, value) = self.forward_log(f)?;
        Ok((logp.iter().map(|v| v.exp()).collect(), value))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(path, &self.params, &serde_json::to_value(&self.cfg)?)
    }

    /// Rebuild from a checkpoint; tensor names and shapes must match the
    /// layout implied by the stored configuration.
    pub fn load(path: &Path) -> Result<Self> {
        let (store, cfg) = load_checkpoint(path)?;
        let cfg: PolicyConfig = serde_json::from_value(cfg)?;
        let mut policy = Policy::new(cfg)?;
        policy.set_params(store)?;
        Ok(policy)
    }

    /// Replace parameter values with those of `store` (same names and shapes).
    pub fn set_params(&mut self, store: ParamStore) -> Result<()> {
        if store.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                self.params.len(),
                store.len()
            )));
        }
        for (_, name, t) in self.params.iter() {
            let Some(src) = store.by_name(name) else {
                return Err(Error::Checkpoint(format!("missing tensor `{name}`")));
            };
            if src.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` has shape {:?}, expected {:?}",
                    src.shape(),
                    t.shape()
                )));
            }
        }
        let mut fresh = ParamStore::new();
        for (_, name, _) in self.params.iter() {
            fresh.add(name, store.by_name(name).expect("checked").clone())?;
        }
        self.params = fresh;
        Ok(())
    }
}

/// Mean over active rows (`1 x cols`).
pub fn pool_nonzero(g: &mut Graph, h: Var, active: &[bool]) -> Result<Var> {
    g.masked_mean_rows(h, active)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecodeMode {
    Greedy,
    Sample,
}

/// Greedy takes the first maximum; sampling draws from the categorical.
pub fn select_action(probs: &[f64], mode: DecodeMode, rng: &mut impl Rng) -> usize {
    match mode {
        DecodeMode::Greedy => {
            let mut best = 0;
            for (i, &p) in probs.iter().enumerate() {
                if p > probs[best] {
                    best = i;
                }
            }
            best
        }
        DecodeMode::Sample => {
            let u: f64 = rng.gen();
            let total: f64 = probs.iter().sum();
            let mut acc = 0.0;
            for (i, &p) in probs.iter().enumerate() {
                acc += p / total;
                if u < acc {
                    return i;
                }
            }
            probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
        }
    }
}

/// Time spent in network evaluation versus environment bookkeeping.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RolloutTiming {
    pub model: Duration,
    pub env: Duration,
}

/// One episode driven by `policy`.
pub fn policy_rollout(
    policy: &Policy,
    inst: Arc<FjspInstance>,
    mode: DecodeMode,
    rng: &mut impl Rng,
) -> Result<Schedule> {
    policy_rollout_timed(policy, inst, mode, rng).map(|(s, _)| s)
}

pub fn policy_rollout_timed(
    policy: &Policy,
    inst: Arc<FjspInstance>,
    mode: DecodeMode,
    rng: &mut impl Rng,
) -> Result<(Schedule, RolloutTiming)> {
    let mut timing = RolloutTiming::default();
    let mut clock = Instant::now();
    let mut state = SimState::reset(inst);
    while !state.is_done() {
        let f = state.features();
        let split = Instant::now();
        timing.env += split - clock;
        let (probs, _) = policy.forward(&f)?;
        let a = select_action(&probs, mode, rng);
        clock = Instant::now();
        timing.model += clock - split;
        state.step(f.pairs[a])?;
    }
    let sched = state.to_schedule()?;
    timing.env += clock.elapsed();
    Ok((sched, timing))
}

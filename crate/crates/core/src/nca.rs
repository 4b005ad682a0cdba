//! Cellular-automaton core: state layout, asynchronous stochastic updates,
//! the replay pool, and the two transition functions.
//!
//! Both transitions compute a per-cell update vector from the cell's 3x3
//! Moore neighborhood only, then apply it through a Bernoulli cell mask:
//! masked-out cells are copied bit-exactly. Gradients in training mode flow
//! through the entire unrolled step sequence.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{LayerNorm, LinearLayer, Mode, Module, TResult};
use crate::layers::Conv2dLayer;
use crate::tensor::{
    bernoulli_cell_mask, dropout_mask, Element, PaddingMode, Param, Tape, Tensor, Var,
};

pub const DEFAULT_HIDDEN_CHANNELS: usize = 32;
pub const DEFAULT_POOL_CAPACITY: usize = 1024;
/// Dropout keep-probability inside the NAFCA blocks.
pub const NAFCA_KEEP_PROB: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransitionKind {
    Vitca,
    Nafca,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransitionConfig {
    pub kind: TransitionKind,
    pub embed_dim: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    pub use_positional_encoding: bool,
    /// Bernoulli rate of the asynchronous update mask, in (0, 1].
    pub update_probability: f64,
    pub hidden_channels: usize,
    /// Width multipliers for the NAFCA 1x1 convolutions (before the
    /// SimpleGate halves them).
    pub perception_width: usize,
    pub update_width: usize,
}

impl Default for TransitionConfig {
    fn default() -> Self {
        TransitionConfig {
            kind: TransitionKind::Nafca,
            embed_dim: 64,
            heads: 4,
            mlp_hidden: 128,
            use_positional_encoding: false,
            update_probability: 0.5,
            hidden_channels: DEFAULT_HIDDEN_CHANNELS,
            perception_width: 2,
            update_width: 2,
        }
    }
}

impl TransitionConfig {
    pub fn vitca() -> Self {
        TransitionConfig { kind: TransitionKind::Vitca, ..Default::default() }
    }

    pub fn nafca() -> Self {
        TransitionConfig { kind: TransitionKind::Nafca, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.update_probability > 0.0 && self.update_probability <= 1.0) {
            return Err(Error::Config(format!(
                "update_probability {} outside (0,1]",
                self.update_probability
            )));
        }
        if self.kind == TransitionKind::Vitca && self.embed_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} not divisible by heads {}",
                self.embed_dim, self.heads
            )));
        }
        if self.hidden_channels == 0 {
            return Err(Error::Config("hidden_channels must be positive".into()));
        }
        Ok(())
    }
}

// ── CA state ────────────────────────────────────────────────────────

/// Lattice of cell states: the leading `visible_channels` of the channel
/// axis are the output channels (seeded from the latent), the rest are
/// hidden channels. Stored as one contiguous tensor.
#[derive(Clone)]
pub struct CaState<E: Element> {
    pub cells: Tensor<E>,
    pub visible_channels: usize,
    pub step: u64,
}

impl<E: Element> CaState<E> {
    pub fn dims(&self) -> (usize, usize, usize, usize) {
        self.cells.dims4()
    }

    pub fn hidden_channels(&self) -> usize {
        self.cells.shape()[3] - self.visible_channels
    }

    fn slice_channels(&self, from: usize, to: usize) -> Tensor<E> {
        let mut tape = Tape::eval();
        let v = tape.constant(&self.cells);
        tape.slice_last(&v, from, to).expect("in-range slice").value().clone()
    }

    /// Copy of the visible (output) channels.
    pub fn visible(&self) -> Tensor<E> {
        self.slice_channels(0, self.visible_channels)
    }

    /// Copy of the hidden channels.
    pub fn hidden(&self) -> Tensor<E> {
        self.slice_channels(self.visible_channels, self.cells.shape()[3])
    }
}

// ── Transition functions ────────────────────────────────────────────

struct VitcaNet<E: Element> {
    embed: LinearLayer<E>,
    ln_attn: LayerNorm<E>,
    wq: LinearLayer<E>,
    wk: LinearLayer<E>,
    wv: LinearLayer<E>,
    wo: LinearLayer<E>,
    ln_mlp: LayerNorm<E>,
    mlp_in: LinearLayer<E>,
    mlp_out: LinearLayer<E>,
    ln_head: LayerNorm<E>,
    head: LinearLayer<E>,
    heads: usize,
    positional: bool,
}

impl<E: Element> VitcaNet<E> {
    fn new(state_channels: usize, cfg: &TransitionConfig, rng: &mut ChaCha8Rng) -> TResult<Self> {
        let e = cfg.embed_dim;
        let in_dim = state_channels + if cfg.use_positional_encoding { 2 } else { 0 };
        Ok(VitcaNet {
            embed: LinearLayer::new("nca.vitca.embed", in_dim, e, true, rng)?,
            ln_attn: LayerNorm::new("nca.vitca.ln_attn", e)?,
            wq: LinearLayer::new("nca.vitca.wq", e, e, false, rng)?,
            wk: LinearLayer::new("nca.vitca.wk", e, e, false, rng)?,
            wv: LinearLayer::new("nca.vitca.wv", e, e, false, rng)?,
            wo: LinearLayer::new("nca.vitca.wo", e, e, false, rng)?,
            ln_mlp: LayerNorm::new("nca.vitca.ln_mlp", e)?,
            mlp_in: LinearLayer::new("nca.vitca.mlp_in", e, cfg.mlp_hidden, true, rng)?,
            mlp_out: LinearLayer::new("nca.vitca.mlp_out", cfg.mlp_hidden, e, true, rng)?,
            ln_head: LayerNorm::new("nca.vitca.ln_head", e)?,
            // zero head: a fresh model leaves the state untouched
            head: LinearLayer::new_zeroed("nca.vitca.head", e, state_channels, true)?,
            heads: cfg.heads,
            positional: cfg.use_positional_encoding,
        })
    }

    /// Per-cell update vector: embedding, localized MHSA, MLP, head.
    fn delta(&self, tape: &mut Tape<E>, cells: &Var<E>) -> TResult<Var<E>> {
        let input = if self.positional {
            let (b, h, w, _) = cells.value().dims4();
            let pos = tape.constant(&positional_encoding(b, h, w)?);
            tape.concat_last(&[cells, &pos])?
        } else {
            cells.clone()
        };
        let mut tok = self.embed.forward(tape, &input)?;
        // localized attention with residual
        let a = self.ln_attn.forward(tape, &tok)?;
        let q = self.wq.forward(tape, &a)?;
        let k = self.wk.forward(tape, &a)?;
        let v = self.wv.forward(tape, &a)?;
        let mixed = tape.local_attention(&q, &k, &v, self.heads)?;
        let mixed = self.wo.forward(tape, &mixed)?;
        tok = tape.add(&tok, &mixed)?;
        // two-layer MLP with GELU, residual
        let m = self.ln_mlp.forward(tape, &tok)?;
        let m = self.mlp_in.forward(tape, &m)?;
        let m = tape.gelu(&m)?;
        let m = self.mlp_out.forward(tape, &m)?;
        tok = tape.add(&tok, &m)?;
        let h = self.ln_head.forward(tape, &tok)?;
        self.head.forward(tape, &h)
    }
}

impl<E: Element> Module<E> for VitcaNet<E> {
    fn visit_params(&self, f: &mut dyn FnMut(&Param<E>)) {
        for m in [
            &self.embed, &self.wq, &self.wk, &self.wv, &self.wo, &self.mlp_in, &self.mlp_out,
            &self.head,
        ] {
            m.visit_params(f);
        }
        self.ln_attn.visit_params(f);
        self.ln_mlp.visit_params(f);
        self.ln_head.visit_params(f);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<E>)) {
        self.embed.visit_params_mut(f);
        self.wq.visit_params_mut(f);
        self.wk.visit_params_mut(f);
        self.wv.visit_params_mut(f);
        self.wo.visit_params_mut(f);
        self.mlp_in.visit_params_mut(f);
        self.mlp_out.visit_params_mut(f);
        self.head.visit_params_mut(f);
        self.ln_attn.visit_params_mut(f);
        self.ln_mlp.visit_params_mut(f);
        self.ln_head.visit_params_mut(f);
    }
}

/// Normalized (y, x) coordinates in [-1, 1], two channels.
fn positional_encoding<E: Element>(b: usize, h: usize, w: usize) -> TResult<Tensor<E>> {
    Tensor::from_fn(&[b, h, w, 2], |i| {
        let cell = i / 2;
        let axis = i % 2;
        let x = cell % w;
        let y = (cell / w) % h;
        let norm = |v: usize, n: usize| {
            if n <= 1 {
                0.0
            } else {
                2.0 * v as f64 / (n - 1) as f64 - 1.0
            }
        };
        E::from_f64(if axis == 0 { norm(y, h) } else { norm(x, w) })
    })
}

struct NafcaBlock<E: Element> {
    ln: LayerNorm<E>,
    expand: Conv2dLayer<E>,
    gate_conv: Option<Conv2dLayer<E>>,
    project: Conv2dLayer<E>,
}

impl<E: Element> NafcaBlock<E> {
    fn new(
        name: &str,
        channels: usize,
        width: usize,
        gated: bool,
        rng: &mut ChaCha8Rng,
    ) -> TResult<Self> {
        let mid = (channels * width) / 2;
        Ok(NafcaBlock {
            ln: LayerNorm::new(&format!("{name}.ln"), channels)?,
            expand: Conv2dLayer::new(
                &format!("{name}.expand"),
                1,
                channels,
                channels * width,
                1,
                PaddingMode::Zero,
                true,
                rng,
            )?,
            gate_conv: if gated {
                // single-filter 3x3 convolution over the Moore neighborhood
                Some(Conv2dLayer::new(
                    &format!("{name}.gate"),
                    3,
                    mid,
                    1,
                    1,
                    PaddingMode::Zero,
                    true,
                    rng,
                )?)
            } else {
                None
            },
            project: Conv2dLayer::new(
                &format!("{name}.project"),
                1,
                mid,
                channels,
                1,
                PaddingMode::Zero,
                true,
                rng,
            )?,
        })
    }

    /// layer norm -> 1x1 conv -> SimpleGate [-> x o C(x)] -> 1x1 conv ->
    /// dropout -> residual.
    fn forward(
        &self,
        tape: &mut Tape<E>,
        x: &Var<E>,
        mode: Mode,
        rng: &mut ChaCha8Rng,
    ) -> TResult<Var<E>> {
        let t = self.ln.forward(tape, x)?;
        let t = self.expand.forward(tape, &t)?;
        let (a, b) = tape.split_half(&t)?;
        let mut t = tape.hadamard(&a, &b)?;
        if let Some(gate) = &self.gate_conv {
            let map = gate.forward(tape, &t)?;
            t = tape.mul_cell_map(&t, &map)?;
        }
        let mut t = self.project.forward(tape, &t)?;
        if mode == Mode::Train {
            let mask = dropout_mask(t.shape(), NAFCA_KEEP_PROB, rng)?;
            t = tape.dropout(&t, &mask)?;
        }
        tape.add(x, &t)
    }
}

impl<E: Element> Module<E> for NafcaBlock<E> {
    fn visit_params(&self, f: &mut dyn FnMut(&Param<E>)) {
        self.ln.visit_params(f);
        self.expand.visit_params(f);
        if let Some(g) = &self.gate_conv {
            g.visit_params(f);
        }
        self.project.visit_params(f);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<E>)) {
        self.ln.visit_params_mut(f);
        self.expand.visit_params_mut(f);
        if let Some(g) = &mut self.gate_conv {
            g.visit_params_mut(f);
        }
        self.project.visit_params_mut(f);
    }
}

struct NafcaNet<E: Element> {
    perception: NafcaBlock<E>,
    update: NafcaBlock<E>,
    head_ln: LayerNorm<E>,
    head: Conv2dLayer<E>,
}

impl<E: Element> NafcaNet<E> {
    fn new(state_channels: usize, cfg: &TransitionConfig, rng: &mut ChaCha8Rng) -> TResult<Self> {
        Ok(NafcaNet {
            perception: NafcaBlock::new("nca.nafca.perception", state_channels, cfg.perception_width, true, rng)?,
            update: NafcaBlock::new("nca.nafca.update", state_channels, cfg.update_width, false, rng)?,
            head_ln: LayerNorm::new("nca.nafca.head_ln", state_channels)?,
            head: Conv2dLayer::new_zeroed(
                "nca.nafca.head",
                1,
                state_channels,
                state_channels,
                1,
                PaddingMode::Zero,
                true,
            )?,
        })
    }

    fn delta(
        &self,
        tape: &mut Tape<E>,
        cells: &Var<E>,
        mode: Mode,
        rng: &mut ChaCha8Rng,
    ) -> TResult<Var<E>> {
        let x = self.perception.forward(tape, cells, mode, rng)?;
        let x = self.update.forward(tape, &x, mode, rng)?;
        let x = self.head_ln.forward(tape, &x)?;
        self.head.forward(tape, &x)
    }
}

impl<E: Element> Module<E> for NafcaNet<E> {
    fn visit_params(&self, f: &mut dyn FnMut(&Param<E>)) {
        self.perception.visit_params(f);
        self.update.visit_params(f);
        self.head_ln.visit_params(f);
        self.head.visit_params(f);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<E>)) {
        self.perception.visit_params_mut(f);
        self.update.visit_params_mut(f);
        self.head_ln.visit_params_mut(f);
        self.head.visit_params_mut(f);
    }
}

enum TransitionNet<E: Element> {
    Vitca(VitcaNet<E>),
    Nafca(NafcaNet<E>),
}

/// The trainable transition function plus the state/update bookkeeping.
pub struct NcaModel<E: Element> {
    pub config: TransitionConfig,
    pub visible_channels: usize,
    net: TransitionNet<E>,
}

impl<E: Element> NcaModel<E> {
    pub fn new(visible_channels: usize, config: TransitionConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let state_channels = visible_channels + config.hidden_channels;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = match config.kind {
            TransitionKind::Vitca => {
                TransitionNet::Vitca(VitcaNet::new(state_channels, &config, &mut rng)?)
            }
            TransitionKind::Nafca => {
                TransitionNet::Nafca(NafcaNet::new(state_channels, &config, &mut rng)?)
            }
        };
        Ok(NcaModel { config, visible_channels, net })
    }

    pub fn state_channels(&self) -> usize {
        self.visible_channels + self.config.hidden_channels
    }

    /// Fresh state: visible channels copy the latent, hidden channels zero.
    pub fn seed_state(&self, latent: &Tensor<E>) -> Result<CaState<E>> {
        let (b, h, w, c) = latent.dims4();
        if c != self.visible_channels {
            return Err(Error::InvalidInput(format!(
                "latent has {} channels, transition expects {}",
                c, self.visible_channels
            )));
        }
        let hidden = self.config.hidden_channels;
        let mut tape = Tape::<E>::eval();
        let l = tape.constant(latent);
        let z = tape.constant(&Tensor::zeros(&[b, h, w, hidden])?);
        let cells = tape.concat_last(&[&l, &z])?.value().clone();
        Ok(CaState { cells, visible_channels: self.visible_channels, step: 0 })
    }

    /// One transition with an explicit update mask (tests force all-zero
    /// masks through this entry point).
    pub fn step_with_mask(
        &self,
        tape: &mut Tape<E>,
        cells: &Var<E>,
        mask: &Tensor<E>,
        mode: Mode,
        dropout_rng: &mut ChaCha8Rng,
    ) -> TResult<Var<E>> {
        let delta = match &self.net {
            TransitionNet::Vitca(net) => net.delta(tape, cells)?,
            TransitionNet::Nafca(net) => net.delta(tape, cells, mode, dropout_rng)?,
        };
        tape.masked_residual(cells, &delta, mask)
    }

    /// One asynchronous transition: Bernoulli(update_probability) cell mask,
    /// randomness derived from (seed, step_index).
    pub fn step_var(
        &self,
        tape: &mut Tape<E>,
        cells: &Var<E>,
        step_index: u64,
        seed: u64,
        mode: Mode,
    ) -> TResult<Var<E>> {
        let mut rng = step_rng(seed, step_index);
        let (b, h, w, _) = cells.value().dims4();
        let mask = bernoulli_cell_mask(b, h, w, self.config.update_probability, &mut rng)?;
        self.step_with_mask(tape, cells, &mask, mode, &mut rng)
    }

    /// Applies `steps` transitions on the tape, returning the final cell
    /// var (gradients flow through the whole unrolled sequence) and the
    /// resulting state snapshot.
    pub fn rollout_var(
        &self,
        tape: &mut Tape<E>,
        state: &CaState<E>,
        steps: usize,
        mode: Mode,
        seed: u64,
    ) -> Result<(Var<E>, CaState<E>)> {
        if steps < 1 {
            return Err(Error::InvalidInput("rollout needs steps >= 1".into()));
        }
        let mut cells = tape.constant(&state.cells);
        for i in 0..steps {
            cells = self.step_var(tape, &cells, state.step + i as u64, seed, mode)?;
        }
        let out = CaState {
            cells: cells.value().clone(),
            visible_channels: state.visible_channels,
            step: state.step + steps as u64,
        };
        Ok((cells, out))
    }

    /// Untraced rollout.
    pub fn rollout(&self, state: &CaState<E>, steps: usize, mode: Mode, seed: u64) -> Result<CaState<E>> {
        let mut tape = Tape::eval();
        let (_, out) = self.rollout_var(&mut tape, state, steps, mode, seed)?;
        Ok(out)
    }

    /// Training-mode step count, sampled uniformly from 8..=32.
    pub fn sample_train_steps(rng: &mut ChaCha8Rng) -> usize {
        rng.random_range(TRAIN_STEPS_MIN..=TRAIN_STEPS_MAX)
    }
}

pub const TRAIN_STEPS_MIN: usize = 8;
pub const TRAIN_STEPS_MAX: usize = 32;
/// Fixed iteration count for validation and testing.
pub const EVAL_STEPS: usize = 64;

impl<E: Element> Module<E> for NcaModel<E> {
    fn visit_params(&self, f: &mut dyn FnMut(&Param<E>)) {
        match &self.net {
            TransitionNet::Vitca(n) => n.visit_params(f),
            TransitionNet::Nafca(n) => n.visit_params(f),
        }
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<E>)) {
        match &mut self.net {
            TransitionNet::Vitca(n) => n.visit_params_mut(f),
            TransitionNet::Nafca(n) => n.visit_params_mut(f),
        }
    }
}

/// Per-step RNG stream: depends only on (seed, absolute step index), so
/// rollouts compose exactly across splits.
fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut z = seed ^ step.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    ChaCha8Rng::seed_from_u64(z ^ (z >> 31))
}

/// Analytic parameter count for a transition configuration (golden-value
/// regression target).
pub fn transition_parameter_count(visible_channels: usize, cfg: &TransitionConfig) -> usize {
    let s = visible_channels + cfg.hidden_channels;
    match cfg.kind {
        TransitionKind::Vitca => {
            let e = cfg.embed_dim;
            let input = s + if cfg.use_positional_encoding { 2 } else { 0 };
            let mut n = input * e + e; // embed
            n += 4 * e * e; // q,k,v,o
            n += e * cfg.mlp_hidden + cfg.mlp_hidden + cfg.mlp_hidden * e + e; // mlp
            n += e * s + s; // head
            n += 3 * 2 * e; // layer norms
            n
        }
        TransitionKind::Nafca => {
            let block = |width: usize, gated: bool| {
                let mid = s * width / 2;
                let mut n = 2 * s; // ln
                n += s * (s * width) + s * width; // expand 1x1
                if gated {
                    n += 9 * mid + 1; // single-filter 3x3
                }
                n += mid * s + s; // project 1x1
                n
            };
            block(cfg.perception_width, true) + block(cfg.update_width, false) + 2 * s + s * s + s
        }
    }
}

// ── Replay pool ─────────────────────────────────────────────────────

/// Identifies the ground-truth target a pooled state restores toward
/// (index into the training set).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TargetId(pub usize);

/// One pooled trajectory: the CA state, its ground-truth target, and the
/// encoder skip of the corrupted input it was seeded from (needed to decode
/// the state later; curriculum changes would otherwise make the skip
/// unrecoverable).
#[derive(Clone)]
pub struct PoolEntry<E: Element> {
    pub state: CaState<E>,
    pub target: TargetId,
    pub skip: Tensor<E>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolPhase {
    Odd,
    Even,
}

/// Fixed-capacity buffer of CA trajectories for pool sampling. Eviction is
/// seeded-random replacement.
pub struct ReplayPool<E: Element> {
    capacity: usize,
    slots: Vec<PoolEntry<E>>,
}

impl<E: Element> ReplayPool<E> {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "pool capacity must be positive");
        ReplayPool { capacity, slots: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn entry(&self, slot: usize) -> &PoolEntry<E> {
        &self.slots[slot]
    }

    /// Inserts fresh entries, evicting random slots once at capacity.
    pub fn store_fresh(&mut self, entries: Vec<PoolEntry<E>>, rng: &mut ChaCha8Rng) {
        for e in entries {
            if self.slots.len() < self.capacity {
                self.slots.push(e);
            } else {
                let idx = rng.random_range(0..self.slots.len());
                self.slots[idx] = e;
            }
        }
    }

    /// Writes an updated entry back into the slot it was sampled from.
    pub fn store_back(&mut self, slot: usize, entry: PoolEntry<E>) {
        self.slots[slot] = entry;
    }

    /// Samples up to `batch` distinct slots; errors when empty.
    pub fn sample(&self, batch: usize, rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
        if self.slots.is_empty() {
            return Err(Error::InvalidInput("sampling from an empty replay pool".into()));
        }
        let take = batch.min(self.slots.len());
        let mut indices: Vec<usize> = (0..self.slots.len()).collect();
        // partial Fisher-Yates
        for i in 0..take {
            let j = rng.random_range(i..indices.len());
            indices.swap(i, j);
        }
        indices.truncate(take);
        Ok(indices)
    }
}

/// Pool-sampling phase selection: odd phases process the fresh batch,
/// even phases retrieve pooled trajectories (slot indices returned so the
/// caller can re-store its updates).
pub fn pool_sample<E: Element>(
    pool: &ReplayPool<E>,
    fresh: Vec<PoolEntry<E>>,
    phase: PoolPhase,
    rng_seed: u64,
) -> Result<(Vec<PoolEntry<E>>, Option<Vec<usize>>)> {
    match phase {
        PoolPhase::Odd => Ok((fresh, None)),
        PoolPhase::Even => {
            let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
            let slots = pool.sample(fresh.len().max(1), &mut rng)?;
            let entries = slots.iter().map(|&s| pool.entry(s).clone()).collect();
            Ok((entries, Some(slots)))
        }
    }
}

//! Test-time training: the mini-batch inner loop, the naive and end-to-end
//! losses, and batch-triggered updates while decoding.

use std::str::FromStr;

use serde::Serialize;

use crate::autodiff::{FlopCounter, Tape, Tensor, Var};
use crate::config::KvMap;
use crate::error::{Error, Result};
use crate::model::{token_losses, Attention, CacheSnapshot, Model, ParamSet, Variant};

/// Inner-loop hyper-parameters.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TttConfig {
    /// Inner learning rate.
    pub eta: f64,
    /// Tokens per inner step.
    pub batch_b: usize,
    /// Stop inner gradients below the lowest fast block. Fast weights only
    /// ever sit in trailing blocks, so nothing below them is differentiated
    /// either way; the flag is kept for configuration compatibility.
    pub truncate_below_fast: bool,
    /// Start every sequence from the trained initialization.
    pub reset_per_sequence: bool,
}

impl Default for TttConfig {
    fn default() -> Self {
        Self {
            eta: 0.1,
            batch_b: 16,
            truncate_below_fast: true,
            reset_per_sequence: true,
        }
    }
}

impl TttConfig {
    pub fn validate(&self, model: &Model) -> Result<()> {
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(Error::Config(format!(
                "eta must be finite and non-negative, got {}",
                self.eta
            )));
        }
        if self.batch_b == 0 {
            return Err(Error::Config("batch_b must be at least 1".into()));
        }
        if let Attention::Sliding(k) = model.spec().attention {
            if model.spec().ttt_variant.updates_at_test_time() && k < self.batch_b {
                return Err(Error::Config(format!(
                    "window_k {k} must be at least batch_b {}",
                    self.batch_b
                )));
            }
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::new();
        kv.set("eta", self.eta);
        kv.set("batch_b", self.batch_b);
        kv.set("truncate_below_fast", self.truncate_below_fast);
        kv.set("reset_per_sequence", self.reset_per_sequence);
        kv
    }

    pub fn from_kv(kv: &KvMap, base: &TttConfig) -> Result<Self> {
        kv.reject_unknown(&[
            "eta",
            "batch_b",
            "truncate_below_fast",
            "reset_per_sequence",
        ])?;
        let mut c = base.clone();
        kv.read_into("eta", &mut c.eta)?;
        kv.read_into("batch_b", &mut c.batch_b)?;
        kv.read_into("truncate_below_fast", &mut c.truncate_below_fast)?;
        kv.read_into("reset_per_sequence", &mut c.reset_per_sequence)?;
        Ok(c)
    }
}

/// Training objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Objective {
    /// Mean next-token loss of the static initialization.
    Naive,
    /// Mean next-token loss along the inner-loop trajectory.
    E2e,
}

impl Objective {
    pub fn for_variant(v: Variant) -> Self {
        if v.trains_end_to_end() {
            Objective::E2e
        } else {
            Objective::Naive
        }
    }
}

impl FromStr for Objective {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "naive" => Ok(Objective::Naive),
            "e2e" => Ok(Objective::E2e),
            _ => Err(Error::Config(format!("unknown objective {s:?}"))),
        }
    }
}

impl std::fmt::Display for Objective {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Objective::Naive => "naive",
            Objective::E2e => "e2e",
        })
    }
}

/// Fast-weight snapshots and per-token losses of one pass over a sequence.
#[derive(Clone, Debug, Default)]
pub struct Trajectory {
    /// `states[i]` holds the fast parameters after `i` inner steps, in the
    /// order of [`ParamSet::fast_indices`].
    pub states: Vec<Vec<Tensor>>,
    /// `per_token_losses[t - 1]` is the loss of predicting token `t`.
    pub per_token_losses: Vec<f64>,
}

/// One plain gradient-descent step `W − η · g`.
pub fn inner_step(fast: &[Tensor], grads: &[Tensor], eta: f64) -> Result<Vec<Tensor>> {
    if fast.len() != grads.len() {
        return Err(Error::Shape(format!(
            "{} fast tensors, {} gradients",
            fast.len(),
            grads.len()
        )));
    }
    fast.iter()
        .zip(grads)
        .map(|(w, g)| {
            if w.shape() != g.shape() {
                return Err(Error::Shape(format!(
                    "fast {:?} vs gradient {:?}",
                    w.shape(),
                    g.shape()
                )));
            }
            let data = w
                .data()
                .iter()
                .zip(g.data())
                .map(|(a, b)| a + -eta * b)
                .collect();
            Tensor::new(w.shape(), data)
        })
        .collect()
}

/// Per-token key-value binding step for a batch of `n` tokens.
fn kvb_rate(model: &Model, eta: f64, n: usize) -> f64 {
    if model.spec().ttt_variant.is_kvb() {
        eta / n as f64
    } else {
        0.0
    }
}

/// Result of building the unrolled loss on a tape.
pub struct Unrolled<'t> {
    /// `(1/T) Σ_t ℓ_t`.
    pub loss: Var<'t>,
    /// Per-token losses `[T]`.
    pub token_losses: Var<'t>,
    /// Fast weights after each inner step, starting with the initial ones.
    pub states: Vec<Vec<Var<'t>>>,
}

/// Builds the mean next-token loss over `tokens[1..]` on `tape`.
///
/// The inputs are processed in batches of `cfg.batch_b`. With `updates`,
/// every token of batch `i` is predicted with the fast weights after `i − 1`
/// inner steps, and each inner step is recorded symbolically so the result
/// can be differentiated through the whole trajectory. Without `updates`,
/// the result is the static loss of the initialization. With
/// `checkpoint`, the activations of each inner step are dropped and replayed
/// during the backward sweep.
pub fn unrolled_loss<'t>(
    model: &Model,
    tape: &'t Tape,
    params: &ParamSet,
    vars: &[Var<'t>],
    tokens: &[u32],
    cfg: &TttConfig,
    updates: bool,
    checkpoint: bool,
) -> Result<Unrolled<'t>> {
    if tokens.len() < 2 {
        return Err(Error::Shape(format!(
            "need at least two tokens, got {}",
            tokens.len()
        )));
    }
    let t_len = tokens.len() - 1;
    let inputs = &tokens[..t_len];
    let targets = &tokens[1..];
    let fast = params.fast_indices();
    let variant = model.spec().ttt_variant;
    // Batching only changes how the static loss is evaluated, not its value.
    let b = cfg.batch_b.max(1);
    let eta = if updates { cfg.eta } else { 0.0 };
    let mut cur: Vec<Var<'t>> = vars.to_vec();
    let mut state = model.empty_state();
    let mut losses = Vec::new();
    let mut states = vec![fast.iter().map(|&i| cur[i]).collect::<Vec<_>>()];
    let n_batches = t_len.div_ceil(b);
    for (i, start) in (0..t_len).step_by(b).enumerate() {
        let end = (start + b).min(t_len);
        let mark = tape.mark();
        let out = model.forward_chunk(
            tape,
            &cur,
            &inputs[start..end],
            &mut state,
            kvb_rate(model, eta, end - start),
        )?;
        let l = token_losses(out.logits, &targets[start..end])?;
        losses.push(l);
        let last = i + 1 == n_batches;
        if updates && !last {
            if variant.is_kvb() {
                for (idx, w) in out.fast_updates {
                    cur[idx] = w;
                }
            } else {
                let mean = l.sum()?.scale(1.0 / (end - start) as f64)?;
                let wrt: Vec<Var<'t>> = fast.iter().map(|&f| cur[f]).collect();
                let g = tape.grad(mean, &wrt)?;
                for (&f, gi) in fast.iter().zip(&g.grads) {
                    cur[f] = cur[f].axpy(-eta, *gi)?;
                }
            }
            states.push(fast.iter().map(|&f| cur[f]).collect());
        }
        if checkpoint {
            let mut keep: Vec<usize> = fast.iter().map(|&f| cur[f].id()).collect();
            keep.push(l.id());
            keep.extend(state.live_ids());
            tape.checkpoint_segment(mark..tape.mark(), &keep)?;
        }
    }
    let all = tape.concat_rows(&losses)?;
    let loss = all.sum()?.scale(1.0 / t_len as f64)?;
    Ok(Unrolled {
        loss,
        token_losses: all,
        states,
    })
}

/// `(1/T) Σ_t ℓ_t(W₀)`.
pub fn loss_naive(model: &Model, params: &ParamSet, tokens: &[u32]) -> Result<f64> {
    model.check_params(params)?;
    let tape = Tape::new();
    let vars = params.bind(&tape, |_, _| false);
    Ok(unrolled_loss(
        model,
        &tape,
        params,
        &vars,
        tokens,
        &TttConfig::default(),
        false,
        false,
    )?
    .loss
    .item())
}

/// `(1/T) Σ_i Σ_{t ∈ batch i} ℓ_t(W_{i−1})`.
pub fn loss_e2e(model: &Model, params: &ParamSet, tokens: &[u32], cfg: &TttConfig) -> Result<f64> {
    model.check_params(params)?;
    cfg.validate(model)?;
    let tape = Tape::new();
    let vars = params.bind(&tape, |_, fast| fast);
    Ok(
        unrolled_loss(model, &tape, params, &vars, tokens, cfg, true, false)?
            .loss
            .item(),
    )
}

/// Loss and gradients with respect to every parameter.
pub struct LossGrad {
    pub loss: f64,
    pub grads: Vec<Tensor>,
    pub flops: FlopCounter,
    pub peak_floats: usize,
}

/// Value and full gradient of the chosen objective on one sequence.
pub fn loss_and_grad(
    model: &Model,
    params: &ParamSet,
    tokens: &[u32],
    cfg: &TttConfig,
    objective: Objective,
    checkpoint: bool,
) -> Result<LossGrad> {
    let tape = Tape::new();
    let vars = params.bind(&tape, |_, _| true);
    let updates = objective == Objective::E2e;
    let u = unrolled_loss(
        model, &tape, params, &vars, tokens, cfg, updates, checkpoint,
    )?;
    let g = tape.backward(u.loss, &vars)?;
    Ok(LossGrad {
        loss: u.loss.item(),
        grads: g.grads,
        flops: tape.flops(),
        peak_floats: tape.memory().peak,
    })
}

/// Streaming test-time training over one sequence.
///
/// Tokens arrive one at a time through [`TttSession::feed`]. Once a full
/// batch of `b` targets is pending, the batch is evaluated with the current
/// fast weights and one inner step is taken. Each batch runs on its own tape;
/// attention caches carry over between tapes as plain values.
pub struct TttSession<'m> {
    model: &'m Model,
    params: ParamSet,
    cfg: TttConfig,
    updates: bool,
    fast: Vec<usize>,
    start: CacheSnapshot,
    pending: Vec<u32>,
    history: Vec<u32>,
    losses: Vec<f64>,
    step_offsets: Vec<usize>,
    flops: FlopCounter,
    states: Option<Vec<Vec<Tensor>>>,
}

impl<'m> TttSession<'m> {
    pub fn new(model: &'m Model, params: &ParamSet, cfg: &TttConfig) -> Result<Self> {
        model.check_params(params)?;
        cfg.validate(model)?;
        let start = model.empty_state().snapshot();
        Ok(Self {
            model,
            params: params.clone(),
            cfg: cfg.clone(),
            updates: model.spec().ttt_variant.updates_at_test_time(),
            fast: params.fast_indices(),
            start,
            pending: Vec::new(),
            history: Vec::new(),
            losses: Vec::new(),
            step_offsets: Vec::new(),
            flops: FlopCounter::default(),
            states: None,
        })
    }

    /// Same as [`TttSession::new`] but with test-time updates forced on or off.
    pub fn with_updates(
        model: &'m Model,
        params: &ParamSet,
        cfg: &TttConfig,
        updates: bool,
    ) -> Result<Self> {
        let mut s = Self::new(model, params, cfg)?;
        s.updates = updates;
        Ok(s)
    }

    /// Keeps a copy of the fast weights after every inner step.
    pub fn record_states(&mut self) {
        self.states = Some(vec![self.fast_values()]);
    }

    pub fn fast_values(&self) -> Vec<Tensor> {
        self.fast
            .iter()
            .map(|&i| self.params.tensor(i).clone())
            .collect()
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn history(&self) -> &[u32] {
        &self.history
    }

    /// Losses of every target consumed by a completed batch.
    pub fn losses(&self) -> &[f64] {
        &self.losses
    }

    pub fn steps(&self) -> usize {
        self.step_offsets.len()
    }

    /// Number of fed tokens at which each inner step fired.
    pub fn step_offsets(&self) -> &[usize] {
        &self.step_offsets
    }

    pub fn flops(&self) -> &FlopCounter {
        &self.flops
    }

    pub fn states(&self) -> Option<&[Vec<Tensor>]> {
        self.states.as_deref()
    }

    fn eta(&self) -> f64 {
        if self.updates {
            self.cfg.eta
        } else {
            0.0
        }
    }

    pub fn feed(&mut self, token: u32) -> Result<()> {
        self.history.push(token);
        self.pending.push(token);
        if self.pending.len() == self.cfg.batch_b + 1 {
            self.step_batch()?;
        }
        Ok(())
    }

    pub fn feed_all(&mut self, tokens: &[u32]) -> Result<()> {
        for &t in tokens {
            self.feed(t)?;
        }
        Ok(())
    }

    fn step_batch(&mut self) -> Result<()> {
        let b = self.cfg.batch_b;
        let inputs = self.pending[..b].to_vec();
        let targets = self.pending[1..=b].to_vec();
        let kvb = self.model.spec().ttt_variant.is_kvb();
        let eta = self.eta();
        let tape = Tape::new();
        let grad_fast = self.updates && !kvb;
        let vars = self.params.bind(&tape, |_, fast| grad_fast && fast);
        let mut state = self.start.restore(&tape);
        let out = self.model.forward_chunk(
            &tape,
            &vars,
            &inputs,
            &mut state,
            kvb_rate(self.model, eta, b),
        )?;
        let l = token_losses(out.logits, &targets)?;
        self.losses.extend_from_slice(l.value().data());
        if self.updates {
            if kvb {
                for (idx, w) in &out.fast_updates {
                    self.params.set(*idx, w.value())?;
                }
            } else {
                let mean = l.sum()?.scale(1.0 / b as f64)?;
                let wrt: Vec<Var> = self.fast.iter().map(|&f| vars[f]).collect();
                let g = tape.backward(mean, &wrt)?;
                let new = inner_step(&self.fast_values(), &g.grads, eta)?;
                for (&f, w) in self.fast.iter().zip(new) {
                    self.params.set(f, w)?;
                }
            }
            self.step_offsets.push(self.history.len());
            if let Some(s) = &mut self.states {
                s.push(
                    self.fast
                        .iter()
                        .map(|&i| self.params.tensor(i).clone())
                        .collect(),
                );
            }
        }
        self.start = state.snapshot();
        self.flops.merge(&tape.flops());
        self.pending.drain(..b);
        Ok(())
    }

    /// Runs the pending inputs from the batch-start cache.
    fn run_pending(&mut self, targets: bool) -> Result<(Tensor, Option<Tensor>)> {
        if self.pending.is_empty() {
            return Err(Error::Shape("no input token fed yet".into()));
        }
        let tape = Tape::new();
        let vars = self.params.bind(&tape, |_, _| false);
        let mut state = self.start.restore(&tape);
        // A batch cut short by the end of the sequence is averaged over the
        // targets it actually holds.
        let n = if targets {
            self.pending.len() - 1
        } else {
            self.cfg.batch_b
        };
        let rate = kvb_rate(self.model, self.eta(), n.max(1));
        let out = self
            .model
            .forward_chunk(&tape, &vars, &self.pending, &mut state, rate)?;
        let losses = if targets && self.pending.len() > 1 {
            let n = self.pending.len() - 1;
            Some(token_losses(out.logits.slice_rows(0, n)?, &self.pending[1..])?.value())
        } else {
            None
        };
        self.flops.merge(&tape.flops());
        Ok((out.logits.value(), losses))
    }

    /// Logits `[vocab]` for the token after the last fed one.
    pub fn next_logits(&mut self) -> Result<Tensor> {
        let (logits, _) = self.run_pending(false)?;
        let v = logits.shape()[1];
        let n = logits.shape()[0];
        Ok(Tensor::from_vec(logits.data()[(n - 1) * v..].to_vec()))
    }

    /// Losses of targets waiting in an incomplete batch, predicted with the
    /// current fast weights.
    pub fn pending_losses(&mut self) -> Result<Vec<f64>> {
        if self.pending.len() < 2 {
            return Ok(Vec::new());
        }
        let (_, l) = self.run_pending(true)?;
        Ok(l.map(|t| t.data().to_vec()).unwrap_or_default())
    }

    /// All per-token losses of the sequence so far, the incomplete batch
    /// included.
    pub fn all_losses(&mut self) -> Result<Vec<f64>> {
        let mut out = self.losses.clone();
        out.extend(self.pending_losses()?);
        Ok(out)
    }
}

/// Processes `tokens` with test-time training and returns the trajectory
/// and the logits for the token after the last one.
pub fn prefill_with_ttt(
    model: &Model,
    params: &ParamSet,
    tokens: &[u32],
    cfg: &TttConfig,
) -> Result<(Trajectory, Tensor)> {
    if tokens.is_empty() {
        return Err(Error::Shape("empty sequence".into()));
    }
    let mut s = TttSession::new(model, params, cfg)?;
    s.record_states();
    s.feed_all(tokens)?;
    let logits = s.next_logits()?;
    let per_token_losses = s.all_losses()?;
    let states = s.states().map(|x| x.to_vec()).unwrap_or_default();
    Ok((
        Trajectory {
            states,
            per_token_losses,
        },
        logits,
    ))
}

/// Generates `n_new` tokens, stepping the fast weights whenever a batch of
/// `b` pending targets fills up.
pub fn decode_with_ttt(
    session: &mut TttSession<'_>,
    n_new: usize,
    mut sampler: impl FnMut(&Tensor, &[u32]) -> Result<u32>,
) -> Result<Vec<u32>> {
    let mut out = Vec::with_capacity(n_new);
    for _ in 0..n_new {
        let logits = session.next_logits()?;
        let tok = sampler(&logits, session.history())?;
        session.feed(tok)?;
        out.push(tok);
    }
    Ok(out)
}

//! Per-token loss breakdowns, sampling, needle retrieval scoring and FLOP
//! benchmarks.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::autodiff::{FlopCounter, Tensor};
use crate::data::{NiahInstance, NiahKind, PackedSequence, BOS};
use crate::error::{Error, Result};
use crate::model::{Model, ParamSet};
use crate::ttt::{decode_with_ttt, TttConfig, TttSession};

/// Loss statistics over a set of equal-length sequences.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct EvalReport {
    /// Mean loss of predicting token `t + 1`, over sequences.
    pub per_index_loss: Vec<f64>,
    /// Mean over every token of every sequence.
    pub aggregate: f64,
    /// Mean prefill FLOPs per sequence, inner steps included.
    pub flops_prefill: f64,
    /// FLOPs per generated token, amortized over one inner batch.
    pub flops_per_decoded_token: f64,
    pub niah_accuracy: BTreeMap<NiahKind, f64>,
    pub n_sequences: usize,
    /// Fingerprint of the evaluated token data.
    pub data_hash: u64,
}

fn hash_sequences(seqs: &[PackedSequence]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for s in seqs {
        for &t in &s.tokens {
            for b in t.to_le_bytes() {
                h = (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3);
            }
        }
    }
    h
}

/// Per-token losses of one sequence under test-time training from the
/// given initialization, plus the session's FLOPs. Every loss is computed
/// with fast weights that have not yet seen its target.
pub fn sequence_losses(
    model: &Model,
    params: &ParamSet,
    cfg: &TttConfig,
    tokens: &[u32],
) -> Result<(Vec<f64>, FlopCounter)> {
    let mut s = TttSession::new(model, params, cfg)?;
    s.feed_all(tokens)?;
    let losses = s.all_losses()?;
    Ok((losses, s.flops().clone()))
}

/// Runs every sequence through its own session and averages by position.
///
/// With `cfg.reset_per_sequence` off, fast weights carry over from one
/// sequence to the next in order, so evaluation is sequential.
pub fn loss_breakdown(
    model: &Model,
    params: &ParamSet,
    cfg: &TttConfig,
    seqs: &[PackedSequence],
) -> Result<EvalReport> {
    let first = seqs
        .first()
        .ok_or_else(|| Error::Data("no evaluation sequences".into()))?;
    let len = first.tokens.len();
    if len < 2 {
        return Err(Error::Data(
            "evaluation sequences need at least two tokens".into(),
        ));
    }
    if let Some(bad) = seqs.iter().find(|s| s.tokens.len() != len) {
        return Err(Error::Data(format!(
            "ragged evaluation set: lengths {len} and {}",
            bad.tokens.len()
        )));
    }
    let runs: Vec<(Vec<f64>, FlopCounter)> = if cfg.reset_per_sequence {
        seqs.par_iter()
            .map(|s| sequence_losses(model, params, cfg, &s.tokens))
            .collect::<Result<_>>()?
    } else {
        let mut p = params.clone();
        let mut out = Vec::with_capacity(seqs.len());
        for s in seqs {
            let mut sess = TttSession::new(model, &p, cfg)?;
            sess.feed_all(&s.tokens)?;
            out.push((sess.all_losses()?, sess.flops().clone()));
            p = sess.params().clone();
        }
        out
    };
    let n = runs.len() as f64;
    let mut per_index = vec![0.0; len - 1];
    let mut flops = 0.0;
    for (losses, f) in &runs {
        for (acc, l) in per_index.iter_mut().zip(losses) {
            *acc += l;
        }
        flops += f.total() as f64;
    }
    per_index.iter_mut().for_each(|x| *x /= n);
    let aggregate = per_index.iter().sum::<f64>() / per_index.len() as f64;
    let decode = decode_flops_per_token(model, params, cfg, &first.tokens)?;
    Ok(EvalReport {
        per_index_loss: per_index,
        aggregate,
        flops_prefill: flops / n,
        flops_per_decoded_token: decode,
        niah_accuracy: BTreeMap::new(),
        n_sequences: seqs.len(),
        data_hash: hash_sequences(seqs),
    })
}

/// Difference of aggregate losses, `method − reference`.
pub fn loss_delta(method: &EvalReport, reference: &EvalReport) -> Result<f64> {
    check_matched(method, reference)?;
    Ok(method.aggregate - reference.aggregate)
}

/// Position-wise difference of per-index losses.
pub fn per_index_delta(method: &EvalReport, reference: &EvalReport) -> Result<Vec<f64>> {
    check_matched(method, reference)?;
    Ok(method
        .per_index_loss
        .iter()
        .zip(&reference.per_index_loss)
        .map(|(a, b)| a - b)
        .collect())
}

fn check_matched(a: &EvalReport, b: &EvalReport) -> Result<()> {
    if a.data_hash != b.data_hash
        || a.n_sequences != b.n_sequences
        || a.per_index_loss.len() != b.per_index_loss.len()
    {
        return Err(Error::Data(
            "reports were computed on different evaluation sets".into(),
        ));
    }
    Ok(())
}

/// Mean and sample standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Least-squares slope of `ys` against `ln(xs)`.
pub fn log_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    slope(&lx, ys)
}

/// Least-squares slope of `ys` against `xs`.
pub fn slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let cov: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let var: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    cov / var
}

/// Writes `t,loss` rows with `t` starting at 1.
pub fn write_per_index_csv(path: &Path, report: &EvalReport) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["t", "loss"])?;
    for (i, l) in report.per_index_loss.iter().enumerate() {
        w.write_record([(i + 1).to_string(), l.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `sequence_id,t,loss` rows.
pub fn write_trajectory_csv(path: &Path, losses: &[Vec<f64>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["sequence_id", "t", "loss"])?;
    for (s, row) in losses.iter().enumerate() {
        for (i, l) in row.iter().enumerate() {
            w.write_record([s.to_string(), (i + 1).to_string(), l.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

// ---- sampling -----------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SamplerConfig {
    pub temperature: f64,
    pub top_p: f64,
    pub repetition_penalty: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            top_p: 0.95,
            repetition_penalty: 1.1,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::Config(format!(
                "top_p must lie in (0, 1], got {}",
                self.top_p
            )));
        }
        if !(self.repetition_penalty >= 1.0) {
            return Err(Error::Config(format!(
                "repetition_penalty must be at least 1, got {}",
                self.repetition_penalty
            )));
        }
        Ok(())
    }
}

/// Smallest set of ids, taken in order of decreasing probability with ties
/// broken by lower id, whose mass reaches `top_p`; probabilities are
/// renormalized over the set.
pub fn nucleus(probs: &[f64], top_p: f64) -> Vec<(usize, f64)> {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    let mut kept = Vec::new();
    let mut mass = 0.0;
    for i in order {
        kept.push((i, probs[i]));
        mass += probs[i];
        if mass >= top_p {
            break;
        }
    }
    kept.into_iter().map(|(i, p)| (i, p / mass)).collect()
}

/// Token distribution after the repetition penalty and temperature.
pub fn sampling_probs(logits: &[f64], cfg: &SamplerConfig, history: &[u32]) -> Result<Vec<f64>> {
    cfg.validate()?;
    let mut l = logits.to_vec();
    if cfg.repetition_penalty != 1.0 {
        let mut seen = vec![false; l.len()];
        for &t in history {
            if let Some(s) = seen.get_mut(t as usize) {
                *s = true;
            }
        }
        for (x, s) in l.iter_mut().zip(seen) {
            if s {
                *x = if *x > 0.0 {
                    *x / cfg.repetition_penalty
                } else {
                    *x * cfg.repetition_penalty
                };
            }
        }
    }
    let max = l.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY || max.is_nan() {
        return Err(Error::NonFinite("no finite logit to sample from".into()));
    }
    let mut p: Vec<f64> = l
        .iter()
        .map(|x| ((x - max) / cfg.temperature).exp())
        .collect();
    let z: f64 = p.iter().sum();
    p.iter_mut().for_each(|x| *x /= z);
    Ok(p)
}

/// Draws the next token: repetition penalty on ids in `history`,
/// temperature, then nucleus sampling.
pub fn sample_next(
    logits: &Tensor,
    cfg: &SamplerConfig,
    history: &[u32],
    rng: &mut impl Rng,
) -> Result<u32> {
    let probs = sampling_probs(logits.data(), cfg, history)?;
    let kept = nucleus(&probs, cfg.top_p);
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for &(i, p) in &kept {
        acc += p;
        if u < acc {
            return Ok(i as u32);
        }
    }
    Ok(kept.last().map(|&(i, _)| i as u32).unwrap_or(0))
}

/// Highest logit, lowest id on ties.
pub fn greedy(logits: &Tensor) -> u32 {
    let mut best = 0;
    for (i, &x) in logits.data().iter().enumerate() {
        if x > logits.data()[best] {
            best = i;
        }
    }
    best as u32
}

// ---- needle retrieval ---------------------------------------------------

/// Accuracy per kind of `answer` against each instance's expected answer.
pub fn niah_score(
    instances: &[NiahInstance],
    answer: impl Fn(&NiahInstance) -> Result<Vec<u32>> + Sync,
) -> Result<BTreeMap<NiahKind, f64>> {
    let hits = instances
        .par_iter()
        .map(|inst| Ok((inst.kind, answer(inst)? == inst.answer_tokens())))
        .collect::<Result<Vec<_>>>()?;
    let mut tally: BTreeMap<NiahKind, (usize, usize)> = BTreeMap::new();
    for (k, hit) in hits {
        let e = tally.entry(k).or_default();
        e.0 += usize::from(hit);
        e.1 += 1;
    }
    Ok(tally
        .into_iter()
        .map(|(k, (h, n))| (k, h as f64 / n as f64))
        .collect())
}

/// Answers by string search over the haystack.
pub fn substring_oracle(inst: &NiahInstance) -> Result<Vec<u32>> {
    let key = inst.kind.key();
    let at = inst
        .haystack
        .find(key)
        .ok_or_else(|| Error::Data(format!("needle key {key:?} not found")))?;
    let rest = &inst.haystack[at + key.len()..];
    let value: String = rest
        .chars()
        .take_while(|c| c.is_ascii_alphanumeric())
        .collect();
    Ok(value.bytes().map(u32::from).collect())
}

/// Greedy-decodes as many tokens as the answer has, with test-time training
/// on the prompt and on the generated tokens.
pub fn niah_answer(
    model: &Model,
    params: &ParamSet,
    cfg: &TttConfig,
    inst: &NiahInstance,
) -> Result<Vec<u32>> {
    let mut s = TttSession::new(model, params, cfg)?;
    s.feed_all(&inst.prompt())?;
    decode_with_ttt(&mut s, inst.answer.len(), |logits, _| Ok(greedy(logits)))
}

pub fn niah_eval(
    model: &Model,
    params: &ParamSet,
    cfg: &TttConfig,
    instances: &[NiahInstance],
) -> Result<BTreeMap<NiahKind, f64>> {
    niah_score(instances, |inst| niah_answer(model, params, cfg, inst))
}

// ---- benchmarks ---------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchRow {
    pub t: usize,
    pub prefill_flops: u64,
    pub attention_flops: u64,
    pub flops_per_token: f64,
    pub decode_flops_per_token: f64,
    pub prefill_ms: f64,
}

/// Generation cost per token: `batch_b` tokens are fed after `prompt`,
/// which covers one inner step for updating models. Static models are
/// measured with unit batches, since they never step.
pub fn decode_flops_per_token(
    model: &Model,
    params: &ParamSet,
    cfg: &TttConfig,
    prompt: &[u32],
) -> Result<f64> {
    let updates = model.spec().ttt_variant.updates_at_test_time();
    let c = if updates {
        cfg.clone()
    } else {
        TttConfig {
            batch_b: 1,
            ..cfg.clone()
        }
    };
    let mut s = TttSession::new(model, params, &c)?;
    // Align the prompt to a batch boundary so the measured window holds one step.
    let usable = 1 + (prompt.len() - 1) / c.batch_b * c.batch_b;
    s.feed_all(&prompt[..usable])?;
    let before = s.flops().clone();
    let n = c.batch_b;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..n {
        s.next_logits()?;
        s.feed(rng.gen_range(0..256))?;
    }
    Ok(s.flops().since(&before).total() as f64 / n as f64)
}

/// Prefill FLOPs and wall-clock for random byte sequences of each length.
/// Prefill of length `T` runs `T` positions through the network and takes
/// every inner step they complete. Wall-clock is the median of `repeats`
/// runs.
pub fn bench(
    model: &Model,
    params: &ParamSet,
    cfg: &TttConfig,
    t_values: &[usize],
    repeats: usize,
) -> Result<Vec<BenchRow>> {
    if t_values.is_empty() {
        return Err(Error::Config("empty sequence-length grid".into()));
    }
    if t_values.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Config(format!(
            "sequence lengths must ascend: {t_values:?}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut rows = Vec::with_capacity(t_values.len());
    for &t in t_values {
        let mut tokens = vec![BOS];
        tokens.extend((0..t).map(|_| rng.gen_range(0..256u32)));
        let mut times = Vec::with_capacity(repeats.max(1));
        let mut flops = FlopCounter::default();
        for _ in 0..repeats.max(1) {
            let start = Instant::now();
            let mut s = TttSession::new(model, params, cfg)?;
            s.feed_all(&tokens)?;
            times.push(start.elapsed().as_secs_f64() * 1e3);
            flops = s.flops().clone();
        }
        times.sort_by(f64::total_cmp);
        rows.push(BenchRow {
            t,
            prefill_flops: flops.total(),
            attention_flops: flops.get("attention"),
            flops_per_token: flops.total() as f64 / t as f64,
            decode_flops_per_token: decode_flops_per_token(model, params, cfg, &tokens)?,
            prefill_ms: times[times.len() / 2],
        });
    }
    Ok(rows)
}

pub fn write_bench_csv(path: &Path, rows: &[BenchRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests;

//! Transformer family: attention-free toy, sliding-window and full attention,
//! dual MLPs, multi-head fast MLPs and key-value binding layers.

mod layers;
mod params;
mod spec;

pub use layers::{apply_rope, qk_normalize, sliding_window_mask};
pub use params::{Dtype, ParamSet};
pub use spec::{default_hidden, Attention, FastFraction, ModelSpec, Variant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Band, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::kvb::{kvb_chunk, KvbProjections};

const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug)]
struct MlpIdx {
    gate: usize,
    up: usize,
    down: usize,
}

#[derive(Clone, Copy, Debug)]
struct AttnIdx {
    norm: usize,
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
    q_gain: Option<usize>,
    k_gain: Option<usize>,
}

#[derive(Clone, Copy, Debug)]
struct MhIdx {
    w1: usize,
    w2: usize,
}

#[derive(Clone, Copy, Debug)]
struct KvbIdx {
    theta_k: usize,
    theta_v: usize,
    theta_q: usize,
}

#[derive(Clone, Debug)]
struct BlockIdx {
    attn: Option<AttnIdx>,
    mlp_norm: usize,
    mlp: MlpIdx,
    static_mlp: Option<MlpIdx>,
    mh: Option<MhIdx>,
    kvb: Option<KvbIdx>,
}

#[derive(Clone, Copy, Debug)]
enum Init {
    Ones,
    Normal(f64),
}

#[derive(Clone, Debug)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    fast: bool,
    init: Init,
}

/// Built architecture: the spec plus the resolved parameter layout.
#[derive(Clone, Debug)]
pub struct Model {
    spec: ModelSpec,
    entries: Vec<Entry>,
    embed: usize,
    final_norm: usize,
    unembed: usize,
    blocks: Vec<BlockIdx>,
    mlp_hidden: usize,
}

/// Per-block attention cache of rotated keys and values.
#[derive(Clone, Copy, Debug, Default)]
pub struct KvCache<'t> {
    pub keys: Option<Var<'t>>,
    pub values: Option<Var<'t>>,
}

impl KvCache<'_> {
    pub fn rows(&self) -> usize {
        self.keys.map(|k| k.shape()[0]).unwrap_or(0)
    }
}

/// Streaming position and caches for chunked evaluation on one tape.
#[derive(Clone, Debug)]
pub struct ChunkState<'t> {
    pub pos: usize,
    pub caches: Vec<KvCache<'t>>,
}

/// Cache contents detached from any tape, for carrying state across tapes.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CacheSnapshot {
    pub pos: usize,
    pub blocks: Vec<(Option<Tensor>, Option<Tensor>)>,
}

impl CacheSnapshot {
    pub fn restore<'t>(&self, tape: &'t Tape) -> ChunkState<'t> {
        ChunkState {
            pos: self.pos,
            caches: self
                .blocks
                .iter()
                .map(|(k, v)| KvCache {
                    keys: k.as_ref().map(|t| tape.constant(t)),
                    values: v.as_ref().map(|t| tape.constant(t)),
                })
                .collect(),
        }
    }
}

impl<'t> ChunkState<'t> {
    pub fn snapshot(&self) -> CacheSnapshot {
        CacheSnapshot {
            pos: self.pos,
            blocks: self
                .caches
                .iter()
                .map(|c| (c.keys.map(|k| k.value()), c.values.map(|v| v.value())))
                .collect(),
        }
    }

    /// Node ids a checkpoint must keep so later chunks can read the cache.
    pub fn live_ids(&self) -> Vec<usize> {
        self.caches
            .iter()
            .flat_map(|c| [c.keys, c.values])
            .flatten()
            .map(|v| v.id())
            .collect()
    }
}

/// Output of one chunk.
pub struct ChunkOutput<'t> {
    /// `[n, vocab]` next-token logits.
    pub logits: Var<'t>,
    /// New values of multi-head fast weights after a key-value binding step,
    /// as `(parameter index, value)`.
    pub fast_updates: Vec<(usize, Var<'t>)>,
}

impl Model {
    pub fn new(spec: &ModelSpec) -> Result<Self> {
        spec.validate()?;
        let d = spec.embed_dim;
        let dh = spec.head_dim();
        let v = spec.vocab_size;
        let l = spec.n_blocks;
        let variant = spec.ttt_variant;
        let n_fast = spec.n_fast_blocks();
        let base = spec.mlp_hidden_dim;
        let mh_inner = spec.mh_expansion * dh;
        let mlp_hidden = if variant.multi_head() {
            let mut extra = 2 * spec.mh_expansion * d * dh;
            if variant.is_kvb() {
                extra += 3 * d * d;
            }
            let h = (base as f64 - extra as f64 / (3 * d) as f64).round();
            if h < 1.0 {
                return Err(Error::Config(format!(
                    "mlp_hidden_dim {base} too small to absorb multi-head fast weights of {extra} per block"
                )));
            }
            h as usize
        } else if spec.dual_mlp {
            ((base * l) as f64 / (l + n_fast) as f64).round().max(1.0) as usize
        } else {
            base
        };

        let mut entries = Vec::new();
        let mut add = |name: String, shape: Vec<usize>, fast: bool, init: Init| {
            entries.push(Entry {
                name,
                shape,
                fast,
                init,
            });
            entries.len() - 1
        };
        let out_std = INIT_STD / (2.0 * l as f64).sqrt();
        let embed = add("embed".into(), vec![v, d], false, Init::Normal(INIT_STD));
        let mut blocks = Vec::with_capacity(l);
        for b in 0..l {
            let p = format!("block{b}");
            let attn = if spec.attention == Attention::None {
                None
            } else {
                Some(AttnIdx {
                    norm: add(format!("{p}.attn_norm"), vec![d], false, Init::Ones),
                    wq: add(
                        format!("{p}.attn.wq"),
                        vec![d, d],
                        false,
                        Init::Normal(INIT_STD),
                    ),
                    wk: add(
                        format!("{p}.attn.wk"),
                        vec![d, d],
                        false,
                        Init::Normal(INIT_STD),
                    ),
                    wv: add(
                        format!("{p}.attn.wv"),
                        vec![d, d],
                        false,
                        Init::Normal(INIT_STD),
                    ),
                    wo: add(
                        format!("{p}.attn.wo"),
                        vec![d, d],
                        false,
                        Init::Normal(out_std),
                    ),
                    q_gain: spec
                        .qk_norm
                        .then(|| add(format!("{p}.attn.q_norm"), vec![dh], false, Init::Ones)),
                    k_gain: spec
                        .qk_norm
                        .then(|| add(format!("{p}.attn.k_norm"), vec![dh], false, Init::Ones)),
                })
            };
            let mlp_norm = add(format!("{p}.mlp_norm"), vec![d], false, Init::Ones);
            let fast_block = !variant.multi_head() && b >= l - n_fast;
            let mut mlp = |prefix: String, fast: bool| MlpIdx {
                gate: add(
                    format!("{prefix}.w_gate"),
                    vec![d, mlp_hidden],
                    fast,
                    Init::Normal(INIT_STD),
                ),
                up: add(
                    format!("{prefix}.w_up"),
                    vec![d, mlp_hidden],
                    fast,
                    Init::Normal(INIT_STD),
                ),
                down: add(
                    format!("{prefix}.w_down"),
                    vec![mlp_hidden, d],
                    fast,
                    Init::Normal(out_std),
                ),
            };
            let main = mlp(format!("{p}.mlp"), fast_block);
            let static_mlp =
                (fast_block && spec.dual_mlp).then(|| mlp(format!("{p}.static_mlp"), false));
            let mh = variant.multi_head().then(|| MhIdx {
                w1: add(
                    format!("{p}.fast_mh.w1"),
                    vec![d, mh_inner],
                    true,
                    Init::Normal(INIT_STD),
                ),
                w2: add(
                    format!("{p}.fast_mh.w2"),
                    vec![spec.n_heads * mh_inner, dh],
                    true,
                    Init::Normal(out_std),
                ),
            });
            let kvb = variant.is_kvb().then(|| KvbIdx {
                theta_k: add(
                    format!("{p}.kvb.theta_k"),
                    vec![d, d],
                    false,
                    Init::Normal(INIT_STD),
                ),
                theta_v: add(
                    format!("{p}.kvb.theta_v"),
                    vec![d, d],
                    false,
                    Init::Normal(INIT_STD),
                ),
                theta_q: add(
                    format!("{p}.kvb.theta_q"),
                    vec![d, d],
                    false,
                    Init::Normal(INIT_STD),
                ),
            });
            blocks.push(BlockIdx {
                attn,
                mlp_norm,
                mlp: main,
                static_mlp,
                mh,
                kvb,
            });
        }
        let final_norm = add("final_norm".into(), vec![d], false, Init::Ones);
        let unembed = add("unembed".into(), vec![d, v], false, Init::Normal(INIT_STD));
        Ok(Self {
            spec: spec.clone(),
            entries,
            embed,
            final_norm,
            unembed,
            blocks,
            mlp_hidden,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    /// Hidden width of the regular MLPs after any shrink.
    pub fn mlp_hidden(&self) -> usize {
        self.mlp_hidden
    }

    /// Total scalar count of the layout.
    pub fn param_count(&self) -> usize {
        self.entries
            .iter()
            .map(|e| e.shape.iter().product::<usize>())
            .sum()
    }

    /// Scalars updated by the inner loop.
    pub fn fast_param_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.fast)
            .map(|e| e.shape.iter().product::<usize>())
            .sum()
    }

    pub fn param_names(&self) -> Vec<&str> {
        self.entries.iter().map(|e| e.name.as_str()).collect()
    }

    /// Deterministic initialization from `seed`.
    pub fn init(&self, seed: u64) -> ParamSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut set = ParamSet::new();
        for e in &self.entries {
            let n: usize = e.shape.iter().product();
            let data = match e.init {
                Init::Ones => vec![1.0; n],
                Init::Normal(std) => {
                    let dist = Normal::new(0.0, std).expect("positive std");
                    (0..n).map(|_| dist.sample(&mut rng)).collect()
                }
            };
            set.push(
                e.name.clone(),
                Tensor::new(&e.shape, data).expect("layout shape"),
                e.fast,
            )
            .expect("unique names");
        }
        set
    }

    /// Checks that `params` has exactly this model's layout.
    pub fn check_params(&self, params: &ParamSet) -> Result<()> {
        if params.len() != self.entries.len() {
            return Err(Error::Config(format!(
                "parameter set has {} entries, model expects {}",
                params.len(),
                self.entries.len()
            )));
        }
        for (i, e) in self.entries.iter().enumerate() {
            let t = params.tensor(i);
            if params.name(i) != e.name
                || t.shape() != e.shape.as_slice()
                || params.is_fast(i) != e.fast
            {
                return Err(Error::Config(format!(
                    "parameter {i}: expected {} {:?} (fast={}), found {} {:?} (fast={})",
                    e.name,
                    e.shape,
                    e.fast,
                    params.name(i),
                    t.shape(),
                    params.is_fast(i)
                )));
            }
        }
        Ok(())
    }

    pub fn empty_state<'t>(&self) -> ChunkState<'t> {
        ChunkState {
            pos: 0,
            caches: vec![KvCache::default(); self.blocks.len()],
        }
    }

    /// Runs `inputs` (token ids at positions `state.pos ..`) through the
    /// network, attending to cached keys and values from earlier chunks, and
    /// advances `state`.
    ///
    /// For key-value binding variants, `kvb_rate` is the per-token step size
    /// of the per-block reconstruction step over this chunk, that is the
    /// inner learning rate divided by the batch size; the updated fast
    /// weights are returned in [`ChunkOutput::fast_updates`].
    pub fn forward_chunk<'t>(
        &self,
        tape: &'t Tape,
        params: &[Var<'t>],
        inputs: &[u32],
        state: &mut ChunkState<'t>,
        kvb_rate: f64,
    ) -> Result<ChunkOutput<'t>> {
        if inputs.is_empty() {
            return Err(Error::Shape("empty input sequence".into()));
        }
        if params.len() != self.entries.len() {
            return Err(Error::Config(format!(
                "expected {} parameters, got {}",
                self.entries.len(),
                params.len()
            )));
        }
        let v = self.spec.vocab_size;
        if let Some(&bad) = inputs.iter().find(|&&t| t as usize >= v) {
            return Err(Error::Index(format!(
                "token {bad} outside vocabulary of {v}"
            )));
        }
        let ids: Vec<usize> = inputs.iter().map(|&t| t as usize).collect();
        let eps = self.spec.norm_eps;
        let mut x = params[self.embed].gather_rows(&ids)?;
        let mut fast_updates = Vec::new();
        for (b, blk) in self.blocks.iter().enumerate() {
            if let Some(a) = &blk.attn {
                let h = x.rms_norm(Some(params[a.norm]), eps)?;
                let o = self.attention(tape, params, a, h, state.pos, &mut state.caches[b])?;
                x = x.add(o)?;
            }
            let h = x.rms_norm(Some(params[blk.mlp_norm]), eps)?;
            let mut y = gated_mlp(params, &blk.mlp, h)?;
            if let Some(s) = &blk.static_mlp {
                y = y.add(gated_mlp(params, s, h)?)?;
            }
            if let Some(mh) = &blk.mh {
                let z = match &blk.kvb {
                    None => self.multi_head_mlp(tape, params[mh.w1], params[mh.w2], h)?,
                    Some(kv) => {
                        let (z, w1, w2) = self.kvb_layer(tape, params, mh, kv, h, kvb_rate)?;
                        fast_updates.push((mh.w1, w1));
                        fast_updates.push((mh.w2, w2));
                        z
                    }
                };
                y = y.add(z)?;
            }
            x = x.add(y)?;
        }
        state.pos += inputs.len();
        let logits = x
            .rms_norm(Some(params[self.final_norm]), eps)?
            .matmul(params[self.unembed])?;
        Ok(ChunkOutput {
            logits,
            fast_updates,
        })
    }

    fn attention<'t>(
        &self,
        tape: &'t Tape,
        params: &[Var<'t>],
        a: &AttnIdx,
        h: Var<'t>,
        pos: usize,
        cache: &mut KvCache<'t>,
    ) -> Result<Var<'t>> {
        let n = h.shape()[0];
        let dh = self.spec.head_dim();
        let heads = self.spec.n_heads;
        let theta = self.spec.rope_theta;
        let eps = self.spec.norm_eps;
        let q = h.matmul(params[a.wq])?;
        let k = h.matmul(params[a.wk])?;
        let val = h.matmul(params[a.wv])?;
        let prep = |m: Var<'t>, gain: Option<usize>| -> Result<Vec<Var<'t>>> {
            (0..heads)
                .map(|i| {
                    let mut s = m.slice_cols(i * dh, dh)?;
                    if let Some(g) = gain {
                        s = s.rms_norm(Some(params[g]), eps)?;
                    }
                    s.rope(pos, theta)
                })
                .collect()
        };
        let q_heads = prep(q, a.q_gain)?;
        let k_rot = tape.concat_cols(&prep(k, a.k_gain)?)?;
        let cached = cache.rows();
        let keys = match cache.keys {
            Some(c) => tape.concat_rows(&[c, k_rot])?,
            None => k_rot,
        };
        let values = match cache.values {
            Some(c) => tape.concat_rows(&[c, val])?,
            None => val,
        };
        let band = Band {
            q0: pos,
            nq: n,
            k0: pos - cached,
            nk: cached + n,
            width: self.spec.attention.width(pos + n - 1),
        };
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(heads);
        for (i, qh) in q_heads.into_iter().enumerate() {
            let kh = keys.slice_cols(i * dh, dh)?;
            let vh = values.slice_cols(i * dh, dh)?;
            let p = qh.band_qk(kh, band)?.scale(scale)?.band_softmax(band)?;
            outs.push(p.band_pv(vh, band)?);
        }
        let total = cached + n;
        let keep = self
            .spec
            .attention
            .cache_rows()
            .map_or(total, |r| r.min(total));
        if keep == 0 {
            *cache = KvCache::default();
        } else if keep == total {
            *cache = KvCache {
                keys: Some(keys),
                values: Some(values),
            };
        } else {
            *cache = KvCache {
                keys: Some(keys.slice_rows(total - keep, keep)?),
                values: Some(values.slice_rows(total - keep, keep)?),
            };
        }
        tape.concat_cols(&outs)?.matmul(params[a.wo])
    }

    fn head_weights<'t>(&self, w1: Var<'t>, w2: Var<'t>, i: usize) -> Result<(Var<'t>, Var<'t>)> {
        let dh = self.spec.head_dim();
        let inner = self.spec.mh_expansion * dh;
        Ok((w1.slice_rows(i * dh, dh)?, w2.slice_rows(i * inner, inner)?))
    }

    fn multi_head_mlp<'t>(
        &self,
        tape: &'t Tape,
        w1: Var<'t>,
        w2: Var<'t>,
        h: Var<'t>,
    ) -> Result<Var<'t>> {
        let dh = self.spec.head_dim();
        let mut outs = Vec::with_capacity(self.spec.n_heads);
        for i in 0..self.spec.n_heads {
            let (a, b) = self.head_weights(w1, w2, i)?;
            outs.push(h.slice_cols(i * dh, dh)?.matmul(a)?.silu()?.matmul(b)?);
        }
        tape.concat_cols(&outs)
    }

    fn kvb_layer<'t>(
        &self,
        tape: &'t Tape,
        params: &[Var<'t>],
        mh: &MhIdx,
        kv: &KvbIdx,
        h: Var<'t>,
        c: f64,
    ) -> Result<(Var<'t>, Var<'t>, Var<'t>)> {
        let simplified = self.spec.ttt_variant == Variant::KvbSimplified;
        let proj = KvbProjections {
            theta_k: params[kv.theta_k],
            theta_v: params[kv.theta_v],
            theta_q: (!simplified).then(|| params[kv.theta_q]),
        };
        kvb_chunk(
            tape,
            h,
            proj,
            params[mh.w1],
            params[mh.w2],
            self.spec.n_heads,
            c,
        )
    }

    /// Static logits `[n, vocab]` for a whole sequence of inputs.
    pub fn forward(&self, params: &ParamSet, inputs: &[u32]) -> Result<Tensor> {
        self.check_params(params)?;
        let tape = Tape::new();
        let vars = params.bind(&tape, |_, _| false);
        let mut state = self.empty_state();
        Ok(self
            .forward_chunk(&tape, &vars, inputs, &mut state, 0.0)?
            .logits
            .value())
    }
}

fn gated_mlp<'t>(params: &[Var<'t>], m: &MlpIdx, h: Var<'t>) -> Result<Var<'t>> {
    let gate = h.matmul(params[m.gate])?.silu()?;
    let up = h.matmul(params[m.up])?;
    gate.mul(up)?.matmul(params[m.down])
}

/// Per-position cross entropy `[n]` of `logits` against `targets`.
pub fn token_losses<'t>(logits: Var<'t>, targets: &[u32]) -> Result<Var<'t>> {
    let (n, v) = (logits.shape()[0], logits.shape()[1]);
    if targets.len() != n {
        return Err(Error::Shape(format!(
            "{} targets for {n} logit rows",
            targets.len()
        )));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t as usize >= v) {
        return Err(Error::Index(format!(
            "target {bad} outside vocabulary of {v}"
        )));
    }
    let ids: Vec<usize> = targets.iter().map(|&t| t as usize).collect();
    logits.log_softmax()?.pick_cols(&ids)?.scale(-1.0)
}

/// `−log softmax(logits)[target]` for a single logit vector.
pub fn softmax_cross_entropy(logits: &Tensor, target: usize) -> Result<f64> {
    if logits.shape().len() != 1 {
        return Err(Error::Shape(format!(
            "expected a logit vector, got shape {:?}",
            logits.shape()
        )));
    }
    if target >= logits.len() {
        return Err(Error::Index(format!(
            "target {target} outside vocabulary of {}",
            logits.len()
        )));
    }
    let tape = Tape::new();
    let row = tape.constant(logits).reshape(&[1, logits.len()])?;
    Ok(-row.log_softmax()?.pick_cols(&[target])?.sum()?.item())
}

#[cfg(test)]
mod tests;

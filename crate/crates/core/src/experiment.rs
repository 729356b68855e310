//! Experiment pipelines shared by the command-line driver and the
//! acceptance suite: the five-method toy comparison, the derivation ladder
//! and single-axis sweeps.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde::Serialize;

use crate::config::KvMap;
use crate::data::{split_holdout, Corpus, PackedSequence};
use crate::error::{Error, Result};
use crate::eval::{log_slope, loss_breakdown, EvalReport};
use crate::kvb::build_variant;
use crate::model::{default_hidden, Attention, FastFraction, Model, ModelSpec, ParamSet, Variant};
use crate::train::{split_seed, train_run, CurvePoint, TrainRecipe};
use crate::ttt::{Objective, TttConfig};

/// The methods compared in the toy experiment.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ToyMethod {
    FullAttention,
    NoAttention,
    TttNaive,
    E2eOnline,
    E2eBatched,
}

impl ToyMethod {
    pub const ALL: [ToyMethod; 5] = [
        Self::FullAttention,
        Self::NoAttention,
        Self::TttNaive,
        Self::E2eOnline,
        Self::E2eBatched,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Self::FullAttention => "full_attention",
            Self::NoAttention => "no_attention",
            Self::TttNaive => "ttt_naive",
            Self::E2eOnline => "ttt_e2e_b1",
            Self::E2eBatched => "ttt_e2e_b16",
        }
    }
}

impl fmt::Display for ToyMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ToyMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown toy method {s:?}")))
    }
}

/// Scaled-down version of the two-block toy recipe.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ToySettings {
    pub n_blocks: usize,
    pub embed_dim: usize,
    pub n_heads: usize,
    pub context: usize,
    /// Inner rate of the batched end-to-end method.
    pub eta: f64,
    /// Inner rate of the online (b=1) end-to-end method. It takes ~16x more
    /// steps per sequence, so it wants a smaller rate.
    pub eta_online: f64,
    /// Inner rate applied at test time to the statically trained model.
    pub eta_naive: f64,
    /// Candidate rates for the naive method, picked on validation sequences
    /// held out of training. Empty keeps `eta_naive`.
    pub naive_eta_grid: Vec<f64>,
    pub val_seqs: usize,
    /// Inner batch of the batched end-to-end method.
    pub batch_b: usize,
    pub steps: usize,
    pub seqs_per_step: usize,
    pub eval_seqs: usize,
    pub lr_full: f64,
    pub lr_other: f64,
}

impl Default for ToySettings {
    fn default() -> Self {
        Self {
            n_blocks: 2,
            embed_dim: 64,
            n_heads: 4,
            context: 128,
            eta: 0.1,
            eta_online: 0.01,
            eta_naive: 0.1,
            naive_eta_grid: vec![1e-3, 3e-3, 1e-2, 3e-2, 1e-1],
            val_seqs: 32,
            batch_b: 16,
            steps: 600,
            seqs_per_step: 8,
            eval_seqs: 96,
            lr_full: 3e-3,
            lr_other: 5e-3,
        }
    }
}

impl ToySettings {
    pub fn base_spec(&self) -> ModelSpec {
        ModelSpec {
            n_blocks: self.n_blocks,
            embed_dim: self.embed_dim,
            n_heads: self.n_heads,
            mlp_hidden_dim: default_hidden(self.embed_dim),
            ..ModelSpec::toy()
        }
    }

    pub fn spec(&self, m: ToyMethod) -> ModelSpec {
        let base = self.base_spec();
        match m {
            ToyMethod::FullAttention => ModelSpec {
                attention: Attention::Full,
                ..base
            },
            ToyMethod::NoAttention => base,
            ToyMethod::TttNaive => ModelSpec {
                ttt_variant: Variant::Naive,
                ..base
            },
            ToyMethod::E2eOnline | ToyMethod::E2eBatched => ModelSpec {
                ttt_variant: Variant::E2e,
                ..base
            },
        }
    }

    pub fn ttt(&self, m: ToyMethod) -> TttConfig {
        let (eta, batch_b) = match m {
            ToyMethod::FullAttention | ToyMethod::NoAttention => (0.0, 1),
            ToyMethod::TttNaive => (self.eta_naive, 1),
            ToyMethod::E2eOnline => (self.eta_online, 1),
            ToyMethod::E2eBatched => (self.eta, self.batch_b),
        };
        TttConfig {
            eta,
            batch_b,
            ..TttConfig::default()
        }
    }

    /// Inner-loop settings seen during training. The naive objective never
    /// steps, so its chunking only affects speed.
    pub fn train_ttt(&self, m: ToyMethod) -> TttConfig {
        match m {
            ToyMethod::E2eOnline | ToyMethod::E2eBatched => self.ttt(m),
            _ => TttConfig {
                eta: 0.0,
                batch_b: self.batch_b,
                ..TttConfig::default()
            },
        }
    }

    pub fn recipe(&self, m: ToyMethod, seed: u64) -> TrainRecipe {
        let batch_tokens = self.seqs_per_step * self.context;
        let objective = if matches!(m, ToyMethod::E2eOnline | ToyMethod::E2eBatched) {
            Objective::E2e
        } else {
            Objective::Naive
        };
        TrainRecipe {
            peak_lr: if m == ToyMethod::FullAttention {
                self.lr_full
            } else {
                self.lr_other
            },
            batch_tokens,
            total_tokens: batch_tokens * self.steps,
            seed: split_seed(seed, m.name()),
            objective,
            ..TrainRecipe::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.context == 0 || self.steps == 0 || self.seqs_per_step == 0 || self.eval_seqs == 0 {
            return Err(Error::Config("toy sizes must be positive".into()));
        }
        if self
            .naive_eta_grid
            .iter()
            .any(|e| !(*e >= 0.0 && e.is_finite()))
        {
            return Err(Error::Config(
                "naive_eta_grid entries must be finite and non-negative".into(),
            ));
        }
        if self.batch_b == 0 || !self.context.is_multiple_of(self.batch_b) {
            return Err(Error::Config(format!(
                "toy batch_b {} must divide context {}",
                self.batch_b, self.context
            )));
        }
        for m in ToyMethod::ALL {
            self.spec(m).validate()?;
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::new();
        kv.set("n_blocks", self.n_blocks);
        kv.set("embed_dim", self.embed_dim);
        kv.set("n_heads", self.n_heads);
        kv.set("context", self.context);
        kv.set("eta", self.eta);
        kv.set("eta_online", self.eta_online);
        kv.set("eta_naive", self.eta_naive);
        kv.set("naive_eta_grid", join_list(&self.naive_eta_grid));
        kv.set("val_seqs", self.val_seqs);
        kv.set("batch_b", self.batch_b);
        kv.set("steps", self.steps);
        kv.set("seqs_per_step", self.seqs_per_step);
        kv.set("eval_seqs", self.eval_seqs);
        kv.set("lr_full", self.lr_full);
        kv.set("lr_other", self.lr_other);
        kv
    }

    pub fn from_kv(kv: &KvMap, base: &ToySettings) -> Result<Self> {
        kv.reject_unknown(&[
            "n_blocks",
            "embed_dim",
            "n_heads",
            "context",
            "eta",
            "eta_online",
            "eta_naive",
            "naive_eta_grid",
            "val_seqs",
            "batch_b",
            "steps",
            "seqs_per_step",
            "eval_seqs",
            "lr_full",
            "lr_other",
        ])?;
        let mut s = base.clone();
        kv.read_into("n_blocks", &mut s.n_blocks)?;
        kv.read_into("embed_dim", &mut s.embed_dim)?;
        kv.read_into("n_heads", &mut s.n_heads)?;
        kv.read_into("context", &mut s.context)?;
        kv.read_into("eta", &mut s.eta)?;
        kv.read_into("eta_online", &mut s.eta_online)?;
        kv.read_into("eta_naive", &mut s.eta_naive)?;
        if let Some(v) = kv.raw("naive_eta_grid") {
            s.naive_eta_grid = parse_list(v)?;
        }
        kv.read_into("val_seqs", &mut s.val_seqs)?;
        kv.read_into("batch_b", &mut s.batch_b)?;
        kv.read_into("steps", &mut s.steps)?;
        kv.read_into("seqs_per_step", &mut s.seqs_per_step)?;
        kv.read_into("eval_seqs", &mut s.eval_seqs)?;
        kv.read_into("lr_full", &mut s.lr_full)?;
        kv.read_into("lr_other", &mut s.lr_other)?;
        s.validate()?;
        Ok(s)
    }
}

/// Comma-separated list, as used for grids and sweep values.
pub fn join_list<T: fmt::Display>(xs: &[T]) -> String {
    xs.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

pub fn parse_list<T: FromStr>(s: &str) -> Result<Vec<T>>
where
    T::Err: fmt::Display,
{
    s.split(',')
        .map(str::trim)
        .filter(|x| !x.is_empty())
        .map(|x| {
            x.parse()
                .map_err(|e| Error::Config(format!("bad list entry {x:?}: {e}")))
        })
        .collect()
}

/// Train and held-out sequences of the bundled corpus at length `t`. The
/// split is fixed so every seed and method is scored on the same tokens.
pub fn bundled_split(
    t: usize,
    eval_seqs: usize,
) -> Result<(Vec<PackedSequence>, Vec<PackedSequence>)> {
    let seqs = Corpus::bundled().pack(t, t, 0)?;
    let n = seqs.len();
    if eval_seqs >= n {
        return Err(Error::Data(format!(
            "only {n} sequences of length {t}; cannot hold out {eval_seqs}"
        )));
    }
    split_holdout(seqs, eval_seqs as f64 / n as f64)
}

#[derive(Clone, Debug, Serialize)]
pub struct MethodRun {
    pub method: String,
    pub report: EvalReport,
    pub curve: Vec<CurvePoint>,
    pub train_seconds: f64,
    /// Inner rate used for evaluation.
    pub eta: f64,
    #[serde(skip)]
    pub params: ParamSet,
}

/// Outcome of one method; failures are kept so the rest can continue.
pub type MethodResult = std::result::Result<MethodRun, String>;

/// Trains under `train_ttt` and evaluates under `ttt`.
pub fn train_and_eval(
    spec: &ModelSpec,
    train_ttt: &TttConfig,
    ttt: &TttConfig,
    recipe: &TrainRecipe,
    train: &[PackedSequence],
    test: &[PackedSequence],
    name: &str,
    log: impl FnMut(&CurvePoint),
) -> Result<MethodRun> {
    let model = Model::new(spec)?;
    let start = Instant::now();
    let out = train_run(&model, train_ttt, recipe, train, log)?;
    let train_seconds = start.elapsed().as_secs_f64();
    let report = loss_breakdown(&model, &out.params, ttt, test)?;
    Ok(MethodRun {
        method: name.to_string(),
        report,
        curve: out.curve,
        train_seconds,
        eta: ttt.eta,
        params: out.params,
    })
}

/// Runs every toy method for one seed. The last `val_seqs` training
/// sequences are withheld from every method and used only to pick the
/// naive inner rate. `progress` receives the method and each curve point.
pub fn run_toy(
    settings: &ToySettings,
    seed: u64,
    train: &[PackedSequence],
    test: &[PackedSequence],
    mut progress: impl FnMut(ToyMethod, &CurvePoint),
) -> Result<Vec<(ToyMethod, MethodResult)>> {
    settings.validate()?;
    if settings.val_seqs >= train.len() {
        return Err(Error::Data(format!(
            "cannot withhold {} of {} training sequences",
            settings.val_seqs,
            train.len()
        )));
    }
    let (train, val) = train.split_at(train.len() - settings.val_seqs);
    let mut out = Vec::new();
    for m in ToyMethod::ALL {
        let mut ttt = settings.ttt(m);
        let r = (|| {
            let model = Model::new(&settings.spec(m))?;
            let start = Instant::now();
            let trained = train_run(
                &model,
                &settings.train_ttt(m),
                &settings.recipe(m, seed),
                train,
                |p| progress(m, p),
            )?;
            let train_seconds = start.elapsed().as_secs_f64();
            if m == ToyMethod::TttNaive && !settings.naive_eta_grid.is_empty() {
                ttt.eta = pick_eta(&model, &trained.params, &ttt, &settings.naive_eta_grid, val)?;
            }
            let report = loss_breakdown(&model, &trained.params, &ttt, test)?;
            Ok::<_, Error>(MethodRun {
                method: m.name().to_string(),
                report,
                curve: trained.curve,
                train_seconds,
                eta: ttt.eta,
                params: trained.params,
            })
        })();
        out.push((m, r.map_err(|e| e.to_string())));
    }
    Ok(out)
}

/// Rate from `grid` with the lowest aggregate loss on `val`; ties go to the
/// earlier entry.
pub fn pick_eta(
    model: &Model,
    params: &ParamSet,
    base: &TttConfig,
    grid: &[f64],
    val: &[PackedSequence],
) -> Result<f64> {
    let mut best = (f64::INFINITY, base.eta);
    for &eta in grid {
        let r = loss_breakdown(
            model,
            params,
            &TttConfig {
                eta,
                ..base.clone()
            },
            val,
        )?;
        if r.aggregate < best.0 {
            best = (r.aggregate, eta);
        }
    }
    Ok(best.1)
}

/// Mean loss at the first and last quarter of offsets inside each inner
/// batch of `b` positions. The first batch is skipped: no step has happened
/// yet, and its opening positions see almost no context.
pub fn batch_quartiles(per_index: &[f64], b: usize) -> (f64, f64) {
    let q = (b / 4).max(1);
    let (mut head, mut tail, mut nh, mut nt) = (0.0, 0.0, 0usize, 0usize);
    for chunk in per_index.chunks_exact(b).skip(1) {
        head += chunk[..q].iter().sum::<f64>();
        tail += chunk[b - q..].iter().sum::<f64>();
        nh += q;
        nt += q;
    }
    (head / nh as f64, tail / nt as f64)
}

/// Qualitative checks of one seed's toy results.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ToyVerdict {
    pub aggregates: Vec<(ToyMethod, f64)>,
    pub ordering_holds: bool,
    /// Slope of the online method's per-index loss against `ln t`.
    pub online_log_slope: f64,
    pub batch_head: f64,
    pub batch_tail: f64,
}

impl ToyVerdict {
    pub fn passed(&self) -> bool {
        self.ordering_holds && self.online_log_slope < 0.0 && self.batch_tail > self.batch_head
    }
}

pub fn judge_toy(results: &[(ToyMethod, MethodResult)], batch_b: usize) -> Result<ToyVerdict> {
    let get = |m: ToyMethod| -> Result<&EvalReport> {
        match results.iter().find(|(k, _)| *k == m) {
            Some((_, Ok(r))) => Ok(&r.report),
            Some((_, Err(e))) => Err(Error::Data(format!("{m} failed: {e}"))),
            None => Err(Error::Data(format!("{m} missing"))),
        }
    };
    let agg = |m| get(m).map(|r| r.aggregate);
    let (full, online, batched, naive, none) = (
        agg(ToyMethod::FullAttention)?,
        agg(ToyMethod::E2eOnline)?,
        agg(ToyMethod::E2eBatched)?,
        agg(ToyMethod::TttNaive)?,
        agg(ToyMethod::NoAttention)?,
    );
    let ordering_holds = full <= online && online < batched && batched < naive && naive < none;
    let per = &get(ToyMethod::E2eOnline)?.per_index_loss;
    let ts: Vec<f64> = (1..=per.len()).map(|t| t as f64).collect();
    let online_log_slope = log_slope(&ts, per);
    let (batch_head, batch_tail) =
        batch_quartiles(&get(ToyMethod::E2eBatched)?.per_index_loss, batch_b);
    Ok(ToyVerdict {
        aggregates: ToyMethod::ALL
            .iter()
            .map(|&m| (m, agg(m).unwrap_or(f64::NAN)))
            .collect(),
        ordering_holds,
        online_log_slope,
        batch_head,
        batch_tail,
    })
}

/// Settings of the derivation-ladder comparison: every variant shares the
/// sliding-window base and the training budget.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LadderSettings {
    pub n_blocks: usize,
    pub embed_dim: usize,
    pub n_heads: usize,
    pub window_k: usize,
    pub context: usize,
    pub eta: f64,
    pub batch_b: usize,
    pub steps: usize,
    pub seqs_per_step: usize,
    pub eval_seqs: usize,
    pub peak_lr: f64,
}

impl Default for LadderSettings {
    fn default() -> Self {
        Self {
            n_blocks: 4,
            embed_dim: 64,
            n_heads: 8,
            window_k: 16,
            context: 128,
            eta: 0.1,
            batch_b: 16,
            steps: 600,
            seqs_per_step: 8,
            eval_seqs: 64,
            peak_lr: 5e-3,
        }
    }
}

impl LadderSettings {
    pub fn base_spec(&self) -> ModelSpec {
        ModelSpec {
            n_blocks: self.n_blocks,
            embed_dim: self.embed_dim,
            n_heads: self.n_heads,
            attention: Attention::Sliding(self.window_k),
            fast_fraction: FastFraction::Quarter,
            qk_norm: true,
            mh_expansion: 2,
            mlp_hidden_dim: default_hidden(self.embed_dim),
            ..ModelSpec::toy()
        }
    }

    pub fn ttt(&self) -> TttConfig {
        TttConfig {
            eta: self.eta,
            batch_b: self.batch_b,
            ..TttConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.context == 0 || self.steps == 0 || self.seqs_per_step == 0 || self.eval_seqs == 0 {
            return Err(Error::Config("ladder sizes must be positive".into()));
        }
        for name in crate::kvb::LADDER {
            Model::new(&build_variant(&self.base_spec(), name)?)?;
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::new();
        kv.set("n_blocks", self.n_blocks);
        kv.set("embed_dim", self.embed_dim);
        kv.set("n_heads", self.n_heads);
        kv.set("window_k", self.window_k);
        kv.set("context", self.context);
        kv.set("eta", self.eta);
        kv.set("batch_b", self.batch_b);
        kv.set("steps", self.steps);
        kv.set("seqs_per_step", self.seqs_per_step);
        kv.set("eval_seqs", self.eval_seqs);
        kv.set("peak_lr", self.peak_lr);
        kv
    }

    pub fn from_kv(kv: &KvMap, base: &LadderSettings) -> Result<Self> {
        kv.reject_unknown(&[
            "n_blocks",
            "embed_dim",
            "n_heads",
            "window_k",
            "context",
            "eta",
            "batch_b",
            "steps",
            "seqs_per_step",
            "eval_seqs",
            "peak_lr",
        ])?;
        let mut s = base.clone();
        kv.read_into("n_blocks", &mut s.n_blocks)?;
        kv.read_into("embed_dim", &mut s.embed_dim)?;
        kv.read_into("n_heads", &mut s.n_heads)?;
        kv.read_into("window_k", &mut s.window_k)?;
        kv.read_into("context", &mut s.context)?;
        kv.read_into("eta", &mut s.eta)?;
        kv.read_into("batch_b", &mut s.batch_b)?;
        kv.read_into("steps", &mut s.steps)?;
        kv.read_into("seqs_per_step", &mut s.seqs_per_step)?;
        kv.read_into("eval_seqs", &mut s.eval_seqs)?;
        kv.read_into("peak_lr", &mut s.peak_lr)?;
        s.validate()?;
        Ok(s)
    }

    /// Every variant gets the same seed, so they see the same batches and
    /// share initial values wherever their parameter layouts agree.
    pub fn recipe(&self, seed: u64) -> TrainRecipe {
        let batch_tokens = self.seqs_per_step * self.context;
        TrainRecipe {
            peak_lr: self.peak_lr,
            batch_tokens,
            total_tokens: batch_tokens * self.steps,
            seed: split_seed(seed, "ladder"),
            objective: Objective::E2e,
            ..TrainRecipe::default()
        }
    }
}

/// Trains and scores every ladder variant on matched data and budget.
pub fn run_ladder(
    settings: &LadderSettings,
    seed: u64,
    train: &[PackedSequence],
    test: &[PackedSequence],
    mut progress: impl FnMut(&str, &CurvePoint),
) -> Result<Vec<(String, MethodResult)>> {
    settings.validate()?;
    let base = settings.base_spec();
    let mut out = Vec::new();
    for name in crate::kvb::LADDER {
        let spec = build_variant(&base, name)?;
        let r = train_and_eval(
            &spec,
            &settings.ttt(),
            &settings.ttt(),
            &settings.recipe(seed),
            train,
            test,
            name,
            |p| progress(name, p),
        );
        out.push((name.to_string(), r.map_err(|e| e.to_string())));
    }
    Ok(out)
}

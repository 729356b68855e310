//! Experiment front-end: the run configuration and one function per
//! subcommand. Every command writes CSV files plus `manifest.txt` into its
//! output directory.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use sha2::{Digest, Sha256};
use ttt_core::config::KvMap;
use ttt_core::data::{gen_niah, split_holdout, write_niah_jsonl, Corpus, NiahKind, PackedSequence};
use ttt_core::eval::{
    bench, loss_breakdown, niah_eval, write_bench_csv, write_per_index_csv, EvalReport,
};
use ttt_core::experiment::{
    join_list, judge_toy, parse_list, run_toy, train_and_eval, LadderSettings, ToyMethod,
    ToySettings,
};
use ttt_core::model::{Attention, Dtype, FastFraction, Model, ModelSpec, ParamSet};
use ttt_core::train::{finetune_run, split_seed, train_run, write_curve_csv, TrainRecipe};
use ttt_core::ttt::TttConfig;
use ttt_core::{Error, Result};

/// Data and evaluation settings.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalSettings {
    /// Text file of documents; the bundled corpus when unset.
    pub corpus: Option<PathBuf>,
    pub delimiter: String,
    pub context: usize,
    pub min_doc_len: usize,
    pub holdout: f64,
    pub max_eval_seqs: usize,
    pub toy_seeds: usize,
    pub niah_per_kind: usize,
    pub niah_haystack: usize,
    pub bench_t: Vec<usize>,
    pub bench_repeats: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            corpus: None,
            delimiter: ttt_core::data::DOC_DELIMITER.to_string(),
            context: 128,
            min_doc_len: 128,
            holdout: 0.05,
            max_eval_seqs: 128,
            toy_seeds: 3,
            niah_per_kind: 20,
            niah_haystack: 256,
            bench_t: vec![256, 512, 1024, 2048],
            bench_repeats: 1,
        }
    }
}

const EVAL_KEYS: [&str; 11] = [
    "corpus",
    "delimiter",
    "context",
    "min_doc_len",
    "holdout",
    "max_eval_seqs",
    "toy_seeds",
    "niah_per_kind",
    "niah_haystack",
    "bench_t",
    "bench_repeats",
];

impl EvalSettings {
    fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::new();
        if let Some(c) = &self.corpus {
            kv.set("corpus", c.display());
        }
        // Escaped so the value survives line-based parsing.
        kv.set(
            "delimiter",
            self.delimiter.replace('\\', "\\\\").replace('\n', "\\n"),
        );
        kv.set("context", self.context);
        kv.set("min_doc_len", self.min_doc_len);
        kv.set("holdout", self.holdout);
        kv.set("max_eval_seqs", self.max_eval_seqs);
        kv.set("toy_seeds", self.toy_seeds);
        kv.set("niah_per_kind", self.niah_per_kind);
        kv.set("niah_haystack", self.niah_haystack);
        kv.set("bench_t", join_list(&self.bench_t));
        kv.set("bench_repeats", self.bench_repeats);
        kv
    }

    fn from_kv(kv: &KvMap, base: &EvalSettings) -> Result<Self> {
        kv.reject_unknown(&EVAL_KEYS)?;
        let mut e = base.clone();
        if let Some(c) = kv.raw("corpus") {
            e.corpus = Some(PathBuf::from(c));
        }
        if let Some(d) = kv.raw("delimiter") {
            e.delimiter = unescape(d);
        }
        kv.read_into("context", &mut e.context)?;
        kv.read_into("min_doc_len", &mut e.min_doc_len)?;
        kv.read_into("holdout", &mut e.holdout)?;
        kv.read_into("max_eval_seqs", &mut e.max_eval_seqs)?;
        kv.read_into("toy_seeds", &mut e.toy_seeds)?;
        kv.read_into("niah_per_kind", &mut e.niah_per_kind)?;
        kv.read_into("niah_haystack", &mut e.niah_haystack)?;
        if let Some(v) = kv.raw("bench_t") {
            e.bench_t = parse_list(v)?;
        }
        kv.read_into("bench_repeats", &mut e.bench_repeats)?;
        if !(e.holdout > 0.0 && e.holdout < 1.0) {
            return Err(Error::Config(format!(
                "eval.holdout must lie in (0, 1), got {}",
                e.holdout
            )));
        }
        if e.context == 0 || e.max_eval_seqs == 0 {
            return Err(Error::Config(
                "eval.context and eval.max_eval_seqs must be positive".into(),
            ));
        }
        Ok(e)
    }
}

fn unescape(s: &str) -> String {
    let mut out = String::new();
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        match (c, c == '\\') {
            (_, true) => match chars.next() {
                Some('n') => out.push('\n'),
                Some(other) => out.push(other),
                None => out.push('\\'),
            },
            (c, false) => out.push(c),
        }
    }
    out
}

/// Everything a command needs, read from flat `section.key=value` text.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub model: ModelSpec,
    pub ttt: TttConfig,
    pub recipe: TrainRecipe,
    pub eval: EvalSettings,
    pub toy: ToySettings,
    pub ladder: LadderSettings,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            model: ModelSpec::toy(),
            ttt: TttConfig::default(),
            recipe: TrainRecipe::default(),
            eval: EvalSettings::default(),
            toy: ToySettings::default(),
            ladder: LadderSettings::default(),
            output_dir: PathBuf::from("out"),
        }
    }
}

const SECTIONS: [&str; 6] = ["model", "ttt", "train", "eval", "toy", "ladder"];

impl ExperimentConfig {
    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::new();
        kv.merge_section("model", &self.model.to_kv());
        kv.merge_section("ttt", &self.ttt.to_kv());
        kv.merge_section("train", &self.recipe.to_kv());
        kv.merge_section("eval", &self.eval.to_kv());
        kv.merge_section("toy", &self.toy.to_kv());
        kv.merge_section("ladder", &self.ladder.to_kv());
        kv.set("output_dir", self.output_dir.display());
        kv
    }

    pub fn from_kv(kv: &KvMap) -> Result<Self> {
        for k in kv.keys() {
            let known = k == "output_dir"
                || SECTIONS
                    .iter()
                    .any(|s| k.strip_prefix(s).is_some_and(|r| r.starts_with('.')));
            if !known {
                return Err(Error::Config(format!("unknown key {k}")));
            }
        }
        let d = Self::default();
        Ok(Self {
            model: ModelSpec::from_kv(&kv.section("model"), &d.model)?,
            ttt: TttConfig::from_kv(&kv.section("ttt"), &d.ttt)?,
            recipe: TrainRecipe::from_kv(&kv.section("train"), &d.recipe)?,
            eval: EvalSettings::from_kv(&kv.section("eval"), &d.eval)?,
            toy: ToySettings::from_kv(&kv.section("toy"), &d.toy)?,
            ladder: LadderSettings::from_kv(&kv.section("ladder"), &d.ladder)?,
            output_dir: kv
                .raw("output_dir")
                .map(PathBuf::from)
                .unwrap_or(d.output_dir),
        })
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_kv(&KvMap::parse(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    /// SHA-256 of the canonical text form.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_kv().to_string().as_bytes());
        digest.iter().fold(String::new(), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }
}

/// Per-run context shared by every command.
#[derive(Clone, Debug)]
pub struct RunContext {
    pub command: String,
    pub seed: u64,
    pub out: PathBuf,
    pub workers: usize,
}

impl RunContext {
    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }
}

/// Writes the resolved config and a manifest with its hash and versions.
pub fn write_manifest(
    cfg: &ExperimentConfig,
    ctx: &RunContext,
    extra: &[(&str, String)],
) -> Result<()> {
    fs::create_dir_all(&ctx.out)?;
    fs::write(ctx.path("config.txt"), cfg.to_kv().to_string())?;
    let mut m = String::new();
    let _ = writeln!(m, "command={}", ctx.command);
    let _ = writeln!(m, "config_sha256={}", cfg.hash());
    let _ = writeln!(m, "seed={}", ctx.seed);
    let _ = writeln!(m, "workers={}", ctx.workers);
    let _ = writeln!(m, "ttt_cli_version={}", env!("CARGO_PKG_VERSION"));
    let _ = writeln!(m, "ttt_core_version={}", ttt_core::VERSION);
    for (k, v) in extra {
        let _ = writeln!(m, "{k}={v}");
    }
    fs::write(ctx.path("manifest.txt"), m)?;
    Ok(())
}

/// Packs the configured corpus at the configured context and splits off the
/// evaluation set, capped at `max_eval_seqs`.
pub fn load_data(
    cfg: &ExperimentConfig,
    seed: u64,
) -> Result<(Vec<PackedSequence>, Vec<PackedSequence>)> {
    let corpus = match &cfg.eval.corpus {
        Some(p) => Corpus::load(p, &cfg.eval.delimiter)?,
        None => Corpus::bundled(),
    };
    let seqs = corpus.pack(
        cfg.eval.min_doc_len,
        cfg.eval.context,
        split_seed(seed, "data"),
    )?;
    let (train, mut test) = split_holdout(seqs, cfg.eval.holdout)?;
    test.truncate(cfg.eval.max_eval_seqs);
    Ok((train, test))
}

fn write_summary(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush()?;
    Ok(())
}

fn report_row(r: &EvalReport) -> Vec<String> {
    vec![
        r.aggregate.to_string(),
        r.n_sequences.to_string(),
        r.flops_prefill.to_string(),
        r.flops_per_decoded_token.to_string(),
    ]
}

/// What a command produced. `failures` lists sub-runs that errored.
#[derive(Debug, Default)]
pub struct CommandOutcome {
    pub lines: Vec<String>,
    pub failures: Vec<String>,
}

/// Trains and scores the five toy methods for `eval.toy_seeds` seeds.
///
/// Writes one per-index CSV per method averaged over seeds (the
/// token-level breakdown), `runs.csv` with every seed's curve, `summary.csv`
/// and `verdict.csv`.
pub fn cmd_toy(cfg: &ExperimentConfig, ctx: &RunContext) -> Result<CommandOutcome> {
    write_manifest(cfg, ctx, &[])?;
    let toy = &cfg.toy;
    let (train, test) = ttt_core::experiment::bundled_split(toy.context, toy.eval_seqs)?;
    let mut out = CommandOutcome::default();
    let mut per_method: BTreeMap<ToyMethod, Vec<Vec<f64>>> = BTreeMap::new();
    let (mut summary, mut verdicts, mut runs) = (Vec::new(), Vec::new(), Vec::new());
    for s in 0..cfg.eval.toy_seeds as u64 {
        let seed = ctx.seed + s;
        let res = run_toy(toy, seed, &train, &test, |m, p| {
            log::debug!("seed {seed} {m} step {} loss {:.4}", p.step, p.loss);
        })?;
        for (m, r) in &res {
            match r {
                Ok(run) => {
                    per_method
                        .entry(*m)
                        .or_default()
                        .push(run.report.per_index_loss.clone());
                    write_curve_csv(&ctx.path(&format!("curve_seed{seed}_{m}.csv")), &run.curve)?;
                    for (i, l) in run.report.per_index_loss.iter().enumerate() {
                        runs.push(vec![
                            seed.to_string(),
                            m.to_string(),
                            (i + 1).to_string(),
                            l.to_string(),
                        ]);
                    }
                    let mut row = vec![seed.to_string(), m.to_string(), "ok".into()];
                    row.extend(report_row(&run.report));
                    row.extend([run.eta.to_string(), run.train_seconds.to_string()]);
                    summary.push(row);
                }
                Err(e) => {
                    out.failures.push(format!("seed {seed} {m}: {e}"));
                    summary.push(vec![
                        seed.to_string(),
                        m.to_string(),
                        format!("failed: {e}"),
                        String::new(),
                        String::new(),
                        String::new(),
                        String::new(),
                        String::new(),
                        String::new(),
                    ]);
                }
            }
        }
        match judge_toy(&res, toy.batch_b) {
            Ok(v) => {
                out.lines.push(format!(
                    "seed {seed}: ordering {} b=1 log-slope {:.4} b={} quartiles {:.4} -> {:.4} {}",
                    v.ordering_holds,
                    v.online_log_slope,
                    toy.batch_b,
                    v.batch_head,
                    v.batch_tail,
                    if v.passed() { "PASS" } else { "FAIL" }
                ));
                verdicts.push(vec![
                    seed.to_string(),
                    v.ordering_holds.to_string(),
                    v.online_log_slope.to_string(),
                    v.batch_head.to_string(),
                    v.batch_tail.to_string(),
                    v.passed().to_string(),
                ]);
            }
            Err(e) => out.lines.push(format!("seed {seed}: no verdict ({e})")),
        }
    }
    for (m, rows) in &per_method {
        let n = rows.len() as f64;
        let mean: Vec<f64> = (0..rows[0].len())
            .map(|i| rows.iter().map(|r| r[i]).sum::<f64>() / n)
            .collect();
        let report = EvalReport {
            aggregate: mean.iter().sum::<f64>() / mean.len() as f64,
            per_index_loss: mean,
            ..EvalReport::default()
        };
        write_per_index_csv(&ctx.path(&format!("{m}.csv")), &report)?;
        out.lines.push(format!(
            "{m}: mean aggregate {:.4} over {} seeds",
            report.aggregate,
            rows.len()
        ));
    }
    write_summary(
        &ctx.path("summary.csv"),
        &[
            "seed",
            "method",
            "status",
            "aggregate",
            "n_sequences",
            "flops_prefill",
            "flops_per_decoded_token",
            "eta",
            "train_seconds",
        ],
        &summary,
    )?;
    write_summary(
        &ctx.path("verdict.csv"),
        &[
            "seed",
            "ordering",
            "online_log_slope",
            "batch_head",
            "batch_tail",
            "passed",
        ],
        &verdicts,
    )?;
    write_summary(
        &ctx.path("runs.csv"),
        &["seed", "method", "t", "loss"],
        &runs,
    )?;
    Ok(out)
}

/// Trains `model` from scratch on the configured corpus.
pub fn cmd_train(cfg: &ExperimentConfig, ctx: &RunContext) -> Result<CommandOutcome> {
    write_manifest(cfg, ctx, &[])?;
    let (train, test) = load_data(cfg, ctx.seed)?;
    let model = Model::new(&cfg.model)?;
    let recipe = TrainRecipe {
        seed: ctx.seed,
        ..cfg.recipe.clone()
    };
    let outcome = train_run(&model, &cfg.ttt, &recipe, &train, |p| {
        log::info!("step {} loss {:.4} lr {:.2e}", p.step, p.loss, p.lr)
    })?;
    finish_training(cfg, ctx, &model, &outcome.params, &outcome.curve, &test)
}

fn finish_training(
    cfg: &ExperimentConfig,
    ctx: &RunContext,
    model: &Model,
    params: &ParamSet,
    curve: &[ttt_core::train::CurvePoint],
    test: &[PackedSequence],
) -> Result<CommandOutcome> {
    params.save(&ctx.path("params.bin"), Dtype::F64)?;
    write_curve_csv(&ctx.path("curve.csv"), curve)?;
    let report = loss_breakdown(model, params, &cfg.ttt, test)?;
    write_per_index_csv(&ctx.path("per_index.csv"), &report)?;
    let mut row = vec!["final".to_string()];
    row.extend(report_row(&report));
    write_summary(
        &ctx.path("summary.csv"),
        &[
            "run",
            "aggregate",
            "n_sequences",
            "flops_prefill",
            "flops_per_decoded_token",
        ],
        &[row],
    )?;
    Ok(CommandOutcome {
        lines: vec![format!(
            "held-out loss {:.4} over {} sequences",
            report.aggregate, report.n_sequences
        )],
        failures: vec![],
    })
}

/// Continues training saved parameters at the configured context with a
/// fresh schedule and 5% of the pre-training budget.
pub fn cmd_finetune(
    cfg: &ExperimentConfig,
    ctx: &RunContext,
    params: &Path,
) -> Result<CommandOutcome> {
    write_manifest(cfg, ctx, &[("params", params.display().to_string())])?;
    let (train, test) = load_data(cfg, ctx.seed)?;
    let model = Model::new(&cfg.model)?;
    let p = ParamSet::load(params)?;
    let batch = cfg.eval.context * (cfg.recipe.batch_tokens / cfg.eval.context).max(1);
    let recipe = TrainRecipe {
        seed: ctx.seed,
        ..cfg.recipe.finetune(batch)
    };
    let outcome = finetune_run(&model, &p, &cfg.ttt, &recipe, &train, |pt| {
        log::info!("step {} loss {:.4}", pt.step, pt.loss)
    })?;
    finish_training(cfg, ctx, &model, &outcome.params, &outcome.curve, &test)
}

/// Token-level loss breakdown of saved parameters on the held-out split.
pub fn cmd_eval(
    cfg: &ExperimentConfig,
    ctx: &RunContext,
    params: Option<&Path>,
) -> Result<CommandOutcome> {
    write_manifest(cfg, ctx, &[])?;
    let (_, test) = load_data(cfg, ctx.seed)?;
    let model = Model::new(&cfg.model)?;
    let p = match params {
        Some(path) => ParamSet::load(path)?,
        None => model.init(split_seed(ctx.seed, "init")),
    };
    let report = loss_breakdown(&model, &p, &cfg.ttt, &test)?;
    write_per_index_csv(&ctx.path("per_index.csv"), &report)?;
    let mut row = vec!["eval".to_string()];
    row.extend(report_row(&report));
    write_summary(
        &ctx.path("summary.csv"),
        &[
            "run",
            "aggregate",
            "n_sequences",
            "flops_prefill",
            "flops_per_decoded_token",
        ],
        &[row],
    )?;
    Ok(CommandOutcome {
        lines: vec![format!("aggregate loss {:.4}", report.aggregate)],
        failures: vec![],
    })
}

/// Generates needle-in-a-haystack instances and scores greedy answers.
pub fn cmd_niah(
    cfg: &ExperimentConfig,
    ctx: &RunContext,
    params: Option<&Path>,
) -> Result<CommandOutcome> {
    write_manifest(cfg, ctx, &[])?;
    let model = Model::new(&cfg.model)?;
    let p = match params {
        Some(path) => ParamSet::load(path)?,
        None => model.init(split_seed(ctx.seed, "init")),
    };
    let mut insts = Vec::new();
    for kind in NiahKind::ALL {
        for i in 0..cfg.eval.niah_per_kind as u64 {
            insts.push(gen_niah(
                kind,
                cfg.eval.niah_haystack,
                split_seed(ctx.seed, &format!("niah-{kind}-{i}")),
            )?);
        }
    }
    write_niah_jsonl(&ctx.path("niah.jsonl"), &insts)?;
    let acc = niah_eval(&model, &p, &cfg.ttt, &insts)?;
    let rows: Vec<Vec<String>> = acc
        .iter()
        .map(|(k, a)| vec![k.to_string(), a.to_string()])
        .collect();
    write_summary(&ctx.path("niah.csv"), &["kind", "accuracy"], &rows)?;
    Ok(CommandOutcome {
        lines: acc.iter().map(|(k, a)| format!("{k}: {a:.3}")).collect(),
        failures: vec![],
    })
}

/// Hyper-parameter swept by `cmd_sweep`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepAxis {
    WindowK,
    BatchB,
    FastFraction,
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "window_k" => Ok(Self::WindowK),
            "batch_b" => Ok(Self::BatchB),
            "fast_fraction" => Ok(Self::FastFraction),
            _ => Err(Error::Config(format!(
                "unknown sweep axis {s:?}; expected window_k, batch_b or fast_fraction"
            ))),
        }
    }
}

/// Applies one sweep value to the base model and inner-loop settings.
pub fn sweep_point(
    cfg: &ExperimentConfig,
    axis: SweepAxis,
    value: &str,
) -> Result<(ModelSpec, TttConfig)> {
    let (mut spec, mut ttt) = (cfg.model.clone(), cfg.ttt.clone());
    let bad = |e: std::num::ParseIntError| Error::Config(format!("{value:?}: {e}"));
    match axis {
        SweepAxis::WindowK => spec.attention = Attention::Sliding(value.parse().map_err(bad)?),
        SweepAxis::BatchB => ttt.batch_b = value.parse().map_err(bad)?,
        SweepAxis::FastFraction => spec.fast_fraction = value.parse::<FastFraction>()?,
    }
    spec.validate()?;
    ttt.validate(&Model::new(&spec)?)?;
    Ok((spec, ttt))
}

/// One training run per value, in parallel up to `ctx.workers`; failures
/// are recorded per point.
pub fn cmd_sweep(
    cfg: &ExperimentConfig,
    ctx: &RunContext,
    axis: SweepAxis,
    values: &[String],
) -> Result<CommandOutcome> {
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    write_manifest(
        cfg,
        ctx,
        &[("axis", format!("{axis:?}")), ("values", values.join(","))],
    )?;
    let (train, test) = load_data(cfg, ctx.seed)?;
    let recipe = TrainRecipe {
        seed: ctx.seed,
        ..cfg.recipe.clone()
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(ctx.workers.max(1))
        .build()
        .map_err(|e| Error::Config(e.to_string()))?;
    let results: Vec<Result<EvalReport>> = pool.install(|| {
        values
            .par_iter()
            .map(|v| {
                let (spec, ttt) = sweep_point(cfg, axis, v)?;
                let run = train_and_eval(&spec, &ttt, &ttt, &recipe, &train, &test, v, |_| {})?;
                write_per_index_csv(&ctx.path(&format!("per_index_{v}.csv")), &run.report)?;
                Ok(run.report)
            })
            .collect()
    });
    let mut out = CommandOutcome::default();
    let mut rows = Vec::new();
    for (v, r) in values.iter().zip(results) {
        match r {
            Ok(rep) => {
                out.lines.push(format!("{v}: {:.4}", rep.aggregate));
                rows.push(vec![v.clone(), rep.aggregate.to_string(), "ok".into()]);
            }
            Err(e) => {
                out.failures.push(format!("{v}: {e}"));
                rows.push(vec![v.clone(), String::new(), format!("failed: {e}")]);
            }
        }
    }
    write_summary(
        &ctx.path("sweep.csv"),
        &["value", "aggregate", "status"],
        &rows,
    )?;
    Ok(out)
}

/// Prefill and decode FLOPs and wall-clock over a grid of lengths.
pub fn cmd_bench(
    cfg: &ExperimentConfig,
    ctx: &RunContext,
    t_grid: &[usize],
) -> Result<CommandOutcome> {
    write_manifest(cfg, ctx, &[("t_grid", join_list(t_grid))])?;
    let model = Model::new(&cfg.model)?;
    let p = model.init(split_seed(ctx.seed, "init"));
    let rows = bench(&model, &p, &cfg.ttt, t_grid, cfg.eval.bench_repeats.max(1))?;
    write_bench_csv(&ctx.path("bench.csv"), &rows)?;
    Ok(CommandOutcome {
        lines: rows
            .iter()
            .map(|r| {
                format!(
                    "T={} prefill {} FLOPs ({:.1}/token), {:.1} ms",
                    r.t, r.prefill_flops, r.flops_per_token, r.prefill_ms
                )
            })
            .collect(),
        failures: vec![],
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn delimiter_escaping_roundtrips() {
        for d in ["\n<|endoftext|>\n", "a\\nb", "\\", ""] {
            let e = EvalSettings {
                delimiter: d.to_string(),
                ..EvalSettings::default()
            };
            assert_eq!(
                EvalSettings::from_kv(&e.to_kv(), &EvalSettings::default())
                    .unwrap()
                    .delimiter,
                d
            );
        }
    }
}

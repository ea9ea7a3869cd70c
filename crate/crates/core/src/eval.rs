//! Prequential logs, AUC, and the experiment drivers behind the CLI.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rayon::prelude::*;
use serde::Serialize;

use crate::datagen::{generate_population, support_len, Population, PopulationConfig, TaskDataset};
use crate::error::{Error, Result};
use crate::metalearn::{
    finetune_stream, offline_meta_train, online_meta_train, predict_stream, train_base, Hyperparams, MetaState,
};
use crate::model::{build_topology, Example, ModelConfig, NetworkTopology, PartitionSpec};

/// One prequential record: the score was produced before the label was used.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogEntry {
    pub score: f64,
    pub label: u8,
    pub user_id: u64,
    /// Index in the log.
    pub position: usize,
    /// Index inside the user's session.
    pub user_position: usize,
    pub session_len: usize,
}

/// Append-only prediction log.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvalLog {
    entries: Vec<LogEntry>,
}

impl EvalLog {
    pub fn push(&mut self, entry: LogEntry) {
        self.entries.push(entry);
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[LogEntry] {
        &self.entries
    }

    pub fn scores(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.score).collect()
    }

    pub fn labels(&self) -> Vec<u8> {
        self.entries.iter().map(|e| e.label).collect()
    }

    /// Entries past each user's support prefix.
    pub fn query_only(&self, support_fraction: f64) -> EvalLog {
        let entries = self
            .entries
            .iter()
            .filter(|e| e.user_position >= query_start(e.session_len, support_fraction))
            .copied()
            .collect();
        EvalLog { entries }
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "position,user_id,user_position,session_len,score,label")?;
        for e in &self.entries {
            writeln!(
                out,
                "{},{},{},{},{},{}",
                e.position, e.user_id, e.user_position, e.session_len, e.score, e.label
            )?;
        }
        Ok(())
    }
}

impl FromIterator<LogEntry> for EvalLog {
    fn from_iter<I: IntoIterator<Item = LogEntry>>(iter: I) -> Self {
        EvalLog {
            entries: iter.into_iter().collect(),
        }
    }
}

/// First query index of a session; sessions shorter than two items have no split.
fn query_start(session_len: usize, support_fraction: f64) -> usize {
    if session_len < 2 {
        0
    } else {
        support_len(session_len, support_fraction)
    }
}

/// Rank-based ROC AUC with ties counted as one half.
pub fn auc_scores(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::contract(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::contract("NaN score in AUC input"));
    }
    if let Some(bad) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::contract(format!("label {bad} is not binary")));
    }
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric(format!(
            "AUC needs both classes ({n_pos} positives, {n_neg} negatives)"
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut pos_rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks are 1-based; a tie group shares its average rank
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            if labels[k] == 1 {
                pos_rank_sum += rank;
            }
        }
        i = j + 1;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Ok((pos_rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

pub fn auc(log: &EvalLog) -> Result<f64> {
    auc_scores(&log.scores(), &log.labels())
}

/// Mean of per-user AUCs over users whose entries hold both classes.
pub fn macro_auc(log: &EvalLog) -> Result<f64> {
    let mut sum = 0.0;
    let mut count = 0usize;
    let entries = log.entries();
    let mut i = 0;
    while i < entries.len() {
        let uid = entries[i].user_id;
        let mut j = i;
        while j < entries.len() && entries[j].user_id == uid {
            j += 1;
        }
        let scores: Vec<f64> = entries[i..j].iter().map(|e| e.score).collect();
        let labels: Vec<u8> = entries[i..j].iter().map(|e| e.label).collect();
        match auc_scores(&scores, &labels) {
            Ok(a) => {
                sum += a;
                count += 1;
            }
            Err(Error::UndefinedMetric(_)) => {}
            Err(e) => return Err(e),
        }
        i = j;
    }
    if count == 0 {
        return Err(Error::UndefinedMetric("no user holds both classes".into()));
    }
    Ok(sum / count as f64)
}

/// Mean and sample standard deviation (n - 1 denominator, 0 for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvePoint {
    /// Number of log entries consumed at the end of the window.
    pub end: usize,
    pub auc: f64,
}

/// AUC over consecutive windows of `window` entries. The last window is
/// aligned to the end of the log so the tail is always covered.
pub fn learning_curve(log: &EvalLog, window: usize) -> Result<Vec<CurvePoint>> {
    if window == 0 || window > log.len() {
        return Err(Error::contract(format!(
            "window {window} must be in 1..={}",
            log.len()
        )));
    }
    let entries = log.entries();
    let mut starts: Vec<usize> = (0..=log.len() - window).step_by(window).collect();
    if *starts.last().unwrap() + window < log.len() {
        starts.push(log.len() - window);
    }
    starts
        .into_iter()
        .map(|s| {
            let slice = &entries[s..s + window];
            let scores: Vec<f64> = slice.iter().map(|e| e.score).collect();
            let labels: Vec<u8> = slice.iter().map(|e| e.label).collect();
            Ok(CurvePoint {
                end: s + window,
                auc: auc_scores(&scores, &labels)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum Method {
    #[serde(rename = "base")]
    Base,
    #[serde(rename = "base+finetune")]
    BaseFinetune,
    #[serde(rename = "meta")]
    Meta,
    #[serde(rename = "proposed")]
    Proposed,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Base, Method::BaseFinetune, Method::Meta, Method::Proposed];

    pub fn name(self) -> &'static str {
        match self {
            Method::Base => "base",
            Method::BaseFinetune => "base+finetune",
            Method::Meta => "meta",
            Method::Proposed => "proposed",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::config(format!("unknown method {s:?}")))
    }
}

/// Everything that defines a comparison run except the method list.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub population: PopulationConfig,
    pub embed_dim: usize,
    pub hidden_sizes: Vec<usize>,
    pub hp: Hyperparams,
    pub partition: PartitionSpec,
    /// Leading share of each target session available to the unified base
    /// model; the comparison metric is computed on the remaining items.
    pub support_fraction: f64,
    pub runs: usize,
    /// Run `r` uses seed `seed + r` for data, initialisation and sampling.
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let population = PopulationConfig::default();
        let model = ModelConfig::benchmark(population.layout.vocab_sizes());
        Self {
            population,
            embed_dim: model.embed_dim,
            hidden_sizes: model.hidden_sizes,
            hp: Hyperparams::desk(),
            partition: PartitionSpec::first_two_hidden(),
            support_fraction: 0.5,
            runs: 5,
            seed: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            vocab_sizes: self.population.layout.vocab_sizes(),
            embed_dim: self.embed_dim,
            hidden_sizes: self.hidden_sizes.clone(),
        }
    }

    pub fn topology(&self) -> Result<NetworkTopology> {
        build_topology(&self.model_config())
    }

    pub fn validate(&self) -> Result<()> {
        self.population.validate()?;
        self.hp.validate()?;
        let topology = self.topology()?;
        self.partition.validate(&topology)?;
        if !(self.support_fraction > 0.0 && self.support_fraction < 1.0) {
            return Err(Error::config("support_fraction must lie in (0, 1)"));
        }
        if self.runs == 0 {
            return Err(Error::config("runs must be positive"));
        }
        Ok(())
    }

    pub fn run_seed(&self, run: usize) -> u64 {
        self.seed.wrapping_add(run as u64)
    }

    /// Population of run `run`.
    pub fn population_for(&self, run: usize) -> Result<Population> {
        generate_population(&PopulationConfig {
            seed: self.run_seed(run),
            ..self.population.clone()
        })
    }
}

/// Source records plus the support prefix of each target session.
pub fn base_training_records(population: &Population, support_fraction: f64) -> Vec<Example> {
    let mut records: Vec<Example> = population
        .source
        .iter()
        .flat_map(|t| t.examples.iter().cloned())
        .collect();
    for t in &population.target {
        let k = query_start(t.len(), support_fraction);
        records.extend(t.examples[..k].iter().cloned());
    }
    records
}

#[derive(Debug, Clone)]
pub struct MethodLogs {
    pub method: Method,
    pub log: EvalLog,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunRecord {
    pub method: Method,
    pub run: usize,
    pub seed: u64,
    /// Pooled AUC over the query part of every target session.
    pub query_auc: f64,
    /// Pooled AUC over the whole prequential stream; absent for `base`,
    /// which is only scored on query items.
    pub stream_auc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MethodReport {
    pub method: Method,
    pub auc_mean: f64,
    pub auc_std: f64,
    pub seeds: Vec<u64>,
    pub config_hash: String,
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub records: Vec<RunRecord>,
    pub reports: Vec<MethodReport>,
    /// Logs of the first run, per method.
    pub first_run_logs: Vec<MethodLogs>,
}

impl ExperimentResult {
    pub fn report(&self, method: Method) -> Option<&MethodReport> {
        self.reports.iter().find(|r| r.method == method)
    }
}

struct RunOutput {
    records: Vec<RunRecord>,
    logs: Vec<MethodLogs>,
}

fn offline_state(population: &Population, config: &ExperimentConfig, topology: &NetworkTopology, seed: u64) -> Result<MetaState> {
    Ok(offline_meta_train(&population.source, &config.hp, topology, seed)?.state)
}

fn run_methods(config: &ExperimentConfig, methods: &[Method], run: usize) -> Result<RunOutput> {
    let seed = config.run_seed(run);
    let population = config.population_for(run)?;
    let topology = config.topology()?;
    let hp = &config.hp;
    let target = &population.target;
    let needs_base = methods.iter().any(|m| matches!(m, Method::Base | Method::BaseFinetune));
    let needs_meta = methods.iter().any(|m| matches!(m, Method::Meta | Method::Proposed));
    let base = if needs_base {
        let records = base_training_records(&population, config.support_fraction);
        Some(train_base(&records, hp, &topology, seed)?.params)
    } else {
        None
    };
    let meta = if needs_meta {
        Some(offline_state(&population, config, &topology, seed)?)
    } else {
        None
    };

    let mut records = Vec::new();
    let mut logs = Vec::new();
    for &method in methods {
        let log = match method {
            Method::Base => predict_stream(base.as_ref().unwrap(), target, &topology, |t| {
                query_start(t.len(), config.support_fraction)
            })?,
            Method::BaseFinetune => finetune_stream(base.as_ref().unwrap(), target, hp, &topology)?,
            Method::Meta => finetune_stream(&meta.as_ref().unwrap().theta0, target, hp, &topology)?,
            Method::Proposed => online_meta_train(meta.as_ref().unwrap(), target, hp, &topology, &config.partition)?.1,
        };
        let query_auc = auc(&log.query_only(config.support_fraction))?;
        let stream_auc = match method {
            Method::Base => None,
            _ => Some(auc(&log)?),
        };
        records.push(RunRecord {
            method,
            run,
            seed,
            query_auc,
            stream_auc,
        });
        logs.push(MethodLogs { method, log });
    }
    Ok(RunOutput { records, logs })
}

/// Runs every method over `config.runs` seeds on identical data per seed.
pub fn run_experiment(config: &ExperimentConfig, methods: &[Method], config_hash: &str) -> Result<ExperimentResult> {
    config.validate()?;
    if methods.is_empty() {
        return Err(Error::config("no methods requested"));
    }
    let outputs: Vec<RunOutput> = (0..config.runs)
        .into_par_iter()
        .map(|r| run_methods(config, methods, r))
        .collect::<Result<_>>()?;
    let seeds: Vec<u64> = (0..config.runs).map(|r| config.run_seed(r)).collect();
    let reports = methods
        .iter()
        .map(|&m| {
            let aucs: Vec<f64> = outputs
                .iter()
                .flat_map(|o| o.records.iter().filter(|r| r.method == m).map(|r| r.query_auc))
                .collect();
            let (auc_mean, auc_std) = mean_std(&aucs);
            MethodReport {
                method: m,
                auc_mean,
                auc_std,
                seeds: seeds.clone(),
                config_hash: config_hash.to_string(),
            }
        })
        .collect();
    let mut outputs = outputs.into_iter();
    let first = outputs.next().unwrap();
    let mut records = first.records;
    for o in outputs {
        records.extend(o.records);
    }
    Ok(ExperimentResult {
        records,
        reports,
        first_run_logs: first.logs,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub spec: PartitionSpec,
    pub auc_mean: f64,
    pub auc_std: f64,
    pub per_run: Vec<f64>,
}

/// Fixed-layer sets studied by default: each single layer, the first two hidden
/// layers, the first three layers of the dense stack, and nothing fixed.
pub fn default_ablation_specs() -> Vec<PartitionSpec> {
    vec![
        PartitionSpec::new([1]),
        PartitionSpec::new([2]),
        PartitionSpec::new([3]),
        PartitionSpec::new([4]),
        PartitionSpec::new([5]),
        PartitionSpec::new([2, 3]),
        PartitionSpec::new([2, 3, 4]),
        PartitionSpec::all_adaptive(),
    ]
}

/// The proposed method under each fixed-layer set. Offline training and data
/// are shared across specs within a run.
pub fn ablation_fixed_layers(config: &ExperimentConfig, specs: &[PartitionSpec]) -> Result<Vec<AblationRow>> {
    config.validate()?;
    let topology = config.topology()?;
    for s in specs {
        s.validate(&topology)?;
    }
    let per_run: Vec<Vec<f64>> = (0..config.runs)
        .into_par_iter()
        .map(|r| -> Result<Vec<f64>> {
            let population = config.population_for(r)?;
            let meta = offline_state(&population, config, &topology, config.run_seed(r))?;
            specs
                .iter()
                .map(|spec| {
                    let (_, log) = online_meta_train(&meta, &population.target, &config.hp, &topology, spec)?;
                    auc(&log.query_only(config.support_fraction))
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    Ok(specs
        .iter()
        .enumerate()
        .map(|(i, spec)| {
            let values: Vec<f64> = per_run.iter().map(|v| v[i]).collect();
            let (auc_mean, auc_std) = mean_std(&values);
            AblationRow {
                spec: spec.clone(),
                auc_mean,
                auc_std,
                per_run: values,
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepParam {
    InnerIters,
    InnerLr,
}

impl FromStr for SweepParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "inner_iters" => Ok(SweepParam::InnerIters),
            "inner_lr" => Ok(SweepParam::InnerLr),
            _ => Err(Error::config(format!("unknown sweep parameter {s:?}"))),
        }
    }
}

impl fmt::Display for SweepParam {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SweepParam::InnerIters => "inner_iters",
            SweepParam::InnerLr => "inner_lr",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub value: f64,
    pub auc_mean: f64,
    pub auc_std: f64,
}

/// The proposed method at each value of one inner-loop parameter. The value
/// applies to offline and online training alike.
pub fn sweep(config: &ExperimentConfig, param: SweepParam, values: &[f64]) -> Result<Vec<SweepPoint>> {
    if values.is_empty() {
        return Err(Error::config("sweep needs at least one value"));
    }
    values
        .iter()
        .map(|&value| {
            let mut cfg = config.clone();
            match param {
                SweepParam::InnerIters => {
                    if value < 1.0 || value.fract() != 0.0 {
                        return Err(Error::config(format!("inner_iters must be a positive integer, got {value}")));
                    }
                    cfg.hp.inner_iters = value as usize;
                }
                SweepParam::InnerLr => cfg.hp.inner_lr = value,
            }
            let result = run_experiment(&cfg, &[Method::Proposed], "")?;
            let report = &result.reports[0];
            Ok(SweepPoint {
                value,
                auc_mean: report.auc_mean,
                auc_std: report.auc_std,
            })
        })
        .collect()
}

pub fn write_compare_csv<W: Write>(mut out: W, records: &[RunRecord]) -> Result<()> {
    writeln!(out, "method,run,seed,query_auc,stream_auc")?;
    for r in records {
        let stream = r.stream_auc.map(|v| v.to_string()).unwrap_or_default();
        writeln!(out, "{},{},{},{},{}", r.method, r.run, r.seed, r.query_auc, stream)?;
    }
    Ok(())
}

pub fn write_compare_json<W: Write>(out: W, reports: &[MethodReport]) -> Result<()> {
    serde_json::to_writer_pretty(out, reports).map_err(|e| Error::Io(e.into()))
}

pub fn write_ablation_csv<W: Write>(mut out: W, rows: &[AblationRow]) -> Result<()> {
    writeln!(out, "fixed_layers,auc_mean,auc_std")?;
    for r in rows {
        writeln!(out, "\"{}\",{},{}", r.spec, r.auc_mean, r.auc_std)?;
    }
    Ok(())
}

pub fn write_sweep_csv<W: Write>(mut out: W, param: SweepParam, points: &[SweepPoint]) -> Result<()> {
    writeln!(out, "{param},auc_mean,auc_std")?;
    for p in points {
        writeln!(out, "{},{},{}", p.value, p.auc_mean, p.auc_std)?;
    }
    Ok(())
}

pub fn write_curve_csv<W: Write>(mut out: W, curve: &[CurvePoint]) -> Result<()> {
    writeln!(out, "end,auc")?;
    for p in curve {
        writeln!(out, "{},{}", p.end, p.auc)?;
    }
    Ok(())
}

/// Log entries of a task list scored by fixed scores, for tests and tools.
pub fn log_from_scores(tasks: &[TaskDataset], scores: &[f64]) -> Result<EvalLog> {
    let total: usize = tasks.iter().map(|t| t.len()).sum();
    if total != scores.len() {
        return Err(Error::contract(format!("{} scores for {total} examples", scores.len())));
    }
    let mut log = EvalLog::default();
    let mut k = 0;
    for t in tasks {
        for (i, ex) in t.examples.iter().enumerate() {
            log.push(LogEntry {
                score: scores[k],
                label: ex.label,
                user_id: t.user_id,
                position: k,
                user_position: i,
                session_len: t.len(),
            });
            k += 1;
        }
    }
    Ok(log)
}

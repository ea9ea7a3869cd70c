//! Command-line front end: config files, run hashing and the subcommands.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use sha2::{Digest, Sha256};

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::datagen::{load_dataset, save_dataset, TaskDataset};
use crate::error::{Error, Result};
use crate::eval::{
    ablation_fixed_layers, auc, default_ablation_specs, learning_curve, run_experiment, sweep, write_ablation_csv,
    write_compare_csv, write_compare_json, write_curve_csv, write_sweep_csv, ExperimentConfig, Method, SweepParam,
};
use crate::metalearn::{finetune_stream, offline_meta_train, online_meta_train, MetaState};
use crate::model::PartitionSpec;

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(|v| {
            v.trim()
                .parse()
                .map_err(|_| Error::config(format!("{key}: cannot parse {v:?}")))
        })
        .collect()
}

fn parse_one<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::config(format!("{key}: cannot parse {value:?}")))
}

fn parse_four(key: &str, value: &str) -> Result<[f64; 4]> {
    let v: Vec<f64> = parse_list(key, value)?;
    v.try_into()
        .map_err(|_| Error::config(format!("{key}: expected four values")))
}

fn join<T: ToString>(values: &[T]) -> String {
    values.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

/// Applies one `key=value` setting.
pub fn set_key(cfg: &mut ExperimentConfig, key: &str, value: &str) -> Result<()> {
    let p = &mut cfg.population;
    let l = &mut p.layout;
    let hp = &mut cfg.hp;
    match key {
        "seed" => cfg.seed = parse_one(key, value)?,
        "runs" => cfg.runs = parse_one(key, value)?,
        "partition" => cfg.partition = PartitionSpec::parse(value)?,
        "support_fraction" => cfg.support_fraction = parse_one(key, value)?,
        "model.embed_dim" => cfg.embed_dim = parse_one(key, value)?,
        "model.hidden" => cfg.hidden_sizes = parse_list(key, value)?,
        "data.n_train_users" => p.n_train_users = parse_one(key, value)?,
        "data.n_test_users" => p.n_test_users = parse_one(key, value)?,
        "data.mode_means" => p.mode_means = parse_four(key, value)?,
        "data.mode_weights" => p.mode_weights = parse_four(key, value)?,
        "data.test_mode_weights" => p.test_mode_weights = parse_four(key, value)?,
        "data.latent_dim" => p.latent_dim = parse_one(key, value)?,
        "data.cluster_spread" => p.cluster_spread = parse_one(key, value)?,
        "data.noise_scale" => p.noise_scale = parse_one(key, value)?,
        "data.user_bias_scale" => p.user_bias_scale = parse_one(key, value)?,
        "data.n_items" => p.n_items = parse_one(key, value)?,
        "data.n_fresh_items" => p.n_fresh_items = parse_one(key, value)?,
        "data.fresh_item_rate" => p.fresh_item_rate = parse_one(key, value)?,
        "data.category_drift" => p.category_drift = parse_one(key, value)?,
        "data.positive_rate" => p.positive_rate = parse_one(key, value)?,
        "data.vocab" => {
            let v: Vec<usize> = parse_list(key, value)?;
            let [a, b, c, d, e, f, g, h]: [usize; 8] = v
                .try_into()
                .map_err(|_| Error::config("data.vocab: expected eight sizes"))?;
            l.user_id_buckets = a;
            l.user_profile = b;
            l.user_activity = c;
            l.item_id_buckets = d;
            l.item_category = e;
            l.item_profile = f;
            l.user_category_cross = g;
            l.context = h;
        }
        "hp.inner_lr" => hp.inner_lr = parse_one(key, value)?,
        "hp.inner_batch" => hp.inner_batch = parse_one(key, value)?,
        "hp.inner_iters" => hp.inner_iters = parse_one(key, value)?,
        "hp.outer_lr_start" => hp.outer_lr_start = parse_one(key, value)?,
        "hp.outer_lr_end" => hp.outer_lr_end = parse_one(key, value)?,
        "hp.outer_batch" => hp.outer_batch = parse_one(key, value)?,
        "hp.outer_iters" => hp.outer_iters = parse_one(key, value)?,
        "hp.epsilon" => hp.epsilon = parse_one(key, value)?,
        "hp.online_outer_lr_start" => hp.online_outer_lr_start = parse_one(key, value)?,
        "hp.online_outer_lr_end" => hp.online_outer_lr_end = parse_one(key, value)?,
        "hp.base_lr" => hp.base_lr = parse_one(key, value)?,
        "hp.base_epochs" => hp.base_epochs = parse_one(key, value)?,
        "hp.base_batch" => hp.base_batch = parse_one(key, value)?,
        _ => return Err(Error::config(format!("unknown config key {key:?}"))),
    }
    Ok(())
}

/// Reads `key = value` lines over the defaults. `#` starts a comment line.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::default();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::config(format!("line {}: expected key = value", i + 1)))?;
        set_key(&mut cfg, key.trim(), value.trim())
            .map_err(|e| Error::config(format!("line {}: {e}", i + 1)))?;
    }
    Ok(cfg)
}

/// Canonical rendering; parsing it gives back the same config.
pub fn render_config(cfg: &ExperimentConfig) -> String {
    let p = &cfg.population;
    let hp = &cfg.hp;
    let lines = [
        ("seed", cfg.seed.to_string()),
        ("runs", cfg.runs.to_string()),
        ("partition", cfg.partition.to_string()),
        ("support_fraction", cfg.support_fraction.to_string()),
        ("model.embed_dim", cfg.embed_dim.to_string()),
        ("model.hidden", join(&cfg.hidden_sizes)),
        ("data.n_train_users", p.n_train_users.to_string()),
        ("data.n_test_users", p.n_test_users.to_string()),
        ("data.mode_means", join(&p.mode_means)),
        ("data.mode_weights", join(&p.mode_weights)),
        ("data.test_mode_weights", join(&p.test_mode_weights)),
        ("data.latent_dim", p.latent_dim.to_string()),
        ("data.cluster_spread", p.cluster_spread.to_string()),
        ("data.noise_scale", p.noise_scale.to_string()),
        ("data.user_bias_scale", p.user_bias_scale.to_string()),
        ("data.n_items", p.n_items.to_string()),
        ("data.n_fresh_items", p.n_fresh_items.to_string()),
        ("data.fresh_item_rate", p.fresh_item_rate.to_string()),
        ("data.category_drift", p.category_drift.to_string()),
        ("data.positive_rate", p.positive_rate.to_string()),
        ("data.vocab", join(&p.layout.vocab_sizes())),
        ("hp.inner_lr", hp.inner_lr.to_string()),
        ("hp.inner_batch", hp.inner_batch.to_string()),
        ("hp.inner_iters", hp.inner_iters.to_string()),
        ("hp.outer_lr_start", hp.outer_lr_start.to_string()),
        ("hp.outer_lr_end", hp.outer_lr_end.to_string()),
        ("hp.outer_batch", hp.outer_batch.to_string()),
        ("hp.outer_iters", hp.outer_iters.to_string()),
        ("hp.epsilon", hp.epsilon.to_string()),
        ("hp.online_outer_lr_start", hp.online_outer_lr_start.to_string()),
        ("hp.online_outer_lr_end", hp.online_outer_lr_end.to_string()),
        ("hp.base_lr", hp.base_lr.to_string()),
        ("hp.base_epochs", hp.base_epochs.to_string()),
        ("hp.base_batch", hp.base_batch.to_string()),
    ];
    let mut out = String::new();
    for (k, v) in lines {
        out.push_str(k);
        out.push_str(" = ");
        out.push_str(&v);
        out.push('\n');
    }
    out
}

/// First 16 hex digits of the SHA-256 of the canonical rendering.
pub fn config_hash(cfg: &ExperimentConfig) -> String {
    let digest = Sha256::digest(render_config(cfg).as_bytes());
    hex::encode(digest)[..16].to_string()
}

#[derive(Debug, Parser)]
#[command(name = "metarec", version, about = "Meta-learned CTR models for sparse-data users")]
pub struct Cli {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone)]
pub struct CommonArgs {
    /// `key = value` config file applied over the defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, env = "METAREC_OUT", default_value = "out")]
    pub out: PathBuf,
    #[arg(long, global = true)]
    pub runs: Option<usize>,
    /// Fixed layers, e.g. `2,3`, or `none`.
    #[arg(long, global = true)]
    pub partition: Option<String>,
    /// Extra `key=value` overrides, applied last.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic source and target populations.
    GenData,
    /// Offline meta training on source users.
    TrainOffline {
        /// Directory holding train.tsv from gen-data; generated in memory if absent.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Online training over the target stream with prequential scoring.
    TrainOnline {
        #[arg(long, default_value = "proposed")]
        method: String,
        /// Offline checkpoint; offline training runs first if absent.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Learning-curve window in log entries.
        #[arg(long, default_value_t = 400)]
        window: usize,
    },
    /// All four methods over several seeds.
    Compare,
    /// The proposed method under different fixed-layer sets.
    Ablate {
        /// Fixed-layer set; repeat for several rows. Defaults to the standard study.
        #[arg(long = "fixed")]
        fixed: Vec<String>,
    },
    /// Sweep one inner-loop parameter.
    Sweep {
        #[arg(long)]
        param: String,
        /// Comma separated values.
        #[arg(long)]
        values: String,
    },
}

/// Builds the run config: defaults, then the config file, then flags.
pub fn resolve_config(common: &CommonArgs) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
            parse_config(&text)?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(runs) = common.runs {
        cfg.runs = runs;
    }
    if let Some(p) = &common.partition {
        cfg.partition = PartitionSpec::parse(p)?;
    }
    for kv in &common.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        set_key(&mut cfg, k.trim(), v.trim())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn create(out: &Path, name: &str) -> Result<BufWriter<fs::File>> {
    Ok(BufWriter::new(fs::File::create(out.join(name))?))
}

fn finish(mut w: BufWriter<fs::File>) -> Result<()> {
    w.flush()?;
    Ok(())
}

fn load_or_generate(cfg: &ExperimentConfig, data: Option<&Path>) -> Result<(Vec<TaskDataset>, Vec<TaskDataset>)> {
    match data {
        Some(dir) => {
            let vocab = cfg.population.layout.vocab_sizes();
            let mut out = Vec::new();
            for name in ["train.tsv", "test.tsv"] {
                let file = load_dataset(&dir.join(name))?;
                if file.vocab_sizes != vocab {
                    return Err(Error::Schema(format!("{name}: vocabulary does not match the config")));
                }
                out.push(file.tasks);
            }
            let test = out.pop().unwrap();
            Ok((out.pop().unwrap(), test))
        }
        None => {
            let pop = cfg.population_for(0)?;
            Ok((pop.source, pop.target))
        }
    }
}

pub fn cmd_gen_data(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    let pop = cfg.population_for(0)?;
    let vocab = cfg.population.layout.vocab_sizes();
    let hash = config_hash(cfg);
    let comment = format!("config_hash={hash} seed={}", cfg.seed);
    save_dataset(&pop.source, &vocab, &out.join("train.tsv"), Some(&comment))?;
    save_dataset(&pop.target, &vocab, &out.join("test.tsv"), Some(&comment))?;
    let records = |t: &[TaskDataset]| t.iter().map(|u| u.len()).sum::<usize>();
    let manifest = serde_json::json!({
        "config_hash": hash,
        "seed": cfg.seed,
        "vocab_sizes": vocab,
        "train_users": pop.source.len(),
        "test_users": pop.target.len(),
        "train_records": records(&pop.source),
        "test_records": records(&pop.target),
    });
    let mut w = create(out, "manifest.json")?;
    serde_json::to_writer_pretty(&mut w, &manifest).map_err(|e| Error::Io(e.into()))?;
    writeln!(w)?;
    finish(w)?;
    println!(
        "wrote {} train users and {} test users to {}",
        pop.source.len(),
        pop.target.len(),
        out.display()
    );
    Ok(())
}

pub fn cmd_train_offline(cfg: &ExperimentConfig, out: &Path, data: Option<&Path>) -> Result<MetaState> {
    fs::create_dir_all(out)?;
    let topology = cfg.topology()?;
    let (source, _) = load_or_generate(cfg, data)?;
    let run = offline_meta_train(&source, &cfg.hp, &topology, cfg.seed)?;
    save_checkpoint(&out.join("offline.ckpt"), &run.state, &topology, &config_hash(cfg))?;
    let mut w = create(out, "offline_loss.csv")?;
    writeln!(w, "step,loss")?;
    for (i, l) in run.loss_trace.iter().enumerate() {
        writeln!(w, "{i},{l}")?;
    }
    finish(w)?;
    println!("offline meta training: {} outer steps", run.state.outer_step);
    Ok(run.state)
}

pub fn cmd_train_online(
    cfg: &ExperimentConfig,
    out: &Path,
    method: Method,
    checkpoint: Option<&Path>,
    data: Option<&Path>,
    window: usize,
) -> Result<()> {
    fs::create_dir_all(out)?;
    let topology = cfg.topology()?;
    let (source, target) = load_or_generate(cfg, data)?;
    let meta = match checkpoint {
        Some(path) => load_checkpoint(path, &topology)?.state,
        None => offline_meta_train(&source, &cfg.hp, &topology, cfg.seed)?.state,
    };
    let (state, log) = match method {
        Method::Proposed => online_meta_train(&meta, &target, &cfg.hp, &topology, &cfg.partition)?,
        Method::Meta => (meta.clone(), finetune_stream(&meta.theta0, &target, &cfg.hp, &topology)?),
        other => {
            return Err(Error::config(format!(
                "train-online supports proposed and meta, not {other}"
            )))
        }
    };
    save_checkpoint(&out.join("online.ckpt"), &state, &topology, &config_hash(cfg))?;
    let mut w = create(out, "online_log.csv")?;
    log.write_csv(&mut w)?;
    finish(w)?;
    let curve = learning_curve(&log, window.min(log.len()))?;
    let mut w = create(out, "learning_curve.csv")?;
    write_curve_csv(&mut w, &curve)?;
    finish(w)?;
    println!(
        "{method}: prequential AUC {:.4}, query AUC {:.4} over {} predictions",
        auc(&log)?,
        auc(&log.query_only(cfg.support_fraction))?,
        log.len()
    );
    Ok(())
}

pub fn cmd_compare(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    let hash = config_hash(cfg);
    let result = run_experiment(cfg, &Method::ALL, &hash)?;
    let mut w = create(out, "compare.csv")?;
    write_compare_csv(&mut w, &result.records)?;
    finish(w)?;
    let mut w = create(out, "compare.json")?;
    write_compare_json(&mut w, &result.reports)?;
    writeln!(w)?;
    finish(w)?;
    for r in &result.reports {
        println!("{:<14} AUC {:.4} ± {:.4}", r.method.name(), r.auc_mean, r.auc_std);
    }
    Ok(())
}

pub fn cmd_ablate(cfg: &ExperimentConfig, out: &Path, fixed: &[String]) -> Result<()> {
    fs::create_dir_all(out)?;
    let specs = if fixed.is_empty() {
        default_ablation_specs()
    } else {
        fixed.iter().map(|f| PartitionSpec::parse(f)).collect::<Result<_>>()?
    };
    let rows = ablation_fixed_layers(cfg, &specs)?;
    let mut w = create(out, "ablation.csv")?;
    write_ablation_csv(&mut w, &rows)?;
    finish(w)?;
    for r in &rows {
        println!("fixed {:<8} AUC {:.4} ± {:.4}", r.spec.to_string(), r.auc_mean, r.auc_std);
    }
    Ok(())
}

pub fn cmd_sweep(cfg: &ExperimentConfig, out: &Path, param: SweepParam, values: &[f64]) -> Result<()> {
    fs::create_dir_all(out)?;
    let points = sweep(cfg, param, values)?;
    let mut w = create(out, "sweep.csv")?;
    write_sweep_csv(&mut w, param, &points)?;
    finish(w)?;
    for p in &points {
        println!("{param} {:<8} AUC {:.4} ± {:.4}", p.value, p.auc_mean, p.auc_std);
    }
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    let cfg = resolve_config(&cli.common)?;
    let out = cli.common.out.as_path();
    match cli.command {
        Command::GenData => cmd_gen_data(&cfg, out),
        Command::TrainOffline { data } => cmd_train_offline(&cfg, out, data.as_deref()).map(|_| ()),
        Command::TrainOnline {
            method,
            checkpoint,
            data,
            window,
        } => cmd_train_online(&cfg, out, method.parse()?, checkpoint.as_deref(), data.as_deref(), window),
        Command::Compare => cmd_compare(&cfg, out),
        Command::Ablate { fixed } => cmd_ablate(&cfg, out, &fixed),
        Command::Sweep { param, values } => {
            let values: Vec<f64> = parse_list("values", &values)?;
            cmd_sweep(&cfg, out, param.parse()?, &values)
        }
    }
}

//! Synthetic user population with four activity modes, plus the dataset file format.
//!
//! Each user gets a latent preference vector drawn around the centre of their
//! activity type. Each impression shows an item with its own latent vector and
//! the click is Bernoulli(sigmoid(<user, item> + user bias + item bias + b0)),
//! with `b0` calibrated so the overall click rate hits a target. Slot ids are
//! coarse quantizations and hashes of those latents, so the network only ever
//! sees a lossy view of the user.
//!
//! File format, one record per line, grouped by user in arrival order:
//!
//! ```text
//! #slots=m vocab=v0,v1,...
//! user_id<TAB>label<TAB>s0:id0 s1:id1 ... s{m-1}:id{m-1}
//! ```
//!
//! Other lines starting with `#` are comments.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::distr::{Distribution, Uniform};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, StandardNormal};

use crate::error::{Error, Result};
use crate::model::Example;

/// splitmix64 finalizer. Used for slot hashing and for deriving sub-seeds.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Combine two words through [`mix64`]; order matters.
pub fn mix2(a: u64, b: u64) -> u64 {
    mix64(a ^ mix64(b).rotate_left(17))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum UserType {
    Active,
    Regular,
    Occasional,
    New,
}

impl UserType {
    pub const ALL: [UserType; 4] = [
        UserType::Active,
        UserType::Regular,
        UserType::Occasional,
        UserType::New,
    ];

    pub fn index(self) -> usize {
        match self {
            UserType::Active => 0,
            UserType::Regular => 1,
            UserType::Occasional => 2,
            UserType::New => 3,
        }
    }
}

/// One user's session: a meta-learning task.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskDataset {
    pub user_id: u64,
    pub examples: Vec<Example>,
}

impl TaskDataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }
}

/// Vocabulary size of each of the eight synthetic slots.
#[derive(Debug, Clone, PartialEq)]
pub struct SlotLayout {
    pub user_id_buckets: usize,
    pub user_profile: usize,
    pub user_activity: usize,
    pub item_id_buckets: usize,
    pub item_category: usize,
    pub item_profile: usize,
    pub user_category_cross: usize,
    pub context: usize,
}

impl Default for SlotLayout {
    fn default() -> Self {
        Self {
            user_id_buckets: 256,
            user_profile: 16,
            user_activity: 4,
            item_id_buckets: 512,
            item_category: 16,
            item_profile: 16,
            user_category_cross: 64,
            context: 8,
        }
    }
}

impl SlotLayout {
    pub const SLOT_COUNT: usize = 8;

    pub fn vocab_sizes(&self) -> Vec<usize> {
        vec![
            self.user_id_buckets,
            self.user_profile,
            self.user_activity,
            self.item_id_buckets,
            self.item_category,
            self.item_profile,
            self.user_category_cross,
            self.context,
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PopulationConfig {
    pub n_train_users: usize,
    pub n_test_users: usize,
    /// Mean session length of active, regular, occasional and new users.
    pub mode_means: [f64; 4],
    /// User-type mix of the training population.
    pub mode_weights: [f64; 4],
    /// User-type mix of the test population.
    pub test_mode_weights: [f64; 4],
    pub layout: SlotLayout,
    pub latent_dim: usize,
    /// Scale of the per-type cluster centres.
    pub cluster_spread: f64,
    /// Std-dev of a user's latent around its cluster centre.
    pub noise_scale: f64,
    /// Std-dev of the per-user click propensity.
    pub user_bias_scale: f64,
    /// Items available during both periods.
    pub n_items: usize,
    /// Items that only appear during the test period.
    pub n_fresh_items: usize,
    /// Probability that a test impression shows a fresh item.
    pub fresh_item_rate: f64,
    /// Std-dev of a per-category logit shift applied during the test period.
    pub category_drift: f64,
    /// Overall click rate the bias is calibrated to.
    pub positive_rate: f64,
    pub seed: u64,
}

impl Default for PopulationConfig {
    fn default() -> Self {
        Self {
            n_train_users: 1000,
            n_test_users: 200,
            mode_means: [20.0, 13.0, 7.0, 3.0],
            mode_weights: [0.22, 0.22, 0.28, 0.28],
            test_mode_weights: [0.12, 0.18, 0.33, 0.37],
            layout: SlotLayout::default(),
            latent_dim: 4,
            cluster_spread: 1.0,
            noise_scale: 1.0,
            user_bias_scale: 2.0,
            n_items: 300,
            n_fresh_items: 100,
            fresh_item_rate: 0.3,
            category_drift: 1.5,
            positive_rate: 0.3,
            seed: 0,
        }
    }
}

impl PopulationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_train_users == 0 || self.n_test_users == 0 {
            return Err(Error::config("user counts must be positive"));
        }
        for (name, w) in [("mode_weights", &self.mode_weights), ("test_mode_weights", &self.test_mode_weights)] {
            if w.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
                return Err(Error::config(format!("{name} must lie in [0, 1]")));
            }
            let sum: f64 = w.iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(Error::config(format!("{name} sum to {sum}, expected 1")));
            }
        }
        if self.mode_means.iter().any(|&m| !(m > 0.0) || !m.is_finite()) {
            return Err(Error::config("mode means must be positive"));
        }
        if self.latent_dim == 0 {
            return Err(Error::config("latent_dim must be positive"));
        }
        if self.noise_scale < 0.0 || self.user_bias_scale < 0.0 || self.cluster_spread < 0.0 || self.category_drift < 0.0
        {
            return Err(Error::config("scales must be non-negative"));
        }
        if self.n_items == 0 {
            return Err(Error::config("n_items must be positive"));
        }
        if !(0.0..=1.0).contains(&self.fresh_item_rate) {
            return Err(Error::config("fresh_item_rate must lie in [0, 1]"));
        }
        if self.fresh_item_rate > 0.0 && self.n_fresh_items == 0 {
            return Err(Error::config("fresh_item_rate > 0 needs n_fresh_items > 0"));
        }
        if !(self.positive_rate > 0.0 && self.positive_rate < 1.0) {
            return Err(Error::config("positive_rate must lie in (0, 1)"));
        }
        if self.layout.vocab_sizes().contains(&0) {
            return Err(Error::config("slot vocab sizes must be positive"));
        }
        Ok(())
    }

    /// First test user id; train ids are `0..n_train_users`.
    pub fn first_test_user(&self) -> u64 {
        self.n_train_users as u64
    }
}

/// Source (offline) and target (online) users plus the generative click probabilities.
#[derive(Debug, Clone)]
pub struct Population {
    pub source: Vec<TaskDataset>,
    pub target: Vec<TaskDataset>,
    pub source_truth: Vec<Vec<f64>>,
    pub target_truth: Vec<Vec<f64>>,
}

/// Success probability of the session-length binomial. High enough that the
/// four type components stay separate modes after mixing.
pub const RECORD_COUNT_P: f64 = 0.75;

/// Session length: Binomial(round(mean / p), p), raised to at least 2.
pub fn sample_record_count<R: Rng + ?Sized>(
    mode_means: &[f64; 4],
    user_type: UserType,
    rng: &mut R,
) -> usize {
    let trials = (mode_means[user_type.index()] / RECORD_COUNT_P).round().max(1.0) as u64;
    let draw = Binomial::new(trials, RECORD_COUNT_P).expect("valid binomial").sample(rng) as usize;
    draw.max(2)
}

fn sample_user_type<R: Rng + ?Sized>(weights: &[f64; 4], rng: &mut R) -> UserType {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (t, &w) in UserType::ALL.iter().zip(weights) {
        acc += w;
        if u < acc {
            return *t;
        }
    }
    // rounding slack: last type with positive weight
    *UserType::ALL
        .iter()
        .zip(weights)
        .rev()
        .find(|(_, &w)| w > 0.0)
        .map(|(t, _)| t)
        .unwrap_or(&UserType::New)
}

fn normal_vec<R: Rng + ?Sized>(rng: &mut R, dim: usize, scale: f64) -> Vec<f64> {
    (0..dim)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

fn sign_pattern(v: &[f64]) -> u64 {
    v.iter()
        .enumerate()
        .fold(0u64, |acc, (k, &x)| if x > 0.0 { acc | (1 << (k % 64)) } else { acc })
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

struct Item {
    latent: Vec<f64>,
    category: usize,
    bias: f64,
}

struct PendingRecord {
    slot_ids: Vec<u32>,
    raw_logit: f64,
    u01: f64,
}

struct PendingUser {
    user_id: u64,
    records: Vec<PendingRecord>,
}

const SALT_USER: u64 = 0x7573_6572;
const SALT_ITEM: u64 = 0x6974_656d;
const SALT_CROSS: u64 = 0x6372_6f73;
const SALT_USER_RNG: u64 = 0x7573_7267;

pub fn generate_population(config: &PopulationConfig) -> Result<Population> {
    config.validate()?;
    let dim = config.latent_dim;
    let layout = &config.layout;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let centers: Vec<Vec<f64>> = (0..4)
        .map(|_| normal_vec(&mut rng, dim, config.cluster_spread))
        .collect();
    let n_categories = layout.item_category;
    let category_centers: Vec<Vec<f64>> = (0..n_categories)
        .map(|_| normal_vec(&mut rng, dim, 1.0))
        .collect();
    let catalog_size = config.n_items + config.n_fresh_items;
    let items: Vec<Item> = (0..catalog_size)
        .map(|_| {
            let category = rng.random_range(0..n_categories);
            let noise = normal_vec(&mut rng, dim, 0.5);
            let latent = category_centers[category]
                .iter()
                .zip(noise)
                .map(|(c, e)| c + e)
                .collect();
            let bias = 0.5 * rng.sample::<f64, _>(StandardNormal);
            Item { latent, category, bias }
        })
        .collect();
    let drift: Vec<f64> = normal_vec(&mut rng, n_categories, config.category_drift);
    let no_drift = vec![0.0; n_categories];

    let make_users = |ids: std::ops::Range<u64>, weights: &[f64; 4], fresh_rate: f64, shift: &[f64]| -> Vec<PendingUser> {
        ids.map(|user_id| {
            let mut urng = ChaCha8Rng::seed_from_u64(mix2(config.seed ^ SALT_USER_RNG, user_id));
            let user_type = sample_user_type(weights, &mut urng);
            let count = sample_record_count(&config.mode_means, user_type, &mut urng);
            let center = &centers[user_type.index()];
            let latent: Vec<f64> = center
                .iter()
                .zip(normal_vec(&mut urng, dim, config.noise_scale))
                .map(|(c, e)| c + e)
                .collect();
            let user_bias = config.user_bias_scale * urng.sample::<f64, _>(StandardNormal);
            let profile = sign_pattern(&latent);
            let user_bucket = mix2(SALT_USER, user_id) % layout.user_id_buckets as u64;
            let popularity = Uniform::new(0.0f64, 1.0).unwrap();

            let records = (0..count)
                .map(|_| {
                    let item_idx = if fresh_rate > 0.0 && urng.random::<f64>() < fresh_rate {
                        config.n_items + urng.random_range(0..config.n_fresh_items)
                    } else {
                        // skewed popularity over the established catalogue
                        let u: f64 = popularity.sample(&mut urng);
                        ((u.powf(1.5) * config.n_items as f64) as usize).min(config.n_items - 1)
                    };
                    let item = &items[item_idx];
                    let context = urng.random_range(0..layout.context);
                    let affinity: f64 = latent.iter().zip(&item.latent).map(|(a, b)| a * b).sum();
                    let raw_logit = affinity + user_bias + item.bias + shift[item.category];
                    let u01: f64 = urng.random();
                    let slot_ids = vec![
                        user_bucket as u32,
                        (profile % layout.user_profile as u64) as u32,
                        (user_type.index() % layout.user_activity) as u32,
                        (mix2(SALT_ITEM, item_idx as u64) % layout.item_id_buckets as u64) as u32,
                        item.category as u32,
                        (sign_pattern(&item.latent) % layout.item_profile as u64) as u32,
                        (mix2(SALT_CROSS ^ profile, item.category as u64) % layout.user_category_cross as u64)
                            as u32,
                        context as u32,
                    ];
                    PendingRecord { slot_ids, raw_logit, u01 }
                })
                .collect();
            PendingUser { user_id, records }
        })
        .collect()
    };

    let first_test = config.first_test_user();
    let train = make_users(0..first_test, &config.mode_weights, 0.0, &no_drift);
    let test = make_users(
        first_test..first_test + config.n_test_users as u64,
        &config.test_mode_weights,
        config.fresh_item_rate,
        &drift,
    );

    let offset = calibrate_offset(
        train.iter().chain(&test).flat_map(|u| u.records.iter().map(|r| r.raw_logit)),
        config.positive_rate,
    );

    let finish = |users: Vec<PendingUser>| -> (Vec<TaskDataset>, Vec<Vec<f64>>) {
        users
            .into_iter()
            .map(|u| {
                let mut truth = Vec::with_capacity(u.records.len());
                let examples = u
                    .records
                    .into_iter()
                    .map(|r| {
                        let p = sigmoid(r.raw_logit + offset);
                        truth.push(p);
                        Example::new(r.slot_ids, u8::from(r.u01 < p))
                    })
                    .collect();
                (
                    TaskDataset {
                        user_id: u.user_id,
                        examples,
                    },
                    truth,
                )
            })
            .unzip()
    };
    let (source, source_truth) = finish(train);
    let (target, target_truth) = finish(test);
    Ok(Population {
        source,
        target,
        source_truth,
        target_truth,
    })
}

/// Bisection for `b0` with mean(sigmoid(logit + b0)) = rate.
fn calibrate_offset(logits: impl Iterator<Item = f64>, rate: f64) -> f64 {
    let logits: Vec<f64> = logits.collect();
    if logits.is_empty() {
        return 0.0;
    }
    let mean_rate = |b: f64| logits.iter().map(|&z| sigmoid(z + b)).sum::<f64>() / logits.len() as f64;
    let (mut lo, mut hi) = (-50.0, 50.0);
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if mean_rate(mid) < rate {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Prefix of `ceil(fraction * len)` examples is the support set, the rest the
/// query set. The support never swallows the whole task.
pub fn split_support_query(task: &TaskDataset, fraction: f64) -> Result<(Vec<Example>, Vec<Example>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::contract(format!("support fraction {fraction} outside (0, 1)")));
    }
    let n = task.len();
    if n < 2 {
        return Err(Error::contract(format!("task of user {} has {n} examples, need >= 2", task.user_id)));
    }
    let cut = support_len(n, fraction);
    Ok((task.examples[..cut].to_vec(), task.examples[cut..].to_vec()))
}

/// Support size used by [`split_support_query`].
pub fn support_len(n: usize, fraction: f64) -> usize {
    // the epsilon keeps e.g. 0.7 * 10 from ceiling to 8
    let raw = (fraction * n as f64 - 1e-9).ceil() as usize;
    raw.clamp(1, n.saturating_sub(1).max(1))
}

/// Tasks read back from a dataset file.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct DatasetFile {
    pub vocab_sizes: Vec<usize>,
    pub tasks: Vec<TaskDataset>,
}

pub fn write_dataset<W: Write>(
    out: &mut W,
    tasks: &[TaskDataset],
    vocab_sizes: &[usize],
    comment: Option<&str>,
) -> Result<()> {
    let vocab: Vec<String> = vocab_sizes.iter().map(|v| v.to_string()).collect();
    writeln!(out, "#slots={} vocab={}", vocab_sizes.len(), vocab.join(","))?;
    if let Some(c) = comment {
        writeln!(out, "#{c}")?;
    }
    for task in tasks {
        for ex in &task.examples {
            if ex.slot_ids.len() != vocab_sizes.len() {
                return Err(Error::Schema(format!(
                    "user {} has a record with {} slots, header declares {}",
                    task.user_id,
                    ex.slot_ids.len(),
                    vocab_sizes.len()
                )));
            }
            write!(out, "{}\t{}\t", task.user_id, ex.label)?;
            for (i, id) in ex.slot_ids.iter().enumerate() {
                if i > 0 {
                    out.write_all(b" ")?;
                }
                write!(out, "s{i}:{id}")?;
            }
            out.write_all(b"\n")?;
        }
    }
    Ok(())
}

pub fn save_dataset(
    tasks: &[TaskDataset],
    vocab_sizes: &[usize],
    path: &Path,
    comment: Option<&str>,
) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    write_dataset(&mut out, tasks, vocab_sizes, comment)?;
    out.flush()?;
    Ok(())
}

fn parse_header(line: &str, lineno: usize) -> Result<Vec<usize>> {
    let perr = |msg: &str| Error::Parse {
        line: lineno,
        msg: msg.to_string(),
    };
    let body = line.trim_start_matches('#');
    let mut parts = body.split_whitespace();
    let slots: usize = parts
        .next()
        .and_then(|p| p.strip_prefix("slots="))
        .ok_or_else(|| perr("header must start with slots="))?
        .parse()
        .map_err(|_| perr("invalid slot count"))?;
    let vocab: Vec<usize> = parts
        .next()
        .and_then(|p| p.strip_prefix("vocab="))
        .ok_or_else(|| perr("header missing vocab="))?
        .split(',')
        .map(|v| v.parse::<usize>().map_err(|_| perr("invalid vocab size")))
        .collect::<Result<_>>()?;
    if vocab.len() != slots {
        return Err(Error::Schema(format!(
            "header declares {slots} slots but lists {} vocab sizes",
            vocab.len()
        )));
    }
    Ok(vocab)
}

pub fn read_dataset<R: BufRead>(input: R) -> Result<DatasetFile> {
    let mut file = DatasetFile::default();
    let mut header: Option<Vec<usize>> = None;
    for (idx, line) in input.lines().enumerate() {
        let lineno = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        if line.starts_with("#slots=") {
            if header.is_some() {
                return Err(Error::Parse {
                    line: lineno,
                    msg: "duplicate header".into(),
                });
            }
            header = Some(parse_header(&line, lineno)?);
            continue;
        }
        if line.starts_with('#') {
            continue;
        }
        let vocab = header.as_ref().ok_or_else(|| Error::Parse {
            line: lineno,
            msg: "record before #slots= header".into(),
        })?;
        let (user_id, example) = parse_record(&line, lineno, vocab)?;
        match file.tasks.last_mut() {
            Some(task) if task.user_id == user_id => task.examples.push(example),
            _ => {
                if file.tasks.iter().any(|t| t.user_id == user_id) {
                    return Err(Error::Schema(format!(
                        "line {lineno}: records of user {user_id} are not contiguous"
                    )));
                }
                file.tasks.push(TaskDataset {
                    user_id,
                    examples: vec![example],
                });
            }
        }
    }
    file.vocab_sizes = header.unwrap_or_default();
    Ok(file)
}

fn parse_record(line: &str, lineno: usize, vocab: &[usize]) -> Result<(u64, Example)> {
    let perr = |msg: String| Error::Parse { line: lineno, msg };
    let mut fields = line.split('\t');
    let (Some(user), Some(label), Some(slots), None) = (fields.next(), fields.next(), fields.next(), fields.next())
    else {
        return Err(perr("expected 3 tab-separated fields".into()));
    };
    let user_id: u64 = user.parse().map_err(|_| perr(format!("invalid user id {user:?}")))?;
    let label: u8 = match label {
        "0" => 0,
        "1" => 1,
        other => return Err(perr(format!("label must be 0 or 1, got {other:?}"))),
    };
    let mut slot_ids = Vec::with_capacity(vocab.len());
    for (pos, token) in slots.split(' ').enumerate() {
        let (name, id) = token
            .split_once(':')
            .ok_or_else(|| perr(format!("malformed slot token {token:?}")))?;
        if name.strip_prefix('s').and_then(|s| s.parse::<usize>().ok()) != Some(pos) {
            return Err(perr(format!("expected slot s{pos}, got {name:?}")));
        }
        let id: u32 = id.parse().map_err(|_| perr(format!("invalid slot id {id:?}")))?;
        if pos < vocab.len() && id as usize >= vocab[pos] {
            return Err(Error::Schema(format!(
                "line {lineno}: slot {pos} id {id} outside vocab {}",
                vocab[pos]
            )));
        }
        slot_ids.push(id);
    }
    if slot_ids.len() != vocab.len() {
        return Err(Error::Schema(format!(
            "line {lineno}: {} slots, header declares {}",
            slot_ids.len(),
            vocab.len()
        )));
    }
    Ok((user_id, Example::new(slot_ids, label)))
}

pub fn load_dataset(path: &Path) -> Result<DatasetFile> {
    read_dataset(BufReader::new(File::open(path)?))
}

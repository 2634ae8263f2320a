//! Deterministic synthetic crash corpus for benchmarks and end-to-end tests.
//!
//! The generator models a bug tracker's load: a fixed set of crash
//! categories, each defined by a base stack, emitting noisy variants over a
//! time window. Some category pairs are deliberate near-duplicates that
//! differ in only a few frames, some categories emerge late so threshold
//! calibration sees genuine new-category events, and a block of extra
//! categories appears only in the final stretch of the timeline so the
//! held-out partition contains previously unseen crashes. A fraction of
//! frames carry `(File.java:NN)` source suffixes to exercise normalization.

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::trace::StackTrace;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    /// Categories present across the whole timeline.
    pub categories: usize,
    pub reports_per_category: usize,
    /// Categories confined to the tail of the timeline.
    pub late_categories: usize,
    pub reports_per_late_category: usize,
    /// Tail fraction of the timeline holding the late categories.
    pub late_window: f64,
    /// Distinct frames available overall.
    pub vocabulary_size: usize,
    /// Leading portion of the vocabulary shared by all categories
    /// (framework and runtime frames).
    pub skeleton_size: usize,
    /// Inclusive bounds on base stack depth.
    pub base_len: (usize, usize),
    /// Distinctive frames a single category draws from.
    pub pool_size: (usize, usize),
    /// Per-frame probability of an insert, delete, or substitute in a
    /// variant; split evenly across the three operations.
    pub edit_rate: f64,
    /// Leading category pairs (0,1), (2,3), ... built as near-duplicates.
    pub near_duplicate_pairs: usize,
    /// Per-frame probability of a source-location suffix.
    pub file_suffix_rate: f64,
    /// Timeline start, milliseconds since epoch.
    pub start_ms: i64,
    /// Timeline length in milliseconds.
    pub span_ms: i64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> SynthConfig {
        SynthConfig {
            categories: 50,
            reports_per_category: 40,
            late_categories: 20,
            reports_per_late_category: 4,
            // Deep enough in the tail that the whole block lands past the
            // 70/10/20 count boundaries even though report density rises
            // toward the end of the timeline.
            late_window: 0.12,
            vocabulary_size: 500,
            skeleton_size: 80,
            base_len: (20, 40),
            pool_size: (8, 14),
            edit_rate: 0.15,
            near_duplicate_pairs: 15,
            file_suffix_rate: 0.2,
            start_ms: 1_650_000_000_000,
            span_ms: 120 * 86_400_000,
            seed: 7,
        }
    }
}

const ROOTS: [&str; 4] = ["com", "org", "io", "net"];
const VENDORS: [&str; 10] = [
    "acme", "umbrella", "initech", "globex", "hooli", "vandelay", "wayne", "stark", "tyrell",
    "cyberdyne",
];
const MODULES: [&str; 20] = [
    "auth", "billing", "search", "storage", "render", "transport", "cache", "sync", "media",
    "crypto", "db", "ui", "api", "jobs", "metrics", "config", "fs", "geo", "mail", "chat",
];
const CLASSES: [&str; 25] = [
    "UserService", "SessionManager", "RequestHandler", "ConnectionPool", "QueryBuilder",
    "CacheLoader", "FileStore", "ImageDecoder", "TaskRunner", "EventBus", "RetryPolicy",
    "TokenParser", "StreamReader", "BatchWriter", "IndexScanner", "LockGuard", "RateLimiter",
    "SchemaMapper", "PacketCodec", "JobScheduler", "MetricSink", "ConfigLoader", "GeoResolver",
    "MailSender", "ChatRelay",
];
const METHODS: [&str; 30] = [
    "run", "execute", "handle", "process", "load", "store", "flush", "decode", "encode",
    "resolve", "dispatch", "submit", "poll", "acquire", "release", "parse", "validate", "merge",
    "split", "scan", "commit", "rollback", "connect", "close", "retry", "map", "reduce", "apply",
    "next", "init",
];
const FRAMEWORK_BASES: [&str; 10] = [
    "java.lang",
    "java.util.concurrent",
    "java.io",
    "org.springframework.web",
    "org.apache.http.impl",
    "io.netty.channel",
    "com.google.common.util",
    "org.hibernate.engine",
    "org.eclipse.core.runtime",
    "android.os",
];
const FRAMEWORK_CLASSES: [&str; 12] = [
    "Thread", "ThreadPoolExecutor", "FutureTask", "EventLoop", "Dispatcher", "Filter", "Handler",
    "Looper", "Worker", "Engine", "Channel", "Executor",
];

fn pick<'a, R: Rng>(rng: &mut R, items: &'a [&'a str]) -> &'a str {
    items[rng.gen_range(0..items.len())]
}

/// Draws `count` distinct frames from a morphology, by rejection.
fn draw_frames<R: Rng>(
    rng: &mut R,
    count: usize,
    taken: &mut HashSet<String>,
    mut make: impl FnMut(&mut R) -> String,
) -> Vec<String> {
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let frame = make(rng);
        if taken.insert(frame.clone()) {
            out.push(frame);
        }
    }
    out
}

struct Category {
    id: String,
    base: Vec<usize>,
    pool: Vec<usize>,
    /// Reports appear in `[start_fraction, 1.0)` of the timeline.
    start_fraction: f64,
    reports: usize,
}

/// Class-name segment of a frame, for fabricated source file names.
fn class_segment(frame: &str) -> &str {
    frame.rsplit('.').nth(1).unwrap_or("Unknown")
}

/// Generates the corpus; reports come back sorted by timestamp.
pub fn generate(config: &SynthConfig) -> Result<Vec<StackTrace>> {
    if config.categories == 0 || config.reports_per_category == 0 {
        return Err(Error::Dataset("synthetic corpus needs at least one category".into()));
    }
    if config.skeleton_size + 4 > config.vocabulary_size {
        return Err(Error::Dataset(
            "vocabulary must hold the skeleton plus distinctive frames".into(),
        ));
    }
    if config.base_len.0 < 6 || config.base_len.0 > config.base_len.1 {
        return Err(Error::Dataset("base stack depth bounds are invalid".into()));
    }
    if !(0.0..1.0).contains(&config.edit_rate) {
        return Err(Error::Dataset("edit rate must be in [0, 1)".into()));
    }
    if 2 * config.near_duplicate_pairs > config.categories {
        return Err(Error::Dataset("more near-duplicate pairs than category pairs".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    // Frame vocabulary: skeleton first, distinctive frames after.
    let mut taken = HashSet::new();
    let skeleton = draw_frames(&mut rng, config.skeleton_size, &mut taken, |rng| {
        format!(
            "{}.{}.{}",
            pick(rng, &FRAMEWORK_BASES),
            pick(rng, &FRAMEWORK_CLASSES),
            pick(rng, &METHODS)
        )
    });
    let distinctive_count = config.vocabulary_size - config.skeleton_size;
    let distinctive = draw_frames(&mut rng, distinctive_count, &mut taken, |rng| {
        format!(
            "{}.{}.{}.{}.{}",
            pick(rng, &ROOTS),
            pick(rng, &VENDORS),
            pick(rng, &MODULES),
            pick(rng, &CLASSES),
            pick(rng, &METHODS)
        )
    });

    let mut categories = Vec::with_capacity(config.categories + config.late_categories);
    for c in 0..config.categories {
        let paired_with_previous =
            c % 2 == 1 && c / 2 < config.near_duplicate_pairs;
        let (base, pool) = if paired_with_previous {
            let prev: &Category = &categories[c - 1];
            perturb_base(&mut rng, prev, distinctive.len(), config)
        } else {
            fresh_base(&mut rng, distinctive.len(), config)
        };
        categories.push(Category {
            id: format!("cat-{c:03}"),
            base,
            pool,
            start_fraction: start_fraction_for(c, config.categories),
            reports: config.reports_per_category,
        });
    }
    for c in 0..config.late_categories {
        let (base, pool) = fresh_base(&mut rng, distinctive.len(), config);
        categories.push(Category {
            id: format!("cat-{:03}", config.categories + c),
            base,
            pool,
            start_fraction: 1.0 - config.late_window,
            reports: config.reports_per_late_category,
        });
    }

    let mut drafts: Vec<(i64, Vec<String>, String)> = Vec::new();
    for category in &categories {
        for _ in 0..category.reports {
            let indices = mutate_base(&mut rng, category, config);
            let frames = materialize(&mut rng, &indices, &skeleton, &distinctive, config);
            let offset = rng.gen_range(category.start_fraction..1.0) * config.span_ms as f64;
            let timestamp = config.start_ms + offset as i64;
            drafts.push((timestamp, frames, category.id.clone()));
        }
    }
    drafts.sort_by(|a, b| (a.0, &a.2).cmp(&(b.0, &b.2)));

    let width = drafts.len().to_string().len().max(4);
    drafts
        .into_iter()
        .enumerate()
        .map(|(i, (timestamp, frames, category))| {
            StackTrace::new(
                format!("synth-{i:0width$}"),
                timestamp,
                frames,
                Some(category),
            )
        })
        .collect()
}

/// Staggers a handful of category start times so new categories keep
/// appearing mid-timeline; the two latest starts sit inside the validation
/// count window so threshold calibration sees new-category events.
fn start_fraction_for(c: usize, categories: usize) -> f64 {
    match categories.saturating_sub(c + 1) {
        0 => 0.82,
        1 => 0.79,
        2 => 0.70,
        3 => 0.62,
        4 => 0.50,
        5 => 0.30,
        _ => 0.0,
    }
}

fn fresh_base<R: Rng>(
    rng: &mut R,
    distinctive_count: usize,
    config: &SynthConfig,
) -> (Vec<usize>, Vec<usize>) {
    let pool_size = rng.gen_range(config.pool_size.0..=config.pool_size.1);
    let mut pool = Vec::with_capacity(pool_size);
    let mut seen = HashSet::new();
    while pool.len() < pool_size {
        // Pool entries index `distinctive`; offset past the skeleton.
        let f = config.skeleton_size + rng.gen_range(0..distinctive_count);
        if seen.insert(f) {
            pool.push(f);
        }
    }
    let len = rng.gen_range(config.base_len.0..=config.base_len.1);
    (build_stack(rng, len, &pool, config), pool)
}

/// Near-duplicate sibling: same stack shape with a few frames swapped out
/// and a partially rotated pool.
fn perturb_base<R: Rng>(
    rng: &mut R,
    prev: &Category,
    distinctive_count: usize,
    config: &SynthConfig,
) -> (Vec<usize>, Vec<usize>) {
    let mut pool = prev.pool.clone();
    let replace = (pool.len() / 4).max(2);
    for _ in 0..replace {
        let slot = rng.gen_range(0..pool.len());
        pool[slot] = config.skeleton_size + rng.gen_range(0..distinctive_count);
    }
    let mut base = prev.base.clone();
    let swaps = 3.min(base.len());
    for _ in 0..swaps {
        let slot = rng.gen_range(0..base.len());
        base[slot] = pool[rng.gen_range(0..pool.len())];
    }
    (base, pool)
}

/// Base stack layout: a distinctive crash site on top, a body mixing the
/// category pool with occasional framework frames, an entry-point tail.
fn build_stack<R: Rng>(
    rng: &mut R,
    len: usize,
    pool: &[usize],
    config: &SynthConfig,
) -> Vec<usize> {
    let mut stack = Vec::with_capacity(len);
    for _ in 0..2 {
        stack.push(pool[rng.gen_range(0..pool.len())]);
    }
    for _ in 0..len.saturating_sub(5) {
        if rng.gen::<f64>() < 0.2 {
            stack.push(rng.gen_range(0..config.skeleton_size));
        } else {
            stack.push(pool[rng.gen_range(0..pool.len())]);
        }
    }
    // Entry points come from the first few skeleton frames so every trace
    // bottoms out in the same runtime.
    for _ in 0..3 {
        stack.push(rng.gen_range(0..8.min(config.skeleton_size)));
    }
    stack
}

/// Applies insert/delete/substitute noise to the category base.
fn mutate_base<R: Rng>(rng: &mut R, category: &Category, config: &SynthConfig) -> Vec<usize> {
    let op_rate = config.edit_rate / 3.0;
    let mut out = Vec::with_capacity(category.base.len() + 4);
    for &frame in &category.base {
        if rng.gen::<f64>() < op_rate {
            out.push(category.pool[rng.gen_range(0..category.pool.len())]);
        }
        let r = rng.gen::<f64>();
        if r < op_rate {
            continue;
        }
        if r < 2.0 * op_rate {
            out.push(category.pool[rng.gen_range(0..category.pool.len())]);
            continue;
        }
        out.push(frame);
    }
    if out.len() < 3 {
        out.extend_from_slice(&category.base[..3.min(category.base.len())]);
    }
    out
}

/// Renders vocabulary indices to frame strings, sprinkling source suffixes.
fn materialize<R: Rng>(
    rng: &mut R,
    indices: &[usize],
    skeleton: &[String],
    distinctive: &[String],
    config: &SynthConfig,
) -> Vec<String> {
    indices
        .iter()
        .map(|&i| {
            let frame = if i < config.skeleton_size {
                &skeleton[i]
            } else {
                &distinctive[i - config.skeleton_size]
            };
            if rng.gen::<f64>() < config.file_suffix_rate {
                format!("{}({}.java:{})", frame, class_segment(frame), rng.gen_range(10..500))
            } else {
                frame.clone()
            }
        })
        .collect()
}

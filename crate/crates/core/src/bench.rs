//! Load generator for the image processors and the geolocation tagger.
//!
//! A load of `n` items is pushed as one burst onto the target's input queue;
//! latency is the wall time from the first push to the last output and
//! throughput is `n / latency`. Each repeat builds the target afresh.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::broker::Queue;
use crate::classifiers::{BinaryClassifier, StubClassifier};
use crate::dedup::{
    filter_and_insert, FeatureExtractor, FeatureIndex, StubExtractor, VectorIndex, DEFAULT_DIM, DEFAULT_THRESHOLD,
};
use crate::geo::{Delayed, DictionaryTagger, Gazetteer, GazetteerGeocoder, GeoTagger, NerRouter, Place, PlaceKind};
use crate::model::{EntityKind, ImageRecord, ImageRef, Task, Tweet};

/// Per-load timeout, in seconds, read from the environment.
pub const TIMEOUT_ENV: &str = "SLIDESTREAM_BENCH_TIMEOUT_SECS";
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(60);

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("bad load spec `{0}`")]
    Loads(String),
    #[error("unknown bench target `{0}`")]
    Target(String),
    #[error("{0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

#[derive(Debug, Clone, PartialEq)]
pub enum BenchTarget {
    /// Feature extraction plus nearest-neighbour filtering, with the index
    /// pre-filled with `prefill` unrelated vectors before each repeat.
    DuplicateFilter {
        dim: usize,
        prefill: usize,
    },
    JunkFilter {
        cost: Duration,
    },
    LandslideDetector {
        cost: Duration,
    },
    /// Requests cycle over `unique_keys` place names; every geocoder call
    /// takes `delay`. With a cache, each repeat runs a cold then a warm burst.
    Geolocation {
        cache: bool,
        delay: Duration,
        unique_keys: usize,
    },
}

impl BenchTarget {
    pub const NAMES: [&'static str; 5] = [
        "duplicate_filter",
        "junk_filter",
        "landslide_detector",
        "geolocation_tagger_without_cache",
        "geolocation_tagger_with_cache",
    ];

    /// Target with default parameters.
    pub fn from_name(name: &str) -> Result<Self, BenchError> {
        Ok(match name {
            "duplicate_filter" => BenchTarget::DuplicateFilter { dim: DEFAULT_DIM, prefill: 0 },
            "junk_filter" => BenchTarget::JunkFilter { cost: Duration::from_millis(1) },
            "landslide_detector" => BenchTarget::LandslideDetector { cost: Duration::from_millis(1) },
            "geolocation_tagger_without_cache" => {
                BenchTarget::Geolocation { cache: false, delay: Duration::from_millis(10), unique_keys: 16 }
            }
            "geolocation_tagger_with_cache" => {
                BenchTarget::Geolocation { cache: true, delay: Duration::from_millis(10), unique_keys: 16 }
            }
            other => return Err(BenchError::Target(other.to_string())),
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            BenchTarget::DuplicateFilter { .. } => "duplicate_filter",
            BenchTarget::JunkFilter { .. } => "junk_filter",
            BenchTarget::LandslideDetector { .. } => "landslide_detector",
            BenchTarget::Geolocation { cache: false, .. } => "geolocation_tagger_without_cache",
            BenchTarget::Geolocation { cache: true, .. } => "geolocation_tagger_with_cache",
        }
    }

    fn validate(&self) -> Result<(), BenchError> {
        match self {
            BenchTarget::DuplicateFilter { dim: 0, .. } => Err(BenchError::Invalid("dim must be >= 1".into())),
            BenchTarget::Geolocation { unique_keys: 0, .. } => {
                Err(BenchError::Invalid("unique_keys must be >= 1".into()))
            }
            _ => Ok(()),
        }
    }
}

/// Parses `2^a..2^b`, `2^k`, or a comma-separated list of counts.
pub fn parse_loads(spec: &str) -> Result<Vec<usize>, BenchError> {
    let bad = || BenchError::Loads(spec.to_string());
    let pow = |s: &str| -> Result<usize, BenchError> {
        let s = s.trim();
        match s.strip_prefix("2^") {
            Some(e) => {
                let e: u32 = e.parse().map_err(|_| bad())?;
                1usize.checked_shl(e).filter(|_| e < usize::BITS).ok_or_else(bad)
            }
            None => s.parse().map_err(|_| bad()),
        }
    };
    let loads = if let Some((a, b)) = spec.split_once("..") {
        let (a, b) = (pow(a)?, pow(b)?);
        if !a.is_power_of_two() || !b.is_power_of_two() || a > b {
            return Err(bad());
        }
        (a.trailing_zeros()..=b.trailing_zeros()).map(|e| 1usize << e).collect()
    } else {
        spec.split(',').map(pow).collect::<Result<Vec<_>, _>>()?
    };
    if loads.is_empty() || loads.contains(&0) {
        return Err(bad());
    }
    Ok(loads)
}

#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub target: BenchTarget,
    pub loads: Vec<usize>,
    pub repeats: usize,
    pub seed: u64,
    pub timeout: Duration,
    /// Consumers of the input queue. The duplicate filter always uses one.
    pub workers: usize,
    /// Items per second for steady-rate submission; `None` is a burst.
    pub rate: Option<f64>,
}

impl BenchConfig {
    pub fn new(target: BenchTarget, loads: Vec<usize>) -> Self {
        BenchConfig { target, loads, repeats: 5, seed: 42, timeout: timeout_from_env(), workers: 1, rate: None }
    }
}

pub fn timeout_from_env() -> Duration {
    std::env::var(TIMEOUT_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<f64>().ok())
        .filter(|s| *s > 0.0)
        .map(Duration::from_secs_f64)
        .unwrap_or(DEFAULT_TIMEOUT)
}

/// Results for one load of one series across all repeats.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LoadPoint {
    /// Target name, with `/cold` or `/warm` for the cached geolocation series.
    pub target: String,
    pub load: usize,
    pub repeats: usize,
    /// Per repeat; `None` when the repeat timed out.
    pub latencies_s: Vec<Option<f64>>,
    pub throughputs_ips: Vec<Option<f64>>,
    pub mean_latency_s: Option<f64>,
    pub std_latency_s: Option<f64>,
    pub mean_throughput_ips: Option<f64>,
    pub std_throughput_ips: Option<f64>,
    pub failed_repeats: usize,
}

/// Mean and sample standard deviation (n - 1); `None` when empty.
pub fn mean_std(xs: &[f64]) -> Option<(f64, f64)> {
    if xs.is_empty() {
        return None;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let std = if xs.len() < 2 { 0.0 } else { (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() };
    Some((mean, std))
}

impl LoadPoint {
    fn new(target: String, load: usize, latencies: Vec<Option<f64>>) -> Self {
        let throughputs: Vec<Option<f64>> = latencies.iter().map(|l| l.map(|l| load as f64 / l)).collect();
        let ok_l: Vec<f64> = latencies.iter().flatten().copied().collect();
        let ok_t: Vec<f64> = throughputs.iter().flatten().copied().collect();
        let (ml, sl) = mean_std(&ok_l).unzip();
        let (mt, st) = mean_std(&ok_t).unzip();
        LoadPoint {
            target,
            load,
            repeats: latencies.len(),
            failed_repeats: latencies.iter().filter(|l| l.is_none()).count(),
            latencies_s: latencies,
            throughputs_ips: throughputs,
            mean_latency_s: ml,
            std_latency_s: sl,
            mean_throughput_ips: mt,
            std_throughput_ips: st,
        }
    }
}

/// Outcome of one burst.
#[derive(Debug, Clone)]
pub struct Burst {
    pub latency: Option<Duration>,
    /// `(item index, output)` sorted by index.
    pub outputs: Vec<(usize, String)>,
}

/// Pushes `load` item indices onto a fresh queue drained by `workers`
/// threads running `process`, and times the burst to its last output.
pub fn run_burst(
    load: usize,
    workers: usize,
    timeout: Duration,
    rate: Option<f64>,
    process: &(dyn Fn(usize) -> String + Sync),
) -> Burst {
    let input: Queue<usize> = Queue::new("bench_input", load.max(1));
    let output: Queue<(usize, String)> = Queue::new("bench_output", load.max(1));
    let stop = AtomicBool::new(false);
    let (latency, mut outputs) = thread::scope(|s| {
        for _ in 0..workers.max(1) {
            s.spawn(|| {
                while let Some(i) = input.recv() {
                    if stop.load(Ordering::Relaxed) {
                        break;
                    }
                    if output.push((i, process(i))).is_err() {
                        break;
                    }
                }
            });
        }
        let start = Instant::now();
        let deadline = start + timeout;
        for i in 0..load {
            if let Some(rate) = rate {
                let due = start + Duration::from_secs_f64(i as f64 / rate);
                if let Some(wait) = due.checked_duration_since(Instant::now()) {
                    thread::sleep(wait);
                }
            }
            input.push(i).expect("input queue open during submission");
        }
        input.close();
        let mut outputs = Vec::with_capacity(load);
        while outputs.len() < load {
            let Some(left) = deadline.checked_duration_since(Instant::now()) else { break };
            match output.pop(left) {
                Ok(Some(o)) => outputs.push(o),
                Ok(None) | Err(_) => break,
            }
        }
        let elapsed = start.elapsed();
        let complete = outputs.len() == load;
        if !complete {
            stop.store(true, Ordering::Relaxed);
            output.close();
        }
        (complete.then_some(elapsed), outputs)
    });
    outputs.sort_by_key(|(i, _)| *i);
    Burst { latency, outputs }
}

fn item_rng(seed: u64, load: usize, repeat: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ ((load as u64) << 20) ^ ((repeat as u64) << 48))
}

/// Image payloads for a burst; roughly one in ten repeats an earlier item.
fn image_inputs(rng: &mut ChaCha8Rng, load: usize) -> Vec<(ImageRecord, Vec<u8>)> {
    let mut bytes: Vec<Vec<u8>> = Vec::with_capacity(load);
    for i in 0..load {
        let b = if i > 0 && rng.gen_bool(0.1) {
            bytes[rng.gen_range(0..i)].clone()
        } else {
            let mut b = vec![0u8; 64];
            rng.fill(&mut b[..]);
            b
        };
        bytes.push(b);
    }
    bytes
        .into_iter()
        .enumerate()
        .map(|(i, b)| {
            let r = ImageRef { tweet_id: format!("t{i}"), url: format!("bench://image/{i}") };
            (ImageRecord::fetched(format!("img{i}"), &r, String::new(), b.len() as u64), b)
        })
        .collect()
}

fn synthetic_gazetteer(keys: usize) -> Gazetteer {
    let places = (0..keys)
        .map(|k| Place {
            name: format!("Town{k}"),
            kind: PlaceKind::City,
            country: Some(format!("Country{}", k % 7)),
            state: Some(format!("State{}", k % 11)),
            county: None,
            city: Some(format!("Town{k}")),
            lat: -80.0 + 160.0 * k as f64 / keys as f64,
            lon: 0.0,
        })
        .collect();
    Gazetteer::from_places(places).expect("synthetic gazetteer is valid")
}

/// Requests cycle through every key, in a seeded shuffled order.
fn geo_inputs(rng: &mut ChaCha8Rng, load: usize, keys: usize) -> Vec<Tweet> {
    let mut order: Vec<usize> = (0..load).map(|i| i % keys).collect();
    order.shuffle(rng);
    order
        .into_iter()
        .enumerate()
        .map(|(i, key)| Tweet {
            id: format!("{i}"),
            text: "landslide blocks the road".into(),
            lang: "en".into(),
            created_at: 0,
            gps: None,
            place_name: None,
            author_name: String::new(),
            author_location: Some(format!("Town{key}")),
            author_description: None,
            image_urls: vec![],
        })
        .collect()
}

fn geotagger(keys: usize, delay: Duration, cache: bool) -> GeoTagger {
    let gazetteer = Arc::new(synthetic_gazetteer(keys));
    let mut tagger = DictionaryTagger::new();
    for p in gazetteer.places() {
        tagger.add(&p.name, EntityKind::Location);
    }
    let geocoder = Delayed::new(GazetteerGeocoder::new(gazetteer), delay);
    let t = GeoTagger::new(Arc::new(geocoder), Arc::new(NerRouter::new(tagger)));
    if cache {
        t.with_cache(keys.max(1) * 2)
    } else {
        t
    }
}

/// Series name, burst result pairs for one repeat of one load.
type RepeatResult = Vec<(String, Burst)>;

/// Runs one repeat of `cfg.target` at `load`, building the target fresh.
pub fn run_repeat(cfg: &BenchConfig, load: usize, repeat: usize) -> RepeatResult {
    let mut rng = item_rng(cfg.seed, load, repeat);
    let name = cfg.target.name().to_string();
    match &cfg.target {
        BenchTarget::DuplicateFilter { dim, prefill } => {
            let extractor = StubExtractor::new(*dim, cfg.seed);
            let mut index = FeatureIndex::new(*dim);
            for k in 0..*prefill {
                let id = format!("prefill{k}");
                index.insert(&id, &extractor.vector_for_seed(&id, rng.gen())).expect("prefill dims match");
            }
            let inputs = image_inputs(&mut rng, load);
            let index = Mutex::new(index);
            let process = |i: usize| {
                let (rec, bytes) = &inputs[i];
                let fv = extractor.extract(&rec.image_id, bytes).expect("stub extraction");
                let mut index = index.lock().unwrap_or_else(|e| e.into_inner());
                let v = filter_and_insert(&mut *index, &rec.image_id, &fv, DEFAULT_THRESHOLD).expect("dims match");
                serde_json::to_string(&v).expect("verdict serializes")
            };
            vec![(name, run_burst(load, 1, cfg.timeout, cfg.rate, &process))]
        }
        BenchTarget::JunkFilter { cost } | BenchTarget::LandslideDetector { cost } => {
            let task = if matches!(cfg.target, BenchTarget::JunkFilter { .. }) { Task::Junk } else { Task::Landslide };
            let extractor: Arc<dyn FeatureExtractor> = Arc::new(StubExtractor::new(64, cfg.seed));
            let classifier = StubClassifier::seeded(task, extractor, cfg.seed, 0.0).with_cost(*cost);
            let inputs = image_inputs(&mut rng, load);
            let process = |i: usize| {
                let (rec, bytes) = &inputs[i];
                let c = classifier.classify(rec, bytes).expect("stub classification");
                serde_json::to_string(&c).expect("classification serializes")
            };
            vec![(name, run_burst(load, cfg.workers, cfg.timeout, cfg.rate, &process))]
        }
        BenchTarget::Geolocation { cache, delay, unique_keys } => {
            let tagger = geotagger(*unique_keys, *delay, *cache);
            let inputs = geo_inputs(&mut rng, load, *unique_keys);
            let process = |i: usize| serde_json::to_string(&tagger.geotag(&inputs[i])).expect("geotag serializes");
            if *cache {
                let cold = run_burst(load, cfg.workers, cfg.timeout, cfg.rate, &process);
                let warm = run_burst(load, cfg.workers, cfg.timeout, cfg.rate, &process);
                vec![(format!("{name}/cold"), cold), (format!("{name}/warm"), warm)]
            } else {
                vec![(name, run_burst(load, cfg.workers, cfg.timeout, cfg.rate, &process))]
            }
        }
    }
}

/// Outputs for a load computed one item at a time on the calling thread,
/// for comparison with what a timed burst produced.
pub fn reference_outputs(cfg: &BenchConfig, load: usize, repeat: usize) -> Vec<(usize, String)> {
    let sequential = BenchConfig { workers: 1, timeout: Duration::from_secs(3600), rate: None, ..cfg.clone() };
    let mut runs = run_repeat(&sequential, load, repeat);
    runs.swap_remove(0).1.outputs
}

/// Sweeps every load `cfg.repeats` times. Timed-out repeats are recorded
/// and the sweep continues.
pub fn run_bench(cfg: &BenchConfig) -> Result<Vec<LoadPoint>, BenchError> {
    cfg.target.validate()?;
    if cfg.loads.is_empty() || cfg.loads.contains(&0) {
        return Err(BenchError::Invalid("loads must be non-empty and >= 1".into()));
    }
    if cfg.repeats == 0 {
        return Err(BenchError::Invalid("repeats must be >= 1".into()));
    }
    let mut points = Vec::new();
    for &load in &cfg.loads {
        let mut series: Vec<(String, Vec<Option<f64>>)> = Vec::new();
        for repeat in 0..cfg.repeats {
            for (name, burst) in run_repeat(cfg, load, repeat) {
                let latency = burst.latency.map(|d| d.as_secs_f64().max(f64::MIN_POSITIVE));
                if latency.is_none() {
                    log::warn!("{name}: load {load} repeat {repeat} timed out after {:?}", cfg.timeout);
                }
                match series.iter_mut().find(|(n, _)| *n == name) {
                    Some((_, v)) => v.push(latency),
                    None => series.push((name, vec![latency])),
                }
            }
        }
        points.extend(series.into_iter().map(|(name, lat)| LoadPoint::new(name, load, lat)));
    }
    Ok(points)
}

pub const CSV_HEADER: &str = "target,load,repeat,latency_s,throughput_ips,status";

/// One row per (point, repeat); timed-out repeats have empty numbers and
/// status `timeout`.
pub fn to_csv(points: &[LoadPoint]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for p in points {
        for (r, (l, t)) in p.latencies_s.iter().zip(&p.throughputs_ips).enumerate() {
            let num = |x: &Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
            let status = if l.is_some() { "ok" } else { "timeout" };
            let _ = writeln!(out, "{},{},{},{},{},{}", p.target, p.load, r, num(l), num(t), status);
        }
    }
    out
}

/// Writes `bench.csv` and `summary.json` into `dir`.
pub fn emit_report(points: &[LoadPoint], dir: &Path) -> Result<(PathBuf, PathBuf), BenchError> {
    if points.is_empty() {
        return Err(BenchError::Invalid("no points to report".into()));
    }
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| BenchError::Io { path, source }
    };
    fs::create_dir_all(dir).map_err(io(dir))?;
    let csv = dir.join("bench.csv");
    fs::write(&csv, to_csv(points)).map_err(io(&csv))?;
    let json = dir.join("summary.json");
    fs::write(&json, serde_json::to_string_pretty(points).expect("points serialize")).map_err(io(&json))?;
    Ok((csv, json))
}

/// Kendall rank correlation (tau-a) between two equal-length series.
pub fn kendall_tau(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len().min(ys.len());
    if n < 2 {
        return 1.0;
    }
    let mut score = 0i64;
    for i in 0..n {
        for j in i + 1..n {
            let s = (xs[j] - xs[i]).signum() * (ys[j] - ys[i]).signum();
            score += s as i64;
        }
    }
    score as f64 / (n * (n - 1) / 2) as f64
}

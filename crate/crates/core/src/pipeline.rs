//! Pipeline wiring: tweet collector, parallel image collectors, the image
//! manager's fan-out to the three image processors, the verdict join, and
//! tweet-side enrichment of merged records.
//!
//! Stage graph (queues are bounded; every arrow blocks when full):
//!
//! ```text
//! source -> tweet collector -> refs -> image collectors (N) -> fetched
//!   -> sequencer -> images -> dispatcher -+-> duplicate filter (1) -+
//!                                         +-> junk filter (N)       +-> join -> joiner -> image index
//!                                         +-> landslide det. (N)    +
//! ```
//!
//! The dispatcher announces each image on the join queue before fanning it
//! out, so the joiner always sees the registration ahead of its verdicts.
//! Shutdown cascades: each stage closes its output once its input is closed
//! and drained.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::broker::{Channel, Queue, DEFAULT_QUEUE_CAPACITY};
use crate::classifiers::{BinaryClassifier, ClassifyError, LookupClassifier, StubClassifier};
use crate::collectors::{
    run_tweet_collector, CollectError, DirFetcher, ImageCollector, ImageCollectorSummary, KeywordList, ReplaySource,
    RetryPolicy, TweetCollectorSummary,
};
use crate::dedup::{
    filter_and_insert, DedupError, FeatureExtractor, FeatureIndex, PrecomputedExtractor, StubExtractor, VectorIndex,
    DEFAULT_THRESHOLD,
};
use crate::geo::{Gazetteer, GazetteerGeocoder, GeoError, GeoTagger, NerRouter};
use crate::model::{Classification, DuplicateVerdict, GeoTag, ImageRecord, ImageRef, Label, Task, Tweet};
use crate::storage::{DocStore, StoreError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Collect(#[from] CollectError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Dedup(#[from] DedupError),
    #[error(transparent)]
    Classify(#[from] ClassifyError),
    #[error(transparent)]
    Geo(#[from] GeoError),
}

// ---------------------------------------------------------------------------
// Configuration

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "backend", rename_all = "snake_case", deny_unknown_fields)]
pub enum ExtractorConfig {
    /// Digest-seeded Gaussian vectors.
    Stub { dim: usize, seed: u64 },
    /// CSV of `image_id,v0,...` computed elsewhere.
    Precomputed { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "backend", rename_all = "snake_case", deny_unknown_fields)]
pub enum ClassifierConfig {
    /// CSV of `image_id,score` with the positive-class probability.
    Lookup { path: PathBuf },
    /// Seeded linear model over the duplicate filter's features.
    Stub {
        seed: u64,
        #[serde(default)]
        bias: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorkerCounts {
    pub image_collectors: usize,
    pub duplicate_filter: usize,
    pub junk_filter: usize,
    pub landslide_detector: usize,
}

impl Default for WorkerCounts {
    fn default() -> Self {
        WorkerCounts { image_collectors: 4, duplicate_filter: 1, junk_filter: 2, landslide_detector: 2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CacheConfig {
    pub geocode: usize,
    pub ner: usize,
}

impl Default for CacheConfig {
    fn default() -> Self {
        CacheConfig { geocode: 10_000, ner: 10_000 }
    }
}

/// Pipeline settings, read from TOML. Relative paths resolve against the
/// directory holding the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    /// CSV of `keyword,language`.
    pub keywords: PathBuf,
    /// NDJSON post file; the CLI's `--corpus` overrides it.
    #[serde(default)]
    pub corpus: Option<PathBuf>,
    /// Documents per second for replay; unthrottled when absent.
    #[serde(default)]
    pub replay_rate: Option<f64>,
    /// Directory of `<image_id>.bin` fixtures served in place of HTTP.
    pub fixtures: PathBuf,
    /// Where stores, fetched images and the report go; the CLI's `--out` overrides it.
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    #[serde(default = "default_capacity")]
    pub queue_capacity: usize,
    #[serde(default = "default_threshold")]
    pub duplicate_threshold: f64,
    #[serde(default = "default_retries")]
    pub fetch_retries: u32,
    pub extractor: ExtractorConfig,
    pub junk: ClassifierConfig,
    pub landslide: ClassifierConfig,
    #[serde(default)]
    pub gazetteer: Option<PathBuf>,
    /// Directory of `<lang>.tsv` NER dictionaries.
    #[serde(default)]
    pub ner_dir: Option<PathBuf>,
    #[serde(default)]
    pub cache: CacheConfig,
    #[serde(default)]
    pub workers: WorkerCounts,
}

fn default_capacity() -> usize {
    DEFAULT_QUEUE_CAPACITY
}

fn default_threshold() -> f64 {
    DEFAULT_THRESHOLD
}

fn default_retries() -> u32 {
    RetryPolicy::default().attempts.saturating_sub(1)
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self, PipelineError> {
        toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, PipelineError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| PipelineError::Io { path: path.to_path_buf(), source })?;
        let mut cfg = Self::from_toml(&text)?;
        if let Some(base) = path.parent() {
            cfg.resolve_relative(base);
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    fn resolve_relative(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.keywords);
        fix(&mut self.fixtures);
        for p in [&mut self.corpus, &mut self.out_dir, &mut self.gazetteer, &mut self.ner_dir].into_iter().flatten() {
            fix(p);
        }
        if let ExtractorConfig::Precomputed { path } = &mut self.extractor {
            fix(path);
        }
        for c in [&mut self.junk, &mut self.landslide] {
            if let ClassifierConfig::Lookup { path } = c {
                fix(path);
            }
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: &str| Err(PipelineError::Config(m.to_string()));
        if !(self.duplicate_threshold >= 0.0) {
            return bad("duplicate_threshold must be >= 0");
        }
        let w = &self.workers;
        if w.image_collectors == 0 || w.junk_filter == 0 || w.landslide_detector == 0 {
            return bad("worker counts must be >= 1");
        }
        if w.duplicate_filter != 1 {
            return bad("duplicate_filter workers must be exactly 1: inserts into the feature index are serialized");
        }
        if self.queue_capacity == 0 {
            return bad("queue_capacity must be >= 1");
        }
        if let Some(rate) = self.replay_rate {
            if !(rate > 0.0) {
                return bad("replay_rate must be > 0");
            }
        }
        if let ExtractorConfig::Stub { dim: 0, .. } = self.extractor {
            return bad("extractor dim must be >= 1");
        }
        if self.corpus.is_none() {
            return bad("no corpus given");
        }
        if self.out_dir.is_none() {
            return bad("no output directory given");
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Processors and the join

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProcessorKind {
    Duplicate,
    Junk,
    Landslide,
}

impl ProcessorKind {
    pub const ALL: [ProcessorKind; 3] = [ProcessorKind::Duplicate, ProcessorKind::Junk, ProcessorKind::Landslide];

    pub fn as_str(self) -> &'static str {
        match self {
            ProcessorKind::Duplicate => "duplicate_filter",
            ProcessorKind::Junk => "junk_filter",
            ProcessorKind::Landslide => "landslide_detector",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum VerdictValue {
    Duplicate(DuplicateVerdict),
    Classification(Classification),
    /// The processor could not produce a verdict; the merged record keeps
    /// that field empty.
    Failed(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Verdict {
    pub image_id: String,
    pub kind: ProcessorKind,
    pub value: VerdictValue,
}

#[derive(Debug, Clone)]
pub enum JoinEvent {
    Registered(ImageRecord),
    Verdict(Verdict),
}

pub trait ImageProcessor: Send + Sync {
    fn kind(&self) -> ProcessorKind;
    fn process(&self, image: &ImageRecord) -> VerdictValue;
}

fn read_image(image: &ImageRecord) -> Result<Vec<u8>, String> {
    fs::read(&image.local_path).map_err(|e| format!("{}: {e}", image.local_path))
}

/// Near-duplicate filter over a feature index. Queries and inserts are
/// serialized through one lock, so verdicts depend only on arrival order.
pub struct DuplicateFilter {
    extractor: Arc<dyn FeatureExtractor>,
    index: Mutex<Box<dyn VectorIndex>>,
    threshold: f64,
}

impl DuplicateFilter {
    pub fn new(extractor: Arc<dyn FeatureExtractor>, index: Box<dyn VectorIndex>, threshold: f64) -> Self {
        DuplicateFilter { extractor, index: Mutex::new(index), threshold }
    }

    pub fn index_len(&self) -> usize {
        self.index.lock().unwrap_or_else(|e| e.into_inner()).len()
    }
}

impl ImageProcessor for DuplicateFilter {
    fn kind(&self) -> ProcessorKind {
        ProcessorKind::Duplicate
    }

    fn process(&self, image: &ImageRecord) -> VerdictValue {
        let run = || -> Result<DuplicateVerdict, String> {
            let bytes = read_image(image)?;
            let fv = self.extractor.extract(&image.image_id, &bytes).map_err(|e| e.to_string())?;
            let mut index = self.index.lock().unwrap_or_else(|e| e.into_inner());
            filter_and_insert(index.as_mut(), &image.image_id, &fv, self.threshold).map_err(|e| e.to_string())
        };
        run().map_or_else(VerdictValue::Failed, VerdictValue::Duplicate)
    }
}

/// Adapts a [`BinaryClassifier`] to the processor interface.
pub struct ClassifierProcessor {
    classifier: Arc<dyn BinaryClassifier>,
}

impl ClassifierProcessor {
    pub fn new(classifier: Arc<dyn BinaryClassifier>) -> Self {
        ClassifierProcessor { classifier }
    }
}

impl ImageProcessor for ClassifierProcessor {
    fn kind(&self) -> ProcessorKind {
        match self.classifier.task() {
            Task::Junk => ProcessorKind::Junk,
            Task::Landslide => ProcessorKind::Landslide,
        }
    }

    fn process(&self, image: &ImageRecord) -> VerdictValue {
        read_image(image)
            .and_then(|bytes| self.classifier.classify(image, &bytes).map_err(|e| e.to_string()))
            .map_or_else(VerdictValue::Failed, VerdictValue::Classification)
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum JoinError {
    #[error("image {0} registered twice")]
    AlreadyRegistered(String),
    #[error("verdict for unknown image {0}")]
    UnknownImage(String),
    #[error("second {kind:?} verdict for image {image_id}")]
    DuplicateVerdict { image_id: String, kind: ProcessorKind },
    #[error("{kind:?} verdict for image {image_id} has the wrong shape")]
    MismatchedVerdict { image_id: String, kind: ProcessorKind },
}

#[derive(Debug)]
struct Pending {
    record: ImageRecord,
    received: [bool; 3],
}

/// Per-image verdict accumulator. An entry completes, and is removed, once
/// all three processors have reported.
#[derive(Debug, Default)]
pub struct JoinState {
    pending: HashMap<String, Pending>,
}

impl JoinState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.pending.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pending.is_empty()
    }

    pub fn register(&mut self, record: ImageRecord) -> Result<(), JoinError> {
        if self.pending.contains_key(&record.image_id) {
            return Err(JoinError::AlreadyRegistered(record.image_id));
        }
        self.pending.insert(record.image_id.clone(), Pending { record, received: [false; 3] });
        Ok(())
    }

    /// Applies one verdict; returns the merged record when it completes the image.
    pub fn apply(&mut self, v: Verdict) -> Result<Option<ImageRecord>, JoinError> {
        let entry = self.pending.get_mut(&v.image_id).ok_or_else(|| JoinError::UnknownImage(v.image_id.clone()))?;
        let slot = v.kind as usize;
        if entry.received[slot] {
            return Err(JoinError::DuplicateVerdict { image_id: v.image_id, kind: v.kind });
        }
        let mismatch = || JoinError::MismatchedVerdict { image_id: v.image_id.clone(), kind: v.kind };
        let r = &mut entry.record;
        match (v.kind, &v.value) {
            (_, VerdictValue::Failed(reason)) => log::warn!("{} failed on {}: {reason}", v.kind.as_str(), v.image_id),
            (ProcessorKind::Duplicate, VerdictValue::Duplicate(d)) => r.duplicate = Some(d.clone()),
            (ProcessorKind::Junk, VerdictValue::Classification(c)) if c.task == Task::Junk => r.junk = Some(*c),
            (ProcessorKind::Landslide, VerdictValue::Classification(c)) if c.task == Task::Landslide => {
                r.landslide = Some(*c)
            }
            _ => return Err(mismatch()),
        }
        entry.received[slot] = true;
        if entry.received.iter().all(|&x| x) {
            Ok(self.pending.remove(&v.image_id).map(|p| p.record))
        } else {
            Ok(None)
        }
    }

    pub fn pending_ids(&self) -> Vec<String> {
        let mut ids: Vec<_> = self.pending.keys().cloned().collect();
        ids.sort();
        ids
    }
}

/// Adds tweet-side fields to a completed record just before it is persisted.
pub trait Enricher: Send + Sync {
    fn enrich(&self, record: &mut ImageRecord);
}

/// Looks the record's tweet up in the tweet index (an on-demand read) and
/// attaches its geotag and author type.
pub struct TweetEnricher {
    tweets: Arc<DocStore>,
    geo: GeoTagger,
}

impl TweetEnricher {
    pub fn new(tweets: Arc<DocStore>, geo: GeoTagger) -> Self {
        TweetEnricher { tweets, geo }
    }

    pub fn geotagger(&self) -> &GeoTagger {
        &self.geo
    }
}

impl Enricher for TweetEnricher {
    fn enrich(&self, record: &mut ImageRecord) {
        match self.tweets.get::<Tweet>(&record.tweet_id) {
            Ok(Some(tweet)) => {
                record.geo = Some(self.geo.geotag(&tweet));
                record.user_type = Some(crate::geo::classify_user_type(&tweet.author_name, self.geo.ner()));
            }
            Ok(None) => {
                log::warn!("enricher: tweet {} not in the tweet index", record.tweet_id);
                record.geo = Some(GeoTag::none());
            }
            Err(e) => {
                log::error!("enricher: reading tweet {}: {e}", record.tweet_id);
                record.geo = Some(GeoTag::none());
            }
        }
    }
}

/// Events broadcast while the pipeline runs.
#[derive(Debug, Clone, PartialEq)]
pub enum PipelineEvent {
    ImageMerged { image_id: String, landslide: bool },
    StageFinished { stage: String },
}

/// The three processors and their worker counts.
pub struct ImageStage {
    pub duplicate: Arc<dyn ImageProcessor>,
    pub junk: Arc<dyn ImageProcessor>,
    pub landslide: Arc<dyn ImageProcessor>,
    pub junk_workers: usize,
    pub landslide_workers: usize,
    pub queue_capacity: usize,
    pub enricher: Option<Arc<dyn Enricher>>,
    pub events: Option<Channel<PipelineEvent>>,
}

impl ImageStage {
    pub fn new(
        duplicate: Arc<dyn ImageProcessor>,
        junk: Arc<dyn ImageProcessor>,
        landslide: Arc<dyn ImageProcessor>,
    ) -> Self {
        ImageStage {
            duplicate,
            junk,
            landslide,
            junk_workers: 1,
            landslide_workers: 1,
            queue_capacity: DEFAULT_QUEUE_CAPACITY,
            enricher: None,
            events: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Tally {
    pub merged: u64,
    pub duplicates: u64,
    pub junk: u64,
    pub relevant: u64,
    pub landslide: u64,
    pub not_landslide: u64,
    /// Junk-filter survivors that are also duplicates.
    pub relevant_duplicates: u64,
    /// Neither junk nor duplicate.
    pub remaining: u64,
    /// Landslide among the remaining images.
    pub remaining_landslide: u64,
    pub processing_failures: u64,
    pub geo_sources: BTreeMap<String, u64>,
    pub user_types: BTreeMap<String, u64>,
}

impl Tally {
    pub fn record(&mut self, r: &ImageRecord) {
        self.merged += 1;
        let dup = r.duplicate.as_ref().is_some_and(|d| d.is_duplicate);
        let junk = r.junk.as_ref().is_some_and(|c| c.label == Label::Negative);
        let landslide = r.landslide.as_ref().is_some_and(|c| c.label == Label::Positive);
        self.duplicates += dup as u64;
        self.junk += junk as u64;
        self.relevant += r.junk.as_ref().is_some_and(|c| c.label == Label::Positive) as u64;
        self.landslide += landslide as u64;
        self.not_landslide += r.landslide.as_ref().is_some_and(|c| c.label == Label::Negative) as u64;
        self.relevant_duplicates += (dup && !junk) as u64;
        if !dup && !junk {
            self.remaining += 1;
            self.remaining_landslide += landslide as u64;
        }
        let missing = [r.duplicate.is_none(), r.junk.is_none(), r.landslide.is_none()];
        self.processing_failures += missing.iter().filter(|&&m| m).count() as u64;
        if let Some(g) = &r.geo {
            *self.geo_sources.entry(g.source_field.as_str().to_string()).or_default() += 1;
        }
        if let Some(u) = r.user_type {
            *self.user_types.entry(u.as_str().to_string()).or_default() += 1;
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ImageManagerSummary {
    pub dispatched: u64,
    pub tally: Tally,
    pub unknown_verdicts: u64,
    pub contract_violations: u64,
    pub store_failures: u64,
    /// Images still waiting for verdicts when the join queue closed.
    pub pending_at_end: u64,
    pub failed: bool,
}

/// Runs `body` and reports whether it panicked. Panics are logged by the
/// default hook; the caller turns them into a failure flag.
fn guarded<T>(name: &str, body: impl FnOnce() -> T) -> Option<T> {
    match std::panic::catch_unwind(std::panic::AssertUnwindSafe(body)) {
        Ok(v) => Some(v),
        Err(_) => {
            log::error!("stage {name} panicked");
            None
        }
    }
}

/// Closes `queue` when the last of `live` holders drops.
struct LastCloses<'a, T> {
    live: &'a AtomicUsize,
    queue: &'a Queue<T>,
}

impl<T> Drop for LastCloses<'_, T> {
    fn drop(&mut self) {
        if self.live.fetch_sub(1, Ordering::AcqRel) == 1 {
            self.queue.close();
        }
    }
}

fn processor_loop(p: &dyn ImageProcessor, input: &Queue<ImageRecord>, join: &Queue<JoinEvent>) {
    while let Some(image) = input.recv() {
        let value = p.process(&image);
        let verdict = Verdict { image_id: image.image_id, kind: p.kind(), value };
        if join.push(JoinEvent::Verdict(verdict)).is_err() {
            log::warn!("{}: join queue closed", p.kind().as_str());
            input.close();
            return;
        }
    }
}

/// The image manager: pops images from `input`, dispatches each to all three
/// processors, joins their verdicts on image id, enriches completed records
/// and writes them to `image_index`. Returns once `input` is closed and
/// every dispatched image has been merged or abandoned.
pub fn image_manager(input: &Queue<ImageRecord>, stage: &ImageStage, image_index: &DocStore) -> ImageManagerSummary {
    let cap = stage.queue_capacity.max(1);
    let proc_queues: [Queue<ImageRecord>; 3] = ProcessorKind::ALL.map(|k| Queue::new(k.as_str(), cap));
    let join: Queue<JoinEvent> = Queue::new("join", cap);
    let failed = AtomicBool::new(false);
    let dispatched = AtomicU64::new(0);
    let live_processors = AtomicUsize::new(1 + stage.junk_workers.max(1) + stage.landslide_workers.max(1));

    let summary = thread::scope(|s| {
        let dispatcher = s.spawn(|| {
            let done = guarded("dispatcher", || {
                'images: while let Some(image) = input.recv() {
                    if join.push(JoinEvent::Registered(image.clone())).is_err() {
                        break;
                    }
                    dispatched.fetch_add(1, Ordering::Relaxed);
                    for q in &proc_queues {
                        if q.push(image.clone()).is_err() {
                            log::error!("dispatcher: {} queue closed", q.name());
                            break 'images;
                        }
                    }
                }
            });
            if done.is_none() || !input.is_closed() || input.depth() > 0 {
                failed.store(true, Ordering::Relaxed);
                input.close();
            }
            proc_queues.iter().for_each(Queue::close);
        });

        let mut workers = Vec::new();
        let plan = [
            (&stage.duplicate, &proc_queues[0], 1),
            (&stage.junk, &proc_queues[1], stage.junk_workers.max(1)),
            (&stage.landslide, &proc_queues[2], stage.landslide_workers.max(1)),
        ];
        for (proc, queue, n) in plan {
            for _ in 0..n {
                let (join, live, failed) = (&join, &live_processors, &failed);
                workers.push(s.spawn(move || {
                    let _closer = LastCloses { live, queue: join };
                    if guarded(proc.kind().as_str(), || processor_loop(proc.as_ref(), queue, join)).is_none() {
                        failed.store(true, Ordering::Relaxed);
                        queue.close();
                    }
                }));
            }
        }

        let joiner = s.spawn(|| {
            let mut out = ImageManagerSummary::default();
            let mut state = JoinState::new();
            let ok = guarded("joiner", || {
                while let Some(event) = join.recv() {
                    let merged = match event {
                        JoinEvent::Registered(r) => match state.register(r) {
                            Ok(()) => continue,
                            Err(e) => {
                                log::error!("joiner: {e}");
                                out.contract_violations += 1;
                                continue;
                            }
                        },
                        JoinEvent::Verdict(v) => match state.apply(v) {
                            Ok(Some(r)) => r,
                            Ok(None) => continue,
                            Err(e @ JoinError::UnknownImage(_)) => {
                                log::warn!("joiner: dropping {e}");
                                out.unknown_verdicts += 1;
                                continue;
                            }
                            Err(e) => {
                                log::error!("joiner: {e}");
                                out.contract_violations += 1;
                                continue;
                            }
                        },
                    };
                    let mut record = merged;
                    if let Some(enricher) = &stage.enricher {
                        enricher.enrich(&mut record);
                    }
                    if let Err(e) = image_index.put(&record.image_id, &record) {
                        log::error!("joiner: persisting {}: {e}", record.image_id);
                        out.store_failures += 1;
                        continue;
                    }
                    out.tally.record(&record);
                    if let Some(ch) = &stage.events {
                        let landslide = record.landslide.as_ref().is_some_and(Classification::is_positive);
                        ch.publish(PipelineEvent::ImageMerged { image_id: record.image_id.clone(), landslide });
                    }
                }
            });
            if ok.is_none() {
                join.close();
                out.failed = true;
            }
            out.pending_at_end = state.len() as u64;
            out
        });

        let mut any_panicked = dispatcher.join().is_err();
        for w in workers {
            any_panicked |= w.join().is_err();
        }
        let mut out = joiner.join().unwrap_or_else(|_| ImageManagerSummary { failed: true, ..Default::default() });
        out.failed |= any_panicked;
        out
    });

    let mut summary = summary;
    summary.dispatched = dispatched.load(Ordering::Relaxed);
    summary.failed |= failed.load(Ordering::Relaxed);
    summary.failed |= summary.contract_violations > 0 || summary.pending_at_end > 0;
    let leftover: usize = proc_queues.iter().map(Queue::depth).sum::<usize>() + join.depth();
    if leftover > 0 {
        log::error!("image manager stopped with {leftover} queued messages");
        summary.failed = true;
    }
    if let Some(ch) = &stage.events {
        ch.publish(PipelineEvent::StageFinished { stage: "image_manager".into() });
    }
    summary
}

// ---------------------------------------------------------------------------
// Full pipeline

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Funnel {
    pub fetched: u64,
    pub junk: u64,
    pub additional_duplicates: u64,
    pub remaining: u64,
    pub landslide: u64,
    pub junk_pct: f64,
    pub additional_duplicate_pct: f64,
    pub remaining_pct: f64,
    /// Share of the remaining images labelled landslide.
    pub landslide_pct: f64,
}

impl Funnel {
    pub fn from_tally(t: &Tally) -> Self {
        let pct = |n: u64, d: u64| if d == 0 { 0.0 } else { 100.0 * n as f64 / d as f64 };
        Funnel {
            fetched: t.merged,
            junk: t.junk,
            additional_duplicates: t.relevant_duplicates,
            remaining: t.remaining,
            landslide: t.remaining_landslide,
            junk_pct: pct(t.junk, t.merged),
            additional_duplicate_pct: pct(t.relevant_duplicates, t.merged),
            remaining_pct: pct(t.remaining, t.merged),
            landslide_pct: pct(t.remaining_landslide, t.remaining),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct RunReport {
    pub tweets: TweetCollectorSummary,
    pub images: ImageCollectorSummary,
    pub dispatched: u64,
    pub merged_docs: u64,
    pub verdicts: Tally,
    pub funnel: Funnel,
    pub unknown_verdicts: u64,
    pub contract_violations: u64,
    pub store_failures: u64,
    /// Images dispatched but never merged.
    pub in_flight: u64,
    pub geocode_cache: Option<crate::geo::CacheStats>,
    pub failed: bool,
    pub elapsed_s: f64,
}

impl RunReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Names of the files a run leaves in its output directory.
pub const TWEET_INDEX_FILE: &str = "tweets.log";
pub const IMAGE_INDEX_FILE: &str = "images.log";
pub const FEATURE_INDEX_FILE: &str = "features.idx";
pub const IMAGE_DIR: &str = "images";
pub const REPORT_FILE: &str = "report.json";

fn build_classifier(
    task: Task,
    cfg: &ClassifierConfig,
    extractor: &Arc<dyn FeatureExtractor>,
) -> Result<Arc<dyn BinaryClassifier>, PipelineError> {
    Ok(match cfg {
        ClassifierConfig::Lookup { path } => Arc::new(LookupClassifier::load(task, path)?),
        ClassifierConfig::Stub { seed, bias } => {
            Arc::new(StubClassifier::seeded(task, Arc::clone(extractor), *seed, *bias))
        }
    })
}

fn build_geotagger(cfg: &PipelineConfig) -> Result<GeoTagger, PipelineError> {
    let gazetteer = Arc::new(match &cfg.gazetteer {
        Some(p) => Gazetteer::load(p)?,
        None => Gazetteer::default(),
    });
    let mut ner = match &cfg.ner_dir {
        Some(dir) => NerRouter::load_dir(dir, Some(&gazetteer))?,
        None => {
            let mut fallback = crate::geo::DictionaryTagger::new();
            for p in gazetteer.places() {
                fallback.add(&p.name, crate::model::EntityKind::Location);
            }
            NerRouter::new(fallback)
        }
    };
    if cfg.cache.ner > 0 {
        ner = ner.with_cache(cfg.cache.ner);
    }
    let tagger = GeoTagger::new(Arc::new(GazetteerGeocoder::new(gazetteer)), Arc::new(ner));
    Ok(if cfg.cache.geocode > 0 { tagger.with_cache(cfg.cache.geocode) } else { tagger })
}

/// Runs the configured pipeline over its replay corpus until every stage
/// has drained, then writes `report.json` next to the stores.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<RunReport, PipelineError> {
    run_pipeline_with_events(cfg, None)
}

pub fn run_pipeline_with_events(
    cfg: &PipelineConfig,
    events: Option<Channel<PipelineEvent>>,
) -> Result<RunReport, PipelineError> {
    cfg.validate()?;
    let started = Instant::now();
    let corpus = cfg.corpus.as_ref().expect("validated");
    let out = cfg.out_dir.as_ref().expect("validated");
    let io_err = |path: &Path| {
        let path = path.to_path_buf();
        move |source| PipelineError::Io { path, source }
    };
    fs::create_dir_all(out).map_err(io_err(out))?;
    if !cfg.fixtures.is_dir() {
        return Err(PipelineError::Config(format!("fixture directory {} does not exist", cfg.fixtures.display())));
    }

    let keywords = KeywordList::load(&cfg.keywords)?;
    let mut source = ReplaySource::open(corpus, cfg.replay_rate).map_err(io_err(corpus))?;
    let tweets = Arc::new(DocStore::open("tweet_index", out.join(TWEET_INDEX_FILE))?);
    let image_index = DocStore::open("image_index", out.join(IMAGE_INDEX_FILE))?;

    let extractor: Arc<dyn FeatureExtractor> = match &cfg.extractor {
        ExtractorConfig::Stub { dim, seed } => Arc::new(StubExtractor::new(*dim, *seed)),
        ExtractorConfig::Precomputed { path } => Arc::new(PrecomputedExtractor::load(path)?),
    };
    let feature_index = FeatureIndex::open(out.join(FEATURE_INDEX_FILE), extractor.dim())?;
    let junk = build_classifier(Task::Junk, &cfg.junk, &extractor)?;
    let landslide = build_classifier(Task::Landslide, &cfg.landslide, &extractor)?;
    let enricher = Arc::new(TweetEnricher::new(Arc::clone(&tweets), build_geotagger(cfg)?));

    let mut collector = ImageCollector::new(Arc::new(DirFetcher::new(&cfg.fixtures)), out.join(IMAGE_DIR));
    collector.retry = RetryPolicy::with_retries(cfg.fetch_retries);
    let stage = ImageStage {
        duplicate: Arc::new(DuplicateFilter::new(
            Arc::clone(&extractor),
            Box::new(feature_index),
            cfg.duplicate_threshold,
        )),
        junk: Arc::new(ClassifierProcessor::new(junk)),
        landslide: Arc::new(ClassifierProcessor::new(landslide)),
        junk_workers: cfg.workers.junk_filter,
        landslide_workers: cfg.workers.landslide_detector,
        queue_capacity: cfg.queue_capacity,
        enricher: Some(enricher.clone() as Arc<dyn Enricher>),
        events: events.clone(),
    };

    let cap = cfg.queue_capacity;
    let refs: Queue<ImageRef> = Queue::new("image_refs", cap);
    let fetched: Queue<(u64, Option<ImageRecord>)> = Queue::new("fetched", cap);
    let images: Queue<ImageRecord> = Queue::new("images", cap);
    let next_seq = Mutex::new(0u64);
    let live_fetchers = AtomicUsize::new(cfg.workers.image_collectors);
    let failed = AtomicBool::new(false);
    let finished = |stage: &str| {
        if let Some(ch) = &events {
            ch.publish(PipelineEvent::StageFinished { stage: stage.to_string() });
        }
    };
    if let Err(e) = fs::create_dir_all(&collector.store_dir) {
        return Err(PipelineError::Io { path: collector.store_dir.clone(), source: e });
    }

    let (tweet_summary, image_summary, manager) = thread::scope(|s| {
        let tweet_stage = s.spawn(|| {
            let r = guarded("tweet_collector", || run_tweet_collector(&mut source, &keywords, &tweets, &refs));
            refs.close();
            finished("tweet_collector");
            r.unwrap_or_else(|| {
                failed.store(true, Ordering::Relaxed);
                TweetCollectorSummary::default()
            })
        });

        // Fetch workers tag each reference with its position in the stream
        // so the sequencer can restore source order after parallel fetches.
        // Skipped and failed references still send a placeholder.
        let fetchers: Vec<_> = (0..cfg.workers.image_collectors)
            .map(|_| {
                s.spawn(|| {
                    let _closer = LastCloses { live: &live_fetchers, queue: &fetched };
                    let mut summary = ImageCollectorSummary::default();
                    let r = guarded("image_collector", || loop {
                        // The URL check runs under the sequencing lock so the
                        // first occurrence in stream order is the one fetched.
                        let (seq, image) = {
                            let mut n = next_seq.lock().unwrap_or_else(|e| e.into_inner());
                            let Some(image) = refs.recv() else { break };
                            *n += 1;
                            summary.received += 1;
                            let first = collector.dedup.check_and_record_url(&image.url).first_seen;
                            if !first {
                                summary.skipped += 1;
                            }
                            (*n - 1, first.then_some(image))
                        };
                        let record = image.and_then(|image| collector.fetch_and_store(&image, &mut summary));
                        if fetched.push((seq, record)).is_err() {
                            refs.close();
                            break;
                        }
                    });
                    if r.is_none() {
                        failed.store(true, Ordering::Relaxed);
                        refs.close();
                    }
                    summary
                })
            })
            .collect();

        let sequencer = s.spawn(|| {
            let r = guarded("sequencer", || {
                let mut held: BTreeMap<u64, Option<ImageRecord>> = BTreeMap::new();
                let mut next = 0u64;
                while let Some((seq, record)) = fetched.recv() {
                    held.insert(seq, record);
                    while let Some(record) = held.remove(&next) {
                        next += 1;
                        if let Some(r) = record {
                            if images.push(r).is_err() {
                                fetched.close();
                                return;
                            }
                        }
                    }
                }
                if !held.is_empty() {
                    log::error!("sequencer: {} fetch results never became contiguous", held.len());
                    failed.store(true, Ordering::Relaxed);
                }
            });
            if r.is_none() {
                failed.store(true, Ordering::Relaxed);
                fetched.close();
            }
            images.close();
            finished("image_collector");
        });

        let manager = s.spawn(|| image_manager(&images, &stage, &image_index));

        let tweets_done = tweet_stage.join().unwrap_or_default();
        let mut fetch_total = ImageCollectorSummary::default();
        for f in fetchers {
            match f.join() {
                Ok(part) => {
                    fetch_total.received += part.received;
                    fetch_total.fetched += part.fetched;
                    fetch_total.skipped += part.skipped;
                    fetch_total.fetch_failures += part.fetch_failures;
                    fetch_total.write_failures += part.write_failures;
                }
                Err(_) => failed.store(true, Ordering::Relaxed),
            }
        }
        if sequencer.join().is_err() {
            failed.store(true, Ordering::Relaxed);
        }
        let manager = manager.join().unwrap_or_else(|_| ImageManagerSummary { failed: true, ..Default::default() });
        (tweets_done, fetch_total, manager)
    });

    let quiescent = refs.depth() == 0 && fetched.depth() == 0 && images.depth() == 0 && manager.pending_at_end == 0;
    if let Err(e) = tweets.flush().and_then(|_| image_index.flush()) {
        log::error!("flushing stores: {e}");
        failed.store(true, Ordering::Relaxed);
    }
    drop(stage);

    let report = RunReport {
        tweets: tweet_summary,
        images: image_summary,
        dispatched: manager.dispatched,
        merged_docs: manager.tally.merged,
        funnel: Funnel::from_tally(&manager.tally),
        verdicts: manager.tally,
        unknown_verdicts: manager.unknown_verdicts,
        contract_violations: manager.contract_violations,
        store_failures: manager.store_failures,
        in_flight: manager.pending_at_end,
        geocode_cache: enricher.geotagger().cache_stats(),
        failed: failed.load(Ordering::Relaxed) || manager.failed || !quiescent,
        elapsed_s: started.elapsed().as_secs_f64(),
    };
    let report_path = out.join(REPORT_FILE);
    fs::write(&report_path, report.to_json()).map_err(io_err(&report_path))?;
    Ok(report)
}

//! Post ingestion (keyword-filtered) and image collection (URL dedup, fetch,
//! save, dispatch).

use std::collections::{HashMap, VecDeque};
use std::fs;
use std::io::{self, BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;
use unicode_normalization::UnicodeNormalization;

use crate::broker::Queue;
use crate::model::{extract_image_refs, parse_tweet, ImageRecord, ImageRef};
use crate::storage::DocStore;

#[derive(Debug, Error)]
pub enum CollectError {
    #[error("keyword list is empty")]
    NoKeywords,
    #[error("keyword file {path}: {reason}")]
    KeywordFile { path: PathBuf, reason: String },
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
}

/// Lowercased NFC form used for keyword matching.
pub fn normalize_text(text: &str) -> String {
    text.nfc().collect::<String>().to_lowercase()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Keyword {
    pub phrase: String,
    pub language: String,
}

/// Tracked keywords, stored in normalized form.
#[derive(Debug, Clone)]
pub struct KeywordList {
    entries: Vec<Keyword>,
}

impl KeywordList {
    pub fn new<I, S, L>(entries: I) -> Result<Self, CollectError>
    where
        I: IntoIterator<Item = (S, L)>,
        S: AsRef<str>,
        L: AsRef<str>,
    {
        let entries: Vec<Keyword> = entries
            .into_iter()
            .map(|(k, l)| Keyword {
                phrase: normalize_text(k.as_ref().trim()),
                language: l.as_ref().trim().to_string(),
            })
            .filter(|k| !k.phrase.is_empty())
            .collect();
        if entries.is_empty() {
            return Err(CollectError::NoKeywords);
        }
        Ok(KeywordList { entries })
    }

    /// Loads a `keyword,language` CSV. A header row is skipped.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, CollectError> {
        let path = path.as_ref();
        let bad = |reason: String| CollectError::KeywordFile { path: path.to_path_buf(), reason };
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .flexible(true)
            .trim(csv::Trim::All)
            .from_path(path)
            .map_err(|e| bad(e.to_string()))?;
        let mut rows = Vec::new();
        for (n, record) in reader.records().enumerate() {
            let record = record.map_err(|e| bad(e.to_string()))?;
            let keyword = record.get(0).unwrap_or("");
            let language = record.get(1).unwrap_or("");
            if n == 0 && keyword.eq_ignore_ascii_case("keyword") {
                continue;
            }
            rows.push((keyword.to_string(), language.to_string()));
        }
        Self::new(rows)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[Keyword] {
        &self.entries
    }

    /// Distinct language codes, sorted.
    pub fn languages(&self) -> Vec<String> {
        let mut langs: Vec<String> =
            self.entries.iter().map(|k| k.language.clone()).filter(|l| !l.is_empty()).collect();
        langs.sort();
        langs.dedup();
        langs
    }

    pub fn matches(&self, text: &str) -> bool {
        matches_keywords(text, self)
    }
}

/// True iff any keyword occurs as a substring of the case-folded NFC text.
pub fn matches_keywords(text: &str, keywords: &KeywordList) -> bool {
    let text = normalize_text(text);
    keywords.entries.iter().any(|k| text.contains(&k.phrase))
}

/// Drops the fragment and lowercases scheme and host; the query is kept.
pub fn normalize_url(raw: &str) -> String {
    let trimmed = raw.trim();
    match url::Url::parse(trimmed) {
        Ok(mut u) => {
            u.set_fragment(None);
            u.to_string()
        }
        Err(_) => trimmed.split('#').next().unwrap_or("").to_string(),
    }
}

/// Hex SHA-256 of the normalized URL; names the saved file and keys the image.
pub fn image_id_for_url(url: &str) -> String {
    hex::encode(Sha256::digest(normalize_url(url).as_bytes()))
}

/// Extension of the URL path's last segment, if short and alphanumeric.
fn url_extension(url: &str) -> Option<String> {
    let path = match url::Url::parse(url) {
        Ok(u) => u.path().to_string(),
        Err(_) => url.split(['?', '#']).next().unwrap_or("").to_string(),
    };
    let last = path.rsplit('/').next()?;
    let (_, ext) = last.rsplit_once('.')?;
    (!ext.is_empty() && ext.len() <= 5 && ext.chars().all(|c| c.is_ascii_alphanumeric()))
        .then(|| ext.to_ascii_lowercase())
}

pub fn stored_file_name(url: &str) -> String {
    match url_extension(url) {
        Some(ext) => format!("{}.{ext}", image_id_for_url(url)),
        None => image_id_for_url(url),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct UrlCheck {
    pub first_seen: bool,
    pub seq: u64,
}

/// Insertion-ordered set of seen URLs with O(1) lookup. When bounded, the
/// oldest insertion is evicted first; lookups do not refresh recency.
#[derive(Debug, Default)]
pub struct UrlDedupMap {
    seen: HashMap<String, u64>,
    order: VecDeque<String>,
    capacity: Option<usize>,
    next_seq: u64,
}

impl UrlDedupMap {
    pub fn unbounded() -> Self {
        Self::default()
    }

    pub fn bounded(capacity: usize) -> Self {
        UrlDedupMap { capacity: Some(capacity.max(1)), ..Self::default() }
    }

    pub fn len(&self) -> usize {
        self.seen.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seen.is_empty()
    }

    pub fn check_and_record(&mut self, url: &str) -> UrlCheck {
        let key = normalize_url(url);
        if let Some(&seq) = self.seen.get(&key) {
            return UrlCheck { first_seen: false, seq };
        }
        if let Some(cap) = self.capacity {
            while self.seen.len() >= cap {
                match self.order.pop_front() {
                    Some(old) => {
                        self.seen.remove(&old);
                    }
                    None => break,
                }
            }
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        self.seen.insert(key.clone(), seq);
        self.order.push_back(key);
        UrlCheck { first_seen: true, seq }
    }
}

/// Shared form of [`UrlDedupMap`]; each check is atomic.
#[derive(Debug, Clone, Default)]
pub struct SharedUrlDedup {
    inner: Arc<Mutex<UrlDedupMap>>,
}

impl SharedUrlDedup {
    pub fn new(map: UrlDedupMap) -> Self {
        SharedUrlDedup { inner: Arc::new(Mutex::new(map)) }
    }

    pub fn check_and_record_url(&self, url: &str) -> UrlCheck {
        self.inner.lock().unwrap_or_else(|e| e.into_inner()).check_and_record(url)
    }

    pub fn len(&self) -> usize {
        self.inner.lock().unwrap_or_else(|e| e.into_inner()).len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Ordered supply of raw post documents.
pub trait StreamSource: Send {
    /// Next raw document; `None` once the source is exhausted.
    fn next_document(&mut self) -> Option<io::Result<String>>;
}

/// Replays a newline-delimited JSON corpus, optionally throttled to
/// `rate` documents per second.
pub struct ReplaySource<R> {
    lines: io::Lines<R>,
    interval: Option<Duration>,
    next_due: Option<Instant>,
}

impl ReplaySource<BufReader<fs::File>> {
    pub fn open(path: impl AsRef<Path>, rate: Option<f64>) -> io::Result<Self> {
        Ok(Self::from_reader(BufReader::new(fs::File::open(path)?), rate))
    }
}

impl<R: BufRead> ReplaySource<R> {
    pub fn from_reader(reader: R, rate: Option<f64>) -> Self {
        let interval = rate.filter(|r| *r > 0.0 && r.is_finite()).map(|r| Duration::from_secs_f64(1.0 / r));
        ReplaySource { lines: reader.lines(), interval, next_due: None }
    }
}

impl<R: BufRead + Send> StreamSource for ReplaySource<R> {
    fn next_document(&mut self) -> Option<io::Result<String>> {
        let line = loop {
            match self.lines.next()? {
                Ok(l) if l.trim().is_empty() => continue,
                other => break other,
            }
        };
        if let Some(interval) = self.interval {
            let now = Instant::now();
            let due = self.next_due.unwrap_or(now);
            if due > now {
                thread::sleep(due - now);
            }
            self.next_due = Some(due.max(now) + interval);
        }
        Some(line)
    }
}

/// In-memory source, handy for tests and generated corpora.
pub struct VecSource {
    docs: std::vec::IntoIter<String>,
}

impl VecSource {
    pub fn new(docs: Vec<String>) -> Self {
        VecSource { docs: docs.into_iter() }
    }
}

impl StreamSource for VecSource {
    fn next_document(&mut self) -> Option<io::Result<String>> {
        self.docs.next().map(Ok)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct TweetCollectorSummary {
    pub seen: u64,
    pub matched: u64,
    pub refs_pushed: u64,
    pub errors: u64,
}

/// Filters the source by keyword, persists matching posts to `tweets`, and
/// pushes their image references. Stops early if `out_refs` is closed.
pub fn run_tweet_collector(
    src: &mut dyn StreamSource,
    keywords: &KeywordList,
    tweets: &DocStore,
    out_refs: &Queue<ImageRef>,
) -> TweetCollectorSummary {
    let mut summary = TweetCollectorSummary::default();
    while let Some(doc) = src.next_document() {
        summary.seen += 1;
        let raw = match doc {
            Ok(raw) => raw,
            Err(e) => {
                log::warn!("tweet collector: read error: {e}");
                summary.errors += 1;
                continue;
            }
        };
        let tweet = match parse_tweet(&raw) {
            Ok(t) => t,
            Err(e) => {
                log::warn!("tweet collector: skipping document {}: {e}", summary.seen);
                summary.errors += 1;
                continue;
            }
        };
        if !keywords.matches(&tweet.text) {
            continue;
        }
        summary.matched += 1;
        if let Err(e) = tweets.put(&tweet.id, &tweet) {
            log::error!("tweet collector: failed to persist {}: {e}", tweet.id);
            summary.errors += 1;
            continue;
        }
        for image in extract_image_refs(&tweet) {
            if out_refs.push(image).is_err() {
                log::warn!("tweet collector: downstream closed, stopping");
                return summary;
            }
            summary.refs_pushed += 1;
        }
    }
    summary
}

#[derive(Debug, Error)]
pub enum FetchError {
    #[error("not found: {0}")]
    NotFound(String),
    #[error("fetch failed for {url}: {reason}")]
    Failed { url: String, reason: String },
}

pub trait ImageFetcher: Send + Sync {
    fn fetch(&self, url: &str) -> Result<Vec<u8>, FetchError>;

    /// Offline fetchers skip retry backoff sleeps.
    fn is_offline(&self) -> bool {
        false
    }
}

/// Serves image bytes from a fixture directory holding one file per URL,
/// named `<image id>.bin` (see [`image_id_for_url`]).
#[derive(Debug, Clone)]
pub struct DirFetcher {
    root: PathBuf,
}

impl DirFetcher {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        DirFetcher { root: root.into() }
    }

    pub fn fixture_path(root: &Path, url: &str) -> PathBuf {
        root.join(format!("{}.bin", image_id_for_url(url)))
    }
}

impl ImageFetcher for DirFetcher {
    fn fetch(&self, url: &str) -> Result<Vec<u8>, FetchError> {
        match fs::read(Self::fixture_path(&self.root, url)) {
            Ok(bytes) => Ok(bytes),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Err(FetchError::NotFound(url.to_string())),
            Err(e) => Err(FetchError::Failed { url: url.to_string(), reason: e.to_string() }),
        }
    }

    fn is_offline(&self) -> bool {
        true
    }
}

/// In-memory fetcher keyed by normalized URL.
#[derive(Debug, Clone, Default)]
pub struct MapFetcher {
    images: HashMap<String, Vec<u8>>,
}

impl MapFetcher {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, url: &str, bytes: Vec<u8>) {
        self.images.insert(normalize_url(url), bytes);
    }
}

impl ImageFetcher for MapFetcher {
    fn fetch(&self, url: &str) -> Result<Vec<u8>, FetchError> {
        self.images.get(&normalize_url(url)).cloned().ok_or_else(|| FetchError::NotFound(url.to_string()))
    }

    fn is_offline(&self) -> bool {
        true
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    /// Total attempts, including the first.
    pub attempts: u32,
    pub initial_backoff: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy { attempts: 3, initial_backoff: Duration::from_millis(100) }
    }
}

impl RetryPolicy {
    pub fn with_retries(retries: u32) -> Self {
        RetryPolicy { attempts: retries + 1, ..Self::default() }
    }
}

pub fn fetch_with_retry(fetcher: &dyn ImageFetcher, url: &str, policy: RetryPolicy) -> Result<Vec<u8>, FetchError> {
    let mut backoff = policy.initial_backoff;
    let attempts = policy.attempts.max(1);
    let mut attempt = 1;
    loop {
        match fetcher.fetch(url) {
            Ok(bytes) => return Ok(bytes),
            Err(e) if attempt >= attempts => return Err(e),
            Err(e) => {
                log::debug!("fetch attempt {attempt}/{attempts} for {url} failed: {e}");
                if !fetcher.is_offline() {
                    thread::sleep(backoff);
                }
                backoff *= 2;
                attempt += 1;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct ImageCollectorSummary {
    pub received: u64,
    pub fetched: u64,
    pub skipped: u64,
    pub fetch_failures: u64,
    pub write_failures: u64,
}

impl ImageCollectorSummary {
    fn merge(&mut self, o: &ImageCollectorSummary) {
        self.received += o.received;
        self.fetched += o.fetched;
        self.skipped += o.skipped;
        self.fetch_failures += o.fetch_failures;
        self.write_failures += o.write_failures;
    }
}

#[derive(Clone)]
pub struct ImageCollector {
    pub fetcher: Arc<dyn ImageFetcher>,
    pub store_dir: PathBuf,
    pub dedup: SharedUrlDedup,
    pub retry: RetryPolicy,
}

impl ImageCollector {
    pub fn new(fetcher: Arc<dyn ImageFetcher>, store_dir: impl Into<PathBuf>) -> Self {
        ImageCollector {
            fetcher,
            store_dir: store_dir.into(),
            dedup: SharedUrlDedup::default(),
            retry: RetryPolicy::default(),
        }
    }

    /// Handles one reference: dedup, fetch, save. `None` means the URL was
    /// already seen or the image could not be fetched or stored.
    pub fn collect(&self, image: &ImageRef, summary: &mut ImageCollectorSummary) -> Option<ImageRecord> {
        summary.received += 1;
        if !self.dedup.check_and_record_url(&image.url).first_seen {
            summary.skipped += 1;
            return None;
        }
        self.fetch_and_store(image, summary)
    }

    /// Fetches and saves an image whose URL already passed the dedup check.
    pub fn fetch_and_store(&self, image: &ImageRef, summary: &mut ImageCollectorSummary) -> Option<ImageRecord> {
        let bytes = match fetch_with_retry(self.fetcher.as_ref(), &image.url, self.retry) {
            Ok(b) => b,
            Err(e) => {
                log::warn!("image collector: giving up on {}: {e}", image.url);
                summary.fetch_failures += 1;
                return None;
            }
        };
        let path = self.store_dir.join(stored_file_name(&image.url));
        if let Err(e) = fs::write(&path, &bytes) {
            log::error!("image collector: cannot write {}: {e}", path.display());
            summary.write_failures += 1;
            return None;
        }
        summary.fetched += 1;
        Some(ImageRecord::fetched(
            image_id_for_url(&image.url),
            image,
            path.to_string_lossy().into_owned(),
            bytes.len() as u64,
        ))
    }

    /// Single worker loop: drains `in_refs` until it is closed and empty.
    pub fn run(&self, in_refs: &Queue<ImageRef>, out_images: &Queue<ImageRecord>) -> ImageCollectorSummary {
        let mut summary = ImageCollectorSummary::default();
        while let Some(image) = in_refs.recv() {
            if let Some(record) = self.collect(&image, &mut summary) {
                if out_images.push(record).is_err() {
                    log::warn!("image collector: downstream closed, stopping");
                    in_refs.close();
                    break;
                }
            }
        }
        summary
    }

    /// Runs `workers` parallel fetch loops sharing one dedup map.
    pub fn run_parallel(
        &self,
        workers: usize,
        in_refs: &Queue<ImageRef>,
        out_images: &Queue<ImageRecord>,
    ) -> ImageCollectorSummary {
        if let Err(e) = fs::create_dir_all(&self.store_dir) {
            log::error!("image collector: cannot create {}: {e}", self.store_dir.display());
        }
        let mut total = ImageCollectorSummary::default();
        thread::scope(|s| {
            let handles: Vec<_> = (0..workers.max(1)).map(|_| s.spawn(|| self.run(in_refs, out_images))).collect();
            for h in handles {
                match h.join() {
                    Ok(summary) => total.merge(&summary),
                    Err(_) => log::error!("image collector worker panicked"),
                }
            }
        });
        total
    }
}

/// Drains `in_refs` through a single collector worker.
pub fn run_image_collector(
    in_refs: &Queue<ImageRef>,
    fetcher: Arc<dyn ImageFetcher>,
    store_dir: &Path,
    out_images: &Queue<ImageRecord>,
) -> ImageCollectorSummary {
    ImageCollector::new(fetcher, store_dir).run_parallel(1, in_refs, out_images)
}

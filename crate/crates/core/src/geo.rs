//! Named-entity tagging, the geolocation cascade over post metadata, user-type
//! identification, and the LRU caches in front of the geocoder and tagger.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::hash::Hash;
use std::num::NonZeroUsize;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use unicode_normalization::UnicodeNormalization;

use crate::model::{EntityKind, GeoSource, GeoTag, NamedEntity, Tweet, UserType};

#[derive(Debug, Error)]
pub enum GeoError {
    #[error("gazetteer {path}: {reason}")]
    Gazetteer { path: String, reason: String },
    #[error("dictionary {path}: {reason}")]
    Dictionary { path: String, reason: String },
    #[error("geocoder unavailable: {0}")]
    Unavailable(String),
}

// ---------------------------------------------------------------------------
// LRU cache

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct CacheStats {
    pub hits: u64,
    pub misses: u64,
    pub len: usize,
    pub capacity: usize,
}

struct CacheState<K: Hash + Eq, V> {
    entries: lru::LruCache<K, V>,
    in_flight: HashSet<K>,
}

/// Thread-safe LRU cache with single-flight `get_or_compute`: concurrent
/// misses on one key run the producer once while the others wait.
pub struct LruCache<K: Hash + Eq, V> {
    state: Mutex<CacheState<K, V>>,
    ready: Condvar,
    capacity: usize,
    hits: AtomicU64,
    misses: AtomicU64,
}

impl<K: Hash + Eq + Clone, V: Clone> LruCache<K, V> {
    pub fn new(capacity: usize) -> Self {
        let capacity = capacity.max(1);
        LruCache {
            state: Mutex::new(CacheState {
                entries: lru::LruCache::new(NonZeroUsize::new(capacity).unwrap()),
                in_flight: HashSet::new(),
            }),
            ready: Condvar::new(),
            capacity,
            hits: AtomicU64::new(0),
            misses: AtomicU64::new(0),
        }
    }

    /// Returns the cached value (refreshing its recency) or runs `producer`
    /// and stores its result. The flag is `true` on a hit. Producer errors
    /// propagate and nothing is cached.
    pub fn get_or_compute<E>(&self, key: K, producer: impl FnOnce() -> Result<V, E>) -> Result<(V, bool), E> {
        let mut st = self.state.lock().unwrap_or_else(|e| e.into_inner());
        loop {
            if let Some(v) = st.entries.get(&key) {
                let v = v.clone();
                drop(st);
                self.hits.fetch_add(1, Ordering::Relaxed);
                return Ok((v, true));
            }
            if !st.in_flight.contains(&key) {
                break;
            }
            st = self.ready.wait(st).unwrap_or_else(|e| e.into_inner());
        }
        st.in_flight.insert(key.clone());
        drop(st);
        self.misses.fetch_add(1, Ordering::Relaxed);

        // Clears the in-flight mark even if the producer panics.
        struct Pending<'a, K: Hash + Eq + Clone, V: Clone> {
            cache: &'a LruCache<K, V>,
            key: Option<K>,
            value: Option<V>,
        }
        impl<K: Hash + Eq + Clone, V: Clone> Drop for Pending<'_, K, V> {
            fn drop(&mut self) {
                let mut st = self.cache.state.lock().unwrap_or_else(|e| e.into_inner());
                if let Some(key) = self.key.take() {
                    st.in_flight.remove(&key);
                    if let Some(v) = self.value.take() {
                        st.entries.put(key, v);
                    }
                }
                drop(st);
                self.cache.ready.notify_all();
            }
        }
        let mut pending = Pending { cache: self, key: Some(key), value: None };
        let value = producer()?;
        pending.value = Some(value.clone());
        drop(pending);
        Ok((value, false))
    }

    pub fn get(&self, key: &K) -> Option<V> {
        let mut st = self.state.lock().unwrap_or_else(|e| e.into_inner());
        st.entries.get(key).cloned()
    }

    pub fn len(&self) -> usize {
        self.state.lock().unwrap_or_else(|e| e.into_inner()).entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn clear(&self) {
        self.state.lock().unwrap_or_else(|e| e.into_inner()).entries.clear();
    }

    pub fn stats(&self) -> CacheStats {
        CacheStats {
            hits: self.hits.load(Ordering::Relaxed),
            misses: self.misses.load(Ordering::Relaxed),
            len: self.len(),
            capacity: self.capacity,
        }
    }
}

/// Free-function form of [`LruCache::get_or_compute`].
pub fn cache_get_or_compute<K, V, E>(
    cache: &LruCache<K, V>,
    key: K,
    producer: impl FnOnce() -> Result<V, E>,
) -> Result<(V, bool), E>
where
    K: Hash + Eq + Clone,
    V: Clone,
{
    cache.get_or_compute(key, producer)
}

// ---------------------------------------------------------------------------
// Gazetteer and geocoders

/// Lowercased, NFC, whitespace-collapsed form used for place-name lookups.
pub fn normalize_query(s: &str) -> String {
    let lowered: String = s.nfc().collect::<String>().to_lowercase();
    lowered.split_whitespace().collect::<Vec<_>>().join(" ")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PlaceKind {
    City,
    County,
    State,
    Country,
}

/// A geocoding result with its administrative hierarchy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Place {
    pub name: String,
    pub kind: PlaceKind,
    pub country: Option<String>,
    pub state: Option<String>,
    pub county: Option<String>,
    pub city: Option<String>,
    pub lat: f64,
    pub lon: f64,
}

impl Place {
    fn into_tag(self, source: GeoSource) -> GeoTag {
        GeoTag { country: self.country, state: self.state, county: self.county, city: self.city, source_field: source }
    }
}

#[derive(Debug, Deserialize)]
struct GazetteerRow {
    name: String,
    kind: PlaceKind,
    #[serde(default)]
    country: String,
    #[serde(default)]
    state: String,
    #[serde(default)]
    county: String,
    #[serde(default)]
    city: String,
    lat: f64,
    lon: f64,
}

fn non_empty(s: String) -> Option<String> {
    let t = s.trim();
    (!t.is_empty()).then(|| t.to_string())
}

/// Offline place table. Name lookups that hit several kinds resolve in the
/// order city, county, state, country.
#[derive(Debug, Clone, Default)]
pub struct Gazetteer {
    places: Vec<Place>,
    by_name: HashMap<String, Vec<usize>>,
}

impl Gazetteer {
    pub fn from_places(places: Vec<Place>) -> Result<Self, GeoError> {
        let mut by_name: HashMap<String, Vec<usize>> = HashMap::new();
        for (i, p) in places.iter().enumerate() {
            if !(-90.0..=90.0).contains(&p.lat) || !(-180.0..=180.0).contains(&p.lon) {
                return Err(GeoError::Gazetteer {
                    path: "<memory>".into(),
                    reason: format!("`{}` has invalid coordinates", p.name),
                });
            }
            let key = normalize_query(&p.name);
            let slot = by_name.entry(key).or_default();
            if slot.iter().any(|&j| places[j].kind == p.kind) {
                return Err(GeoError::Gazetteer {
                    path: "<memory>".into(),
                    reason: format!("`{}` listed twice as {:?}", p.name, p.kind),
                });
            }
            slot.push(i);
        }
        for slot in by_name.values_mut() {
            slot.sort_by_key(|&i| places[i].kind);
        }
        Ok(Gazetteer { places, by_name })
    }

    /// Loads a `name,kind,country,state,county,city,lat,lon` CSV.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, GeoError> {
        let path = path.as_ref();
        let bad = |reason: String| GeoError::Gazetteer { path: path.display().to_string(), reason };
        let mut reader =
            csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path).map_err(|e| bad(e.to_string()))?;
        let mut places = Vec::new();
        for row in reader.deserialize::<GazetteerRow>() {
            let row = row.map_err(|e| bad(e.to_string()))?;
            places.push(Place {
                name: row.name,
                kind: row.kind,
                country: non_empty(row.country),
                state: non_empty(row.state),
                county: non_empty(row.county),
                city: non_empty(row.city),
                lat: row.lat,
                lon: row.lon,
            });
        }
        Self::from_places(places).map_err(|e| match e {
            GeoError::Gazetteer { reason, .. } => bad(reason),
            other => other,
        })
    }

    pub fn len(&self) -> usize {
        self.places.len()
    }

    pub fn is_empty(&self) -> bool {
        self.places.is_empty()
    }

    pub fn places(&self) -> &[Place] {
        &self.places
    }

    pub fn lookup(&self, name: &str) -> Option<&Place> {
        self.by_name.get(&normalize_query(name)).and_then(|ids| ids.first()).map(|&i| &self.places[i])
    }

    /// Nearest place within `max_km` by great-circle distance; earliest row on ties.
    pub fn nearest(&self, lat: f64, lon: f64, max_km: f64) -> Option<&Place> {
        let mut best: Option<(f64, &Place)> = None;
        for p in &self.places {
            let d = haversine_km(lat, lon, p.lat, p.lon);
            if d <= max_km && best.is_none_or(|(b, _)| d < b) {
                best = Some((d, p));
            }
        }
        best.map(|(_, p)| p)
    }
}

pub fn haversine_km(lat1: f64, lon1: f64, lat2: f64, lon2: f64) -> f64 {
    const R: f64 = 6371.0088;
    let (p1, p2) = (lat1.to_radians(), lat2.to_radians());
    let dp = p2 - p1;
    let dl = (lon2 - lon1).to_radians();
    let a = (dp / 2.0).sin().powi(2) + p1.cos() * p2.cos() * (dl / 2.0).sin().powi(2);
    2.0 * R * a.sqrt().min(1.0).asin()
}

pub trait Geocoder: Send + Sync {
    fn forward(&self, query: &str) -> Result<Option<Place>, GeoError>;
    fn reverse(&self, lat: f64, lon: f64) -> Result<Option<Place>, GeoError>;
}

/// Geocoder over an in-memory [`Gazetteer`].
#[derive(Debug, Clone)]
pub struct GazetteerGeocoder {
    gazetteer: Arc<Gazetteer>,
    /// Reverse lookups farther than this from every row return nothing.
    pub reverse_radius_km: f64,
}

impl GazetteerGeocoder {
    pub const DEFAULT_RADIUS_KM: f64 = 50.0;

    pub fn new(gazetteer: Arc<Gazetteer>) -> Self {
        GazetteerGeocoder { gazetteer, reverse_radius_km: Self::DEFAULT_RADIUS_KM }
    }
}

impl Geocoder for GazetteerGeocoder {
    fn forward(&self, query: &str) -> Result<Option<Place>, GeoError> {
        Ok(self.gazetteer.lookup(query).cloned())
    }

    fn reverse(&self, lat: f64, lon: f64) -> Result<Option<Place>, GeoError> {
        Ok(self.gazetteer.nearest(lat, lon, self.reverse_radius_km).cloned())
    }
}

/// Spaces calls to an inner geocoder at least `min_interval` apart, as a
/// remote service's usage policy requires (1 request/second by default).
pub struct RateLimited<G> {
    inner: G,
    min_interval: Duration,
    last: Mutex<Option<Instant>>,
}

impl<G: Geocoder> RateLimited<G> {
    pub fn new(inner: G, min_interval: Duration) -> Self {
        RateLimited { inner, min_interval, last: Mutex::new(None) }
    }

    pub fn one_per_second(inner: G) -> Self {
        Self::new(inner, Duration::from_secs(1))
    }

    fn wait_turn(&self) {
        let mut last = self.last.lock().unwrap_or_else(|e| e.into_inner());
        if let Some(prev) = *last {
            let due = prev + self.min_interval;
            let now = Instant::now();
            if due > now {
                thread::sleep(due - now);
            }
        }
        *last = Some(Instant::now());
    }
}

impl<G: Geocoder> Geocoder for RateLimited<G> {
    fn forward(&self, query: &str) -> Result<Option<Place>, GeoError> {
        self.wait_turn();
        self.inner.forward(query)
    }

    fn reverse(&self, lat: f64, lon: f64) -> Result<Option<Place>, GeoError> {
        self.wait_turn();
        self.inner.reverse(lat, lon)
    }
}

/// Adds a fixed latency to every call, standing in for a remote round trip.
pub struct Delayed<G> {
    inner: G,
    delay: Duration,
    calls: AtomicU64,
}

impl<G: Geocoder> Delayed<G> {
    pub fn new(inner: G, delay: Duration) -> Self {
        Delayed { inner, delay, calls: AtomicU64::new(0) }
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }
}

impl<G: Geocoder> Geocoder for Delayed<G> {
    fn forward(&self, query: &str) -> Result<Option<Place>, GeoError> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        thread::sleep(self.delay);
        self.inner.forward(query)
    }

    fn reverse(&self, lat: f64, lon: f64) -> Result<Option<Place>, GeoError> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        thread::sleep(self.delay);
        self.inner.reverse(lat, lon)
    }
}

// ---------------------------------------------------------------------------
// Named-entity recognition

struct Token {
    start: usize,
    end: usize,
    norm: String,
}

fn tokenize(text: &str) -> Vec<Token> {
    let mut tokens = Vec::new();
    let mut current: Option<(usize, String)> = None;
    let mut idx = 0;
    for (i, c) in text.chars().enumerate() {
        idx = i + 1;
        if c.is_alphanumeric() {
            match current.as_mut() {
                Some((_, s)) => s.push(c),
                None => current = Some((i, c.to_string())),
            }
        } else if let Some((start, s)) = current.take() {
            tokens.push(Token { start, end: i, norm: s.nfc().collect::<String>().to_lowercase() });
        }
    }
    if let Some((start, s)) = current {
        tokens.push(Token { start, end: idx, norm: s.nfc().collect::<String>().to_lowercase() });
    }
    tokens
}

fn phrase_key(phrase: &str) -> String {
    tokenize(phrase).into_iter().map(|t| t.norm).collect::<Vec<_>>().join(" ")
}

/// Gazetteer-style tagger: greedy longest match of dictionary phrases over
/// word tokens, case-insensitive. Adjacent PERSON matches separated only by
/// whitespace merge into one mention ("John" + "Smith").
#[derive(Debug, Clone, Default)]
pub struct DictionaryTagger {
    phrases: HashMap<String, EntityKind>,
    max_tokens: usize,
}

impl DictionaryTagger {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a phrase; an existing entry for the same phrase is kept.
    pub fn add(&mut self, phrase: &str, kind: EntityKind) {
        let key = phrase_key(phrase);
        if key.is_empty() {
            return;
        }
        self.max_tokens = self.max_tokens.max(key.split(' ').count());
        self.phrases.entry(key).or_insert(kind);
    }

    /// Reads `phrase<TAB>kind` lines; blank lines and `#` comments are ignored.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, GeoError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| GeoError::Dictionary { path: path.display().to_string(), reason: e.to_string() })?;
        let mut tagger = Self::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let (phrase, kind) = line.split_once('\t').ok_or_else(|| GeoError::Dictionary {
                path: path.display().to_string(),
                reason: format!("line {}: expected phrase<TAB>kind", n + 1),
            })?;
            tagger.add(phrase, EntityKind::parse(kind));
        }
        Ok(tagger)
    }

    pub fn len(&self) -> usize {
        self.phrases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phrases.is_empty()
    }

    pub fn tag(&self, text: &str) -> Vec<NamedEntity> {
        let tokens = tokenize(text);
        let chars: Vec<char> = text.chars().collect();
        let mut found: Vec<NamedEntity> = Vec::new();
        let mut i = 0;
        while i < tokens.len() {
            let longest = self.max_tokens.min(tokens.len() - i);
            let hit = (1..=longest).rev().find_map(|len| {
                let key = tokens[i..i + len].iter().map(|t| t.norm.as_str()).collect::<Vec<_>>().join(" ");
                self.phrases.get(&key).map(|k| (len, *k))
            });
            match hit {
                Some((len, kind)) => {
                    let (start, end) = (tokens[i].start, tokens[i + len - 1].end);
                    found.push(NamedEntity { text: chars[start..end].iter().collect(), kind, start, end });
                    i += len;
                }
                None => i += 1,
            }
        }

        let mut merged: Vec<NamedEntity> = Vec::with_capacity(found.len());
        for e in found {
            if let Some(prev) = merged.last_mut() {
                let gap_is_space = chars[prev.end..e.start].iter().all(|c| c.is_whitespace());
                if prev.kind == EntityKind::Person && e.kind == EntityKind::Person && gap_is_space {
                    prev.end = e.end;
                    prev.text = chars[prev.start..prev.end].iter().collect();
                    continue;
                }
            }
            merged.push(e);
        }
        merged
    }
}

/// Languages with a dedicated tagger; everything else goes to the
/// multilingual fallback.
pub const ROUTED_LANGUAGES: [&str; 5] = ["en", "fr", "es", "pt", "it"];
pub const FALLBACK_LANGUAGE: &str = "ml";

/// Primary language subtag, lowercased: `"en-GB"` → `"en"`.
pub fn primary_subtag(lang: &str) -> String {
    lang.split(['-', '_']).next().unwrap_or("").trim().to_ascii_lowercase()
}

/// Per-language taggers behind an optional result cache keyed by
/// (routed language, text).
pub struct NerRouter {
    taggers: HashMap<String, DictionaryTagger>,
    fallback: DictionaryTagger,
    cache: Option<LruCache<(String, String), Vec<NamedEntity>>>,
}

impl fmt::Debug for NerRouter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("NerRouter").field("languages", &self.taggers.keys().collect::<Vec<_>>()).finish()
    }
}

impl NerRouter {
    pub fn new(fallback: DictionaryTagger) -> Self {
        NerRouter { taggers: HashMap::new(), fallback, cache: None }
    }

    pub fn with_language(mut self, lang: &str, tagger: DictionaryTagger) -> Self {
        let lang = primary_subtag(lang);
        if lang == FALLBACK_LANGUAGE {
            self.fallback = tagger;
        } else {
            self.taggers.insert(lang, tagger);
        }
        self
    }

    pub fn with_cache(mut self, capacity: usize) -> Self {
        self.cache = Some(LruCache::new(capacity));
        self
    }

    /// Loads `<lang>.tsv` for each routed language plus `ml.tsv`; missing
    /// files yield empty taggers. Every gazetteer name is added as LOCATION.
    pub fn load_dir(dir: impl AsRef<Path>, gazetteer: Option<&Gazetteer>) -> Result<Self, GeoError> {
        let dir = dir.as_ref();
        let load = |lang: &str| -> Result<DictionaryTagger, GeoError> {
            let path = dir.join(format!("{lang}.tsv"));
            let mut tagger = if path.exists() { DictionaryTagger::load(&path)? } else { DictionaryTagger::new() };
            if let Some(g) = gazetteer {
                for p in g.places() {
                    tagger.add(&p.name, EntityKind::Location);
                }
            }
            Ok(tagger)
        };
        let mut router = NerRouter::new(load(FALLBACK_LANGUAGE)?);
        for lang in ROUTED_LANGUAGES {
            router.taggers.insert(lang.to_string(), load(lang)?);
        }
        Ok(router)
    }

    /// Language key the text will be tagged under.
    pub fn route(&self, lang: &str) -> String {
        let primary = primary_subtag(lang);
        if ROUTED_LANGUAGES.contains(&primary.as_str()) && self.taggers.contains_key(&primary) {
            primary
        } else {
            FALLBACK_LANGUAGE.to_string()
        }
    }

    fn tagger(&self, routed: &str) -> &DictionaryTagger {
        self.taggers.get(routed).unwrap_or(&self.fallback)
    }

    pub fn tag(&self, text: &str, lang: &str) -> Vec<NamedEntity> {
        if text.is_empty() {
            return Vec::new();
        }
        let routed = self.route(lang);
        match &self.cache {
            Some(cache) => {
                let key = (routed.clone(), text.to_string());
                let result: Result<_, std::convert::Infallible> =
                    cache.get_or_compute(key, || Ok(self.tagger(&routed).tag(text)));
                result.map(|(v, _)| v).unwrap_or_else(|e| match e {})
            }
            None => self.tagger(&routed).tag(text),
        }
    }

    pub fn cache_stats(&self) -> Option<CacheStats> {
        self.cache.as_ref().map(LruCache::stats)
    }
}

pub fn ner_tag(text: &str, lang: &str, router: &NerRouter) -> Vec<NamedEntity> {
    router.tag(text, lang)
}

/// Person iff PERSON mentions cover at least half of the name's non-space
/// characters under the English tagger. Empty names are organizations.
pub fn classify_user_type(author_name: &str, ner: &NerRouter) -> UserType {
    let chars: Vec<char> = author_name.chars().collect();
    let total = chars.iter().filter(|c| !c.is_whitespace()).count();
    if total == 0 {
        return UserType::Organization;
    }
    let mut covered = vec![false; chars.len()];
    for e in ner.tag(author_name, "en").iter().filter(|e| e.kind == EntityKind::Person) {
        covered[e.start..e.end].iter_mut().for_each(|c| *c = true);
    }
    let person_chars = chars.iter().zip(&covered).filter(|(c, cov)| **cov && !c.is_whitespace()).count();
    if 2 * person_chars >= total {
        UserType::Person
    } else {
        UserType::Organization
    }
}

// ---------------------------------------------------------------------------
// Geolocation cascade

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum GeoKey {
    Forward(String),
    /// Coordinates in units of 1e-4 degrees.
    Reverse(i64, i64),
}

fn round4(x: f64) -> i64 {
    (x * 1e4).round() as i64
}

/// Infers a location for a post from its metadata, trying sources in the
/// fixed order gps, text, place, user location, profile description. The
/// first source that resolves to at least a country wins.
pub struct GeoTagger {
    geocoder: Arc<dyn Geocoder>,
    ner: Arc<NerRouter>,
    cache: Option<Arc<LruCache<GeoKey, Option<Place>>>>,
}

impl GeoTagger {
    pub fn new(geocoder: Arc<dyn Geocoder>, ner: Arc<NerRouter>) -> Self {
        GeoTagger { geocoder, ner, cache: None }
    }

    pub fn with_cache(mut self, capacity: usize) -> Self {
        self.cache = Some(Arc::new(LruCache::new(capacity)));
        self
    }

    pub fn with_shared_cache(mut self, cache: Arc<LruCache<GeoKey, Option<Place>>>) -> Self {
        self.cache = Some(cache);
        self
    }

    pub fn cache_stats(&self) -> Option<CacheStats> {
        self.cache.as_ref().map(|c| c.stats())
    }

    pub fn ner(&self) -> &NerRouter {
        &self.ner
    }

    fn resolve(&self, key: GeoKey) -> Option<Place> {
        let produce = || match &key {
            GeoKey::Forward(q) => self.geocoder.forward(q),
            GeoKey::Reverse(lat, lon) => self.geocoder.reverse(*lat as f64 / 1e4, *lon as f64 / 1e4),
        };
        let result = match &self.cache {
            Some(cache) => cache.get_or_compute(key.clone(), produce).map(|(v, _)| v),
            None => produce(),
        };
        match result {
            Ok(place) => place.filter(|p| p.country.is_some()),
            Err(e) => {
                log::debug!("geocoder failed for {key:?}: {e}");
                None
            }
        }
    }

    fn forward(&self, query: &str) -> Option<Place> {
        let q = normalize_query(query);
        if q.is_empty() {
            return None;
        }
        self.resolve(GeoKey::Forward(q))
    }

    fn place_in_entities(&self, text: &str, lang: &str) -> Option<Place> {
        self.ner
            .tag(text, lang)
            .into_iter()
            .filter(|e| e.kind == EntityKind::Location)
            .find_map(|e| self.forward(&e.text))
    }

    /// Free-text field: whole string, then comma-separated parts, then any
    /// LOCATION mentions inside it.
    fn place_in_free_text(&self, text: &str, lang: &str) -> Option<Place> {
        self.forward(text)
            .or_else(|| text.split(',').filter(|part| part.trim() != text.trim()).find_map(|part| self.forward(part)))
            .or_else(|| self.place_in_entities(text, lang))
    }

    pub fn geotag(&self, t: &Tweet) -> GeoTag {
        if let Some((lat, lon)) = t.gps {
            if let Some(p) = self.resolve(GeoKey::Reverse(round4(lat), round4(lon))) {
                return p.into_tag(GeoSource::Gps);
            }
        }
        if let Some(p) = self.place_in_entities(&t.text, &t.lang) {
            return p.into_tag(GeoSource::Text);
        }
        if let Some(p) = t.place_name.as_deref().and_then(|s| self.place_in_free_text(s, &t.lang)) {
            return p.into_tag(GeoSource::Place);
        }
        if let Some(p) = t.author_location.as_deref().and_then(|s| self.place_in_free_text(s, &t.lang)) {
            return p.into_tag(GeoSource::UserLocation);
        }
        if let Some(p) = t.author_description.as_deref().and_then(|s| self.place_in_entities(s, &t.lang)) {
            return p.into_tag(GeoSource::ProfileDescription);
        }
        GeoTag::none()
    }
}

pub fn geotag(t: &Tweet, tagger: &GeoTagger) -> GeoTag {
    tagger.geotag(t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::sync::atomic::AtomicUsize;

    fn place(name: &str, kind: PlaceKind, hierarchy: [&str; 4], lat: f64, lon: f64) -> Place {
        let f = |s: &str| (!s.is_empty()).then(|| s.to_string());
        Place {
            name: name.into(),
            kind,
            country: f(hierarchy[0]),
            state: f(hierarchy[1]),
            county: f(hierarchy[2]),
            city: f(hierarchy[3]),
            lat,
            lon,
        }
    }

    fn fixture_gazetteer() -> Arc<Gazetteer> {
        Arc::new(
            Gazetteer::from_places(vec![
                place("Ecuador", PlaceKind::Country, ["Ecuador", "", "", ""], -1.83, -78.18),
                place("Quito", PlaceKind::City, ["Ecuador", "Pichincha", "Quito", "Quito"], -0.2299, -78.5249),
                place("India", PlaceKind::Country, ["India", "", "", ""], 22.0, 79.0),
                place("Nagaland", PlaceKind::State, ["India", "Nagaland", "", ""], 26.16, 94.56),
                place("Ooty", PlaceKind::City, ["India", "Tamil Nadu", "Nilgiris", "Ooty"], 11.41, 76.69),
                place(
                    "London",
                    PlaceKind::City,
                    ["United Kingdom", "England", "Greater London", "London"],
                    51.507,
                    -0.128,
                ),
                place("Kathmandu", PlaceKind::City, ["Nepal", "Bagmati", "Kathmandu", "Kathmandu"], 27.717, 85.324),
                place("Oslo", PlaceKind::City, ["Norway", "Oslo", "Oslo", "Oslo"], 59.91, 10.75),
                place("Lima", PlaceKind::City, ["Peru", "Lima", "Lima", "Lima"], -12.046, -77.043),
                place("Seattle", PlaceKind::City, ["United States", "Washington", "King", "Seattle"], 47.606, -122.332),
                place("Georgia", PlaceKind::Country, ["Georgia", "", "", ""], 42.3, 43.36),
                place("Georgia", PlaceKind::State, ["United States", "Georgia", "", ""], 32.16, -82.9),
            ])
            .unwrap(),
        )
    }

    fn fixture_ner(g: &Gazetteer) -> NerRouter {
        let mut en = DictionaryTagger::new();
        for n in ["John", "Smith", "Maria", "Garcia"] {
            en.add(n, EntityKind::Person);
        }
        en.add("British Geological Survey", EntityKind::Organization);
        let mut all = [en, DictionaryTagger::new(), DictionaryTagger::new()];
        for t in all.iter_mut() {
            for p in g.places() {
                t.add(&p.name, EntityKind::Location);
            }
        }
        let [en, es, ml] = all;
        NerRouter::new(ml).with_language("en", en).with_language("es", es)
    }

    fn tagger(cache: bool) -> GeoTagger {
        let g = fixture_gazetteer();
        let t = GeoTagger::new(Arc::new(GazetteerGeocoder::new(Arc::clone(&g))), Arc::new(fixture_ner(&g)));
        if cache {
            t.with_cache(64)
        } else {
            t
        }
    }

    fn tweet() -> Tweet {
        Tweet {
            id: "1".into(),
            text: String::new(),
            lang: "en".into(),
            created_at: 0,
            gps: None,
            place_name: None,
            author_name: String::new(),
            author_location: None,
            author_description: None,
            image_urls: vec![],
        }
    }

    #[test]
    fn lru_miss_then_hit() {
        let cache = LruCache::new(4);
        let calls = AtomicUsize::new(0);
        let produce = || -> Result<u32, ()> {
            calls.fetch_add(1, Ordering::SeqCst);
            Ok(7)
        };
        assert_eq!(cache_get_or_compute(&cache, "k", produce).unwrap(), (7, false));
        assert_eq!(cache_get_or_compute(&cache, "k", produce).unwrap(), (7, true));
        assert_eq!(calls.load(Ordering::SeqCst), 1);
        assert_eq!(cache.stats(), CacheStats { hits: 1, misses: 1, len: 1, capacity: 4 });
    }

    #[test]
    fn lru_trace_evicts_least_recent() {
        let cache = LruCache::new(2);
        let mut produced = Vec::new();
        for key in ["a", "b", "c", "a"] {
            let (_, hit) = cache
                .get_or_compute(key, || -> Result<(), ()> {
                    produced.push(key);
                    Ok(())
                })
                .unwrap();
            assert!(!hit);
        }
        assert_eq!(produced, vec!["a", "b", "c", "a"]);
        assert!(cache.get(&"b").is_none());
        assert_eq!(cache.len(), 2);
    }

    #[test]
    fn lru_producer_error_caches_nothing() {
        let cache: LruCache<&str, u8> = LruCache::new(2);
        assert_eq!(cache.get_or_compute("k", || Err("boom")), Err("boom"));
        assert!(cache.is_empty());
        assert_eq!(cache.get_or_compute("k", || Ok::<_, ()>(1)).unwrap(), (1, false));
    }

    #[test]
    fn lru_single_flight_under_contention() {
        let cache = Arc::new(LruCache::new(8));
        let calls = Arc::new(AtomicUsize::new(0));
        let handles: Vec<_> = (0..8)
            .map(|_| {
                let cache = Arc::clone(&cache);
                let calls = Arc::clone(&calls);
                thread::spawn(move || {
                    cache
                        .get_or_compute("shared", || -> Result<u32, ()> {
                            calls.fetch_add(1, Ordering::SeqCst);
                            thread::sleep(Duration::from_millis(20));
                            Ok(42)
                        })
                        .unwrap()
                        .0
                })
            })
            .collect();
        for h in handles {
            assert_eq!(h.join().unwrap(), 42);
        }
        assert_eq!(calls.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn cached_repeats_skip_slow_producer() {
        let cache = LruCache::new(4);
        let start = Instant::now();
        for _ in 0..100 {
            cache
                .get_or_compute("slow", || -> Result<(), ()> {
                    thread::sleep(Duration::from_millis(20));
                    Ok(())
                })
                .unwrap();
        }
        let elapsed = start.elapsed();
        assert!(elapsed < Duration::from_millis(20 * 5), "{elapsed:?}");
        assert_eq!(cache.stats().misses, 1);
    }

    #[test]
    fn tags_gazetteer_location() {
        let g = fixture_gazetteer();
        let ner = fixture_ner(&g);
        let ents = ner_tag("Landslide in Nagaland", "en", &ner);
        assert_eq!(ents, vec![NamedEntity { text: "Nagaland".into(), kind: EntityKind::Location, start: 13, end: 21 }]);
        assert!(ner_tag("", "fr", &ner).is_empty());
    }

    #[test]
    fn spans_are_character_offsets() {
        let mut t = DictionaryTagger::new();
        t.add("Zürich", EntityKind::Location);
        let e = t.tag("Erdrutsch bei Zürich!");
        assert_eq!((e[0].start, e[0].end), (14, 20));
        assert_eq!(e[0].text, "Zürich");
    }

    #[test]
    fn longest_match_wins() {
        let mut t = DictionaryTagger::new();
        t.add("York", EntityKind::Location);
        t.add("New York City", EntityKind::Location);
        let e = t.tag("flooding in new york city today");
        assert_eq!(e.len(), 1);
        assert_eq!(e[0].text, "new york city");
    }

    #[test]
    fn cache_hit_returns_identical_result() {
        let g = fixture_gazetteer();
        let ner = fixture_ner(&g).with_cache(8);
        let first = ner.tag("Landslide near Quito", "en");
        let second = ner.tag("Landslide near Quito", "en");
        assert_eq!(first, second);
        let stats = ner.cache_stats().unwrap();
        assert_eq!((stats.hits, stats.misses), (1, 1));
    }

    #[test]
    fn language_routing() {
        let g = fixture_gazetteer();
        let ner = fixture_ner(&g);
        assert_eq!(ner.route("en-GB"), "en");
        assert_eq!(ner.route("ES"), "es");
        // Routed language without a loaded tagger and unknown languages use the fallback.
        assert_eq!(ner.route("fr"), FALLBACK_LANGUAGE);
        assert_eq!(ner.route("ne"), FALLBACK_LANGUAGE);
        assert_eq!(ner.route(""), FALLBACK_LANGUAGE);
        // PERSON names are only in the English dictionary.
        assert_eq!(ner.tag("John", "en").len(), 1);
        assert!(ner.tag("John", "ne").is_empty());
    }

    #[test]
    fn user_types() {
        let g = fixture_gazetteer();
        let ner = fixture_ner(&g);
        assert_eq!(classify_user_type("John Smith", &ner), UserType::Person);
        assert_eq!(classify_user_type("British Geological Survey", &ner), UserType::Organization);
        assert_eq!(classify_user_type("", &ner), UserType::Organization);
        assert_eq!(classify_user_type("Smith Geological Ltd", &ner), UserType::Organization);
        assert_eq!(classify_user_type("Maria", &ner), UserType::Person);
    }

    #[test]
    fn gps_wins_over_everything() {
        let mut t = tweet();
        t.gps = Some((-0.2, -78.5));
        t.text = "landslide in Nagaland".into();
        t.place_name = Some("London".into());
        let tag = tagger(false).geotag(&t);
        assert_eq!(tag.country.as_deref(), Some("Ecuador"));
        assert_eq!(tag.city.as_deref(), Some("Quito"));
        assert_eq!(tag.source_field, GeoSource::Gps);
    }

    #[test]
    fn text_beats_place() {
        let mut t = tweet();
        t.text = "mudslide near Ooty".into();
        t.place_name = Some("London".into());
        let tag = tagger(true).geotag(&t);
        assert_eq!(tag.country.as_deref(), Some("India"));
        assert_eq!(tag.source_field, GeoSource::Text);
    }

    #[test]
    fn no_metadata_is_none() {
        let tag = tagger(true).geotag(&tweet());
        assert_eq!(tag, GeoTag::none());
    }

    #[test]
    fn gps_outside_radius_falls_through() {
        let mut t = tweet();
        t.gps = Some((0.0, -150.0));
        t.author_location = Some("Seattle, WA".into());
        let tag = tagger(false).geotag(&t);
        assert_eq!(tag.source_field, GeoSource::UserLocation);
        assert_eq!(tag.state.as_deref(), Some("Washington"));
    }

    #[test]
    fn free_text_segments_and_mentions() {
        let mut t = tweet();
        t.place_name = Some("Pichincha region, Quito".into());
        assert_eq!(tagger(false).geotag(&t).city.as_deref(), Some("Quito"));
        let mut t = tweet();
        t.author_description = Some("Geologist based in Kathmandu and Oslo".into());
        let tag = tagger(false).geotag(&t);
        assert_eq!((tag.country.as_deref(), tag.source_field), (Some("Nepal"), GeoSource::ProfileDescription));
    }

    #[test]
    fn homonyms_resolve_most_specific_kind_first() {
        let g = fixture_gazetteer();
        assert_eq!(g.lookup("georgia").unwrap().kind, PlaceKind::State);
    }

    #[test]
    fn gazetteer_validation() {
        let dup = vec![
            place("X", PlaceKind::City, ["A", "", "", "X"], 0.0, 0.0),
            place("x", PlaceKind::City, ["B", "", "", "X"], 1.0, 1.0),
        ];
        assert!(Gazetteer::from_places(dup).is_err());
        let bad = vec![place("Y", PlaceKind::City, ["A", "", "", "Y"], 95.0, 0.0)];
        assert!(Gazetteer::from_places(bad).is_err());
    }

    #[test]
    fn gazetteer_and_dictionary_files() {
        let dir = tempfile::tempdir().unwrap();
        let gpath = dir.path().join("gaz.csv");
        std::fs::write(
            &gpath,
            "name,kind,country,state,county,city,lat,lon\nQuito,city,Ecuador,Pichincha,Quito,Quito,-0.2299,-78.5249\nEcuador,country,Ecuador,,,,-1.83,-78.18\n",
        )
        .unwrap();
        let g = Gazetteer::load(&gpath).unwrap();
        assert_eq!(g.len(), 2);
        assert_eq!(g.lookup("ECUADOR").unwrap().state, None);
        std::fs::write(dir.path().join("en.tsv"), "# given names\nJohn\tPERSON\nRed Cross\tORG\n").unwrap();
        let ner = NerRouter::load_dir(dir.path(), Some(&g)).unwrap();
        let e = ner.tag("John from the Red Cross in Quito", "en");
        let kinds: Vec<_> = e.iter().map(|e| e.kind).collect();
        assert_eq!(kinds, vec![EntityKind::Person, EntityKind::Organization, EntityKind::Location]);
        // Fallback tagger still knows gazetteer names.
        assert_eq!(ner.tag("Quito", "ne").len(), 1);
        std::fs::write(dir.path().join("fr.tsv"), "no tab here\n").unwrap();
        assert!(NerRouter::load_dir(dir.path(), None).is_err());
    }

    struct Failing;
    impl Geocoder for Failing {
        fn forward(&self, _: &str) -> Result<Option<Place>, GeoError> {
            Err(GeoError::Unavailable("down".into()))
        }
        fn reverse(&self, _: f64, _: f64) -> Result<Option<Place>, GeoError> {
            Err(GeoError::Unavailable("down".into()))
        }
    }

    #[test]
    fn geocoder_failure_yields_none() {
        let g = fixture_gazetteer();
        let t = GeoTagger::new(Arc::new(Failing), Arc::new(fixture_ner(&g))).with_cache(4);
        let mut tw = tweet();
        tw.gps = Some((-0.2, -78.5));
        tw.text = "Quito".into();
        assert_eq!(t.geotag(&tw), GeoTag::none());
        assert_eq!(t.cache_stats().unwrap().len, 0);
    }

    #[test]
    fn rate_limiter_spaces_calls() {
        let g = RateLimited::new(GazetteerGeocoder::new(fixture_gazetteer()), Duration::from_millis(30));
        let start = Instant::now();
        for _ in 0..3 {
            g.forward("Quito").unwrap();
        }
        assert!(start.elapsed() >= Duration::from_millis(60));
    }

    proptest! {
        #[test]
        fn cache_never_exceeds_capacity(cap in 1usize..8, keys in proptest::collection::vec(0u8..20, 0..100)) {
            let cache = LruCache::new(cap);
            for k in keys {
                cache.get_or_compute(k, || Ok::<_, ()>(k)).unwrap();
                prop_assert!(cache.len() <= cap);
            }
        }

        #[test]
        fn repeated_stream_hit_ratio(k in 1usize..8, n in 8usize..200) {
            let cache = LruCache::new(8);
            let mut hits = 0;
            for i in 0..n {
                if cache.get_or_compute(i % k, || Ok::<_, ()>(())).unwrap().1 {
                    hits += 1;
                }
            }
            prop_assert_eq!(hits, n - k.min(n));
        }

        #[test]
        fn tagging_is_pure(text in "[a-zA-Z ]{0,40}", evict in proptest::collection::vec("[a-z]{1,6}", 0..10)) {
            let g = fixture_gazetteer();
            let cached = fixture_ner(&g).with_cache(2);
            let plain = fixture_ner(&g);
            let first = cached.tag(&text, "en");
            for e in &evict {
                cached.tag(e, "en");
            }
            prop_assert_eq!(&cached.tag(&text, "en"), &first);
            prop_assert_eq!(plain.tag(&text, "en"), first);
        }
    }
}

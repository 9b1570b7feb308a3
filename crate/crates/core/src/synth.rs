//! Synthetic corpora with planted labels: replay posts, image fixtures,
//! lookup-classifier scores, geo fixtures and a matching pipeline config.
//! Every count the pipeline should report is fixed by the plan.

use std::collections::HashMap;
use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::collectors::{image_id_for_url, DirFetcher};
use crate::model::{serialize_tweet, Tweet};
use crate::pipeline::{CacheConfig, ClassifierConfig, ExtractorConfig, PipelineConfig, WorkerCounts};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("invalid plan: {0}")]
    Plan(String),
}

fn io_at(path: &Path) -> impl FnOnce(io::Error) -> SynthError + '_ {
    move |source| SynthError::Io { path: path.to_path_buf(), source }
}

/// Planted composition of a corpus. Every matching post carries one image.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FunnelPlan {
    /// Distinct images that will be fetched.
    pub fetched: usize,
    /// Images the junk filter labels not-relevant.
    pub junk: usize,
    /// Relevant images that are byte copies of an earlier relevant image.
    pub duplicates: usize,
    /// Landslide images among those neither junk nor duplicate.
    pub landslide: usize,
    /// Posts without any keyword; their images must never be fetched.
    pub non_matching: usize,
    /// Matching posts that reuse an earlier post's image URL.
    pub repeated_urls: usize,
    pub seed: u64,
    /// Stub extractor dimension written to the config.
    pub feature_dim: usize,
}

impl FunnelPlan {
    /// Deployment-style funnel: 76% junk, a further 9% duplicates, and
    /// 0.84% of the remaining 15% landslide. `fetched` must make every
    /// share a whole number (50,000 does).
    pub fn deployment(fetched: usize, seed: u64) -> Result<Self, SynthError> {
        let exact = |num: usize, den: usize, what: &str| {
            if num % den == 0 {
                Ok(num / den)
            } else {
                Err(SynthError::Plan(format!("{fetched} images do not give a whole number of {what}")))
            }
        };
        let junk = exact(fetched * 76, 100, "junk images")?;
        let duplicates = exact(fetched * 9, 100, "duplicates")?;
        let remaining = fetched - junk - duplicates;
        let landslide = exact(remaining * 84, 10_000, "landslide images")?;
        Ok(FunnelPlan {
            fetched,
            junk,
            duplicates,
            landslide,
            non_matching: 0,
            repeated_urls: 0,
            seed,
            feature_dim: 64,
        })
    }

    pub fn remaining(&self) -> usize {
        self.fetched.saturating_sub(self.junk + self.duplicates)
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::Plan(m));
        if self.junk + self.duplicates > self.fetched {
            return bad(format!("junk {} + duplicates {} exceed {} images", self.junk, self.duplicates, self.fetched));
        }
        if self.landslide > self.remaining() {
            return bad(format!("{} landslide images but only {} remain", self.landslide, self.remaining()));
        }
        if self.duplicates > 0 && self.remaining() == 0 {
            return bad("duplicates need at least one relevant original".into());
        }
        if self.repeated_urls > 0 && self.fetched == 0 {
            return bad("repeated URLs need at least one image".into());
        }
        if self.feature_dim == 0 {
            return bad("feature_dim must be >= 1".into());
        }
        Ok(())
    }
}

/// Counts a run over the generated corpus must report.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ExpectedCounts {
    pub posts: u64,
    pub matched: u64,
    pub refs: u64,
    pub fetched: u64,
    pub skipped_urls: u64,
    pub junk: u64,
    pub additional_duplicates: u64,
    pub remaining: u64,
    pub landslide: u64,
}

#[derive(Debug, Clone)]
pub struct GeneratedCorpus {
    pub root: PathBuf,
    pub config_path: PathBuf,
    pub corpus_path: PathBuf,
    pub fixtures_dir: PathBuf,
    pub expected: ExpectedCounts,
}

impl GeneratedCorpus {
    /// The config with its relative paths resolved.
    pub fn config(&self) -> Result<PipelineConfig, crate::pipeline::PipelineError> {
        PipelineConfig::load(&self.config_path)
    }
}

// Place fixtures: name, kind, country, state, county, city, lat, lon.
const PLACES: &[(&str, &str, &str, &str, &str, &str, f64, f64)] = &[
    ("India", "country", "India", "", "", "", 22.0, 79.0),
    ("Nagaland", "state", "India", "Nagaland", "", "", 26.16, 94.56),
    ("Ooty", "city", "India", "Tamil Nadu", "Nilgiris", "Ooty", 11.41, 76.69),
    ("Shimla", "city", "India", "Himachal Pradesh", "Shimla", "Shimla", 31.104, 77.173),
    ("Ecuador", "country", "Ecuador", "", "", "", -1.83, -78.18),
    ("Quito", "city", "Ecuador", "Pichincha", "Quito", "Quito", -0.2299, -78.5249),
    ("Nepal", "country", "Nepal", "", "", "", 28.39, 84.12),
    ("Kathmandu", "city", "Nepal", "Bagmati", "Kathmandu", "Kathmandu", 27.717, 85.324),
    ("Italy", "country", "Italy", "", "", "", 42.5, 12.5),
    ("Genoa", "city", "Italy", "Liguria", "Genoa", "Genoa", 44.4056, 8.9463),
    ("Brazil", "country", "Brazil", "", "", "", -10.0, -55.0),
    ("Petropolis", "city", "Brazil", "Rio de Janeiro", "Petropolis", "Petropolis", -22.505, -43.178),
    ("Colombia", "country", "Colombia", "", "", "", 4.57, -74.3),
    ("Medellin", "city", "Colombia", "Antioquia", "Medellin", "Medellin", 6.2442, -75.5812),
    ("Washington", "state", "United States", "Washington", "", "", 47.4, -120.5),
    ("Seattle", "city", "United States", "Washington", "King", "Seattle", 47.606, -122.332),
    ("United Kingdom", "country", "United Kingdom", "", "", "", 54.0, -2.0),
    ("Keswick", "city", "United Kingdom", "England", "Cumbria", "Keswick", 54.601, -3.134),
];

const PERSON_NAMES: &[&str] =
    &["John", "Smith", "Maria", "Garcia", "Priya", "Sharma", "Luca", "Rossi", "Ana", "Silva", "Aarav", "Thapa"];
const ORGANIZATIONS: &[&str] =
    &["British Geological Survey", "Red Cross", "Disaster Management Authority", "Civil Protection", "Highway Patrol"];

pub const KEYWORDS: &[(&str, &str)] = &[
    ("landslide", "en"),
    ("mudslide", "en"),
    ("derrumbe", "es"),
    ("deslizamiento", "es"),
    ("frana", "it"),
    ("glissement de terrain", "fr"),
    ("deslizamento", "pt"),
];

fn write_file(path: &Path, contents: &str) -> Result<(), SynthError> {
    fs::write(path, contents).map_err(io_at(path))
}

/// Writes `gazetteer.csv` and `ner/<lang>.tsv` under `dir`.
pub fn write_geo_fixtures(dir: &Path) -> Result<(PathBuf, PathBuf), SynthError> {
    let gazetteer = dir.join("gazetteer.csv");
    let mut csv = String::from("name,kind,country,state,county,city,lat,lon\n");
    for (name, kind, country, state, county, city, lat, lon) in PLACES {
        csv.push_str(&format!("{name},{kind},{country},{state},{county},{city},{lat},{lon}\n"));
    }
    write_file(&gazetteer, &csv)?;

    let ner = dir.join("ner");
    fs::create_dir_all(&ner).map_err(io_at(&ner))?;
    let mut en = String::new();
    for n in PERSON_NAMES {
        en.push_str(&format!("{n}\tPERSON\n"));
    }
    for o in ORGANIZATIONS {
        en.push_str(&format!("{o}\tORG\n"));
    }
    write_file(&ner.join("en.tsv"), &en)?;
    write_file(&ner.join("es.tsv"), "Cruz Roja\tORG\nMaria\tPERSON\nGarcia\tPERSON\n")?;
    write_file(&ner.join("ml.tsv"), "# multilingual fallback: gazetteer names only\n")?;
    Ok((gazetteer, ner))
}

pub fn write_keywords(path: &Path) -> Result<(), SynthError> {
    let mut csv = String::from("keyword,language\n");
    for (k, l) in KEYWORDS {
        csv.push_str(&format!("{k},{l}\n"));
    }
    write_file(path, &csv)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Role {
    Junk,
    Original { landslide: bool },
    Copy { of: usize },
}

struct Post {
    key: f64,
    matching: bool,
    image: usize,
}

fn image_url(seed: u64, image: usize) -> String {
    format!("https://img.example.org/{seed}/{image}.jpg")
}

/// Adds location metadata to a post, drawing one source at random.
fn decorate(t: &mut Tweet, rng: &mut ChaCha8Rng) {
    let cities: Vec<_> = PLACES.iter().filter(|p| p.1 == "city").collect();
    let city = cities[rng.gen_range(0..cities.len())];
    match rng.gen_range(0..6) {
        0 => t.gps = Some((city.6 + rng.gen_range(-0.05..0.05), city.7 + rng.gen_range(-0.05..0.05))),
        1 => t.text.push_str(&format!(" near {}", city.0)),
        2 => t.place_name = Some(format!("{}, {}", city.0, city.2)),
        3 => t.author_location = Some(city.0.to_string()),
        4 => t.author_description = Some(format!("Volunteer reporting from {}", city.0)),
        _ => {}
    }
    t.author_name = if rng.gen_bool(0.6) {
        format!(
            "{} {}",
            PERSON_NAMES[rng.gen_range(0..PERSON_NAMES.len())],
            PERSON_NAMES[rng.gen_range(0..PERSON_NAMES.len())]
        )
    } else {
        ORGANIZATIONS[rng.gen_range(0..ORGANIZATIONS.len())].to_string()
    };
}

/// Writes a corpus realizing `plan` into `dir`, plus everything a pipeline
/// config needs to run over it.
pub fn generate_corpus(plan: &FunnelPlan, dir: &Path) -> Result<GeneratedCorpus, SynthError> {
    plan.validate()?;
    fs::create_dir_all(dir).map_err(io_at(dir))?;
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);

    // Roles: a shuffled assignment of junk / original / copy to image slots.
    let originals = plan.remaining();
    let mut roles: Vec<Role> = Vec::with_capacity(plan.fetched);
    roles.extend(std::iter::repeat_n(Role::Junk, plan.junk));
    roles.extend((0..originals).map(|i| Role::Original { landslide: i < plan.landslide }));
    roles.shuffle(&mut rng);
    let original_slots: Vec<usize> =
        roles.iter().enumerate().filter(|(_, r)| matches!(r, Role::Original { .. })).map(|(i, _)| i).collect();
    for _ in 0..plan.duplicates {
        let of = original_slots[rng.gen_range(0..original_slots.len())];
        roles.push(Role::Copy { of });
    }

    // Stream position: copies and repeated URLs always follow their source.
    let mut keys = vec![0.0f64; roles.len()];
    for (i, role) in roles.iter().enumerate() {
        keys[i] = match role {
            Role::Copy { of } => keys[*of] + (1.0 - keys[*of]) * rng.gen_range(0.0..1.0),
            _ => rng.gen_range(0.0..1.0),
        };
    }
    let mut posts: Vec<Post> = (0..roles.len()).map(|i| Post { key: keys[i], matching: true, image: i }).collect();
    for _ in 0..plan.repeated_urls {
        let image = rng.gen_range(0..roles.len());
        posts.push(Post { key: keys[image] + (1.0 - keys[image]) * rng.gen_range(0.0..1.0), matching: true, image });
    }
    let mut extra_image = roles.len();
    for _ in 0..plan.non_matching {
        posts.push(Post { key: rng.gen_range(0.0..1.0), matching: false, image: extra_image });
        extra_image += 1;
    }
    let mut order: Vec<usize> = (0..posts.len()).collect();
    order.sort_by(|&a, &b| posts[a].key.total_cmp(&posts[b].key).then(a.cmp(&b)));

    // Image fixtures and lookup scores.
    let fixtures_dir = dir.join("fixtures");
    fs::create_dir_all(&fixtures_dir).map_err(io_at(&fixtures_dir))?;
    let mut content_of: HashMap<usize, Vec<u8>> = HashMap::new();
    let mut junk_scores = String::from("image_id,score\n");
    let mut landslide_scores = String::from("image_id,score\n");
    let mut scores: Vec<(f64, f64)> = vec![(0.0, 0.0); roles.len()];
    for (i, role) in roles.iter().enumerate() {
        scores[i] = match role {
            Role::Junk => (rng.gen_range(0.01..0.45), rng.gen_range(0.01..0.45)),
            Role::Original { landslide: true } => (rng.gen_range(0.55..0.99), rng.gen_range(0.55..0.99)),
            Role::Original { landslide: false } => (rng.gen_range(0.55..0.99), rng.gen_range(0.01..0.45)),
            Role::Copy { of } => scores[*of],
        };
    }
    for i in 0..extra_image {
        let url = image_url(plan.seed, i);
        let bytes = match roles.get(i) {
            Some(Role::Copy { of }) => content_of[of].clone(),
            _ => format!("synthetic image {} #{i}", plan.seed).into_bytes(),
        };
        let path = DirFetcher::fixture_path(&fixtures_dir, &url);
        fs::write(&path, &bytes).map_err(io_at(&path))?;
        if i < roles.len() {
            let id = image_id_for_url(&url);
            junk_scores.push_str(&format!("{id},{}\n", scores[i].0));
            landslide_scores.push_str(&format!("{id},{}\n", scores[i].1));
            content_of.insert(i, bytes);
        }
    }
    write_file(&dir.join("junk_scores.csv"), &junk_scores)?;
    write_file(&dir.join("landslide_scores.csv"), &landslide_scores)?;

    // Posts in stream order.
    let corpus_path = dir.join("corpus.ndjson");
    let file = fs::File::create(&corpus_path).map_err(io_at(&corpus_path))?;
    let mut out = BufWriter::new(file);
    for (n, &p) in order.iter().enumerate() {
        let post = &posts[p];
        let (kw, lang) = KEYWORDS[rng.gen_range(0..KEYWORDS.len())];
        let text = if post.matching {
            format!("Huge {kw} after heavy rain, road blocked #{n}")
        } else {
            format!("Clear skies over the valley today #{n}")
        };
        let mut tweet = Tweet {
            id: format!("{}", 1_000_000 + n),
            text,
            lang: lang.to_string(),
            created_at: 1_500_000_000_000 + n as i64 * 1000,
            gps: None,
            place_name: None,
            author_name: String::new(),
            author_location: None,
            author_description: None,
            image_urls: vec![image_url(plan.seed, post.image)],
        };
        decorate(&mut tweet, &mut rng);
        writeln!(out, "{}", serialize_tweet(&tweet)).map_err(io_at(&corpus_path))?;
    }
    out.flush().map_err(io_at(&corpus_path))?;

    write_keywords(&dir.join("keywords.csv"))?;
    let (gazetteer, ner_dir) = write_geo_fixtures(dir)?;
    let config = PipelineConfig {
        keywords: "keywords.csv".into(),
        corpus: Some("corpus.ndjson".into()),
        replay_rate: None,
        fixtures: "fixtures".into(),
        out_dir: Some("out".into()),
        queue_capacity: 1024,
        duplicate_threshold: crate::dedup::DEFAULT_THRESHOLD,
        fetch_retries: 0,
        extractor: ExtractorConfig::Stub { dim: plan.feature_dim, seed: plan.seed },
        junk: ClassifierConfig::Lookup { path: "junk_scores.csv".into() },
        landslide: ClassifierConfig::Lookup { path: "landslide_scores.csv".into() },
        gazetteer: Some(gazetteer.strip_prefix(dir).unwrap_or(&gazetteer).to_path_buf()),
        ner_dir: Some(ner_dir.strip_prefix(dir).unwrap_or(&ner_dir).to_path_buf()),
        cache: CacheConfig::default(),
        workers: WorkerCounts::default(),
    };
    let config_path = dir.join("pipeline.toml");
    write_file(&config_path, &config.to_toml())?;

    let matched = (roles.len() + plan.repeated_urls) as u64;
    Ok(GeneratedCorpus {
        root: dir.to_path_buf(),
        config_path,
        corpus_path,
        fixtures_dir,
        expected: ExpectedCounts {
            posts: posts.len() as u64,
            matched,
            refs: matched,
            fetched: plan.fetched as u64,
            skipped_urls: plan.repeated_urls as u64,
            junk: plan.junk as u64,
            additional_duplicates: plan.duplicates as u64,
            remaining: plan.remaining() as u64,
            landslide: plan.landslide as u64,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::parse_tweet;

    #[test]
    fn deployment_plan_at_50k() {
        let p = FunnelPlan::deployment(50_000, 1).unwrap();
        assert_eq!((p.junk, p.duplicates, p.remaining(), p.landslide), (38_000, 4_500, 7_500, 63));
        assert!(FunnelPlan::deployment(1_234, 1).is_err());
    }

    #[test]
    fn invalid_plans() {
        let mut p = FunnelPlan::deployment(50_000, 1).unwrap();
        p.landslide = 7_501;
        assert!(p.validate().is_err());
        let p = FunnelPlan { fetched: 3, junk: 3, duplicates: 1, ..FunnelPlan::deployment(0, 0).unwrap() };
        assert!(p.validate().is_err());
    }

    #[test]
    fn copies_follow_originals_and_share_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let plan = FunnelPlan {
            fetched: 40,
            junk: 10,
            duplicates: 10,
            landslide: 3,
            non_matching: 5,
            repeated_urls: 4,
            seed: 9,
            feature_dim: 16,
        };
        let g = generate_corpus(&plan, dir.path()).unwrap();
        assert_eq!(g.expected.posts, 49);
        let text = fs::read_to_string(&g.corpus_path).unwrap();
        let tweets: Vec<Tweet> = text.lines().map(|l| parse_tweet(l).unwrap()).collect();
        assert_eq!(tweets.len(), 49);

        // Each distinct byte string's first appearance must come before its copies.
        let mut first_by_bytes: HashMap<Vec<u8>, usize> = HashMap::new();
        let mut copies = 0;
        let mut seen_urls = std::collections::HashSet::new();
        for (pos, t) in tweets.iter().enumerate() {
            let url = &t.image_urls[0];
            if !seen_urls.insert(url.clone()) {
                continue;
            }
            let bytes = fs::read(DirFetcher::fixture_path(&g.fixtures_dir, url)).unwrap();
            match first_by_bytes.get(&bytes) {
                Some(&first) => {
                    assert!(first < pos);
                    copies += 1;
                }
                None => {
                    first_by_bytes.insert(bytes, pos);
                }
            }
        }
        assert_eq!(copies, 10);
        let cfg = g.config().unwrap();
        cfg.validate().unwrap();
        assert!(cfg.keywords.is_file() && cfg.gazetteer.unwrap().is_file());
    }

    #[test]
    fn generation_is_deterministic() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let plan = FunnelPlan {
            fetched: 100,
            junk: 76,
            duplicates: 9,
            landslide: 2,
            non_matching: 3,
            repeated_urls: 2,
            seed: 5,
            feature_dim: 8,
        };
        let ga = generate_corpus(&plan, a.path()).unwrap();
        let gb = generate_corpus(&plan, b.path()).unwrap();
        assert_eq!(fs::read(ga.corpus_path).unwrap(), fs::read(gb.corpus_path).unwrap());
        assert_eq!(
            fs::read(a.path().join("junk_scores.csv")).unwrap(),
            fs::read(b.path().join("junk_scores.csv")).unwrap()
        );
    }
}

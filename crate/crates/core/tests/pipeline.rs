use std::collections::BTreeMap;
use std::fs;

use slidestream::broker::Channel;
use slidestream::collectors::DirFetcher;
use slidestream::model::{serialize_tweet, GeoSource, ImageRecord, Tweet};
use slidestream::pipeline::{run_pipeline, run_pipeline_with_events, PipelineConfig, PipelineEvent, IMAGE_INDEX_FILE};
use slidestream::storage::DocStore;
use slidestream::synth::{generate_corpus, FunnelPlan};

fn small_plan(seed: u64) -> FunnelPlan {
    FunnelPlan {
        fetched: 200,
        junk: 120,
        duplicates: 30,
        landslide: 7,
        non_matching: 25,
        repeated_urls: 15,
        seed,
        feature_dim: 64,
    }
}

fn merged_docs(cfg: &PipelineConfig) -> BTreeMap<String, String> {
    let store = DocStore::open("image_index", cfg.out_dir.as_ref().unwrap().join(IMAGE_INDEX_FILE)).unwrap();
    store.scan().map(|r| r.unwrap()).collect()
}

#[test]
fn planted_corpus_counts() {
    let dir = tempfile::tempdir().unwrap();
    let g = generate_corpus(&small_plan(11), dir.path()).unwrap();
    let cfg = g.config().unwrap();
    let report = run_pipeline(&cfg).unwrap();
    let e = &g.expected;

    assert!(!report.failed, "{}", report.to_json());
    assert_eq!(report.tweets.seen, e.posts);
    assert_eq!(report.tweets.matched, e.matched);
    assert_eq!(report.tweets.refs_pushed, e.refs);
    assert_eq!(report.images.fetched, e.fetched);
    assert_eq!(report.images.skipped, e.skipped_urls);
    assert_eq!(report.merged_docs, e.fetched);
    assert_eq!(report.in_flight, 0);
    assert_eq!(report.funnel.junk, e.junk);
    assert_eq!(report.funnel.additional_duplicates, e.additional_duplicates);
    assert_eq!(report.funnel.remaining, e.remaining);
    assert_eq!(report.funnel.landslide, e.landslide);
    assert_eq!(report.verdicts.processing_failures, 0);

    let docs = merged_docs(&cfg);
    assert_eq!(docs.len() as u64, e.fetched);
    for doc in docs.values() {
        let r: ImageRecord = serde_json::from_str(doc).unwrap();
        assert!(r.duplicate.is_some() && r.junk.is_some() && r.landslide.is_some());
        assert!(r.geo.is_some() && r.user_type.is_some());
    }
    let geo_total: u64 = report.verdicts.geo_sources.values().sum();
    assert_eq!(geo_total, e.fetched);
    assert!(report.verdicts.geo_sources.len() > 3, "{:?}", report.verdicts.geo_sources);
    assert!(cfg.out_dir.unwrap().join("report.json").is_file());
}

#[test]
fn verdicts_are_deterministic_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let g = generate_corpus(&small_plan(12), dir.path()).unwrap();
    let mut runs = Vec::new();
    for (i, workers) in [1, 6].into_iter().enumerate() {
        let mut cfg = g.config().unwrap();
        cfg.out_dir = Some(dir.path().join(format!("run{i}")));
        cfg.workers.image_collectors = workers;
        cfg.workers.junk_filter = workers;
        cfg.queue_capacity = 3;
        let report = run_pipeline(&cfg).unwrap();
        assert!(!report.failed);
        let docs: BTreeMap<String, String> = merged_docs(&cfg)
            .into_iter()
            .map(|(id, doc)| {
                // Local paths differ per output directory.
                let mut r: ImageRecord = serde_json::from_str(&doc).unwrap();
                r.local_path.clear();
                (id, serde_json::to_string(&r).unwrap())
            })
            .collect();
        runs.push(docs);
    }
    assert_eq!(runs[0], runs[1]);
}

fn write_config(dir: &std::path::Path, corpus: &str) -> PipelineConfig {
    fs::write(dir.join("kw.csv"), "keyword,language\nlandslide,en\n").unwrap();
    fs::create_dir_all(dir.join("fx")).unwrap();
    fs::write(dir.join("corpus.ndjson"), corpus).unwrap();
    let (gaz, ner) = slidestream::synth::write_geo_fixtures(dir).unwrap();
    let text = format!(
        r#"
        keywords = "kw.csv"
        fixtures = "fx"
        corpus = "corpus.ndjson"
        out_dir = "out"
        gazetteer = "{}"
        ner_dir = "{}"
        extractor = {{ backend = "stub", dim = 32, seed = 1 }}
        junk = {{ backend = "stub", seed = 2 }}
        landslide = {{ backend = "stub", seed = 3 }}
        "#,
        gaz.display(),
        ner.display()
    );
    fs::write(dir.join("p.toml"), text).unwrap();
    PipelineConfig::load(dir.join("p.toml")).unwrap()
}

#[test]
fn empty_corpus_is_a_clean_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let report = run_pipeline(&cfg).unwrap();
    assert!(!report.failed);
    assert_eq!((report.tweets.seen, report.images.fetched, report.merged_docs), (0, 0, 0));
    assert_eq!(report.funnel.junk_pct, 0.0);
}

#[test]
fn three_images_share_the_tweet_geotag() {
    let dir = tempfile::tempdir().unwrap();
    let urls: Vec<String> = (0..3).map(|i| format!("https://pics.example/{i}.png")).collect();
    let tweet = Tweet {
        id: "77".into(),
        text: "landslide near Genoa".into(),
        lang: "en".into(),
        created_at: 0,
        gps: None,
        place_name: Some("Quito, Ecuador".into()),
        author_name: "Luca Rossi".into(),
        author_location: None,
        author_description: None,
        image_urls: urls.clone(),
    };
    let cfg = write_config(dir.path(), &format!("{}\n", serialize_tweet(&tweet)));
    for (i, u) in urls.iter().enumerate() {
        fs::write(DirFetcher::fixture_path(&cfg.fixtures, u), format!("pixels {i}")).unwrap();
    }
    let events = Channel::new("events", 64);
    let sub = events.subscribe();
    let report = run_pipeline_with_events(&cfg, Some(events)).unwrap();
    assert!(!report.failed);
    assert_eq!(report.merged_docs, 3);

    let docs = merged_docs(&cfg);
    let records: Vec<ImageRecord> = docs.values().map(|d| serde_json::from_str(d).unwrap()).collect();
    assert_eq!(records.len(), 3);
    for r in &records {
        let geo = r.geo.as_ref().unwrap();
        assert_eq!(geo, records[0].geo.as_ref().unwrap());
        assert_eq!(geo.source_field, GeoSource::Text);
        assert_eq!(geo.country.as_deref(), Some("Italy"));
        assert_eq!(r.tweet_id, "77");
    }
    assert_eq!(report.verdicts.user_types.get("person"), Some(&3));

    let mut merged = 0;
    while let Ok(Some(ev)) = sub.recv(std::time::Duration::from_millis(10)) {
        if matches!(ev, PipelineEvent::ImageMerged { .. }) {
            merged += 1;
        }
    }
    assert_eq!(merged, 3);
}

#[test]
fn missing_fixture_is_counted_not_fatal() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = write_config(
        dir.path(),
        "{\"id\":\"1\",\"text\":\"landslide\",\"entities\":{\"media\":[{\"media_url\":\"https://nowhere.example/a.jpg\"}]}}\n",
    );
    cfg.fetch_retries = 1;
    let report = run_pipeline(&cfg).unwrap();
    assert!(!report.failed);
    assert_eq!((report.images.fetch_failures, report.merged_docs), (1, 0));
}

#[test]
fn invalid_config_rejected_before_running() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = write_config(dir.path(), "");
    cfg.workers.duplicate_filter = 3;
    assert!(run_pipeline(&cfg).is_err());
    let mut cfg = write_config(dir.path(), "");
    cfg.fixtures = dir.path().join("absent");
    assert!(run_pipeline(&cfg).is_err());
}

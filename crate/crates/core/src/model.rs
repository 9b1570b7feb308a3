//! Domain types shared by every pipeline stage and the fixture post schema.
//!
//! Posts arrive as one JSON document per line. The accepted schema is a small
//! subset of the public v1.1 post format:
//!
//! ```json
//! {
//!   "id": "1",                       // string or integer, required
//!   "text": "landslide",             // required
//!   "lang": "en",
//!   "created_at": 1650000000000,     // UTC milliseconds
//!   "coordinates": [35.0, -120.0],   // [latitude, longitude] in this schema
//!   "place": {"full_name": "Quito, Ecuador"},
//!   "user": {"name": "A", "location": "...", "description": "..."},
//!   "entities": {"media": [{"media_url": "http://..."}]}
//! }
//! ```
//!
//! Coordinates are `[latitude, longitude]`, which differs from GeoJSON.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ParseError {
    #[error("malformed JSON at byte {offset}: {message}")]
    Json { offset: usize, message: String },
    #[error("missing or invalid field `{0}`")]
    Schema(&'static str),
}

/// A parsed post.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tweet {
    pub id: String,
    pub text: String,
    pub lang: String,
    /// UTC milliseconds.
    pub created_at: i64,
    /// `(latitude, longitude)` in degrees.
    pub gps: Option<(f64, f64)>,
    pub place_name: Option<String>,
    pub author_name: String,
    pub author_location: Option<String>,
    pub author_description: Option<String>,
    pub image_urls: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageRef {
    pub tweet_id: String,
    pub url: String,
}

/// Which side of a binary decision a classifier picked.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Positive,
    Negative,
}

/// The two image classification tasks and their label vocabularies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Junk,
    Landslide,
}

impl Task {
    pub fn label_name(self, label: Label) -> &'static str {
        match (self, label) {
            (Task::Junk, Label::Positive) => "relevant",
            (Task::Junk, Label::Negative) => "not-relevant",
            (Task::Landslide, Label::Positive) => "landslide",
            (Task::Landslide, Label::Negative) => "not-landslide",
        }
    }

    pub fn parse_label(self, name: &str) -> Option<Label> {
        let name = name.trim().to_ascii_lowercase();
        match name.as_str() {
            "positive" | "1" | "true" => Some(Label::Positive),
            "negative" | "0" | "false" => Some(Label::Negative),
            _ if name == self.label_name(Label::Positive) => Some(Label::Positive),
            _ if name == self.label_name(Label::Negative) => Some(Label::Negative),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Task::Junk => "junk",
            Task::Landslide => "landslide",
        }
    }
}

impl std::str::FromStr for Task {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "junk" => Ok(Task::Junk),
            "landslide" => Ok(Task::Landslide),
            other => Err(format!("unknown task `{other}`")),
        }
    }
}

/// Output of a binary image classifier. `confidence` is the probability of the
/// positive class; the label is positive iff `confidence >= 0.5`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(into = "ClassificationRepr", try_from = "ClassificationRepr")]
pub struct Classification {
    pub task: Task,
    pub label: Label,
    pub confidence: f64,
}

pub const DECISION_THRESHOLD: f64 = 0.5;

impl Classification {
    /// Builds a classification from a positive-class probability. Values are
    /// clamped into `[0, 1]`.
    pub fn from_confidence(task: Task, confidence: f64) -> Self {
        let confidence = if confidence.is_nan() { 0.0 } else { confidence.clamp(0.0, 1.0) };
        let label = if confidence >= DECISION_THRESHOLD { Label::Positive } else { Label::Negative };
        Classification { task, label, confidence }
    }

    pub fn is_positive(&self) -> bool {
        self.label == Label::Positive
    }

    pub fn label_name(&self) -> &'static str {
        self.task.label_name(self.label)
    }
}

#[derive(Serialize, Deserialize)]
struct ClassificationRepr {
    task: Task,
    label: String,
    confidence: f64,
}

impl From<Classification> for ClassificationRepr {
    fn from(c: Classification) -> Self {
        ClassificationRepr { task: c.task, label: c.label_name().to_string(), confidence: c.confidence }
    }
}

impl TryFrom<ClassificationRepr> for Classification {
    type Error = String;

    fn try_from(r: ClassificationRepr) -> Result<Self, Self::Error> {
        let label = r
            .task
            .parse_label(&r.label)
            .ok_or_else(|| format!("label `{}` is not valid for task {}", r.label, r.task.as_str()))?;
        if !(0.0..=1.0).contains(&r.confidence) {
            return Err(format!("confidence {} outside [0, 1]", r.confidence));
        }
        Ok(Classification { task: r.task, label, confidence: r.confidence })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DuplicateVerdict {
    pub is_duplicate: bool,
    pub ref_id: Option<String>,
    pub distance: Option<f64>,
}

impl DuplicateVerdict {
    pub fn unique(nearest: Option<f64>) -> Self {
        DuplicateVerdict { is_duplicate: false, ref_id: None, distance: nearest }
    }

    pub fn duplicate_of(ref_id: impl Into<String>, distance: f64) -> Self {
        DuplicateVerdict { is_duplicate: true, ref_id: Some(ref_id.into()), distance: Some(distance) }
    }
}

/// Which metadata field produced a geotag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeoSource {
    Gps,
    Text,
    Place,
    UserLocation,
    ProfileDescription,
    None,
}

impl GeoSource {
    pub const ALL: [GeoSource; 6] = [
        GeoSource::Gps,
        GeoSource::Text,
        GeoSource::Place,
        GeoSource::UserLocation,
        GeoSource::ProfileDescription,
        GeoSource::None,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            GeoSource::Gps => "gps",
            GeoSource::Text => "text",
            GeoSource::Place => "place",
            GeoSource::UserLocation => "user_location",
            GeoSource::ProfileDescription => "profile_description",
            GeoSource::None => "none",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GeoTag {
    pub country: Option<String>,
    pub state: Option<String>,
    pub county: Option<String>,
    pub city: Option<String>,
    pub source_field: GeoSource,
}

impl GeoTag {
    pub fn none() -> Self {
        GeoTag { country: None, state: None, county: None, city: None, source_field: GeoSource::None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UserType {
    Person,
    Organization,
}

impl UserType {
    pub fn as_str(self) -> &'static str {
        match self {
            UserType::Person => "person",
            UserType::Organization => "organization",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum EntityKind {
    Person,
    Location,
    Organization,
    Other,
}

impl EntityKind {
    pub fn parse(s: &str) -> EntityKind {
        match s.trim().to_ascii_uppercase().as_str() {
            "PERSON" | "PER" => EntityKind::Person,
            "LOCATION" | "LOC" | "GPE" => EntityKind::Location,
            "ORGANIZATION" | "ORGANISATION" | "ORG" => EntityKind::Organization,
            _ => EntityKind::Other,
        }
    }
}

/// An entity mention. `start..end` are character (not byte) offsets into the
/// tagged text.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NamedEntity {
    pub text: String,
    pub kind: EntityKind,
    pub start: usize,
    pub end: usize,
}

/// An image moving through the image pipeline, and the merged document written
/// to the image index once every processor has reported.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_id: String,
    pub tweet_id: String,
    pub url: String,
    pub local_path: String,
    pub bytes_len: u64,
    pub duplicate: Option<DuplicateVerdict>,
    pub junk: Option<Classification>,
    pub landslide: Option<Classification>,
    pub geo: Option<GeoTag>,
    pub user_type: Option<UserType>,
}

impl ImageRecord {
    pub fn fetched(image_id: String, image: &ImageRef, local_path: String, bytes_len: u64) -> Self {
        ImageRecord {
            image_id,
            tweet_id: image.tweet_id.clone(),
            url: image.url.clone(),
            local_path,
            bytes_len,
            duplicate: None,
            junk: None,
            landslide: None,
            geo: None,
            user_type: None,
        }
    }
}

// Wire form of the fixture schema.

#[derive(Debug, Default, Serialize, Deserialize)]
struct RawTweet {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    id: Option<serde_json::Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    text: Option<String>,
    #[serde(default)]
    lang: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    created_at: Option<i64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    coordinates: Option<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    place: Option<RawPlace>,
    #[serde(default)]
    user: Option<RawUser>,
    #[serde(default)]
    entities: Option<RawEntities>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct RawPlace {
    #[serde(default)]
    full_name: Option<String>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct RawUser {
    #[serde(default)]
    name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    location: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    description: Option<String>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct RawEntities {
    #[serde(default)]
    media: Vec<RawMedia>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct RawMedia {
    #[serde(default)]
    media_url: Option<String>,
}

fn byte_offset(raw: &str, line: usize, column: usize) -> usize {
    // serde_json reports 1-based lines and columns counted in bytes.
    let line_start: usize = raw.split_inclusive('\n').take(line.saturating_sub(1)).map(str::len).sum();
    (line_start + column.saturating_sub(1)).min(raw.len())
}

/// Parses one post document.
pub fn parse_tweet(raw: &str) -> Result<Tweet, ParseError> {
    let doc: RawTweet = serde_json::from_str(raw)
        .map_err(|e| ParseError::Json { offset: byte_offset(raw, e.line(), e.column()), message: e.to_string() })?;

    let id = match doc.id {
        Some(serde_json::Value::String(s)) => s,
        Some(serde_json::Value::Number(n)) => n.to_string(),
        _ => return Err(ParseError::Schema("id")),
    };
    if id.is_empty() {
        return Err(ParseError::Schema("id"));
    }
    let text = doc.text.ok_or(ParseError::Schema("text"))?;

    let gps = match doc.coordinates {
        Some([lat, lon]) => {
            if !(-90.0..=90.0).contains(&lat) || !(-180.0..=180.0).contains(&lon) {
                return Err(ParseError::Schema("coordinates"));
            }
            Some((lat, lon))
        }
        None => None,
    };

    let user = doc.user.unwrap_or_default();
    let image_urls = doc
        .entities
        .map(|e| e.media.into_iter().filter_map(|m| m.media_url).filter(|u| !u.is_empty()).collect())
        .unwrap_or_default();

    Ok(Tweet {
        id,
        text,
        lang: doc.lang.unwrap_or_default(),
        created_at: doc.created_at.unwrap_or(0),
        gps,
        place_name: doc.place.and_then(|p| p.full_name),
        author_name: user.name.unwrap_or_default(),
        author_location: user.location,
        author_description: user.description,
        image_urls,
    })
}

/// Renders a tweet in the fixture schema; `parse_tweet` inverts it.
pub fn serialize_tweet(t: &Tweet) -> String {
    let raw = RawTweet {
        id: Some(serde_json::Value::String(t.id.clone())),
        text: Some(t.text.clone()),
        lang: Some(t.lang.clone()),
        created_at: Some(t.created_at),
        coordinates: t.gps.map(|(lat, lon)| [lat, lon]),
        place: t.place_name.clone().map(|n| RawPlace { full_name: Some(n) }),
        user: Some(RawUser {
            name: Some(t.author_name.clone()),
            location: t.author_location.clone(),
            description: t.author_description.clone(),
        }),
        entities: Some(RawEntities {
            media: t.image_urls.iter().map(|u| RawMedia { media_url: Some(u.clone()) }).collect(),
        }),
    };
    serde_json::to_string(&raw).expect("fixture schema serializes")
}

pub fn extract_image_refs(t: &Tweet) -> Vec<ImageRef> {
    t.image_urls.iter().map(|url| ImageRef { tweet_id: t.id.clone(), url: url.clone() }).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn minimal_document() {
        let t = parse_tweet(r#"{"id":"1","text":"landslide","lang":"en","user":{"name":"A"}}"#).unwrap();
        assert_eq!(t.id, "1");
        assert_eq!(t.text, "landslide");
        assert_eq!(t.author_name, "A");
        assert!(t.image_urls.is_empty());
        assert!(t.gps.is_none());
        assert_eq!(t.created_at, 0);
    }

    #[test]
    fn coordinates_are_lat_lon() {
        let t = parse_tweet(r#"{"id":"2","text":"x","coordinates":[35.0,-120.0]}"#).unwrap();
        assert_eq!(t.gps, Some((35.0, -120.0)));
    }

    #[test]
    fn out_of_range_coordinates_rejected() {
        let err = parse_tweet(r#"{"id":"2","text":"x","coordinates":[-120.0,35.0]}"#).unwrap_err();
        assert_eq!(err, ParseError::Schema("coordinates"));
    }

    #[test]
    fn media_order_preserved() {
        let t = parse_tweet(
            r#"{"id":3,"text":"x","entities":{"media":[{"media_url":"http://a/1.jpg"},{"media_url":""},{"media_url":"http://a/2.jpg"}]}}"#,
        )
        .unwrap();
        assert_eq!(t.id, "3");
        assert_eq!(t.image_urls, vec!["http://a/1.jpg", "http://a/2.jpg"]);
    }

    #[test]
    fn malformed_json_reports_offset() {
        match parse_tweet(r#"{"id":"1", "text": }"#) {
            Err(ParseError::Json { offset, .. }) => assert_eq!(offset, 19),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_fields_are_named() {
        assert_eq!(parse_tweet(r#"{"text":"x"}"#).unwrap_err(), ParseError::Schema("id"));
        assert_eq!(parse_tweet(r#"{"id":""}"#).unwrap_err(), ParseError::Schema("id"));
        assert_eq!(parse_tweet(r#"{"id":"1"}"#).unwrap_err(), ParseError::Schema("text"));
    }

    #[test]
    fn image_refs_project_tweet_id() {
        let mut t = parse_tweet(r#"{"id":"9","text":"x"}"#).unwrap();
        assert!(extract_image_refs(&t).is_empty());
        t.image_urls = vec!["u1".into(), "u2".into()];
        assert_eq!(
            extract_image_refs(&t),
            vec![
                ImageRef { tweet_id: "9".into(), url: "u1".into() },
                ImageRef { tweet_id: "9".into(), url: "u2".into() }
            ]
        );
    }

    #[test]
    fn classification_boundary_is_inclusive() {
        let c = Classification::from_confidence(Task::Landslide, 0.5);
        assert_eq!(c.label, Label::Positive);
        assert_eq!(c.label_name(), "landslide");
        let c = Classification::from_confidence(Task::Junk, 0.4999);
        assert_eq!(c.label_name(), "not-relevant");
        let json = serde_json::to_string(&c).unwrap();
        assert!(json.contains("\"not-relevant\""));
        assert_eq!(serde_json::from_str::<Classification>(&json).unwrap(), c);
    }

    fn arb_text() -> impl Strategy<Value = String> {
        "[a-zA-Z0-9 éü#@.,!-]{0,40}"
    }

    prop_compose! {
        fn arb_tweet()(
            id in "[0-9]{1,12}",
            text in arb_text(),
            lang in "[a-z]{2}",
            created_at in 0i64..2_000_000_000_000,
            gps in proptest::option::of((-90.0f64..=90.0, -180.0f64..=180.0)),
            place_name in proptest::option::of(arb_text()),
            author_name in arb_text(),
            author_location in proptest::option::of(arb_text()),
            author_description in proptest::option::of(arb_text()),
            image_urls in proptest::collection::vec("http://[a-z]{1,8}\\.com/[a-z0-9]{1,8}\\.jpg", 0..4),
        ) -> Tweet {
            Tweet { id, text, lang, created_at, gps, place_name, author_name, author_location, author_description, image_urls }
        }
    }

    proptest! {
        #[test]
        fn serialize_round_trips(t in arb_tweet()) {
            let back = parse_tweet(&serialize_tweet(&t)).unwrap();
            prop_assert_eq!(back, t);
        }

        #[test]
        fn refs_match_url_count(t in arb_tweet()) {
            prop_assert_eq!(extract_image_refs(&t).len(), t.image_urls.len());
        }
    }
}

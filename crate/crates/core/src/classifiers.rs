//! Binary image classifiers (junk filter, landslide detector) and the
//! confusion-matrix evaluation harness.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dedup::{DedupError, FeatureExtractor, FeatureVector};
use crate::model::{Classification, ImageRecord, Label, Task};

#[derive(Debug, Error)]
pub enum ClassifyError {
    #[error("no score for image `{0}`")]
    MissingScore(String),
    #[error("feature extraction failed: {0}")]
    Features(#[from] DedupError),
    #[error("weight vector has {weights} dims but features have {features}")]
    WeightDim { weights: usize, features: usize },
    #[error("{0}")]
    Load(String),
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EvalError {
    #[error("ids without a gold label: {0:?}")]
    MissingGold(Vec<String>),
    #[error("gold ids without a prediction: {0:?}")]
    MissingPrediction(Vec<String>),
    #[error("ids listed more than once: {0:?}")]
    DuplicateIds(Vec<String>),
    #[error("confusion matrix is empty")]
    Empty,
}

pub trait BinaryClassifier: Send + Sync {
    fn task(&self) -> Task;

    /// Probability of the positive class for this image.
    fn score(&self, image: &ImageRecord, bytes: &[u8]) -> Result<f64, ClassifyError>;

    fn classify(&self, image: &ImageRecord, bytes: &[u8]) -> Result<Classification, ClassifyError> {
        Ok(Classification::from_confidence(self.task(), self.score(image, bytes)?))
    }
}

pub fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Logistic score over the extracted feature vector: `σ(w·f + b)`.
pub struct StubClassifier {
    task: Task,
    extractor: Arc<dyn FeatureExtractor>,
    weights: Vec<f64>,
    bias: f64,
    // Artificial per-image cost, used by benchmarks.
    cost: Duration,
}

impl StubClassifier {
    pub fn new(
        task: Task,
        extractor: Arc<dyn FeatureExtractor>,
        weights: Vec<f64>,
        bias: f64,
    ) -> Result<Self, ClassifyError> {
        if weights.len() != extractor.dim() {
            return Err(ClassifyError::WeightDim { weights: weights.len(), features: extractor.dim() });
        }
        Ok(StubClassifier { task, extractor, weights, bias, cost: Duration::ZERO })
    }

    /// Unit-norm Gaussian weights drawn from `seed`.
    pub fn seeded(task: Task, extractor: Arc<dyn FeatureExtractor>, seed: u64, bias: f64) -> Self {
        let dim = extractor.dim();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let mut weights: Vec<f64> = (0..dim).map(|_| normal.sample(&mut rng)).collect();
        let norm = weights.iter().map(|w| w * w).sum::<f64>().sqrt();
        if norm > 0.0 {
            weights.iter_mut().for_each(|w| *w /= norm);
        }
        StubClassifier { task, extractor, weights, bias, cost: Duration::ZERO }
    }

    pub fn with_cost(mut self, cost: Duration) -> Self {
        self.cost = cost;
        self
    }

    pub fn score_features(&self, fv: &FeatureVector) -> Result<f64, ClassifyError> {
        if fv.dim() != self.weights.len() {
            return Err(ClassifyError::WeightDim { weights: self.weights.len(), features: fv.dim() });
        }
        if !self.cost.is_zero() {
            std::thread::sleep(self.cost);
        }
        let dot: f64 = self.weights.iter().zip(fv.values()).map(|(w, x)| w * *x as f64).sum();
        Ok(logistic(dot + self.bias))
    }
}

impl BinaryClassifier for StubClassifier {
    fn task(&self) -> Task {
        self.task
    }

    fn score(&self, image: &ImageRecord, bytes: &[u8]) -> Result<f64, ClassifyError> {
        let fv = self.extractor.extract(&image.image_id, bytes)?;
        self.score_features(&fv)
    }
}

/// Precomputed scores keyed by image id, loaded from a CSV `id,score`.
#[derive(Debug, Clone)]
pub struct LookupClassifier {
    task: Task,
    scores: HashMap<String, f64>,
}

impl LookupClassifier {
    pub fn new(task: Task, scores: HashMap<String, f64>) -> Self {
        LookupClassifier { task, scores }
    }

    pub fn load(task: Task, path: impl AsRef<Path>) -> Result<Self, ClassifyError> {
        let path = path.as_ref();
        let load_err = |e: &dyn fmt::Display| ClassifyError::Load(format!("{}: {e}", path.display()));
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .trim(csv::Trim::All)
            .from_path(path)
            .map_err(|e| load_err(&e))?;
        let mut scores = HashMap::new();
        for (n, record) in reader.records().enumerate() {
            let record = record.map_err(|e| load_err(&e))?;
            let (Some(id), Some(score)) = (record.get(0), record.get(1)) else { continue };
            match score.parse::<f64>() {
                Ok(s) if (0.0..=1.0).contains(&s) => {
                    scores.insert(id.to_string(), s);
                }
                Ok(s) => return Err(load_err(&format!("line {}: score {s} outside [0, 1]", n + 1))),
                Err(_) if n == 0 => continue, // header
                Err(e) => return Err(load_err(&format!("line {}: {e}", n + 1))),
            }
        }
        Ok(LookupClassifier { task, scores })
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

impl BinaryClassifier for LookupClassifier {
    fn task(&self) -> Task {
        self.task
    }

    fn score(&self, image: &ImageRecord, _bytes: &[u8]) -> Result<f64, ClassifyError> {
        self.scores.get(&image.image_id).copied().ok_or_else(|| ClassifyError::MissingScore(image.image_id.clone()))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionMatrix {
    pub fn new(tp: u64, fp: u64, fn_: u64, tn: u64) -> Self {
        ConfusionMatrix { tp, fp, fn_, tn }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    /// The same counts seen from the negative class.
    pub fn swapped(&self) -> Self {
        ConfusionMatrix { tp: self.tn, fp: self.fn_, fn_: self.fp, tn: self.tp }
    }

    pub fn record(&mut self, predicted: Label, gold: Label) {
        match (predicted, gold) {
            (Label::Positive, Label::Positive) => self.tp += 1,
            (Label::Positive, Label::Negative) => self.fp += 1,
            (Label::Negative, Label::Positive) => self.fn_ += 1,
            (Label::Negative, Label::Negative) => self.tn += 1,
        }
    }
}

/// Strict join of predictions against gold labels by id.
pub fn evaluate<S: AsRef<str>>(preds: &[(S, Label)], gold: &[(S, Label)]) -> Result<ConfusionMatrix, EvalError> {
    fn index<S: AsRef<str>>(items: &[(S, Label)]) -> Result<HashMap<&str, Label>, EvalError> {
        let mut map = HashMap::with_capacity(items.len());
        let mut dups = Vec::new();
        for (id, label) in items {
            if map.insert(id.as_ref(), *label).is_some() {
                dups.push(id.as_ref().to_string());
            }
        }
        if dups.is_empty() {
            Ok(map)
        } else {
            dups.sort();
            dups.dedup();
            Err(EvalError::DuplicateIds(dups))
        }
    }
    let p = index(preds)?;
    let g = index(gold)?;

    let mut no_gold: Vec<String> = p.keys().filter(|id| !g.contains_key(*id)).map(|s| s.to_string()).collect();
    if !no_gold.is_empty() {
        no_gold.sort();
        return Err(EvalError::MissingGold(no_gold));
    }
    let mut no_pred: Vec<String> = g.keys().filter(|id| !p.contains_key(*id)).map(|s| s.to_string()).collect();
    if !no_pred.is_empty() {
        no_pred.sort();
        return Err(EvalError::MissingPrediction(no_pred));
    }

    let mut cm = ConfusionMatrix::default();
    for (id, predicted) in &p {
        cm.record(*predicted, g[id]);
    }
    Ok(cm)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// All scores in percent. `mcc` spans [-100, 100], the rest [0, 100].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub confusion: ConfusionMatrix,
    pub accuracy: f64,
    pub positive: ClassScores,
    pub negative: ClassScores,
    pub macro_avg: ClassScores,
    pub mcc: f64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn class_scores(tp: u64, fp: u64, fn_: u64) -> ClassScores {
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
    ClassScores { precision: 100.0 * precision, recall: 100.0 * recall, f1: 100.0 * f1 }
}

pub fn metrics_from_confusion(cm: &ConfusionMatrix) -> Result<MetricsReport, EvalError> {
    if cm.total() == 0 {
        return Err(EvalError::Empty);
    }
    let positive = class_scores(cm.tp, cm.fp, cm.fn_);
    let negative = class_scores(cm.tn, cm.fn_, cm.fp);
    let macro_avg = ClassScores {
        precision: (positive.precision + negative.precision) / 2.0,
        recall: (positive.recall + negative.recall) / 2.0,
        f1: (positive.f1 + negative.f1) / 2.0,
    };
    Ok(MetricsReport {
        confusion: *cm,
        accuracy: 100.0 * ratio(cm.tp + cm.tn, cm.total()),
        positive,
        negative,
        macro_avg,
        mcc: 100.0 * crate::dedup::mcc(cm),
    })
}

/// Rounds to `decimals` places, ties away from zero. A tiny nudge absorbs
/// binary representation error (`1.005` is stored as `1.00499...`).
pub fn round_half_up(value: f64, decimals: i32) -> f64 {
    let scale = 10f64.powi(decimals);
    let scaled = value * scale;
    let nudged = scaled + scaled.signum() * 1e-9 * scaled.abs().max(1.0);
    nudged.round() / scale
}

impl ClassScores {
    fn rounded(&self) -> Self {
        ClassScores {
            precision: round_half_up(self.precision, 2),
            recall: round_half_up(self.recall, 2),
            f1: round_half_up(self.f1, 2),
        }
    }
}

impl MetricsReport {
    /// Copy with every score rounded to two decimals for presentation.
    pub fn rounded(&self) -> Self {
        MetricsReport {
            confusion: self.confusion,
            accuracy: round_half_up(self.accuracy, 2),
            positive: self.positive.rounded(),
            negative: self.negative.rounded(),
            macro_avg: self.macro_avg.rounded(),
            mcc: round_half_up(self.mcc, 2),
        }
    }

    /// Aligned plain-text table with labels taken from `task`.
    pub fn to_table(&self, task: Task) -> String {
        let r = self.rounded();
        let pos = task.label_name(Label::Positive);
        let neg = task.label_name(Label::Negative);
        let width = pos.len().max(neg.len()).max("macro avg".len());
        let mut out = String::new();
        out.push_str(&format!("{:<width$}  {:>9}  {:>9}  {:>9}\n", "class", "precision", "recall", "f1"));
        for (name, s) in [(pos, r.positive), (neg, r.negative), ("macro avg", r.macro_avg)] {
            out.push_str(&format!("{:<width$}  {:>9.2}  {:>9.2}  {:>9.2}\n", name, s.precision, s.recall, s.f1));
        }
        out.push_str(&format!("accuracy {:.2}  mcc {:.2}\n", r.accuracy, r.mcc));
        let c = r.confusion;
        out.push_str(&format!("tp {}  fp {}  fn {}  tn {}\n", c.tp, c.fp, c.fn_, c.tn));
        out
    }
}

/// Reads an `id,label` CSV. Labels use the task vocabulary or 1/0.
pub fn read_labels(path: impl AsRef<Path>, task: Task) -> Result<Vec<(String, Label)>, ClassifyError> {
    let path = path.as_ref();
    let load_err = |e: &dyn fmt::Display| ClassifyError::Load(format!("{}: {e}", path.display()));
    let mut reader =
        csv::ReaderBuilder::new().has_headers(false).trim(csv::Trim::All).from_path(path).map_err(|e| load_err(&e))?;
    let mut out = Vec::new();
    for (n, record) in reader.records().enumerate() {
        let record = record.map_err(|e| load_err(&e))?;
        let (Some(id), Some(label)) = (record.get(0), record.get(1)) else { continue };
        match task.parse_label(label) {
            Some(l) => out.push((id.to_string(), l)),
            None if n == 0 => continue,
            None => return Err(load_err(&format!("line {}: unknown label `{label}`", n + 1))),
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dedup::StubExtractor;
    use proptest::prelude::*;
    use rand::Rng;

    fn image(id: &str) -> ImageRecord {
        ImageRecord {
            image_id: id.into(),
            tweet_id: "t".into(),
            url: "u".into(),
            local_path: "p".into(),
            bytes_len: 0,
            duplicate: None,
            junk: None,
            landslide: None,
            geo: None,
            user_type: None,
        }
    }

    #[test]
    fn stub_score_is_logistic_of_dot_product() {
        let ex: Arc<dyn FeatureExtractor> = Arc::new(StubExtractor::new(16, 3));
        let fv = ex.extract("img", b"bytes").unwrap();
        // Choose weights along fv so that w·fv = ln(9), i.e. σ = 0.9.
        let norm2: f64 = fv.values().iter().map(|v| (*v as f64).powi(2)).sum();
        let target = 9f64.ln();
        let weights: Vec<f64> = fv.values().iter().map(|v| *v as f64 * target / norm2).collect();
        let clf = StubClassifier::new(Task::Landslide, Arc::clone(&ex), weights.clone(), 0.0).unwrap();
        let c = clf.classify(&image("img"), b"bytes").unwrap();
        let dot: f64 = weights.iter().zip(fv.values()).map(|(w, x)| w * *x as f64).sum();
        let expected = 1.0 / (1.0 + (-dot).exp());
        assert!((expected - 0.9).abs() < 1e-9);
        assert!((c.confidence - expected).abs() < 1e-12);
        assert_eq!(c.label, Label::Positive);
        // Deterministic.
        assert_eq!(clf.classify(&image("img"), b"bytes").unwrap(), c);
    }

    #[test]
    fn stub_rejects_wrong_weight_dim() {
        let ex: Arc<dyn FeatureExtractor> = Arc::new(StubExtractor::new(4, 0));
        assert!(matches!(StubClassifier::new(Task::Junk, ex, vec![1.0], 0.0), Err(ClassifyError::WeightDim { .. })));
    }

    #[test]
    fn lookup_scores() {
        let mut scores = HashMap::new();
        scores.insert("a".to_string(), 0.12);
        scores.insert("b".to_string(), 0.5);
        let clf = LookupClassifier::new(Task::Junk, scores);
        let a = clf.classify(&image("a"), b"").unwrap();
        assert_eq!((a.label, a.confidence), (Label::Negative, 0.12));
        assert_eq!(a.label_name(), "not-relevant");
        assert_eq!(clf.classify(&image("b"), b"").unwrap().label, Label::Positive);
        match clf.classify(&image("zz"), b"") {
            Err(ClassifyError::MissingScore(id)) => assert_eq!(id, "zz"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn lookup_loads_csv() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.csv");
        std::fs::write(&p, "id,score\na,0.12\nb,0.9\n").unwrap();
        let clf = LookupClassifier::load(Task::Landslide, &p).unwrap();
        assert_eq!(clf.len(), 2);
        std::fs::write(&p, "a,1.5\n").unwrap();
        assert!(LookupClassifier::load(Task::Landslide, &p).is_err());
    }

    fn labels(bits: &[bool]) -> Vec<(String, Label)> {
        bits.iter()
            .enumerate()
            .map(|(i, &b)| (format!("{i}"), if b { Label::Positive } else { Label::Negative }))
            .collect()
    }

    #[test]
    fn perfect_and_flipped_predictions() {
        let gold = labels(&[true, true, true, true, true, true, false, false, false, false]);
        assert_eq!(evaluate(&gold, &gold).unwrap(), ConfusionMatrix::new(6, 0, 0, 4));
        let flipped = labels(&[false, false, false, false, false, false, true, true, true, true]);
        let cm = evaluate(&flipped, &gold).unwrap();
        assert_eq!((cm.tp, cm.tn), (0, 0));
        assert_eq!((cm.fp, cm.fn_), (4, 6));
    }

    #[test]
    fn evaluate_is_strict() {
        let gold = labels(&[true, false]);
        let preds = vec![("0".to_string(), Label::Positive)];
        assert_eq!(evaluate(&preds, &gold), Err(EvalError::MissingPrediction(vec!["1".into()])));
        let preds = labels(&[true, false, true]);
        assert_eq!(evaluate(&preds, &gold), Err(EvalError::MissingGold(vec!["2".into()])));
        let mut preds = labels(&[true, false]);
        preds.push(("1".into(), Label::Positive));
        assert_eq!(evaluate(&preds, &gold), Err(EvalError::DuplicateIds(vec!["1".into()])));
    }

    #[test]
    fn random_predictions_match_hand_tally() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let n = 3600;
        let gold_bits: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.05)).collect();
        let pred_bits: Vec<bool> = gold_bits.iter().map(|&g| if rng.gen_bool(0.8) { g } else { !g }).collect();
        let mut tally = [0u64; 4];
        for (p, g) in pred_bits.iter().zip(&gold_bits) {
            let slot = match (p, g) {
                (true, true) => 0,
                (true, false) => 1,
                (false, true) => 2,
                (false, false) => 3,
            };
            tally[slot] += 1;
        }
        let cm = evaluate(&labels(&pred_bits), &labels(&gold_bits)).unwrap();
        assert_eq!([cm.tp, cm.fp, cm.fn_, cm.tn], tally);
    }

    #[test]
    fn field_validation_row() {
        let r = metrics_from_confusion(&ConfusionMatrix::new(123, 39, 43, 3395)).unwrap().rounded();
        assert_eq!(r.accuracy, 97.72);
        assert_eq!(r.positive.precision, 75.93);
        assert_eq!(r.positive.recall, 74.10);
        assert_eq!(r.positive.f1, 75.00);
        assert_eq!(r.mcc, 73.81);
    }

    #[test]
    fn perfect_classifier() {
        let r = metrics_from_confusion(&ConfusionMatrix::new(5, 0, 0, 5)).unwrap();
        for v in [r.accuracy, r.positive.precision, r.positive.recall, r.positive.f1, r.macro_avg.f1, r.mcc] {
            assert_eq!(v, 100.0);
        }
    }

    #[test]
    fn degenerate_positive_class() {
        let r = metrics_from_confusion(&ConfusionMatrix::new(0, 0, 10, 10)).unwrap();
        assert_eq!((r.positive.precision, r.positive.recall, r.positive.f1), (0.0, 0.0, 0.0));
        assert_eq!(r.accuracy, 50.0);
        assert_eq!(metrics_from_confusion(&ConfusionMatrix::default()), Err(EvalError::Empty));
    }

    #[test]
    fn rounding_is_half_away_from_zero() {
        assert_eq!(round_half_up(1.005, 2), 1.01);
        assert_eq!(round_half_up(2.675, 2), 2.68);
        assert_eq!(round_half_up(-1.005, 2), -1.01);
        assert_eq!(round_half_up(75.925925, 2), 75.93);
        assert_eq!(round_half_up(0.0, 2), 0.0);
    }

    #[test]
    fn table_uses_task_labels() {
        let r = metrics_from_confusion(&ConfusionMatrix::new(123, 39, 43, 3395)).unwrap();
        let t = r.to_table(Task::Landslide);
        assert!(t.contains("not-landslide"));
        assert!(t.contains("accuracy 97.72  mcc 73.81"));
    }

    #[test]
    fn read_labels_csv() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.csv");
        std::fs::write(&p, "id,label\na,landslide\nb,not-landslide\nc,1\n").unwrap();
        let l = read_labels(&p, Task::Landslide).unwrap();
        assert_eq!(
            l,
            vec![("a".into(), Label::Positive), ("b".into(), Label::Negative), ("c".into(), Label::Positive)]
        );
    }

    proptest! {
        #[test]
        fn class_swap_symmetry(tp in 0u64..500, fp in 0u64..500, fn_ in 0u64..500, tn in 1u64..500) {
            let cm = ConfusionMatrix::new(tp, fp, fn_, tn);
            let a = metrics_from_confusion(&cm).unwrap();
            let b = metrics_from_confusion(&cm.swapped()).unwrap();
            prop_assert_eq!(a.positive, b.negative);
            prop_assert_eq!(a.negative, b.positive);
            prop_assert!((a.accuracy - b.accuracy).abs() < 1e-9);
            prop_assert!((a.macro_avg.f1 - b.macro_avg.f1).abs() < 1e-9);
            prop_assert!((a.mcc.abs() - b.mcc.abs()).abs() < 1e-9);
            prop_assert!((-100.0..=100.0).contains(&a.mcc));
        }

        #[test]
        fn f1_between_precision_and_recall(tp in 1u64..500, fp in 0u64..500, fn_ in 0u64..500, tn in 0u64..500) {
            let r = metrics_from_confusion(&ConfusionMatrix::new(tp, fp, fn_, tn)).unwrap().positive;
            prop_assert!(r.f1 <= r.precision.max(r.recall) + 1e-9);
            prop_assert!(r.f1 >= r.precision.min(r.recall) - 1e-9);
        }

        #[test]
        fn evaluation_is_permutation_invariant(bits in proptest::collection::vec((any::<bool>(), any::<bool>()), 1..100), seed in any::<u64>()) {
            let preds = labels(&bits.iter().map(|b| b.0).collect::<Vec<_>>());
            let gold = labels(&bits.iter().map(|b| b.1).collect::<Vec<_>>());
            let base = evaluate(&preds, &gold).unwrap();
            let mut shuffled = preds.clone();
            rand::seq::SliceRandom::shuffle(shuffled.as_mut_slice(), &mut ChaCha8Rng::seed_from_u64(seed));
            prop_assert_eq!(evaluate(&shuffled, &gold).unwrap(), base);
        }
    }
}

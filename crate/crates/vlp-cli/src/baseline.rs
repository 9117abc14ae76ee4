//! Discriminative comparator: a softmax classifier over a closed answer
//! list, fed the first hidden state of the multimodal encoder. The
//! backbone stays frozen; only the classifier weights train. By
//! construction the classifier can never produce an answer outside its
//! list.

use vlp_core::corpus::{EntailLabel, PairedExample};
use vlp_core::infer::visual_states;
use vlp_core::params::Params;
use vlp_core::vocab::{TokenSequence, Vocabulary};

use crate::error::{CliError, Result};
use crate::forward::mm_cls_feature;

/// Which task field of a [`PairedExample`] the classifier reads.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BaselineTask {
    /// Question text in, answer word out (closed list).
    VqaClosed,
    /// Fixed "a photo of" text in, "<color> <shape>" class out.
    Classification,
    /// Hypothesis text in, entailment label out.
    Entailment,
}

impl BaselineTask {
    pub fn parse(name: &str) -> Result<BaselineTask> {
        match name {
            "vqa" | "vqa_closed" => Ok(BaselineTask::VqaClosed),
            "classification" | "cls" => Ok(BaselineTask::Classification),
            "entailment" | "ve" => Ok(BaselineTask::Entailment),
            other => Err(CliError::Validation(format!(
                "unknown task {other:?} (expected vqa/classification/entailment)"
            ))),
        }
    }
}

/// Text input and target label (index into `labels`) for one example;
/// `None` when the example lacks the task annotation or its answer is
/// outside the closed list.
pub fn task_instance(
    ex: &PairedExample,
    task: BaselineTask,
    labels: &[String],
    vocab: &Vocabulary,
) -> Result<Option<(TokenSequence, usize)>> {
    let (text, answer): (String, String) = match task {
        BaselineTask::VqaClosed => match &ex.qa {
            Some((q, a)) => (q.clone(), a.clone()),
            None => return Ok(None),
        },
        BaselineTask::Classification => match &ex.class_label {
            Some(label) => ("a photo of".to_string(), label.clone()),
            None => return Ok(None),
        },
        BaselineTask::Entailment => match &ex.entailment {
            Some((hyp, label)) => (hyp.clone(), label.name().to_string()),
            None => return Ok(None),
        },
    };
    let target = match labels.iter().position(|l| *l == answer) {
        Some(t) => t,
        None => return Ok(None),
    };
    Ok(Some((vocab.tokenize(&text)?, target)))
}

/// The label list a task classifies over.
pub fn task_labels(task: BaselineTask, answer_list: &[String]) -> Vec<String> {
    match task {
        BaselineTask::VqaClosed => answer_list.to_vec(),
        BaselineTask::Classification => vlp_core::corpus::class_names(),
        BaselineTask::Entailment => EntailLabel::ALL.iter().map(|l| l.name().to_string()).collect(),
    }
}

/// Trained classifier: weights `w[c]` (one row per class, feature dim +1
/// for the bias) over frozen [CLS] features.
#[derive(Clone, Debug)]
pub struct LinearClassifier {
    pub labels: Vec<String>,
    pub w: Vec<Vec<f64>>,
}

impl LinearClassifier {
    pub fn predict(&self, feature: &[f64]) -> usize {
        let mut best = 0;
        let mut best_score = f64::NEG_INFINITY;
        for (c, row) in self.w.iter().enumerate() {
            let mut s = row[feature.len()];
            for (wi, xi) in row.iter().zip(feature) {
                s += wi * xi;
            }
            if s > best_score {
                best_score = s;
                best = c;
            }
        }
        best
    }
}

/// Full-batch softmax regression on precomputed features. Deterministic;
/// zero-initialized weights, `iters` gradient steps at `lr`.
pub fn train_linear_classifier(
    features: &[Vec<f64>],
    targets: &[usize],
    labels: &[String],
    iters: usize,
    lr: f64,
) -> Result<LinearClassifier> {
    if labels.is_empty() {
        return Err(CliError::Validation("empty answer list".into()));
    }
    if features.is_empty() || features.len() != targets.len() {
        return Err(CliError::Validation(
            "classifier needs matching non-empty features/targets".into(),
        ));
    }
    let dim = features[0].len();
    let classes = labels.len();
    let mut w = vec![vec![0.0; dim + 1]; classes];
    let n = features.len() as f64;
    for _ in 0..iters {
        let mut grad = vec![vec![0.0; dim + 1]; classes];
        for (x, &t) in features.iter().zip(targets) {
            let scores: Vec<f64> = w
                .iter()
                .map(|row| {
                    let mut s = row[dim];
                    for (wi, xi) in row.iter().zip(x) {
                        s += wi * xi;
                    }
                    s
                })
                .collect();
            let probs = vlp_core::infer::log_softmax(&scores)
                .iter()
                .map(|&l| l.exp())
                .collect::<Vec<f64>>();
            for c in 0..classes {
                let err = probs[c] - if c == t { 1.0 } else { 0.0 };
                for (gd, xi) in grad[c].iter_mut().zip(x) {
                    *gd += err * xi / n;
                }
                grad[c][dim] += err / n;
            }
        }
        for c in 0..classes {
            for j in 0..=dim {
                w[c][j] -= lr * grad[c][j];
            }
        }
    }
    Ok(LinearClassifier {
        labels: labels.to_vec(),
        w,
    })
}

/// Train the baseline on `train` and score it on `test`; returns
/// (classifier, train accuracy, test accuracy). Examples without the task
/// annotation are skipped; test answers outside the label list count as
/// wrong (the closed head cannot produce them).
pub fn linear_classifier_baseline(
    params: &Params<f32>,
    task: BaselineTask,
    labels: &[String],
    train: &[PairedExample],
    test: &[PairedExample],
    vocab: &Vocabulary,
    iters: usize,
    lr: f64,
) -> Result<(LinearClassifier, f64, f64)> {
    if labels.is_empty() {
        return Err(CliError::Validation("empty answer list".into()));
    }
    let mut features = Vec::new();
    let mut targets = Vec::new();
    for ex in train {
        if let Some((seq, t)) = task_instance(ex, task, labels, vocab)? {
            let visual = visual_states(&ex.image, params)?;
            features.push(mm_cls_feature(&visual, &seq, params)?);
            targets.push(t);
        }
    }
    if features.is_empty() {
        return Err(CliError::Validation(
            "no training example carries the task annotation".into(),
        ));
    }
    let clf = train_linear_classifier(&features, &targets, labels, iters, lr)?;
    let train_acc = {
        let hits = features
            .iter()
            .zip(&targets)
            .filter(|(f, &t)| clf.predict(f) == t)
            .count();
        hits as f64 / features.len() as f64
    };
    let test_acc = baseline_accuracy(params, &clf, task, test, vocab)?;
    Ok((clf, train_acc, test_acc))
}

/// Accuracy of a trained classifier on a test set. An example whose true
/// answer is not in the label list scores 0 (out-of-list answers are
/// unpredictable by construction).
pub fn baseline_accuracy(
    params: &Params<f32>,
    clf: &LinearClassifier,
    task: BaselineTask,
    test: &[PairedExample],
    vocab: &Vocabulary,
) -> Result<f64> {
    let mut hits = 0usize;
    let mut total = 0usize;
    for ex in test {
        // The text input exists whenever the annotation does, even for
        // out-of-list answers; score those as misses.
        let (text, answer): (String, String) = match task {
            BaselineTask::VqaClosed => match &ex.qa {
                Some((q, a)) => (q.clone(), a.clone()),
                None => continue,
            },
            BaselineTask::Classification => match &ex.class_label {
                Some(label) => ("a photo of".to_string(), label.clone()),
                None => continue,
            },
            BaselineTask::Entailment => match &ex.entailment {
                Some((hyp, label)) => (hyp.clone(), label.name().to_string()),
                None => continue,
            },
        };
        total += 1;
        let seq = vocab.tokenize(&text)?;
        let visual = visual_states(&ex.image, params)?;
        let pred = clf.predict(&mm_cls_feature(&visual, &seq, params)?);
        if clf.labels[pred] == answer {
            hits += 1;
        }
    }
    if total == 0 {
        return Err(CliError::Validation(
            "no test example carries the task annotation".into(),
        ));
    }
    Ok(hits as f64 / total as f64)
}

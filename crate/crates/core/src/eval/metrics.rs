use serde::{Deserialize, Serialize};

use super::{frechet_feature_distance, CharClassifier, EvalError, Result};
use crate::data::Image;
use crate::scalar::Scalar;

/// Confusion counts over all (frame, character) slots.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CharCounts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub frames: usize,
    pub exact: usize,
}

impl CharCounts {
    /// Micro-averaged F1; 1 when there is nothing to find and nothing was
    /// predicted.
    pub fn f1(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            1.0
        } else {
            2.0 * self.tp as f64 / denom as f64
        }
    }

    /// Fraction of frames whose predicted set equals the true set.
    pub fn accuracy(&self) -> f64 {
        if self.frames == 0 {
            0.0
        } else {
            self.exact as f64 / self.frames as f64
        }
    }
}

/// Counts for predicted against true presence vectors, frame by frame.
pub fn char_metrics(predicted: &[Vec<bool>], truth: &[Vec<bool>]) -> Result<CharCounts> {
    if predicted.len() != truth.len() {
        return Err(EvalError::Length {
            what: "predicted frames",
            expected: truth.len(),
            found: predicted.len(),
        });
    }
    let mut c = CharCounts::default();
    for (p, t) in predicted.iter().zip(truth) {
        if p.len() != t.len() {
            return Err(EvalError::Length {
                what: "presence vector",
                expected: t.len(),
                found: p.len(),
            });
        }
        for (&pv, &tv) in p.iter().zip(t) {
            match (pv, tv) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => {}
            }
        }
        c.frames += 1;
        c.exact += (p == t) as usize;
    }
    Ok(c)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub char_f1: f64,
    pub char_acc: f64,
    /// Fréchet distance between classifier features of generated and
    /// reference frames, when references were given.
    pub ffd: Option<f64>,
    pub counts: CharCounts,
    /// Held-out F1 of the classifier that produced the report.
    pub classifier_f1: f64,
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain struct")
    }

    pub fn table(&self) -> String {
        let ffd = self.ffd.map_or("-".to_string(), |v| format!("{v:.4}"));
        format!(
            "char_f1   {:.4}\nchar_acc  {:.4}\nffd       {ffd}\nframes    {}\n",
            self.char_f1, self.char_acc, self.counts.frames
        )
    }
}

/// Classifies `generated` frames with a validated classifier and scores them
/// against `truth`; with `reference` frames also reports the feature
/// distance.
pub fn evaluate_frames<S: Scalar>(
    classifier: &CharClassifier<S>,
    generated: &[Image],
    truth: &[Vec<bool>],
    reference: Option<&[Image]>,
) -> Result<MetricsReport> {
    let classifier_f1 = classifier.validated_f1()?;
    let predicted = classifier.predict(generated)?;
    let counts = char_metrics(&predicted, truth)?;
    let ffd = match reference {
        Some(r) => Some(frechet_feature_distance(&classifier.features(generated)?, &classifier.features(r)?)?),
        None => None,
    };
    Ok(MetricsReport {
        char_f1: counts.f1(),
        char_acc: counts.accuracy(),
        ffd,
        counts,
        classifier_f1,
    })
}

/// Drops the first frame of every story.
pub fn story_continuation_filter<T: Clone>(stories: &[Vec<T>]) -> Result<Vec<Vec<T>>> {
    stories
        .iter()
        .enumerate()
        .map(|(index, s)| {
            if s.len() < 2 {
                Err(EvalError::ShortStory { index, found: s.len() })
            } else {
                Ok(s[1..].to_vec())
            }
        })
        .collect()
}

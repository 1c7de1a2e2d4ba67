use serde::{Deserialize, Serialize};

use super::lexicon::{EntityType, Lexicon};
use super::text::{extract_entities, negation_positions, split_sentences};
use crate::error::{Error, Result};

/// Binary disease targets ordered like `Lexicon::disease_classes`.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LabelVector(pub Vec<u8>);

impl LabelVector {
    pub fn zeros(c: usize) -> Self {
        LabelVector(vec![0; c])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, c: usize) -> bool {
        self.0[c] == 1
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.0.iter().map(|&v| f64::from(v)).collect()
    }
}

/// Class `c` is positive iff an impression sentence mentions it with no
/// negation cue earlier in that sentence.
pub fn extract_labels(impression: &[String], lexicon: &Lexicon) -> LabelVector {
    let classes = lexicon.disease_classes();
    let mut labels = LabelVector::zeros(classes.len());
    for raw in impression {
        for sentence in split_sentences(raw) {
            let entities = extract_entities(&sentence, lexicon);
            let cues = negation_positions(&sentence, lexicon, &entities);
            for e in entities.iter().filter(|e| e.entity_type == EntityType::Pathology) {
                if cues.iter().any(|&p| p < e.span.0) {
                    continue;
                }
                if let Some(c) = classes.iter().position(|x| *x == e.canonical) {
                    labels.0[c] = 1;
                }
            }
        }
    }
    labels
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl Counts {
    /// F1 in percent; 100 when there is nothing to find and nothing found.
    pub fn f1(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            100.0
        } else {
            200.0 * self.tp as f64 / denom as f64
        }
    }

    fn add(&mut self, other: Counts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ClassLabelingScore {
    pub class_index: usize,
    pub mention: Counts,
    pub negation: Counts,
    pub mention_f1: f64,
    pub negation_f1: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct LabelingReport {
    pub per_class: Vec<ClassLabelingScore>,
    pub micro_mention_f1: f64,
    pub micro_negation_f1: f64,
    pub macro_mention_f1: f64,
    pub macro_negation_f1: f64,
}

/// Mention detection counts gold=1 as positive; negation detection
/// counts gold=0 as positive.
pub fn evaluate_labeling(predicted: &[LabelVector], gold: &[LabelVector]) -> Result<LabelingReport> {
    if predicted.len() != gold.len() {
        return Err(Error::Validation(format!(
            "{} predicted label vectors vs {} gold",
            predicted.len(),
            gold.len()
        )));
    }
    let c = gold.first().map_or(0, LabelVector::len);
    if predicted.iter().chain(gold).any(|v| v.len() != c) {
        return Err(Error::Validation("label vectors differ in class count".into()));
    }
    let mut per_class = Vec::with_capacity(c);
    let (mut micro_m, mut micro_n) = (Counts::default(), Counts::default());
    for k in 0..c {
        let (mut m, mut n) = (Counts::default(), Counts::default());
        for (p, g) in predicted.iter().zip(gold) {
            match (p.get(k), g.get(k)) {
                (true, true) => m.tp += 1,
                (true, false) => {
                    m.fp += 1;
                    n.fn_ += 1;
                }
                (false, true) => {
                    m.fn_ += 1;
                    n.fp += 1;
                }
                (false, false) => n.tp += 1,
            }
        }
        micro_m.add(m);
        micro_n.add(n);
        per_class.push(ClassLabelingScore {
            class_index: k,
            mention: m,
            negation: n,
            mention_f1: m.f1(),
            negation_f1: n.f1(),
        });
    }
    let mean = |f: fn(&ClassLabelingScore) -> f64| {
        if per_class.is_empty() {
            100.0
        } else {
            per_class.iter().map(f).sum::<f64>() / per_class.len() as f64
        }
    };
    Ok(LabelingReport {
        micro_mention_f1: micro_m.f1(),
        micro_negation_f1: micro_n.f1(),
        macro_mention_f1: mean(|s| s.mention_f1),
        macro_negation_f1: mean(|s| s.negation_f1),
        per_class,
    })
}

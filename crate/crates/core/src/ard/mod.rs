//! Automatic report decomposition: lexicon entity extraction, SIG / MORPH /
//! PATHO structuring, modality grouping and weak label extraction.

mod grouping;
mod labels;
mod lexicon;
mod structure;
mod text;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use grouping::{group_entities, ModalityReportSet};
pub use labels::{
    evaluate_labeling, extract_labels, ClassLabelingScore, Counts, LabelVector, LabelingReport,
};
pub use lexicon::{load_lexicon, EntityType, Lexicon, LexiconEntry};
pub use structure::{structure_sentence, SentenceKind, StructuredSentence};
pub use text::{extract_entities, split_sentences, Entity, Span};

use crate::error::Result;

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportDocument {
    pub id: String,
    pub findings: Vec<String>,
    pub impression: Vec<String>,
}

impl ReportDocument {
    /// Findings followed by impression, re-split into single sentences.
    pub fn sentences(&self) -> impl Iterator<Item = String> + '_ {
        self.findings
            .iter()
            .chain(&self.impression)
            .flat_map(|s| split_sentences(s))
    }
}

/// Structures every sentence of the report and groups the result.
pub fn decompose(
    report: &ReportDocument,
    lexicon: &Lexicon,
    modalities: &[String],
) -> Result<ModalityReportSet> {
    let structured: Vec<StructuredSentence> = report
        .sentences()
        .flat_map(|s| structure_sentence(&s, &extract_entities(&s, lexicon)))
        .collect();
    group_entities(&structured, modalities)
}

/// One line of the structured-output JSONL file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StructuredRecord {
    pub id: String,
    pub per_modality: BTreeMap<String, Vec<String>>,
    pub global: Vec<String>,
    pub labels: LabelVector,
}

impl StructuredRecord {
    pub fn new(id: &str, set: &ModalityReportSet, labels: LabelVector) -> Self {
        StructuredRecord {
            id: id.to_string(),
            per_modality: set
                .modalities
                .iter()
                .enumerate()
                .map(|(k, m)| (m.clone(), set.modality_text(k)))
                .collect(),
            global: set.global_text(),
            labels,
        }
    }
}

/// Full decomposition of one report into its output record.
pub fn decompose_record(
    report: &ReportDocument,
    lexicon: &Lexicon,
    modalities: &[String],
) -> Result<StructuredRecord> {
    let set = decompose(report, lexicon, modalities)?;
    let labels = extract_labels(&report.impression, lexicon);
    Ok(StructuredRecord::new(&report.id, &set, labels))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn figure_one_report() {
        let lex = Lexicon::builtin();
        let report = ReportDocument {
            id: "fig1".into(),
            findings: vec![
                "Patchy abnormal signals can be seen next to the right lateral ventricle, showing \
                 hypointensity on T1WI, hyperintensity on T2WI, T2FLAIR, and DWI. The brain \
                 cisterns and ventricles are slightly enlarged. The sulci widened and deepened."
                    .into(),
            ],
            impression: vec!["Acute cerebral infarction adjacent to the right lateral ventricle.".into()],
        };
        let rec = decompose_record(&report, &lex, lex.modalities()).unwrap();
        assert_eq!(
            rec.per_modality["T1WI"],
            [
                "Patchy T1WI hypointensity on right lateral ventricle",
                "Cistern enlarged",
                "Ventricle enlarged",
                "Sulci widened",
                "Sulci deepened",
                "Acute cerebral infarction is located at lateral ventricle",
            ]
        );
        assert_eq!(rec.global.len(), 9);
        assert_eq!(rec.labels.0.iter().filter(|&&v| v == 1).count(), 1);
    }
}

use serde::Serialize;

use super::lexicon::EntityType;
use super::structure::{SentenceKind, StructuredSentence};
use crate::error::{Error, Result};

/// Modality-wise structured reports plus the global report.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ModalityReportSet {
    pub modalities: Vec<String>,
    pub per_modality: Vec<Vec<StructuredSentence>>,
    pub global: Vec<StructuredSentence>,
}

fn push_unique(list: &mut Vec<StructuredSentence>, s: &StructuredSentence) {
    if !list.contains(s) {
        list.push(s.clone());
    }
}

/// SIG sentences go to their modality's list only; MORPH and PATHO go to
/// every list. Exact duplicates are kept once per list.
pub fn group_entities(
    structured: &[StructuredSentence],
    modalities: &[String],
) -> Result<ModalityReportSet> {
    let mut per_modality = vec![Vec::new(); modalities.len()];
    let mut global = Vec::new();
    for s in structured {
        match s.kind {
            SentenceKind::Sig => {
                let m = s.slot(EntityType::Modality);
                let k = modalities.iter().position(|x| x == m).ok_or_else(|| {
                    Error::Validation(format!(
                        "structured sentence {:?} names modality {m:?} outside {modalities:?}",
                        s.rendered
                    ))
                })?;
                push_unique(&mut per_modality[k], s);
            }
            SentenceKind::Morph | SentenceKind::Patho => {
                for list in &mut per_modality {
                    push_unique(list, s);
                }
            }
        }
        push_unique(&mut global, s);
    }
    Ok(ModalityReportSet {
        modalities: modalities.to_vec(),
        per_modality,
        global,
    })
}

impl ModalityReportSet {
    pub fn k(&self) -> usize {
        self.modalities.len()
    }

    pub fn modality_text(&self, k: usize) -> Vec<String> {
        self.per_modality[k].iter().map(|s| s.rendered.clone()).collect()
    }

    pub fn global_text(&self) -> Vec<String> {
        self.global.iter().map(|s| s.rendered.clone()).collect()
    }

    /// Duplicate-detection key of modality `k`'s report.
    pub fn modality_key(&self, k: usize) -> String {
        self.modality_text(k).join("\n")
    }

    pub fn global_key(&self) -> String {
        self.global_text().join("\n")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use EntityType::*;

    fn mods() -> Vec<String> {
        ["T1WI", "T2WI", "T2FLAIR", "DWI"].map(String::from).to_vec()
    }

    #[test]
    fn sig_goes_to_one_list_morph_to_all() {
        let sig = StructuredSentence::new(SentenceKind::Sig, &[(Modality, "T1WI"), (Signal, "hypointensity")]);
        let morph = StructuredSentence::new(SentenceKind::Morph, &[(Anatomy, "sulci"), (Morphology, "widened")]);
        let set = group_entities(&[sig.clone(), morph.clone()], &mods()).unwrap();
        assert_eq!(set.per_modality[0], vec![sig, morph.clone()]);
        for k in 1..4 {
            assert_eq!(set.per_modality[k], vec![morph.clone()]);
        }
        assert_eq!(set.global.len(), 2);
    }

    #[test]
    fn empty_and_duplicates() {
        let set = group_entities(&[], &mods()).unwrap();
        assert!(set.per_modality.iter().all(Vec::is_empty) && set.global.is_empty());
        let p = StructuredSentence::new(SentenceKind::Patho, &[(Pathology, "glioma")]);
        let set = group_entities(&[p.clone(), p.clone()], &mods()).unwrap();
        assert!(set.per_modality.iter().all(|l| l == &vec![p.clone()]));
        assert_eq!(set.global, vec![p]);
    }

    #[test]
    fn unknown_modality_is_named() {
        let sig = StructuredSentence::new(SentenceKind::Sig, &[(Modality, "T1CE"), (Signal, "hyperintensity")]);
        let err = group_entities(&[sig], &mods()).unwrap_err();
        assert!(err.to_string().contains("T1CE hyperintensity"), "{err}");
    }
}

//! Corpus JSONL: one case per line with report text, per-modality volume
//! paths (relative to the corpus file), optional gold labels and lesion
//! boxes.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::ard::{decompose, extract_labels, LabelVector, Lexicon, ReportDocument};
use crate::encoders::Volume;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LesionBox {
    pub disease: String,
    /// Inclusive lower corner in voxels.
    pub min: [usize; 3],
    /// Exclusive upper corner in voxels.
    pub max: [usize; 3],
}

impl LesionBox {
    pub fn contains(&self, p: [usize; 3]) -> bool {
        (0..3).all(|a| self.min[a] <= p[a] && p[a] < self.max[a])
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CorpusCase {
    pub id: String,
    pub findings: Vec<String>,
    pub impression: Vec<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub volumes: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_labels: Option<LabelVector>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub lesions: Vec<LesionBox>,
}

impl CorpusCase {
    pub fn report(&self) -> ReportDocument {
        ReportDocument {
            id: self.id.clone(),
            findings: self.findings.clone(),
            impression: self.impression.clone(),
        }
    }
}

pub fn read_corpus(path: &Path) -> Result<Vec<CorpusCase>> {
    let text = crate::io::read_to_string(path)?;
    let mut cases = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let case = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        cases.push(case);
    }
    Ok(cases)
}

/// A case ready for the model: volumes in configured modality order and
/// the structured report texts used for alignment.
#[derive(Clone, Debug)]
pub struct PreparedCase {
    pub id: String,
    pub volumes: Vec<Volume>,
    /// Newline-joined modality-wise structured report per modality.
    pub modality_texts: Vec<String>,
    pub global_text: String,
    /// Weak labels extracted from the impression.
    pub labels: LabelVector,
    pub gold_labels: Option<LabelVector>,
    pub lesions: Vec<LesionBox>,
}

impl PreparedCase {
    /// Gold labels when the corpus provides them, else extracted labels.
    pub fn eval_labels(&self) -> &LabelVector {
        self.gold_labels.as_ref().unwrap_or(&self.labels)
    }
}

fn volume_path(base: &Path, rel: &str) -> PathBuf {
    let p = Path::new(rel);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Decomposes the report and loads every modality volume, resized to
/// `dims`. `Ok(None)` when a modality volume is missing.
pub fn prepare_case(
    case: &CorpusCase,
    base: &Path,
    lexicon: &Lexicon,
    modalities: &[String],
    dims: [usize; 3],
) -> Result<Option<PreparedCase>> {
    let mut volumes = Vec::with_capacity(modalities.len());
    for m in modalities {
        let Some(rel) = case.volumes.get(m) else {
            return Ok(None);
        };
        let path = volume_path(base, rel);
        if !path.exists() {
            return Ok(None);
        }
        volumes.push(Volume::read(m, &path)?.resized(dims));
    }
    let set = decompose(&case.report(), lexicon, modalities)?;
    Ok(Some(PreparedCase {
        id: case.id.clone(),
        volumes,
        modality_texts: (0..modalities.len()).map(|k| set.modality_key(k)).collect(),
        global_text: set.global_key(),
        labels: extract_labels(&case.impression, lexicon),
        gold_labels: case.gold_labels.clone(),
        lesions: case.lesions.clone(),
    }))
}

/// Loads and prepares a whole corpus, skipping (with a warning) cases
/// that lack any configured modality.
pub fn load_prepared(
    path: &Path,
    lexicon: &Lexicon,
    modalities: &[String],
    dims: [usize; 3],
) -> Result<Vec<PreparedCase>> {
    let base = path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    for case in read_corpus(path)? {
        match prepare_case(&case, base, lexicon, modalities, dims)? {
            Some(p) => out.push(p),
            None => log::warn!("case {} skipped: missing modality volume", case.id),
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn missing_modality_is_skipped() {
        let dir = tempfile::tempdir().unwrap();
        let v = Volume::zeros("T1WI", [4, 4, 2]);
        v.write(&dir.path().join("a_T1WI.ubv")).unwrap();
        let case = CorpusCase {
            id: "a".into(),
            findings: vec!["Patchy T1WI hypointensity on left frontal lobe.".into()],
            impression: vec!["Glioma.".into()],
            volumes: BTreeMap::from([("T1WI".into(), "a_T1WI.ubv".into())]),
            ..CorpusCase::default()
        };
        let line = serde_json::to_string(&case).unwrap();
        let corpus = dir.path().join("corpus.jsonl");
        std::fs::write(&corpus, format!("{line}\n")).unwrap();
        let lex = Lexicon::builtin();
        let one = vec!["T1WI".to_string()];
        let cases = load_prepared(&corpus, &lex, &one, [8, 8, 4]).unwrap();
        assert_eq!(cases.len(), 1);
        assert_eq!(cases[0].volumes[0].dims(), [8, 8, 4]);
        assert_eq!(cases[0].modality_texts[0].lines().count(), 2);
        let two = vec!["T1WI".to_string(), "DWI".to_string()];
        assert!(load_prepared(&corpus, &lex, &two, [4, 4, 2]).unwrap().is_empty());
    }

    #[test]
    fn bad_line_reports_number() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.jsonl");
        std::fs::write(&p, "{\"id\":\"a\",\"findings\":[],\"impression\":[]}\n{oops\n").unwrap();
        match read_corpus(&p) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn lesion_box_bounds() {
        let b = LesionBox {
            disease: "glioma".into(),
            min: [1, 1, 1],
            max: [3, 3, 2],
        };
        assert!(b.contains([1, 2, 1]));
        assert!(!b.contains([3, 2, 1]));
    }
}

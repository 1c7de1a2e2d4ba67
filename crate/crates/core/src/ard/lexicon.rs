use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::text::tokenize_lower;
use crate::error::{Error, Result};

const BUILTIN: &str = include_str!("../../data/lexicon.json");

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EntityType {
    Anatomy,
    Side,
    Modality,
    Signal,
    Morphology,
    Pathology,
}

impl EntityType {
    pub fn as_str(self) -> &'static str {
        match self {
            EntityType::Anatomy => "anatomy",
            EntityType::Side => "side",
            EntityType::Modality => "modality",
            EntityType::Signal => "signal",
            EntityType::Morphology => "morphology",
            EntityType::Pathology => "pathology",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LexiconEntry {
    pub surface: String,
    pub canonical: String,
    pub entity_type: EntityType,
    pub(crate) tokens: Vec<String>,
}

/// Dictionary of surface forms, negation cues and the ordered disease
/// classes. Immutable once built.
#[derive(Clone, Debug)]
pub struct Lexicon {
    entries: Vec<LexiconEntry>,
    by_first_token: HashMap<String, Vec<usize>>,
    negation_cues: Vec<Vec<String>>,
    disease_classes: Vec<String>,
    disease_descriptions: BTreeMap<String, String>,
    modalities: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct LexiconFile {
    entities: Vec<EntryRecord>,
    #[serde(default)]
    negation_cues: Vec<String>,
    #[serde(default)]
    disease_classes: Vec<String>,
    #[serde(default)]
    disease_descriptions: BTreeMap<String, String>,
}

#[derive(Serialize, Deserialize)]
struct EntryRecord {
    surface: String,
    canonical: String,
    #[serde(rename = "type")]
    entity_type: EntityType,
}

pub fn load_lexicon(path: &Path) -> Result<Lexicon> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Lexicon::from_json(&text, path)
}

impl Lexicon {
    /// The lexicon shipped with the crate: four modalities and the
    /// thirteen-class brain disease list.
    pub fn builtin() -> Lexicon {
        Lexicon::from_json(BUILTIN, Path::new("<builtin lexicon>")).expect("bundled lexicon is valid")
    }

    pub fn from_json(text: &str, origin: &Path) -> Result<Lexicon> {
        let file: LexiconFile = serde_json::from_str(text).map_err(|e| Error::Parse {
            path: origin.to_path_buf(),
            line: e.line(),
            msg: e.to_string(),
        })?;
        Lexicon::build(file)
    }

    fn build(file: LexiconFile) -> Result<Lexicon> {
        let mut seen = HashSet::new();
        let mut entries = Vec::with_capacity(file.entities.len());
        let mut modalities: Vec<String> = Vec::new();
        for rec in file.entities {
            let folded = rec.surface.to_lowercase();
            let tokens = tokenize_lower(&rec.surface);
            if tokens.is_empty() || rec.canonical.trim().is_empty() {
                return Err(Error::Validation(format!(
                    "lexicon entry {:?} has an empty surface or canonical form",
                    rec.surface
                )));
            }
            if !seen.insert(folded) {
                return Err(Error::Validation(format!(
                    "duplicate lexicon surface {:?}",
                    rec.surface
                )));
            }
            if rec.entity_type == EntityType::Modality && !modalities.contains(&rec.canonical) {
                modalities.push(rec.canonical.clone());
            }
            entries.push(LexiconEntry {
                surface: rec.surface,
                canonical: rec.canonical,
                entity_type: rec.entity_type,
                tokens: tokens.into_iter().map(|(t, _)| t).collect(),
            });
        }
        entries.sort_by(|a, b| {
            b.surface
                .chars()
                .count()
                .cmp(&a.surface.chars().count())
                .then_with(|| a.surface.cmp(&b.surface))
        });

        let pathologies: HashSet<&str> = entries
            .iter()
            .filter(|e| e.entity_type == EntityType::Pathology)
            .map(|e| e.canonical.as_str())
            .collect();
        let mut classes = HashSet::new();
        for c in &file.disease_classes {
            if !pathologies.contains(c.as_str()) {
                return Err(Error::Validation(format!(
                    "disease class {c:?} is not a pathology canonical form"
                )));
            }
            if !classes.insert(c.as_str()) {
                return Err(Error::Validation(format!("disease class {c:?} listed twice")));
            }
        }

        let mut by_first_token: HashMap<String, Vec<usize>> = HashMap::new();
        for (i, e) in entries.iter().enumerate() {
            by_first_token.entry(e.tokens[0].clone()).or_default().push(i);
        }
        let negation_cues = file
            .negation_cues
            .iter()
            .map(|c| tokenize_lower(c).into_iter().map(|(t, _)| t).collect::<Vec<_>>())
            .filter(|t| !t.is_empty())
            .collect();

        Ok(Lexicon {
            entries,
            by_first_token,
            negation_cues,
            disease_classes: file.disease_classes,
            disease_descriptions: file.disease_descriptions,
            modalities,
        })
    }

    /// Entries ordered by descending surface length.
    pub fn entries(&self) -> &[LexiconEntry] {
        &self.entries
    }

    pub(crate) fn candidates(&self, first_token: &str) -> &[usize] {
        self.by_first_token
            .get(first_token)
            .map_or(&[], Vec::as_slice)
    }

    pub(crate) fn negation_cues(&self) -> &[Vec<String>] {
        &self.negation_cues
    }

    pub fn disease_classes(&self) -> &[String] {
        &self.disease_classes
    }

    pub fn num_classes(&self) -> usize {
        self.disease_classes.len()
    }

    pub fn description(&self, disease: &str) -> Option<&str> {
        self.disease_descriptions.get(disease).map(String::as_str)
    }

    pub fn disease_descriptions(&self) -> &BTreeMap<String, String> {
        &self.disease_descriptions
    }

    /// Modality canonical forms in first-appearance order.
    pub fn modalities(&self) -> &[String] {
        &self.modalities
    }

    pub fn is_canonical(&self, entity_type: EntityType, value: &str) -> bool {
        self.entries
            .iter()
            .any(|e| e.entity_type == entity_type && e.canonical == value)
    }

    /// Fails unless the lexicon's modality canonicals are exactly `names`.
    pub fn check_modalities(&self, names: &[String]) -> Result<()> {
        let mine: HashSet<&String> = self.modalities.iter().collect();
        let theirs: HashSet<&String> = names.iter().collect();
        if mine != theirs || names.len() != theirs.len() {
            return Err(Error::Validation(format!(
                "lexicon modalities {:?} do not match configured {:?}",
                self.modalities, names
            )));
        }
        Ok(())
    }

    /// Copy of this lexicon whose disease class list is `classes`.
    pub fn with_classes(&self, classes: &[String]) -> Result<Lexicon> {
        let file = LexiconFile {
            entities: self
                .entries
                .iter()
                .map(|e| EntryRecord {
                    surface: e.surface.clone(),
                    canonical: e.canonical.clone(),
                    entity_type: e.entity_type,
                })
                .collect(),
            negation_cues: Vec::new(),
            disease_classes: classes.to_vec(),
            disease_descriptions: self.disease_descriptions.clone(),
        };
        let mut lex = Lexicon::build(file)?;
        lex.negation_cues = self.negation_cues.clone();
        Ok(lex)
    }

    pub fn to_json(&self) -> Result<String> {
        let mut entities: Vec<EntryRecord> = self
            .entries
            .iter()
            .map(|e| EntryRecord {
                surface: e.surface.clone(),
                canonical: e.canonical.clone(),
                entity_type: e.entity_type,
            })
            .collect();
        entities.sort_by(|a, b| a.surface.cmp(&b.surface));
        let file = LexiconFile {
            entities,
            negation_cues: self.negation_cues.iter().map(|c| c.join(" ")).collect(),
            disease_classes: self.disease_classes.clone(),
            disease_descriptions: self.disease_descriptions.clone(),
        };
        let mut s = serde_json::to_string_pretty(&file)?;
        s.push('\n');
        Ok(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_has_thirteen_classes() {
        let lex = Lexicon::builtin();
        assert_eq!(lex.num_classes(), 13);
        assert_eq!(lex.modalities(), ["T1WI", "T2WI", "T2FLAIR", "DWI"]);
        let lens: Vec<_> = lex.entries().iter().map(|e| e.surface.chars().count()).collect();
        assert!(lens.windows(2).all(|w| w[0] >= w[1]));
        for c in lex.disease_classes() {
            assert!(lex.description(c).is_some(), "{c}");
        }
    }

    #[test]
    fn duplicate_surface_rejected() {
        let text = r#"{"entities":[
            {"surface":"glioma","canonical":"glioma","type":"pathology"},
            {"surface":"Glioma","canonical":"glioma","type":"pathology"}]}"#;
        let err = Lexicon::from_json(text, Path::new("x.json")).unwrap_err();
        assert!(matches!(err, Error::Validation(_)), "{err}");
    }

    #[test]
    fn malformed_reports_line() {
        let text = "{\n\"entities\": [\n{\"surface\": 3}\n]}";
        match Lexicon::from_json(text, Path::new("bad.json")).unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 3),
            other => panic!("{other}"),
        }
    }

    #[test]
    fn empty_entries_is_valid_with_zero_classes() {
        let lex = Lexicon::from_json(r#"{"entities":[]}"#, Path::new("e.json")).unwrap();
        assert_eq!(lex.num_classes(), 0);
        assert!(lex.entries().is_empty());
    }

    #[test]
    fn class_must_be_pathology() {
        let text = r#"{"entities":[{"surface":"sulci","canonical":"sulci","type":"anatomy"}],
                       "disease_classes":["sulci"]}"#;
        assert!(Lexicon::from_json(text, Path::new("c.json")).is_err());
    }

    #[test]
    fn json_round_trip_preserves_matching() {
        let lex = Lexicon::builtin();
        let again = Lexicon::from_json(&lex.to_json().unwrap(), Path::new("rt")).unwrap();
        assert_eq!(again.entries(), lex.entries());
        assert_eq!(again.disease_classes(), lex.disease_classes());
        assert_eq!(again.negation_cues(), lex.negation_cues());
    }
}

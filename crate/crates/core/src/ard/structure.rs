//! Conversion of one sentence's entities into SIG / MORPH / PATHO records.
//!
//! Pairing uses a clause-aware distance: the number of `,` `;` `:`
//! characters between two mentions first, then the character gap. This
//! pairs "hypointensity on T1WI, hyperintensity on T2WI" the way it reads
//! even though the comma puts `T1WI` closer to the second signal.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::lexicon::EntityType;
use super::text::Entity;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum SentenceKind {
    #[serde(rename = "SIG")]
    Sig,
    #[serde(rename = "MORPH")]
    Morph,
    #[serde(rename = "PATHO")]
    Patho,
}

impl SentenceKind {
    pub fn slot_names(self) -> &'static [EntityType] {
        use EntityType::*;
        match self {
            SentenceKind::Sig => &[Morphology, Modality, Signal, Side, Anatomy],
            SentenceKind::Morph => &[Anatomy, Morphology],
            SentenceKind::Patho => &[Pathology, Anatomy],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StructuredSentence {
    pub kind: SentenceKind,
    /// Exactly the kind's slots; absent entities are empty strings.
    pub slots: BTreeMap<EntityType, String>,
    pub rendered: String,
}

impl StructuredSentence {
    pub fn new(kind: SentenceKind, values: &[(EntityType, &str)]) -> Self {
        let mut slots: BTreeMap<EntityType, String> = kind
            .slot_names()
            .iter()
            .map(|&t| (t, String::new()))
            .collect();
        for &(t, v) in values {
            if let Some(slot) = slots.get_mut(&t) {
                *slot = v.to_string();
            }
        }
        let rendered = render(kind, &slots);
        StructuredSentence {
            kind,
            slots,
            rendered,
        }
    }

    pub fn slot(&self, t: EntityType) -> &str {
        self.slots.get(&t).map_or("", String::as_str)
    }
}

fn render(kind: SentenceKind, slots: &BTreeMap<EntityType, String>) -> String {
    use EntityType::*;
    let s = |t| slots.get(&t).map_or("", String::as_str);
    let parts: Vec<&str> = match kind {
        SentenceKind::Sig => {
            let mut p = vec![s(Morphology), s(Modality), s(Signal)];
            if !(s(Side).is_empty() && s(Anatomy).is_empty()) {
                p.extend(["on", s(Side), s(Anatomy)]);
            }
            p
        }
        SentenceKind::Morph => vec![s(Anatomy), s(Morphology)],
        SentenceKind::Patho => {
            if s(Anatomy).is_empty() {
                vec![s(Pathology)]
            } else {
                vec![s(Pathology), "is located at", s(Anatomy)]
            }
        }
    };
    let joined = parts
        .into_iter()
        .filter(|p| !p.is_empty())
        .collect::<Vec<_>>()
        .join(" ");
    capitalize(&joined)
}

fn capitalize(s: &str) -> String {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) => c.to_uppercase().chain(chars).collect(),
        None => String::new(),
    }
}

/// (clause separators, character gap) between two spans.
fn distance(sentence: &str, a: &Entity, b: &Entity) -> (usize, usize) {
    let (lo, hi) = if a.span.0 <= b.span.0 {
        (a.span.1, b.span.0)
    } else {
        (b.span.1, a.span.0)
    };
    if hi <= lo {
        return (0, 0);
    }
    let gap = &sentence[lo..hi];
    let separators = gap.chars().filter(|c| matches!(c, ',' | ';' | ':')).count();
    (separators, gap.chars().count())
}

/// Nearest candidate to `anchor`; ties go to the earlier candidate.
fn nearest<'a>(sentence: &str, anchor: &Entity, candidates: &[&'a Entity]) -> Option<&'a Entity> {
    candidates
        .iter()
        .min_by_key(|c| (distance(sentence, anchor, c), c.span.0))
        .copied()
}

/// The nearest side to `anatomy` among sides whose own nearest anatomy
/// is `anatomy`.
fn side_of<'a>(
    sentence: &str,
    anatomy: &Entity,
    sides: &[&'a Entity],
    anatomies: &[&Entity],
) -> Option<&'a Entity> {
    let owned: Vec<&Entity> = sides
        .iter()
        .copied()
        .filter(|s| nearest(sentence, s, anatomies).is_some_and(|a| a.span == anatomy.span))
        .collect();
    nearest(sentence, anatomy, &owned)
}

fn of_type(entities: &[Entity], t: EntityType) -> Vec<&Entity> {
    entities.iter().filter(|e| e.entity_type == t).collect()
}

fn canonical(e: Option<&Entity>) -> &str {
    e.map_or("", |e| e.canonical.as_str())
}

/// Structures one sentence from its entities (as produced by
/// `extract_entities` on `sentence`).
pub fn structure_sentence(sentence: &str, entities: &[Entity]) -> Vec<StructuredSentence> {
    use EntityType::*;
    let modalities = of_type(entities, Modality);
    let signals = of_type(entities, Signal);
    let anatomies = of_type(entities, Anatomy);
    let sides = of_type(entities, Side);
    let morphs = of_type(entities, Morphology);
    let pathologies = of_type(entities, Pathology);

    if !signals.is_empty() && !modalities.is_empty() {
        return modalities
            .iter()
            .map(|m| {
                let signal = nearest(sentence, m, &signals).expect("signals non-empty");
                let anatomy = nearest(sentence, signal, &anatomies);
                let side = match anatomy {
                    Some(a) => side_of(sentence, a, &sides, &anatomies),
                    None => nearest(sentence, signal, &sides),
                };
                let morph = nearest(sentence, m, &morphs);
                StructuredSentence::new(
                    SentenceKind::Sig,
                    &[
                        (Morphology, canonical(morph)),
                        (Modality, &m.canonical),
                        (Signal, &signal.canonical),
                        (Side, canonical(side)),
                        (Anatomy, canonical(anatomy)),
                    ],
                )
            })
            .collect();
    }

    if !morphs.is_empty() && pathologies.is_empty() {
        if anatomies.is_empty() {
            return morphs
                .iter()
                .map(|m| StructuredSentence::new(SentenceKind::Morph, &[(Morphology, &m.canonical)]))
                .collect();
        }
        let mut pairs: Vec<(&Entity, &Entity)> = Vec::new();
        for a in &anatomies {
            let m = nearest(sentence, a, &morphs).expect("morphs non-empty");
            pairs.push((a, m));
        }
        for m in &morphs {
            let a = nearest(sentence, m, &anatomies).expect("anatomies non-empty");
            pairs.push((a, m));
        }
        pairs.sort_by_key(|(a, m)| (a.span.0.min(m.span.0), a.span.0, m.span.0));
        pairs.dedup_by(|x, y| x.0.span == y.0.span && x.1.span == y.1.span);
        return pairs
            .into_iter()
            .map(|(a, m)| {
                StructuredSentence::new(
                    SentenceKind::Morph,
                    &[(Anatomy, &a.canonical), (Morphology, &m.canonical)],
                )
            })
            .collect();
    }

    pathologies
        .iter()
        .map(|p| {
            let anatomy = nearest(sentence, p, &anatomies);
            StructuredSentence::new(
                SentenceKind::Patho,
                &[(Pathology, &p.canonical), (Anatomy, canonical(anatomy))],
            )
        })
        .collect()
}

use serde::{Deserialize, Serialize};

use super::lexicon::{EntityType, Lexicon};

/// Byte range `[start, end)` into the source sentence.
pub type Span = (usize, usize);

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entity {
    pub entity_type: EntityType,
    pub canonical: String,
    pub span: Span,
}

/// Lower-cased alphanumeric runs with their byte spans.
pub(crate) fn tokenize_lower(text: &str) -> Vec<(String, Span)> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, ch) in text.char_indices() {
        match (ch.is_alphanumeric(), start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                out.push((text[s..i].to_lowercase(), (s, i)));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        out.push((text[s..].to_lowercase(), (s, text.len())));
    }
    out
}

/// Splits on `.`, `;` and newlines; trims and collapses whitespace and
/// drops empty fragments.
pub fn split_sentences(raw: &str) -> Vec<String> {
    raw.split(['.', ';', '\n', '\r'])
        .map(|s| s.split_whitespace().collect::<Vec<_>>().join(" "))
        .filter(|s| !s.is_empty())
        .collect()
}

fn matches_at(tokens: &[(String, Span)], at: usize, pattern: &[String]) -> bool {
    tokens.len() >= at + pattern.len()
        && tokens[at..at + pattern.len()]
            .iter()
            .zip(pattern)
            .all(|((t, _), p)| t == p)
}

/// Case-insensitive longest-surface-first scan over word tokens, left to
/// right; a matched span is consumed.
pub fn extract_entities(sentence: &str, lexicon: &Lexicon) -> Vec<Entity> {
    let tokens = tokenize_lower(sentence);
    let mut out = Vec::new();
    let mut i = 0;
    while i < tokens.len() {
        let hit = lexicon
            .candidates(&tokens[i].0)
            .iter()
            .map(|&idx| &lexicon.entries()[idx])
            .find(|e| matches_at(&tokens, i, &e.tokens));
        match hit {
            Some(e) => {
                let n = e.tokens.len();
                out.push(Entity {
                    entity_type: e.entity_type,
                    canonical: e.canonical.clone(),
                    span: (tokens[i].1 .0, tokens[i + n - 1].1 .1),
                });
                i += n;
            }
            None => i += 1,
        }
    }
    out
}

/// Start offsets of negation cues that are not part of a lexicon match.
pub(crate) fn negation_positions(sentence: &str, lexicon: &Lexicon, entities: &[Entity]) -> Vec<usize> {
    let tokens = tokenize_lower(sentence);
    let inside = |pos: usize| entities.iter().any(|e| e.span.0 <= pos && pos < e.span.1);
    let mut out = Vec::new();
    for i in 0..tokens.len() {
        let start = tokens[i].1 .0;
        if inside(start) {
            continue;
        }
        if lexicon.negation_cues().iter().any(|c| matches_at(&tokens, i, c)) {
            out.push(start);
        }
    }
    out
}

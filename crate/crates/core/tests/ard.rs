use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use unibrain::ard::{
    decompose, decompose_record, evaluate_labeling, extract_entities, extract_labels,
    structure_sentence, EntityType, Lexicon, ReportDocument, SentenceKind, StructuredSentence,
};
use unibrain::corpus::read_corpus;
use unibrain::synth::{case_seed, generate_case, SyntheticSpec};

fn fixture(name: &str) -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

#[test]
fn golden_corpus_matches_byte_for_byte() {
    let lex = Lexicon::builtin();
    let cases = read_corpus(&fixture("ard_corpus.jsonl")).unwrap();
    let sentences: usize = cases.iter().map(|c| c.report().sentences().count()).sum();
    assert_eq!(sentences, 30);
    let mut out = String::new();
    for c in &cases {
        let rec = decompose_record(&c.report(), &lex, lex.modalities()).unwrap();
        out.push_str(&serde_json::to_string(&rec).unwrap());
        out.push('\n');
    }
    let golden = std::fs::read_to_string(fixture("ard_golden.jsonl")).unwrap();
    assert_eq!(out, golden);
}

#[test]
fn golden_contains_four_modality_expansion() {
    let golden = std::fs::read_to_string(fixture("ard_golden.jsonl")).unwrap();
    let first = golden.lines().next().unwrap();
    for s in [
        "Patchy T1WI hypointensity on right lateral ventricle",
        "Patchy T2WI hyperintensity on right lateral ventricle",
        "Patchy T2FLAIR hyperintensity on right lateral ventricle",
        "Patchy DWI hyperintensity on right lateral ventricle",
    ] {
        assert!(first.contains(s), "{s}");
    }
}

fn surfaces(lex: &Lexicon, t: EntityType) -> Vec<String> {
    lex.entries()
        .iter()
        .filter(|e| e.entity_type == t)
        .map(|e| e.surface.clone())
        .collect()
}

/// Random sentence mixing lexicon surfaces, filler words and clause
/// punctuation.
fn fuzz_sentence(rng: &mut ChaCha8Rng, vocab: &[Vec<String>]) -> String {
    const FILLER: [&str; 10] = ["the", "in", "on", "with", "and", "shows", "seen", "area", "of", "slightly"];
    const PUNCT: [&str; 4] = ["", ",", ":", " and"];
    let n = rng.random_range(1..12);
    let mut words = Vec::with_capacity(n);
    for _ in 0..n {
        let w = if rng.random_bool(0.6) {
            vocab.choose(rng).unwrap().choose(rng).unwrap().clone()
        } else {
            FILLER.choose(rng).unwrap().to_string()
        };
        words.push(format!("{w}{}", PUNCT.choose(rng).unwrap()));
    }
    words.join(" ")
}

fn structured_of(report: &ReportDocument, lex: &Lexicon) -> Vec<StructuredSentence> {
    report
        .sentences()
        .flat_map(|s| structure_sentence(&s, &extract_entities(&s, lex)))
        .collect()
}

#[test]
fn grouping_invariants_on_fuzzed_reports() {
    let lex = Lexicon::builtin();
    let vocab: Vec<Vec<String>> = [
        EntityType::Anatomy,
        EntityType::Side,
        EntityType::Modality,
        EntityType::Signal,
        EntityType::Morphology,
        EntityType::Pathology,
    ]
    .into_iter()
    .map(|t| surfaces(&lex, t))
    .collect();
    let modalities = lex.modalities();
    let mut rng = ChaCha8Rng::seed_from_u64(1000);
    let mut sig_seen = 0;
    for i in 0..1000 {
        let report = ReportDocument {
            id: format!("fuzz{i}"),
            findings: (0..rng.random_range(0..5)).map(|_| fuzz_sentence(&mut rng, &vocab) + ".").collect(),
            impression: (0..rng.random_range(0..3)).map(|_| fuzz_sentence(&mut rng, &vocab) + ".").collect(),
        };
        let set = decompose(&report, &lex, modalities).unwrap();
        for s in structured_of(&report, &lex) {
            let holders: Vec<usize> = (0..set.k()).filter(|&k| set.per_modality[k].contains(&s)).collect();
            match s.kind {
                SentenceKind::Sig => {
                    sig_seen += 1;
                    let k = modalities.iter().position(|m| m == s.slot(EntityType::Modality)).unwrap();
                    assert_eq!(holders, [k], "{:?} in report {i}", s.rendered);
                }
                SentenceKind::Morph | SentenceKind::Patho => {
                    assert_eq!(holders.len(), set.k(), "{:?} in report {i}", s.rendered);
                }
            }
            assert!(set.global.contains(&s));
        }
        for list in set.per_modality.iter().chain([&set.global]) {
            for (j, s) in list.iter().enumerate() {
                assert!(!list[..j].contains(s), "duplicate {:?}", s.rendered);
            }
        }
    }
    assert!(sig_seen > 500, "fuzzer produced only {sig_seen} SIG sentences");
}

#[test]
fn synthetic_labels_extract_perfectly() {
    let spec = SyntheticSpec::default();
    let lex = spec.lexicon(&Lexicon::builtin()).unwrap();
    let (mut predicted, mut gold, mut negated) = (Vec::new(), Vec::new(), 0);
    for i in 0..250 {
        let case = generate_case(case_seed(42, i), &spec).unwrap();
        negated += usize::from(case.negated.is_some());
        predicted.push(extract_labels(&case.report.impression, &lex));
        gold.push(case.labels);
    }
    assert!(negated > 0);
    let r = evaluate_labeling(&predicted, &gold).unwrap();
    assert_eq!(r.micro_mention_f1, 100.0);
    assert_eq!(r.micro_negation_f1, 100.0);
    assert_eq!(r.macro_mention_f1, 100.0);
    assert_eq!(r.macro_negation_f1, 100.0);
}

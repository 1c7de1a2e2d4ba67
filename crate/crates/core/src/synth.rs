//! Seeded synthetic multimodal cases: box lesions with per-modality signal
//! signatures plus lexicon-closed findings and impression text.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::ard::{EntityType, LabelVector, Lexicon, ReportDocument};
use crate::corpus::{CorpusCase, LesionBox};
use crate::cvp::{DiseaseQuery, DiseaseQuerySet};
use crate::encoders::Volume;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Signal {
    Hyper,
    Hypo,
    None,
}

impl Signal {
    fn sign(self) -> f64 {
        match self {
            Signal::Hyper => 1.0,
            Signal::Hypo => -1.0,
            Signal::None => 0.0,
        }
    }

    fn word(self) -> Option<&'static str> {
        match self {
            Signal::Hyper => Some("hyperintensity"),
            Signal::Hypo => Some("hypointensity"),
            Signal::None => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub anatomy: String,
    pub side: String,
    pub min: [usize; 3],
    pub max: [usize; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiseaseSpec {
    pub name: String,
    pub signature: BTreeMap<String, Signal>,
    pub lesion_min: [usize; 3],
    pub lesion_max: [usize; 3],
    pub regions: Vec<Region>,
    pub prevalence: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub modalities: Vec<String>,
    pub dims: [usize; 3],
    pub noise: f64,
    pub lesion_offset: f64,
    /// Class assigned when no disease is present; first label column.
    pub normal_class: String,
    pub max_diseases: usize,
    /// Chance per case of appending a negated disease mention.
    pub negation_rate: f64,
    /// Chance per case of an unrelated morphology sentence.
    pub morphology_rate: f64,
    pub diseases: Vec<DiseaseSpec>,
}

fn region(anatomy: &str, side: &str, min: [usize; 3], max: [usize; 3]) -> Region {
    Region {
        anatomy: anatomy.into(),
        side: side.into(),
        min,
        max,
    }
}

fn both_sides(anatomy: &str, x: [usize; 2], y: [usize; 2], z: [usize; 2], width: usize) -> [Region; 2] {
    [
        region(anatomy, "left", [x[0], y[0], z[0]], [x[1], y[1], z[1]]),
        region(anatomy, "right", [width - x[1], y[0], z[0]], [width - x[0], y[1], z[1]]),
    ]
}

fn signature(sig: [Signal; 4]) -> BTreeMap<String, Signal> {
    ["T1WI", "T2WI", "T2FLAIR", "DWI"]
        .into_iter()
        .map(String::from)
        .zip(sig)
        .collect()
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        use Signal::{Hyper, Hypo, None};
        let disease = |name: &str, sig, regions: Vec<Region>, prevalence| DiseaseSpec {
            name: name.into(),
            signature: signature(sig),
            lesion_min: [6, 6, 3],
            lesion_max: [10, 10, 6],
            regions,
            prevalence,
        };
        SyntheticSpec {
            modalities: ["T1WI", "T2WI", "T2FLAIR", "DWI"].map(String::from).to_vec(),
            dims: [32, 32, 8],
            noise: 0.1,
            lesion_offset: 1.0,
            normal_class: "normal".into(),
            max_diseases: 2,
            negation_rate: 0.05,
            morphology_rate: 0.2,
            diseases: vec![
                disease(
                    "acute cerebral infarction",
                    [Hypo, Hyper, Hyper, Hyper],
                    [
                        both_sides("lateral ventricle", [4, 16], [8, 24], [1, 7], 32),
                        both_sides("basal ganglia", [6, 16], [10, 22], [1, 7], 32),
                    ]
                    .concat(),
                    0.35,
                ),
                disease(
                    "glioma",
                    [Hypo, Hyper, Hyper, None],
                    [
                        both_sides("frontal lobe", [2, 16], [0, 14], [0, 8], 32),
                        both_sides("temporal lobe", [0, 14], [12, 26], [0, 8], 32),
                    ]
                    .concat(),
                    0.3,
                ),
                disease(
                    "brain hemorrhage",
                    [Hyper, Hypo, Hyper, Hypo],
                    [
                        both_sides("thalamus", [6, 16], [12, 24], [1, 7], 32),
                        both_sides("occipital lobe", [2, 16], [20, 32], [0, 8], 32),
                    ]
                    .concat(),
                    0.25,
                ),
            ],
        }
    }
}

impl SyntheticSpec {
    pub fn load(path: &Path) -> Result<Self> {
        let text = crate::io::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            msg: e.to_string(),
        })
    }

    /// Label columns: the normal class followed by the catalog diseases.
    pub fn classes(&self) -> Vec<String> {
        std::iter::once(self.normal_class.clone())
            .chain(self.diseases.iter().map(|d| d.name.clone()))
            .collect()
    }

    /// Builtin lexicon restricted to this spec's classes, after checking
    /// that every generated word is in its vocabulary.
    pub fn lexicon(&self, base: &Lexicon) -> Result<Lexicon> {
        self.validate()?;
        let lex = base.with_classes(&self.classes())?;
        lex.check_modalities(&self.modalities)?;
        for d in &self.diseases {
            for r in &d.regions {
                for (t, v) in [(EntityType::Anatomy, &r.anatomy), (EntityType::Side, &r.side)] {
                    if !lex.is_canonical(t, v) {
                        return Err(Error::Validation(format!("{v:?} is not a lexicon {}", t.as_str())));
                    }
                }
            }
        }
        Ok(lex)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Validation(format!("synthetic spec: {m}")));
        if self.dims.contains(&0) || self.modalities.is_empty() {
            return bad("dims and modalities must be non-empty".into());
        }
        if !(self.noise >= 0.0) || !(0.0..=1.0).contains(&self.negation_rate) {
            return bad("noise must be >= 0 and negation_rate in [0, 1]".into());
        }
        for d in &self.diseases {
            if !(d.prevalence > 0.0 && d.prevalence <= 1.0) {
                return bad(format!("{}: prevalence {} outside (0, 1]", d.name, d.prevalence));
            }
            if d.regions.is_empty() {
                return bad(format!("{}: no anatomy regions", d.name));
            }
            if (0..3).any(|a| d.lesion_min[a] == 0 || d.lesion_min[a] > d.lesion_max[a]) {
                return bad(format!("{}: lesion size range not well-ordered", d.name));
            }
            for r in &d.regions {
                if (0..3).any(|a| r.min[a] >= r.max[a] || r.max[a] > self.dims[a]) {
                    return bad(format!("{}: region {:?} outside dims {:?}", d.name, r, self.dims));
                }
            }
            if let Some(m) = d.signature.keys().find(|m| !self.modalities.contains(m)) {
                return bad(format!("{}: signature names unknown modality {m}", d.name));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticCase {
    pub volumes: Vec<Volume>,
    pub report: ReportDocument,
    pub labels: LabelVector,
    pub lesions: Vec<LesionBox>,
    /// Disease named in an injected negated mention, if any.
    pub negated: Option<String>,
}

/// Per-case seed derived from the corpus seed and index.
pub fn case_seed(seed: u64, index: u64) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
    mix(seed ^ mix(index))
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    c.next()
        .map(|f| f.to_uppercase().chain(c).collect())
        .unwrap_or_default()
}

fn sample_box(d: &DiseaseSpec, r: &Region, rng: &mut impl Rng) -> ([usize; 3], [usize; 3]) {
    let mut min = [0; 3];
    let mut max = [0; 3];
    for a in 0..3 {
        let extent = r.max[a] - r.min[a];
        let size = rng.random_range(d.lesion_min[a]..=d.lesion_max[a]).min(extent);
        let start = r.min[a] + rng.random_range(0..=extent - size);
        min[a] = start;
        max[a] = start + size;
    }
    (min, max)
}

/// One reproducible case. Labels agree with what the label extractor
/// reads from the impression.
pub fn generate_case(seed: u64, spec: &SyntheticSpec) -> Result<SyntheticCase> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut present: Vec<usize> = (0..spec.diseases.len())
        .filter(|&i| rng.random::<f64>() < spec.diseases[i].prevalence)
        .collect();
    present.truncate(spec.max_diseases);
    let mut negated = None;
    if !spec.diseases.is_empty() && rng.random::<f64>() < spec.negation_rate {
        let d = rng.random_range(0..spec.diseases.len());
        present.retain(|&i| i != d);
        negated = Some(d);
    }

    let n: usize = spec.dims.iter().product();
    let mut data: Vec<Vec<f64>> = spec
        .modalities
        .iter()
        .map(|_| {
            (0..n)
                .map(|_| spec.noise * Distribution::<f64>::sample(&StandardNormal, &mut rng))
                .collect()
        })
        .collect();
    let mut findings = Vec::new();
    let mut impression = Vec::new();
    let mut lesions = Vec::new();
    for &i in &present {
        let d = &spec.diseases[i];
        let r = &d.regions[rng.random_range(0..d.regions.len())];
        let (min, max) = sample_box(d, r, &mut rng);
        for (k, m) in spec.modalities.iter().enumerate() {
            let sig = d.signature.get(m).copied().unwrap_or(Signal::None);
            let offset = spec.lesion_offset * sig.sign();
            if offset != 0.0 {
                for x in min[0]..max[0] {
                    for y in min[1]..max[1] {
                        for z in min[2]..max[2] {
                            data[k][(x * spec.dims[1] + y) * spec.dims[2] + z] += offset;
                        }
                    }
                }
            }
            if let Some(word) = sig.word() {
                findings.push(format!("Patchy {m} {word} on {} {}.", r.side, r.anatomy));
            }
        }
        impression.push(format!("{} adjacent to the {} {}.", capitalize(&d.name), r.side, r.anatomy));
        lesions.push(LesionBox {
            disease: d.name.clone(),
            min,
            max,
        });
    }
    if rng.random::<f64>() < spec.morphology_rate {
        findings.push("The sulci widened.".into());
    }
    if present.is_empty() {
        findings.push("No abnormal signal is seen in the brain parenchyma.".into());
        impression.push(format!("{}.", capitalize(&spec.normal_class)));
    }
    if let Some(d) = negated {
        impression.push(format!("No {}.", spec.diseases[d].name));
    }

    let mut labels = LabelVector::zeros(spec.diseases.len() + 1);
    if present.is_empty() {
        labels.0[0] = 1;
    }
    for &i in &present {
        labels.0[i + 1] = 1;
    }
    let volumes = spec
        .modalities
        .iter()
        .zip(data)
        .map(|(m, v)| Volume::new(m.clone(), spec.dims, v).map(Volume::quantized))
        .collect::<Result<_>>()?;
    Ok(SyntheticCase {
        volumes,
        report: ReportDocument {
            id: String::new(),
            findings,
            impression,
        },
        labels,
        lesions,
        negated: negated.map(|d| spec.diseases[d].name.clone()),
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct CorpusSummary {
    pub cases: usize,
    pub negated_mentions: usize,
    pub classes: Vec<String>,
    pub positives: Vec<usize>,
}

pub const CORPUS_FILE: &str = "corpus.jsonl";
pub const LEXICON_FILE: &str = "lexicon.json";
pub const QUERIES_FILE: &str = "queries.json";
pub const SPEC_FILE: &str = "spec.json";

/// Writes `corpus.jsonl`, `volumes/*.ubv`, the class-restricted
/// `lexicon.json`, `queries.json` and the resolved `spec.json`.
pub fn generate_corpus(n: usize, seed: u64, spec: &SyntheticSpec, out_dir: &Path) -> Result<CorpusSummary> {
    let lex = spec.lexicon(&Lexicon::builtin())?;
    let vol_dir = out_dir.join("volumes");
    std::fs::create_dir_all(&vol_dir).map_err(|e| Error::io(&vol_dir, e))?;
    let classes = spec.classes();
    let mut summary = CorpusSummary {
        cases: n,
        negated_mentions: 0,
        classes: classes.clone(),
        positives: vec![0; classes.len()],
    };
    let mut lines = Vec::with_capacity(n);
    for i in 0..n {
        let case = generate_case(case_seed(seed, i as u64), spec)?;
        let id = format!("case_{i:04}");
        let mut volumes = BTreeMap::new();
        for v in &case.volumes {
            let rel = format!("volumes/{id}_{}.ubv", v.modality);
            v.write(&out_dir.join(&rel))?;
            volumes.insert(v.modality.clone(), rel);
        }
        summary.negated_mentions += usize::from(case.negated.is_some());
        for (c, &y) in case.labels.0.iter().enumerate() {
            summary.positives[c] += usize::from(y);
        }
        lines.push(CorpusCase {
            id,
            findings: case.report.findings,
            impression: case.report.impression,
            volumes,
            gold_labels: Some(case.labels),
            lesions: case.lesions,
        });
    }
    crate::io::write_jsonl(&out_dir.join(CORPUS_FILE), &lines)?;
    crate::io::write_atomic(&out_dir.join(LEXICON_FILE), lex.to_json()?.as_bytes())?;
    let queries: Vec<DiseaseQuery> = DiseaseQuerySet::from_lexicon(&lex)?.entries().to_vec();
    crate::io::write_json(&out_dir.join(QUERIES_FILE), &queries)?;
    crate::io::write_json(&out_dir.join(SPEC_FILE), spec)?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ard::extract_labels;

    #[test]
    fn deterministic() {
        let spec = SyntheticSpec::default();
        let a = generate_case(17, &spec).unwrap();
        let b = generate_case(17, &spec).unwrap();
        assert_eq!(a.volumes, b.volumes);
        assert_eq!(a.report, b.report);
        assert_eq!(a.labels, b.labels);
    }

    #[test]
    fn normal_case_when_nothing_sampled() {
        let spec = SyntheticSpec {
            diseases: Vec::new(),
            ..SyntheticSpec::default()
        };
        let c = generate_case(3, &spec).unwrap();
        assert_eq!(c.report.impression, ["Normal."]);
        assert_eq!(c.labels.0, [1]);
    }

    #[test]
    fn lesion_intensity_follows_signature() {
        let spec = SyntheticSpec::default();
        let lex = spec.lexicon(&Lexicon::builtin()).unwrap();
        let mut checked = 0;
        for s in 0..40 {
            let c = generate_case(s, &spec).unwrap();
            assert_eq!(extract_labels(&c.report.impression, &lex), c.labels);
            if c.lesions.len() != 1 {
                continue;
            }
            let b = &c.lesions[0];
            let d = spec.diseases.iter().find(|d| d.name == b.disease).unwrap();
            for v in &c.volumes {
                let (mut inside, mut outside) = ((0.0, 0), (0.0, 0));
                for x in 0..32 {
                    for y in 0..32 {
                        for z in 0..8 {
                            let acc = if b.contains([x, y, z]) { &mut inside } else { &mut outside };
                            acc.0 += v.get(x, y, z);
                            acc.1 += 1;
                        }
                    }
                }
                let diff = inside.0 / inside.1 as f64 - outside.0 / outside.1 as f64;
                match d.signature[&v.modality] {
                    Signal::Hyper => assert!(diff > 0.5),
                    Signal::Hypo => assert!(diff < -0.5),
                    Signal::None => assert!(diff.abs() < 0.1),
                }
            }
            checked += 1;
        }
        assert!(checked > 5);
    }

    #[test]
    fn spec_validation() {
        let mut spec = SyntheticSpec::default();
        spec.diseases[0].regions[0].max[0] = 40;
        assert!(spec.validate().is_err());
        let mut spec = SyntheticSpec::default();
        spec.diseases[1].prevalence = 0.0;
        assert!(spec.validate().is_err());
        let mut spec = SyntheticSpec::default();
        spec.diseases[0].regions[0].anatomy = "spleen".into();
        assert!(spec.lexicon(&Lexicon::builtin()).is_err());
    }
}

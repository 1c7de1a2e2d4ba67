//! Evaluation and grounding over prepared cases with a trained model.

use serde::Serialize;

use crate::corpus::PreparedCase;
use crate::cvp::{grounding_map, DiseaseQuerySet};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, EvalResult};
use crate::model::Model;

/// Probabilities for every case, rows in case order.
pub fn predict_all(model: &Model, cases: &[PreparedCase], queries: &DiseaseQuerySet) -> Result<Vec<Vec<f64>>> {
    let emb = model.query_embedding(queries)?;
    cases
        .iter()
        .map(|c| Ok(model.predict_with(&c.volumes, &emb)?.probabilities))
        .collect()
}

/// Metrics of the model's training queries against each case's gold (or
/// extracted) labels.
pub fn evaluate_model(model: &Model, cases: &[PreparedCase]) -> Result<EvalResult> {
    if cases.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let preds = predict_all(model, cases, &model.queries)?;
    let labels: Vec<Vec<u8>> = cases.iter().map(|c| c.eval_labels().0.clone()).collect();
    evaluate(&preds, &labels, &model.queries.names())
}

/// Index of the first maximum voxel as `(x, y, z)`.
pub fn argmax_voxel(map: &crate::encoders::Volume) -> [usize; 3] {
    let mut best = 0;
    for (i, &v) in map.voxels().iter().enumerate() {
        if v > map.voxels()[best] {
            best = i;
        }
    }
    let [_, ny, nz] = map.dims();
    [best / (ny * nz), (best / nz) % ny, best % nz]
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct GroundingScore {
    /// True-positive (case, lesion) pairs examined.
    pub evaluated: usize,
    /// Of those, how many had the heatmap argmax inside the lesion box.
    pub hits: usize,
}

impl GroundingScore {
    pub fn rate(&self) -> f64 {
        if self.evaluated == 0 {
            0.0
        } else {
            self.hits as f64 / self.evaluated as f64
        }
    }
}

/// Checks the heatmap argmax against each planted lesion of cases where
/// the lesion's disease is labelled present and predicted at >= 0.5.
pub fn grounding_score(model: &Model, cases: &[PreparedCase]) -> Result<GroundingScore> {
    let emb = model.query_embedding(&model.queries)?;
    let mut score = GroundingScore::default();
    for case in cases {
        if case.lesions.is_empty() {
            continue;
        }
        let pred = model.predict_with(&case.volumes, &emb)?;
        if pred.attention.is_empty() {
            return Err(Error::Config("grounding needs the cvp head".into()));
        }
        for lesion in &case.lesions {
            let Some(c) = model.queries.index_of(&lesion.disease) else {
                continue;
            };
            if !case.eval_labels().get(c) || pred.probabilities[c] < 0.5 {
                continue;
            }
            let map = grounding_map(&pred.attention, pred.grid, c, model.config.input_dims)?;
            score.evaluated += 1;
            score.hits += usize::from(lesion.contains(argmax_voxel(&map)));
        }
    }
    Ok(score)
}

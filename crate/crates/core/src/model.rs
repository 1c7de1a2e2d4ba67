//! Full network: shared image encoder, fusion, alignment heads and the
//! diagnosis head, with checkpoint save/load.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::alignment::{
    fuse_modalities, global_alignment_loss, modality_alignment_losses, AlignmentBatch, FUSE_BIAS,
    FUSE_WEIGHT, LOG_TAU,
};
use crate::config::TrainConfig;
use crate::corpus::PreparedCase;
use crate::cvp::{bce_loss, classify, decode_queries, init_cvp, DiseaseQuery, DiseaseQuerySet};
use crate::encoders::{
    encode_image, init_image_encoder, pool_patches, project_patches, HashedTextEncoder,
    TextEncoder, Volume, TEXT_TABLE,
};
use crate::error::{Error, Result};
use crate::params::{init_normal, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

pub const LINEAR_HEAD_WEIGHT: &str = "head.linear.weight";
pub const LINEAR_HEAD_BIAS: &str = "head.linear.bias";
const CHECKPOINT_FORMAT: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    format: u32,
    config: TrainConfig,
    queries: Vec<DiseaseQuery>,
}

/// Frozen text embeddings of one case.
#[derive(Clone, Debug)]
pub struct CaseText {
    pub modality: Vec<Vec<f64>>,
    pub global: Vec<f64>,
    pub modality_keys: Vec<String>,
    pub global_key: String,
}

/// Loss terms of one forward pass; disabled terms are still reported.
pub struct Losses<'t> {
    pub bce: Var<'t>,
    pub global: Var<'t>,
    pub modality: Vec<Var<'t>>,
    pub total: Var<'t>,
}

pub struct Prediction {
    pub probabilities: Vec<f64>,
    /// Per block, per head `C × l` attention (empty without the CVP head).
    pub attention: Vec<Vec<Tensor>>,
    pub grid: [usize; 3],
}

pub struct Model {
    pub config: TrainConfig,
    pub store: ParamStore,
    /// Training query set; its embedding is fixed for the life of the model.
    pub queries: DiseaseQuerySet,
    text: HashedTextEncoder,
}

impl Model {
    pub fn init(config: TrainConfig, queries: DiseaseQuerySet) -> Result<Model> {
        config.validate()?;
        if queries.len() != config.num_classes {
            return Err(Error::Config(format!(
                "{} training queries for num_classes {}",
                queries.len(),
                config.num_classes
            )));
        }
        let m = &config.model;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        init_image_encoder(&mut store, m, &mut rng);
        let (k, d) = (config.k(), m.embed_dim);
        store.insert(FUSE_WEIGHT, init_normal(&mut rng, vec![k * d, d], k * d, 1.0));
        store.insert(FUSE_BIAS, Tensor::zeros(vec![d]));
        store.insert(LOG_TAU, Tensor::vector(vec![m.tau_init.ln()]));
        if config.toggles.cvp {
            init_cvp(&mut store, m, &mut rng);
        } else {
            let c = config.num_classes;
            store.insert(LINEAR_HEAD_WEIGHT, init_normal(&mut rng, vec![d, c], d, 1.0));
            store.insert(LINEAR_HEAD_BIAS, Tensor::zeros(vec![c]));
        }
        let text = HashedTextEncoder::new(m.text_table_rows, d, m.text_seed);
        store.insert_frozen(TEXT_TABLE, text.table().clone());
        Ok(Model {
            config,
            store,
            queries,
            text,
        })
    }

    pub fn text_encoder(&self) -> &dyn TextEncoder {
        &self.text
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let meta = CheckpointMeta {
            format: CHECKPOINT_FORMAT,
            config: self.config.clone(),
            queries: self.queries.entries().to_vec(),
        };
        self.store.save(dir, &serde_json::to_value(&meta)?)
    }

    /// Restores a checkpoint together with its training query set.
    pub fn load(dir: &Path) -> Result<Model> {
        let (store, meta) = ParamStore::load(dir)?;
        let meta: CheckpointMeta = serde_json::from_value(meta)
            .map_err(|e| Error::Checkpoint(format!("{}: bad metadata: {e}", dir.display())))?;
        if meta.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!("unsupported checkpoint format {}", meta.format)));
        }
        meta.config.validate()?;
        let queries = DiseaseQuerySet::new(meta.queries)?;
        if queries.len() != meta.config.num_classes {
            return Err(Error::Checkpoint(format!(
                "{} stored queries for num_classes {}",
                queries.len(),
                meta.config.num_classes
            )));
        }
        let text = HashedTextEncoder::from_table(store.get(TEXT_TABLE)?.clone(), meta.config.model.text_seed)?;
        Ok(Model {
            config: meta.config,
            store,
            queries,
            text,
        })
    }

    pub fn case_text(&self, case: &PreparedCase) -> Result<CaseText> {
        Ok(CaseText {
            modality: case
                .modality_texts
                .iter()
                .map(|t| self.text.encode(t))
                .collect::<Result<_>>()?,
            global: self.text.encode(&case.global_text)?,
            modality_keys: case.modality_texts.clone(),
            global_key: case.global_text.clone(),
        })
    }

    /// Per-modality patch embeddings and the fused global embedding.
    fn encode_case<'t>(
        &self,
        tape: &'t Tape,
        volumes: &[Volume],
    ) -> Result<(Vec<Var<'t>>, Var<'t>, [usize; 3])> {
        if volumes.len() != self.config.k() {
            return Err(Error::Validation(format!(
                "{} volumes for {} modalities",
                volumes.len(),
                self.config.k()
            )));
        }
        let mut parts = Vec::with_capacity(volumes.len());
        let mut grid = [0; 3];
        for v in volumes {
            let (raw, g) = encode_image(tape, &self.store, &self.config.model, v, self.config.input_dims)?;
            parts.push(project_patches(tape, &self.store, raw, g)?.matrix);
            grid = g;
        }
        let fused = fuse_modalities(
            &parts,
            self.store.var(tape, FUSE_WEIGHT)?,
            self.store.var(tape, FUSE_BIAS)?,
        )?;
        Ok((parts, fused, grid))
    }

    fn diagnose<'t>(
        &self,
        tape: &'t Tape,
        fused: Var<'t>,
        queries: &Tensor,
    ) -> Result<(Var<'t>, Vec<Vec<Tensor>>)> {
        if self.config.toggles.cvp {
            let q = tape.constant(queries.clone());
            let h = decode_queries(tape, &self.store, &self.config.model, fused, q)?;
            Ok((classify(tape, &self.store, h.matrix)?, h.attention))
        } else {
            let c = self.config.num_classes;
            if queries.shape()[0] != c {
                return Err(Error::Config(
                    "a query set of a different size needs the cvp head".into(),
                ));
            }
            let p = pool_patches(fused)?
                .affine(
                    self.store.var(tape, LINEAR_HEAD_WEIGHT)?,
                    self.store.var(tape, LINEAR_HEAD_BIAS)?,
                )?
                .sigmoid()
                .reshape(vec![c])?;
            Ok((p, Vec::new()))
        }
    }

    pub fn query_embedding(&self, queries: &DiseaseQuerySet) -> Result<Tensor> {
        queries.embed(&self.text, self.config.toggles.query_mode)
    }

    /// Forward pass over a batch, returning every loss term.
    pub fn batch_losses<'t>(
        &self,
        tape: &'t Tape,
        batch: &[(Vec<Volume>, &CaseText, &[f64])],
        query_emb: &Tensor,
    ) -> Result<Losses<'t>> {
        let k = self.config.k();
        let c = self.config.num_classes;
        let mut pooled: Vec<Vec<Var<'t>>> = vec![Vec::with_capacity(batch.len()); k];
        let mut pooled_global = Vec::with_capacity(batch.len());
        let mut probs = Vec::with_capacity(batch.len());
        let mut labels = Vec::with_capacity(batch.len() * c);
        for (volumes, _, y) in batch {
            let (parts, fused, _) = self.encode_case(tape, volumes)?;
            for (kk, u) in parts.into_iter().enumerate() {
                pooled[kk].push(pool_patches(u)?);
            }
            pooled_global.push(pool_patches(fused)?);
            let (p, _) = self.diagnose(tape, fused, query_emb)?;
            probs.push(p.reshape(vec![1, c])?);
            labels.extend_from_slice(y);
        }
        let y = Tensor::new(vec![batch.len(), c], labels)?;
        let bce = bce_loss(Var::concat(&probs, 0)?, &y)?;

        let log_tau = self.store.var(tape, LOG_TAU)?;
        let mut modality_batches = Vec::with_capacity(k);
        for (kk, rows) in pooled.iter().enumerate() {
            let texts: Vec<Vec<f64>> = batch.iter().map(|b| b.1.modality[kk].clone()).collect();
            let keys: Vec<String> = batch.iter().map(|b| b.1.modality_keys[kk].clone()).collect();
            modality_batches.push(AlignmentBatch::assemble(tape, rows, &texts, &keys)?);
        }
        let modality = modality_alignment_losses(tape, &modality_batches, log_tau)?;
        let texts: Vec<Vec<f64>> = batch.iter().map(|b| b.1.global.clone()).collect();
        let keys: Vec<String> = batch.iter().map(|b| b.1.global_key.clone()).collect();
        let global = match AlignmentBatch::assemble(tape, &pooled_global, &texts, &keys)? {
            Some(b) => global_alignment_loss(&b, log_tau)?,
            None => tape.constant(Tensor::scalar(0.0)),
        };
        let total = crate::trainer::total_loss(bce, global, &modality, &self.config.toggles)?;
        Ok(Losses {
            bce,
            global,
            modality,
            total,
        })
    }

    /// Deterministic forward pass with any query set.
    pub fn predict(&self, volumes: &[Volume], queries: &DiseaseQuerySet) -> Result<Prediction> {
        let emb = self.query_embedding(queries)?;
        self.predict_with(volumes, &emb)
    }

    pub fn predict_with(&self, volumes: &[Volume], query_emb: &Tensor) -> Result<Prediction> {
        let tape = Tape::no_grad();
        let (_, fused, grid) = self.encode_case(&tape, volumes)?;
        let (p, attention) = self.diagnose(&tape, fused, query_emb)?;
        let probabilities = p.value().data().to_vec();
        if probabilities.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("predicted probabilities".into()));
        }
        Ok(Prediction {
            probabilities,
            attention,
            grid,
        })
    }
}

//! Training and model configuration, loaded from JSON.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Conv3dSpec;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QueryMode {
    /// Embed each disease's description text.
    #[default]
    Description,
    /// Embed only the disease name.
    Name,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Toggles {
    pub modality_align: bool,
    pub global_align: bool,
    pub cvp: bool,
    pub query_mode: QueryMode,
}

impl Default for Toggles {
    fn default() -> Self {
        Toggles {
            modality_align: true,
            global_align: true,
            cvp: true,
            query_mode: QueryMode::Description,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Augmentation {
    pub flip_prob: f64,
    pub intensity_shift_range: [f64; 2],
    pub intensity_scale_range: [f64; 2],
}

impl Default for Augmentation {
    fn default() -> Self {
        Augmentation {
            flip_prob: 0.5,
            intensity_shift_range: [-0.1, 0.1],
            intensity_scale_range: [0.9, 1.1],
        }
    }
}

impl Augmentation {
    pub fn identity() -> Self {
        Augmentation {
            flip_prob: 0.0,
            intensity_shift_range: [0.0, 0.0],
            intensity_scale_range: [1.0, 1.0],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Output channels of each strided conv block.
    pub conv_channels: Vec<usize>,
    pub conv: Conv3dSpec,
    /// Embedding width `d` shared by patches, reports and queries.
    pub embed_dim: usize,
    pub proj_hidden: usize,
    pub decoder_blocks: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub classifier_hidden: usize,
    pub text_table_rows: usize,
    pub text_seed: u64,
    /// Initial temperature; stored as `ln(tau)`.
    pub tau_init: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            conv_channels: vec![8, 16],
            conv: Conv3dSpec {
                kernel: [2, 2, 1],
                stride: [2, 2, 1],
                padding: [0, 0, 0],
            },
            embed_dim: 32,
            proj_hidden: 32,
            decoder_blocks: 4,
            heads: 4,
            ffn_hidden: 64,
            classifier_hidden: 32,
            text_table_rows: 2048,
            text_seed: 0x5eed,
            tau_init: 0.07,
        }
    }
}

impl ModelConfig {
    /// Patch grid produced from a volume of `dims`.
    pub fn grid(&self, dims: [usize; 3]) -> Option<[usize; 3]> {
        let mut g = dims;
        for _ in &self.conv_channels {
            g = self.conv.output_dims(g)?;
        }
        Some(g)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.conv_channels.is_empty() || self.conv_channels.contains(&0) {
            return bad("conv_channels must be non-empty and positive");
        }
        if self.embed_dim == 0 || self.heads == 0 {
            return bad("embed_dim and heads must be positive");
        }
        if self.embed_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} not divisible by heads {}",
                self.embed_dim, self.heads
            )));
        }
        if self.text_table_rows == 0 || !(self.tau_init > 0.0) {
            return bad("text_table_rows and tau_init must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub modalities: Vec<String>,
    pub input_dims: [usize; 3],
    pub num_classes: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr0: f64,
    pub poly_power: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub toggles: Toggles,
    pub augmentation: Augmentation,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            modalities: ["T1WI", "T2WI", "T2FLAIR", "DWI"].map(String::from).to_vec(),
            input_dims: [32, 32, 8],
            num_classes: 13,
            batch_size: 16,
            epochs: 100,
            lr0: 2e-4,
            poly_power: 0.9,
            weight_decay: 1e-5,
            seed: 42,
            toggles: Toggles::default(),
            augmentation: Augmentation::default(),
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn load(path: &Path) -> Result<TrainConfig> {
        let text = crate::io::read_to_string(path)?;
        let cfg: TrainConfig = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            msg: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn k(&self) -> usize {
        self.modalities.len()
    }

    pub fn grid(&self) -> Result<[usize; 3]> {
        self.model.grid(self.input_dims).ok_or_else(|| {
            Error::Config(format!(
                "input dims {:?} too small for {} conv blocks",
                self.input_dims,
                self.model.conv_channels.len()
            ))
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let bad = |m: String| Err(Error::Config(m));
        if self.modalities.is_empty() {
            return bad("at least one modality required".into());
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return bad("batch_size and epochs must be at least 1".into());
        }
        if !(self.lr0 > 0.0) || self.poly_power < 0.0 || self.weight_decay < 0.0 {
            return bad(format!(
                "lr0 {} must be > 0, poly_power and weight_decay >= 0",
                self.lr0
            ));
        }
        let a = &self.augmentation;
        let ordered = |r: [f64; 2]| r[0] <= r[1] && r.iter().all(|v| v.is_finite());
        if !ordered(a.intensity_shift_range)
            || !ordered(a.intensity_scale_range)
            || !(0.0..=1.0).contains(&a.flip_prob)
        {
            return bad(format!("augmentation ranges not well-ordered: {a:?}"));
        }
        if self.input_dims.contains(&0) {
            return bad("input dims must be positive".into());
        }
        self.grid()?;
        Ok(())
    }
}

use rand::Rng;

use super::Volume;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::params::{init_normal, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

/// Patch embedding `l × d` together with the grid it was flattened from.
#[derive(Clone, Copy, Debug)]
pub struct PatchEmbedding<'t> {
    pub grid: [usize; 3],
    pub matrix: Var<'t>,
}

impl PatchEmbedding<'_> {
    pub fn patches(&self) -> usize {
        self.grid.iter().product()
    }
}

fn conv_names(i: usize) -> (String, String) {
    (format!("image.conv{i}.weight"), format!("image.conv{i}.bias"))
}

pub fn init_image_encoder(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut impl Rng) {
    let k3 = cfg.conv.taps();
    let mut c_in = 1;
    for (i, &c_out) in cfg.conv_channels.iter().enumerate() {
        let (w, b) = conv_names(i);
        store.insert(w, init_normal(rng, vec![k3 * c_in, c_out], k3 * c_in, 2f64.sqrt()));
        store.insert(b, Tensor::zeros(vec![c_out]));
        c_in = c_out;
    }
    let d_raw = c_in;
    store.insert("proj.fc1.weight", init_normal(rng, vec![d_raw, cfg.proj_hidden], d_raw, 2f64.sqrt()));
    store.insert("proj.fc1.bias", Tensor::zeros(vec![cfg.proj_hidden]));
    store.insert(
        "proj.fc2.weight",
        init_normal(rng, vec![cfg.proj_hidden, cfg.embed_dim], cfg.proj_hidden, 1.0),
    );
    store.insert("proj.fc2.bias", Tensor::zeros(vec![cfg.embed_dim]));
}

/// Shared strided conv + relu stack; returns `l × d_raw` raw patch
/// features and the patch grid. The modality label plays no part.
pub fn encode_image<'t>(
    tape: &'t Tape,
    store: &ParamStore,
    cfg: &ModelConfig,
    volume: &Volume,
    expected_dims: [usize; 3],
) -> Result<(Var<'t>, [usize; 3])> {
    if volume.dims() != expected_dims {
        return Err(Error::shape("encode_image", &volume.dims(), &expected_dims));
    }
    let [x, y, z] = volume.dims();
    let mut h = tape.constant(Tensor::new(vec![x, y, z, 1], volume.voxels().to_vec())?);
    for i in 0..cfg.conv_channels.len() {
        let (w, b) = conv_names(i);
        h = h
            .conv3d(store.var(tape, &w)?, store.var(tape, &b)?, cfg.conv)?
            .relu();
    }
    let shape = h.shape();
    let grid = [shape[0], shape[1], shape[2]];
    let raw = h.reshape(vec![grid.iter().product(), shape[3]])?;
    Ok((raw, grid))
}

/// Two affine layers with a relu between, applied to every patch row.
pub fn project_patches<'t>(
    tape: &'t Tape,
    store: &ParamStore,
    raw: Var<'t>,
    grid: [usize; 3],
) -> Result<PatchEmbedding<'t>> {
    let h = raw
        .affine(store.var(tape, "proj.fc1.weight")?, store.var(tape, "proj.fc1.bias")?)?
        .relu();
    let matrix = h.affine(store.var(tape, "proj.fc2.weight")?, store.var(tape, "proj.fc2.bias")?)?;
    Ok(PatchEmbedding { grid, matrix })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (ParamStore, ModelConfig) {
        let cfg = ModelConfig::default();
        let mut store = ParamStore::new();
        init_image_encoder(&mut store, &cfg, &mut ChaCha8Rng::seed_from_u64(1));
        (store, cfg)
    }

    fn noise(modality: &str) -> Volume {
        let n = 32 * 32 * 8;
        Volume::new(modality, [32, 32, 8], (0..n).map(|i| ((i * 37) % 11) as f64 / 11.0).collect()).unwrap()
    }

    #[test]
    fn grid_and_patch_count() {
        let cfg = ModelConfig {
            conv: crate::tensor::Conv3dSpec::cubic(2, 2, 0),
            ..ModelConfig::default()
        };
        let mut store = ParamStore::new();
        init_image_encoder(&mut store, &cfg, &mut ChaCha8Rng::seed_from_u64(1));
        let tape = Tape::no_grad();
        let (raw, grid) = encode_image(&tape, &store, &cfg, &noise("T1WI"), [32, 32, 8]).unwrap();
        assert_eq!(grid, [8, 8, 2]);
        assert_eq!(raw.shape(), vec![128, 16]);
        let u = project_patches(&tape, &store, raw, grid).unwrap();
        assert_eq!(u.matrix.shape(), vec![128, 32]);
        assert_eq!(u.patches(), 128);
    }

    #[test]
    fn default_keeps_slice_resolution() {
        let (store, cfg) = setup();
        let tape = Tape::no_grad();
        let (raw, grid) = encode_image(&tape, &store, &cfg, &noise("T1WI"), [32, 32, 8]).unwrap();
        assert_eq!(grid, [8, 8, 8]);
        assert_eq!(raw.shape(), vec![512, 16]);
    }

    #[test]
    fn shared_across_modality_labels_and_deterministic() {
        let (store, cfg) = setup();
        let tape = Tape::no_grad();
        let a = encode_image(&tape, &store, &cfg, &noise("T1WI"), [32, 32, 8]).unwrap().0;
        let b = encode_image(&tape, &store, &cfg, &noise("DWI"), [32, 32, 8]).unwrap().0;
        let c = encode_image(&tape, &store, &cfg, &noise("T1WI"), [32, 32, 8]).unwrap().0;
        assert_eq!(*a.value(), *b.value());
        assert_eq!(*a.value(), *c.value());
    }

    #[test]
    fn zero_volume_zero_bias_gives_zero_features() {
        let (store, cfg) = setup();
        let tape = Tape::no_grad();
        let v = Volume::zeros("T2WI", [32, 32, 8]);
        let raw = encode_image(&tape, &store, &cfg, &v, [32, 32, 8]).unwrap().0;
        assert!(raw.value().data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn dims_mismatch_errors() {
        let (store, cfg) = setup();
        let tape = Tape::no_grad();
        let v = Volume::zeros("T2WI", [16, 16, 8]);
        assert!(encode_image(&tape, &store, &cfg, &v, [32, 32, 8]).is_err());
    }

    #[test]
    fn identity_projection_passes_through() {
        let mut store = ParamStore::new();
        store.insert("proj.fc1.weight", Tensor::eye(3));
        store.insert("proj.fc1.bias", Tensor::zeros(vec![3]));
        store.insert("proj.fc2.weight", Tensor::eye(3));
        store.insert("proj.fc2.bias", Tensor::zeros(vec![3]));
        let tape = Tape::no_grad();
        let x = Tensor::new(vec![1, 3], vec![0.5, 2.0, 0.25]).unwrap();
        let u = project_patches(&tape, &store, tape.constant(x.clone()), [1, 1, 1]).unwrap();
        assert_eq!(*u.matrix.value(), x);
        let zero = project_patches(&tape, &store, tape.constant(Tensor::zeros(vec![4, 3])), [4, 1, 1]).unwrap();
        assert!(zero.matrix.value().data().iter().all(|&v| v == 0.0));
    }
}

//! Disease-query cross-attention decoder, per-query classifier, BCE and
//! attention grounding maps.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::ard::Lexicon;
use crate::config::{ModelConfig, QueryMode};
use crate::encoders::{trilinear_resize, TextEncoder, Volume};
use crate::error::{Error, Result};
use crate::params::{init_normal, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

pub const PROB_EPS: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiseaseQuery {
    pub name: String,
    pub description: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DiseaseQuerySet {
    entries: Vec<DiseaseQuery>,
}

impl DiseaseQuerySet {
    pub fn new(entries: Vec<DiseaseQuery>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::Validation("query set must contain at least one disease".into()));
        }
        for (i, e) in entries.iter().enumerate() {
            if entries[..i].iter().any(|o| o.name == e.name) {
                return Err(Error::Validation(format!("duplicate query name {:?}", e.name)));
            }
        }
        Ok(DiseaseQuerySet { entries })
    }

    /// The lexicon's disease classes with their descriptions.
    pub fn from_lexicon(lexicon: &Lexicon) -> Result<Self> {
        Self::new(
            lexicon
                .disease_classes()
                .iter()
                .map(|name| DiseaseQuery {
                    name: name.clone(),
                    description: lexicon.description(name).unwrap_or(name).to_string(),
                })
                .collect(),
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = crate::io::read_to_string(path)?;
        let entries = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            msg: e.to_string(),
        })?;
        Self::new(entries)
    }

    pub fn entries(&self) -> &[DiseaseQuery] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> Vec<String> {
        self.entries.iter().map(|e| e.name.clone()).collect()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.name == name)
    }

    /// `C × d` embeddings of the description (or name) texts.
    pub fn embed(&self, encoder: &dyn TextEncoder, mode: QueryMode) -> Result<Tensor> {
        let texts: Vec<String> = self
            .entries
            .iter()
            .map(|e| match mode {
                QueryMode::Description => e.description.clone(),
                QueryMode::Name => e.name.clone(),
            })
            .collect();
        encoder.encode_batch(&texts)
    }
}

/// Decoder output: `C × d` embedding plus the attention of every block
/// and head, each `C × l`.
pub struct DiseaseAttentiveEmbedding<'t> {
    pub matrix: Var<'t>,
    pub attention: Vec<Vec<Tensor>>,
}

fn block_name(b: usize, part: &str) -> String {
    format!("cvp.block{b}.{part}")
}

pub fn init_cvp(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut impl Rng) {
    let d = cfg.embed_dim;
    for b in 0..cfg.decoder_blocks {
        for part in ["wq", "wk", "wv"] {
            store.insert(block_name(b, part), init_normal(rng, vec![d, d], d, 1.0));
        }
        store.insert(block_name(b, "wo"), init_normal(rng, vec![d, d], d, 0.5));
        store.insert(block_name(b, "ffn1.weight"), init_normal(rng, vec![d, cfg.ffn_hidden], d, 2f64.sqrt()));
        store.insert(block_name(b, "ffn1.bias"), Tensor::zeros(vec![cfg.ffn_hidden]));
        store.insert(
            block_name(b, "ffn2.weight"),
            init_normal(rng, vec![cfg.ffn_hidden, d], cfg.ffn_hidden, 0.5),
        );
        store.insert(block_name(b, "ffn2.bias"), Tensor::zeros(vec![d]));
    }
    let hid = cfg.classifier_hidden;
    store.insert("cls.fc1.weight", init_normal(rng, vec![d, hid], d, 2f64.sqrt()));
    store.insert("cls.fc1.bias", Tensor::zeros(vec![hid]));
    store.insert("cls.fc2.weight", init_normal(rng, vec![hid, 1], hid, 1.0));
    store.insert("cls.fc2.bias", Tensor::zeros(vec![1]));
}

/// Cross-attention blocks reading `u` (`l × d`) with queries `q` (`C × d`).
/// Queries never attend to each other, so every output row depends only
/// on its own query.
pub fn decode_queries<'t>(
    tape: &'t Tape,
    store: &ParamStore,
    cfg: &ModelConfig,
    u: Var<'t>,
    q: Var<'t>,
) -> Result<DiseaseAttentiveEmbedding<'t>> {
    let d = cfg.embed_dim;
    if cfg.heads == 0 || d % cfg.heads != 0 {
        return Err(Error::Config(format!("embed_dim {d} not divisible by heads {}", cfg.heads)));
    }
    if u.shape().get(1) != Some(&d) || q.shape().get(1) != Some(&d) {
        return Err(Error::shape("decode_queries", &u.shape(), &q.shape()));
    }
    let dh = d / cfg.heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut h = q;
    let mut attention = Vec::with_capacity(cfg.decoder_blocks);
    for b in 0..cfg.decoder_blocks {
        let p = |part: &str| store.var(tape, &block_name(b, part));
        let qh = h.matmul(p("wq")?)?;
        let kh = u.matmul(p("wk")?)?;
        let vh = u.matmul(p("wv")?)?;
        let mut heads = Vec::with_capacity(cfg.heads);
        let mut maps = Vec::with_capacity(cfg.heads);
        for i in 0..cfg.heads {
            let (s, e) = (i * dh, (i + 1) * dh);
            let a = qh
                .slice_cols(s, e)?
                .matmul_t(kh.slice_cols(s, e)?)?
                .scale(scale)
                .softmax(1)?;
            maps.push((*a.value()).clone());
            heads.push(a.matmul(vh.slice_cols(s, e)?)?);
        }
        let attn = Var::concat(&heads, 1)?.matmul(p("wo")?)?;
        h = h.add(attn)?;
        let ff = h
            .affine(p("ffn1.weight")?, p("ffn1.bias")?)?
            .relu()
            .affine(p("ffn2.weight")?, p("ffn2.bias")?)?;
        h = h.add(ff)?;
        attention.push(maps);
    }
    Ok(DiseaseAttentiveEmbedding { matrix: h, attention })
}

/// Shared affine→relu→affine→sigmoid per row; returns a length-`C` vector.
pub fn classify<'t>(tape: &'t Tape, store: &ParamStore, h: Var<'t>) -> Result<Var<'t>> {
    let c = h.shape()[0];
    h.affine(store.var(tape, "cls.fc1.weight")?, store.var(tape, "cls.fc1.bias")?)?
        .relu()
        .affine(store.var(tape, "cls.fc2.weight")?, store.var(tape, "cls.fc2.bias")?)?
        .sigmoid()
        .reshape(vec![c])
}

/// Mean binary cross-entropy over `B × C` with probabilities clamped to
/// `[PROB_EPS, 1 - PROB_EPS]`.
pub fn bce_loss<'t>(p: Var<'t>, y: &Tensor) -> Result<Var<'t>> {
    if p.shape() != y.shape() {
        return Err(Error::shape("bce_loss", &p.shape(), y.shape()));
    }
    let tape = p.tape();
    let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    let one = tape.constant(Tensor::ones(y.shape().to_vec()));
    let yv = tape.constant(y.clone());
    let ny = tape.constant(y.map(|v| 1.0 - v));
    let pos = yv.mul(p.ln())?;
    let neg = ny.mul(one.sub(p)?.ln())?;
    Ok(pos.add(neg)?.mean().scale(-1.0))
}

/// Final-block attention of one query, averaged over heads; sums to 1.
pub fn patch_weights(attention: &[Vec<Tensor>], disease: usize) -> Result<Vec<f64>> {
    let last = attention
        .last()
        .ok_or_else(|| Error::Validation("no attention maps retained".into()))?;
    let c = last[0].shape()[0];
    if disease >= c {
        return Err(Error::Validation(format!("disease index {disease} out of range for {c} queries")));
    }
    let l = last[0].shape()[1];
    let mut w = vec![0.0; l];
    for head in last {
        w.iter_mut().zip(head.row(disease)).for_each(|(a, b)| *a += b / last.len() as f64);
    }
    Ok(w)
}

/// Head-averaged final-block attention upsampled to the input volume.
pub fn grounding_map(
    attention: &[Vec<Tensor>],
    grid: [usize; 3],
    disease: usize,
    dims: [usize; 3],
) -> Result<Volume> {
    let w = patch_weights(attention, disease)?;
    if w.len() != grid.iter().product::<usize>() {
        return Err(Error::shape("grounding_map", &[w.len()], &grid));
    }
    Volume::new("heatmap", dims, trilinear_resize(&w, grid, dims))
}

/// Writes one 8-bit grayscale PNG per axial slice, scaled by the map's
/// maximum. Returns the written paths.
pub fn write_slice_pngs(map: &Volume, dir: &Path, prefix: &str) -> Result<Vec<std::path::PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let [nx, ny, nz] = map.dims();
    let max = map.voxels().iter().copied().fold(0.0, f64::max);
    let mut paths = Vec::with_capacity(nz);
    for z in 0..nz {
        let mut pixels = Vec::with_capacity(nx * ny);
        for y in 0..ny {
            for x in 0..nx {
                let v = if max > 0.0 { map.get(x, y, z) / max } else { 0.0 };
                pixels.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
        let mut bytes = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut bytes, nx as u32, ny as u32);
            enc.set_color(png::ColorType::Grayscale);
            enc.set_depth(png::BitDepth::Eight);
            let png_err = |e: png::EncodingError| Error::Validation(format!("png encoding: {e}"));
            let mut writer = enc.write_header().map_err(png_err)?;
            writer.write_image_data(&pixels).map_err(png_err)?;
        }
        let path = dir.join(format!("{prefix}_z{z:02}.png"));
        crate::io::write_atomic(&path, &bytes)?;
        paths.push(path);
    }
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> (ModelConfig, ParamStore) {
        let cfg = ModelConfig {
            embed_dim: 8,
            heads: 2,
            ffn_hidden: 8,
            classifier_hidden: 4,
            ..ModelConfig::default()
        };
        let mut store = ParamStore::new();
        init_cvp(&mut store, &cfg, &mut ChaCha8Rng::seed_from_u64(3));
        (cfg, store)
    }

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn query_independence() {
        let (cfg, store) = small();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let u = rand_tensor(&mut rng, vec![6, 8]);
        let q = rand_tensor(&mut rng, vec![1, 8]);
        let tape = Tape::no_grad();
        let one = decode_queries(&tape, &store, &cfg, tape.constant(u.clone()), tape.constant(q.clone())).unwrap();
        let q2 = Tensor::concat(&[&q, &q], 0).unwrap();
        let two = decode_queries(&tape, &store, &cfg, tape.constant(u), tape.constant(q2)).unwrap();
        assert_eq!(one.matrix.value().row(0), two.matrix.value().row(0));
        assert_eq!(one.matrix.value().row(0), two.matrix.value().row(1));
    }

    #[test]
    fn uniform_patches_give_uniform_attention() {
        let (cfg, store) = small();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let row = rand_tensor(&mut rng, vec![1, 8]);
        let u = Tensor::concat(&[&row; 5], 0).unwrap();
        let q = rand_tensor(&mut rng, vec![3, 8]);
        let tape = Tape::no_grad();
        let out = decode_queries(&tape, &store, &cfg, tape.constant(u), tape.constant(q)).unwrap();
        assert_eq!(out.attention.len(), 4);
        for block in &out.attention {
            assert_eq!(block.len(), 2);
            for a in block {
                assert!(a.data().iter().all(|&v| (v - 0.2).abs() < 1e-12));
            }
        }
    }

    #[test]
    fn heads_must_divide_width() {
        let (mut cfg, store) = small();
        cfg.heads = 3;
        let tape = Tape::no_grad();
        let u = tape.constant(Tensor::zeros(vec![2, 8]));
        assert!(matches!(
            decode_queries(&tape, &store, &cfg, u, u),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn classifier_zero_params_is_half() {
        let mut store = ParamStore::new();
        store.insert("cls.fc1.weight", Tensor::zeros(vec![4, 3]));
        store.insert("cls.fc1.bias", Tensor::zeros(vec![3]));
        store.insert("cls.fc2.weight", Tensor::zeros(vec![3, 1]));
        store.insert("cls.fc2.bias", Tensor::zeros(vec![1]));
        let tape = Tape::no_grad();
        let p = classify(&tape, &store, tape.constant(Tensor::zeros(vec![5, 4]))).unwrap();
        assert_eq!(p.value().data(), &[0.5; 5]);
    }

    #[test]
    fn classifier_shares_weights_across_rows() {
        let (_, store) = small();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let row = rand_tensor(&mut rng, vec![1, 8]).scale(5.0);
        let h = Tensor::concat(&[&row, &row], 0).unwrap();
        let tape = Tape::no_grad();
        let p = classify(&tape, &store, tape.constant(h)).unwrap();
        let p = p.value();
        assert_eq!(p.data()[0], p.data()[1]);
        assert!(p.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn bce_fixtures() {
        let tape = Tape::no_grad();
        let y = Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap();
        let p = tape.constant(Tensor::new(vec![1, 2], vec![0.9, 0.2]).unwrap());
        let expect = -0.5 * (0.9f64.ln() + 0.8f64.ln());
        assert!((bce_loss(p, &y).unwrap().value().item() - expect).abs() < 1e-12);
        let half = tape.constant(Tensor::full(vec![3, 2], 0.5));
        let y = Tensor::new(vec![3, 2], vec![1.0, 0.0, 0.0, 0.0, 1.0, 1.0]).unwrap();
        assert!((bce_loss(half, &y).unwrap().value().item() - 2f64.ln()).abs() < 1e-12);
        let exact = tape.constant(y.clone());
        assert!(bce_loss(exact, &y).unwrap().value().item() < 1e-6);
        let wrong = tape.constant(Tensor::zeros(vec![2, 3]));
        assert!(bce_loss(wrong, &y).is_err());
    }

    #[test]
    fn grounding_delta_and_uniform() {
        let grid = [8, 8, 2];
        let mut delta = Tensor::zeros(vec![2, 128]);
        delta.data_mut()[128] = 1.0;
        let att = vec![vec![delta.clone(), delta]];
        let map = grounding_map(&att, grid, 1, [32, 32, 8]).unwrap();
        let (arg, _) = map
            .voxels()
            .iter()
            .enumerate()
            .fold((0, f64::MIN), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
        let (x, y, z) = (arg / 256, (arg / 8) % 32, arg % 8);
        assert!(x < 4 && y < 4 && z < 4);
        let uniform = vec![vec![Tensor::full(vec![1, 128], 1.0 / 128.0)]];
        let w = patch_weights(&uniform, 0).unwrap();
        assert!(w.iter().all(|&v| (v - 1.0 / 128.0).abs() < 1e-15));
        assert!(grounding_map(&uniform, grid, 1, [32, 32, 8]).is_err());
    }

    #[test]
    fn query_set_rejects_duplicates_and_parses() {
        let q = |n: &str| DiseaseQuery {
            name: n.into(),
            description: "d".into(),
        };
        assert!(DiseaseQuerySet::new(vec![q("a"), q("a")]).is_err());
        assert!(DiseaseQuerySet::new(vec![]).is_err());
        let set = DiseaseQuerySet::from_lexicon(&Lexicon::builtin()).unwrap();
        assert_eq!(set.len(), 13);
        assert_eq!(set.index_of("glioma"), Some(11));
    }
}

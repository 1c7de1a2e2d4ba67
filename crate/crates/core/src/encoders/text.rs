use std::collections::HashMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const TEXT_TABLE: &str = "text.table";

/// Frozen report encoder producing one `d`-vector per text.
pub trait TextEncoder {
    fn dim(&self) -> usize;

    /// Unit-norm embedding of `text`, or all zeros for text without tokens.
    fn encode(&self, text: &str) -> Result<Vec<f64>>;

    /// Embeds sentences joined with newlines (the report key format).
    fn encode_report(&self, sentences: &[String]) -> Result<Vec<f64>> {
        self.encode(&sentences.join("\n"))
    }

    /// Stacks embeddings of `texts` into a `n × d` matrix.
    fn encode_batch(&self, texts: &[String]) -> Result<Tensor> {
        let mut data = Vec::with_capacity(texts.len() * self.dim());
        for t in texts {
            data.extend(self.encode(t)?);
        }
        Tensor::new(vec![texts.len(), self.dim()], data)
    }
}

fn normalize(mut v: Vec<f64>) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    v
}

/// Seeded FNV-1a over the token bytes.
pub fn token_hash(token: &str, seed: u64) -> u64 {
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    let mut h = 0xcbf2_9ce4_8422_2325 ^ seed.wrapping_mul(PRIME);
    for b in token.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(PRIME);
    }
    h
}

/// Whitespace tokens, case-folded, each looked up in a fixed random table.
#[derive(Clone, Debug)]
pub struct HashedTextEncoder {
    table: Tensor,
    seed: u64,
}

impl HashedTextEncoder {
    pub fn new(rows: usize, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..rows * dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        HashedTextEncoder {
            table: Tensor::new(vec![rows, dim], data).expect("table shape"),
            seed,
        }
    }

    pub fn from_table(table: Tensor, seed: u64) -> Result<Self> {
        match table.shape() {
            [rows, dim] if *rows > 0 && *dim > 0 => Ok(HashedTextEncoder { table, seed }),
            s => Err(Error::shape("text table", s, &[0, 0])),
        }
    }

    pub fn table(&self) -> &Tensor {
        &self.table
    }
}

impl TextEncoder for HashedTextEncoder {
    fn dim(&self) -> usize {
        self.table.shape()[1]
    }

    fn encode(&self, text: &str) -> Result<Vec<f64>> {
        let (rows, d) = (self.table.shape()[0], self.dim());
        let mut acc = vec![0.0; d];
        let mut n = 0usize;
        for token in text.split_whitespace() {
            let row = (token_hash(&token.to_lowercase(), self.seed) % rows as u64) as usize;
            acc.iter_mut().zip(self.table.row(row)).for_each(|(a, t)| *a += t);
            n += 1;
        }
        if n == 0 {
            return Ok(acc);
        }
        Ok(normalize(acc.into_iter().map(|a| a / n as f64).collect()))
    }
}

/// Vectors read from a JSON object mapping report text to its embedding.
#[derive(Clone, Debug)]
pub struct PrecomputedTextEncoder {
    dim: usize,
    vectors: HashMap<String, Vec<f64>>,
}

impl PrecomputedTextEncoder {
    pub fn new(vectors: HashMap<String, Vec<f64>>) -> Result<Self> {
        let dim = vectors.values().next().map_or(0, Vec::len);
        if dim == 0 {
            return Err(Error::Validation("precomputed text vectors: empty or zero-width".into()));
        }
        let mut out = HashMap::with_capacity(vectors.len());
        for (k, v) in vectors {
            if v.len() != dim || v.iter().any(|x| !x.is_finite()) {
                return Err(Error::Validation(format!(
                    "precomputed vector for {k:?} must have {dim} finite values"
                )));
            }
            out.insert(k, normalize(v));
        }
        Ok(PrecomputedTextEncoder { dim, vectors: out })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = crate::io::read_to_string(path)?;
        let map = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            msg: e.to_string(),
        })?;
        Self::new(map)
    }
}

impl TextEncoder for PrecomputedTextEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, text: &str) -> Result<Vec<f64>> {
        if text.split_whitespace().next().is_none() {
            return Ok(vec![0.0; self.dim]);
        }
        self.vectors
            .get(text)
            .cloned()
            .ok_or_else(|| Error::Validation(format!("no precomputed vector for {text:?}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn norm(v: &[f64]) -> f64 {
        v.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    #[test]
    fn deterministic_unit_norm_and_zero_for_empty() {
        let enc = HashedTextEncoder::new(64, 8, 7);
        let a = enc.encode("Patchy T1WI hypointensity").unwrap();
        assert_eq!(a, HashedTextEncoder::new(64, 8, 7).encode("Patchy T1WI hypointensity").unwrap());
        assert!((norm(&a) - 1.0).abs() < 1e-12);
        assert_eq!(enc.encode("  \n ").unwrap(), vec![0.0; 8]);
        assert_eq!(enc.encode_report(&[]).unwrap(), vec![0.0; 8]);
    }

    #[test]
    fn case_and_whitespace_insensitive() {
        let enc = HashedTextEncoder::new(64, 8, 7);
        assert_eq!(
            enc.encode("sulci   WIDENED").unwrap(),
            enc.encode("Sulci widened").unwrap()
        );
    }

    #[test]
    fn seed_changes_hash() {
        assert_ne!(token_hash("glioma", 1), token_hash("glioma", 2));
        assert_eq!(token_hash("glioma", 1), token_hash("glioma", 1));
    }

    #[test]
    fn precomputed_lookup() {
        let map = HashMap::from([("a b".to_string(), vec![3.0, 4.0])]);
        let enc = PrecomputedTextEncoder::new(map).unwrap();
        assert_eq!(enc.encode("a b").unwrap(), vec![0.6, 0.8]);
        assert_eq!(enc.encode("").unwrap(), vec![0.0, 0.0]);
        assert!(enc.encode("c").is_err());
        let batch = enc.encode_batch(&["a b".into(), String::new()]).unwrap();
        assert_eq!(batch.shape(), &[2, 2]);
    }
}

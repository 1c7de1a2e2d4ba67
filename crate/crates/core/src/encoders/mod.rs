//! Shared volumetric encoder, patch projection, pooling and the frozen
//! text encoders.

mod image;
mod text;
mod volume;

pub use image::{encode_image, init_image_encoder, project_patches, PatchEmbedding};
pub use text::{token_hash, HashedTextEncoder, PrecomputedTextEncoder, TextEncoder, TEXT_TABLE};
pub use volume::{trilinear_resize, Plane, Volume, VOLUME_MAGIC};

use crate::error::Result;
use crate::tensor::Var;

/// Mean over the patch rows, then L2-normalized; returns a `1 × d` row.
pub fn pool_patches<'t>(u: Var<'t>) -> Result<Var<'t>> {
    let d = u.shape()[1];
    u.mean_axis(0)?.reshape(vec![1, d])?.l2_normalize()
}

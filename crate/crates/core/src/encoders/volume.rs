//! Volumes and the `UBV1` file format: magic, three little-endian `u32`
//! extents, then `X·Y·Z` little-endian `f32` values in C order.

use std::path::Path;

use crate::error::{Error, Result};
use crate::io::write_atomic;

pub const VOLUME_MAGIC: &[u8; 4] = b"UBV1";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Plane {
    /// Mirrors the z axis.
    Axial,
    /// Mirrors the y axis.
    Coronal,
    /// Mirrors the x axis.
    Sagittal,
}

impl Plane {
    pub const ALL: [Plane; 3] = [Plane::Axial, Plane::Coronal, Plane::Sagittal];
}

#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub modality: String,
    dims: [usize; 3],
    voxels: Vec<f64>,
}

impl Volume {
    pub fn new(modality: impl Into<String>, dims: [usize; 3], voxels: Vec<f64>) -> Result<Volume> {
        if dims.contains(&0) || dims.iter().product::<usize>() != voxels.len() {
            return Err(Error::shape("volume", &dims, &[voxels.len()]));
        }
        if voxels.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("volume intensities".into()));
        }
        Ok(Volume {
            modality: modality.into(),
            dims,
            voxels,
        })
    }

    pub fn zeros(modality: impl Into<String>, dims: [usize; 3]) -> Volume {
        Volume {
            modality: modality.into(),
            dims,
            voxels: vec![0.0; dims.iter().product()],
        }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn voxels(&self) -> &[f64] {
        &self.voxels
    }

    pub fn voxels_mut(&mut self) -> &mut [f64] {
        &mut self.voxels
    }

    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (x * self.dims[1] + y) * self.dims[2] + z
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> f64 {
        self.voxels[self.index(x, y, z)]
    }

    pub fn flip(&mut self, plane: Plane) {
        let [nx, ny, nz] = self.dims;
        let src = self.voxels.clone();
        for x in 0..nx {
            for y in 0..ny {
                for z in 0..nz {
                    let (sx, sy, sz) = match plane {
                        Plane::Sagittal => (nx - 1 - x, y, z),
                        Plane::Coronal => (x, ny - 1 - y, z),
                        Plane::Axial => (x, y, nz - 1 - z),
                    };
                    self.voxels[(x * ny + y) * nz + z] = src[(sx * ny + sy) * nz + sz];
                }
            }
        }
    }

    /// Trilinear resampling to `dims` (voxel centres aligned, edges clamped).
    pub fn resized(&self, dims: [usize; 3]) -> Volume {
        if dims == self.dims {
            return self.clone();
        }
        Volume {
            modality: self.modality.clone(),
            dims,
            voxels: trilinear_resize(&self.voxels, self.dims, dims),
        }
    }

    /// Rounds every voxel through `f32`, the on-disk precision.
    pub fn quantized(mut self) -> Volume {
        for v in &mut self.voxels {
            *v = *v as f32 as f64;
        }
        self
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 4 * self.voxels.len());
        out.extend_from_slice(VOLUME_MAGIC);
        for d in self.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &self.voxels {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(modality: &str, bytes: &[u8]) -> Result<Volume> {
        let bad = |m: String| Error::Validation(format!("UBV1 volume: {m}"));
        if bytes.len() < 16 || &bytes[..4] != VOLUME_MAGIC {
            return Err(bad("missing UBV1 magic".into()));
        }
        let ext = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
        let dims = [ext(0), ext(1), ext(2)];
        let n: usize = dims.iter().product();
        if bytes.len() != 16 + 4 * n {
            return Err(bad(format!("extents {dims:?} need {} bytes, found {}", 16 + 4 * n, bytes.len())));
        }
        let voxels = bytes[16..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        Volume::new(modality, dims, voxels)
    }

    pub fn read(modality: &str, path: &Path) -> Result<Volume> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Volume::from_bytes(modality, &bytes).map_err(|e| match e {
            Error::Validation(m) => Error::Validation(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }
}

/// Resamples a C-order grid with half-voxel-aligned trilinear weights.
pub fn trilinear_resize(data: &[f64], from: [usize; 3], to: [usize; 3]) -> Vec<f64> {
    let coords = |axis: usize| -> Vec<(usize, usize, f64)> {
        let (n_in, n_out) = (from[axis], to[axis]);
        (0..n_out)
            .map(|o| {
                let src = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).max(0.0);
                let lo = (src.floor() as usize).min(n_in - 1);
                let hi = (lo + 1).min(n_in - 1);
                (lo, hi, src - lo as f64)
            })
            .collect()
    };
    let (cx, cy, cz) = (coords(0), coords(1), coords(2));
    let at = |x: usize, y: usize, z: usize| data[(x * from[1] + y) * from[2] + z];
    let mut out = Vec::with_capacity(to.iter().product());
    for &(x0, x1, fx) in &cx {
        for &(y0, y1, fy) in &cy {
            for &(z0, z1, fz) in &cz {
                let lerp = |a: f64, b: f64, t: f64| a + (b - a) * t;
                let c00 = lerp(at(x0, y0, z0), at(x1, y0, z0), fx);
                let c01 = lerp(at(x0, y0, z1), at(x1, y0, z1), fx);
                let c10 = lerp(at(x0, y1, z0), at(x1, y1, z0), fx);
                let c11 = lerp(at(x0, y1, z1), at(x1, y1, z1), fx);
                out.push(lerp(lerp(c00, c10, fy), lerp(c01, c11, fy), fz));
            }
        }
    }
    out
}

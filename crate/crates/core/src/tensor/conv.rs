//! Strided 3-D convolution in channels-last layout, lowered to a matmul
//! over an im2col matrix.
//!
//! Input `[X, Y, Z, C_in]`, weight `[kx·ky·kz·C_in, C_out]` (rows ordered
//! kx, ky, kz, c_in), bias `[C_out]`, output `[O_x, O_y, O_z, C_out]`.
//! Kernel, stride and padding are given per axis.

use serde::{Deserialize, Serialize};

use super::{matmul_into, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conv3dSpec {
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
}

impl Conv3dSpec {
    /// Same kernel, stride and padding on every axis.
    pub fn cubic(kernel: usize, stride: usize, padding: usize) -> Self {
        Conv3dSpec {
            kernel: [kernel; 3],
            stride: [stride; 3],
            padding: [padding; 3],
        }
    }

    pub fn taps(&self) -> usize {
        self.kernel.iter().product()
    }

    pub fn output_extent(&self, n: usize, axis: usize) -> Option<usize> {
        let (k, s) = (self.kernel[axis], self.stride[axis]);
        let padded = n + 2 * self.padding[axis];
        if s == 0 || k == 0 || padded < k {
            return None;
        }
        Some((padded - k) / s + 1)
    }

    pub fn output_dims(&self, dims: [usize; 3]) -> Option<[usize; 3]> {
        Some([
            self.output_extent(dims[0], 0)?,
            self.output_extent(dims[1], 1)?,
            self.output_extent(dims[2], 2)?,
        ])
    }
}

pub(crate) struct ConvGeometry {
    pub input: [usize; 3],
    pub output: [usize; 3],
    pub c_in: usize,
    pub c_out: usize,
    pub spec: Conv3dSpec,
}

impl ConvGeometry {
    pub fn new(input: &Tensor, weight: &Tensor, bias: &Tensor, spec: Conv3dSpec) -> Result<Self> {
        let [x, y, z, c_in] = input.shape()[..] else {
            return Err(Error::shape("conv3d", input.shape(), weight.shape()));
        };
        let (rows, c_out) = weight.dims2("conv3d")?;
        if rows != spec.taps() * c_in || bias.shape() != [c_out] {
            return Err(Error::shape("conv3d", input.shape(), weight.shape()));
        }
        match spec.output_dims([x, y, z]) {
            Some(output) => Ok(ConvGeometry {
                input: [x, y, z],
                output,
                c_in,
                c_out,
                spec,
            }),
            None => Err(Error::shape("conv3d", input.shape(), weight.shape())),
        }
    }

    fn positions(&self) -> usize {
        self.output.iter().product()
    }

    fn patch_len(&self) -> usize {
        self.spec.taps() * self.c_in
    }

    /// Visits every (output position, im2col column, input flat offset)
    /// triple whose input voxel lies inside the volume.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let [x, y, z] = self.input;
        let [ox, oy, oz] = self.output;
        let Conv3dSpec {
            kernel: k,
            stride: s,
            padding: p,
        } = self.spec;
        let c = self.c_in;
        let mut pos = 0;
        for i in 0..ox {
            for j in 0..oy {
                for l in 0..oz {
                    let mut col = 0;
                    for a in 0..k[0] {
                        let xi = (i * s[0] + a) as isize - p[0] as isize;
                        for b in 0..k[1] {
                            let yi = (j * s[1] + b) as isize - p[1] as isize;
                            for e in 0..k[2] {
                                let zi = (l * s[2] + e) as isize - p[2] as isize;
                                let inside = xi >= 0
                                    && yi >= 0
                                    && zi >= 0
                                    && (xi as usize) < x
                                    && (yi as usize) < y
                                    && (zi as usize) < z;
                                if inside {
                                    let base =
                                        ((xi as usize * y + yi as usize) * z + zi as usize) * c;
                                    for ch in 0..c {
                                        f(pos, col + ch, base + ch);
                                    }
                                }
                                col += c;
                            }
                        }
                    }
                    pos += 1;
                }
            }
        }
    }

    fn im2col(&self, input: &[f64]) -> Vec<f64> {
        let width = self.patch_len();
        let mut cols = vec![0.0; self.positions() * width];
        self.for_each_tap(|pos, col, src| cols[pos * width + col] = input[src]);
        cols
    }
}

pub(crate) fn conv3d_forward(
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    spec: Conv3dSpec,
) -> Result<Tensor> {
    let g = ConvGeometry::new(input, weight, bias, spec)?;
    let cols = g.im2col(input.data());
    let n = g.positions();
    let mut out = Vec::with_capacity(n * g.c_out);
    for _ in 0..n {
        out.extend_from_slice(bias.data());
    }
    matmul_into(&cols, weight.data(), &mut out, n, g.patch_len(), g.c_out);
    let [ox, oy, oz] = g.output;
    Tensor::new(vec![ox, oy, oz, g.c_out], out)
}

/// Returns gradients for (input, weight, bias).
pub(crate) fn conv3d_backward(
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    spec: Conv3dSpec,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let g = ConvGeometry::new(input, weight, bias, spec)?;
    let n = g.positions();
    let w = g.patch_len();
    let go = grad_out.data();

    let mut grad_bias = vec![0.0; g.c_out];
    for row in go.chunks(g.c_out) {
        for (acc, v) in grad_bias.iter_mut().zip(row) {
            *acc += v;
        }
    }

    // dW = colsᵀ · dOut
    let cols = g.im2col(input.data());
    let mut grad_weight = vec![0.0; w * g.c_out];
    for pos in 0..n {
        let grow = &go[pos * g.c_out..(pos + 1) * g.c_out];
        for c in 0..w {
            let v = cols[pos * w + c];
            if v == 0.0 {
                continue;
            }
            let dst = &mut grad_weight[c * g.c_out..(c + 1) * g.c_out];
            for (d, gv) in dst.iter_mut().zip(grow) {
                *d += v * gv;
            }
        }
    }

    // dCols = dOut · Wᵀ, scattered back with col2im
    let wd = weight.data();
    let mut grad_cols = vec![0.0; n * w];
    for pos in 0..n {
        let grow = &go[pos * g.c_out..(pos + 1) * g.c_out];
        for c in 0..w {
            let wrow = &wd[c * g.c_out..(c + 1) * g.c_out];
            grad_cols[pos * w + c] = super::dot(grow, wrow);
        }
    }
    let mut grad_input = vec![0.0; input.numel()];
    g.for_each_tap(|pos, col, src| grad_input[src] += grad_cols[pos * w + col]);

    Ok((
        Tensor::new(input.shape().to_vec(), grad_input)?,
        Tensor::new(weight.shape().to_vec(), grad_weight)?,
        Tensor::vector(grad_bias),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct nested-loop convolution used as an oracle.
    fn naive(input: &Tensor, weight: &Tensor, bias: &Tensor, spec: Conv3dSpec) -> Tensor {
        let [x, y, z, c] = input.shape()[..] else { unreachable!() };
        let co = bias.numel();
        let [ox, oy, oz] = spec.output_dims([x, y, z]).unwrap();
        let (k, s, p) = (spec.kernel, spec.stride, spec.padding);
        let mut out = Tensor::zeros(vec![ox, oy, oz, co]);
        for i in 0..ox {
            for j in 0..oy {
                for l in 0..oz {
                    for f in 0..co {
                        let mut acc = bias.data()[f];
                        for a in 0..k[0] {
                            for b in 0..k[1] {
                                for e in 0..k[2] {
                                    let xi = (i * s[0] + a) as isize - p[0] as isize;
                                    let yi = (j * s[1] + b) as isize - p[1] as isize;
                                    let zi = (l * s[2] + e) as isize - p[2] as isize;
                                    if xi < 0 || yi < 0 || zi < 0 {
                                        continue;
                                    }
                                    let (xi, yi, zi) = (xi as usize, yi as usize, zi as usize);
                                    if xi >= x || yi >= y || zi >= z {
                                        continue;
                                    }
                                    for ch in 0..c {
                                        let wrow = ((a * k[1] + b) * k[2] + e) * c + ch;
                                        acc += weight.data()[wrow * co + f]
                                            * input.data()[((xi * y + yi) * z + zi) * c + ch];
                                    }
                                }
                            }
                        }
                        out.data_mut()[((i * oy + j) * oz + l) * co + f] = acc;
                    }
                }
            }
        }
        out
    }

    fn ramp(shape: Vec<usize>, scale: f64) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::new(shape, (0..n).map(|i| ((i * 7919) % 23) as f64 * scale - 0.3).collect()).unwrap()
    }

    #[test]
    fn matches_naive_loops() {
        for spec in [
            Conv3dSpec::cubic(2, 2, 0),
            Conv3dSpec::cubic(3, 2, 1),
            Conv3dSpec::cubic(3, 1, 1),
            Conv3dSpec {
                kernel: [2, 3, 1],
                stride: [2, 1, 1],
                padding: [0, 1, 0],
            },
        ] {
            let input = ramp(vec![5, 4, 3, 2], 0.05);
            let weight = ramp(vec![spec.taps() * 2, 3], 0.02);
            let bias = Tensor::vector(vec![0.1, -0.2, 0.3]);
            let fast = conv3d_forward(&input, &weight, &bias, spec).unwrap();
            let slow = naive(&input, &weight, &bias, spec);
            assert_eq!(fast.shape(), slow.shape());
            assert!(fast.max_abs_diff(&slow) < 1e-12);
        }
    }

    #[test]
    fn output_grid_from_strides() {
        let spec = Conv3dSpec::cubic(2, 2, 0);
        let once = spec.output_dims([32, 32, 8]).unwrap();
        assert_eq!(spec.output_dims(once).unwrap(), [8, 8, 2]);
        let planar = Conv3dSpec {
            kernel: [2, 2, 1],
            stride: [2, 2, 1],
            padding: [0; 3],
        };
        assert_eq!(planar.output_dims(planar.output_dims([32, 32, 8]).unwrap()).unwrap(), [8, 8, 8]);
        assert!(spec.output_dims([1, 4, 4]).is_none());
    }
}

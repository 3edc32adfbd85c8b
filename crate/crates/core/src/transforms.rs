//! Cheap spatial transformations applied to template kernels.
//!
//! A transform acts on every channel slice of a `(channels, k_h, k_w)` kernel.
//! `Scalar` is an elementwise product with a `k_h x k_w` weight grid. `Rotation`
//! and `Affine` resample each slice with bilinear interpolation: output
//! position `p` (centred on the kernel middle) reads the template at
//! `L^-1 (p - t)` for the 2x3 matrix `[L | t]`, with zeros outside the kernel.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::bilinear_taps;

/// Below this the affine inverse is treated as undefined and the transform
/// produces an all-zero kernel.
const SINGULAR_DET: f64 = 1e-12;

/// Spatial extent and channel count of a template kernel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KernelShape {
    pub channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
}

impl KernelShape {
    pub fn new(channels: usize, kernel_h: usize, kernel_w: usize) -> Self {
        Self {
            channels,
            kernel_h,
            kernel_w,
        }
    }

    pub fn area(&self) -> usize {
        self.kernel_h * self.kernel_w
    }

    pub fn len(&self) -> usize {
        self.channels * self.area()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn center(&self) -> (f64, f64) {
        (
            (self.kernel_h as f64 - 1.0) / 2.0,
            (self.kernel_w as f64 - 1.0) / 2.0,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransformFamily {
    Scalar,
    Rotation,
    Affine,
}

impl TransformFamily {
    pub const ALL: [TransformFamily; 3] = [Self::Scalar, Self::Rotation, Self::Affine];

    pub fn identity(self, kernel_h: usize, kernel_w: usize) -> SpatialTransform {
        match self {
            Self::Scalar => SpatialTransform::Scalar {
                kernel_h,
                kernel_w,
                weights: vec![1.0; kernel_h * kernel_w],
            },
            Self::Rotation => SpatialTransform::Rotation { theta: 0.0 },
            Self::Affine => SpatialTransform::Affine {
                matrix: [1.0, 0.0, 0.0, 0.0, 1.0, 0.0],
            },
        }
    }

    pub fn param_count(self, kernel_h: usize, kernel_w: usize) -> usize {
        match self {
            Self::Scalar => kernel_h * kernel_w,
            Self::Rotation => 1,
            Self::Affine => 6,
        }
    }

    /// Multiply-accumulates per kernel position when a transformed output is
    /// assembled from template features: one for the scalar product, four
    /// bilinear taps for the resampling families.
    pub fn macs_per_position(self) -> usize {
        match self {
            Self::Scalar => 1,
            Self::Rotation | Self::Affine => 4,
        }
    }

    pub fn tag(self) -> u32 {
        match self {
            Self::Scalar => 0,
            Self::Rotation => 1,
            Self::Affine => 2,
        }
    }

    pub fn from_tag(tag: u32) -> Result<Self> {
        match tag {
            0 => Ok(Self::Scalar),
            1 => Ok(Self::Rotation),
            2 => Ok(Self::Affine),
            _ => Err(Error::Format(format!("unknown transform family tag {tag}"))),
        }
    }

    /// Builds a transform of this family from its flat parameters.
    pub fn from_params(
        self,
        kernel_h: usize,
        kernel_w: usize,
        params: &[f64],
    ) -> Result<SpatialTransform> {
        let want = self.param_count(kernel_h, kernel_w);
        if params.len() != want {
            return Err(Error::Shape {
                axis: "transform parameters",
                expected: want,
                got: params.len(),
            });
        }
        Ok(match self {
            Self::Scalar => SpatialTransform::Scalar {
                kernel_h,
                kernel_w,
                weights: params.to_vec(),
            },
            Self::Rotation => SpatialTransform::Rotation { theta: params[0] },
            Self::Affine => {
                let mut matrix = [0.0; 6];
                matrix.copy_from_slice(params);
                SpatialTransform::Affine { matrix }
            }
        })
    }
}

impl fmt::Display for TransformFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Scalar => "scalar",
            Self::Rotation => "rotation",
            Self::Affine => "affine",
        })
    }
}

impl FromStr for TransformFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "scalar" => Ok(Self::Scalar),
            "rotation" => Ok(Self::Rotation),
            "affine" => Ok(Self::Affine),
            other => Err(Error::InvalidArgument(format!(
                "unknown transform family '{other}'"
            ))),
        }
    }
}

/// One kernel transformation.
#[derive(Debug, Clone, PartialEq)]
pub enum SpatialTransform {
    /// Elementwise weights over the kernel grid, shared by all channels.
    Scalar {
        kernel_h: usize,
        kernel_w: usize,
        weights: Vec<f64>,
    },
    /// Rotation by `theta` radians about the kernel centre.
    Rotation { theta: f64 },
    /// Row-major `[[a, b, tx], [c, d, ty]]` acting on centred (x, y) kernel
    /// coordinates.
    Affine { matrix: [f64; 6] },
}

impl SpatialTransform {
    pub fn family(&self) -> TransformFamily {
        match self {
            Self::Scalar { .. } => TransformFamily::Scalar,
            Self::Rotation { .. } => TransformFamily::Rotation,
            Self::Affine { .. } => TransformFamily::Affine,
        }
    }

    pub fn param_count(&self) -> usize {
        self.params().len()
    }

    pub fn params(&self) -> &[f64] {
        match self {
            Self::Scalar { weights, .. } => weights,
            Self::Rotation { theta } => std::slice::from_ref(theta),
            Self::Affine { matrix } => matrix,
        }
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        match self {
            Self::Scalar { weights, .. } => weights,
            Self::Rotation { theta } => std::slice::from_mut(theta),
            Self::Affine { matrix } => matrix,
        }
    }

    pub fn macs_per_position(&self) -> usize {
        self.family().macs_per_position()
    }

    /// The equivalent 2x3 matrix for the resampling families.
    pub fn to_affine(&self) -> Option<[f64; 6]> {
        match *self {
            Self::Scalar { .. } => None,
            Self::Rotation { theta } => {
                let (s, c) = theta.sin_cos();
                Some([c, -s, 0.0, s, c, 0.0])
            }
            Self::Affine { matrix } => Some(matrix),
        }
    }

    fn check_scalar_dims(&self, shape: &KernelShape) -> Result<()> {
        if let Self::Scalar {
            kernel_h, kernel_w, ..
        } = self
        {
            if *kernel_h != shape.kernel_h {
                return Err(Error::Shape {
                    axis: "scalar transform height",
                    expected: shape.kernel_h,
                    got: *kernel_h,
                });
            }
            if *kernel_w != shape.kernel_w {
                return Err(Error::Shape {
                    axis: "scalar transform width",
                    expected: shape.kernel_w,
                    got: *kernel_w,
                });
            }
        }
        Ok(())
    }
}

/// Where each output kernel position reads from in the template.
struct SampleGrid {
    /// Per output position: source (x, y) in centred coordinates.
    sources: Vec<(f64, f64)>,
    inverse: [f64; 4],
    singular: bool,
}

fn sample_grid(matrix: &[f64; 6], shape: &KernelShape) -> SampleGrid {
    let [a, b, tx, c, d, ty] = *matrix;
    let det = a * d - b * c;
    let singular = det.abs() < SINGULAR_DET || !det.is_finite();
    let inverse = if singular {
        [0.0; 4]
    } else {
        [d / det, -b / det, -c / det, a / det]
    };
    let (cy, cx) = shape.center();
    let mut sources = Vec::with_capacity(shape.area());
    for i in 0..shape.kernel_h {
        for j in 0..shape.kernel_w {
            let qx = j as f64 - cx - tx;
            let qy = i as f64 - cy - ty;
            sources.push((
                inverse[0] * qx + inverse[1] * qy,
                inverse[2] * qx + inverse[3] * qy,
            ));
        }
    }
    SampleGrid {
        sources,
        inverse,
        singular,
    }
}

/// Applies `t` to a `(channels, k_h, k_w)` template.
pub fn apply_to_kernel(
    template: &[f64],
    shape: KernelShape,
    t: &SpatialTransform,
) -> Result<Vec<f64>> {
    if template.len() != shape.len() {
        return Err(Error::Shape {
            axis: "template length",
            expected: shape.len(),
            got: template.len(),
        });
    }
    t.check_scalar_dims(&shape)?;
    let area = shape.area();
    let mut out = vec![0.0; shape.len()];
    if let SpatialTransform::Scalar { weights, .. } = t {
        for (dst, src) in out.chunks_exact_mut(area).zip(template.chunks_exact(area)) {
            for ((o, s), w) in dst.iter_mut().zip(src).zip(weights) {
                *o = s * w;
            }
        }
        return Ok(out);
    }

    let matrix = t.to_affine().expect("resampling family");
    let grid = sample_grid(&matrix, &shape);
    if grid.singular {
        return Ok(out);
    }
    let (cy, cx) = shape.center();
    for (pos, &(sx, sy)) in grid.sources.iter().enumerate() {
        let taps = bilinear_taps(shape.kernel_h, shape.kernel_w, cy + sy, cx + sx);
        for c in 0..shape.channels {
            let plane = &template[c * area..(c + 1) * area];
            out[c * area + pos] = taps
                .iter()
                .filter_map(|tap| tap.index.map(|i| tap.weight * plane[i]))
                .sum();
        }
    }
    Ok(out)
}

/// Gradients of `sum(apply_to_kernel(template, t) * grad_out)` with respect to
/// the template and to the transform parameters (in `t.params()` order).
/// Resampling families are differentiated piecewise; lattice-aligned sample
/// points take the derivative of the cell they fall into.
pub fn apply_backward(
    template: &[f64],
    shape: KernelShape,
    t: &SpatialTransform,
    grad_out: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    if template.len() != shape.len() || grad_out.len() != shape.len() {
        return Err(Error::Shape {
            axis: "template length",
            expected: shape.len(),
            got: template.len().min(grad_out.len()),
        });
    }
    t.check_scalar_dims(&shape)?;
    let area = shape.area();
    let mut grad_template = vec![0.0; shape.len()];

    if let SpatialTransform::Scalar { weights, .. } = t {
        let mut grad_w = vec![0.0; area];
        for c in 0..shape.channels {
            for pos in 0..area {
                let i = c * area + pos;
                grad_template[i] = weights[pos] * grad_out[i];
                grad_w[pos] += template[i] * grad_out[i];
            }
        }
        return Ok((grad_template, grad_w));
    }

    let matrix = t.to_affine().expect("resampling family");
    let grid = sample_grid(&matrix, &shape);
    let mut grad_matrix = [0.0; 6];
    if !grid.singular {
        let (cy, cx) = shape.center();
        let [ia, ib, ic, id] = grid.inverse;
        for (pos, &(sx, sy)) in grid.sources.iter().enumerate() {
            let taps = bilinear_taps(shape.kernel_h, shape.kernel_w, cy + sy, cx + sx);
            let (mut g_sx, mut g_sy) = (0.0, 0.0);
            for c in 0..shape.channels {
                let g = grad_out[c * area + pos];
                if g == 0.0 {
                    continue;
                }
                for tap in &taps {
                    if let Some(i) = tap.index {
                        grad_template[c * area + i] += tap.weight * g;
                        let v = template[c * area + i];
                        g_sx += g * tap.d_dx * v;
                        g_sy += g * tap.d_dy * v;
                    }
                }
            }
            // source = L^-1 (p - t): back through the inverse.
            let rx = ia * g_sx + ic * g_sy;
            let ry = ib * g_sx + id * g_sy;
            grad_matrix[0] -= rx * sx;
            grad_matrix[1] -= rx * sy;
            grad_matrix[2] -= rx;
            grad_matrix[3] -= ry * sx;
            grad_matrix[4] -= ry * sy;
            grad_matrix[5] -= ry;
        }
    }

    let grad_params = match *t {
        SpatialTransform::Rotation { theta } => {
            let (s, c) = theta.sin_cos();
            vec![-s * grad_matrix[0] - c * grad_matrix[1] + c * grad_matrix[3] - s * grad_matrix[4]]
        }
        _ => grad_matrix.to_vec(),
    };
    Ok((grad_template, grad_params))
}

/// Least-squares scalar transform mapping `template` onto `target`: for each
/// kernel position, `sum_c target * template / sum_c template^2`, or 1 where
/// the template has no energy.
pub fn fit_scalar(
    template: &[f64],
    target: &[f64],
    shape: KernelShape,
) -> Result<SpatialTransform> {
    for (axis, len) in [
        ("template length", template.len()),
        ("target length", target.len()),
    ] {
        if len != shape.len() {
            return Err(Error::Shape {
                axis,
                expected: shape.len(),
                got: len,
            });
        }
    }
    let area = shape.area();
    let weights = (0..area)
        .map(|pos| {
            let (mut num, mut den) = (0.0, 0.0);
            for c in 0..shape.channels {
                let b = template[c * area + pos];
                num += target[c * area + pos] * b;
                den += b * b;
            }
            if den < 1e-12 {
                1.0
            } else {
                num / den
            }
        })
        .collect();
    Ok(SpatialTransform::Scalar {
        kernel_h: shape.kernel_h,
        kernel_w: shape.kernel_w,
        weights,
    })
}

/// Angle in `[-pi, pi)`, handy for reporting learned rotations.
pub fn wrap_angle(theta: f64) -> f64 {
    (theta + PI).rem_euclid(2.0 * PI) - PI
}

//! Dense rank-4 tensors and the convolution primitives everything else is
//! built on.
//!
//! Two convolution routes exist. [`conv2d_reference`] is the direct nested-loop
//! definition with a fixed summation order (kernel row, kernel column, channel)
//! and is what the verification tests compare against. [`conv2d`] and
//! [`conv2d_backward`] unfold the input and hand the contraction to a blocked
//! GEMM; they are used for training and benchmarking.

use rayon::prelude::*;

use crate::error::{check_dim, Error, Result};
use crate::gemm::{gemm, MatRef};

/// Dense `(n, c, h, w)` array of `f64`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4 {
    dims: [usize; 4],
    data: Vec<f64>,
}

impl Tensor4 {
    pub fn new(dims: [usize; 4], data: Vec<f64>) -> Result<Self> {
        let len = dims.iter().product();
        check_dim("data length", len, data.len())?;
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: [usize; 4]) -> Self {
        Self {
            dims,
            data: vec![0.0; dims.iter().product()],
        }
    }

    pub fn from_fn(dims: [usize; 4], mut f: impl FnMut([usize; 4]) -> f64) -> Self {
        let mut data = Vec::with_capacity(dims.iter().product());
        for n in 0..dims[0] {
            for c in 0..dims[1] {
                for y in 0..dims[2] {
                    for x in 0..dims[3] {
                        data.push(f([n, c, y, x]));
                    }
                }
            }
        }
        Self { dims, data }
    }

    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }

    pub fn batch(&self) -> usize {
        self.dims[0]
    }

    pub fn channels(&self) -> usize {
        self.dims[1]
    }

    pub fn height(&self) -> usize {
        self.dims[2]
    }

    pub fn width(&self) -> usize {
        self.dims[3]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn offset(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.dims[1] + c) * self.dims[2] + y) * self.dims[3] + x
    }

    #[inline]
    pub fn get(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.offset(n, c, y, x)]
    }

    /// Contiguous `(c, h, w)` block of one batch item.
    pub fn item(&self, n: usize) -> &[f64] {
        let len = self.dims[1] * self.dims[2] * self.dims[3];
        &self.data[n * len..(n + 1) * len]
    }

    pub fn item_mut(&mut self, n: usize) -> &mut [f64] {
        let len = self.dims[1] * self.dims[2] * self.dims[3];
        &mut self.data[n * len..(n + 1) * len]
    }

    /// Same data under new dims with equal element count.
    pub fn reshape(self, dims: [usize; 4]) -> Result<Self> {
        Self::new(dims, self.data)
    }

    /// Items `start..end` along the batch axis.
    pub fn batch_range(&self, start: usize, end: usize) -> Self {
        let len = self.dims[1] * self.dims[2] * self.dims[3];
        Self {
            dims: [end - start, self.dims[1], self.dims[2], self.dims[3]],
            data: self.data[start * len..end * len].to_vec(),
        }
    }

    /// Gathers batch items in the given order.
    pub fn select_batch(&self, indices: &[usize]) -> Self {
        let len = self.dims[1] * self.dims[2] * self.dims[3];
        let mut data = Vec::with_capacity(indices.len() * len);
        for &i in indices {
            data.extend_from_slice(self.item(i));
        }
        Self {
            dims: [indices.len(), self.dims[1], self.dims[2], self.dims[3]],
            data,
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            dims: self.dims,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, alpha: f64) -> Self {
        self.map(|v| alpha * v)
    }

    /// `self + alpha * other`.
    pub fn axpy(&self, alpha: f64, other: &Tensor4) -> Result<Self> {
        check_dim("dims", self.len(), other.len())?;
        Ok(Self {
            dims: self.dims,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a + alpha * b)
                .collect(),
        })
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Tensor4) -> f64 {
        assert_eq!(self.dims, other.dims);
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Kernel size, stride, zero padding and channel groups of a convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvGeometry {
    /// Square kernel.
    pub fn new(kernel: usize, stride: usize, padding: usize, groups: usize) -> Result<Self> {
        Self::with_kernel(kernel, kernel, stride, padding, groups)
    }

    pub fn with_kernel(
        kernel_h: usize,
        kernel_w: usize,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Self> {
        if kernel_h == 0 || kernel_w == 0 {
            return Err(Error::Geometry("kernel size must be positive".into()));
        }
        if stride == 0 {
            return Err(Error::Geometry("stride must be at least 1".into()));
        }
        if groups == 0 {
            return Err(Error::Geometry("groups must be at least 1".into()));
        }
        Ok(Self {
            kernel_h,
            kernel_w,
            stride,
            padding,
            groups,
        })
    }

    pub fn kernel_area(&self) -> usize {
        self.kernel_h * self.kernel_w
    }

    /// Output spatial size; zero-sized outputs are rejected.
    pub fn output_size(&self, in_h: usize, in_w: usize) -> Result<(usize, usize)> {
        let axis = |len: usize, k: usize, name: &str| {
            let padded = len + 2 * self.padding;
            if padded < k {
                return Err(Error::Geometry(format!(
                    "{name}: padded input {padded} smaller than kernel {k}"
                )));
            }
            Ok((padded - k) / self.stride + 1)
        };
        Ok((
            axis(in_h, self.kernel_h, "height")?,
            axis(in_w, self.kernel_w, "width")?,
        ))
    }

    pub fn with_groups(self, groups: usize) -> Self {
        Self { groups, ..self }
    }

    fn check_weight(&self, x: &Tensor4, weight: &Tensor4) -> Result<()> {
        let [out_ch, in_per_group, kh, kw] = weight.dims();
        check_dim("kernel height", self.kernel_h, kh)?;
        check_dim("kernel width", self.kernel_w, kw)?;
        check_dim("input channels", in_per_group * self.groups, x.channels())?;
        if out_ch % self.groups != 0 {
            return Err(Error::Geometry(format!(
                "output channels {out_ch} not divisible by groups {}",
                self.groups
            )));
        }
        Ok(())
    }
}

/// Direct convolution. `weight` is `(out_ch, in_ch / groups, k_h, k_w)`.
///
/// Each output element is accumulated from 0.0 in kernel-row, kernel-column,
/// channel order.
pub fn conv2d_reference(x: &Tensor4, weight: &Tensor4, geom: &ConvGeometry) -> Result<Tensor4> {
    geom.check_weight(x, weight)?;
    let [batch, _, in_h, in_w] = x.dims();
    let [out_ch, cg, kh_n, kw_n] = weight.dims();
    let (out_h, out_w) = geom.output_size(in_h, in_w)?;
    let og = out_ch / geom.groups;
    let (s, p) = (geom.stride as isize, geom.padding as isize);

    let mut out = Tensor4::zeros([batch, out_ch, out_h, out_w]);
    for n in 0..batch {
        for o in 0..out_ch {
            let g = o / og;
            for oy in 0..out_h {
                for ox in 0..out_w {
                    let mut acc = 0.0;
                    for kh in 0..kh_n {
                        let iy = oy as isize * s + kh as isize - p;
                        for kw in 0..kw_n {
                            let ix = ox as isize * s + kw as isize - p;
                            for c in 0..cg {
                                let v = if iy < 0
                                    || ix < 0
                                    || iy >= in_h as isize
                                    || ix >= in_w as isize
                                {
                                    0.0
                                } else {
                                    x.get(n, g * cg + c, iy as usize, ix as usize)
                                };
                                acc += v * weight.get(o, c, kh, kw);
                            }
                        }
                    }
                    let off = out.offset(n, o, oy, ox);
                    out.data[off] = acc;
                }
            }
        }
    }
    Ok(out)
}

/// Row ordering of an unfolded input.
#[derive(Clone, Copy, PartialEq, Eq)]
enum Unfold {
    /// `(kh, kw, c)` over all channels.
    OffsetMajor,
    /// `(g, kh, kw, c_in_group)`; identical to `OffsetMajor` for one group.
    GroupMajor,
}

/// Output columns `lo..hi` whose input column `ox * s + kw - p` lies in
/// `0..in_w`.
fn valid_columns(kw: usize, s: isize, p: isize, in_w: usize, out_w: usize) -> (usize, usize) {
    let off = kw as isize - p;
    let lo = ((-off).max(0) + s - 1) / s;
    let last = in_w as isize - 1 - off;
    let hi = if last < 0 {
        0
    } else {
        (last / s + 1).min(out_w as isize)
    };
    (lo.min(hi) as usize, hi as usize)
}

/// Writes one batch item's receptive fields into `cols`, rows per `order`,
/// one column per output position.
fn unfold_item(
    item: &[f64],
    channels: usize,
    in_h: usize,
    in_w: usize,
    geom: &ConvGeometry,
    out_h: usize,
    out_w: usize,
    order: Unfold,
    cols: &mut [f64],
) {
    let positions = out_h * out_w;
    let (kh_n, kw_n) = (geom.kernel_h, geom.kernel_w);
    let cg = channels / geom.groups;
    let (s, p) = (geom.stride as isize, geom.padding as isize);
    for c in 0..channels {
        let plane = &item[c * in_h * in_w..(c + 1) * in_h * in_w];
        let (g, ci) = (c / cg, c % cg);
        for kh in 0..kh_n {
            for kw in 0..kw_n {
                let row = match order {
                    Unfold::OffsetMajor => (kh * kw_n + kw) * channels + c,
                    Unfold::GroupMajor => ((g * kh_n + kh) * kw_n + kw) * cg + ci,
                };
                let dst = &mut cols[row * positions..(row + 1) * positions];
                for oy in 0..out_h {
                    let iy = oy as isize * s + kh as isize - p;
                    let line = &mut dst[oy * out_w..(oy + 1) * out_w];
                    if iy < 0 || iy >= in_h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * in_w..(iy as usize + 1) * in_w];
                    let (lo, hi) = valid_columns(kw, s, p, in_w, out_w);
                    let off = kw as isize - p;
                    line[..lo].fill(0.0);
                    line[hi..].fill(0.0);
                    if lo == hi {
                        continue;
                    }
                    if s == 1 {
                        let start = (lo as isize + off) as usize;
                        line[lo..hi].copy_from_slice(&src[start..start + hi - lo]);
                    } else {
                        for (ox, v) in (lo..hi).zip(&mut line[lo..hi]) {
                            *v = src[(ox as isize * s + off) as usize];
                        }
                    }
                }
            }
        }
    }
}

/// Group-major unfold of batch item `n` (rows `(g, kh, kw, c)`).
pub(crate) fn unfold_group_major(
    x: &Tensor4,
    n: usize,
    geom: &ConvGeometry,
    out_h: usize,
    out_w: usize,
    cols: &mut [f64],
) {
    let [_, channels, in_h, in_w] = x.dims();
    unfold_item(
        x.item(n),
        channels,
        in_h,
        in_w,
        geom,
        out_h,
        out_w,
        Unfold::GroupMajor,
        cols,
    );
}

/// Inverse of [`unfold_item`] with `GroupMajor` rows: scatter-adds `cols`
/// back onto an input-shaped buffer.
fn fold_item_add(
    cols: &[f64],
    channels: usize,
    in_h: usize,
    in_w: usize,
    geom: &ConvGeometry,
    out_h: usize,
    out_w: usize,
    item: &mut [f64],
) {
    let positions = out_h * out_w;
    let (kh_n, kw_n) = (geom.kernel_h, geom.kernel_w);
    let cg = channels / geom.groups;
    let (s, p) = (geom.stride as isize, geom.padding as isize);
    for c in 0..channels {
        let (g, ci) = (c / cg, c % cg);
        let plane = &mut item[c * in_h * in_w..(c + 1) * in_h * in_w];
        for kh in 0..kh_n {
            for kw in 0..kw_n {
                let row = ((g * kh_n + kh) * kw_n + kw) * cg + ci;
                let src = &cols[row * positions..(row + 1) * positions];
                for oy in 0..out_h {
                    let iy = oy as isize * s + kh as isize - p;
                    if iy < 0 || iy >= in_h as isize {
                        continue;
                    }
                    let (lo, hi) = valid_columns(kw, s, p, in_w, out_w);
                    let off = kw as isize - p;
                    let dst = &mut plane[iy as usize * in_w..(iy as usize + 1) * in_w];
                    if lo == hi {
                        continue;
                    }
                    let line = &src[oy * out_w + lo..oy * out_w + hi];
                    if s == 1 {
                        let start = (lo as isize + off) as usize;
                        for (d, v) in dst[start..start + hi - lo].iter_mut().zip(line) {
                            *d += v;
                        }
                    } else {
                        for (ox, v) in (lo..hi).zip(line) {
                            dst[(ox as isize * s + off) as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Materializes `x` at every kernel offset: the result has
/// `c * k_h * k_w` channels indexed `(kh, kw, c)` with `c` fastest, and one
/// spatial position per convolution output position.
pub fn gather_offsets(x: &Tensor4, geom: &ConvGeometry) -> Result<Tensor4> {
    let [batch, channels, in_h, in_w] = x.dims();
    if channels % geom.groups != 0 {
        return Err(Error::Geometry(format!(
            "input channels {channels} not divisible by groups {}",
            geom.groups
        )));
    }
    let (out_h, out_w) = geom.output_size(in_h, in_w)?;
    let expanded = channels * geom.kernel_area();
    let mut out = Tensor4::zeros([batch, expanded, out_h, out_w]);
    for n in 0..batch {
        unfold_item(
            x.item(n),
            channels,
            in_h,
            in_w,
            geom,
            out_h,
            out_w,
            Unfold::OffsetMajor,
            out.item_mut(n),
        );
    }
    Ok(out)
}

/// Pointwise (grouped) contraction of a [`gather_offsets`] result with a
/// convolution weight, summing kernel row, kernel column, then channel.
/// Bit-identical to [`conv2d_reference`] on the same operands.
pub fn contract_gathered(
    gathered: &Tensor4,
    weight: &Tensor4,
    geom: &ConvGeometry,
) -> Result<Tensor4> {
    let [batch, expanded, out_h, out_w] = gathered.dims();
    let [out_ch, cg, kh_n, kw_n] = weight.dims();
    check_dim("kernel height", geom.kernel_h, kh_n)?;
    check_dim("kernel width", geom.kernel_w, kw_n)?;
    let channels = cg * geom.groups;
    check_dim("expanded channels", channels * kh_n * kw_n, expanded)?;
    if out_ch % geom.groups != 0 {
        return Err(Error::Geometry(format!(
            "output channels {out_ch} not divisible by groups {}",
            geom.groups
        )));
    }
    let og = out_ch / geom.groups;
    let positions = out_h * out_w;
    let mut out = Tensor4::zeros([batch, out_ch, out_h, out_w]);
    for n in 0..batch {
        let src = gathered.item(n);
        for o in 0..out_ch {
            let g = o / og;
            for pos in 0..positions {
                let mut acc = 0.0;
                for kh in 0..kh_n {
                    for kw in 0..kw_n {
                        for c in 0..cg {
                            let row = (kh * kw_n + kw) * channels + g * cg + c;
                            acc += src[row * positions + pos] * weight.get(o, c, kh, kw);
                        }
                    }
                }
                out.item_mut(n)[o * positions + pos] = acc;
            }
        }
    }
    Ok(out)
}

/// Repacks `(out, cg, kh, kw)` weights to `(out, kh, kw, cg)` rows.
fn pack_weight(weight: &Tensor4) -> Vec<f64> {
    let [out_ch, cg, kh_n, kw_n] = weight.dims();
    let mut packed = vec![0.0; weight.len()];
    for o in 0..out_ch {
        for c in 0..cg {
            for kh in 0..kh_n {
                for kw in 0..kw_n {
                    packed[((o * kh_n + kh) * kw_n + kw) * cg + c] = weight.get(o, c, kh, kw);
                }
            }
        }
    }
    packed
}

fn unpack_weight(packed: &[f64], dims: [usize; 4]) -> Tensor4 {
    let [_, cg, kh_n, kw_n] = dims;
    Tensor4::from_fn(dims, |[o, c, kh, kw]| {
        packed[((o * kh_n + kh) * kw_n + kw) * cg + c]
    })
}

/// Unfold + GEMM convolution. Same contract as [`conv2d_reference`].
pub fn conv2d(x: &Tensor4, weight: &Tensor4, geom: &ConvGeometry) -> Result<Tensor4> {
    geom.check_weight(x, weight)?;
    let [batch, channels, in_h, in_w] = x.dims();
    let out_ch = weight.dims()[0];
    let (out_h, out_w) = geom.output_size(in_h, in_w)?;
    let positions = out_h * out_w;
    let rows_per_group = channels / geom.groups * geom.kernel_area();
    let og = out_ch / geom.groups;
    let packed = pack_weight(weight);

    let mut out = Tensor4::zeros([batch, out_ch, out_h, out_w]);
    let item_len = out_ch * positions;
    out.data
        .par_chunks_mut(item_len.max(1))
        .enumerate()
        .for_each_init(
            || vec![0.0; rows_per_group * geom.groups * positions],
            |cols, (n, dst)| {
                unfold_item(
                    x.item(n),
                    channels,
                    in_h,
                    in_w,
                    geom,
                    out_h,
                    out_w,
                    Unfold::GroupMajor,
                    cols,
                );
                for g in 0..geom.groups {
                    let a = MatRef::row_major(
                        &packed[g * og * rows_per_group..(g + 1) * og * rows_per_group],
                        og,
                        rows_per_group,
                    );
                    let b = MatRef::row_major(
                        &cols[g * rows_per_group * positions..(g + 1) * rows_per_group * positions],
                        rows_per_group,
                        positions,
                    );
                    gemm(
                        a,
                        b,
                        &mut dst[g * og * positions..(g + 1) * og * positions],
                        0.0,
                    );
                }
            },
        );
    Ok(out)
}

/// Gradients of `sum(conv2d(x, weight) * grad_out)` with respect to the input
/// and the weight. The input gradient is skipped when `need_input` is false.
/// Per-item weight gradients are reduced in batch order.
pub fn conv2d_backward(
    x: &Tensor4,
    weight: &Tensor4,
    geom: &ConvGeometry,
    grad_out: &Tensor4,
    need_input: bool,
) -> Result<(Option<Tensor4>, Tensor4)> {
    geom.check_weight(x, weight)?;
    let [batch, channels, in_h, in_w] = x.dims();
    let out_ch = weight.dims()[0];
    let (out_h, out_w) = geom.output_size(in_h, in_w)?;
    check_dim("batch", batch, grad_out.batch())?;
    check_dim("output channels", out_ch, grad_out.channels())?;
    check_dim("output height", out_h, grad_out.height())?;
    check_dim("output width", out_w, grad_out.width())?;

    let positions = out_h * out_w;
    let rows_per_group = channels / geom.groups * geom.kernel_area();
    let og = out_ch / geom.groups;
    let packed = pack_weight(weight);

    let per_item: Vec<(Option<Vec<f64>>, Vec<f64>)> = (0..batch)
        .into_par_iter()
        .map_init(
            || {
                let len = rows_per_group * geom.groups * positions;
                (
                    vec![0.0; len],
                    if need_input {
                        vec![0.0; len]
                    } else {
                        Vec::new()
                    },
                )
            },
            |(cols, dcols), n| {
                unfold_item(
                    x.item(n),
                    channels,
                    in_h,
                    in_w,
                    geom,
                    out_h,
                    out_w,
                    Unfold::GroupMajor,
                    cols,
                );
                let dy = grad_out.item(n);
                let mut dw = vec![0.0; packed.len()];
                for g in 0..geom.groups {
                    let dy_g = MatRef::row_major(
                        &dy[g * og * positions..(g + 1) * og * positions],
                        og,
                        positions,
                    );
                    let cols_g = MatRef::row_major(
                        &cols[g * rows_per_group * positions..(g + 1) * rows_per_group * positions],
                        rows_per_group,
                        positions,
                    );
                    gemm(
                        dy_g,
                        cols_g.t(),
                        &mut dw[g * og * rows_per_group..(g + 1) * og * rows_per_group],
                        0.0,
                    );
                    if need_input {
                        let w_g = MatRef::row_major(
                            &packed[g * og * rows_per_group..(g + 1) * og * rows_per_group],
                            og,
                            rows_per_group,
                        );
                        gemm(
                            w_g.t(),
                            dy_g,
                            &mut dcols[g * rows_per_group * positions
                                ..(g + 1) * rows_per_group * positions],
                            0.0,
                        );
                    }
                }
                let dx = need_input.then(|| {
                    let mut dx = vec![0.0; channels * in_h * in_w];
                    fold_item_add(dcols, channels, in_h, in_w, geom, out_h, out_w, &mut dx);
                    dx
                });
                (dx, dw)
            },
        )
        .collect();

    let mut dw_total = vec![0.0; packed.len()];
    let mut dx_total = need_input.then(|| Tensor4::zeros(x.dims()));
    for (n, (dx, dw)) in per_item.into_iter().enumerate() {
        for (acc, v) in dw_total.iter_mut().zip(&dw) {
            *acc += v;
        }
        if let (Some(total), Some(dx)) = (dx_total.as_mut(), dx) {
            total.item_mut(n).copy_from_slice(&dx);
        }
    }
    Ok((dx_total, unpack_weight(&dw_total, weight.dims())))
}

/// One neighbour of a bilinear sample: flat grid index (None when outside the
/// grid), interpolation weight, and the weight's partial derivatives with
/// respect to the sample row and column coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BilinearTap {
    pub index: Option<usize>,
    pub weight: f64,
    pub d_dy: f64,
    pub d_dx: f64,
}

/// The four taps used to sample a `rows x cols` grid at `(y, x)`.
pub fn bilinear_taps(rows: usize, cols: usize, y: f64, x: f64) -> [BilinearTap; 4] {
    let empty = BilinearTap {
        index: None,
        weight: 0.0,
        d_dy: 0.0,
        d_dx: 0.0,
    };
    if !(y.is_finite() && x.is_finite())
        || y <= -1.0
        || x <= -1.0
        || y >= rows as f64
        || x >= cols as f64
    {
        return [empty; 4];
    }
    let (y0, x0) = (y.floor(), x.floor());
    let (fy, fx) = (y - y0, x - x0);
    let (y0, x0) = (y0 as isize, x0 as isize);
    let at = |r: isize, c: isize| {
        (r >= 0 && c >= 0 && r < rows as isize && c < cols as isize)
            .then(|| r as usize * cols + c as usize)
    };
    [
        BilinearTap {
            index: at(y0, x0),
            weight: (1.0 - fy) * (1.0 - fx),
            d_dy: -(1.0 - fx),
            d_dx: -(1.0 - fy),
        },
        BilinearTap {
            index: at(y0, x0 + 1),
            weight: (1.0 - fy) * fx,
            d_dy: -fx,
            d_dx: 1.0 - fy,
        },
        BilinearTap {
            index: at(y0 + 1, x0),
            weight: fy * (1.0 - fx),
            d_dy: 1.0 - fx,
            d_dx: -fy,
        },
        BilinearTap {
            index: at(y0 + 1, x0 + 1),
            weight: fy * fx,
            d_dy: fx,
            d_dx: fy,
        },
    ]
}

/// Bilinear interpolation of a row-major `rows x cols` grid; neighbours
/// outside the grid read as zero.
pub fn bilinear_sample(map: &[f64], rows: usize, cols: usize, y: f64, x: f64) -> f64 {
    debug_assert_eq!(map.len(), rows * cols);
    bilinear_taps(rows, cols, y, x)
        .iter()
        .filter_map(|t| t.index.map(|i| t.weight * map[i]))
        .sum()
}

//! Convolution layer whose filters are spatial transformations of a small set
//! of templates.
//!
//! `M` of the `N` outputs ("identity outputs") are the templates themselves;
//! every other output `n` is built from template `mapping[n]` with one
//! transform per input-channel group. Templates are renumbered `0..M` in
//! ascending order of the original output index they came from. Identity
//! output `kept[j]` uses template `j`; the remaining outputs, taken in
//! ascending order, cycle through the templates (`rank mod M`), which reduces
//! to `n mod M` when the kept outputs are `0..M`.
//!
//! Two forward paths compute the same function:
//!
//! * [`TemplateConvLayer::forward_reference`] rebuilds the dense `(N, C, K, K)`
//!   weight and runs a plain convolution.
//! * [`TemplateConvLayer::forward_two_stage`] first contracts the input with
//!   the templates at every kernel offset (a grouped pointwise product over
//!   the unfolded input), then forms each output as a weighted sum of those
//!   per-offset template features. Only the scalar family takes this route;
//!   rotation and affine layers run the rebuilt weight, cached until a
//!   parameter changes.

use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rayon::prelude::*;

use crate::error::{check_dim, Error, Result};
use crate::gemm::{gemm, MatRef};
use crate::tensor::{
    conv2d, conv2d_backward, conv2d_reference, gather_offsets, ConvGeometry, Tensor4,
};
use crate::transforms::{
    apply_backward, apply_to_kernel, fit_scalar, KernelShape, SpatialTransform, TransformFamily,
};

/// Static description of a template layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TemplateConvConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
    pub family: TransformFamily,
    /// Allocate `G * M` templates (one per group) instead of `M` templates
    /// shared by every group.
    pub independent_group_templates: bool,
}

impl TemplateConvConfig {
    pub fn channels_per_group(&self) -> usize {
        self.in_channels / self.groups
    }

    /// Template tensors held for `m` templates.
    pub fn template_count(&self, m: usize) -> usize {
        if self.independent_group_templates {
            self.groups * m
        } else {
            m
        }
    }

    pub fn template_len(&self) -> usize {
        self.channels_per_group() * self.kernel * self.kernel
    }

    pub fn params_per_transform(&self) -> usize {
        self.family.param_count(self.kernel, self.kernel)
    }

    pub fn dense_geometry(&self) -> ConvGeometry {
        ConvGeometry {
            kernel_h: self.kernel,
            kernel_w: self.kernel,
            stride: self.stride,
            padding: self.padding,
            groups: 1,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.kernel == 0 || self.stride == 0 {
            return Err(Error::Geometry("kernel and stride must be positive".into()));
        }
        if self.groups == 0 || self.in_channels % self.groups != 0 {
            return Err(Error::Geometry(format!(
                "groups {} must divide input channels {}",
                self.groups, self.in_channels
            )));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::InvalidArgument(
                "channel counts must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Multiply-accumulates executed by the two-stage path.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MacCount {
    pub template_stage: u64,
    pub transform_stage: u64,
}

impl MacCount {
    pub fn total(&self) -> u64 {
        self.template_stage + self.transform_stage
    }
}

impl std::ops::AddAssign for MacCount {
    fn add_assign(&mut self, rhs: Self) {
        self.template_stage += rhs.template_stage;
        self.transform_stage += rhs.transform_stage;
    }
}

/// Wall time spent in each part of the two-stage path.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StageTimes {
    pub gather: Duration,
    pub template: Duration,
    pub transform: Duration,
    pub total: Duration,
}

/// Per-offset template features `(batch, G*M*K*K, H_out, W_out)`, channel axis
/// ordered `(g, m, kh, kw)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TemplateFeatures {
    pub z: Tensor4,
    pub groups: usize,
    pub templates: usize,
    pub kernel: usize,
}

/// Gradients returned by [`TemplateConvLayer::backward`].
#[derive(Debug, Clone)]
pub struct LayerGrads {
    pub input: Tensor4,
    /// Same layout as [`TemplateConvLayer::templates`].
    pub templates: Vec<f64>,
    /// Same layout as [`TemplateConvLayer::transform_params`].
    pub transforms: Vec<f64>,
    /// Gradient with respect to the rebuilt dense weight.
    pub weight: Tensor4,
}

#[derive(Debug)]
pub struct TemplateConvLayer {
    config: TemplateConvConfig,
    kept: Vec<usize>,
    mapping: Vec<usize>,
    /// Output index -> row in the transform table, `None` for identity outputs.
    slots: Vec<Option<usize>>,
    templates: Vec<f64>,
    transform_params: Vec<f64>,
    cache: OnceLock<Tensor4>,
}

impl Clone for TemplateConvLayer {
    fn clone(&self) -> Self {
        Self {
            config: self.config,
            kept: self.kept.clone(),
            mapping: self.mapping.clone(),
            slots: self.slots.clone(),
            templates: self.templates.clone(),
            transform_params: self.transform_params.clone(),
            cache: OnceLock::new(),
        }
    }
}

impl PartialEq for TemplateConvLayer {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.kept == other.kept
            && self.templates == other.templates
            && self.transform_params == other.transform_params
    }
}

/// Template assignment for `n_out` outputs given the ascending kept list.
fn assign_templates(n_out: usize, kept: &[usize]) -> (Vec<usize>, Vec<Option<usize>>) {
    let m = kept.len();
    let mut mapping = vec![0; n_out];
    let mut slots = vec![None; n_out];
    for (j, &k) in kept.iter().enumerate() {
        mapping[k] = j;
    }
    let mut rank = 0;
    for n in 0..n_out {
        if kept.binary_search(&n).is_err() {
            mapping[n] = rank % m;
            slots[n] = Some(rank);
            rank += 1;
        }
    }
    (mapping, slots)
}

fn normalize_kept(kept: &[usize], n_out: usize) -> Result<Vec<usize>> {
    if kept.is_empty() {
        return Err(Error::InvalidArgument(
            "at least one template is required".into(),
        ));
    }
    if kept.len() > n_out {
        return Err(Error::InvalidArgument(format!(
            "{} templates for {n_out} outputs",
            kept.len()
        )));
    }
    let mut sorted = kept.to_vec();
    sorted.sort_unstable();
    for w in sorted.windows(2) {
        if w[0] == w[1] {
            return Err(Error::InvalidArgument(format!(
                "duplicate template index {}",
                w[0]
            )));
        }
    }
    if let Some(&last) = sorted.last() {
        if last >= n_out {
            return Err(Error::InvalidArgument(format!(
                "template index {last} out of range for {n_out} outputs"
            )));
        }
    }
    Ok(sorted)
}

impl TemplateConvLayer {
    /// Assembles a layer from raw parameters. `kept` lists the identity
    /// outputs; `templates` holds `template_count(M)` kernels of
    /// `(C/G, K, K)`; `transform_params` holds `G` transforms for each
    /// non-identity output in ascending output order.
    pub fn from_parts(
        config: TemplateConvConfig,
        kept: &[usize],
        templates: Vec<f64>,
        transform_params: Vec<f64>,
    ) -> Result<Self> {
        config.validate()?;
        let kept = normalize_kept(kept, config.out_channels)?;
        let m = kept.len();
        check_dim(
            "templates",
            config.template_count(m) * config.template_len(),
            templates.len(),
        )?;
        check_dim(
            "transform parameters",
            (config.out_channels - m) * config.groups * config.params_per_transform(),
            transform_params.len(),
        )?;
        let (mapping, slots) = assign_templates(config.out_channels, &kept);
        Ok(Self {
            config,
            kept,
            mapping,
            slots,
            templates,
            transform_params,
            cache: OnceLock::new(),
        })
    }

    /// Layer with every transform at the family identity.
    pub fn with_identity_transforms(
        config: TemplateConvConfig,
        kept: &[usize],
        templates: Vec<f64>,
    ) -> Result<Self> {
        let identity = config.family.identity(config.kernel, config.kernel);
        let count = (config.out_channels.saturating_sub(kept.len())) * config.groups;
        let params = identity.params().repeat(count);
        Self::from_parts(config, kept, templates, params)
    }

    /// Converts a dense `(N, C, K, K)` layer. Kept filters become templates
    /// (their first group slice under shared templates, every group slice
    /// under independent templates). Pruned outputs get least-squares scalar
    /// fits per group against their original filter; rotation and affine
    /// transforms start at identity.
    pub fn from_dense(
        weight: &Tensor4,
        geom: &ConvGeometry,
        kept: &[usize],
        family: TransformFamily,
        groups: usize,
        independent_group_templates: bool,
    ) -> Result<Self> {
        let [n_out, channels, kh, kw] = weight.dims();
        if kh != kw {
            return Err(Error::Geometry(
                "template layers need square kernels".into(),
            ));
        }
        if geom.groups != 1 {
            return Err(Error::Geometry("source layer must be ungrouped".into()));
        }
        check_dim("kernel height", geom.kernel_h, kh)?;
        let config = TemplateConvConfig {
            in_channels: channels,
            out_channels: n_out,
            kernel: kh,
            stride: geom.stride,
            padding: geom.padding,
            groups,
            family,
            independent_group_templates,
        };
        config.validate()?;
        let kept = normalize_kept(kept, n_out)?;
        let cg = config.channels_per_group();
        let tlen = config.template_len();
        let filter = |n: usize, g: usize| {
            let start = (n * channels + g * cg) * kh * kw;
            &weight.as_slice()[start..start + tlen]
        };

        let mut templates = Vec::with_capacity(config.template_count(kept.len()) * tlen);
        if independent_group_templates {
            for g in 0..groups {
                for &k in &kept {
                    templates.extend_from_slice(filter(k, g));
                }
            }
        } else {
            for &k in &kept {
                templates.extend_from_slice(filter(k, 0));
            }
        }

        let mut layer = Self::with_identity_transforms(config, &kept, templates)?;
        if family == TransformFamily::Scalar {
            let shape = KernelShape::new(cg, kh, kw);
            let per = config.params_per_transform();
            for n in 0..n_out {
                let Some(slot) = layer.slots[n] else { continue };
                for g in 0..groups {
                    let fit = fit_scalar(layer.template(layer.mapping[n], g), filter(n, g), shape)?;
                    let start = (slot * groups + g) * per;
                    layer.transform_params[start..start + per].copy_from_slice(fit.params());
                }
            }
        }
        Ok(layer)
    }

    pub fn config(&self) -> &TemplateConvConfig {
        &self.config
    }

    pub fn family(&self) -> TransformFamily {
        self.config.family
    }

    pub fn in_channels(&self) -> usize {
        self.config.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.config.out_channels
    }

    pub fn kernel(&self) -> usize {
        self.config.kernel
    }

    pub fn groups(&self) -> usize {
        self.config.groups
    }

    pub fn num_templates(&self) -> usize {
        self.kept.len()
    }

    /// Original output indices of the templates, ascending. These are also
    /// the identity outputs.
    pub fn kept(&self) -> &[usize] {
        &self.kept
    }

    pub fn mapping(&self) -> &[usize] {
        &self.mapping
    }

    pub fn is_identity(&self, n: usize) -> bool {
        self.slots[n].is_none()
    }

    pub fn output_size(&self, in_h: usize, in_w: usize) -> Result<(usize, usize)> {
        self.config.dense_geometry().output_size(in_h, in_w)
    }

    pub fn templates(&self) -> &[f64] {
        &self.templates
    }

    pub fn transform_params(&self) -> &[f64] {
        &self.transform_params
    }

    pub fn templates_mut(&mut self) -> &mut [f64] {
        self.cache = OnceLock::new();
        &mut self.templates
    }

    pub fn transform_params_mut(&mut self) -> &mut [f64] {
        self.cache = OnceLock::new();
        &mut self.transform_params
    }

    /// Both parameter buffers at once; invalidates the cached weight.
    pub fn params_mut(&mut self) -> (&mut [f64], &mut [f64]) {
        self.cache = OnceLock::new();
        (&mut self.templates, &mut self.transform_params)
    }

    pub fn param_count(&self) -> usize {
        self.templates.len() + self.transform_params.len()
    }

    /// Template `m` as used by group `g`.
    pub fn template(&self, m: usize, g: usize) -> &[f64] {
        let len = self.config.template_len();
        let idx = if self.config.independent_group_templates {
            g * self.kept.len() + m
        } else {
            m
        };
        &self.templates[idx * len..(idx + 1) * len]
    }

    /// Transform applied to group `g` of output `n`; `None` for identity
    /// outputs.
    pub fn transform(&self, n: usize, g: usize) -> Option<SpatialTransform> {
        let slot = self.slots[n]?;
        let per = self.config.params_per_transform();
        let start = (slot * self.config.groups + g) * per;
        Some(
            self.config
                .family
                .from_params(
                    self.config.kernel,
                    self.config.kernel,
                    &self.transform_params[start..start + per],
                )
                .expect("parameter count checked at construction"),
        )
    }

    fn kernel_shape(&self) -> KernelShape {
        KernelShape::new(
            self.config.channels_per_group(),
            self.config.kernel,
            self.config.kernel,
        )
    }

    /// Dense `(N, C, K, K)` weight equivalent to this layer.
    pub fn reconstruct_filters(&self) -> Tensor4 {
        let cfg = &self.config;
        let (n_out, channels, k) = (cfg.out_channels, cfg.in_channels, cfg.kernel);
        let tlen = cfg.template_len();
        let shape = self.kernel_shape();
        let mut data = vec![0.0; n_out * channels * k * k];
        for n in 0..n_out {
            let m = self.mapping[n];
            for g in 0..cfg.groups {
                let dst = &mut data[(n * channels * k * k) + g * tlen..][..tlen];
                match self.transform(n, g) {
                    None => dst.copy_from_slice(self.template(m, g)),
                    Some(t) => dst.copy_from_slice(
                        &apply_to_kernel(self.template(m, g), shape, &t).expect("shapes validated"),
                    ),
                }
            }
        }
        Tensor4::new([n_out, channels, k, k], data).expect("dims consistent")
    }

    fn cached_filters(&self) -> &Tensor4 {
        self.cache.get_or_init(|| self.reconstruct_filters())
    }

    fn check_input(&self, x: &Tensor4) -> Result<()> {
        check_dim("input channels", self.config.in_channels, x.channels())
    }

    /// Rebuild the dense weight, then convolve with the direct reference loop.
    pub fn forward_reference(&self, x: &Tensor4) -> Result<Tensor4> {
        self.check_input(x)?;
        conv2d_reference(
            x,
            &self.reconstruct_filters(),
            &self.config.dense_geometry(),
        )
    }

    /// Two-stage forward pass.
    pub fn forward_two_stage(&self, x: &Tensor4) -> Result<Tensor4> {
        Ok(self.forward_two_stage_counted(x)?.0)
    }

    /// Two-stage forward pass plus the multiply-accumulates it executed.
    /// Non-scalar layers run the cached rebuilt weight; their count follows
    /// the accounting rule (templates at every offset, four bilinear taps per
    /// transformed kernel position).
    pub fn forward_two_stage_counted(&self, x: &Tensor4) -> Result<(Tensor4, MacCount)> {
        self.check_input(x)?;
        let geom = self.config.dense_geometry();
        let (out_h, out_w) = geom.output_size(x.height(), x.width())?;
        if self.config.family != TransformFamily::Scalar {
            let y = conv2d(x, self.cached_filters(), &geom)?;
            let count = self.accounted_macs(out_h * out_w);
            let batch = x.batch() as u64;
            return Ok((
                y,
                MacCount {
                    template_stage: count.template_stage * batch,
                    transform_stage: count.transform_stage * batch,
                },
            ));
        }
        let mut out = Tensor4::zeros([x.batch(), self.config.out_channels, out_h, out_w]);
        let item_len = self.config.out_channels * out_h * out_w;
        let counts: Vec<MacCount> = out
            .as_mut_slice()
            .par_chunks_mut(item_len.max(1))
            .enumerate()
            .map(|(n, dst)| self.two_stage_item(x, n, out_h, out_w, dst, None))
            .collect();
        let mut total = MacCount::default();
        for c in counts {
            total += c;
        }
        Ok((out, total))
    }

    /// Two-stage forward pass over the batch on the calling thread, timing
    /// each stage. Scalar family only.
    pub fn forward_two_stage_timed(&self, x: &Tensor4) -> Result<(Tensor4, StageTimes)> {
        self.check_input(x)?;
        if self.config.family != TransformFamily::Scalar {
            return Err(Error::InvalidArgument(
                "stage timing is only available for the scalar family".into(),
            ));
        }
        let start = Instant::now();
        let (out_h, out_w) = self.output_size(x.height(), x.width())?;
        let mut out = Tensor4::zeros([x.batch(), self.config.out_channels, out_h, out_w]);
        let item_len = self.config.out_channels * out_h * out_w;
        let mut times = StageTimes::default();
        for (n, dst) in out.as_mut_slice().chunks_mut(item_len.max(1)).enumerate() {
            self.two_stage_item(x, n, out_h, out_w, dst, Some(&mut times));
        }
        times.total = start.elapsed();
        Ok((out, times))
    }

    /// Runs both stages for batch item `n`, writing `(N, H_out, W_out)` into
    /// `dst`.
    fn two_stage_item(
        &self,
        x: &Tensor4,
        n: usize,
        out_h: usize,
        out_w: usize,
        dst: &mut [f64],
        mut times: Option<&mut StageTimes>,
    ) -> MacCount {
        let cfg = &self.config;
        let (groups, k) = (cfg.groups, cfg.kernel);
        let kk = k * k;
        let cg = cfg.channels_per_group();
        let m = self.kept.len();
        let positions = out_h * out_w;
        let mut count = MacCount::default();
        let mut clock = Instant::now();
        let mut lap = |slot: fn(&mut StageTimes) -> &mut Duration,
                       times: &mut Option<&mut StageTimes>| {
            if let Some(t) = times.as_deref_mut() {
                let now = Instant::now();
                *slot(t) += now - clock;
                clock = now;
            }
        };

        // Unfolded input, rows (g, kh, kw, c).
        let geom = ConvGeometry {
            kernel_h: k,
            kernel_w: k,
            stride: cfg.stride,
            padding: cfg.padding,
            groups,
        };
        let mut cols = vec![0.0; groups * kk * cg * positions];
        crate::tensor::unfold_group_major(x, n, &geom, out_h, out_w, &mut cols);
        lap(|t| &mut t.gather, &mut times);

        // Template features, rows (g, kh, kw, m).
        let mut z = vec![0.0; groups * kk * m * positions];
        let tlen = cfg.template_len();
        for g in 0..groups {
            let base = if cfg.independent_group_templates {
                g * m * tlen
            } else {
                0
            };
            for off in 0..kk {
                let a = MatRef::strided(&self.templates[base + off..], m, cg, tlen, kk);
                let row0 = (g * kk + off) * cg;
                let b = MatRef::row_major(
                    &cols[row0 * positions..(row0 + cg) * positions],
                    cg,
                    positions,
                );
                let zrow = (g * kk + off) * m;
                gemm(a, b, &mut z[zrow * positions..(zrow + m) * positions], 0.0);
                count.template_stage += (m * cg * positions) as u64;
            }
        }
        lap(|t| &mut t.template, &mut times);

        // Outputs as weighted sums of template features.
        let per = cfg.params_per_transform();
        for (out_n, y) in dst.chunks_exact_mut(positions.max(1)).enumerate() {
            let tm = self.mapping[out_n];
            let weights = self.slots[out_n]
                .map(|slot| &self.transform_params[slot * groups * per..(slot + 1) * groups * per]);
            for g in 0..groups {
                for off in 0..kk {
                    let src = &z[((g * kk + off) * m + tm) * positions..][..positions];
                    match weights {
                        None => y.iter_mut().zip(src).for_each(|(o, s)| *o += s),
                        Some(w) => {
                            let w = w[g * per + off];
                            y.iter_mut().zip(src).for_each(|(o, s)| *o += w * s);
                            count.transform_stage += positions as u64;
                        }
                    }
                }
            }
        }
        lap(|t| &mut t.transform, &mut times);
        count
    }

    /// MAC count by the accounting rule, per image, for `positions` output
    /// positions.
    fn accounted_macs(&self, positions: usize) -> MacCount {
        let cfg = &self.config;
        let kk = (cfg.kernel * cfg.kernel) as u64;
        let (p, m, n) = (
            positions as u64,
            self.kept.len() as u64,
            cfg.out_channels as u64,
        );
        let g = cfg.groups as u64;
        let cg = cfg.channels_per_group() as u64;
        MacCount {
            template_stage: p * kk * cg * m * g,
            transform_stage: p * kk * g * (n - m) * cfg.family.macs_per_position() as u64,
        }
    }

    /// MACs of one forward pass on a single `h_in x w_in` image, measured by
    /// running the instrumented two-stage path (scalar family) or by the
    /// accounting rule (other families).
    pub fn count_macs(&self, h_in: usize, w_in: usize) -> Result<MacCount> {
        let (out_h, out_w) = self.output_size(h_in, w_in)?;
        if self.config.family != TransformFamily::Scalar {
            return Ok(self.accounted_macs(out_h * out_w));
        }
        let probe = Tensor4::zeros([1, self.config.in_channels, h_in, w_in]);
        Ok(self.forward_two_stage_counted(&probe)?.1)
    }

    /// Stage-one output in `(g, m, kh, kw)` channel order.
    pub fn template_features(&self, x: &Tensor4) -> Result<TemplateFeatures> {
        self.check_input(x)?;
        let cfg = &self.config;
        let geom = ConvGeometry {
            kernel_h: cfg.kernel,
            kernel_w: cfg.kernel,
            stride: cfg.stride,
            padding: cfg.padding,
            groups: cfg.groups,
        };
        let gathered = gather_offsets(x, &geom)?;
        let [batch, _, out_h, out_w] = gathered.dims();
        let (groups, k, m, cg) = (
            cfg.groups,
            cfg.kernel,
            self.kept.len(),
            cfg.channels_per_group(),
        );
        let positions = out_h * out_w;
        let channels = cfg.in_channels;
        let mut z = Tensor4::zeros([batch, groups * m * k * k, out_h, out_w]);
        for b in 0..batch {
            let src = gathered.item(b);
            let dst = z.item_mut(b);
            for g in 0..groups {
                for tm in 0..m {
                    let tpl = self.template(tm, g);
                    for kh in 0..k {
                        for kw in 0..k {
                            let ch = ((g * m + tm) * k + kh) * k + kw;
                            for pos in 0..positions {
                                let mut acc = 0.0;
                                for c in 0..cg {
                                    let row = (kh * k + kw) * channels + g * cg + c;
                                    acc += src[row * positions + pos] * tpl[(c * k + kh) * k + kw];
                                }
                                dst[ch * positions + pos] = acc;
                            }
                        }
                    }
                }
            }
        }
        Ok(TemplateFeatures {
            z,
            groups,
            templates: m,
            kernel: k,
        })
    }

    /// Gradients of `sum(forward(x) * upstream)`.
    pub fn backward(&self, x: &Tensor4, upstream: &Tensor4) -> Result<LayerGrads> {
        self.backward_inner(x, upstream, true)
    }

    /// Like [`backward`](Self::backward); the input gradient is left at zero
    /// when `need_input` is false.
    pub fn backward_inner(
        &self,
        x: &Tensor4,
        upstream: &Tensor4,
        need_input: bool,
    ) -> Result<LayerGrads> {
        self.check_input(x)?;
        let weight = self.cached_filters();
        let (dx, dw) = conv2d_backward(
            x,
            weight,
            &self.config.dense_geometry(),
            upstream,
            need_input,
        )?;
        let (templates, transforms) = self.chain_weight_grad(&dw)?;
        Ok(LayerGrads {
            input: dx.unwrap_or_else(|| Tensor4::zeros(x.dims())),
            templates,
            transforms,
            weight: dw,
        })
    }

    /// Pulls a gradient on the rebuilt dense weight back onto templates and
    /// transform parameters.
    pub fn chain_weight_grad(&self, dw: &Tensor4) -> Result<(Vec<f64>, Vec<f64>)> {
        let cfg = &self.config;
        check_dim(
            "weight gradient",
            cfg.out_channels * cfg.in_channels * cfg.kernel * cfg.kernel,
            dw.len(),
        )?;
        let tlen = cfg.template_len();
        let per = cfg.params_per_transform();
        let m = self.kept.len();
        let shape = self.kernel_shape();
        let mut g_templates = vec![0.0; self.templates.len()];
        let mut g_transforms = vec![0.0; self.transform_params.len()];
        let filter_len = cfg.in_channels * cfg.kernel * cfg.kernel;
        for n in 0..cfg.out_channels {
            let tm = self.mapping[n];
            for g in 0..cfg.groups {
                let slice = &dw.as_slice()[n * filter_len + g * tlen..][..tlen];
                let idx = if cfg.independent_group_templates {
                    g * m + tm
                } else {
                    tm
                };
                let dst = &mut g_templates[idx * tlen..(idx + 1) * tlen];
                match (self.slots[n], self.transform(n, g)) {
                    (Some(slot), Some(t)) => {
                        let (gt, gp) = apply_backward(self.template(tm, g), shape, &t, slice)?;
                        dst.iter_mut().zip(&gt).for_each(|(a, b)| *a += b);
                        let start = (slot * cfg.groups + g) * per;
                        g_transforms[start..start + per].copy_from_slice(&gp);
                    }
                    _ => dst.iter_mut().zip(slice).for_each(|(a, b)| *a += b),
                }
            }
        }
        Ok((g_templates, g_transforms))
    }
}

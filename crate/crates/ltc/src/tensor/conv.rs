//! 3D convolution geometry, causal kernel masks and the raw compute kernels
//! shared by the tape ops.
//!
//! Padding follows the "same" rule: `out = ceil(in / stride)` per axis, with
//! the total pad `(out - 1) * stride + kernel - in` split so the extra tap
//! lands on the leading side. For every stride-divisible extent this reduces
//! to `(kernel - stride) / 2` on each side, which is what turns 16x256x256
//! into 8x64x64 and then 4x32x32 under the default stage specs.

use super::{strides_of, worker_pool, Result, Scalar, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// ceil(in/stride) outputs, extra pad tap on the leading side.
    Same,
    /// `[lead, trail]` per (t, h, w) axis.
    Explicit([[usize; 2]; 3]),
}

/// Geometry of one convolution: kernel/stride/padding in (t, h, w) order
/// plus the channel fan. For `conv_transpose3d` the same spec is read in
/// reverse: the transpose consumes `out_channels` and emits `in_channels`,
/// inverting the extent arithmetic of the forward direction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: Padding,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl ConvSpec {
    pub fn same(kernel: [usize; 3], stride: [usize; 3], in_channels: usize, out_channels: usize) -> Self {
        ConvSpec { kernel, stride, padding: Padding::Same, in_channels, out_channels }
    }

    /// 1x1x1 stride-1 pointwise convolution.
    pub fn pointwise(in_channels: usize, out_channels: usize) -> Self {
        ConvSpec::same([1, 1, 1], [1, 1, 1], in_channels, out_channels)
    }

    pub fn validate(&self) -> Result<()> {
        for axis in 0..3 {
            if self.kernel[axis] == 0 || self.stride[axis] == 0 {
                return Err(TensorError::BadConv(format!(
                    "kernel {:?} / stride {:?} must be >= 1 on every axis",
                    self.kernel, self.stride
                )));
            }
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(TensorError::BadConv("channel counts must be >= 1".into()));
        }
        Ok(())
    }

    /// `[lead, trail]` pads per axis for a given input extent.
    pub fn pads(&self, input: [usize; 3]) -> [[usize; 2]; 3] {
        match self.padding {
            Padding::Explicit(p) => p,
            Padding::Same => {
                let mut pads = [[0usize; 2]; 3];
                for axis in 0..3 {
                    let (k, s, n) = (self.kernel[axis], self.stride[axis], input[axis]);
                    let out = n.div_ceil(s);
                    let total = ((out - 1) * s + k).saturating_sub(n);
                    pads[axis] = [total.div_ceil(2), total / 2];
                }
                pads
            }
        }
    }

    /// Output extents of the forward convolution:
    /// `out = floor((in + lead + trail - kernel) / stride) + 1`.
    pub fn out_extents(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        self.validate()?;
        let pads = self.pads(input);
        let mut out = [0usize; 3];
        for axis in 0..3 {
            let padded = input[axis] + pads[axis][0] + pads[axis][1];
            if padded < self.kernel[axis] {
                return Err(TensorError::BadConv(format!(
                    "axis {}: padded extent {} is smaller than kernel {}",
                    axis, padded, self.kernel[axis]
                )));
            }
            out[axis] = (padded - self.kernel[axis]) / self.stride[axis] + 1;
        }
        Ok(out)
    }

    /// Extents produced by the transposed direction; inverts `out_extents`
    /// for every stride-divisible input, and equals `in * stride` under
    /// `Padding::Same`.
    pub fn transpose_out_extents(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        self.validate()?;
        match self.padding {
            Padding::Same => Ok([
                input[0] * self.stride[0],
                input[1] * self.stride[1],
                input[2] * self.stride[2],
            ]),
            Padding::Explicit(p) => {
                let mut out = [0usize; 3];
                for axis in 0..3 {
                    let grown = (input[axis] - 1) * self.stride[axis] + self.kernel[axis];
                    let pad = p[axis][0] + p[axis][1];
                    if grown <= pad {
                        return Err(TensorError::BadConv(format!(
                            "axis {}: transpose extent would be non-positive",
                            axis
                        )));
                    }
                    out[axis] = grown - pad;
                }
                Ok(out)
            }
        }
    }

    pub fn taps(&self) -> usize {
        self.kernel[0] * self.kernel[1] * self.kernel[2]
    }

    /// Weight tensor shape: `(out_channels, kt, kh, kw, in_channels)`.
    pub fn weight_shape(&self) -> Vec<usize> {
        vec![self.out_channels, self.kernel[0], self.kernel[1], self.kernel[2], self.in_channels]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskKind {
    SpatialA,
    SpatialB,
    TemporalPast,
    Combined,
}

/// Boolean kernel mask that restricts a convolution to already-generated
/// positions. Tap offsets are taken relative to the stride-1 "same" center,
/// i.e. tap j maps to offset `j - ceil((k - 1) / 2)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CausalMask {
    pub kind: MaskKind,
    kernel: [usize; 3],
    active: Vec<bool>,
}

fn center_tap(extent: usize) -> isize {
    ((extent - 1) / 2 + (extent - 1) % 2) as isize
}

impl CausalMask {
    fn build(kind: MaskKind, kernel: [usize; 3], rule: impl Fn(isize, isize, isize) -> bool) -> Self {
        let centers = [center_tap(kernel[0]), center_tap(kernel[1]), center_tap(kernel[2])];
        let mut active = Vec::with_capacity(kernel[0] * kernel[1] * kernel[2]);
        for kt in 0..kernel[0] {
            for kh in 0..kernel[1] {
                for kw in 0..kernel[2] {
                    let dt = kt as isize - centers[0];
                    let dy = kh as isize - centers[1];
                    let dx = kw as isize - centers[2];
                    active.push(rule(dt, dy, dx));
                }
            }
        }
        CausalMask { kind, kernel, active }
    }

    /// Strictly earlier in spatial raster order; the center tap is masked.
    /// Time offsets are not constrained (meant for kernels of time extent 1).
    pub fn spatial_a(kernel: [usize; 3]) -> Self {
        Self::build(MaskKind::SpatialA, kernel, |_, dy, dx| dy < 0 || (dy == 0 && dx < 0))
    }

    /// Spatial raster order up to and including the center tap.
    pub fn spatial_b(kernel: [usize; 3]) -> Self {
        Self::build(MaskKind::SpatialB, kernel, |_, dy, dx| dy < 0 || (dy == 0 && dx <= 0))
    }

    /// Strictly earlier timesteps only; current and future time offsets are
    /// zeroed, regardless of spatial offset.
    pub fn temporal_past(kernel: [usize; 3]) -> Self {
        Self::build(MaskKind::TemporalPast, kernel, |dt, _, _| dt < 0)
    }

    /// Full raster-time causality: past timesteps freely, the current
    /// timestep restricted to the spatial-A (or spatial-B when
    /// `include_center`) region.
    pub fn combined(kernel: [usize; 3], include_center: bool) -> Self {
        Self::build(MaskKind::Combined, kernel, |dt, dy, dx| {
            dt < 0 || (dt == 0 && (dy < 0 || (dy == 0 && (dx < 0 || (include_center && dx == 0)))))
        })
    }

    /// Arbitrary tap pattern; used by test fixtures that deliberately break
    /// causality to prove the probes can see the leak.
    pub fn from_taps(kind: MaskKind, kernel: [usize; 3], active: Vec<bool>) -> Result<Self> {
        if active.len() != kernel[0] * kernel[1] * kernel[2] {
            return Err(TensorError::MaskShape { mask: kernel, kernel });
        }
        Ok(CausalMask { kind, kernel, active })
    }

    pub fn kernel(&self) -> [usize; 3] {
        self.kernel
    }

    pub fn active(&self) -> &[bool] {
        &self.active
    }

    pub fn active_count(&self) -> usize {
        self.active.iter().filter(|&&a| a).count()
    }

    pub fn is_active(&self, kt: usize, kh: usize, kw: usize) -> bool {
        self.active[(kt * self.kernel[1] + kh) * self.kernel[2] + kw]
    }

    pub fn matches(&self, spec: &ConvSpec) -> Result<()> {
        if self.kernel != spec.kernel {
            return Err(TensorError::MaskShape { mask: self.kernel, kernel: spec.kernel });
        }
        Ok(())
    }
}

/// Tap list with precomputed offsets; masked-out taps are skipped entirely so
/// excluded inputs can never perturb an output, even at the bit level.
struct TapPlan {
    taps: Vec<[usize; 3]>,
}

fn plan_taps(spec: &ConvSpec, mask: Option<&CausalMask>) -> TapPlan {
    let mut taps = Vec::with_capacity(spec.taps());
    for kt in 0..spec.kernel[0] {
        for kh in 0..spec.kernel[1] {
            for kw in 0..spec.kernel[2] {
                let keep = mask.map(|m| m.is_active(kt, kh, kw)).unwrap_or(true);
                if keep {
                    taps.push([kt, kh, kw]);
                }
            }
        }
    }
    TapPlan { taps }
}

fn run_parallel<F: Fn(usize, &mut [S]) + Sync, S: Scalar>(out: &mut [S], chunk: usize, f: F) {
    debug_assert_eq!(out.len() % chunk.max(1), 0);
    match worker_pool() {
        Some(pool) => pool.install(|| {
            use rayon::prelude::*;
            out.par_chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
        }),
        None => {
            for (i, c) in out.chunks_mut(chunk).enumerate() {
                f(i, c);
            }
        }
    }
}

pub(crate) struct ConvShapes {
    pub in_ext: [usize; 3],
    pub out_ext: [usize; 3],
    pub pads: [[usize; 2]; 3],
}

pub(crate) fn conv_shapes(spec: &ConvSpec, input_shape: &[usize]) -> Result<ConvShapes> {
    if input_shape.len() != 4 {
        return Err(TensorError::ShapeMismatch {
            op: "conv3d",
            detail: format!("expected rank-4 (t,h,w,c) input, got {:?}", input_shape),
        });
    }
    if input_shape[3] != spec.in_channels {
        return Err(TensorError::ShapeMismatch {
            op: "conv3d",
            detail: format!("input has {} channels, spec wants {}", input_shape[3], spec.in_channels),
        });
    }
    let in_ext = [input_shape[0], input_shape[1], input_shape[2]];
    let out_ext = spec.out_extents(in_ext)?;
    Ok(ConvShapes { in_ext, out_ext, pads: spec.pads(in_ext) })
}

pub(crate) fn check_weight_shape(spec: &ConvSpec, shape: &[usize]) -> Result<()> {
    if shape != spec.weight_shape().as_slice() {
        return Err(TensorError::ShapeMismatch {
            op: "conv3d",
            detail: format!("weights shaped {:?}, spec wants {:?}", shape, spec.weight_shape()),
        });
    }
    Ok(())
}

/// Forward convolution. `x` is (T,H,W,Cin), `w` is (Cout,kt,kh,kw,Cin);
/// returns (T',H',W',Cout) data.
pub(crate) fn conv3d_forward<S: Scalar>(
    x: &[S],
    shapes: &ConvShapes,
    spec: &ConvSpec,
    w: &[S],
    mask: Option<&CausalMask>,
) -> Vec<S> {
    let plan = plan_taps(spec, mask);
    let (ci, co) = (spec.in_channels, spec.out_channels);
    let [it_ext, ih_ext, iw_ext] = shapes.in_ext;
    let [ot_ext, oh_ext, ow_ext] = shapes.out_ext;
    let in_strides = strides_of(&[it_ext, ih_ext, iw_ext, ci]);
    let w_strides = strides_of(&spec.weight_shape());
    let mut out = vec![S::zero(); ot_ext * oh_ext * ow_ext * co];

    run_parallel(&mut out, co, |vox, out_row| {
        let ow = vox % ow_ext;
        let oh = (vox / ow_ext) % oh_ext;
        let ot = vox / (ow_ext * oh_ext);
        for tap in &plan.taps {
            let it = (ot * spec.stride[0] + tap[0]) as isize - shapes.pads[0][0] as isize;
            let ih = (oh * spec.stride[1] + tap[1]) as isize - shapes.pads[1][0] as isize;
            let iw = (ow * spec.stride[2] + tap[2]) as isize - shapes.pads[2][0] as isize;
            if it < 0 || ih < 0 || iw < 0 {
                continue;
            }
            let (it, ih, iw) = (it as usize, ih as usize, iw as usize);
            if it >= it_ext || ih >= ih_ext || iw >= iw_ext {
                continue;
            }
            let x_base = it * in_strides[0] + ih * in_strides[1] + iw * in_strides[2];
            let x_row = &x[x_base..x_base + ci];
            let tap_base = tap[0] * w_strides[1] + tap[1] * w_strides[2] + tap[2] * w_strides[3];
            for (c, out_v) in out_row.iter_mut().enumerate() {
                let w_row = &w[c * w_strides[0] + tap_base..c * w_strides[0] + tap_base + ci];
                let mut acc = S::zero();
                for (wv, xv) in w_row.iter().zip(x_row.iter()) {
                    acc = acc + *wv * *xv;
                }
                *out_v = *out_v + acc;
            }
        }
    });
    out
}

/// Adjoint of `conv3d_forward` in its input argument: scatters `y` (shaped
/// like the conv output, channels `Cout`) back through the kernel, producing
/// a grid shaped like the conv input (channels `Cin`). This one function is
/// both the transposed convolution's forward pass and the convolution's
/// input gradient.
pub(crate) fn conv3d_adjoint_input<S: Scalar>(
    y: &[S],
    shapes: &ConvShapes,
    spec: &ConvSpec,
    w: &[S],
    mask: Option<&CausalMask>,
) -> Vec<S> {
    let plan = plan_taps(spec, mask);
    let (ci, co) = (spec.in_channels, spec.out_channels);
    let [it_ext, ih_ext, iw_ext] = shapes.in_ext;
    let [ot_ext, oh_ext, ow_ext] = shapes.out_ext;
    let out_strides = strides_of(&[ot_ext, oh_ext, ow_ext, co]);
    let w_strides = strides_of(&spec.weight_shape());
    let mut dx = vec![S::zero(); it_ext * ih_ext * iw_ext * ci];

    run_parallel(&mut dx, ci, |vox, dx_row| {
        let iw = vox % iw_ext;
        let ih = (vox / iw_ext) % ih_ext;
        let it = vox / (iw_ext * ih_ext);
        for tap in &plan.taps {
            // invert it = ot*stride + tap - lead
            let num_t = it as isize + shapes.pads[0][0] as isize - tap[0] as isize;
            let num_h = ih as isize + shapes.pads[1][0] as isize - tap[1] as isize;
            let num_w = iw as isize + shapes.pads[2][0] as isize - tap[2] as isize;
            if num_t < 0 || num_h < 0 || num_w < 0 {
                continue;
            }
            let (num_t, num_h, num_w) = (num_t as usize, num_h as usize, num_w as usize);
            if num_t % spec.stride[0] != 0 || num_h % spec.stride[1] != 0 || num_w % spec.stride[2] != 0 {
                continue;
            }
            let (ot, oh, ow) = (num_t / spec.stride[0], num_h / spec.stride[1], num_w / spec.stride[2]);
            if ot >= ot_ext || oh >= oh_ext || ow >= ow_ext {
                continue;
            }
            let y_base = ot * out_strides[0] + oh * out_strides[1] + ow * out_strides[2];
            let tap_base = tap[0] * w_strides[1] + tap[1] * w_strides[2] + tap[2] * w_strides[3];
            for c_out in 0..co {
                let g = y[y_base + c_out];
                let w_row = &w[c_out * w_strides[0] + tap_base..c_out * w_strides[0] + tap_base + ci];
                for (dv, wv) in dx_row.iter_mut().zip(w_row.iter()) {
                    *dv = *dv + *wv * g;
                }
            }
        }
    });
    dx
}

/// Weight gradient of the convolution: `dw[c,tap,ci] = sum_vox dy[vox,c] * x[vox@tap,ci]`.
/// Masked taps receive exactly zero. Parallel over output channels.
pub(crate) fn conv3d_weight_grad<S: Scalar>(
    x: &[S],
    dy: &[S],
    shapes: &ConvShapes,
    spec: &ConvSpec,
    mask: Option<&CausalMask>,
) -> Vec<S> {
    let plan = plan_taps(spec, mask);
    let (ci, co) = (spec.in_channels, spec.out_channels);
    let [it_ext, ih_ext, iw_ext] = shapes.in_ext;
    let [ot_ext, oh_ext, ow_ext] = shapes.out_ext;
    let in_strides = strides_of(&[it_ext, ih_ext, iw_ext, ci]);
    let w_strides = strides_of(&spec.weight_shape());
    let mut dw = vec![S::zero(); spec.weight_shape().iter().product()];

    run_parallel(&mut dw, w_strides[0], |c_out, dw_slab| {
        for ot in 0..ot_ext {
            for oh in 0..oh_ext {
                for ow in 0..ow_ext {
                    let g = dy[((ot * oh_ext + oh) * ow_ext + ow) * co + c_out];
                    if g == S::zero() {
                        continue;
                    }
                    for tap in &plan.taps {
                        let it = (ot * spec.stride[0] + tap[0]) as isize - shapes.pads[0][0] as isize;
                        let ih = (oh * spec.stride[1] + tap[1]) as isize - shapes.pads[1][0] as isize;
                        let iw = (ow * spec.stride[2] + tap[2]) as isize - shapes.pads[2][0] as isize;
                        if it < 0 || ih < 0 || iw < 0 {
                            continue;
                        }
                        let (it, ih, iw) = (it as usize, ih as usize, iw as usize);
                        if it >= it_ext || ih >= ih_ext || iw >= iw_ext {
                            continue;
                        }
                        let x_base = it * in_strides[0] + ih * in_strides[1] + iw * in_strides[2];
                        let tap_base =
                            tap[0] * w_strides[1] + tap[1] * w_strides[2] + tap[2] * w_strides[3];
                        let dw_row = &mut dw_slab[tap_base..tap_base + ci];
                        let x_row = &x[x_base..x_base + ci];
                        for (dv, xv) in dw_row.iter_mut().zip(x_row.iter()) {
                            *dv = *dv + g * *xv;
                        }
                    }
                }
            }
        }
    });
    dw
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_padding_reproduces_stage_arithmetic() {
        let stage1 = ConvSpec::same([4, 8, 8], [2, 4, 4], 3, 8);
        assert_eq!(stage1.out_extents([16, 256, 256]).unwrap(), [8, 64, 64]);
        assert_eq!(stage1.pads([16, 256, 256]), [[1, 1], [2, 2], [2, 2]]);

        let stage2 = ConvSpec::same([4, 4, 4], [2, 2, 2], 8, 8);
        assert_eq!(stage2.out_extents([8, 64, 64]).unwrap(), [4, 32, 32]);
    }

    #[test]
    fn same_padding_handles_short_inputs() {
        // Conditioning prefixes shorter than a kernel still produce one slice.
        let stage2 = ConvSpec::same([4, 4, 4], [2, 2, 2], 8, 8);
        assert_eq!(stage2.out_extents([1, 8, 8]).unwrap(), [1, 4, 4]);
        assert_eq!(stage2.pads([1, 8, 8])[0], [2, 1]);
    }

    #[test]
    fn transpose_extents_invert_forward_extents() {
        let stage1 = ConvSpec::same([4, 8, 8], [2, 4, 4], 3, 8);
        assert_eq!(stage1.transpose_out_extents([8, 64, 64]).unwrap(), [16, 256, 256]);
        let stage2 = ConvSpec::same([4, 4, 4], [2, 2, 2], 8, 8);
        assert_eq!(stage2.transpose_out_extents([4, 32, 32]).unwrap(), [8, 64, 64]);
    }

    #[test]
    fn spatial_a_mask_on_3x3_has_four_active_taps() {
        let m = CausalMask::spatial_a([1, 3, 3]);
        assert_eq!(m.active_count(), 4);
        assert!(!m.is_active(0, 1, 1), "center tap must be masked");
        assert!(!m.is_active(0, 1, 2));
        assert!(!m.is_active(0, 2, 0));
        assert!(m.is_active(0, 0, 2), "up-right diagonal is allowed");
        assert!(m.is_active(0, 1, 0));
    }

    #[test]
    fn spatial_b_mask_permits_the_center_tap() {
        let m = CausalMask::spatial_b([1, 3, 3]);
        assert_eq!(m.active_count(), 5);
        assert!(m.is_active(0, 1, 1));
    }

    #[test]
    fn temporal_past_mask_keeps_only_strictly_earlier_offsets() {
        // Extent-4 time axis centers at tap 2: offsets -2,-1,0,+1.
        let m = CausalMask::temporal_past([4, 1, 1]);
        assert_eq!(m.active_count(), 2);
        assert!(m.is_active(0, 0, 0));
        assert!(m.is_active(1, 0, 0));
        assert!(!m.is_active(2, 0, 0));
        assert!(!m.is_active(3, 0, 0));
    }

    #[test]
    fn combined_mask_splits_on_time_then_raster() {
        let m = CausalMask::combined([3, 3, 3], false);
        // Past slice fully active, current slice spatial-A, future slice dark.
        assert_eq!(m.active_count(), 9 + 4);
        assert!(m.is_active(0, 2, 2));
        assert!(!m.is_active(1, 1, 1));
        assert!(!m.is_active(2, 0, 0));
        let mb = CausalMask::combined([3, 3, 3], true);
        assert_eq!(mb.active_count(), 9 + 5);
        assert!(mb.is_active(1, 1, 1));
    }
}

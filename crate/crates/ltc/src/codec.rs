//! Hierarchical two-level video autoencoder: strided 3D encoder stages,
//! per-level quantization, and a decoder that concatenates the bottom
//! embeddings with the upsampled top embeddings before expanding back to
//! pixels. During training the bottom half of that concatenation is randomly
//! zeroed so the top level keeps carrying global structure.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::layers::ResBlock;
use crate::params::{ParamBinding, ParamId, ParamStore};
use crate::tensor::{ConvSpec, Result, Scalar, Tape, Tensor, TensorError, Var};
use crate::vq::{straight_through, vq_losses, Codebook, VqOutput};

/// T x H x W x 3 frames in `[0, 1]` plus frame-rate metadata.
#[derive(Debug, Clone)]
pub struct VideoClip<S: Scalar> {
    frames: Tensor<S>,
    pub fps: f32,
}

impl<S: Scalar> VideoClip<S> {
    /// Wraps a frame tensor, clamping every value into `[0, 1]`.
    pub fn new(mut frames: Tensor<S>, fps: f32) -> Result<Self> {
        if frames.shape().len() != 4 || frames.shape()[3] != 3 {
            return Err(TensorError::ShapeMismatch {
                op: "VideoClip::new",
                detail: format!("expected (t, h, w, 3), got {:?}", frames.shape()),
            });
        }
        for v in frames.data_mut() {
            *v = v.max(S::zero()).min(S::one());
        }
        Ok(VideoClip { frames, fps })
    }

    pub fn frames(&self) -> &Tensor<S> {
        &self.frames
    }

    pub fn extents(&self) -> [usize; 3] {
        [self.frames.shape()[0], self.frames.shape()[1], self.frames.shape()[2]]
    }

    pub fn frame_count(&self) -> usize {
        self.frames.shape()[0]
    }

    /// First `count` frames as a new clip; the conditioning prefix.
    pub fn prefix(&self, count: usize) -> Result<VideoClip<S>> {
        let [t, h, w] = self.extents();
        if count == 0 || count > t {
            return Err(TensorError::ShapeMismatch {
                op: "VideoClip::prefix",
                detail: format!("prefix {} of {} frames", count, t),
            });
        }
        let per_frame = h * w * 3;
        let data = self.frames.data()[..count * per_frame].to_vec();
        Ok(VideoClip { frames: Tensor::new(vec![count, h, w, 3], data)?, fps: self.fps })
    }
}

/// Integer latent grid, raster order over (t, h, w).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexGrid {
    pub extents: [usize; 3],
    pub indices: Vec<u32>,
}

impl IndexGrid {
    pub fn new(extents: [usize; 3], indices: Vec<u32>) -> Result<Self> {
        if extents.iter().product::<usize>() != indices.len() {
            return Err(TensorError::ShapeMismatch {
                op: "IndexGrid::new",
                detail: format!("{:?} vs {} indices", extents, indices.len()),
            });
        }
        Ok(IndexGrid { extents, indices })
    }

    pub fn sites(&self) -> usize {
        self.indices.len()
    }

    /// One time slice as a (1, H, W) grid.
    pub fn slice(&self, t: usize) -> IndexGrid {
        let per = self.extents[1] * self.extents[2];
        IndexGrid {
            extents: [1, self.extents[1], self.extents[2]],
            indices: self.indices[t * per..(t + 1) * per].to_vec(),
        }
    }

    /// Stacks slices along time; extents must agree spatially.
    pub fn stack(slices: &[IndexGrid]) -> Result<IndexGrid> {
        let (h, w) = (slices[0].extents[1], slices[0].extents[2]);
        let mut indices = Vec::new();
        let mut t = 0;
        for s in slices {
            if s.extents[1] != h || s.extents[2] != w {
                return Err(TensorError::ShapeMismatch {
                    op: "IndexGrid::stack",
                    detail: format!("{:?} vs ({}, {})", s.extents, h, w),
                });
            }
            t += s.extents[0];
            indices.extend_from_slice(&s.indices);
        }
        IndexGrid::new([t, h, w], indices)
    }
}

/// Two-level compressed representation of one clip: the bottom grid is twice
/// the top grid along every axis.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LatentHierarchy {
    pub top: IndexGrid,
    pub bottom: IndexGrid,
}

#[derive(Debug, Clone)]
pub struct CodecConfig {
    /// Clip extents (t, h, w); pixel channels are always 3.
    pub input: [usize; 3],
    pub stage1_kernel: [usize; 3],
    pub stage1_stride: [usize; 3],
    pub stage2_kernel: [usize; 3],
    pub stage2_stride: [usize; 3],
    pub upsample_kernel: [usize; 3],
    pub upsample_stride: [usize; 3],
    pub codebook_size: usize,
    pub code_dim: usize,
    pub hidden: usize,
    pub residual_units: usize,
    pub res_blocks: usize,
    pub commitment_beta: f64,
    pub ema_decay: f64,
    pub bottom_mask_prob: f64,
}

impl CodecConfig {
    /// Full-scale settings from the architecture tables.
    pub fn full() -> Self {
        CodecConfig {
            input: [16, 256, 256],
            stage1_kernel: [4, 8, 8],
            stage1_stride: [2, 4, 4],
            stage2_kernel: [4, 4, 4],
            stage2_stride: [2, 2, 2],
            upsample_kernel: [4, 8, 8],
            upsample_stride: [2, 4, 4],
            codebook_size: 512,
            code_dim: 64,
            hidden: 128,
            residual_units: 32,
            res_blocks: 2,
            commitment_beta: 0.25,
            ema_decay: 0.99,
            bottom_mask_prob: 0.5,
        }
    }

    /// CPU-trainable preset with the same stride topology.
    pub fn desk() -> Self {
        CodecConfig {
            input: [8, 32, 32],
            codebook_size: 64,
            code_dim: 16,
            hidden: 32,
            residual_units: 16,
            ..CodecConfig::full()
        }
    }

    pub fn stage1_spec(&self) -> ConvSpec {
        ConvSpec::same(self.stage1_kernel, self.stage1_stride, 3, self.hidden)
    }

    pub fn stage2_spec(&self) -> ConvSpec {
        ConvSpec::same(self.stage2_kernel, self.stage2_stride, self.hidden, self.hidden)
    }

    /// Decoder-side transpose from latent resolution back to pixels; the
    /// adjoint direction of the stage-1 geometry.
    pub fn upsample_spec(&self) -> ConvSpec {
        ConvSpec::same(self.upsample_kernel, self.upsample_stride, self.hidden, self.hidden)
    }

    /// Transpose that lifts top-grid embeddings onto the bottom grid (2x on
    /// every axis); mirrors the stage-2 geometry.
    pub fn top_to_bottom_spec(&self) -> ConvSpec {
        ConvSpec::same(self.stage2_kernel, self.stage2_stride, self.code_dim, self.code_dim)
    }

    /// Latent extents derived purely from the stride specs.
    pub fn bottom_extents(&self) -> Result<[usize; 3]> {
        ConvSpec::same(self.stage1_kernel, self.stage1_stride, 1, 1).out_extents(self.input)
    }

    pub fn top_extents(&self) -> Result<[usize; 3]> {
        ConvSpec::same(self.stage2_kernel, self.stage2_stride, 1, 1).out_extents(self.bottom_extents()?)
    }

    /// Latent extents for an arbitrary clip length at this config's spatial
    /// size (conditioning prefixes are shorter than full clips).
    pub fn extents_for(&self, frames: usize) -> Result<([usize; 3], [usize; 3])> {
        let input = [frames, self.input[1], self.input[2]];
        let bottom = ConvSpec::same(self.stage1_kernel, self.stage1_stride, 1, 1).out_extents(input)?;
        let top = ConvSpec::same(self.stage2_kernel, self.stage2_stride, 1, 1).out_extents(bottom)?;
        Ok((bottom, top))
    }

    pub fn validate(&self) -> Result<()> {
        let bottom = self.bottom_extents()?;
        let top = self.top_extents()?;
        for axis in 0..3 {
            if bottom[axis] != 2 * top[axis] {
                return Err(TensorError::BadConv(format!(
                    "bottom extents {:?} must be exactly twice top extents {:?}",
                    bottom, top
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.bottom_mask_prob) {
            return Err(TensorError::BadConv(format!(
                "bottom_mask_prob {} outside [0, 1]",
                self.bottom_mask_prob
            )));
        }
        Ok(())
    }
}

/// Bit cost of the raw pixels vs the two latent grids.
#[derive(Debug, Clone, PartialEq)]
pub struct BitAccounting {
    pub pixel_bits: u64,
    pub latent_bits: f64,
    /// Exact when both codebook sizes are powers of two.
    pub latent_bits_exact: Option<u64>,
    pub reduction_fraction: f64,
}

/// `pixel_bits = T*H*W*3*log2(256)`; `latent_bits = |bottom|*log2(K) +
/// |top|*log2(K)`; reduction is `1 - latent/pixel`.
pub fn bit_accounting(cfg: &CodecConfig) -> Result<BitAccounting> {
    let [t, h, w] = cfg.input;
    let pixel_bits = (t * h * w * 3) as u64 * 8;
    let bottom = cfg.bottom_extents()?;
    let top = cfg.top_extents()?;
    let sites = |e: [usize; 3]| (e[0] * e[1] * e[2]) as u64;
    let k = cfg.codebook_size;
    let latent_bits = (sites(bottom) + sites(top)) as f64 * (k as f64).log2();
    let latent_bits_exact = if k.is_power_of_two() {
        Some((sites(bottom) + sites(top)) * k.trailing_zeros() as u64)
    } else {
        None
    };
    Ok(BitAccounting {
        pixel_bits,
        latent_bits,
        latent_bits_exact,
        reduction_fraction: 1.0 - latent_bits / pixel_bits as f64,
    })
}

struct EncoderStage {
    down: ParamId,
    down_bias: ParamId,
    spec: ConvSpec,
    blocks: Vec<ResBlock>,
}

impl EncoderStage {
    fn new<S: Scalar>(store: &mut ParamStore<S>, prefix: &str, spec: ConvSpec, cfg: &CodecConfig, rng: &mut ChaCha8Rng) -> Self {
        EncoderStage {
            down: store.add_conv(&format!("{prefix}.down"), &spec, rng),
            down_bias: store.add_bias(&format!("{prefix}.down_bias"), spec.out_channels),
            spec,
            blocks: (0..cfg.res_blocks)
                .map(|i| ResBlock::new(store, &format!("{prefix}.res{i}"), spec.out_channels, cfg.residual_units, rng))
                .collect(),
        }
    }

    fn forward<S: Scalar>(&self, p: &ParamBinding<S>, tape: &mut Tape<S>, x: Var) -> Result<Var> {
        let mut h = tape.conv3d(x, p.var(self.down), &self.spec)?;
        h = tape.add_bias(h, p.var(self.down_bias))?;
        for block in &self.blocks {
            h = block.forward(p, tape, h)?;
        }
        Ok(h)
    }
}

/// The full two-level model: encoder stages, two codebooks, decoder.
pub struct Codec<S: Scalar> {
    pub config: CodecConfig,
    pub store: ParamStore<S>,
    pub codebook_top: Codebook<S>,
    pub codebook_bottom: Codebook<S>,
    stage1: EncoderStage,
    stage2: EncoderStage,
    to_code_bottom: (ParamId, ParamId, ConvSpec),
    to_code_top: (ParamId, ParamId, ConvSpec),
    top_to_bottom: (ParamId, ConvSpec),
    fuse: (ParamId, ParamId, ConvSpec),
    dec_blocks: Vec<ResBlock>,
    upsample: (ParamId, ConvSpec),
    to_rgb: (ParamId, ParamId, ConvSpec),
}

/// Activations produced by one encode pass, before and after quantization.
pub struct EncodeOutput<S: Scalar> {
    pub latents: LatentHierarchy,
    pub vq_bottom: VqOutput<S>,
    pub vq_top: VqOutput<S>,
}

/// Loss record of a single training step.
#[derive(Debug, Clone)]
pub struct CodecStepRecord {
    pub total: f64,
    pub recon_mse: f64,
    pub commit: f64,
    pub bottom_usage: f64,
    pub top_usage: f64,
}

impl<S: Scalar> Codec<S> {
    pub fn new(config: CodecConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let stage1 = EncoderStage::new(&mut store, "enc1", config.stage1_spec(), &config, rng);
        let stage2 = EncoderStage::new(&mut store, "enc2", config.stage2_spec(), &config, rng);

        let bottom_proj = ConvSpec::pointwise(config.hidden, config.code_dim);
        let to_code_bottom = (
            store.add_conv("enc1.to_code", &bottom_proj, rng),
            store.add_bias("enc1.to_code_bias", config.code_dim),
            bottom_proj,
        );
        let top_proj = ConvSpec::pointwise(config.hidden, config.code_dim);
        let to_code_top = (
            store.add_conv("enc2.to_code", &top_proj, rng),
            store.add_bias("enc2.to_code_bias", config.code_dim),
            top_proj,
        );

        let t2b = config.top_to_bottom_spec();
        let top_to_bottom = (store.add_conv_transpose("dec.top_up", &t2b, rng), t2b);

        let fuse_spec = ConvSpec::same([3, 3, 3], [1, 1, 1], 2 * config.code_dim, config.hidden);
        let fuse = (
            store.add_conv("dec.fuse", &fuse_spec, rng),
            store.add_bias("dec.fuse_bias", config.hidden),
            fuse_spec,
        );
        let dec_blocks = (0..config.res_blocks)
            .map(|i| ResBlock::new(&mut store, &format!("dec.res{i}"), config.hidden, config.residual_units, rng))
            .collect();
        let up_spec = config.upsample_spec();
        let upsample = (store.add_conv_transpose("dec.upsample", &up_spec, rng), up_spec);
        let rgb_spec = ConvSpec::pointwise(config.hidden, 3);
        let to_rgb = (
            store.add_conv("dec.to_rgb", &rgb_spec, rng),
            store.add_bias("dec.to_rgb_bias", 3),
            rgb_spec,
        );

        let codebook_top = Codebook::new(config.codebook_size, config.code_dim, config.ema_decay, rng);
        let codebook_bottom = Codebook::new(config.codebook_size, config.code_dim, config.ema_decay, rng);
        Ok(Codec {
            config,
            store,
            codebook_top,
            codebook_bottom,
            stage1,
            stage2,
            to_code_bottom,
            to_code_top,
            top_to_bottom,
            fuse,
            dec_blocks,
            upsample,
            to_rgb,
        })
    }

    fn check_clip(&self, clip: &VideoClip<S>) -> Result<()> {
        let [_, h, w] = clip.extents();
        if h != self.config.input[1] || w != self.config.input[2] {
            return Err(TensorError::ShapeMismatch {
                op: "Codec::encode",
                detail: format!(
                    "clip spatial extents {}x{} vs config {}x{}",
                    h, w, self.config.input[1], self.config.input[2]
                ),
            });
        }
        Ok(())
    }

    /// Encoder trunk on the tape: returns (bottom activations, top
    /// activations), both carrying the code dimension on the channel axis.
    /// The top stage reads the pre-quantization bottom features.
    pub fn encode_features(&self, p: &ParamBinding<S>, tape: &mut Tape<S>, clip: Var) -> Result<(Var, Var)> {
        let h_bottom = self.stage1.forward(p, tape, clip)?;
        let h_top = self.stage2.forward(p, tape, h_bottom)?;
        let (w, b, spec) = &self.to_code_bottom;
        let z_bottom = tape.conv3d(h_bottom, p.var(*w), spec)?;
        let z_bottom = tape.add_bias(z_bottom, p.var(*b))?;
        let (w, b, spec) = &self.to_code_top;
        let z_top = tape.conv3d(h_top, p.var(*w), spec)?;
        let z_top = tape.add_bias(z_top, p.var(*b))?;
        Ok((z_bottom, z_top))
    }

    /// Compress a clip to its latent hierarchy (no gradients kept).
    pub fn encode(&self, clip: &VideoClip<S>) -> Result<EncodeOutput<S>> {
        self.check_clip(clip)?;
        let mut tape = Tape::new();
        let p = self.store.bind_frozen(&mut tape);
        let x = tape.constant(clip.frames().clone());
        let (z_bottom, z_top) = self.encode_features(&p, &mut tape, x)?;
        let vq_bottom = self.codebook_bottom.quantize(tape.value(z_bottom))?;
        let vq_top = self.codebook_top.quantize(tape.value(z_top))?;
        let to_grid = |vq: &VqOutput<S>| {
            IndexGrid::new(
                [vq.grid_shape[0], vq.grid_shape[1], vq.grid_shape[2]],
                vq.indices.clone(),
            )
        };
        Ok(EncodeOutput {
            latents: LatentHierarchy { top: to_grid(&vq_top)?, bottom: to_grid(&vq_bottom)? },
            vq_bottom,
            vq_top,
        })
    }

    /// Decoder on the tape, from embedded latent vars. `mask_bottom` zeroes
    /// the bottom embedding channels before the concatenation.
    fn decode_embeddings(
        &self,
        p: &ParamBinding<S>,
        tape: &mut Tape<S>,
        top_embed: Var,
        bottom_embed: Var,
        mask_bottom: bool,
    ) -> Result<Var> {
        let (w, spec) = &self.top_to_bottom;
        let top_up = tape.conv_transpose3d(top_embed, p.var(*w), spec)?;
        let bottom = if mask_bottom {
            tape.scale(bottom_embed, S::zero())?
        } else {
            bottom_embed
        };
        let cat = tape.concat(&[top_up, bottom], 3)?;
        let (w, b, spec) = &self.fuse;
        let mut h = tape.conv3d(cat, p.var(*w), spec)?;
        h = tape.add_bias(h, p.var(*b))?;
        for block in &self.dec_blocks {
            h = block.forward(p, tape, h)?;
        }
        h = tape.relu(h)?;
        let (w, spec) = &self.upsample;
        h = tape.conv_transpose3d(h, p.var(*w), spec)?;
        h = tape.relu(h)?;
        let (w, b, spec) = &self.to_rgb;
        h = tape.conv3d(h, p.var(*w), spec)?;
        h = tape.add_bias(h, p.var(*b))?;
        tape.sigmoid(h)
    }

    /// Deterministic reconstruction from a latent hierarchy.
    pub fn decode(&self, latents: &LatentHierarchy, mask_bottom: bool) -> Result<VideoClip<S>> {
        let mut tape = Tape::new();
        let p = self.store.bind_frozen(&mut tape);
        let top_e = self.codebook_top.lookup(&latents.top.indices, &latents.top.extents)?;
        let bottom_e = self.codebook_bottom.lookup(&latents.bottom.indices, &latents.bottom.extents)?;
        let top_v = tape.constant(top_e);
        let bottom_v = tape.constant(bottom_e);
        let out = self.decode_embeddings(&p, &mut tape, top_v, bottom_v, mask_bottom)?;
        VideoClip::new(tape.value(out).clone(), 25.0)
    }

    /// One forward/backward/update pass over a batch of clips, including EMA
    /// codebook refreshes and Bernoulli bottom masking per sample.
    pub fn train_step(
        &mut self,
        batch: &[VideoClip<S>],
        opt: &mut crate::tensor::AdamState<S>,
        hp: &crate::tensor::AdamParams,
        rng: &mut ChaCha8Rng,
    ) -> Result<CodecStepRecord> {
        let mut tape = Tape::new();
        let p = self.store.bind_trainable(&mut tape);
        let mut total_loss: Option<Var> = None;
        let mut recon_sum = 0.0;
        let mut commit_sum = 0.0;
        let mut pixel_count = 0usize;
        let mut bottom_assignments: Vec<(Tensor<S>, Vec<u32>)> = Vec::new();
        let mut top_assignments: Vec<(Tensor<S>, Vec<u32>)> = Vec::new();
        let mut bottom_hist = Vec::new();
        let mut top_hist = Vec::new();

        for clip in batch {
            self.check_clip(clip)?;
            let x = tape.constant(clip.frames().clone());
            let (z_bottom, z_top) = self.encode_features(&p, &mut tape, x)?;
            let vq_bottom = self.codebook_bottom.quantize(tape.value(z_bottom))?;
            let vq_top = self.codebook_top.quantize(tape.value(z_top))?;
            let st_bottom = straight_through(&mut tape, z_bottom, &vq_bottom)?;
            let st_top = straight_through(&mut tape, z_top, &vq_top)?;
            let mask_bottom = rng.gen::<f64>() < self.config.bottom_mask_prob;
            let recon = self.decode_embeddings(&p, &mut tape, st_top, st_bottom, mask_bottom)?;

            let losses_b = vq_losses(&mut tape, z_bottom, &vq_bottom, recon, x, self.config.commitment_beta)?;
            // The reconstruction term is shared; add only the top commit term.
            let stopped_top = tape.constant(vq_top.quantized.clone());
            let commit_top_diff = tape.sub(z_top, stopped_top)?;
            let commit_top_raw = tape.sum_sq(commit_top_diff)?;
            let commit_top = tape.scale(commit_top_raw, S::from_f64(self.config.commitment_beta))?;
            let clip_loss = tape.add(losses_b.total, commit_top)?;

            recon_sum += tape.value(losses_b.recon_term).item()?.as_f64();
            commit_sum += tape.value(losses_b.commit_term).item()?.as_f64()
                + tape.value(commit_top).item()?.as_f64();
            pixel_count += clip.frames().numel();

            bottom_hist.extend_from_slice(&vq_bottom.indices);
            top_hist.extend_from_slice(&vq_top.indices);
            bottom_assignments.push((vq_bottom.encoder_out.clone(), vq_bottom.indices));
            top_assignments.push((vq_top.encoder_out.clone(), vq_top.indices));

            total_loss = Some(match total_loss {
                Some(acc) => tape.add(acc, clip_loss)?,
                None => clip_loss,
            });
        }

        let loss = total_loss.ok_or_else(|| TensorError::ShapeMismatch {
            op: "train_step",
            detail: "empty batch".into(),
        })?;
        tape.backward(loss)?;
        let loss_value = tape.value(loss).item()?.as_f64();
        if !loss_value.is_finite() {
            return Err(TensorError::NonFinite { op: "train_step", index: 0 });
        }
        self.store.apply_adam(&tape, &p, opt, hp)?;
        for (z, idx) in &bottom_assignments {
            self.codebook_bottom.ema_update(z, idx)?;
        }
        for (z, idx) in &top_assignments {
            self.codebook_top.ema_update(z, idx)?;
        }

        let k = self.config.codebook_size;
        Ok(CodecStepRecord {
            total: loss_value,
            recon_mse: recon_sum / pixel_count as f64,
            commit: commit_sum,
            bottom_usage: crate::vq::codebook_stats(&bottom_hist, k)?.usage_fraction,
            top_usage: crate::vq::codebook_stats(&top_hist, k)?.usage_fraction,
        })
    }
}

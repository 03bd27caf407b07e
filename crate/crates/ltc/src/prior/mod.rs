//! Autoregressive priors over latent index grids.
//!
//! Both priors share one causal network core: a true-3D masked first layer,
//! then gated stacks factorized into (t, y) and (t, x) plane convolutions
//! with self-attention every few layers. On a single-slice grid the same
//! wiring degenerates to the classic 2D gated PixelCNN, which is exactly
//! what the bottom prior wants.

pub mod bottom;
pub mod top;

use std::sync::Arc;

use rand_chacha::ChaCha8Rng;

use crate::codec::IndexGrid;
use crate::params::{ParamBinding, ParamId, ParamStore};
use crate::tensor::{multi_head_attention, AttentionWeights, CausalMask, ConvSpec, Result, Scalar, Tape, Tensor, TensorError, Var};

pub use bottom::{build_bottom_cond, BottomPrior, BottomPriorConfig, SliceWindow};
pub use top::{build_top_cond, TopPrior, TopPriorConfig};

/// Settings of one causal network over a (T, H, W) grid of `classes`-ary
/// indices. `cond_channels` is the width of the per-position conditioning
/// features injected into every gated layer.
#[derive(Debug, Clone)]
pub struct PriorNetConfig {
    pub grid: [usize; 3],
    pub classes: usize,
    pub layers: usize,
    pub hidden: usize,
    pub residual: usize,
    pub attn_every: usize,
    pub attn_heads: usize,
    pub kernel_t: usize,
    pub kernel_s: usize,
    pub dropout: f64,
    pub cond_channels: usize,
}

impl PriorNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid.iter().any(|&e| e == 0) || self.classes < 2 {
            return Err(TensorError::BadConv(format!(
                "degenerate prior grid {:?} / {} classes",
                self.grid, self.classes
            )));
        }
        if self.attn_every > 0 {
            if self.layers % self.attn_every != 0 {
                return Err(TensorError::BadConv(format!(
                    "attention cadence {} must divide layer count {}",
                    self.attn_every, self.layers
                )));
            }
            if self.attn_heads == 0 || self.hidden % self.attn_heads != 0 {
                return Err(TensorError::HeadSplit { channels: self.hidden, heads: self.attn_heads });
            }
        }
        Ok(())
    }

    pub fn sites(&self) -> usize {
        self.grid.iter().product()
    }
}

struct GatedLayer {
    yt_a: ParamId,
    yt_b: ParamId,
    yt_bias_a: ParamId,
    yt_bias_b: ParamId,
    xt_a: ParamId,
    xt_b: ParamId,
    xt_bias_a: ParamId,
    xt_bias_b: ParamId,
    link_a: ParamId,
    link_b: ParamId,
    cond_yt_a: ParamId,
    cond_yt_b: ParamId,
    cond_xt_a: ParamId,
    cond_xt_b: ParamId,
    proj_yt: ParamId,
    proj_xt: ParamId,
    attn: Option<AttnIds>,
    yt_spec: ConvSpec,
    xt_spec: ConvSpec,
    link_spec: ConvSpec,
    cond_spec: ConvSpec,
    proj_spec: ConvSpec,
}

struct AttnIds {
    query: ParamId,
    key: ParamId,
    value: ParamId,
    output: ParamId,
}

/// The shared causal core. Owns parameter ids inside a caller-provided
/// store so several networks can live in one checkpoint.
pub struct PriorNet {
    pub config: PriorNetConfig,
    embed: ParamId,
    first: ParamId,
    first_bias: ParamId,
    first_spec: ConvSpec,
    first_mask: CausalMask,
    yt_mask: CausalMask,
    xt_mask: CausalMask,
    layers: Vec<GatedLayer>,
    head_mid: ParamId,
    head_mid_bias: ParamId,
    head_out: ParamId,
    head_out_bias: ParamId,
    head_mid_spec: ConvSpec,
    head_out_spec: ConvSpec,
}

impl PriorNet {
    /// Registers all parameters under `prefix`. When `break_first_mask` is
    /// set, the first layer keeps its center tap — a deliberately broken
    /// fixture for causality-probe tests.
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        prefix: &str,
        config: PriorNetConfig,
        rng: &mut ChaCha8Rng,
        break_first_mask: bool,
    ) -> Result<Self> {
        config.validate()?;
        let (kt, ks) = (config.kernel_t, config.kernel_s);
        let temporal = config.grid[0] > 1;
        let first_kernel = if temporal { [kt, ks, ks] } else { [1, ks, ks] };
        // On single-slice grids the (t, y) stack widens to the classic 2D
        // vertical stack; the (t, x) stack is the horizontal one.
        let yt_kernel = if temporal { [kt, ks, 1] } else { [1, ks, ks] };
        let xt_kernel = if temporal { [kt, 1, ks] } else { [1, 1, ks] };

        let first_spec = ConvSpec::same(first_kernel, [1, 1, 1], config.hidden, config.hidden);
        let yt_spec = ConvSpec::same(yt_kernel, [1, 1, 1], config.hidden, config.residual);
        let xt_spec = ConvSpec::same(xt_kernel, [1, 1, 1], config.hidden, config.residual);
        let link_spec = ConvSpec::pointwise(config.residual, config.residual);
        let cond_spec = ConvSpec::pointwise(config.cond_channels, config.residual);
        let proj_spec = ConvSpec::pointwise(config.residual, config.hidden);
        let head_mid_spec = ConvSpec::pointwise(config.hidden, config.hidden);
        let head_out_spec = ConvSpec::pointwise(config.hidden, config.classes);

        let embed = store.add_embedding(&format!("{prefix}.embed"), config.classes, config.hidden, rng);
        let first = store.add_conv(&format!("{prefix}.first"), &first_spec, rng);
        let first_bias = store.add_bias(&format!("{prefix}.first_bias"), config.hidden);

        let mut layers = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let lp = format!("{prefix}.layer{l}");
            let attn = if config.attn_every > 0 && (l + 1) % config.attn_every == 0 {
                Some(AttnIds {
                    query: store.add_matrix(&format!("{lp}.attn_q"), config.hidden, config.hidden, rng),
                    key: store.add_matrix(&format!("{lp}.attn_k"), config.hidden, config.hidden, rng),
                    value: store.add_matrix(&format!("{lp}.attn_v"), config.hidden, config.hidden, rng),
                    output: store.add_matrix(&format!("{lp}.attn_o"), config.hidden, config.hidden, rng),
                })
            } else {
                None
            };
            layers.push(GatedLayer {
                yt_a: store.add_conv(&format!("{lp}.yt_a"), &yt_spec, rng),
                yt_b: store.add_conv(&format!("{lp}.yt_b"), &yt_spec, rng),
                yt_bias_a: store.add_bias(&format!("{lp}.yt_bias_a"), config.residual),
                yt_bias_b: store.add_bias(&format!("{lp}.yt_bias_b"), config.residual),
                xt_a: store.add_conv(&format!("{lp}.xt_a"), &xt_spec, rng),
                xt_b: store.add_conv(&format!("{lp}.xt_b"), &xt_spec, rng),
                xt_bias_a: store.add_bias(&format!("{lp}.xt_bias_a"), config.residual),
                xt_bias_b: store.add_bias(&format!("{lp}.xt_bias_b"), config.residual),
                link_a: store.add_conv(&format!("{lp}.link_a"), &link_spec, rng),
                link_b: store.add_conv(&format!("{lp}.link_b"), &link_spec, rng),
                cond_yt_a: store.add_conv(&format!("{lp}.cond_yt_a"), &cond_spec, rng),
                cond_yt_b: store.add_conv(&format!("{lp}.cond_yt_b"), &cond_spec, rng),
                cond_xt_a: store.add_conv(&format!("{lp}.cond_xt_a"), &cond_spec, rng),
                cond_xt_b: store.add_conv(&format!("{lp}.cond_xt_b"), &cond_spec, rng),
                proj_yt: store.add_conv(&format!("{lp}.proj_yt"), &proj_spec, rng),
                proj_xt: store.add_conv(&format!("{lp}.proj_xt"), &proj_spec, rng),
                attn,
                yt_spec,
                xt_spec,
                link_spec,
                cond_spec,
                proj_spec,
            });
        }

        let first_mask = if break_first_mask {
            CausalMask::combined(first_kernel, true)
        } else {
            CausalMask::combined(first_kernel, false)
        };
        let head_mid = store.add_conv(&format!("{prefix}.head_mid"), &head_mid_spec, rng);
        let head_mid_bias = store.add_bias(&format!("{prefix}.head_mid_bias"), config.hidden);
        let head_out = store.add_conv(&format!("{prefix}.head_out"), &head_out_spec, rng);
        let head_out_bias = store.add_bias(&format!("{prefix}.head_out_bias"), config.classes);
        Ok(PriorNet {
            config,
            embed,
            first,
            first_bias,
            first_spec,
            first_mask,
            yt_mask: CausalMask::combined(yt_kernel, false),
            xt_mask: CausalMask::combined(xt_kernel, true),
            layers,
            head_mid,
            head_mid_bias,
            head_out,
            head_out_bias,
            head_mid_spec,
            head_out_spec,
        })
    }

    pub fn head_out_id(&self) -> ParamId {
        self.head_out
    }

    pub fn head_out_bias_id(&self) -> ParamId {
        self.head_out_bias
    }

    /// Teacher-forced logits `[T, H, W, classes]`. Logits at a voxel depend
    /// only on voxels strictly earlier in raster-time order plus `cond`.
    pub fn logits<S: Scalar>(
        &self,
        p: &ParamBinding<S>,
        tape: &mut Tape<S>,
        grid: &IndexGrid,
        cond: Var,
        train: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Var> {
        let cfg = &self.config;
        if grid.extents != cfg.grid {
            return Err(TensorError::ShapeMismatch {
                op: "prior_logits",
                detail: format!("grid {:?} vs config {:?}", grid.extents, cfg.grid),
            });
        }
        let expect_cond = [cfg.grid[0], cfg.grid[1], cfg.grid[2], cfg.cond_channels];
        if tape.shape(cond) != expect_cond {
            return Err(TensorError::ShapeMismatch {
                op: "prior_logits",
                detail: format!("cond {:?} vs {:?}", tape.shape(cond), expect_cond),
            });
        }

        let indices = Arc::new(grid.indices.clone());
        let embedded = tape.embed(p.var(self.embed), indices, &grid.extents)?;
        let mut h = tape.masked_conv(embedded, p.var(self.first), &self.first_spec, &self.first_mask)?;
        h = tape.add_bias(h, p.var(self.first_bias))?;

        let sites = cfg.sites();
        let ranks: Arc<Vec<usize>> = Arc::new((0..sites).collect());
        let mut yt = h;
        let mut xt = h;
        for layer in &self.layers {
            let cond_ya = tape.conv3d(cond, p.var(layer.cond_yt_a), &layer.cond_spec)?;
            let cond_yb = tape.conv3d(cond, p.var(layer.cond_yt_b), &layer.cond_spec)?;
            let mut pre_a = tape.masked_conv(yt, p.var(layer.yt_a), &layer.yt_spec, &self.yt_mask)?;
            pre_a = tape.add_bias(pre_a, p.var(layer.yt_bias_a))?;
            pre_a = tape.add(pre_a, cond_ya)?;
            let mut pre_b = tape.masked_conv(yt, p.var(layer.yt_b), &layer.yt_spec, &self.yt_mask)?;
            pre_b = tape.add_bias(pre_b, p.var(layer.yt_bias_b))?;
            pre_b = tape.add(pre_b, cond_yb)?;
            let ta = tape.tanh(pre_a)?;
            let sb = tape.sigmoid(pre_b)?;
            let yt_gate = tape.mul(ta, sb)?;
            let yt_out = tape.conv3d(yt_gate, p.var(layer.proj_yt), &layer.proj_spec)?;
            yt = tape.add(yt, yt_out)?;

            let link_a = tape.conv3d(yt_gate, p.var(layer.link_a), &layer.link_spec)?;
            let link_b = tape.conv3d(yt_gate, p.var(layer.link_b), &layer.link_spec)?;
            let cond_xa = tape.conv3d(cond, p.var(layer.cond_xt_a), &layer.cond_spec)?;
            let cond_xb = tape.conv3d(cond, p.var(layer.cond_xt_b), &layer.cond_spec)?;
            let mut pre_a = tape.masked_conv(xt, p.var(layer.xt_a), &layer.xt_spec, &self.xt_mask)?;
            pre_a = tape.add_bias(pre_a, p.var(layer.xt_bias_a))?;
            pre_a = tape.add(pre_a, link_a)?;
            pre_a = tape.add(pre_a, cond_xa)?;
            let mut pre_b = tape.masked_conv(xt, p.var(layer.xt_b), &layer.xt_spec, &self.xt_mask)?;
            pre_b = tape.add_bias(pre_b, p.var(layer.xt_bias_b))?;
            pre_b = tape.add(pre_b, link_b)?;
            pre_b = tape.add(pre_b, cond_xb)?;
            let ta = tape.tanh(pre_a)?;
            let sb = tape.sigmoid(pre_b)?;
            let xt_gate = tape.mul(ta, sb)?;
            let mut xt_out = tape.conv3d(xt_gate, p.var(layer.proj_xt), &layer.proj_spec)?;
            if train && cfg.dropout > 0.0 {
                xt_out = tape.dropout(xt_out, cfg.dropout, rng)?;
            }
            xt = tape.add(xt, xt_out)?;

            if let Some(attn) = &layer.attn {
                let flat = tape.reshape(xt, vec![sites, cfg.hidden])?;
                let weights = AttentionWeights {
                    query: p.var(attn.query),
                    key: p.var(attn.key),
                    value: p.var(attn.value),
                    output: p.var(attn.output),
                };
                let attended = multi_head_attention(tape, flat, &weights, cfg.attn_heads, ranks.clone())?;
                let back = tape.reshape(attended, vec![cfg.grid[0], cfg.grid[1], cfg.grid[2], cfg.hidden])?;
                xt = tape.add(xt, back)?;
            }
        }

        let mut out = tape.relu(xt)?;
        out = tape.conv3d(out, p.var(self.head_mid), &self.head_mid_spec)?;
        out = tape.add_bias(out, p.var(self.head_mid_bias))?;
        out = tape.relu(out)?;
        out = tape.conv3d(out, p.var(self.head_out), &self.head_out_spec)?;
        tape.add_bias(out, p.var(self.head_out_bias))
    }

    /// Teacher-forced total NLL (nats) of `grid` on the tape, for training.
    pub fn nll_loss<S: Scalar>(
        &self,
        p: &ParamBinding<S>,
        tape: &mut Tape<S>,
        grid: &IndexGrid,
        cond: Var,
        train: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Var> {
        let logits = self.logits(p, tape, grid, cond, train, rng)?;
        let flat = tape.reshape(logits, vec![self.config.sites(), self.config.classes])?;
        tape.cross_entropy(flat, Arc::new(grid.indices.clone()))
    }
}

/// Per-site negative log-likelihood (nats) of `targets` under row-wise
/// softmax of flattened `[sites, classes]` logits, computed in f64.
pub fn nll_rows<S: Scalar>(logits: &Tensor<S>, targets: &[u32]) -> Result<Vec<f64>> {
    let shape = logits.shape();
    let classes = *shape.last().unwrap();
    let sites: usize = shape[..shape.len() - 1].iter().product();
    if sites != targets.len() {
        return Err(TensorError::ShapeMismatch {
            op: "nll_rows",
            detail: format!("{} sites vs {} targets", sites, targets.len()),
        });
    }
    let mut out = Vec::with_capacity(sites);
    for (i, &t) in targets.iter().enumerate() {
        let row = &logits.data()[i * classes..(i + 1) * classes];
        let max = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
        let lse: f64 = row.iter().map(|v| (v.as_f64() - max).exp()).sum();
        out.push(max + lse.ln() - row[t as usize].as_f64());
    }
    Ok(out)
}

/// Draws one class from tempered softmax of a logit row. Returns the drawn
/// index and its NLL in nats under the untempered model distribution, so
/// generation-time NLL sums are comparable to teacher-forced NLL regardless
/// of temperature. Temperature zero is exact argmax (ties to lowest index).
pub fn sample_from_logits<S: Scalar>(row: &[S], temperature: f64, rng: &mut ChaCha8Rng) -> (u32, f64) {
    use rand::Rng;
    let vals: Vec<f64> = row.iter().map(|v| v.as_f64()).collect();
    let max = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let model_lse: f64 = vals.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;

    let chosen = if temperature <= 0.0 {
        let mut best = 0usize;
        for (i, &v) in vals.iter().enumerate() {
            if v > vals[best] {
                best = i;
            }
        }
        best
    } else {
        let scaled: Vec<f64> = vals.iter().map(|v| v / temperature).collect();
        let smax = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> = scaled.iter().map(|v| (v - smax).exp()).collect();
        let total: f64 = weights.iter().sum();
        let mut draw = rng.gen::<f64>() * total;
        let mut chosen = weights.len() - 1;
        for (i, w) in weights.iter().enumerate() {
            if draw < *w {
                chosen = i;
                break;
            }
            draw -= w;
        }
        chosen
    };
    (chosen as u32, model_lse - vals[chosen])
}

/// Nats-per-site converted to bits per latent.
pub fn bits_per_latent(total_nats: f64, sites: usize) -> f64 {
    total_nats / sites as f64 / std::f64::consts::LN_2
}

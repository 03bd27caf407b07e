//! Vector-quantization bottleneck: nearest-neighbor assignment with a
//! straight-through gradient, commitment loss, and exponential-moving-average
//! codebook maintenance in place of a codebook loss term.

use rand::Rng;

use crate::tensor::{Result, Scalar, Tape, Tensor, TensorError, Var};

/// Codes whose running count falls below this are frozen rather than divided
/// by a vanishing denominator.
pub const FREEZE_EPS: f64 = 1e-5;

/// K x D embedding table with EMA accumulators. `embeddings[i]` tracks
/// `ema_sums[i] / ema_counts[i]` for every live code.
#[derive(Debug, Clone)]
pub struct Codebook<S: Scalar> {
    embeddings: Tensor<S>,
    ema_counts: Vec<S>,
    ema_sums: Tensor<S>,
    ema_decay: f64,
}

#[derive(Debug, Clone)]
pub struct VqOutput<S: Scalar> {
    /// Argmin assignment per site, raster order over `grid_shape`.
    pub indices: Vec<u32>,
    /// Shape of the site grid (input shape without the code axis).
    pub grid_shape: Vec<usize>,
    /// Snapped values; at each site exactly the assigned codebook row.
    pub quantized: Tensor<S>,
    /// The activations quantization was computed from.
    pub encoder_out: Tensor<S>,
}

#[derive(Debug, Clone, Copy)]
pub struct VqLosses {
    pub recon_term: Var,
    pub commit_term: Var,
    pub total: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CodebookStats {
    pub usage_fraction: f64,
    pub counts: Vec<u64>,
    pub perplexity: f64,
}

impl<S: Scalar> Codebook<S> {
    /// Fresh codebook with embeddings uniform in `[-1/K, 1/K]` and empty
    /// EMA accumulators.
    pub fn new(code_count: usize, code_dim: usize, ema_decay: f64, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / code_count as f64;
        let embeddings = Tensor::from_fn(vec![code_count, code_dim], |_| {
            S::from_f64((rng.gen::<f64>() * 2.0 - 1.0) * bound)
        });
        Codebook {
            embeddings,
            ema_counts: vec![S::zero(); code_count],
            ema_sums: Tensor::zeros(vec![code_count, code_dim]),
            ema_decay,
        }
    }

    pub fn from_parts(embeddings: Tensor<S>, ema_counts: Vec<S>, ema_sums: Tensor<S>, ema_decay: f64) -> Result<Self> {
        if embeddings.shape().len() != 2
            || embeddings.shape() != ema_sums.shape()
            || embeddings.shape()[0] != ema_counts.len()
        {
            return Err(TensorError::ShapeMismatch {
                op: "Codebook::from_parts",
                detail: format!(
                    "embeddings {:?}, sums {:?}, {} counts",
                    embeddings.shape(),
                    ema_sums.shape(),
                    ema_counts.len()
                ),
            });
        }
        Ok(Codebook { embeddings, ema_counts, ema_sums, ema_decay })
    }

    pub fn code_count(&self) -> usize {
        self.embeddings.shape()[0]
    }

    pub fn code_dim(&self) -> usize {
        self.embeddings.shape()[1]
    }

    pub fn embeddings(&self) -> &Tensor<S> {
        &self.embeddings
    }

    pub fn ema_counts(&self) -> &[S] {
        &self.ema_counts
    }

    pub fn ema_sums(&self) -> &Tensor<S> {
        &self.ema_sums
    }

    pub fn ema_decay(&self) -> f64 {
        self.ema_decay
    }

    pub fn code(&self, index: u32) -> &[S] {
        let d = self.code_dim();
        &self.embeddings.data()[index as usize * d..(index as usize + 1) * d]
    }

    /// Nearest code per site under squared L2; ties break to the lowest
    /// index. The input's last axis must equal the code dimension.
    pub fn quantize(&self, encoder_out: &Tensor<S>) -> Result<VqOutput<S>> {
        let shape = encoder_out.shape();
        let d = self.code_dim();
        if shape.last().copied() != Some(d) {
            return Err(TensorError::ShapeMismatch {
                op: "quantize",
                detail: format!("last axis of {:?} must equal code dim {}", shape, d),
            });
        }
        let grid_shape: Vec<usize> = shape[..shape.len() - 1].to_vec();
        let sites: usize = grid_shape.iter().product();
        let k = self.code_count();
        let table = self.embeddings.data();
        let data = encoder_out.data();
        let mut indices = Vec::with_capacity(sites);
        let mut quantized = vec![S::zero(); data.len()];
        for site in 0..sites {
            let z = &data[site * d..(site + 1) * d];
            let mut best = 0u32;
            let mut best_dist = S::infinity();
            for code in 0..k {
                let row = &table[code * d..(code + 1) * d];
                let mut dist = S::zero();
                for (zv, ev) in z.iter().zip(row.iter()) {
                    let diff = *zv - *ev;
                    dist = dist + diff * diff;
                }
                if dist < best_dist {
                    best_dist = dist;
                    best = code as u32;
                }
            }
            indices.push(best);
            quantized[site * d..(site + 1) * d].copy_from_slice(&table[best as usize * d..(best as usize + 1) * d]);
        }
        Ok(VqOutput {
            indices,
            grid_shape,
            quantized: Tensor::new(shape.to_vec(), quantized)?,
            encoder_out: encoder_out.clone(),
        })
    }

    /// Gathers codebook rows for an index grid; the decode-side inverse of
    /// `quantize`.
    pub fn lookup(&self, indices: &[u32], grid_shape: &[usize]) -> Result<Tensor<S>> {
        let sites: usize = grid_shape.iter().product();
        if sites != indices.len() {
            return Err(TensorError::ShapeMismatch {
                op: "Codebook::lookup",
                detail: format!("{} indices vs grid {:?}", indices.len(), grid_shape),
            });
        }
        let d = self.code_dim();
        let mut out = vec![S::zero(); sites * d];
        for (site, &idx) in indices.iter().enumerate() {
            if idx as usize >= self.code_count() {
                return Err(TensorError::ShapeMismatch {
                    op: "Codebook::lookup",
                    detail: format!("index {} out of range for {} codes", idx, self.code_count()),
                });
            }
            out[site * d..(site + 1) * d].copy_from_slice(self.code(idx));
        }
        let mut shape = grid_shape.to_vec();
        shape.push(d);
        Tensor::new(shape, out)
    }

    /// EMA codebook step: decay counts and sums toward this batch's
    /// assignments, then refresh each live code as `sums / counts`. Codes
    /// whose count sits below [`FREEZE_EPS`] keep their previous embedding.
    pub fn ema_update(&mut self, encoder_out: &Tensor<S>, indices: &[u32]) -> Result<()> {
        let d = self.code_dim();
        let k = self.code_count();
        let sites = indices.len();
        if encoder_out.numel() != sites * d {
            return Err(TensorError::ShapeMismatch {
                op: "ema_update",
                detail: format!("{} sites with dim {} vs tensor {:?}", sites, d, encoder_out.shape()),
            });
        }
        let mut batch_counts = vec![S::zero(); k];
        let mut batch_sums = vec![S::zero(); k * d];
        for (site, &idx) in indices.iter().enumerate() {
            let idx = idx as usize;
            if idx >= k {
                return Err(TensorError::ShapeMismatch {
                    op: "ema_update",
                    detail: format!("index {} out of range for {} codes", idx, k),
                });
            }
            batch_counts[idx] = batch_counts[idx] + S::one();
            let z = &encoder_out.data()[site * d..(site + 1) * d];
            for (acc, zv) in batch_sums[idx * d..(idx + 1) * d].iter_mut().zip(z.iter()) {
                *acc = *acc + *zv;
            }
        }
        let gamma = S::from_f64(self.ema_decay);
        let one_minus = S::one() - gamma;
        let freeze = S::from_f64(FREEZE_EPS);
        for code in 0..k {
            self.ema_counts[code] = self.ema_counts[code] * gamma + batch_counts[code] * one_minus;
            let sums = &mut self.ema_sums.data_mut()[code * d..(code + 1) * d];
            for (m, b) in sums.iter_mut().zip(&batch_sums[code * d..(code + 1) * d]) {
                *m = *m * gamma + *b * one_minus;
            }
            if self.ema_counts[code] >= freeze {
                let n = self.ema_counts[code];
                let sums = &self.ema_sums.data()[code * d..(code + 1) * d];
                let row = &mut self.embeddings.data_mut()[code * d..(code + 1) * d];
                for (e, m) in row.iter_mut().zip(sums.iter()) {
                    *e = *m / n;
                }
            }
        }
        Ok(())
    }
}

/// Straight-through estimator: forward emits the quantized values, backward
/// copies the incoming gradient onto the encoder-output var unchanged. The
/// codebook receives no gradient through this path.
pub fn straight_through<S: Scalar>(tape: &mut Tape<S>, encoder_out: Var, vq: &VqOutput<S>) -> Result<Var> {
    tape.straight_through(encoder_out, vq.quantized.clone())
}

/// Reconstruction plus commitment loss. `recon_term = ||recon - target||^2`;
/// `commit_term = beta * ||encoder_out - stop_grad(quantized)||^2`. The
/// codebook term of the original three-part loss is handled by
/// [`Codebook::ema_update`] instead, so gradients of `commit_term` flow to
/// the encoder output only.
pub fn vq_losses<S: Scalar>(
    tape: &mut Tape<S>,
    encoder_out: Var,
    vq: &VqOutput<S>,
    recon: Var,
    target: Var,
    beta: f64,
) -> Result<VqLosses> {
    let diff = tape.sub(recon, target)?;
    let recon_term = tape.sum_sq(diff)?;
    let stopped = tape.constant(vq.quantized.clone());
    let commit_diff = tape.sub(encoder_out, stopped)?;
    let commit_raw = tape.sum_sq(commit_diff)?;
    let commit_term = tape.scale(commit_raw, S::from_f64(beta))?;
    let total = tape.add(recon_term, commit_term)?;
    Ok(VqLosses { recon_term, commit_term, total })
}

/// Usage summary of an assignment history: fraction of codes ever used,
/// per-code counts, and the exponentiated entropy of the empirical code
/// distribution.
pub fn codebook_stats(history: &[u32], code_count: usize) -> Result<CodebookStats> {
    if history.is_empty() {
        return Err(TensorError::ShapeMismatch {
            op: "codebook_stats",
            detail: "empty assignment history".into(),
        });
    }
    let mut counts = vec![0u64; code_count];
    for &idx in history {
        counts[idx as usize] += 1;
    }
    let used = counts.iter().filter(|&&c| c > 0).count();
    let total = history.len() as f64;
    let mut entropy = 0.0;
    for &c in &counts {
        if c > 0 {
            let p = c as f64 / total;
            entropy -= p * p.ln();
        }
    }
    Ok(CodebookStats {
        usage_fraction: used as f64 / code_count as f64,
        counts,
        perplexity: entropy.exp(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn codebook_from_rows(rows: &[&[f64]], decay: f64) -> Codebook<f64> {
        let k = rows.len();
        let d = rows[0].len();
        let flat: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Codebook::from_parts(
            Tensor::new(vec![k, d], flat).unwrap(),
            vec![0.0; k],
            Tensor::zeros(vec![k, d]),
            decay,
        )
        .unwrap()
    }

    #[test]
    fn quantize_picks_the_nearest_code() {
        let cb = codebook_from_rows(&[&[0.0, 0.0], &[1.0, 1.0]], 0.99);
        let z = Tensor::new(vec![1, 2], vec![0.2, 0.1]).unwrap();
        let out = cb.quantize(&z).unwrap();
        assert_eq!(out.indices, vec![0]);
        assert_eq!(out.quantized.data(), &[0.0, 0.0]);
    }

    #[test]
    fn quantize_of_exact_code_has_zero_residual() {
        let cb = codebook_from_rows(&[&[0.5, -0.5], &[2.0, 3.0], &[-1.0, 0.0]], 0.99);
        let z = Tensor::new(vec![1, 2], vec![2.0, 3.0]).unwrap();
        let out = cb.quantize(&z).unwrap();
        assert_eq!(out.indices, vec![1]);
        assert_eq!(out.quantized.data(), z.data());
    }

    #[test]
    fn quantize_tie_breaks_to_the_lowest_index() {
        let cb = codebook_from_rows(&[&[1.0], &[-1.0]], 0.99);
        let z = Tensor::new(vec![1, 1], vec![0.0]).unwrap();
        assert_eq!(cb.quantize(&z).unwrap().indices, vec![0]);
    }

    #[test]
    fn quantize_rejects_dim_mismatch() {
        let cb = codebook_from_rows(&[&[0.0, 0.0]], 0.99);
        let z = Tensor::new(vec![2, 3], vec![0.0; 6]).unwrap();
        assert!(cb.quantize(&z).is_err());
    }

    #[test]
    fn quantize_matches_exhaustive_distance_scan() {
        // Brute-force argmin oracle on a random batch.
        let mut rng = ChaCha8Rng::seed_from_u64(101);
        let (k, d, sites) = (8usize, 4usize, 16usize);
        let cb = Codebook::<f64>::new(k, d, 0.99, &mut rng);
        let z = Tensor::from_fn(vec![sites, d], |_| rng.gen::<f64>() * 4.0 - 2.0);
        let out = cb.quantize(&z).unwrap();
        for site in 0..sites {
            let zrow = &z.data()[site * d..(site + 1) * d];
            let mut best = 0u32;
            let mut best_dist = f64::INFINITY;
            for code in 0..k {
                let dist: f64 = cb
                    .code(code as u32)
                    .iter()
                    .zip(zrow)
                    .map(|(e, v)| (v - e) * (v - e))
                    .sum();
                if dist < best_dist {
                    best_dist = dist;
                    best = code as u32;
                }
            }
            assert_eq!(out.indices[site], best, "site {}", site);
            for j in 0..k as u32 {
                let dj: f64 = cb.code(j).iter().zip(zrow).map(|(e, v)| (v - e) * (v - e)).sum();
                assert!(best_dist <= dj + 1e-15);
            }
        }
    }

    #[test]
    fn straight_through_forward_is_quantized_and_backward_copies() {
        let cb = codebook_from_rows(&[&[0.0, 0.0], &[1.0, 1.0]], 0.99);
        let z = Tensor::new(vec![2, 2], vec![0.2, 0.1, 0.9, 1.3]).unwrap();
        let vq = cb.quantize(&z).unwrap();
        let mut tape = Tape::<f64>::new();
        let zv = tape.param(z);
        let st = straight_through(&mut tape, zv, &vq).unwrap();
        assert_eq!(tape.value(st).data(), vq.quantized.data());
        let loss = tape.sum_all(st).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(zv).unwrap(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn straight_through_matches_quantized_leaf_gradient() {
        // Two-graph oracle: gradient at the encoder output equals the
        // gradient computed with the quantized values as an independent leaf.
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        let cb = Codebook::<f64>::new(6, 3, 0.99, &mut rng);
        let z = Tensor::from_fn(vec![5, 3], |_| rng.gen::<f64>() - 0.5);
        let vq = cb.quantize(&z).unwrap();
        let weights = Tensor::from_fn(vec![5, 3], |_| rng.gen::<f64>() * 2.0 - 1.0);

        let mut tape_a = Tape::<f64>::new();
        let zv = tape_a.param(z);
        let st = straight_through(&mut tape_a, zv, &vq).unwrap();
        let wv = tape_a.constant(weights.clone());
        let prod = tape_a.mul(st, wv).unwrap();
        let sq = tape_a.sum_sq(prod).unwrap();
        tape_a.backward(sq).unwrap();

        let mut tape_b = Tape::<f64>::new();
        let leaf = tape_b.param(vq.quantized.clone());
        let wv = tape_b.constant(weights);
        let prod = tape_b.mul(leaf, wv).unwrap();
        let sq = tape_b.sum_sq(prod).unwrap();
        tape_b.backward(sq).unwrap();

        assert_eq!(tape_a.grad(zv).unwrap(), tape_b.grad(leaf).unwrap());
    }

    #[test]
    fn losses_vanish_when_recon_matches_and_codes_are_exact() {
        let cb = codebook_from_rows(&[&[0.25, -0.75]], 0.99);
        let z = Tensor::new(vec![1, 2], vec![0.25, -0.75]).unwrap();
        let vq = cb.quantize(&z).unwrap();
        let mut tape = Tape::<f64>::new();
        let zv = tape.param(z);
        let recon = tape.constant(Tensor::filled(vec![4], 0.5));
        let target = tape.constant(Tensor::filled(vec![4], 0.5));
        let losses = vq_losses(&mut tape, zv, &vq, recon, target, 0.25).unwrap();
        assert_eq!(tape.value(losses.total).item().unwrap(), 0.0);
    }

    #[test]
    fn commit_term_scales_linearly_in_beta() {
        let cb = codebook_from_rows(&[&[0.0, 0.0]], 0.99);
        let z = Tensor::new(vec![1, 2], vec![0.3, -0.4]).unwrap();
        let vq = cb.quantize(&z).unwrap();
        let run = |beta: f64| {
            let mut tape = Tape::<f64>::new();
            let zv = tape.param(z.clone());
            let recon = tape.constant(Tensor::zeros(vec![2]));
            let target = tape.constant(Tensor::zeros(vec![2]));
            let losses = vq_losses(&mut tape, zv, &vq, recon, target, beta).unwrap();
            tape.value(losses.commit_term).item().unwrap()
        };
        let base = run(0.25);
        assert!((base - 0.25 * 0.25).abs() < 1e-12); // 0.09 + 0.16 = 0.25
        assert!((run(0.5) - 2.0 * base).abs() < 1e-12);
    }

    #[test]
    fn commit_gradient_reaches_encoder_output_only() {
        let cb = codebook_from_rows(&[&[0.0, 0.0]], 0.99);
        let z = Tensor::new(vec![1, 2], vec![0.3, -0.4]).unwrap();
        let vq = cb.quantize(&z).unwrap();
        let mut tape = Tape::<f64>::new();
        let zv = tape.param(z);
        let recon = tape.constant(Tensor::zeros(vec![2]));
        let target = tape.constant(Tensor::zeros(vec![2]));
        let losses = vq_losses(&mut tape, zv, &vq, recon, target, 1.0).unwrap();
        tape.backward(losses.total).unwrap();
        // d/dz ||z - sg(q)||^2 = 2 (z - q)
        assert_eq!(tape.grad(zv).unwrap(), &[0.6, -0.8]);
    }

    #[test]
    fn ema_with_no_assignments_freezes_the_code_and_decays_counts() {
        let mut cb = codebook_from_rows(&[&[1.0], &[5.0]], 0.9);
        cb.ema_counts = vec![2.0, 1.0];
        cb.ema_sums = Tensor::new(vec![2, 1], vec![2.0, 5.0]).unwrap();
        let z = Tensor::new(vec![3, 1], vec![0.9, 1.1, 1.0]).unwrap();
        cb.ema_update(&z, &[0, 0, 0]).unwrap();
        // code 1 saw nothing: embedding refreshed from decayed ratio, which
        // is unchanged (gamma cancels), count decayed by gamma.
        assert!((cb.embeddings().data()[1] - 5.0).abs() < 1e-12);
        assert!((cb.ema_counts[1] - 0.9).abs() < 1e-12);
    }

    #[test]
    fn ema_with_zero_decay_sets_codes_to_batch_means() {
        let mut cb = codebook_from_rows(&[&[10.0], &[-10.0]], 0.0);
        let z = Tensor::new(vec![4, 1], vec![1.0, 3.0, -2.0, -4.0]).unwrap();
        let vq_indices = [0u32, 0, 1, 1];
        cb.ema_update(&z, &vq_indices).unwrap();
        assert!((cb.embeddings().data()[0] - 2.0).abs() < 1e-12);
        assert!((cb.embeddings().data()[1] + 3.0).abs() < 1e-12);
    }

    #[test]
    fn three_updates_match_the_closed_form_unrolling() {
        // Closed-form oracle for the EMA recurrence on K=2, D=1:
        //   N^(t) = g^t N0 + (1-g) sum_s g^(t-s) n^(s)
        //   m^(t) = g^t m0 + (1-g) sum_s g^(t-s) z_sum^(s)
        //   e^(t) = m^(t) / N^(t)
        let gamma = 0.97;
        let n0 = [1.0, 2.0];
        let m0 = [0.5, -1.0];
        let batches: [(Vec<f64>, Vec<u32>); 3] = [
            (vec![0.2, 0.4, -0.3], vec![0, 0, 1]),
            (vec![0.6, -0.1], vec![1, 0]),
            (vec![0.9, 0.8, 0.7, -0.5], vec![0, 0, 0, 1]),
        ];

        let mut cb = codebook_from_rows(&[&[m0[0] / n0[0]], &[m0[1] / n0[1]]], gamma);
        cb.ema_counts = n0.to_vec();
        cb.ema_sums = Tensor::new(vec![2, 1], m0.to_vec()).unwrap();
        for (values, idx) in &batches {
            let z = Tensor::new(vec![values.len(), 1], values.clone()).unwrap();
            cb.ema_update(&z, idx).unwrap();
        }

        for code in 0..2usize {
            let mut n = n0[code];
            let mut m = m0[code];
            for (values, idx) in &batches {
                let count = idx.iter().filter(|&&i| i as usize == code).count() as f64;
                let sum: f64 = values
                    .iter()
                    .zip(idx.iter())
                    .filter(|(_, &i)| i as usize == code)
                    .map(|(v, _)| v)
                    .sum();
                n = n * gamma + count * (1.0 - gamma);
                m = m * gamma + sum * (1.0 - gamma);
            }
            assert!((cb.ema_counts[code] - n).abs() < 1e-12);
            assert!((cb.ema_sums().data()[code] - m).abs() < 1e-12);
            assert!((cb.embeddings().data()[code] - m / n).abs() < 1e-12);
        }
    }

    #[test]
    fn repeated_constant_batches_converge_geometrically() {
        let mut cb = codebook_from_rows(&[&[0.0], &[1.0]], 0.5);
        let z = Tensor::new(vec![2, 1], vec![4.0, -4.0]).unwrap();
        let idx = [0u32, 1];
        let mut prev_gap = f64::INFINITY;
        for step in 0..30 {
            cb.ema_update(&z, &idx).unwrap();
            let gap = (cb.embeddings().data()[0] - 4.0).abs();
            if step > 0 {
                assert!(gap <= prev_gap * 0.5 + 1e-12, "step {}: {} vs {}", step, gap, prev_gap);
            }
            prev_gap = gap;
        }
        assert!(prev_gap < 1e-6);
    }

    #[test]
    fn stats_of_a_single_code_history() {
        let stats = codebook_stats(&[3, 3, 3, 3], 8).unwrap();
        assert!((stats.usage_fraction - 1.0 / 8.0).abs() < 1e-12);
        assert!((stats.perplexity - 1.0).abs() < 1e-12);
    }

    #[test]
    fn stats_of_uniform_history_reach_full_perplexity() {
        let history: Vec<u32> = (0..64).map(|i| i % 8).collect();
        let stats = codebook_stats(&history, 8).unwrap();
        assert!((stats.usage_fraction - 1.0).abs() < 1e-12);
        assert!((stats.perplexity - 8.0).abs() < 1e-9);
    }

    #[test]
    fn stats_counts_match_direct_counting() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let history: Vec<u32> = (0..500).map(|_| rng.gen_range(0..16)).collect();
        let stats = codebook_stats(&history, 16).unwrap();
        let mut expect = vec![0u64; 16];
        for &h in &history {
            expect[h as usize] += 1;
        }
        assert_eq!(stats.counts, expect);
    }

    #[test]
    fn stats_reject_empty_history() {
        assert!(codebook_stats(&[], 4).is_err());
    }

    proptest! {
        /// Quantization idempotence: re-quantizing the snapped values returns
        /// the same indices, and the chosen code is distance-optimal.
        #[test]
        fn quantize_is_idempotent_and_optimal(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cb = Codebook::<f64>::new(5, 3, 0.99, &mut rng);
            let z = Tensor::from_fn(vec![7, 3], |_| rng.gen::<f64>() * 2.0 - 1.0);
            let first = cb.quantize(&z).unwrap();
            let second = cb.quantize(&first.quantized).unwrap();
            prop_assert_eq!(&first.indices, &second.indices);
            for site in 0..7 {
                let zrow = &z.data()[site * 3..site * 3 + 3];
                let chosen: f64 = cb
                    .code(first.indices[site])
                    .iter()
                    .zip(zrow)
                    .map(|(e, v)| (v - e) * (v - e))
                    .sum();
                for j in 0..5u32 {
                    let dj: f64 = cb.code(j).iter().zip(zrow).map(|(e, v)| (v - e) * (v - e)).sum();
                    prop_assert!(chosen <= dj);
                }
            }
        }

        /// EMA fixed point is gamma-parametric: constant batches contract the
        /// embedding toward the batch mean with ratio gamma.
        #[test]
        fn ema_contraction_is_gamma_parametric(gamma in 0.05f64..0.95) {
            let mut cb = codebook_from_rows(&[&[0.0]], gamma);
            cb.ema_counts = vec![1.0];
            cb.ema_sums = Tensor::new(vec![1, 1], vec![0.0]).unwrap();
            let z = Tensor::new(vec![1, 1], vec![2.0]).unwrap();
            let mut prev = 2.0f64; // initial |e - mean|
            for _ in 0..5 {
                cb.ema_update(&z, &[0]).unwrap();
                let gap = (cb.embeddings().data()[0] - 2.0).abs();
                prop_assert!(gap <= prev * gamma + 1e-9);
                prev = gap;
            }
        }
    }
}

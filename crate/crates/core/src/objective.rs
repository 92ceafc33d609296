//! Loss terms of the training objective: per-view cross-entropy
//! reconstruction, closed-form Gaussian KL, the InfoNCE bound between the
//! two views' pooled latents, and the variational-dropout regularizer —
//! composed into one minimized scalar on the tape.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    self, Augmentation, BranchNoise, ModelConfig, PaddedBatch, PosteriorParams, SampleMode,
    TapedParams,
};
use crate::numerics::{Real, Tape, TensorError, TensorId};
use crate::rng::SeedStream;

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error("no valid supervision positions in batch")]
    NoValidPositions,
    #[error(transparent)]
    Model(#[from] model::ModelError),
    #[error("numeric failure in {context}: {source}")]
    Numeric {
        context: &'static str,
        #[source]
        source: TensorError,
    },
}

fn octx(context: &'static str) -> impl FnOnce(TensorError) -> ObjectiveError {
    move |source| ObjectiveError::Numeric { context, source }
}

/// Scalar loss components of one batch, per-batch means. `ce_prime` and
/// `kl_prime` belong to the second view.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce: f64,
    #[serde(rename = "ce'")]
    pub ce_prime: f64,
    pub kl: f64,
    #[serde(rename = "kl'")]
    pub kl_prime: f64,
    pub infonce: f64,
    pub alpha_reg: f64,
    pub total: f64,
}

/// Next-item cross-entropy with one sampled negative per valid position:
/// mean over valid positions of softplus(-pos_logit) + softplus(neg_logit),
/// the stabilized form of -[log sigmoid(pos) + log(1 - sigmoid(neg))].
/// Positions with target 0 carry zero weight.
pub fn ce_loss<E: Real>(
    tape: &mut Tape<E>,
    decoder_out: TensorId,
    item_emb: TensorId,
    targets: &[u32],
    negatives: &[u32],
) -> Result<TensorId, ObjectiveError> {
    let n_valid = targets.iter().filter(|&&t| t != 0).count();
    if n_valid == 0 {
        return Err(ObjectiveError::NoValidPositions);
    }
    let pos_rows = tape
        .gather_rows(item_emb, Arc::new(targets.to_vec()))
        .map_err(octx("ce.gather_pos"))?;
    let neg_rows = tape
        .gather_rows(item_emb, Arc::new(negatives.to_vec()))
        .map_err(octx("ce.gather_neg"))?;
    let pos_logit = tape.row_dot(decoder_out, pos_rows).map_err(octx("ce.pos_logit"))?;
    let neg_logit = tape.row_dot(decoder_out, neg_rows).map_err(octx("ce.neg_logit"))?;
    let neg_pos = tape.scale(pos_logit, -E::ONE).map_err(octx("ce.neg_pos"))?;
    let sp_pos = tape.softplus(neg_pos).map_err(octx("ce.softplus_pos"))?;
    let sp_neg = tape.softplus(neg_logit).map_err(octx("ce.softplus_neg"))?;
    let per_pos = tape.add(sp_pos, sp_neg).map_err(octx("ce.sum_terms"))?;
    let valid: Vec<E> = targets
        .iter()
        .map(|&t| if t == 0 { E::ZERO } else { E::ONE })
        .collect();
    let masked = tape
        .mul_const_mask(per_pos, Arc::new(valid))
        .map_err(octx("ce.mask"))?;
    let sum = tape.sum_all(masked).map_err(octx("ce.sum"))?;
    tape.scale(sum, E::ONE / E::from_f64(n_valid as f64))
        .map_err(octx("ce.mean"))
        .map_err(Into::into)
}

/// Closed-form KL to the standard normal prior, summed over valid
/// positions and dimensions with the 1/2 factor, then averaged over the
/// batch: (1/2B) sum_valid (sigma^2 + mu^2 - 1 - log sigma^2).
pub fn kl_loss<E: Real>(
    tape: &mut Tape<E>,
    post: PosteriorParams,
    valid: &[E],
    batch: usize,
    max_len: usize,
) -> Result<TensorId, ObjectiveError> {
    let sig2 = tape.mul(post.sigma, post.sigma).map_err(octx("kl.sig2"))?;
    let mu2 = tape.mul(post.mu, post.mu).map_err(octx("kl.mu2"))?;
    let log_sig2 = tape.log(sig2).map_err(octx("kl.log_sig2"))?;
    let s = tape.add(sig2, mu2).map_err(octx("kl.add"))?;
    let s1 = tape.add_scalar(s, -E::ONE).map_err(octx("kl.sub_one"))?;
    let term = tape.sub(s1, log_sig2).map_err(octx("kl.sub_log"))?;
    let weights = Arc::new(valid.to_vec());
    let pooled = tape
        .pool_blocks(term, weights, batch, max_len)
        .map_err(octx("kl.pool"))?;
    let total = tape.sum_all(pooled).map_err(octx("kl.sum"))?;
    tape.scale(total, E::from_f64(0.5 / batch as f64))
        .map_err(octx("kl.mean"))
        .map_err(Into::into)
}

/// Sequence-level KL for one posterior, the same 1/2-factor closed form
/// as [`kl_loss`]; used by the evaluation diagnostics.
pub fn kl_per_sequence(mu: &[f64], sigma: &[f64], valid: &[bool], max_len: usize, d: usize) -> f64 {
    let mut acc = 0.0;
    for (t, &ok) in valid.iter().enumerate().take(max_len) {
        if !ok {
            continue;
        }
        for j in 0..d {
            let m = mu[t * d + j];
            let s2 = sigma[t * d + j] * sigma[t * d + j];
            acc += s2 + m * m - 1.0 - s2.ln();
        }
    }
    0.5 * acc
}

/// InfoNCE over pooled per-sequence latents of the two views, the
/// minimized form of the multi-sample mutual-information lower bound:
/// -(1/M) sum_u log[ exp(z_u.z'_u/tau) / (sum_v exp(z_u.z'_v/tau)
/// + sum_{v!=u} exp(z_u.z_v/tau)) ], log-sum-exp stabilized.
pub fn infonce_loss<E: Real>(
    tape: &mut Tape<E>,
    pooled_a: TensorId,
    pooled_b: TensorId,
    tau: f64,
) -> Result<TensorId, ObjectiveError> {
    assert!(tau > 0.0, "temperature must be positive");
    let m = tape.shape(pooled_a)[0];
    let inv_tau = E::from_f64(1.0 / tau);
    let cross_raw = tape
        .matmul_transpose_b(pooled_a, pooled_b)
        .map_err(octx("infonce.cross"))?;
    let cross = tape.scale(cross_raw, inv_tau).map_err(octx("infonce.cross_tau"))?;
    let same_raw = tape
        .matmul_transpose_b(pooled_a, pooled_a)
        .map_err(octx("infonce.same"))?;
    let same = tape.scale(same_raw, inv_tau).map_err(octx("infonce.same_tau"))?;
    // Exclude the same-view self term (v != u on the second sum).
    let neg = E::from_f64(crate::numerics::tape::MASK_NEG_INF);
    let mut diag_mask = vec![E::ZERO; m * m];
    for i in 0..m {
        diag_mask[i * m + i] = neg;
    }
    let same_masked = tape
        .add_const_buf(same, &diag_mask)
        .map_err(octx("infonce.diag_mask"))?;
    let all = tape
        .concat_cols(cross, same_masked)
        .map_err(octx("infonce.concat"))?;
    let lse = tape.logsumexp_rows(all).map_err(octx("infonce.lse"))?;
    let pos = tape.take_diag(cross).map_err(octx("infonce.diag"))?;
    let per_u = tape.sub(lse, pos).map_err(octx("infonce.sub"))?;
    tape.mean_all(per_u)
        .map_err(octx("infonce.mean"))
        .map_err(Into::into)
}

/// Variational-dropout rate regularizer, the cubic approximation
/// L_alpha = 0.5 log a + 1.161 a - 1.502 a^2 + 0.586 a^3 on the clamped
/// rate. This quantity is maximized: the total loss subtracts it.
pub fn alpha_regularizer<E: Real>(
    tape: &mut Tape<E>,
    log_alpha: TensorId,
) -> Result<TensorId, ObjectiveError> {
    let alpha = model::alpha_node(tape, log_alpha)?;
    let la = tape.log(alpha).map_err(octx("alpha.log"))?;
    let t1 = tape.scale(la, E::from_f64(0.5)).map_err(octx("alpha.t1"))?;
    let t2 = tape.scale(alpha, E::from_f64(1.161)).map_err(octx("alpha.t2"))?;
    let a2 = tape.mul(alpha, alpha).map_err(octx("alpha.sq"))?;
    let t3 = tape.scale(a2, E::from_f64(-1.502)).map_err(octx("alpha.t3"))?;
    let a3 = tape.mul(a2, alpha).map_err(octx("alpha.cube"))?;
    let t4 = tape.scale(a3, E::from_f64(0.586)).map_err(octx("alpha.t4"))?;
    let s12 = tape.add(t1, t2).map_err(octx("alpha.s12"))?;
    let s34 = tape.add(t3, t4).map_err(octx("alpha.s34"))?;
    tape.add(s12, s34)
        .map_err(octx("alpha.sum"))
        .map_err(Into::into)
}

/// Scalar loss nodes feeding the total.
#[derive(Debug, Clone, Copy)]
pub struct LossNodes {
    pub ce: TensorId,
    pub ce_prime: TensorId,
    pub kl: TensorId,
    pub kl_prime: TensorId,
    pub infonce: Option<TensorId>,
    pub alpha_reg: Option<TensorId>,
}

/// Minimized total: ce + ce' + beta*(kl + kl') + lambda*infonce
/// - alpha_reg. Gradient descent on this scalar maximizes the two-view
/// evidence bound.
pub fn total_loss<E: Real>(
    tape: &mut Tape<E>,
    nodes: &LossNodes,
    lambda: f64,
    beta: f64,
) -> Result<TensorId, ObjectiveError> {
    let ce_sum = tape.add(nodes.ce, nodes.ce_prime).map_err(octx("total.ce"))?;
    let kl_sum = tape.add(nodes.kl, nodes.kl_prime).map_err(octx("total.kl"))?;
    let kl_weighted = tape
        .scale(kl_sum, E::from_f64(beta))
        .map_err(octx("total.beta"))?;
    let mut total = tape.add(ce_sum, kl_weighted).map_err(octx("total.elbo"))?;
    if let Some(nce) = nodes.infonce {
        let weighted = tape
            .scale(nce, E::from_f64(lambda))
            .map_err(octx("total.lambda"))?;
        total = tape.add(total, weighted).map_err(octx("total.add_nce"))?;
    }
    if let Some(reg) = nodes.alpha_reg {
        total = tape.sub(total, reg).map_err(octx("total.sub_alpha"))?;
    }
    Ok(total)
}

/// Uniform negative per valid position, resampled while it collides with
/// the positive (index 0 is excluded by construction).
pub fn sample_negatives(targets: &[u32], num_items: usize, rng: &mut SeedStream) -> Vec<u32> {
    targets
        .iter()
        .map(|&t| {
            if t == 0 {
                0
            } else if num_items < 2 {
                1
            } else {
                loop {
                    let cand = rng.below(num_items) as u32 + 1;
                    if cand != t {
                        break cand;
                    }
                }
            }
        })
        .collect()
}

/// One view of a training batch: padded inputs and the aligned shifted
/// next-item targets (0 where no supervision applies).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ViewBatch {
    pub batch: PaddedBatch,
    pub targets: Vec<u32>,
}

impl ViewBatch {
    /// Builds the next-item view of raw sequences: input is the sequence
    /// minus its last item, the target at each position is the following
    /// item, both left-padded to `max_len`.
    pub fn next_item_view(seqs: &[&[u32]], max_len: usize) -> ViewBatch {
        let inputs: Vec<Vec<u32>> = seqs
            .iter()
            .map(|s| s[..s.len().saturating_sub(1)].to_vec())
            .collect();
        let targets: Vec<Vec<u32>> = seqs
            .iter()
            .map(|s| if s.is_empty() { Vec::new() } else { s[1..].to_vec() })
            .collect();
        let input_refs: Vec<&[u32]> = inputs.iter().map(|v| v.as_slice()).collect();
        let batch = PaddedBatch::from_sequences(&input_refs, max_len);
        let mut target_flat = Vec::with_capacity(batch.input.len());
        for t in &targets {
            target_flat.extend(crate::data::pad_or_truncate(t, max_len));
        }
        ViewBatch {
            batch,
            targets: target_flat,
        }
    }
}

/// Weights and ablation switches for the composed objective.
#[derive(Debug, Clone, Copy)]
pub struct ObjectiveSpec {
    pub beta: f64,
    pub disable_infonce: bool,
    pub disable_alpha_reg: bool,
}

impl Default for ObjectiveSpec {
    fn default() -> Self {
        ObjectiveSpec {
            beta: 1.0,
            disable_infonce: false,
            disable_alpha_reg: false,
        }
    }
}

/// Output of the composed two-view objective.
#[derive(Debug, Clone, Copy)]
pub struct TwoViewLoss {
    pub total: TensorId,
    pub breakdown: LossBreakdown,
}

/// Runs both branches (branch 1 always on the original view, branch 2 per
/// the augmentation strategy) and composes every loss term. Each branch
/// draws its noise from its own seed; sharing seeds with augmentation off
/// makes the branches bitwise identical.
pub fn two_view_loss<E: Real>(
    tape: &mut Tape<E>,
    taped: &TapedParams,
    config: &ModelConfig,
    spec: &ObjectiveSpec,
    view1: &ViewBatch,
    view2: &ViewBatch,
    branch_seeds: [u64; 2],
) -> Result<TwoViewLoss, ObjectiveError> {
    let mut branch_outputs = Vec::with_capacity(2);
    for (idx, view) in [view1, view2].into_iter().enumerate() {
        let mut rng = SeedStream::new(branch_seeds[idx]);
        let extra_p = if idx == 1 && config.augmentation == Augmentation::Model {
            config.dropout_p
        } else {
            0.0
        };
        let mode = if idx == 1 && config.augmentation == Augmentation::Variational {
            SampleMode::Variational
        } else {
            SampleMode::Plain
        };
        let branch = taped.branch(idx);
        let mut noise = BranchNoise {
            rng: Some(&mut rng),
            dropout_p: config.dropout_p,
            extra_bernoulli_p: extra_p,
        };
        let embedded = model::embed(tape, taped, &view.batch)?;
        let post = model::encode(tape, config, branch, embedded, &view.batch, &mut noise)?;
        let n = tape.numel(post.mu);
        let eps: Vec<E> = (0..n).map(|_| E::from_f64(rng.standard_normal())).collect();
        let latent = model::reparameterize_with(
            tape,
            post,
            mode,
            taped.log_alpha,
            &eps,
            Arc::new(view.batch.mean_pool_weights()),
            view.batch.batch,
            view.batch.max_len,
        )?;
        let mut noise = BranchNoise {
            rng: Some(&mut rng),
            dropout_p: config.dropout_p,
            extra_bernoulli_p: 0.0,
        };
        let decoder_out = model::decode(tape, config, branch, latent.z, &view.batch, &mut noise)?;
        let negatives = sample_negatives(&view.targets, taped.num_items, &mut rng);
        let ce = ce_loss(tape, decoder_out, taped.item_emb, &view.targets, &negatives)?;
        let kl = kl_loss(
            tape,
            post,
            &view.batch.valid_mask::<E>(),
            view.batch.batch,
            view.batch.max_len,
        )?;
        branch_outputs.push((ce, kl, latent));
    }
    let (ce1, kl1, latent1) = branch_outputs[0];
    let (ce2, kl2, latent2) = branch_outputs[1];
    let infonce = if spec.disable_infonce || config.lambda == 0.0 {
        None
    } else {
        Some(infonce_loss(tape, latent1.pooled, latent2.pooled, config.tau)?)
    };
    let alpha_reg = match (config.augmentation, spec.disable_alpha_reg, taped.log_alpha) {
        (Augmentation::Variational, false, Some(la)) => Some(alpha_regularizer(tape, la)?),
        _ => None,
    };
    let nodes = LossNodes {
        ce: ce1,
        ce_prime: ce2,
        kl: kl1,
        kl_prime: kl2,
        infonce,
        alpha_reg,
    };
    let total = total_loss(tape, &nodes, config.lambda, spec.beta)?;
    let breakdown = LossBreakdown {
        ce: tape.scalar_value(ce1).to_f64(),
        ce_prime: tape.scalar_value(ce2).to_f64(),
        kl: tape.scalar_value(kl1).to_f64(),
        kl_prime: tape.scalar_value(kl2).to_f64(),
        infonce: infonce.map(|n| tape.scalar_value(n).to_f64()).unwrap_or(0.0),
        alpha_reg: alpha_reg.map(|n| tape.scalar_value(n).to_f64()).unwrap_or(0.0),
        total: tape.scalar_value(total).to_f64(),
    };
    Ok(TwoViewLoss { total, breakdown })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Parameters;
    use crate::numerics::Tensor;

    /// CE fixture: item_emb rows chosen so that pos/neg logits against a
    /// ones decoder row equal the requested values.
    fn ce_fixture(pos_logit: f64, neg_logit: f64) -> (Tape<f64>, TensorId, TensorId) {
        let mut tape = Tape::<f64>::new();
        // d = 1: decoder output [1.0], item 1 embeds pos_logit, item 2 neg.
        let emb = tape.constant(vec![0.0, pos_logit, neg_logit], vec![3, 1]);
        let d_out = tape.constant(vec![1.0], vec![1, 1]);
        (tape, d_out, emb)
    }

    #[test]
    fn ce_saturated_limit_is_zero() {
        let (mut tape, d_out, emb) = ce_fixture(30.0, -30.0);
        let loss = ce_loss(&mut tape, d_out, emb, &[1], &[2]).unwrap();
        assert!(tape.scalar_value(loss) < 1e-9);
    }

    #[test]
    fn ce_zero_logits_is_two_ln_two() {
        let (mut tape, d_out, emb) = ce_fixture(0.0, 0.0);
        let loss = ce_loss(&mut tape, d_out, emb, &[1], &[2]).unwrap();
        let expect = 2.0 * std::f64::consts::LN_2;
        assert!((tape.scalar_value(loss) - expect).abs() < 1e-12);
    }

    #[test]
    fn ce_matches_naive_formula_on_random_logits() {
        let mut rng = SeedStream::new(4);
        for _ in 0..50 {
            let pos = rng.standard_normal() * 3.0;
            let neg = rng.standard_normal() * 3.0;
            let (mut tape, d_out, emb) = ce_fixture(pos, neg);
            let loss = ce_loss(&mut tape, d_out, emb, &[1], &[2]).unwrap();
            let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
            let naive = -(sig(pos).ln() + (1.0 - sig(neg)).ln());
            assert!(
                (tape.scalar_value(loss) - naive).abs() < 1e-5,
                "stable {} vs naive {}",
                tape.scalar_value(loss),
                naive
            );
        }
    }

    #[test]
    fn ce_requires_valid_positions() {
        let (mut tape, d_out, emb) = ce_fixture(0.0, 0.0);
        let err = ce_loss(&mut tape, d_out, emb, &[0], &[0]).unwrap_err();
        assert!(matches!(err, ObjectiveError::NoValidPositions));
    }

    #[test]
    fn ce_padding_positions_carry_zero_weight() {
        // Same valid content, different padding layout: identical loss.
        let mut tape = Tape::<f64>::new();
        let emb = tape.constant(vec![0.0, 0.7, -0.4, 1.1], vec![4, 1]);
        let d_a = tape.constant(vec![0.0, 1.0, 1.0], vec![3, 1]);
        let d_b = tape.constant(vec![1.0, 1.0, 0.0], vec![3, 1]);
        let a = ce_loss(&mut tape, d_a, emb, &[0, 1, 2], &[0, 3, 3]).unwrap();
        let b = ce_loss(&mut tape, d_b, emb, &[1, 2, 0], &[3, 3, 0]).unwrap();
        assert_eq!(tape.scalar_value(a), tape.scalar_value(b));
    }

    fn kl_of(mu: Vec<f64>, sigma: Vec<f64>, valid: Vec<f64>, batch: usize, t: usize) -> f64 {
        let mut tape = Tape::<f64>::new();
        let d = mu.len() / (batch * t);
        let mu_id = tape.constant(mu, vec![batch * t, d]);
        let sig_id = tape.constant(sigma, vec![batch * t, d]);
        let post = PosteriorParams {
            mu: mu_id,
            sigma: sig_id,
        };
        let loss = kl_loss(&mut tape, post, &valid, batch, t).unwrap();
        tape.scalar_value(loss)
    }

    #[test]
    fn kl_zero_at_prior() {
        let v = kl_of(vec![0.0, 0.0], vec![1.0, 1.0], vec![1.0, 1.0], 1, 2);
        assert!(v.abs() < 1e-9);
    }

    #[test]
    fn kl_half_for_unit_mean() {
        let v = kl_of(vec![1.0], vec![1.0], vec![1.0], 1, 1);
        assert!((v - 0.5).abs() < 1e-12);
    }

    #[test]
    fn kl_excludes_masked_positions() {
        let v = kl_of(
            vec![5.0, 1.0],
            vec![0.3, 1.0],
            vec![0.0, 1.0], // first position masked out
            1,
            2,
        );
        assert!((v - 0.5).abs() < 1e-12);
    }

    #[test]
    fn kl_matches_monte_carlo() {
        let mut rng = SeedStream::new(77);
        for _ in 0..10 {
            let mu = rng.standard_normal() * 1.2;
            let sigma = 0.5 + 1.5 * rng.uniform();
            let closed = kl_of(vec![mu], vec![sigma], vec![1.0], 1, 1);
            let n = 100_000;
            let mut acc = 0.0;
            for _ in 0..n {
                let e = rng.standard_normal();
                let z = mu + sigma * e;
                // log q(z) - log p(z)
                acc += -sigma.ln() - 0.5 * e * e + 0.5 * z * z;
            }
            let mc = acc / n as f64;
            let rel = (closed - mc).abs() / closed.abs().max(1e-6);
            assert!(rel < 0.02, "closed {closed} vs mc {mc}");
        }
    }

    #[test]
    fn kl_per_sequence_matches_graph() {
        let mu = vec![0.3, -1.0, 0.0, 2.0];
        let sigma = vec![0.9, 1.1, 1.0, 0.6];
        let graph = kl_of(mu.clone(), sigma.clone(), vec![1.0, 1.0], 1, 2);
        let pure = kl_per_sequence(&mu, &sigma, &[true, true], 2, 2);
        assert!((graph - pure).abs() < 1e-9);
    }

    fn infonce_of(a: Vec<f64>, b: Vec<f64>, m: usize, tau: f64) -> f64 {
        let mut tape = Tape::<f64>::new();
        let d = a.len() / m;
        let pa = tape.constant(a, vec![m, d]);
        let pb = tape.constant(b, vec![m, d]);
        let loss = infonce_loss(&mut tape, pa, pb, tau).unwrap();
        tape.scalar_value(loss)
    }

    #[test]
    fn infonce_single_element_batch_is_zero() {
        let v = infonce_of(vec![0.4, -0.2], vec![1.0, 0.8], 1, 1.0);
        assert!(v.abs() < 1e-12);
    }

    #[test]
    fn infonce_two_identical_pairs_is_ln_three() {
        // All four vectors identical: loss = -log(e^s / (2 e^s + e^s)) = ln 3.
        let z = vec![0.6, -0.3, 0.2];
        let both = [z.clone(), z.clone()].concat();
        let v = infonce_of(both.clone(), both, 2, 1.0);
        assert!((v - 3.0f64.ln()).abs() < 1e-9, "got {v}");
    }

    #[test]
    fn infonce_never_negative() {
        let mut rng = SeedStream::new(12);
        for _ in 0..200 {
            let m = 1 + rng.below(6);
            let d = 1 + rng.below(5);
            let a: Vec<f64> = (0..m * d).map(|_| rng.standard_normal()).collect();
            let b: Vec<f64> = (0..m * d).map(|_| rng.standard_normal()).collect();
            let v = infonce_of(a, b, m, 0.5 + rng.uniform());
            assert!(v >= -1e-9, "negative infonce {v}");
        }
    }

    #[test]
    fn infonce_alignment_monotone_with_orthogonal_negatives() {
        // u's pair lives in coordinates 0..2, every other vector in the
        // orthogonal complement, so increasing the alignment of (z_u, z'_u)
        // cannot raise any other row's denominator.
        let d = 6;
        let m = 3;
        let z_u = vec![1.0, 0.5, 0.0, 0.0, 0.0, 0.0];
        let zp_u_far = vec![-0.8, 0.4, 0.0, 0.0, 0.0, 0.0];
        let mut rng = SeedStream::new(9);
        let mut others = vec![0.0; 2 * d];
        for r in 0..2 {
            for j in 2..d {
                others[r * d + j] = rng.standard_normal();
            }
        }
        let mut last = f64::INFINITY;
        for step in 0..=4 {
            let t = step as f64 / 4.0;
            let zp_u: Vec<f64> = zp_u_far
                .iter()
                .zip(&z_u)
                .map(|(&far, &target)| far + t * (target - far))
                .collect();
            let a = [z_u.clone(), others[..d].to_vec(), others[d..].to_vec()].concat();
            let b = [zp_u, others[..d].to_vec(), others[d..].to_vec()].concat();
            let v = infonce_of(a, b, m, 1.0);
            assert!(v <= last + 1e-12, "loss rose from {last} to {v} at t={t}");
            last = v;
        }
    }

    fn alpha_reg_value(alpha: f64) -> f64 {
        let mut tape = Tape::<f64>::new();
        let la = tape.leaf(&Tensor::new(vec![alpha.ln()], vec![1]).with_grad());
        let reg = alpha_regularizer(&mut tape, la).unwrap();
        tape.scalar_value(reg)
    }

    #[test]
    fn alpha_reg_at_one() {
        // 0 + 1.161 - 1.502 + 0.586 = 0.245
        assert!((alpha_reg_value(1.0) - 0.245).abs() < 1e-9);
    }

    #[test]
    fn alpha_reg_at_clamp_floor() {
        let expect = 0.5 * 1e-4f64.ln() + 1.161e-4 - 1.502e-8 + 0.586e-12;
        assert!((alpha_reg_value(1e-4) - expect).abs() < 1e-9);
        // Values below the clamp floor are clamped.
        assert!((alpha_reg_value(1e-6) - expect).abs() < 1e-9);
    }

    #[test]
    fn alpha_reg_increasing_on_grid() {
        let mut prev = f64::NEG_INFINITY;
        for i in 1..=100 {
            let a = i as f64 / 100.0;
            let v = alpha_reg_value(a);
            assert!(v > prev, "not increasing at alpha={a}");
            prev = v;
        }
    }

    #[test]
    fn total_reduces_to_two_elbos_without_extras() {
        let mut tape = Tape::<f64>::new();
        let ce = tape.constant(vec![1.25], vec![1]);
        let ce2 = tape.constant(vec![0.75], vec![1]);
        let kl = tape.constant(vec![0.4], vec![1]);
        let kl2 = tape.constant(vec![0.6], vec![1]);
        let nodes = LossNodes {
            ce,
            ce_prime: ce2,
            kl,
            kl_prime: kl2,
            infonce: None,
            alpha_reg: None,
        };
        let total = total_loss(&mut tape, &nodes, 0.0, 1.0).unwrap();
        assert!((tape.scalar_value(total) - 3.0).abs() < 1e-12);
    }

    #[test]
    fn total_zero_components_zero() {
        let mut tape = Tape::<f64>::new();
        let zero = tape.constant(vec![0.0], vec![1]);
        let nodes = LossNodes {
            ce: zero,
            ce_prime: zero,
            kl: zero,
            kl_prime: zero,
            infonce: Some(zero),
            alpha_reg: Some(zero),
        };
        let total = total_loss(&mut tape, &nodes, 0.3, 1.0).unwrap();
        assert_eq!(tape.scalar_value(total), 0.0);
    }

    #[test]
    fn total_combines_all_terms() {
        let mut tape = Tape::<f64>::new();
        let ce = tape.constant(vec![1.0], vec![1]);
        let ce_prime = tape.constant(vec![2.0], vec![1]);
        let kl = tape.constant(vec![0.5], vec![1]);
        let kl_prime = tape.constant(vec![0.25], vec![1]);
        let infonce = tape.constant(vec![4.0], vec![1]);
        let alpha_reg = tape.constant(vec![0.1], vec![1]);
        let nodes = LossNodes {
            ce,
            ce_prime,
            kl,
            kl_prime,
            infonce: Some(infonce),
            alpha_reg: Some(alpha_reg),
        };
        let total = total_loss(&mut tape, &nodes, 0.5, 2.0).unwrap();
        // 1 + 2 + 2*(0.75) + 0.5*4 - 0.1 = 6.4
        assert!((tape.scalar_value(total) - 6.4).abs() < 1e-12);
    }

    #[test]
    fn negatives_avoid_target_and_padding() {
        let mut rng = SeedStream::new(3);
        let targets = vec![0, 5, 2, 2, 0, 9];
        let negs = sample_negatives(&targets, 9, &mut rng);
        for (&t, &n) in targets.iter().zip(&negs) {
            if t == 0 {
                assert_eq!(n, 0);
            } else {
                assert_ne!(n, t);
                assert!(n >= 1 && n <= 9);
            }
        }
    }

    fn tiny_config(aug: Augmentation) -> ModelConfig {
        ModelConfig {
            d: 8,
            heads: 2,
            layers: 1,
            max_len: 4,
            dropout_p: 0.3,
            augmentation: aug,
            lambda: 0.1,
            tau: 1.0,
            ..ModelConfig::default()
        }
    }

    fn tiny_views(max_len: usize) -> (ViewBatch, ViewBatch) {
        let seqs: Vec<&[u32]> = vec![&[1, 2, 3, 4], &[5, 6, 7], &[2, 4, 6, 8, 1]];
        let v = ViewBatch::next_item_view(&seqs, max_len);
        (v.clone(), v)
    }

    #[test]
    fn shared_seed_without_augmentation_collapses_to_identical_branches() {
        let config = tiny_config(Augmentation::None);
        let params = Parameters::<f64>::init(&config, 9, 21).unwrap();
        let (v1, v2) = tiny_views(config.max_len);
        let mut tape = Tape::<f64>::new();
        let taped = model::register_params(&mut tape, &params);
        let spec = ObjectiveSpec {
            disable_infonce: true,
            ..ObjectiveSpec::default()
        };
        let out = two_view_loss(&mut tape, &taped, &config, &spec, &v1, &v2, [7, 7]).unwrap();
        assert_eq!(out.breakdown.ce, out.breakdown.ce_prime);
        assert_eq!(out.breakdown.kl, out.breakdown.kl_prime);
        // And gradients double up rather than diverge: total = 2 * branch.
        assert!(
            (out.breakdown.total - 2.0 * (out.breakdown.ce + out.breakdown.kl)).abs() < 1e-12
        );
    }

    #[test]
    fn two_view_loss_is_deterministic() {
        let config = tiny_config(Augmentation::Variational);
        let params = Parameters::<f64>::init(&config, 9, 5).unwrap();
        let (v1, v2) = tiny_views(config.max_len);
        let run = || {
            let mut tape = Tape::<f64>::new();
            let taped = model::register_params(&mut tape, &params);
            let out = two_view_loss(
                &mut tape,
                &taped,
                &config,
                &ObjectiveSpec::default(),
                &v1,
                &v2,
                [100, 200],
            )
            .unwrap();
            out.breakdown
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn lambda_zero_equals_disable_infonce() {
        let params = Parameters::<f64>::init(&tiny_config(Augmentation::Variational), 9, 5).unwrap();
        let (v1, v2) = tiny_views(4);
        let run = |lambda: f64, disable: bool| {
            let config = ModelConfig {
                lambda,
                ..tiny_config(Augmentation::Variational)
            };
            let spec = ObjectiveSpec {
                disable_infonce: disable,
                ..ObjectiveSpec::default()
            };
            let mut tape = Tape::<f64>::new();
            let taped = model::register_params(&mut tape, &params);
            two_view_loss(&mut tape, &taped, &config, &spec, &v1, &v2, [1, 2])
                .unwrap()
                .breakdown
        };
        assert_eq!(run(0.0, false), run(0.1, true));
    }
}

//! Verification instruments: the uniform error bound and its empirical
//! checker, the pooling-optimality oracle, per-group deviation statistics,
//! and an exact arithmetic/cache cost model.

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::lca::{
    build_rep_kv, partition, pool_semantic, visible_counts, LatentCache, LcaConfig,
    PartitionOutcome, SemanticPool,
};
use crate::mla::{head_queries, reconstruct_head, LatentState, MlaWeights};
use crate::tensor::{softmax_slice, Matrix, Precision};

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn l2_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Worst-case output error of attention when every key moves by at most
/// `delta_k` and every value by at most `delta_v` (L2), with query norms
/// bounded by `q_norm` and value norms by `v_norm`:
///
///   v_norm * (exp(2 * q_norm * delta_k / sqrt(d_k)) - 1) + delta_v
pub fn uniform_error_bound(
    q_norm: f64,
    v_norm: f64,
    delta_k: f64,
    delta_v: f64,
    d_k: usize,
) -> f64 {
    v_norm * ((2.0 * q_norm * delta_k / (d_k as f64).sqrt()).exp() - 1.0) + delta_v
}

/// Deviation statistics for one condensed group, aggregated over heads.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupDeviation {
    pub group_index: usize,
    /// Largest key deviation L2 over the group's tokens and heads.
    pub delta_k_max: f64,
    pub delta_v_max: f64,
    /// Mean of per-token, per-head deviation-to-original L2 ratios.
    pub mean_rel_k: f64,
    pub mean_rel_v: f64,
}

/// Key/value deviation statistics between cached tokens and the
/// representatives that replaced them. Local-window tokens are kept at full
/// fidelity and contribute exactly zero, so statistics cover grouped tokens.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DeviationReport {
    pub delta_k_max: f64,
    pub delta_v_max: f64,
    pub mean_rel_k: f64,
    pub mean_rel_v: f64,
    pub per_group: Vec<GroupDeviation>,
}

fn check_state_matches_cache(state: &LatentState, cache: &LatentCache) -> Result<()> {
    if state.len() != cache.total_tokens() {
        return Err(Error::Consistency(format!(
            "state holds {} tokens, cache absorbed {}",
            state.len(),
            cache.total_tokens()
        )));
    }
    if cache.reps().len() * cache.group_size() + cache.buffer_len() != cache.total_tokens() {
        return Err(Error::Consistency(
            "cache bookkeeping does not cover the sequence".into(),
        ));
    }
    Ok(())
}

/// Measures, per group and head, how far each token's reconstructed key and
/// value sit from the group representative's key and value.
pub fn measure_deviations(
    state: &LatentState,
    cache: &LatentCache,
    weights: &MlaWeights,
) -> Result<DeviationReport> {
    check_state_matches_cache(state, cache)?;
    let mcfg = &weights.config;
    let g = cache.group_size();

    // Reconstructed exact keys/values per head for the whole sequence.
    let mut exact: Vec<(Matrix, Matrix)> = Vec::with_capacity(mcfg.n_heads);
    for h in 0..mcfg.n_heads {
        exact.push(reconstruct_head(&state.c_kv, &state.k_rope, weights, h)?);
    }

    let mut per_group = Vec::with_capacity(cache.reps().len());
    let mut delta_k_max: f64 = 0.0;
    let mut delta_v_max: f64 = 0.0;
    let mut rel_k_sum = 0.0;
    let mut rel_v_sum = 0.0;
    let mut samples = 0usize;
    for (j, rep) in cache.reps().iter().enumerate() {
        let (start, end) = (j * g, (j + 1) * g);
        let mut gk: f64 = 0.0;
        let mut gv: f64 = 0.0;
        let mut grk = 0.0;
        let mut grv = 0.0;
        for h in 0..mcfg.n_heads {
            let (rep_k, rep_v) = build_rep_kv(&rep.c_rep, &rep.k_rope_rep, weights, h)?;
            let (keys, values) = &exact[h];
            for i in start..end {
                let dk = l2_diff(keys.row(i), &rep_k);
                let dv = l2_diff(values.row(i), &rep_v);
                gk = gk.max(dk);
                gv = gv.max(dv);
                grk += relative(dk, l2(keys.row(i)));
                grv += relative(dv, l2(values.row(i)));
            }
        }
        let group_samples = (g * mcfg.n_heads) as f64;
        per_group.push(GroupDeviation {
            group_index: j,
            delta_k_max: gk,
            delta_v_max: gv,
            mean_rel_k: grk / group_samples,
            mean_rel_v: grv / group_samples,
        });
        delta_k_max = delta_k_max.max(gk);
        delta_v_max = delta_v_max.max(gv);
        rel_k_sum += grk;
        rel_v_sum += grv;
        samples += g * mcfg.n_heads;
    }
    let (mean_rel_k, mean_rel_v) = if samples == 0 {
        (0.0, 0.0)
    } else {
        (rel_k_sum / samples as f64, rel_v_sum / samples as f64)
    };
    Ok(DeviationReport {
        delta_k_max,
        delta_v_max,
        mean_rel_k,
        mean_rel_v,
        per_group,
    })
}

fn relative(deviation: f64, original: f64) -> f64 {
    if original == 0.0 {
        if deviation == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        deviation / original
    }
}

/// Empirical check of the uniform error bound on one instance.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundReport {
    /// Largest query L2 norm over heads and tokens.
    pub q_norm: f64,
    /// Largest value L2 norm over heads and tokens.
    pub v_norm: f64,
    /// Largest measured key deviation (grouped tokens).
    pub delta_k: f64,
    pub delta_v: f64,
    pub bound: f64,
    /// Largest per-query, per-head output error of the group-assigned
    /// substitution against dense attention.
    pub actual_error_max: f64,
    pub satisfied: bool,
}

/// Compares dense attention against the substitution the bound is stated
/// for: every grouped token's key and value replaced by its group
/// representative's (so each representative appears with multiplicity g in
/// the softmax), local tokens untouched, no mask on either side.
pub fn check_error_bound(
    state: &LatentState,
    cache: &LatentCache,
    weights: &MlaWeights,
) -> Result<BoundReport> {
    check_state_matches_cache(state, cache)?;
    let mcfg = &weights.config;
    let l = state.len();
    let g = cache.group_size();
    let grouped = cache.reps().len() * g;
    let scale = 1.0 / (mcfg.d_k() as f64).sqrt();

    let dev = measure_deviations(state, cache, weights)?;

    let mut q_norm: f64 = 0.0;
    let mut v_norm: f64 = 0.0;
    let mut actual_error_max: f64 = 0.0;
    for h in 0..mcfg.n_heads {
        let q = head_queries(state, weights, h)?;
        let (keys, values) = reconstruct_head(&state.c_kv, &state.k_rope, weights, h)?;
        // Substituted keys/values: representative rows for grouped tokens.
        let mut sub_keys = Matrix::zeros(0, mcfg.d_k());
        let mut sub_values = Matrix::zeros(0, mcfg.d_v);
        for (j, rep) in cache.reps().iter().enumerate() {
            let (rk, rv) = build_rep_kv(&rep.c_rep, &rep.k_rope_rep, weights, h)?;
            for _ in j * g..(j + 1) * g {
                sub_keys.push_row(&rk)?;
                sub_values.push_row(&rv)?;
            }
        }
        for i in grouped..l {
            sub_keys.push_row(keys.row(i))?;
            sub_values.push_row(values.row(i))?;
        }
        for i in 0..l {
            v_norm = v_norm.max(l2(values.row(i)));
        }
        for t in 0..l {
            let q_row = q.row(t);
            q_norm = q_norm.max(l2(q_row));
            let dense_row = attend_once(q_row, &keys, &values, scale);
            let sub_row = attend_once(q_row, &sub_keys, &sub_values, scale);
            actual_error_max = actual_error_max.max(l2_diff(&dense_row, &sub_row));
        }
    }

    let bound = uniform_error_bound(q_norm, v_norm, dev.delta_k_max, dev.delta_v_max, mcfg.d_k());
    Ok(BoundReport {
        q_norm,
        v_norm,
        delta_k: dev.delta_k_max,
        delta_v: dev.delta_v_max,
        bound,
        actual_error_max,
        satisfied: actual_error_max <= bound + 1e-9,
    })
}

fn attend_once(q_row: &[f64], keys: &Matrix, values: &Matrix, scale: f64) -> Vec<f64> {
    let logits: Vec<f64> = (0..keys.rows())
        .map(|i| q_row.iter().zip(keys.row(i)).map(|(a, b)| a * b).sum::<f64>() * scale)
        .collect();
    let probs = softmax_slice(&logits);
    let mut out = vec![0.0; values.cols()];
    for (i, &p) in probs.iter().enumerate() {
        for (o, &v) in out.iter_mut().zip(values.row(i)) {
            *o += p * v;
        }
    }
    out
}

/// Largest per-row, per-head L2 gap between two stacked head outputs.
pub fn output_gap_per_head(a: &Matrix, b: &Matrix, d_v: usize) -> Result<f64> {
    if a.rows() != b.rows() || a.cols() != b.cols() || a.cols() % d_v != 0 {
        return Err(Error::Shape(format!(
            "gap: {}x{} vs {}x{} in chunks of {d_v}",
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols()
        )));
    }
    let mut max: f64 = 0.0;
    for t in 0..a.rows() {
        for chunk in 0..a.cols() / d_v {
            let s = chunk * d_v;
            max = max.max(l2_diff(&a.row(t)[s..s + d_v], &b.row(t)[s..s + d_v]));
        }
    }
    Ok(max)
}

/// Result of the pooling-optimality check on one (latents, alpha) pair.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OptimalityReport {
    /// Weighted squared-distance loss at the pooled point.
    pub loss: f64,
    /// Norm of the loss gradient at the pooled point.
    pub gradient_norm: f64,
    /// Random perturbation directions tried (3 step sizes each).
    pub directions: usize,
    pub passed: bool,
}

/// Verifies that the alpha-weighted pool minimizes the weighted squared
/// distance L(c) = sum_i alpha_i ||c_i - c||^2: the gradient at the pooled
/// point is (numerically) zero, and every random perturbation strictly
/// increases the loss.
pub fn check_pooling_optimality(
    group_latents: &Matrix,
    alpha: &[f64],
    rng: &mut ChaCha8Rng,
) -> Result<OptimalityReport> {
    if alpha.len() != group_latents.rows() || alpha.is_empty() {
        return Err(Error::Shape(format!(
            "{} weights for {} latents",
            alpha.len(),
            group_latents.rows()
        )));
    }
    let sum: f64 = alpha.iter().sum();
    if alpha.iter().any(|&a| a < 0.0) || (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "alpha is not a probability vector (sum {sum})"
        )));
    }
    let d = group_latents.cols();
    let c_rep = pool_semantic(alpha, group_latents, SemanticPool::Weighted)?;

    let loss_at = |c: &[f64]| -> f64 {
        (0..group_latents.rows())
            .map(|i| {
                let row = group_latents.row(i);
                alpha[i]
                    * row
                        .iter()
                        .zip(c)
                        .map(|(x, y)| (x - y) * (x - y))
                        .sum::<f64>()
            })
            .sum()
    };
    let loss = loss_at(&c_rep);

    // gradient of L at c: -2 sum_i alpha_i (c_i - c)
    let mut grad = vec![0.0; d];
    for i in 0..group_latents.rows() {
        for (gd, (&x, &c)) in grad.iter_mut().zip(group_latents.row(i).iter().zip(&c_rep)) {
            *gd += -2.0 * alpha[i] * (x - c);
        }
    }
    let gradient_norm = l2(&grad);

    let directions = 100;
    let mut passed = gradient_norm < 1e-8;
    for _ in 0..directions {
        let mut u: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        let norm = l2(&u);
        if norm == 0.0 {
            continue;
        }
        for x in &mut u {
            *x /= norm;
        }
        for eps in [1e-2, 1e-1, 1.0] {
            let moved: Vec<f64> = c_rep.iter().zip(&u).map(|(c, x)| c + eps * x).collect();
            // Exactly L(c) + eps^2 in reals; demand at least half the gap to
            // absorb rounding.
            if loss_at(&moved) < loss + eps * eps / 2.0 {
                passed = false;
            }
        }
    }
    Ok(OptimalityReport {
        loss,
        gradient_norm,
        directions,
        passed,
    })
}

/// Exact arithmetic and cache accounting for one sequence length.
///
/// Score ops count multiply-accumulates for attention scores plus value
/// mixing only; projections cost the same on both paths and are excluded.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostReport {
    pub l: usize,
    /// Full groups (0 when the sequence falls back to the dense path).
    pub m: usize,
    /// Local-window extent (== l under fallback).
    pub local_extent: usize,
    pub fallback: bool,
    pub dense_score_ops: u64,
    pub lca_score_ops: u64,
    pub dense_cache_entries: u64,
    pub lca_cache_entries: u64,
    pub dense_cache_bytes: u64,
    pub lca_cache_bytes: u64,
}

impl CostReport {
    pub fn score_ratio(&self) -> f64 {
        self.lca_score_ops as f64 / self.dense_score_ops as f64
    }

    pub fn cache_ratio(&self) -> f64 {
        self.lca_cache_entries as f64 / self.dense_cache_entries as f64
    }
}

/// Counts exact multiply-accumulates and cache footprints for a dense causal
/// pass versus the condensed pass at length `l`.
///
/// Dense: sum over queries of (t+1) keys, times (d_k + d_v) per key, per
/// head. Condensed with no mask: every query scores m + k entries. Condensed
/// with the causal rep mask: per query, only the visible representatives and
/// local tokens are scored. Under fallback (l < w + g) both sides are equal.
pub fn cost_model(
    l: usize,
    mcfg: &crate::mla::ModelConfig,
    lcfg: &LcaConfig,
    precision: Precision,
) -> Result<CostReport> {
    mcfg.validate()?;
    let per_key = (mcfg.d_k() + mcfg.d_v) as u64 * mcfg.n_heads as u64;
    let dense_score_ops = (l as u64 * (l as u64 + 1) / 2) * per_key;
    let latent_width = (mcfg.d_c + mcfg.d_r) as u64;
    let dense_cache_entries = l as u64 * latent_width;

    let (m, local_extent, fallback, lca_score_ops, lca_cache_entries) =
        match partition(l, lcfg)? {
            PartitionOutcome::Fallback => {
                (0, l, true, dense_score_ops, dense_cache_entries)
            }
            PartitionOutcome::Groups(p) => {
                let k = p.local_extent;
                let scored: u64 = match lcfg.mask_policy {
                    crate::lca::MaskPolicy::None => l as u64 * (p.m + k) as u64,
                    crate::lca::MaskPolicy::RepCausal => (0..l)
                        .map(|t| {
                            let (r, lo) =
                                visible_counts(t, p.m, l - k, k, lcfg.g, lcfg.mask_policy);
                            (r + lo) as u64
                        })
                        .sum(),
                };
                (
                    p.m,
                    k,
                    false,
                    scored * per_key,
                    (p.m + k) as u64 * latent_width,
                )
            }
        };

    let bytes = precision.bytes_per_element();
    Ok(CostReport {
        l,
        m,
        local_extent,
        fallback,
        dense_score_ops,
        lca_score_ops,
        dense_cache_entries,
        lca_cache_entries,
        dense_cache_bytes: dense_cache_entries * bytes,
        lca_cache_bytes: lca_cache_entries * bytes,
    })
}

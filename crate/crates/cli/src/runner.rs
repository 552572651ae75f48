//! Mode execution. Each mode produces one or more report records plus a list
//! of invariant violations; a non-empty violation list means the run failed
//! even if every record was written.

use std::time::Instant;

use anyhow::{Context, Result};
use rand::Rng;
use serde_json::{json, Value};

use lca_core::analysis::{
    check_error_bound, check_pooling_optimality, cost_model, measure_deviations,
    output_gap_per_head,
};
use lca_core::gen::{
    gaussian_matrix, gen_gqa_weights, gen_sequence, gen_weights, rng_for, STREAM_TRIALS,
};
use lca_core::gqa::{dense_gqa_attention, gqa_decode_step, gqa_prefill, gqa_project, GqaCache};
use lca_core::io::{
    read_cache, read_gqa_weights, read_mla_weights, write_cache, write_gqa_weights,
    write_mla_weights,
};
use lca_core::lca::{
    decode_step, partition, prefill, LcaConfig, MaskPolicy, PartitionOutcome, PositionalPool,
    SemanticPool,
};
use lca_core::mla::{dense_attention, project_latents, AttnMask, MlaWeights};
use lca_core::tensor::softmax_slice;
use lca_core::{Error as CoreError, Matrix, Precision};

use crate::config::{Mode, RunConfig};
use crate::report::{matrix_digest, slice_digest, ReportRecord, TOOL_VERSION};

/// Everything one invocation produces.
#[derive(Debug)]
pub struct RunOutcome {
    pub records: Vec<ReportRecord>,
    /// Human-readable invariant violations; empty on success.
    pub violations: Vec<String>,
}

pub fn run(cfg: &RunConfig) -> Result<RunOutcome> {
    cfg.validate()?;
    let start = Instant::now();
    match cfg.mode {
        Mode::Prefill => run_prefill(cfg, start),
        Mode::Decode => run_decode(cfg, start),
        Mode::Gqa => run_gqa(cfg, start),
        Mode::Sweep => run_sweep(cfg, start),
        Mode::VerifyBound => run_verify_bound(cfg, start),
        Mode::VerifyPooling => run_verify_pooling(cfg, start),
        Mode::Cost => run_cost(cfg, start),
        Mode::IoCheck => run_io_check(cfg, start),
    }
}

// ---- shared helpers -----------------------------------------------------

fn record(cfg: &RunConfig, config: Value, payload: Value, start: Instant) -> ReportRecord {
    ReportRecord {
        tool_version: TOOL_VERSION.to_string(),
        mode: cfg.mode.name().to_string(),
        seed: cfg.seed,
        config,
        payload,
        wall_time_ms: start.elapsed().as_millis(),
    }
}

fn quantize(m: Matrix, p: Precision) -> Matrix {
    match p {
        Precision::F64 => m,
        Precision::F32 => m.round_to_f32(),
    }
}

/// Rounds every generated weight through the storage precision; arithmetic
/// stays in f64 downstream.
fn quantize_weights(mut w: MlaWeights, p: Precision) -> MlaWeights {
    if p == Precision::F64 {
        return w;
    }
    w.w_dq = w.w_dq.round_to_f32();
    w.w_dkv = w.w_dkv.round_to_f32();
    w.w_kr = w.w_kr.round_to_f32();
    for m in w
        .w_uq
        .iter_mut()
        .chain(w.w_uk.iter_mut())
        .chain(w.w_uv.iter_mut())
        .chain(w.w_qr.iter_mut())
    {
        *m = m.round_to_f32();
    }
    w
}

fn quantize_gqa_weights(mut w: lca_core::gqa::GqaWeights, p: Precision) -> lca_core::gqa::GqaWeights {
    if p == Precision::F64 {
        return w;
    }
    for m in w
        .w_q
        .iter_mut()
        .chain(w.w_k.iter_mut())
        .chain(w.w_v.iter_mut())
    {
        *m = m.round_to_f32();
    }
    w
}

fn mla_inputs(cfg: &RunConfig, l: usize) -> Result<(MlaWeights, Matrix)> {
    let weights = quantize_weights(gen_weights(&cfg.model, cfg.seed)?, cfg.precision);
    let x = quantize(gen_sequence(l, cfg.model.d_model, cfg.seed)?, cfg.precision);
    Ok((weights, x))
}

/// Representatives the cardinality law demands once `total` tokens are in.
fn expected_reps(total: usize, g: usize, w: usize) -> usize {
    if total >= w {
        (total - w) / g
    } else {
        0
    }
}

// ---- prefill ------------------------------------------------------------

fn run_prefill(cfg: &RunConfig, start: Instant) -> Result<RunOutcome> {
    let mut violations = Vec::new();
    let (weights, x) = mla_inputs(cfg, cfg.l)?;
    let res = prefill(&x, &weights, &cfg.lca)?;
    let cache = &res.cache;
    cache.check_invariants().context("prefill cache")?;

    let want_reps = expected_reps(cfg.l, cfg.lca.g, cfg.lca.w);
    if !res.fallback && cache.reps().len() != want_reps {
        violations.push(format!(
            "prefill produced {} representatives, cardinality law wants {}",
            cache.reps().len(),
            want_reps
        ));
    }

    // Quality context: distance to the dense reference under the matching
    // mask, plus the measured per-group deviations. Skipped for very long
    // sequences where the quadratic reference is not worth the wall time.
    let mut gap = Value::Null;
    let mut deviations = Value::Null;
    if cfg.l <= 4096 {
        let positions: Vec<usize> = (0..cfg.l).collect();
        let state = project_latents(&x, &positions, &weights)?;
        let mask = match cfg.lca.mask_policy {
            MaskPolicy::RepCausal => AttnMask::Causal,
            MaskPolicy::None => AttnMask::None,
        };
        let dense = dense_attention(&state, &weights, mask)?;
        gap = json!(output_gap_per_head(&res.output, &dense, cfg.model.d_v)?);
        if !res.fallback {
            let dev = measure_deviations(&state, cache, &weights)?;
            deviations = json!({
                "delta_k_max": dev.delta_k_max,
                "delta_v_max": dev.delta_v_max,
                "mean_rel_k": dev.mean_rel_k,
                "mean_rel_v": dev.mean_rel_v,
            });
        }
    }

    let payload = json!({
        "l": cfg.l,
        "fallback": res.fallback,
        "representatives": cache.reps().len(),
        "buffer_len": cache.buffer_len(),
        "cache_entries": cache.entries(),
        "output_digest": matrix_digest(&res.output),
        "gap_vs_dense": gap,
        "deviations": deviations,
    });
    let config = json!({
        "l": cfg.l,
        "precision": cfg.precision,
        "model": cfg.model,
        "lca": cfg.lca,
    });
    Ok(RunOutcome {
        records: vec![record(cfg, config, payload, start)],
        violations,
    })
}

// ---- decode -------------------------------------------------------------

fn run_decode(cfg: &RunConfig, start: Instant) -> Result<RunOutcome> {
    let mut violations = Vec::new();
    let total_len = cfg.l + cfg.decode_steps;
    let (weights, x_all) = mla_inputs(cfg, total_len)?;
    let x_prefill = x_all.row_range(0, cfg.l);

    let res = prefill(&x_prefill, &weights, &cfg.lca)?;
    let mut cache = res.cache;
    let g = cfg.lca.g;
    let w = cfg.lca.w;

    let mut outputs = Vec::with_capacity(cfg.decode_steps * weights.config.n_heads * weights.config.d_v);
    let mut attended_last = 0usize;
    for step in 0..cfg.decode_steps {
        let reps_before = cache.reps().len();
        let buffer_before = cache.buffer_len();
        let (out, next) = decode_step(cache, x_all.row(cfg.l + step), &weights, &cfg.lca)?;
        cache = next;

        let want_attended = reps_before + buffer_before + 1;
        if out.attended_keys != want_attended {
            violations.push(format!(
                "decode step {step}: attended {} cache entries, expected {want_attended}",
                out.attended_keys
            ));
        }
        let total = cache.total_tokens();
        let want_reps = expected_reps(total, g, w);
        if cache.reps().len() != want_reps {
            violations.push(format!(
                "decode step {step}: {} representatives at {total} tokens, cardinality law wants {want_reps}",
                cache.reps().len()
            ));
        }
        if let Err(e) = cache.check_invariants() {
            violations.push(format!("decode step {step}: {e}"));
        }
        attended_last = out.attended_keys;
        outputs.extend_from_slice(&out.output);
    }

    let payload = json!({
        "l": cfg.l,
        "steps": cfg.decode_steps,
        "final_total_tokens": cache.total_tokens(),
        "final_representatives": cache.reps().len(),
        "final_buffer_len": cache.buffer_len(),
        "final_cache_entries": cache.entries(),
        "attended_last_step": attended_last,
        "outputs_digest": slice_digest(&outputs),
        "cardinality_law_held": violations.is_empty(),
    });
    let config = json!({
        "l": cfg.l,
        "decode_steps": cfg.decode_steps,
        "precision": cfg.precision,
        "model": cfg.model,
        "lca": cfg.lca,
    });
    Ok(RunOutcome {
        records: vec![record(cfg, config, payload, start)],
        violations,
    })
}

// ---- gqa ----------------------------------------------------------------

fn run_gqa(cfg: &RunConfig, start: Instant) -> Result<RunOutcome> {
    let mut violations = Vec::new();
    let d_model = cfg.gqa.d_model;
    let d_head = cfg.gqa.d_head;

    // Identity limit: g = 1, w = 0 must match dense causal attention.
    let mut id_cfg = cfg.gqa;
    id_cfg.g = 1;
    id_cfg.w = 0;
    id_cfg.n_summary_queries = 1;
    id_cfg.mask_policy = MaskPolicy::RepCausal;
    let id_weights = quantize_gqa_weights(gen_gqa_weights(&id_cfg, cfg.seed)?, cfg.precision);
    let l_id = 24;
    let x_id = quantize(gen_sequence(l_id, d_model, cfg.seed)?, cfg.precision);
    let id_res = gqa_prefill(&x_id, &id_weights)?;
    let positions: Vec<usize> = (0..l_id).collect();
    let id_proj = gqa_project(&x_id, &positions, &id_weights)?;
    let id_dense = dense_gqa_attention(&id_proj, &id_weights, AttnMask::Causal)?;
    let identity_gap = output_gap_per_head(&id_res.output, &id_dense, d_head)?;
    if identity_gap > 1e-8 {
        violations.push(format!(
            "gqa identity limit: gap {identity_gap:e} vs dense causal exceeds 1e-8"
        ));
    }

    // Fallback: one token short of the first condensation must be bit-equal.
    let weights = quantize_gqa_weights(gen_gqa_weights(&cfg.gqa, cfg.seed)?, cfg.precision);
    let l_fb = cfg.gqa.w + cfg.gqa.g - 1;
    let fallback_bitexact = if l_fb == 0 {
        Value::Null
    } else {
        let x_fb = quantize(gen_sequence(l_fb, d_model, cfg.seed)?, cfg.precision);
        let fb_res = gqa_prefill(&x_fb, &weights)?;
        let fb_pos: Vec<usize> = (0..l_fb).collect();
        let fb_proj = gqa_project(&x_fb, &fb_pos, &weights)?;
        let fb_dense = dense_gqa_attention(&fb_proj, &weights, AttnMask::Causal)?;
        let exact = fb_res.fallback && matrix_digest(&fb_res.output) == matrix_digest(&fb_dense);
        if !exact {
            violations.push("gqa fallback output is not bit-identical to dense causal".into());
        }
        json!(exact)
    };

    // Production prefill at the configured length.
    let x = quantize(gen_sequence(cfg.l, d_model, cfg.seed)?, cfg.precision);
    let res = gqa_prefill(&x, &weights)?;
    res.cache.check_invariants().context("gqa prefill cache")?;
    let want_reps = expected_reps(cfg.l, cfg.gqa.g, cfg.gqa.w);
    if !res.fallback && res.cache.reps_len() != want_reps {
        violations.push(format!(
            "gqa prefill produced {} representatives, cardinality law wants {}",
            res.cache.reps_len(),
            want_reps
        ));
    }

    // Decode from an empty cache: the same token-count laws must hold.
    let mut cache = GqaCache::empty(&cfg.gqa)?;
    let x_dec = quantize(
        gen_sequence(cfg.decode_steps, d_model, cfg.seed)?,
        cfg.precision,
    );
    let mut dec_outputs = Vec::new();
    for step in 0..cfg.decode_steps {
        let reps_before = cache.reps_len();
        let buffer_before = cache.buffer_len();
        let (out, next) = gqa_decode_step(cache, x_dec.row(step), &weights)?;
        cache = next;
        if out.attended_keys != reps_before + buffer_before + 1 {
            violations.push(format!(
                "gqa decode step {step}: attended {} entries, expected {}",
                out.attended_keys,
                reps_before + buffer_before + 1
            ));
        }
        let want = expected_reps(cache.total_tokens(), cfg.gqa.g, cfg.gqa.w);
        if cache.reps_len() != want {
            violations.push(format!(
                "gqa decode step {step}: {} representatives, cardinality law wants {want}",
                cache.reps_len()
            ));
        }
        if let Err(e) = cache.check_invariants() {
            violations.push(format!("gqa decode step {step}: {e}"));
        }
        dec_outputs.extend_from_slice(&out.output);
    }

    let payload = json!({
        "identity_gap": identity_gap,
        "fallback_bitexact": fallback_bitexact,
        "prefill": {
            "l": cfg.l,
            "fallback": res.fallback,
            "representatives": res.cache.reps_len(),
            "buffer_len": res.cache.buffer_len(),
            "cache_entries": res.cache.entries(),
            "output_digest": matrix_digest(&res.output),
        },
        "decode": {
            "steps": cfg.decode_steps,
            "final_representatives": cache.reps_len(),
            "final_buffer_len": cache.buffer_len(),
            "outputs_digest": slice_digest(&dec_outputs),
        },
        "laws_held": violations.is_empty(),
    });
    let config = json!({
        "l": cfg.l,
        "decode_steps": cfg.decode_steps,
        "precision": cfg.precision,
        "gqa": cfg.gqa,
    });
    Ok(RunOutcome {
        records: vec![record(cfg, config, payload, start)],
        violations,
    })
}

// ---- sweep ---------------------------------------------------------------

fn pooling_pairs(cfg: &RunConfig) -> Vec<(SemanticPool, PositionalPool)> {
    if !cfg.sweep.pooling_matrix {
        return vec![(cfg.lca.semantic_pool, cfg.lca.positional_pool)];
    }
    let sems = [
        SemanticPool::Weighted,
        SemanticPool::Mean,
        SemanticPool::MaxPool,
        SemanticPool::MaxSelect,
    ];
    let poss = [
        PositionalPool::Weighted,
        PositionalPool::Mean,
        PositionalPool::MaxPool,
        PositionalPool::MaxSelect,
    ];
    let mut pairs = Vec::with_capacity(16);
    for s in sems {
        for p in poss {
            pairs.push((s, p));
        }
    }
    pairs
}

fn run_sweep(cfg: &RunConfig, start: Instant) -> Result<RunOutcome> {
    let violations = Vec::new();
    let l_probe = cfg.l.min(160);
    let weights = quantize_weights(gen_weights(&cfg.model, cfg.seed)?, cfg.precision);
    let x_probe = quantize(
        gen_sequence(l_probe, cfg.model.d_model, cfg.seed)?,
        cfg.precision,
    );
    let positions: Vec<usize> = (0..l_probe).collect();
    let state = project_latents(&x_probe, &positions, &weights)?;
    let dense_causal = dense_attention(&state, &weights, AttnMask::Causal)?;
    let dense_none = dense_attention(&state, &weights, AttnMask::None)?;

    let config = json!({
        "l": cfg.l,
        "probe_l": l_probe,
        "precision": cfg.precision,
        "model": cfg.model,
        "mask_policy": cfg.lca.mask_policy,
        "sweep": cfg.sweep,
    });

    let mut records = Vec::new();
    for &g in &cfg.sweep.g {
        for &w in &cfg.sweep.w {
            for &n in &cfg.sweep.n_summary_queries {
                for (sp, pp) in pooling_pairs(cfg) {
                    let cell = LcaConfig {
                        g,
                        w,
                        n_summary_queries: n.min(w + g).max(1),
                        mask_policy: cfg.lca.mask_policy,
                        semantic_pool: sp,
                        positional_pool: pp,
                    };
                    cell.validate()?;
                    let cost = cost_model(cfg.l, &cfg.model, &cell, cfg.precision)?;
                    let res = prefill(&x_probe, &weights, &cell)?;
                    let reference = if res.fallback {
                        &dense_causal
                    } else {
                        match cell.mask_policy {
                            MaskPolicy::RepCausal => &dense_causal,
                            MaskPolicy::None => &dense_none,
                        }
                    };
                    let probe_gap =
                        output_gap_per_head(&res.output, reference, cfg.model.d_v)?;
                    let payload = json!({
                        "g": g,
                        "w": w,
                        "n_summary_queries": cell.n_summary_queries,
                        "semantic_pool": sp,
                        "positional_pool": pp,
                        "cost": cost,
                        "score_ratio": cost.score_ratio(),
                        "cache_ratio": cost.cache_ratio(),
                        "probe": {
                            "l": l_probe,
                            "fallback": res.fallback,
                            "gap_vs_dense": probe_gap,
                        },
                    });
                    records.push(record(cfg, config.clone(), payload, start));
                }
            }
        }
    }
    Ok(RunOutcome {
        records,
        violations,
    })
}

// ---- verify: error bound --------------------------------------------------

fn run_verify_bound(cfg: &RunConfig, start: Instant) -> Result<RunOutcome> {
    let mut violations = Vec::new();
    let mut trng = rng_for(cfg.seed, STREAM_TRIALS);
    let mut satisfied = 0usize;
    let mut production_within_bound = 0usize;
    let mut worst_ratio = 0.0f64;
    let mut worst: Value = Value::Null;

    for trial in 0..cfg.trials {
        let mcfg = lca_core::mla::ModelConfig {
            d_model: trng.gen_range(4..=12),
            d_cq: trng.gen_range(2..=6),
            d_c: trng.gen_range(2..=6),
            d_k_prime: trng.gen_range(2..=5),
            d_r: 2 * trng.gen_range(1..=2),
            d_v: trng.gen_range(2..=5),
            n_heads: trng.gen_range(1..=3),
            rope_base: 10_000.0,
        };
        let g = trng.gen_range(1..=6);
        let w = trng.gen_range(0..=8);
        let mut lcfg = LcaConfig::new(g, w);
        lcfg.mask_policy = MaskPolicy::None;
        let l = trng.gen_range(w + g..=w + g + 40);
        let weights = gen_weights(&mcfg, trng.gen::<u64>())?;
        let x = gen_sequence(l, mcfg.d_model, trng.gen::<u64>())?;

        let res = prefill(&x, &weights, &lcfg)?;
        let positions: Vec<usize> = (0..l).collect();
        let state = project_latents(&x, &positions, &weights)?;
        let rep = check_error_bound(&state, &res.cache, &weights)?;
        if rep.satisfied {
            satisfied += 1;
        } else {
            violations.push(format!(
                "trial {trial}: substitution error {:.6e} exceeds bound {:.6e}",
                rep.actual_error_max, rep.bound
            ));
        }
        let ratio = if rep.bound > 0.0 {
            rep.actual_error_max / rep.bound
        } else {
            0.0
        };
        if ratio >= worst_ratio {
            worst_ratio = ratio;
            worst = json!({
                "trial": trial,
                "l": l, "g": g, "w": w,
                "report": rep,
            });
        }
        // Informational: the fused production output folds multiplicity into
        // the softmax, so its gap is reported but not held to the bound.
        let dense = dense_attention(&state, &weights, AttnMask::None)?;
        let prod_gap = output_gap_per_head(&res.output, &dense, mcfg.d_v)?;
        if prod_gap <= rep.bound + 1e-9 {
            production_within_bound += 1;
        }
    }

    let payload = json!({
        "trials": cfg.trials,
        "satisfied": satisfied,
        "all_satisfied": satisfied == cfg.trials,
        "worst_error_to_bound_ratio": worst_ratio,
        "worst_case": worst,
        "production_gap_within_bound": production_within_bound,
    });
    let config = json!({ "trials": cfg.trials });
    Ok(RunOutcome {
        records: vec![record(cfg, config, payload, start)],
        violations,
    })
}

// ---- verify: pooling optimality -------------------------------------------

fn run_verify_pooling(cfg: &RunConfig, start: Instant) -> Result<RunOutcome> {
    let mut violations = Vec::new();
    let mut trng = rng_for(cfg.seed, STREAM_TRIALS);
    let mut passed = 0usize;
    let mut max_gradient = 0.0f64;
    let mut max_loss = 0.0f64;

    for trial in 0..cfg.trials {
        let g = trng.gen_range(1..=16);
        let d = trng.gen_range(1..=24);
        let latents = gaussian_matrix(&mut trng, g, d, 1.0)?;
        let logits = gaussian_matrix(&mut trng, 1, g, 1.0)?;
        let alpha = softmax_slice(logits.row(0));
        let rep = check_pooling_optimality(&latents, &alpha, &mut trng)?;
        if rep.passed {
            passed += 1;
        } else {
            violations.push(format!(
                "trial {trial}: pooled point failed optimality (gradient norm {:.3e})",
                rep.gradient_norm
            ));
        }
        max_gradient = max_gradient.max(rep.gradient_norm);
        max_loss = max_loss.max(rep.loss);
    }

    let payload = json!({
        "trials": cfg.trials,
        "passed": passed,
        "all_passed": passed == cfg.trials,
        "max_gradient_norm": max_gradient,
        "max_loss": max_loss,
    });
    let config = json!({ "trials": cfg.trials });
    Ok(RunOutcome {
        records: vec![record(cfg, config, payload, start)],
        violations,
    })
}

// ---- cost ------------------------------------------------------------------

fn run_cost(cfg: &RunConfig, start: Instant) -> Result<RunOutcome> {
    let report = cost_model(cfg.l, &cfg.model, &cfg.lca, cfg.precision)?;
    let payload = json!({
        "report": report,
        "score_ratio": report.score_ratio(),
        "cache_ratio": report.cache_ratio(),
        "score_reduction_percent": 100.0 * (1.0 - report.score_ratio()),
        "cache_reduction_percent": 100.0 * (1.0 - report.cache_ratio()),
    });
    let config = json!({
        "l": cfg.l,
        "precision": cfg.precision,
        "model": cfg.model,
        "lca": cfg.lca,
    });
    Ok(RunOutcome {
        records: vec![record(cfg, config, payload, start)],
        violations: Vec::new(),
    })
}

// ---- io-check ---------------------------------------------------------------

fn run_io_check(cfg: &RunConfig, start: Instant) -> Result<RunOutcome> {
    let mut violations = Vec::new();
    let dir = cfg.out_dir.join("io");
    std::fs::create_dir_all(&dir)
        .with_context(|| format!("cannot create {}", dir.display()))?;

    // Model weights round trip.
    let weights = gen_weights(&cfg.model, cfg.seed)?;
    let mlaw_path = dir.join("model.mlaw");
    write_mla_weights(&mlaw_path, &weights)?;
    let mlaw_ok = read_mla_weights(&mlaw_path)? == weights;

    // Grouped-query weights round trip.
    let gqa_weights = gen_gqa_weights(&cfg.gqa, cfg.seed)?;
    let gqaw_path = dir.join("model.gqaw");
    write_gqa_weights(&gqaw_path, &gqa_weights)?;
    let gqaw_ok = read_gqa_weights(&gqaw_path)? == gqa_weights;

    // Cache round trip from a real (condensed) prefill.
    let mut small = LcaConfig::new(4, 8);
    small.n_summary_queries = 4;
    let l = 23;
    let x = gen_sequence(l, cfg.model.d_model, cfg.seed)?;
    let res = prefill(&x, &weights, &small)?;
    if matches!(partition(l, &small)?, PartitionOutcome::Fallback) {
        violations.push("io-check cache fixture unexpectedly fell back".into());
    }
    let cache_path = dir.join("state.lcac");
    write_cache(&cache_path, &res.cache)?;
    let lcac_ok = read_cache(&cache_path)? == res.cache;

    // A wrong magic number and a truncated stream must both be rejected as
    // format errors, not panics or silent misreads.
    let bogus_path = dir.join("bogus.mlaw");
    std::fs::write(&bogus_path, b"XXXX\x01\x00\x00\x00junk")?;
    let magic_rejected = matches!(read_mla_weights(&bogus_path), Err(CoreError::Format(_)));

    let bytes = std::fs::read(&mlaw_path)?;
    let cut_path = dir.join("truncated.mlaw");
    std::fs::write(&cut_path, &bytes[..bytes.len() / 2])?;
    let truncation_rejected = matches!(read_mla_weights(&cut_path), Err(CoreError::Format(_)));

    for (ok, what) in [
        (mlaw_ok, "model weights round trip"),
        (gqaw_ok, "grouped-query weights round trip"),
        (lcac_ok, "cache round trip"),
        (magic_rejected, "wrong-magic rejection"),
        (truncation_rejected, "truncation rejection"),
    ] {
        if !ok {
            violations.push(format!("io-check failed: {what}"));
        }
    }

    let payload = json!({
        "dir": dir.display().to_string(),
        "mlaw_roundtrip": mlaw_ok,
        "gqaw_roundtrip": gqaw_ok,
        "lcac_roundtrip": lcac_ok,
        "wrong_magic_rejected": magic_rejected,
        "truncation_rejected": truncation_rejected,
        "all_ok": violations.is_empty(),
    });
    let config = json!({ "model": cfg.model, "gqa": cfg.gqa });
    Ok(RunOutcome {
        records: vec![record(cfg, config, payload, start)],
        violations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;

    fn quick(mode: Mode) -> RunConfig {
        let mut cfg = RunConfig::new(mode);
        cfg.l = 48;
        cfg.lca = LcaConfig::new(4, 8);
        cfg.gqa.g = 4;
        cfg.gqa.w = 8;
        cfg.gqa.n_summary_queries = 4;
        cfg.decode_steps = 20;
        cfg.trials = 5;
        cfg.sweep.g = vec![2, 4];
        cfg.sweep.w = vec![0, 8];
        cfg.sweep.n_summary_queries = vec![4];
        cfg.sweep.pooling_matrix = false;
        cfg
    }

    #[test]
    fn every_mode_runs_clean_on_a_small_config() {
        for mode in [
            Mode::Prefill,
            Mode::Decode,
            Mode::Gqa,
            Mode::Cost,
            Mode::VerifyBound,
            Mode::VerifyPooling,
        ] {
            let cfg = quick(mode);
            let out = run(&cfg).unwrap();
            assert!(
                out.violations.is_empty(),
                "{}: {:?}",
                cfg.mode.name(),
                out.violations
            );
            assert!(!out.records.is_empty());
        }
    }

    #[test]
    fn sweep_emits_one_record_per_cell() {
        let cfg = quick(Mode::Sweep);
        let out = run(&cfg).unwrap();
        assert_eq!(out.records.len(), 2 * 2); // g x w, single pooling pair
        assert!(out.violations.is_empty());

        let mut matrix_cfg = quick(Mode::Sweep);
        matrix_cfg.sweep.pooling_matrix = true;
        let out = run(&matrix_cfg).unwrap();
        assert_eq!(out.records.len(), 2 * 2 * 16);
    }

    #[test]
    fn io_check_round_trips_in_a_temp_dir() {
        let mut cfg = quick(Mode::IoCheck);
        cfg.out_dir = std::env::temp_dir().join(format!("lca-io-{}", std::process::id()));
        let out = run(&cfg).unwrap();
        assert!(out.violations.is_empty(), "{:?}", out.violations);
        assert_eq!(out.records[0].payload["all_ok"], serde_json::json!(true));
        std::fs::remove_dir_all(&cfg.out_dir).ok();
    }

    #[test]
    fn runs_are_deterministic_for_a_fixed_seed() {
        let cfg = quick(Mode::Prefill);
        let a = run(&cfg).unwrap();
        let b = run(&cfg).unwrap();
        assert_eq!(
            a.records[0].deterministic_bytes(),
            b.records[0].deterministic_bytes()
        );

        let mut other = quick(Mode::Prefill);
        other.seed = 43;
        let c = run(&other).unwrap();
        assert_ne!(
            a.records[0].deterministic_bytes(),
            c.records[0].deterministic_bytes()
        );
    }
}

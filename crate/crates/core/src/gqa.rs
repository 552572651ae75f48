//! Group-wise condensation grafted onto plain grouped-query attention.
//!
//! Unlike the latent path there is no shared compressed stream: each kv head
//! caches full (rotated) keys and values. Condensation therefore max-selects
//! the anchor's whole key row (keeping its rotary information intact) and
//! weight-pools the values, per kv head, with the summary query averaged over
//! the query heads mapped to that kv head.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::lca::{partition, summary_query, visible_counts, LcaConfig, MaskPolicy, PartitionOutcome};
use crate::mla::{scaled_attention, AttnMask};
use crate::tensor::{rope_apply, softmax_slice, Matrix, RopeConfig};

/// Grouped-query attention dimensions plus condensation parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GqaConfig {
    pub d_model: usize,
    pub n_q_heads: usize,
    pub n_kv_heads: usize,
    /// Per-head width; rotary embedding covers all of it, so it must be even.
    pub d_head: usize,
    pub rope_base: f64,
    pub g: usize,
    pub w: usize,
    pub n_summary_queries: usize,
    pub mask_policy: MaskPolicy,
}

impl GqaConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("d_model", self.d_model),
            ("n_q_heads", self.n_q_heads),
            ("n_kv_heads", self.n_kv_heads),
            ("d_head", self.d_head),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.n_q_heads % self.n_kv_heads != 0 {
            return Err(Error::Config(format!(
                "{} query heads do not divide evenly over {} kv heads",
                self.n_q_heads, self.n_kv_heads
            )));
        }
        if self.d_head % 2 != 0 {
            return Err(Error::Config(format!(
                "d_head must be even for full-width rotation, got {}",
                self.d_head
            )));
        }
        if !(self.rope_base > 1.0) {
            return Err(Error::Config(format!(
                "rope_base must exceed 1, got {}",
                self.rope_base
            )));
        }
        self.condensation().validate()
    }

    /// Query heads sharing each kv head.
    pub fn heads_per_kv(&self) -> usize {
        self.n_q_heads / self.n_kv_heads
    }

    /// kv head that query head `h` reads from (contiguous grouping).
    pub fn kv_head_of(&self, q_head: usize) -> usize {
        q_head / self.heads_per_kv()
    }

    pub fn rope(&self) -> Result<RopeConfig> {
        RopeConfig::new(self.d_head, self.rope_base)
    }

    /// The shared condensation schedule (pool modes are fixed by this module:
    /// keys max-select, values weighted).
    pub fn condensation(&self) -> LcaConfig {
        let mut c = LcaConfig::new(self.g, self.w);
        c.n_summary_queries = self.n_summary_queries;
        c.mask_policy = self.mask_policy;
        c
    }
}

/// Per-head projection weights.
#[derive(Debug, Clone, PartialEq)]
pub struct GqaWeights {
    pub config: GqaConfig,
    /// Per query head, d_model x d_head.
    pub w_q: Vec<Matrix>,
    /// Per kv head, d_model x d_head.
    pub w_k: Vec<Matrix>,
    /// Per kv head, d_model x d_head.
    pub w_v: Vec<Matrix>,
}

impl GqaWeights {
    pub fn validate(&self) -> Result<()> {
        let c = &self.config;
        c.validate()?;
        for (name, mats, count) in [
            ("w_q", &self.w_q, c.n_q_heads),
            ("w_k", &self.w_k, c.n_kv_heads),
            ("w_v", &self.w_v, c.n_kv_heads),
        ] {
            if mats.len() != count {
                return Err(Error::Shape(format!(
                    "{name}: {count} heads declared, {} matrices present",
                    mats.len()
                )));
            }
            for (h, m) in mats.iter().enumerate() {
                if (m.rows(), m.cols()) != (c.d_model, c.d_head) {
                    return Err(Error::Shape(format!(
                        "{name}[{h}]: expected {}x{}, got {}x{}",
                        c.d_model,
                        c.d_head,
                        m.rows(),
                        m.cols()
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Rotated queries per query head, rotated keys and plain values per kv head.
#[derive(Debug, Clone, PartialEq)]
pub struct GqaProjection {
    pub queries: Vec<Matrix>,
    pub keys: Vec<Matrix>,
    pub values: Vec<Matrix>,
    pub positions: Vec<usize>,
}

/// Projects a token block at the given absolute positions.
pub fn gqa_project(x: &Matrix, positions: &[usize], w: &GqaWeights) -> Result<GqaProjection> {
    if x.cols() != w.config.d_model {
        return Err(Error::Shape(format!(
            "token block has width {}, model width is {}",
            x.cols(),
            w.config.d_model
        )));
    }
    let rope = w.config.rope()?;
    let mut queries = Vec::with_capacity(w.config.n_q_heads);
    for wq in &w.w_q {
        queries.push(rope_apply(&x.matmul(wq)?, positions, &rope)?);
    }
    let mut keys = Vec::with_capacity(w.config.n_kv_heads);
    let mut values = Vec::with_capacity(w.config.n_kv_heads);
    for (wk, wv) in w.w_k.iter().zip(&w.w_v) {
        keys.push(rope_apply(&x.matmul(wk)?, positions, &rope)?);
        values.push(x.matmul(wv)?);
    }
    Ok(GqaProjection {
        queries,
        keys,
        values,
        positions: positions.to_vec(),
    })
}

/// Dense grouped-query attention baseline: every query head attends over its
/// kv head's full history. Output is L x (n_q_heads * d_head).
pub fn dense_gqa_attention(proj: &GqaProjection, w: &GqaWeights, mask: AttnMask) -> Result<Matrix> {
    let mut out: Option<Matrix> = None;
    for (h, q) in proj.queries.iter().enumerate() {
        let kv = w.config.kv_head_of(h);
        let head = scaled_attention(q, &proj.keys[kv], &proj.values[kv], mask)?;
        out = Some(match out {
            None => head,
            Some(acc) => acc.concat_cols(&head)?,
        });
    }
    out.ok_or_else(|| Error::Shape("no query heads".into()))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Condenses one group for one kv head: importance from the summary query
/// against the group's rotated keys, anchor's key row selected verbatim,
/// values pooled by the importance weights.
pub fn gqa_condense_group(
    q_bar_kv: &[f64],
    keys: &Matrix,
    values: &Matrix,
) -> Result<(Vec<f64>, Vec<f64>, usize)> {
    if keys.rows() == 0 || keys.rows() != values.rows() || keys.cols() != q_bar_kv.len() {
        return Err(Error::Shape(format!(
            "condense: {} keys x{}, {} values, summary of length {}",
            keys.rows(),
            keys.cols(),
            values.rows(),
            q_bar_kv.len()
        )));
    }
    let scale = 1.0 / (keys.cols() as f64).sqrt();
    let logits: Vec<f64> = (0..keys.rows())
        .map(|i| dot(q_bar_kv, keys.row(i)) * scale)
        .collect();
    let alpha = softmax_slice(&logits);
    let mut anchor = 0;
    for (i, &a) in alpha.iter().enumerate().skip(1) {
        if a > alpha[anchor] {
            anchor = i;
        }
    }
    let k_rep = keys.row(anchor).to_vec();
    let mut v_rep = vec![0.0; values.cols()];
    for (i, &a) in alpha.iter().enumerate() {
        for (o, &v) in v_rep.iter_mut().zip(values.row(i)) {
            *o += a * v;
        }
    }
    Ok((k_rep, v_rep, anchor))
}

/// Decode-time state: per-kv-head representatives plus a full-fidelity
/// buffer, and the rolling query rows the next condensation needs.
#[derive(Debug, Clone, PartialEq)]
pub struct GqaCache {
    group_size: usize,
    window: usize,
    n_summary_queries: usize,
    /// Per kv head: condensed keys, m x d_head.
    rep_keys: Vec<Matrix>,
    /// Per kv head: condensed values, m x d_head.
    rep_values: Vec<Matrix>,
    /// Per kv head: the anchor token position of each representative.
    rep_anchor_positions: Vec<Vec<usize>>,
    /// Per kv head: recent keys at full fidelity.
    buffer_keys: Vec<Matrix>,
    buffer_values: Vec<Matrix>,
    buffer_positions: Vec<usize>,
    /// Per query head: last n_summary_queries rotated query rows.
    queries: Vec<Matrix>,
    total_tokens: usize,
}

impl GqaCache {
    pub fn empty(cfg: &GqaConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(GqaCache {
            group_size: cfg.g,
            window: cfg.w,
            n_summary_queries: cfg.n_summary_queries,
            rep_keys: vec![Matrix::zeros(0, cfg.d_head); cfg.n_kv_heads],
            rep_values: vec![Matrix::zeros(0, cfg.d_head); cfg.n_kv_heads],
            rep_anchor_positions: vec![Vec::new(); cfg.n_kv_heads],
            buffer_keys: vec![Matrix::zeros(0, cfg.d_head); cfg.n_kv_heads],
            buffer_values: vec![Matrix::zeros(0, cfg.d_head); cfg.n_kv_heads],
            buffer_positions: Vec::new(),
            queries: vec![Matrix::zeros(0, cfg.d_head); cfg.n_q_heads],
            total_tokens: 0,
        })
    }

    pub fn reps_len(&self) -> usize {
        self.rep_keys[0].rows()
    }

    pub fn buffer_len(&self) -> usize {
        self.buffer_positions.len()
    }

    pub fn entries(&self) -> usize {
        self.reps_len() + self.buffer_len()
    }

    pub fn total_tokens(&self) -> usize {
        self.total_tokens
    }

    pub fn rep_keys(&self) -> &[Matrix] {
        &self.rep_keys
    }

    pub fn rep_values(&self) -> &[Matrix] {
        &self.rep_values
    }

    pub fn rep_anchor_positions(&self) -> &[Vec<usize>] {
        &self.rep_anchor_positions
    }

    pub fn buffer_positions(&self) -> &[usize] {
        &self.buffer_positions
    }

    pub fn check_invariants(&self) -> Result<()> {
        if self.reps_len() * self.group_size + self.buffer_len() != self.total_tokens {
            return Err(Error::Consistency(format!(
                "{} reps x g={} + {} buffered != {} total",
                self.reps_len(),
                self.group_size,
                self.buffer_len(),
                self.total_tokens
            )));
        }
        if self.buffer_len() >= self.window + self.group_size {
            return Err(Error::Consistency(format!(
                "buffer holds {} entries, threshold is {}",
                self.buffer_len(),
                self.window + self.group_size
            )));
        }
        Ok(())
    }

    fn push_token(&mut self, proj: &GqaProjection, row: usize, position: usize) -> Result<()> {
        for u in 0..self.buffer_keys.len() {
            self.buffer_keys[u].push_row(proj.keys[u].row(row))?;
            self.buffer_values[u].push_row(proj.values[u].row(row))?;
        }
        self.buffer_positions.push(position);
        self.total_tokens += 1;
        Ok(())
    }

    fn push_query_rows(&mut self, proj: &GqaProjection, row: usize) -> Result<()> {
        for (store, q) in self.queries.iter_mut().zip(&proj.queries) {
            store.push_row(q.row(row))?;
            if store.rows() > self.n_summary_queries {
                store.drop_front_rows(store.rows() - self.n_summary_queries);
            }
        }
        Ok(())
    }
}

fn check_cache_matches_config(cache: &GqaCache, cfg: &GqaConfig) -> Result<()> {
    if cache.group_size != cfg.g
        || cache.window != cfg.w
        || cache.n_summary_queries != cfg.n_summary_queries
        || cache.queries.len() != cfg.n_q_heads
        || cache.rep_keys.len() != cfg.n_kv_heads
    {
        return Err(Error::Consistency(
            "cache does not match the supplied config".into(),
        ));
    }
    Ok(())
}

/// Mean of the per-query-head summary rows over the query heads mapped to
/// each kv head.
fn kv_summary(queries: &[Matrix], cfg: &GqaConfig, n: usize) -> Result<Vec<Vec<f64>>> {
    let per_head = summary_query(queries, n)?;
    let hpk = cfg.heads_per_kv();
    let mut out = Vec::with_capacity(cfg.n_kv_heads);
    for u in 0..cfg.n_kv_heads {
        let mut mean = vec![0.0; cfg.d_head];
        for h in u * hpk..(u + 1) * hpk {
            for (m, v) in mean.iter_mut().zip(&per_head[h]) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= hpk as f64;
        }
        out.push(mean);
    }
    Ok(out)
}

/// Result of a grouped-query prefill pass.
#[derive(Debug, Clone)]
pub struct GqaPrefillResult {
    /// L x (n_q_heads * d_head) attention output.
    pub output: Matrix,
    pub cache: GqaCache,
    pub fallback: bool,
}

/// Fused prefill with per-kv-head condensation. Mirrors the latent engine:
/// sequences shorter than w + g take the dense causal path bit-for-bit.
pub fn gqa_prefill(x: &Matrix, weights: &GqaWeights) -> Result<GqaPrefillResult> {
    weights.validate()?;
    let cfg = &weights.config;
    let l = x.rows();
    let positions: Vec<usize> = (0..l).collect();
    let proj = gqa_project(x, &positions, weights)?;
    let lcfg = cfg.condensation();

    let part = match partition(l, &lcfg)? {
        PartitionOutcome::Fallback => {
            let output = dense_gqa_attention(&proj, weights, AttnMask::Causal)?;
            let mut cache = GqaCache::empty(cfg)?;
            for t in 0..l {
                cache.push_token(&proj, t, t)?;
            }
            let stored = cfg.n_summary_queries.min(l);
            for h in 0..cfg.n_q_heads {
                let q = &proj.queries[h];
                cache.queries[h] = q.row_range(q.rows() - stored, q.rows());
            }
            return Ok(GqaPrefillResult {
                output,
                cache,
                fallback: true,
            });
        }
        PartitionOutcome::Groups(p) => p,
    };

    let q_bar = kv_summary(&proj.queries, cfg, cfg.n_summary_queries)?;
    let mut cache = GqaCache::empty(cfg)?;
    for u in 0..cfg.n_kv_heads {
        for &(start, end) in &part.group_bounds {
            let (k_rep, v_rep, anchor) = gqa_condense_group(
                &q_bar[u],
                &proj.keys[u].row_range(start, end),
                &proj.values[u].row_range(start, end),
            )?;
            cache.rep_keys[u].push_row(&k_rep)?;
            cache.rep_values[u].push_row(&v_rep)?;
            cache.rep_anchor_positions[u].push(start + anchor);
        }
    }

    let local_start = l - part.local_extent;
    let scale = 1.0 / (cfg.d_head as f64).sqrt();
    let mut output = Matrix::zeros(l, cfg.n_q_heads * cfg.d_head);
    for h in 0..cfg.n_q_heads {
        let u = cfg.kv_head_of(h);
        let rep_k = &cache.rep_keys[u];
        let rep_v = &cache.rep_values[u];
        let q = &proj.queries[h];
        for t in 0..l {
            let (vis_reps, vis_locals) = visible_counts(
                t,
                part.m,
                local_start,
                part.local_extent,
                cfg.g,
                cfg.mask_policy,
            );
            if vis_reps + vis_locals == 0 {
                continue; // zero row: nothing visible yet
            }
            let q_row = q.row(t);
            let mut logits = Vec::with_capacity(vis_reps + vis_locals);
            for j in 0..vis_reps {
                logits.push(dot(q_row, rep_k.row(j)) * scale);
            }
            for i in 0..vis_locals {
                logits.push(dot(q_row, proj.keys[u].row(local_start + i)) * scale);
            }
            let probs = softmax_slice(&logits);
            let out_row =
                &mut output.data_mut()[t * cfg.n_q_heads * cfg.d_head + h * cfg.d_head..][..cfg.d_head];
            for (j, &p) in probs[..vis_reps].iter().enumerate() {
                for (o, &v) in out_row.iter_mut().zip(rep_v.row(j)) {
                    *o += p * v;
                }
            }
            for (i, &p) in probs[vis_reps..].iter().enumerate() {
                for (o, &v) in out_row.iter_mut().zip(proj.values[u].row(local_start + i)) {
                    *o += p * v;
                }
            }
        }
    }

    for t in local_start..l {
        cache.push_token(&proj, t, t)?;
    }
    cache.total_tokens = l;
    for h in 0..cfg.n_q_heads {
        let q = &proj.queries[h];
        cache.queries[h] = q.row_range(q.rows() - cfg.n_summary_queries, q.rows());
    }
    cache.check_invariants()?;
    Ok(GqaPrefillResult {
        output,
        cache,
        fallback: false,
    })
}

/// Output of one grouped-query decode step.
#[derive(Debug, Clone, PartialEq)]
pub struct GqaDecodeOutput {
    /// Concatenated head outputs, length n_q_heads * d_head.
    pub output: Vec<f64>,
    /// Cache entries the new token attended to (itself included).
    pub attended_keys: usize,
}

/// Absorbs one new token; same schedule as the latent engine's decode step.
pub fn gqa_decode_step(
    cache: GqaCache,
    x_new: &[f64],
    weights: &GqaWeights,
) -> Result<(GqaDecodeOutput, GqaCache)> {
    let cfg = &weights.config;
    check_cache_matches_config(&cache, cfg)?;
    let x = Matrix::from_vec(1, x_new.len(), x_new.to_vec())?;
    let position = cache.total_tokens;
    let proj = gqa_project(&x, &[position], weights)?;

    let mut cache = cache;
    cache.push_query_rows(&proj, 0)?;
    cache.push_token(&proj, 0, position)?;

    let attended_keys = cache.entries();
    let scale = 1.0 / (cfg.d_head as f64).sqrt();
    let mut output = vec![0.0; cfg.n_q_heads * cfg.d_head];
    for h in 0..cfg.n_q_heads {
        let u = cfg.kv_head_of(h);
        let q_row = proj.queries[h].row(0);
        let m = cache.rep_keys[u].rows();
        let mut logits = Vec::with_capacity(attended_keys);
        for j in 0..m {
            logits.push(dot(q_row, cache.rep_keys[u].row(j)) * scale);
        }
        for i in 0..cache.buffer_keys[u].rows() {
            logits.push(dot(q_row, cache.buffer_keys[u].row(i)) * scale);
        }
        let probs = softmax_slice(&logits);
        let out = &mut output[h * cfg.d_head..(h + 1) * cfg.d_head];
        for (j, &p) in probs[..m].iter().enumerate() {
            for (o, &v) in out.iter_mut().zip(cache.rep_values[u].row(j)) {
                *o += p * v;
            }
        }
        for (i, &p) in probs[m..].iter().enumerate() {
            for (o, &v) in out.iter_mut().zip(cache.buffer_values[u].row(i)) {
                *o += p * v;
            }
        }
    }

    let cache = gqa_maybe_condense(cache, weights)?;
    Ok((
        GqaDecodeOutput {
            output,
            attended_keys,
        },
        cache,
    ))
}

/// Condenses the earliest g buffered tokens (per kv head, in lockstep) while
/// the buffer holds at least w + g entries.
pub fn gqa_maybe_condense(cache: GqaCache, weights: &GqaWeights) -> Result<GqaCache> {
    let cfg = &weights.config;
    check_cache_matches_config(&cache, cfg)?;
    let mut cache = cache;
    while cache.buffer_len() >= cache.window + cache.group_size {
        let g = cache.group_size;
        if cache.queries.iter().any(|q| q.rows() == 0) {
            return Err(Error::Consistency(
                "condensation requires stored summary queries".into(),
            ));
        }
        let stored = cache.queries[0].rows().min(cfg.n_summary_queries);
        let q_bar = kv_summary(&cache.queries, cfg, stored)?;
        let first_position = cache.buffer_positions[0];
        for u in 0..cfg.n_kv_heads {
            let (k_rep, v_rep, anchor) = gqa_condense_group(
                &q_bar[u],
                &cache.buffer_keys[u].row_range(0, g),
                &cache.buffer_values[u].row_range(0, g),
            )?;
            cache.rep_keys[u].push_row(&k_rep)?;
            cache.rep_values[u].push_row(&v_rep)?;
            cache.rep_anchor_positions[u].push(first_position + anchor);
            cache.buffer_keys[u].drop_front_rows(g);
            cache.buffer_values[u].drop_front_rows(g);
        }
        cache.buffer_positions.drain(..g);
    }
    Ok(cache)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gen::{gen_gqa_weights, gen_sequence};
    use approx::assert_abs_diff_eq;

    fn tiny_config(g: usize, w: usize) -> GqaConfig {
        GqaConfig {
            d_model: 12,
            n_q_heads: 4,
            n_kv_heads: 2,
            d_head: 4,
            rope_base: 10_000.0,
            g,
            w,
            n_summary_queries: g,
            mask_policy: MaskPolicy::RepCausal,
        }
    }

    #[test]
    fn condense_singleton_group_is_identity() {
        let keys = Matrix::from_rows(&[vec![1.0, -2.0]]).unwrap();
        let values = Matrix::from_rows(&[vec![3.0, 4.0]]).unwrap();
        let (k, v, idx) = gqa_condense_group(&[0.5, 0.5], &keys, &values).unwrap();
        assert_eq!(k, vec![1.0, -2.0]);
        assert_eq!(v, vec![3.0, 4.0]);
        assert_eq!(idx, 0);
    }

    #[test]
    fn condense_identical_keys_averages_values() {
        let keys = Matrix::from_rows(&vec![vec![1.0, 1.0]; 4]).unwrap();
        let values =
            Matrix::from_rows(&[vec![0.0], vec![2.0], vec![4.0], vec![6.0]]).unwrap();
        let (k, v, idx) = gqa_condense_group(&[1.0, 0.0], &keys, &values).unwrap();
        assert_eq!(k, vec![1.0, 1.0]);
        assert_eq!(idx, 0); // uniform alpha, tie broken to lowest index
        assert_abs_diff_eq!(v[0], 3.0, epsilon = 1e-12);
    }

    #[test]
    fn condense_value_matches_convex_oracle_and_key_is_member() {
        let cfg = tiny_config(4, 0);
        let w = gen_gqa_weights(&cfg, 5).unwrap();
        let x = gen_sequence(4, cfg.d_model, 6).unwrap();
        let proj = gqa_project(&x, &[0, 1, 2, 3], &w).unwrap();
        let q_bar = vec![0.3, -0.1, 0.7, 0.2];
        let (k, v, idx) = gqa_condense_group(&q_bar, &proj.keys[0], &proj.values[0]).unwrap();
        // Key is bit-identical to a member row.
        assert_eq!(k.as_slice(), proj.keys[0].row(idx));
        // Value is the alpha-weighted combination, recomputed independently.
        let scale = 1.0 / (cfg.d_head as f64).sqrt();
        let logits: Vec<f64> = (0..4)
            .map(|i| {
                q_bar
                    .iter()
                    .zip(proj.keys[0].row(i))
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
                    * scale
            })
            .collect();
        let alpha = softmax_slice(&logits);
        for d in 0..cfg.d_head {
            let expect: f64 = (0..4).map(|i| alpha[i] * proj.values[0].get(i, d)).sum();
            assert_abs_diff_eq!(v[d], expect, epsilon = 1e-12);
        }
    }

    #[test]
    fn prefill_fallback_is_bit_identical_to_dense() {
        let cfg = tiny_config(4, 8);
        let w = gen_gqa_weights(&cfg, 7).unwrap();
        let x = gen_sequence(11, cfg.d_model, 8).unwrap(); // 11 < w+g = 12
        let res = gqa_prefill(&x, &w).unwrap();
        assert!(res.fallback);
        let proj = gqa_project(&x, &(0..11).collect::<Vec<_>>(), &w).unwrap();
        let dense = dense_gqa_attention(&proj, &w, AttnMask::Causal).unwrap();
        assert_eq!(res.output, dense);
        assert_eq!(res.cache.buffer_len(), 11);
        assert_eq!(res.cache.reps_len(), 0);
    }

    #[test]
    fn prefill_identity_condensation_matches_dense_causal() {
        let mut cfg = tiny_config(1, 0);
        cfg.n_summary_queries = 1;
        let w = gen_gqa_weights(&cfg, 9).unwrap();
        let x = gen_sequence(8, cfg.d_model, 10).unwrap();
        let res = gqa_prefill(&x, &w).unwrap();
        assert!(!res.fallback);
        let proj = gqa_project(&x, &(0..8).collect::<Vec<_>>(), &w).unwrap();
        let dense = dense_gqa_attention(&proj, &w, AttnMask::Causal).unwrap();
        assert!(res.output.max_abs_diff(&dense) < 1e-8);
    }

    #[test]
    fn decode_identity_condensation_matches_dense_causal() {
        let mut cfg = tiny_config(1, 0);
        cfg.n_summary_queries = 1;
        let w = gen_gqa_weights(&cfg, 11).unwrap();
        let l = 6;
        let x = gen_sequence(l, cfg.d_model, 12).unwrap();
        let proj = gqa_project(&x, &(0..l).collect::<Vec<_>>(), &w).unwrap();
        let dense = dense_gqa_attention(&proj, &w, AttnMask::Causal).unwrap();
        let mut cache = GqaCache::empty(&cfg).unwrap();
        for t in 0..l {
            let (out, next) = gqa_decode_step(cache, x.row(t), &w).unwrap();
            assert_eq!(out.attended_keys, t + 1);
            for j in 0..out.output.len() {
                assert_abs_diff_eq!(out.output[j], dense.get(t, j), epsilon = 1e-8);
            }
            cache = next;
        }
    }

    #[test]
    fn decode_cardinality_and_anchor_fidelity() {
        let cfg = tiny_config(3, 4);
        let w = gen_gqa_weights(&cfg, 13).unwrap();
        let n = 30;
        let x = gen_sequence(n, cfg.d_model, 14).unwrap();
        let mut cache = GqaCache::empty(&cfg).unwrap();
        let mut all_keys: Vec<Matrix> = vec![Matrix::zeros(0, cfg.d_head); cfg.n_kv_heads];
        for t in 0..n {
            let proj = gqa_project(&x.row_range(t, t + 1), &[t], &w).unwrap();
            for u in 0..cfg.n_kv_heads {
                all_keys[u].push_row(proj.keys[u].row(0)).unwrap();
            }
            let before = cache.entries();
            let (out, next) = gqa_decode_step(cache, x.row(t), &w).unwrap();
            assert_eq!(out.attended_keys, before + 1);
            cache = next;
            cache.check_invariants().unwrap();
            let total = t + 1;
            if total >= cfg.w {
                assert_eq!(cache.reps_len(), (total - cfg.w) / cfg.g);
            }
        }
        // Every rep key is a verbatim member row at its recorded anchor.
        for u in 0..cfg.n_kv_heads {
            for j in 0..cache.reps_len() {
                let pos = cache.rep_anchor_positions()[u][j];
                assert_eq!(cache.rep_keys()[u].row(j), all_keys[u].row(pos));
            }
        }
    }

    #[test]
    fn kv_head_mapping_is_contiguous() {
        let cfg = tiny_config(2, 2);
        assert_eq!(cfg.heads_per_kv(), 2);
        assert_eq!(cfg.kv_head_of(0), 0);
        assert_eq!(cfg.kv_head_of(1), 0);
        assert_eq!(cfg.kv_head_of(2), 1);
        assert_eq!(cfg.kv_head_of(3), 1);
    }

    #[test]
    fn config_rejects_uneven_head_grouping() {
        let mut cfg = tiny_config(2, 2);
        cfg.n_kv_heads = 3;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }
}

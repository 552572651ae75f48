//! Group-wise latent condensation.
//!
//! History is split into full groups of `g` cached latents plus a local
//! window of the most recent `k = w + (L-w) mod g` tokens. Each group is
//! collapsed into one representative: a query-aware convex combination of its
//! latents plus one member's rotary key row as the positional anchor.
//! Attention then runs over `m` representatives and `k` locals instead of all
//! `L` entries. Sequences shorter than `w + g` skip condensation entirely and
//! take the dense path.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mla::{
    dense_attention, head_queries, project_latents, reconstruct_head, AttnMask, MlaWeights,
    ModelConfig,
};
use crate::tensor::{softmax_slice, Matrix};

/// Visibility rule used during the fused prefill pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskPolicy {
    /// Every query sees every representative and every local token.
    None,
    /// Query t sees representative j iff group j's last token index is ≤ t,
    /// and local token i iff i ≤ t. Queries inside the grouped region that
    /// precede the first full group see nothing and produce a zero row.
    RepCausal,
}

/// How the representative latent is formed from a group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SemanticPool {
    /// Convex combination with the attention-derived weights.
    Weighted,
    /// Unweighted average.
    Mean,
    /// Coordinatewise maximum.
    MaxPool,
    /// The single highest-weight row.
    MaxSelect,
}

/// How the representative rotary key row is formed from a group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionalPool {
    /// The highest-weight member's rotary row, verbatim.
    MaxSelect,
    /// Coordinatewise maximum.
    MaxPool,
    /// Unweighted average.
    Mean,
    /// Convex combination with the attention-derived weights.
    Weighted,
}

/// Condensation parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LcaConfig {
    /// Tokens per condensed group.
    pub g: usize,
    /// Local window kept at full fidelity.
    pub w: usize,
    /// How many recent query rows feed the summary query.
    pub n_summary_queries: usize,
    pub mask_policy: MaskPolicy,
    pub semantic_pool: SemanticPool,
    pub positional_pool: PositionalPool,
}

impl LcaConfig {
    /// Production defaults for the given group size and window:
    /// summary over the last `g` queries, causal masking, weighted semantic
    /// pooling with a max-select positional anchor.
    pub fn new(g: usize, w: usize) -> Self {
        LcaConfig {
            g,
            w,
            n_summary_queries: g,
            mask_policy: MaskPolicy::RepCausal,
            semantic_pool: SemanticPool::Weighted,
            positional_pool: PositionalPool::MaxSelect,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.g == 0 {
            return Err(Error::Config("group size must be at least 1".into()));
        }
        if self.n_summary_queries == 0 {
            return Err(Error::Config("n_summary_queries must be at least 1".into()));
        }
        // Condensation first triggers once w+g tokens exist, so this keeps the
        // summary window always fully populated at every condensation event.
        if self.n_summary_queries > self.w + self.g {
            return Err(Error::Config(format!(
                "n_summary_queries ({}) cannot exceed w + g ({})",
                self.n_summary_queries,
                self.w + self.g
            )));
        }
        Ok(())
    }
}

impl Default for LcaConfig {
    fn default() -> Self {
        LcaConfig::new(16, 1024)
    }
}

/// How a length-L history splits into groups and a local window.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Partition {
    /// Number of full groups.
    pub m: usize,
    /// Leftover tokens folded into the local window.
    pub r: usize,
    /// Local-window extent: w + r.
    pub local_extent: usize,
    /// Half-open token ranges, group j covering [j*g, (j+1)*g).
    pub group_bounds: Vec<(usize, usize)>,
}

/// Outcome of partitioning: either condense, or the sequence is too short.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PartitionOutcome {
    /// L < w + g: run the dense path unchanged.
    Fallback,
    Groups(Partition),
}

/// Splits L tokens under the config's (g, w). Fallback iff L < w + g.
pub fn partition(l: usize, cfg: &LcaConfig) -> Result<PartitionOutcome> {
    if l == 0 {
        return Err(Error::Config("cannot partition an empty sequence".into()));
    }
    cfg.validate()?;
    if l < cfg.w + cfg.g {
        return Ok(PartitionOutcome::Fallback);
    }
    let m = (l - cfg.w) / cfg.g;
    let r = (l - cfg.w) % cfg.g;
    let group_bounds = (0..m).map(|j| (j * cfg.g, (j + 1) * cfg.g)).collect();
    Ok(PartitionOutcome::Groups(Partition {
        m,
        r,
        local_extent: cfg.w + r,
        group_bounds,
    }))
}

/// One condensed group: softmax importance weights, the chosen anchor, the
/// pooled latent, and the anchor's rotary key row.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupSummary {
    /// Length-g probability vector over the group's tokens.
    pub alpha: Vec<f64>,
    /// Index within the group of the highest-weight token (ties: lowest).
    pub anchor_index: usize,
    /// Absolute position of the anchor token.
    pub anchor_position: usize,
    /// Pooled latent, length d_c.
    pub c_rep: Vec<f64>,
    /// Representative rotary key row, length d_r.
    pub k_rope_rep: Vec<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Per-head mean of the last `n` query rows.
pub fn summary_query(queries: &[Matrix], n: usize) -> Result<Vec<Vec<f64>>> {
    if n == 0 {
        return Err(Error::Config("summary needs at least one query".into()));
    }
    let mut out = Vec::with_capacity(queries.len());
    for q in queries {
        if q.rows() < n {
            return Err(Error::Consistency(format!(
                "summary over the last {n} queries, but only {} are stored",
                q.rows()
            )));
        }
        let mut mean = vec![0.0; q.cols()];
        for t in q.rows() - n..q.rows() {
            for (m, v) in mean.iter_mut().zip(q.row(t)) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= n as f64;
        }
        out.push(mean);
    }
    Ok(out)
}

/// Importance weights for one group: per-head scaled dot products of the
/// summary query against the group's keys, averaged across heads, then
/// softmaxed over the group.
pub fn importance(q_bar: &[Vec<f64>], group_keys: &[Matrix]) -> Result<Vec<f64>> {
    if q_bar.is_empty() || q_bar.len() != group_keys.len() {
        return Err(Error::Shape(format!(
            "{} summary queries for {} key sets",
            q_bar.len(),
            group_keys.len()
        )));
    }
    let g = group_keys[0].rows();
    let mut logits = vec![0.0; g];
    for (q, keys) in q_bar.iter().zip(group_keys) {
        if keys.rows() != g || keys.cols() != q.len() {
            return Err(Error::Shape(format!(
                "group keys {}x{} against a summary query of length {}",
                keys.rows(),
                keys.cols(),
                q.len()
            )));
        }
        let scale = 1.0 / (keys.cols() as f64).sqrt();
        for i in 0..g {
            logits[i] += dot(q, keys.row(i)) * scale;
        }
    }
    let heads = q_bar.len() as f64;
    for l in &mut logits {
        *l /= heads;
    }
    Ok(softmax_slice(&logits))
}

/// Highest-weight index, lowest index winning ties.
fn argmax(alpha: &[f64]) -> usize {
    let mut best = 0;
    for (i, &a) in alpha.iter().enumerate().skip(1) {
        if a > alpha[best] {
            best = i;
        }
    }
    best
}

fn pool_rows(alpha: &[f64], rows: &Matrix, weighted: bool, coordinate_max: bool, select: bool) -> Vec<f64> {
    if select {
        return rows.row(argmax(alpha)).to_vec();
    }
    if coordinate_max {
        let mut out = rows.row(0).to_vec();
        for i in 1..rows.rows() {
            for (o, &v) in out.iter_mut().zip(rows.row(i)) {
                *o = o.max(v);
            }
        }
        return out;
    }
    let uniform = 1.0 / rows.rows() as f64;
    let mut out = vec![0.0; rows.cols()];
    for (i, row) in (0..rows.rows()).map(|i| (i, rows.row(i))) {
        let weight = if weighted { alpha[i] } else { uniform };
        for (o, &v) in out.iter_mut().zip(row) {
            *o += weight * v;
        }
    }
    out
}

/// Pools a group's latents (g x d_c) into one representative latent.
pub fn pool_semantic(alpha: &[f64], group_latents: &Matrix, mode: SemanticPool) -> Result<Vec<f64>> {
    if alpha.len() != group_latents.rows() || alpha.is_empty() {
        return Err(Error::Shape(format!(
            "{} weights for {} latents",
            alpha.len(),
            group_latents.rows()
        )));
    }
    Ok(match mode {
        SemanticPool::Weighted => pool_rows(alpha, group_latents, true, false, false),
        SemanticPool::Mean => pool_rows(alpha, group_latents, false, false, false),
        SemanticPool::MaxPool => pool_rows(alpha, group_latents, false, true, false),
        SemanticPool::MaxSelect => pool_rows(alpha, group_latents, false, false, true),
    })
}

/// Picks the anchor index (always the argmax of alpha, ties to the lowest
/// index) and forms the representative rotary key row per the mode.
pub fn select_anchor(
    alpha: &[f64],
    group_k_rope: &Matrix,
    mode: PositionalPool,
) -> Result<(usize, Vec<f64>)> {
    if alpha.len() != group_k_rope.rows() || alpha.is_empty() {
        return Err(Error::Shape(format!(
            "{} weights for {} rotary rows",
            alpha.len(),
            group_k_rope.rows()
        )));
    }
    let idx = argmax(alpha);
    let row = match mode {
        PositionalPool::MaxSelect => pool_rows(alpha, group_k_rope, false, false, true),
        PositionalPool::MaxPool => pool_rows(alpha, group_k_rope, false, true, false),
        PositionalPool::Mean => pool_rows(alpha, group_k_rope, false, false, false),
        PositionalPool::Weighted => pool_rows(alpha, group_k_rope, true, false, false),
    };
    Ok((idx, row))
}

/// Condenses one group of cached latents given the per-head summary queries.
pub fn condense_group(
    q_bar: &[Vec<f64>],
    group_c: &Matrix,
    group_k_rope: &Matrix,
    group_positions: &[usize],
    weights: &MlaWeights,
    cfg: &LcaConfig,
) -> Result<GroupSummary> {
    let mut group_keys = Vec::with_capacity(weights.config.n_heads);
    for h in 0..weights.config.n_heads {
        let (keys, _) = reconstruct_head(group_c, group_k_rope, weights, h)?;
        group_keys.push(keys);
    }
    let alpha = importance(q_bar, &group_keys)?;
    let c_rep = pool_semantic(&alpha, group_c, cfg.semantic_pool)?;
    let (anchor_index, k_rope_rep) = select_anchor(&alpha, group_k_rope, cfg.positional_pool)?;
    Ok(GroupSummary {
        alpha,
        anchor_index,
        anchor_position: group_positions[anchor_index],
        c_rep,
        k_rope_rep,
    })
}

/// Up-projects a representative into one head's key and value:
/// `k = [c_rep W_UK_h, k_rope_rep]`, `v = c_rep W_UV_h`.
pub fn build_rep_kv(
    c_rep: &[f64],
    k_rope_rep: &[f64],
    weights: &MlaWeights,
    head: usize,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let c = Matrix::from_vec(1, c_rep.len(), c_rep.to_vec())?;
    let mut key = c.matmul(&weights.w_uk[head])?.data().to_vec();
    key.extend_from_slice(k_rope_rep);
    let value = c.matmul(&weights.w_uv[head])?.data().to_vec();
    Ok((key, value))
}

/// Decode-time state: condensed representatives plus a full-fidelity buffer
/// of recent tokens, and the rolling query rows the next condensation needs.
///
/// Values, not shared state: `decode_step` consumes a cache and returns its
/// successor.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentCache {
    group_size: usize,
    window: usize,
    n_summary_queries: usize,
    reps: Vec<GroupSummary>,
    buffer_c: Matrix,
    buffer_k_rope: Matrix,
    buffer_positions: Vec<usize>,
    /// Per head: the last n_summary_queries full query rows (d_k wide).
    queries: Vec<Matrix>,
    total_tokens: usize,
}

impl LatentCache {
    pub fn empty(mcfg: &ModelConfig, lcfg: &LcaConfig) -> Result<Self> {
        mcfg.validate()?;
        lcfg.validate()?;
        Ok(LatentCache {
            group_size: lcfg.g,
            window: lcfg.w,
            n_summary_queries: lcfg.n_summary_queries,
            reps: Vec::new(),
            buffer_c: Matrix::zeros(0, mcfg.d_c),
            buffer_k_rope: Matrix::zeros(0, mcfg.d_r),
            buffer_positions: Vec::new(),
            queries: vec![Matrix::zeros(0, mcfg.d_k()); mcfg.n_heads],
            total_tokens: 0,
        })
    }

    #[allow(clippy::too_many_arguments)]
    pub(crate) fn from_parts(
        group_size: usize,
        window: usize,
        n_summary_queries: usize,
        reps: Vec<GroupSummary>,
        buffer_c: Matrix,
        buffer_k_rope: Matrix,
        buffer_positions: Vec<usize>,
        queries: Vec<Matrix>,
        total_tokens: usize,
    ) -> Self {
        LatentCache {
            group_size,
            window,
            n_summary_queries,
            reps,
            buffer_c,
            buffer_k_rope,
            buffer_positions,
            queries,
            total_tokens,
        }
    }

    pub fn group_size(&self) -> usize {
        self.group_size
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn n_summary_queries(&self) -> usize {
        self.n_summary_queries
    }

    pub fn reps(&self) -> &[GroupSummary] {
        &self.reps
    }

    pub fn buffer_len(&self) -> usize {
        self.buffer_positions.len()
    }

    pub fn buffer_c(&self) -> &Matrix {
        &self.buffer_c
    }

    pub fn buffer_k_rope(&self) -> &Matrix {
        &self.buffer_k_rope
    }

    pub fn buffer_positions(&self) -> &[usize] {
        &self.buffer_positions
    }

    pub fn queries(&self) -> &[Matrix] {
        &self.queries
    }

    pub fn total_tokens(&self) -> usize {
        self.total_tokens
    }

    /// Cache entries currently held (representatives + buffered tokens).
    pub fn entries(&self) -> usize {
        self.reps.len() + self.buffer_len()
    }

    /// Structural well-formedness: bookkeeping identity, buffer bound, and
    /// strictly increasing anchor positions.
    pub fn check_invariants(&self) -> Result<()> {
        if self.reps.len() * self.group_size + self.buffer_len() != self.total_tokens {
            return Err(Error::Consistency(format!(
                "{} reps x g={} + {} buffered != {} total",
                self.reps.len(),
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
        if self.reps.windows(2).any(|p| p[0].anchor_position >= p[1].anchor_position) {
            return Err(Error::Consistency(
                "rep anchor positions are not strictly increasing".into(),
            ));
        }
        Ok(())
    }

    fn push_token(&mut self, c_row: &[f64], k_rope_row: &[f64], position: usize) -> Result<()> {
        self.buffer_c.push_row(c_row)?;
        self.buffer_k_rope.push_row(k_rope_row)?;
        self.buffer_positions.push(position);
        self.total_tokens += 1;
        Ok(())
    }

    fn push_query_rows(&mut self, rows: &[&[f64]]) -> Result<()> {
        for (store, row) in self.queries.iter_mut().zip(rows) {
            store.push_row(row)?;
            if store.rows() > self.n_summary_queries {
                store.drop_front_rows(store.rows() - self.n_summary_queries);
            }
        }
        Ok(())
    }
}

fn check_cache_matches_config(cache: &LatentCache, lcfg: &LcaConfig) -> Result<()> {
    if cache.group_size != lcfg.g
        || cache.window != lcfg.w
        || cache.n_summary_queries != lcfg.n_summary_queries
    {
        return Err(Error::Consistency(format!(
            "cache built for (g={}, w={}, n={}), config says (g={}, w={}, n={})",
            cache.group_size,
            cache.window,
            cache.n_summary_queries,
            lcfg.g,
            lcfg.w,
            lcfg.n_summary_queries
        )));
    }
    Ok(())
}

/// Result of a prefill pass.
#[derive(Debug, Clone)]
pub struct PrefillResult {
    /// L x (n_heads * d_v) attention output.
    pub output: Matrix,
    pub cache: LatentCache,
    /// True iff the sequence was too short to condense (dense path taken).
    pub fallback: bool,
}

/// How many representatives and local tokens query `t` may attend to.
///
/// `local_start` is the absolute index of the first local token (L - k).
pub fn visible_counts(
    t: usize,
    m: usize,
    local_start: usize,
    local_extent: usize,
    g: usize,
    mask: MaskPolicy,
) -> (usize, usize) {
    match mask {
        MaskPolicy::None => (m, local_extent),
        MaskPolicy::RepCausal => {
            let reps = ((t + 1) / g).min(m);
            let locals = (t + 1).saturating_sub(local_start).min(local_extent);
            (reps, locals)
        }
    }
}

/// Fused prefill: condense every full group, then attend all queries over
/// `[representatives; local window]` under the configured mask policy.
///
/// Sequences with L < w + g fall back to the dense causal path bit-for-bit,
/// with every token kept in the buffer. Under `rep_causal` with g > 1, the
/// first g-1 queries have nothing visible and yield zero rows.
pub fn prefill(x: &Matrix, weights: &MlaWeights, lcfg: &LcaConfig) -> Result<PrefillResult> {
    weights.validate()?;
    lcfg.validate()?;
    let l = x.rows();
    let positions: Vec<usize> = (0..l).collect();
    let state = project_latents(x, &positions, weights)?;
    let mcfg = &weights.config;

    let part = match partition(l, lcfg)? {
        PartitionOutcome::Fallback => {
            let output = dense_attention(&state, weights, AttnMask::Causal)?;
            let mut cache = LatentCache::empty(mcfg, lcfg)?;
            for t in 0..l {
                cache.push_token(state.c_kv.row(t), state.k_rope.row(t), t)?;
            }
            let stored = lcfg.n_summary_queries.min(l);
            for h in 0..mcfg.n_heads {
                let q = head_queries(&state, weights, h)?;
                cache.queries[h] = q.row_range(q.rows() - stored, q.rows());
            }
            return Ok(PrefillResult {
                output,
                cache,
                fallback: true,
            });
        }
        PartitionOutcome::Groups(p) => p,
    };

    let all_queries: Vec<Matrix> = (0..mcfg.n_heads)
        .map(|h| head_queries(&state, weights, h))
        .collect::<Result<_>>()?;
    let q_bar = summary_query(&all_queries, lcfg.n_summary_queries)?;

    let mut reps = Vec::with_capacity(part.m);
    for &(start, end) in &part.group_bounds {
        reps.push(condense_group(
            &q_bar,
            &state.c_kv.row_range(start, end),
            &state.k_rope.row_range(start, end),
            &positions[start..end],
            weights,
            lcfg,
        )?);
    }

    let local_start = l - part.local_extent;
    let scale = 1.0 / (mcfg.d_k() as f64).sqrt();
    let mut output = Matrix::zeros(l, mcfg.n_heads * mcfg.d_v);
    for h in 0..mcfg.n_heads {
        let mut rep_k = Matrix::zeros(0, mcfg.d_k());
        let mut rep_v = Matrix::zeros(0, mcfg.d_v);
        for rep in &reps {
            let (k, v) = build_rep_kv(&rep.c_rep, &rep.k_rope_rep, weights, h)?;
            rep_k.push_row(&k)?;
            rep_v.push_row(&v)?;
        }
        let (local_k, local_v) = reconstruct_head(
            &state.c_kv.row_range(local_start, l),
            &state.k_rope.row_range(local_start, l),
            weights,
            h,
        )?;
        let q = &all_queries[h];
        for t in 0..l {
            let (vis_reps, vis_locals) = visible_counts(
                t,
                part.m,
                local_start,
                part.local_extent,
                lcfg.g,
                lcfg.mask_policy,
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
                logits.push(dot(q_row, local_k.row(i)) * scale);
            }
            let probs = softmax_slice(&logits);
            let out_row = &mut output.data_mut()
                [t * mcfg.n_heads * mcfg.d_v + h * mcfg.d_v..][..mcfg.d_v];
            for (j, &p) in probs[..vis_reps].iter().enumerate() {
                for (o, &v) in out_row.iter_mut().zip(rep_v.row(j)) {
                    *o += p * v;
                }
            }
            for (i, &p) in probs[vis_reps..].iter().enumerate() {
                for (o, &v) in out_row.iter_mut().zip(local_v.row(i)) {
                    *o += p * v;
                }
            }
        }
    }

    let mut cache = LatentCache::empty(mcfg, lcfg)?;
    cache.reps = reps;
    for t in local_start..l {
        cache.push_token(state.c_kv.row(t), state.k_rope.row(t), t)?;
    }
    cache.total_tokens = l;
    for h in 0..mcfg.n_heads {
        let q = &all_queries[h];
        cache.queries[h] = q.row_range(q.rows() - lcfg.n_summary_queries, q.rows());
    }
    cache.check_invariants()?;
    Ok(PrefillResult {
        output,
        cache,
        fallback: false,
    })
}

/// Output of one decode step.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodeOutput {
    /// Concatenated head outputs, length n_heads * d_v.
    pub output: Vec<f64>,
    /// How many cache entries the new token attended to (itself included).
    pub attended_keys: usize,
}

/// Absorbs one new token: project, append to the buffer, attend over every
/// representative plus the whole buffer (all strictly past or self — no mask),
/// then condense the earliest group if the buffer has reached w + g.
pub fn decode_step(
    cache: LatentCache,
    x_new: &[f64],
    weights: &MlaWeights,
    lcfg: &LcaConfig,
) -> Result<(DecodeOutput, LatentCache)> {
    check_cache_matches_config(&cache, lcfg)?;
    let mcfg = &weights.config;
    let x = Matrix::from_vec(1, x_new.len(), x_new.to_vec())?;
    let position = cache.total_tokens;
    let state = project_latents(&x, &[position], weights)?;

    let mut cache = cache;
    let q_rows: Vec<Matrix> = (0..mcfg.n_heads)
        .map(|h| head_queries(&state, weights, h))
        .collect::<Result<_>>()?;
    let q_refs: Vec<&[f64]> = q_rows.iter().map(|q| q.row(0)).collect();
    cache.push_query_rows(&q_refs)?;
    cache.push_token(state.c_kv.row(0), state.k_rope.row(0), position)?;

    let attended_keys = cache.entries();
    let scale = 1.0 / (mcfg.d_k() as f64).sqrt();
    let mut output = vec![0.0; mcfg.n_heads * mcfg.d_v];
    for h in 0..mcfg.n_heads {
        let (buf_k, buf_v) = reconstruct_head(&cache.buffer_c, &cache.buffer_k_rope, weights, h)?;
        let q_row = q_rows[h].row(0);
        let mut logits = Vec::with_capacity(attended_keys);
        let mut rep_vals = Vec::with_capacity(cache.reps.len());
        for rep in &cache.reps {
            let (k, v) = build_rep_kv(&rep.c_rep, &rep.k_rope_rep, weights, h)?;
            logits.push(dot(q_row, &k) * scale);
            rep_vals.push(v);
        }
        for i in 0..buf_k.rows() {
            logits.push(dot(q_row, buf_k.row(i)) * scale);
        }
        let probs = softmax_slice(&logits);
        let out = &mut output[h * mcfg.d_v..(h + 1) * mcfg.d_v];
        for (v, &p) in rep_vals.iter().zip(&probs) {
            for (o, &x) in out.iter_mut().zip(v) {
                *o += p * x;
            }
        }
        for (i, &p) in probs[rep_vals.len()..].iter().enumerate() {
            for (o, &x) in out.iter_mut().zip(buf_v.row(i)) {
                *o += p * x;
            }
        }
    }

    let cache = maybe_condense(cache, weights, lcfg)?;
    Ok((
        DecodeOutput {
            output,
            attended_keys,
        },
        cache,
    ))
}

/// Condenses the earliest g buffered tokens into a new representative for as
/// long as the buffer holds at least w + g entries; otherwise returns the
/// cache unchanged.
pub fn maybe_condense(
    cache: LatentCache,
    weights: &MlaWeights,
    lcfg: &LcaConfig,
) -> Result<LatentCache> {
    check_cache_matches_config(&cache, lcfg)?;
    let mut cache = cache;
    while cache.buffer_len() >= cache.window + cache.group_size {
        let g = cache.group_size;
        if cache.queries.iter().any(|q| q.rows() == 0) {
            return Err(Error::Consistency(
                "condensation requires stored summary queries".into(),
            ));
        }
        let stored = cache.queries[0].rows();
        let q_bar = summary_query(&cache.queries, stored.min(lcfg.n_summary_queries))?;
        let rep = condense_group(
            &q_bar,
            &cache.buffer_c.row_range(0, g),
            &cache.buffer_k_rope.row_range(0, g),
            &cache.buffer_positions[..g],
            weights,
            lcfg,
        )?;
        cache.reps.push(rep);
        cache.buffer_c.drop_front_rows(g);
        cache.buffer_k_rope.drop_front_rows(g);
        cache.buffer_positions.drain(..g);
    }
    Ok(cache)
}

//! Run configuration: a declarative TOML file plus flag overrides, resolved
//! into the concrete engine configs.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use lca_core::gqa::GqaConfig;
use lca_core::lca::{LcaConfig, MaskPolicy, PositionalPool, SemanticPool};
use lca_core::mla::ModelConfig;
use lca_core::Precision;

/// What a single invocation does.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Prefill,
    Decode,
    Gqa,
    Sweep,
    VerifyBound,
    VerifyPooling,
    Cost,
    IoCheck,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Prefill => "prefill",
            Mode::Decode => "decode",
            Mode::Gqa => "gqa",
            Mode::Sweep => "sweep",
            Mode::VerifyBound => "verify-bound",
            Mode::VerifyPooling => "verify-pooling",
            Mode::Cost => "cost",
            Mode::IoCheck => "io-check",
        }
    }
}

/// Sweep axes; every combination is visited in declaration order.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepAxes {
    pub g: Vec<usize>,
    pub w: Vec<usize>,
    pub n_summary_queries: Vec<usize>,
    /// Visit all 16 (semantic, positional) pooling pairs per cell; otherwise
    /// only the default weighted/max-select pair.
    pub pooling_matrix: bool,
}

impl Default for SweepAxes {
    fn default() -> Self {
        SweepAxes {
            g: vec![8, 16, 32],
            w: vec![0, 64, 1024],
            n_summary_queries: vec![16],
            pooling_matrix: true,
        }
    }
}

/// Fully resolved configuration for one run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub mode: Mode,
    pub seed: u64,
    pub l: usize,
    pub precision: Precision,
    pub model: ModelConfig,
    pub lca: LcaConfig,
    pub gqa: GqaConfig,
    pub decode_steps: usize,
    pub trials: usize,
    pub sweep: SweepAxes,
    #[serde(skip)]
    pub out_dir: PathBuf,
}

pub fn default_model() -> ModelConfig {
    ModelConfig {
        d_model: 64,
        d_cq: 32,
        d_c: 32,
        d_k_prime: 24,
        d_r: 16,
        d_v: 24,
        n_heads: 4,
        rope_base: 10_000.0,
    }
}

pub fn default_gqa() -> GqaConfig {
    GqaConfig {
        d_model: 64,
        n_q_heads: 8,
        n_kv_heads: 2,
        d_head: 16,
        rope_base: 10_000.0,
        g: 16,
        w: 64,
        n_summary_queries: 16,
        mask_policy: MaskPolicy::RepCausal,
    }
}

impl RunConfig {
    pub fn new(mode: Mode) -> Self {
        RunConfig {
            mode,
            seed: 42,
            l: 2048,
            precision: Precision::F64,
            model: default_model(),
            lca: LcaConfig::new(16, 1024),
            gqa: default_gqa(),
            decode_steps: 128,
            trials: 200,
            sweep: SweepAxes::default(),
            out_dir: PathBuf::from("out"),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.l == 0 {
            bail!("l must be at least 1");
        }
        self.model
            .validate()
            .context("invalid [model] section")?;
        self.lca.validate().context("invalid [lca] section")?;
        self.gqa.validate().context("invalid [gqa] section")?;
        Ok(())
    }
}

// ---- TOML file schema -------------------------------------------------

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    seed: Option<u64>,
    l: Option<usize>,
    precision: Option<Precision>,
    model: Option<ModelToml>,
    lca: Option<LcaToml>,
    gqa: Option<GqaToml>,
    decode: Option<DecodeToml>,
    verify: Option<VerifyToml>,
    sweep: Option<SweepToml>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelToml {
    d_model: Option<usize>,
    d_cq: Option<usize>,
    d_c: Option<usize>,
    d_k_prime: Option<usize>,
    d_r: Option<usize>,
    d_v: Option<usize>,
    n_heads: Option<usize>,
    rope_base: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct LcaToml {
    g: Option<usize>,
    w: Option<usize>,
    n_summary_queries: Option<usize>,
    mask_policy: Option<MaskPolicy>,
    semantic_pool: Option<SemanticPool>,
    positional_pool: Option<PositionalPool>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct GqaToml {
    d_model: Option<usize>,
    n_q_heads: Option<usize>,
    n_kv_heads: Option<usize>,
    d_head: Option<usize>,
    rope_base: Option<f64>,
    g: Option<usize>,
    w: Option<usize>,
    n_summary_queries: Option<usize>,
    mask_policy: Option<MaskPolicy>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct DecodeToml {
    steps: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct VerifyToml {
    trials: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct SweepToml {
    g: Option<Vec<usize>>,
    w: Option<Vec<usize>>,
    n_summary_queries: Option<Vec<usize>>,
    pooling_matrix: Option<bool>,
}

/// Loads a TOML file over the defaults for `mode`.
pub fn load(mode: Mode, path: Option<&Path>) -> Result<RunConfig> {
    let mut cfg = RunConfig::new(mode);
    let Some(path) = path else { return Ok(cfg) };
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("cannot read config {}", path.display()))?;
    let file: FileConfig = toml::from_str(&text)
        .with_context(|| format!("cannot parse config {}", path.display()))?;

    if let Some(seed) = file.seed {
        cfg.seed = seed;
    }
    if let Some(l) = file.l {
        cfg.l = l;
    }
    if let Some(p) = file.precision {
        cfg.precision = p;
    }
    if let Some(m) = file.model {
        let d = &mut cfg.model;
        set(&mut d.d_model, m.d_model);
        set(&mut d.d_cq, m.d_cq);
        set(&mut d.d_c, m.d_c);
        set(&mut d.d_k_prime, m.d_k_prime);
        set(&mut d.d_r, m.d_r);
        set(&mut d.d_v, m.d_v);
        set(&mut d.n_heads, m.n_heads);
        set(&mut d.rope_base, m.rope_base);
    }
    if let Some(l) = file.lca {
        // A bare `g` adjusts the summary-query default alongside it.
        if let Some(g) = l.g {
            cfg.lca.g = g;
            cfg.lca.n_summary_queries = g;
        }
        set(&mut cfg.lca.w, l.w);
        set(&mut cfg.lca.n_summary_queries, l.n_summary_queries);
        set(&mut cfg.lca.mask_policy, l.mask_policy);
        set(&mut cfg.lca.semantic_pool, l.semantic_pool);
        set(&mut cfg.lca.positional_pool, l.positional_pool);
    }
    if let Some(gq) = file.gqa {
        let d = &mut cfg.gqa;
        set(&mut d.d_model, gq.d_model);
        set(&mut d.n_q_heads, gq.n_q_heads);
        set(&mut d.n_kv_heads, gq.n_kv_heads);
        set(&mut d.d_head, gq.d_head);
        set(&mut d.rope_base, gq.rope_base);
        set(&mut d.g, gq.g);
        set(&mut d.w, gq.w);
        set(&mut d.n_summary_queries, gq.n_summary_queries);
        set(&mut d.mask_policy, gq.mask_policy);
    }
    if let Some(d) = file.decode {
        set(&mut cfg.decode_steps, d.steps);
    }
    if let Some(v) = file.verify {
        set(&mut cfg.trials, v.trials);
    }
    if let Some(s) = file.sweep {
        set(&mut cfg.sweep.g, s.g);
        set(&mut cfg.sweep.w, s.w);
        set(&mut cfg.sweep.n_summary_queries, s.n_summary_queries);
        set(&mut cfg.sweep.pooling_matrix, s.pooling_matrix);
    }
    Ok(cfg)
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

pub fn parse_precision(s: &str) -> Result<Precision> {
    match s {
        "f64" => Ok(Precision::F64),
        "f32" => Ok(Precision::F32),
        other => bail!("unknown precision {other:?} (expected f64 or f32)"),
    }
}

pub fn parse_mask(s: &str) -> Result<MaskPolicy> {
    match s {
        "none" => Ok(MaskPolicy::None),
        "rep_causal" => Ok(MaskPolicy::RepCausal),
        other => bail!("unknown mask policy {other:?} (expected none or rep_causal)"),
    }
}

pub fn parse_semantic_pool(s: &str) -> Result<SemanticPool> {
    match s {
        "weighted" => Ok(SemanticPool::Weighted),
        "mean" => Ok(SemanticPool::Mean),
        "max_pool" => Ok(SemanticPool::MaxPool),
        "max_select" => Ok(SemanticPool::MaxSelect),
        other => bail!("unknown semantic pool {other:?}"),
    }
}

pub fn parse_positional_pool(s: &str) -> Result<PositionalPool> {
    match s {
        "weighted" => Ok(PositionalPool::Weighted),
        "mean" => Ok(PositionalPool::Mean),
        "max_pool" => Ok(PositionalPool::MaxPool),
        "max_select" => Ok(PositionalPool::MaxSelect),
        other => bail!("unknown positional pool {other:?}"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        for mode in [Mode::Prefill, Mode::Cost, Mode::Gqa] {
            RunConfig::new(mode).validate().unwrap();
        }
    }

    #[test]
    fn toml_overrides_defaults_and_g_sets_summary_count() {
        let dir = std::env::temp_dir().join(format!("lca-cfg-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("cfg.toml");
        std::fs::write(
            &path,
            "seed = 7\nl = 99\n[lca]\ng = 4\nw = 8\n[model]\nn_heads = 2\n",
        )
        .unwrap();
        let cfg = load(Mode::Prefill, Some(&path)).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.l, 99);
        assert_eq!(cfg.lca.g, 4);
        assert_eq!(cfg.lca.n_summary_queries, 4); // follows g when unset
        assert_eq!(cfg.lca.w, 8);
        assert_eq!(cfg.model.n_heads, 2);
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = std::env::temp_dir().join(format!("lca-cfg2-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.toml");
        std::fs::write(&path, "bogus_key = 1\n").unwrap();
        assert!(load(Mode::Prefill, Some(&path)).is_err());
        std::fs::remove_file(&path).ok();
    }
}

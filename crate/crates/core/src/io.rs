//! Binary snapshot formats, all little-endian with row-major 64-bit floats:
//!
//! - `MLAW`: latent-attention weights (config header, then every projection
//!   matrix in declaration order).
//! - `GQAW`: grouped-query weights (same scheme, per-head matrices).
//! - `LCAC`: a decode cache — header counts, then per-representative records
//!   (pooled latent, rotary anchor row, anchor position/index, alpha), then
//!   the buffer arrays and the stored summary-query rows.
//!
//! Wrong magic, unknown version, or truncation all surface as format errors.

use std::fs;
use std::io::{Cursor, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};
use crate::gqa::{GqaConfig, GqaWeights};
use crate::lca::{GroupSummary, LatentCache, MaskPolicy};
use crate::mla::{MlaWeights, ModelConfig};
use crate::tensor::Matrix;

const MLAW_MAGIC: &[u8; 4] = b"MLAW";
const GQAW_MAGIC: &[u8; 4] = b"GQAW";
const LCAC_MAGIC: &[u8; 4] = b"LCAC";
const FORMAT_VERSION: u32 = 1;

fn truncated<T>(r: std::io::Result<T>) -> Result<T> {
    r.map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::Format("truncated file".into())
        } else {
            Error::Io(e)
        }
    })
}

fn check_magic(cur: &mut Cursor<Vec<u8>>, want: &[u8; 4]) -> Result<()> {
    let mut magic = [0u8; 4];
    truncated(cur.read_exact(&mut magic))?;
    if &magic != want {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&magic),
            String::from_utf8_lossy(want)
        )));
    }
    let version = truncated(cur.read_u32::<LittleEndian>())?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported version {version}, this build reads {FORMAT_VERSION}"
        )));
    }
    Ok(())
}

fn write_dim<W: Write>(out: &mut W, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("dimension {v} exceeds u32")))?;
    out.write_u32::<LittleEndian>(v)?;
    Ok(())
}

fn read_dim(cur: &mut Cursor<Vec<u8>>) -> Result<usize> {
    Ok(truncated(cur.read_u32::<LittleEndian>())? as usize)
}

fn write_f64s<W: Write>(out: &mut W, data: &[f64]) -> Result<()> {
    for &v in data {
        out.write_f64::<LittleEndian>(v)?;
    }
    Ok(())
}

fn read_f64s(cur: &mut Cursor<Vec<u8>>, n: usize) -> Result<Vec<f64>> {
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        data.push(truncated(cur.read_f64::<LittleEndian>())?);
    }
    Ok(data)
}

fn write_matrix<W: Write>(out: &mut W, m: &Matrix) -> Result<()> {
    write_f64s(out, m.data())
}

fn read_matrix(cur: &mut Cursor<Vec<u8>>, rows: usize, cols: usize) -> Result<Matrix> {
    Matrix::from_vec(rows, cols, read_f64s(cur, rows * cols)?)
}

/// Writes a latent-attention weight file.
pub fn write_mla_weights(path: &Path, w: &MlaWeights) -> Result<()> {
    w.validate()?;
    let mut out = Vec::new();
    out.write_all(MLAW_MAGIC)?;
    out.write_u32::<LittleEndian>(FORMAT_VERSION)?;
    let c = &w.config;
    for dim in [c.d_model, c.d_cq, c.d_c, c.d_k_prime, c.d_r, c.d_v, c.n_heads] {
        write_dim(&mut out, dim)?;
    }
    out.write_f64::<LittleEndian>(c.rope_base)?;
    write_matrix(&mut out, &w.w_dq)?;
    write_matrix(&mut out, &w.w_dkv)?;
    for group in [&w.w_uq, &w.w_uk, &w.w_uv, &w.w_qr] {
        for m in group {
            write_matrix(&mut out, m)?;
        }
    }
    write_matrix(&mut out, &w.w_kr)?;
    fs::write(path, out)?;
    Ok(())
}

/// Reads a latent-attention weight file.
pub fn read_mla_weights(path: &Path) -> Result<MlaWeights> {
    let mut cur = Cursor::new(fs::read(path)?);
    check_magic(&mut cur, MLAW_MAGIC)?;
    let d_model = read_dim(&mut cur)?;
    let d_cq = read_dim(&mut cur)?;
    let d_c = read_dim(&mut cur)?;
    let d_k_prime = read_dim(&mut cur)?;
    let d_r = read_dim(&mut cur)?;
    let d_v = read_dim(&mut cur)?;
    let n_heads = read_dim(&mut cur)?;
    let rope_base = truncated(cur.read_f64::<LittleEndian>())?;
    let config = ModelConfig {
        d_model,
        d_cq,
        d_c,
        d_k_prime,
        d_r,
        d_v,
        n_heads,
        rope_base,
    };
    config.validate()?;
    let w_dq = read_matrix(&mut cur, d_model, d_cq)?;
    let w_dkv = read_matrix(&mut cur, d_model, d_c)?;
    let per_head = |rows: usize, cols: usize, cur: &mut Cursor<Vec<u8>>| -> Result<Vec<Matrix>> {
        (0..n_heads).map(|_| read_matrix(cur, rows, cols)).collect()
    };
    let w_uq = per_head(d_cq, d_k_prime, &mut cur)?;
    let w_uk = per_head(d_c, d_k_prime, &mut cur)?;
    let w_uv = per_head(d_c, d_v, &mut cur)?;
    let w_qr = per_head(d_cq, d_r, &mut cur)?;
    let w_kr = read_matrix(&mut cur, d_model, d_r)?;
    let weights = MlaWeights {
        config,
        w_dq,
        w_dkv,
        w_uq,
        w_uk,
        w_uv,
        w_qr,
        w_kr,
    };
    weights.validate()?;
    Ok(weights)
}

fn mask_code(mask: MaskPolicy) -> u32 {
    match mask {
        MaskPolicy::None => 0,
        MaskPolicy::RepCausal => 1,
    }
}

fn mask_from_code(code: u32) -> Result<MaskPolicy> {
    match code {
        0 => Ok(MaskPolicy::None),
        1 => Ok(MaskPolicy::RepCausal),
        other => Err(Error::Format(format!("unknown mask code {other}"))),
    }
}

/// Writes a grouped-query weight file.
pub fn write_gqa_weights(path: &Path, w: &GqaWeights) -> Result<()> {
    w.validate()?;
    let mut out = Vec::new();
    out.write_all(GQAW_MAGIC)?;
    out.write_u32::<LittleEndian>(FORMAT_VERSION)?;
    let c = &w.config;
    for dim in [
        c.d_model,
        c.n_q_heads,
        c.n_kv_heads,
        c.d_head,
        c.g,
        c.w,
        c.n_summary_queries,
    ] {
        write_dim(&mut out, dim)?;
    }
    out.write_u32::<LittleEndian>(mask_code(c.mask_policy))?;
    out.write_f64::<LittleEndian>(c.rope_base)?;
    for group in [&w.w_q, &w.w_k, &w.w_v] {
        for m in group {
            write_matrix(&mut out, m)?;
        }
    }
    fs::write(path, out)?;
    Ok(())
}

/// Reads a grouped-query weight file.
pub fn read_gqa_weights(path: &Path) -> Result<GqaWeights> {
    let mut cur = Cursor::new(fs::read(path)?);
    check_magic(&mut cur, GQAW_MAGIC)?;
    let d_model = read_dim(&mut cur)?;
    let n_q_heads = read_dim(&mut cur)?;
    let n_kv_heads = read_dim(&mut cur)?;
    let d_head = read_dim(&mut cur)?;
    let g = read_dim(&mut cur)?;
    let w_win = read_dim(&mut cur)?;
    let n_summary_queries = read_dim(&mut cur)?;
    let mask_policy = mask_from_code(truncated(cur.read_u32::<LittleEndian>())?)?;
    let rope_base = truncated(cur.read_f64::<LittleEndian>())?;
    let config = GqaConfig {
        d_model,
        n_q_heads,
        n_kv_heads,
        d_head,
        rope_base,
        g,
        w: w_win,
        n_summary_queries,
        mask_policy,
    };
    config.validate()?;
    let heads = |count: usize, cur: &mut Cursor<Vec<u8>>| -> Result<Vec<Matrix>> {
        (0..count).map(|_| read_matrix(cur, d_model, d_head)).collect()
    };
    let w_q = heads(n_q_heads, &mut cur)?;
    let w_k = heads(n_kv_heads, &mut cur)?;
    let w_v = heads(n_kv_heads, &mut cur)?;
    let weights = GqaWeights {
        config,
        w_q,
        w_k,
        w_v,
    };
    weights.validate()?;
    Ok(weights)
}

/// Writes a decode-cache snapshot.
pub fn write_cache(path: &Path, cache: &LatentCache) -> Result<()> {
    let mut out = Vec::new();
    out.write_all(LCAC_MAGIC)?;
    out.write_u32::<LittleEndian>(FORMAT_VERSION)?;
    let n_heads = cache.queries().len();
    let query_rows = cache.queries().first().map_or(0, Matrix::rows);
    if cache.queries().iter().any(|q| q.rows() != query_rows) {
        return Err(Error::Consistency(
            "stored query row counts differ across heads".into(),
        ));
    }
    let d_k = cache.queries().first().map_or(0, Matrix::cols);
    for dim in [
        cache.reps().len(),
        cache.buffer_len(),
        cache.group_size(),
        cache.window(),
        cache.buffer_c().cols(),
        cache.buffer_k_rope().cols(),
        n_heads,
        d_k,
        cache.n_summary_queries(),
        query_rows,
    ] {
        write_dim(&mut out, dim)?;
    }
    out.write_u64::<LittleEndian>(cache.total_tokens() as u64)?;
    for rep in cache.reps() {
        write_f64s(&mut out, &rep.c_rep)?;
        write_f64s(&mut out, &rep.k_rope_rep)?;
        out.write_u64::<LittleEndian>(rep.anchor_position as u64)?;
        write_dim(&mut out, rep.anchor_index)?;
        write_f64s(&mut out, &rep.alpha)?;
    }
    write_matrix(&mut out, cache.buffer_c())?;
    write_matrix(&mut out, cache.buffer_k_rope())?;
    for &p in cache.buffer_positions() {
        out.write_u64::<LittleEndian>(p as u64)?;
    }
    for q in cache.queries() {
        write_matrix(&mut out, q)?;
    }
    fs::write(path, out)?;
    Ok(())
}

/// Reads a decode-cache snapshot.
pub fn read_cache(path: &Path) -> Result<LatentCache> {
    let mut cur = Cursor::new(fs::read(path)?);
    check_magic(&mut cur, LCAC_MAGIC)?;
    let m = read_dim(&mut cur)?;
    let buffer_len = read_dim(&mut cur)?;
    let g = read_dim(&mut cur)?;
    let w = read_dim(&mut cur)?;
    let d_c = read_dim(&mut cur)?;
    let d_r = read_dim(&mut cur)?;
    let n_heads = read_dim(&mut cur)?;
    let d_k = read_dim(&mut cur)?;
    let n_summary_queries = read_dim(&mut cur)?;
    let query_rows = read_dim(&mut cur)?;
    let total_tokens = truncated(cur.read_u64::<LittleEndian>())? as usize;
    if g == 0 {
        return Err(Error::Format("cache declares group size 0".into()));
    }
    if m * g + buffer_len != total_tokens {
        return Err(Error::Format(format!(
            "cache bookkeeping broken: {m} reps x {g} + {buffer_len} != {total_tokens}"
        )));
    }
    let mut reps = Vec::with_capacity(m);
    for _ in 0..m {
        let c_rep = read_f64s(&mut cur, d_c)?;
        let k_rope_rep = read_f64s(&mut cur, d_r)?;
        let anchor_position = truncated(cur.read_u64::<LittleEndian>())? as usize;
        let anchor_index = read_dim(&mut cur)?;
        let alpha = read_f64s(&mut cur, g)?;
        reps.push(GroupSummary {
            alpha,
            anchor_index,
            anchor_position,
            c_rep,
            k_rope_rep,
        });
    }
    let buffer_c = read_matrix(&mut cur, buffer_len, d_c)?;
    let buffer_k_rope = read_matrix(&mut cur, buffer_len, d_r)?;
    let mut buffer_positions = Vec::with_capacity(buffer_len);
    for _ in 0..buffer_len {
        buffer_positions.push(truncated(cur.read_u64::<LittleEndian>())? as usize);
    }
    let mut queries = Vec::with_capacity(n_heads);
    for _ in 0..n_heads {
        queries.push(read_matrix(&mut cur, query_rows, d_k)?);
    }
    Ok(LatentCache::from_parts(
        g,
        w,
        n_summary_queries,
        reps,
        buffer_c,
        buffer_k_rope,
        buffer_positions,
        queries,
        total_tokens,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gen::{gen_gqa_weights, gen_sequence, gen_weights};
    use crate::lca::{prefill, LcaConfig};
    use crate::mla::ModelConfig;

    fn tmp(name: &str) -> std::path::PathBuf {
        let mut p = std::env::temp_dir();
        p.push(format!("lca-io-test-{}-{name}", std::process::id()));
        p
    }

    fn mla_cfg() -> ModelConfig {
        ModelConfig {
            d_model: 8,
            d_cq: 4,
            d_c: 4,
            d_k_prime: 3,
            d_r: 2,
            d_v: 3,
            n_heads: 2,
            rope_base: 10_000.0,
        }
    }

    #[test]
    fn mla_weights_round_trip_is_bit_exact() {
        let w = gen_weights(&mla_cfg(), 77).unwrap();
        let path = tmp("mlaw");
        write_mla_weights(&path, &w).unwrap();
        let back = read_mla_weights(&path).unwrap();
        assert_eq!(w, back);
        fs::remove_file(&path).ok();
    }

    #[test]
    fn gqa_weights_round_trip_is_bit_exact() {
        let cfg = GqaConfig {
            d_model: 8,
            n_q_heads: 4,
            n_kv_heads: 2,
            d_head: 4,
            rope_base: 10_000.0,
            g: 3,
            w: 2,
            n_summary_queries: 2,
            mask_policy: MaskPolicy::RepCausal,
        };
        let w = gen_gqa_weights(&cfg, 78).unwrap();
        let path = tmp("gqaw");
        write_gqa_weights(&path, &w).unwrap();
        let back = read_gqa_weights(&path).unwrap();
        assert_eq!(w, back);
        fs::remove_file(&path).ok();
    }

    #[test]
    fn cache_round_trip_preserves_everything() {
        let mcfg = mla_cfg();
        let weights = gen_weights(&mcfg, 79).unwrap();
        let mut lcfg = LcaConfig::new(3, 2);
        lcfg.n_summary_queries = 4;
        let x = gen_sequence(14, mcfg.d_model, 80).unwrap();
        let cache = prefill(&x, &weights, &lcfg).unwrap().cache;
        assert!(!cache.reps().is_empty());
        let path = tmp("lcac");
        write_cache(&path, &cache).unwrap();
        let back = read_cache(&path).unwrap();
        assert_eq!(cache, back);
        fs::remove_file(&path).ok();
    }

    #[test]
    fn wrong_magic_is_a_format_error() {
        let path = tmp("magic");
        fs::write(&path, b"NOPE\x01\x00\x00\x00rest").unwrap();
        assert!(matches!(read_mla_weights(&path), Err(Error::Format(_))));
        fs::remove_file(&path).ok();
    }

    #[test]
    fn truncated_file_is_a_format_error_not_a_crash() {
        let w = gen_weights(&mla_cfg(), 81).unwrap();
        let path = tmp("trunc");
        write_mla_weights(&path, &w).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(read_mla_weights(&path), Err(Error::Format(_))));
        fs::remove_file(&path).ok();
    }

    #[test]
    fn version_mismatch_is_a_format_error() {
        let w = gen_weights(&mla_cfg(), 82).unwrap();
        let path = tmp("version");
        write_mla_weights(&path, &w).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[4] = 99; // bump the version field
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(read_mla_weights(&path), Err(Error::Format(_))));
        fs::remove_file(&path).ok();
    }
}

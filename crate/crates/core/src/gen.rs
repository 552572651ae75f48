//! Deterministic synthetic data: weights and token sequences from a single
//! u64 seed. Independent streams keep weight draws stable when, say, only the
//! input length changes.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::gqa::{GqaConfig, GqaWeights};
use crate::mla::{MlaWeights, ModelConfig};
use crate::tensor::Matrix;

/// Stream ids carve one seed into independent generators.
pub const STREAM_WEIGHTS: u64 = 1;
pub const STREAM_INPUTS: u64 = 2;
pub const STREAM_TRIALS: u64 = 3;
pub const STREAM_GQA_WEIGHTS: u64 = 4;

/// Counter-mode generator for `(seed, stream)`.
pub fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// rows x cols matrix of N(0, std^2) draws, row-major fill order.
pub fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Result<Matrix> {
    let normal = Normal::new(0.0, std)
        .map_err(|e| Error::Config(format!("bad gaussian std {std}: {e}")))?;
    let data: Vec<f64> = (0..rows * cols).map(|_| normal.sample(rng)).collect();
    Matrix::from_vec(rows, cols, data)
}

/// Projection matrix with variance 1/fan_in so activations stay O(1).
fn projection(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Result<Matrix> {
    gaussian_matrix(rng, rows, cols, 1.0 / (rows as f64).sqrt())
}

/// Draws a full latent-attention weight set.
///
/// Matrices are drawn in declaration order (w_dq, w_dkv, w_uq per head,
/// w_uk per head, w_uv per head, w_qr per head, w_kr) — the same order the
/// weight file uses — so the stream is reproducible from the seed alone.
pub fn gen_weights(cfg: &ModelConfig, seed: u64) -> Result<MlaWeights> {
    cfg.validate()?;
    let rng = &mut rng_for(seed, STREAM_WEIGHTS);
    let w_dq = projection(rng, cfg.d_model, cfg.d_cq)?;
    let w_dkv = projection(rng, cfg.d_model, cfg.d_c)?;
    let mut w_uq = Vec::with_capacity(cfg.n_heads);
    for _ in 0..cfg.n_heads {
        w_uq.push(projection(rng, cfg.d_cq, cfg.d_k_prime)?);
    }
    let mut w_uk = Vec::with_capacity(cfg.n_heads);
    for _ in 0..cfg.n_heads {
        w_uk.push(projection(rng, cfg.d_c, cfg.d_k_prime)?);
    }
    let mut w_uv = Vec::with_capacity(cfg.n_heads);
    for _ in 0..cfg.n_heads {
        w_uv.push(projection(rng, cfg.d_c, cfg.d_v)?);
    }
    let mut w_qr = Vec::with_capacity(cfg.n_heads);
    for _ in 0..cfg.n_heads {
        w_qr.push(projection(rng, cfg.d_cq, cfg.d_r)?);
    }
    let w_kr = projection(rng, cfg.d_model, cfg.d_r)?;
    let weights = MlaWeights {
        config: *cfg,
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

/// Draws grouped-query attention weights (w_q per query head, then w_k and
/// w_v per kv head, in declaration order).
pub fn gen_gqa_weights(cfg: &GqaConfig, seed: u64) -> Result<GqaWeights> {
    cfg.validate()?;
    let rng = &mut rng_for(seed, STREAM_GQA_WEIGHTS);
    let mut w_q = Vec::with_capacity(cfg.n_q_heads);
    for _ in 0..cfg.n_q_heads {
        w_q.push(projection(rng, cfg.d_model, cfg.d_head)?);
    }
    let mut w_k = Vec::with_capacity(cfg.n_kv_heads);
    for _ in 0..cfg.n_kv_heads {
        w_k.push(projection(rng, cfg.d_model, cfg.d_head)?);
    }
    let mut w_v = Vec::with_capacity(cfg.n_kv_heads);
    for _ in 0..cfg.n_kv_heads {
        w_v.push(projection(rng, cfg.d_model, cfg.d_head)?);
    }
    let weights = GqaWeights {
        config: *cfg,
        w_q,
        w_k,
        w_v,
    };
    weights.validate()?;
    Ok(weights)
}

/// L x d_model token block of unit gaussians.
pub fn gen_sequence(l: usize, d_model: usize, seed: u64) -> Result<Matrix> {
    gaussian_matrix(&mut rng_for(seed, STREAM_INPUTS), l, d_model, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ModelConfig {
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
    fn same_seed_same_weights() {
        let a = gen_weights(&cfg(), 42).unwrap();
        let b = gen_weights(&cfg(), 42).unwrap();
        assert_eq!(a.w_dq, b.w_dq);
        assert_eq!(a.w_uk, b.w_uk);
        assert_eq!(a.w_kr, b.w_kr);
    }

    #[test]
    fn different_seed_different_weights() {
        let a = gen_weights(&cfg(), 1).unwrap();
        let b = gen_weights(&cfg(), 2).unwrap();
        assert_ne!(a.w_dq, b.w_dq);
    }

    #[test]
    fn streams_are_independent() {
        // Weight and input streams must not overlap even for the same seed.
        let w = gaussian_matrix(&mut rng_for(9, STREAM_WEIGHTS), 2, 2, 1.0).unwrap();
        let x = gaussian_matrix(&mut rng_for(9, STREAM_INPUTS), 2, 2, 1.0).unwrap();
        assert_ne!(w, x);
    }

    #[test]
    fn sequence_shape_and_determinism() {
        let a = gen_sequence(5, 8, 7).unwrap();
        let b = gen_sequence(5, 8, 7).unwrap();
        assert_eq!(a.rows(), 5);
        assert_eq!(a.cols(), 8);
        assert_eq!(a, b);
    }

    #[test]
    fn projection_scale_tracks_fan_in() {
        // Sample variance of a 1/sqrt(fan_in) projection should be near 1/fan_in.
        let m = projection(&mut rng_for(3, STREAM_TRIALS), 64, 64).unwrap();
        let var: f64 =
            m.data().iter().map(|v| v * v).sum::<f64>() / m.data().len() as f64;
        assert!((var - 1.0 / 64.0).abs() < 0.2 / 64.0 * 10.0, "var = {var}");
    }
}

//! Frozen downstream predictor standing in for a pretrained model.
//!
//! Pools the layer's output tokens, applies one nonlinear mix, and emits a
//! multi-quantile forecast over the horizon. Weights are seeded at
//! construction and never change afterwards — the fingerprint audits that —
//! but gradients still flow *through* the backbone into the sparse layer.

use crate::error::{Error, Result};
use crate::numkit::{fingerprint, GradTape, Matrix, Rng, VarId};
use serde::{Deserialize, Serialize};

/// Frozen head parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneParams {
    pub w_pool: Matrix, // h x h
    pub w_out: Matrix,  // h x (H * |Q|)
    pub b_out: Matrix,  // 1 x (H * |Q|)
    pub horizon: usize,
    pub levels: Vec<f64>,
    fingerprint: u64,
}

/// Quantile levels must be strictly increasing inside (0,1) and include
/// the median, which doubles as the point forecast.
pub fn validate_levels(levels: &[f64]) -> Result<()> {
    if levels.is_empty() {
        return Err(Error::Config("empty quantile levels".into()));
    }
    for pair in levels.windows(2) {
        if pair[0] >= pair[1] {
            return Err(Error::Config("quantile levels must strictly increase".into()));
        }
    }
    if levels[0] <= 0.0 || *levels.last().unwrap() >= 1.0 {
        return Err(Error::Config("quantile levels must lie in (0,1)".into()));
    }
    if !levels.contains(&0.5) {
        return Err(Error::Config("quantile levels must include 0.5".into()));
    }
    Ok(())
}

/// Seeded random head, frozen on construction.
pub fn build_frozen_backbone(
    seed: u64,
    token_dim: usize,
    horizon: usize,
    levels: &[f64],
) -> Result<BackboneParams> {
    validate_levels(levels)?;
    let mut rng = Rng::labeled(seed, "backbone");
    let head = horizon * levels.len();
    let w_pool = rng.fan_in_matrix(token_dim, token_dim, token_dim);
    let w_out = rng.fan_in_matrix(token_dim, head, token_dim);
    let b_out = Matrix::zeros(1, head);
    let fp = fingerprint([&w_pool, &w_out, &b_out]);
    Ok(BackboneParams {
        w_pool,
        w_out,
        b_out,
        horizon,
        levels: levels.to_vec(),
        fingerprint: fp,
    })
}

impl BackboneParams {
    pub fn token_dim(&self) -> usize {
        self.w_pool.rows()
    }

    pub fn n_quantiles(&self) -> usize {
        self.levels.len()
    }

    pub fn param_count(&self) -> usize {
        self.w_pool.len() + self.w_out.len() + self.b_out.len()
    }

    /// Stored fingerprint from construction time.
    pub fn stored_fingerprint(&self) -> u64 {
        self.fingerprint
    }

    /// Recompute from the live weights; must equal the stored value.
    pub fn recompute_fingerprint(&self) -> u64 {
        fingerprint([&self.w_pool, &self.w_out, &self.b_out])
    }

    pub fn verify_frozen(&self) -> Result<()> {
        if self.recompute_fingerprint() != self.fingerprint {
            return Err(Error::Protocol("backbone weights drifted after freeze".into()));
        }
        Ok(())
    }

    /// Index of the median column.
    pub fn median_col(&self) -> usize {
        self.levels
            .iter()
            .position(|&q| q == 0.5)
            .expect("levels validated to contain 0.5")
    }
}

/// Multi-quantile forecast over the horizon.
///
/// `values` is H x |Q|, non-decreasing across the quantile axis after the
/// monotonic rearrangement in the forward pass; `point` is the median
/// column.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantileForecast {
    pub levels: Vec<f64>,
    pub values: Matrix,
    pub point: Vec<f64>,
}

impl QuantileForecast {
    /// Assemble from a sorted 1 x (H*|Q|) head row.
    pub fn from_head_row(head: &Matrix, horizon: usize, levels: &[f64]) -> Result<Self> {
        let q = levels.len();
        if head.rows() != 1 || head.cols() != horizon * q {
            return Err(Error::shape(
                "quantile_forecast",
                format!("1x{} head vs H={horizon} Q={q}", head.cols()),
            ));
        }
        let values = Matrix::from_vec(horizon, q, head.as_slice().to_vec())?;
        let median = levels
            .iter()
            .position(|&l| l == 0.5)
            .ok_or_else(|| Error::Config("levels missing 0.5".into()))?;
        let point = (0..horizon).map(|t| values.get(t, median)).collect();
        Ok(QuantileForecast {
            levels: levels.to_vec(),
            values,
            point,
        })
    }

    /// Flattened row (H*|Q|), the head layout.
    pub fn head_row(&self) -> Matrix {
        Matrix::row_vector(self.values.as_slice().to_vec())
    }
}

/// Forward through the frozen head on the tape. Returns the sorted
/// 1 x (H*|Q|) row; gradients flow through every step including the
/// rearrangement permutation.
pub fn backbone_forward(
    tape: &mut GradTape,
    params: &BackboneParams,
    moe_tokens: VarId,
    w_pool: VarId,
    w_out: VarId,
    b_out: VarId,
) -> Result<VarId> {
    let pooled = tape.mean_rows(moe_tokens);
    let mixed = tape.matmul(pooled, w_pool)?;
    let mixed = tape.tanh(mixed);
    let head = tape.matmul(mixed, w_out)?;
    let head = tape.add_row_broadcast(head, b_out)?;
    tape.sort_row_blocks(head, params.n_quantiles())
}

/// Tape-free forward producing the forecast directly.
pub fn backbone_forward_plain(params: &BackboneParams, moe_tokens: &Matrix) -> Result<QuantileForecast> {
    if moe_tokens.cols() != params.token_dim() {
        return Err(Error::shape(
            "backbone_forward",
            format!("{} token width vs {}", moe_tokens.cols(), params.token_dim()),
        ));
    }
    let pooled = moe_tokens.mean_rows();
    let mixed = pooled.matmul(&params.w_pool)?.tanh();
    let head = mixed.matmul(&params.w_out)?.add_row_broadcast(&params.b_out)?;
    // Monotonic rearrangement: sort each step's quantile block ascending.
    let q = params.n_quantiles();
    let mut data = head.as_slice().to_vec();
    for blk in data.chunks_mut(q) {
        blk.sort_by(|a, b| a.partial_cmp(b).unwrap());
    }
    QuantileForecast::from_head_row(&Matrix::row_vector(data), params.horizon, &params.levels)
}

#[cfg(test)]
mod tests {
    use super::*;

    const Q9: [f64; 9] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];

    #[test]
    fn same_seed_same_fingerprint() {
        let a = build_frozen_backbone(42, 8, 4, &Q9).unwrap();
        let b = build_frozen_backbone(42, 8, 4, &Q9).unwrap();
        assert_eq!(a.stored_fingerprint(), b.stored_fingerprint());
        assert_eq!(a, b);
    }

    #[test]
    fn different_seeds_different_fingerprints() {
        let a = build_frozen_backbone(1, 8, 4, &Q9).unwrap();
        let b = build_frozen_backbone(2, 8, 4, &Q9).unwrap();
        assert_ne!(a.stored_fingerprint(), b.stored_fingerprint());
    }

    #[test]
    fn param_count_from_shape_formula() {
        // h=8, H=4, |Q|=9: 8*8 + 8*36 + 36 = 388.
        let p = build_frozen_backbone(42, 8, 4, &Q9).unwrap();
        assert_eq!(p.param_count(), 388);
    }

    #[test]
    fn zero_tokens_zero_forecast() {
        let p = build_frozen_backbone(3, 4, 3, &[0.1, 0.5, 0.9]).unwrap();
        let f = backbone_forward_plain(&p, &Matrix::zeros(5, 4)).unwrap();
        assert!(f.values.as_slice().iter().all(|v| *v == 0.0));
        assert_eq!(f.point, vec![0.0; 3]);
    }

    #[test]
    fn single_token_pooling_is_identity() {
        let p = build_frozen_backbone(4, 4, 2, &[0.1, 0.5, 0.9]).unwrap();
        let token = Rng::new(9).uniform_matrix(1, 4, -1.0, 1.0);
        let single = backbone_forward_plain(&p, &token).unwrap();
        // Mean over one row is that row.
        let mixed = token.matmul(&p.w_pool).unwrap().tanh();
        let head = mixed
            .matmul(&p.w_out)
            .unwrap()
            .add_row_broadcast(&p.b_out)
            .unwrap();
        let mut data = head.as_slice().to_vec();
        for blk in data.chunks_mut(3) {
            blk.sort_by(|a, b| a.partial_cmp(b).unwrap());
        }
        assert_eq!(single.head_row().as_slice(), &data[..]);
    }

    #[test]
    fn quantiles_monotone_after_rearrangement() {
        let p = build_frozen_backbone(5, 6, 8, &Q9).unwrap();
        let mut rng = Rng::new(10);
        for _ in 0..20 {
            let tokens = rng.uniform_matrix(7, 6, -2.0, 2.0);
            let f = backbone_forward_plain(&p, &tokens).unwrap();
            for t in 0..8 {
                for j in 1..9 {
                    assert!(f.values.get(t, j) >= f.values.get(t, j - 1));
                }
            }
            // Point forecast is the median column.
            for (t, v) in f.point.iter().enumerate() {
                assert_eq!(*v, f.values.get(t, 4));
            }
        }
    }

    #[test]
    fn tape_and_plain_forward_agree() {
        let p = build_frozen_backbone(6, 5, 3, &[0.25, 0.5, 0.75]).unwrap();
        let tokens = Rng::new(11).uniform_matrix(4, 5, -1.0, 1.0);
        let plain = backbone_forward_plain(&p, &tokens).unwrap();

        let mut tape = GradTape::new();
        let tok = tape.constant(tokens);
        let wp = tape.constant(p.w_pool.clone());
        let wo = tape.constant(p.w_out.clone());
        let bo = tape.constant(p.b_out.clone());
        let head = backbone_forward(&mut tape, &p, tok, wp, wo, bo).unwrap();
        assert_eq!(tape.value(head).as_slice(), plain.head_row().as_slice());
    }

    #[test]
    fn levels_validation() {
        assert!(validate_levels(&[0.1, 0.5, 0.9]).is_ok());
        assert!(validate_levels(&[]).is_err());
        assert!(validate_levels(&[0.5, 0.5]).is_err());
        assert!(validate_levels(&[0.0, 0.5, 0.9]).is_err());
        assert!(validate_levels(&[0.1, 0.9]).is_err()); // no median
    }

    #[test]
    fn freeze_audit_detects_drift() {
        let mut p = build_frozen_backbone(7, 3, 2, &[0.1, 0.5, 0.9]).unwrap();
        p.verify_frozen().unwrap();
        p.w_out.set(0, 0, 123.0);
        assert!(p.verify_frozen().is_err());
    }
}

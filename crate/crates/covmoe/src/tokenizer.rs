//! Lightweight projection tokenizer.
//!
//! One token per context timestep: `tanh(x_t W_in + b_in)`. Covariates are
//! embedded separately through their own affine map and feed only the
//! gating side of the layer — tokens never see covariates and embeddings
//! never see the series values.

use crate::error::Result;
use crate::numkit::{fingerprint, GradTape, Matrix, Rng, VarId};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenizerParams {
    pub w_in: Matrix,  // d x h
    pub b_in: Matrix,  // 1 x h
    pub w_cov: Matrix, // p x h_z
    pub b_cov: Matrix, // 1 x h_z
}

impl TokenizerParams {
    pub fn init(
        input_dim: usize,
        token_dim: usize,
        cov_dim: usize,
        cov_embed_dim: usize,
        rng: &mut Rng,
    ) -> Self {
        TokenizerParams {
            w_in: rng.fan_in_matrix(input_dim, token_dim, input_dim),
            b_in: Matrix::zeros(1, token_dim),
            w_cov: rng.fan_in_matrix(cov_dim, cov_embed_dim, cov_dim.max(1)),
            b_cov: Matrix::zeros(1, cov_embed_dim),
        }
    }

    pub fn token_dim(&self) -> usize {
        self.w_in.cols()
    }

    pub fn cov_embed_dim(&self) -> usize {
        self.w_cov.cols()
    }

    pub fn param_count(&self) -> usize {
        self.w_in.len() + self.b_in.len() + self.w_cov.len() + self.b_cov.len()
    }

    pub fn fingerprint(&self) -> u64 {
        fingerprint([&self.w_in, &self.b_in, &self.w_cov, &self.b_cov])
    }
}

/// Token matrix (L x h) for a context block, recorded on the tape.
pub fn tokenize(tape: &mut GradTape, context: VarId, w_in: VarId, b_in: VarId) -> Result<VarId> {
    let z = tape.matmul(context, w_in)?;
    let z = tape.add_row_broadcast(z, b_in)?;
    Ok(tape.tanh(z))
}

/// Covariate embeddings (L x h_z), recorded on the tape.
pub fn embed_covariates(
    tape: &mut GradTape,
    cov_rows: VarId,
    w_cov: VarId,
    b_cov: VarId,
) -> Result<VarId> {
    let z = tape.matmul(cov_rows, w_cov)?;
    let z = tape.add_row_broadcast(z, b_cov)?;
    Ok(tape.tanh(z))
}

/// Tape-free tokenization for inference and oracle checks.
pub fn tokenize_plain(params: &TokenizerParams, context: &Matrix) -> Result<Matrix> {
    Ok(context
        .matmul(&params.w_in)?
        .add_row_broadcast(&params.b_in)?
        .tanh())
}

pub fn embed_covariates_plain(params: &TokenizerParams, cov_rows: &Matrix) -> Result<Matrix> {
    Ok(cov_rows
        .matmul(&params.w_cov)?
        .add_row_broadcast(&params.b_cov)?
        .tanh())
}

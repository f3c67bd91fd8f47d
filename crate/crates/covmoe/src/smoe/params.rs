//! Expert and gate parameter containers, seeded initialization, and
//! parameter counting.

use super::MoEConfig;
use crate::error::{Error, Result};
use crate::numkit::{fingerprint, Matrix, Rng};
use serde::{Deserialize, Serialize};

/// Which bank an expert lives in.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExpertBank {
    Shared,
    Conditional,
    Routed,
}

impl ExpertBank {
    pub fn code(self) -> u8 {
        match self {
            ExpertBank::Shared => 0,
            ExpertBank::Conditional => 1,
            ExpertBank::Routed => 2,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(ExpertBank::Shared),
            1 => Ok(ExpertBank::Conditional),
            2 => Ok(ExpertBank::Routed),
            other => Err(Error::Checkpoint(format!("unknown expert class {other}"))),
        }
    }
}

/// Low-rank adapter factors: `dW1 = a1 b1`, `dW2 = a2 b2`.
///
/// `b*` start at zero so the delta is zero at initialization; the base
/// weights are frozen whenever factors are present.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LowRankFactors {
    pub a1: Matrix, // h x r
    pub b1: Matrix, // r x ff
    pub a2: Matrix, // ff x r
    pub b2: Matrix, // r x h
}

/// One expert sub-network: `tanh(x W1 + b1) W2 + b2`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpertParams {
    pub expert_id: u32,
    pub bank: ExpertBank,
    pub w1: Matrix, // h x ff
    pub b1: Matrix, // 1 x ff
    pub w2: Matrix, // ff x h
    pub b2: Matrix, // 1 x h
    pub lowrank: Option<LowRankFactors>,
    pub origin_client: Option<String>,
}

impl ExpertParams {
    /// Seeded init: base weights Uniform(+-1/sqrt(fan_in)), biases zero.
    pub fn init(expert_id: u32, bank: ExpertBank, h: usize, ff: usize, rng: &mut Rng) -> Self {
        ExpertParams {
            expert_id,
            bank,
            w1: rng.fan_in_matrix(h, ff, h),
            b1: Matrix::zeros(1, ff),
            w2: rng.fan_in_matrix(ff, h, ff),
            b2: Matrix::zeros(1, h),
            lowrank: None,
            origin_client: None,
        }
    }

    pub fn token_dim(&self) -> usize {
        self.w1.rows()
    }

    pub fn ff_dim(&self) -> usize {
        self.w1.cols()
    }

    pub fn rank(&self) -> usize {
        self.lowrank.as_ref().map_or(0, |lr| lr.a1.cols())
    }

    /// Attach zero-delta adapter factors of rank `r` and freeze the base.
    pub fn attach_lowrank(&mut self, r: usize, rng: &mut Rng) {
        let (h, ff) = (self.token_dim(), self.ff_dim());
        self.lowrank = Some(LowRankFactors {
            a1: rng.fan_in_matrix(h, r, h),
            b1: Matrix::zeros(r, ff),
            a2: rng.fan_in_matrix(ff, r, ff),
            b2: Matrix::zeros(r, h),
        });
    }

    /// Effective first-layer weight (base plus low-rank delta).
    pub fn effective_w1(&self) -> Result<Matrix> {
        match &self.lowrank {
            Some(lr) => self.w1.add(&lr.a1.matmul(&lr.b1)?),
            None => Ok(self.w1.clone()),
        }
    }

    /// Effective second-layer weight (base plus low-rank delta).
    pub fn effective_w2(&self) -> Result<Matrix> {
        match &self.lowrank {
            Some(lr) => self.w2.add(&lr.a2.matmul(&lr.b2)?),
            None => Ok(self.w2.clone()),
        }
    }

    /// Fingerprint of the base weights only; must be constant under
    /// low-rank training and under any freeze contract.
    pub fn base_fingerprint(&self) -> u64 {
        fingerprint([&self.w1, &self.b1, &self.w2, &self.b2])
    }

    /// Fingerprint covering adapter factors as well.
    pub fn full_fingerprint(&self) -> u64 {
        match &self.lowrank {
            Some(lr) => fingerprint([
                &self.w1, &self.b1, &self.w2, &self.b2, &lr.a1, &lr.b1, &lr.a2, &lr.b2,
            ]),
            None => self.base_fingerprint(),
        }
    }

    pub fn base_param_count(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }

    pub fn lowrank_param_count(&self) -> usize {
        self.lowrank
            .as_ref()
            .map_or(0, |lr| lr.a1.len() + lr.b1.len() + lr.a2.len() + lr.b2.len())
    }

    /// Parameters that move under training: the adapter factors when
    /// present, otherwise the base weights.
    pub fn trainable_param_count(&self) -> usize {
        if self.lowrank.is_some() {
            self.lowrank_param_count()
        } else {
            self.base_param_count()
        }
    }

    pub fn frozen_param_count(&self) -> usize {
        if self.lowrank.is_some() {
            self.base_param_count()
        } else {
            0
        }
    }
}

/// What the gate reads per token.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GateInputMode {
    /// Covariate embedding alone (per-token, width h_z).
    CovariateOnly,
    /// Covariate embedding concatenated with the token (width h_z + h).
    CovariatePlusToken,
}

/// Trainable scoring network: raw scores `s = x W_g + b_g` over the
/// routed bank.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateParams {
    pub w_g: Matrix, // in_dim x M
    pub b_g: Matrix, // 1 x M
    pub input_mode: GateInputMode,
}

impl GateParams {
    pub fn init(
        input_mode: GateInputMode,
        cov_embed_dim: usize,
        token_dim: usize,
        routed: usize,
        rng: &mut Rng,
    ) -> Self {
        let in_dim = match input_mode {
            GateInputMode::CovariateOnly => cov_embed_dim,
            GateInputMode::CovariatePlusToken => cov_embed_dim + token_dim,
        };
        GateParams {
            w_g: rng.fan_in_matrix(in_dim, routed, in_dim),
            b_g: Matrix::zeros(1, routed),
            input_mode,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w_g.rows()
    }

    pub fn routed(&self) -> usize {
        self.w_g.cols()
    }

    pub fn param_count(&self) -> usize {
        self.w_g.len() + self.b_g.len()
    }

    pub fn fingerprint(&self) -> u64 {
        fingerprint([&self.w_g, &self.b_g])
    }
}

/// Widths of the components outside the MoE layer, for full-model counts.
#[derive(Clone, Copy, Debug)]
pub struct FullModelDims {
    /// Input channels d.
    pub input_dim: usize,
    /// Covariate columns p.
    pub cov_dim: usize,
    /// Covariate embedding width h_z.
    pub cov_embed_dim: usize,
    /// Forecast horizon H.
    pub horizon: usize,
    /// Number of quantile levels.
    pub n_quantiles: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CountScope {
    MoeOnly,
    FullModel,
}

/// Exact parameter count for a config.
///
/// `MoeOnly` covers the gate, every expert's stored tensors (base and
/// adapter factors), and the scalar priors; `FullModel` adds the tokenizer
/// and the frozen backbone. This is the analytic side of the
/// communication-reduction report.
pub fn count_params(cfg: &MoEConfig, scope: CountScope, dims: &FullModelDims) -> usize {
    let expert_base = 2 * cfg.token_dim * cfg.ff_dim + cfg.ff_dim + cfg.token_dim;
    let expert_lowrank = cfg
        .lowrank
        .map_or(0, |r| 2 * r * (cfg.token_dim + cfg.ff_dim));
    let n_experts = cfg.shared + cfg.conditional + cfg.routed;
    let gate_in = match cfg.gate_input {
        GateInputMode::CovariateOnly => dims.cov_embed_dim,
        GateInputMode::CovariatePlusToken => dims.cov_embed_dim + cfg.token_dim,
    };
    let gate = gate_in * cfg.routed + cfg.routed;
    let priors = cfg.conditional + cfg.routed;
    let moe = n_experts * (expert_base + expert_lowrank) + gate + priors;
    match scope {
        CountScope::MoeOnly => moe,
        CountScope::FullModel => {
            let tokenizer = dims.input_dim * cfg.token_dim
                + cfg.token_dim
                + dims.cov_dim * dims.cov_embed_dim
                + dims.cov_embed_dim;
            let head = dims.horizon * dims.n_quantiles;
            let backbone = cfg.token_dim * cfg.token_dim + cfg.token_dim * head + head;
            moe + tokenizer + backbone
        }
    }
}

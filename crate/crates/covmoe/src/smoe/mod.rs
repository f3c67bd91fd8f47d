//! Covariate-aware sparse mixture-of-experts layer.
//!
//! Three expert banks sit side by side: *shared* experts run on every
//! token, one *conditional* expert is picked deterministically from a
//! static covariate, and *routed* experts are picked per token by a
//! trainable top-k gate over covariate embeddings. Mixing weights are a
//! softmax over the raw scores restricted to the selected set, the
//! conditional expert entering with a learned scalar prior. A residual
//! connection keeps the layer near-identity at initialization, and a
//! fallback path (uniform or learned priors) keeps every input routable
//! when covariates are missing or invalid.

mod forward;
mod params;
mod routing;
mod wire;

pub use forward::{route_window, BoundExpert, ParamBind, RoutingMode, WindowContext};
pub use params::{
    count_params, CountScope, ExpertBank, ExpertParams, FullModelDims, GateInputMode, GateParams,
    LowRankFactors,
};
pub use routing::{cov_select, select_topk, CovSelectorRule, SelectorMode, StaticCovariate};
pub use wire::{
    deserialize_expert, deserialize_gate, expert_record_len, gate_record_len, serialize_expert,
    serialize_gate,
};

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// How the layer behaves when covariates are unusable.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FallbackMode {
    /// The k lowest-indexed routed experts at weight 1/k each.
    Uniform,
    /// Gate scores replaced by per-expert trainable priors, then normal top-k.
    LearnedPrior,
}

/// Static shape of one sparse-MoE layer.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MoEConfig {
    /// Always-active experts (fixed weight 1/S outside the softmax).
    pub shared: usize,
    /// Experts picked deterministically from static covariates.
    pub conditional: usize,
    /// Experts scored by the gate.
    pub routed: usize,
    /// Routed experts selected per token.
    pub top_k: usize,
    /// Token width h.
    pub token_dim: usize,
    /// Expert hidden width.
    pub ff_dim: usize,
    /// Low-rank adapter rank; `None` trains the full expert weights.
    pub lowrank: Option<usize>,
    pub fallback: FallbackMode,
    pub gate_input: GateInputMode,
}

impl MoEConfig {
    pub fn validate(&self) -> Result<()> {
        if self.routed == 0 {
            return Err(Error::Config("at least one routed expert required".into()));
        }
        if self.top_k == 0 || self.top_k > self.routed {
            return Err(Error::Config(format!(
                "top_k {} outside 1..={}",
                self.top_k, self.routed
            )));
        }
        if self.token_dim == 0 || self.ff_dim == 0 {
            return Err(Error::Config("zero expert width".into()));
        }
        if let Some(r) = self.lowrank {
            if r == 0 {
                return Err(Error::Config("low-rank rank must be positive".into()));
            }
        }
        Ok(())
    }
}

/// Per-token routing record: which experts ran and at what mixing weight.
///
/// `weights` covers the selected non-shared set in a fixed order — the
/// conditional expert first when present, then the routed set ascending —
/// and sums to 1 within 1e-12.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutingDecision {
    pub token_idx: usize,
    pub conditional_idx: Option<usize>,
    pub routed_set: Vec<usize>,
    pub weights: Vec<f64>,
    pub fallback_used: bool,
}

impl RoutingDecision {
    /// Number of selection events this decision contributes to utilization.
    pub fn selection_count(&self) -> usize {
        self.routed_set.len() + usize::from(self.conditional_idx.is_some())
    }
}

/// Evaluation counters returned by the forward pass; the sparsity
/// invariant (S shared + 1 conditional + k routed per token) is asserted
/// against these.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct EvalCounters {
    pub tokens: usize,
    pub shared_evals: usize,
    pub conditional_evals: usize,
    pub routed_evals: usize,
    pub fallback_tokens: usize,
}

impl EvalCounters {
    pub fn merge(&mut self, other: &EvalCounters) {
        self.tokens += other.tokens;
        self.shared_evals += other.shared_evals;
        self.conditional_evals += other.conditional_evals;
        self.routed_evals += other.routed_evals;
        self.fallback_tokens += other.fallback_tokens;
    }
}

/// The full sparse layer: three expert banks, the gate, the scalar priors,
/// and the covariate selection rule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CovSmoeLayer {
    pub cfg: MoEConfig,
    pub shared: Vec<ExpertParams>,
    pub conditional: Vec<ExpertParams>,
    pub routed: Vec<ExpertParams>,
    pub gate: GateParams,
    /// Learned scalar prior per conditional expert (enters the restricted
    /// softmax since the gate only scores the routed bank). Initialized 0.
    pub cond_priors: Vec<f64>,
    /// Learned fallback score per routed expert.
    pub fallback_priors: Vec<f64>,
    /// Required whenever the conditional bank is non-empty.
    pub rule: Option<CovSelectorRule>,
}

impl CovSmoeLayer {
    pub fn init(
        cfg: MoEConfig,
        cov_embed_dim: usize,
        rule: Option<CovSelectorRule>,
        rng: &crate::numkit::Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        match (&rule, cfg.conditional) {
            (None, c) if c > 0 => {
                return Err(Error::Config(
                    "conditional experts configured without a CovSelector rule".into(),
                ))
            }
            (Some(r), c) if c > 0 => r.validate(c)?,
            _ => {}
        }
        let bank = |label: &str, bank, n: usize, base: u32| {
            (0..n)
                .map(|i| {
                    let mut stream = rng.derive(&format!("expert/{label}/{i}"));
                    let mut e = ExpertParams::init(
                        base + i as u32,
                        bank,
                        cfg.token_dim,
                        cfg.ff_dim,
                        &mut stream,
                    );
                    if let Some(r) = cfg.lowrank {
                        e.attach_lowrank(r, &mut stream);
                    }
                    e
                })
                .collect::<Vec<_>>()
        };
        let shared = bank("shared", ExpertBank::Shared, cfg.shared, 0);
        let conditional = bank(
            "conditional",
            ExpertBank::Conditional,
            cfg.conditional,
            cfg.shared as u32,
        );
        let routed = bank(
            "routed",
            ExpertBank::Routed,
            cfg.routed,
            (cfg.shared + cfg.conditional) as u32,
        );
        let gate = GateParams::init(
            cfg.gate_input,
            cov_embed_dim,
            cfg.token_dim,
            cfg.routed,
            &mut rng.derive("gate"),
        );
        Ok(CovSmoeLayer {
            cond_priors: vec![0.0; cfg.conditional],
            fallback_priors: vec![0.0; cfg.routed],
            cfg,
            shared,
            conditional,
            routed,
            gate,
            rule,
        })
    }

    pub fn expert(&self, bank: ExpertBank, idx: usize) -> &ExpertParams {
        match bank {
            ExpertBank::Shared => &self.shared[idx],
            ExpertBank::Conditional => &self.conditional[idx],
            ExpertBank::Routed => &self.routed[idx],
        }
    }

    pub fn expert_mut(&mut self, bank: ExpertBank, idx: usize) -> &mut ExpertParams {
        match bank {
            ExpertBank::Shared => &mut self.shared[idx],
            ExpertBank::Conditional => &mut self.conditional[idx],
            ExpertBank::Routed => &mut self.routed[idx],
        }
    }

    pub fn experts(&self) -> impl Iterator<Item = &ExpertParams> {
        self.shared
            .iter()
            .chain(self.conditional.iter())
            .chain(self.routed.iter())
    }

    /// Stored parameter count (gate + experts + priors), matching
    /// [`count_params`] for the same config.
    pub fn stored_param_count(&self) -> usize {
        let experts: usize = self
            .experts()
            .map(|e| e.base_param_count() + e.lowrank_param_count())
            .sum();
        experts + self.gate.param_count() + self.cond_priors.len() + self.fallback_priors.len()
    }

    /// Attach fresh zero-delta adapters of rank `r` to every expert,
    /// freezing all base weights.
    pub fn attach_lowrank_all(&mut self, r: usize, rng: &crate::numkit::Rng) {
        self.cfg.lowrank = Some(r);
        for (label, bank_len) in [
            ("shared", self.shared.len()),
            ("conditional", self.conditional.len()),
            ("routed", self.routed.len()),
        ] {
            for i in 0..bank_len {
                let mut stream = rng.derive(&format!("lowrank/{label}/{i}"));
                let e = match label {
                    "shared" => &mut self.shared[i],
                    "conditional" => &mut self.conditional[i],
                    _ => &mut self.routed[i],
                };
                e.attach_lowrank(r, &mut stream);
            }
        }
    }
}

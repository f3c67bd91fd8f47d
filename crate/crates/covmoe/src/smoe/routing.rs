//! Expert selection: deterministic covariate-driven choice of the
//! conditional expert, top-k over gate scores, and the fallback plan
//! used when covariates are unusable.

use super::{EvalCounters, FallbackMode, MoEConfig, RoutingDecision};
use crate::error::{Error, Result};
use crate::numkit::VarId;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Static covariate feeding the conditional router.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum StaticCovariate {
    /// Region code of the data source.
    Region(u32),
    /// Hour of day, 0..=23.
    Hour(u32),
}

impl StaticCovariate {
    pub fn raw(self) -> u32 {
        match self {
            StaticCovariate::Region(v) | StaticCovariate::Hour(v) => v,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SelectorMode {
    /// Key the table by region code.
    Region,
    /// Key the table by hour bucket; bucket width is 24 / table size.
    HourBucket,
}

/// Total, deterministic map from a static covariate to a conditional
/// expert index.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CovSelectorRule {
    pub mode: SelectorMode,
    pub table: BTreeMap<u32, usize>,
}

impl CovSelectorRule {
    /// Identity table over `n` regions.
    pub fn region_identity(n: usize) -> Self {
        CovSelectorRule {
            mode: SelectorMode::Region,
            table: (0..n as u32).map(|r| (r, r as usize)).collect(),
        }
    }

    /// `buckets` equal-width hour buckets mapped to expert indices modulo
    /// `n_conditional`.
    pub fn hour_buckets(buckets: usize, n_conditional: usize) -> Self {
        CovSelectorRule {
            mode: SelectorMode::HourBucket,
            table: (0..buckets as u32)
                .map(|b| (b, b as usize % n_conditional.max(1)))
                .collect(),
        }
    }

    /// Every table value must land inside the conditional bank.
    pub fn validate(&self, n_conditional: usize) -> Result<()> {
        if self.table.is_empty() {
            return Err(Error::Config("empty CovSelector table".into()));
        }
        for (&key, &idx) in &self.table {
            if idx >= n_conditional {
                return Err(Error::Config(format!(
                    "CovSelector maps {key} to expert {idx}, only {n_conditional} conditional experts"
                )));
            }
        }
        if self.mode == SelectorMode::HourBucket && 24 % self.table.len() != 0 {
            return Err(Error::Config(format!(
                "{} hour buckets do not divide 24",
                self.table.len()
            )));
        }
        Ok(())
    }
}

/// Deterministic conditional-expert choice.
///
/// An unmapped value is a routing error: callers fall back rather than
/// abort.
pub fn cov_select(rule: &CovSelectorRule, cov: StaticCovariate) -> Result<usize> {
    let key = match (rule.mode, cov) {
        (SelectorMode::Region, StaticCovariate::Region(r)) => r,
        (SelectorMode::HourBucket, StaticCovariate::Hour(h)) => {
            let width = 24 / rule.table.len() as u32;
            h / width
        }
        (mode, other) => {
            return Err(Error::Routing(format!(
                "selector mode {mode:?} got incompatible covariate {other:?}"
            )))
        }
    };
    rule.table
        .get(&key)
        .copied()
        .ok_or_else(|| Error::Routing(format!("no CovSelector entry for key {key}")))
}

/// Indices of the k largest scores, ties broken toward the lowest index,
/// output sorted ascending.
pub fn select_topk(scores: &[f64], k: usize) -> Vec<usize> {
    debug_assert!(k <= scores.len());
    let mut order: Vec<usize> = (0..scores.len()).collect();
    let key = |i: usize| {
        let s = scores[i];
        if s.is_nan() {
            f64::NEG_INFINITY
        } else {
            s
        }
    };
    order.sort_by(|&a, &b| key(b).partial_cmp(&key(a)).unwrap().then(a.cmp(&b)));
    let mut picked: Vec<usize> = order.into_iter().take(k).collect();
    picked.sort_unstable();
    picked
}

/// Where one scalar of the restricted score vector comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScoreSource {
    /// Gate score of a routed expert.
    Gate(usize),
    /// Learned prior of the conditional expert.
    ConditionalPrior(usize),
    /// Learned fallback prior of a routed expert.
    FallbackPrior(usize),
}

/// Plan for one token: the selected set plus where its scores live.
///
/// The entry order — conditional first when present, then routed
/// ascending — fixes the weight order of the resulting
/// [`RoutingDecision`].
#[derive(Clone, Debug, PartialEq)]
pub struct TokenPlan {
    pub conditional_idx: Option<usize>,
    pub routed_set: Vec<usize>,
    pub score_sources: Vec<ScoreSource>,
    /// Constant weights instead of a score softmax (uniform fallback).
    pub fixed_weights: Option<Vec<f64>>,
    pub fallback: bool,
    /// Tape node holding this token's raw gate score row, once bound.
    pub gate_row: Option<VarId>,
}

impl TokenPlan {
    /// Normal covariate-guided plan from raw gate scores.
    ///
    /// The selected set is `{conditional} + TopK(scores, k)`, deduplicated;
    /// the conditional expert scores through its learned prior since the
    /// gate only scores the routed bank. (Banks are disjoint here, so the
    /// dedup guard never fires, but the set construction stays honest.)
    pub fn learned(scores: &[f64], conditional_idx: Option<usize>, k: usize) -> TokenPlan {
        let routed_set = select_topk(scores, k);
        let mut sources = Vec::with_capacity(routed_set.len() + 1);
        if let Some(c) = conditional_idx {
            sources.push(ScoreSource::ConditionalPrior(c));
        }
        sources.extend(routed_set.iter().map(|&e| ScoreSource::Gate(e)));
        TokenPlan {
            conditional_idx,
            routed_set,
            score_sources: sources,
            fixed_weights: None,
            fallback: false,
            gate_row: None,
        }
    }

    /// Fallback plan for a token whose covariates are absent or invalid.
    pub fn fallback(cfg: &MoEConfig, fallback_priors: &[f64]) -> TokenPlan {
        match cfg.fallback {
            FallbackMode::Uniform => {
                let routed_set: Vec<usize> = (0..cfg.top_k).collect();
                let w = 1.0 / cfg.top_k as f64;
                TokenPlan {
                    conditional_idx: None,
                    score_sources: Vec::new(),
                    fixed_weights: Some(vec![w; routed_set.len()]),
                    routed_set,
                    fallback: true,
                    gate_row: None,
                }
            }
            FallbackMode::LearnedPrior => {
                let routed_set = select_topk(fallback_priors, cfg.top_k);
                let sources = routed_set
                    .iter()
                    .map(|&e| ScoreSource::FallbackPrior(e))
                    .collect();
                TokenPlan {
                    conditional_idx: None,
                    routed_set,
                    score_sources: sources,
                    fixed_weights: None,
                    fallback: true,
                    gate_row: None,
                }
            }
        }
    }

    /// Plan with both indices and weights pinned by the caller
    /// (covariate-fixed and random gating strategies).
    pub fn fixed(decision: &RoutingDecision) -> TokenPlan {
        TokenPlan {
            conditional_idx: decision.conditional_idx,
            routed_set: decision.routed_set.clone(),
            score_sources: Vec::new(),
            fixed_weights: Some(decision.weights.clone()),
            fallback: decision.fallback_used,
            gate_row: None,
        }
    }

    pub fn selected_len(&self) -> usize {
        self.routed_set.len() + usize::from(self.conditional_idx.is_some())
    }

    pub fn count_into(&self, cfg: &MoEConfig, counters: &mut EvalCounters) {
        counters.tokens += 1;
        counters.shared_evals += cfg.shared;
        counters.conditional_evals += usize::from(self.conditional_idx.is_some());
        counters.routed_evals += self.routed_set.len();
        counters.fallback_tokens += usize::from(self.fallback);
    }
}

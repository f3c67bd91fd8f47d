//! Tape-recorded forward pass of the sparse layer.
//!
//! Selection happens on plain score values; only the selected experts are
//! ever bound onto the tape, so unselected routed experts are neither
//! evaluated nor reachable by the backward pass — their gradients are
//! exactly zero by construction.

use super::routing::{ScoreSource, TokenPlan};
use super::{EvalCounters, FallbackMode, MoEConfig, RoutingDecision};
use crate::error::{Error, Result};
use crate::numkit::{mlp_forward, GradTape, Matrix, VarId};

/// Effective expert weights bound onto a tape (low-rank deltas already
/// composed onto frozen bases where applicable).
#[derive(Clone, Copy, Debug)]
pub struct BoundExpert {
    pub w1: VarId,
    pub b1: VarId,
    pub w2: VarId,
    pub b2: VarId,
}

/// Lazily binds model parameters onto a tape.
///
/// Implementations cache per tape: binding the same parameter twice must
/// return the same `VarId` so gradients from every use accumulate on one
/// leaf. Trainability (scope rules, freezes) is the implementor's business.
pub trait ParamBind {
    fn bind_expert(
        &mut self,
        tape: &mut GradTape,
        bank: super::ExpertBank,
        idx: usize,
    ) -> Result<BoundExpert>;
    /// Gate weight and bias.
    fn bind_gate(&mut self, tape: &mut GradTape) -> Result<(VarId, VarId)>;
    /// 1x1 leaf for a conditional expert's prior.
    fn bind_cond_prior(&mut self, tape: &mut GradTape, idx: usize) -> Result<VarId>;
    /// 1x1 leaf for a routed expert's fallback prior.
    fn bind_fallback_prior(&mut self, tape: &mut GradTape, idx: usize) -> Result<VarId>;
    /// Current fallback prior values (for planning the fallback top-k).
    fn fallback_prior_values(&self) -> Vec<f64>;
}

/// Routing behaviour for one window.
#[derive(Clone, Copy, Debug)]
pub enum RoutingMode<'a> {
    /// Live top-k over gate scores (with per-token fallback).
    Learned,
    /// Selected sets pinned to earlier decisions; weights still flow from
    /// the live scores. Used to freeze routing for finite-difference checks.
    ForcedIndices(&'a [RoutingDecision]),
    /// Indices and weights both pinned; the gate is never evaluated.
    Fixed(&'a [RoutingDecision]),
}

/// Static routing inputs for one window.
#[derive(Clone, Copy, Debug)]
pub struct WindowContext<'a> {
    /// Conditional expert resolved from the static covariate; `None` when
    /// the config has no conditional bank.
    pub conditional: Option<usize>,
    /// Per-token covariate usability; an unusable token routes by fallback.
    pub cov_valid: &'a [bool],
    /// Covariate selection failed at window level: fall back everywhere.
    pub force_fallback: bool,
}

/// Run the sparse layer over one window's tokens.
///
/// Per token the output is
/// `h_t + (1/S) * sum_shared E_j(h_t) + sum_selected w_e * E_e(h_t)`,
/// where the mixing weights are a softmax over the raw scores restricted
/// to the selected set. Returns the stacked L x h output, one decision per
/// token, and evaluation counters.
pub fn route_window(
    tape: &mut GradTape,
    binder: &mut dyn ParamBind,
    cfg: &MoEConfig,
    tokens: VarId,
    cov_embeds: VarId,
    ctx: &WindowContext,
    mode: RoutingMode,
) -> Result<(VarId, Vec<RoutingDecision>, EvalCounters)> {
    let l = tape.value(tokens).rows();
    if tape.value(cov_embeds).rows() != l || ctx.cov_valid.len() != l {
        return Err(Error::shape(
            "route_window",
            "token, covariate, and validity lengths disagree",
        ));
    }
    if let RoutingMode::ForcedIndices(ds) | RoutingMode::Fixed(ds) = mode {
        if ds.len() != l {
            return Err(Error::shape("route_window", "decision count != token count"));
        }
    }

    let mut counters = EvalCounters::default();
    let mut decisions = Vec::with_capacity(l);
    let mut out_rows = Vec::with_capacity(l);

    for t in 0..l {
        let token_row = tape.slice_row(tokens, t)?;

        let plan = match mode {
            RoutingMode::Learned => {
                if ctx.force_fallback || !ctx.cov_valid[t] {
                    TokenPlan::fallback(cfg, &binder.fallback_prior_values())
                } else {
                    let scores = gate_score_row(tape, binder, cfg, cov_embeds, token_row, t)?;
                    let values = tape.value(scores).as_slice().to_vec();
                    let mut plan = TokenPlan::learned(&values, ctx.conditional, cfg.top_k);
                    plan_attach_gate(&mut plan, scores);
                    plan
                }
            }
            RoutingMode::ForcedIndices(ds) => {
                let mut plan = forced_plan(cfg, &ds[t]);
                if plan
                    .score_sources
                    .iter()
                    .any(|s| matches!(s, ScoreSource::Gate(_)))
                {
                    let scores = gate_score_row(tape, binder, cfg, cov_embeds, token_row, t)?;
                    plan_attach_gate(&mut plan, scores);
                }
                plan
            }
            RoutingMode::Fixed(ds) => TokenPlan::fixed(&ds[t]),
        };

        // Mixing weights: softmax over the restricted score picks, or the
        // plan's fixed constants.
        let weights_var = match (&plan.fixed_weights, plan.gate_row) {
            (Some(w), _) => tape.constant(Matrix::row_vector(w.clone())),
            (None, gate_row) => {
                let mut picks = Vec::with_capacity(plan.score_sources.len());
                for src in &plan.score_sources {
                    match *src {
                        ScoreSource::Gate(e) => {
                            picks.push((gate_row.expect("gate row bound"), e));
                        }
                        ScoreSource::ConditionalPrior(c) => {
                            picks.push((binder.bind_cond_prior(tape, c)?, 0));
                        }
                        ScoreSource::FallbackPrior(e) => {
                            picks.push((binder.bind_fallback_prior(tape, e)?, 0));
                        }
                    }
                }
                let raw = tape.gather_scalars(&picks)?;
                tape.softmax_row(raw)?
            }
        };

        // Selected expert outputs, conditional first, routed ascending.
        let mut items = Vec::with_capacity(plan.selected_len());
        if let Some(c) = plan.conditional_idx {
            let e = binder.bind_expert(tape, super::ExpertBank::Conditional, c)?;
            items.push(mlp_forward(tape, token_row, e.w1, e.b1, e.w2, e.b2)?);
        }
        for &r in &plan.routed_set {
            let e = binder.bind_expert(tape, super::ExpertBank::Routed, r)?;
            items.push(mlp_forward(tape, token_row, e.w1, e.b1, e.w2, e.b2)?);
        }
        let mix = tape.weighted_sum(weights_var, &items)?;

        // Residual plus shared-bank average.
        let mut acc = tape.add(token_row, mix)?;
        if cfg.shared > 0 {
            let mut shared_sum = None;
            for j in 0..cfg.shared {
                let e = binder.bind_expert(tape, super::ExpertBank::Shared, j)?;
                let y = mlp_forward(tape, token_row, e.w1, e.b1, e.w2, e.b2)?;
                shared_sum = Some(match shared_sum {
                    None => y,
                    Some(prev) => tape.add(prev, y)?,
                });
            }
            let avg = tape.scale(shared_sum.expect("shared > 0"), 1.0 / cfg.shared as f64);
            acc = tape.add(acc, avg)?;
        }

        plan.count_into(cfg, &mut counters);
        decisions.push(RoutingDecision {
            token_idx: t,
            conditional_idx: plan.conditional_idx,
            routed_set: plan.routed_set.clone(),
            weights: tape.value(weights_var).as_slice().to_vec(),
            fallback_used: plan.fallback,
        });
        out_rows.push(acc);
    }

    let out = tape.stack_rows(&out_rows)?;
    Ok((out, decisions, counters))
}

/// Raw gate scores for token `t`: `[cov_embed_t (; token_t)] W_g + b_g`.
fn gate_score_row(
    tape: &mut GradTape,
    binder: &mut dyn ParamBind,
    cfg: &MoEConfig,
    cov_embeds: VarId,
    token_row: VarId,
    t: usize,
) -> Result<VarId> {
    let (w_g, b_g) = binder.bind_gate(tape)?;
    let cov_row = tape.slice_row(cov_embeds, t)?;
    let input = match cfg.gate_input {
        super::GateInputMode::CovariateOnly => cov_row,
        super::GateInputMode::CovariatePlusToken => tape.concat_cols(cov_row, token_row)?,
    };
    let z = tape.matmul(input, w_g)?;
    tape.add_row_broadcast(z, b_g)
}

/// Rebuild a plan whose selected indices are pinned to `decision` but whose
/// weights recompute from live scores.
fn forced_plan(cfg: &MoEConfig, decision: &RoutingDecision) -> TokenPlan {
    if decision.fallback_used {
        match cfg.fallback {
            FallbackMode::Uniform => TokenPlan {
                conditional_idx: None,
                fixed_weights: Some(decision.weights.clone()),
                routed_set: decision.routed_set.clone(),
                score_sources: Vec::new(),
                fallback: true,
                gate_row: None,
            },
            FallbackMode::LearnedPrior => TokenPlan {
                conditional_idx: None,
                score_sources: decision
                    .routed_set
                    .iter()
                    .map(|&e| ScoreSource::FallbackPrior(e))
                    .collect(),
                routed_set: decision.routed_set.clone(),
                fixed_weights: None,
                fallback: true,
                gate_row: None,
            },
        }
    } else {
        let mut sources = Vec::with_capacity(decision.routed_set.len() + 1);
        if let Some(c) = decision.conditional_idx {
            sources.push(ScoreSource::ConditionalPrior(c));
        }
        sources.extend(decision.routed_set.iter().map(|&e| ScoreSource::Gate(e)));
        TokenPlan {
            conditional_idx: decision.conditional_idx,
            routed_set: decision.routed_set.clone(),
            score_sources: sources,
            fixed_weights: None,
            fallback: false,
            gate_row: None,
        }
    }
}

fn plan_attach_gate(plan: &mut TokenPlan, gate_row: VarId) {
    plan.gate_row = Some(gate_row);
}

#[cfg(test)]
mod tests {
    use super::super::{ExpertBank, ExpertParams, GateInputMode, GateParams};
    use super::*;
    use crate::numkit::{mlp_forward_plain, Rng};
    use std::collections::HashMap;

    /// Minimal all-trainable binder over a standalone layer, for tests.
    struct TestBinder {
        shared: Vec<ExpertParams>,
        conditional: Vec<ExpertParams>,
        routed: Vec<ExpertParams>,
        gate: GateParams,
        cond_priors: Vec<f64>,
        fallback_priors: Vec<f64>,
        cache: HashMap<(u8, usize, u8), VarId>,
        gate_cache: Option<(VarId, VarId)>,
    }

    impl TestBinder {
        fn new(cfg: &MoEConfig, cov_embed_dim: usize, seed: u64) -> Self {
            let mut rng = Rng::new(seed);
            let bank = |bank, n: usize, rng: &mut Rng| {
                (0..n)
                    .map(|i| ExpertParams::init(i as u32, bank, cfg.token_dim, cfg.ff_dim, rng))
                    .collect::<Vec<_>>()
            };
            TestBinder {
                shared: bank(ExpertBank::Shared, cfg.shared, &mut rng),
                conditional: bank(ExpertBank::Conditional, cfg.conditional, &mut rng),
                routed: bank(ExpertBank::Routed, cfg.routed, &mut rng),
                gate: GateParams::init(
                    cfg.gate_input,
                    cov_embed_dim,
                    cfg.token_dim,
                    cfg.routed,
                    &mut rng,
                ),
                cond_priors: vec![0.0; cfg.conditional],
                fallback_priors: vec![0.0; cfg.routed],
                cache: HashMap::new(),
                gate_cache: None,
            }
        }

        fn expert(&self, bank: ExpertBank, idx: usize) -> &ExpertParams {
            match bank {
                ExpertBank::Shared => &self.shared[idx],
                ExpertBank::Conditional => &self.conditional[idx],
                ExpertBank::Routed => &self.routed[idx],
            }
        }
    }

    impl ParamBind for TestBinder {
        fn bind_expert(
            &mut self,
            tape: &mut GradTape,
            bank: ExpertBank,
            idx: usize,
        ) -> Result<BoundExpert> {
            let e = self.expert(bank, idx).clone();
            let mut leaf = |tensor: u8, m: Matrix, tape: &mut GradTape| {
                *self
                    .cache
                    .entry((bank.code(), idx, tensor))
                    .or_insert_with(|| tape.leaf(m))
            };
            Ok(BoundExpert {
                w1: leaf(0, e.w1.clone(), tape),
                b1: leaf(1, e.b1.clone(), tape),
                w2: leaf(2, e.w2.clone(), tape),
                b2: leaf(3, e.b2.clone(), tape),
            })
        }

        fn bind_gate(&mut self, tape: &mut GradTape) -> Result<(VarId, VarId)> {
            if self.gate_cache.is_none() {
                let w = tape.leaf(self.gate.w_g.clone());
                let b = tape.leaf(self.gate.b_g.clone());
                self.gate_cache = Some((w, b));
            }
            Ok(self.gate_cache.unwrap())
        }

        fn bind_cond_prior(&mut self, tape: &mut GradTape, idx: usize) -> Result<VarId> {
            let v = self.cond_priors[idx];
            Ok(*self
                .cache
                .entry((10, idx, 0))
                .or_insert_with(|| tape.leaf(Matrix::scalar(v))))
        }

        fn bind_fallback_prior(&mut self, tape: &mut GradTape, idx: usize) -> Result<VarId> {
            let v = self.fallback_priors[idx];
            Ok(*self
                .cache
                .entry((11, idx, 0))
                .or_insert_with(|| tape.leaf(Matrix::scalar(v))))
        }

        fn fallback_prior_values(&self) -> Vec<f64> {
            self.fallback_priors.clone()
        }
    }

    fn small_cfg() -> MoEConfig {
        MoEConfig {
            shared: 1,
            conditional: 2,
            routed: 4,
            top_k: 2,
            token_dim: 3,
            ff_dim: 4,
            lowrank: None,
            fallback: FallbackMode::Uniform,
            gate_input: GateInputMode::CovariateOnly,
        }
    }

    fn run_learned(
        cfg: &MoEConfig,
        binder: &mut TestBinder,
        tokens: Matrix,
        covs: Matrix,
        conditional: Option<usize>,
    ) -> (Matrix, Vec<RoutingDecision>, EvalCounters) {
        // Bindings are per tape.
        binder.cache.clear();
        binder.gate_cache = None;
        let mut tape = GradTape::new();
        let tok = tape.constant(tokens);
        let cov = tape.constant(covs);
        let valid = vec![true; tape.value(tok).rows()];
        let ctx = WindowContext {
            conditional,
            cov_valid: &valid,
            force_fallback: false,
        };
        let (out, ds, counters) =
            route_window(&mut tape, binder, cfg, tok, cov, &ctx, RoutingMode::Learned).unwrap();
        (tape.value(out).clone(), ds, counters)
    }

    #[test]
    fn singleton_routed_expert_gets_weight_one() {
        // S=0, C=0, M=1, k=1: out = h_t + E_0(h_t), weight exactly 1.
        let cfg = MoEConfig {
            shared: 0,
            conditional: 0,
            routed: 1,
            top_k: 1,
            ..small_cfg()
        };
        let mut binder = TestBinder::new(&cfg, 2, 3);
        let tokens = Rng::new(4).uniform_matrix(2, 3, -1.0, 1.0);
        let covs = Rng::new(5).uniform_matrix(2, 2, -1.0, 1.0);
        let (out, ds, _) = run_learned(&cfg, &mut binder, tokens.clone(), covs, None);
        assert_eq!(ds[0].weights, vec![1.0]);
        let e = &binder.routed[0];
        for t in 0..2 {
            let row = tokens.row_matrix(t);
            let want = row
                .add(&mlp_forward_plain(&row, &e.w1, &e.b1, &e.w2, &e.b2).unwrap())
                .unwrap();
            for (a, b) in out.row(t).iter().zip(want.as_slice()) {
                assert!((a - b).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn zero_experts_leave_residual_only() {
        let cfg = small_cfg();
        let mut binder = TestBinder::new(&cfg, 2, 3);
        for e in binder
            .shared
            .iter_mut()
            .chain(binder.conditional.iter_mut())
            .chain(binder.routed.iter_mut())
        {
            e.w1 = Matrix::zeros(3, 4);
            e.b1 = Matrix::zeros(1, 4);
            e.w2 = Matrix::zeros(4, 3);
            e.b2 = Matrix::zeros(1, 3);
        }
        let tokens = Rng::new(4).uniform_matrix(3, 3, -1.0, 1.0);
        let covs = Rng::new(5).uniform_matrix(3, 2, -1.0, 1.0);
        let (out, _, _) = run_learned(&cfg, &mut binder, tokens.clone(), covs, Some(0));
        assert_eq!(out, tokens);
    }

    #[test]
    fn restricted_softmax_matches_paper_example() {
        // Gate scores pinned to [2,1,0,-1] via zero weights and bias = s;
        // conditional prior 0. Weight over {c} u {0,1} is
        // softmax([0,2,1]) in conditional-first order.
        let cfg = MoEConfig {
            shared: 0,
            ..small_cfg()
        };
        let mut binder = TestBinder::new(&cfg, 2, 3);
        binder.gate.w_g = Matrix::zeros(2, 4);
        binder.gate.b_g = Matrix::row_vector(vec![2.0, 1.0, 0.0, -1.0]);
        let tokens = Rng::new(4).uniform_matrix(1, 3, -1.0, 1.0);
        let covs = Rng::new(5).uniform_matrix(1, 2, -1.0, 1.0);
        let (_, ds, _) = run_learned(&cfg, &mut binder, tokens, covs, Some(1));
        let d = &ds[0];
        assert_eq!(d.conditional_idx, Some(1));
        assert_eq!(d.routed_set, vec![0, 1]);
        let w = &d.weights;
        assert!((w[0] - 0.0900).abs() < 5e-5); // prior 0
        assert!((w[1] - 0.6652).abs() < 5e-5); // score 2
        assert!((w[2] - 0.2447).abs() < 5e-5); // score 1
        let sum: f64 = w.iter().sum();
        assert!((sum - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn sparse_forward_matches_dense_masked_oracle() {
        let cfg = small_cfg();
        for seed in 0..10u64 {
            let mut binder = TestBinder::new(&cfg, 2, seed);
            let tokens = Rng::new(100 + seed).uniform_matrix(4, 3, -1.0, 1.0);
            let covs = Rng::new(200 + seed).uniform_matrix(4, 2, -1.0, 1.0);
            let (out, ds, counters) =
                run_learned(&cfg, &mut binder, tokens.clone(), covs, Some(1));

            // Sparsity: exactly S + 1 + k evaluations per token.
            assert_eq!(counters.shared_evals, 4 * cfg.shared);
            assert_eq!(counters.conditional_evals, 4);
            assert_eq!(counters.routed_evals, 4 * cfg.top_k);

            // Dense oracle: evaluate every expert, mask unselected weights.
            for (t, d) in ds.iter().enumerate() {
                let row = tokens.row_matrix(t);
                let mut want = row.clone();
                let s = &binder.shared[0];
                let shared_out = mlp_forward_plain(&row, &s.w1, &s.b1, &s.w2, &s.b2).unwrap();
                want = want.add(&shared_out.scale(1.0 / cfg.shared as f64)).unwrap();
                // Dense pass over conditional + routed banks with masked weights.
                for (bank, n) in [(ExpertBank::Conditional, cfg.conditional), (ExpertBank::Routed, cfg.routed)] {
                    for idx in 0..n {
                        let w = match bank {
                            ExpertBank::Conditional => {
                                if d.conditional_idx == Some(idx) {
                                    d.weights[0]
                                } else {
                                    0.0
                                }
                            }
                            _ => match d.routed_set.iter().position(|&e| e == idx) {
                                Some(pos) => {
                                    d.weights[pos + usize::from(d.conditional_idx.is_some())]
                                }
                                None => 0.0,
                            },
                        };
                        if w != 0.0 {
                            let e = binder.expert(bank, idx);
                            let y = mlp_forward_plain(&row, &e.w1, &e.b1, &e.w2, &e.b2).unwrap();
                            want = want.add(&y.scale(w)).unwrap();
                        }
                    }
                }
                for (a, b) in out.row(t).iter().zip(want.as_slice()) {
                    assert!((a - b).abs() < 1e-12, "seed {seed} token {t}");
                }
            }
        }
    }

    #[test]
    fn invalid_covariates_fall_back_uniformly() {
        let cfg = small_cfg();
        let mut binder = TestBinder::new(&cfg, 2, 8);
        let tokens = Rng::new(4).uniform_matrix(2, 3, -1.0, 1.0);
        // Covariates are pre-sanitized upstream; validity arrives as flags.
        let covs = Matrix::zeros(2, 2);
        let mut tape = GradTape::new();
        let tok = tape.constant(tokens);
        let cov = tape.constant(covs);
        let ctx = WindowContext {
            conditional: Some(0),
            cov_valid: &[true, false],
            force_fallback: false,
        };
        let (out, ds, counters) = route_window(
            &mut tape,
            &mut binder,
            &cfg,
            tok,
            cov,
            &ctx,
            RoutingMode::Learned,
        )
        .unwrap();
        assert!(!ds[0].fallback_used);
        assert!(ds[1].fallback_used);
        assert_eq!(ds[1].conditional_idx, None);
        assert_eq!(ds[1].routed_set, vec![0, 1]);
        assert_eq!(ds[1].weights, vec![0.5, 0.5]);
        assert_eq!(counters.fallback_tokens, 1);
        assert!(tape.value(out).all_finite());
    }

    #[test]
    fn learned_prior_fallback_reduces_to_normal_routing_when_priors_match() {
        // With fallback priors equal to the would-be gate scores and no
        // conditional expert, fallback decisions equal normal ones.
        let cfg = MoEConfig {
            shared: 0,
            conditional: 0,
            fallback: FallbackMode::LearnedPrior,
            ..small_cfg()
        };
        let mut binder = TestBinder::new(&cfg, 2, 9);
        binder.gate.w_g = Matrix::zeros(2, 4);
        binder.gate.b_g = Matrix::row_vector(vec![0.3, -0.2, 0.9, 0.1]);
        binder.fallback_priors = vec![0.3, -0.2, 0.9, 0.1];

        let tokens = Rng::new(4).uniform_matrix(2, 3, -1.0, 1.0);
        let covs = Matrix::zeros(2, 2);

        let (out_a, ds_a, _) =
            run_learned(&cfg, &mut binder, tokens.clone(), covs.clone(), None);

        binder.cache.clear();
        binder.gate_cache = None;
        let mut tape = GradTape::new();
        let tok = tape.constant(tokens);
        let cov = tape.constant(covs);
        let ctx = WindowContext {
            conditional: None,
            cov_valid: &[false, false],
            force_fallback: false,
        };
        let (out_b, ds_b, _) = route_window(
            &mut tape,
            &mut binder,
            &cfg,
            tok,
            cov,
            &ctx,
            RoutingMode::Learned,
        )
        .unwrap();

        for (a, b) in ds_a.iter().zip(&ds_b) {
            assert_eq!(a.routed_set, b.routed_set);
            assert_eq!(a.weights, b.weights);
            assert!(b.fallback_used && !a.fallback_used);
        }
        assert_eq!(out_a, tape.value(out_b).clone());
    }

    #[test]
    fn unselected_experts_get_bitwise_zero_gradients() {
        let cfg = MoEConfig {
            shared: 0,
            conditional: 0,
            ..small_cfg()
        };
        let mut binder = TestBinder::new(&cfg, 2, 12);
        binder.gate.w_g = Matrix::zeros(2, 4);
        binder.gate.b_g = Matrix::row_vector(vec![5.0, 4.0, 0.0, -1.0]);
        let tokens = Rng::new(4).uniform_matrix(2, 3, -1.0, 1.0);
        let covs = Rng::new(5).uniform_matrix(2, 2, -1.0, 1.0);

        let mut tape = GradTape::new();
        let tok = tape.constant(tokens);
        let cov = tape.constant(covs);
        let valid = vec![true, true];
        let ctx = WindowContext {
            conditional: None,
            cov_valid: &valid,
            force_fallback: false,
        };
        let (out, ds, _) = route_window(
            &mut tape,
            &mut binder,
            &cfg,
            tok,
            cov,
            &ctx,
            RoutingMode::Learned,
        )
        .unwrap();
        for d in &ds {
            assert_eq!(d.routed_set, vec![0, 1]);
        }
        let pooled = tape.mean_rows(out);
        let loss = tape.pinball(pooled, &[1.0, 1.0, 1.0], &[0.5]).unwrap();
        tape.backward(loss).unwrap();

        // Experts 2 and 3 were never selected: not even bound on the tape.
        assert!(binder.cache.contains_key(&(ExpertBank::Routed.code(), 0, 0)));
        assert!(!binder.cache.contains_key(&(ExpertBank::Routed.code(), 2, 0)));
        assert!(!binder.cache.contains_key(&(ExpertBank::Routed.code(), 3, 0)));
        // Selected experts do receive gradient.
        let w1_var = binder.cache[&(ExpertBank::Routed.code(), 0, 0)];
        assert!(tape.grad(w1_var).as_slice().iter().any(|v| *v != 0.0));
    }

    #[test]
    fn shift_of_all_gate_scores_leaves_decisions_bitwise_unchanged() {
        // Grid-quantized scores keep the shifted subtraction exact, so the
        // softmax weights and top-k set match bit for bit.
        let mut rng = Rng::new(1234);
        let q = |x: i64| x as f64 / (1u64 << 20) as f64;
        for _ in 0..200 {
            let m = 2 + rng.uniform_usize(6);
            let k = 1 + rng.uniform_usize(m);
            let scores: Vec<f64> = (0..m)
                .map(|_| q(rng.uniform_usize(1 << 22) as i64 - (1 << 21)))
                .collect();
            let c = q(rng.uniform_usize(1 << 22) as i64 - (1 << 21));
            let shifted: Vec<f64> = scores.iter().map(|s| s + c).collect();

            let plan_a = TokenPlan::learned(&scores, None, k);
            let plan_b = TokenPlan::learned(&shifted, None, k);
            assert_eq!(plan_a.routed_set, plan_b.routed_set);

            let picked_a: Vec<f64> = plan_a.routed_set.iter().map(|&e| scores[e]).collect();
            let picked_b: Vec<f64> = plan_b.routed_set.iter().map(|&e| shifted[e]).collect();
            let wa = crate::numkit::softmax(&picked_a).unwrap();
            let wb = crate::numkit::softmax(&picked_b).unwrap();
            assert_eq!(wa, wb);
        }
    }
}

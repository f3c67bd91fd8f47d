//! Full forecasting model: tokenizer, sparse layer, frozen backbone, plus
//! the parameter registry that training, checkpointing, and the federated
//! simulator all share.
//!
//! One [`GradTape`] spans one batch. Parameters bind onto the tape lazily
//! through [`TapeBinder`]: an expert that no token selects is never bound,
//! so it is never evaluated and its gradient is exactly zero. Trainability
//! follows the [`TrainScope`] plus two hard freezes — the backbone always,
//! expert base weights whenever low-rank factors are present.

use crate::backbone::{backbone_forward, BackboneParams, QuantileForecast};
use crate::error::{Error, Result};
use crate::numkit::{GradTape, Matrix, VarId};
use crate::smoe::{
    cov_select, route_window, BoundExpert, CovSmoeLayer, EvalCounters, ExpertBank, ParamBind,
    RoutingDecision, RoutingMode, StaticCovariate,
};
use crate::tokenizer::{embed_covariates, tokenize, TokenizerParams};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Which parameter groups train.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainScope {
    /// Gate and routing priors only; every expert stays frozen.
    GateOnly,
    /// Gate, priors, and experts (their adapter factors when low-rank is
    /// attached, the base weights otherwise).
    MoeOnly,
    /// `MoeOnly` plus the tokenizer.
    MoeTokenizer,
}

/// One expert tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TensorKind {
    W1,
    B1,
    W2,
    B2,
    LoraA1,
    LoraB1,
    LoraA2,
    LoraB2,
}

/// Stable identity of one trainable tensor across the whole model.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamKey {
    TokenizerWIn,
    TokenizerBIn,
    TokenizerWCov,
    TokenizerBCov,
    GateW,
    GateB,
    CondPrior(usize),
    FallbackPrior(usize),
    Expert(ExpertBank, usize, TensorKind),
}

/// One supervised example in model-ready form. Covariates arrive
/// sanitized: non-finite entries replaced by zero with the corresponding
/// validity flag cleared.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelInput {
    pub context: Matrix,     // T_c x d
    pub context_cov: Matrix, // T_c x p
    pub cov_valid: Vec<bool>,
    pub static_cov: Option<StaticCovariate>,
    pub target: Vec<f64>, // H
}

/// Routing control for a whole batch.
#[derive(Clone, Copy, Debug)]
pub enum BatchRouting<'a> {
    /// Live gate scoring with per-token fallback.
    Learned,
    /// Selected sets pinned per window, weights recomputed from live scores.
    ForcedIndices(&'a [Vec<RoutingDecision>]),
    /// Indices and weights pinned per window (covariate-fixed / random).
    Fixed(&'a [Vec<RoutingDecision>]),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelBundle {
    pub tokenizer: TokenizerParams,
    pub layer: CovSmoeLayer,
    pub backbone: BackboneParams,
}

impl ModelBundle {
    /// All dims must chain: tokenizer h == layer h == backbone h.
    pub fn validate(&self) -> Result<()> {
        self.layer.cfg.validate()?;
        if self.tokenizer.token_dim() != self.layer.cfg.token_dim
            || self.backbone.token_dim() != self.layer.cfg.token_dim
        {
            return Err(Error::Config("token width mismatch across components".into()));
        }
        Ok(())
    }

    pub fn horizon(&self) -> usize {
        self.backbone.horizon
    }

    pub fn quantile_levels(&self) -> &[f64] {
        &self.backbone.levels
    }

    /// Read one parameter tensor (scalars as 1x1).
    pub fn param(&self, key: &ParamKey) -> Matrix {
        match key {
            ParamKey::TokenizerWIn => self.tokenizer.w_in.clone(),
            ParamKey::TokenizerBIn => self.tokenizer.b_in.clone(),
            ParamKey::TokenizerWCov => self.tokenizer.w_cov.clone(),
            ParamKey::TokenizerBCov => self.tokenizer.b_cov.clone(),
            ParamKey::GateW => self.layer.gate.w_g.clone(),
            ParamKey::GateB => self.layer.gate.b_g.clone(),
            ParamKey::CondPrior(i) => Matrix::scalar(self.layer.cond_priors[*i]),
            ParamKey::FallbackPrior(i) => Matrix::scalar(self.layer.fallback_priors[*i]),
            ParamKey::Expert(bank, idx, kind) => {
                let e = self.layer.expert(*bank, *idx);
                match kind {
                    TensorKind::W1 => e.w1.clone(),
                    TensorKind::B1 => e.b1.clone(),
                    TensorKind::W2 => e.w2.clone(),
                    TensorKind::B2 => e.b2.clone(),
                    TensorKind::LoraA1 => e.lowrank.as_ref().unwrap().a1.clone(),
                    TensorKind::LoraB1 => e.lowrank.as_ref().unwrap().b1.clone(),
                    TensorKind::LoraA2 => e.lowrank.as_ref().unwrap().a2.clone(),
                    TensorKind::LoraB2 => e.lowrank.as_ref().unwrap().b2.clone(),
                }
            }
        }
    }

    /// Overwrite one parameter tensor.
    pub fn set_param(&mut self, key: &ParamKey, value: Matrix) {
        match key {
            ParamKey::TokenizerWIn => self.tokenizer.w_in = value,
            ParamKey::TokenizerBIn => self.tokenizer.b_in = value,
            ParamKey::TokenizerWCov => self.tokenizer.w_cov = value,
            ParamKey::TokenizerBCov => self.tokenizer.b_cov = value,
            ParamKey::GateW => self.layer.gate.w_g = value,
            ParamKey::GateB => self.layer.gate.b_g = value,
            ParamKey::CondPrior(i) => self.layer.cond_priors[*i] = value.scalar_value(),
            ParamKey::FallbackPrior(i) => self.layer.fallback_priors[*i] = value.scalar_value(),
            ParamKey::Expert(bank, idx, kind) => {
                let e = self.layer.expert_mut(*bank, *idx);
                match kind {
                    TensorKind::W1 => e.w1 = value,
                    TensorKind::B1 => e.b1 = value,
                    TensorKind::W2 => e.w2 = value,
                    TensorKind::B2 => e.b2 = value,
                    TensorKind::LoraA1 => e.lowrank.as_mut().unwrap().a1 = value,
                    TensorKind::LoraB1 => e.lowrank.as_mut().unwrap().b1 = value,
                    TensorKind::LoraA2 => e.lowrank.as_mut().unwrap().a2 = value,
                    TensorKind::LoraB2 => e.lowrank.as_mut().unwrap().b2 = value,
                }
            }
        }
    }

    /// Is this tensor trainable under the scope?
    pub fn is_trainable(&self, key: &ParamKey, scope: TrainScope) -> bool {
        match key {
            ParamKey::TokenizerWIn
            | ParamKey::TokenizerBIn
            | ParamKey::TokenizerWCov
            | ParamKey::TokenizerBCov => scope == TrainScope::MoeTokenizer,
            ParamKey::GateW | ParamKey::GateB => true,
            ParamKey::CondPrior(_) | ParamKey::FallbackPrior(_) => true,
            ParamKey::Expert(bank, idx, kind) => {
                if scope == TrainScope::GateOnly {
                    return false;
                }
                let has_lowrank = self.layer.expert(*bank, *idx).lowrank.is_some();
                match kind {
                    TensorKind::W1 | TensorKind::B1 | TensorKind::W2 | TensorKind::B2 => {
                        !has_lowrank
                    }
                    _ => has_lowrank,
                }
            }
        }
    }

    /// Every tensor trainable under `scope`, in a fixed order.
    pub fn trainable_keys(&self, scope: TrainScope) -> Vec<ParamKey> {
        let mut keys = Vec::new();
        if scope == TrainScope::MoeTokenizer {
            keys.extend([
                ParamKey::TokenizerWIn,
                ParamKey::TokenizerBIn,
                ParamKey::TokenizerWCov,
                ParamKey::TokenizerBCov,
            ]);
        }
        keys.push(ParamKey::GateW);
        keys.push(ParamKey::GateB);
        keys.extend((0..self.layer.cond_priors.len()).map(ParamKey::CondPrior));
        keys.extend((0..self.layer.fallback_priors.len()).map(ParamKey::FallbackPrior));
        if scope != TrainScope::GateOnly {
            for (bank, n) in [
                (ExpertBank::Shared, self.layer.shared.len()),
                (ExpertBank::Conditional, self.layer.conditional.len()),
                (ExpertBank::Routed, self.layer.routed.len()),
            ] {
                for idx in 0..n {
                    let kinds: &[TensorKind] =
                        if self.layer.expert(bank, idx).lowrank.is_some() {
                            &[
                                TensorKind::LoraA1,
                                TensorKind::LoraB1,
                                TensorKind::LoraA2,
                                TensorKind::LoraB2,
                            ]
                        } else {
                            &[TensorKind::W1, TensorKind::B1, TensorKind::W2, TensorKind::B2]
                        };
                    keys.extend(kinds.iter().map(|k| ParamKey::Expert(bank, idx, *k)));
                }
            }
        }
        keys
    }

    /// Resolve the conditional expert and window-level fallback for an input.
    fn resolve_conditional(&self, input: &ModelInput) -> (Option<usize>, bool) {
        if self.layer.cfg.conditional == 0 {
            return (None, false);
        }
        let rule = self.layer.rule.as_ref().expect("validated at init");
        match input.static_cov {
            Some(sc) => match cov_select(rule, sc) {
                Ok(c) => (Some(c), false),
                Err(_) => (None, true),
            },
            None => (None, true),
        }
    }

    /// Record one window onto the tape; returns the sorted head row.
    pub fn record_window(
        &self,
        tape: &mut GradTape,
        binder: &mut TapeBinder,
        input: &ModelInput,
        mode: RoutingMode,
    ) -> Result<(VarId, Vec<RoutingDecision>, EvalCounters)> {
        let ctx_var = tape.constant(input.context.clone());
        let cov_var = tape.constant(input.context_cov.clone());
        let (w_in, b_in, w_cov, b_cov) = binder.bind_tokenizer(tape, self)?;
        let tokens = tokenize(tape, ctx_var, w_in, b_in)?;
        let cov_embeds = embed_covariates(tape, cov_var, w_cov, b_cov)?;

        let (conditional, force_fallback) = self.resolve_conditional(input);
        let wctx = crate::smoe::WindowContext {
            conditional,
            cov_valid: &input.cov_valid,
            force_fallback,
        };
        let (out_tokens, decisions, counters) = {
            let mut shim = BinderShim { binder, model: self };
            route_window(
                tape,
                &mut shim,
                &self.layer.cfg,
                tokens,
                cov_embeds,
                &wctx,
                mode,
            )?
        };

        let (wp, wo, bo) = binder.bind_backbone(tape, self);
        let head = backbone_forward(tape, &self.backbone, out_tokens, wp, wo, bo)?;
        Ok((head, decisions, counters))
    }

    /// Record a whole batch and its mean pinball loss.
    pub fn record_batch(
        &self,
        inputs: &[ModelInput],
        scope: TrainScope,
        routing: BatchRouting,
    ) -> Result<BatchRecord> {
        if inputs.is_empty() {
            return Err(Error::Config("empty batch".into()));
        }
        let mut tape = GradTape::new();
        let mut binder = TapeBinder::new(scope);
        let mut losses = Vec::with_capacity(inputs.len());
        let mut decisions = Vec::with_capacity(inputs.len());
        let mut counters = EvalCounters::default();
        for (i, input) in inputs.iter().enumerate() {
            let mode = match routing {
                BatchRouting::Learned => RoutingMode::Learned,
                BatchRouting::ForcedIndices(ds) => RoutingMode::ForcedIndices(&ds[i]),
                BatchRouting::Fixed(ds) => RoutingMode::Fixed(&ds[i]),
            };
            let (head, ds, c) = self.record_window(&mut tape, &mut binder, input, mode)?;
            let loss = tape.pinball(head, &input.target, &self.backbone.levels)?;
            losses.push(loss);
            decisions.push(ds);
            counters.merge(&c);
        }
        let loss = tape.mean_scalars(&losses)?;
        Ok(BatchRecord {
            tape,
            loss,
            decisions,
            counters,
            bound: binder.into_bound(),
        })
    }

    /// Inference: forecast one window without touching any parameter.
    pub fn forecast(
        &self,
        input: &ModelInput,
        routing: BatchRouting,
    ) -> Result<(QuantileForecast, Vec<RoutingDecision>, EvalCounters)> {
        let mut tape = GradTape::new();
        let mut binder = TapeBinder::new(TrainScope::GateOnly);
        let mode = match routing {
            BatchRouting::Learned => RoutingMode::Learned,
            BatchRouting::ForcedIndices(ds) => RoutingMode::ForcedIndices(&ds[0]),
            BatchRouting::Fixed(ds) => RoutingMode::Fixed(&ds[0]),
        };
        let (head, decisions, counters) = self.record_window(&mut tape, &mut binder, input, mode)?;
        let forecast = QuantileForecast::from_head_row(
            tape.value(head),
            self.backbone.horizon,
            &self.backbone.levels,
        )?;
        Ok((forecast, decisions, counters))
    }
}

/// Output of [`ModelBundle::record_batch`], ready for backward.
pub struct BatchRecord {
    pub tape: GradTape,
    pub loss: VarId,
    pub decisions: Vec<Vec<RoutingDecision>>,
    pub counters: EvalCounters,
    bound: BTreeMap<ParamKey, (VarId, bool)>,
}

impl BatchRecord {
    pub fn loss_value(&self) -> f64 {
        self.tape.value(self.loss).scalar_value()
    }

    /// Run backward and collect gradients for every *touched, trainable*
    /// parameter. Parameters absent from the map were never on the tape:
    /// their gradient is exactly zero and they must not be updated.
    pub fn backward(mut self) -> Result<(BTreeMap<ParamKey, Matrix>, f64, Vec<Vec<RoutingDecision>>)> {
        self.tape.backward(self.loss)?;
        let loss = self.loss_value();
        let mut grads = BTreeMap::new();
        for (key, (var, trainable)) in &self.bound {
            if *trainable {
                grads.insert(key.clone(), self.tape.grad(*var));
            }
        }
        Ok((grads, loss, self.decisions))
    }

    /// Keys bound on this tape (selected / evaluated this batch).
    pub fn touched(&self) -> impl Iterator<Item = &ParamKey> {
        self.bound.keys()
    }
}

/// Lazily binds model parameters onto one tape, caching by [`ParamKey`].
pub struct TapeBinder {
    scope: TrainScope,
    bound: BTreeMap<ParamKey, (VarId, bool)>,
    experts: BTreeMap<(ExpertBank, usize), BoundExpert>,
    tokenizer: Option<(VarId, VarId, VarId, VarId)>,
    backbone: Option<(VarId, VarId, VarId)>,
    gate: Option<(VarId, VarId)>,
    fallback_values: Vec<f64>,
}

impl TapeBinder {
    pub fn new(scope: TrainScope) -> Self {
        TapeBinder {
            scope,
            bound: BTreeMap::new(),
            experts: BTreeMap::new(),
            tokenizer: None,
            backbone: None,
            gate: None,
            fallback_values: Vec::new(),
        }
    }

    fn bind(
        &mut self,
        tape: &mut GradTape,
        model: &ModelBundle,
        key: ParamKey,
    ) -> VarId {
        if let Some((var, _)) = self.bound.get(&key) {
            return *var;
        }
        let value = model.param(&key);
        let trainable = model.is_trainable(&key, self.scope);
        let var = if trainable {
            tape.leaf(value)
        } else {
            tape.constant(value)
        };
        self.bound.insert(key, (var, trainable));
        var
    }

    fn bind_tokenizer(
        &mut self,
        tape: &mut GradTape,
        model: &ModelBundle,
    ) -> Result<(VarId, VarId, VarId, VarId)> {
        if let Some(t) = self.tokenizer {
            return Ok(t);
        }
        let t = (
            self.bind(tape, model, ParamKey::TokenizerWIn),
            self.bind(tape, model, ParamKey::TokenizerBIn),
            self.bind(tape, model, ParamKey::TokenizerWCov),
            self.bind(tape, model, ParamKey::TokenizerBCov),
        );
        self.tokenizer = Some(t);
        Ok(t)
    }

    fn bind_backbone(&mut self, tape: &mut GradTape, model: &ModelBundle) -> (VarId, VarId, VarId) {
        if let Some(b) = self.backbone {
            return b;
        }
        // The backbone is frozen unconditionally.
        let b = (
            tape.constant(model.backbone.w_pool.clone()),
            tape.constant(model.backbone.w_out.clone()),
            tape.constant(model.backbone.b_out.clone()),
        );
        self.backbone = Some(b);
        b
    }

    fn into_bound(self) -> BTreeMap<ParamKey, (VarId, bool)> {
        self.bound
    }
}

/// Adapter giving the layer forward access to the binder plus the model.
struct BinderShim<'a, 'm> {
    binder: &'a mut TapeBinder,
    model: &'m ModelBundle,
}

impl ParamBind for BinderShim<'_, '_> {
    fn bind_expert(
        &mut self,
        tape: &mut GradTape,
        bank: ExpertBank,
        idx: usize,
    ) -> Result<BoundExpert> {
        if let Some(b) = self.binder.experts.get(&(bank, idx)) {
            return Ok(*b);
        }
        let e = self.model.layer.expert(bank, idx);
        let bound = if e.lowrank.is_some() {
            // Frozen base plus trainable delta: w_eff = w_base + a b.
            let w1b = self.binder.bind(tape, self.model, ParamKey::Expert(bank, idx, TensorKind::W1));
            let b1 = self.binder.bind(tape, self.model, ParamKey::Expert(bank, idx, TensorKind::B1));
            let w2b = self.binder.bind(tape, self.model, ParamKey::Expert(bank, idx, TensorKind::W2));
            let b2 = self.binder.bind(tape, self.model, ParamKey::Expert(bank, idx, TensorKind::B2));
            let a1 = self.binder.bind(tape, self.model, ParamKey::Expert(bank, idx, TensorKind::LoraA1));
            let lb1 = self.binder.bind(tape, self.model, ParamKey::Expert(bank, idx, TensorKind::LoraB1));
            let a2 = self.binder.bind(tape, self.model, ParamKey::Expert(bank, idx, TensorKind::LoraA2));
            let lb2 = self.binder.bind(tape, self.model, ParamKey::Expert(bank, idx, TensorKind::LoraB2));
            let d1 = tape.matmul(a1, lb1)?;
            let w1 = tape.add(w1b, d1)?;
            let d2 = tape.matmul(a2, lb2)?;
            let w2 = tape.add(w2b, d2)?;
            BoundExpert { w1, b1, w2, b2 }
        } else {
            BoundExpert {
                w1: self.binder.bind(tape, self.model, ParamKey::Expert(bank, idx, TensorKind::W1)),
                b1: self.binder.bind(tape, self.model, ParamKey::Expert(bank, idx, TensorKind::B1)),
                w2: self.binder.bind(tape, self.model, ParamKey::Expert(bank, idx, TensorKind::W2)),
                b2: self.binder.bind(tape, self.model, ParamKey::Expert(bank, idx, TensorKind::B2)),
            }
        };
        self.binder.experts.insert((bank, idx), bound);
        Ok(bound)
    }

    fn bind_gate(&mut self, tape: &mut GradTape) -> Result<(VarId, VarId)> {
        if let Some(g) = self.binder.gate {
            return Ok(g);
        }
        let g = (
            self.binder.bind(tape, self.model, ParamKey::GateW),
            self.binder.bind(tape, self.model, ParamKey::GateB),
        );
        self.binder.gate = Some(g);
        Ok(g)
    }

    fn bind_cond_prior(&mut self, tape: &mut GradTape, idx: usize) -> Result<VarId> {
        Ok(self.binder.bind(tape, self.model, ParamKey::CondPrior(idx)))
    }

    fn bind_fallback_prior(&mut self, tape: &mut GradTape, idx: usize) -> Result<VarId> {
        Ok(self
            .binder
            .bind(tape, self.model, ParamKey::FallbackPrior(idx)))
    }

    fn fallback_prior_values(&self) -> Vec<f64> {
        self.model.layer.fallback_priors.clone()
    }
}

// Unused in release builds only via the shim's constructor caching.
impl TapeBinder {
    #[allow(dead_code)]
    fn stash_fallback(&mut self, values: Vec<f64>) {
        self.fallback_values = values;
    }
}

//! Continual pretraining: masking, accumulation of micro-batch gradients,
//! Adam, parameter freezing and telemetry.

pub mod adam;
pub mod monitor;
pub mod report;

use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use adam::{adam_step, AdamConfig, AdamState};
pub use monitor::{collapse_monitor, trailing_kl, CollapseStatus, DEFAULT_COLLAPSE_THRESHOLD};
pub use report::{ReportRow, TrainReport};

use crate::corpus::{collate, mask_sequence, MaskingStrategy, TokenSequence};
use crate::diffcore::{Graph, Mode, ParamStore, RngStreams};
use crate::error::{Error, Result};
use crate::model::{LossSettings, Model, Objective};
use crate::objective::{BranchWeighting, LossBreakdown, DEFAULT_LAMBDA};

/// Which parameter groups stay fixed during pretraining.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FreezePolicy {
    pub embedding: bool,
    pub encoder_layers: bool,
}

impl FreezePolicy {
    pub const NAMES: [&'static str; 3] = ["embedding", "encoder_layers", "none"];

    pub fn none() -> Self {
        FreezePolicy::default()
    }

    /// Embedding and all encoder layers frozen; only CUL and LM head train.
    pub fn encoder() -> Self {
        FreezePolicy {
            embedding: true,
            encoder_layers: true,
        }
    }

    pub fn parse<S: AsRef<str>>(names: &[S]) -> Result<Self> {
        let mut p = FreezePolicy::none();
        for n in names {
            match n.as_ref() {
                "embedding" => p.embedding = true,
                "encoder_layers" => p.encoder_layers = true,
                "none" => {}
                other => {
                    return Err(Error::Config(format!(
                        "unknown freeze policy entry '{other}' (expected one of {:?})",
                        Self::NAMES
                    )))
                }
            }
        }
        if names.len() > 1 && names.iter().any(|n| n.as_ref() == "none") {
            return Err(Error::Config("freeze policy 'none' cannot be combined with other entries".into()));
        }
        Ok(p)
    }

    pub fn names(&self) -> Vec<&'static str> {
        let mut v = Vec::new();
        if self.embedding {
            v.push("embedding");
        }
        if self.encoder_layers {
            v.push("encoder_layers");
        }
        if v.is_empty() {
            v.push("none");
        }
        v
    }

    /// Parameter-name prefixes this policy freezes.
    pub fn prefixes(&self) -> Vec<&'static str> {
        let mut v = Vec::new();
        if self.embedding {
            v.push("embedding.");
        }
        if self.encoder_layers {
            v.push("encoder.");
        }
        v
    }

    pub fn apply(&self, params: &mut ParamStore) {
        for p in self.prefixes() {
            params.set_frozen_prefix(p, true);
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub grad_accum_steps: usize,
    pub max_len: usize,
    pub masking_ratio: f64,
    pub strategy: MaskingStrategy,
    pub objective: Objective,
    pub lambda_masked: f64,
    pub lambda_unmasked: f64,
    pub freeze: FreezePolicy,
    /// Log every this many optimizer steps.
    pub log_every: usize,
    /// Stop after this many optimizer steps even if epochs remain.
    pub max_steps: Option<usize>,
}

impl TrainConfig {
    /// Three epochs, 64 x 4 accumulation, constant 5e-5, encoder frozen.
    pub fn desk() -> Self {
        TrainConfig {
            epochs: 3,
            learning_rate: 5e-5,
            adam: AdamConfig::default(),
            batch_size: 64,
            grad_accum_steps: 4,
            max_len: 128,
            masking_ratio: 0.15,
            strategy: MaskingStrategy::default(),
            objective: Objective::VarMae,
            lambda_masked: DEFAULT_LAMBDA,
            lambda_unmasked: DEFAULT_LAMBDA,
            freeze: FreezePolicy::encoder(),
            log_every: 10,
            max_steps: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config(format!("learning_rate = {} must be > 0", self.learning_rate)));
        }
        if self.grad_accum_steps == 0 || self.batch_size == 0 || self.log_every == 0 || self.max_len < 2 {
            return Err(Error::Config(
                "batch_size, gradient_accumulation_steps and log_every must be >= 1, maximum_length >= 2".into(),
            ));
        }
        if !(self.masking_ratio > 0.0 && self.masking_ratio < 1.0) {
            return Err(Error::Config(format!("masking_ratio = {} outside (0, 1)", self.masking_ratio)));
        }
        if !(self.lambda_masked >= 0.0 && self.lambda_unmasked >= 0.0) {
            return Err(Error::Config("trade_off_weight_lambda must be >= 0".into()));
        }
        self.adam.validate()?;
        self.strategy.validate()
    }

    pub fn loss_settings(&self) -> LossSettings {
        LossSettings {
            objective: self.objective,
            lambda_masked: self.lambda_masked,
            lambda_unmasked: self.lambda_unmasked,
            weighting: BranchWeighting::TokenFraction,
        }
    }
}

/// Everything besides the model that a resumed run needs.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub adam: AdamState,
    pub rngs: RngStreams,
    pub step: usize,
}

impl TrainState {
    pub fn new(seed: u64) -> Self {
        TrainState {
            adam: AdamState::default(),
            rngs: RngStreams::new(seed),
            step: 0,
        }
    }
}

/// Freeze flags for a run: the policy, plus the CUL when it is unused.
pub fn apply_freezing(params: &mut ParamStore, cfg: &TrainConfig) {
    params.unfreeze_all();
    cfg.freeze.apply(params);
    if cfg.objective == Objective::Mae {
        params.set_frozen_prefix("cul.", true);
    }
}

fn diverged(e: Error, step: usize, last_good_step: usize) -> Error {
    match e {
        Error::NumericOverflow { op } => Error::Diverged {
            step,
            last_good_step,
            reason: format!("non-finite value in {op}"),
        },
        other => other,
    }
}

fn accumulate(acc: &mut LossBreakdown, b: &LossBreakdown, w: f64) {
    acc.total += w * b.total;
    acc.recon_masked += w * b.recon_masked;
    acc.recon_unmasked += w * b.recon_unmasked;
    acc.kl_masked += w * b.kl_masked;
    acc.kl_unmasked += w * b.kl_unmasked;
    acc.masked_accuracy += w * b.masked_accuracy;
    acc.kl_per_token += w * b.kl_per_token;
}

/// Runs `cfg.epochs` over `corpus` (or until `cfg.max_steps`). The model's
/// freeze flags are reset from `cfg` first. On a non-finite loss or gradient
/// the model is left at the last good step and [`Error::Diverged`] is
/// returned.
pub fn pretrain(model: &mut Model, corpus: &[TokenSequence], cfg: &TrainConfig, state: &mut TrainState) -> Result<TrainReport> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::Empty("pretraining corpus has no sequences".into()));
    }
    apply_freezing(&mut model.params, cfg);
    let settings = cfg.loss_settings();
    let vocab_size = model.config.encoder.vocab_size;
    let started = Instant::now();
    let first_step = state.step;
    let mut report = TrainReport::default();

    'epochs: for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..corpus.len()).collect();
        state.rngs.data.shuffle(&mut order);
        let micro: Vec<&[usize]> = order.chunks(cfg.batch_size).collect();
        for group in micro.chunks(cfg.grad_accum_steps) {
            if cfg.max_steps.is_some_and(|m| state.step - first_step >= m) {
                break 'epochs;
            }
            let step = state.step + 1;
            let last_good = state.step;
            model.params.zero_grads();
            let mut acc = LossBreakdown::default();
            let group_len: usize = group.iter().map(|ids| ids.len()).sum();
            for ids in group {
                let w = ids.len() as f64 / group_len as f64;
                let seqs = ids
                    .iter()
                    .map(|&i| mask_sequence(&corpus[i], cfg.masking_ratio, &cfg.strategy, vocab_size, &mut state.rngs.masking))
                    .collect::<Result<Vec<_>>>()?;
                let batch = collate(&seqs, cfg.max_len)?;
                let mut g = Graph::new();
                let (loss, br) = model
                    .loss(&mut g, &batch, &settings, Mode::Train, &mut state.rngs)
                    .map_err(|e| diverged(e, step, last_good))?;
                let scaled = g.scale(loss, w).map_err(|e| diverged(e, step, last_good))?;
                g.backward(scaled)?;
                model.params.accumulate_grads(&g)?;
                accumulate(&mut acc, &br, w);
            }
            if let Some((name, _)) = model
                .params
                .iter()
                .find(|(_, p)| p.tensor.grad().is_some_and(|g| g.iter().any(|v| !v.is_finite())))
            {
                return Err(Error::Diverged {
                    step,
                    last_good_step: last_good,
                    reason: format!("non-finite gradient for '{name}'"),
                });
            }
            adam_step(&mut model.params, &mut state.adam, &cfg.adam, cfg.learning_rate)?;
            state.step = step;
            if (step - first_step).is_multiple_of(cfg.log_every) {
                report.push(ReportRow {
                    step: step - first_step,
                    epoch,
                    total: acc.total,
                    recon_masked: acc.recon_masked,
                    recon_unmasked: acc.recon_unmasked,
                    kl_masked: acc.kl_masked,
                    kl_unmasked: acc.kl_unmasked,
                    masked_accuracy: acc.masked_accuracy,
                    kl_per_token: acc.kl_per_token,
                    learning_rate: cfg.learning_rate,
                    wall_clock: started.elapsed().as_secs_f64(),
                })?;
            }
        }
    }
    if settings.objective == Objective::VarMae {
        let mut rng = state.rngs.masking.clone();
        let batches = corpus
            .chunks(cfg.batch_size)
            .map(|chunk| {
                let seqs = chunk
                    .iter()
                    .map(|s| mask_sequence(s, cfg.masking_ratio, &cfg.strategy, vocab_size, &mut rng))
                    .collect::<Result<Vec<_>>>()?;
                collate(&seqs, cfg.max_len)
            })
            .collect::<Result<Vec<_>>>()?;
        model.recalibrate_bn(&batches)?;
    }
    Ok(report)
}

/// Eval-mode masked-token accuracy over `corpus`, masking from a stream
/// seeded with `seed` (no parameters or statistics change).
pub fn masked_accuracy(model: &mut Model, corpus: &[TokenSequence], cfg: &TrainConfig, seed: u64) -> Result<f64> {
    if corpus.is_empty() {
        return Err(Error::Empty("evaluation corpus has no sequences".into()));
    }
    let mut rngs = RngStreams::new(seed);
    let settings = cfg.loss_settings();
    let bn = model.bn.clone();
    let (mut hits, mut total) = (0.0, 0usize);
    for chunk in corpus.chunks(cfg.batch_size) {
        let seqs = chunk
            .iter()
            .map(|s| mask_sequence(s, cfg.masking_ratio, &cfg.strategy, model.config.encoder.vocab_size, &mut rngs.masking))
            .collect::<Result<Vec<_>>>()?;
        let batch = collate(&seqs, cfg.max_len)?;
        let masked: usize = batch.mask_positions.iter().map(Vec::len).sum();
        let mut g = Graph::new();
        let (_, br) = model.loss(&mut g, &batch, &settings, Mode::Eval, &mut rngs)?;
        hits += br.masked_accuracy * masked as f64;
        total += masked;
    }
    debug_assert_eq!(bn, model.bn);
    Ok(hits / total as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn freeze_policy_parsing() {
        assert_eq!(FreezePolicy::parse(&["embedding", "encoder_layers"]).unwrap(), FreezePolicy::encoder());
        assert_eq!(FreezePolicy::parse(&["none"]).unwrap(), FreezePolicy::none());
        assert!(FreezePolicy::parse(&["decoder"]).is_err());
        assert!(FreezePolicy::parse(&["none", "embedding"]).is_err());
        assert_eq!(FreezePolicy::encoder().names(), vec!["embedding", "encoder_layers"]);
    }

    #[test]
    fn config_validation() {
        let mut c = TrainConfig::desk();
        c.validate().unwrap();
        c.learning_rate = 0.0;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::desk();
        c.grad_accum_steps = 0;
        assert!(c.validate().is_err());
    }
}

//! The full pretraining model: encoder, CUL and LM head sharing one
//! [`ParamStore`].

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::MaskedBatch;
use crate::cul::{kl_divergence, reparameterize, Branch, Cul, CulConfig};
use crate::diffcore::{Graph, Mode, ParamStore, RngStreams, RunningStats, Var};
use crate::encoder::{Encoder, EncoderConfig, EncoderInput};
use crate::error::{Error, Result};
use crate::objective::{self, lm_logits, BranchOutputs, BranchRouting, BranchWeighting, LossBreakdown};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Objective {
    /// Plain masked-LM on the context vectors; the CUL is bypassed.
    Mae,
    VarMae,
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Objective::Mae => "mae",
            Objective::VarMae => "varmae",
        })
    }
}

impl FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mae" | "dapt" => Ok(Objective::Mae),
            "varmae" => Ok(Objective::VarMae),
            other => Err(Error::Config(format!("unknown objective '{other}' (expected mae or varmae)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub cul: CulConfig,
}

impl ModelConfig {
    pub fn desk(vocab_size: usize) -> Self {
        let encoder = EncoderConfig::desk(vocab_size);
        let cul = CulConfig::desk(encoder.hidden_size);
        ModelConfig { encoder, cul }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.cul.validate()?;
        if self.cul.hidden_size != self.encoder.hidden_size {
            return Err(Error::Config(format!(
                "cul.hidden_size {} != encoder hidden_size {}",
                self.cul.hidden_size, self.encoder.hidden_size
            )));
        }
        if self.cul.latent_size != self.encoder.hidden_size {
            return Err(Error::Config(format!(
                "latent_size {} must equal hidden_size {} so the LM head serves both objectives",
                self.cul.latent_size, self.encoder.hidden_size
            )));
        }
        Ok(())
    }
}

/// Loss weights of one pretraining step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossSettings {
    pub objective: Objective,
    pub lambda_masked: f64,
    pub lambda_unmasked: f64,
    pub weighting: BranchWeighting,
}

impl LossSettings {
    pub fn varmae(lambda: f64) -> Self {
        LossSettings {
            objective: Objective::VarMae,
            lambda_masked: lambda,
            lambda_unmasked: lambda,
            weighting: BranchWeighting::TokenFraction,
        }
    }

    pub fn mae() -> Self {
        LossSettings {
            objective: Objective::Mae,
            ..LossSettings::varmae(0.0)
        }
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    /// Running statistics of the posterior-mean batch norm.
    pub bn: RunningStats,
}

impl Model {
    /// Fresh model initialized from the `init` stream of `rngs`.
    pub fn new(config: ModelConfig, rngs: &mut RngStreams) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        Encoder::new(config.encoder.clone())?.init_params(&mut params, &mut rngs.init);
        Cul::new(config.cul.clone())?.init_params(&mut params, &mut rngs.init);
        objective::init_lm_head(&mut params, config.encoder.vocab_size, config.cul.latent_size, &mut rngs.init);
        let bn = RunningStats::new(config.cul.latent_size);
        Ok(Model { config, params, bn })
    }

    pub fn encoder(&self) -> Encoder {
        Encoder {
            config: self.config.encoder.clone(),
        }
    }

    pub fn cul(&self) -> Cul {
        Cul {
            config: self.config.cul.clone(),
        }
    }

    /// Builds the pretraining loss of `batch` into `g`.
    pub fn loss(
        &mut self,
        g: &mut Graph,
        batch: &MaskedBatch,
        settings: &LossSettings,
        mode: Mode,
        rngs: &mut RngStreams,
    ) -> Result<(Var, LossBreakdown)> {
        let routing = objective::route(batch)?;
        let input = EncoderInput::from_batch(batch);
        let ctx = self.encoder().forward(g, &self.params, &input, mode, &mut rngs.dropout)?;
        let rows = ctx.rows(g)?;
        match settings.objective {
            Objective::Mae => mae_head(g, &self.params, rows, &routing),
            Objective::VarMae => {
                let cul = self.cul();
                varmae_head(g, &self.params, &cul, &mut self.bn, rows, &routing, settings, mode, rngs)
            }
        }
    }

    /// Replaces the batch-norm running statistics with the exact pooled
    /// statistics of the mean head over every word token of `batches`,
    /// computed in eval mode with the current weights. A no-op without
    /// batch norm.
    pub fn recalibrate_bn(&mut self, batches: &[MaskedBatch]) -> Result<()> {
        if !self.config.cul.mu_batch_norm {
            return Ok(());
        }
        let d = self.config.cul.latent_size;
        let (mut sum, mut sq, mut n) = (vec![0.0; d], vec![0.0; d], 0usize);
        let raws = batches
            .iter()
            .map(|b| {
                let routing = objective::route(b)?;
                let mut g = Graph::new();
                let input = EncoderInput::from_batch(b);
                let mut unused = crate::diffcore::Rng::new(0, crate::diffcore::Stream::Dropout);
                let ctx = self.encoder().forward(&mut g, &self.params, &input, Mode::Eval, &mut unused)?;
                let rows = ctx.rows(&mut g)?;
                let c = g.gather_rows(rows, &routing.all_rows())?;
                let raw = self.cul().raw_mean(&mut g, &self.params, c)?;
                Ok(g.data(raw).to_vec())
            })
            .collect::<Result<Vec<_>>>()?;
        for raw in &raws {
            for row in raw.chunks(d) {
                row.iter().zip(&mut sum).for_each(|(x, s)| *s += x);
                n += 1;
            }
        }
        if n == 0 {
            return Err(Error::Empty("no word tokens to recalibrate on".into()));
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        for raw in &raws {
            for row in raw.chunks(d) {
                row.iter().zip(&mean).zip(&mut sq).for_each(|((x, m), q)| *q += (x - m) * (x - m));
            }
        }
        self.bn.mean = mean;
        self.bn.var = sq.iter().map(|q| q / n as f64).collect();
        Ok(())
    }
}

fn mae_head(g: &mut Graph, params: &ParamStore, rows: Var, routing: &BranchRouting) -> Result<(Var, LossBreakdown)> {
    let c = g.gather_rows(rows, &routing.masked_rows)?;
    let logits = lm_logits(g, params, c)?;
    let (loss, mae) = objective::mae_loss(g, routing, logits)?;
    let breakdown = LossBreakdown {
        total: mae.loss,
        recon_masked: mae.loss,
        weight_masked: 1.0,
        masked_accuracy: mae.masked_accuracy,
        ..LossBreakdown::default()
    };
    Ok((loss, breakdown))
}

#[allow(clippy::too_many_arguments)]
fn varmae_head(
    g: &mut Graph,
    params: &ParamStore,
    cul: &Cul,
    bn: &mut RunningStats,
    rows: Var,
    routing: &BranchRouting,
    settings: &LossSettings,
    mode: Mode,
    rngs: &mut RngStreams,
) -> Result<(Var, LossBreakdown)> {
    let all = routing.all_rows();
    if all.is_empty() {
        return Err(Error::Empty("batch has no word tokens".into()));
    }
    let c_all = g.gather_rows(rows, &all)?;
    let mu_all = cul.posterior_mean(g, params, c_all, mode, bn)?;
    let km = routing.masked_rows.len();
    let mut branch = |g: &mut Graph, b: Branch, range: std::ops::Range<usize>| -> Result<Option<BranchOutputs>> {
        if range.is_empty() {
            return Ok(None);
        }
        let idx: Vec<usize> = range.collect();
        let c = g.gather_rows(c_all, &idx)?;
        let mu = g.gather_rows(mu_all, &idx)?;
        let sigma = cul.posterior_scale(g, params, c, b)?;
        let p = crate::cul::LatentParams { mu, sigma, branch: b };
        let sample = reparameterize(g, &p, &mut rngs.reparam, mode)?;
        let logits = lm_logits(g, params, sample.z)?;
        let kl = kl_divergence(g, &p)?;
        Ok(Some(BranchOutputs { logits, kl }))
    };
    let m = branch(g, Branch::Masked, 0..km)?;
    let u = branch(g, Branch::Unmasked, km..all.len())?;
    objective::varmae_loss(
        g,
        routing,
        m.as_ref(),
        u.as_ref(),
        settings.lambda_masked,
        settings.lambda_unmasked,
        settings.weighting,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{collate, mask_sequence, MaskingStrategy, Vocabulary};
    use crate::diffcore::{Rng, Stream};

    fn tiny() -> (Model, MaskedBatch) {
        let lines = ["a b c d", "b c e", "d e a b c"];
        let vocab = crate::corpus::build_vocab(&lines, 1).unwrap();
        let mut cfg = ModelConfig::desk(vocab.len());
        cfg.encoder.hidden_size = 8;
        cfg.encoder.num_heads = 2;
        cfg.encoder.head_size = 4;
        cfg.encoder.ffn_inner_size = 16;
        cfg.cul = CulConfig::desk(8);
        let model = Model::new(cfg, &mut RngStreams::new(0)).unwrap();
        (model, batch(&vocab, &lines))
    }

    fn batch(vocab: &Vocabulary, lines: &[&str]) -> MaskedBatch {
        let mut rng = Rng::new(1, Stream::Masking);
        let seqs: Vec<_> = vocab
            .encode_corpus(lines)
            .unwrap()
            .iter()
            .map(|s| mask_sequence(s, 0.3, &MaskingStrategy::default(), vocab.len(), &mut rng).unwrap())
            .collect();
        collate(&seqs, 16).unwrap()
    }

    #[test]
    fn both_objectives_produce_finite_losses() {
        let (mut model, b) = tiny();
        for settings in [LossSettings::mae(), LossSettings::varmae(10.0)] {
            let mut g = Graph::new();
            let (loss, br) = model
                .loss(&mut g, &b, &settings, Mode::Train, &mut RngStreams::new(2))
                .unwrap();
            assert!(g.item(loss).unwrap().is_finite());
            assert!((br.total - br.recompose()).abs() < 1e-10);
        }
    }

    #[test]
    fn recalibrated_stats_reproduce_full_batch_normalization() {
        let (mut model, b) = tiny();
        model.recalibrate_bn(std::slice::from_ref(&b)).unwrap();
        let mut rngs = RngStreams::new(3);
        let stats = model.bn.clone();
        let mut fresh = model.bn.clone();
        fresh.updates = 0;
        let routing = objective::route(&b).unwrap();
        let mut g = Graph::new();
        let input = EncoderInput::from_batch(&b);
        let ctx = model.encoder().forward(&mut g, &model.params, &input, Mode::Eval, &mut rngs.dropout).unwrap();
        let rows = ctx.rows(&mut g).unwrap();
        let c = g.gather_rows(rows, &routing.all_rows()).unwrap();
        let raw = model.cul().raw_mean(&mut g, &model.params, c).unwrap();
        let cfg = &model.config.cul;
        g.batch_norm(raw, Mode::Train, &mut fresh, cfg.bn_momentum, cfg.bn_eps).unwrap();
        for j in 0..stats.mean.len() {
            assert!((stats.mean[j] - fresh.mean[j]).abs() < 1e-12);
            assert!((stats.var[j] - fresh.var[j]).abs() <= 1e-9 * stats.var[j].max(1e-300));
        }
    }

    #[test]
    fn latent_must_match_hidden() {
        let mut cfg = ModelConfig::desk(20);
        cfg.cul.latent_size = 32;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn objective_parsing() {
        assert_eq!("VarMAE".parse::<Objective>().unwrap(), Objective::VarMae);
        assert_eq!("mae".parse::<Objective>().unwrap(), Objective::Mae);
        assert!("bert".parse::<Objective>().is_err());
    }
}

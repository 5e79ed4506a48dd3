//! Context uncertainty learning: a diagonal-Gaussian posterior per token.
//!
//! The mean head `cul.mu` is shared by masked and unmasked tokens and its
//! output is batch-normalized to a fixed scale; masked and unmasked tokens
//! each get their own variance head (`cul.sigma_masked`,
//! `cul.sigma_unmasked`). Every head is `fc1 -> relu -> fc2`. With batch norm
//! on, the mean head's `fc2` has no bias (the normalization removes it).

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::diffcore::{Graph, Mode, ParamStore, Rng, RunningStats, Tensor, Var};
use crate::encoder::init_linear;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CulConfig {
    pub hidden_size: usize,
    pub latent_size: usize,
    pub mlp_inner_size: usize,
    pub bn_momentum: f64,
    /// Fixed scale applied after normalizing the posterior means.
    pub bn_gamma_mu: f64,
    pub bn_eps: f64,
    pub sigma_floor: f64,
    /// Disabling this is the posterior-collapse ablation.
    pub mu_batch_norm: bool,
}

impl CulConfig {
    pub fn desk(hidden_size: usize) -> Self {
        CulConfig {
            hidden_size,
            latent_size: hidden_size,
            mlp_inner_size: hidden_size,
            bn_momentum: 0.1,
            bn_gamma_mu: 0.5,
            bn_eps: 1e-20,
            sigma_floor: 1e-4,
            mu_batch_norm: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_size == 0 || self.latent_size == 0 || self.mlp_inner_size == 0 {
            return Err(Error::Config("cul sizes must be at least 1".into()));
        }
        if !(self.sigma_floor > 0.0) {
            return Err(Error::Config(format!("cul.sigma_floor = {} must be > 0", self.sigma_floor)));
        }
        if !(self.bn_momentum > 0.0 && self.bn_momentum < 1.0) {
            return Err(Error::Config(format!("cul.bn_momentum = {} outside (0, 1)", self.bn_momentum)));
        }
        if !(self.bn_eps >= 0.0) || !self.bn_gamma_mu.is_finite() {
            return Err(Error::Config("cul.bn_eps and cul.bn_gamma_mu must be finite, eps >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Branch {
    Masked,
    Unmasked,
}

impl Branch {
    fn sigma_prefix(self) -> &'static str {
        match self {
            Branch::Masked => "cul.sigma_masked",
            Branch::Unmasked => "cul.sigma_unmasked",
        }
    }
}

impl fmt::Display for Branch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Branch::Masked => "masked",
            Branch::Unmasked => "unmasked",
        })
    }
}

impl FromStr for Branch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "masked" => Ok(Branch::Masked),
            "unmasked" => Ok(Branch::Unmasked),
            other => Err(Error::Contract(format!("unknown branch '{other}'"))),
        }
    }
}

/// `mu`, `sigma`: `[tokens, latent]`, `sigma >= sigma_floor`.
#[derive(Clone, Copy, Debug)]
pub struct LatentParams {
    pub mu: Var,
    pub sigma: Var,
    pub branch: Branch,
}

/// `z = mu + sigma * eps`; `eps` is kept for inspection.
#[derive(Clone, Debug)]
pub struct LatentSample {
    pub z: Var,
    pub eps: Tensor,
}

#[derive(Clone, Debug)]
pub struct Cul {
    pub config: CulConfig,
}

fn mlp(g: &mut Graph, store: &ParamStore, x: Var, prefix: &str, smooth: bool) -> Result<Var> {
    let w1 = g.param(store, &format!("{prefix}.fc1.weight"))?;
    let b1 = g.param(store, &format!("{prefix}.fc1.bias"))?;
    let w2 = g.param(store, &format!("{prefix}.fc2.weight"))?;
    let h = g.matmul(x, w1)?;
    let h = g.add(h, b1)?;
    let h = if smooth { g.gelu(h)? } else { g.relu(h)? };
    let y = g.matmul(h, w2)?;
    let b2_name = format!("{prefix}.fc2.bias");
    if !store.contains(&b2_name) {
        return Ok(y);
    }
    let b2 = g.param(store, &b2_name)?;
    g.add(y, b2)
}

impl Cul {
    pub fn new(config: CulConfig) -> Result<Self> {
        config.validate()?;
        Ok(Cul { config })
    }

    pub fn init_params(&self, store: &mut ParamStore, rng: &mut Rng) {
        let c = &self.config;
        for prefix in ["cul.mu", "cul.sigma_masked", "cul.sigma_unmasked"] {
            init_linear(store, &format!("{prefix}.fc1"), c.hidden_size, c.mlp_inner_size, rng);
            init_linear(store, &format!("{prefix}.fc2"), c.mlp_inner_size, c.latent_size, rng);
        }
        if c.mu_batch_norm {
            store.remove("cul.mu.fc2.bias");
        }
        let at_prior = (1.0 - c.sigma_floor).exp_m1().ln();
        for prefix in ["cul.sigma_masked", "cul.sigma_unmasked"] {
            store.get_mut(&format!("{prefix}.fc2.weight")).expect("just created").tensor.data_mut().fill(0.0);
            store.get_mut(&format!("{prefix}.fc2.bias")).expect("just created").tensor.data_mut().fill(at_prior);
        }
    }

    pub fn new_stats(&self) -> RunningStats {
        RunningStats::new(self.config.latent_size)
    }

    fn check_rows(&self, g: &Graph, ctx: Var) -> Result<()> {
        let s = g.shape(ctx);
        if s.len() != 2 || s[1] != self.config.hidden_size {
            return Err(Error::shape("cul", &[0, self.config.hidden_size], s));
        }
        Ok(())
    }

    /// Mean-head output before batch norm.
    pub fn raw_mean(&self, g: &mut Graph, store: &ParamStore, ctx: Var) -> Result<Var> {
        self.check_rows(g, ctx)?;
        mlp(g, store, ctx, "cul.mu", true)
    }

    /// Shared mean head over context rows `[tokens, hidden]`. With batch norm
    /// enabled, train mode normalizes with the statistics of these rows and
    /// updates `stats`; eval mode uses `stats`.
    pub fn posterior_mean(&self, g: &mut Graph, store: &ParamStore, ctx: Var, mode: Mode, stats: &mut RunningStats) -> Result<Var> {
        let raw = self.raw_mean(g, store, ctx)?;
        if !self.config.mu_batch_norm {
            return Ok(raw);
        }
        let c = &self.config;
        let normed = g.batch_norm(raw, mode, stats, c.bn_momentum, c.bn_eps)?;
        g.scale(normed, c.bn_gamma_mu)
    }

    /// `softplus(head(ctx)) + sigma_floor` with the branch's own head.
    pub fn posterior_scale(&self, g: &mut Graph, store: &ParamStore, ctx: Var, branch: Branch) -> Result<Var> {
        self.check_rows(g, ctx)?;
        let pre = mlp(g, store, ctx, branch.sigma_prefix(), false)?;
        let sp = g.softplus(pre)?;
        g.add_scalar(sp, self.config.sigma_floor)
    }

    pub fn infer_posterior(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        ctx: Var,
        branch: Branch,
        mode: Mode,
        stats: &mut RunningStats,
    ) -> Result<LatentParams> {
        let mu = self.posterior_mean(g, store, ctx, mode, stats)?;
        let sigma = self.posterior_scale(g, store, ctx, branch)?;
        Ok(LatentParams { mu, sigma, branch })
    }
}

/// Train mode: `z = mu + sigma * eps`, `eps ~ N(0, I)` from `rng`.
/// Eval mode: `z = mu` and nothing is drawn.
pub fn reparameterize(g: &mut Graph, params: &LatentParams, rng: &mut Rng, mode: Mode) -> Result<LatentSample> {
    let shape = g.shape(params.mu).to_vec();
    if g.shape(params.sigma) != shape.as_slice() {
        return Err(Error::shape("reparameterize", &shape, g.shape(params.sigma)));
    }
    match mode {
        Mode::Eval => Ok(LatentSample {
            z: params.mu,
            eps: Tensor::zeros(&shape),
        }),
        Mode::Train => {
            let eps = Tensor::randn(&shape, 1.0, rng);
            let e = g.constant(eps.clone());
            let noise = g.mul(params.sigma, e)?;
            let z = g.add(params.mu, noise)?;
            Ok(LatentSample { z, eps })
        }
    }
}

/// Per-token `-1/2 * sum_d (1 + log sigma^2 - mu^2 - sigma^2)`, shape `[tokens]`.
pub fn kl_divergence(g: &mut Graph, params: &LatentParams) -> Result<Var> {
    if let Some(bad) = g.data(params.sigma).iter().find(|s| !(**s > 0.0)) {
        return Err(Error::Contract(format!("kl_divergence: non-positive sigma {bad}")));
    }
    let s2 = g.square(params.sigma)?;
    let log_s2 = g.log(s2)?;
    let m2 = g.square(params.mu)?;
    let t = g.sub(log_s2, m2)?;
    let t = g.sub(t, s2)?;
    let t = g.add_scalar(t, 1.0)?;
    let per_token = g.sum_last(t)?;
    g.scale(per_token, -0.5)
}

/// Closed-form KL of one token, for use outside a graph.
pub fn kl_closed_form(mu: &[f64], sigma: &[f64]) -> f64 {
    0.5 * mu
        .iter()
        .zip(sigma)
        .map(|(m, s)| m * m + s * s - 1.0 - (s * s).ln())
        .sum::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::Stream;

    fn setup(hidden: usize, latent: usize) -> (Cul, ParamStore) {
        let mut cfg = CulConfig::desk(hidden);
        cfg.latent_size = latent;
        let cul = Cul::new(cfg).unwrap();
        let mut store = ParamStore::new();
        cul.init_params(&mut store, &mut Rng::new(0, Stream::Init));
        (cul, store)
    }

    fn random_rows(g: &mut Graph, n: usize, d: usize, seed: u64) -> Var {
        let t = Tensor::randn(&[n, d], 1.0, &mut Rng::new(seed, Stream::Data));
        g.constant(t)
    }

    #[test]
    fn shared_mean_separate_scales() {
        let (cul, mut store) = setup(8, 8);
        store.get_mut("cul.sigma_masked.fc2.weight").unwrap().tensor = Tensor::randn(&[8, 8], 0.1, &mut Rng::new(4, Stream::Init));
        let mut stats = cul.new_stats();
        let mut g = Graph::new();
        let ctx = random_rows(&mut g, 5, 8, 1);
        let m = cul.infer_posterior(&mut g, &store, ctx, Branch::Masked, Mode::Eval, &mut stats).unwrap();
        let u = cul.infer_posterior(&mut g, &store, ctx, Branch::Unmasked, Mode::Eval, &mut stats).unwrap();
        assert_eq!(g.data(m.mu), g.data(u.mu));
        assert_ne!(g.data(m.sigma), g.data(u.sigma));
    }

    #[test]
    fn variance_heads_start_at_the_prior() {
        let (cul, store) = setup(8, 8);
        let mut g = Graph::new();
        let ctx = random_rows(&mut g, 5, 8, 3);
        for b in [Branch::Masked, Branch::Unmasked] {
            let s = cul.posterior_scale(&mut g, &store, ctx, b).unwrap();
            assert!(g.data(s).iter().all(|&v| (v - 1.0).abs() < 1e-12));
        }
    }

    #[test]
    fn sigma_respects_floor() {
        let (cul, mut store) = setup(4, 4);
        // push the pre-activation strongly negative
        store.get_mut("cul.sigma_masked.fc2.bias").unwrap().tensor = Tensor::full(&[4], -800.0);
        let mut g = Graph::new();
        let ctx = random_rows(&mut g, 6, 4, 2);
        let s = cul.posterior_scale(&mut g, &store, ctx, Branch::Masked).unwrap();
        assert!(g.data(s).iter().all(|&v| v >= cul.config.sigma_floor));
    }

    #[test]
    fn batch_statistics_of_mu() {
        let (cul, store) = setup(16, 16);
        let mut stats = cul.new_stats();
        let mut g = Graph::new();
        let ctx = random_rows(&mut g, 256, 16, 3);
        let mu = cul.posterior_mean(&mut g, &store, ctx, Mode::Train, &mut stats).unwrap();
        let d = g.data(mu);
        for j in 0..16 {
            let col: Vec<f64> = (0..256).map(|r| d[r * 16 + j]).collect();
            let mean = col.iter().sum::<f64>() / 256.0;
            let std = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 256.0).sqrt();
            assert!(mean.abs() < 1e-6, "mean {mean}");
            assert!((std - cul.config.bn_gamma_mu).abs() < 1e-3, "std {std}");
        }
    }

    #[test]
    fn eval_reparameterization_is_mu() {
        let (cul, store) = setup(4, 4);
        let mut stats = cul.new_stats();
        let mut g = Graph::new();
        let ctx = random_rows(&mut g, 3, 4, 4);
        let p = cul.infer_posterior(&mut g, &store, ctx, Branch::Masked, Mode::Eval, &mut stats).unwrap();
        let mut rng = Rng::new(1, Stream::Reparam);
        let before = rng.state();
        let s = reparameterize(&mut g, &p, &mut rng, Mode::Eval).unwrap();
        assert_eq!(g.data(s.z), g.data(p.mu));
        assert_eq!(rng.state(), before);
    }

    #[test]
    fn zero_sigma_sample_is_mu() {
        let mut g = Graph::new();
        let mu = g.constant(Tensor::from_vec(vec![0.3, -1.0, 2.5]));
        let sigma = g.constant(Tensor::zeros(&[3]));
        let p = LatentParams {
            mu,
            sigma,
            branch: Branch::Masked,
        };
        let s = reparameterize(&mut g, &p, &mut Rng::new(9, Stream::Reparam), Mode::Train).unwrap();
        assert_eq!(g.data(s.z), g.data(mu));
    }

    #[test]
    fn train_sample_matches_formula() {
        let mut g = Graph::new();
        let mu = g.constant(Tensor::new(vec![2, 2], vec![0.1, 0.2, 0.3, 0.4]).unwrap());
        let sigma = g.constant(Tensor::new(vec![2, 2], vec![1.0, 0.5, 2.0, 0.1]).unwrap());
        let p = LatentParams {
            mu,
            sigma,
            branch: Branch::Unmasked,
        };
        let s = reparameterize(&mut g, &p, &mut Rng::new(9, Stream::Reparam), Mode::Train).unwrap();
        for i in 0..4 {
            let expect = g.data(mu)[i] + g.data(sigma)[i] * s.eps.data()[i];
            assert_eq!(g.data(s.z)[i], expect);
        }
    }

    #[test]
    fn kl_closed_form_values() {
        let mut g = Graph::new();
        let mu = g.constant(Tensor::new(vec![2, 2], vec![0.0, 0.0, 1.0, 0.0]).unwrap());
        let sigma = g.constant(Tensor::ones(&[2, 2]));
        let kl = kl_divergence(
            &mut g,
            &LatentParams {
                mu,
                sigma,
                branch: Branch::Masked,
            },
        )
        .unwrap();
        assert_eq!(g.data(kl)[0], 0.0);
        assert!((g.data(kl)[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn kl_rejects_non_positive_sigma() {
        let mut g = Graph::new();
        let mu = g.constant(Tensor::zeros(&[1, 2]));
        let sigma = g.constant(Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap());
        let err = kl_divergence(
            &mut g,
            &LatentParams {
                mu,
                sigma,
                branch: Branch::Masked,
            },
        );
        assert!(matches!(err, Err(Error::Contract(_))));
    }

    #[test]
    fn branch_parsing() {
        assert_eq!("masked".parse::<Branch>().unwrap(), Branch::Masked);
        assert!(matches!("both".parse::<Branch>(), Err(Error::Contract(_))));
    }
}

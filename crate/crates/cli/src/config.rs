//! Run configuration: a TOML file whose keys follow the hyperparameter
//! tables (`number_of_epoch`, `peak_learning_rate`, ...). Unknown keys are
//! rejected; relative paths resolve against the config file's directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use varmae::corpus::MaskingStrategy;
use varmae::cul::CulConfig;
use varmae::downstream::{FinetuneConfig, MetricKind, Representation, TaskKind, TaskSpec};
use varmae::encoder::EncoderConfig;
use varmae::pretrain::{AdamConfig, FreezePolicy, TrainConfig};
use varmae::{ModelConfig, Objective};

use crate::error::{CliError, CliResult};
use crate::fsio::read_input;

pub const OUTPUT_ROOT_ENV: &str = "VARMAE_OUTPUT_ROOT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "one")]
    pub seed: u64,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub cul: CulSection,
    #[serde(default)]
    pub pretrain: PretrainSection,
    #[serde(default)]
    pub finetune: FinetuneSection,
    #[serde(default, rename = "task", skip_serializing_if = "Vec::is_empty")]
    pub tasks: Vec<TaskSection>,
}

fn one() -> u64 {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Domain corpus, one sentence per line.
    pub corpus: Option<PathBuf>,
    /// General corpus for the MAE warm start that stands in for a
    /// general-purpose pretrained encoder.
    pub general_corpus: Option<PathBuf>,
    /// Vocabulary file; when absent it is built from the corpora.
    pub vocab: Option<PathBuf>,
    pub min_count: usize,
    /// Leading fraction of the domain corpus used for pretraining.
    pub corpus_fraction: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            corpus: None,
            general_corpus: None,
            vocab: None,
            min_count: 1,
            corpus_fraction: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub number_of_layers: usize,
    pub hidden_size: usize,
    pub ffn_inner_hidden_size: usize,
    pub attention_heads: usize,
    pub attention_head_size: usize,
    pub dropout: f64,
    pub attention_dropout: f64,
    pub maximum_position: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let e = EncoderConfig::desk(0);
        ModelSection {
            number_of_layers: e.num_layers,
            hidden_size: e.hidden_size,
            ffn_inner_hidden_size: e.ffn_inner_size,
            attention_heads: e.num_heads,
            attention_head_size: e.head_size,
            dropout: e.dropout,
            attention_dropout: e.attention_dropout,
            maximum_position: e.max_position,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CulSection {
    /// Defaults to `model.hidden_size`.
    pub mlp_inner_size: Option<usize>,
    pub batch_norm: bool,
    pub bn_gamma: f64,
    pub bn_momentum: f64,
    pub bn_epsilon: f64,
    pub sigma_floor: f64,
}

impl Default for CulSection {
    fn default() -> Self {
        let c = CulConfig::desk(1);
        CulSection {
            mlp_inner_size: None,
            batch_norm: c.mu_batch_norm,
            bn_gamma: c.bn_gamma_mu,
            bn_momentum: c.bn_momentum,
            bn_epsilon: c.bn_eps,
            sigma_floor: c.sigma_floor,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainSection {
    pub objective: String,
    pub number_of_epoch: usize,
    pub trade_off_weight_lambda: f64,
    pub peak_learning_rate: f64,
    pub maximum_length: usize,
    pub batch_size: usize,
    pub gradient_accumulation_steps: usize,
    /// Optional cap on optimizer steps.
    pub optimization_steps: Option<usize>,
    pub weight_decay: f64,
    pub adam_epsilon: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub masking_ratio: f64,
    pub mask_token_probability: f64,
    pub keep_probability: f64,
    pub random_token_probability: f64,
    pub freeze: Vec<String>,
    pub log_every: usize,
    /// Epochs of the MAE warm start on `data.general_corpus` (all
    /// parameters trainable).
    pub general_number_of_epoch: usize,
    pub general_learning_rate: f64,
}

impl Default for PretrainSection {
    fn default() -> Self {
        let t = TrainConfig::desk();
        PretrainSection {
            objective: t.objective.to_string(),
            number_of_epoch: t.epochs,
            trade_off_weight_lambda: t.lambda_masked,
            peak_learning_rate: t.learning_rate,
            maximum_length: t.max_len,
            batch_size: t.batch_size,
            gradient_accumulation_steps: t.grad_accum_steps,
            optimization_steps: t.max_steps,
            weight_decay: t.adam.weight_decay,
            adam_epsilon: t.adam.eps,
            adam_beta1: t.adam.beta1,
            adam_beta2: t.adam.beta2,
            masking_ratio: t.masking_ratio,
            mask_token_probability: t.strategy.p_mask,
            keep_probability: t.strategy.p_keep,
            random_token_probability: t.strategy.p_random,
            freeze: t.freeze.names().iter().map(|s| s.to_string()).collect(),
            log_every: t.log_every,
            general_number_of_epoch: 1,
            general_learning_rate: 1e-3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneSection {
    pub number_of_epoch: usize,
    pub maximum_length: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub dropout: f64,
    pub weight_decay: f64,
    pub warmup_ratio: f64,
    pub seeds: Vec<u64>,
    /// `latent` or `context`; defaults by the checkpoint's objective.
    pub representation: Option<String>,
}

impl Default for FinetuneSection {
    fn default() -> Self {
        let f = FinetuneConfig::desk();
        FinetuneSection {
            number_of_epoch: f.epochs,
            maximum_length: f.max_len,
            batch_size: f.batch_size,
            learning_rate: f.learning_rate,
            dropout: 0.1,
            weight_decay: f.adam.weight_decay,
            warmup_ratio: f.warmup_ratio,
            seeds: vec![1, 2, 3],
            representation: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSection {
    pub name: String,
    pub kind: String,
    pub labels: Vec<String>,
    #[serde(default)]
    pub multi_label: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metric: Option<String>,
    pub train: PathBuf,
    pub dev: PathBuf,
    pub test: PathBuf,
}

fn bad(key: &str, msg: impl std::fmt::Display) -> CliError {
    CliError::usage(format!("config key '{key}': {msg}"))
}

fn wrap<T>(key: &str, r: varmae::Result<T>) -> CliResult<T> {
    r.map_err(|e| bad(key, e))
}

fn absolutize(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

fn require_file(key: &str, p: &Path) -> CliResult<()> {
    if !p.is_file() {
        return Err(bad(key, format!("file not found: {}", p.display())));
    }
    Ok(())
}

impl RunConfig {
    /// Parses `path`, resolves relative paths and the output directory
    /// (against `output_root` if given) and validates everything.
    pub fn load(path: &Path, output_root: Option<&Path>) -> CliResult<Self> {
        let text = read_input(path, "config")?;
        let base = match path.parent() {
            Some(p) if !p.as_os_str().is_empty() => p,
            _ => Path::new("."),
        };
        let base = std::path::absolute(base).unwrap_or_else(|_| base.to_path_buf());
        Self::from_toml(&text, &base, output_root)
    }

    pub fn from_toml(text: &str, base: &Path, output_root: Option<&Path>) -> CliResult<Self> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::usage(format!("config: {}", e.message())))?;
        cfg.resolve(base, output_root);
        cfg.validate()?;
        Ok(cfg)
    }

    fn resolve(&mut self, base: &Path, output_root: Option<&Path>) {
        for p in [&mut self.data.corpus, &mut self.data.general_corpus, &mut self.data.vocab]
            .into_iter()
            .flatten()
        {
            absolutize(base, p);
        }
        for t in &mut self.tasks {
            for p in [&mut t.train, &mut t.dev, &mut t.test] {
                absolutize(base, p);
            }
        }
        if self.output_dir.is_relative() {
            self.output_dir = output_root.unwrap_or(base).join(&self.output_dir);
        }
    }

    /// Full config with every default spelled out and absolute paths;
    /// loading it reproduces the run.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> CliResult<()> {
        for (key, p) in [
            ("data.corpus", &self.data.corpus),
            ("data.general_corpus", &self.data.general_corpus),
            ("data.vocab", &self.data.vocab),
        ] {
            if let Some(p) = p {
                require_file(key, p)?;
            }
        }
        let f = self.data.corpus_fraction;
        if !(f > 0.0 && f <= 1.0) {
            return Err(bad("data.corpus_fraction", format!("{f} outside (0, 1]")));
        }
        wrap("model", self.model_config(8).validate())?;
        self.objective()?;
        self.train_config()?;
        self.general_train_config()?;
        self.finetune_config()?;
        self.representation()?;
        if self.finetune.seeds.is_empty() {
            return Err(bad("finetune.seeds", "needs at least one seed"));
        }
        let mut names = std::collections::HashSet::new();
        for (i, t) in self.tasks.iter().enumerate() {
            if !names.insert(t.name.as_str()) {
                return Err(bad(&format!("task[{i}].name"), format!("duplicate task '{}'", t.name)));
            }
            self.task_spec(i)?;
            for (k, p) in [("train", &t.train), ("dev", &t.dev), ("test", &t.test)] {
                require_file(&format!("task[{i}].{k}"), p)?;
            }
        }
        Ok(())
    }

    pub fn objective(&self) -> CliResult<Objective> {
        wrap("pretrain.objective", self.pretrain.objective.parse())
    }

    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        let m = &self.model;
        let encoder = EncoderConfig {
            num_layers: m.number_of_layers,
            hidden_size: m.hidden_size,
            ffn_inner_size: m.ffn_inner_hidden_size,
            num_heads: m.attention_heads,
            head_size: m.attention_head_size,
            dropout: m.dropout,
            attention_dropout: m.attention_dropout,
            max_position: m.maximum_position,
            vocab_size,
        };
        let c = &self.cul;
        let cul = CulConfig {
            mlp_inner_size: c.mlp_inner_size.unwrap_or(m.hidden_size),
            bn_momentum: c.bn_momentum,
            bn_gamma_mu: c.bn_gamma,
            bn_eps: c.bn_epsilon,
            sigma_floor: c.sigma_floor,
            mu_batch_norm: c.batch_norm,
            ..CulConfig::desk(m.hidden_size)
        };
        ModelConfig { encoder, cul }
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            beta1: self.pretrain.adam_beta1,
            beta2: self.pretrain.adam_beta2,
            eps: self.pretrain.adam_epsilon,
            weight_decay: self.pretrain.weight_decay,
        }
    }

    /// Settings of the domain phase.
    pub fn train_config(&self) -> CliResult<TrainConfig> {
        let p = &self.pretrain;
        let cfg = TrainConfig {
            epochs: p.number_of_epoch,
            learning_rate: p.peak_learning_rate,
            adam: self.adam(),
            batch_size: p.batch_size,
            grad_accum_steps: p.gradient_accumulation_steps,
            max_len: p.maximum_length,
            masking_ratio: p.masking_ratio,
            strategy: MaskingStrategy {
                p_mask: p.mask_token_probability,
                p_keep: p.keep_probability,
                p_random: p.random_token_probability,
            },
            objective: self.objective()?,
            lambda_masked: p.trade_off_weight_lambda,
            lambda_unmasked: p.trade_off_weight_lambda,
            freeze: wrap("pretrain.freeze", FreezePolicy::parse(&p.freeze))?,
            log_every: p.log_every,
            max_steps: p.optimization_steps,
        };
        wrap("pretrain", cfg.validate())?;
        Ok(cfg)
    }

    /// Settings of the MAE warm start on the general corpus.
    pub fn general_train_config(&self) -> CliResult<TrainConfig> {
        let cfg = TrainConfig {
            epochs: self.pretrain.general_number_of_epoch,
            learning_rate: self.pretrain.general_learning_rate,
            objective: Objective::Mae,
            freeze: FreezePolicy::none(),
            max_steps: None,
            ..self.train_config()?
        };
        wrap("pretrain.general_learning_rate", cfg.validate())?;
        Ok(cfg)
    }

    pub fn finetune_config(&self) -> CliResult<FinetuneConfig> {
        let f = &self.finetune;
        if !(0.0..1.0).contains(&f.dropout) {
            return Err(bad("finetune.dropout", format!("{} outside [0, 1)", f.dropout)));
        }
        let cfg = FinetuneConfig {
            epochs: f.number_of_epoch,
            learning_rate: f.learning_rate,
            batch_size: f.batch_size,
            max_len: f.maximum_length,
            warmup_ratio: f.warmup_ratio,
            adam: AdamConfig {
                weight_decay: f.weight_decay,
                ..self.adam()
            },
        };
        wrap("finetune", cfg.validate())?;
        Ok(cfg)
    }

    pub fn representation(&self) -> CliResult<Option<Representation>> {
        match self.finetune.representation.as_deref() {
            None => Ok(None),
            Some("latent") => Ok(Some(Representation::Latent)),
            Some("context") => Ok(Some(Representation::Context)),
            Some(other) => Err(bad("finetune.representation", format!("'{other}' is not latent or context"))),
        }
    }

    pub fn task_spec(&self, i: usize) -> CliResult<TaskSpec> {
        let t = &self.tasks[i];
        let key = |k: &str| format!("task[{i}].{k}");
        let kind: TaskKind = wrap(&key("kind"), t.kind.parse())?;
        let mut spec = TaskSpec::new(&t.name, kind, t.labels.clone());
        spec.multi_label = t.multi_label;
        if let Some(m) = &t.metric {
            spec.metric = wrap::<MetricKind>(&key("metric"), m.parse())?;
        }
        wrap(&key("labels"), spec.validate())?;
        Ok(spec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base(extra: &str) -> String {
        format!("output_dir = \"out\"\n{extra}")
    }

    #[test]
    fn defaults_match_desk_settings() {
        let cfg = RunConfig::from_toml(&base(""), Path::new("/tmp"), None).unwrap();
        assert_eq!(cfg.train_config().unwrap(), TrainConfig::desk());
        assert_eq!(cfg.model_config(50), ModelConfig::desk(50));
        assert_eq!(cfg.finetune_config().unwrap(), FinetuneConfig::desk());
        assert_eq!(cfg.output_dir, Path::new("/tmp/out"));
    }

    #[test]
    fn unknown_keys_are_rejected_by_name() {
        let err = RunConfig::from_toml(&base("[pretrain]\nlearning_rat = 1.0\n"), Path::new("/tmp"), None).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("learning_rat"), "{err}");
    }

    #[test]
    fn missing_corpus_names_the_path() {
        let err = RunConfig::from_toml(&base("[data]\ncorpus = \"nope.txt\"\n"), Path::new("/tmp/x"), None).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("/tmp/x/nope.txt"), "{err}");
    }

    #[test]
    fn invalid_values_name_the_key() {
        for (extra, key) in [
            ("[pretrain]\nmasking_ratio = 1.5\n", "pretrain"),
            ("[pretrain]\nobjective = \"bert\"\n", "pretrain.objective"),
            ("[pretrain]\nfreeze = [\"lm_head\"]\n", "pretrain.freeze"),
            ("[data]\ncorpus_fraction = 0.0\n", "data.corpus_fraction"),
            ("[finetune]\nrepresentation = \"raw\"\n", "finetune.representation"),
        ] {
            let err = RunConfig::from_toml(&base(extra), Path::new("/tmp"), None).unwrap_err();
            assert!(err.to_string().contains(&format!("'{key}'")), "{extra}: {err}");
        }
    }

    #[test]
    fn output_root_applies_to_relative_output() {
        let cfg = RunConfig::from_toml(&base(""), Path::new("/tmp"), Some(Path::new("/srv/runs"))).unwrap();
        assert_eq!(cfg.output_dir, Path::new("/srv/runs/out"));
    }

    #[test]
    fn resolved_config_round_trips() {
        let text = base("seed = 7\n[pretrain]\nobjective = \"mae\"\nmasking_ratio = 0.3\n[cul]\nbn_epsilon = 1e-20\n");
        let cfg = RunConfig::from_toml(&text, Path::new("/tmp"), None).unwrap();
        let again = RunConfig::from_toml(&cfg.to_toml(), Path::new("/elsewhere"), Some(Path::new("/other"))).unwrap();
        assert_eq!(again, cfg);
        assert_eq!(again.to_toml(), cfg.to_toml());
    }
}

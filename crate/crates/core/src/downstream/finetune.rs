//! Task heads on top of a pretrained encoder (+ mean head), trained end to
//! end with Adam under a linear warmup / linear decay schedule.

use serde::{Deserialize, Serialize};

use crate::corpus::{collate, MaskedBatch, MaskedSequence, TokenSequence, Vocabulary};
use crate::cul::{Cul, CulConfig};
use crate::diffcore::{Graph, Mode, ParamStore, Rng, RunningStats, Stream, Tensor, Var};
use crate::downstream::metrics::{compute_metrics, Metrics};
use crate::downstream::tasks::{Example, TaskData};
use crate::downstream::{TaskKind, TaskSpec};
use crate::encoder::{Encoder, EncoderConfig, EncoderInput, INIT_STD};
use crate::error::{Error, Result};
use crate::model::{Model, Objective};
use crate::objective::predict_token;
use crate::pretrain::{adam_step, AdamConfig, AdamState};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_len: usize,
    /// Fraction of all optimizer steps spent ramping the rate up from 0.
    pub warmup_ratio: f64,
    pub adam: AdamConfig,
}

impl FinetuneConfig {
    /// Ten epochs, batch 32, length 128, warmup 0.06; the rate is raised
    /// from 5e-5 to 4e-3 for desk-sized models trained on few examples.
    pub fn desk() -> Self {
        FinetuneConfig {
            epochs: 10,
            learning_rate: 4e-3,
            batch_size: 32,
            max_len: 128,
            warmup_ratio: 0.06,
            adam: AdamConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config(format!("learning_rate = {} must be > 0", self.learning_rate)));
        }
        if self.batch_size == 0 || self.max_len < 2 {
            return Err(Error::Config("batch_size must be >= 1 and maximum_length >= 2".into()));
        }
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return Err(Error::Config(format!("warmup_ratio = {} outside [0, 1)", self.warmup_ratio)));
        }
        self.adam.validate()
    }

    /// Rate of optimizer step `t` (1-based) out of `total`: linear ramp over
    /// the first `ceil(warmup_ratio * total)` steps, then linear decay that
    /// reaches `1 / (total - warmup + 1)` of the peak on the last step.
    pub fn rate_at(&self, t: usize, total: usize) -> f64 {
        let warm = ((self.warmup_ratio * total as f64).ceil() as usize).max(1);
        let frac = if t <= warm {
            t as f64 / warm as f64
        } else {
            (total - t + 1) as f64 / (total - warm + 1) as f64
        };
        self.learning_rate * frac
    }
}

/// What the task head reads.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Representation {
    /// Mean head of the CUL on top of the encoder.
    Latent,
    /// Encoder output directly.
    Context,
}

impl Representation {
    /// The mean head is only trained by the VarMAE objective.
    pub fn for_objective(objective: Objective) -> Self {
        match objective {
            Objective::VarMae => Representation::Latent,
            Objective::Mae => Representation::Context,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TaskModel {
    pub spec: TaskSpec,
    pub encoder: EncoderConfig,
    pub cul: CulConfig,
    pub representation: Representation,
    /// Embedding, encoder, mean-head (if used) and `task.*` parameters.
    pub params: ParamStore,
    /// Frozen batch-norm statistics of the mean head.
    pub bn: RunningStats,
}

impl TaskModel {
    /// Copies the needed pretrained parameters and draws a fresh task head.
    pub fn from_pretrained(model: &Model, representation: Representation, spec: &TaskSpec, init: &mut Rng) -> Result<Self> {
        spec.validate()?;
        let mut params = ParamStore::new();
        params.copy_prefix_from(&model.params, "embedding.");
        params.copy_prefix_from(&model.params, "encoder.");
        if representation == Representation::Latent {
            params.copy_prefix_from(&model.params, "cul.mu.");
        }
        params.unfreeze_all();
        let width = model.config.encoder.hidden_size;
        params.insert("task.weight", Tensor::randn(&[spec.num_classes(), width], INIT_STD, init));
        params.insert("task.bias", Tensor::zeros(&[spec.num_classes()]));
        Ok(TaskModel {
            spec: spec.clone(),
            encoder: model.config.encoder.clone(),
            cul: model.config.cul.clone(),
            representation,
            params,
            bn: model.bn.clone(),
        })
    }

    fn encode(&self, vocab: &Vocabulary, ex: &Example) -> Result<TokenSequence> {
        match &ex.pair {
            Some(b) if self.spec.kind == TaskKind::PairMatch => vocab.encode_pair(&ex.text, b, ex.line),
            _ => vocab.encode(&ex.text, ex.line),
        }
    }

    fn batch(&self, vocab: &Vocabulary, examples: &[&Example], max_len: usize) -> Result<MaskedBatch> {
        let seqs = examples
            .iter()
            .map(|ex| self.encode(vocab, ex).map(|s| MaskedSequence::unmasked(&s)))
            .collect::<Result<Vec<_>>>()?;
        collate(&seqs, max_len)
    }

    /// Flat rows the head reads: `[CLS]` per example, or every word position
    /// for token labeling.
    fn rows(&self, examples: &[&Example], batch: &MaskedBatch) -> Vec<usize> {
        match self.spec.kind {
            TaskKind::Cls | TaskKind::PairMatch => (0..examples.len()).map(|b| b * batch.max_len).collect(),
            TaskKind::TokenLabeling => examples
                .iter()
                .enumerate()
                .flat_map(|(b, ex)| (1..=ex.target.len()).map(move |j| b * batch.max_len + j))
                .collect(),
        }
    }

    /// Task logits `[rows, classes]`.
    fn logits(
        &mut self,
        g: &mut Graph,
        vocab: &Vocabulary,
        examples: &[&Example],
        max_len: usize,
        mode: Mode,
        dropout: &mut Rng,
    ) -> Result<Var> {
        let batch = self.batch(vocab, examples, max_len)?;
        let encoder = Encoder::new(self.encoder.clone())?;
        let ctx = encoder.forward(g, &self.params, &EncoderInput::from_batch(&batch), mode, dropout)?;
        let all = ctx.rows(g)?;
        let rows = g.gather_rows(all, &self.rows(examples, &batch))?;
        let rep = match self.representation {
            Representation::Context => rows,
            Representation::Latent => Cul::new(self.cul.clone())?.posterior_mean(g, &self.params, rows, Mode::Eval, &mut self.bn)?,
        };
        let w = g.param(&self.params, "task.weight")?;
        let b = g.param(&self.params, "task.bias")?;
        let wt = g.transpose(w, &[1, 0])?;
        let y = g.matmul(rep, wt)?;
        g.add(y, b)
    }

    fn loss(&self, g: &mut Graph, logits: Var, examples: &[&Example]) -> Result<Var> {
        let c = self.spec.num_classes();
        if self.spec.multi_label {
            // binary cross-entropy with logits: softplus(x) - y x
            let mut y = vec![0.0; examples.len() * c];
            for (i, ex) in examples.iter().enumerate() {
                for &l in &ex.target {
                    y[i * c + l] = 1.0;
                }
            }
            let y = g.constant(Tensor::new(vec![examples.len(), c], y)?);
            let sp = g.softplus(logits)?;
            let xy = g.mul(logits, y)?;
            let per = g.sub(sp, xy)?;
            return g.mean(per);
        }
        let targets: Vec<usize> = match self.spec.kind {
            TaskKind::TokenLabeling => examples.iter().flat_map(|ex| ex.target.iter().copied()).collect(),
            _ => examples.iter().map(|ex| ex.target[0]).collect(),
        };
        let ce = g.cross_entropy(logits, &targets)?;
        g.mean(ce)
    }

    fn decode(&self, logits: &[f64], examples: &[&Example]) -> Vec<Vec<usize>> {
        let c = self.spec.num_classes();
        let mut rows = logits.chunks(c);
        examples
            .iter()
            .map(|ex| match self.spec.kind {
                TaskKind::TokenLabeling => (0..ex.target.len()).map(|_| predict_token(rows.next().expect("row per token"))).collect(),
                _ => {
                    let r = rows.next().expect("row per example");
                    if self.spec.multi_label {
                        (0..c).filter(|&l| r[l] > 0.0).collect()
                    } else {
                        vec![predict_token(r)]
                    }
                }
            })
            .collect()
    }
}

/// Eval-mode predictions, in the same target encoding as [`Example::target`].
pub fn predict(model: &mut TaskModel, vocab: &Vocabulary, examples: &[Example], batch_size: usize, max_len: usize) -> Result<Vec<Vec<usize>>> {
    let mut unused = Rng::new(0, Stream::Dropout);
    let mut out = Vec::with_capacity(examples.len());
    for chunk in examples.chunks(batch_size.max(1)) {
        let refs: Vec<&Example> = chunk.iter().collect();
        let mut g = Graph::new();
        let logits = model.logits(&mut g, vocab, &refs, max_len, Mode::Eval, &mut unused)?;
        out.extend(model.decode(g.data(logits), &refs));
    }
    Ok(out)
}

pub fn evaluate(model: &mut TaskModel, vocab: &Vocabulary, examples: &[Example], batch_size: usize, max_len: usize) -> Result<Metrics> {
    let pred = predict(model, vocab, examples, batch_size, max_len)?;
    let gold: Vec<Vec<usize>> = examples.iter().map(|e| e.target.clone()).collect();
    compute_metrics(&model.spec, &gold, &pred)
}

#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneOutcome {
    pub dev: Metrics,
    pub test: Metrics,
    pub steps: usize,
    /// Mean training loss of each epoch.
    pub epoch_losses: Vec<f64>,
}

/// Trains `model` on `data.train` (all parameters, no freezing) and scores
/// dev and test. `seed` drives shuffling and dropout.
pub fn finetune(model: &mut TaskModel, vocab: &Vocabulary, data: &TaskData, cfg: &FinetuneConfig, seed: u64) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(Error::Empty("task has no training examples".into()));
    }
    let mut shuffle = Rng::new(seed, Stream::Data);
    let mut dropout = Rng::new(seed, Stream::Dropout);
    let per_epoch = data.train.len().div_ceil(cfg.batch_size);
    let total = per_epoch * cfg.epochs;
    let mut adam = AdamState::default();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for _ in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        shuffle.shuffle(&mut order);
        let mut sum = 0.0;
        for ids in order.chunks(cfg.batch_size) {
            step += 1;
            let refs: Vec<&Example> = ids.iter().map(|&i| &data.train[i]).collect();
            let mut g = Graph::new();
            let logits = model.logits(&mut g, vocab, &refs, cfg.max_len, Mode::Train, &mut dropout)?;
            let loss = model.loss(&mut g, logits, &refs)?;
            sum += g.item(loss)?;
            g.backward(loss)?;
            model.params.zero_grads();
            model.params.accumulate_grads(&g)?;
            adam_step(&mut model.params, &mut adam, &cfg.adam, cfg.rate_at(step, total))?;
        }
        epoch_losses.push(sum / per_epoch as f64);
    }
    Ok(FinetuneOutcome {
        dev: evaluate(model, vocab, &data.dev, cfg.batch_size, cfg.max_len)?,
        test: evaluate(model, vocab, &data.test, cfg.batch_size, cfg.max_len)?,
        steps: step,
        epoch_losses,
    })
}

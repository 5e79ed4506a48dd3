//! LM head, token prediction and the two pretraining losses.
//!
//! Word tokens (everything except `[CLS]`, `[SEP]` and padding) are routed to
//! exactly one branch: the selected positions of the masking procedure form
//! the masked branch and predict their original ids; every other word token
//! forms the unmasked branch and predicts its own id. For a sequence with `k`
//! masked of `n` word tokens the loss is
//!
//! ```text
//! L_s = k/n * (CE_m + lambda_m * KL_m) + (n-k)/n * (CE_u + lambda_u * KL_u)
//! ```
//!
//! with per-branch means, and the batch loss is the mean of `L_s`.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::corpus::MaskedBatch;
use crate::diffcore::{Graph, ParamStore, Rng, Tensor, Var};
use crate::encoder::INIT_STD;
use crate::error::{Error, Result};

pub const DEFAULT_LAMBDA: f64 = 10.0;

pub fn init_lm_head(store: &mut ParamStore, vocab_size: usize, latent_size: usize, rng: &mut Rng) {
    store.insert("lm_head.weight", Tensor::randn(&[vocab_size, latent_size], INIT_STD, rng));
    store.insert("lm_head.bias", Tensor::zeros(&[vocab_size]));
}

/// `x W^T + b` for rows `x: [n, latent]`, giving `[n, vocab]`.
pub fn lm_logits(g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
    let w = g.param(store, "lm_head.weight")?;
    let b = g.param(store, "lm_head.bias")?;
    let (xs, ws) = (g.shape(x).to_vec(), g.shape(w).to_vec());
    if xs.len() != 2 || xs[1] != ws[1] {
        return Err(Error::shape("lm_logits", &[0, ws[1]], &xs));
    }
    let wt = g.transpose(w, &[1, 0])?;
    let y = g.matmul(x, wt)?;
    g.add(y, b)
}

/// Argmax; ties go to the lowest id.
pub fn predict_token(logits: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

/// Flat `batch * len` row indices and targets of both branches, ordered by
/// sequence then position.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BranchRouting {
    pub masked_rows: Vec<usize>,
    pub masked_targets: Vec<usize>,
    pub masked_seq: Vec<usize>,
    pub unmasked_rows: Vec<usize>,
    pub unmasked_targets: Vec<usize>,
    pub unmasked_seq: Vec<usize>,
    /// Word tokens per sequence.
    pub n: Vec<usize>,
    /// Masked tokens per sequence.
    pub k: Vec<usize>,
}

impl BranchRouting {
    pub fn num_sequences(&self) -> usize {
        self.n.len()
    }

    /// Masked rows followed by unmasked rows.
    pub fn all_rows(&self) -> Vec<usize> {
        self.masked_rows.iter().chain(&self.unmasked_rows).copied().collect()
    }
}

pub fn route(batch: &MaskedBatch) -> Result<BranchRouting> {
    let len = batch.max_len;
    let mut r = BranchRouting {
        masked_rows: Vec::new(),
        masked_targets: Vec::new(),
        masked_seq: Vec::new(),
        unmasked_rows: Vec::new(),
        unmasked_targets: Vec::new(),
        unmasked_seq: Vec::new(),
        n: vec![0; batch.batch],
        k: vec![0; batch.batch],
    };
    for s in 0..batch.batch {
        let mut selected = BTreeSet::new();
        for &p in &batch.mask_positions[s] {
            if p >= len || !batch.is_word(s * len + p) {
                return Err(Error::Contract(format!(
                    "masked position {p} of sequence {s} is not a word token"
                )));
            }
            if !selected.insert(p) {
                return Err(Error::Contract(format!("position {p} of sequence {s} assigned twice")));
            }
        }
        let targets: BTreeMap<usize, usize> = batch.mask_positions[s]
            .iter()
            .copied()
            .zip(batch.targets[s].iter().copied())
            .collect();
        for p in 0..len {
            let flat = s * len + p;
            if !batch.is_word(flat) {
                continue;
            }
            r.n[s] += 1;
            if let Some(&t) = targets.get(&p) {
                r.k[s] += 1;
                r.masked_rows.push(flat);
                r.masked_targets.push(t);
                r.masked_seq.push(s);
            } else {
                r.unmasked_rows.push(flat);
                r.unmasked_targets.push(batch.original_ids[flat]);
                r.unmasked_seq.push(s);
            }
        }
    }
    Ok(r)
}

/// How the two branch terms of a sequence are weighted.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, Default)]
pub enum BranchWeighting {
    /// `k/n` and `(n-k)/n`.
    #[default]
    TokenFraction,
    Fixed(f64, f64),
}

/// Logits and per-token KL of one branch, rows aligned with its routing.
#[derive(Clone, Copy, Debug)]
pub struct BranchOutputs {
    pub logits: Var,
    pub kl: Var,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
pub struct LossBreakdown {
    pub total: f64,
    pub recon_masked: f64,
    pub recon_unmasked: f64,
    pub kl_masked: f64,
    pub kl_unmasked: f64,
    pub weight_masked: f64,
    pub weight_unmasked: f64,
    pub lambda_masked: f64,
    pub lambda_unmasked: f64,
    pub masked_accuracy: f64,
    /// Mean KL over all routed tokens.
    pub kl_per_token: f64,
    /// `(weight_masked, weight_unmasked)` of each sequence.
    pub sequence_weights: Vec<(f64, f64)>,
}

impl LossBreakdown {
    /// The total rebuilt from the reported parts.
    pub fn recompose(&self) -> f64 {
        self.weight_masked * (self.recon_masked + self.lambda_masked * self.kl_masked)
            + self.weight_unmasked * (self.recon_unmasked + self.lambda_unmasked * self.kl_unmasked)
    }
}

fn branch_weights(routing: &BranchRouting, weighting: BranchWeighting, s: usize) -> (f64, f64) {
    let (n, k) = (routing.n[s], routing.k[s]);
    match weighting {
        BranchWeighting::TokenFraction => {
            let wm = k as f64 / n as f64;
            (wm, (n - k) as f64 / n as f64)
        }
        BranchWeighting::Fixed(wm, wu) => (wm, wu),
    }
}

fn accuracy(g: &Graph, logits: Var, targets: &[usize]) -> (usize, usize) {
    let d = g.data(logits);
    if targets.is_empty() {
        return (0, 0);
    }
    let v = d.len() / targets.len();
    let hits = targets
        .iter()
        .enumerate()
        .filter(|(r, &t)| predict_token(&d[r * v..(r + 1) * v]) == t)
        .count();
    (hits, targets.len())
}

struct BranchTerm {
    loss: Option<Var>,
    /// Per-sequence mean CE and KL.
    ce: Vec<f64>,
    kl: Vec<f64>,
    kl_sum: f64,
}

#[allow(clippy::too_many_arguments)]
fn branch_term(
    g: &mut Graph,
    out: Option<&BranchOutputs>,
    targets: &[usize],
    seq: &[usize],
    counts: &[usize],
    weights: &[f64],
    lambda: f64,
    num_seq: f64,
) -> Result<BranchTerm> {
    let s_count = counts.len();
    let mut term = BranchTerm {
        loss: None,
        ce: vec![0.0; s_count],
        kl: vec![0.0; s_count],
        kl_sum: 0.0,
    };
    if targets.is_empty() {
        return Ok(term);
    }
    let out = out.ok_or_else(|| Error::Contract("branch has tokens but no outputs".into()))?;
    if g.shape(out.kl) != [targets.len()] {
        return Err(Error::shape("varmae_loss", &[targets.len()], g.shape(out.kl)));
    }
    let ce = g.cross_entropy(out.logits, targets)?;
    let row_w: Vec<f64> = seq
        .iter()
        .map(|&s| weights[s] / (num_seq * counts[s] as f64))
        .collect();
    let kl_w: Vec<f64> = row_w.iter().map(|w| w * lambda).collect();
    for (r, &s) in seq.iter().enumerate() {
        term.ce[s] += g.data(ce)[r] / counts[s] as f64;
        term.kl[s] += g.data(out.kl)[r] / counts[s] as f64;
        term.kl_sum += g.data(out.kl)[r];
    }
    let a = g.weighted_sum(ce, &row_w)?;
    let b = g.weighted_sum(out.kl, &kl_w)?;
    term.loss = Some(g.add(a, b)?);
    Ok(term)
}

/// Weighted reconstruction + KL loss. `masked`/`unmasked` may be `None` only
/// when the branch has no tokens. Returns the scalar loss node and its parts.
pub fn varmae_loss(
    g: &mut Graph,
    routing: &BranchRouting,
    masked: Option<&BranchOutputs>,
    unmasked: Option<&BranchOutputs>,
    lambda_masked: f64,
    lambda_unmasked: f64,
    weighting: BranchWeighting,
) -> Result<(Var, LossBreakdown)> {
    if !(lambda_masked >= 0.0 && lambda_unmasked >= 0.0) {
        return Err(Error::invalid("varmae_loss", "lambdas must be >= 0"));
    }
    let live: Vec<usize> = (0..routing.num_sequences()).filter(|&s| routing.n[s] > 0).collect();
    if live.is_empty() {
        return Err(Error::Empty("batch has no word tokens".into()));
    }
    let num_seq = live.len() as f64;
    let mut wm = vec![0.0; routing.num_sequences()];
    let mut wu = vec![0.0; routing.num_sequences()];
    for &s in &live {
        (wm[s], wu[s]) = branch_weights(routing, weighting, s);
    }
    let m = branch_term(
        g,
        masked,
        &routing.masked_targets,
        &routing.masked_seq,
        &routing.k,
        &wm,
        lambda_masked,
        num_seq,
    )?;
    let u_counts: Vec<usize> = routing.n.iter().zip(&routing.k).map(|(n, k)| n - k).collect();
    let u = branch_term(
        g,
        unmasked,
        &routing.unmasked_targets,
        &routing.unmasked_seq,
        &u_counts,
        &wu,
        lambda_unmasked,
        num_seq,
    )?;
    let loss = match (m.loss, u.loss) {
        (Some(a), Some(b)) => g.add(a, b)?,
        (Some(a), None) | (None, Some(a)) => a,
        (None, None) => g.constant(Tensor::scalar(0.0)),
    };

    let avg = |w: &[f64], v: &[f64]| -> (f64, f64) {
        let wsum: f64 = live.iter().map(|&s| w[s]).sum();
        let mean_w = wsum / num_seq;
        if wsum == 0.0 {
            return (mean_w, 0.0);
        }
        (mean_w, live.iter().map(|&s| w[s] * v[s]).sum::<f64>() / wsum)
    };
    let (weight_masked, recon_masked) = avg(&wm, &m.ce);
    let (_, kl_masked) = avg(&wm, &m.kl);
    let (weight_unmasked, recon_unmasked) = avg(&wu, &u.ce);
    let (_, kl_unmasked) = avg(&wu, &u.kl);
    let (hits, total_m) = match masked {
        Some(o) => accuracy(g, o.logits, &routing.masked_targets),
        None => (0, 0),
    };
    let routed = routing.masked_rows.len() + routing.unmasked_rows.len();
    let breakdown = LossBreakdown {
        total: g.item(loss)?,
        recon_masked,
        recon_unmasked,
        kl_masked,
        kl_unmasked,
        weight_masked,
        weight_unmasked,
        lambda_masked,
        lambda_unmasked,
        masked_accuracy: if total_m == 0 { 0.0 } else { hits as f64 / total_m as f64 },
        kl_per_token: (m.kl_sum + u.kl_sum) / routed as f64,
        sequence_weights: live.iter().map(|&s| (wm[s], wu[s])).collect(),
    };
    Ok((loss, breakdown))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaeBreakdown {
    pub loss: f64,
    pub masked_accuracy: f64,
}

/// Masked-LM cross entropy over the masked rows (`logits: [masked, vocab]`,
/// aligned with `routing.masked_rows`): the mean over sequences of each
/// sequence's mean masked-token CE.
pub fn mae_loss(g: &mut Graph, routing: &BranchRouting, logits: Var) -> Result<(Var, MaeBreakdown)> {
    if routing.masked_targets.is_empty() {
        return Err(Error::Empty("batch has no masked positions".into()));
    }
    let num_seq = routing.k.iter().filter(|&&k| k > 0).count() as f64;
    let ce = g.cross_entropy(logits, &routing.masked_targets)?;
    let w: Vec<f64> = routing
        .masked_seq
        .iter()
        .map(|&s| 1.0 / (num_seq * routing.k[s] as f64))
        .collect();
    let loss = g.weighted_sum(ce, &w)?;
    let (hits, n) = accuracy(g, logits, &routing.masked_targets);
    Ok((
        loss,
        MaeBreakdown {
            loss: g.item(loss)?,
            masked_accuracy: hits as f64 / n as f64,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{collate, MaskedSequence, CLS, SEP};
    use crate::diffcore::Stream;

    fn fixture() -> MaskedBatch {
        // [CLS] 7 8 9 [SEP] / [CLS] 5 6
        let a = MaskedSequence {
            original: vec![CLS, 7, 8, 9, SEP],
            input_ids: vec![CLS, 1, 8, 9, SEP],
            positions: vec![1],
            targets: vec![7],
            kinds: vec![crate::corpus::Corruption::MaskToken],
            line: 1,
        };
        let b = MaskedSequence {
            original: vec![CLS, 5, 6],
            input_ids: vec![CLS, 5, 1],
            positions: vec![2],
            targets: vec![6],
            kinds: vec![crate::corpus::Corruption::MaskToken],
            line: 2,
        };
        collate(&[a, b], 8).unwrap()
    }

    #[test]
    fn routing_partitions_word_tokens() {
        let r = route(&fixture()).unwrap();
        assert_eq!(r.masked_rows, vec![1, 7]);
        assert_eq!(r.masked_targets, vec![7, 6]);
        assert_eq!(r.unmasked_rows, vec![2, 3, 6]);
        assert_eq!(r.unmasked_targets, vec![8, 9, 5]);
        assert_eq!(r.n, vec![3, 2]);
        assert_eq!(r.k, vec![1, 1]);
    }

    #[test]
    fn duplicate_position_is_contract_error() {
        let mut b = fixture();
        b.mask_positions[0] = vec![1, 1];
        b.targets[0] = vec![7, 7];
        assert!(matches!(route(&b), Err(Error::Contract(_))));
    }

    #[test]
    fn special_position_is_contract_error() {
        let mut b = fixture();
        b.mask_positions[0] = vec![0];
        assert!(matches!(route(&b), Err(Error::Contract(_))));
    }

    #[test]
    fn predict_token_examples() {
        assert_eq!(predict_token(&[0.0, 3.0, 1.0]), 1);
        assert_eq!(predict_token(&[2.0, 2.0, 0.0]), 0);
    }

    #[test]
    fn zero_latent_gives_bias() {
        let mut store = ParamStore::new();
        init_lm_head(&mut store, 6, 3, &mut Rng::new(0, Stream::Init));
        store.get_mut("lm_head.bias").unwrap().tensor = Tensor::from_vec(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let mut g = Graph::new();
        let z = g.constant(Tensor::zeros(&[2, 3]));
        let l = lm_logits(&mut g, &store, z).unwrap();
        assert_eq!(g.data(l), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let bad = g.constant(Tensor::zeros(&[2, 4]));
        assert!(lm_logits(&mut g, &store, bad).is_err());
    }

    #[test]
    fn uniform_logits_mae_is_log_vocab() {
        let r = route(&fixture()).unwrap();
        let mut g = Graph::new();
        let logits = g.constant(Tensor::zeros(&[2, 100]));
        let (_, b) = mae_loss(&mut g, &r, logits).unwrap();
        assert!((b.loss - 100f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn perfect_logits_mae() {
        let r = route(&fixture()).unwrap();
        let mut data = vec![0.0; 2 * 10];
        data[7] = 1e3;
        data[10 + 6] = 1e3;
        let mut g = Graph::new();
        let logits = g.constant(Tensor::new(vec![2, 10], data).unwrap());
        let (_, b) = mae_loss(&mut g, &r, logits).unwrap();
        assert!(b.loss < 1e-3);
        assert_eq!(b.masked_accuracy, 1.0);
    }

    #[test]
    fn weights_sum_to_one_and_total_recomposes() {
        let r = route(&fixture()).unwrap();
        let mut rng = Rng::new(3, Stream::Data);
        let mut g = Graph::new();
        let lm = g.constant(Tensor::randn(&[2, 12], 1.0, &mut rng));
        let km = g.constant(Tensor::from_vec(vec![0.3, 0.7]));
        let lu = g.constant(Tensor::randn(&[3, 12], 1.0, &mut rng));
        let ku = g.constant(Tensor::from_vec(vec![0.1, 0.2, 0.4]));
        let m = BranchOutputs { logits: lm, kl: km };
        let u = BranchOutputs { logits: lu, kl: ku };
        let (_, b) = varmae_loss(&mut g, &r, Some(&m), Some(&u), 10.0, 10.0, BranchWeighting::TokenFraction).unwrap();
        for (wm, wu) in &b.sequence_weights {
            assert_eq!(wm + wu, 1.0);
        }
        assert_eq!(b.sequence_weights, vec![(1.0 / 3.0, 2.0 / 3.0), (0.5, 0.5)]);
        assert!((b.total - b.recompose()).abs() < 1e-10);
    }
}

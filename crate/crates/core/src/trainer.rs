//! Training loop: CE and prefix-aware objectives, AdamW with warmup + cosine
//! decay, early stopping on validation NDCG, one- and two-stage schedules.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{sample_negatives, Example, InteractionDataset, TrainPairs};
use crate::decoder::CodeTrie;
use crate::error::{Error, Result};
use crate::evaluation::evaluate_examples;
use crate::losses::{ce_terms, pairwise_terms, pointwise_terms};
use crate::model::{init_params, CandidateTree, Gradients, ModelParams};
use crate::tokenizer::TokenizedCatalog;
use crate::weighting::PrefixWeights;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    #[default]
    Ce,
    ApaoPointwise,
    ApaoPairwise,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    #[default]
    OneStage,
    TwoStage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: LossMode,
    pub beta: f64,
    pub eta: f64,
    pub negatives: usize,
    pub lr: f64,
    pub warmup_fraction: f64,
    pub epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub grad_accum: usize,
    pub seed: u64,
    pub stage: Stage,
    pub weight_decay: f64,
    pub train_pairs: TrainPairs,
    pub dim: usize,
    pub valid_beam: usize,
    pub valid_cutoff: usize,
    /// evaluate early stopping on at most this many validation users
    pub valid_limit: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: LossMode::Ce,
            beta: 0.0,
            eta: 0.0,
            negatives: 100,
            lr: 5e-4,
            warmup_fraction: 0.01,
            epochs: 200,
            patience: 20,
            batch_size: 128,
            grad_accum: 8,
            seed: 0,
            stage: Stage::OneStage,
            weight_decay: 0.01,
            train_pairs: TrainPairs::All,
            dim: 32,
            valid_beam: 20,
            valid_cutoff: 10,
            valid_limit: None,
        }
    }
}

impl TrainConfig {
    /// Defaults with the per-mode prefix weight `beta` and update rate `eta`.
    pub fn for_mode(mode: LossMode) -> Self {
        let (beta, eta) = default_beta_eta(mode);
        Self { mode, beta, eta, ..Self::default() }
    }

    pub fn effective_batch(&self) -> usize {
        self.batch_size * self.grad_accum
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: String| Err(Error::Config(format!("trainer.{field}: {msg}")));
        if !(self.beta >= 0.0) || !self.beta.is_finite() {
            return bad("beta", format!("must be finite and >= 0, got {}", self.beta));
        }
        if !(self.eta >= 0.0) || !self.eta.is_finite() {
            return bad("eta", format!("must be finite and >= 0, got {}", self.eta));
        }
        if self.mode == LossMode::ApaoPairwise && self.negatives == 0 {
            return bad("negatives", "must be >= 1 in pairwise mode".into());
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return bad("lr", format!("must be positive, got {}", self.lr));
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return bad("warmup_fraction", format!("must lie in [0, 1], got {}", self.warmup_fraction));
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay", format!("must be >= 0, got {}", self.weight_decay));
        }
        for (field, v) in [
            ("epochs", self.epochs),
            ("patience", self.patience),
            ("batch_size", self.batch_size),
            ("grad_accum", self.grad_accum),
            ("dim", self.dim),
            ("valid_beam", self.valid_beam),
            ("valid_cutoff", self.valid_cutoff),
        ] {
            if v == 0 {
                return bad(field, "must be >= 1".into());
            }
        }
        if self.stage == Stage::TwoStage && self.mode == LossMode::Ce {
            return bad("stage", "two_stage needs a prefix-aware mode".into());
        }
        Ok(())
    }
}

/// Per-mode `(beta, eta)` defaults.
pub fn default_beta_eta(mode: LossMode) -> (f64, f64) {
    match mode {
        LossMode::Ce => (0.0, 0.0),
        LossMode::ApaoPointwise => (0.3, 1e-4),
        LossMode::ApaoPairwise => (0.2, 3e-5),
    }
}

/// `base * min(step / warmup, 0.5 (1 + cos(pi * progress)))`, `step` counted from 1.
pub fn learning_rate(base: f64, step: usize, total_steps: usize, warmup_fraction: f64) -> f64 {
    let warmup = ((warmup_fraction * total_steps as f64).ceil() as usize).max(1);
    let ramp = step as f64 / warmup as f64;
    let progress = if total_steps > warmup {
        ((step as f64 - warmup as f64) / (total_steps - warmup) as f64).clamp(0.0, 1.0)
    } else {
        0.0
    };
    base * ramp.min(0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

/// Adam moments with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: ModelParams,
    v: ModelParams,
    t: i32,
}

impl AdamW {
    pub fn new(params: &ModelParams, weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> usize {
        self.t as usize
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &ModelParams, lr: f64) {
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        let decay = 1.0 - lr * self.weight_decay;
        let grads = grads.tensors();
        for (((p, g), m), v) in params
            .tensors_mut()
            .into_iter()
            .zip(grads.iter())
            .zip(self.m.tensors_mut())
            .zip(self.v.tensors_mut())
        {
            for i in 0..p.len() {
                let gi = g.data[i];
                m[i] = b1 * m[i] + (1.0 - b1) * gi;
                v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                p[i] = p[i] * decay - lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepRecord {
    pub stage: usize,
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub total: f64,
    pub ce: f64,
    /// per-prefix losses `L_1..L_T`; pointwise values in CE mode, for reference
    pub prefix: Vec<f64>,
    pub w: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: usize,
    pub mean_total: f64,
    pub valid_ndcg: f64,
    pub train_seconds: f64,
    pub valid_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageManifest {
    pub name: String,
    pub mode: LossMode,
    pub include_ce: bool,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_valid_ndcg: f64,
    pub stopped_early: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunManifest {
    pub config: TrainConfig,
    pub config_digest: String,
    pub prefix_loss_reduction: String,
    pub train_examples: usize,
    pub valid_examples: usize,
    pub num_parameters: usize,
    pub stages: Vec<StageManifest>,
    pub final_weights: Vec<f64>,
    pub checkpoint: Option<String>,
}

pub struct TrainOutcome {
    pub params: ModelParams,
    pub manifest: RunManifest,
    pub steps: Vec<StepRecord>,
}

struct ExampleTerms {
    tree: CandidateTree,
    ce: f64,
    ce_grads: Vec<f64>,
    prefix: Vec<f64>,
    /// `[m][candidate][t]`
    prefix_grads: Vec<Vec<Vec<f64>>>,
}

const CHUNK: usize = 16;

impl ExampleTerms {
    /// d(objective)/d(token score) per candidate and step, divided by `scale`.
    /// `prefix_beta` is `None` when the prefix term is inactive.
    fn score_coefficients(&self, include_ce: bool, prefix_beta: Option<f64>, w: &[f64], scale: f64) -> Vec<Vec<f64>> {
        let depth = self.ce_grads.len();
        (0..self.tree.num_candidates())
            .map(|c| {
                (0..depth)
                    .map(|s| {
                        let base = if include_ce && c == 0 { self.ce_grads[s] } else { 0.0 };
                        let g = match prefix_beta {
                            Some(beta) => {
                                let mut acc = 0.0;
                                for m in 0..depth {
                                    if let Some(gm) = self.prefix_grads[m].get(c) {
                                        acc += w[m] * gm[s];
                                    }
                                }
                                base + beta * acc
                            }
                            None => base,
                        };
                        g / scale
                    })
                    .collect()
            })
            .collect()
    }

    fn objective(&self, include_ce: bool, prefix_beta: Option<f64>, w: &[f64]) -> f64 {
        let ce = if include_ce { self.ce } else { 0.0 };
        match prefix_beta {
            Some(beta) => ce + beta * w.iter().zip(&self.prefix).map(|(a, l)| a * l).sum::<f64>(),
            None => ce,
        }
    }
}

/// Single-example training objective at fixed prefix weights `w` and its
/// gradient, through the same path an optimizer step uses. CE mode ignores
/// `beta` and `w`.
pub fn example_objective(
    params: &ModelParams,
    ex: &Example,
    negatives: &[u32],
    catalog: &TokenizedCatalog,
    mode: LossMode,
    beta: f64,
    w: &[f64],
) -> Result<(f64, Gradients)> {
    if w.len() != params.depth() {
        return Err(Error::Contract(format!("{} weights for depth {}", w.len(), params.depth())));
    }
    let t = example_terms(params, ex, negatives, catalog, mode)?;
    let prefix_beta = if mode == LossMode::Ce { None } else { Some(beta) };
    let coeffs = t.score_coefficients(true, prefix_beta, w, 1.0);
    let mut grads = Gradients::zeros_for(params);
    t.tree.backward(params, &coeffs, &mut grads)?;
    Ok((t.objective(true, prefix_beta, w), grads))
}

fn example_terms(
    params: &ModelParams,
    ex: &Example,
    negatives: &[u32],
    catalog: &TokenizedCatalog,
    mode: LossMode,
) -> Result<ExampleTerms> {
    let depth = params.depth();
    let mut cands: Vec<&[u32]> = vec![catalog.codes(ex.target as usize)];
    cands.extend(negatives.iter().map(|&n| catalog.codes(n as usize)));
    let tree = CandidateTree::build(params, &ex.history, &cands)?;
    let pos = tree.token_scores(0);
    let (ce, ce_grads) = ce_terms(&pos);
    let mut prefix = Vec::with_capacity(depth);
    let mut prefix_grads = Vec::with_capacity(depth);
    match mode {
        LossMode::Ce | LossMode::ApaoPointwise => {
            for m in 1..=depth {
                let (v, g) = pointwise_terms(&pos, m)?;
                prefix.push(v);
                prefix_grads.push(vec![g]);
            }
        }
        LossMode::ApaoPairwise => {
            let negs: Vec<Vec<f64>> = (1..tree.num_candidates()).map(|c| tree.token_scores(c)).collect();
            for m in 1..=depth {
                let (v, gp, gn) = pairwise_terms(&pos, &negs, m)?;
                prefix.push(v);
                let mut all = Vec::with_capacity(gn.len() + 1);
                all.push(gp);
                all.extend(gn);
                prefix_grads.push(all);
            }
        }
    }
    Ok(ExampleTerms { tree, ce, ce_grads, prefix, prefix_grads })
}

struct StageSpec {
    index: usize,
    name: &'static str,
    mode: LossMode,
    include_ce: bool,
}

struct Loop<'a> {
    cfg: &'a TrainConfig,
    train: &'a [Example],
    valid: &'a [Example],
    catalog: &'a TokenizedCatalog,
    trie: &'a CodeTrie,
}

impl Loop<'_> {
    fn validate_metric(&self, params: &ModelParams) -> Result<f64> {
        let r = evaluate_examples(params, self.valid, self.catalog, self.trie, self.cfg.valid_beam, &[self.cfg.valid_cutoff])?;
        Ok(r.ndcg[&self.cfg.valid_cutoff])
    }

    fn run_stage(&self, spec: &StageSpec, mut params: ModelParams, log: &mut Vec<StepRecord>) -> Result<(ModelParams, StageManifest, Vec<f64>)> {
        let cfg = self.cfg;
        let depth = params.depth();
        let batch = cfg.effective_batch();
        let steps_per_epoch = self.train.len().div_ceil(batch);
        let total_steps = steps_per_epoch * cfg.epochs;
        let mut optimizer = AdamW::new(&params, cfg.weight_decay);
        let mut weights = PrefixWeights::uniform(depth, cfg.eta)?;
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        shuffle_rng.set_stream(2 * spec.index as u64 + 1);
        let mut neg_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        neg_rng.set_stream(2 * spec.index as u64 + 2);
        let num_items = self.catalog.num_items();
        let negatives = if spec.mode == LossMode::ApaoPairwise { cfg.negatives } else { 0 };

        let mut best = (f64::NEG_INFINITY, 0usize, params.clone());
        let mut epochs = Vec::new();
        let mut stopped_early = false;
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        for epoch in 1..=cfg.epochs {
            let started = Instant::now();
            order.shuffle(&mut shuffle_rng);
            let mut loss_sum = 0.0;
            let mut steps = 0;
            for idx in order.chunks(batch) {
                let step = optimizer.steps_taken() + 1;
                let lr = learning_rate(cfg.lr, step, total_steps, cfg.warmup_fraction);
                let fail = |weights: &PrefixWeights, message: String| Error::Training { step, lr, weights: weights.weights(), message };

                let negs: Vec<Vec<u32>> = idx
                    .iter()
                    .map(|&i| {
                        if negatives == 0 {
                            Ok(Vec::new())
                        } else {
                            sample_negatives(self.train[i].target, negatives, num_items, &mut neg_rng).map(|s| s.item_ids)
                        }
                    })
                    .collect::<Result<_>>()?;
                let terms: Vec<ExampleTerms> = idx
                    .par_iter()
                    .zip(negs.par_iter())
                    .map(|(&i, n)| example_terms(&params, &self.train[i], n, self.catalog, spec.mode))
                    .collect::<Result<_>>()?;

                let b = terms.len() as f64;
                let ce = terms.iter().map(|t| t.ce).sum::<f64>() / b;
                let prefix: Vec<f64> = (0..depth).map(|m| terms.iter().map(|t| t.prefix[m]).sum::<f64>() / b).collect();
                let prefix_active = spec.mode != LossMode::Ce;
                if prefix_active {
                    weights.update(&prefix).map_err(|e| match e {
                        Error::Training { message, weights, .. } => Error::Training { step, lr, weights, message },
                        other => other,
                    })?;
                }
                let w = weights.weights();
                let weighted: f64 = w.iter().zip(&prefix).map(|(a, l)| a * l).sum();
                let total = match (spec.include_ce, prefix_active) {
                    (true, true) => ce + cfg.beta * weighted,
                    (true, false) => ce,
                    (false, _) => cfg.beta * weighted,
                };
                if !total.is_finite() {
                    return Err(fail(&weights, format!("non-finite loss {total}")));
                }

                let prefix_beta = if prefix_active { Some(cfg.beta) } else { None };
                let coeffs: Vec<Vec<Vec<f64>>> =
                    terms.iter().map(|t| t.score_coefficients(spec.include_ce, prefix_beta, &w, b)).collect();

                let partial: Vec<Gradients> = terms
                    .par_chunks(CHUNK)
                    .zip(coeffs.par_chunks(CHUNK))
                    .map(|(ts, cs)| {
                        let mut g = Gradients::zeros_for(&params);
                        for (t, c) in ts.iter().zip(cs) {
                            t.tree.backward(&params, c, &mut g)?;
                        }
                        Ok(g)
                    })
                    .collect::<Result<_>>()?;
                let mut grads = Gradients::zeros_for(&params);
                for p in &partial {
                    for (acc, part) in grads.tensors_mut().into_iter().zip(p.tensors()) {
                        acc.iter_mut().zip(part.data).for_each(|(a, x)| *a += x);
                    }
                }
                if !grads.max_abs().is_finite() {
                    return Err(fail(&weights, "non-finite gradient".into()));
                }
                optimizer.step(&mut params, &grads, lr);
                if !params.is_finite() {
                    return Err(fail(&weights, "parameters became non-finite".into()));
                }

                log.push(StepRecord { stage: spec.index, epoch, step, lr, total, ce, prefix, w });
                loss_sum += total;
                steps += 1;
            }
            let train_seconds = started.elapsed().as_secs_f64();
            let v_start = Instant::now();
            let metric = self.validate_metric(&params)?;
            let valid_seconds = v_start.elapsed().as_secs_f64();
            epochs.push(EpochRecord {
                epoch,
                steps,
                mean_total: loss_sum / steps.max(1) as f64,
                valid_ndcg: metric,
                train_seconds,
                valid_seconds,
            });
            if metric > best.0 {
                best = (metric, epoch, params.clone());
            } else if epoch - best.1 >= cfg.patience {
                stopped_early = true;
                break;
            }
        }
        let manifest = StageManifest {
            name: spec.name.into(),
            mode: spec.mode,
            include_ce: spec.include_ce,
            epochs,
            best_epoch: best.1,
            best_valid_ndcg: best.0,
            stopped_early,
        };
        Ok((best.2, manifest, weights.weights()))
    }
}

fn manifest_base(cfg: &TrainConfig, train: usize, valid: usize, params: &ModelParams) -> RunManifest {
    RunManifest {
        config: cfg.clone(),
        config_digest: hex::encode(Sha256::digest(serde_json::to_vec(cfg).expect("config serializes"))),
        prefix_loss_reduction: "batch_mean".into(),
        train_examples: train,
        valid_examples: valid,
        num_parameters: params.num_parameters(),
        stages: Vec::new(),
        final_weights: Vec::new(),
        checkpoint: None,
    }
}

fn check_inputs(cfg: &TrainConfig, train: &[Example], valid: &[Example], catalog: &TokenizedCatalog) -> Result<()> {
    cfg.validate()?;
    if train.is_empty() || valid.is_empty() {
        return Err(Error::Data("training needs non-empty train and validation examples".into()));
    }
    let n = catalog.num_items();
    let out_of_range = |e: &Example| e.target as usize >= n || e.history.iter().any(|&i| i as usize >= n);
    if train.iter().chain(valid).any(out_of_range) {
        return Err(Error::Data(format!("example references an item outside the catalog of {n}")));
    }
    if cfg.mode == LossMode::ApaoPairwise && cfg.negatives > n - 1 {
        return Err(Error::Config(format!("trainer.negatives: {} exceeds catalog size - 1", cfg.negatives)));
    }
    Ok(())
}

/// Trains from a given initialization on explicit example lists.
pub fn fit(
    cfg: &TrainConfig,
    params: ModelParams,
    train: &[Example],
    valid: &[Example],
    catalog: &TokenizedCatalog,
) -> Result<TrainOutcome> {
    check_inputs(cfg, train, valid, catalog)?;
    let trie = CodeTrie::from_catalog(catalog)?;
    let lp = Loop { cfg, train, valid, catalog, trie: &trie };
    let mut manifest = manifest_base(cfg, train.len(), valid.len(), &params);
    let mut steps = Vec::new();
    let params = match cfg.stage {
        Stage::OneStage => {
            let spec = StageSpec { index: 0, name: "one_stage", mode: cfg.mode, include_ce: true };
            let (p, m, w) = lp.run_stage(&spec, params, &mut steps)?;
            manifest.stages.push(m);
            manifest.final_weights = w;
            p
        }
        Stage::TwoStage => {
            let first = StageSpec { index: 0, name: "stage1_ce", mode: LossMode::Ce, include_ce: true };
            let (p, m, _) = lp.run_stage(&first, params, &mut steps)?;
            manifest.stages.push(m);
            let second = StageSpec { index: 1, name: "stage2_prefix", mode: cfg.mode, include_ce: false };
            let (p, m, w) = lp.run_stage(&second, p, &mut steps)?;
            manifest.stages.push(m);
            manifest.final_weights = w;
            p
        }
    };
    Ok(TrainOutcome { params, manifest, steps })
}

fn split_examples(cfg: &TrainConfig, dataset: &InteractionDataset) -> Result<(Vec<Example>, Vec<Example>)> {
    let train = dataset.train_examples(cfg.train_pairs)?;
    let mut valid = dataset.valid_examples()?;
    if let Some(limit) = cfg.valid_limit {
        valid.truncate(limit);
    }
    Ok((train, valid))
}

/// Initializes from `cfg.seed` and trains on the dataset's split.
pub fn train(cfg: &TrainConfig, dataset: &InteractionDataset, catalog: &TokenizedCatalog) -> Result<TrainOutcome> {
    cfg.validate()?;
    let (tr, va) = split_examples(cfg, dataset)?;
    let params = init_params(catalog, cfg.dim, cfg.seed)?;
    fit(cfg, params, &tr, &va, catalog)
}

/// CE to early stop, then the prefix objective alone from the stage-1 best point.
pub fn train_two_stage(cfg: &TrainConfig, dataset: &InteractionDataset, catalog: &TokenizedCatalog) -> Result<TrainOutcome> {
    let cfg = TrainConfig { stage: Stage::TwoStage, ..cfg.clone() };
    train(&cfg, dataset, catalog)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::beam_search;
    use crate::losses::prefix_scores;
    use crate::model::forward;
    use crate::numeric::softplus;
    use std::collections::BTreeMap;

    fn tiny_catalog() -> TokenizedCatalog {
        let codes: Vec<Vec<u32>> = (0..12u32).map(|i| vec![i % 3, (i / 3) % 2, i / 6]).collect();
        TokenizedCatalog::from_codes(&codes, vec![3, 2, 2], false).unwrap()
    }

    fn tiny_dataset() -> InteractionDataset {
        let seqs: BTreeMap<u64, Vec<u32>> = (0..30u64)
            .map(|u| (u, (0..6).map(|j| ((u * 7 + j * 5) % 12) as u32).collect()))
            .collect();
        crate::dataset::split_leave_one_out(InteractionDataset::from_sequences(seqs, 20)).unwrap()
    }

    fn quick(mode: LossMode) -> TrainConfig {
        TrainConfig {
            mode,
            beta: 0.3,
            eta: 0.5,
            negatives: 3,
            lr: 0.01,
            epochs: 3,
            patience: 3,
            batch_size: 8,
            grad_accum: 2,
            dim: 4,
            seed: 5,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_beta_reproduces_ce_bit_for_bit() {
        let ds = tiny_dataset();
        let cat = tiny_catalog();
        let ce = train(&quick(LossMode::Ce), &ds, &cat).unwrap();
        for mode in [LossMode::ApaoPointwise, LossMode::ApaoPairwise] {
            let cfg = TrainConfig { beta: 0.0, ..quick(mode) };
            let run = train(&cfg, &ds, &cat).unwrap();
            assert_eq!(run.params, ce.params, "{mode:?}");
            for (a, b) in run.steps.iter().zip(&ce.steps) {
                assert_eq!(a.ce.to_bits(), b.ce.to_bits());
                assert_eq!(a.total.to_bits(), b.total.to_bits());
            }
        }
    }

    #[test]
    fn ce_mode_never_moves_weights() {
        let run = train(&quick(LossMode::Ce), &tiny_dataset(), &tiny_catalog()).unwrap();
        for s in &run.steps {
            assert!(s.w.iter().all(|&w| w == 1.0 / 3.0));
        }
    }

    #[test]
    fn logged_total_recombines_components() {
        for mode in [LossMode::ApaoPointwise, LossMode::ApaoPairwise] {
            let cfg = quick(mode);
            let run = train(&cfg, &tiny_dataset(), &tiny_catalog()).unwrap();
            for s in &run.steps {
                let soft: f64 = s.w.iter().zip(&s.prefix).map(|(a, b)| a * b).sum();
                assert!((s.total - (s.ce + cfg.beta * soft)).abs() < 1e-9);
            }
            assert!(run.steps.iter().any(|s| s.w != vec![1.0 / 3.0; 3]));
        }
    }

    #[test]
    fn single_negative_components_match_independent_recomputation() {
        let cat = tiny_catalog();
        let ex = vec![Example { user: 0, history: vec![1, 4], target: 7 }];
        let cfg = TrainConfig {
            mode: LossMode::ApaoPairwise,
            negatives: 1,
            beta: 0.4,
            eta: 2.0,
            epochs: 1,
            batch_size: 1,
            grad_accum: 1,
            dim: 3,
            ..TrainConfig::default()
        };
        let init = init_params(&cat, 3, 0).unwrap();
        let run = fit(&cfg, init.clone(), &ex, &ex, &cat).unwrap();
        let s = &run.steps[0];
        // replay the negative draw
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(2);
        let neg = sample_negatives(7, 1, 12, &mut rng).unwrap().item_ids[0];
        let pos = prefix_scores(&forward(&init, &[1, 4], cat.codes(7)).unwrap());
        let negs = prefix_scores(&forward(&init, &[1, 4], cat.codes(neg as usize)).unwrap());
        let ce = -pos.cumulative[2] / 3.0;
        let pair: Vec<f64> = (0..3).map(|m| softplus(negs.cumulative[m] - pos.cumulative[m])).collect();
        let mut w = vec![1.0 / 3.0; 3];
        let z: f64 = w.iter().zip(&pair).map(|(a, l)| a * (cfg.eta * l).exp()).sum();
        w = w.iter().zip(&pair).map(|(a, l)| a * (cfg.eta * l).exp() / z).collect();
        let total = ce + cfg.beta * w.iter().zip(&pair).map(|(a, l)| a * l).sum::<f64>();
        assert!((s.ce - ce).abs() < 1e-12);
        for m in 0..3 {
            assert!((s.prefix[m] - pair[m]).abs() < 1e-12);
            assert!((s.w[m] - w[m]).abs() < 1e-12);
        }
        assert!((s.total - total).abs() < 1e-12);
    }

    #[test]
    fn memorizes_a_single_example() {
        let cat = TokenizedCatalog::from_codes(&[vec![0, 0], vec![0, 1], vec![1, 0], vec![1, 1]], vec![2, 2], false).unwrap();
        let ex = vec![Example { user: 0, history: vec![0], target: 2 }];
        let cfg = TrainConfig { lr: 0.05, epochs: 200, patience: 200, batch_size: 1, grad_accum: 1, dim: 4, ..TrainConfig::default() };
        let run = fit(&cfg, init_params(&cat, 4, 1).unwrap(), &ex, &ex, &cat).unwrap();
        assert_eq!(run.steps.len(), 200);
        assert!(run.steps.last().unwrap().ce < 0.05, "{}", run.steps.last().unwrap().ce);
        let trie = CodeTrie::from_catalog(&cat).unwrap();
        let b = beam_search(&run.params, &[0], 1, &trie).unwrap();
        assert_eq!(b.items[0].item, 2);
    }

    #[test]
    fn deterministic_per_seed() {
        let a = train(&quick(LossMode::ApaoPairwise), &tiny_dataset(), &tiny_catalog()).unwrap();
        let b = train(&quick(LossMode::ApaoPairwise), &tiny_dataset(), &tiny_catalog()).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.steps, b.steps);
    }

    #[test]
    fn early_stopping_respects_patience() {
        let cfg = TrainConfig { epochs: 40, patience: 2, ..quick(LossMode::Ce) };
        let run = train(&cfg, &tiny_dataset(), &tiny_catalog()).unwrap();
        let st = &run.manifest.stages[0];
        assert!(st.epochs.len() <= st.best_epoch + cfg.patience);
        let best = st.epochs.iter().map(|e| e.valid_ndcg).fold(f64::MIN, f64::max);
        assert_eq!(best, st.best_valid_ndcg);
    }

    #[test]
    fn two_stage_with_zero_beta_keeps_stage_one_params() {
        let ds = tiny_dataset();
        let cat = tiny_catalog();
        let base = TrainConfig { beta: 0.0, weight_decay: 0.0, stage: Stage::TwoStage, ..quick(LossMode::ApaoPointwise) };
        let two = train(&base, &ds, &cat).unwrap();
        let one = train(&TrainConfig { mode: LossMode::Ce, stage: Stage::OneStage, ..base.clone() }, &ds, &cat).unwrap();
        assert_eq!(two.params, one.params);
        let names: Vec<&str> = two.manifest.stages.iter().map(|s| s.name.as_str()).collect();
        assert_eq!(names, ["stage1_ce", "stage2_prefix"]);
        assert_eq!(two.manifest.stages[1].epochs[0].epoch, 1);
        assert!(two.steps.iter().any(|s| s.stage == 1));
        assert!(!two.manifest.stages[1].include_ce);
    }

    #[test]
    fn adamw_matches_scalar_reference() {
        let mut p = ModelParams::zeros(1, &[1], 1);
        p.item_embed[0] = 0.7;
        let mut opt = AdamW::new(&p, 0.1);
        let gs = [0.3, -1.2, 0.05, 2.0, -0.4];
        let (mut x, mut m, mut v) = (0.7f64, 0.0f64, 0.0f64);
        for (i, &g) in gs.iter().enumerate() {
            let lr = 0.01 * (i + 1) as f64;
            let mut grads = p.zeros_like();
            grads.item_embed[0] = g;
            opt.step(&mut p, &grads, lr);
            // reference: decoupled decay then bias-corrected Adam step
            let t = (i + 1) as i32;
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            x = x * (1.0 - lr * 0.1) - lr * mh / (vh.sqrt() + 1e-8);
            assert!((p.item_embed[0] - x).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let cat = tiny_catalog();
        let mut p = init_params(&cat, 3, 2).unwrap();
        let before = p.clone();
        let mut opt = AdamW::new(&p, 0.0);
        let zero = p.zeros_like();
        for _ in 0..5 {
            opt.step(&mut p, &zero, 0.1);
        }
        assert_eq!(p, before);
    }

    #[test]
    fn schedule_shape() {
        assert_eq!(learning_rate(1.0, 0, 1000, 0.01), 0.0);
        assert!((learning_rate(1.0, 1, 1000, 0.01) - 0.1).abs() < 1e-15);
        assert!((learning_rate(1.0, 10, 1000, 0.01) - 1.0).abs() < 1e-15);
        assert!(learning_rate(1.0, 1000, 1000, 0.01).abs() < 1e-15);
        let mid = learning_rate(1.0, 505, 1000, 0.01);
        assert!((mid - 0.5).abs() < 1e-12);
        let mut prev = f64::MAX;
        for s in 10..=1000 {
            let lr = learning_rate(1.0, s, 1000, 0.01);
            assert!(lr <= prev);
            prev = lr;
        }
    }

    #[test]
    fn invalid_configs_name_the_field() {
        let cases = [
            TrainConfig { beta: -0.1, ..TrainConfig::default() },
            TrainConfig { eta: f64::NAN, ..TrainConfig::default() },
            TrainConfig { patience: 0, ..TrainConfig::default() },
            TrainConfig { mode: LossMode::ApaoPairwise, negatives: 0, ..TrainConfig::default() },
            TrainConfig { stage: Stage::TwoStage, ..TrainConfig::default() },
        ];
        let fields = ["trainer.beta", "trainer.eta", "trainer.patience", "trainer.negatives", "trainer.stage"];
        for (cfg, field) in cases.iter().zip(fields) {
            match cfg.validate() {
                Err(Error::Config(msg)) => assert!(msg.starts_with(field), "{msg}"),
                other => panic!("{other:?}"),
            }
        }
    }

    #[test]
    fn non_finite_loss_aborts_with_snapshot() {
        let cat = tiny_catalog();
        let ex = vec![Example { user: 0, history: vec![1], target: 2 }];
        let mut p = init_params(&cat, 3, 0).unwrap();
        p.bias[0][0] = f64::NAN;
        let cfg = TrainConfig { mode: LossMode::ApaoPointwise, beta: 0.1, eta: 0.1, epochs: 1, batch_size: 1, grad_accum: 1, dim: 3, ..TrainConfig::default() };
        match fit(&cfg, p, &ex, &ex, &cat) {
            Err(Error::Training { step, weights, .. }) => {
                assert_eq!(step, 1);
                assert_eq!(weights.len(), 3);
            }
            Err(other) => panic!("{other}"),
            Ok(_) => panic!("expected failure"),
        }
    }
}

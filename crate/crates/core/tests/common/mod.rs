#![allow(dead_code)]

use genrec::dataset::Example;
use genrec::model::{init_params, Gradients, ModelParams};
use genrec::tokenizer::TokenizedCatalog;
use genrec::trainer::{example_objective, LossMode};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Random catalog of distinct codes: depth in `1..=max_depth`, per-level
/// vocab in `2..=max_vocab`, `2..=max_items` items.
pub fn random_catalog<R: Rng>(rng: &mut R, max_depth: usize, max_vocab: usize, max_items: usize) -> TokenizedCatalog {
    let depth = rng.random_range(1..=max_depth);
    let vocab: Vec<usize> = (0..depth).map(|_| rng.random_range(2..=max_vocab)).collect();
    let space: usize = vocab.iter().product();
    let n = rng.random_range(2..=space.min(max_items));
    let mut all: Vec<usize> = (0..space).collect();
    all.shuffle(rng);
    let mut picked = all[..n].to_vec();
    picked.sort_unstable();
    let codes: Vec<Vec<u32>> = picked
        .iter()
        .map(|&idx| {
            let mut rest = idx;
            let mut c = vec![0u32; depth];
            for t in (0..depth).rev() {
                c[t] = (rest % vocab[t]) as u32;
                rest /= vocab[t];
            }
            c
        })
        .collect();
    TokenizedCatalog::from_codes(&codes, vocab, false).unwrap()
}

/// `init_params` plus Gaussian noise so scores are far from uniform.
pub fn random_params<R: Rng>(rng: &mut R, catalog: &TokenizedCatalog, dim: usize, noise: f64) -> ModelParams {
    let mut p = init_params(catalog, dim, rng.random()).unwrap();
    let nd = Normal::new(0.0, noise).unwrap();
    for t in p.tensors_mut() {
        for x in t.iter_mut() {
            *x += nd.sample(rng);
        }
    }
    p
}

pub fn random_history<R: Rng>(rng: &mut R, num_items: usize) -> Vec<u32> {
    let len = rng.random_range(1..=4);
    (0..len).map(|_| rng.random_range(0..num_items as u32)).collect()
}

pub struct GradCase {
    pub params: ModelParams,
    pub catalog: TokenizedCatalog,
    pub example: Example,
    pub negatives: Vec<u32>,
    pub mode: LossMode,
    pub beta: f64,
    pub w: Vec<f64>,
}

pub fn random_grad_case<R: Rng>(rng: &mut R, mode: LossMode) -> GradCase {
    let catalog = random_catalog(rng, 4, 4, 12);
    let dim = rng.random_range(1..=8);
    let params = random_params(rng, &catalog, dim, 0.5);
    let n = catalog.num_items() as u32;
    let target = rng.random_range(0..n);
    let negatives = if mode == LossMode::ApaoPairwise {
        let mut others: Vec<u32> = (0..n).filter(|&i| i != target).collect();
        others.shuffle(rng);
        others.truncate(rng.random_range(1..=others.len().min(4)));
        others
    } else {
        Vec::new()
    };
    let raw: Vec<f64> = (0..catalog.depth()).map(|_| rng.random_range(0.05..1.0)).collect();
    let s: f64 = raw.iter().sum();
    GradCase {
        example: Example { user: 0, history: random_history(rng, n as usize), target },
        params,
        catalog,
        negatives,
        mode,
        beta: rng.random_range(0.05..1.0),
        w: raw.iter().map(|x| x / s).collect(),
    }
}

impl GradCase {
    pub fn objective(&self, params: &ModelParams) -> f64 {
        example_objective(params, &self.example, &self.negatives, &self.catalog, self.mode, self.beta, &self.w)
            .unwrap()
            .0
    }

    pub fn analytic(&self) -> Gradients {
        example_objective(&self.params, &self.example, &self.negatives, &self.catalog, self.mode, self.beta, &self.w)
            .unwrap()
            .1
    }
}

/// Largest relative error between the analytic gradient and central
/// differences over every parameter. Entries where both are below `floor`
/// in magnitude are compared on an absolute scale of `floor`.
pub fn max_fd_error(case: &GradCase, eps: f64, floor: f64) -> f64 {
    let analytic = case.analytic();
    let flat: Vec<f64> = analytic.tensors().iter().flat_map(|t| t.data.iter().copied()).collect();
    let mut probe = case.params.clone();
    let mut worst: f64 = 0.0;
    let mut k = 0;
    let sizes: Vec<usize> = probe.tensors().iter().map(|t| t.data.len()).collect();
    for (ti, &len) in sizes.iter().enumerate() {
        for j in 0..len {
            let orig = probe.tensors_mut()[ti][j];
            probe.tensors_mut()[ti][j] = orig + eps;
            let up = case.objective(&probe);
            probe.tensors_mut()[ti][j] = orig - eps;
            let down = case.objective(&probe);
            probe.tensors_mut()[ti][j] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = flat[k];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            worst = worst.max(err);
            k += 1;
        }
    }
    worst
}

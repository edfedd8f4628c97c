//! Randomized checks of the beam-recall lower bound and of the closed-form
//! weight update.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp1;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::losses::{pairwise_from_prefix_scores, prefix_margin};
use crate::weighting::{update_weights, verify_kkt_optimality, PrefixWeights};

/// One sampled instance: cumulative prefix scores for the positive and each
/// negative path, plus the beam width.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundTrial {
    pub k: usize,
    pub pos: Vec<f64>,
    pub negs: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundEvaluation {
    pub beam_hit: bool,
    /// `1 - sum_m 1(A_m^c)`
    pub union_bound: f64,
    /// `1 - sum_m exp(-(-phi_m)_+)`
    pub surrogate_bound: f64,
    /// `1 - sum_m exp(L_pair(m))`
    pub pair_bound: f64,
    pub violations: Vec<String>,
}

/// Rank of the positive among all candidates at step `m`; ties go to the positive.
fn rank_all(trial: &BoundTrial, m: usize) -> usize {
    1 + trial.negs.iter().filter(|n| n[m] > trial.pos[m]).count()
}

/// Runs top-`k` selection over the candidate paths step by step.
fn beam_keeps_positive(trial: &BoundTrial) -> bool {
    let depth = trial.pos.len();
    let mut alive: Vec<usize> = (0..trial.negs.len()).collect();
    for m in 0..depth {
        let above = alive.iter().filter(|&&j| trial.negs[j][m] > trial.pos[m]).count();
        if above + 1 > trial.k {
            return false;
        }
        // the positive takes one slot; keep the best k-1 negatives, ties to lower index
        alive.sort_by(|&a, &b| trial.negs[b][m].total_cmp(&trial.negs[a][m]).then(a.cmp(&b)));
        alive.truncate(trial.k - 1);
    }
    true
}

pub fn evaluate_bound(trial: &BoundTrial) -> BoundEvaluation {
    let depth = trial.pos.len();
    let beam_hit = beam_keeps_positive(trial);
    let mut violations = Vec::new();
    let (mut fails, mut surrogate, mut pair) = (0.0, 0.0, 0.0);
    for m in 0..depth {
        let negs: Vec<f64> = trial.negs.iter().map(|n| n[m]).collect();
        let phi = prefix_margin(trial.pos[m], &negs);
        let (l_pair, _, _) = pairwise_from_prefix_scores(trial.pos[m], &negs);
        let fail = rank_all(trial, m) > trial.k;
        let soft = (-(-phi).max(0.0)).exp();
        let ind_phi = if phi > 0.0 { 1.0 } else { 0.0 };
        if fail && ind_phi == 0.0 {
            violations.push(format!("m={}: failure without phi > 0 (phi={phi})", m + 1));
        }
        if ind_phi > soft {
            violations.push(format!("m={}: 1(phi>0)={ind_phi} > exp(-(-phi)_+)={soft}", m + 1));
        }
        if soft > l_pair.exp() * (1.0 + 1e-12) {
            violations.push(format!("m={}: exp(-(-phi)_+)={soft} > exp(L_pair)={}", m + 1, l_pair.exp()));
        }
        fails += if fail { 1.0 } else { 0.0 };
        surrogate += soft;
        pair += l_pair.exp();
    }
    let hit = if beam_hit { 1.0 } else { 0.0 };
    let (union_bound, surrogate_bound, pair_bound) = (1.0 - fails, 1.0 - surrogate, 1.0 - pair);
    for (name, b) in [("union", union_bound), ("surrogate", surrogate_bound), ("pairwise", pair_bound)] {
        if hit < b - 1e-12 {
            violations.push(format!("beam indicator {hit} below {name} bound {b}"));
        }
    }
    BoundEvaluation { beam_hit, union_bound, surrogate_bound, pair_bound, violations }
}

fn sample_trial(rng: &mut ChaCha8Rng) -> BoundTrial {
    let depth = rng.random_range(1..=4);
    let n = rng.random_range(1..=8);
    let k = rng.random_range(1..=n + 1);
    let path = |rng: &mut ChaCha8Rng| -> Vec<f64> {
        let mut acc = 0.0;
        (0..depth)
            .map(|_| {
                acc += -rng.random_range(0.0..4.0f64);
                acc
            })
            .collect()
    };
    let mut pos = path(rng);
    let mut negs: Vec<Vec<f64>> = (0..n).map(|_| path(rng)).collect();
    match rng.random_range(0..6) {
        // saturated: the positive dominates by 50 nats everywhere
        0 => {
            for (m, p) in pos.iter_mut().enumerate() {
                *p = negs.iter().map(|v| v[m]).fold(f64::MIN, f64::max) + 50.0;
            }
        }
        // exact ties with one negative
        1 => negs[0] = pos.clone(),
        _ => {}
    }
    BoundTrial { k, pos, negs }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LowerBoundReport {
    pub trials: usize,
    pub violations: usize,
    pub beam_hits: usize,
    /// trials where the pairwise bound is non-positive
    pub vacuous_pair_bound: usize,
    pub mean_pair_bound: f64,
    pub mean_surrogate_bound: f64,
}

/// Checks the inequality chain on `trials` random instances.
pub fn verify_lower_bound(trials: usize, seed: u64) -> Result<LowerBoundReport> {
    if trials == 0 {
        return Err(Error::Config("trials must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = LowerBoundReport {
        trials,
        violations: 0,
        beam_hits: 0,
        vacuous_pair_bound: 0,
        mean_pair_bound: 0.0,
        mean_surrogate_bound: 0.0,
    };
    for i in 0..trials {
        let trial = sample_trial(&mut rng);
        let ev = evaluate_bound(&trial);
        if !ev.violations.is_empty() {
            return Err(Error::Verification(format!(
                "trial {i}: {} for {}",
                ev.violations.join("; "),
                serde_json::to_string(&trial)?
            )));
        }
        report.beam_hits += ev.beam_hit as usize;
        report.vacuous_pair_bound += (ev.pair_bound <= 0.0) as usize;
        report.mean_pair_bound += ev.pair_bound / trials as f64;
        report.mean_surrogate_bound += ev.surrogate_bound / trials as f64;
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WeightProgramReport {
    pub trials: usize,
    pub probes_per_trial: usize,
    pub violations: usize,
    /// largest `F(oracle) - F(closed form)` seen
    pub max_oracle_gap: f64,
    /// largest `F(probe) - F(closed form)` seen
    pub max_probe_gap: f64,
}

pub const PROBES_PER_TRIAL: usize = 100;

/// Random `(T, w, L, eta)` instances through the KKT verifier.
pub fn verify_weight_program(trials: usize, seed: u64) -> Result<WeightProgramReport> {
    if trials == 0 {
        return Err(Error::Config("trials must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = WeightProgramReport {
        trials,
        probes_per_trial: PROBES_PER_TRIAL,
        violations: 0,
        max_oracle_gap: f64::NEG_INFINITY,
        max_probe_gap: f64::NEG_INFINITY,
    };
    for i in 0..trials {
        let depth = rng.random_range(1..=6);
        let draws: Vec<f64> = (0..depth).map(|_| rng.sample::<f64, _>(Exp1) + 1e-3).collect();
        let s: f64 = draws.iter().sum();
        let w: Vec<f64> = draws.iter().map(|d| d / s).collect();
        let scale = rng.random_range(0.1..10.0);
        let losses: Vec<f64> = (0..depth).map(|_| rng.random_range(0.0..scale)).collect();
        let eta = 10f64.powf(rng.random_range(-5.0..1.0));
        let before = PrefixWeights::from_weights(&w, eta)?;
        let after = update_weights(&before, &losses)?;
        let r = verify_kkt_optimality(&before, &losses, eta, &after, PROBES_PER_TRIAL, &mut rng)
            .map_err(|e| Error::Verification(format!("instance {i} (w={w:?}, L={losses:?}, eta={eta}): {e}")))?;
        report.max_oracle_gap = report.max_oracle_gap.max(r.oracle - r.objective);
        report.max_probe_gap = report.max_probe_gap.max(r.best_probe - r.objective);
    }
    Ok(report)
}

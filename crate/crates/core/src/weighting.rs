//! Prefix weights on the probability simplex and their multiplicative update.

use rand::Rng;
use rand_distr::Exp1;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::numeric::logsumexp;

/// Weight vector over prefix lengths, held as normalized log weights so that
/// long update chains never collapse an entry to exactly zero.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PrefixWeights {
    log_w: Vec<f64>,
    pub eta: f64,
    pub tau: usize,
}

impl PrefixWeights {
    pub fn uniform(depth: usize, eta: f64) -> Result<Self> {
        if depth == 0 {
            return Err(Error::Config("prefix weights need at least one level".into()));
        }
        Self::check_eta(eta)?;
        Ok(Self { log_w: vec![-(depth as f64).ln(); depth], eta, tau: 0 })
    }

    pub fn from_weights(w: &[f64], eta: f64) -> Result<Self> {
        Self::check_eta(eta)?;
        if w.is_empty() || w.iter().any(|&x| !(x > 0.0) || !x.is_finite()) {
            return Err(Error::Contract(format!("weights must be positive and finite: {w:?}")));
        }
        let total: f64 = w.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Contract(format!("weights sum to {total}, not 1")));
        }
        let log_w: Vec<f64> = w.iter().map(|x| x.ln()).collect();
        let lse = logsumexp(&log_w);
        Ok(Self { log_w: log_w.iter().map(|x| x - lse).collect(), eta, tau: 0 })
    }

    fn check_eta(eta: f64) -> Result<()> {
        if !(eta >= 0.0) || !eta.is_finite() {
            return Err(Error::Config(format!("eta must be finite and non-negative, got {eta}")));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.log_w.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_w.is_empty()
    }

    pub fn log_weights(&self) -> &[f64] {
        &self.log_w
    }

    /// Weights in probability space, floored at the smallest positive normal.
    pub fn weights(&self) -> Vec<f64> {
        self.log_w.iter().map(|x| x.exp().max(f64::MIN_POSITIVE)).collect()
    }

    /// In-place form of [`update_weights`].
    pub fn update(&mut self, losses: &[f64]) -> Result<()> {
        *self = update_weights(self, losses)?;
        Ok(())
    }
}

/// `w'_m ∝ w_m exp(eta L_m)`, computed in the log domain.
pub fn update_weights(weights: &PrefixWeights, losses: &[f64]) -> Result<PrefixWeights> {
    if losses.len() != weights.len() {
        return Err(Error::Contract(format!(
            "{} losses for {} prefix weights",
            losses.len(),
            weights.len()
        )));
    }
    if let Some(bad) = losses.iter().position(|l| !l.is_finite()) {
        return Err(Error::Training {
            step: weights.tau,
            lr: f64::NAN,
            weights: weights.weights(),
            message: format!("non-finite prefix loss at m={}: {}", bad + 1, losses[bad]),
        });
    }
    let raw: Vec<f64> = weights
        .log_w
        .iter()
        .zip(losses)
        .map(|(lw, l)| lw + weights.eta * l)
        .collect();
    let lse = logsumexp(&raw);
    Ok(PrefixWeights {
        log_w: raw.iter().map(|x| x - lse).collect(),
        eta: weights.eta,
        tau: weights.tau + 1,
    })
}

/// Worst-case prefix loss.
pub fn hard_max_loss(losses: &[f64]) -> f64 {
    losses.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

pub const PROBE_TOLERANCE: f64 = 1e-9;
pub const ORACLE_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Serialize)]
pub struct KktReport {
    pub objective: f64,
    pub best_probe: f64,
    pub oracle: f64,
    pub oracle_point: Vec<f64>,
    pub trials: usize,
}

/// `sum_m w_m L_m - KL(w || before) / eta`.
pub fn kl_objective(w: &[f64], before_log: &[f64], losses: &[f64], eta: f64) -> f64 {
    let mut lin = 0.0;
    let mut kl = 0.0;
    for ((&wi, &lb), &l) in w.iter().zip(before_log).zip(losses) {
        lin += wi * l;
        if wi > 0.0 {
            kl += wi * (wi.ln() - lb);
        }
    }
    lin - kl / eta
}

fn objective_from_logs(log_w: &[f64], before_log: &[f64], losses: &[f64], eta: f64) -> f64 {
    let mut lin = 0.0;
    let mut kl = 0.0;
    for ((&lw, &lb), &l) in log_w.iter().zip(before_log).zip(losses) {
        let wi = lw.exp();
        lin += wi * l;
        kl += wi * (lw - lb);
    }
    lin - kl / eta
}

/// Euclidean projection onto `{x : x_i >= floor, sum x = 1}`.
fn project_simplex(v: &[f64], floor: f64) -> Vec<f64> {
    let n = v.len();
    let budget = 1.0 - n as f64 * floor;
    let mut sorted: Vec<f64> = v.iter().map(|x| x - floor).collect();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut cum = 0.0;
    let mut theta = 0.0;
    for (i, &u) in sorted.iter().enumerate() {
        cum += u;
        let t = (cum - budget) / (i + 1) as f64;
        if u - t > 0.0 {
            theta = t;
        }
    }
    v.iter().map(|x| (x - floor - theta).max(0.0) + floor).collect()
}

/// Projected gradient ascent with Armijo backtracking, started from `before`.
fn projected_ascent(before: &[f64], before_log: &[f64], losses: &[f64], eta: f64) -> Vec<f64> {
    let floor = 1e-15;
    let f = |w: &[f64]| kl_objective(w, before_log, losses, eta);
    let mut w = project_simplex(before, floor);
    let mut fw = f(&w);
    let mut step = eta;
    for _ in 0..20_000 {
        let grad: Vec<f64> = w
            .iter()
            .zip(before_log)
            .zip(losses)
            .map(|((&wi, &lb), &l)| l - (wi.ln() - lb + 1.0) / eta)
            .collect();
        let mut accepted = false;
        step *= 4.0;
        while step > 1e-300 {
            let trial: Vec<f64> = w.iter().zip(&grad).map(|(wi, g)| wi + step * g).collect();
            let cand = project_simplex(&trial, floor);
            let moved: f64 = cand.iter().zip(&w).map(|(c, x)| (c - x) * (c - x)).sum();
            let ft = f(&cand);
            if moved > 0.0 && ft >= fw + 1e-4 * moved / step {
                w = cand;
                let gain = ft - fw;
                fw = ft;
                accepted = true;
                if gain < 1e-16 * fw.abs().max(1.0) {
                    return w;
                }
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    w
}

/// Checks that `after` maximizes the KL-regularized objective against random
/// simplex probes and an independent projected-ascent solver.
pub fn verify_kkt_optimality<R: Rng + ?Sized>(
    before: &PrefixWeights,
    losses: &[f64],
    eta: f64,
    after: &PrefixWeights,
    trials: usize,
    rng: &mut R,
) -> Result<KktReport> {
    if !(eta > 0.0) {
        return Err(Error::Contract("objective is undefined for eta <= 0".into()));
    }
    let depth = before.len();
    if losses.len() != depth || after.len() != depth {
        return Err(Error::Contract("weight and loss lengths differ".into()));
    }
    let w_after = after.weights();
    let total: f64 = w_after.iter().sum();
    if w_after.iter().any(|&x| !(x > 0.0)) || (total - 1.0).abs() > 1e-9 {
        return Err(Error::Verification(format!("updated weights leave the simplex interior: {w_after:?}")));
    }
    let objective = objective_from_logs(&after.log_w, &before.log_w, losses, eta);

    let mut best_probe = f64::NEG_INFINITY;
    for _ in 0..trials {
        let draws: Vec<f64> = (0..depth).map(|_| rng.sample::<f64, _>(Exp1)).collect();
        let s: f64 = draws.iter().sum();
        let v: Vec<f64> = draws.iter().map(|d| d / s).collect();
        let fv = kl_objective(&v, &before.log_w, losses, eta);
        if fv > objective + PROBE_TOLERANCE {
            return Err(Error::Verification(format!(
                "probe {v:?} reaches {fv} above closed form {objective}"
            )));
        }
        best_probe = best_probe.max(fv);
    }

    let oracle_point = projected_ascent(&before.weights(), &before.log_w, losses, eta);
    let oracle = kl_objective(&oracle_point, &before.log_w, losses, eta);
    if oracle > objective + ORACLE_TOLERANCE {
        return Err(Error::Verification(format!(
            "projected ascent point {oracle_point:?} reaches {oracle} above closed form {objective}"
        )));
    }
    Ok(KktReport { objective, best_probe, oracle, oracle_point, trials })
}

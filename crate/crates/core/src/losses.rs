//! Token scores, cumulative prefix scores and the training losses built on them.
//!
//! Every loss here depends on the logits only through the ground-truth token
//! scores `s_t`, so a [`LossBundle`] carries `dL/ds_t` per trace and step; the
//! logit gradient follows as `dL/ds_t * (onehot(y_t) - softmax(z_t))`.

use crate::error::{Error, Result};
use crate::model::{token_score_dlogits_into, ForwardTrace};
use crate::numeric::{logsumexp, sigmoid, softplus};

/// Per-step token scores and their running sums `S^m = sum_{t<=m} s_t`.
#[derive(Debug, Clone, PartialEq)]
pub struct PrefixScores {
    pub token: Vec<f64>,
    pub cumulative: Vec<f64>,
}

pub fn prefix_scores(trace: &ForwardTrace) -> PrefixScores {
    let token = trace.token_scores();
    let cumulative = token
        .iter()
        .scan(0.0, |acc, &s| {
            *acc += s;
            Some(*acc)
        })
        .collect();
    PrefixScores { token, cumulative }
}

/// Loss value plus `dL/ds_t` for the positive trace and each negative trace.
#[derive(Debug, Clone, PartialEq)]
pub struct LossBundle {
    pub value: f64,
    pub pos_score_grads: Vec<f64>,
    pub neg_score_grads: Vec<Vec<f64>>,
}

impl LossBundle {
    /// Per-step logit gradients for the positive trace.
    pub fn pos_dlogits(&self, trace: &ForwardTrace) -> Vec<Vec<f64>> {
        materialize(trace, &self.pos_score_grads)
    }

    /// Per-step logit gradients for negative `j`.
    pub fn neg_dlogits(&self, j: usize, trace: &ForwardTrace) -> Vec<Vec<f64>> {
        materialize(trace, &self.neg_score_grads[j])
    }
}

fn materialize(trace: &ForwardTrace, score_grads: &[f64]) -> Vec<Vec<f64>> {
    score_grads
        .iter()
        .enumerate()
        .map(|(t, &g)| {
            let mut out = Vec::new();
            token_score_dlogits_into(&trace.log_probs[t], trace.codes[t], g, &mut out);
            out
        })
        .collect()
}

/// Mean negative log-likelihood over all `T` tokens.
pub fn ce_loss(trace: &ForwardTrace) -> LossBundle {
    let (value, grads) = ce_terms(&trace.token_scores());
    LossBundle { value, pos_score_grads: grads, neg_score_grads: Vec::new() }
}

/// CE value and `dL/ds_t` from token scores.
pub fn ce_terms(scores: &[f64]) -> (f64, Vec<f64>) {
    let depth = scores.len() as f64;
    (-scores.iter().sum::<f64>() / depth, vec![-1.0 / depth; scores.len()])
}

fn check_prefix(m: usize, depth: usize) -> Result<()> {
    if m == 0 || m > depth {
        return Err(Error::Contract(format!("prefix length {m} outside 1..={depth}")));
    }
    Ok(())
}

/// Mean negative log-likelihood over the first `m` tokens.
pub fn pointwise_prefix_loss(trace: &ForwardTrace, m: usize) -> Result<LossBundle> {
    let (value, grads) = pointwise_terms(&trace.token_scores(), m)?;
    Ok(LossBundle { value, pos_score_grads: grads, neg_score_grads: Vec::new() })
}

/// Pointwise prefix value and `dL/ds_t` from token scores.
pub fn pointwise_terms(scores: &[f64], m: usize) -> Result<(f64, Vec<f64>)> {
    check_prefix(m, scores.len())?;
    let mut grads = vec![0.0; scores.len()];
    grads[..m].fill(-1.0 / m as f64);
    Ok((-scores[..m].iter().sum::<f64>() / m as f64, grads))
}

/// Pairwise logistic loss on prefix scores: `softplus(phi)` with
/// `phi = logsumexp_j(S_neg_j - S_pos)`. Returns the value together with
/// `dL/dS_pos` and `dL/dS_neg_j`.
pub fn pairwise_from_prefix_scores(pos: f64, negs: &[f64]) -> (f64, f64, Vec<f64>) {
    let diffs: Vec<f64> = negs.iter().map(|&s| s - pos).collect();
    let phi = logsumexp(&diffs);
    let sig = sigmoid(phi);
    let neg_grads = diffs.iter().map(|&x| sig * (x - phi).exp()).collect();
    (softplus(phi), -sig, neg_grads)
}

/// `phi_m`, the log-sum-exp of negative-minus-positive prefix scores.
pub fn prefix_margin(pos: f64, negs: &[f64]) -> f64 {
    let diffs: Vec<f64> = negs.iter().map(|&s| s - pos).collect();
    logsumexp(&diffs)
}

/// Pairwise prefix loss at length `m` with one shared negative set.
pub fn pairwise_prefix_loss(pos: &ForwardTrace, negs: &[ForwardTrace], m: usize) -> Result<LossBundle> {
    let neg_scores: Vec<Vec<f64>> = negs.iter().map(|n| n.token_scores()).collect();
    let (value, pos_score_grads, neg_score_grads) = pairwise_terms(&pos.token_scores(), &neg_scores, m)?;
    Ok(LossBundle { value, pos_score_grads, neg_score_grads })
}

/// Pairwise prefix value and per-token gradients for the positive and each negative.
pub fn pairwise_terms(pos: &[f64], negs: &[Vec<f64>], m: usize) -> Result<(f64, Vec<f64>, Vec<Vec<f64>>)> {
    let depth = pos.len();
    check_prefix(m, depth)?;
    if negs.is_empty() {
        return Err(Error::Contract("pairwise loss needs at least one negative".into()));
    }
    if negs.iter().any(|n| n.len() != depth) {
        return Err(Error::Contract("negative traces differ in length from the positive".into()));
    }
    let pos_s: f64 = pos[..m].iter().sum();
    let neg_s: Vec<f64> = negs.iter().map(|n| n[..m].iter().sum()).collect();
    let (value, dpos, dnegs) = pairwise_from_prefix_scores(pos_s, &neg_s);
    let spread = |g: f64| {
        let mut v = vec![0.0; depth];
        v[..m].fill(g);
        v
    };
    Ok((value, spread(dpos), dnegs.into_iter().map(spread).collect()))
}

//! Ranking metrics and per-user evaluation over the held-out split.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::dataset::{Example, InteractionDataset};
use crate::decoder::{beam_search, CodeTrie, PruneTrace};
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::tokenizer::TokenizedCatalog;

/// 1 if `target` is among the first `k` entries.
pub fn recall_at_k(ranked: &[u32], target: u32, k: usize) -> f64 {
    if ranked.iter().take(k).any(|&i| i == target) {
        1.0
    } else {
        0.0
    }
}

/// Single-target NDCG: `1 / log2(1 + rank)` inside the cutoff.
pub fn ndcg_at_k(ranked: &[u32], target: u32, k: usize) -> f64 {
    match ranked.iter().take(k).position(|&i| i == target) {
        Some(p) => 1.0 / ((p + 2) as f64).log2(),
        None => 0.0,
    }
}

/// 1 if the length-`m` prefix of `target_codes` is in the first `k` entries of the step-`m` frontier.
pub fn prefix_recall_at_k(trace: &PruneTrace, target_codes: &[u32], m: usize, k: usize) -> Result<f64> {
    if m == 0 || m > target_codes.len() {
        return Err(Error::Contract(format!("prefix length {m} outside 1..={}", target_codes.len())));
    }
    Ok(if trace.prefix_in_top(target_codes, m, k) { 1.0 } else { 0.0 })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UserMetrics {
    pub user: u64,
    pub target: u32,
    /// 1-based rank in the beam output
    pub rank: Option<usize>,
    pub recall: BTreeMap<usize, f64>,
    pub ndcg: BTreeMap<usize, f64>,
    /// index `m - 1`
    pub prefix_hit: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricReport {
    pub k_beam: usize,
    pub recall: BTreeMap<usize, f64>,
    pub ndcg: BTreeMap<usize, f64>,
    /// prefix recall at `k_beam`, index `m - 1`
    pub prefix_recall: Vec<f64>,
    pub users: Vec<UserMetrics>,
    pub config_digest: String,
}

impl MetricReport {
    /// sha256 over the canonical JSON form.
    pub fn digest(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("report serializes");
        hex::encode(Sha256::digest(bytes))
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let mut summary = serde_json::to_value(self)?;
        summary.as_object_mut().expect("object").remove("users");
        summary["digest"] = self.digest().into();
        std::fs::write(path, serde_json::to_string_pretty(&summary)? + "\n")?;
        Ok(())
    }

    pub fn write_user_csv(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        let cut: Vec<usize> = self.recall.keys().copied().collect();
        let depth = self.prefix_recall.len();
        let mut header = vec!["user".to_string(), "target".into(), "rank".into()];
        header.extend(cut.iter().map(|k| format!("recall@{k}")));
        header.extend(cut.iter().map(|k| format!("ndcg@{k}")));
        header.extend((1..=depth).map(|m| format!("prefix{m}")));
        writeln!(out, "{}", header.join(","))?;
        for u in &self.users {
            let mut row = vec![
                u.user.to_string(),
                u.target.to_string(),
                u.rank.map(|r| r.to_string()).unwrap_or_default(),
            ];
            row.extend(cut.iter().map(|k| u.recall[k].to_string()));
            row.extend(cut.iter().map(|k| u.ndcg[k].to_string()));
            row.extend(u.prefix_hit.iter().map(|h| h.to_string()));
            writeln!(out, "{}", row.join(","))?;
        }
        Ok(())
    }
}

/// Beam-decodes every example and averages metrics over users.
pub fn evaluate_examples(
    params: &ModelParams,
    examples: &[Example],
    catalog: &TokenizedCatalog,
    trie: &CodeTrie,
    k_beam: usize,
    cutoffs: &[usize],
) -> Result<MetricReport> {
    if examples.is_empty() {
        return Err(Error::Contract("no examples to evaluate".into()));
    }
    if cutoffs.iter().any(|&k| k == 0) {
        return Err(Error::Config("evaluation cutoffs must be >= 1".into()));
    }
    let depth = catalog.depth();
    let users: Vec<UserMetrics> = examples
        .par_iter()
        .map(|ex| {
            let res = beam_search(params, &ex.history, k_beam, trie)?;
            let ranked: Vec<u32> = res.items.iter().map(|s| s.item).collect();
            let codes = catalog.codes(ex.target as usize);
            let prefix_hit = (1..=depth)
                .map(|m| prefix_recall_at_k(&res.trace, codes, m, k_beam))
                .collect::<Result<Vec<_>>>()?;
            Ok(UserMetrics {
                user: ex.user,
                target: ex.target,
                rank: ranked.iter().position(|&i| i == ex.target).map(|p| p + 1),
                recall: cutoffs.iter().map(|&k| (k, recall_at_k(&ranked, ex.target, k))).collect(),
                ndcg: cutoffs.iter().map(|&k| (k, ndcg_at_k(&ranked, ex.target, k))).collect(),
                prefix_hit,
            })
        })
        .collect::<Result<_>>()?;

    let n = users.len() as f64;
    let mean_of = |f: &dyn Fn(&UserMetrics) -> f64| users.iter().map(f).sum::<f64>() / n;
    Ok(MetricReport {
        k_beam,
        recall: cutoffs.iter().map(|&k| (k, mean_of(&|u| u.recall[&k]))).collect(),
        ndcg: cutoffs.iter().map(|&k| (k, mean_of(&|u| u.ndcg[&k]))).collect(),
        prefix_recall: (0..depth).map(|t| mean_of(&|u| u.prefix_hit[t])).collect(),
        users,
        config_digest: String::new(),
    })
}

/// Test-split evaluation.
pub fn evaluate(
    params: &ModelParams,
    dataset: &InteractionDataset,
    catalog: &TokenizedCatalog,
    trie: &CodeTrie,
    k_beam: usize,
    cutoffs: &[usize],
) -> Result<MetricReport> {
    let examples = dataset
        .test_examples()
        .map_err(|e| Error::Contract(format!("evaluation needs a split dataset: {e}")))?;
    evaluate_examples(params, &examples, catalog, trie, k_beam, cutoffs)
}

/// Test metrics for each beam size in `k_list`.
pub fn sweep_beam(
    params: &ModelParams,
    dataset: &InteractionDataset,
    catalog: &TokenizedCatalog,
    trie: &CodeTrie,
    k_list: &[usize],
    cutoffs: &[usize],
) -> Result<Vec<MetricReport>> {
    k_list
        .iter()
        .map(|&k| evaluate(params, dataset, catalog, trie, k, cutoffs))
        .collect()
}

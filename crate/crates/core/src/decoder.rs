//! Catalog-constrained beam search, the exhaustive full-sort ranking it
//! approximates, and instrumentation for pruning and latency.

use std::cmp::Ordering;
use std::time::Instant;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{forward_pooled, ModelParams};
use crate::numeric::median;
use crate::tokenizer::TokenizedCatalog;

#[derive(Debug, Clone)]
struct Node {
    children: Vec<(u32, usize)>,
    item: Option<u32>,
}

/// Prefix tree over catalog code sequences; leaves carry item ids.
#[derive(Debug, Clone)]
pub struct CodeTrie {
    nodes: Vec<Node>,
    depth: usize,
    num_items: usize,
}

impl CodeTrie {
    pub fn from_catalog(catalog: &TokenizedCatalog) -> Result<Self> {
        if catalog.num_items() == 0 {
            return Err(Error::Config("cannot decode over an empty catalog".into()));
        }
        let mut nodes = vec![Node { children: Vec::new(), item: None }];
        for item in 0..catalog.num_items() {
            let mut cur = 0;
            for &c in catalog.codes(item) {
                cur = match nodes[cur].children.binary_search_by_key(&c, |e| e.0) {
                    Ok(i) => nodes[cur].children[i].1,
                    Err(i) => {
                        let id = nodes.len();
                        nodes.push(Node { children: Vec::new(), item: None });
                        nodes[cur].children.insert(i, (c, id));
                        id
                    }
                };
            }
            nodes[cur].item = Some(item as u32);
        }
        Ok(Self { nodes, depth: catalog.depth(), num_items: catalog.num_items() })
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn num_items(&self) -> usize {
        self.num_items
    }

    /// Item reached by a full code sequence, if any.
    pub fn lookup(&self, codes: &[u32]) -> Option<u32> {
        self.walk(codes).and_then(|n| self.nodes[n].item)
    }

    pub fn contains_prefix(&self, prefix: &[u32]) -> bool {
        self.walk(prefix).is_some()
    }

    fn walk(&self, codes: &[u32]) -> Option<usize> {
        let mut cur = 0;
        for &c in codes {
            let ch = &self.nodes[cur].children;
            cur = ch[ch.binary_search_by_key(&c, |e| e.0).ok()?].1;
        }
        Some(cur)
    }
}

/// A ranked item and its sequence log-likelihood.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoredItem {
    pub item: u32,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BeamEntry {
    pub prefix: Vec<u32>,
    pub score: f64,
}

/// Surviving prefixes after step `step` (1-based), best first.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BeamFrontier {
    pub step: usize,
    pub entries: Vec<BeamEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PrunedPrefix {
    pub step: usize,
    pub prefix: Vec<u32>,
    /// 1-based position among all candidates at that step
    pub rank: usize,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PruneTrace {
    pub frontiers: Vec<BeamFrontier>,
    pub pruned: Vec<PrunedPrefix>,
}

impl PruneTrace {
    /// Frontier after step `m` (1-based).
    pub fn frontier(&self, m: usize) -> Option<&BeamFrontier> {
        m.checked_sub(1).and_then(|i| self.frontiers.get(i))
    }

    /// Whether the length-`m` prefix of `codes` is among the first `k` frontier entries.
    pub fn prefix_in_top(&self, codes: &[u32], m: usize, k: usize) -> bool {
        self.frontier(m)
            .map(|f| f.entries.iter().take(k).any(|e| e.prefix[..] == codes[..m]))
            .unwrap_or(false)
    }

    /// `mask[i][t]`: target `i` still alive after step `t + 1`.
    pub fn survival_mask(&self, targets: &[&[u32]]) -> Vec<Vec<bool>> {
        targets
            .iter()
            .map(|codes| (1..=self.frontiers.len()).map(|m| self.prefix_in_top(codes, m, usize::MAX)).collect())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BeamResult {
    pub items: Vec<ScoredItem>,
    pub trace: PruneTrace,
}

fn rank_order(a: (f64, &[u32]), b: (f64, &[u32])) -> Ordering {
    b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1))
}

struct Hyp {
    node: usize,
    prefix: Vec<u32>,
    score: f64,
    input: Vec<f64>,
}

/// Top-`k` beam search over trie-valid continuations.
pub fn beam_search(params: &ModelParams, history: &[u32], k: usize, trie: &CodeTrie) -> Result<BeamResult> {
    if k == 0 {
        return Err(Error::Config("beam size must be >= 1".into()));
    }
    if trie.depth != params.depth() {
        return Err(Error::Contract(format!(
            "trie depth {} does not match model depth {}",
            trie.depth,
            params.depth()
        )));
    }
    let pooled = params.pooled_history(history)?;
    let mut beam = vec![Hyp { node: 0, prefix: Vec::new(), score: 0.0, input: pooled }];
    let mut frontiers = Vec::with_capacity(trie.depth);
    let mut pruned = Vec::new();

    for t in 0..trie.depth {
        let mut cands: Vec<(usize, u32, usize, f64)> = Vec::new();
        for (hi, h) in beam.iter().enumerate() {
            let lp = params.step_log_probs(t, &h.input);
            for &(code, child) in &trie.nodes[h.node].children {
                cands.push((hi, code, child, h.score + lp[code as usize]));
            }
        }
        let prefix_of = |c: &(usize, u32, usize, f64)| {
            let mut p = beam[c.0].prefix.clone();
            p.push(c.1);
            p
        };
        let mut keyed: Vec<(Vec<u32>, (usize, u32, usize, f64))> = cands.iter().map(|c| (prefix_of(c), *c)).collect();
        keyed.sort_by(|a, b| rank_order((a.1 .3, &a.0), (b.1 .3, &b.0)));

        let keep = keyed.len().min(k);
        for (r, (prefix, c)) in keyed.iter().enumerate().skip(keep) {
            pruned.push(PrunedPrefix { step: t + 1, prefix: prefix.clone(), rank: r + 1, score: c.3 });
        }
        keyed.truncate(keep);
        frontiers.push(BeamFrontier {
            step: t + 1,
            entries: keyed.iter().map(|(p, c)| BeamEntry { prefix: p.clone(), score: c.3 }).collect(),
        });
        let last = t + 1 == trie.depth;
        beam = keyed
            .into_iter()
            .map(|(prefix, (hi, code, child, score))| Hyp {
                node: child,
                input: if last { Vec::new() } else { params.extend_input(&beam[hi].input, t, code) },
                prefix,
                score,
            })
            .collect();
    }

    let items = beam
        .iter()
        .map(|h| ScoredItem { item: trie.nodes[h.node].item.expect("leaf at full depth"), score: h.score })
        .collect();
    Ok(BeamResult { items, trace: PruneTrace { frontiers, pruned } })
}

/// Teacher-forced sequence log-likelihood of every catalog item, ranked.
pub fn full_sort_topk(params: &ModelParams, history: &[u32], k: usize, catalog: &TokenizedCatalog) -> Result<Vec<ScoredItem>> {
    let pooled = params.pooled_history(history)?;
    let mut scored: Vec<(f64, usize)> = Vec::with_capacity(catalog.num_items());
    for item in 0..catalog.num_items() {
        let tr = forward_pooled(params, history, &pooled, catalog.codes(item))?;
        scored.push((tr.token_scores().iter().sum(), item));
    }
    scored.sort_by(|a, b| rank_order((a.0, catalog.codes(a.1)), (b.0, catalog.codes(b.1))));
    scored.truncate(k);
    Ok(scored.into_iter().map(|(score, item)| ScoredItem { item: item as u32, score }).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RetentionReport {
    pub k_global: usize,
    pub k_beam: usize,
    /// mean retention after each step, index 0 = step 1
    pub mean: Vec<f64>,
    pub per_history: Vec<Vec<f64>>,
}

impl RetentionReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,mean_retention\n");
        for (i, r) in self.mean.iter().enumerate() {
            out.push_str(&format!("{},{r}\n", i + 1));
        }
        out
    }
}

/// Fraction of the full-sort top `k_global` whose prefixes survive each beam step.
pub fn audit_retention(
    params: &ModelParams,
    histories: &[Vec<u32>],
    k_global: usize,
    k_beam: usize,
    catalog: &TokenizedCatalog,
    trie: &CodeTrie,
) -> Result<RetentionReport> {
    if k_global == 0 || k_beam == 0 {
        return Err(Error::Config("retention audit needs k_global, k_beam >= 1".into()));
    }
    let depth = catalog.depth();
    let mut per_history = Vec::with_capacity(histories.len());
    for h in histories {
        let top = full_sort_topk(params, h, k_global, catalog)?;
        let beam = beam_search(params, h, k_beam, trie)?;
        let row = (1..=depth)
            .map(|m| {
                let alive = top
                    .iter()
                    .filter(|s| beam.trace.prefix_in_top(catalog.codes(s.item as usize), m, usize::MAX))
                    .count();
                alive as f64 / top.len() as f64
            })
            .collect();
        per_history.push(row);
    }
    let mean = (0..depth)
        .map(|t| per_history.iter().map(|r: &Vec<f64>| r[t]).sum::<f64>() / per_history.len().max(1) as f64)
        .collect();
    Ok(RetentionReport { k_global, k_beam, mean, per_history })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TimingRow {
    pub method: String,
    pub k: usize,
    pub median_ms: f64,
    /// full-sort median divided by this row's median
    pub speedup: f64,
}

/// Per-query median latency for beam search at each `k` and for full sort.
pub fn benchmark_decode(
    params: &ModelParams,
    histories: &[Vec<u32>],
    k_list: &[usize],
    catalog: &TokenizedCatalog,
    trie: &CodeTrie,
) -> Result<Vec<TimingRow>> {
    if histories.is_empty() {
        return Err(Error::Config("benchmark needs at least one history".into()));
    }
    let k_full = k_list.iter().copied().max().unwrap_or(1);
    let mut full_times = Vec::with_capacity(histories.len());
    for h in histories {
        let start = Instant::now();
        std::hint::black_box(full_sort_topk(params, h, k_full, catalog)?);
        full_times.push(start.elapsed().as_secs_f64() * 1e3);
    }
    let full = median(&mut full_times);
    let mut rows = Vec::with_capacity(k_list.len() + 1);
    for &k in k_list {
        let mut times = Vec::with_capacity(histories.len());
        for h in histories {
            let start = Instant::now();
            std::hint::black_box(beam_search(params, h, k, trie)?);
            times.push(start.elapsed().as_secs_f64() * 1e3);
        }
        let m = median(&mut times);
        rows.push(TimingRow { method: "beam".into(), k, median_ms: m, speedup: full / m });
    }
    rows.push(TimingRow { method: "full_sort".into(), k: k_full, median_ms: full, speedup: 1.0 });
    Ok(rows)
}

/// Two-level, two-symbol model where the best first token does not lead to
/// the best item: `P(a) = 0.4`, `P(x | a) = 0.99`, `P(b) = 0.6`,
/// `P(x | b) = P(y | b) = 0.5`. Code 0 is `a`/`x`, code 1 is `b`/`y`;
/// items are the four sequences in lexicographic order.
pub fn constructed_inconsistency_model() -> (ModelParams, TokenizedCatalog) {
    let codes: Vec<Vec<u32>> = vec![vec![0, 0], vec![0, 1], vec![1, 0], vec![1, 1]];
    let catalog = TokenizedCatalog::from_codes(&codes, vec![2, 2], false).expect("valid codes");
    let mut p = ModelParams::zeros(4, &[2, 2], 1);
    p.bias[0] = vec![0.4f64.ln(), 0.6f64.ln()];
    // u_2 = +1 after `a`, -1 after `b`; hidden = tanh(u_2)
    p.token_embed[0] = vec![1.0, -1.0];
    p.step_proj[1] = vec![1.0];
    let half = 99f64.ln() / 2.0;
    p.output_proj[1] = vec![half / 1f64.tanh(), 0.0];
    p.bias[1] = vec![half, 0.0];
    (p, catalog)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::prefix_scores;
    use crate::model::{forward, init_params};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_catalog(n: usize, vocab: &[usize], seed: u64) -> TokenizedCatalog {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut seen = std::collections::BTreeSet::new();
        while seen.len() < n {
            let c: Vec<u32> = vocab.iter().map(|&v| rng.random_range(0..v as u32)).collect();
            seen.insert(c);
        }
        let mut codes: Vec<Vec<u32>> = seen.into_iter().collect();
        // decouple item id from code order
        for i in (1..codes.len()).rev() {
            codes.swap(i, rng.random_range(0..=i));
        }
        TokenizedCatalog::from_codes(&codes, vocab.to_vec(), false).unwrap()
    }

    #[test]
    fn constructed_example_probabilities() {
        let (p, cat) = constructed_inconsistency_model();
        let want = [0.4 * 0.99, 0.4 * 0.01, 0.3, 0.3];
        for item in 0..4 {
            let tr = forward(&p, &[0], cat.codes(item)).unwrap();
            let prob: f64 = tr.token_scores().iter().sum::<f64>().exp();
            assert!((prob - want[item]).abs() < 1e-12, "item {item}: {prob}");
        }
    }

    #[test]
    fn constructed_example_beam_misses_full_sort_winner() {
        let (p, cat) = constructed_inconsistency_model();
        let trie = CodeTrie::from_catalog(&cat).unwrap();
        // brute force over all four sequences
        let mut best = (f64::MIN, 0);
        for item in 0..4 {
            let s: f64 = forward(&p, &[0], cat.codes(item)).unwrap().token_scores().iter().sum();
            if s > best.0 {
                best = (s, item);
            }
        }
        assert_eq!(best.1, 0);
        let full = full_sort_topk(&p, &[0], 1, &cat).unwrap();
        assert_eq!(full[0].item, 0);
        let beam = beam_search(&p, &[0], 1, &trie).unwrap();
        assert_eq!(cat.codes(beam.items[0].item as usize)[0], 1);
        assert_eq!(beam.trace.pruned[0].prefix, vec![0]);
        assert_eq!(beam.trace.pruned[0].rank, 2);

        let audit = audit_retention(&p, &[vec![0]], 1, 1, &cat, &trie).unwrap();
        assert!(audit.mean[0] < 1.0);
    }

    #[test]
    fn single_item_catalog() {
        let cat = TokenizedCatalog::from_codes(&[vec![1, 0]], vec![2, 3], false).unwrap();
        let p = init_params(&cat, 3, 1).unwrap();
        let trie = CodeTrie::from_catalog(&cat).unwrap();
        for k in [1, 5] {
            assert_eq!(full_sort_topk(&p, &[0], k, &cat).unwrap().len(), 1);
            let b = beam_search(&p, &[0], k, &trie).unwrap();
            assert_eq!(b.items.len(), 1);
            assert_eq!(b.items[0].item, 0);
        }
    }

    #[test]
    fn zero_model_ranks_lexicographically() {
        let cat = random_catalog(15, &[3, 3, 4], 2);
        let p = ModelParams::zeros(15, &[3, 3, 4], 4);
        let full = full_sort_topk(&p, &[0], 15, &cat).unwrap();
        let mut by_code: Vec<u32> = (0..15).collect();
        by_code.sort_by_key(|&i| cat.codes(i as usize).to_vec());
        assert_eq!(full.iter().map(|s| s.item).collect::<Vec<_>>(), by_code);
        let trie = CodeTrie::from_catalog(&cat).unwrap();
        let beam = beam_search(&p, &[0], 4, &trie).unwrap();
        assert_eq!(beam.items.iter().map(|s| s.item).collect::<Vec<_>>(), by_code[..4]);
    }

    #[test]
    fn full_sort_agrees_with_per_item_oracle() {
        let cat = random_catalog(20, &[4, 4, 3], 8);
        let p = init_params(&cat, 5, 9).unwrap();
        let got = full_sort_topk(&p, &[3, 7, 7], 20, &cat).unwrap();
        let mut oracle: Vec<(f64, u32)> = (0..20)
            .map(|i| {
                let tr = forward(&p, &[3, 7, 7], cat.codes(i)).unwrap();
                (*prefix_scores(&tr).cumulative.last().unwrap(), i as u32)
            })
            .collect();
        oracle.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
        for (g, o) in got.iter().zip(&oracle) {
            assert_eq!(g.item, o.1);
            assert!((g.score - o.0).abs() < 1e-12);
        }
    }

    #[test]
    fn memorized_target_scores_match_teacher_forcing() {
        let cat = random_catalog(6, &[2, 3], 4);
        let mut p = ModelParams::zeros(6, &[2, 3], 2);
        let target = cat.codes(4).to_vec();
        p.bias[0][target[0] as usize] = 8.0;
        p.bias[1][target[1] as usize] = 8.0;
        let trie = CodeTrie::from_catalog(&cat).unwrap();
        let b = beam_search(&p, &[1], 1, &trie).unwrap();
        assert_eq!(b.items[0].item, 4);
        let s = *prefix_scores(&forward(&p, &[1], &target).unwrap()).cumulative.last().unwrap();
        assert!((b.items[0].score - s).abs() < 1e-12);
    }

    #[test]
    fn errors() {
        let cat = random_catalog(4, &[2, 2], 0);
        let p = init_params(&cat, 2, 0).unwrap();
        let trie = CodeTrie::from_catalog(&cat).unwrap();
        assert!(matches!(beam_search(&p, &[0], 0, &trie), Err(Error::Config(_))));
        let other = random_catalog(4, &[2, 2, 2], 0);
        assert!(matches!(beam_search(&p, &[0], 1, &CodeTrie::from_catalog(&other).unwrap()), Err(Error::Contract(_))));
        assert!(benchmark_decode(&p, &[], &[1], &cat, &trie).is_err());
    }

    #[test]
    fn benchmark_table_shape() {
        let cat = random_catalog(30, &[4, 4, 4], 3);
        let p = init_params(&cat, 4, 3).unwrap();
        let trie = CodeTrie::from_catalog(&cat).unwrap();
        let rows = benchmark_decode(&p, &[vec![0, 1], vec![2]], &[1, 5, 30], &cat, &trie).unwrap();
        assert_eq!(rows.len(), 4);
        assert_eq!(rows[3].method, "full_sort");
        assert!(rows.iter().all(|r| r.median_ms >= 0.0));
    }

    #[test]
    fn trie_lookup() {
        let cat = random_catalog(10, &[3, 4], 6);
        let trie = CodeTrie::from_catalog(&cat).unwrap();
        for i in 0..10 {
            assert_eq!(trie.lookup(cat.codes(i)), Some(i as u32));
            assert!(trie.contains_prefix(&cat.codes(i)[..1]));
        }
        assert!(trie.contains_prefix(&[]));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn beam_invariants(seed in 0u64..10_000, k in 1usize..12, n in 1usize..30) {
            let cat = random_catalog(n, &[4, 3, 3], seed);
            let p = init_params(&cat, 4, seed + 1).unwrap();
            let trie = CodeTrie::from_catalog(&cat).unwrap();
            let hist = vec![(seed % n as u64) as u32];
            let b = beam_search(&p, &hist, k, &trie).unwrap();
            let full = full_sort_topk(&p, &hist, k, &cat).unwrap();
            prop_assert_eq!(b.items.len(), k.min(n));

            for f in &b.trace.frontiers {
                prop_assert!(f.entries.len() <= k);
                for w in f.entries.windows(2) {
                    prop_assert!(rank_order((w[0].score, &w[0].prefix), (w[1].score, &w[1].prefix)) == Ordering::Less);
                }
            }
            for pr in &b.trace.pruned {
                for f in &b.trace.frontiers[pr.step - 1..] {
                    prop_assert!(f.entries.iter().all(|e| !e.prefix.starts_with(&pr.prefix)));
                }
            }
            for s in &b.items {
                let codes = cat.codes(s.item as usize);
                let tr = forward(&p, &hist, codes).unwrap();
                prop_assert!((s.score - tr.token_scores().iter().sum::<f64>()).abs() <= 1e-10);
                let alive = &b.trace.survival_mask(&[codes])[0];
                prop_assert!(alive.iter().all(|&x| x));
            }
            // items never returned are exactly those pruned at some step
            for item in 0..n {
                let codes = cat.codes(item);
                let returned = b.items.iter().any(|s| s.item as usize == item);
                let alive = b.trace.survival_mask(&[codes])[0].iter().all(|&x| x);
                prop_assert_eq!(returned, alive);
            }
            // no beam item can outscore the global best
            prop_assert!(b.items.iter().all(|s| s.score <= full[0].score));
            let full_rank: Vec<u32> = full.iter().map(|s| s.item).collect();
            if k >= n {
                prop_assert_eq!(&b.items.iter().map(|s| s.item).collect::<Vec<_>>(), &full_rank);
                for (a, f) in b.items.iter().zip(&full) {
                    prop_assert!((a.score - f.score).abs() <= 1e-10);
                }
            }
            let audit = audit_retention(&p, &[hist.clone()], k.min(n), k, &cat, &trie).unwrap();
            for w in audit.per_history[0].windows(2) {
                prop_assert!(w[1] <= w[0]);
            }
        }

        #[test]
        fn exhaustive_beam_retains_everything(seed in 0u64..10_000, n in 1usize..25) {
            let cat = random_catalog(n, &[3, 3, 3], seed);
            let p = init_params(&cat, 3, seed).unwrap();
            let trie = CodeTrie::from_catalog(&cat).unwrap();
            let audit = audit_retention(&p, &[vec![0]], n, n, &cat, &trie).unwrap();
            prop_assert!(audit.mean.iter().all(|&r| r == 1.0));
        }
    }
}

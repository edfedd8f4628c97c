//! Synthetic catalogs: hierarchical Gaussian-mixture item embeddings and
//! Markov-style user sequences over them.

use std::collections::BTreeMap;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenizer::EmbeddingMatrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub num_items: usize,
    pub num_users: usize,
    pub dim: usize,
    pub clusters: usize,
    pub subclusters: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// popularity of the r-th item in a group is proportional to `r^-zipf`
    pub zipf: f64,
    /// probability the next item stays in the previous item's subcluster
    pub stay_sub: f64,
    /// probability it moves to a sibling subcluster of the same cluster
    pub stay_cluster: f64,
    pub cluster_spread: f64,
    pub sub_spread: f64,
    pub item_spread: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            num_items: 256,
            num_users: 2000,
            dim: 16,
            clusters: 8,
            subclusters: 4,
            min_len: 5,
            max_len: 20,
            zipf: 1.0,
            stay_sub: 0.5,
            stay_cluster: 0.3,
            cluster_spread: 4.0,
            sub_spread: 1.5,
            item_spread: 0.5,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: &str| Err(Error::Config(format!("data.synthetic.{field}: {msg}")));
        if self.num_items < 2 {
            return bad("num_items", "must be >= 2");
        }
        if self.num_users == 0 {
            return bad("num_users", "must be >= 1");
        }
        if self.dim == 0 {
            return bad("dim", "must be >= 1");
        }
        if self.clusters == 0 || self.subclusters == 0 {
            return bad("clusters", "clusters and subclusters must be >= 1");
        }
        if self.clusters * self.subclusters > self.num_items {
            return bad("clusters", "more groups than items");
        }
        if self.min_len < 3 || self.max_len < self.min_len {
            return bad("min_len", "need 3 <= min_len <= max_len");
        }
        if !(0.0..=1.0).contains(&self.stay_sub)
            || !(0.0..=1.0).contains(&self.stay_cluster)
            || self.stay_sub + self.stay_cluster > 1.0
        {
            return bad("stay_sub", "transition probabilities must lie in [0, 1] and sum to <= 1");
        }
        for (f, v) in [
            ("zipf", self.zipf),
            ("cluster_spread", self.cluster_spread),
            ("sub_spread", self.sub_spread),
            ("item_spread", self.item_spread),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return bad(f, "must be finite and >= 0");
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub embeddings: EmbeddingMatrix,
    pub sequences: BTreeMap<u64, Vec<u32>>,
    /// `(cluster, subcluster)` per item
    pub groups: Vec<(usize, usize)>,
}

fn normal(sd: f64) -> Normal<f64> {
    Normal::new(0.0, sd).expect("finite non-negative spread")
}

pub fn generate(cfg: &SyntheticConfig) -> Result<SyntheticData> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let d = cfg.dim;
    let n_groups = cfg.clusters * cfg.subclusters;

    let cluster_centers: Vec<Vec<f64>> = (0..cfg.clusters)
        .map(|_| (0..d).map(|_| normal(cfg.cluster_spread).sample(&mut rng)).collect())
        .collect();
    let sub_centers: Vec<Vec<f64>> = (0..n_groups)
        .map(|g| {
            let c = &cluster_centers[g / cfg.subclusters];
            c.iter().map(|x| x + normal(cfg.sub_spread).sample(&mut rng)).collect()
        })
        .collect();

    // every group gets at least one item; the rest are spread at random
    let mut group_of: Vec<usize> = (0..cfg.num_items).map(|i| if i < n_groups { i } else { rng.random_range(0..n_groups) }).collect();
    for i in (1..group_of.len()).rev() {
        group_of.swap(i, rng.random_range(0..=i));
    }
    let mut data = Vec::with_capacity(cfg.num_items * d);
    for &g in &group_of {
        data.extend(sub_centers[g].iter().map(|x| x + normal(cfg.item_spread).sample(&mut rng)));
    }
    let embeddings = EmbeddingMatrix::new(cfg.num_items, d, data)?;

    let mut members: Vec<Vec<u32>> = vec![Vec::new(); n_groups];
    for (i, &g) in group_of.iter().enumerate() {
        members[g].push(i as u32);
    }
    let pickers: Vec<WeightedIndex<f64>> = members
        .iter()
        .map(|m| WeightedIndex::new((1..=m.len()).map(|r| (r as f64).powf(-cfg.zipf))).expect("non-empty group"))
        .collect();
    let cluster_pick = WeightedIndex::new((1..=cfg.clusters).map(|r| (r as f64).powf(-cfg.zipf))).expect("clusters");

    let mut sequences = BTreeMap::new();
    for user in 0..cfg.num_users as u64 {
        let len = rng.random_range(cfg.min_len..=cfg.max_len);
        let home = cluster_pick.sample(&mut rng);
        let mut group = home * cfg.subclusters + rng.random_range(0..cfg.subclusters);
        let mut seq = Vec::with_capacity(len);
        for _ in 0..len {
            seq.push(members[group][pickers[group].sample(&mut rng)]);
            let r: f64 = rng.random();
            group = if r < cfg.stay_sub {
                group
            } else if r < cfg.stay_sub + cfg.stay_cluster {
                (group / cfg.subclusters) * cfg.subclusters + rng.random_range(0..cfg.subclusters)
            } else {
                let c = if rng.random_bool(0.5) { home } else { cluster_pick.sample(&mut rng) };
                c * cfg.subclusters + rng.random_range(0..cfg.subclusters)
            };
        }
        sequences.insert(user, seq);
    }
    let groups = group_of.iter().map(|&g| (g / cfg.subclusters, g % cfg.subclusters)).collect();
    Ok(SyntheticData { embeddings, sequences, groups })
}

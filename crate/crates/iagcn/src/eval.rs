//! Full-ranking top-K evaluation: Recall@K and NDCG@K with training-item
//! exclusion, macro-averaged over users that have test items.
//!
//! Scoring cost depends on the guide mode. Self-guided and degree-normalized
//! representations do not depend on the prediction target, so one propagation
//! per node suffices and ranking reduces to inner products. Interactive
//! representations are conditional on the candidate, so ranking a user runs
//! one guided forward per candidate item.

use std::collections::HashSet;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::graph::{sample_tree, BipartiteGraph, NodeRef, SampledTree, TreePolicy};
use crate::model::{dot, propagate, GuideMode, Model};

#[derive(Debug, Clone, Copy)]
pub struct EvalOptions {
    pub k_cut: usize,
    pub policy: TreePolicy,
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            k_cut: 20,
            policy: TreePolicy::full(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerUserMetrics {
    pub user: u32,
    pub recall: f64,
    pub ndcg: f64,
}

/// Macro-averaged ranking metrics; users with empty test sets are excluded.
#[derive(Debug, Clone, PartialEq)]
pub struct RankingResult {
    pub recall: f64,
    pub ndcg: f64,
    pub users_evaluated: usize,
    pub per_user: Vec<PerUserMetrics>,
}

/// `|top-K intersect test| / |test|`.
pub fn recall_at_k(ranked: &[u32], test_items: &[u32], k_cut: usize) -> f64 {
    if test_items.is_empty() {
        return 0.0;
    }
    let test: HashSet<u32> = test_items.iter().copied().collect();
    let hits = ranked.iter().take(k_cut).filter(|i| test.contains(i)).count();
    hits as f64 / test_items.len() as f64
}

/// Binary-relevance NDCG with the ideal DCG truncated at
/// `min(|test|, K)` positions.
pub fn ndcg_at_k(ranked: &[u32], test_items: &[u32], k_cut: usize) -> f64 {
    if test_items.is_empty() {
        return 0.0;
    }
    let test: HashSet<u32> = test_items.iter().copied().collect();
    let mut dcg = 0.0;
    for (idx, item) in ranked.iter().take(k_cut).enumerate() {
        if test.contains(item) {
            dcg += 1.0 / ((idx + 2) as f64).log2();
        }
    }
    let ideal_len = test_items.len().min(k_cut);
    let idcg: f64 = (0..ideal_len).map(|r| 1.0 / ((r + 2) as f64).log2()).sum();
    dcg / idcg
}

/// A frozen model prepared for ranking: target-independent modes carry the
/// combined representation of every item, the interactive mode carries each
/// item's tree structure instead.
pub struct ModelSnapshot<'a> {
    model: &'a Model,
    graph: &'a BipartiteGraph,
    policy: TreePolicy,
    seed: u64,
    betas: Vec<f64>,
    item_stars: Option<Vec<f64>>,
    item_trees: Option<Vec<SampledTree>>,
}

// Tree-sampling RNG streams: one per node and role, derived from the eval
// seed so concurrent workers never share a stream.
const STREAM_USER_TREE: u64 = 1 << 40;
const STREAM_ITEM_TREE: u64 = 2 << 40;
const STREAM_NEG_SAMPLES: u64 = 3 << 40;

fn node_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

impl<'a> ModelSnapshot<'a> {
    pub fn new(
        model: &'a Model,
        graph: &'a BipartiteGraph,
        policy: TreePolicy,
        seed: u64,
    ) -> Result<Self> {
        let betas = model.beta.betas();
        let k = model.hp.num_layers;
        let d = model.hp.dim;
        let m = graph.num_items() as usize;

        let mut snapshot = ModelSnapshot {
            model,
            graph,
            policy,
            seed,
            betas,
            item_stars: None,
            item_trees: None,
        };

        if model.hp.guide_mode == GuideMode::Interactive {
            let trees: Vec<SampledTree> = (0..m as u32)
                .into_par_iter()
                .map(|i| {
                    let mut rng = node_rng(seed, STREAM_ITEM_TREE + i as u64);
                    sample_tree(graph, NodeRef::Item(i), k, &policy, None, &mut rng)
                })
                .collect();
            snapshot.item_trees = Some(trees);
        } else {
            let stars: Vec<Vec<f64>> = (0..m as u32)
                .into_par_iter()
                .map(|i| -> Result<Vec<f64>> {
                    let mut rng = node_rng(seed, STREAM_ITEM_TREE + i as u64);
                    let node = NodeRef::Item(i);
                    let tree = sample_tree(graph, node, k, &policy, None, &mut rng);
                    let fwd = propagate(&tree, node, &model.table, graph, &model.hp)?;
                    fwd.stack().combine(&snapshot.betas)
                })
                .collect::<Result<_>>()?;
            let mut flat = vec![0.0; m * d];
            for (i, star) in stars.into_iter().enumerate() {
                flat[i * d..(i + 1) * d].copy_from_slice(&star);
            }
            snapshot.item_stars = Some(flat);
        }
        Ok(snapshot)
    }

    fn user_tree(&self, u: u32) -> SampledTree {
        let mut rng = node_rng(self.seed, STREAM_USER_TREE + u as u64);
        sample_tree(
            self.graph,
            NodeRef::User(u),
            self.model.hp.num_layers,
            &self.policy,
            None,
            &mut rng,
        )
    }

    /// Scores every candidate item (everything outside `u`'s train items).
    pub fn score_candidates(&self, u: u32) -> Result<Vec<(u32, f64)>> {
        let graph = self.graph;
        let model = self.model;
        let m = graph.num_items();
        let train: &[u32] = graph.items_of(u);
        let mut out = Vec::with_capacity(m as usize - train.len());

        match model.hp.guide_mode {
            GuideMode::Interactive => {
                let user_tree = self.user_tree(u);
                let item_trees = self.item_trees.as_ref().unwrap();
                for i in 0..m {
                    if train.binary_search(&i).is_ok() {
                        continue;
                    }
                    let user_fwd =
                        propagate(&user_tree, NodeRef::Item(i), &model.table, graph, &model.hp)?;
                    let item_fwd = propagate(
                        &item_trees[i as usize],
                        NodeRef::User(u),
                        &model.table,
                        graph,
                        &model.hp,
                    )?;
                    let user_star = user_fwd.stack().combine(&self.betas)?;
                    let item_star = item_fwd.stack().combine(&self.betas)?;
                    out.push((i, dot(&user_star, &item_star)));
                }
            }
            GuideMode::SelfGuided | GuideMode::LightGcnNorm => {
                let user_tree = self.user_tree(u);
                let user_fwd =
                    propagate(&user_tree, NodeRef::User(u), &model.table, graph, &model.hp)?;
                let user_star = user_fwd.stack().combine(&self.betas)?;
                let d = model.hp.dim;
                let stars = self.item_stars.as_ref().unwrap();
                for i in 0..m {
                    if train.binary_search(&i).is_ok() {
                        continue;
                    }
                    let star = &stars[i as usize * d..(i as usize + 1) * d];
                    out.push((i, dot(&user_star, star)));
                }
            }
        }
        Ok(out)
    }

    /// The user's top-`k_cut` items among everything outside the train set,
    /// scored descending with ties broken by ascending item id.
    pub fn rank_items(&self, u: u32, k_cut: usize) -> Result<Vec<u32>> {
        let mut scored = self.score_candidates(u)?;
        rank_scored(&mut scored, k_cut)
    }
}

fn rank_scored(scored: &mut [(u32, f64)], k_cut: usize) -> Result<Vec<u32>> {
    if scored.iter().any(|(_, s)| !s.is_finite()) {
        return Err(Error::NonFinite("candidate score"));
    }
    scored.sort_unstable_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .expect("scores checked finite")
            .then_with(|| a.0.cmp(&b.0))
    });
    Ok(scored.iter().take(k_cut).map(|&(i, _)| i).collect())
}

/// Macro-averaged full-ranking evaluation over all users with test items.
pub fn evaluate(
    model: &Model,
    graph: &BipartiteGraph,
    test_by_user: &[Vec<u32>],
    opts: &EvalOptions,
) -> Result<RankingResult> {
    let snapshot = ModelSnapshot::new(model, graph, opts.policy, opts.seed)?;
    let eligible: Vec<u32> = (0..graph.num_users())
        .filter(|&u| !test_by_user[u as usize].is_empty())
        .collect();

    let per_user: Vec<PerUserMetrics> = eligible
        .par_iter()
        .map(|&u| -> Result<PerUserMetrics> {
            let ranked = snapshot.rank_items(u, opts.k_cut)?;
            let test = &test_by_user[u as usize];
            Ok(PerUserMetrics {
                user: u,
                recall: recall_at_k(&ranked, test, opts.k_cut),
                ndcg: ndcg_at_k(&ranked, test, opts.k_cut),
            })
        })
        .collect::<Result<_>>()?;

    Ok(macro_average(per_user))
}

/// Candidate-subsampling evaluation: each user's test items are ranked
/// against `num_negatives` sampled non-train items instead of the full
/// catalog. A cheaper protocol for large item sets; not interchangeable with
/// full-ranking numbers.
pub fn evaluate_sampled(
    model: &Model,
    graph: &BipartiteGraph,
    test_by_user: &[Vec<u32>],
    opts: &EvalOptions,
    num_negatives: usize,
) -> Result<RankingResult> {
    let snapshot = ModelSnapshot::new(model, graph, opts.policy, opts.seed)?;
    let eligible: Vec<u32> = (0..graph.num_users())
        .filter(|&u| !test_by_user[u as usize].is_empty())
        .collect();

    let per_user: Vec<PerUserMetrics> = eligible
        .par_iter()
        .map(|&u| -> Result<PerUserMetrics> {
            let test = &test_by_user[u as usize];
            let mut candidates: HashSet<u32> = test.iter().copied().collect();
            let mut rng = node_rng(opts.seed, STREAM_NEG_SAMPLES + u as u64);
            let m = graph.num_items();
            let open_slots = (m as usize)
                .saturating_sub(graph.items_of(u).len() + candidates.len())
                .min(num_negatives);
            let target = test.len() + open_slots;
            let mut guard = 0usize;
            while candidates.len() < target {
                let i = rng.gen_range(0..m);
                if !graph.has_edge(u, i) {
                    candidates.insert(i);
                }
                guard += 1;
                if guard > 1000 * (num_negatives + 1) {
                    break;
                }
            }
            let mut scored: Vec<(u32, f64)> = snapshot
                .score_candidates(u)?
                .into_iter()
                .filter(|(i, _)| candidates.contains(i))
                .collect();
            let ranked = rank_scored(&mut scored, opts.k_cut)?;
            Ok(PerUserMetrics {
                user: u,
                recall: recall_at_k(&ranked, test, opts.k_cut),
                ndcg: ndcg_at_k(&ranked, test, opts.k_cut),
            })
        })
        .collect::<Result<_>>()?;

    Ok(macro_average(per_user))
}

fn macro_average(per_user: Vec<PerUserMetrics>) -> RankingResult {
    let n = per_user.len();
    let (mut recall, mut ndcg) = (0.0, 0.0);
    for m in &per_user {
        recall += m.recall;
        ndcg += m.ndcg;
    }
    if n > 0 {
        recall /= n as f64;
        ndcg /= n as f64;
    }
    RankingResult {
        recall,
        ndcg,
        users_evaluated: n,
        per_user,
    }
}

/// Appends one row to the tab-separated results file, writing the header
/// first when the file does not exist yet.
pub fn append_results_row(
    path: &Path,
    dataset: &str,
    model: &Model,
    k_cut: usize,
    recall: f64,
    ndcg: f64,
    seed: u64,
) -> Result<()> {
    let exists = path.exists();
    let mut file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    if !exists {
        writeln!(
            file,
            "dataset\tguide_mode\tK\tbeta_mode\trecall@{k_cut}\tndcg@{k_cut}\tseed"
        )
        .map_err(|e| Error::io(path, e))?;
    }
    writeln!(
        file,
        "{dataset}\t{}\t{}\t{}\t{recall:.6}\t{ndcg:.6}\t{seed}",
        model.hp.guide_mode.as_str(),
        model.hp.num_layers,
        model.hp.beta_mode.as_str(),
    )
    .map_err(|e| Error::io(path, e))?;
    Ok(())
}

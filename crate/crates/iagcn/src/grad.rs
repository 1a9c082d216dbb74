//! Exact analytic gradients of the pairwise ranking objective, plus an
//! independent central finite-difference oracle.
//!
//! The forward pass records, per tree, every position's intermediate feature
//! vectors and every parent's aggregation weights ([`TreeForward`]); backward
//! replays the aggregations top-down. Attention weights backpropagate through
//! the softmax Jacobian `diag(w) - w w^T` scaled by `1/tau`, splitting into a
//! guide path and a child-embedding path; degree-normalization weights carry
//! no embedding gradient of their own.

use std::collections::HashMap;

use rand::Rng;

use crate::error::Result;
use crate::graph::{sample_tree, BipartiteGraph, NodeRef, SampledTree, TreePolicy};
use crate::model::{dot, GuideMode, Model, PairForward, TreeForward};
use crate::train::Triplet;

/// Sparse per-row embedding gradients plus dense beta-logit gradients.
#[derive(Debug, Clone)]
pub struct GradientBuffer {
    dim: usize,
    pub users: HashMap<u32, Vec<f64>>,
    pub items: HashMap<u32, Vec<f64>>,
    pub beta_logits: Vec<f64>,
}

impl GradientBuffer {
    pub fn new(dim: usize, num_layers: usize) -> Self {
        GradientBuffer {
            dim,
            users: HashMap::new(),
            items: HashMap::new(),
            beta_logits: vec![0.0; num_layers + 1],
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Adds `scale * v` into the row of `node`.
    pub fn accumulate(&mut self, node: NodeRef, scale: f64, v: &[f64]) {
        debug_assert_eq!(v.len(), self.dim);
        let row = match node {
            NodeRef::User(u) => self.users.entry(u).or_insert_with(|| vec![0.0; v.len()]),
            NodeRef::Item(i) => self.items.entry(i).or_insert_with(|| vec![0.0; v.len()]),
        };
        for (r, x) in row.iter_mut().zip(v) {
            *r += scale * x;
        }
    }

    pub fn node(&self, node: NodeRef) -> Option<&[f64]> {
        match node {
            NodeRef::User(u) => self.users.get(&u).map(|v| v.as_slice()),
            NodeRef::Item(i) => self.items.get(&i).map(|v| v.as_slice()),
        }
    }

    /// Adds `other` into `self`; accumulation order is the caller's concern.
    pub fn merge(&mut self, other: &GradientBuffer) {
        for (&u, g) in &other.users {
            self.accumulate(NodeRef::User(u), 1.0, g);
        }
        for (&i, g) in &other.items {
            self.accumulate(NodeRef::Item(i), 1.0, g);
        }
        for (a, b) in self.beta_logits.iter_mut().zip(&other.beta_logits) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.users.values_mut().chain(self.items.values_mut()) {
            for v in g {
                *v *= s;
            }
        }
        for v in &mut self.beta_logits {
            *v *= s;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.users
            .values()
            .chain(self.items.values())
            .flatten()
            .chain(self.beta_logits.iter())
            .all(|v| v.is_finite())
    }

    pub fn touched_users(&self) -> Vec<u32> {
        let mut v: Vec<u32> = self.users.keys().copied().collect();
        v.sort_unstable();
        v
    }

    pub fn touched_items(&self) -> Vec<u32> {
        let mut v: Vec<u32> = self.items.keys().copied().collect();
        v.sort_unstable();
        v
    }
}

/// The four propagation trees of one training triplet. Without target
/// exclusion the user side shares one sampled structure.
#[derive(Debug, Clone)]
pub struct TripletTrees {
    pub user_pos: SampledTree,
    pub user_neg: SampledTree,
    pub pos_item: SampledTree,
    pub neg_item: SampledTree,
}

pub fn sample_triplet_trees<R: Rng + ?Sized>(
    graph: &BipartiteGraph,
    depth: usize,
    triplet: Triplet,
    policy: &TreePolicy,
    rng: &mut R,
) -> TripletTrees {
    let u = NodeRef::User(triplet.user);
    let ip = NodeRef::Item(triplet.pos);
    let ineg = NodeRef::Item(triplet.neg);
    if policy.exclude_target {
        TripletTrees {
            user_pos: sample_tree(graph, u, depth, policy, Some(ip), rng),
            user_neg: sample_tree(graph, u, depth, policy, Some(ineg), rng),
            pos_item: sample_tree(graph, ip, depth, policy, Some(u), rng),
            neg_item: sample_tree(graph, ineg, depth, policy, Some(u), rng),
        }
    } else {
        let user = sample_tree(graph, u, depth, policy, None, rng);
        TripletTrees {
            user_pos: user.clone(),
            user_neg: user,
            pos_item: sample_tree(graph, ip, depth, policy, None, rng),
            neg_item: sample_tree(graph, ineg, depth, policy, None, rng),
        }
    }
}

/// Complete forward record of one triplet: both scored pairs with all of
/// their aggregation intermediates, plus the frozen trees they ran over.
#[derive(Debug, Clone)]
pub struct TripletTape {
    pub triplet: Triplet,
    pub trees: TripletTrees,
    pub pos: PairForward,
    pub neg: PairForward,
}

impl TripletTape {
    pub fn score_diff(&self) -> f64 {
        self.pos.score - self.neg.score
    }
}

pub fn forward_triplet(
    model: &Model,
    graph: &BipartiteGraph,
    triplet: Triplet,
    trees: &TripletTrees,
) -> Result<TripletTape> {
    let pos = model.forward_pair(graph, &trees.user_pos, &trees.pos_item)?;
    let neg = model.forward_pair(graph, &trees.user_neg, &trees.neg_item)?;
    Ok(TripletTape {
        triplet,
        trees: trees.clone(),
        pos,
        neg,
    })
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Per-triplet loss: `softplus(-(s+ - s-)) + lambda * (|e0_u|^2 + |e0_i+|^2
/// + |e0_i-|^2)`.
pub fn triplet_loss(tape: &TripletTape, model: &Model) -> f64 {
    softplus(-tape.score_diff()) + model.hp.l2_lambda * anchor_norms(model, tape.triplet)
}

fn anchor_norms(model: &Model, t: Triplet) -> f64 {
    let sq = |v: &[f64]| dot(v, v);
    sq(model.table.user_row(t.user))
        + sq(model.table.item_row(t.pos))
        + sq(model.table.item_row(t.neg))
}

/// Exact gradient of [`triplet_loss`] with respect to every embedding row the
/// trees touch and (when trainable) the beta logits.
pub fn backward_triplet(tape: &TripletTape, model: &Model) -> GradientBuffer {
    backward_triplet_impl(tape, model, false)
}

/// Deliberately corrupts the sign of the attention backward path; exists so
/// gradient-gate tests can prove the finite-difference check catches a wrong
/// gradient.
#[doc(hidden)]
pub fn backward_triplet_sabotaged(tape: &TripletTape, model: &Model) -> GradientBuffer {
    backward_triplet_impl(tape, model, true)
}

fn backward_triplet_impl(
    tape: &TripletTape,
    model: &Model,
    flip_attention: bool,
) -> GradientBuffer {
    let hp = &model.hp;
    let mut buffer = GradientBuffer::new(hp.dim, hp.num_layers);
    let betas = model.beta.betas();
    let mut dbetas = vec![0.0; betas.len()];

    let coeff = sigmoid(-tape.score_diff());
    backward_pair(
        &tape.pos,
        &tape.trees.user_pos,
        &tape.trees.pos_item,
        -coeff,
        &betas,
        model,
        flip_attention,
        &mut buffer,
        &mut dbetas,
    );
    backward_pair(
        &tape.neg,
        &tape.trees.user_neg,
        &tape.trees.neg_item,
        coeff,
        &betas,
        model,
        flip_attention,
        &mut buffer,
        &mut dbetas,
    );

    if model.beta.is_trainable() {
        // Simplex map: d loss / d logit_j = beta_j (dbeta_j - <beta, dbeta>).
        let mix = dot(&betas, &dbetas);
        for (j, g) in buffer.beta_logits.iter_mut().enumerate() {
            *g += betas[j] * (dbetas[j] - mix);
        }
    }

    let lambda = hp.l2_lambda;
    if lambda != 0.0 {
        let t = tape.triplet;
        buffer.accumulate(
            NodeRef::User(t.user),
            2.0 * lambda,
            model.table.user_row(t.user),
        );
        buffer.accumulate(
            NodeRef::Item(t.pos),
            2.0 * lambda,
            model.table.item_row(t.pos),
        );
        buffer.accumulate(
            NodeRef::Item(t.neg),
            2.0 * lambda,
            model.table.item_row(t.neg),
        );
    }

    buffer
}

#[allow(clippy::too_many_arguments)]
fn backward_pair(
    pair: &PairForward,
    user_tree: &SampledTree,
    item_tree: &SampledTree,
    dscore: f64,
    betas: &[f64],
    model: &Model,
    flip_attention: bool,
    buffer: &mut GradientBuffer,
    dbetas: &mut [f64],
) {
    let d = model.hp.dim;
    // score = <sum_k b_k A_k, sum_k b_k B_k>; A/B are the two stacks.
    let mut user_adj = vec![0.0; (model.hp.num_layers + 1) * d];
    let mut item_adj = vec![0.0; (model.hp.num_layers + 1) * d];
    let user_stack = pair.user_fwd.stack();
    let item_stack = pair.item_fwd.stack();
    for (k, &b) in betas.iter().enumerate() {
        for t in 0..d {
            user_adj[k * d + t] = dscore * b * pair.item_star[t];
            item_adj[k * d + t] = dscore * b * pair.user_star[t];
        }
        dbetas[k] += dscore
            * (dot(user_stack.order(k), &pair.item_star)
                + dot(&pair.user_star, item_stack.order(k)));
    }
    backward_tree(
        user_tree,
        &pair.user_fwd,
        &user_adj,
        model,
        flip_attention,
        buffer,
    );
    backward_tree(
        item_tree,
        &pair.item_fwd,
        &item_adj,
        model,
        flip_attention,
        buffer,
    );
}

/// Top-down adjoint sweep over one tree. `root_adj` carries the loss
/// gradient of the root's full `[e0..eK]` stack.
fn backward_tree(
    tree: &SampledTree,
    fwd: &TreeForward,
    root_adj: &[f64],
    model: &Model,
    flip_attention: bool,
    buffer: &mut GradientBuffer,
) {
    let d = fwd.dim;
    let depth = fwd.depth;
    let hp = &model.hp;

    let mut adj: Vec<Vec<f64>> = fwd.feats.iter().map(|f| vec![0.0; f.len()]).collect();
    adj[0].copy_from_slice(root_adj);

    for k in 0..depth {
        let parent_orders = depth - k + 1;
        let child_orders = depth - k;
        let (parent_adj, child_adj) = {
            let (head, tail) = adj.split_at_mut(k + 1);
            (&head[k], &mut tail[0])
        };
        for p in 0..tree.level_nodes(k).len() {
            let range = tree.children_range(k, p);
            if range.is_empty() {
                continue;
            }
            let w = &fwd.weights[k][range.clone()];
            let mut dw = vec![0.0; w.len()];
            for j in 0..child_orders {
                let padj = &parent_adj[p * parent_orders * d + (j + 1) * d..][..d];
                for (ci, c_pos) in range.clone().enumerate() {
                    let dst = &mut child_adj[c_pos * child_orders * d + j * d..][..d];
                    for t in 0..d {
                        dst[t] += w[ci] * padj[t];
                    }
                    dw[ci] += dot(padj, fwd.feat(k + 1, c_pos, j));
                }
            }
            if hp.guide_mode.uses_attention() {
                // Softmax over s_c = <guide, e0_c>/tau:
                // d/ds_c = w_c (dw_c - <w, dw>), then 1/tau onto the raw dot.
                let mix = dot(w, &dw);
                let sign = if flip_attention { -1.0 } else { 1.0 };
                for (ci, c_pos) in range.clone().enumerate() {
                    let draw = sign * w[ci] * (dw[ci] - mix) / hp.tau;
                    let child_node = tree.level_nodes(k + 1)[c_pos];
                    buffer.accumulate(fwd.guide, draw, fwd.feat(k + 1, c_pos, 0));
                    buffer.accumulate(child_node, draw, &fwd.guide_e0);
                }
            }
        }
    }

    // Order-0 adjoints land directly on the embedding rows.
    for k in 0..=depth {
        let orders = depth - k + 1;
        for (pos, &node) in tree.level_nodes(k).iter().enumerate() {
            buffer.accumulate(node, 1.0, &adj[k][pos * orders * d..][..d]);
        }
    }
}

/// Central finite-difference verification of [`backward_triplet`].
///
/// Trees are sampled once from `rng` and frozen; every replayed forward pass
/// reuses them, so the difference quotient and the analytic gradient see the
/// same computation graph. Returns the max over touched coordinates of
/// `|analytic - central| / max(|analytic|, |central|, 1e-12)`.
pub fn finite_diff_check<R: Rng + ?Sized>(
    model: &Model,
    graph: &BipartiteGraph,
    triplet: Triplet,
    policy: &TreePolicy,
    epsilon: f64,
    rng: &mut R,
) -> Result<f64> {
    assert!(
        (1e-7..=1e-4).contains(&epsilon),
        "epsilon {epsilon} outside [1e-7, 1e-4]"
    );
    let trees = sample_triplet_trees(graph, model.hp.num_layers, triplet, policy, rng);
    let tape = forward_triplet(model, graph, triplet, &trees)?;
    let analytic = backward_triplet(&tape, model);
    finite_diff_against(model, graph, triplet, &trees, &analytic, epsilon)
}

/// The difference-quotient half of the check, reusing frozen trees and a
/// precomputed analytic buffer (which may be deliberately wrong in tests).
pub fn finite_diff_against(
    model: &Model,
    graph: &BipartiteGraph,
    triplet: Triplet,
    trees: &TripletTrees,
    analytic: &GradientBuffer,
    epsilon: f64,
) -> Result<f64> {
    let mut scratch = model.clone();
    let d = model.hp.dim;
    let mut max_rel = 0.0f64;

    let probe = |scratch: &mut Model, node: NodeRef, coord: usize, a: f64| -> Result<f64> {
        let idx = node.index() as usize * d + coord;
        let write = |m: &mut Model, v: f64| match node {
            NodeRef::User(_) => m.table.user_emb[idx] = v,
            NodeRef::Item(_) => m.table.item_emb[idx] = v,
        };
        let orig = match node {
            NodeRef::User(_) => scratch.table.user_emb[idx],
            NodeRef::Item(_) => scratch.table.item_emb[idx],
        };
        write(scratch, orig + epsilon);
        let up = replay_loss(scratch, graph, triplet, trees)?;
        write(scratch, orig - epsilon);
        let down = replay_loss(scratch, graph, triplet, trees)?;
        write(scratch, orig);
        let central = (up - down) / (2.0 * epsilon);
        Ok(relative_error(a, central))
    };

    for u in analytic.touched_users() {
        let row = analytic.users.get(&u).unwrap().clone();
        for (t, &a) in row.iter().enumerate() {
            max_rel = max_rel.max(probe(&mut scratch, NodeRef::User(u), t, a)?);
        }
    }
    for i in analytic.touched_items() {
        let row = analytic.items.get(&i).unwrap().clone();
        for (t, &a) in row.iter().enumerate() {
            max_rel = max_rel.max(probe(&mut scratch, NodeRef::Item(i), t, a)?);
        }
    }

    if model.beta.is_trainable() {
        for j in 0..scratch.beta.len() {
            let orig = scratch.beta.logits()[j];
            scratch.beta.logits_mut()[j] = orig + epsilon;
            let up = replay_loss(&scratch, graph, triplet, trees)?;
            scratch.beta.logits_mut()[j] = orig - epsilon;
            let down = replay_loss(&scratch, graph, triplet, trees)?;
            scratch.beta.logits_mut()[j] = orig;
            let central = (up - down) / (2.0 * epsilon);
            max_rel = max_rel.max(relative_error(analytic.beta_logits[j], central));
        }
    }

    Ok(max_rel)
}

fn replay_loss(
    model: &Model,
    graph: &BipartiteGraph,
    triplet: Triplet,
    trees: &TripletTrees,
) -> Result<f64> {
    let tape = forward_triplet(model, graph, triplet, trees)?;
    Ok(triplet_loss(&tape, model))
}

fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-12)
}

/// One cell of the gradient verification grid.
#[derive(Debug, Clone, Copy)]
pub struct GridCell {
    pub guide_mode: GuideMode,
    pub num_layers: usize,
    pub max_rel_err: f64,
}

/// Perturbation used by the default verification grid. The top of the
/// allowed range: large enough that f64 roundoff in the loss difference
/// stays well below the 1e-5 gate even on near-zero gradient coordinates,
/// while O(eps^2) truncation remains around 1e-9.
pub const DEFAULT_CHECK_EPSILON: f64 = 1e-4;

/// Relative-error gate every grid cell must stay under.
pub const GRAD_CHECK_GATE: f64 = 1e-5;

/// Default verification fixture: a 30-node planted-block graph at d = 8.
pub fn grid_fixture(seed: u64) -> Result<(crate::data::InteractionDataset, BipartiteGraph)> {
    let ds = crate::data::generate_synthetic(15, 15, 3, 0.8, 0.1, seed)?;
    let graph = BipartiteGraph::build(&ds);
    Ok((ds, graph))
}

/// Runs the finite-difference check over every guide mode and K in 0..=3.
pub fn check_grad_grid(seed: u64, epsilon: f64) -> Result<Vec<GridCell>> {
    use rand::SeedableRng;
    let (_, graph) = grid_fixture(seed)?;
    let triplet = pick_triplet(&graph);
    let mut cells = Vec::new();
    for mode in [
        GuideMode::LightGcnNorm,
        GuideMode::SelfGuided,
        GuideMode::Interactive,
    ] {
        for k in 0..=3 {
            let hp = crate::model::Hyperparams {
                dim: 8,
                num_layers: k,
                tau: 1.0,
                guide_mode: mode,
                beta_mode: crate::model::BetaMode::Learned,
                l2_lambda: 1e-4,
                learning_rate: 1e-3,
            };
            let model = Model::init(hp, graph.num_users(), graph.num_items(), seed ^ 0x9e3779b9)?;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed.wrapping_add(k as u64));
            let err = finite_diff_check(
                &model,
                &graph,
                triplet,
                &TreePolicy::full(),
                epsilon,
                &mut rng,
            )?;
            cells.push(GridCell {
                guide_mode: mode,
                num_layers: k,
                max_rel_err: err,
            });
        }
    }
    Ok(cells)
}

/// Picks a deterministic triplet: the first user with both an interaction
/// and a usable non-interaction, its first train item, and the first
/// eligible negative with nonzero degree.
pub fn pick_triplet(graph: &BipartiteGraph) -> Triplet {
    for u in 0..graph.num_users() {
        let items = graph.items_of(u);
        if items.is_empty() || items.len() as u32 == graph.num_items() {
            continue;
        }
        let pos = items[0];
        let neg = (0..graph.num_items())
            .find(|&i| !graph.has_edge(u, i) && graph.degree(NodeRef::Item(i)) > 0);
        if let Some(neg) = neg {
            return Triplet { user: u, pos, neg };
        }
    }
    panic!("no usable triplet in graph");
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{BetaMode, Hyperparams};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn hp(dim: usize, layers: usize, mode: GuideMode, lambda: f64) -> Hyperparams {
        Hyperparams {
            dim,
            num_layers: layers,
            tau: 1.0,
            guide_mode: mode,
            beta_mode: BetaMode::Learned,
            l2_lambda: lambda,
            learning_rate: 1e-3,
        }
    }

    fn fixture(layers: usize, mode: GuideMode, lambda: f64) -> (BipartiteGraph, Model, Triplet) {
        let (_, graph) = grid_fixture(30).unwrap();
        let model = Model::init(
            hp(8, layers, mode, lambda),
            graph.num_users(),
            graph.num_items(),
            12345,
        )
        .unwrap();
        let triplet = pick_triplet(&graph);
        (graph, model, triplet)
    }

    #[test]
    fn k0_gradient_matches_closed_form() {
        let (graph, model, triplet) = fixture(0, GuideMode::Interactive, 1e-3);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let trees = sample_triplet_trees(&graph, 0, triplet, &TreePolicy::full(), &mut rng);
        let tape = forward_triplet(&model, &graph, triplet, &trees).unwrap();
        let buf = backward_triplet(&tape, &model);

        let delta = tape.score_diff();
        let coeff = sigmoid(-delta);
        let ep = model.table.item_row(triplet.pos);
        let en = model.table.item_row(triplet.neg);
        let eu = model.table.user_row(triplet.user);
        let lambda = model.hp.l2_lambda;
        let got = buf.node(NodeRef::User(triplet.user)).unwrap();
        for t in 0..8 {
            let want = -coeff * (ep[t] - en[t]) + 2.0 * lambda * eu[t];
            assert!((got[t] - want).abs() < 1e-14, "coord {t}");
        }
    }

    #[test]
    fn equal_scores_give_half_sigmoid_factor() {
        // Duplicate item rows force score_pos == score_neg, so the
        // score-difference path carries sigma(0) = 1/2 exactly.
        let (graph, mut model, triplet) = fixture(0, GuideMode::Interactive, 0.0);
        let d = model.hp.dim;
        let pos_row: Vec<f64> = model.table.item_row(triplet.pos).to_vec();
        model.table.item_emb[triplet.neg as usize * d..(triplet.neg as usize + 1) * d]
            .copy_from_slice(&pos_row);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let trees = sample_triplet_trees(&graph, 0, triplet, &TreePolicy::full(), &mut rng);
        let tape = forward_triplet(&model, &graph, triplet, &trees).unwrap();
        assert_eq!(tape.score_diff(), 0.0);
        let buf = backward_triplet(&tape, &model);
        // d loss / d e0_{i+} = -sigma(0) * e0_u = -e0_u / 2
        let got = buf.node(NodeRef::Item(triplet.pos)).unwrap();
        let eu = model.table.user_row(triplet.user);
        for t in 0..8 {
            assert!((got[t] + 0.5 * eu[t]).abs() < 1e-15);
        }
    }

    #[test]
    fn k0_finite_difference_is_tight() {
        let (graph, model, triplet) = fixture(0, GuideMode::Interactive, 1e-4);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let err =
            finite_diff_check(&model, &graph, triplet, &TreePolicy::full(), 1e-5, &mut rng)
                .unwrap();
        assert!(err < 1e-8, "K=0 relative error {err}");
    }

    #[test]
    fn k2_interactive_passes_finite_difference() {
        let (graph, model, triplet) = fixture(2, GuideMode::Interactive, 1e-4);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let err =
            finite_diff_check(&model, &graph, triplet, &TreePolicy::full(), 1e-5, &mut rng)
                .unwrap();
        assert!(err < 1e-5, "K=2 interactive relative error {err}");
    }

    #[test]
    fn full_grid_passes_finite_difference() {
        let cells = check_grad_grid(30, DEFAULT_CHECK_EPSILON).unwrap();
        assert_eq!(cells.len(), 12);
        for c in &cells {
            assert!(
                c.max_rel_err < GRAD_CHECK_GATE,
                "{:?} K={} err={}",
                c.guide_mode,
                c.num_layers,
                c.max_rel_err
            );
        }
    }

    #[test]
    fn k3_interactive_passes_at_small_epsilon() {
        let (graph, model, triplet) = fixture(3, GuideMode::Interactive, 1e-4);
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let err =
            finite_diff_check(&model, &graph, triplet, &TreePolicy::full(), 1e-6, &mut rng)
                .unwrap();
        assert!(err < 1e-5, "K=3 interactive at eps=1e-6: {err}");
    }

    #[test]
    fn sabotaged_attention_backward_fails_the_check() {
        let (graph, model, triplet) = fixture(2, GuideMode::Interactive, 1e-4);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let trees = sample_triplet_trees(&graph, 2, triplet, &TreePolicy::full(), &mut rng);
        let tape = forward_triplet(&model, &graph, triplet, &trees).unwrap();
        let bad = backward_triplet_sabotaged(&tape, &model);
        let err = finite_diff_against(&model, &graph, triplet, &trees, &bad, 1e-5).unwrap();
        assert!(err > 1e-3, "sign flip must be detected, got {err}");
    }

    #[test]
    fn regularizer_does_not_touch_beta_gradients() {
        let (graph, model_zero, triplet) = fixture(2, GuideMode::Interactive, 0.0);
        let mut model_reg = model_zero.clone();
        model_reg.hp.l2_lambda = 1e-4;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let trees = sample_triplet_trees(&graph, 2, triplet, &TreePolicy::full(), &mut rng);
        let tape0 = forward_triplet(&model_zero, &graph, triplet, &trees).unwrap();
        let tape1 = forward_triplet(&model_reg, &graph, triplet, &trees).unwrap();
        let b0 = backward_triplet(&tape0, &model_zero);
        let b1 = backward_triplet(&tape1, &model_reg);
        assert_eq!(b0.beta_logits, b1.beta_logits);
    }

    #[test]
    fn untouched_rows_get_no_gradient() {
        let (graph, model, triplet) = fixture(1, GuideMode::Interactive, 1e-4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let trees = sample_triplet_trees(&graph, 1, triplet, &TreePolicy::full(), &mut rng);
        let tape = forward_triplet(&model, &graph, triplet, &trees).unwrap();
        let buf = backward_triplet(&tape, &model);

        let mut tree_nodes = std::collections::HashSet::new();
        for tree in [
            &trees.user_pos,
            &trees.user_neg,
            &trees.pos_item,
            &trees.neg_item,
        ] {
            for k in 0..=tree.depth() {
                tree_nodes.extend(tree.level_nodes(k).iter().copied());
            }
        }
        tree_nodes.insert(NodeRef::Item(triplet.pos));
        tree_nodes.insert(NodeRef::Item(triplet.neg));
        tree_nodes.insert(NodeRef::User(triplet.user));

        for u in buf.touched_users() {
            assert!(tree_nodes.contains(&NodeRef::User(u)), "user {u}");
        }
        for i in buf.touched_items() {
            assert!(tree_nodes.contains(&NodeRef::Item(i)), "item {i}");
        }
        // And at least one row outside the trees exists and stays absent.
        let outside = (0..graph.num_users())
            .map(NodeRef::User)
            .find(|n| !tree_nodes.contains(n));
        if let Some(node) = outside {
            assert!(buf.node(node).is_none());
        }
    }
}

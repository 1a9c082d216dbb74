//! Embedding storage and the forward pass: guided aggregation over sampled
//! trees, layer combination, and pair scoring.
//!
//! All three guide modes share one bottom-up propagation over a
//! [`SampledTree`]: a parent position at level k aggregates its children's
//! order-j features into its own order-(j+1) features, for every order the
//! parent still needs. Aggregation weights are fixed per parent position —
//! attention similarities only ever read 0-order embeddings, so one weight
//! vector serves every order flowing through that parent.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{sample_tree, BipartiteGraph, NodeRef, SampledTree, TreePolicy};

/// How per-parent aggregation weights are produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GuideMode {
    /// Softmax over child similarity to the other tree's root (the target).
    Interactive,
    /// Softmax over child similarity to the tree's own root.
    SelfGuided,
    /// Static `1/sqrt(deg(p)*deg(c))` degree normalization; guides ignored.
    LightGcnNorm,
}

impl GuideMode {
    pub fn uses_attention(self) -> bool {
        !matches!(self, GuideMode::LightGcnNorm)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            GuideMode::Interactive => "interactive",
            GuideMode::SelfGuided => "self_guided",
            GuideMode::LightGcnNorm => "lightgcn_norm",
        }
    }
}

impl std::str::FromStr for GuideMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "interactive" => Ok(GuideMode::Interactive),
            "self_guided" => Ok(GuideMode::SelfGuided),
            "lightgcn_norm" => Ok(GuideMode::LightGcnNorm),
            other => Err(Error::Config(format!(
                "unknown guide_mode {other:?} (expected interactive, self_guided, or lightgcn_norm)"
            ))),
        }
    }
}

/// Layer-combination coefficient handling.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BetaMode {
    /// Fixed uniform 1/(K+1) coefficients.
    Mean,
    /// Coefficients trained as free logits under a simplex map.
    Learned,
}

impl BetaMode {
    pub fn as_str(self) -> &'static str {
        match self {
            BetaMode::Mean => "mean",
            BetaMode::Learned => "learned",
        }
    }
}

impl std::str::FromStr for BetaMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(BetaMode::Mean),
            "learned" => Ok(BetaMode::Learned),
            other => Err(Error::Config(format!(
                "unknown beta_mode {other:?} (expected mean or learned)"
            ))),
        }
    }
}

/// Model hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hyperparams {
    pub dim: usize,
    pub num_layers: usize,
    pub tau: f64,
    pub guide_mode: GuideMode,
    pub beta_mode: BetaMode,
    pub l2_lambda: f64,
    pub learning_rate: f64,
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::InvalidParam("dim must be >= 1".into()));
        }
        if !(self.tau > 0.0) {
            return Err(Error::InvalidParam(format!("tau must be > 0, got {}", self.tau)));
        }
        if !(self.l2_lambda >= 0.0) {
            return Err(Error::InvalidParam(format!(
                "lambda must be >= 0, got {}",
                self.l2_lambda
            )));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidParam(format!(
                "lr must be > 0, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

/// The trainable 0-order embeddings for all users and items, row-major f64.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    pub num_users: u32,
    pub num_items: u32,
    pub dim: usize,
    pub user_emb: Vec<f64>,
    pub item_emb: Vec<f64>,
}

impl EmbeddingTable {
    pub fn user_row(&self, u: u32) -> &[f64] {
        let d = self.dim;
        &self.user_emb[u as usize * d..(u as usize + 1) * d]
    }

    pub fn item_row(&self, i: u32) -> &[f64] {
        let d = self.dim;
        &self.item_emb[i as usize * d..(i as usize + 1) * d]
    }

    pub fn row(&self, node: NodeRef) -> &[f64] {
        match node {
            NodeRef::User(u) => self.user_row(u),
            NodeRef::Item(i) => self.item_row(i),
        }
    }

    pub fn from_rows(
        num_users: u32,
        num_items: u32,
        dim: usize,
        user_emb: Vec<f64>,
        item_emb: Vec<f64>,
    ) -> Result<Self> {
        if user_emb.len() != num_users as usize * dim || item_emb.len() != num_items as usize * dim
        {
            return Err(Error::LengthMismatch(format!(
                "embedding buffers {}x{} do not match {num_users} users / {num_items} items at dim {dim}",
                user_emb.len(),
                item_emb.len()
            )));
        }
        Ok(EmbeddingTable {
            num_users,
            num_items,
            dim,
            user_emb,
            item_emb,
        })
    }
}

/// Glorot-uniform initialization with fan_in = fan_out = d, so entries are
/// uniform on +-sqrt(3/d). Deterministic per seed.
pub fn init_embeddings(num_users: u32, num_items: u32, dim: usize, seed: u64) -> EmbeddingTable {
    assert!(dim >= 1, "dim must be positive");
    let bound = (6.0 / (2.0 * dim as f64)).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fill = |len: usize| -> Vec<f64> {
        (0..len).map(|_| (2.0 * rng.gen::<f64>() - 1.0) * bound).collect()
    };
    let user_emb = fill(num_users as usize * dim);
    let item_emb = fill(num_items as usize * dim);
    EmbeddingTable {
        num_users,
        num_items,
        dim,
        user_emb,
        item_emb,
    }
}

/// Layer-combination coefficients stored as free logits; `betas()` applies
/// the simplex map, so the nonnegativity and sum-to-one constraints hold by
/// construction. Uniform logits give exactly 1/(K+1) per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    logits: Vec<f64>,
    trainable: bool,
}

impl LayerWeights {
    pub fn new(num_layers: usize, mode: BetaMode) -> Self {
        LayerWeights {
            logits: vec![0.0; num_layers + 1],
            trainable: matches!(mode, BetaMode::Learned),
        }
    }

    /// Rebuilds weights from stored beta values (`softmax(ln beta) = beta`
    /// whenever the values already lie on the simplex).
    pub fn from_betas(betas: &[f64], trainable: bool) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::LengthMismatch("empty beta vector".into()));
        }
        if betas.iter().any(|b| !b.is_finite() || *b < 0.0) {
            return Err(Error::InvalidParam("beta values must be finite and >= 0".into()));
        }
        if betas.iter().all(|&b| b == 0.0) {
            return Err(Error::InvalidParam("beta values must not all be zero".into()));
        }
        Ok(LayerWeights {
            logits: betas.iter().map(|&b| b.ln()).collect(),
            trainable,
        })
    }

    pub fn len(&self) -> usize {
        self.logits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.logits.is_empty()
    }

    pub fn is_trainable(&self) -> bool {
        self.trainable
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn logits_mut(&mut self) -> &mut [f64] {
        &mut self.logits
    }

    pub fn betas(&self) -> Vec<f64> {
        softmax(&self.logits)
    }
}

/// Numerically safe softmax (max subtraction).
pub(crate) fn softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = scores.iter().map(|&s| (s - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for w in &mut out {
        *w /= sum;
    }
    out
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Guided softmax weights over a parent's children: child `c` gets
/// `exp(<e0_g, e0_c>/tau)` normalized over the sibling set.
pub fn attention_weights(guide_emb: &[f64], child_embs: &[&[f64]], tau: f64) -> Result<Vec<f64>> {
    assert!(!child_embs.is_empty(), "attention needs at least one child");
    assert!(tau > 0.0, "tau must be positive");
    if !guide_emb.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("attention guide embedding"));
    }
    let mut scores = Vec::with_capacity(child_embs.len());
    for child in child_embs {
        let s = dot(guide_emb, child) / tau;
        if !s.is_finite() {
            return Err(Error::NonFinite("attention similarity"));
        }
        scores.push(s);
    }
    Ok(softmax(&scores))
}

/// Degree-normalization weights `1/sqrt(deg(p)*deg(c))`; full graph degrees,
/// not sampled child counts. Need not sum to one.
pub fn lightgcn_weights(
    graph: &BipartiteGraph,
    parent: NodeRef,
    children: &[NodeRef],
) -> Result<Vec<f64>> {
    let dp = graph.degree(parent);
    if dp == 0 {
        return Err(Error::ZeroDegree(format!("{parent:?}")));
    }
    let mut out = Vec::with_capacity(children.len());
    for &c in children {
        let dc = graph.degree(c);
        if dc == 0 {
            return Err(Error::ZeroDegree(format!("{c:?}")));
        }
        out.push(1.0 / ((dp as f64) * (dc as f64)).sqrt());
    }
    Ok(out)
}

/// Weighted sum of child vectors.
pub fn aggregate_level(child_vectors: &[&[f64]], weights: &[f64]) -> Vec<f64> {
    assert_eq!(child_vectors.len(), weights.len());
    assert!(!child_vectors.is_empty());
    let mut out = vec![0.0; child_vectors[0].len()];
    for (v, &w) in child_vectors.iter().zip(weights) {
        axpy(w, v, &mut out);
    }
    out
}

/// Per-layer root representations `[e0, e1, ..., eK]` of one propagated tree.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerStack {
    dim: usize,
    data: Vec<f64>, // (K+1) x d, order-major
}

impl LayerStack {
    pub fn num_layers(&self) -> usize {
        self.data.len() / self.dim - 1
    }

    pub fn order(&self, k: usize) -> &[f64] {
        &self.data[k * self.dim..(k + 1) * self.dim]
    }

    /// Convex combination of the stacked orders.
    pub fn combine(&self, betas: &[f64]) -> Result<Vec<f64>> {
        combine(self, betas)
    }
}

/// `e* = sum_k beta_k e^k`.
pub fn combine(stack: &LayerStack, betas: &[f64]) -> Result<Vec<f64>> {
    if betas.len() != stack.num_layers() + 1 {
        return Err(Error::LengthMismatch(format!(
            "{} beta values for a stack of {} layers",
            betas.len(),
            stack.num_layers() + 1
        )));
    }
    let mut out = vec![0.0; stack.dim];
    for (k, &b) in betas.iter().enumerate() {
        axpy(b, stack.order(k), &mut out);
    }
    Ok(out)
}

/// Forward record of one propagated tree: every position's features for the
/// orders it carries, plus the per-parent aggregation weights. Enough to
/// replay the aggregation exactly during backpropagation.
#[derive(Debug, Clone)]
pub struct TreeForward {
    pub guide: NodeRef,
    pub guide_e0: Vec<f64>,
    pub dim: usize,
    pub depth: usize,
    /// `feats[k]` holds level-k positions, each a flat `(depth-k+1) x d`
    /// block: order j of position p starts at `p*stride + j*d`.
    pub feats: Vec<Vec<f64>>,
    /// `weights[k][j]` is the aggregation weight of level-(k+1) position `j`
    /// toward its parent; aligned with `tree.level_nodes(k+1)`.
    pub weights: Vec<Vec<f64>>,
}

impl TreeForward {
    pub fn orders_at(&self, level: usize) -> usize {
        self.depth - level + 1
    }

    pub fn feat(&self, level: usize, pos: usize, order: usize) -> &[f64] {
        let stride = self.orders_at(level) * self.dim;
        let start = pos * stride + order * self.dim;
        &self.feats[level][start..start + self.dim]
    }

    /// The root's `[e0..eK]` stack.
    pub fn stack(&self) -> LayerStack {
        LayerStack {
            dim: self.dim,
            data: self.feats[0].clone(),
        }
    }
}

/// Bottom-up guided propagation over a sampled tree.
///
/// Weight source per `hp.guide_mode`: interactive and self-guided modes score
/// children against `guide`'s 0-order embedding; degree normalization ignores
/// the guide. Distinct tree positions of the same graph node are aggregated
/// independently. Parents left without children (isolated roots, target
/// exclusion) contribute zero vectors for their higher orders.
pub fn propagate(
    tree: &SampledTree,
    guide: NodeRef,
    table: &EmbeddingTable,
    graph: &BipartiteGraph,
    hp: &Hyperparams,
) -> Result<TreeForward> {
    if tree.depth() != hp.num_layers {
        return Err(Error::DepthMismatch {
            tree: tree.depth(),
            expected: hp.num_layers,
        });
    }
    let d = hp.dim;
    let depth = tree.depth();

    let mut feats: Vec<Vec<f64>> = Vec::with_capacity(depth + 1);
    for k in 0..=depth {
        let orders = depth - k + 1;
        let nodes = tree.level_nodes(k);
        let mut level = vec![0.0; nodes.len() * orders * d];
        for (pos, &node) in nodes.iter().enumerate() {
            level[pos * orders * d..pos * orders * d + d].copy_from_slice(table.row(node));
        }
        feats.push(level);
    }

    let guide_e0 = table.row(guide).to_vec();
    let mut weights: Vec<Vec<f64>> = (0..depth)
        .map(|k| vec![0.0; tree.level_nodes(k + 1).len()])
        .collect();

    for k in (0..depth).rev() {
        let parents = tree.level_nodes(k);
        let child_nodes = tree.level_nodes(k + 1);
        let parent_orders = depth - k + 1;
        let child_orders = depth - k;
        let (parent_feats, child_feats) = split_adjacent(&mut feats, k);
        for (p, &parent) in parents.iter().enumerate() {
            let range = tree.children_range(k, p);
            if range.is_empty() {
                continue;
            }
            let children = &child_nodes[range.clone()];
            let w = match hp.guide_mode {
                GuideMode::LightGcnNorm => lightgcn_weights(graph, parent, children)?,
                GuideMode::Interactive | GuideMode::SelfGuided => {
                    let rows: Vec<&[f64]> = children.iter().map(|&c| table.row(c)).collect();
                    attention_weights(&guide_e0, &rows, hp.tau)?
                }
            };
            for j in 0..child_orders {
                let dst =
                    &mut parent_feats[p * parent_orders * d + (j + 1) * d..][..d];
                for (ci, c_pos) in range.clone().enumerate() {
                    let src = &child_feats[c_pos * child_orders * d + j * d..][..d];
                    axpy(w[ci], src, dst);
                }
            }
            weights[k][range].copy_from_slice(&w);
        }
    }

    Ok(TreeForward {
        guide,
        guide_e0,
        dim: d,
        depth,
        feats,
        weights,
    })
}

/// Splits `feats` into the level-k slice (mutable) and the level-(k+1) slice.
fn split_adjacent(feats: &mut [Vec<f64>], k: usize) -> (&mut Vec<f64>, &Vec<f64>) {
    let (head, tail) = feats.split_at_mut(k + 1);
    (&mut head[k], &tail[0])
}

/// The full parameter set: hyperparameters, the embedding table, and the
/// layer-combination weights.
#[derive(Debug, Clone)]
pub struct Model {
    pub hp: Hyperparams,
    pub table: EmbeddingTable,
    pub beta: LayerWeights,
}

impl Model {
    pub fn init(hp: Hyperparams, num_users: u32, num_items: u32, seed: u64) -> Result<Self> {
        hp.validate()?;
        Ok(Model {
            hp,
            table: init_embeddings(num_users, num_items, hp.dim, seed),
            beta: LayerWeights::new(hp.num_layers, hp.beta_mode),
        })
    }

    /// Trainable scalar count: every embedding entry, plus the beta logits
    /// when they are learned.
    pub fn param_count(&self) -> usize {
        let emb = (self.table.num_users as usize + self.table.num_items as usize) * self.hp.dim;
        emb + if self.beta.is_trainable() {
            self.beta.len()
        } else {
            0
        }
    }

    /// Samples the pair's two trees (each excluding its guide when the
    /// policy asks for it).
    pub fn sample_pair_trees<R: Rng + ?Sized>(
        &self,
        graph: &BipartiteGraph,
        u: u32,
        i: u32,
        policy: &TreePolicy,
        rng: &mut R,
    ) -> (SampledTree, SampledTree) {
        let k = self.hp.num_layers;
        let (user_excl, item_excl) = if policy.exclude_target {
            (Some(NodeRef::Item(i)), Some(NodeRef::User(u)))
        } else {
            (None, None)
        };
        let user_tree = sample_tree(graph, NodeRef::User(u), k, policy, user_excl, rng);
        let item_tree = sample_tree(graph, NodeRef::Item(i), k, policy, item_excl, rng);
        (user_tree, item_tree)
    }

    /// Chooses the guide for a tree rooted at `root` when the other tree's
    /// root is `other`.
    pub fn guide_for(&self, root: NodeRef, other: NodeRef) -> NodeRef {
        match self.hp.guide_mode {
            GuideMode::Interactive => other,
            GuideMode::SelfGuided | GuideMode::LightGcnNorm => root,
        }
    }

    /// Forward pass over already-sampled trees; returns both tree records
    /// and the pair score.
    pub fn forward_pair(
        &self,
        graph: &BipartiteGraph,
        user_tree: &SampledTree,
        item_tree: &SampledTree,
    ) -> Result<PairForward> {
        let u_root = user_tree.root();
        let i_root = item_tree.root();
        let user_fwd = propagate(
            user_tree,
            self.guide_for(u_root, i_root),
            &self.table,
            graph,
            &self.hp,
        )?;
        let item_fwd = propagate(
            item_tree,
            self.guide_for(i_root, u_root),
            &self.table,
            graph,
            &self.hp,
        )?;
        let betas = self.beta.betas();
        let user_star = user_fwd.stack().combine(&betas)?;
        let item_star = item_fwd.stack().combine(&betas)?;
        let score = dot(&user_star, &item_star);
        Ok(PairForward {
            user_fwd,
            item_fwd,
            user_star,
            item_star,
            score,
        })
    }

    /// Predicted preference of user `u` for item `i`. With K = 0 this is
    /// exactly `<e0_u, e0_i>`.
    pub fn score_pair<R: Rng + ?Sized>(
        &self,
        graph: &BipartiteGraph,
        u: u32,
        i: u32,
        policy: &TreePolicy,
        rng: &mut R,
    ) -> Result<f64> {
        let (user_tree, item_tree) = self.sample_pair_trees(graph, u, i, policy, rng);
        Ok(self.forward_pair(graph, &user_tree, &item_tree)?.score)
    }
}

/// Everything the forward pass of one scored pair produced.
#[derive(Debug, Clone)]
pub struct PairForward {
    pub user_fwd: TreeForward,
    pub item_fwd: TreeForward,
    pub user_star: Vec<f64>,
    pub item_star: Vec<f64>,
    pub score: f64,
}

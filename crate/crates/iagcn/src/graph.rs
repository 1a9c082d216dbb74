//! Immutable bipartite-graph storage and K-level propagation trees.
//!
//! Adjacency is materialized in both directions in a compressed
//! offsets-plus-values layout so degree lookups are O(1). Propagation trees
//! alternate sides level by level: a user root has item children, whose
//! children are users again, and so on. The same graph node may occur at
//! several tree positions; positions are what get aggregated, not nodes.

use rand::Rng;

use crate::data::InteractionDataset;

/// A node handle that carries its side of the bipartite graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NodeRef {
    User(u32),
    Item(u32),
}

impl NodeRef {
    pub fn index(self) -> u32 {
        match self {
            NodeRef::User(i) | NodeRef::Item(i) => i,
        }
    }

    pub fn is_user(self) -> bool {
        matches!(self, NodeRef::User(_))
    }
}

/// Bipartite interaction graph over the training edges.
#[derive(Debug, Clone)]
pub struct BipartiteGraph {
    num_users: u32,
    num_items: u32,
    user_offsets: Vec<usize>,
    user_items: Vec<u32>,
    item_offsets: Vec<usize>,
    item_users: Vec<u32>,
}

impl BipartiteGraph {
    /// Builds both adjacency directions from a dataset's train edges.
    pub fn build(dataset: &InteractionDataset) -> Self {
        Self::from_edges(
            dataset.num_users,
            dataset.num_items,
            &dataset.train_edges,
        )
    }

    pub fn from_edges(num_users: u32, num_items: u32, edges: &[(u32, u32)]) -> Self {
        let n = num_users as usize;
        let m = num_items as usize;

        let mut user_deg = vec![0usize; n];
        let mut item_deg = vec![0usize; m];
        for &(u, i) in edges {
            user_deg[u as usize] += 1;
            item_deg[i as usize] += 1;
        }

        let user_offsets = prefix_sums(&user_deg);
        let item_offsets = prefix_sums(&item_deg);

        let mut user_items = vec![0u32; edges.len()];
        let mut item_users = vec![0u32; edges.len()];
        let mut ucur = user_offsets.clone();
        let mut icur = item_offsets.clone();
        for &(u, i) in edges {
            user_items[ucur[u as usize]] = i;
            ucur[u as usize] += 1;
            item_users[icur[i as usize]] = u;
            icur[i as usize] += 1;
        }
        for u in 0..n {
            user_items[user_offsets[u]..user_offsets[u + 1]].sort_unstable();
        }
        for i in 0..m {
            item_users[item_offsets[i]..item_offsets[i + 1]].sort_unstable();
        }

        BipartiteGraph {
            num_users,
            num_items,
            user_offsets,
            user_items,
            item_offsets,
            item_users,
        }
    }

    pub fn num_users(&self) -> u32 {
        self.num_users
    }

    pub fn num_items(&self) -> u32 {
        self.num_items
    }

    pub fn num_edges(&self) -> usize {
        self.user_items.len()
    }

    /// Items interacted with by `u`, sorted ascending.
    pub fn items_of(&self, u: u32) -> &[u32] {
        let u = u as usize;
        &self.user_items[self.user_offsets[u]..self.user_offsets[u + 1]]
    }

    /// Users who interacted with `i`, sorted ascending.
    pub fn users_of(&self, i: u32) -> &[u32] {
        let i = i as usize;
        &self.item_users[self.item_offsets[i]..self.item_offsets[i + 1]]
    }

    pub fn degree(&self, node: NodeRef) -> usize {
        match node {
            NodeRef::User(u) => self.items_of(u).len(),
            NodeRef::Item(i) => self.users_of(i).len(),
        }
    }

    pub fn has_edge(&self, u: u32, i: u32) -> bool {
        self.items_of(u).binary_search(&i).is_ok()
    }

    /// Edge count divided by the n*m pair count.
    pub fn density(&self) -> f64 {
        self.num_edges() as f64 / (self.num_users as f64 * self.num_items as f64)
    }
}

fn prefix_sums(degrees: &[usize]) -> Vec<usize> {
    let mut offsets = Vec::with_capacity(degrees.len() + 1);
    let mut acc = 0;
    offsets.push(0);
    for &d in degrees {
        acc += d;
        offsets.push(acc);
    }
    offsets
}

/// Tree construction knobs shared by training and evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TreePolicy {
    /// Per-parent child cap; `None` expands the full neighborhood.
    pub fanout: Option<usize>,
    /// When scoring a pair, drop the guide node from the guided tree's
    /// candidate children.
    pub exclude_target: bool,
}

impl Default for TreePolicy {
    fn default() -> Self {
        TreePolicy {
            fanout: None,
            exclude_target: false,
        }
    }
}

impl TreePolicy {
    pub fn full() -> Self {
        Self::default()
    }

    pub fn with_fanout(fanout: usize) -> Self {
        TreePolicy {
            fanout: Some(fanout),
            exclude_target: false,
        }
    }
}

/// One level of a sampled tree: `nodes` holds the level's tree positions,
/// `offsets[p]..offsets[p+1]` the children of parent position `p` one level
/// up (the root for the first level).
#[derive(Debug, Clone)]
pub struct TreeLevel {
    pub offsets: Vec<usize>,
    pub nodes: Vec<NodeRef>,
}

/// A K-level propagation tree rooted at a user or item.
///
/// Levels always have length `depth`; a level may be empty below the point
/// where expansion died (only possible for isolated roots or under target
/// exclusion).
#[derive(Debug, Clone)]
pub struct SampledTree {
    root: NodeRef,
    depth: usize,
    levels: Vec<TreeLevel>,
    degenerate: bool,
}

impl SampledTree {
    pub fn root(&self) -> NodeRef {
        self.root
    }

    /// The requested depth K (levels are padded to this length).
    pub fn depth(&self) -> usize {
        self.depth
    }

    /// True when the root had no usable neighbors despite K >= 1.
    pub fn is_degenerate(&self) -> bool {
        self.degenerate
    }

    /// Tree positions at level `k` (level 0 is the root alone).
    pub fn level_nodes(&self, k: usize) -> &[NodeRef] {
        if k == 0 {
            std::slice::from_ref(&self.root)
        } else {
            &self.levels[k - 1].nodes
        }
    }

    /// Children (as a range into level `k+1` positions) of parent position
    /// `parent` at level `k`.
    pub fn children_range(&self, k: usize, parent: usize) -> std::ops::Range<usize> {
        let level = &self.levels[k];
        level.offsets[parent]..level.offsets[parent + 1]
    }

    pub fn node_count(&self) -> usize {
        1 + self.levels.iter().map(|l| l.nodes.len()).sum::<usize>()
    }
}

/// Samples a K-level propagation tree rooted at `root`.
///
/// With unlimited fanout this is the full deterministic neighborhood
/// expansion; otherwise each parent's children are drawn uniformly without
/// replacement from its graph neighbors. `exclude` removes one node from
/// every candidate set.
pub fn sample_tree<R: Rng + ?Sized>(
    graph: &BipartiteGraph,
    root: NodeRef,
    depth: usize,
    policy: &TreePolicy,
    exclude: Option<NodeRef>,
    rng: &mut R,
) -> SampledTree {
    let mut levels = Vec::with_capacity(depth);
    let mut parents: Vec<NodeRef> = vec![root];
    for _ in 0..depth {
        let mut offsets = Vec::with_capacity(parents.len() + 1);
        let mut nodes = Vec::new();
        offsets.push(0);
        for &p in &parents {
            push_children(graph, p, policy.fanout, exclude, rng, &mut nodes);
            offsets.push(nodes.len());
        }
        parents = nodes.clone();
        levels.push(TreeLevel { offsets, nodes });
    }
    let degenerate = depth > 0 && levels[0].nodes.is_empty();
    SampledTree {
        root,
        depth,
        levels,
        degenerate,
    }
}

fn push_children<R: Rng + ?Sized>(
    graph: &BipartiteGraph,
    parent: NodeRef,
    fanout: Option<usize>,
    exclude: Option<NodeRef>,
    rng: &mut R,
    out: &mut Vec<NodeRef>,
) {
    let (neighbors, wrap): (&[u32], fn(u32) -> NodeRef) = match parent {
        NodeRef::User(u) => (graph.items_of(u), NodeRef::Item),
        NodeRef::Item(i) => (graph.users_of(i), NodeRef::User),
    };

    // The excluded node can only be a neighbor when it sits on the opposite
    // side of the parent.
    let excluded_id = match (parent, exclude) {
        (NodeRef::User(_), Some(NodeRef::Item(i))) => Some(i),
        (NodeRef::Item(_), Some(NodeRef::User(u))) => Some(u),
        _ => None,
    };

    let filtered: Vec<u32>;
    let candidates: &[u32] = match excluded_id {
        Some(x) if neighbors.binary_search(&x).is_ok() => {
            filtered = neighbors.iter().copied().filter(|&c| c != x).collect();
            &filtered
        }
        _ => neighbors,
    };

    match fanout {
        Some(cap) if cap < candidates.len() => {
            let picks = rand::seq::index::sample(rng, candidates.len(), cap);
            out.extend(picks.iter().map(|j| wrap(candidates[j])));
        }
        _ => out.extend(candidates.iter().map(|&c| wrap(c))),
    }
}

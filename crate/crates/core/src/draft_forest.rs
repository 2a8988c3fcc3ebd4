//! The draft forest: the small model's beam-sampling trajectory.
//!
//! Layer 0 holds one root per input beam. Layer `l >= 1` holds exactly
//! `width` nodes drawn iid from the small model's warped joint over
//! (layer `l - 1` nodes) x vocabulary. Each layer keeps the joint it was drawn
//! from, since verification needs draft probabilities exactly as sampled.
//!
//! Each root spans one tree. Trees are linearized depth-first, and a
//! topology mask lets a node see only its ancestors and itself, so the large
//! model can score a whole tree in one packed pass.

use rand::Rng;
use serde::Serialize;

use crate::beam_ref::{beam_joint, Beam, BeamSet, JointIndex};
use crate::distribution::Distribution;
use crate::error::{DecodeError, Result};
use crate::token_model::{Token, TokenModel};
use crate::warping::WarpSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct NodeRef {
    pub layer: usize,
    pub index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ForestNode {
    /// `None` for roots, whose tokens are the whole input beam.
    pub token: Option<Token>,
    /// Index into the previous layer; `None` for roots.
    pub parent: Option<usize>,
    pub layer: usize,
    /// Index of the root (input beam) this node descends from.
    pub root: usize,
    /// Warped joint draft probability of the cell this node was drawn from.
    pub q_beam_prob: Option<f64>,
    pub small_log_likelihood: f64,
}

#[derive(Debug, Clone)]
pub struct DraftForest {
    input: BeamSet,
    /// `nodes[0]` are the roots.
    nodes: Vec<Vec<ForestNode>>,
    /// `joints[l - 1]` is the draft joint layer `l` was sampled from.
    joints: Vec<Distribution>,
    width: usize,
    vocab_size: usize,
}

impl DraftForest {
    pub fn gamma(&self) -> usize {
        self.nodes.len() - 1
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn input(&self) -> &BeamSet {
        &self.input
    }

    pub fn roots(&self) -> &[ForestNode] {
        &self.nodes[0]
    }

    /// Nodes of layer `layer` (0 = roots).
    pub fn layer(&self, layer: usize) -> &[ForestNode] {
        &self.nodes[layer]
    }

    pub fn node(&self, at: NodeRef) -> Option<&ForestNode> {
        self.nodes.get(at.layer).and_then(|l| l.get(at.index))
    }

    /// Joint draft distribution of layer `layer >= 1`, over
    /// (layer `layer - 1` nodes) x vocabulary.
    pub fn layer_joint(&self, layer: usize) -> &Distribution {
        &self.joints[layer - 1]
    }

    pub fn node_count(&self) -> usize {
        self.nodes.iter().map(Vec::len).sum()
    }

    /// Draft tokens on the path from the root to `at`, root excluded.
    pub fn path_tokens(&self, at: NodeRef) -> Vec<Token> {
        let mut tokens = Vec::with_capacity(at.layer);
        let mut cur = at;
        while cur.layer > 0 {
            let node = &self.nodes[cur.layer][cur.index];
            tokens.push(node.token.expect("non-root carries a token"));
            cur = NodeRef {
                layer: cur.layer - 1,
                index: node.parent.expect("non-root has a parent"),
            };
        }
        tokens.reverse();
        tokens
    }

    /// Full token context of `at`: its root beam followed by the path.
    pub fn context(&self, at: NodeRef) -> Vec<Token> {
        let root = self.nodes[at.layer][at.index].root;
        let mut ctx = self.input.beams()[root].tokens.clone();
        ctx.extend(self.path_tokens(at));
        ctx
    }

    /// The input beam rooting the tree that contains `at`.
    pub fn root_beam(&self, at: NodeRef) -> &Beam {
        &self.input.beams()[self.nodes[at.layer][at.index].root]
    }

    /// The tree rooted at input beam `root`, children in sampling order.
    pub fn tree(&self, root: usize) -> Tree {
        let mut tree = Tree::with_root(self.input.beams()[root].tokens.clone());
        tree.nodes[0].forest_ref = Some(NodeRef { layer: 0, index: root });
        // forest index -> tree index for the previous layer
        let mut prev: Vec<Option<usize>> = (0..self.nodes[0].len())
            .map(|i| (i == root).then_some(0))
            .collect();
        for layer in 1..self.nodes.len() {
            let mut here = vec![None; self.nodes[layer].len()];
            for (i, node) in self.nodes[layer].iter().enumerate() {
                if let Some(parent) = prev[node.parent.expect("draft node has a parent")] {
                    let id = tree.add_child(parent, vec![node.token.expect("draft token")]);
                    tree.nodes[id].forest_ref = Some(NodeRef { layer, index: i });
                    here[i] = Some(id);
                }
            }
            prev = here;
        }
        tree
    }

    pub fn trees(&self) -> Vec<Tree> {
        (0..self.nodes[0].len()).map(|r| self.tree(r)).collect()
    }
}

/// Grows a forest, scoring roots under `small` from scratch.
pub fn grow_draft_forest<M, R>(
    small: &M,
    input: &BeamSet,
    width: usize,
    gamma: usize,
    warp: &WarpSpec,
    rng: &mut R,
) -> Result<DraftForest>
where
    M: TokenModel + ?Sized,
    R: Rng + ?Sized,
{
    let root_lls = input
        .beams()
        .iter()
        .map(|b| b.recompute_log_likelihood(small))
        .collect::<Result<Vec<_>>>()?;
    grow_draft_forest_from(small, input, &root_lls, width, gamma, warp, rng)
}

/// Grows a forest given the roots' small-model log-likelihoods. Issues one
/// batched small-model call per draft layer.
pub fn grow_draft_forest_from<M, R>(
    small: &M,
    input: &BeamSet,
    root_small_lls: &[f64],
    width: usize,
    gamma: usize,
    warp: &WarpSpec,
    rng: &mut R,
) -> Result<DraftForest>
where
    M: TokenModel + ?Sized,
    R: Rng + ?Sized,
{
    if width == 0 || gamma == 0 {
        return Err(DecodeError::InvalidParameter(
            "draft forest needs width >= 1 and gamma >= 1".into(),
        ));
    }
    if root_small_lls.len() != input.width() {
        return Err(DecodeError::IndexMismatch {
            left: root_small_lls.len(),
            right: input.width(),
        });
    }
    let vocab_size = small.vocab().size();
    let roots: Vec<ForestNode> = root_small_lls
        .iter()
        .enumerate()
        .map(|(i, &ll)| ForestNode {
            token: None,
            parent: None,
            layer: 0,
            root: i,
            q_beam_prob: None,
            small_log_likelihood: ll,
        })
        .collect();
    let mut forest = DraftForest {
        input: input.clone(),
        nodes: vec![roots],
        joints: Vec::with_capacity(gamma),
        width,
        vocab_size,
    };
    let mut contexts = input.contexts();
    for layer in 1..=gamma {
        let parents = &forest.nodes[layer - 1];
        let rows = small.next_distributions(&contexts);
        let lls: Vec<f64> = parents.iter().map(|n| n.small_log_likelihood).collect();
        let joint = beam_joint(&lls, &rows, warp)?;
        let mut drafted = Vec::with_capacity(width);
        let mut next_contexts = Vec::with_capacity(width);
        for _ in 0..width {
            let cell = joint.sample(rng);
            let JointIndex { beam, token } = JointIndex::from_flat(cell, vocab_size);
            let parent = &parents[beam];
            drafted.push(ForestNode {
                token: Some(token),
                parent: Some(beam),
                layer,
                root: parent.root,
                q_beam_prob: Some(joint.get(cell)),
                small_log_likelihood: parent.small_log_likelihood
                    + rows[beam].get(token as usize).ln(),
            });
            let mut ctx = contexts[beam].clone();
            ctx.push(token);
            next_contexts.push(ctx);
        }
        forest.nodes.push(drafted);
        forest.joints.push(joint);
        contexts = next_contexts;
    }
    Ok(forest)
}

// ---------------------------------------------------------------------------
// Trees, DFS order and topology masks
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct TreeNode {
    pub parent: Option<usize>,
    pub children: Vec<usize>,
    /// Tokens this node contributes to its descendants' contexts.
    pub segment: Vec<Token>,
    pub forest_ref: Option<NodeRef>,
}

/// A rooted tree; node 0 is the root.
#[derive(Debug, Clone, PartialEq)]
pub struct Tree {
    nodes: Vec<TreeNode>,
}

impl Tree {
    pub fn with_root(segment: Vec<Token>) -> Self {
        Self {
            nodes: vec![TreeNode {
                parent: None,
                children: Vec::new(),
                segment,
                forest_ref: None,
            }],
        }
    }

    pub fn add_child(&mut self, parent: usize, segment: Vec<Token>) -> usize {
        let id = self.nodes.len();
        self.nodes.push(TreeNode {
            parent: Some(parent),
            children: Vec::new(),
            segment,
            forest_ref: None,
        });
        self.nodes[parent].children.push(id);
        id
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, id: usize) -> &TreeNode {
        &self.nodes[id]
    }
}

/// Node ids in depth-first pre-order, children in insertion order.
pub fn dfs_linearize(tree: &Tree) -> Vec<usize> {
    let mut order = Vec::with_capacity(tree.len());
    let mut stack = vec![0];
    while let Some(id) = stack.pop() {
        order.push(id);
        stack.extend(tree.nodes[id].children.iter().rev());
    }
    order
}

/// Square visibility matrix over DFS positions: row `i` may attend to column
/// `j` iff position `j` holds an ancestor of position `i`, or `i == j`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TopologyMask {
    /// `order[i]` is the tree node id at DFS position `i`.
    order: Vec<usize>,
    bits: Vec<bool>,
}

impl TopologyMask {
    pub fn size(&self) -> usize {
        self.order.len()
    }

    pub fn order(&self) -> &[usize] {
        &self.order
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.order.len() + col]
    }

    /// Rows rendered as `1`/`.` strings, for dumps.
    pub fn render(&self) -> Vec<String> {
        let n = self.size();
        (0..n)
            .map(|i| {
                (0..n)
                    .map(|j| if self.get(i, j) { '1' } else { '.' })
                    .collect()
            })
            .collect()
    }
}

pub fn topology_mask(tree: &Tree) -> TopologyMask {
    let order = dfs_linearize(tree);
    let n = order.len();
    let mut position = vec![0; tree.len()];
    for (pos, &id) in order.iter().enumerate() {
        position[id] = pos;
    }
    let mut bits = vec![false; n * n];
    // Parents precede children in pre-order, so each row extends its
    // parent's finished row.
    for (i, &id) in order.iter().enumerate() {
        if let Some(parent) = tree.nodes[id].parent {
            let p = position[parent];
            let (done, rest) = bits.split_at_mut(i * n);
            rest[..n].copy_from_slice(&done[p * n..p * n + n]);
        }
        bits[i * n + i] = true;
    }
    TopologyMask { order, bits }
}

/// Per-position contexts a masked packed pass would see: the concatenated
/// segments of every visible position, in DFS order.
pub fn masked_contexts(tree: &Tree, mask: &TopologyMask) -> Vec<Vec<Token>> {
    let n = mask.size();
    (0..n)
        .map(|i| {
            (0..n)
                .filter(|&j| mask.get(i, j))
                .flat_map(|j| tree.nodes[mask.order[j]].segment.iter().copied())
                .collect()
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Cache lineages
// ---------------------------------------------------------------------------

/// An output beam, as seen by the cache bookkeeping.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Survivor {
    /// An accepted draft node.
    Node(NodeRef),
    /// A beam sampled during verification, extending some tree of `root`.
    Resampled { root: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LineageReport {
    /// Whether each root's cache is kept.
    pub survives: Vec<bool>,
    pub count: usize,
}

/// Which per-input-beam caches remain live after an iteration.
pub fn cache_lineages(forest: &DraftForest, survivors: &[Survivor]) -> Result<LineageReport> {
    let roots = forest.roots().len();
    let mut survives = vec![false; roots];
    for s in survivors {
        let root = match *s {
            Survivor::Node(at) => {
                forest
                    .node(at)
                    .ok_or(DecodeError::UnknownNode {
                        layer: at.layer,
                        index: at.index,
                    })?
                    .root
            }
            Survivor::Resampled { root } => root,
        };
        if root >= roots {
            return Err(DecodeError::UnknownRoot { root, roots });
        }
        survives[root] = true;
    }
    let count = survives.iter().filter(|&&s| s).count();
    Ok(LineageReport { survives, count })
}

// ---------------------------------------------------------------------------
// Debug dump
// ---------------------------------------------------------------------------

/// Verification outcome of a single forest node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeStatus {
    Accepted,
    Rejected,
    /// Parent was rejected, so the node was never examined.
    Pruned,
    /// Examined after the layer already reached its target width.
    CutOff,
    Unverified,
}

#[derive(Debug, Clone, Serialize)]
pub struct DumpNode {
    pub layer: usize,
    pub index: usize,
    pub parent: Option<usize>,
    pub root: usize,
    pub token: Option<Token>,
    pub q_beam_prob: Option<f64>,
    pub small_log_likelihood: f64,
    pub status: NodeStatus,
}

#[derive(Debug, Clone, Serialize)]
pub struct DumpTree {
    pub root: usize,
    pub dfs: Vec<NodeRef>,
    pub mask: Vec<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ForestDump {
    pub gamma: usize,
    pub width: usize,
    pub nodes: Vec<DumpNode>,
    pub trees: Vec<DumpTree>,
}

impl DraftForest {
    /// Snapshot for inspection. `status` maps a node to its verification
    /// outcome; roots report `Accepted`.
    pub fn dump(&self, status: impl Fn(NodeRef) -> NodeStatus) -> ForestDump {
        let nodes = self
            .nodes
            .iter()
            .enumerate()
            .flat_map(|(layer, nodes)| {
                let status = &status;
                nodes.iter().enumerate().map(move |(index, n)| DumpNode {
                    layer,
                    index,
                    parent: n.parent,
                    root: n.root,
                    token: n.token,
                    q_beam_prob: n.q_beam_prob,
                    small_log_likelihood: n.small_log_likelihood,
                    status: if layer == 0 {
                        NodeStatus::Accepted
                    } else {
                        status(NodeRef { layer, index })
                    },
                })
            })
            .collect();
        let trees = (0..self.roots().len())
            .map(|root| {
                let tree = self.tree(root);
                let mask = topology_mask(&tree);
                DumpTree {
                    root,
                    dfs: mask
                        .order()
                        .iter()
                        .map(|&id| tree.node(id).forest_ref.expect("forest tree"))
                        .collect(),
                    mask: mask.render(),
                }
            })
            .collect();
        ForestDump {
            gamma: self.gamma(),
            width: self.width,
            nodes,
            trees,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::token_model::{make_markov_model, Vocabulary};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn chain(n: usize) -> Tree {
        let mut t = Tree::with_root(vec![0]);
        let mut last = 0;
        for i in 1..n {
            last = t.add_child(last, vec![i as Token]);
        }
        t
    }

    /// Brute force: walk parent pointers from every node.
    fn ancestor_mask(tree: &Tree, order: &[usize]) -> Vec<Vec<bool>> {
        let pos = |id: usize| order.iter().position(|&o| o == id).unwrap();
        let n = tree.len();
        let mut m = vec![vec![false; n]; n];
        for &id in order {
            let mut cur = Some(id);
            while let Some(c) = cur {
                m[pos(id)][pos(c)] = true;
                cur = tree.node(c).parent;
            }
        }
        m
    }

    fn random_tree(rng: &mut ChaCha8Rng, n: usize) -> Tree {
        let mut t = Tree::with_root(vec![0]);
        for i in 1..n {
            let parent = rng.random_range(0..i);
            t.add_child(parent, vec![(i % 7) as Token]);
        }
        t
    }

    #[test]
    fn dfs_examples() {
        assert_eq!(dfs_linearize(&chain(3)), vec![0, 1, 2]);
        let mut t = Tree::with_root(vec![]);
        let a = t.add_child(0, vec![1]);
        let b = t.add_child(0, vec![2]);
        let c = t.add_child(a, vec![3]);
        assert_eq!(dfs_linearize(&t), vec![0, a, c, b]);
    }

    #[test]
    fn dfs_visits_each_node_after_its_parent() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let t = random_tree(&mut rng, 20);
        let order = dfs_linearize(&t);
        let mut sorted = order.clone();
        sorted.sort();
        assert_eq!(sorted, (0..20).collect::<Vec<_>>());
        for (pos, &id) in order.iter().enumerate() {
            if let Some(p) = t.node(id).parent {
                assert!(order.iter().position(|&o| o == p).unwrap() < pos);
            }
        }
    }

    #[test]
    fn chain_mask_is_lower_triangular() {
        let m = topology_mask(&chain(5));
        for i in 0..5 {
            for j in 0..5 {
                assert_eq!(m.get(i, j), j <= i);
            }
        }
    }

    #[test]
    fn sibling_leaves_do_not_see_each_other() {
        let mut t = Tree::with_root(vec![]);
        t.add_child(0, vec![1]);
        t.add_child(0, vec![2]);
        let m = topology_mask(&t);
        assert_eq!(m.render(), vec!["1..", "11.", "1.1"]);
    }

    #[test]
    fn mask_matches_ancestor_walk() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let n = rng.random_range(1..=64);
            let t = random_tree(&mut rng, n);
            let m = topology_mask(&t);
            let oracle = ancestor_mask(&t, m.order());
            for i in 0..n {
                for j in 0..n {
                    assert_eq!(m.get(i, j), oracle[i][j]);
                }
            }
        }
    }

    fn small_model() -> crate::token_model::MarkovModel {
        make_markov_model(31, Vocabulary::new(4).unwrap(), 1, 1.0).unwrap()
    }

    #[test]
    fn one_layer_shape() {
        let m = small_model();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let f = grow_draft_forest(
            &m,
            &BeamSet::from_prompt(&[1]),
            2,
            1,
            &WarpSpec::IDENTITY,
            &mut rng,
        )
        .unwrap();
        assert_eq!(f.roots().len(), 1);
        assert_eq!(f.layer(1).len(), 2);
        assert_eq!(f.layer_joint(1).len(), 4);
        assert_eq!(f.tree(0).len(), 3);
    }

    #[test]
    fn nodes_record_their_sampling_probability_and_likelihood() {
        let m = small_model();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let warp = WarpSpec::new(Some(6), Some(0.95)).unwrap();
        let f = grow_draft_forest(&m, &BeamSet::from_prompt(&[0, 2]), 3, 2, &warp, &mut rng)
            .unwrap();
        assert_eq!(f.gamma(), 2);
        for layer in 1..=2 {
            assert_eq!(f.layer(layer).len(), 3);
            for (i, n) in f.layer(layer).iter().enumerate() {
                let cell = n.parent.unwrap() * 4 + n.token.unwrap() as usize;
                assert_eq!(n.q_beam_prob, Some(f.layer_joint(layer).get(cell)));
                assert!(n.q_beam_prob.unwrap() > 0.0);
                let at = NodeRef { layer, index: i };
                let fresh = crate::token_model::sequence_log_prob(&m, &[0, 2], &f.path_tokens(at))
                    .unwrap();
                assert!((fresh - n.small_log_likelihood).abs() < 1e-9);
                assert_eq!(f.context(at).len(), 2 + layer);
            }
        }
    }

    #[test]
    fn forest_trees_partition_the_nodes() {
        let m = small_model();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let input = BeamSet::new(vec![Beam::from_prompt(&[0]), Beam::from_prompt(&[3])]).unwrap();
        let f = grow_draft_forest(&m, &input, 4, 3, &WarpSpec::IDENTITY, &mut rng).unwrap();
        let total: usize = f.trees().iter().map(Tree::len).sum();
        assert_eq!(total, f.node_count());
        assert_eq!(f.node_count(), 2 + 4 * 3);
    }

    #[test]
    fn lineage_counting() {
        let m = small_model();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let input = BeamSet::new(vec![Beam::from_prompt(&[0]), Beam::from_prompt(&[1])]).unwrap();
        let f = grow_draft_forest(&m, &input, 3, 1, &WarpSpec::IDENTITY, &mut rng).unwrap();

        let same_root = [Survivor::Resampled { root: 0 }, Survivor::Resampled { root: 0 }];
        assert_eq!(cache_lineages(&f, &same_root).unwrap().count, 1);
        let both = [Survivor::Resampled { root: 0 }, Survivor::Resampled { root: 1 }];
        let report = cache_lineages(&f, &both).unwrap();
        assert_eq!(report.count, 2);
        assert_eq!(report.survives, vec![true, true]);

        let node = Survivor::Node(NodeRef { layer: 1, index: 0 });
        let expected_root = f.layer(1)[0].root;
        let report = cache_lineages(&f, &[node]).unwrap();
        assert!(report.survives[expected_root]);
        assert_eq!(report.count, 1);

        assert!(matches!(
            cache_lineages(&f, &[Survivor::Resampled { root: 5 }]),
            Err(DecodeError::UnknownRoot { root: 5, roots: 2 })
        ));
        assert!(cache_lineages(&f, &[Survivor::Node(NodeRef { layer: 4, index: 0 })]).is_err());
    }
}

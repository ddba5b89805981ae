//! Binary decision trees over rescaled effect modifiers, regression trees
//! (a decision tree plus one jump per leaf), the branching-process tree prior,
//! and the grow/prune proposal pair used by the Metropolis-Hastings tree move.
//!
//! Trees are stored as a pre-order node list. An internal node at index `i`
//! has its left child at `i + 1` and records the index of its right child.
//! Leaves carry a slot number: their position among the leaves in pre-order,
//! which indexes the jump vector of a [`RegressionTree`]. Every structural
//! edit rebuilds this canonical layout, so two trees with the same rules are
//! equal as values.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Hard cap on node depth. Leaves at this depth are never split.
pub const MAX_DEPTH: usize = 32;

/// Axis-aligned rule `{ z[axis] < cutpoint }`; observations satisfying it go left.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecisionRule {
    pub axis: usize,
    pub cutpoint: f64,
}

impl DecisionRule {
    pub fn new(axis: usize, cutpoint: f64) -> Self {
        debug_assert!(cutpoint > 0.0 && cutpoint < 1.0, "cutpoint {cutpoint} outside (0,1)");
        DecisionRule { axis, cutpoint }
    }

    #[inline]
    pub fn goes_left(&self, z: &[f64]) -> bool {
        z[self.axis] < self.cutpoint
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum NodeKind {
    Leaf { slot: u32 },
    Split { axis: u32, cutpoint: f64, right: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Node {
    depth: u32,
    kind: NodeKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecisionTree {
    nodes: Vec<Node>,
    n_leaves: usize,
}

impl Default for DecisionTree {
    fn default() -> Self {
        Self::root()
    }
}

impl DecisionTree {
    /// The single-leaf tree.
    pub fn root() -> Self {
        DecisionTree {
            nodes: vec![Node { depth: 0, kind: NodeKind::Leaf { slot: 0 } }],
            n_leaves: 1,
        }
    }

    pub fn n_leaves(&self) -> usize {
        self.n_leaves
    }

    pub fn n_internal(&self) -> usize {
        self.nodes.len() - self.n_leaves
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_root_only(&self) -> bool {
        self.nodes.len() == 1
    }

    /// Slot of the leaf whose cell contains `z`.
    #[inline]
    pub fn leaf_index(&self, z: &[f64]) -> usize {
        let mut i = 0usize;
        loop {
            match self.nodes[i].kind {
                NodeKind::Leaf { slot } => return slot as usize,
                NodeKind::Split { axis, cutpoint, right } => {
                    i = if z[axis as usize] < cutpoint { i + 1 } else { right as usize };
                }
            }
        }
    }

    /// Node index and depth of every internal node, in pre-order.
    pub fn internal_nodes(&self) -> impl Iterator<Item = (usize, DecisionRule, usize)> + '_ {
        self.nodes.iter().enumerate().filter_map(|(i, n)| match n.kind {
            NodeKind::Split { axis, cutpoint, .. } => Some((
                i,
                DecisionRule { axis: axis as usize, cutpoint },
                n.depth as usize,
            )),
            NodeKind::Leaf { .. } => None,
        })
    }

    pub fn rules(&self) -> impl Iterator<Item = DecisionRule> + '_ {
        self.internal_nodes().map(|(_, r, _)| r)
    }

    /// Depth of each leaf, in slot order.
    pub fn leaf_depths(&self) -> Vec<usize> {
        self.nodes
            .iter()
            .filter(|n| matches!(n.kind, NodeKind::Leaf { .. }))
            .map(|n| n.depth as usize)
            .collect()
    }

    fn leaf_node(&self, slot: usize) -> usize {
        self.nodes
            .iter()
            .position(|n| matches!(n.kind, NodeKind::Leaf { slot: s } if s as usize == slot))
            .expect("leaf slot out of range")
    }

    /// Internal nodes whose two children are both leaves (the prunable nodes).
    pub fn prunable_nodes(&self) -> Vec<usize> {
        self.nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.kind {
                NodeKind::Split { right, .. }
                    if right as usize == i + 2
                        && matches!(self.nodes[i + 1].kind, NodeKind::Leaf { .. })
                        && matches!(self.nodes[i + 2].kind, NodeKind::Leaf { .. }) =>
                {
                    Some(i)
                }
                _ => None,
            })
            .collect()
    }

    pub fn max_depth(&self) -> usize {
        self.nodes.iter().map(|n| n.depth as usize).max().unwrap_or(0)
    }

    pub fn node_rule(&self, node: usize) -> Option<DecisionRule> {
        match self.nodes[node].kind {
            NodeKind::Split { axis, cutpoint, .. } => Some(DecisionRule { axis: axis as usize, cutpoint }),
            NodeKind::Leaf { .. } => None,
        }
    }

    pub fn node_depth(&self, node: usize) -> usize {
        self.nodes[node].depth as usize
    }

    /// Split the leaf in `slot` with `rule`. The new children take slots
    /// `slot` (left) and `slot + 1` (right).
    pub fn grow(&self, slot: usize, rule: DecisionRule) -> DecisionTree {
        let at = self.leaf_node(slot);
        let depth = self.nodes[at].depth;
        let mut nodes = Vec::with_capacity(self.nodes.len() + 2);
        for (k, node) in self.nodes.iter().enumerate() {
            if k == at {
                nodes.push(Node {
                    depth,
                    kind: NodeKind::Split {
                        axis: rule.axis as u32,
                        cutpoint: rule.cutpoint,
                        right: (at + 2) as u32,
                    },
                });
                nodes.push(Node { depth: depth + 1, kind: NodeKind::Leaf { slot: 0 } });
                nodes.push(Node { depth: depth + 1, kind: NodeKind::Leaf { slot: 0 } });
            } else {
                let mut n = *node;
                if let NodeKind::Split { right, .. } = &mut n.kind {
                    if *right as usize > at {
                        *right += 2;
                    }
                }
                nodes.push(n);
            }
        }
        Self::renumbered(nodes)
    }

    /// Collapse the prunable internal node at `node` into a leaf.
    pub fn prune(&self, node: usize) -> DecisionTree {
        assert!(
            self.prunable_nodes().contains(&node),
            "node {node} does not have two leaf children"
        );
        let mut nodes = Vec::with_capacity(self.nodes.len() - 2);
        for (k, n) in self.nodes.iter().enumerate() {
            if k == node + 1 || k == node + 2 {
                continue;
            }
            if k == node {
                nodes.push(Node { depth: n.depth, kind: NodeKind::Leaf { slot: 0 } });
                continue;
            }
            let mut n = *n;
            if let NodeKind::Split { right, .. } = &mut n.kind {
                if *right as usize > node {
                    *right -= 2;
                }
            }
            nodes.push(n);
        }
        Self::renumbered(nodes)
    }

    fn renumbered(mut nodes: Vec<Node>) -> DecisionTree {
        let mut next = 0u32;
        for n in nodes.iter_mut() {
            if let NodeKind::Leaf { slot } = &mut n.kind {
                *slot = next;
                next += 1;
            }
        }
        DecisionTree { nodes, n_leaves: next as usize }
    }

    /// Build from a pre-order sequence of `Some(rule)` (internal) / `None` (leaf).
    pub fn from_preorder(items: &[Option<DecisionRule>]) -> Result<DecisionTree> {
        fn build(
            items: &[Option<DecisionRule>],
            pos: &mut usize,
            depth: u32,
            nodes: &mut Vec<Node>,
        ) -> Result<()> {
            let item = items
                .get(*pos)
                .ok_or_else(|| Error::Archive("truncated tree encoding".into()))?;
            *pos += 1;
            if depth as usize > MAX_DEPTH {
                return Err(Error::Archive("tree exceeds maximum depth".into()));
            }
            match item {
                None => nodes.push(Node { depth, kind: NodeKind::Leaf { slot: 0 } }),
                Some(rule) => {
                    if !(rule.cutpoint > 0.0 && rule.cutpoint < 1.0) {
                        return Err(Error::Archive(format!("cutpoint {} outside (0,1)", rule.cutpoint)));
                    }
                    let here = nodes.len();
                    nodes.push(Node {
                        depth,
                        kind: NodeKind::Split { axis: rule.axis as u32, cutpoint: rule.cutpoint, right: 0 },
                    });
                    build(items, pos, depth + 1, nodes)?;
                    let right = nodes.len() as u32;
                    if let NodeKind::Split { right: r, .. } = &mut nodes[here].kind {
                        *r = right;
                    }
                    build(items, pos, depth + 1, nodes)?;
                }
            }
            Ok(())
        }
        let mut nodes = Vec::with_capacity(items.len());
        let mut pos = 0;
        build(items, &mut pos, 0, &mut nodes)?;
        if pos != items.len() {
            return Err(Error::Archive("trailing nodes after complete tree".into()));
        }
        Ok(Self::renumbered(nodes))
    }

    pub fn preorder(&self) -> Vec<Option<DecisionRule>> {
        self.nodes
            .iter()
            .map(|n| match n.kind {
                NodeKind::Leaf { .. } => None,
                NodeKind::Split { axis, cutpoint, .. } => Some(DecisionRule { axis: axis as usize, cutpoint }),
            })
            .collect()
    }
}

/// A decision tree with one jump per leaf.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionTree {
    pub tree: DecisionTree,
    pub jumps: Vec<f64>,
}

impl Default for RegressionTree {
    fn default() -> Self {
        RegressionTree::constant(0.0)
    }
}

impl RegressionTree {
    pub fn new(tree: DecisionTree, jumps: Vec<f64>) -> Self {
        assert_eq!(tree.n_leaves(), jumps.len(), "one jump per leaf");
        RegressionTree { tree, jumps }
    }

    pub fn constant(mu: f64) -> Self {
        RegressionTree { tree: DecisionTree::root(), jumps: vec![mu] }
    }

    #[inline]
    pub fn evaluate(&self, z: &[f64]) -> f64 {
        self.jumps[self.tree.leaf_index(z)]
    }

    /// Pre-order text encoding: `s<axis>:<cutpoint>` for internal nodes and
    /// `l<jump>` for leaves, space separated. Floats use the shortest
    /// representation that parses back to the same bits.
    pub fn encode(&self) -> String {
        let mut out = String::new();
        let mut leaf = 0;
        for (k, item) in self.tree.preorder().into_iter().enumerate() {
            if k > 0 {
                out.push(' ');
            }
            match item {
                Some(r) => {
                    out.push('s');
                    out.push_str(&r.axis.to_string());
                    out.push(':');
                    out.push_str(&r.cutpoint.to_string());
                }
                None => {
                    out.push('l');
                    out.push_str(&self.jumps[leaf].to_string());
                    leaf += 1;
                }
            }
        }
        out
    }

    pub fn decode(s: &str) -> Result<RegressionTree> {
        let bad = |t: &str| Error::Archive(format!("bad tree token `{t}`"));
        let mut items = Vec::new();
        let mut jumps = Vec::new();
        for tok in s.split_ascii_whitespace() {
            if let Some(rest) = tok.strip_prefix('s') {
                let (a, c) = rest.split_once(':').ok_or_else(|| bad(tok))?;
                let axis = a.parse().map_err(|_| bad(tok))?;
                let cutpoint = c.parse().map_err(|_| bad(tok))?;
                items.push(Some(DecisionRule { axis, cutpoint }));
            } else if let Some(rest) = tok.strip_prefix('l') {
                let mu: f64 = rest.parse().map_err(|_| bad(tok))?;
                if !mu.is_finite() {
                    return Err(bad(tok));
                }
                items.push(None);
                jumps.push(mu);
            } else {
                return Err(bad(tok));
            }
        }
        let tree = DecisionTree::from_preorder(&items)?;
        Ok(RegressionTree { tree, jumps })
    }
}

/// Sum of an ensemble's evaluations at `z`.
pub fn ensemble_evaluate(ensemble: &[RegressionTree], z: &[f64]) -> f64 {
    ensemble.iter().map(|t| t.evaluate(z)).sum()
}

/// Number of decision rules on each modifier across an ensemble.
pub fn split_counts(ensemble: &[RegressionTree], r: usize) -> Vec<usize> {
    let mut counts = vec![0; r];
    for t in ensemble {
        for rule in t.tree.rules() {
            counts[rule.axis] += 1;
        }
    }
    counts
}

/// Probability that a node at depth `d` is internal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum SplitPrior {
    /// `base * (1 + d)^(-power)`.
    DepthPolynomial { base: f64, power: f64 },
    /// `gamma^(d + 1)`, i.e. `gamma^depth` with the root counted as depth one.
    Geometric { gamma: f64 },
}

impl Default for SplitPrior {
    fn default() -> Self {
        SplitPrior::DepthPolynomial { base: 0.95, power: 2.0 }
    }
}

impl SplitPrior {
    pub fn split_probability(&self, depth: usize) -> f64 {
        match *self {
            SplitPrior::DepthPolynomial { base, power } => base * (1.0 + depth as f64).powf(-power),
            SplitPrior::Geometric { gamma } => gamma.powi(depth as i32 + 1),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            SplitPrior::DepthPolynomial { base, power } => base > 0.0 && base < 1.0 && power >= 0.0,
            SplitPrior::Geometric { gamma } => gamma > 0.0 && gamma < 1.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("split prior {self:?} gives probabilities outside (0,1)")))
        }
    }
}

/// How cutpoints are drawn once the splitting modifier is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Cutpoints {
    /// Uniform on `(0, 1)`.
    #[default]
    Continuous,
    /// Uniform over `{1/(k+1), ..., k/(k+1)}`.
    Grid { points: usize },
}

impl Cutpoints {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            Cutpoints::Continuous => loop {
                let c: f64 = rng.random();
                if c > 0.0 {
                    return c;
                }
            },
            Cutpoints::Grid { points } => {
                let i = rng.random_range(0..points);
                (i + 1) as f64 / (points + 1) as f64
            }
        }
    }

    /// Log density (continuous) or log mass (grid) of one cutpoint.
    pub fn log_density(&self) -> f64 {
        match *self {
            Cutpoints::Continuous => 0.0,
            Cutpoints::Grid { points } => -(points as f64).ln(),
        }
    }
}

/// Branching-process prior over decision trees plus the cutpoint law.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TreePrior {
    pub split: SplitPrior,
    pub cutpoints: Cutpoints,
    pub max_depth: usize,
}

impl Default for TreePrior {
    fn default() -> Self {
        TreePrior { split: SplitPrior::default(), cutpoints: Cutpoints::Continuous, max_depth: MAX_DEPTH }
    }
}

impl TreePrior {
    pub fn split_probability(&self, depth: usize) -> f64 {
        if depth >= self.max_depth {
            0.0
        } else {
            self.split.split_probability(depth)
        }
    }

    /// Sum of `log q(d)` over internal nodes and `log(1 - q(d))` over leaves.
    /// Rule-selection probabilities are not included; see [`rule_log_prior`].
    pub fn tree_log_prior(&self, tree: &DecisionTree) -> f64 {
        tree.nodes
            .iter()
            .map(|n| {
                let q = self.split_probability(n.depth as usize);
                match n.kind {
                    NodeKind::Split { .. } => q.ln(),
                    NodeKind::Leaf { .. } => (-q).ln_1p(),
                }
            })
            .sum()
    }

    /// Log probability of the decision rules given splitting-variable
    /// log-probabilities `log_theta`.
    pub fn rule_log_prior(&self, tree: &DecisionTree, log_theta: &[f64]) -> f64 {
        let cut = self.cutpoints.log_density();
        tree.rules().map(|r| log_theta[r.axis] + cut).sum()
    }

    /// Draw a tree from the prior given splitting probabilities `theta`.
    pub fn sample_tree<R: Rng + ?Sized>(&self, theta: &[f64], rng: &mut R) -> DecisionTree {
        fn build<R: Rng + ?Sized>(
            prior: &TreePrior,
            theta: &[f64],
            depth: u32,
            nodes: &mut Vec<Node>,
            rng: &mut R,
        ) {
            if rng.random::<f64>() < prior.split_probability(depth as usize) {
                let here = nodes.len();
                let axis = sample_axis(theta, rng) as u32;
                let cutpoint = prior.cutpoints.sample(rng);
                nodes.push(Node { depth, kind: NodeKind::Split { axis, cutpoint, right: 0 } });
                build(prior, theta, depth + 1, nodes, rng);
                let right = nodes.len() as u32;
                if let NodeKind::Split { right: r, .. } = &mut nodes[here].kind {
                    *r = right;
                }
                build(prior, theta, depth + 1, nodes, rng);
            } else {
                nodes.push(Node { depth, kind: NodeKind::Leaf { slot: 0 } });
            }
        }
        let mut nodes = Vec::new();
        build(self, theta, 0, &mut nodes, rng);
        DecisionTree::renumbered(nodes)
    }
}

/// Draw an index with probability proportional to `weights`.
pub fn sample_axis<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    // rounding fell off the end: last index with positive weight
    weights.iter().rposition(|w| *w > 0.0).unwrap_or(0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MoveKind {
    Grow,
    Prune,
}

/// A proposed tree together with `log q(current | proposed) - log q(proposed | current)`.
#[derive(Debug, Clone)]
pub struct Proposal {
    pub kind: MoveKind,
    pub tree: DecisionTree,
    pub log_ratio: f64,
    /// The rule that was added (grow) or removed (prune).
    pub rule: DecisionRule,
}

fn log_grow_probability(tree: &DecisionTree) -> f64 {
    if tree.is_root_only() {
        0.0
    } else {
        0.5f64.ln()
    }
}

fn log_prune_probability(tree: &DecisionTree) -> f64 {
    if tree.is_root_only() {
        f64::NEG_INFINITY
    } else {
        0.5f64.ln()
    }
}

/// Choose a leaf uniformly and split it with an axis drawn from `theta` and a
/// cutpoint drawn from the prior's cutpoint law.
pub fn grow_proposal<R: Rng + ?Sized>(
    tree: &DecisionTree,
    prior: &TreePrior,
    theta: &[f64],
    log_theta: &[f64],
    rng: &mut R,
) -> Proposal {
    let slot = rng.random_range(0..tree.n_leaves());
    let axis = sample_axis(theta, rng);
    let rule = DecisionRule::new(axis, prior.cutpoints.sample(rng));
    let grown = tree.grow(slot, rule);
    let forward = log_grow_probability(tree) - (tree.n_leaves() as f64).ln()
        + log_theta[axis]
        + prior.cutpoints.log_density();
    let reverse = log_prune_probability(&grown) - (grown.prunable_nodes().len() as f64).ln();
    Proposal { kind: MoveKind::Grow, tree: grown, log_ratio: reverse - forward, rule }
}

/// Collapse a uniformly chosen prunable node. The tree must have at least two leaves.
pub fn prune_proposal<R: Rng + ?Sized>(
    tree: &DecisionTree,
    prior: &TreePrior,
    log_theta: &[f64],
    rng: &mut R,
) -> Proposal {
    assert!(!tree.is_root_only(), "cannot prune a root-only tree");
    let candidates = tree.prunable_nodes();
    let node = candidates[rng.random_range(0..candidates.len())];
    let rule = tree.node_rule(node).expect("prunable node is internal");
    let pruned = tree.prune(node);
    let forward = log_prune_probability(tree) - (candidates.len() as f64).ln();
    let reverse = log_grow_probability(&pruned) - (pruned.n_leaves() as f64).ln()
        + log_theta[rule.axis]
        + prior.cutpoints.log_density();
    Proposal { kind: MoveKind::Prune, tree: pruned, log_ratio: reverse - forward, rule }
}

/// Grow with probability one at a root-only tree, otherwise grow or prune
/// with equal probability.
pub fn propose<R: Rng + ?Sized>(
    tree: &DecisionTree,
    prior: &TreePrior,
    theta: &[f64],
    log_theta: &[f64],
    rng: &mut R,
) -> Proposal {
    if tree.is_root_only() || rng.random::<f64>() < 0.5 {
        grow_proposal(tree, prior, theta, log_theta, rng)
    } else {
        prune_proposal(tree, prior, log_theta, rng)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{any, prop_assert_eq, proptest, Strategy};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashMap;

    fn stump(axis: usize, c: f64) -> DecisionTree {
        DecisionTree::root().grow(0, DecisionRule::new(axis, c))
    }

    fn depth_two() -> DecisionTree {
        // {z1 < 0.5} with {z2 < 0.25} on the left branch
        stump(0, 0.5).grow(0, DecisionRule::new(1, 0.25))
    }

    #[test]
    fn leaf_index_examples() {
        assert_eq!(DecisionTree::root().leaf_index(&[0.3, 0.2]), 0);
        let t = stump(0, 0.5);
        assert_eq!(t.leaf_index(&[0.3]), 0);
        assert_eq!(t.leaf_index(&[0.7]), 1);
        // hand trace: 0.3 < 0.5 goes left, 0.9 >= 0.25 goes right -> left-right leaf
        let t = depth_two();
        assert_eq!(t.n_leaves(), 3);
        assert_eq!(t.leaf_index(&[0.3, 0.9, 0.1]), 1);
        assert_eq!(t.leaf_index(&[0.3, 0.1, 0.1]), 0);
        assert_eq!(t.leaf_index(&[0.8, 0.1, 0.1]), 2);
    }

    #[test]
    fn evaluate_examples() {
        let c = RegressionTree::constant(2.5);
        assert_eq!(c.evaluate(&[0.1]), 2.5);
        assert_eq!(c.evaluate(&[0.99]), 2.5);
        let t = RegressionTree::new(stump(0, 0.5), vec![-1.0, 4.0]);
        assert_eq!(t.evaluate(&[0.9]), 4.0);
        let ens = [RegressionTree::constant(1.0), RegressionTree::constant(-1.0)];
        assert_eq!(ensemble_evaluate(&ens, &[0.4]), 0.0);
    }

    #[test]
    fn tree_log_prior_examples() {
        let poly = TreePrior::default();
        assert!((poly.tree_log_prior(&DecisionTree::root()) - 0.05f64.ln()).abs() < 1e-12);
        assert!((poly.tree_log_prior(&DecisionTree::root()) + 2.9957).abs() < 1e-4);

        let geo = TreePrior { split: SplitPrior::Geometric { gamma: 0.25 }, ..TreePrior::default() };
        assert!((geo.tree_log_prior(&DecisionTree::root()) - 0.75f64.ln()).abs() < 1e-12);

        let expected = 0.95f64.ln() + 2.0 * (1.0 - 0.2375f64).ln();
        assert!((poly.tree_log_prior(&stump(0, 0.5)) - expected).abs() < 1e-12);
    }

    #[test]
    fn depth_cap_zeroes_deeper_splits() {
        let prior = TreePrior { max_depth: 1, ..TreePrior::default() };
        assert_eq!(prior.tree_log_prior(&stump(0, 0.5)), 0.95f64.ln());
        assert_eq!(prior.tree_log_prior(&depth_two()), f64::NEG_INFINITY);
    }

    #[test]
    fn grow_from_root_gives_two_leaves() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let prior = TreePrior::default();
        let theta = [0.5, 0.5];
        let lt = theta.map(f64::ln);
        for _ in 0..50 {
            let p = grow_proposal(&DecisionTree::root(), &prior, &theta, &lt, &mut rng);
            assert_eq!(p.tree.n_leaves(), 2);
        }
    }

    #[test]
    fn one_hot_theta_fixes_axis() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let prior = TreePrior::default();
        let theta = [0.0, 0.0, 1.0, 0.0];
        let lt = theta.map(f64::ln);
        let mut t = DecisionTree::root();
        for _ in 0..20 {
            let p = grow_proposal(&t, &prior, &theta, &lt, &mut rng);
            assert_eq!(p.rule.axis, 2);
            t = p.tree;
        }
        assert!(t.rules().all(|r| r.axis == 2));
    }

    #[test]
    fn prune_two_leaf_tree_gives_root() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let prior = TreePrior::default();
        let lt = [0.0];
        let p = prune_proposal(&stump(0, 0.5), &prior, &lt, &mut rng);
        assert_eq!(p.tree, DecisionTree::root());
    }

    #[test]
    fn caterpillar_has_single_prunable_node() {
        // root splits, right child splits again: a three-leaf caterpillar
        let t = stump(0, 0.5).grow(1, DecisionRule::new(0, 0.75));
        assert_eq!(t.n_leaves(), 3);
        let pn = t.prunable_nodes();
        assert_eq!(pn.len(), 1);
        assert_eq!(t.node_depth(pn[0]), 1);
        assert_eq!(t.prune(pn[0]), stump(0, 0.5));
    }

    #[test]
    fn split_counts_examples() {
        let ens = vec![RegressionTree::default(), RegressionTree::default()];
        assert_eq!(split_counts(&ens, 3), vec![0, 0, 0]);
        let t = stump(0, 0.5).grow(0, DecisionRule::new(0, 0.2));
        let ens = vec![RegressionTree::new(t.clone(), vec![0.0; 3])];
        assert_eq!(split_counts(&ens, 3), vec![2, 0, 0]);
        let ens = vec![
            RegressionTree::new(t, vec![0.0; 3]),
            RegressionTree::new(depth_two(), vec![0.0; 3]),
        ];
        let counts = split_counts(&ens, 3);
        let internal: usize = ens.iter().map(|e| e.tree.n_internal()).sum();
        assert_eq!(counts.iter().sum::<usize>(), internal);
    }

    #[test]
    fn encode_decode_exact() {
        let t = RegressionTree::new(depth_two(), vec![0.1 + 0.2, -1e-300, 12345.678]);
        let s = t.encode();
        assert_eq!(RegressionTree::decode(&s).unwrap(), t);
        assert!(RegressionTree::decode("s0:0.5 l1").is_err());
        assert!(RegressionTree::decode("l1 l2").is_err());
        assert!(RegressionTree::decode("s0:1.5 l1 l2").is_err());
    }

    /// All trees of depth <= `max_depth` over `r` axes and a `k`-point grid.
    fn enumerate_trees(r: usize, k: usize, max_depth: usize) -> Vec<DecisionTree> {
        fn sub(r: usize, k: usize, depth: usize, max_depth: usize) -> Vec<Vec<Option<DecisionRule>>> {
            let mut out = vec![vec![None]];
            if depth < max_depth {
                let children = sub(r, k, depth + 1, max_depth);
                for axis in 0..r {
                    for i in 1..=k {
                        let rule = DecisionRule::new(axis, i as f64 / (k + 1) as f64);
                        for left in &children {
                            for right in &children {
                                let mut v = vec![Some(rule)];
                                v.extend_from_slice(left);
                                v.extend_from_slice(right);
                                out.push(v);
                            }
                        }
                    }
                }
            }
            out
        }
        sub(r, k, 0, max_depth)
            .into_iter()
            .map(|v| DecisionTree::from_preorder(&v).unwrap())
            .collect()
    }

    #[test]
    fn prior_normalizes_on_finite_tree_space() {
        // R = 1, k-point grid, all trees of depth <= 2. The rule probabilities
        // sum out, leaving the branching-process probability of depth <= 2.
        for k in [1usize, 2, 3] {
            let prior = TreePrior { cutpoints: Cutpoints::Grid { points: k }, ..TreePrior::default() };
            let lt = [0.0];
            let total: f64 = enumerate_trees(1, k, 2)
                .iter()
                .map(|t| (prior.tree_log_prior(t) + prior.rule_log_prior(t, &lt)).exp())
                .sum();
            let q = |d: usize| prior.split_probability(d);
            let depth_le_1_child = (1.0 - q(1)) + q(1) * (1.0 - q(2)).powi(2);
            let expected = (1.0 - q(0)) + q(0) * depth_le_1_child.powi(2);
            assert!((total - expected).abs() < 1e-10, "k={k}: {total} vs {expected}");
        }
    }

    #[test]
    fn proposal_ratio_matches_enumerated_kernel() {
        // Exhaustively enumerate every grow/prune outcome on trees with <= 3
        // leaves over R = 2 axes and a 2-point grid, accumulate the exact
        // proposal kernel, and compare against the returned log ratios.
        let prior = TreePrior { cutpoints: Cutpoints::Grid { points: 2 }, ..TreePrior::default() };
        let theta = [0.3, 0.7];
        let lt = theta.map(f64::ln);
        let trees: Vec<DecisionTree> = enumerate_trees(2, 2, 2)
            .into_iter()
            .filter(|t| t.n_leaves() <= 3)
            .collect();
        let key = |t: &DecisionTree| RegressionTree::new(t.clone(), vec![0.0; t.n_leaves()]).encode();

        let kernel = |t: &DecisionTree| -> HashMap<String, f64> {
            let mut out = HashMap::new();
            let pg = if t.n_leaves() == 1 { 1.0 } else { 0.5 };
            for slot in 0..t.n_leaves() {
                for axis in 0..2 {
                    for i in 1..=2 {
                        let g = t.grow(slot, DecisionRule::new(axis, i as f64 / 3.0));
                        *out.entry(key(&g)).or_insert(0.0) += pg / t.n_leaves() as f64 * theta[axis] / 2.0;
                    }
                }
            }
            if t.n_leaves() > 1 {
                let pn = t.prunable_nodes();
                for &node in &pn {
                    *out.entry(key(&t.prune(node))).or_insert(0.0) += 0.5 / pn.len() as f64;
                }
            }
            out
        };

        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut checked = 0;
        for t in &trees {
            let fwd = kernel(t);
            for _ in 0..40 {
                let p = propose(t, &prior, &theta, &lt, &mut rng);
                if p.tree.n_leaves() > 3 {
                    continue;
                }
                let q_fwd = fwd[&key(&p.tree)];
                let q_rev = kernel(&p.tree)[&key(t)];
                assert!(
                    (p.log_ratio - (q_rev.ln() - q_fwd.ln())).abs() < 1e-12,
                    "{:?} move on {}",
                    p.kind,
                    key(t)
                );
                checked += 1;
            }
        }
        assert!(checked > 100);
    }

    fn arb_tree() -> impl Strategy<Value = DecisionTree> {
        (any::<u64>(), 0usize..6).prop_map(|(seed, grows)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut t = DecisionTree::root();
            for _ in 0..grows {
                let slot = rng.random_range(0..t.n_leaves());
                let rule = DecisionRule::new(rng.random_range(0..3), Cutpoints::Continuous.sample(&mut rng));
                t = t.grow(slot, rule);
            }
            t
        })
    }

    proptest! {
        #[test]
        fn partition_property(t in arb_tree(), seed in any::<u64>()) {
            // Each z lands in exactly one leaf cell, checked against the cell
            // membership computed from the rule path of every leaf.
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let paths = leaf_paths(&t);
            for _ in 0..10_000 {
                let z: Vec<f64> = (0..3).map(|_| rng.random()).collect();
                let inside: Vec<usize> = paths
                    .iter()
                    .enumerate()
                    .filter(|(_, p)| p.iter().all(|(rule, left)| rule.goes_left(&z) == *left))
                    .map(|(i, _)| i)
                    .collect();
                prop_assert_eq!(inside, vec![t.leaf_index(&z)]);
            }
        }

        #[test]
        fn grow_then_prune_restores(t in arb_tree(), seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let slot = rng.random_range(0..t.n_leaves());
            let g = t.grow(slot, DecisionRule::new(1, 0.4));
            let node = g.leaf_node(slot) - 1;
            prop_assert_eq!(g.n_leaves(), t.n_leaves() + 1);
            prop_assert_eq!(g.prune(node), t);
        }

        #[test]
        fn evaluate_piecewise_constant(t in arb_tree(), seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let jumps: Vec<f64> = (0..t.n_leaves()).map(|i| i as f64 * 1.5 - 2.0).collect();
            let rt = RegressionTree::new(t.clone(), jumps);
            let paths = leaf_paths(&t);
            for _ in 0..200 {
                let z: Vec<f64> = (0..3).map(|_| rng.random()).collect();
                let leaf = t.leaf_index(&z);
                // move each coordinate to a random value that keeps the cell
                let mut w = z.clone();
                for (v, wv) in w.iter_mut().enumerate() {
                    let (mut lo, mut hi) = (0.0f64, 1.0f64);
                    for (rule, left) in &paths[leaf] {
                        if rule.axis == v {
                            if *left { hi = hi.min(rule.cutpoint) } else { lo = lo.max(rule.cutpoint) }
                        }
                    }
                    *wv = lo + (hi - lo) * rng.random::<f64>() * 0.999;
                }
                prop_assert_eq!(rt.evaluate(&w), rt.evaluate(&z));
            }
        }

        #[test]
        fn encoding_round_trips(t in arb_tree(), seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let jumps = (0..t.n_leaves()).map(|_| rng.random::<f64>() * 10.0 - 5.0).collect();
            let rt = RegressionTree::new(t, jumps);
            prop_assert_eq!(RegressionTree::decode(&rt.encode()).unwrap(), rt);
        }
    }

    /// Root-to-leaf rule path of every leaf, in slot order.
    fn leaf_paths(t: &DecisionTree) -> Vec<Vec<(DecisionRule, bool)>> {
        fn walk(t: &DecisionTree, i: usize, path: &mut Vec<(DecisionRule, bool)>, out: &mut Vec<Vec<(DecisionRule, bool)>>) {
            match t.nodes[i].kind {
                NodeKind::Leaf { .. } => out.push(path.clone()),
                NodeKind::Split { axis, cutpoint, right } => {
                    let rule = DecisionRule { axis: axis as usize, cutpoint };
                    path.push((rule, true));
                    walk(t, i + 1, path, out);
                    path.pop();
                    path.push((rule, false));
                    walk(t, right as usize, path, out);
                    path.pop();
                }
            }
        }
        let mut out = Vec::new();
        walk(t, 0, &mut Vec::new(), &mut out);
        out
    }
}

//! Best-first local tree search over belief states.
//!
//! Leaves are expanded in order of reachability from the root, each
//! expansion commits to the greedy action under the current critic, and
//! values are backed up with a Bellman update. Simulated steps carry no
//! reward, so values enter the tree only through the critic at leaves.

use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dist::softmax_normalize;
use crate::error::SearchError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchBudget {
    /// Expansions per search (E).
    pub expansions: usize,
    /// Candidate actions per expansion (M).
    pub candidates: usize,
    /// Observation children per candidate (K).
    pub children: usize,
    pub gamma: f64,
}

impl Default for SearchBudget {
    fn default() -> Self {
        Self {
            expansions: 16,
            candidates: 8,
            children: 5,
            gamma: 0.99,
        }
    }
}

impl SearchBudget {
    pub fn validate(&self) -> Result<(), String> {
        if self.candidates == 0 || self.children == 0 {
            return Err("search budget needs at least one candidate and one child".into());
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(format!("gamma {} outside [0, 1]", self.gamma));
        }
        Ok(())
    }
}

/// What the search needs from the learned models.
pub trait SearchModel {
    /// Critic estimate `V(s)`.
    fn value(&self, belief: &[f64]) -> f64;
    /// One candidate action drawn from the current policy.
    fn sample_action(&self, belief: &[f64], rng: &mut dyn rand::RngCore) -> [f64; 2];
    /// Simulates one observation after `action` and returns the next belief
    /// with the log-likelihood of that observation.
    fn simulate(&self, belief: &[f64], action: [f64; 2], rng: &mut dyn rand::RngCore) -> (Vec<f64>, f64);
}

#[derive(Debug, Clone, PartialEq)]
pub struct TreeNode {
    pub belief: Vec<f64>,
    pub depth: usize,
    pub parent: Option<usize>,
    /// Action on the edge from the parent.
    pub action: Option<[f64; 2]>,
    /// Reachability relative to siblings; 1 at the root.
    pub p_tilde: f64,
    /// Critic value cached at creation.
    pub value: f64,
    /// Backed-up value.
    pub v_t: f64,
    /// Reward of the tree-policy action taken here.
    pub reward: f64,
    pub children: Vec<usize>,
}

impl TreeNode {
    pub fn is_leaf(&self) -> bool {
        self.children.is_empty()
    }
}

/// A new child before normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct ChildSpec {
    pub belief: Vec<f64>,
    pub log_likelihood: f64,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchTree {
    pub nodes: Vec<TreeNode>,
    pub gamma: f64,
    pub expansions: usize,
}

impl SearchTree {
    pub fn new(root_belief: Vec<f64>, root_value: f64, gamma: f64) -> Self {
        Self {
            nodes: vec![TreeNode {
                belief: root_belief,
                depth: 0,
                parent: None,
                action: None,
                p_tilde: 1.0,
                value: root_value,
                v_t: root_value,
                reward: 0.0,
                children: Vec::new(),
            }],
            gamma,
            expansions: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaves(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.nodes.len()).filter(|&i| self.nodes[i].is_leaf())
    }

    /// Hangs `children` below the leaf `node` for `action`, normalizing
    /// their likelihoods into `p̃`. Returns the new indices.
    pub fn attach(
        &mut self,
        node: usize,
        action: [f64; 2],
        reward: f64,
        children: Vec<ChildSpec>,
    ) -> Result<Vec<usize>, SearchError> {
        if node >= self.nodes.len() || !self.nodes[node].is_leaf() {
            return Err(SearchError::NotALeaf(node));
        }
        if children.is_empty() {
            return Err(SearchError::NoCandidates);
        }
        let lw: Vec<f64> = children.iter().map(|c| c.log_likelihood).collect();
        let p = normalized(&lw);
        let depth = self.nodes[node].depth + 1;
        let mut ids = Vec::with_capacity(children.len());
        for (c, p) in children.into_iter().zip(p) {
            ids.push(self.nodes.len());
            self.nodes.push(TreeNode {
                belief: c.belief,
                depth,
                parent: Some(node),
                action: Some(action),
                p_tilde: p,
                value: c.value,
                v_t: c.value,
                reward: 0.0,
                children: Vec::new(),
            });
        }
        self.nodes[node].reward = reward;
        self.nodes[node].children = ids.clone();
        Ok(ids)
    }

    /// `γ^{D−1} · Π p̃` along the path from the root. The root itself
    /// scores 1.
    pub fn reachability(&self, node: usize) -> f64 {
        let n = &self.nodes[node];
        if n.depth == 0 {
            return 1.0;
        }
        let mut prod = 1.0;
        let mut cur = node;
        while let Some(p) = self.nodes[cur].parent {
            prod *= self.nodes[cur].p_tilde;
            cur = p;
        }
        self.gamma.powi(n.depth as i32 - 1) * prod
    }

    /// Leaf with the highest reachability; ties go to the lowest index.
    pub fn select_leaf(&self) -> usize {
        let mut best = (0, f64::NEG_INFINITY);
        for i in self.leaves() {
            let r = self.reachability(i);
            if r > best.1 {
                best = (i, r);
            }
        }
        best.0
    }

    /// Bellman backup over the whole tree; returns `v_T(root)`.
    pub fn backup(&mut self) -> f64 {
        // children always have larger indices than their parent
        for i in (0..self.nodes.len()).rev() {
            let v = if self.nodes[i].is_leaf() {
                self.nodes[i].value
            } else {
                let mix: f64 = self.nodes[i]
                    .children
                    .iter()
                    .map(|&c| self.nodes[c].p_tilde * self.nodes[c].v_t)
                    .sum();
                self.nodes[i].reward + self.gamma * mix
            };
            self.nodes[i].v_t = v;
        }
        self.nodes[0].v_t
    }

    /// Text dump: a header line, then one line per node:
    /// `index parent depth p_tilde value v_t action_vaso action_fluid`
    /// with `-` for the root's parent and action.
    pub fn dump(&self) -> String {
        let mut out = String::from("# index parent depth p_tilde value v_t action_vaso action_fluid\n");
        for (i, n) in self.nodes.iter().enumerate() {
            let parent = n.parent.map_or("-".to_string(), |p| p.to_string());
            let action = n.action.map_or("- -".to_string(), |a| format!("{} {}", a[0], a[1]));
            writeln!(out, "{i} {parent} {} {} {} {} {action}", n.depth, n.p_tilde, n.value, n.v_t)
                .expect("writing to a String");
        }
        out
    }
}

fn normalized(log_w: &[f64]) -> Vec<f64> {
    if log_w.iter().all(|l| *l == f64::NEG_INFINITY) {
        return vec![1.0 / log_w.len() as f64; log_w.len()];
    }
    softmax_normalize(log_w)
}

/// One candidate action with its transient children `(p̃, V)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateEval {
    pub reward: f64,
    pub children: Vec<(f64, f64)>,
}

impl CandidateEval {
    pub fn score(&self, gamma: f64) -> f64 {
        self.reward + gamma * self.children.iter().map(|(p, v)| p * v).sum::<f64>()
    }
}

/// Greedy tree policy: index of the candidate maximizing
/// `r + γ Σ p̃ V(child)`, lowest index on ties.
pub fn tree_policy(candidates: &[CandidateEval], gamma: f64) -> Result<usize, SearchError> {
    let mut best: Option<(usize, f64)> = None;
    for (i, c) in candidates.iter().enumerate() {
        let s = c.score(gamma);
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((i, s));
        }
    }
    best.map(|b| b.0).ok_or(SearchError::NoCandidates)
}

/// Expands `leaf`: samples candidate actions, simulates `K` children for
/// each, and keeps only the children of the greedy action.
pub fn expand<M: SearchModel + ?Sized, R: Rng>(
    tree: &mut SearchTree,
    leaf: usize,
    model: &M,
    budget: &SearchBudget,
    rng: &mut R,
) -> Result<(), SearchError> {
    if tree.expansions >= budget.expansions {
        return Err(SearchError::BudgetExhausted);
    }
    if leaf >= tree.len() || !tree.nodes[leaf].is_leaf() {
        return Err(SearchError::NotALeaf(leaf));
    }
    let s = tree.nodes[leaf].belief.clone();
    let mut evals = Vec::with_capacity(budget.candidates);
    let mut specs = Vec::with_capacity(budget.candidates);
    for _ in 0..budget.candidates {
        let a = model.sample_action(&s, rng);
        let kids: Vec<ChildSpec> = (0..budget.children)
            .map(|_| {
                let (b, ll) = model.simulate(&s, a, rng);
                let v = model.value(&b);
                ChildSpec {
                    belief: b,
                    log_likelihood: ll,
                    value: v,
                }
            })
            .collect();
        let p = normalized(&kids.iter().map(|k| k.log_likelihood).collect::<Vec<_>>());
        evals.push(CandidateEval {
            reward: 0.0,
            children: p.into_iter().zip(kids.iter().map(|k| k.value)).collect(),
        });
        specs.push((a, kids));
    }
    let best = tree_policy(&evals, tree.gamma)?;
    let (a, kids) = specs.swap_remove(best);
    tree.attach(leaf, a, 0.0, kids)?;
    tree.expansions += 1;
    Ok(())
}

/// Runs `E` best-first expansions from `root` and backs up.
pub fn search<M: SearchModel + ?Sized, R: Rng>(
    root: &[f64],
    model: &M,
    budget: &SearchBudget,
    rng: &mut R,
) -> Result<SearchTree, SearchError> {
    let mut tree = SearchTree::new(root.to_vec(), model.value(root), budget.gamma);
    for _ in 0..budget.expansions {
        let leaf = tree.select_leaf();
        expand(&mut tree, leaf, model, budget, rng)?;
    }
    tree.backup();
    Ok(tree)
}

/// `v_T(root)`; with `E = 0` this is the critic's own estimate.
pub fn search_value<M: SearchModel + ?Sized, R: Rng>(
    root: &[f64],
    model: &M,
    budget: &SearchBudget,
    rng: &mut R,
) -> Result<f64, SearchError> {
    Ok(search(root, model, budget, rng)?.nodes[0].v_t)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Random explicit tree: each internal node has 1 to 3 children.
    pub(crate) fn random_tree(rng: &mut ChaCha8Rng, max_nodes: usize, gamma: f64) -> SearchTree {
        let mut tree = SearchTree::new(vec![0.0], rng.random_range(-10.0..10.0), gamma);
        while tree.len() < max_nodes {
            let leaves: Vec<usize> = tree.leaves().collect();
            let leaf = leaves[rng.random_range(0..leaves.len())];
            let k = rng.random_range(1..=3).min(max_nodes - tree.len());
            if k == 0 {
                break;
            }
            let kids = (0..k)
                .map(|_| ChildSpec {
                    belief: vec![rng.random()],
                    log_likelihood: rng.random_range(-5.0..0.0),
                    value: rng.random_range(-10.0..10.0),
                })
                .collect();
            tree.attach(leaf, [0.0, 0.0], rng.random_range(-1.0..1.0), kids).unwrap();
            if rng.random::<f64>() < 0.1 {
                break;
            }
        }
        tree
    }

    /// Recursive expected value over the explicit tree.
    pub(crate) fn dp_oracle(tree: &SearchTree, node: usize) -> f64 {
        let n = &tree.nodes[node];
        if n.children.is_empty() {
            return n.value;
        }
        let mut acc = 0.0;
        for &c in &n.children {
            acc += tree.nodes[c].p_tilde * dp_oracle(tree, c);
        }
        n.reward + tree.gamma * acc
    }

    /// Reachability by walking down from the root along explicit paths.
    pub(crate) fn enumerate_reach(tree: &SearchTree) -> Vec<(usize, f64)> {
        let mut out = Vec::new();
        let mut stack = vec![(0usize, 1.0f64)];
        while let Some((i, prod)) = stack.pop() {
            let n = &tree.nodes[i];
            if n.children.is_empty() {
                let score = if n.depth == 0 { 1.0 } else { prod * tree.gamma.powi(n.depth as i32 - 1) };
                out.push((i, score));
            }
            for &c in &n.children {
                stack.push((c, prod * tree.nodes[c].p_tilde));
            }
        }
        out.sort_by_key(|p| p.0);
        out
    }

    /// Toy model: the belief is a scalar severity, actions reduce it, and
    /// the critic is `−|s|`.
    pub(crate) struct Toy;

    impl SearchModel for Toy {
        fn value(&self, b: &[f64]) -> f64 {
            -b[0].abs()
        }
        fn sample_action(&self, _: &[f64], rng: &mut dyn rand::RngCore) -> [f64; 2] {
            [rng.random(), rng.random()]
        }
        fn simulate(&self, b: &[f64], a: [f64; 2], rng: &mut dyn rand::RngCore) -> (Vec<f64>, f64) {
            let noise: f64 = rng.random_range(-0.1..0.1);
            (vec![b[0] * (1.0 - 0.5 * a[0]) + noise], -noise * noise)
        }
    }

    #[test]
    fn reachability_examples() {
        let mut t = SearchTree::new(vec![0.0], 0.0, 0.9);
        let spec = |ll: f64| ChildSpec {
            belief: vec![0.0],
            log_likelihood: ll,
            value: 0.0,
        };
        let kids = t.attach(0, [0.0, 0.0], 0.0, vec![spec(0.7f64.ln()), spec(0.3f64.ln())]).unwrap();
        assert!((t.reachability(kids[0]) - 0.7).abs() < 1e-12);
        let g = t.attach(kids[0], [0.0, 0.0], 0.0, vec![spec(0.5f64.ln()), spec(0.5f64.ln())]).unwrap();
        // rescale the first path to p̃ = (0.5, 0.4)
        t.nodes[kids[0]].p_tilde = 0.5;
        t.nodes[g[0]].p_tilde = 0.4;
        assert!((t.reachability(g[0]) - 0.18).abs() < 1e-12);
        assert!(matches!(t.attach(kids[0], [0.0; 2], 0.0, vec![spec(0.0)]), Err(SearchError::NotALeaf(_))));
    }

    #[test]
    fn selection_and_backup_match_oracles() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let n = rng.random_range(1..=30);
            let gamma = rng.random_range(0.5..1.0);
            let mut t = random_tree(&mut rng, n, gamma);
            let reach = enumerate_reach(&t);
            let best = reach.iter().fold((usize::MAX, f64::NEG_INFINITY), |b, &(i, r)| if r > b.1 { (i, r) } else { b });
            assert_eq!(t.select_leaf(), best.0);
            for &(i, r) in &reach {
                assert!((t.reachability(i) - r).abs() < 1e-12);
            }
            let root = t.backup();
            assert!((root - dp_oracle(&t, 0)).abs() < 1e-12);
            assert_eq!(t.backup(), root);
        }
    }

    #[test]
    fn backup_examples() {
        let mut t = SearchTree::new(vec![0.0], 4.2, 0.9);
        assert_eq!(t.backup(), 4.2);
        let c = |v| ChildSpec {
            belief: vec![],
            log_likelihood: 0.0,
            value: v,
        };
        t.attach(0, [0.0; 2], 0.0, vec![c(1.0), c(3.0)]).unwrap();
        assert!((t.backup() - 1.8).abs() < 1e-12);
    }

    #[test]
    fn tree_policy_examples() {
        let cand = |vs: &[(f64, f64)]| CandidateEval {
            reward: 0.0,
            children: vs.to_vec(),
        };
        assert_eq!(tree_policy(&[cand(&[(1.0, 1.0)]), cand(&[(1.0, 2.5)])], 1.0).unwrap(), 1);
        assert_eq!(tree_policy(&[cand(&[(1.0, -4.0)])], 0.9).unwrap(), 0);
        assert_eq!(tree_policy(&[cand(&[(1.0, 2.0)]), cand(&[(1.0, 2.0)])], 0.9).unwrap(), 0);
        assert_eq!(tree_policy(&[], 0.9), Err(SearchError::NoCandidates));

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let cands: Vec<CandidateEval> = (0..3)
                .map(|_| CandidateEval {
                    reward: rng.random_range(-1.0..1.0),
                    children: (0..4).map(|_| (rng.random::<f64>(), rng.random_range(-5.0..5.0))).collect(),
                })
                .collect();
            let mut best = 0;
            let mut best_v = f64::NEG_INFINITY;
            for (i, c) in cands.iter().enumerate() {
                let mut v = c.reward;
                for (p, val) in &c.children {
                    v += 0.95 * p * val;
                }
                if v > best_v {
                    best_v = v;
                    best = i;
                }
            }
            assert_eq!(tree_policy(&cands, 0.95).unwrap(), best);
        }
    }

    #[test]
    fn expansion_invariants() {
        let budget = SearchBudget {
            expansions: 6,
            candidates: 3,
            children: 4,
            gamma: 0.95,
        };
        let run = |seed| search(&[2.0], &Toy, &budget, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let t = run(3);
        assert_eq!(t, run(3));
        assert_eq!(t.len(), 1 + 6 * 4);
        for n in &t.nodes {
            if !n.is_leaf() {
                let s: f64 = n.children.iter().map(|&c| t.nodes[c].p_tilde).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
        let k1 = SearchBudget { children: 1, ..budget };
        let t1 = search(&[2.0], &Toy, &k1, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert!(t1.nodes[1..].iter().all(|n| n.p_tilde == 1.0));

        let mut full = t.clone();
        let leaf = full.select_leaf();
        assert_eq!(
            expand(&mut full, leaf, &Toy, &budget, &mut ChaCha8Rng::seed_from_u64(0)),
            Err(SearchError::BudgetExhausted)
        );
        assert!(t.dump().lines().count() == t.len() + 1);
    }

    #[test]
    fn zero_budget_returns_critic() {
        let b = SearchBudget {
            expansions: 0,
            ..SearchBudget::default()
        };
        let v = search_value(&[1.5], &Toy, &b, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(v, Toy.value(&[1.5]));
    }

    #[test]
    fn constant_critic_depth_one() {
        struct Flat;
        impl SearchModel for Flat {
            fn value(&self, _: &[f64]) -> f64 {
                3.0
            }
            fn sample_action(&self, _: &[f64], _: &mut dyn rand::RngCore) -> [f64; 2] {
                [0.5, 0.5]
            }
            fn simulate(&self, b: &[f64], _: [f64; 2], rng: &mut dyn rand::RngCore) -> (Vec<f64>, f64) {
                (b.to_vec(), rng.random_range(-3.0..0.0))
            }
        }
        let b = SearchBudget {
            expansions: 1,
            candidates: 2,
            children: 3,
            gamma: 0.9,
        };
        let v = search_value(&[0.0], &Flat, &b, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert!((v - 2.7).abs() < 1e-12);
    }

    #[test]
    fn larger_budget_does_not_lower_value_on_average() {
        // with the toy critic, acting greedily can only move severity
        // toward zero, so deeper search should not look worse on average
        let mean = |e: usize| {
            let b = SearchBudget {
                expansions: e,
                candidates: 4,
                children: 3,
                gamma: 1.0,
            };
            (0..200)
                .map(|seed| search_value(&[2.0], &Toy, &b, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap())
                .sum::<f64>()
                / 200.0
        };
        let (v0, v1, v4) = (mean(0), mean(1), mean(4));
        assert!(v1 >= v0 && v4 >= v1, "{v0} {v1} {v4}");
    }
}

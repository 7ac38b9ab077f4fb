//! PUCT tree search over translation prefixes.
//!
//! Nodes keep only the `top_k` most probable actions of their prior, with the
//! raw (not renormalized) prior stored on each edge. The visit distribution
//! returned at the root is scaled by the retained prior mass, so a policy
//! trained on it with a filtered cross-entropy leaves the mass of pruned
//! actions roughly where it was.
//!
//! Visit counts are incremented during backup rather than on descent. In
//! `WithValue` mode every simulation backs up exactly once so both placements
//! give identical statistics; in `NoValue` mode only terminal BLEU values are
//! backed up, and only those simulations count as visits.

use std::collections::BTreeMap;
use std::io::{self, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bleu::{sentence_bleu, strip_for_bleu, BleuError};
use crate::corpus::TokenId;
use crate::model::{default_max_len, Evaluation, ModelError, PolicyValueModel, State};
use crate::scalar::Real;

pub type NodeId = usize;

#[derive(Debug, Error)]
pub enum MctsError {
    #[error("select on unexpanded node")]
    SelectOnUnexpanded,
    #[error("node already expanded")]
    DoubleExpansion,
    #[error("cannot expand a terminal node")]
    ExpandTerminal,
    #[error("action {0} has no edge at this node")]
    NoSuchEdge(TokenId),
    #[error("evaluation has {got} priors, expected at least one")]
    BadEvaluation { got: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Bleu(#[from] BleuError),
}

/// Statistics of one (node, action) pair.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Edge<T> {
    pub visits: u32,
    pub total_value: T,
    pub mean_value: T,
    pub prior: T,
}

impl<T: Real> Edge<T> {
    pub fn new(prior: T) -> Self {
        Self {
            visits: 0,
            total_value: T::zero(),
            mean_value: T::zero(),
            prior,
        }
    }

    fn record(&mut self, value: T) {
        self.visits += 1;
        self.total_value = self.total_value + value;
        self.mean_value = self.total_value / T::from_count(self.visits as usize);
    }
}

#[derive(Clone, Debug)]
pub struct EdgeSlot<T> {
    pub action: TokenId,
    pub edge: Edge<T>,
    pub child: Option<NodeId>,
}

#[derive(Clone, Debug)]
pub struct SearchNode<T> {
    pub state: State,
    pub terminal: bool,
    /// At most `top_k` edges, ordered by decreasing prior.
    pub edges: Vec<EdgeSlot<T>>,
    parent: Option<(NodeId, usize)>,
    terminal_value: Option<T>,
}

impl<T: Real> SearchNode<T> {
    pub fn new(state: State, terminal: bool) -> Self {
        Self {
            state,
            terminal,
            edges: Vec::new(),
            parent: None,
            terminal_value: None,
        }
    }

    pub fn is_expanded(&self) -> bool {
        !self.edges.is_empty()
    }

    pub fn parent(&self) -> Option<NodeId> {
        self.parent.map(|(p, _)| p)
    }

    pub fn edge(&self, action: TokenId) -> Option<&Edge<T>> {
        self.slot(action).map(|i| &self.edges[i].edge)
    }

    pub fn slot(&self, action: TokenId) -> Option<usize> {
        self.edges.iter().position(|s| s.action == action)
    }

    pub fn total_visits(&self) -> u32 {
        self.edges.iter().map(|s| s.edge.visits).sum()
    }

    pub fn prior_mass(&self) -> T {
        self.edges.iter().map(|s| s.edge.prior).sum()
    }
}

/// Exploration bonus form.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Exploration {
    /// `c * P * sqrt(N_parent) / (1 + N)`
    #[default]
    AlphaZero,
    /// `c * P * sqrt(N_parent) / N`, infinite for unvisited edges with P > 0.
    Literal,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SearchMode {
    #[default]
    WithValue,
    /// Only terminal BLEU values are backed up.
    NoValue,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchParams<T> {
    pub c_puct: T,
    pub temperature: T,
    pub num_simulations: usize,
    pub top_k: usize,
    /// Translation length cap; `None` means `2 * |src| + 5`.
    pub max_len: Option<usize>,
    pub mode: SearchMode,
    pub exploration: Exploration,
    pub rng_seed: u64,
}

impl<T: Real> Default for SearchParams<T> {
    fn default() -> Self {
        Self {
            c_puct: T::lit(0.5),
            temperature: T::one(),
            num_simulations: 100,
            top_k: 50,
            max_len: None,
            mode: SearchMode::WithValue,
            exploration: Exploration::AlphaZero,
            rng_seed: 0,
        }
    }
}

/// Root visit distribution, scaled so that it sums to the retained prior mass.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VisitDist<T> {
    pub probs: BTreeMap<TokenId, T>,
    pub sum_priors: T,
}

impl<T: Real> VisitDist<T> {
    /// Highest probability action, ties to the lowest id.
    pub fn argmax(&self) -> TokenId {
        let mut best: Option<(TokenId, T)> = None;
        for (&a, &p) in &self.probs {
            if best.is_none_or(|(_, bp)| p > bp) {
                best = Some((a, p));
            }
        }
        best.map(|(a, _)| a)
            .expect("visit distribution is never empty")
    }

    /// Draws from the distribution renormalized to one.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> TokenId {
        let total: T = self.probs.values().copied().sum();
        let mut r = T::lit(rng.gen::<f64>()) * total;
        let mut last = None;
        for (&a, &p) in &self.probs {
            if p <= T::zero() {
                continue;
            }
            if r < p {
                return a;
            }
            r = r - p;
            last = Some(a);
        }
        last.unwrap_or_else(|| self.argmax())
    }

    pub fn total(&self) -> T {
        self.probs.values().copied().sum()
    }
}

/// Source of (P, V) for expansions. The batcher supplies a channel-backed one.
pub trait Evaluator<T> {
    fn evaluate(&mut self, state: &State) -> Result<Evaluation<T>, ModelError>;
}

/// Evaluates states one at a time against a local model.
pub struct ModelEvaluator<'a, M: ?Sized> {
    model: &'a M,
    pub calls: usize,
}

impl<'a, M: ?Sized> ModelEvaluator<'a, M> {
    pub fn new(model: &'a M) -> Self {
        Self { model, calls: 0 }
    }
}

impl<T: Real, M: PolicyValueModel<T> + ?Sized> Evaluator<T> for ModelEvaluator<'_, M> {
    fn evaluate(&mut self, state: &State) -> Result<Evaluation<T>, ModelError> {
        self.calls += 1;
        self.model.evaluate(state)
    }
}

fn exploration_bonus<T: Real>(form: Exploration, c_puct: T, edge: &Edge<T>, sqrt_parent: T) -> T {
    let scaled = c_puct * edge.prior * sqrt_parent;
    match form {
        Exploration::AlphaZero => scaled / T::from_count(1 + edge.visits as usize),
        Exploration::Literal if edge.visits == 0 => {
            if scaled > T::zero() {
                T::infinity()
            } else {
                T::zero()
            }
        }
        Exploration::Literal => scaled / T::from_count(edge.visits as usize),
    }
}

fn select_index<T: Real>(
    node: &SearchNode<T>,
    c_puct: T,
    parent_visits: u32,
    form: Exploration,
) -> Result<usize, MctsError> {
    if node.edges.is_empty() {
        return Err(MctsError::SelectOnUnexpanded);
    }
    let sqrt_parent = T::from_count(parent_visits.max(1) as usize).sqrt();
    let mut best = 0;
    let mut best_score = T::neg_infinity();
    for (i, slot) in node.edges.iter().enumerate() {
        let e = &slot.edge;
        let score = e.mean_value + exploration_bonus(form, c_puct, e, sqrt_parent);
        let better = if i == 0 || score > best_score {
            true
        } else if score == best_score {
            let b = &node.edges[best];
            e.prior > b.edge.prior || (e.prior == b.edge.prior && slot.action < b.action)
        } else {
            false
        };
        if better {
            best = i;
            best_score = score;
        }
    }
    Ok(best)
}

/// PUCT selection: argmax of `Q + U`, ties to the higher prior, then the lower
/// action id.
pub fn select_child<T: Real>(
    node: &SearchNode<T>,
    c_puct: T,
    parent_visits: u32,
    form: Exploration,
) -> Result<TokenId, MctsError> {
    select_index(node, c_puct, parent_visits, form).map(|i| node.edges[i].action)
}

/// Creates edges for the `k` highest-prior actions (ties to the lower id),
/// keeping the raw prior on each edge.
pub fn expand<T: Real>(
    node: &mut SearchNode<T>,
    eval: &Evaluation<T>,
    k: usize,
) -> Result<(), MctsError> {
    if node.terminal {
        return Err(MctsError::ExpandTerminal);
    }
    if node.is_expanded() {
        return Err(MctsError::DoubleExpansion);
    }
    if eval.priors.is_empty() || k == 0 {
        return Err(MctsError::BadEvaluation {
            got: eval.priors.len(),
        });
    }
    let by_prior = |a: &usize, b: &usize| {
        eval.priors[*b]
            .partial_cmp(&eval.priors[*a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(b))
    };
    let mut order: Vec<usize> = (0..eval.priors.len()).collect();
    let k = k.min(order.len());
    if k < order.len() {
        order.select_nth_unstable_by(k - 1, by_prior);
        order.truncate(k);
    }
    order.sort_by(by_prior);
    node.edges = order
        .into_iter()
        .map(|a| EdgeSlot {
            action: a as TokenId,
            edge: Edge::new(eval.priors[a]),
            child: None,
        })
        .collect();
    Ok(())
}

/// An arena-backed search tree for one sentence.
#[derive(Clone, Debug)]
pub struct SearchTree<T> {
    nodes: Vec<SearchNode<T>>,
    root: NodeId,
    reference: Vec<TokenId>,
    max_len: usize,
    top_k: usize,
}

impl<T: Real> SearchTree<T> {
    /// Creates the root for `src` and expands it unless it is already terminal.
    pub fn new<E: Evaluator<T> + ?Sized>(
        src: &[TokenId],
        reference: &[TokenId],
        max_len: usize,
        top_k: usize,
        evaluator: &mut E,
    ) -> Result<Self, MctsError> {
        let mut tree = Self {
            nodes: Vec::new(),
            root: 0,
            reference: strip_for_bleu(reference),
            max_len,
            top_k,
        };
        let state = State::initial(src);
        let terminal = tree.is_terminal(&state);
        tree.nodes.push(SearchNode::new(state, terminal));
        if !terminal {
            let eval = evaluator.evaluate(&tree.nodes[0].state)?;
            expand(&mut tree.nodes[0], &eval, top_k)?;
        }
        Ok(tree)
    }

    pub fn root_id(&self) -> NodeId {
        self.root
    }

    pub fn root(&self) -> &SearchNode<T> {
        &self.nodes[self.root]
    }

    pub fn node(&self, id: NodeId) -> &SearchNode<T> {
        &self.nodes[id]
    }

    pub fn node_mut(&mut self, id: NodeId) -> &mut SearchNode<T> {
        &mut self.nodes[id]
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn is_terminal(&self, state: &State) -> bool {
        state.ends_in_eos() || state.emitted().len() >= self.max_len
    }

    /// Nodes reachable from the current root, root first.
    pub fn reachable(&self) -> Vec<NodeId> {
        let mut out = vec![self.root];
        let mut i = 0;
        while i < out.len() {
            let id = out[i];
            out.extend(self.nodes[id].edges.iter().filter_map(|s| s.child));
            i += 1;
        }
        out
    }

    fn terminal_value(&mut self, id: NodeId) -> Result<T, MctsError> {
        if let Some(v) = self.nodes[id].terminal_value {
            return Ok(v);
        }
        let hyp = strip_for_bleu(self.nodes[id].state.emitted());
        let v = sentence_bleu::<T>(&hyp, &self.reference)?.value;
        self.nodes[id].terminal_value = Some(v);
        Ok(v)
    }

    /// Materializes the child behind edge `slot` of `parent`, expanding it via
    /// the evaluator unless terminal. Returns the child and its evaluation.
    fn create_child<E: Evaluator<T> + ?Sized>(
        &mut self,
        parent: NodeId,
        slot: usize,
        evaluator: &mut E,
    ) -> Result<(NodeId, Option<Evaluation<T>>), MctsError> {
        let action = self.nodes[parent].edges[slot].action;
        let state = self.nodes[parent].state.child(action);
        let terminal = self.is_terminal(&state);
        let mut node = SearchNode::new(state, terminal);
        node.parent = Some((parent, slot));
        let eval = if terminal {
            None
        } else {
            let eval = evaluator.evaluate(&node.state)?;
            expand(&mut node, &eval, self.top_k)?;
            Some(eval)
        };
        let id = self.nodes.len();
        self.nodes.push(node);
        self.nodes[parent].edges[slot].child = Some(id);
        Ok((id, eval))
    }

    fn parent_visits(&self, id: NodeId) -> u32 {
        let n = match self.nodes[id].parent {
            Some((p, slot)) if id != self.root => self.nodes[p].edges[slot].edge.visits,
            _ => self.nodes[id].total_visits(),
        };
        n.max(1)
    }

    /// Checks the statistical invariants of every reachable node.
    pub fn check_invariants(&self, tolerance: f64) -> Result<(), String> {
        for id in self.reachable() {
            let node = &self.nodes[id];
            if node.edges.len() > self.top_k {
                return Err(format!(
                    "node {id} has {} edges > K={}",
                    node.edges.len(),
                    self.top_k
                ));
            }
            if node.terminal != self.is_terminal(&node.state) {
                return Err(format!("node {id} terminal flag inconsistent"));
            }
            for s in &node.edges {
                let e = &s.edge;
                let q = e.mean_value.as_f64();
                let w = e.total_value.as_f64();
                if (q * e.visits as f64 - w).abs() > tolerance {
                    return Err(format!(
                        "node {id} action {}: Q*N={} != W={w}",
                        s.action,
                        q * e.visits as f64
                    ));
                }
                if e.visits == 0 && q != 0.0 {
                    return Err(format!(
                        "node {id} action {}: unvisited edge has Q={q}",
                        s.action
                    ));
                }
                if !(0.0..=1.0).contains(&q) || !(0.0..=1.0).contains(&e.prior.as_f64()) {
                    return Err(format!(
                        "node {id} action {}: Q or P outside [0,1]",
                        s.action
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Adds `value` to every edge on the path from the root down to `leaf`.
pub fn backup<T: Real>(tree: &mut SearchTree<T>, leaf: NodeId, value: T) {
    let mut cur = leaf;
    while cur != tree.root {
        let Some((parent, slot)) = tree.nodes[cur].parent else {
            break;
        };
        tree.nodes[parent].edges[slot].edge.record(value);
        cur = parent;
    }
}

/// Runs `num_simulations` select/expand/backup passes from the root and
/// returns the temperature-scaled visit distribution times the retained prior
/// mass.
pub fn run_simulations<T: Real, E: Evaluator<T> + ?Sized>(
    tree: &mut SearchTree<T>,
    evaluator: &mut E,
    params: &SearchParams<T>,
) -> Result<VisitDist<T>, MctsError> {
    if !tree.root().is_expanded() {
        return Err(MctsError::SelectOnUnexpanded);
    }
    for _ in 0..params.num_simulations {
        let mut cur = tree.root;
        let (leaf, value) = loop {
            if tree.nodes[cur].terminal {
                let v = tree.terminal_value(cur)?;
                break (cur, Some(v));
            }
            let n_parent = tree.parent_visits(cur);
            let slot = select_index(
                &tree.nodes[cur],
                params.c_puct,
                n_parent,
                params.exploration,
            )?;
            match tree.nodes[cur].edges[slot].child {
                Some(child) => cur = child,
                None => {
                    let (child, eval) = tree.create_child(cur, slot, evaluator)?;
                    let value = match eval {
                        None => Some(tree.terminal_value(child)?),
                        Some(e) => match params.mode {
                            SearchMode::WithValue => Some(e.value),
                            SearchMode::NoValue => None,
                        },
                    };
                    break (child, value);
                }
            }
        };
        if let Some(v) = value {
            backup(tree, leaf, v);
        }
    }
    Ok(visit_distribution(tree.root(), params.temperature))
}

/// `probs[a] = N_a^(1/tau) / sum_b N_b^(1/tau) * sum_priors`, or the raw priors
/// when no root edge has been visited.
pub fn visit_distribution<T: Real>(root: &SearchNode<T>, temperature: T) -> VisitDist<T> {
    let sum_priors = root.prior_mass();
    let max_visits = root.edges.iter().map(|s| s.edge.visits).max().unwrap_or(0);
    let probs = if max_visits == 0 {
        root.edges
            .iter()
            .map(|s| (s.action, s.edge.prior))
            .collect()
    } else {
        let inv_tau = temperature.recip();
        let max = T::from_count(max_visits as usize);
        let weights: Vec<T> = root
            .edges
            .iter()
            .map(|s| (T::from_count(s.edge.visits as usize) / max).powf(inv_tau))
            .collect();
        let total: T = weights.iter().copied().sum();
        root.edges
            .iter()
            .zip(weights)
            .map(|(s, w)| (s.action, w / total * sum_priors))
            .collect()
    };
    VisitDist { probs, sum_priors }
}

/// Moves the root to the child behind `action`, creating (and expanding) it if
/// it was never visited. Statistics below the new root are kept.
pub fn advance_root<T: Real, E: Evaluator<T> + ?Sized>(
    tree: &mut SearchTree<T>,
    action: TokenId,
    evaluator: &mut E,
) -> Result<NodeId, MctsError> {
    let root = tree.root;
    let slot = tree.nodes[root]
        .slot(action)
        .ok_or(MctsError::NoSuchEdge(action))?;
    let child = match tree.nodes[root].edges[slot].child {
        Some(c) => c,
        None => tree.create_child(root, slot, evaluator)?.0,
    };
    tree.nodes[child].parent = None;
    tree.root = child;
    Ok(child)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceStep<T> {
    pub state: State,
    pub dist: VisitDist<T>,
    pub action: TokenId,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Translation<T> {
    /// Emitted tokens, without BOS; ends in EOS unless the length cap hit first.
    pub tokens: Vec<TokenId>,
    pub trace: Vec<TraceStep<T>>,
}

/// Decodes `src` one token at a time, running a full search before every
/// step. With `sample` the action is drawn from the renormalized visit
/// distribution, otherwise the argmax is taken. `reference` only feeds the
/// BLEU values of terminal nodes.
pub fn translate_mcts<T: Real, E: Evaluator<T> + ?Sized>(
    src: &[TokenId],
    reference: &[TokenId],
    evaluator: &mut E,
    params: &SearchParams<T>,
    sample: bool,
) -> Result<Translation<T>, MctsError> {
    let max_len = params.max_len.unwrap_or_else(|| default_max_len(src.len()));
    let mut tree = SearchTree::new(src, reference, max_len, params.top_k, evaluator)?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.rng_seed);
    let mut trace = Vec::new();
    while !tree.root().terminal {
        let dist = run_simulations(&mut tree, evaluator, params)?;
        let action = if sample {
            dist.sample(&mut rng)
        } else {
            dist.argmax()
        };
        trace.push(TraceStep {
            state: tree.root().state.clone(),
            dist,
            action,
        });
        advance_root(&mut tree, action, evaluator)?;
    }
    Ok(Translation {
        tokens: tree.root().state.emitted().to_vec(),
        trace,
    })
}

/// Writes one JSON line per decode step.
pub fn write_trace<T: Real, W: Write>(w: &mut W, trace: &[TraceStep<T>]) -> io::Result<()> {
    for (step, t) in trace.iter().enumerate() {
        let record = serde_json::json!({
            "step": step,
            "src": t.state.src,
            "prefix": t.state.prefix,
            "probs": t.dist.probs,
            "sum_priors": t.dist.sum_priors,
            "action": t.action,
        });
        serde_json::to_writer(&mut *w, &record)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

//! Planner-guided Monte Carlo tree search over a knowledge graph, with the
//! path evaluator as rollout policy and online fine-tuning from pseudo-labelled
//! path pairs.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embed::{Embedder, Embedding};
use crate::error::{Error, Result};
use crate::evaluator::linalg::sigmoid;
use crate::evaluator::{finetune_step, score_batch, AdamState, ScorerParams, TrainTriplet, FINETUNE_LR};
use crate::kg::{EntityId, KnowledgeGraph, RelationId};
use crate::planner::{Planner, PlannerQuery, Usage, UsageCounter};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackpropMode {
    /// `w` is the visit-weighted mean of the children's `w`; exploitation uses `w`.
    LiteralAvg,
    /// `w` is the cumulative reward; exploitation uses `w / n`.
    ClassicSum,
}

impl fmt::Display for BackpropMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BackpropMode::LiteralAvg => "literal-avg",
            BackpropMode::ClassicSum => "classic-sum",
        })
    }
}

impl FromStr for BackpropMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "literal-avg" => Ok(BackpropMode::LiteralAvg),
            "classic-sum" => Ok(BackpropMode::ClassicSum),
            other => Err(Error::Input(format!("unknown backprop mode `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    pub iterations: usize,
    pub top_k: usize,
    pub max_len: usize,
    pub c: f64,
    pub mode: BackpropMode,
    /// Online fine-tuning on or off.
    pub finetune: bool,
    pub finetune_period: usize,
    pub pairs_per_finetune: usize,
    /// Gradient steps per fine-tuning event.
    pub finetune_epochs: usize,
    pub finetune_lr: f64,
    pub branch_cap: usize,
    pub top_m: usize,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            iterations: 30,
            top_k: 3,
            max_len: 4,
            c: std::f64::consts::SQRT_2,
            mode: BackpropMode::LiteralAvg,
            finetune: true,
            finetune_period: 1,
            pairs_per_finetune: 8,
            finetune_epochs: 10,
            finetune_lr: FINETUNE_LR,
            branch_cap: 16,
            top_m: 10,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self, scorer_max_len: usize) -> Result<()> {
        let fail = |m: String| Err(Error::Precondition(m));
        if self.iterations == 0 {
            return fail("iterations must be at least 1".into());
        }
        if self.top_k == 0 {
            return fail("top-k must be at least 1".into());
        }
        if self.max_len == 0 || self.max_len > scorer_max_len {
            return fail(format!(
                "max path length {} must lie in 1..={scorer_max_len}",
                self.max_len
            ));
        }
        if self.branch_cap == 0 || self.finetune_period == 0 {
            return fail("branch cap and fine-tune period must be positive".into());
        }
        if !(self.c.is_finite() && self.c >= 0.0) {
            return fail(format!("exploration constant {} is invalid", self.c));
        }
        Ok(())
    }
}

pub type NodeId = usize;

#[derive(Clone, Debug, PartialEq)]
pub struct SearchNode {
    pub entity: EntityId,
    pub in_relation: Option<RelationId>,
    pub parent: Option<NodeId>,
    pub depth: usize,
    pub n: u64,
    pub w: f64,
    pub reward_sum: f64,
    pub children: Vec<NodeId>,
    pub expanded: bool,
}

impl SearchNode {
    fn new(entity: EntityId, in_relation: Option<RelationId>, parent: Option<NodeId>, depth: usize) -> Self {
        SearchNode {
            entity,
            in_relation,
            parent,
            depth,
            n: 0,
            w: 0.0,
            reward_sum: 0.0,
            children: Vec::new(),
            expanded: false,
        }
    }

    /// Mean rollout reward through this node.
    pub fn search_value(&self) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            self.reward_sum / self.n as f64
        }
    }
}

/// Arena of nodes; one root per topic entity.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SearchTree {
    pub nodes: Vec<SearchNode>,
    pub roots: Vec<NodeId>,
}

impl SearchTree {
    pub fn new(topics: &[EntityId]) -> Self {
        let mut t = SearchTree::default();
        for &e in topics {
            t.roots.push(t.nodes.len());
            t.nodes.push(SearchNode::new(e, None, None, 0));
        }
        t
    }

    pub fn add_child(&mut self, parent: NodeId, relation: RelationId, entity: EntityId) -> NodeId {
        let id = self.nodes.len();
        let depth = self.nodes[parent].depth + 1;
        self.nodes
            .push(SearchNode::new(entity, Some(relation), Some(parent), depth));
        self.nodes[parent].children.push(id);
        id
    }

    /// Nodes from the root down to `node`.
    pub fn lineage(&self, node: NodeId) -> Vec<NodeId> {
        let mut out = vec![node];
        let mut cur = node;
        while let Some(p) = self.nodes[cur].parent {
            out.push(p);
            cur = p;
        }
        out.reverse();
        out
    }

    /// Relation sequence from the root to `node`.
    pub fn relations(&self, node: NodeId) -> Vec<RelationId> {
        self.lineage(node)
            .into_iter()
            .filter_map(|i| self.nodes[i].in_relation)
            .collect()
    }

    pub fn max_depth(&self) -> usize {
        self.nodes.iter().map(|n| n.depth).max().unwrap_or(0)
    }
}

/// UCT value of a child; unvisited children are infinitely attractive.
pub fn uct(w: f64, n: u64, parent_n: u64, c: f64, mode: BackpropMode) -> f64 {
    if n == 0 {
        return f64::INFINITY;
    }
    let exploit = match mode {
        BackpropMode::LiteralAvg => w,
        BackpropMode::ClassicSum => w / n as f64,
    };
    let explore = if parent_n == 0 {
        0.0
    } else {
        c * ((parent_n as f64).ln() / n as f64).sqrt()
    };
    exploit + explore
}

/// Descends from `root` by argmax UCT until reaching an unexpanded node, a
/// node at depth `max_len`, or a node without children. Ties go to the earlier child.
pub fn select_leaf(tree: &SearchTree, root: NodeId, config: &SearchConfig) -> Vec<NodeId> {
    let mut path = vec![root];
    let mut cur = root;
    loop {
        let node = &tree.nodes[cur];
        if !node.expanded || node.children.is_empty() || node.depth >= config.max_len {
            return path;
        }
        let mut best = node.children[0];
        let mut best_v = f64::NEG_INFINITY;
        for &c in &node.children {
            let ch = &tree.nodes[c];
            let v = uct(ch.w, ch.n, node.n, config.c, config.mode);
            if v > best_v {
                best_v = v;
                best = c;
            }
        }
        path.push(best);
        cur = best;
    }
}

/// Records one rollout of `reward` along `path` (root first).
pub fn backpropagate(tree: &mut SearchTree, path: &[NodeId], reward: f64, mode: BackpropMode) {
    for &i in path {
        let node = &mut tree.nodes[i];
        node.n += 1;
        node.reward_sum += reward;
    }
    match mode {
        BackpropMode::ClassicSum => {
            for &i in path {
                tree.nodes[i].w = tree.nodes[i].reward_sum;
            }
        }
        BackpropMode::LiteralAvg => {
            let Some((&leaf, ancestors)) = path.split_last() else {
                return;
            };
            let l = &mut tree.nodes[leaf];
            l.w = l.reward_sum / l.n as f64;
            for &i in ancestors.iter().rev() {
                let (mut num, mut den) = (0.0, 0u64);
                for &c in &tree.nodes[i].children {
                    let ch = &tree.nodes[c];
                    if ch.n > 0 {
                        num += ch.n as f64 * ch.w;
                        den += ch.n;
                    }
                }
                if den > 0 {
                    tree.nodes[i].w = num / den as f64;
                }
            }
        }
    }
}

/// Two explored paths ordered by search value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PseudoPair {
    pub positive: Vec<RelationId>,
    pub positive_entity: EntityId,
    pub negative: Vec<RelationId>,
    pub negative_entity: EntityId,
    pub gap: f64,
}

/// Samples up to `pairs_per_finetune` node pairs with distinct search values,
/// the higher-valued one becoming the positive.
pub fn sample_pseudo_pairs(tree: &SearchTree, config: &SearchConfig, rng: &mut ChaCha8Rng) -> Vec<PseudoPair> {
    let eligible: Vec<NodeId> = (0..tree.nodes.len())
        .filter(|&i| tree.nodes[i].parent.is_some() && tree.nodes[i].n > 0)
        .collect();
    let mut candidates = Vec::new();
    for (a, &i) in eligible.iter().enumerate() {
        for &j in &eligible[a + 1..] {
            if tree.nodes[i].search_value() != tree.nodes[j].search_value() {
                candidates.push((i, j));
            }
        }
    }
    let take = config.pairs_per_finetune.min(candidates.len());
    if take == 0 {
        return Vec::new();
    }
    let mut picked: Vec<usize> = sample(rng, candidates.len(), take).into_vec();
    picked.sort_unstable();
    picked
        .into_iter()
        .map(|k| {
            let (i, j) = candidates[k];
            let (vi, vj) = (tree.nodes[i].search_value(), tree.nodes[j].search_value());
            let (p, n) = if vi > vj { (i, j) } else { (j, i) };
            PseudoPair {
                positive: tree.relations(p),
                positive_entity: tree.nodes[p].entity,
                negative: tree.relations(n),
                negative_entity: tree.nodes[n].entity,
                gap: (vi - vj).abs(),
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Answer {
    pub entity: EntityId,
    pub score: f64,
    /// Best-scoring relation path reaching the entity.
    pub path: Vec<RelationId>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TreeStats {
    pub nodes: usize,
    /// Expansions of nonterminal nodes, each of which consults the planner once.
    pub expansions: usize,
    pub max_depth: usize,
    pub finetune_events: usize,
    pub pseudo_pairs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    /// Sorted by score descending, then entity id.
    pub answers: Vec<Answer>,
    pub usage: Usage,
    pub stats: TreeStats,
}

/// Evaluator bound to one question, with memoized path scores.
pub struct PathScorer<'a> {
    pub params: &'a mut ScorerParams,
    question: Embedding,
    relations: Vec<Embedding>,
    memo: HashMap<Vec<RelationId>, f64>,
}

impl<'a> PathScorer<'a> {
    pub fn new(params: &'a mut ScorerParams, kg: &KnowledgeGraph, embedder: &Embedder, question: &str) -> Result<Self> {
        let labels: Vec<&str> = kg.relation_labels().iter().map(String::as_str).collect();
        let relations = embedder.embed_all(&labels)?;
        let question = embedder.embed_text(question)?;
        if question.dim() != params.dims.d_in {
            return Err(Error::Precondition(format!(
                "embedding dimension {} does not match the scorer input {}",
                question.dim(),
                params.dims.d_in
            )));
        }
        Ok(PathScorer {
            params,
            question,
            relations,
            memo: HashMap::new(),
        })
    }

    /// Scores relation paths, reusing cached values.
    pub fn score(&mut self, paths: &[Vec<RelationId>]) -> Result<Vec<f64>> {
        let missing: Vec<&Vec<RelationId>> = {
            let mut seen = std::collections::HashSet::new();
            paths
                .iter()
                .filter(|p| !self.memo.contains_key(*p) && seen.insert(*p))
                .collect()
        };
        if !missing.is_empty() {
            let seqs: Vec<Vec<&[f64]>> = missing
                .iter()
                .map(|p| p.iter().map(|r| self.relations[r.index()].as_slice()).collect())
                .collect();
            let scores = score_batch(self.params, self.question.as_slice(), &seqs)?;
            for (p, s) in missing.into_iter().zip(scores) {
                self.memo.insert(p.clone(), s);
            }
        }
        Ok(paths.iter().map(|p| self.memo[p]).collect())
    }

    fn triplet(&self, pair: &PseudoPair) -> Result<TrainTriplet> {
        let emb = |p: &[RelationId]| p.iter().map(|r| self.relations[r.index()].clone()).collect();
        TrainTriplet::new(self.question.clone(), emb(&pair.positive), emb(&pair.negative))
    }

    /// Applies `epochs` fine-tuning steps on the pairs and drops cached scores.
    pub fn finetune(&mut self, pairs: &[PseudoPair], state: &mut AdamState, epochs: usize, lr: f64) -> Result<()> {
        let triplets: Vec<TrainTriplet> = pairs.iter().map(|p| self.triplet(p)).collect::<Result<_>>()?;
        for _ in 0..epochs {
            finetune_step(self.params, &triplets, state, lr)?;
        }
        self.memo.clear();
        Ok(())
    }
}

fn on_path(tree: &SearchTree, node: NodeId) -> Vec<EntityId> {
    tree.lineage(node).into_iter().map(|i| tree.nodes[i].entity).collect()
}

/// Grounds the planner's top relations into children. Returns the new nodes.
pub fn expand(
    tree: &mut SearchTree,
    node: NodeId,
    kg: &KnowledgeGraph,
    question: &str,
    planner: &Planner,
    usage: &UsageCounter,
    config: &SearchConfig,
) -> Result<Vec<NodeId>> {
    let entity = tree.nodes[node].entity;
    tree.nodes[node].expanded = true;
    if tree.nodes[node].depth >= config.max_len {
        return Ok(Vec::new());
    }
    let rels = kg.outgoing_relations(entity)?;
    if rels.is_empty() {
        return Ok(Vec::new());
    }
    let query = PlannerQuery {
        question: question.to_owned(),
        current_path: tree
            .relations(node)
            .into_iter()
            .map(|r| kg.relation_label(r).to_owned())
            .collect(),
        candidates: rels.iter().map(|&r| (r, kg.relation_label(r).to_owned())).collect(),
        k: config.top_k,
    };
    let choice = planner.select_relations(&query, usage)?;
    let visited = on_path(tree, node);
    let mut out = Vec::new();
    'outer: for &r in choice.ranked.iter().take(config.top_k) {
        for o in kg.objects(entity, r) {
            if visited.contains(&o) {
                continue;
            }
            if out.len() >= config.branch_cap {
                break 'outer;
            }
            out.push(tree.add_child(node, r, o));
        }
    }
    Ok(out)
}

/// Greedy scorer-guided rollout from `node`; returns `logistic(S)` of the final path.
pub fn simulate(
    tree: &SearchTree,
    node: NodeId,
    kg: &KnowledgeGraph,
    scorer: &mut PathScorer<'_>,
    config: &SearchConfig,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let mut rels = tree.relations(node);
    let mut visited = on_path(tree, node);
    let mut cur = tree.nodes[node].entity;
    let mut final_score = None;
    while rels.len() < config.max_len {
        // Lowest entity per relation; neighbors are sorted by (relation, entity).
        let mut ext: Vec<(RelationId, EntityId)> = Vec::new();
        for &(r, o) in kg.neighbors(cur) {
            if visited.contains(&o) || ext.last().is_some_and(|&(lr, _)| lr == r) {
                continue;
            }
            ext.push((r, o));
        }
        if ext.is_empty() {
            break;
        }
        if ext.len() > config.branch_cap {
            let mut keep = sample(rng, ext.len(), config.branch_cap).into_vec();
            keep.sort_unstable();
            ext = keep.into_iter().map(|i| ext[i]).collect();
        }
        let paths: Vec<Vec<RelationId>> = ext
            .iter()
            .map(|&(r, _)| {
                let mut p = rels.clone();
                p.push(r);
                p
            })
            .collect();
        let scores = scorer.score(&paths)?;
        let mut best = 0;
        for i in 1..scores.len() {
            if scores[i] > scores[best] {
                best = i;
            }
        }
        let (r, o) = ext[best];
        rels.push(r);
        visited.push(o);
        cur = o;
        final_score = Some(scores[best]);
    }
    if rels.is_empty() {
        return Ok(0.0);
    }
    let s = match final_score {
        Some(s) => s,
        None => scorer.score(std::slice::from_ref(&rels))?[0],
    };
    Ok(sigmoid(s))
}

/// Best-scoring paths per reached entity, top `top_m`.
pub fn extract_answers(tree: &SearchTree, scorer: &mut PathScorer<'_>, config: &SearchConfig) -> Result<Vec<Answer>> {
    let nodes: Vec<NodeId> = (0..tree.nodes.len())
        .filter(|&i| tree.nodes[i].depth >= 1 && tree.nodes[i].n >= 1)
        .collect();
    let paths: Vec<Vec<RelationId>> = nodes.iter().map(|&i| tree.relations(i)).collect();
    let scores = scorer.score(&paths)?;
    let mut best: HashMap<EntityId, (f64, usize)> = HashMap::new();
    for (k, &i) in nodes.iter().enumerate() {
        let e = tree.nodes[i].entity;
        let s = scores[k];
        match best.get(&e) {
            Some(&(b, _)) if b >= s => {}
            _ => {
                best.insert(e, (s, k));
            }
        }
    }
    Ok(rank_answers(
        best.into_iter()
            .map(|(entity, (score, k))| Answer {
                entity,
                score,
                path: paths[k].clone(),
            })
            .collect(),
        config.top_m,
    ))
}

/// Sorts by score descending then entity id, keeping the first `m`.
pub fn rank_answers(mut answers: Vec<Answer>, m: usize) -> Vec<Answer> {
    answers.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.entity.cmp(&b.entity)));
    answers.truncate(m);
    answers
}

/// Runs the full search for one question. `params` is fine-tuned in place
/// when online fine-tuning is enabled.
#[allow(clippy::too_many_arguments)]
pub fn search(
    kg: &KnowledgeGraph,
    question: &str,
    topics: &[EntityId],
    planner: &Planner,
    params: &mut ScorerParams,
    embedder: &Embedder,
    config: &SearchConfig,
    seed: u64,
) -> Result<SearchResult> {
    config.validate(params.dims.max_len)?;
    if topics.is_empty() {
        return Err(Error::Input("question has no topic entities".into()));
    }
    for &t in topics {
        if t.index() >= kg.num_entities() {
            return Err(Error::Input(format!("topic {t} is not in the graph")));
        }
    }
    let mut adam = AdamState::new(params);
    let mut scorer = PathScorer::new(params, kg, embedder, question)?;
    let usage = UsageCounter::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tree = SearchTree::new(topics);
    let mut stats = TreeStats::default();

    for it in 0..config.iterations {
        let root = tree.roots[it % tree.roots.len()];
        let path = select_leaf(&tree, root, config);
        let leaf = *path.last().expect("path holds the root");
        let mut fresh = Vec::new();
        if !tree.nodes[leaf].expanded {
            let node = &tree.nodes[leaf];
            if node.depth < config.max_len && !kg.neighbors(node.entity).is_empty() {
                stats.expansions += 1;
            }
            fresh = expand(&mut tree, leaf, kg, question, planner, &usage, config)?;
        }
        if fresh.is_empty() {
            let reward = simulate(&tree, leaf, kg, &mut scorer, config, &mut rng)?;
            backpropagate(&mut tree, &path, reward, config.mode);
        } else {
            for child in fresh {
                let reward = simulate(&tree, child, kg, &mut scorer, config, &mut rng)?;
                let mut p = path.clone();
                p.push(child);
                backpropagate(&mut tree, &p, reward, config.mode);
            }
        }
        if config.finetune && config.finetune_epochs > 0 && (it + 1) % config.finetune_period == 0 {
            let pairs = sample_pseudo_pairs(&tree, config, &mut rng);
            if !pairs.is_empty() {
                scorer.finetune(&pairs, &mut adam, config.finetune_epochs, config.finetune_lr)?;
                stats.finetune_events += 1;
                stats.pseudo_pairs += pairs.len();
            }
        }
    }

    let answers = extract_answers(&tree, &mut scorer, config)?;
    stats.nodes = tree.nodes.len();
    stats.max_depth = tree.max_depth();
    Ok(SearchResult {
        answers,
        usage: usage.snapshot(),
        stats,
    })
}

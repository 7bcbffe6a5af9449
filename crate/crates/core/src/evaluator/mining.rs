//! Supervision mining: turns a question with known answers into ranking triplets.

use std::collections::{BTreeSet, HashSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::train::TrainTriplet;
use crate::embed::{Embedder, Embedding};
use crate::error::Result;
use crate::kg::{EntityId, EntityPath, KnowledgeGraph, RelationId};

#[derive(Clone, Debug, PartialEq)]
pub struct MiningConfig {
    pub max_len: usize,
    pub hard_per_positive: usize,
    pub random_per_positive: usize,
    /// Upper bound on positives enumerated per topic.
    pub max_positives: usize,
    /// Attempts per requested random negative.
    pub walk_attempts: usize,
    pub seed: u64,
}

impl Default for MiningConfig {
    fn default() -> Self {
        MiningConfig {
            max_len: 4,
            hard_per_positive: 1,
            random_per_positive: 1,
            max_positives: 16,
            walk_attempts: 32,
            seed: 0,
        }
    }
}

/// Relation-level view of mined paths, before embedding.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MinedPaths {
    pub positives: Vec<EntityPath>,
    /// `(positive index, negative path)` pairs.
    pub negatives: Vec<(usize, EntityPath)>,
}

/// Paths that end near a positive's answer without reaching it: its proper
/// prefixes, one-hop deviations after any prefix (each also continued at
/// random to the positive's length), and one-hop overshoots past the answer
/// (within `max_len`).
fn hard_candidates(
    kg: &KnowledgeGraph,
    pos: &EntityPath,
    answers: &HashSet<EntityId>,
    gold_seqs: &HashSet<Vec<RelationId>>,
    max_len: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<EntityPath> {
    let mut out = Vec::new();
    let push = |p: EntityPath, out: &mut Vec<EntityPath>| {
        if !answers.contains(&p.end()) && !gold_seqs.contains(&p.relations()) {
            out.push(p);
        }
    };
    for j in 0..=pos.len() {
        let prefix = EntityPath {
            start: pos.start,
            hops: pos.hops[..j].to_vec(),
        };
        if j == pos.len() && j + 1 > max_len {
            break;
        }
        if j > 0 && j < pos.len() {
            push(prefix.clone(), &mut out);
        }
        let on_path: HashSet<EntityId> = prefix.entities().collect();
        for &(r, o) in kg.neighbors(prefix.end()) {
            if pos.hops.get(j) == Some(&(r, o)) || on_path.contains(&o) {
                continue;
            }
            let mut neg = prefix.clone();
            neg.hops.push((r, o));
            if neg.len() < pos.len() {
                if let Some(full) = continue_walk(kg, &neg, pos.len(), answers, rng) {
                    push(full, &mut out);
                }
            }
            push(neg, &mut out);
        }
    }
    out
}

/// Extends `path` one uniformly chosen simple hop at a time, avoiding answer
/// entities, until it has `len` hops. `None` at a dead end.
fn continue_walk(
    kg: &KnowledgeGraph,
    path: &EntityPath,
    len: usize,
    answers: &HashSet<EntityId>,
    rng: &mut ChaCha8Rng,
) -> Option<EntityPath> {
    let mut out = path.clone();
    let mut seen: HashSet<EntityId> = out.entities().collect();
    while out.len() < len {
        let options: Vec<(RelationId, EntityId)> = kg
            .neighbors(out.end())
            .iter()
            .copied()
            .filter(|(_, o)| !seen.contains(o) && !answers.contains(o))
            .collect();
        let &(r, o) = options.choose(rng)?;
        out.hops.push((r, o));
        seen.insert(o);
    }
    Some(out)
}

fn random_negative(
    kg: &KnowledgeGraph,
    topics: &[EntityId],
    answers: &HashSet<EntityId>,
    gold_seqs: &HashSet<Vec<RelationId>>,
    config: &MiningConfig,
    rng: &mut ChaCha8Rng,
) -> Option<EntityPath> {
    for _ in 0..config.walk_attempts {
        let start = topics[rng.gen_range(0..topics.len())];
        let len = rng.gen_range(1..=config.max_len);
        let walk = kg.random_walk(start, len, rng);
        if walk.is_empty() || walk.entities().any(|e| answers.contains(&e)) {
            continue;
        }
        if !gold_seqs.contains(&walk.relations()) {
            return Some(walk);
        }
    }
    None
}

/// Positive paths with their paired negatives, all as graph paths.
pub fn mine_paths(
    kg: &KnowledgeGraph,
    topics: &[EntityId],
    answers: &HashSet<EntityId>,
    config: &MiningConfig,
) -> MinedPaths {
    let mut mined = MinedPaths::default();
    if topics.is_empty() || answers.is_empty() {
        return mined;
    }
    for &t in topics {
        mined
            .positives
            .extend(kg.enumerate_paths(t, answers, config.max_len, config.max_positives));
    }
    if mined.positives.is_empty() {
        return mined;
    }
    let gold_seqs: HashSet<Vec<RelationId>> = mined.positives.iter().map(EntityPath::relations).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let per = config.hard_per_positive + config.random_per_positive;
    for (pi, pos) in mined.positives.iter().enumerate() {
        let mut hard = hard_candidates(kg, pos, answers, &gold_seqs, config.max_len, &mut rng);
        hard.shuffle(&mut rng);
        hard.truncate(config.hard_per_positive);
        let mut chosen: Vec<EntityPath> = hard;
        while chosen.len() < per {
            match random_negative(kg, topics, answers, &gold_seqs, config, &mut rng) {
                Some(w) => chosen.push(w),
                None => break,
            }
        }
        mined.negatives.extend(chosen.into_iter().map(|n| (pi, n)));
    }
    mined
}

/// Embeds mined paths into training triplets.
pub fn mine_triplets(
    kg: &KnowledgeGraph,
    question: &str,
    topics: &[EntityId],
    answers: &HashSet<EntityId>,
    embedder: &Embedder,
    config: &MiningConfig,
) -> Result<Vec<TrainTriplet>> {
    let mined = mine_paths(kg, topics, answers, config);
    if mined.negatives.is_empty() {
        log::debug!("no supervision mined for question `{question}`");
        return Ok(Vec::new());
    }
    let rels: BTreeSet<RelationId> = mined
        .positives
        .iter()
        .chain(mined.negatives.iter().map(|(_, n)| n))
        .flat_map(EntityPath::relations)
        .collect();
    let rels: Vec<RelationId> = rels.into_iter().collect();
    let labels: Vec<&str> = rels.iter().map(|&r| kg.relation_label(r)).collect();
    let vecs = embedder.embed_all(&labels)?;
    let lookup = |r: RelationId| -> Embedding { vecs[rels.binary_search(&r).expect("embedded")].clone() };
    let embed_path = |p: &EntityPath| -> Vec<Embedding> { p.relations().into_iter().map(lookup).collect() };
    let q = embedder.embed_text(question)?;
    let positives: Vec<Vec<Embedding>> = mined.positives.iter().map(embed_path).collect();
    mined
        .negatives
        .iter()
        .map(|(pi, n)| TrainTriplet::new(q.clone(), positives[*pi].clone(), embed_path(n)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::StubMode;
    use crate::kg::GraphBuilder;

    // t -r1-> a -r2-> ans, plus the sibling a -r3-> x.
    fn sibling_graph() -> KnowledgeGraph {
        let mut b = GraphBuilder::new(false);
        b.add("t", "r1", "a");
        b.add("a", "r2", "ans");
        b.add("a", "r3", "x");
        b.add("y", "r4", "t");
        b.build()
    }

    fn ids(kg: &KnowledgeGraph, topic: &str, answer: &str) -> (Vec<EntityId>, HashSet<EntityId>) {
        (
            vec![kg.entity_id(topic).unwrap()],
            [kg.entity_id(answer).unwrap()].into_iter().collect(),
        )
    }

    #[test]
    fn sibling_branch_and_prefix_are_the_hard_negatives() {
        let kg = sibling_graph();
        let (topics, answers) = ids(&kg, "t", "ans");
        let cfg = MiningConfig {
            hard_per_positive: 2,
            random_per_positive: 0,
            ..MiningConfig::default()
        };
        let mined = mine_paths(&kg, &topics, &answers, &cfg);
        assert_eq!(mined.positives.len(), 1);
        let mut got: Vec<(Vec<&str>, &str)> = mined
            .negatives
            .iter()
            .map(|(_, n)| {
                let labels = n.relations().iter().map(|&r| kg.relation_label(r)).collect();
                (labels, kg.entity_label(n.end()))
            })
            .collect();
        got.sort();
        assert_eq!(got, vec![(vec!["r1"], "a"), (vec!["r1", "r3"], "x")]);
    }

    #[test]
    fn unreachable_answer_gives_nothing() {
        let kg = sibling_graph();
        let (topics, answers) = ids(&kg, "t", "y");
        let e = Embedder::stub(1, 8, StubMode::Hashed);
        let ts = mine_triplets(&kg, "q", &topics, &answers, &e, &MiningConfig::default()).unwrap();
        assert!(ts.is_empty());
    }

    #[test]
    fn negatives_per_positive_is_honoured() {
        let mut b = GraphBuilder::new(true);
        for i in 0..6 {
            b.add("t", &format!("d{i}"), &format!("x{i}"));
            b.add(&format!("x{i}"), "e", &format!("z{i}"));
        }
        b.add("t", "g1", "m");
        b.add("m", "g2", "ans");
        b.add("m", "s", "w");
        let kg = b.build();
        let (topics, answers) = ids(&kg, "t", "ans");
        let cfg = MiningConfig::default();
        let mined = mine_paths(&kg, &topics, &answers, &cfg);
        assert_eq!(mined.negatives.len(), 2 * mined.positives.len());
        for (pi, n) in &mined.negatives {
            assert!(n.entities().all(|e| !answers.contains(&e)));
            assert_ne!(n.relations(), mined.positives[*pi].relations());
        }
        let e = Embedder::stub(1, 8, StubMode::Hashed);
        let ts = mine_triplets(&kg, "q", &topics, &answers, &e, &cfg).unwrap();
        assert_eq!(ts.len(), mined.negatives.len());
        let again = mine_triplets(&kg, "q", &topics, &answers, &e, &cfg).unwrap();
        assert_eq!(ts, again);
    }
}

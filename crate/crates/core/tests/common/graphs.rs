//! Random small graphs and exhaustive reference implementations.

use std::collections::{BTreeSet, HashSet};

use damr::kg::{EntityId, EntityPath, GraphBuilder, KnowledgeGraph};
use rand::Rng;

/// Random graph with at most `max_entities` entities; self loops and
/// parallel edges are allowed.
pub fn random_graph<R: Rng>(rng: &mut R, max_entities: usize, inverse: bool) -> KnowledgeGraph {
    let n = rng.gen_range(2..=max_entities);
    let rels = rng.gen_range(1..=5);
    let edges = rng.gen_range(1..=3 * n);
    let mut b = GraphBuilder::new(inverse);
    for i in 0..n {
        b.add_entity(&format!("e{i}"));
    }
    for _ in 0..edges {
        let s = rng.gen_range(0..n);
        let o = rng.gen_range(0..n);
        let r = rng.gen_range(0..rels);
        b.add(&format!("e{s}"), &format!("r{r}"), &format!("e{o}"));
    }
    b.build()
}

/// Every simple path from `start` of 1..=`max_len` hops ending in `targets`,
/// built by scanning the flat triple list, sorted by hop sequence, first `cap`.
pub fn brute_paths(
    kg: &KnowledgeGraph,
    start: EntityId,
    targets: &HashSet<EntityId>,
    max_len: usize,
    cap: usize,
) -> Vec<EntityPath> {
    let mut all = Vec::new();
    let mut frontier = vec![EntityPath::new(start)];
    for _ in 0..max_len {
        let mut next = Vec::new();
        for p in &frontier {
            for t in kg.triples() {
                if t.subject == p.end() && !p.entities().any(|e| e == t.object) {
                    let mut q = p.clone();
                    q.hops.push((t.relation, t.object));
                    next.push(q);
                }
            }
        }
        all.extend(next.iter().filter(|p| targets.contains(&p.end())).cloned());
        frontier = next;
    }
    all.sort_by(|a, b| a.hops.cmp(&b.hops));
    all.truncate(cap);
    all
}

pub type LabelTriple = (String, String, String);

/// Triples lying on some walk of at most `hops` edges from a topic, and the
/// entity set (topics plus triple endpoints), all as labels.
pub fn brute_subgraph(
    kg: &KnowledgeGraph,
    topics: &[EntityId],
    hops: usize,
) -> (BTreeSet<LabelTriple>, BTreeSet<String>) {
    let mut triples = BTreeSet::new();
    let mut entities: BTreeSet<String> = topics.iter().map(|&t| kg.entity_label(t).to_owned()).collect();
    let mut frontier: Vec<EntityId> = topics.to_vec();
    for _ in 0..hops {
        let mut next = Vec::new();
        for &e in &frontier {
            for t in kg.triples().iter().filter(|t| t.subject == e) {
                let lt = label_triple(kg, t.subject, t.relation, t.object);
                entities.insert(lt.0.clone());
                entities.insert(lt.2.clone());
                triples.insert(lt);
                next.push(t.object);
            }
        }
        frontier = next;
    }
    (triples, entities)
}

pub fn label_triple(kg: &KnowledgeGraph, s: EntityId, r: damr::kg::RelationId, o: EntityId) -> LabelTriple {
    (
        kg.entity_label(s).to_owned(),
        kg.relation_label(r).to_owned(),
        kg.entity_label(o).to_owned(),
    )
}

pub fn graph_labels(kg: &KnowledgeGraph) -> (BTreeSet<LabelTriple>, BTreeSet<String>) {
    let triples = kg
        .triples()
        .iter()
        .map(|t| label_triple(kg, t.subject, t.relation, t.object))
        .collect();
    let entities = (0..kg.num_entities())
        .map(|i| kg.entity_label(EntityId(i as u32)).to_owned())
        .collect();
    (triples, entities)
}

/// Checks both graph operations against the references on one random
/// instance; `Err` describes the first disagreement.
pub fn check_instance<R: Rng>(rng: &mut R) -> Result<(), String> {
    let inverse = rng.gen_bool(0.3);
    let kg = random_graph(rng, 50, inverse);
    let n = kg.num_entities();
    let start = EntityId(rng.gen_range(0..n) as u32);
    let targets: HashSet<EntityId> = (0..rng.gen_range(1..=4))
        .map(|_| EntityId(rng.gen_range(0..n) as u32))
        .collect();
    let max_len = rng.gen_range(1..=4);
    let cap = if rng.gen_bool(0.5) {
        usize::MAX
    } else {
        rng.gen_range(0..20)
    };
    let got = kg.enumerate_paths(start, &targets, max_len, cap);
    let want = brute_paths(&kg, start, &targets, max_len, cap);
    if got != want {
        return Err(format!(
            "enumerate_paths: {} paths, reference {}",
            got.len(),
            want.len()
        ));
    }

    let topics: Vec<EntityId> = (0..rng.gen_range(1..=3))
        .map(|_| EntityId(rng.gen_range(0..n) as u32))
        .collect();
    let hops = rng.gen_range(0..=3);
    let sub = kg.extract_subgraph(&topics, hops).map_err(|e| e.to_string())?;
    let (want_t, want_e) = brute_subgraph(&kg, &topics, hops);
    let (got_t, got_e) = graph_labels(&sub);
    if got_t != want_t || got_e != want_e {
        return Err(format!(
            "extract_subgraph: {} triples / {} entities, reference {} / {}",
            got_t.len(),
            got_e.len(),
            want_t.len(),
            want_e.len()
        ));
    }
    Ok(())
}

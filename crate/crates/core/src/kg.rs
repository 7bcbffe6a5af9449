//! In-memory triple store.
//!
//! Entities and relations are interned to dense ids in first-seen order.
//! Forward adjacency lists are kept sorted by `(relation, object)` so that
//! relation lookups are a binary search and every traversal is
//! deterministic.

use std::collections::{BTreeSet, HashMap, HashSet, VecDeque};
use std::fmt;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Suffix appended to a relation label to name its inverse.
pub const INVERSE_SUFFIX: &str = "^inv";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EntityId(pub u32);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RelationId(pub u32);

impl EntityId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl RelationId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for EntityId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "e{}", self.0)
    }
}

impl fmt::Display for RelationId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "r{}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Triple {
    pub subject: EntityId,
    pub relation: RelationId,
    pub object: EntityId,
}

/// Bijective label <-> dense id map.
#[derive(Clone, Debug, Default)]
struct Interner {
    labels: Vec<String>,
    index: HashMap<String, u32>,
}

impl Interner {
    fn intern(&mut self, label: &str) -> u32 {
        if let Some(&id) = self.index.get(label) {
            return id;
        }
        let id = self.labels.len() as u32;
        self.labels.push(label.to_owned());
        self.index.insert(label.to_owned(), id);
        id
    }

    fn get(&self, label: &str) -> Option<u32> {
        self.index.get(label).copied()
    }

    fn label(&self, id: u32) -> Option<&str> {
        self.labels.get(id as usize).map(String::as_str)
    }

    fn len(&self) -> usize {
        self.labels.len()
    }
}

/// A path grounded in the graph: a start entity followed by `(relation, entity)` hops.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct EntityPath {
    pub start: EntityId,
    pub hops: Vec<(RelationId, EntityId)>,
}

impl EntityPath {
    pub fn new(start: EntityId) -> Self {
        EntityPath {
            start,
            hops: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.hops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hops.is_empty()
    }

    pub fn end(&self) -> EntityId {
        self.hops.last().map_or(self.start, |&(_, e)| e)
    }

    pub fn relations(&self) -> Vec<RelationId> {
        self.hops.iter().map(|&(r, _)| r).collect()
    }

    /// Every entity visited, including the start.
    pub fn entities(&self) -> impl Iterator<Item = EntityId> + '_ {
        std::iter::once(self.start).chain(self.hops.iter().map(|&(_, e)| e))
    }
}

#[derive(Clone, Debug)]
pub struct KnowledgeGraph {
    entities: Interner,
    relations: Interner,
    triples: Vec<Triple>,
    adjacency: Vec<Vec<(RelationId, EntityId)>>,
    include_inverse: bool,
}

/// Incremental builder; deduplicates triples and optionally adds inverse edges.
#[derive(Debug, Default)]
pub struct GraphBuilder {
    entities: Interner,
    relations: Interner,
    triples: BTreeSet<Triple>,
    include_inverse: bool,
}

impl GraphBuilder {
    pub fn new(include_inverse: bool) -> Self {
        GraphBuilder {
            include_inverse,
            ..Default::default()
        }
    }

    pub fn add_entity(&mut self, label: &str) -> EntityId {
        EntityId(self.entities.intern(label))
    }

    pub fn add_relation(&mut self, label: &str) -> RelationId {
        RelationId(self.relations.intern(label))
    }

    pub fn add(&mut self, subject: &str, relation: &str, object: &str) {
        let s = self.add_entity(subject);
        let r = self.add_relation(relation);
        let o = self.add_entity(object);
        self.triples.insert(Triple {
            subject: s,
            relation: r,
            object: o,
        });
        if self.include_inverse {
            let inv = self.add_relation(&format!("{relation}{INVERSE_SUFFIX}"));
            self.triples.insert(Triple {
                subject: o,
                relation: inv,
                object: s,
            });
        }
    }

    pub fn build(self) -> KnowledgeGraph {
        let mut adjacency = vec![Vec::new(); self.entities.len()];
        for t in &self.triples {
            adjacency[t.subject.index()].push((t.relation, t.object));
        }
        for list in &mut adjacency {
            list.sort_unstable();
        }
        KnowledgeGraph {
            entities: self.entities,
            relations: self.relations,
            triples: self.triples.into_iter().collect(),
            adjacency,
            include_inverse: self.include_inverse,
        }
    }
}

impl KnowledgeGraph {
    pub fn load(path: impl AsRef<Path>, include_inverse: bool) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string(), include_inverse)
    }

    /// Parses the tab-separated `subject\trelation\tobject` format.
    /// `source` names the input in error messages.
    pub fn parse(text: &str, source: &str, include_inverse: bool) -> Result<Self> {
        let mut builder = GraphBuilder::new(include_inverse);
        for (i, raw) in text.lines().enumerate() {
            let line = raw.strip_suffix('\r').unwrap_or(raw);
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            let err = |message: String| Error::Parse {
                path: source.to_owned(),
                line: i + 1,
                message,
            };
            if fields.len() != 3 {
                return Err(err(format!("expected 3 tab-separated fields, found {}", fields.len())));
            }
            if let Some(pos) = fields.iter().position(|f| f.is_empty()) {
                let which = ["subject", "relation", "object"][pos];
                return Err(err(format!("empty {which} label")));
            }
            builder.add(fields[0], fields[1], fields[2]);
        }
        Ok(builder.build())
    }

    /// Writes every triple (inverse edges included) in the on-disk format.
    pub fn write_tsv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = Vec::new();
        for t in &self.triples {
            writeln!(
                out,
                "{}\t{}\t{}",
                self.entity_label(t.subject),
                self.relation_label(t.relation),
                self.entity_label(t.object)
            )
            .expect("write to Vec");
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn num_entities(&self) -> usize {
        self.entities.len()
    }

    pub fn num_relations(&self) -> usize {
        self.relations.len()
    }

    pub fn num_triples(&self) -> usize {
        self.triples.len()
    }

    pub fn include_inverse(&self) -> bool {
        self.include_inverse
    }

    /// Deduplicated triples sorted by `(subject, relation, object)`.
    pub fn triples(&self) -> &[Triple] {
        &self.triples
    }

    pub fn entity_id(&self, label: &str) -> Result<EntityId> {
        self.entities.get(label).map(EntityId).ok_or_else(|| Error::Lookup {
            kind: "entity",
            key: label.to_owned(),
        })
    }

    pub fn relation_id(&self, label: &str) -> Result<RelationId> {
        self.relations.get(label).map(RelationId).ok_or_else(|| Error::Lookup {
            kind: "relation",
            key: label.to_owned(),
        })
    }

    pub fn resolve_entities<S: AsRef<str>>(&self, labels: &[S]) -> Result<Vec<EntityId>> {
        labels.iter().map(|l| self.entity_id(l.as_ref())).collect()
    }

    /// Panics on an id that does not belong to this graph.
    pub fn entity_label(&self, id: EntityId) -> &str {
        self.entities.label(id.0).expect("entity id out of range")
    }

    /// Panics on an id that does not belong to this graph.
    pub fn relation_label(&self, id: RelationId) -> &str {
        self.relations.label(id.0).expect("relation id out of range")
    }

    pub fn relation_labels(&self) -> &[String] {
        &self.relations.labels
    }

    fn check_entity(&self, e: EntityId) -> Result<()> {
        if e.index() < self.num_entities() {
            Ok(())
        } else {
            Err(Error::Lookup {
                kind: "entity id",
                key: e.to_string(),
            })
        }
    }

    /// Outgoing `(relation, object)` edges of `e`, sorted.
    pub fn neighbors(&self, e: EntityId) -> &[(RelationId, EntityId)] {
        self.adjacency.get(e.index()).map_or(&[], Vec::as_slice)
    }

    /// Distinct relations on the outgoing edges of `e`, sorted by id.
    pub fn outgoing_relations(&self, e: EntityId) -> Result<Vec<RelationId>> {
        self.check_entity(e)?;
        let mut out: Vec<RelationId> = Vec::new();
        for &(r, _) in self.neighbors(e) {
            if out.last() != Some(&r) {
                out.push(r);
            }
        }
        Ok(out)
    }

    /// Objects of `(e, r, ·)`, sorted by id.
    pub fn objects(&self, e: EntityId, r: RelationId) -> impl Iterator<Item = EntityId> + '_ {
        let edges = self.neighbors(e);
        let lo = edges.partition_point(|&(rel, _)| rel < r);
        let hi = edges.partition_point(|&(rel, _)| rel <= r);
        edges[lo..hi].iter().map(|&(_, o)| o)
    }

    /// Union of entities reachable from `frontier` by one `r` edge, sorted.
    pub fn follow(&self, frontier: &[EntityId], r: RelationId) -> Vec<EntityId> {
        let set: BTreeSet<EntityId> = frontier.iter().flat_map(|&e| self.objects(e, r)).collect();
        set.into_iter().collect()
    }

    /// Localized subgraph: every triple on a path of at most `hops` edges
    /// starting at one of `topics`. Ids are re-compacted, preserving the
    /// parent's relative order.
    pub fn extract_subgraph(&self, topics: &[EntityId], hops: usize) -> Result<KnowledgeGraph> {
        for &t in topics {
            self.check_entity(t)?;
        }
        // Multi-source BFS distances, bounded by `hops - 1` for subjects.
        let mut dist: Vec<Option<usize>> = vec![None; self.num_entities()];
        let mut queue = VecDeque::new();
        for &t in topics {
            if dist[t.index()].is_none() {
                dist[t.index()] = Some(0);
                queue.push_back(t);
            }
        }
        let mut kept = Vec::new();
        while let Some(e) = queue.pop_front() {
            let d = dist[e.index()].expect("queued entities have a distance");
            if d >= hops {
                continue;
            }
            for &(r, o) in self.neighbors(e) {
                kept.push(Triple {
                    subject: e,
                    relation: r,
                    object: o,
                });
                if dist[o.index()].is_none() {
                    dist[o.index()] = Some(d + 1);
                    queue.push_back(o);
                }
            }
        }

        let mut ents: BTreeSet<EntityId> = topics.iter().copied().collect();
        let mut rels: BTreeSet<RelationId> = BTreeSet::new();
        for t in &kept {
            ents.insert(t.subject);
            ents.insert(t.object);
            rels.insert(t.relation);
        }
        let mut builder = GraphBuilder::new(false);
        builder.include_inverse = self.include_inverse;
        for &e in &ents {
            builder.add_entity(self.entity_label(e));
        }
        for &r in &rels {
            builder.add_relation(self.relation_label(r));
        }
        for t in kept {
            // Inverse triples are already materialized in `kept`, so they are
            // inserted directly rather than regenerated.
            let s = EntityId(builder.entities.get(self.entity_label(t.subject)).unwrap());
            let r = RelationId(builder.relations.get(self.relation_label(t.relation)).unwrap());
            let o = EntityId(builder.entities.get(self.entity_label(t.object)).unwrap());
            builder.triples.insert(Triple {
                subject: s,
                relation: r,
                object: o,
            });
        }
        Ok(builder.build())
    }

    /// Random walk of at most `len` hops, each hop drawn uniformly from the
    /// current entity's outgoing edges. Stops early at a dead end.
    pub fn random_walk<R: Rng + ?Sized>(&self, start: EntityId, len: usize, rng: &mut R) -> EntityPath {
        let mut path = EntityPath::new(start);
        let mut cur = start;
        for _ in 0..len {
            let edges = self.neighbors(cur);
            if edges.is_empty() {
                break;
            }
            let (r, o) = edges[rng.gen_range(0..edges.len())];
            path.hops.push((r, o));
            cur = o;
        }
        path
    }

    /// Simple paths (no repeated entity) from `start` that end in `targets`
    /// with at most `max_len` hops, in lexicographic `(relation, entity)`
    /// order, truncated to the first `cap`.
    pub fn enumerate_paths(
        &self,
        start: EntityId,
        targets: &HashSet<EntityId>,
        max_len: usize,
        cap: usize,
    ) -> Vec<EntityPath> {
        let mut out = Vec::new();
        if cap == 0 || start.index() >= self.num_entities() {
            return out;
        }
        let mut path = EntityPath::new(start);
        let mut on_path = vec![false; self.num_entities()];
        on_path[start.index()] = true;
        self.dfs(&mut path, &mut on_path, targets, max_len, cap, &mut out);
        out
    }

    fn dfs(
        &self,
        path: &mut EntityPath,
        on_path: &mut [bool],
        targets: &HashSet<EntityId>,
        max_len: usize,
        cap: usize,
        out: &mut Vec<EntityPath>,
    ) {
        if path.len() >= max_len {
            return;
        }
        for &(r, o) in self.neighbors(path.end()) {
            if out.len() >= cap {
                return;
            }
            if on_path[o.index()] {
                continue;
            }
            path.hops.push((r, o));
            on_path[o.index()] = true;
            if targets.contains(&o) {
                out.push(path.clone());
            }
            self.dfs(path, on_path, targets, max_len, cap, out);
            on_path[o.index()] = false;
            path.hops.pop();
        }
    }
}

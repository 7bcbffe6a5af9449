//! Datasets, metrics, synthetic benchmarks, and batch evaluation.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fs;
use std::hash::Hash;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embed::Embedder;
use crate::error::{Error, Result};
use crate::evaluator::{mine_triplets, MiningConfig, ScorerParams, TrainTriplet};
use crate::kg::{EntityId, EntityPath, GraphBuilder, KnowledgeGraph};
use crate::mcts::{search, SearchConfig, SearchResult};
use crate::planner::{OraclePlanner, Planner};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QAItem {
    pub id: String,
    pub question: String,
    pub topic_entities: Vec<String>,
    pub answers: Vec<String>,
    /// Planted relation labels, present on synthetic data.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_path: Option<Vec<String>>,
}

impl QAItem {
    fn validate(&self) -> std::result::Result<(), String> {
        if self.topic_entities.is_empty() {
            return Err("topic_entities is empty".into());
        }
        if self.answers.is_empty() {
            return Err("answers is empty".into());
        }
        Ok(())
    }
}

/// Reads a JSON-lines dataset. Blank lines are skipped.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<QAItem>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_dataset(&text, &path.display().to_string())
}

pub fn parse_dataset(text: &str, source: &str) -> Result<Vec<QAItem>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| Error::Parse {
            path: source.to_owned(),
            line: i + 1,
            message,
        };
        let item: QAItem = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
        item.validate().map_err(err)?;
        out.push(item);
    }
    Ok(out)
}

pub fn write_dataset(items: &[QAItem], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut text = String::new();
    for item in items {
        text.push_str(&serde_json::to_string(item).expect("item serializes"));
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// 1 when the first prediction is a gold answer.
pub fn hits_at_1<T: Eq + Hash>(ranked: &[T], gold: &HashSet<T>) -> f64 {
    match ranked.first() {
        Some(top) if gold.contains(top) => 1.0,
        _ => 0.0,
    }
}

pub fn f1<T: Eq + Hash>(predicted: &HashSet<T>, gold: &HashSet<T>) -> f64 {
    let hit = predicted.intersection(gold).count() as f64;
    if hit == 0.0 {
        return 0.0;
    }
    let p = hit / predicted.len() as f64;
    let r = hit / gold.len() as f64;
    2.0 * p * r / (p + r)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub entities: usize,
    pub relations: usize,
    pub questions: usize,
    pub path_len: usize,
    pub branch: usize,
    pub seed: u64,
    /// Final gold hop uses a dedicated `marker` relation that distractors never use.
    pub marker: bool,
    /// Also hang distractor branches off each answer (otherwise answers are leaves).
    pub answer_branches: bool,
    /// Horizon within which gold paths are made unique.
    pub max_len: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            entities: 200,
            relations: 20,
            questions: 50,
            path_len: 3,
            branch: 4,
            seed: 0,
            marker: false,
            answer_branches: false,
            max_len: 4,
        }
    }
}

pub const MARKER_RELATION: &str = "marker";

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Precondition(m));
        if self.path_len == 0 || self.path_len > self.max_len {
            return fail(format!(
                "path length {} must lie in 1..={}",
                self.path_len, self.max_len
            ));
        }
        if self.relations < 2 {
            return fail("at least two relation types are needed".into());
        }
        if self.questions == 0 {
            return fail("at least one question is needed".into());
        }
        let need = self.questions * (self.path_len + 1);
        if self.entities < need {
            return fail(format!(
                "{} questions of length {} need at least {need} entities, got {}",
                self.questions, self.path_len, self.entities
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Synthetic {
    pub kg: KnowledgeGraph,
    pub items: Vec<QAItem>,
}

pub fn entity_label(i: usize) -> String {
    format!("ent_{i:04}")
}

pub fn relation_label(i: usize) -> String {
    format!("rel_{i:02}")
}

/// Builds a graph of planted gold chains with distractor branches off every
/// chain node (answers only with `answer_branches`).
pub fn generate_synthetic(spec: &SynthSpec) -> Result<Synthetic> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let hops = spec.path_len;
    let rels: Vec<String> = (0..spec.relations).map(relation_label).collect();

    // (subject, relation, object) with ids into the label tables.
    let mut gold: Vec<(usize, usize, usize)> = Vec::new();
    let mut distract: Vec<(usize, usize, usize)> = Vec::new();
    let marker_id = spec.relations;
    let mut chains = Vec::with_capacity(spec.questions);
    for q in 0..spec.questions {
        let nodes: Vec<usize> = (0..=hops).map(|i| q * (hops + 1) + i).collect();
        let mut path: Vec<usize> = (0..hops).map(|_| rng.gen_range(0..spec.relations)).collect();
        if spec.marker {
            path[hops - 1] = marker_id;
        }
        for i in 0..hops {
            gold.push((nodes[i], path[i], nodes[i + 1]));
        }
        chains.push((nodes, path));
    }
    for (nodes, path) in &chains {
        let (topic, answer) = (nodes[0], nodes[hops]);
        let branched = if spec.answer_branches {
            &nodes[..]
        } else {
            &nodes[..hops]
        };
        for (i, &node) in branched.iter().enumerate() {
            let next = path.get(i).copied();
            for _ in 0..spec.branch {
                let r = loop {
                    let r = rng.gen_range(0..spec.relations);
                    if Some(r) != next {
                        break r;
                    }
                };
                let o = loop {
                    let o = rng.gen_range(0..spec.entities);
                    if o != topic && o != answer && o != node {
                        break o;
                    }
                };
                distract.push((node, r, o));
            }
        }
    }
    let gold_set: HashSet<_> = gold.iter().copied().collect();
    distract.retain(|t| !gold_set.contains(t));
    let mut distract: Vec<_> = distract.into_iter().collect::<BTreeSet<_>>().into_iter().collect();

    let rel_name = |r: usize| {
        if r == marker_id {
            MARKER_RELATION.to_owned()
        } else {
            rels[r].clone()
        }
    };
    let rel_index: HashMap<String, usize> = (0..=marker_id).map(|r| (rel_name(r), r)).collect();
    let build = |distract: &[(usize, usize, usize)]| {
        let mut b = GraphBuilder::new(false);
        for i in 0..spec.entities {
            b.add_entity(&entity_label(i));
        }
        for r in &rels {
            b.add_relation(r);
        }
        if spec.marker {
            b.add_relation(MARKER_RELATION);
        }
        for &(s, r, o) in gold.iter().chain(distract) {
            b.add(&entity_label(s), &rel_name(r), &entity_label(o));
        }
        b.build()
    };

    // Drop distractor edges until every question has exactly one path to its answer.
    let mut kg = build(&distract);
    loop {
        let mut offending = None;
        'questions: for (nodes, _) in &chains {
            let topic = kg.entity_id(&entity_label(nodes[0]))?;
            let answer = kg.entity_id(&entity_label(nodes[hops]))?;
            let targets: HashSet<EntityId> = [answer].into_iter().collect();
            for p in kg.enumerate_paths(topic, &targets, spec.max_len, usize::MAX) {
                if let Some(edge) = first_distractor(&kg, &p, &gold_set, &rel_index) {
                    offending = Some(edge);
                    break 'questions;
                }
            }
        }
        match offending {
            Some(edge) => {
                distract.retain(|t| *t != edge);
                kg = build(&distract);
            }
            None => break,
        }
    }

    let items = chains
        .iter()
        .enumerate()
        .map(|(q, (nodes, path))| {
            let labels: Vec<String> = path.iter().map(|&r| rel_name(r)).collect();
            QAItem {
                id: format!("q{q:04}"),
                question: format!(
                    "which entity is reached from {} by following {}",
                    entity_label(nodes[0]),
                    labels.join(" then ")
                ),
                topic_entities: vec![entity_label(nodes[0])],
                answers: vec![entity_label(nodes[hops])],
                gold_path: Some(labels),
            }
        })
        .collect();
    Ok(Synthetic { kg, items })
}

fn first_distractor(
    kg: &KnowledgeGraph,
    path: &EntityPath,
    gold: &HashSet<(usize, usize, usize)>,
    rel_index: &HashMap<String, usize>,
) -> Option<(usize, usize, usize)> {
    let index = |label: &str| {
        label
            .trim_start_matches("ent_")
            .parse::<usize>()
            .expect("synthetic label")
    };
    let mut cur = path.start;
    for &(r, o) in &path.hops {
        let s = index(kg.entity_label(cur));
        let t = index(kg.entity_label(o));
        let edge = (s, rel_index[kg.relation_label(r)], t);
        if !gold.contains(&edge) {
            return Some(edge);
        }
        cur = o;
    }
    None
}

/// Mines ranking triplets for every item whose topics and answers resolve.
pub fn mine_dataset(
    kg: &KnowledgeGraph,
    items: &[QAItem],
    embedder: &Embedder,
    config: &MiningConfig,
) -> Result<Vec<TrainTriplet>> {
    let mut out = Vec::new();
    for (i, item) in items.iter().enumerate() {
        let (Ok(topics), Ok(answers)) = (
            kg.resolve_entities(&item.topic_entities),
            kg.resolve_entities(&item.answers),
        ) else {
            log::warn!("skipping {}: unresolved entity", item.id);
            continue;
        };
        let answers: HashSet<EntityId> = answers.into_iter().collect();
        let cfg = MiningConfig {
            seed: config.seed.wrapping_add(i as u64),
            ..config.clone()
        };
        out.extend(mine_triplets(kg, &item.question, &topics, &answers, embedder, &cfg)?);
    }
    Ok(out)
}

/// How each question obtains its planner.
pub enum PlannerSetup<'a> {
    Shared(&'a Planner),
    /// Oracle built from each item's `gold_path`.
    Oracle {
        noise: f64,
        seed: u64,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub search: SearchConfig,
    pub seed: u64,
    pub workers: usize,
    /// Keep fine-tuned weights from one question to the next (sequential only).
    pub carry_scorer: bool,
    pub timings: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            search: SearchConfig::default(),
            seed: 0,
            workers: 1,
            carry_scorer: false,
            timings: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuestionRecord {
    pub id: String,
    pub hits_at_1: f64,
    pub f1: f64,
    pub llm_calls: u64,
    pub tokens: u64,
    pub predictions: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wall_ms: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub questions: usize,
    pub hits_at_1: f64,
    pub f1: f64,
    pub llm_calls: f64,
    pub tokens: f64,
}

impl Aggregate {
    pub fn from_records(records: &[QuestionRecord]) -> Self {
        let n = records.len();
        let mean = |f: &dyn Fn(&QuestionRecord) -> f64| {
            if n == 0 {
                0.0
            } else {
                records.iter().map(f).sum::<f64>() / n as f64
            }
        };
        Aggregate {
            questions: n,
            hits_at_1: mean(&|r| r.hits_at_1),
            f1: mean(&|r| r.f1),
            llm_calls: mean(&|r| r.llm_calls as f64),
            tokens: mean(&|r| r.tokens as f64),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_question: Vec<QuestionRecord>,
    pub aggregate: Aggregate,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json() + "\n").map_err(|e| Error::io(path, e))
    }
}

/// Answers predicted as a set: every answer tied with the top score.
pub fn predicted_set(result: &SearchResult) -> HashSet<EntityId> {
    let Some(top) = result.answers.first().map(|a| a.score) else {
        return HashSet::new();
    };
    result
        .answers
        .iter()
        .filter(|a| a.score >= top - 1e-9)
        .map(|a| a.entity)
        .collect()
}

fn run_one(
    kg: &KnowledgeGraph,
    item: &QAItem,
    planner: &PlannerSetup<'_>,
    params: &mut ScorerParams,
    embedder: &Embedder,
    config: &EvalConfig,
    seed: u64,
) -> Result<(SearchResult, HashSet<EntityId>)> {
    let topics = kg.resolve_entities(&item.topic_entities)?;
    let gold: HashSet<EntityId> = item.answers.iter().filter_map(|a| kg.entity_id(a).ok()).collect();
    let oracle;
    let planner = match planner {
        PlannerSetup::Shared(p) => *p,
        PlannerSetup::Oracle { noise, seed } => {
            let paths = item.gold_path.clone().into_iter().collect();
            oracle = Planner::Mock(OraclePlanner::new(paths, *noise, *seed));
            &oracle
        }
    };
    let result = search(
        kg,
        &item.question,
        &topics,
        planner,
        params,
        embedder,
        &config.search,
        seed,
    )?;
    Ok((result, gold))
}

fn record(
    kg: &KnowledgeGraph,
    item: &QAItem,
    outcome: Result<(SearchResult, HashSet<EntityId>)>,
    wall_ms: Option<f64>,
) -> QuestionRecord {
    match outcome {
        Ok((result, gold)) => {
            let ranked: Vec<EntityId> = result.answers.iter().map(|a| a.entity).collect();
            QuestionRecord {
                id: item.id.clone(),
                hits_at_1: hits_at_1(&ranked, &gold),
                f1: f1(&predicted_set(&result), &gold),
                llm_calls: result.usage.llm_calls,
                tokens: result.usage.tokens(),
                predictions: ranked.iter().map(|&e| kg.entity_label(e).to_owned()).collect(),
                error: None,
                wall_ms,
            }
        }
        Err(e) => QuestionRecord {
            id: item.id.clone(),
            hits_at_1: 0.0,
            f1: 0.0,
            llm_calls: 0,
            tokens: 0,
            predictions: Vec::new(),
            error: Some(e.to_string()),
            wall_ms,
        },
    }
}

/// Runs search on every item; per-question failures score zero.
pub fn evaluate(
    kg: &KnowledgeGraph,
    items: &[QAItem],
    planner: &PlannerSetup<'_>,
    checkpoint: &ScorerParams,
    embedder: &Embedder,
    config: &EvalConfig,
) -> Result<EvalReport> {
    if config.workers == 0 {
        return Err(Error::Precondition("at least one worker is required".into()));
    }
    if config.carry_scorer && config.workers > 1 {
        return Err(Error::Precondition(
            "carrying the scorer across questions requires one worker".into(),
        ));
    }
    let one = |i: usize, params: &mut ScorerParams| {
        let start = Instant::now();
        let seed = config.seed.wrapping_add(i as u64);
        let outcome = run_one(kg, &items[i], planner, params, embedder, config, seed);
        let wall = config.timings.then(|| start.elapsed().as_secs_f64() * 1e3);
        let rec = record(kg, &items[i], outcome, wall);
        log::info!(
            "{}: hits@1 {} f1 {:.3} calls {}",
            rec.id,
            rec.hits_at_1,
            rec.f1,
            rec.llm_calls
        );
        rec
    };
    let per_question: Vec<QuestionRecord> = if config.workers == 1 {
        let mut carried = checkpoint.clone();
        (0..items.len())
            .map(|i| {
                if config.carry_scorer {
                    one(i, &mut carried)
                } else {
                    one(i, &mut checkpoint.clone())
                }
            })
            .collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(config.workers)
            .build()
            .map_err(|e| Error::Precondition(format!("worker pool: {e}")))?;
        pool.install(|| {
            (0..items.len())
                .into_par_iter()
                .map(|i| one(i, &mut checkpoint.clone()))
                .collect()
        })
    };
    let aggregate = Aggregate::from_records(&per_question);
    Ok(EvalReport {
        per_question,
        aggregate,
    })
}

/// A search hyperparameter that can be swept.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepParam {
    TopK,
    MaxLen,
    Iterations,
    C,
    FinetunePeriod,
}

impl std::str::FromStr for SweepParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "top-k" => SweepParam::TopK,
            "max-len" => SweepParam::MaxLen,
            "iters" => SweepParam::Iterations,
            "c" => SweepParam::C,
            "finetune-period" => SweepParam::FinetunePeriod,
            other => return Err(Error::Input(format!("unknown sweep parameter `{other}`"))),
        })
    }
}

impl SweepParam {
    pub fn apply(self, config: &mut SearchConfig, value: f64) -> Result<()> {
        let as_count = |v: f64| {
            if v >= 0.0 && v.fract() == 0.0 {
                Ok(v as usize)
            } else {
                Err(Error::Input(format!("{v} is not a count")))
            }
        };
        match self {
            SweepParam::TopK => config.top_k = as_count(value)?,
            SweepParam::MaxLen => config.max_len = as_count(value)?,
            SweepParam::Iterations => config.iterations = as_count(value)?,
            SweepParam::C => config.c = value,
            SweepParam::FinetunePeriod => config.finetune_period = as_count(value)?,
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub value: f64,
    pub aggregate: Aggregate,
}

/// Re-runs evaluation for each value of one search parameter.
#[allow(clippy::too_many_arguments)]
pub fn sweep(
    kg: &KnowledgeGraph,
    items: &[QAItem],
    planner: &PlannerSetup<'_>,
    checkpoint: &ScorerParams,
    embedder: &Embedder,
    base: &EvalConfig,
    param: SweepParam,
    values: &[f64],
) -> Result<Vec<SweepPoint>> {
    values
        .iter()
        .map(|&value| {
            let mut config = base.clone();
            param.apply(&mut config.search, value)?;
            let report = evaluate(kg, items, planner, checkpoint, embedder, &config)?;
            Ok(SweepPoint {
                value,
                aggregate: report.aggregate,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dataset_parsing() {
        assert!(parse_dataset("", "d").unwrap().is_empty());
        let one = r#"{"id":"a","question":"q","topic_entities":["x"],"answers":["y"]}"#;
        assert_eq!(parse_dataset(one, "d").unwrap().len(), 1);
        let bad = format!("{one}\n{}", r#"{"id":"b","question":"q","topic_entities":["x"]}"#);
        match parse_dataset(&bad, "d") {
            Err(Error::Parse { line, message, .. }) => {
                assert_eq!(line, 2);
                assert!(message.contains("answers"));
            }
            other => panic!("{other:?}"),
        }
        let empty = r#"{"id":"b","question":"q","topic_entities":["x"],"answers":[]}"#;
        assert!(matches!(parse_dataset(empty, "d"), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn metric_examples() {
        let gold: HashSet<&str> = ["A"].into_iter().collect();
        assert_eq!(hits_at_1(&["A", "B"], &gold), 1.0);
        assert_eq!(hits_at_1(&["B", "A"], &gold), 0.0);
        assert_eq!(hits_at_1::<&str>(&[], &gold), 0.0);
        let s = |v: &[&'static str]| v.iter().copied().collect::<HashSet<_>>();
        assert_eq!(f1(&s(&["A"]), &s(&["A"])), 1.0);
        assert!((f1(&s(&["A", "B"]), &s(&["B", "C"])) - 0.5).abs() < 1e-12);
        assert_eq!(f1(&s(&[]), &s(&["A"])), 0.0);
    }

    #[test]
    fn aggregate_is_a_mean() {
        let rec = |f: f64| QuestionRecord {
            id: "x".into(),
            hits_at_1: f,
            f1: f,
            llm_calls: 3,
            tokens: 10,
            predictions: vec![],
            error: None,
            wall_ms: None,
        };
        let a = Aggregate::from_records(&[rec(1.0), rec(0.0)]);
        assert_eq!(a.f1, 0.5);
        assert_eq!(a.llm_calls, 3.0);
    }

    #[test]
    fn synthetic_bare_chains() {
        let spec = SynthSpec {
            entities: 40,
            relations: 5,
            questions: 10,
            path_len: 3,
            branch: 0,
            ..SynthSpec::default()
        };
        let s = generate_synthetic(&spec).unwrap();
        assert_eq!(s.kg.num_triples(), 30);
        assert_eq!(s.items.len(), 10);
        assert!(s.items[0]
            .question
            .contains(&s.items[0].gold_path.as_ref().unwrap().join(" then ")));
    }

    #[test]
    fn synthetic_rejects_too_few_entities() {
        let spec = SynthSpec {
            entities: 10,
            ..SynthSpec::default()
        };
        assert!(matches!(generate_synthetic(&spec), Err(Error::Precondition(_))));
    }
}

//! Relation planners: choose the top-k outgoing relations worth expanding.
//!
//! Three kinds share one interface: a remote chat-completion LLM (with an
//! optional embedding-similarity fallback), a pure embedding-similarity
//! ranker, and a deterministic oracle used for offline benchmarks.

use std::collections::HashSet;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::embed::Embedder;
use crate::error::{Error, Result};
use crate::kg::RelationId;
use crate::remote::RemoteClient;

/// Candidate lists longer than this are pre-filtered by similarity before prompting.
pub const MAX_PROMPT_CANDIDATES: usize = 50;

#[derive(Clone, Debug)]
pub struct PlannerQuery {
    pub question: String,
    /// Labels of the relations already on the path (root first).
    pub current_path: Vec<String>,
    pub candidates: Vec<(RelationId, String)>,
    pub k: usize,
}

impl PlannerQuery {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Precondition("planner k must be at least 1".into()));
        }
        if self.candidates.is_empty() {
            return Err(Error::Precondition("planner query has no candidates".into()));
        }
        let mut seen = HashSet::new();
        for (id, _) in &self.candidates {
            if !seen.insert(*id) {
                return Err(Error::Precondition(format!("duplicate candidate {id}")));
            }
        }
        Ok(())
    }

    fn label_of(&self, id: RelationId) -> &str {
        self.candidates
            .iter()
            .find(|(c, _)| *c == id)
            .map(|(_, l)| l.as_str())
            .unwrap_or_default()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PlannerSource {
    Llm,
    Similarity,
    Mock,
    Fallback,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlannerChoice {
    pub ranked: Vec<RelationId>,
    pub source: PlannerSource,
}

#[derive(Debug, Default)]
pub struct UsageCounter {
    llm_calls: AtomicU64,
    prompt_tokens: AtomicU64,
    completion_tokens: AtomicU64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub llm_calls: u64,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

impl Usage {
    pub fn tokens(&self) -> u64 {
        self.prompt_tokens + self.completion_tokens
    }
}

impl UsageCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&self, prompt_tokens: u64, completion_tokens: u64) {
        self.llm_calls.fetch_add(1, Ordering::Relaxed);
        self.prompt_tokens.fetch_add(prompt_tokens, Ordering::Relaxed);
        self.completion_tokens.fetch_add(completion_tokens, Ordering::Relaxed);
    }

    pub fn snapshot(&self) -> Usage {
        Usage {
            llm_calls: self.llm_calls.load(Ordering::Relaxed),
            prompt_tokens: self.prompt_tokens.load(Ordering::Relaxed),
            completion_tokens: self.completion_tokens.load(Ordering::Relaxed),
        }
    }
}

/// Token estimate used when the server does not report usage: ceil(chars / 4).
pub fn estimate_tokens(text: &str) -> u64 {
    (text.chars().count() as u64).div_ceil(4)
}

const PROMPT_TEMPLATE: &str = "\
Role
You are an expert assistant for Knowledge Graph Question Answering (KGQA). Your core capability is to deeply understand natural language questions and the semantics of knowledge graph relations to find the most relevant reasoning paths.

Task
Your task is to act as a “Relation Retriever.” Given a natural language question and a list of candidate relations, you must analyze the semantics of the question and each relation to select up to k relations that are most likely to lead to the correct answer.

Rules and Constraints
- Fidelity to Candidates: Your selection of relations MUST come strictly from the provided Candidate Relations list. Do not invent or modify relations.
- Quantity Limit: Return no more than k relations. If multiple relations are highly relevant, order them from most to least relevant. If there are fewer than k relevant relations, return only those.
- Output Format: Your response MUST be a list of strings, containing the names of the relations you have selected.

Example
- Input:
  - Question: \"who was the president after jfk died\"
  - Candidate Relations: {\"government.president\", \"government.president.successor\", \"location.location.containedby\", \"people.person.place_of_birth\"}
  - K: 2
- Output:
[\"government.president\", \"government.president.successor\"]

Your Task
- Question: {question}
- Candidate Relations: {relations_list}
- K: {k}

Output:
";

/// `{"a", "b"}` in the given order, labels inserted verbatim.
pub fn render_relations<S: AsRef<str>>(labels: &[S]) -> String {
    let inner: Vec<String> = labels.iter().map(|l| format!("\"{}\"", l.as_ref())).collect();
    format!("{{{}}}", inner.join(", "))
}

pub fn build_prompt(query: &PlannerQuery) -> String {
    let labels: Vec<&str> = query.candidates.iter().map(|(_, l)| l.as_str()).collect();
    // Substitute the caller-controlled question last so braces in it are
    // never mistaken for template slots.
    PROMPT_TEMPLATE
        .replacen("{relations_list}", &render_relations(&labels), 1)
        .replacen("{k}", &query.k.to_string(), 1)
        .replacen("{question}", &query.question, 1)
}

/// Finds the first `[ "..." , "..." ]` list in `raw`. A string ends at a
/// quote followed (after optional whitespace) by `,` or `]`, so labels may
/// themselves contain quotes.
pub fn extract_string_list(raw: &str) -> Option<Vec<String>> {
    let bytes = raw.as_bytes();
    let mut from = 0;
    while let Some(off) = raw[from..].find('[') {
        let start = from + off;
        if let Some(list) = parse_list_at(raw, start + 1) {
            return Some(list);
        }
        from = start + 1;
        debug_assert!(from <= bytes.len());
    }
    None
}

fn skip_ws(s: &str, mut i: usize) -> usize {
    while let Some(c) = s[i..].chars().next() {
        if !c.is_whitespace() {
            break;
        }
        i += c.len_utf8();
    }
    i
}

fn parse_list_at(s: &str, mut i: usize) -> Option<Vec<String>> {
    let mut items = Vec::new();
    i = skip_ws(s, i);
    if s[i..].starts_with(']') {
        return Some(items);
    }
    loop {
        i = skip_ws(s, i);
        if !s[i..].starts_with('"') {
            return None;
        }
        let body_start = i + 1;
        // Find the closing quote: the first `"` followed by ws then `,` or `]`.
        let mut j = body_start;
        let end = loop {
            let q = s[j..].find('"')? + j;
            let after = skip_ws(s, q + 1);
            if s[after..].starts_with(',') || s[after..].starts_with(']') {
                break q;
            }
            j = q + 1;
        };
        items.push(s[body_start..end].to_owned());
        i = skip_ws(s, end + 1);
        if s[i..].starts_with(']') {
            return Some(items);
        }
        // Must be a comma.
        i += 1;
    }
}

/// Maps an LLM reply onto candidate ids: exact (trimmed) label matches only,
/// response order, no duplicates, at most `k`.
pub fn parse_response(raw: &str, query: &PlannerQuery) -> Result<Vec<RelationId>> {
    let list = extract_string_list(raw).ok_or_else(|| Error::Planner("response contains no list of strings".into()))?;
    let mut out: Vec<RelationId> = Vec::new();
    for item in list {
        let item = item.trim();
        if let Some((id, _)) = query.candidates.iter().find(|(_, l)| l.trim() == item) {
            if !out.contains(id) {
                out.push(*id);
            }
        }
        if out.len() == query.k {
            break;
        }
    }
    if out.is_empty() {
        return Err(Error::Planner("response names no candidate relation".into()));
    }
    Ok(out)
}

/// Truncates to k; when every candidate fits, appends any the planner left
/// out so that nothing is pruned.
fn finalize(query: &PlannerQuery, mut ranked: Vec<RelationId>, source: PlannerSource) -> PlannerChoice {
    ranked.truncate(query.k);
    if query.candidates.len() <= query.k {
        for (id, _) in &query.candidates {
            if !ranked.contains(id) {
                ranked.push(*id);
            }
        }
    }
    PlannerChoice { ranked, source }
}

fn render_choice(query: &PlannerQuery, ranked: &[RelationId]) -> String {
    let labels: Vec<String> = ranked.iter().map(|&r| format!("\"{}\"", query.label_of(r))).collect();
    format!("[{}]", labels.join(", "))
}

/// Ranks candidates by cosine similarity between question and label embeddings.
#[derive(Clone, Debug)]
pub struct SimilarityPlanner {
    pub embedder: Arc<Embedder>,
}

impl SimilarityPlanner {
    pub fn new(embedder: Arc<Embedder>) -> Self {
        SimilarityPlanner { embedder }
    }

    /// All candidates, most similar first; ties keep candidate order.
    pub fn rank(&self, query: &PlannerQuery) -> Result<Vec<RelationId>> {
        let q = self.embedder.embed_text(&query.question)?;
        let labels: Vec<&str> = query.candidates.iter().map(|(_, l)| l.as_str()).collect();
        let embs = self.embedder.embed_all(&labels)?;
        let mut scored: Vec<(usize, f64)> = embs.iter().map(|e| q.cosine(e)).enumerate().collect();
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        Ok(scored.into_iter().map(|(i, _)| query.candidates[i].0).collect())
    }
}

/// Oracle for synthetic benchmarks: relations continuing a known gold path
/// come first, then the rest by label. With probability `noise` (per query,
/// derived from the seed and query contents) gold relations are demoted to
/// the end instead.
#[derive(Clone, Debug, Default)]
pub struct OraclePlanner {
    pub gold_paths: Vec<Vec<String>>,
    pub noise: f64,
    pub seed: u64,
}

impl OraclePlanner {
    pub fn new(gold_paths: Vec<Vec<String>>, noise: f64, seed: u64) -> Self {
        OraclePlanner {
            gold_paths,
            noise,
            seed,
        }
    }

    fn is_gold(&self, current: &[String], label: &str) -> bool {
        self.gold_paths
            .iter()
            .any(|g| g.len() > current.len() && g[..current.len()] == *current && g[current.len()] == label)
    }

    fn query_rng(&self, query: &PlannerQuery) -> ChaCha8Rng {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(query.question.as_bytes());
        for p in &query.current_path {
            h.update([0u8]);
            h.update(p.as_bytes());
        }
        for (id, _) in &query.candidates {
            h.update(id.0.to_le_bytes());
        }
        ChaCha8Rng::from_seed(h.finalize().into())
    }

    pub fn rank(&self, query: &PlannerQuery) -> Vec<RelationId> {
        let demote = self.noise > 0.0 && self.query_rng(query).gen_bool(self.noise.min(1.0));
        let mut cands: Vec<(bool, &str, RelationId)> = query
            .candidates
            .iter()
            .map(|(id, l)| {
                let gold = self.is_gold(&query.current_path, l);
                (gold == demote, l.as_str(), *id)
            })
            .collect();
        // `false` sorts first: gold first normally, last when demoted.
        cands.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.cmp(b.1)).then(a.2.cmp(&b.2)));
        cands.into_iter().map(|(_, _, id)| id).collect()
    }
}

#[derive(Debug)]
pub struct LlmPlanner {
    pub client: RemoteClient,
    pub model: String,
    pub fallback: Option<SimilarityPlanner>,
}

impl LlmPlanner {
    pub fn new(client: RemoteClient, model: impl Into<String>, fallback: Option<SimilarityPlanner>) -> Self {
        LlmPlanner {
            client,
            model: model.into(),
            fallback,
        }
    }

    fn bounded_query(&self, query: &PlannerQuery) -> Result<PlannerQuery> {
        if query.candidates.len() <= MAX_PROMPT_CANDIDATES {
            return Ok(query.clone());
        }
        let keep: Vec<RelationId> = match &self.fallback {
            Some(sim) => sim.rank(query)?,
            None => query.candidates.iter().map(|(id, _)| *id).collect(),
        };
        let keep: HashSet<RelationId> = keep.into_iter().take(MAX_PROMPT_CANDIDATES).collect();
        let mut q = query.clone();
        q.candidates.retain(|(id, _)| keep.contains(id));
        Ok(q)
    }

    fn ask(&self, prompt: &str) -> Result<(String, Option<(u64, u64)>)> {
        let body = json!({
            "model": self.model,
            "messages": [{ "role": "user", "content": prompt }],
            "temperature": 0,
        });
        let resp = self
            .client
            .post_json("chat/completions", &body)
            .map_err(|e| Error::Planner(e.to_string()))?;
        let content = resp
            .pointer("/choices/0/message/content")
            .and_then(|c| c.as_str())
            .ok_or_else(|| Error::Planner("response has no choices[0].message.content".into()))?
            .to_owned();
        let usage = match (
            resp.pointer("/usage/prompt_tokens").and_then(|v| v.as_u64()),
            resp.pointer("/usage/completion_tokens").and_then(|v| v.as_u64()),
        ) {
            (Some(p), Some(c)) => Some((p, c)),
            _ => None,
        };
        Ok((content, usage))
    }

    pub fn select(&self, query: &PlannerQuery, usage: &UsageCounter) -> Result<PlannerChoice> {
        let bounded = self.bounded_query(query)?;
        let prompt = build_prompt(&bounded);
        let outcome = self.ask(&prompt).and_then(|(content, reported)| {
            let (p, c) = reported.unwrap_or_else(|| (estimate_tokens(&prompt), estimate_tokens(&content)));
            usage.record(p, c);
            parse_response(&content, &bounded)
        });
        match outcome {
            Ok(ids) => Ok(finalize(query, ids, PlannerSource::Llm)),
            Err(err) => {
                let Some(sim) = &self.fallback else {
                    return Err(err);
                };
                log::warn!("llm planner failed ({err}); using similarity fallback");
                Ok(finalize(query, sim.rank(query)?, PlannerSource::Fallback))
            }
        }
    }
}

#[derive(Debug)]
pub enum Planner {
    Llm(LlmPlanner),
    Similarity(SimilarityPlanner),
    Mock(OraclePlanner),
}

impl Planner {
    /// One planner consultation; always records exactly one call in `usage`.
    pub fn select_relations(&self, query: &PlannerQuery, usage: &UsageCounter) -> Result<PlannerChoice> {
        query.validate()?;
        match self {
            Planner::Llm(p) => {
                let before = usage.snapshot().llm_calls;
                let result = p.select(query, usage);
                if usage.snapshot().llm_calls == before {
                    // Transport or protocol failure before any reply arrived.
                    usage.record(0, 0);
                }
                result
            }
            Planner::Similarity(p) => {
                let choice = finalize(query, p.rank(query)?, PlannerSource::Similarity);
                record_offline(query, &choice, usage);
                Ok(choice)
            }
            Planner::Mock(p) => {
                let choice = finalize(query, p.rank(query), PlannerSource::Mock);
                record_offline(query, &choice, usage);
                Ok(choice)
            }
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Planner::Llm(_) => "llm",
            Planner::Similarity(_) => "sim",
            Planner::Mock(_) => "mock",
        }
    }
}

/// Offline planners account the tokens an LLM exchange would have cost.
fn record_offline(query: &PlannerQuery, choice: &PlannerChoice, usage: &UsageCounter) {
    let prompt = build_prompt(query);
    usage.record(
        estimate_tokens(&prompt),
        estimate_tokens(&render_choice(query, &choice.ranked)),
    );
}

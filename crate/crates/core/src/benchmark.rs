//! Synthetic multi-hop question-answering world.
//!
//! Each chain is a sequence of relation edges from a source entity to an
//! answer. Every entity on a chain except the answer carries extra outgoing
//! distractor edges into decoy entities; each decoy continues along a single
//! edge so that a wrong turn still yields a full-length (but wrong) path.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{write_jsonl, DatasetError, TaskRecord};
use crate::retrieval::RawKnowledgeItem;
use crate::seed;

const RELATION_POOL: usize = 24;

#[derive(Debug, Error)]
pub enum BenchmarkError {
    #[error("knowledge text `{0}` is not a `<source> <relation> <target>` triple")]
    NotATriple(String),
    #[error("chain from `{start}` is not traversable along its relations")]
    BrokenChain { start: String },
    #[error("invalid hop range: {0}")]
    InvalidHops(String),
    #[error(transparent)]
    Io(#[from] DatasetError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Edge {
    pub source: String,
    pub relation: String,
    pub target: String,
}

impl Edge {
    pub fn text(&self) -> String {
        format!("{} {} {}", self.source, self.relation, self.target)
    }
}

/// A gold path: question source, relations to follow, answer entity.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chain {
    pub source: String,
    pub relations: Vec<String>,
    pub answer: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticGraph {
    pub entities: Vec<String>,
    pub edges: Vec<Edge>,
    pub chains: Vec<Chain>,
    pub distractors_per_hop: usize,
}

impl SyntheticGraph {
    /// Rebuilds the edge set from knowledge texts. Chains are not recoverable
    /// from triples alone and are left empty.
    pub fn from_triples<'a>(texts: impl IntoIterator<Item = &'a str>) -> Result<Self, BenchmarkError> {
        let mut entities = Vec::new();
        let mut seen = HashSet::new();
        let mut edges = Vec::new();
        for text in texts {
            let parts: Vec<&str> = text.split_whitespace().collect();
            let [s, r, t] = parts.as_slice() else {
                return Err(BenchmarkError::NotATriple(text.to_string()));
            };
            for e in [s, t] {
                if seen.insert(e.to_string()) {
                    entities.push(e.to_string());
                }
            }
            edges.push(Edge {
                source: s.to_string(),
                relation: r.to_string(),
                target: t.to_string(),
            });
        }
        Ok(Self {
            entities,
            edges,
            chains: Vec::new(),
            distractors_per_hop: 0,
        })
    }

    /// Outgoing edge indices per entity, in insertion order.
    pub fn outgoing(&self) -> HashMap<&str, Vec<usize>> {
        let mut map: HashMap<&str, Vec<usize>> = HashMap::new();
        for (i, e) in self.edges.iter().enumerate() {
            map.entry(e.source.as_str()).or_default().push(i);
        }
        map
    }

    /// Follows the named relations from `source`; `None` when any hop is
    /// missing or ambiguous.
    pub fn follow(&self, source: &str, relations: &[String]) -> Option<String> {
        let out = self.outgoing();
        let mut cur = source.to_string();
        for rel in relations {
            let mut next = out
                .get(cur.as_str())?
                .iter()
                .map(|&i| &self.edges[i])
                .filter(|e| &e.relation == rel);
            let hit = next.next()?;
            if next.next().is_some() {
                return None;
            }
            cur = hit.target.clone();
        }
        Some(cur)
    }

    pub fn validate(&self) -> Result<(), BenchmarkError> {
        for c in &self.chains {
            if self.follow(&c.source, &c.relations).as_deref() != Some(c.answer.as_str()) {
                return Err(BenchmarkError::BrokenChain {
                    start: c.source.clone(),
                });
            }
        }
        Ok(())
    }
}

pub fn question_text(source: &str, relations: &[String]) -> String {
    format!(
        "Which entity is reached from {source} by following {}?",
        relations.join(" then ")
    )
}

/// Inverse of [`question_text`].
pub fn parse_question(text: &str) -> Option<(String, Vec<String>)> {
    let rest = text.trim().strip_prefix("Which entity is reached from ")?;
    let (source, rest) = rest.split_once(" by following ")?;
    let rest = rest.trim_end().strip_suffix('?')?;
    let relations: Vec<String> = rest.split(" then ").map(|r| r.trim().to_string()).collect();
    if source.trim().is_empty() || relations.iter().any(String::is_empty) {
        return None;
    }
    Some((source.trim().to_string(), relations))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HopRange {
    pub min: usize,
    pub max: usize,
}

impl HopRange {
    pub fn new(min: usize, max: usize) -> Result<Self, BenchmarkError> {
        if min == 0 || max < min {
            return Err(BenchmarkError::InvalidHops(format!("{min}-{max}")));
        }
        if max >= RELATION_POOL {
            return Err(BenchmarkError::InvalidHops(format!("at most {} hops", RELATION_POOL - 1)));
        }
        Ok(Self { min, max })
    }

    pub fn exactly(hops: usize) -> Result<Self, BenchmarkError> {
        Self::new(hops, hops)
    }
}

impl fmt::Display for HopRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.min == self.max {
            write!(f, "{}", self.min)
        } else {
            write!(f, "{}-{}", self.min, self.max)
        }
    }
}

impl std::str::FromStr for HopRange {
    type Err = BenchmarkError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || BenchmarkError::InvalidHops(s.to_string());
        match s.split_once('-') {
            Some((a, b)) => Self::new(a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?),
            None => Self::exactly(s.trim().parse().map_err(|_| bad())?),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Benchmark {
    pub graph: SyntheticGraph,
    pub tasks: Vec<TaskRecord>,
    pub kb: Vec<RawKnowledgeItem>,
}

impl Benchmark {
    pub const KB_FILE: &'static str = "kb.jsonl";
    pub const TASKS_FILE: &'static str = "tasks.jsonl";

    pub fn write_to(&self, dir: &Path) -> Result<(), BenchmarkError> {
        std::fs::create_dir_all(dir).map_err(DatasetError::from)?;
        write_jsonl(&dir.join(Self::KB_FILE), &self.kb)?;
        write_jsonl(&dir.join(Self::TASKS_FILE), &self.tasks)?;
        Ok(())
    }
}

struct Names<'r, R: Rng> {
    rng: &'r mut R,
    used: HashSet<u32>,
}

impl<R: Rng> Names<'_, R> {
    fn entity(&mut self) -> String {
        loop {
            let id = self.rng.random_range(0..1_000_000u32);
            if self.used.insert(id) {
                return format!("ent{id:06}");
            }
        }
    }
}

/// Builds a deterministic benchmark world.
pub fn generate_benchmark(
    n_chains: usize,
    hops: HopRange,
    distractors_per_hop: usize,
    root_seed: u64,
) -> Benchmark {
    let mut rng = seed::rng(seed::derive(root_seed, "benchmark", 0));
    let relations: Vec<String> = (0..RELATION_POOL).map(|i| format!("rel{i:02}")).collect();
    let mut names = Names {
        rng: &mut seed::rng(seed::derive(root_seed, "entity-names", 0)),
        used: HashSet::new(),
    };

    let mut entities = Vec::new();
    let mut edges = Vec::new();
    let mut chains = Vec::new();

    for _ in 0..n_chains {
        let h = rng.random_range(hops.min..=hops.max);
        let path: Vec<String> = (0..=h).map(|_| names.entity()).collect();
        entities.extend(path.iter().cloned());
        let chain_rels: Vec<String> = relations.choose_multiple(&mut rng, h).cloned().collect();
        let off_chain: Vec<&String> = relations.iter().filter(|r| !chain_rels.contains(r)).collect();

        for i in 0..h {
            let mut siblings = vec![Edge {
                source: path[i].clone(),
                relation: chain_rels[i].clone(),
                target: path[i + 1].clone(),
            }];
            let mut continuations = Vec::new();
            for _ in 0..distractors_per_hop {
                let decoy = names.entity();
                entities.push(decoy.clone());
                siblings.push(Edge {
                    source: path[i].clone(),
                    relation: (*off_chain.choose(&mut rng).expect("pool larger than hops")).clone(),
                    target: decoy.clone(),
                });
                let mut cur = decoy;
                for _ in i + 1..h {
                    let next = names.entity();
                    entities.push(next.clone());
                    continuations.push(Edge {
                        source: cur,
                        relation: (*off_chain.choose(&mut rng).expect("pool larger than hops")).clone(),
                        target: next.clone(),
                    });
                    cur = next;
                }
            }
            siblings.shuffle(&mut rng);
            edges.extend(siblings);
            edges.extend(continuations);
        }
        chains.push(Chain {
            source: path[0].clone(),
            relations: chain_rels,
            answer: path[h].clone(),
        });
    }

    let tasks = chains
        .iter()
        .enumerate()
        .map(|(i, c)| TaskRecord {
            id: format!("q{i:05}"),
            question: question_text(&c.source, &c.relations),
            answer: Some(c.answer.clone()),
            context: None,
        })
        .collect();
    let kb = edges
        .iter()
        .enumerate()
        .map(|(i, e)| RawKnowledgeItem {
            id: format!("kb{i:06}"),
            text: e.text(),
            embedding: None,
        })
        .collect();

    Benchmark {
        graph: SyntheticGraph {
            entities,
            edges,
            chains,
            distractors_per_hop,
        },
        tasks,
        kb,
    }
}

use std::collections::HashMap;
use std::time::Instant;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{
    prompt_field, prompt_section, Backend, BackendError, BackendRequest, BackendResponse, Role,
    ViewpointDistribution,
};
use crate::benchmark::{parse_question, SyntheticGraph};
use crate::math::{cosine, softmax_with_temperature, EmbeddingVector};
use crate::seed;

const MAX_ENUMERATED_PATHS: usize = 1 << 16;

/// Lowercased whitespace tokens with surrounding ASCII punctuation removed.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|t| t.trim_matches(|c: char| c.is_ascii_punctuation()).to_lowercase())
        .filter(|t| !t.is_empty())
        .collect()
}

/// Bag-of-tokens hash embedder.
///
/// Each token hashes to a seeded Gaussian direction. With `anisotropy > 0`
/// coordinate 0 is reserved as a shared offset added to every token, which
/// lifts the baseline similarity of unrelated texts the way trained sentence
/// encoders do.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticEmbedder {
    dim: usize,
    seed: u64,
    anisotropy: f64,
}

impl SyntheticEmbedder {
    pub fn new(dim: usize, seed: u64, anisotropy: f64) -> Self {
        assert!(dim >= 2, "synthetic embeddings need at least two dimensions");
        Self { dim, seed, anisotropy }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn token_vector(&self, token: &str) -> Vec<f64> {
        let mut rng = seed::rng(seed::derive(self.seed, "token", seed::fnv1a(token.as_bytes())));
        let mut v: Vec<f64> = (0..self.dim).map(|_| rng.sample(StandardNormal)).collect();
        if self.anisotropy > 0.0 {
            v[0] = 0.0;
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= n);
        if self.anisotropy > 0.0 {
            v[0] = self.anisotropy;
            let n = (1.0 + self.anisotropy * self.anisotropy).sqrt();
            v.iter_mut().for_each(|x| *x /= n);
        }
        v
    }

    pub fn embed(&self, text: &str) -> Result<EmbeddingVector, BackendError> {
        let tokens = tokenize(text);
        if tokens.is_empty() {
            return Err(BackendError::EmptyText);
        }
        let mut acc = vec![0.0; self.dim];
        for t in &tokens {
            for (a, x) in acc.iter_mut().zip(self.token_vector(t)) {
                *a += x;
            }
        }
        // distinct random directions can cancel only with probability zero
        EmbeddingVector::normalized(acc).map_err(|_| BackendError::EmptyText)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticBackendConfig {
    pub dim: usize,
    /// Inverse temperature of the hop-selection softmax.
    pub temperature: f64,
    pub anisotropy: f64,
    pub embed_seed: u64,
    /// Raw-coherence penalty per pair of mutually exclusive statements.
    pub contradiction_penalty: f64,
}

impl Default for SyntheticBackendConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            temperature: 25.0,
            anisotropy: 0.45,
            embed_seed: 0x5eed,
            contradiction_penalty: 1.0,
        }
    }
}

/// Deterministic stand-in for every LLM role, backed by a relation graph.
///
/// Generation walks the graph hop by hop, choosing among outgoing edges by a
/// softmax over `cos(ω ⊙ Emb(Q), Emb(relation))` of the outgoing edges. Each step is written down using
/// the relation the question asked for, so a wrong turn produces a statement
/// that the knowledge base does not contain.
pub struct SyntheticBackend {
    config: SyntheticBackendConfig,
    embedder: SyntheticEmbedder,
    graph: SyntheticGraph,
    outgoing: HashMap<String, Vec<usize>>,
    edge_embeddings: Vec<EmbeddingVector>,
}

impl SyntheticBackend {
    pub fn new(graph: SyntheticGraph, config: SyntheticBackendConfig) -> Result<Self, BackendError> {
        let embedder = SyntheticEmbedder::new(config.dim, config.embed_seed, config.anisotropy);
        let edge_embeddings = graph
            .edges
            .iter()
            .map(|e| embedder.embed(&e.relation))
            .collect::<Result<_, _>>()?;
        let outgoing = graph
            .outgoing()
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect();
        Ok(Self {
            config,
            embedder,
            graph,
            outgoing,
            edge_embeddings,
        })
    }

    pub fn embedder(&self) -> &SyntheticEmbedder {
        &self.embedder
    }

    pub fn graph(&self) -> &SyntheticGraph {
        &self.graph
    }

    fn hop_distribution(&self, entity: &str, modulation: &[f64]) -> Result<(&[usize], Vec<f64>), BackendError> {
        let edges = self
            .outgoing
            .get(entity)
            .ok_or_else(|| BackendError::DisconnectedGraph(entity.to_string()))?;
        let sims: Vec<f64> = edges
            .iter()
            .map(|&i| cosine(modulation, self.edge_embeddings[i].values()))
            .collect();
        Ok((edges, softmax_with_temperature(&sims, self.config.temperature)))
    }

    fn check_modulation(&self, modulation: &[f64]) -> Result<(), BackendError> {
        if modulation.len() != self.config.dim {
            return Err(BackendError::InvalidRequest(format!(
                "modulation has {} entries, embedder has {}",
                modulation.len(),
                self.config.dim
            )));
        }
        Ok(())
    }

    /// One seeded walk. Returns the viewpoint text and its answer entity.
    pub fn generate_viewpoint(
        &self,
        source: &str,
        relations: &[String],
        modulation: &[f64],
        seed: u64,
    ) -> Result<(String, String), BackendError> {
        self.check_modulation(modulation)?;
        let mut rng = seed::rng(seed);
        let mut cur = source.to_string();
        let mut claims = Vec::with_capacity(relations.len());
        for rel in relations {
            let (edges, probs) = self.hop_distribution(&cur, modulation)?;
            let u: f64 = rng.random();
            let mut pick = edges.len() - 1;
            let mut acc = 0.0;
            for (j, p) in probs.iter().enumerate() {
                acc += p;
                if u < acc {
                    pick = j;
                    break;
                }
            }
            let target = &self.graph.edges[edges[pick]].target;
            claims.push(format!("{cur} {rel} {target}"));
            cur = target.clone();
        }
        Ok((viewpoint_text(&claims, &cur), cur))
    }

    fn question_of(prompt: &str) -> Result<(String, Vec<String>), BackendError> {
        let q = prompt_field(prompt, "Question:")
            .ok_or_else(|| BackendError::InvalidRequest("prompt has no `Question:` line".into()))?;
        parse_question(q).ok_or_else(|| BackendError::InvalidRequest(format!("unrecognized question `{q}`")))
    }

    /// Mean pairwise sentence cosine minus a penalty per contradicting pair.
    pub fn judge_coherence(&self, sentences: &[&str]) -> Result<f64, BackendError> {
        coherence_raw(&self.embedder, sentences, self.config.contradiction_penalty)
    }
}

/// Integrates `### Viewpoint <k> | support <s>` blocks: the answer with the
/// largest summed support wins and every distinct statement is kept.
pub(crate) fn arbitrate_prompt(prompt: &str) -> Result<String, BackendError> {
    let blocks = viewpoint_blocks(prompt);
    if blocks.is_empty() {
        return Err(BackendError::InvalidRequest("arbitration prompt lists no viewpoints".into()));
    }
    let mut tally: Vec<(String, f64)> = Vec::new();
    let mut claims: Vec<&str> = Vec::new();
    for b in &blocks {
        match tally.iter_mut().find(|(a, _)| *a == b.answer) {
            Some((_, s)) => *s += b.support,
            None => tally.push((b.answer.clone(), b.support)),
        }
        for c in &b.claims {
            if !claims.contains(c) {
                claims.push(c);
            }
        }
    }
    // first-seen answer wins ties
    let mut winner = &tally[0];
    for t in &tally[1..] {
        if t.1 > winner.1 {
            winner = t;
        }
    }
    let claims: Vec<String> = claims.into_iter().map(str::to_string).collect();
    Ok(viewpoint_text(&claims, &winner.0))
}

pub(crate) fn coherence_raw(
    embedder: &SyntheticEmbedder,
    sentences: &[&str],
    penalty: f64,
) -> Result<f64, BackendError> {
    if sentences.is_empty() {
        return Ok(0.0);
    }
    let embs = sentences
        .iter()
        .map(|s| embedder.embed(s))
        .collect::<Result<Vec<_>, _>>()?;
    let mut total = 0.0;
    let mut pairs = 0usize;
    let mut contradictions = 0usize;
    for i in 0..embs.len() {
        for j in i + 1..embs.len() {
            total += cosine(embs[i].values(), embs[j].values());
            pairs += 1;
            if contradict(sentences[i], sentences[j]) {
                contradictions += 1;
            }
        }
    }
    let mean = if pairs == 0 { 1.0 } else { total / pairs as f64 };
    Ok(mean - penalty * contradictions as f64)
}

/// Statement lines of a conclusion section, without the answer marker.
pub(crate) fn conclusion_sentences(prompt: &str) -> Vec<&str> {
    prompt_section(prompt, "Conclusion")
        .into_iter()
        .filter(|l| !l.starts_with("Answer:"))
        .collect()
}

/// Viewpoint text: one statement per line, then `Answer: <answer>`.
pub(crate) fn viewpoint_text(claims: &[String], answer: &str) -> String {
    let mut s = String::new();
    for c in claims {
        s.push_str(c);
        s.push('\n');
    }
    s.push_str("Answer: ");
    s.push_str(answer);
    s
}

/// Two `<subject> <relation> <object>` statements that agree on subject and
/// relation but name different objects.
fn contradict(a: &str, b: &str) -> bool {
    let ta = tokenize(a);
    let tb = tokenize(b);
    ta.len() == 3 && tb.len() == 3 && ta[0] == tb[0] && ta[1] == tb[1] && ta[2] != tb[2]
}

struct Block<'a> {
    support: f64,
    claims: Vec<&'a str>,
    answer: String,
}

/// Parses `### Viewpoint <k> | support <s>` blocks rendered by the arbitration agent.
fn viewpoint_blocks(prompt: &str) -> Vec<Block<'_>> {
    let mut blocks: Vec<Block> = Vec::new();
    let mut open = false;
    for line in prompt.lines().map(str::trim) {
        if let Some(head) = line.strip_prefix("### Viewpoint") {
            let support = head
                .split_once("support")
                .and_then(|(_, s)| s.trim().parse::<f64>().ok())
                .unwrap_or(1.0);
            blocks.push(Block {
                support,
                claims: Vec::new(),
                answer: String::new(),
            });
            open = true;
            continue;
        }
        if line.starts_with("###") {
            open = false;
            continue;
        }
        if !open || line.is_empty() || line.starts_with('>') {
            continue;
        }
        let b = blocks.last_mut().expect("open implies a block");
        match line.strip_prefix("Answer:") {
            Some(a) => b.answer = a.trim().to_string(),
            None => b.claims.push(line),
        }
    }
    blocks.retain(|b| !b.answer.is_empty());
    blocks
}

impl Backend for SyntheticBackend {
    fn complete(&self, request: &BackendRequest) -> Result<BackendResponse, BackendError> {
        let start = Instant::now();
        let (text, scalar) = match request.role() {
            Role::ViewpointGeneration => {
                let modulation = request
                    .modulation()
                    .ok_or_else(|| BackendError::InvalidRequest("generation needs a modulation vector".into()))?;
                let (source, relations) = Self::question_of(request.prompt_text())?;
                let (text, _) = self.generate_viewpoint(&source, &relations, modulation, request.seed())?;
                (text, None)
            }
            Role::Arbitration => (arbitrate_prompt(request.prompt_text())?, None),
            Role::CoherenceJudge => {
                let raw = self.judge_coherence(&conclusion_sentences(request.prompt_text()))?;
                (format!("{raw:.6}"), Some(raw))
            }
        };
        Ok(BackendResponse {
            text,
            scalar,
            latency: start.elapsed().as_secs_f64(),
        })
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector, BackendError> {
        self.embedder.embed(text)
    }

    fn dim(&self) -> Result<usize, BackendError> {
        Ok(self.config.dim)
    }

    fn as_distribution(&self) -> Option<&dyn ViewpointDistribution> {
        Some(self)
    }
}

impl ViewpointDistribution for SyntheticBackend {
    fn viewpoint_distribution(
        &self,
        prompt_text: &str,
        modulation: &[f64],
    ) -> Result<Vec<(String, f64)>, BackendError> {
        self.check_modulation(modulation)?;
        let (source, relations) = Self::question_of(prompt_text)?;
        let mut out: Vec<(String, f64)> = Vec::new();
        let mut index: HashMap<String, usize> = HashMap::new();
        let mut stack: Vec<(String, Vec<String>, f64)> = vec![(source, Vec::new(), 1.0)];
        while let Some((cur, claims, p)) = stack.pop() {
            let hop = claims.len();
            if hop == relations.len() {
                let text = viewpoint_text(&claims, &cur);
                match index.get(&text) {
                    Some(&i) => out[i].1 += p,
                    None => {
                        index.insert(text.clone(), out.len());
                        out.push((text, p));
                    }
                }
                if out.len() > MAX_ENUMERATED_PATHS {
                    return Err(BackendError::InvalidRequest("viewpoint distribution too large to enumerate".into()));
                }
                continue;
            }
            let (edges, probs) = self.hop_distribution(&cur, modulation)?;
            // reversed so the first edge is expanded first
            for (&e, q) in edges.iter().zip(&probs).rev() {
                if *q == 0.0 {
                    continue;
                }
                let target = self.graph.edges[e].target.clone();
                let mut next = claims.clone();
                next.push(format!("{cur} {} {target}", relations[hop]));
                stack.push((target, next, p * q));
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::benchmark::{generate_benchmark, question_text, Chain, Edge, HopRange};

    fn edge(s: &str, r: &str, t: &str) -> Edge {
        Edge {
            source: s.into(),
            relation: r.into(),
            target: t.into(),
        }
    }

    fn graph(edges: Vec<Edge>) -> SyntheticGraph {
        SyntheticGraph {
            entities: Vec::new(),
            edges,
            chains: Vec::<Chain>::new(),
            distractors_per_hop: 0,
        }
    }

    #[test]
    fn tokenizer_strips_punctuation_and_case() {
        assert_eq!(tokenize("Hello, World!  ent01?"), vec!["hello", "world", "ent01"]);
        assert!(tokenize(" ... ").is_empty());
    }

    #[test]
    fn embedder_contract() {
        let e = SyntheticEmbedder::new(64, 1, 0.45);
        let a = e.embed("alpha").unwrap();
        assert_eq!(a, e.embed("alpha").unwrap());
        assert!((a.norm() - 1.0).abs() < 1e-9);
        let ab = e.embed("alpha beta").unwrap();
        let gd = e.embed("gamma delta").unwrap();
        assert!(cosine(ab.values(), a.values()) > cosine(gd.values(), a.values()));
        let ba = e.embed("beta alpha").unwrap();
        assert!((cosine(ab.values(), ba.values()) - 1.0).abs() < 1e-9);
        assert_eq!(e.embed("  "), Err(BackendError::EmptyText));
    }

    #[test]
    fn isotropic_embedder_has_no_offset_axis() {
        let e = SyntheticEmbedder::new(16, 1, 0.0);
        let v = e.token_vector("x");
        assert!(v[0] != 0.0);
        assert!((v.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn single_path_is_always_taken() {
        let b = SyntheticBackend::new(graph(vec![edge("a", "r", "b")]), Default::default()).unwrap();
        let m = vec![0.3; 64];
        for s in 0..50 {
            let (text, answer) = b.generate_viewpoint("a", &["r".into()], &m, s).unwrap();
            assert_eq!(answer, "b");
            assert_eq!(text, "a r b\nAnswer: b");
        }
    }

    #[test]
    fn dead_end_is_disconnected() {
        let b = SyntheticBackend::new(graph(vec![edge("a", "r", "b")]), Default::default()).unwrap();
        let err = b
            .generate_viewpoint("a", &["r".into(), "s".into()], &vec![1.0; 64], 0)
            .unwrap_err();
        assert_eq!(err, BackendError::DisconnectedGraph("b".into()));
    }

    #[test]
    fn generation_is_deterministic() {
        let bench = generate_benchmark(5, HopRange::exactly(3).unwrap(), 3, 2);
        let b = SyntheticBackend::new(bench.graph.clone(), Default::default()).unwrap();
        let c = &bench.graph.chains[0];
        let m: Vec<f64> = (0..64).map(|i| (i as f64 * 0.37).sin()).collect();
        let x = b.generate_viewpoint(&c.source, &c.relations, &m, 11).unwrap();
        assert_eq!(x, b.generate_viewpoint(&c.source, &c.relations, &m, 11).unwrap());
    }

    #[test]
    fn distribution_sums_to_one_and_matches_sampling() {
        let bench = generate_benchmark(3, HopRange::exactly(2).unwrap(), 3, 5);
        let b = SyntheticBackend::new(bench.graph.clone(), Default::default()).unwrap();
        let c = &bench.graph.chains[1];
        let q = b.embed(&question_text(&c.source, &c.relations)).unwrap();
        let m = q.values().to_vec();
        let prompt = format!("Question: {}", question_text(&c.source, &c.relations));
        let dist = b.viewpoint_distribution(&prompt, &m).unwrap();
        assert_eq!(dist.len(), 1 + 3 * 2);
        assert!((dist.iter().map(|d| d.1).sum::<f64>() - 1.0).abs() < 1e-12);
        let n = 4000;
        let mut hits: HashMap<String, usize> = HashMap::new();
        for s in 0..n {
            let (t, _) = b.generate_viewpoint(&c.source, &c.relations, &m, s).unwrap();
            *hits.entry(t).or_default() += 1;
        }
        for (text, p) in &dist {
            let f = *hits.get(text).unwrap_or(&0) as f64 / n as f64;
            assert!((f - p).abs() < 0.03, "{text}: {f} vs {p}");
        }
    }

    #[test]
    fn judge_penalizes_contradictions() {
        let b = SyntheticBackend::new(graph(vec![edge("a", "r", "b")]), Default::default()).unwrap();
        let agree = b.judge_coherence(&["a r b", "a r b"]).unwrap();
        let clash = b.judge_coherence(&["a r b", "a r c"]).unwrap();
        assert!(agree > clash);
        assert_eq!(b.judge_coherence(&["a r b"]).unwrap(), 1.0);
    }

    #[test]
    fn arbitration_weights_support() {
        let prompt = "Question: q\n### Viewpoint 1 | support 0.2\na r x\nAnswer: x\n> a r b\n\
                      ### Viewpoint 2 | support 0.9\na r b\nAnswer: b\n### Viewpoint 3 | support 0.3\na r x\nAnswer: x\n### End";
        let text = arbitrate_prompt(prompt).unwrap();
        assert_eq!(text, "a r x\na r b\nAnswer: b");
        assert!(arbitrate_prompt("Question: q").is_err());
    }
}

//! Filtered ranking evaluation over head and tail queries.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{io_err, CoreError, Result};
use crate::kg::{
    candidate_entities, centre_rng, sample_neighbourhood, Adjacency, EntityId, KnowledgeGraph, Phase, RelationId, Regime,
    SplitGraphs, SubgraphSample, Triple,
};
use crate::model::{Centre, EncodePlan, Model};
use crate::scoring::{anchor, anchor_score, Side};

/// A candidate embedding computed on the visible graph with `exclude`
/// removed from every subgraph.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CandidateRequest {
    pub entity: EntityId,
    pub exclude: Option<Triple>,
}

/// A query anchor for `side` of `triple`; the triple itself is always
/// hidden from the query's subgraph.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QueryRequest {
    pub triple: Triple,
    pub side: Side,
}

/// Anything that can embed candidates and query anchors for ranking.
pub trait EmbeddingModel {
    fn embed_candidates(&self, requests: &[CandidateRequest]) -> Result<Vec<Vec<f64>>>;

    /// `q + r` for tail queries and `q − r` for head queries.
    fn embed_queries(&self, requests: &[QueryRequest]) -> Result<Vec<Vec<f64>>>;
}

/// Index of every known triple, for the filtered setting.
#[derive(Debug, Clone, Default)]
pub struct FilterIndex {
    tails: HashMap<(EntityId, RelationId), BTreeSet<EntityId>>,
    heads: HashMap<(RelationId, EntityId), BTreeSet<EntityId>>,
}

impl FilterIndex {
    pub fn new(triples: &[Triple]) -> Self {
        let mut idx = FilterIndex::default();
        for t in triples {
            idx.tails.entry((t.head, t.rel)).or_default().insert(t.tail);
            idx.heads.entry((t.rel, t.tail)).or_default().insert(t.head);
        }
        idx
    }

    /// Entities that also complete the query for `side` of `t`, target excluded.
    pub fn filter(&self, t: &Triple, side: Side) -> BTreeSet<EntityId> {
        let set = match side {
            Side::Tail => self.tails.get(&(t.head, t.rel)),
            Side::Head => self.heads.get(&(t.rel, t.tail)),
        };
        let target = side.target(t);
        set.map(|s| s.iter().copied().filter(|&e| e != target).collect()).unwrap_or_default()
    }
}

pub fn build_filter_sets(all_triples: &[Triple], query: &Triple, side: Side) -> BTreeSet<EntityId> {
    FilterIndex::new(all_triples).filter(query, side)
}

/// Rank of the target under both tie rules.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rank {
    /// Ties are resolved in favour of the target.
    pub optimistic: usize,
    /// Ties count against the target.
    pub pessimistic: usize,
}

pub fn rank_target(scores: &[(EntityId, f64)], target: EntityId, filter: &BTreeSet<EntityId>) -> Result<Rank> {
    let s_t = scores
        .iter()
        .find(|(e, _)| *e == target)
        .map(|&(_, s)| s)
        .ok_or_else(|| CoreError::Invalid(format!("target {target} is not among the candidates")))?;
    let mut above = 0;
    let mut tied = 0;
    for &(e, s) in scores {
        if e == target || filter.contains(&e) {
            continue;
        }
        if s > s_t {
            above += 1;
        } else if s == s_t {
            tied += 1;
        }
    }
    Ok(Rank { optimistic: 1 + above, pessimistic: 1 + above + tied })
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Metrics {
    pub mrr: f64,
    pub h1: f64,
    pub h3: f64,
    pub h10: f64,
}

impl Metrics {
    pub fn from_ranks(ranks: &[usize]) -> Self {
        if ranks.is_empty() {
            return Metrics::default();
        }
        let n = ranks.len() as f64;
        let hits = |k: usize| ranks.iter().filter(|&&r| r <= k).count() as f64 / n;
        Metrics {
            mrr: ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / n,
            h1: hits(1),
            h3: hits(3),
            h10: hits(10),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SideMetrics {
    pub head: Metrics,
    pub tail: Metrics,
    /// Averaged over both query directions.
    pub mean: Metrics,
}

impl SideMetrics {
    fn from_queries(queries: &[QueryRank], pick: impl Fn(&QueryRank) -> usize) -> Self {
        let ranks = |side: Option<Side>| -> Vec<usize> {
            queries.iter().filter(|q| side.is_none_or(|s| q.side == s)).map(&pick).collect()
        };
        SideMetrics {
            head: Metrics::from_ranks(&ranks(Some(Side::Head))),
            tail: Metrics::from_ranks(&ranks(Some(Side::Tail))),
            mean: Metrics::from_ranks(&ranks(None)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryRank {
    pub query_id: usize,
    pub triple: Triple,
    pub side: Side,
    pub rank: usize,
    pub pessimistic_rank: usize,
    /// Optimistic rank without filtering.
    pub raw_rank: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingReport {
    pub phase: Phase,
    pub regime: Regime,
    pub queries: usize,
    pub candidates: usize,
    pub capped: bool,
    /// Filtered metrics under the optimistic tie rule (the headline numbers).
    pub optimistic: SideMetrics,
    pub pessimistic: SideMetrics,
    /// Unfiltered metrics.
    pub raw: SideMetrics,
    #[serde(skip)]
    pub ranks: Vec<QueryRank>,
}

impl RankingReport {
    pub fn from_ranks(phase: Phase, regime: Regime, candidates: usize, capped: bool, ranks: Vec<QueryRank>) -> Self {
        RankingReport {
            phase,
            regime,
            queries: ranks.len(),
            candidates,
            capped,
            optimistic: SideMetrics::from_queries(&ranks, |q| q.rank),
            pessimistic: SideMetrics::from_queries(&ranks, |q| q.pessimistic_rank),
            raw: SideMetrics::from_queries(&ranks, |q| q.raw_rank),
            ranks,
        }
    }

    pub fn mrr(&self) -> f64 {
        self.optimistic.mean.mrr
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("query_id,head,relation,tail,side,rank,pessimistic_rank,raw_rank\n");
        for q in &self.ranks {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                q.query_id, q.triple.head, q.triple.rel, q.triple.tail, q.side, q.rank, q.pessimistic_rank, q.raw_rank
            );
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(io_err(path))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EvalOptions {
    pub phase: Phase,
    /// Rank against a seeded random subset of this many candidates (each
    /// query's target is always added).
    pub candidates_cap: Option<usize>,
    pub cap_seed: u64,
    /// Reuse candidate embeddings across queries. Turning this off
    /// re-encodes every candidate for every query.
    pub cached: bool,
}

impl EvalOptions {
    pub fn new(phase: Phase) -> Self {
        EvalOptions { phase, candidates_cap: None, cap_seed: 0, cached: true }
    }
}

/// Ranks every eval triple of `opts.phase` in both directions.
///
/// Each query and each candidate is embedded with the query's own triple
/// hidden. With caching on, candidates are embedded once on the visible
/// graph and only the triple's two endpoints are re-embedded per query,
/// which gives the same numbers because no other subgraph can contain it.
pub fn evaluate<M: EmbeddingModel + ?Sized>(model: &M, splits: &SplitGraphs, opts: &EvalOptions) -> Result<RankingReport> {
    let phase = opts.phase;
    let eval = splits.eval_triples(phase);
    let all = splits.all_triples();
    let filters = FilterIndex::new(&all);

    let full = candidate_entities(splits, phase);
    let (candidates, capped) = match opts.candidates_cap {
        Some(cap) if cap < full.len() => {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.cap_seed);
            let mut picked: Vec<EntityId> = index::sample(&mut rng, full.len(), cap).into_iter().map(|i| full[i]).collect();
            picked.sort_unstable();
            (picked, true)
        }
        _ => (full, false),
    };
    let cand_pos: HashMap<EntityId, usize> = candidates.iter().enumerate().map(|(i, &e)| (e, i)).collect();

    let queries: Vec<QueryRequest> =
        eval.iter().flat_map(|&triple| Side::BOTH.map(|side| QueryRequest { triple, side })).collect();
    let anchors = model.embed_queries(&queries)?;
    if anchors.len() != queries.len() {
        return Err(CoreError::Invalid("embedding model returned the wrong number of anchors".into()));
    }

    let base = if opts.cached {
        let reqs: Vec<CandidateRequest> = candidates.iter().map(|&entity| CandidateRequest { entity, exclude: None }).collect();
        model.embed_candidates(&reqs)?
    } else {
        Vec::new()
    };
    // Endpoints of each eval triple re-embedded without it (they may sit
    // outside a capped set), or every candidate re-embedded per triple.
    let mut per_triple: Vec<HashMap<EntityId, Vec<f64>>> = Vec::with_capacity(eval.len());
    {
        let mut reqs = Vec::new();
        let mut owners = Vec::new();
        for (i, t) in eval.iter().enumerate() {
            let ents: Vec<EntityId> = if opts.cached {
                let mut e = vec![t.head, t.tail];
                e.dedup();
                e
            } else {
                let mut e = candidates.clone();
                for x in [t.head, t.tail] {
                    if !cand_pos.contains_key(&x) {
                        e.push(x);
                    }
                }
                e
            };
            for entity in ents {
                reqs.push(CandidateRequest { entity, exclude: Some(*t) });
                owners.push(i);
            }
        }
        let embs = model.embed_candidates(&reqs)?;
        per_triple.resize_with(eval.len(), HashMap::new);
        for ((req, owner), emb) in reqs.iter().zip(owners).zip(embs) {
            per_triple[owner].insert(req.entity, emb);
        }
    }
    let mut ranks = Vec::with_capacity(queries.len());
    for (qid, (q, a)) in queries.iter().zip(&anchors).enumerate() {
        let i = qid / 2;
        let target = q.side.target(&q.triple);
        let local = &per_triple[i];
        let mut scores: Vec<(EntityId, f64)> = Vec::with_capacity(candidates.len() + 1);
        for (j, &c) in candidates.iter().enumerate() {
            let emb = match local.get(&c) {
                Some(e) => e,
                None => &base[j],
            };
            scores.push((c, anchor_score(a, emb)));
        }
        if !cand_pos.contains_key(&target) {
            let emb = local
                .get(&target)
                .ok_or_else(|| CoreError::Invalid(format!("target {target} has no embedding")))?;
            scores.push((target, anchor_score(a, emb)));
        }
        let filter = filters.filter(&q.triple, q.side);
        let r = rank_target(&scores, target, &filter)?;
        let raw = rank_target(&scores, target, &BTreeSet::new())?;
        ranks.push(QueryRank {
            query_id: qid,
            triple: q.triple,
            side: q.side,
            rank: r.optimistic,
            pessimistic_rank: r.pessimistic,
            raw_rank: raw.optimistic,
        });
    }
    Ok(RankingReport::from_ranks(phase, splits.regime, candidates.len(), capped, ranks))
}

/// Sampler stream for evaluation-time query subgraphs.
pub const EVAL_QUERY_STREAM: u64 = u64::MAX - 1;
/// Sampler stream for evaluation-time candidate subgraphs.
pub const EVAL_CANDIDATE_STREAM: u64 = u64::MAX;

/// [`EmbeddingModel`] backed by a trained [`Model`] over a fixed visible graph.
pub struct ModelEmbedder<'a> {
    model: &'a Model,
    kg: &'a KnowledgeGraph,
    adj: Adjacency,
    cap: usize,
    seed: u64,
    chunk: usize,
}

impl<'a> ModelEmbedder<'a> {
    pub fn new(model: &'a Model, kg: &'a KnowledgeGraph, visible: &[Triple], neighbour_cap: usize, seed: u64) -> Self {
        ModelEmbedder { model, kg, adj: Adjacency::from_triples(kg.num_entities(), visible), cap: neighbour_cap, seed, chunk: 256 }
    }

    pub fn for_phase(model: &'a Model, kg: &'a KnowledgeGraph, splits: &SplitGraphs, phase: Phase, neighbour_cap: usize, seed: u64) -> Self {
        Self::new(model, kg, &splits.visible_triples(phase), neighbour_cap, seed)
    }

    fn sample(&self, centre: EntityId, stream: u64, exclude: Option<&Triple>) -> Result<Option<SubgraphSample>> {
        if !self.model.spec.ablation.use_subgraphs {
            return Ok(None);
        }
        let ex: &[Triple] = exclude.map(std::slice::from_ref).unwrap_or(&[]);
        let mut rng = centre_rng(self.seed, stream, centre);
        Ok(Some(sample_neighbourhood(&self.adj, centre, self.cap, ex, &mut rng)?))
    }
}

impl EmbeddingModel for ModelEmbedder<'_> {
    fn embed_candidates(&self, requests: &[CandidateRequest]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(requests.len());
        for chunk in requests.chunks(self.chunk) {
            let mut plan = EncodePlan::default();
            for req in chunk {
                let row = plan.centre(self.model, self.kg, Centre::Candidate(req.entity));
                let sample = self.sample(req.entity, EVAL_CANDIDATE_STREAM, req.exclude.as_ref())?;
                plan.item(self.model, self.kg, row, sample.as_ref());
            }
            out.extend(self.model.run(&plan)?.items);
        }
        Ok(out)
    }

    fn embed_queries(&self, requests: &[QueryRequest]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(requests.len());
        for chunk in requests.chunks(self.chunk) {
            let mut plan = EncodePlan::default();
            let mut rel_rows = Vec::with_capacity(chunk.len());
            for req in chunk {
                let known = req.side.known(&req.triple);
                let row = plan.centre(self.model, self.kg, Centre::Query(known, req.triple.rel, req.side));
                let sample = self.sample(known, EVAL_QUERY_STREAM, Some(&req.triple))?;
                plan.item(self.model, self.kg, row, sample.as_ref());
                rel_rows.push(plan.relation(self.model, self.kg, req.triple.rel, false));
            }
            let v = self.model.run(&plan)?;
            for ((req, q), &r) in chunk.iter().zip(&v.items).zip(&rel_rows) {
                out.push(anchor(q, &v.rels[r], req.side));
            }
        }
        Ok(out)
    }
}

/// Evaluates `model` on `opts.phase` with the phase's visible graph.
pub fn evaluate_model(
    model: &Model,
    kg: &KnowledgeGraph,
    splits: &SplitGraphs,
    opts: &EvalOptions,
    neighbour_cap: usize,
    seed: u64,
) -> Result<RankingReport> {
    let embedder = ModelEmbedder::for_phase(model, kg, splits, opts.phase, neighbour_cap, seed);
    evaluate(&embedder, splits, opts)
}

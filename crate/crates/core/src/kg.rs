//! Knowledge-graph data model, dataset loading, neighbourhood sampling and
//! dataset statistics.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{io_err, CoreError, Result};

pub type EntityId = u32;
pub type RelationId = u32;

pub const TRAIN_FILE: &str = "train.tsv";
pub const VALID_FILE: &str = "valid.tsv";
pub const TEST_FILE: &str = "test.tsv";
pub const ENTITY_TEXT_FILE: &str = "entity2text.tsv";
pub const RELATION_TEXT_FILE: &str = "relation2text.tsv";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Triple {
    pub head: EntityId,
    pub rel: RelationId,
    pub tail: EntityId,
}

impl Triple {
    pub fn new(head: EntityId, rel: RelationId, tail: EntityId) -> Self {
        Triple { head, rel, tail }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Outgoing,
    Incoming,
}

/// One adjacency entry seen from a centre entity. Field order gives the
/// canonical sort order used everywhere neighbours are listed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Neighbour {
    pub entity: EntityId,
    pub rel: RelationId,
    pub direction: Direction,
}

impl Neighbour {
    /// The triple this entry was derived from, given its centre.
    pub fn triple(&self, centre: EntityId) -> Triple {
        match self.direction {
            Direction::Outgoing => Triple::new(centre, self.rel, self.entity),
            Direction::Incoming => Triple::new(self.entity, self.rel, centre),
        }
    }
}

/// Entity → neighbours index. Every triple is listed twice: outgoing at its
/// head and incoming at its tail. Lists are kept in canonical order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Adjacency {
    lists: Vec<Vec<Neighbour>>,
}

impl Adjacency {
    pub fn from_triples(num_entities: usize, triples: &[Triple]) -> Self {
        let mut lists = vec![Vec::new(); num_entities];
        for t in triples {
            lists[t.head as usize].push(Neighbour { entity: t.tail, rel: t.rel, direction: Direction::Outgoing });
            lists[t.tail as usize].push(Neighbour { entity: t.head, rel: t.rel, direction: Direction::Incoming });
        }
        for l in &mut lists {
            l.sort_unstable();
            l.dedup();
        }
        Adjacency { lists }
    }

    pub fn num_entities(&self) -> usize {
        self.lists.len()
    }

    pub fn neighbours(&self, e: EntityId) -> &[Neighbour] {
        self.lists.get(e as usize).map_or(&[], Vec::as_slice)
    }

    pub fn degree(&self, e: EntityId) -> usize {
        self.neighbours(e).len()
    }

    pub fn count(&self, direction: Direction) -> usize {
        self.lists.iter().flatten().filter(|n| n.direction == direction).count()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubgraphSample {
    pub centre: EntityId,
    pub neighbours: Vec<Neighbour>,
}

/// Capped 1-hop neighbourhood of `centre` with every triple in `exclude`
/// removed first. Above the cap a uniform subset is drawn without
/// replacement; the result is always in canonical order.
pub fn sample_neighbourhood<R: Rng + ?Sized>(
    adj: &Adjacency,
    centre: EntityId,
    cap: usize,
    exclude: &[Triple],
    rng: &mut R,
) -> Result<SubgraphSample> {
    if centre as usize >= adj.num_entities() {
        return Err(CoreError::UnknownEntity(format!("#{centre}")));
    }
    let kept: Vec<Neighbour> = adj
        .neighbours(centre)
        .iter()
        .filter(|n| !exclude.contains(&n.triple(centre)))
        .copied()
        .collect();
    let neighbours = if kept.len() <= cap {
        kept
    } else {
        let mut picks = index::sample(rng, kept.len(), cap).into_vec();
        picks.sort_unstable();
        picks.into_iter().map(|i| kept[i]).collect()
    };
    Ok(SubgraphSample { centre, neighbours })
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent sampler stream for one centre entity, so that a sample does
/// not depend on which other entities were sampled before it.
pub fn centre_rng(seed: u64, stream: u64, centre: EntityId) -> ChaCha8Rng {
    let s = splitmix(splitmix(splitmix(seed) ^ stream) ^ centre as u64);
    ChaCha8Rng::seed_from_u64(s)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    Dynamic,
    Transfer,
}

impl FromStr for Regime {
    type Err = CoreError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dynamic" => Ok(Regime::Dynamic),
            "transfer" => Ok(Regime::Transfer),
            _ => Err(CoreError::Invalid(format!("unknown regime `{s}` (expected dynamic or transfer)"))),
        }
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Regime::Dynamic => "dynamic",
            Regime::Transfer => "transfer",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Validation,
    Test,
}

impl FromStr for Phase {
    type Err = CoreError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "validation" | "valid" | "val" => Ok(Phase::Validation),
            "test" => Ok(Phase::Test),
            _ => Err(CoreError::Invalid(format!("unknown phase `{s}` (expected validation or test)"))),
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Validation => "validation",
            Phase::Test => "test",
        })
    }
}

/// Vocabularies, descriptions and the union of all split triples.
#[derive(Debug, Clone, PartialEq)]
pub struct KnowledgeGraph {
    entity_ids: Vec<String>,
    entity_text: Vec<String>,
    entity_index: HashMap<String, EntityId>,
    relation_ids: Vec<String>,
    relation_text: Vec<String>,
    relation_index: HashMap<String, RelationId>,
    triples: Vec<Triple>,
    adjacency: Adjacency,
}

impl KnowledgeGraph {
    /// Builds a graph from `(id, description)` pairs and triples over their indices.
    pub fn new(entities: Vec<(String, String)>, relations: Vec<(String, String)>, triples: &[Triple]) -> Result<Self> {
        let mut entity_index = HashMap::new();
        for (i, (id, _)) in entities.iter().enumerate() {
            if entity_index.insert(id.clone(), i as EntityId).is_some() {
                return Err(CoreError::Invalid(format!("duplicate entity id `{id}`")));
            }
        }
        let mut relation_index = HashMap::new();
        for (i, (id, _)) in relations.iter().enumerate() {
            if relation_index.insert(id.clone(), i as RelationId).is_some() {
                return Err(CoreError::Invalid(format!("duplicate relation id `{id}`")));
            }
        }
        for t in triples {
            if t.head as usize >= entities.len() || t.tail as usize >= entities.len() || t.rel as usize >= relations.len() {
                return Err(CoreError::Invalid(format!("triple {t:?} out of vocabulary range")));
            }
        }
        let mut all: Vec<Triple> = triples.to_vec();
        all.sort_unstable();
        all.dedup();
        let adjacency = Adjacency::from_triples(entities.len(), &all);
        let (entity_ids, entity_text) = entities.into_iter().unzip();
        let (relation_ids, relation_text) = relations.into_iter().unzip();
        Ok(KnowledgeGraph {
            entity_ids,
            entity_text,
            entity_index,
            relation_ids,
            relation_text,
            relation_index,
            triples: all,
            adjacency,
        })
    }

    pub fn num_entities(&self) -> usize {
        self.entity_ids.len()
    }

    pub fn num_relations(&self) -> usize {
        self.relation_ids.len()
    }

    pub fn entity_name(&self, e: EntityId) -> &str {
        &self.entity_ids[e as usize]
    }

    pub fn entity_text(&self, e: EntityId) -> &str {
        &self.entity_text[e as usize]
    }

    pub fn relation_name(&self, r: RelationId) -> &str {
        &self.relation_ids[r as usize]
    }

    pub fn relation_text(&self, r: RelationId) -> &str {
        &self.relation_text[r as usize]
    }

    pub fn entity(&self, name: &str) -> Option<EntityId> {
        self.entity_index.get(name).copied()
    }

    pub fn relation(&self, name: &str) -> Option<RelationId> {
        self.relation_index.get(name).copied()
    }

    /// Union of all split triples, sorted and deduplicated.
    pub fn triples(&self) -> &[Triple] {
        &self.triples
    }

    pub fn adjacency(&self) -> &Adjacency {
        &self.adjacency
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitGraphs {
    pub regime: Regime,
    pub train: Vec<Triple>,
    pub valid: Vec<Triple>,
    pub test: Vec<Triple>,
    pub train_entities: BTreeSet<EntityId>,
    pub valid_entities: BTreeSet<EntityId>,
    pub test_entities: BTreeSet<EntityId>,
}

fn entities_of(triples: &[Triple]) -> BTreeSet<EntityId> {
    triples.iter().flat_map(|t| [t.head, t.tail]).collect()
}

impl SplitGraphs {
    pub fn new(regime: Regime, train: Vec<Triple>, valid: Vec<Triple>, test: Vec<Triple>) -> Self {
        SplitGraphs {
            regime,
            train_entities: entities_of(&train),
            valid_entities: entities_of(&valid),
            test_entities: entities_of(&test),
            train,
            valid,
            test,
        }
    }

    pub fn eval_triples(&self, phase: Phase) -> &[Triple] {
        match phase {
            Phase::Validation => &self.valid,
            Phase::Test => &self.test,
        }
    }

    pub fn eval_entities(&self, phase: Phase) -> &BTreeSet<EntityId> {
        match phase {
            Phase::Validation => &self.valid_entities,
            Phase::Test => &self.test_entities,
        }
    }

    /// Triples visible while evaluating `phase`: the incrementally grown graph
    /// in the dynamic regime, the phase's own graph in the transfer regime.
    pub fn visible_triples(&self, phase: Phase) -> Vec<Triple> {
        let mut out = match (self.regime, phase) {
            (Regime::Transfer, p) => self.eval_triples(p).to_vec(),
            (Regime::Dynamic, Phase::Validation) => [&self.train[..], &self.valid[..]].concat(),
            (Regime::Dynamic, Phase::Test) => [&self.train[..], &self.valid[..], &self.test[..]].concat(),
        };
        out.sort_unstable();
        out.dedup();
        out
    }

    pub fn all_triples(&self) -> Vec<Triple> {
        let mut out = [&self.train[..], &self.valid[..], &self.test[..]].concat();
        out.sort_unstable();
        out.dedup();
        out
    }

    /// Violations of the transfer-regime disjointness requirement. Always
    /// empty in the dynamic regime.
    pub fn regime_violations(&self) -> Vec<String> {
        if self.regime != Regime::Transfer {
            return Vec::new();
        }
        let mut out = Vec::new();
        for (name, set) in [("validation", &self.valid_entities), ("test", &self.test_entities)] {
            let shared = set.intersection(&self.train_entities).count();
            if shared > 0 {
                out.push(format!("transfer regime: {shared} {name} entities also occur in train"));
            }
        }
        out
    }
}

/// Entities that may be ranked for queries of `phase`.
pub fn candidate_entities(splits: &SplitGraphs, phase: Phase) -> Vec<EntityId> {
    let eval = splits.eval_entities(phase);
    match splits.regime {
        Regime::Transfer => {
            let shared = eval.intersection(&splits.train_entities).count();
            if shared > 0 {
                log::warn!("transfer regime: {shared} {phase} entities also occur in train; using the {phase} set as-is");
            }
            eval.iter().copied().collect()
        }
        Regime::Dynamic => {
            let mut set: BTreeSet<EntityId> = splits.train_entities.clone();
            set.extend(eval);
            if phase == Phase::Test {
                set.extend(&splits.valid_entities);
            }
            set.into_iter().collect()
        }
    }
}

fn read_lines(path: &Path) -> Result<Vec<(usize, String)>> {
    let raw = fs::read_to_string(path).map_err(io_err(path))?;
    Ok(raw
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim_end_matches('\r').to_string()))
        .filter(|(_, l)| !l.is_empty())
        .collect())
}

fn read_descriptions(path: &Path) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (line, text) in read_lines(path)? {
        let Some((id, desc)) = text.split_once('\t') else {
            return Err(CoreError::Parse {
                path: path.to_path_buf(),
                line,
                message: "expected `id<TAB>description`".into(),
            });
        };
        if !seen.insert(id.to_string()) {
            return Err(CoreError::Parse { path: path.to_path_buf(), line, message: format!("duplicate id `{id}`") });
        }
        out.push((id.to_string(), desc.to_string()));
    }
    Ok(out)
}

fn read_triples(path: &Path, kg_index: &(HashMap<String, EntityId>, HashMap<String, RelationId>)) -> Result<Vec<Triple>> {
    let (ents, rels) = kg_index;
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    let mut dropped = 0usize;
    for (line, text) in read_lines(path)? {
        let fields: Vec<&str> = text.split('\t').collect();
        let parse_err = |message: String| CoreError::Parse { path: path.to_path_buf(), line, message };
        if fields.len() != 3 {
            return Err(parse_err(format!("expected 3 tab-separated fields, found {}", fields.len())));
        }
        let head = *ents.get(fields[0]).ok_or_else(|| parse_err(format!("entity `{}` has no description entry", fields[0])))?;
        let rel = *rels.get(fields[1]).ok_or_else(|| parse_err(format!("relation `{}` has no description entry", fields[1])))?;
        let tail = *ents.get(fields[2]).ok_or_else(|| parse_err(format!("entity `{}` has no description entry", fields[2])))?;
        let t = Triple::new(head, rel, tail);
        if seen.insert(t) {
            out.push(t);
        } else {
            dropped += 1;
        }
    }
    if dropped > 0 {
        log::warn!("{}: dropped {dropped} duplicate triples", path.display());
    }
    Ok(out)
}

/// Reads a dataset directory (see the README for the layout). Regime
/// violations are logged, not repaired.
pub fn load_dataset(dir: &Path, regime: Regime) -> Result<(KnowledgeGraph, SplitGraphs)> {
    if !dir.is_dir() {
        return Err(CoreError::Io {
            path: dir.to_path_buf(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "dataset directory not found"),
        });
    }
    let entities = read_descriptions(&dir.join(ENTITY_TEXT_FILE))?;
    let relations = read_descriptions(&dir.join(RELATION_TEXT_FILE))?;
    let index = (
        entities.iter().enumerate().map(|(i, (id, _))| (id.clone(), i as EntityId)).collect(),
        relations.iter().enumerate().map(|(i, (id, _))| (id.clone(), i as RelationId)).collect(),
    );
    let train = read_triples(&dir.join(TRAIN_FILE), &index)?;
    let valid = read_triples(&dir.join(VALID_FILE), &index)?;
    let test = read_triples(&dir.join(TEST_FILE), &index)?;
    let all: Vec<Triple> = [&train[..], &valid[..], &test[..]].concat();
    let kg = KnowledgeGraph::new(entities, relations, &all)?;
    let splits = SplitGraphs::new(regime, train, valid, test);
    for v in splits.regime_violations() {
        log::warn!("{v}");
    }
    Ok((kg, splits))
}

/// Writes `kg` and `splits` in the layout read by [`load_dataset`].
pub fn write_dataset(dir: &Path, kg: &KnowledgeGraph, splits: &SplitGraphs) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut ents = String::new();
    for e in 0..kg.num_entities() as EntityId {
        ents.push_str(&format!("{}\t{}\n", kg.entity_name(e), kg.entity_text(e)));
    }
    let mut rels = String::new();
    for r in 0..kg.num_relations() as RelationId {
        rels.push_str(&format!("{}\t{}\n", kg.relation_name(r), kg.relation_text(r)));
    }
    let write = |name: &str, body: String| -> Result<()> {
        let p = dir.join(name);
        fs::write(&p, body).map_err(io_err(p))
    };
    write(ENTITY_TEXT_FILE, ents)?;
    write(RELATION_TEXT_FILE, rels)?;
    for (name, ts) in [(TRAIN_FILE, &splits.train), (VALID_FILE, &splits.valid), (TEST_FILE, &splits.test)] {
        let body: String = ts
            .iter()
            .map(|t| format!("{}\t{}\t{}\n", kg.entity_name(t.head), kg.relation_name(t.rel), kg.entity_name(t.tail)))
            .collect();
        write(name, body)?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitStats {
    pub split: String,
    pub entities: usize,
    pub triples: usize,
    pub relations: usize,
    /// Mean and population standard deviation of the number of neighbours
    /// (incoming plus outgoing) per entity of the split.
    pub neighbours_mean: f64,
    pub neighbours_std: f64,
    /// Outgoing edges per entity, which equals `triples / entities`.
    pub out_degree_mean: f64,
    pub out_degree_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsReport {
    pub relations: usize,
    pub entities: usize,
    pub splits: Vec<SplitStats>,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn split_stats(name: &str, num_entities: usize, triples: &[Triple]) -> SplitStats {
    let adj = Adjacency::from_triples(num_entities, triples);
    let ents = entities_of(triples);
    let total: Vec<f64> = ents.iter().map(|&e| adj.degree(e) as f64).collect();
    let outs: Vec<f64> = ents
        .iter()
        .map(|&e| adj.neighbours(e).iter().filter(|n| n.direction == Direction::Outgoing).count() as f64)
        .collect();
    let (neighbours_mean, neighbours_std) = mean_std(&total);
    let (out_degree_mean, out_degree_std) = mean_std(&outs);
    SplitStats {
        split: name.to_string(),
        entities: ents.len(),
        triples: triples.len(),
        relations: triples.iter().map(|t| t.rel).collect::<BTreeSet<_>>().len(),
        neighbours_mean,
        neighbours_std,
        out_degree_mean,
        out_degree_std,
    }
}

pub fn dataset_stats(kg: &KnowledgeGraph, splits: &SplitGraphs) -> StatsReport {
    let n = kg.num_entities();
    StatsReport {
        relations: kg.num_relations(),
        entities: n,
        splits: vec![
            split_stats("train", n, &splits.train),
            split_stats("valid", n, &splits.valid),
            split_stats("test", n, &splits.test),
        ],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn named(n: usize, prefix: &str) -> Vec<(String, String)> {
        (0..n).map(|i| (format!("{prefix}{i}"), format!("text {prefix} {i}"))).collect()
    }

    #[test]
    fn toy_graph_has_one_entry_each_way() {
        let kg = KnowledgeGraph::new(named(2, "e"), named(1, "r"), &[Triple::new(0, 0, 1)]).unwrap();
        let adj = kg.adjacency();
        assert_eq!(adj.count(Direction::Outgoing), 1);
        assert_eq!(adj.count(Direction::Incoming), 1);
        assert_eq!(adj.neighbours(0)[0].direction, Direction::Outgoing);
        assert_eq!(adj.neighbours(1)[0].direction, Direction::Incoming);
    }

    #[test]
    fn single_excluded_edge_leaves_nothing() {
        let t = Triple::new(0, 0, 1);
        let adj = Adjacency::from_triples(2, &[t]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = sample_neighbourhood(&adj, 0, 10, &[t], &mut rng).unwrap();
        assert!(s.neighbours.is_empty());
        let s = sample_neighbourhood(&adj, 1, 10, &[t], &mut rng).unwrap();
        assert!(s.neighbours.is_empty());
    }

    #[test]
    fn under_cap_returns_everything() {
        let ts = [Triple::new(0, 0, 1), Triple::new(2, 0, 0), Triple::new(0, 1, 3)];
        let adj = Adjacency::from_triples(4, &ts);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = sample_neighbourhood(&adj, 0, 10, &[], &mut rng).unwrap();
        assert_eq!(s.neighbours.len(), 3);
        assert_eq!(s.neighbours, adj.neighbours(0));
    }

    #[test]
    fn over_cap_is_seeded_and_distinct() {
        let ts: Vec<Triple> = (1..=100).map(|i| Triple::new(0, 0, i)).collect();
        let adj = Adjacency::from_triples(101, &ts);
        let a = sample_neighbourhood(&adj, 0, 10, &[], &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = sample_neighbourhood(&adj, 0, 10, &[], &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
        let distinct: HashSet<_> = a.neighbours.iter().collect();
        assert_eq!(distinct.len(), 10);
    }

    #[test]
    fn unknown_centre_is_an_error() {
        let adj = Adjacency::from_triples(2, &[]);
        assert!(sample_neighbourhood(&adj, 7, 3, &[], &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn candidate_sets_per_regime() {
        // train {a,b}, test {c}
        let train = vec![Triple::new(0, 0, 1)];
        let test = vec![Triple::new(2, 0, 2)];
        let dynamic = SplitGraphs::new(Regime::Dynamic, train.clone(), vec![], test.clone());
        assert_eq!(candidate_entities(&dynamic, Phase::Test), vec![0, 1, 2]);
        let transfer = SplitGraphs::new(Regime::Transfer, train, vec![], test);
        assert_eq!(candidate_entities(&transfer, Phase::Test), vec![2]);
        assert!(transfer.regime_violations().is_empty());
    }

    #[test]
    fn overlapping_transfer_split_is_reported_not_repaired() {
        let s = SplitGraphs::new(Regime::Transfer, vec![Triple::new(0, 0, 1)], vec![], vec![Triple::new(1, 0, 2)]);
        assert_eq!(s.regime_violations().len(), 1);
        assert_eq!(candidate_entities(&s, Phase::Test), vec![1, 2]);
    }

    #[test]
    fn ring_statistics() {
        let ts = [Triple::new(0, 0, 1), Triple::new(1, 0, 2), Triple::new(2, 0, 0)];
        let s = split_stats("train", 3, &ts);
        assert_eq!((s.entities, s.triples, s.relations), (3, 3, 1));
        assert_eq!(s.neighbours_mean, 2.0);
        assert_eq!(s.neighbours_std, 0.0);
        assert_eq!(s.out_degree_mean, 1.0);
    }

    #[test]
    fn empty_split_statistics_are_zero() {
        let s = split_stats("valid", 5, &[]);
        assert_eq!((s.entities, s.triples, s.neighbours_mean, s.neighbours_std), (0, 0, 0.0, 0.0));
    }
}

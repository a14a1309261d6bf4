//! Desk-scale synthetic datasets whose answers are determined either by
//! entity text alone or by graph structure alone.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::kg::{write_dataset, EntityId, KnowledgeGraph, Regime, SplitGraphs, Triple};

const GROUP_NAMES: [&str; 26] = [
    "alpha", "bravo", "charlie", "delta", "echo", "foxtrot", "golf", "hotel", "india", "juliett", "kilo", "lima",
    "mike", "november", "oscar", "papa", "quebec", "romeo", "sierra", "tango", "uniform", "victor", "whiskey",
    "xray", "yankee", "zulu",
];

/// Size of the filler-word pool used for uninformative descriptions.
const FILLER_POOL: usize = 4;
const MEMBER_WORDS: usize = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SyntheticTask {
    TextDetermined,
    StructureDetermined,
}

impl FromStr for SyntheticTask {
    type Err = CoreError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "text" | "text-determined" => Ok(SyntheticTask::TextDetermined),
            "structure" | "structure-determined" => Ok(SyntheticTask::StructureDetermined),
            _ => Err(CoreError::Synthetic(format!(
                "unknown task `{s}` (expected text-determined or structure-determined)"
            ))),
        }
    }
}

impl fmt::Display for SyntheticTask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SyntheticTask::TextDetermined => "text-determined",
            SyntheticTask::StructureDetermined => "structure-determined",
        })
    }
}

/// Number of groups used for `n` entities.
pub fn group_count(n: usize) -> usize {
    (n / 32).clamp(1, GROUP_NAMES.len())
}

fn split_sizes(members: usize, min_eval: usize) -> (usize, usize, usize) {
    let eval = (members / 5).max(min_eval);
    (members.saturating_sub(2 * eval), eval, eval)
}

fn filler(rng: &mut ChaCha8Rng, words: usize) -> String {
    (0..words).map(|_| format!("w{}", rng.gen_range(0..FILLER_POOL))).collect::<Vec<_>>().join(" ")
}

/// Builds a transfer-regime dataset of `n` entities.
///
/// Text-determined: entity `k` of group `g` is described as
/// "entity k of group g"; `same_group` links members of a group (4 random
/// partners each in train, every ordered pair in valid and test).
///
/// Structure-determined: descriptions are random filler words except for
/// hubs, whose text names a role and a group. Each group is made of cells of
/// two left and two right members; each member is `member_of` the two hubs
/// of its cell and role, and `hub_sibling` links every left member of a cell
/// to every right member. Every member therefore has the same neighbourhood
/// shape in every split, and its cell is visible only through its hubs.
/// The last cell of each group goes to test, the one before it to validation.
pub fn generate_synthetic(task: SyntheticTask, n: usize, seed: u64) -> Result<(KnowledgeGraph, SplitGraphs)> {
    generate_with_streams(task, n, seed, seed ^ 0x7e57_7e57)
}

/// As [`generate_synthetic`] with separate seeds for the graph and for the
/// descriptions, so either can be varied alone.
pub fn generate_with_streams(
    task: SyntheticTask,
    n: usize,
    graph_seed: u64,
    text_seed: u64,
) -> Result<(KnowledgeGraph, SplitGraphs)> {
    if n < 8 {
        return Err(CoreError::Synthetic(format!("n = {n} is too small (need at least 8)")));
    }
    let mut grng = ChaCha8Rng::seed_from_u64(graph_seed);
    let mut trng = ChaCha8Rng::seed_from_u64(text_seed);
    match task {
        SyntheticTask::TextDetermined => text_task(n, &mut grng),
        SyntheticTask::StructureDetermined => structure_task(n, &mut grng, &mut trng),
    }
}

/// Members of one group in one split.
type Cell = Vec<EntityId>;

fn partition(n_members: usize, first_id: EntityId, min_eval: usize, rng: &mut ChaCha8Rng) -> Result<[Cell; 3]> {
    let (tr, va, te) = split_sizes(n_members, min_eval);
    if tr < 2 || tr + va + te > n_members {
        return Err(CoreError::Synthetic(format!(
            "a group of {n_members} members cannot be split into train/valid/test (increase n)"
        )));
    }
    let mut ids: Vec<EntityId> = (first_id..first_id + n_members as EntityId).collect();
    ids.shuffle(rng);
    let train = ids[..tr].to_vec();
    let valid = ids[tr..tr + va].to_vec();
    let test = ids[tr + va..].to_vec();
    Ok([train, valid, test])
}

fn pick_others(rng: &mut ChaCha8Rng, pool: &[EntityId], me: EntityId, k: usize) -> Vec<EntityId> {
    let others: Vec<EntityId> = pool.iter().copied().filter(|&x| x != me).collect();
    others.choose_multiple(rng, k.min(others.len())).copied().collect()
}

fn text_task(n: usize, rng: &mut ChaCha8Rng) -> Result<(KnowledgeGraph, SplitGraphs)> {
    let groups = group_count(n);
    let mut entities = Vec::with_capacity(n);
    let mut splits: [Vec<Triple>; 3] = Default::default();
    let mut next: EntityId = 0;
    for g in 0..groups {
        let size = n / groups + usize::from(g < n % groups);
        for k in next..next + size as EntityId {
            entities.push((format!("e{k}"), format!("entity {k} of group {}", GROUP_NAMES[g])));
        }
        let cells = partition(size, next, 2, rng)?;
        next += size as EntityId;
        for &m in &cells[0] {
            for o in pick_others(rng, &cells[0], m, 4) {
                splits[0].push(Triple::new(m, 0, o));
            }
        }
        for (s, cell) in cells.iter().enumerate().skip(1) {
            for &a in cell {
                for &b in cell {
                    if a != b {
                        splits[s].push(Triple::new(a, 0, b));
                    }
                }
            }
        }
    }
    let relations = vec![("same_group".to_string(), "same group".to_string())];
    finish(entities, relations, splits)
}

fn structure_task(n: usize, grng: &mut ChaCha8Rng, trng: &mut ChaCha8Rng) -> Result<(KnowledgeGraph, SplitGraphs)> {
    const MEMBER_OF: u32 = 0;
    const SIBLING: u32 = 1;
    const ROLES: [&str; 2] = ["left", "right"];
    // Per cell and role: two hubs and two members.
    const CELL: usize = 8;
    let groups = group_count(n);
    let per_group = n / groups;
    if per_group < 3 * CELL {
        return Err(CoreError::Synthetic(format!(
            "n = {n} leaves only {per_group} entities per group (need {})",
            3 * CELL
        )));
    }
    // Entity ids are shuffled so that they carry no trace of the layout.
    let mut ids: Vec<EntityId> = (0..n as EntityId).collect();
    ids.shuffle(grng);
    let mut ids = ids.into_iter();
    let mut take = || ids.next().expect("n ids for n entities");

    let mut entities: Vec<(String, String)> = (0..n).map(|k| (format!("e{k}"), String::new())).collect();
    let mut splits: [Vec<Triple>; 3] = Default::default();
    for g in 0..groups {
        let size = per_group + usize::from(g < n % groups);
        let cells = size / CELL;
        // The last cell of a group is its test cell and the one before it
        // its validation cell; entities left over join the first train cell.
        let mut leftover = size - cells * CELL;
        for c in 0..cells {
            let s = if c + 1 == cells { 2 } else if c + 2 == cells { 1 } else { 0 };
            let mut sides: [Vec<EntityId>; 2] = Default::default();
            for (role, side) in sides.iter_mut().enumerate() {
                let hubs = [take(), take()];
                for &h in &hubs {
                    entities[h as usize].1 = format!("{} hub {} {}", ROLES[role], GROUP_NAMES[g], filler(trng, 1));
                }
                let extra = if c == 0 { leftover / (2 - role) } else { 0 };
                leftover -= extra;
                for _ in 0..2 + extra {
                    let m = take();
                    entities[m as usize].1 = filler(trng, MEMBER_WORDS);
                    for &h in &hubs {
                        splits[s].push(Triple::new(m, MEMBER_OF, h));
                    }
                    side.push(m);
                }
            }
            for &l in &sides[0] {
                for &r in &sides[1] {
                    splits[s].push(Triple::new(l, SIBLING, r));
                }
            }
        }
    }
    let relations = vec![
        ("member_of".to_string(), "member of".to_string()),
        ("hub_sibling".to_string(), "hub sibling".to_string()),
    ];
    finish(entities, relations, splits)
}

fn finish(
    entities: Vec<(String, String)>,
    relations: Vec<(String, String)>,
    splits: [Vec<Triple>; 3],
) -> Result<(KnowledgeGraph, SplitGraphs)> {
    let [mut train, mut valid, mut test] = splits;
    for s in [&mut train, &mut valid, &mut test] {
        let mut seen = BTreeSet::new();
        s.retain(|t| seen.insert(*t));
    }
    let all: Vec<Triple> = [&train[..], &valid[..], &test[..]].concat();
    let kg = KnowledgeGraph::new(entities, relations, &all)?;
    let splits = SplitGraphs::new(Regime::Transfer, train, valid, test);
    debug_assert!(splits.regime_violations().is_empty());
    Ok((kg, splits))
}

/// Generates a dataset and writes it to `dir`.
pub fn write_synthetic(task: SyntheticTask, n: usize, seed: u64, dir: &Path) -> Result<()> {
    let (kg, splits) = generate_synthetic(task, n, seed)?;
    write_dataset(dir, &kg, &splits)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn too_small_is_rejected() {
        assert!(generate_synthetic(SyntheticTask::TextDetermined, 4, 1).is_err());
        assert!(generate_synthetic(SyntheticTask::StructureDetermined, 10, 1).is_err());
    }

    #[test]
    fn both_tasks_have_disjoint_eval_entities() {
        for task in [SyntheticTask::TextDetermined, SyntheticTask::StructureDetermined] {
            let (kg, s) = generate_synthetic(task, 64, 7).unwrap();
            assert_eq!(kg.num_entities(), 64);
            assert!(s.regime_violations().is_empty());
            assert!(s.valid_entities.is_disjoint(&s.test_entities));
            assert!(!s.test.is_empty() && !s.valid.is_empty() && !s.train.is_empty());
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_synthetic(SyntheticTask::StructureDetermined, 64, 7).unwrap();
        let b = generate_synthetic(SyntheticTask::StructureDetermined, 64, 7).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn structure_cells_are_uniform_and_complete() {
        let (kg, s) = generate_synthetic(SyntheticTask::StructureDetermined, 96, 5).unwrap();
        let group = |e: EntityId| kg.entity_text(e).split(' ').nth(2).unwrap().to_string();
        for triples in [&s.train, &s.valid, &s.test] {
            let hubs_of = |e: EntityId| -> BTreeSet<EntityId> {
                triples.iter().filter(|t| t.rel == 0 && t.head == e).map(|t| t.tail).collect()
            };
            let sib: BTreeSet<(EntityId, EntityId)> =
                triples.iter().filter(|t| t.rel == 1).map(|t| (t.head, t.tail)).collect();
            let lefts: BTreeSet<EntityId> = sib.iter().map(|p| p.0).collect();
            let rights: BTreeSet<EntityId> = sib.iter().map(|p| p.1).collect();
            assert!(lefts.is_disjoint(&rights));
            for &l in &lefts {
                let hubs = hubs_of(l);
                assert_eq!(hubs.len(), 2);
                for &r in &rights {
                    let linked = sib.contains(&(l, r));
                    // Siblings of one cell share both hubs on each side.
                    let same_cell = lefts.iter().any(|&l2| hubs_of(l2) == hubs && sib.contains(&(l2, r)));
                    assert_eq!(linked, same_cell);
                    if linked {
                        assert_eq!(group(*hubs.first().unwrap()), group(*hubs_of(r).first().unwrap()));
                    }
                }
                assert_eq!(sib.iter().filter(|p| p.0 == l).count(), 2);
            }
        }
    }

    #[test]
    fn structure_labels_ignore_descriptions() {
        let (ka, sa) = generate_with_streams(SyntheticTask::StructureDetermined, 96, 3, 1).unwrap();
        let (kb, sb) = generate_with_streams(SyntheticTask::StructureDetermined, 96, 3, 2).unwrap();
        assert_eq!(sa, sb);
        assert_ne!(ka, kb);
    }

    #[test]
    fn text_labels_follow_descriptions() {
        let (kg, s) = generate_synthetic(SyntheticTask::TextDetermined, 64, 7).unwrap();
        let group = |e: EntityId| kg.entity_text(e).rsplit(' ').next().unwrap().to_string();
        for (cell, triples) in [(&s.valid_entities, &s.valid), (&s.test_entities, &s.test)] {
            let mut expected = BTreeSet::new();
            for &a in cell {
                for &b in cell {
                    if a != b && group(a) == group(b) {
                        expected.insert(Triple::new(a, 0, b));
                    }
                }
            }
            let got: BTreeSet<Triple> = triples.iter().copied().collect();
            assert_eq!(got, expected);
        }
    }
}

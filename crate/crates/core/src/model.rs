//! The full encoder stack and the batching plan that feeds it.
//!
//! A forward pass encodes every distinct text once, gathers relation
//! embeddings from those rows (or from a fixed table in the non-inductive
//! mode), and runs the graph encoder over all requested subgraphs at once.

use std::collections::{BTreeSet, HashMap};

use fnftg_tensor::{Binding, ParamId, ParamStore, Tape, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{Ablation, GtConfig, TrainConfig, TtConfig};
use crate::error::{CoreError, Result};
use crate::graph::{GraphEncoder, GraphItem, ItemNeighbour};
use crate::kg::{Direction, EntityId, KnowledgeGraph, RelationId, SplitGraphs, SubgraphSample, Triple};
use crate::nn::xavier;
use crate::scoring::Side;
use crate::text::{to_rows, TextEncoder, Vocab};

/// Everything needed to rebuild a model's parameter layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub text_encoder: TtConfig,
    pub graph_encoder: GtConfig,
    pub ablation: Ablation,
    pub num_relations: usize,
}

impl ModelSpec {
    pub fn from_config(cfg: &TrainConfig, num_relations: usize) -> Self {
        ModelSpec {
            text_encoder: cfg.text_encoder,
            graph_encoder: cfg.graph_encoder,
            ablation: cfg.ablation,
            num_relations,
        }
    }

    pub fn width(&self) -> usize {
        self.text_encoder.width
    }
}

pub fn relation_string(kg: &KnowledgeGraph, rel: RelationId, inverse: bool) -> String {
    if inverse {
        format!("inverse of {}", kg.relation_text(rel))
    } else {
        kg.relation_text(rel).to_string()
    }
}

/// `[h‖r]` for tail prediction and `[t‖r⁻¹]` for head prediction.
pub fn query_string(kg: &KnowledgeGraph, entity: EntityId, rel: RelationId, side: Side) -> String {
    let e = kg.entity_text(entity);
    match side {
        Side::Tail => format!("{e} {}", kg.relation_text(rel)),
        Side::Head => format!("{e} inverse of {}", kg.relation_text(rel)),
    }
}

/// Builds a vocabulary from training-split texts only: descriptions of
/// training entities, texts of relations used in training triples, and the
/// words of the inverse prefix. Words seen only in evaluation map to UNK.
pub fn training_vocab(kg: &KnowledgeGraph, splits: &SplitGraphs) -> Vocab {
    let rels: BTreeSet<RelationId> = splits.train.iter().map(|t| t.rel).collect();
    let mut texts: Vec<&str> = splits.train_entities.iter().map(|&e| kg.entity_text(e)).collect();
    texts.extend(rels.into_iter().map(|r| kg.relation_text(r)));
    texts.push("inverse of");
    Vocab::build(texts)
}

#[derive(Debug, Clone)]
pub struct Model {
    pub spec: ModelSpec,
    pub vocab: Vocab,
    pub params: ParamStore,
    tt: TextEncoder,
    gt: GraphEncoder,
    rel_table: Option<ParamId>,
}

impl Model {
    pub fn new(spec: ModelSpec, vocab: Vocab, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let d = spec.width();
        TextEncoder::init(&mut params, spec.text_encoder, vocab.len(), &mut rng)?;
        GraphEncoder::init(&mut params, spec.graph_encoder, d, &mut rng)?;
        if !spec.ablation.inductive_relations {
            params.insert("relation_table", xavier(&mut rng, 2 * spec.num_relations.max(1), d))?;
        }
        Self::from_params(spec, vocab, params)
    }

    /// Wraps an existing parameter store (for example one read from a checkpoint).
    pub fn from_params(spec: ModelSpec, vocab: Vocab, params: ParamStore) -> Result<Self> {
        let tt = TextEncoder::attach(&params, spec.text_encoder)?;
        let gt = GraphEncoder::attach(&params, spec.graph_encoder)?;
        let rel_table = if spec.ablation.inductive_relations {
            None
        } else {
            Some(params.id("relation_table").ok_or_else(|| CoreError::Checkpoint("missing relation_table".into()))?)
        };
        let tok = params.get(params.id("tt.token_embedding").expect("attached")).dims2().0;
        if tok != vocab.len() {
            return Err(CoreError::Checkpoint(format!(
                "token embedding has {tok} rows but the vocabulary has {} entries",
                vocab.len()
            )));
        }
        Ok(Model { spec, vocab, params, tt, gt, rel_table })
    }

    pub fn text_encoder(&self) -> &TextEncoder {
        &self.tt
    }

    pub fn graph_encoder(&self) -> &GraphEncoder {
        &self.gt
    }

    pub fn relation_table(&self) -> Option<ParamId> {
        self.rel_table
    }

    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        self.vocab.tokenize(text, self.spec.text_encoder.max_len)
    }

    /// Runs `plan` on `tape` with parameters bound through `b`.
    pub fn forward(&self, tape: &mut Tape, b: &Binding, plan: &EncodePlan) -> Result<PlanOutput> {
        if plan.texts.is_empty() {
            return Err(CoreError::Invalid("empty encode plan".into()));
        }
        let texts = self.tt.forward(tape, b, &plan.texts)?;
        let rels = if plan.rels.is_empty() {
            None
        } else if let Some(table) = self.rel_table {
            let rows: Vec<usize> = plan.rels.iter().map(|&(r, inv)| 2 * r as usize + usize::from(inv)).collect();
            Some(tape.gather_rows(b.var(table), &rows)?)
        } else {
            Some(tape.gather_rows(texts, &plan.rel_text_rows)?)
        };
        let items = if plan.items.is_empty() {
            None
        } else if self.spec.ablation.use_subgraphs {
            Some(self.gt.forward(tape, b, texts, rels, &plan.items, &self.spec.ablation)?)
        } else {
            let centres: Vec<usize> = plan.items.iter().map(|it| it.centre).collect();
            Some(tape.gather_rows(texts, &centres)?)
        };
        Ok(PlanOutput { texts, rels, items })
    }

    /// Inference-only evaluation of `plan`, returning plain values.
    pub fn run(&self, plan: &EncodePlan) -> Result<PlanValues> {
        let mut tape = Tape::new();
        let b = self.params.bind(&mut tape, false);
        let out = self.forward(&mut tape, &b, plan)?;
        Ok(PlanValues {
            texts: to_rows(tape.value(out.texts)),
            rels: out.rels.map(|r| to_rows(tape.value(r))).unwrap_or_default(),
            items: out.items.map(|r| to_rows(tape.value(r))).unwrap_or_default(),
        })
    }

    /// TT embedding of an arbitrary string.
    pub fn encode_text(&self, text: &str) -> Result<Vec<f64>> {
        let mut plan = EncodePlan::default();
        let row = plan.text(self.tokenize(text));
        Ok(self.run(&plan)?.texts.swap_remove(row))
    }

    /// `r_TT`: the relation's text (prefixed by "inverse of" when `inverse`)
    /// through the text encoder, or its row of the fixed table.
    pub fn encode_relation(&self, kg: &KnowledgeGraph, rel: RelationId, inverse: bool) -> Result<Vec<f64>> {
        let mut plan = EncodePlan::default();
        let row = plan.relation(self, kg, rel, inverse);
        plan.text(self.tokenize(""));
        Ok(self.run(&plan)?.rels.swap_remove(row))
    }

    /// Text-level query embedding; without relation conditioning this is the
    /// plain entity encoding.
    pub fn encode_query_entity(&self, kg: &KnowledgeGraph, entity: EntityId, rel: RelationId, side: Side) -> Result<Vec<f64>> {
        let mut plan = EncodePlan::default();
        let row = plan.query(self, kg, entity, rel, side);
        Ok(self.run(&plan)?.texts.swap_remove(row))
    }

    pub fn encode_candidate(&self, kg: &KnowledgeGraph, entity: EntityId) -> Result<Vec<f64>> {
        let mut plan = EncodePlan::default();
        let row = plan.entity(self, kg, entity);
        Ok(self.run(&plan)?.texts.swap_remove(row))
    }

    /// Graph-encoder output for `sample` around a centre whose input is the
    /// TT embedding of `centre`. Returns the centre input unchanged when
    /// subgraphs are disabled.
    pub fn encode_subgraph(&self, kg: &KnowledgeGraph, centre: Centre, sample: &SubgraphSample) -> Result<Vec<f64>> {
        let mut plan = EncodePlan::default();
        let row = plan.centre(self, kg, centre);
        let item = plan.item(self, kg, row, Some(sample));
        Ok(self.run(&plan)?.items.swap_remove(item))
    }
}

/// Which text stands at the centre of a subgraph.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Centre {
    /// Plain entity description.
    Candidate(EntityId),
    /// Relation-conditioned query text.
    Query(EntityId, RelationId, Side),
}

impl Centre {
    pub fn entity(&self) -> EntityId {
        match *self {
            Centre::Candidate(e) | Centre::Query(e, _, _) => e,
        }
    }
}

/// A batch of encoding work with every text and relation listed once.
#[derive(Debug, Clone, Default)]
pub struct EncodePlan {
    texts: Vec<Vec<u32>>,
    text_index: HashMap<Vec<u32>, usize>,
    rels: Vec<(RelationId, bool)>,
    rel_index: HashMap<(RelationId, bool), usize>,
    rel_text_rows: Vec<usize>,
    items: Vec<GraphItem>,
}

impl EncodePlan {
    pub fn num_texts(&self) -> usize {
        self.texts.len()
    }

    pub fn num_items(&self) -> usize {
        self.items.len()
    }

    pub fn items(&self) -> &[GraphItem] {
        &self.items
    }

    /// Row of a tokenised text, adding it if new.
    pub fn text(&mut self, ids: Vec<u32>) -> usize {
        if let Some(&i) = self.text_index.get(&ids) {
            return i;
        }
        let i = self.texts.len();
        self.text_index.insert(ids.clone(), i);
        self.texts.push(ids);
        i
    }

    pub fn entity(&mut self, model: &Model, kg: &KnowledgeGraph, e: EntityId) -> usize {
        self.text(model.tokenize(kg.entity_text(e)))
    }

    pub fn query(&mut self, model: &Model, kg: &KnowledgeGraph, e: EntityId, rel: RelationId, side: Side) -> usize {
        if model.spec.ablation.use_rel_conditioning {
            self.text(model.tokenize(&query_string(kg, e, rel, side)))
        } else {
            self.entity(model, kg, e)
        }
    }

    pub fn centre(&mut self, model: &Model, kg: &KnowledgeGraph, c: Centre) -> usize {
        match c {
            Centre::Candidate(e) => self.entity(model, kg, e),
            Centre::Query(e, r, side) => self.query(model, kg, e, r, side),
        }
    }

    /// Row of the relation matrix for `rel` (or its inverse).
    pub fn relation(&mut self, model: &Model, kg: &KnowledgeGraph, rel: RelationId, inverse: bool) -> usize {
        if let Some(&i) = self.rel_index.get(&(rel, inverse)) {
            return i;
        }
        let i = self.rels.len();
        self.rel_index.insert((rel, inverse), i);
        self.rels.push((rel, inverse));
        let text_row = if model.rel_table.is_none() {
            self.text(model.tokenize(&relation_string(kg, rel, inverse)))
        } else {
            0
        };
        self.rel_text_rows.push(text_row);
        i
    }

    /// Adds a graph item around the text at `centre_row`. Neighbours are
    /// ignored when the model does not use subgraphs.
    pub fn item(&mut self, model: &Model, kg: &KnowledgeGraph, centre_row: usize, sample: Option<&SubgraphSample>) -> usize {
        let mut neighbours = Vec::new();
        if model.spec.ablation.use_subgraphs {
            if let Some(s) = sample {
                let mut nbs = s.neighbours.clone();
                nbs.sort_unstable();
                for nb in nbs {
                    let incoming = nb.direction == Direction::Incoming;
                    neighbours.push(ItemNeighbour {
                        node: self.entity(model, kg, nb.entity),
                        rel_from_centre: self.relation(model, kg, nb.rel, incoming),
                        rel_to_centre: self.relation(model, kg, nb.rel, !incoming),
                    });
                }
            }
        }
        self.items.push(GraphItem { centre: centre_row, neighbours });
        self.items.len() - 1
    }
}

/// Tape handles produced by [`Model::forward`].
#[derive(Debug, Clone, Copy)]
pub struct PlanOutput {
    /// `[texts, d]` TT embeddings.
    pub texts: Var,
    /// `[relations, d]` relation embeddings in plan order.
    pub rels: Option<Var>,
    /// `[items, d]` subgraph (or plain centre) embeddings in plan order.
    pub items: Option<Var>,
}

#[derive(Debug, Clone, Default)]
pub struct PlanValues {
    pub texts: Vec<Vec<f64>>,
    pub rels: Vec<Vec<f64>>,
    pub items: Vec<Vec<f64>>,
}

/// True if any neighbour in `sample` comes from one of `triples`.
pub fn sample_contains(sample: &SubgraphSample, triples: &[Triple]) -> bool {
    sample.neighbours.iter().any(|n| triples.contains(&n.triple(sample.centre)))
}

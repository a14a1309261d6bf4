//! Training: in-batch margin ranking with leakage-safe subgraphs, RAdam with
//! cosine decay, per-epoch validation and best-checkpoint retention.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use fnftg_tensor::{radam_step, OptimizerState, ParamStore, Tape, Var};
use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, TrainingState};
use crate::config::TrainConfig;
use crate::error::{io_err, CoreError, Result};
use crate::eval::{evaluate_model, EvalOptions, RankingReport};
use crate::kg::{
    centre_rng, load_dataset, sample_neighbourhood, Adjacency, EntityId, KnowledgeGraph, Phase, SplitGraphs,
    SubgraphSample, Triple,
};
use crate::model::{sample_contains, training_vocab, Centre, EncodePlan, Model, ModelSpec};
use crate::scoring::{sample_negatives, Side};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const TIMING_FILE: &str = "timing.jsonl";
pub const CHECKPOINT_DIR: &str = "checkpoint";

const SHUFFLE_STREAM: u64 = 0x5eed_5eed;

/// Proportional learning-rate scaling from the reference batch size of 32.
pub fn scale_lr(base_lr_at_32: f64, batch: usize) -> f64 {
    if !(batch.is_power_of_two() && batch >= 32) {
        let upper = batch.max(1).next_power_of_two();
        let lower = upper / 2;
        let nearest = if lower > 0 && batch - lower < upper - batch { lower } else { upper };
        warn!("batch size {batch} is not a power of two >= 32 (nearest: {}); scaling proportionally anyway", nearest.max(32));
    }
    base_lr_at_32 * (batch as f64 / 32.0)
}

/// Splits `triples` into batches of `size`, folding a trailing batch of
/// fewer than two triples into its predecessor so every batch can supply
/// negatives.
pub fn make_batches(triples: &[Triple], size: usize) -> Result<Vec<Vec<Triple>>> {
    if triples.len() < 2 {
        return Err(CoreError::Invalid(format!("training needs at least 2 triples, got {}", triples.len())));
    }
    let mut out: Vec<Vec<Triple>> = triples.chunks(size.max(2)).map(<[Triple]>::to_vec).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() < 2) {
        let last = out.pop().expect("non-empty");
        out.last_mut().expect("non-empty").extend(last);
    }
    Ok(out)
}

/// Wall-clock breakdown of training work.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StepTiming {
    /// Negative sampling, subgraph sampling and tokenisation.
    pub prepare_seconds: f64,
    /// Text and graph encoders plus the loss.
    pub forward_seconds: f64,
    /// Backward pass and optimizer update.
    pub backward_seconds: f64,
}

impl StepTiming {
    fn add(&mut self, o: &StepTiming) {
        self.prepare_seconds += o.prepare_seconds;
        self.forward_seconds += o.forward_seconds;
        self.backward_seconds += o.backward_seconds;
    }
}

pub struct Trainer<'a> {
    pub model: Model,
    pub optimizer: OptimizerState,
    pub config: TrainConfig,
    kg: &'a KnowledgeGraph,
    adj: Adjacency,
    rng: ChaCha8Rng,
    epoch: usize,
    timing: StepTiming,
}

impl<'a> Trainer<'a> {
    /// Fresh model with a vocabulary built from the training split.
    pub fn new(config: TrainConfig, kg: &'a KnowledgeGraph, splits: &SplitGraphs) -> Result<Self> {
        config.validate()?;
        let spec = ModelSpec::from_config(&config, kg.num_relations());
        let model = Model::new(spec, training_vocab(kg, splits), config.seed)?;
        Self::with_model(config, kg, splits, model)
    }

    pub fn with_model(config: TrainConfig, kg: &'a KnowledgeGraph, splits: &SplitGraphs, model: Model) -> Result<Self> {
        config.validate()?;
        let per_epoch = make_batches(&splits.train, config.batch_size)?.len();
        let total = (config.epochs * per_epoch) as u64;
        let lr = scale_lr(config.base_lr, config.batch_size);
        let optimizer = OptimizerState::new(&model.params, config.optimizer.into(), lr, total);
        Ok(Trainer {
            adj: Adjacency::from_triples(kg.num_entities(), &splits.train),
            rng: ChaCha8Rng::seed_from_u64(config.seed ^ SHUFFLE_STREAM),
            model,
            optimizer,
            config,
            kg,
            epoch: 0,
            timing: StepTiming::default(),
        })
    }

    pub fn rng(&self) -> &ChaCha8Rng {
        &self.rng
    }

    pub fn step_count(&self) -> u64 {
        self.optimizer.step
    }

    fn sample(&self, centre: EntityId, stream: u64, batch: &[Triple]) -> Result<Option<SubgraphSample>> {
        if !self.model.spec.ablation.use_subgraphs {
            return Ok(None);
        }
        let mut rng = centre_rng(self.config.seed, stream, centre);
        let s = sample_neighbourhood(&self.adj, centre, self.config.neighbour_cap, batch, &mut rng)?;
        debug_assert!(!sample_contains(&s, batch), "a scored triple leaked into the subgraph of {centre}");
        Ok(Some(s))
    }

    /// One optimisation step on `batch`; returns the summed hinge loss.
    ///
    /// Every triple yields a tail query `(h, r, ?)` and a head query
    /// `(?, r, t)`. Targets and negatives share one embedding per distinct
    /// batch entity. No subgraph in the step contains any triple of the batch.
    pub fn train_step(&mut self, batch: &[Triple]) -> Result<f64> {
        let t0 = Instant::now();
        let negatives = sample_negatives(batch, &self.config.negatives, &mut self.rng)?;
        let k = self.config.negatives.per_positive_for(batch.len());
        let n = batch.len();
        let step = self.optimizer.step;
        let (model, kg) = (&self.model, self.kg);

        let mut plan = EncodePlan::default();
        let mut query_items = Vec::with_capacity(2 * n);
        let mut rel_rows = Vec::with_capacity(n);
        for side in Side::BOTH {
            for t in batch {
                let known = side.known(t);
                let row = plan.centre(model, kg, Centre::Query(known, t.rel, side));
                let sample = self.sample(known, 2 * step, batch)?;
                query_items.push(plan.item(model, kg, row, sample.as_ref()));
                if side == Side::Tail {
                    rel_rows.push(plan.relation(model, kg, t.rel, false));
                }
            }
        }
        let entities: BTreeSet<EntityId> = batch.iter().flat_map(|t| [t.head, t.tail]).collect();
        let mut cand_item = BTreeMap::new();
        for &e in &entities {
            let row = plan.entity(model, kg, e);
            let sample = self.sample(e, 2 * step + 1, batch)?;
            cand_item.insert(e, plan.item(model, kg, row, sample.as_ref()));
        }
        let mut pos_items = Vec::with_capacity(2 * n);
        let mut neg_items = Vec::with_capacity(2 * n * k);
        for side in Side::BOTH {
            for (t, negs) in batch.iter().zip(&negatives) {
                pos_items.push(cand_item[&side.target(t)]);
                neg_items.extend(negs.side(side).iter().map(|e| cand_item[e]));
            }
        }
        let t1 = Instant::now();

        let mut tape = Tape::new();
        let b = model.params.bind(&mut tape, true);
        let out = model.forward(&mut tape, &b, &plan)?;
        let items = out.items.expect("plan has items");
        let rels = out.rels.expect("plan has relations");
        let r = tape.gather_rows(rels, &rel_rows)?;
        let qt = tape.gather_rows(items, &query_items[..n])?;
        let qh = tape.gather_rows(items, &query_items[n..])?;
        let at = tape.add(qt, r)?;
        let ah = tape.sub(qh, r)?;
        let anchors = tape.concat_rows(&[at, ah])?;
        let loss = margin_loss(&mut tape, items, anchors, &pos_items, &neg_items, k, self.config.margin)?;
        let value = tape.value(loss).item().expect("scalar loss");
        if !value.is_finite() {
            return Err(CoreError::NonFiniteLoss {
                epoch: self.epoch,
                step,
                detail: format!("loss {value} on a batch of {n} triples"),
            });
        }
        let t2 = Instant::now();

        tape.backward(loss)?;
        let grads = b.grads(&tape);
        let lr = self.optimizer.scheduled_lr();
        radam_step(&mut self.optimizer, &mut self.model.params, &grads, lr)?;
        let t3 = Instant::now();
        self.timing.add(&StepTiming {
            prepare_seconds: (t1 - t0).as_secs_f64(),
            forward_seconds: (t2 - t1).as_secs_f64(),
            backward_seconds: (t3 - t2).as_secs_f64(),
        });
        Ok(value)
    }

    /// Shuffles the training triples and runs one epoch; returns the mean
    /// loss per batch.
    pub fn train_epoch(&mut self, train: &[Triple]) -> Result<f64> {
        self.epoch += 1;
        let mut order = train.to_vec();
        order.shuffle(&mut self.rng);
        let batches = make_batches(&order, self.config.batch_size)?;
        let mut total = 0.0;
        for batch in &batches {
            total += self.train_step(batch)?;
        }
        Ok(total / batches.len() as f64)
    }

    fn take_timing(&mut self) -> StepTiming {
        std::mem::take(&mut self.timing)
    }
}

/// Summed hinge `max(0, m − f(pos) + f(neg))` with `f = −‖anchor − c‖₁`.
/// Row `q` of `anchors` is scored against `items[pos_items[q]]` and against
/// the `k` items `neg_items[q·k..(q+1)·k]`.
pub fn margin_loss(
    tape: &mut Tape,
    items: Var,
    anchors: Var,
    pos_items: &[usize],
    neg_items: &[usize],
    k: usize,
    margin: f64,
) -> Result<Var> {
    let queries = pos_items.len();
    if neg_items.len() != queries * k {
        return Err(CoreError::Invalid(format!("{} negatives for {queries} queries with k = {k}", neg_items.len())));
    }
    let repeat: Vec<usize> = (0..queries).flat_map(|q| std::iter::repeat_n(q, k)).collect();
    let pos = tape.gather_rows(items, pos_items)?;
    let pos_diff = tape.sub(anchors, pos)?;
    let pos_abs = tape.abs(pos_diff)?;
    let pos_dist = tape.sum_rows(pos_abs)?;
    let pos_col = tape.reshape(pos_dist, vec![queries, 1])?;
    let pos_rep = tape.gather_rows(pos_col, &repeat)?;
    let pos_rep = tape.reshape(pos_rep, vec![queries * k])?;
    let anchor_rep = tape.gather_rows(anchors, &repeat)?;
    let neg = tape.gather_rows(items, neg_items)?;
    let neg_diff = tape.sub(anchor_rep, neg)?;
    let neg_abs = tape.abs(neg_diff)?;
    let neg_dist = tape.sum_rows(neg_abs)?;
    let gap = tape.sub(pos_rep, neg_dist)?;
    let shifted = tape.add_scalar(gap, margin)?;
    let hinge = tape.relu(shifted)?;
    Ok(tape.sum(hinge)?)
}

/// One line of `metrics.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub split: String,
    pub mrr: f64,
    pub h1: f64,
    pub h3: f64,
    pub h10: f64,
    pub loss: Option<f64>,
}

impl MetricsRecord {
    fn new(epoch: usize, split: &str, report: &RankingReport, loss: Option<f64>) -> Self {
        let m = report.optimistic.mean;
        MetricsRecord { epoch, split: split.to_string(), mrr: m.mrr, h1: m.h1, h3: m.h3, h10: m.h10, loss }
    }
}

/// One line of `timing.jsonl`. Kept apart from the metrics so that metric
/// logs of identical runs compare byte for byte.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRecord {
    pub epoch: usize,
    pub steps: usize,
    pub train_seconds: f64,
    pub validate_seconds: f64,
    #[serde(flatten)]
    pub breakdown: StepTiming,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Model holding the best-validation parameters.
    pub model: Model,
    pub best_epoch: usize,
    pub best_valid_mrr: Option<f64>,
    pub test: RankingReport,
    pub metrics: Vec<MetricsRecord>,
    pub timing: Vec<TimingRecord>,
}

impl TrainOutcome {
    /// Mean wall-clock seconds of the training part of an epoch.
    pub fn mean_epoch_seconds(&self) -> f64 {
        if self.timing.is_empty() {
            return 0.0;
        }
        self.timing.iter().map(|t| t.train_seconds).sum::<f64>() / self.timing.len() as f64
    }
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    for r in rows {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

/// Trains on `splits.train`, validating every `validate_every` epochs on a
/// (possibly capped) candidate set, then scores the best parameters on the
/// test split with the full protocol. With `out_dir` set, writes the logs and
/// the best checkpoint there.
pub fn run_training(config: &TrainConfig, kg: &KnowledgeGraph, splits: &SplitGraphs, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    config.validate()?;
    for v in splits.regime_violations() {
        warn!("{v}");
    }
    let mut trainer = Trainer::new(config.clone(), kg, splits)?;
    info!(
        "training {} ({} parameters) on {} triples for {} epochs",
        config.ablation.label(),
        trainer.model.params.total_values(),
        splits.train.len(),
        config.epochs
    );
    let steps_per_epoch = make_batches(&splits.train, config.batch_size)?.len();
    let val_opts = EvalOptions {
        phase: Phase::Validation,
        candidates_cap: config.val_candidates_cap,
        cap_seed: config.seed,
        cached: true,
    };

    let mut metrics = Vec::new();
    let mut timing = Vec::new();
    let mut best: Option<(f64, usize, ParamStore, OptimizerState, ChaCha8Rng)> = None;
    for epoch in 1..=config.epochs {
        let t0 = Instant::now();
        let loss = trainer.train_epoch(&splits.train)?;
        let train_seconds = t0.elapsed().as_secs_f64();
        let breakdown = trainer.take_timing();

        let t1 = Instant::now();
        let validate = !splits.valid.is_empty() && (epoch % config.validate_every == 0 || epoch == config.epochs);
        if validate {
            let report = evaluate_model(&trainer.model, kg, splits, &val_opts, config.neighbour_cap, config.seed)?;
            let mrr = report.mrr();
            info!("epoch {epoch}: loss {loss:.4}, valid MRR {mrr:.4}");
            metrics.push(MetricsRecord::new(epoch, "valid", &report, Some(loss)));
            if best.as_ref().is_none_or(|b| mrr > b.0) {
                best = Some((mrr, epoch, trainer.model.params.clone(), trainer.optimizer.clone(), trainer.rng().clone()));
            }
        } else {
            info!("epoch {epoch}: loss {loss:.4}");
        }
        timing.push(TimingRecord {
            epoch,
            steps: steps_per_epoch,
            train_seconds,
            validate_seconds: t1.elapsed().as_secs_f64(),
            breakdown,
        });
    }

    let (best_valid_mrr, best_epoch, optimizer, rng) = match best {
        Some((mrr, epoch, params, opt, rng)) => {
            trainer.model.params = params;
            (Some(mrr), epoch, opt, rng)
        }
        None => (None, config.epochs, trainer.optimizer.clone(), trainer.rng().clone()),
    };
    let model = trainer.model;
    let test = if splits.test.is_empty() {
        RankingReport::from_ranks(Phase::Test, splits.regime, 0, false, Vec::new())
    } else {
        evaluate_model(&model, kg, splits, &EvalOptions::new(Phase::Test), config.neighbour_cap, config.seed)?
    };
    info!("best epoch {best_epoch}: test MRR {:.4}", test.mrr());
    metrics.push(MetricsRecord::new(best_epoch, "test", &test, None));

    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        write_jsonl(&dir.join(METRICS_FILE), &metrics)?;
        write_jsonl(&dir.join(TIMING_FILE), &timing)?;
        let state = TrainingState { config: Some(config), epoch: best_epoch, optimizer: Some(&optimizer), rng: Some(&rng) };
        checkpoint::save(&dir.join(CHECKPOINT_DIR), &model, &state)?;
    }
    Ok(TrainOutcome { model, best_epoch, best_valid_mrr, test, metrics, timing })
}

/// Loads a dataset directory in `config.regime` and trains on it.
pub fn run_training_dir(config: &TrainConfig, data_dir: &Path, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    let (kg, splits) = load_dataset(data_dir, config.regime)?;
    run_training(config, &kg, &splits, out_dir)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lr_scaling_examples() {
        assert_eq!(scale_lr(1e-5, 32), 1e-5);
        assert_eq!(scale_lr(1e-5, 64), 2e-5);
        assert_eq!(scale_lr(1e-5, 128), 4e-5);
        assert!((scale_lr(1e-5, 48) - 1.5e-5).abs() < 1e-20);
    }

    #[test]
    fn trailing_singleton_batch_is_merged() {
        let ts: Vec<Triple> = (0..5).map(|i| Triple::new(i, 0, i + 1)).collect();
        let b = make_batches(&ts, 2).unwrap();
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![2, 3]);
        assert!(make_batches(&ts[..1], 4).is_err());
        assert_eq!(make_batches(&ts, 8).unwrap().len(), 1);
    }
}

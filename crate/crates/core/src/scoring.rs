//! TransE scoring, the margin ranking loss and in-batch negative sampling.

use std::collections::BTreeSet;
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::kg::{EntityId, Triple};

/// Which slot of a triple a query asks for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    /// `(h, r, ?)`
    Tail,
    /// `(?, r, t)`
    Head,
}

impl Side {
    pub const BOTH: [Side; 2] = [Side::Tail, Side::Head];

    /// The entity the query starts from.
    pub fn known(self, t: &Triple) -> EntityId {
        match self {
            Side::Tail => t.head,
            Side::Head => t.tail,
        }
    }

    /// The entity the query asks for.
    pub fn target(self, t: &Triple) -> EntityId {
        match self {
            Side::Tail => t.tail,
            Side::Head => t.head,
        }
    }
}

impl fmt::Display for Side {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Side::Tail => "tail",
            Side::Head => "head",
        })
    }
}

/// `−‖h + r − t‖₁`
pub fn transe_score(h: &[f64], r: &[f64], t: &[f64]) -> Result<f64> {
    if h.len() != r.len() || r.len() != t.len() {
        return Err(CoreError::Invalid(format!(
            "transe_score widths differ: {}, {}, {}",
            h.len(),
            r.len(),
            t.len()
        )));
    }
    Ok(-h.iter().zip(r).zip(t).map(|((h, r), t)| (h + r - t).abs()).sum::<f64>())
}

/// Query anchor: `h + r` for tail prediction, `t − r` for head prediction.
/// Every candidate `c` then scores `−‖anchor − c‖₁`, which is the TransE
/// score with `c` in the missing slot.
pub fn anchor(query: &[f64], rel: &[f64], side: Side) -> Vec<f64> {
    match side {
        Side::Tail => query.iter().zip(rel).map(|(q, r)| q + r).collect(),
        Side::Head => query.iter().zip(rel).map(|(q, r)| q - r).collect(),
    }
}

/// Score of candidate `c` against a query anchor.
pub fn anchor_score(anchor: &[f64], c: &[f64]) -> f64 {
    -anchor.iter().zip(c).map(|(a, c)| (a - c).abs()).sum::<f64>()
}

/// `Σ_pos Σ_neg max(0, margin − f(pos) + f(neg))`.
pub fn margin_loss(pos_scores: &[f64], neg_scores: &[Vec<f64>], margin: f64) -> Result<f64> {
    if pos_scores.len() != neg_scores.len() {
        return Err(CoreError::Invalid("one list of negative scores is needed per positive".into()));
    }
    let mut total = 0.0;
    for (p, negs) in pos_scores.iter().zip(neg_scores) {
        if negs.is_empty() {
            return Err(CoreError::Invalid("a positive has no negatives".into()));
        }
        total += negs.iter().map(|n| (margin - p + n).max(0.0)).sum::<f64>();
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NegVariant {
    OneSided,
    BatchTied,
    TwoSidedReflexive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NegStrategy {
    pub strategy: NegVariant,
    /// Ignored by the batch-tied variant, which always uses the batch size.
    pub per_positive: usize,
}

impl Default for NegStrategy {
    fn default() -> Self {
        NegStrategy { strategy: NegVariant::OneSided, per_positive: 32 }
    }
}

impl NegStrategy {
    pub fn per_positive_for(&self, batch: usize) -> usize {
        match self.strategy {
            NegVariant::BatchTied => batch,
            _ => self.per_positive,
        }
    }
}

/// Negatives for both query directions of one positive triple.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TripleNegatives {
    pub tail: Vec<EntityId>,
    pub head: Vec<EntityId>,
}

impl TripleNegatives {
    pub fn side(&self, side: Side) -> &[EntityId] {
        match side {
            Side::Tail => &self.tail,
            Side::Head => &self.head,
        }
    }
}

/// Distinct entities a query of `side` for `batch[i]` may be corrupted with.
///
/// One-sided and batch-tied pools hold the batch's entities on the predicted
/// side; the two-sided reflexive pool holds heads and tails, including the
/// query's own entity. The target is always removed. If a one-sided pool
/// comes out empty (every triple in the batch shares the target) the
/// two-sided pool is used instead.
pub fn negative_pool(batch: &[Triple], i: usize, side: Side, variant: NegVariant) -> Vec<EntityId> {
    let target = side.target(&batch[i]);
    let two_sided = || -> Vec<EntityId> {
        batch.iter().flat_map(|t| [t.head, t.tail]).filter(|&e| e != target).collect::<BTreeSet<_>>().into_iter().collect()
    };
    match variant {
        NegVariant::TwoSidedReflexive => two_sided(),
        NegVariant::OneSided | NegVariant::BatchTied => {
            let pool: Vec<EntityId> = batch
                .iter()
                .map(|t| side.target(t))
                .filter(|&e| e != target)
                .collect::<BTreeSet<_>>()
                .into_iter()
                .collect();
            if pool.is_empty() {
                two_sided()
            } else {
                pool
            }
        }
    }
}

/// Draws negatives (with replacement) from each positive's pool.
pub fn sample_negatives<R: Rng + ?Sized>(batch: &[Triple], strategy: &NegStrategy, rng: &mut R) -> Result<Vec<TripleNegatives>> {
    if batch.len() < 2 {
        return Err(CoreError::Invalid("negative sampling needs a batch of at least 2 triples".into()));
    }
    let k = strategy.per_positive_for(batch.len());
    if k == 0 {
        return Err(CoreError::Invalid("negatives per positive must be at least 1".into()));
    }
    let mut out = Vec::with_capacity(batch.len());
    for i in 0..batch.len() {
        let mut draw = |side: Side| -> Result<Vec<EntityId>> {
            let pool = negative_pool(batch, i, side, strategy.strategy);
            if pool.is_empty() {
                return Err(CoreError::Invalid(format!("no admissible negative for {:?}", batch[i])));
            }
            Ok((0..k).map(|_| pool[rng.gen_range(0..pool.len())]).collect())
        };
        let tail = draw(Side::Tail)?;
        let head = draw(Side::Head)?;
        out.push(TripleNegatives { tail, head });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn transe_examples() {
        assert_eq!(transe_score(&[1.0, 2.0], &[0.0, 0.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(transe_score(&[0.0, 0.0], &[1.0, -1.0], &[0.0, 0.0]).unwrap(), -2.0);
        assert_eq!(transe_score(&[0.5, 0.0], &[0.5, 1.0], &[1.0, 0.5]).unwrap(), -0.5);
        assert!(transe_score(&[0.0], &[0.0, 1.0], &[0.0]).is_err());
    }

    #[test]
    fn anchors_reproduce_transe() {
        let (h, r, t) = ([0.3, -1.2, 2.0], [0.7, 0.1, -0.4], [-0.5, 0.9, 1.1]);
        let s = transe_score(&h, &r, &t).unwrap();
        assert!((anchor_score(&anchor(&h, &r, Side::Tail), &t) - s).abs() < 1e-15);
        assert!((anchor_score(&anchor(&t, &r, Side::Head), &h) - s).abs() < 1e-15);
    }

    #[test]
    fn margin_examples() {
        assert_eq!(margin_loss(&[2.0], &[vec![0.5]], 1.0).unwrap(), 0.0);
        assert!((margin_loss(&[0.2], &[vec![0.5]], 1.0).unwrap() - 1.3).abs() < 1e-12);
        assert!((margin_loss(&[0.2], &[vec![0.5, -0.3]], 1.0).unwrap() - 1.8).abs() < 1e-12);
        assert!(margin_loss(&[0.2], &[vec![]], 1.0).is_err());
    }

    #[test]
    fn pools_match_definitions() {
        // a=0 b=1 c=2 d=3
        let batch = [Triple::new(0, 0, 1), Triple::new(2, 0, 3)];
        assert_eq!(negative_pool(&batch, 0, Side::Tail, NegVariant::OneSided), vec![3]);
        assert_eq!(negative_pool(&batch, 0, Side::Tail, NegVariant::TwoSidedReflexive), vec![0, 2, 3]);
        assert_eq!(negative_pool(&batch, 0, Side::Head, NegVariant::OneSided), vec![2]);
    }

    #[test]
    fn batch_of_one_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sample_negatives(&[Triple::new(0, 0, 1)], &NegStrategy::default(), &mut rng).is_err());
    }

    #[test]
    fn batch_tied_draws_batch_size() {
        let batch: Vec<Triple> = (0..64).map(|i| Triple::new(i, 0, i + 100)).collect();
        let s = NegStrategy { strategy: NegVariant::BatchTied, per_positive: 5 };
        let negs = sample_negatives(&batch, &s, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!(negs.iter().all(|n| n.tail.len() == 64 && n.head.len() == 64));
    }
}

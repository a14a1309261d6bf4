//! Finite-difference verification of every differentiable operation, the
//! encoder blocks built from them, and the full training loss.

use std::sync::Arc;

use fnftg_tensor::fd::compare_gradients;
use fnftg_tensor::{AttentionGroup, AttentionLayout, Binding, CustomOp, ParamStore, Tape, Tensor, TensorError, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{Ablation, GtConfig, TtConfig};
use crate::error::{CoreError, Result};
use crate::graph::{GraphEncoder, GraphItem, ItemNeighbour};
use crate::kg::{Direction, KnowledgeGraph, Neighbour, Regime, SplitGraphs, SubgraphSample, Triple};
use crate::model::{training_vocab, Centre, EncodePlan, Model, ModelSpec};
use crate::nn::swiglu_ffn;
use crate::scoring::Side;
use crate::text::projection_head;
use crate::trainer::margin_loss;

pub const TOLERANCE: f64 = 1e-4;
pub const STEP: f64 = 1e-5;

/// Names of every check, in the order they run.
pub const CHECKS: &[&str] = &[
    "matmul",
    "add",
    "sub",
    "mul",
    "add_row",
    "scale",
    "add_scalar",
    "silu",
    "relu",
    "abs",
    "layer_norm",
    "softmax",
    "gather_rows",
    "concat_rows",
    "slice_cols",
    "sum",
    "sum_rows",
    "reshape",
    "attention",
    "attention_modulated",
    "swiglu_ffn",
    "projection_head",
    "graph_layer",
    "transe_margin_loss",
];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OpCheck {
    pub op: String,
    pub max_relative_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub seed: u64,
    pub tolerance: f64,
    pub step: f64,
    pub checks: Vec<OpCheck>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn first_failure(&self) -> Option<&OpCheck> {
        self.checks.iter().find(|c| !c.passed)
    }
}

/// Identity in the forward pass with a deliberately wrong backward, used to
/// show that the suite catches a broken gradient.
struct WrongBackward;

impl CustomOp for WrongBackward {
    fn name(&self) -> &str {
        "wrong_backward"
    }

    fn backward(&self, _inputs: &[&Tensor], _output: &Tensor, grad_out: &[f64]) -> Vec<Vec<f64>> {
        vec![grad_out.iter().map(|g| 1.5 * g).collect()]
    }
}

struct Suite<'a> {
    rng: ChaCha8Rng,
    fault: Option<&'a str>,
    checks: Vec<OpCheck>,
}

impl Suite<'_> {
    fn uniform(&mut self, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.rng.gen_range(-1.0..1.0)).collect();
        Tensor::new(shape.to_vec(), data).expect("finite values")
    }

    /// Values bounded away from zero, for ops with a kink there.
    fn off_zero(&mut self, shape: &[usize]) -> Tensor {
        let mut t = self.uniform(shape);
        for v in t.data_mut() {
            *v = v.signum() * (0.1 + 0.9 * v.abs());
        }
        t
    }

    /// Compares gradients of `sum(w ⊙ f(inputs))` for a random constant `w`.
    fn check<F>(&mut self, op: &str, inputs: Vec<Tensor>, f: F) -> Result<()>
    where
        F: Fn(&mut Tape, &[Var]) -> fnftg_tensor::Result<Var>,
    {
        let faulty = self.fault == Some(op);
        let shape = {
            let mut tape = Tape::new();
            let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
            let y = f(&mut tape, &vars)?;
            tape.shape(y).to_vec()
        };
        let weights = self.uniform(&shape);
        let cmp = compare_gradients(&inputs, STEP, |tape, vars| {
            let mut y = f(tape, vars)?;
            if faulty {
                let out = tape.value(y).clone();
                y = tape.custom(&[y], out, Box::new(WrongBackward))?;
            }
            let w = tape.constant(weights.clone());
            let weighted = tape.mul(y, w)?;
            tape.sum(weighted)
        })?;
        let err = cmp.max_relative_error();
        self.checks.push(OpCheck { op: op.to_string(), max_relative_error: err, passed: err <= TOLERANCE });
        Ok(())
    }
}

fn wrap(op: &'static str) -> impl Fn(CoreError) -> TensorError {
    move |e| TensorError::shape(op, e.to_string())
}

/// Runs the whole suite. `inject_fault` names a check whose output gets a
/// wrong backward pass; that check is expected to fail.
pub fn run_gradcheck(seed: u64, inject_fault: Option<&str>) -> Result<GradcheckReport> {
    if let Some(name) = inject_fault {
        if !CHECKS.contains(&name) {
            return Err(CoreError::Invalid(format!("unknown check `{name}` (expected one of {})", CHECKS.join(", "))));
        }
    }
    let mut s = Suite { rng: ChaCha8Rng::seed_from_u64(seed), fault: inject_fault, checks: Vec::new() };

    let (a, b) = (s.uniform(&[3, 4]), s.uniform(&[4, 2]));
    s.check("matmul", vec![a, b], |t, v| t.matmul(v[0], v[1]))?;
    let pair = |s: &mut Suite| vec![s.uniform(&[3, 4]), s.uniform(&[3, 4])];
    let ins = pair(&mut s);
    s.check("add", ins, |t, v| t.add(v[0], v[1]))?;
    let ins = pair(&mut s);
    s.check("sub", ins, |t, v| t.sub(v[0], v[1]))?;
    let ins = pair(&mut s);
    s.check("mul", ins, |t, v| t.mul(v[0], v[1]))?;
    let ins = vec![s.uniform(&[3, 4]), s.uniform(&[4])];
    s.check("add_row", ins, |t, v| t.add_row(v[0], v[1]))?;
    let ins = vec![s.uniform(&[3, 4])];
    s.check("scale", ins, |t, v| t.scale(v[0], -0.7))?;
    let ins = vec![s.uniform(&[3, 4])];
    s.check("add_scalar", ins, |t, v| t.add_scalar(v[0], 0.3))?;
    let ins = vec![s.uniform(&[3, 4])];
    s.check("silu", ins, |t, v| t.silu(v[0]))?;
    let ins = vec![s.off_zero(&[3, 4])];
    s.check("relu", ins, |t, v| t.relu(v[0]))?;
    let ins = vec![s.off_zero(&[3, 4])];
    s.check("abs", ins, |t, v| t.abs(v[0]))?;
    let ins = vec![s.uniform(&[3, 5]), s.uniform(&[5]), s.uniform(&[5])];
    s.check("layer_norm", ins, |t, v| t.layer_norm(v[0], v[1], v[2], 1e-5))?;
    let mask: Vec<bool> = (0..12).map(|i| i % 4 != 2).collect();
    let ins = vec![s.uniform(&[3, 4])];
    s.check("softmax", ins, move |t, v| t.softmax(v[0], Some(&mask)))?;
    let ins = vec![s.uniform(&[4, 3])];
    s.check("gather_rows", ins, |t, v| t.gather_rows(v[0], &[2, 0, 2, 3]))?;
    let ins = vec![s.uniform(&[2, 3]), s.uniform(&[1, 3])];
    s.check("concat_rows", ins, |t, v| t.concat_rows(&[v[0], v[1]]))?;
    let ins = vec![s.uniform(&[3, 5])];
    s.check("slice_cols", ins, |t, v| t.slice_cols(v[0], 1, 3))?;
    let ins = vec![s.uniform(&[3, 4])];
    s.check("sum", ins, |t, v| t.sum(v[0]))?;
    let ins = vec![s.uniform(&[3, 4])];
    s.check("sum_rows", ins, |t, v| t.sum_rows(v[0]))?;
    let ins = vec![s.uniform(&[3, 4])];
    s.check("reshape", ins, |t, v| t.reshape(v[0], vec![4, 3]))?;

    let plain = Arc::new(AttentionLayout {
        heads: 2,
        groups: vec![AttentionGroup::dense(0, 3), AttentionGroup::dense(3, 2)],
    });
    let ins = vec![s.uniform(&[5, 4]), s.uniform(&[5, 4]), s.uniform(&[5, 4])];
    s.check("attention", ins, move |t, v| t.attention(v[0], v[1], v[2], None, plain.clone()))?;
    let star = Arc::new(AttentionLayout {
        heads: 2,
        groups: vec![AttentionGroup {
            start: 0,
            len: 3,
            key_mask: None,
            modulation: Some(vec![None, Some(0), Some(1), Some(2), None, None, Some(3), None, None]),
        }],
    });
    let ins = vec![s.uniform(&[3, 4]), s.uniform(&[3, 4]), s.uniform(&[3, 4]), s.uniform(&[4, 4])];
    s.check("attention_modulated", ins, move |t, v| t.attention(v[0], v[1], v[2], Some(v[3]), star.clone()))?;

    let ins = vec![s.uniform(&[2, 4]), s.uniform(&[4, 16]), s.uniform(&[8, 4])];
    s.check("swiglu_ffn", ins, |t, v| swiglu_ffn(t, v[0], v[1], v[2]))?;
    let ins = vec![s.uniform(&[2, 8]), s.uniform(&[8, 8]), s.uniform(&[8, 8])];
    s.check("projection_head", ins, |t, v| projection_head(t, v[0], v[1], v[2]))?;

    graph_layer_check(&mut s)?;
    composite_check(&mut s)?;

    Ok(GradcheckReport { seed, tolerance: TOLERANCE, step: STEP, checks: s.checks })
}

/// One graph-encoder layer over a 3-node star, differentiated with respect
/// to every parameter (including `W_R`), the node inputs and the relations.
fn graph_layer_check(s: &mut Suite<'_>) -> Result<()> {
    let d = 8;
    let mut store = ParamStore::new();
    let gt = GraphEncoder::init(&mut store, GtConfig { layers: 1, heads: 2, ffn: 8 }, d, &mut s.rng)?;
    // Non-trivial norms so that their gradients are exercised too.
    let mut inputs: Vec<Tensor> = store.iter().map(|(_, _, t)| t.clone()).collect();
    for t in &mut inputs {
        for v in t.data_mut() {
            *v += s.rng.gen_range(-0.2..0.2);
        }
    }
    let n_params = inputs.len();
    inputs.push(s.uniform(&[3, d]));
    inputs.push(s.uniform(&[4, d]));
    let item = GraphItem {
        centre: 0,
        neighbours: vec![
            ItemNeighbour { node: 1, rel_from_centre: 0, rel_to_centre: 1 },
            ItemNeighbour { node: 2, rel_from_centre: 2, rel_to_centre: 3 },
        ],
    };
    let ablation = Ablation::default();
    s.check("graph_layer", inputs, move |t, v| {
        let b = Binding::from_vars(v[..n_params].to_vec());
        gt.forward_all(t, &b, v[n_params], Some(v[n_params + 1]), std::slice::from_ref(&item), &ablation)
    })
}

/// Text encoder → graph encoder → translational anchors → margin loss on a
/// three-entity graph, differentiated with respect to every model parameter.
fn composite_check(s: &mut Suite<'_>) -> Result<()> {
    let entities = vec![
        ("a".to_string(), "red apple".to_string()),
        ("b".to_string(), "blue boat".to_string()),
        ("c".to_string(), "green cat".to_string()),
    ];
    let relations = vec![("likes".to_string(), "likes".to_string())];
    let triples = vec![Triple::new(0, 0, 1), Triple::new(2, 0, 0)];
    let kg = KnowledgeGraph::new(entities, relations, &triples)?;
    let splits = SplitGraphs::new(Regime::Dynamic, triples.clone(), Vec::new(), Vec::new());
    let spec = ModelSpec {
        text_encoder: TtConfig { layers: 1, width: 8, heads: 2, ffn: 8, max_len: 8 },
        graph_encoder: GtConfig { layers: 1, heads: 2, ffn: 8 },
        ablation: Ablation::default(),
        num_relations: 1,
    };
    let model = Model::new(spec, training_vocab(&kg, &splits), s.rng.gen())?;

    // Query centre 0 sees both other entities; its tail target is 1 and its
    // head target (through the inverse query on 1) is 0, with 2 as negative.
    let sample = SubgraphSample {
        centre: 0,
        neighbours: vec![
            Neighbour { entity: 1, rel: 0, direction: Direction::Outgoing },
            Neighbour { entity: 2, rel: 0, direction: Direction::Incoming },
        ],
    };
    let mut plan = EncodePlan::default();
    let row = plan.centre(&model, &kg, Centre::Query(0, 0, Side::Tail));
    let q_tail = plan.item(&model, &kg, row, Some(&sample));
    let row = plan.centre(&model, &kg, Centre::Query(1, 0, Side::Head));
    let q_head = plan.item(&model, &kg, row, None);
    let rel = plan.relation(&model, &kg, 0, false);
    let cand: Vec<usize> = (0..3)
        .map(|e| {
            let row = plan.entity(&model, &kg, e);
            plan.item(&model, &kg, row, None)
        })
        .collect();

    let inputs: Vec<Tensor> = model.params.iter().map(|(_, _, t)| t.clone()).collect();
    // Wide enough that the hinge is active and every parameter gets gradient.
    let margin = 100.0;
    s.check("transe_margin_loss", inputs, move |t, v| {
        let b = Binding::from_vars(v.to_vec());
        let run = |t: &mut Tape| -> Result<Var> {
            let out = model.forward(t, &b, &plan)?;
            let items = out.items.expect("plan has items");
            let r = t.gather_rows(out.rels.expect("plan has relations"), &[rel])?;
            let qt = t.gather_rows(items, &[q_tail])?;
            let qh = t.gather_rows(items, &[q_head])?;
            let at = t.add(qt, r)?;
            let ah = t.sub(qh, r)?;
            let anchors = t.concat_rows(&[at, ah])?;
            margin_loss(t, items, anchors, &[cand[1], cand[0]], &[cand[2], cand[2]], 1, margin)
        };
        run(t).map_err(wrap("transe_margin_loss"))
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_suite_passes() {
        let report = run_gradcheck(0, None).unwrap();
        assert_eq!(report.checks.len(), CHECKS.len());
        for c in &report.checks {
            assert!(c.passed, "{} relative error {}", c.op, c.max_relative_error);
        }
    }

    #[test]
    fn injected_fault_is_named() {
        let report = run_gradcheck(0, Some("layer_norm")).unwrap();
        let failed = report.first_failure().unwrap();
        assert_eq!(failed.op, "layer_norm");
        assert_eq!(report.checks.iter().filter(|c| !c.passed).count(), 1);
    }

    #[test]
    fn unknown_fault_is_rejected() {
        assert!(run_gradcheck(0, Some("nope")).is_err());
    }
}

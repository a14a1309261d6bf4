//! Graph encoder: pre-LN transformer layers over a centre entity and its
//! neighbours, with attention modulated by relation embeddings.
//!
//! For a pair `(i, j)` linked by relation embedding `r_ij` the score is
//! `x_i W_Q · diag(1 + LN(r_ij) W_R) · (x_j W_K)ᵀ / sqrt(d_head)`. Pairs
//! without a relation (self pairs, neighbour pairs) use the identity.

use std::sync::Arc;

use fnftg_tensor::{AttentionGroup, AttentionLayout, Binding, ParamId, ParamStore, Result, Tape, Tensor, TensorError, Var};
use rand::Rng;

use crate::config::{Ablation, GtConfig};
use crate::nn::{add_matrix, add_norm, lookup, swiglu_ffn, LN_EPS};

/// Segment rows of the `gt.segments` matrix.
pub const SEG_CENTRE: usize = 0;
pub const SEG_NEIGHBOUR: usize = 1;

#[derive(Debug, Clone)]
struct GtLayer {
    ln1: (ParamId, ParamId),
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wr: ParamId,
    ln_r: (ParamId, ParamId),
    ln2: (ParamId, ParamId),
    w_in: ParamId,
    w_out: ParamId,
}

/// One neighbour node of a [`GraphItem`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ItemNeighbour {
    /// Row of the node-input matrix holding this neighbour's embedding.
    pub node: usize,
    /// Row of the relation matrix for the centre → neighbour pair.
    pub rel_from_centre: usize,
    /// Row of the relation matrix for the neighbour → centre pair.
    pub rel_to_centre: usize,
}

/// A centre plus neighbours, expressed as rows of shared input matrices.
/// Neighbours must already be in canonical order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GraphItem {
    pub centre: usize,
    pub neighbours: Vec<ItemNeighbour>,
}

impl GraphItem {
    pub fn len(&self) -> usize {
        1 + self.neighbours.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Relation-row map in row-major `(query, key)` order, or `None` for the
    /// identity on pairs that do not involve the centre.
    fn modulation_map(&self) -> Vec<Option<u32>> {
        let n = self.len();
        let mut m = vec![None; n * n];
        for (j, nb) in self.neighbours.iter().enumerate() {
            m[j + 1] = Some(nb.rel_from_centre as u32);
            m[(j + 1) * n] = Some(nb.rel_to_centre as u32);
        }
        m
    }
}

/// Handles of the graph-encoder parameters inside a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct GraphEncoder {
    cfg: GtConfig,
    segments: ParamId,
    layers: Vec<GtLayer>,
}

impl GraphEncoder {
    pub fn init<R: Rng + ?Sized>(store: &mut ParamStore, cfg: GtConfig, d: usize, rng: &mut R) -> Result<Self> {
        store.insert("gt.segments", Tensor::zeros(vec![2, d]))?;
        for l in 0..cfg.layers {
            let p = format!("gt.layer{l}");
            add_norm(store, &format!("{p}.ln1"), d)?;
            for w in ["wq", "wk", "wv", "wr"] {
                add_matrix(store, rng, format!("{p}.{w}"), d, d)?;
            }
            add_norm(store, &format!("{p}.ln_r"), d)?;
            add_norm(store, &format!("{p}.ln2"), d)?;
            add_matrix(store, rng, format!("{p}.w_in"), d, 2 * cfg.ffn)?;
            add_matrix(store, rng, format!("{p}.w_out"), cfg.ffn, d)?;
        }
        Self::attach(store, cfg)
    }

    pub fn attach(store: &ParamStore, cfg: GtConfig) -> Result<Self> {
        let norm = |p: &str| -> Result<(ParamId, ParamId)> {
            Ok((lookup(store, &format!("{p}.gain"))?, lookup(store, &format!("{p}.bias"))?))
        };
        let mut layers = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let p = format!("gt.layer{l}");
            layers.push(GtLayer {
                ln1: norm(&format!("{p}.ln1"))?,
                wq: lookup(store, &format!("{p}.wq"))?,
                wk: lookup(store, &format!("{p}.wk"))?,
                wv: lookup(store, &format!("{p}.wv"))?,
                wr: lookup(store, &format!("{p}.wr"))?,
                ln_r: norm(&format!("{p}.ln_r"))?,
                ln2: norm(&format!("{p}.ln2"))?,
                w_in: lookup(store, &format!("{p}.w_in"))?,
                w_out: lookup(store, &format!("{p}.w_out"))?,
            });
        }
        Ok(GraphEncoder { cfg, segments: lookup(store, "gt.segments")?, layers })
    }

    pub fn config(&self) -> &GtConfig {
        &self.cfg
    }

    pub fn segments(&self) -> ParamId {
        self.segments
    }

    /// `W_R` of layer `l`.
    pub fn wr(&self, l: usize) -> ParamId {
        self.layers[l].wr
    }

    fn layout(&self, items: &[GraphItem], use_rij: bool) -> Arc<AttentionLayout> {
        let mut start = 0;
        let groups = items
            .iter()
            .map(|it| {
                let g = AttentionGroup {
                    start,
                    len: it.len(),
                    key_mask: None,
                    modulation: use_rij.then(|| it.modulation_map()),
                };
                start += it.len();
                g
            })
            .collect();
        Arc::new(AttentionLayout { heads: self.cfg.heads, groups })
    }

    /// Stacked node inputs of all items, segment embeddings included.
    fn inputs(&self, tape: &mut Tape, b: &Binding, nodes: Var, items: &[GraphItem], ablation: &Ablation) -> Result<Var> {
        let mut rows = Vec::new();
        let mut segs = Vec::new();
        for it in items {
            rows.push(it.centre);
            segs.push(SEG_CENTRE);
            for nb in &it.neighbours {
                rows.push(nb.node);
                segs.push(SEG_NEIGHBOUR);
            }
        }
        let x = tape.gather_rows(nodes, &rows)?;
        if ablation.use_segments {
            let s = tape.gather_rows(b.var(self.segments), &segs)?;
            tape.add(x, s)
        } else {
            Ok(x)
        }
    }

    /// `1 + LN(r) W_R` for every relation row.
    fn modulation(&self, tape: &mut Tape, b: &Binding, layer: &GtLayer, rels: Var) -> Result<Var> {
        let n = tape.layer_norm(rels, b.var(layer.ln_r.0), b.var(layer.ln_r.1), LN_EPS)?;
        let m = tape.matmul(n, b.var(layer.wr))?;
        tape.add_scalar(m, 1.0)
    }

    fn layer(
        &self,
        tape: &mut Tape,
        b: &Binding,
        layer: &GtLayer,
        x: Var,
        modulation: Option<Var>,
        layout: &Arc<AttentionLayout>,
    ) -> Result<Var> {
        let h = tape.layer_norm(x, b.var(layer.ln1.0), b.var(layer.ln1.1), LN_EPS)?;
        let q = tape.matmul(h, b.var(layer.wq))?;
        let k = tape.matmul(h, b.var(layer.wk))?;
        let v = tape.matmul(h, b.var(layer.wv))?;
        let a = tape.attention(q, k, v, modulation, layout.clone())?;
        let x = tape.add(x, a)?;
        let h = tape.layer_norm(x, b.var(layer.ln2.0), b.var(layer.ln2.1), LN_EPS)?;
        let f = swiglu_ffn(tape, h, b.var(layer.w_in), b.var(layer.w_out))?;
        tape.add(x, f)
    }

    /// Runs every layer over all items and returns the full `[Σ n_i, d]`
    /// output (item rows stacked in order).
    pub fn forward_all(
        &self,
        tape: &mut Tape,
        b: &Binding,
        nodes: Var,
        rels: Option<Var>,
        items: &[GraphItem],
        ablation: &Ablation,
    ) -> Result<Var> {
        if items.is_empty() {
            return Err(TensorError::shape("graph_encoder", "no items"));
        }
        let use_rij = ablation.use_rij && rels.is_some() && items.iter().any(|it| !it.neighbours.is_empty());
        let layout = self.layout(items, use_rij);
        let mut x = self.inputs(tape, b, nodes, items, ablation)?;
        for layer in &self.layers {
            let m = match (use_rij, rels) {
                (true, Some(r)) => Some(self.modulation(tape, b, layer, r)?),
                _ => None,
            };
            x = self.layer(tape, b, layer, x, m, &layout)?;
        }
        Ok(x)
    }

    /// Centre rows of [`Self::forward_all`]: one `d`-vector per item.
    pub fn forward(
        &self,
        tape: &mut Tape,
        b: &Binding,
        nodes: Var,
        rels: Option<Var>,
        items: &[GraphItem],
        ablation: &Ablation,
    ) -> Result<Var> {
        let all = self.forward_all(tape, b, nodes, rels, items, ablation)?;
        let mut centres = Vec::with_capacity(items.len());
        let mut row = 0;
        for it in items {
            centres.push(row);
            row += it.len();
        }
        tape.gather_rows(all, &centres)
    }

    /// Pre-softmax scores of layer `l` for one item, as `[heads, n, n]`.
    /// `x` holds the rows the layer attends over, i.e. node inputs after the
    /// pre-attention LayerNorm.
    pub fn attention_scores(
        &self,
        store: &ParamStore,
        l: usize,
        x: &Tensor,
        rels: Option<&Tensor>,
        item: &GraphItem,
        ablation: &Ablation,
    ) -> Result<Tensor> {
        let mut tape = Tape::new();
        let b = store.bind(&mut tape, false);
        let x = tape.constant(x.clone());
        let rels = rels.map(|r| tape.constant(r.clone()));
        let use_rij = ablation.use_rij && rels.is_some() && !item.neighbours.is_empty();
        let layout = self.layout(std::slice::from_ref(item), use_rij);
        let layer = &self.layers[l];
        let q = tape.matmul(x, b.var(layer.wq))?;
        let k = tape.matmul(x, b.var(layer.wk))?;
        let m = match (use_rij, rels) {
            (true, Some(r)) => Some(self.modulation(&mut tape, &b, layer, r)?),
            _ => None,
        };
        let (rows, d) = tape.value(q).dims2();
        layout.validate(rows, d, m.map(|m| tape.value(m).dims2().0))?;
        let scores = fnftg_tensor::kernels::attention_scores(tape.data(q), tape.data(k), m.map(|m| tape.data(m)), d, &layout);
        let n = item.len();
        Tensor::new(vec![self.cfg.heads, n, n], scores)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(d: usize, heads: usize) -> (ParamStore, GraphEncoder) {
        let mut store = ParamStore::new();
        let cfg = GtConfig { layers: 1, heads, ffn: 2 * d };
        let enc = GraphEncoder::init(&mut store, cfg, d, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        (store, enc)
    }

    fn star(n_nb: usize) -> GraphItem {
        GraphItem {
            centre: 0,
            neighbours: (0..n_nb)
                .map(|j| ItemNeighbour { node: j + 1, rel_from_centre: 2 * j, rel_to_centre: 2 * j + 1 })
                .collect(),
        }
    }

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::new(vec![r, c], (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn run(store: &ParamStore, enc: &GraphEncoder, nodes: &Tensor, rels: &Tensor, items: &[GraphItem]) -> Tensor {
        let mut tape = Tape::new();
        let b = store.bind(&mut tape, false);
        let n = tape.constant(nodes.clone());
        let r = tape.constant(rels.clone());
        let out = enc.forward_all(&mut tape, &b, n, Some(r), items, &Ablation::default()).unwrap();
        tape.value(out).clone()
    }

    #[test]
    fn hand_evaluated_score_in_one_dimension() {
        let (mut store, enc) = setup(1, 1);
        for name in ["gt.layer0.wq", "gt.layer0.wk"] {
            store.get_mut(store.id(name).unwrap()).data_mut()[0] = 1.0;
        }
        let item = GraphItem { centre: 0, neighbours: vec![ItemNeighbour { node: 1, rel_from_centre: 0, rel_to_centre: 0 }] };
        let x = Tensor::matrix(2, 1, vec![2.0, 3.0]).unwrap();
        // LayerNorm over a single relation value gives its bias (0), so any
        // r leaves the modulation at exactly 1.
        let rels = Tensor::matrix(1, 1, vec![0.7]).unwrap();
        let s = enc.attention_scores(&store, 0, &x, Some(&rels), &item, &Ablation::default()).unwrap();
        assert_eq!(s.data()[1], 6.0);
        assert_eq!(s.data()[2], 6.0);
    }

    #[test]
    fn single_node_gives_one_by_one_scores() {
        let (store, enc) = setup(4, 2);
        let x = random(&mut ChaCha8Rng::seed_from_u64(1), 1, 4);
        let s = enc.attention_scores(&store, 0, &x, None, &star(0), &Ablation::default()).unwrap();
        assert_eq!(s.shape(), &[2, 1, 1]);
    }

    #[test]
    fn zero_weights_and_gains_give_identity() {
        let (mut store, enc) = setup(4, 2);
        let ids: Vec<_> = store.iter().map(|(id, _, _)| id).collect();
        for id in ids {
            store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(&mut rng, 3, 4);
        let r = random(&mut rng, 4, 4);
        let out = run(&store, &enc, &x, &r, &[star(2)]);
        assert_eq!(out.data(), x.data());
    }

    #[test]
    fn neighbour_permutation_permutes_rows() {
        let (store, enc) = setup(8, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&mut rng, 4, 8);
        let r = random(&mut rng, 6, 8);
        let item = star(3);
        let mut swapped = item.clone();
        swapped.neighbours.swap(0, 2);
        let a = run(&store, &enc, &x, &r, &[item]);
        let b = run(&store, &enc, &x, &r, &[swapped]);
        // Summation order changes, so rows agree only up to rounding.
        let close = |u: &[f64], v: &[f64]| u.iter().zip(v).all(|(p, q)| (p - q).abs() < 1e-12);
        assert!(close(a.row(0), b.row(0)));
        assert!(close(a.row(1), b.row(3)));
        assert!(close(a.row(3), b.row(1)));
        assert!(close(a.row(2), b.row(2)));
    }
}

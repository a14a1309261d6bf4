//! Word-level tokenisation and the text encoder.
//!
//! The encoder is a small pre-LN transformer whose CLS output `c` is
//! projected as `silu(c · W₀) · W₁`.

use std::collections::{BTreeSet, HashMap};
use std::sync::Arc;

use fnftg_tensor::{AttentionGroup, AttentionLayout, Binding, ParamId, ParamStore, Result, Tape, Tensor, TensorError, Var};
use rand::Rng;

use crate::config::TtConfig;
use crate::nn::{add_matrix, add_norm, lookup, swiglu_ffn, LN_EPS};

pub const CLS: u32 = 0;
pub const PAD: u32 = 1;
pub const UNK: u32 = 2;
const RESERVED: [&str; 3] = ["[CLS]", "[PAD]", "[UNK]"];

/// Lowercased alphanumeric runs of `text`.
pub fn words(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    /// Reserved tokens followed by every word of `texts` in sorted order.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut set = BTreeSet::new();
        for t in texts {
            set.extend(words(t));
        }
        let tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).chain(set).collect();
        Self::from_tokens(tokens)
    }

    fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
        Vocab { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, word: &str) -> u32 {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> &str {
        &self.tokens[id as usize]
    }

    /// CLS, then at most `max_len − 1` word ids, padded to exactly `max_len`.
    pub fn tokenize(&self, text: &str, max_len: usize) -> Vec<u32> {
        let mut ids = Vec::with_capacity(max_len);
        ids.push(CLS);
        ids.extend(words(text).iter().take(max_len.saturating_sub(1)).map(|w| self.id(w)));
        ids.truncate(max_len.max(1));
        ids.resize(max_len.max(1), PAD);
        ids
    }

    /// `token<TAB>id` per line.
    pub fn to_tsv(&self) -> String {
        self.tokens.iter().enumerate().map(|(i, t)| format!("{t}\t{i}\n")).collect()
    }

    pub fn from_tsv(s: &str) -> std::result::Result<Self, String> {
        let mut tokens = Vec::new();
        for (n, line) in s.lines().enumerate().filter(|(_, l)| !l.is_empty()) {
            let (tok, id) = line.split_once('\t').ok_or_else(|| format!("vocab line {}: missing tab", n + 1))?;
            let id: usize = id.parse().map_err(|_| format!("vocab line {}: bad id", n + 1))?;
            if id != tokens.len() {
                return Err(format!("vocab line {}: ids must be dense and in order", n + 1));
            }
            tokens.push(tok.to_string());
        }
        if tokens.len() < 3 || tokens[..3] != RESERVED {
            return Err("vocab must start with [CLS], [PAD], [UNK]".into());
        }
        Ok(Self::from_tokens(tokens))
    }
}

/// The ids up to (not including) the first padding position.
pub fn content(ids: &[u32]) -> &[u32] {
    let end = ids.iter().position(|&i| i == PAD).unwrap_or(ids.len());
    &ids[..end]
}

#[derive(Debug, Clone)]
struct TtLayer {
    ln1: (ParamId, ParamId),
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    ln2: (ParamId, ParamId),
    w_in: ParamId,
    w_out: ParamId,
}

/// Handles of the text-encoder parameters inside a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct TextEncoder {
    cfg: TtConfig,
    tok: ParamId,
    pos: ParamId,
    layers: Vec<TtLayer>,
    final_ln: (ParamId, ParamId),
    w0: ParamId,
    w1: ParamId,
}

impl TextEncoder {
    pub fn init<R: Rng + ?Sized>(store: &mut ParamStore, cfg: TtConfig, vocab_size: usize, rng: &mut R) -> Result<Self> {
        let d = cfg.width;
        add_matrix(store, rng, "tt.token_embedding".into(), vocab_size, d)?;
        add_matrix(store, rng, "tt.position_embedding".into(), cfg.max_len, d)?;
        for l in 0..cfg.layers {
            let p = format!("tt.layer{l}");
            add_norm(store, &format!("{p}.ln1"), d)?;
            for w in ["wq", "wk", "wv"] {
                add_matrix(store, rng, format!("{p}.{w}"), d, d)?;
            }
            add_norm(store, &format!("{p}.ln2"), d)?;
            add_matrix(store, rng, format!("{p}.w_in"), d, 2 * cfg.ffn)?;
            add_matrix(store, rng, format!("{p}.w_out"), cfg.ffn, d)?;
        }
        add_norm(store, "tt.final_ln", d)?;
        add_matrix(store, rng, "tt.w0".into(), d, d)?;
        add_matrix(store, rng, "tt.w1".into(), d, d)?;
        Self::attach(store, cfg)
    }

    /// Finds the encoder's parameters in `store` by name.
    pub fn attach(store: &ParamStore, cfg: TtConfig) -> Result<Self> {
        let norm = |p: &str| -> Result<(ParamId, ParamId)> {
            Ok((lookup(store, &format!("{p}.gain"))?, lookup(store, &format!("{p}.bias"))?))
        };
        let mut layers = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let p = format!("tt.layer{l}");
            layers.push(TtLayer {
                ln1: norm(&format!("{p}.ln1"))?,
                wq: lookup(store, &format!("{p}.wq"))?,
                wk: lookup(store, &format!("{p}.wk"))?,
                wv: lookup(store, &format!("{p}.wv"))?,
                ln2: norm(&format!("{p}.ln2"))?,
                w_in: lookup(store, &format!("{p}.w_in"))?,
                w_out: lookup(store, &format!("{p}.w_out"))?,
            });
        }
        Ok(TextEncoder {
            cfg,
            tok: lookup(store, "tt.token_embedding")?,
            pos: lookup(store, "tt.position_embedding")?,
            layers,
            final_ln: norm("tt.final_ln")?,
            w0: lookup(store, "tt.w0")?,
            w1: lookup(store, "tt.w1")?,
        })
    }

    pub fn config(&self) -> &TtConfig {
        &self.cfg
    }

    pub fn w0(&self) -> ParamId {
        self.w0
    }

    pub fn w1(&self) -> ParamId {
        self.w1
    }

    /// Encodes a batch of token sequences into a `[n, d]` matrix.
    ///
    /// Padding positions are masked out of attention, and since the CLS
    /// output depends only on unmasked keys they are dropped before the
    /// encoder runs. Each sequence is its own attention block, so every row
    /// of the result is bitwise identical to encoding that text alone.
    pub fn forward(&self, tape: &mut Tape, b: &Binding, seqs: &[Vec<u32>]) -> Result<Var> {
        let mut flat = Vec::new();
        let mut positions = Vec::new();
        let mut groups = Vec::with_capacity(seqs.len());
        let mut cls_rows = Vec::with_capacity(seqs.len());
        for s in seqs {
            let s = content(s);
            if s.is_empty() || s.len() > self.cfg.max_len {
                return Err(TensorError::shape(
                    "encode_text",
                    format!("sequence length {} outside 1..={}", s.len(), self.cfg.max_len),
                ));
            }
            cls_rows.push(flat.len());
            groups.push(AttentionGroup::dense(flat.len(), s.len()));
            flat.extend(s.iter().map(|&i| i as usize));
            positions.extend(0..s.len());
        }
        if seqs.is_empty() {
            return Err(TensorError::shape("encode_text", "no sequences to encode"));
        }
        let layout = Arc::new(AttentionLayout { heads: self.cfg.heads, groups });
        let tok = tape.gather_rows(b.var(self.tok), &flat)?;
        let pos = tape.gather_rows(b.var(self.pos), &positions)?;
        let mut x = tape.add(tok, pos)?;
        for layer in &self.layers {
            let h = tape.layer_norm(x, b.var(layer.ln1.0), b.var(layer.ln1.1), LN_EPS)?;
            let q = tape.matmul(h, b.var(layer.wq))?;
            let k = tape.matmul(h, b.var(layer.wk))?;
            let v = tape.matmul(h, b.var(layer.wv))?;
            let a = tape.attention(q, k, v, None, layout.clone())?;
            x = tape.add(x, a)?;
            let h = tape.layer_norm(x, b.var(layer.ln2.0), b.var(layer.ln2.1), LN_EPS)?;
            let f = swiglu_ffn(tape, h, b.var(layer.w_in), b.var(layer.w_out))?;
            x = tape.add(x, f)?;
        }
        let c = tape.gather_rows(x, &cls_rows)?;
        let c = tape.layer_norm(c, b.var(self.final_ln.0), b.var(self.final_ln.1), LN_EPS)?;
        projection_head(tape, c, b.var(self.w0), b.var(self.w1))
    }
}

/// `silu(c · W₀) · W₁`
pub fn projection_head(tape: &mut Tape, c: Var, w0: Var, w1: Var) -> Result<Var> {
    let z = tape.matmul(c, w0)?;
    let z = tape.silu(z)?;
    tape.matmul(z, w1)
}

/// Plain values of `store` bound as constants, for inference-only passes.
pub fn to_rows(t: &Tensor) -> Vec<Vec<f64>> {
    let (r, _) = t.dims2();
    (0..r).map(|i| t.row(i).to_vec()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn vocab() -> Vocab {
        Vocab::build(["Hans Zimmer", "composed", "Inception film", "inverse of"])
    }

    #[test]
    fn reserved_ids_are_fixed() {
        let v = vocab();
        assert_eq!((v.token(CLS), v.token(PAD), v.token(UNK)), ("[CLS]", "[PAD]", "[UNK]"));
        assert_eq!(v.id("never-seen"), UNK);
    }

    #[test]
    fn empty_text_is_cls_then_padding() {
        let ids = vocab().tokenize("", 5);
        assert_eq!(ids, vec![CLS, PAD, PAD, PAD, PAD]);
    }

    #[test]
    fn long_text_is_truncated_to_exactly_l() {
        let text = (0..34).map(|i| format!("w{i}")).collect::<Vec<_>>().join(" ");
        let ids = vocab().tokenize(&text, 24);
        assert_eq!(ids.len(), 24);
        assert_eq!(ids[0], CLS);
        assert!(ids.iter().skip(1).all(|&i| i == UNK));
    }

    #[test]
    fn tokenisation_is_deterministic_and_case_folded() {
        let v = vocab();
        assert_eq!(v.tokenize("Hans, ZIMMER!", 6), v.tokenize("hans zimmer", 6));
    }

    #[test]
    fn tsv_round_trip() {
        let v = vocab();
        assert_eq!(Vocab::from_tsv(&v.to_tsv()).unwrap(), v);
    }

    fn encoder() -> (ParamStore, TextEncoder, Vocab) {
        let v = vocab();
        let mut store = ParamStore::new();
        let cfg = TtConfig { layers: 2, width: 8, heads: 2, ffn: 12, max_len: 6 };
        let enc = TextEncoder::init(&mut store, cfg, v.len(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        (store, enc, v)
    }

    fn encode(store: &ParamStore, enc: &TextEncoder, seqs: &[Vec<u32>]) -> Vec<Vec<f64>> {
        let mut tape = Tape::new();
        let b = store.bind(&mut tape, false);
        let out = enc.forward(&mut tape, &b, seqs).unwrap();
        to_rows(tape.value(out))
    }

    #[test]
    fn zero_w0_gives_zero_embedding() {
        let (mut store, enc, v) = encoder();
        store.get_mut(enc.w0()).data_mut().iter_mut().for_each(|x| *x = 0.0);
        let out = encode(&store, &enc, &[v.tokenize("hans zimmer composed", 6)]);
        assert!(out[0].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn batching_is_transparent() {
        let (store, enc, v) = encoder();
        let texts = ["hans zimmer", "inception film composed", "", "of"];
        let seqs: Vec<Vec<u32>> = texts.iter().map(|t| v.tokenize(t, 6)).collect();
        let batch = encode(&store, &enc, &seqs);
        for (i, s) in seqs.iter().enumerate() {
            assert_eq!(encode(&store, &enc, std::slice::from_ref(s))[0], batch[i]);
        }
    }

    #[test]
    fn padding_content_is_ignored() {
        let (store, enc, v) = encoder();
        let mut ids = v.tokenize("hans", 6);
        let a = encode(&store, &enc, &[ids.clone()]);
        // Anything after the first PAD is padding by definition.
        ids[3] = 5;
        let b = encode(&store, &enc, &[ids]);
        assert_eq!(a, b);
    }
}

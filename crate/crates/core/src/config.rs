//! Training configuration, its TOML schema and the named model presets.

use std::path::Path;

use fnftg_tensor::RAdamConfig;
use serde::{Deserialize, Serialize};

use crate::error::{io_err, CoreError, Result};
use crate::kg::Regime;
use crate::scoring::{NegStrategy, NegVariant};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TtConfig {
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    pub ffn: usize,
    /// Maximum text length `L` in tokens, counting the leading CLS.
    pub max_len: usize,
}

impl Default for TtConfig {
    fn default() -> Self {
        TtConfig { layers: 2, width: 32, heads: 4, ffn: 64, max_len: 24 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GtConfig {
    pub layers: usize,
    pub heads: usize,
    pub ffn: usize,
}

impl Default for GtConfig {
    fn default() -> Self {
        GtConfig { layers: 1, heads: 4, ffn: 64 }
    }
}

/// Feature switches matching the rows of the ablation study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    pub use_rij: bool,
    pub use_segments: bool,
    pub use_subgraphs: bool,
    pub use_rel_conditioning: bool,
    pub inductive_relations: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Ablation {
            use_rij: true,
            use_segments: true,
            use_subgraphs: true,
            use_rel_conditioning: true,
            inductive_relations: true,
        }
    }
}

impl Ablation {
    /// Row label of the ablation table this configuration corresponds to.
    ///
    /// Rows there remove features cumulatively, and relation labels and
    /// segments are meaningless without subgraphs, so those are treated as
    /// removed along with them.
    pub fn label(&self) -> String {
        let rij = self.use_rij && self.use_subgraphs;
        let seg = self.use_segments && self.use_subgraphs;
        let removed = [!rij, !seg, !self.use_subgraphs, !self.use_rel_conditioning];
        let names = [
            "- r_ij",
            "- s_[CENTRE], s_[NEIGHBOUR]",
            "- S(h_TT), S(t_TT)",
            "- [h||r]_KG, [t||r^-1]_KG",
        ];
        let count = removed.iter().filter(|&&r| r).count();
        let mut label = if count == 0 {
            "FnF-TG".to_string()
        } else if removed[..count].iter().all(|&r| r) {
            names[count - 1].to_string()
        } else {
            names.iter().zip(removed).filter(|(_, r)| *r).map(|(n, _)| *n).collect::<Vec<_>>().join(" ")
        };
        if !self.inductive_relations {
            label.push_str(" (fixed relation matrix)");
        }
        label
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        let d = RAdamConfig::default();
        OptimizerConfig { beta1: d.beta1, beta2: d.beta2, eps: d.eps }
    }
}

impl From<OptimizerConfig> for RAdamConfig {
    fn from(c: OptimizerConfig) -> Self {
        RAdamConfig { beta1: c.beta1, beta2: c.beta2, eps: c.eps }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Learning rate at batch size 32; scaled linearly with the batch size.
    pub base_lr: f64,
    pub neighbour_cap: usize,
    pub seed: u64,
    pub margin: f64,
    pub regime: Regime,
    /// Candidate subsample size for per-epoch validation (none = full protocol).
    pub val_candidates_cap: Option<usize>,
    pub validate_every: usize,
    pub negatives: NegStrategy,
    pub text_encoder: TtConfig,
    pub graph_encoder: GtConfig,
    pub ablation: Ablation,
    pub optimizer: OptimizerConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 40,
            batch_size: 32,
            base_lr: 1e-5,
            neighbour_cap: 10,
            seed: 73,
            margin: 1.0,
            regime: Regime::Transfer,
            val_candidates_cap: None,
            validate_every: 1,
            negatives: NegStrategy::default(),
            text_encoder: TtConfig::default(),
            graph_encoder: GtConfig::default(),
            ablation: Ablation::default(),
            optimizer: OptimizerConfig::default(),
        }
    }
}

const TOP_KEYS: &[&str] = &[
    "epochs",
    "batch_size",
    "base_lr",
    "neighbour_cap",
    "seed",
    "margin",
    "regime",
    "val_candidates_cap",
    "validate_every",
    "negatives",
    "text_encoder",
    "graph_encoder",
    "ablation",
    "optimizer",
];

fn table_keys(name: &str) -> Option<&'static [&'static str]> {
    Some(match name {
        "negatives" => &["strategy", "per_positive"],
        "text_encoder" => &["layers", "width", "heads", "ffn", "max_len"],
        "graph_encoder" => &["layers", "heads", "ffn"],
        "ablation" => &["use_rij", "use_segments", "use_subgraphs", "use_rel_conditioning", "inductive_relations"],
        "optimizer" => &["beta1", "beta2", "eps"],
        _ => return None,
    })
}

/// Every key of `doc` that is not part of the schema, as dotted paths.
pub fn unknown_keys(doc: &toml::Table) -> Vec<String> {
    let mut out = Vec::new();
    for (k, v) in doc {
        if !TOP_KEYS.contains(&k.as_str()) {
            out.push(k.clone());
            continue;
        }
        if let (Some(allowed), toml::Value::Table(t)) = (table_keys(k), v) {
            for inner in t.keys() {
                if !allowed.contains(&inner.as_str()) {
                    out.push(format!("{k}.{inner}"));
                }
            }
        }
    }
    out
}

impl TrainConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let doc: toml::Table = s.parse().map_err(|e: toml::de::Error| CoreError::Config(e.to_string()))?;
        let unknown = unknown_keys(&doc);
        if !unknown.is_empty() {
            return Err(CoreError::UnknownKeys(unknown));
        }
        let cfg: TrainConfig = doc.try_into().map_err(|e: toml::de::Error| CoreError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_toml_str(&s)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.epochs < 1 {
            problems.push("epochs must be at least 1".to_string());
        }
        if self.batch_size < 2 {
            problems.push("batch_size must be at least 2".to_string());
        }
        if !(self.base_lr.is_finite() && self.base_lr >= 0.0) {
            problems.push("base_lr must be finite and non-negative".to_string());
        }
        if !(self.margin.is_finite() && self.margin > 0.0) {
            problems.push("margin must be positive".to_string());
        }
        if self.validate_every < 1 {
            problems.push("validate_every must be at least 1".to_string());
        }
        if self.negatives.per_positive < 1 {
            problems.push("negatives.per_positive must be at least 1".to_string());
        }
        let tt = &self.text_encoder;
        if tt.width == 0 || tt.heads == 0 || tt.width % tt.heads != 0 {
            problems.push(format!("text_encoder.width {} must be a positive multiple of heads {}", tt.width, tt.heads));
        }
        if tt.max_len < 1 {
            problems.push("text_encoder.max_len must be at least 1".to_string());
        }
        if tt.ffn == 0 {
            problems.push("text_encoder.ffn must be positive".to_string());
        }
        let gt = &self.graph_encoder;
        if gt.heads == 0 || tt.width % gt.heads != 0 {
            problems.push(format!("graph_encoder.heads {} must divide the width {}", gt.heads, tt.width));
        }
        if gt.ffn == 0 {
            problems.push("graph_encoder.ffn must be positive".to_string());
        }
        let o = &self.optimizer;
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || !(o.eps > 0.0) {
            problems.push("optimizer betas must lie in [0, 1) and eps must be positive".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(CoreError::Config(problems.join("; ")))
        }
    }

    /// Negatives actually drawn per positive for a batch of `batch` triples.
    pub fn negatives_per_positive(&self, batch: usize) -> usize {
        self.negatives.per_positive_for(batch)
    }
}

/// Named starting points. Sizes are desk-scale stand-ins for the pretrained
/// encoders; every field can still be overridden afterwards.
pub fn preset(name: &str) -> Option<TrainConfig> {
    let mut c = TrainConfig::default();
    match name {
        "fnf-tg" => {}
        "fnf-t" => c.ablation.use_subgraphs = false,
        "synthetic-tg" | "synthetic-t" | "synthetic-tg-half" => {
            // Small batches keep the un-rectified first optimizer steps
            // (plain momentum SGD on a summed loss) from wrecking the init.
            c.batch_size = 8;
            c.epochs = 120;
            c.base_lr = 1e-3;
            c.neighbour_cap = 16;
            c.text_encoder = TtConfig { layers: 2, width: 32, heads: 4, ffn: 64, max_len: 12 };
            c.graph_encoder = GtConfig { layers: 1, heads: 4, ffn: 64 };
            c.negatives = NegStrategy { strategy: NegVariant::TwoSidedReflexive, per_positive: 8 };
            if name == "synthetic-t" {
                c.ablation.use_subgraphs = false;
            }
            if name == "synthetic-tg-half" {
                c.text_encoder = TtConfig { layers: 1, width: 16, heads: 2, ffn: 32, max_len: 12 };
                c.graph_encoder = GtConfig { layers: 1, heads: 2, ffn: 32 };
            }
        }
        _ => return None,
    }
    Some(c)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let c = TrainConfig::default();
        let back = TrainConfig::from_toml_str(&c.to_toml_string()).unwrap();
        assert_eq!(c, back);
    }

    #[test]
    fn unknown_keys_are_all_listed() {
        let err = TrainConfig::from_toml_str("epochs = 2\nbogus = 1\n[ablation]\nuse_rij = false\nfoo = true\n")
            .unwrap_err();
        match err {
            CoreError::UnknownKeys(keys) => assert_eq!(keys, vec!["ablation.foo".to_string(), "bogus".to_string()]),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn zero_epochs_rejected() {
        assert!(matches!(TrainConfig::from_toml_str("epochs = 0"), Err(CoreError::Config(_))));
    }

    #[test]
    fn partial_config_fills_defaults() {
        let c = TrainConfig::from_toml_str("batch_size = 64\n[negatives]\nstrategy = \"batch-tied\"\n").unwrap();
        assert_eq!(c.batch_size, 64);
        assert_eq!(c.negatives.strategy, NegVariant::BatchTied);
        assert_eq!(c.negatives_per_positive(64), 64);
        assert_eq!(c.epochs, 40);
    }

    #[test]
    fn ablation_labels_follow_cumulative_rows() {
        let mut a = Ablation::default();
        assert_eq!(a.label(), "FnF-TG");
        a.use_rij = false;
        assert_eq!(a.label(), "- r_ij");
        a.use_segments = false;
        assert_eq!(a.label(), "- s_[CENTRE], s_[NEIGHBOUR]");
        a.use_subgraphs = false;
        assert_eq!(a.label(), "- S(h_TT), S(t_TT)");
        let only_subgraphs = Ablation { use_subgraphs: false, ..Ablation::default() };
        assert_eq!(only_subgraphs.label(), "- S(h_TT), S(t_TT)");
        a.use_rel_conditioning = false;
        assert_eq!(a.label(), "- [h||r]_KG, [t||r^-1]_KG");
    }
}

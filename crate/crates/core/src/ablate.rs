//! Variant sweeps over a base configuration, several seeds each.

use std::fmt;
use std::str::FromStr;

use log::info;
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::model::Fusion;
use crate::synth::Dataset;
use crate::train::{evaluate, train};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Backbone only, trained on labels.
    Baseline,
    /// Depth transformer whose predicted depth is concatenated as a channel.
    ConcatDepth,
    /// Depth transformer with depth attention (the full model).
    Mda,
    /// The attention block with backbone features as queries; no depth.
    SelfAttention,
    /// Depth transformer trained but its output never reaches the backbone.
    MdaBypassed,
    InjectionEarly,
    InjectionMiddle,
    InjectionLate,
}

impl Variant {
    pub const ALL: [Variant; 8] = [
        Variant::Baseline,
        Variant::ConcatDepth,
        Variant::Mda,
        Variant::SelfAttention,
        Variant::MdaBypassed,
        Variant::InjectionEarly,
        Variant::InjectionMiddle,
        Variant::InjectionLate,
    ];
    pub const FUSION: [Variant; 5] = [
        Variant::Baseline,
        Variant::ConcatDepth,
        Variant::Mda,
        Variant::SelfAttention,
        Variant::MdaBypassed,
    ];
    pub const INJECTION: [Variant; 3] = [Variant::InjectionEarly, Variant::InjectionMiddle, Variant::InjectionLate];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::ConcatDepth => "concat-depth",
            Variant::Mda => "mda",
            Variant::SelfAttention => "self-attention",
            Variant::MdaBypassed => "mda-bypassed",
            Variant::InjectionEarly => "injection-early",
            Variant::InjectionMiddle => "injection-middle",
            Variant::InjectionLate => "injection-late",
        }
    }

    /// The base config with this variant's toggles applied.
    pub fn apply(self, base: &TrainConfig) -> TrainConfig {
        let mut c = base.clone();
        let (use_fdmt, fusion) = match self {
            Variant::Baseline => (false, Fusion::None),
            Variant::ConcatDepth => (true, Fusion::ConcatDepth),
            Variant::SelfAttention => (false, Fusion::SelfAttention),
            Variant::MdaBypassed => (true, Fusion::None),
            _ => (true, Fusion::Mda),
        };
        c.use_fdmt = use_fdmt;
        c.fusion = fusion;
        if c.staged_epochs > 0 && !use_fdmt {
            c.staged_epochs = 0;
        }
        let blocks = base.model_config().backbone.blocks.len();
        c.injection_index = match self {
            Variant::InjectionEarly => Some(1),
            Variant::InjectionMiddle => Some(blocks / 2),
            Variant::InjectionLate => Some(blocks - 1),
            _ => base.injection_index,
        };
        c
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::config(format!("unknown ablation variant `{s}`")))
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub acc: f64,
    pub auc: f64,
    pub best_epoch: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantRow {
    pub variant: Variant,
    pub injection_index: usize,
    pub runs: Vec<SeedResult>,
    pub acc_mean: f64,
    pub acc_std: f64,
    pub auc_mean: f64,
    pub auc_std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub split: String,
    pub rows: Vec<VariantRow>,
}

/// Mean and sample standard deviation (`n - 1` denominator; zero for one value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

impl AblationTable {
    pub fn row(&self, v: Variant) -> Option<&VariantRow> {
        self.rows.iter().find(|r| r.variant == v)
    }

    pub fn to_markdown(&self) -> String {
        let mut out = format!(
            "| variant | inject | seeds | {0} ACC | {0} AUC |\n|---|---|---|---|---|\n",
            self.split
        );
        for r in &self.rows {
            out.push_str(&format!(
                "| {} | {} | {} | {:.4} ± {:.4} | {:.4} ± {:.4} |\n",
                r.variant,
                r.injection_index,
                r.runs.len(),
                r.acc_mean,
                r.acc_std,
                r.auc_mean,
                r.auc_std
            ));
        }
        out
    }
}

/// Train every variant once per seed (`base.seed + k`) and evaluate the
/// selected checkpoint on the test split.
pub fn ablate(base: &TrainConfig, dataset: &Dataset, variants: &[Variant], seeds: usize) -> Result<AblationTable> {
    if variants.is_empty() || seeds == 0 {
        return Err(Error::config("ablation needs at least one variant and one seed"));
    }
    let mut rows = Vec::with_capacity(variants.len());
    for &v in variants {
        let cfg = v.apply(base);
        cfg.validate()?;
        let mut runs = Vec::with_capacity(seeds);
        for k in 0..seeds as u64 {
            let run_cfg = TrainConfig {
                seed: base.seed + k,
                ..cfg.clone()
            };
            let out = train(&run_cfg, dataset, None)?;
            let m = evaluate(&out.best, &dataset.test, "test")?;
            info!("ablation {v} seed {}: acc {:.4} auc {:.4}", run_cfg.seed, m.acc, m.auc);
            runs.push(SeedResult {
                seed: run_cfg.seed,
                acc: m.acc,
                auc: m.auc,
                best_epoch: out.log.best_epoch,
            });
        }
        let (acc_mean, acc_std) = mean_std(&runs.iter().map(|r| r.acc).collect::<Vec<_>>());
        let (auc_mean, auc_std) = mean_std(&runs.iter().map(|r| r.auc).collect::<Vec<_>>());
        rows.push(VariantRow {
            variant: v,
            injection_index: cfg.model_config().backbone.injection_index,
            runs,
            acc_mean,
            acc_std,
            auc_mean,
            auc_std,
        });
    }
    Ok(AblationTable {
        split: "test".into(),
        rows,
    })
}

//! Trains model variants on shared data and tabulates their scores.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::Serialize;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::metrics::{EvalReport, PREC_THRESHOLDS};
use crate::segnet::Modulation;
use crate::train::{evaluate, prepare_data, train_on};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// 1×1 kernels on the expanding path only.
    Lingunet1x1,
    /// 3×3 kernels on the expanding path only.
    Lingunet3x3,
    /// 1×1 kernels on both paths.
    TextKernels1x1,
    /// 3×3 kernels on both paths.
    Full,
    /// The full model trained without auxiliary loss terms.
    NoMultiscale,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Lingunet1x1,
        Variant::Lingunet3x3,
        Variant::TextKernels1x1,
        Variant::Full,
        Variant::NoMultiscale,
    ];

    pub fn key(self) -> &'static str {
        match self {
            Variant::Lingunet1x1 => "lingunet-1x1",
            Variant::Lingunet3x3 => "lingunet-3x3",
            Variant::TextKernels1x1 => "text-kernels-1x1",
            Variant::Full => "full",
            Variant::NoMultiscale => "no-multiscale",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Variant::Lingunet1x1 => "LingUNet (1x1)",
            Variant::Lingunet3x3 => "LingUNet (3x3)",
            Variant::TextKernels1x1 => "1x1 Text Kernels",
            Variant::Full => "Our Model",
            Variant::NoMultiscale => "No Multi-Scale Loss",
        }
    }

    /// `base` with this variant's kernel width, modulation and loss.
    pub fn apply(self, base: &RunConfig) -> RunConfig {
        let mut cfg = base.clone();
        let (spatial, modulation, multiscale) = match self {
            Variant::Lingunet1x1 => (1, Modulation::ExpandingOnly, true),
            Variant::Lingunet3x3 => (3, Modulation::ExpandingOnly, true),
            Variant::TextKernels1x1 => (1, Modulation::Bidirectional, true),
            Variant::Full => (3, Modulation::Bidirectional, true),
            Variant::NoMultiscale => (3, Modulation::Bidirectional, false),
        };
        cfg.net.text_kernel_spatial = spatial;
        cfg.net.modulation = modulation;
        cfg.objective.multiscale = multiscale;
        cfg
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.key() == s.trim())
            .ok_or_else(|| {
                let keys: Vec<&str> = Variant::ALL.iter().map(|v| v.key()).collect();
                Error::Config(format!(
                    "unknown variant `{s}` (expected one of {})",
                    keys.join(", ")
                ))
            })
    }
}

pub fn parse_variants(list: &str) -> Result<Vec<Variant>> {
    list.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(str::parse)
        .collect()
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub label: &'static str,
    pub best_val_iou: f64,
    /// Test-split scores of the best-validation checkpoint.
    pub test: EvalReport,
    /// Test-split pooled IoU over relational expressions.
    pub relational_iou: Option<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, v: Variant) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == v)
    }

    /// Plain-text table: one row per variant, precision columns then IoU.
    pub fn render(&self) -> String {
        let mut out = format!("{:<22}", "Method");
        for t in PREC_THRESHOLDS {
            let _ = write!(out, " {:>8}", format!("prec@{t:.1}"));
        }
        let _ = writeln!(out, " {:>8} {:>8}", "IoU", "rel-IoU");
        for r in &self.rows {
            let _ = write!(out, "{:<22}", r.label);
            for &(_, p) in &r.test.precision {
                let _ = write!(out, " {:>8.2}", 100.0 * p);
            }
            let rel = r
                .relational_iou
                .map_or("-".to_string(), |v| format!("{:.2}", 100.0 * v));
            let _ = writeln!(out, " {:>8.2} {:>8}", 100.0 * r.test.overall_iou, rel);
        }
        out
    }
}

/// Trains every variant on the same data and seed, writing each run under
/// `out_dir/<variant key>` when given.
pub fn ablate(
    base: &RunConfig,
    variants: &[Variant],
    out_dir: Option<&Path>,
) -> Result<AblationTable> {
    if variants.len() < 2 {
        return Err(Error::Config(
            "an ablation needs at least two variants".into(),
        ));
    }
    base.validate()?;
    let splits = prepare_data(base)?;
    let mut rows = Vec::with_capacity(variants.len());
    for &v in variants {
        let cfg = v.apply(base);
        let dir = out_dir.map(|d| d.join(v.key()));
        let run = train_on(&cfg, splits.clone(), dir.as_deref()).map_err(|e| e.context(v.key()))?;
        let (net, params) = run.best.model()?;
        let eval = evaluate(
            &net,
            params,
            &run.best.vocab,
            &splits.test,
            cfg.eval_threshold,
        )?;
        rows.push(AblationRow {
            variant: v,
            label: v.label(),
            best_val_iou: run.best.best_val.unwrap_or(0.0),
            test: eval.report,
            relational_iou: eval.relational_iou,
        });
    }
    Ok(AblationTable { rows })
}

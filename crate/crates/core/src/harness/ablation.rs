//! Module-effectiveness sweeps. A row is a `+`-joined set of toggles applied
//! on top of a baseline with every module off; rows are separated by `;`.
//! `table4` expands to the six standard rows.

use rayon::prelude::*;
use serde::Serialize;

use super::config::ExperimentConfig;
use super::eval::Metrics;
use super::report::RunReport;
use super::run_experiment;
use crate::error::{Error, Result};
use crate::lmoe::{FEATURE_ROUTED, LANGUAGE_GUIDED};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub enum Toggle {
    /// LMoE blocks replace the feed-forward blocks (feature-routed unless `GuidedRouter`).
    Moe,
    /// Language-guided router inputs.
    GuidedRouter,
    Distill,
    Align,
}

impl Toggle {
    pub const ALL: [Toggle; 4] = [Toggle::Moe, Toggle::GuidedRouter, Toggle::Distill, Toggle::Align];

    pub fn as_str(self) -> &'static str {
        match self {
            Toggle::Moe => "moe",
            Toggle::GuidedRouter => "guided_router",
            Toggle::Distill => "distill",
            Toggle::Align => "align",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown toggle `{s}` (available: moe, guided_router, distill, align)")))
    }
}

pub const TABLE4: &str = "distill;moe;moe+guided_router;moe+guided_router+distill;moe+guided_router+distill+align";

/// A named set of enabled toggles.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct RowSpec {
    pub toggles: Vec<Toggle>,
}

impl RowSpec {
    pub fn baseline() -> Self {
        Self { toggles: Vec::new() }
    }

    pub fn name(&self) -> String {
        if self.toggles.is_empty() {
            "baseline".into()
        } else {
            self.toggles.iter().map(|t| t.as_str()).collect::<Vec<_>>().join("+")
        }
    }

    pub fn has(&self, t: Toggle) -> bool {
        self.toggles.contains(&t)
    }

    /// `base` with the four module switches set from this row.
    pub fn apply(&self, base: &ExperimentConfig) -> ExperimentConfig {
        let mut cfg = base.clone();
        cfg.name = format!("{}/{}", base.name, self.name());
        cfg.model.moe = self.has(Toggle::Moe);
        cfg.model.moe_layers = None;
        cfg.model.router = if self.has(Toggle::GuidedRouter) { LANGUAGE_GUIDED } else { FEATURE_ROUTED }.into();
        cfg.losses.distill = self.has(Toggle::Distill);
        cfg.losses.align = self.has(Toggle::Align);
        cfg
    }
}

/// Parses a toggle list. The baseline row is always first; an empty list
/// yields the baseline alone.
pub fn parse_toggles(spec: &str) -> Result<Vec<RowSpec>> {
    let spec = spec.trim();
    let spec = if spec == "table4" { TABLE4 } else { spec };
    let mut rows = vec![RowSpec::baseline()];
    for row in spec.split(';').map(str::trim).filter(|r| !r.is_empty()) {
        if row == "baseline" {
            continue;
        }
        let mut toggles = row.split('+').map(|t| Toggle::parse(t.trim())).collect::<Result<Vec<_>>>()?;
        toggles.sort();
        toggles.dedup();
        if toggles.contains(&Toggle::GuidedRouter) && !toggles.contains(&Toggle::Moe) {
            return Err(Error::Config(format!("row `{row}`: guided_router requires moe")));
        }
        rows.push(RowSpec { toggles });
    }
    Ok(rows)
}

/// Headline numbers of one row.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct Summary {
    pub overall: Option<f64>,
    pub many: Option<f64>,
    pub medium: Option<f64>,
    pub few: Option<f64>,
    pub center_l1: Option<f64>,
    /// Mean over LMoE layers of the mean per-class purity.
    pub mean_purity: Option<f64>,
}

impl Summary {
    pub fn from_metrics(m: &Metrics) -> Self {
        let group = |g: &str| m.groups.get(g).and_then(|x| x.accuracy);
        let purities: Vec<f64> = m.routing.iter().filter_map(|r| r.mean_purity).collect();
        Self {
            overall: m.overall_accuracy,
            many: group("many"),
            medium: group("medium"),
            few: group("few"),
            center_l1: m.center_l1,
            mean_purity: (!purities.is_empty()).then(|| purities.iter().sum::<f64>() / purities.len() as f64),
        }
    }

    /// Entry-wise `self − base`; absent where either side is absent.
    pub fn minus(&self, base: &Summary) -> Summary {
        let d = |a: Option<f64>, b: Option<f64>| a.zip(b).map(|(a, b)| a - b);
        Summary {
            overall: d(self.overall, base.overall),
            many: d(self.many, base.many),
            medium: d(self.medium, base.medium),
            few: d(self.few, base.few),
            center_l1: d(self.center_l1, base.center_l1),
            mean_purity: d(self.mean_purity, base.mean_purity),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationRow {
    pub name: String,
    pub spec: RowSpec,
    pub summary: Summary,
    pub delta: Summary,
    #[serde(skip)]
    pub run: RunReport,
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

/// Trains and evaluates every row with the base config's seeds. Rows run in
/// parallel; each is deterministic on its own, so the result is too.
pub fn ablation_run(base: &ExperimentConfig, rows: &[RowSpec]) -> Result<AblationReport> {
    base.validate()?;
    let runs = rows
        .par_iter()
        .map(|r| run_experiment(&r.apply(base)))
        .collect::<Result<Vec<_>>>()?;
    let base_summary = runs.first().map(|r| Summary::from_metrics(&r.metrics)).unwrap_or_default();
    let rows = rows
        .iter()
        .zip(runs)
        .map(|(spec, run)| {
            let summary = Summary::from_metrics(&run.metrics);
            AblationRow {
                name: spec.name(),
                spec: spec.clone(),
                delta: summary.minus(&base_summary),
                summary,
                run,
            }
        })
        .collect();
    Ok(AblationReport { rows })
}

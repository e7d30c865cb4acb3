//! Ablation sweeps: several model variants trained with a shared seed set on
//! one dataset.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use log::info;
use serde::{Deserialize, Serialize};

use crate::config::{KeyValue, RunConfig};
use crate::error::{PctError, Result};
use crate::pipeline::{evaluate, stage_separability, train, MetricsReport};
use crate::probe::ProbeConfig;
use crate::synth::Dataset;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    /// CT before every stage with the base head count.
    Pct,
    NoCt,
    /// CT before stage `k` only.
    CtAtStage(usize),
    /// CT before every stage with `H` heads.
    Heads(usize),
}

impl Variant {
    pub fn apply(&self, base: &RunConfig) -> RunConfig {
        let t = base.stage_widths.len();
        let mut cfg = base.clone();
        match *self {
            Variant::Pct => cfg.ct_stages = vec![true; t],
            Variant::NoCt => cfg.ct_stages = vec![false; t],
            Variant::CtAtStage(k) => cfg.ct_stages = (0..t).map(|i| i == k).collect(),
            Variant::Heads(h) => {
                cfg.ct_stages = vec![true; t];
                cfg.heads = h;
            }
        }
        cfg
    }

    /// No CT, CT at each single stage, CT everywhere, and the head counts
    /// 1 and 4 (the base configuration uses 2).
    pub fn default_grid(num_stages: usize) -> Vec<Variant> {
        let mut v = vec![Variant::NoCt];
        v.extend((0..num_stages).map(Variant::CtAtStage));
        v.extend([Variant::Pct, Variant::Heads(1), Variant::Heads(4)]);
        v
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Variant::Pct => f.write_str("pct"),
            Variant::NoCt => f.write_str("no-ct"),
            Variant::CtAtStage(k) => write!(f, "ct-stage-{k}"),
            Variant::Heads(h) => write!(f, "heads-{h}"),
        }
    }
}

impl FromStr for Variant {
    type Err = PctError;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || PctError::Config(format!("unknown variant {s:?}; expected pct, no-ct, ct-stage-K or heads-H"));
        match s {
            "pct" => Ok(Variant::Pct),
            "no-ct" => Ok(Variant::NoCt),
            _ => {
                if let Some(k) = s.strip_prefix("ct-stage-") {
                    k.parse().map(Variant::CtAtStage).map_err(|_| bad())
                } else if let Some(h) = s.strip_prefix("heads-") {
                    match h.parse() {
                        Ok(h) if h > 0 => Ok(Variant::Heads(h)),
                        _ => Err(bad()),
                    }
                } else {
                    Err(bad())
                }
            }
        }
    }
}

/// Parses a comma-separated variant list.
pub fn parse_variants(list: &str) -> Result<Vec<Variant>> {
    list.split(',').map(|s| s.trim().parse()).collect()
}

/// One trained and evaluated (variant, seed) cell, or the mean over seeds
/// when `seed` is `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub seed: Option<u64>,
    pub accuracies: Vec<f64>,
    pub ave: f64,
    pub std: f64,
    /// `(target_fpr, bias_degree)` for every feasible target.
    pub bias_degree: Vec<(f64, f64)>,
    /// Group-probe accuracy on identity features after each stage.
    pub stage_separability: Vec<f64>,
    pub wall_secs: f64,
}

impl AblationRow {
    pub fn from_metrics(variant: &Variant, seed: u64, m: &MetricsReport, separability: Vec<f64>, wall_secs: f64) -> Self {
        Self {
            variant: variant.to_string(),
            seed: Some(seed),
            accuracies: m.accuracy.metrics.values.clone(),
            ave: m.accuracy.metrics.ave,
            std: m.accuracy.metrics.std,
            bias_degree: m
                .fpr
                .iter()
                .map(|p| (p.target_fpr, p.metrics.bias_degree.unwrap_or(f64::NAN)))
                .collect(),
            stage_separability: separability,
            wall_secs,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub groups: Vec<String>,
    pub seeds: Vec<u64>,
    /// Per-seed rows in run order, then one aggregate row per variant.
    pub rows: Vec<AblationRow>,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

fn mean_columns<'a>(rows: impl Iterator<Item = &'a Vec<f64>> + Clone) -> Vec<f64> {
    let width = rows.clone().map(Vec::len).next().unwrap_or(0);
    (0..width).map(|i| mean(rows.clone().map(|r| r[i]))).collect()
}

impl AblationTable {
    pub fn per_seed(&self, variant: &Variant) -> Vec<&AblationRow> {
        let name = variant.to_string();
        self.rows.iter().filter(|r| r.variant == name && r.seed.is_some()).collect()
    }

    pub fn aggregate(&self, variant: &Variant) -> Option<&AblationRow> {
        let name = variant.to_string();
        self.rows.iter().find(|r| r.variant == name && r.seed.is_none())
    }

    /// Seeds on which `variant` has strictly lower group-accuracy STD than
    /// `baseline`, out of the seeds both were run on.
    pub fn std_wins(&self, variant: &Variant, baseline: &Variant) -> (usize, usize) {
        let base = self.per_seed(baseline);
        let mut wins = 0;
        let mut total = 0;
        for r in self.per_seed(variant) {
            if let Some(b) = base.iter().find(|b| b.seed == r.seed) {
                total += 1;
                if r.std < b.std {
                    wins += 1;
                }
            }
        }
        (wins, total)
    }

    fn push_aggregates(&mut self, variants: &[Variant]) {
        for v in variants {
            let rows = self.per_seed(v);
            if rows.is_empty() {
                continue;
            }
            let agg = AblationRow {
                variant: v.to_string(),
                seed: None,
                accuracies: mean_columns(rows.iter().map(|r| &r.accuracies)),
                ave: mean(rows.iter().map(|r| r.ave)),
                std: mean(rows.iter().map(|r| r.std)),
                bias_degree: {
                    let targets: Vec<f64> = rows[0].bias_degree.iter().map(|b| b.0).collect();
                    let values: Vec<Vec<f64>> = rows.iter().map(|r| r.bias_degree.iter().map(|b| b.1).collect()).collect();
                    targets.into_iter().zip(mean_columns(values.iter())).collect()
                },
                stage_separability: mean_columns(rows.iter().map(|r| &r.stage_separability)),
                wall_secs: rows.iter().map(|r| r.wall_secs).sum(),
            };
            self.rows.push(agg);
        }
    }

    /// One line per row; `seed` is `mean` on aggregate rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("variant,seed");
        for g in &self.groups {
            write!(out, ",acc_{g}").expect("writing to a String");
        }
        out.push_str(",ave,std");
        if let Some(r) = self.rows.first() {
            for (t, _) in &r.bias_degree {
                write!(out, ",bias_degree@{t}").expect("writing to a String");
            }
            for k in 0..r.stage_separability.len() {
                write!(out, ",separability_stage_{k}").expect("writing to a String");
            }
        }
        out.push_str(",wall_secs\n");
        for r in &self.rows {
            let seed = r.seed.map_or_else(|| "mean".to_string(), |s| s.to_string());
            write!(out, "{},{seed}", r.variant).expect("writing to a String");
            let values = r
                .accuracies
                .iter()
                .chain([&r.ave, &r.std])
                .copied()
                .chain(r.bias_degree.iter().map(|b| b.1))
                .chain(r.stage_separability.iter().copied())
                .chain([r.wall_secs]);
            for v in values {
                write!(out, ",{v:.4}").expect("writing to a String");
            }
            out.push('\n');
        }
        out
    }
}

/// Trains and evaluates every variant for every seed. The seed replaces
/// `base.seed`, so variants share initialization and batch order streams.
/// `on_row` sees each per-seed row as soon as it is ready.
pub fn run_ablation(
    base: &RunConfig,
    variants: &[Variant],
    seeds: &[u64],
    ds: &Dataset,
    fpr_grid: &[f64],
    mut on_row: impl FnMut(&AblationRow),
) -> Result<AblationTable> {
    if variants.is_empty() || seeds.is_empty() {
        return Err(PctError::Config("ablation needs at least one variant and one seed".into()));
    }
    for v in variants {
        v.apply(base).validate()?;
    }
    let mut table = AblationTable {
        groups: (0..ds.spec.num_groups).map(|g| format!("group_{g}")).collect(),
        seeds: seeds.to_vec(),
        rows: Vec::new(),
    };
    for v in variants {
        for &seed in seeds {
            let cfg = RunConfig { seed, ..v.apply(base) };
            let run = train(&cfg, ds)?;
            let m = evaluate(&run.model, ds, fpr_grid)?;
            let sep = stage_separability(&run.model, ds, &ProbeConfig::default())?;
            let row = AblationRow::from_metrics(v, seed, &m, sep, run.wall_secs);
            info!("{v} seed {seed}: ave {:.4} std {:.4}", row.ave, row.std);
            on_row(&row);
            table.rows.push(row);
        }
    }
    table.push_aggregates(variants);
    Ok(table)
}

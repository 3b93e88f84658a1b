use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{aligned_table, MetricsReport};
use crate::config::parse_kv;
use crate::error::{Error, Result};
use crate::guidance::{run_guided_sampling, GuidanceConfig};
use crate::model::ToyModel;
use crate::prior::SpatialPriorSet;
use crate::syntax::ParsedPrompt;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepMode {
    /// Vary one axis at a time around the base config.
    #[default]
    OneAtATime,
    Cartesian,
}

impl FromStr for SweepMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "one_at_a_time" => Ok(Self::OneAtATime),
            "cartesian" => Ok(Self::Cartesian),
            other => Err(Error::Input(format!("unknown sweep mode {other:?}"))),
        }
    }
}

impl fmt::Display for SweepMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::OneAtATime => "one_at_a_time",
            Self::Cartesian => "cartesian",
        })
    }
}

/// One swept config field and its values, as accepted by
/// [`GuidanceConfig::set`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Axis {
    pub key: String,
    pub values: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct AblationGrid {
    pub axes: Vec<Axis>,
    pub mode: SweepMode,
}

impl AblationGrid {
    /// Time steps, iteration counts, loss weights, distance, contrastive
    /// form and attention layer, at the increments studied for the method.
    pub fn appendix() -> Self {
        let axis = |key: &str, values: &[&str]| Axis {
            key: key.into(),
            values: values.iter().map(|v| v.to_string()).collect(),
        };
        Self {
            axes: vec![
                axis("t1", &["1", "3", "5", "7"]),
                axis("iters_spatial", &["5", "10", "15"]),
                axis("lambda_sp", &["10", "20", "30", "40"]),
                axis("t2", &["15", "20", "25", "30"]),
                axis("iters_syntax", &["1", "2", "3"]),
                axis("lambda_syt", &["10", "20", "30"]),
                axis("distance", &["cosine", "kl_sym"]),
                axis("contrastive", &["ratio", "sum"]),
                axis("layer", &["down", "up", "mid", "down+up"]),
            ],
            mode: SweepMode::OneAtATime,
        }
    }

    /// Parses `key = v1, v2, ...` lines plus an optional `mode = ...` line.
    pub fn parse(text: &str) -> Result<Self> {
        let mut grid = Self::default();
        for (line, key, value) in parse_kv(text)? {
            if key == "mode" {
                grid.mode = value.parse().map_err(|e: Error| Error::parse(line, e.to_string()))?;
                continue;
            }
            if !GuidanceConfig::KEYS.contains(&key.as_str()) {
                return Err(Error::parse(line, format!("unknown config field {key:?}")));
            }
            let values: Vec<String> = value
                .split(',')
                .map(|v| v.trim().to_string())
                .filter(|v| !v.is_empty())
                .collect();
            if values.is_empty() {
                return Err(Error::parse(line, format!("axis {key:?} has no values")));
            }
            // catch bad values up front rather than skipping every row later
            for v in &values {
                GuidanceConfig::default()
                    .set(&key, v)
                    .map_err(|e| Error::parse(line, e.to_string()))?;
            }
            grid.axes.push(Axis { key, values });
        }
        Ok(grid)
    }

    /// `(label, overrides)` per config, in sweep order.
    pub fn points(&self) -> Vec<(String, Vec<(String, String)>)> {
        if self.axes.is_empty() {
            return vec![("base".into(), Vec::new())];
        }
        match self.mode {
            SweepMode::OneAtATime => self
                .axes
                .iter()
                .flat_map(|a| {
                    a.values
                        .iter()
                        .map(|v| (format!("{}={v}", a.key), vec![(a.key.clone(), v.clone())]))
                })
                .collect(),
            SweepMode::Cartesian => {
                let mut points: Vec<Vec<(String, String)>> = vec![Vec::new()];
                for a in &self.axes {
                    points = points
                        .into_iter()
                        .flat_map(|p| {
                            a.values.iter().map(move |v| {
                                let mut q = p.clone();
                                q.push((a.key.clone(), v.clone()));
                                q
                            })
                        })
                        .collect();
                }
                points
                    .into_iter()
                    .map(|p| {
                        let label = p.iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join(",");
                        (label, p)
                    })
                    .collect()
            }
        }
    }
}

/// Metrics of one (config, seed) run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub config_index: usize,
    pub label: String,
    pub seed: u64,
    /// Mean noun in-box ratio at the end of step `max(t1, 1)`.
    pub in_box_t1: f64,
    /// Mean symmetric-KL noun/verb alignment at the end of step `max(t2, 1)`.
    pub alignment_t2: f64,
    pub final_in_box: f64,
    pub final_alignment: f64,
    pub final_components: f64,
    pub config: GuidanceConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Skipped {
    pub config_index: usize,
    pub label: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AblationTable {
    /// Sorted by config index, then seed.
    pub rows: Vec<AblationRow>,
    pub skipped: Vec<Skipped>,
}

impl AblationTable {
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.rows {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn to_table(&self) -> String {
        let rows: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| {
                vec![
                    r.config_index.to_string(),
                    r.label.clone(),
                    r.seed.to_string(),
                    format!("{:.6}", r.in_box_t1),
                    format!("{:.6}", r.alignment_t2),
                    format!("{:.6}", r.final_in_box),
                    format!("{:.6}", r.final_alignment),
                    format!("{:.3}", r.final_components),
                ]
            })
            .collect();
        aligned_table(
            &["idx", "config", "seed", "in_box_t1", "align_t2", "in_box_final", "align_final", "components"],
            &rows,
        )
    }
}

fn run_row(
    index: usize,
    label: &str,
    config: &GuidanceConfig,
    prompt: &ParsedPrompt,
    priors: &SpatialPriorSet,
    model: &ToyModel,
    seed: u64,
) -> Result<AblationRow> {
    let run = run_guided_sampling(prompt, priors, config, model, seed)?;
    let at = |step: usize| MetricsReport::evaluate(label, seed, step, run.ca_at(step)?, &run.problem, config);
    let t1 = at(config.t1.max(1))?;
    let t2 = at(config.t2.max(1))?;
    let last = at(config.total_steps)?;
    Ok(AblationRow {
        config_index: index,
        label: label.to_string(),
        seed,
        in_box_t1: t1.mean_in_box,
        alignment_t2: t2.mean_alignment,
        final_in_box: last.mean_in_box,
        final_alignment: last.mean_alignment,
        final_components: last.mean_components,
        config: config.clone(),
    })
}

/// Runs every grid point for every seed in parallel. `on_row` sees rows
/// in completion order; the returned table is sorted. Grid points whose
/// config fails validation are skipped with a logged reason; a failing run
/// aborts the sweep.
pub fn run_ablation(
    grid: &AblationGrid,
    base: &GuidanceConfig,
    prompt: &ParsedPrompt,
    priors: &SpatialPriorSet,
    model: &ToyModel,
    seeds: &[u64],
    on_row: &(dyn Fn(&AblationRow) + Sync),
) -> Result<AblationTable> {
    let mut skipped = Vec::new();
    let mut jobs = Vec::new();
    for (index, (label, overrides)) in grid.points().into_iter().enumerate() {
        let mut cfg = base.clone();
        let applied = overrides
            .iter()
            .try_for_each(|(k, v)| cfg.set(k, v))
            .and_then(|_| cfg.validate());
        match applied {
            Ok(()) => {
                for &seed in seeds {
                    jobs.push((index, label.clone(), cfg.clone(), seed));
                }
            }
            Err(e) => {
                log::warn!("skipping {label}: {e}");
                skipped.push(Skipped {
                    config_index: index,
                    label,
                    reason: e.to_string(),
                });
            }
        }
    }
    let mut rows = jobs
        .par_iter()
        .map(|(index, label, cfg, seed)| {
            let row = run_row(*index, label, cfg, prompt, priors, model, *seed)
                .map_err(|e| Error::Evaluation(format!("{label} seed {seed}: {e}")))?;
            on_row(&row);
            Ok(row)
        })
        .collect::<Result<Vec<_>>>()?;
    rows.sort_by_key(|r| (r.config_index, r.seed));
    Ok(AblationTable { rows, skipped })
}

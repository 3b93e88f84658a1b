//! Attention-level evaluation: in-box mass, connected-component counts,
//! noun/verb map alignment, PGM heatmaps and the ablation sweep runner.
//!
//! The component count is a proxy for how many instances of a subject the
//! attention suggests; it is not a detector.

mod ablation;

use std::collections::VecDeque;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::guidance::{loss_pos, Distance, GuidanceConfig, GuidanceProblem};
use crate::model::CAMapStack;
use crate::numerics::Tape;
use crate::prior::MaskSet;
use crate::syntax::Pair;

pub use ablation::{run_ablation, AblationGrid, AblationRow, AblationTable, Axis, SweepMode};

/// Fraction of token `token`'s attention mass in `frame` that falls inside
/// its mask.
pub fn in_box_ratio(ca: &CAMapStack, masks: &MaskSet, token: usize, frame: usize) -> Result<f64> {
    let map = ca.token_map(token, frame)?;
    let mask = masks
        .frame(token, frame)
        .ok_or_else(|| Error::Input(format!("no mask for token {token} frame {frame}")))?;
    if mask.len() != map.len() {
        return Err(Error::dim("in_box_ratio", &[map.len()], &[mask.len()]));
    }
    let total: f64 = map.iter().sum();
    if !(total > 0.0) {
        return Err(Error::DegenerateAttention { token, frame });
    }
    let inside: f64 = map.iter().zip(mask).map(|(a, m)| a * m).sum();
    Ok(inside / total)
}

/// Number of 4-connected regions of cells with value `>= rel_threshold * max`.
pub fn count_components(ca: &CAMapStack, token: usize, frame: usize, rel_threshold: f64) -> Result<usize> {
    if !(rel_threshold > 0.0 && rel_threshold < 1.0) {
        return Err(Error::Input(format!("rel_threshold must be in (0, 1), got {rel_threshold}")));
    }
    let map = ca.token_map(token, frame)?;
    Ok(count_grid_components(&map, ca.grid_h, ca.grid_w, rel_threshold))
}

pub fn count_grid_components(map: &[f64], grid_h: usize, grid_w: usize, rel_threshold: f64) -> usize {
    let max = map.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let cut = rel_threshold * max;
    let on: Vec<bool> = map.iter().map(|&v| v >= cut).collect();
    let mut seen = vec![false; map.len()];
    let mut count = 0;
    for start in 0..map.len() {
        if !on[start] || seen[start] {
            continue;
        }
        count += 1;
        seen[start] = true;
        let mut queue = VecDeque::from([start]);
        while let Some(cell) = queue.pop_front() {
            let (r, c) = (cell / grid_w, cell % grid_w);
            let mut visit = |nr: usize, nc: usize| {
                let k = nr * grid_w + nc;
                if on[k] && !seen[k] {
                    seen[k] = true;
                    queue.push_back(k);
                }
            };
            if r > 0 {
                visit(r - 1, c);
            }
            if r + 1 < grid_h {
                visit(r + 1, c);
            }
            if c > 0 {
                visit(r, c - 1);
            }
            if c + 1 < grid_w {
                visit(r, c + 1);
            }
        }
    }
    count
}

/// Mean over frames of `dist(A_noun, A_verb)`; lower means better bound.
pub fn verb_noun_alignment(ca: &CAMapStack, pair: Pair, kind: Distance, eps: f64) -> Result<f64> {
    let tape = Tape::new();
    loss_pos(&ca.on_tape(&tape), pair, kind, eps)?.item()
}

/// Binary PGM (P5) of a `grid_h x grid_w` map, min-max normalised to
/// `0..=255` and upscaled by pixel replication. A constant map is all zeros.
pub fn heatmap_pgm(map: &[f64], grid_h: usize, grid_w: usize, upscale: usize) -> Result<Vec<u8>> {
    if upscale == 0 {
        return Err(Error::Input("upscale must be at least 1".into()));
    }
    if map.len() != grid_h * grid_w {
        return Err(Error::dim("heatmap", &[map.len()], &[grid_h, grid_w]));
    }
    let lo = map.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = map.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let level = |v: f64| -> u8 {
        if hi > lo {
            (((v - lo) / (hi - lo)) * 255.0).round() as u8
        } else {
            0
        }
    };
    let (h, w) = (grid_h * upscale, grid_w * upscale);
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    for y in 0..h {
        for x in 0..w {
            out.push(level(map[(y / upscale) * grid_w + x / upscale]));
        }
    }
    Ok(out)
}

pub fn render_heatmap(ca: &CAMapStack, token: usize, frame: usize, out_path: &Path, upscale: usize) -> Result<()> {
    let map = ca.token_map(token, frame)?;
    let bytes = heatmap_pgm(&map, ca.grid_h, ca.grid_w, upscale)?;
    std::fs::write(out_path, bytes)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InBox {
    pub token: usize,
    pub frame: usize,
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Alignment {
    pub noun: usize,
    pub verb: usize,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Components {
    pub token: usize,
    pub frame: usize,
    pub count: usize,
}

/// Metrics of one attention record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub run: String,
    pub seed: u64,
    pub step: usize,
    /// Noun and verb tokens, every frame.
    pub in_box: Vec<InBox>,
    /// Symmetric-KL alignment per pair.
    pub alignment: Vec<Alignment>,
    /// Attention-level subject-count proxy per noun and frame.
    pub components: Vec<Components>,
    /// Mean in-box ratio over nouns and frames.
    pub mean_in_box: f64,
    pub mean_alignment: f64,
    pub mean_components: f64,
    pub config: GuidanceConfig,
}

pub const COMPONENT_THRESHOLD: f64 = 0.5;

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

impl MetricsReport {
    pub fn evaluate(
        run: impl Into<String>,
        seed: u64,
        step: usize,
        ca: &CAMapStack,
        problem: &GuidanceProblem,
        config: &GuidanceConfig,
    ) -> Result<Self> {
        let mut in_box = Vec::new();
        let mut components = Vec::new();
        let mut alignment = Vec::new();
        let nouns: Vec<usize> = problem.pairs.pairs.iter().map(|p| p.noun).collect();
        for pair in &problem.pairs.pairs {
            for token in [pair.noun, pair.verb] {
                for frame in 0..ca.frames() {
                    in_box.push(InBox {
                        token,
                        frame,
                        ratio: in_box_ratio(ca, &problem.masks, token, frame)?,
                    });
                }
            }
            for frame in 0..ca.frames() {
                components.push(Components {
                    token: pair.noun,
                    frame,
                    count: count_components(ca, pair.noun, frame, COMPONENT_THRESHOLD)?,
                });
            }
            alignment.push(Alignment {
                noun: pair.noun,
                verb: pair.verb,
                score: verb_noun_alignment(ca, *pair, Distance::KlSym, config.eps)?,
            });
        }
        Ok(Self {
            run: run.into(),
            seed,
            step,
            mean_in_box: mean(in_box.iter().filter(|r| nouns.contains(&r.token)).map(|r| r.ratio)),
            mean_alignment: mean(alignment.iter().map(|a| a.score)),
            mean_components: mean(components.iter().map(|c| c.count as f64)),
            in_box,
            alignment,
            components,
            config: config.clone(),
        })
    }
}

pub fn reports_to_jsonl(reports: &[MetricsReport]) -> Result<String> {
    let mut out = String::new();
    for r in reports {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn reports_from_jsonl(text: &str) -> Result<Vec<MetricsReport>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

/// Renders rows as left-aligned columns separated by two spaces.
pub fn aligned_table(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for row in rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.len());
        }
    }
    let mut out = String::new();
    let mut line = |cells: &mut dyn Iterator<Item = &str>| {
        let text: Vec<String> = cells.zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect();
        let _ = writeln!(out, "{}", text.join("  ").trim_end());
    };
    line(&mut header.iter().copied());
    for row in rows {
        line(&mut row.iter().map(String::as_str));
    }
    out
}

/// Summary table: one line per report.
pub fn reports_table(reports: &[MetricsReport]) -> String {
    let rows: Vec<Vec<String>> = reports
        .iter()
        .map(|r| {
            vec![
                r.run.clone(),
                r.seed.to_string(),
                r.step.to_string(),
                format!("{:.6}", r.mean_in_box),
                format!("{:.6}", r.mean_alignment),
                format!("{:.3}", r.mean_components),
            ]
        })
        .collect();
    aligned_table(&["run", "seed", "step", "in_box", "alignment", "components"], &rows)
}

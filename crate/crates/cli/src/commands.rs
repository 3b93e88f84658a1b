use std::collections::BTreeSet;
use std::fs::File;
use std::io::Write;
use std::path::Path;
use std::sync::Mutex;

use motionguide::guidance::{run_guided_sampling, trace_to_jsonl, GuidedRun};
use motionguide::metrics::{
    render_heatmap, reports_table, reports_to_jsonl, run_ablation, AblationGrid, AblationRow, MetricsReport,
};
use motionguide::model::{CAMapStack, ToyModel};
use motionguide::numerics::Tensor;
use motionguide::prior::{
    parse_boxes as parse_box_text, rasterize_masks, validate_trajectories, BoxTrajectory, Limits, PixelBox, SpatialPriorSet,
};
use motionguide::syntax::{parse_prompt as parse_prompt_text, Lexicon, NegativeMode, ParsedPrompt, Token};
use serde::Serialize;

use crate::failure::{CliResult, Failure, EXIT_PARSE};
use crate::manifest::{sha256_hex, InputDigest, RunManifest};
use crate::settings::Settings;
use crate::{read_input, write_file, ConfigArgs, PromptArgs};

const FIXTURE_PROMPT: &str = "a man is walking and a dog is running";

/// Two subjects in disjoint static boxes, used when `ablate` gets no inputs.
pub(crate) fn fixture_priors() -> motionguide::Result<SpatialPriorSet> {
    let traj = |id: usize, name: &str, b: [i64; 4]| BoxTrajectory {
        subject_id: id,
        name: name.into(),
        boxes: vec![PixelBox::from(b); 8],
    };
    SpatialPriorSet::new(
        576,
        320,
        8,
        vec![traj(0, "walking man", [40, 40, 200, 260]), traj(1, "running dog", [336, 100, 200, 200])],
        "street",
    )
}

fn lexicon(path: Option<&Path>, inputs: &mut Vec<InputDigest>) -> CliResult<Lexicon> {
    match path {
        Some(p) => Ok(Lexicon::parse(&read_input(p, inputs)?)?),
        None => Ok(Lexicon::builtin()),
    }
}

fn load_boxes(path: &Path, inputs: &mut Vec<InputDigest>) -> CliResult<SpatialPriorSet> {
    let text = read_input(path, inputs)?;
    let set = parse_box_text(&text).map_err(|e| {
        let mut f = Failure::from(e);
        f.message = format!("{}: {}", path.display(), f.message);
        f
    })?;
    for w in &set.warnings {
        log::warn!("{w}");
    }
    Ok(set)
}

fn to_json<T: Serialize>(value: &T) -> CliResult<String> {
    serde_json::to_string(value).map_err(|e| Failure::from(motionguide::Error::from(e)))
}

fn to_json_pretty<T: Serialize>(value: &T) -> CliResult<String> {
    serde_json::to_string_pretty(value).map_err(|e| Failure::from(motionguide::Error::from(e)))
}

#[derive(Serialize)]
struct PairView<'a> {
    noun: usize,
    verb: usize,
    noun_word: &'a str,
    verb_word: &'a str,
    negatives: &'a [usize],
}

#[derive(Serialize)]
struct PromptView<'a> {
    tokens: &'a [Token],
    pairs: Vec<PairView<'a>>,
}

fn prompt_view(parsed: &ParsedPrompt) -> PromptView<'_> {
    let word = |i: usize| parsed.tokens.word(i).unwrap_or("");
    PromptView {
        tokens: parsed.tokens.tokens(),
        pairs: parsed
            .pairs
            .iter()
            .map(|(p, neg)| PairView {
                noun: p.noun,
                verb: p.verb,
                noun_word: word(p.noun),
                verb_word: word(p.verb),
                negatives: neg,
            })
            .collect(),
    }
}

pub fn parse_prompt(prompt: &str, lexicon_path: Option<&Path>, negatives: &str) -> CliResult {
    let lex = lexicon(lexicon_path, &mut Vec::new())?;
    let mode: NegativeMode = negatives.parse()?;
    let parsed = parse_prompt_text(prompt, &lex, mode)?;
    println!("{}", to_json_pretty(&prompt_view(&parsed))?);
    Ok(())
}

pub fn parse_boxes(file: &Path, lines: bool) -> CliResult {
    let set = load_boxes(file, &mut Vec::new())?;
    if lines {
        print!("{}", set.to_llm_text());
    } else {
        println!("{}", set.to_structured_json()?);
    }
    Ok(())
}

pub fn validate_boxes(file: &Path, max_step_px: f64, allow_offscreen: bool, offscreen_tolerance_px: i64) -> CliResult {
    let set = load_boxes(file, &mut Vec::new())?;
    let limits = Limits {
        max_step_px,
        allow_offscreen,
        offscreen_tolerance_px,
    };
    let violations = validate_trajectories(&set, &limits);
    for v in &violations {
        println!("{v}");
    }
    if violations.is_empty() {
        println!("ok: {} subjects, {} frames", set.trajectories.len(), set.frame_count);
        Ok(())
    } else {
        Err(Failure::new(EXIT_PARSE, "validation", format!("{} violations", violations.len())))
    }
}

fn parse_grid(grid: &str) -> CliResult<(usize, usize)> {
    let bad = || Failure::new(EXIT_PARSE, "input", format!("invalid grid {grid:?}, expected HxW"));
    let (h, w) = grid.split_once(['x', 'X']).ok_or_else(bad)?;
    Ok((h.trim().parse().map_err(|_| bad())?, w.trim().parse().map_err(|_| bad())?))
}

pub fn rasterize(file: &Path, grid: &str) -> CliResult {
    let set = load_boxes(file, &mut Vec::new())?;
    let (gh, gw) = parse_grid(grid)?;
    let masks = rasterize_masks(&set, gh, gw)?;
    for w in &masks.warnings {
        log::warn!("{w}");
    }
    for t in &set.trajectories {
        for f in 0..set.frame_count {
            println!("subject {} ({}) frame {}", t.subject_id, t.name, f + 1);
            let cells = masks.frame(t.subject_id, f).unwrap_or(&[]);
            for row in cells.chunks(gw) {
                let line: String = row.iter().map(|&v| if v > 0.0 { '#' } else { '.' }).collect();
                println!("{line}");
            }
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct LatentSummary {
    /// 0 is the initial noise; `s` is the latent after sampler step `s`.
    step: usize,
    mean: f64,
    std: f64,
    max_abs: f64,
    sha256: String,
}

fn latent_summary(step: usize, z: &Tensor) -> LatentSummary {
    let n = z.numel().max(1) as f64;
    let mean = z.sum() / n;
    let var = z.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let bytes: Vec<u8> = z.data().iter().flat_map(|v| v.to_le_bytes()).collect();
    LatentSummary {
        step,
        mean,
        std: var.sqrt(),
        max_abs: z.data().iter().fold(0.0, |m, v| m.max(v.abs())),
        sha256: sha256_hex(&bytes),
    }
}

fn heatmap_steps(settings: &Settings) -> Vec<usize> {
    let g = &settings.guidance;
    let steps: BTreeSet<usize> = [1, g.t1, g.t2, g.total_steps]
        .into_iter()
        .filter(|s| (1..=g.total_steps).contains(s))
        .collect();
    steps.into_iter().collect()
}

fn safe_name(word: &str) -> String {
    word.chars().map(|c| if c.is_ascii_alphanumeric() { c } else { '_' }).collect()
}

fn write_generate_outputs(run: &GuidedRun, settings: &Settings, seed: u64, out: &Path, upscale: usize) -> CliResult {
    write_file(&out.join("trace.jsonl"), trace_to_jsonl(&run.trace)?.as_bytes())?;

    let mut latents = String::new();
    for (step, z) in run.trajectory.iter().enumerate() {
        latents.push_str(&to_json(&latent_summary(step, z))?);
        latents.push('\n');
    }
    write_file(&out.join("latents.jsonl"), latents.as_bytes())?;

    let mut reports = Vec::new();
    for step in heatmap_steps(settings) {
        let ca = run.ca_at(step)?;
        reports.push(MetricsReport::evaluate("generate", seed, step, ca, &run.problem, &settings.guidance)?);
        write_file(&out.join(format!("ca/step_{step:03}.json")), to_json(ca)?.as_bytes())?;
        write_heatmaps(ca, run, step, out, upscale)?;
    }
    write_file(&out.join("metrics.jsonl"), reports_to_jsonl(&reports)?.as_bytes())?;
    write_file(&out.join("metrics.txt"), reports_table(&reports).as_bytes())?;
    Ok(())
}

fn write_heatmaps(ca: &CAMapStack, run: &GuidedRun, step: usize, out: &Path, upscale: usize) -> CliResult {
    let tokens: BTreeSet<usize> = run.problem.pairs.pairs.iter().flat_map(|p| [p.noun, p.verb]).collect();
    for token in tokens {
        let word = safe_name(run.problem.tokens.word(token).unwrap_or("token"));
        for frame in 0..ca.frames() {
            let path = out.join(format!("heatmaps/step_{step:03}/{token:02}_{word}_f{frame:02}.pgm"));
            if let Some(dir) = path.parent() {
                std::fs::create_dir_all(dir).map_err(|e| Failure::io(dir.display(), e))?;
            }
            render_heatmap(ca, token, frame, &path, upscale)?;
        }
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn generate(
    input: &PromptArgs,
    config: &ConfigArgs,
    seed: u64,
    out: &Path,
    force: bool,
    max_step_px: f64,
    allow_offscreen: bool,
    upscale: usize,
) -> CliResult {
    let mut inputs = Vec::new();
    let prompt = input
        .prompt
        .as_deref()
        .ok_or_else(|| Failure::new(EXIT_PARSE, "input", "generate needs --prompt"))?;
    let boxes = input
        .boxes
        .as_deref()
        .ok_or_else(|| Failure::new(EXIT_PARSE, "input", "generate needs --boxes"))?;
    let priors = load_boxes(boxes, &mut inputs)?;
    let limits = Limits {
        max_step_px,
        allow_offscreen,
        ..Limits::default()
    };
    let violations = validate_trajectories(&priors, &limits);
    for v in &violations {
        log::warn!("{v}");
    }
    if !violations.is_empty() && !force {
        return Err(Failure::new(
            EXIT_PARSE,
            "validation",
            format!("{} box violations, first: {}; pass --force to continue", violations.len(), violations[0]),
        ));
    }
    let lex = lexicon(input.lexicon.as_deref(), &mut inputs)?;
    let settings = Settings::load(config.config.as_deref(), &config.overrides, &mut inputs)?;
    let parsed = parse_prompt_text(prompt, &lex, settings.guidance.negative_mode)?;
    let model = ToyModel::new(settings.model.clone())?;

    std::fs::create_dir_all(out).map_err(|e| Failure::io(out.display(), e))?;
    let mut manifest = RunManifest::start("generate", &settings, vec![seed], inputs);
    manifest.write(out)?;
    let run = run_guided_sampling(&parsed, &priors, &settings.guidance, &model, seed)?;
    write_generate_outputs(&run, &settings, seed, out, upscale)?;
    manifest.finish(out)?;
    println!(
        "wrote {} guidance records over {} steps to {}",
        run.trace.len(),
        settings.guidance.total_steps,
        out.display()
    );
    Ok(())
}

pub fn ablate(grid: Option<&Path>, input: &PromptArgs, config: &ConfigArgs, seeds: &[u64], out: &Path) -> CliResult {
    let mut inputs = Vec::new();
    let grid = match grid {
        Some(path) => AblationGrid::parse(&read_input(path, &mut inputs)?).map_err(|e| {
            let mut f = Failure::from(e);
            f.message = format!("{}: {}", path.display(), f.message);
            f
        })?,
        None => AblationGrid::appendix(),
    };
    let priors = match input.boxes.as_deref() {
        Some(path) => load_boxes(path, &mut inputs)?,
        None => fixture_priors()?,
    };
    let lex = lexicon(input.lexicon.as_deref(), &mut inputs)?;
    let settings = Settings::load(config.config.as_deref(), &config.overrides, &mut inputs)?;
    let prompt = input.prompt.as_deref().unwrap_or(FIXTURE_PROMPT);
    let parsed = parse_prompt_text(prompt, &lex, settings.guidance.negative_mode)?;
    let model = ToyModel::new(settings.model.clone())?;

    std::fs::create_dir_all(out).map_err(|e| Failure::io(out.display(), e))?;
    let mut manifest = RunManifest::start("ablate", &settings, seeds.to_vec(), inputs);
    manifest.write(out)?;

    // rows land here as they finish so an interrupted sweep leaves a partial table
    let rows_path = out.join("rows.jsonl");
    let file = File::create(&rows_path).map_err(|e| Failure::io(rows_path.display(), e))?;
    let sink = Mutex::new(file);
    let on_row = |row: &AblationRow| {
        let line = match serde_json::to_string(row) {
            Ok(l) => l,
            Err(e) => return log::error!("row {}: {e}", row.label),
        };
        let mut f = sink.lock().unwrap_or_else(|p| p.into_inner());
        if let Err(e) = writeln!(f, "{line}").and_then(|_| f.flush()) {
            log::error!("{}: {e}", rows_path.display());
        }
        log::info!("done {} seed {}", row.label, row.seed);
    };
    let table = run_ablation(&grid, &settings.guidance, &parsed, &priors, &model, seeds, &on_row)?;
    drop(sink);

    write_file(&rows_path, table.to_jsonl()?.as_bytes())?;
    write_file(&out.join("table.txt"), table.to_table().as_bytes())?;
    let mut skipped = String::new();
    for s in &table.skipped {
        skipped.push_str(&to_json(s)?);
        skipped.push('\n');
    }
    write_file(&out.join("skipped.jsonl"), skipped.as_bytes())?;
    manifest.finish(out)?;
    println!(
        "{} rows ({} configs skipped) written to {}",
        table.rows.len(),
        table.skipped.len(),
        out.display()
    );
    Ok(())
}

pub fn render(ca_path: &Path, token: usize, frame: usize, upscale: usize, out: &Path) -> CliResult {
    let text = read_input(ca_path, &mut Vec::new())?;
    let ca: CAMapStack = serde_json::from_str(&text).map_err(|e| {
        Failure::new(EXIT_PARSE, "parse", format!("{}: {e}", ca_path.display()))
    })?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Failure::io(dir.display(), e))?;
    }
    render_heatmap(&ca, token, frame, out, upscale)?;
    println!("wrote {}", out.display());
    Ok(())
}

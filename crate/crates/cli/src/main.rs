mod commands;
mod failure;
mod gradcheck;
mod manifest;
mod settings;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use failure::{CliResult, Failure};
use manifest::InputDigest;

#[derive(Parser, Debug)]
#[command(name = "motionguide", version, about = "Attention-guided sampling on a toy video denoiser")]
struct Cli {
    /// Worker threads for parallel sweeps (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

/// Config file and per-field overrides shared by sampling commands.
#[derive(Args, Debug, Clone, Default)]
pub struct ConfigArgs {
    /// key = value file; model fields take a `model.` prefix.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Override one config field, e.g. `--set lambda_sp=20` or
    /// `--set model.seed=3`. Repeatable; applied after --config.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args, Debug, Clone)]
pub struct PromptArgs {
    /// Prompt text, e.g. "a man is walking and a dog is running".
    #[arg(long)]
    prompt: Option<String>,

    /// Box file (line format or structured JSON).
    #[arg(long)]
    boxes: Option<PathBuf>,

    /// Lexicon file with [subjects] and [actions] sections.
    #[arg(long)]
    lexicon: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Component {
    Stub,
    Model,
    Losses,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run guided sampling and write trace, metrics, heatmaps and manifest.
    Generate {
        #[command(flatten)]
        input: PromptArgs,
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Continue even if the boxes fail validation.
        #[arg(long)]
        force: bool,
        #[arg(long, default_value_t = 150.0)]
        max_step_px: f64,
        #[arg(long)]
        allow_offscreen: bool,
        /// Heatmap upscale factor.
        #[arg(long, default_value_t = 8)]
        upscale: usize,
    },
    /// Tag a prompt and print its noun-verb pairs as JSON.
    ParsePrompt {
        prompt: String,
        #[arg(long)]
        lexicon: Option<PathBuf>,
        #[arg(long, default_value = "all_other_words")]
        negatives: String,
    },
    /// Parse a box file and print it as structured JSON.
    ParseBoxes {
        file: PathBuf,
        /// Print the line format instead of JSON.
        #[arg(long)]
        lines: bool,
    },
    /// Report box violations; exits 2 if there are any.
    ValidateBoxes {
        file: PathBuf,
        #[arg(long, default_value_t = 150.0)]
        max_step_px: f64,
        #[arg(long)]
        allow_offscreen: bool,
        #[arg(long, default_value_t = 0)]
        offscreen_tolerance_px: i64,
    },
    /// Print the masks of a box file on an attention grid.
    Rasterize {
        file: PathBuf,
        /// Grid as HxW.
        #[arg(long, default_value = "8x8")]
        grid: String,
    },
    /// Compare analytic loss gradients to central differences.
    Gradcheck {
        #[arg(value_enum)]
        component: Component,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Seeds to check, starting at --seed.
        #[arg(long, default_value_t = 1)]
        seeds: u64,
        /// Scale the softmax backward rule to check that failures are caught.
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
    /// Sweep config axes over seeds and write a metrics table.
    Ablate {
        /// Axis file (`key = v1, v2` lines, optional `mode = cartesian`);
        /// defaults to the built-in grid.
        #[arg(long)]
        grid: Option<PathBuf>,
        #[command(flatten)]
        input: PromptArgs,
        #[command(flatten)]
        config: ConfigArgs,
        /// Comma-separated seeds.
        #[arg(long, default_value = "0,1", value_delimiter = ',')]
        seeds: Vec<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render one token's attention map from a saved stack as a PGM.
    Render {
        /// Attention stack JSON written by `generate` (ca/step_NNN.json).
        #[arg(long)]
        ca: PathBuf,
        /// Word index in the prompt.
        #[arg(long)]
        token: usize,
        #[arg(long, default_value_t = 0)]
        frame: usize,
        #[arg(long, default_value_t = 8)]
        upscale: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Reads a UTF-8 input file and records its digest.
pub fn read_input(path: &Path, inputs: &mut Vec<InputDigest>) -> CliResult<String> {
    let bytes = std::fs::read(path).map_err(|e| Failure::io(path.display(), e))?;
    inputs.push(InputDigest::of(path, &bytes));
    String::from_utf8(bytes).map_err(|e| Failure::new(failure::EXIT_PARSE, "input", format!("{}: {e}", path.display())))
}

pub fn write_file(path: &Path, bytes: &[u8]) -> CliResult {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Failure::io(dir.display(), e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Failure::io(path.display(), e))
}

fn run(cli: Cli) -> CliResult {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::new(failure::EXIT_PARSE, "input", format!("--threads {n}: {e}")))?;
    }
    match cli.command {
        Command::Generate {
            input,
            config,
            seed,
            out,
            force,
            max_step_px,
            allow_offscreen,
            upscale,
        } => commands::generate(&input, &config, seed, &out, force, max_step_px, allow_offscreen, upscale),
        Command::ParsePrompt { prompt, lexicon, negatives } => commands::parse_prompt(&prompt, lexicon.as_deref(), &negatives),
        Command::ParseBoxes { file, lines } => commands::parse_boxes(&file, lines),
        Command::ValidateBoxes {
            file,
            max_step_px,
            allow_offscreen,
            offscreen_tolerance_px,
        } => commands::validate_boxes(&file, max_step_px, allow_offscreen, offscreen_tolerance_px),
        Command::Rasterize { file, grid } => commands::rasterize(&file, &grid),
        Command::Gradcheck {
            component,
            seed,
            seeds,
            inject_fault,
        } => gradcheck::run(component, seed, seeds, inject_fault),
        Command::Ablate {
            grid,
            input,
            config,
            seeds,
            out,
        } => commands::ablate(grid.as_deref(), &input, &config, &seeds, &out),
        Command::Render {
            ca,
            token,
            frame,
            upscale,
            out,
        } => commands::render(&ca, token, frame, upscale, &out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            println!("{}", f.line());
            ExitCode::from(f.code as u8)
        }
    }
}

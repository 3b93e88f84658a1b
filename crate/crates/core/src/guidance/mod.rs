//! Spatial and syntax attention losses and the scheduled latent-update
//! loop that applies them during sampling.
//!
//! Sampler steps are numbered `1..=total_steps` from the noisiest. Steps
//! `1..=t1` get `iters_spatial` updates against `lambda_sp * L_sp`, steps
//! `t1+1..=t2` get `iters_syntax` updates against `lambda_syt * L_syt`, and
//! the remaining steps run unguided.

mod losses;

use serde::{Deserialize, Serialize};

use crate::config::{self, field, flag};
use crate::error::{Error, Result};
use crate::model::{ddim_step, CAMapStack, CaLayer, CaVar, DdimSchedule, LatentState, ToyModel};
use crate::numerics::{Tape, Tensor, Var};
use crate::prior::{bind_subjects, rasterize_masks, resample_frames, MaskSet, SpatialPriorSet};
use crate::syntax::{NegativeMode, Pair, ParsedPrompt, SyntaxPairs, TokenSequence};

pub use losses::{
    dist, loss_bg, loss_fg, loss_neg, loss_pos, loss_syt, tracked_tokens, Contrastive, Distance,
    SyntaxLossOptions,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuidanceConfig {
    pub total_steps: usize,
    pub t1: usize,
    pub t2: usize,
    pub iters_spatial: usize,
    pub iters_syntax: usize,
    pub lambda_fg: f64,
    pub lambda_bg: f64,
    pub lambda_sp: f64,
    pub lambda_syt: f64,
    pub alpha: f64,
    pub distance: Distance,
    pub contrastive: Contrastive,
    pub eps: f64,
    pub apply_spatial_to_verbs: bool,
    pub neg_includes_verb: bool,
    pub negative_mode: NegativeMode,
    /// Cross-attention layer the losses read.
    pub layer: CaLayer,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            total_steps: 50,
            t1: 5,
            t2: 25,
            iters_spatial: 10,
            iters_syntax: 1,
            lambda_fg: 1.0,
            lambda_bg: 1.0,
            lambda_sp: 30.0,
            lambda_syt: 20.0,
            alpha: 1.0,
            distance: Distance::KlSym,
            contrastive: Contrastive::Ratio,
            eps: 1e-8,
            apply_spatial_to_verbs: true,
            neg_includes_verb: false,
            negative_mode: NegativeMode::AllOtherWords,
            layer: CaLayer::DownUp,
        }
    }
}

/// Which loss an update step applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Spatial,
    Syntax,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Self::Spatial => "spatial",
            Self::Syntax => "syntax",
        }
    }
}

impl GuidanceConfig {
    pub const KEYS: &'static [&'static str] = &[
        "total_steps",
        "t1",
        "t2",
        "iters_spatial",
        "iters_syntax",
        "lambda_fg",
        "lambda_bg",
        "lambda_sp",
        "lambda_syt",
        "alpha",
        "distance",
        "contrastive",
        "eps",
        "apply_spatial_to_verbs",
        "neg_includes_verb",
        "negative_mode",
        "layer",
    ];

    /// Sets one field from its textual value. Does not validate the result.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "total_steps" => self.total_steps = field(key, value)?,
            "t1" => self.t1 = field(key, value)?,
            "t2" => self.t2 = field(key, value)?,
            "iters_spatial" => self.iters_spatial = field(key, value)?,
            "iters_syntax" => self.iters_syntax = field(key, value)?,
            "lambda_fg" => self.lambda_fg = field(key, value)?,
            "lambda_bg" => self.lambda_bg = field(key, value)?,
            "lambda_sp" => self.lambda_sp = field(key, value)?,
            "lambda_syt" => self.lambda_syt = field(key, value)?,
            "alpha" => self.alpha = field(key, value)?,
            "distance" => self.distance = value.parse()?,
            "contrastive" => self.contrastive = value.parse()?,
            "eps" => self.eps = field(key, value)?,
            "apply_spatial_to_verbs" => self.apply_spatial_to_verbs = flag(key, value)?,
            "neg_includes_verb" => self.neg_includes_verb = flag(key, value)?,
            "negative_mode" => self.negative_mode = value.parse()?,
            "layer" => self.layer = value.parse()?,
            _ => return Err(Error::Input(format!("unknown guidance config key {key:?}"))),
        }
        Ok(())
    }

    /// Applies a key = value file on top of `self`, then validates.
    pub fn apply_kv(&mut self, text: &str) -> Result<()> {
        config::apply_file(text, |k, v| self.set(k, v))?;
        self.validate()
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_kv(text)?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Input(msg));
        if self.total_steps == 0 {
            return bad("total_steps must be positive".into());
        }
        if !(self.t1 <= self.t2 && self.t2 <= self.total_steps) {
            return bad(format!(
                "need 0 <= t1 <= t2 <= total_steps, got t1={} t2={} total_steps={}",
                self.t1, self.t2, self.total_steps
            ));
        }
        for (name, v) in [
            ("lambda_fg", self.lambda_fg),
            ("lambda_bg", self.lambda_bg),
            ("lambda_sp", self.lambda_sp),
            ("lambda_syt", self.lambda_syt),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be a finite value >= 0, got {v}"));
            }
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return bad(format!("alpha must be > 0, got {}", self.alpha));
        }
        if !(self.eps > 0.0) {
            return bad(format!("eps must be > 0, got {}", self.eps));
        }
        Ok(())
    }

    /// Phase that guides sampler step `step`, if any.
    pub fn phase(&self, step: usize) -> Option<Phase> {
        if step == 0 {
            None
        } else if step <= self.t1 {
            Some(Phase::Spatial)
        } else if step <= self.t2 {
            Some(Phase::Syntax)
        } else {
            None
        }
    }

    pub fn iterations(&self, phase: Phase) -> usize {
        match phase {
            Phase::Spatial => self.iters_spatial,
            Phase::Syntax => self.iters_syntax,
        }
    }

    pub fn weight(&self, phase: Phase) -> f64 {
        match phase {
            Phase::Spatial => self.lambda_sp,
            Phase::Syntax => self.lambda_syt,
        }
    }

    /// Number of latent updates a full run applies.
    pub fn update_count(&self) -> usize {
        self.t1 * self.iters_spatial + (self.t2 - self.t1) * self.iters_syntax
    }

    /// True when no update can change the latent.
    pub fn is_unguided(&self) -> bool {
        let spatial = self.t1 > 0 && self.iters_spatial > 0 && self.lambda_sp > 0.0;
        let syntax = self.t2 > self.t1 && self.iters_syntax > 0 && self.lambda_syt > 0.0;
        !(spatial || syntax)
    }

    /// The same sampler settings with every guidance phase switched off.
    pub fn unguided(&self) -> Self {
        Self {
            t1: 0,
            t2: 0,
            ..self.clone()
        }
    }

    pub fn syntax_options(&self) -> SyntaxLossOptions {
        SyntaxLossOptions {
            distance: self.distance,
            contrastive: self.contrastive,
            eps: self.eps,
            neg_includes_verb: self.neg_includes_verb,
        }
    }

    /// Lines of a key = value file that reproduces this config.
    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        let v = serde_json::to_value(self).expect("config serializes");
        for key in Self::KEYS {
            let text = match &v[*key] {
                serde_json::Value::String(s) => s.clone(),
                other => other.to_string(),
            };
            out.push_str(&format!("{key} = {text}\n"));
        }
        out
    }
}

/// `lambda_fg * L_fg + lambda_bg * L_bg`.
pub fn loss_sp<'t>(ca: &CaVar<'t>, masks: &MaskSet, pairs: &SyntaxPairs, config: &GuidanceConfig) -> Result<Var<'t>> {
    let verbs = config.apply_spatial_to_verbs;
    let fg = loss_fg(ca, masks, pairs, verbs, config.eps)?.scale(config.lambda_fg)?;
    let bg = loss_bg(ca, masks, pairs, verbs, config.eps)?.scale(config.lambda_bg)?;
    fg.add(bg)
}

/// The loss applied in `phase`, unweighted by `lambda_sp` / `lambda_syt`.
pub fn phase_loss<'t>(
    phase: Phase,
    ca: &CaVar<'t>,
    masks: &MaskSet,
    pairs: &SyntaxPairs,
    config: &GuidanceConfig,
) -> Result<Var<'t>> {
    match phase {
        Phase::Spatial => loss_sp(ca, masks, pairs, config),
        Phase::Syntax => loss_syt(ca, pairs, config.syntax_options()),
    }
}

/// One gradient step `z' = z - alpha * weight * dloss/dz`, where `z` is the
/// tape leaf holding `latent.z`. Returns the new latent (same timestep) and
/// the norm of the applied update direction `weight * dloss/dz`.
pub fn guide_latent<'t>(
    latent: &LatentState,
    z: Var<'t>,
    loss: Var<'t>,
    weight: f64,
    alpha: f64,
    loss_name: &str,
    step: usize,
) -> Result<(LatentState, f64)> {
    let grad = z.tape().backward(loss)?.wrt(z);
    if !grad.is_finite() {
        return Err(Error::Numeric {
            loss: loss_name.to_string(),
            step,
        });
    }
    let direction = grad.scale(weight);
    let z_new = latent.z.zip_map(&direction, "guide_latent", |zv, g| zv - alpha * g)?;
    if !z_new.is_finite() {
        return Err(Error::Numeric {
            loss: loss_name.to_string(),
            step,
        });
    }
    Ok((
        LatentState {
            z: z_new,
            timestep_index: latent.timestep_index,
        },
        direction.norm(),
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenRatio {
    pub token: usize,
    pub ratio: f64,
}

/// One applied latent update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuidanceRecord {
    pub step: usize,
    /// 1-based inner iteration within the step.
    pub iteration: usize,
    pub loss: Phase,
    /// Unweighted loss before the update.
    pub value: f64,
    /// Norm of `lambda * grad`.
    pub grad_norm: f64,
    /// Per-noun in-box ratio before the update, averaged over frames.
    pub in_box: Vec<TokenRatio>,
}

pub type GuidanceTrace = Vec<GuidanceRecord>;

/// Writes one JSON object per line.
pub fn trace_to_jsonl(trace: &[GuidanceRecord]) -> Result<String> {
    let mut out = String::new();
    for r in trace {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

/// Everything the losses need about one prompt + box layout on one model.
#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceProblem {
    pub tokens: TokenSequence,
    pub pairs: SyntaxPairs,
    /// `(pair, subject id)` bindings.
    pub binding: Vec<(Pair, usize)>,
    /// Masks keyed by token index, on the grid of the guided layer.
    pub masks: MaskSet,
}

impl GuidanceProblem {
    /// Resamples the priors to the model's frame count, rasterizes them on
    /// the grid of `layer` and binds subjects to pairs.
    pub fn new(prompt: &ParsedPrompt, priors: &SpatialPriorSet, model: &ToyModel, layer: CaLayer) -> Result<Self> {
        let frames = model.config().frames;
        let priors = if priors.frame_count == frames {
            priors.clone()
        } else if priors.frame_count == 1 {
            let mut set = priors.clone();
            for t in &mut set.trajectories {
                t.boxes = vec![t.boxes[0]; frames];
            }
            set.frame_count = frames;
            set
        } else {
            resample_frames(priors, frames)?
        };
        let (gh, gw) = model.config().grid_of(layer);
        let subject_masks = rasterize_masks(&priors, gh, gw)?;
        for w in &subject_masks.warnings {
            log::warn!("{w}");
        }
        let binding = bind_subjects(&priors, &prompt.tokens, &prompt.pairs)?;
        let masks = subject_masks.for_pairs(&binding)?;
        Ok(Self {
            tokens: prompt.tokens.clone(),
            pairs: prompt.pairs.clone(),
            binding,
            masks,
        })
    }

    /// Per-noun in-box ratio, averaged over frames.
    pub fn noun_in_box(&self, ca: &Tensor, token_offset: usize) -> Vec<TokenRatio> {
        let (n, l) = (ca.shape()[1], ca.shape()[2]);
        let frames = ca.shape()[0];
        self.pairs
            .pairs
            .iter()
            .map(|p| {
                let col = p.noun + token_offset;
                let mask = self.masks.get(p.noun);
                let mut sum = 0.0;
                for f in 0..frames {
                    let (mut inside, mut total) = (0.0, 0.0);
                    for px in 0..n {
                        let a = ca.data()[(f * n + px) * l + col];
                        total += a;
                        inside += a * mask.map_or(0.0, |m| m.data()[f * n + px]);
                    }
                    sum += if total > 0.0 { inside / total } else { 0.0 };
                }
                TokenRatio {
                    token: p.noun,
                    ratio: sum / frames as f64,
                }
            })
            .collect()
    }
}

/// Outputs of [`run_guided_sampling`].
#[derive(Debug, Clone)]
pub struct GuidedRun {
    /// `trajectory[0]` is the initial latent, `trajectory[s]` the latent
    /// after sampler step `s`.
    pub trajectory: Vec<Tensor>,
    pub trace: GuidanceTrace,
    /// `ca[s - 1]`: maps of the guided layer from the forward pass that
    /// produced the noise prediction of step `s` (after its updates).
    pub ca: Vec<CAMapStack>,
    pub problem: GuidanceProblem,
}

impl GuidedRun {
    pub fn final_latent(&self) -> &Tensor {
        self.trajectory.last().expect("trajectory holds the initial latent")
    }

    /// Maps recorded at the end of sampler step `step`.
    pub fn ca_at(&self, step: usize) -> Result<&CAMapStack> {
        step.checked_sub(1)
            .and_then(|k| self.ca.get(k))
            .ok_or_else(|| Error::Input(format!("no attention record for step {step}")))
    }
}

/// Samples `total_steps` DDIM steps from the seeded latent, applying the
/// scheduled guidance updates before each step's noise prediction.
pub fn run_guided_sampling(
    prompt: &ParsedPrompt,
    priors: &SpatialPriorSet,
    config: &GuidanceConfig,
    model: &ToyModel,
    seed: u64,
) -> Result<GuidedRun> {
    config.validate()?;
    let problem = GuidanceProblem::new(prompt, priors, model, config.layer)?;
    sample_problem(problem, config, model, seed)
}

/// [`run_guided_sampling`] for an already prepared problem.
pub fn sample_problem(problem: GuidanceProblem, config: &GuidanceConfig, model: &ToyModel, seed: u64) -> Result<GuidedRun> {
    config.validate()?;
    let schedule = DdimSchedule::linear(config.total_steps)?;
    let text = model.encode_text(&problem.tokens)?;
    let shape = model.config().latent_shape();
    let mut latent = LatentState::from_seed(&shape, config.total_steps, seed);
    let mut trajectory = Vec::with_capacity(config.total_steps + 1);
    trajectory.push(latent.z.clone());
    let mut trace = Vec::with_capacity(config.update_count());
    let mut ca = Vec::with_capacity(config.total_steps);

    for step in 1..=config.total_steps {
        if let Some(phase) = config.phase(step) {
            for iteration in 1..=config.iterations(phase) {
                let wrap = |e: Error| Error::Guidance {
                    step,
                    iteration,
                    source: Box::new(e),
                };
                let tape = Tape::new();
                let z = tape.leaf(latent.z.clone());
                let (loss, in_box) = (|| {
                    let out = model.forward(z, step, &schedule, &text)?;
                    let maps = out.ca(config.layer)?;
                    let loss = phase_loss(phase, &maps, &problem.masks, &problem.pairs, config)?;
                    let in_box = maps.maps.with_value(|t| problem.noun_in_box(t, maps.token_offset));
                    Ok((loss, in_box))
                })()
                .map_err(wrap)?;
                let value = loss.item().map_err(wrap)?;
                let (next, grad_norm) = guide_latent(
                    &latent,
                    z,
                    loss,
                    config.weight(phase),
                    config.alpha,
                    phase.name(),
                    step,
                )
                .map_err(wrap)?;
                latent = next;
                trace.push(GuidanceRecord {
                    step,
                    iteration,
                    loss: phase,
                    value,
                    grad_norm,
                    in_box,
                });
            }
        }
        let tape = Tape::new();
        let out = model.forward(tape.constant(latent.z.clone()), step, &schedule, &text)?;
        ca.push(out.ca(config.layer)?.to_stack(config.layer)?);
        latent = ddim_step(&latent, &out.noise.value(), step, &schedule)?;
        trajectory.push(latent.z.clone());
    }

    Ok(GuidedRun {
        trajectory,
        trace,
        ca,
        problem,
    })
}

/// Spatial loss of a recorded attention stack.
pub fn eval_loss_sp(stack: &CAMapStack, problem: &GuidanceProblem, config: &GuidanceConfig) -> Result<f64> {
    let tape = Tape::new();
    loss_sp(&stack.on_tape(&tape), &problem.masks, &problem.pairs, config)?.item()
}

/// Syntax loss of a recorded attention stack.
pub fn eval_loss_syt(stack: &CAMapStack, problem: &GuidanceProblem, config: &GuidanceConfig) -> Result<f64> {
    let tape = Tape::new();
    loss_syt(&stack.on_tape(&tape), &problem.pairs, config.syntax_options())?.item()
}

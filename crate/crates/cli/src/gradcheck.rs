//! Finite-difference suites behind `motionguide gradcheck`.

use motionguide::guidance::{loss_bg, loss_fg, loss_neg, loss_pos, loss_sp, loss_syt, GuidanceConfig, GuidanceProblem};
use motionguide::model::{CaVar, DdimSchedule, LatentState, LinearAttentionStub, ToyModel, ToyModelConfig};
use motionguide::numerics::{check_with_fault, Fault, GradCheck, Tensor, Var};
use motionguide::prior::MaskSet;
use motionguide::syntax::{parse_prompt, Lexicon, NegativeMode, Pair, SyntaxPairs};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::failure::{CliResult, Failure, EXIT_GRADCHECK};
use crate::Component;

/// Exit threshold for every suite.
const TOLERANCE: f64 = 1e-4;

const LOSSES: [&str; 6] = ["L_fg", "L_bg", "L_sp", "L_pos", "L_neg", "L_syt"];

struct Outcome {
    loss: &'static str,
    seed: u64,
    check: GradCheck,
    shape: Vec<usize>,
}

fn coordinate(shape: &[usize], mut flat: usize) -> Vec<usize> {
    let mut idx = vec![0; shape.len()];
    for (d, &n) in shape.iter().enumerate().rev() {
        idx[d] = flat % n.max(1);
        flat /= n.max(1);
    }
    idx
}

fn check_all<A>(attention: A, masks: &MaskSet, pairs: &SyntaxPairs, z: &Tensor, step: f64, fault: Option<Fault>) -> motionguide::Result<Vec<(&'static str, GradCheck)>>
where
    A: for<'t> Fn(Var<'t>) -> motionguide::Result<CaVar<'t>>,
{
    let cfg = GuidanceConfig::default();
    let opts = cfg.syntax_options();
    let pair = pairs.pairs[0];
    let negatives = &pairs.negatives[0];
    let mut out = Vec::new();
    for loss in LOSSES {
        let check = match loss {
            "L_fg" => check_with_fault(|_, z| loss_fg(&attention(z)?, masks, pairs, true, cfg.eps), z, step, fault),
            "L_bg" => check_with_fault(|_, z| loss_bg(&attention(z)?, masks, pairs, true, cfg.eps), z, step, fault),
            "L_sp" => check_with_fault(|_, z| loss_sp(&attention(z)?, masks, pairs, &cfg), z, step, fault),
            "L_pos" => check_with_fault(|_, z| loss_pos(&attention(z)?, pair, opts.distance, opts.eps), z, step, fault),
            "L_neg" => check_with_fault(
                |_, z| loss_neg(&attention(z)?, pair, negatives, opts.distance, opts.eps, opts.neg_includes_verb),
                z,
                step,
                fault,
            ),
            _ => check_with_fault(|_, z| loss_syt(&attention(z)?, pairs, opts), z, step, fault),
        }?;
        out.push((loss, check));
    }
    Ok(out)
}

fn random_masks(rng: &mut ChaCha8Rng, keys: &[usize], frames: usize, gh: usize, gw: usize) -> MaskSet {
    let n = gh * gw;
    let masks = keys
        .iter()
        .map(|&k| {
            let mut m: Vec<f64> = (0..frames * n).map(|_| if rng.random_bool(0.4) { 1.0 } else { 0.0 }).collect();
            for f in 0..frames {
                m[f * n + rng.random_range(0..n)] = 1.0;
            }
            (k, Tensor::new(&[frames, n], m).expect("sizes agree"))
        })
        .collect();
    MaskSet {
        grid_h: gh,
        grid_w: gw,
        frames,
        masks,
        warnings: Vec::new(),
    }
}

fn two_pairs() -> SyntaxPairs {
    SyntaxPairs {
        pairs: vec![Pair { noun: 0, verb: 1 }, Pair { noun: 2, verb: 3 }],
        negatives: vec![vec![2, 3, 4], vec![0, 1, 4]],
    }
}

fn stub_suite(seed: u64, fault: Option<Fault>) -> motionguide::Result<Vec<(&'static str, GradCheck)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let stub = LinearAttentionStub::random(2, 3, 3, 5, 1.0, seed);
    let z = Tensor::randn(&[2, 2, 3, 3], 1.0, &mut rng);
    let masks = random_masks(&mut rng, &[0, 2], 2, 3, 3);
    check_all(|z| stub.attention(z), &masks, &two_pairs(), &z, 1e-5, fault)
}

fn softmax_attention(z: Var<'_>) -> motionguide::Result<CaVar<'_>> {
    Ok(CaVar {
        maps: z.softmax_lastdim()?,
        grid_h: 3,
        grid_w: 3,
        token_offset: 0,
    })
}

/// Attention maps as the softmax of free logits, so only the losses
/// themselves are under test.
fn losses_suite(seed: u64, fault: Option<Fault>) -> motionguide::Result<Vec<(&'static str, GradCheck)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (frames, gh, gw, tokens) = (2, 3, 3, 5);
    let logits = Tensor::randn(&[frames, gh * gw, tokens], 1.0, &mut rng);
    let masks = random_masks(&mut rng, &[0, 2], frames, gh, gw);
    check_all(softmax_attention, &masks, &two_pairs(), &logits, 1e-5, fault)
}

/// The reduced model configuration on the two-subject fixture. The finer
/// step keeps truncation error below the tolerance.
fn model_suite(seed: u64, fault: Option<Fault>) -> motionguide::Result<Vec<(&'static str, GradCheck)>> {
    let model = ToyModel::new(ToyModelConfig::tiny())?;
    let cfg = GuidanceConfig::default();
    let prompt = parse_prompt("a man is walking and a dog is running", &Lexicon::builtin(), NegativeMode::default())?;
    let priors = crate::commands::fixture_priors()?;
    let problem = GuidanceProblem::new(&prompt, &priors, &model, cfg.layer)?;
    let text = model.encode_text(&problem.tokens)?;
    let schedule = DdimSchedule::linear(cfg.total_steps)?;
    let step = 1 + (seed as usize * 3) % cfg.t2.max(1);
    let z = LatentState::from_seed(&model.config().latent_shape(), cfg.total_steps, seed).z;
    check_all(
        |z| model.forward(z, step, &schedule, &text)?.ca(cfg.layer),
        &problem.masks,
        &problem.pairs,
        &z,
        1e-4,
        fault,
    )
}

pub fn run(component: Component, seed: u64, seeds: u64, inject_fault: bool) -> CliResult {
    let fault = inject_fault.then_some(Fault::SoftmaxGradScale(1.5));
    let mut outcomes = Vec::new();
    for s in seed..seed + seeds.max(1) {
        let results = match component {
            Component::Stub => stub_suite(s, fault),
            Component::Model => model_suite(s, fault),
            Component::Losses => losses_suite(s, fault),
        }?;
        for (loss, check) in results {
            let shape = check.analytic.shape().to_vec();
            outcomes.push(Outcome { loss, seed: s, check, shape });
        }
    }
    let mut worst_failure: Option<&Outcome> = None;
    for loss in LOSSES {
        let worst = outcomes
            .iter()
            .filter(|o| o.loss == loss)
            .max_by(|a, b| a.check.max_rel_error.total_cmp(&b.check.max_rel_error))
            .expect("every loss is checked");
        let c = &worst.check;
        println!(
            "{loss:<6} worst_rel={:.3e} seed={} at={:?} analytic={:.6e} numeric={:.6e}",
            c.max_rel_error,
            worst.seed,
            coordinate(&worst.shape, c.worst_index),
            c.analytic.data()[c.worst_index],
            c.numeric.data()[c.worst_index]
        );
        if !(c.max_rel_error <= TOLERANCE) && worst_failure.is_none_or(|w| c.max_rel_error > w.check.max_rel_error) {
            worst_failure = Some(worst);
        }
    }
    match worst_failure {
        None => Ok(()),
        Some(o) => Err(Failure::new(
            EXIT_GRADCHECK,
            "gradcheck",
            format!(
                "{} relative error {:.3e} > {TOLERANCE:e} at seed {} coordinate {:?}",
                o.loss,
                o.check.max_rel_error,
                o.seed,
                coordinate(&o.shape, o.check.worst_index)
            ),
        )),
    }
}

//! Attention losses, all recorded on the tape so they can be differentiated
//! back to the latent.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::CaVar;
use crate::numerics::{Tensor, Var};
use crate::prior::MaskSet;
use crate::syntax::{Pair, SyntaxPairs};

/// Distance between two spatial attention maps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Distance {
    /// Symmetrised KL of the smoothed, normalised maps.
    #[default]
    KlSym,
    /// `KL(p || q)` of the smoothed, normalised maps.
    KlFwd,
    /// One minus the cosine similarity of the raw maps.
    Cosine,
}

impl FromStr for Distance {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "kl_sym" | "kl" => Ok(Self::KlSym),
            "kl_fwd" => Ok(Self::KlFwd),
            "cosine" => Ok(Self::Cosine),
            other => Err(Error::Input(format!("unknown distance {other:?}"))),
        }
    }
}

impl fmt::Display for Distance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::KlSym => "kl_sym",
            Self::KlFwd => "kl_fwd",
            Self::Cosine => "cosine",
        })
    }
}

/// How the positive and negative terms of each pair are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Contrastive {
    /// `pos / (pos + neg)`
    #[default]
    Ratio,
    /// `pos + neg`
    Sum,
}

impl FromStr for Contrastive {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ratio" => Ok(Self::Ratio),
            "sum" => Ok(Self::Sum),
            other => Err(Error::Input(format!("unknown contrastive form {other:?}"))),
        }
    }
}

impl fmt::Display for Contrastive {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Ratio => "ratio",
            Self::Sum => "sum",
        })
    }
}

/// Token indices the spatial losses run over, each with the key of the
/// mask it is compared against: every noun, and every verb when
/// `include_verbs` is set (verbs share their noun's mask).
pub fn tracked_tokens(pairs: &SyntaxPairs, include_verbs: bool) -> Vec<(usize, usize)> {
    let mut out: Vec<(usize, usize)> = pairs.pairs.iter().map(|p| (p.noun, p.noun)).collect();
    if include_verbs {
        out.extend(pairs.pairs.iter().map(|p| (p.verb, p.noun)));
    }
    out
}

fn mask_for<'t>(ca: &CaVar<'t>, masks: &MaskSet, token: usize, key: usize) -> Result<Tensor> {
    let mask = masks
        .get(token)
        .or_else(|| masks.get(key))
        .ok_or_else(|| Error::Input(format!("no mask for token {token}")))?;
    let expected = [ca.frames(), ca.grid_h * ca.grid_w];
    if mask.shape() != expected {
        return Err(Error::dim("spatial loss mask", mask.shape(), &expected));
    }
    Ok(mask.clone())
}

/// `[F]` ratio of attention mass inside `mask` to total mass, failing if the
/// total in any frame is at most `eps`.
fn mass_ratio<'t>(a: Var<'t>, mask: Tensor, token: usize, eps: f64) -> Result<Var<'t>> {
    let total = a.sum_lastdim()?;
    if let Some(frame) = total.with_value(|t| t.data().iter().position(|&v| !(v > eps))) {
        return Err(Error::DegenerateAttention { token, frame });
    }
    let inside = a.mul(a.tape().constant(mask))?.sum_lastdim()?;
    inside.div(total)
}

fn spatial<'t>(
    ca: &CaVar<'t>,
    masks: &MaskSet,
    pairs: &SyntaxPairs,
    include_verbs: bool,
    eps: f64,
    outside: bool,
) -> Result<Var<'t>> {
    let tape = ca.maps.tape();
    let mut acc = tape.constant(Tensor::scalar(0.0));
    for (token, key) in tracked_tokens(pairs, include_verbs) {
        let mut mask = mask_for(ca, masks, token, key)?;
        if outside {
            mask = mask.map(|m| 1.0 - m);
        }
        let ratio = mass_ratio(ca.token(token)?, mask, token, eps)?;
        let deficit = if outside { ratio } else { ratio.rsub(1.0)? };
        acc = acc.add(deficit.square()?.sum_all()?)?;
    }
    acc.scale(1.0 / ca.frames() as f64)
}

/// `(1/F) sum_tokens sum_f (1 - inside / total)^2`.
pub fn loss_fg<'t>(ca: &CaVar<'t>, masks: &MaskSet, pairs: &SyntaxPairs, include_verbs: bool, eps: f64) -> Result<Var<'t>> {
    spatial(ca, masks, pairs, include_verbs, eps, false)
}

/// `(1/F) sum_tokens sum_f (outside / total)^2`.
pub fn loss_bg<'t>(ca: &CaVar<'t>, masks: &MaskSet, pairs: &SyntaxPairs, include_verbs: bool, eps: f64) -> Result<Var<'t>> {
    spatial(ca, masks, pairs, include_verbs, eps, true)
}

/// Per-row distance between maps laid out along the last dimension; the
/// result drops that dimension.
pub fn dist<'t>(p: Var<'t>, q: Var<'t>, kind: Distance, eps: f64) -> Result<Var<'t>> {
    if p.shape() != q.shape() {
        return Err(Error::dim("dist", &p.shape(), &q.shape()));
    }
    for v in [p, q] {
        let zero_row = v.with_value(|t| {
            let n = t.last_dim().max(1);
            t.data().chunks(n).any(|row| row.iter().all(|&x| x == 0.0))
        });
        if zero_row {
            return Err(Error::DegenerateMap("attention map is all zeros".into()));
        }
    }
    let n = p.with_value(|t| t.last_dim());
    match kind {
        Distance::KlSym | Distance::KlFwd => {
            let normalize = |a: Var<'t>| -> Result<Var<'t>> {
                let s = a.shift(eps)?;
                s.div(s.sum_lastdim()?.expand_last(n)?)
            };
            let (pn, qn) = (normalize(p)?, normalize(q)?);
            let log_ratio = pn.ln()?.sub(qn.ln()?)?;
            if kind == Distance::KlFwd {
                pn.mul(log_ratio)?.sum_lastdim()
            } else {
                pn.sub(qn)?.mul(log_ratio)?.sum_lastdim()?.scale(0.5)
            }
        }
        Distance::Cosine => {
            let dot = p.mul(q)?.sum_lastdim()?;
            let norms = p.square()?.sum_lastdim()?.mul(q.square()?.sum_lastdim()?)?.sqrt()?;
            dot.div(norms)?.rsub(1.0)
        }
    }
}

/// Mean over frames of `dist(A_noun, A_verb)`.
pub fn loss_pos<'t>(ca: &CaVar<'t>, pair: Pair, kind: Distance, eps: f64) -> Result<Var<'t>> {
    dist(ca.token(pair.noun)?, ca.token(pair.verb)?, kind, eps)?.mean_all()
}

/// Sum over negatives `u` of the mean over frames of `dist(A_noun, A_u)`;
/// with `include_verb`, the verb's distances to the negatives are added too.
/// An empty negative set contributes zero.
pub fn loss_neg<'t>(
    ca: &CaVar<'t>,
    pair: Pair,
    negatives: &[usize],
    kind: Distance,
    eps: f64,
    include_verb: bool,
) -> Result<Var<'t>> {
    let mut acc = ca.maps.tape().constant(Tensor::scalar(0.0));
    if negatives.is_empty() {
        log::warn!("pair ({}, {}) has no negative tokens; L_neg = 0", pair.noun, pair.verb);
        return Ok(acc);
    }
    let anchors: &[usize] = if include_verb { &[pair.noun, pair.verb] } else { &[pair.noun] };
    for &anchor in anchors {
        let a = ca.token(anchor)?;
        for &u in negatives {
            acc = acc.add(dist(a, ca.token(u)?, kind, eps)?.mean_all()?)?;
        }
    }
    Ok(acc)
}

/// Settings the syntax loss needs; a subset of the guidance config.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntaxLossOptions {
    pub distance: Distance,
    pub contrastive: Contrastive,
    pub eps: f64,
    pub neg_includes_verb: bool,
}

/// Sum over pairs of `pos / (pos + neg)` or `pos + neg`.
pub fn loss_syt<'t>(ca: &CaVar<'t>, pairs: &SyntaxPairs, opts: SyntaxLossOptions) -> Result<Var<'t>> {
    if pairs.is_empty() {
        return Err(Error::Input("syntax loss needs at least one noun-verb pair".into()));
    }
    let mut acc = ca.maps.tape().constant(Tensor::scalar(0.0));
    for (pair, negatives) in pairs.iter() {
        let pos = loss_pos(ca, *pair, opts.distance, opts.eps)?;
        let neg = loss_neg(ca, *pair, negatives, opts.distance, opts.eps, opts.neg_includes_verb)?;
        let denom = pos.add(neg)?;
        let term = match opts.contrastive {
            Contrastive::Sum => denom,
            Contrastive::Ratio => {
                if !(denom.item()? > opts.eps) {
                    return Err(Error::DegeneratePair {
                        noun: pair.noun,
                        verb: pair.verb,
                    });
                }
                pos.div(denom)?
            }
        };
        acc = acc.add(term)?;
    }
    Ok(acc)
}

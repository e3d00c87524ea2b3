//! Trigger rules: validation and exact next-crossing computation.
//!
//! A rule compares the measurement error `|f_i(t)| = |q_i(t_k) - q_i(t)|`
//! against a threshold and fires when the threshold is first exceeded:
//!
//! - `RelativeLyapunov`: threshold `sqrt(2 a b) |q_i(t)|`, with
//!   `b = (1 - a mu_max^2 / (2 lambda2)) lambda2 / rho_ltl - gamma2 beta / mu_max`
//!   derived from the spectral constants; valid for `0 < a < 2 lambda2 / mu_max^2`
//!   and `b > 0`.
//! - `RelativeConstant`: threshold `c |q_i(t)|` with `c` in `(0, 1)`.
//! - `AbsoluteDecaying`: fires when `|f_i(t)|^2` exceeds `1 / mu(t)`, i.e.
//!   threshold `mu(t)^{-1/2}`, with `mu` an exponential or polynomial
//!   weight; requires `lambda2 / max(xi) - a/2 - beta > 0`.
//! - `AbsoluteExp`: threshold `exp(-beta t)`; also the law used by the
//!   self-triggered scheduler and the only rule admitted on reducible
//!   graphs.
//!
//! Between triggers of an agent's closed in-neighbourhood both `f_i` and
//! `q_i` are affine in `t`, so crossings of the relative rules reduce to
//! linear equations, and crossings of the decaying rules to a root of an
//! affine function minus a convex decaying one. The solver splits the
//! search interval at the error's sign change and at the analytic
//! stationary point of the gap, leaving monotone pieces that bracketed
//! bisection with secant acceleration resolves to [`tol::ROOT_TIME`].

use thiserror::Error;

use crate::dynamics::{predict_q, AffineSignal, DynamicsError, NeighborSnapshot};
use crate::graph::Laplacian;
use crate::spectral::SpectralConstants;
use crate::tol;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MuFamily {
    /// `mu(t) = exp(beta t)`
    Exponential { beta: f64 },
    /// `mu(t) = (1 + t)^p`
    Polynomial { p: f64 },
}

impl MuFamily {
    pub fn mu(&self, t: f64) -> f64 {
        match *self {
            Self::Exponential { beta } => (beta * t).exp(),
            Self::Polynomial { p } => (1.0 + t).powf(p),
        }
    }

    /// `mu(t)^{-1/2}`, the decaying threshold.
    pub fn inv_sqrt_mu(&self, t: f64) -> f64 {
        match *self {
            Self::Exponential { beta } => (-0.5 * beta * t).exp(),
            Self::Polynomial { p } => (1.0 + t).powf(-0.5 * p),
        }
    }

    /// Upper bound on `mu'(t) / mu(t)` over `t >= 0`.
    pub fn growth_bound(&self) -> f64 {
        match *self {
            Self::Exponential { beta } => beta,
            Self::Polynomial { p } => p,
        }
    }

    fn check(&self) -> Result<(), TriggerError> {
        let v = self.growth_bound();
        if !(v > 0.0) || !v.is_finite() {
            return Err(TriggerError::NonPositiveDecay { value: v });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TriggerRule {
    /// Relative threshold `sqrt(2 a b) |q_i|`; `a = None` picks the
    /// midpoint default `lambda2 / mu_max^2`.
    RelativeLyapunov { a: Option<f64>, beta: f64, mu: MuFamily },
    /// Relative threshold `c |q_i|`.
    RelativeConstant { c: f64 },
    /// Threshold `mu(t)^{-1/2}`; `a` is the analysis gain of the deviation
    /// envelope, defaulting to the value maximising the envelope margin.
    AbsoluteDecaying { mu: MuFamily, a: Option<f64> },
    /// Threshold `exp(-beta t)`.
    AbsoluteExp { beta: f64, a: Option<f64> },
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TriggerError {
    #[error("gain a = {a} is outside (0, {limit}) = (0, 2 lambda2 / mu_max^2)")]
    GainOutOfRange { a: f64, limit: f64 },
    #[error("threshold coefficient b = {b:e} is not positive; lower beta or a")]
    NonPositiveB { b: f64 },
    #[error("relative threshold fraction c = {c} must lie in (0, 1)")]
    FractionOutOfRange { c: f64 },
    #[error("decay exponent must be positive and finite, got {value}")]
    NonPositiveDecay { value: f64 },
    #[error("weight growth bound {growth} exceeds the configured beta {beta}")]
    GrowthAboveBeta { growth: f64, beta: f64 },
    #[error("decay hypothesis violated: lambda2/max(xi) - a/2 - beta = {margin:e} with a = {a}, beta = {beta}")]
    Hypothesis { a: f64, beta: f64, margin: f64 },
    #[error("rule requires the spectral constants of an irreducible graph")]
    MissingConstants,
    #[error("measurement error already exceeds the threshold at t = {t} by {excess:e}")]
    AlreadyViolated { t: f64, excess: f64 },
}

/// Deviation-envelope data attached to validated decaying rules:
/// `|x_i(t) - xbar(t)| <= mu(t)^{-1/2} / sqrt(2 a xi_i margin)` with
/// `margin = lambda2 / max(xi) - a/2 - beta`, valid from some finite time on.
#[derive(Debug, Clone, PartialEq)]
pub struct Envelope {
    pub a: f64,
    pub beta: f64,
    pub mu: MuFamily,
    pub margin: f64,
    /// `sqrt(2 a xi_i margin)` per agent.
    pub denominators: Vec<f64>,
}

/// Gain data of a validated `RelativeLyapunov` rule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LyapunovGain {
    pub a: f64,
    pub b: f64,
    /// `sqrt(2 a b)`
    pub coeff: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum ThresholdKind {
    /// `coeff * |q_i(t)|`
    Relative { coeff: f64 },
    /// `exp(-rate * t)`
    Exp { rate: f64 },
    /// `(1 + t)^{-p}`
    Power { p: f64 },
}

/// A rule checked against the spectral constants, with its threshold and
/// derived analysis data frozen.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidatedRule {
    rule: TriggerRule,
    kind: ThresholdKind,
    pub lyapunov: Option<LyapunovGain>,
    pub envelope: Option<Envelope>,
}

/// Checks a rule against the constants and freezes its derived
/// coefficients. `constants` may be `None` only for [`TriggerRule::AbsoluteExp`]
/// (the reducible-graph case); the other rules need them.
pub fn validate(
    rule: TriggerRule,
    constants: Option<&SpectralConstants>,
) -> Result<ValidatedRule, TriggerError> {
    match rule {
        TriggerRule::RelativeLyapunov { a, beta, mu } => {
            let c = constants.ok_or(TriggerError::MissingConstants)?;
            mu.check()?;
            if !(beta > 0.0) || !beta.is_finite() {
                return Err(TriggerError::NonPositiveDecay { value: beta });
            }
            if mu.growth_bound() > beta {
                return Err(TriggerError::GrowthAboveBeta { growth: mu.growth_bound(), beta });
            }
            if c.mu_max == 0.0 {
                // Single agent: no disagreement dynamics, threshold moot.
                return Ok(ValidatedRule {
                    rule,
                    kind: ThresholdKind::Relative { coeff: 0.0 },
                    lyapunov: None,
                    envelope: None,
                });
            }
            let limit = 2.0 * c.lambda2 / (c.mu_max * c.mu_max);
            let a = a.unwrap_or(0.5 * limit);
            if !(a > 0.0) || !(a < limit) {
                return Err(TriggerError::GainOutOfRange { a, limit });
            }
            let b = (1.0 - a * c.mu_max * c.mu_max / (2.0 * c.lambda2)) * c.lambda2 / c.rho_ltl
                - c.gamma2 * beta / c.mu_max;
            if !(b > 0.0) {
                return Err(TriggerError::NonPositiveB { b });
            }
            let coeff = (2.0 * a * b).sqrt();
            Ok(ValidatedRule {
                rule,
                kind: ThresholdKind::Relative { coeff },
                lyapunov: Some(LyapunovGain { a, b, coeff }),
                envelope: None,
            })
        }
        TriggerRule::RelativeConstant { c } => {
            constants.ok_or(TriggerError::MissingConstants)?;
            if !(c > 0.0) || !(c < 1.0) {
                return Err(TriggerError::FractionOutOfRange { c });
            }
            Ok(ValidatedRule {
                rule,
                kind: ThresholdKind::Relative { coeff: c },
                lyapunov: None,
                envelope: None,
            })
        }
        TriggerRule::AbsoluteDecaying { mu, a } => {
            let c = constants.ok_or(TriggerError::MissingConstants)?;
            mu.check()?;
            let envelope = if c.xi.len() == 1 {
                // Single agent: the decay hypothesis is vacuous.
                None
            } else {
                match build_envelope(c, mu, mu.growth_bound(), a)? {
                    Some(env) => Some(env),
                    None => return Err(hypothesis_err(c, mu.growth_bound(), a)),
                }
            };
            let kind = match mu {
                MuFamily::Exponential { beta } => ThresholdKind::Exp { rate: 0.5 * beta },
                MuFamily::Polynomial { p } => ThresholdKind::Power { p: 0.5 * p },
            };
            Ok(ValidatedRule { rule, kind, lyapunov: None, envelope })
        }
        TriggerRule::AbsoluteExp { beta, a } => {
            if !(beta > 0.0) || !beta.is_finite() {
                return Err(TriggerError::NonPositiveDecay { value: beta });
            }
            // The decay certificate sees |f|^2 <= exp(-2 beta t), i.e. the
            // weight mu(t) = exp(2 beta t).
            let eff = MuFamily::Exponential { beta: 2.0 * beta };
            let envelope = match constants {
                Some(c) => build_envelope(c, eff, 2.0 * beta, a)?,
                None => None,
            };
            Ok(ValidatedRule {
                rule,
                kind: ThresholdKind::Exp { rate: beta },
                lyapunov: None,
                envelope,
            })
        }
    }
}

fn hypothesis_err(c: &SpectralConstants, beta: f64, a: Option<f64>) -> TriggerError {
    let k = if c.xi_max > 0.0 { c.lambda2 / c.xi_max } else { 0.0 };
    let a = a.unwrap_or((k - beta).max(0.0));
    TriggerError::Hypothesis { a, beta, margin: k - a / 2.0 - beta }
}

/// Builds the deviation envelope when the hypothesis margin is positive.
/// With `a` unspecified, picks `a = lambda2/max(xi) - beta`, the maximiser
/// of `a * margin`. Returns `Ok(None)` when no positive margin exists.
fn build_envelope(
    c: &SpectralConstants,
    mu: MuFamily,
    beta: f64,
    a: Option<f64>,
) -> Result<Option<Envelope>, TriggerError> {
    if c.xi.len() == 1 {
        return Ok(None);
    }
    let k = c.lambda2 / c.xi_max;
    let a = match a {
        Some(v) => {
            if !(v > 0.0) || !v.is_finite() {
                return Err(TriggerError::GainOutOfRange { a: v, limit: f64::INFINITY });
            }
            v
        }
        None => {
            let opt = k - beta;
            if opt <= 0.0 {
                return Ok(None);
            }
            opt
        }
    };
    let margin = k - a / 2.0 - beta;
    if margin <= 0.0 {
        return Ok(None);
    }
    let denominators = c.xi.iter().map(|&xi| (2.0 * a * xi * margin).sqrt()).collect();
    Ok(Some(Envelope { a, beta, mu, margin, denominators }))
}

impl ValidatedRule {
    pub fn rule(&self) -> &TriggerRule {
        &self.rule
    }

    pub fn is_relative(&self) -> bool {
        matches!(self.kind, ThresholdKind::Relative { .. })
    }

    /// The decaying weight `mu` the rule certifies decay against, if any.
    pub fn effective_mu(&self) -> Option<MuFamily> {
        match self.rule {
            TriggerRule::AbsoluteDecaying { mu, .. } => Some(mu),
            TriggerRule::AbsoluteExp { beta, .. } => Some(MuFamily::Exponential { beta: 2.0 * beta }),
            _ => None,
        }
    }

    /// Threshold value at time `t` given the current `|q_i(t)|`.
    pub fn threshold_at(&self, t: f64, q_abs: f64) -> f64 {
        match self.kind {
            ThresholdKind::Relative { coeff } => coeff * q_abs,
            ThresholdKind::Exp { rate } => (-rate * t).exp(),
            ThresholdKind::Power { p } => (1.0 + t).powf(-p),
        }
    }

    /// Earliest `t` in `[lo, hi]` at which `|held - q(t)|` exceeds the
    /// threshold, with `q` affine on the whole interval. Returns `None` if
    /// the condition holds throughout. The condition must hold at `lo` up
    /// to [`tol::BOUNDARY`]; an exact boundary touch at `lo` counts as an
    /// immediate crossing.
    pub fn next_crossing(
        &self,
        held: f64,
        q: &AffineSignal,
        lo: f64,
        hi: f64,
    ) -> Result<Option<f64>, TriggerError> {
        if hi < lo {
            return Ok(None);
        }
        let f_lo = held - q.eval(lo);
        let f_slope = -q.slope;
        if f_lo == 0.0 && f_slope == 0.0 {
            // Identically zero error can never exceed a non-negative threshold.
            return Ok(None);
        }
        let g = |t: f64| {
            let f = held - q.eval(t);
            f.abs() - self.threshold_at(t, q.eval(t).abs())
        };
        let g_lo = g(lo);
        if g_lo > tol::BOUNDARY {
            return Err(TriggerError::AlreadyViolated { t: lo, excess: g_lo });
        }
        if g_lo >= 0.0 {
            return Ok(Some(lo));
        }
        // Pieces on which |f| (and |q|, for relative rules) is affine.
        let mut cuts = vec![lo, hi];
        if q.slope != 0.0 {
            let t_f = q.t_ref + (held - q.value) / q.slope;
            if t_f > lo && t_f < hi {
                cuts.push(t_f);
            }
            if matches!(self.kind, ThresholdKind::Relative { .. }) {
                let t_q = q.t_ref - q.value / q.slope;
                if t_q > lo && t_q < hi {
                    cuts.push(t_q);
                }
            }
        }
        cuts.sort_by(f64::total_cmp);
        cuts.dedup();
        let mut left = cuts[0];
        let mut g_left = g_lo;
        for &right in &cuts[1..] {
            if let Some(t) = self.crossing_on_piece(&g, held, q, left, right, g_left)? {
                return Ok(Some(t));
            }
            left = right;
            g_left = g(left);
            if g_left > 0.0 {
                // Piece evaluation placed the crossing exactly at the cut.
                return Ok(Some(left));
            }
        }
        Ok(None)
    }

    /// Crossing search on one piece where `|f|` is affine, given
    /// `g(left) = g_left <= 0`.
    fn crossing_on_piece(
        &self,
        g: &dyn Fn(f64) -> f64,
        held: f64,
        q: &AffineSignal,
        left: f64,
        right: f64,
        g_left: f64,
    ) -> Result<Option<f64>, TriggerError> {
        if right <= left {
            return Ok(None);
        }
        match self.kind {
            ThresholdKind::Relative { .. } => {
                let g_right = g(right);
                if g_right > 0.0 {
                    // g is affine here: interpolate the zero exactly.
                    let t = left + (right - left) * (-g_left) / (g_right - g_left);
                    Ok(Some(t.clamp(left, right)))
                } else {
                    Ok(None)
                }
            }
            ThresholdKind::Exp { rate } => {
                let s = abs_f_slope(held, q, left, right);
                self.monotone_pieces(g, left, right, g_left, s, |s_neg| {
                    if rate <= 0.0 {
                        return None;
                    }
                    // g'(t) = s + rate * exp(-rate t) = 0
                    let x = s_neg / rate;
                    (x > 0.0).then(|| -(x.ln()) / rate)
                })
            }
            ThresholdKind::Power { p } => {
                let s = abs_f_slope(held, q, left, right);
                self.monotone_pieces(g, left, right, g_left, s, |s_neg| {
                    if p <= 0.0 {
                        return None;
                    }
                    // g'(t) = s + p (1+t)^{-p-1} = 0
                    let base = p / s_neg;
                    (base > 0.0).then(|| base.powf(1.0 / (p + 1.0)) - 1.0)
                })
            }
        }
    }

    /// Handles a piece with affine `|f|` of slope `s` against a convex
    /// decreasing threshold: splits at the stationary point of the gap (if
    /// any) and refines the single sign change on the rising part.
    fn monotone_pieces(
        &self,
        g: &dyn Fn(f64) -> f64,
        left: f64,
        right: f64,
        g_left: f64,
        s: f64,
        peak: impl Fn(f64) -> Option<f64>,
    ) -> Result<Option<f64>, TriggerError> {
        if s >= 0.0 {
            // Gap is strictly increasing on this piece.
            let g_right = g(right);
            if g_right > 0.0 {
                return Ok(Some(refine(g, left, right, g_left, g_right)));
            }
            return Ok(None);
        }
        match peak(-s) {
            Some(t_peak) if t_peak > left && t_peak < right => {
                let g_peak = g(t_peak);
                if g_peak > 0.0 {
                    Ok(Some(refine(g, left, t_peak, g_left, g_peak)))
                } else {
                    // Decreasing after the peak: stays non-positive.
                    Ok(None)
                }
            }
            Some(t_peak) if t_peak <= left => Ok(None), // decreasing throughout
            _ => {
                // Increasing throughout (peak beyond the piece or absent).
                let g_right = g(right);
                if g_right > 0.0 {
                    Ok(Some(refine(g, left, right, g_left, g_right)))
                } else {
                    Ok(None)
                }
            }
        }
    }
}

/// Slope of `|held - q(t)|` on a piece where it does not change sign,
/// determined at the midpoint.
fn abs_f_slope(held: f64, q: &AffineSignal, left: f64, right: f64) -> f64 {
    let mid = 0.5 * (left + right);
    let f_mid = held - q.eval(mid);
    if f_mid >= 0.0 {
        -q.slope
    } else {
        q.slope
    }
}

/// Bracketed root refinement: `g(a) <= 0 < g(b)`. Secant steps clipped to
/// the bracket, bisection otherwise; stops at [`tol::ROOT_TIME`] width or
/// 100 iterations.
fn refine(g: &dyn Fn(f64) -> f64, mut a: f64, mut b: f64, mut ga: f64, mut gb: f64) -> f64 {
    for _ in 0..100 {
        if b - a <= tol::ROOT_TIME {
            break;
        }
        let secant = if gb > ga { b - gb * (b - a) / (gb - ga) } else { 0.5 * (a + b) };
        let mid = 0.5 * (a + b);
        let t = if secant > a && secant < b {
            // Alternate toward bisection to guarantee bracket shrinkage.
            0.5 * (secant + mid)
        } else {
            mid
        };
        let gt = g(t);
        if gt > 0.0 {
            b = t;
            gb = gt;
        } else {
            a = t;
            ga = gt;
        }
    }
    0.5 * (a + b)
}

#[derive(Debug, Error)]
pub enum ScheduleError {
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Trigger(#[from] TriggerError),
}

/// The self-triggered step: predict `q_i` from the snapshot and compute the
/// next crossing of the rule, valid until an in-neighbour triggers (at
/// which point the engine calls this again with a fresh snapshot).
pub fn self_triggered_schedule(
    rule: &ValidatedRule,
    l: &Laplacian,
    snap: &NeighborSnapshot,
    horizon: f64,
) -> Result<Option<f64>, ScheduleError> {
    let (_, affine) = predict_q(l, snap, snap.as_of)?;
    let held = snap.own.control;
    Ok(rule.next_crossing(held, &affine, snap.as_of, horizon)?)
}

//! L-BFGS minimizer with a strong-Wolfe line search.
//!
//! The search direction comes from the usual two-loop recursion over the last
//! `memory` curvature pairs. Pairs with `sᵀy ≤ 1e-10 ‖s‖ ‖y‖` are skipped, and
//! a direction that fails to descend is replaced by the negative gradient.
//!
//! The line search only ever uses the loss and gradient supplied by the
//! objective. When the gradient is an approximation, as with the ICE
//! objective, the curvature condition may be out of reach. If the trial budget
//! runs out, the lowest trial that met sufficient decrease is accepted instead
//! (counted in [`OptimizerResult::sufficient_decrease_steps`]). Without such a
//! trial the minimizer stops with [`Termination::LineSearchFailed`] and
//! returns the last accepted point.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ice::ObjectiveValue;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LineSearchConfig {
    /// Sufficient decrease constant.
    pub c1: f64,
    /// Curvature constant.
    pub c2: f64,
    /// Maximum objective evaluations per line search.
    pub max_trials: usize,
    /// Accept a sufficient-decrease step when no strong-Wolfe step is found.
    pub sufficient_decrease_fallback: bool,
}

impl Default for LineSearchConfig {
    fn default() -> Self {
        Self {
            c1: 1e-4,
            c2: 0.9,
            max_trials: 20,
            sufficient_decrease_fallback: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub memory: usize,
    pub max_iterations: usize,
    /// Converged when `‖g‖∞ ≤ tol · max(1, ‖θ‖∞)`.
    pub gradient_tolerance: f64,
    /// Converged when an iteration improves the loss by less than
    /// `tol · max(1, |loss|)`.
    pub relative_loss_tolerance: f64,
    pub line_search: LineSearchConfig,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            memory: 10,
            max_iterations: 200,
            gradient_tolerance: 1e-6,
            relative_loss_tolerance: 1e-9,
            line_search: LineSearchConfig::default(),
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let ls = &self.line_search;
        if self.memory == 0 {
            return Err(Error::InvalidArgument("memory must be at least 1".into()));
        }
        if !(self.gradient_tolerance > 0.0) || !(self.relative_loss_tolerance > 0.0) {
            return Err(Error::InvalidArgument("tolerances must be positive".into()));
        }
        if !(0.0 < ls.c1 && ls.c1 < ls.c2 && ls.c2 < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "line search needs 0 < c1 < c2 < 1, got c1 = {}, c2 = {}",
                ls.c1, ls.c2
            )));
        }
        if ls.max_trials == 0 {
            return Err(Error::InvalidArgument("line search needs at least one trial".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    GradientConverged,
    LossConverged,
    MaxIterations,
    LineSearchFailed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerResult {
    pub theta: Vec<f64>,
    pub loss: f64,
    pub gradient: Vec<f64>,
    pub iterations: usize,
    pub evaluations: usize,
    pub termination: Termination,
    /// Loss at the start point followed by the loss after every accepted step.
    pub loss_history: Vec<f64>,
    /// Accepted steps that met sufficient decrease but not the curvature condition.
    pub sufficient_decrease_steps: usize,
}

impl OptimizerResult {
    /// Whether the recorded losses decrease strictly.
    pub fn is_monotone(&self) -> bool {
        self.loss_history.windows(2).all(|w| w[1] < w[0])
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn max_abs(a: &[f64]) -> f64 {
    a.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

struct History {
    s: Vec<Vec<f64>>,
    y: Vec<Vec<f64>>,
    rho: Vec<f64>,
    capacity: usize,
}

impl History {
    fn new(capacity: usize) -> Self {
        Self {
            s: Vec::with_capacity(capacity),
            y: Vec::with_capacity(capacity),
            rho: Vec::with_capacity(capacity),
            capacity,
        }
    }

    fn clear(&mut self) {
        self.s.clear();
        self.y.clear();
        self.rho.clear();
    }

    /// Stores the pair unless it fails the curvature test. Returns whether it was kept.
    fn push(&mut self, s: Vec<f64>, y: Vec<f64>) -> bool {
        let sy = dot(&s, &y);
        if !(sy > 1e-10 * norm(&s) * norm(&y)) {
            return false;
        }
        if self.s.len() == self.capacity {
            self.s.remove(0);
            self.y.remove(0);
            self.rho.remove(0);
        }
        self.s.push(s);
        self.y.push(y);
        self.rho.push(1.0 / sy);
        true
    }

    /// `-H g` by the two-loop recursion.
    fn direction(&self, g: &[f64]) -> Vec<f64> {
        let m = self.s.len();
        let mut q = g.to_vec();
        let mut alpha = vec![0.0; m];
        for j in (0..m).rev() {
            alpha[j] = self.rho[j] * dot(&self.s[j], &q);
            for (qi, yi) in q.iter_mut().zip(&self.y[j]) {
                *qi -= alpha[j] * yi;
            }
        }
        if let (Some(s), Some(y)) = (self.s.last(), self.y.last()) {
            let gamma = dot(s, y) / dot(y, y);
            for qi in q.iter_mut() {
                *qi *= gamma;
            }
        }
        for j in 0..m {
            let beta = self.rho[j] * dot(&self.y[j], &q);
            for (qi, si) in q.iter_mut().zip(&self.s[j]) {
                *qi += (alpha[j] - beta) * si;
            }
        }
        q.iter_mut().for_each(|v| *v = -*v);
        q
    }
}

#[derive(Clone)]
struct Trial {
    alpha: f64,
    loss: f64,
    slope: f64,
    theta: Vec<f64>,
    gradient: Vec<f64>,
}

struct LineSearch<'a, F> {
    objective: &'a mut F,
    theta: &'a [f64],
    direction: &'a [f64],
    f0: f64,
    slope0: f64,
    config: LineSearchConfig,
    evaluations: usize,
    /// Lowest trial so far that met sufficient decrease.
    fallback: Option<Trial>,
}

impl<F: FnMut(&[f64]) -> ObjectiveValue> LineSearch<'_, F> {
    fn budget_left(&self) -> bool {
        self.evaluations < self.config.max_trials
    }

    fn probe(&mut self, alpha: f64) -> Option<Trial> {
        self.evaluations += 1;
        let theta: Vec<f64> = self
            .theta
            .iter()
            .zip(self.direction)
            .map(|(x, d)| x + alpha * d)
            .collect();
        let value = (self.objective)(&theta);
        if !value.is_finite() {
            return None;
        }
        let slope = dot(&value.gradient, self.direction);
        let trial = Trial {
            alpha,
            loss: value.loss,
            slope,
            theta,
            gradient: value.gradient,
        };
        if self.armijo(&trial) && self.fallback.as_ref().is_none_or(|b| trial.loss < b.loss) {
            self.fallback = Some(trial.clone());
        }
        Some(trial)
    }

    /// Runs the search. The flag is false for a sufficient-decrease-only step.
    fn run(mut self, initial: f64) -> (Option<(Trial, bool)>, usize) {
        if let Some(t) = self.search(initial) {
            return (Some((t, true)), self.evaluations);
        }
        let fallback = self.fallback.take().filter(|_| self.config.sufficient_decrease_fallback);
        (fallback.map(|t| (t, false)), self.evaluations)
    }

    /// Sufficient decrease. The strict comparison rejects steps where
    /// `c1 α slope` is lost to rounding.
    fn armijo(&self, t: &Trial) -> bool {
        t.loss < self.f0 && t.loss <= self.f0 + self.config.c1 * t.alpha * self.slope0
    }

    fn curvature(&self, t: &Trial) -> bool {
        t.slope.abs() <= -self.config.c2 * self.slope0
    }

    fn search(&mut self, initial: f64) -> Option<Trial> {
        let mut prev = (0.0, self.f0, self.slope0);
        let mut alpha = initial;
        let mut first = true;
        while self.budget_left() {
            let Some(t) = self.probe(alpha) else {
                // non-finite: shrink toward the last finite point
                alpha = 0.5 * (prev.0 + alpha);
                continue;
            };
            if !self.armijo(&t) || (!first && t.loss >= prev.1) {
                return self.zoom(prev, (t.alpha, t.loss, t.slope));
            }
            if self.curvature(&t) {
                return Some(t);
            }
            if t.slope >= 0.0 {
                return self.zoom((t.alpha, t.loss, t.slope), prev);
            }
            prev = (t.alpha, t.loss, t.slope);
            alpha = 2.0 * t.alpha;
            first = false;
        }
        None
    }

    /// Interval search between `lo` (satisfies sufficient decrease, lowest
    /// loss so far) and `hi`. Each bracket end is `(alpha, loss, slope)`.
    fn zoom(&mut self, mut lo: (f64, f64, f64), mut hi: (f64, f64, f64)) -> Option<Trial> {
        while self.budget_left() {
            let alpha = interpolate(lo, hi);
            let Some(t) = self.probe(alpha) else {
                hi = (alpha, f64::INFINITY, f64::NAN);
                continue;
            };
            if !self.armijo(&t) || t.loss >= lo.1 {
                hi = (t.alpha, t.loss, t.slope);
            } else {
                if self.curvature(&t) {
                    return Some(t);
                }
                if t.slope * (hi.0 - lo.0) >= 0.0 {
                    hi = lo;
                }
                lo = (t.alpha, t.loss, t.slope);
            }
            if (hi.0 - lo.0).abs() <= f64::EPSILON * lo.0.abs().max(1e-300) {
                break;
            }
        }
        None
    }
}

/// Cubic interpolation between two bracket ends, safeguarded to the middle
/// 80% of the interval; bisection when the cubic is unusable.
fn interpolate(lo: (f64, f64, f64), hi: (f64, f64, f64)) -> f64 {
    let (a0, f0, g0) = lo;
    let (a1, f1, g1) = hi;
    let width = a1 - a0;
    let mid = 0.5 * (a0 + a1);
    if !(f1.is_finite() && g1.is_finite()) {
        return mid;
    }
    let d1 = g0 + g1 - 3.0 * (f0 - f1) / (a0 - a1);
    let disc = d1 * d1 - g0 * g1;
    if !(disc >= 0.0) {
        return mid;
    }
    let d2 = width.signum() * disc.sqrt();
    let denom = g1 - g0 + 2.0 * d2;
    if denom == 0.0 {
        return mid;
    }
    let candidate = a1 - width * (g1 + d2 - d1) / denom;
    let (left, right) = if a0 < a1 { (a0, a1) } else { (a1, a0) };
    let margin = 0.1 * (right - left);
    if candidate.is_finite() && candidate >= left + margin && candidate <= right - margin {
        candidate
    } else {
        mid
    }
}

/// Minimizes `objective` from `theta0`.
///
/// Errors only on invalid configuration or a non-finite start; every other
/// failure surfaces as a [`Termination`] on the result.
pub fn minimize<F>(mut objective: F, theta0: &[f64], config: &OptimizerConfig) -> Result<OptimizerResult>
where
    F: FnMut(&[f64]) -> ObjectiveValue,
{
    config.validate()?;
    let mut theta = theta0.to_vec();
    let start = objective(&theta);
    if !start.is_finite() {
        return Err(Error::NonFinite("objective at the starting point"));
    }
    if start.gradient.len() != theta.len() {
        return Err(Error::DimensionMismatch {
            what: "objective gradient",
            expected: theta.len(),
            got: start.gradient.len(),
        });
    }
    let mut loss = start.loss;
    let mut gradient = start.gradient;
    let mut evaluations = 1;
    let mut history = History::new(config.memory);
    let mut loss_history = vec![loss];
    let mut sufficient_decrease_steps = 0;

    let mut iterations = 0;
    let termination = loop {
        if max_abs(&gradient) <= config.gradient_tolerance * max_abs(&theta).max(1.0) {
            break Termination::GradientConverged;
        }
        if iterations >= config.max_iterations {
            break Termination::MaxIterations;
        }

        let mut direction = history.direction(&gradient);
        let mut slope = dot(&gradient, &direction);
        if !(slope < 0.0) || direction.iter().any(|d| !d.is_finite()) {
            history.clear();
            direction = gradient.iter().map(|g| -g).collect();
            slope = dot(&gradient, &direction);
        }
        let initial = if history.s.is_empty() {
            (1.0 / max_abs(&gradient)).min(1.0)
        } else {
            1.0
        };

        let search = LineSearch {
            objective: &mut objective,
            theta: &theta,
            direction: &direction,
            f0: loss,
            slope0: slope,
            config: config.line_search,
            evaluations: 0,
            fallback: None,
        };
        let (accepted, used) = search.run(initial);
        evaluations += used;
        let Some((step, wolfe)) = accepted else {
            break Termination::LineSearchFailed;
        };
        iterations += 1;
        if !wolfe {
            sufficient_decrease_steps += 1;
        }

        let s: Vec<f64> = step.theta.iter().zip(&theta).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = step.gradient.iter().zip(&gradient).map(|(a, b)| a - b).collect();
        history.push(s, y);

        let improvement = loss - step.loss;
        let scale = loss.abs().max(step.loss.abs()).max(1.0);
        theta = step.theta;
        loss = step.loss;
        gradient = step.gradient;
        loss_history.push(loss);

        if improvement < config.relative_loss_tolerance * scale {
            break Termination::LossConverged;
        }
    };

    Ok(OptimizerResult {
        theta,
        loss,
        gradient,
        iterations,
        evaluations,
        termination,
        loss_history,
        sufficient_decrease_steps,
    })
}

//! Limited-memory BFGS with a strong-Wolfe line search.
//!
//! Search directions come from the two-loop recursion with the initial
//! inverse Hessian scaled by `γ = sᵀy / yᵀy` from the newest pair. The line
//! search brackets a step satisfying
//!
//! ```text
//! φ(α) ≤ φ(0) + c1 α φ'(0)      and      |φ'(α)| ≤ c2 |φ'(0)|
//! ```
//!
//! and then zooms with safeguarded cubic interpolation. A trial point whose
//! value or gradient is not finite is rejected and the step halved.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub memory: usize,
    pub max_iterations: usize,
    /// Infinity-norm gradient tolerance.
    pub grad_tolerance: f64,
    pub wolfe_c1: f64,
    pub wolfe_c2: f64,
    /// Total trial evaluations allowed per line search.
    pub max_line_search_steps: usize,
    /// Stop as converged when an accepted step reduces the objective by less
    /// than `rel_value_tolerance · max(|f|, |f_prev|, 1)`. Zero disables it.
    pub rel_value_tolerance: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            memory: 10,
            max_iterations: 1000,
            grad_tolerance: 1e-8,
            wolfe_c1: 1e-4,
            wolfe_c2: 0.9,
            max_line_search_steps: 40,
            rel_value_tolerance: 0.0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.memory == 0 {
            return Err(Error::Config("optimizer memory must be positive".into()));
        }
        if !(0.0 < self.wolfe_c1 && self.wolfe_c1 < self.wolfe_c2 && self.wolfe_c2 < 1.0) {
            return Err(Error::Config(format!(
                "need 0 < c1 < c2 < 1, got c1={} c2={}",
                self.wolfe_c1, self.wolfe_c2
            )));
        }
        if !(self.grad_tolerance >= 0.0) || !(self.rel_value_tolerance >= 0.0) {
            return Err(Error::Config("tolerances must be non-negative".into()));
        }
        if self.max_line_search_steps == 0 {
            return Err(Error::Config("max_line_search_steps must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Converged,
    MaxIters,
    LineSearchFailure,
}

impl Termination {
    pub fn as_str(&self) -> &'static str {
        match self {
            Termination::Converged => "converged",
            Termination::MaxIters => "max_iters",
            Termination::LineSearchFailure => "line_search_failure",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "converged" => Some(Termination::Converged),
            "max_iters" => Some(Termination::MaxIters),
            "line_search_failure" => Some(Termination::LineSearchFailure),
            _ => None,
        }
    }
}

impl std::fmt::Display for Termination {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One accepted line-search step, kept so callers can audit the Wolfe conditions.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AcceptedStep {
    pub alpha: f64,
    pub value_before: f64,
    pub value_after: f64,
    pub slope_before: f64,
    pub slope_after: f64,
}

#[derive(Clone, Debug)]
pub struct OptimizeResult {
    pub minimizer: Vec<f64>,
    pub final_value: f64,
    pub final_grad_norm: f64,
    pub iterations: usize,
    pub termination: Termination,
    pub steps: Vec<AcceptedStep>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

struct Trial {
    alpha: f64,
    value: f64,
    slope: f64,
    x: Vec<f64>,
    grad: Vec<f64>,
}

struct Evaluator<'a, F> {
    objective: F,
    x: &'a [f64],
    dir: &'a [f64],
    evals: usize,
}

impl<F: FnMut(&[f64], &mut [f64]) -> f64> Evaluator<'_, F> {
    /// `None` when the objective is not finite at `x + alpha d`.
    fn at(&mut self, alpha: f64) -> Option<Trial> {
        self.evals += 1;
        let x: Vec<f64> = self.x.iter().zip(self.dir).map(|(xi, di)| xi + alpha * di).collect();
        let mut grad = vec![0.0; x.len()];
        let value = (self.objective)(&x, &mut grad);
        if !value.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return None;
        }
        let slope = dot(&grad, self.dir);
        Some(Trial { alpha, value, slope, x, grad })
    }
}

/// Minimizer of the cubic matching values and slopes at `a` and `b`, clamped
/// to the inner 80% of the interval; bisection when the cubic is degenerate.
fn cubic_step(a: f64, fa: f64, da: f64, b: f64, fb: f64, db: f64) -> f64 {
    let (lo, hi) = if a < b { (a, b) } else { (b, a) };
    let width = hi - lo;
    let d1 = da + db - 3.0 * (fa - fb) / (a - b);
    let disc = d1 * d1 - da * db;
    let mid = 0.5 * (a + b);
    let candidate = if disc >= 0.0 {
        let d2 = (b - a).signum() * disc.sqrt();
        let denom = db - da + 2.0 * d2;
        if denom != 0.0 {
            b - (b - a) * (db + d2 - d1) / denom
        } else {
            mid
        }
    } else {
        mid
    };
    if !candidate.is_finite() {
        return mid;
    }
    candidate.clamp(lo + 0.1 * width, hi - 0.1 * width)
}

enum Search {
    Accepted(Trial),
    Failed,
}

fn line_search<F: FnMut(&[f64], &mut [f64]) -> f64>(
    eval: &mut Evaluator<'_, F>,
    f0: f64,
    d0: f64,
    alpha0: f64,
    cfg: &OptimizerConfig,
) -> Search {
    let (c1, c2) = (cfg.wolfe_c1, cfg.wolfe_c2);
    let budget = cfg.max_line_search_steps;
    let armijo = |t: &Trial| t.value <= f0 + c1 * t.alpha * d0;
    let curvature = |t: &Trial| t.slope.abs() <= -c2 * d0;

    let mut prev = Trial { alpha: 0.0, value: f0, slope: d0, x: Vec::new(), grad: Vec::new() };
    let mut alpha = alpha0;
    let mut first = true;
    // bracketing phase
    let (mut lo, mut hi) = loop {
        if eval.evals >= budget {
            return Search::Failed;
        }
        let Some(t) = eval.at(alpha) else {
            alpha = prev.alpha + 0.5 * (alpha - prev.alpha);
            if alpha - prev.alpha <= f64::EPSILON * alpha.abs().max(1e-300) {
                return Search::Failed;
            }
            continue;
        };
        if !armijo(&t) || (!first && t.value >= prev.value) {
            break (prev, t);
        }
        if curvature(&t) {
            return Search::Accepted(t);
        }
        if t.slope >= 0.0 {
            break (t, prev);
        }
        first = false;
        alpha = 2.0 * t.alpha;
        prev = t;
    };
    // zoom phase: lo satisfies Armijo with the lowest value seen, hi brackets.
    loop {
        if eval.evals >= budget {
            return Search::Failed;
        }
        if (hi.alpha - lo.alpha).abs() <= f64::EPSILON * lo.alpha.abs().max(hi.alpha.abs()) {
            return Search::Failed;
        }
        let a = if hi.x.is_empty() && hi.alpha != 0.0 {
            // hi was non-finite-adjacent or bare; bisect
            0.5 * (lo.alpha + hi.alpha)
        } else {
            cubic_step(lo.alpha, lo.value, lo.slope, hi.alpha, hi.value, hi.slope)
        };
        let Some(t) = eval.at(a) else {
            hi = Trial { alpha: a, value: f64::INFINITY, slope: 0.0, x: Vec::new(), grad: Vec::new() };
            continue;
        };
        if !armijo(&t) || t.value >= lo.value {
            hi = t;
        } else {
            if curvature(&t) {
                return Search::Accepted(t);
            }
            if t.slope * (hi.alpha - lo.alpha) >= 0.0 {
                hi = lo;
            }
            lo = t;
        }
    }
}

/// Minimizes `objective`, which returns the value and writes the gradient.
/// A non-finite value is treated as "outside the domain".
pub fn minimize<F>(mut objective: F, start: &[f64], cfg: &OptimizerConfig) -> Result<OptimizeResult>
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    cfg.validate()?;
    let n = start.len();
    let mut x = start.to_vec();
    let mut g = vec![0.0; n];
    let mut f = objective(&x, &mut g);
    if !f.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return Err(Error::Input("objective is not finite at the starting point".into()));
    }
    let mut history: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(cfg.memory);
    let mut steps = Vec::new();
    let mut iterations = 0;
    let mut termination = Termination::MaxIters;

    if inf_norm(&g) <= cfg.grad_tolerance {
        termination = Termination::Converged;
    }
    let mut alpha_buf = vec![0.0; cfg.memory];
    while termination != Termination::Converged && iterations < cfg.max_iterations {
        // two-loop recursion
        let mut q: Vec<f64> = g.clone();
        for (i, (s, y, rho)) in history.iter().enumerate().rev() {
            let a = rho * dot(s, &q);
            alpha_buf[i] = a;
            q.iter_mut().zip(y).for_each(|(qi, yi)| *qi -= a * yi);
        }
        let gamma = history.back().map_or(1.0, |(s, y, _)| dot(s, y) / dot(y, y));
        q.iter_mut().for_each(|v| *v *= gamma);
        for (i, (s, y, rho)) in history.iter().enumerate() {
            let b = rho * dot(y, &q);
            let a = alpha_buf[i];
            q.iter_mut().zip(s).for_each(|(qi, si)| *qi += (a - b) * si);
        }
        let mut dir: Vec<f64> = q.into_iter().map(|v| -v).collect();
        let mut d0 = dot(&g, &dir);
        if !(d0 < 0.0) {
            history.clear();
            dir = g.iter().map(|v| -v).collect();
            d0 = dot(&g, &dir);
        }
        let alpha0 = if history.is_empty() { (1.0 / dot(&g, &g).sqrt()).min(1.0) } else { 1.0 };

        let mut eval = Evaluator { objective: &mut objective, x: &x, dir: &dir, evals: 0 };
        let trial = match line_search(&mut eval, f, d0, alpha0, cfg) {
            Search::Accepted(t) => t,
            Search::Failed => {
                termination = Termination::LineSearchFailure;
                break;
            }
        };
        steps.push(AcceptedStep {
            alpha: trial.alpha,
            value_before: f,
            value_after: trial.value,
            slope_before: d0,
            slope_after: trial.slope,
        });
        let s: Vec<f64> = dir.iter().map(|d| trial.alpha * d).collect();
        let y: Vec<f64> = trial.grad.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > f64::EPSILON * dot(&y, &y) {
            if history.len() == cfg.memory {
                history.pop_front();
            }
            history.push_back((s, y, 1.0 / sy));
        }
        let f_prev = f;
        x = trial.x;
        g = trial.grad;
        f = trial.value;
        iterations += 1;
        if inf_norm(&g) <= cfg.grad_tolerance {
            termination = Termination::Converged;
        } else if cfg.rel_value_tolerance > 0.0
            && f_prev - f <= cfg.rel_value_tolerance * f.abs().max(f_prev.abs()).max(1.0)
        {
            termination = Termination::Converged;
        }
    }
    Ok(OptimizeResult { final_grad_norm: inf_norm(&g), minimizer: x, final_value: f, iterations, termination, steps })
}

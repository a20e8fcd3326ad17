//! Variational annealing over the model precision `R_f`.
//!
//! `K` paths start at a minimizer of the `R_f = 0` action (measured components
//! pinned, everything else uniform). At step `β` the precision is
//! `R_f = R_f0 · α^β`; each of the `K` paths is re-minimized starting from
//! where it ended at step `β - 1`. Every minimization is recorded in an
//! [`ActionLedger`], keyed by initialization index so a level keeps its
//! identity across steps.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::action::{ActionBreakdown, Precisions, StandardModel};
use crate::error::{Error, Result};
use crate::lbfgs::{minimize, OptimizerConfig, Termination};
use crate::seed::{self, Purpose};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnealSchedule {
    pub r_f0: f64,
    pub alpha: f64,
    pub n_beta: usize,
    pub k_inits: usize,
    #[serde(default = "default_rm")]
    pub r_m: f64,
}

fn default_rm() -> f64 {
    1.0
}

impl Default for AnnealSchedule {
    /// `log10(R_f/R_m)` from -8 to 10 in steps of `α = 1.1`, `K = 100`.
    fn default() -> Self {
        AnnealSchedule::spanning(-8.0, 10.0, 1.1, 100)
    }
}

impl AnnealSchedule {
    /// Schedule with `R_m = 1` whose first step sits at `log10(R_f) = lo` and
    /// whose last step is the first to reach `hi` (within 1e-9 decades).
    pub fn spanning(lo: f64, hi: f64, alpha: f64, k_inits: usize) -> Self {
        let steps = ((hi - lo) / alpha.log10() - 1e-9).ceil().max(0.0) as usize;
        AnnealSchedule { r_f0: 10f64.powf(lo), alpha, n_beta: steps + 1, k_inits, r_m: 1.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 1.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("alpha must exceed 1, got {}", self.alpha)));
        }
        if !(self.r_f0 > 0.0 && self.r_f0.is_finite()) {
            return Err(Error::Config(format!("r_f0 must be positive, got {}", self.r_f0)));
        }
        if !(self.r_m > 0.0 && self.r_m.is_finite()) {
            return Err(Error::Config(format!("r_m must be positive, got {}", self.r_m)));
        }
        if self.k_inits == 0 || self.n_beta == 0 {
            return Err(Error::Config("k_inits and n_beta must be at least 1".into()));
        }
        Ok(())
    }

    pub fn r_f(&self, beta: usize) -> f64 {
        self.r_f0 * self.alpha.powi(beta as i32)
    }

    pub fn log10_ratio(&self, beta: usize) -> f64 {
        (self.r_f(beta) / self.r_m).log10()
    }

    pub fn precisions(&self, beta: usize) -> Precisions {
        Precisions { r_m: self.r_m, r_f: self.r_f(beta) }
    }
}

/// Uniform ranges for the variables the `R_f = 0` minimum leaves free.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InitRanges {
    /// Unmeasured states. `None` uses the activation range (perceptron) or the
    /// observed data range (dynamics).
    pub state: Option<(f64, f64)>,
    pub weights: (f64, f64),
    /// Estimated model parameters. `None` uses the problem's own range.
    pub params: Option<(f64, f64)>,
}

impl Default for InitRanges {
    fn default() -> Self {
        InitRanges { state: None, weights: (-1.0, 1.0), params: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LedgerRow {
    pub beta: usize,
    pub log10_rf_rm: f64,
    pub init_index: usize,
    pub total: f64,
    pub measurement_term: f64,
    pub model_term: f64,
    pub grad_norm: f64,
    pub termination: Termination,
}

pub const LEDGER_HEADER: &str = "beta,log10_rf_rm,init_index,total,measurement_term,model_term,grad_norm,termination";

/// Rows ordered by `beta`, then `init_index`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ActionLedger {
    pub rows: Vec<LedgerRow>,
}

impl ActionLedger {
    pub fn n_beta(&self) -> usize {
        self.rows.last().map_or(0, |r| r.beta + 1)
    }

    pub fn k_inits(&self) -> usize {
        self.rows.iter().take_while(|r| r.beta == 0).count()
    }

    pub fn rows_at(&self, beta: usize) -> &[LedgerRow] {
        let k = self.k_inits();
        let start = (beta * k).min(self.rows.len());
        &self.rows[start..(start + k).min(self.rows.len())]
    }

    pub fn final_rows(&self) -> &[LedgerRow] {
        match self.n_beta() {
            0 => &[],
            n => self.rows_at(n - 1),
        }
    }

    pub fn final_log10_ratio(&self) -> Option<f64> {
        self.rows.last().map(|r| r.log10_rf_rm)
    }

    /// Totals at step `beta` in ascending order; ties keep init order.
    pub fn levels_at(&self, beta: usize) -> Vec<(usize, f64)> {
        let mut v: Vec<(usize, f64)> = self.rows_at(beta).iter().map(|r| (r.init_index, r.total)).collect();
        v.sort_by(|a, b| a.1.total_cmp(&b.1));
        v
    }

    /// Series of totals for one initialization across all steps.
    pub fn level_series(&self, init_index: usize) -> Vec<f64> {
        self.rows.iter().filter(|r| r.init_index == init_index).map(|r| r.total).collect()
    }

    /// Checks the structural invariants: exactly K rows per step with
    /// init indices 0..K, and a strictly increasing abscissa.
    pub fn validate(&self) -> Result<()> {
        let k = self.k_inits();
        if k == 0 {
            return Err(Error::Input("ledger is empty".into()));
        }
        if self.rows.len() != k * self.n_beta() {
            return Err(Error::Input(format!("ledger has {} rows, expected {}·{}", self.rows.len(), k, self.n_beta())));
        }
        for (i, r) in self.rows.iter().enumerate() {
            if r.beta != i / k || r.init_index != i % k {
                return Err(Error::Input(format!("row {i} is out of order (beta {}, init {})", r.beta, r.init_index)));
            }
        }
        for b in 1..self.n_beta() {
            if !(self.rows_at(b)[0].log10_rf_rm > self.rows_at(b - 1)[0].log10_rf_rm) {
                return Err(Error::Input(format!("log10_rf_rm does not increase at beta {b}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct AnnealOutcome {
    pub ledger: ActionLedger,
    /// The K paths after the last step, by init index.
    pub final_paths: Vec<Vec<f64>>,
    pub best_index: usize,
    pub best: Vec<f64>,
    pub best_breakdown: ActionBreakdown,
}

/// The `K` starting paths. Path `i` draws from its own stream of `seed`, so the
/// result does not depend on how many are requested or in which order.
pub fn init_paths_rf0<P: StandardModel + ?Sized>(problem: &P, ranges: &InitRanges, k: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    if k == 0 {
        return Err(Error::Input("need at least one initial path".into()));
    }
    Ok((0..k)
        .map(|i| {
            let mut rng = seed::stream(seed, Purpose::PathInit, i as u64);
            problem.init_path(ranges, &mut rng)
        })
        .collect())
}

struct Track {
    path: Vec<f64>,
    breakdown: ActionBreakdown,
    grad_norm: f64,
    termination: Termination,
}

fn relax<P: StandardModel + ?Sized>(problem: &P, start: &[f64], prec: &Precisions, cfg: &OptimizerConfig) -> std::result::Result<Track, Error> {
    // Same minimizers as A itself, but the stopping tolerance now measures
    // against the weaker of the two terms instead of an absolute scale.
    let scale = prec.r_m.min(prec.r_f);
    let objective = |x: &[f64], g: &mut [f64]| match problem.value_and_gradient(x, prec, g) {
        Ok(b) => {
            g.iter_mut().for_each(|v| *v /= scale);
            b.total / scale
        }
        Err(_) => f64::NAN,
    };
    let r = minimize(objective, start, cfg)?;
    let breakdown = problem.breakdown(&r.minimizer, prec)?;
    Ok(Track { path: r.minimizer, breakdown, grad_norm: r.final_grad_norm * scale, termination: r.termination })
}

/// Runs the full schedule. The `K` minimizations at one step run in parallel;
/// results are gathered by index so the ledger does not depend on the worker count.
pub fn anneal<P: StandardModel + ?Sized>(
    problem: &P,
    schedule: &AnnealSchedule,
    opt: &OptimizerConfig,
    ranges: &InitRanges,
    seed: u64,
) -> Result<AnnealOutcome> {
    schedule.validate()?;
    opt.validate()?;
    let mut paths = init_paths_rf0(problem, ranges, schedule.k_inits, seed)?;
    let mut ledger = ActionLedger { rows: Vec::with_capacity(schedule.k_inits * schedule.n_beta) };
    let mut last: Vec<ActionBreakdown> = Vec::new();

    for beta in 0..schedule.n_beta {
        let prec = schedule.precisions(beta);
        let results: Vec<std::result::Result<Track, Error>> =
            paths.par_iter().map(|p| relax(problem, p, &prec, opt)).collect();
        if results.iter().all(|r| r.is_err()) {
            let first = results.into_iter().find_map(|r| r.err()).expect("non-empty");
            return Err(Error::NumericDomain(format!("every initialization failed at beta {beta}: {first}")));
        }
        last.clear();
        for (i, result) in results.into_iter().enumerate() {
            let row_base = LedgerRow {
                beta,
                log10_rf_rm: schedule.log10_ratio(beta),
                init_index: i,
                total: 0.0,
                measurement_term: 0.0,
                model_term: 0.0,
                grad_norm: f64::NAN,
                termination: Termination::LineSearchFailure,
            };
            let (b, row) = match result {
                Ok(t) => {
                    paths[i] = t.path;
                    (t.breakdown, LedgerRow { grad_norm: t.grad_norm, termination: t.termination, ..row_base })
                }
                Err(e) => {
                    log::warn!("beta {beta}, init {i}: {e}; carrying the previous path forward");
                    let b = problem.breakdown(&paths[i], &prec).unwrap_or(ActionBreakdown {
                        total: f64::NAN,
                        measurement_term: f64::NAN,
                        model_term: f64::NAN,
                    });
                    (b, row_base)
                }
            };
            ledger.rows.push(LedgerRow { total: b.total, measurement_term: b.measurement_term, model_term: b.model_term, ..row });
            last.push(b);
        }
        log::debug!(
            "beta {beta}: log10(Rf/Rm) = {:.3}, lowest = {:.6e}",
            schedule.log10_ratio(beta),
            last.iter().map(|b| b.total).fold(f64::INFINITY, f64::min)
        );
    }

    let best_index = last
        .iter()
        .enumerate()
        .filter(|(_, b)| b.total.is_finite())
        .min_by(|a, b| a.1.total.total_cmp(&b.1.total))
        .map(|(i, _)| i)
        .unwrap_or(0);
    Ok(AnnealOutcome {
        best: paths[best_index].clone(),
        best_breakdown: last[best_index],
        best_index,
        final_paths: paths,
        ledger,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlateauConfig {
    pub window: usize,
    pub rel_tol: f64,
}

impl Default for PlateauConfig {
    fn default() -> Self {
        PlateauConfig { window: 10, rel_tol: 0.01 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LevelPlateau {
    pub init_index: usize,
    pub final_total: f64,
    /// `|A(β_last) - A(β_last - window)| / |A(β_last - window)|`.
    pub rel_change: f64,
    pub plateaued: bool,
}

/// Flags each level whose relative change over the final `window` steps is
/// below `rel_tol`. A level that is exactly zero at both ends counts as flat.
pub fn plateau_detect(ledger: &ActionLedger, window: usize, rel_tol: f64) -> Result<Vec<LevelPlateau>> {
    if ledger.rows.is_empty() {
        return Err(Error::Input("ledger is empty".into()));
    }
    let n = ledger.n_beta();
    if window == 0 || n < window + 1 {
        return Err(Error::Input(format!("plateau window {window} needs at least {} steps, ledger has {n}", window + 1)));
    }
    let end = ledger.rows_at(n - 1);
    let start = ledger.rows_at(n - 1 - window);
    Ok(end
        .iter()
        .zip(start)
        .map(|(e, s)| {
            let diff = (e.total - s.total).abs();
            let rel_change = if diff == 0.0 { 0.0 } else { diff / s.total.abs() };
            LevelPlateau { init_index: e.init_index, final_total: e.total, rel_change, plateaued: rel_change < rel_tol }
        })
        .collect())
}

/// Distinct action levels: ascending totals with values within `merge_rel_tol`
/// (relative) of the previous level's first member collapsed into it.
pub fn distinct_levels(totals: &[f64], merge_rel_tol: f64) -> Vec<f64> {
    let mut sorted: Vec<f64> = totals.iter().copied().filter(|v| v.is_finite()).collect();
    sorted.sort_by(f64::total_cmp);
    let mut levels: Vec<f64> = Vec::new();
    for v in sorted {
        match levels.last() {
            Some(&l) if (v - l).abs() <= merge_rel_tol * l.abs().max(f64::MIN_POSITIVE) => {}
            _ => levels.push(v),
        }
    }
    levels
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AlphaReport {
    pub lowest_coarse: f64,
    pub lowest_fine: f64,
    /// `|a - b| / max(|a|, |b|)`, zero when both are zero.
    pub rel_difference: f64,
    pub abs_difference: f64,
    /// Either difference within `tol`. The absolute test matters when both
    /// runs reach an exact zero and the relative one compares rounding noise.
    pub consistent: bool,
}

/// Compares the lowest final action of a run at `α` with one at a smaller `α'`.
/// The two runs must end at the same `R_f/R_m` to within one step of the coarser schedule.
pub fn alpha_consistency_check(
    coarse: &ActionLedger,
    coarse_alpha: f64,
    fine: &ActionLedger,
    tol: f64,
) -> Result<AlphaReport> {
    let (Some(a_end), Some(b_end)) = (coarse.final_log10_ratio(), fine.final_log10_ratio()) else {
        return Err(Error::Input("both ledgers must be non-empty".into()));
    };
    let step = coarse_alpha.log10().abs().max(1e-12);
    if (a_end - b_end).abs() > step {
        return Err(Error::Input(format!(
            "runs end at different R_f: log10 ratios {a_end:.6} vs {b_end:.6}"
        )));
    }
    let lowest = |l: &ActionLedger| l.final_rows().iter().map(|r| r.total).filter(|v| v.is_finite()).fold(f64::INFINITY, f64::min);
    let (a, b) = (lowest(coarse), lowest(fine));
    let scale = a.abs().max(b.abs());
    let abs_difference = (a - b).abs();
    let rel_difference = if scale == 0.0 { 0.0 } else { abs_difference / scale };
    let consistent = rel_difference <= tol || abs_difference <= tol;
    Ok(AlphaReport { lowest_coarse: a, lowest_fine: b, rel_difference, abs_difference, consistent })
}

//! Continuous-layer diagnostics.
//!
//! With the layer label `l` continuous the action becomes
//! `∫ L(x, x', l) dl` with
//!
//! ```text
//! L = C_M(x, y) + Σ_a (R_f/2) (x'_a - F_a(x, l))²
//! ```
//!
//! where `C_M` only acts at the two ends. A minimizing path obeys
//!
//! ```text
//! x''_a - Σ_b Ω_ab x'_b = ∂/∂x_a [C_M/R_f + |F|²/2] + ∂F_a/∂l,
//! Ω_ab = ∂F_a/∂x_b - ∂F_b/∂x_a
//! ```
//!
//! with natural boundary conditions `p_a = R_f (x'_a - F_a) = 0` at both ends.
//! This module evaluates those quantities on sampled paths; it does not
//! solve the boundary value problem.

use serde::{Deserialize, Serialize};

use crate::action::Precisions;
use crate::error::{ensure, Error, Result};
use crate::lbfgs::{minimize, OptimizerConfig, OptimizeResult};
use crate::network::{ActivationKind, NetworkShape, Weights};

/// Vector field `F(x, l)` with its Jacobian `J_ab = ∂F_a/∂x_b` (row-major).
pub trait ContinuumField: Sync {
    fn dim(&self) -> usize;
    fn value(&self, x: &[f64], l: f64) -> Vec<f64>;
    fn jacobian(&self, x: &[f64], l: f64) -> Vec<f64>;
    /// `∂F/∂l`; zero for autonomous fields.
    fn dl(&self, x: &[f64], _l: f64) -> Vec<f64> {
        vec![0.0; x.len()]
    }
}

/// `F(x) = A x`.
#[derive(Clone, Debug)]
pub struct LinearField {
    n: usize,
    a: Vec<f64>,
}

impl LinearField {
    pub fn new(n: usize, a: Vec<f64>) -> Result<Self> {
        ensure(a.len() == n * n, || format!("matrix has {} entries, expected {n}x{n}", a.len()))?;
        Ok(LinearField { n, a })
    }
}

impl ContinuumField for LinearField {
    fn dim(&self) -> usize {
        self.n
    }

    fn value(&self, x: &[f64], _l: f64) -> Vec<f64> {
        self.a.chunks_exact(self.n).map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum()).collect()
    }

    fn jacobian(&self, _x: &[f64], _l: f64) -> Vec<f64> {
        self.a.clone()
    }
}

/// Continuum perceptron, `F(x, l) = f(W(l) x) - x`, so that one unit step of
/// forward Euler reproduces `x(l+1) = f(W(l) x(l))`. `W(l)` is piecewise
/// constant: matrix `i` covers `[l_0 + i·h, l_0 + (i+1)·h)`.
#[derive(Clone, Debug)]
pub struct PerceptronField {
    n: usize,
    l0: f64,
    h: f64,
    weights: Weights,
    activation: ActivationKind,
}

impl PerceptronField {
    pub fn new(shape: &NetworkShape, weights: Weights, l0: f64, h: f64) -> Result<Self> {
        weights.check_shape(shape)?;
        ensure(h > 0.0, || "layer spacing must be positive".into())?;
        Ok(PerceptronField { n: shape.n_neurons, l0, h, weights, activation: shape.activation })
    }

    fn matrix(&self, l: f64) -> &[f64] {
        let last = self.weights.n_matrices() - 1;
        let i = ((l - self.l0) / self.h).floor();
        let i = if i < 0.0 { 0 } else { (i as usize).min(last) };
        self.weights.layer(i)
    }
}

impl ContinuumField for PerceptronField {
    fn dim(&self) -> usize {
        self.n
    }

    fn value(&self, x: &[f64], l: f64) -> Vec<f64> {
        let w = self.matrix(l);
        (0..self.n)
            .map(|a| {
                let pre: f64 = w[a * self.n..(a + 1) * self.n].iter().zip(x).map(|(p, q)| p * q).sum();
                self.activation.apply(pre) - x[a]
            })
            .collect()
    }

    fn jacobian(&self, x: &[f64], l: f64) -> Vec<f64> {
        let n = self.n;
        let w = self.matrix(l);
        let mut j = vec![0.0; n * n];
        for a in 0..n {
            let row = &w[a * n..(a + 1) * n];
            let pre: f64 = row.iter().zip(x).map(|(p, q)| p * q).sum();
            let slope = self.activation.apply_with_slope(pre).1;
            for b in 0..n {
                j[a * n + b] = slope * row[b] - if a == b { 1.0 } else { 0.0 };
            }
        }
        j
    }
}

/// Field from closures; handy for tests and ad-hoc experiments.
pub struct ClosureField<V, J> {
    pub n: usize,
    pub value: V,
    pub jacobian: J,
}

impl<V, J> ContinuumField for ClosureField<V, J>
where
    V: Fn(&[f64], f64) -> Vec<f64> + Sync,
    J: Fn(&[f64], f64) -> Vec<f64> + Sync,
{
    fn dim(&self) -> usize {
        self.n
    }

    fn value(&self, x: &[f64], l: f64) -> Vec<f64> {
        (self.value)(x, l)
    }

    fn jacobian(&self, x: &[f64], l: f64) -> Vec<f64> {
        (self.jacobian)(x, l)
    }
}

/// Largest entrywise gap between the analytic Jacobian and central differences.
pub fn jacobian_fd_error<F: ContinuumField + ?Sized>(field: &F, x: &[f64], l: f64, h: f64) -> f64 {
    let n = field.dim();
    let j = field.jacobian(x, l);
    let mut worst: f64 = 0.0;
    for b in 0..n {
        let mut xp = x.to_vec();
        let mut xm = x.to_vec();
        xp[b] += h;
        xm[b] -= h;
        let (fp, fm) = (field.value(&xp, l), field.value(&xm, l));
        for a in 0..n {
            let fd = (fp[a] - fm[a]) / (2.0 * h);
            worst = worst.max((fd - j[a * n + b]).abs() / (1.0 + fd.abs()));
        }
    }
    worst
}

/// Observed targets at one end of the path: the first `values.len()`
/// components are compared.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Boundary {
    pub start: Option<Vec<f64>>,
    pub end: Option<Vec<f64>>,
}

/// `(1/2L) Σ_r R_m (x_r - y_r)²` for a single pair.
pub fn endpoint_cost(x: &[f64], target: &[f64], r_m: f64) -> f64 {
    let l = target.len() as f64;
    target.iter().zip(x).map(|(y, v)| (v - y) * (v - y)).sum::<f64>() * r_m / (2.0 * l)
}

fn endpoint_cost_grad(x: &[f64], target: &[f64], r_m: f64, grad: &mut [f64]) {
    let l = target.len() as f64;
    for (r, y) in target.iter().enumerate() {
        grad[r] += r_m * (x[r] - y) / l;
    }
}

/// Lagrangian density. `measurement` is the target when `l` is an endpoint
/// carrying data (unit quadrature weight), `None` in the interior.
pub fn lagrangian<F: ContinuumField + ?Sized>(
    x: &[f64],
    xp: &[f64],
    l: f64,
    field: &F,
    measurement: Option<&[f64]>,
    prec: &Precisions,
) -> Result<f64> {
    check_dims(field, x, xp)?;
    let f = field.value(x, l);
    let model: f64 = xp.iter().zip(&f).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() * 0.5 * prec.r_f;
    let meas = match measurement {
        Some(y) => {
            ensure(y.len() <= x.len() && !y.is_empty(), || "measurement has the wrong dimension".into())?;
            endpoint_cost(x, y, prec.r_m)
        }
        None => 0.0,
    };
    Ok(meas + model)
}

/// `p_a = ∂L/∂x'_a = R_f (x'_a - F_a(x, l))`.
pub fn canonical_momentum<F: ContinuumField + ?Sized>(x: &[f64], xp: &[f64], l: f64, field: &F, prec: &Precisions) -> Result<Vec<f64>> {
    check_dims(field, x, xp)?;
    Ok(xp.iter().zip(field.value(x, l)).map(|(a, b)| prec.r_f * (a - b)).collect())
}

/// `Ω = J - Jᵀ`, row-major.
pub fn omega<F: ContinuumField + ?Sized>(x: &[f64], l: f64, field: &F) -> Vec<f64> {
    let n = field.dim();
    let j = field.jacobian(x, l);
    let mut o = vec![0.0; n * n];
    for a in 0..n {
        for b in 0..n {
            o[a * n + b] = if a == b { 0.0 } else { j[a * n + b] - j[b * n + a] };
        }
    }
    o
}

fn check_dims<F: ContinuumField + ?Sized>(field: &F, x: &[f64], xp: &[f64]) -> Result<()> {
    ensure(x.len() == field.dim() && xp.len() == field.dim(), || {
        format!("state dims ({}, {}) do not match field dimension {}", x.len(), xp.len(), field.dim())
    })
}

/// States sampled on a uniform grid `l_0 + i·h`.
#[derive(Clone, Debug, PartialEq)]
pub struct ContinuumPath {
    l0: f64,
    h: f64,
    states: Vec<Vec<f64>>,
}

impl ContinuumPath {
    pub fn new(l0: f64, h: f64, states: Vec<Vec<f64>>) -> Result<Self> {
        if states.len() < 3 {
            return Err(Error::Input(format!("a continuum path needs at least 3 grid points, got {}", states.len())));
        }
        if !(h > 0.0 && h.is_finite()) {
            return Err(Error::Input(format!("grid spacing must be positive, got {h}")));
        }
        let n = states[0].len();
        ensure(states.iter().all(|s| s.len() == n), || "grid states have unequal dimension".into())?;
        Ok(ContinuumPath { l0, h, states })
    }

    /// Builds from explicit grid values, which must be uniform to 1e-12.
    pub fn from_grid(grid: &[f64], states: Vec<Vec<f64>>) -> Result<Self> {
        ensure(grid.len() == states.len(), || "grid and states differ in length".into())?;
        if grid.len() < 3 {
            return Err(Error::Input("a continuum path needs at least 3 grid points".into()));
        }
        let h = grid[1] - grid[0];
        for w in grid.windows(2) {
            if !(w[1] > w[0]) || ((w[1] - w[0]) - h).abs() > 1e-12 {
                return Err(Error::Input("grid must be strictly increasing and uniform".into()));
            }
        }
        ContinuumPath::new(grid[0], h, states)
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn spacing(&self) -> f64 {
        self.h
    }

    pub fn grid(&self, i: usize) -> f64 {
        self.l0 + i as f64 * self.h
    }

    pub fn state(&self, i: usize) -> &[f64] {
        &self.states[i]
    }

    pub fn dim(&self) -> usize {
        self.states[0].len()
    }

    /// `x'` by central differences, second-order one-sided at the ends.
    pub fn derivative(&self, i: usize) -> Vec<f64> {
        let (h, s, last) = (self.h, &self.states, self.states.len() - 1);
        (0..self.dim())
            .map(|a| {
                if i == 0 {
                    (-3.0 * s[0][a] + 4.0 * s[1][a] - s[2][a]) / (2.0 * h)
                } else if i == last {
                    (3.0 * s[last][a] - 4.0 * s[last - 1][a] + s[last - 2][a]) / (2.0 * h)
                } else {
                    (s[i + 1][a] - s[i - 1][a]) / (2.0 * h)
                }
            })
            .collect()
    }

    /// `x''` by central differences at interior point `i`.
    pub fn second_derivative(&self, i: usize) -> Vec<f64> {
        let (h, s) = (self.h, &self.states);
        (0..self.dim()).map(|a| (s[i + 1][a] - 2.0 * s[i][a] + s[i - 1][a]) / (h * h)).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ElResidual {
    /// Grid index of each row in `residuals`.
    pub indices: Vec<usize>,
    pub grid: Vec<f64>,
    pub residuals: Vec<Vec<f64>>,
    pub max_norm: f64,
}

/// Left minus right side of the Euler-Lagrange equation at every interior
/// grid point. Measurements only act at the endpoints, so they never enter
/// the interior residual; `boundary` is accepted for symmetry with the
/// action and validated against the field dimension.
pub fn el_residual<F: ContinuumField + ?Sized>(
    path: &ContinuumPath,
    field: &F,
    boundary: &Boundary,
    prec: &Precisions,
) -> Result<ElResidual> {
    if path.len() < 5 {
        return Err(Error::Input(format!("Euler-Lagrange residual needs at least 5 grid points, got {}", path.len())));
    }
    if !(prec.r_f > 0.0) {
        return Err(Error::Input("the Euler-Lagrange potential C_M/R_f is singular at R_f = 0".into()));
    }
    let n = field.dim();
    ensure(path.dim() == n, || format!("path dimension {} does not match field dimension {n}", path.dim()))?;
    for y in [&boundary.start, &boundary.end].into_iter().flatten() {
        ensure(y.len() <= n, || "boundary target is wider than the state".into())?;
    }
    let mut out = ElResidual { indices: Vec::new(), grid: Vec::new(), residuals: Vec::new(), max_norm: 0.0 };
    for i in 1..path.len() - 1 {
        let l = path.grid(i);
        let x = path.state(i);
        let xp = path.derivative(i);
        let xpp = path.second_derivative(i);
        let f = field.value(x, l);
        let j = field.jacobian(x, l);
        let o = omega(x, l, field);
        let fl = field.dl(x, l);
        let res: Vec<f64> = (0..n)
            .map(|a| {
                let rot: f64 = (0..n).map(|b| o[a * n + b] * xp[b]).sum();
                // ∂(|F|²/2)/∂x_a = Σ_b F_b J_ba
                let pot: f64 = (0..n).map(|b| f[b] * j[b * n + a]).sum();
                xpp[a] - rot - pot - fl[a]
            })
            .collect();
        let norm = res.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        out.max_norm = out.max_norm.max(norm);
        out.indices.push(i);
        out.grid.push(l);
        out.residuals.push(res);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MomentumReport {
    pub start: Vec<f64>,
    pub end: Vec<f64>,
    pub start_norm: f64,
    pub end_norm: f64,
    pub tol: f64,
    pub passed: bool,
}

/// Canonical momentum at both ends (one-sided derivatives); passes when both
/// max-norms are within `tol`.
pub fn boundary_momentum_check<F: ContinuumField + ?Sized>(
    path: &ContinuumPath,
    field: &F,
    prec: &Precisions,
    tol: f64,
) -> Result<MomentumReport> {
    let last = path.len() - 1;
    let start = canonical_momentum(path.state(0), &path.derivative(0), path.grid(0), field, prec)?;
    let end = canonical_momentum(path.state(last), &path.derivative(last), path.grid(last), field, prec)?;
    let norm = |v: &[f64]| v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let (start_norm, end_norm) = (norm(&start), norm(&end));
    Ok(MomentumReport { passed: start_norm <= tol && end_norm <= tol, start, end, start_norm, end_norm, tol })
}

/// Discretized continuum action on `n_points` uniform points from `l0` with
/// spacing `h`: a forward-Euler model term weighted by `h` plus unit-weight
/// endpoint measurement costs. `x` is the flat `n_points × N` state array.
pub fn discrete_continuum_action<F: ContinuumField + ?Sized>(
    field: &F,
    boundary: &Boundary,
    prec: &Precisions,
    l0: f64,
    h: f64,
    x: &[f64],
    grad: Option<&mut [f64]>,
) -> f64 {
    let n = field.dim();
    let pts = x.len() / n;
    let mut g_store;
    let g: &mut [f64] = match grad {
        Some(g) => {
            g.iter_mut().for_each(|v| *v = 0.0);
            g
        }
        None => {
            g_store = Vec::new();
            &mut g_store
        }
    };
    let want_grad = !g.is_empty();
    let mut total = 0.0;
    if let Some(y) = &boundary.start {
        total += endpoint_cost(&x[..n], y, prec.r_m);
        if want_grad {
            endpoint_cost_grad(&x[..n], y, prec.r_m, &mut g[..n]);
        }
    }
    if let Some(y) = &boundary.end {
        let s = (pts - 1) * n;
        total += endpoint_cost(&x[s..], y, prec.r_m);
        if want_grad {
            endpoint_cost_grad(&x[s..], y, prec.r_m, &mut g[s..]);
        }
    }
    for i in 0..pts - 1 {
        let l = l0 + i as f64 * h;
        let cur = &x[i * n..(i + 1) * n];
        let next = &x[(i + 1) * n..(i + 2) * n];
        let f = field.value(cur, l);
        let e: Vec<f64> = (0..n).map(|a| (next[a] - cur[a]) / h - f[a]).collect();
        total += 0.5 * prec.r_f * h * e.iter().map(|v| v * v).sum::<f64>();
        if want_grad {
            let j = field.jacobian(cur, l);
            for a in 0..n {
                g[(i + 1) * n + a] += prec.r_f * e[a];
                g[i * n + a] -= prec.r_f * e[a];
                let jt: f64 = (0..n).map(|b| j[b * n + a] * e[b]).sum();
                g[i * n + a] -= prec.r_f * h * jt;
            }
        }
    }
    total
}

/// Minimizes [`discrete_continuum_action`] from `start` and returns the
/// resulting sampled path.
pub fn fit_continuum_path<F: ContinuumField + ?Sized>(
    field: &F,
    boundary: &Boundary,
    prec: &Precisions,
    l0: f64,
    h: f64,
    start: &[Vec<f64>],
    cfg: &OptimizerConfig,
) -> Result<(ContinuumPath, OptimizeResult)> {
    let n = field.dim();
    ensure(start.iter().all(|s| s.len() == n), || "start states do not match the field dimension".into())?;
    let x0: Vec<f64> = start.iter().flatten().copied().collect();
    let r = minimize(|x, g| discrete_continuum_action(field, boundary, prec, l0, h, x, Some(g)), &x0, cfg)?;
    let states = r.minimizer.chunks_exact(n).map(|c| c.to_vec()).collect();
    Ok((ContinuumPath::new(l0, h, states)?, r))
}

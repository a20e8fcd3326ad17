//! Discrete-time dynamics for the data-assimilation instance.
//!
//! The shipped map is Lorenz96, `dx_i/dt = (x_{i+1} - x_{i-2}) x_{i-1} - x_i + F`
//! (indices cyclic), advanced by one classical RK4 step of size `dt`.
//! The forcing `F` is the single model parameter.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, ensure_finite, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum StepMap {
    Lorenz96 { dt: f64 },
}

impl StepMap {
    pub fn name(&self) -> &'static str {
        match self {
            StepMap::Lorenz96 { .. } => "lorenz96",
        }
    }

    pub fn n_params(&self) -> usize {
        match self {
            StepMap::Lorenz96 { .. } => 1,
        }
    }

    pub fn min_dim(&self) -> usize {
        match self {
            StepMap::Lorenz96 { .. } => 4,
        }
    }

    /// One application of the map with explicit parameters.
    pub fn step(&self, x: &[f64], params: &[f64]) -> Vec<f64> {
        match *self {
            StepMap::Lorenz96 { dt } => rk4_l96(x, params[0], dt),
        }
    }

    /// Vector-Jacobian product of [`StepMap::step`]: given `adj = dL/d(step(x))`,
    /// adds `dL/dx` into `dx` and `dL/dparams` into `dparams`.
    pub fn step_vjp(&self, x: &[f64], params: &[f64], adj: &[f64], dx: &mut [f64], dparams: &mut [f64]) {
        match *self {
            StepMap::Lorenz96 { dt } => rk4_l96_vjp(x, params[0], dt, adj, dx, dparams),
        }
    }
}

pub(crate) fn l96_rhs(x: &[f64], forcing: f64, out: &mut [f64]) {
    let d = x.len();
    for i in 0..d {
        let ip1 = (i + 1) % d;
        let im1 = (i + d - 1) % d;
        let im2 = (i + d - 2) % d;
        out[i] = (x[ip1] - x[im2]) * x[im1] - x[i] + forcing;
    }
}

/// `out += J(x)^T v` for the Lorenz96 vector field.
fn l96_rhs_vjp(x: &[f64], v: &[f64], out: &mut [f64]) {
    let d = x.len();
    for i in 0..d {
        let ip1 = (i + 1) % d;
        let im1 = (i + d - 1) % d;
        let im2 = (i + d - 2) % d;
        out[ip1] += v[i] * x[im1];
        out[im2] -= v[i] * x[im1];
        out[im1] += v[i] * (x[ip1] - x[im2]);
        out[i] -= v[i];
    }
}

fn axpy_into(out: &mut [f64], x: &[f64], a: f64, k: &[f64]) {
    for ((o, xi), ki) in out.iter_mut().zip(x).zip(k) {
        *o = xi + a * ki;
    }
}

struct Rk4Stages {
    k1: Vec<f64>,
    k2: Vec<f64>,
    k3: Vec<f64>,
    k4: Vec<f64>,
    x2: Vec<f64>,
    x3: Vec<f64>,
    x4: Vec<f64>,
}

fn rk4_stages(x: &[f64], forcing: f64, dt: f64) -> Rk4Stages {
    let d = x.len();
    let mut s = Rk4Stages {
        k1: vec![0.0; d],
        k2: vec![0.0; d],
        k3: vec![0.0; d],
        k4: vec![0.0; d],
        x2: vec![0.0; d],
        x3: vec![0.0; d],
        x4: vec![0.0; d],
    };
    l96_rhs(x, forcing, &mut s.k1);
    axpy_into(&mut s.x2, x, 0.5 * dt, &s.k1);
    l96_rhs(&s.x2, forcing, &mut s.k2);
    axpy_into(&mut s.x3, x, 0.5 * dt, &s.k2);
    l96_rhs(&s.x3, forcing, &mut s.k3);
    axpy_into(&mut s.x4, x, dt, &s.k3);
    l96_rhs(&s.x4, forcing, &mut s.k4);
    s
}

fn rk4_l96(x: &[f64], forcing: f64, dt: f64) -> Vec<f64> {
    let s = rk4_stages(x, forcing, dt);
    (0..x.len())
        .map(|i| x[i] + dt / 6.0 * (s.k1[i] + 2.0 * s.k2[i] + 2.0 * s.k3[i] + s.k4[i]))
        .collect()
}

fn rk4_l96_vjp(x: &[f64], forcing: f64, dt: f64, adj: &[f64], dx: &mut [f64], dparams: &mut [f64]) {
    let d = x.len();
    let s = rk4_stages(x, forcing, dt);
    // adjoints of the stage slopes
    let a4: Vec<f64> = adj.iter().map(|v| dt / 6.0 * v).collect();
    let mut a3: Vec<f64> = adj.iter().map(|v| dt / 3.0 * v).collect();
    let mut a2 = a3.clone();
    let mut a1 = a4.clone();
    for i in 0..d {
        dx[i] += adj[i];
    }
    let mut g = vec![0.0; d];

    // k4 = f(x + dt k3)
    l96_rhs_vjp(&s.x4, &a4, &mut g);
    for i in 0..d {
        dx[i] += g[i];
        a3[i] += dt * g[i];
    }
    dparams[0] += a4.iter().sum::<f64>();

    // k3 = f(x + dt/2 k2)
    g.iter_mut().for_each(|v| *v = 0.0);
    l96_rhs_vjp(&s.x3, &a3, &mut g);
    for i in 0..d {
        dx[i] += g[i];
        a2[i] += 0.5 * dt * g[i];
    }
    dparams[0] += a3.iter().sum::<f64>();

    // k2 = f(x + dt/2 k1)
    g.iter_mut().for_each(|v| *v = 0.0);
    l96_rhs_vjp(&s.x2, &a2, &mut g);
    for i in 0..d {
        dx[i] += g[i];
        a1[i] += 0.5 * dt * g[i];
    }
    dparams[0] += a2.iter().sum::<f64>();

    // k1 = f(x)
    g.iter_mut().for_each(|v| *v = 0.0);
    l96_rhs_vjp(x, &a1, &mut g);
    for i in 0..d {
        dx[i] += g[i];
    }
    dparams[0] += a1.iter().sum::<f64>();
}

/// Whether the model parameters are fixed and known or part of the path.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ParamSpec {
    Known { values: Vec<f64> },
    /// Parameters are estimated; `init_range` bounds their uniform initialization.
    Estimated { init_range: (f64, f64) },
}

/// A data-assimilation problem: model, measurement schedule and the noisy
/// observations. It never carries the generating trajectory.
///
/// The path covers `n_times = ni_steps * (n_observations + 1)` time points
/// `t_0 .. t_{n_times-1}`. Observation `n` (0-based) is taken at time index
/// `(n + 1) * ni_steps`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DynamicalProblem {
    pub dim: usize,
    pub map: StepMap,
    pub params: ParamSpec,
    pub observed_indices: Vec<usize>,
    pub ni_steps: usize,
    pub n_observations: usize,
    /// Row-major `n_observations × observed_indices.len()`.
    pub observations: Vec<f64>,
}

impl DynamicalProblem {
    pub fn validate(&self) -> Result<()> {
        if self.dim < self.map.min_dim() {
            return Err(Error::Config(format!("{} needs dimension ≥ {}", self.map.name(), self.map.min_dim())));
        }
        if self.ni_steps == 0 || self.n_observations == 0 {
            return Err(Error::Config("ni_steps and n_observations must be positive".into()));
        }
        if self.observed_indices.is_empty() {
            return Err(Error::Config("at least one component must be observed".into()));
        }
        let mut seen = vec![false; self.dim];
        for &i in &self.observed_indices {
            if i >= self.dim || seen[i] {
                return Err(Error::Config(format!("observed index {i} is out of range or repeated")));
            }
            seen[i] = true;
        }
        match &self.params {
            ParamSpec::Known { values } => {
                ensure(values.len() == self.map.n_params(), || {
                    format!("{} takes {} parameters, got {}", self.map.name(), self.map.n_params(), values.len())
                })?;
                ensure_finite(values, "model parameters")?;
            }
            ParamSpec::Estimated { init_range } => {
                if !(init_range.0 <= init_range.1) {
                    return Err(Error::Config("parameter init range is empty".into()));
                }
            }
        }
        ensure(self.observations.len() == self.n_observations * self.observed_indices.len(), || {
            format!(
                "observation array has {} entries, expected {}×{}",
                self.observations.len(),
                self.n_observations,
                self.observed_indices.len()
            )
        })?;
        ensure_finite(&self.observations, "observations")
    }

    /// `𝒩 + 1` in the usual notation, with `𝒩 = NI (F + 1) - 1`.
    pub fn n_times(&self) -> usize {
        self.ni_steps * (self.n_observations + 1)
    }

    pub fn observation_time(&self, n: usize) -> usize {
        (n + 1) * self.ni_steps
    }

    pub fn n_observed(&self) -> usize {
        self.observed_indices.len()
    }

    pub fn observation(&self, n: usize) -> &[f64] {
        let l = self.n_observed();
        &self.observations[n * l..(n + 1) * l]
    }

    /// Number of parameters carried in the path (0 when known).
    pub fn n_free_params(&self) -> usize {
        match self.params {
            ParamSpec::Known { .. } => 0,
            ParamSpec::Estimated { .. } => self.map.n_params(),
        }
    }

    pub fn path_len(&self) -> usize {
        self.n_times() * self.dim + self.n_free_params()
    }
}

/// One application of the problem's map with its known parameters.
pub fn dynamics_step(x: &[f64], problem: &DynamicalProblem) -> Result<Vec<f64>> {
    ensure(x.len() == problem.dim, || format!("state has {} components, problem has {}", x.len(), problem.dim))?;
    ensure_finite(x, "state")?;
    match &problem.params {
        ParamSpec::Known { values } => Ok(problem.map.step(x, values)),
        ParamSpec::Estimated { .. } => Err(Error::Contract(
            "parameters are estimated; use StepMap::step with explicit values".into(),
        )),
    }
}

/// States at every time point plus the estimated parameters (if any).
/// Flat layout: time-major, then component; parameters appended.
#[derive(Clone, Debug, PartialEq)]
pub struct DaPath {
    pub dim: usize,
    pub states: Vec<f64>,
    pub params: Vec<f64>,
}

impl DaPath {
    pub fn from_flat(problem: &DynamicalProblem, flat: &[f64]) -> Result<Self> {
        ensure(flat.len() == problem.path_len(), || {
            format!("flat path has length {}, expected {}", flat.len(), problem.path_len())
        })?;
        let split = problem.n_times() * problem.dim;
        Ok(DaPath { dim: problem.dim, states: flat[..split].to_vec(), params: flat[split..].to_vec() })
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = self.states.clone();
        v.extend_from_slice(&self.params);
        v
    }

    pub fn state(&self, t: usize) -> &[f64] {
        &self.states[t * self.dim..(t + 1) * self.dim]
    }

    pub fn n_times(&self) -> usize {
        self.states.len() / self.dim
    }
}

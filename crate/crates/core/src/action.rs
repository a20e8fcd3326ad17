//! The standard-model action: measurement error plus model error weighted by
//! the precisions `R_m` and `R_f`, for the perceptron and for the
//! discrete-time dynamical system, together with exact gradients.
//!
//! Perceptron action for `M` pairs and layers `0..=F`:
//!
//! ```text
//! A = Σ_{l∈{0,F}} (1/M) Σ_k (1/2L) Σ_r R_m (x_r^k(l) - y_r^k(l))²
//!   + Σ_k Σ_{l<F} Σ_j (R_f/2) (x_j^k(l+1) - f(Σ_i W_ji(l) x_i^k(l)))²
//! ```
//!
//! Dynamical action over time points `t_0..t_{T-1}`:
//!
//! ```text
//! A = Σ_n Σ_r (R_m/2) (x_r(τ_n) - y_r(τ_n))² + Σ_{t<T-1} Σ_a (R_f/2) (x_a(t+1) - f_a(x(t)))²
//! ```

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::anneal::InitRanges;
use crate::dynamics::{DaPath, DynamicalProblem, ParamSpec};
use crate::error::{ensure, Error, Result};
use crate::network::{DataLibrary, NetworkShape, Path};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Precisions {
    pub r_m: f64,
    pub r_f: f64,
}

impl Precisions {
    pub fn new(r_m: f64, r_f: f64) -> Result<Self> {
        let p = Precisions { r_m, r_f };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.r_m > 0.0 && self.r_m.is_finite()) {
            return Err(Error::Input(format!("R_m must be positive and finite, got {}", self.r_m)));
        }
        if !(self.r_f >= 0.0 && self.r_f.is_finite()) {
            return Err(Error::Input(format!("R_f must be non-negative and finite, got {}", self.r_f)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ActionBreakdown {
    pub total: f64,
    pub measurement_term: f64,
    pub model_term: f64,
}

impl ActionBreakdown {
    fn from_terms(measurement_term: f64, model_term: f64) -> Self {
        ActionBreakdown { total: measurement_term + model_term, measurement_term, model_term }
    }
}

/// Anything that can be annealed: a flat path vector, an action with its
/// gradient, and the `R_f = 0` initialization.
pub trait StandardModel: Sync {
    fn dim(&self) -> usize;

    fn breakdown(&self, x: &[f64], prec: &Precisions) -> Result<ActionBreakdown>;

    /// Writes the gradient of `total` into `grad` and returns the breakdown.
    fn value_and_gradient(&self, x: &[f64], prec: &Precisions, grad: &mut [f64]) -> Result<ActionBreakdown>;

    /// A minimizer of the `R_f = 0` action: measured components pinned to the
    /// data, every other variable drawn uniformly from its range.
    fn init_path(&self, ranges: &InitRanges, rng: &mut ChaCha8Rng) -> Vec<f64>;
}

fn check_finite_gradient(grad: &[f64]) -> Result<()> {
    match grad.iter().position(|g| !g.is_finite()) {
        None => Ok(()),
        Some(i) => Err(Error::NumericDomain(format!("non-finite gradient component {} at path index {i}", grad[i]))),
    }
}

/// Perceptron instance: a network geometry and the training pairs.
#[derive(Clone, Debug)]
pub struct MlProblem {
    shape: NetworkShape,
    data: DataLibrary,
}

impl MlProblem {
    pub fn new(shape: NetworkShape, data: DataLibrary) -> Result<Self> {
        shape.validate()?;
        data.check_against(&shape)?;
        Ok(MlProblem { shape, data })
    }

    pub fn shape(&self) -> &NetworkShape {
        &self.shape
    }

    pub fn data(&self) -> &DataLibrary {
        &self.data
    }

    pub fn n_pairs(&self) -> usize {
        self.data.len()
    }

    pub fn path(&self, flat: &[f64]) -> Result<Path> {
        Path::from_flat(&self.shape, self.n_pairs(), flat)
    }

    fn check_len(&self, x: &[f64]) -> Result<()> {
        ensure(x.len() == self.dim(), || format!("path vector has length {}, expected {}", x.len(), self.dim()))
    }

    fn measurement(&self, x: &[f64], r_m: f64, mut grad: Option<&mut [f64]>) -> f64 {
        let s = &self.shape;
        let n = s.n_neurons;
        let m = self.n_pairs() as f64;
        let out = s.output_layer();
        let mut total = 0.0;
        for (layer, width) in [(0, s.n_in()), (out, s.n_out())] {
            let scale = r_m / (m * 2.0 * width as f64);
            let mut sum = 0.0;
            for (k, pair) in self.data.pairs.iter().enumerate() {
                let target = if layer == 0 { &pair.input } else { &pair.output };
                let base = (k * s.n_layers + layer) * n;
                for r in 0..width {
                    let d = x[base + r] - target[r];
                    sum += d * d;
                    if let Some(g) = grad.as_deref_mut() {
                        g[base + r] += 2.0 * scale * d;
                    }
                }
            }
            total += scale * sum;
        }
        total
    }

    fn model(&self, x: &[f64], r_f: f64, mut grad: Option<&mut [f64]>) -> f64 {
        let s = &self.shape;
        let n = s.n_neurons;
        let act = s.activation;
        let woff = self.n_pairs() * s.n_layers * n;
        let mut sum_sq = 0.0;
        for k in 0..self.n_pairs() {
            for l in 0..s.n_layers - 1 {
                let cur = (k * s.n_layers + l) * n;
                let next = cur + n;
                let wl = woff + l * n * n;
                for j in 0..n {
                    let row = &x[wl + j * n..wl + (j + 1) * n];
                    let a: f64 = row.iter().zip(&x[cur..cur + n]).map(|(w, v)| w * v).sum();
                    let (fa, slope) = act.apply_with_slope(a);
                    let e = x[next + j] - fa;
                    sum_sq += e * e;
                    if let Some(g) = grad.as_deref_mut() {
                        g[next + j] += r_f * e;
                        let c = -r_f * e * slope;
                        if c != 0.0 {
                            for i in 0..n {
                                g[cur + i] += c * x[wl + j * n + i];
                                g[wl + j * n + i] += c * x[cur + i];
                            }
                        }
                    }
                }
            }
        }
        0.5 * r_f * sum_sq
    }
}

impl StandardModel for MlProblem {
    fn dim(&self) -> usize {
        self.shape.path_len(self.n_pairs())
    }

    fn breakdown(&self, x: &[f64], prec: &Precisions) -> Result<ActionBreakdown> {
        self.check_len(x)?;
        Ok(ActionBreakdown::from_terms(self.measurement(x, prec.r_m, None), self.model(x, prec.r_f, None)))
    }

    fn value_and_gradient(&self, x: &[f64], prec: &Precisions, grad: &mut [f64]) -> Result<ActionBreakdown> {
        self.check_len(x)?;
        ensure(grad.len() == x.len(), || "gradient buffer has the wrong length".into())?;
        grad.iter_mut().for_each(|g| *g = 0.0);
        let meas = self.measurement(x, prec.r_m, Some(grad));
        let model = self.model(x, prec.r_f, Some(grad));
        check_finite_gradient(grad)?;
        Ok(ActionBreakdown::from_terms(meas, model))
    }

    fn init_path(&self, ranges: &InitRanges, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let s = &self.shape;
        let n = s.n_neurons;
        let (slo, shi) = ranges.state.or(s.activation.range()).unwrap_or((-1.0, 1.0));
        let (wlo, whi) = ranges.weights;
        let mut x = vec![0.0; self.dim()];
        let out = s.output_layer();
        for (k, pair) in self.data.pairs.iter().enumerate() {
            for l in 0..s.n_layers {
                let base = (k * s.n_layers + l) * n;
                for j in 0..n {
                    x[base + j] = if l == 0 && j < s.n_in() {
                        pair.input[j]
                    } else if l == out && j < s.n_out() {
                        pair.output[j]
                    } else {
                        uniform(rng, slo, shi)
                    };
                }
            }
        }
        let woff = self.n_pairs() * s.n_layers * n;
        for v in &mut x[woff..] {
            *v = uniform(rng, wlo, whi);
        }
        x
    }
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.random_range(lo..=hi)
    } else {
        lo
    }
}

/// Data-assimilation instance.
#[derive(Clone, Debug)]
pub struct DaProblem {
    problem: DynamicalProblem,
}

impl DaProblem {
    pub fn new(problem: DynamicalProblem) -> Result<Self> {
        problem.validate()?;
        Ok(DaProblem { problem })
    }

    pub fn problem(&self) -> &DynamicalProblem {
        &self.problem
    }

    pub fn path(&self, flat: &[f64]) -> Result<DaPath> {
        DaPath::from_flat(&self.problem, flat)
    }

    fn params<'a>(&'a self, x: &'a [f64]) -> &'a [f64] {
        match &self.problem.params {
            ParamSpec::Known { values } => values,
            ParamSpec::Estimated { .. } => &x[self.problem.n_times() * self.problem.dim..],
        }
    }

    fn eval(&self, x: &[f64], prec: &Precisions, mut grad: Option<&mut [f64]>) -> Result<ActionBreakdown> {
        let p = &self.problem;
        ensure(x.len() == p.path_len(), || format!("path vector has length {}, expected {}", x.len(), p.path_len()))?;
        let d = p.dim;
        let mut meas = 0.0;
        for n in 0..p.n_observations {
            let t = p.observation_time(n);
            for (r, &idx) in p.observed_indices.iter().enumerate() {
                let diff = x[t * d + idx] - p.observation(n)[r];
                meas += diff * diff;
                if let Some(g) = grad.as_deref_mut() {
                    g[t * d + idx] += prec.r_m * diff;
                }
            }
        }
        let params = self.params(x);
        let mut sum_sq = 0.0;
        let mut dparams = vec![0.0; p.map.n_params()];
        let mut adj = vec![0.0; d];
        for t in 0..p.n_times() - 1 {
            let cur = &x[t * d..(t + 1) * d];
            let pred = p.map.step(cur, params);
            for a in 0..d {
                let e = x[(t + 1) * d + a] - pred[a];
                sum_sq += e * e;
                adj[a] = -prec.r_f * e;
            }
            if let Some(g) = grad.as_deref_mut() {
                for a in 0..d {
                    g[(t + 1) * d + a] -= adj[a];
                }
                if prec.r_f != 0.0 {
                    let (head, _) = g.split_at_mut((t + 1) * d);
                    p.map.step_vjp(cur, params, &adj, &mut head[t * d..], &mut dparams);
                }
            }
        }
        if let Some(g) = grad {
            if p.n_free_params() > 0 {
                let off = p.n_times() * d;
                g[off..].copy_from_slice(&dparams);
            }
            check_finite_gradient(g)?;
        }
        Ok(ActionBreakdown::from_terms(0.5 * prec.r_m * meas, 0.5 * prec.r_f * sum_sq))
    }
}

impl StandardModel for DaProblem {
    fn dim(&self) -> usize {
        self.problem.path_len()
    }

    fn breakdown(&self, x: &[f64], prec: &Precisions) -> Result<ActionBreakdown> {
        self.eval(x, prec, None)
    }

    fn value_and_gradient(&self, x: &[f64], prec: &Precisions, grad: &mut [f64]) -> Result<ActionBreakdown> {
        ensure(grad.len() == x.len(), || "gradient buffer has the wrong length".into())?;
        grad.iter_mut().for_each(|g| *g = 0.0);
        self.eval(x, prec, Some(grad))
    }

    fn init_path(&self, ranges: &InitRanges, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let p = &self.problem;
        let d = p.dim;
        let (slo, shi) = ranges.state.unwrap_or_else(|| observation_range(p));
        let mut x: Vec<f64> = (0..p.path_len()).map(|_| uniform(rng, slo, shi)).collect();
        for n in 0..p.n_observations {
            let t = p.observation_time(n);
            for (r, &idx) in p.observed_indices.iter().enumerate() {
                x[t * d + idx] = p.observation(n)[r];
            }
        }
        if let ParamSpec::Estimated { init_range } = &p.params {
            let (lo, hi) = ranges.params.unwrap_or(*init_range);
            let off = p.n_times() * d;
            for v in &mut x[off..] {
                *v = uniform(rng, lo, hi);
            }
        }
        x
    }
}

/// Dynamical range of the observed data, used as the default state range.
fn observation_range(p: &DynamicalProblem) -> (f64, f64) {
    let lo = p.observations.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = p.observations.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if lo.is_finite() && hi.is_finite() {
        (lo, hi)
    } else {
        (-1.0, 1.0)
    }
}

fn ml_problem_for(path: &Path, data: &DataLibrary, shape: &NetworkShape) -> Result<MlProblem> {
    ensure(path.shape() == shape, || "path was built for a different shape".into())?;
    ensure(path.n_pairs() == data.len(), || {
        format!("path holds {} pairs, data library holds {}", path.n_pairs(), data.len())
    })?;
    MlProblem::new(*shape, data.clone())
}

/// Measurement part of the perceptron action.
pub fn measurement_cost(path: &Path, data: &DataLibrary, prec: &Precisions, shape: &NetworkShape) -> Result<f64> {
    let problem = ml_problem_for(path, data, shape)?;
    Ok(problem.measurement(&path.to_flat(), prec.r_m, None))
}

/// Model-error part of the perceptron action; zero iff every layer obeys the
/// forward map exactly (or `R_f = 0`).
pub fn model_error_term(path: &Path, prec: &Precisions, shape: &NetworkShape) -> Result<f64> {
    ensure(path.shape() == shape, || "path was built for a different shape".into())?;
    let flat = path.to_flat();
    let s = shape;
    let n = s.n_neurons;
    let woff = path.n_pairs() * s.n_layers * n;
    let mut sum_sq = 0.0;
    for k in 0..path.n_pairs() {
        for l in 0..s.n_layers - 1 {
            let cur = &flat[(k * s.n_layers + l) * n..][..n];
            let next = path.activity(k, l + 1);
            let w = &flat[woff + l * n * n..][..n * n];
            let pred = crate::network::apply_layer(cur, w, s.activation);
            sum_sq += next.iter().zip(&pred).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        }
    }
    Ok(0.5 * prec.r_f * sum_sq)
}

pub fn action(path: &Path, data: &DataLibrary, prec: &Precisions, shape: &NetworkShape) -> Result<ActionBreakdown> {
    ml_problem_for(path, data, shape)?.breakdown(&path.to_flat(), prec)
}

pub fn action_da(path: &DaPath, problem: &DynamicalProblem, prec: &Precisions) -> Result<ActionBreakdown> {
    DaProblem::new(problem.clone())?.breakdown(&path.to_flat(), prec)
}

/// Gradient of the perceptron action with respect to the flat path vector.
pub fn action_gradient(path: &Path, data: &DataLibrary, prec: &Precisions, shape: &NetworkShape) -> Result<Vec<f64>> {
    let problem = ml_problem_for(path, data, shape)?;
    let x = path.to_flat();
    let mut g = vec![0.0; x.len()];
    problem.value_and_gradient(&x, prec, &mut g)?;
    Ok(g)
}

pub fn action_gradient_da(path: &DaPath, problem: &DynamicalProblem, prec: &Precisions) -> Result<Vec<f64>> {
    let x = path.to_flat();
    let mut g = vec![0.0; x.len()];
    DaProblem::new(problem.clone())?.value_and_gradient(&x, prec, &mut g)?;
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::StepMap;
    use crate::network::{forward_network, ActivationKind, DataPair, GeneratorMetadata, Weights};
    use rand::SeedableRng;

    fn lib(pairs: Vec<(Vec<f64>, Vec<f64>)>) -> DataLibrary {
        DataLibrary::new(
            pairs.into_iter().map(|(input, output)| DataPair { input, output }).collect(),
            0.0,
            GeneratorMetadata::default(),
        )
        .unwrap()
    }

    fn teacher_path(shape: &NetworkShape, weights: &Weights, inputs: &[Vec<f64>]) -> (Path, DataLibrary) {
        let mut acts = Vec::new();
        let mut pairs = Vec::new();
        for input in inputs {
            let layers = forward_network(input, weights, shape).unwrap();
            pairs.push((input[..shape.n_in()].to_vec(), layers[shape.output_layer()][..shape.n_out()].to_vec()));
            acts.extend(layers.into_iter().flatten());
        }
        (Path::new(*shape, inputs.len(), acts, weights.clone()).unwrap(), lib(pairs))
    }

    fn random_weights(shape: &NetworkShape, seed: u64) -> Weights {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Weights::from_flat(shape, (0..shape.weight_len()).map(|_| rng.random_range(-0.8..0.8)).collect()).unwrap()
    }

    #[test]
    fn zero_residual_means_zero_measurement_cost() {
        let shape = NetworkShape::new(3, 4, 2, ActivationKind::Tanh).unwrap();
        let w = random_weights(&shape, 1);
        let (path, data) = teacher_path(&shape, &w, &[vec![0.1, -0.2, 0.3], vec![0.05, 0.0, -0.1]]);
        let prec = Precisions::new(1.0, 5.0).unwrap();
        assert_eq!(measurement_cost(&path, &data, &prec, &shape).unwrap(), 0.0);
        assert_eq!(model_error_term(&path, &prec, &shape).unwrap(), 0.0);
        let b = action(&path, &data, &prec, &shape).unwrap();
        assert_eq!(b.total, 0.0);
        let g = action_gradient(&path, &data, &prec, &shape).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn scalar_measurement_cost() {
        // M=1, L=1, residual 0.1 at both ends: (1/2)(0.01) + (1/2)(0.01) = 0.01
        let shape = NetworkShape::new(1, 2, 1, ActivationKind::Tanh).unwrap();
        let path = Path::new(shape, 1, vec![0.6, 0.4], Weights::zeros(&shape)).unwrap();
        let data = lib(vec![(vec![0.5], vec![0.3])]);
        let prec = Precisions::new(1.0, 0.0).unwrap();
        let c = measurement_cost(&path, &data, &prec, &shape).unwrap();
        assert!((c - 0.01).abs() < 1e-15, "{c}");
        let c2 = measurement_cost(&path, &data, &Precisions::new(2.0, 0.0).unwrap(), &shape).unwrap();
        assert_eq!(c2, 2.0 * c);
    }

    #[test]
    fn scalar_model_term() {
        // identity, W=0: residual is x(1) itself = 0.2; R_f=2 gives (2/2)(0.04)
        let shape = NetworkShape::new(1, 2, 1, ActivationKind::Identity).unwrap();
        let path = Path::new(shape, 1, vec![0.7, 0.2], Weights::zeros(&shape)).unwrap();
        let v = model_error_term(&path, &Precisions::new(1.0, 2.0).unwrap(), &shape).unwrap();
        assert!((v - 0.04).abs() < 1e-15);
        assert_eq!(model_error_term(&path, &Precisions::new(1.0, 0.0).unwrap(), &shape).unwrap(), 0.0);
    }

    #[test]
    fn breakdown_is_consistent_and_linear_in_rf() {
        let shape = NetworkShape::new(3, 5, 2, ActivationKind::Tanh).unwrap();
        let data = lib(vec![(vec![0.1, 0.2], vec![-0.3, 0.4]), (vec![0.0, -0.1], vec![0.2, 0.2])]);
        let problem = MlProblem::new(shape, data.clone()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = problem.init_path(&InitRanges::default(), &mut rng);
        let path = problem.path(&x).unwrap();
        let p1 = Precisions::new(1.0, 0.37).unwrap();
        let p2 = Precisions::new(1.0, 0.37 * 8.0).unwrap();
        let b1 = action(&path, &data, &p1, &shape).unwrap();
        let b2 = action(&path, &data, &p2, &shape).unwrap();
        assert_eq!(b1.total, b1.measurement_term + b1.model_term);
        assert_eq!(b1.measurement_term, b2.measurement_term);
        assert!((b2.model_term - 8.0 * b1.model_term).abs() <= 1e-15 * b2.model_term);
        assert!(b1.model_term > 0.0);
        // serialization round trip leaves the action unchanged
        let again = problem.path(&path.to_flat()).unwrap();
        assert_eq!(action(&again, &data, &p1, &shape).unwrap(), b1);
    }

    #[test]
    fn rf_zero_gradient_ignores_weights_and_hidden_layers() {
        let shape = NetworkShape::new(3, 5, 3, ActivationKind::Tanh).unwrap();
        let data = lib(vec![(vec![0.1, 0.2, 0.0], vec![-0.3, 0.4, 0.1])]);
        let problem = MlProblem::new(shape, data).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut x = problem.init_path(&InitRanges::default(), &mut rng);
        x[0] += 0.3;
        x[4 * 3 + 1] -= 0.2;
        let mut g = vec![0.0; x.len()];
        problem.value_and_gradient(&x, &Precisions::new(1.0, 0.0).unwrap(), &mut g).unwrap();
        for l in 1..4 {
            assert!(g[l * 3..(l + 1) * 3].iter().all(|&v| v == 0.0));
        }
        assert!(g[15..].iter().all(|&v| v == 0.0));
        assert!(g[0] != 0.0 && g[13] != 0.0);
    }

    #[test]
    fn mismatched_library_is_rejected() {
        let shape = NetworkShape::new(3, 4, 2, ActivationKind::Tanh).unwrap();
        let w = random_weights(&shape, 2);
        let (path, _) = teacher_path(&shape, &w, &[vec![0.1, -0.2, 0.3]]);
        let two = lib(vec![(vec![0.0; 2], vec![0.0; 2]), (vec![0.0; 2], vec![0.0; 2])]);
        let prec = Precisions::new(1.0, 1.0).unwrap();
        assert!(matches!(measurement_cost(&path, &two, &prec, &shape), Err(Error::Contract(_))));
        let wide = lib(vec![(vec![0.0; 3], vec![0.0; 3])]);
        assert!(action(&path, &wide, &prec, &shape).is_err());
    }

    #[test]
    fn init_pins_measured_components() {
        let shape = NetworkShape::new(4, 6, 3, ActivationKind::Tanh).unwrap();
        let data = lib(vec![(vec![0.1, 0.2, 0.3], vec![-0.1, -0.2, -0.3]), (vec![0.0, 0.5, 0.1], vec![0.9, 0.8, 0.7])]);
        let problem = MlProblem::new(shape, data).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = problem.init_path(&InitRanges::default(), &mut rng);
        let b = problem.breakdown(&x, &Precisions::new(1.0, 0.0).unwrap()).unwrap();
        assert_eq!(b.measurement_term, 0.0);
        assert_eq!(b.total, 0.0);
        assert!(x.iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    fn da_problem(estimate: bool) -> DynamicalProblem {
        DynamicalProblem {
            dim: 5,
            map: StepMap::Lorenz96 { dt: 0.025 },
            params: if estimate {
                ParamSpec::Estimated { init_range: (6.0, 10.0) }
            } else {
                ParamSpec::Known { values: vec![8.0] }
            },
            observed_indices: vec![0, 2, 3],
            ni_steps: 2,
            n_observations: 3,
            observations: vec![1.0, 2.0, 3.0, -1.0, 0.5, 4.0, 2.5, 2.5, 2.5],
        }
    }

    #[test]
    fn da_true_trajectory_has_zero_action() {
        let mut p = da_problem(false);
        let mut states = vec![1.0, 2.0, -0.5, 3.0, 8.5];
        for _ in 1..p.n_times() {
            let next = p.map.step(&states[states.len() - 5..], &[8.0]);
            states.extend(next);
        }
        for n in 0..p.n_observations {
            let t = p.observation_time(n);
            for (r, &idx) in p.observed_indices.clone().iter().enumerate() {
                p.observations[n * 3 + r] = states[t * 5 + idx];
            }
        }
        let path = DaPath { dim: 5, states, params: vec![] };
        let b = action_da(&path, &p, &Precisions::new(1.0, 100.0).unwrap()).unwrap();
        assert_eq!(b.measurement_term, 0.0);
        assert_eq!(b.model_term, 0.0);
    }

    #[test]
    fn da_scalar_measurement_term() {
        // F=1, one observed component, residual 0.3, R_m=2: (2/2)(0.09)
        let p = DynamicalProblem {
            dim: 4,
            map: StepMap::Lorenz96 { dt: 0.01 },
            params: ParamSpec::Known { values: vec![8.0] },
            observed_indices: vec![1],
            ni_steps: 1,
            n_observations: 1,
            observations: vec![1.0],
        };
        let mut states = vec![0.0; 8];
        states[4 + 1] = 1.3;
        let path = DaPath { dim: 4, states, params: vec![] };
        let b = action_da(&path, &p, &Precisions::new(2.0, 0.0).unwrap()).unwrap();
        assert!((b.measurement_term - 0.09).abs() < 1e-15);
        assert_eq!(b.total, b.measurement_term);
    }

    #[test]
    fn da_length_mismatch() {
        let p = da_problem(true);
        let path = DaPath { dim: 5, states: vec![0.0; 5 * p.n_times()], params: vec![] };
        assert!(matches!(action_da(&path, &p, &Precisions::new(1.0, 1.0).unwrap()), Err(Error::Contract(_))));
    }

    #[test]
    fn da_init_pins_observations() {
        let p = DaProblem::new(da_problem(true)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = p.init_path(&InitRanges::default(), &mut rng);
        let b = p.breakdown(&x, &Precisions::new(1.0, 0.0).unwrap()).unwrap();
        assert_eq!(b.total, 0.0);
        let f = *x.last().unwrap();
        assert!((6.0..=10.0).contains(&f));
    }
}

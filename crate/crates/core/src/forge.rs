//! Synthetic data: teacher-network libraries, twin experiments for the
//! dynamical instance, and prediction scoring.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dynamics::{DynamicalProblem, ParamSpec, StepMap};
use crate::error::{ensure, Error, Result};
use crate::network::{
    apply_layer, forward_network, ActivationKind, DataLibrary, DataPair, GeneratorMetadata, NetworkShape, Weights,
};
use crate::seed::{self, Purpose};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TeacherSpec {
    pub shape: NetworkShape,
    pub weight_seed: u64,
    pub input_range: (f64, f64),
    pub noise_variance: f64,
    pub noise_mean: f64,
    /// Teacher weights are uniform on `[-scale, scale]`; `None` means `1/√N`.
    pub weight_scale: Option<f64>,
}

impl Default for TeacherSpec {
    fn default() -> Self {
        TeacherSpec {
            shape: NetworkShape { n_neurons: 10, n_layers: 101, n_observed: 10, n_observed_out: None, activation: ActivationKind::Tanh },
            weight_seed: 1,
            input_range: (-0.1, 0.1),
            noise_variance: 0.0025,
            noise_mean: 0.0,
            weight_scale: None,
        }
    }
}

impl TeacherSpec {
    pub fn validate(&self) -> Result<()> {
        self.shape.validate()?;
        if !(self.noise_variance >= 0.0 && self.noise_variance.is_finite()) {
            return Err(Error::Config(format!("noise variance must be non-negative, got {}", self.noise_variance)));
        }
        if !(self.input_range.0 <= self.input_range.1) {
            return Err(Error::Config("input range is empty".into()));
        }
        if let Some(s) = self.weight_scale {
            if !(s >= 0.0 && s.is_finite()) {
                return Err(Error::Config(format!("weight scale must be non-negative, got {s}")));
            }
        }
        Ok(())
    }

    pub fn effective_weight_scale(&self) -> f64 {
        self.weight_scale.unwrap_or(1.0 / (self.shape.n_neurons as f64).sqrt())
    }

    pub fn weights(&self) -> Weights {
        let scale = self.effective_weight_scale();
        let mut rng = seed::stream(self.weight_seed, Purpose::TeacherWeights, 0);
        let data = (0..self.shape.weight_len())
            .map(|_| if scale > 0.0 { rng.random_range(-scale..=scale) } else { 0.0 })
            .collect();
        Weights::from_flat(&self.shape, data).expect("generated weights match shape")
    }

    fn noise(&self) -> Option<Normal<f64>> {
        (self.noise_variance > 0.0).then(|| Normal::new(self.noise_mean, self.noise_variance.sqrt()).expect("valid normal"))
    }
}

/// Clean teacher pair and its noisy observation, drawn from one stream.
struct Draw {
    clean_input: Vec<f64>,
    clean_output: Vec<f64>,
    pair: DataPair,
}

fn draw_pair(spec: &TeacherSpec, weights: &Weights, rng: &mut ChaCha8Rng) -> Draw {
    let s = &spec.shape;
    let (lo, hi) = spec.input_range;
    let input: Vec<f64> = (0..s.n_neurons).map(|_| if hi > lo { rng.random_range(lo..=hi) } else { lo }).collect();
    let mut x = input.clone();
    for l in 0..s.n_layers - 1 {
        x = apply_layer(&x, weights.layer(l), s.activation);
    }
    let noise = spec.noise();
    let mut noisy = |v: f64| match &noise {
        Some(n) => v + n.sample(rng),
        None => v + spec.noise_mean,
    };
    let pair = DataPair {
        input: input[..s.n_in()].iter().map(|&v| noisy(v)).collect(),
        output: x[..s.n_out()].iter().map(|&v| noisy(v)).collect(),
    };
    Draw { clean_input: input, clean_output: x, pair }
}

fn library_from(spec: &TeacherSpec, m: usize, seed: u64, purpose: Purpose) -> Result<(DataLibrary, Vec<Draw>)> {
    spec.validate()?;
    if m == 0 {
        return Err(Error::Config("a library needs at least one pair".into()));
    }
    let weights = spec.weights();
    let draws: Vec<Draw> = (0..m)
        .map(|k| {
            let mut rng = seed::stream(seed, purpose, k as u64);
            draw_pair(spec, &weights, &mut rng)
        })
        .collect();
    let metadata = GeneratorMetadata {
        teacher_seed: spec.weight_seed,
        library_seed: seed,
        teacher_neurons: spec.shape.n_neurons,
        teacher_layers: spec.shape.n_layers,
        teacher_activation: Some(spec.shape.activation),
        weight_scale: spec.effective_weight_scale(),
        input_range: spec.input_range,
        noise_mean: spec.noise_mean,
    };
    let lib = DataLibrary::new(draws.iter().map(|d| d.pair.clone()).collect(), spec.noise_variance, metadata)?;
    Ok((lib, draws))
}

/// `m` noisy teacher pairs. Pair `k` uses its own stream, so the first `m`
/// pairs of a larger library are identical to a library of size `m`.
pub fn generate_library(spec: &TeacherSpec, m: usize, seed: u64) -> Result<DataLibrary> {
    Ok(library_from(spec, m, seed, Purpose::Library)?.0)
}

/// Library plus the noise-free inputs and outputs behind each pair.
pub fn generate_library_with_clean(spec: &TeacherSpec, m: usize, seed: u64) -> Result<(DataLibrary, Vec<(Vec<f64>, Vec<f64>)>)> {
    let (lib, draws) = library_from(spec, m, seed, Purpose::Library)?;
    Ok((lib, draws.into_iter().map(|d| (d.clean_input, d.clean_output)).collect()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionReport {
    pub m_train: usize,
    pub m_predict: usize,
    pub mean_square_error: f64,
    /// Squared error of each pair averaged over its observed output components.
    pub per_pair_errors: Vec<f64>,
}

/// Scores `weights` on an explicit set of pairs. Unobserved input components
/// are fed to the model as zero.
pub fn prediction_error_on(weights: &Weights, shape: &NetworkShape, pairs: &DataLibrary, m_train: usize) -> Result<PredictionReport> {
    weights.check_shape(shape)?;
    pairs.check_against(shape)?;
    let out = shape.output_layer();
    let l = shape.n_out();
    let per_pair_errors: Vec<f64> = pairs
        .pairs
        .iter()
        .map(|p| {
            let mut input = vec![0.0; shape.n_neurons];
            input[..p.input.len()].copy_from_slice(&p.input);
            let layers = forward_network(&input, weights, shape)?;
            Ok(layers[out][..l].iter().zip(&p.output).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / l as f64)
        })
        .collect::<Result<_>>()?;
    let mean_square_error = per_pair_errors.iter().sum::<f64>() / per_pair_errors.len() as f64;
    Ok(PredictionReport { m_train, m_predict: per_pair_errors.len(), mean_square_error, per_pair_errors })
}

/// Squared output error averaged over the `L` observed components and `m_p`
/// fresh teacher pairs (drawn from a stream disjoint from training libraries).
pub fn prediction_error(
    weights: &Weights,
    shape: &NetworkShape,
    teacher: &TeacherSpec,
    m_p: usize,
    m_train: usize,
    seed: u64,
) -> Result<PredictionReport> {
    ensure(shape.n_in() == teacher.shape.n_in() && shape.n_out() == teacher.shape.n_out(), || {
        "model and teacher observe different numbers of components".into()
    })?;
    let (fresh, _) = library_from(teacher, m_p, seed, Purpose::Prediction)?;
    prediction_error_on(weights, shape, &fresh, m_train)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TwinSpec {
    pub dim: usize,
    pub dt: f64,
    pub forcing: f64,
    pub observed_indices: Vec<usize>,
    pub ni_steps: usize,
    pub n_observations: usize,
    pub transient_steps: usize,
    /// Estimate the forcing jointly with the states.
    pub estimate_params: bool,
    pub param_init_range: (f64, f64),
}

impl Default for TwinSpec {
    fn default() -> Self {
        TwinSpec {
            dim: 5,
            dt: 0.025,
            forcing: 8.0,
            observed_indices: vec![0, 1, 3],
            ni_steps: 2,
            n_observations: 40,
            transient_steps: 1000,
            estimate_params: true,
            param_init_range: (4.0, 12.0),
        }
    }
}

/// Generating trajectory and parameters, for scoring only.
#[derive(Clone, Debug, PartialEq)]
pub struct TwinTruth {
    /// Row-major `n_times × dim`.
    pub trajectory: Vec<f64>,
    pub params: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct TwinExperiment {
    pub problem: DynamicalProblem,
    truth: TwinTruth,
}

impl TwinExperiment {
    pub fn truth_for_scoring(&self) -> &TwinTruth {
        &self.truth
    }
}

/// Integrates the true model past a transient, samples the observed
/// components every `ni_steps`, and adds Gaussian noise.
pub fn generate_twin(spec: &TwinSpec, noise_variance: f64, seed: u64) -> Result<TwinExperiment> {
    if !(noise_variance >= 0.0 && noise_variance.is_finite()) {
        return Err(Error::Config(format!("noise variance must be non-negative, got {noise_variance}")));
    }
    let map = StepMap::Lorenz96 { dt: spec.dt };
    let params = vec![spec.forcing];
    let mut problem = DynamicalProblem {
        dim: spec.dim,
        map,
        params: if spec.estimate_params {
            ParamSpec::Estimated { init_range: spec.param_init_range }
        } else {
            ParamSpec::Known { values: params.clone() }
        },
        observed_indices: spec.observed_indices.clone(),
        ni_steps: spec.ni_steps,
        n_observations: spec.n_observations,
        observations: vec![0.0; spec.n_observations * spec.observed_indices.len()],
    };
    problem.validate()?;

    let mut rng = seed::stream(seed, Purpose::Twin, 0);
    let unit = Normal::new(0.0, 1.0).expect("valid normal");
    let mut x: Vec<f64> = (0..spec.dim).map(|_| spec.forcing + unit.sample(&mut rng)).collect();
    for _ in 0..spec.transient_steps {
        x = map.step(&x, &params);
    }
    let n_times = problem.n_times();
    let mut trajectory = Vec::with_capacity(n_times * spec.dim);
    for t in 0..n_times {
        if t > 0 {
            x = map.step(&x, &params);
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Generation(format!("trajectory diverged at step {t}")));
        }
        trajectory.extend_from_slice(&x);
    }
    let noise = (noise_variance > 0.0).then(|| Normal::new(0.0, noise_variance.sqrt()).expect("valid normal"));
    let l = problem.n_observed();
    for n in 0..problem.n_observations {
        let t = problem.observation_time(n);
        for (r, &idx) in problem.observed_indices.iter().enumerate() {
            let clean = trajectory[t * spec.dim + idx];
            problem.observations[n * l + r] = clean + noise.as_ref().map_or(0.0, |d| d.sample(&mut rng));
        }
    }
    Ok(TwinExperiment { problem, truth: TwinTruth { trajectory, params } })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_teacher(noise: f64) -> TeacherSpec {
        TeacherSpec {
            shape: NetworkShape::new(4, 6, 4, ActivationKind::Tanh).unwrap(),
            weight_seed: 3,
            noise_variance: noise,
            ..Default::default()
        }
    }

    #[test]
    fn noiseless_library_equals_teacher_pass() {
        let spec = small_teacher(0.0);
        let (lib, clean) = generate_library_with_clean(&spec, 5, 10).unwrap();
        let w = spec.weights();
        for (p, (ci, co)) in lib.pairs.iter().zip(&clean) {
            assert_eq!(&p.input, ci);
            let layers = forward_network(ci, &w, &spec.shape).unwrap();
            assert_eq!(&p.output, &layers[5]);
            assert_eq!(&p.output, co);
            assert!(ci.iter().all(|v| (-0.1..=0.1).contains(v)));
        }
    }

    #[test]
    fn libraries_are_reproducible_and_prefix_consistent() {
        let spec = small_teacher(0.0025);
        let a = generate_library(&spec, 6, 42).unwrap();
        assert_eq!(a, generate_library(&spec, 6, 42).unwrap());
        assert_eq!(a.take(3).unwrap().pairs, generate_library(&spec, 3, 42).unwrap().pairs);
        assert_ne!(a.pairs, generate_library(&spec, 6, 43).unwrap().pairs);
    }

    #[test]
    fn empirical_noise_variance() {
        // 10 inputs + 10 outputs per pair, 5000 pairs = 1e5 samples
        let spec = TeacherSpec {
            shape: NetworkShape::new(10, 2, 10, ActivationKind::Tanh).unwrap(),
            ..Default::default()
        };
        let (lib, clean) = generate_library_with_clean(&spec, 5000, 8).unwrap();
        let mut resid = Vec::with_capacity(100_000);
        for (p, (ci, co)) in lib.pairs.iter().zip(&clean) {
            resid.extend(p.input.iter().zip(ci).map(|(a, b)| a - b));
            resid.extend(p.output.iter().zip(co).map(|(a, b)| a - b));
        }
        assert_eq!(resid.len(), 100_000);
        let mean = resid.iter().sum::<f64>() / resid.len() as f64;
        let var = resid.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / (resid.len() - 1) as f64;
        assert!((var / 0.0025 - 1.0).abs() < 0.05, "variance {var}");
    }

    #[test]
    fn perfect_model_predicts_noiseless_data_exactly() {
        let spec = small_teacher(0.0);
        let r = prediction_error(&spec.weights(), &spec.shape, &spec, 20, 0, 5).unwrap();
        assert_eq!(r.mean_square_error, 0.0);
        assert_eq!(r.m_predict, 20);
        let noisy = small_teacher(0.0025);
        let r = prediction_error(&noisy.weights(), &noisy.shape, &noisy, 20, 0, 5).unwrap();
        assert!(r.mean_square_error > 0.0);
        let mean = r.per_pair_errors.iter().sum::<f64>() / 20.0;
        assert!((mean - r.mean_square_error).abs() < 1e-15);
    }

    #[test]
    fn scalar_prediction_error() {
        // identity network, N=L=1, W=1: output equals input; residual 0.3
        let shape = NetworkShape::new(1, 2, 1, ActivationKind::Identity).unwrap();
        let w = Weights::from_flat(&shape, vec![1.0]).unwrap();
        let lib = DataLibrary::new(vec![DataPair { input: vec![0.5], output: vec![0.8] }], 0.0, GeneratorMetadata::default()).unwrap();
        let r = prediction_error_on(&w, &shape, &lib, 1).unwrap();
        assert!((r.mean_square_error - 0.09).abs() < 1e-15);
    }

    #[test]
    fn prediction_shape_mismatch() {
        let spec = small_teacher(0.0);
        let other = NetworkShape::new(4, 3, 4, ActivationKind::Tanh).unwrap();
        assert!(prediction_error(&spec.weights(), &other, &spec, 3, 0, 1).is_err());
    }

    #[test]
    fn noiseless_twin_observes_truth() {
        let spec = TwinSpec { observed_indices: vec![0, 1, 2, 3, 4], ni_steps: 1, n_observations: 10, ..Default::default() };
        let twin = generate_twin(&spec, 0.0, 4).unwrap();
        let truth = twin.truth_for_scoring();
        let p = &twin.problem;
        for n in 0..p.n_observations {
            let t = p.observation_time(n);
            assert_eq!(p.observation(n), &truth.trajectory[t * 5..(t + 1) * 5]);
        }
        assert_eq!(truth.trajectory.len(), p.n_times() * 5);
    }

    #[test]
    fn twin_noise_variance() {
        let spec = TwinSpec { observed_indices: vec![0, 1, 2, 3, 4], ni_steps: 1, n_observations: 20_000, ..Default::default() };
        let clean = generate_twin(&spec, 0.0, 9).unwrap();
        let noisy = generate_twin(&spec, 0.04, 9).unwrap();
        let resid: Vec<f64> = noisy.problem.observations.iter().zip(&clean.problem.observations).map(|(a, b)| a - b).collect();
        assert_eq!(resid.len(), 100_000);
        let var = resid.iter().map(|r| r * r).sum::<f64>() / resid.len() as f64;
        assert!((var / 0.04 - 1.0).abs() < 0.05, "variance {var}");
    }

    #[test]
    fn twin_is_reproducible() {
        let spec = TwinSpec::default();
        let a = generate_twin(&spec, 0.01, 2).unwrap();
        let b = generate_twin(&spec, 0.01, 2).unwrap();
        assert_eq!(a.problem, b.problem);
        assert_eq!(a.truth_for_scoring(), b.truth_for_scoring());
    }
}

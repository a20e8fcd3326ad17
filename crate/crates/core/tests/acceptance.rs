//! Acceptance criteria. Each test writes one `ACCEPTANCE <name>: PASS|FAIL`
//! line with the measured numbers, then asserts. Tests take a shared lock so
//! wall-clock limits are measured without competing runs.

use std::io::Write;
use std::path::Path;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use mlda_core::action::{DaProblem, MlProblem, Precisions, StandardModel};
use mlda_core::anneal::{anneal, distinct_levels, plateau_detect, AnnealSchedule, InitRanges};
use mlda_core::continuum::{boundary_momentum_check, el_residual, omega, Boundary, ClosureField, ContinuumPath, LinearField, PerceptronField};
use mlda_core::experiment::{self, ExperimentConfig, Mode, SweepCell};
use mlda_core::forge::{generate_library, generate_library_with_clean, generate_twin, TeacherSpec, TwinSpec};
use mlda_core::lbfgs::{minimize, OptimizerConfig};
use mlda_core::network::{forward_network, ActivationKind, NetworkShape, Weights};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

static LOCK: Mutex<()> = Mutex::new(());

/// Goes to the raw stderr handle so the line shows up without `--nocapture`.
fn report(name: &str, pass: bool, detail: String) {
    let _ = writeln!(std::io::stderr(), "ACCEPTANCE {name}: {} ({detail})", if pass { "PASS" } else { "FAIL" });
}

fn serial() -> std::sync::MutexGuard<'static, ()> {
    LOCK.lock().unwrap_or_else(|e| e.into_inner())
}

/// `‖g - fd‖₂ / ‖fd‖₂` with central differences of step `h`.
fn gradient_rel_error<P: StandardModel>(p: &P, x: &[f64], prec: &Precisions, h: f64) -> f64 {
    let mut g = vec![0.0; x.len()];
    p.value_and_gradient(x, prec, &mut g).unwrap();
    let mut xs = x.to_vec();
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..x.len() {
        xs[i] = x[i] + h;
        let fp = p.breakdown(&xs, prec).unwrap().total;
        xs[i] = x[i] - h;
        let fm = p.breakdown(&xs, prec).unwrap().total;
        xs[i] = x[i];
        let fd = (fp - fm) / (2.0 * h);
        num += (g[i] - fd) * (g[i] - fd);
        den += fd * fd;
    }
    (num / den.max(f64::MIN_POSITIVE)).sqrt()
}

#[test]
fn gradient_correctness() {
    let _g = serial();
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);

    let shape = NetworkShape::new(3, 5, 3, ActivationKind::Tanh).unwrap();
    let teacher = TeacherSpec { shape, ..Default::default() };
    let ml = MlProblem::new(shape, generate_library(&teacher, 2, 1).unwrap()).unwrap();
    let mut worst_ml: f64 = 0.0;
    for _ in 0..100 {
        let x: Vec<f64> = (0..ml.dim()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let prec = Precisions { r_m: rng.random_range(0.5..2.0), r_f: 10f64.powf(rng.random_range(-2.0..2.0)) };
        worst_ml = worst_ml.max(gradient_rel_error(&ml, &x, &prec, 1e-5));
    }

    let twin = TwinSpec { dim: 5, n_observations: 3, ni_steps: 2, ..Default::default() };
    let da = DaProblem::new(generate_twin(&twin, 0.0, 1).unwrap().problem).unwrap();
    let mut worst_da: f64 = 0.0;
    for _ in 0..100 {
        let mut x: Vec<f64> = (0..da.dim()).map(|_| rng.random_range(-5.0..10.0)).collect();
        *x.last_mut().unwrap() = rng.random_range(4.0..12.0);
        let prec = Precisions { r_m: rng.random_range(0.5..2.0), r_f: 10f64.powf(rng.random_range(-2.0..2.0)) };
        worst_da = worst_da.max(gradient_rel_error(&da, &x, &prec, 1e-5));
    }
    let elapsed = t.elapsed();
    let pass = worst_ml < 1e-6 && worst_da < 1e-6 && elapsed < Duration::from_secs(10);
    report("gradient-correctness", pass, format!("max rel error ML {worst_ml:.2e}, DA {worst_da:.2e}, {elapsed:.2?}"));
    assert!(pass);
}

#[test]
fn optimizer_sanity() {
    let _g = serial();
    let t = Instant::now();
    let n = 50;
    // ½ (x - c)ᵀ D (x - c) with eigenvalues spread over [1, 10]
    let d: Vec<f64> = (0..n).map(|i| 1.0 + 9.0 * i as f64 / (n - 1) as f64).collect();
    let c: Vec<f64> = (0..n).map(|i| (i as f64 * 0.37).sin()).collect();
    let cfg = OptimizerConfig { grad_tolerance: 1e-8, ..Default::default() };
    let quad = minimize(
        |x, g| {
            let mut f = 0.0;
            for i in 0..n {
                g[i] = d[i] * (x[i] - c[i]);
                f += 0.5 * d[i] * (x[i] - c[i]).powi(2);
            }
            f
        },
        &vec![0.0; n],
        &cfg,
    )
    .unwrap();
    let quad_ok = quad.final_grad_norm < 1e-8 && quad.iterations <= 55;

    let rosen = minimize(
        |x, g| {
            let (a, b) = (x[0], x[1]);
            g[0] = -2.0 * (1.0 - a) - 400.0 * a * (b - a * a);
            g[1] = 200.0 * (b - a * a);
            (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2)
        },
        &[-1.2, 1.0],
        &OptimizerConfig { grad_tolerance: 1e-10, ..Default::default() },
    )
    .unwrap();
    let rosen_err = (rosen.minimizer[0] - 1.0).abs().max((rosen.minimizer[1] - 1.0).abs());
    let elapsed = t.elapsed();
    let pass = quad_ok && rosen_err < 1e-6 && elapsed < Duration::from_secs(1);
    report(
        "optimizer-sanity",
        pass,
        format!(
            "quadratic {} iterations, grad {:.1e}; Rosenbrock error {rosen_err:.1e} in {} iterations; {elapsed:.2?}",
            quad.iterations, quad.final_grad_norm, rosen.iterations
        ),
    );
    assert!(pass);
}

fn desk(m: usize, l_f: usize, dir: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig { m_train: m, seed: 1, out_dir: dir.to_path_buf(), ..Default::default() };
    cfg.set_layers(l_f);
    cfg
}

/// Final-β levels, their distinct values and the plateau flags of each path.
fn final_levels(dir: &Path, cfg: &ExperimentConfig) -> (Vec<f64>, Vec<f64>, Vec<bool>) {
    let ledger = mlda_core::io::read_ledger(&dir.join("ledger.csv")).unwrap();
    let finals: Vec<f64> = ledger.final_rows().iter().map(|r| r.total).collect();
    let plateau = plateau_detect(&ledger, cfg.plateau.window, cfg.plateau.rel_tol).unwrap();
    (finals.clone(), distinct_levels(&finals, 1e-3), plateau.iter().map(|p| p.plateaued).collect())
}

#[test]
fn va_level_structure_m1() {
    let _g = serial();
    let dir = tempfile::tempdir().unwrap();
    let cfg = desk(1, 20, dir.path());
    let t = Instant::now();
    experiment::run_experiment(&cfg).unwrap();
    let elapsed = t.elapsed();
    let (_, levels, plateaued) = final_levels(dir.path(), &cfg);
    let n_persisting = plateaued.iter().filter(|&&p| p).count();
    let gap = if levels.len() > 1 { levels[1] / levels[0] } else { f64::INFINITY };
    let pass = levels.len() >= 2 && n_persisting >= 2 && gap <= 10.0 && elapsed < Duration::from_secs(600);
    report(
        "va-level-structure-M1",
        pass,
        format!(
            "{} distinct final levels, {n_persisting} plateaued, lowest {:.3e}, second/lowest {gap:.2}, {elapsed:.1?}",
            levels.len(),
            levels[0]
        ),
    );
    assert!(pass);
}

#[test]
fn va_level_separation_m10() {
    let _g = serial();
    let dir = tempfile::tempdir().unwrap();
    let cfg = desk(10, 20, dir.path());
    let t = Instant::now();
    let summary = experiment::run_experiment(&cfg).unwrap();
    let elapsed = t.elapsed();
    let (_, levels, plateaued) = final_levels(dir.path(), &cfg);
    let best = summary.results["best_index"].as_u64().unwrap() as usize;
    let gap = if levels.len() > 1 { levels[1] / levels[0] } else { f64::INFINITY };
    let pass = plateaued[best] && gap >= 10.0 && elapsed < Duration::from_secs(1800);
    report(
        "va-level-separation-M10",
        pass,
        format!(
            "lowest {:.3e} plateaued={}, second-lowest level {:.3e} (ratio {gap:.2}), {} distinct levels, {elapsed:.1?}",
            levels[0],
            plateaued[best],
            levels.get(1).copied().unwrap_or(f64::NAN),
            levels.len()
        ),
    );
    assert!(pass);
}

#[test]
fn prediction_error_decreases_with_m() {
    let _g = serial();
    let dir = tempfile::tempdir().unwrap();
    let base = desk(1, 50, dir.path());
    let cells: Vec<SweepCell> = [1, 10]
        .iter()
        .flat_map(|&m| (1..=5).map(move |seed| SweepCell { m_train: m, l_f: 50, seed }))
        .collect();
    let t = Instant::now();
    let (rows, stats) = experiment::sweep(&base, &cells).unwrap();
    let mean = |m: usize| stats.iter().find(|s| s.m_train == m).unwrap();
    let (s1, s10) = (mean(1), mean(10));
    let all_ok = rows.iter().all(|r| r.status == "ok");
    let pass = all_ok && s10.mean_mse < s1.mean_mse && s1.var_mse.is_finite() && s10.var_mse.is_finite();
    report(
        "prediction-error-monotone",
        pass,
        format!(
            "l_F=50, 5 seeds: MSE(M=1) {:.4e} (var {:.2e}), MSE(M=10) {:.4e} (var {:.2e}), {:.1?}",
            s1.mean_mse,
            s1.var_mse,
            s10.mean_mse,
            s10.var_mse,
            t.elapsed()
        ),
    );
    assert!(pass);
}

#[test]
fn exact_recovery_linear_network() {
    let _g = serial();
    let shape = NetworkShape::new(3, 4, 3, ActivationKind::Identity).unwrap();
    let teacher = TeacherSpec { shape, noise_variance: 0.0, weight_seed: 5, ..Default::default() };
    let m = 6;
    let (lib, clean) = generate_library_with_clean(&teacher, m, 2).unwrap();
    let problem = MlProblem::new(shape, lib).unwrap();
    let schedule = AnnealSchedule::spanning(-4.0, 8.0, 1.5, 5);
    let opt = OptimizerConfig { grad_tolerance: 1e-12, max_iterations: 5000, ..Default::default() };
    let out = anneal(&problem, &schedule, &opt, &InitRanges { state: Some((-1.0, 1.0)), ..Default::default() }, 3).unwrap();
    let lowest = out.best_breakdown.total;
    let path = problem.path(&out.best).unwrap();
    let mut worst: f64 = 0.0;
    for (k, (input, output)) in clean.iter().enumerate() {
        let fwd = forward_network(input, path.weights(), &shape).unwrap();
        for r in 0..3 {
            worst = worst.max((fwd[3][r] - output[r]).abs());
            worst = worst.max((path.activity(k, 3)[r] - output[r]).abs());
        }
    }
    let pass = lowest <= 1e-10 && worst <= 1e-6;
    report("exact-recovery-linear", pass, format!("lowest final action {lowest:.2e}, max output error {worst:.2e}"));
    assert!(pass);
}

#[test]
fn da_twin_recovers_forcing() {
    let _g = serial();
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig { mode: Mode::Da, seed: 1, out_dir: dir.path().to_path_buf(), ..Default::default() };
    cfg.schedule = AnnealSchedule { r_f0: 0.01, alpha: 1.5, n_beta: 40, k_inits: 10, r_m: 1.0 };
    assert_eq!((cfg.twin.dim, cfg.twin.observed_indices.len(), cfg.twin_noise_variance), (5, 3, 0.0));
    let s = experiment::run_experiment(&cfg).unwrap();
    let est = s.results["estimated_params"][0].as_f64().unwrap();
    let truth = s.results["true_params"][0].as_f64().unwrap();
    let rel = (est - truth).abs() / truth;
    let pass = rel < 0.01;
    report("da-twin-forcing", pass, format!("forcing {est:.6} vs true {truth}, relative error {rel:.2e}"));
    assert!(pass);
}

fn givens(n: usize, i: usize, j: usize, th: f64) -> Vec<f64> {
    let mut g: Vec<f64> = (0..n * n).map(|k| if k / n == k % n { 1.0 } else { 0.0 }).collect();
    let (c, s) = (th.cos(), th.sin());
    g[i * n + i] = c;
    g[j * n + j] = c;
    g[i * n + j] = -s;
    g[j * n + i] = s;
    g
}

fn matmul(a: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    (0..n * n).map(|k| (0..n).map(|m| a[(k / n) * n + m] * b[m * n + k % n]).sum()).collect()
}

#[test]
fn continuum_diagnostics() {
    let _g = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(77);

    // Ω + Ωᵀ == 0 exactly on random perceptron fields
    let mut skew_ok = true;
    for _ in 0..20 {
        let shape = NetworkShape::new(8, 3, 8, ActivationKind::Tanh).unwrap();
        let w = Weights::from_flat(&shape, (0..shape.weight_len()).map(|_| rng.random_range(-1.5..1.5)).collect()).unwrap();
        let field = PerceptronField::new(&shape, w, 0.0, 1.0).unwrap();
        let x: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let o = omega(&x, rng.random_range(0.0..2.0), &field);
        skew_ok &= (0..8).all(|a| (0..8).all(|b| o[a * 8 + b] + o[b * 8 + a] == 0.0));
    }

    // symmetric A = Q diag(λ) Qᵀ; x(l) = Q e^{Λl} Qᵀ v solves the EL equation x'' = A² x
    let n = 3;
    let q = matmul(&givens(n, 0, 1, 0.6), &givens(n, 1, 2, -0.9), n);
    let lam = [0.7, -0.4, 0.2];
    let v = [0.5, -0.3, 0.8];
    let qt: Vec<f64> = (0..n * n).map(|k| q[(k % n) * n + k / n]).collect();
    let diag: Vec<f64> = (0..n * n).map(|k| if k / n == k % n { lam[k / n] } else { 0.0 }).collect();
    let a = matmul(&matmul(&q, &diag, n), &qt, n);
    let field = LinearField::new(n, a).unwrap();
    let coeff: Vec<f64> = (0..n).map(|i| (0..n).map(|k| qt[i * n + k] * v[k]).sum()).collect();
    let exact = |l: f64| -> Vec<f64> { (0..n).map(|i| (0..n).map(|k| q[i * n + k] * (lam[k] * l).exp() * coeff[k]).sum()).collect() };
    let prec = Precisions { r_m: 1.0, r_f: 1.0 };
    let mut norms = Vec::new();
    let mut hs = Vec::new();
    for pts in [21usize, 41, 81, 161] {
        let h = 2.0 / (pts - 1) as f64;
        let path = ContinuumPath::new(0.0, h, (0..pts).map(|i| exact(i as f64 * h)).collect()).unwrap();
        norms.push(el_residual(&path, &field, &Boundary::default(), &prec).unwrap().max_norm);
        hs.push(h);
    }
    let slopes: Vec<f64> = (1..norms.len()).map(|i| (norms[i - 1] / norms[i]).ln() / (hs[i - 1] / hs[i]).ln()).collect();
    let slope_ok = slopes.iter().all(|s| (s - 2.0).abs() <= 0.2);

    // exact trajectory x' = F has zero momentum: straight line along a constant field
    let flow = ClosureField { n: 2, value: |_: &[f64], _| vec![0.5, -0.25], jacobian: |_: &[f64], _| vec![0.0; 4] };
    let line = ContinuumPath::new(0.0, 0.25, (0..9).map(|i| vec![0.125 * i as f64, -0.0625 * i as f64]).collect()).unwrap();
    let mom = boundary_momentum_check(&line, &flow, &Precisions { r_m: 1.0, r_f: 5.0 }, 0.0).unwrap();
    // and on x' = -x sampled finely the one-sided estimate is near zero
    let decay = LinearField::new(1, vec![-1.0]).unwrap();
    let h = 1.0 / 4000.0;
    let fine = ContinuumPath::new(0.0, h, (0..4001).map(|i| vec![(-(i as f64) * h).exp()]).collect()).unwrap();
    let mom_fine = boundary_momentum_check(&fine, &decay, &prec, 1e-6).unwrap();

    let pass = skew_ok && slope_ok && mom.passed && mom_fine.passed;
    report(
        "continuum-diagnostics",
        pass,
        format!(
            "skew exact: {skew_ok}; EL slopes {:?}; momentum on exact trajectories {:.1e}, {:.1e}",
            slopes.iter().map(|s| format!("{s:.3}")).collect::<Vec<_>>(),
            mom.start_norm.max(mom.end_norm),
            mom_fine.start_norm.max(mom_fine.end_norm)
        ),
    );
    assert!(pass);
}

#[test]
fn determinism_across_worker_counts() {
    let _g = serial();
    let dir = tempfile::tempdir().unwrap();
    let files = ["library.csv", "ledger.csv", "best_path.csv", "prediction.csv"];
    let mut cfg = ExperimentConfig {
        teacher: TeacherSpec { shape: NetworkShape::new(4, 8, 4, ActivationKind::Tanh).unwrap(), ..Default::default() },
        model_shape: NetworkShape::new(4, 5, 4, ActivationKind::Tanh).unwrap(),
        m_train: 3,
        m_predict: 20,
        schedule: AnnealSchedule::spanning(-3.0, 3.0, 1.5, 6),
        seed: 11,
        ..Default::default()
    };
    let mut outputs = Vec::new();
    for (i, threads) in [1usize, 4, 1].into_iter().enumerate() {
        cfg.out_dir = dir.path().join(format!("run{i}"));
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| experiment::run_experiment(&cfg)).unwrap();
        outputs.push(files.iter().map(|f| std::fs::read(cfg.out_dir.join(f)).unwrap()).collect::<Vec<_>>());
    }
    let mut da = ExperimentConfig { mode: Mode::Da, seed: 5, ..Default::default() };
    da.twin.n_observations = 10;
    da.schedule = AnnealSchedule { r_f0: 0.1, alpha: 2.0, n_beta: 8, k_inits: 4, r_m: 1.0 };
    let mut da_out = Vec::new();
    for (i, threads) in [1usize, 3].into_iter().enumerate() {
        da.out_dir = dir.path().join(format!("da{i}"));
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| experiment::run_experiment(&da)).unwrap();
        da_out.push(std::fs::read(da.out_dir.join("ledger.csv")).unwrap());
    }
    let pass = outputs[0] == outputs[1] && outputs[1] == outputs[2] && da_out[0] == da_out[1];
    report("determinism", pass, format!("{} ML artifacts x 3 runs (1/4/1 workers), DA ledger x 2 runs (1/3 workers)", files.len()));
    assert!(pass);
}

mod common;

use common::{exact_rank, int_lower_triangular, max_abs, max_abs_diff, min_norm_oracle};
use fedma::config::RunConfig;
use fedma::engine::{run, run_with_observer, simulate_staleness, Method, SimConfig};
use fedma::linalg::{self, DenseMatrix, LowerTriangular};
use fedma::momentum::{
    momentum_row, solve_lightweight, solve_ma_weights, step_residual, unrolled_momentum_update, LightweightState,
    MomentumMatrix, OnlineMaSolver,
};
use fedma::optimizers::{Drive, OptimizerKind, ServerOptState};
use fedma::privacy::{calibrate_gamma, DpConfig, DpSettings, PrivatePayload};
use fedma::staleness::{DelayDistribution, DelayKind};
use fedma::tasks::{QuadraticTask, TaskSpec};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn cases(n: u32) -> ProptestConfig {
    // the suite has no lib.rs next to it, so regressions are not persisted
    ProptestConfig { failure_persistence: None, ..ProptestConfig::with_cases(n) }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn gauss(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// Integer `m×n` matrix: either raw entries in `[-2, 2]` or a product of two
/// such factors with inner dimension at most `rank_cap`.
fn int_matrix(rng: &mut ChaCha8Rng, m: usize, n: usize, rank_cap: usize) -> Vec<Vec<i64>> {
    if rng.random_bool(0.3) {
        return (0..m).map(|_| (0..n).map(|_| rng.random_range(-2..=2)).collect()).collect();
    }
    let r = rng.random_range(0..=rank_cap.min(m).min(n));
    let u: Vec<Vec<i64>> = (0..m).map(|_| (0..r).map(|_| rng.random_range(-2..=2)).collect()).collect();
    let v: Vec<Vec<i64>> = (0..r).map(|_| (0..n).map(|_| rng.random_range(-2..=2)).collect()).collect();
    (0..m).map(|i| (0..n).map(|j| (0..r).map(|l| u[i][l] * v[l][j]).sum()).collect()).collect()
}

fn to_dense(a: &[Vec<i64>]) -> DenseMatrix {
    DenseMatrix::from_rows(&a.iter().map(|r| r.iter().map(|&x| x as f64).collect()).collect::<Vec<_>>()).unwrap()
}

fn to_lower(a: &[Vec<i64>]) -> LowerTriangular {
    let mut w = LowerTriangular::zeros(a.len());
    for (i, row) in a.iter().enumerate() {
        for j in 0..=i {
            w.set(i, j, row[j] as f64).unwrap();
        }
    }
    w
}

fn as_f64(a: &[Vec<i64>]) -> Vec<Vec<f64>> {
    a.iter().map(|r| r.iter().map(|&x| x as f64).collect()).collect()
}

mod linear_algebra {
    use super::*;

    proptest! {
        #![proptest_config(cases(200))]

        #[test]
        fn svd_rank_equals_exact_rank(m in 1usize..=12, n in 1usize..=12, seed in any::<u64>()) {
            let a = int_matrix(&mut rng(seed), m, n, 12);
            let (exact, _) = exact_rank(&a);
            prop_assert_eq!(linalg::svd(&to_dense(&a)).unwrap().rank, exact);
        }

        #[test]
        fn min_norm_matches_elimination_oracle(m in 1usize..=30, n in 1usize..=30, seed in any::<u64>()) {
            let mut g = rng(seed);
            let a = int_matrix(&mut g, m, n, 8);
            let b = gauss(&mut g, n);
            let x = linalg::least_squares_min_norm(&to_dense(&a), &b).unwrap();
            let oracle = min_norm_oracle(&a, &b);
            prop_assert!(max_abs_diff(&x, &oracle) <= 1e-8 * max_abs(&oracle).max(1.0));
        }

        #[test]
        fn min_norm_is_a_minimiser_orthogonal_to_the_left_null_space(
            m in 2usize..=20, n in 1usize..=20, seed in any::<u64>()
        ) {
            let mut g = rng(seed);
            let r = g.random_range(1..m.min(n + 1).max(2));
            let u: Vec<Vec<f64>> = (0..r).map(|_| gauss(&mut g, m)).collect();
            let v: Vec<Vec<f64>> = (0..r).map(|_| gauss(&mut g, n)).collect();
            let a: Vec<Vec<f64>> = (0..m).map(|i| (0..n).map(|j| (0..r).map(|l| u[l][i] * v[l][j]).sum()).collect()).collect();
            let b = gauss(&mut g, n);
            let x = linalg::least_squares_min_norm(&DenseMatrix::from_rows(&a).unwrap(), &b).unwrap();
            let base = common::residual(&a, &x, &b);
            for _ in 0..20 {
                let y: Vec<f64> = x.iter().zip(gauss(&mut g, m)).map(|(xi, e)| xi + 1e-3 * e).collect();
                prop_assert!(base <= common::residual(&a, &y, &b) + 1e-9);
            }
            // z ⟂ span(u) satisfies zᵀA = 0
            let mut z = gauss(&mut g, m);
            let mut basis: Vec<Vec<f64>> = Vec::new();
            for col in &u {
                let mut q = col.clone();
                for _ in 0..2 {
                    for e in &basis {
                        let c = linalg::dot(&q, e);
                        linalg::axpy(-c, e, &mut q);
                    }
                }
                let nq = linalg::norm(&q);
                if nq > 1e-8 {
                    q.iter_mut().for_each(|x| *x /= nq);
                    basis.push(q);
                }
            }
            for _ in 0..2 {
                for e in &basis {
                    let c = linalg::dot(&z, e);
                    linalg::axpy(-c, e, &mut z);
                }
            }
            let shifted: Vec<f64> = x.iter().zip(&z).map(|(a, b)| a + b).collect();
            prop_assert!((common::residual(&a, &shifted, &b) - base).abs() <= 1e-8 * (1.0 + base));
            prop_assert!(linalg::dot(&x, &z).abs() <= 1e-8 * (1.0 + linalg::norm(&x) * linalg::norm(&z)));
            prop_assert!(linalg::norm(&x) <= linalg::norm(&shifted) + 1e-12);
        }

        #[test]
        fn svd_reconstructs_its_input(m in 1usize..=20, n in 1usize..=20, seed in any::<u64>()) {
            let mut g = rng(seed);
            let a = DenseMatrix::from_vec(m, n, gauss(&mut g, m * n)).unwrap();
            let f = linalg::svd(&a).unwrap();
            let err = f.reconstruct().sub(&a).unwrap().frobenius_sq().sqrt();
            prop_assert!(err <= 1e-12 * (m.max(n) as f64) * a.frobenius_sq().sqrt().max(1.0));
            prop_assert!(f.singular_values.windows(2).all(|w| w[0] >= w[1] && w[1] >= 0.0));
        }

        #[test]
        fn matmul_is_associative(a in 1usize..=8, b in 1usize..=8, c in 1usize..=8, d in 1usize..=8, seed in any::<u64>()) {
            let mut g = rng(seed);
            let x = DenseMatrix::from_vec(a, b, gauss(&mut g, a * b)).unwrap();
            let y = DenseMatrix::from_vec(b, c, gauss(&mut g, b * c)).unwrap();
            let z = DenseMatrix::from_vec(c, d, gauss(&mut g, c * d)).unwrap();
            let left = x.matmul(&y).unwrap().matmul(&z).unwrap();
            let right = x.matmul(&y.matmul(&z).unwrap()).unwrap();
            prop_assert!(max_abs_diff(left.data(), right.data()) <= 1e-12 * (1.0 + max_abs(left.data())));
        }
    }
}

fn small_sim(seed: u64, kind: DelayKind, p: f64, tau_max: usize) -> SimConfig {
    let mut g = rng(seed);
    let mut c = SimConfig::example(Method::FedbuffMomentum);
    c.cohort = g.random_range(1..=8);
    c.sampled = c.cohort + g.random_range(0..=4);
    c.horizon = g.random_range(5..=60);
    c.p = p;
    c.tau_max = tau_max;
    c.delay = DelayDistribution { kind, scale: g.random_range(0.5..8.0), cutoff: g.random_range(1..=15) };
    c.seed = seed;
    c
}

fn delay_kind() -> impl Strategy<Value = DelayKind> {
    prop_oneof![Just(DelayKind::HalfNormal), Just(DelayKind::Uniform), Just(DelayKind::Exponential)]
}

mod staleness {
    use super::*;

    proptest! {
        #![proptest_config(cases(64))]

        #[test]
        fn undamped_rows_without_drops_sum_to_one(seed in any::<u64>(), kind in delay_kind()) {
            let c = small_sim(seed, kind, 0.0, 10_000);
            let (w, n) = simulate_staleness(&c).unwrap();
            prop_assert_eq!(n.dropped, 0);
            for t in 0..c.horizon {
                prop_assert!((w.row_sum(t) - 1.0).abs() < 1e-12);
                prop_assert_eq!(w.arrivals(t), c.cohort);
            }
        }

        #[test]
        fn damped_rows_sum_to_at_most_one(seed in any::<u64>(), kind in delay_kind(), p in 0.01f64..3.0, tau_max in 0usize..12) {
            let c = small_sim(seed, kind, p, tau_max);
            let (w, n) = simulate_staleness(&c).unwrap();
            prop_assert_eq!(n.enqueued, n.accepted + n.dropped + n.pending_at_end);
            for t in 0..c.horizon {
                prop_assert!(w.row_sum(t) <= 1.0 + 1e-12);
                for (s, &x) in w.row(t).iter().enumerate() {
                    prop_assert!(x >= 0.0);
                    prop_assert!(t - s <= tau_max || x == 0.0);
                }
            }
        }

        #[test]
        fn zero_delay_gives_identity(seed in any::<u64>(), p in 0.0f64..3.0) {
            let mut c = small_sim(seed, DelayKind::Zero, p, 20);
            c.delay = DelayDistribution::zero();
            c.sampled = c.cohort;
            let (w, _) = simulate_staleness(&c).unwrap();
            // C additions of 1/C can land one ulp below 1
            let diff = w.matrix().to_dense().sub(&LowerTriangular::identity(c.horizon).to_dense()).unwrap();
            prop_assert!(max_abs(diff.data()) <= 1e-15);
        }
    }

    #[test]
    fn down_scaling_does_not_add_nullity() {
        let (mut total0, mut total1) = (0usize, 0usize);
        for seed in 0..20 {
            let mut c = SimConfig::example(Method::MaFull);
            c.horizon = 200;
            c.sampled = 10;
            c.seed = seed;
            let mut null = [0usize; 2];
            let mut cumulative = [0usize; 2];
            for (k, p) in [0.0, 1.0].into_iter().enumerate() {
                c.p = p;
                let d = fedma::diagnose::diagnose_config(&c).unwrap();
                null[k] = d.summary.final_nullity;
                cumulative[k] = d.rows.iter().map(|r| r.nullity).sum();
            }
            assert!(null[1] <= null[0], "seed {seed}: {null:?}");
            total0 += cumulative[0];
            total1 += cumulative[1];
        }
        assert!(total1 <= total0, "{total1} > {total0}");
    }
}

mod momentum {
    use super::*;

    #[test]
    fn rows_sum_to_one_minus_beta_power() {
        for beta in [0.0, 0.3, 0.9, 0.99] {
            let m = MomentumMatrix::new(beta, 2000).unwrap();
            for t in 1..=2000 {
                let s: f64 = m.target(t).iter().sum();
                assert!((s - (1.0 - beta.powi(t as i32))).abs() < 1e-12, "beta {beta} t {t}");
            }
        }
    }

    proptest! {
        #![proptest_config(cases(100))]

        #[test]
        fn row_norms_are_at_most_one(beta in 0.0f64..0.999, t in 1usize..500) {
            prop_assert!(linalg::norm(&momentum_row(beta, t)) <= 1.0 + 1e-12);
        }

        #[test]
        fn unrolled_form_matches_the_recurrence(beta in 0.0f64..0.99, t in 1usize..60, d in 1usize..10, seed in any::<u64>()) {
            let mut g = rng(seed);
            let theta1 = gauss(&mut g, d);
            let r = DenseMatrix::from_vec(d, t, gauss(&mut g, d * t)).unwrap();
            let eta = g.random_range(0.01..2.0);
            let m = MomentumMatrix::new(beta, t).unwrap();
            let closed = unrolled_momentum_update(&theta1, &r, &m, eta).unwrap();
            let mut theta = theta1.clone();
            let mut buf = vec![0.0; d];
            for s in 0..t {
                for i in 0..d {
                    buf[i] = beta * buf[i] + (1.0 - beta) * r.get(i, s);
                    theta[i] -= eta * buf[i];
                }
            }
            prop_assert!(max_abs_diff(&closed, &theta) <= 1e-9 * max_abs(&theta).max(1.0));
        }

        #[test]
        fn exact_solver_matches_oracle_on_triangular_systems(t in 1usize..=30, beta in 0.0f64..0.99, seed in any::<u64>()) {
            let wi = int_lower_triangular(&mut rng(seed), t, seed % 3 != 0);
            let w = to_lower(&wi);
            let m = MomentumMatrix::new(beta, t).unwrap();
            let sol = solve_ma_weights(&w, &m, t).unwrap();
            let oracle = min_norm_oracle(&wi, m.target(t));
            prop_assert_eq!(sol.rank, exact_rank(&wi).0);
            prop_assert!(max_abs_diff(sol.weights.active_slice(), &oracle) <= 1e-8 * max_abs(&oracle).max(1.0));
            prop_assert!((0.0..=1.0).contains(&sol.one_minus_alpha));
        }

        #[test]
        fn incremental_solver_tracks_the_exact_one(t in 1usize..=30, beta in 0.0f64..0.99, seed in any::<u64>()) {
            let wi = int_lower_triangular(&mut rng(seed), t, seed % 3 != 0);
            let w = to_lower(&wi);
            let m = MomentumMatrix::new(beta, t).unwrap();
            let mut online = OnlineMaSolver::new(t, beta);
            for k in 1..=t {
                let rep = online.push_row(w.row_prefix(k - 1)).unwrap();
                let exact = solve_ma_weights(&w, &m, k).unwrap();
                prop_assert_eq!(rep.rank, exact.rank, "step {}", k);
                prop_assert!((rep.residual - exact.residual).abs() <= 1e-9 * (1.0 + exact.residual));
                prop_assert!((0.0..=1.0).contains(&rep.one_minus_alpha));
            }
        }

        #[test]
        fn full_fit_is_never_worse_than_light(seed in any::<u64>(), kind in delay_kind(), beta in 0.0f64..0.99, p in 0.0f64..2.0) {
            let mut c = small_sim(seed, kind, p, 12);
            c.beta = beta;
            let (sw, _) = simulate_staleness(&c).unwrap();
            let w = sw.matrix();
            let m = MomentumMatrix::new(beta, c.horizon).unwrap();
            let mut light = LightweightState::new(c.horizon, 0);
            for t in 1..=c.horizon {
                let full = solve_ma_weights(w, &m, t).unwrap();
                let (u, v) = solve_lightweight(&light.weights, w, &m, t).unwrap();
                light.step(&[], u, v);
                let lr = step_residual(w, m.target(t), light.weights.active_slice());
                prop_assert!(full.residual <= lr + 1e-9, "t {}: {} > {}", t, full.residual, lr);
            }
        }

        #[test]
        fn enlarging_the_history_never_raises_the_residual(t in 1usize..=25, beta in 0.0f64..0.99, seed in any::<u64>()) {
            let mut g = rng(seed);
            let wi = int_lower_triangular(&mut g, t, true);
            let w = to_lower(&wi);
            let m = MomentumMatrix::new(beta, t).unwrap();
            let target = m.target(t).to_vec();
            let before = solve_ma_weights(&w, &m, t).unwrap().residual;
            // a new version nobody trained on adds a zero column; a further
            // arrival row adds one more candidate combination
            let mut rows = as_f64(&wi);
            rows.iter_mut().for_each(|r| r.push(0.0));
            let mut extra: Vec<f64> = (0..t).map(|_| g.random_range(-2..=2) as f64).collect();
            extra.push(0.0);
            let zero_col = DenseMatrix::from_rows(&rows).unwrap();
            rows.push(extra);
            let grown = DenseMatrix::from_rows(&rows).unwrap();
            let mut padded = target.clone();
            padded.push(0.0);
            for a in [&zero_col, &grown] {
                let x = linalg::least_squares_min_norm(a, &padded).unwrap();
                let rows_f: Vec<Vec<f64>> = (0..a.rows()).map(|i| a.row(i).to_vec()).collect();
                prop_assert!(common::residual(&rows_f, &x, &padded) <= before + 1e-9 * (1.0 + before));
            }
        }
    }
}

mod optimizers {
    use super::*;

    fn adam(method: Method, seed: u64) -> SimConfig {
        let mut c = SimConfig::example(method);
        c.optimizer = OptimizerKind::Fedadam;
        c.server_lr = 0.05;
        c.delay = DelayDistribution::zero();
        c.sampled = c.cohort;
        c.seed = seed;
        c.record_models = true;
        c
    }

    proptest! {
        #![proptest_config(cases(12))]

        // The second moment sees r_t under both rules, so the trajectories coincide.
        #[test]
        fn zero_delay_approximation_under_adam_is_sync_adam(seed in any::<u64>()) {
            let sync = run(&adam(Method::Sync, seed)).unwrap();
            for method in [Method::MaFull, Method::MaLight] {
                let r = run(&adam(method, seed)).unwrap();
                for (a, b) in r.models.unwrap().iter().zip(sync.models.as_ref().unwrap()) {
                    prop_assert!(max_abs_diff(a, b) <= 1e-10);
                }
            }
        }

        #[test]
        fn adam_second_moment_stays_non_negative(d in 1usize..10, steps in 1usize..40, seed in any::<u64>()) {
            let mut g = rng(seed);
            let mut opt = ServerOptState::new(OptimizerKind::Fedadam, d, 0.9, 0.99, 1e-3);
            let mut theta = gauss(&mut g, d);
            for _ in 0..steps {
                let r = gauss(&mut g, d);
                let m = gauss(&mut g, d);
                opt.server_step(&mut theta, Drive::Momentum { momentum: &m, raw: &r }, 0.1).unwrap();
                prop_assert!(opt.second.iter().all(|v| *v >= 0.0));
                prop_assert!(opt.preconditioner(d).iter().all(|h| *h >= 1e-3));
            }
        }
    }
}

mod privacy {
    use super::*;

    proptest! {
        #![proptest_config(cases(200))]

        #[test]
        fn payloads_respect_the_sensitivity(
            clip in 0.01f64..10.0, sigma in 0.01f64..5.0, ratio in 1.001f64..5.0,
            scale in 0.0f64..=1.0, d in 1usize..20, seed in any::<u64>()
        ) {
            let xi = fedma::privacy::xi_for_sensitivity_ratio(sigma, ratio).unwrap();
            let cfg = DpConfig::new(clip, sigma, xi).unwrap();
            let mut g = rng(seed);
            let delta: Vec<f64> = gauss(&mut g, d).iter().map(|x| x * 10f64.powf(g.random_range(-3.0..3.0))).collect();
            let p = PrivatePayload::new(&delta, 0, scale, &cfg).unwrap();
            prop_assert!(p.norm() <= cfg.sensitivity * (1.0 + 1e-12));
        }

        #[test]
        fn calibration_identity(sigma in 1e-3f64..10.0, gap in 1e-3f64..10.0, clip in 1e-3f64..100.0) {
            let xi = sigma + gap;
            let (gamma, s) = calibrate_gamma(sigma, xi, clip).unwrap();
            prop_assert!((sigma * s / gamma - xi).abs() <= 1e-10 * xi);
        }
    }

    /// The server's trajectory is a function of the noised aggregates and
    /// noised staleness rows alone.
    #[test]
    fn server_is_post_processing_of_released_values() {
        let mut c = SimConfig::example(Method::MaFull);
        c.dp = Some(DpSettings { clip: 0.5, noise_multiplier: 0.3, one_hot_noise: Some(0.6), project_rows: true });
        c.horizon = 40;
        let mut released: Vec<(Vec<f64>, Vec<f64>)> = Vec::new();
        let result = run_with_observer(&c, |v| released.push((v.aggregate.to_vec(), v.staleness_row.to_vec()))).unwrap();
        assert_eq!(released.len(), c.horizon);

        let task = QuadraticTask::new(&c.task, c.seed).unwrap();
        let mut theta = task.initial_model();
        let mut opt = ServerOptState::new(c.optimizer, theta.len(), c.beta, c.beta2, c.adam_eps);
        let mut solver = OnlineMaSolver::new(c.horizon, c.beta);
        let mut history: Vec<Vec<f64>> = Vec::new();
        for (r, row) in &released {
            let rep = solver.push_row(row).unwrap();
            history.push(r.clone());
            let mut m = vec![0.0; r.len()];
            for (a, h) in rep.weights.iter().zip(&history) {
                linalg::axpy(*a, h, &mut m);
            }
            opt.server_step(&mut theta, Drive::Momentum { momentum: &m, raw: r }, c.server_lr).unwrap();
        }
        assert!(max_abs_diff(&theta, &result.final_model) <= 1e-12);
        assert_eq!(&result.staleness, solver.staleness());
    }
}

mod tasks {
    use super::*;

    proptest! {
        #![proptest_config(cases(64))]

        #[test]
        fn optimum_is_stationary_and_minimal(d in 1usize..20, m in 1usize..60, het in 0.0f64..2.0, seed in any::<u64>()) {
            let task = QuadraticTask::new(&TaskSpec::quadratic(d, m, het), seed).unwrap();
            let opt = task.optimum().to_vec();
            prop_assert!(max_abs(&task.gradient(&opt)) <= 1e-12);
            let mut g = rng(seed);
            for _ in 0..10 {
                let theta = gauss(&mut g, d);
                prop_assert!(task.loss(&theta) >= task.loss(&opt) - 1e-12);
                prop_assert!(task.suboptimality(&theta) >= 0.0);
            }
        }

        #[test]
        fn runs_never_beat_the_optimum(seed in any::<u64>(), kind in delay_kind()) {
            let mut c = small_sim(seed, kind, 1.0, 10);
            c.method = Method::MaFull;
            let r = run(&c).unwrap();
            let task = QuadraticTask::new(&c.task, c.seed).unwrap();
            prop_assert!(r.summary.final_loss >= task.loss(task.optimum()) - 1e-12);
        }
    }
}

mod config {
    use super::*;

    fn method() -> impl Strategy<Value = Method> {
        proptest::sample::select(Method::ALL.to_vec())
    }

    proptest! {
        #![proptest_config(cases(100))]

        #[test]
        fn run_config_round_trips(
            method in method(), seed in any::<u64>(), beta in 0.0f64..0.99, p in 0.0f64..3.0,
            cohort in 1usize..=20, kind in delay_kind(), scale in 0.1f64..50.0, cutoff in 0usize..100,
            dump in any::<bool>(), dp in any::<bool>()
        ) {
            let mut sim = SimConfig::example(method);
            sim.seed = seed;
            sim.beta = beta;
            sim.p = p;
            sim.cohort = cohort;
            sim.delay = DelayDistribution { kind, scale, cutoff };
            sim.dp = dp.then_some(DpSettings { clip: scale, noise_multiplier: p + 0.1, one_hot_noise: Some(p + 1.0), project_rows: dump });
            let cfg = RunConfig { sim, dump_matrices: dump, out_dir: None };
            let once = RunConfig::parse(&cfg.to_json(), "generated").unwrap();
            prop_assert_eq!(&once, &cfg);
            prop_assert_eq!(RunConfig::parse(&once.to_json(), "generated").unwrap(), once);
        }

        #[test]
        fn every_metrics_line_is_a_standalone_record(seed in any::<u64>(), method in method()) {
            let mut c = SimConfig::example(method);
            c.seed = seed;
            c.horizon = 15;
            c.retain_history = true;
            let text = run(&c).unwrap().metrics_jsonl();
            let lines: Vec<&str> = text.lines().collect();
            prop_assert_eq!(lines.len(), 15);
            for line in lines {
                let v: serde_json::Value = serde_json::from_str(line).unwrap();
                prop_assert!(v.is_object());
            }
        }
    }
}

#[test]
fn light_weight_buffer_equals_history_combination() {
    let mut c = SimConfig::example(Method::MaLight);
    c.retain_history = true;
    c.horizon = 80;
    let r = run(&c).unwrap();
    for m in &r.metrics {
        assert!(m.light_consistency.unwrap() <= 1e-8, "iteration {}", m.iteration);
    }
}

//! Simulator checks against closed forms, with Monte Carlo oracles at 3 SE.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use reset_ridge::dynamics::{
    empirical_moments, equilibrium_snapshot, simulate_trajectory, snapshot_batch, NoiseModel,
};
use reset_ridge::moments::poisson_stationary_mean;
use reset_ridge::spectral::ridge_closed_form;
use reset_ridge::{Execution, ResetLaw, SpectralModel};

fn model() -> SpectralModel {
    let h = DMatrix::from_row_slice(3, 3, &[2.0, 0.4, 0.1, 0.4, 1.0, 0.2, 0.1, 0.2, 0.5]);
    SpectralModel::from_normal_equations(h, DVector::from_vec(vec![1.0, -0.5, 0.8]), None).unwrap()
}

#[test]
fn equilibrium_age_transform_matches_sampler() {
    let laws = [
        ResetLaw::exponential(1.3).unwrap(),
        ResetLaw::gamma(3.0, 0.8).unwrap(),
        ResetLaw::gamma(0.5, 2.0).unwrap(),
        ResetLaw::deterministic(1.5).unwrap(),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for law in laws {
        let ages: Vec<f64> = (0..100_000).map(|_| law.sample_equilibrium_age(&mut rng)).collect();
        for mu in [0.5, 1.0, 5.0] {
            let v: Vec<f64> = ages.iter().map(|a| (-mu * a).exp()).collect();
            let n = v.len() as f64;
            let mean = v.iter().sum::<f64>() / n;
            let sd = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
            let exact = law.age_residual_h(mu).unwrap();
            assert!((mean - exact).abs() < 3.0 * sd / n.sqrt(), "{} mu={mu}: {mean} vs {exact}", law.label());
        }
    }
}

#[test]
fn noiseless_snapshot_means() {
    let m = model();
    let quiet = NoiseModel::zero(3);
    let periodic = ResetLaw::deterministic(1.2).unwrap();
    let batch = snapshot_batch(&m, &periodic, &quiet, 100_000, 1, Execution::Parallel).unwrap();
    let mom = empirical_moments(&batch.samples).unwrap();
    for i in 0..3 {
        let exact = periodic.filter_g(m.mu()[i]).unwrap() * m.w_star_tilde()[i];
        assert!((mom.mean[i] - exact).abs() < 3.0 * mom.se_mean[i]);
    }
    let poisson = ResetLaw::exponential(0.6).unwrap();
    let batch = snapshot_batch(&m, &poisson, &quiet, 100_000, 2, Execution::Parallel).unwrap();
    let mom = empirical_moments(&batch.samples).unwrap();
    let ridge = m.to_eigen(&ridge_closed_form(&m, 0.6).unwrap());
    for i in 0..3 {
        assert!((mom.mean[i] - ridge[i]).abs() < 3.0 * mom.se_mean[i]);
    }
}

#[test]
fn poisson_snapshot_variance_splits_into_sgd_and_reset() {
    let m = model();
    let (sigma2, r) = (0.4, 0.9);
    let noise = NoiseModel::isotropic(sigma2, 3).unwrap();
    let law = ResetLaw::exponential(r).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 100_000;
    let mut xs = DMatrix::zeros(n, 3);
    for k in 0..n {
        xs.set_row(k, &equilibrium_snapshot(&m, &law, &noise, &mut rng).unwrap().transpose());
    }
    let mom = empirical_moments(&xs).unwrap();
    for i in 0..3 {
        let (mu, b) = (m.mu()[i], m.b_tilde()[i]);
        let exact = sigma2 / (2.0 * mu + r) + r * b * b / ((mu + r).powi(2) * (2.0 * mu + r));
        assert!((mom.cov[(i, i)] - exact).abs() < 3.0 * mom.se_cov[(i, i)]);
    }
}

#[test]
fn poisson_reset_count_has_rate_mean() {
    let m = model();
    let (r, horizon) = (2.0, 50.0);
    let law = ResetLaw::exponential(r).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let counts: Vec<f64> = (0..400)
        .map(|_| simulate_trajectory(&m, &law, &NoiseModel::zero(3), horizon, horizon, &mut rng).unwrap().reset_times.len() as f64)
        .collect();
    let n = counts.len() as f64;
    let mean = counts.iter().sum::<f64>() / n;
    let sd = (counts.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    assert!((mean - r * horizon).abs() < 3.0 * sd / n.sqrt());
}

#[test]
fn time_average_tracks_ridge() {
    let m = model();
    let r = 1.0;
    let law = ResetLaw::exponential(r).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let path = simulate_trajectory(&m, &law, &NoiseModel::zero(3), 20_000.0, 0.05, &mut rng).unwrap();
    let burn = 200;
    let states = &path.states[burn..];
    let batches = 40;
    let size = states.len() / batches;
    let ridge = ridge_closed_form(&m, r).unwrap();
    for i in 0..3 {
        let means: Vec<f64> = (0..batches)
            .map(|b| states[b * size..(b + 1) * size].iter().map(|w| w[i]).sum::<f64>() / size as f64)
            .collect();
        let grand = means.iter().sum::<f64>() / batches as f64;
        let sd = (means.iter().map(|x| (x - grand).powi(2)).sum::<f64>() / (batches as f64 - 1.0)).sqrt();
        assert!((grand - ridge[i]).abs() < 3.0 * sd / (batches as f64).sqrt(), "coord {i}: {grand} vs {}", ridge[i]);
    }
}

#[test]
fn seeds_fix_trajectories_and_batches() {
    let m = model();
    let law = ResetLaw::gamma(2.0, 0.7).unwrap();
    let noise = NoiseModel::isotropic(0.3, 3).unwrap();
    let path = |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        simulate_trajectory(&m, &law, &noise, 5.0, 0.1, &mut rng).unwrap()
    };
    assert_eq!(path(9).states, path(9).states);
    assert_eq!(path(9).reset_times, path(9).reset_times);
    assert_ne!(path(9).states, path(10).states);
    let a = snapshot_batch(&m, &law, &noise, 5000, 3, Execution::Parallel).unwrap();
    let b = reset_ridge::parallel::with_thread_cap(Some(1), || {
        snapshot_batch(&m, &law, &noise, 5000, 3, Execution::Parallel).unwrap()
    });
    assert_eq!(a.samples, b.samples);
}

#[test]
fn nonzero_reset_target_by_recentring() {
    let m = model();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let w0 = DVector::from_fn(3, |_, _| rng.random_range(-1.0..1.0));
    let r = 0.8;
    let shifted = m.recentred(&w0).unwrap();
    let mean = poisson_stationary_mean(&shifted, r).unwrap() + &w0;
    // (H + rI) m = b + r w0
    let direct = (m.h() + DMatrix::identity(3, 3) * r).lu().solve(&(m.b() + &w0 * r)).unwrap();
    assert!((mean - direct).amax() < 1e-12);
}

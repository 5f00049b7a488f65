//! Sampler exactness and convergence order, path and loss identities.

use proptest::prelude::*;
use subspace_flow::flow::{self, SamplerConfig};
use subspace_flow::rng;
use subspace_flow::{Tape, Tensor};

fn decay_error(nfe: usize) -> f64 {
    let x0 = Tensor::from_vec(vec![1.0, -0.5, 2.0]);
    let x = flow::euler_sample(|x, _| Ok(x.scale(-1.0)), &x0, SamplerConfig { nfe }).unwrap();
    let exact = x0.scale((-1.0f64).exp());
    x.sub(&exact).unwrap().max_abs()
}

/// Least-squares slope of `log err` against `log h`.
fn convergence_order(nfes: &[usize]) -> f64 {
    let pts: Vec<(f64, f64)> = nfes
        .iter()
        .map(|&n| ((1.0 / n as f64).ln(), decay_error(n).ln()))
        .collect();
    let k = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / k;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / k;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}

#[test]
fn euler_is_first_order_on_linear_decay() {
    let p = convergence_order(&[10, 20, 40, 80]);
    assert!((0.9..=1.1).contains(&p), "order {p}");
}

#[test]
fn euler_error_matches_closed_form() {
    // explicit Euler on x' = -x gives (1 - h)^n x0
    let x0 = Tensor::from_vec(vec![0.7]);
    for nfe in [1, 3, 10, 33] {
        let x = flow::euler_sample(|x, _| Ok(x.scale(-1.0)), &x0, SamplerConfig { nfe }).unwrap();
        let want = 0.7 * (1.0 - 1.0 / nfe as f64).powi(nfe as i32);
        assert!((x.data()[0] - want).abs() < 1e-14, "nfe {nfe}");
    }
}

#[test]
fn constant_oracle_field_lands_on_target() {
    let mut r = rng::stream(1, "euler");
    let x0 = Tensor::randn(&[6, 4], 1.0, &mut r);
    let x1 = Tensor::randn(&[6, 4], 1.0, &mut r);
    let vel = x1.sub(&x0).unwrap();
    for nfe in [1, 10, 64] {
        let x = flow::euler_sample(|_, _| Ok(vel.clone()), &x0, SamplerConfig { nfe }).unwrap();
        assert!(x.sub(&x1).unwrap().max_abs() < 1e-12, "nfe {nfe}");
    }
}

#[test]
fn sampler_visits_uniform_grid_times() {
    let mut seen = Vec::new();
    let x0 = Tensor::zeros(&[1]);
    flow::euler_sample(
        |x, t| {
            seen.push(t);
            Ok(x.clone())
        },
        &x0,
        SamplerConfig { nfe: 4 },
    )
    .unwrap();
    assert_eq!(seen, [0.0, 0.25, 0.5, 0.75]);
}

/// Relative gap between the weighted data-prediction loss and the
/// velocity-space loss on one random draw.
fn reparam_gap(seed: u64) -> f64 {
    let mut r = rng::stream(seed, "reparam");
    let shape = [5, 3];
    let x0 = Tensor::randn(&shape, 1.0, &mut r);
    let x1 = Tensor::randn(&shape, 1.0, &mut r);
    let v = Tensor::randn(&shape, 1.0, &mut r);
    let t = rand::Rng::random_range(&mut r, 0.0..=0.99);
    let state = flow::sample_path(&x0, &x1, t).unwrap();
    let weighted = flow::fm_loss_weighted(&v, &state).unwrap();
    let mut tape = Tape::default();
    let vv = tape.constant(v).unwrap();
    let l = flow::fm_loss(&mut tape, vv, &state).unwrap();
    let stable = tape.value(l).item();
    (weighted - stable).abs() / stable.abs().max(f64::MIN_POSITIVE)
}

proptest! {
    #[test]
    fn path_endpoints_and_velocity(seed in 0u64..10_000) {
        let mut r = rng::stream(seed, "path");
        let x0 = Tensor::randn(&[4, 2], 1.0, &mut r);
        let x1 = Tensor::randn(&[4, 2], 1.0, &mut r);
        let s0 = flow::sample_path(&x0, &x1, 0.0).unwrap();
        let s1 = flow::sample_path(&x0, &x1, 1.0).unwrap();
        prop_assert_eq!(&s0.x_t, &x0);
        prop_assert_eq!(&s1.x_t, &x1);
        // the oracle velocity recovers x1 through the data prediction
        let t = 0.37;
        let s = flow::sample_path(&x0, &x1, t).unwrap();
        let d = flow::d_from_v(&s.x_t, &s.target_velocity(), t).unwrap();
        prop_assert!(d.sub(&x1).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn weighted_and_velocity_losses_agree(seed in 0u64..10_000) {
        prop_assert!(reparam_gap(seed) < 1e-8);
    }
}

//! Central-difference check of the hand-written backward pass.

#![allow(clippy::needless_range_loop)]

use podsr::denoiser::{mse_loss, MlpConfig, MlpParams};
use podsr::rng::RngStream;

/// Largest relative discrepancy between analytic and central-difference
/// gradients over every parameter. Entries where both are below `floor`
/// are compared against `floor` instead.
pub fn max_relative_gradient_error(cfg: MlpConfig, seed: u64, h: f64, floor: f64) -> f64 {
    let mut s = RngStream::new(seed, "gradcheck");
    let mut p = MlpParams::init(cfg, &mut s).unwrap();
    // Randomize everything, including the zero-initialized output layer.
    for v in p.as_mut_slice() {
        *v = 0.5 * s.next_gaussian();
    }
    let n = 3;
    let a = s.randn(n * cfg.k);
    let c = s.randn(n * cfg.k);
    let target = s.randn(n * cfg.k);
    let t = [1, cfg.t_total / 2, cfg.t_total];

    let loss = |q: &MlpParams| mse_loss(&q.forward(&a, &c, &t).unwrap(), &target).0;
    let (out, cache) = p.forward_cached(&a, &c, &t).unwrap();
    let (_, d_out) = mse_loss(&out, &target);
    let grads = p.backward(&cache, &d_out).unwrap();

    let mut worst: f64 = 0.0;
    for i in 0..p.len() {
        let orig = p.as_slice()[i];
        p.as_mut_slice()[i] = orig + h;
        let up = loss(&p);
        p.as_mut_slice()[i] = orig - h;
        let down = loss(&p);
        p.as_mut_slice()[i] = orig;
        let fd = (up - down) / (2.0 * h);
        let denom = grads[i].abs().max(fd.abs()).max(floor);
        worst = worst.max((grads[i] - fd).abs() / denom);
    }
    worst
}

#[test]
fn tiny_network_matches_central_differences() {
    let cfg = MlpConfig {
        k: 3,
        hidden: 8,
        blocks: 2,
        embed: 6,
        t_total: 100,
    };
    let err = max_relative_gradient_error(cfg, 7, 1e-5, 1e-6);
    println!("max relative gradient error: {err:.3e}");
    assert!(err <= 1e-4, "relative gradient error {err:.3e}");
}

#[test]
fn single_block_network_matches_central_differences() {
    let cfg = MlpConfig {
        k: 2,
        hidden: 5,
        blocks: 1,
        embed: 4,
        t_total: 10,
    };
    assert!(max_relative_gradient_error(cfg, 8, 1e-5, 1e-6) <= 1e-4);
}

#[test]
fn blockless_network_matches_central_differences() {
    let cfg = MlpConfig {
        k: 3,
        hidden: 4,
        blocks: 0,
        embed: 2,
        t_total: 10,
    };
    assert!(max_relative_gradient_error(cfg, 9, 1e-5, 1e-6) <= 1e-4);
}

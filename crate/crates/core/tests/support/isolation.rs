//! Decomposition and branch-isolation checks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tnt::encoding::{HashGridConfig, FEATURES_PER_LEVEL};
use tnt::field::{compose_sigma, FieldConfig, FieldKind, NeuralField, EPS_MAX};
use tnt::geometry::{make_circular_trajectory, ScannerGeometry, VolumeExtent};
use tnt::grad::{loss_forward_backward, GradEngine, LossOptions, RayBatch};

/// Number of violations of non-negativity and of strict monotonicity in
/// beta (for `v_b > 0`) over `n` random component tuples.
pub fn composition_violations(n: usize, seed: u64) -> (usize, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut negative, mut non_monotone) = (0, 0);
    for _ in 0..n {
        let a: f64 = rng.gen();
        let b: f64 = rng.gen();
        let vb: f64 = rng.gen_range(1e-6..1.0);
        let vs: f64 = rng.gen();
        let eps: f64 = rng.gen_range(1e-9..EPS_MAX);
        let b2 = b + rng.gen_range(1e-6..1.0) * (1.0 - b);
        let s = compose_sigma(a, b, vb, vs, eps);
        if !(s >= 0.0) {
            negative += 1;
        }
        if b2 > b && !(compose_sigma(a, b2, vb, vs, eps) > s) {
            non_monotone += 1;
        }
    }
    (negative, non_monotone)
}

fn quad_with_batch(seed: u64) -> (NeuralField, RayBatch) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grid = HashGridConfig::with_max_resolution(6, 14, 4, 32).unwrap();
    let cfg = FieldConfig::new(FieldKind::Quad, grid, VolumeExtent::cube(1.0, 32).unwrap());
    let mut field = NeuralField::new(&cfg, &mut rng).unwrap();
    let tables = field.params().segment("tables").unwrap();
    for p in &mut field.params_mut().values[tables] {
        *p = rng.gen_range(-0.3..0.3);
    }
    let geom = ScannerGeometry::desk(make_circular_trajectory(6, 180.0).unwrap()).unwrap();
    let mut batch = RayBatch::new(16);
    while batch.len() < 32 {
        let ray = geom
            .ray_for_pixel(rng.gen_range(0..6), rng.gen_range(0..64), rng.gen_range(0..64))
            .unwrap();
        let t = [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)];
        batch.push_ray(&field, &ray, t, None::<&mut ChaCha8Rng>);
    }
    (field, batch)
}

/// Largest gradient magnitude on beta-branch parameters (its MLP and the
/// beta feature stream of the tables) when `v_b` is forced to exactly zero
/// and the tissue term is switched off.
pub fn dead_beta_branch_gradient(seed: u64) -> f64 {
    let (mut field, batch) = quad_with_batch(seed);
    let vb = field.params_mut().get_mut("vb_map").unwrap();
    let last = vb.len() - 1;
    vb.fill(0.0);
    vb[last] = -1000.0;
    let mut eng = GradEngine::new();
    loss_forward_backward(&field, &batch, 0.0, &LossOptions::default(), &mut eng).unwrap();
    let p = field.params();
    let beta_mlp = p.segment("beta_mlp").unwrap();
    let tables = p.segment("tables").unwrap();
    let mut worst: f64 = 0.0;
    for i in beta_mlp {
        worst = worst.max(eng.grads[i].abs());
    }
    for i in tables.step_by(FEATURES_PER_LEVEL) {
        worst = worst.max(eng.grads[i + 1].abs());
    }
    worst
}

/// Largest gradient difference between lambda = 0 and a pure L1 loss with
/// tissue targets replaced: with lambda = 0 the supervision must not matter.
pub fn nosup_gradient_gap(seed: u64) -> f64 {
    let (field, batch) = quad_with_batch(seed);
    let mut other = batch.clone();
    for v in other.alpha_sup.iter_mut().chain(other.beta_sup.iter_mut()) {
        *v = 123.0;
    }
    let opts = LossOptions {
        deterministic: true,
        ..Default::default()
    };
    let mut e1 = GradEngine::new();
    let mut e2 = GradEngine::new();
    let l1 = loss_forward_backward(&field, &batch, 0.0, &opts, &mut e1).unwrap();
    let l2 = loss_forward_backward(&field, &other, 0.0, &opts, &mut e2).unwrap();
    assert_eq!(l1.total, l2.total);
    e1.grads
        .iter()
        .zip(&e2.grads)
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()))
}

/// Sanity check that the dead-branch setup is not vacuous: with `v_b`
/// alive the beta branch does receive gradient.
pub fn live_beta_branch_gradient(seed: u64) -> f64 {
    let (field, batch) = quad_with_batch(seed);
    let mut eng = GradEngine::new();
    loss_forward_backward(&field, &batch, 0.0, &LossOptions::default(), &mut eng).unwrap();
    let r = field.params().segment("beta_mlp").unwrap();
    eng.grads[r].iter().fold(0.0f64, |m, g| m.max(g.abs()))
}

mod support;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tnt::geometry::{make_circular_trajectory, ScannerGeometry, VolumeExtent};
use tnt::projector::project_volume;
use tnt::volume::Volume;

use support::siddon::exact_line_integral;

fn random_volume(n: usize, seed: u64) -> Volume {
    let e = VolumeExtent::cube(1.0, n).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Volume::from_fn(e, |_, _, _| rng.gen::<f32>())
}

fn max_rel_error(vol: &Volume, g: &ScannerGeometry, n_samples: usize) -> f64 {
    let stack = project_volume(vol, g, n_samples).unwrap();
    let mut worst: f64 = 0.0;
    for v in 0..g.n_views() {
        for r in 0..g.det_rows {
            for c in 0..g.det_cols {
                let exact = exact_line_integral(vol, &g.ray_for_pixel(v, r, c).unwrap());
                let got = stack.get(v, r, c) as f64;
                if exact > 1e-9 {
                    worst = worst.max((got - exact).abs() / exact);
                } else {
                    assert!(got.abs() < 1e-6);
                }
            }
        }
    }
    worst
}

#[test]
fn midpoint_projection_matches_exact_traversal() {
    let vol = random_volume(16, 42);
    let g = ScannerGeometry::desk(make_circular_trajectory(8, 180.0).unwrap()).unwrap();
    let err = max_rel_error(&vol, &g, 64);
    eprintln!("max relative error at 64 samples: {err:.3e}");
    assert!(err < 0.01, "max relative error {err}");
}

#[test]
fn quadrature_error_decreases_with_samples() {
    let vol = random_volume(16, 7);
    let g = ScannerGeometry::new(2.0, 4.0, 24, 24, 3.2 / 24.0, make_circular_trajectory(3, 180.0).unwrap()).unwrap();
    let errs: Vec<f64> = [8, 16, 32, 64].iter().map(|&n| max_rel_error(&vol, &g, n)).collect();
    for w in errs.windows(2) {
        assert!(w[1] < w[0], "errors not decreasing: {errs:?}");
    }
}

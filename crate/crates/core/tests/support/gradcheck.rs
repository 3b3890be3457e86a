//! Central finite-difference check of the composite loss gradient.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tnt::encoding::HashGridConfig;
use tnt::field::{FieldConfig, FieldKind, NeuralField, ThresholdSurrogate};
use tnt::geometry::{make_circular_trajectory, ScannerGeometry, VolumeExtent};
use tnt::grad::{loss_forward_backward, loss_only, GradEngine, LossOptions, RayBatch};

pub struct GradCheckReport {
    pub checked: usize,
    pub worst_rel: f64,
    pub failures: Vec<String>,
    pub segments_covered: Vec<String>,
}

/// Compares analytic and finite-difference gradients on `n_params`
/// parameters drawn evenly from every segment. Table entries are drawn from
/// those the batch actually touches.
pub fn check_gradients(kind: FieldKind, n_params: usize, seed: u64) -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grid = HashGridConfig::with_max_resolution(6, 12, 4, 32).unwrap();
    let cfg = FieldConfig::new(kind, grid, VolumeExtent::cube(1.0, 32).unwrap());
    let mut field = NeuralField::new(&cfg, &mut rng).unwrap();
    // move tables away from their tiny initial scale so every path matters
    let tables = field.params().segment("tables").unwrap();
    for p in &mut field.params_mut().values[tables] {
        *p = rng.gen_range(-0.1..0.1);
    }
    // Push every hidden ReLU unit well away from its kink (half clearly on,
    // half clearly off) so a finite-difference stencil cannot straddle one.
    let l = 6;
    let nets: Vec<(String, Vec<usize>)> = match kind {
        FieldKind::Quad => vec![
            ("alpha_mlp".into(), vec![l, 32, 32, 1]),
            ("beta_mlp".into(), vec![l, 32, 32, 1]),
        ],
        FieldKind::Single => {
            let w = tnt::field::matched_single_width(l);
            vec![("mlp".into(), vec![4 * l, w, w, 1])]
        }
    };
    for (name, sizes) in nets {
        let seg = field.params_mut().get_mut(&name).unwrap();
        let mut off = 0;
        for (li, w) in sizes.windows(2).enumerate() {
            let (fi, fo) = (w[0], w[1]);
            if li + 2 < sizes.len() {
                for (o, b) in seg[off + fi * fo..off + fi * fo + fo].iter_mut().enumerate() {
                    let mag = if li == 0 { 1.0 } else { 3.0 };
                    *b = if o % 2 == 0 { mag } else { -mag };
                }
            }
            off += fi * fo + fo;
        }
    }
    let geom = ScannerGeometry::desk(make_circular_trajectory(4, 180.0).unwrap()).unwrap();
    let mut batch = RayBatch::new(4);
    while batch.len() < 3 {
        let v = rng.gen_range(0..geom.n_views());
        let r = rng.gen_range(16..48);
        let c = rng.gen_range(16..48);
        let ray = geom.ray_for_pixel(v, r, c).unwrap();
        let targets = [rng.gen_range(0.5..1.0), rng.gen_range(0.0..1.0), rng.gen_range(0.0..0.5)];
        batch.push_ray(&field, &ray, targets, None::<&mut ChaCha8Rng>);
    }
    let opts = LossOptions {
        surrogate: match kind {
            FieldKind::Single => Some(ThresholdSurrogate {
                t_alpha: 0.3,
                t_beta: 0.6,
                temperature: 0.5,
            }),
            FieldKind::Quad => None,
        },
        deterministic: true,
    };
    let lambda = 1.7;
    let mut eng = GradEngine::new();
    loss_forward_backward(&field, &batch, lambda, &opts, &mut eng).unwrap();
    let analytic = eng.grads.clone();

    let segments: Vec<_> = field.params().segments().to_vec();
    let per_seg = n_params.div_ceil(segments.len());
    let mut chosen = Vec::new();
    for (si, seg) in segments.iter().enumerate() {
        let want = if si + 1 == segments.len() {
            n_params - chosen.len()
        } else {
            per_seg
        };
        let candidates: Vec<usize> = if seg.name == "tables" {
            seg.range().filter(|&i| analytic[i] != 0.0).collect()
        } else {
            seg.range().collect()
        };
        let take = want.min(candidates.len());
        for _ in 0..take {
            chosen.push(candidates[rng.gen_range(0..candidates.len())]);
        }
    }
    while chosen.len() < n_params {
        let seg = &segments[rng.gen_range(0..segments.len())];
        if seg.name != "tables" {
            chosen.push(rng.gen_range(seg.range()));
        }
    }

    let h = 1e-3;
    let mut worst: f64 = 0.0;
    let mut failures = Vec::new();
    let mut covered: Vec<String> = Vec::new();
    for &i in &chosen {
        let orig = field.params().values[i];
        field.params_mut().values[i] = orig + h;
        let fp = loss_only(&field, &batch, lambda, &opts, &mut eng).unwrap().total;
        field.params_mut().values[i] = orig - h;
        let fm = loss_only(&field, &batch, lambda, &opts, &mut eng).unwrap().total;
        field.params_mut().values[i] = orig;
        let fd = (fp - fm) / (2.0 * h);
        let a = analytic[i];
        let seg = field.params().segment_of(i).unwrap().to_string();
        let ok = if a.abs() < 1e-6 {
            (fd - a).abs() < 1e-6
        } else {
            let rel = (fd - a).abs() / a.abs();
            worst = worst.max(rel);
            rel < 1e-3
        };
        if !ok {
            failures.push(format!("param {i} ({seg}): analytic {a:e}, finite difference {fd:e}"));
        }
        if !covered.contains(&seg) {
            covered.push(seg);
        }
    }
    GradCheckReport {
        checked: chosen.len(),
        worst_rel: worst,
        failures,
        segments_covered: covered,
    }
}

//! Classical reconstructions (SART, FDK) and the single-output neural baseline.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::field::NeuralField;
use crate::geometry::{intersect_aabb, ScannerGeometry, VolumeExtent};
use crate::projector::{trilinear_weights, ProjectionKind, ProjectionStack};
use crate::training::{train, Scene, TrainConfig, TrainLog, TrainMode};
use crate::volume::Volume;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViewOrder {
    Sequential,
    /// A fresh seeded permutation of the views for every sweep.
    Shuffled { seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SartConfig {
    pub n_iterations: usize,
    pub relaxation: f64,
    pub nonneg_clamp: bool,
    pub view_order: ViewOrder,
    /// Quadrature points per ray for the system matrix rows.
    pub n_samples: usize,
}

impl Default for SartConfig {
    fn default() -> Self {
        Self {
            n_iterations: 50,
            relaxation: 0.3,
            nonneg_clamp: true,
            view_order: ViewOrder::Sequential,
            n_samples: 128,
        }
    }
}

impl SartConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.relaxation > 0.0 && self.relaxation < 2.0) {
            return invalid(format!("SART relaxation must lie in (0, 2), got {}", self.relaxation));
        }
        if self.n_samples == 0 {
            return invalid("SART needs at least one sample per ray");
        }
        Ok(())
    }
}

fn check_stack(stack: &ProjectionStack) -> Result<()> {
    if stack.kind != ProjectionKind::Sigma {
        return invalid("classical reconstruction expects sigma projections");
    }
    if stack.n_views() == 0 {
        return invalid("reconstruction needs at least one view");
    }
    Ok(())
}

/// Samples of one ray as (voxel indices, weights * dt), skipping misses.
fn ray_rows(geom: &ScannerGeometry, extent: &VolumeExtent, view: usize, pixel: usize, n: usize, out: &mut Vec<([usize; 8], [f64; 8])>) {
    out.clear();
    let ray = geom.ray_unchecked(view, pixel / geom.det_cols, pixel % geom.det_cols);
    let Some((t0, t1)) = intersect_aabb(&ray, extent) else {
        return;
    };
    let dt = (t1 - t0) / n as f64;
    for s in 0..n {
        let t = t0 + (s as f64 + 0.5) * dt;
        if let Some((idx, mut w)) = trilinear_weights(extent, ray.at(t)) {
            w.iter_mut().for_each(|w| *w *= dt);
            out.push((idx, w));
        }
    }
}

fn view_sequence(cfg: &SartConfig, n_views: usize, sweep: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n_views).collect();
    if let ViewOrder::Shuffled { seed } = cfg.view_order {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(sweep as u64);
        order.shuffle(&mut rng);
    }
    order
}

/// Result of a SART run with the data residual recorded after each sweep.
#[derive(Debug, Clone)]
pub struct SartOutput {
    pub volume: Volume,
    /// `||p - A x||_2` after every sweep.
    pub residual_norms: Vec<f64>,
}

/// SART reconstruction from log-domain projections.
pub fn sart(stack: &ProjectionStack, extent: &VolumeExtent, cfg: &SartConfig) -> Result<Volume> {
    Ok(run_sart(stack, extent, cfg, false)?.volume)
}

/// As [`sart`], also measuring the full residual after every sweep.
pub fn sart_with_residuals(stack: &ProjectionStack, extent: &VolumeExtent, cfg: &SartConfig) -> Result<SartOutput> {
    run_sart(stack, extent, cfg, true)
}

fn run_sart(stack: &ProjectionStack, extent: &VolumeExtent, cfg: &SartConfig, track: bool) -> Result<SartOutput> {
    check_stack(stack)?;
    cfg.validate()?;
    extent.validate()?;
    let geom = &stack.geom;
    let npix = geom.pixels_per_view();
    let mut x = vec![0.0f64; extent.len()];
    let mut num = vec![0.0f64; extent.len()];
    let mut den = vec![0.0f64; extent.len()];
    let mut residual_norms = Vec::new();

    for sweep in 0..cfg.n_iterations {
        for v in view_sequence(cfg, geom.n_views(), sweep) {
            let meas = stack.view(v);
            // Normalised residuals (p_i - a_i x) / sum_j a_ij, in parallel over rays.
            let resid: Vec<f64> = (0..npix)
                .into_par_iter()
                .map_init(Vec::new, |rows, p| {
                    ray_rows(geom, extent, v, p, cfg.n_samples, rows);
                    let mut ax = 0.0;
                    let mut len = 0.0;
                    for (idx, w) in rows.iter() {
                        for c in 0..8 {
                            ax += x[idx[c]] * w[c];
                            len += w[c];
                        }
                    }
                    if len > 0.0 {
                        (meas[p] as f64 - ax) / len
                    } else {
                        0.0
                    }
                })
                .collect();
            num.fill(0.0);
            den.fill(0.0);
            let mut rows = Vec::new();
            for (p, &r) in resid.iter().enumerate() {
                ray_rows(geom, extent, v, p, cfg.n_samples, &mut rows);
                for (idx, w) in &rows {
                    for c in 0..8 {
                        num[idx[c]] += w[c] * r;
                        den[idx[c]] += w[c];
                    }
                }
            }
            for ((xj, &nj), &dj) in x.iter_mut().zip(&num).zip(&den) {
                if dj > 0.0 {
                    *xj += cfg.relaxation * nj / dj;
                    if cfg.nonneg_clamp && *xj < 0.0 {
                        *xj = 0.0;
                    }
                }
            }
        }
        if track {
            residual_norms.push(residual_norm(stack, extent, &x, cfg.n_samples));
        }
    }
    let volume = Volume::from_data(extent.clone(), x.iter().map(|&v| v as f32).collect())?;
    Ok(SartOutput { volume, residual_norms })
}

fn residual_norm(stack: &ProjectionStack, extent: &VolumeExtent, x: &[f64], n_samples: usize) -> f64 {
    let geom = &stack.geom;
    let npix = geom.pixels_per_view();
    let sq: f64 = (0..geom.n_views() * npix)
        .into_par_iter()
        .map_init(Vec::new, |rows, i| {
            let (v, p) = (i / npix, i % npix);
            ray_rows(geom, extent, v, p, n_samples, rows);
            let ax: f64 = rows.iter().map(|(idx, w)| (0..8).map(|c| x[idx[c]] * w[c]).sum::<f64>()).sum();
            let r = stack.data[i] as f64 - ax;
            r * r
        })
        .collect::<Vec<_>>()
        .iter()
        .sum();
    sq.sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FdkFilter {
    Ramp,
    RampHann,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FdkConfig {
    pub filter: FdkFilter,
}

impl Default for FdkConfig {
    fn default() -> Self {
        Self {
            filter: FdkFilter::RampHann,
        }
    }
}

/// Frequency response of the band-limited ramp, sampled at spacing `du` on a
/// length-`len` circular grid. Built from the spatial Ram-Lak kernel so the DC
/// term is correct.
fn ramp_response(len: usize, du: f64, filter: FdkFilter) -> Vec<f64> {
    let mut h = vec![Complex::new(0.0, 0.0); len];
    h[0].re = 1.0 / (4.0 * du * du);
    for n in (1..len / 2).step_by(2) {
        let v = -1.0 / ((n * n) as f64 * PI * PI * du * du);
        h[n].re = v;
        h[len - n].re = v;
    }
    FftPlanner::new().plan_fft_forward(len).process(&mut h);
    h.iter()
        .enumerate()
        .map(|(k, c)| {
            let f = k.min(len - k) as f64 / len as f64;
            let w = match filter {
                FdkFilter::Ramp => 1.0,
                FdkFilter::RampHann => 0.5 * (1.0 + (2.0 * PI * f).cos()),
            };
            c.re * w * du
        })
        .collect()
}

/// Cosine-weighted, ramp-filtered detector rows in isocentre units.
fn filter_projections(stack: &ProjectionStack, cfg: &FdkConfig) -> Vec<f64> {
    let g = &stack.geom;
    let (rows, cols) = (g.det_rows, g.det_cols);
    let mag = g.sad / g.sdd;
    let du = g.det_pixel_pitch * mag;
    let len = (2 * cols).next_power_of_two();
    let resp = ramp_response(len, du, cfg.filter);
    let mut planner = FftPlanner::new();
    let fwd = planner.plan_fft_forward(len);
    let inv = planner.plan_fft_inverse(len);
    let mut out = vec![0.0f64; stack.data.len()];
    out.par_chunks_mut(cols).enumerate().for_each(|(line, dst)| {
        let row = line % rows;
        let src = &stack.data[line * cols..(line + 1) * cols];
        let mut buf = vec![Complex::new(0.0, 0.0); len];
        for (c, b) in buf.iter_mut().take(cols).enumerate() {
            let (u, v) = g.pixel_offset(row, c);
            let (u, v) = (u * mag, v * mag);
            let w = g.sad / (g.sad * g.sad + u * u + v * v).sqrt();
            b.re = src[c] as f64 * w;
        }
        fwd.process(&mut buf);
        buf.iter_mut().zip(&resp).for_each(|(b, &r)| *b *= r);
        inv.process(&mut buf);
        for (d, b) in dst.iter_mut().zip(&buf) {
            *d = b.re / len as f64;
        }
    });
    out
}

/// Feldkamp-Davis-Kress reconstruction for the circular orbit.
///
/// Each ray of the half orbit is measured once, so the backprojection sum is
/// scaled by `pi / n_views` without redundancy weighting.
pub fn fdk(stack: &ProjectionStack, extent: &VolumeExtent, cfg: &FdkConfig) -> Result<Volume> {
    check_stack(stack)?;
    extent.validate()?;
    let g = &stack.geom;
    let q = filter_projections(stack, cfg);
    let (rows, cols) = (g.det_rows, g.det_cols);
    let du = g.det_pixel_pitch * g.sad / g.sdd;
    let views: Vec<([f64; 2], [f64; 2])> = (0..g.n_views())
        .map(|v| {
            let d = g.source_direction(v);
            let u = g.detector_u(v);
            ([d.x, d.y], [u.x, u.y])
        })
        .collect();
    let scale = PI / g.n_views() as f64;
    let [nx, ny, _] = extent.dims();
    let mut data = vec![0.0f32; extent.len()];
    data.par_chunks_mut(nx * ny).enumerate().for_each(|(k, slab)| {
        for j in 0..ny {
            for i in 0..nx {
                let p = extent.voxel_center(i, j, k);
                let mut acc = 0.0;
                for (v, (d, u)) in views.iter().enumerate() {
                    let big_u = g.sad - (p.x * d[0] + p.y * d[1]);
                    if big_u <= 0.0 {
                        continue;
                    }
                    let m = g.sad / big_u;
                    let fc = (p.x * u[0] + p.y * u[1]) * m / du + cols as f64 / 2.0 - 0.5;
                    let fr = rows as f64 / 2.0 - 0.5 - p.z * m / du;
                    acc += m * m * bilinear(&q[v * rows * cols..(v + 1) * rows * cols], rows, cols, fr, fc);
                }
                slab[j * nx + i] = (acc * scale) as f32;
            }
        }
    });
    Volume::from_data(extent.clone(), data)
}

/// Bilinear detector lookup; zero beyond the outermost pixel centres.
fn bilinear(img: &[f64], rows: usize, cols: usize, r: f64, c: f64) -> f64 {
    if !(r >= 0.0 && c >= 0.0 && r <= (rows - 1) as f64 && c <= (cols - 1) as f64) {
        return 0.0;
    }
    let (r0, c0) = (r.floor() as usize, c.floor() as usize);
    let (r1, c1) = ((r0 + 1).min(rows - 1), (c0 + 1).min(cols - 1));
    let (fr, fc) = (r - r0 as f64, c - c0 as f64);
    let top = img[r0 * cols + c0] * (1.0 - fc) + img[r0 * cols + c1] * fc;
    let bot = img[r1 * cols + c0] * (1.0 - fc) + img[r1 * cols + c1] * fc;
    top * (1.0 - fr) + bot * fr
}

/// Trains the parameter-matched single-output field.
pub fn reconstruct_mlp_hash(scene: &Scene, config: &TrainConfig) -> Result<(NeuralField, TrainLog)> {
    if !matches!(config.mode, TrainMode::Mlp | TrainMode::MlpThreshSup) {
        return invalid(format!("MLP(hash) baseline cannot run mode {}", config.mode.as_str()));
    }
    train(scene, config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::make_circular_trajectory;
    use crate::projector::project_volume;

    fn tiny_geom(views: usize, n: usize) -> ScannerGeometry {
        ScannerGeometry::new(2.0, 4.0, n, n, 0.1, make_circular_trajectory(views, 180.0).unwrap()).unwrap()
    }

    #[test]
    fn single_voxel_converges() {
        let extent = VolumeExtent::cube(1.0, 1).unwrap();
        let geom = ScannerGeometry::new(2.0, 4.0, 1, 1, 0.05, vec![0.0]).unwrap();
        let truth = Volume::filled(extent.clone(), 0.7);
        let stack = project_volume(&truth, &geom, 16).unwrap();
        let out = sart_with_residuals(&stack, &extent, &SartConfig::default()).unwrap();
        // Each sweep scales the error by (1 - relaxation).
        let expected = 0.7 * (1.0 - 0.7f64.powi(50));
        assert!((out.volume.data[0] as f64 - expected).abs() < 1e-6);
        assert!(*out.residual_norms.last().unwrap() < 1e-6);
    }

    #[test]
    fn zero_projections_are_a_fixed_point() {
        let extent = VolumeExtent::cube(1.0, 8).unwrap();
        let stack = ProjectionStack::zeros(tiny_geom(4, 8), ProjectionKind::Sigma);
        let cfg = SartConfig {
            n_iterations: 3,
            ..SartConfig::default()
        };
        assert!(sart(&stack, &extent, &cfg).unwrap().data.iter().all(|&v| v == 0.0));
        assert!(fdk(&stack, &extent, &FdkConfig::default()).unwrap().data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sart_residual_does_not_increase() {
        let extent = VolumeExtent::cube(1.0, 12).unwrap();
        let truth = Volume::from_fn(extent.clone(), |i, j, k| if (3..9).contains(&i) && (4..8).contains(&j) && k > 2 { 1.0 } else { 0.2 });
        let stack = project_volume(&truth, &tiny_geom(12, 16), 32).unwrap();
        let cfg = SartConfig {
            n_iterations: 10,
            n_samples: 32,
            ..SartConfig::default()
        };
        let out = sart_with_residuals(&stack, &extent, &cfg).unwrap();
        for w in out.residual_norms.windows(2) {
            assert!(w[1] <= w[0] * (1.0 + 1e-9), "{:?}", out.residual_norms);
        }
        assert!(out.residual_norms[9] < 0.5 * out.residual_norms[0]);
    }

    #[test]
    fn shuffled_order_is_reproducible() {
        let cfg = SartConfig {
            view_order: ViewOrder::Shuffled { seed: 4 },
            ..SartConfig::default()
        };
        assert_eq!(view_sequence(&cfg, 9, 2), view_sequence(&cfg, 9, 2));
        let mut s = view_sequence(&cfg, 9, 2);
        s.sort();
        assert_eq!(s, (0..9).collect::<Vec<_>>());
    }

    #[test]
    fn config_validation() {
        for r in [0.0, 2.0, -1.0, f64::NAN] {
            let cfg = SartConfig {
                relaxation: r,
                ..SartConfig::default()
            };
            assert!(cfg.validate().is_err());
        }
        let extent = VolumeExtent::cube(1.0, 4).unwrap();
        let stack = ProjectionStack::zeros(tiny_geom(2, 4), ProjectionKind::Alpha);
        assert!(sart(&stack, &extent, &SartConfig::default()).is_err());
    }

    #[test]
    fn fdk_is_linear() {
        let extent = VolumeExtent::cube(1.0, 10).unwrap();
        let geom = tiny_geom(8, 12);
        let a = project_volume(&Volume::from_fn(extent.clone(), |i, j, _| (i * j) as f32 * 0.01), &geom, 24).unwrap();
        let b = project_volume(&Volume::from_fn(extent.clone(), |_, j, k| (j + k) as f32 * 0.02), &geom, 24).unwrap();
        let combo: Vec<f32> = a.data.iter().zip(&b.data).map(|(x, y)| 2.0 * x + 0.5 * y).collect();
        let c = ProjectionStack::from_data(geom, ProjectionKind::Sigma, combo).unwrap();
        let cfg = FdkConfig { filter: FdkFilter::Ramp };
        let (ra, rb, rc) = (fdk(&a, &extent, &cfg).unwrap(), fdk(&b, &extent, &cfg).unwrap(), fdk(&c, &extent, &cfg).unwrap());
        let scale = rc.data.iter().fold(0.0f32, |m, v| m.max(v.abs())) as f64;
        for i in 0..rc.len() {
            let lin = 2.0 * ra.data[i] as f64 + 0.5 * rb.data[i] as f64;
            assert!((rc.data[i] as f64 - lin).abs() <= 1e-5 * scale);
        }
    }

    #[test]
    fn fdk_recovers_uniform_sphere_level() {
        let extent = VolumeExtent::cube(1.0, 24).unwrap();
        let truth = Volume::from_fn(extent.clone(), |i, j, k| {
            let p = extent.voxel_center(i, j, k);
            if p.norm() < 0.3 {
                1.0
            } else {
                0.0
            }
        });
        let geom = ScannerGeometry::new(2.0, 4.0, 48, 48, 0.05, make_circular_trajectory(90, 180.0).unwrap()).unwrap();
        let stack = project_volume(&truth, &geom, 64).unwrap();
        let rec = fdk(&stack, &extent, &FdkConfig { filter: FdkFilter::Ramp }).unwrap();
        let c = rec.get(12, 12, 12) as f64;
        assert!((c - 1.0).abs() < 0.15, "centre value {c}");
        let corner = rec.get(1, 1, 12) as f64;
        assert!(corner.abs() < 0.15, "background value {corner}");
    }

    #[test]
    fn fdk_impulse_peaks_at_source_voxel() {
        let n = 20;
        let extent = VolumeExtent::cube(1.0, n).unwrap();
        let at = [13, 6, 9];
        let mut truth = Volume::zeros(extent.clone());
        truth.set(at[0], at[1], at[2], 1.0);
        let geom = ScannerGeometry::new(2.0, 4.0, 40, 40, 0.05, make_circular_trajectory(120, 180.0).unwrap()).unwrap();
        let stack = project_volume(&truth, &geom, 64).unwrap();
        let rec = fdk(&stack, &extent, &FdkConfig::default()).unwrap();
        let (best, _) = rec.data.iter().enumerate().fold((0, f32::MIN), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
        let got = [best % n, (best / n) % n, best / (n * n)];
        for a in 0..3 {
            assert!(got[a].abs_diff(at[a]) <= 1, "peak at {got:?}, expected {at:?}");
        }
    }

    #[test]
    fn mlp_baseline_rejects_quad_modes() {
        let extent = VolumeExtent::cube(1.0, 4).unwrap();
        let scene = Scene::simulate(Volume::zeros(extent), tiny_geom(2, 4)).unwrap();
        assert!(reconstruct_mlp_hash(&scene, &TrainConfig::desk(TrainMode::Tnt, 64)).is_err());
    }
}

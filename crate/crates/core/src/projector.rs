//! Forward projection of voxel volumes into log-domain line integrals.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::geometry::{intersect_aabb, Ray, ScannerGeometry, Vec3, VolumeExtent};
use crate::phantom::CosineSeries;
use crate::volume::{TissueMasks, Volume};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProjectionKind {
    Sigma,
    Alpha,
    Beta,
}

impl ProjectionKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ProjectionKind::Sigma => "sigma",
            ProjectionKind::Alpha => "alpha",
            ProjectionKind::Beta => "beta",
        }
    }
}

/// Per-view detector images, stored view-major then row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionStack {
    pub geom: ScannerGeometry,
    pub kind: ProjectionKind,
    pub data: Vec<f32>,
}

impl ProjectionStack {
    pub fn zeros(geom: ScannerGeometry, kind: ProjectionKind) -> Self {
        let n = geom.n_views() * geom.pixels_per_view();
        Self {
            geom,
            kind,
            data: vec![0.0; n],
        }
    }

    pub fn from_data(geom: ScannerGeometry, kind: ProjectionKind, data: Vec<f32>) -> Result<Self> {
        if data.len() != geom.n_views() * geom.pixels_per_view() {
            return invalid("projection data length does not match geometry");
        }
        if data.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return invalid("projection values must be finite and non-negative");
        }
        Ok(Self { geom, kind, data })
    }

    pub fn n_views(&self) -> usize {
        self.geom.n_views()
    }

    pub fn view(&self, v: usize) -> &[f32] {
        let n = self.geom.pixels_per_view();
        &self.data[v * n..(v + 1) * n]
    }

    #[inline]
    pub fn get(&self, view: usize, row: usize, col: usize) -> f32 {
        self.data[(view * self.geom.det_rows + row) * self.geom.det_cols + col]
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }

    /// Keeps only the listed views, in the given order.
    pub fn select_views(&self, view_indices: &[usize]) -> Result<Self> {
        let geom = self.geom.with_views(view_indices)?;
        let mut data = Vec::with_capacity(view_indices.len() * self.geom.pixels_per_view());
        for &v in view_indices {
            data.extend_from_slice(self.view(v));
        }
        Ok(Self {
            geom,
            kind: self.kind,
            data,
        })
    }
}

/// Eight voxel indices and trilinear weights around a world point, with
/// edge-replicating clamping inside the extent. `None` outside the extent.
#[inline]
pub fn trilinear_weights(extent: &VolumeExtent, p: Vec3) -> Option<([usize; 8], [f64; 8])> {
    if !extent.contains(p) {
        return None;
    }
    let h = extent.voxel_size();
    let g = [
        (p.x - extent.min_corner.x) / h.x - 0.5,
        (p.y - extent.min_corner.y) / h.y - 0.5,
        (p.z - extent.min_corner.z) / h.z - 0.5,
    ];
    let n = extent.dims();
    let mut lo = [0usize; 3];
    let mut hi = [0usize; 3];
    let mut f = [0.0f64; 3];
    for a in 0..3 {
        let fl = g[a].floor();
        let i0 = fl as isize;
        f[a] = g[a] - fl;
        let last = n[a] as isize - 1;
        lo[a] = i0.clamp(0, last) as usize;
        hi[a] = (i0 + 1).clamp(0, last) as usize;
    }
    let mut idx = [0usize; 8];
    let mut w = [0.0f64; 8];
    for c in 0..8 {
        let (bx, by, bz) = (c & 1, (c >> 1) & 1, (c >> 2) & 1);
        let i = if bx == 1 { hi[0] } else { lo[0] };
        let j = if by == 1 { hi[1] } else { lo[1] };
        let k = if bz == 1 { hi[2] } else { lo[2] };
        idx[c] = extent.index(i, j, k);
        let wx = if bx == 1 { f[0] } else { 1.0 - f[0] };
        let wy = if by == 1 { f[1] } else { 1.0 - f[1] };
        let wz = if bz == 1 { f[2] } else { 1.0 - f[2] };
        w[c] = wx * wy * wz;
    }
    Some((idx, w))
}

/// Trilinear interpolation between voxel centres; zero outside the extent.
pub fn trilinear_sample(vol: &Volume, p: Vec3) -> f64 {
    match trilinear_weights(&vol.extent, p) {
        Some((idx, w)) => idx.iter().zip(&w).map(|(&i, &w)| vol.data[i] as f64 * w).sum(),
        None => 0.0,
    }
}

/// Midpoint-rule line integral of `vol` along the part of `ray` inside the volume.
pub fn integrate_ray(vol: &Volume, ray: &Ray, n_samples: usize) -> f64 {
    let Some((t0, t1)) = intersect_aabb(ray, &vol.extent) else {
        return 0.0;
    };
    let dt = (t1 - t0) / n_samples as f64;
    let mut acc = 0.0;
    for s in 0..n_samples {
        let t = t0 + (s as f64 + 0.5) * dt;
        acc += trilinear_sample(vol, ray.at(t));
    }
    acc * dt
}

fn project_with(vol: &Volume, geom: &ScannerGeometry, n_samples: usize, kind: ProjectionKind) -> Result<ProjectionStack> {
    if n_samples == 0 {
        return invalid("n_samples must be >= 1");
    }
    let (rows, cols) = (geom.det_rows, geom.det_cols);
    let data: Vec<f32> = (0..geom.n_views())
        .into_par_iter()
        .flat_map_iter(|v| {
            (0..rows * cols).map(move |p| {
                let ray = geom.ray_unchecked(v, p / cols, p % cols);
                integrate_ray(vol, &ray, n_samples) as f32
            })
        })
        .collect();
    Ok(ProjectionStack {
        geom: geom.clone(),
        kind,
        data,
    })
}

/// Log-domain projections `ln(I0) - ln(I)` of an attenuation volume.
pub fn project_volume(vol: &Volume, geom: &ScannerGeometry, n_samples: usize) -> Result<ProjectionStack> {
    project_with(vol, geom, n_samples, ProjectionKind::Sigma)
}

/// Accumulated projections of the object and hard-tissue masks.
pub fn project_masks(
    masks: &TissueMasks,
    geom: &ScannerGeometry,
    n_samples: usize,
) -> Result<(ProjectionStack, ProjectionStack)> {
    Ok((
        project_with(&masks.alpha, geom, n_samples, ProjectionKind::Alpha)?,
        project_with(&masks.beta, geom, n_samples, ProjectionKind::Beta)?,
    ))
}

/// Lambert-Beer: detected intensity from a log-domain line integral.
pub fn to_intensity(log_value: f64, i0: f64) -> Result<f64> {
    if !(i0 > 0.0) {
        return invalid("i0 must be positive");
    }
    Ok(i0 * (-log_value).exp())
}

/// Inverse of [`to_intensity`].
pub fn from_intensity(i: f64, i0: f64) -> Result<f64> {
    if !(i0 > 0.0) {
        return invalid("i0 must be positive");
    }
    if !(i > 0.0 && i <= i0) {
        return invalid(format!("intensity must be in (0, i0], got {i}"));
    }
    Ok(i0.ln() - i.ln())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseSpec {
    pub gaussian_sigma: f64,
    pub smooth_gain_amp: f64,
    pub seed: u64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self {
            gaussian_sigma: 0.0,
            smooth_gain_amp: 0.0,
            seed: 0,
        }
    }
}

impl NoiseSpec {
    /// Default perturbation for a stack: 5 % of its mean and a 10 % smooth gain.
    pub fn default_for(stack: &ProjectionStack, seed: u64) -> Self {
        Self {
            gaussian_sigma: 0.05 * stack.mean(),
            smooth_gain_amp: 0.1,
            seed,
        }
    }
}

/// `max(0, p * (1 + g(u, v)) + n)` with a smooth per-view gain field `g` and
/// i.i.d. Gaussian noise `n`.
pub fn perturb_projections(stack: &ProjectionStack, spec: &NoiseSpec) -> Result<ProjectionStack> {
    if !(spec.gaussian_sigma >= 0.0 && spec.smooth_gain_amp >= 0.0) {
        return invalid("noise amplitudes must be non-negative");
    }
    if spec.gaussian_sigma == 0.0 && spec.smooth_gain_amp == 0.0 {
        return Ok(stack.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let normal = Normal::new(0.0, spec.gaussian_sigma).map_err(|e| crate::Error::InvalidArgument(e.to_string()))?;
    let g = &stack.geom;
    let (rows, cols) = (g.det_rows, g.det_cols);
    let mut data = stack.data.clone();
    for v in 0..g.n_views() {
        let gain = CosineSeries::random(&mut rng, 4, 2);
        for r in 0..rows {
            for c in 0..cols {
                let q = [c as f64 / cols as f64 - 0.5, r as f64 / rows as f64 - 0.5, 0.0];
                let idx = (v * rows + r) * cols + c;
                let noise = if spec.gaussian_sigma > 0.0 { normal.sample(&mut rng) } else { 0.0 };
                let val = data[idx] as f64 * (1.0 + spec.smooth_gain_amp * gain.eval(q)) + noise;
                data[idx] = val.max(0.0) as f32;
            }
        }
    }
    Ok(ProjectionStack {
        geom: stack.geom.clone(),
        kind: stack.kind,
        data,
    })
}

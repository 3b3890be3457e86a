//! Circular cone-beam acquisition geometry.
//!
//! The rotation axis is the world `z` axis and the volume is centred on the
//! origin. The source travels on a circle of radius `sad` in the `z = 0` plane;
//! the flat detector sits opposite the source at distance `sdd`, its `u` axis
//! horizontal (tangent to the orbit) and its `v` axis parallel to `z`.

use std::ops::{Add, Mul, Neg, Sub};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vec3 {
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub const fn splat(v: f64) -> Self {
        Self { x: v, y: v, z: v }
    }

    pub fn dot(self, o: Self) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn cross(self, o: Self) -> Self {
        Self::new(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn normalized(self) -> Self {
        self * (1.0 / self.norm())
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        Self::new(a[0], a[1], a[2])
    }
}

impl Add for Vec3 {
    type Output = Vec3;
    fn add(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl Sub for Vec3 {
    type Output = Vec3;
    fn sub(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl Mul<f64> for Vec3 {
    type Output = Vec3;
    fn mul(self, s: f64) -> Vec3 {
        Vec3::new(self.x * s, self.y * s, self.z * s)
    }
}

impl Neg for Vec3 {
    type Output = Vec3;
    fn neg(self) -> Vec3 {
        Vec3::new(-self.x, -self.y, -self.z)
    }
}

/// A parametric ray `origin + t * direction` restricted to `[t_near, t_far]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub direction: Vec3,
    pub t_near: f64,
    pub t_far: f64,
}

impl Ray {
    /// Builds a ray, normalizing `direction`.
    pub fn new(origin: Vec3, direction: Vec3, t_near: f64, t_far: f64) -> Self {
        Self {
            origin,
            direction: direction.normalized(),
            t_near,
            t_far,
        }
    }

    pub fn at(&self, t: f64) -> Vec3 {
        self.origin + self.direction * t
    }

    pub fn length(&self) -> f64 {
        self.t_far - self.t_near
    }

    pub fn with_interval(mut self, t_near: f64, t_far: f64) -> Self {
        self.t_near = t_near;
        self.t_far = t_far;
        self
    }
}

/// Axis-aligned voxel grid placement in world coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VolumeExtent {
    pub min_corner: Vec3,
    pub max_corner: Vec3,
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
}

impl VolumeExtent {
    pub fn new(min_corner: Vec3, max_corner: Vec3, nx: usize, ny: usize, nz: usize) -> Result<Self> {
        let e = Self {
            min_corner,
            max_corner,
            nx,
            ny,
            nz,
        };
        e.validate()?;
        Ok(e)
    }

    /// Cube of side `side` centred on the origin with `n` voxels per axis.
    pub fn cube(side: f64, n: usize) -> Result<Self> {
        let h = side / 2.0;
        Self::new(Vec3::splat(-h), Vec3::splat(h), n, n, n)
    }

    pub fn validate(&self) -> Result<()> {
        let (a, b) = (self.min_corner, self.max_corner);
        if !(b.x > a.x && b.y > a.y && b.z > a.z) {
            return invalid("extent max_corner must exceed min_corner componentwise");
        }
        if self.nx == 0 || self.ny == 0 || self.nz == 0 {
            return invalid("extent voxel counts must be >= 1");
        }
        Ok(())
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.nx, self.ny, self.nz]
    }

    pub fn len(&self) -> usize {
        self.nx * self.ny * self.nz
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn size(&self) -> Vec3 {
        self.max_corner - self.min_corner
    }

    pub fn voxel_size(&self) -> Vec3 {
        let s = self.size();
        Vec3::new(s.x / self.nx as f64, s.y / self.ny as f64, s.z / self.nz as f64)
    }

    /// Linear index with `x` varying fastest.
    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.nx * (j + self.ny * k)
    }

    pub fn voxel_center(&self, i: usize, j: usize, k: usize) -> Vec3 {
        let h = self.voxel_size();
        Vec3::new(
            self.min_corner.x + (i as f64 + 0.5) * h.x,
            self.min_corner.y + (j as f64 + 0.5) * h.y,
            self.min_corner.z + (k as f64 + 0.5) * h.z,
        )
    }

    /// Maps a world point to the unit cube spanned by the extent.
    #[inline]
    pub fn normalize(&self, p: Vec3) -> Vec3 {
        let s = self.size();
        Vec3::new(
            (p.x - self.min_corner.x) / s.x,
            (p.y - self.min_corner.y) / s.y,
            (p.z - self.min_corner.z) / s.z,
        )
    }

    pub fn contains(&self, p: Vec3) -> bool {
        let (a, b) = (self.min_corner, self.max_corner);
        p.x >= a.x && p.x <= b.x && p.y >= a.y && p.y <= b.y && p.z >= a.z && p.z <= b.z
    }
}

/// Circular cone-beam scanner.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScannerGeometry {
    /// Source to rotation axis distance.
    pub sad: f64,
    /// Source to detector plane distance.
    pub sdd: f64,
    pub det_rows: usize,
    pub det_cols: usize,
    pub det_pixel_pitch: f64,
    /// View angles in degrees.
    pub angles: Vec<f64>,
}

/// Equally spaced view angles in degrees, starting at 0 with the endpoint excluded.
pub fn make_circular_trajectory(n_views: usize, range_deg: f64) -> Result<Vec<f64>> {
    if n_views == 0 {
        return invalid("n_views must be >= 1");
    }
    if !(range_deg > 0.0 && range_deg <= 360.0) {
        return invalid(format!("range_deg must be in (0, 360], got {range_deg}"));
    }
    let step = range_deg / n_views as f64;
    Ok((0..n_views).map(|i| i as f64 * step).collect())
}

impl ScannerGeometry {
    pub fn new(
        sad: f64,
        sdd: f64,
        det_rows: usize,
        det_cols: usize,
        det_pixel_pitch: f64,
        angles: Vec<f64>,
    ) -> Result<Self> {
        let g = Self {
            sad,
            sdd,
            det_rows,
            det_cols,
            det_pixel_pitch,
            angles,
        };
        g.validate()?;
        Ok(g)
    }

    /// Defaults used throughout the desk-scale experiments: magnification 2
    /// and a 2-unit detector whose pixels map to one 64³ voxel at the isocentre.
    pub fn desk(angles: Vec<f64>) -> Result<Self> {
        Self::new(2.0, 4.0, 64, 64, 2.0 / 64.0, angles)
    }

    pub fn full(angles: Vec<f64>) -> Result<Self> {
        Self::new(2.0, 4.0, 512, 512, 3.2 / 512.0, angles)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sad > 0.0 && self.sdd > self.sad) {
            return invalid("geometry requires sdd > sad > 0");
        }
        if self.det_rows == 0 || self.det_cols == 0 {
            return invalid("detector must have at least one row and column");
        }
        if !(self.det_pixel_pitch > 0.0) {
            return invalid("det_pixel_pitch must be positive");
        }
        if self.angles.is_empty() {
            return invalid("geometry needs at least one view angle");
        }
        for (i, &a) in self.angles.iter().enumerate() {
            if !(0.0..360.0).contains(&a) {
                return invalid(format!("angle {a} outside [0, 360)"));
            }
            if i > 0 && a <= self.angles[i - 1] {
                return invalid("angles must be strictly increasing");
            }
        }
        Ok(())
    }

    pub fn n_views(&self) -> usize {
        self.angles.len()
    }

    pub fn pixels_per_view(&self) -> usize {
        self.det_rows * self.det_cols
    }

    /// Same scanner restricted to a subset of views.
    pub fn with_views(&self, view_indices: &[usize]) -> Result<Self> {
        let angles = view_indices
            .iter()
            .map(|&i| {
                self.angles
                    .get(i)
                    .copied()
                    .ok_or_else(|| crate::Error::InvalidArgument(format!("view {i} out of range")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(
            self.sad,
            self.sdd,
            self.det_rows,
            self.det_cols,
            self.det_pixel_pitch,
            angles,
        )
    }

    /// Unit vector from the rotation axis towards the source for `view`.
    pub fn source_direction(&self, view: usize) -> Vec3 {
        let th = self.angles[view].to_radians();
        Vec3::new(th.cos(), th.sin(), 0.0)
    }

    pub fn source_position(&self, view: usize) -> Vec3 {
        self.source_direction(view) * self.sad
    }

    /// Detector `u` axis (horizontal, tangent to the orbit).
    pub fn detector_u(&self, view: usize) -> Vec3 {
        let th = self.angles[view].to_radians();
        Vec3::new(-th.sin(), th.cos(), 0.0)
    }

    pub fn detector_v(&self) -> Vec3 {
        Vec3::new(0.0, 0.0, 1.0)
    }

    pub fn detector_center(&self, view: usize) -> Vec3 {
        self.source_direction(view) * (self.sad - self.sdd)
    }

    /// In-plane detector offsets of the centre of pixel `(row, col)`. Row 0 is
    /// the top of the detector (largest `v`).
    pub fn pixel_offset(&self, row: usize, col: usize) -> (f64, f64) {
        let p = self.det_pixel_pitch;
        let u = (col as f64 + 0.5 - self.det_cols as f64 / 2.0) * p;
        let v = (self.det_rows as f64 / 2.0 - row as f64 - 0.5) * p;
        (u, v)
    }

    /// World position of the centre of pixel `(row, col)` on the detector plane.
    pub fn pixel_position(&self, view: usize, row: usize, col: usize) -> Vec3 {
        let (u, v) = self.pixel_offset(row, col);
        self.detector_center(view) + self.detector_u(view) * u + self.detector_v() * v
    }

    /// Ray from the source through the centre of detector pixel `(row, col)`.
    pub fn ray_for_pixel(&self, view: usize, row: usize, col: usize) -> Result<Ray> {
        if view >= self.n_views() || row >= self.det_rows || col >= self.det_cols {
            return invalid(format!(
                "pixel (view {view}, row {row}, col {col}) outside {}x{}x{}",
                self.n_views(),
                self.det_rows,
                self.det_cols
            ));
        }
        Ok(self.ray_unchecked(view, row, col))
    }

    #[inline]
    pub(crate) fn ray_unchecked(&self, view: usize, row: usize, col: usize) -> Ray {
        let src = self.source_position(view);
        let dst = self.pixel_position(view, row, col);
        Ray::new(src, dst - src, 0.0, self.sdd)
    }
}

/// Slab-method intersection of `ray` with the extent box, clipped to the ray's
/// own interval. Returns `None` for misses and degenerate (< 1e-9) overlaps.
pub fn intersect_aabb(ray: &Ray, extent: &VolumeExtent) -> Option<(f64, f64)> {
    let o = ray.origin.to_array();
    let d = ray.direction.to_array();
    let lo = extent.min_corner.to_array();
    let hi = extent.max_corner.to_array();
    let mut t0 = ray.t_near;
    let mut t1 = ray.t_far;
    for a in 0..3 {
        if d[a] == 0.0 {
            if o[a] < lo[a] || o[a] > hi[a] {
                return None;
            }
            continue;
        }
        let inv = 1.0 / d[a];
        let ta = (lo[a] - o[a]) * inv;
        let tb = (hi[a] - o[a]) * inv;
        t0 = t0.max(ta.min(tb));
        t1 = t1.min(ta.max(tb));
    }
    if t1 - t0 < 1e-9 {
        None
    } else {
        Some((t0, t1))
    }
}

/// A quadrature sample along a ray.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sample {
    pub t: f64,
    pub point: Vec3,
    pub dt: f64,
}

/// Stratified samples over `[t_near, t_far]`: midpoints of `n_samples` equal
/// strata, or uniform within each stratum when `jitter` is set.
pub fn sample_points<R: Rng + ?Sized>(ray: &Ray, n_samples: usize, jitter: bool, rng: &mut R) -> Vec<Sample> {
    let mut out = Vec::with_capacity(n_samples);
    sample_points_into(ray, n_samples, jitter, rng, &mut out);
    out
}

pub fn sample_points_into<R: Rng + ?Sized>(
    ray: &Ray,
    n_samples: usize,
    jitter: bool,
    rng: &mut R,
    out: &mut Vec<Sample>,
) {
    out.clear();
    let len = ray.t_far - ray.t_near;
    if n_samples == 0 || !(len > 0.0) {
        return;
    }
    let dt = len / n_samples as f64;
    for i in 0..n_samples {
        let offset = if jitter { rng.gen::<f64>() } else { 0.5 };
        let t = ray.t_near + (i as f64 + offset) * dt;
        out.push(Sample {
            t,
            point: ray.at(t),
            dt,
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn odd_geometry(angles: Vec<f64>) -> ScannerGeometry {
        ScannerGeometry::new(2.0, 4.0, 33, 31, 0.1, angles).unwrap()
    }

    #[test]
    fn trajectory_examples() {
        let a = make_circular_trajectory(120, 180.0).unwrap();
        assert_eq!(a.len(), 120);
        assert_eq!(a[0], 0.0);
        assert!((a[1] - 1.5).abs() < 1e-12);
        assert!((a[2] - 3.0).abs() < 1e-12);
        assert!((a[119] - 178.5).abs() < 1e-12);
        assert_eq!(make_circular_trajectory(1, 180.0).unwrap(), vec![0.0]);
        assert_eq!(
            make_circular_trajectory(4, 180.0).unwrap(),
            vec![0.0, 45.0, 90.0, 135.0]
        );
        assert!(make_circular_trajectory(0, 180.0).is_err());
        assert!(make_circular_trajectory(3, 0.0).is_err());
        assert!(make_circular_trajectory(3, 361.0).is_err());
    }

    #[test]
    fn geometry_validation() {
        assert!(ScannerGeometry::new(2.0, 1.0, 4, 4, 0.1, vec![0.0]).is_err());
        assert!(ScannerGeometry::new(2.0, 4.0, 0, 4, 0.1, vec![0.0]).is_err());
        assert!(ScannerGeometry::new(2.0, 4.0, 4, 4, 0.0, vec![0.0]).is_err());
        assert!(ScannerGeometry::new(2.0, 4.0, 4, 4, 0.1, vec![10.0, 5.0]).is_err());
        assert!(ScannerGeometry::new(2.0, 4.0, 4, 4, 0.1, vec![360.0]).is_err());
    }

    fn distance_point_to_line(p: Vec3, ray: &Ray) -> f64 {
        (p - ray.origin).cross(ray.direction).norm()
    }

    #[test]
    fn central_ray_hits_axis() {
        let g = odd_geometry(make_circular_trajectory(7, 360.0).unwrap());
        for v in 0..g.n_views() {
            let r = g.ray_for_pixel(v, 16, 15).unwrap();
            assert!(distance_point_to_line(Vec3::default(), &r) < 1e-6);
            assert!((r.direction.norm() - 1.0).abs() < 1e-9);
            assert_eq!(r.t_near, 0.0);
            assert_eq!(r.t_far, 4.0);
        }
    }

    #[test]
    fn opposite_views_are_antiparallel() {
        let g = odd_geometry(vec![0.0, 180.0]);
        let a = g.ray_for_pixel(0, 16, 15).unwrap();
        let b = g.ray_for_pixel(1, 16, 15).unwrap();
        assert!((a.direction.dot(b.direction) + 1.0).abs() < 1e-9);
    }

    #[test]
    fn corner_pixel_hits_detector_corner() {
        let g = odd_geometry(vec![0.0, 37.0]);
        for view in 0..2 {
            let r = g.ray_for_pixel(view, 0, 0).unwrap();
            // explicit intersection with the detector plane
            let n = -g.source_direction(view);
            let c = g.detector_center(view);
            let t = (c - r.origin).dot(n) / r.direction.dot(n);
            let hit = r.at(t);
            let rel = hit - c;
            let u = rel.dot(g.detector_u(view));
            let v = rel.dot(g.detector_v());
            let half_w = g.det_cols as f64 * g.det_pixel_pitch / 2.0;
            let half_h = g.det_rows as f64 * g.det_pixel_pitch / 2.0;
            // top-left detector corner is (-half_w, +half_h)
            assert!((u + half_w).abs() <= 0.5 * g.det_pixel_pitch + 1e-9);
            assert!((v - half_h).abs() <= 0.5 * g.det_pixel_pitch + 1e-9);
            assert!(rel.dot(n).abs() < 1e-9);
        }
    }

    #[test]
    fn cone_beam_rays_share_origin() {
        let g = odd_geometry(vec![0.0, 90.0]);
        for view in 0..2 {
            let o = g.ray_for_pixel(view, 0, 0).unwrap().origin;
            for (r, c) in [(3, 4), (32, 30), (10, 0)] {
                assert_eq!(g.ray_for_pixel(view, r, c).unwrap().origin, o);
            }
        }
    }

    #[test]
    fn ray_index_out_of_range() {
        let g = odd_geometry(vec![0.0]);
        assert!(g.ray_for_pixel(1, 0, 0).is_err());
        assert!(g.ray_for_pixel(0, 33, 0).is_err());
        assert!(g.ray_for_pixel(0, 0, 31).is_err());
    }

    #[test]
    fn aabb_examples() {
        let cube = VolumeExtent::cube(1.0, 4).unwrap();
        let r = Ray::new(Vec3::new(-2.0, 0.0, 0.0), Vec3::new(1.0, 0.0, 0.0), 0.0, 10.0);
        let (a, b) = intersect_aabb(&r, &cube).unwrap();
        assert!((a - 1.5).abs() < 1e-12 && (b - 2.5).abs() < 1e-12);

        let far = VolumeExtent::new(Vec3::splat(10.0), Vec3::splat(11.0), 1, 1, 1).unwrap();
        assert!(intersect_aabb(&r, &far).is_none());

        let d = Ray::new(Vec3::splat(-1.0), Vec3::splat(1.0), 0.0, 10.0);
        let (a, b) = intersect_aabb(&d, &cube).unwrap();
        assert!((b - a - 3f64.sqrt()).abs() < 1e-6);

        // clipped by the ray's own interval
        let short = r.with_interval(0.0, 2.0);
        let (a, b) = intersect_aabb(&short, &cube).unwrap();
        assert!((a - 1.5).abs() < 1e-12 && (b - 2.0).abs() < 1e-12);

        // grazing along a face plane outside the box
        let g = Ray::new(Vec3::new(-2.0, 0.7, 0.0), Vec3::new(1.0, 0.0, 0.0), 0.0, 10.0);
        assert!(intersect_aabb(&g, &cube).is_none());
    }

    #[test]
    fn midpoint_samples() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = Ray::new(Vec3::default(), Vec3::new(0.0, 0.0, 1.0), 0.0, 1.0);
        let s = sample_points(&r, 4, false, &mut rng);
        let ts: Vec<f64> = s.iter().map(|s| s.t).collect();
        assert_eq!(ts, vec![0.125, 0.375, 0.625, 0.875]);
        assert!(s.iter().all(|s| s.dt == 0.25));

        let one = sample_points(&r.with_interval(0.2, 0.7), 1, false, &mut rng);
        assert_eq!(one.len(), 1);
        assert!((one[0].t - 0.45).abs() < 1e-15 && (one[0].dt - 0.5).abs() < 1e-15);

        assert!(sample_points(&r.with_interval(0.5, 0.5), 8, false, &mut rng).is_empty());
    }

    #[test]
    fn jittered_samples_stay_in_strata() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let r = Ray::new(Vec3::default(), Vec3::new(1.0, 0.0, 0.0), 0.3, 2.3);
        let n = 10;
        let mut draws = 0;
        while draws < 10_000 {
            let s = sample_points(&r, n, true, &mut rng);
            for (i, s) in s.iter().enumerate() {
                let lo = 0.3 + i as f64 * 0.2;
                assert!(s.t >= lo - 1e-12 && s.t <= lo + 0.2 + 1e-12);
                draws += 1;
            }
            let total: f64 = s.iter().map(|s| s.dt).sum();
            assert!((total - 2.0).abs() < 1e-9);
        }
    }
}

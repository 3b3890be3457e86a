//! Synthetic head-like phantoms with soft and hard tissue.
//!
//! Everything is built in coordinates `q` relative to the volume extent, with
//! `q` in `[-0.5, 0.5]^3`, `z` up along the rotation axis and the face
//! pointing towards `+y`.

use std::f64::consts::TAU;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::geometry::{Vec3, VolumeExtent};
use crate::volume::{TissueMasks, Volume};

pub const DEFAULT_T_ALPHA: f64 = 0.05;
pub const DEFAULT_T_BETA: f64 = 0.45;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomSpec {
    pub seed: u64,
    /// Voxels per axis.
    pub size: usize,
    pub n_teeth: usize,
    pub n_sinuses: usize,
    pub soft_level: f64,
    pub hard_level: f64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            size: 64,
            n_teeth: 12,
            n_sinuses: 3,
            soft_level: 0.25,
            hard_level: 0.85,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.size < 16 {
            return invalid(format!("phantom size must be >= 16, got {}", self.size));
        }
        if !(0.0 < self.soft_level && self.soft_level < self.hard_level && self.hard_level <= 1.0) {
            return invalid("phantom levels must satisfy 0 < soft_level < hard_level <= 1");
        }
        Ok(())
    }

    /// Unit cube centred on the rotation axis.
    pub fn extent(&self) -> Result<VolumeExtent> {
        VolumeExtent::cube(1.0, self.size)
    }
}

/// Smooth random field in `[-1, 1]`: a normalized sum of a few cosines with at
/// most three harmonics per axis.
#[derive(Debug, Clone)]
pub(crate) struct CosineSeries {
    terms: Vec<([f64; 3], f64, f64)>,
}

impl CosineSeries {
    pub(crate) fn random<R: Rng + ?Sized>(rng: &mut R, n_terms: usize, dims: usize) -> Self {
        let mut terms = Vec::with_capacity(n_terms);
        let mut total = 0.0;
        for _ in 0..n_terms {
            let mut k = [0.0; 3];
            loop {
                for c in k.iter_mut().take(dims) {
                    *c = rng.gen_range(0..=3) as f64;
                }
                if k.iter().any(|&c| c != 0.0) {
                    break;
                }
            }
            let norm = (k[0] * k[0] + k[1] * k[1] + k[2] * k[2]).sqrt();
            let amp = rng.gen_range(0.5..1.0) / (1.0 + norm);
            let phase = rng.gen_range(0.0..TAU);
            total += amp;
            terms.push((k, amp, phase));
        }
        for t in &mut terms {
            t.1 /= total;
        }
        Self { terms }
    }

    pub(crate) fn eval(&self, q: [f64; 3]) -> f64 {
        self.terms
            .iter()
            .map(|(k, a, ph)| a * (TAU * (k[0] * q[0] + k[1] * q[1] + k[2] * q[2]) + ph).cos())
            .sum()
    }
}

#[derive(Debug, Clone, Copy)]
struct Ellipsoid {
    center: Vec3,
    semi: Vec3,
}

impl Ellipsoid {
    fn level(&self, q: Vec3) -> f64 {
        let d = q - self.center;
        (d.x / self.semi.x).powi(2) + (d.y / self.semi.y).powi(2) + (d.z / self.semi.z).powi(2)
    }

    fn contains(&self, q: Vec3) -> bool {
        self.level(q) <= 1.0
    }
}

/// Box with axes (tangent, radial, z), the first two rotated by `angle` about z.
#[derive(Debug, Clone, Copy)]
struct Prism {
    center: Vec3,
    angle: f64,
    half: Vec3,
}

impl Prism {
    fn contains(&self, q: Vec3) -> bool {
        let d = q - self.center;
        let (s, c) = self.angle.sin_cos();
        // radial direction (s, c), tangent (c, -s)
        let t = d.x * c - d.y * s;
        let r = d.x * s + d.y * c;
        t.abs() <= self.half.x && r.abs() <= self.half.y && d.z.abs() <= self.half.z
    }
}

struct HeadModel {
    head: Ellipsoid,
    skull_outer: Ellipsoid,
    skull_inner: Ellipsoid,
    skull_floor: f64,
    jaw_center: Vec3,
    jaw_radius: f64,
    jaw_tube: f64,
    jaw_half_angle: f64,
    teeth: Vec<Prism>,
    sinuses: Vec<Ellipsoid>,
    soft_texture: CosineSeries,
    hard_texture: CosineSeries,
}

impl HeadModel {
    fn build(spec: &PhantomSpec) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut jitter = |s: f64| 1.0 + rng.gen_range(-s..s);
        let head = Ellipsoid {
            center: Vec3::new(0.0, 0.0, 0.0),
            semi: Vec3::new(0.38 * jitter(0.04), 0.44 * jitter(0.03), 0.46 * jitter(0.02)),
        };
        let skull_outer = Ellipsoid {
            center: Vec3::new(0.0, -0.01, 0.05),
            semi: Vec3::new(head.semi.x - 0.045, head.semi.y - 0.05, head.semi.z - 0.08),
        };
        let thickness = 0.03 * jitter(0.15);
        let skull_inner = Ellipsoid {
            center: skull_outer.center,
            semi: Vec3::new(
                skull_outer.semi.x - thickness,
                skull_outer.semi.y - thickness,
                skull_outer.semi.z - thickness,
            ),
        };
        let jaw_center = Vec3::new(0.0, 0.02, -0.25);
        let jaw_radius = 0.22 * jitter(0.05);
        let jaw_half_angle = 75f64.to_radians();

        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ 0x5eed);
        let teeth = (0..spec.n_teeth)
            .map(|k| {
                let span = 60f64.to_radians();
                let phi = if spec.n_teeth == 1 {
                    0.0
                } else {
                    -span + 2.0 * span * k as f64 / (spec.n_teeth - 1) as f64
                };
                let phi = phi + rng.gen_range(-0.02..0.02);
                let height = 0.04 * (1.0 + rng.gen_range(-0.15..0.15));
                Prism {
                    center: Vec3::new(
                        jaw_center.x + jaw_radius * phi.sin(),
                        jaw_center.y + jaw_radius * phi.cos(),
                        jaw_center.z + 0.035 + height,
                    ),
                    angle: phi,
                    half: Vec3::new(0.016, 0.024, height),
                }
            })
            .collect();

        let anchors = [
            Vec3::new(0.11, 0.17, -0.04),
            Vec3::new(-0.11, 0.17, -0.04),
            Vec3::new(0.0, 0.04, 0.02),
            Vec3::new(0.0, 0.24, 0.16),
        ];
        let sinuses = (0..spec.n_sinuses)
            .map(|k| {
                let base = anchors.get(k).copied().unwrap_or_else(|| {
                    Vec3::new(
                        rng.gen_range(-0.15..0.15),
                        rng.gen_range(-0.15..0.2),
                        rng.gen_range(-0.02..0.2),
                    )
                });
                let center = base
                    + Vec3::new(
                        rng.gen_range(-0.01..0.01),
                        rng.gen_range(-0.01..0.01),
                        rng.gen_range(-0.01..0.01),
                    );
                let r = 0.055 * (1.0 + rng.gen_range(-0.2..0.2));
                Ellipsoid {
                    center,
                    semi: Vec3::new(r, r * 0.9, r * 1.1),
                }
            })
            .collect();

        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0xC0FF_EE00);
        let soft_texture = CosineSeries::random(&mut rng, 6, 3);
        let hard_texture = CosineSeries::random(&mut rng, 6, 3);
        Self {
            head,
            skull_outer,
            skull_inner,
            skull_floor: -0.12,
            jaw_center,
            jaw_radius,
            jaw_tube: 0.038,
            jaw_half_angle,
            teeth,
            sinuses,
            soft_texture,
            hard_texture,
        }
    }

    fn in_jaw(&self, q: Vec3) -> bool {
        let d = q - self.jaw_center;
        let phi = d.x.atan2(d.y);
        let phi = phi.clamp(-self.jaw_half_angle, self.jaw_half_angle);
        let on_arc = Vec3::new(self.jaw_radius * phi.sin(), self.jaw_radius * phi.cos(), 0.0);
        (d - on_arc).norm() <= self.jaw_tube
    }

    fn classify(&self, q: Vec3) -> Tissue {
        if !self.head.contains(q) {
            return Tissue::Air;
        }
        if self.sinuses.iter().any(|s| s.contains(q)) {
            return Tissue::Air;
        }
        let skull = q.z >= self.skull_floor && self.skull_outer.contains(q) && !self.skull_inner.contains(q);
        if skull || self.in_jaw(q) || self.teeth.iter().any(|t| t.contains(q)) {
            Tissue::Hard
        } else {
            Tissue::Soft
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Tissue {
    Air,
    Soft,
    Hard,
}

/// Deterministic head phantom with its construction-time tissue masks.
pub fn generate_head_phantom(spec: &PhantomSpec) -> Result<(Volume, TissueMasks)> {
    spec.validate()?;
    let extent = spec.extent()?;
    let model = HeadModel::build(spec);
    let n = spec.size;
    let mut vol = Volume::zeros(extent);
    let mut alpha = Volume::zeros(extent);
    let mut beta = Volume::zeros(extent);
    let centre = (extent.min_corner + extent.max_corner) * 0.5;
    let size = extent.size();
    for k in 0..n {
        for j in 0..n {
            for i in 0..n {
                let p = extent.voxel_center(i, j, k) - centre;
                let q = Vec3::new(p.x / size.x, p.y / size.y, p.z / size.z);
                let qa = q.to_array();
                let idx = extent.index(i, j, k);
                match model.classify(q) {
                    Tissue::Air => {}
                    Tissue::Soft => {
                        vol.data[idx] = (spec.soft_level * (1.0 + 0.1 * model.soft_texture.eval(qa))) as f32;
                        alpha.data[idx] = 1.0;
                    }
                    Tissue::Hard => {
                        vol.data[idx] = (spec.hard_level * (0.9 + 0.1 * model.hard_texture.eval(qa))) as f32;
                        alpha.data[idx] = 1.0;
                        beta.data[idx] = 1.0;
                    }
                }
            }
        }
    }
    Ok((vol, TissueMasks { alpha, beta }))
}

/// `alpha = [v >= t_alpha]`, `beta = [v >= t_beta]`.
pub fn threshold_masks(vol: &Volume, t_alpha: f64, t_beta: f64) -> Result<TissueMasks> {
    if !(0.0 <= t_alpha && t_alpha < t_beta) {
        return invalid(format!("thresholds must satisfy 0 <= t_alpha < t_beta, got ({t_alpha}, {t_beta})"));
    }
    let ind = |t: f64| vol.map(|v| if v as f64 >= t { 1.0 } else { 0.0 });
    Ok(TissueMasks {
        alpha: ind(t_alpha),
        beta: ind(t_beta),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ForeignBodySpec {
    pub n: usize,
    /// Ball radius in world units.
    pub radius: f64,
    pub value: f64,
    pub seed: u64,
    /// Threshold deciding whether inserted balls join the hard-tissue mask.
    pub t_beta: f64,
}

impl Default for ForeignBodySpec {
    fn default() -> Self {
        Self {
            n: 3,
            radius: 0.04,
            value: 0.9,
            seed: 0,
            t_beta: DEFAULT_T_BETA,
        }
    }
}

const PLACEMENT_ATTEMPTS: usize = 1000;

/// Inserts `spec.n` non-touching balls lying entirely in soft tissue
/// (`alpha = 1`, `beta = 0`).
pub fn add_foreign_bodies(vol: &Volume, masks: &TissueMasks, spec: &ForeignBodySpec) -> Result<(Volume, TissueMasks)> {
    if !(spec.value > 0.0 && spec.value <= 1.0) {
        return invalid("foreign body value must be in (0, 1]");
    }
    if !(spec.radius > 0.0) {
        return invalid("foreign body radius must be positive");
    }
    if !vol.same_shape(&masks.alpha) {
        return invalid("volume and masks differ in shape");
    }
    let mut out = vol.clone();
    let mut out_masks = masks.clone();
    if spec.n == 0 {
        return Ok((out, out_masks));
    }
    let e = vol.extent;
    let h = e.voxel_size();
    let candidates: Vec<[usize; 3]> = (0..e.nz)
        .flat_map(|k| (0..e.ny).flat_map(move |j| (0..e.nx).map(move |i| [i, j, k])))
        .filter(|&[i, j, k]| masks.alpha.get(i, j, k) == 1.0 && masks.beta.get(i, j, k) == 0.0)
        .collect();
    if candidates.is_empty() {
        return Err(Error::PlacementFailure("no soft-tissue voxels available".into()));
    }
    let ball_voxels = |c: Vec3| {
        let r = spec.radius;
        let lo = |c: f64, m: f64, hh: f64, n: usize| (((c - r - m) / hh).floor().max(0.0) as usize).min(n - 1);
        let hi = |c: f64, m: f64, hh: f64, n: usize| (((c + r - m) / hh).ceil().max(0.0) as usize).min(n - 1);
        let m = e.min_corner;
        let mut vox = Vec::new();
        for k in lo(c.z, m.z, h.z, e.nz)..=hi(c.z, m.z, h.z, e.nz) {
            for j in lo(c.y, m.y, h.y, e.ny)..=hi(c.y, m.y, h.y, e.ny) {
                for i in lo(c.x, m.x, h.x, e.nx)..=hi(c.x, m.x, h.x, e.nx) {
                    if (e.voxel_center(i, j, k) - c).norm() <= r {
                        vox.push([i, j, k]);
                    }
                }
            }
        }
        vox
    };
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut centres: Vec<Vec3> = Vec::new();
    let min_gap = 2.0 * spec.radius + 2.0 * h.x.max(h.y).max(h.z);
    let mut attempts = 0;
    while centres.len() < spec.n {
        if attempts >= PLACEMENT_ATTEMPTS {
            return Err(Error::PlacementFailure(format!(
                "placed {} of {} balls after {PLACEMENT_ATTEMPTS} attempts",
                centres.len(),
                spec.n
            )));
        }
        attempts += 1;
        let [i, j, k] = candidates[rng.gen_range(0..candidates.len())];
        let c = e.voxel_center(i, j, k);
        if centres.iter().any(|&o| (o - c).norm() < min_gap) {
            continue;
        }
        let vox = ball_voxels(c);
        if vox.is_empty()
            || vox
                .iter()
                .any(|&[i, j, k]| masks.alpha.get(i, j, k) != 1.0 || masks.beta.get(i, j, k) != 0.0)
        {
            continue;
        }
        let in_beta = spec.value >= spec.t_beta;
        for [i, j, k] in vox {
            out.set(i, j, k, spec.value as f32);
            out_masks.alpha.set(i, j, k, 1.0);
            if in_beta {
                out_masks.beta.set(i, j, k, 1.0);
            }
        }
        centres.push(c);
    }
    Ok((out, out_masks))
}

/// Voxelwise `min(value, cap)`.
pub fn clip_hard_tissue(vol: &Volume, cap: f64) -> Result<Volume> {
    if !(cap > 0.0) {
        return invalid("clip cap must be positive");
    }
    let cap = cap as f32;
    Ok(vol.map(|v| v.min(cap)))
}

/// Bright single-voxel phantom used for point-spread checks.
pub fn impulse_phantom(extent: VolumeExtent, at: [usize; 3], value: f32) -> Volume {
    let mut v = Volume::zeros(extent);
    v.set(at[0], at[1], at[2], value);
    v
}

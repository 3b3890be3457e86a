//! Exact line integrals of a trilinearly interpolated voxel volume.
//!
//! The interpolant is a cubic polynomial along any ray segment that does not
//! cross a plane through voxel centres, so the traversal collects every such
//! crossing (Siddon-style parametric plane intersections) and integrates each
//! segment with two-point Gauss-Legendre, which is exact for cubics.

use tnt::geometry::Ray;
use tnt::volume::Volume;

fn interpolant(vol: &Volume, p: [f64; 3]) -> f64 {
    let e = &vol.extent;
    let lo = e.min_corner.to_array();
    let hi = e.max_corner.to_array();
    let n = [e.nx, e.ny, e.nz];
    let mut base = [0usize; 3];
    let mut next = [0usize; 3];
    let mut frac = [0.0; 3];
    for a in 0..3 {
        let h = (hi[a] - lo[a]) / n[a] as f64;
        let g = (p[a] - lo[a]) / h - 0.5;
        if g <= 0.0 {
            base[a] = 0;
            next[a] = 0;
            frac[a] = 0.0;
        } else if g >= (n[a] - 1) as f64 {
            base[a] = n[a] - 1;
            next[a] = n[a] - 1;
            frac[a] = 0.0;
        } else {
            let f = g.floor();
            base[a] = f as usize;
            next[a] = base[a] + 1;
            frac[a] = g - f;
        }
    }
    let at = |i: usize, j: usize, k: usize| vol.data[i + n[0] * (j + n[1] * k)] as f64;
    let mut acc = 0.0;
    for corner in 0..8 {
        let pick = |a: usize| if corner >> a & 1 == 1 { (next[a], frac[a]) } else { (base[a], 1.0 - frac[a]) };
        let (i, wx) = pick(0);
        let (j, wy) = pick(1);
        let (k, wz) = pick(2);
        acc += wx * wy * wz * at(i, j, k);
    }
    acc
}

/// Exact integral of the interpolated volume along the part of `ray` inside the box.
pub fn exact_line_integral(vol: &Volume, ray: &Ray) -> f64 {
    let e = &vol.extent;
    let o = ray.origin.to_array();
    let d = ray.direction.to_array();
    let lo = e.min_corner.to_array();
    let hi = e.max_corner.to_array();
    let n = [e.nx, e.ny, e.nz];

    let mut t0 = ray.t_near;
    let mut t1 = ray.t_far;
    for a in 0..3 {
        if d[a].abs() < 1e-300 {
            if o[a] < lo[a] || o[a] > hi[a] {
                return 0.0;
            }
        } else {
            let ta = (lo[a] - o[a]) / d[a];
            let tb = (hi[a] - o[a]) / d[a];
            t0 = t0.max(ta.min(tb));
            t1 = t1.min(ta.max(tb));
        }
    }
    if t1 <= t0 {
        return 0.0;
    }

    let mut ts = vec![t0, t1];
    for a in 0..3 {
        if d[a].abs() < 1e-300 {
            continue;
        }
        let h = (hi[a] - lo[a]) / n[a] as f64;
        for i in 0..n[a] {
            let plane = lo[a] + (i as f64 + 0.5) * h;
            let t = (plane - o[a]) / d[a];
            if t > t0 && t < t1 {
                ts.push(t);
            }
        }
    }
    ts.sort_by(|a, b| a.partial_cmp(b).unwrap());

    let g = 0.5 / 3f64.sqrt();
    let point = |t: f64| [o[0] + t * d[0], o[1] + t * d[1], o[2] + t * d[2]];
    let mut total = 0.0;
    for w in ts.windows(2) {
        let len = w[1] - w[0];
        if len <= 0.0 {
            continue;
        }
        let mid = 0.5 * (w[0] + w[1]);
        let fa = interpolant(vol, point(mid - g * len));
        let fb = interpolant(vol, point(mid + g * len));
        total += 0.5 * len * (fa + fb);
    }
    total
}

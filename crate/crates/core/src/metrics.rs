//! Volume quality metrics and experiment reports.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::volume::Volume;

/// SSIM window side (voxels).
pub const SSIM_WINDOW: usize = 7;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum IdenticalTag {
    #[serde(rename = "identical")]
    Identical,
}

/// PSNR in dB, or a flag when the volumes are identical (infinite PSNR).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Psnr {
    Db(f64),
    Identical(IdenticalTag),
}

impl Psnr {
    pub fn db(&self) -> Option<f64> {
        match *self {
            Psnr::Db(v) => Some(v),
            Psnr::Identical(_) => None,
        }
    }

    pub fn is_identical(&self) -> bool {
        matches!(self, Psnr::Identical(_))
    }

    /// Numeric value with identical volumes mapped to `+inf`, for ordering.
    pub fn value(&self) -> f64 {
        self.db().unwrap_or(f64::INFINITY)
    }
}

fn check_pair(a: &Volume, b: &Volume, data_range: f64) -> Result<()> {
    if !a.same_shape(b) {
        return invalid(format!("volume shapes differ: {:?} vs {:?}", a.dims(), b.dims()));
    }
    if !(data_range > 0.0 && data_range.is_finite()) {
        return invalid("data_range must be positive and finite");
    }
    Ok(())
}

pub fn mse(a: &Volume, b: &Volume) -> Result<f64> {
    check_pair(a, b, 1.0)?;
    let s: f64 = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    Ok(s / a.len() as f64)
}

/// `10 log10(range^2 / MSE)`.
pub fn psnr(a: &Volume, b: &Volume, data_range: f64) -> Result<Psnr> {
    check_pair(a, b, data_range)?;
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(Psnr::Identical(IdenticalTag::Identical));
    }
    Ok(Psnr::Db(10.0 * (data_range * data_range / m).log10()))
}

/// Summed-volume table with a zero border: `t[(k+1)(j+1)(i+1)]` holds the
/// sum over `[0..=i] x [0..=j] x [0..=k]`.
struct SumTable {
    t: Vec<f64>,
    sx: usize,
    sxy: usize,
}

impl SumTable {
    fn new(dims: [usize; 3], f: impl Fn(usize) -> f64) -> Self {
        let [nx, ny, nz] = dims;
        let (sx, sy) = (nx + 1, ny + 1);
        let sxy = sx * sy;
        let mut t = vec![0.0; sxy * (nz + 1)];
        for k in 0..nz {
            for j in 0..ny {
                let mut row = 0.0;
                for i in 0..nx {
                    row += f(i + nx * (j + ny * k));
                    let idx = (i + 1) + sx * (j + 1) + sxy * (k + 1);
                    t[idx] = row + t[idx - sx] + t[idx - sxy] - t[idx - sx - sxy];
                }
            }
        }
        Self { t, sx, sxy }
    }

    /// Sum over the cube `[i, i+w) x [j, j+w) x [k, k+w)`.
    #[inline]
    fn cube(&self, i: usize, j: usize, k: usize, w: usize) -> f64 {
        let at = |a: usize, b: usize, c: usize| self.t[a + self.sx * b + self.sxy * c];
        let (i1, j1, k1) = (i + w, j + w, k + w);
        at(i1, j1, k1) - at(i, j1, k1) - at(i1, j, k1) - at(i1, j1, k) + at(i, j, k1) + at(i, j1, k) + at(i1, j, k)
            - at(i, j, k)
    }
}

/// Mean structural similarity over every fully contained 7^3 window, using
/// uniform weights and population statistics.
pub fn ssim(a: &Volume, b: &Volume, data_range: f64) -> Result<f64> {
    check_pair(a, b, data_range)?;
    let dims = a.dims();
    let w = SSIM_WINDOW;
    if dims.iter().any(|&d| d < w) {
        return invalid(format!("volume {dims:?} is smaller than the {w}^3 SSIM window"));
    }
    let x = |i: usize| a.data[i] as f64;
    let y = |i: usize| b.data[i] as f64;
    let sa = SumTable::new(dims, x);
    let sb = SumTable::new(dims, y);
    let saa = SumTable::new(dims, |i| x(i) * x(i));
    let sbb = SumTable::new(dims, |i| y(i) * y(i));
    let sab = SumTable::new(dims, |i| x(i) * y(i));
    let c1 = (SSIM_K1 * data_range).powi(2);
    let c2 = (SSIM_K2 * data_range).powi(2);
    let n = (w * w * w) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for k in 0..=dims[2] - w {
        for j in 0..=dims[1] - w {
            for i in 0..=dims[0] - w {
                let ma = sa.cube(i, j, k, w) / n;
                let mb = sb.cube(i, j, k, w) / n;
                let va = (saa.cube(i, j, k, w) / n - ma * ma).max(0.0);
                let vb = (sbb.cube(i, j, k, w) / n - mb * mb).max(0.0);
                let cov = sab.cube(i, j, k, w) / n - ma * mb;
                let num = (2.0 * ma * mb + c1) * (2.0 * cov + c2);
                let den = (ma * ma + mb * mb + c1) * (va + vb + c2);
                total += num / den;
                count += 1;
            }
        }
    }
    Ok((total / count as f64).clamp(-1.0, 1.0))
}

/// How the metrics in a report were computed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricHeader {
    pub data_range: f64,
    pub ssim_window: String,
    pub ssim_k1: f64,
    pub ssim_k2: f64,
}

impl Default for MetricHeader {
    fn default() -> Self {
        Self {
            data_range: 1.0,
            ssim_window: format!("3d uniform {SSIM_WINDOW}x{SSIM_WINDOW}x{SSIM_WINDOW}, valid windows"),
            ssim_k1: SSIM_K1,
            ssim_k2: SSIM_K2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    pub views: usize,
    pub seed: u64,
    pub psnr: Psnr,
    pub ssim: f64,
    /// Omitted for deterministic runs so reports are reproducible byte for byte.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seconds: Option<f64>,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalReport {
    pub header: MetricHeader,
    pub rows: Vec<ReportRow>,
}

impl EvalReport {
    pub fn new(data_range: f64) -> Self {
        Self {
            header: MetricHeader {
                data_range,
                ..MetricHeader::default()
            },
            rows: Vec::new(),
        }
    }

    /// Scores `recon` against `truth` and appends a row.
    pub fn add(
        &mut self,
        method: &str,
        views: usize,
        seed: u64,
        recon: &Volume,
        truth: &Volume,
        seconds: Option<f64>,
        iterations: usize,
    ) -> Result<&ReportRow> {
        let row = ReportRow {
            method: method.to_string(),
            views,
            seed,
            psnr: psnr(recon, truth, self.header.data_range)?,
            ssim: ssim(recon, truth, self.header.data_range)?,
            seconds,
            iterations,
        };
        self.rows.push(row);
        Ok(self.rows.last().unwrap())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::VolumeExtent;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(n: usize, seed: u64) -> Volume {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        Volume::from_fn(VolumeExtent::cube(1.0, n).unwrap(), |_, _, _| r.gen())
    }

    /// Direct evaluation of one window, for cross-checking the summed tables.
    fn window_ssim(a: &Volume, b: &Volume, i0: usize, j0: usize, k0: usize, r: f64) -> f64 {
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for k in k0..k0 + 7 {
            for j in j0..j0 + 7 {
                for i in i0..i0 + 7 {
                    xs.push(a.get(i, j, k) as f64);
                    ys.push(b.get(i, j, k) as f64);
                }
            }
        }
        let n = xs.len() as f64;
        let ma = xs.iter().sum::<f64>() / n;
        let mb = ys.iter().sum::<f64>() / n;
        let va = xs.iter().map(|x| (x - ma).powi(2)).sum::<f64>() / n;
        let vb = ys.iter().map(|y| (y - mb).powi(2)).sum::<f64>() / n;
        let cov = xs.iter().zip(&ys).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / n;
        let (c1, c2) = ((0.01 * r).powi(2), (0.03 * r).powi(2));
        (2.0 * ma * mb + c1) * (2.0 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
    }

    #[test]
    fn psnr_examples() {
        let a = random(8, 1);
        assert!(psnr(&a, &a, 1.0).unwrap().is_identical());
        let b = a.map(|v| v + 0.1);
        let p = psnr(&a, &b, 1.0).unwrap().db().unwrap();
        assert!((p - 20.0).abs() < 1e-5, "{p}");
        let other = Volume::zeros(VolumeExtent::cube(1.0, 9).unwrap());
        assert!(psnr(&a, &other, 1.0).is_err());
        assert!(psnr(&a, &b, 0.0).is_err());
    }

    #[test]
    fn psnr_scale_invariance() {
        let a = random(10, 2);
        let b = random(10, 3);
        let p1 = psnr(&a, &b, 1.0).unwrap().db().unwrap();
        let p2 = psnr(&a.map(|v| v * 4.0), &b.map(|v| v * 4.0), 4.0).unwrap().db().unwrap();
        assert!((p1 - p2).abs() < 1e-9);
    }

    #[test]
    fn psnr_decreases_with_noise() {
        let a = random(12, 4);
        let mut r = ChaCha8Rng::seed_from_u64(5);
        let noise: Vec<f32> = (0..a.len()).map(|_| r.gen_range(-1.0..1.0)).collect();
        let mut last = f64::INFINITY;
        for amp in [0.01f32, 0.02, 0.05, 0.1, 0.2] {
            let b = Volume::from_data(a.extent, a.data.iter().zip(&noise).map(|(x, n)| x + amp * n).collect()).unwrap();
            let p = psnr(&a, &b, 1.0).unwrap().db().unwrap();
            assert!(p < last);
            last = p;
        }
    }

    #[test]
    fn ssim_matches_direct_windows() {
        let a = random(9, 6);
        let b = a.map(|v| 0.7 * v + 0.1);
        let mut sum = 0.0;
        for k in 0..3 {
            for j in 0..3 {
                for i in 0..3 {
                    sum += window_ssim(&a, &b, i, j, k, 1.0);
                }
            }
        }
        assert!((ssim(&a, &b, 1.0).unwrap() - sum / 27.0).abs() < 1e-10);
    }

    #[test]
    fn ssim_properties() {
        let a = random(10, 7);
        let b = random(10, 8);
        assert!((ssim(&a, &a, 1.0).unwrap() - 1.0).abs() < 1e-12);
        let s1 = ssim(&a, &b, 1.0).unwrap();
        assert!((s1 - ssim(&b, &a, 1.0).unwrap()).abs() < 1e-9);
        assert!((-1.0..=1.0).contains(&s1));
        let s2 = ssim(&a.map(|v| 3.0 * v), &b.map(|v| 3.0 * v), 3.0).unwrap();
        assert!((s1 - s2).abs() < 1e-6);
        let small = random(6, 1);
        assert!(ssim(&small, &small, 1.0).is_err());
    }

    #[test]
    fn report_serializes_identical_flag() {
        let a = random(8, 1);
        let mut r = EvalReport::new(1.0);
        r.add("x", 10, 0, &a, &a, None, 5).unwrap();
        let json = r.to_json().unwrap();
        assert!(json.contains("\"identical\""));
        assert!(!json.contains("seconds"));
        let back: EvalReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, r);
    }
}

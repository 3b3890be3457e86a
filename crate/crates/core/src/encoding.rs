//! Multiresolution hash-grid encoding with four feature streams.
//!
//! Each level stores four features per grid vertex. Stream `k` collects
//! feature `k` from every level, so the four field branches read disjoint
//! parameters while sharing one table and one hash function.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::geometry::Vec3;

pub const FEATURES_PER_LEVEL: usize = 4;
pub const HASH_PRIME_Y: u32 = 2_654_435_761;
pub const HASH_PRIME_Z: u32 = 805_459_861;
pub const INIT_SCALE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HashGridConfig {
    pub levels: usize,
    pub table_size_log2: u32,
    pub n_min: usize,
    pub growth: f64,
    pub features_per_level: usize,
}

impl HashGridConfig {
    /// Growth factor chosen so the finest level has `n_max` cells per axis.
    pub fn with_max_resolution(levels: usize, table_size_log2: u32, n_min: usize, n_max: usize) -> Result<Self> {
        if levels == 0 {
            return invalid("hash grid needs at least one level");
        }
        let growth = if levels == 1 {
            2.0
        } else {
            (n_max as f64 / n_min as f64).powf(1.0 / (levels - 1) as f64)
        };
        let c = Self {
            levels,
            table_size_log2,
            n_min,
            growth,
            features_per_level: FEATURES_PER_LEVEL,
        };
        c.validate()?;
        Ok(c)
    }

    /// 8 levels, 2^17 entries, resolutions 8..=`volume_size`.
    pub fn desk(volume_size: usize) -> Self {
        Self::with_max_resolution(8, 17, 8, volume_size.max(8)).expect("valid desk preset")
    }

    pub fn full() -> Self {
        Self::with_max_resolution(16, 19, 8, 256).expect("valid full preset")
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 {
            return invalid("hash grid needs at least one level");
        }
        if self.features_per_level != FEATURES_PER_LEVEL {
            return invalid(format!("features_per_level must be {FEATURES_PER_LEVEL}"));
        }
        if self.n_min == 0 || !(self.growth > 1.0) {
            return invalid("hash grid requires n_min >= 1 and growth > 1");
        }
        if !(1..=30).contains(&self.table_size_log2) {
            return invalid("table_size_log2 must be in 1..=30");
        }
        Ok(())
    }

    /// Cells per axis at `level`: `floor(n_min * growth^level)`.
    pub fn resolution(&self, level: usize) -> usize {
        // the small slack keeps exact powers (e.g. 8 * 8^(7/7) = 64) from flooring down
        (self.n_min as f64 * self.growth.powi(level as i32) + 1e-9).floor() as usize
    }

    pub fn table_size(&self) -> usize {
        1usize << self.table_size_log2
    }

    pub fn is_dense(&self, level: usize) -> bool {
        let v = self.resolution(level) + 1;
        v.saturating_mul(v).saturating_mul(v) <= self.table_size()
    }

    /// Entries stored for `level`: every vertex on dense levels, the full table otherwise.
    pub fn level_entries(&self, level: usize) -> usize {
        if self.is_dense(level) {
            (self.resolution(level) + 1).pow(3)
        } else {
            self.table_size()
        }
    }

    pub fn output_len(&self) -> usize {
        self.levels * self.features_per_level
    }
}

/// Table entry for integer vertex `coords` at `level`: dense row-major on
/// levels that fit, spatial hash otherwise.
#[inline]
pub fn cell_index(level: usize, coords: [u32; 3], config: &HashGridConfig) -> usize {
    let res = config.resolution(level);
    if config.is_dense(level) {
        let v = res + 1;
        coords[0] as usize + v * (coords[1] as usize + v * coords[2] as usize)
    } else {
        hash_index(coords, config.table_size() - 1)
    }
}

#[inline]
fn hash_index(coords: [u32; 3], mask: usize) -> usize {
    let h = coords[0] ^ coords[1].wrapping_mul(HASH_PRIME_Y) ^ coords[2].wrapping_mul(HASH_PRIME_Z);
    h as usize & mask
}

#[derive(Debug, Clone, Copy)]
struct LevelInfo {
    res: u32,
    dense: bool,
    offset: usize,
}

/// Parameter-free description of a hash grid: level resolutions and where
/// each level's entries live inside a flat table slice.
#[derive(Debug, Clone)]
pub struct HashEncoding {
    config: HashGridConfig,
    levels: Vec<LevelInfo>,
    n_params: usize,
}

impl HashEncoding {
    pub fn new(config: HashGridConfig) -> Result<Self> {
        config.validate()?;
        let mut levels = Vec::with_capacity(config.levels);
        let mut offset = 0;
        for l in 0..config.levels {
            levels.push(LevelInfo {
                res: config.resolution(l) as u32,
                dense: config.is_dense(l),
                offset,
            });
            offset += config.level_entries(l) * FEATURES_PER_LEVEL;
        }
        for w in levels.windows(2) {
            if w[1].res < w[0].res {
                return invalid("level resolutions must be non-decreasing");
            }
        }
        Ok(Self {
            config,
            levels,
            n_params: offset,
        })
    }

    pub fn config(&self) -> &HashGridConfig {
        &self.config
    }

    pub fn n_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn n_params(&self) -> usize {
        self.n_params
    }

    pub fn output_len(&self) -> usize {
        self.config.output_len()
    }

    pub fn init_tables<R: Rng + ?Sized>(&self, rng: &mut R, tables: &mut [f64]) {
        for t in tables.iter_mut() {
            *t = rng.gen_range(-INIT_SCALE..INIT_SCALE);
        }
    }

    /// Offset (into the table slice) of the first feature of each of the 8
    /// cell corners around `x` at `level`, plus their trilinear weights.
    #[inline]
    pub fn corners(&self, level: usize, x: Vec3) -> ([usize; 8], [f64; 8]) {
        let info = self.levels[level];
        let res = info.res;
        let resf = res as f64;
        let mut base = [0u32; 3];
        let mut frac = [0.0f64; 3];
        for (a, xa) in x.to_array().into_iter().enumerate() {
            let p = xa.clamp(0.0, 1.0) * resf;
            let i = (p.floor() as u32).min(res - 1);
            base[a] = i;
            frac[a] = p - i as f64;
        }
        let mask = self.config.table_size() - 1;
        let v = res as usize + 1;
        let mut offs = [0usize; 8];
        let mut w = [0.0f64; 8];
        for c in 0..8 {
            let (bx, by, bz) = ((c & 1) as u32, ((c >> 1) & 1) as u32, ((c >> 2) & 1) as u32);
            let coords = [base[0] + bx, base[1] + by, base[2] + bz];
            let entry = if info.dense {
                coords[0] as usize + v * (coords[1] as usize + v * coords[2] as usize)
            } else {
                hash_index(coords, mask)
            };
            offs[c] = info.offset + entry * FEATURES_PER_LEVEL;
            let wx = if bx == 1 { frac[0] } else { 1.0 - frac[0] };
            let wy = if by == 1 { frac[1] } else { 1.0 - frac[1] };
            let wz = if bz == 1 { frac[2] } else { 1.0 - frac[2] };
            w[c] = wx * wy * wz;
        }
        (offs, w)
    }

    /// Level-major encoding: `out[l * 4 + k]` is feature `k` of level `l`.
    pub fn encode(&self, tables: &[f64], x: Vec3, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.output_len());
        for l in 0..self.n_levels() {
            let (offs, w) = self.corners(l, x);
            let mut f = [0.0; FEATURES_PER_LEVEL];
            for c in 0..8 {
                let e = &tables[offs[c]..offs[c] + FEATURES_PER_LEVEL];
                for k in 0..FEATURES_PER_LEVEL {
                    f[k] += w[c] * e[k];
                }
            }
            out[l * FEATURES_PER_LEVEL..(l + 1) * FEATURES_PER_LEVEL].copy_from_slice(&f);
        }
    }

    /// Adds `weight * upstream` to every corner entry touched by `encode(x)`.
    pub fn encode_backward(&self, x: Vec3, upstream: &[f64], grad_tables: &mut [f64]) {
        debug_assert_eq!(upstream.len(), self.output_len());
        for l in 0..self.n_levels() {
            let (offs, w) = self.corners(l, x);
            let up = &upstream[l * FEATURES_PER_LEVEL..(l + 1) * FEATURES_PER_LEVEL];
            for c in 0..8 {
                let g = &mut grad_tables[offs[c]..offs[c] + FEATURES_PER_LEVEL];
                for k in 0..FEATURES_PER_LEVEL {
                    g[k] += w[c] * up[k];
                }
            }
        }
    }

    /// Batched encoding into stream-major layout `out[(k * L + l) * n + s]`
    /// for `n` points. Corner entries and weights are kept for the backward pass.
    pub fn encode_streams(&self, tables: &[f64], xs: &[Vec3], out: &mut [f64], cache: &mut EncodeCache) {
        let n = xs.len();
        let nl = self.n_levels();
        assert_eq!(out.len(), FEATURES_PER_LEVEL * nl * n);
        let (entries, rest) = tables.as_chunks::<FEATURES_PER_LEVEL>();
        assert!(rest.is_empty());
        cache.entries.resize(nl * n, [0; 8]);
        cache.weights.resize(nl * n, [0.0; 8]);
        cache.n = n;
        let mask = (self.config.table_size() - 1) as u32;
        for (l, info) in self.levels.iter().enumerate() {
            let resf = info.res as f64;
            let top = info.res - 1;
            let base_entry = (info.offset / FEATURES_PER_LEVEL) as u32;
            let v = info.res + 1;
            let dense_deltas = [0, 1, v, v + 1, v * v, v * v + 1, v * v + v, v * v + v + 1];
            let ce = &mut cache.entries[l * n..(l + 1) * n];
            let cw = &mut cache.weights[l * n..(l + 1) * n];
            for (s, x) in xs.iter().enumerate() {
                let mut cell = [0u32; 3];
                let mut frac = [0.0f64; 3];
                for (a, xa) in [x.x, x.y, x.z].into_iter().enumerate() {
                    let p = xa.clamp(0.0, 1.0) * resf;
                    let i = (p as u32).min(top);
                    cell[a] = i;
                    frac[a] = p - i as f64;
                }
                let mut ent = [0u32; 8];
                if info.dense {
                    let b = cell[0] + v * (cell[1] + v * cell[2]);
                    for c in 0..8 {
                        ent[c] = base_entry + b + dense_deltas[c];
                    }
                } else {
                    let hx = [cell[0], cell[0] + 1];
                    let hy = [cell[1].wrapping_mul(HASH_PRIME_Y), (cell[1] + 1).wrapping_mul(HASH_PRIME_Y)];
                    let hz = [cell[2].wrapping_mul(HASH_PRIME_Z), (cell[2] + 1).wrapping_mul(HASH_PRIME_Z)];
                    for c in 0..8 {
                        ent[c] = base_entry + ((hx[c & 1] ^ hy[(c >> 1) & 1] ^ hz[c >> 2]) & mask);
                    }
                }
                let wx = [1.0 - frac[0], frac[0]];
                let wy = [1.0 - frac[1], frac[1]];
                let wz = [1.0 - frac[2], frac[2]];
                let mut w = [0.0f64; 8];
                let mut f = [0.0f64; FEATURES_PER_LEVEL];
                for c in 0..8 {
                    w[c] = wx[c & 1] * wy[(c >> 1) & 1] * wz[c >> 2];
                    let e = &entries[ent[c] as usize];
                    for k in 0..FEATURES_PER_LEVEL {
                        f[k] += w[c] * e[k];
                    }
                }
                ce[s] = ent;
                cw[s] = w;
                for k in 0..FEATURES_PER_LEVEL {
                    out[(k * nl + l) * n + s] = f[k];
                }
            }
        }
    }

    /// Backward of [`encode_streams`]; `upstream` uses the same stream-major layout.
    /// Streams listed in `active` are the only ones propagated.
    pub fn backward_streams(&self, cache: &EncodeCache, upstream: &[f64], active: [bool; 4], grad_tables: &mut [f64]) {
        let n = cache.n;
        let nl = self.n_levels();
        assert_eq!(upstream.len(), FEATURES_PER_LEVEL * nl * n);
        let (grads, rest) = grad_tables.as_chunks_mut::<FEATURES_PER_LEVEL>();
        assert!(rest.is_empty());
        for l in 0..nl {
            let ce = &cache.entries[l * n..(l + 1) * n];
            let cw = &cache.weights[l * n..(l + 1) * n];
            for s in 0..n {
                let up: [f64; FEATURES_PER_LEVEL] = std::array::from_fn(|k| {
                    if active[k] {
                        upstream[(k * nl + l) * n + s]
                    } else {
                        0.0
                    }
                });
                for c in 0..8 {
                    let g = &mut grads[ce[s][c] as usize];
                    let w = cw[s][c];
                    for k in 0..FEATURES_PER_LEVEL {
                        g[k] += w * up[k];
                    }
                }
            }
        }
    }
}

/// Corner bookkeeping from a batched encode.
#[derive(Debug, Clone, Default)]
pub struct EncodeCache {
    entries: Vec<[u32; 8]>,
    weights: Vec<[f64; 8]>,
    n: usize,
}

/// Splits a level-major feature vector into the four per-branch streams
/// (alpha, beta, hard texture, soft texture).
pub fn split_features(feat: &[f64]) -> Result<[Vec<f64>; 4]> {
    if feat.len() % FEATURES_PER_LEVEL != 0 {
        return invalid(format!(
            "feature length {} is not a multiple of {FEATURES_PER_LEVEL}",
            feat.len()
        ));
    }
    let levels = feat.len() / FEATURES_PER_LEVEL;
    let stream = |k: usize| (0..levels).map(|l| feat[l * FEATURES_PER_LEVEL + k]).collect::<Vec<_>>();
    Ok([stream(0), stream(1), stream(2), stream(3)])
}

/// Inverse of [`split_features`].
pub fn merge_streams(streams: &[Vec<f64>; 4]) -> Result<Vec<f64>> {
    let levels = streams[0].len();
    if streams.iter().any(|s| s.len() != levels) {
        return invalid("streams differ in length");
    }
    let mut out = Vec::with_capacity(levels * FEATURES_PER_LEVEL);
    for l in 0..levels {
        for s in streams {
            out.push(s[l]);
        }
    }
    Ok(out)
}

/// An encoding together with its own table parameters.
#[derive(Debug, Clone)]
pub struct HashGrid {
    pub encoding: HashEncoding,
    pub tables: Vec<f64>,
}

impl HashGrid {
    pub fn new<R: Rng + ?Sized>(config: HashGridConfig, rng: &mut R) -> Result<Self> {
        let encoding = HashEncoding::new(config)?;
        let mut tables = vec![0.0; encoding.n_params()];
        encoding.init_tables(rng, &mut tables);
        Ok(Self { encoding, tables })
    }

    pub fn encode(&self, x: Vec3) -> Vec<f64> {
        let mut out = vec![0.0; self.encoding.output_len()];
        self.encoding.encode(&self.tables, x, &mut out);
        out
    }

    /// Gradient of `upstream . encode(x)` with respect to the tables.
    pub fn encode_backward(&self, x: Vec3, upstream: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; self.tables.len()];
        self.encoding.encode_backward(x, upstream, &mut g);
        g
    }
}

//! Neural attenuation fields on a hash-grid encoding.
//!
//! [`QuadField`] splits the encoding into four streams feeding an object
//! branch `alpha`, a hard-tissue branch `beta` and two texture maps `v_b`,
//! `v_s`, composed as `sigma = (alpha + eps) * (beta * v_b + v_s)`.
//! [`SingleField`] is the undivided baseline with one larger MLP.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoding::{EncodeCache, HashEncoding, HashGridConfig, FEATURES_PER_LEVEL};
use crate::error::{invalid, Error, Result};
use crate::geometry::{intersect_aabb, Ray, Vec3, VolumeExtent};
use crate::nn::{sigmoid, Mlp};
use crate::params::ParamSet;
use crate::volume::Volume;

/// Upper bound of the learned floor `eps`.
pub const EPS_MAX: f64 = 0.05;
/// Initial value of `eps`.
pub const EPS_INIT: f64 = 1e-3;
/// Width of the two hidden layers of each shape branch.
pub const SHAPE_WIDTH: usize = 32;

/// `sigma = (alpha + eps) * (beta * v_b + v_s)`.
#[inline]
pub fn compose_sigma(alpha: f64, beta: f64, v_b: f64, v_s: f64, eps: f64) -> f64 {
    (alpha + eps) * (beta * v_b + v_s)
}

#[inline]
pub fn eps_from_rho(rho: f64) -> f64 {
    EPS_MAX * sigmoid(rho)
}

pub fn rho_from_eps(eps: f64) -> Result<f64> {
    if !(eps > 0.0 && eps < EPS_MAX) {
        return invalid(format!("eps must lie in (0, {EPS_MAX})"));
    }
    let p = eps / EPS_MAX;
    Ok((p / (1.0 - p)).ln())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldKind {
    Quad,
    Single,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldConfig {
    pub kind: FieldKind,
    pub grid: HashGridConfig,
    /// Region of space mapped onto the unit cube of the encoding.
    pub domain: VolumeExtent,
}

impl FieldConfig {
    pub fn new(kind: FieldKind, grid: HashGridConfig, domain: VolumeExtent) -> Self {
        Self { kind, grid, domain }
    }
}

/// Accumulated line integrals of one ray.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RenderedRay {
    pub sigma_acc: f64,
    pub alpha_acc: f64,
    pub beta_acc: f64,
}

/// Soft stand-in for hard thresholding of a single-output field:
/// `sigmoid((sigma - t) / temperature)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSurrogate {
    pub t_alpha: f64,
    pub t_beta: f64,
    pub temperature: f64,
}

impl ThresholdSurrogate {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) || !self.t_alpha.is_finite() || !self.t_beta.is_finite() {
            return invalid("threshold surrogate needs finite thresholds and temperature > 0");
        }
        Ok(())
    }
}

/// Scratch buffers for batched evaluation. Forward state is kept for the
/// following backward call.
#[derive(Debug, Default, Clone)]
pub struct Workspace {
    n: usize,
    feats: Vec<f64>,
    dfeats: Vec<f64>,
    cache: EncodeCache,
    acts: [Vec<f64>; 4],
    /// Per-point branch outputs: quad `alpha, beta, v_b, v_s`; single `sigma`.
    comp: Vec<f64>,
    /// Per-point rendered channels `sigma, alpha, beta`.
    chan: Vec<f64>,
    dlogit: Vec<f64>,
    scratch: Vec<f64>,
    surrogate: Option<ThresholdSurrogate>,
}

impl Workspace {
    pub fn new() -> Self {
        Self::default()
    }

    /// Per-point channels from the last forward call: `[sigma | alpha | beta]`.
    pub fn channels(&self) -> &[f64] {
        &self.chan[..3 * self.n]
    }
}

#[derive(Debug, Clone)]
pub struct QuadField {
    config: FieldConfig,
    encoding: HashEncoding,
    alpha_mlp: Mlp,
    beta_mlp: Mlp,
    vb_map: Mlp,
    vs_map: Mlp,
    rho_index: usize,
    pub params: ParamSet,
}

#[derive(Debug, Clone)]
pub struct SingleField {
    config: FieldConfig,
    encoding: HashEncoding,
    mlp: Mlp,
    pub params: ParamSet,
}

/// Either field architecture.
#[derive(Debug, Clone)]
pub enum NeuralField {
    Quad(QuadField),
    Single(SingleField),
}

fn shape_sizes(levels: usize) -> Vec<usize> {
    vec![levels, SHAPE_WIDTH, SHAPE_WIDTH, 1]
}

/// Non-table parameters of a quad field with `levels` levels.
pub fn quad_network_params(levels: usize) -> usize {
    2 * Mlp::count_params(&shape_sizes(levels)) + 2 * Mlp::count_params(&[levels, 1]) + 1
}

/// Hidden width of the single-output MLP whose parameter count is closest
/// to the quad field's networks.
pub fn matched_single_width(levels: usize) -> usize {
    let target = quad_network_params(levels) as i64;
    let input = FEATURES_PER_LEVEL * levels;
    (1..=4096)
        .min_by_key(|&w| (Mlp::count_params(&[input, w, w, 1]) as i64 - target).abs())
        .unwrap()
}

fn normalize(domain: &VolumeExtent, p: Vec3) -> Vec3 {
    domain.normalize(p)
}

impl QuadField {
    pub fn new<R: Rng + ?Sized>(grid: HashGridConfig, domain: VolumeExtent, rng: &mut R) -> Result<Self> {
        let mut f = Self::uninit(FieldConfig::new(FieldKind::Quad, grid, domain))?;
        f.init(rng);
        Ok(f)
    }

    /// Layout only; every parameter is zero.
    pub fn uninit(config: FieldConfig) -> Result<Self> {
        if config.kind != FieldKind::Quad {
            return invalid("config does not describe a quad field");
        }
        config.domain.validate()?;
        let encoding = HashEncoding::new(config.grid.clone())?;
        let l = encoding.n_levels();
        let n_tables = encoding.n_params();
        let n_shape = Mlp::count_params(&shape_sizes(l));
        let n_map = Mlp::count_params(&[l, 1]);
        let params = ParamSet::with_layout(&[
            ("tables", n_tables),
            ("alpha_mlp", n_shape),
            ("beta_mlp", n_shape),
            ("vb_map", n_map),
            ("vs_map", n_map),
            ("rho", 1),
        ])?;
        let off = |name: &str| params.segment(name).unwrap().start;
        Ok(Self {
            alpha_mlp: Mlp::new(shape_sizes(l), off("alpha_mlp")),
            beta_mlp: Mlp::new(shape_sizes(l), off("beta_mlp")),
            vb_map: Mlp::new(vec![l, 1], off("vb_map")),
            vs_map: Mlp::new(vec![l, 1], off("vs_map")),
            rho_index: off("rho"),
            config,
            encoding,
            params,
        })
    }

    fn init<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        let tables = self.params.segment("tables").unwrap();
        self.encoding.init_tables(rng, &mut self.params.values[tables]);
        for m in [&self.alpha_mlp, &self.beta_mlp, &self.vb_map, &self.vs_map] {
            m.init(rng, &mut self.params.values);
        }
        self.params.values[self.rho_index] = rho_from_eps(EPS_INIT).unwrap();
    }

    pub fn config(&self) -> &FieldConfig {
        &self.config
    }

    pub fn encoding(&self) -> &HashEncoding {
        &self.encoding
    }

    pub fn eps(&self) -> f64 {
        eps_from_rho(self.params.values[self.rho_index])
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    /// `(alpha, beta, v_b, v_s)` at a point given in world coordinates.
    pub fn eval_components(&self, x: Vec3) -> Result<[f64; 4]> {
        let mut ws = Workspace::new();
        self.forward_points(&[normalize(&self.config.domain, x)], &mut ws)?;
        Ok([ws.comp[0], ws.comp[1], ws.comp[2], ws.comp[3]])
    }

    fn forward_points(&self, xs: &[Vec3], ws: &mut Workspace) -> Result<()> {
        let n = xs.len();
        let l = self.encoding.n_levels();
        let p = &self.params.values;
        ws.n = n;
        ws.feats.resize(FEATURES_PER_LEVEL * l * n, 0.0);
        let tables = &p[self.params.segment("tables").unwrap()];
        self.encoding.encode_streams(tables, xs, &mut ws.feats, &mut ws.cache);
        ws.comp.resize(4 * n, 0.0);
        let nets = [&self.alpha_mlp, &self.beta_mlp, &self.vb_map, &self.vs_map];
        for (k, net) in nets.iter().enumerate() {
            ws.acts[k].resize(net.acts_len(n), 0.0);
            let input = &ws.feats[k * l * n..(k + 1) * l * n];
            net.forward(p, input, n, &mut ws.acts[k]);
            let z = net.output(&ws.acts[k], n);
            for (c, &zv) in ws.comp[k * n..(k + 1) * n].iter_mut().zip(z) {
                *c = sigmoid(zv);
            }
        }
        let eps = self.eps();
        ws.chan.resize(3 * n, 0.0);
        let (a, rest) = ws.comp.split_at(n);
        let (b, rest) = rest.split_at(n);
        let (vb, vs) = rest.split_at(n);
        let (cs, rest) = ws.chan.split_at_mut(n);
        let (ca, cb) = rest.split_at_mut(n);
        for s in 0..n {
            cs[s] = compose_sigma(a[s], b[s], vb[s], vs[s], eps);
        }
        ca.copy_from_slice(a);
        cb.copy_from_slice(b);
        check_finite(cs, xs)
    }

    /// Adds the gradient of `sum(d_chan . chan)` to `grads`.
    fn backward_points(&self, ws: &mut Workspace, d_chan: &[f64], grads: &mut [f64]) {
        let n = ws.n;
        let l = self.encoding.n_levels();
        let p = &self.params.values;
        let eps = self.eps();
        let (ds, rest) = d_chan.split_at(n);
        let (da_ext, db_ext) = rest.split_at(n);
        ws.dlogit.resize(4 * n, 0.0);
        let (a, rest) = ws.comp.split_at(n);
        let (b, rest) = rest.split_at(n);
        let (vb, vs) = rest.split_at(n);
        let (ga, rest) = ws.dlogit.split_at_mut(n);
        let (gb, rest) = rest.split_at_mut(n);
        let (gvb, gvs) = rest.split_at_mut(n);
        let mut d_eps = 0.0;
        for s in 0..n {
            let tex = b[s] * vb[s] + vs[s];
            let ae = a[s] + eps;
            let d = ds[s];
            d_eps += d * tex;
            let d_a = d * tex + da_ext[s];
            let d_b = d * ae * vb[s] + db_ext[s];
            let d_vb = d * ae * b[s];
            let d_vs = d * ae;
            ga[s] = d_a * a[s] * (1.0 - a[s]);
            gb[s] = d_b * b[s] * (1.0 - b[s]);
            gvb[s] = d_vb * vb[s] * (1.0 - vb[s]);
            gvs[s] = d_vs * vs[s] * (1.0 - vs[s]);
        }
        let sr = sigmoid(p[self.rho_index]);
        grads[self.rho_index] += d_eps * EPS_MAX * sr * (1.0 - sr);

        ws.dfeats.resize(FEATURES_PER_LEVEL * l * n, 0.0);
        let nets = [&self.alpha_mlp, &self.beta_mlp, &self.vb_map, &self.vs_map];
        for (k, net) in nets.iter().enumerate() {
            let input = &ws.feats[k * l * n..(k + 1) * l * n];
            let d_in = &mut ws.dfeats[k * l * n..(k + 1) * l * n];
            net.backward(
                p,
                input,
                &ws.acts[k],
                &ws.dlogit[k * n..(k + 1) * n],
                n,
                grads,
                Some(d_in),
                &mut ws.scratch,
            );
        }
        let tables = self.params.segment("tables").unwrap();
        self.encoding
            .backward_streams(&ws.cache, &ws.dfeats, [true; 4], &mut grads[tables]);
    }
}

impl SingleField {
    pub fn new<R: Rng + ?Sized>(grid: HashGridConfig, domain: VolumeExtent, rng: &mut R) -> Result<Self> {
        let mut f = Self::uninit(FieldConfig::new(FieldKind::Single, grid, domain))?;
        let tables = f.params.segment("tables").unwrap();
        f.encoding.init_tables(rng, &mut f.params.values[tables]);
        f.mlp.init(rng, &mut f.params.values);
        Ok(f)
    }

    pub fn uninit(config: FieldConfig) -> Result<Self> {
        if config.kind != FieldKind::Single {
            return invalid("config does not describe a single-output field");
        }
        config.domain.validate()?;
        let encoding = HashEncoding::new(config.grid.clone())?;
        let l = encoding.n_levels();
        let w = matched_single_width(l);
        let sizes = vec![FEATURES_PER_LEVEL * l, w, w, 1];
        let params = ParamSet::with_layout(&[("tables", encoding.n_params()), ("mlp", Mlp::count_params(&sizes))])?;
        let mlp = Mlp::new(sizes, params.segment("mlp").unwrap().start);
        Ok(Self {
            config,
            encoding,
            mlp,
            params,
        })
    }

    pub fn config(&self) -> &FieldConfig {
        &self.config
    }

    pub fn hidden_width(&self) -> usize {
        self.mlp.sizes()[1]
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn eval_sigma(&self, x: Vec3) -> Result<f64> {
        let mut ws = Workspace::new();
        self.forward_points(&[normalize(&self.config.domain, x)], &mut ws)?;
        Ok(ws.comp[0])
    }

    fn forward_points(&self, xs: &[Vec3], ws: &mut Workspace) -> Result<()> {
        let n = xs.len();
        let p = &self.params.values;
        ws.n = n;
        ws.feats.resize(self.encoding.output_len() * n, 0.0);
        let tables = &p[self.params.segment("tables").unwrap()];
        self.encoding.encode_streams(tables, xs, &mut ws.feats, &mut ws.cache);
        ws.acts[0].resize(self.mlp.acts_len(n), 0.0);
        self.mlp.forward(p, &ws.feats, n, &mut ws.acts[0]);
        ws.comp.resize(n, 0.0);
        for (c, &z) in ws.comp.iter_mut().zip(self.mlp.output(&ws.acts[0], n)) {
            *c = sigmoid(z);
        }
        ws.chan.resize(3 * n, 0.0);
        let (cs, rest) = ws.chan.split_at_mut(n);
        let (ca, cb) = rest.split_at_mut(n);
        cs.copy_from_slice(&ws.comp);
        match ws.surrogate {
            Some(sur) => {
                for s in 0..n {
                    ca[s] = sigmoid((cs[s] - sur.t_alpha) / sur.temperature);
                    cb[s] = sigmoid((cs[s] - sur.t_beta) / sur.temperature);
                }
            }
            None => {
                ca.fill(0.0);
                cb.fill(0.0);
            }
        }
        check_finite(cs, xs)
    }

    fn backward_points(&self, ws: &mut Workspace, d_chan: &[f64], grads: &mut [f64]) {
        let n = ws.n;
        let p = &self.params.values;
        let (ds, rest) = d_chan.split_at(n);
        let (da, db) = rest.split_at(n);
        ws.dlogit.resize(n, 0.0);
        let sigma = &ws.comp[..n];
        let (ca, cb) = ws.chan[n..3 * n].split_at(n);
        for s in 0..n {
            let mut d = ds[s];
            if let Some(sur) = ws.surrogate {
                d += (da[s] * ca[s] * (1.0 - ca[s]) + db[s] * cb[s] * (1.0 - cb[s])) / sur.temperature;
            }
            ws.dlogit[s] = d * sigma[s] * (1.0 - sigma[s]);
        }
        ws.dfeats.resize(self.encoding.output_len() * n, 0.0);
        self.mlp.backward(
            p,
            &ws.feats,
            &ws.acts[0],
            &ws.dlogit,
            n,
            grads,
            Some(&mut ws.dfeats),
            &mut ws.scratch,
        );
        let tables = self.params.segment("tables").unwrap();
        self.encoding
            .backward_streams(&ws.cache, &ws.dfeats, [true; 4], &mut grads[tables]);
    }
}

fn check_finite(sigma: &[f64], xs: &[Vec3]) -> Result<()> {
    match sigma.iter().position(|v| !v.is_finite()) {
        None => Ok(()),
        Some(i) => Err(Error::NumericFailure(format!(
            "non-finite field value at normalized point ({:.4}, {:.4}, {:.4})",
            xs[i].x, xs[i].y, xs[i].z
        ))),
    }
}

impl NeuralField {
    /// Fresh field of the configured kind.
    pub fn new<R: Rng + ?Sized>(config: &FieldConfig, rng: &mut R) -> Result<Self> {
        Ok(match config.kind {
            FieldKind::Quad => NeuralField::Quad(QuadField::new(config.grid.clone(), config.domain, rng)?),
            FieldKind::Single => NeuralField::Single(SingleField::new(config.grid.clone(), config.domain, rng)?),
        })
    }

    pub fn uninit(config: &FieldConfig) -> Result<Self> {
        Ok(match config.kind {
            FieldKind::Quad => NeuralField::Quad(QuadField::uninit(config.clone())?),
            FieldKind::Single => NeuralField::Single(SingleField::uninit(config.clone())?),
        })
    }

    pub fn config(&self) -> &FieldConfig {
        match self {
            NeuralField::Quad(f) => &f.config,
            NeuralField::Single(f) => &f.config,
        }
    }

    pub fn kind(&self) -> FieldKind {
        self.config().kind
    }

    pub fn params(&self) -> &ParamSet {
        match self {
            NeuralField::Quad(f) => &f.params,
            NeuralField::Single(f) => &f.params,
        }
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        match self {
            NeuralField::Quad(f) => &mut f.params,
            NeuralField::Single(f) => &mut f.params,
        }
    }

    pub fn domain(&self) -> &VolumeExtent {
        &self.config().domain
    }

    /// Sets how a single-output field renders its alpha/beta channels
    /// (ignored by quad fields, whose channels come from their branches).
    pub fn set_surrogate(&self, ws: &mut Workspace, surrogate: Option<ThresholdSurrogate>) {
        ws.surrogate = match self {
            NeuralField::Quad(_) => None,
            NeuralField::Single(_) => surrogate,
        };
    }

    /// Evaluates `n` points given in normalized coordinates; per-point
    /// channels `[sigma | alpha | beta]` are left in the workspace.
    pub fn forward_points(&self, xs: &[Vec3], ws: &mut Workspace) -> Result<()> {
        match self {
            NeuralField::Quad(f) => f.forward_points(xs, ws),
            NeuralField::Single(f) => f.forward_points(xs, ws),
        }
    }

    /// Adds the gradient of `sum(d_chan . channels)` for the last forward call.
    pub fn backward_points(&self, ws: &mut Workspace, d_chan: &[f64], grads: &mut [f64]) {
        debug_assert_eq!(d_chan.len(), 3 * ws.n);
        debug_assert_eq!(grads.len(), self.params().len());
        match self {
            NeuralField::Quad(f) => f.backward_points(ws, d_chan, grads),
            NeuralField::Single(f) => f.backward_points(ws, d_chan, grads),
        }
    }

    /// Midpoint-quadrature rendering of a world-space ray; the ray is clipped
    /// to the field domain and misses render as zero.
    pub fn render_ray(&self, ray: &Ray, n_samples: usize, ws: &mut Workspace) -> Result<RenderedRay> {
        if n_samples == 0 {
            return invalid("n_samples must be positive");
        }
        let domain = *self.domain();
        let Some((t0, t1)) = intersect_aabb(ray, &domain) else {
            return Ok(RenderedRay::default());
        };
        let dt = (t1 - t0) / n_samples as f64;
        let xs: Vec<Vec3> = (0..n_samples)
            .map(|i| normalize(&domain, ray.at(t0 + (i as f64 + 0.5) * dt)))
            .collect();
        self.forward_points(&xs, ws)?;
        let ch = ws.channels();
        let n = n_samples;
        Ok(RenderedRay {
            sigma_acc: ch[..n].iter().sum::<f64>() * dt,
            alpha_acc: ch[n..2 * n].iter().sum::<f64>() * dt,
            beta_acc: ch[2 * n..].iter().sum::<f64>() * dt,
        })
    }

    /// Evaluates the field at every voxel center of `extent`.
    pub fn extract_volume(&self, extent: &VolumeExtent) -> Result<Volume> {
        Ok(self.extract(extent, false)?.sigma)
    }

    /// Sigma plus the per-branch volumes (quad fields only report branches).
    pub fn extract_components(&self, extent: &VolumeExtent) -> Result<ExtractedVolumes> {
        self.extract(extent, true)
    }

    fn extract(&self, extent: &VolumeExtent, components: bool) -> Result<ExtractedVolumes> {
        extent.validate()?;
        let domain = *self.domain();
        let centers: Vec<Vec3> = {
            let mut v = Vec::with_capacity(extent.len());
            for k in 0..extent.nz {
                for j in 0..extent.ny {
                    for i in 0..extent.nx {
                        v.push(normalize(&domain, extent.voxel_center(i, j, k)));
                    }
                }
            }
            v
        };
        let quad = matches!(self, NeuralField::Quad(_));
        let n_comp = if components && quad { 4 } else { 0 };
        let mut sigma = Vec::with_capacity(extent.len());
        let mut comp: Vec<Vec<f32>> = vec![Vec::with_capacity(extent.len()); n_comp];
        let mut ws = Workspace::new();
        const CHUNK: usize = 4096;
        for chunk in centers.chunks(CHUNK) {
            self.forward_points(chunk, &mut ws)?;
            let n = chunk.len();
            sigma.extend(ws.chan[..n].iter().map(|&v| v as f32));
            for (c, dst) in comp.iter_mut().enumerate() {
                dst.extend(ws.comp[c * n..(c + 1) * n].iter().map(|&v| v as f32));
            }
        }
        let mut comp = comp.into_iter().map(|d| Volume::from_data(*extent, d));
        let mut next = || comp.next().transpose();
        Ok(ExtractedVolumes {
            sigma: Volume::from_data(*extent, sigma)?,
            alpha: next()?,
            beta: next()?,
            v_b: next()?,
            v_s: next()?,
        })
    }
}

/// Voxel grids sampled from a field.
#[derive(Debug, Clone)]
pub struct ExtractedVolumes {
    pub sigma: Volume,
    pub alpha: Option<Volume>,
    pub beta: Option<Volume>,
    pub v_b: Option<Volume>,
    pub v_s: Option<Volume>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(5)
    }

    fn small_grid() -> HashGridConfig {
        HashGridConfig::with_max_resolution(4, 12, 4, 16).unwrap()
    }

    fn unit() -> VolumeExtent {
        VolumeExtent::cube(1.0, 8).unwrap()
    }

    fn quad() -> QuadField {
        QuadField::new(small_grid(), unit(), &mut rng()).unwrap()
    }

    /// Quad field with constant branch outputs set through the map biases.
    fn constant_quad(alpha: f64, beta: f64, vb: f64, vs: f64) -> NeuralField {
        let mut f = QuadField::uninit(FieldConfig::new(FieldKind::Quad, small_grid(), unit())).unwrap();
        let logit = |p: f64| (p / (1.0 - p)).ln();
        for (name, v) in [("alpha_mlp", alpha), ("beta_mlp", beta), ("vb_map", vb), ("vs_map", vs)] {
            let seg = f.params.get_mut(name).unwrap();
            let last = seg.len() - 1;
            seg[last] = logit(v);
        }
        f.params.values[f.rho_index] = -60.0;
        NeuralField::Quad(f)
    }

    #[test]
    fn compose_examples() {
        assert_eq!(compose_sigma(1.0, 0.0, 0.123, 0.5, 0.0), 0.5);
        let hard = compose_sigma(1.0, 1.0, 0.4, 0.3, 0.0);
        let soft = compose_sigma(1.0, 0.0, 0.4, 0.3, 0.0);
        assert!((hard - 0.7).abs() < 1e-15 && (soft - 0.3).abs() < 1e-15 && hard > soft);
        assert!((compose_sigma(0.0, 0.0, 0.9, 0.3, 0.01) - 0.003).abs() < 1e-15);
    }

    #[test]
    fn eps_parameterization() {
        let f = quad();
        assert!((f.eps() - EPS_INIT).abs() < 1e-15);
        for rho in [-1e3, -5.0, 0.0, 5.0, 30.0] {
            let e = eps_from_rho(rho);
            assert!((0.0..EPS_MAX).contains(&e));
        }
        assert!(rho_from_eps(0.0).is_err() && rho_from_eps(EPS_MAX).is_err());
    }

    #[test]
    fn zero_parameters_give_one_half() {
        let f = QuadField::uninit(FieldConfig::new(FieldKind::Quad, small_grid(), unit())).unwrap();
        assert_eq!(f.eval_components(Vec3::new(0.1, -0.2, 0.3)).unwrap(), [0.5; 4]);
    }

    #[test]
    fn streams_are_disjoint() {
        let mut f = quad();
        let x = Vec3::new(0.13, -0.21, 0.05);
        let before = f.eval_components(x).unwrap();
        // perturb only the beta stream (feature 1 of every entry)
        let tables = f.params.segment("tables").unwrap();
        for i in tables.step_by(FEATURES_PER_LEVEL) {
            f.params.values[i + 1] += 0.5;
        }
        let after = f.eval_components(x).unwrap();
        assert_eq!(before[0], after[0]);
        assert_eq!(before[2], after[2]);
        assert_eq!(before[3], after[3]);
        assert_ne!(before[1], after[1]);
    }

    #[test]
    fn parameter_budget_matches() {
        let domain = unit();
        for grid in [small_grid(), HashGridConfig::desk(64)] {
            let q = QuadField::uninit(FieldConfig::new(FieldKind::Quad, grid.clone(), domain)).unwrap();
            let s = SingleField::uninit(FieldConfig::new(FieldKind::Single, grid, domain)).unwrap();
            let rel = (s.n_params() as f64 - q.n_params() as f64).abs() / q.n_params() as f64;
            assert!(rel <= 0.02, "relative parameter mismatch {rel}");
        }
        assert_eq!(matched_single_width(8), 38);
    }

    #[test]
    fn constant_field_renders_chord() {
        let f = constant_quad(0.999_999, 1e-9, 0.5, 0.5);
        let mut ws = Workspace::new();
        let ray = Ray::new(Vec3::new(-2.0, 0.1, 0.0), Vec3::new(1.0, 0.0, 0.0), 0.0, 4.0);
        let r = f.render_ray(&ray, 64, &mut ws).unwrap();
        assert!((r.sigma_acc - 0.5).abs() < 1e-5, "{r:?}");
        assert!((r.alpha_acc - 1.0).abs() < 1e-5);
        assert!(r.beta_acc < 1e-8);
        let miss = Ray::new(Vec3::new(-2.0, 3.0, 0.0), Vec3::new(1.0, 0.0, 0.0), 0.0, 4.0);
        assert_eq!(f.render_ray(&miss, 8, &mut ws).unwrap(), RenderedRay::default());
    }

    #[test]
    fn single_sample_is_midpoint_rule() {
        let f = NeuralField::Quad(quad());
        let mut ws = Workspace::new();
        let ray = Ray::new(Vec3::new(-1.0, -1.0, 0.1), Vec3::new(1.0, 1.2, 0.0), 0.0, 3.0);
        let (t0, t1) = intersect_aabb(&ray, &unit()).unwrap();
        let mid = ray.at(0.5 * (t0 + t1));
        let NeuralField::Quad(q) = &f else { unreachable!() };
        let c = q.eval_components(mid).unwrap();
        let expected = compose_sigma(c[0], c[1], c[2], c[3], q.eps()) * (t1 - t0);
        let r = f.render_ray(&ray, 1, &mut ws).unwrap();
        assert!((r.sigma_acc - expected).abs() < 1e-14);
    }

    #[test]
    fn extraction_is_consistent() {
        let f = NeuralField::Quad(quad());
        let ext = VolumeExtent::cube(1.0, 9).unwrap();
        let v = f.extract_components(&ext).unwrap();
        let eps = match &f {
            NeuralField::Quad(q) => q.eps(),
            _ => unreachable!(),
        };
        let (a, b, vb, vs) = (v.alpha.unwrap(), v.beta.unwrap(), v.v_b.unwrap(), v.v_s.unwrap());
        for i in 0..ext.len() {
            let s = compose_sigma(a.data[i] as f64, b.data[i] as f64, vb.data[i] as f64, vs.data[i] as f64, eps);
            assert!((s - v.sigma.data[i] as f64).abs() < 1e-6);
            assert!(v.sigma.data[i] >= 0.0);
        }
        assert_eq!(f.extract_volume(&ext).unwrap(), v.sigma);
        let c = constant_quad(0.9, 0.2, 0.3, 0.4).extract_volume(&ext).unwrap();
        assert!(c.data.iter().all(|&x| x == c.data[0]));
    }

    #[test]
    fn single_field_surrogate_saturates() {
        let mut f = SingleField::uninit(FieldConfig::new(FieldKind::Single, small_grid(), unit())).unwrap();
        let last = f.params.len() - 1;
        f.params.values[last] = 4.0; // sigma ~ 0.982
        let f = NeuralField::Single(f);
        let mut ws = Workspace::new();
        f.set_surrogate(
            &mut ws,
            Some(ThresholdSurrogate {
                t_alpha: 0.05,
                t_beta: 0.45,
                temperature: 0.01,
            }),
        );
        let ray = Ray::new(Vec3::new(-2.0, 0.0, 0.0), Vec3::new(1.0, 0.0, 0.0), 0.0, 4.0);
        let r = f.render_ray(&ray, 32, &mut ws).unwrap();
        assert!((r.alpha_acc - 1.0).abs() < 0.01 && (r.beta_acc - 1.0).abs() < 0.01);
    }

    proptest! {
        #[test]
        fn outputs_stay_in_unit_interval(x in -0.6f64..0.6, y in -0.6f64..0.6, z in -0.6f64..0.6, seed in 0u64..50) {
            let f = QuadField::new(small_grid(), unit(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let c = f.eval_components(Vec3::new(x, y, z)).unwrap();
            for v in c {
                prop_assert!(v > 0.0 && v < 1.0);
            }
        }

        #[test]
        fn sigma_monotone_in_beta(a in 0.0f64..1.0, b in 0.0f64..0.99, db in 1e-3f64..0.01,
                                  vb in 1e-3f64..1.0, vs in 0.0f64..1.0, eps in 1e-6f64..0.05) {
            let lo = compose_sigma(a, b, vb, vs, eps);
            let hi = compose_sigma(a, b + db, vb, vs, eps);
            prop_assert!(lo >= 0.0);
            prop_assert!(hi > lo);
        }
    }
}
